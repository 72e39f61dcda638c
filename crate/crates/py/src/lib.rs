//! Python bindings. Boxes cross the boundary as `(x, y, w, h)` tuples,
//! images as `(w, h, channels, data)` and reports as JSON strings.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ceutrack_core::bbox::{BBox, CenterBox};
use ceutrack_core::eval::{self, BaselineSRTable, VideoResult};
use ceutrack_core::event_io::{
    self, generate_synthetic, slice_window, EventFormat, EventPoint, Polarity,
    SyntheticSceneConfig, TrackAnnotation,
};
use ceutrack_core::loss::{self, FocalVariant, ScoreTarget};
use ceutrack_core::model::{track_sequence, ModelConfig, ModelParams, TrackerSettings};
use ceutrack_core::repr::{self, Image};
use ceutrack_core::voxel::{self, GridSpec};
use ceutrack_core::Error;

type BoxTuple = (f64, f64, f64, f64);
type ImageTuple = (usize, usize, usize, Vec<f64>);
/// `(video_id, predictions, gt_boxes, absent, attributes)`.
type VideoTuple = (String, Vec<BoxTuple>, Vec<BoxTuple>, Vec<bool>, Vec<String>);

fn err(e: Error) -> PyErr {
    if e.is_data_error() || matches!(e, Error::InvalidArgument(_)) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_box(b: BoxTuple) -> BBox {
    BBox {
        x: b.0,
        y: b.1,
        w: b.2,
        h: b.3,
    }
}

fn from_box(b: &BBox) -> BoxTuple {
    (b.x, b.y, b.w, b.h)
}

fn center(b: BoxTuple) -> CenterBox {
    CenterBox::new(b.0, b.1, b.2, b.3)
}

fn image_out(img: Image) -> ImageTuple {
    (img.w, img.h, img.channels, img.data)
}

fn image_in(img: ImageTuple) -> PyResult<Image> {
    Image::from_data(img.0, img.1, img.2, img.3).map_err(err)
}

/// A sorted event stream with its sensor size.
#[pyclass(module = "ceutrack")]
struct EventStream {
    inner: event_io::EventStream,
}

#[pymethods]
impl EventStream {
    #[new]
    #[pyo3(signature = (events, sensor_w, sensor_h))]
    fn new(events: Vec<(u64, u16, u16, i8)>, sensor_w: u16, sensor_h: u16) -> PyResult<Self> {
        let events = events
            .into_iter()
            .map(|(t, x, y, p)| {
                let p = match p {
                    1 => Polarity::Positive,
                    -1 => Polarity::Negative,
                    _ => {
                        return Err(PyValueError::new_err(format!(
                            "polarity must be +1 or -1, got {p}"
                        )))
                    }
                };
                Ok(EventPoint { t, x, y, p })
            })
            .collect::<PyResult<Vec<_>>>()?;
        // the CSV parser owns the bounds and ordering checks
        let csv = event_io::serialize_events_csv(&events);
        let inner =
            event_io::parse_events(csv.as_bytes(), EventFormat::Csv, Some((sensor_w, sensor_h)))
                .map_err(err)?;
        Ok(Self { inner })
    }

    /// Parses CSV (`t,x,y,p`) or binary bytes; CSV needs `sensor`.
    #[staticmethod]
    #[pyo3(signature = (data, format, sensor=None))]
    fn parse(data: &[u8], format: &str, sensor: Option<(u16, u16)>) -> PyResult<Self> {
        let format = match format {
            "csv" => EventFormat::Csv,
            "bin" | "binary" => EventFormat::Binary,
            other => return Err(PyValueError::new_err(format!("unknown format '{other}'"))),
        };
        let inner = event_io::parse_events(data, format, sensor).map_err(err)?;
        Ok(Self { inner })
    }

    fn to_csv(&self) -> String {
        event_io::serialize_events_csv(&self.inner.events)
    }

    fn to_binary(&self) -> Vec<u8> {
        event_io::serialize_events_binary(&self.inner)
    }

    #[getter]
    fn sensor(&self) -> (u16, u16) {
        (self.inner.sensor_w, self.inner.sensor_h)
    }

    #[getter]
    fn events(&self) -> Vec<(u64, u16, u16, i8)> {
        self.inner
            .events
            .iter()
            .map(|e| (e.t, e.x, e.y, e.p.sign() as i8))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.events.len()
    }

    /// Voxel counts on the default grid over `[t0, t1)` as `(z, y, x, count)`.
    fn voxel_counts(&self, t0: u64, t1: u64) -> PyResult<Vec<(usize, usize, usize, u32)>> {
        let win = self.window(t0, t1)?;
        let set = voxel::voxelize(&win, &GridSpec::with_defaults(&win)).map_err(err)?;
        Ok(set
            .voxels
            .iter()
            .map(|v| (v.cell.z, v.cell.y, v.cell.x, v.count))
            .collect())
    }

    /// Top-k voxel tensor over `[t0, t1)`: `k` rows of features, zero padded.
    fn top_k(&self, t0: u64, t1: u64, k: usize) -> PyResult<(Vec<Vec<f64>>, usize)> {
        let win = self.window(t0, t1)?;
        let set = voxel::voxelize(&win, &GridSpec::with_defaults(&win)).map_err(err)?;
        let t = voxel::select_top_k(&set.voxels, k).map_err(err)?;
        Ok((
            t.rows.iter().map(|v| v.row().to_vec()).collect(),
            t.occupied,
        ))
    }

    fn render_event_frame(&self, t0: u64, t1: u64) -> PyResult<ImageTuple> {
        let win = self.window(t0, t1)?;
        let (w, h) = (usize::from(win.sensor_w), usize::from(win.sensor_h));
        Ok(image_out(repr::render_event_frame(&win, w, h)))
    }

    fn render_time_surface(&self, t0: u64, t1: u64, decay_tau: f64) -> PyResult<ImageTuple> {
        let win = self.window(t0, t1)?;
        let (w, h) = (usize::from(win.sensor_w), usize::from(win.sensor_h));
        repr::render_time_surface(&win, w, h, decay_tau)
            .map(image_out)
            .map_err(err)
    }
}

impl EventStream {
    fn window(&self, t0: u64, t1: u64) -> PyResult<event_io::EventWindow> {
        slice_window(
            &self.inner.events,
            t0,
            t1,
            self.inner.sensor_w,
            self.inner.sensor_h,
        )
        .map_err(err)
    }
}

#[pyfunction]
fn blend_early_fusion(color: ImageTuple, event_frame: ImageTuple) -> PyResult<ImageTuple> {
    repr::blend_early_fusion(&image_in(color)?, &image_in(event_frame)?)
        .map(image_out)
        .map_err(err)
}

#[pyfunction]
fn iou(a: BoxTuple, b: BoxTuple) -> f64 {
    eval::iou(&to_box(a), &to_box(b))
}

/// GIoU loss on center-format boxes: `(value, grad_target, grad_pred)`.
#[pyfunction]
fn giou_loss(target: BoxTuple, pred: BoxTuple) -> PyResult<(f64, [f64; 4], [f64; 4])> {
    let l = loss::giou_loss(&center(target), &center(pred)).map_err(err)?;
    Ok((l.value, l.grad_target, l.grad_pred))
}

#[pyfunction]
fn l1_loss(target: BoxTuple, pred: BoxTuple) -> (f64, [f64; 4], [f64; 4]) {
    let l = loss::l1_loss(&center(target), &center(pred));
    (l.value, l.grad_target, l.grad_pred)
}

/// Focal loss of a `side x side` score map against the Gaussian target of
/// a normalized center-format box.
#[pyfunction]
#[pyo3(signature = (scores, gt, side=16, variant="penalty_reduced"))]
fn focal_loss(
    scores: Vec<f64>,
    gt: BoxTuple,
    side: usize,
    variant: &str,
) -> PyResult<(f64, Vec<f64>)> {
    let variant = match variant {
        "penalty_reduced" => FocalVariant::PenaltyReduced,
        "binary" => FocalVariant::Binary,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown focal variant '{other}'"
            )))
        }
    };
    let target = ScoreTarget::gaussian(&center(gt), side);
    let l = loss::focal_loss(&scores, &target, variant).map_err(err)?;
    Ok((l.value, l.grad))
}

/// Evaluates videos given as `(video_id, predictions, gt_boxes, absent, attributes)`
/// and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (videos, baseline_csv=None))]
fn evaluate(videos: Vec<VideoTuple>, baseline_csv: Option<&str>) -> PyResult<String> {
    let results = videos
        .into_iter()
        .map(|(video_id, preds, gt, absent, attrs)| {
            if absent.len() != gt.len() {
                return Err(PyValueError::new_err(
                    "absent flags must match the ground-truth length",
                ));
            }
            Ok(VideoResult {
                video_id,
                predictions: preds.into_iter().map(to_box).collect(),
                gt: gt
                    .into_iter()
                    .zip(absent)
                    .enumerate()
                    .map(|(frame_idx, (b, absent))| TrackAnnotation {
                        frame_idx,
                        bbox: to_box(b),
                        absent,
                    })
                    .collect(),
                attributes: attrs
                    .iter()
                    .map(|a| a.parse())
                    .collect::<Result<_, _>>()
                    .map_err(err)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let mut report = eval::aggregate(&results).map_err(err)?;
    if let Some(csv) = baseline_csv {
        report = report
            .with_boc(&BaselineSRTable::parse_csv(csv).map_err(err)?)
            .map_err(err)?;
    }
    Ok(report.to_json())
}

/// BOC of per-video SR fractions against an `sr[video][tracker]` table.
#[pyfunction]
fn boc(eval_sr: Vec<f64>, sr_table: Vec<Vec<f64>>) -> PyResult<f64> {
    let trackers = sr_table.first().map_or(0, Vec::len);
    let table = BaselineSRTable::new(
        (0..trackers).map(|i| format!("t{i}")).collect(),
        (0..sr_table.len()).map(|i| format!("v{i}")).collect(),
        sr_table,
    )
    .map_err(err)?;
    eval::boc(&eval_sr, &table).map_err(err)
}

/// Seeded synthetic color-event sequence.
#[pyclass(module = "ceutrack")]
struct Scene {
    inner: event_io::SyntheticScene,
}

#[pymethods]
impl Scene {
    #[new]
    #[pyo3(signature = (seed=0, n_frames=20))]
    fn new(seed: u64, n_frames: usize) -> PyResult<Self> {
        let config = SyntheticSceneConfig {
            seed,
            n_frames,
            ..Default::default()
        };
        Ok(Self {
            inner: generate_synthetic(&config).map_err(err)?,
        })
    }

    #[getter]
    fn frame_times(&self) -> Vec<u64> {
        self.inner.frame_times.clone()
    }

    #[getter]
    fn gt(&self) -> Vec<BoxTuple> {
        self.inner.gt.iter().map(|a| from_box(&a.bbox)).collect()
    }

    fn events(&self) -> EventStream {
        EventStream {
            inner: event_io::EventStream {
                sensor_w: self.inner.sensor_w,
                sensor_h: self.inner.sensor_h,
                events: self.inner.events.clone(),
            },
        }
    }

    /// Tracks the scene with a seeded toy model from its first ground-truth box.
    #[pyo3(signature = (model_seed=0, width=64, heads=4))]
    fn track(
        &self,
        py: Python<'_>,
        model_seed: u64,
        width: usize,
        heads: usize,
    ) -> PyResult<Vec<BoxTuple>> {
        let params = ModelParams::init(&ModelConfig::toy(width, heads), model_seed).map_err(err)?;
        let s = &self.inner;
        let init =
            s.gt.first()
                .ok_or_else(|| PyValueError::new_err("empty scene"))?
                .bbox;
        let boxes = py
            .detach(|| {
                track_sequence(
                    &s.frames,
                    &s.frame_times,
                    &s.events,
                    (s.sensor_w, s.sensor_h),
                    init,
                    &params,
                    &TrackerSettings::default(),
                )
            })
            .map_err(err)?;
        Ok(boxes.iter().map(from_box).collect())
    }
}

#[pymodule]
fn ceutrack(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<EventStream>()?;
    m.add_class::<Scene>()?;
    m.add_function(wrap_pyfunction!(blend_early_fusion, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou_loss, m)?)?;
    m.add_function(wrap_pyfunction!(l1_loss, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(boc, m)?)?;
    m.add("SEARCH_TOP_K", voxel::SEARCH_TOP_K)?;
    m.add("TEMPLATE_TOP_K", voxel::TEMPLATE_TOP_K)?;
    Ok(())
}
