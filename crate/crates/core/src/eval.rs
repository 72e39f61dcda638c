//! One-pass evaluation: success / precision / normalized-precision curves,
//! attribute breakdowns and the BreakOut Capability (BOC) score.
//!
//! Conventions: success counts frames with IoU strictly above each threshold
//! on a 101-point grid over [0, 1] and SR is the curve mean x100. Precision
//! counts center errors `<=` each integer pixel threshold 0..=50 and PR is the
//! value at 20 px x100. Normalized precision uses thresholds 0.00..=0.50 in
//! steps of 0.01 and NPR is the curve mean x100. Frames flagged absent are
//! left out of every denominator. Aggregates average per-video curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::event_io::TrackAnnotation;

pub const SCHEMA_VERSION: u32 = 1;
pub const SUCCESS_POINTS: usize = 101;
pub const PRECISION_POINTS: usize = 51;
pub const NORM_PRECISION_POINTS: usize = 51;
pub const PRECISION_REPORT_PX: usize = 20;

/// The 17 challenge attributes annotated per test video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribute {
    CameraMotion,
    Rotation,
    Deformation,
    FullOcclusion,
    LowIllumination,
    OutOfView,
    PartialOcclusion,
    ViewpointChange,
    ScaleVariation,
    BackgroundClutter,
    MotionBlur,
    AspectRatioChange,
    OverExposure,
    FastMotion,
    NoMotion,
    LowResolution,
    BackgroundObjectMotion,
}

impl Attribute {
    pub const ALL: [Attribute; 17] = [
        Attribute::CameraMotion,
        Attribute::Rotation,
        Attribute::Deformation,
        Attribute::FullOcclusion,
        Attribute::LowIllumination,
        Attribute::OutOfView,
        Attribute::PartialOcclusion,
        Attribute::ViewpointChange,
        Attribute::ScaleVariation,
        Attribute::BackgroundClutter,
        Attribute::MotionBlur,
        Attribute::AspectRatioChange,
        Attribute::OverExposure,
        Attribute::FastMotion,
        Attribute::NoMotion,
        Attribute::LowResolution,
        Attribute::BackgroundObjectMotion,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Attribute::CameraMotion => "CM",
            Attribute::Rotation => "ROT",
            Attribute::Deformation => "DEF",
            Attribute::FullOcclusion => "FOC",
            Attribute::LowIllumination => "LI",
            Attribute::OutOfView => "OV",
            Attribute::PartialOcclusion => "POC",
            Attribute::ViewpointChange => "VC",
            Attribute::ScaleVariation => "SV",
            Attribute::BackgroundClutter => "BC",
            Attribute::MotionBlur => "MB",
            Attribute::AspectRatioChange => "ARC",
            Attribute::OverExposure => "OE",
            Attribute::FastMotion => "FM",
            Attribute::NoMotion => "NM",
            Attribute::LowResolution => "LR",
            Attribute::BackgroundObjectMotion => "BOM",
        }
    }
}

impl std::str::FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attribute '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoResult {
    pub video_id: String,
    pub predictions: Vec<BBox>,
    pub gt: Vec<TrackAnnotation>,
    pub attributes: BTreeSet<Attribute>,
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.x, a.y, a.x + a.w.max(0.0), a.y + a.h.max(0.0));
    let (bx1, by1, bx2, by2) = (b.x, b.y, b.x + b.w.max(0.0), b.y + b.h.max(0.0));
    // areas from corners so that identical boxes give exactly 1
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Center error scaled by the ground-truth size; `None` for a degenerate gt box.
pub fn normalized_center_error(pred: &BBox, gt: &BBox) -> Option<f64> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return None;
    }
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    Some(((px - gx) / gt.w).hypot((py - gy) / gt.h))
}

pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_POINTS).map(|i| i as f64 / 100.0).collect()
}

pub fn precision_thresholds() -> Vec<f64> {
    (0..PRECISION_POINTS).map(|i| i as f64).collect()
}

pub fn norm_precision_thresholds() -> Vec<f64> {
    (0..NORM_PRECISION_POINTS)
        .map(|i| i as f64 / 100.0)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub success: Vec<f64>,
    pub precision: Vec<f64>,
    pub norm_precision: Vec<f64>,
    pub sr: f64,
    pub pr: f64,
    pub npr: f64,
}

impl CurveSet {
    fn from_curves(success: Vec<f64>, precision: Vec<f64>, norm_precision: Vec<f64>) -> Self {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Self {
            sr: 100.0 * mean(&success),
            pr: 100.0 * precision[PRECISION_REPORT_PX],
            npr: 100.0 * mean(&norm_precision),
            success,
            precision,
            norm_precision,
        }
    }

    /// Element-wise mean of several curve sets, in the given order.
    pub fn mean_of<'a>(sets: impl IntoIterator<Item = &'a CurveSet>) -> Option<CurveSet> {
        let mut success = vec![0.0; SUCCESS_POINTS];
        let mut precision = vec![0.0; PRECISION_POINTS];
        let mut norm = vec![0.0; NORM_PRECISION_POINTS];
        let mut n = 0usize;
        for s in sets {
            n += 1;
            success
                .iter_mut()
                .zip(&s.success)
                .for_each(|(a, b)| *a += b);
            precision
                .iter_mut()
                .zip(&s.precision)
                .for_each(|(a, b)| *a += b);
            norm.iter_mut()
                .zip(&s.norm_precision)
                .for_each(|(a, b)| *a += b);
        }
        if n == 0 {
            return None;
        }
        let scale = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x /= n as f64);
        scale(&mut success);
        scale(&mut precision);
        scale(&mut norm);
        Some(CurveSet::from_curves(success, precision, norm))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoCurves {
    pub video_id: String,
    pub evaluated_frames: usize,
    /// Visible frames left out of the normalized curve for a degenerate gt box.
    pub skipped_normalized: usize,
    pub curves: CurveSet,
}

/// Per-video curves. Absent frames are excluded from every denominator.
pub fn video_curves(result: &VideoResult) -> Result<VideoCurves> {
    if result.predictions.len() != result.gt.len() {
        return Err(Error::Validation(format!(
            "video {}: {} predictions for {} ground-truth frames",
            result.video_id,
            result.predictions.len(),
            result.gt.len()
        )));
    }
    let mut ious = Vec::new();
    let mut errs = Vec::new();
    let mut norm_errs = Vec::new();
    for (pred, gt) in result.predictions.iter().zip(&result.gt) {
        if gt.absent {
            continue;
        }
        ious.push(iou(pred, &gt.bbox));
        errs.push(center_error(pred, &gt.bbox));
        if let Some(e) = normalized_center_error(pred, &gt.bbox) {
            norm_errs.push(e);
        }
    }
    if ious.is_empty() {
        return Err(Error::AllFramesAbsent(result.video_id.clone()));
    }
    let skipped = ious.len() - norm_errs.len();
    if skipped > 0 {
        log::warn!(
            "video {}: {skipped} frame(s) with degenerate ground truth skipped for normalized precision",
            result.video_id
        );
    }
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let success = success_thresholds()
        .iter()
        .map(|&th| frac(ious.iter().filter(|&&v| v > th).count(), ious.len()))
        .collect();
    let precision = precision_thresholds()
        .iter()
        .map(|&d| frac(errs.iter().filter(|&&v| v <= d).count(), errs.len()))
        .collect();
    let norm_precision = norm_precision_thresholds()
        .iter()
        .map(|&d| {
            frac(
                norm_errs.iter().filter(|&&v| v <= d).count(),
                norm_errs.len(),
            )
        })
        .collect();
    Ok(VideoCurves {
        video_id: result.video_id.clone(),
        evaluated_frames: ious.len(),
        skipped_normalized: skipped,
        curves: CurveSet::from_curves(success, precision, norm_precision),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub attribute: String,
    pub n_videos: usize,
    pub curves: Option<CurveSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub n_videos: usize,
    pub overall: CurveSet,
    pub videos: Vec<VideoCurves>,
    /// Videos dropped because every frame was absent.
    pub excluded: Vec<String>,
    pub attributes: Vec<AttributeReport>,
    pub boc: Option<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Long-format CSV: `scope,curve,threshold,value`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("scope,curve,threshold,value\n");
        let mut emit = |scope: &str, c: &CurveSet| {
            let groups = [
                ("success", success_thresholds(), &c.success),
                ("precision", precision_thresholds(), &c.precision),
                (
                    "norm_precision",
                    norm_precision_thresholds(),
                    &c.norm_precision,
                ),
            ];
            for (name, th, vals) in groups {
                for (t, v) in th.iter().zip(vals.iter()) {
                    let _ = writeln!(out, "{scope},{name},{t},{v}");
                }
            }
        };
        emit("overall", &self.overall);
        for a in &self.attributes {
            if let Some(c) = &a.curves {
                emit(&format!("attr:{}", a.attribute), c);
            }
        }
        for v in &self.videos {
            emit(&format!("video:{}", v.video_id), &v.curves);
        }
        out
    }

    /// Adds the BOC score over the evaluated videos, in report order.
    pub fn with_boc(mut self, baselines: &BaselineSRTable) -> Result<Self> {
        let ids: Vec<String> = self.videos.iter().map(|v| v.video_id.clone()).collect();
        let sr: Vec<f64> = self.videos.iter().map(|v| v.curves.sr / 100.0).collect();
        self.boc = Some(boc(&sr, &baselines.aligned_to(&ids)?)?);
        Ok(self)
    }

    /// Per-video SR as fractions, keyed by video id.
    pub fn per_video_sr(&self) -> BTreeMap<String, f64> {
        self.videos
            .iter()
            .map(|v| (v.video_id.clone(), v.curves.sr / 100.0))
            .collect()
    }
}

/// Unweighted per-video average plus a sub-report for each attribute.
pub fn aggregate(results: &[VideoResult]) -> Result<MetricReport> {
    if results.is_empty() {
        return Err(Error::InvalidArgument(
            "aggregate needs at least one video".into(),
        ));
    }
    let mut videos = Vec::with_capacity(results.len());
    let mut excluded = Vec::new();
    let mut kept_attrs = Vec::new();
    for r in results {
        match video_curves(r) {
            Ok(v) => {
                videos.push(v);
                kept_attrs.push(&r.attributes);
            }
            Err(Error::AllFramesAbsent(id)) => {
                log::warn!("video {id} excluded: all frames absent");
                excluded.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    let overall = CurveSet::mean_of(videos.iter().map(|v| &v.curves))
        .ok_or_else(|| Error::Validation("no video has an evaluable frame".into()))?;
    let attributes = Attribute::ALL
        .iter()
        .map(|&attr| {
            let subset: Vec<&CurveSet> = videos
                .iter()
                .zip(&kept_attrs)
                .filter(|(_, attrs)| attrs.contains(&attr))
                .map(|(v, _)| &v.curves)
                .collect();
            AttributeReport {
                attribute: attr.code().to_string(),
                n_videos: subset.len(),
                curves: CurveSet::mean_of(subset),
            }
        })
        .collect();
    Ok(MetricReport {
        schema_version: SCHEMA_VERSION,
        n_videos: videos.len(),
        overall,
        videos,
        excluded,
        attributes,
        boc: None,
    })
}

/// Per-video SR fractions of `T` baseline trackers over `N` videos.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSRTable {
    pub trackers: Vec<String>,
    pub video_ids: Vec<String>,
    /// `sr[i][t]`: tracker `t` on video `i`.
    pub sr: Vec<Vec<f64>>,
}

impl BaselineSRTable {
    pub fn new(trackers: Vec<String>, video_ids: Vec<String>, sr: Vec<Vec<f64>>) -> Result<Self> {
        if trackers.is_empty() {
            return Err(Error::Validation("baseline table has no trackers".into()));
        }
        if sr.len() != video_ids.len() {
            return Err(Error::Shape(format!(
                "{} rows for {} videos",
                sr.len(),
                video_ids.len()
            )));
        }
        for (i, row) in sr.iter().enumerate() {
            if row.len() != trackers.len() {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries for {} trackers",
                    row.len(),
                    trackers.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Validation(format!(
                    "baseline SR {v} outside [0,1] in row {i}"
                )));
            }
        }
        Ok(Self {
            trackers,
            video_ids,
            sr,
        })
    }

    /// CSV with header `video_id,tracker1,...,trackerT` and fractional entries.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (_, header) = lines.next().ok_or(Error::ParseLine {
            line: 1,
            msg: "empty baseline table".into(),
        })?;
        let trackers: Vec<String> = header
            .split(',')
            .skip(1)
            .map(|s| s.trim().to_string())
            .collect();
        let mut video_ids = Vec::new();
        let mut sr = Vec::new();
        for (line, l) in lines {
            let mut fields = l.split(',').map(str::trim);
            let id = fields.next().unwrap_or_default().to_string();
            let row = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::ParseLine {
                        line,
                        msg: format!("non-numeric SR '{f}'"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != trackers.len() {
                return Err(Error::ParseLine {
                    line,
                    msg: format!("expected {} SR values, found {}", trackers.len(), row.len()),
                });
            }
            video_ids.push(id);
            sr.push(row);
        }
        Self::new(trackers, video_ids, sr)
    }

    /// Difficulty of each video: one minus the mean baseline SR.
    pub fn difficulty(&self) -> Vec<f64> {
        self.sr
            .iter()
            .map(|row| 1.0 - row.iter().sum::<f64>() / row.len() as f64)
            .collect()
    }

    /// Reorders rows to `ids`; every id must be present.
    pub fn aligned_to(&self, ids: &[String]) -> Result<Self> {
        let index: BTreeMap<&str, usize> = self
            .video_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let sr = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| self.sr[i].clone())
                    .ok_or_else(|| {
                        Error::Validation(format!("video {id} missing from baseline table"))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            trackers: self.trackers.clone(),
            video_ids: ids.to_vec(),
            sr,
        })
    }
}

/// BreakOut Capability: mean over videos of the evaluated SR weighted by the
/// video's difficulty, reported x100. SR values are fractions in `[0,1]`.
pub fn boc(eval_sr: &[f64], baselines: &BaselineSRTable) -> Result<f64> {
    if eval_sr.len() != baselines.sr.len() {
        return Err(Error::Shape(format!(
            "{} evaluated videos vs {} baseline rows",
            eval_sr.len(),
            baselines.sr.len()
        )));
    }
    if eval_sr.is_empty() {
        return Err(Error::InvalidArgument("BOC over zero videos".into()));
    }
    if let Some(v) = eval_sr.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("evaluated SR {v} outside [0,1]")));
    }
    let total: f64 = eval_sr
        .iter()
        .zip(baselines.difficulty())
        .map(|(sr, d)| sr * d)
        .sum();
    Ok(100.0 * total / eval_sr.len() as f64)
}
