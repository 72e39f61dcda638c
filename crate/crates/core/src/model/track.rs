use serde::{Deserialize, Serialize};

use super::backbone::{forward_backbone, BackboneInput};
use super::head::{decode_box, tracking_head};
use super::params::ModelParams;
use super::ModelConfig;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::event_io::{slice_window, EventPoint};
use crate::repr::{crop_resize, Image};
use crate::voxel::{
    crop_region, filter_voxels, select_top_k, voxelize, GridSpec, Region, Voxel, VoxelTensor,
    DEFAULT_GRID_M, DEFAULT_GRID_N, DEFAULT_GRID_TAU,
};

/// Predicted boxes are kept at least this many pixels wide and tall so the
/// next search region stays non-degenerate.
pub const MIN_BOX_SIDE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerSettings {
    pub grid_m: usize,
    pub grid_n: usize,
    pub grid_tau: usize,
    pub template_factor: f64,
    pub search_factor: f64,
}

impl Default for TrackerSettings {
    fn default() -> Self {
        Self {
            grid_m: DEFAULT_GRID_M,
            grid_n: DEFAULT_GRID_N,
            grid_tau: DEFAULT_GRID_TAU,
            template_factor: 2.0,
            search_factor: 4.0,
        }
    }
}

/// Crops a color frame to `region`, resizes to `side x side` and scales
/// intensities to [0, 1].
pub fn prepare_frame_patch(frame: &Image, region: &Region, side: usize) -> Image {
    let mut patch = crop_resize(&frame.to_rgb(), region, side, side);
    patch.data.iter_mut().for_each(|v| *v /= 255.0);
    patch
}

/// Voxelizes the events in `[t0, t1)`, keeps those inside `region` and
/// selects the top `k`. An empty interval yields an all-padding tensor.
pub fn voxel_input(
    events: &[EventPoint],
    t0: u64,
    t1: u64,
    sensor: (u16, u16),
    region: &Region,
    k: usize,
    settings: &TrackerSettings,
) -> Result<VoxelTensor> {
    if t1 <= t0 {
        return select_top_k(&[] as &[Voxel], k);
    }
    let window = slice_window(events, t0, t1, sensor.0, sensor.1)?;
    let grid = GridSpec::new(settings.grid_m, settings.grid_n, settings.grid_tau, &window);
    let set = voxelize(&window, &grid)?;
    select_top_k(&filter_voxels(&set, region).voxels, k)
}

/// Model voxel inputs for a sequence with known boxes: the template tensor
/// from the first interval around `boxes[0]`, then one search tensor per
/// interval `[t_{r-1}, t_r)` around `boxes[r-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceVoxels {
    pub template: VoxelTensor,
    pub search: Vec<VoxelTensor>,
}

pub fn sequence_voxel_inputs(
    events: &[EventPoint],
    frame_times: &[u64],
    sensor: (u16, u16),
    boxes: &[BBox],
    config: &ModelConfig,
    settings: &TrackerSettings,
) -> Result<SequenceVoxels> {
    if frame_times.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two frame timestamps".into(),
        ));
    }
    if boxes.len() + 1 < frame_times.len() {
        return Err(Error::Shape(format!(
            "{} boxes for {} frame intervals",
            boxes.len(),
            frame_times.len() - 1
        )));
    }
    let zr = crop_region(&boxes[0], settings.template_factor, sensor.0, sensor.1)?;
    let template = voxel_input(
        events,
        frame_times[0],
        frame_times[1],
        sensor,
        &zr,
        config.template_k(),
        settings,
    )?;
    let search = frame_times
        .windows(2)
        .zip(boxes)
        .map(|(t, b)| {
            let xr = crop_region(b, settings.search_factor, sensor.0, sensor.1)?;
            voxel_input(events, t[0], t[1], sensor, &xr, config.search_k(), settings)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceVoxels { template, search })
}

/// Runs the tracker over a sequence. Frame 0 fixes the template (color crop
/// and voxels from the first inter-frame interval); each later frame `r`
/// searches around the previous prediction using the events of
/// `[t_{r-1}, t_r)`. The template is never updated.
#[allow(clippy::too_many_arguments)]
pub fn track_sequence(
    frames: &[Image],
    frame_times: &[u64],
    events: &[EventPoint],
    sensor: (u16, u16),
    init_box: BBox,
    params: &ModelParams,
    settings: &TrackerSettings,
) -> Result<Vec<BBox>> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no frames to track".into()));
    }
    if frames.len() != frame_times.len() {
        return Err(Error::Shape(format!(
            "{} frames but {} frame timestamps",
            frames.len(),
            frame_times.len()
        )));
    }
    if frame_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Validation("frame timestamps not sorted".into()));
    }
    let cfg = &params.config;
    let mut boxes = vec![init_box];
    if frames.len() == 1 {
        return Ok(boxes);
    }
    let template_region = crop_region(&init_box, settings.template_factor, sensor.0, sensor.1)?;
    let frame_template = prepare_frame_patch(&frames[0], &template_region, cfg.template_px);
    let voxel_template = voxel_input(
        events,
        frame_times[0],
        frame_times[1],
        sensor,
        &template_region,
        cfg.template_k(),
        settings,
    )?;

    let mut prev = init_box;
    for r in 1..frames.len() {
        let region = crop_region(&prev, settings.search_factor, sensor.0, sensor.1)?;
        let input = BackboneInput {
            frame_template: frame_template.clone(),
            frame_search: prepare_frame_patch(&frames[r], &region, cfg.search_px),
            voxel_template: voxel_template.clone(),
            voxel_search: voxel_input(
                events,
                frame_times[r - 1],
                frame_times[r],
                sensor,
                &region,
                cfg.search_k(),
                settings,
            )?,
        };
        let tokens = forward_backbone(&input, params)?;
        let head = tracking_head(&tokens, &params.head, cfg)?;
        let b = decode_box(&head, &region);
        let (cx, cy) = b.center();
        prev = BBox::from_center(cx, cy, b.w.max(MIN_BOX_SIDE), b.h.max(MIN_BOX_SIDE));
        boxes.push(prev);
    }
    Ok(boxes)
}
