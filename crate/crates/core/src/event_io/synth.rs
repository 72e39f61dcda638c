use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EventPoint, Polarity, TrackAnnotation};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::repr::Image;

/// A textured rectangle translating over a static textured background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneConfig {
    pub sensor_w: u16,
    pub sensor_h: u16,
    pub n_frames: usize,
    pub object_w: u16,
    pub object_h: u16,
    /// Top-left corner at frame 0; drawn from the seed when `None`.
    pub start: Option<(i32, i32)>,
    /// Pixels per frame.
    pub velocity: (f64, f64),
    pub frame_interval_us: u64,
    /// Log-intensity step that triggers one event.
    pub contrast_threshold: f64,
    pub background_intensity: f64,
    pub object_intensity: f64,
    /// Amplitude of the fixed per-pixel texture on background and object.
    pub texture: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            sensor_w: 346,
            sensor_h: 260,
            n_frames: 20,
            object_w: 40,
            object_h: 30,
            start: None,
            velocity: (3.0, 1.5),
            frame_interval_us: 33_333,
            contrast_threshold: 0.2,
            background_intensity: 40.0,
            object_intensity: 200.0,
            texture: 20.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub frames: Vec<Image>,
    pub frame_times: Vec<u64>,
    pub events: Vec<EventPoint>,
    pub gt: Vec<TrackAnnotation>,
    pub sensor_w: u16,
    pub sensor_h: u16,
}

fn log_intensity(v: f64) -> f64 {
    (v + 1.0).ln()
}

impl SyntheticSceneConfig {
    fn validate(&self) -> Result<()> {
        if self.sensor_w == 0 || self.sensor_h == 0 || self.n_frames == 0 {
            return Err(Error::InvalidArgument("empty sensor or zero frames".into()));
        }
        if self.object_w == 0 || self.object_h == 0 {
            return Err(Error::InvalidArgument(
                "object must have positive size".into(),
            ));
        }
        if self.object_w > self.sensor_w || self.object_h > self.sensor_h {
            return Err(Error::InvalidArgument("object larger than sensor".into()));
        }
        if !(self.contrast_threshold > 0.0) || self.frame_interval_us < 2 {
            return Err(Error::InvalidArgument(
                "contrast threshold and frame interval must be positive".into(),
            ));
        }
        if !self.velocity.0.is_finite() || !self.velocity.1.is_finite() {
            return Err(Error::InvalidArgument("velocity must be finite".into()));
        }
        Ok(())
    }

    /// Object top-left at each frame, after rounding to whole pixels.
    fn trajectory(&self, start: (i32, i32)) -> Result<Vec<(i64, i64)>> {
        (0..self.n_frames)
            .map(|r| {
                let x = (f64::from(start.0) + self.velocity.0 * r as f64).round() as i64;
                let y = (f64::from(start.1) + self.velocity.1 * r as f64).round() as i64;
                if x < 0
                    || y < 0
                    || x + i64::from(self.object_w) > i64::from(self.sensor_w)
                    || y + i64::from(self.object_h) > i64::from(self.sensor_h)
                {
                    return Err(Error::InvalidArgument(format!(
                        "object leaves the sensor at frame {r} (top-left {x},{y})"
                    )));
                }
                Ok((x, y))
            })
            .collect()
    }
}

/// Renders the scene and emits events wherever the log intensity of a pixel
/// changes by at least one contrast threshold between consecutive frames.
/// A change of `d` emits `floor(|d| / threshold)` events of polarity
/// `sign(d)`, timestamped at the interpolated threshold crossings.
pub fn generate_synthetic(config: &SyntheticSceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w, h) = (config.sensor_w as usize, config.sensor_h as usize);
    let (ow, oh) = (config.object_w as usize, config.object_h as usize);

    let background: Vec<f64> = (0..w * h)
        .map(|_| config.background_intensity + config.texture * rng.gen::<f64>())
        .collect();
    let object: Vec<f64> = (0..ow * oh)
        .map(|_| config.object_intensity + config.texture * rng.gen::<f64>())
        .collect();
    let start = match config.start {
        Some(s) => s,
        None => {
            // pick a start that keeps the whole trajectory on the sensor
            let span = |v: f64, size: u16, limit: u16| {
                let travel = v * (config.n_frames.saturating_sub(1)) as f64;
                let lo = (-travel).max(0.0).ceil() as i32;
                let hi = (f64::from(limit) - f64::from(size) - travel.max(0.0)).floor() as i32;
                (lo, hi)
            };
            let (xl, xh) = span(config.velocity.0, config.object_w, config.sensor_w);
            let (yl, yh) = span(config.velocity.1, config.object_h, config.sensor_h);
            if xl > xh || yl > yh {
                return Err(Error::InvalidArgument(
                    "trajectory does not fit on the sensor".into(),
                ));
            }
            (rng.gen_range(xl..=xh), rng.gen_range(yl..=yh))
        }
    };
    let path = config.trajectory(start)?;

    let frames: Vec<Image> = path
        .iter()
        .map(|&(ox, oy)| {
            let mut data = background.clone();
            for y in 0..oh {
                let row = (oy as usize + y) * w + ox as usize;
                data[row..row + ow].copy_from_slice(&object[y * ow..(y + 1) * ow]);
            }
            Image {
                w,
                h,
                channels: 1,
                data,
            }
        })
        .collect();
    let frame_times: Vec<u64> = (0..config.n_frames as u64)
        .map(|r| r * config.frame_interval_us)
        .collect();

    let mut events = Vec::new();
    for r in 1..frames.len() {
        let (t_prev, t_cur) = (frame_times[r - 1], frame_times[r]);
        let dt = (t_cur - t_prev) as f64;
        for (i, (&a, &b)) in frames[r - 1].data.iter().zip(&frames[r].data).enumerate() {
            let delta = log_intensity(b) - log_intensity(a);
            let n = (delta.abs() / config.contrast_threshold).floor() as u64;
            if n == 0 {
                continue;
            }
            let p = if delta > 0.0 {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            let (x, y) = ((i % w) as u16, (i / w) as u16);
            for k in 1..=n {
                let frac = k as f64 * config.contrast_threshold / delta.abs();
                let t = (t_prev + (frac * dt).floor() as u64).min(t_cur - 1);
                events.push(EventPoint::new(t, x, y, p));
            }
        }
    }
    // stable: simultaneous events stay in row-major pixel order
    events.sort_by_key(|e| e.t);

    let gt = path
        .iter()
        .enumerate()
        .map(|(frame_idx, &(x, y))| TrackAnnotation {
            frame_idx,
            bbox: BBox::new(x as f64, y as f64, ow as f64, oh as f64),
            absent: false,
        })
        .collect();

    Ok(SyntheticScene {
        frames,
        frame_times,
        events,
        gt,
        sensor_w: config.sensor_w,
        sensor_h: config.sensor_h,
    })
}
