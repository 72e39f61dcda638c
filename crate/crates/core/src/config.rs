//! Line-oriented `key = value` run configuration.
//!
//! Every key is optional. Blank lines and `#` comments are ignored, unknown
//! keys are rejected, and [`RunConfig::dump`] writes the effective
//! configuration in a form [`RunConfig::parse`] reads back unchanged.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::event_io::SyntheticSceneConfig;
use crate::loss::{FocalVariant, LossWeights};
use crate::model::{ModelConfig, TrackerSettings};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub tracker: TrackerSettings,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub focal_variant: FocalVariant,
    /// Time-surface decay in microseconds; 0 means half the window.
    pub decay_tau_us: f64,
    pub synth: SyntheticSceneConfig,
    pub attributes: Option<PathBuf>,
    pub baseline_table: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            tracker: TrackerSettings::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            focal_variant: FocalVariant::PenaltyReduced,
            decay_tau_us: 0.0,
            synth: SyntheticSceneConfig::default(),
            attributes: None,
            baseline_table: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "threads",
    "grid_m",
    "grid_n",
    "grid_tau",
    "template_factor",
    "search_factor",
    "model_width",
    "model_heads",
    "model_layers",
    "mlp_ratio",
    "adapter_hidden",
    "template_px",
    "search_px",
    "frame_patch",
    "voxel_patch",
    "template_voxel_side",
    "search_voxel_side",
    "loss_focal",
    "loss_l1",
    "loss_giou",
    "focal_variant",
    "decay_tau_us",
    "synth_frames",
    "synth_sensor_w",
    "synth_sensor_h",
    "synth_object_w",
    "synth_object_h",
    "synth_velocity_x",
    "synth_velocity_y",
    "synth_frame_interval_us",
    "synth_contrast",
    "attributes",
    "baseline_table",
];

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ParseLine {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|msg| Error::ParseLine { line: i + 1, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one override; used for both file lines and command-line flags.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "grid_m" => self.tracker.grid_m = num(key, value)?,
            "grid_n" => self.tracker.grid_n = num(key, value)?,
            "grid_tau" => self.tracker.grid_tau = num(key, value)?,
            "template_factor" => self.tracker.template_factor = num(key, value)?,
            "search_factor" => self.tracker.search_factor = num(key, value)?,
            "model_width" => self.model.width = num(key, value)?,
            "model_heads" => self.model.n_heads = num(key, value)?,
            "model_layers" => self.model.n_layers = num(key, value)?,
            "mlp_ratio" => self.model.mlp_ratio = num(key, value)?,
            "adapter_hidden" => self.model.adapter_hidden = num(key, value)?,
            "template_px" => self.model.template_px = num(key, value)?,
            "search_px" => self.model.search_px = num(key, value)?,
            "frame_patch" => self.model.frame_patch = num(key, value)?,
            "voxel_patch" => self.model.voxel_patch = num(key, value)?,
            "template_voxel_side" => self.model.template_voxel_side = num(key, value)?,
            "search_voxel_side" => self.model.search_voxel_side = num(key, value)?,
            "loss_focal" => self.loss.focal = num(key, value)?,
            "loss_l1" => self.loss.l1 = num(key, value)?,
            "loss_giou" => self.loss.giou = num(key, value)?,
            "focal_variant" => {
                self.focal_variant = match value {
                    "penalty_reduced" => FocalVariant::PenaltyReduced,
                    "binary" => FocalVariant::Binary,
                    _ => {
                        return Err(format!(
                            "focal_variant must be penalty_reduced or binary, got {value:?}"
                        ))
                    }
                }
            }
            "decay_tau_us" => self.decay_tau_us = num(key, value)?,
            "synth_frames" => self.synth.n_frames = num(key, value)?,
            "synth_sensor_w" => self.synth.sensor_w = num(key, value)?,
            "synth_sensor_h" => self.synth.sensor_h = num(key, value)?,
            "synth_object_w" => self.synth.object_w = num(key, value)?,
            "synth_object_h" => self.synth.object_h = num(key, value)?,
            "synth_velocity_x" => self.synth.velocity.0 = num(key, value)?,
            "synth_velocity_y" => self.synth.velocity.1 = num(key, value)?,
            "synth_frame_interval_us" => self.synth.frame_interval_us = num(key, value)?,
            "synth_contrast" => self.synth.contrast_threshold = num(key, value)?,
            "attributes" => self.attributes = path(value),
            "baseline_table" => self.baseline_table = path(value),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let opt = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        Some(match key {
            "seed" => self.seed.to_string(),
            "threads" => self.threads.to_string(),
            "grid_m" => self.tracker.grid_m.to_string(),
            "grid_n" => self.tracker.grid_n.to_string(),
            "grid_tau" => self.tracker.grid_tau.to_string(),
            "template_factor" => self.tracker.template_factor.to_string(),
            "search_factor" => self.tracker.search_factor.to_string(),
            "model_width" => self.model.width.to_string(),
            "model_heads" => self.model.n_heads.to_string(),
            "model_layers" => self.model.n_layers.to_string(),
            "mlp_ratio" => self.model.mlp_ratio.to_string(),
            "adapter_hidden" => self.model.adapter_hidden.to_string(),
            "template_px" => self.model.template_px.to_string(),
            "search_px" => self.model.search_px.to_string(),
            "frame_patch" => self.model.frame_patch.to_string(),
            "voxel_patch" => self.model.voxel_patch.to_string(),
            "template_voxel_side" => self.model.template_voxel_side.to_string(),
            "search_voxel_side" => self.model.search_voxel_side.to_string(),
            "loss_focal" => self.loss.focal.to_string(),
            "loss_l1" => self.loss.l1.to_string(),
            "loss_giou" => self.loss.giou.to_string(),
            "focal_variant" => match self.focal_variant {
                FocalVariant::PenaltyReduced => "penalty_reduced".into(),
                FocalVariant::Binary => "binary".into(),
            },
            "decay_tau_us" => self.decay_tau_us.to_string(),
            "synth_frames" => self.synth.n_frames.to_string(),
            "synth_sensor_w" => self.synth.sensor_w.to_string(),
            "synth_sensor_h" => self.synth.sensor_h.to_string(),
            "synth_object_w" => self.synth.object_w.to_string(),
            "synth_object_h" => self.synth.object_h.to_string(),
            "synth_velocity_x" => self.synth.velocity.0.to_string(),
            "synth_velocity_y" => self.synth.velocity.1.to_string(),
            "synth_frame_interval_us" => self.synth.frame_interval_us.to_string(),
            "synth_contrast" => self.synth.contrast_threshold.to_string(),
            "attributes" => opt(&self.attributes),
            "baseline_table" => opt(&self.baseline_table),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.tracker;
        if t.grid_m == 0 || t.grid_n == 0 || t.grid_tau == 0 {
            return Err(Error::InvalidArgument(
                "grid dimensions must be positive".into(),
            ));
        }
        if !(t.template_factor > 0.0 && t.search_factor > 0.0) {
            return Err(Error::InvalidArgument(
                "crop factors must be positive".into(),
            ));
        }
        if !(self.decay_tau_us >= 0.0 && self.decay_tau_us.is_finite()) {
            return Err(Error::InvalidArgument("decay_tau_us must be >= 0".into()));
        }
        Ok(())
    }

    /// Synthetic scene settings with the run seed applied.
    pub fn synth_config(&self) -> SyntheticSceneConfig {
        SyntheticSceneConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    /// Effective configuration, one `key = value` per line in [`KEYS`] order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(
            (c.tracker.grid_m, c.tracker.grid_n, c.tracker.grid_tau),
            (34, 26, 20)
        );
        assert_eq!((c.model.search_k(), c.model.template_k()), (4096, 1024));
        assert_eq!(
            (c.tracker.template_factor, c.tracker.search_factor),
            (2.0, 4.0)
        );
        assert_eq!((c.model.template_px, c.model.search_px), (128, 256));
        assert_eq!((c.loss.focal, c.loss.l1, c.loss.giou), (1.0, 1.0, 14.0));
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn dump_round_trip() {
        let mut c = RunConfig::default();
        c.set("grid_tau", "10").unwrap();
        c.set("synth_velocity_x", "-1.25").unwrap();
        c.set("baseline_table", "/tmp/b.csv").unwrap();
        c.set("focal_variant", "binary").unwrap();
        assert_eq!(RunConfig::parse(&c.dump()).unwrap(), c);
        for key in KEYS {
            assert!(c.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn comments_and_errors() {
        let c = RunConfig::parse("# run\n\nseed = 7  # trailing\nmodel_width=8\nmodel_heads = 2\n")
            .unwrap();
        assert_eq!((c.seed, c.model.width, c.model.n_heads), (7, 8, 2));
        match RunConfig::parse("seed = 1\nbogus = 3\n") {
            Err(Error::ParseLine { line: 2, msg }) => assert!(msg.contains("bogus")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            RunConfig::parse("seed 3"),
            Err(Error::ParseLine { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("seed = x"),
            Err(Error::ParseLine { line: 1, .. })
        ));
        assert!(RunConfig::parse("model_width = 10\nmodel_heads = 3").is_err());
        assert!(RunConfig::parse("loss_giou = -1").is_err());
    }
}
