//! Run configuration. One JSON document drives data generation, all four
//! trainers, editing and evaluation; a snapshot is stored beside every
//! checkpoint and report.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Append one CSV row every `log_every` steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch: 8,
            lr: 2e-3,
            log_every: 25,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    /// Square frame resolution (pixels).
    pub resolution: usize,
    /// Latent downsampling factor.
    pub f: usize,
    /// Keypoints per frame.
    pub k_points: usize,
    /// Audio feature dimension.
    pub feat_dim: usize,
    /// Diffusion step count T.
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// DDIM steps at inference.
    pub ddim_steps: usize,
    /// Frames of audio context on each side of the target frame.
    pub audio_context: usize,

    pub n_identities: usize,
    pub clips_per_identity: usize,
    pub frames_per_clip: usize,
    pub fps: f32,
    /// Final (train, val, test) identity fractions.
    pub split_ratios: (f64, f64, f64),

    /// Master seed; the CASCADE_EDIT_SEED env var is used when absent.
    pub seed: u64,

    pub ae: TrainConfig,
    pub stage1: TrainConfig,
    pub warp: TrainConfig,
    pub stage2: TrainConfig,

    /// Training interval length range for the in-context sampler.
    pub interval_min: usize,
    pub interval_max: usize,

    /// Total-variation weight for warp training.
    pub tv_lambda: f32,
    /// Mouth-interior luminance threshold for the frame aperture extractor.
    pub mouth_dark_threshold: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            resolution: 64,
            f: 4,
            k_points: 32,
            feat_dim: 16,
            t_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 20,
            audio_context: 4,
            n_identities: 16,
            clips_per_identity: 2,
            frames_per_clip: 200,
            fps: 25.0,
            split_ratios: (0.45, 0.05, 0.5),
            seed: 7,
            ae: TrainConfig {
                steps: 1600,
                batch: 8,
                lr: 2e-3,
                log_every: 25,
            },
            stage1: TrainConfig {
                steps: 2400,
                batch: 16,
                lr: 1e-3,
                log_every: 25,
            },
            warp: TrainConfig {
                steps: 1100,
                batch: 6,
                lr: 1e-3,
                log_every: 25,
            },
            stage2: TrainConfig {
                steps: 2200,
                batch: 16,
                lr: 1e-3,
                log_every: 25,
            },
            interval_min: 4,
            interval_max: 16,
            tv_lambda: 0.01,
            mouth_dark_threshold: 0.12,
        }
    }
}

impl RunConfig {
    pub fn latent_side(&self) -> usize {
        self.resolution / self.f
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution % self.f != 0 {
            return Err(Error::invalid(format!(
                "resolution {} not divisible by f {}",
                self.resolution, self.f
            )));
        }
        if self.t_steps < self.ddim_steps {
            return Err(Error::invalid(format!(
                "T = {} must be >= ddim_steps = {}",
                self.t_steps, self.ddim_steps
            )));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::invalid("beta range must satisfy 0 < start <= end < 1"));
        }
        let (a, b, c) = self.split_ratios;
        if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
            return Err(Error::invalid("split ratios must be nonnegative and sum to 1"));
        }
        if self.interval_min < 1 || self.interval_min > self.interval_max {
            return Err(Error::invalid("interval range must satisfy 1 <= min <= max"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Apply `key=value` overrides with dotted paths (`ae.steps=200`).
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        if sets.is_empty() {
            return Ok(());
        }
        let mut doc = serde_json::to_value(&*self)?;
        for entry in sets {
            let (key, value) = entry
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("--set expects key=value, got '{entry}'")))?;
            let mut node = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node.as_object_mut().ok_or_else(|| {
                    Error::invalid(format!("config path '{key}' does not address an object"))
                })?;
                if !obj.contains_key(*part) {
                    return Err(Error::invalid(format!("unknown config key '{key}'")));
                }
                if i == parts.len() - 1 {
                    let parsed: serde_json::Value = serde_json::from_str(value)
                        .unwrap_or(serde_json::Value::String(value.to_string()));
                    obj.insert((*part).to_string(), parsed);
                } else {
                    node = obj.get_mut(*part).unwrap();
                }
            }
        }
        *self = serde_json::from_value(doc)?;
        self.validate()
    }

    /// The paper-style data share selector: 50 / 25 / 12.5 map to the three
    /// identity-first split setups, always with a 9:1 train:val ratio.
    pub fn set_split_percent(&mut self, percent: f64) -> Result<()> {
        let share = percent / 100.0;
        if !(share > 0.0 && share < 1.0) {
            return Err(Error::invalid(format!(
                "split percent {percent} outside (0, 100)"
            )));
        }
        self.split_ratios = (share * 0.9, share * 0.1, 1.0 - share);
        Ok(())
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Global seed fallback: explicit value > CASCADE_EDIT_SEED > config default.
pub fn resolve_seed(explicit: Option<u64>, cfg: &RunConfig) -> u64 {
    if let Some(s) = explicit {
        return s;
    }
    if let Ok(v) = std::env::var("CASCADE_EDIT_SEED") {
        if let Ok(s) = v.parse::<u64>() {
            return s;
        }
    }
    cfg.seed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn split_percent_mapping() {
        let mut cfg = RunConfig::default();
        cfg.set_split_percent(12.5).unwrap();
        let (a, b, c) = cfg.split_ratios;
        assert!((a - 0.1125).abs() < 1e-12);
        assert!((b - 0.0125).abs() < 1e-12);
        assert!((c - 0.875).abs() < 1e-12);
        cfg.set_split_percent(50.0).unwrap();
        assert_eq!(cfg.split_ratios, (0.45, 0.05, 0.5));
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["ae.steps=77".into(), "resolution=32".into()])
            .unwrap();
        assert_eq!(cfg.ae.steps, 77);
        assert_eq!(cfg.resolution, 32);
        assert!(cfg.apply_overrides(&["nope=1".into()]).is_err());
        assert!(cfg.apply_overrides(&["badsyntax".into()]).is_err());
    }

    #[test]
    fn t_must_cover_ddim_steps() {
        let mut cfg = RunConfig::default();
        cfg.t_steps = 10;
        cfg.ddim_steps = 20;
        assert!(cfg.validate().is_err());
    }
}
