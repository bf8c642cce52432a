//! Run configuration: one strict JSON document per run. Every block except
//! `mode` and `data` may be omitted, in which case the defaults are the
//! published training and evaluation settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleConfig, UpdateInterval};
use crate::error::{Error, Result};
use crate::harness::{PretrainSettings, SceneSpec, StreamScript};
use crate::losses::{ConvFeatureExtractor, MuWeights, PretrainWeights};
use crate::networks::ArchConfig;
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Eval,
    Stream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub architecture: ArchConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mu_offline: MuWeights,
    pub mu_online: MuWeights,
    pub pretrain: PretrainWeights,
    pub lambda_c: f64,
    pub perceptual: PerceptualConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mu_offline: MuWeights::OFFLINE,
            mu_online: MuWeights::ONLINE,
            pretrain: PretrainWeights::default(),
            lambda_c: 0.1,
            perceptual: PerceptualConfig::default(),
        }
    }
}

/// The fixed random feature stack standing in for a pretrained classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub seed: u64,
    pub stages: usize,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig { seed: 0, stages: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Scenes for `pretrain`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_scenes: Vec<SceneSpec>,
    /// Scenes for `eval`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test_scenes: Vec<SceneSpec>,
    /// Script for `stream`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamScript>,
    /// A directory of `frame_%06d.ppm` files, used instead of synthetic scenes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dir: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_crop")]
    pub crop: f64,
    /// In `stream` mode, write the ensemble prediction of every n-th scored frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_every: Option<u64>,
}

fn default_k() -> usize {
    1
}

fn default_crop() -> f64 {
    0.9
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub update_interval: UpdateInterval,
    /// Moving-average window of the trend output.
    pub trend_window: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 100,
            update_interval: UpdateInterval::Every(1),
            trend_window: 100,
        }
    }
}

impl RunConfig {
    /// Parses and validates. Error messages name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::Config(e.into_inner().to_string())
            } else {
                Error::Config(format!("{path}: {}", e.into_inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.optimizer.validate()?;
        self.loss.mu_offline.validate("loss.mu_offline")?;
        self.loss.pretrain.validate()?;
        if !(1..=5).contains(&self.loss.perceptual.stages) {
            return Err(Error::Config("loss.perceptual.stages must be in 1..=5".into()));
        }
        self.ensemble_config().validate()?;
        let d = &self.data;
        if !(d.crop > 0.0 && d.crop <= 1.0) {
            return Err(Error::Config(format!("data.crop must be in (0, 1], got {}", d.crop)));
        }
        if d.dump_every == Some(0) {
            return Err(Error::Config("data.dump_every must be at least 1".into()));
        }
        if self.schedule.epochs == 0 {
            return Err(Error::Config("schedule.epochs must be at least 1".into()));
        }
        if self.schedule.trend_window == 0 {
            return Err(Error::Config("schedule.trend_window must be at least 1".into()));
        }
        let scenes: Vec<&SceneSpec> = match self.mode {
            Mode::Pretrain => self.one_source("data.train_scenes", !d.train_scenes.is_empty())?,
            Mode::Eval => self.one_source("data.test_scenes", !d.test_scenes.is_empty())?,
            Mode::Stream => self.one_source("data.stream", d.stream.is_some())?,
        };
        if let (Mode::Stream, Some(s)) = (self.mode, &d.stream) {
            s.validate(self.architecture.max_disp)?;
        }
        let div = self.architecture.spatial_divisor();
        for s in scenes {
            s.validate(self.architecture.max_disp)?;
            if s.size[0] % div != 0 || s.size[1] % div != 0 {
                return Err(Error::Config(format!(
                    "scene size {:?} must be a multiple of {div} for this architecture",
                    s.size
                )));
            }
        }
        Ok(())
    }

    /// Checks that exactly one of `field` and `data.input_dir` is set and
    /// returns the synthetic scenes the mode will use.
    fn one_source(&self, field: &str, has_scenes: bool) -> Result<Vec<&SceneSpec>> {
        let d = &self.data;
        match (has_scenes, d.input_dir.is_some()) {
            (true, true) => Err(Error::Config(format!(
                "{field} and data.input_dir are mutually exclusive"
            ))),
            (false, false) => Err(Error::Config(format!(
                "{field} or data.input_dir is required in this mode"
            ))),
            (false, true) => Ok(Vec::new()),
            (true, false) => Ok(match self.mode {
                Mode::Pretrain => d.train_scenes.iter().collect(),
                Mode::Eval => d.test_scenes.iter().collect(),
                Mode::Stream => d
                    .stream
                    .iter()
                    .flat_map(|s| s.segments.iter().map(|g| &g.scene))
                    .collect(),
            }),
        }
    }

    pub fn extractor(&self) -> Result<Option<ConvFeatureExtractor>> {
        if self.loss.mu_offline.rho_per > 0.0 {
            let p = self.loss.perceptual;
            ConvFeatureExtractor::random(p.seed, p.stages).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn pretrain_settings(&self) -> Result<PretrainSettings> {
        Ok(PretrainSettings {
            arch: self.architecture,
            weights: self.loss.pretrain,
            mu: self.loss.mu_offline,
            optimizer: self.optimizer,
            epochs: self.schedule.epochs,
            seed: self.seed,
            extractor: self.extractor()?,
        })
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            arch: self.architecture,
            k: self.data.k,
            update_interval: self.schedule.update_interval,
            lambda_c: self.loss.lambda_c,
            mu_online: self.loss.mu_online,
            optimizer: self.optimizer,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"mode": "pretrain", "data": {"train_scenes": [
        {"kind": "camera_pan", "num_objects": 1, "velocity_range": [1, 2], "background": 3,
         "size": [64, 64], "length": 5, "seed": 4}]}}"#;

    #[test]
    fn defaults_are_the_published_settings() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(
            c.loss.mu_offline,
            MuWeights {
                rho_msei: 0.05,
                rho_msed: 0.001,
                rho_ssim: 10.0,
                rho_per: 10.0
            }
        );
        assert_eq!(
            c.loss.mu_online,
            MuWeights {
                rho_msei: 0.0001,
                rho_msed: 0.0,
                rho_ssim: 10.0,
                rho_per: 0.0
            }
        );
        assert_eq!(
            c.loss.pretrain,
            PretrainWeights {
                lambda_e: 2.0,
                lambda_r1: 3.0,
                lambda_r2: 7.0,
                lambda_of: 0.1
            }
        );
        assert_eq!(c.loss.lambda_c, 0.1);
        assert_eq!(c.optimizer.lr, 1e-4);
        assert_eq!(c.schedule.epochs, 100);
        assert_eq!(c.schedule.trend_window, 100);
        assert_eq!(c.data.crop, 0.9);
        assert_eq!(c.data.k, 1);
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        let again = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_json(), c.to_json());
    }

    fn message(text: &str) -> String {
        match RunConfig::from_json(text) {
            Err(Error::Config(m)) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn strict_parsing_names_fields() {
        assert!(message(r#"{"data": {}}"#).contains("mode"));
        assert!(message(r#"{"mode": "eval"}"#).contains("data"));
        let m = message(&MINIMAL.replace("\"seed\": 4", "\"seed\": 4, \"colour\": 1"));
        assert!(m.contains("colour") && m.contains("train_scenes"), "{m}");
        let m = message(&MINIMAL.replace(
            "\"mode\": \"pretrain\",",
            "\"mode\": \"pretrain\", \"optimizer\": {\"lr\": 1, \"momentum\": 0},",
        ));
        assert!(m.contains("optimizer") && m.contains("momentum"), "{m}");
        assert!(message(&MINIMAL.replace("\"num_objects\": 1,", "")).contains("num_objects"));
    }

    #[test]
    fn mode_sources_are_checked() {
        assert!(message(&MINIMAL.replace("pretrain", "eval")).contains("data.test_scenes"));
        assert!(message(&MINIMAL.replace("pretrain", "stream")).contains("data.stream"));
        let both = MINIMAL.replace("\"data\": {", "\"data\": {\"input_dir\": \"frames\", ");
        assert!(message(&both).contains("mutually exclusive"));
        let dir = r#"{"mode": "stream", "data": {"input_dir": "frames"}}"#;
        assert!(RunConfig::from_json(dir).is_ok());
    }

    #[test]
    fn value_checks() {
        assert!(message(&MINIMAL.replace("[64, 64]", "[60, 64]")).contains("multiple of 8"));
        assert!(message(&MINIMAL.replace("[1, 2]", "[1, 20]")).contains("max_disp"));
        let crop = MINIMAL.replace("\"data\": {", "\"data\": {\"crop\": 0, ");
        assert!(message(&crop).contains("data.crop"));
        let online = MINIMAL.replace(
            "\"data\"",
            "\"loss\": {\"mu_online\": {\"rho_msei\": 0, \"rho_msed\": 0, \"rho_ssim\": 1, \"rho_per\": 1}}, \"data\"",
        );
        assert!(message(&online).contains("rho_per"));
        let never = MINIMAL.replace("\"data\"", "\"schedule\": {\"update_interval\": \"never\"}, \"data\"");
        assert_eq!(
            RunConfig::from_json(&never).unwrap().schedule.update_interval,
            UpdateInterval::Never
        );
        let zero = MINIMAL.replace("\"data\"", "\"schedule\": {\"update_interval\": 0}, \"data\"");
        assert!(message(&zero).contains("update_interval"));
    }
}
