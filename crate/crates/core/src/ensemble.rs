//! Online ensemble of a frozen pre-trained predictor, a continuously updated
//! copy of it, and a per-pixel gate that blends the two:
//!
//! ```text
//! x^ = w * x^P + (1 - w) * x^C,    w = f_W(x_t, x_{t-k})
//! ```
//!
//! Each update event takes one Adam step, jointly over the continuous
//! predictor and the gate, on the adaptive loss for the most recent triplet
//! `(x_{t-2k}, x_{t-k}) -> x_t`.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::losses::{loss_adaptive, MuWeights};
use crate::networks::{predict, weight_net_forward, ArchConfig, PredictionParams, WeightNetParams};
use crate::tensor::{adam_step, AdamConfig, AdamState, ParamSet, Tensor};
use crate::warping::convex_blend;

/// How often the online update runs, in ingested frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawInterval", into = "RawInterval")]
pub enum UpdateInterval {
    Every(u64),
    Never,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawInterval {
    Frames(u64),
    Word(String),
}

impl TryFrom<RawInterval> for UpdateInterval {
    type Error = String;

    fn try_from(raw: RawInterval) -> std::result::Result<Self, String> {
        match raw {
            RawInterval::Frames(0) => Err("update_interval must be at least 1".into()),
            RawInterval::Frames(n) => Ok(UpdateInterval::Every(n)),
            RawInterval::Word(w) if w == "never" => Ok(UpdateInterval::Never),
            RawInterval::Word(w) => Err(format!(
                "update_interval must be a positive integer or \"never\", got {w:?}"
            )),
        }
    }
}

impl From<UpdateInterval> for RawInterval {
    fn from(u: UpdateInterval) -> Self {
        match u {
            UpdateInterval::Every(n) => RawInterval::Frames(n),
            UpdateInterval::Never => RawInterval::Word("never".into()),
        }
    }
}

impl UpdateInterval {
    pub fn fires(&self, frame_clock: u64) -> bool {
        match *self {
            UpdateInterval::Every(n) => frame_clock.is_multiple_of(n),
            UpdateInterval::Never => false,
        }
    }
}

impl std::fmt::Display for UpdateInterval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UpdateInterval::Every(n) => write!(f, "{n}"),
            UpdateInterval::Never => f.write_str("never"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub arch: ArchConfig,
    pub k: usize,
    pub update_interval: UpdateInterval,
    pub lambda_c: f64,
    pub mu_online: MuWeights,
    pub optimizer: AdamConfig,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.optimizer.validate()?;
        self.mu_online.validate("loss.mu_online")?;
        if self.k == 0 {
            return Err(Error::Config("data.k must be at least 1".into()));
        }
        if !(self.lambda_c.is_finite() && self.lambda_c >= 0.0) {
            return Err(Error::Config("loss.lambda_c must be finite and non-negative".into()));
        }
        if self.mu_online.rho_per > 0.0 {
            return Err(Error::Config(
                "loss.mu_online.rho_per must be 0: the online path has no feature extractor".into(),
            ));
        }
        Ok(())
    }
}

/// Output of one ensemble forward pass.
#[derive(Clone, Debug)]
pub struct EnsemblePrediction {
    pub x_hat: Frame,
    pub x_p: Frame,
    pub x_c: Frame,
    /// `[1, H, W]` gate values.
    pub w: Vec<f32>,
}

/// A prediction that was fixed before its target frame arrived.
#[derive(Clone, Debug)]
pub struct ScoredPrediction {
    pub prediction: EnsemblePrediction,
    /// The latest frame when the prediction was made; the "repeat" baseline.
    pub repeat: Frame,
    /// Clock value of the frame the prediction was scored against.
    pub target_clock: u64,
}

#[derive(Clone, Debug, Default)]
pub struct StepOutcome {
    pub scored: Option<ScoredPrediction>,
    /// Adaptive loss of the update applied at this frame, if any.
    pub update_loss: Option<f64>,
}

#[derive(Clone, Debug)]
struct Pending {
    target_clock: u64,
    prediction: EnsemblePrediction,
    repeat: Frame,
}

pub struct EnsembleState {
    theta_p: PredictionParams,
    pub theta_c: PredictionParams,
    pub theta_w: WeightNetParams,
    pub adam_c: AdamState,
    pub adam_w: AdamState,
    pub config: EnsembleConfig,
    frame_clock: u64,
    history: VecDeque<Frame>,
    pending: VecDeque<Pending>,
}

/// Builds the ensemble with the continuous branch copied from `pretrained`.
pub fn init_ensemble(
    pretrained: PredictionParams,
    weight_init: WeightNetParams,
    config: EnsembleConfig,
) -> Result<EnsembleState> {
    config.validate()?;
    pretrained.check_arch(&config.arch)?;
    weight_init.check_arch(&config.arch)?;
    let theta_c = pretrained.clone();
    Ok(EnsembleState {
        adam_c: AdamState::new(&theta_c.flatten(), config.optimizer),
        adam_w: AdamState::new(&weight_init.layers, config.optimizer),
        theta_p: pretrained,
        theta_c,
        theta_w: weight_init,
        config,
        frame_clock: 0,
        history: VecDeque::new(),
        pending: VecDeque::new(),
    })
}

/// `w * x_p + (1 - w) * x_c` with `w` (`[1, H, W]`) broadcast over channels.
pub fn blend(x_p: &Frame, x_c: &Frame, w: &[f32]) -> Result<Frame> {
    let (h, wd) = x_p.dims();
    if x_c.dims() != (h, wd) {
        return Err(Error::shape("blend", format!("{:?} vs {:?}", x_p.dims(), x_c.dims())));
    }
    let w = Tensor::<f32>::new(w.to_vec(), &[1, h, wd])?;
    Frame::from_tensor(&convex_blend("blend", &x_p.to_tensor(), &x_c.to_tensor(), &w)?)
}

impl EnsembleState {
    pub fn theta_p(&self) -> &PredictionParams {
        &self.theta_p
    }

    pub fn frame_clock(&self) -> u64 {
        self.frame_clock
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Forgets buffered frames and outstanding predictions, e.g. at a scene
    /// cut. Parameters and the clock are kept.
    pub fn flush(&mut self) {
        self.history.clear();
        self.pending.clear();
    }

    /// Predicts the frame `k` after `x_t`. Does not change any parameter.
    pub fn predict_ensemble(&self, x_t: &Frame, x_prev: &Frame) -> Result<EnsemblePrediction> {
        let arch = &self.config.arch;
        let (a, b) = (x_t.to_tensor::<f32>(), x_prev.to_tensor::<f32>());
        let x_p = predict(&a, &b, &self.theta_p.leaves(false), arch)?.x_r2;
        let x_c = predict(&a, &b, &self.theta_c.leaves(false), arch)?.x_r2;
        let w = weight_net_forward(&a, &b, &self.theta_w.layers.leaves(false), arch)?;
        let x_hat = convex_blend("predict_ensemble", &x_p, &x_c, &w)?;
        Ok(EnsemblePrediction {
            x_hat: Frame::from_tensor(&x_hat)?,
            x_p: Frame::from_tensor(&x_p)?,
            x_c: Frame::from_tensor(&x_c)?,
            w: w.to_vec(),
        })
    }

    /// One joint Adam step on the continuous predictor and the gate, using
    /// `(x_prev2, x_prev)` as inputs and `x_now` as the target. Returns the
    /// adaptive loss before the step.
    pub fn online_update(&mut self, x_prev2: &Frame, x_prev: &Frame, x_now: &Frame) -> Result<f64> {
        self.online_update_with(x_prev2, x_prev, x_now, None)
    }

    fn online_update_with(
        &mut self,
        x_prev2: &Frame,
        x_prev: &Frame,
        x_now: &Frame,
        cached_x_p: Option<&Frame>,
    ) -> Result<f64> {
        let arch = self.config.arch;
        let (a, b, gt) = (
            x_prev.to_tensor::<f32>(),
            x_prev2.to_tensor::<f32>(),
            x_now.to_tensor::<f32>(),
        );
        let x_p = match cached_x_p {
            Some(f) => f.to_tensor::<f32>(),
            None => predict(&a, &b, &self.theta_p.leaves(false), &arch)?.x_r2,
        };
        let leaves_c = self.theta_c.leaves(true);
        let leaves_w = self.theta_w.layers.leaves(true);
        let x_c = predict(&a, &b, &leaves_c, &arch)?.x_r2;
        let w = weight_net_forward(&a, &b, &leaves_w, &arch)?;
        let x_hat = convex_blend("online_update", &x_p, &x_c, &w)?;
        let loss = loss_adaptive(&x_hat, &x_c, &gt, self.config.lambda_c, &self.config.mu_online)?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "online loss is {value} at frame {}",
                self.frame_clock
            )));
        }
        loss.backward()?;
        let grads_c = leaves_c.grads();
        let grads_w = leaves_w.grads();
        drop((leaves_c, leaves_w, loss, x_hat, x_c, w));
        self.theta_c.adam_update(&grads_c, &mut self.adam_c, &arch)?;
        adam_step(&mut self.theta_w.layers, &grads_w, &mut self.adam_w)?;
        Ok(value)
    }

    /// Ingests the next frame of the stream. In order: scores the prediction
    /// that targeted this frame, buffers the frame, applies the scheduled
    /// update, then predicts the frame `k` ahead.
    pub fn step_stream(&mut self, x_now: &Frame) -> Result<StepOutcome> {
        if let Some(last) = self.history.back() {
            if last.dims() != x_now.dims() {
                return Err(Error::shape(
                    "step_stream",
                    format!(
                        "frame size changed from {:?} to {:?} without a flush",
                        last.dims(),
                        x_now.dims()
                    ),
                ));
            }
        }
        let k = self.config.k;
        self.frame_clock += 1;
        let mut out = StepOutcome::default();
        let mut cached_x_p = None;
        if let Some(p) = self.pending.pop_front_if(|p| p.target_clock == self.frame_clock) {
            cached_x_p = Some(p.prediction.x_p.clone());
            out.scored = Some(ScoredPrediction {
                prediction: p.prediction,
                repeat: p.repeat,
                target_clock: p.target_clock,
            });
        }
        self.history.push_back(x_now.clone());
        while self.history.len() > 2 * k + 1 {
            self.history.pop_front();
        }
        if self.history.len() == 2 * k + 1 && self.config.update_interval.fires(self.frame_clock) {
            let (x2, x1) = (self.history[0].clone(), self.history[k].clone());
            // with k = 1 the pre-trained output for this triplet was computed
            // when it was predicted; the frozen branch makes it reusable
            let reuse = if k == 1 { cached_x_p.as_ref() } else { None };
            out.update_loss = Some(self.online_update_with(&x2, &x1, x_now, reuse)?);
        }
        let n = self.history.len();
        if n > k {
            let prediction = self.predict_ensemble(x_now, &self.history[n - 1 - k])?;
            self.pending.push_back(Pending {
                target_clock: self.frame_clock + k as u64,
                prediction,
                repeat: x_now.clone(),
            });
        }
        Ok(out)
    }

    /// Writes the three parameter files, the optimizer moments and a JSON
    /// sidecar into `dir`. The frame history is not saved.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.theta_p.flatten().save(&dir.join(THETA_P))?;
        self.theta_c.flatten().save(&dir.join(THETA_C))?;
        self.theta_w.layers.save(&dir.join(THETA_W))?;
        self.adam_c.save(&dir.join(ADAM_C.0), &dir.join(ADAM_C.1))?;
        self.adam_w.save(&dir.join(ADAM_W.0), &dir.join(ADAM_W.1))?;
        let sidecar = Sidecar {
            frame_clock: self.frame_clock,
            update_interval: self.config.update_interval,
            k: self.config.k,
            theta_p_sha256: self.theta_p.checksum(),
            adam_c: AdamRef::of(&self.adam_c, ADAM_C),
            adam_w: AdamRef::of(&self.adam_w, ADAM_W),
        };
        let path = dir.join(SIDECAR);
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    /// Restores a checkpoint written by [`save_checkpoint`](Self::save_checkpoint).
    /// `config` supplies the architecture and loss settings; the sidecar's
    /// `k` and `update_interval` must agree with it.
    pub fn load_checkpoint(dir: &Path, config: EnsembleConfig) -> Result<EnsembleState> {
        let path = dir.join(SIDECAR);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if sidecar.k != config.k || sidecar.update_interval != config.update_interval {
            return Err(Error::Config(format!(
                "checkpoint has k = {}, update_interval = {}; config has k = {}, update_interval = {}",
                sidecar.k, sidecar.update_interval, config.k, config.update_interval
            )));
        }
        let arch = config.arch;
        let theta_p = PredictionParams::from_flat(&ParamSet::load(&dir.join(THETA_P))?, &arch)?;
        if theta_p.checksum() != sidecar.theta_p_sha256 {
            return Err(Error::format(
                dir.join(THETA_P),
                "checksum does not match ensemble.json",
            ));
        }
        let theta_c = PredictionParams::from_flat(&ParamSet::load(&dir.join(THETA_C))?, &arch)?;
        let theta_w = WeightNetParams {
            layers: ParamSet::load(&dir.join(THETA_W))?,
        };
        let mut state = init_ensemble(theta_p, theta_w, config)?;
        state.adam_c = sidecar.adam_c.load(dir, &theta_c.flatten(), state.config.optimizer)?;
        state.adam_w = sidecar
            .adam_w
            .load(dir, &state.theta_w.layers, state.config.optimizer)?;
        state.theta_c = theta_c;
        state.frame_clock = sidecar.frame_clock;
        Ok(state)
    }
}

pub const THETA_P: &str = "theta_p.dcp";
pub const THETA_C: &str = "theta_c.dcp";
pub const THETA_W: &str = "theta_w.dcp";
pub const SIDECAR: &str = "ensemble.json";
const ADAM_C: (&str, &str) = ("adam_c_m1.dcp", "adam_c_m2.dcp");
const ADAM_W: (&str, &str) = ("adam_w_m1.dcp", "adam_w_m2.dcp");

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    frame_clock: u64,
    update_interval: UpdateInterval,
    k: usize,
    theta_p_sha256: String,
    adam_c: AdamRef,
    adam_w: AdamRef,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamRef {
    step: u64,
    first_moment: String,
    second_moment: String,
}

impl AdamRef {
    fn of(state: &AdamState, files: (&str, &str)) -> Self {
        AdamRef {
            step: state.step,
            first_moment: files.0.into(),
            second_moment: files.1.into(),
        }
    }

    fn load(&self, dir: &Path, params: &ParamSet, config: AdamConfig) -> Result<AdamState> {
        let first = ParamSet::load(&dir.join(&self.first_moment))?;
        let second = ParamSet::load(&dir.join(&self.second_moment))?;
        params.check_congruent(&first, "first moment")?;
        params.check_congruent(&second, "second moment")?;
        Ok(AdamState {
            step: self.step,
            first_moment: first,
            second_moment: second,
            config,
        })
    }
}

#[cfg(test)]
mod tests;
