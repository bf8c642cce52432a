//! Experimental apparatus: synthetic scenes, triplets, offline training and
//! streaming evaluation.

mod io;
mod scene;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{
    fmt6, frame_file_name, read_csv, read_ppm, read_sequence, write_csv, write_ppm, write_table, MetricRecord,
    CSV_HEADER,
};
pub use scene::{gen_scene, SceneKind, SceneSpec};

use crate::ensemble::{EnsembleState, ScoredPrediction};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::losses::{loss_pretrain, ConvFeatureExtractor, FeatureExtractor, MuWeights, PretrainWeights};
use crate::metrics::score;
use crate::networks::{predict, ArchConfig, PredictionParams};
use crate::tensor::{AdamConfig, AdamState};

/// `(x_{t-k}, x_t, x_{t+k})`.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub prev: Frame,
    pub cur: Frame,
    pub next: Frame,
}

/// Every triplet at interval `k`; `len - 2k` of them, or none if the
/// sequence is too short.
pub fn make_triplets(frames: &[Frame], k: usize) -> Vec<Triplet> {
    if k == 0 || frames.len() < 2 * k + 1 {
        return Vec::new();
    }
    (k..frames.len() - k)
        .map(|t| Triplet {
            prev: frames[t - k].clone(),
            cur: frames[t].clone(),
            next: frames[t + k].clone(),
        })
        .collect()
}

/// Triplets from a list of scenes, generated in order.
pub fn scene_triplets(scenes: &[SceneSpec], k: usize) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend(make_triplets(&gen_scene(s)?, k));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PretrainSettings {
    pub arch: ArchConfig,
    pub weights: PretrainWeights,
    pub mu: MuWeights,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    /// Seeds the per-epoch visiting order.
    pub seed: u64,
    /// Required when `mu.rho_per > 0`.
    pub extractor: Option<ConvFeatureExtractor>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: PredictionParams,
    /// Mean pre-training loss of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Offline training: one Adam step per triplet, triplets visited in a
/// seeded shuffled order each epoch.
pub fn pretrain(
    triplets: &[Triplet],
    params: PredictionParams,
    settings: &PretrainSettings,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<PretrainOutcome> {
    if triplets.is_empty() {
        return Err(Error::Config("pretraining needs at least one triplet".into()));
    }
    let arch = settings.arch;
    params.check_arch(&arch)?;
    let extractor = settings.extractor.as_ref().map(|e| e as &dyn FeatureExtractor<f32>);
    if settings.mu.rho_per > 0.0 && extractor.is_none() {
        return Err(Error::Config(
            "rho_per > 0 but no perceptual feature extractor is configured".into(),
        ));
    }
    let mut params = params;
    let mut adam = AdamState::new(&params.flatten(), settings.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut curve = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let t = &triplets[i];
            let leaves = params.leaves(true);
            let bundle = predict(&t.cur.to_tensor(), &t.prev.to_tensor(), &leaves, &arch)?;
            let loss = loss_pretrain(&bundle, &t.next.to_tensor(), &settings.weights, &settings.mu, extractor)?;
            let value = loss.item() as f64;
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "pre-training loss is {value} at epoch {epoch}, triplet {i}"
                )));
            }
            loss.backward()?;
            let grads = leaves.grads();
            if !grads.all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient at epoch {epoch}, triplet {i}"
                )));
            }
            drop((bundle, loss, leaves));
            params.adam_update(&grads, &mut adam, &arch)?;
            total += value;
        }
        let mean = total / triplets.len() as f64;
        on_epoch(epoch, mean);
        curve.push(mean);
    }
    Ok(PretrainOutcome {
        params,
        loss_curve: curve,
    })
}

/// Mean SSIM and PSNR of a predictor and of the repeat baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OfflineSummary {
    pub count: usize,
    pub model_ssim: f64,
    pub model_psnr: f64,
    pub repeat_ssim: f64,
    pub repeat_psnr: f64,
}

pub fn evaluate_offline(
    triplets: &[Triplet],
    params: &PredictionParams,
    arch: &ArchConfig,
    crop: f64,
) -> Result<OfflineSummary> {
    if triplets.is_empty() {
        return Err(Error::Config("evaluation needs at least one triplet".into()));
    }
    let leaves = params.leaves(false);
    let mut sums = [0.0; 4];
    for t in triplets {
        let pred = predict(&t.cur.to_tensor(), &t.prev.to_tensor(), &leaves, arch)?.x_r2;
        let (ms, mp) = score(&Frame::from_tensor(&pred)?, &t.next, crop)?;
        let (rs, rp) = score(&t.cur, &t.next, crop)?;
        for (s, v) in sums.iter_mut().zip([ms, mp, rs, rp]) {
            *s += v;
        }
    }
    let n = triplets.len() as f64;
    Ok(OfflineSummary {
        count: triplets.len(),
        model_ssim: sums[0] / n,
        model_psnr: sums[1] / n,
        repeat_ssim: sums[2] / n,
        repeat_psnr: sums[3] / n,
    })
}

/// A scene played `repeat` times; repetition `r` uses seed `scene.seed + r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSegment {
    pub scene: SceneSpec,
    #[serde(default = "one")]
    pub repeat: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamScript {
    pub segments: Vec<StreamSegment>,
}

impl StreamScript {
    pub fn validate(&self, max_disp: f64) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Config("stream script must have at least one segment".into()));
        }
        let size = self.segments[0].scene.size;
        for s in &self.segments {
            s.scene.validate(max_disp)?;
            if s.repeat == 0 {
                return Err(Error::Config("stream segment repeat must be at least 1".into()));
            }
            if s.scene.size != size {
                return Err(Error::Config(format!(
                    "all stream scenes must share one size; found {:?} and {:?}",
                    size, s.scene.size
                )));
            }
        }
        Ok(())
    }

    /// Scene specs in play order; the index is the scene id.
    pub fn scenes(&self) -> Vec<SceneSpec> {
        self.segments
            .iter()
            .flat_map(|s| {
                (0..s.repeat).map(move |r| SceneSpec {
                    seed: s.scene.seed.wrapping_add(r as u64),
                    ..s.scene.clone()
                })
            })
            .collect()
    }

    /// Renders the whole stream as `(scene_id, frame)` pairs.
    pub fn render(&self) -> Result<Vec<(usize, Frame)>> {
        let mut out = Vec::new();
        for (id, spec) in self.scenes().iter().enumerate() {
            out.extend(gen_scene(spec)?.into_iter().map(|f| (id, f)));
        }
        Ok(out)
    }
}

/// Drives `state` over a stream of `(scene_id, frame)` pairs. A change of
/// scene id flushes the ensemble history. Each scored frame yields a record
/// for the ensemble, both branches and the repeat baseline; metrics use
/// the center crop `crop`. `on_record` sees every record as it is produced,
/// with the prediction it scores.
pub fn run_online_eval(
    stream: impl IntoIterator<Item = (usize, Frame)>,
    state: &mut EnsembleState,
    crop: f64,
    mut on_record: impl FnMut(&MetricRecord, &ScoredPrediction) -> Result<()>,
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    let mut scene = None;
    for (index, (scene_id, frame)) in stream.into_iter().enumerate() {
        if scene.is_some_and(|s| s != scene_id) {
            state.flush();
        }
        scene = Some(scene_id);
        let outcome = state.step_stream(&frame)?;
        let Some(scored) = outcome.scored else { continue };
        let p = &scored.prediction;
        let (se, pe) = score(&p.x_hat, &frame, crop)?;
        let (sp, pp) = score(&p.x_p, &frame, crop)?;
        let (sc, pc) = score(&p.x_c, &frame, crop)?;
        let (sr, pr) = score(&scored.repeat, &frame, crop)?;
        let record = MetricRecord {
            frame_index: index as u64,
            scene_id,
            ssim_ensemble: se,
            ssim_pretrained: sp,
            ssim_continuous: sc,
            ssim_repeat: sr,
            psnr_ensemble: pe,
            psnr_pretrained: pp,
            psnr_continuous: pc,
            psnr_repeat: pr,
            updated: outcome.update_loss.is_some(),
            loss: outcome.update_loss,
        };
        on_record(&record, &scored)?;
        records.push(record);
    }
    Ok(records)
}

/// Trailing mean over the last `min(window, i + 1)` samples.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, &v) in series.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub const TREND_HEADER: [&str; 10] = [
    "frame_index",
    "scene_id",
    "ssim_ensemble",
    "ssim_pretrained",
    "ssim_continuous",
    "ssim_repeat",
    "psnr_ensemble",
    "psnr_pretrained",
    "psnr_continuous",
    "psnr_repeat",
];

/// Moving averages of the eight metric columns, one row per record.
pub fn trend_rows(records: &[MetricRecord], window: usize) -> Vec<Vec<String>> {
    let columns: Vec<Vec<f64>> = (0..8)
        .map(|j| {
            let series: Vec<f64> = records
                .iter()
                .map(|r| if j < 4 { r.ssim()[j] } else { r.psnr()[j - 4] })
                .collect();
            moving_average(&series, window)
        })
        .collect();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![r.frame_index.to_string(), r.scene_id.to_string()];
            row.extend(columns.iter().map(|c| fmt6(c[i])));
            row
        })
        .collect()
}

/// Mean of each SSIM column over records whose scene id passes `keep`.
pub fn mean_ssim(records: &[MetricRecord], keep: impl Fn(usize) -> bool) -> Option<[f64; 4]> {
    let sel: Vec<&MetricRecord> = records.iter().filter(|r| keep(r.scene_id)).collect();
    if sel.is_empty() {
        return None;
    }
    let mut m = [0.0; 4];
    for r in &sel {
        for (a, v) in m.iter_mut().zip(r.ssim()) {
            *a += v;
        }
    }
    Some(m.map(|v| v / sel.len() as f64))
}
