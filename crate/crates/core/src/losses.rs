//! The image quality measure `mu` and the training objectives built on it.
//!
//! ```text
//! mu(x^, x) = rho_msei * MSE(x^, x) + rho_msed * MSE(grad x^, grad x)
//!           + rho_ssim * (1 - SSIM(x^, x)) + rho_per * Phi(x^, x)
//! ```
//!
//! Every norm is normalised to a mean over its entries so the weights do not
//! depend on frame size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{gradient_mse, ssim_tensor};
use crate::networks::{predict, ArchConfig, PredictionBundle};
use crate::tensor::{conv2d, Leaves, Real, Tensor};

/// Weights of the four terms of `mu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuWeights {
    pub rho_msei: f64,
    pub rho_msed: f64,
    pub rho_ssim: f64,
    pub rho_per: f64,
}

impl MuWeights {
    /// Offline (pre-training) weights.
    pub const OFFLINE: MuWeights = MuWeights {
        rho_msei: 0.05,
        rho_msed: 0.001,
        rho_ssim: 10.0,
        rho_per: 10.0,
    };
    /// Online-update weights.
    pub const ONLINE: MuWeights = MuWeights {
        rho_msei: 0.0001,
        rho_msed: 0.0,
        rho_ssim: 10.0,
        rho_per: 0.0,
    };

    pub fn validate(&self, what: &str) -> Result<()> {
        let all = [self.rho_msei, self.rho_msed, self.rho_ssim, self.rho_per];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "{what}: weights must be finite and non-negative"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config(format!("{what}: at least one weight must be positive")));
        }
        Ok(())
    }

    pub fn scaled(&self, f: f64) -> MuWeights {
        MuWeights {
            rho_msei: self.rho_msei * f,
            rho_msed: self.rho_msed * f,
            rho_ssim: self.rho_ssim * f,
            rho_per: self.rho_per * f,
        }
    }
}

/// Weights of the pre-training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainWeights {
    pub lambda_e: f64,
    pub lambda_r1: f64,
    pub lambda_r2: f64,
    pub lambda_of: f64,
}

impl Default for PretrainWeights {
    fn default() -> Self {
        PretrainWeights {
            lambda_e: 2.0,
            lambda_r1: 3.0,
            lambda_r2: 7.0,
            lambda_of: 0.1,
        }
    }
}

impl PretrainWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_e, self.lambda_r1, self.lambda_r2, self.lambda_of];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(
                "loss.pretrain: weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A fixed feature stack used by the perceptual term.
pub trait FeatureExtractor<T: Real> {
    /// Output of every stage, in order.
    fn stages(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

#[derive(Clone, Debug)]
struct ConvStage {
    weight: Vec<f64>,
    shape: [usize; 4],
    bias: Vec<f64>,
    stride: usize,
    relu: bool,
}

/// Stack of fixed 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct ConvFeatureExtractor {
    stages: Vec<ConvStage>,
}

impl ConvFeatureExtractor {
    /// Five seeded random stages (3->16 /2, 16->32 /2, then three 32->32),
    /// each followed by ReLU.
    pub fn random(seed: u64, num_stages: usize) -> Result<Self> {
        const PLAN: [(usize, usize, usize); 5] = [(3, 16, 2), (16, 32, 2), (32, 32, 1), (32, 32, 1), (32, 32, 1)];
        if num_stages == 0 || num_stages > PLAN.len() {
            return Err(Error::Config(format!(
                "perceptual stages must be in 1..=5, got {num_stages}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = PLAN[..num_stages]
            .iter()
            .map(|&(c_in, c_out, stride)| {
                let bound = (6.0 / (c_in * 9) as f64).sqrt();
                ConvStage {
                    weight: (0..c_out * c_in * 9).map(|_| rng.gen_range(-bound..bound)).collect(),
                    shape: [c_out, c_in, 3, 3],
                    bias: vec![0.0; c_out],
                    stride,
                    relu: true,
                }
            })
            .collect();
        Ok(ConvFeatureExtractor { stages })
    }

    /// One stage whose output equals its 3-channel input.
    pub fn identity() -> Self {
        let mut weight = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            weight[(c * 3 + c) * 9 + 4] = 1.0;
        }
        ConvFeatureExtractor {
            stages: vec![ConvStage {
                weight,
                shape: [3, 3, 3, 3],
                bias: vec![0.0; 3],
                stride: 1,
                relu: false,
            }],
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }
}

impl<T: Real> FeatureExtractor<T> for ConvFeatureExtractor {
    fn stages(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let k = Tensor::new(s.weight.iter().map(|&v| T::of(v)).collect(), &s.shape)?;
            let b = Tensor::new(s.bias.iter().map(|&v| T::of(v)).collect(), &[s.shape[0]])?;
            let input = out.last().unwrap_or(x);
            let y = conv2d(input, &k, &b, s.stride, 1)?;
            out.push(if s.relu { y.relu() } else { y });
        }
        Ok(out)
    }
}

/// Sum over stages of the mean absolute feature difference.
pub fn perceptual_distance<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "perceptual_distance",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let fa = extractor.stages(a)?;
    let fb = extractor.stages(b)?;
    let mut total: Option<Tensor<T>> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let d = x.sub(y)?.abs().mean();
        total = Some(match total {
            Some(t) => t.add(&d)?,
            None => d,
        });
    }
    total.ok_or_else(|| Error::Config("perceptual extractor has no stages".into()))
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(a.sub(b)?.square().mean())
}

/// Weighted image quality measure. Terms with zero weight are not evaluated.
pub fn mu<T: Real>(
    x_hat: &Tensor<T>,
    x: &Tensor<T>,
    w: &MuWeights,
    extractor: Option<&dyn FeatureExtractor<T>>,
) -> Result<Tensor<T>> {
    if x_hat.shape() != x.shape() {
        return Err(Error::shape("mu", format!("{:?} vs {:?}", x_hat.shape(), x.shape())));
    }
    let mut terms = Vec::new();
    if w.rho_msei > 0.0 {
        terms.push(mse(x_hat, x)?.scale(w.rho_msei));
    }
    if w.rho_msed > 0.0 {
        terms.push(gradient_mse(x_hat, x)?.scale(w.rho_msed));
    }
    if w.rho_ssim > 0.0 {
        terms.push(ssim_tensor(x_hat, x)?.one_minus().scale(w.rho_ssim));
    }
    if w.rho_per > 0.0 {
        let ex = extractor
            .ok_or_else(|| Error::Config("rho_per > 0 but no perceptual feature extractor is configured".into()))?;
        terms.push(perceptual_distance(x_hat, x, ex)?.scale(w.rho_per));
    }
    let mut it = terms.into_iter();
    let first = it.next().unwrap_or_else(|| Tensor::scalar(T::zero()));
    it.try_fold(first, |acc, t| acc.add(&t))
}

/// Mean absolute forward difference of a flow field over both axes.
pub fn flow_smoothness<T: Real>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let dx = v.diff_x()?.abs();
    let dy = v.diff_y()?.abs();
    let n = (dx.numel() + dy.numel()) as f64;
    Ok(dx.sum().add(&dy.sum())?.scale(1.0 / n))
}

/// Pre-training objective over every intermediate of a prediction.
pub fn loss_pretrain<T: Real>(
    bundle: &PredictionBundle<T>,
    gt: &Tensor<T>,
    w: &PretrainWeights,
    muw: &MuWeights,
    extractor: Option<&dyn FeatureExtractor<T>>,
) -> Result<Tensor<T>> {
    let e = mu(&bundle.x_e, gt, muw, extractor)?.scale(w.lambda_e);
    let r1 = mu(&bundle.x_r1, gt, muw, extractor)?.scale(w.lambda_r1);
    let r2 = mu(&bundle.x_r2, gt, muw, extractor)?.scale(w.lambda_r2);
    let smooth = flow_smoothness(&bundle.v_prev)?
        .add(&flow_smoothness(&bundle.v_t)?)?
        .scale(w.lambda_of);
    e.add(&r1)?.add(&r2)?.add(&smooth)
}

/// Online objective: quality of the ensemble output plus `lambda_c` times
/// the quality of the continuously-updated branch.
pub fn loss_adaptive<T: Real>(
    x_hat: &Tensor<T>,
    x_hat_c: &Tensor<T>,
    gt: &Tensor<T>,
    lambda_c: f64,
    muw: &MuWeights,
) -> Result<Tensor<T>> {
    let main = mu(x_hat, gt, muw, None)?;
    if lambda_c == 0.0 {
        return Ok(main);
    }
    main.add(&mu(x_hat_c, gt, muw, None)?.scale(lambda_c))
}

/// Quality of the continuously-updated network's prediction of `gt` from the
/// two frames before it. `leaves` come from `PredictionParams::leaves`.
pub fn loss_continuous<T: Real>(
    x_prev2: &Tensor<T>,
    x_prev: &Tensor<T>,
    gt: &Tensor<T>,
    leaves: &Leaves<T>,
    arch: &ArchConfig,
    muw: &MuWeights,
) -> Result<Tensor<T>> {
    let pred = predict(x_prev, x_prev2, leaves, arch)?;
    mu(&pred.x_r2, gt, muw, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::PredictionParams;
    use crate::tensor::{grad_check, grad_check_mixed, ParamSet};

    fn rand_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            (0..shape.iter().product()).map(|_| rng.gen_range(lo..hi)).collect(),
            shape,
        )
        .unwrap()
    }

    fn all_weight_sets() -> Vec<MuWeights> {
        vec![
            MuWeights::OFFLINE,
            MuWeights::ONLINE,
            MuWeights {
                rho_msei: 1.0,
                rho_msed: 1.0,
                rho_ssim: 1.0,
                rho_per: 1.0,
            },
            MuWeights {
                rho_msei: 0.0,
                rho_msed: 2.0,
                rho_ssim: 0.0,
                rho_per: 0.0,
            },
        ]
    }

    #[test]
    fn mu_of_identical_frames_is_zero() {
        let ex = ConvFeatureExtractor::random(0, 5).unwrap();
        let x = rand_tensor(1, &[3, 16, 16], 0.0, 1.0);
        for w in all_weight_sets() {
            let v = mu(&x, &x, &w, Some(&ex)).unwrap().item();
            assert!(v.abs() < 1e-12, "{w:?}: {v}");
        }
    }

    #[test]
    fn mu_online_closed_form() {
        // MSE 0.01 and SSIM 0.9 are the component values; combine per the weights.
        let (m, s) = (0.01, 0.9);
        let w = MuWeights::ONLINE;
        let want = w.rho_msei * m + w.rho_ssim * (1.0 - s);
        assert!((want - 1.000001f64).abs() < 1e-12);

        let x = rand_tensor(2, &[3, 16, 16], 0.2, 0.8);
        let y = x.add_scalar(0.1);
        let m = mse(&x, &y).unwrap().item();
        let s = ssim_tensor(&x, &y).unwrap().item();
        let got = mu(&x, &y, &w, None).unwrap().item();
        assert!((m - 0.01).abs() < 1e-12);
        assert!((got - (0.0001 * m + 10.0 * (1.0 - s))).abs() < 1e-12);
    }

    #[test]
    fn mu_is_linear_in_weights() {
        let ex = ConvFeatureExtractor::random(0, 5).unwrap();
        let a = rand_tensor(3, &[3, 16, 16], 0.0, 1.0);
        let b = rand_tensor(4, &[3, 16, 16], 0.0, 1.0);
        let w = MuWeights::OFFLINE;
        let one = mu(&a, &b, &w, Some(&ex)).unwrap().item();
        let two = mu(&a, &b, &w.scaled(2.0), Some(&ex)).unwrap().item();
        assert!((two - 2.0 * one).abs() < 1e-12 * one.abs().max(1.0));
        assert!(one > 0.0);
    }

    #[test]
    fn mu_requires_extractor_for_perceptual_term() {
        let a = rand_tensor(3, &[3, 16, 16], 0.0, 1.0);
        let err = mu(&a, &a, &MuWeights::OFFLINE, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn weight_validation() {
        MuWeights::OFFLINE.validate("x").unwrap();
        MuWeights::ONLINE.validate("x").unwrap();
        let zero = MuWeights::OFFLINE.scaled(0.0);
        assert!(zero.validate("x").is_err());
        assert!(MuWeights {
            rho_msei: -1.0,
            ..MuWeights::ONLINE
        }
        .validate("x")
        .is_err());
        assert_eq!(
            PretrainWeights::default(),
            PretrainWeights {
                lambda_e: 2.0,
                lambda_r1: 3.0,
                lambda_r2: 7.0,
                lambda_of: 0.1
            }
        );
    }

    #[test]
    fn perceptual_identity_reduces_to_l1() {
        let ex = ConvFeatureExtractor::identity();
        let a = rand_tensor(5, &[3, 8, 9], 0.0, 1.0);
        let b = rand_tensor(6, &[3, 8, 9], 0.0, 1.0);
        let d = perceptual_distance(&a, &b, &ex).unwrap().item();
        let l1 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64;
        assert!((d - l1).abs() < 1e-12);
        let rnd = ConvFeatureExtractor::random(3, 5).unwrap();
        assert_eq!(perceptual_distance(&a, &a, &rnd).unwrap().item(), 0.0);
        assert!(perceptual_distance(&a, &b, &rnd).unwrap().item() > 0.0);
        assert!(ConvFeatureExtractor::random(3, 6).is_err());
    }

    #[test]
    fn flow_smoothness_of_constant_flow_is_zero() {
        let v = Tensor::<f64>::full(&[2, 6, 6], 1.7);
        assert_eq!(flow_smoothness(&v).unwrap().item(), 0.0);
        let ramp = Tensor::<f64>::new((0..2 * 3 * 4).map(|i| (i % 4) as f64).collect(), &[2, 3, 4]).unwrap();
        // 18 horizontal differences of 1, 16 vertical differences of 0
        assert!((flow_smoothness(&ramp).unwrap().item() - 18.0 / 34.0).abs() < 1e-15);
    }

    fn bundle_of(x: &Tensor<f64>, v: f64) -> PredictionBundle<f64> {
        let (_, h, w) = (3, x.shape()[1], x.shape()[2]);
        PredictionBundle {
            x_e: x.clone(),
            x_r1: x.clone(),
            x_r2: x.clone(),
            v_t: Tensor::full(&[2, h, w], v),
            v_prev: Tensor::full(&[2, h, w], -v),
            omega: Tensor::full(&[1, h, w], 0.5),
        }
    }

    #[test]
    fn pretrain_loss_cases() {
        let ex = ConvFeatureExtractor::random(0, 5).unwrap();
        let gt = rand_tensor(7, &[3, 16, 16], 0.0, 1.0);
        let w = PretrainWeights::default();
        let zero = loss_pretrain(&bundle_of(&gt, 0.0), &gt, &w, &MuWeights::OFFLINE, Some(&ex)).unwrap();
        assert!(zero.item().abs() < 1e-12);
        let still = loss_pretrain(&bundle_of(&gt, 3.0), &gt, &w, &MuWeights::OFFLINE, Some(&ex)).unwrap();
        assert!(still.item().abs() < 1e-12);

        let xe = rand_tensor(8, &[3, 16, 16], 0.0, 1.0);
        let x1 = rand_tensor(9, &[3, 16, 16], 0.0, 1.0);
        let x2 = rand_tensor(10, &[3, 16, 16], 0.0, 1.0);
        let vt = rand_tensor(11, &[2, 16, 16], -1.0, 1.0);
        let vp = rand_tensor(12, &[2, 16, 16], -1.0, 1.0);
        let b = PredictionBundle {
            x_e: xe.clone(),
            x_r1: x1.clone(),
            x_r2: x2.clone(),
            v_t: vt.clone(),
            v_prev: vp.clone(),
            omega: Tensor::full(&[1, 16, 16], 0.5),
        };
        let m = |x: &Tensor<f64>| mu(x, &gt, &MuWeights::OFFLINE, Some(&ex)).unwrap().item();
        let s = |v: &Tensor<f64>| flow_smoothness(v).unwrap().item();
        let want = 2.0 * m(&xe) + 3.0 * m(&x1) + 7.0 * m(&x2) + 0.1 * (s(&vt) + s(&vp));
        let got = loss_pretrain(&b, &gt, &w, &MuWeights::OFFLINE, Some(&ex))
            .unwrap()
            .item();
        assert!((got - want).abs() < 1e-10 * want);
    }

    #[test]
    fn adaptive_loss_cases() {
        let gt = rand_tensor(13, &[3, 16, 16], 0.0, 1.0);
        let a = rand_tensor(14, &[3, 16, 16], 0.0, 1.0);
        let c = rand_tensor(15, &[3, 16, 16], 0.0, 1.0);
        let w = MuWeights::ONLINE;
        assert_eq!(loss_adaptive(&gt, &gt, &gt, 0.1, &w).unwrap().item(), 0.0);
        let m1 = mu(&a, &gt, &w, None).unwrap().item();
        let m2 = mu(&c, &gt, &w, None).unwrap().item();
        assert_eq!(loss_adaptive(&a, &c, &gt, 0.0, &w).unwrap().item(), m1);
        assert!((loss_adaptive(&a, &c, &gt, 0.1, &w).unwrap().item() - (m1 + 0.1 * m2)).abs() < 1e-12);
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            edvf_depth: 2,
            edvf_base: 3,
            refine_depth: 1,
            refine_base: 2,
            weight_depth: 1,
            weight_base: 2,
            max_disp: 2.0,
        }
    }

    #[test]
    fn continuous_loss_is_mu_of_prediction_and_reaches_every_block() {
        let arch = small_arch();
        let mut p = PredictionParams::<f64>::init(&arch, 4);
        for set in [&mut p.refine1, &mut p.refine2] {
            for (_, b) in set.iter_mut() {
                b.data
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, v)| *v += 0.01 * ((i % 7) as f64 - 3.0));
            }
        }
        let x2 = rand_tensor(16, &[3, 16, 16], 0.0, 1.0);
        let x1 = rand_tensor(17, &[3, 16, 16], 0.0, 1.0);
        let gt = rand_tensor(18, &[3, 16, 16], 0.0, 1.0);
        let leaves = p.leaves(true);
        let loss = loss_continuous(&x2, &x1, &gt, &leaves, &arch, &MuWeights::ONLINE).unwrap();
        let direct = predict(&x1, &x2, &p.leaves(false), &arch).unwrap().x_r2;
        let want = mu(&gt, &direct, &MuWeights::ONLINE, None).unwrap().item();
        assert!((loss.item() - want).abs() < 1e-12);
        loss.backward().unwrap();
        for (name, g) in leaves.grads().iter() {
            assert!(g.data.iter().any(|v| *v != 0.0), "{name} got no gradient");
        }
    }

    #[test]
    fn mu_gradients_match_finite_differences() {
        let ex = ConvFeatureExtractor::random(1, 3).unwrap();
        for seed in 0..20 {
            let mut p = ParamSet::<f64>::new();
            p.insert("a", &[3, 12, 12], rand_tensor(seed, &[3, 12, 12], 0.0, 1.0).to_vec())
                .unwrap();
            p.insert(
                "b",
                &[3, 12, 12],
                rand_tensor(seed + 100, &[3, 12, 12], 0.0, 1.0).to_vec(),
            )
            .unwrap();
            let w = MuWeights {
                rho_msei: 1.0,
                rho_msed: 1.0,
                rho_ssim: 1.0,
                rho_per: 0.0,
            };
            let report = grad_check(|l| mu(l.get("a")?, l.get("b")?, &w, None), &p, 1e-5, 1e-6, 0).unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
            // the perceptual term has ReLU and |.| kinks; probe a subset
            let report = grad_check(
                |l| perceptual_distance(l.get("a")?, l.get("b")?, &ex),
                &p,
                1e-5,
                1e-7,
                24,
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn full_pretrain_loss_gradient_at_32_bit() {
        let arch = small_arch();
        let mut p = PredictionParams::<f64>::init(&arch, 9);
        for set in [&mut p.refine1, &mut p.refine2] {
            for (_, b) in set.iter_mut() {
                b.data
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, v)| *v += 0.02 * ((i % 5) as f64 - 2.0));
            }
        }
        let point = p.flatten().cast::<f32>();
        let frames: Vec<Tensor<f64>> = (30..33).map(|s| rand_tensor(s, &[3, 16, 16], 0.0, 1.0)).collect();
        let lo: Vec<Tensor<f32>> = frames
            .iter()
            .map(|t| Tensor::new(t.data().iter().map(|&v| v as f32).collect(), t.shape()).unwrap())
            .collect();
        let hi: Vec<Tensor<f64>> = lo
            .iter()
            .map(|t| Tensor::new(t.data().iter().map(|&v| v as f64).collect(), t.shape()).unwrap())
            .collect();
        let w = PretrainWeights::default();
        let muw = MuWeights {
            rho_per: 0.0,
            ..MuWeights::OFFLINE
        };
        let report = grad_check_mixed(
            |l| loss_pretrain(&predict(&lo[1], &lo[0], l, &arch)?, &lo[2], &w, &muw, None),
            |l| loss_pretrain(&predict(&hi[1], &hi[0], l, &arch)?, &hi[2], &w, &muw, None),
            &point,
            1e-3,
            1e-6,
            4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures());
    }
}
