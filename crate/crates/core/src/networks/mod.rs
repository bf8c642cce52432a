//! The two-frame prediction network and the blending-weight network.
//!
//! The predictor runs an hourglass ("EDVF") that estimates two independent
//! flow fields and an occlusion weight, composes a first prediction from the
//! two warped inputs, then adds two residual refinements:
//!
//! ```text
//! x_e  = omega * warp(x_t, v_t) + (1 - omega) * warp(x_prev, v_prev)
//! x_r1 = x_e  + g1(x_prev, x_t, v_prev, v_t, omega)
//! x_r2 = x_r1 + g2(x_e, x_r1)
//! ```

mod hourglass;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use hourglass::{Head, HeadInit, Hourglass};

use crate::error::{Error, Result};
use crate::tensor::{adam_step, chw, AdamState, Leaves, ParamSet, Real, Tensor};
use crate::warping::{check_weight_map, edvf_compose};

pub const EDVF_PREFIX: &str = "edvf.";
pub const REFINE1_PREFIX: &str = "refine1.";
pub const REFINE2_PREFIX: &str = "refine2.";

/// Sizes of the three hourglasses and the flow range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub edvf_depth: usize,
    pub edvf_base: usize,
    pub refine_depth: usize,
    pub refine_base: usize,
    pub weight_depth: usize,
    pub weight_base: usize,
    /// Flow heads emit `max_disp * tanh(.)` pixels.
    pub max_disp: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            edvf_depth: 3,
            edvf_base: 32,
            refine_depth: 2,
            refine_base: 32,
            weight_depth: 2,
            weight_base: 16,
            max_disp: 16.0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("edvf_depth", self.edvf_depth),
            ("edvf_base", self.edvf_base),
            ("refine_depth", self.refine_depth),
            ("refine_base", self.refine_base),
            ("weight_depth", self.weight_depth),
            ("weight_base", self.weight_base),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0 || *v > 64) {
            return Err(Error::Config(format!("architecture.{name} must be in 1..=64")));
        }
        if !(self.max_disp > 0.0 && self.max_disp.is_finite()) {
            return Err(Error::Config("architecture.max_disp must be positive".into()));
        }
        Ok(())
    }

    pub fn edvf(&self) -> Hourglass {
        Hourglass {
            in_channels: 6,
            base: self.edvf_base,
            depth: self.edvf_depth,
            heads: vec![
                Head {
                    name: "flow_t",
                    channels: 2,
                    init: HeadInit::Scaled(0.1),
                },
                Head {
                    name: "flow_prev",
                    channels: 2,
                    init: HeadInit::Scaled(0.1),
                },
                Head {
                    name: "omega",
                    channels: 1,
                    init: HeadInit::Scaled(0.1),
                },
            ],
        }
    }

    pub fn refine1(&self) -> Hourglass {
        Hourglass {
            in_channels: 11,
            base: self.refine_base,
            depth: self.refine_depth,
            heads: vec![Head {
                name: "residual",
                channels: 3,
                init: HeadInit::Zero,
            }],
        }
    }

    pub fn refine2(&self) -> Hourglass {
        Hourglass {
            in_channels: 6,
            base: self.refine_base,
            depth: self.refine_depth,
            heads: vec![Head {
                name: "residual",
                channels: 3,
                init: HeadInit::Zero,
            }],
        }
    }

    pub fn weight_net(&self) -> Hourglass {
        Hourglass {
            in_channels: 6,
            base: self.weight_base,
            depth: self.weight_depth,
            heads: vec![Head {
                name: "weight",
                channels: 1,
                init: HeadInit::Zero,
            }],
        }
    }

    /// Frame height and width must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.edvf_depth.max(self.refine_depth).max(self.weight_depth)
    }
}

fn shape_params<T: Real>(net: &Hourglass) -> ParamSet<T> {
    let mut p = ParamSet::new();
    for (name, shape) in net.blocks() {
        let n = shape.iter().product();
        p.insert(name, &shape, vec![T::zero(); n]).expect("fresh names");
    }
    p
}

/// Parameters of one prediction network.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionParams<T: Real = f32> {
    pub edvf: ParamSet<T>,
    pub refine1: ParamSet<T>,
    pub refine2: ParamSet<T>,
}

impl<T: Real> PredictionParams<T> {
    pub fn init(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PredictionParams {
            edvf: arch.edvf().init(&mut rng),
            refine1: arch.refine1().init(&mut rng),
            refine2: arch.refine2().init(&mut rng),
        }
    }

    /// Single set with `edvf.`, `refine1.` and `refine2.` prefixes.
    pub fn flatten(&self) -> ParamSet<T> {
        let mut flat = ParamSet::new();
        flat.extend_prefixed(EDVF_PREFIX, &self.edvf)
            .expect("distinct prefixes");
        flat.extend_prefixed(REFINE1_PREFIX, &self.refine1)
            .expect("distinct prefixes");
        flat.extend_prefixed(REFINE2_PREFIX, &self.refine2)
            .expect("distinct prefixes");
        flat
    }

    /// Inverse of [`flatten`](Self::flatten), validated against `arch`.
    pub fn from_flat(flat: &ParamSet<T>, arch: &ArchConfig) -> Result<Self> {
        let p = PredictionParams {
            edvf: flat.strip_prefix(EDVF_PREFIX),
            refine1: flat.strip_prefix(REFINE1_PREFIX),
            refine2: flat.strip_prefix(REFINE2_PREFIX),
        };
        p.check_arch(arch)?;
        if p.edvf.len() + p.refine1.len() + p.refine2.len() != flat.len() {
            return Err(Error::Params {
                name: "prediction".into(),
                detail: "unexpected extra blocks".into(),
            });
        }
        Ok(p)
    }

    pub fn check_arch(&self, arch: &ArchConfig) -> Result<()> {
        shape_params::<T>(&arch.edvf()).check_congruent(&self.edvf, "edvf")?;
        shape_params::<T>(&arch.refine1()).check_congruent(&self.refine1, "refine1")?;
        shape_params::<T>(&arch.refine2()).check_congruent(&self.refine2, "refine2")
    }

    pub fn leaves(&self, requires_grad: bool) -> Leaves<T> {
        self.flatten().leaves(requires_grad)
    }

    pub fn cast<U: Real>(&self) -> PredictionParams<U> {
        PredictionParams {
            edvf: self.edvf.cast(),
            refine1: self.refine1.cast(),
            refine2: self.refine2.cast(),
        }
    }

    pub fn checksum(&self) -> String {
        self.flatten().checksum()
    }

    /// Applies one Adam step given flat gradients.
    pub fn adam_update(&mut self, flat_grads: &ParamSet<T>, state: &mut AdamState<T>, arch: &ArchConfig) -> Result<()> {
        let mut flat = self.flatten();
        adam_step(&mut flat, flat_grads, state)?;
        *self = Self::from_flat(&flat, arch)?;
        Ok(())
    }
}

/// Parameters of the blending-weight network.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightNetParams<T: Real = f32> {
    pub layers: ParamSet<T>,
}

impl<T: Real> WeightNetParams<T> {
    pub fn init(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WeightNetParams {
            layers: arch.weight_net().init(&mut rng),
        }
    }

    pub fn check_arch(&self, arch: &ArchConfig) -> Result<()> {
        shape_params::<T>(&arch.weight_net()).check_congruent(&self.layers, "weight_net")
    }
}

/// Every intermediate of one prediction pass.
#[derive(Clone, Debug)]
pub struct PredictionBundle<T: Real = f32> {
    pub x_e: Tensor<T>,
    pub x_r1: Tensor<T>,
    pub x_r2: Tensor<T>,
    pub v_t: Tensor<T>,
    pub v_prev: Tensor<T>,
    pub omega: Tensor<T>,
}

fn frame_pair<T: Real>(op: &'static str, x_t: &Tensor<T>, x_prev: &Tensor<T>) -> Result<(usize, usize)> {
    let (c, h, w) = chw(op, x_t)?;
    if c != 3 {
        return Err(Error::shape(op, format!("frames must have 3 channels, got {c}")));
    }
    if x_prev.shape() != x_t.shape() {
        return Err(Error::shape(
            op,
            format!("frames differ: {:?} vs {:?}", x_t.shape(), x_prev.shape()),
        ));
    }
    Ok((h, w))
}

fn ensure_finite<T: Real>(op: &str, outputs: &[Tensor<T>]) -> Result<()> {
    if outputs.iter().all(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{op} produced non-finite outputs")))
    }
}

/// Flow toward the next frame from `x_t`, from `x_prev`, and the weight map.
pub fn edvf_forward<T: Real>(
    x_t: &Tensor<T>,
    x_prev: &Tensor<T>,
    leaves: &Leaves<T>,
    arch: &ArchConfig,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (h, w) = frame_pair("edvf_forward", x_t, x_prev)?;
    let net = arch.edvf();
    net.check_input("edvf_forward", h, w)?;
    let input = Tensor::concat(&[x_t, x_prev])?;
    let heads = net.forward(&input, leaves, EDVF_PREFIX)?;
    ensure_finite("edvf_forward", &heads)?;
    let v_t = heads[0].tanh().scale(arch.max_disp);
    let v_prev = heads[1].tanh().scale(arch.max_disp);
    let omega = heads[2].sigmoid();
    check_weight_map("edvf_forward", &omega, h, w)?;
    Ok((v_t, v_prev, omega))
}

/// First refinement: `x_e + g1(x_prev, x_t, v_prev, v_t, omega)`.
#[allow(clippy::too_many_arguments)]
pub fn refine1<T: Real>(
    x_e: &Tensor<T>,
    x_t: &Tensor<T>,
    x_prev: &Tensor<T>,
    v_t: &Tensor<T>,
    v_prev: &Tensor<T>,
    omega: &Tensor<T>,
    leaves: &Leaves<T>,
    arch: &ArchConfig,
) -> Result<Tensor<T>> {
    let (h, w) = frame_pair("refine1", x_t, x_prev)?;
    if x_e.shape() != x_t.shape()
        || v_t.shape() != [2, h, w]
        || v_prev.shape() != [2, h, w]
        || omega.shape() != [1, h, w]
    {
        return Err(Error::shape("refine1", "inputs do not share the frame's spatial size"));
    }
    let input = Tensor::concat(&[x_prev, x_t, v_prev, v_t, omega])?;
    let residual = arch.refine1().forward(&input, leaves, REFINE1_PREFIX)?.remove(0);
    x_e.add(&residual)
}

/// Second refinement: `x_r1 + g2(x_e, x_r1)`.
pub fn refine2<T: Real>(x_e: &Tensor<T>, x_r1: &Tensor<T>, leaves: &Leaves<T>, arch: &ArchConfig) -> Result<Tensor<T>> {
    frame_pair("refine2", x_e, x_r1)?;
    let input = Tensor::concat(&[x_e, x_r1])?;
    let residual = arch.refine2().forward(&input, leaves, REFINE2_PREFIX)?.remove(0);
    x_r1.add(&residual)
}

/// Predicts the frame one interval after `x_t` from `x_t` and `x_prev`.
/// `leaves` come from [`PredictionParams::leaves`].
pub fn predict<T: Real>(
    x_t: &Tensor<T>,
    x_prev: &Tensor<T>,
    leaves: &Leaves<T>,
    arch: &ArchConfig,
) -> Result<PredictionBundle<T>> {
    let (v_t, v_prev, omega) = edvf_forward(x_t, x_prev, leaves, arch)?;
    let x_e = edvf_compose(x_t, x_prev, &v_t, &v_prev, &omega)?;
    let x_r1 = refine1(&x_e, x_t, x_prev, &v_t, &v_prev, &omega, leaves, arch)?;
    let x_r2 = refine2(&x_e, &x_r1, leaves, arch)?;
    Ok(PredictionBundle {
        x_e,
        x_r1,
        x_r2,
        v_t,
        v_prev,
        omega,
    })
}

/// Per-pixel blending coefficient in `[0, 1]` for the pre-trained branch.
pub fn weight_net_forward<T: Real>(
    x_t: &Tensor<T>,
    x_prev: &Tensor<T>,
    leaves: &Leaves<T>,
    arch: &ArchConfig,
) -> Result<Tensor<T>> {
    let (h, w) = frame_pair("weight_net_forward", x_t, x_prev)?;
    let net = arch.weight_net();
    net.check_input("weight_net_forward", h, w)?;
    let input = Tensor::concat(&[x_t, x_prev])?;
    let raw = net.forward(&input, leaves, "")?;
    ensure_finite("weight_net_forward", &raw)?;
    let weight = raw[0].sigmoid();
    check_weight_map("weight_net_forward", &weight, h, w)?;
    Ok(weight)
}
