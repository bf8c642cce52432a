//! Central finite-difference verification of analytic gradients.

use super::{Leaves, ParamSet, Real, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)` over
    /// the probed entries of the block.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub probes: usize,
    /// Probes dropped because the function has a kink within the step.
    pub resampled: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&BlockReport> {
        self.blocks.iter().filter(|b| !b.passed).collect()
    }
}

/// Compares `f`'s analytic gradient at `point` against central differences
/// for every block of `point`. Blocks with more than `max_probes` entries are
/// probed at evenly spaced indices (0 probes every entry). The step is
/// `rel_step * max(1, |x|)`.
///
/// A probe whose one-sided slopes differ by more than `tolerance` (relative
/// to the block's gradient scale) and whose central difference changes when
/// the step is halved has a kink inside the step, where central differences
/// say nothing about the derivative; it is replaced by the next unprobed
/// entry of the block.
pub fn grad_check<T, F>(
    f: F,
    point: &ParamSet<T>,
    tolerance: f64,
    rel_step: f64,
    max_probes: usize,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&Leaves<T>) -> Result<Tensor<T>>,
{
    let analytic = analytic_grads(&f, point)?;
    compare(&analytic, &f, point, tolerance, rel_step, max_probes)
}

/// Like [`grad_check`], but the analytic gradient is taken from `lo` at
/// 32-bit precision while the finite differences evaluate `hi` in 64-bit at
/// the same point, so rounding noise in the oracle does not mask errors.
pub fn grad_check_mixed<L, H>(
    lo: L,
    hi: H,
    point: &ParamSet<f32>,
    tolerance: f64,
    rel_step: f64,
    max_probes: usize,
) -> Result<GradCheckReport>
where
    L: Fn(&Leaves<f32>) -> Result<Tensor<f32>>,
    H: Fn(&Leaves<f64>) -> Result<Tensor<f64>>,
{
    let analytic = analytic_grads(&lo, point)?.cast::<f64>();
    compare(&analytic, &hi, &point.cast::<f64>(), tolerance, rel_step, max_probes)
}

fn analytic_grads<T, F>(f: &F, point: &ParamSet<T>) -> Result<ParamSet<T>>
where
    T: Real,
    F: Fn(&Leaves<T>) -> Result<Tensor<T>>,
{
    let leaves = point.leaves(true);
    f(&leaves)?.backward()?;
    Ok(leaves.grads())
}

fn compare<T, F, A>(
    analytic: &ParamSet<A>,
    f: &F,
    point: &ParamSet<T>,
    tolerance: f64,
    rel_step: f64,
    max_probes: usize,
) -> Result<GradCheckReport>
where
    T: Real,
    A: Real,
    F: Fn(&Leaves<T>) -> Result<Tensor<T>>,
{
    let eval = |p: &ParamSet<T>| -> Result<f64> { Ok(f(&p.leaves(false))?.item().as_f64()) };
    let f0 = eval(point)?;
    let mut probe = point.clone();
    let mut blocks = Vec::new();
    for (name, block) in point.iter() {
        let n = block.data.len();
        let planned: Vec<usize> = if max_probes == 0 || n <= max_probes {
            (0..n).collect()
        } else {
            (0..max_probes).map(|i| i * n / max_probes).collect()
        };
        // replacements for probes that straddle a kink, in index order
        let spare = (0..n).filter(|i| !planned.contains(i));
        let grad = &analytic.get(name).expect("same names").data;
        let grad_scale = grad.iter().fold(0.0f64, |m, g| m.max(g.as_f64().abs()));
        // the analytic side is known for the whole block, so it sets the scale even when only some entries are probed
        let (mut max_abs, mut scale, mut used, mut resampled) = (0.0f64, grad_scale, 0, 0);
        for i in planned.iter().copied().chain(spare) {
            if used == planned.len() {
                break;
            }
            let x = block.data[i];
            let h = rel_step * x.as_f64().abs().max(1.0);
            let (hi, lo) = (T::of(x.as_f64() + h), T::of(x.as_f64() - h));
            probe.get_mut(name).unwrap().data[i] = hi;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data[i] = lo;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data[i] = x;
            // actual perturbations after rounding into T
            let (h_up, h_down) = (hi.as_f64() - x.as_f64(), x.as_f64() - lo.as_f64());
            let (s_up, s_down) = ((up - f0) / h_up, (f0 - down) / h_down);
            let numeric = (up - down) / (h_up + h_down);
            let local = grad_scale.max(s_up.abs()).max(s_down.abs());
            if (s_up - s_down).abs() > tolerance * local {
                // one-sided slopes disagree: either curvature or a ReLU/sampling kink inside the step.
                // Under curvature alone the slope gap halves with the step and the central
                // difference barely moves; a kink breaks one or the other.
                let (hi, lo) = (T::of(x.as_f64() + h / 2.0), T::of(x.as_f64() - h / 2.0));
                probe.get_mut(name).unwrap().data[i] = hi;
                let up = eval(&probe)?;
                probe.get_mut(name).unwrap().data[i] = lo;
                let down = eval(&probe)?;
                probe.get_mut(name).unwrap().data[i] = x;
                let (h_up, h_down) = (hi.as_f64() - x.as_f64(), x.as_f64() - lo.as_f64());
                let half = (up - down) / (h_up + h_down);
                let gap = (up - f0) / h_up - (f0 - down) / h_down;
                let bound = tolerance * local / 10.0;
                if (half - numeric).abs() > bound || (gap - (s_up - s_down) / 2.0).abs() > bound {
                    resampled += 1;
                    continue;
                }
            }
            let a = grad[i].as_f64();
            max_abs = max_abs.max((a - numeric).abs());
            scale = scale.max(numeric.abs());
            used += 1;
        }
        let max_rel = if scale > 0.0 { max_abs / scale } else { 0.0 };
        blocks.push(BlockReport {
            name: name.to_string(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            probes: used,
            resampled,
            passed: max_rel < tolerance && (used > 0 || n == 0),
        });
    }
    Ok(GradCheckReport { tolerance, blocks })
}
