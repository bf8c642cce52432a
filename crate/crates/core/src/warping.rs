//! Differentiable backward warping and the two-frame flow composition.
//!
//! Flow fields are `[2, H, W]` tensors in pixels: channel 0 is the
//! horizontal displacement (positive to the right), channel 1 the vertical
//! displacement (positive downward). Warping samples the source at
//! `p + flow(p)` with bilinear interpolation; sample coordinates outside the
//! image are clamped to the border, where the gradient with respect to the
//! flow is zero.

use crate::error::{Error, Result};
use crate::tensor::{chw, Real, Tensor};

#[derive(Clone, Copy)]
struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    live_x: bool,
    live_y: bool,
}

fn axis_tap<T: Real>(pos: T, n: usize) -> (usize, usize, T, bool) {
    let hi = T::of((n - 1) as f64);
    let live = pos >= T::zero() && pos <= hi;
    let p = pos.max(T::zero()).min(hi);
    let lo = p.floor().to_usize().unwrap_or(0).min(n - 1);
    let up = (lo + 1).min(n - 1);
    (lo, up, p - T::of(lo as f64), live)
}

/// Samples `frame` (`[C, H, W]`) at every pixel displaced by `flow`.
pub fn warp<T: Real>(frame: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw("warp", frame)?;
    if flow.shape() != [2, h, w] {
        return Err(Error::shape(
            "warp",
            format!(
                "flow must be [2, {h}, {w}] for a {c}x{h}x{w} frame, got {:?}",
                flow.shape()
            ),
        ));
    }
    if !flow.all_finite() {
        return Err(Error::invalid("warp", "flow contains non-finite values"));
    }
    let plane = h * w;
    let (u, v) = flow.data().split_at(plane);
    let taps: Vec<Tap<T>> = (0..plane)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let (x0, x1, fx, live_x) = axis_tap(T::of(x as f64) + u[i], w);
            let (y0, y1, fy, live_y) = axis_tap(T::of(y as f64) + v[i], h);
            Tap {
                x0,
                x1,
                y0,
                y1,
                fx,
                fy,
                live_x,
                live_y,
            }
        })
        .collect();

    let one = T::one();
    let src = frame.data();
    let mut out = Vec::with_capacity(c * plane);
    for img in src.chunks(plane) {
        for t in &taps {
            let top = (one - t.fx) * img[t.y0 * w + t.x0] + t.fx * img[t.y0 * w + t.x1];
            let bot = (one - t.fx) * img[t.y1 * w + t.x0] + t.fx * img[t.y1 * w + t.x1];
            out.push((one - t.fy) * top + t.fy * bot);
        }
    }

    let image = frame.clone();
    Ok(Tensor::from_op(
        vec![c, h, w],
        out,
        vec![frame.clone(), flow.clone()],
        move |g, mask| {
            let g_frame = mask[0].then(|| {
                let mut gi = vec![T::zero(); c * plane];
                for (gp, ip) in g.chunks(plane).zip(gi.chunks_mut(plane)) {
                    for (t, &gv) in taps.iter().zip(gp) {
                        let (top, bot) = (gv * (one - t.fy), gv * t.fy);
                        ip[t.y0 * w + t.x0] += top * (one - t.fx);
                        ip[t.y0 * w + t.x1] += top * t.fx;
                        ip[t.y1 * w + t.x0] += bot * (one - t.fx);
                        ip[t.y1 * w + t.x1] += bot * t.fx;
                    }
                }
                gi
            });
            let g_flow = mask[1].then(|| {
                let mut gf = vec![T::zero(); 2 * plane];
                let src = image.data();
                for (gp, img) in g.chunks(plane).zip(src.chunks(plane)) {
                    for (i, (t, &gv)) in taps.iter().zip(gp).enumerate() {
                        let a = img[t.y0 * w + t.x0];
                        let b = img[t.y0 * w + t.x1];
                        let cc = img[t.y1 * w + t.x0];
                        let d = img[t.y1 * w + t.x1];
                        if t.live_x {
                            gf[i] += gv * ((one - t.fy) * (b - a) + t.fy * (d - cc));
                        }
                        if t.live_y {
                            gf[plane + i] += gv * ((one - t.fx) * (cc - a) + t.fx * (d - b));
                        }
                    }
                }
                gf
            });
            vec![g_frame, g_flow]
        },
    ))
}

/// Fails unless `map` is `[1, h, w]` with every value in `[0, 1]`.
pub fn check_weight_map<T: Real>(op: &'static str, map: &Tensor<T>, h: usize, w: usize) -> Result<()> {
    if map.shape() != [1, h, w] {
        return Err(Error::shape(
            op,
            format!("weight map must be [1, {h}, {w}], got {:?}", map.shape()),
        ));
    }
    if let Some(bad) = map.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::invalid(op, format!("weight map value {bad} outside [0, 1]")));
    }
    Ok(())
}

/// `weight ⊗ a + (1 - weight) ⊗ b` with a single-channel weight map
/// broadcast over the channels of `a` and `b`.
pub fn convex_blend<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(op, a)?;
    if b.shape() != a.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    check_weight_map(op, weight, h, w)?;
    let w3 = weight.expand_channels(c)?;
    a.mul(&w3)?.add(&b.mul(&w3.one_minus())?)
}

/// Flow-based prediction from two frames:
/// `omega ⊗ warp(x_t, v_t) + (1 - omega) ⊗ warp(x_prev, v_prev)`.
pub fn edvf_compose<T: Real>(
    x_t: &Tensor<T>,
    x_prev: &Tensor<T>,
    v_t: &Tensor<T>,
    v_prev: &Tensor<T>,
    omega: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x_t.shape() != x_prev.shape() {
        return Err(Error::shape(
            "edvf_compose",
            format!("frames differ: {:?} vs {:?}", x_t.shape(), x_prev.shape()),
        ));
    }
    let from_t = warp(x_t, v_t)?;
    let from_prev = warp(x_prev, v_prev)?;
    convex_blend("edvf_compose", &from_t, &from_prev, omega)
}
