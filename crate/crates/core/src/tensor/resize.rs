use super::{chw, Real, Tensor};
use crate::error::{Error, Result};

/// Source coordinate and interpolation weight for each output index
/// under the align-corners convention: output index `i` samples input
/// position `i * (n_in - 1) / (n_out - 1)`, so both end samples coincide.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let pos = if n_out == 1 || n_in == 1 {
                0.0
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of a `[C, H, W]` tensor to `[C, out_h, out_w]`
/// with align-corners sampling.
pub fn resize_bilinear<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = chw("resize_bilinear", input)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear", "output size must be at least 1x1"));
    }
    if (out_h, out_w) == (h, w) {
        return input.reshape(&[c, h, w]);
    }
    let ys: Vec<(usize, usize, T)> = taps(h, out_h).into_iter().map(|(a, b, f)| (a, b, T::of(f))).collect();
    let xs: Vec<(usize, usize, T)> = taps(w, out_w).into_iter().map(|(a, b, f)| (a, b, T::of(f))).collect();
    let src = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in src.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, fx) in &xs {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, out_h, out_w],
        out,
        vec![input.clone()],
        move |g, _| {
            let mut gx = vec![T::zero(); c * h * w];
            for (gp, xp) in g.chunks(out_h * out_w).zip(gx.chunks_mut(h * w)) {
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let v = gp[oy * out_w + ox];
                        let (top, bot) = (v * (T::one() - fy), v * fy);
                        xp[y0 * w + x0] += top * (T::one() - fx);
                        xp[y0 * w + x1] += top * fx;
                        xp[y1 * w + x0] += bot * (T::one() - fx);
                        xp[y1 * w + x1] += bot * fx;
                    }
                }
            }
            vec![Some(gx)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f32>::new((0..12).map(|v| v as f32).collect(), &[1, 3, 4]).unwrap();
        assert_eq!(resize_bilinear(&x, 3, 4).unwrap().data(), x.data());
    }

    #[test]
    fn two_to_three_inserts_midpoint() {
        let (a, b) = (0.25f64, 0.75f64);
        let x = Tensor::new(vec![a, b], &[1, 1, 2]).unwrap();
        let y = resize_bilinear(&x, 1, 3).unwrap();
        assert_eq!(y.data(), &[a, (a + b) / 2.0, b]);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 5], 0.4);
        let y = resize_bilinear(&x, 7, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let z = resize_bilinear(&x, 1, 1).unwrap();
        assert_eq!(z.shape(), &[2, 1, 1]);
    }

    #[test]
    fn rejects_zero_size() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2]);
        assert!(resize_bilinear(&x, 0, 2).is_err());
    }
}
