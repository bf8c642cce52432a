use super::{chw, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `[C_in, H, W]` into a `[C_in*kh*kw, oh*ow]` patch matrix.
fn im2col<T: Real>(src: &[T], g: &Geometry) -> Vec<T> {
    let p = g.cols();
    let mut cols = vec![T::zero(); g.rows() * p];
    for c in 0..g.c_in {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        // ix = ox + kj - pad; copy the in-range span in one go.
                        let off = kj as isize - g.pad as isize;
                        let lo = (-off).max(0) as usize;
                        let hi = ((g.w as isize - off).min(g.ow as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + off) as usize;
                            drow[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Real>(cols: &[T], g: &Geometry) -> Vec<T> {
    let p = g.cols();
    let mut img = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    img
}

/// 2-D cross-correlation of a `[C_in, H, W]` input with a
/// `[C_out, C_in, kh, kw]` kernel plus per-channel bias, zero padding on
/// all sides. Output is `[C_out, H', W']` with
/// `H' = (H + 2*padding - kh) / stride + 1`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (c_in, h, w) = chw("conv2d", input)?;
    let [c_out, k_in, kh, kw] = *kernel.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [C_out, C_in, kh, kw], got {:?}", kernel.shape()),
        ));
    };
    if k_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c_in} channels but kernel expects {k_in}"),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{c_out}], got {:?}", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::invalid(
            "conv2d",
            format!(
                "{kh}x{kw} kernel exceeds padded {}x{} input",
                h + 2 * padding,
                w + 2 * padding
            ),
        ));
    }
    let g = Geometry {
        c_in,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (w + 2 * padding - kw) / stride + 1,
    };
    let (k, p) = (g.rows(), g.cols());
    let cols = im2col(input.data(), &g);

    let mut out = vec![T::zero(); c_out * p];
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.iter_mut().for_each(|v| *v = bias.data()[o]);
    }
    T::gemm(
        c_out,
        k,
        p,
        T::one(),
        kernel.data(),
        (k as isize, 1),
        &cols,
        (p as isize, 1),
        T::one(),
        &mut out,
        (p as isize, 1),
    );

    let weights = kernel.clone();
    let keep_cols = kernel.requires_grad();
    let cols = if keep_cols { cols } else { Vec::new() };
    Ok(Tensor::from_op(
        vec![c_out, g.oh, g.ow],
        out,
        vec![input.clone(), kernel.clone(), bias.clone()],
        move |grad, mask| {
            let g_in = mask[0].then(|| {
                let mut dcols = vec![T::zero(); k * p];
                T::gemm(
                    k,
                    c_out,
                    p,
                    T::one(),
                    weights.data(),
                    (1, k as isize),
                    grad,
                    (p as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (p as isize, 1),
                );
                col2im(&dcols, &g)
            });
            let g_k = mask[1].then(|| {
                let mut dk = vec![T::zero(); c_out * k];
                T::gemm(
                    c_out,
                    p,
                    k,
                    T::one(),
                    grad,
                    (p as isize, 1),
                    &cols,
                    (1, p as isize),
                    T::zero(),
                    &mut dk,
                    (k as isize, 1),
                );
                dk
            });
            let g_b = mask[2].then(|| grad.chunks(p).map(|r| r.iter().copied().sum()).collect());
            vec![g_in, g_k, g_b]
        },
    ))
}
