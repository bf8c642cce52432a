use super::{chw, Real, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let gx = g
                .iter()
                .zip(x.data())
                .zip(&y)
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            |g, mask| vec![mask[0].then(|| g.to_vec()), mask[1].then(|| g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            |g, mask| {
                vec![
                    mask[0].then(|| g.to_vec()),
                    mask[1].then(|| g.iter().map(|&v| -v).collect()),
                ]
            },
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            move |g, mask| {
                let ga = mask[0].then(|| g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect());
                let gb = mask[1].then(|| g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect());
                vec![ga, gb]
            },
        ))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("div", self, other)?;
        let out: Vec<T> = self.data().iter().zip(other.data()).map(|(&a, &b)| a / b).collect();
        let b = other.clone();
        let q = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            move |g, mask| {
                let ga = mask[0].then(|| g.iter().zip(b.data()).map(|(&g, &b)| g / b).collect());
                let gb = mask[1].then(|| {
                    g.iter()
                        .zip(b.data())
                        .zip(&q)
                        .map(|((&g, &b), &q)| -g * q / b)
                        .collect()
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor<T> {
        let f = T::of(factor);
        let out = self.data().iter().map(|&x| x * f).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().map(|&g| g * f).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        let out = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&self) -> Tensor<T> {
        let out = self.data().iter().map(|&x| T::one() - x).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |g, _| {
            vec![Some(g.iter().map(|&g| -g).collect())]
        })
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    /// Subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::one() / T::of(n as f64);
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![1], vec![s * inv], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no tensors given"))?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        for p in parts {
            if p.shape().len() != first.shape().len() || &p.shape()[1..] != tail {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", p.shape(), first.shape()),
                ));
            }
            lead += p.shape()[0];
        }
        let mut shape = first.shape().to_vec();
        shape[0] = lead;
        let mut out = Vec::with_capacity(shape.iter().product());
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        for p in parts {
            out.extend_from_slice(p.data());
        }
        Ok(Tensor::from_op(
            shape,
            out,
            parts.iter().map(|&p| p.clone()).collect(),
            move |g, mask| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(mask)
                    .map(|(&n, &m)| {
                        let slice = &g[offset..offset + n];
                        offset += n;
                        m.then(|| slice.to_vec())
                    })
                    .collect()
            },
        ))
    }

    /// Channels `[start, end)` of a `[C, H, W]` tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let (c, h, w) = chw("slice_channels", self)?;
        if start >= end || end > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {start}..{end} outside {c} channels"),
            ));
        }
        let plane = h * w;
        let out = self.data()[start * plane..end * plane].to_vec();
        let total = self.numel();
        Ok(Tensor::from_op(
            vec![end - start, h, w],
            out,
            vec![self.clone()],
            move |g, _| {
                let mut gx = vec![T::zero(); total];
                gx[start * plane..end * plane].copy_from_slice(g);
                vec![Some(gx)]
            },
        ))
    }

    /// Repeats a single-channel `[1, H, W]` map across `n` channels.
    pub fn expand_channels(&self, n: usize) -> Result<Tensor<T>> {
        let (c, h, w) = chw("expand_channels", self)?;
        if c != 1 {
            return Err(Error::shape("expand_channels", format!("expected 1 channel, got {c}")));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * plane);
        for _ in 0..n {
            out.extend_from_slice(self.data());
        }
        Ok(Tensor::from_op(vec![n, h, w], out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); plane];
            for ch in g.chunks(plane) {
                gx.iter_mut().zip(ch).for_each(|(a, &b)| *a += b);
            }
            vec![Some(gx)]
        }))
    }

    /// Horizontal forward difference `x[.., j+1] - x[.., j]`, shape `[C, H, W-1]`.
    pub fn diff_x(&self) -> Result<Tensor<T>> {
        let (c, h, w) = chw("diff_x", self)?;
        if w < 2 {
            return Err(Error::invalid("diff_x", "width must be at least 2"));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(c * h * (w - 1));
        for row in src.chunks(w) {
            out.extend(row.windows(2).map(|p| p[1] - p[0]));
        }
        Ok(Tensor::from_op(
            vec![c, h, w - 1],
            out,
            vec![self.clone()],
            move |g, _| {
                let mut gx = vec![T::zero(); c * h * w];
                for (grow, xrow) in g.chunks(w - 1).zip(gx.chunks_mut(w)) {
                    for (j, &v) in grow.iter().enumerate() {
                        xrow[j + 1] += v;
                        xrow[j] -= v;
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Vertical forward difference `x[.., i+1, :] - x[.., i, :]`, shape `[C, H-1, W]`.
    pub fn diff_y(&self) -> Result<Tensor<T>> {
        let (c, h, w) = chw("diff_y", self)?;
        if h < 2 {
            return Err(Error::invalid("diff_y", "height must be at least 2"));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(c * (h - 1) * w);
        for plane in src.chunks(h * w) {
            for i in 0..h - 1 {
                let (a, b) = (&plane[i * w..(i + 1) * w], &plane[(i + 1) * w..(i + 2) * w]);
                out.extend(a.iter().zip(b).map(|(&a, &b)| b - a));
            }
        }
        Ok(Tensor::from_op(
            vec![c, h - 1, w],
            out,
            vec![self.clone()],
            move |g, _| {
                let mut gx = vec![T::zero(); c * h * w];
                for (gp, xp) in g.chunks((h - 1) * w).zip(gx.chunks_mut(h * w)) {
                    for i in 0..h - 1 {
                        for j in 0..w {
                            let v = gp[i * w + j];
                            xp[(i + 1) * w + j] += v;
                            xp[i * w + j] -= v;
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Depthwise separable filter with "valid" extent: the same 1-D `taps`
    /// are applied along rows then columns of every channel. Output is
    /// `[C, H - n + 1, W - n + 1]`.
    pub fn separable_filter_valid(&self, taps: &[f64]) -> Result<Tensor<T>> {
        let (c, h, w) = chw("separable_filter_valid", self)?;
        let n = taps.len();
        if n == 0 || n > h || n > w {
            return Err(Error::invalid(
                "separable_filter_valid",
                format!("{n}-tap filter does not fit a {h}x{w} image"),
            ));
        }
        let taps: Vec<T> = taps.iter().map(|&t| T::of(t)).collect();
        let (oh, ow) = (h - n + 1, w - n + 1);
        let src = self.data();
        let mut out = vec![T::zero(); c * oh * ow];
        let mut tmp = vec![T::zero(); h * ow];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for i in 0..h {
                let row = &plane[i * w..(i + 1) * w];
                for j in 0..ow {
                    let mut acc = T::zero();
                    for (t, &k) in taps.iter().enumerate() {
                        acc += k * row[j + t];
                    }
                    tmp[i * ow + j] = acc;
                }
            }
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for (t, &k) in taps.iter().enumerate() {
                for i in 0..oh {
                    let srow = &tmp[(i + t) * ow..(i + t + 1) * ow];
                    let drow = &mut dst[i * ow..(i + 1) * ow];
                    drow.iter_mut().zip(srow).for_each(|(d, &s)| *d += k * s);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, oh, ow],
            out,
            vec![self.clone()],
            move |g, _| {
                let mut gx = vec![T::zero(); c * h * w];
                let mut gtmp = vec![T::zero(); h * ow];
                for ch in 0..c {
                    gtmp.iter_mut().for_each(|v| *v = T::zero());
                    let gp = &g[ch * oh * ow..(ch + 1) * oh * ow];
                    for (t, &k) in taps.iter().enumerate() {
                        for i in 0..oh {
                            let grow = &gp[i * ow..(i + 1) * ow];
                            let trow = &mut gtmp[(i + t) * ow..(i + t + 1) * ow];
                            trow.iter_mut().zip(grow).for_each(|(d, &s)| *d += k * s);
                        }
                    }
                    let xp = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for i in 0..h {
                        let trow = &gtmp[i * ow..(i + 1) * ow];
                        let xrow = &mut xp[i * w..(i + 1) * w];
                        for (j, &v) in trow.iter().enumerate() {
                            for (t, &k) in taps.iter().enumerate() {
                                xrow[j + t] += k * v;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }
}
