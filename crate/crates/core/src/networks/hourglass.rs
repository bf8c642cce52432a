use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, resize_bilinear, Leaves, ParamSet, Real, Tensor};

/// How an output head's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadInit {
    /// Fan-in uniform scaled down by the given gain.
    Scaled(f64),
    /// All zeros, so the head emits exactly its (zero) bias.
    Zero,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub name: &'static str,
    pub channels: usize,
    pub init: HeadInit,
}

/// Encoder/decoder with skip connections.
///
/// Level 0 is a stride-1 3x3 conv at full resolution; levels `1..=depth` each
/// halve the resolution with a stride-2 3x3 conv. The decoder bilinearly
/// upsamples back to each level, concatenates that level's encoder features
/// and applies a 3x3 conv. Every hidden conv is followed by ReLU. Heads are
/// 3x3 convs on the full-resolution decoder output with no activation.
#[derive(Clone, Debug)]
pub struct Hourglass {
    pub in_channels: usize,
    pub base: usize,
    pub depth: usize,
    pub heads: Vec<Head>,
}

impl Hourglass {
    pub fn channels(&self, level: usize) -> usize {
        self.base << level.min(self.depth.saturating_sub(1))
    }

    /// Names and shapes of every block, in parameter-file order.
    pub fn blocks(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize| {
            out.push((format!("{name}.weight"), vec![c_out, c_in, 3, 3]));
            out.push((format!("{name}.bias"), vec![c_out]));
        };
        conv("enc0".into(), self.channels(0), self.in_channels);
        for d in 1..=self.depth {
            conv(format!("enc{d}"), self.channels(d), self.channels(d - 1));
        }
        for d in (0..self.depth).rev() {
            conv(
                format!("dec{d}"),
                self.channels(d),
                self.channels(d + 1) + self.channels(d),
            );
        }
        for h in &self.heads {
            conv(format!("head_{}", h.name), h.channels, self.channels(0));
        }
        out
    }

    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        let mut set = ParamSet::new();
        for (name, shape) in self.blocks() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![T::zero(); n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = match self.heads.iter().find(|h| name == format!("head_{}.weight", h.name)) {
                    Some(Head {
                        init: HeadInit::Zero, ..
                    }) => 0.0,
                    Some(Head {
                        init: HeadInit::Scaled(g),
                        ..
                    }) => *g,
                    None => 1.0,
                };
                let bound = gain * (6.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        if bound > 0.0 {
                            T::of(rng.gen_range(-bound..bound))
                        } else {
                            T::zero()
                        }
                    })
                    .collect()
            };
            set.insert(name, &shape, data).expect("fresh names");
        }
        set
    }

    /// Minimum spatial divisor the input must satisfy.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, op: &'static str, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if !h.is_multiple_of(d) || !w.is_multiple_of(d) || h == 0 || w == 0 {
            let pad = |n: usize| (d - n % d) % d;
            return Err(Error::invalid(
                op,
                format!(
                    "{h}x{w} input is not divisible by {d} (depth {}); pad by {} rows and {} columns",
                    self.depth,
                    pad(h),
                    pad(w)
                ),
            ));
        }
        Ok(())
    }

    /// Runs the network; returns raw head outputs in declaration order.
    pub fn forward<T: Real>(&self, input: &Tensor<T>, leaves: &Leaves<T>, prefix: &str) -> Result<Vec<Tensor<T>>> {
        let [c, h, w] = *input.shape() else {
            return Err(Error::shape(
                "hourglass",
                format!("expected [C, H, W], got {:?}", input.shape()),
            ));
        };
        if c != self.in_channels {
            return Err(Error::shape(
                "hourglass",
                format!("{prefix}: expected {} input channels, got {c}", self.in_channels),
            ));
        }
        self.check_input("hourglass", h, w)?;
        let conv = |x: &Tensor<T>, name: &str, stride: usize| -> Result<Tensor<T>> {
            conv2d(
                x,
                leaves.get(&format!("{prefix}{name}.weight"))?,
                leaves.get(&format!("{prefix}{name}.bias"))?,
                stride,
                1,
            )
        };
        let mut skips = vec![conv(input, "enc0", 1)?.relu()];
        for d in 1..=self.depth {
            let x = conv(skips.last().unwrap(), &format!("enc{d}"), 2)?.relu();
            skips.push(x);
        }
        let mut x = skips.pop().unwrap();
        for d in (0..self.depth).rev() {
            let skip = &skips[d];
            let up = resize_bilinear(&x, skip.shape()[1], skip.shape()[2])?;
            let cat = Tensor::concat(&[&up, skip])?;
            x = conv(&cat, &format!("dec{d}"), 1)?.relu();
        }
        self.heads
            .iter()
            .map(|head| conv(&x, &format!("head_{}", head.name), 1))
            .collect()
    }
}
