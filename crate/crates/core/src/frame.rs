use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// An RGB image stored channel-first (`[3, H, W]`), values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("Frame::new", "frame must be at least 1x1"));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::shape(
                "Frame::new",
                format!("{} values for a 3x{height}x{width} frame", data.len()),
            ));
        }
        Ok(Frame { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Frame {
            height,
            width,
            data: vec![value; Self::CHANNELS * height * width],
        }
    }

    /// Builds a frame from `f(channel, row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Frame { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
            &[Self::CHANNELS, self.height, self.width],
        )
        .expect("frame dims are validated")
    }

    /// Converts a `[3, H, W]` tensor, rounding to `f32`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [3, h, w] => Frame::new(h, w, t.data().iter().map(|v| v.as_f64() as f32).collect()),
            ref s => Err(Error::shape(
                "Frame::from_tensor",
                format!("expected [3, H, W], got {s:?}"),
            )),
        }
    }

    /// Copy with every value clamped into `[0, 1]`.
    pub fn clamped(&self) -> Self {
        Frame {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Frame) -> f32 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
