//! Procedural video scenes with known motion.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Shapes moving at constant velocity over a still background.
    TranslatingShapes,
    /// The whole textured image rotating about its center.
    RotatingTexture,
    /// Textured background and shapes moving together, as under a camera pan.
    CameraPan,
    /// Background and shapes with no motion.
    Static,
}

fn default_heading() -> [f64; 2] {
    [0.0, 360.0]
}

/// A synthetic scene. Speeds are in pixels per frame; headings in degrees,
/// measured from the +x axis toward +y (image down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub num_objects: usize,
    /// Each object's speed is drawn uniformly from `[min, max]`. For
    /// `rotating_texture` this is the speed at the inscribed circle's edge.
    pub velocity_range: [f64; 2],
    /// Seed of the background texture.
    pub background: u64,
    /// `[H, W]`.
    pub size: [usize; 2],
    pub length: usize,
    pub seed: u64,
    /// Motion directions are drawn uniformly from `[lo, hi]`.
    #[serde(default = "default_heading")]
    pub heading_deg: [f64; 2],
}

impl SceneSpec {
    pub fn validate(&self, max_disp: f64) -> Result<()> {
        let [lo, hi] = self.velocity_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(Error::Config(format!(
                "scene velocity_range {:?} must satisfy 0 <= min <= max",
                self.velocity_range
            )));
        }
        if hi > max_disp {
            return Err(Error::Config(format!(
                "scene velocity_range max {hi} exceeds architecture.max_disp {max_disp}"
            )));
        }
        if self.size[0] < 4 || self.size[1] < 4 {
            return Err(Error::Config(format!(
                "scene size {:?} must be at least 4x4",
                self.size
            )));
        }
        if self.length == 0 {
            return Err(Error::Config("scene length must be at least 1".into()));
        }
        let [a, b] = self.heading_deg;
        if !(a.is_finite() && b.is_finite() && a <= b) {
            return Err(Error::Config(format!(
                "scene heading_deg {:?} must satisfy lo <= hi",
                self.heading_deg
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Grating {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    gratings: Vec<Grating>,
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [0.0; 3].map(|_: f64| rng.gen_range(0.35..0.65));
        let gratings = (0..4)
            .map(|_| {
                let period = rng.gen_range(7.0..28.0);
                let dir = rng.gen_range(0.0..TAU);
                Grating {
                    kx: TAU / period * dir.cos(),
                    ky: TAU / period * dir.sin(),
                    phase: rng.gen_range(0.0..TAU),
                    amp: [0.0; 3].map(|_: f64| rng.gen_range(0.02..0.08)),
                }
            })
            .collect();
        Texture { base, gratings }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for g in &self.gratings {
            let s = (g.kx * x + g.ky * y + g.phase).sin();
            for (ch, a) in c.iter_mut().zip(g.amp) {
                *ch += a * s;
            }
        }
        c
    }
}

#[derive(Clone, Debug)]
struct Shape {
    disc: bool,
    half: f64,
    x0: f64,
    y0: f64,
    vx: f64,
    vy: f64,
    color: [f64; 3],
    stripe: f64,
}

impl Shape {
    /// Color at offset `(dx, dy)` from the center, if covered.
    fn sample(&self, dx: f64, dy: f64) -> Option<[f64; 3]> {
        let inside = if self.disc {
            dx * dx + dy * dy <= self.half * self.half
        } else {
            dx.abs() <= self.half && dy.abs() <= self.half
        };
        inside.then(|| {
            let s = 0.08 * ((dx + dy) * self.stripe).sin();
            self.color.map(|c| c + s)
        })
    }
}

fn draw_velocity(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> (f64, f64) {
    let [lo, hi] = spec.velocity_range;
    let speed = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let [a, b] = spec.heading_deg;
    let heading = if b > a { rng.gen_range(a..=b) } else { a }.to_radians();
    (speed * heading.cos(), speed * heading.sin())
}

fn wrap(d: f64, n: f64) -> f64 {
    (d + n / 2.0).rem_euclid(n) - n / 2.0
}

const SUPERSAMPLE: usize = 3;

/// Renders every frame of `spec`. Output values are in `[0, 1]`.
pub fn gen_scene(spec: &SceneSpec) -> Result<Vec<Frame>> {
    spec.validate(f64::INFINITY)?;
    let [h, w] = spec.size;
    let (hf, wf) = (h as f64, w as f64);
    let texture = Texture::new(spec.background);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pan = draw_velocity(&mut rng, spec);
    let spin_dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let shapes: Vec<Shape> = (0..spec.num_objects)
        .map(|_| {
            let (vx, vy) = draw_velocity(&mut rng, spec);
            Shape {
                disc: rng.gen_bool(0.5),
                half: rng.gen_range(0.08..0.16) * hf.min(wf),
                x0: rng.gen_range(0.0..wf),
                y0: rng.gen_range(0.0..hf),
                vx,
                vy,
                color: [0.0; 3].map(|_: f64| rng.gen_range(0.1..0.9)),
                stripe: rng.gen_range(0.3..0.9),
            }
        })
        .collect();
    let radius = hf.min(wf) / 2.0;
    let omega = spin_dir * spec.velocity_range[0].max(spec.velocity_range[1]) / radius;

    let offsets: Vec<f64> = (0..SUPERSAMPLE)
        .map(|i| (i as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5)
        .collect();
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut frames = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let tt = if spec.kind == SceneKind::Static { 0.0 } else { t as f64 };
        // the content at frame t, position p, is the t = 0 content at p - shift
        let (sx, sy) = match spec.kind {
            SceneKind::CameraPan => (pan.0 * tt, pan.1 * tt),
            _ => (0.0, 0.0),
        };
        let (cos, sin) = ((omega * tt).cos(), (omega * tt).sin());
        let mut data = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for &oy in &offsets {
                    for &ox in &offsets {
                        let (px, py) = (x as f64 + 0.5 + ox, y as f64 + 0.5 + oy);
                        let c = if spec.kind == SceneKind::RotatingTexture {
                            let (dx, dy) = (px - wf / 2.0, py - hf / 2.0);
                            texture.at(cos * dx + sin * dy, -sin * dx + cos * dy)
                        } else {
                            let (qx, qy) = (px - sx, py - sy);
                            let moving = spec.kind == SceneKind::TranslatingShapes;
                            shapes
                                .iter()
                                .rev()
                                .find_map(|s| {
                                    let (cx, cy) = if moving {
                                        (s.x0 + s.vx * tt, s.y0 + s.vy * tt)
                                    } else {
                                        (s.x0, s.y0)
                                    };
                                    let (dx, dy) = if spec.kind == SceneKind::CameraPan {
                                        (qx - cx, qy - cy)
                                    } else {
                                        (wrap(qx - cx, wf), wrap(qy - cy, hf))
                                    };
                                    s.sample(dx, dy)
                                })
                                .unwrap_or_else(|| texture.at(qx, qy))
                        };
                        for (a, v) in acc.iter_mut().zip(c) {
                            *a += v;
                        }
                    }
                }
                for (ch, a) in acc.iter().enumerate() {
                    data[(ch * h + y) * w + x] = (a * norm).clamp(0.0, 1.0) as f32;
                }
            }
        }
        frames.push(Frame::new(h, w, data)?);
    }
    Ok(frames)
}
