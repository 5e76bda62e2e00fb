//! Moving-shapes videos. A bright square or disc moves along one axis over
//! a smooth value-noise background; a fading trail of its last positions
//! makes the motion axis visible in every single frame. The background is
//! defined in world coordinates and the camera pans across it, so an
//! integer pan is an exact image shift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FrameSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;

const TRAIL: [f64; 3] = [0.55, 0.35, 0.2];
const NOISE_CELL: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionAxis {
    Horizontal,
    Vertical,
}

/// Class id of a shape and motion axis pair.
pub fn class_of(shape: ShapeKind, axis: MotionAxis) -> usize {
    let s = match shape {
        ShapeKind::Square => 0,
        ShapeKind::Disc => 1,
    };
    let a = match axis {
        MotionAxis::Horizontal => 0,
        MotionAxis::Vertical => 1,
    };
    2 * s + a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub shape: ShapeKind,
    /// Half side length of the square, radius of the disc, in pixels.
    pub size: f64,
    /// Shape centre at `t = 0`, `[x, y]` in pixels.
    pub start: [f64; 2],
    /// Shape motion in pixels per frame, `[x, y]`.
    pub velocity: [f64; 2],
    /// Camera motion in pixels per frame, `[x, y]`.
    pub camera_pan: [f64; 2],
    /// Amplitude of uniform per-pixel noise, at most 0.5.
    pub noise_amplitude: f64,
    pub label: usize,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::Domain(format!("degenerate canvas {}x{}", self.height, self.width)));
        }
        if !(0.0..=0.5).contains(&self.noise_amplitude) {
            return Err(Error::Domain(format!("noise amplitude must lie in [0, 0.5], got {}", self.noise_amplitude)));
        }
        if !(self.size > 0.0) {
            return Err(Error::Domain("shape size must be positive".into()));
        }
        let finite = self.start.iter().chain(&self.velocity).chain(&self.camera_pan).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain("scene coordinates must be finite".into()));
        }
        if self.label >= NUM_CLASSES {
            return Err(Error::Domain(format!("label {} out of range", self.label)));
        }
        Ok(())
    }

    /// Shape centre at time `s`, clipped so the shape stays on the canvas.
    fn position(&self, s: f64) -> [f64; 2] {
        let clip = |v: f64, extent: usize| {
            let lo = self.size.min(extent as f64 / 2.0);
            v.clamp(lo, extent as f64 - lo)
        };
        [
            clip(self.start[0] + self.velocity[0] * s, self.width),
            clip(self.start[1] + self.velocity[1] * s, self.height),
        ]
    }

    fn coverage(&self, dx: f64, dy: f64) -> f64 {
        let d = match self.shape {
            ShapeKind::Square => dx.abs().max(dy.abs()),
            ShapeKind::Disc => (dx * dx + dy * dy).sqrt(),
        };
        (self.size + 0.5 - d).clamp(0.0, 1.0)
    }
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let mut z = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (i, j) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (u, v) = (smooth(x - fx), smooth(y - fy));
    let a = lattice(seed, i, j) * (1.0 - u) + lattice(seed, i + 1, j) * u;
    let b = lattice(seed, i, j + 1) * (1.0 - u) + lattice(seed, i + 1, j + 1) * u;
    a * (1.0 - v) + b * v
}

fn background(seed: u64, wx: f64, wy: f64) -> f64 {
    let coarse = value_noise(seed, wx / NOISE_CELL, wy / NOISE_CELL);
    let fine = value_noise(seed.rotate_left(17), wx / (NOISE_CELL / 2.0), wy / (NOISE_CELL / 2.0));
    0.15 + 0.3 * (0.7 * coarse + 0.3 * fine)
}

/// Renders `t` frames of `spec` at 30 fps. Deterministic in the spec.
pub fn generate_sequence(spec: &SyntheticSceneSpec, t: usize) -> Result<(FrameSequence, usize)> {
    spec.validate()?;
    if t == 0 {
        return Err(Error::Domain("a sequence needs at least one frame".into()));
    }
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg_seed: u64 = rng.gen();
    let mut frames = Vec::with_capacity(t);
    for step in 0..t {
        let s = step as f64;
        let cam = [spec.camera_pan[0] * s, spec.camera_pan[1] * s];
        let mut ghosts = vec![(spec.position(s), 1.0)];
        ghosts.extend(TRAIL.iter().enumerate().map(|(k, &a)| (spec.position(s - (k + 1) as f64), a)));
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let wx = x as f64 + 0.5 + cam[0];
                let wy = y as f64 + 0.5 + cam[1];
                let alpha = ghosts.iter().map(|(p, a)| a * spec.coverage(wx - p[0], wy - p[1])).fold(0.0, f64::max);
                let mut v = background(bg_seed, wx, wy) * (1.0 - alpha) + alpha;
                if spec.noise_amplitude > 0.0 {
                    v += spec.noise_amplitude * rng.gen_range(-1.0..1.0);
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        frames.push(Tensor::new(vec![h, w, 1], data)?);
    }
    Ok((FrameSequence::new(frames, 30.0)?, spec.label))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Static camera.
    FrozenCam,
    /// Camera pans at a constant random velocity.
    MovingCam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub per_class: usize,
    #[serde(default)]
    pub noise_amplitude: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub sequence: FrameSequence,
    pub label: usize,
    pub scene: SyntheticSceneSpec,
}

/// `per_class` sequences of every class, classes interleaved.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut scenes = Vec::with_capacity(spec.per_class * NUM_CLASSES);
    for _ in 0..spec.per_class {
        for class in 0..NUM_CLASSES {
            let shape = if class / 2 == 0 { ShapeKind::Square } else { ShapeKind::Disc };
            let axis = if class % 2 == 0 { MotionAxis::Horizontal } else { MotionAxis::Vertical };
            let size = rng.gen_range(0.07..0.11) * h.min(w);
            let speed = rng.gen_range(0.75..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let velocity = match axis {
                MotionAxis::Horizontal => [speed, 0.0],
                MotionAxis::Vertical => [0.0, speed],
            };
            let margin = 0.25;
            let start = [rng.gen_range(margin * w..(1.0 - margin) * w), rng.gen_range(margin * h..(1.0 - margin) * h)];
            let camera_pan = match spec.kind {
                DatasetKind::FrozenCam => [0.0, 0.0],
                DatasetKind::MovingCam => {
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    let mag = rng.gen_range(0.5..1.0);
                    [mag * angle.cos(), mag * angle.sin()]
                }
            };
            scenes.push(SyntheticSceneSpec {
                height: spec.height,
                width: spec.width,
                shape,
                size,
                start,
                velocity,
                camera_pan,
                noise_amplitude: spec.noise_amplitude,
                label: class_of(shape, axis),
                seed: rng.gen(),
            });
        }
    }
    use rayon::prelude::*;
    scenes
        .into_par_iter()
        .map(|scene| {
            let (sequence, label) = generate_sequence(&scene, spec.frames)?;
            Ok(LabeledSequence { sequence, label, scene })
        })
        .collect()
}
