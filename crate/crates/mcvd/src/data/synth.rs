//! Stochastic bouncing-shape video generator. Shapes follow constant-velocity
//! motion with reflective walls; on wall contact the outgoing velocity is
//! resampled with a configurable probability, which is the stochastic element.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{McvdError, Result};

use super::Video;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Cross,
}

impl std::str::FromStr for ShapeKind {
    type Err = McvdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(ShapeKind::Square),
            "circle" => Ok(ShapeKind::Circle),
            "cross" => Ok(ShapeKind::Cross),
            other => Err(McvdError::config(format!("unknown shape kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Cross => "cross",
        };
        write!(f, "{s}")
    }
}

/// Parameters of one synthetic video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_shapes: usize,
    pub shape_kinds: Vec<ShapeKind>,
    pub shape_size: usize,
    /// Speed magnitude range in pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Probability of resampling the outgoing velocity at wall contact.
    pub bounce_prob: f64,
    pub video_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 16,
            width: 16,
            channels: 1,
            num_shapes: 1,
            shape_kinds: vec![ShapeKind::Square, ShapeKind::Circle, ShapeKind::Cross],
            shape_size: 5,
            min_speed: 1.0,
            max_speed: 2.0,
            bounce_prob: 0.2,
            video_len: 20,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.shape_size > self.height || self.shape_size > self.width {
            return Err(McvdError::config(format!(
                "shape size {} larger than frame {}x{}",
                self.shape_size, self.height, self.width
            )));
        }
        if self.shape_size == 0 || self.num_shapes == 0 || self.video_len == 0 {
            return Err(McvdError::config(
                "shape size, shape count and video length must be positive",
            ));
        }
        if self.shape_kinds.is_empty() {
            return Err(McvdError::config("at least one shape kind required"));
        }
        if !(self.min_speed >= 0.0 && self.min_speed <= self.max_speed) {
            return Err(McvdError::config("need 0 <= min_speed <= max_speed"));
        }
        if !(0.0..=1.0).contains(&self.bounce_prob) {
            return Err(McvdError::Range {
                name: "bounce_prob",
                value: self.bounce_prob,
                expected: "0 <= p <= 1",
            });
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(McvdError::config("channels must be 1 or 3"));
        }
        Ok(())
    }
}

/// Reflects a 1-D position into [0, limit], flipping the velocity component
/// on each wall contact. Returns whether a wall was touched.
fn reflect_axis(pos: &mut f64, vel: &mut f64, limit: f64) -> bool {
    let mut bounced = false;
    if limit <= 0.0 {
        *pos = 0.0;
        *vel = 0.0;
        return false;
    }
    while *pos < 0.0 || *pos > limit {
        if *pos < 0.0 {
            *pos = -*pos;
        } else {
            *pos = 2.0 * limit - *pos;
        }
        *vel = -*vel;
        bounced = true;
    }
    bounced
}

/// Pure reflective trajectory of a point on [0, limit_x] x [0, limit_y]:
/// positions after each of `steps` unit-time advances. No stochastic bounce.
pub fn reflect_trajectory(
    start: (f64, f64),
    vel: (f64, f64),
    limits: (f64, f64),
    steps: usize,
) -> Vec<(f64, f64)> {
    let (mut x, mut y) = start;
    let (mut vx, mut vy) = vel;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        x += vx;
        y += vy;
        reflect_axis(&mut x, &mut vx, limits.0);
        reflect_axis(&mut y, &mut vy, limits.1);
        out.push((x, y));
    }
    out
}

struct Sprite {
    kind: ShapeKind,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    color: [f32; 3],
}

fn sample_velocity<R: Rng>(rng: &mut R, spec: &SyntheticSpec) -> (f64, f64) {
    let speed = rng.random::<f64>() * (spec.max_speed - spec.min_speed) + spec.min_speed;
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    (speed * angle.cos(), speed * angle.sin())
}

/// Generates one video. Deterministic given the spec (including its seed).
pub fn gen_moving_shapes(spec: &SyntheticSpec) -> Result<Video> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let limit_x = (spec.width - spec.shape_size) as f64;
    let limit_y = (spec.height - spec.shape_size) as f64;

    let mut sprites = Vec::with_capacity(spec.num_shapes);
    for _ in 0..spec.num_shapes {
        let kind = spec.shape_kinds[rng.random_range(0..spec.shape_kinds.len())];
        let x = rng.random::<f64>() * limit_x;
        let y = rng.random::<f64>() * limit_y;
        let (vx, vy) = sample_velocity(&mut rng, spec);
        let color = if spec.channels == 1 {
            let v = 0.6 + 0.4 * rng.random::<f32>();
            [v, v, v]
        } else {
            [
                0.4 + 0.6 * rng.random::<f32>(),
                0.4 + 0.6 * rng.random::<f32>(),
                0.4 + 0.6 * rng.random::<f32>(),
            ]
        };
        sprites.push(Sprite {
            kind,
            x,
            y,
            vx,
            vy,
            color,
        });
    }

    let mut video = Array4::<f32>::zeros((spec.video_len, spec.height, spec.width, spec.channels));
    for f in 0..spec.video_len {
        for sp in &sprites {
            stamp(&mut video, f, sp, spec);
        }
        // Advance after stamping so frame 0 shows the initial positions.
        for sp in &mut sprites {
            sp.x += sp.vx;
            sp.y += sp.vy;
            let bx = reflect_axis(&mut sp.x, &mut sp.vx, limit_x);
            let by = reflect_axis(&mut sp.y, &mut sp.vy, limit_y);
            if (bx || by) && rng.random::<f64>() < spec.bounce_prob {
                let (nvx, nvy) = sample_velocity(&mut rng, spec);
                // Keep the outgoing direction pointing away from the wall.
                sp.vx = if bx { nvx.abs() * sp.vx.signum() } else { nvx };
                sp.vy = if by { nvy.abs() * sp.vy.signum() } else { nvy };
            }
        }
    }
    Ok(video)
}

fn stamp(video: &mut Video, frame: usize, sp: &Sprite, spec: &SyntheticSpec) {
    let s = spec.shape_size;
    let ox = sp.x.round() as usize;
    let oy = sp.y.round() as usize;
    let half = (s as f64 - 1.0) / 2.0;
    for dy in 0..s {
        for dx in 0..s {
            let inside = match sp.kind {
                ShapeKind::Square => true,
                ShapeKind::Circle => {
                    let rx = dx as f64 - half;
                    let ry = dy as f64 - half;
                    rx * rx + ry * ry <= half * half + 0.5
                }
                ShapeKind::Cross => {
                    let mid = s / 2;
                    dx == mid || dy == mid
                }
            };
            if !inside {
                continue;
            }
            let (py, px) = (oy + dy, ox + dx);
            for c in 0..spec.channels {
                let v = &mut video[(frame, py, px, c)];
                *v = v.max(sp.color[c.min(2)]);
            }
        }
    }
}
