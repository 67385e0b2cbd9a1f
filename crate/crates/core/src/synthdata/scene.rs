//! Scene description: background, an articulated five-joint figure and its
//! per-frame torso quadrilateral.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Knobs of the procedural world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Codec spatial patch; frame sizes must be divisible by it.
    pub patch_size: usize,
    pub garment_size: usize,
    pub pool_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Largest per-joint motion amplitude in pixels.
    pub amplitude: f32,
    /// Extra pixels around the upper-body box that forms the agnostic mask.
    pub mask_margin: f32,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_frames: 8,
            height: 32,
            width: 32,
            patch_size: 4,
            garment_size: 16,
            pool_size: 8,
            train_samples: 64,
            eval_samples: 16,
            amplitude: 3.0,
            mask_margin: 1.0,
            seed: 7,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 4 {
            return Err(Error::Config(format!("num_frames must be >= 4, got {}", self.num_frames)));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "frame must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if self.pool_size < 2 {
            return Err(Error::Config("garment pool needs at least 2 garments".into()));
        }
        if self.garment_size < 2 {
            return Err(Error::Config("garment_size must be >= 2".into()));
        }
        if !(self.amplitude >= 0.0) {
            return Err(Error::Config("amplitude must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Hip,
    Shoulder,
    Head,
    LeftHand,
    RightHand,
}

impl JointKind {
    pub const ALL: [JointKind; 5] = [
        JointKind::Hip,
        JointKind::Shoulder,
        JointKind::Head,
        JointKind::LeftHand,
        JointKind::RightHand,
    ];
}

/// Sinusoidal joint trajectory: `x = bx + A·sin(ωf + φ)`, `y = by + A/2·cos(ωf + φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub base: [f32; 2],
    pub amplitude: f32,
    pub frequency: f32,
    pub phase: f32,
}

impl Joint {
    pub fn at(&self, frame: usize) -> [f32; 2] {
        let a = self.frequency * frame as f32 + self.phase;
        [
            self.base[0] + self.amplitude * a.sin(),
            self.base[1] + 0.5 * self.amplitude * a.cos(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    Gradient { from: [f32; 3], to: [f32; 3], vertical: bool },
    Checker { a: [f32; 3], b: [f32; 3], cell: u32 },
    Solid { color: [f32; 3] },
}

impl Background {
    pub fn color(&self, x: usize, y: usize, height: usize, width: usize) -> [f32; 3] {
        match self {
            Background::Solid { color } => *color,
            Background::Checker { a, b, cell } => {
                let c = (*cell).max(1) as usize;
                if (x / c + y / c) % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
            Background::Gradient { from, to, vertical } => {
                let s = if *vertical {
                    y as f32 / (height - 1).max(1) as f32
                } else {
                    x as f32 / (width - 1).max(1) as f32
                };
                [0, 1, 2].map(|c| from[c] + (to[c] - from[c]) * s)
            }
        }
    }
}

/// Corners in order shoulder-left, shoulder-right, hip-right, hip-left.
pub type Quad = [[f32; 2]; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub background: Background,
    pub skin: [f32; 3],
    /// Indexed by [`JointKind`] order.
    pub joints: [Joint; 5],
    pub shoulder_width: f32,
    pub hip_width: f32,
    pub head_radius: f32,
    pub limb_radius: f32,
    pub torso_quads: Vec<Quad>,
}

fn cross(o: [f32; 2], a: [f32; 2], b: [f32; 2]) -> f32 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// True if every consecutive corner turn has the same strict orientation.
pub fn quad_is_simple(q: &Quad) -> bool {
    let turns: Vec<f32> = (0..4).map(|i| cross(q[i], q[(i + 1) % 4], q[(i + 2) % 4])).collect();
    turns.iter().all(|&t| t > 0.0) || turns.iter().all(|&t| t < 0.0)
}

/// Point-in-convex-quad test on a pixel centre.
pub fn inside_quad(q: &Quad, p: [f32; 2]) -> bool {
    let mut pos = false;
    let mut neg = false;
    for i in 0..4 {
        let c = cross(q[i], q[(i + 1) % 4], p);
        pos |= c > 0.0;
        neg |= c < 0.0;
    }
    !(pos && neg)
}

/// Inverse bilinear map of `p` into the unit square spanned by the quad.
pub fn quad_uv(q: &Quad, p: [f32; 2]) -> [f32; 2] {
    let f = |v: [f32; 2]| [v[0] as f64, v[1] as f64];
    let (a, b, c, d) = (f(q[0]), f(q[1]), f(q[2]), f(q[3]));
    let p = f(p);
    let e = [b[0] - a[0], b[1] - a[1]];
    let ff = [d[0] - a[0], d[1] - a[1]];
    let g = [a[0] - b[0] + c[0] - d[0], a[1] - b[1] + c[1] - d[1]];
    let h = [p[0] - a[0], p[1] - a[1]];
    let cr = |u: [f64; 2], v: [f64; 2]| u[0] * v[1] - u[1] * v[0];
    let k2 = cr(g, ff);
    let k1 = cr(e, ff) + cr(h, g);
    let k0 = cr(h, e);
    let v = if k2.abs() < 1e-9 {
        -k0 / k1
    } else {
        let disc = (k1 * k1 - 4.0 * k0 * k2).max(0.0).sqrt();
        let v1 = (-k1 - disc) / (2.0 * k2);
        let v2 = (-k1 + disc) / (2.0 * k2);
        if (-1e-6..=1.0 + 1e-6).contains(&v1) {
            v1
        } else {
            v2
        }
    };
    let denom_x = e[0] + g[0] * v;
    let denom_y = e[1] + g[1] * v;
    let u = if denom_x.abs() > denom_y.abs() {
        (h[0] - ff[0] * v) / denom_x
    } else {
        (h[1] - ff[1] * v) / denom_y
    };
    [u.clamp(0.0, 1.0) as f32, v.clamp(0.0, 1.0) as f32]
}

impl SceneSpec {
    pub fn keypoints(&self, frame: usize) -> [[f32; 2]; 5] {
        self.joints.map(|j| j.at(frame))
    }

    pub fn joint(&self, frame: usize, kind: JointKind) -> [f32; 2] {
        self.joints[kind as usize].at(frame)
    }

    fn compute_quad(&self, frame: usize) -> Quad {
        let hip = self.joint(frame, JointKind::Hip);
        let sh = self.joint(frame, JointKind::Shoulder);
        let dir = [sh[0] - hip[0], sh[1] - hip[1]];
        let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt().max(1e-6);
        // image-space normal pointing to the figure's left (viewer's right when upright)
        let n = [-dir[1] / len, dir[0] / len];
        let (hs, hh) = (self.shoulder_width / 2.0, self.hip_width / 2.0);
        [
            [sh[0] - n[0] * hs, sh[1] - n[1] * hs],
            [sh[0] + n[0] * hs, sh[1] + n[1] * hs],
            [hip[0] + n[0] * hh, hip[1] + n[1] * hh],
            [hip[0] - n[0] * hh, hip[1] - n[1] * hh],
        ]
    }

    /// Axis-aligned upper-body box (torso corners, shoulder and hands) grown by `margin`.
    pub fn upper_body_box(&self, frame: usize, margin: f32) -> [f32; 4] {
        let mut pts: Vec<[f32; 2]> = self.torso_quads[frame].to_vec();
        pts.push(self.joint(frame, JointKind::LeftHand));
        pts.push(self.joint(frame, JointKind::RightHand));
        let grow = margin + self.limb_radius;
        let x0 = pts.iter().map(|p| p[0]).fold(f32::INFINITY, f32::min) - grow;
        let x1 = pts.iter().map(|p| p[0]).fold(f32::NEG_INFINITY, f32::max) + grow;
        let y0 = pts.iter().map(|p| p[1]).fold(f32::INFINITY, f32::min) - grow;
        let y1 = pts.iter().map(|p| p[1]).fold(f32::NEG_INFINITY, f32::max) + grow;
        [x0, y0, x1, y1]
    }
}

/// Builds a scene from the generation config and a per-scene seed.
pub fn make_scene(config: &GenerationConfig, seed: u64) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.height as f32, config.width as f32);
    let amp = config.amplitude;

    let color = |lo: f32, hi: f32, rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.random_range(lo..hi));
    let background = match rng.random_range(0..10u32) {
        0..=3 => Background::Solid { color: color(0.55, 0.95, &mut rng) },
        4..=7 => Background::Gradient {
            from: color(0.5, 0.95, &mut rng),
            to: color(0.3, 0.7, &mut rng),
            vertical: rng.random_bool(0.5),
        },
        _ => {
            let a = color(0.55, 0.85, &mut rng);
            let b = a.map(|c| c - 0.12);
            Background::Checker { a, b, cell: (config.width / 4) as u32 }
        }
    };
    let skin = [
        rng.random_range(0.6..0.9),
        rng.random_range(0.4..0.65),
        rng.random_range(0.3..0.5),
    ];

    let cx = w * 0.5 + rng.random_range(-0.06..0.06) * w;
    let layout: [(f32, f32, f32); 5] = [
        (0.0, 0.80, 0.35),
        (0.0, 0.40, 0.5),
        (0.0, 0.17, 0.5),
        (-0.30, 0.66, 1.0),
        (0.30, 0.66, 1.0),
    ];
    let mut joints = [Joint { base: [0.0; 2], amplitude: 0.0, frequency: 0.0, phase: 0.0 }; 5];
    for (j, &(fx, fy, amp_scale)) in layout.iter().enumerate() {
        let jitter = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        joints[j] = Joint {
            base: [cx + fx * w + jitter[0], fy * h + jitter[1]],
            amplitude: amp * amp_scale * rng.random_range(0.7..1.0),
            frequency: rng.random_range(0.35..0.8),
            phase: rng.random_range(0.0..std::f32::consts::TAU),
        };
    }

    for (kind, j) in JointKind::ALL.iter().zip(&joints) {
        let reach_x = (j.base[0] - j.amplitude, j.base[0] + j.amplitude);
        let reach_y = (j.base[1] - 0.5 * j.amplitude, j.base[1] + 0.5 * j.amplitude);
        if reach_x.0 < 0.5 || reach_x.1 > w - 0.5 || reach_y.0 < 0.5 || reach_y.1 > h - 0.5 {
            return Err(Error::Config(format!(
                "amplitude {amp} lets joint {kind:?} exit the {}x{} frame",
                config.height, config.width
            )));
        }
    }

    let mut scene = SceneSpec {
        seed,
        num_frames: config.num_frames,
        height: config.height,
        width: config.width,
        background,
        skin,
        joints,
        shoulder_width: 0.40 * w,
        hip_width: 0.32 * w,
        head_radius: 0.1 * h,
        limb_radius: 0.05 * w,
        torso_quads: Vec::new(),
    };
    scene.torso_quads = (0..config.num_frames).map(|f| scene.compute_quad(f)).collect();
    if let Some(f) = scene.torso_quads.iter().position(|q| !quad_is_simple(q)) {
        return Err(Error::Config(format!("degenerate torso at frame {f}")));
    }
    Ok(scene)
}
