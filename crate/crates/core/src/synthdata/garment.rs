//! Procedural garment textures.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Stripes,
    Checks,
    Dots,
    Solid,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Stripes, Pattern::Checks, Pattern::Dots, Pattern::Solid];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentSpec {
    pub garment_id: u32,
    pub pattern: Pattern,
    /// Pattern period in garment pixels.
    pub period: u32,
    pub primary: [f32; 3],
    pub secondary: [f32; 3],
    pub height: usize,
    pub width: usize,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl GarmentSpec {
    /// Derives a garment deterministically from its id: the pattern cycles
    /// through [`Pattern::ALL`] and the hue walks the golden-ratio sequence.
    pub fn from_id(garment_id: u32, height: usize, width: usize) -> Self {
        let golden = 0.618_034_f32;
        let hue = (garment_id as f32 * golden).fract();
        let pattern = Pattern::ALL[garment_id as usize % Pattern::ALL.len()];
        let primary = hsv(hue, 0.85, 0.9);
        let secondary = hsv(hue + 0.5, 0.6, 0.25 + 0.1 * (garment_id % 3) as f32);
        Self {
            garment_id,
            pattern,
            period: 4 + 2 * (garment_id / 4 % 3),
            primary,
            secondary,
            height,
            width,
        }
    }

    /// Renders the front-view garment image, `3×H_g×W_g`.
    pub fn render(&self) -> Array3<f32> {
        let p = self.period.max(2) as usize;
        Array3::from_shape_fn((3, self.height, self.width), |(c, y, x)| {
            let use_secondary = match self.pattern {
                Pattern::Stripes => (y / (p / 2).max(1)) % 2 == 1,
                Pattern::Checks => ((y / p) + (x / p)) % 2 == 1,
                Pattern::Dots => {
                    let cy = (y % p) as f32 + 0.5 - p as f32 / 2.0;
                    let cx = (x % p) as f32 + 0.5 - p as f32 / 2.0;
                    cy * cy + cx * cx <= (p as f32 / 3.0).powi(2)
                }
                Pattern::Solid => false,
            };
            if use_secondary {
                self.secondary[c]
            } else {
                self.primary[c]
            }
        })
    }
}

/// The shared pool of garments `0..n`.
pub fn garment_pool(n: usize, height: usize, width: usize) -> Vec<GarmentSpec> {
    (0..n as u32).map(|id| GarmentSpec::from_id(id, height, width)).collect()
}
