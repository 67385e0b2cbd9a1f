//! Latent encoders and the sequence assembly that prepends the edited
//! first frame to the pose-video latents.
//!
//! The video encoder is a fixed, seeded linear patch embedding whose rows
//! are orthonormal, so decoding with its transpose inverts encoding exactly
//! up to floating-point error. The image encoder shares the same embedding.

use ndarray::{s, Array2, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::VideoTensor;

/// How the edited frame is turned into conditioning rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GarmentMode {
    /// One latent frame: `P` rows.
    FrameBlock,
    /// Mean of the frame's tokens: one row.
    SinglePooled,
}

impl std::str::FromStr for GarmentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame_block" | "frame-block" => Ok(GarmentMode::FrameBlock),
            "single_pooled" | "single-pooled" => Ok(GarmentMode::SinglePooled),
            other => Err(Error::Config(format!("unknown garment mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecParams {
    pub patch_size: usize,
    /// Latent width `d`.
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub mode: GarmentMode,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self {
            patch_size: 4,
            width: 64,
            channels: 3,
            seed: 0,
            mode: GarmentMode::FrameBlock,
        }
    }
}

/// `F'·P × d` latent rows, frame-major then patch-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrames<T> {
    pub rows: Array2<T>,
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl<T: Real> LatentFrames<T> {
    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }

    pub fn frame(&self, f: usize) -> ArrayView2<'_, T> {
        let p = self.tokens_per_frame();
        self.rows.slice(s![f * p..(f + 1) * p, ..])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            rows: Array2::zeros(self.rows.dim()),
            ..self.clone()
        }
    }
}

/// Latent rows of the edited first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GarmentBlock<T> {
    pub rows: Array2<T>,
    pub mode: GarmentMode,
}

impl<T: Real> GarmentBlock<T> {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

/// Role of a row in the assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowRole {
    Garment(usize),
    Video { frame: usize, patch: usize },
}

/// The unified sequence `L`: garment rows first, then pose latents frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<T> {
    pub rows: Array2<T>,
    pub garment_len: usize,
    pub garment_mode: GarmentMode,
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl<T: Real> LatentSequence<T> {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn video_len(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn role(&self, row: usize) -> RowRole {
        if row < self.garment_len {
            RowRole::Garment(row)
        } else {
            let i = row - self.garment_len;
            let p = self.tokens_per_frame();
            RowRole::Video { frame: i / p, patch: i % p }
        }
    }

    pub fn index_map(&self) -> Vec<RowRole> {
        (0..self.len()).map(|r| self.role(r)).collect()
    }

    pub fn garment_rows(&self) -> ArrayView2<'_, T> {
        self.rows.slice(s![..self.garment_len, ..])
    }

    pub fn video_rows(&self) -> ArrayView2<'_, T> {
        self.rows.slice(s![self.garment_len.., ..])
    }

    /// Splits the sequence back into its garment block and pose latents.
    pub fn disassemble(&self) -> (GarmentBlock<T>, LatentFrames<T>) {
        (
            GarmentBlock {
                rows: self.garment_rows().to_owned(),
                mode: self.garment_mode,
            },
            LatentFrames {
                rows: self.video_rows().to_owned(),
                frames: self.frames,
                grid_h: self.grid_h,
                grid_w: self.grid_w,
            },
        )
    }

    /// Same sequence with the pose rows replaced by zeros.
    pub fn without_pose(&self) -> Self {
        let mut out = self.clone();
        out.rows.slice_mut(s![self.garment_len.., ..]).fill(T::zero());
        out
    }
}

/// `L = R(E_vae(v_p), E_img(i_r))`.
pub fn assemble_sequence<T: Real>(garment: &GarmentBlock<T>, pose: &LatentFrames<T>) -> Result<LatentSequence<T>> {
    if garment.rows.ncols() != pose.width() {
        return Err(Error::Shape(format!(
            "garment block width {} != pose latent width {}",
            garment.rows.ncols(),
            pose.width()
        )));
    }
    let rows = ndarray::concatenate(Axis(0), &[garment.rows.view(), pose.rows.view()]).expect("widths checked");
    Ok(LatentSequence {
        rows,
        garment_len: garment.len(),
        garment_mode: garment.mode,
        frames: pose.frames,
        grid_h: pose.grid_h,
        grid_w: pose.grid_w,
    })
}

/// Seeded orthonormal patch embedding.
#[derive(Debug, Clone)]
pub struct Codec<T> {
    params: CodecParams,
    /// `patch_len × d` with orthonormal rows.
    embed: Array2<T>,
}

/// `k` orthonormal rows of length `d` from a seeded Gaussian matrix (modified Gram-Schmidt, two passes).
pub fn orthonormal_rows(k: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Array2::<f64>::from_shape_fn((k, d), |_| StandardNormal.sample(&mut rng));
    for _pass in 0..2 {
        for i in 0..k {
            for j in 0..i {
                let dot = m.row(i).dot(&m.row(j));
                let rj = m.row(j).to_owned();
                m.row_mut(i).scaled_add(-dot, &rj);
            }
            let norm = m.row(i).dot(&m.row(i)).sqrt();
            m.row_mut(i).mapv_inplace(|v| v / norm);
        }
    }
    m
}

impl<T: Real> Codec<T> {
    pub fn new(params: CodecParams) -> Result<Self> {
        if params.patch_size == 0 || params.channels == 0 {
            return Err(Error::Config("codec patch size and channels must be positive".into()));
        }
        let patch_len = params.channels * params.patch_size * params.patch_size;
        if patch_len > params.width {
            return Err(Error::Config(format!(
                "patch length {patch_len} exceeds latent width {}; embedding cannot be orthonormal",
                params.width
            )));
        }
        let embed = orthonormal_rows(patch_len, params.width, params.seed).mapv(T::lit);
        Ok(Self { params, embed })
    }

    pub fn params(&self) -> &CodecParams {
        &self.params
    }

    pub fn embedding(&self) -> &Array2<T> {
        &self.embed
    }

    fn patch_len(&self) -> usize {
        self.embed.nrows()
    }

    fn check_frame(&self, c: usize, h: usize, w: usize) -> Result<()> {
        let ps = self.params.patch_size;
        if c != self.params.channels {
            return Err(Error::Config(format!("expected {} channels, got {c}", self.params.channels)));
        }
        if h % ps != 0 || w % ps != 0 {
            return Err(Error::Config(format!("frame {h}x{w} not divisible by patch size {ps}")));
        }
        Ok(())
    }

    fn patchify_frame(&self, frame: ArrayView3<'_, f32>, out: &mut ndarray::ArrayViewMut2<'_, T>) {
        let ps = self.params.patch_size;
        let (c, h, w) = frame.dim();
        let gw = w / ps;
        for py in 0..h / ps {
            for px in 0..gw {
                let mut row = out.row_mut(py * gw + px);
                for ci in 0..c {
                    for dy in 0..ps {
                        for dx in 0..ps {
                            row[(ci * ps + dy) * ps + dx] = T::of_f32(frame[[ci, py * ps + dy, px * ps + dx]]);
                        }
                    }
                }
            }
        }
    }

    /// `E_vae`: per-frame patch embedding, temporal patch 1.
    pub fn encode_video(&self, v: &VideoTensor) -> Result<LatentFrames<T>> {
        let (f, c, h, w) = v.dims();
        self.check_frame(c, h, w)?;
        let ps = self.params.patch_size;
        let (gh, gw) = (h / ps, w / ps);
        let p = gh * gw;
        let mut patches = Array2::<T>::zeros((f * p, self.patch_len()));
        for fi in 0..f {
            let mut view = patches.slice_mut(s![fi * p..(fi + 1) * p, ..]);
            self.patchify_frame(v.frame(fi), &mut view);
        }
        Ok(LatentFrames {
            rows: patches.dot(&self.embed),
            frames: f,
            grid_h: gh,
            grid_w: gw,
        })
    }

    /// Transpose of [`Codec::encode_video`]; no clamping.
    pub fn decode_video(&self, z: &LatentFrames<T>) -> Result<VideoTensor> {
        if z.width() != self.params.width {
            return Err(Error::Shape(format!("latent width {} != codec width {}", z.width(), self.params.width)));
        }
        if z.rows.nrows() != z.frames * z.tokens_per_frame() {
            return Err(Error::Shape(format!(
                "{} latent rows for {} frames of {} tokens",
                z.rows.nrows(),
                z.frames,
                z.tokens_per_frame()
            )));
        }
        let ps = self.params.patch_size;
        let c = self.params.channels;
        let patches = z.rows.dot(&self.embed.t());
        let mut v = VideoTensor::zeros(z.frames, c, z.grid_h * ps, z.grid_w * ps);
        let data = v.array_mut();
        let p = z.tokens_per_frame();
        for fi in 0..z.frames {
            for py in 0..z.grid_h {
                for px in 0..z.grid_w {
                    let row = patches.row(fi * p + py * z.grid_w + px);
                    for ci in 0..c {
                        for dy in 0..ps {
                            for dx in 0..ps {
                                data[[fi, ci, py * ps + dy, px * ps + dx]] = row[(ci * ps + dy) * ps + dx].as_f32();
                            }
                        }
                    }
                }
            }
        }
        Ok(v)
    }

    /// `E_img`: the same embedding applied to a single `C×H×W` frame.
    pub fn encode_image(&self, image: ArrayView3<'_, f32>, mode: GarmentMode) -> Result<GarmentBlock<T>> {
        let (c, h, w) = image.dim();
        self.check_frame(c, h, w)?;
        let ps = self.params.patch_size;
        let p = (h / ps) * (w / ps);
        let mut patches = Array2::<T>::zeros((p, self.patch_len()));
        self.patchify_frame(image, &mut patches.view_mut());
        let tokens = patches.dot(&self.embed);
        let rows = match mode {
            GarmentMode::FrameBlock => tokens,
            GarmentMode::SinglePooled => tokens.mean_axis(Axis(0)).expect("non-empty frame").insert_axis(Axis(0)),
        };
        Ok(GarmentBlock { rows, mode })
    }
}
