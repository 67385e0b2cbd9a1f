//! Video quality metrics.
//!
//! SSIM follows the usual Gaussian-window definition. Perceptual distance
//! and the Fréchet video distance are computed over fixed, seeded random
//! convolutional features; they are surrogates for the learned-feature
//! metrics and only meaningful for comparisons under the same seed.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Conv3dGeom;
use crate::backbone::normal;
use crate::error::{Error, Result};
use crate::tensor::VideoTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &VideoTensor, b: &VideoTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("videos differ in shape: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(img: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let (h, wd) = img.dim();
    let k = w.len();
    let (oh, ow) = (h + 1 - k, wd + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..k).map(|i| w[i] * img[[y, x + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..k).map(|i| w[i] * rows[[y + i, x]]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel images.
pub fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let w = gaussian_window();
    let mu_a = filter_valid(a, &w);
    let mu_b = filter_valid(b, &w);
    let aa = filter_valid(&(a * a), &w);
    let bb = filter_valid(&(b * b), &w);
    let ab = filter_valid(&(a * b), &w);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / mu_a.len() as f64
}

/// SSIM averaged over channels and frames.
pub fn ssim_video(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    check_shapes(a, b)?;
    let (f, c, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("frames {h}x{w} smaller than the {SSIM_WINDOW}px window")));
    }
    let mut total = 0.0;
    for fi in 0..f {
        for ci in 0..c {
            let pa = a.array().index_axis(Axis(0), fi).index_axis(Axis(0), ci).mapv(f64::from);
            let pb = b.array().index_axis(Axis(0), fi).index_axis(Axis(0), ci).mapv(f64::from);
            total += ssim_plane(&pa, &pb);
        }
    }
    Ok(total / (f * c) as f64)
}

/// A stack of seeded 3×3×3 convolutions with ReLU, no biases.
#[derive(Debug, Clone)]
struct RandomConvNet {
    layers: Vec<(Conv3dGeom, Array2<f64>)>,
}

impl RandomConvNet {
    fn new(seed: u64, input: (usize, usize, usize), c_in: usize, spec: &[(usize, (usize, usize, usize))]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let (mut extent, mut c) = (input, c_in);
        for &(c_out, stride) in spec {
            let geom = Conv3dGeom {
                input: extent,
                c_in: c,
                c_out,
                stride,
            };
            let fan_in = geom.patch_len();
            layers.push((geom, normal((fan_in, c_out), (2.0 / fan_in as f64).sqrt(), &mut rng)));
            extent = geom.output();
            c = c_out;
        }
        Self { layers }
    }

    /// Activations of every layer, `voxels × channels`.
    fn features(&self, x: Array2<f64>) -> Vec<Array2<f64>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (geom, w) in &self.layers {
            h = geom.im2col(&h).dot(w).mapv(|v| v.max(0.0));
            out.push(h.clone());
        }
        out
    }
}

/// `(t, y, x)`-major voxels × channels, rescaled to `[-1, 1]`.
fn voxels(v: &VideoTensor, frames: std::ops::Range<usize>) -> Array2<f64> {
    let (_, c, h, w) = v.dims();
    let nf = frames.len();
    let mut out = Array2::<f64>::zeros((nf * h * w, c));
    for (i, f) in frames.enumerate() {
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    out[[(i * h + y) * w + x, ci]] = 2.0 * f64::from(v.array()[[f, ci, y, x]]) - 1.0;
                }
            }
        }
    }
    out
}

fn unit_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt() + 1e-10;
        row.mapv_inplace(|v| v / n);
    }
    out
}

fn perceptual_net(seed: u64, h: usize, w: usize, c: usize) -> RandomConvNet {
    RandomConvNet::new(seed, (1, h, w), c, &[(16, (1, 1, 1)), (32, (1, 2, 2)), (64, (1, 2, 2))])
}

/// Per-frame distance between channel-normalised random-conv features,
/// squared and averaged over positions, summed over layers, then averaged over frames.
pub fn perceptual_distance(a: &VideoTensor, b: &VideoTensor, feature_seed: u64) -> Result<f64> {
    check_shapes(a, b)?;
    let (f, c, h, w) = a.dims();
    let net = perceptual_net(feature_seed, h, w, c);
    let mut total = 0.0;
    for fi in 0..f {
        let fa = net.features(voxels(a, fi..fi + 1));
        let fb = net.features(voxels(b, fi..fi + 1));
        for (la, lb) in fa.iter().zip(fb.iter()) {
            let d = unit_rows(la) - unit_rows(lb);
            total += d.mapv(|v| v * v).sum() / la.nrows() as f64;
        }
    }
    Ok(total / f as f64)
}

/// Pooled random 3-D conv features of one video: per-channel means of every layer.
pub fn video_features(v: &VideoTensor, feature_seed: u64) -> Array1<f64> {
    let (f, c, h, w) = v.dims();
    let net = RandomConvNet::new(
        feature_seed,
        (f, h, w),
        c,
        &[(8, (1, 2, 2)), (16, (2, 2, 2)), (32, (2, 2, 2))],
    );
    let feats = net.features(voxels(v, 0..f));
    let pooled: Vec<f64> = feats
        .iter()
        .flat_map(|l| l.mean_axis(Axis(0)).expect("non-empty layer").to_vec())
        .collect();
    Array1::from(pooled)
}

/// Eigenvalues and eigenvectors (columns) of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigen(m: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = cs * akp - sn * akq;
                    a[[k, q]] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = cs * apk - sn * aqk;
                    a[[q, k]] = sn * apk + cs * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = cs * vkp - sn * vkq;
                    v[[k, q]] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    (a.diag().to_owned(), v)
}

/// Square root of a symmetric PSD matrix; negative eigenvalues are floored at 0.
pub fn psd_sqrt(m: &Array2<f64>) -> Array2<f64> {
    let (vals, vecs) = symmetric_eigen(m);
    let roots = vals.mapv(|l| l.max(0.0).sqrt());
    (&vecs * &roots).dot(&vecs.t())
}

/// Sample mean and unbiased covariance of row vectors.
pub fn mean_cov(features: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = features.nrows();
    let mean = features.mean_axis(Axis(0)).expect("at least one row");
    let centred = features - &mean;
    let cov = centred.t().dot(&centred) / (n as f64 - 1.0);
    (mean, cov)
}

/// Fréchet distance between the Gaussians fitted to two feature sets (one row per item).
pub fn frechet_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Shape("Fréchet distance needs at least 2 items per set".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape("feature widths differ".into()));
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let diff = &ma - &mb;
    let sa = psd_sqrt(&ca);
    let inner = sa.dot(&cb).dot(&sa);
    let inner = (&inner + &inner.t()) * 0.5;
    let (vals, _) = symmetric_eigen(&inner);
    let tr_cross: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok(diff.dot(&diff) + ca.diag().sum() + cb.diag().sum() - 2.0 * tr_cross)
}

pub fn frechet_video_distance(set_a: &[VideoTensor], set_b: &[VideoTensor], feature_seed: u64) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::Shape(format!(
            "Fréchet video distance needs at least 2 videos per set, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    let dims = set_a[0].dims();
    if set_a.iter().chain(set_b.iter()).any(|v| v.dims() != dims) {
        return Err(Error::Shape("all videos must share one shape".into()));
    }
    let stack = |set: &[VideoTensor]| {
        let rows: Vec<Array1<f64>> = set.iter().map(|v| video_features(v, feature_seed)).collect();
        let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal feature widths")
    };
    frechet_distance(&stack(set_a), &stack(set_b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Paired,
    Unpaired,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::Paired => "paired",
            Setting::Unpaired => "unpaired",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: Setting,
    pub ssim: f64,
    pub perc: f64,
    pub fvd: f64,
    pub samples: usize,
    pub feature_seed: u64,
}

/// Per-sample scores plus the set-level distance.
pub fn evaluate_sets(
    generated: &[VideoTensor],
    references: &[VideoTensor],
    setting: Setting,
    feature_seed: u64,
) -> Result<(MetricsReport, Vec<(f64, f64)>)> {
    if generated.len() != references.len() || generated.is_empty() {
        return Err(Error::Shape("generated and reference sets must be non-empty and equal in size".into()));
    }
    let mut rows = Vec::with_capacity(generated.len());
    for (g, r) in generated.iter().zip(references) {
        rows.push((ssim_video(g, r)?, perceptual_distance(g, r, feature_seed)?));
    }
    let n = rows.len() as f64;
    let fvd = if generated.len() >= 2 {
        frechet_video_distance(generated, references, feature_seed)?
    } else {
        f64::NAN
    };
    Ok((
        MetricsReport {
            setting,
            ssim: rows.iter().map(|r| r.0).sum::<f64>() / n,
            perc: rows.iter().map(|r| r.1).sum::<f64>() / n,
            fvd,
            samples: rows.len(),
            feature_seed,
        },
        rows,
    ))
}
