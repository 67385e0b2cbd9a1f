//! Mask guider: a four-layer 3-D convolutional encoder over the agnostic
//! video and its mask. Its output is added to the video-token hidden states
//! after the first transformer block. The final projection starts at zero,
//! so attaching a fresh guider leaves the backbone's output unchanged.

use ndarray::{Array2, Axis};

use crate::autograd::{Conv3dGeom, Tape, Var};
use crate::backbone::{normal, param_rng, Bindings, Model, ModelConfig, Net, ParamMap};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::VideoTensor;

pub const GUIDER_LAYERS: usize = 4;

const REFERENCE_CHANNELS: [usize; GUIDER_LAYERS] = [32, 96, 192, 256];
const REFERENCE_WIDTH: usize = 1024;

/// Reference schedule scaled by `width / 1024`, floored at 4 channels.
pub fn scaled_channels(width: usize) -> Vec<usize> {
    REFERENCE_CHANNELS
        .iter()
        .map(|&c| (c * width / REFERENCE_WIDTH).max(4))
        .collect()
}

/// Spatial strides per layer; the product equals the patch size.
pub fn guider_strides(patch_size: usize) -> Result<[usize; GUIDER_LAYERS]> {
    let mut strides = [1; GUIDER_LAYERS];
    let mut rest = patch_size;
    for s in strides.iter_mut() {
        if rest > 1 && rest % 2 == 0 {
            *s = 2;
            rest /= 2;
        }
    }
    if rest != 1 || patch_size == 0 {
        return Err(Error::Config(format!(
            "patch size {patch_size} cannot be reached with {GUIDER_LAYERS} stride-1/2 layers"
        )));
    }
    Ok(strides)
}

/// Layer geometries for a model config; input channels are video + mask.
pub fn guider_geometry(cfg: &ModelConfig) -> Result<Vec<Conv3dGeom>> {
    let strides = guider_strides(cfg.patch_size)?;
    let mut geoms = Vec::with_capacity(GUIDER_LAYERS);
    let mut input = (cfg.frames, cfg.grid_h * cfg.patch_size, cfg.grid_w * cfg.patch_size);
    let mut c_in = cfg.channels + 1;
    for (&c_out, &s) in cfg.guider_channels.iter().zip(strides.iter()) {
        let g = Conv3dGeom {
            input,
            c_in,
            c_out,
            stride: (1, s, s),
        };
        input = g.output();
        c_in = c_out;
        geoms.push(g);
    }
    Ok(geoms)
}

pub(crate) fn init_guider<T: Real>(cfg: &ModelConfig) -> ParamMap<T> {
    let mut params = ParamMap::new();
    let mut c_in = cfg.channels + 1;
    for (i, &c_out) in cfg.guider_channels.iter().enumerate() {
        let name = format!("guider.conv{i}.weight");
        let fan_in = 27 * c_in;
        let w = normal((fan_in, c_out), (2.0 / fan_in as f64).sqrt(), &mut param_rng(cfg.seed, &name));
        params.insert(name, w);
        params.insert(format!("guider.conv{i}.bias"), Array2::zeros((1, c_out)));
        c_in = c_out;
    }
    params.insert("guider.proj.weight".into(), Array2::zeros((c_in, cfg.width)));
    params.insert("guider.proj.bias".into(), Array2::zeros((1, cfg.width)));
    params
}

/// Adds a freshly initialised guider drawn from `seed`; the model config is left as is.
pub fn attach_guider<T: Real>(model: &Model<T>, seed: u64) -> Result<Model<T>> {
    if model.has_guider() {
        return Err(Error::Config("model already carries a mask guider".into()));
    }
    let cfg = model.config();
    guider_geometry(cfg)?;
    let mut out = model.clone();
    out.params.extend(init_guider(&ModelConfig { seed, ..cfg.clone() }));
    Ok(out)
}

/// Packs the agnostic video and its mask into `voxels × (C+1)` rows, rescaled to `[-1, 1]`.
pub fn guider_input<T: Real>(agnostic: &VideoTensor, mask: &VideoTensor) -> Result<Array2<T>> {
    let (f, c, h, w) = agnostic.dims();
    if mask.dims() != (f, 1, h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match agnostic video {:?}",
            mask.dims(),
            agnostic.dims()
        )));
    }
    let (a, m) = (agnostic.array(), mask.array());
    let mut out = Array2::<T>::zeros((f * h * w, c + 1));
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                let mut row = out.row_mut((fi * h + y) * w + x);
                for ci in 0..c {
                    row[ci] = T::of_f32(2.0 * a[[fi, ci, y, x]] - 1.0);
                }
                row[c] = T::of_f32(2.0 * m[[fi, 0, y, x]] - 1.0);
            }
        }
    }
    Ok(out)
}

impl<T: Real> Net<'_, T> {
    pub fn guider(&mut self, input: Var) -> Result<Var> {
        let geoms = guider_geometry(self.cfg)?;
        let expected = (geoms[0].in_voxels(), geoms[0].c_in);
        if self.tape.shape(input) != expected {
            return Err(Error::Shape(format!(
                "guider input {:?} does not match model grid {expected:?}",
                self.tape.shape(input)
            )));
        }
        let mut h = input;
        for (i, geom) in geoms.into_iter().enumerate() {
            let w = self.vars.get(&format!("guider.conv{i}.weight"));
            let b = self.vars.get(&format!("guider.conv{i}.bias"));
            h = self.tape.conv3d(h, w, b, geom);
            h = self.tape.silu(h);
        }
        Ok(self.linear(h, "guider.proj"))
    }
}

/// Guider features, one row per video token.
pub fn guider_forward<T: Real>(model: &Model<T>, agnostic: &VideoTensor, mask: &VideoTensor) -> Result<Array2<T>> {
    if !model.has_guider() {
        return Err(Error::Config("model has no mask guider attached".into()));
    }
    let input = guider_input::<T>(agnostic, mask)?;
    let mut tape = Tape::new();
    let vars = Bindings::bind(&mut tape, model, |_| false);
    let x = tape.constant(input);
    let mut net = Net {
        tape: &mut tape,
        vars: &vars,
        cfg: model.config(),
        lora: None,
    };
    let out = net.guider(x)?;
    Ok(tape.value(out).clone())
}

/// Adds guider features to the video rows of `hidden`; the first `garment_len` rows pass through.
pub fn inject<T: Real>(hidden: &Array2<T>, features: &Array2<T>, garment_len: usize) -> Result<Array2<T>> {
    if hidden.nrows() != garment_len + features.nrows() || hidden.ncols() != features.ncols() {
        return Err(Error::Shape(format!(
            "cannot inject {:?} features into {:?} hidden states with {garment_len} garment rows",
            features.dim(),
            hidden.dim()
        )));
    }
    let mut out = hidden.clone();
    let mut video = out.slice_axis_mut(Axis(0), (garment_len..).into());
    video += features;
    Ok(out)
}

pub(crate) fn inject_graph<T: Real>(tape: &mut Tape<T>, h: Var, features: Var, garment_len: usize) -> Var {
    let (n, _) = tape.shape(h);
    let g = tape.slice_rows(h, 0, garment_len);
    let v = tape.slice_rows(h, garment_len, n - garment_len);
    let v = tape.add(v, features);
    tape.concat_rows(&[g, v])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_model;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video(seed: u64, f: usize, c: usize) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoTensor::from_array(Array4::from_shape_fn((f, c, 32, 32), |_| rng.random::<f32>()))
    }

    #[test]
    fn default_schedule() {
        assert_eq!(scaled_channels(64), vec![4, 6, 12, 16]);
        assert_eq!(scaled_channels(1024), vec![32, 96, 192, 256]);
        assert_eq!(guider_strides(4).unwrap(), [2, 2, 1, 1]);
        assert!(guider_strides(3).is_err());
        assert!(guider_strides(32).is_err());
    }

    #[test]
    fn fresh_guider_outputs_zero_on_the_token_grid() {
        let model = init_model::<f32>(&ModelConfig::default()).unwrap();
        assert!(model.param("guider.proj.weight").unwrap().iter().all(|&x| x == 0.0));
        let gf = guider_forward(&model, &random_video(1, 8, 3), &random_video(2, 8, 1)).unwrap();
        assert_eq!(gf.dim(), (512, 64));
        assert!(gf.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_mismatched_grid() {
        let model = init_model::<f32>(&ModelConfig::default()).unwrap();
        assert!(guider_forward(&model, &random_video(1, 4, 3), &random_video(2, 4, 1)).is_err());
        assert!(guider_forward(&model, &random_video(1, 8, 3), &random_video(2, 8, 3)).is_err());
    }

    #[test]
    fn inject_touches_only_video_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h: Array2<f64> = normal((10, 4), 1.0, &mut rng);
        let gf: Array2<f64> = normal((7, 4), 1.0, &mut rng);
        let out = inject(&h, &gf, 3).unwrap();
        assert_eq!(out.slice(ndarray::s![..3, ..]), h.slice(ndarray::s![..3, ..]));
        assert_eq!(inject(&h, &Array2::zeros((7, 4)), 3).unwrap(), h);
        let back = inject(&out, &gf.mapv(|x| -x), 3).unwrap();
        assert!((&back - &h).iter().all(|x| x.abs() <= 1e-12));
        assert!(inject(&h, &gf, 2).is_err());
    }
}
