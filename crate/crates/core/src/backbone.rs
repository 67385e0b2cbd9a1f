//! The space-time diffusion transformer that predicts flow velocities for
//! noisy video latents.
//!
//! Weights live in a flat map from stable dotted names to 2-D arrays. The
//! names double as the checkpoint file names, so they are part of the
//! public contract:
//!
//! | name | shape |
//! |------|-------|
//! | `embed.latent.{weight,bias}` | `d×d`, `1×d` |
//! | `embed.pose.{weight,bias}` | `d×d`, `1×d` |
//! | `embed.garment.{weight,bias}` | `d×d`, `1×d` |
//! | `pos.video` | `F·P×d` |
//! | `pos.garment` | `G×d` (`G` = garment block length) |
//! | `time.fc1.{weight,bias}`, `time.fc2.{weight,bias}` | `d×d`, `1×d` |
//! | `text.embedding` | `vocab×d` |
//! | `blocks.{i}.modulation.{weight,bias}` | `d×4d`, `1×4d` |
//! | `blocks.{i}.self_attn.{q,k,v,o}.{weight,bias}` | `d×d`, `1×d` |
//! | `blocks.{i}.cross_attn.{q,k,v,o}.{weight,bias}` | `d×d`, `1×d` |
//! | `blocks.{i}.ffn.up.{weight,bias}` | `d×md`, `1×md` |
//! | `blocks.{i}.ffn.down.{weight,bias}` | `md×d`, `1×d` |
//! | `final.modulation.{weight,bias}` | `d×2d`, `1×2d` |
//! | `head.{weight,bias}` | `d×d`, `1×d` |
//! | `guider.conv{0..3}.{weight,bias}` | `27·c_in×c_out`, `1×c_out` |
//! | `guider.proj.{weight,bias}` | `c_last×d`, `1×d` |
//! | `lora.{i}.{site}.{A,B}` | `d_in×r`, `d_out×r` |
//!
//! Linear weights are stored input-major, so a layer computes `x·W + b`.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapters::LoraConfig;
use crate::autograd::{Tape, Var};
use crate::codec::{GarmentMode, LatentSequence};
use crate::conditioning;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub type ParamMap<T> = BTreeMap<String, Array2<T>>;

/// Instruction used when none is given.
pub const DEFAULT_INSTRUCTION: &str = "replace the garment";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Model width `d`.
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub patch_size: usize,
    /// Pixel channels of the video (the guider sees one more for the mask).
    pub channels: usize,
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub garment_mode: GarmentMode,
    pub guider_channels: Vec<usize>,
    pub text_vocab: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 4,
            heads: 4,
            ffn_mult: 4,
            patch_size: 4,
            channels: 3,
            frames: 8,
            grid_h: 8,
            grid_w: 8,
            garment_mode: GarmentMode::FrameBlock,
            guider_channels: conditioning::scaled_channels(64),
            text_vocab: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Default architecture sized for a `frames × height × width` video.
    pub fn for_video(frames: usize, height: usize, width: usize, patch_size: usize) -> Self {
        Self {
            frames,
            grid_h: height / patch_size,
            grid_w: width / patch_size,
            patch_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.blocks == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return err("width, blocks, heads and ffn_mult must be positive".into());
        }
        if self.width % self.heads != 0 {
            return err(format!("d not divisible by n_heads ({} % {} != 0)", self.width, self.heads));
        }
        if self.frames == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return err("video token grid must be non-empty".into());
        }
        if self.guider_channels.len() != conditioning::GUIDER_LAYERS {
            return err(format!(
                "guider channel schedule needs exactly {} entries, got {}",
                conditioning::GUIDER_LAYERS,
                self.guider_channels.len()
            ));
        }
        if self.guider_channels.contains(&0) {
            return err("guider channels must be positive".into());
        }
        conditioning::guider_strides(self.patch_size)?;
        if self.text_vocab == 0 {
            return err("text vocabulary must be non-empty".into());
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn video_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn garment_len(&self) -> usize {
        match self.garment_mode {
            GarmentMode::FrameBlock => self.tokens_per_frame(),
            GarmentMode::SinglePooled => 1,
        }
    }

    pub fn sequence_len(&self) -> usize {
        self.garment_len() + self.video_tokens()
    }

    pub fn hidden(&self) -> usize {
        self.ffn_mult * self.width
    }

    /// Shapes of every base (non-guider, non-adapter) parameter, by name.
    pub fn base_shapes(&self) -> Vec<(String, (usize, usize))> {
        let d = self.width;
        let mut out = Vec::new();
        let mut linear = |name: &str, i: usize, o: usize| {
            out.push((format!("{name}.weight"), (i, o)));
            out.push((format!("{name}.bias"), (1, o)));
        };
        for e in ["embed.latent", "embed.pose", "embed.garment", "time.fc1", "time.fc2", "head"] {
            linear(e, d, d);
        }
        linear("final.modulation", d, 2 * d);
        for b in 0..self.blocks {
            linear(&format!("blocks.{b}.modulation"), d, 4 * d);
            for attn in ["self_attn", "cross_attn"] {
                for p in ["q", "k", "v", "o"] {
                    linear(&format!("blocks.{b}.{attn}.{p}"), d, d);
                }
            }
            linear(&format!("blocks.{b}.ffn.up"), d, self.hidden());
            linear(&format!("blocks.{b}.ffn.down"), self.hidden(), d);
        }
        out.push(("pos.video".into(), (self.video_tokens(), d)));
        out.push(("pos.garment".into(), (self.garment_len(), d)));
        out.push(("text.embedding".into(), (self.text_vocab, d)));
        out
    }
}

/// A hashed instruction string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextStub {
    pub instruction: String,
    pub id: usize,
}

impl TextStub {
    pub fn new(instruction: &str, vocab: usize) -> Self {
        Self {
            instruction: instruction.to_string(),
            id: (fnv1a(instruction.as_bytes()) % vocab.max(1) as u64) as usize,
        }
    }

    pub fn default_for(cfg: &ModelConfig) -> Self {
        Self::new(DEFAULT_INSTRUCTION, cfg.text_vocab)
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-parameter generator, so each tensor is independent of creation order.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(name.as_bytes()))
}

pub(crate) fn normal<T: Real>(shape: (usize, usize), std: f64, rng: &mut ChaCha8Rng) -> Array2<T> {
    Array2::from_shape_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

const BIAS_STD: f64 = 0.02;
const POS_STD: f64 = 0.3;
const MODULATION_GAIN: f64 = 0.1;

fn init_base<T: Real>(cfg: &ModelConfig) -> ParamMap<T> {
    let mut params = ParamMap::new();
    let d = cfg.width;
    for (name, shape) in cfg.base_shapes() {
        let mut rng = param_rng(cfg.seed, &name);
        let value = if name.starts_with("pos.") {
            // filled below
            continue;
        } else if name == "text.embedding" {
            normal(shape, 1.0, &mut rng)
        } else if name.ends_with(".bias") {
            if name.contains("modulation") {
                Array2::zeros(shape)
            } else {
                normal(shape, BIAS_STD, &mut rng)
            }
        } else {
            let gain = if name.contains("modulation") { MODULATION_GAIN } else { 1.0 };
            normal(shape, gain / (shape.0 as f64).sqrt(), &mut rng)
        };
        params.insert(name, value);
    }
    // Space and time factorised at init; garment rows share the spatial table of frame 0.
    let p = cfg.tokens_per_frame();
    let spatial: Array2<T> = normal((p, d), POS_STD, &mut param_rng(cfg.seed, "pos.spatial"));
    let temporal: Array2<T> = normal((cfg.frames, d), POS_STD, &mut param_rng(cfg.seed, "pos.temporal"));
    let marker: Array2<T> = normal((1, d), POS_STD, &mut param_rng(cfg.seed, "pos.garment"));
    let video = Array2::from_shape_fn((cfg.video_tokens(), d), |(r, c)| spatial[[r % p, c]] + temporal[[r / p, c]]);
    let garment = match cfg.garment_mode {
        GarmentMode::FrameBlock => &spatial + &marker,
        GarmentMode::SinglePooled => marker,
    };
    params.insert("pos.video".into(), video);
    params.insert("pos.garment".into(), garment);
    params
}

/// Transformer weights plus the attached guider and adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub(crate) config: ModelConfig,
    pub(crate) lora: Option<LoraConfig>,
    pub(crate) params: ParamMap<T>,
}

/// Base weights and a freshly initialised guider; no adapters attached.
pub fn init_model<T: Real>(cfg: &ModelConfig) -> Result<Model<T>> {
    cfg.validate()?;
    let mut params = init_base(cfg);
    params.extend(conditioning::init_guider(cfg));
    Ok(Model {
        config: cfg.clone(),
        lora: None,
        params,
    })
}

pub fn is_guider_param(name: &str) -> bool {
    name.starts_with("guider.")
}

pub fn is_lora_param(name: &str) -> bool {
    name.starts_with("lora.")
}

pub fn is_base_param(name: &str) -> bool {
    !is_guider_param(name) && !is_lora_param(name)
}

/// Adapters, the guider and the text embedding train; everything else is frozen.
pub fn is_trainable_param(name: &str) -> bool {
    is_lora_param(name) || is_guider_param(name) || name == "text.embedding"
}

impl<T: Real> Model<T> {
    pub fn from_parts(config: ModelConfig, lora: Option<LoraConfig>, params: ParamMap<T>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.base_shapes() {
            match params.get(&name) {
                None => return Err(Error::Config(format!("missing parameter '{name}'"))),
                Some(a) if a.dim() != shape => {
                    return Err(Error::Shape(format!("parameter '{name}' has shape {:?}, expected {shape:?}", a.dim())))
                }
                _ => {}
            }
        }
        Ok(Self { config, lora, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn params(&self) -> &ParamMap<T> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Array2<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.params.get_mut(name)
    }

    pub fn has_guider(&self) -> bool {
        self.params.contains_key("guider.proj.weight")
    }

    pub fn has_lora(&self) -> bool {
        self.params.keys().any(|k| is_lora_param(k))
    }

    /// Names of the backbone's own layers, independent of attached conditioning.
    pub fn base_names(&self) -> Vec<&str> {
        self.params.keys().map(String::as_str).filter(|n| is_base_param(n)).collect()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params.keys().map(String::as_str).filter(|n| is_trainable_param(n)).collect()
    }

    pub fn without_guider(&self) -> Self {
        let mut m = self.clone();
        m.params.retain(|k, _| !is_guider_param(k));
        m
    }

    /// Drops guider and adapters.
    pub fn base_only(&self) -> Self {
        let mut m = self.clone();
        m.params.retain(|k, _| is_base_param(k));
        m.lora = None;
        m
    }

    /// Same architecture in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            lora: self.lora.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::lit(x.as_f64()))))
                .collect(),
        }
    }
}

/// Tape handles for every parameter of a model.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn bind<T: Real>(tape: &mut Tape<T>, model: &Model<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable(k))))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter '{name}' is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Graph builder over bound parameters.
pub(crate) struct Net<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a Bindings,
    pub cfg: &'a ModelConfig,
    pub lora: Option<&'a LoraConfig>,
}

impl<T: Real> Net<'_, T> {
    pub fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.vars.get(&format!("{name}.weight"));
        let b = self.vars.get(&format!("{name}.bias"));
        let xw = self.tape.matmul(x, w);
        self.tape.add_row(xw, b)
    }

    /// Block linear with its low-rank delta when one is attached.
    fn block_linear(&mut self, x: Var, block: usize, site: &str) -> Var {
        let y = self.linear(x, &format!("blocks.{block}.{site}"));
        let (Some(lora), Some(a)) = (self.lora, self.vars.try_get(&format!("lora.{block}.{site}.A"))) else {
            return y;
        };
        let b = self.vars.get(&format!("lora.{block}.{site}.B"));
        let xa = self.tape.matmul(x, a);
        let delta = self.tape.matmul_t(xa, b);
        let delta = self.tape.scale(delta, T::lit(lora.scaling()));
        self.tape.add(y, delta)
    }

    fn timestep(&mut self, t: f64) -> Var {
        let emb = self.tape.constant(timestep_embedding::<T>(t, self.cfg.width));
        let h = self.linear(emb, "time.fc1");
        let h = self.tape.silu(h);
        let h = self.linear(h, "time.fc2");
        self.tape.silu(h)
    }

    fn block(&mut self, h: Var, temb: Var, text: Var, i: usize) -> Var {
        let d = self.cfg.width;
        let heads = self.cfg.heads;
        let m = self.linear(temb, &format!("blocks.{i}.modulation"));
        let shift1 = self.tape.slice_cols(m, 0, d);
        let scale1 = self.tape.slice_cols(m, d, d);
        let shift2 = self.tape.slice_cols(m, 2 * d, d);
        let scale2 = self.tape.slice_cols(m, 3 * d, d);

        let n1 = self.tape.layer_norm(h);
        let a = self.tape.modulate(n1, shift1, scale1);
        let q = self.block_linear(a, i, "self_attn.q");
        let k = self.block_linear(a, i, "self_attn.k");
        let v = self.block_linear(a, i, "self_attn.v");
        let att = self.tape.attention(q, k, v, heads);
        let sa = self.block_linear(att, i, "self_attn.o");

        let cq = self.block_linear(a, i, "cross_attn.q");
        let ck = self.block_linear(text, i, "cross_attn.k");
        let cv = self.block_linear(text, i, "cross_attn.v");
        let catt = self.tape.attention(cq, ck, cv, heads);
        let ca = self.block_linear(catt, i, "cross_attn.o");

        let h = self.tape.add(h, sa);
        let h = self.tape.add(h, ca);

        let n2 = self.tape.layer_norm(h);
        let f = self.tape.modulate(n2, shift2, scale2);
        let up = self.block_linear(f, i, "ffn.up");
        let up = self.tape.gelu(up);
        let down = self.block_linear(up, i, "ffn.down");
        self.tape.add(h, down)
    }

    /// Velocity rows for the video tokens.
    pub fn forward(&mut self, x_t: Var, pose: Var, garment: Var, text_id: usize, t: f64, guider: Option<Var>) -> Var {
        let d = self.cfg.width;
        let glen = self.tape.shape(garment).0;
        let nv = self.tape.shape(x_t).0;

        let lat = self.linear(x_t, "embed.latent");
        let pz = self.linear(pose, "embed.pose");
        let video = self.tape.add(lat, pz);
        let video = self.tape.add(video, self.vars.get("pos.video"));
        let g = self.linear(garment, "embed.garment");
        let g = self.tape.add(g, self.vars.get("pos.garment"));

        let text = self.tape.slice_rows(self.vars.get("text.embedding"), text_id, 1);
        let temb = self.timestep(t);

        let mut h = self.tape.concat_rows(&[g, video]);
        for i in 0..self.cfg.blocks {
            h = self.block(h, temb, text, i);
            if i == 0 {
                if let Some(gf) = guider {
                    h = conditioning::inject_graph(self.tape, h, gf, glen);
                }
            }
        }

        let hv = self.tape.slice_rows(h, glen, nv);
        let m = self.linear(temb, "final.modulation");
        let shift = self.tape.slice_cols(m, 0, d);
        let scale = self.tape.slice_cols(m, d, d);
        let n = self.tape.layer_norm(hv);
        let out = self.tape.modulate(n, shift, scale);
        self.linear(out, "head")
    }
}

/// Sinusoidal features of `1000·t`, cosines then sines.
pub fn timestep_embedding<T: Real>(t: f64, width: usize) -> Array2<T> {
    let half = width / 2;
    let mut out = Array2::<T>::zeros((1, width));
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[[0, i]] = T::lit(arg.cos());
        out[[0, half + i]] = T::lit(arg.sin());
    }
    out
}

/// Everything the transformer sees besides the noisy latents and the timestep.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a, T> {
    pub sequence: &'a LatentSequence<T>,
    pub text: &'a TextStub,
    /// Guider features, one row per video token.
    pub guider: Option<&'a Array2<T>>,
}

impl<T: Real> Conditioning<'_, T> {
    pub(crate) fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let seq = self.sequence;
        if seq.rows.ncols() != cfg.width {
            return Err(Error::Shape(format!("sequence width {} != model width {}", seq.rows.ncols(), cfg.width)));
        }
        if seq.garment_len != cfg.garment_len() || seq.video_len() != cfg.video_tokens() {
            return Err(Error::Shape(format!(
                "sequence layout ({} garment + {} video rows) does not match model ({} + {})",
                seq.garment_len,
                seq.video_len(),
                cfg.garment_len(),
                cfg.video_tokens()
            )));
        }
        if self.text.id >= cfg.text_vocab {
            return Err(Error::Shape(format!("text id {} outside vocabulary {}", self.text.id, cfg.text_vocab)));
        }
        if let Some(gf) = self.guider {
            if gf.dim() != (cfg.video_tokens(), cfg.width) {
                return Err(Error::Shape(format!(
                    "guider features {:?} do not match video tokens ({}, {})",
                    gf.dim(),
                    cfg.video_tokens(),
                    cfg.width
                )));
            }
        }
        Ok(())
    }
}

/// Predicted velocity for `x_t`, one row per video token.
pub fn forward<T: Real>(model: &Model<T>, x_t: &Array2<T>, cond: &Conditioning<'_, T>, t: f64) -> Result<Array2<T>> {
    let cfg = &model.config;
    cond.check(cfg)?;
    if x_t.dim() != (cfg.video_tokens(), cfg.width) {
        return Err(Error::Shape(format!(
            "x_t has shape {:?}, expected ({}, {})",
            x_t.dim(),
            cfg.video_tokens(),
            cfg.width
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("timestep {t} outside [0, 1]")));
    }
    let mut tape = Tape::new();
    let vars = Bindings::bind(&mut tape, model, |_| false);
    let x = tape.constant(x_t.clone());
    let pose = tape.constant(cond.sequence.video_rows().to_owned());
    let garment = tape.constant(cond.sequence.garment_rows().to_owned());
    let gf = cond.guider.map(|g| tape.constant(g.clone()));
    let mut net = Net {
        tape: &mut tape,
        vars: &vars,
        cfg,
        lora: model.lora.as_ref(),
    };
    let out = net.forward(x, pose, garment, cond.text.id, t, gf);
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{assemble_sequence, GarmentBlock, LatentFrames};

    fn tiny() -> ModelConfig {
        ModelConfig {
            width: 16,
            blocks: 2,
            heads: 2,
            ffn_mult: 2,
            frames: 2,
            grid_h: 2,
            grid_w: 2,
            ..ModelConfig::default()
        }
    }

    fn random_inputs(cfg: &ModelConfig, seed: u64) -> (Array2<f64>, LatentSequence<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal((cfg.video_tokens(), cfg.width), 1.0, &mut rng);
        let g = GarmentBlock {
            rows: normal((cfg.garment_len(), cfg.width), 0.5, &mut rng),
            mode: cfg.garment_mode,
        };
        let p = LatentFrames {
            rows: normal((cfg.video_tokens(), cfg.width), 0.5, &mut rng),
            frames: cfg.frames,
            grid_h: cfg.grid_h,
            grid_w: cfg.grid_w,
        };
        (x, assemble_sequence(&g, &p).unwrap())
    }

    fn run(model: &Model<f64>, x: &Array2<f64>, seq: &LatentSequence<f64>, t: f64) -> Array2<f64> {
        let text = TextStub::default_for(&model.config);
        let cond = Conditioning { sequence: seq, text: &text, guider: None };
        forward(model, x, &cond, t).unwrap()
    }

    #[test]
    fn rejects_indivisible_width() {
        let cfg = ModelConfig { width: 65, ..ModelConfig::default() };
        let err = init_model::<f32>(&cfg).unwrap_err();
        assert!(err.to_string().contains("d not divisible by n_heads"));
        let cfg = ModelConfig { guider_channels: vec![4, 6, 12], ..ModelConfig::default() };
        assert!(matches!(init_model::<f32>(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_count_matches_layer_formula() {
        let cfg = ModelConfig::default();
        let model = init_model::<f32>(&cfg).unwrap();
        let (d, m, n) = (64usize, 256usize, 4usize);
        let lin = |i: usize, o: usize| i * o + o;
        let per_block = lin(d, 4 * d) + 8 * lin(d, d) + lin(d, m) + lin(m, d);
        let expected = 6 * lin(d, d) + lin(d, 2 * d) + n * per_block + 512 * d + 64 * d + 16 * d;
        let base: usize = model.base_only().params().values().map(|a| a.len()).sum();
        assert_eq!(base, expected);
        assert_eq!(base, 403_200);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model::<f32>(&ModelConfig::default()).unwrap();
        let b = init_model::<f32>(&ModelConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = init_model::<f32>(&ModelConfig { seed: 1, ..ModelConfig::default() }).unwrap();
        assert_ne!(a.param("head.weight"), c.param("head.weight"));
    }

    #[test]
    fn output_matches_latent_shape() {
        let cfg = tiny();
        let model = init_model::<f64>(&cfg).unwrap();
        let (x, seq) = random_inputs(&cfg, 1);
        assert_eq!(run(&model, &x, &seq, 0.3).dim(), x.dim());
        let wide = ModelConfig { width: 32, ..cfg };
        let model = init_model::<f64>(&wide).unwrap();
        let (x, seq) = random_inputs(&wide, 1);
        assert_eq!(run(&model, &x, &seq, 0.3).dim(), (8, 32));
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let cfg = tiny();
        let model = init_model::<f64>(&cfg).unwrap();
        let (x, seq) = random_inputs(&cfg, 2);
        assert_eq!(run(&model, &x, &seq, 0.7), run(&model, &x, &seq, 0.7));
    }

    #[test]
    fn permuting_garment_rows_changes_output() {
        let cfg = tiny();
        let model = init_model::<f64>(&cfg).unwrap();
        let (x, seq) = random_inputs(&cfg, 3);
        let mut swapped = seq.clone();
        for c in 0..cfg.width {
            swapped.rows.swap([0, c], [1, c]);
        }
        let diff = (&run(&model, &x, &seq, 0.5) - &run(&model, &x, &swapped, 0.5)).mapv(f64::abs).sum();
        assert!(diff > 1e-9);
        let mut same = seq.clone();
        let row0 = same.rows.row(0).to_owned();
        same.rows.row_mut(1).assign(&row0);
        let mut same_swapped = same.clone();
        for c in 0..cfg.width {
            same_swapped.rows.swap([0, c], [1, c]);
        }
        assert_eq!(run(&model, &x, &same, 0.5), run(&model, &x, &same_swapped, 0.5));
    }

    #[test]
    fn guider_is_a_no_op_at_init() {
        let cfg = tiny();
        let model = init_model::<f64>(&cfg).unwrap();
        let (x, seq) = random_inputs(&cfg, 4);
        let text = TextStub::default_for(&cfg);
        let gf = Array2::zeros((cfg.video_tokens(), cfg.width));
        let with = forward(&model, &x, &Conditioning { sequence: &seq, text: &text, guider: Some(&gf) }, 0.4).unwrap();
        let without = forward(&model, &x, &Conditioning { sequence: &seq, text: &text, guider: None }, 0.4).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn conditioning_does_not_change_layer_list() {
        let model = init_model::<f32>(&ModelConfig::default()).unwrap();
        let bare = model.base_only();
        assert!(model.has_guider() && !bare.has_guider());
        assert_eq!(model.base_names(), bare.base_names());
    }

    #[test]
    fn forward_errors() {
        let cfg = tiny();
        let model = init_model::<f64>(&cfg).unwrap();
        let (x, seq) = random_inputs(&cfg, 5);
        let text = TextStub::default_for(&cfg);
        let cond = Conditioning { sequence: &seq, text: &text, guider: None };
        assert!(forward(&model, &x, &cond, 1.5).is_err());
        assert!(matches!(forward(&model, &Array2::zeros((3, 16)), &cond, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn text_stub_is_stable() {
        assert_eq!(TextStub::new("a", 16), TextStub::new("a", 16));
        assert!(TextStub::new("replace the garment", 16).id < 16);
    }
}
