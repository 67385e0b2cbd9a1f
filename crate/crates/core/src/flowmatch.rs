//! Rectified-flow training and Euler sampling.
//!
//! Paths run from noise at `t = 0` to data at `t = 1`:
//! `x_t = (1 - t)·x_0 + t·x_1`, with target velocity `x_1 - x_0`.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::{forward, is_lora_param, is_trainable_param, Bindings, Conditioning, Model, Net, ParamMap, TextStub};
use crate::codec::{GarmentBlock, LatentFrames};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum TimeSampler {
    Uniform,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample<T> {
    pub x0: Array2<T>,
    pub x1: Array2<T>,
    pub t: f64,
    pub x_t: Array2<T>,
    pub velocity: Array2<T>,
}

pub fn standard_normal<T: Real>(shape: (usize, usize), rng: &mut impl Rng) -> Array2<T> {
    Array2::from_shape_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    })
}

pub fn interpolate<T: Real>(x0: &Array2<T>, x1: &Array2<T>, t: f64) -> Array2<T> {
    if t == 0.0 {
        return x0.clone();
    }
    if t == 1.0 {
        return x1.clone();
    }
    let (a, b) = (T::lit(1.0 - t), T::lit(t));
    let mut out = x0.clone();
    out.zip_mut_with(x1, |o, &x| *o = a * *o + b * x);
    out
}

pub fn sample_path_with<T: Real>(x1: &Array2<T>, rng: &mut impl Rng, sampler: TimeSampler) -> PathSample<T> {
    let x0 = standard_normal(x1.dim(), rng);
    let t = match sampler {
        TimeSampler::Uniform => rng.random::<f64>(),
        TimeSampler::Fixed(t) => t,
    };
    PathSample {
        x_t: interpolate(&x0, x1, t),
        velocity: x1 - &x0,
        x0,
        x1: x1.clone(),
        t,
    }
}

pub fn sample_path<T: Real>(x1: &Array2<T>, seed: u64, sampler: TimeSampler) -> PathSample<T> {
    sample_path_with(x1, &mut ChaCha8Rng::seed_from_u64(seed), sampler)
}

/// Mean squared error over every element.
pub fn velocity_loss<T: Real>(pred: &Array2<T>, target: &Array2<T>) -> f64 {
    let n = target.len() as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let e = (p - t).as_f64();
            e * e
        })
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to adapter factors only.
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per trainable parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState<T> {
    pub m: ParamMap<T>,
    pub v: ParamMap<T>,
}

impl AdamW {
    /// One update of `param` in place; `step` is 1-based.
    pub fn update<T: Real>(&self, name: &str, param: &mut Array2<T>, grad: &Array2<T>, state: &mut OptimState<T>, step: u64) {
        let m = state.m.entry(name.to_string()).or_insert_with(|| Array2::zeros(param.dim()));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Array2::zeros(param.dim()));
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = T::lit(1.0 - self.beta1.powi(step as i32));
        let bc2 = T::lit(1.0 - self.beta2.powi(step as i32));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let decay = if is_lora_param(name) {
            T::lit(1.0 - self.lr * self.weight_decay)
        } else {
            T::one()
        };
        ndarray::Zip::from(param).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p = *p * decay - lr * mh / (vh.sqrt() + eps);
        });
    }
}

/// Which parameters an optimizer step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    /// Adapters, guider and text embedding; the backbone stays frozen.
    #[default]
    Adapters,
    /// Every parameter; used to produce the pretrained backbone.
    Everything,
}

impl Trainable {
    pub fn includes(self, name: &str) -> bool {
        match self {
            Trainable::Adapters => is_trainable_param(name),
            Trainable::Everything => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub trainable: Trainable,
    pub seed: u64,
    pub optimizer: AdamW,
    pub time_sampler: TimeSampler,
    /// Keep frame 0 clean during training and sampling.
    pub pin_first_frame: bool,
    /// Save a resumable checkpoint every this many steps (0 = only at the end).
    pub checkpoint_interval: usize,
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            trainable: Trainable::Adapters,
            seed: 0,
            optimizer: AdamW::default(),
            time_sampler: TimeSampler::Uniform,
            pin_first_frame: false,
            checkpoint_interval: 0,
            manifest: None,
        }
    }
}

/// One training pair with its conditioning already encoded.
#[derive(Debug, Clone)]
pub struct TrainExample<T> {
    pub garment: GarmentBlock<T>,
    pub pose: LatentFrames<T>,
    /// Clean video latents `x_1`.
    pub target: LatentFrames<T>,
    /// Packed agnostic video and mask for the guider.
    pub guider_input: Array2<T>,
    pub text: TextStub,
}

/// Serializable position of the path generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub optim: OptimState<T>,
    pub step: u64,
    pub losses: Vec<f64>,
    pub rng: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: Model<T>, seed: u64) -> Self {
        Self {
            model,
            optim: OptimState::default(),
            step: 0,
            losses: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Loss and gradients of every trainable parameter for a fixed path sample.
pub fn loss_and_grads<T: Real>(
    model: &Model<T>,
    example: &TrainExample<T>,
    path: &PathSample<T>,
    pin_first_frame: bool,
    trainable: Trainable,
) -> Result<(f64, ParamMap<T>)> {
    let cfg = model.config();
    let p = cfg.tokens_per_frame();
    let mut x_t = path.x_t.clone();
    if pin_first_frame {
        x_t.slice_mut(s![..p, ..]).assign(&path.x1.slice(s![..p, ..]));
    }
    let mut tape = Tape::new();
    let vars = Bindings::bind(&mut tape, model, |n| trainable.includes(n));
    let x = tape.constant(x_t);
    let pose = tape.constant(example.pose.rows.clone());
    let garment = tape.constant(example.garment.rows.clone());
    let mut net = Net {
        tape: &mut tape,
        vars: &vars,
        cfg,
        lora: model.lora_config(),
    };
    let gf = if model.has_guider() {
        let input = net.tape.constant(example.guider_input.clone());
        Some(net.guider(input)?)
    } else {
        None
    };
    let mut pred = net.forward(x, pose, garment, example.text.id, path.t, gf);
    let mut target = path.velocity.clone();
    if pin_first_frame {
        let n = tape.shape(pred).0;
        pred = tape.slice_rows(pred, p, n - p);
        target = target.slice(s![p.., ..]).to_owned();
    }
    let loss = tape.mse(pred, target);
    let value = tape.value(loss)[[0, 0]].as_f64();
    tape.backward(loss);
    let grads = vars
        .iter()
        .filter(|(name, _)| trainable.includes(name))
        .filter_map(|(name, v)| tape.grad(v).map(|g| (name.to_string(), g.clone())))
        .collect();
    Ok((value, grads))
}

/// One AdamW update on a freshly sampled path; returns the pre-update loss.
pub fn training_step<T: Real>(state: &mut TrainState<T>, example: &TrainExample<T>, cfg: &TrainConfig) -> Result<f64> {
    let path = sample_path_with(&example.target.rows, &mut state.rng, cfg.time_sampler);
    let (loss, grads) = loss_and_grads(&state.model, example, &path, cfg.pin_first_frame, cfg.trainable)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step: state.step as usize,
            what: "training loss".into(),
        });
    }
    state.step += 1;
    for (name, grad) in &grads {
        let param = state.model.param_mut(name).expect("gradient for a bound parameter");
        cfg.optimizer.update(name, param, grad, &mut state.optim, state.step);
    }
    state.losses.push(loss);
    Ok(loss)
}

/// Explicit Euler from `t = 0` to `t = 1`: `x ← x + u(x, k/steps)/steps`.
pub fn euler_integrate<T: Real>(
    x0: Array2<T>,
    steps: usize,
    mut field: impl FnMut(&Array2<T>, f64) -> Result<Array2<T>>,
) -> Result<Array2<T>> {
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let dt = T::lit(1.0 / steps as f64);
    let mut x = x0;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let u = field(&x, t)?;
        x.zip_mut_with(&u, |a, &b| *a += dt * b);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: k,
                what: "sampler state".into(),
            });
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub pin_first_frame: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            seed: 0,
            pin_first_frame: false,
        }
    }
}

/// Integrates the model's velocity field from seeded noise to clean video latents.
pub fn euler_sample<T: Real>(model: &Model<T>, cond: &Conditioning<'_, T>, sampler: &SamplerConfig) -> Result<Array2<T>> {
    let cfg = model.config();
    let shape = (cfg.video_tokens(), cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut x0 = standard_normal::<T>(shape, &mut rng);
    let pinned = if sampler.pin_first_frame {
        let g = cond.sequence.garment_rows();
        if g.nrows() != cfg.tokens_per_frame() {
            return Err(Error::Config("pinning frame 0 needs a frame-block garment".into()));
        }
        Some(g.to_owned())
    } else {
        None
    };
    let pin = |x: &mut Array2<T>| {
        if let Some(g) = &pinned {
            x.slice_mut(s![..g.nrows(), ..]).assign(g);
        }
    };
    pin(&mut x0);
    let mut out = euler_integrate(x0, sampler.steps, |x, t| {
        let mut x = x.clone();
        pin(&mut x);
        forward(model, &x, cond, t)
    })?;
    pin(&mut out);
    Ok(out)
}
