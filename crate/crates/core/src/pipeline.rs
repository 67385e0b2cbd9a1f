//! End-to-end orchestration: base pretraining, adapter fine-tuning,
//! checkpoints, try-on inference, paired/unpaired evaluation, the
//! component ablation and artifact export.
//!
//! Checkpoint layout:
//!
//! ```text
//! <dir>/config.json          CheckpointConfig
//! <dir>/weights/<name>.tns   one file per parameter
//! <dir>/train_state.json     step, losses, path RNG (optional)
//! <dir>/optim/{m,v}/<name>.tns
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapters::{attach_lora, merge_lora, LoraConfig};
use crate::backbone::{forward, init_model, Conditioning, Model, ModelConfig, ParamMap, TextStub, DEFAULT_INSTRUCTION};
use crate::codec::{assemble_sequence, Codec, CodecParams, LatentFrames};
use crate::conditioning::{attach_guider, guider_forward, guider_input};
use crate::efficiency::{build_report, median_wall_time, EfficiencyReport};
use crate::error::{Error, Result};
use crate::firstframe::{plug_editor, validate_result, EditorRequest, FirstFrameEditor, IdentityEditor, OracleEditor};
use crate::flowmatch::{
    euler_sample, standard_normal, training_step, AdamW, OptimState, RngState, SamplerConfig, TrainConfig, TrainExample,
    TrainState, Trainable,
};
use crate::metrics::{evaluate_sets, MetricsReport, Setting};
use crate::synthdata::{Dataset, GenerationConfig, Quad, Sample};
use crate::tensor::{read_tns, write_tns, VideoTensor};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_DIR: &str = "weights";
pub const STATE_FILE: &str = "train_state.json";
pub const OPTIM_DIR: &str = "optim";
pub const CHECKPOINT_VERSION: &str = "1";

/// Trailing window of the smoothed loss curve.
pub const LOSS_WINDOW: usize = 50;

/// Which conditioning signals a run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoPose,
    NoAgnostic,
    NoBoth,
}

impl Variant {
    /// Row order of the ablation table.
    pub const TABLE_ORDER: [Variant; 4] = [Variant::NoBoth, Variant::NoPose, Variant::NoAgnostic, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPose => "no_pose",
            Variant::NoAgnostic => "no_agnostic",
            Variant::NoBoth => "no_both",
        }
    }

    pub fn uses_pose(self) -> bool {
        matches!(self, Variant::Full | Variant::NoAgnostic)
    }

    pub fn uses_guider(self) -> bool {
        matches!(self, Variant::Full | Variant::NoPose)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::TABLE_ORDER
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// First-frame editor selection in a run config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditorSpec {
    #[default]
    Oracle,
    Identity,
    Process {
        name: String,
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

impl EditorSpec {
    pub fn build(&self) -> Box<dyn FirstFrameEditor> {
        match self {
            EditorSpec::Oracle => Box::new(OracleEditor),
            EditorSpec::Identity => Box::new(IdentityEditor),
            EditorSpec::Process { name, program, args } => {
                let args: Vec<&str> = args.iter().map(String::as_str).collect();
                Box::new(plug_editor(name, program, &args))
            }
        }
    }
}

/// Optional full-parameter image-to-video pretraining of the frozen backbone.
/// With `steps == 0` the seeded initialisation is used as the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            lr: 5e-4,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: GenerationConfig,
    pub model: ModelConfig,
    pub codec: CodecParams,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub sampler_steps: usize,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub instruction: String,
    pub feature_seed: u64,
    /// Seed of the unpaired garment derangement.
    pub unpaired_seed: u64,
    pub editor: EditorSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: GenerationConfig::default(),
            model: ModelConfig::default(),
            codec: CodecParams::default(),
            lora: LoraConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            sampler_steps: 10,
            variant: Variant::Full,
            seeds: vec![0, 1, 2],
            instruction: DEFAULT_INSTRUCTION.into(),
            feature_seed: 0,
            unpaired_seed: 0,
            editor: EditorSpec::Oracle,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-checks the dataset, codec and model geometry.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        let (m, c, d) = (&self.model, &self.codec, &self.data);
        if c.patch_size != m.patch_size || c.width != m.width || c.channels != m.channels || c.mode != m.garment_mode {
            return Err(Error::Config("codec params disagree with the model config".into()));
        }
        if d.patch_size != m.patch_size
            || d.num_frames != m.frames
            || d.height != m.grid_h * m.patch_size
            || d.width != m.grid_w * m.patch_size
        {
            return Err(Error::Config(format!(
                "dataset {}x{}x{} does not tile into the model grid {}x{}x{} with patch {}",
                d.num_frames, d.height, d.width, m.frames, m.grid_h, m.grid_w, m.patch_size
            )));
        }
        self.codec()?;
        if self.sampler_steps == 0 {
            return Err(Error::Config("sampler_steps must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn codec(&self) -> Result<Codec<f32>> {
        Codec::new(self.codec.clone())
    }

    pub fn text(&self) -> TextStub {
        TextStub::new(&self.instruction, self.model.text_vocab)
    }

    pub fn tryon_options(&self, seed: u64) -> TryonOptions {
        TryonOptions {
            steps: self.sampler_steps,
            seed,
            variant: self.variant,
            pin_first_frame: self.train.pin_first_frame,
        }
    }
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Everything needed to rebuild a model and its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub format_version: String,
    pub model: ModelConfig,
    pub codec: CodecParams,
    pub lora: Option<LoraConfig>,
    pub train: TrainConfig,
    pub variant: Variant,
    pub instruction: String,
    pub seed: u64,
}

impl CheckpointConfig {
    pub fn for_run(cfg: &RunConfig, lora: Option<LoraConfig>, variant: Variant, seed: u64) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION.into(),
            model: cfg.model.clone(),
            codec: cfg.codec.clone(),
            lora,
            train: cfg.train.clone(),
            variant,
            instruction: cfg.instruction.clone(),
            seed,
        }
    }
}

/// How adapters are materialised on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Keep `A`, `B` factors as separate parameters.
    #[default]
    Adapters,
    /// Fold every adapter into its host weight.
    Merged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub model: Model<f32>,
}

fn write_params(dir: &Path, params: &ParamMap<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, value) in params {
        write_tns(&dir.join(format!("{name}.tns")), &value.view().into_dyn())?;
    }
    Ok(())
}

fn read_params(dir: &Path) -> Result<ParamMap<f32>> {
    let mut params = ParamMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".tns")) else {
            continue;
        };
        let value = read_tns(&path)?.into_dimensionality::<Ix2>().map_err(|_| Error::Format {
            path: path.clone(),
            reason: "parameters must be 2-D".into(),
        })?;
        params.insert(name.to_string(), value);
    }
    Ok(params)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(CONFIG_FILE), &self.config)?;
        let weights = dir.join(WEIGHTS_DIR);
        if weights.exists() {
            fs::remove_dir_all(&weights).map_err(|e| Error::io(&weights, e))?;
        }
        write_params(&weights, self.model.params())
    }

    pub fn load(dir: &Path, mode: LoadMode) -> Result<Self> {
        let config: CheckpointConfig = read_json(&dir.join(CONFIG_FILE))?;
        if config.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: dir.join(CONFIG_FILE),
                reason: format!("unsupported checkpoint version {:?}", config.format_version),
            });
        }
        let params = read_params(&dir.join(WEIGHTS_DIR))?;
        let mut model = Model::from_parts(config.model.clone(), config.lora.clone(), params)?;
        if mode == LoadMode::Merged {
            model = merge_lora(&model);
        }
        Ok(Self { config, model })
    }

    pub fn codec(&self) -> Result<Codec<f32>> {
        Codec::new(self.config.codec.clone())
    }

    pub fn text(&self) -> TextStub {
        TextStub::new(&self.config.instruction, self.config.model.text_vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateFile {
    step: u64,
    losses: Vec<f64>,
    rng: RngState,
}

/// Writes a resumable training checkpoint: weights, optimizer moments and RNG position.
pub fn save_training(dir: &Path, config: &CheckpointConfig, state: &TrainState<f32>) -> Result<()> {
    Checkpoint {
        config: config.clone(),
        model: state.model.clone(),
    }
    .save(dir)?;
    write_json(
        &dir.join(STATE_FILE),
        &StateFile {
            step: state.step,
            losses: state.losses.clone(),
            rng: RngState::capture(&state.rng),
        },
    )?;
    let optim = dir.join(OPTIM_DIR);
    if optim.exists() {
        fs::remove_dir_all(&optim).map_err(|e| Error::io(&optim, e))?;
    }
    write_params(&optim.join("m"), &state.optim.m)?;
    write_params(&optim.join("v"), &state.optim.v)
}

pub fn load_training(dir: &Path) -> Result<(CheckpointConfig, TrainState<f32>)> {
    let ckpt = Checkpoint::load(dir, LoadMode::Adapters)?;
    let state: StateFile = read_json(&dir.join(STATE_FILE))?;
    let optim = dir.join(OPTIM_DIR);
    let moments = |sub: &str| {
        let p = optim.join(sub);
        if p.exists() {
            read_params(&p)
        } else {
            Ok(ParamMap::new())
        }
    };
    Ok((
        ckpt.config,
        TrainState {
            model: ckpt.model,
            optim: OptimState {
                m: moments("m")?,
                v: moments("v")?,
            },
            step: state.step,
            losses: state.losses,
            rng: state.rng.restore(),
        },
    ))
}

fn torso_quad(sample: &Sample) -> Option<Quad> {
    sample.scene.torso_quads.first().copied()
}

/// Encodes one training pair; the garment block comes from an edit of frame 0 with the worn garment.
pub fn training_example(
    sample: &Sample,
    codec: &Codec<f32>,
    text: &TextStub,
    variant: Variant,
    editor: &dyn FirstFrameEditor,
) -> Result<TrainExample<f32>> {
    let request = EditorRequest {
        first_frame: sample.source_video.frame(0).to_owned(),
        instruction: text.instruction.clone(),
        garment: sample.garment_image.clone(),
        torso_quad: torso_quad(sample),
    };
    let edited = editor.edit(&request)?;
    validate_result(&request, &edited)?;
    let mut pose = codec.encode_video(&sample.pose_video)?;
    if !variant.uses_pose() {
        pose.rows.fill(0.0);
    }
    Ok(TrainExample {
        garment: codec.encode_image(edited.edited.view(), codec.params().mode)?,
        pose,
        target: codec.encode_video(&sample.source_video)?,
        guider_input: guider_input(&sample.agnostic_video, &sample.agnostic_mask)?,
        text: text.clone(),
    })
}

pub fn training_examples(
    dataset: &Dataset,
    codec: &Codec<f32>,
    text: &TextStub,
    variant: Variant,
    editor: &dyn FirstFrameEditor,
) -> Result<Vec<TrainExample<f32>>> {
    if dataset.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    dataset
        .train
        .iter()
        .map(|s| training_example(s, codec, text, variant, editor))
        .collect()
}

/// Runs steps until `state.step == until`, cycling through `examples` in order.
pub fn train_until(
    state: &mut TrainState<f32>,
    examples: &[TrainExample<f32>],
    train: &TrainConfig,
    until: usize,
    mut checkpoint: Option<(&Path, &CheckpointConfig)>,
) -> Result<()> {
    while (state.step as usize) < until {
        let example = &examples[state.step as usize % examples.len()];
        training_step(state, example, train)?;
        if let Some((dir, cfg)) = checkpoint.as_mut() {
            let step = state.step as usize;
            if step == until || (train.checkpoint_interval > 0 && step % train.checkpoint_interval == 0) {
                save_training(dir, cfg, state)?;
            }
        }
    }
    Ok(())
}

/// Image-to-video pretraining of every backbone weight: the garment slot
/// carries the clean first frame, the pose slot is zero and no guider is attached.
pub fn pretrain_base(dataset: &Dataset, cfg: &RunConfig) -> Result<(Model<f32>, Vec<f64>)> {
    let codec = cfg.codec()?;
    let text = cfg.text();
    let model = init_model::<f32>(&cfg.model)?.base_only();
    if cfg.pretrain.steps == 0 {
        return Ok((model, Vec::new()));
    }
    let examples = training_examples(dataset, &codec, &text, Variant::NoBoth, &IdentityEditor)?;
    let train = TrainConfig {
        trainable: Trainable::Everything,
        optimizer: AdamW {
            lr: cfg.pretrain.lr,
            weight_decay: 0.0,
            ..cfg.train.optimizer
        },
        checkpoint_interval: 0,
        ..cfg.train.clone()
    };
    let mut state = TrainState::new(model, cfg.pretrain.seed);
    train_until(&mut state, &examples, &train, cfg.pretrain.steps, None)?;
    Ok((state.model, state.losses))
}

/// Pretrained backbone plus a fresh guider and adapters drawn from `seed`.
pub fn conditioned_model(base: &Model<f32>, lora: &LoraConfig, variant: Variant, seed: u64) -> Result<Model<f32>> {
    let base = base.base_only();
    let with_guider = if variant.uses_guider() { attach_guider(&base, seed)? } else { base };
    attach_lora(&with_guider, &LoraConfig { seed, ..lora.clone() })
}

/// Fine-tunes adapters, guider and text embedding for one variant and seed.
pub fn train_variant(
    dataset: &Dataset,
    base: &Model<f32>,
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
    editor: &dyn FirstFrameEditor,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainState<f32>> {
    let codec = cfg.codec()?;
    let examples = training_examples(dataset, &codec, &cfg.text(), variant, editor)?;
    let model = conditioned_model(base, &cfg.lora, variant, seed)?;
    let ckpt_cfg = CheckpointConfig::for_run(cfg, Some(LoraConfig { seed, ..cfg.lora.clone() }), variant, seed);
    let mut state = TrainState::new(model, seed);
    let train = TrainConfig {
        trainable: Trainable::Adapters,
        ..cfg.train.clone()
    };
    train_until(&mut state, &examples, &train, cfg.train.steps, checkpoint_dir.map(|d| (d, &ckpt_cfg)))?;
    Ok(state)
}

/// Trailing mean over at most `window` losses ending at each step.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        sum += l;
        if i >= window {
            sum -= losses[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Mean of the first `window` losses and of the last `window` losses.
pub fn loss_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    if losses.is_empty() {
        return None;
    }
    let w = window.clamp(1, losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss,smoothed\n");
    for (i, (l, s)) in losses.iter().zip(smoothed(losses, LOSS_WINDOW)).enumerate() {
        let _ = writeln!(out, "{},{l},{s}", i + 1);
    }
    out
}

/// Person-side inputs of one try-on request.
#[derive(Debug, Clone, Copy)]
pub struct TryonInputs<'a> {
    pub source: &'a VideoTensor,
    pub pose: &'a VideoTensor,
    pub agnostic: &'a VideoTensor,
    pub mask: &'a VideoTensor,
    pub garment: &'a Array3<f32>,
    pub torso_quad: Option<Quad>,
}

impl<'a> TryonInputs<'a> {
    pub fn from_sample(sample: &'a Sample, garment: &'a Array3<f32>) -> Self {
        Self {
            source: &sample.source_video,
            pose: &sample.pose_video,
            agnostic: &sample.agnostic_video,
            mask: &sample.agnostic_mask,
            garment,
            torso_quad: torso_quad(sample),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TryonOptions {
    pub steps: usize,
    pub seed: u64,
    pub variant: Variant,
    pub pin_first_frame: bool,
}

impl Default for TryonOptions {
    fn default() -> Self {
        Self {
            steps: 10,
            seed: 0,
            variant: Variant::Full,
            pin_first_frame: false,
        }
    }
}

/// Instrumentation filled in by [`run_tryon`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub editor_calls: usize,
    pub assemble_calls: usize,
    pub stages: Vec<&'static str>,
}

/// Edit frame 0 once, encode the conditioning, sample and decode.
pub fn run_tryon(
    model: &Model<f32>,
    codec: &Codec<f32>,
    text: &TextStub,
    editor: &dyn FirstFrameEditor,
    inputs: &TryonInputs<'_>,
    opts: &TryonOptions,
    trace: &mut Trace,
) -> Result<VideoTensor> {
    let stage = |name: &'static str, trace: &mut Trace| trace.stages.push(name);

    stage("edit", trace);
    let request = EditorRequest {
        first_frame: inputs.source.frame(0).to_owned(),
        instruction: text.instruction.clone(),
        garment: inputs.garment.clone(),
        torso_quad: inputs.torso_quad,
    };
    trace.editor_calls += 1;
    let edited = editor
        .edit(&request)
        .and_then(|r| validate_result(&request, &r).map(|_| r))
        .map_err(|e| e.in_stage("edit"))?;

    stage("encode_image", trace);
    let garment = codec
        .encode_image(edited.edited.view(), model.config().garment_mode)
        .map_err(|e| e.in_stage("encode_image"))?;

    stage("encode_pose", trace);
    let mut pose = codec.encode_video(inputs.pose).map_err(|e| e.in_stage("encode_pose"))?;
    if !opts.variant.uses_pose() {
        pose.rows.fill(0.0);
    }

    stage("assemble", trace);
    trace.assemble_calls += 1;
    let sequence = assemble_sequence(&garment, &pose).map_err(|e| e.in_stage("assemble"))?;

    stage("guider", trace);
    let features = if opts.variant.uses_guider() && model.has_guider() {
        Some(guider_forward(model, inputs.agnostic, inputs.mask).map_err(|e| e.in_stage("guider"))?)
    } else {
        None
    };

    stage("sample", trace);
    let cond = Conditioning {
        sequence: &sequence,
        text,
        guider: features.as_ref(),
    };
    let sampler = SamplerConfig {
        steps: opts.steps,
        seed: opts.seed,
        pin_first_frame: opts.pin_first_frame,
    };
    let latents = euler_sample(model, &cond, &sampler).map_err(|e| e.in_stage("sample"))?;

    stage("decode", trace);
    let frames = LatentFrames {
        rows: latents,
        frames: pose.frames,
        grid_h: pose.grid_h,
        grid_w: pose.grid_w,
    };
    let video = codec.decode_video(&frames).map_err(|e| e.in_stage("decode"))?;
    if video.dims() != inputs.source.dims() {
        return Err(Error::Shape(format!("decoded {:?} but source is {:?}", video.dims(), inputs.source.dims()))
            .in_stage("decode"));
    }
    Ok(video.clamped())
}

/// A seeded cyclic permutation of the garment ids: no id maps to itself.
pub fn unpaired_mapping(ids: &[u32], seed: u64) -> Result<BTreeMap<u32, u32>> {
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Config("unpaired evaluation needs at least two garments".into()));
    }
    let mut perm = ids.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..perm.len()).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    Ok(ids.into_iter().zip(perm).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub index: usize,
    pub g_worn: u32,
    pub garment: u32,
    pub ssim: f64,
    pub perc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub rows: Vec<SampleScore>,
}

impl EvalOutput {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("index,g_worn,garment,ssim,perc\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.index, r.g_worn, r.garment, r.ssim, r.perc);
        }
        out
    }

    /// Writes `report.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("report.json"), &self.report)?;
        write_text(&dir.join("metrics.csv"), &self.metrics_csv())
    }
}

/// Scores the eval split with any video generator.
///
/// `generate(sample, garment_id, garment_image, seed)` is called once per
/// eval sample, in order, with seed `base_seed + index`.
pub fn evaluate_with(
    dataset: &Dataset,
    setting: Setting,
    unpaired_seed: u64,
    feature_seed: u64,
    base_seed: u64,
    mut generate: impl FnMut(&Sample, u32, &Array3<f32>, u64) -> Result<VideoTensor>,
) -> Result<EvalOutput> {
    if dataset.eval.is_empty() {
        return Err(Error::Config("eval split is empty".into()));
    }
    let mapping = match setting {
        Setting::Paired => None,
        Setting::Unpaired => Some(unpaired_mapping(
            &dataset.pool.iter().map(|g| g.garment_id).collect::<Vec<_>>(),
            unpaired_seed,
        )?),
    };
    let mut generated = Vec::with_capacity(dataset.eval.len());
    let mut references = Vec::with_capacity(dataset.eval.len());
    let mut pairs = Vec::with_capacity(dataset.eval.len());
    for (i, sample) in dataset.eval.iter().enumerate() {
        let garment = mapping.as_ref().map_or(sample.g_worn, |m| m[&sample.g_worn]);
        let image = match setting {
            Setting::Paired => sample.garment_image.clone(),
            Setting::Unpaired => dataset
                .garment(garment)
                .ok_or_else(|| Error::Config(format!("garment {garment} missing from the pool")))?
                .render(),
        };
        let reference = sample
            .truth_videos
            .get(&garment)
            .ok_or_else(|| Error::Config(format!("sample {i} has no ground truth for garment {garment}")))?;
        generated.push(generate(sample, garment, &image, base_seed + i as u64)?);
        references.push(reference.clone());
        pairs.push((sample.g_worn, garment));
    }
    let (report, scores) = evaluate_sets(&generated, &references, setting, feature_seed)?;
    let rows = scores
        .into_iter()
        .zip(pairs)
        .enumerate()
        .map(|(index, ((ssim, perc), (g_worn, garment)))| SampleScore {
            index,
            g_worn,
            garment,
            ssim,
            perc,
        })
        .collect();
    Ok(EvalOutput { report, rows })
}

/// Evaluates a checkpointed model through the full try-on pipeline.
pub fn run_eval(
    dataset: &Dataset,
    model: &Model<f32>,
    cfg: &RunConfig,
    editor: &dyn FirstFrameEditor,
    setting: Setting,
    seed: u64,
) -> Result<EvalOutput> {
    let codec = cfg.codec()?;
    let text = cfg.text();
    let opts = cfg.tryon_options(seed);
    evaluate_with(dataset, setting, cfg.unpaired_seed, cfg.feature_seed, seed, |sample, _, garment, s| {
        let inputs = TryonInputs::from_sample(sample, garment);
        run_tryon(model, &codec, &text, editor, &inputs, &TryonOptions { seed: s, ..opts }, &mut Trace::default())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub ssim: f64,
    pub perc: f64,
    pub fvd: f64,
}

/// Trains and evaluates every variant on every seed with the same budget and data order.
pub fn run_ablation(
    dataset: &Dataset,
    base: &Model<f32>,
    cfg: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    editor: &dyn FirstFrameEditor,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut rows = Vec::new();
    for &variant in variants {
        let run = RunConfig {
            variant,
            ..cfg.clone()
        };
        for &seed in seeds {
            let state = train_variant(dataset, base, &run, variant, seed, editor, None)?;
            let eval = run_eval(dataset, &state.model, &run, editor, Setting::Paired, seed)?;
            rows.push(AblationRow {
                variant,
                seed,
                steps: state.step as usize,
                final_loss: loss_endpoints(&state.losses, LOSS_WINDOW).map_or(f64::NAN, |e| e.1),
                ssim: eval.report.ssim,
                perc: eval.report.perc,
                fvd: eval.report.fvd,
            });
        }
    }
    rows.sort_by_key(|r| {
        let pos = Variant::TABLE_ORDER.iter().position(|v| *v == r.variant);
        (pos, r.seed)
    });
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,steps,final_loss,ssim,perc,fvd\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant, r.seed, r.steps, r.final_loss, r.ssim, r.perc, r.fvd
        );
    }
    out
}

/// Efficiency report with the wall time of one conditioned forward pass.
pub fn profile(base: &Model<f32>, adapted: &Model<f32>, runs: usize) -> Result<EfficiencyReport> {
    let cfg = adapted.config();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lat = |rows: usize, rng: &mut ChaCha8Rng| standard_normal::<f32>((rows, cfg.width), rng);
    let x = lat(cfg.video_tokens(), &mut rng);
    let pose = LatentFrames {
        rows: lat(cfg.video_tokens(), &mut rng),
        frames: cfg.frames,
        grid_h: cfg.grid_h,
        grid_w: cfg.grid_w,
    };
    let garment = crate::codec::GarmentBlock {
        rows: lat(cfg.garment_len(), &mut rng),
        mode: cfg.garment_mode,
    };
    let sequence = assemble_sequence(&garment, &pose)?;
    let text = TextStub::default_for(cfg);
    let (h, w) = (cfg.grid_h * cfg.patch_size, cfg.grid_w * cfg.patch_size);
    let agnostic = VideoTensor::zeros(cfg.frames, cfg.channels, h, w);
    let mask = VideoTensor::zeros(cfg.frames, 1, h, w);
    let wall = median_wall_time(2, runs.max(5), || {
        let features: Option<Array2<f32>> = if adapted.has_guider() {
            Some(guider_forward(adapted, &agnostic, &mask)?)
        } else {
            None
        };
        let cond = Conditioning {
            sequence: &sequence,
            text: &text,
            guider: features.as_ref(),
        };
        forward(adapted, &x, &cond, 0.5).map(|_| ())
    })?;
    build_report(base, adapted, Some(wall))
}

/// Writes a video as 8-bit PGM (1 channel) or PPM (3 channels) frames `<stem>_<f>.p?m`.
pub fn export_frames(video: &VideoTensor, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let (f, c, h, w) = video.dims();
    let (magic, ext) = match c {
        1 => ("P5", "pgm"),
        3 => ("P6", "ppm"),
        _ => return Err(Error::Shape(format!("cannot export {c}-channel frames"))),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let a = video.array();
    let mut paths = Vec::with_capacity(f);
    for fi in 0..f {
        let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    bytes.push(to_byte(a[[fi, ci, y, x]]));
                }
            }
        }
        let path = dir.join(format!("{stem}_{fi:03}.{ext}"));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn to_byte(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}
