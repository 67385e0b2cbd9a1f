//! Low-rank adapters on the transformer's projections, merging, and
//! parameter bookkeeping.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{is_base_param, is_lora_param, is_trainable_param, normal, param_rng, Model, ParamMap};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Projection kinds that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraSite {
    Q,
    K,
    V,
    O,
    FfnUp,
    FfnDown,
}

impl LoraSite {
    pub const ALL: [LoraSite; 6] = [
        LoraSite::Q,
        LoraSite::K,
        LoraSite::V,
        LoraSite::O,
        LoraSite::FfnUp,
        LoraSite::FfnDown,
    ];

    /// Layer paths inside a block.
    fn paths(self, cross_attention: bool) -> Vec<&'static str> {
        let (own, cross) = match self {
            LoraSite::Q => ("self_attn.q", Some("cross_attn.q")),
            LoraSite::K => ("self_attn.k", Some("cross_attn.k")),
            LoraSite::V => ("self_attn.v", Some("cross_attn.v")),
            LoraSite::O => ("self_attn.o", Some("cross_attn.o")),
            LoraSite::FfnUp => ("ffn.up", None),
            LoraSite::FfnDown => ("ffn.down", None),
        };
        match cross {
            Some(c) if cross_attention => vec![own, c],
            _ => vec![own],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub sites: Vec<LoraSite>,
    /// Also adapt the cross-attention projections of each selected attention site.
    pub cross_attention: bool,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            sites: LoraSite::ALL.to_vec(),
            cross_attention: false,
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(block, layer path)` for every adapted projection.
    pub fn targets(&self, blocks: usize) -> Vec<(usize, &'static str)> {
        let mut sites = self.sites.clone();
        sites.sort();
        sites.dedup();
        (0..blocks)
            .flat_map(|b| {
                sites
                    .iter()
                    .flat_map(move |s| s.paths(self.cross_attention).into_iter().map(move |p| (b, p)))
            })
            .collect()
    }
}

/// Factor pair for a host weight `d_in × d_out`; the delta is `A·Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Array2<T>,
    pub b: Array2<T>,
}

impl<T: Real> LoraAdapter<T> {
    /// `A ~ N(0, 1/r)`, `B = 0`.
    pub fn new(d_in: usize, d_out: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: normal((d_in, rank), 1.0 / (rank as f64).sqrt(), rng),
            b: Array2::zeros((d_out, rank)),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn delta(&self, scaling: f64) -> Array2<T> {
        self.a.dot(&self.b.t()) * T::lit(scaling)
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Adds zero-delta adapters at every selected site; base weights are left untouched.
pub fn attach_lora<T: Real>(model: &Model<T>, cfg: &LoraConfig) -> Result<Model<T>> {
    if model.has_lora() {
        return Err(Error::Config("model already carries adapters".into()));
    }
    if cfg.rank == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    let mut out = model.clone();
    for (block, path) in cfg.targets(model.config().blocks) {
        let host = format!("blocks.{block}.{path}");
        let (d_in, d_out) = model
            .param(&format!("{host}.weight"))
            .ok_or_else(|| Error::Config(format!("no projection '{host}'")))?
            .dim();
        if cfg.rank >= d_in.min(d_out) {
            return Err(Error::Config(format!(
                "rank not < min(d,k) at {host}: rank {} vs {d_in}x{d_out}",
                cfg.rank
            )));
        }
        let name = format!("lora.{block}.{path}");
        let adapter = LoraAdapter::<T>::new(d_in, d_out, cfg.rank, &mut param_rng(cfg.seed, &name));
        out.params.insert(format!("{name}.A"), adapter.a);
        out.params.insert(format!("{name}.B"), adapter.b);
    }
    out.lora = Some(cfg.clone());
    Ok(out)
}

/// Folds every adapter into its host weight and drops the factors.
pub fn merge_lora<T: Real>(model: &Model<T>) -> Model<T> {
    let mut out = model.clone();
    let Some(cfg) = model.lora_config() else {
        return out;
    };
    let scaling = cfg.scaling();
    for (name, a) in model.params().iter().filter(|(k, _)| is_lora_param(k) && k.ends_with(".A")) {
        let stem = &name["lora.".len()..name.len() - 2];
        let b = &model.params()[&format!("lora.{stem}.B")];
        let adapter = LoraAdapter { a: a.clone(), b: b.clone() };
        let (block, path) = stem.split_once('.').expect("adapter name has a block index");
        let host = out
            .params
            .get_mut(&format!("blocks.{block}.{path}.weight"))
            .expect("adapter host exists");
        *host += &adapter.delta(scaling);
    }
    out.params.retain(|k, _| !is_lora_param(k));
    out.lora = None;
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    /// Parameter count of the bare backbone for the same config.
    pub base: usize,
    pub added_over_base: usize,
    /// Totals by top-level name prefix.
    pub by_prefix: BTreeMap<String, usize>,
}

impl ParamReport {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Scalar count of a parameter map.
pub fn count_map<T>(params: &ParamMap<T>) -> usize {
    params.values().map(|a| a.len()).sum()
}

pub fn count_params<T: Real>(model: &Model<T>) -> ParamReport {
    let params = model.params();
    let total = count_map(params);
    let trainable = params
        .iter()
        .filter(|(k, _)| is_trainable_param(k))
        .map(|(_, a)| a.len())
        .sum();
    let base: usize = model.config().base_shapes().iter().map(|(_, (r, c))| r * c).sum();
    debug_assert_eq!(
        base,
        params.iter().filter(|(k, _)| is_base_param(k)).map(|(_, a)| a.len()).sum::<usize>()
    );
    let mut by_prefix = BTreeMap::new();
    for (k, a) in params {
        let prefix = k.split('.').next().unwrap_or(k).to_string();
        *by_prefix.entry(prefix).or_insert(0) += a.len();
    }
    ParamReport {
        total,
        trainable,
        base,
        added_over_base: total - base,
        by_prefix,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{forward, init_model, Conditioning, ModelConfig, TextStub};
    use crate::codec::{assemble_sequence, GarmentBlock, LatentFrames};
    use rand::SeedableRng;

    #[test]
    fn single_linear_count() {
        let mut m = ParamMap::<f32>::new();
        m.insert("layer.weight".into(), Array2::zeros((4, 3)));
        m.insert("layer.bias".into(), Array2::zeros((1, 3)));
        assert_eq!(count_map(&m), 15);
    }

    #[test]
    fn small_adapter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = LoraAdapter::<f32>::new(8, 8, 2, &mut rng);
        assert_eq!(a.param_count(), 32);
        assert!(a.b.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn qkv_on_four_blocks() {
        let model = init_model::<f32>(&ModelConfig::default()).unwrap();
        let cfg = LoraConfig {
            sites: vec![LoraSite::Q, LoraSite::K, LoraSite::V],
            ..LoraConfig::default()
        };
        let adapted = attach_lora(&model, &cfg).unwrap();
        let lora: usize = adapted.params().iter().filter(|(k, _)| is_lora_param(k)).map(|(_, a)| a.len()).sum();
        assert_eq!(lora, 6144);
        let report = count_params(&adapted);
        assert_eq!(report.by_prefix["lora"], 6144);
        assert_eq!(report.added_over_base, 6144 + report.by_prefix["guider"]);
    }

    #[test]
    fn full_rank_is_rejected() {
        let cfg = ModelConfig {
            width: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let model = init_model::<f32>(&cfg).unwrap();
        let err = attach_lora(&model, &LoraConfig { rank: 8, ..LoraConfig::default() }).unwrap_err();
        assert!(err.to_string().contains("rank not < min(d,k)"));
        assert!(err.to_string().contains("blocks.0.self_attn.q"));
    }

    #[test]
    fn fresh_merge_equals_base_and_merge_is_idempotent() {
        let model = init_model::<f32>(&ModelConfig::default()).unwrap();
        let adapted = attach_lora(&model, &LoraConfig::default()).unwrap();
        let merged = merge_lora(&adapted);
        assert_eq!(merged, model);
        assert_eq!(merge_lora(&merged), merged);
        assert!(attach_lora(&adapted, &LoraConfig::default()).is_err());
    }

    #[test]
    fn fresh_adapters_preserve_forward() {
        let cfg = ModelConfig {
            width: 16,
            blocks: 2,
            heads: 2,
            frames: 2,
            grid_h: 2,
            grid_w: 2,
            ..ModelConfig::default()
        };
        let model = init_model::<f64>(&cfg).unwrap();
        let adapted = attach_lora(
            &model,
            &LoraConfig {
                cross_attention: true,
                ..LoraConfig::default()
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = normal((8, 16), 1.0, &mut rng);
        let seq = assemble_sequence(
            &GarmentBlock {
                rows: normal((4, 16), 1.0, &mut rng),
                mode: cfg.garment_mode,
            },
            &LatentFrames {
                rows: normal((8, 16), 1.0, &mut rng),
                frames: 2,
                grid_h: 2,
                grid_w: 2,
            },
        )
        .unwrap();
        let text = TextStub::default_for(&cfg);
        let cond = Conditioning { sequence: &seq, text: &text, guider: None };
        assert_eq!(forward(&model, &x, &cond, 0.5).unwrap(), forward(&adapted, &x, &cond, 0.5).unwrap());
    }
}
