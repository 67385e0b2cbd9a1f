//! Analytic FLOPs and parameter overhead accounting.
//!
//! Convention: a multiply-add counts as 2 FLOPs. Matrix products count
//! `2·m·k·n`; a 3×3×3 convolution counts `2·out_voxels·c_in·c_out·27`.
//! Bias additions, residual additions, normalisation, softmax and
//! activations are not counted. Figures are per single forward pass over
//! the model's configured sequence.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{count_params, LoraConfig};
use crate::autograd::Conv3dGeom;
use crate::backbone::{Model, ModelConfig};
use crate::conditioning::guider_geometry;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * m as u64 * k as u64 * n as u64
}

pub fn conv3d_flops(geom: &Conv3dGeom) -> u64 {
    2 * geom.out_voxels() as u64 * geom.c_in as u64 * geom.c_out as u64 * 27
}

/// Q, K, V and output projections plus scores and weighted values for `n` tokens.
pub fn self_attention_flops(n: usize, d: usize) -> u64 {
    4 * matmul_flops(n, d, d) + 2 * matmul_flops(n, d, n)
}

/// FLOPs split by where they are spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub base: u64,
    pub guider: u64,
    /// Low-rank branches evaluated alongside their host projections.
    pub lora: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.base + self.guider + self.lora
    }
}

fn base_flops(cfg: &ModelConfig) -> u64 {
    let d = cfg.width;
    let nv = cfg.video_tokens();
    let g = cfg.garment_len();
    let n = cfg.sequence_len();
    let m = cfg.hidden();
    let mut f = 2 * matmul_flops(nv, d, d) + matmul_flops(g, d, d);
    f += 2 * matmul_flops(1, d, d);
    let per_block = matmul_flops(1, d, 4 * d)
        + self_attention_flops(n, d)
        + 2 * matmul_flops(n, d, d)
        + 2 * matmul_flops(1, d, d)
        + 2 * matmul_flops(n, d, 1)
        + matmul_flops(n, d, m)
        + matmul_flops(n, m, d);
    f += cfg.blocks as u64 * per_block;
    f + matmul_flops(1, d, 2 * d) + matmul_flops(nv, d, d)
}

fn guider_flops(cfg: &ModelConfig) -> Result<u64> {
    let geoms = guider_geometry(cfg)?;
    let convs: u64 = geoms.iter().map(conv3d_flops).sum();
    let last = geoms.last().expect("four layers");
    Ok(convs + matmul_flops(last.out_voxels(), last.c_out, cfg.width))
}

fn lora_flops(cfg: &ModelConfig, lora: &LoraConfig) -> u64 {
    let d = cfg.width;
    let n = cfg.sequence_len();
    let r = lora.rank;
    lora.targets(cfg.blocks)
        .into_iter()
        .map(|(_, path)| {
            let (rows, d_in, d_out) = match path {
                "ffn.up" => (n, d, cfg.hidden()),
                "ffn.down" => (n, cfg.hidden(), d),
                "cross_attn.k" | "cross_attn.v" => (1, d, d),
                _ => (n, d, d),
            };
            matmul_flops(rows, d_in, r) + matmul_flops(rows, r, d_out)
        })
        .sum()
}

/// FLOPs of one forward pass with the given conditioning attached.
pub fn estimate_flops(cfg: &ModelConfig, guider: bool, lora: Option<&LoraConfig>) -> Result<FlopsBreakdown> {
    cfg.validate()?;
    Ok(FlopsBreakdown {
        base: base_flops(cfg),
        guider: if guider { guider_flops(cfg)? } else { 0 },
        lora: lora.map(|l| lora_flops(cfg, l)).unwrap_or(0),
    })
}

pub fn model_flops<T: Real>(model: &Model<T>) -> Result<FlopsBreakdown> {
    let lora = if model.has_lora() { model.lora_config() } else { None };
    estimate_flops(model.config(), model.has_guider(), lora)
}

/// `(total - base) / base`, in percent.
pub fn overhead_pct(base: f64, total: f64) -> f64 {
    (total - base) / base * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub base_params: usize,
    pub total_params: usize,
    pub trainable_params: usize,
    pub added_over_base_pct: f64,
    pub trainable_pct: f64,
    pub flops_base: u64,
    /// Inference model: adapters merged, guider attached.
    pub flops_conditioned: u64,
    pub flops_overhead_pct: f64,
    /// Training-time model with unmerged adapter branches.
    pub flops_adapter_path: u64,
    pub adapter_path_overhead_pct: f64,
    pub breakdown: FlopsBreakdown,
    /// Tokens in the sequence and model width the FLOPs refer to.
    pub input_shape: (usize, usize),
    pub wall_time_per_step: Option<f64>,
    pub environment: String,
}

/// Median wall time of `runs` calls after `warmups` discarded calls.
pub fn median_wall_time(warmups: usize, runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmups {
        f()?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.total_cmp(b));
    Ok(times[times.len() / 2])
}

pub fn environment_tag() -> String {
    format!(
        "{}-{} threads={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    )
}

/// Compares a conditioned, adapted model against the bare backbone it was built from.
pub fn build_report<T: Real>(base: &Model<T>, adapted: &Model<T>, wall_time_per_step: Option<f64>) -> Result<EfficiencyReport> {
    if base.config() != adapted.config() {
        return Err(Error::Config("base and conditioned models use different model configs".into()));
    }
    let base_count = count_params(base);
    let params = count_params(adapted);
    let flops = model_flops(adapted)?;
    let flops_base = estimate_flops(base.config(), false, None)?.base;
    let conditioned = flops.base + flops.guider;
    let cfg = adapted.config();
    Ok(EfficiencyReport {
        base_params: base_count.base,
        total_params: params.total,
        trainable_params: params.trainable,
        added_over_base_pct: overhead_pct(params.base as f64, params.total as f64),
        trainable_pct: params.trainable as f64 / params.total as f64 * 100.0,
        flops_base,
        flops_conditioned: conditioned,
        flops_overhead_pct: overhead_pct(flops_base as f64, conditioned as f64),
        flops_adapter_path: flops.total(),
        adapter_path_overhead_pct: overhead_pct(flops_base as f64, flops.total() as f64),
        breakdown: flops,
        input_shape: (cfg.sequence_len(), cfg.width),
        wall_time_per_step,
        environment: environment_tag(),
    })
}

/// Text table with one row for the backbone and one for the conditioned model.
pub fn render_table(report: &EfficiencyReport) -> String {
    let mut out = String::new();
    let secs = |s: Option<f64>| s.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    let _ = writeln!(
        out,
        "{:<12} {:>12} {:>10} {:>16} {:>16}",
        "Method", "FLOPs(G)", "s/it", "Inference Param", "Training Param"
    );
    let _ = writeln!(
        out,
        "{:<12} {:>12.6} {:>10} {:>16} {:>16}",
        "base",
        report.flops_base as f64 / 1e9,
        "-",
        report.base_params,
        report.base_params
    );
    let _ = writeln!(
        out,
        "{:<12} {:>12.6} {:>10} {:>16} {:>16}",
        "conditioned",
        report.flops_conditioned as f64 / 1e9,
        secs(report.wall_time_per_step),
        report.total_params,
        report.trainable_params
    );
    let _ = writeln!(
        out,
        "added params {:.4}%  trainable {:.4}%  FLOPs overhead {:.4}% (adapter path {:.4}%)",
        report.added_over_base_pct, report.trainable_pct, report.flops_overhead_pct, report.adapter_path_overhead_pct
    );
    out
}

/// Scatter data: training vs inference params, FLOPs vs the backbone.
pub fn scatter_csv(rows: &[(&str, &EfficiencyReport)]) -> String {
    let mut out = String::from("method,inference_params,training_params,flops,flops_base\n");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{name},{},{},{},{}",
            r.total_params, r.trainable_params, r.flops_conditioned, r.flops_base
        );
    }
    out
}
