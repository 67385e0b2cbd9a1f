//! Command-line front end: dataset generation, training, sampling,
//! evaluation, the ablation matrix and efficiency profiling.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tryon_core::adapters::count_params;
use tryon_core::backbone::Model;
use tryon_core::efficiency::{render_table, scatter_csv};
use tryon_core::firstframe::{serve_request, FirstFrameEditor, IdentityEditor, OracleEditor};
use tryon_core::metrics::Setting;
use tryon_core::pipeline::{
    ablation_csv, conditioned_model, export_frames, loss_csv, pretrain_base, profile, run_ablation, run_eval,
    run_tryon, train_variant, write_json, write_text, Checkpoint, CheckpointConfig, LoadMode, RunConfig, Trace,
    TryonInputs, Variant,
};
use tryon_core::synthdata::{build_dataset, Dataset, DatasetDir};
use tryon_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tryon", version, about = "Single-branch video virtual try-on")]
struct Cli {
    /// JSON run config; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact root.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dataset directory or manifest; defaults to the config's manifest, then <out>/dataset.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset to <out>/dataset.
    GenData,
    /// Pretrain (or reuse) the backbone, then fine-tune one variant per seed.
    Train {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run try-on for one eval sample and export the video.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Garment id from the pool; defaults to the worn garment.
        #[arg(long)]
        garment: Option<u32>,
        #[arg(long)]
        merged: bool,
    },
    /// Paired or unpaired metrics over the eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "paired")]
        setting: String,
    },
    /// Train and evaluate every variant on every seed.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
    },
    /// Parameter and FLOPs report for the configured model.
    Profile {
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
    /// Serve one first-frame edit request directory with a built-in editor.
    ServeEditor {
        dir: PathBuf,
        #[arg(long, default_value = "oracle")]
        editor: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_path(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = &cli.data {
        return p.clone();
    }
    match (&cfg.train.manifest, &cli.config) {
        (Some(m), Some(c)) if m.is_relative() => c.parent().unwrap_or(Path::new(".")).join(m),
        (Some(m), _) => m.clone(),
        _ => cli.out.join("dataset"),
    }
}

fn load_dataset(cli: &Cli, cfg: &RunConfig) -> Result<Dataset> {
    let ds = DatasetDir::open(&dataset_path(cli, cfg))?.load_all()?;
    if ds.config != cfg.data {
        eprintln!("note: dataset was generated with a different data config than the run config");
    }
    Ok(ds)
}

fn base_model(cli: &Cli, cfg: &RunConfig, ds: &Dataset) -> Result<Model<f32>> {
    let dir = cli.out.join("checkpoints").join("base");
    if dir.join("config.json").exists() {
        let ckpt = Checkpoint::load(&dir, LoadMode::Adapters)?;
        if ckpt.config.model != cfg.model {
            return Err(Error::Config(format!("{} was trained for another model config", dir.display())));
        }
        return Ok(ckpt.model);
    }
    if cfg.pretrain.steps > 0 {
        eprintln!("pretraining backbone for {} steps", cfg.pretrain.steps);
    }
    let (model, losses) = pretrain_base(ds, cfg)?;
    Checkpoint {
        config: CheckpointConfig::for_run(cfg, None, Variant::NoBoth, cfg.pretrain.seed),
        model: model.clone(),
    }
    .save(&dir)?;
    if !losses.is_empty() {
        write_text(&cli.out.join("reports").join("pretrain_loss.csv"), &loss_csv(&losses))?;
    }
    Ok(model)
}

fn builtin_editor(name: &str) -> Result<Box<dyn FirstFrameEditor>> {
    match name {
        "oracle" => Ok(Box::new(OracleEditor)),
        "identity" => Ok(Box::new(IdentityEditor)),
        other => Err(Error::Config(format!("unknown built-in editor '{other}'"))),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let reports = cli.out.join("reports");
    match &cli.command {
        Command::ServeEditor { dir, editor } => serve_request(dir, builtin_editor(editor)?.as_ref()),
        Command::GenData => {
            let cfg = load_config(cli)?;
            let dir = cli.data.clone().unwrap_or_else(|| cli.out.join("dataset"));
            let manifest = build_dataset(&cfg.data, &dir)?;
            println!("wrote {} samples to {}", manifest.samples.len(), dir.display());
            Ok(())
        }
        Command::Train { variant, steps } => {
            let mut cfg = load_config(cli)?;
            if let Some(v) = variant {
                cfg.variant = *v;
            }
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            let ds = load_dataset(cli, &cfg)?;
            let base = base_model(cli, &cfg, &ds)?;
            let editor = cfg.editor.build();
            for &seed in &cfg.seeds {
                let dir = cli.out.join("checkpoints").join(format!("{}-seed{seed}", cfg.variant));
                let state = train_variant(&ds, &base, &cfg, cfg.variant, seed, editor.as_ref(), Some(&dir))?;
                let csv = reports.join(format!("loss-{}-seed{seed}.csv", cfg.variant));
                write_text(&csv, &loss_csv(&state.losses))?;
                if cfg.seeds.len() == 1 {
                    write_text(&reports.join("loss.csv"), &loss_csv(&state.losses))?;
                }
                println!("{}: {} steps, final loss {:.4}", dir.display(), state.step, state.losses.last().unwrap_or(&f64::NAN));
            }
            Ok(())
        }
        Command::Sample { checkpoint, sample, garment, merged } => {
            let cfg = load_config(cli)?;
            let mode = if *merged { LoadMode::Merged } else { LoadMode::Adapters };
            let ckpt = Checkpoint::load(checkpoint, mode)?;
            let ds = load_dataset(cli, &cfg)?;
            let s = ds
                .eval
                .get(*sample)
                .ok_or_else(|| Error::Config(format!("eval split has no sample {sample}")))?;
            let image = match garment {
                None => s.garment_image.clone(),
                Some(id) => ds.garment(*id).ok_or_else(|| Error::Config(format!("no garment {id} in the pool")))?.render(),
            };
            let opts = tryon_core::pipeline::TryonOptions {
                steps: cfg.sampler_steps,
                seed: cfg.seeds[0],
                variant: ckpt.config.variant,
                pin_first_frame: ckpt.config.train.pin_first_frame,
            };
            let editor = cfg.editor.build();
            let mut trace = Trace::default();
            let video = run_tryon(
                &ckpt.model,
                &ckpt.codec()?,
                &ckpt.text(),
                editor.as_ref(),
                &TryonInputs::from_sample(s, &image),
                &opts,
                &mut trace,
            )?;
            let dir = cli.out.join("samples").join(format!("sample{sample}"));
            std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
            video.save(&dir.join("video.tns"))?;
            let frames = export_frames(&video, &dir, "frame")?;
            println!("wrote {} frames to {}", frames.len(), dir.display());
            Ok(())
        }
        Command::Eval { checkpoint, setting } => {
            let cfg = load_config(cli)?;
            let setting = match setting.as_str() {
                "paired" => Setting::Paired,
                "unpaired" => Setting::Unpaired,
                other => return Err(Error::Config(format!("unknown setting '{other}'"))),
            };
            let ckpt = Checkpoint::load(checkpoint, LoadMode::Adapters)?;
            let ds = load_dataset(cli, &cfg)?;
            let run_cfg = RunConfig {
                variant: ckpt.config.variant,
                ..cfg.clone()
            };
            let out = run_eval(&ds, &ckpt.model, &run_cfg, cfg.editor.build().as_ref(), setting, cfg.seeds[0])?;
            out.write(&reports)?;
            println!(
                "{setting}: ssim {:.4} perc {:.4} fvd {:.4} over {} samples",
                out.report.ssim, out.report.perc, out.report.fvd, out.report.samples
            );
            Ok(())
        }
        Command::Ablate { variants } => {
            let cfg = load_config(cli)?;
            let ds = load_dataset(cli, &cfg)?;
            let base = base_model(cli, &cfg, &ds)?;
            let variants = variants.clone().unwrap_or_else(|| Variant::TABLE_ORDER.to_vec());
            let rows = run_ablation(&ds, &base, &cfg, &variants, &cfg.seeds, cfg.editor.build().as_ref())?;
            let csv = ablation_csv(&rows);
            write_text(&reports.join("ablation.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::Profile { runs } => {
            let cfg = load_config(cli)?;
            let base = tryon_core::backbone::init_model::<f32>(&cfg.model)?.base_only();
            let adapted = conditioned_model(&base, &cfg.lora, Variant::Full, cfg.seeds[0])?;
            let report = profile(&base, &adapted, *runs)?;
            write_json(&reports.join("efficiency.json"), &report)?;
            let table = render_table(&report);
            write_text(&reports.join("efficiency.txt"), &table)?;
            write_text(&reports.join("efficiency_scatter.csv"), &scatter_csv(&[("conditioned", &report)]))?;
            print!("{table}");
            let params = count_params(&adapted);
            println!(
                "{}",
                serde_json::to_string(&params.by_prefix).map_err(|e| Error::Runtime(e.to_string()))?
            );
            Ok(())
        }
    }
}
