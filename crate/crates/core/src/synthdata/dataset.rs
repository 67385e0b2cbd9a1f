//! On-disk dataset: `.tns` tensors plus a JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::garment::{garment_pool, GarmentSpec};
use super::render::{render_sample, Sample};
use super::scene::{make_scene, GenerationConfig, SceneSpec};
use crate::error::{Error, Result};
use crate::tensor::{read_tns, write_tns, VideoTensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub source: String,
    pub pose: String,
    pub agnostic: String,
    pub mask: String,
    pub garment: String,
    pub truth: BTreeMap<u32, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub split: Split,
    pub g_worn: u32,
    pub scene: SceneSpec,
    pub files: SampleFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentRecord {
    pub spec: GarmentSpec,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    /// Dataset root relative to the manifest file.
    pub root: String,
    pub config: GenerationConfig,
    pub garments: Vec<GarmentRecord>,
    pub samples: Vec<SampleRecord>,
}

/// An in-memory dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: GenerationConfig,
    pub pool: Vec<GarmentSpec>,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    pub fn garment(&self, id: u32) -> Option<&GarmentSpec> {
        self.pool.iter().find(|g| g.garment_id == id)
    }
}

/// Per-sample `(scene seed, worn garment)` stream; a pure function of the config.
fn sample_plan(config: &GenerationConfig) -> Vec<(u64, u32, Split)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total = config.train_samples + config.eval_samples;
    (0..total)
        .map(|i| {
            let scene_seed = rng.random::<u64>();
            let worn = rng.random_range(0..config.pool_size as u32);
            let split = if i < config.train_samples { Split::Train } else { Split::Eval };
            (scene_seed, worn, split)
        })
        .collect()
}

/// Generates every sample in memory.
pub fn generate(config: &GenerationConfig) -> Result<Dataset> {
    config.validate()?;
    let pool = garment_pool(config.pool_size, config.garment_size, config.garment_size);
    let mut train = Vec::with_capacity(config.train_samples);
    let mut eval = Vec::with_capacity(config.eval_samples);
    for (scene_seed, worn, split) in sample_plan(config) {
        let scene = make_scene(config, scene_seed)?;
        let sample = render_sample(&scene, &pool[worn as usize], &pool, config.mask_margin)?;
        match split {
            Split::Train => train.push(sample),
            Split::Eval => eval.push(sample),
        }
    }
    Ok(Dataset {
        config: config.clone(),
        pool,
        train,
        eval,
    })
}

fn write_video(dir: &Path, rel: &str, v: &VideoTensor) -> Result<String> {
    v.save(&dir.join(rel))?;
    Ok(rel.to_string())
}

fn write_image(dir: &Path, rel: &str, img: &Array3<f32>) -> Result<String> {
    write_tns(&dir.join(rel), &img.view().into_dyn())?;
    Ok(rel.to_string())
}

/// Renders the dataset and writes tensors plus `manifest.json` under `out_dir`.
pub fn build_dataset(config: &GenerationConfig, out_dir: &Path) -> Result<Manifest> {
    let data = generate(config)?;
    fs::create_dir_all(out_dir.join("garments")).map_err(|e| Error::io(out_dir.join("garments"), e))?;
    let garments = data
        .pool
        .iter()
        .map(|g| {
            let file = write_image(out_dir, &format!("garments/garment_{:02}.tns", g.garment_id), &g.render())?;
            Ok(GarmentRecord { spec: g.clone(), file })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut samples = Vec::new();
    let all = data.train.iter().map(|s| (s, Split::Train)).chain(data.eval.iter().map(|s| (s, Split::Eval)));
    for (index, (s, split)) in all.enumerate() {
        let dir = format!("samples/{index:04}");
        fs::create_dir_all(out_dir.join(&dir)).map_err(|e| Error::io(out_dir.join(&dir), e))?;
        let truth = s
            .truth_videos
            .iter()
            .map(|(&g, v)| Ok((g, write_video(out_dir, &format!("{dir}/truth_{g:02}.tns"), v)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let files = SampleFiles {
            source: write_video(out_dir, &format!("{dir}/source.tns"), &s.source_video)?,
            pose: write_video(out_dir, &format!("{dir}/pose.tns"), &s.pose_video)?,
            agnostic: write_video(out_dir, &format!("{dir}/agnostic.tns"), &s.agnostic_video)?,
            mask: write_video(out_dir, &format!("{dir}/mask.tns"), &s.agnostic_mask)?,
            garment: write_image(out_dir, &format!("{dir}/garment.tns"), &s.garment_image)?,
            truth,
        };
        samples.push(SampleRecord {
            index,
            split,
            g_worn: s.g_worn,
            scene: s.scene.clone(),
            files,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION.to_string(),
        root: ".".to_string(),
        config: config.clone(),
        garments,
        samples,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A manifest opened from disk together with its resolved root directory.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl DatasetDir {
    /// Opens a dataset from its directory or its manifest path and verifies every referenced file exists.
    pub fn open(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path: manifest_path,
                reason: format!("unsupported format_version {:?}", manifest.format_version),
            });
        }
        let base = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.root);
        let dir = Self { root: base, manifest };
        dir.verify_files()?;
        Ok(dir)
    }

    fn verify_files(&self) -> Result<()> {
        let check = |rel: &str| -> Result<()> {
            let p = self.root.join(rel);
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing")))
            }
        };
        for g in &self.manifest.garments {
            check(&g.file)?;
        }
        for s in &self.manifest.samples {
            let f = &s.files;
            for rel in [&f.source, &f.pose, &f.agnostic, &f.mask, &f.garment].into_iter().chain(f.truth.values()) {
                check(rel)?;
            }
        }
        Ok(())
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.manifest.samples.iter().filter(move |s| s.split == split)
    }

    pub fn pool(&self) -> Vec<GarmentSpec> {
        self.manifest.garments.iter().map(|g| g.spec.clone()).collect()
    }

    pub fn load_sample(&self, record: &SampleRecord) -> Result<Sample> {
        let video = |rel: &str| VideoTensor::load(&self.root.join(rel));
        let f = &record.files;
        let garment_path = self.root.join(&f.garment);
        let garment_image = read_tns(&garment_path)?
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::Format { path: garment_path.clone(), reason: e.to_string() })?;
        let truth_videos = f
            .truth
            .iter()
            .map(|(&g, rel)| Ok((g, video(rel)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Sample {
            scene: record.scene.clone(),
            source_video: video(&f.source)?,
            pose_video: video(&f.pose)?,
            agnostic_video: video(&f.agnostic)?,
            agnostic_mask: video(&f.mask)?,
            garment_image,
            truth_videos,
            g_worn: record.g_worn,
        })
    }

    /// Loads every sample into memory.
    pub fn load_all(&self) -> Result<Dataset> {
        let load = |split| self.records(split).map(|r| self.load_sample(r)).collect::<Result<Vec<_>>>();
        Ok(Dataset {
            config: self.manifest.config.clone(),
            pool: self.pool(),
            train: load(Split::Train)?,
            eval: load(Split::Eval)?,
        })
    }
}
