use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use slhoi_core::archive::WeightArchive;
use slhoi_core::config::{Precision, RunConfig};
use slhoi_core::data::{predict_dataset, training_samples, Dataset};
use slhoi_core::eval::{evaluate_map, HoiTriplet, MapReport};
use slhoi_core::imaging::Image;
use slhoi_core::model::SlHoi;
use slhoi_core::optim::AdamW;
use slhoi_core::probe::{probe as probe_maps, write_heatmaps, ProbeStage};
use slhoi_core::synthetic::{generate, SyntheticSpec, ANNOTATIONS_FILE};
use slhoi_core::text_bank::{read_categories_csv, CategoryEntry, Rarity, TextEmbeddingBank};
use slhoi_core::train::{resolve_checkpoint, TrainOptions, Trainer, CONFIG_FILE, WEIGHTS_DIR};
use slhoi_core::{Error, Mat, Real};

use crate::Overrides;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Encoder {
    /// Deterministic hash-seeded unit vectors.
    Stub,
    /// Precomputed vectors from `--embeddings`.
    File,
}

macro_rules! dispatch {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn resolve_config(o: &Overrides, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&o.config, checkpoint) {
        (Some(path), _) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(ckpt)) => {
            let path = resolve_checkpoint(ckpt)?.join(CONFIG_FILE);
            RunConfig::load(&path).with_context(|| format!("loading {}", path.display()))?
        }
        (None, None) => return Err(Error::Config {
            field: "--config".into(),
            message: "a run config is required".into(),
        }
        .into()),
    };
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &o.out {
        cfg.output_dir = out.clone();
    }
    if let Some(v) = o.variant {
        cfg.interaction.variant = v;
    }
    if let Some(p) = o.protocol {
        cfg.protocol.name = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_bank(cfg: &RunConfig) -> Result<TextEmbeddingBank> {
    let dir = cfg
        .data
        .text_bank
        .as_ref()
        .ok_or_else(|| Error::Config {
            field: "data.text_bank".into(),
            message: "required".into(),
        })?;
    TextEmbeddingBank::load_expecting(dir, cfg.text_dim())
        .with_context(|| format!("loading text bank {}", dir.display()))
}

fn load_model<T: Real>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<SlHoi<T>> {
    let mut model = cfg.build_model::<T>()?;
    if let Some(c) = checkpoint {
        let dir = resolve_checkpoint(c)?.join(WEIGHTS_DIR);
        let archive = WeightArchive::<T>::load(&dir)?;
        model
            .load_learnable(&archive.arrays)
            .with_context(|| format!("loading {}", dir.display()))?;
    }
    Ok(model)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn train(o: &Overrides, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(o, checkpoint)?;
    dispatch!(cfg, train_as(&cfg, checkpoint))
}

fn train_as<T: Real>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let bank = load_bank(cfg)?;
    let ann = cfg.data.train_annotations.as_ref().ok_or_else(|| Error::Config {
        field: "data.train_annotations".into(),
        message: "required for training".into(),
    })?;
    let dataset = Dataset::load(ann, cfg.data.images_dir.as_deref(), &bank)?;
    let model = cfg.build_model::<T>()?;
    let seen: Vec<usize> = bank.entries().iter().filter(|e| e.seen).map(|e| e.id).collect();
    let samples = training_samples(&model, &dataset, cfg.data.image_size, cfg.data.flip, &seen)?;
    let options = TrainOptions {
        batch_size: cfg.train.batch_size,
        max_iterations: cfg.train.max_iterations,
        checkpoint_every: cfg.train.checkpoint_every,
        seed: cfg.seed,
        flip: cfg.data.flip,
    };
    let mut trainer = Trainer::new(model, AdamW::new(cfg.optimizer), cfg.protocol(), options)?;
    trainer.output_dir = Some(cfg.output_dir.clone());
    trainer.config_text = Some(cfg.to_toml()?);
    if let Some(c) = checkpoint {
        let dir = resolve_checkpoint(c)?;
        trainer
            .restore(&dir)
            .with_context(|| format!("resuming from {}", dir.display()))?;
    }
    let summary = trainer.run(&samples, &bank, &seen)?;
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    splits: &'a slhoi_core::text_bank::SplitReport,
    per_category: &'a std::collections::BTreeMap<usize, Option<f64>>,
    images: usize,
}

pub fn eval(
    o: &Overrides,
    checkpoint: Option<&Path>,
    annotations: Option<&Path>,
    predictions: Option<&Path>,
) -> Result<()> {
    let cfg = resolve_config(o, checkpoint)?;
    dispatch!(cfg, eval_as(&cfg, checkpoint, annotations, predictions))
}

fn eval_as<T: Real>(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    annotations: Option<&Path>,
    predictions: Option<&Path>,
) -> Result<()> {
    let bank = load_bank(cfg)?;
    let ann: PathBuf = annotations
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.eval_annotations.clone())
        .or_else(|| cfg.data.train_annotations.clone())
        .ok_or_else(|| Error::Config {
            field: "data.eval_annotations".into(),
            message: "no annotations to evaluate on".into(),
        })?;
    let dataset = Dataset::load(&ann, cfg.data.images_dir.as_deref(), &bank)?;
    let preds: Vec<Vec<HoiTriplet>> = match predictions {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let preds: Vec<Vec<HoiTriplet>> = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            if preds.len() != dataset.len() {
                return Err(Error::Data(format!(
                    "{} prediction lists for {} images",
                    preds.len(),
                    dataset.len()
                ))
                .into());
            }
            if preds.iter().flatten().any(|p| p.score.is_none()) {
                return Err(Error::Data("every prediction needs a score".into()).into());
            }
            preds
        }
        None => {
            let model = load_model::<T>(cfg, checkpoint)?;
            predict_dataset(
                &model,
                &dataset,
                &bank,
                &bank.ids(),
                cfg.data.image_size,
                cfg.eval.max_detections,
            )?
        }
    };
    let MapReport { splits, per_category } = evaluate_map(&preds, &dataset.targets, &bank)?;
    let report = EvalReport {
        splits: &splits,
        per_category: &per_category,
        images: dataset.len(),
    };
    write_json(&cfg.output_dir.join("eval_metrics.json"), &report)?;
    if predictions.is_none() {
        write_json(&cfg.output_dir.join("predictions.json"), &preds)?;
    }
    println!("{}", serde_json::to_string(&splits)?);
    Ok(())
}

pub fn probe(
    o: &Overrides,
    checkpoint: Option<&Path>,
    image: &Path,
    patch: (usize, usize),
    stages: &[ProbeStage],
    per_head: bool,
) -> Result<()> {
    let cfg = resolve_config(o, checkpoint)?;
    dispatch!(cfg, probe_as(&cfg, checkpoint, image, patch, stages, per_head))
}

fn probe_as<T: Real>(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    image: &Path,
    patch: (usize, usize),
    stages: &[ProbeStage],
    per_head: bool,
) -> Result<()> {
    let model = load_model::<T>(cfg, checkpoint)?;
    let raw = Image::load(image).map_err(|e| Error::Data(format!("{}: {e}", image.display())))?;
    let bank = match cfg.data.text_bank {
        Some(_) => load_bank(cfg)?,
        // attention does not depend on the text side; any bank of the right width will do
        None => TextEmbeddingBank::from_stub(
            vec![CategoryEntry {
                id: 0,
                action: "interact_with".into(),
                object: "object".into(),
                seen: true,
                rarity: Rarity::NotApplicable,
            }],
            cfg.seed,
            cfg.text_dim(),
        )?,
    };
    let shown = match cfg.data.image_size {
        Some((h, w)) => raw.resized(h, w),
        None => raw.clone(),
    };
    let out = cfg.output_dir.join("probe");
    let mut written = Vec::new();
    for &stage in stages {
        let maps = probe_maps(&model, &raw, cfg.data.image_size, stage, patch, &bank, &bank.ids())?;
        written.extend(write_heatmaps(&out, &shown, &maps, per_head)?);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn build_text_bank(
    categories: &Path,
    encoder: Encoder,
    embeddings: Option<&Path>,
    dim: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let entries = read_categories_csv(categories)?;
    let bank = match encoder {
        Encoder::Stub => TextEmbeddingBank::from_stub(entries, seed, dim)?,
        Encoder::File => {
            let path = embeddings.ok_or_else(|| Error::Config {
                field: "--embeddings".into(),
                message: "required with --encoder file".into(),
            })?;
            let bytes = std::fs::read(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let rows: Vec<Vec<f32>> = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let width = rows.first().map_or(0, Vec::len);
            if rows.len() != entries.len() || width == 0 || rows.iter().any(|r| r.len() != width) {
                return Err(Error::Bank(format!(
                    "{} needs {} rows of equal, non-zero width",
                    path.display(),
                    entries.len()
                ))
                .into());
            }
            let mat = Mat::from_vec(rows.len(), width, rows.concat())?;
            TextEmbeddingBank::new(entries, mat, format!("file {}", path.display()))?
        }
    };
    bank.save(out)?;
    println!("{} categories x {} dims -> {}", bank.len(), bank.dim(), out.display());
    Ok(())
}

pub fn gen_synthetic(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec = match spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            SyntheticSpec::from_toml(&text)?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let set = generate(&spec)?;
    set.write(out)?;

    // a ready-to-train run config next to the data
    let mut cfg = RunConfig::synthetic();
    cfg.seed = spec.seed;
    cfg.output_dir = PathBuf::from("run");
    cfg.data.train_annotations = Some(PathBuf::from(ANNOTATIONS_FILE));
    cfg.data.text_bank = Some(PathBuf::from("bank"));
    TextEmbeddingBank::from_stub(set.categories.clone(), spec.seed, cfg.text_dim())?.save(&out.join("bank"))?;
    let path = out.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::Io { path, source: e })?;
    println!(
        "{} images, {} categories -> {}",
        set.images.len(),
        set.categories.len(),
        out.display()
    );
    Ok(())
}
