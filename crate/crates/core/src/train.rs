//! Optimization loop: batching, matching, AdamW steps, checkpoints and resume.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::error::{Error, Result};
use crate::eval::HoiTriplet;
use crate::features::ImageFeatures;
use crate::loss::{compute_losses, hungarian_match, ImageTerms, LossRecord};
use crate::matching::MatchAssignment;
use crate::model::{ImageOutputs, SlHoi};
use crate::nn::Ctx;
use crate::optim::AdamW;
use crate::protocol::{Protocol, ProtocolName};
use crate::tensor::{Mat, Real};
use crate::text_bank::TextEmbeddingBank;

/// One cached training image.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub features: Arc<ImageFeatures<T>>,
    /// Features of the mirrored image, present when flipping is enabled.
    pub flipped: Option<Arc<ImageFeatures<T>>>,
    pub targets: Vec<HoiTriplet>,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a, T> {
    pub features: &'a ImageFeatures<T>,
    pub targets: &'a [HoiTriplet],
}

/// Category columns classified during a step.
///
/// Swig uses the categories present in the batch (falling back to `seen`
/// when the batch has no targets); hico always uses `seen`.
pub fn batch_columns<T>(protocol: ProtocolName, batch: &[BatchItem<'_, T>], seen: &[usize]) -> Vec<usize> {
    match protocol {
        ProtocolName::Swig => {
            let ids: BTreeSet<usize> = batch
                .iter()
                .flat_map(|b| b.targets.iter().map(|t| t.interaction_id))
                .collect();
            if ids.is_empty() {
                seen.to_vec()
            } else {
                ids.into_iter().collect()
            }
        }
        ProtocolName::Hico => seen.to_vec(),
    }
}

#[derive(Clone, Debug)]
pub struct StepResult<T> {
    pub loss: LossRecord,
    pub grads: BTreeMap<String, Mat<T>>,
    pub assignments: Vec<MatchAssignment>,
}

/// Forward, match (unless `fixed` is given), loss and backward for one batch.
pub fn loss_and_grads<T: Real>(
    model: &SlHoi<T>,
    bank: &TextEmbeddingBank,
    batch: &[BatchItem<'_, T>],
    columns: &[usize],
    protocol: &Protocol,
    fixed: Option<&[MatchAssignment]>,
) -> Result<StepResult<T>> {
    protocol.name.require(model.protocol())?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if let Some(f) = fixed {
        if f.len() != batch.len() {
            return Err(Error::InvalidInput(format!(
                "{} fixed assignments for a batch of {}",
                f.len(),
                batch.len()
            )));
        }
    }
    let text = bank.subset::<T>(columns)?;
    let mut ctx = Ctx::new();
    let mut vars = Vec::with_capacity(batch.len());
    let mut assignments = Vec::with_capacity(batch.len());
    for (i, item) in batch.iter().enumerate() {
        let v = model.forward_graph(&mut ctx, item.features, &text, false)?;
        let a = match fixed {
            Some(f) => f[i].clone(),
            None => {
                let out = ImageOutputs::read(&ctx.g, &v, columns);
                if out.probs.iter().flatten().any(|p| !p.is_finite()) {
                    return Err(Error::Numerical("non-finite interaction probabilities".into()));
                }
                hungarian_match(&out, item.targets, protocol)?
            }
        };
        vars.push(v);
        assignments.push(a);
    }
    let terms: Vec<ImageTerms<'_>> = batch
        .iter()
        .zip(&vars)
        .zip(&assignments)
        .map(|((item, &vars), assignment)| ImageTerms {
            vars,
            targets: item.targets,
            assignment,
        })
        .collect();
    let lv = compute_losses(
        &mut ctx.g,
        &terms,
        columns,
        protocol,
        model.detector().config().num_object_classes,
    )?;
    let loss = lv.record(&ctx.g);
    if !loss.total.is_finite() {
        return Err(Error::Numerical(format!("loss is {} ({:?})", loss.total, loss.terms)));
    }
    let grads = ctx.g.backward(lv.total);
    let grads = ctx.param_grads(&grads);
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient for `{name}`")));
    }
    Ok(StepResult {
        loss,
        grads,
        assignments,
    })
}

/// One optimizer step; frozen modules are never touched.
pub fn training_step<T: Real>(
    model: &mut SlHoi<T>,
    optimizer: &mut AdamW<T>,
    bank: &TextEmbeddingBank,
    batch: &[BatchItem<'_, T>],
    seen: &[usize],
    protocol: &Protocol,
    lr: f64,
) -> Result<LossRecord> {
    let columns = batch_columns(protocol.name, batch, seen);
    let step = loss_and_grads(model, bank, batch, &columns, protocol, None)?;
    optimizer.update(&mut model.params, &step.grads, lr)?;
    Ok(step.loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub max_iterations: Option<usize>,
    /// Write a checkpoint every this many epochs (0 disables periodic ones).
    pub checkpoint_every: usize,
    pub seed: u64,
    pub flip: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_iterations: None,
            checkpoint_every: 1,
            seed: 0,
            flip: false,
        }
    }
}

/// Progress stored alongside each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epoch in progress (equal to the number of finished epochs at a boundary).
    pub epoch: usize,
    /// Batches already consumed within `epoch`.
    pub batch: usize,
    pub iteration: usize,
    pub optimizer_step: u64,
    pub protocol: String,
    pub backbone_checksum: String,
    pub head_checksum: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub epochs_completed: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const LATEST_FILE: &str = "latest";
pub const WEIGHTS_DIR: &str = "weights";
pub const OPTIMIZER_DIR: &str = "optimizer";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const STATE_FILE: &str = "state.json";
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";

fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Image order for `epoch`, reproducible from the seed alone.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 1, epoch as u64)));
    order
}

fn flipped_targets(targets: &[HoiTriplet]) -> Vec<HoiTriplet> {
    targets
        .iter()
        .map(|t| HoiTriplet {
            human_box: t.human_box.flipped_horizontally(),
            object_box: t.object_box.flipped_horizontally(),
            ..t.clone()
        })
        .collect()
}

pub struct Trainer<T> {
    pub model: SlHoi<T>,
    pub optimizer: AdamW<T>,
    pub protocol: Protocol,
    pub options: TrainOptions,
    pub state: TrainState,
    pub log: Vec<LogEntry>,
    /// Written verbatim into every checkpoint.
    pub config_text: Option<String>,
    pub output_dir: Option<PathBuf>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: SlHoi<T>, optimizer: AdamW<T>, protocol: Protocol, options: TrainOptions) -> Result<Self> {
        protocol.validate()?;
        protocol.name.require(model.protocol())?;
        if options.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        let (backbone_checksum, head_checksum) = model.frozen_checksums();
        Ok(Self {
            state: TrainState {
                epoch: 0,
                batch: 0,
                iteration: 0,
                optimizer_step: 0,
                protocol: protocol.name.as_str().to_string(),
                backbone_checksum,
                head_checksum,
            },
            model,
            optimizer,
            protocol,
            options,
            log: Vec::new(),
            config_text: None,
            output_dir: None,
        })
    }

    /// Fails if the frozen backbone or head differ from the recorded checksums.
    pub fn check_frozen(&self) -> Result<()> {
        let (b, h) = self.model.frozen_checksums();
        if b != self.state.backbone_checksum {
            return Err(Error::FrozenModified(format!("backbone checksum {b}")));
        }
        if h != self.state.head_checksum {
            return Err(Error::FrozenModified(format!("head checksum {h}")));
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.state.epoch >= self.protocol.epochs
            || self
                .options
                .max_iterations
                .is_some_and(|m| self.state.iteration >= m)
    }

    /// Trains until the protocol's epoch count or `max_iterations` is reached.
    ///
    /// `seen` lists the category ids that may be classified during training.
    pub fn run(
        &mut self,
        samples: &[TrainSample<T>],
        bank: &TextEmbeddingBank,
        seen: &[usize],
    ) -> Result<TrainSummary> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        self.check_frozen()?;
        let start_log = self.log.len();
        let mut checkpoints = Vec::new();
        let bs = self.options.batch_size;
        let per_epoch = samples.len().div_ceil(bs);
        while !self.done() {
            let epoch = self.state.epoch;
            let lr = self.protocol.lr_at(epoch);
            let order = epoch_order(self.options.seed, epoch, samples.len());
            while self.state.batch < per_epoch && !self.done() {
                let idx = &order[self.state.batch * bs..((self.state.batch + 1) * bs).min(samples.len())];
                let mut rng = ChaCha8Rng::seed_from_u64(mix(self.options.seed, 2, self.state.iteration as u64));
                let chosen: Vec<(&ImageFeatures<T>, std::borrow::Cow<'_, [HoiTriplet]>)> = idx
                    .iter()
                    .map(|&i| {
                        let s = &samples[i];
                        match (&s.flipped, self.options.flip && rng.random_bool(0.5)) {
                            (Some(f), true) => (&**f, flipped_targets(&s.targets).into()),
                            _ => (&*s.features, s.targets.as_slice().into()),
                        }
                    })
                    .collect();
                let batch: Vec<BatchItem<'_, T>> = chosen
                    .iter()
                    .map(|(f, t)| BatchItem {
                        features: f,
                        targets: t,
                    })
                    .collect();
                let loss = training_step(
                    &mut self.model,
                    &mut self.optimizer,
                    bank,
                    &batch,
                    seen,
                    &self.protocol,
                    lr,
                )?;
                self.log.push(LogEntry {
                    epoch,
                    iteration: self.state.iteration,
                    lr,
                    loss,
                });
                self.state.iteration += 1;
                self.state.batch += 1;
                self.state.optimizer_step = self.optimizer.step;
            }
            if self.state.batch >= per_epoch {
                self.state.epoch += 1;
                self.state.batch = 0;
                self.check_frozen()?;
                let every = self.options.checkpoint_every;
                if every > 0 && self.state.epoch.is_multiple_of(every) {
                    if let Some(p) = self.write_checkpoint()? {
                        checkpoints.push(p);
                    }
                }
            }
        }
        self.check_frozen()?;
        let last_written = checkpoints.last().is_some_and(|p| p.ends_with(self.checkpoint_name()));
        if !last_written {
            if let Some(p) = self.write_checkpoint()? {
                checkpoints.push(p);
            }
        }
        let run = &self.log[start_log..];
        Ok(TrainSummary {
            iterations: run.len(),
            epochs_completed: self.state.epoch,
            initial_loss: run.first().map(|e| e.loss.total),
            final_loss: run.last().map(|e| e.loss.total),
            checkpoints,
        })
    }

    fn checkpoint_name(&self) -> String {
        if self.state.batch == 0 {
            format!("epoch_{:04}", self.state.epoch)
        } else {
            format!("epoch_{:04}_batch_{:04}", self.state.epoch, self.state.batch)
        }
    }

    /// Writes the learnable weights, optimizer moments and progress under
    /// `<output_dir>/checkpoints/`, updating the `latest` marker.
    pub fn write_checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(out) = &self.output_dir else {
            return Ok(None);
        };
        let root = out.join(CHECKPOINTS_DIR);
        let name = self.checkpoint_name();
        let dir = root.join(&name);
        WeightArchive::new(self.model.params.to_arrays()).save(&dir.join(WEIGHTS_DIR))?;
        let mut moments = BTreeMap::new();
        for (k, m) in &self.optimizer.m {
            moments.insert(format!("optim.m.{k}"), m.clone());
        }
        for (k, v) in &self.optimizer.v {
            moments.insert(format!("optim.v.{k}"), v.clone());
        }
        WeightArchive::new(moments).save(&dir.join(OPTIMIZER_DIR))?;
        let write = |file: &str, bytes: Vec<u8>| -> Result<()> {
            let p = dir.join(file);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        if let Some(cfg) = &self.config_text {
            write(CONFIG_FILE, cfg.clone().into_bytes())?;
        }
        write(STATE_FILE, serde_json::to_vec_pretty(&self.state)?)?;
        write(METRICS_FILE, serde_json::to_vec_pretty(&self.metrics())?)?;
        let mut log = Vec::new();
        for e in &self.log {
            log.extend(serde_json::to_vec(e)?);
            log.push(b'\n');
        }
        write(LOSS_LOG_FILE, log.clone())?;
        let p = out.join(LOSS_LOG_FILE);
        fs::write(&p, log).map_err(|e| Error::io(&p, e))?;
        let p = root.join(LATEST_FILE);
        fs::write(&p, format!("{name}\n")).map_err(|e| Error::io(&p, e))?;
        Ok(Some(dir))
    }

    /// Mean of each loss term over the epoch that just finished.
    fn metrics(&self) -> serde_json::Value {
        let epoch = self.log.last().map_or(0, |e| e.epoch);
        let entries: Vec<&LogEntry> = self.log.iter().filter(|e| e.epoch == epoch).collect();
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for e in &entries {
            *sums.entry("total".into()).or_default() += e.loss.total;
            for (k, v) in &e.loss.terms {
                *sums.entry(k.clone()).or_default() += v;
            }
        }
        let n = entries.len().max(1) as f64;
        serde_json::json!({
            "epoch": epoch,
            "iteration": self.state.iteration,
            "lr": self.log.last().map(|e| e.lr),
            "mean_loss": sums.into_iter().map(|(k, v)| (k, v / n)).collect::<BTreeMap<_, _>>(),
        })
    }

    /// Restores learnable weights, optimizer moments, progress and log from
    /// a checkpoint directory into a freshly built trainer.
    pub fn restore(&mut self, dir: &Path) -> Result<()> {
        let read = |file: &str| -> Result<Vec<u8>> {
            let p = dir.join(file);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let state: TrainState = serde_json::from_slice(&read(STATE_FILE)?)?;
        if state.protocol != self.protocol.name.as_str() {
            return Err(Error::Data(format!(
                "checkpoint was trained under `{}`, not `{}`",
                state.protocol,
                self.protocol.name.as_str()
            )));
        }
        if (state.backbone_checksum.as_str(), state.head_checksum.as_str())
            != (self.state.backbone_checksum.as_str(), self.state.head_checksum.as_str())
        {
            return Err(Error::FrozenModified(
                "checkpoint was trained against different frozen weights".into(),
            ));
        }
        let weights = WeightArchive::<T>::load(&dir.join(WEIGHTS_DIR))?;
        self.model.load_learnable(&weights.arrays)?;
        let moments = WeightArchive::<T>::load(&dir.join(OPTIMIZER_DIR))?;
        self.optimizer.m.clear();
        self.optimizer.v.clear();
        for (k, m) in moments.arrays {
            if let Some(name) = k.strip_prefix("optim.m.") {
                self.optimizer.m.insert(name.to_string(), m);
            } else if let Some(name) = k.strip_prefix("optim.v.") {
                self.optimizer.v.insert(name.to_string(), m);
            }
        }
        self.optimizer.step = state.optimizer_step;
        let log = read(LOSS_LOG_FILE)?;
        self.log = log
            .split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .map(serde_json::from_slice)
            .collect::<std::result::Result<_, _>>()?;
        self.state = state;
        Ok(())
    }
}

/// Resolves `checkpoints/latest` (or a direct checkpoint directory).
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(STATE_FILE).is_file() || path.join(WEIGHTS_DIR).is_dir() {
        return Ok(path.to_path_buf());
    }
    for root in [path.to_path_buf(), path.join(CHECKPOINTS_DIR)] {
        let marker = root.join(LATEST_FILE);
        if marker.is_file() {
            let name = fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
            return Ok(root.join(name.trim()));
        }
    }
    Err(Error::Data(format!("{} is not a checkpoint", path.display())))
}
