//! The alternating training loop, its checkpoints, metrics log and sample
//! grids.

mod checkpoint;
mod config;
mod grid;
mod step;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, Checkpoint, CheckpointSource, Manifest, RngState, TensorEntry,
    MAGIC,
};
pub use config::{defaults, TrainConfig};
pub use grid::{emit_sample_grid, sample_grid, unstack};
pub use step::{
    discriminator_phase, generator_phase, train_step, DiscriminatorReport, GeneratorReport, StepGraph, StepMetrics,
};

use crate::data::{Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::gan::{AdamState, Discriminator, Generator};

/// Dropout draws come from this stream of the run seed; initialization uses
/// stream 0.
const DROPOUT_STREAM: u64 = 1;

/// Models, optimizer states and position within the run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_opt: AdamState,
    pub d_opt: AdamState,
    rng: ChaCha8Rng,
    step: u64,
    epoch: u64,
    cursor: usize,
}

/// The result of [`Trainer::next_step`].
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub metrics: StepMetrics,
    pub batch: Batch,
    /// Generator output for the batch, computed before its update.
    pub generated: crate::Tensor,
    pub epoch_finished: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(config.generator.clone(), &mut init)?;
        let discriminator = Discriminator::new(config.discriminator.clone(), &mut init)?;
        let g_opt = AdamState::new(config.adam(), &generator)?;
        let d_opt = AdamState::new(config.adam(), &discriminator)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DROPOUT_STREAM);
        Ok(Trainer {
            config,
            generator,
            discriminator,
            g_opt,
            d_opt,
            rng,
            step: 0,
            epoch: 0,
            cursor: 0,
        })
    }

    /// Rebuilds a trainer exactly as it was saved.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.manifest;
        let mut t = Trainer::new(m.config.clone())?;
        ckpt.load_module("G", &mut t.generator)?;
        ckpt.load_module("D", &mut t.discriminator)?;
        ckpt.load_adam("G_opt", &mut t.g_opt, m.g_opt_step)?;
        ckpt.load_adam("D_opt", &mut t.d_opt, m.d_opt_step)?;
        let expected = checkpoint_tensor_count(&t);
        if m.tensors.len() != expected {
            return Err(Error::Integrity(format!(
                "checkpoint holds {} tensors, the configured models need {expected}",
                m.tensors.len()
            )));
        }
        t.rng = m.rng.restore()?;
        t.step = m.step;
        t.epoch = m.epoch;
        t.cursor = m.cursor;
        Ok(t)
    }

    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        Trainer::from_checkpoint(&load_checkpoint(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(
            path,
            &CheckpointSource {
                config: &self.config,
                generator: &self.generator,
                discriminator: &self.discriminator,
                g_opt: &self.g_opt,
                d_opt: &self.d_opt,
                step: self.step,
                epoch: self.epoch,
                cursor: self.cursor,
                rng: &self.rng,
            },
        )
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Batch order of the current epoch. Each epoch reshuffles with its own
    /// seed, so the order can be recomputed after a resume.
    pub fn epoch_plan(&self, ds: &Dataset) -> Result<Vec<Vec<usize>>> {
        ds.batch_plan(
            self.config.batch_size,
            self.config.shuffle,
            self.config.seed.wrapping_add(self.epoch),
        )
    }

    /// One update on an explicit batch. Does not advance the epoch cursor.
    pub fn train_on_batch(&mut self, batch: &Batch) -> Result<(StepMetrics, crate::Tensor)> {
        let (mut metrics, generated) = train_step(
            batch,
            &mut self.generator,
            &mut self.discriminator,
            &mut self.g_opt,
            &mut self.d_opt,
            &self.config,
            &mut self.rng,
        )?;
        self.step += 1;
        metrics.step = self.step;
        metrics.epoch = self.epoch + 1;
        Ok((metrics, generated))
    }

    /// Trains on the next batch of the epoch plan.
    pub fn next_step(&mut self, ds: &Dataset) -> Result<StepOutcome> {
        let plan = self.epoch_plan(ds)?;
        let indices = plan.get(self.cursor).ok_or_else(|| {
            Error::invalid(format!(
                "epoch cursor {} is past the {} batches of this dataset",
                self.cursor,
                plan.len()
            ))
        })?;
        let batch = ds.load_batch(indices)?;
        let (metrics, generated) = self.train_on_batch(&batch)?;
        self.cursor += 1;
        let epoch_finished = self.cursor == plan.len();
        if epoch_finished {
            self.cursor = 0;
            self.epoch += 1;
        }
        Ok(StepOutcome {
            metrics,
            batch,
            generated,
            epoch_finished,
        })
    }

    /// Trains until `config.epochs` epochs are complete, writing outputs
    /// along the way.
    pub fn run(
        &mut self,
        ds: &Dataset,
        out: &mut RunOutputs,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let mut history = Vec::new();
        while !self.is_finished() {
            let outcome = self.next_step(ds)?;
            let m = outcome.metrics;
            out.log(&m)?;
            if m.step % self.config.sample_every == 0 {
                out.sample(m.step, &outcome.batch, &outcome.generated)?;
            }
            if outcome.epoch_finished && (self.epoch % self.config.checkpoint_every == 0 || self.is_finished()) {
                self.save(out.checkpoint_path(self.epoch))?;
            }
            on_step(&m);
            history.push(m);
        }
        Ok(history)
    }
}

fn checkpoint_tensor_count(t: &Trainer) -> usize {
    use crate::nn::Module;
    t.generator.named_tensors().len()
        + t.discriminator.named_tensors().len()
        + 2 * (t.g_opt.names().len() + t.d_opt.names().len())
}

/// The output directory of a run: `metrics.log`, `samples/`, `checkpoints/`.
#[derive(Debug)]
pub struct RunOutputs {
    dir: PathBuf,
    metrics: fs::File,
}

impl RunOutputs {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        for sub in ["samples", "checkpoints"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let log = dir.join("metrics.log");
        let metrics = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log)
            .map_err(|e| Error::io(&log, e))?;
        Ok(RunOutputs { dir, metrics })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn checkpoint_path(&self, epoch: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("ckpt_{epoch}.bin"))
    }

    pub fn sample_path(&self, step: u64) -> PathBuf {
        self.dir.join("samples").join(format!("step_{step}.png"))
    }

    /// Appends one JSON line.
    pub fn log(&mut self, m: &StepMetrics) -> Result<()> {
        let path = self.dir.join("metrics.log");
        let line = serde_json::to_string(m).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(&path, e))
    }

    /// Writes a grid of up to [`defaults::SAMPLE_ROWS`] rows from `batch`.
    pub fn sample(&self, step: u64, batch: &Batch, generated: &crate::Tensor) -> Result<()> {
        let rows = defaults::SAMPLE_ROWS.min(batch.len());
        let take = |t: &crate::Tensor| -> Result<Vec<crate::Tensor>> {
            Ok(unstack(t)?.into_iter().take(rows).collect())
        };
        emit_sample_grid(
            &take(&batch.satellite)?,
            &take(generated)?,
            &take(&batch.map_img)?,
            self.sample_path(step),
        )
    }
}

/// Parses a metrics log back into records.
pub fn read_metrics_log(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Integrity(format!("bad metrics line `{l}`: {e}"))))
        .collect()
}

/// Final models and the per-step history of a run.
#[derive(Debug)]
pub struct FitOutcome {
    pub trainer: Trainer,
    pub history: Vec<StepMetrics>,
}

pub fn fit(cfg: &TrainConfig) -> Result<FitOutcome> {
    fit_with(cfg, |_| {})
}

/// [`fit`] with a callback after every step.
pub fn fit_with(cfg: &TrainConfig, on_step: impl FnMut(&StepMetrics)) -> Result<FitOutcome> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.data_root, Split::Train, cfg.resize_to, cfg.swap_halves)?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no training images in {}",
            cfg.data_root.join(Split::Train.dir_name()).display()
        )));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut out = RunOutputs::create(&cfg.output_dir)?;
    let history = trainer.run(&ds, &mut out, on_step)?;
    Ok(FitOutcome { trainer, history })
}
