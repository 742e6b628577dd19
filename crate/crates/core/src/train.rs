//! Optimizer, learning-rate schedule and the deep-supervised training loop.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::config::{OptimizerConfig, TrainConfig};
use crate::data::{self, PairedSample};
use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::metrics::{metric_serde, Scores};
use crate::model::Model;
use crate::params::ParamStore;
use crate::pipeline;

/// Cosine annealing from `init` down to `floor`.
///
/// Without restarts one cycle spans the whole run, so the first step uses
/// `init` and the last step uses `floor`. With a restart period the cycle
/// repeats every `period` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub init: f64,
    pub floor: f64,
    pub total_steps: u64,
    pub restart_period: Option<u64>,
}

impl CosineSchedule {
    pub fn new(cfg: &OptimizerConfig, total_steps: u64) -> Self {
        Self {
            init: cfg.lr,
            floor: cfg.lr_floor,
            total_steps,
            restart_period: cfg.restart_period,
        }
    }

    /// Learning rate used by the update at zero-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        let (pos, period) = match self.restart_period {
            Some(p) => (step % p, p),
            None => (step.min(self.total_steps.saturating_sub(1)), self.total_steps),
        };
        if period <= 1 {
            return self.init;
        }
        let frac = pos as f64 / (period - 1) as f64;
        self.floor + 0.5 * (self.init - self.floor) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    pub cfg: OptimizerConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in store.iter() {
            first.insert(name.clone(), var.zeros_like()?);
            second.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            step: 0,
            first,
            second,
        })
    }

    pub fn from_state(cfg: &OptimizerConfig, store: &ParamStore, state: OptimizerState) -> Result<Self> {
        for (name, var) in store.iter() {
            for (kind, map) in [("first", &state.first), ("second", &state.second)] {
                let t = map
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer {kind} moment missing for `{name}`")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer {kind} moment for `{name}` has shape {:?}, parameter has {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
            }
        }
        let cast = |m: BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            m.into_iter()
                .map(|(k, t)| Ok((k, t.to_dtype(store.dtype())?)))
                .collect()
        };
        Ok(Self {
            cfg: cfg.clone(),
            step: state.step,
            first: cast(state.first)?,
            second: cast(state.second)?,
        })
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            first: self.first.clone(),
            second: self.second.clone(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the global gradient norm before clipping.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<f64> {
        let present: Vec<(&String, &candle_core::Var, Tensor)> = store
            .iter()
            .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name, var, g.detach())))
            .collect();
        let mut sq = 0.0;
        for (_, _, g) in &present {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
        let norm = sq.sqrt();
        let scale = match self.cfg.grad_clip {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (name, var, g) in present {
            let g = if scale == 1.0 { g } else { (g * scale)? };
            let m = ((&self.first[name] * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((&self.second[name] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let denom = ((&v / bias2)?.sqrt()? + self.cfg.eps)?;
            let update = ((&m / bias1)? / denom)?;
            let p = (var.as_tensor().detach() * (1.0 - lr * self.cfg.weight_decay))?;
            var.set(&(p - (update * lr)?)?)?;
            self.first.insert(name.clone(), m.detach());
            self.second.insert(name.clone(), v.detach());
        }
        Ok(norm)
    }
}

/// Loss parts of one optimizer step. `ssim` is the weighted sum of `1 - SSIM`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub total: f64,
    pub mse: f64,
    pub ssim: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

impl StepRecord {
    /// Equality ignoring wall time.
    pub fn same_trajectory(&self, other: &StepRecord) -> bool {
        StepRecord {
            wall_time_s: 0.0,
            ..self.clone()
        } == StepRecord {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub epoch: u64,
    #[serde(with = "metric_serde")]
    pub psnr: f64,
    pub ssim: f64,
    pub delta_e: f64,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RunRecord {
    Step(StepRecord),
    Validation(ValidationRecord),
}

/// Append-only newline-delimited JSON log.
pub struct RunLog {
    out: BufWriter<File>,
}

impl RunLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn append(&mut self, record: &RunRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<RunRecord>> {
        std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    /// `final.ckpt` when a checkpoint directory is configured.
    pub final_checkpoint: Option<PathBuf>,
}

/// Loads the training and validation pairs named by the config.
pub fn load_data(cfg: &TrainConfig) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    let [h, w] = cfg.image_size;
    if let Some(syn) = &cfg.data.synthetic {
        let train = data::synthetic_pairs(syn.train, h, w, &cfg.degrade, cfg.seed)?;
        let val = if syn.val > 0 {
            data::synthetic_pairs(syn.val, h, w, &cfg.degrade, derive_seed(&[cfg.seed, 3]))?
        } else {
            Vec::new()
        };
        return Ok((train, val));
    }
    let dir = cfg
        .data
        .train_dir
        .as_ref()
        .ok_or_else(|| Error::config("data.train_dir", "set a dataset directory or [data.synthetic]"))?;
    let read = |dir: &Path, manifest: &Option<PathBuf>| -> Result<Vec<PairedSample>> {
        let all = data::load_dataset_root(dir, Some((h, w)))?;
        match manifest {
            Some(m) => data::select(&all, &data::read_manifest(m)?),
            None => Ok(all),
        }
    };
    let train = read(dir, &cfg.data.train_manifest)?;
    let val = match &cfg.data.val_dir {
        Some(v) => read(v, &cfg.data.val_manifest)?,
        None => Vec::new(),
    };
    Ok((train, val))
}

/// Mixes several words into one seed.
fn derive_seed(words: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &w in words {
        h ^= w.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub schedule: CosineSchedule,
    /// Completed optimizer steps.
    pub step: u64,
    train: Vec<PairedSample>,
    val: Vec<PairedSample>,
    log: Option<RunLog>,
    best_psnr: f64,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, train: Vec<PairedSample>, val: Vec<PairedSample>) -> Result<Self> {
        cfg.validate()?;
        let model = Model::build(&cfg.model, cfg.seed, cfg.precision.dtype())?;
        let optimizer = AdamW::new(&cfg.optimizer, &model.store)?;
        Self::assemble(cfg, model, optimizer, 0, train, val)
    }

    /// Continues from a checkpoint written by an earlier run of the same config.
    pub fn resume(cfg: TrainConfig, checkpoint: &Path, train: Vec<PairedSample>, val: Vec<PairedSample>) -> Result<Self> {
        cfg.validate()?;
        let ckpt = Checkpoint::load(checkpoint)?;
        if ckpt.config != cfg.model {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different model config",
                checkpoint.display()
            )));
        }
        if ckpt.dtype != cfg.precision.dtype() {
            return Err(Error::Checkpoint(format!(
                "{} holds {:?} parameters but the config asks for {:?}",
                checkpoint.display(),
                ckpt.dtype,
                cfg.precision.dtype()
            )));
        }
        let model = ckpt.to_model()?;
        let optimizer = match ckpt.optimizer {
            Some(state) => AdamW::from_state(&cfg.optimizer, &model.store, state)?,
            None => return Err(Error::Checkpoint(format!("{} has no optimizer state", checkpoint.display()))),
        };
        let mut t = Self::assemble(cfg, model, optimizer, ckpt.step, train, val)?;
        t.last_checkpoint = Some(checkpoint.to_path_buf());
        Ok(t)
    }

    fn assemble(
        cfg: TrainConfig,
        model: Model,
        optimizer: AdamW,
        step: u64,
        train: Vec<PairedSample>,
        val: Vec<PairedSample>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let [h, w] = cfg.image_size;
        if let Some(s) = train.iter().find(|s| (s.input.height, s.input.width) != (h, w)) {
            return Err(Error::Dataset(format!(
                "`{}` is {}x{}, expected the training size {h}x{w}",
                s.id, s.input.height, s.input.width
            )));
        }
        let log = match cfg.checkpoint.log.clone().or_else(|| cfg.checkpoint.dir.as_ref().map(|d| d.join("train.ndjson"))) {
            Some(p) => Some(RunLog::open(&p)?),
            None => None,
        };
        let mut t = Self {
            schedule: CosineSchedule::new(&cfg.optimizer, 1),
            cfg,
            model,
            optimizer,
            step,
            train,
            val,
            log,
            best_psnr: f64::NEG_INFINITY,
            last_checkpoint: None,
        };
        t.schedule = CosineSchedule::new(&t.cfg.optimizer, t.total_steps());
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg
            .max_steps
            .unwrap_or(self.cfg.epochs as u64 * self.steps_per_epoch())
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Sample indices of the batch used at `step`; a pure function of the seed.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let perm = self.permutation(epoch);
        let b = self.cfg.batch_size;
        perm[pos * b..((pos + 1) * b).min(perm.len())].to_vec()
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.train.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, 1, epoch])));
        perm
    }

    fn batch(&self, step: u64) -> Result<(Tensor, Tensor)> {
        let idx = self.batch_indices(step);
        let spe = self.steps_per_epoch();
        let perm = self.permutation(step / spe);
        let mut samples = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            let at = perm.iter().position(|&p| p == i).expect("index comes from the permutation");
            let partner = &self.train[perm[(at + 1) % perm.len()]];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, 2, step, k as u64]));
            let partner = (self.train.len() > 1).then_some(partner);
            samples.push(data::augment(&self.train[i], partner, &self.cfg.augment, &mut rng)?);
        }
        let dtype = self.cfg.precision.dtype();
        let inputs: Vec<_> = samples.iter().map(|s| &s.input).collect();
        let targets: Vec<_> = samples.iter().map(|s| &s.target).collect();
        Ok((data::stack(&inputs, dtype)?, data::stack(&targets, dtype)?))
    }

    /// Runs one optimizer step on the next batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        let step = self.step;
        let (input, target) = self.batch(step)?;
        let out = self.model.forward(&input)?;
        let loss = total_loss(&out.stage_images, &target, &self.cfg.loss)?;
        if !loss.total_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last_checkpoint: self.last_checkpoint.clone(),
            });
        }
        let grads = loss.total.backward()?;
        let lr = self.schedule.lr(step);
        let grad_norm = self.optimizer.step(&self.model.store, &grads, lr)?;
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last_checkpoint: self.last_checkpoint.clone(),
            });
        }
        self.step += 1;
        let record = StepRecord {
            step,
            epoch: step / self.steps_per_epoch(),
            total: loss.total_value,
            mse: loss.mse,
            ssim: loss.ssim,
            lr,
            grad_norm,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if let Some(log) = &mut self.log {
            log.append(&RunRecord::Step(record.clone()))?;
        }
        Ok(record)
    }

    /// Scores the current model on the validation pairs.
    pub fn validate(&mut self) -> Result<Option<ValidationRecord>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let report = pipeline::evaluate_samples(&self.model, &self.val, "validation", &self.cfg.loss)?;
        let Scores { psnr, ssim, delta_e, .. } = report.mean;
        let record = ValidationRecord {
            step: self.step,
            epoch: self.step.saturating_sub(1) / self.steps_per_epoch(),
            psnr,
            ssim,
            delta_e,
        };
        if let Some(log) = &mut self.log {
            log.append(&RunRecord::Validation(record.clone()))?;
        }
        if psnr > self.best_psnr {
            self.best_psnr = psnr;
            if self.cfg.checkpoint.dir.is_some() {
                self.save_named("best.ckpt")?;
            }
        }
        Ok(Some(record))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_model(&self.model, self.step, Some(self.optimizer.state()))
    }

    /// Saves into the checkpoint directory, refusing to persist non-finite parameters.
    pub fn save_named(&mut self, name: &str) -> Result<PathBuf> {
        let dir = self
            .cfg
            .checkpoint
            .dir
            .clone()
            .ok_or_else(|| Error::config("checkpoint.dir", "no checkpoint directory configured"))?;
        std::fs::create_dir_all(&dir)?;
        self.save(&dir.join(name))
    }

    pub fn save(&mut self, path: &Path) -> Result<PathBuf> {
        for (name, var) in self.model.store.iter() {
            let sum = var.as_tensor().to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
            if !sum.is_finite() {
                return Err(Error::Numeric(format!("parameter `{name}` is not finite; refusing to save")));
            }
        }
        self.checkpoint()?.save(path)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    /// Trains until the step budget is spent, validating at epoch ends and
    /// checkpointing at the configured cadence.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let mut records = Vec::new();
        let mut validations = Vec::new();
        let spe = self.steps_per_epoch();
        let every_epochs = self.cfg.validate_every as u64;
        let has_dir = self.cfg.checkpoint.dir.is_some();
        while !self.is_done() {
            let rec = self.train_step()?;
            log::debug!("step {} loss {:.6} lr {:.3e}", rec.step, rec.total, rec.lr);
            records.push(rec);
            if self.step % spe == 0 && (self.step / spe) % every_epochs == 0 {
                if let Some(v) = self.validate()? {
                    log::info!("epoch {} validation psnr {:.4}", v.epoch, v.psnr);
                    validations.push(v);
                }
            }
            let every = self.cfg.checkpoint.every;
            if has_dir && every > 0 && self.step % every == 0 {
                self.save_named("last.ckpt")?;
            }
        }
        let final_checkpoint = if has_dir { Some(self.save_named("final.ckpt")?) } else { None };
        Ok(TrainOutcome {
            records,
            validations,
            final_checkpoint,
        })
    }
}
