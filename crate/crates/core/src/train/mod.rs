//! Adam and the mini-batch training loop.

mod adam;


pub use adam::{adam_step, AdamParams, AdamState};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::autodiff::{NormMode, Tape};
use crate::data::{batch_iter, stratified_split, GroundTruth, HsiCube, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::kv::KeyValues;
use crate::model::{combined_loss, forward, predict, ModelConfig, ModelParams};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
    /// Independent runs averaged by [`repeat_runs`].
    pub repeats: usize,
    /// Share of each class drawn for training.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 100,
            adam: AdamParams::default(),
            seed: 0,
            repeats: 10,
            train_fraction: 0.005,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let ok = self.epochs >= 1
            && self.batch_size >= 1
            && self.repeats >= 1
            && a.lr >= 0.0
            && a.lr.is_finite()
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0
            && self.train_fraction > 0.0
            && self.train_fraction <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.adam.lr);
        kv.set("beta1", self.adam.beta1);
        kv.set("beta2", self.adam.beta2);
        kv.set("adam_eps", self.adam.eps);
        kv.set("seed", self.seed);
        kv.set("repeats", self.repeats);
        kv.set("train_fraction", self.train_fraction);
    }

    /// Overrides any training fields present in `kv`.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($key:literal, $($field:ident).+) => {
                if let Some(v) = kv.parse_opt($key)? {
                    self.$($field).+ = v;
                }
            };
        }
        take!("epochs", epochs);
        take!("batch_size", batch_size);
        take!("lr", adam.lr);
        take!("beta1", adam.beta1);
        take!("beta2", adam.beta2);
        take!("adam_eps", adam.eps);
        take!("seed", seed);
        take!("repeats", repeats);
        take!("train_fraction", train_fraction);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses.
    pub loss: f64,
    pub train_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Tab-separated `epoch loss train_acc seconds`, with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tloss\ttrain_acc\tseconds\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{}\t{}\t{}\t{:.3}", e.epoch, e.loss, e.train_acc, e.seconds);
        }
        s
    }

    /// Same records without wall time, so equal runs give equal bytes.
    pub fn loss_tsv(&self) -> String {
        let mut s = String::from("epoch\tloss\ttrain_acc\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{}\t{}\t{}", e.epoch, e.loss, e.train_acc);
        }
        s
    }

    /// Writes `train_log.tsv` and `loss_log.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, text) in [("train_log.tsv", self.to_tsv()), ("loss_log.tsv", self.loss_tsv())] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

// `Instant` panics on bare wasm; epochs there report zero seconds.
fn clock() -> Option<Instant> {
    if cfg!(all(target_arch = "wasm32", target_os = "unknown")) {
        None
    } else {
        Some(Instant::now())
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Training state carried across epochs: the parameters, Adam moments and
/// the epoch counter. [`train_with`] drives one of these to completion; use
/// it directly to interleave epochs with other work.
pub struct Trainer {
    params: ModelParams,
    state: AdamState,
    cfg: TrainConfig,
    epoch: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            params,
            state: AdamState::default(),
            cfg: cfg.clone(),
            epoch: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// Epochs completed so far.
    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One shuffled pass over `samples` with an Adam step per mini-batch.
    pub fn epoch(&mut self, cube: &HsiCube, samples: &[Sample]) -> Result<EpochRecord> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let classes = self.params.config().classes;
        if let Some(s) = samples.iter().find(|s| s.label >= classes) {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes,
            });
        }
        let epoch = self.epoch + 1;
        let start = clock();
        let diverged = |e: Error| Error::Diverged {
            epoch,
            source: Box::new(e),
        };
        let patch = self.params.config().patch_size;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let batches = batch_iter(cube, samples, patch, self.cfg.batch_size, epoch_seed(self.cfg.seed, epoch))?;
        for (x, labels) in batches {
            let mut tape = Tape::new();
            let x = tape.constant(x);
            let (out, vars) = forward(&mut tape, &mut self.params, x, NormMode::Train).map_err(diverged)?;
            let loss = combined_loss(&mut tape, &out, &labels).map_err(diverged)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(diverged(Error::NonFinite {
                    op: "combined_loss",
                    node: loss.index(),
                }));
            }
            loss_sum += value * labels.len() as f64;
            correct += predict(&tape, &out)?
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            tape.backward(loss).map_err(diverged)?;
            let mut grads = BTreeMap::new();
            for (name, v) in vars.iter() {
                if let Some(g) = tape.take_grad(v) {
                    grads.insert(name.to_string(), g);
                }
            }
            adam_step(self.params.iter_mut(), &grads, &mut self.state, &self.cfg.adam)?;
        }
        self.epoch = epoch;
        Ok(EpochRecord {
            epoch,
            loss: loss_sum / samples.len() as f64,
            train_acc: correct as f64 / samples.len() as f64,
            seconds: start.map_or(0.0, |t| t.elapsed().as_secs_f64()),
        })
    }
}

/// Trains `params` on `samples` and calls `on_epoch` after every epoch.
pub fn train_with<F: FnMut(&EpochRecord)>(
    params: ModelParams,
    cube: &HsiCube,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(ModelParams, TrainLog)> {
    let mut trainer = Trainer::new(params, cfg)?;
    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        let rec = trainer.epoch(cube, samples)?;
        on_epoch(&rec);
        log.epochs.push(rec);
    }
    Ok((trainer.into_params(), log))
}

pub fn train(
    params: ModelParams,
    cube: &HsiCube,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    train_with(params, cube, samples, cfg, |_| {})
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepeatSummary {
    pub runs: Vec<MetricsReport>,
    /// Mean and population standard deviation of OA, AA and kappa.
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Draws a fresh split, initializes, trains and evaluates `k` times with
/// seeds `seed, seed + 1, …`.
pub fn repeat_runs(
    model: &ModelConfig,
    cube: &HsiCube,
    gt: &GroundTruth,
    cfg: &TrainConfig,
    k: usize,
) -> Result<RepeatSummary> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one run".into()));
    }
    let mut runs = Vec::with_capacity(k);
    for i in 0..k {
        let seed = cfg.seed.wrapping_add(i as u64);
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let split = stratified_split(gt, cfg.train_fraction, seed)?;
        let params = ModelParams::init(model, seed)?;
        let (params, _) = train(params, cube, &split.train_samples(), &run_cfg)?;
        let (report, _) = evaluate(&params, cube, gt, &split, cfg.batch_size)?;
        runs.push(report);
    }
    let stats = |f: fn(&MetricsReport) -> f64| {
        let n = runs.len() as f64;
        let mean = runs.iter().map(f).sum::<f64>() / n;
        let var = runs.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (oa, aa, kappa) = (stats(|r| r.oa), stats(|r| r.aa), stats(|r| r.kappa));
    Ok(RepeatSummary {
        mean: [oa.0, aa.0, kappa.0],
        std: [oa.1, aa.1, kappa.1],
        runs,
    })
}
