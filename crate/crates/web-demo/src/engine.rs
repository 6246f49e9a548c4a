//! Plain-Rust state behind the browser bindings, testable natively.

use cmtnet::data::{normalize, stratified_split, synth_scene, GroundTruth, HsiCube, Sample, SampleSplit, SynthParams};
use cmtnet::eval::{evaluate, MetricsReport, Rgb};
use cmtnet::model::{ModelConfig, ModelParams};
use cmtnet::train::{AdamParams, Trainer, TrainConfig};

/// A model small enough to train interactively: 5×5 patches, 16 channels.
pub fn demo_model(bands: usize, classes: usize, case: u8) -> ModelConfig {
    ModelConfig {
        patch_size: 5,
        ssfe_3d_filters: 2,
        ssfe_3d_kernel: [bands.min(5), 3, 3],
        embed_dim: 16,
        heads: 2,
        mlp_hidden: 32,
        case,
        ..ModelConfig::new(bands, classes)
    }
}

struct Session {
    trainer: Trainer,
    split: SampleSplit,
    samples: Vec<Sample>,
    last_loss: f64,
}

pub struct Engine {
    raw: HsiCube,
    cube: HsiCube,
    gt: GroundTruth,
    session: Option<Session>,
    prediction: Option<(MetricsReport, Vec<u16>)>,
}

fn rgba(labels: &[u16], palette: &[Rgb]) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|&l| match l {
            0 => [0, 0, 0, 255],
            k => {
                let [r, g, b] = palette[k as usize - 1];
                [r, g, b, 255]
            }
        })
        .collect()
}

impl Engine {
    pub fn new(p: &SynthParams) -> Result<Self, String> {
        let (raw, gt) = synth_scene(p).map_err(|e| e.to_string())?;
        Ok(Engine {
            cube: normalize(&raw),
            raw,
            gt,
            session: None,
            prediction: None,
        })
    }

    pub fn gt(&self) -> &GroundTruth {
        &self.gt
    }

    pub fn bands(&self) -> usize {
        self.raw.bands()
    }

    /// Ground truth as canvas-ready RGBA bytes.
    pub fn ground_truth_rgba(&self) -> Vec<u8> {
        rgba(self.gt.labels(), self.gt.palette())
    }

    /// Mean raw spectrum of every class, `classes × bands` row-major.
    pub fn class_spectra(&self) -> Vec<f64> {
        let (n, d) = (self.gt.num_classes(), self.raw.bands());
        let mut sums = vec![0.0; n * d];
        let counts = self.gt.class_counts();
        for s in self.gt.labeled() {
            for (b, v) in self.raw.spectrum(s.row, s.col).into_iter().enumerate() {
                sums[s.label * d + b] += v;
            }
        }
        for (k, row) in sums.chunks_mut(d).enumerate() {
            row.iter_mut().for_each(|v| *v /= counts[k].max(1) as f64);
        }
        sums
    }

    /// Draws a split and a fresh model; training proceeds one epoch per
    /// [`Engine::train_epoch`] call.
    pub fn start_training(&mut self, fraction: f64, case: u8, lr: f64, seed: u64) -> Result<usize, String> {
        let err = |e: cmtnet::Error| e.to_string();
        let model = demo_model(self.raw.bands(), self.gt.num_classes(), case);
        model.validate().map_err(err)?;
        let split = stratified_split(&self.gt, fraction, seed).map_err(err)?;
        let cfg = TrainConfig {
            batch_size: 32,
            adam: AdamParams {
                lr,
                ..AdamParams::default()
            },
            seed,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(ModelParams::init(&model, seed).map_err(err)?, &cfg).map_err(err)?;
        let samples = split.train_samples();
        let n = samples.len();
        self.session = Some(Session {
            trainer,
            split,
            samples,
            last_loss: f64::NAN,
        });
        self.prediction = None;
        Ok(n)
    }

    /// Runs one epoch and returns its mean loss.
    pub fn train_epoch(&mut self) -> Result<f64, String> {
        let s = self.session.as_mut().ok_or("start training first")?;
        let rec = s.trainer.epoch(&self.cube, &s.samples).map_err(|e| e.to_string())?;
        s.last_loss = rec.loss;
        Ok(rec.loss)
    }

    pub fn epochs_done(&self) -> usize {
        self.session.as_ref().map_or(0, |s| s.trainer.epochs_done())
    }

    /// Scores the current model on the held-out pixels; returns OA, AA, kappa.
    pub fn evaluate(&mut self) -> Result<[f64; 3], String> {
        let s = self.session.as_ref().ok_or("start training first")?;
        let (report, raster) =
            evaluate(s.trainer.params(), &self.cube, &self.gt, &s.split, 128).map_err(|e| e.to_string())?;
        let out = [report.oa, report.aa, report.kappa];
        self.prediction = Some((report, raster));
        Ok(out)
    }

    /// Predicted labels from the last [`Engine::evaluate`] as RGBA bytes.
    pub fn prediction_rgba(&self) -> Option<Vec<u8>> {
        self.prediction
            .as_ref()
            .map(|(_, raster)| rgba(raster, self.gt.palette()))
    }
}
