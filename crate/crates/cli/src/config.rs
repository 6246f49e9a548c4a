//! The flat run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use cmtnet::data::SynthParams;
use cmtnet::kv::KeyValues;
use cmtnet::model::ModelConfig;
use cmtnet::train::TrainConfig;

use crate::CliError;

/// Everything a run needs. Model `bands` and `classes` are not part of the
/// file format; they come from the scene being trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Scene manifest.
    pub data: Option<PathBuf>,
    /// Checkpoint to evaluate; defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    /// Standardize every band before patch extraction.
    pub normalize: bool,
    /// Pixels per forward pass during evaluation.
    pub eval_batch: usize,
    pub synth: SynthParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            checkpoint: None,
            out: PathBuf::from("out"),
            normalize: true,
            eval_batch: 100,
            synth: SynthParams::default(),
            model: ModelConfig::new(0, 0),
            train: TrainConfig::default(),
        }
    }
}

const RUN_KEYS: &[&str] = &["data", "checkpoint", "out", "normalize", "eval_batch"];
const SYNTH_KEYS: &[&str] = &[
    "synth.height",
    "synth.width",
    "synth.bands",
    "synth.classes",
    "synth.sigma",
    "synth.seed",
];
const MODEL_KEYS: &[&str] = &[
    "patch_size",
    "ssfe_3d_filters",
    "ssfe_3d_kernel",
    "embed_dim",
    "heads",
    "encoder_layers",
    "mlp_hidden",
    "case",
];
const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "repeats",
    "train_fraction",
];

/// Every key a config file may contain.
pub fn known_keys() -> impl Iterator<Item = &'static str> {
    RUN_KEYS
        .iter()
        .chain(SYNTH_KEYS)
        .chain(MODEL_KEYS)
        .chain(TRAIN_KEYS)
        .copied()
}

impl RunConfig {
    /// Defaults, then `file` if given, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &KeyValues) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let kv = KeyValues::read(path).map_err(|e| CliError::Usage(e.to_string()))?;
            cfg.apply(&kv)?;
        }
        cfg.apply(overrides)?;
        Ok(cfg)
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        cfg.apply(kv)?;
        Ok(cfg)
    }

    /// Overrides the fields present in `kv`. Unknown keys are rejected so a
    /// typo never silently falls back to a default.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<(), CliError> {
        if let Some(k) = kv.keys().find(|k| !known_keys().any(|known| known == *k)) {
            return Err(CliError::Usage(format!("{}: unknown key `{k}`", kv.origin())));
        }
        let usage = |e: cmtnet::Error| CliError::Usage(e.to_string());
        if let Some(v) = kv.get("data") {
            self.data = Some(PathBuf::from(v));
        }
        if let Some(v) = kv.get("checkpoint") {
            self.checkpoint = Some(PathBuf::from(v));
        }
        if let Some(v) = kv.get("out") {
            self.out = PathBuf::from(v);
        }
        if let Some(v) = kv.parse_opt("normalize").map_err(usage)? {
            self.normalize = v;
        }
        if let Some(v) = kv.parse_opt("eval_batch").map_err(usage)? {
            self.eval_batch = v;
        }
        macro_rules! synth {
            ($key:literal, $field:ident) => {
                if let Some(v) = kv.parse_opt($key).map_err(usage)? {
                    self.synth.$field = v;
                }
            };
        }
        synth!("synth.height", height);
        synth!("synth.width", width);
        synth!("synth.bands", bands);
        synth!("synth.classes", classes);
        synth!("synth.sigma", sigma);
        synth!("synth.seed", seed);
        self.model.apply_kv(kv).map_err(usage)?;
        self.train.apply_kv(kv).map_err(usage)?;
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new("effective config");
        if let Some(d) = &self.data {
            kv.set("data", d.display());
        }
        if let Some(c) = &self.checkpoint {
            kv.set("checkpoint", c.display());
        }
        kv.set("out", self.out.display());
        kv.set("normalize", self.normalize);
        kv.set("eval_batch", self.eval_batch);
        kv.set("synth.height", self.synth.height);
        kv.set("synth.width", self.synth.width);
        kv.set("synth.bands", self.synth.bands);
        kv.set("synth.classes", self.synth.classes);
        kv.set("synth.sigma", self.synth.sigma);
        kv.set("synth.seed", self.synth.seed);
        self.model.to_kv(&mut kv);
        kv.remove("bands");
        kv.remove("classes");
        self.train.to_kv(&mut kv);
        kv
    }

    /// The effective configuration as config-file text.
    pub fn dump(&self) -> String {
        self.to_kv().render()
    }

    /// Checks the parts that do not depend on the scene.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.eval_batch == 0 {
            return Err(CliError::Usage("eval_batch must be at least 1".into()));
        }
        Ok(())
    }

    /// The architecture sized for a scene with `bands` bands and `classes` classes.
    pub fn model_for(&self, bands: usize, classes: usize) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            bands,
            classes,
            ..self.model.clone()
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }
}

/// Parses `key=value` command-line overrides.
pub fn parse_overrides(pairs: &[String]) -> Result<KeyValues, CliError> {
    let text: String = pairs
        .iter()
        .map(|p| {
            if p.contains('=') {
                Ok(format!("{p}\n"))
            } else {
                Err(CliError::Usage(format!("override `{p}` is not KEY=VALUE")))
            }
        })
        .collect::<Result<_, _>>()?;
    KeyValues::parse(&text, "--set").map_err(|e| CliError::Usage(e.to_string()))
}
