use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Head, ModelConfig};
use crate::autodiff::{BatchNormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform on ±sqrt(6 / fan_in).
    Kaiming(usize),
    Zeros,
    Ones,
    Normal(f64),
}

pub(crate) fn head_name(head: Head) -> &'static str {
    match head {
        Head::Transformer => "head.transformer",
        Head::Cnn => "head.cnn",
        Head::Fused => "head.fused",
    }
}

/// Every learnable array for `cfg`, in a fixed order, plus the names of the
/// batch-normalization layers that carry running statistics.
type ParamSpec = (String, Vec<usize>, Init);

fn layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, Vec<(String, usize)>) {
    let ab = cfg.ablation();
    let z = cfg.embed_dim;
    let mut p: Vec<ParamSpec> = Vec::new();
    let mut bn = Vec::new();
    let mut add = |name: &str, shape: Vec<usize>, init| p.push((name.to_string(), shape, init));
    let mut add_bn = |p: &mut dyn FnMut(&str, Vec<usize>, Init), name: &str, ch: usize| {
        p(&format!("{name}.gamma"), vec![ch], Init::Ones);
        p(&format!("{name}.beta"), vec![ch], Init::Zeros);
        bn.push((name.to_string(), ch));
    };

    if ab.conv3d {
        let f = cfg.ssfe_3d_filters;
        let [kd, kh, kw] = cfg.ssfe_3d_kernel;
        add("ssfe.conv3d.weight", vec![f, 1, kd, kh, kw], Init::Kaiming(kd * kh * kw));
        add("ssfe.conv3d.bias", vec![f], Init::Zeros);
        add_bn(&mut add, "ssfe.bn3d", f);
    }
    let c = cfg.stem_channels();
    if ab.conv2d {
        add("ssfe.conv2d.weight", vec![z, c, 3, 3], Init::Kaiming(c * 9));
        add("ssfe.conv2d.bias", vec![z], Init::Zeros);
        add_bn(&mut add, "ssfe.bn2d", z);
    } else {
        add("stem.proj.weight", vec![z, c, 1, 1], Init::Kaiming(c));
        add("stem.proj.bias", vec![z], Init::Zeros);
    }

    add("tokens.proj.weight", vec![z, z], Init::Kaiming(z));
    add("tokens.proj.bias", vec![z], Init::Zeros);
    add("tokens.pos", vec![cfg.tokens(), z], Init::Normal(0.02));
    for l in 0..cfg.encoder_layers {
        let e = format!("encoder.{l}");
        add(&format!("{e}.ln1.gamma"), vec![z], Init::Ones);
        add(&format!("{e}.ln1.beta"), vec![z], Init::Zeros);
        for proj in ["q", "k", "v", "out"] {
            add(&format!("{e}.attn.{proj}.weight"), vec![z, z], Init::Kaiming(z));
            add(&format!("{e}.attn.{proj}.bias"), vec![z], Init::Zeros);
        }
        add(&format!("{e}.ln2.gamma"), vec![z], Init::Ones);
        add(&format!("{e}.ln2.beta"), vec![z], Init::Zeros);
        let h = cfg.mlp_hidden;
        add(&format!("{e}.mlp.fc1.weight"), vec![h, z], Init::Kaiming(z));
        add(&format!("{e}.mlp.fc1.bias"), vec![h], Init::Zeros);
        add(&format!("{e}.mlp.fc2.weight"), vec![z, h], Init::Kaiming(h));
        add(&format!("{e}.mlp.fc2.bias"), vec![z], Init::Zeros);
    }

    if ab.cnn_branch {
        add("cnn.conv1.weight", vec![z, z, 3, 3], Init::Kaiming(z * 9));
        add("cnn.conv1.bias", vec![z], Init::Zeros);
        add_bn(&mut add, "cnn.bn1", z);
        add("cnn.conv2.weight", vec![z, z, 1, 1], Init::Kaiming(z));
        add("cnn.conv2.bias", vec![z], Init::Zeros);
        add_bn(&mut add, "cnn.bn2", z);
        add("cnn.conv3.weight", vec![z, z, 1, 1], Init::Kaiming(z));
        add("cnn.conv3.bias", vec![z], Init::Zeros);
    }

    let n = cfg.classes;
    for head in ab.heads() {
        let width = if head == Head::Fused { 2 * z } else { z };
        let name = head_name(head);
        add(&format!("{name}.weight"), vec![n, width], Init::Kaiming(width));
        add(&format!("{name}.bias"), vec![n], Init::Zeros);
    }
    (p, bn)
}

/// Running statistics of every batch-normalization layer, by layer name.
pub type BnBuffers = BTreeMap<String, BatchNormStats>;

/// All learnable arrays of one model, addressable by stable dotted names,
/// plus the batch-normalization running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    buffers: BnBuffers,
}

impl ModelParams {
    /// Fresh parameters: Kaiming-uniform conv/linear weights, zero biases,
    /// unit norm scales, and N(0, 0.02) positional embeddings.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, bns) = layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Kaiming(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        let buffers = bns
            .into_iter()
            .map(|(name, ch)| (name, BatchNormStats::new(ch)))
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            params,
            buffers,
        })
    }

    /// Assembles parameters from parts, checking names and shapes against
    /// the layout `config` implies.
    pub fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor>,
        buffers: BnBuffers,
    ) -> Result<Self> {
        config.validate()?;
        let (specs, bns) = layout(&config);
        if specs.len() != params.len() || bns.len() != buffers.len() {
            return Err(Error::Config(format!(
                "expected {} parameters and {} norm layers, got {} and {}",
                specs.len(),
                bns.len(),
                params.len(),
                buffers.len()
            )));
        }
        for (name, shape, _) in &specs {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
            }
        }
        for (name, ch) in &bns {
            match buffers.get(name) {
                Some(s) if s.channels() == *ch && s.var.len() == *ch => {}
                _ => return Err(Error::Config(format!("missing or mis-sized stats `{name}`"))),
            }
        }
        Ok(ModelParams {
            config,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> &BnBuffers {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BnBuffers {
        &mut self.buffers
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sets every head weight and bias to zero, so each head starts at a
    /// uniform class distribution.
    pub fn zero_heads(&mut self) {
        for head in [Head::Transformer, Head::Cnn, Head::Fused] {
            let name = head_name(head);
            for suffix in ["weight", "bias"] {
                if let Some(t) = self.params.get_mut(&format!("{name}.{suffix}")) {
                    t.data_mut().fill(0.0);
                }
            }
        }
    }

    /// Records every parameter on `tape` as a constant, for inference.
    pub fn bind_constants(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
                .collect(),
        )
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.clone().with_requires_grad(true))))
                .collect(),
        )
    }
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        ParamVars(pairs.into_iter().collect())
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
