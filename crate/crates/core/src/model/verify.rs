use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::network::{combined_loss, forward_with};
use super::params::{ModelParams, ParamVars};
use crate::autodiff::{finite_difference_check, GradCheckOptions, NormMode, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step used for whole-network checks. Shared parameters such as norm
/// shifts move many ReLU inputs at once, so a coarse step lands on kinks.
pub const MODEL_GRADCHECK_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradCheck {
    /// Worst relative error per parameter, by name.
    pub groups: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Fresh parameters for `cfg` with every entry shifted by U(-0.3, 0.3), so
/// that biases and norm shifts are non-zero and units sit away from kinks.
pub fn perturbed_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut p = ModelParams::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    Ok(p)
}

/// Finite-difference check of the training loss of the whole network on a
/// random 2-sample batch, in training mode.
pub fn gradcheck_model(
    cfg: &ModelConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<ModelGradCheck> {
    let params = perturbed_params(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let s = cfg.patch_size;
    let n = 2 * cfg.bands * s * s;
    let patch = Tensor::new(
        vec![2, cfg.bands, s, s],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let labels = [0, cfg.classes - 1];
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let buffers = params.buffers().clone();
    let f = |tape: &mut Tape, vars: &[Var]| {
        let pv = ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        let mut bufs = buffers.clone();
        let x = tape.constant(patch.clone());
        let out = forward_with(tape, cfg, &pv, &mut bufs, x, NormMode::Train)?;
        combined_loss(tape, &out, &labels)
    };
    let report = finite_difference_check(f, &inputs, opts)?;
    Ok(ModelGradCheck {
        groups: names.iter().cloned().zip(report.per_input).collect(),
        max_rel_error: report.max_rel_error,
        coords_checked: report.coords_checked,
    })
}
