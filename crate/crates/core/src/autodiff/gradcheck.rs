//! Central finite-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation size, in `(0, 1e-2]`.
    pub step: f64,
    /// Random coordinates checked per input in addition to the one with the
    /// largest analytic gradient. `None` checks every coordinate.
    pub coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor], track: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(track)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    if !track {
        return Ok((value, None));
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((value, Some(grads)))
}

/// Compares reverse-mode gradients of the scalar program `f` against
/// central differences `(f(x+h) - f(x-h)) / 2h`.
///
/// The error at each checked coordinate is
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(
    f: F,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let h = opts.step;
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::InvalidArgument(format!("step must lie in (0, 1e-2], got {h}")));
    }
    let (first, grads) = evaluate(&f, inputs, true)?;
    let (second, _) = evaluate(&f, inputs, false)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = grads.expect("tracked evaluation returns gradients");

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    for (k, grad) in grads.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = match opts.coords_per_input {
            Some(m) if m + 1 < n => {
                let peak = (0..n)
                    .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                    .unwrap_or(0);
                let mut picked = index::sample(&mut rng, n, m).into_vec();
                if !picked.contains(&peak) {
                    picked.push(peak);
                }
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = inputs[k].data()[c];
            probe[k].data_mut()[c] = orig + h;
            let (plus, _) = evaluate(&f, &probe, false)?;
            probe[k].data_mut()[c] = orig - h;
            let (minus, _) = evaluate(&f, &probe, false)?;
            probe[k].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grad[c];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
        }
        coords_checked += coords.len();
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_error,
        coords_checked,
    })
}
