use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter name, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

/// One bias-corrected Adam update of every parameter, in the order given
/// (callers pass name-sorted parameters).
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
    for (name, t) in &params {
        match grads.get(*name) {
            Some(g) if g.len() == t.numel() => {}
            Some(g) => {
                return Err(Error::InvalidArgument(format!(
                    "gradient of `{name}` has {} entries, parameter has {}",
                    g.len(),
                    t.numel()
                )))
            }
            None => return Err(Error::MissingGrad(name.to_string())),
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (name, tensor) in params {
        let g = &grads[name];
        let n = g.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}
