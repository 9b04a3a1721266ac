use std::collections::BTreeMap;

use super::config::OptimizerConfig;
use super::model::{Gradients, ViTModel};
use crate::error::{Error, Result};

/// First and second moment estimates per parameter plus the shared step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One AdamW update of a flat parameter slice at step `t` (already incremented, so `t ≥ 1`).
///
/// Decoupled decay: `θ ← θ − lr·(m̂/(√v̂+ε) + λ·θ)`, with `λ` applied only when `decay` is set.
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    opt: &OptimizerConfig,
    decay: bool,
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - opt.beta1.powf(t as f64);
    let bc2 = 1.0 - opt.beta2.powf(t as f64);
    let wd = if decay { opt.weight_decay } else { 0.0 };
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= opt.learning_rate * (m_hat / (v_hat.sqrt() + opt.epsilon) + wd * theta[i]);
    }
}

/// Applies one optimizer step to every parameter that has a gradient entry.
/// Weight matrices decay; biases, layer norms, class token and positional
/// embeddings do not.
pub fn adamw_step(model: &mut ViTModel, grads: &Gradients, state: &mut AdamState, opt: &OptimizerConfig) -> Result<()> {
    opt.validate()?;
    state.t += 1;
    let t = state.t;
    model.touch();
    for (name, param, decay) in model.params.tensors_mut() {
        let Some(g) = grads.get(&name) else { continue };
        if g.shape() != param.shape() {
            return Err(Error::Incompatible {
                name,
                expected: param.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        if m.len() != param.len() {
            return Err(Error::Contract(format!(
                "optimizer state for `{name}` has the wrong size"
            )));
        }
        adamw_update(param.data_mut(), g.data(), m, v, t, opt, decay);
    }
    Ok(())
}
