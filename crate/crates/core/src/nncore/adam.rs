use serde::{Deserialize, Serialize};

use super::{MlpNet, NnError, ParamVector, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one network, laid out in the net's flat parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(net: &MlpNet) -> Self {
        Self::with_config(net, AdamConfig::default())
    }

    pub fn with_config(net: &MlpNet, config: AdamConfig) -> Self {
        let n = net.num_params();
        AdamState {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step on `net`, descending along `grads`.
///
/// Nothing is modified when a gradient component is non-finite.
pub fn adam_step(net: &mut MlpNet, grads: &ParamVector, state: &mut AdamState, lr: f64) -> Result<()> {
    let n = net.num_params();
    if grads.len() != n {
        return Err(NnError::Shape {
            context: "gradient vector",
            expected: n,
            actual: grads.len(),
        });
    }
    if state.m.len() != n || state.v.len() != n {
        return Err(NnError::Shape {
            context: "adam moments",
            expected: n,
            actual: state.m.len(),
        });
    }
    if let Some(index) = grads.0.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFiniteGradient {
            layer: net.layer_of(index),
            index,
        });
    }

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bias1 = 1.0 - beta1.powi(state.step as i32);
    let bias2 = 1.0 - beta2.powi(state.step as i32);
    let (m, v) = (&mut state.m, &mut state.v);
    net.for_each_param_mut(|i, p| {
        let g = grads.0[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    });
    Ok(())
}
