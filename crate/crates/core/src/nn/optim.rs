use serde::{Deserialize, Serialize};

use super::{Gradients, LayerParams, Parameters};
use crate::error::{Error, Result};

/// Adam hyper-parameters. `beta1 = 0.5` follows common practice for
/// adversarially trained encoder-decoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
///
/// Every gradient is checked for finiteness before anything is modified;
/// a non-finite value aborts with the offending layer index.
pub fn optimizer_step(params: &mut Parameters, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
    if grads.0.len() != params.layers.len() {
        return Err(Error::mismatch(
            format!("{} gradient layers", params.layers.len()),
            grads.0.len(),
        ));
    }
    for (i, (g, p)) in grads.0.iter().zip(&params.layers).enumerate() {
        if g.weight.len() != p.weight.len() || g.bias.len() != p.bias.len() {
            return Err(Error::LayerShape {
                layer: i,
                detail: "gradient shape differs from parameters".into(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: i });
        }
    }
    let state = &mut params.optimizer;
    if state.first.len() != params.layers.len() {
        state.first = params
            .layers
            .iter()
            .map(|l| LayerParams::zeros(l.weight.len(), l.bias.len()))
            .collect();
        state.second = state.first.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.0)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for (((w, &gw), mw), vw) in p
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mw = cfg.beta1 * *mw + (1.0 - cfg.beta1) * gw;
            *vw = cfg.beta2 * *vw + (1.0 - cfg.beta2) * gw * gw;
            let m_hat = *mw / c1;
            let v_hat = *vw / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
