//! From-scratch differentiable network kernel.
//!
//! A [`NetworkSpec`] is an ordered list of layers. [`Network::forward`]
//! evaluates it for a single sample and records every intermediate
//! activation on a [`Tape`]; [`Network::backward`] replays the tape in
//! reverse to produce exact gradients for every weight and bias, plus the
//! gradient with respect to the input. Batches are handled by the callers,
//! which run samples independently and sum gradients in sample order.

mod checkpoint;
mod config;
mod gradcheck;
mod layers;
mod loss;
mod optim;
mod spec;

use std::hash::{Hash, Hasher};

use rand::Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, ModelMeta};
pub use config::TrainConfig;
pub use gradcheck::{
    check_gradients, combined_signature, grad_check, joint_eval, joint_grad_check, layer_names,
    layer_type_suite, relative_error, GradCheckConfig, GradCheckReport, JointEval, LayerCheck,
    Probe,
};
pub use loss::{
    adversarial_losses, bce_terms, joint_loss, masked_rec_loss, AdversarialOutcome, BceTerms,
};
pub use optim::{optimizer_step, AdamConfig};
pub use spec::{Activation, LayerSpec, NetworkSpec};

use crate::error::{Error, Result};
use crate::metric::LatentVector;
use crate::tensor::Tensor;

/// Weight and bias arrays of one layer. Activations hold empty arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(weights: usize, biases: usize) -> Self {
        Self {
            weight: vec![0.0; weights],
            bias: vec![0.0; biases],
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weights followed by biases.
    pub fn get(&self, i: usize) -> f64 {
        if i < self.weight.len() {
            self.weight[i]
        } else {
            self.bias[i - self.weight.len()]
        }
    }

    pub fn get_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weight.len();
        if i < nw {
            &mut self.weight[i]
        } else {
            &mut self.bias[i - nw]
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.len(), self.bias.len())
    }
}

/// Gradients with the same layout as [`Parameters::layers`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients(pub Vec<LayerParams>);

impl Gradients {
    pub fn zeros_like(layers: &[LayerParams]) -> Self {
        Self(layers.iter().map(LayerParams::zeros_like).collect())
    }

    /// Element-wise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for x in self.0.iter_mut().flat_map(LayerParams::iter_mut) {
            *x *= factor;
        }
    }

    /// Sums per-sample gradients in the given order.
    pub fn sum_ordered<'a>(items: impl IntoIterator<Item = &'a Gradients>) -> Option<Gradients> {
        let mut iter = items.into_iter();
        let mut total = iter.next()?.clone();
        for g in iter {
            total.accumulate(g);
        }
        Some(total)
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().flat_map(LayerParams::iter).all(|&v| v == 0.0)
    }
}

/// Adam moment estimates and the number of updates applied so far.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<LayerParams>,
    pub second: Vec<LayerParams>,
}

/// Trainable weights of a network plus its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub layers: Vec<LayerParams>,
    pub optimizer: AdamState,
}

impl Parameters {
    /// Wraps raw layer arrays with a fresh optimizer state.
    pub fn from_layers(layers: Vec<LayerParams>) -> Self {
        let optimizer = AdamState {
            step: 0,
            first: layers.iter().map(LayerParams::zeros_like).collect(),
            second: layers.iter().map(LayerParams::zeros_like).collect(),
        };
        Self { layers, optimizer }
    }

    /// Zero-filled parameters matching `spec`.
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        let layers = spec
            .layers
            .iter()
            .zip(&shapes)
            .map(|(l, &s)| {
                let (w, b) = l.param_counts(s);
                LayerParams::zeros(w, b)
            })
            .collect();
        Ok(Self::from_layers(layers))
    }

    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut params = Self::zeros(spec)?;
        for ((layer, &shape), p) in spec.layers.iter().zip(&shapes).zip(&mut params.layers) {
            if !layer.has_params() {
                continue;
            }
            let bound = 1.0 / (layer.fan_in(shape).max(1) as f64).sqrt();
            for v in p.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn count(&self) -> usize {
        self.layers.iter().map(LayerParams::len).sum()
    }

    /// Checks the arrays match `spec`, including optimizer state.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes = spec.shapes()?;
        if self.layers.len() != spec.layers.len() {
            return Err(Error::InvalidSpec(format!(
                "{} parameter layers for {} spec layers",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        let moments = [&self.optimizer.first, &self.optimizer.second];
        for (i, (layer, &shape)) in spec.layers.iter().zip(&shapes).enumerate() {
            let (w, b) = layer.param_counts(shape);
            let p = &self.layers[i];
            if p.weight.len() != w || p.bias.len() != b {
                return Err(Error::LayerShape {
                    layer: i,
                    detail: format!(
                        "expected {w} weights/{b} biases, found {}/{}",
                        p.weight.len(),
                        p.bias.len()
                    ),
                });
            }
            for m in moments {
                if m.get(i).map(|m| (m.weight.len(), m.bias.len())) != Some((w, b)) {
                    return Err(Error::LayerShape {
                        layer: i,
                        detail: "optimizer state does not match weights".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Activations cached by a forward pass: the input followed by the output
/// of every layer.
#[derive(Debug, Clone)]
pub struct Tape {
    activations: Vec<Tensor>,
}

impl Tape {
    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    pub fn output(&self) -> &Tensor {
        self.activations
            .last()
            .expect("tape holds at least the input")
    }

    /// Hash of the sign pattern of every input to a kinked activation.
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece of
    /// the network function.
    pub fn kink_signature(&self, spec: &NetworkSpec) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            if let LayerSpec::Activation(act) = layer {
                if act.has_kink() {
                    for &v in self.activations[i].data() {
                        (v > 0.0).hash(&mut hasher);
                    }
                }
            }
        }
        hasher.finish()
    }
}

/// A network description paired with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Parameters,
}

impl Network {
    pub fn new(spec: NetworkSpec, params: Parameters) -> Result<Self> {
        spec.validate()?;
        params.validate(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = Parameters::init(&spec, rng)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tape)> {
        forward(&self.spec, &self.params, input)
    }

    pub fn backward(&self, tape: &Tape, grad_output: &Tensor) -> Result<(Gradients, Tensor)> {
        backward(&self.spec, &self.params, tape, grad_output)
    }

    pub fn encode(&self, input: &Tensor) -> Result<LatentVector> {
        encode(&self.spec, &self.params, input)
    }

    pub fn latent_dim(&self) -> Result<usize> {
        self.spec.latent_dim()
    }
}

fn run_layers(
    spec: &NetworkSpec,
    params: &Parameters,
    input: &Tensor,
    stop_after: usize,
) -> Result<Vec<Tensor>> {
    let shapes = spec.shapes()?;
    if input.shape() != shapes[0] {
        return Err(Error::LayerShape {
            layer: 0,
            detail: format!("input is {}, network expects {}", input.shape(), shapes[0]),
        });
    }
    if params.layers.len() != spec.layers.len() {
        return Err(Error::InvalidSpec(format!(
            "{} parameter layers for {} spec layers",
            params.layers.len(),
            spec.layers.len()
        )));
    }
    let mut acts = Vec::with_capacity(stop_after + 2);
    acts.push(input.clone());
    for (i, layer) in spec.layers.iter().enumerate().take(stop_after + 1) {
        let out = layers::forward(layer, &params.layers[i], &acts[i], shapes[i + 1]);
        acts.push(out);
    }
    Ok(acts)
}

/// Evaluates the network on one sample and records the activations.
pub fn forward(spec: &NetworkSpec, params: &Parameters, input: &Tensor) -> Result<(Tensor, Tape)> {
    let acts = run_layers(spec, params, input, spec.layers.len().saturating_sub(1))?;
    let output = acts.last().unwrap().clone();
    Ok((output, Tape { activations: acts }))
}

/// Latent representation of an (already masked) input: the flattened output
/// of the network's latent layer. Layers after it are not evaluated.
pub fn encode(spec: &NetworkSpec, params: &Parameters, input: &Tensor) -> Result<LatentVector> {
    let l = spec
        .latent_layer
        .ok_or_else(|| Error::InvalidSpec("network has no latent layer".into()))?;
    let mut acts = run_layers(spec, params, input, l)?;
    Ok(LatentVector(acts.pop().unwrap().into_vec()))
}

/// Reverse pass: gradients of a scalar loss with respect to every parameter
/// and to the input, given `grad_output = dLoss/dOutput`.
pub fn backward(
    spec: &NetworkSpec,
    params: &Parameters,
    tape: &Tape,
    grad_output: &Tensor,
) -> Result<(Gradients, Tensor)> {
    let shapes = spec.shapes()?;
    if tape.activations.len() != spec.layers.len() + 1 {
        return Err(Error::StaleTape(format!(
            "tape has {} activations, network needs {}",
            tape.activations.len(),
            spec.layers.len() + 1
        )));
    }
    for (i, (a, s)) in tape.activations.iter().zip(&shapes).enumerate() {
        if a.shape() != *s {
            return Err(Error::StaleTape(format!(
                "activation {i} is {}, spec expects {s}",
                a.shape()
            )));
        }
    }
    if grad_output.shape() != *shapes.last().unwrap() {
        return Err(Error::mismatch(shapes.last().unwrap(), grad_output.shape()));
    }
    let mut grads = Gradients::zeros_like(&params.layers);
    let mut g = grad_output.clone();
    for i in (0..spec.layers.len()).rev() {
        g = layers::backward(
            &spec.layers[i],
            &params.layers[i],
            &tape.activations[i],
            &tape.activations[i + 1],
            &g,
            &mut grads.0[i],
        );
    }
    Ok((grads, g))
}
