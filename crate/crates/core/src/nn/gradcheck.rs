//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::hash::{Hash, Hasher};

use super::{
    adversarial_losses, backward, forward, masked_rec_loss, Gradients, LayerParams, Network,
    NetworkSpec, Parameters, TrainConfig,
};
use crate::error::Result;
use crate::masking::Mask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation half-width.
    pub eps: f64,
    /// Coordinates compared per parameterized layer (all, if fewer exist).
    pub coords_per_layer: usize,
    /// Lower bound on the relative-error denominator. Central differences
    /// at `eps = 1e-5` carry roughly `1e-16 * |loss| / eps` of rounding
    /// noise, so gradients far below this floor are compared absolutely.
    pub floor: f64,
    pub seed: u64,
    /// Negates the analytic gradient of this layer before comparing, to
    /// confirm that the checker notices a wrong backward pass.
    pub mutate_layer: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords_per_layer: 50,
            floor: 1e-4,
            seed: 0,
            mutate_layer: None,
        }
    }
}

/// Objective value at a parameter point, with a signature identifying the
/// smooth piece of the function the point lies on (see
/// [`super::Tape::kink_signature`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub signature: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer: usize,
    pub name: String,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.max_rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `objective` on a
/// random subsample of coordinates of every non-empty layer.
///
/// `layers` is perturbed in place and restored bit-exactly after each
/// probe. Coordinates whose `±eps` probes land on a different smooth piece
/// than the unperturbed point are skipped and replaced by other draws.
pub fn check_gradients<F>(
    layers: &mut [LayerParams],
    names: &[String],
    analytic: &Gradients,
    mut objective: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[LayerParams]) -> Result<Probe>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = objective(layers)?;
    let mut report = GradCheckReport::default();
    for li in 0..layers.len() {
        let total = layers[li].len();
        if total == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut rng);
        let mut check = LayerCheck {
            layer: li,
            name: names.get(li).cloned().unwrap_or_default(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for &idx in &order {
            if check.checked >= cfg.coords_per_layer {
                break;
            }
            let original = layers[li].get(idx);
            *layers[li].get_mut(idx) = original + cfg.eps;
            let plus = objective(layers);
            *layers[li].get_mut(idx) = original - cfg.eps;
            let minus = objective(layers);
            *layers[li].get_mut(idx) = original;
            let (plus, minus) = (plus?, minus?);
            if plus.signature != base.signature || minus.signature != base.signature {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * cfg.eps);
            let mut a = analytic.0[li].get(idx);
            if cfg.mutate_layer == Some(li) {
                a = -a;
            }
            let err = relative_error(a, numeric, cfg.floor);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        report.layers.push(check);
    }
    Ok(report)
}

/// Checks `backward` for a single network under a scalar loss of its
/// output. `loss` returns the loss and its gradient with respect to the
/// output.
pub fn grad_check<L>(
    spec: &NetworkSpec,
    params: &Parameters,
    input: &Tensor,
    loss: L,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    L: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (out, tape) = forward(spec, params, input)?;
    let (_, grad_out) = loss(&out)?;
    let (analytic, _) = backward(spec, params, &tape, &grad_out)?;
    let names = layer_names(spec);
    let mut probe_params = params.clone();
    let mut layers = std::mem::take(&mut probe_params.layers);
    check_gradients(
        &mut layers,
        &names,
        &analytic,
        |ls| {
            probe_params.layers = ls.to_vec();
            let (out, tape) = forward(spec, &probe_params, input)?;
            Ok(Probe {
                value: loss(&out)?.0,
                signature: tape.kink_signature(spec),
            })
        },
        cfg,
    )
}

/// Combines kink signatures of several forward passes.
pub fn combined_signature(parts: &[u64]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    parts.hash(&mut h);
    h.finish()
}

/// Layer names of a spec, as reported by the checker.
pub fn layer_names(spec: &NetworkSpec) -> Vec<String> {
    spec.layers.iter().map(|l| l.name().to_string()).collect()
}

/// Generator and discriminator objectives of the joint loss for one
/// `(input, target, mask)` sample: `λ_rec·rec + λ_adv·gen` and the
/// discriminator loss, with their analytic gradients.
#[derive(Debug, Clone)]
pub struct JointEval {
    pub gen_objective: f64,
    pub disc_loss: f64,
    pub gen_grads: Gradients,
    pub disc_grads: Gradients,
    pub signature: u64,
}

pub fn joint_eval(
    gen: &Network,
    disc: &Network,
    input: &Tensor,
    target: &Tensor,
    mask: &Mask,
    train: &TrainConfig,
) -> Result<JointEval> {
    let (out, tape) = gen.forward(input)?;
    let (rec, rec_grad) = masked_rec_loss(target, &out, mask)?;
    let adv = adversarial_losses(
        disc,
        std::slice::from_ref(target),
        std::slice::from_ref(&out),
    )?;
    let lambda_adv = train.effective_lambda_adv();
    let mut g = rec_grad.map(|v| v * train.lambda_rec);
    for (gv, &fv) in g.data_mut().iter_mut().zip(adv.fake_grads[0].data()) {
        *gv += lambda_adv * fv;
    }
    let (gen_grads, _) = gen.backward(&tape, &g)?;
    let (_, real_tape) = disc.forward(target)?;
    let (_, fake_tape) = disc.forward(&out)?;
    Ok(JointEval {
        gen_objective: train.lambda_rec * rec + lambda_adv * adv.gen_loss,
        disc_loss: adv.disc_loss,
        gen_grads,
        disc_grads: adv.disc_grads,
        signature: combined_signature(&[
            tape.kink_signature(&gen.spec),
            real_tape.kink_signature(&disc.spec),
            fake_tape.kink_signature(&disc.spec),
        ]),
    })
}

/// Checks both halves of the joint loss: the generator objective against
/// the generator parameters and the discriminator loss against the
/// discriminator parameters.
pub fn joint_grad_check(
    gen: &Network,
    disc: &Network,
    input: &Tensor,
    target: &Tensor,
    mask: &Mask,
    train: &TrainConfig,
    cfg: &GradCheckConfig,
) -> Result<(GradCheckReport, GradCheckReport)> {
    let base = joint_eval(gen, disc, input, target, mask, train)?;
    let mut g = gen.clone();
    let mut layers = g.params.layers.clone();
    let gen_report = check_gradients(
        &mut layers,
        &layer_names(&gen.spec),
        &base.gen_grads,
        |ls| {
            g.params.layers = ls.to_vec();
            let e = joint_eval(&g, disc, input, target, mask, train)?;
            Ok(Probe {
                value: e.gen_objective,
                signature: e.signature,
            })
        },
        cfg,
    )?;
    let mut d = disc.clone();
    let mut layers = d.params.layers.clone();
    let disc_report = check_gradients(
        &mut layers,
        &layer_names(&disc.spec),
        &base.disc_grads,
        |ls| {
            d.params.layers = ls.to_vec();
            let e = joint_eval(gen, &d, input, target, mask, train)?;
            Ok(Probe {
                value: e.disc_loss,
                signature: e.signature,
            })
        },
        cfg,
    )?;
    Ok((gen_report, disc_report))
}

/// One small network per layer type, checked under a squared-error loss.
///
/// Activations have no parameters of their own, so each follows a dense
/// layer whose gradients must pass through the activation's backward.
pub fn layer_type_suite(cfg: &GradCheckConfig) -> Result<Vec<(String, GradCheckReport)>> {
    use super::{Activation, LayerSpec};
    use crate::tensor::Shape;
    use rand::Rng;

    let conv = |k, s, p| LayerSpec::Conv {
        out_channels: 3,
        kernel: k,
        stride: s,
        padding: p,
    };
    let dense = LayerSpec::Dense { out_features: 5 };
    let cases: Vec<(&str, Shape, Vec<LayerSpec>)> = vec![
        ("conv", Shape::new(2, 6, 6), vec![conv(4, 2, 1)]),
        (
            "conv_transpose",
            Shape::new(2, 3, 3),
            vec![LayerSpec::ConvTranspose {
                out_channels: 3,
                kernel: 4,
                stride: 2,
                padding: 1,
            }],
        ),
        (
            "channelwise_fc",
            Shape::new(3, 3, 3),
            vec![LayerSpec::ChannelwiseFc],
        ),
        ("dense", Shape::new(2, 3, 3), vec![dense]),
        (
            "relu",
            Shape::flat(7),
            vec![dense, LayerSpec::Activation(Activation::Relu)],
        ),
        (
            "leaky_relu",
            Shape::flat(7),
            vec![
                dense,
                LayerSpec::Activation(Activation::LeakyRelu { slope: 0.2 }),
            ],
        ),
        (
            "tanh",
            Shape::flat(7),
            vec![dense, LayerSpec::Activation(Activation::Tanh)],
        ),
        (
            "sigmoid",
            Shape::flat(7),
            vec![dense, LayerSpec::Activation(Activation::Sigmoid)],
        ),
    ];
    let mut out = Vec::new();
    for (i, (name, input, layers)) in cases.into_iter().enumerate() {
        let spec = NetworkSpec {
            input,
            layers,
            latent_layer: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
        let params = Parameters::init(&spec, &mut rng)?;
        let x = Tensor::from_fn(spec.input, |_, _, _| rng.gen_range(-1.0..1.0));
        let out_shape = spec.output_shape()?;
        let target = Tensor::from_fn(out_shape, |_, _, _| rng.gen_range(-1.0..1.0));
        let report = grad_check(
            &spec,
            &params,
            &x,
            |o| {
                let n = o.len() as f64;
                let d: Vec<f64> = o
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| a - b)
                    .collect();
                let loss = d.iter().map(|v| v * v).sum::<f64>() / n;
                let grad = Tensor::from_vec(o.shape(), d.iter().map(|v| 2.0 * v / n).collect())?;
                Ok((loss, grad))
            },
            cfg,
        )?;
        out.push((name.to_string(), report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::central_mask;
    use crate::nn::{masked_rec_loss, LayerSpec};
    use crate::tensor::Shape;
    use rand::Rng;

    fn mse(out: &Tensor) -> Result<(f64, Tensor)> {
        let n = out.len() as f64;
        let target = |i: usize| (i as f64 * 0.37).sin();
        let loss = out
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - target(i)).powi(2))
            .sum::<f64>()
            / n;
        let grad = Tensor::from_vec(
            out.shape(),
            out.data()
                .iter()
                .enumerate()
                .map(|(i, v)| 2.0 * (v - target(i)) / n)
                .collect(),
        )?;
        Ok((loss, grad))
    }

    #[test]
    fn linear_layer_with_mse() {
        let spec = NetworkSpec {
            input: Shape::flat(6),
            layers: vec![LayerSpec::Dense { out_features: 4 }],
            latent_layer: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = Parameters::init(&spec, &mut rng).unwrap();
        let x = Tensor::from_fn(spec.input, |_, _, _| rng.gen_range(-1.0..1.0));
        let r = grad_check(&spec, &params, &x, mse, &GradCheckConfig::default()).unwrap();
        assert_eq!(r.layers[0].checked, 28);
        assert!(r.max_rel_error() < 1e-8, "{r:?}");
    }

    #[test]
    fn toy_context_encoder_with_masked_loss() {
        let spec = NetworkSpec::context_encoder(8, &[3, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = Parameters::init(&spec, &mut rng).unwrap();
        let x = Tensor::from_fn(spec.input, |_, _, _| rng.gen_range(-1.0..1.0));
        let target = Tensor::from_fn(spec.input, |_, _, _| rng.gen_range(-1.0..1.0));
        let mask = central_mask(8, 8, 0.25).unwrap();
        let r = grad_check(
            &spec,
            &params,
            &x,
            |out| masked_rec_loss(&target, out, &mask),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-6, "{r:?}");
        assert!(r.layers.iter().all(|l| l.checked > 0));
    }

    #[test]
    fn sign_flipped_backward_is_caught() {
        let spec = NetworkSpec {
            input: Shape::flat(5),
            layers: vec![LayerSpec::Dense { out_features: 3 }],
            latent_layer: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = Parameters::init(&spec, &mut rng).unwrap();
        let x = Tensor::from_fn(spec.input, |_, _, _| rng.gen_range(-1.0..1.0));
        let (out, tape) = forward(&spec, &params, &x).unwrap();
        let (analytic, _) = backward(&spec, &params, &tape, &mse(&out).unwrap().1).unwrap();
        let mut corrupted = analytic.clone();
        corrupted.scale(-1.0);
        let mut layers = params.layers.clone();
        let mut p = params.clone();
        let r = check_gradients(
            &mut layers,
            &["dense".into()],
            &corrupted,
            |ls| {
                p.layers = ls.to_vec();
                let (out, _) = forward(&spec, &p, &x)?;
                Ok(Probe {
                    value: mse(&out)?.0,
                    signature: 0,
                })
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error() > 0.1);
        assert_eq!(layers, params.layers, "parameters restored");
    }

    #[test]
    fn every_layer_type_passes() {
        let suite = layer_type_suite(&GradCheckConfig::default()).unwrap();
        assert_eq!(suite.len(), 8);
        for (name, r) in &suite {
            assert!(r.max_rel_error() < 1e-6, "{name}: {r:?}");
            assert!(r.layers.iter().all(|l| l.checked > 0), "{name}");
        }
    }

    #[test]
    fn mutation_hook_flags_the_layer() {
        let spec = NetworkSpec::context_encoder(8, &[3, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = Parameters::init(&spec, &mut rng).unwrap();
        let x = Tensor::from_fn(spec.input, |_, _, _| rng.gen_range(-1.0..1.0));
        let mask = central_mask(8, 8, 0.25).unwrap();
        let cfg = GradCheckConfig {
            mutate_layer: Some(4),
            ..Default::default()
        };
        let r = grad_check(&spec, &params, &x, |o| masked_rec_loss(&x, o, &mask), &cfg).unwrap();
        let bad: Vec<usize> = r
            .layers
            .iter()
            .filter(|l| l.max_rel_error > 1e-5)
            .map(|l| l.layer)
            .collect();
        assert_eq!(bad, vec![4]);
    }

    #[test]
    fn joint_loss_with_discriminator() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen =
            Network::init(NetworkSpec::context_encoder(8, &[3, 4]).unwrap(), &mut rng).unwrap();
        let disc = Network::init(NetworkSpec::discriminator(8, &[4]).unwrap(), &mut rng).unwrap();
        let target = Tensor::from_fn(gen.spec.input, |_, _, _| rng.gen_range(-1.0..1.0));
        let mask = central_mask(8, 8, 0.25).unwrap();
        let input = crate::masking::apply_mask(&target, &mask, &[0.0; 3]).unwrap();
        let train = TrainConfig {
            lambda_adv: 0.3,
            adversarial_enabled: true,
            ..Default::default()
        };
        let (g, d) = joint_grad_check(
            &gen,
            &disc,
            &input,
            &target,
            &mask,
            &train,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(g.max_rel_error() < 1e-6, "{g:?}");
        assert!(d.max_rel_error() < 1e-6, "{d:?}");
        assert!(d.layers.iter().any(|l| l.name == "dense" && l.checked > 0));
    }
}
