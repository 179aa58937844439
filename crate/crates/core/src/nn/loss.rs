use rayon::prelude::*;

use super::{Gradients, Network, TrainConfig};
use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

/// Mean squared error over the missing region.
///
/// The sum of squared differences over every channel of every missing pixel
/// is divided by `|M| · channels`. Returns the loss and its gradient with
/// respect to `output`, which is exactly zero on context pixels.
pub fn masked_rec_loss(target: &Tensor, output: &Tensor, mask: &Mask) -> Result<(f64, Tensor)> {
    output.ensure_shape(target.shape())?;
    if mask.height() != target.height() || mask.width() != target.width() {
        return Err(Error::mismatch(
            format!("mask {}x{}", target.height(), target.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let missing = mask.missing_count();
    if missing == 0 {
        return Err(Error::EmptyMask);
    }
    let norm = (missing * target.channels()) as f64;
    let plane = mask.height() * mask.width();
    let mut grad = Tensor::zeros(target.shape());
    let mut sum = 0.0;
    for c in 0..target.channels() {
        let t = &target.data()[c * plane..(c + 1) * plane];
        let o = &output.data()[c * plane..(c + 1) * plane];
        let g = &mut grad.data_mut()[c * plane..(c + 1) * plane];
        for (i, &m) in mask.bits().iter().enumerate() {
            if m {
                let d = o[i] - t[i];
                sum += d * d;
                g[i] = 2.0 * d / norm;
            }
        }
    }
    Ok((sum / norm, grad))
}

/// Binary cross-entropy terms of the adversarial game and their derivatives
/// with respect to the discriminator probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct BceTerms {
    /// `-mean[log D(real) + log(1 - D(fake))]`
    pub disc_loss: f64,
    /// `-mean[log D(fake)]`
    pub gen_loss: f64,
    pub d_disc_d_real: Vec<f64>,
    pub d_disc_d_fake: Vec<f64>,
    pub d_gen_d_fake: Vec<f64>,
}

fn clamped(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, false)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, false)
    } else {
        (p, true)
    }
}

pub fn bce_terms(p_real: &[f64], p_fake: &[f64]) -> Result<BceTerms> {
    if p_real.len() != p_fake.len() {
        return Err(Error::mismatch(
            format!("{} fake samples", p_real.len()),
            p_fake.len(),
        ));
    }
    if p_real.is_empty() {
        return Err(Error::Empty("adversarial batch"));
    }
    let b = p_real.len() as f64;
    let mut disc_loss = 0.0;
    let mut gen_loss = 0.0;
    let mut d_disc_d_real = Vec::with_capacity(p_real.len());
    let mut d_disc_d_fake = Vec::with_capacity(p_real.len());
    let mut d_gen_d_fake = Vec::with_capacity(p_real.len());
    for (&pr, &pf) in p_real.iter().zip(p_fake) {
        let (r, r_live) = clamped(pr);
        let (f, f_live) = clamped(pf);
        disc_loss -= r.ln() + (1.0 - f).ln();
        gen_loss -= f.ln();
        d_disc_d_real.push(if r_live { -1.0 / (r * b) } else { 0.0 });
        d_disc_d_fake.push(if f_live { 1.0 / ((1.0 - f) * b) } else { 0.0 });
        d_gen_d_fake.push(if f_live { -1.0 / (f * b) } else { 0.0 });
    }
    Ok(BceTerms {
        disc_loss: disc_loss / b,
        gen_loss: gen_loss / b,
        d_disc_d_real,
        d_disc_d_fake,
        d_gen_d_fake,
    })
}

/// Result of one discriminator evaluation on a real and a fake batch.
#[derive(Debug, Clone)]
pub struct AdversarialOutcome {
    pub disc_loss: f64,
    /// Non-saturating generator loss.
    pub gen_loss: f64,
    /// Gradient of `disc_loss` with respect to the discriminator parameters.
    pub disc_grads: Gradients,
    /// Gradient of `gen_loss` with respect to each fake sample.
    pub fake_grads: Vec<Tensor>,
}

/// Discriminator and generator losses for equally sized real and fake
/// batches. `disc` must end in a single sigmoid probability.
pub fn adversarial_losses(
    disc: &Network,
    real: &[Tensor],
    fake: &[Tensor],
) -> Result<AdversarialOutcome> {
    if real.len() != fake.len() {
        return Err(Error::mismatch(
            format!("{} fake samples", real.len()),
            fake.len(),
        ));
    }
    let out_shape = disc.spec.output_shape()?;
    if out_shape.len() != 1 {
        return Err(Error::InvalidSpec(format!(
            "discriminator must output one probability, outputs {out_shape}"
        )));
    }
    let run = |batch: &[Tensor]| -> Result<Vec<_>> {
        batch.par_iter().map(|x| disc.forward(x)).collect()
    };
    let real_runs = run(real)?;
    let fake_runs = run(fake)?;
    let p_real: Vec<f64> = real_runs.iter().map(|(o, _)| o.data()[0]).collect();
    let p_fake: Vec<f64> = fake_runs.iter().map(|(o, _)| o.data()[0]).collect();
    let terms = bce_terms(&p_real, &p_fake)?;

    let scalar = |v: f64| Tensor::filled(out_shape, v);
    let real_grads: Vec<Gradients> = real_runs
        .par_iter()
        .zip(&terms.d_disc_d_real)
        .map(|((_, tape), &g)| disc.backward(tape, &scalar(g)).map(|(pg, _)| pg))
        .collect::<Result<_>>()?;
    let fake_parts: Vec<(Gradients, Tensor)> = fake_runs
        .par_iter()
        .zip(terms.d_disc_d_fake.par_iter().zip(&terms.d_gen_d_fake))
        .map(|((_, tape), (&gd, &gg))| {
            let (pg, _) = disc.backward(tape, &scalar(gd))?;
            let (_, input_grad) = disc.backward(tape, &scalar(gg))?;
            Ok((pg, input_grad))
        })
        .collect::<Result<_>>()?;

    let mut disc_grads = Gradients::zeros_like(&disc.params.layers);
    for g in real_grads.iter().chain(fake_parts.iter().map(|(g, _)| g)) {
        disc_grads.accumulate(g);
    }
    Ok(AdversarialOutcome {
        disc_loss: terms.disc_loss,
        gen_loss: terms.gen_loss,
        disc_grads,
        fake_grads: fake_parts.into_iter().map(|(_, g)| g).collect(),
    })
}

/// `λ_rec · rec + λ_adv · adv_gen`, with `λ_adv` forced to zero when
/// adversarial training is off.
pub fn joint_loss(rec: f64, adv_gen: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda_rec * rec + cfg.effective_lambda_adv() * adv_gen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::central_mask;
    use crate::nn::{NetworkSpec, Parameters};
    use crate::tensor::Shape;

    #[test]
    fn perfect_reconstruction_has_zero_loss_and_gradient() {
        let t = Tensor::from_fn(Shape::new(3, 4, 4), |c, y, x| (c + y + x) as f64 * 0.1);
        let mut o = t.clone();
        o.set(0, 0, 0, 5.0); // context pixel, ignored
        let (loss, grad) = masked_rec_loss(&t, &o, &central_mask(4, 4, 0.25).unwrap()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_pixel_hand_computation() {
        let t = Tensor::filled(Shape::new(1, 2, 2), 1.0);
        let o = Tensor::zeros(Shape::new(1, 2, 2));
        let mut m = Mask::empty(2, 2);
        m.fill_rect(1, 0, 1, 1);
        let (loss, grad) = masked_rec_loss(&t, &o, &m).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grad.data(), &[0.0, 0.0, -2.0, 0.0]);
    }

    #[test]
    fn rec_loss_gradient_matches_finite_differences() {
        let t = Tensor::from_fn(Shape::new(3, 6, 6), |c, y, x| {
            ((c * 7 + y * 3 + x) as f64).sin()
        });
        let o = Tensor::from_fn(Shape::new(3, 6, 6), |c, y, x| {
            ((c + y * 5 + x * 2) as f64).cos()
        });
        let m = central_mask(6, 6, 0.4).unwrap();
        let (_, grad) = masked_rec_loss(&t, &o, &m).unwrap();
        let eps = 1e-5;
        for i in 0..o.len() {
            let mut plus = o.clone();
            plus.data_mut()[i] += eps;
            let mut minus = o.clone();
            minus.data_mut()[i] -= eps;
            let fd = (masked_rec_loss(&t, &plus, &m).unwrap().0
                - masked_rec_loss(&t, &minus, &m).unwrap().0)
                / (2.0 * eps);
            let g = grad.data()[i];
            assert!(
                (fd - g).abs() <= 1e-6 * g.abs().max(1e-3),
                "{i}: {fd} vs {g}"
            );
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let t = Tensor::zeros(Shape::new(1, 2, 2));
        assert!(matches!(
            masked_rec_loss(&t, &t, &Mask::empty(2, 2)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn bce_limits() {
        let t = bce_terms(&[1.0 - PROB_EPS], &[PROB_EPS]).unwrap();
        assert!(t.disc_loss < 1e-6);
        let half = bce_terms(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((half.disc_loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((half.gen_loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_terms(&[0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn bce_derivatives_match_finite_differences() {
        let pr = [0.3, 0.8, 0.55];
        let pf = [0.1, 0.6, 0.45];
        let t = bce_terms(&pr, &pf).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            let mut a = pr;
            let mut b = pr;
            a[i] += eps;
            b[i] -= eps;
            let fd = (bce_terms(&a, &pf).unwrap().disc_loss
                - bce_terms(&b, &pf).unwrap().disc_loss)
                / (2.0 * eps);
            assert!((fd - t.d_disc_d_real[i]).abs() < 1e-7);
            let mut a = pf;
            let mut b = pf;
            a[i] += eps;
            b[i] -= eps;
            let fd = (bce_terms(&pr, &a).unwrap().disc_loss
                - bce_terms(&pr, &b).unwrap().disc_loss)
                / (2.0 * eps);
            assert!((fd - t.d_disc_d_fake[i]).abs() < 1e-7);
            let fd = (bce_terms(&pr, &a).unwrap().gen_loss - bce_terms(&pr, &b).unwrap().gen_loss)
                / (2.0 * eps);
            assert!((fd - t.d_gen_d_fake[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn half_probability_discriminator() {
        let spec = NetworkSpec::discriminator(8, &[2]).unwrap();
        let disc = Network::new(spec.clone(), Parameters::zeros(&spec).unwrap()).unwrap();
        let real = vec![Tensor::filled(spec.input, 0.3); 2];
        let fake = vec![Tensor::filled(spec.input, -0.3); 2];
        let out = adversarial_losses(&disc, &real, &fake).unwrap();
        assert!((out.disc_loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.fake_grads.len(), 2);
        assert!(adversarial_losses(&disc, &real, &fake[..1]).is_err());
    }

    #[test]
    fn joint_loss_weights() {
        let mut cfg = TrainConfig {
            lambda_rec: 0.999,
            adversarial_enabled: true,
            lambda_adv: 0.001,
            ..TrainConfig::default()
        };
        assert!((joint_loss(1.0, 2.0, &cfg) - 1.001).abs() < 1e-15);
        cfg.adversarial_enabled = false;
        cfg.lambda_adv = 0.0;
        assert_eq!(joint_loss(1.5, 2.0, &cfg), 0.999 * 1.5);
    }
}
