//! Adversarial, cycle-reconstruction and shape-preservation objectives.
//!
//! The differentiable versions operate on [`Graph`] variables and are what
//! training uses. The tensor-level functions wrap them for one-off
//! evaluation.
//!
//! Sign conventions: the discriminator term is reported with its
//! log-likelihood sign, `E[ln σ(D(real))] + E[ln(1 - σ(D(fake)))]`, which the
//! discriminator maximizes. Generators minimize the non-saturating
//! `-E[ln σ(D(fake))]`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the cycle-reconstruction term.
    pub lambda_cyc: f64,
    /// Weight of the shape-preservation term.
    pub lambda_shape: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cyc: 10.0, lambda_shape: 1.0 }
    }
}

impl LossWeights {
    pub fn problems(&self) -> Vec<Error> {
        [("weights.lambda_cyc", self.lambda_cyc), ("weights.lambda_shape", self.lambda_shape)]
            .into_iter()
            .filter(|(_, v)| !v.is_finite() || *v < 0.0)
            .map(|(name, v)| Error::validation(name, format!("{v} must be finite and non-negative")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Values of every objective term for one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_gan1: f64,
    pub l_gan2: f64,
    pub l_gan: f64,
    pub l_cyc1: f64,
    pub l_cyc2: f64,
    pub l_cyc: f64,
    pub l_shape: f64,
    pub l_total: f64,
}

impl LossReport {
    /// Checks the averaging and weighting identities within `1e-6`.
    pub fn is_consistent(&self, w: &LossWeights) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (1.0 + b.abs());
        close(self.l_gan, 0.5 * (self.l_gan1 + self.l_gan2))
            && close(self.l_cyc, 0.5 * (self.l_cyc1 + self.l_cyc2))
            && close(self.l_total, self.l_gan + w.lambda_cyc * self.l_cyc + w.lambda_shape * self.l_shape)
    }
}

/// Adversarial terms of one step, in both translation directions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdversarialTerms {
    /// Log-likelihood value of the target-domain discriminator.
    pub l_gan1: f64,
    /// Log-likelihood value of the source-domain discriminator.
    pub l_gan2: f64,
    /// Non-saturating generator loss against the target-domain discriminator.
    pub g_adv1: f64,
    /// Non-saturating generator loss against the source-domain discriminator.
    pub g_adv2: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CycleTerms {
    pub l_cyc1: f64,
    pub l_cyc2: f64,
    pub l_cyc: f64,
}

/// Quantity each network group minimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoleTargets {
    pub discriminator: f64,
    pub generator: f64,
    pub segmentor: f64,
}

/// `E[ln σ(real)] + E[ln(1 - σ(fake))]` as a graph node.
pub fn adversarial_d<T: Scalar>(g: &mut Graph<T>, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let r = g.log_sigmoid_mean(real_scores, true)?;
    let f = g.log_sigmoid_mean(fake_scores, false)?;
    g.add(r, f)
}

/// `-E[ln σ(fake)]` as a graph node.
pub fn adversarial_g<T: Scalar>(g: &mut Graph<T>, fake_scores: Var) -> Result<Var> {
    let l = g.log_sigmoid_mean(fake_scores, true)?;
    Ok(g.scale(l, -1.0))
}

/// Mean absolute reconstruction error.
pub fn cycle<T: Scalar>(g: &mut Graph<T>, original: Var, reconstructed: Var) -> Result<Var> {
    g.mean_abs_diff(reconstructed, original)
}

/// Mean pixel cross-entropy between source masks and segmentor logits.
pub fn shape<T: Scalar>(g: &mut Graph<T>, mask: &[u8], logits: Var) -> Result<Var> {
    g.softmax_cross_entropy(logits, mask)
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Discriminator log-likelihood value for raw score maps.
pub fn adversarial_loss_d<T: Scalar>(real_scores: &Tensor<T>, fake_scores: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let r = g.constant(real_scores.clone());
    let f = g.constant(fake_scores.clone());
    let v = adversarial_d(&mut g, r, f)?;
    Ok(g.value(v).item())
}

pub fn adversarial_loss_g<T: Scalar>(fake_scores: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let f = g.constant(fake_scores.clone());
    let v = adversarial_g(&mut g, f)?;
    Ok(g.value(v).item())
}

/// Returns `(l_cyc1, l_cyc2, l_cyc)`.
pub fn cycle_loss<T: Scalar>(x: &Tensor<T>, x_rec: &Tensor<T>, y: &Tensor<T>, y_rec: &Tensor<T>) -> Result<(T, T, T)> {
    for (t, what) in [(x, "x"), (x_rec, "x_rec"), (y, "y"), (y_rec, "y_rec")] {
        check_finite(t, what)?;
    }
    let mut g = Graph::new();
    let vars = [x, x_rec, y, y_rec].map(|t| g.constant(t.clone()));
    let c1 = cycle(&mut g, vars[0], vars[1])?;
    let c2 = cycle(&mut g, vars[2], vars[3])?;
    let (c1, c2) = (g.value(c1).item(), g.value(c2).item());
    Ok((c1, c2, (c1 + c2) / T::c(2.0)))
}

/// Cross-entropy of `(B, 4, S, S)` logits against a `B * S * S` label mask.
pub fn shape_loss<T: Scalar>(mask: &[u8], logits: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = shape(&mut g, mask, l)?;
    Ok(g.value(v).item())
}

/// Combines the three blocks into the overall objective and the per-role
/// minimization targets.
pub fn total_objective(
    adv: &AdversarialTerms,
    cyc: &CycleTerms,
    l_shape: f64,
    w: &LossWeights,
) -> Result<(LossReport, RoleTargets)> {
    w.validate()?;
    let parts = [adv.l_gan1, adv.l_gan2, adv.g_adv1, adv.g_adv2, cyc.l_cyc1, cyc.l_cyc2, cyc.l_cyc, l_shape];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss components".into()));
    }
    let l_gan = 0.5 * (adv.l_gan1 + adv.l_gan2);
    let l_total = l_gan + w.lambda_cyc * cyc.l_cyc + w.lambda_shape * l_shape;
    let report = LossReport {
        l_gan1: adv.l_gan1,
        l_gan2: adv.l_gan2,
        l_gan,
        l_cyc1: cyc.l_cyc1,
        l_cyc2: cyc.l_cyc2,
        l_cyc: cyc.l_cyc,
        l_shape,
        l_total,
    };
    let targets = RoleTargets {
        discriminator: -l_gan,
        generator: 0.5 * (adv.g_adv1 + adv.g_adv2) + w.lambda_cyc * cyc.l_cyc + w.lambda_shape * l_shape,
        segmentor: l_shape,
    };
    Ok((report, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn sig(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    fn clamp(p: f64) -> f64 {
        p.clamp(1e-7, 1.0 - 1e-7)
    }

    #[test]
    fn discriminator_value_at_chance() {
        let z = Tensor::<f64>::zeros(&[2, 1, 8, 8]);
        assert_abs_diff_eq!(adversarial_loss_d(&z, &z).unwrap(), 2.0 * 0.5f64.ln(), epsilon = 1e-6);
        assert_abs_diff_eq!(adversarial_loss_d(&z, &z).unwrap(), -1.3863, epsilon = 1e-4);
    }

    #[test]
    fn discriminator_value_at_perfect_separation() {
        let real = Tensor::<f64>::full(&[1, 1, 4, 4], 40.0);
        let fake = Tensor::<f64>::full(&[1, 1, 4, 4], -40.0);
        let v = adversarial_loss_d(&real, &fake).unwrap();
        assert!(v > -0.01 && v <= 0.0, "{v}");
    }

    #[test]
    fn discriminator_value_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let real = random(&[2, 1, 8, 8], &mut rng, 4.0);
        let fake = random(&[2, 1, 8, 8], &mut rng, 4.0);
        let mut a = 0.0;
        let mut b = 0.0;
        for i in 0..128 {
            a += clamp(sig(real.data()[i])).ln();
            b += (1.0 - clamp(sig(fake.data()[i]))).ln();
        }
        let want = a / 128.0 + b / 128.0;
        assert_abs_diff_eq!(adversarial_loss_d(&real, &fake).unwrap(), want, epsilon = 1e-9);
    }

    #[test]
    fn generator_loss_cases() {
        let z = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert_abs_diff_eq!(adversarial_loss_g(&z).unwrap(), 0.6931, epsilon = 1e-4);
        let confident = Tensor::<f64>::full(&[1, 1, 4, 4], 30.0);
        assert!(adversarial_loss_g(&confident).unwrap() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = random(&[2, 1, 8, 8], &mut rng, 3.0);
        let want = -f.data().iter().map(|&s| clamp(sig(s)).ln()).sum::<f64>() / 128.0;
        assert_abs_diff_eq!(adversarial_loss_g(&f).unwrap(), want, epsilon = 1e-9);
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let mut bad = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        bad.data_mut()[1] = f64::NAN;
        assert!(matches!(adversarial_loss_g(&bad), Err(Error::NonFinite(_))));
        assert!(matches!(adversarial_loss_d(&bad, &bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cycle_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&[2, 1, 4, 4], &mut rng, 1.0);
        let y = random(&[2, 1, 4, 4], &mut rng, 1.0);
        assert_eq!(cycle_loss(&x, &x, &y, &y).unwrap(), (0.0, 0.0, 0.0));
        let shifted = x.map(|v| v + 0.5);
        let (a, b, c) = cycle_loss(&x, &shifted, &y, &y).unwrap();
        assert_abs_diff_eq!(a, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c, 0.25, epsilon = 1e-12);

        let xr = random(&[2, 1, 4, 4], &mut rng, 1.0);
        let yr = random(&[2, 1, 4, 4], &mut rng, 1.0);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for i in 0..32 {
            s1 += (xr.data()[i] - x.data()[i]).abs();
            s2 += (yr.data()[i] - y.data()[i]).abs();
        }
        let (a, b, c) = cycle_loss(&x, &xr, &y, &yr).unwrap();
        assert_abs_diff_eq!(a, s1 / 32.0, epsilon = 1e-9);
        assert_abs_diff_eq!(b, s2 / 32.0, epsilon = 1e-9);
        assert_abs_diff_eq!(c, (s1 + s2) / 64.0, epsilon = 1e-9);
    }

    #[test]
    fn cycle_loss_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let b = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(cycle_loss(&a, &b, &a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn shape_loss_cases() {
        let mask: Vec<u8> = (0..16).map(|i| (i % 4) as u8).collect();
        let uniform = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        assert_abs_diff_eq!(shape_loss(&mask[..4], &uniform).unwrap(), 4f64.ln(), epsilon = 1e-12);

        let mut peaked = Tensor::<f64>::zeros(&[1, 4, 4, 4]);
        for (p, &m) in mask.iter().enumerate() {
            peaked.data_mut()[m as usize * 16 + p] = 20.0;
        }
        assert!(shape_loss(&mask, &peaked).unwrap() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let logits = random(&[1, 4, 4, 4], &mut rng, 3.0);
        let labels: Vec<u8> = (0..16).map(|_| rng.gen_range(0..4)).collect();
        let mut want = 0.0;
        for p in 0..16 {
            let z: f64 = (0..4).map(|c| logits.data()[c * 16 + p].exp()).sum();
            want -= (logits.data()[labels[p] as usize * 16 + p].exp() / z).ln();
        }
        assert_abs_diff_eq!(shape_loss(&labels, &logits).unwrap(), want / 16.0, epsilon = 1e-9);
    }

    #[test]
    fn shape_loss_rejects_bad_masks() {
        let logits = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        assert!(matches!(shape_loss(&[0, 1, 2, 4], &logits), Err(Error::Validation { .. })));
        assert!(matches!(shape_loss(&[0, 1, 2], &logits), Err(Error::Shape(_))));
    }

    #[test]
    fn total_objective_arithmetic() {
        let w = LossWeights { lambda_cyc: 10.0, lambda_shape: 1.0 };
        let adv = AdversarialTerms { l_gan1: -1.3863, l_gan2: -1.3863, ..Default::default() };
        let (r, _) = total_objective(&adv, &CycleTerms::default(), 0.0, &w).unwrap();
        assert_abs_diff_eq!(r.l_total, -1.3863, epsilon = 1e-6);

        let cyc = CycleTerms { l_cyc1: 0.5, l_cyc2: 0.0, l_cyc: 0.25 };
        let (r, t) = total_objective(&AdversarialTerms::default(), &cyc, 1.3863, &w).unwrap();
        assert_abs_diff_eq!(r.l_total, 3.8863, epsilon = 1e-6);
        assert!(r.is_consistent(&w));
        assert_abs_diff_eq!(t.segmentor, 1.3863, epsilon = 1e-12);
        assert_abs_diff_eq!(t.generator, 3.8863, epsilon = 1e-6);

        let zero = LossWeights { lambda_cyc: 0.0, lambda_shape: 0.0 };
        let adv = AdversarialTerms { l_gan1: -0.7, l_gan2: -0.9, g_adv1: 0.3, g_adv2: 0.1 };
        let (r, t) = total_objective(&adv, &cyc, 2.0, &zero).unwrap();
        assert_eq!(r.l_total, r.l_gan);
        assert_eq!(t.discriminator, -r.l_gan);
    }

    #[test]
    fn negative_weights_are_rejected() {
        let w = LossWeights { lambda_cyc: -1.0, lambda_shape: 1.0 };
        assert!(w.validate().is_err());
    }
}
