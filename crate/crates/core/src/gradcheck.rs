//! Directional finite-difference checks of reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// `(analytic, numeric)` directional derivatives at the worst probe.
    pub worst: (f64, f64),
}

/// Compares `<grad f, r>` with `(f(θ + h r) - f(θ - h r)) / 2h` for `probes`
/// random Gaussian directions `r` over all of `inputs`.
///
/// `f` receives the inputs registered in a fresh graph and must return a
/// single-element node.
pub fn check_directional<F>(inputs: &[Tensor<f64>], f: F, probes: usize, step: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |shift: &[Tensor<f64>], sign: f64| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(shift)
            .map(|(t, r)| {
                let mut p = t.clone();
                for (a, &b) in p.data_mut().iter_mut().zip(r.data()) {
                    *a += sign * step * b;
                }
                g.constant(p)
            })
            .collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { probes, max_rel_err: 0.0, worst: (0.0, 0.0) };
    for _ in 0..probes {
        let dir: Vec<Tensor<f64>> = inputs
            .iter()
            .map(|t| {
                let data = (0..t.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                Tensor::from_vec(t.shape(), data).expect("same shape")
            })
            .collect();
        let a: f64 = analytic
            .iter()
            .zip(&dir)
            .map(|(g, r)| g.data().iter().zip(r.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        let n = (eval(&dir, 1.0)? - eval(&dir, -1.0)?) / (2.0 * step);
        if !a.is_finite() || !n.is_finite() {
            return Err(Error::NonFinite("gradient check".into()));
        }
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (a, n);
        }
    }
    Ok(report)
}
