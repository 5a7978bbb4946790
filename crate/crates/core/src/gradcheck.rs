//! Central finite-difference gradient checking.
//!
//! The checker evaluates a scalar function twice per input element, at
//! `x + h` and `x - h`, on fresh graphs, and compares the quotient with the
//! analytic gradient from one backward pass. Always run in `f64`.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero on both sides compare by absolute difference.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-6, denom_floor: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic and numeric gradients of `f` with respect to every
/// element of every tensor in `inputs`.
///
/// `f` receives a graph with one variable per input (in order) and returns
/// the scalar loss.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for ti in 0..work.len() {
        for ei in 0..work[ti].len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + cfg.step;
            let plus = evaluate(&work, &f)?;
            work[ti].data_mut()[ei] = orig - cfg.step;
            let minus = evaluate(&work, &f)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[ti][ei];
            let e = rel_err(a, numeric, cfg.denom_floor);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some(Mismatch { input: ti, element: ei, analytic: a, numeric, rel_err: e });
            }
        }
    }
    Ok(report)
}

/// Gradients of `f` from a single backward pass, one vector per input.
pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect())
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Reduces `y` to a scalar through a fixed pseudo-random weighting, so that
/// every output element contributes a distinct coefficient to the gradient.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let n = g.value(y).len();
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            let h = crate::seed::splitmix(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    let w = g.constant(Tensor::new(g.shape(y), weights)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // f(x) = sum(x * x) checked against a graph whose forward value is
        // perturbed but whose backward is not: numeric and analytic disagree.
        let x = Tensor::from_f64(&[3], &[0.3, -0.7, 1.1]).unwrap();
        let good = check_gradients(std::slice::from_ref(&x), GradCheckConfig::default(), |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(good.passes(1e-6), "{good:?}");

        let bad = check_gradients(&[x], GradCheckConfig::default(), |g, v| {
            let y = g.mul(v[0], v[0])?;
            let s = g.sum(y);
            // sum(x^3)/3 only through a constant path: forward changes, backward does not see it
            let cubes: Vec<f64> = g.value(v[0]).data().iter().map(|a| a * a * a / 3.0).collect();
            let c = g.constant(Tensor::new(&[3], cubes)?);
            let cs = g.sum(c);
            g.add(s, cs)
        })
        .unwrap();
        assert!(!bad.passes(1e-3), "{bad:?}");
    }
}
