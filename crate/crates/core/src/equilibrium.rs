//! DC operating point `0 = f(x₀, u₀)` and its sensitivity to the parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ctrnn, RealizedGrad};
use crate::numerics::{norm_inf, solve_linear, Lu, Matrix};
use crate::solver::{integrate, SolverConfig};

pub const DEFAULT_DC_TOL: f64 = 1e-9;
pub const DEFAULT_DC_MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 20;
/// Fallback integration horizon in units of τ.
const FALLBACK_HORIZON_TAUS: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcMethod {
    Newton,
    IntegrateFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcResult {
    pub x0: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub method: DcMethod,
}

/// Outcome of a damped Newton run.
#[derive(Clone, Debug)]
pub struct NewtonOutcome {
    pub x: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Damped Newton–Raphson with step halving until the residual infinity norm
/// decreases. Stops on convergence, stagnation, or `max_iter`.
pub fn newton<R, J>(mut residual: R, mut jacobian: J, guess: &[f64], tol: f64, max_iter: usize) -> NewtonOutcome
where
    R: FnMut(&[f64]) -> Vec<f64>,
    J: FnMut(&[f64]) -> Matrix,
{
    let mut x = guess.to_vec();
    let mut r = residual(&x);
    let mut rn = norm_inf(&r);
    for it in 0..max_iter {
        if rn <= tol {
            return NewtonOutcome { x, residual: rn, iterations: it, converged: true };
        }
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let Ok(dx) = solve_linear(&jacobian(&x), &neg) else {
            break;
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + alpha * d).collect();
            let tr = residual(&trial);
            let tn = norm_inf(&tr);
            if tn < rn {
                x = trial;
                r = tr;
                rn = tn;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return NewtonOutcome { x, residual: rn, iterations: it + 1, converged: rn <= tol };
        }
    }
    NewtonOutcome { converged: rn <= tol, x, residual: rn, iterations: max_iter }
}

/// Central-difference Jacobian, for small plumbing systems without an
/// analytic derivative.
pub fn fd_jacobian(mut f: impl FnMut(&[f64]) -> Vec<f64>, x: &[f64]) -> Matrix {
    let n = x.len();
    let mut j = Matrix::zeros(n, n);
    let mut xp = x.to_vec();
    for c in 0..n {
        let h = 1e-6 * x[c].abs().max(1.0);
        xp[c] = x[c] + h;
        let fp = f(&xp);
        xp[c] = x[c] - h;
        let fm = f(&xp);
        xp[c] = x[c];
        for r in 0..n {
            j[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    j
}

/// DC operating point of the network under constant input `u0`.
///
/// Newton from `guess`; if Newton stagnates and the network carries the
/// stability construction, the constant-input dynamics are integrated
/// toward the (unique, globally attracting) equilibrium and then polished.
pub fn solve_dc(net: &Ctrnn, u0: &[f64], guess: &[f64], tol: f64, max_iter: usize) -> Result<DcResult> {
    let d = net.dims();
    if u0.len() != d.m || guess.len() != d.n {
        return Err(Error::DimensionMismatch(format!("u0/guess lengths {}/{} vs m={} n={}", u0.len(), guess.len(), d.m, d.n)));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    let residual = |x: &[f64]| {
        let mut out = vec![0.0; x.len()];
        net.eval_into(x, u0, &mut out);
        out
    };
    let first = newton(residual, |x| net.jacobian_x(x, u0), guess, tol, max_iter);
    if first.converged {
        return Ok(DcResult { x0: first.x, residual_norm: first.residual, iterations: first.iterations, method: DcMethod::Newton });
    }
    if !net.constrained {
        return Err(Error::NoConvergence { residual: first.residual, best: first.x });
    }

    let cfg = SolverConfig { h_max: net.tau, h_init: 1e-3 * net.tau, ..SolverConfig::with_tolerances(1e-10, 1e-12) };
    let mut x = first.x.clone();
    let mut iterations = first.iterations;
    let chunk = 5.0 * net.tau;
    let mut elapsed = 0.0;
    let mut best = (first.residual, first.x);
    while elapsed < FALLBACK_HORIZON_TAUS * net.tau {
        let tr = integrate(|_, x, dx| net.eval_into(x, u0, dx), &x, (0.0, chunk), &cfg, &[])?;
        x = tr.last().to_vec();
        elapsed += chunk;
        iterations += tr.len() - 1;
        let polished = newton(residual, |x| net.jacobian_x(x, u0), &x, tol, max_iter);
        iterations += polished.iterations;
        if polished.converged {
            return Ok(DcResult {
                x0: polished.x,
                residual_norm: polished.residual,
                iterations,
                method: DcMethod::IntegrateFallback,
            });
        }
        if polished.residual < best.0 {
            best = (polished.residual, polished.x);
        }
    }
    Err(Error::NoConvergence { residual: best.0, best: best.1 })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub starts: usize,
    pub solved: usize,
    pub failures: Vec<String>,
    /// Largest infinity-norm distance between any solution and the first.
    pub max_spread: f64,
    pub pass: bool,
}

/// Solves the DC problem from `starts` random guesses (uniform in
/// `[-10, 10]ⁿ`) and checks that all solutions agree within 1e-6.
pub fn dc_uniqueness_probe(net: &Ctrnn, u0: &[f64], starts: usize, seed: u64) -> UniquenessReport {
    let n = net.dims().n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sols: Vec<Vec<f64>> = Vec::new();
    let mut failures = Vec::new();
    for _ in 0..starts {
        let guess: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        match solve_dc(net, u0, &guess, DEFAULT_DC_TOL, DEFAULT_DC_MAX_ITER) {
            Ok(r) => sols.push(r.x0),
            Err(e) => failures.push(e.to_string()),
        }
    }
    let max_spread = sols
        .iter()
        .map(|s| s.iter().zip(&sols[0]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
        .fold(0.0, f64::max);
    UniquenessReport {
        starts,
        solved: sols.len(),
        pass: failures.is_empty() && max_spread <= 1e-6,
        failures,
        max_spread,
    }
}

/// Implicit-function-theorem sensitivity of the DC point:
/// `dx₀/dθ = −(∂f/∂x)⁻¹ ∂f/∂θ`.
pub struct DcSensitivity {
    lu: Lu,
    x0: Vec<f64>,
    u0: Vec<f64>,
}

impl DcSensitivity {
    pub fn new(net: &Ctrnn, u0: &[f64], x0: &[f64]) -> Result<Self> {
        let lu = Lu::factor(&net.jacobian_x(x0, u0))?;
        Ok(Self { lu, x0: x0.to_vec(), u0: u0.to_vec() })
    }

    /// Given `dL/dx₀`, accumulates `dL/dθ` into `grad`.
    pub fn pullback(&self, net: &Ctrnn, x0_bar: &[f64], grad: &mut RealizedGrad) {
        let neg: Vec<f64> = x0_bar.iter().map(|v| -v).collect();
        let lambda = self.lu.solve_transpose(&neg);
        net.vjp(&self.x0, &self.u0, &lambda, grad);
    }

    /// Directional sensitivity `dx₀ = −J⁻¹ (∂f/∂θ · dθ)` for a given
    /// parameter-direction image `df = ∂f/∂θ · dθ`.
    pub fn push_forward(&self, df: &[f64]) -> Vec<f64> {
        self.lu.solve(df).into_iter().map(|v| -v).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::{random, scalar};
    use crate::model::{CtrnnParams, Dims, Nonlinearity};

    #[test]
    fn linear_model_closed_form() {
        let mut p = CtrnnParams::zeros(Dims { n: 3, l: 3, m: 1, p: 1 }, Nonlinearity::Relu);
        p.log_tau = 0.4f64.ln();
        p.nu = vec![1.0, -2.0, 0.5];
        let net = p.realize().unwrap();
        let r = solve_dc(&net, &[0.3], &[0.0; 3], 1e-12, 10).unwrap();
        assert_eq!(r.iterations, 1);
        for (x, nu) in r.x0.iter().zip(&p.nu) {
            assert!((x - 0.4 * nu).abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_active_region() {
        let mut p = scalar(0.5, 0.5, 1.0);
        p.b[(0, 0)] = 1.0;
        p.constrained = false;
        let net = p.realize().unwrap();
        let r = solve_dc(&net, &[1.0], &[0.0], 1e-12, 50).unwrap();
        assert!((r.x0[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dead_relu_gives_leak_equilibrium() {
        let mut p = scalar(0.0, 1.0, 2.0);
        p.b[(0, 0)] = 1.0;
        p.mu = vec![-1.0];
        p.nu = vec![0.25];
        let net = p.realize().unwrap();
        let r = solve_dc(&net, &[-3.0], &[0.0], 1e-12, 50).unwrap();
        assert!((r.x0[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn random_constrained_models_agree_from_many_starts() {
        let d = Dims { n: 3, l: 6, m: 2, p: 1 };
        for seed in 0..30 {
            let net = random(d, seed, 1.5).realize().unwrap();
            let rep = dc_uniqueness_probe(&net, &[0.2, -0.4], 10, seed);
            assert!(rep.pass, "seed {seed}: {rep:?}");
        }
        let lin = CtrnnParams::zeros(d, Nonlinearity::Relu).realize().unwrap();
        assert!(dc_uniqueness_probe(&lin, &[0.0, 0.0], 5, 1).pass);
        let a = dc_uniqueness_probe(&random(d, 3, 1.0).realize().unwrap(), &[0.1, 0.1], 4, 9);
        let b = dc_uniqueness_probe(&random(d, 3, 1.0).realize().unwrap(), &[0.1, 0.1], 4, 9);
        assert_eq!(a.max_spread, b.max_spread);
    }

    #[test]
    fn linear_sensitivity_wrt_nu_and_log_tau() {
        let d = Dims { n: 2, l: 2, m: 1, p: 1 };
        let mut p = CtrnnParams::zeros(d, Nonlinearity::Relu);
        p.log_tau = 0.7f64.ln();
        p.nu = vec![0.3, -1.2];
        let net = p.realize().unwrap();
        let dc = solve_dc(&net, &[0.0], &[0.0, 0.0], 1e-12, 10).unwrap();
        let sens = DcSensitivity::new(&net, &[0.0], &dc.x0).unwrap();
        for k in 0..2 {
            let mut e = vec![0.0; 2];
            e[k] = 1.0;
            let mut g = RealizedGrad::zeros(d);
            sens.pullback(&net, &e, &mut g);
            // row k of dx0/dnu is τ e_k
            for j in 0..2 {
                let expect = if j == k { 0.7 } else { 0.0 };
                assert!((g.nu[j] - expect).abs() < 1e-14);
            }
            let dlogtau = p.pullback(&g).unwrap().log_tau;
            assert!((dlogtau - 0.7 * p.nu[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn sensitivity_matches_finite_differences() {
        let d = Dims { n: 3, l: 5, m: 2, p: 1 };
        let u0 = [0.3, -0.5];
        let mut checked = 0;
        for seed in 0..10 {
            let mut p = random(d, 40 + seed, 1.0);
            p.nonlinearity = Nonlinearity::Tanh;
            let net = p.realize().unwrap();
            let x0 = solve_dc(&net, &u0, &[0.0; 3], 1e-13, 100).unwrap().x0;
            let sens = DcSensitivity::new(&net, &u0, &x0).unwrap();
            let cot = [0.5, -1.0, 2.0];
            let mut g = RealizedGrad::zeros(d);
            sens.pullback(&net, &cot, &mut g);
            let grad = p.pullback(&g).unwrap().to_flat();
            if p.rho_parts().unwrap().pre_relu.abs() < 1e-4 {
                continue;
            }
            checked += 1;
            let base = p.to_flat();
            let obj = |flat: &[f64]| {
                let mut q = p.clone();
                q.set_flat(flat).unwrap();
                let x = solve_dc(&q.realize().unwrap(), &u0, &x0, 1e-14, 100).unwrap().x0;
                cot.iter().zip(&x).map(|(c, v)| c * v).sum::<f64>()
            };
            for k in 0..base.len() {
                let mut fp = base.clone();
                let mut fm = base.clone();
                fp[k] += 1e-5;
                fm[k] -= 1e-5;
                let fd = (obj(&fp) - obj(&fm)) / 2e-5;
                assert!((fd - grad[k]).abs() <= 1e-4 * fd.abs().max(1.0), "seed {seed} k {k}: {fd} vs {}", grad[k]);
            }
        }
        assert!(checked >= 5);
    }
}
