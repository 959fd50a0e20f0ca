//! Numeric stability certificates for CTRNN parameter sets.
//!
//! The operative check is the Lyapunov-diagonal-stability matrix
//! `Ω(AW − I/τ) + (WᵀAᵀ − I/τ)Ω`, whose largest eigenvalue must sit below
//! `−2δ/(τ(ρ+1))·min ωᵢ` whenever `A` comes out of the ISS scaling. The
//! Lur'e–Postnikov function and the two trajectory probes are diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_dc, DEFAULT_DC_MAX_ITER, DEFAULT_DC_TOL};
use crate::error::{Error, Result};
use crate::model::{Ctrnn, CtrnnParams, Nonlinearity};
use crate::numerics::{dot, norm2, sym_lambda_max, sym_lambda_min, DiagPos, Matrix};
use crate::solver::{integrate, integrate_driven, SolverConfig, StepMode, Trajectory};

/// Absolute slack on the certificate, covering Jacobi round-off.
pub const CERTIFICATE_TOL: f64 = 1e-8;
/// `λ_min(AᵀA)` threshold for the full-rank check.
pub const RANK_TOL: f64 = 1e-8;
/// Grid of scalar `P = pI` candidates tried by the dissipation probe.
pub const P_GRID: [f64; 5] = [1e-2, 1e-1, 1.0, 1e1, 1e2];
pub const MONOTONE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `λ_max` of the LDS matrix; negative certifies diagonal stability.
    pub lds_margin: f64,
    pub rho: f64,
    /// `−2δ/(τ(ρ+1))·min ωᵢ`
    pub margin_bound: f64,
    pub satisfied: bool,
    pub rank_a_full: bool,
    pub constrained: bool,
    pub tau: f64,
    pub min_omega: f64,
}

/// `λ_max(Ω(AW − I/τ) + (WᵀAᵀ − I/τ)Ω)`
pub fn lds_margin(a: &Matrix, w: &Matrix, tau: f64, omega: &DiagPos) -> Result<f64> {
    Ok(sym_lambda_max(&lds_matrix(a, w, tau, omega)?)?)
}

pub fn lds_matrix(a: &Matrix, w: &Matrix, tau: f64, omega: &DiagPos) -> Result<Matrix> {
    let l = a.rows();
    if w.rows() != a.cols() || w.cols() != l || omega.dim() != l {
        return Err(Error::DimensionMismatch(format!(
            "A {:?}, W {:?}, Omega dim {}",
            a.shape(),
            w.shape(),
            omega.dim()
        )));
    }
    let mut core = a.matmul(w)?;
    for i in 0..l {
        core[(i, i)] -= 1.0 / tau;
    }
    let om = omega.values();
    let mut m = Matrix::zeros(l, l);
    for i in 0..l {
        for j in 0..l {
            m[(i, j)] = om[i] * core[(i, j)] + core[(j, i)] * om[j];
        }
    }
    Ok(m)
}

pub fn certify(params: &CtrnnParams) -> StabilityReport {
    let tau = params.tau();
    let min_omega = params.omega.min_value();
    let failed = |rho: f64| StabilityReport {
        lds_margin: f64::NAN,
        rho,
        margin_bound: f64::NAN,
        satisfied: false,
        rank_a_full: false,
        constrained: params.constrained,
        tau,
        min_omega,
    };
    let (Ok(rho), Ok(a)) = (params.rho(), params.effective_a()) else {
        return failed(f64::NAN);
    };
    let Ok(margin) = lds_margin(&a, &params.w, tau, &params.omega) else {
        return failed(rho);
    };
    let rank_a_full = a.transpose().matmul(&a).and_then(|g| sym_lambda_min(&g)).map(|v| v > RANK_TOL).unwrap_or(false);
    let bound = -2.0 * params.delta / (tau * (rho + 1.0)) * min_omega;
    StabilityReport {
        lds_margin: margin,
        rho,
        margin_bound: bound,
        satisfied: margin <= bound + CERTIFICATE_TOL && rank_a_full,
        rank_a_full,
        constrained: params.constrained,
        tau,
        min_omega,
    }
}

fn check_pd(p: &Matrix) -> Result<()> {
    if !p.is_square() || sym_lambda_min(p)? <= 0.0 {
        return Err(Error::InvalidInput("P must be symmetric positive definite".into()));
    }
    Ok(())
}

/// Lur'e–Postnikov function `xᵀPx + 2 Σ ωᵢ ∫₀^{Aᵢx} σ(r) dr`.
pub fn lyapunov_v(x: &[f64], a: &Matrix, omega: &DiagPos, p: &Matrix, kind: Nonlinearity) -> Result<f64> {
    check_pd(p)?;
    if x.len() != p.rows() || a.cols() != x.len() || a.rows() != omega.dim() {
        return Err(Error::DimensionMismatch("lyapunov_v operand shapes".into()));
    }
    let quad = dot(x, &p.matvec(x));
    let ax = a.matvec(x);
    let integral: f64 = omega.values().iter().zip(&ax).map(|(w, z)| w * kind.integral(*z)).sum();
    Ok(quad + 2.0 * integral)
}

/// The same function re-centred at an equilibrium `x_e` whose hidden
/// pre-activation is `z_e`: the nonlinearity becomes
/// `σ(r + z_e) − σ(z_e)`, still sector-bounded.
struct ShiftedLure<'a> {
    net: &'a Ctrnn,
    omega: Vec<f64>,
    x_eq: Vec<f64>,
    z_eq: Vec<f64>,
}

impl ShiftedLure<'_> {
    fn eval(&self, x: &[f64], p_scale: f64) -> f64 {
        let dx: Vec<f64> = x.iter().zip(&self.x_eq).map(|(a, b)| a - b).collect();
        let adx = self.net.a.matvec(&dx);
        let kind = self.net.kind;
        let integral: f64 = (0..self.omega.len())
            .map(|i| {
                let ze = self.z_eq[i];
                let s = adx[i];
                self.omega[i] * (kind.integral(ze + s) - kind.integral(ze) - kind.eval(ze) * s)
            })
            .sum();
        p_scale * dot(&dx, &dx) + 2.0 * integral
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DissipationReport {
    pub pass: bool,
    /// First grid value of `p` (with `P = pI`) giving a non-increasing V.
    pub p_scale: Option<f64>,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Largest sample-to-sample increase of V for the reported `p`.
    pub max_violation: f64,
}

/// Integrates the unforced network from `x0` and checks that the
/// Lur'e–Postnikov function (centred at the unforced equilibrium) never
/// increases along the sampled trajectory.
pub fn dissipation_probe(params: &CtrnnParams, x0: &[f64], horizon: f64, cfg: &SolverConfig) -> Result<DissipationReport> {
    let net = params.realize()?;
    let d = net.dims();
    let zero_u = vec![0.0; d.m];
    let eq = solve_dc(&net, &zero_u, &vec![0.0; d.n], DEFAULT_DC_TOL, DEFAULT_DC_MAX_ITER)?;
    let z_eq = net.preactivation(&eq.x0, &zero_u);
    let lure = ShiftedLure { net: &net, omega: params.omega.values(), x_eq: eq.x0, z_eq };

    let samples = 400;
    let stops: Vec<f64> = (1..samples).map(|k| horizon * k as f64 / samples as f64).collect();
    let cfg = SolverConfig { mode: StepMode::Adaptive, ..cfg.clone() };
    let tr = integrate(|_, x, dx| net.eval_into(x, &zero_u, dx), x0, (0.0, horizon), &cfg, &stops)?;
    // keep only the uniform sample instants
    let keep: Vec<usize> = (0..tr.len())
        .filter(|&k| k == 0 || k == tr.len() - 1 || stops.binary_search_by(|s| s.total_cmp(&tr.times[k])).is_ok())
        .collect();

    let mut best: Option<DissipationReport> = None;
    for p in P_GRID {
        let values: Vec<f64> = keep.iter().map(|&k| lure.eval(&tr.values[k], p)).collect();
        let max_violation = values.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max).max(0.0);
        let report = DissipationReport {
            pass: max_violation <= MONOTONE_TOL,
            p_scale: Some(p),
            times: keep.iter().map(|&k| tr.times[k]).collect(),
            values,
            max_violation,
        };
        if report.pass {
            return Ok(report);
        }
        if best.as_ref().map_or(true, |b| report.max_violation < b.max_violation) {
            best = Some(report);
        }
    }
    let mut report = best.expect("non-empty grid");
    report.p_scale = None;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IssReport {
    pub trials: usize,
    pub max_state_norm: f64,
    pub equilibrium_norm: f64,
    pub cap: f64,
    pub pass: bool,
}

/// Drives the network with `trials` random piecewise-linear inputs bounded
/// by `input_bound` (starting from the DC point) and records the largest
/// state norm. Passing is evidence, not proof, of bounded-input
/// bounded-state behaviour.
pub fn iss_probe(
    params: &CtrnnParams,
    input_bound: f64,
    trials: usize,
    horizon: f64,
    seed: u64,
    cap: f64,
    cfg: &SolverConfig,
) -> Result<IssReport> {
    let net = params.realize()?;
    let d = net.dims();
    let eq = solve_dc(&net, &vec![0.0; d.m], &vec![0.0; d.n], DEFAULT_DC_TOL, DEFAULT_DC_MAX_ITER)?;
    let equilibrium_norm = norm2(&eq.x0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SolverConfig { mode: StepMode::Adaptive, ..cfg.clone() };
    let mut max_state_norm = equilibrium_norm;
    for _ in 0..trials {
        let segments = 10;
        let times: Vec<f64> = (0..=segments).map(|k| horizon * k as f64 / segments as f64).collect();
        let values: Vec<Vec<f64>> = (0..=segments)
            .map(|k| {
                if k == 0 {
                    vec![0.0; d.m]
                } else {
                    (0..d.m).map(|_| if input_bound > 0.0 { rng.gen_range(-input_bound..=input_bound) } else { 0.0 }).collect()
                }
            })
            .collect();
        let u = Trajectory::new(times, values)?;
        let tr = integrate_driven(|x, u, dx| net.eval_into(x, u, dx), &eq.x0, &u, (0.0, horizon), &cfg)?;
        for v in &tr.values {
            max_state_norm = max_state_norm.max(norm2(v));
        }
    }
    Ok(IssReport { trials, max_state_norm, equilibrium_norm, cap, pass: max_state_norm.is_finite() && max_state_norm <= cap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::{random, scalar};
    use crate::model::Dims;

    #[test]
    fn margin_examples() {
        let omega = DiagPos::identity(1);
        let w = Matrix::identity(1);
        let a = Matrix::from_rows(&[&[2.0 / 2.001]]);
        let m = lds_margin(&a, &w, 1.0, &omega).unwrap();
        assert!((m - 2.0 * (2.0 / 2.001 - 1.0)).abs() < 1e-15);
        assert!((m + 9.995e-4).abs() < 1e-7);

        let zero = Matrix::zeros(3, 2);
        let w = Matrix::zeros(2, 3);
        assert!((lds_margin(&zero, &w, 0.5, &DiagPos::identity(3)).unwrap() + 4.0).abs() < 1e-14);

        let m = lds_margin(&Matrix::from_rows(&[&[2.0]]), &Matrix::identity(1), 1.0, &omega).unwrap();
        assert_eq!(m, 2.0);
    }

    #[test]
    fn scalar_certificate_is_tight() {
        let p = scalar(2.0, 1.0, 1.0);
        let r = certify(&p);
        assert!(r.satisfied);
        assert!((r.lds_margin - r.margin_bound).abs() < 1e-9);
        assert!((r.margin_bound + 0.002 / 2.001).abs() < 1e-15);

        let mut b = scalar(2.0, 1.0, 1.0);
        b.constrained = false;
        let r = certify(&b);
        assert!(!r.satisfied);
        assert_eq!(r.lds_margin, 2.0);
    }

    #[test]
    fn random_constrained_draws_certify() {
        for (i, d) in [Dims { n: 2, l: 3, m: 1, p: 1 }, Dims { n: 6, l: 14, m: 2, p: 2 }].into_iter().enumerate() {
            for seed in 0..100 {
                let mut p = random(d, seed + 1000 * i as u64, 3.0);
                p.log_tau = (seed as f64 / 100.0) * 4.0 - 2.0;
                assert!(certify(&p).satisfied, "{d:?} seed {seed}");
            }
        }
    }

    #[test]
    fn omega_scaling_scales_margin() {
        let p = random(Dims { n: 3, l: 5, m: 1, p: 1 }, 17, 2.0);
        let a = p.effective_a().unwrap();
        let base = lds_margin(&a, &p.w, p.tau(), &p.omega).unwrap();
        let mut scaled = p.omega.clone();
        for v in scaled.log_values.iter_mut() {
            *v += 3.0f64.ln();
        }
        let m = lds_margin(&a, &p.w, p.tau(), &scaled).unwrap();
        assert!((m - 3.0 * base).abs() < 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn lyapunov_examples() {
        let one = Matrix::identity(1);
        let om = DiagPos::identity(1);
        assert_eq!(lyapunov_v(&[0.0], &one, &om, &one, Nonlinearity::Relu).unwrap(), 0.0);
        assert_eq!(lyapunov_v(&[2.0], &one, &om, &one, Nonlinearity::Relu).unwrap(), 8.0);
        assert_eq!(lyapunov_v(&[0.0], &one, &om, &one, Nonlinearity::Tanh).unwrap(), 0.0);
        let bad = Matrix::from_rows(&[&[-1.0]]);
        assert!(lyapunov_v(&[1.0], &one, &om, &bad, Nonlinearity::Relu).is_err());
    }

    #[test]
    fn dissipation_examples() {
        let cfg = SolverConfig::default();
        let p = scalar(2.0, 1.0, 1.0);
        let r = dissipation_probe(&p, &[0.0], 5.0, &cfg).unwrap();
        assert!(r.pass && r.values.iter().all(|v| *v == 0.0));

        let r = dissipation_probe(&p, &[1.0], 5.0, &cfg).unwrap();
        assert!(r.pass);
        assert!(r.values.windows(2).all(|w| w[1] < w[0]));

        let mut b = scalar(2.0, 1.0, 1.0);
        b.constrained = false;
        let r = dissipation_probe(&b, &[1.0], 5.0, &cfg).unwrap();
        assert!(!r.pass && r.max_violation > 1.0);
    }

    #[test]
    fn iss_examples() {
        let cfg = SolverConfig::default();
        let mut p = random(Dims { n: 2, l: 4, m: 1, p: 1 }, 8, 1.0);
        let r = iss_probe(&p, 0.0, 2, 3.0, 1, 1e3, &cfg).unwrap();
        assert!((r.max_state_norm - r.equilibrium_norm).abs() < 1e-9);

        p = scalar(2.0, 1.0, 1.0);
        p.b[(0, 0)] = 1.0;
        let r = iss_probe(&p, 1.0, 5, 10.0, 3, 1e3, &cfg).unwrap();
        assert!(r.pass);
        assert_eq!(r, iss_probe(&p, 1.0, 5, 10.0, 3, 1e3, &cfg).unwrap());
    }
}
