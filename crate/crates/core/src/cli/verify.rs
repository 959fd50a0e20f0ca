//! Invariant suite behind `iss-node verify`. Each check is deterministic and
//! returns a pass/fail line with the figure it was judged on.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Pair;
use crate::equilibrium::{dc_uniqueness_probe, solve_dc, DcSensitivity};
use crate::error::Result;
use crate::exporter::{emit_veriloga, toy_model, toy_scaling};
use crate::model::{CtrnnParams, Dims, Nonlinearity, RealizedGrad};
use crate::numerics::{DiagPos, Matrix};
use crate::solver::{convergence_order, integrate, SolverConfig, StepMode, Trajectory};
use crate::stability::{certify, dissipation_probe, iss_probe};
use crate::training::{draw_sample_times, fd_gradient_check};

pub const GOLDEN_TOY_VA: &str = include_str!("../../tests/golden/toy.va");
pub const GOLDEN_TOY_NAME: &str = "toy_ctrnn";

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

fn outcome(name: &str, start: Instant, r: Result<(bool, String)>) -> CheckOutcome {
    let (pass, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome { name: name.into(), pass, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Constrained parameters with every weight uniform in `±scale`, `τ`
/// log-uniform in [0.05, 2] and `Ω` log-uniform in [0.2, 5].
pub fn random_constrained(d: Dims, seed: u64, scale: f64) -> CtrnnParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = CtrnnParams::zeros(d, Nonlinearity::Relu);
    let mat = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-scale..=scale)).collect()).expect("shape")
    };
    p.w = mat(d.n, d.l, &mut rng);
    p.a_theta = mat(d.l, d.n, &mut rng);
    p.b = mat(d.l, d.m, &mut rng);
    p.h = mat(d.p, d.n, &mut rng);
    p.mu = (0..d.l).map(|_| rng.gen_range(-scale..=scale)).collect();
    p.nu = (0..d.n).map(|_| rng.gen_range(-scale..=scale)).collect();
    p.out_bias = (0..d.p).map(|_| rng.gen_range(-scale..=scale)).collect();
    p.log_tau = rng.gen_range(0.05f64.ln()..2f64.ln());
    let om: Vec<f64> = (0..d.l).map(|_| rng.gen_range(0.2f64.ln()..5f64.ln()).exp()).collect();
    p.omega = DiagPos::from_values(&om).expect("positive weights");
    p.omega_learned = true;
    p
}

/// Random smooth input/target pair on [0, 1] with `m` inputs and `p` outputs.
pub fn random_pair(index: usize, m: usize, p: usize, seed: u64) -> Pair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times: Vec<f64> = (0..=40).map(|k| k as f64 / 40.0).collect();
    let wave = |rng: &mut ChaCha8Rng, ch: usize| -> Vec<Vec<f64>> {
        let f: Vec<(f64, f64)> = (0..ch).map(|_| (rng.gen_range(2.0..8.0), rng.gen_range(0.0..6.0))).collect();
        times.iter().map(|t| f.iter().map(|(w, ph)| (w * t + ph).sin()).collect()).collect()
    };
    let u = wave(&mut rng, m);
    let y = wave(&mut rng, p);
    Pair { index, u: Trajectory::new(times.clone(), u).expect("grid"), y: Trajectory::new(times, y).expect("grid") }
}

/// Certificate bound on `draws` random constrained models, cycling through
/// (n, ℓ) ∈ {(2,3), (6,14), (20,30)}.
pub fn check_certificates(draws: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let shapes = [(2, 3), (6, 14), (20, 30)];
    let worst: Vec<(f64, usize)> = (0..draws)
        .into_par_iter()
        .map(|k| {
            let (n, l) = shapes[k % shapes.len()];
            let scale = [0.5, 1.0, 3.0][(k / shapes.len()) % 3];
            let p = random_constrained(Dims { n, l, m: 2, p: 2 }, seed.wrapping_add(k as u64), scale);
            let r = certify(&p);
            (r.lds_margin - r.margin_bound, (r.rho > 0.0) as usize)
        })
        .collect();
    let gap = worst.iter().map(|w| w.0).fold(f64::NEG_INFINITY, f64::max);
    let active: usize = worst.iter().map(|w| w.1).sum();
    let pass = gap.is_finite() && gap <= 1e-8;
    outcome("certificate bound", start, Ok((pass, format!("{draws} draws ({active} with rho > 0), max margin - bound = {gap:.3e}"))))
}

/// One-dimensional case with active `ρ`: margin equals the bound.
pub fn check_scalar_tightness() -> CheckOutcome {
    let start = Instant::now();
    let mut p = CtrnnParams::zeros(Dims { n: 1, l: 1, m: 1, p: 1 }, Nonlinearity::Relu);
    p.a_theta[(0, 0)] = 2.0;
    p.w[(0, 0)] = 1.0;
    let r = certify(&p);
    let expected = -2e-3 / 2.001;
    let pass = r.rho > 0.0 && (r.lds_margin - r.margin_bound).abs() <= 1e-9 && (r.lds_margin - expected).abs() <= 1e-12;
    outcome(
        "scalar tightness",
        start,
        Ok((pass, format!("rho = {:.6}, margin = {:.6e}, bound = {:.6e}", r.rho, r.lds_margin, r.margin_bound))),
    )
}

/// Fixed-grid order on `ẋ = −x` and adaptive accuracy of `e^{−1}`.
pub fn check_solver_order() -> CheckOutcome {
    let start = Instant::now();
    let order = convergence_order(|_, x, dx| dx[0] = -x[0], &[1.0], 1.0, |t| vec![(-t).exp()], &[0.1, 0.05, 0.025, 0.0125]);
    let cfg = SolverConfig { rtol: 1e-8, atol: 1e-8, mode: StepMode::Adaptive, ..SolverConfig::default() };
    let r = integrate(|_, x, dx| dx[0] = -x[0], &[1.0], (0.0, 1.0), &cfg, &[]).map(|tr| (tr.last()[0] - (-1f64).exp()).abs());
    let r = r.map(|err| {
        let pass = order.is_some_and(|o| (2.7..=3.3).contains(&o)) && err <= 1e-6;
        (pass, format!("observed order {:.3}, adaptive error {err:.2e}", order.unwrap_or(f64::NAN)))
    });
    outcome("solver order", start, r)
}

/// Full training gradient against central differences on `instances`
/// kink-free draws (n=2, ℓ=3, 20 grid steps).
pub fn check_gradients(instances: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let d = Dims { n: 2, l: 3, m: 1, p: 1 };
    let r = (|| -> Result<(bool, String)> {
        let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
        let mut k = 0u64;
        while checked < instances && k < 20 * instances as u64 {
            let s = seed.wrapping_add(k);
            k += 1;
            let p = random_constrained(d, s, 1.5);
            let batch = vec![random_pair(0, 1, 1, s ^ 0x55), random_pair(1, 1, 1, s ^ 0xaa)];
            let times = draw_sample_times(&mut ChaCha8Rng::seed_from_u64(s), 2, 6, 1.0);
            match fd_gradient_check(&p, &batch, &times, 20)? {
                Some(e) => {
                    checked += 1;
                    worst = worst.max(e);
                }
                None => skipped += 1,
            }
        }
        let pass = checked == instances && worst < 1e-4;
        Ok((pass, format!("{checked} instances ({skipped} kink draws skipped), worst relative error {worst:.2e}")))
    })();
    outcome("gradient check", start, r)
}

/// DC uniqueness from 10 starts on `models` random constrained models, and
/// implicit sensitivities against finite differences on the first ten.
pub fn check_equilibrium(models: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let d = Dims { n: 3, l: 5, m: 2, p: 1 };
    let results: Vec<Result<(bool, f64, Option<f64>)>> = (0..models)
        .into_par_iter()
        .map(|k| {
            let s = seed.wrapping_add(k as u64);
            let p = random_constrained(d, s, 1.5);
            let net = p.realize()?;
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x1234);
            let u0: Vec<f64> = (0..d.m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let probe = dc_uniqueness_probe(&net, &u0, 10, s);
            let sens = if k < 10 { sensitivity_error(&p, &u0)? } else { None };
            Ok((probe.pass, probe.max_spread, sens))
        })
        .collect();
    let r = (|| -> Result<(bool, String)> {
        let (mut unique, mut spread, mut sens_worst, mut sens_n) = (0usize, 0.0f64, 0.0f64, 0usize);
        for r in results {
            let (ok, sp, se) = r?;
            unique += ok as usize;
            spread = spread.max(sp);
            if let Some(e) = se {
                sens_worst = sens_worst.max(e);
                sens_n += 1;
            }
        }
        let pass = unique == models && sens_n > 0 && sens_worst < 1e-4;
        Ok((pass, format!("{unique}/{models} unique (spread {spread:.1e}), sensitivity worst {sens_worst:.1e} on {sens_n} models")))
    })();
    outcome("equilibrium", start, r)
}

/// Relative error of `d(cᵀx₀)/dθ` from the implicit pullback against central
/// differences; `None` near the `ρ` kink.
fn sensitivity_error(p: &CtrnnParams, u0: &[f64]) -> Result<Option<f64>> {
    if p.rho_parts()?.pre_relu.abs() < 1e-4 {
        return Ok(None);
    }
    let d = p.dims();
    let net = p.realize()?;
    let x0 = solve_dc(&net, u0, &vec![0.0; d.n], 1e-13, 100)?.x0;
    let z = net.preactivation(&x0, u0);
    if z.iter().any(|v| v.abs() < 1e-4) {
        return Ok(None);
    }
    let cot: Vec<f64> = (0..d.n).map(|i| 1.0 - 0.7 * i as f64).collect();
    let mut g = RealizedGrad::zeros(d);
    DcSensitivity::new(&net, u0, &x0)?.pullback(&net, &cot, &mut g);
    let grad = p.pullback(&g)?.to_flat();
    let base = p.to_flat();
    let obj = |flat: &[f64]| -> Result<f64> {
        let mut q = p.clone();
        q.set_flat(flat)?;
        let x = solve_dc(&q.realize()?, u0, &x0, 1e-14, 100)?.x0;
        Ok(cot.iter().zip(&x).map(|(c, v)| c * v).sum())
    };
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        let (mut fp, mut fm) = (base.clone(), base.clone());
        fp[k] += 1e-5;
        fm[k] -= 1e-5;
        let fd = (obj(&fp)? - obj(&fm)?) / 2e-5;
        worst = worst.max((fd - grad[k]).abs() / fd.abs().max(1.0));
    }
    Ok(Some(worst))
}

/// Lur'e–Postnikov dissipation and bounded-input boundedness on `models`
/// certified models.
pub fn check_probes(models: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let d = Dims { n: 3, l: 5, m: 2, p: 1 };
    let cfg = SolverConfig::default();
    let results: Vec<Result<(bool, bool, f64, f64)>> = (0..models)
        .into_par_iter()
        .map(|k| {
            let s = seed.wrapping_add(k as u64);
            let p = random_constrained(d, s, 1.5);
            if !certify(&p).satisfied {
                return Ok((false, false, f64::NAN, f64::NAN));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x77);
            let x0: Vec<f64> = (0..d.n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let horizon = 20.0 * p.tau();
            let diss = dissipation_probe(&p, &x0, horizon, &cfg)?;
            let iss = iss_probe(&p, 1.0, 3, horizon, s, 1e3, &cfg)?;
            Ok((diss.pass, iss.pass, diss.max_violation, iss.max_state_norm))
        })
        .collect();
    let r = (|| -> Result<(bool, String)> {
        let (mut diss, mut iss, mut viol, mut norm) = (0usize, 0usize, 0.0f64, 0.0f64);
        for r in results {
            let (a, b, v, n) = r?;
            diss += a as usize;
            iss += b as usize;
            viol = viol.max(v);
            norm = norm.max(n);
        }
        let pass = diss == models && iss == models;
        Ok((pass, format!("V non-increasing {diss}/{models} (max rise {viol:.1e}), bounded {iss}/{models} (max |x| {norm:.2})")))
    })();
    outcome("dissipation / ISS probes", start, r)
}

/// Reference model against the committed snapshot, and the baked matrix
/// against the realized `A`.
pub fn check_export() -> CheckOutcome {
    let start = Instant::now();
    let r = (|| -> Result<(bool, String)> {
        let p = toy_model();
        let text = emit_veriloga(&p, GOLDEN_TOY_NAME, Some(&toy_scaling()))?;
        let golden = text == GOLDEN_TOY_VA;
        let baked = baked_matrix(&text, p.dims().l, p.dims().n);
        let exact = baked.as_ref() == Some(&p.effective_a()?);
        Ok((golden && exact, format!("golden match {golden}, baked A exact {exact}")))
    })();
    outcome("verilog-a export", start, r)
}

/// Parses the `z_i` lines of emitted text back into the `ℓ×n` state matrix.
pub fn baked_matrix(text: &str, l: usize, n: usize) -> Option<Matrix> {
    let mut a = Matrix::zeros(l, n);
    for i in 0..l {
        let prefix = format!("z_{} = ", i + 1);
        let line = text.lines().map(str::trim_start).find(|s| s.starts_with(&prefix))?;
        let terms: Vec<&str> = line[prefix.len()..].split(" + ").collect();
        for j in 0..n {
            let t = terms.get(j)?;
            if !t.ends_with(&format!("*V(x_{})", j + 1)) {
                return None;
            }
            a[(i, j)] = t.split(")*").next()?.trim_start_matches('(').parse().ok()?;
        }
    }
    Some(a)
}

/// Full suite in a fixed order.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_certificates(1000, seed),
        check_scalar_tightness(),
        check_solver_order(),
        check_gradients(20, seed),
        check_equilibrium(100, seed),
        check_probes(50, seed),
        check_export(),
    ]
}

pub fn format_table(rows: &[CheckOutcome]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    rows.iter()
        .map(|r| format!("{} {:width$}  {}  ({:.2}s)\n", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail, r.seconds))
        .collect()
}
