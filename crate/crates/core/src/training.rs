//! Trajectory-matching training: Monte-Carlo loss, exact reverse-mode
//! gradients through the fixed-grid solver and the DC solve, and Adam.

use std::io::Write;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Pair};
use crate::equilibrium::{solve_dc, DcSensitivity, DEFAULT_DC_MAX_ITER};
use crate::error::{Error, Result};
use crate::model::{flat_layout, CtrnnParams, Ctrnn, Dims, Nonlinearity, ParamGrad, ParamGroup, RealizedGrad};
use crate::numerics::{DiagPos, Matrix};
use crate::solver::{backprop_fixed_grid, integrate_fixed, FixedGridRecord, Trajectory};
use crate::stability::{certify, lds_margin};

pub const CHECKPOINT_SCHEMA: &str = "iss-node-checkpoint-v1";
/// DC residual tolerance used inside the loss; tight so that finite
/// differences of the loss are not swamped by solver noise.
const TRAIN_DC_TOL: f64 = 1e-11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TrainMode {
    /// ISS construction with learned Ω.
    Proposed,
    /// ISS construction with Ω = I.
    ProposedOmegaIdentity,
    /// No constraint after initialization.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// State dimension n.
    pub states: usize,
    /// Hidden dimension ℓ.
    pub hidden: usize,
    pub nonlinearity: Nonlinearity,
    pub tau_init: f64,
    /// Fix W = I and ν = 0 (requires n = ℓ).
    pub identity_w: bool,
    pub lr: f64,
    /// Multiplicative learning-rate factor applied per epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Monte-Carlo time samples per trajectory.
    pub k: usize,
    pub delta: f64,
    pub grid_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Proposed,
            states: 6,
            hidden: 12,
            nonlinearity: Nonlinearity::Relu,
            tau_init: 0.1,
            identity_w: false,
            lr: 1e-2,
            lr_decay: 0.995,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            epochs: 100,
            batch_size: 8,
            k: 32,
            delta: 1e-3,
            grid_steps: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr_decay > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps_adam > 0.0
            && self.k >= 1
            && self.delta > 0.0
            && self.grid_steps >= 1
            && self.batch_size >= 1
            && self.states >= 1
            && self.hidden >= self.states
            && self.tau_init > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        if self.identity_w && self.states != self.hidden {
            return Err(Error::Config("identity_w requires states == hidden".into()));
        }
        Ok(())
    }

    pub fn dims(&self, ports_in: usize, ports_out: usize) -> Dims {
        Dims { n: self.states, l: self.hidden, m: ports_in, p: ports_out }
    }
}

/// Random initialization: every entry uniform in `[−1/√ℓ, 1/√ℓ]`, Ω = I.
/// The baseline halves `A` until the diagonal-stability margin with Ω = I is
/// negative; the constrained modes satisfy it through the construction.
pub fn init_params(dims: Dims, cfg: &TrainConfig) -> Result<CtrnnParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 1.0 / (dims.l as f64).sqrt();
    let mut p = CtrnnParams::zeros(dims, cfg.nonlinearity);
    let mut fill = |v: &mut [f64]| {
        for x in v {
            *x = rng.gen_range(-bound..=bound);
        }
    };
    fill(p.w.as_mut_slice());
    fill(p.a_theta.as_mut_slice());
    fill(p.b.as_mut_slice());
    fill(&mut p.mu);
    fill(&mut p.nu);
    fill(p.h.as_mut_slice());
    fill(&mut p.out_bias);
    p.log_tau = cfg.tau_init.ln();
    p.delta = cfg.delta;
    p.omega = DiagPos::identity(dims.l);
    p.omega_learned = cfg.mode == TrainMode::Proposed;
    p.constrained = cfg.mode != TrainMode::Baseline;
    if cfg.identity_w {
        p.w = Matrix::identity(dims.n);
        p.nu = vec![0.0; dims.n];
    }
    if cfg.mode == TrainMode::Baseline {
        let eye = DiagPos::identity(dims.l);
        let mut halvings = 0;
        while lds_margin(&p.a_theta, &p.w, p.tau(), &eye)? >= 0.0 {
            p.a_theta = p.a_theta.scale(0.5);
            halvings += 1;
            if halvings > 200 {
                return Err(Error::InvalidInput("could not make the initial A diagonally stable".into()));
            }
        }
    }
    p.validate()?;
    Ok(p)
}

/// Which entries of the flat parameter vector the optimizer may move.
pub fn learnable_mask(params: &CtrnnParams, identity_w: bool) -> Vec<bool> {
    let mut mask = vec![true; params.flat_len()];
    for (group, range) in flat_layout(params.dims()) {
        let frozen = match group {
            ParamGroup::LogOmega => !(params.constrained && params.omega_learned),
            ParamGroup::W | ParamGroup::Nu => identity_w,
            _ => false,
        };
        if frozen {
            mask[range].fill(false);
        }
    }
    mask
}

/// Loss of one batch together with bookkeeping on excluded trajectories.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BatchLoss {
    /// Mean over the trajectories that could be simulated.
    pub loss: f64,
    pub used: usize,
    pub excluded: Vec<(usize, String)>,
    /// Smallest |hidden pre-activation| met during the forward pass.
    pub min_abs_preactivation: f64,
}

/// Uniform sample times, `k` per trajectory.
pub fn draw_sample_times(rng: &mut ChaCha8Rng, count: usize, k: usize, horizon: f64) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..k).map(|_| rng.gen_range(0.0..horizon)).collect()).collect()
}

/// DC start and fixed-grid solve of the network driven by `u`.
pub fn simulate_fixed(net: &Ctrnn, u: &Trajectory, grid_steps: usize) -> Result<(FixedGridRecord, DcSensitivity)> {
    let u0 = &u.values[0];
    let dc = solve_dc(net, u0, &vec![0.0; net.dims().n], TRAIN_DC_TOL, DEFAULT_DC_MAX_ITER)?;
    let sens = DcSensitivity::new(net, u0, &dc.x0)?;
    let mut ubuf = vec![0.0; u.dim()];
    let rec = integrate_fixed(
        &mut |t, x: &[f64], dx: &mut [f64]| {
            u.interp_into(t, &mut ubuf);
            net.eval_into(x, &ubuf, dx)
        },
        &dc.x0,
        (u.start(), u.end()),
        grid_steps,
    );
    if rec.states.last().unwrap().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("fixed-grid solution diverged".into()));
    }
    Ok((rec, sens))
}

/// Interval index and weight of `t` on a uniform record.
fn locate(rec: &FixedGridRecord, t: f64) -> (usize, f64) {
    let steps = rec.steps();
    let k = (((t - rec.times[0]) / rec.h).floor().max(0.0) as usize).min(steps - 1);
    let w = ((t - rec.times[k]) / rec.h).clamp(0.0, 1.0);
    (k, w)
}

fn state_at(rec: &FixedGridRecord, t: f64) -> Vec<f64> {
    let (k, w) = locate(rec, t);
    rec.states[k].iter().zip(&rec.states[k + 1]).map(|(a, b)| (1.0 - w) * a + w * b).collect()
}

struct TrajectoryResult {
    loss: f64,
    grad: Option<RealizedGrad>,
    min_abs_preactivation: f64,
}

fn min_abs_preactivation(net: &Ctrnn, rec: &FixedGridRecord, u: &Trajectory) -> f64 {
    let h = rec.h;
    let mut m = f64::INFINITY;
    let mut ubuf = vec![0.0; u.dim()];
    let mut visit = |t: f64, x: &[f64]| {
        u.interp_into(t, &mut ubuf);
        for z in net.preactivation(x, &ubuf) {
            m = m.min(z.abs());
        }
    };
    for s in 0..rec.steps() {
        let t = rec.times[s];
        visit(t, &rec.states[s]);
        visit(t + 0.5 * h, &rec.stage2[s]);
        visit(t + 0.75 * h, &rec.stage3[s]);
    }
    m
}

/// `(1/K) Σ_j ‖ỹ(S_j) − y(S_j)‖²` for one trajectory, and optionally its
/// gradient with respect to the realized network.
fn trajectory_loss(net: &Ctrnn, pair: &Pair, times: &[f64], grid_steps: usize, want_grad: bool) -> Result<TrajectoryResult> {
    let d = net.dims();
    let (rec, sens) = simulate_fixed(net, &pair.u, grid_steps)?;
    let kf = times.len() as f64;
    let mut loss = 0.0;
    let mut grad = RealizedGrad::zeros(d);
    let mut state_bar = vec![vec![0.0; d.n]; rec.steps() + 1];
    let mut target = vec![0.0; d.p];
    for &t in times {
        let (k, w) = locate(&rec, t);
        let x: Vec<f64> = rec.states[k].iter().zip(&rec.states[k + 1]).map(|(a, b)| (1.0 - w) * a + w * b).collect();
        let y = net.output_unchecked(&x);
        pair.y.interp_into(t, &mut target);
        let r: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
        loss += r.iter().map(|v| v * v).sum::<f64>() / kf;
        if want_grad {
            let ybar: Vec<f64> = r.iter().map(|v| 2.0 * v / kf).collect();
            grad.h.add_outer(1.0, &ybar, &x);
            for (g, yb) in grad.out_bias.iter_mut().zip(&ybar) {
                *g += yb;
            }
            let xbar = net.h.matvec_t(&ybar);
            for i in 0..d.n {
                state_bar[k][i] += (1.0 - w) * xbar[i];
                state_bar[k + 1][i] += w * xbar[i];
            }
        }
    }
    let min_pre = min_abs_preactivation(net, &rec, &pair.u);
    if !want_grad {
        return Ok(TrajectoryResult { loss, grad: None, min_abs_preactivation: min_pre });
    }
    let mut ubuf = vec![0.0; d.m];
    let x0_bar = backprop_fixed_grid(&rec, &state_bar, |t, x, adj| {
        pair.u.interp_into(t, &mut ubuf);
        net.vjp(x, &ubuf, adj, &mut grad)
    });
    sens.pullback(net, &x0_bar, &mut grad);
    Ok(TrajectoryResult { loss, grad: Some(grad), min_abs_preactivation: min_pre })
}

fn batch_eval(
    params: &CtrnnParams,
    batch: &[Pair],
    times: &[Vec<f64>],
    grid_steps: usize,
    want_grad: bool,
) -> Result<(BatchLoss, Option<ParamGrad>)> {
    if batch.len() != times.len() {
        return Err(Error::DimensionMismatch(format!("{} trajectories vs {} time sets", batch.len(), times.len())));
    }
    let net = params.realize()?;
    let results: Vec<Result<TrajectoryResult>> = batch
        .par_iter()
        .zip(times.par_iter())
        .map(|(pair, ts)| trajectory_loss(&net, pair, ts, grid_steps, want_grad))
        .collect();
    let d = params.dims();
    let mut total = RealizedGrad::zeros(d);
    let mut out = BatchLoss { min_abs_preactivation: f64::INFINITY, ..Default::default() };
    let mut sum = 0.0;
    for (pair, r) in batch.iter().zip(results) {
        match r {
            Ok(tr) => {
                sum += tr.loss;
                out.used += 1;
                out.min_abs_preactivation = out.min_abs_preactivation.min(tr.min_abs_preactivation);
                if let Some(g) = tr.grad {
                    total.add_assign(&g);
                }
            }
            Err(e) => out.excluded.push((pair.index, e.to_string())),
        }
    }
    if out.used == 0 {
        out.loss = f64::NAN;
        return Ok((out, None));
    }
    let inv = 1.0 / out.used as f64;
    out.loss = sum * inv;
    if !want_grad {
        return Ok((out, None));
    }
    total.scale(inv);
    Ok((out, Some(params.pullback(&total)?)))
}

/// Loss at explicitly given sample times (one list per trajectory).
pub fn loss_at_times(params: &CtrnnParams, batch: &[Pair], times: &[Vec<f64>], grid_steps: usize) -> Result<BatchLoss> {
    Ok(batch_eval(params, batch, times, grid_steps, false)?.0)
}

/// Loss and its exact gradient at explicitly given sample times.
pub fn loss_and_grad_at_times(
    params: &CtrnnParams,
    batch: &[Pair],
    times: &[Vec<f64>],
    grid_steps: usize,
) -> Result<(BatchLoss, ParamGrad)> {
    let (loss, g) = batch_eval(params, batch, times, grid_steps, true)?;
    let g = g.ok_or_else(|| Error::InvalidInput(format!("every trajectory excluded: {:?}", loss.excluded)))?;
    Ok((loss, g))
}

fn batch_horizon(batch: &[Pair]) -> Result<f64> {
    batch.first().map(|p| p.u.end()).ok_or_else(|| Error::InvalidInput("empty batch".into()))
}

/// Monte-Carlo estimate of the time-averaged squared output error.
pub fn mc_loss(params: &CtrnnParams, batch: &[Pair], k: usize, grid_steps: usize, rng: &mut ChaCha8Rng) -> Result<BatchLoss> {
    let times = draw_sample_times(rng, batch.len(), k, batch_horizon(batch)?);
    loss_at_times(params, batch, &times, grid_steps)
}

/// Exact gradient of [`mc_loss`] for the sample times drawn from `rng`.
pub fn grad(
    params: &CtrnnParams,
    batch: &[Pair],
    k: usize,
    grid_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(BatchLoss, ParamGrad)> {
    let times = draw_sample_times(rng, batch.len(), k, batch_horizon(batch)?);
    loss_and_grad_at_times(params, batch, &times, grid_steps)
}

/// Worst relative disagreement between [`loss_and_grad_at_times`] and central
/// differences (step 1e-6) over every flat parameter. `None` when a hidden
/// pre-activation or the `ρ` ReLU sits within 1e-4 of its kink.
pub fn fd_gradient_check(p: &CtrnnParams, batch: &[Pair], times: &[Vec<f64>], steps: usize) -> Result<Option<f64>> {
    let (l, g) = loss_and_grad_at_times(p, batch, times, steps)?;
    if l.min_abs_preactivation < 1e-4 || p.rho_parts()?.pre_relu.abs() < 1e-4 {
        return Ok(None);
    }
    let g = g.to_flat();
    let base = p.to_flat();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut q = p.clone();
            let mut f = base.clone();
            f[k] += delta;
            q.set_flat(&f)?;
            Ok(loss_at_times(&q, batch, times, steps)?.loss)
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        let scale = fd.abs().max(g[k].abs()).max(1e-3);
        worst = worst.max((fd - g[k]).abs() / scale);
    }
    Ok(Some(worst))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// One bias-corrected Adam update of the entries selected by `mask`.
    /// A non-finite gradient rejects the step and leaves everything as is.
    pub fn step(&mut self, theta: &mut [f64], g: &[f64], mask: &[bool], lr: f64, cfg: &TrainConfig) -> bool {
        if g.iter().zip(mask).any(|(v, &on)| on && !v.is_finite()) {
            return false;
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..theta.len() {
            if !mask[i] {
                continue;
            }
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= lr * mh / (vh.sqrt() + cfg.eps_adam);
        }
        true
    }
}

/// Normalized open-loop error of a model replaying recorded inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OpenLoopReport {
    /// Time-averaged squared error per output channel, averaged over trajectories.
    pub channel_mse: Vec<f64>,
    /// Mean of `channel_mse`.
    pub aggregate: f64,
    pub per_trajectory: Vec<(usize, Vec<f64>)>,
    pub used: usize,
    pub excluded: Vec<(usize, String)>,
}

/// Exact `(1/T)∫(ỹ − y)² dt` per channel, with `y` linear between solver
/// grid points and `ỹ` linear between data samples.
fn trajectory_channel_mse(net: &Ctrnn, pair: &Pair, grid_steps: usize) -> Result<Vec<f64>> {
    let (rec, _) = simulate_fixed(net, &pair.u, grid_steps)?;
    let mut knots: Vec<f64> = rec.times.iter().chain(&pair.y.times).copied().collect();
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let p = net.dims().p;
    let mut target = vec![0.0; p];
    let residual = |t: f64, target: &mut Vec<f64>| -> Vec<f64> {
        let y = net.output_unchecked(&state_at(&rec, t));
        pair.y.interp_into(t, target);
        y.iter().zip(target.iter()).map(|(a, b)| a - b).collect()
    };
    let mut acc = vec![0.0; p];
    let mut r0 = residual(knots[0], &mut target);
    for w in knots.windows(2) {
        let r1 = residual(w[1], &mut target);
        let dt = w[1] - w[0];
        for c in 0..p {
            acc[c] += dt * (r0[c] * r0[c] + r0[c] * r1[c] + r1[c] * r1[c]) / 3.0;
        }
        r0 = r1;
    }
    let span = knots[knots.len() - 1] - knots[0];
    Ok(acc.into_iter().map(|a| a / span).collect())
}

pub fn evaluate_openloop(params: &CtrnnParams, pairs: &[Pair], grid_steps: usize) -> Result<OpenLoopReport> {
    let net = params.realize()?;
    let p = net.dims().p;
    let results: Vec<Result<Vec<f64>>> = pairs.par_iter().map(|pair| trajectory_channel_mse(&net, pair, grid_steps)).collect();
    let mut report = OpenLoopReport {
        channel_mse: vec![0.0; p],
        aggregate: f64::NAN,
        per_trajectory: Vec::new(),
        used: 0,
        excluded: Vec::new(),
    };
    for (pair, r) in pairs.iter().zip(results) {
        match r {
            Ok(ch) => {
                for (a, c) in report.channel_mse.iter_mut().zip(&ch) {
                    *a += c;
                }
                report.used += 1;
                report.per_trajectory.push((pair.index, ch));
            }
            Err(e) => report.excluded.push((pair.index, e.to_string())),
        }
    }
    if report.used > 0 {
        for a in &mut report.channel_mse {
            *a /= report.used as f64;
        }
        report.aggregate = report.channel_mse.iter().sum::<f64>() / p as f64;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mse: f64,
    pub lds_margin: f64,
    pub rho: f64,
    pub certified: bool,
    pub excluded: usize,
}

/// Reproducible snapshot of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    #[serde(with = "crate::model::serde_params")]
    pub params: CtrnnParams,
    pub adam: Adam,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub rng: RngState,
}

/// Parameters plus optimizer state, as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema: String,
    pub config: TrainConfig,
    /// Epoch whose validation error was lowest; `state.params` are from it.
    pub best_epoch: usize,
    pub best_valid_mse: f64,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(Error::InvalidInput(format!("unsupported checkpoint schema '{}'", ck.schema)));
        }
        Ok(ck)
    }
}

pub struct FitOutcome {
    pub best: Checkpoint,
    pub last: TrainState,
    pub metrics: Vec<EpochMetrics>,
}

fn epoch_metrics(params: &CtrnnParams, epoch: usize, train_loss: f64, valid: &[Pair], cfg: &TrainConfig, excluded: usize) -> Result<EpochMetrics> {
    let report = certify(params);
    let valid_mse = evaluate_openloop(params, valid, cfg.grid_steps)?.aggregate;
    Ok(EpochMetrics {
        epoch,
        train_loss,
        valid_mse,
        lds_margin: report.lds_margin,
        rho: report.rho,
        certified: report.satisfied,
        excluded,
    })
}

/// Epoch loop over shuffled minibatches with per-epoch validation; keeps
/// the parameters of the best validation epoch. Epoch 0 is the initial model.
pub fn fit(dataset: &Dataset, cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    let ports = dataset.ports();
    let dims = cfg.dims(ports, dataset.scaling.outputs.len());
    let params = init_params(dims, cfg)?;
    fit_from(dataset, cfg, params)
}

pub fn fit_from(dataset: &Dataset, cfg: &TrainConfig, params: CtrnnParams) -> Result<FitOutcome> {
    cfg.validate()?;
    let train = dataset.pairs(&dataset.train)?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let valid = if dataset.valid.is_empty() { train.clone() } else { dataset.pairs(&dataset.valid)? };
    let mask = learnable_mask(&params, cfg.identity_w);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = TrainState {
        adam: Adam::new(params.flat_len()),
        params,
        step: 0,
        epoch: 0,
        history: Vec::new(),
        rng: RngState::capture(&rng),
    };
    let initial = epoch_metrics(&state.params, 0, f64::NAN, &valid, cfg, 0)?;
    info!("epoch 0: valid_mse {:.4e}", initial.valid_mse);
    let mut best = (initial.valid_mse, 0usize, state.clone());
    state.history.push(initial);

    let horizon = batch_horizon(&train)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32 - 1);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut excluded = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Pair> = chunk.iter().map(|&i| train[i].clone()).collect();
            let times = draw_sample_times(&mut rng, batch.len(), cfg.k, horizon);
            let (loss, g) = batch_eval(&state.params, &batch, &times, cfg.grid_steps, true)?;
            excluded += loss.excluded.len();
            for (idx, why) in &loss.excluded {
                debug!("epoch {epoch}: trajectory {idx} excluded: {why}");
            }
            let Some(g) = g else {
                warn!("epoch {epoch}: whole batch excluded, step skipped");
                continue;
            };
            let mut flat = state.params.to_flat();
            if !state.adam.step(&mut flat, &g.to_flat(), &mask, lr, cfg) {
                warn!("epoch {epoch}: non-finite gradient, step rejected (loss {})", loss.loss);
                continue;
            }
            let mut next = state.params.clone();
            next.set_flat(&flat)?;
            if next.validate().is_err() {
                warn!("epoch {epoch}: step produced invalid parameters, rejected");
                continue;
            }
            state.params = next;
            state.step += 1;
            loss_sum += loss.loss;
            batches += 1;
        }
        let train_loss = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };
        let m = epoch_metrics(&state.params, epoch, train_loss, &valid, cfg, excluded)?;
        if state.params.constrained && !m.certified {
            warn!("epoch {epoch}: certificate check failed (margin {:.3e})", m.lds_margin);
        }
        info!("epoch {epoch}: train {:.4e} valid {:.4e} rho {:.3e}", m.train_loss, m.valid_mse, m.rho);
        state.epoch = epoch;
        state.rng = RngState::capture(&rng);
        let improved = m.valid_mse < best.0;
        state.history.push(m);
        if improved {
            best = (state.history.last().unwrap().valid_mse, epoch, state.clone());
        }
    }
    let metrics = state.history.clone();
    let mut best_state = best.2;
    best_state.history = metrics.clone();
    Ok(FitOutcome {
        best: Checkpoint {
            schema: CHECKPOINT_SCHEMA.into(),
            config: cfg.clone(),
            best_epoch: best.1,
            best_valid_mse: best.0,
            state: best_state,
        },
        last: state,
        metrics,
    })
}

pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["epoch", "train_loss", "valid_mse", "lds_margin", "rho"])?;
    for m in metrics {
        wtr.write_record([
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.valid_mse.to_string(),
            m.lds_margin.to_string(),
            m.rho.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::random;

    fn toy_pair(index: usize, seed: u64) -> Pair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times: Vec<f64> = (0..=40).map(|k| k as f64 / 40.0).collect();
        let phase: f64 = rng.gen_range(0.0..6.0);
        let u = times.iter().map(|t| vec![(6.0 * t + phase).sin()]).collect();
        let y = times.iter().map(|t| vec![0.3 * (4.0 * t + phase).cos()]).collect();
        Pair { index, u: Trajectory::new(times.clone(), u).unwrap(), y: Trajectory::new(times, y).unwrap() }
    }

    fn tiny_dims() -> Dims {
        Dims { n: 2, l: 3, m: 1, p: 1 }
    }

    #[test]
    fn perfect_model_has_zero_loss_and_gradient() {
        let p = random(tiny_dims(), 3, 1.0);
        let net = p.realize().unwrap();
        let mut pair = toy_pair(0, 1);
        let (rec, _) = simulate_fixed(&net, &pair.u, 40).unwrap();
        pair.y = rec.to_trajectory().unwrap().map(|x| net.output_unchecked(x)).unwrap();
        let times = vec![vec![0.0, 0.13, 0.5, 0.77, 1.0]];
        let (l, g) = loss_and_grad_at_times(&p, &[pair.clone()], &times, 40).unwrap();
        assert!(l.loss < 1e-28, "{}", l.loss);
        assert!(g.to_flat().iter().all(|v| v.abs() < 1e-12));
        let rep = evaluate_openloop(&p, &[pair], 40).unwrap();
        assert!(rep.aggregate < 1e-28);
    }

    #[test]
    fn constant_offset_gives_c_squared() {
        let mut p = random(tiny_dims(), 5, 1.0);
        let net = p.realize().unwrap();
        let mut pair = toy_pair(0, 2);
        let (rec, _) = simulate_fixed(&net, &pair.u, 20).unwrap();
        pair.y = rec.to_trajectory().unwrap().map(|x| net.output_unchecked(x)).unwrap();
        p.out_bias[0] += 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = mc_loss(&p, &[pair.clone()], 7, 20, &mut rng).unwrap();
        assert!((l.loss - 0.0625).abs() < 1e-14);
        let rep = evaluate_openloop(&p, &[pair.clone()], 20).unwrap();
        assert!((rep.aggregate - 0.0625).abs() < 1e-14);
        // d/db of mean squared residual is 2·(mean residual)
        let (_, g) = grad(&p, &[pair], 7, 20, &mut rng).unwrap();
        assert!((g.out_bias[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn output_bias_gradient_is_twice_mean_residual() {
        let p = random(tiny_dims(), 8, 1.0);
        let pair = toy_pair(0, 4);
        let times = vec![vec![0.05, 0.3, 0.31, 0.9]];
        let net = p.realize().unwrap();
        let (rec, _) = simulate_fixed(&net, &pair.u, 20).unwrap();
        let mean_r: f64 = times[0]
            .iter()
            .map(|&t| net.output_unchecked(&state_at(&rec, t))[0] - pair.y.interp(t).unwrap()[0])
            .sum::<f64>()
            / 4.0;
        let (_, g) = loss_and_grad_at_times(&p, &[pair], &times, 20).unwrap();
        assert!((g.out_bias[0] - 2.0 * mean_r).abs() < 1e-13);
    }

    #[test]
    fn dense_sampling_matches_exact_integral() {
        let p = random(Dims { n: 2, l: 3, m: 1, p: 2 }, 11, 1.0);
        let mut pair = toy_pair(0, 6);
        pair.y = pair.y.map(|v| vec![v[0], -0.5 * v[0] + 0.1]).unwrap();
        let rep = evaluate_openloop(&p, &[pair.clone()], 25).unwrap();
        let cells = 200_000;
        let times = vec![(0..cells).map(|k| (k as f64 + 0.5) / cells as f64).collect()];
        let l = loss_at_times(&p, &[pair], &times, 25).unwrap();
        let summed: f64 = rep.channel_mse.iter().sum();
        assert!((l.loss - summed).abs() < 1e-6, "{} vs {}", l.loss, summed);
    }

    #[test]
    fn mc_estimate_converges_to_integral() {
        let p = random(tiny_dims(), 12, 1.0);
        let pair = toy_pair(0, 7);
        let exact = evaluate_openloop(&p, &[pair.clone()], 20).unwrap().aggregate;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1_000usize, 100_000] {
            let l = mc_loss(&p, &[pair.clone()], k, 20, &mut rng).unwrap().loss;
            assert!((l - exact).abs() < 5.0 * exact / (k as f64).sqrt() + 1e-12, "K={k}: {l} vs {exact}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut checked = 0;
        for seed in 0..8u64 {
            let mut p = random(tiny_dims(), 100 + seed, 1.5);
            p.omega = DiagPos::from_values(&[1.3, 0.7, 2.0]).unwrap();
            let batch = vec![toy_pair(0, seed), toy_pair(1, seed + 50)];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let times = draw_sample_times(&mut rng, 2, 6, 1.0);
            if let Some(err) = fd_gradient_check(&p, &batch, &times, 20).unwrap() {
                assert!(err < 1e-4, "seed {seed}: relative error {err}");
                checked += 1;
            }
        }
        assert!(checked >= 4);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let cfg = TrainConfig { lr: 0.01, ..TrainConfig::default() };
        let mut adam = Adam::new(2);
        let mut theta = vec![1.0, -2.0];
        assert!(adam.step(&mut theta, &[0.0, 0.0], &[true, true], cfg.lr, &cfg));
        assert_eq!(theta, vec![1.0, -2.0]);
        let mut adam = Adam::new(1);
        let mut theta = vec![0.5];
        adam.step(&mut theta, &[1.0], &[true], cfg.lr, &cfg);
        assert!((theta[0] - (0.5 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
        let before = theta.clone();
        assert!(!adam.step(&mut theta, &[f64::NAN], &[true], cfg.lr, &cfg));
        assert_eq!(theta, before);
        assert_eq!(adam.t, 1);
        let mut frozen = vec![3.0];
        Adam::new(1).step(&mut frozen, &[1.0], &[false], cfg.lr, &cfg);
        assert_eq!(frozen, vec![3.0]);
    }

    #[test]
    fn init_modes() {
        let d = Dims { n: 4, l: 8, m: 2, p: 2 };
        for mode in [TrainMode::Proposed, TrainMode::ProposedOmegaIdentity] {
            let cfg = TrainConfig { mode, seed: 3, ..TrainConfig::default() };
            let p = init_params(d, &cfg).unwrap();
            assert!(certify(&p).satisfied);
            assert_eq!(p, init_params(d, &cfg).unwrap());
            let bound = 1.0 / 8f64.sqrt();
            assert!(p.w.as_slice().iter().chain(p.b.as_slice()).all(|v| v.abs() <= bound));
        }
        for seed in 0..20 {
            let cfg = TrainConfig { mode: TrainMode::Baseline, seed, tau_init: 50.0, ..TrainConfig::default() };
            let p = init_params(d, &cfg).unwrap();
            assert!(!p.constrained);
            assert!(lds_margin(&p.a_theta, &p.w, p.tau(), &DiagPos::identity(8)).unwrap() < 0.0);
        }
        let cfg = TrainConfig { identity_w: true, states: 4, hidden: 4, ..TrainConfig::default() };
        let p = init_params(Dims { n: 4, l: 4, m: 2, p: 2 }, &cfg).unwrap();
        assert_eq!(p.w, Matrix::identity(4));
        let mask = learnable_mask(&p, true);
        let layout = flat_layout(p.dims());
        for (g, r) in layout {
            let expect = !matches!(g, ParamGroup::W | ParamGroup::Nu);
            assert!(mask[r].iter().all(|&m| m == expect), "{g:?}");
        }
    }

    #[test]
    fn proposed_modes_stay_certified_every_epoch() {
        let mut dc = crate::data::DataConfig::for_oracle(crate::data::OracleKind::CommonSourceSurrogate);
        dc.n = 6;
        let ds = crate::data::build_dataset(&dc).unwrap();
        for mode in [TrainMode::Proposed, TrainMode::ProposedOmegaIdentity] {
            let cfg = TrainConfig { mode, epochs: 6, states: 3, hidden: 6, lr: 5e-2, ..TrainConfig::default() };
            let out = fit(&ds, &cfg).unwrap();
            assert_eq!(out.metrics.len(), 7);
            assert!(out.metrics.iter().all(|m| m.certified && m.lds_margin < 0.0));
            assert!(out.metrics.iter().all(|m| m.excluded == 0));
            assert!(certify(&out.last.params).satisfied);
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let m = EpochMetrics { epoch: 1, train_loss: 0.5, valid_mse: 0.25, lds_margin: -1.0, rho: 0.0, certified: true, excluded: 0 };
        let mut buf = Vec::new();
        write_metrics_csv(&[m], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,valid_mse,lds_margin,rho\n1,0.5,0.25,-1,0\n");
    }
}
