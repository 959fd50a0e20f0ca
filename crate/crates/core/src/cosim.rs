//! Closed-loop interconnection of a port-level block with a load.
//!
//! A block reads its port voltages and returns the currents flowing into
//! its ports. A load owns the port voltages as (part of) its state, driven by
//! an external source and by the block currents. The joint system is
//! integrated monolithically.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{draw_scenario, CircuitOracle, Dataset, LoadDesc, PortScaling};
use crate::equilibrium::{fd_jacobian, newton, DEFAULT_DC_MAX_ITER, DEFAULT_DC_TOL};
use crate::error::{Error, Result};
use crate::model::{CtrnnParams, Ctrnn};
use crate::numerics::norm_inf;
use crate::solver::{integrate, SolverConfig, StepMode, Trajectory};

/// A circuit (or model of one) seen through its ports.
pub trait PortBlock: Sync {
    fn state_dim(&self) -> usize;
    fn port_count(&self) -> usize;
    fn dynamics(&self, x: &[f64], v: &[f64], dx: &mut [f64]);
    fn currents(&self, x: &[f64], v: &[f64], i: &mut [f64]);
}

/// External circuitry attached to a block's ports.
pub trait Load: Sync {
    fn state_dim(&self) -> usize;
    fn port_count(&self) -> usize;
    /// Number of external source channels consumed.
    fn source_dim(&self) -> usize;
    fn port_voltages(&self, z: &[f64], u_ext: &[f64], i: &[f64], v: &mut [f64]);
    fn dynamics(&self, z: &[f64], u_ext: &[f64], i: &[f64], dz: &mut [f64]);
}

/// A learned network operating on physical port quantities: voltages are
/// normalized on the way in, currents denormalized on the way out.
#[derive(Clone, Debug)]
pub struct ScaledModel {
    pub net: Ctrnn,
    pub scaling: PortScaling,
}

impl ScaledModel {
    pub fn new(params: &CtrnnParams, scaling: PortScaling) -> Result<Self> {
        let net = params.realize()?;
        let d = net.dims();
        if d.m != scaling.inputs.len() || d.p != scaling.outputs.len() || d.m != d.p {
            return Err(Error::DimensionMismatch(format!(
                "model m={} p={} vs scaling {} inputs {} outputs",
                d.m,
                d.p,
                scaling.inputs.len(),
                scaling.outputs.len()
            )));
        }
        Ok(Self { net, scaling })
    }
}

impl PortBlock for ScaledModel {
    fn state_dim(&self) -> usize {
        self.net.dims().n
    }

    fn port_count(&self) -> usize {
        self.net.dims().m
    }

    fn dynamics(&self, x: &[f64], v: &[f64], dx: &mut [f64]) {
        let u = self.scaling.normalize_inputs(v);
        self.net.eval_into(x, &u, dx);
    }

    fn currents(&self, x: &[f64], _v: &[f64], i: &mut [f64]) {
        let y = self.net.output_unchecked(x);
        i.copy_from_slice(&self.scaling.denormalize_outputs(&y));
    }
}

/// Sampled port waveforms of one simulation.
#[derive(Clone, Debug)]
pub struct PortRecord {
    pub voltages: Trajectory,
    pub currents: Trajectory,
    pub states: Trajectory,
}

/// Block + load + source as one ODE with state `[x_block; z_load]`.
pub struct Interconnection<'a> {
    block: &'a dyn PortBlock,
    load: &'a dyn Load,
    source: &'a Trajectory,
}

impl<'a> Interconnection<'a> {
    pub fn new(block: &'a dyn PortBlock, load: &'a dyn Load, source: &'a Trajectory) -> Result<Self> {
        if block.port_count() != load.port_count() {
            return Err(Error::DimensionMismatch(format!(
                "block has {} ports, load has {}",
                block.port_count(),
                load.port_count()
            )));
        }
        if source.dim() != load.source_dim() {
            return Err(Error::DimensionMismatch(format!(
                "source has {} channels, load expects {}",
                source.dim(),
                load.source_dim()
            )));
        }
        check_feedthrough(load)?;
        Ok(Self { block, load, source })
    }

    pub fn state_dim(&self) -> usize {
        self.block.state_dim() + self.load.state_dim()
    }

    fn eval(&self, u_ext: &[f64], s: &[f64], ds: &mut [f64]) {
        let nb = self.block.state_dim();
        let ports = self.block.port_count();
        let (x, z) = s.split_at(nb);
        let (dx, dz) = ds.split_at_mut(nb);
        let mut v = vec![0.0; ports];
        let mut i = vec![0.0; ports];
        // no feedthrough: voltages do not depend on the currents passed here
        self.load.port_voltages(z, u_ext, &i, &mut v);
        self.block.currents(x, &v, &mut i);
        self.block.dynamics(x, &v, dx);
        self.load.dynamics(z, u_ext, &i, dz);
    }

    /// Port voltages and currents at joint state `s`.
    pub fn ports(&self, t: f64, s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nb = self.block.state_dim();
        let ports = self.block.port_count();
        let u_ext = self.source.interp(t).expect("non-empty source");
        let mut v = vec![0.0; ports];
        let mut i = vec![0.0; ports];
        self.load.port_voltages(&s[nb..], &u_ext, &i, &mut v);
        self.block.currents(&s[..nb], &v, &mut i);
        (v, i)
    }

    /// Joint DC point under the source value at its start time: Newton on
    /// the stacked residual, with constant-input integration as fallback.
    pub fn dc(&self) -> Result<Vec<f64>> {
        let u0 = self.source.values[0].clone();
        let dim = self.state_dim();
        let residual = |s: &[f64]| {
            let mut r = vec![0.0; dim];
            self.eval(&u0, s, &mut r);
            r
        };
        let guess = vec![0.0; dim];
        let first = newton(residual, |s| fd_jacobian(residual, s), &guess, DEFAULT_DC_TOL, DEFAULT_DC_MAX_ITER);
        if first.converged {
            return Ok(first.x);
        }
        let cfg = SolverConfig::with_tolerances(1e-9, 1e-11);
        let mut s = first.x;
        let mut best = first.residual;
        for _ in 0..DC_FALLBACK_CHUNKS {
            let tr = integrate(|_, s, ds| self.eval(&u0, s, ds), &s, (0.0, DC_FALLBACK_CHUNK), &cfg, &[])?;
            s = tr.last().to_vec();
            let polished = newton(residual, |s| fd_jacobian(residual, s), &s, DEFAULT_DC_TOL, DEFAULT_DC_MAX_ITER);
            if polished.converged {
                return Ok(polished.x);
            }
            best = best.min(polished.residual);
        }
        Err(Error::NoConvergence { residual: best, best: s })
    }

    /// Simulates from the joint DC point over `[0, horizon]` and samples
    /// ports on a uniform grid of `samples` points.
    pub fn simulate(&self, horizon: f64, samples: usize, cfg: &SolverConfig) -> Result<PortRecord> {
        let s0 = self.dc()?;
        self.simulate_from(&s0, horizon, samples, cfg)
    }

    pub fn simulate_from(&self, s0: &[f64], horizon: f64, samples: usize, cfg: &SolverConfig) -> Result<PortRecord> {
        let grid = uniform_grid(horizon, samples)?;
        let mut stops = grid.clone();
        stops.extend(self.source.times.iter().copied());
        let mut u_ext = vec![0.0; self.source.dim()];
        let cfg = SolverConfig { mode: StepMode::Adaptive, ..cfg.clone() };
        let tr = integrate(
            |t, s, ds| {
                self.source.interp_into(t, &mut u_ext);
                self.eval(&u_ext, s, ds)
            },
            s0,
            (0.0, horizon),
            &cfg,
            &stops,
        )?;
        let states = resample(&tr, &grid)?;
        let mut vs = Vec::with_capacity(grid.len());
        let mut is = Vec::with_capacity(grid.len());
        for (t, s) in grid.iter().zip(&states.values) {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite state at t = {t}")));
            }
            let (v, i) = self.ports(*t, s);
            vs.push(v);
            is.push(i);
        }
        Ok(PortRecord {
            voltages: Trajectory::new(grid.clone(), vs)?,
            currents: Trajectory::new(grid, is)?,
            states,
        })
    }
}

const DC_FALLBACK_CHUNK: f64 = 1.0;
const DC_FALLBACK_CHUNKS: usize = 50;

fn check_feedthrough(load: &dyn Load) -> Result<()> {
    let z: Vec<f64> = (0..load.state_dim()).map(|k| 0.3 + 0.1 * k as f64).collect();
    let u: Vec<f64> = (0..load.source_dim()).map(|k| 0.7 - 0.2 * k as f64).collect();
    let ports = load.port_count();
    let mut v0 = vec![0.0; ports];
    let mut v1 = vec![0.0; ports];
    load.port_voltages(&z, &u, &vec![0.0; ports], &mut v0);
    load.port_voltages(&z, &u, &vec![1.0; ports], &mut v1);
    if v0.iter().zip(&v1).any(|(a, b)| a != b) {
        return Err(Error::Config("load port voltages depend directly on block currents (algebraic loop)".into()));
    }
    Ok(())
}

/// `samples` uniformly spaced times covering `[0, horizon]`, both ends exact.
pub fn uniform_grid(horizon: f64, samples: usize) -> Result<Vec<f64>> {
    if samples < 2 || !(horizon > 0.0) {
        return Err(Error::InvalidInput(format!("grid needs samples >= 2 and positive horizon, got {samples}, {horizon}")));
    }
    let dt = horizon / (samples - 1) as f64;
    let mut g: Vec<f64> = (0..samples).map(|k| k as f64 * dt).collect();
    g[samples - 1] = horizon;
    Ok(g)
}

/// Picks the samples of `tr` that sit exactly on `grid`, interpolating any
/// grid time the integrator did not land on.
fn resample(tr: &Trajectory, grid: &[f64]) -> Result<Trajectory> {
    let mut out = Vec::with_capacity(grid.len());
    let mut k = 0;
    for &t in grid {
        while k < tr.len() && tr.times[k] < t {
            k += 1;
        }
        if k < tr.len() && tr.times[k] == t {
            out.push(tr.values[k].clone());
        } else {
            out.push(tr.interp(t)?);
        }
    }
    Trajectory::new(grid.to_vec(), out)
}

/// Closed-loop (deployment) accuracy over randomized loads and sources.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CosimReport {
    pub runs: usize,
    pub succeeded: usize,
    pub failures: Vec<RunFailure>,
    /// Normalized MSE per run, averaged over output channels.
    pub run_mse: Vec<RunMse>,
    pub mean_mse: f64,
    pub channel_mse: Vec<f64>,
    /// Largest absolute model state seen over all runs (boundedness check).
    pub max_state: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMse {
    pub run: usize,
    pub seed_stream: u64,
    pub mse: f64,
    pub channel_mse: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: usize,
    pub error: String,
}

/// Settings for a closed-loop test campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CosimConfig {
    pub runs: usize,
    pub seed: u64,
    pub horizon: f64,
    pub samples: usize,
    pub solver: SolverConfig,
}

impl Default for CosimConfig {
    fn default() -> Self {
        Self {
            runs: 100,
            seed: 7,
            horizon: 1.0,
            samples: 401,
            solver: SolverConfig::with_tolerances(1e-6, 1e-8),
        }
    }
}

/// Normalized MSE between two current records, per output channel.
pub fn normalized_channel_mse(truth: &Trajectory, pred: &Trajectory, scaling: &PortScaling) -> Vec<f64> {
    let p = scaling.outputs.len();
    let mut acc = vec![0.0; p];
    let times = &truth.times;
    let total = times[times.len() - 1] - times[0];
    for k in 0..times.len() - 1 {
        let dt = times[k + 1] - times[k];
        for (j, rec) in scaling.outputs.iter().enumerate() {
            let e0 = rec.normalize(truth.values[k][j]) - rec.normalize(pred.values[k][j]);
            let e1 = rec.normalize(truth.values[k + 1][j]) - rec.normalize(pred.values[k + 1][j]);
            acc[j] += 0.5 * dt * (e0 * e0 + e1 * e1);
        }
    }
    acc.into_iter().map(|a| a / total).collect()
}

/// Runs `cfg.runs` closed-loop simulations of `model` and of `oracle`, each
/// run drawing its own load and source from the dataset's generators with
/// a per-run random stream, and compares the port currents.
pub fn test_mse(model: &dyn PortBlock, oracle: &CircuitOracle, dataset: &Dataset, cfg: &CosimConfig) -> CosimReport {
    let scaling = &dataset.scaling;
    let results: Vec<Result<(Vec<f64>, f64)>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(run as u64);
            let (load, source) = draw_scenario(&dataset.config, cfg.horizon, &mut rng)?;
            run_pair(model, oracle, &load, &source, cfg, scaling)
        })
        .collect();

    let p = scaling.outputs.len();
    let mut run_mse = Vec::new();
    let mut failures = Vec::new();
    let mut channel_sum = vec![0.0; p];
    let mut max_state = 0.0f64;
    for (run, r) in results.into_iter().enumerate() {
        match r {
            Ok((ch, ms)) => {
                for (s, c) in channel_sum.iter_mut().zip(&ch) {
                    *s += c;
                }
                max_state = max_state.max(ms);
                let mse = ch.iter().sum::<f64>() / p as f64;
                run_mse.push(RunMse { run, seed_stream: run as u64, mse, channel_mse: ch });
            }
            Err(e) => {
                warn!("closed-loop run {run} failed: {e}");
                failures.push(RunFailure { run, error: e.to_string() });
            }
        }
    }
    let ok = run_mse.len();
    let mean_mse = if ok == 0 { f64::NAN } else { run_mse.iter().map(|r| r.mse).sum::<f64>() / ok as f64 };
    let channel_mse = channel_sum.into_iter().map(|s| s / ok.max(1) as f64).collect();
    if !failures.is_empty() {
        warn!("{} of {} closed-loop runs excluded from the mean", failures.len(), cfg.runs);
    }
    CosimReport { runs: cfg.runs, succeeded: ok, failures, run_mse, mean_mse, channel_mse, max_state }
}

fn run_pair(
    model: &dyn PortBlock,
    oracle: &CircuitOracle,
    load: &LoadDesc,
    source: &Trajectory,
    cfg: &CosimConfig,
    scaling: &PortScaling,
) -> Result<(Vec<f64>, f64)> {
    let truth = Interconnection::new(oracle, load, source)?.simulate(cfg.horizon, cfg.samples, &cfg.solver)?;
    let pred = Interconnection::new(model, load, source)?.simulate(cfg.horizon, cfg.samples, &cfg.solver)?;
    let nb = model.state_dim();
    let max_state = pred.states.values.iter().map(|s| norm_inf(&s[..nb])).fold(0.0, f64::max);
    Ok((normalized_channel_mse(&truth.currents, &pred.currents, scaling), max_state))
}
