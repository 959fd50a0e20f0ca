//! Synthetic circuit oracles, random stimuli and loads, and datasets.
//!
//! Oracles are small ODEs standing in for transistor-level circuits. Each
//! exposes two ports; the learned model maps the two port voltages to the
//! two port currents. Time is already rescaled so that horizons are of
//! order one; `time_scale` records physical seconds per model second.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cosim::{Interconnection, Load, PortBlock};
use crate::error::{Error, Result};
use crate::solver::{SolverConfig, Trajectory};

pub const DATASET_SCHEMA: &str = "iss-node-dataset-v1";

/// Affine map of one channel onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub min: f64,
    pub max: f64,
    /// Set when `max == min`; such a channel normalizes to 0.
    pub constant: bool,
}

impl NormRecord {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            if !v.is_finite() {
                return Err(Error::InvalidInput("non-finite channel value".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            return Err(Error::InvalidInput("empty channel".into()));
        }
        Ok(Self { min: lo, max: hi, constant: !(hi > lo) })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        if self.constant {
            0.0
        } else {
            2.0 * (v - self.min) / (self.max - self.min) - 1.0
        }
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        if self.constant {
            self.min
        } else {
            self.min + 0.5 * (z + 1.0) * (self.max - self.min)
        }
    }

    /// `d(physical)/d(normalized)`.
    pub fn half_span(&self) -> f64 {
        if self.constant {
            0.0
        } else {
            0.5 * (self.max - self.min)
        }
    }
}

/// Normalization of the model's ports plus the time rescaling factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortScaling {
    pub inputs: Vec<NormRecord>,
    pub outputs: Vec<NormRecord>,
    /// Physical seconds per model second.
    pub time_scale: f64,
}

impl PortScaling {
    pub fn normalize_inputs(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.inputs).map(|(x, r)| r.normalize(*x)).collect()
    }

    pub fn normalize_outputs(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.outputs).map(|(x, r)| r.normalize(*x)).collect()
    }

    pub fn denormalize_outputs(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.outputs).map(|(x, r)| r.denormalize(*x)).collect()
    }
}

/// Piecewise-linear voltage source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PwlSource {
    pub breakpoints: Vec<(f64, f64)>,
    pub range: (f64, f64),
}

impl PwlSource {
    pub fn segments(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn to_trajectory(&self) -> Result<Trajectory> {
        let (t, v): (Vec<f64>, Vec<f64>) = self.breakpoints.iter().copied().unzip();
        Trajectory::new(t, v.into_iter().map(|x| vec![x]).collect())
    }
}

/// Random PWL source on `[0, horizon]`: `segments − 1` sorted uniform
/// interior breakpoints and uniform levels in `range`.
pub fn gen_pwl(seed: u64, horizon: f64, segments: usize, range: (f64, f64)) -> Result<PwlSource> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pwl_from_rng(&mut rng, horizon, segments, range)
}

fn pwl_from_rng(rng: &mut ChaCha8Rng, horizon: f64, segments: usize, range: (f64, f64)) -> Result<PwlSource> {
    if segments == 0 || !(horizon > 0.0) || !(range.1 >= range.0) {
        return Err(Error::InvalidInput(format!("bad PWL request: segments={segments} horizon={horizon} range={range:?}")));
    }
    let min_gap = 1e-9 * horizon;
    let times = loop {
        let mut t: Vec<f64> = (1..segments).map(|_| rng.gen_range(0.0..horizon)).collect();
        t.sort_by(f64::total_cmp);
        t.insert(0, 0.0);
        t.push(horizon);
        if t.windows(2).all(|w| w[1] - w[0] > min_gap) {
            break t;
        }
    };
    let breakpoints = times.into_iter().map(|t| (t, level(rng, range))).collect();
    Ok(PwlSource { breakpoints, range })
}

fn level(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.gen_range(range.0..=range.1)
    } else {
        range.0
    }
}

/// Output bits of a Fibonacci LFSR. Tap `t` (1-based, as in the exponent of
/// the feedback polynomial) reads register bit `bits − t`; the output is
/// the least significant bit and feedback enters at the top.
pub fn lfsr_bits(bits: u32, taps: &[u32], state: u64, count: usize) -> Result<Vec<bool>> {
    if bits == 0 || bits > 63 {
        return Err(Error::InvalidInput(format!("register width {bits} outside 1..=63")));
    }
    if taps.is_empty() || taps.iter().any(|&t| t == 0 || t > bits) {
        return Err(Error::InvalidInput(format!("taps {taps:?} invalid for a {bits}-bit register")));
    }
    let mask = (1u64 << bits) - 1;
    let mut s = state & mask;
    if s == 0 {
        return Err(Error::InvalidInput("all-zero LFSR state never leaves zero".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(s & 1 == 1);
        let fb = taps.iter().fold(0u64, |acc, &t| acc ^ ((s >> (bits - t)) & 1));
        s = (s >> 1) | (fb << (bits - 1));
    }
    Ok(out)
}

/// Trapezoidal PRBS waveform description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrbsSource {
    pub register_bits: u32,
    pub taps: Vec<u32>,
    pub bit_period: f64,
    pub rise_time: f64,
    pub low: f64,
    pub high: f64,
}

impl PrbsSource {
    pub fn validate(&self) -> Result<()> {
        if !(self.bit_period > 0.0) || !(self.rise_time > 0.0) || self.rise_time >= self.bit_period {
            return Err(Error::InvalidInput(format!(
                "PRBS needs 0 < rise_time < bit_period, got {} and {}",
                self.rise_time, self.bit_period
            )));
        }
        Ok(())
    }

    /// Waveform of `periods` bits starting from register `state`.
    pub fn waveform(&self, state: u64, periods: usize) -> Result<Trajectory> {
        self.validate()?;
        if periods == 0 {
            return Err(Error::InvalidInput("PRBS needs at least one bit period".into()));
        }
        let bits = lfsr_bits(self.register_bits, &self.taps, state, periods)?;
        let lvl = |b: bool| if b { self.high } else { self.low };
        let mut times = vec![0.0];
        let mut values = vec![vec![lvl(bits[0])]];
        for k in 1..periods {
            if bits[k] != bits[k - 1] {
                let t = k as f64 * self.bit_period;
                times.push(t);
                values.push(vec![lvl(bits[k - 1])]);
                times.push(t + self.rise_time);
                values.push(vec![lvl(bits[k])]);
            }
        }
        let end = periods as f64 * self.bit_period;
        if *times.last().unwrap() < end {
            times.push(end);
            values.push(vec![lvl(bits[periods - 1])]);
        }
        Trajectory::new(times, values)
    }
}

/// Trapezoidal PRBS from a seeded random nonzero register state; levels are
/// 0 and 1.
pub fn gen_prbs(seed: u64, bits: u32, taps: &[u32], periods: usize, bit_period: f64, rise_time: f64) -> Result<Trajectory> {
    let src = PrbsSource { register_bits: bits, taps: taps.to_vec(), bit_period, rise_time, low: 0.0, high: 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    src.waveform(random_state(&mut rng, bits)?, periods)
}

fn random_state(rng: &mut ChaCha8Rng, bits: u32) -> Result<u64> {
    if bits == 0 || bits > 63 {
        return Err(Error::InvalidInput(format!("register width {bits} outside 1..=63")));
    }
    Ok(rng.gen_range(1..(1u64 << bits)))
}

/// Parallel resistor–capacitor branch to ground.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RcLoad {
    pub r: f64,
    pub c: f64,
}

/// Two-port test bench: port 1 is driven by the source through `source.r`
/// onto `source.c`; port 2 sees the RC `load`. Port currents are scaled by
/// `coupling`, so 0 decouples the bench from the block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortLoad {
    pub source: RcLoad,
    pub load: RcLoad,
    pub coupling: f64,
}

impl Default for PortLoad {
    fn default() -> Self {
        Self { source: RcLoad { r: 0.5, c: 0.03 }, load: RcLoad { r: 2.0, c: 0.05 }, coupling: 1.0 }
    }
}

impl Load for PortLoad {
    fn state_dim(&self) -> usize {
        2
    }

    fn port_count(&self) -> usize {
        2
    }

    fn source_dim(&self) -> usize {
        1
    }

    fn port_voltages(&self, z: &[f64], _u: &[f64], _i: &[f64], v: &mut [f64]) {
        v.copy_from_slice(z);
    }

    fn dynamics(&self, z: &[f64], u: &[f64], i: &[f64], dz: &mut [f64]) {
        dz[0] = ((u[0] - z[0]) / self.source.r - self.coupling * i[0]) / self.source.c;
        dz[1] = (-z[1] / self.load.r - self.coupling * i[1]) / self.load.c;
    }
}

/// Ideal voltage drive: each port voltage is a source channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdealDrive {
    pub ports: usize,
}

impl Load for IdealDrive {
    fn state_dim(&self) -> usize {
        0
    }

    fn port_count(&self) -> usize {
        self.ports
    }

    fn source_dim(&self) -> usize {
        self.ports
    }

    fn port_voltages(&self, _z: &[f64], u: &[f64], _i: &[f64], v: &mut [f64]) {
        v.copy_from_slice(u);
    }

    fn dynamics(&self, _z: &[f64], _u: &[f64], _i: &[f64], _dz: &mut [f64]) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoadDesc {
    Ideal(IdealDrive),
    Rc(PortLoad),
}

impl LoadDesc {
    fn inner(&self) -> &dyn Load {
        match self {
            LoadDesc::Ideal(l) => l,
            LoadDesc::Rc(l) => l,
        }
    }
}

impl Load for LoadDesc {
    fn state_dim(&self) -> usize {
        self.inner().state_dim()
    }

    fn port_count(&self) -> usize {
        self.inner().port_count()
    }

    fn source_dim(&self) -> usize {
        self.inner().source_dim()
    }

    fn port_voltages(&self, z: &[f64], u: &[f64], i: &[f64], v: &mut [f64]) {
        self.inner().port_voltages(z, u, i, v)
    }

    fn dynamics(&self, z: &[f64], u: &[f64], i: &[f64], dz: &mut [f64]) {
        self.inner().dynamics(z, u, i, dz)
    }
}

/// Amplifier stage surrogate. A transconductance state follows a saturating
/// function of the gate voltage; a drain state integrates it against the
/// output conductance seen at port 2.
///
/// ```text
/// ẋ₁ = (−x₁ + g·tanh(k·v₁)) / τ_a
/// ẋ₂ = (x₁ − x₂ + v₂/r_d) / τ_b
/// i₁ = c_m·(x₁ − x₂ + v₂/r_d)
/// i₂ = x₂
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommonSource {
    pub g: f64,
    pub k: f64,
    pub tau_a: f64,
    pub tau_b: f64,
    pub c_m: f64,
    pub r_d: f64,
}

impl Default for CommonSource {
    fn default() -> Self {
        Self { g: 1.0, k: 2.0, tau_a: 0.04, tau_b: 0.1, c_m: 0.3, r_d: 2.0 }
    }
}

/// Cascade of nine saturating stages. Port 2 weakly loads the last stage;
/// the port currents are drawn by the first and last stage.
///
/// ```text
/// ẋ_j = (tanh(α(x_{j−1} − v_th)) − x_j) / (τ·age),  x₀ = v_in
/// ẋ₉ += (v_out − x₉) / τ_o
/// i_in = x₁ / r_in,  i_out = x₉ / r_out
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InverterChain {
    pub stages: usize,
    pub alpha: f64,
    pub v_th: f64,
    pub tau: f64,
    pub tau_o: f64,
    pub r_in: f64,
    pub r_out: f64,
    /// Stage slowdown factor; 1 for a fresh circuit.
    pub age: f64,
}

impl Default for InverterChain {
    fn default() -> Self {
        Self { stages: 9, alpha: 1.5, v_th: 0.0, tau: 0.015, tau_o: 0.05, r_in: 10.0, r_out: 2.0, age: 1.0 }
    }
}

/// One first-order RC section per port:
/// `ẋ_j = (v_j − x_j)/(r_j c_j)`, `i_j = (v_j − x_j)/r_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Linear2Port {
    pub r: [f64; 2],
    pub c: [f64; 2],
}

impl Default for Linear2Port {
    fn default() -> Self {
        Self { r: [1.0, 2.0], c: [0.1, 0.05] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum OracleKind {
    CommonSourceSurrogate,
    InverterChainSurrogate,
    Linear2port,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CircuitOracle {
    CommonSourceSurrogate(CommonSource),
    InverterChainSurrogate(InverterChain),
    Linear2port(Linear2Port),
}

impl CircuitOracle {
    pub fn default_for(kind: OracleKind) -> Self {
        match kind {
            OracleKind::CommonSourceSurrogate => Self::CommonSourceSurrogate(CommonSource::default()),
            OracleKind::InverterChainSurrogate => Self::InverterChainSurrogate(InverterChain::default()),
            OracleKind::Linear2port => Self::Linear2port(Linear2Port::default()),
        }
    }

    pub fn kind(&self) -> OracleKind {
        match self {
            Self::CommonSourceSurrogate(_) => OracleKind::CommonSourceSurrogate,
            Self::InverterChainSurrogate(_) => OracleKind::InverterChainSurrogate,
            Self::Linear2port(_) => OracleKind::Linear2port,
        }
    }

    pub fn port_labels(&self) -> (Vec<String>, Vec<String>) {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        match self {
            Self::InverterChainSurrogate(_) => (s(&["v_in", "v_out"]), s(&["i_in", "i_out"])),
            _ => (s(&["v1", "v2"]), s(&["i1", "i2"])),
        }
    }
}

impl PortBlock for CircuitOracle {
    fn state_dim(&self) -> usize {
        match self {
            Self::CommonSourceSurrogate(_) | Self::Linear2port(_) => 2,
            Self::InverterChainSurrogate(c) => c.stages,
        }
    }

    fn port_count(&self) -> usize {
        2
    }

    fn dynamics(&self, x: &[f64], v: &[f64], dx: &mut [f64]) {
        match self {
            Self::CommonSourceSurrogate(c) => {
                dx[0] = (-x[0] + c.g * (c.k * v[0]).tanh()) / c.tau_a;
                dx[1] = (x[0] - x[1] + v[1] / c.r_d) / c.tau_b;
            }
            Self::InverterChainSurrogate(c) => {
                let tau = c.tau * c.age;
                let mut prev = v[0];
                for j in 0..c.stages {
                    dx[j] = ((c.alpha * (prev - c.v_th)).tanh() - x[j]) / tau;
                    prev = x[j];
                }
                dx[c.stages - 1] += (v[1] - x[c.stages - 1]) / c.tau_o;
            }
            Self::Linear2port(c) => {
                for j in 0..2 {
                    dx[j] = (v[j] - x[j]) / (c.r[j] * c.c[j]);
                }
            }
        }
    }

    fn currents(&self, x: &[f64], v: &[f64], i: &mut [f64]) {
        match self {
            Self::CommonSourceSurrogate(c) => {
                i[0] = c.c_m * (x[0] - x[1] + v[1] / c.r_d);
                i[1] = x[1];
            }
            Self::InverterChainSurrogate(c) => {
                i[0] = x[0] / c.r_in;
                i[1] = x[c.stages - 1] / c.r_out;
            }
            Self::Linear2port(c) => {
                for j in 0..2 {
                    i[j] = (v[j] - x[j]) / c.r[j];
                }
            }
        }
    }
}

/// Random stimulus generator for port 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Pwl { segments: usize, low: f64, high: f64 },
    Prbs { register_bits: u32, taps: Vec<u32>, bit_period: f64, rise_time: f64, low: f64, high: f64 },
}

/// Uniform ranges for the randomized two-port bench.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadRanges {
    pub r_source: (f64, f64),
    pub c_source: (f64, f64),
    pub r_load: (f64, f64),
    pub c_load: (f64, f64),
    pub coupling: f64,
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub oracle: CircuitOracle,
    pub n: usize,
    pub seed: u64,
    pub horizon: f64,
    pub samples: usize,
    pub valid_fraction: f64,
    pub time_scale: f64,
    pub source: SourceSpec,
    pub loads: LoadRanges,
    pub solver: SolverConfig,
}

impl DataConfig {
    pub fn for_oracle(kind: OracleKind) -> Self {
        let oracle = CircuitOracle::default_for(kind);
        let (source, loads, time_scale) = match kind {
            OracleKind::CommonSourceSurrogate | OracleKind::Linear2port => (
                SourceSpec::Pwl { segments: 6, low: -1.0, high: 1.0 },
                LoadRanges {
                    r_source: (0.2, 1.0),
                    c_source: (0.02, 0.05),
                    r_load: (1.0, 4.0),
                    c_load: (0.02, 0.08),
                    coupling: 1.0,
                },
                1e-9,
            ),
            OracleKind::InverterChainSurrogate => (
                SourceSpec::Pwl { segments: 8, low: -1.0, high: 1.0 },
                LoadRanges {
                    r_source: (0.05, 0.2),
                    c_source: (0.02, 0.05),
                    r_load: (1.0, 4.0),
                    c_load: (0.02, 0.08),
                    coupling: 1.0,
                },
                1e-10,
            ),
        };
        Self {
            oracle,
            n: 50,
            seed: 1,
            horizon: 1.0,
            samples: 401,
            valid_fraction: 0.2,
            time_scale,
            source,
            loads,
            solver: SolverConfig::with_tolerances(1e-8, 1e-10),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("dataset needs n >= 1".into()));
        }
        if !(self.horizon > 0.0) || self.samples < 2 || !(self.time_scale > 0.0) {
            return Err(Error::Config("horizon, samples and time_scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config("valid_fraction must lie in [0, 1)".into()));
        }
        let l = &self.loads;
        for (name, (lo, hi)) in [("r_source", l.r_source), ("c_source", l.c_source), ("r_load", l.r_load), ("c_load", l.c_load)] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Config(format!("load range {name} = ({lo}, {hi}) must be positive and ordered")));
            }
        }
        self.solver.validate()
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws a random bench and port-1 stimulus from the configured generators.
pub fn draw_scenario(cfg: &DataConfig, horizon: f64, rng: &mut ChaCha8Rng) -> Result<(LoadDesc, Trajectory)> {
    let l = &cfg.loads;
    let load = PortLoad {
        source: RcLoad { r: uniform(rng, l.r_source), c: uniform(rng, l.c_source) },
        load: RcLoad { r: uniform(rng, l.r_load), c: uniform(rng, l.c_load) },
        coupling: l.coupling,
    };
    let source = match &cfg.source {
        SourceSpec::Pwl { segments, low, high } => pwl_from_rng(rng, horizon, *segments, (*low, *high))?.to_trajectory()?,
        SourceSpec::Prbs { register_bits, taps, bit_period, rise_time, low, high } => {
            let src = PrbsSource {
                register_bits: *register_bits,
                taps: taps.clone(),
                bit_period: *bit_period,
                rise_time: *rise_time,
                low: *low,
                high: *high,
            };
            let periods = (horizon / bit_period).ceil().max(1.0) as usize;
            src.waveform(random_state(rng, *register_bits)?, periods)?
        }
    };
    Ok((LoadDesc::Rc(load), source))
}

/// Simulates oracle + load + source from the joint DC point; returns the
/// port voltages (model input) and port currents (model target).
pub fn simulate_oracle(
    oracle: &CircuitOracle,
    load: &LoadDesc,
    source: &Trajectory,
    horizon: f64,
    samples: usize,
    cfg: &SolverConfig,
) -> Result<(Trajectory, Trajectory)> {
    let rec = Interconnection::new(oracle, load, source)?.simulate(horizon, samples, cfg)?;
    let (vin, iout) = oracle.port_labels();
    let u = Trajectory::with_labels(rec.voltages.times, rec.voltages.values, vin)?;
    let y = Trajectory::with_labels(rec.currents.times, rec.currents.values, iout)?;
    Ok((u, y))
}

/// One recorded experiment in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub index: usize,
    pub load: LoadDesc,
    pub source: Trajectory,
    pub u: Trajectory,
    pub y: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub schema: String,
    pub config: DataConfig,
    pub scaling: PortScaling,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub items: Vec<DatasetItem>,
}

/// A normalized (input, target) pair ready for training.
#[derive(Clone, Debug)]
pub struct Pair {
    pub index: usize,
    pub u: Trajectory,
    pub y: Trajectory,
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ds.schema != DATASET_SCHEMA {
            return Err(Error::InvalidInput(format!("unsupported dataset schema '{}'", ds.schema)));
        }
        Ok(ds)
    }

    pub fn pair(&self, index: usize) -> Result<Pair> {
        let item = &self.items[index];
        Ok(Pair {
            index,
            u: item.u.map(|v| self.scaling.normalize_inputs(v))?,
            y: item.y.map(|v| self.scaling.normalize_outputs(v))?,
        })
    }

    pub fn pairs(&self, indices: &[usize]) -> Result<Vec<Pair>> {
        indices.iter().map(|&i| self.pair(i)).collect()
    }

    pub fn ports(&self) -> usize {
        self.scaling.inputs.len()
    }
}

/// Seeded 80/20-style split by trajectory index.
pub fn split_indices(n: usize, valid_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    for k in (1..n).rev() {
        idx.swap(k, rng.gen_range(0..=k));
    }
    let n_valid = if n < 2 { 0 } else { ((n as f64 * valid_fraction).round() as usize).clamp(1, n - 1) };
    let mut valid = idx.split_off(n - n_valid);
    idx.sort_unstable();
    valid.sort_unstable();
    (idx, valid)
}

/// Channel-wise normalization records from the given items only.
pub fn fit_scaling(items: &[&DatasetItem], time_scale: f64) -> Result<PortScaling> {
    let m = items[0].u.dim();
    let p = items[0].y.dim();
    let inputs = (0..m)
        .map(|k| NormRecord::from_values(items.iter().flat_map(|it| it.u.values.iter().map(move |v| v[k]))))
        .collect::<Result<_>>()?;
    let outputs = (0..p)
        .map(|k| NormRecord::from_values(items.iter().flat_map(|it| it.y.values.iter().map(move |v| v[k]))))
        .collect::<Result<_>>()?;
    Ok(PortScaling { inputs, outputs, time_scale })
}

/// Random stream for item `index` of a generator seeded with `seed`.
pub fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates `cfg.n` experiments in parallel (each from its own random
/// stream), splits them and fits the normalization on the training split.
pub fn build_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let items: Vec<DatasetItem> = (0..cfg.n)
        .into_par_iter()
        .map(|index| {
            let mut rng = item_rng(cfg.seed, index);
            let (load, source) = draw_scenario(cfg, cfg.horizon, &mut rng)?;
            let (u, y) = simulate_oracle(&cfg.oracle, &load, &source, cfg.horizon, cfg.samples, &cfg.solver)?;
            Ok(DatasetItem { index, load, source, u, y })
        })
        .collect::<Result<_>>()?;
    let (train, valid) = split_indices(cfg.n, cfg.valid_fraction, cfg.seed);
    let train_items: Vec<&DatasetItem> = train.iter().map(|&i| &items[i]).collect();
    let scaling = fit_scaling(&train_items, cfg.time_scale)?;
    Ok(Dataset { schema: DATASET_SCHEMA.into(), config: cfg.clone(), scaling, train, valid, items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_examples() {
        let r = NormRecord::from_values([-3.0, 5.0, 0.0]).unwrap();
        assert_eq!(r.normalize(-3.0), -1.0);
        assert_eq!(r.normalize(5.0), 1.0);
        assert_eq!(r.normalize(1.0), 0.0);
        let c = NormRecord::from_values([2.0, 2.0]).unwrap();
        assert!(c.constant);
        assert_eq!(c.normalize(2.0), 0.0);
        assert_eq!(c.normalize(7.0), 0.0);
        assert_eq!(c.denormalize(0.3), 2.0);
    }

    proptest! {
        #[test]
        fn normalize_round_trip(lo in -1e3f64..1e3, span in 1e-3f64..1e3, v in -2e3f64..2e3) {
            let r = NormRecord { min: lo, max: lo + span, constant: false };
            let back = r.denormalize(r.normalize(v));
            prop_assert!((back - v).abs() <= 1e-12 * (1.0 + v.abs() + lo.abs() + span));
        }
    }

    #[test]
    fn pwl_is_deterministic_and_in_range() {
        assert_eq!(gen_pwl(5, 1.0, 6, (-1.0, 1.0)).unwrap(), gen_pwl(5, 1.0, 6, (-1.0, 1.0)).unwrap());
        for seed in 0..1000 {
            let s = gen_pwl(seed, 2.0, 1 + (seed as usize % 7), (-0.5, 1.5)).unwrap();
            assert_eq!(s.breakpoints[0].0, 0.0);
            assert_eq!(s.breakpoints.last().unwrap().0, 2.0);
            assert!(s.breakpoints.windows(2).all(|w| w[1].0 > w[0].0));
            assert!(s.breakpoints.iter().all(|&(_, v)| (-0.5..=1.5).contains(&v)));
        }
        let one = gen_pwl(9, 1.0, 1, (0.0, 1.0)).unwrap();
        assert_eq!(one.segments(), 1);
        assert_eq!(one.breakpoints.len(), 2);
        assert!(gen_pwl(1, 1.0, 0, (0.0, 1.0)).is_err());
    }

    fn period(bits: u32, taps: &[u32], state: u64) -> usize {
        // enumerate register states by replaying the stream one bit at a time
        let mask = (1u64 << bits) - 1;
        let mut s = state;
        for k in 1..=(1usize << bits) {
            let fb = taps.iter().fold(0u64, |acc, &t| acc ^ ((s >> (bits - t)) & 1));
            s = ((s >> 1) | (fb << (bits - 1))) & mask;
            if s == state {
                return k;
            }
        }
        usize::MAX
    }

    #[test]
    fn lfsr_three_bit_period_seven() {
        for state in 1..8 {
            assert_eq!(period(3, &[3, 2], state), 7);
            let seq = lfsr_bits(3, &[3, 2], state, 21).unwrap();
            assert_eq!(seq[..7], seq[7..14]);
            assert_eq!(seq[..7], seq[14..21]);
            assert_eq!(seq[..7].iter().filter(|&&b| b).count(), 4);
        }
        assert_eq!(period(7, &[7, 6], 1), 127);
        assert!(matches!(lfsr_bits(3, &[3, 2], 0, 5), Err(Error::InvalidInput(_))));
        assert!(lfsr_bits(3, &[4], 1, 5).is_err());
    }

    #[test]
    fn prbs_waveform_levels() {
        let tr = gen_prbs(4, 7, &[7, 6], 16, 0.1, 0.01).unwrap();
        assert_eq!(tr.start(), 0.0);
        assert!((tr.end() - 1.6).abs() < 1e-12);
        assert!(tr.values.iter().all(|v| v[0] == 0.0 || v[0] == 1.0));
        // mid-bit samples sit on a rail
        for k in 0..16 {
            let v = tr.interp(0.1 * k as f64 + 0.05).unwrap()[0];
            assert!(v == 0.0 || v == 1.0);
        }
        assert_eq!(tr, gen_prbs(4, 7, &[7, 6], 16, 0.1, 0.01).unwrap());
        assert!(gen_prbs(4, 7, &[7, 6], 16, 0.1, 0.2).is_err());
    }

    fn quick_cfg(kind: OracleKind, n: usize) -> DataConfig {
        DataConfig { n, samples: 101, solver: SolverConfig::with_tolerances(1e-7, 1e-9), ..DataConfig::for_oracle(kind) }
    }

    #[test]
    fn zero_source_gives_constant_trajectories() {
        for kind in [OracleKind::CommonSourceSurrogate, OracleKind::InverterChainSurrogate, OracleKind::Linear2port] {
            let oracle = CircuitOracle::default_for(kind);
            let src = Trajectory::constant(vec![0.0], 0.0, 1.0).unwrap();
            let load = LoadDesc::Rc(PortLoad::default());
            let (u, y) = simulate_oracle(&oracle, &load, &src, 1.0, 51, &SolverConfig::default()).unwrap();
            for tr in [&u, &y] {
                for v in &tr.values {
                    for (a, b) in v.iter().zip(&tr.values[0]) {
                        assert!((a - b).abs() < 1e-9, "{kind:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn linear_2port_step_response() {
        let oracle = CircuitOracle::Linear2port(Linear2Port::default());
        let eps = 1e-9;
        let src = Trajectory::new(vec![0.0, eps, 1.0], vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let load = LoadDesc::Ideal(IdealDrive { ports: 2 });
        let cfg = SolverConfig::with_tolerances(1e-10, 1e-12);
        let (u, y) = simulate_oracle(&oracle, &load, &src, 1.0, 101, &cfg).unwrap();
        let rc = 0.1;
        for (k, &t) in u.times.iter().enumerate().skip(1) {
            // i_j = (1 − x_j)/r_j with x_j = 1 − e^{−t/RC}
            for (j, r) in [1.0, 2.0].iter().enumerate() {
                let expect = (-t / rc).exp() / r;
                assert!((y.values[k][j] - expect).abs() < 1e-6, "t={t} ch {j}: {} vs {expect}", y.values[k][j]);
            }
        }
    }

    #[test]
    fn oracle_trajectories_bounded() {
        for kind in [OracleKind::CommonSourceSurrogate, OracleKind::InverterChainSurrogate] {
            let ds = build_dataset(&quick_cfg(kind, 6)).unwrap();
            for it in &ds.items {
                for v in it.u.values.iter().chain(&it.y.values) {
                    assert!(v.iter().all(|x| x.abs() < 10.0), "{kind:?}: {v:?}");
                }
            }
        }
    }

    #[test]
    fn dataset_split_and_normalization() {
        let ds = build_dataset(&quick_cfg(OracleKind::CommonSourceSurrogate, 10)).unwrap();
        assert_eq!(ds.train.len(), 8);
        assert_eq!(ds.valid.len(), 2);
        let mut all: Vec<usize> = ds.train.iter().chain(&ds.valid).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for p in ds.pairs(&ds.train).unwrap() {
            for v in p.u.values.iter().chain(&p.y.values) {
                assert!(v.iter().all(|x| (-1.0 - 1e-12..=1.0 + 1e-12).contains(x)));
            }
        }
        // the extremes come from the training split
        let train_items: Vec<&DatasetItem> = ds.train.iter().map(|&i| &ds.items[i]).collect();
        assert_eq!(fit_scaling(&train_items, 1e-9).unwrap(), ds.scaling);
    }

    #[test]
    fn dataset_is_deterministic_and_round_trips() {
        let cfg = quick_cfg(OracleKind::CommonSourceSurrogate, 3);
        let a = build_dataset(&cfg).unwrap();
        let b = build_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let one = build_dataset(&DataConfig { n: 1, ..cfg }).unwrap();
        one.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), one);
        assert!(one.valid.is_empty());
    }
}
