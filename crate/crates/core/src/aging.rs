//! Aging-aware modeling: a frozen fresh model plus GRU-encoded perturbations
//! of `A_θ`, `B` and `μ` driven by a stress profile. The perturbed `A_θ` goes
//! through the same ISS scaling, so every aged model keeps the certificate.

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{draw_scenario, item_rng, simulate_oracle, split_indices, CircuitOracle, DataConfig, Dataset, LoadDesc, Pair, PortScaling};
use crate::error::{Error, Result};
use crate::model::CtrnnParams;
use crate::numerics::Matrix;
use crate::solver::Trajectory;
use crate::stability::certify;
use crate::training::{draw_sample_times, evaluate_openloop, loss_and_grad_at_times, Adam, OpenLoopReport, TrainConfig};

pub const AGING_SCHEMA: &str = "iss-node-aging-v1";
pub const AGED_MODEL_SCHEMA: &str = "iss-node-aged-model-v1";
pub const GRU_HIDDEN: usize = 20;

/// Periodic stress waveform (one period) and operating time in years.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressProfile {
    pub u_stress: Trajectory,
    pub t_op_years: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgingConfig {
    /// Slowdown per decade of operating time at full duty.
    pub kappa: f64,
    pub t0_years: f64,
    pub t_op_range: (f64, f64),
    pub v_dd: f64,
    pub stress_period: f64,
    /// Samples of one stress period fed to the GRU.
    pub gru_steps: usize,
    pub n: usize,
    pub seed: u64,
    pub valid_fraction: f64,
    /// Size of the held-out test set drawn from a separate seed.
    pub test_n: usize,
}

impl Default for AgingConfig {
    fn default() -> Self {
        Self {
            kappa: 0.3,
            t0_years: 1e-3,
            t_op_range: (1e-3, 10.0),
            v_dd: 1.0,
            stress_period: 1.0,
            gru_steps: 64,
            n: 60,
            seed: 11,
            valid_fraction: 0.2,
            test_n: 30,
        }
    }
}

impl AgingConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.t_op_range;
        let ok = self.kappa >= 0.0
            && self.t0_years > 0.0
            && lo > 0.0
            && hi >= lo
            && self.v_dd > 0.0
            && self.stress_period > 0.0
            && self.gru_steps >= 1
            && self.n >= 1
            && (0.0..1.0).contains(&self.valid_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid aging configuration {self:?}")))
        }
    }

    /// Time average of `clamp(u/v_dd, 0, 1)` over the stress period.
    pub fn duty(&self, profile: &StressProfile) -> f64 {
        const SAMPLES: usize = 1024;
        let tr = &profile.u_stress;
        let span = tr.end() - tr.start();
        let sum: f64 = (0..SAMPLES)
            .map(|k| {
                let t = tr.start() + (k as f64 + 0.5) * span / SAMPLES as f64;
                (tr.interp(t).unwrap()[0] / self.v_dd).clamp(0.0, 1.0)
            })
            .sum();
        sum / SAMPLES as f64
    }

    /// Stage slowdown `1 + κ·duty·log₁₀(1 + T_op/T₀)`.
    pub fn age_factor(&self, profile: &StressProfile) -> f64 {
        1.0 + self.kappa * self.duty(profile) * (1.0 + profile.t_op_years / self.t0_years).log10()
    }

    /// Oracle with its stage time constants stretched by the age factor.
    pub fn aged_oracle(&self, fresh: &CircuitOracle, profile: &StressProfile) -> Result<CircuitOracle> {
        match fresh {
            CircuitOracle::InverterChainSurrogate(c) => {
                let mut aged = c.clone();
                aged.age = c.age * self.age_factor(profile);
                Ok(CircuitOracle::InverterChainSurrogate(aged))
            }
            other => Err(Error::Config(format!("no aging hook for oracle {:?}", other.kind()))),
        }
    }

    /// Random pulse-train stress: duty in [0.1, 0.9], amplitude in
    /// [0.5, 1]·v_dd, and a log-uniform operating time.
    pub fn draw_profile(&self, rng: &mut ChaCha8Rng) -> Result<StressProfile> {
        let duty: f64 = rng.gen_range(0.1..0.9);
        let amp = self.v_dd * rng.gen_range(0.5..=1.0);
        let p = self.stress_period;
        let edge = 0.02 * p;
        let high_end = duty * p;
        let u_stress = Trajectory::new(
            vec![0.0, edge, high_end, high_end + edge, p],
            vec![vec![0.0], vec![amp], vec![amp], vec![0.0], vec![0.0]],
        )?;
        let (lo, hi) = self.t_op_range;
        let t_op_years = if hi > lo { 10f64.powf(rng.gen_range(lo.log10()..hi.log10())) } else { lo };
        Ok(StressProfile { u_stress, t_op_years })
    }

    /// GRU input sequence: `[u_stress(t_k)/v_dd, log₁₀ T_op]` on a uniform
    /// grid over one period.
    pub fn encode(&self, profile: &StressProfile) -> Vec<[f64; 2]> {
        let tr = &profile.u_stress;
        let span = tr.end() - tr.start();
        let lt = profile.t_op_years.log10();
        (0..self.gru_steps)
            .map(|k| {
                let t = tr.start() + k as f64 * span / self.gru_steps as f64;
                [tr.interp(t).unwrap()[0] / self.v_dd, lt]
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Single-layer GRU encoder with linear read-out heads for `Δ_A` (ℓ×n,
/// row-major), `Δ_B` (ℓ×m) and `Δ_μ` (ℓ), applied to the final hidden state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruPerturbNet {
    pub input: usize,
    pub hidden: usize,
    pub wz: Matrix,
    pub uz: Matrix,
    pub bz: Vec<f64>,
    pub wr: Matrix,
    pub ur: Matrix,
    pub br: Vec<f64>,
    pub wh: Matrix,
    pub uh: Matrix,
    pub bh: Vec<f64>,
    pub head_a: Matrix,
    pub head_a_bias: Vec<f64>,
    pub head_b: Matrix,
    pub head_b_bias: Vec<f64>,
    pub head_mu: Matrix,
    pub head_mu_bias: Vec<f64>,
}

/// Additive perturbations of the fresh parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Deltas {
    pub a: Matrix,
    pub b: Matrix,
    pub mu: Vec<f64>,
}

struct GruTape {
    xs: Vec<Vec<f64>>,
    hs: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
    rs: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
}

impl GruPerturbNet {
    /// Gate weights uniform in `±1/√hidden`; heads all zero.
    pub fn new(fresh: &CtrnnParams, input: usize, hidden: usize, seed: u64) -> Self {
        let d = fresh.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut mat = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-bound..=bound)).collect()).unwrap()
        };
        let (wz, uz, wr, ur, wh, uh) =
            (mat(hidden, input), mat(hidden, hidden), mat(hidden, input), mat(hidden, hidden), mat(hidden, input), mat(hidden, hidden));
        Self {
            input,
            hidden,
            wz,
            uz,
            bz: vec![0.0; hidden],
            wr,
            ur,
            br: vec![0.0; hidden],
            wh,
            uh,
            bh: vec![0.0; hidden],
            head_a: Matrix::zeros(d.l * d.n, hidden),
            head_a_bias: vec![0.0; d.l * d.n],
            head_b: Matrix::zeros(d.l * d.m, hidden),
            head_b_bias: vec![0.0; d.l * d.m],
            head_mu: Matrix::zeros(d.l, hidden),
            head_mu_bias: vec![0.0; d.l],
        }
    }

    fn run(&self, seq: &[[f64; 2]]) -> GruTape {
        let hd = self.hidden;
        let mut tape = GruTape { xs: Vec::new(), hs: vec![vec![0.0; hd]], zs: Vec::new(), rs: Vec::new(), cs: Vec::new() };
        for x in seq {
            let x = x.to_vec();
            let h = tape.hs.last().unwrap();
            let gate = |w: &Matrix, u: &Matrix, b: &[f64], hv: &[f64]| -> Vec<f64> {
                let a = w.matvec(&x);
                let c = u.matvec(hv);
                a.iter().zip(&c).zip(b).map(|((p, q), r)| p + q + r).collect()
            };
            let z: Vec<f64> = gate(&self.wz, &self.uz, &self.bz, h).into_iter().map(sigmoid).collect();
            let r: Vec<f64> = gate(&self.wr, &self.ur, &self.br, h).into_iter().map(sigmoid).collect();
            let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
            let c: Vec<f64> = gate(&self.wh, &self.uh, &self.bh, &rh).into_iter().map(f64::tanh).collect();
            let hn: Vec<f64> = (0..hd).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect();
            tape.xs.push(x);
            tape.zs.push(z);
            tape.rs.push(r);
            tape.cs.push(c);
            tape.hs.push(hn);
        }
        tape
    }

    fn heads(&self, h: &[f64], shape: (usize, usize, usize)) -> Result<Deltas> {
        let (l, n, m) = shape;
        let affine = |w: &Matrix, b: &[f64]| -> Vec<f64> { w.matvec(h).iter().zip(b).map(|(a, c)| a + c).collect() };
        Ok(Deltas {
            a: Matrix::from_vec(l, n, affine(&self.head_a, &self.head_a_bias))?,
            b: Matrix::from_vec(l, m, affine(&self.head_b, &self.head_b_bias))?,
            mu: affine(&self.head_mu, &self.head_mu_bias),
        })
    }

    fn shape(&self) -> (usize, usize, usize) {
        let l = self.head_mu.rows();
        (l, self.head_a.rows() / l, self.head_b.rows() / l)
    }

    pub fn forward(&self, seq: &[[f64; 2]]) -> Result<Deltas> {
        if seq.is_empty() {
            return Err(Error::InvalidInput("empty stress sequence".into()));
        }
        let tape = self.run(seq);
        self.heads(tape.hs.last().unwrap(), self.shape())
    }

    /// Reverse pass: gradient of the loss w.r.t. every weight, in the
    /// [`Self::to_flat`] layout, given the cotangents of the three deltas.
    fn backward(&self, seq: &[[f64; 2]], da: &Matrix, db: &Matrix, dmu: &[f64]) -> Vec<f64> {
        let tape = self.run(seq);
        let mut g = self.zeros_like();
        let hd = self.hidden;
        let h_t = tape.hs.last().unwrap();
        g.head_a.add_outer(1.0, da.as_slice(), h_t);
        g.head_a_bias.copy_from_slice(da.as_slice());
        g.head_b.add_outer(1.0, db.as_slice(), h_t);
        g.head_b_bias.copy_from_slice(db.as_slice());
        g.head_mu.add_outer(1.0, dmu, h_t);
        g.head_mu_bias.copy_from_slice(dmu);
        let mut hbar: Vec<f64> = vec![0.0; hd];
        for (head, cot) in [(&self.head_a, da.as_slice()), (&self.head_b, db.as_slice()), (&self.head_mu, dmu)] {
            for (acc, v) in hbar.iter_mut().zip(head.matvec_t(cot)) {
                *acc += v;
            }
        }
        for t in (0..seq.len()).rev() {
            let (x, h, z, r, c) = (&tape.xs[t], &tape.hs[t], &tape.zs[t], &tape.rs[t], &tape.cs[t]);
            let mut hprev = vec![0.0; hd];
            let mut az = vec![0.0; hd];
            let mut ac = vec![0.0; hd];
            for i in 0..hd {
                let zbar = hbar[i] * (c[i] - h[i]);
                let cbar = hbar[i] * z[i];
                hprev[i] = hbar[i] * (1.0 - z[i]);
                az[i] = zbar * z[i] * (1.0 - z[i]);
                ac[i] = cbar * (1.0 - c[i] * c[i]);
            }
            let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
            g.wh.add_outer(1.0, &ac, x);
            g.uh.add_outer(1.0, &ac, &rh);
            let rhbar = self.uh.matvec_t(&ac);
            let mut ar = vec![0.0; hd];
            for i in 0..hd {
                g.bh[i] += ac[i];
                hprev[i] += rhbar[i] * r[i];
                ar[i] = rhbar[i] * h[i] * r[i] * (1.0 - r[i]);
            }
            g.wz.add_outer(1.0, &az, x);
            g.uz.add_outer(1.0, &az, h);
            g.wr.add_outer(1.0, &ar, x);
            g.ur.add_outer(1.0, &ar, h);
            for i in 0..hd {
                g.bz[i] += az[i];
                g.br[i] += ar[i];
            }
            for (acc, v) in hprev.iter_mut().zip(self.uz.matvec_t(&az)) {
                *acc += v;
            }
            for (acc, v) in hprev.iter_mut().zip(self.ur.matvec_t(&ar)) {
                *acc += v;
            }
            hbar = hprev;
        }
        g.to_flat()
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let zv = |v: &[f64]| vec![0.0; v.len()];
        Self {
            input: self.input,
            hidden: self.hidden,
            wz: z(&self.wz),
            uz: z(&self.uz),
            bz: zv(&self.bz),
            wr: z(&self.wr),
            ur: z(&self.ur),
            br: zv(&self.br),
            wh: z(&self.wh),
            uh: z(&self.uh),
            bh: zv(&self.bh),
            head_a: z(&self.head_a),
            head_a_bias: zv(&self.head_a_bias),
            head_b: z(&self.head_b),
            head_b_bias: zv(&self.head_b_bias),
            head_mu: z(&self.head_mu),
            head_mu_bias: zv(&self.head_mu_bias),
        }
    }

    fn parts_mut(&mut self) -> [&mut [f64]; 15] {
        [
            self.wz.as_mut_slice(),
            self.uz.as_mut_slice(),
            &mut self.bz,
            self.wr.as_mut_slice(),
            self.ur.as_mut_slice(),
            &mut self.br,
            self.wh.as_mut_slice(),
            self.uh.as_mut_slice(),
            &mut self.bh,
            self.head_a.as_mut_slice(),
            &mut self.head_a_bias,
            self.head_b.as_mut_slice(),
            &mut self.head_b_bias,
            self.head_mu.as_mut_slice(),
            &mut self.head_mu_bias,
        ]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut c = self.clone();
        c.parts_mut().iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.parts_mut().iter().map(|p| p.len()).sum();
        if flat.len() != total {
            return Err(Error::DimensionMismatch(format!("GRU flat vector has {} entries, expected {total}", flat.len())));
        }
        let mut off = 0;
        for p in self.parts_mut() {
            let len = p.len();
            p.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }
}

/// Fresh parameters with the perturbations applied; `ρ` is recomputed from
/// the perturbed `A_θ` when the model is realized.
pub fn aged_params(fresh: &CtrnnParams, deltas: &Deltas) -> Result<CtrnnParams> {
    let mut p = fresh.clone();
    p.a_theta = fresh.a_theta.add(&deltas.a)?;
    p.b = fresh.b.add(&deltas.b)?;
    for (m, d) in p.mu.iter_mut().zip(&deltas.mu) {
        *m += d;
    }
    p.validate()?;
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgingItem {
    pub index: usize,
    pub profile: StressProfile,
    pub age_factor: f64,
    pub load: LoadDesc,
    pub source: Trajectory,
    pub u: Trajectory,
    pub y: Trajectory,
}

/// Aged-oracle recordings, normalized with the fresh dataset's scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgingDataset {
    pub schema: String,
    pub data: DataConfig,
    pub aging: AgingConfig,
    pub scaling: PortScaling,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub items: Vec<AgingItem>,
}

impl AgingDataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ds: AgingDataset = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ds.schema != AGING_SCHEMA {
            return Err(Error::InvalidInput(format!("unsupported aging dataset schema '{}'", ds.schema)));
        }
        Ok(ds)
    }

    pub fn pair(&self, index: usize) -> Result<Pair> {
        let it = &self.items[index];
        Ok(Pair {
            index,
            u: it.u.map(|v| self.scaling.normalize_inputs(v))?,
            y: it.y.map(|v| self.scaling.normalize_outputs(v))?,
        })
    }
}

/// Simulates the aged oracle for `cfg.n` random (profile, load, source)
/// draws, reusing the fresh dataset's generators and scaling.
pub fn build_aging_dataset(fresh: &Dataset, cfg: &AgingConfig) -> Result<AgingDataset> {
    cfg.validate()?;
    let data = &fresh.config;
    let items: Vec<AgingItem> = (0..cfg.n)
        .into_par_iter()
        .map(|index| {
            let mut rng = item_rng(cfg.seed, index);
            let profile = cfg.draw_profile(&mut rng)?;
            let oracle = cfg.aged_oracle(&data.oracle, &profile)?;
            let (load, source) = draw_scenario(data, data.horizon, &mut rng)?;
            let (u, y) = simulate_oracle(&oracle, &load, &source, data.horizon, data.samples, &data.solver)?;
            Ok(AgingItem { index, age_factor: cfg.age_factor(&profile), profile, load, source, u, y })
        })
        .collect::<Result<_>>()?;
    let (train, valid) = split_indices(cfg.n, cfg.valid_fraction, cfg.seed);
    Ok(AgingDataset {
        schema: AGING_SCHEMA.into(),
        data: data.clone(),
        aging: cfg.clone(),
        scaling: fresh.scaling.clone(),
        train,
        valid,
        items,
    })
}

/// Held-out aged recordings: `cfg.test_n` items from a seed disjoint from the
/// training draws, all listed in `train` (nothing is held back).
pub fn build_aging_test_set(fresh: &Dataset, cfg: &AgingConfig) -> Result<AgingDataset> {
    let test = AgingConfig { n: cfg.test_n, seed: test_seed(cfg.seed), valid_fraction: 0.0, ..cfg.clone() };
    build_aging_dataset(fresh, &test)
}

pub fn test_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_7e57_0000_0001
}

/// Frozen fresh model plus the trained perturbation network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgedModel {
    pub schema: String,
    #[serde(with = "crate::model::serde_params")]
    pub fresh: CtrnnParams,
    pub net: GruPerturbNet,
    pub aging: AgingConfig,
    pub grid_steps: usize,
}

impl AgedModel {
    pub fn params_for(&self, profile: &StressProfile) -> Result<CtrnnParams> {
        aged_params(&self.fresh, &self.net.forward(&self.aging.encode(profile))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: AgedModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.schema != AGED_MODEL_SCHEMA {
            return Err(Error::InvalidInput(format!("unsupported aged model schema '{}'", m.schema)));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgingEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mse: f64,
}

pub struct AgingFit {
    pub model: AgedModel,
    pub best_epoch: usize,
    pub history: Vec<AgingEpoch>,
}

/// Open-loop error of the aged model on the given items, each item using
/// the parameters produced for its own stress profile.
pub fn evaluate_aged(model: &AgedModel, ds: &AgingDataset, indices: &[usize]) -> Result<OpenLoopReport> {
    per_profile_eval(ds, indices, model.grid_steps, |p| model.params_for(p))
}

/// Same evaluation with the frozen fresh model for every profile.
pub fn evaluate_fresh(fresh: &CtrnnParams, ds: &AgingDataset, indices: &[usize], grid_steps: usize) -> Result<OpenLoopReport> {
    per_profile_eval(ds, indices, grid_steps, |_| Ok(fresh.clone()))
}

fn per_profile_eval<F>(ds: &AgingDataset, indices: &[usize], grid_steps: usize, params: F) -> Result<OpenLoopReport>
where
    F: Fn(&StressProfile) -> Result<CtrnnParams> + Sync,
{
    let parts: Vec<Result<OpenLoopReport>> = indices
        .par_iter()
        .map(|&i| evaluate_openloop(&params(&ds.items[i].profile)?, &[ds.pair(i)?], grid_steps))
        .collect();
    let p = ds.scaling.outputs.len();
    let mut out = OpenLoopReport { channel_mse: vec![0.0; p], aggregate: f64::NAN, per_trajectory: Vec::new(), used: 0, excluded: Vec::new() };
    for r in parts {
        let r = r?;
        out.excluded.extend(r.excluded);
        for (idx, ch) in r.per_trajectory {
            for (a, c) in out.channel_mse.iter_mut().zip(&ch) {
                *a += c;
            }
            out.used += 1;
            out.per_trajectory.push((idx, ch));
        }
    }
    if out.used > 0 {
        for a in &mut out.channel_mse {
            *a /= out.used as f64;
        }
        out.aggregate = out.channel_mse.iter().sum::<f64>() / p as f64;
    }
    Ok(out)
}

/// Loss and GRU gradient for one item.
fn item_grad(model: &AgedModel, ds: &AgingDataset, index: usize, times: &[f64]) -> Result<(f64, Vec<f64>)> {
    let seq = model.aging.encode(&ds.items[index].profile);
    let deltas = model.net.forward(&seq)?;
    let params = aged_params(&model.fresh, &deltas)?;
    let (loss, g) = loss_and_grad_at_times(&params, &[ds.pair(index)?], &[times.to_vec()], model.grid_steps)?;
    Ok((loss.loss, model.net.backward(&seq, &g.a_theta, &g.b, &g.mu)))
}

/// Trains only the perturbation network; the fresh parameters are never
/// touched. Keeps the weights of the best validation epoch.
pub fn fit_aging(fresh: &CtrnnParams, ds: &AgingDataset, cfg: &TrainConfig) -> Result<AgingFit> {
    cfg.validate()?;
    let d = fresh.dims();
    let net = GruPerturbNet::new(fresh, 2, GRU_HIDDEN, cfg.seed);
    let mut model = AgedModel {
        schema: AGED_MODEL_SCHEMA.into(),
        fresh: fresh.clone(),
        net,
        aging: ds.aging.clone(),
        grid_steps: cfg.grid_steps,
    };
    if ds.train.is_empty() {
        return Err(Error::InvalidInput("aging training split is empty".into()));
    }
    let valid = if ds.valid.is_empty() { ds.train.clone() } else { ds.valid.clone() };
    let horizon = ds.items[0].u.end();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut flat = model.net.to_flat();
    let mask = vec![true; flat.len()];
    let mut adam = Adam::new(flat.len());
    let v0 = evaluate_aged(&model, ds, &valid)?.aggregate;
    let mut history = vec![AgingEpoch { epoch: 0, train_loss: f64::NAN, valid_mse: v0 }];
    let mut best = (v0, 0usize, model.net.clone());
    info!("aging epoch 0: valid {v0:.4e} (n={}, l={})", d.n, d.l);
    let mut order = ds.train.clone();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32 - 1);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let times = draw_sample_times(&mut rng, chunk.len(), cfg.k, horizon);
            let results: Vec<Result<(f64, Vec<f64>)>> =
                chunk.par_iter().zip(times.par_iter()).map(|(&i, ts)| item_grad(&model, ds, i, ts)).collect();
            let mut g = vec![0.0; flat.len()];
            let (mut loss, mut used) = (0.0, 0usize);
            for (i, r) in chunk.iter().zip(results) {
                match r {
                    Ok((l, gi)) => {
                        loss += l;
                        used += 1;
                        for (a, b) in g.iter_mut().zip(&gi) {
                            *a += b;
                        }
                    }
                    Err(e) => warn!("aging epoch {epoch}: item {i} excluded: {e}"),
                }
            }
            if used == 0 {
                continue;
            }
            for v in &mut g {
                *v /= used as f64;
            }
            if adam.step(&mut flat, &g, &mask, lr, cfg) {
                model.net.set_flat(&flat)?;
                loss_sum += loss / used as f64;
                steps += 1;
            }
        }
        let valid_mse = evaluate_aged(&model, ds, &valid)?.aggregate;
        let train_loss = if steps > 0 { loss_sum / steps as f64 } else { f64::NAN };
        info!("aging epoch {epoch}: train {train_loss:.4e} valid {valid_mse:.4e}");
        history.push(AgingEpoch { epoch, train_loss, valid_mse });
        if valid_mse < best.0 {
            best = (valid_mse, epoch, model.net.clone());
        }
    }
    model.net = best.2;
    Ok(AgingFit { model, best_epoch: best.1, history })
}

/// Certificate check of the realized aged parameters over random profiles.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileCertificates {
    pub profiles: usize,
    pub satisfied: usize,
    pub worst_margin_gap: f64,
}

pub fn certify_profiles(model: &AgedModel, profiles: usize, seed: u64) -> Result<ProfileCertificates> {
    let results: Vec<Result<(bool, f64)>> = (0..profiles)
        .into_par_iter()
        .map(|k| {
            let mut rng = item_rng(seed, k);
            let profile = model.aging.draw_profile(&mut rng)?;
            let rep = certify(&model.params_for(&profile)?);
            Ok((rep.satisfied, rep.lds_margin - rep.margin_bound))
        })
        .collect();
    let mut out = ProfileCertificates { profiles, satisfied: 0, worst_margin_gap: f64::NEG_INFINITY };
    for r in results {
        let (ok, gap) = r?;
        out.satisfied += ok as usize;
        out.worst_margin_gap = out.worst_margin_gap.max(gap);
    }
    Ok(out)
}
