//! CTRNN dynamics `ẋ = −x/τ + W σ(Ax + Bu + μ) + ν`, the affine read-out
//! `y = Hx + b`, and the scaling of `A_θ` that makes the realized network
//! Lyapunov diagonally stable for any parameter value.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sym_eigen, DiagPos, Matrix};

pub const PARAMS_SCHEMA: &str = "iss-node-params-v1";

/// Default minimum dissipation margin used by the ISS construction.
pub const DEFAULT_DELTA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    Tanh,
}

impl Nonlinearity {
    #[inline]
    pub fn eval(self, w: f64) -> f64 {
        match self {
            Nonlinearity::Relu => w.max(0.0),
            Nonlinearity::Tanh => w.tanh(),
        }
    }

    /// Derivative; the ReLU subgradient at exactly zero is taken as 0.
    #[inline]
    pub fn slope(self, w: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if w > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Tanh => {
                let t = w.tanh();
                1.0 - t * t
            }
        }
    }

    /// `∫₀ˢ σ(r) dr`
    pub fn integral(self, s: f64) -> f64 {
        match self {
            Nonlinearity::Relu => 0.5 * s.max(0.0).powi(2),
            // log cosh(s), written to avoid overflow for large |s|
            Nonlinearity::Tanh => {
                let a = s.abs();
                a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
            }
        }
    }
}

pub fn sigma(w: &[f64], kind: Nonlinearity) -> Vec<f64> {
    w.iter().map(|&v| kind.eval(v)).collect()
}

pub fn sigma_slope(w: &[f64], kind: Nonlinearity) -> Vec<f64> {
    w.iter().map(|&v| kind.slope(v)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// state
    pub n: usize,
    /// hidden units
    pub l: usize,
    /// inputs
    pub m: usize,
    /// outputs
    pub p: usize,
}

/// Learnable parameters of a single-hidden-layer CTRNN.
///
/// `a_theta` is the unconstrained matrix; the matrix used in the dynamics is
/// [`CtrnnParams::effective_a`].
#[derive(Clone, Debug, PartialEq)]
pub struct CtrnnParams {
    pub nonlinearity: Nonlinearity,
    pub log_tau: f64,
    /// n × ℓ
    pub w: Matrix,
    /// ℓ × n
    pub a_theta: Matrix,
    /// ℓ × m
    pub b: Matrix,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    /// p × n
    pub h: Matrix,
    pub out_bias: Vec<f64>,
    pub omega: DiagPos,
    pub omega_learned: bool,
    pub delta: f64,
    /// Route `a_theta` through the ISS scaling. Off for the unconstrained baseline.
    pub constrained: bool,
}

/// Intermediate quantities of the `ρ` computation, kept for differentiation.
#[derive(Clone, Debug)]
pub struct RhoParts {
    pub rho: f64,
    /// `(τ/2)·λ_max − 1 + δ`, before the ReLU.
    pub pre_relu: f64,
    pub lambda_max: f64,
    /// Unit eigenvector of `λ_max`.
    pub eigvec: Vec<f64>,
    /// `Ω^½ A_θ W Ω^{−½}`
    pub scaled: Matrix,
}

impl CtrnnParams {
    pub fn zeros(dims: Dims, nonlinearity: Nonlinearity) -> Self {
        let Dims { n, l, m, p } = dims;
        Self {
            nonlinearity,
            log_tau: 0.0,
            w: Matrix::zeros(n, l),
            a_theta: Matrix::zeros(l, n),
            b: Matrix::zeros(l, m),
            mu: vec![0.0; l],
            nu: vec![0.0; n],
            h: Matrix::zeros(p, n),
            out_bias: vec![0.0; p],
            omega: DiagPos::identity(l),
            omega_learned: true,
            delta: DEFAULT_DELTA,
            constrained: true,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims { n: self.w.rows(), l: self.w.cols(), m: self.b.cols(), p: self.h.rows() }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        let shape_ok = self.a_theta.shape() == (d.l, d.n)
            && self.b.rows() == d.l
            && self.mu.len() == d.l
            && self.nu.len() == d.n
            && self.h.cols() == d.n
            && self.out_bias.len() == d.p
            && self.omega.dim() == d.l;
        if !shape_ok {
            return Err(Error::DimensionMismatch(format!("inconsistent parameter shapes for {d:?}")));
        }
        if d.l < d.n {
            return Err(Error::InvalidInput(format!("hidden dim {} must be >= state dim {}", d.l, d.n)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidInput("delta must be positive".into()));
        }
        let finite = self.log_tau.is_finite()
            && self.w.is_finite()
            && self.a_theta.is_finite()
            && self.b.is_finite()
            && self.h.is_finite()
            && self.mu.iter().chain(&self.nu).chain(&self.out_bias).chain(&self.omega.log_values).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite parameter entry".into()));
        }
        Ok(())
    }

    pub fn rho_parts(&self) -> Result<RhoParts> {
        let d = self.dims();
        let tau = self.tau();
        let sq = self.omega.sqrt_values();
        let product = self.a_theta.matmul(&self.w)?;
        let mut scaled = Matrix::zeros(d.l, d.l);
        for i in 0..d.l {
            for j in 0..d.l {
                scaled[(i, j)] = sq[i] * product[(i, j)] / sq[j];
            }
        }
        let sym = scaled.add(&scaled.transpose())?;
        let eig = sym_eigen(&sym)?;
        let lambda_max = eig.max();
        let pre_relu = 0.5 * tau * lambda_max - 1.0 + self.delta;
        Ok(RhoParts { rho: pre_relu.max(0.0), pre_relu, lambda_max, eigvec: eig.max_vector(), scaled })
    }

    /// Scaling factor `ρ ≥ 0` applied to `A_θ`.
    pub fn rho(&self) -> Result<f64> {
        Ok(self.rho_parts()?.rho)
    }

    /// The `A` used by the dynamics: `A_θ/(ρ+1)` when constrained, else `A_θ`.
    pub fn effective_a(&self) -> Result<Matrix> {
        if !self.constrained {
            return Ok(self.a_theta.clone());
        }
        Ok(self.a_theta.scale(1.0 / (self.rho()? + 1.0)))
    }

    /// Freezes the parameters into an evaluable network.
    pub fn realize(&self) -> Result<Ctrnn> {
        self.validate()?;
        let (a, rho) = if self.constrained {
            let rho = self.rho()?;
            (self.a_theta.scale(1.0 / (rho + 1.0)), rho)
        } else {
            (self.a_theta.clone(), 0.0)
        };
        Ok(Ctrnn {
            kind: self.nonlinearity,
            tau: self.tau(),
            w: self.w.clone(),
            a,
            b: self.b.clone(),
            mu: self.mu.clone(),
            nu: self.nu.clone(),
            h: self.h.clone(),
            out_bias: self.out_bias.clone(),
            rho,
            constrained: self.constrained,
        })
    }

    /// Maps a gradient with respect to the realized network back onto the
    /// learnable parameters, differentiating through `ρ` with the simple
    /// eigenvalue rule `∂λ_max/∂S = v vᵀ`.
    pub fn pullback(&self, rg: &RealizedGrad) -> Result<ParamGrad> {
        let tau = self.tau();
        let mut g = ParamGrad {
            log_tau: rg.tau * tau,
            w: rg.w.clone(),
            a_theta: rg.a.clone(),
            b: rg.b.clone(),
            mu: rg.mu.clone(),
            nu: rg.nu.clone(),
            h: rg.h.clone(),
            out_bias: rg.out_bias.clone(),
            log_omega: vec![0.0; self.omega.dim()],
        };
        if !self.constrained {
            return Ok(g);
        }
        let parts = self.rho_parts()?;
        let scale = 1.0 / (parts.rho + 1.0);
        g.a_theta = rg.a.scale(scale);
        if parts.pre_relu <= 0.0 {
            return Ok(g);
        }
        let rho_bar: f64 =
            -scale * scale * rg.a.as_slice().iter().zip(self.a_theta.as_slice()).map(|(ga, at)| ga * at).sum::<f64>();
        let lambda_bar = rho_bar * 0.5 * tau;
        g.log_tau += rho_bar * 0.5 * tau * parts.lambda_max;

        let l = self.omega.dim();
        let v = &parts.eigvec;
        let sq = self.omega.sqrt_values();
        // G_ij = ∂λ/∂(A_θ W)_ij
        let mut gp = Matrix::zeros(l, l);
        for i in 0..l {
            for j in 0..l {
                gp[(i, j)] = 2.0 * v[i] * v[j] * sq[i] / sq[j];
            }
        }
        let ga = gp.matmul(&self.w.transpose())?;
        let gw = self.a_theta.transpose().matmul(&gp)?;
        g.a_theta.axpy(lambda_bar, &ga);
        g.w.axpy(lambda_bar, &gw);

        let mv = parts.scaled.matvec(v);
        let mtv = parts.scaled.matvec_t(v);
        for k in 0..l {
            g.log_omega[k] += lambda_bar * v[k] * (mv[k] - mtv[k]);
        }
        Ok(g)
    }

    pub fn flat_len(&self) -> usize {
        flat_layout(self.dims()).last().map_or(0, |(_, r)| r.end)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        out.push(self.log_tau);
        out.extend_from_slice(self.w.as_slice());
        out.extend_from_slice(self.a_theta.as_slice());
        out.extend_from_slice(self.b.as_slice());
        out.extend_from_slice(&self.mu);
        out.extend_from_slice(&self.nu);
        out.extend_from_slice(self.h.as_slice());
        out.extend_from_slice(&self.out_bias);
        out.extend_from_slice(&self.omega.log_values);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::DimensionMismatch(format!(
                "flat vector has {} entries, expected {}",
                flat.len(),
                self.flat_len()
            )));
        }
        for (group, range) in flat_layout(self.dims()) {
            let src = &flat[range];
            match group {
                ParamGroup::LogTau => self.log_tau = src[0],
                ParamGroup::W => self.w.as_mut_slice().copy_from_slice(src),
                ParamGroup::ATheta => self.a_theta.as_mut_slice().copy_from_slice(src),
                ParamGroup::B => self.b.as_mut_slice().copy_from_slice(src),
                ParamGroup::Mu => self.mu.copy_from_slice(src),
                ParamGroup::Nu => self.nu.copy_from_slice(src),
                ParamGroup::H => self.h.as_mut_slice().copy_from_slice(src),
                ParamGroup::OutBias => self.out_bias.copy_from_slice(src),
                ParamGroup::LogOmega => self.omega.log_values.copy_from_slice(src),
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ParamsDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ParamsDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    LogTau,
    W,
    ATheta,
    B,
    Mu,
    Nu,
    H,
    OutBias,
    LogOmega,
}

/// Position of each parameter group inside the flat vector.
pub fn flat_layout(d: Dims) -> Vec<(ParamGroup, Range<usize>)> {
    let sizes = [
        (ParamGroup::LogTau, 1),
        (ParamGroup::W, d.n * d.l),
        (ParamGroup::ATheta, d.l * d.n),
        (ParamGroup::B, d.l * d.m),
        (ParamGroup::Mu, d.l),
        (ParamGroup::Nu, d.n),
        (ParamGroup::H, d.p * d.n),
        (ParamGroup::OutBias, d.p),
        (ParamGroup::LogOmega, d.l),
    ];
    let mut start = 0;
    sizes
        .into_iter()
        .map(|(g, len)| {
            let r = start..start + len;
            start += len;
            (g, r)
        })
        .collect()
}

/// Gradient with respect to the learnable parameters (same layout as the
/// flat parameter vector).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub log_tau: f64,
    pub w: Matrix,
    pub a_theta: Matrix,
    pub b: Matrix,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub h: Matrix,
    pub out_bias: Vec<f64>,
    pub log_omega: Vec<f64>,
}

impl ParamGrad {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![self.log_tau];
        out.extend_from_slice(self.w.as_slice());
        out.extend_from_slice(self.a_theta.as_slice());
        out.extend_from_slice(self.b.as_slice());
        out.extend_from_slice(&self.mu);
        out.extend_from_slice(&self.nu);
        out.extend_from_slice(self.h.as_slice());
        out.extend_from_slice(&self.out_bias);
        out.extend_from_slice(&self.log_omega);
        out
    }
}

/// Gradient with respect to the realized network quantities
/// (`τ` itself, not its log; `A` rather than `A_θ`).
#[derive(Clone, Debug, PartialEq)]
pub struct RealizedGrad {
    pub tau: f64,
    pub w: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub h: Matrix,
    pub out_bias: Vec<f64>,
}

impl RealizedGrad {
    pub fn zeros(d: Dims) -> Self {
        Self {
            tau: 0.0,
            w: Matrix::zeros(d.n, d.l),
            a: Matrix::zeros(d.l, d.n),
            b: Matrix::zeros(d.l, d.m),
            mu: vec![0.0; d.l],
            nu: vec![0.0; d.n],
            h: Matrix::zeros(d.p, d.n),
            out_bias: vec![0.0; d.p],
        }
    }

    pub fn add_assign(&mut self, other: &RealizedGrad) {
        self.tau += other.tau;
        self.w.axpy(1.0, &other.w);
        self.a.axpy(1.0, &other.a);
        self.b.axpy(1.0, &other.b);
        self.h.axpy(1.0, &other.h);
        for (a, b) in self.mu.iter_mut().zip(&other.mu) {
            *a += b;
        }
        for (a, b) in self.nu.iter_mut().zip(&other.nu) {
            *a += b;
        }
        for (a, b) in self.out_bias.iter_mut().zip(&other.out_bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tau *= s;
        for m in [&mut self.w, &mut self.a, &mut self.b, &mut self.h] {
            for v in m.as_mut_slice() {
                *v *= s;
            }
        }
        for v in self.mu.iter_mut().chain(self.nu.iter_mut()).chain(self.out_bias.iter_mut()) {
            *v *= s;
        }
    }
}

/// A parameter snapshot with the realized `A` baked in; cheap to evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct Ctrnn {
    pub kind: Nonlinearity,
    pub tau: f64,
    pub w: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub h: Matrix,
    pub out_bias: Vec<f64>,
    pub rho: f64,
    pub constrained: bool,
}

impl Ctrnn {
    pub fn dims(&self) -> Dims {
        Dims { n: self.w.rows(), l: self.w.cols(), m: self.b.cols(), p: self.h.rows() }
    }

    fn check(&self, x: &[f64], u: &[f64]) -> Result<()> {
        let d = self.dims();
        if x.len() != d.n || u.len() != d.m {
            return Err(Error::DimensionMismatch(format!(
                "state/input lengths {}/{} do not match n={} m={}",
                x.len(),
                u.len(),
                d.n,
                d.m
            )));
        }
        Ok(())
    }

    /// Hidden pre-activation `Ax + Bu + μ`.
    pub fn preactivation(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut z = self.a.matvec(x);
        let bu = self.b.matvec(u);
        for ((zi, bi), mi) in z.iter_mut().zip(bu).zip(&self.mu) {
            *zi += bi + mi;
        }
        z
    }

    /// Unchecked `f(x, u)` written into `out`.
    pub fn eval_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let s: Vec<f64> = self.preactivation(x, u).into_iter().map(|z| self.kind.eval(z)).collect();
        let ws = self.w.matvec(&s);
        let inv_tau = 1.0 / self.tau;
        for i in 0..out.len() {
            out[i] = -inv_tau * x[i] + ws[i] + self.nu[i];
        }
    }

    pub fn dynamics(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check(x, u)?;
        let mut out = vec![0.0; x.len()];
        self.eval_into(x, u, &mut out);
        Ok(out)
    }

    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.h.cols() {
            return Err(Error::DimensionMismatch(format!("state length {} vs n={}", x.len(), self.h.cols())));
        }
        Ok(self.output_unchecked(x))
    }

    pub fn output_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.h.matvec(x);
        for (yi, bi) in y.iter_mut().zip(&self.out_bias) {
            *yi += bi;
        }
        y
    }

    /// `∂f/∂x = −I/τ + W diag(σ′) A`
    pub fn jacobian_x(&self, x: &[f64], u: &[f64]) -> Matrix {
        let d = self.dims();
        let slope = sigma_slope(&self.preactivation(x, u), self.kind);
        let mut j = Matrix::zeros(d.n, d.n);
        for i in 0..d.n {
            j[(i, i)] = -1.0 / self.tau;
        }
        for k in 0..d.l {
            if slope[k] == 0.0 {
                continue;
            }
            for i in 0..d.n {
                let wik = self.w[(i, k)] * slope[k];
                if wik == 0.0 {
                    continue;
                }
                for c in 0..d.n {
                    j[(i, c)] += wik * self.a[(k, c)];
                }
            }
        }
        j
    }

    /// `∂f/∂u = W diag(σ′) B`
    pub fn jacobian_u(&self, x: &[f64], u: &[f64]) -> Matrix {
        let d = self.dims();
        let slope = sigma_slope(&self.preactivation(x, u), self.kind);
        let mut j = Matrix::zeros(d.n, d.m);
        for k in 0..d.l {
            for i in 0..d.n {
                let wik = self.w[(i, k)] * slope[k];
                for c in 0..d.m {
                    j[(i, c)] += wik * self.b[(k, c)];
                }
            }
        }
        j
    }

    /// Both state and input Jacobians.
    pub fn dynamics_jacobians(&self, x: &[f64], u: &[f64]) -> Result<(Matrix, Matrix)> {
        self.check(x, u)?;
        Ok((self.jacobian_x(x, u), self.jacobian_u(x, u)))
    }

    /// Vector–Jacobian product of `f` at `(x, u)` with cotangent `adj`.
    /// Parameter cotangents are accumulated into `grad`; returns `adjᵀ ∂f/∂x`.
    pub fn vjp(&self, x: &[f64], u: &[f64], adj: &[f64], grad: &mut RealizedGrad) -> Vec<f64> {
        let z = self.preactivation(x, u);
        let s: Vec<f64> = z.iter().map(|&v| self.kind.eval(v)).collect();
        let wt_adj = self.w.matvec_t(adj);
        let g: Vec<f64> = wt_adj.iter().zip(&z).map(|(wa, zi)| wa * self.kind.slope(*zi)).collect();

        grad.w.add_outer(1.0, adj, &s);
        grad.a.add_outer(1.0, &g, x);
        grad.b.add_outer(1.0, &g, u);
        let inv_tau2 = 1.0 / (self.tau * self.tau);
        for i in 0..adj.len() {
            grad.nu[i] += adj[i];
            grad.tau += adj[i] * x[i] * inv_tau2;
        }
        for (m, gi) in grad.mu.iter_mut().zip(&g) {
            *m += gi;
        }

        let mut xbar = self.a.matvec_t(&g);
        let inv_tau = 1.0 / self.tau;
        for (xb, ai) in xbar.iter_mut().zip(adj) {
            *xb -= inv_tau * ai;
        }
        xbar
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsDoc {
    schema: String,
    dims: Dims,
    nonlinearity: Nonlinearity,
    log_tau: f64,
    #[serde(rename = "W")]
    w: Vec<f64>,
    #[serde(rename = "A_theta")]
    a_theta: Vec<f64>,
    #[serde(rename = "B")]
    b: Vec<f64>,
    mu: Vec<f64>,
    nu: Vec<f64>,
    #[serde(rename = "H")]
    h: Vec<f64>,
    #[serde(rename = "b")]
    out_bias: Vec<f64>,
    log_omega: Vec<f64>,
    omega_learned: bool,
    delta: f64,
    constrained: bool,
}

impl From<&CtrnnParams> for ParamsDoc {
    fn from(p: &CtrnnParams) -> Self {
        Self {
            schema: PARAMS_SCHEMA.to_string(),
            dims: p.dims(),
            nonlinearity: p.nonlinearity,
            log_tau: p.log_tau,
            w: p.w.as_slice().to_vec(),
            a_theta: p.a_theta.as_slice().to_vec(),
            b: p.b.as_slice().to_vec(),
            mu: p.mu.clone(),
            nu: p.nu.clone(),
            h: p.h.as_slice().to_vec(),
            out_bias: p.out_bias.clone(),
            log_omega: p.omega.log_values.clone(),
            omega_learned: p.omega_learned,
            delta: p.delta,
            constrained: p.constrained,
        }
    }
}

impl TryFrom<ParamsDoc> for CtrnnParams {
    type Error = Error;

    fn try_from(doc: ParamsDoc) -> Result<Self> {
        if doc.schema != PARAMS_SCHEMA {
            return Err(Error::InvalidInput(format!("unsupported params schema {:?}", doc.schema)));
        }
        let Dims { n, l, m, p } = doc.dims;
        let params = CtrnnParams {
            nonlinearity: doc.nonlinearity,
            log_tau: doc.log_tau,
            w: Matrix::from_vec(n, l, doc.w)?,
            a_theta: Matrix::from_vec(l, n, doc.a_theta)?,
            b: Matrix::from_vec(l, m, doc.b)?,
            mu: doc.mu,
            nu: doc.nu,
            h: Matrix::from_vec(p, n, doc.h)?,
            out_bias: doc.out_bias,
            omega: DiagPos { log_values: doc.log_omega },
            omega_learned: doc.omega_learned,
            delta: doc.delta,
            constrained: doc.constrained,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Serde adapter so parameter sets can be embedded in larger documents.
pub mod serde_params {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &CtrnnParams, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsDoc::from(p).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<CtrnnParams, D::Error> {
        let doc = ParamsDoc::deserialize(d)?;
        CtrnnParams::try_from(doc).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::{Rng, SeedableRng};

    pub fn scalar(a_theta: f64, w: f64, tau: f64) -> CtrnnParams {
        let mut p = CtrnnParams::zeros(Dims { n: 1, l: 1, m: 1, p: 1 }, Nonlinearity::Relu);
        p.a_theta[(0, 0)] = a_theta;
        p.w[(0, 0)] = w;
        p.log_tau = tau.ln();
        p.h[(0, 0)] = 1.0;
        p
    }

    pub fn random(d: Dims, seed: u64, scale: f64) -> CtrnnParams {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = CtrnnParams::zeros(d, Nonlinearity::Relu);
        let mut flat = p.to_flat();
        for v in flat.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
        p.set_flat(&flat).unwrap();
        p
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigma_values() {
        assert_eq!(sigma(&[0.0, -1.0, 2.0], Nonlinearity::Relu), vec![0.0, 0.0, 2.0]);
        assert_eq!(sigma(&[0.0], Nonlinearity::Tanh), vec![0.0]);
        for kind in [Nonlinearity::Relu, Nonlinearity::Tanh] {
            let s = (kind.eval(1.0) - kind.eval(0.5)) / 0.5;
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn slope_convention() {
        assert_eq!(sigma_slope(&[-1.0, 1.0, 0.0], Nonlinearity::Relu), vec![0.0, 1.0, 0.0]);
        assert_eq!(Nonlinearity::Tanh.slope(0.0), 1.0);
    }

    #[test]
    fn integral_matches_quadrature() {
        for kind in [Nonlinearity::Relu, Nonlinearity::Tanh] {
            for s in [-3.0, -0.4, 0.0, 0.7, 2.5] {
                let n = 20_000;
                let h = s / n as f64;
                let quad: f64 = (0..n).map(|i| kind.eval((i as f64 + 0.5) * h) * h).sum();
                assert!(close(kind.integral(s), quad, 1e-8), "{kind:?} {s}");
            }
        }
        assert!(Nonlinearity::Tanh.integral(800.0).is_finite());
    }

    #[test]
    fn rho_scalar_cases() {
        let p = scalar(2.0, 1.0, 1.0);
        assert!(close(p.rho().unwrap(), 1.001, 1e-12));
        assert!(close(p.effective_a().unwrap()[(0, 0)], 2.0 / 2.001, 1e-15));

        let zero = random(Dims { n: 2, l: 3, m: 1, p: 1 }, 1, 1.0);
        let mut zero = zero;
        zero.a_theta = Matrix::zeros(3, 2);
        assert_eq!(zero.rho().unwrap(), 0.0);
        assert_eq!(zero.effective_a().unwrap(), Matrix::zeros(3, 2));

        assert_eq!(scalar(-1.0, 1.0, 1.0).rho().unwrap(), 0.0);
    }

    #[test]
    fn baseline_passthrough() {
        let mut p = random(Dims { n: 2, l: 4, m: 1, p: 1 }, 3, 2.0);
        p.constrained = false;
        assert_eq!(p.effective_a().unwrap(), p.a_theta);
    }

    #[test]
    fn effective_a_is_positive_multiple() {
        for seed in 0..50 {
            let p = random(Dims { n: 3, l: 5, m: 2, p: 1 }, seed, 3.0);
            let a = p.effective_a().unwrap();
            let c = a[(0, 0)] / p.a_theta[(0, 0)];
            assert!(c > 0.0 && c <= 1.0);
            for (x, y) in a.as_slice().iter().zip(p.a_theta.as_slice()) {
                assert!(close(*x, c * y, 1e-12 * y.abs().max(1.0)));
            }
        }
    }

    #[test]
    fn dynamics_examples() {
        let p = CtrnnParams::zeros(Dims { n: 2, l: 3, m: 1, p: 1 }, Nonlinearity::Relu);
        assert_eq!(p.realize().unwrap().dynamics(&[0.0, 0.0], &[0.0]).unwrap(), vec![0.0, 0.0]);

        let mut net = scalar(0.5, 1.0, 1.0).realize().unwrap();
        net.b[(0, 0)] = 1.0;
        assert!(close(net.dynamics(&[1.0], &[1.0]).unwrap()[0], 0.5, 1e-15));
        assert!(close(net.jacobian_x(&[1.0], &[1.0])[(0, 0)], -0.5, 1e-15));

        let mut p = CtrnnParams::zeros(Dims { n: 2, l: 2, m: 1, p: 1 }, Nonlinearity::Tanh);
        p.nu = vec![0.3, -0.7];
        assert_eq!(p.realize().unwrap().dynamics(&[0.0, 0.0], &[0.0]).unwrap(), vec![0.3, -0.7]);
        assert!(p.realize().unwrap().dynamics(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn output_examples() {
        let mut p = CtrnnParams::zeros(Dims { n: 2, l: 2, m: 1, p: 2 }, Nonlinearity::Relu);
        p.h = Matrix::identity(2);
        let net = p.realize().unwrap();
        assert_eq!(net.output(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);

        let mut p = CtrnnParams::zeros(Dims { n: 2, l: 2, m: 1, p: 1 }, Nonlinearity::Relu);
        p.h = Matrix::from_rows(&[&[1.0, 1.0]]);
        p.out_bias = vec![-1.0];
        let net = p.realize().unwrap();
        assert_eq!(net.output(&[2.0, 3.0]).unwrap(), vec![4.0]);
        assert_eq!(net.output(&[0.0, 0.0]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn zero_weight_jacobian() {
        let mut p = CtrnnParams::zeros(Dims { n: 3, l: 4, m: 2, p: 1 }, Nonlinearity::Tanh);
        p.log_tau = 0.5f64.ln();
        let j = p.realize().unwrap().jacobian_x(&[0.1, 0.2, 0.3], &[1.0, -1.0]);
        assert_eq!(j, Matrix::identity(3).scale(-2.0));
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let d = Dims { n: 3, l: 5, m: 2, p: 2 };
        for seed in 0..20 {
            let mut p = random(d, seed, 1.0);
            p.nonlinearity = if seed % 2 == 0 { Nonlinearity::Tanh } else { Nonlinearity::Relu };
            let net = p.realize().unwrap();
            let x = [0.3, -0.2, 0.5];
            let u = [0.4, -0.6];
            if net.preactivation(&x, &u).iter().any(|z| z.abs() < 1e-3) {
                continue;
            }
            let (jx, ju) = net.dynamics_jacobians(&x, &u).unwrap();
            let h = 1e-5;
            for c in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[c] += h;
                xm[c] -= h;
                let fp = net.dynamics(&xp, &u).unwrap();
                let fm = net.dynamics(&xm, &u).unwrap();
                for i in 0..3 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    assert!(close(fd, jx[(i, c)], 1e-6 * fd.abs().max(1.0)));
                }
            }
            for c in 0..2 {
                let mut up = u;
                let mut um = u;
                up[c] += h;
                um[c] -= h;
                let fp = net.dynamics(&x, &up).unwrap();
                let fm = net.dynamics(&x, &um).unwrap();
                for i in 0..3 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    assert!(close(fd, ju[(i, c)], 1e-6 * fd.abs().max(1.0)));
                }
            }
        }
    }

    /// Central differences of `adjᵀ f` through the full parameter vector,
    /// including the `ρ` scaling.
    #[test]
    fn pullback_matches_finite_differences() {
        let d = Dims { n: 2, l: 3, m: 1, p: 1 };
        let x = [0.4, -0.3];
        let u = [0.8];
        let adj = [0.7, -1.1];
        let mut checked = 0;
        for seed in 0..30 {
            let mut p = random(d, 100 + seed, 1.5);
            p.nonlinearity = Nonlinearity::Tanh;
            let net = p.realize().unwrap();
            let mut rg = RealizedGrad::zeros(d);
            net.vjp(&x, &u, &adj, &mut rg);
            let g = p.pullback(&rg).unwrap().to_flat();
            let parts = p.rho_parts().unwrap();
            if parts.pre_relu.abs() < 1e-4 {
                continue;
            }
            checked += 1;
            let base = p.to_flat();
            let objective = |flat: &[f64]| {
                let mut q = p.clone();
                q.set_flat(flat).unwrap();
                let f = q.realize().unwrap().dynamics(&x, &u).unwrap();
                adj[0] * f[0] + adj[1] * f[1]
            };
            for k in 0..base.len() {
                let h = 1e-6;
                let mut fp = base.clone();
                let mut fm = base.clone();
                fp[k] += h;
                fm[k] -= h;
                let fd = (objective(&fp) - objective(&fm)) / (2.0 * h);
                assert!(close(fd, g[k], 1e-6 * fd.abs().max(1.0)), "seed {seed} k {k}: fd {fd} vs {}", g[k]);
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn lipschitz_bound_holds() {
        use rand::{Rng, SeedableRng};
        let d = Dims { n: 3, l: 6, m: 2, p: 1 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for seed in 0..40 {
            let p = random(d, seed, 1.0);
            let net = p.realize().unwrap();
            let lip = 1.0 / net.tau + net.w.operator_norm().unwrap() * net.a.operator_norm().unwrap();
            let u = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let fx = net.dynamics(&x, &u).unwrap();
            let fy = net.dynamics(&y, &u).unwrap();
            let df: Vec<f64> = fx.iter().zip(&fy).map(|(a, b)| a - b).collect();
            let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            assert!(crate::numerics::norm2(&df) <= lip * crate::numerics::norm2(&dx) + 1e-12);
        }
    }

    #[test]
    fn json_round_trip() {
        let p = random(Dims { n: 2, l: 3, m: 2, p: 2 }, 5, 1.0);
        let back = CtrnnParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
        let bad = p.to_json().unwrap().replace(PARAMS_SCHEMA, "other");
        assert!(CtrnnParams::from_json(&bad).is_err());
    }
}
