//! Verilog-A emission of a learned CTRNN.
//!
//! States become internal electrical nodes whose KCL reads
//! `ts·dx/dt = −x/τ + Wσ(Ax + Bu + μ) + ν`. Port voltages are normalized and
//! output currents denormalized inline, so the module works in physical units.

use std::fmt::Write as _;

use log::warn;

use crate::data::{NormRecord, PortScaling};
use crate::error::{Error, Result};
use crate::model::{CtrnnParams, Dims, Nonlinearity};
use crate::numerics::{DiagPos, Matrix};
use crate::stability::certify;

/// Small fixed model (n=2, ℓ=3, m=p=2, active ρ) used as the reference for
/// the committed Verilog-A snapshot.
pub fn toy_model() -> CtrnnParams {
    let mut p = CtrnnParams::zeros(Dims { n: 2, l: 3, m: 2, p: 2 }, Nonlinearity::Relu);
    p.log_tau = 0.5f64.ln();
    p.w = Matrix::from_rows(&[&[1.0, -0.5, 0.25], &[0.5, 1.0, -1.0]]);
    p.a_theta = Matrix::from_rows(&[&[6.0, -2.0], &[1.0, 4.5], &[-3.0, 1.5]]);
    p.b = Matrix::from_rows(&[&[1.0, 0.0], &[-0.5, 0.25], &[0.3, -0.2]]);
    p.mu = vec![0.1, -0.2, 0.05];
    p.nu = vec![0.01, -0.02];
    p.h = Matrix::from_rows(&[&[1.0, 0.0], &[-0.3, 0.7]]);
    p.out_bias = vec![0.0, 0.1];
    p.omega = DiagPos::from_values(&[1.0, 2.0, 0.5]).expect("positive weights");
    p
}

/// Scaling that pairs with [`toy_model`] in the reference snapshot.
pub fn toy_scaling() -> PortScaling {
    let rec = |min: f64, max: f64| NormRecord { min, max, constant: false };
    PortScaling { inputs: vec![rec(-1.0, 1.0), rec(0.0, 2.0)], outputs: vec![rec(-0.5, 0.5), rec(-0.25, 0.75)], time_scale: 1e-9 }
}

/// 17 significant digits.
pub fn fmt_const(v: f64) -> String {
    format!("{v:.16e}")
}

fn valid_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '$')
}

fn normalize_expr(rec: Option<&NormRecord>, probe: &str) -> String {
    match rec {
        None => probe.to_string(),
        Some(r) if r.constant => fmt_const(0.0),
        Some(r) => format!("2.0*({probe} - ({}))/({}) - 1.0", fmt_const(r.min), fmt_const(r.max - r.min)),
    }
}

fn denormalize_expr(rec: Option<&NormRecord>, z: &str) -> String {
    match rec {
        None => z.to_string(),
        Some(r) if r.constant => format!("({})", fmt_const(r.min)),
        Some(r) => format!("({}) + 0.5*({z} + 1.0)*({})", fmt_const(r.min), fmt_const(r.max - r.min)),
    }
}

fn linear_terms(coeffs: &[f64], vars: &[String]) -> Vec<String> {
    coeffs.iter().zip(vars).map(|(c, v)| format!("({})*{v}", fmt_const(*c))).collect()
}

/// Verilog-A text for the realized model. Ports are shared (`port_k`, voltage
/// in, current out) when the model has as many inputs as outputs, and split
/// into `in_k`/`out_k` otherwise. Without `scaling` the module works directly
/// in normalized units with `ts = 1`.
pub fn emit_veriloga(params: &CtrnnParams, module_name: &str, scaling: Option<&PortScaling>) -> Result<String> {
    if !valid_identifier(module_name) {
        return Err(Error::Config(format!("'{module_name}' is not a valid Verilog-A identifier")));
    }
    let d = params.dims();
    if let Some(s) = scaling {
        if s.inputs.len() != d.m || s.outputs.len() != d.p {
            return Err(Error::DimensionMismatch(format!(
                "scaling has {}/{} channels, model has m={} p={}",
                s.inputs.len(),
                s.outputs.len(),
                d.m,
                d.p
            )));
        }
    }
    let report = certify(params);
    if !report.satisfied {
        warn!("exporting a model without a valid stability certificate (lds margin {:.3e})", report.lds_margin);
    }
    let net = params.realize()?;
    let shared = d.m == d.p;
    let (in_ports, out_ports): (Vec<String>, Vec<String>) = if shared {
        let ports: Vec<String> = (1..=d.m).map(|k| format!("port_{k}")).collect();
        (ports.clone(), ports)
    } else {
        ((1..=d.m).map(|k| format!("in_{k}")).collect(), (1..=d.p).map(|k| format!("out_{k}")).collect())
    };
    let terminals: Vec<String> = if shared { in_ports.clone() } else { in_ports.iter().chain(&out_ports).cloned().collect() };
    let states: Vec<String> = (1..=d.n).map(|j| format!("x_{j}")).collect();
    let state_v: Vec<String> = states.iter().map(|s| format!("V({s})")).collect();
    let u: Vec<String> = (1..=d.m).map(|k| format!("u_{k}")).collect();
    let s_vars: Vec<String> = (1..=d.l).map(|i| format!("s_{i}")).collect();
    let ts = scaling.map_or(1.0, |s| s.time_scale);

    let mut o = String::new();
    let w = &mut o;
    writeln!(w, "// {module_name}: CTRNN behavioral model (n={}, l={}, m={}, p={})", d.n, d.l, d.m, d.p).unwrap();
    writeln!(w, "`include \"constants.vams\"").unwrap();
    writeln!(w, "`include \"disciplines.vams\"").unwrap();
    writeln!(w).unwrap();
    writeln!(w, "module {module_name}({});", terminals.join(", ")).unwrap();
    writeln!(w, "  inout {};", terminals.join(", ")).unwrap();
    writeln!(w, "  electrical {};", terminals.join(", ")).unwrap();
    writeln!(w, "  electrical {};", states.join(", ")).unwrap();
    writeln!(w, "  parameter real ts = {};", fmt_const(ts)).unwrap();
    writeln!(w, "  real {};", u.join(", ")).unwrap();
    let z_vars: Vec<String> = (1..=d.l).map(|i| format!("z_{i}")).collect();
    writeln!(w, "  real {};", z_vars.join(", ")).unwrap();
    writeln!(w, "  real {};", s_vars.join(", ")).unwrap();
    let y_vars: Vec<String> = (1..=d.p).map(|k| format!("y_{k}")).collect();
    writeln!(w, "  real {};", y_vars.join(", ")).unwrap();
    writeln!(w).unwrap();
    writeln!(w, "  analog begin").unwrap();
    for (k, port) in in_ports.iter().enumerate() {
        let rec = scaling.map(|s| &s.inputs[k]);
        writeln!(w, "    u_{} = {};", k + 1, normalize_expr(rec, &format!("V({port})"))).unwrap();
    }
    for i in 0..d.l {
        let mut terms = linear_terms(net.a.row(i), &state_v);
        terms.extend(linear_terms(net.b.row(i), &u));
        terms.push(format!("({})", fmt_const(net.mu[i])));
        writeln!(w, "    z_{} = {};", i + 1, terms.join(" + ")).unwrap();
    }
    for i in 1..=d.l {
        let act = match net.kind {
            Nonlinearity::Relu => format!("max(z_{i}, 0.0)"),
            Nonlinearity::Tanh => format!("tanh(z_{i})"),
        };
        writeln!(w, "    s_{i} = {act};").unwrap();
    }
    for j in 0..d.n {
        writeln!(w, "    I({}) <+ ts*ddt(V({}));", states[j], states[j]).unwrap();
        let mut terms = vec![format!("V({})/({})", states[j], fmt_const(net.tau))];
        terms.extend(linear_terms(net.w.row(j), &s_vars).into_iter().map(|t| format!("-{t}")));
        terms.push(format!("-({})", fmt_const(net.nu[j])));
        writeln!(w, "    I({}) <+ {};", states[j], terms.join(" ")).unwrap();
    }
    for k in 0..d.p {
        let mut terms = linear_terms(net.h.row(k), &state_v);
        terms.push(format!("({})", fmt_const(net.out_bias[k])));
        writeln!(w, "    y_{} = {};", k + 1, terms.join(" + ")).unwrap();
    }
    for (k, port) in out_ports.iter().enumerate() {
        let rec = scaling.map(|s| &s.outputs[k]);
        writeln!(w, "    I({port}) <+ {};", denormalize_expr(rec, &format!("y_{}", k + 1))).unwrap();
    }
    writeln!(w, "  end").unwrap();
    writeln!(w, "endmodule").unwrap();
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::{random, scalar};

    fn z_matrix(text: &str, l: usize, n: usize) -> Matrix {
        let mut a = Matrix::zeros(l, n);
        for i in 0..l {
            let line = text.lines().find(|s| s.trim_start().starts_with(&format!("z_{} = ", i + 1))).unwrap();
            let rhs = line.split(" = ").nth(1).unwrap();
            for (j, term) in rhs.split(" + ").take(n).enumerate() {
                let c = term.split(")*").next().unwrap().trim_start_matches('(');
                a[(i, j)] = c.parse().unwrap();
            }
        }
        a
    }

    #[test]
    fn toy_model_has_active_rho() {
        let p = toy_model();
        p.validate().unwrap();
        assert!(p.rho().unwrap() > 0.0);
        assert!(certify(&p).satisfied);
    }

    #[test]
    fn header_and_determinism() {
        let p = scalar(0.5, 1.0, 1.0);
        let t = emit_veriloga(&p, "toy", None).unwrap();
        assert!(t.lines().any(|l| l == "module toy(port_1);"));
        assert_eq!(t, emit_veriloga(&p, "toy", None).unwrap());
        assert!(emit_veriloga(&p, "9bad", None).is_err());
        assert!(emit_veriloga(&p, "has space", None).is_err());
    }

    #[test]
    fn baked_matrix_is_effective_a() {
        let p = random(Dims { n: 3, l: 4, m: 2, p: 1 }, 5, 2.0);
        assert!(p.rho().unwrap() > 0.0);
        let t = emit_veriloga(&p, "m", None).unwrap();
        let a = z_matrix(&t, 4, 3);
        let eff = p.effective_a().unwrap();
        assert_eq!(a, eff);
        assert_ne!(a, p.a_theta);
        assert!(t.contains("module m(in_1, in_2, out_1);"));
    }

    #[test]
    fn constants_round_trip() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02e23, f64::MIN_POSITIVE, -0.0] {
            assert_eq!(fmt_const(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        let p = random(Dims { n: 2, l: 2, m: 1, p: 1 }, 8, 1.0);
        let net = p.realize().unwrap();
        let t = emit_veriloga(&p, "m", None).unwrap();
        for v in net.w.as_slice().iter().chain(net.b.as_slice()).chain(&net.mu).chain(&net.nu).chain(net.h.as_slice()) {
            assert!(t.contains(&fmt_const(*v)));
        }
    }

    #[test]
    fn scaling_is_inlined() {
        let p = random(Dims { n: 2, l: 2, m: 2, p: 2 }, 9, 1.0);
        let rec = |lo: f64, hi: f64| NormRecord { min: lo, max: hi, constant: false };
        let s = PortScaling {
            inputs: vec![rec(-1.0, 3.0), NormRecord { min: 2.0, max: 2.0, constant: true }],
            outputs: vec![rec(0.0, 1e-3), rec(-2.0, 2.0)],
            time_scale: 1e-9,
        };
        let t = emit_veriloga(&p, "m", Some(&s)).unwrap();
        assert!(t.contains(&format!("parameter real ts = {};", fmt_const(1e-9))));
        assert!(t.contains("u_1 = 2.0*(V(port_1) - (-1.0000000000000000e0))/(4.0000000000000000e0) - 1.0;"));
        assert!(t.contains("u_2 = 0.0000000000000000e0;"));
        assert!(t.contains("I(port_2) <+ (-2.0000000000000000e0) + 0.5*(y_2 + 1.0)*(4.0000000000000000e0);"));
        let bad = PortScaling { inputs: vec![], ..s };
        assert!(emit_veriloga(&p, "m", Some(&bad)).is_err());
    }
}
