//! Numerical checks of the closed forms against brute-force oracles.

use std::io::Write;

use serde::Serialize;

use crate::distributions::{
    binomial_kl_bound, binomial_kl_exact, delta_f2, delta_f2_interval_end, f1, oracle, theorem1_m, GaussianParams,
};
use crate::error::{Error, Result};
use crate::numcore::Rng;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub inputs: String,
    pub expected: String,
    pub got: String,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    /// Binomial sizes for the bound-versus-exact sweep.
    pub sizes: Vec<u64>,
    pub pairs: usize,
    pub seed: u64,
    /// Shift every closed-form Theorem 1 value by this amount; a negative
    /// control for the report.
    pub perturb: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            sizes: vec![1_000, 10_000, 1_000_000],
            pairs: 1000,
            seed: 0x7e02,
            perturb: 0.0,
        }
    }
}

pub const THEOREM1_MU: [f64; 5] = [-1.0, -0.5, 0.0, 0.2, 0.4];
pub const THEOREM1_VAR: [f64; 6] = [0.05, 0.1, 0.25, 0.5, 1.0, 2.0];
pub const PROXY_M: [f64; 3] = [0.05, 0.2, 0.4];

fn check(name: &str, inputs: String, expected: String, got: String, pass: bool) -> Check {
    Check {
        name: name.into(),
        inputs,
        expected,
        got,
        pass,
    }
}

fn close(name: &str, inputs: String, expected: f64, got: f64, tol: f64) -> Check {
    let pass = (got - expected).abs() <= tol;
    check(name, inputs, format!("{expected:.9} ± {tol:e}"), format!("{got:.9}"), pass)
}

pub fn run(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();

    for mu in THEOREM1_MU {
        for var in THEOREM1_VAR {
            let t = GaussianParams::new(mu, var)?;
            let probe = oracle::argmin(|x| f1(x, t).unwrap_or(f64::INFINITY), 0.0, 1.0, 10_000, 1e-9);
            let closed = theorem1_m(t)? + opts.perturb;
            out.push(close("theorem1_argmin", format!("mu={mu} var={var}"), probe, closed, 1e-6));
        }
    }

    let mut rng = Rng::new(opts.seed);
    let draws: Vec<(f64, f64)> = (0..opts.pairs)
        .map(|_| {
            let a = 0.5 * rng.uniform();
            let b = 0.5 * rng.uniform();
            (a.max(b), a.min(b))
        })
        .filter(|&(m, m0)| m > m0 && m0 > 0.0)
        .collect();
    for &n in &opts.sizes {
        let mut held = 0;
        for &(m, m0) in &draws {
            let exact = binomial_kl_exact(n, m / n as f64, m0 / n as f64)?;
            if exact < binomial_kl_bound(m, m0)? {
                held += 1;
            }
        }
        out.push(check(
            "theorem2_bound_dominates",
            format!("n={n} pairs={}", draws.len()),
            draws.len().to_string(),
            held.to_string(),
            held == draws.len(),
        ));
    }
    out.push(close("theorem2_bound_value", "m=0.3 m0=0.1".into(), 0.193394, binomial_kl_bound(0.3, 0.1)?, 1e-5));
    out.push(close(
        "theorem2_exact_value",
        "m=0.3 m0=0.1 n=1000".into(),
        0.129604,
        binomial_kl_exact(1000, 0.3e-3, 0.1e-3)?,
        1e-5,
    ));

    let grid = 10_000;
    let mut rises = 0;
    let mut prev = f64::NEG_INFINITY;
    for i in 1..=grid {
        let v = delta_f2(0.5 * i as f64 / (grid + 1) as f64)?;
        if v > prev {
            rises += 1;
        }
        prev = v;
    }
    out.push(check(
        "delta_f2_monotone",
        format!("grid={grid} on (0, 1/2)"),
        grid.to_string(),
        rises.to_string(),
        rises == grid,
    ));
    let end = delta_f2_interval_end();
    out.push(close("delta_f2_at_interval_end", format!("m={end:.9}"), 0.021047, delta_f2(end)?, 1e-6));

    for m in PROXY_M {
        let gap = oracle::proxy_cdf_gap(m, 10_000, true);
        out.push(check(
            "proxy_cdf_gap",
            format!("m={m} n=10000 continuity-corrected"),
            "<= 0.05".into(),
            format!("{gap:.6}"),
            gap <= 0.05,
        ));
    }
    Ok(out)
}

pub fn write_csv<W: Write>(out: W, checks: &[Check]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in checks {
        w.serialize(c).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}
