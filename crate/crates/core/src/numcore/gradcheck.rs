//! Central finite-difference gradient checking in double precision.
//!
//! Any stochastic draws inside the checked function must be frozen by the
//! caller (for example with [`ReplayNoise`](super::rng::ReplayNoise)), since
//! the function is evaluated many times.

use super::graph::{Graph, Var};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Lower bound on the denominator of the relative error, so entries whose
    /// true gradient is ~0 are compared absolutely.
    pub floor: f64,
    /// Check at most this many entries per parameter tensor (chosen by a
    /// seeded shuffle); `None` checks every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-4,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub param: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    /// Set when the loss evaluated to NaN/∞ at the base point or any probe.
    pub non_finite: bool,
    pub passed: bool,
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok((g, vars, loss))
}

/// Checks the tape gradient of `f` against central differences.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, loss) = evaluate(&f, params)?;
    let base = g.scalar_value(loss)?;
    if !base.is_finite() {
        return Ok(GradCheckReport {
            params: Vec::new(),
            max_rel_error: f64::INFINITY,
            non_finite: true,
            passed: false,
        });
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    compare_gradients(f, params, &analytic, opts)
}

/// Compares supplied analytic gradients against central differences of `f`.
pub fn compare_gradients<F>(
    f: F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if analytic.len() != params.len() {
        return Err(Error::shape("grad_check", format!("{} grads for {} params", analytic.len(), params.len())));
    }
    let mut rng = Rng::new(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    let mut non_finite = false;
    let mut overall: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let mut entries: Vec<usize> = (0..p.len()).collect();
        if let Some(limit) = opts.max_entries {
            if entries.len() > limit {
                rng.shuffle(&mut entries);
                entries.truncate(limit);
                entries.sort_unstable();
            }
        }
        let mut worst = ParamCheck {
            param: pi,
            checked: entries.len(),
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &e in &entries {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + opts.step;
            let (g, _, l) = evaluate(&f, &work)?;
            let plus = g.scalar_value(l)?;
            work[pi].data_mut()[e] = orig - opts.step;
            let (g, _, l) = evaluate(&f, &work)?;
            let minus = g.scalar_value(l)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi].data()[e];
            if !numeric.is_finite() || !a.is_finite() {
                non_finite = true;
                continue;
            }
            let err = relative_error(a, numeric, opts.floor);
            if err >= worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst_entry = e;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        overall = overall.max(worst.max_rel_error);
        reports.push(worst);
    }
    Ok(GradCheckReport {
        params: reports,
        max_rel_error: overall,
        non_finite,
        passed: !non_finite && overall <= opts.tol,
    })
}
