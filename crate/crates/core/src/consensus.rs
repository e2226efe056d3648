//! Consensus between the semantic prior and the contextual mixture.
//!
//! Every patch carries three distributions over the same classes: the prior
//! `p` from the vision-language branch, the mixture posterior `q` over the
//! context features, and the consensus `z` that is kept close to both under
//! `KL(z||p) + KL(z||q)`. The joint solver alternates
//!
//! 1. `Q <- e_step(X, params)`
//! 2. `Z <- normalize(P * Q)` row-wise
//! 3. `params <- m_step(X, Z)`
//!
//! starting from parameters estimated with `P` as responsibilities. The
//! decoupled variant runs plain EM from the same start and fuses only once.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::{self, GmmConfig, GmmParams};
use crate::prior::validate_prob_rows;

/// Rows whose `p * q` mass falls below this keep their prior.
pub const DEGENERATE_ROW_MASS: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub iters: usize,
    /// Floor applied to `p` and `q` inside the logarithms of the objective.
    pub log_clamp: f64,
    /// Stop once the largest change of any `z` entry is below this; 0 never
    /// stops early.
    pub early_stop_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            iters: 10,
            log_clamp: 1e-12,
            early_stop_tol: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn with_iters(iters: usize) -> Self {
        SolverConfig {
            iters,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("iteration count must be at least 1".into()));
        }
        if !(self.log_clamp > 0.0) {
            return Err(Error::Config("log clamp must be positive".into()));
        }
        if !(self.early_stop_tol >= 0.0) {
            return Err(Error::Config("early-stop tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Objective values and step sizes recorded during a run.
///
/// `objective[0]` is evaluated with `z = p` against the first posterior;
/// `objective[l]` and `max_z_delta[l - 1]` belong to iteration `l`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub objective: Vec<f64>,
    pub max_z_delta: Vec<f64>,
    /// Rows that fell back to the prior in each iteration's fuse step.
    pub degenerate_rows: Vec<usize>,
    /// Mixture components re-seeded from global moments, per M-step
    /// (initialization first).
    pub recovered_components: Vec<Vec<usize>>,
}

impl RunTrace {
    pub fn iterations(&self) -> usize {
        self.max_z_delta.len()
    }

    /// `iteration,objective,max_z_delta` rows; the initial row has an empty
    /// delta.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,objective,max_z_delta\n");
        self.write_csv_rows(&mut out, None);
        out
    }

    /// Append rows to `out`, optionally prefixed with a batch index column.
    pub fn write_csv_rows(&self, out: &mut String, batch: Option<usize>) {
        for (l, j) in self.objective.iter().enumerate() {
            if let Some(b) = batch {
                let _ = write!(out, "{b},");
            }
            let delta = if l == 0 {
                String::new()
            } else {
                format!("{:e}", self.max_z_delta[l - 1])
            };
            let _ = writeln!(out, "{l},{j:e},{delta}");
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConsensusResult {
    pub z: Array2<f64>,
    pub params: GmmParams,
    pub trace: RunTrace,
}

/// State exposed to observers after each fuse step.
#[derive(Debug)]
pub struct IterationState<'a> {
    /// 1-based.
    pub iteration: usize,
    pub q: &'a Array2<f64>,
    pub z: &'a Array2<f64>,
    /// Parameters the posterior `q` was computed from.
    pub params: &'a GmmParams,
}

fn check_same_shape(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::Shape(format!(
            "prior is {:?} but posterior is {:?}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

/// Row-wise `normalize(p * q)`, plus the number of rows that fell back to the
/// (renormalized) prior because the product had no mass.
pub fn fuse_counted(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<(Array2<f64>, usize)> {
    check_same_shape(p, q)?;
    let mut z = Array2::<f64>::zeros(p.dim());
    let fallbacks: usize = z
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(p.axis_iter(Axis(0)).into_par_iter())
        .zip(q.axis_iter(Axis(0)).into_par_iter())
        .map(|((mut zr, pr), qr)| {
            Zip::from(&mut zr)
                .and(&pr)
                .and(&qr)
                .for_each(|z, &a, &b| *z = a * b);
            let mass = zr.sum();
            if mass < DEGENERATE_ROW_MASS || !mass.is_finite() {
                let psum = pr.sum();
                zr.zip_mut_with(&pr, |z, &a| *z = a / psum);
                1
            } else {
                zr /= mass;
                0
            }
        })
        .sum();
    Ok((z, fallbacks))
}

pub fn fuse(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<Array2<f64>> {
    fuse_counted(p, q).map(|(z, _)| z)
}

/// `sum_i KL(z_i || p_i) + KL(z_i || q_i)` with `p` and `q` floored at
/// `log_clamp` inside the logarithm and `0 log 0 = 0`.
pub fn objective(
    z: ArrayView2<f64>,
    p: ArrayView2<f64>,
    q: ArrayView2<f64>,
    log_clamp: f64,
) -> Result<f64> {
    check_same_shape(p, q)?;
    check_same_shape(z, p)?;
    let mut total = 0.0;
    for ((zr, pr), qr) in z.rows().into_iter().zip(p.rows()).zip(q.rows()) {
        for ((&zv, &pv), &qv) in zr.iter().zip(pr.iter()).zip(qr.iter()) {
            if zv > 0.0 {
                let lz = zv.ln();
                total += zv * ((lz - pv.max(log_clamp).ln()) + (lz - qv.max(log_clamp).ln()));
            }
        }
    }
    Ok(total)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn check_inputs(x: ArrayView2<f64>, p: ArrayView2<f64>, scfg: &SolverConfig) -> Result<()> {
    scfg.validate()?;
    if x.nrows() != p.nrows() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} prior rows",
            x.nrows(),
            p.nrows()
        )));
    }
    if p.ncols() == 0 {
        return Err(Error::Shape("prior has no classes".into()));
    }
    if x.nrows() == 0 {
        return Err(Error::DegenerateInput("no patches in batch".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite feature value".into()));
    }
    validate_prob_rows(p)
}

pub fn run(
    x: ArrayView2<f64>,
    p: ArrayView2<f64>,
    gcfg: &GmmConfig,
    scfg: &SolverConfig,
) -> Result<ConsensusResult> {
    run_observed(x, p, gcfg, scfg, |_| {})
}

/// Joint optimization, calling `observer` after every fuse step.
pub fn run_observed<F>(
    x: ArrayView2<f64>,
    p: ArrayView2<f64>,
    gcfg: &GmmConfig,
    scfg: &SolverConfig,
    mut observer: F,
) -> Result<ConsensusResult>
where
    F: FnMut(&IterationState<'_>),
{
    check_inputs(x, p, scfg)?;
    let eps = gcfg.reg_eps.resolve(x);
    let mut params = gmm::init_from_prior(x, p, gcfg.cov_mode, eps)?;
    let mut trace = RunTrace::default();
    trace.recovered_components.push(params.recovered_components().to_vec());

    let mut z = p.to_owned();
    for iteration in 1..=scfg.iters {
        let q = gmm::e_step(x, &params)?;
        if iteration == 1 {
            trace.objective.push(objective(p, p, q.view(), scfg.log_clamp)?);
        }
        let (z_next, fallbacks) = fuse_counted(p, q.view())?;
        let delta = max_abs_diff(&z_next, &z);
        z = z_next;
        trace.objective.push(objective(z.view(), p, q.view(), scfg.log_clamp)?);
        trace.max_z_delta.push(delta);
        trace.degenerate_rows.push(fallbacks);
        observer(&IterationState {
            iteration,
            q: &q,
            z: &z,
            params: &params,
        });

        params = gmm::m_step(x, z.view(), gcfg.cov_mode, eps)?;
        trace.recovered_components.push(params.recovered_components().to_vec());
        if scfg.early_stop_tol > 0.0 && delta < scfg.early_stop_tol {
            break;
        }
    }
    Ok(ConsensusResult { z, params, trace })
}

/// Two-stage baseline: plain EM from the prior-based start, then a single
/// fuse of the final posterior with the prior.
pub fn run_decoupled(
    x: ArrayView2<f64>,
    p: ArrayView2<f64>,
    gcfg: &GmmConfig,
    scfg: &SolverConfig,
) -> Result<ConsensusResult> {
    run_decoupled_observed(x, p, gcfg, scfg, |_| {})
}

/// Decoupled run; the observer sees each EM posterior together with the
/// consensus it would produce if fused at that point.
pub fn run_decoupled_observed<F>(
    x: ArrayView2<f64>,
    p: ArrayView2<f64>,
    gcfg: &GmmConfig,
    scfg: &SolverConfig,
    mut observer: F,
) -> Result<ConsensusResult>
where
    F: FnMut(&IterationState<'_>),
{
    check_inputs(x, p, scfg)?;
    let eps = gcfg.reg_eps.resolve(x);
    let mut params = gmm::init_from_prior(x, p, gcfg.cov_mode, eps)?;
    let mut trace = RunTrace::default();
    trace.recovered_components.push(params.recovered_components().to_vec());

    let mut z = p.to_owned();
    for iteration in 1..=scfg.iters {
        let q = gmm::e_step(x, &params)?;
        if iteration == 1 {
            trace.objective.push(objective(p, p, q.view(), scfg.log_clamp)?);
        }
        // stage two only ever uses the last of these
        let (z_next, fallbacks) = fuse_counted(p, q.view())?;
        let delta = max_abs_diff(&z_next, &z);
        z = z_next;
        trace.objective.push(objective(z.view(), p, q.view(), scfg.log_clamp)?);
        trace.max_z_delta.push(delta);
        trace.degenerate_rows.push(fallbacks);
        observer(&IterationState {
            iteration,
            q: &q,
            z: &z,
            params: &params,
        });

        params = gmm::m_step(x, q.view(), gcfg.cov_mode, eps)?;
        trace.recovered_components.push(params.recovered_components().to_vec());
        if scfg.early_stop_tol > 0.0 && delta < scfg.early_stop_tol {
            break;
        }
    }
    Ok(ConsensusResult { z, params, trace })
}
