//! Gaussian mixture with one component per class and fixed uniform weights.
//!
//! Parameters are always estimated from soft responsibilities: the prior
//! `P` for initialization, the consensus `Z` (or the posterior `Q` in plain
//! EM) for every later M-step. Both go through [`m_step`], so initialization
//! and re-estimation are literally the same computation.
//!
//! Work is split across components (density evaluation, moment
//! accumulation) and rows (posterior normalization). Every reduction runs
//! sequentially inside one task in a fixed order, so results are bitwise
//! identical for any thread count.

use std::f64::consts::PI;

use log::warn;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::simplex;

/// A component whose total responsibility is below this is re-seeded from the
/// global moments.
pub const EMPTY_COMPONENT_MASS: f64 = 1e-8;

/// Rows processed per block when accumulating outer products.
const ROW_BLOCK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovMode {
    #[default]
    Full,
    Diag,
}

/// Covariance regularization added to every diagonal entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegEps {
    /// Multiple of the mean per-dimension feature variance.
    Relative(f64),
    Absolute(f64),
}

impl Default for RegEps {
    fn default() -> Self {
        RegEps::Relative(1e-6)
    }
}

/// Smallest regularization ever used; keeps covariances invertible when the
/// features are constant.
const MIN_EPS: f64 = 1e-12;

impl RegEps {
    pub fn resolve(self, x: ArrayView2<f64>) -> f64 {
        let eps = match self {
            RegEps::Absolute(v) => v,
            RegEps::Relative(f) => f * mean_feature_variance(x),
        };
        if eps.is_finite() {
            eps.max(MIN_EPS)
        } else {
            MIN_EPS
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GmmConfig {
    pub cov_mode: CovMode,
    pub reg_eps: RegEps,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariances {
    /// One `d x d` matrix per component.
    Full(Vec<Array2<f64>>),
    /// `K x d` variances.
    Diag(Array2<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    means: Array2<f64>,
    covs: Covariances,
    reg_eps: f64,
    recovered: Vec<usize>,
}

impl GmmParams {
    /// Assemble parameters directly. Covariances are taken as given (any
    /// regularization must already be included).
    pub fn new(means: Array2<f64>, covs: Covariances, reg_eps: f64) -> Result<Self> {
        let (k, d) = means.dim();
        if k == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite component mean".into()));
        }
        match &covs {
            Covariances::Full(list) => {
                if list.len() != k || list.iter().any(|c| c.dim() != (d, d)) {
                    return Err(Error::Shape(format!(
                        "expected {k} covariance matrices of size {d}x{d}"
                    )));
                }
            }
            Covariances::Diag(v) => {
                if v.dim() != (k, d) {
                    return Err(Error::Shape(format!(
                        "expected {k}x{d} variances, got {:?}",
                        v.dim()
                    )));
                }
            }
        }
        Ok(GmmParams {
            means,
            covs,
            reg_eps,
            recovered: Vec::new(),
        })
    }

    pub fn num_components(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn covariances(&self) -> &Covariances {
        &self.covs
    }

    pub fn cov_mode(&self) -> CovMode {
        match self.covs {
            Covariances::Full(_) => CovMode::Full,
            Covariances::Diag(_) => CovMode::Diag,
        }
    }

    pub fn reg_eps(&self) -> f64 {
        self.reg_eps
    }

    /// Mixture weights, always `1/K`.
    pub fn weights(&self) -> Vec<f64> {
        let k = self.num_components();
        vec![1.0 / k as f64; k]
    }

    /// Components that were re-seeded from global moments in the M-step that
    /// produced these parameters.
    pub fn recovered_components(&self) -> &[usize] {
        &self.recovered
    }

    /// Covariance of component `k` as a dense matrix.
    pub fn covariance(&self, k: usize) -> Array2<f64> {
        match &self.covs {
            Covariances::Full(list) => list[k].clone(),
            Covariances::Diag(v) => Array2::from_diag(&v.row(k)),
        }
    }
}

pub fn mean_feature_variance(x: ArrayView2<f64>) -> f64 {
    let n = x.nrows();
    if n == 0 || x.ncols() == 0 {
        return 0.0;
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let mut total = 0.0;
    for row in x.rows() {
        for (v, m) in row.iter().zip(mean.iter()) {
            total += (v - m) * (v - m);
        }
    }
    total / (n * x.ncols()) as f64
}

/// Scale every row to unit Euclidean norm; zero rows are left untouched.
pub fn l2_normalize_rows(x: &mut Array2<f64>) {
    x.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut row| {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    });
}

fn check_responsibilities(x: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<()> {
    if x.nrows() != z.nrows() {
        return Err(Error::Shape(format!(
            "features have {} rows but responsibilities have {}",
            x.nrows(),
            z.nrows()
        )));
    }
    if z.ncols() == 0 {
        return Err(Error::Config("mixture needs at least one component".into()));
    }
    if x.nrows() == 0 {
        return Err(Error::DegenerateInput("no feature rows".into()));
    }
    Ok(())
}

/// Weighted mean and covariance of `x` under weights `w` (not necessarily
/// normalized). Returns `None` when the total weight is below
/// [`EMPTY_COMPONENT_MASS`].
fn weighted_moments(
    x: ArrayView2<f64>,
    w: ndarray::ArrayView1<f64>,
    mode: CovMode,
    eps: f64,
) -> Option<(Array1<f64>, CovStore)> {
    let total: f64 = w.iter().sum();
    if !(total >= EMPTY_COMPONENT_MASS) {
        return None;
    }
    let d = x.ncols();
    let mut mean = Array1::<f64>::zeros(d);
    for (row, &wi) in x.rows().into_iter().zip(w.iter()) {
        if wi != 0.0 {
            mean.scaled_add(wi, &row);
        }
    }
    mean /= total;

    let cov = match mode {
        CovMode::Full => {
            let mut acc = Array2::<f64>::zeros((d, d));
            let n = x.nrows();
            let mut start = 0;
            while start < n {
                let end = (start + ROW_BLOCK).min(n);
                let block = x.slice(s![start..end, ..]);
                let wb = w.slice(s![start..end]);
                let centered = &block - &mean;
                let mut weighted = centered.clone();
                Zip::from(weighted.rows_mut())
                    .and(&wb)
                    .for_each(|mut r, &wi| r *= wi);
                // acc += weighted^T * centered
                ndarray::linalg::general_mat_mul(1.0, &weighted.t(), &centered, 1.0, &mut acc);
                start = end;
            }
            acc /= total;
            // symmetrize away rounding asymmetry
            let mut sym = (&acc + &acc.t()) * 0.5;
            for j in 0..d {
                sym[[j, j]] += eps;
            }
            CovStore::Full(sym)
        }
        CovMode::Diag => {
            let mut var = Array1::<f64>::zeros(d);
            for (row, &wi) in x.rows().into_iter().zip(w.iter()) {
                if wi != 0.0 {
                    Zip::from(&mut var)
                        .and(&row)
                        .and(&mean)
                        .for_each(|v, &xv, &m| *v += wi * (xv - m) * (xv - m));
                }
            }
            var /= total;
            var += eps;
            CovStore::Diag(var)
        }
    };
    Some((mean, cov))
}

enum CovStore {
    Full(Array2<f64>),
    Diag(Array1<f64>),
}

/// Re-estimate means and covariances with `z` as soft responsibilities.
/// Components with (almost) no mass fall back to the global mean and
/// covariance.
pub fn m_step(x: ArrayView2<f64>, z: ArrayView2<f64>, mode: CovMode, eps: f64) -> Result<GmmParams> {
    check_responsibilities(x, z)?;
    let k = z.ncols();
    let d = x.ncols();

    let fitted: Vec<Option<(Array1<f64>, CovStore)>> = (0..k)
        .into_par_iter()
        .map(|c| weighted_moments(x, z.column(c), mode, eps))
        .collect();

    let mut recovered = Vec::new();
    let global = if fitted.iter().any(Option::is_none) {
        let ones = Array1::<f64>::ones(x.nrows());
        Some(weighted_moments(x, ones.view(), mode, eps).expect("at least one row"))
    } else {
        None
    };

    let mut means = Array2::<f64>::zeros((k, d));
    let mut full = Vec::new();
    let mut diag = Array2::<f64>::zeros((k, d));
    for (c, entry) in fitted.into_iter().enumerate() {
        let (mean, cov) = match entry {
            Some((m, cv)) => (m, cv),
            None => {
                warn!("component {c} has no responsibility mass; reset to global moments");
                recovered.push(c);
                let (gm, gc) = global.as_ref().expect("computed above");
                let gc = match gc {
                    CovStore::Full(a) => CovStore::Full(a.clone()),
                    CovStore::Diag(a) => CovStore::Diag(a.clone()),
                };
                (gm.clone(), gc)
            }
        };
        means.row_mut(c).assign(&mean);
        match cov {
            CovStore::Full(a) => full.push(a),
            CovStore::Diag(v) => diag.row_mut(c).assign(&v),
        }
    }
    let covs = match mode {
        CovMode::Full => Covariances::Full(full),
        CovMode::Diag => Covariances::Diag(diag),
    };
    if means.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput(
            "non-finite feature values produced a non-finite mean".into(),
        ));
    }
    Ok(GmmParams {
        means,
        covs,
        reg_eps: eps,
        recovered,
    })
}

/// Initial parameters with the prior `p` as responsibilities.
pub fn init_from_prior(
    x: ArrayView2<f64>,
    p: ArrayView2<f64>,
    mode: CovMode,
    eps: f64,
) -> Result<GmmParams> {
    m_step(x, p, mode, eps)
}

/// `log N(x_i | mu_k, Sigma_k)` for every row and component.
pub fn log_density(x: ArrayView2<f64>, params: &GmmParams) -> Result<Array2<f64>> {
    let d = params.dim();
    if x.ncols() != d {
        return Err(Error::Shape(format!(
            "features have dimension {} but the mixture has {d}",
            x.ncols()
        )));
    }
    let k = params.num_components();
    let base = d as f64 * (2.0 * PI).ln();

    let columns: Vec<Result<Array1<f64>>> = (0..k)
        .into_par_iter()
        .map(|c| {
            let mean = params.means.row(c);
            let mut out = Array1::<f64>::zeros(x.nrows());
            match &params.covs {
                Covariances::Full(list) => {
                    let l = linalg::cholesky(list[c].view())
                        .ok_or(Error::SingularCovariance { component: c })?;
                    let log_det = linalg::log_det_from_cholesky(l.view());
                    let l_inv_t = linalg::lower_triangular_inverse(l.view()).reversed_axes();
                    let n = x.nrows();
                    let mut start = 0;
                    while start < n {
                        let end = (start + ROW_BLOCK).min(n);
                        let centered = &x.slice(s![start..end, ..]) - &mean;
                        // rows of y are L^{-1}(x_i - mu)
                        let y = centered.dot(&l_inv_t);
                        for (o, row) in out.slice_mut(s![start..end]).iter_mut().zip(y.rows()) {
                            *o = -0.5 * (base + log_det + row.dot(&row));
                        }
                        start = end;
                    }
                }
                Covariances::Diag(vars) => {
                    let var = vars.row(c);
                    if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                        return Err(Error::SingularCovariance { component: c });
                    }
                    let log_det: f64 = var.iter().map(|v| v.ln()).sum();
                    for (o, row) in out.iter_mut().zip(x.rows()) {
                        let mut maha = 0.0;
                        for j in 0..d {
                            let diff = row[j] - mean[j];
                            maha += diff * diff / var[j];
                        }
                        *o = -0.5 * (base + log_det + maha);
                    }
                }
            }
            Ok(out)
        })
        .collect();

    let mut out = Array2::<f64>::zeros((x.nrows(), k));
    for (c, col) in columns.into_iter().enumerate() {
        out.column_mut(c).assign(&col?);
    }
    Ok(out)
}

/// Posterior responsibilities under uniform mixture weights.
pub fn e_step(x: ArrayView2<f64>, params: &GmmParams) -> Result<Array2<f64>> {
    // uniform weights cancel in the normalization
    let log_dens = log_density(x, params)?;
    if log_dens.iter().any(|v| v.is_nan()) {
        return Err(Error::DegenerateInput("non-finite feature values".into()));
    }
    Ok(simplex::softmax_rows(log_dens))
}
