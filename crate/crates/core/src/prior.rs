//! Semantic prior from patch tokens and text prototypes.
//!
//! Cosine similarity between every patch and every prototype, one score per
//! class after pooling the class's synonym prototypes, then a tempered
//! softmax. Priors produced by any other open-vocabulary model can be used
//! instead; they only need to pass [`validate_prob_rows`].

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::simplex;

/// Tolerance on externally supplied prior row sums.
pub const ROW_SUM_TOL: f64 = 1e-5;

/// Text prototype vectors and the class owning each row.
#[derive(Debug, Clone)]
pub struct TextPrototypes {
    vectors: Array2<f64>,
    owner: Vec<usize>,
    num_classes: usize,
}

impl TextPrototypes {
    pub fn new(vectors: Array2<f64>, owner: Vec<usize>, num_classes: usize) -> Result<Self> {
        if owner.len() != vectors.nrows() {
            return Err(Error::Shape(format!(
                "{} prototype rows but {} owner entries",
                vectors.nrows(),
                owner.len()
            )));
        }
        for (j, row) in vectors.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::DegenerateInput(format!("prototype {j} is not finite")));
            }
            if row.dot(&row) <= 0.0 {
                return Err(Error::DegenerateInput(format!("prototype {j} has zero norm")));
            }
        }
        let mut owned = vec![false; num_classes];
        for &k in &owner {
            if k >= num_classes {
                return Err(Error::Config(format!(
                    "prototype owner {k} out of range for {num_classes} classes"
                )));
            }
            owned[k] = true;
        }
        if let Some(k) = owned.iter().position(|o| !o) {
            return Err(Error::Config(format!("class {k} owns no prototype")));
        }
        Ok(TextPrototypes {
            vectors,
            owner,
            num_classes,
        })
    }

    /// One prototype per class, in order.
    pub fn one_per_class(vectors: Array2<f64>) -> Result<Self> {
        let c = vectors.nrows();
        Self::new(vectors, (0..c).collect(), c)
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn owner(&self) -> &[usize] {
        &self.owner
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// How a class's synonym scores are pooled into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SynonymMode {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub tau: f64,
    pub synonym_mode: SynonymMode,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            tau: 0.01,
            synonym_mode: SynonymMode::Max,
        }
    }
}

/// `N x C'` cosine similarities between feature rows and prototype rows.
pub fn cosine_scores(v: ArrayView2<f64>, t: &TextPrototypes) -> Result<Array2<f64>> {
    if v.ncols() != t.dim() {
        return Err(Error::Shape(format!(
            "features have dimension {} but prototypes have {}",
            v.ncols(),
            t.dim()
        )));
    }
    let mut unit_t = t.vectors.clone();
    for mut row in unit_t.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    let mut out = Array2::<f64>::zeros((v.nrows(), t.vectors.nrows()));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(v.axis_iter(Axis(0)).into_par_iter())
        .enumerate()
        .try_for_each(|(i, (mut out_row, row))| {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::DegenerateInput(format!("feature row {i} is not finite")));
            }
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateInput(format!("feature row {i} has zero norm")));
            }
            for (o, proto) in out_row.iter_mut().zip(unit_t.rows()) {
                *o = (row.dot(&proto) / norm).clamp(-1.0, 1.0);
            }
            Ok(())
        })?;
    Ok(out)
}

/// Pool `N x C'` prototype scores into `N x C` class scores.
pub fn aggregate_scores(scores: ArrayView2<f64>, t: &TextPrototypes, mode: SynonymMode) -> Array2<f64> {
    let n = scores.nrows();
    let c = t.num_classes;
    let mut out = match mode {
        SynonymMode::Max => Array2::from_elem((n, c), f64::NEG_INFINITY),
        SynonymMode::Mean => Array2::zeros((n, c)),
    };
    let mut counts = vec![0usize; c];
    for &k in &t.owner {
        counts[k] += 1;
    }
    for (j, &k) in t.owner.iter().enumerate() {
        let col = scores.column(j);
        let mut dst = out.column_mut(k);
        match mode {
            SynonymMode::Max => dst.zip_mut_with(&col, |a, &b| *a = a.max(b)),
            SynonymMode::Mean => dst.zip_mut_with(&col, |a, &b| *a += b),
        }
    }
    if mode == SynonymMode::Mean {
        for (k, mut col) in out.columns_mut().into_iter().enumerate() {
            col /= counts[k] as f64;
        }
    }
    out
}

/// Row-wise `softmax(scores / tau)`.
pub fn tempered_softmax(scores: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(simplex::softmax_rows(scores.mapv(|s| s / tau)))
}

/// Per-patch class distribution from patch tokens and text prototypes.
pub fn encode_prior(v: ArrayView2<f64>, t: &TextPrototypes, cfg: &PriorConfig) -> Result<Array2<f64>> {
    let scores = cosine_scores(v, t)?;
    let class_scores = aggregate_scores(scores.view(), t, cfg.synonym_mode);
    tempered_softmax(class_scores.view(), cfg.tau)
}

/// Check that every row is a probability vector.
pub fn validate_prob_rows(p: ArrayView2<f64>) -> Result<()> {
    for (i, row) in p.rows().into_iter().enumerate() {
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::Simplex {
                row: i,
                reason: format!("non-finite entry {v}"),
            });
        }
        if let Some(v) = row.iter().find(|&&v| v < 0.0) {
            return Err(Error::Simplex {
                row: i,
                reason: format!("negative entry {v}"),
            });
        }
        let sum = row.sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Simplex {
                row: i,
                reason: format!("entries sum to {sum}"),
            });
        }
    }
    Ok(())
}
