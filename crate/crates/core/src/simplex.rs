//! Row-wise helpers for N x C probability matrices.

use ndarray::{Array2, ArrayView1, ArrayViewMut1, Axis};
use rayon::prelude::*;

/// Overwrite `row` (holding logits) with `softmax(row)`, subtracting the row
/// maximum first.
pub fn softmax_in_place(mut row: ArrayViewMut1<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    logits
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .for_each(softmax_in_place);
    logits
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.axis_iter(Axis(0)).map(argmax).collect()
}

pub fn uniform(rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_elem((rows, cols), 1.0 / cols as f64)
}

pub fn one_hot(labels: &[usize], cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((labels.len(), cols));
    for (i, &k) in labels.iter().enumerate() {
        m[[i, k]] = 1.0;
    }
    m
}
