//! Seeded synthetic scenes and reference implementations for testing.
//!
//! The random stream is SplitMix64 evaluated at `seed + counter * GAMMA`, so
//! any language can regenerate identical fixtures. Gaussian draws use the
//! Box-Muller transform on two consecutive uniforms.
//!
//! The oracles here deliberately avoid the engine's numerical path: densities
//! use an explicit inverse and LU determinant from `nalgebra` instead of a
//! Cholesky factor, and EM is a plain loop over rows and components.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::simplex;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator: the `n`-th output is `mix64(seed + (n + 1) * GAMMA)`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed, counter: 0 }
    }

    /// Independent stream for a named purpose.
    pub fn stream(seed: u64, stream: u64) -> Self {
        CounterRng::new(mix64(seed ^ mix64(stream.wrapping_add(GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (multiply-shift; bias is below 2^-32 for
    /// the sizes used here).
    pub fn below(&mut self, n: usize) -> usize {
        (((self.next_u64() >> 32) * n as u64) >> 32) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub clusters: usize,
    pub dim: usize,
    pub n_per_cluster: usize,
    /// Minimum distance between any two cluster centers.
    pub center_spread: f64,
    /// Isotropic variance of every cluster.
    pub cluster_cov: f64,
    /// Fraction of rows whose prior is replaced by the uniform distribution.
    pub prior_noise: f64,
    /// Fraction of rows whose one-hot prior points at a wrong class.
    pub prior_flip: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            clusters: 4,
            dim: 8,
            n_per_cluster: 500,
            center_spread: 6.0,
            cluster_cov: 1.0,
            prior_noise: 0.0,
            prior_flip: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.dim == 0 || self.n_per_cluster == 0 {
            return Err(Error::Config("clusters, dim and n_per_cluster must be >= 1".into()));
        }
        for (name, v) in [("prior_noise", self.prior_noise), ("prior_flip", self.prior_flip)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.center_spread >= 0.0) || !(self.cluster_cov >= 0.0) {
            return Err(Error::Config("spread and covariance scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub x: Array2<f64>,
    /// Corrupted prior.
    pub p: Array2<f64>,
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
}

/// Centers at pairwise distance at least `spread`: scaled simplex vertices
/// when `k <= d`, otherwise points of a cubic lattice.
fn cluster_centers(k: usize, d: usize, spread: f64) -> Array2<f64> {
    let mut centers = Array2::zeros((k, d));
    if k <= d {
        let side = spread / std::f64::consts::SQRT_2;
        for c in 0..k {
            centers[[c, c]] = side;
        }
    } else {
        let mut base: usize = 2;
        while base.checked_pow(d as u32).is_some_and(|cap| cap < k) {
            base += 1;
        }
        for c in 0..k {
            let mut rest = c;
            for j in 0..d {
                centers[[c, j]] = (rest % base) as f64 * spread;
                rest /= base;
            }
        }
    }
    centers
}

pub fn generate(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let (k, d) = (spec.clusters, spec.dim);
    let n = k * spec.n_per_cluster;
    let centers = cluster_centers(k, d, spec.center_spread);

    let mut point_rng = CounterRng::stream(spec.seed, 1);
    let sd = spec.cluster_cov.sqrt();
    let mut x = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        for _ in 0..spec.n_per_cluster {
            let i = labels.len();
            for j in 0..d {
                x[[i, j]] = centers[[c, j]] + sd * point_rng.normal();
            }
            labels.push(c);
        }
    }

    // interleave clusters so that any contiguous slice mixes classes
    let mut order: Vec<usize> = (0..n).collect();
    CounterRng::stream(spec.seed, 2).shuffle(&mut order);
    let x = Array2::from_shape_fn((n, d), |(i, j)| x[[order[i], j]]);
    let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();

    let mut p = simplex::one_hot(&labels, k);
    let mut rows: Vec<usize> = (0..n).collect();
    let mut corrupt_rng = CounterRng::stream(spec.seed, 3);
    corrupt_rng.shuffle(&mut rows);
    let n_noise = ((spec.prior_noise * n as f64).round() as usize).min(n);
    let n_flip = ((spec.prior_flip * n as f64).round() as usize).min(n - n_noise);
    for &i in &rows[..n_noise] {
        p.row_mut(i).fill(1.0 / k as f64);
    }
    if k > 1 {
        for &i in &rows[n_noise..n_noise + n_flip] {
            let wrong = (labels[i] + 1 + corrupt_rng.below(k - 1)) % k;
            p.row_mut(i).fill(0.0);
            p[[i, wrong]] = 1.0;
        }
    }

    Ok(SynthScene {
        x,
        p,
        labels,
        centers,
    })
}

// ---------------------------------------------------------------------------
// Oracles

/// Mixture parameters in the oracle's own representation.
#[derive(Debug, Clone)]
pub struct OracleParams {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

fn rows_of(x: &Array2<f64>) -> Vec<DVector<f64>> {
    x.rows()
        .into_iter()
        .map(|r| DVector::from_iterator(r.len(), r.iter().copied()))
        .collect()
}

/// Weighted sample moments with `eps` added to each covariance diagonal.
pub fn oracle_moments(x: &Array2<f64>, weights: &Array2<f64>, eps: f64) -> OracleParams {
    let pts = rows_of(x);
    let d = x.ncols();
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for k in 0..weights.ncols() {
        let mut total = 0.0;
        let mut mean = DVector::<f64>::zeros(d);
        for (i, pt) in pts.iter().enumerate() {
            total += weights[[i, k]];
            mean += pt * weights[[i, k]];
        }
        mean /= total;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for (i, pt) in pts.iter().enumerate() {
            let diff = pt - &mean;
            cov += (&diff * diff.transpose()) * weights[[i, k]];
        }
        cov /= total;
        for j in 0..d {
            cov[(j, j)] += eps;
        }
        means.push(mean);
        covs.push(cov);
    }
    OracleParams { means, covs }
}

/// `log N(x | mean, cov)` through an explicit inverse and determinant.
pub fn oracle_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let d = x.len() as f64;
    let inv = cov
        .clone()
        .try_inverse()
        .ok_or(Error::SingularCovariance { component: 0 })?;
    let det = cov.determinant();
    if !(det > 0.0) {
        return Err(Error::SingularCovariance { component: 0 });
    }
    let diff = x - mean;
    let maha = (diff.transpose() * inv * &diff)[(0, 0)];
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + det.ln() + maha))
}

fn oracle_posteriors(pts: &[DVector<f64>], params: &OracleParams) -> Result<Array2<f64>> {
    let k = params.means.len();
    let mut inverses = Vec::with_capacity(k);
    let mut log_norms = Vec::with_capacity(k);
    let d = pts.first().map_or(0, |p| p.len()) as f64;
    for (c, cov) in params.covs.iter().enumerate() {
        let inv = cov
            .clone()
            .try_inverse()
            .ok_or(Error::SingularCovariance { component: c })?;
        let det = cov.determinant();
        if !(det > 0.0) {
            return Err(Error::SingularCovariance { component: c });
        }
        inverses.push(inv);
        log_norms.push(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + det.ln()));
    }
    let mut out = Array2::<f64>::zeros((pts.len(), k));
    for (i, pt) in pts.iter().enumerate() {
        let logs: Vec<f64> = (0..k)
            .map(|c| {
                let diff = pt - &params.means[c];
                log_norms[c] - 0.5 * (diff.transpose() * &inverses[c] * &diff)[(0, 0)]
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logs.iter().map(|l| (l - top).exp()).sum();
        for c in 0..k {
            out[[i, c]] = (logs[c] - top).exp() / total;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct OracleEm {
    /// Posterior of each iteration, computed before that iteration's M-step.
    pub posteriors: Vec<Array2<f64>>,
    pub params: OracleParams,
}

/// Textbook EM with uniform, fixed mixture weights.
pub fn oracle_em(x: &Array2<f64>, init: OracleParams, iters: usize, eps: f64) -> Result<OracleEm> {
    let pts = rows_of(x);
    let mut params = init;
    let mut posteriors = Vec::with_capacity(iters);
    for _ in 0..iters {
        let q = oracle_posteriors(&pts, &params)?;
        params = oracle_moments(x, &q, eps);
        posteriors.push(q);
    }
    Ok(OracleEm { posteriors, params })
}

/// `KL(z||p) + KL(z||q)` for one row, infinite when `z` puts mass where `p`
/// or `q` has none.
pub fn kl_pair(z: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for ((&zv, &pv), &qv) in z.iter().zip(p).zip(q) {
        if zv > 0.0 {
            total += zv * ((zv / pv).ln() + (zv / qv).ln());
        }
    }
    total
}

/// Brute-force minimizer of `KL(z||p) + KL(z||q)` over a simplex grid with
/// `grid_steps` divisions per axis (`C <= 3`).
pub fn oracle_argmin_z(p: &[f64], q: &[f64], grid_steps: usize) -> Result<Vec<f64>> {
    let c = p.len();
    if q.len() != c {
        return Err(Error::Shape("p and q differ in length".into()));
    }
    if !(1..=3).contains(&c) || grid_steps == 0 || grid_steps > 2000 {
        return Err(Error::Config(
            "grid search supports 1..=3 classes and 1..=2000 steps".into(),
        ));
    }
    let h = grid_steps as f64;
    let mut best = (f64::INFINITY, vec![1.0; c]);
    let mut consider = |z: Vec<f64>| {
        let j = kl_pair(&z, p, q);
        if j < best.0 {
            best = (j, z);
        }
    };
    match c {
        1 => consider(vec![1.0]),
        2 => (0..=grid_steps).for_each(|i| {
            let t = i as f64 / h;
            consider(vec![t, 1.0 - t]);
        }),
        _ => {
            for i in 0..=grid_steps {
                for j in 0..=(grid_steps - i) {
                    let (a, b) = (i as f64 / h, j as f64 / h);
                    consider(vec![a, b, (1.0 - a - b).max(0.0)]);
                }
            }
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rng_known_values() {
        // SplitMix64 reference outputs for seed 0
        let mut r = CounterRng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn normal_draws_have_unit_moments() {
        let mut r = CounterRng::new(7);
        let draws: Vec<f64> = (0..20_000).map(|_| r.normal()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.03);
    }

    #[test]
    fn clean_prior_is_one_hot_truth() {
        let s = generate(&SynthSpec {
            n_per_cluster: 20,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_eq!(s.p, simplex::one_hot(&s.labels, 4));
        assert_eq!(s.x.dim(), (80, 8));
    }

    #[test]
    fn full_flip_disagrees_everywhere() {
        let s = generate(&SynthSpec {
            clusters: 2,
            dim: 2,
            n_per_cluster: 30,
            prior_flip: 1.0,
            seed: 3,
            ..SynthSpec::default()
        })
        .unwrap();
        let argmax = simplex::argmax_rows(&s.p);
        assert!(argmax.iter().zip(&s.labels).all(|(a, b)| a != b));
    }

    #[test]
    fn noise_and_flip_counts() {
        let s = generate(&SynthSpec {
            n_per_cluster: 250,
            prior_noise: 0.4,
            prior_flip: 0.1,
            seed: 11,
            ..SynthSpec::default()
        })
        .unwrap();
        let uniform_rows = s.p.rows().into_iter().filter(|r| r[0] == 0.25 && r[1] == 0.25).count();
        assert_eq!(uniform_rows, 400);
        let flipped = s
            .p
            .rows()
            .into_iter()
            .zip(&s.labels)
            .filter(|(r, &l)| r.iter().any(|&v| v == 1.0) && r[l] != 1.0)
            .count();
        assert_eq!(flipped, 100);
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SynthSpec {
            prior_noise: 0.3,
            prior_flip: 0.2,
            seed: 99,
            n_per_cluster: 50,
            ..SynthSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.x.iter().zip(b.x.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        let c = generate(&SynthSpec { seed: 100, ..spec }).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn centers_respect_spread() {
        for (k, d) in [(4, 8), (4, 2), (9, 2), (5, 1)] {
            let c = cluster_centers(k, d, 6.0);
            for a in 0..k {
                for b in (a + 1)..k {
                    let dist = (&c.row(a) - &c.row(b)).mapv(|v| v * v).sum().sqrt();
                    assert!(dist >= 6.0 - 1e-12, "k={k} d={d} dist={dist}");
                }
            }
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SynthSpec { prior_noise: 1.5, ..SynthSpec::default() }).is_err());
        assert!(generate(&SynthSpec { clusters: 0, ..SynthSpec::default() }).is_err());
    }

    #[test]
    fn oracle_single_component() {
        let x = Array2::from_shape_vec((4, 2), vec![0.0, 1.0, 2.0, 0.0, 1.0, 1.0, 3.0, 2.0]).unwrap();
        let w = simplex::uniform(4, 1);
        let init = oracle_moments(&x, &w, 1e-6);
        let em = oracle_em(&x, init, 3, 1e-6).unwrap();
        assert!(em.posteriors.iter().all(|q| q.iter().all(|&v| v == 1.0)));
        assert_abs_diff_eq!(em.params.means[0][0], 1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(em.params.means[0][1], 1.0, epsilon = 1e-14);
        // population variance of {0, 2, 1, 3}
        assert_abs_diff_eq!(em.params.covs[0][(0, 0)], 1.25 + 1e-6, epsilon = 1e-14);
    }

    #[test]
    fn oracle_identical_components() {
        let x = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 5.0]).unwrap();
        let init = oracle_moments(&x, &simplex::uniform(3, 2), 1e-6);
        let em = oracle_em(&x, init, 2, 1e-6).unwrap();
        for q in &em.posteriors {
            assert!(q.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn oracle_density_standard_normal() {
        let x = DVector::from_vec(vec![1.0]);
        let ld = oracle_log_density(&x, &DVector::zeros(1), &DMatrix::identity(1, 1)).unwrap();
        assert_abs_diff_eq!(ld, -1.418_938_533_204_672_7, epsilon = 1e-12);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(oracle_log_density(&DVector::zeros(2), &DVector::zeros(2), &singular).is_err());
    }

    #[test]
    fn argmin_examples() {
        let z = oracle_argmin_z(&[0.3, 0.7], &[0.3, 0.7], 1000).unwrap();
        assert_abs_diff_eq!(z[0], 0.3, epsilon = 1e-3);

        let z = oracle_argmin_z(&[0.8, 0.2], &[0.2, 0.8], 1000).unwrap();
        assert_abs_diff_eq!(z[0], 0.5, epsilon = 1e-3);

        // normalized geometric mean, not the product rule
        let z = oracle_argmin_z(&[0.9, 0.1], &[0.5, 0.5], 2000).unwrap();
        let g = [(0.45f64).sqrt(), (0.05f64).sqrt()];
        assert_abs_diff_eq!(z[0], g[0] / (g[0] + g[1]), epsilon = 1e-3);
        assert_abs_diff_eq!(z[0], 0.75, epsilon = 1e-3);

        let z = oracle_argmin_z(&[0.2, 0.3, 0.5], &[0.6, 0.2, 0.2], 600).unwrap();
        let g: Vec<f64> = [0.12f64, 0.06, 0.1].iter().map(|v| v.sqrt()).collect();
        let s: f64 = g.iter().sum();
        for k in 0..3 {
            assert_abs_diff_eq!(z[k], g[k] / s, epsilon = 2e-3);
        }
        assert!(oracle_argmin_z(&[0.25; 4], &[0.25; 4], 10).is_err());
    }
}
