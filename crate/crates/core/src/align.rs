//! Symmetric KL alignment between a fixed source Gaussian and the moving
//! target Gaussian, with analytic gradients.
//!
//! The divergence is evaluated through Cholesky factorizations; the only
//! matrix inverse ever formed is `cov^-1 = L^-T L^-1` where the gradient
//! formulas need it as a matrix. Gradients treat the source as constant and
//! flow to the target mean and covariance, and from there through the
//! streaming update back to the per-sample feature vectors of the batch
//! that moved the estimate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::stats::{GaussianStats, StreamConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AlignError {
    #[error("dimension mismatch: {p} vs {q}")]
    DimMismatch { p: usize, q: usize },
    #[error("covariance is not positive definite; regularize before aligning")]
    NotPositiveDefinite,
    #[error("batch size mismatch: gradient rows {rows} vs batch {batch}")]
    BatchMismatch { rows: usize, batch: usize },
}

/// Gradient of the alignment loss with respect to the target mean and
/// covariance. The covariance part is symmetrized.
#[derive(Clone, Debug)]
pub struct AlignmentGrad {
    pub d_mean: DVector<f64>,
    pub d_cov: DMatrix<f64>,
}

fn chol(stats: &GaussianStats) -> Result<Cholesky<f64, Dyn>, AlignError> {
    Cholesky::new(stats.cov().clone()).ok_or(AlignError::NotPositiveDefinite)
}

fn log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    let l = ch.l_dirty();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    2.0 * acc
}

/// `KL(p || q)` between Gaussians in closed form.
pub fn kl_gaussian(p: &GaussianStats, q: &GaussianStats) -> Result<f64, AlignError> {
    if p.dim() != q.dim() {
        return Err(AlignError::DimMismatch { p: p.dim(), q: q.dim() });
    }
    let d = p.dim() as f64;
    let chol_q = chol(q)?;
    let chol_p = chol(p)?;
    let trace = chol_q.solve(p.cov()).trace();
    let diff = q.mean() - p.mean();
    let quad = diff.dot(&chol_q.solve(&diff));
    Ok(0.5 * (trace + quad - d + log_det(&chol_q) - log_det(&chol_p)))
}

/// Symmetric divergence: both directions summed.
pub fn sym_kl(p: &GaussianStats, q: &GaussianStats) -> Result<f64, AlignError> {
    Ok(kl_gaussian(p, q)? + kl_gaussian(q, p)?)
}

/// Gradient of `sym_kl(source, target)` in the target's mean and covariance,
/// holding the source fixed.
///
/// With `delta = mu_s - mu_t`, `P = cov_s^-1`, `T = cov_t^-1`:
/// forward direction (source || target) contributes
///   `d_mean = -T delta`, `d_cov = 0.5 [T - T (cov_s + delta delta^T) T]`;
/// reverse direction (target || source) contributes
///   `d_mean = -P delta`... i.e. `P (mu_t - mu_s)`, `d_cov = 0.5 [P - T]`.
pub fn sym_kl_grad(
    source: &GaussianStats,
    target: &GaussianStats,
) -> Result<AlignmentGrad, AlignError> {
    if source.dim() != target.dim() {
        return Err(AlignError::DimMismatch { p: source.dim(), q: target.dim() });
    }
    let chol_t = chol(target)?;
    let chol_s = chol(source)?;
    let t_inv = chol_t.inverse();
    let s_inv = chol_s.inverse();
    let diff = target.mean() - source.mean();
    let delta = source.mean() - target.mean();

    // Forward quadratic gives T (mu_t - mu_s), reverse gives S^-1 (mu_t - mu_s).
    let d_mean = &t_inv * &diff + &s_inv * &diff;

    let mid = source.cov() + &delta * delta.transpose();
    let g_cov = 0.5 * (&t_inv - &t_inv * mid * &t_inv) + 0.5 * (&s_inv - &t_inv);
    let d_cov = 0.5 * (&g_cov + g_cov.transpose());

    Ok(AlignmentGrad { d_mean, d_cov })
}

/// Push an alignment gradient through one streaming update onto the batch
/// features that produced it.
///
/// `grad` must be evaluated at the post-update statistics, `pre` is the
/// state the update started from, and `batch` the feature vectors folded
/// in. History is constant, so row `i` is
/// `gamma * d_mean + gamma * S (x_i - mu_pre) - gamma * S delta`
/// with `S = d_cov + d_cov^T` and `delta` the mean innovation.
pub fn backprop_to_features(
    grad: &AlignmentGrad,
    batch: &[DVector<f64>],
    pre: &GaussianStats,
    cfg: &StreamConfig,
) -> Result<Vec<DVector<f64>>, AlignError> {
    let d = pre.dim();
    if grad.d_mean.len() != d || grad.d_cov.nrows() != d || grad.d_cov.ncols() != d {
        return Err(AlignError::DimMismatch { p: grad.d_mean.len(), q: d });
    }
    for x in batch {
        if x.len() != d {
            return Err(AlignError::DimMismatch { p: x.len(), q: d });
        }
    }
    let gamma = cfg.gamma;
    let mut delta = DVector::zeros(d);
    for x in batch {
        delta += x - pre.mean();
    }
    delta *= gamma;

    let s = &grad.d_cov + grad.d_cov.transpose();
    let s_delta = &s * &delta;
    let mut rows = Vec::with_capacity(batch.len());
    for x in batch {
        let centered = x - pre.mean();
        rows.push(gamma * (&grad.d_mean + &s * centered - &s_delta));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::update_streaming;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn gauss(mean: &[f64], cov_rows: &[&[f64]]) -> GaussianStats {
        let d = mean.len();
        let cov = DMatrix::from_fn(d, d, |i, j| cov_rows[i][j]);
        GaussianStats::new(DVector::from_vec(mean.to_vec()), cov).unwrap()
    }

    fn random_spd_stats(rng: &mut impl Rng, d: usize) -> GaussianStats {
        // A = B B^T + I stays comfortably positive definite.
        let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let cov = &b * b.transpose() + DMatrix::identity(d, d) * rng.random_range(0.3..1.5);
        let mean = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
        GaussianStats::new(mean, cov).unwrap()
    }

    #[test]
    fn kl_hand_cases_1d() {
        // KL(N(0,1) || N(1,1)) = 1/2.
        let p = gauss(&[0.0], &[&[1.0]]);
        let q = gauss(&[1.0], &[&[1.0]]);
        assert_abs_diff_eq!(kl_gaussian(&p, &q).unwrap(), 0.5, epsilon = 1e-9);
        // Symmetric version doubles it here.
        assert_abs_diff_eq!(sym_kl(&p, &q).unwrap(), 1.0, epsilon = 1e-9);
        // KL(N(0,2) || N(0,1)) = (2 - 1 - ln 2)/2.
        let p2 = gauss(&[0.0], &[&[2.0]]);
        let q2 = gauss(&[0.0], &[&[1.0]]);
        let expect = 0.5 * (2.0 - 1.0 - 2.0f64.ln());
        assert_abs_diff_eq!(kl_gaussian(&p2, &q2).unwrap(), expect, epsilon = 1e-9);
    }

    #[test]
    fn kl_zero_on_identical() {
        let mut rng = crate::seeds::rng_from(3);
        for d in [1usize, 2, 5] {
            let p = random_spd_stats(&mut rng, d);
            assert_abs_diff_eq!(kl_gaussian(&p, &p).unwrap(), 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(sym_kl(&p, &p).unwrap(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn kl_rejects_mismatch_and_non_spd() {
        let p = gauss(&[0.0], &[&[1.0]]);
        let q = gauss(&[0.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            kl_gaussian(&p, &q).unwrap_err(),
            AlignError::DimMismatch { .. }
        ));
        let bad = gauss(&[0.0, 0.0], &[&[1.0, 2.0], &[2.0, 1.0]]);
        assert_eq!(
            kl_gaussian(&bad, &q).unwrap_err(),
            AlignError::NotPositiveDefinite
        );
    }

    #[test]
    fn sym_kl_gradient_hand_case_1d() {
        // Source N(0,1), target N(1,1): d_mean = 1 + 1 = 2, and
        // d_cov = 0.5[1 - (1 + 1)] + 0.5[1 - 1] = -0.5.
        let s = gauss(&[0.0], &[&[1.0]]);
        let t = gauss(&[1.0], &[&[1.0]]);
        let g = sym_kl_grad(&s, &t).unwrap();
        assert_abs_diff_eq!(g.d_mean[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.d_cov[(0, 0)], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn gradient_descent_on_sym_kl_converges() {
        // Start the target at N(mu_s + 1, 2 cov_s) and descend 500 steps.
        // The source is unit-scale and well conditioned, so the fixed step
        // size contracts the gap fast enough.
        let mut rng = crate::seeds::rng_from(17);
        let d = 3;
        let source = {
            let r = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let cov = DMatrix::identity(d, d) + 0.05 * (&r + r.transpose());
            let mean = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            GaussianStats::new(mean, cov).unwrap()
        };
        let mut mean = source.mean() + DVector::from_element(d, 1.0);
        let mut cov = source.cov() * 2.0;
        let initial = {
            let t = GaussianStats::new(mean.clone(), cov.clone()).unwrap();
            sym_kl(&source, &t).unwrap()
        };
        let lr = 0.01;
        let mut last = initial;
        for _ in 0..500 {
            let t = GaussianStats::new(mean.clone(), cov.clone()).unwrap();
            let g = sym_kl_grad(&source, &t).unwrap();
            mean -= lr * &g.d_mean;
            cov -= lr * &g.d_cov;
            cov = 0.5 * (&cov + cov.transpose());
            let t2 = GaussianStats::new(mean.clone(), cov.clone()).unwrap();
            last = sym_kl(&source, &t2).unwrap();
        }
        assert!(
            last < 1e-3 * initial,
            "descent stalled: initial {initial:.6}, final {last:.6}"
        );
    }

    #[test]
    fn backprop_single_sample_at_mean_with_zero_cov_grad() {
        // d_cov = 0 and the sample sits at the pre-update mean: only the
        // mean path fires and the row is gamma * d_mean.
        let pre = gauss(&[0.5, -0.5], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let g = AlignmentGrad {
            d_mean: DVector::from_vec(vec![2.0, -4.0]),
            d_cov: DMatrix::zeros(2, 2),
        };
        let cfg = StreamConfig { gamma: 1.0 / 8.0 };
        let rows =
            backprop_to_features(&g, &[pre.mean().clone()], &pre, &cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_abs_diff_eq!(rows[0][0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(rows[0][1], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn backprop_matches_finite_differences_end_to_end() {
        // f(batch) = sym_kl(source, update(pre, batch)); compare each row of
        // backprop_to_features against central differences of f.
        let mut rng = crate::seeds::rng_from(23);
        let d = 3;
        let n = 4;
        let source = random_spd_stats(&mut rng, d);
        let pre = random_spd_stats(&mut rng, d);
        let cfg = StreamConfig { gamma: 1.0 / 16.0 };
        let batch: Vec<_> = (0..n)
            .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)))
            .collect();

        let f = |b: &[DVector<f64>]| {
            let post = update_streaming(&pre, b, &cfg).unwrap();
            sym_kl(&source, &post).unwrap()
        };
        let post = update_streaming(&pre, &batch, &cfg).unwrap();
        let grad = sym_kl_grad(&source, &post).unwrap();
        let rows = backprop_to_features(&grad, &batch, &pre, &cfg).unwrap();

        let h = 1e-6;
        for i in 0..n {
            for k in 0..d {
                let mut plus = batch.clone();
                plus[i][k] += h;
                let mut minus = batch.clone();
                minus[i][k] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let a = rows[i][k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                assert!(
                    rel <= 1e-4,
                    "row {i} comp {k}: analytic {a:.9e} vs fd {fd:.9e} (rel {rel:.3e})"
                );
            }
        }
    }

    #[test]
    fn sym_kl_is_symmetric_in_its_arguments() {
        let mut rng = crate::seeds::rng_from(31);
        for d in [1usize, 2, 5] {
            let p = random_spd_stats(&mut rng, d);
            let q = random_spd_stats(&mut rng, d);
            let pq = sym_kl(&p, &q).unwrap();
            let qp = sym_kl(&q, &p).unwrap();
            assert_abs_diff_eq!(pq, qp, epsilon = 1e-10 * pq.abs().max(1.0));
        }
    }
}
