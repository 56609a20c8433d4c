//! Pooled feature vectors and Gaussian feature statistics.
//!
//! Two kinds of feature vector summarize a scene: the global vector (mean
//! over all feature-map cells, one entry per channel) and the foreground
//! vector (mean over the surviving proposal features). Source statistics
//! are fit offline with a population (1/N) covariance; during a stream the
//! target statistics move by an exponential-style batch update whose
//! current-batch contribution stays differentiable while history is held
//! fixed.

use nalgebra::{DMatrix, DVector};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("need at least two samples to fit a Gaussian, got {0}")]
    EmptyOrSingleton(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("covariance is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("effective rate gamma*|B| = {0} must stay below 1")]
    RateOverflow(f64),
    #[error("covariance is not positive definite after jitter")]
    NotPositiveDefinite,
    #[error("invalid stats payload: {0}")]
    Parse(String),
}

/// Rate of the streaming statistics update.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct StreamConfig {
    pub gamma: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        // One sixty-fourth per sample: a batch of 8 moves the estimate by 1/8.
        Self { gamma: 1.0 / 64.0 }
    }
}

/// Mean and full covariance of a feature distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct StatsJson {
    dim: usize,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, StatsError> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(StatsError::DimMismatch {
                expected: d,
                got: cov.nrows().max(cov.ncols()),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// JSON with the full row-major covariance. Values survive a round trip
    /// exactly: floats are printed in shortest-representation decimal.
    pub fn to_json(&self) -> String {
        let d = self.dim();
        let payload = StatsJson {
            dim: d,
            mean: self.mean.iter().copied().collect(),
            cov: (0..d)
                .map(|i| (0..d).map(|j| self.cov[(i, j)]).collect())
                .collect(),
        };
        serde_json::to_string_pretty(&payload).expect("stats serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, StatsError> {
        let payload: StatsJson =
            serde_json::from_str(text).map_err(|e| StatsError::Parse(e.to_string()))?;
        if payload.mean.len() != payload.dim {
            return Err(StatsError::DimMismatch {
                expected: payload.dim,
                got: payload.mean.len(),
            });
        }
        if payload.cov.len() != payload.dim
            || payload.cov.iter().any(|row| row.len() != payload.dim)
        {
            return Err(StatsError::Parse("covariance shape does not match dim".into()));
        }
        let d = payload.dim;
        let mean = DVector::from_vec(payload.mean);
        let cov = DMatrix::from_fn(d, d, |i, j| payload.cov[i][j]);
        GaussianStats::new(mean, cov)
    }
}

/// Mean over all grid cells of an `[H][W][C]` feature map, one entry per
/// channel.
pub fn pool_global(map: &Array3<f64>) -> DVector<f64> {
    let (h, w, c) = map.dim();
    assert!(h > 0 && w > 0, "feature map must have at least one cell");
    let n = (h * w) as f64;
    let mut out = DVector::zeros(c);
    for row in map.outer_iter() {
        for cell in row.outer_iter() {
            for (k, v) in cell.iter().enumerate() {
                out[k] += v;
            }
        }
    }
    out / n
}

/// Mean over proposal feature vectors; `None` when no proposal survived, so
/// an empty scene contributes nothing rather than a zero vector.
pub fn pool_foreground(proposals: &[DVector<f64>]) -> Option<DVector<f64>> {
    let first = proposals.first()?;
    let d = first.len();
    let mut out = DVector::zeros(d);
    for p in proposals {
        assert_eq!(p.len(), d, "proposal features must share one dimension");
        out += p;
    }
    Some(out / proposals.len() as f64)
}

/// Population mean and covariance (1/N) over at least two sample vectors.
pub fn fit_source(samples: &[DVector<f64>]) -> Result<GaussianStats, StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::EmptyOrSingleton(samples.len()));
    }
    let d = samples[0].len();
    for s in samples {
        if s.len() != d {
            return Err(StatsError::DimMismatch { expected: d, got: s.len() });
        }
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += s;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = s - &mean;
        cov.ger(1.0 / n, &c, &c, 1.0);
    }
    GaussianStats::new(mean, cov)
}

/// One streaming update with the whole batch folded in at rate `gamma` per
/// sample. History is a constant here; only the batch terms carry gradient,
/// which [`crate::align::backprop_to_features`] exploits. Pure: returns the
/// post-update statistics.
///
/// With `delta = gamma * sum_x (x - mu)`:
/// `mu' = mu + delta` and
/// `cov' = cov + gamma * sum_x [(x - mu)(x - mu)^T - cov] - delta delta^T`,
/// everything on the right evaluated at the pre-update `mu`, `cov`.
pub fn update_streaming(
    stats: &GaussianStats,
    batch: &[DVector<f64>],
    cfg: &StreamConfig,
) -> Result<GaussianStats, StatsError> {
    let d = stats.dim();
    for x in batch {
        if x.len() != d {
            return Err(StatsError::DimMismatch { expected: d, got: x.len() });
        }
    }
    let rate = cfg.gamma * batch.len() as f64;
    if rate >= 1.0 {
        return Err(StatsError::RateOverflow(rate));
    }
    if batch.is_empty() {
        return Ok(stats.clone());
    }

    let mut delta = DVector::zeros(d);
    for x in batch {
        delta += x - &stats.mean;
    }
    delta *= cfg.gamma;

    let mean = &stats.mean + &delta;

    let mut cov = stats.cov.clone();
    for x in batch {
        let c = x - &stats.mean;
        cov.ger(cfg.gamma, &c, &c, 1.0);
    }
    cov -= &stats.cov * rate;
    cov -= &delta * delta.transpose();
    // Guard against drift from rounding: the estimate stays symmetric.
    let cov = 0.5 * (&cov + cov.transpose());

    GaussianStats::new(mean, cov)
}

/// Jitter magnitude for [`regularize_cov`]: 1e-6 times the mean diagonal
/// magnitude, with that magnitude floored at 1.
pub fn jitter_epsilon(cov: &DMatrix<f64>) -> f64 {
    let d = cov.nrows();
    let mean_diag = (0..d).map(|i| cov[(i, i)].abs()).sum::<f64>() / d.max(1) as f64;
    1e-6 * mean_diag.max(1.0)
}

/// Validate symmetry and add jitter to the diagonal so a slightly rank
/// deficient estimate still factors.
pub fn regularize_cov(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, StatsError> {
    let d = cov.nrows();
    if cov.ncols() != d {
        return Err(StatsError::DimMismatch { expected: d, got: cov.ncols() });
    }
    let mut asym = 0.0f64;
    let mut scale = 1.0f64;
    for i in 0..d {
        for j in 0..d {
            asym = asym.max((cov[(i, j)] - cov[(j, i)]).abs());
            scale = scale.max(cov[(i, j)].abs());
        }
    }
    if asym > 1e-8 * scale {
        return Err(StatsError::NotSymmetric(asym));
    }
    let eps = jitter_epsilon(cov);
    let mut out = cov.clone();
    for i in 0..d {
        out[(i, i)] += eps;
    }
    Ok(out)
}
