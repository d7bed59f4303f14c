//! Variation and Fréchet gesture distance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pose::GestureSequence;

/// Across-sample population variance per (frame, dim), L2 norm over dims,
/// mean over frames. All samples must share one `N×D` shape.
pub fn variation_matrices(samples: &[Tensor]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!("variation needs >= 2 samples, got {}", samples.len())));
    }
    let shape = samples[0].shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("variation", &shape, &[0, 0]));
    }
    for s in samples {
        if s.shape() != shape.as_slice() {
            return Err(Error::shape("variation", &shape, s.shape()));
        }
    }
    let (n, d) = (shape[0], shape[1]);
    let k = samples.len() as f64;
    let mut total = 0.0;
    for t in 0..n {
        let mut sq = 0.0;
        for j in 0..d {
            let idx = t * d + j;
            // shifted by the first sample so identical samples give exactly 0
            let x0 = samples[0].data()[idx];
            let mean = samples.iter().map(|s| s.data()[idx] - x0).sum::<f64>() / k;
            let var = samples.iter().map(|s| (s.data()[idx] - x0 - mean).powi(2)).sum::<f64>() / k;
            sq += var * var;
        }
        total += sq.sqrt();
    }
    Ok(total / n as f64)
}

pub fn variation(samples: &[GestureSequence]) -> Result<f64> {
    let ms: Vec<Tensor> = samples.iter().map(GestureSequence::to_tensor).collect();
    variation_matrices(&ms)
}

/// Gaussian fit of a feature set: mean and unbiased covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// `features` is `n×k`, one row per sample; needs `n >= 2`.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let (n, k) = (features.rows(), features.cols());
        if n < 2 {
            return Err(Error::invalid(format!("need >= 2 feature rows for a covariance, got {n}")));
        }
        let m = DMatrix::from_row_slice(n, k, features.data());
        let mean = m.row_mean().transpose();
        let mut centered = m;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, cov })
    }

    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::shape("gaussian stats", &[mean.len()], &[cov.nrows(), cov.ncols()]));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
        })
    }
}

fn eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what} has non-finite entries")));
    }
    let diag: Vec<f64> = m.diagonal().iter().map(|v| v.abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    SymmetricEigen::try_new(m, 1e-14, 10_000).ok_or_else(|| {
        Error::Numerical(format!(
            "eigendecomposition of {what} did not converge (diagonal range {min:e}..{max:e}, ratio {:e})",
            max / min.max(f64::MIN_POSITIVE)
        ))
    })
}

/// Eigenvalues clamped at zero; those within rounding noise of zero
/// (relative to the largest) are zeroed too, since the square root would
/// otherwise amplify ~1e-16 noise to ~1e-8.
fn clamp_spectrum(values: &DVector<f64>) -> DVector<f64> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let cutoff = max * 1e-12;
    values.map(|l| if l <= cutoff { 0.0 } else { l })
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let e = eigen(sym, "covariance")?;
    let s = clamp_spectrum(&e.eigenvalues).map(f64::sqrt);
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose())
}

/// `‖μr−μg‖² + Tr(Σr + Σg − 2(ΣrΣg)^{1/2})`, where the trace of the root is
/// taken from the eigenvalues of `Σr^{1/2} Σg Σr^{1/2}`. Clamped at 0.
pub fn frechet_distance(r: &GaussianStats, g: &GaussianStats) -> Result<f64> {
    if r.mean.len() != g.mean.len() {
        return Err(Error::shape("fgd", &[r.mean.len()], &[g.mean.len()]));
    }
    let diff = &r.mean - &g.mean;
    let root_r = psd_sqrt(&r.cov)?;
    let inner = &root_r * &g.cov * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let e = eigen(inner, "product covariance")?;
    let tr_root: f64 = clamp_spectrum(&e.eigenvalues).iter().map(|l| l.sqrt()).sum();
    let d = diff.dot(&diff) + r.cov.trace() + g.cov.trace() - 2.0 * tr_root;
    Ok(d.max(0.0))
}

/// FGD between two feature sets (`n×k` each).
pub fn fgd_features(real: &Tensor, generated: &Tensor) -> Result<f64> {
    frechet_distance(&GaussianStats::from_features(real)?, &GaussianStats::from_features(generated)?)
}
