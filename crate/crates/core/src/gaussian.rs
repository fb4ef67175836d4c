//! Closed-form algebra on multivariate Gaussian densities.
//!
//! Powers, products and ratios are all carried out in precision (information)
//! form. Every inverse goes through a Cholesky or symmetric eigen
//! factorization of a matrix that has already passed the conditioning check.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{MeldError, Result};

/// Smallest eigenvalue a precision or covariance matrix may have and still count
/// as positive definite.
pub const PD_TOLERANCE: f64 = 1e-10;

/// Largest admissible condition number of an input covariance.
pub const MAX_CONDITION: f64 = 1e12;

const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// A proper multivariate normal density `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

/// Outcome of dividing one Gaussian density by another.
#[derive(Debug, Clone, PartialEq)]
pub enum GaussianRatio {
    Proper(GaussianDensity),
    /// The precision difference is not positive definite, so the ratio is not
    /// a normalizable density. `precision` is the (possibly indefinite or zero)
    /// precision difference and `shift` the matching difference of
    /// precision-weighted means.
    Improper {
        precision: DMatrix<f64>,
        shift: DVector<f64>,
    },
}

impl GaussianRatio {
    pub fn is_improper(&self) -> bool {
        matches!(self, GaussianRatio::Improper { .. })
    }

    pub fn proper(self) -> Option<GaussianDensity> {
        match self {
            GaussianRatio::Proper(g) => Some(g),
            GaussianRatio::Improper { .. } => None,
        }
    }
}

fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(m.clone()).eigenvalues
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(MeldError::Structure(format!("{what} is not square")));
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOLERANCE * scale {
                return Err(MeldError::Structure(format!("{what} is not symmetric")));
            }
        }
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(MeldError::Numerical(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Rejects matrices that are not positive definite or are too badly conditioned
/// to invert reliably.
fn check_well_conditioned(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let eig = symmetric_eigenvalues(m);
    let min = eig.min();
    let max = eig.max();
    if min <= PD_TOLERANCE * max.abs().max(1.0) || min <= 0.0 {
        return Err(MeldError::SingularCovariance(format!(
            "{what} is not positive definite (smallest eigenvalue {min:e})"
        )));
    }
    if max / min > MAX_CONDITION {
        return Err(MeldError::SingularCovariance(format!(
            "{what} has condition number {:e}",
            max / min
        )));
    }
    Ok(())
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = m.clone().cholesky().ok_or_else(|| {
        MeldError::SingularCovariance(format!("{what}: Cholesky factorization failed"))
    })?;
    Ok(symmetrize(chol.inverse()))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MeldError::DimensionMismatch {
            what: "Gaussian dimension".into(),
            expected: a,
            got: b,
        });
    }
    Ok(())
}

impl GaussianDensity {
    /// Builds a density, checking that `cov` is a symmetric, positive definite,
    /// well-conditioned matrix matching `mean`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(MeldError::DimensionMismatch {
                what: "covariance rows".into(),
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        if mean.is_empty() {
            return Err(MeldError::Structure("Gaussian of dimension 0".into()));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(MeldError::Numerical("mean has non-finite entries".into()));
        }
        check_symmetric(&cov, "covariance")?;
        check_well_conditioned(&cov, "covariance")?;
        Ok(Self { mean, cov })
    }

    pub fn univariate(mean: f64, variance: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, variance),
        )
    }

    pub fn from_slices(mean: &[f64], cov_row_major: &[f64]) -> Result<Self> {
        let d = mean.len();
        if cov_row_major.len() != d * d {
            return Err(MeldError::DimensionMismatch {
                what: "covariance entries".into(),
                expected: d * d,
                got: cov_row_major.len(),
            });
        }
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_row_slice(d, d, cov_row_major),
        )
    }

    /// Bivariate normal with equal marginal variances and correlation `rho`.
    pub fn bivariate(mean: [f64; 2], variance: f64, rho: f64) -> Result<Self> {
        if rho.is_nan() || rho.abs() >= 1.0 {
            return Err(MeldError::Domain(format!("correlation {rho} not in (-1, 1)")));
        }
        let c = rho * variance;
        Self::from_slices(&mean, &[variance, c, c, variance])
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

    pub fn precision(&self) -> Result<DMatrix<f64>> {
        spd_inverse(&self.cov, "covariance")
    }

    /// Correlation between coordinates `i` and `j`.
    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        self.cov[(i, j)] / (self.cov[(i, i)] * self.cov[(j, j)]).sqrt()
    }

    /// Normalized log density at `x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let chol = match self.cov.clone().cholesky() {
            Some(c) => c,
            None => return f64::NAN,
        };
        let diff = DVector::from_column_slice(x) - &self.mean;
        let z = chol.l().solve_lower_triangular(&diff).unwrap_or(diff);
        let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        -0.5 * (z.norm_squared() + log_det + d as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// `-(x - mean)' P (x - mean) / 2` without the normalizing constant.
    pub fn log_kernel(&self, x: &[f64]) -> f64 {
        self.log_density(x) + self.log_normalizer()
    }

    /// `log((2 pi)^{d/2} |cov|^{1/2})`, the amount subtracted from the kernel.
    pub fn log_normalizer(&self) -> f64 {
        let d = self.dim() as f64;
        let log_det: f64 = symmetric_eigenvalues(&self.cov).iter().map(|v| v.ln()).sum();
        0.5 * (log_det + d * (2.0 * std::f64::consts::PI).ln())
    }

    fn information(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let p = self.precision()?;
        let h = &p * &self.mean;
        Ok((p, h))
    }

    fn from_information(precision: DMatrix<f64>, shift: DVector<f64>) -> Result<Self> {
        let cov = spd_inverse(&precision, "precision")?;
        let mean = &cov * shift;
        Self::new(mean, cov)
    }
}

/// `N(x; mu, S)^lambda` is proportional to `N(x; mu, S / lambda)`.
pub fn gaussian_power(g: &GaussianDensity, lambda: f64) -> Result<GaussianDensity> {
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(MeldError::Domain(format!(
            "power must be a positive finite real, got {lambda}"
        )));
    }
    GaussianDensity::new(g.mean.clone(), &g.cov / lambda)
}

/// Normalized product of two Gaussian densities (precisions add).
pub fn gaussian_product(a: &GaussianDensity, b: &GaussianDensity) -> Result<GaussianDensity> {
    check_dims(a.dim(), b.dim())?;
    let (pa, ha) = a.information()?;
    let (pb, hb) = b.information()?;
    GaussianDensity::from_information(symmetrize(pa + pb), ha + hb)
}

/// Ratio `nu / de` of two Gaussian densities, itself an unnormalized Gaussian
/// when the precision difference is positive definite.
pub fn gaussian_ratio_product(nu: &GaussianDensity, de: &GaussianDensity) -> Result<GaussianRatio> {
    check_dims(nu.dim(), de.dim())?;
    let (pn, hn) = nu.information()?;
    let (pd, hd) = de.information()?;
    let precision = symmetrize(pn - pd);
    let shift = hn - hd;
    let eig = symmetric_eigenvalues(&precision);
    let scale = eig.amax().max(1.0);
    if eig.min() <= PD_TOLERANCE * scale {
        return Ok(GaussianRatio::Improper { precision, shift });
    }
    match GaussianDensity::from_information(precision.clone(), shift.clone()) {
        Ok(g) => Ok(GaussianRatio::Proper(g)),
        Err(MeldError::SingularCovariance(_)) => Ok(GaussianRatio::Improper { precision, shift }),
        Err(e) => Err(e),
    }
}

/// Stacks independent Gaussians into one with concatenated mean and
/// block-diagonal covariance.
pub fn block_diag_stack(parts: &[GaussianDensity]) -> Result<GaussianDensity> {
    if parts.is_empty() {
        return Err(MeldError::Structure("block_diag_stack needs at least one part".into()));
    }
    let d: usize = parts.iter().map(GaussianDensity::dim).sum();
    let mut mean = DVector::zeros(d);
    let mut cov = DMatrix::zeros(d, d);
    let mut offset = 0;
    for p in parts {
        let k = p.dim();
        mean.rows_mut(offset, k).copy_from(&p.mean);
        cov.view_mut((offset, offset), (k, k)).copy_from(&p.cov);
        offset += k;
    }
    GaussianDensity::new(mean, cov)
}
