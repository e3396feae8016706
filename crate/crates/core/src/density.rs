//! Gaussian mean-shift sampling families.
//!
//! A [`GaussianFamily`] is the set `{N(θ, Σ) : θ ∈ R^k}` for a fixed
//! symmetric positive-definite `Σ`, with reference mean `θ0 = 0`. Its Fisher
//! metric is flat, `g(u, v) = uᵀ Σ⁻¹ v`, and the Fisher gradient of the
//! log-likelihood is `x − θ`.
//!
//! A [`ReducedFamily`] restricts the mean to the span of the leading `l`
//! principal components of `Σ`: `θ(a) = U J_l a` for `a ∈ R^l`.
//!
//! All density computations happen in log space; [`MeanShiftFamily::likelihood_ratio`]
//! exponentiates at the very end.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("covariance must be a non-empty square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("covariance is not symmetric (max relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("covariance is not positive definite (smallest eigenvalue {min:e} below floor {floor:e})")]
    NotPositiveDefinite { min: f64, floor: f64 },
    #[error("covariance has non-finite entries")]
    NonFiniteCovariance,
    #[error("reduced dimension {l} out of range 1..={k}")]
    ReductionOutOfRange { l: usize, k: usize },
    #[error("parameter has non-finite coordinates")]
    NonFiniteParameter,
}

const SYMMETRY_TOL: f64 = 1e-12;
const EIGEN_FLOOR: f64 = 1e-12;

/// A point in the parameter space of a mean-shift family.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter(DVector<f64>);

impl Parameter {
    pub fn new(theta: DVector<f64>) -> Result<Self, DensityError> {
        if theta.iter().all(|v| v.is_finite()) {
            Ok(Self(theta))
        } else {
            Err(DensityError::NonFiniteParameter)
        }
    }

    pub fn from_slice(theta: &[f64]) -> Result<Self, DensityError> {
        Self::new(DVector::from_column_slice(theta))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

fn check_dim(expected: usize, found: usize) -> Result<(), DensityError> {
    if expected == found {
        Ok(())
    } else {
        Err(DensityError::DimensionMismatch { expected, found })
    }
}

/// Common interface of the sampling families the SA engine can tune.
///
/// The parameter space (dimension [`param_dim`](Self::param_dim)) can be
/// smaller than the sample space (dimension [`sample_dim`](Self::sample_dim)),
/// as for the PCA-reduced family.
pub trait MeanShiftFamily: Send + Sync {
    fn param_dim(&self) -> usize;

    fn sample_dim(&self) -> usize;

    /// The reference parameter, whose density is the target measure.
    fn reference(&self) -> Parameter {
        Parameter::zeros(self.param_dim())
    }

    /// Draws `x ~ φ_θ`.
    fn sample<R: Rng + ?Sized>(
        &self,
        theta: &Parameter,
        rng: &mut R,
    ) -> Result<DVector<f64>, DensityError>;

    /// `log(φ_{θ0}(x) / φ_θ(x))`.
    fn log_likelihood_ratio(&self, x: &DVector<f64>, theta: &Parameter)
        -> Result<f64, DensityError>;

    fn likelihood_ratio(&self, x: &DVector<f64>, theta: &Parameter) -> Result<f64, DensityError> {
        self.log_likelihood_ratio(x, theta).map(f64::exp)
    }

    /// Gradient of `θ ↦ log φ_θ(x)` with respect to the Fisher metric.
    fn grad_log_likelihood(
        &self,
        x: &DVector<f64>,
        theta: &Parameter,
    ) -> Result<DVector<f64>, DensityError>;

    /// The Fisher metric on the parameter space.
    fn fisher_inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64, DensityError>;

    fn fisher_norm_sq(&self, u: &DVector<f64>) -> Result<f64, DensityError> {
        self.fisher_inner(u, u)
    }
}

/// `{N(θ, Σ) : θ ∈ R^k}` with fixed `Σ` and reference mean zero.
#[derive(Debug, Clone)]
pub struct GaussianFamily {
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    sampling_factor: DMatrix<f64>,
    /// Eigenvalues sorted descending.
    eigenvalues: DVector<f64>,
    /// Eigenvectors as columns, in the order of `eigenvalues`.
    eigenvectors: DMatrix<f64>,
}

impl GaussianFamily {
    /// Validates `Σ` (square, finite, symmetric, positive definite) and
    /// precomputes its eigendecomposition, inverse and a sampling factor.
    pub fn new(covariance: DMatrix<f64>) -> Result<Self, DensityError> {
        let (rows, cols) = covariance.shape();
        if rows == 0 || rows != cols {
            return Err(DensityError::NotSquare { rows, cols });
        }
        if covariance.iter().any(|v| !v.is_finite()) {
            return Err(DensityError::NonFiniteCovariance);
        }
        let scale = covariance.amax();
        let asym = (&covariance - covariance.transpose()).amax();
        if scale == 0.0 || asym > SYMMETRY_TOL * scale {
            return Err(DensityError::NotSymmetric(if scale == 0.0 { f64::INFINITY } else { asym / scale }));
        }
        let sym = (&covariance + covariance.transpose()) * 0.5;

        let eig = sym.clone().symmetric_eigen();
        let k = rows;
        // Stable sort keeps the original column order among ties.
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let eigenvalues = DVector::from_iterator(k, order.iter().map(|&i| eig.eigenvalues[i]));
        let eigenvectors = DMatrix::from_columns(
            &order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>(),
        );

        let max = eigenvalues[0];
        let min = eigenvalues[k - 1];
        let floor = EIGEN_FLOOR * max;
        if !(max > 0.0) || min <= floor {
            return Err(DensityError::NotPositiveDefinite { min, floor });
        }

        let inv_diag = DMatrix::from_diagonal(&eigenvalues.map(|l| 1.0 / l));
        let precision = &eigenvectors * inv_diag * eigenvectors.transpose();
        let precision = (&precision + precision.transpose()) * 0.5;
        let sqrt_diag = DMatrix::from_diagonal(&eigenvalues.map(f64::sqrt));
        let sampling_factor = &eigenvectors * sqrt_diag;

        Ok(Self {
            covariance: sym,
            precision,
            sampling_factor,
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn identity(k: usize) -> Result<Self, DensityError> {
        Self::new(DMatrix::identity(k, k))
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Restricts the mean to the leading `l` principal components.
    pub fn reduce(&self, l: usize) -> Result<ReducedFamily, DensityError> {
        let k = self.dim();
        if l == 0 || l > k {
            return Err(DensityError::ReductionOutOfRange { l, k });
        }
        let basis = self.eigenvectors.columns(0, l).into_owned();
        let eigenvalues = self.eigenvalues.rows(0, l).into_owned();
        let variance_explained = eigenvalues.sum() / self.eigenvalues.sum();
        Ok(ReducedFamily {
            base: self.clone(),
            basis,
            eigenvalues,
            variance_explained,
        })
    }
}

impl MeanShiftFamily for GaussianFamily {
    fn param_dim(&self) -> usize {
        self.dim()
    }

    fn sample_dim(&self) -> usize {
        self.dim()
    }

    fn sample<R: Rng + ?Sized>(
        &self,
        theta: &Parameter,
        rng: &mut R,
    ) -> Result<DVector<f64>, DensityError> {
        let k = self.dim();
        check_dim(k, theta.dim())?;
        let z = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
        Ok(theta.as_vector() + &self.sampling_factor * z)
    }

    fn log_likelihood_ratio(
        &self,
        x: &DVector<f64>,
        theta: &Parameter,
    ) -> Result<f64, DensityError> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), theta.dim())?;
        let p_theta = &self.precision * theta.as_vector();
        Ok(-x.dot(&p_theta) + 0.5 * theta.as_vector().dot(&p_theta))
    }

    fn grad_log_likelihood(
        &self,
        x: &DVector<f64>,
        theta: &Parameter,
    ) -> Result<DVector<f64>, DensityError> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), theta.dim())?;
        Ok(x - theta.as_vector())
    }

    fn fisher_inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64, DensityError> {
        check_dim(self.dim(), u.len())?;
        check_dim(self.dim(), v.len())?;
        Ok(u.dot(&(&self.precision * v)))
    }
}

/// `{N(U J_l a, Σ) : a ∈ R^l}`: mean shifts along the leading `l`
/// eigenvectors of `Σ`.
#[derive(Debug, Clone)]
pub struct ReducedFamily {
    base: GaussianFamily,
    /// First `l` columns of `U`.
    basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    variance_explained: f64,
}

impl ReducedFamily {
    pub fn base(&self) -> &GaussianFamily {
        &self.base
    }

    pub fn reduced_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// `Σ_{i≤l} λ_i / Σ_i λ_i`.
    pub fn variance_explained(&self) -> f64 {
        self.variance_explained
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// `θ(a) = U J_l a`.
    pub fn full_mean(&self, a: &Parameter) -> Result<Parameter, DensityError> {
        check_dim(self.reduced_dim(), a.dim())?;
        Ok(Parameter(&self.basis * a.as_vector()))
    }
}

impl MeanShiftFamily for ReducedFamily {
    fn param_dim(&self) -> usize {
        self.reduced_dim()
    }

    fn sample_dim(&self) -> usize {
        self.base.dim()
    }

    fn sample<R: Rng + ?Sized>(
        &self,
        a: &Parameter,
        rng: &mut R,
    ) -> Result<DVector<f64>, DensityError> {
        self.base.sample(&self.full_mean(a)?, rng)
    }

    fn log_likelihood_ratio(&self, x: &DVector<f64>, a: &Parameter) -> Result<f64, DensityError> {
        self.base.log_likelihood_ratio(x, &self.full_mean(a)?)
    }

    /// `J_lᵀ Uᵀ x − a`.
    fn grad_log_likelihood(
        &self,
        x: &DVector<f64>,
        a: &Parameter,
    ) -> Result<DVector<f64>, DensityError> {
        check_dim(self.base.dim(), x.len())?;
        check_dim(self.reduced_dim(), a.dim())?;
        Ok(self.basis.tr_mul(x) - a.as_vector())
    }

    /// `uᵀ J_lᵀ Λ⁻¹ J_l v`.
    fn fisher_inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64, DensityError> {
        check_dim(self.reduced_dim(), u.len())?;
        check_dim(self.reduced_dim(), v.len())?;
        Ok(u.iter()
            .zip(v.iter())
            .zip(self.eigenvalues.iter())
            .map(|((a, b), l)| a * b / l)
            .sum())
    }
}
