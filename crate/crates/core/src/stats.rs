//! Symmetric PSD sufficient-statistics algebra.
//!
//! Every determinant in the protocol is taken of a ridge-regularized Gram
//! matrix `V + λI` and handled in the log domain. A [`RegularizedFactor`]
//! holds one Cholesky factorization of `V + λI` and serves the log-determinant,
//! the ridge solve and the `‖x‖_{(V+λI)^{-1}}` quadratic form from the same
//! factor. Factorizations are recomputed from scratch on every evaluation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

/// Tolerated negative eigenvalue for matrices that should be PSD.
pub const PSD_SLACK: f64 = 1e-9;

/// Tolerated entrywise asymmetry.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("non-finite entry in {what}")]
    NonFinite { what: &'static str },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("V + {lambda}I is not positive definite (d = {dim}, min diagonal {min_diag:e})")]
    NotPositiveDefinite {
        dim: usize,
        lambda: f64,
        min_diag: f64,
    },
    #[error("matrix is not PSD: smallest eigenvalue {min_eigenvalue:e}")]
    NotPsd { min_eigenvalue: f64 },
    #[error("matrix is not symmetric: max asymmetry {asymmetry:e}")]
    NotSymmetric { asymmetry: f64 },
    #[error("invalid model parameter {name} = {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("confidence radicand {0:e} is negative; log-determinant evaluation is broken")]
    NegativeRadicand(f64),
}

/// Gram matrix `V` and feature-weighted reward sum `b`.
///
/// The same type carries global, per-client and delta statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    v: DMatrix<f64>,
    b: DVector<f64>,
}

impl SuffStats {
    pub fn zeros(dim: usize) -> Self {
        Self {
            v: DMatrix::zeros(dim, dim),
            b: DVector::zeros(dim),
        }
    }

    /// Builds statistics from raw parts. `v` is symmetrized by averaging with
    /// its transpose; asymmetry beyond [`SYMMETRY_TOL`] is rejected.
    pub fn from_parts(v: DMatrix<f64>, b: DVector<f64>) -> Result<Self, StatsError> {
        let dim = b.len();
        if v.nrows() != dim || v.ncols() != dim {
            return Err(StatsError::DimensionMismatch {
                expected: dim,
                got: v.nrows().max(v.ncols()),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(StatsError::NonFinite { what: "V" });
        }
        if b.iter().any(|x| !x.is_finite()) {
            return Err(StatsError::NonFinite { what: "b" });
        }
        let asymmetry = (&v - v.transpose()).amax();
        if asymmetry > SYMMETRY_TOL {
            return Err(StatsError::NotSymmetric { asymmetry });
        }
        let v = (&v + v.transpose()) * 0.5;
        Ok(Self { v, b })
    }

    /// Gram matrix with a zero reward vector.
    pub fn from_gram(v: DMatrix<f64>) -> Result<Self, StatsError> {
        let dim = v.nrows();
        Self::from_parts(v, DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// Adds `x xᵀ` to `V` and `x y` to `b`.
    pub fn add_observation(&mut self, x: &DVector<f64>, y: f64) -> Result<(), StatsError> {
        self.check_dim(x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite { what: "x" });
        }
        if !y.is_finite() {
            return Err(StatsError::NonFinite { what: "y" });
        }
        // x_i x_j == x_j x_i in IEEE arithmetic, so V stays exactly symmetric.
        self.v.ger(1.0, x, x, 1.0);
        self.b.axpy(y, x, 1.0);
        Ok(())
    }

    pub fn add_assign(&mut self, other: &SuffStats) {
        assert_eq!(self.dim(), other.dim(), "SuffStats dimension mismatch");
        self.v += &other.v;
        self.b += &other.b;
    }

    pub fn sub_assign(&mut self, other: &SuffStats) {
        assert_eq!(self.dim(), other.dim(), "SuffStats dimension mismatch");
        self.v -= &other.v;
        self.b -= &other.b;
    }

    pub fn added(&self, other: &SuffStats) -> SuffStats {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn subtracted(&self, other: &SuffStats) -> SuffStats {
        let mut out = self.clone();
        out.sub_assign(other);
        out
    }

    /// True when every entry of `V` is exactly zero.
    pub fn gram_is_zero(&self) -> bool {
        self.v.iter().all(|x| *x == 0.0)
    }

    pub fn reset(&mut self) {
        self.v.fill(0.0);
        self.b.fill(0.0);
    }

    /// Smallest eigenvalue of `V`.
    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        self.v
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Rejects `V` whose smallest eigenvalue is below `-PSD_SLACK`.
    pub fn ensure_psd(&self) -> Result<(), StatsError> {
        let min_eigenvalue = self.min_eigenvalue();
        if min_eigenvalue < -PSD_SLACK {
            return Err(StatsError::NotPsd { min_eigenvalue });
        }
        Ok(())
    }

    fn check_dim(&self, got: usize) -> Result<(), StatsError> {
        if got != self.dim() {
            return Err(StatsError::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }
}

/// Ridge regularizer, noise scale and confidence level.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    pub lambda: f64,
    pub sigma: f64,
    pub delta: f64,
}

impl ModelParams {
    pub fn new(lambda: f64, sigma: f64, delta: f64) -> Result<Self, StatsError> {
        let p = Self {
            lambda,
            sigma,
            delta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(StatsError::InvalidParam {
                name: "lambda",
                value: self.lambda,
            });
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(StatsError::InvalidParam {
                name: "sigma",
                value: self.sigma,
            });
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(StatsError::InvalidParam {
                name: "delta",
                value: self.delta,
            });
        }
        Ok(())
    }
}

/// Cholesky factorization of `V + λI`.
#[derive(Debug, Clone)]
pub struct RegularizedFactor {
    chol: Cholesky<f64, Dyn>,
    lambda: f64,
}

impl RegularizedFactor {
    pub fn new(v: &DMatrix<f64>, lambda: f64) -> Result<Self, StatsError> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(StatsError::InvalidParam {
                name: "lambda",
                value: lambda,
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(StatsError::NonFinite { what: "V" });
        }
        let dim = v.nrows();
        let mut m = v.clone();
        for i in 0..dim {
            m[(i, i)] += lambda;
        }
        let min_diag = (0..dim).map(|i| m[(i, i)]).fold(f64::INFINITY, f64::min);
        let chol = Cholesky::new(m).ok_or(StatsError::NotPositiveDefinite {
            dim,
            lambda,
            min_diag,
        })?;
        Ok(Self { chol, lambda })
    }

    pub fn of(stats: &SuffStats, lambda: f64) -> Result<Self, StatsError> {
        Self::new(stats.v(), lambda)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// `log det(V + λI) = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Solves `(V + λI) z = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// `xᵀ (V + λI)^{-1} x`, via a triangular solve against `L`.
    pub fn inv_quad_form(&self, x: &DVector<f64>) -> f64 {
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(x)
            .expect("Cholesky factor has a positive diagonal");
        z.norm_squared()
    }
}

/// `log det(V + λI)`.
pub fn log_det_reg(stats: &SuffStats, lambda: f64) -> Result<f64, StatsError> {
    Ok(RegularizedFactor::of(stats, lambda)?.log_det())
}

/// `log det(V + λI)` for a bare matrix.
pub fn log_det_reg_matrix(v: &DMatrix<f64>, lambda: f64) -> Result<f64, StatsError> {
    Ok(RegularizedFactor::new(v, lambda)?.log_det())
}

/// Ridge estimate `θ̂ = (V + λI)^{-1} b`.
pub fn ridge_estimate(stats: &SuffStats, lambda: f64) -> Result<DVector<f64>, StatsError> {
    if stats.b().iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite { what: "b" });
    }
    Ok(RegularizedFactor::of(stats, lambda)?.solve(stats.b()))
}

/// Confidence width from an existing factorization.
pub fn confidence_width_from(
    factor: &RegularizedFactor,
    p: &ModelParams,
) -> Result<f64, StatsError> {
    let dim = factor.dim() as f64;
    let radicand = factor.log_det() - dim * p.lambda.ln() + 2.0 * (1.0 / p.delta).ln();
    if radicand < -1e-12 {
        return Err(StatsError::NegativeRadicand(radicand));
    }
    Ok(p.sigma * radicand.max(0.0).sqrt() + p.lambda.sqrt())
}

/// `σ √(log det(V+λI) − d log λ + 2 log(1/δ)) + √λ`.
pub fn confidence_width(stats: &SuffStats, p: &ModelParams) -> Result<f64, StatsError> {
    p.validate()?;
    let factor = RegularizedFactor::of(stats, p.lambda)?;
    confidence_width_from(&factor, p)
}

/// Precomputed pieces of the UCB index for one statistics snapshot.
#[derive(Debug, Clone)]
pub struct UcbScorer {
    factor: RegularizedFactor,
    theta: DVector<f64>,
    width: f64,
}

impl UcbScorer {
    pub fn new(stats: &SuffStats, p: &ModelParams) -> Result<Self, StatsError> {
        p.validate()?;
        if stats.b().iter().any(|x| !x.is_finite()) {
            return Err(StatsError::NonFinite { what: "b" });
        }
        let factor = RegularizedFactor::of(stats, p.lambda)?;
        let theta = factor.solve(stats.b());
        let width = confidence_width_from(&factor, p)?;
        Ok(Self {
            factor,
            theta,
            width,
        })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn score(&self, x: &DVector<f64>) -> Result<f64, StatsError> {
        if x.len() != self.theta.len() {
            return Err(StatsError::DimensionMismatch {
                expected: self.theta.len(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite { what: "x" });
        }
        Ok(x.dot(&self.theta) + self.width * self.factor.inv_quad_form(x).sqrt())
    }
}

/// `xᵀθ̂ + α ‖x‖_{(V+λI)^{-1}}`.
pub fn ucb_score(x: &DVector<f64>, stats: &SuffStats, p: &ModelParams) -> Result<f64, StatsError> {
    UcbScorer::new(stats, p)?.score(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn stats(v: &[f64], b: &[f64]) -> SuffStats {
        let d = b.len();
        SuffStats::from_parts(DMatrix::from_row_slice(d, d, v), DVector::from_row_slice(b)).unwrap()
    }

    #[test]
    fn log_det_of_zero_gram_is_zero() {
        assert_eq!(log_det_reg(&SuffStats::zeros(3), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn log_det_hand_values() {
        let s = stats(&[1.0, 0.0, 0.0, 2.0], &[0.0, 0.0]);
        assert_relative_eq!(
            log_det_reg(&s, 1.0).unwrap(),
            6f64.ln(),
            max_relative = 1e-14
        );
        assert_relative_eq!(
            log_det_reg(&s, 1.0).unwrap(),
            1.791759469228055,
            max_relative = 1e-12
        );

        let s = stats(&[2.0, 1.0, 1.0, 2.0], &[0.0, 0.0]);
        assert_relative_eq!(
            log_det_reg(&s, 0.5).unwrap(),
            5.25f64.ln(),
            max_relative = 1e-14
        );
        assert_relative_eq!(
            log_det_reg(&s, 0.5).unwrap(),
            1.658228076603532,
            max_relative = 1e-12
        );
    }

    #[test]
    fn log_det_rejects_non_finite_and_indefinite() {
        let mut v = DMatrix::zeros(2, 2);
        v[(0, 0)] = f64::NAN;
        assert!(matches!(
            log_det_reg_matrix(&v, 1.0),
            Err(StatsError::NonFinite { .. })
        ));
        let v = DMatrix::from_row_slice(2, 2, &[-5.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            log_det_reg_matrix(&v, 1.0),
            Err(StatsError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn ridge_hand_values() {
        let s = stats(&[0.0; 4], &[0.0, 0.0]);
        assert_eq!(ridge_estimate(&s, 1.0).unwrap(), DVector::zeros(2));

        let s = stats(&[2.0], &[4.0]);
        assert_relative_eq!(
            ridge_estimate(&s, 1.0).unwrap()[0],
            4.0 / 3.0,
            max_relative = 1e-14
        );

        let s = stats(&[1.0, 0.0, 0.0, 3.0], &[2.0, 8.0]);
        let th = ridge_estimate(&s, 1.0).unwrap();
        assert_relative_eq!(th[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(th[1], 2.0, max_relative = 1e-14);
    }

    #[test]
    fn confidence_width_hand_values() {
        let p = ModelParams::new(1.0, 1.0, (-0.5f64).exp()).unwrap();
        assert_relative_eq!(
            confidence_width(&SuffStats::zeros(3), &p).unwrap(),
            2.0,
            max_relative = 1e-14
        );

        let p = ModelParams::new(4.0, 2.0, (-2.0f64).exp()).unwrap();
        assert_relative_eq!(
            confidence_width(&SuffStats::zeros(2), &p).unwrap(),
            6.0,
            max_relative = 1e-14
        );

        // 1 + sqrt(ln 4 + 2 ln 10)
        let p = ModelParams::new(1.0, 1.0, 0.1).unwrap();
        let w = confidence_width(&stats(&[3.0], &[0.0]), &p).unwrap();
        assert_relative_eq!(w, 3.447746830680817, max_relative = 1e-12);
    }

    #[test]
    fn ucb_hand_values() {
        let p = ModelParams::new(1.0, 1.0, 0.1).unwrap();
        let s = stats(&[3.0], &[6.0]);
        let x = DVector::from_row_slice(&[1.0]);
        // 6/4 + 3.447746830680817 / 2
        assert_relative_eq!(
            ucb_score(&x, &s, &p).unwrap(),
            3.223873415340408,
            max_relative = 1e-12
        );
        let x = DVector::from_row_slice(&[-1.0]);
        assert_relative_eq!(
            ucb_score(&x, &s, &p).unwrap(),
            0.223873415340408,
            max_relative = 1e-11
        );
    }

    #[test]
    fn ucb_cold_start_and_zero_arm() {
        let p = ModelParams::new(2.0, 0.5, 0.05).unwrap();
        let s = SuffStats::zeros(3);
        let alpha = confidence_width(&s, &p).unwrap();
        let x = DVector::from_row_slice(&[0.3, -0.4, 1.2]);
        assert_relative_eq!(
            ucb_score(&x, &s, &p).unwrap(),
            alpha * x.norm() / 2f64.sqrt(),
            max_relative = 1e-13
        );
        assert_eq!(
            ucb_score(
                &DVector::zeros(3),
                &stats(
                    &[1.0, 0.2, 0.0, 0.2, 1.0, 0.0, 0.0, 0.0, 1.0],
                    &[1.0, 2.0, 3.0]
                ),
                &p
            )
            .unwrap(),
            0.0
        );
    }

    #[test]
    fn model_params_validation() {
        assert!(ModelParams::new(0.0, 1.0, 0.1).is_err());
        assert!(ModelParams::new(1.0, -1.0, 0.1).is_err());
        assert!(ModelParams::new(1.0, 1.0, 1.0).is_err());
        assert!(ModelParams::new(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn from_parts_symmetrizes_and_rejects() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5 + 1e-13, 1.0]);
        let s = SuffStats::from_gram(v).unwrap();
        assert_eq!(s.v()[(0, 1)], s.v()[(1, 0)]);
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.6, 1.0]);
        assert!(matches!(
            SuffStats::from_gram(v),
            Err(StatsError::NotSymmetric { .. })
        ));
        let v = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        assert!(SuffStats::from_gram(v).unwrap().ensure_psd().is_err());
    }
}
