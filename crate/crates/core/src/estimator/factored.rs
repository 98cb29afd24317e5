//! Kronecker-factored recursive least squares.
//!
//! The dense gain matrix starts as S0 = delta I, and every quantity the
//! update builds from it keeps the form S = P kron I_n: with H = b' kron I_n,
//! the gain becomes F = (P b / (beta + b' P b)) kron I_n, and the S update
//! maps P to (P - g (P b)') / beta. So the full (n*m)^2 state collapses to an
//! m x m factor P plus the n x m estimate itself, and the update costs
//! O(m^2 + n*m) instead of O((n*m)^2).

use super::{check_rls_params, vec_l, EstimatorSnapshot, InfluenceEstimator};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

pub(super) const NAME: &str = "factored";

#[derive(Debug, Clone)]
pub struct FactoredRls {
    beta: f64,
    delta: f64,
    l_hat: DMatrix<f64>,
    p: DMatrix<f64>,
    last_eps: Option<DVector<f64>>,
}

impl FactoredRls {
    pub fn new(l0: DMatrix<f64>, delta: f64, beta: f64) -> Result<Self> {
        check_rls_params(delta, beta)?;
        let m = l0.ncols();
        Ok(FactoredRls {
            beta,
            delta,
            l_hat: l0,
            p: DMatrix::identity(m, m) * delta,
            last_eps: None,
        })
    }

    pub(super) fn from_snapshot(snap: &EstimatorSnapshot) -> Result<Self> {
        check_rls_params(snap.delta, snap.beta)?;
        let (n, m) = (snap.n, snap.m);
        let p_raw = snap.p.as_ref().ok_or_else(|| Error::Parse {
            path: "estimator snapshot".into(),
            line: 0,
            message: "factored form requires the p field".into(),
        })?;
        if snap.x_hat.len() != n * m || p_raw.len() != m * m {
            return Err(Error::Dimension {
                context: "factored snapshot".into(),
                expected: n * m,
                got: snap.x_hat.len(),
            });
        }
        Ok(FactoredRls {
            beta: snap.beta,
            delta: snap.delta,
            l_hat: DMatrix::from_column_slice(n, m, &snap.x_hat),
            p: DMatrix::from_column_slice(m, m, p_raw),
            last_eps: snap.last_epsilon.as_ref().map(|e| DVector::from_column_slice(e)),
        })
    }

    /// The m x m Kronecker factor; S = P kron I_n.
    pub fn p_matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Smallest eigenvalue of P, for excitation monitoring.
    pub fn min_eigenvalue(&self) -> f64 {
        self.p.symmetric_eigenvalues().min()
    }
}

impl InfluenceEstimator for FactoredRls {
    fn name(&self) -> &'static str {
        NAME
    }

    fn dims(&self) -> (usize, usize) {
        self.l_hat.shape()
    }

    fn current_l(&self) -> DMatrix<f64> {
        self.l_hat.clone()
    }

    fn update(&mut self, b: &DVector<f64>, z_next: &DVector<f64>) -> Result<()> {
        let (n, m) = self.l_hat.shape();
        if b.len() != m || z_next.len() != n {
            return Err(Error::Dimension {
                context: "rls update".into(),
                expected: m,
                got: b.len(),
            });
        }
        let pb = &self.p * b;
        let q = b.dot(&pb);
        let denom = self.beta + q;
        if !denom.is_finite() || denom <= 0.0 {
            return Err(Error::Numerical {
                context: "factored rls update".into(),
                message: format!("innovation scalar beta + b'Pb = {denom} is not positive"),
            });
        }
        let g = &pb / denom;
        let eps = z_next - &self.l_hat * b;
        // L <- L + eps g'
        self.l_hat.ger(1.0, &eps, &g, 1.0);
        // P <- (P - g (P b)') / beta, then symmetrize
        self.p.ger(-1.0, &g, &pb, 1.0);
        self.p /= self.beta;
        self.p = (&self.p + self.p.transpose()) * 0.5;
        self.last_eps = Some(eps);
        Ok(())
    }

    fn last_epsilon(&self) -> Option<&DVector<f64>> {
        self.last_eps.as_ref()
    }

    fn snapshot(&self) -> EstimatorSnapshot {
        let (n, m) = self.l_hat.shape();
        EstimatorSnapshot {
            form: NAME.into(),
            n,
            m,
            beta: self.beta,
            delta: self.delta,
            x_hat: vec_l(&self.l_hat).as_slice().to_vec(),
            p: Some(self.p.as_slice().to_vec()),
            s_dense: None,
            last_epsilon: self.last_eps.as_ref().map(|e| e.as_slice().to_vec()),
        }
    }
}
