//! Frozen estimator: keeps the initial estimate forever. Baseline
//! comparator for the adaptive variants; still reports the model error of
//! each observation so runs log on the same schema.

use super::{check_rls_params, vec_l, EstimatorSnapshot, InfluenceEstimator};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

pub(super) const NAME: &str = "frozen";

#[derive(Debug, Clone)]
pub struct FrozenEstimator {
    beta: f64,
    delta: f64,
    l_hat: DMatrix<f64>,
    last_eps: Option<DVector<f64>>,
}

impl FrozenEstimator {
    pub fn new(l0: DMatrix<f64>, delta: f64, beta: f64) -> Result<Self> {
        check_rls_params(delta, beta)?;
        Ok(FrozenEstimator {
            beta,
            delta,
            l_hat: l0,
            last_eps: None,
        })
    }

    pub(super) fn from_snapshot(snap: &EstimatorSnapshot) -> Result<Self> {
        check_rls_params(snap.delta, snap.beta)?;
        if snap.x_hat.len() != snap.n * snap.m {
            return Err(Error::Dimension {
                context: "frozen snapshot".into(),
                expected: snap.n * snap.m,
                got: snap.x_hat.len(),
            });
        }
        Ok(FrozenEstimator {
            beta: snap.beta,
            delta: snap.delta,
            l_hat: DMatrix::from_column_slice(snap.n, snap.m, &snap.x_hat),
            last_eps: snap.last_epsilon.as_ref().map(|e| DVector::from_column_slice(e)),
        })
    }
}

impl InfluenceEstimator for FrozenEstimator {
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
                context: "frozen update".into(),
                expected: m,
                got: b.len(),
            });
        }
        self.last_eps = Some(z_next - &self.l_hat * b);
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
            p: None,
            s_dense: None,
            last_epsilon: self.last_eps.as_ref().map(|e| e.as_slice().to_vec()),
        }
    }
}
