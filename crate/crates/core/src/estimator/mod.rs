//! Influence-matrix estimators behind a common trait: a dense
//! reference implementation of recursive least squares, a Kronecker-factored
//! fast path, and a frozen variant for baseline comparisons. Variants are
//! registered by name so the harness can select one at runtime.

mod dense;
mod factored;
mod frozen;
mod init;

pub use dense::DenseRls;
pub use factored::FactoredRls;
pub use frozen::FrozenEstimator;
pub use init::{batch_init, generate_probes, InitReport, ProbeDataset, DEFAULT_CONDITION_CAP};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Column-stacked vectorization of an n x m matrix.
pub fn vec_l(l: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(l.as_slice())
}

/// Inverse of `vec_l`.
pub fn unvec_l(x: &DVector<f64>, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, m, x.as_slice())
}

/// Online influence-matrix estimator. Updates are strictly sequential;
/// the state owns its matrices and may be moved across threads.
pub trait InfluenceEstimator: Send {
    /// Registry name of the variant.
    fn name(&self) -> &'static str;

    /// (n, m): coefficient length and actuator count.
    fn dims(&self) -> (usize, usize);

    /// Current estimate of the influence matrix.
    fn current_l(&self) -> DMatrix<f64>;

    /// Processes one (lifted input, next observation) pair.
    fn update(&mut self, b: &DVector<f64>, z_next: &DVector<f64>) -> Result<()>;

    /// Model error of the most recent update: z_next minus the prediction
    /// of the estimate held before that update.
    fn last_epsilon(&self) -> Option<&DVector<f64>>;

    /// Serializable state for checkpoint and resume.
    fn snapshot(&self) -> EstimatorSnapshot;
}

/// On-disk estimator state. All scalars plus the vectorized estimate and
/// whichever gain matrix the form carries (P for factored, S for dense).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSnapshot {
    pub form: String,
    pub n: usize,
    pub m: usize,
    pub beta: f64,
    pub delta: f64,
    /// vec(L_hat), column-stacked, length n*m.
    pub x_hat: Vec<f64>,
    /// m*m column-major (factored form only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    /// (n*m)^2 column-major (dense form only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_dense: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_epsilon: Option<Vec<f64>>,
}

impl EstimatorSnapshot {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| Error::Artifact {
            path: path.into(),
            message: e.to_string(),
        })?;
        crate::grid::write_atomic(path, &bytes)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.into(),
            line: 0,
            message: e.to_string(),
        })
    }

    /// Reconstructs a live estimator from the stored state.
    pub fn restore(&self) -> Result<Box<dyn InfluenceEstimator>> {
        match self.form.as_str() {
            dense::NAME => Ok(Box::new(DenseRls::from_snapshot(self)?)),
            factored::NAME => Ok(Box::new(FactoredRls::from_snapshot(self)?)),
            frozen::NAME => Ok(Box::new(FrozenEstimator::from_snapshot(self)?)),
            other => Err(Error::UnknownEstimator(other.into(), known_names().join(", "))),
        }
    }
}

fn check_rls_params(delta: f64, beta: f64) -> Result<()> {
    if !delta.is_finite() || delta <= 0.0 {
        return Err(Error::OutOfRange {
            context: "delta".into(),
            value: delta,
            lo: f64::MIN_POSITIVE,
            hi: f64::INFINITY,
        });
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::OutOfRange {
            context: "beta".into(),
            value: beta,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(())
}

/// Constructor signature shared by all registered variants.
pub type EstimatorFactory = fn(l0: &DMatrix<f64>, delta: f64, beta: f64) -> Result<Box<dyn InfluenceEstimator>>;

/// Name-to-constructor table. The built-in set covers the dense reference,
/// the factored fast path, and the frozen baseline; callers may register
/// further variants under new names.
pub struct EstimatorRegistry {
    entries: Vec<(&'static str, EstimatorFactory)>,
}

impl EstimatorRegistry {
    pub fn with_builtin() -> Self {
        let mut reg = EstimatorRegistry { entries: Vec::new() };
        reg.register(dense::NAME, |l0, delta, beta| {
            Ok(Box::new(DenseRls::new(l0.clone(), delta, beta)?))
        });
        reg.register(factored::NAME, |l0, delta, beta| {
            Ok(Box::new(FactoredRls::new(l0.clone(), delta, beta)?))
        });
        reg.register(frozen::NAME, |l0, delta, beta| {
            Ok(Box::new(FrozenEstimator::new(l0.clone(), delta, beta)?))
        });
        reg
    }

    pub fn register(&mut self, name: &'static str, factory: EstimatorFactory) {
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = factory;
        } else {
            self.entries.push((name, factory));
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn create(
        &self,
        name: &str,
        l0: &DMatrix<f64>,
        delta: f64,
        beta: f64,
    ) -> Result<Box<dyn InfluenceEstimator>> {
        match self.entries.iter().find(|(n, _)| *n == name) {
            Some((_, factory)) => factory(l0, delta, beta),
            None => Err(Error::UnknownEstimator(name.into(), self.names().join(", "))),
        }
    }
}

fn known_names() -> Vec<&'static str> {
    vec![dense::NAME, factored::NAME, frozen::NAME]
}
