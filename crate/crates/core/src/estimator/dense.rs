//! Dense recursive least squares over the vectorized influence matrix.
//! Reference implementation: materializes H = b' kron I and the full
//! (n*m) x (n*m) gain matrix S. Cost per update is O((n*m)^2), so this form
//! is for cross-checking and small problems; the factored form carries the
//! same state in O(m^2 + n*m).

use super::{check_rls_params, unvec_l, vec_l, EstimatorSnapshot, InfluenceEstimator};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

pub(super) const NAME: &str = "dense";

#[derive(Debug, Clone)]
pub struct DenseRls {
    n: usize,
    m: usize,
    beta: f64,
    delta: f64,
    x_hat: DVector<f64>,
    s: DMatrix<f64>,
    last_eps: Option<DVector<f64>>,
}

impl DenseRls {
    pub fn new(l0: DMatrix<f64>, delta: f64, beta: f64) -> Result<Self> {
        check_rls_params(delta, beta)?;
        let (n, m) = l0.shape();
        let nm = n * m;
        Ok(DenseRls {
            n,
            m,
            beta,
            delta,
            x_hat: vec_l(&l0),
            s: DMatrix::identity(nm, nm) * delta,
            last_eps: None,
        })
    }

    pub(super) fn from_snapshot(snap: &EstimatorSnapshot) -> Result<Self> {
        check_rls_params(snap.delta, snap.beta)?;
        let nm = snap.n * snap.m;
        let s_raw = snap.s_dense.as_ref().ok_or_else(|| Error::Parse {
            path: "estimator snapshot".into(),
            line: 0,
            message: "dense form requires the s_dense field".into(),
        })?;
        if snap.x_hat.len() != nm || s_raw.len() != nm * nm {
            return Err(Error::Dimension {
                context: "dense snapshot".into(),
                expected: nm,
                got: snap.x_hat.len(),
            });
        }
        Ok(DenseRls {
            n: snap.n,
            m: snap.m,
            beta: snap.beta,
            delta: snap.delta,
            x_hat: DVector::from_column_slice(&snap.x_hat),
            s: DMatrix::from_column_slice(nm, nm, s_raw),
            last_eps: snap.last_epsilon.as_ref().map(|e| DVector::from_column_slice(e)),
        })
    }

    /// The full gain matrix; exposed for equivalence tests.
    pub fn s_matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn x_hat(&self) -> &DVector<f64> {
        &self.x_hat
    }
}

impl InfluenceEstimator for DenseRls {
    fn name(&self) -> &'static str {
        NAME
    }

    fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    fn current_l(&self) -> DMatrix<f64> {
        unvec_l(&self.x_hat, self.n, self.m)
    }

    fn update(&mut self, b: &DVector<f64>, z_next: &DVector<f64>) -> Result<()> {
        let (n, m) = (self.n, self.m);
        if b.len() != m || z_next.len() != n {
            return Err(Error::Dimension {
                context: "rls update".into(),
                expected: m,
                got: b.len(),
            });
        }
        // H = b' kron I_n, shape n x (n*m)
        let h = b.transpose().kronecker(&DMatrix::<f64>::identity(n, n));
        let sht = &self.s * h.transpose();
        let a = DMatrix::identity(n, n) * self.beta + &h * &sht;
        let chol = a.cholesky().ok_or_else(|| Error::Numerical {
            context: "dense rls update".into(),
            message: "innovation matrix lost positive definiteness".into(),
        })?;
        // F = S H' (beta I + H S H')^-1
        let f = chol.solve(&sht.transpose()).transpose();
        let eps = z_next - self.current_l() * b;
        self.x_hat += &f * &eps;
        self.s = (&self.s - &f * h * &self.s) / self.beta;
        // symmetrize against round-off drift
        self.s = (&self.s + self.s.transpose()) * 0.5;
        self.last_eps = Some(eps);
        Ok(())
    }

    fn last_epsilon(&self) -> Option<&DVector<f64>> {
        self.last_eps.as_ref()
    }

    fn snapshot(&self) -> EstimatorSnapshot {
        EstimatorSnapshot {
            form: NAME.into(),
            n: self.n,
            m: self.m,
            beta: self.beta,
            delta: self.delta,
            x_hat: self.x_hat.as_slice().to_vec(),
            p: None,
            s_dense: Some(self.s.as_slice().to_vec()),
            last_epsilon: self.last_eps.as_ref().map(|e| e.as_slice().to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn random_l(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Uniform::new(-1.0f64, 1.0).unwrap();
        DMatrix::from_fn(n, m, |_, _| d.sample(&mut rng))
    }

    #[test]
    fn initial_state_is_prior_and_scaled_identity() {
        let l0 = random_l(3, 2, 1);
        let est = DenseRls::new(l0.clone(), 1e-2, 0.98).unwrap();
        assert_eq!(est.current_l(), l0);
        let s = est.s_matrix();
        assert_eq!(s.shape(), (6, 6));
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1e-2 } else { 0.0 };
                assert_eq!(s[(i, j)], want);
            }
        }
    }

    #[test]
    fn zero_error_observation_leaves_estimate_unchanged() {
        let l0 = random_l(4, 3, 2);
        let mut est = DenseRls::new(l0.clone(), 0.5, 0.98).unwrap();
        let b = DVector::from_vec(vec![0.3, 0.8, 0.1]);
        let z = &l0 * &b; // prediction equals observation
        let s_before = est.s_matrix().clone();
        est.update(&b, &z).unwrap();
        assert_eq!(est.current_l(), l0);
        assert!(est.last_epsilon().unwrap().norm() == 0.0);
        assert_ne!(est.s_matrix(), &s_before); // S still contracts
    }

    #[test]
    fn zero_input_at_beta_one_is_a_no_op() {
        let l0 = random_l(3, 2, 3);
        let mut est = DenseRls::new(l0.clone(), 1e-2, 1.0).unwrap();
        let s_before = est.s_matrix().clone();
        let b = DVector::zeros(2);
        let z = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        est.update(&b, &z).unwrap();
        assert_eq!(est.current_l(), l0);
        assert_eq!(est.s_matrix(), &s_before);
    }

    #[test]
    fn epsilon_is_pre_update_prediction_error() {
        let l0 = random_l(5, 4, 4);
        let mut est = DenseRls::new(l0, 1e-1, 0.97).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = Uniform::new(0.0f64, 1.0).unwrap();
        for _ in 0..8 {
            let b = DVector::from_fn(4, |_, _| d.sample(&mut rng));
            let z = DVector::from_fn(5, |_, _| d.sample(&mut rng));
            let expected = &z - est.current_l() * &b;
            est.update(&b, &z).unwrap();
            assert_eq!(est.last_epsilon().unwrap(), &expected);
        }
    }

    #[test]
    fn beta_one_matches_regularized_batch_solution() {
        // RLS with no forgetting solves
        //   min (1/delta) |x - x0|^2 + sum_j |z_j - H_j x|^2
        // so the recursion must land on the normal-equations solution.
        let n = 6;
        let m = 4;
        let steps = 25;
        let delta = 3e-2;
        let l0 = random_l(n, m, 5);
        let x0 = vec_l(&l0);
        let mut est = DenseRls::new(l0, delta, 1.0).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let d = Uniform::new(-1.0f64, 1.0).unwrap();
        let nm = n * m;
        let mut gram = DMatrix::<f64>::identity(nm, nm) / delta;
        let mut rhs = &x0 / delta;
        let eye = DMatrix::<f64>::identity(n, n);
        for _ in 0..steps {
            let b = DVector::from_fn(m, |_, _| d.sample(&mut rng));
            let z = DVector::from_fn(n, |_, _| d.sample(&mut rng));
            let h = b.transpose().kronecker(&eye);
            gram += h.transpose() * &h;
            rhs += h.transpose() * &z;
            est.update(&b, &z).unwrap();
        }
        let x_batch = gram.cholesky().unwrap().solve(&rhs);
        let rel = (est.x_hat() - &x_batch).norm() / x_batch.norm();
        assert!(rel < 1e-8, "relative gap {rel}");
    }
}
