//! Bounded-variable least squares: min |L b - z|^2 subject to lower <= b <=
//! upper, by a primal active-set method. The worst KKT violator enters the
//! free set; ties in the entering and leaving choices break toward the
//! lowest index, which keeps runs deterministic and avoids cycling.
//! Equality-constrained subproblems use minimum-norm solutions, so
//! rank-deficient L degrades gracefully (the minimizer set is then not a
//! single point and the returned point is pivot-order dependent).

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxBounds {
    /// The actuator operating box: zeros to ones.
    pub fn unit(m: usize) -> Self {
        BoxBounds {
            lower: DVector::zeros(m),
            upper: DVector::from_element(m, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::Dimension {
                context: "box bounds".into(),
                expected: self.lower.len(),
                got: self.upper.len(),
            });
        }
        for i in 0..self.lower.len() {
            if self.lower[i].is_nan() || self.upper[i].is_nan() || self.lower[i] > self.upper[i] {
                return Err(Error::OutOfRange {
                    context: format!("bounds[{i}]"),
                    value: self.lower[i],
                    lo: f64::NEG_INFINITY,
                    hi: self.upper[i],
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BvlsSolution {
    pub b_star: DVector<f64>,
    /// Squared residual norm |L b_star - z|^2.
    pub objective: f64,
    pub active_lower: Vec<usize>,
    pub active_upper: Vec<usize>,
    /// Worst KKT violation at b_star, in gradient units.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const DEFAULT_TOL: f64 = 1e-10;

pub fn default_max_iter(m: usize) -> usize {
    10 * m.max(1)
}

#[derive(Clone, Copy, PartialEq)]
enum VarState {
    AtLower,
    AtUpper,
    Free,
}

/// Gradient of the objective at b: 2 L'(L b - z).
fn gradient(l: &DMatrix<f64>, z: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    2.0 * l.transpose() * (l * b - z)
}

/// Worst KKT violation: free entries need |g| small, entries at the lower
/// bound need g >= 0, entries at the upper bound need g <= 0. A variable
/// pinned by equal bounds sits at both bounds at once, so any gradient
/// sign is consistent there.
fn kkt_violation(g: &DVector<f64>, state: &[VarState], bounds: &BoxBounds) -> f64 {
    let mut worst = 0.0f64;
    for (i, &st) in state.iter().enumerate() {
        if bounds.lower[i] == bounds.upper[i] {
            continue;
        }
        let v = match st {
            VarState::Free => g[i].abs(),
            VarState::AtLower => (-g[i]).max(0.0),
            VarState::AtUpper => g[i].max(0.0),
        };
        worst = worst.max(v);
    }
    worst
}

fn infinity_norm(l: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..l.nrows() {
        let row_sum: f64 = l.row(i).iter().map(|v| v.abs()).sum();
        worst = worst.max(row_sum);
    }
    worst
}

/// Least squares for the free columns, the bound columns fixed. Full-rank
/// subproblems go through the normal equations; the minimum-norm SVD route
/// is the fallback when the Gram factorization breaks down.
fn solve_free(
    l: &DMatrix<f64>,
    z: &DVector<f64>,
    b: &DVector<f64>,
    free: &[usize],
    state: &[VarState],
) -> Result<DVector<f64>> {
    let mut rhs = z.clone();
    for (i, &st) in state.iter().enumerate() {
        if st != VarState::Free && b[i] != 0.0 {
            rhs -= l.column(i) * b[i];
        }
    }
    let l_free = l.select_columns(free.iter());
    let gram = l_free.transpose() * &l_free;
    if let Some(chol) = gram.cholesky() {
        return Ok(chol.solve(&(l_free.transpose() * &rhs)));
    }
    let svd = l_free.svd(true, true);
    let eps = svd.singular_values.max() * l.nrows().max(free.len()) as f64 * f64::EPSILON;
    svd.solve(&rhs, eps)
        .map(|m| DVector::from_column_slice(m.as_slice()))
        .map_err(|msg| Error::Numerical {
            context: "bvls subproblem".into(),
            message: msg.into(),
        })
}

/// Active-set solve of min |L b - z|^2 over the box. KKT thresholds are
/// tol * (2 |L|_inf |z|_2 + 1) so the stopping rule tracks problem scaling.
pub fn solve(
    l: &DMatrix<f64>,
    z: &DVector<f64>,
    bounds: &BoxBounds,
    tol: f64,
    max_iter: usize,
) -> Result<BvlsSolution> {
    let m = l.ncols();
    if z.len() != l.nrows() {
        return Err(Error::Dimension {
            context: "bvls target".into(),
            expected: l.nrows(),
            got: z.len(),
        });
    }
    if bounds.lower.len() != m {
        return Err(Error::Dimension {
            context: "bvls bounds".into(),
            expected: m,
            got: bounds.lower.len(),
        });
    }
    bounds.validate()?;
    if !tol.is_finite() || tol <= 0.0 {
        return Err(Error::OutOfRange {
            context: "bvls tol".into(),
            value: tol,
            lo: f64::MIN_POSITIVE,
            hi: f64::INFINITY,
        });
    }
    if l.iter().any(|v| !v.is_finite()) || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            context: "bvls inputs".into(),
            message: "non-finite entries".into(),
        });
    }

    let tol_abs = tol * (2.0 * infinity_norm(l) * z.norm() + 1.0);
    let mut state = vec![VarState::AtLower; m];
    let mut b = bounds.lower.clone();
    // entering candidates that immediately bounced back; cleared on progress
    let mut banned = vec![false; m];
    let mut iterations = 0usize;
    let mut converged = false;

    while iterations < max_iter {
        let g = gradient(l, z, &b);
        if kkt_violation(&g, &state, bounds) <= tol_abs {
            converged = true;
            break;
        }
        // bound variable whose gradient pushes hardest into the interior;
        // ties break toward the lowest index
        let mut entering = None;
        let mut worst = tol_abs;
        for i in 0..m {
            if banned[i] || bounds.upper[i] <= bounds.lower[i] {
                continue;
            }
            let v = match state[i] {
                VarState::AtLower => -g[i],
                VarState::AtUpper => g[i],
                VarState::Free => continue,
            };
            if v > worst {
                worst = v;
                entering = Some(i);
            }
        }
        let Some(entering) = entering else {
            // every remaining violation is on a banned or fixed variable
            break;
        };
        iterations += 1;
        state[entering] = VarState::Free;

        // re-solve on the free set, binding blockers until feasible
        let mut made_progress = false;
        loop {
            let free: Vec<usize> = (0..m).filter(|&i| state[i] == VarState::Free).collect();
            if free.is_empty() {
                break;
            }
            let b_free = solve_free(l, z, &b, &free, &state)?;
            let feasible = free
                .iter()
                .enumerate()
                .all(|(fi, &i)| b_free[fi] >= bounds.lower[i] && b_free[fi] <= bounds.upper[i]);
            if feasible {
                for (fi, &i) in free.iter().enumerate() {
                    b[i] = b_free[fi];
                }
                made_progress = true;
                break;
            }
            // largest feasible step toward the subproblem minimizer
            let mut alpha = 1.0f64;
            let mut leaving: Option<(usize, VarState)> = None;
            for (fi, &i) in free.iter().enumerate() {
                let target = b_free[fi];
                let (bound, side) = if target < bounds.lower[i] {
                    (bounds.lower[i], VarState::AtLower)
                } else if target > bounds.upper[i] {
                    (bounds.upper[i], VarState::AtUpper)
                } else {
                    continue;
                };
                let dir = target - b[i];
                let step = if dir.abs() > 0.0 { (bound - b[i]) / dir } else { 0.0 };
                if step < alpha {
                    alpha = step.max(0.0);
                    leaving = Some((i, side));
                }
            }
            let Some((leave_idx, side)) = leaving else {
                break; // cannot happen with a consistent feasibility check
            };
            if alpha > 0.0 {
                for (fi, &i) in free.iter().enumerate() {
                    b[i] += alpha * (b_free[fi] - b[i]);
                }
                made_progress = true;
            }
            b[leave_idx] = match side {
                VarState::AtLower => bounds.lower[leave_idx],
                VarState::AtUpper => bounds.upper[leave_idx],
                VarState::Free => unreachable!(),
            };
            state[leave_idx] = side;
        }
        if made_progress {
            banned.iter_mut().for_each(|f| *f = false);
        } else {
            banned[entering] = true;
        }
    }

    // exact projection, then classify and certify
    for i in 0..m {
        b[i] = b[i].clamp(bounds.lower[i], bounds.upper[i]);
        if state[i] != VarState::Free {
            b[i] = match state[i] {
                VarState::AtLower => bounds.lower[i],
                VarState::AtUpper => bounds.upper[i],
                VarState::Free => unreachable!(),
            };
        }
    }
    let g = gradient(l, z, &b);
    let kkt_residual = kkt_violation(&g, &state, bounds);
    if !converged {
        converged = kkt_residual <= tol_abs;
    }
    let residual = l * &b - z;
    Ok(BvlsSolution {
        active_lower: (0..m).filter(|&i| state[i] == VarState::AtLower).collect(),
        active_upper: (0..m).filter(|&i| state[i] == VarState::AtUpper).collect(),
        b_star: b,
        objective: residual.norm_squared(),
        kkt_residual,
        iterations,
        converged,
    })
}

/// Inverts the lift: u_i = b_i^(1/theta).
pub fn voltages_from_b(b: &DVector<f64>, theta_assumed: f64) -> Result<DVector<f64>> {
    if !theta_assumed.is_finite() || theta_assumed <= 0.0 {
        return Err(Error::OutOfRange {
            context: "theta_assumed".into(),
            value: theta_assumed,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    for (i, &v) in b.iter().enumerate() {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::OutOfRange {
                context: format!("lifted input b[{i}]"),
                value: v,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
    }
    Ok(b.map(|v| v.powf(1.0 / theta_assumed)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn solve_unit(l: &DMatrix<f64>, z: &DVector<f64>) -> BvlsSolution {
        solve(l, z, &BoxBounds::unit(l.ncols()), DEFAULT_TOL, default_max_iter(l.ncols())).unwrap()
    }

    /// Enumerates all lower/upper/free patterns, solves each restricted
    /// problem, and returns the feasible KKT-consistent minimum.
    fn brute_force(l: &DMatrix<f64>, z: &DVector<f64>, bounds: &BoxBounds) -> DVector<f64> {
        let m = l.ncols();
        let mut best: Option<(f64, DVector<f64>)> = None;
        let patterns = 3usize.pow(m as u32);
        for code in 0..patterns {
            let mut c = code;
            let mut state = Vec::with_capacity(m);
            for _ in 0..m {
                state.push(c % 3);
                c /= 3;
            }
            let mut b = DVector::zeros(m);
            let mut free = Vec::new();
            for i in 0..m {
                match state[i] {
                    0 => b[i] = bounds.lower[i],
                    1 => b[i] = bounds.upper[i],
                    _ => free.push(i),
                }
            }
            if !free.is_empty() {
                let mut rhs = z.clone();
                for i in 0..m {
                    if state[i] != 2 && b[i] != 0.0 {
                        rhs -= l.column(i) * b[i];
                    }
                }
                let l_free = l.select_columns(free.iter());
                let svd = l_free.svd(true, true);
                let eps = svd.singular_values.max() * l.nrows().max(free.len()) as f64 * 1e-13;
                let Ok(sol) = svd.solve(&rhs, eps) else { continue };
                let mut ok = true;
                for (fi, &i) in free.iter().enumerate() {
                    let v = sol[(fi, 0)];
                    if v < bounds.lower[i] - 1e-12 || v > bounds.upper[i] + 1e-12 {
                        ok = false;
                        break;
                    }
                    b[i] = v.clamp(bounds.lower[i], bounds.upper[i]);
                }
                if !ok {
                    continue;
                }
            }
            let obj = (l * &b - z).norm_squared();
            if best.as_ref().is_none_or(|(o, _)| obj < o - 1e-14) {
                best = Some((obj, b));
            }
        }
        best.expect("all-bound patterns are always feasible").1
    }

    #[test]
    fn zero_target_stays_at_zero() {
        let l = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let sol = solve_unit(&l, &DVector::zeros(2));
        assert_eq!(sol.b_star, DVector::zeros(3));
        assert_eq!(sol.objective, 0.0);
        assert!(sol.converged);
    }

    #[test]
    fn scalar_clipping_at_upper_bound() {
        let l = DMatrix::from_row_slice(1, 1, &[2.0]);
        let z = DVector::from_vec(vec![10.0]);
        let sol = solve_unit(&l, &z);
        assert_eq!(sol.b_star[0], 1.0);
        assert!((sol.objective - 64.0).abs() < 1e-12);
        assert_eq!(sol.active_upper, vec![0]);
        assert!(sol.converged);
    }

    #[test]
    fn interior_solution_matches_unconstrained() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let z = DVector::from_vec(vec![0.3, 0.7]);
        let sol = solve_unit(&l, &z);
        assert!((sol.b_star[0] - 0.3).abs() < 1e-12);
        assert!((sol.b_star[1] - 0.7).abs() < 1e-12);
        assert!(sol.active_lower.is_empty() && sol.active_upper.is_empty());
    }

    #[test]
    fn random_instances_match_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let entry = Uniform::new(-1.0f64, 1.0).unwrap();
        let target = Uniform::new(-2.0f64, 2.0).unwrap();
        for case in 0..200 {
            let n = 3 + case % 3;
            let m = 3;
            let l = DMatrix::from_fn(n, m, |_, _| entry.sample(&mut rng));
            let z = DVector::from_fn(n, |_, _| target.sample(&mut rng));
            let bounds = BoxBounds::unit(m);
            let sol = solve(&l, &z, &bounds, DEFAULT_TOL, default_max_iter(m)).unwrap();
            assert!(sol.converged, "case {case} failed to converge");
            let oracle = brute_force(&l, &z, &bounds);
            let gap = (&sol.b_star - &oracle).amax();
            assert!(gap < 1e-9, "case {case}: gap {gap}");
        }
    }

    #[test]
    fn output_is_feasible_even_for_hostile_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let entry = Uniform::new(-1.0f64, 1.0).unwrap();
        for _ in 0..50 {
            let l = DMatrix::from_fn(4, 6, |_, _| entry.sample(&mut rng));
            let z = DVector::from_fn(4, |_, _| 100.0 * entry.sample(&mut rng));
            let sol = solve_unit(&l, &z);
            for i in 0..6 {
                assert!((0.0..=1.0).contains(&sol.b_star[i]));
            }
        }
    }

    #[test]
    fn objective_dominates_clipped_pseudoinverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let entry = Uniform::new(-1.0f64, 1.0).unwrap();
        for _ in 0..50 {
            let l = DMatrix::from_fn(5, 3, |_, _| entry.sample(&mut rng));
            let z = DVector::from_fn(5, |_, _| 2.0 * entry.sample(&mut rng));
            let sol = solve_unit(&l, &z);
            let pinv_sol = l
                .clone()
                .svd(true, true)
                .solve(&z, 1e-13)
                .map(|m| DVector::from_column_slice(m.as_slice()))
                .unwrap();
            let clipped = pinv_sol.map(|v| v.clamp(0.0, 1.0));
            let clipped_obj = (&l * clipped - &z).norm_squared();
            assert!(sol.objective <= clipped_obj + 1e-12);
        }
    }

    #[test]
    fn tight_bounds_pin_variables() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]);
        let z = DVector::from_vec(vec![5.0, 5.0]);
        let bounds = BoxBounds {
            lower: DVector::from_vec(vec![0.25, 0.25]),
            upper: DVector::from_vec(vec![0.25, 0.75]),
        };
        let sol = solve(&l, &z, &bounds, DEFAULT_TOL, 40).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.b_star[0], 0.25);
        // second variable: minimize (5 - 0.25 - b)^2 + (5 - 0.25 + b)^2 over [0.25, 0.75]
        // gradient zero at b = 0, so the lower bound binds
        assert_eq!(sol.b_star[1], 0.25);
    }

    #[test]
    fn inverted_bounds_rejected() {
        let bounds = BoxBounds {
            lower: DVector::from_vec(vec![1.0]),
            upper: DVector::from_vec(vec![0.0]),
        };
        let l = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(solve(&l, &DVector::zeros(1), &bounds, DEFAULT_TOL, 10).is_err());
    }

    #[test]
    fn voltages_invert_the_lift() {
        let theta = 1.742;
        let b = DVector::from_vec(vec![0.0, 0.5, 1.0]);
        let u = voltages_from_b(&b, theta).unwrap();
        assert_eq!(u[0], 0.0);
        assert_eq!(u[2], 1.0);
        assert!((u[1] - 0.5f64.powf(1.0 / theta)).abs() < 1e-15);
        assert!((u[1] - 0.6717).abs() < 1e-4);

        let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        for &v in &grid {
            let lifted = DVector::from_vec(vec![v.powf(theta)]);
            let back = voltages_from_b(&lifted, theta).unwrap();
            assert!((back[0] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_lift_rejected() {
        let b = DVector::from_vec(vec![-0.1]);
        assert!(voltages_from_b(&b, 1.742).is_err());
    }
}
