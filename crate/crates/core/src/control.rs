//! Iterative shaping loop: apply the current control, observe, update the
//! influence estimate, re-solve the bounded least-squares problem, repeat.
//! Every iteration is recorded; the best iterate is the one with the lowest
//! central RMS error, ties broken toward the earliest iteration.
//!
//! Shape metrics compare basis reconstructions: the produced surface is
//! re-synthesized from the observed coefficients before differencing with
//! the desired surface, so the error measures what the controller can see
//! and act on. Raw plant surfaces carry out-of-basis bump detail that no
//! basis-space controller could remove.

use crate::bvls::{self, BoxBounds, BvlsSolution};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorSnapshot, InfluenceEstimator};
use crate::grid::{ApertureGrid, SurfaceMap};
use crate::plant::Plant;
use crate::zernike::{nm_to_noll, ZernikeBasis, ZernikeCoeffs};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Desired shape in coefficient space.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetShape {
    pub z_d: ZernikeCoeffs,
    pub description: String,
}

impl TargetShape {
    /// Single-mode target scaled to a requested peak-to-valley and lifted by
    /// a piston offset. The mode is named by (radial degree, azimuthal
    /// frequency); the piston coefficient is in micrometers directly.
    pub fn from_mode(
        basis: &ZernikeBasis,
        radial_n: usize,
        azimuthal_m: i32,
        pv_um: f64,
        piston_um: f64,
    ) -> Result<Self> {
        let j = nm_to_noll(radial_n, azimuthal_m)?;
        if j > basis.n_modes() {
            return Err(Error::Config {
                path: "target.mode".into(),
                message: format!(
                    "mode Z{radial_n}^{azimuthal_m} is basis column {j}, but only {} modes are available",
                    basis.n_modes()
                ),
            });
        }
        if !pv_um.is_finite() || pv_um <= 0.0 {
            return Err(Error::Config {
                path: "target.pv_um".into(),
                message: "requested peak-to-valley must be positive".into(),
            });
        }
        let mut unit = DVector::zeros(basis.n_modes());
        unit[j - 1] = 1.0;
        let pv_unit = basis.synthesize(&unit)?.peak_to_valley()?;
        if pv_unit <= 0.0 {
            return Err(Error::Numerical {
                context: "target construction".into(),
                message: format!("mode Z{radial_n}^{azimuthal_m} is flat on this grid"),
            });
        }
        let mut z_d = unit * (pv_um / pv_unit);
        z_d[0] += piston_um;
        Ok(TargetShape {
            z_d,
            description: format!("Z{radial_n}^{azimuthal_m} scaled to P-V {pv_um} um, piston {piston_um} um"),
        })
    }

    pub fn zero(n_modes: usize) -> Self {
        TargetShape {
            z_d: DVector::zeros(n_modes),
            description: "flat zero".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub iterations: usize,
    pub beta: f64,
    pub delta: f64,
    /// Registry name of the estimator variant driving the loop.
    pub estimator: String,
    pub crop_fraction: f64,
    pub record_checkpoints: bool,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config {
                path: "control.iterations".into(),
                message: "must be at least 1".into(),
            });
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config {
                path: "control.crop_fraction".into(),
                message: format!("{} is outside (0, 1]", self.crop_fraction),
            });
        }
        Ok(())
    }
}

/// Solver summary logged with each iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvlsDiag {
    pub iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    pub objective: f64,
    pub active_lower: usize,
    pub active_upper: usize,
}

impl From<&BvlsSolution> for BvlsDiag {
    fn from(s: &BvlsSolution) -> Self {
        BvlsDiag {
            iterations: s.iterations,
            kkt_residual: s.kkt_residual,
            converged: s.converged,
            objective: s.objective,
            active_lower: s.active_lower.len(),
            active_upper: s.active_upper.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: usize,
    pub u: DVector<f64>,
    pub epsilon_norm: f64,
    pub rms_global: f64,
    pub rms_central: f64,
    pub pv_produced: f64,
    /// Summary of the solve that chose the control applied at this k.
    pub bvls: BvlsDiag,
}

/// Resumable state written when `record_checkpoints` is set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub k: usize,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
    pub z_next: Vec<f64>,
    pub estimator: EstimatorSnapshot,
}

pub struct LoopOutput {
    pub records: Vec<IterationRecord>,
    pub best_index: usize,
    /// Observed coefficients z_{k+1}, one entry per iteration.
    pub z_history: Vec<ZernikeCoeffs>,
    pub checkpoints: Vec<Checkpoint>,
    pub final_snapshot: EstimatorSnapshot,
}

/// RMS of produced-minus-desired heights over the aperture, and over the
/// central disk of radius crop_fraction times the aperture radius.
pub fn rms_error(
    grid: &ApertureGrid,
    produced: &SurfaceMap,
    desired: &SurfaceMap,
    crop_fraction: f64,
) -> Result<(f64, f64)> {
    if produced.heights_um.len() != grid.n_pixels() || desired.heights_um.len() != grid.n_pixels() {
        return Err(Error::Dimension {
            context: "rms_error surfaces".into(),
            expected: grid.n_pixels(),
            got: produced.heights_um.len(),
        });
    }
    if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
        return Err(Error::OutOfRange {
            context: "crop_fraction".into(),
            value: crop_fraction,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let central_radius = crop_fraction * grid.diameter_px / 2.0;
    let mut sum_global = 0.0;
    let mut count_global = 0usize;
    let mut sum_central = 0.0;
    let mut count_central = 0usize;
    for row in 0..grid.height_px {
        for col in 0..grid.width_px {
            if !grid.in_aperture(row, col) {
                continue;
            }
            let i = row * grid.width_px + col;
            let d = produced.heights_um[i] - desired.heights_um[i];
            sum_global += d * d;
            count_global += 1;
            if grid.radius_px(row, col) <= central_radius {
                sum_central += d * d;
                count_central += 1;
            }
        }
    }
    if count_global == 0 {
        return Err(Error::EmptyMask);
    }
    if count_central == 0 {
        return Err(Error::Numerical {
            context: "rms_error".into(),
            message: format!("no pixels within crop_fraction {crop_fraction}"),
        });
    }
    Ok((
        (sum_global / count_global as f64).sqrt(),
        (sum_central / count_central as f64).sqrt(),
    ))
}

/// Runs the loop for `cfg.iterations` steps starting from the control b0
/// (already solved against the initial estimate). `init_diag` is the solver
/// summary of that initial solve; `k_offset` is the plant iteration at which
/// the loop starts (probe excitation consumed the earlier indices).
#[allow(clippy::too_many_arguments)]
pub fn run_loop(
    plant: &Plant,
    basis: &ZernikeBasis,
    target: &TargetShape,
    mut estimator: Box<dyn InfluenceEstimator>,
    b0: DVector<f64>,
    init_diag: BvlsDiag,
    cfg: &LoopConfig,
    theta_assumed: f64,
    k_offset: usize,
) -> Result<LoopOutput> {
    cfg.validate()?;
    let (n, m) = estimator.dims();
    if n != basis.n_modes() || m != plant.actuator_count() || target.z_d.len() != n {
        return Err(Error::Dimension {
            context: "run_loop component shapes".into(),
            expected: basis.n_modes(),
            got: n,
        });
    }
    let desired = basis.synthesize(&target.z_d)?;
    let bounds = BoxBounds::unit(m);
    let bvls_max_iter = bvls::default_max_iter(m);

    let mut b_hat = b0;
    let mut diag = init_diag;
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut z_history = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();

    for k in 0..cfg.iterations {
        let u = bvls::voltages_from_b(&b_hat, theta_assumed)?;
        let surface = plant
            .actuate(&u, k_offset + k)
            .map_err(|e| e.with_iteration(k))?;
        let z_next = basis.fit(&surface).map_err(|e| e.with_iteration(k))?;
        estimator.update(&b_hat, &z_next).map_err(|e| e.with_iteration(k))?;

        let produced = basis.synthesize(&z_next)?;
        let (rms_global, rms_central) = rms_error(plant.grid(), &produced, &desired, cfg.crop_fraction)?;
        let epsilon_norm = estimator
            .last_epsilon()
            .map(|e| e.norm())
            .unwrap_or(f64::NAN);
        let record = IterationRecord {
            k,
            u: u.clone(),
            epsilon_norm,
            rms_global,
            rms_central,
            pv_produced: produced.peak_to_valley()?,
            bvls: diag.clone(),
        };
        if !record_is_finite(&record) {
            return Err(Error::Numerical {
                context: format!("iteration {k}"),
                message: "non-finite value in iteration record".into(),
            });
        }
        if cfg.record_checkpoints {
            checkpoints.push(Checkpoint {
                k,
                u: u.as_slice().to_vec(),
                b: b_hat.as_slice().to_vec(),
                z_next: z_next.as_slice().to_vec(),
                estimator: estimator.snapshot(),
            });
        }
        records.push(record);
        z_history.push(z_next);

        let solution = bvls::solve(&estimator.current_l(), &target.z_d, &bounds, bvls::DEFAULT_TOL, bvls_max_iter)
            .map_err(|e| e.with_iteration(k))?;
        diag = BvlsDiag::from(&solution);
        b_hat = solution.b_star;
    }

    let best_index = records
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.rms_central.partial_cmp(&b.rms_central).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(LoopOutput {
        best_index,
        z_history,
        checkpoints,
        final_snapshot: estimator.snapshot(),
        records,
    })
}

fn record_is_finite(r: &IterationRecord) -> bool {
    r.u.iter().all(|v| v.is_finite())
        && r.epsilon_norm.is_finite()
        && r.rms_global.is_finite()
        && r.rms_central.is_finite()
        && r.pv_produced.is_finite()
        && r.bvls.kkt_residual.is_finite()
        && r.bvls.objective.is_finite()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{batch_init, generate_probes, EstimatorRegistry, DEFAULT_CONDITION_CAP};
    use crate::plant::{ActuatorLayout, PlantConfig};

    fn small_grid() -> ApertureGrid {
        ApertureGrid::centered(48, 48, 44.0, 1600.0 / 44.0).unwrap()
    }

    fn small_plant_config() -> PlantConfig {
        PlantConfig {
            layout: ActuatorLayout {
                grid_rows: 6,
                grid_cols: 6,
                inactive: vec![],
                pitch_um: 320.0,
            },
            theta_true: 1.0,
            stroke_um: 2.0,
            influence_sigma_um: 272.0,
            coupling_gamma: 0.0,
            noise_sigma_um: 0.0,
            drift: None,
            seed: 3,
        }
    }

    fn loop_cfg(iterations: usize) -> LoopConfig {
        LoopConfig {
            iterations,
            beta: 1.0,
            delta: 1e-2,
            estimator: "factored".into(),
            crop_fraction: 0.85,
            record_checkpoints: false,
        }
    }

    #[test]
    fn rms_error_trivial_cases() {
        let grid = small_grid();
        let a = SurfaceMap::zeros(&grid);
        let (g, c) = rms_error(&grid, &a, &a, 0.85).unwrap();
        assert_eq!((g, c), (0.0, 0.0));

        let mut offset = SurfaceMap::zeros(&grid);
        for (h, &inside) in offset.heights_um.iter_mut().zip(&offset.mask.clone()) {
            if inside {
                *h = -0.37;
            }
        }
        let (g, c) = rms_error(&grid, &offset, &a, 0.85).unwrap();
        assert!((g - 0.37).abs() < 1e-12);
        assert!((c - 0.37).abs() < 1e-12);
    }

    #[test]
    fn rms_error_matches_two_pass_oracle() {
        let grid = small_grid();
        let mut p = SurfaceMap::zeros(&grid);
        let mut d = SurfaceMap::zeros(&grid);
        for i in 0..p.heights_um.len() {
            p.heights_um[i] = ((i * 7) % 13) as f64 * 0.01;
            d.heights_um[i] = ((i * 5) % 11) as f64 * 0.02;
        }
        let crop = 0.7;
        let (g, c) = rms_error(&grid, &p, &d, crop).unwrap();
        // direct recomputation over explicit pixel lists
        let mut diffs_g = Vec::new();
        let mut diffs_c = Vec::new();
        for row in 0..grid.height_px {
            for col in 0..grid.width_px {
                if grid.in_aperture(row, col) {
                    let i = row * grid.width_px + col;
                    let diff = p.heights_um[i] - d.heights_um[i];
                    diffs_g.push(diff);
                    if grid.radius_px(row, col) <= crop * grid.diameter_px / 2.0 {
                        diffs_c.push(diff);
                    }
                }
            }
        }
        let oracle = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        assert!((g - oracle(&diffs_g)).abs() < 1e-12);
        assert!((c - oracle(&diffs_c)).abs() < 1e-12);
    }

    #[test]
    fn crop_fraction_one_equals_global() {
        let grid = small_grid();
        let mut p = SurfaceMap::zeros(&grid);
        for (i, h) in p.heights_um.iter_mut().enumerate() {
            *h = (i as f64 * 0.37).sin();
        }
        let d = SurfaceMap::zeros(&grid);
        let (g, c) = rms_error(&grid, &p, &d, 1.0).unwrap();
        assert_eq!(g, c);
    }

    #[test]
    fn zero_target_on_zero_rest_plant_stays_at_zero() {
        let grid = small_grid();
        let config = small_plant_config();
        let m = config.layout.count();
        let plant = Plant::new(config, &grid).unwrap();
        let basis = ZernikeBasis::build(&grid, 10).unwrap();
        let probes = generate_probes(m, 2 * m, 1.0, 9, |u, j| plant.observe(&basis, u, j)).unwrap();
        let report = batch_init(&probes, DEFAULT_CONDITION_CAP).unwrap();
        let est = EstimatorRegistry::with_builtin()
            .create("factored", &report.l0_hat, 1e-2, 1.0)
            .unwrap();
        let target = TargetShape::zero(10);
        let sol = bvls::solve(
            &report.l0_hat,
            &target.z_d,
            &BoxBounds::unit(m),
            bvls::DEFAULT_TOL,
            bvls::default_max_iter(m),
        )
        .unwrap();
        let out = run_loop(
            &plant,
            &basis,
            &target,
            est,
            sol.b_star.clone(),
            BvlsDiag::from(&sol),
            &loop_cfg(4),
            1.0,
            probes.s(),
        )
        .unwrap();
        for r in &out.records {
            assert_eq!(r.u.amax(), 0.0);
            assert_eq!(r.rms_global, 0.0);
            assert_eq!(r.rms_central, 0.0);
        }
    }

    #[test]
    fn one_step_correction_on_linear_plant_with_exact_model() {
        let grid = small_grid();
        let config = small_plant_config();
        let m = config.layout.count();
        let plant = Plant::new(config, &grid).unwrap();
        let basis = ZernikeBasis::build(&grid, 10).unwrap();
        let l_true = plant.true_influence(&basis, 0).unwrap();
        let est = EstimatorRegistry::with_builtin()
            .create("factored", &l_true, 1e-2, 1.0)
            .unwrap();
        let target = TargetShape::from_mode(&basis, 2, 0, 0.6, 0.8).unwrap();
        let sol = bvls::solve(
            &l_true,
            &target.z_d,
            &BoxBounds::unit(m),
            bvls::DEFAULT_TOL,
            bvls::default_max_iter(m),
        )
        .unwrap();
        let out = run_loop(
            &plant,
            &basis,
            &target,
            est,
            sol.b_star.clone(),
            BvlsDiag::from(&sol),
            &loop_cfg(2),
            1.0,
            0,
        )
        .unwrap();
        assert!(
            out.records[0].rms_central <= 1e-6,
            "first-iteration central rms {}",
            out.records[0].rms_central
        );
    }

    #[test]
    fn best_index_is_argmin_of_central_rms() {
        let grid = small_grid();
        let config = PlantConfig {
            noise_sigma_um: 2e-3,
            ..small_plant_config()
        };
        let m = config.layout.count();
        let plant = Plant::new(config, &grid).unwrap();
        let basis = ZernikeBasis::build(&grid, 10).unwrap();
        let probes = generate_probes(m, 2 * m, 1.0, 4, |u, j| plant.observe(&basis, u, j)).unwrap();
        let report = batch_init(&probes, DEFAULT_CONDITION_CAP).unwrap();
        let est = EstimatorRegistry::with_builtin()
            .create("factored", &report.l0_hat, 1e-2, 0.98)
            .unwrap();
        let target = TargetShape::from_mode(&basis, 2, 0, 0.5, 0.8).unwrap();
        let sol = bvls::solve(
            &report.l0_hat,
            &target.z_d,
            &BoxBounds::unit(m),
            bvls::DEFAULT_TOL,
            bvls::default_max_iter(m),
        )
        .unwrap();
        let out = run_loop(
            &plant,
            &basis,
            &target,
            est,
            sol.b_star.clone(),
            BvlsDiag::from(&sol),
            &loop_cfg(6),
            1.0,
            probes.s(),
        )
        .unwrap();
        let min = out
            .records
            .iter()
            .map(|r| r.rms_central)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.records[out.best_index].rms_central, min);
        for r in &out.records {
            assert!(r.u.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn checkpoints_replay_epsilon_norm() {
        let grid = small_grid();
        let config = small_plant_config();
        let m = config.layout.count();
        let plant = Plant::new(config, &grid).unwrap();
        let basis = ZernikeBasis::build(&grid, 10).unwrap();
        let probes = generate_probes(m, 2 * m, 1.0, 12, |u, j| plant.observe(&basis, u, j)).unwrap();
        let report = batch_init(&probes, DEFAULT_CONDITION_CAP).unwrap();
        let est = EstimatorRegistry::with_builtin()
            .create("dense", &report.l0_hat, 1e-2, 0.98)
            .unwrap();
        let target = TargetShape::from_mode(&basis, 2, 0, 0.5, 0.8).unwrap();
        let sol = bvls::solve(
            &report.l0_hat,
            &target.z_d,
            &BoxBounds::unit(m),
            bvls::DEFAULT_TOL,
            bvls::default_max_iter(m),
        )
        .unwrap();
        let mut cfg = loop_cfg(3);
        cfg.record_checkpoints = true;
        let out = run_loop(
            &plant,
            &basis,
            &target,
            est,
            sol.b_star.clone(),
            BvlsDiag::from(&sol),
            &cfg,
            1.0,
            probes.s(),
        )
        .unwrap();
        assert_eq!(out.checkpoints.len(), 3);
        // epsilon at step k must equal z_{k+1} - L_k b_k with L_k the
        // estimate before the update, i.e. the previous checkpoint's state
        for k in 1..3 {
            let prev = &out.checkpoints[k - 1];
            let ck = &out.checkpoints[k];
            let l_before = prev.estimator.restore().unwrap().current_l();
            let b = DVector::from_column_slice(&ck.b);
            let z = DVector::from_column_slice(&ck.z_next);
            let eps = &z - l_before * b;
            assert!((eps.norm() - out.records[k].epsilon_norm).abs() < 1e-12);
        }
    }
}
