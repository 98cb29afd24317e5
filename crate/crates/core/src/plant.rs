//! Synthetic MEMS deformable mirror. Voltages map to a height field through
//! per-actuator Gaussian bumps with a power-law voltage response, optional
//! nearest-neighbor coupling, per-iteration measurement noise, and an
//! optional step change in actuator gains partway through a run.

use crate::error::{Error, Result};
use crate::grid::{ApertureGrid, SurfaceMap};
use crate::zernike::{ZernikeBasis, ZernikeCoeffs};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Rectangular actuator array with optional holes (e.g. unused corners).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorLayout {
    pub grid_rows: usize,
    pub grid_cols: usize,
    #[serde(default)]
    pub inactive: Vec<(usize, usize)>,
    pub pitch_um: f64,
}

impl ActuatorLayout {
    /// 12x12 array with the four corners unused: 140 actuators, 400 um pitch.
    pub fn mems_12x12() -> Self {
        ActuatorLayout {
            grid_rows: 12,
            grid_cols: 12,
            inactive: vec![(0, 0), (0, 11), (11, 0), (11, 11)],
            pitch_um: 400.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::Config {
                path: "plant.layout".into(),
                message: "grid_rows and grid_cols must be positive".into(),
            });
        }
        if !self.pitch_um.is_finite() || self.pitch_um <= 0.0 {
            return Err(Error::Config {
                path: "plant.layout.pitch_um".into(),
                message: "pitch must be positive".into(),
            });
        }
        for &(r, c) in &self.inactive {
            if r >= self.grid_rows || c >= self.grid_cols {
                return Err(Error::Config {
                    path: "plant.layout.inactive".into(),
                    message: format!("({r}, {c}) outside the {}x{} array", self.grid_rows, self.grid_cols),
                });
            }
        }
        if self.count() == 0 {
            return Err(Error::Config {
                path: "plant.layout".into(),
                message: "no active actuators".into(),
            });
        }
        Ok(())
    }

    fn is_active(&self, r: usize, c: usize) -> bool {
        !self.inactive.contains(&(r, c))
    }

    /// Number of active actuators.
    pub fn count(&self) -> usize {
        let mut m = 0;
        for r in 0..self.grid_rows {
            for c in 0..self.grid_cols {
                if self.is_active(r, c) {
                    m += 1;
                }
            }
        }
        m
    }

    /// Active actuator centers in micrometers, centered on the array,
    /// ordered row-major over the array grid.
    pub fn positions_um(&self) -> Vec<(f64, f64)> {
        let cx = (self.grid_cols as f64 - 1.0) / 2.0;
        let cy = (self.grid_rows as f64 - 1.0) / 2.0;
        let mut pos = Vec::with_capacity(self.count());
        for r in 0..self.grid_rows {
            for c in 0..self.grid_cols {
                if self.is_active(r, c) {
                    pos.push(((c as f64 - cx) * self.pitch_um, (cy - r as f64) * self.pitch_um));
                }
            }
        }
        pos
    }

    /// 4-neighborhoods in active-actuator indexing.
    pub fn neighbors4(&self) -> Vec<Vec<usize>> {
        let mut index = vec![vec![None; self.grid_cols]; self.grid_rows];
        let mut next = 0usize;
        for (r, row) in index.iter_mut().enumerate() {
            for (c, slot) in row.iter_mut().enumerate() {
                if self.is_active(r, c) {
                    *slot = Some(next);
                    next += 1;
                }
            }
        }
        let mut out = vec![Vec::new(); next];
        for r in 0..self.grid_rows {
            for c in 0..self.grid_cols {
                let Some(i) = index[r][c] else { continue };
                let mut push = |rr: isize, cc: isize| {
                    if rr >= 0 && cc >= 0 && (rr as usize) < self.grid_rows && (cc as usize) < self.grid_cols {
                        if let Some(j) = index[rr as usize][cc as usize] {
                            out[i].push(j);
                        }
                    }
                };
                push(r as isize - 1, c as isize);
                push(r as isize + 1, c as isize);
                push(r as isize, c as isize - 1);
                push(r as isize, c as isize + 1);
            }
        }
        out
    }
}

/// Step change in actuator gains: multiplier applies from `onset_k` onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSchedule {
    pub onset_k: usize,
    pub gain_multipliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub layout: ActuatorLayout,
    pub theta_true: f64,
    pub stroke_um: f64,
    pub influence_sigma_um: f64,
    pub coupling_gamma: f64,
    pub noise_sigma_um: f64,
    #[serde(default)]
    pub drift: Option<DriftSchedule>,
    pub seed: u64,
}

impl PlantConfig {
    /// Desk defaults: 140-actuator layout, power-law exponent 1.742,
    /// 2 um stroke, bump width 0.85 pitch, no coupling or drift.
    pub fn default_mems() -> Self {
        let layout = ActuatorLayout::mems_12x12();
        let sigma = 0.85 * layout.pitch_um;
        PlantConfig {
            layout,
            theta_true: 1.742,
            stroke_um: 2.0,
            influence_sigma_um: sigma,
            coupling_gamma: 0.0,
            noise_sigma_um: 5e-3,
            drift: None,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if !self.theta_true.is_finite() || self.theta_true <= 0.0 {
            return Err(Error::Config {
                path: "plant.theta_true".into(),
                message: "must be positive".into(),
            });
        }
        if !self.stroke_um.is_finite()
            || self.stroke_um <= 0.0
            || !self.influence_sigma_um.is_finite()
            || self.influence_sigma_um <= 0.0
        {
            return Err(Error::Config {
                path: "plant".into(),
                message: "stroke_um and influence_sigma_um must be positive".into(),
            });
        }
        if self.coupling_gamma < 0.0 || self.noise_sigma_um < 0.0 {
            return Err(Error::Config {
                path: "plant".into(),
                message: "coupling_gamma and noise_sigma_um must be non-negative".into(),
            });
        }
        if let Some(d) = &self.drift {
            if d.gain_multipliers.len() != self.layout.count() {
                return Err(Error::Dimension {
                    context: "plant.drift.gain_multipliers".into(),
                    expected: self.layout.count(),
                    got: d.gain_multipliers.len(),
                });
            }
            if d.gain_multipliers.iter().any(|&g| !g.is_finite() || g <= 0.0) {
                return Err(Error::Config {
                    path: "plant.drift.gain_multipliers".into(),
                    message: "multipliers must be positive and finite".into(),
                });
            }
        }
        Ok(())
    }
}

/// Element-wise power lift b_i = u_i^theta.
pub fn lift(u: &DVector<f64>, theta: f64) -> DVector<f64> {
    u.map(|v| v.powf(theta))
}

/// Voltage vector paired with its lift under the controller's exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput {
    u: DVector<f64>,
    theta_assumed: f64,
    b: DVector<f64>,
}

impl ControlInput {
    pub fn from_u(u: DVector<f64>, theta_assumed: f64) -> Result<Self> {
        check_unit_range(&u, "control input u")?;
        if !theta_assumed.is_finite() || theta_assumed <= 0.0 {
            return Err(Error::OutOfRange {
                context: "theta_assumed".into(),
                value: theta_assumed,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        let b = lift(&u, theta_assumed);
        Ok(ControlInput { u, theta_assumed, b })
    }

    /// Builds the input from a lifted vector, inverting the power map.
    pub fn from_b(b: DVector<f64>, theta_assumed: f64) -> Result<Self> {
        check_unit_range(&b, "lifted input b")?;
        let u = b.map(|v| v.powf(1.0 / theta_assumed));
        Self::from_u(u, theta_assumed)
    }

    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn theta_assumed(&self) -> f64 {
        self.theta_assumed
    }
}

fn check_unit_range(v: &DVector<f64>, context: &str) -> Result<()> {
    for (i, &x) in v.iter().enumerate() {
        if !(0.0..=1.0).contains(&x) || !x.is_finite() {
            return Err(Error::OutOfRange {
                context: format!("{context}[{i}]"),
                value: x,
                lo: 0.0,
                hi: 1.0,
            });
        }
    }
    Ok(())
}

/// One actuator's sampled bump, clipped to a box around its center.
/// Values are unit-peak; truncation radius is 6 sigma.
struct Patch {
    row0: usize,
    col0: usize,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

pub struct Plant {
    config: PlantConfig,
    grid: ApertureGrid,
    patches: Vec<Patch>,
    neighbors: Vec<Vec<usize>>,
}

impl Plant {
    pub fn new(config: PlantConfig, grid: &ApertureGrid) -> Result<Self> {
        config.validate()?;
        grid.validate()?;
        let positions = config.layout.positions_um();
        let neighbors = config.layout.neighbors4();
        let sigma = config.influence_sigma_um;
        let reach_px = (6.0 * sigma / grid.pixel_pitch_um).ceil() as isize;
        let mut patches = Vec::with_capacity(positions.len());
        for &(ax, ay) in &positions {
            // actuator center in pixel coordinates
            let pc = grid.center_px.0 + ax / grid.pixel_pitch_um;
            let pr = grid.center_px.1 - ay / grid.pixel_pitch_um;
            let row_lo = ((pr.floor() as isize) - reach_px).max(0) as usize;
            let row_hi = ((pr.ceil() as isize) + reach_px).min(grid.height_px as isize - 1);
            let col_lo = ((pc.floor() as isize) - reach_px).max(0) as usize;
            let col_hi = ((pc.ceil() as isize) + reach_px).min(grid.width_px as isize - 1);
            if row_hi < row_lo as isize || col_hi < col_lo as isize {
                patches.push(Patch {
                    row0: 0,
                    col0: 0,
                    rows: 0,
                    cols: 0,
                    values: Vec::new(),
                });
                continue;
            }
            let (row_hi, col_hi) = (row_hi as usize, col_hi as usize);
            let rows = row_hi - row_lo + 1;
            let cols = col_hi - col_lo + 1;
            let mut values = vec![0.0; rows * cols];
            for r in row_lo..=row_hi {
                for c in col_lo..=col_hi {
                    let (px, py) = grid.pixel_position_um(r, c);
                    let dx = px - ax;
                    let dy = py - ay;
                    let d2 = dx * dx + dy * dy;
                    if d2 <= (6.0 * sigma) * (6.0 * sigma) {
                        values[(r - row_lo) * cols + (c - col_lo)] = (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            patches.push(Patch {
                row0: row_lo,
                col0: col_lo,
                rows,
                cols,
                values,
            });
        }
        Ok(Plant {
            config,
            grid: grid.clone(),
            patches,
            neighbors,
        })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.config
    }

    pub fn grid(&self) -> &ApertureGrid {
        &self.grid
    }

    pub fn actuator_count(&self) -> usize {
        self.patches.len()
    }

    fn gain(&self, i: usize, k: usize) -> f64 {
        match &self.config.drift {
            Some(d) if k >= d.onset_k => d.gain_multipliers[i],
            _ => 1.0,
        }
    }

    /// Deflection amplitudes p_i for voltages u at iteration k.
    fn amplitudes(&self, u: &DVector<f64>, k: usize) -> DVector<f64> {
        let b_true = lift(u, self.config.theta_true);
        let m = b_true.len();
        DVector::from_fn(m, |i, _| {
            let coupling: f64 = self.neighbors[i].iter().map(|&j| b_true[j]).sum();
            self.config.stroke_um * self.gain(i, k) * b_true[i] * (1.0 + self.config.coupling_gamma * coupling)
        })
    }

    /// Height field produced by voltages u at iteration k. Deterministic in
    /// (config, u, k): the noise stream is keyed by (seed, k), not call order.
    pub fn actuate(&self, u: &DVector<f64>, k: usize) -> Result<SurfaceMap> {
        if u.len() != self.patches.len() {
            return Err(Error::Dimension {
                context: "actuate input".into(),
                expected: self.patches.len(),
                got: u.len(),
            });
        }
        check_unit_range(u, "voltage u")?;
        let p = self.amplitudes(u, k);
        let mut surface = SurfaceMap::zeros(&self.grid);
        let width = self.grid.width_px;
        for (i, patch) in self.patches.iter().enumerate() {
            if p[i] == 0.0 || patch.values.is_empty() {
                continue;
            }
            for r in 0..patch.rows {
                let base = (patch.row0 + r) * width + patch.col0;
                let row_vals = &patch.values[r * patch.cols..(r + 1) * patch.cols];
                for (c, &v) in row_vals.iter().enumerate() {
                    surface.heights_um[base + c] += p[i] * v;
                }
            }
        }
        if self.config.noise_sigma_um > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(k as u64 + 1);
            let normal = Normal::new(0.0, self.config.noise_sigma_um).map_err(|e| Error::Numerical {
                context: "noise distribution".into(),
                message: e.to_string(),
            })?;
            for h in surface.heights_um.iter_mut() {
                *h += normal.sample(&mut rng);
            }
        }
        Ok(surface)
    }

    /// Coefficients of the produced surface: the only plant output the
    /// estimator and controller ever see.
    pub fn observe(&self, basis: &ZernikeBasis, u: &DVector<f64>, k: usize) -> Result<ZernikeCoeffs> {
        basis.fit(&self.actuate(u, k)?)
    }

    /// Exact influence matrix of the decoupled plant at iteration k: column i
    /// is the coefficient vector of actuator i's bump at unit lift, drift
    /// gains included, noise excluded.
    pub fn true_influence(&self, basis: &ZernikeBasis, k: usize) -> Result<DMatrix<f64>> {
        if self.config.coupling_gamma != 0.0 {
            return Err(Error::Numerical {
                context: "true_influence".into(),
                message: "only defined for coupling_gamma = 0".into(),
            });
        }
        let m = self.patches.len();
        let n = basis.n_modes();
        let width = self.grid.width_px;
        let mut l_true = DMatrix::zeros(n, m);
        for i in 0..m {
            let patch = &self.patches[i];
            let mut surface = SurfaceMap::zeros(&self.grid);
            let amp = self.config.stroke_um * self.gain(i, k);
            for r in 0..patch.rows {
                let base = (patch.row0 + r) * width + patch.col0;
                let row_vals = &patch.values[r * patch.cols..(r + 1) * patch.cols];
                for (c, &v) in row_vals.iter().enumerate() {
                    surface.heights_um[base + c] = amp * v;
                }
            }
            let col = basis.fit(&surface)?;
            l_true.set_column(i, &col);
        }
        Ok(l_true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_grid() -> ApertureGrid {
        ApertureGrid::centered(64, 64, 60.0, 4000.0 / 60.0).unwrap()
    }

    fn quiet_config() -> PlantConfig {
        PlantConfig {
            noise_sigma_um: 0.0,
            ..PlantConfig::default_mems()
        }
    }

    #[test]
    fn default_layout_has_140_actuators() {
        assert_eq!(ActuatorLayout::mems_12x12().count(), 140);
    }

    #[test]
    fn neighbors_of_interior_actuator() {
        let layout = ActuatorLayout::mems_12x12();
        let n4 = layout.neighbors4();
        assert_eq!(n4.len(), 140);
        // actuator at array (0, 1) is active index 0; neighbors: (0, 2) and (1, 1)
        assert_eq!(n4[0].len(), 2);
        // a deep-interior actuator has 4 neighbors
        let interior = n4.iter().filter(|v| v.len() == 4).count();
        assert!(interior > 80);
    }

    #[test]
    fn zero_input_quiet_plant_is_flat() {
        let plant = Plant::new(quiet_config(), &desk_grid()).unwrap();
        let s = plant.actuate(&DVector::zeros(140), 0).unwrap();
        assert!(s.heights_um.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn zero_input_noisy_plant_is_pure_noise() {
        let plant = Plant::new(PlantConfig::default_mems(), &desk_grid()).unwrap();
        let s = plant.actuate(&DVector::zeros(140), 3).unwrap();
        let nonzero = s.heights_um.iter().filter(|&&h| h != 0.0).count();
        assert!(nonzero > 4000);
        let spread = s.heights_um.iter().map(|h| h * h).sum::<f64>() / s.heights_um.len() as f64;
        assert!((spread.sqrt() - 5e-3).abs() < 1e-3);
    }

    #[test]
    fn noise_is_keyed_by_iteration_not_call_order() {
        let plant = Plant::new(PlantConfig::default_mems(), &desk_grid()).unwrap();
        let u = DVector::zeros(140);
        let a = plant.actuate(&u, 7).unwrap();
        let b = plant.actuate(&u, 8).unwrap();
        let a_again = plant.actuate(&u, 7).unwrap();
        assert_eq!(a.heights_um, a_again.heights_um);
        assert_ne!(a.heights_um, b.heights_um);
    }

    #[test]
    fn single_actuator_peak_near_stroke() {
        let mut config = quiet_config();
        config.theta_true = 1.0;
        let grid = desk_grid();
        let plant = Plant::new(config.clone(), &grid).unwrap();
        // actuator nearest the aperture center
        let positions = config.layout.positions_um();
        let center_idx = (0..positions.len())
            .min_by(|&a, &b| {
                let da = positions[a].0.powi(2) + positions[a].1.powi(2);
                let db = positions[b].0.powi(2) + positions[b].1.powi(2);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        let mut u = DVector::zeros(140);
        u[center_idx] = 1.0;
        let s = plant.actuate(&u, 0).unwrap();
        let peak = s.heights_um.iter().cloned().fold(f64::MIN, f64::max);
        assert!(peak <= config.stroke_um + 1e-12);
        assert!(peak > 0.98 * config.stroke_um, "peak {peak}");
    }

    #[test]
    fn linear_plant_superposes() {
        let mut config = quiet_config();
        config.theta_true = 1.0;
        let grid = desk_grid();
        let plant = Plant::new(config, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let uniform = rand_distr::Uniform::new(0.0f64, 0.5).unwrap();
        for _ in 0..4 {
            let u1 = DVector::from_fn(140, |_, _| uniform.sample(&mut rng));
            let u2 = DVector::from_fn(140, |_, _| uniform.sample(&mut rng));
            let alpha = 0.7;
            let combo = &u1 * alpha + &u2;
            let s_combo = plant.actuate(&combo, 0).unwrap();
            let s1 = plant.actuate(&u1, 0).unwrap();
            let s2 = plant.actuate(&u2, 0).unwrap();
            for i in 0..s_combo.heights_um.len() {
                let want = alpha * s1.heights_um[i] + s2.heights_um[i];
                assert!((s_combo.heights_um[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn observe_matches_true_influence_on_decoupled_plant() {
        let config = quiet_config();
        let grid = desk_grid();
        let plant = Plant::new(config.clone(), &grid).unwrap();
        let basis = ZernikeBasis::build(&grid, 28).unwrap();
        let l_true = plant.true_influence(&basis, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let uniform = rand_distr::Uniform::new(0.0f64, 1.0).unwrap();
        let u = DVector::from_fn(140, |_, _| uniform.sample(&mut rng));
        let z = plant.observe(&basis, &u, 0).unwrap();
        let z_model = &l_true * lift(&u, config.theta_true);
        let rel = (&z - &z_model).norm() / z.norm();
        assert!(rel < 1e-10, "relative error {rel}");
    }

    #[test]
    fn true_influence_constant_without_drift_steps_with_drift() {
        let grid = desk_grid();
        let basis = ZernikeBasis::build(&grid, 15).unwrap();
        let plant = Plant::new(quiet_config(), &grid).unwrap();
        let l0 = plant.true_influence(&basis, 0).unwrap();
        let l9 = plant.true_influence(&basis, 9).unwrap();
        assert_eq!(l0, l9);

        let mut config = quiet_config();
        let mut gains = vec![1.0; 140];
        for g in gains.iter_mut().take(30) {
            *g = 1.1;
        }
        config.drift = Some(DriftSchedule {
            onset_k: 5,
            gain_multipliers: gains,
        });
        let drifting = Plant::new(config, &grid).unwrap();
        let before = drifting.true_influence(&basis, 4).unwrap();
        let after = drifting.true_influence(&basis, 5).unwrap();
        let later = drifting.true_influence(&basis, 20).unwrap();
        assert_eq!(before, l0);
        assert_ne!(before, after);
        assert_eq!(after, later);
    }

    #[test]
    fn influence_columns_scale_with_stroke() {
        let grid = desk_grid();
        let basis = ZernikeBasis::build(&grid, 15).unwrap();
        let plant1 = Plant::new(quiet_config(), &grid).unwrap();
        let mut doubled = quiet_config();
        doubled.stroke_um *= 2.0;
        let plant2 = Plant::new(doubled, &grid).unwrap();
        let l1 = plant1.true_influence(&basis, 0).unwrap();
        let l2 = plant2.true_influence(&basis, 0).unwrap();
        let rel = (&l2 - &l1 * 2.0).norm() / l2.norm();
        assert!(rel < 1e-12);
    }

    #[test]
    fn out_of_bounds_input_is_an_error_not_a_clip() {
        let plant = Plant::new(quiet_config(), &desk_grid()).unwrap();
        let mut u = DVector::zeros(140);
        u[3] = 1.2;
        assert!(matches!(plant.actuate(&u, 0), Err(Error::OutOfRange { .. })));
        u[3] = -0.1;
        assert!(matches!(plant.actuate(&u, 0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn true_influence_rejects_coupled_plant() {
        let mut config = quiet_config();
        config.coupling_gamma = 0.05;
        let grid = desk_grid();
        let plant = Plant::new(config, &grid).unwrap();
        let basis = ZernikeBasis::build(&grid, 15).unwrap();
        assert!(plant.true_influence(&basis, 0).is_err());
    }

    #[test]
    fn drift_length_mismatch_rejected() {
        let mut config = quiet_config();
        config.drift = Some(DriftSchedule {
            onset_k: 0,
            gain_multipliers: vec![1.0; 139],
        });
        assert!(Plant::new(config, &desk_grid()).is_err());
    }

    #[test]
    fn control_input_round_trips_lift() {
        let u = DVector::from_vec(vec![0.0, 0.25, 0.5, 0.9, 1.0]);
        let input = ControlInput::from_u(u.clone(), 1.742).unwrap();
        let back = ControlInput::from_b(input.b().clone(), 1.742).unwrap();
        assert!((back.u() - &u).norm() < 1e-12);
    }
}
