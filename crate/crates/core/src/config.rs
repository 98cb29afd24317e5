//! Declarative experiment configuration: TOML with nested sections, strict
//! key checking, and validation errors that name the offending key.

use crate::control::{LoopConfig, TargetShape};
use crate::error::{Error, Result};
use crate::grid::ApertureGrid;
use crate::plant::{ActuatorLayout, DriftSchedule, Plant, PlantConfig};
use crate::zernike::ZernikeBasis;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Dense-form RLS keeps an (n*m)^2 gain matrix; beyond this n*m the memory
/// and per-update cost are unreasonable and the factored form is the same
/// estimator, so configs asking for more are rejected.
pub const DENSE_STATE_LIMIT: usize = 1500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub width_px: usize,
    pub height_px: usize,
    pub diameter_px: f64,
    pub pixel_pitch_um: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_x_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_y_px: Option<f64>,
}

impl GridConfig {
    pub fn build(&self) -> Result<ApertureGrid> {
        let cx = self.center_x_px.unwrap_or((self.width_px as f64 - 1.0) / 2.0);
        let cy = self.center_y_px.unwrap_or((self.height_px as f64 - 1.0) / 2.0);
        ApertureGrid::new(self.width_px, self.height_px, (cx, cy), self.diameter_px, self.pixel_pitch_um)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    #[serde(default)]
    pub inactive: Vec<(usize, usize)>,
    pub pitch_um: f64,
}

impl LayoutConfig {
    fn build(&self) -> ActuatorLayout {
        ActuatorLayout {
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            inactive: self.inactive.clone(),
            pitch_um: self.pitch_um,
        }
    }
}

/// Gain step specified either as a full per-actuator multiplier list or as a
/// contiguous block (first_actuator, actuator_count, gain_multiplier).
/// `onset_iteration` counts loop iterations; probe excitation happens first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub onset_iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_multiplier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_actuator: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actuator_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_multipliers: Option<Vec<f64>>,
}

impl DriftConfig {
    pub fn to_schedule(&self, m: usize, s_probes: usize) -> Result<DriftSchedule> {
        let multipliers = match (&self.gain_multipliers, self.gain_multiplier) {
            (Some(list), None) => {
                if self.first_actuator.is_some() || self.actuator_count.is_some() {
                    return Err(Error::Config {
                        path: "plant.drift".into(),
                        message: "gain_multipliers excludes the block keys".into(),
                    });
                }
                if list.len() != m {
                    return Err(Error::Dimension {
                        context: "plant.drift.gain_multipliers".into(),
                        expected: m,
                        got: list.len(),
                    });
                }
                list.clone()
            }
            (None, Some(mult)) => {
                let first = self.first_actuator.ok_or_else(|| Error::Config {
                    path: "plant.drift.first_actuator".into(),
                    message: "required with gain_multiplier".into(),
                })?;
                let count = self.actuator_count.ok_or_else(|| Error::Config {
                    path: "plant.drift.actuator_count".into(),
                    message: "required with gain_multiplier".into(),
                })?;
                if first + count > m || count == 0 {
                    return Err(Error::Config {
                        path: "plant.drift".into(),
                        message: format!("block [{first}, {first}+{count}) outside the {m} actuators"),
                    });
                }
                let mut v = vec![1.0; m];
                for g in v.iter_mut().skip(first).take(count) {
                    *g = mult;
                }
                v
            }
            _ => {
                return Err(Error::Config {
                    path: "plant.drift".into(),
                    message: "specify exactly one of gain_multipliers or gain_multiplier with a block".into(),
                })
            }
        };
        Ok(DriftSchedule {
            onset_k: s_probes + self.onset_iteration,
            gain_multipliers: multipliers,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub layout: LayoutConfig,
    pub theta_true: f64,
    pub stroke_um: f64,
    /// Defaults to 0.85 times the actuator pitch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub influence_sigma_um: Option<f64>,
    #[serde(default)]
    pub coupling_gamma: f64,
    #[serde(default)]
    pub noise_sigma_um: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    /// Mode name as Z<radial>^<azimuthal>, e.g. "Z4^2".
    pub mode: String,
    pub pv_um: f64,
    /// Piston lift in micrometers. Defaults to centering the target span
    /// inside [0, stroke].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piston_um: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub theta_assumed: f64,
    pub n_modes: usize,
    pub s_probes: usize,
    pub grid: GridConfig,
    pub plant: PlantSection,
    pub control: LoopConfig,
    pub target: TargetConfig,
}

/// Everything a run needs, built from a validated config.
pub struct ExperimentSetup {
    pub grid: ApertureGrid,
    pub basis: ZernikeBasis,
    pub plant: Plant,
    pub target: TargetShape,
    pub m: usize,
}

/// Parses "Z4^2" style mode names; the azimuthal part may be negative.
pub fn parse_mode_name(s: &str) -> Result<(usize, i32)> {
    let body = s.strip_prefix('Z').or_else(|| s.strip_prefix('z')).ok_or_else(|| Error::Config {
        path: "target.mode".into(),
        message: format!("`{s}` does not start with Z"),
    })?;
    let (n_str, m_str) = body.split_once('^').ok_or_else(|| Error::Config {
        path: "target.mode".into(),
        message: format!("`{s}` is not of the form Z<radial>^<azimuthal>"),
    })?;
    let n: usize = n_str.parse().map_err(|_| Error::Config {
        path: "target.mode".into(),
        message: format!("bad radial degree `{n_str}`"),
    })?;
    let m: i32 = m_str.parse().map_err(|_| Error::Config {
        path: "target.mode".into(),
        message: format!("bad azimuthal frequency `{m_str}`"),
    })?;
    if m.unsigned_abs() as usize > n || !(n - m.unsigned_abs() as usize).is_multiple_of(2) {
        return Err(Error::Config {
            path: "target.mode".into(),
            message: format!("Z{n}^{m} is not a valid mode (need |m| <= n and n - |m| even)"),
        });
    }
    Ok((n, m))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config {
            path: "serialize".into(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.build()?;
        if self.n_modes == 0 {
            return Err(Error::Config {
                path: "n_modes".into(),
                message: "must be at least 1".into(),
            });
        }
        if !self.theta_assumed.is_finite() || self.theta_assumed <= 0.0 {
            return Err(Error::Config {
                path: "theta_assumed".into(),
                message: "must be positive".into(),
            });
        }
        let m = self.plant.layout.build().count();
        if self.s_probes < m {
            return Err(Error::Config {
                path: "s_probes".into(),
                message: format!(
                    "{} probes for {m} actuators; the probe count must be at least the actuator count",
                    self.s_probes
                ),
            });
        }
        self.control.validate()?;
        if self.control.estimator == "dense" && self.n_modes * m > DENSE_STATE_LIMIT {
            return Err(Error::Config {
                path: "control.estimator".into(),
                message: format!(
                    "dense form at n*m = {} exceeds the {DENSE_STATE_LIMIT} state limit; use `factored`",
                    self.n_modes * m
                ),
            });
        }
        parse_mode_name(&self.target.mode)?;
        if !self.target.pv_um.is_finite() || self.target.pv_um <= 0.0 {
            return Err(Error::Config {
                path: "target.pv_um".into(),
                message: "must be positive".into(),
            });
        }
        self.plant_config()?.validate()?;
        Ok(())
    }

    /// Plant parameters with drift mapped from loop time to plant time and
    /// the noise stream re-keyed by the experiment seed, so different
    /// experiment seeds see different noise but reruns are reproducible.
    pub fn plant_config(&self) -> Result<PlantConfig> {
        let layout = self.plant.layout.build();
        let m = layout.count();
        let sigma = self.plant.influence_sigma_um.unwrap_or(0.85 * layout.pitch_um);
        let drift = match &self.plant.drift {
            Some(d) => Some(d.to_schedule(m, self.s_probes)?),
            None => None,
        };
        Ok(PlantConfig {
            layout,
            theta_true: self.plant.theta_true,
            stroke_um: self.plant.stroke_um,
            influence_sigma_um: sigma,
            coupling_gamma: self.plant.coupling_gamma,
            noise_sigma_um: self.plant.noise_sigma_um,
            drift,
            seed: self.plant.seed ^ splitmix64(self.seed),
        })
    }

    /// Builds the run components, optionally overriding the mode count
    /// (used by sweeps).
    pub fn build_with_modes(&self, n_modes: usize) -> Result<ExperimentSetup> {
        let grid = self.grid.build()?;
        let basis = ZernikeBasis::build(&grid, n_modes)?;
        let plant_config = self.plant_config()?;
        let m = plant_config.layout.count();
        let plant = Plant::new(plant_config, &grid)?;
        let (radial_n, azimuthal_m) = parse_mode_name(&self.target.mode)?;
        let piston = match self.target.piston_um {
            Some(p) => p,
            None => {
                // center the span inside [0, stroke]
                if self.target.pv_um > self.plant.stroke_um {
                    return Err(Error::Config {
                        path: "target.pv_um".into(),
                        message: format!(
                            "{} um exceeds the {} um stroke; set piston_um explicitly to override centering",
                            self.target.pv_um, self.plant.stroke_um
                        ),
                    });
                }
                let j = crate::zernike::nm_to_noll(radial_n, azimuthal_m)?;
                if j > n_modes {
                    return Err(Error::Config {
                        path: "target.mode".into(),
                        message: format!("mode needs basis column {j}, only {n_modes} available"),
                    });
                }
                let mut unit = nalgebra::DVector::zeros(n_modes);
                unit[j - 1] = 1.0;
                let unit_surface = basis.synthesize(&unit)?;
                let mut min_unit = f64::INFINITY;
                for (h, &inside) in unit_surface.heights_um.iter().zip(&unit_surface.mask) {
                    if inside {
                        min_unit = min_unit.min(*h);
                    }
                }
                let pv_unit = unit_surface.peak_to_valley()?;
                let scale = self.target.pv_um / pv_unit;
                (self.plant.stroke_um - self.target.pv_um) / 2.0 - scale * min_unit
            }
        };
        let target = TargetShape::from_mode(&basis, radial_n, azimuthal_m, self.target.pv_um, piston)?;
        Ok(ExperimentSetup {
            grid,
            basis,
            plant,
            target,
            m,
        })
    }

    pub fn build(&self) -> Result<ExperimentSetup> {
        self.build_with_modes(self.n_modes)
    }
}
