//! Probe generation and batch least-squares initialization of the
//! influence matrix from recorded probe data.

use crate::error::{Error, Result};
use crate::matio::{read_matrix_text, write_matrix_text};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

/// Recorded probe excitation: raw voltages U, their lifts B, and the
/// observed coefficient vectors Z, one column per probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub u: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub theta_assumed: f64,
}

impl ProbeDataset {
    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn s(&self) -> usize {
        self.u.ncols()
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, s) = (self.m(), self.s());
        if s < m {
            return Err(Error::Config {
                path: "probes".into(),
                message: format!("probe count s = {s} must be at least the actuator count m = {m}"),
            });
        }
        if self.b.shape() != (m, s) {
            return Err(Error::Dimension {
                context: "probe B".into(),
                expected: m * s,
                got: self.b.len(),
            });
        }
        if self.z.ncols() != s {
            return Err(Error::Dimension {
                context: "probe Z columns".into(),
                expected: s,
                got: self.z.ncols(),
            });
        }
        for &v in self.u.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange {
                    context: "probe U entry".into(),
                    value: v,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
        }
        Ok(())
    }

    /// Writes U, B, Z as three plain-text matrix files next to each other.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_matrix_text(&dir.join(format!("{stem}_U.txt")), &self.u)?;
        write_matrix_text(&dir.join(format!("{stem}_B.txt")), &self.b)?;
        write_matrix_text(&dir.join(format!("{stem}_Z.txt")), &self.z)
    }

    pub fn load(dir: &Path, stem: &str, theta_assumed: f64) -> Result<Self> {
        let u = read_matrix_text(&dir.join(format!("{stem}_U.txt")))?;
        let b = read_matrix_text(&dir.join(format!("{stem}_B.txt")))?;
        let z = read_matrix_text(&dir.join(format!("{stem}_Z.txt")))?;
        let ds = ProbeDataset {
            u,
            b,
            z,
            theta_assumed,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Draws s probe voltage vectors, each entry Normal(0.5, 0.15) clamped into
/// [0, 1], and records the observation for each probe. The observe callback
/// receives (voltages, probe index) and returns the coefficient vector.
pub fn generate_probes<F>(
    m: usize,
    s: usize,
    theta_assumed: f64,
    seed: u64,
    mut observe: F,
) -> Result<ProbeDataset>
where
    F: FnMut(&DVector<f64>, usize) -> Result<DVector<f64>>,
{
    if s < m {
        return Err(Error::Config {
            path: "probes".into(),
            message: format!("probe count s = {s} must be at least the actuator count m = {m}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::<f64>::new(0.5, 0.15).expect("fixed parameters");
    let mut u = DMatrix::zeros(m, s);
    for j in 0..s {
        for i in 0..m {
            u[(i, j)] = normal.sample(&mut rng).clamp(0.0, 1.0);
        }
    }
    let b = u.map(|v| v.powf(theta_assumed));
    let mut z_cols: Option<DMatrix<f64>> = None;
    for j in 0..s {
        let uj = DVector::from_column_slice(u.column(j).as_slice());
        let zj = observe(&uj, j)?;
        let z = z_cols.get_or_insert_with(|| DMatrix::zeros(zj.len(), s));
        if zj.len() != z.nrows() {
            return Err(Error::Dimension {
                context: "probe observation length".into(),
                expected: z.nrows(),
                got: zj.len(),
            });
        }
        z.set_column(j, &zj);
    }
    Ok(ProbeDataset {
        u,
        b,
        z: z_cols.expect("s >= m >= 1"),
        theta_assumed,
    })
}

/// Batch initializer output: the estimate, the conditioning of B Bt, and
/// the residual of the fit it came from.
#[derive(Debug, Clone)]
pub struct InitReport {
    pub l0_hat: DMatrix<f64>,
    pub condition_bbt: f64,
    pub residual_fro: f64,
}

pub const DEFAULT_CONDITION_CAP: f64 = 1e10;

/// Multivariable least squares min over L of |Z - L B| in the Frobenius
/// norm, solved through an orthogonal factorization of B transpose. Equal to
/// Z Bt (B Bt)^-1 when B has full row rank.
pub fn batch_init(probes: &ProbeDataset, condition_cap: f64) -> Result<InitReport> {
    probes.validate()?;
    let b_t = probes.b.transpose();
    let svd = b_t.clone().svd(true, true);
    let sv = &svd.singular_values;
    let sv_max = sv.max();
    let sv_min = sv.min();
    let condition_bbt = if sv_min > 0.0 {
        (sv_max / sv_min).powi(2)
    } else {
        f64::INFINITY
    };
    if !condition_bbt.is_finite() {
        return Err(Error::RankDeficient {
            context: "batch init: probe matrix B".into(),
        });
    }
    if condition_bbt > condition_cap {
        return Err(Error::IllConditioned {
            context: "batch init: B Bt".into(),
            cond: condition_bbt,
            cap: condition_cap,
        });
    }
    let eps = sv_max * probes.s().max(probes.m()) as f64 * f64::EPSILON;
    let x = svd
        .solve(&probes.z.transpose(), eps)
        .map_err(|msg| Error::Numerical {
            context: "batch init solve".into(),
            message: msg.into(),
        })?;
    let l0_hat = x.transpose();
    let residual_fro = (&probes.z - &l0_hat * &probes.b).norm();
    Ok(InitReport {
        l0_hat,
        condition_bbt,
        residual_fro,
    })
}
