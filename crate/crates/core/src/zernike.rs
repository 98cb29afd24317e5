//! Zernike modes on a circular aperture: Noll ordering, unit-RMS
//! normalization, and least-squares fitting on the pixel grid.
//!
//! Mode j (1-based Noll index) maps to radial degree n and signed azimuthal
//! frequency m. Even j carries the cosine term (m > 0), odd j the sine term
//! (m < 0). The first few: j=1 piston, j=2/3 tilt, j=4 defocus, j=5/6
//! primary astigmatism, j=11 spherical, j=12 is (n=4, m=2).

use crate::error::{Error, Result};
use crate::grid::{ApertureGrid, SurfaceMap};
use nalgebra::{DMatrix, DVector, Dyn, SVD};

/// Coefficient vector in micrometers, indexed like the basis columns.
pub type ZernikeCoeffs = DVector<f64>;

/// Noll index (1-based) to (radial degree, signed azimuthal frequency).
pub fn noll_to_nm(j: usize) -> Result<(usize, i32)> {
    if j == 0 {
        return Err(Error::OutOfRange {
            context: "noll index".into(),
            value: 0.0,
            lo: 1.0,
            hi: f64::INFINITY,
        });
    }
    let mut n = 0usize;
    let mut j1 = j - 1;
    while j1 > n {
        n += 1;
        j1 -= n;
    }
    let m_abs = (n % 2) + 2 * ((j1 + ((n + 1) % 2)) / 2);
    let m = if j.is_multiple_of(2) { m_abs as i32 } else { -(m_abs as i32) };
    Ok((n, m))
}

/// Inverse of `noll_to_nm` by bounded scan over one radial order.
pub fn nm_to_noll(n: usize, m: i32) -> Result<usize> {
    let j_lo = n * (n + 1) / 2 + 1;
    let j_hi = (n + 1) * (n + 2) / 2;
    for j in j_lo..=j_hi {
        if noll_to_nm(j)? == (n, m) {
            return Ok(j);
        }
    }
    Err(Error::Config {
        path: "zernike mode".into(),
        message: format!("no mode with radial degree {n} and azimuthal frequency {m}"),
    })
}

/// Jacobi polynomial P_k^(a,0)(x) by the three-term recurrence.
fn jacobi(k: usize, a: f64, x: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let mut p_prev = 1.0;
    let mut p = (a + 1.0) + (a + 2.0) * (x - 1.0) / 2.0;
    for j in 2..=k {
        let jf = j as f64;
        let c1 = 2.0 * jf * (jf + a) * (2.0 * jf + a - 2.0);
        let c2 = (2.0 * jf + a - 1.0) * ((2.0 * jf + a) * (2.0 * jf + a - 2.0) * x + a * a);
        let c3 = 2.0 * (jf + a - 1.0) * (jf - 1.0) * (2.0 * jf + a);
        let p_next = (c2 * p - c3 * p_prev) / c1;
        p_prev = p;
        p = p_next;
    }
    p
}

/// Radial polynomial R_n^|m|(rho), evaluated through the Jacobi form
/// R_n^|m|(rho) = (-1)^s rho^|m| P_s^(|m|,0)(1 - 2 rho^2) with s = (n-|m|)/2.
/// Stable to high degree, unlike the alternating factorial sum.
pub fn radial(n: usize, m_abs: usize, rho: f64) -> f64 {
    debug_assert!(m_abs <= n && (n - m_abs).is_multiple_of(2));
    let s = (n - m_abs) / 2;
    let sign = if s.is_multiple_of(2) { 1.0 } else { -1.0 };
    sign * rho.powi(m_abs as i32) * jacobi(s, m_abs as f64, 1.0 - 2.0 * rho * rho)
}

/// Unit-RMS normalized mode value at polar point (rho, phi), rho in [0,1].
pub fn evaluate(n: usize, m: i32, rho: f64, phi: f64) -> f64 {
    let m_abs = m.unsigned_abs() as usize;
    let norm = if m == 0 {
        ((n + 1) as f64).sqrt()
    } else {
        (2.0 * (n + 1) as f64).sqrt()
    };
    let angular = if m > 0 {
        (m as f64 * phi).cos()
    } else if m < 0 {
        (m_abs as f64 * phi).sin()
    } else {
        1.0
    };
    norm * radial(n, m_abs, rho) * angular
}

/// Zernike basis sampled on the aperture pixels of a grid, with a stored
/// orthogonal factorization so every fit reuses one decomposition.
#[derive(Debug, Clone)]
pub struct ZernikeBasis {
    grid: ApertureGrid,
    n_modes: usize,
    nm: Vec<(usize, i32)>,
    mask_idx: Vec<usize>,
    phi: DMatrix<f64>,
    svd: SVD<f64, Dyn, Dyn>,
    solve_eps: f64,
}

impl ZernikeBasis {
    pub fn build(grid: &ApertureGrid, n_modes: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::Config {
                path: "basis.n_modes".into(),
                message: "must be at least 1".into(),
            });
        }
        grid.validate()?;
        let mask = grid.mask();
        let mask_idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if mask_idx.len() < n_modes {
            return Err(Error::Dimension {
                context: "basis build: aperture pixels vs modes".into(),
                expected: n_modes,
                got: mask_idx.len(),
            });
        }
        let nm: Vec<(usize, i32)> = (1..=n_modes).map(|j| noll_to_nm(j).unwrap()).collect();
        let r_ap = grid.diameter_px / 2.0;
        let mut phi = DMatrix::zeros(mask_idx.len(), n_modes);
        for (row_out, &pix) in mask_idx.iter().enumerate() {
            let row = pix / grid.width_px;
            let col = pix % grid.width_px;
            let dx = col as f64 - grid.center_px.0;
            let dy = -(row as f64 - grid.center_px.1);
            let rho = (dx * dx + dy * dy).sqrt() / r_ap;
            let az = dy.atan2(dx);
            for (c, &(n, m)) in nm.iter().enumerate() {
                phi[(row_out, c)] = evaluate(n, m, rho, az);
            }
        }
        let svd = phi.clone().svd(true, true);
        let sv_max = svd.singular_values.max();
        let solve_eps = sv_max * mask_idx.len().max(n_modes) as f64 * f64::EPSILON;
        let rank = svd.singular_values.iter().filter(|&&s| s > solve_eps).count();
        if rank < n_modes {
            return Err(Error::RankDeficient {
                context: format!(
                    "basis sample matrix rank {rank} < {n_modes} modes on {} aperture pixels",
                    mask_idx.len()
                ),
            });
        }
        Ok(ZernikeBasis {
            grid: grid.clone(),
            n_modes,
            nm,
            mask_idx,
            phi,
            svd,
            solve_eps,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn grid(&self) -> &ApertureGrid {
        &self.grid
    }

    pub fn mask_len(&self) -> usize {
        self.mask_idx.len()
    }

    pub fn sample_matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// (radial degree, azimuthal frequency) for basis column j0 (0-based).
    pub fn mode_nm(&self, j0: usize) -> (usize, i32) {
        self.nm[j0]
    }

    /// Heights at aperture pixels, in mask order.
    pub fn masked_heights(&self, surface: &SurfaceMap) -> Result<DVector<f64>> {
        if surface.heights_um.len() != self.grid.n_pixels() {
            return Err(Error::Dimension {
                context: "masked_heights".into(),
                expected: self.grid.n_pixels(),
                got: surface.heights_um.len(),
            });
        }
        Ok(DVector::from_iterator(
            self.mask_idx.len(),
            self.mask_idx.iter().map(|&i| surface.heights_um[i]),
        ))
    }

    /// Least-squares coefficients for heights given in mask order.
    pub fn fit_masked(&self, heights: &DVector<f64>) -> Result<ZernikeCoeffs> {
        if heights.len() != self.mask_idx.len() {
            return Err(Error::Dimension {
                context: "fit_masked".into(),
                expected: self.mask_idx.len(),
                got: heights.len(),
            });
        }
        self.svd
            .solve(heights, self.solve_eps)
            .map(|m| DVector::from_column_slice(m.as_slice()))
            .map_err(|msg| Error::Numerical {
                context: "zernike fit".into(),
                message: msg.into(),
            })
    }

    pub fn fit(&self, surface: &SurfaceMap) -> Result<ZernikeCoeffs> {
        let h = self.masked_heights(surface)?;
        self.fit_masked(&h)
    }

    /// Basis combination at aperture pixels, in mask order.
    pub fn synthesize_masked(&self, coeffs: &ZernikeCoeffs) -> Result<DVector<f64>> {
        if coeffs.len() != self.n_modes {
            return Err(Error::Dimension {
                context: "synthesize".into(),
                expected: self.n_modes,
                got: coeffs.len(),
            });
        }
        Ok(&self.phi * coeffs)
    }

    /// Basis combination scattered back onto the full grid; zero outside.
    pub fn synthesize(&self, coeffs: &ZernikeCoeffs) -> Result<SurfaceMap> {
        let vals = self.synthesize_masked(coeffs)?;
        let mut surface = SurfaceMap::zeros(&self.grid);
        for (v, &i) in vals.iter().zip(&self.mask_idx) {
            surface.heights_um[i] = *v;
        }
        Ok(surface)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noll_table_first_fifteen() {
        let expect = [
            (0, 0),
            (1, 1),
            (1, -1),
            (2, 0),
            (2, -2),
            (2, 2),
            (3, -1),
            (3, 1),
            (3, -3),
            (3, 3),
            (4, 0),
            (4, 2),
            (4, -2),
            (4, 4),
            (4, -4),
        ];
        for (j0, &nm) in expect.iter().enumerate() {
            assert_eq!(noll_to_nm(j0 + 1).unwrap(), nm, "j = {}", j0 + 1);
        }
    }

    #[test]
    fn noll_inverse_round_trip() {
        for j in 1..=200 {
            let (n, m) = noll_to_nm(j).unwrap();
            assert_eq!(nm_to_noll(n, m).unwrap(), j);
        }
        assert_eq!(nm_to_noll(4, 2).unwrap(), 12);
        assert_eq!(nm_to_noll(6, 2).unwrap(), 24);
    }

    #[test]
    fn radial_matches_closed_forms() {
        for &rho in &[0.0, 0.17, 0.44, 0.63, 0.85, 1.0] {
            let r2 = rho * rho;
            assert!((radial(2, 0, rho) - (2.0 * r2 - 1.0)).abs() < 1e-14);
            assert!((radial(3, 1, rho) - (3.0 * r2 - 2.0) * rho).abs() < 1e-14);
            assert!((radial(4, 0, rho) - (6.0 * r2 * r2 - 6.0 * r2 + 1.0)).abs() < 1e-13);
            assert!((radial(4, 2, rho) - (4.0 * r2 - 3.0) * r2).abs() < 1e-13);
            assert!((radial(6, 2, rho) - ((15.0 * r2 - 20.0) * r2 + 6.0) * r2).abs() < 1e-13);
        }
    }

    #[test]
    fn radial_is_one_at_rim() {
        for j in 1..=66 {
            let (n, m) = noll_to_nm(j).unwrap();
            assert!(
                (radial(n, m.unsigned_abs() as usize, 1.0) - 1.0).abs() < 1e-10,
                "R_{n}^{m}(1) != 1"
            );
        }
    }

    fn desk_grid() -> ApertureGrid {
        ApertureGrid::centered(64, 64, 60.0, 75.0).unwrap()
    }

    #[test]
    fn single_mode_basis_is_constant_piston() {
        let basis = ZernikeBasis::build(&desk_grid(), 1).unwrap();
        let col = basis.sample_matrix().column(0);
        assert!(col.iter().all(|&v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn gram_matrix_near_scaled_identity() {
        // discrete inner products over the mask, accumulated directly
        let basis = ZernikeBasis::build(&desk_grid(), 36).unwrap();
        let phi = basis.sample_matrix();
        let p = phi.nrows();
        let mut worst_ratio = 0.0f64;
        for a in 0..36 {
            for b in 0..=a {
                let mut acc = 0.0;
                for r in 0..p {
                    acc += phi[(r, a)] * phi[(r, b)];
                }
                let g = acc / p as f64;
                if a == b {
                    assert!((g - 1.0).abs() < 0.05, "diagonal {a}: {g}");
                } else {
                    worst_ratio = worst_ratio.max(g.abs());
                }
            }
        }
        assert!(worst_ratio < 0.05, "worst off-diagonal {worst_ratio}");
    }

    #[test]
    fn fit_recovers_exact_basis_column() {
        let basis = ZernikeBasis::build(&desk_grid(), 15).unwrap();
        let j = 11; // column of the (4, 2) mode
        let col = basis.sample_matrix().column(j).clone_owned();
        let c = basis.fit_masked(&col).unwrap();
        for i in 0..15 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((c[i] - want).abs() < 1e-10, "coeff {i} = {}", c[i]);
        }
    }

    #[test]
    fn fit_zero_surface_is_zero() {
        let grid = desk_grid();
        let basis = ZernikeBasis::build(&grid, 15).unwrap();
        let c = basis.fit(&SurfaceMap::zeros(&grid)).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesize_fit_round_trip() {
        let basis = ZernikeBasis::build(&desk_grid(), 28).unwrap();
        let c = DVector::from_fn(28, |i, _| ((i as f64) * 1.3).sin() * 0.4);
        let s = basis.synthesize(&c).unwrap();
        let back = basis.fit(&s).unwrap();
        let rel = (&back - &c).norm() / c.norm();
        assert!(rel < 1e-10, "relative error {rel}");
    }

    #[test]
    fn synthesize_piston_is_constant_inside_zero_outside() {
        let grid = desk_grid();
        let basis = ZernikeBasis::build(&grid, 4).unwrap();
        let mut c = DVector::zeros(4);
        c[0] = 0.7;
        let s = basis.synthesize(&c).unwrap();
        for (i, &inside) in s.mask.iter().enumerate() {
            if inside {
                assert!((s.heights_um[i] - 0.7).abs() < 1e-14);
            } else {
                assert_eq!(s.heights_um[i], 0.0);
            }
        }
    }

    #[test]
    fn nested_basis_residual_non_increasing() {
        let grid = desk_grid();
        // out-of-basis content: a sharp off-center bump
        let mut s = SurfaceMap::zeros(&grid);
        for row in 0..64 {
            for col in 0..64 {
                let dx = col as f64 - 40.0;
                let dy = row as f64 - 25.0;
                let i = s.idx(row, col);
                s.heights_um[i] = (-(dx * dx + dy * dy) / 50.0).exp();
            }
        }
        let mut prev = f64::INFINITY;
        for &n in &[6usize, 15, 28, 45] {
            let basis = ZernikeBasis::build(&grid, n).unwrap();
            let h = basis.masked_heights(&s).unwrap();
            let c = basis.fit_masked(&h).unwrap();
            let resid = (&h - basis.synthesize_masked(&c).unwrap()).norm();
            assert!(resid <= prev + 1e-12, "residual grew at n = {n}");
            prev = resid;
        }
    }

    #[test]
    fn build_rejects_more_modes_than_pixels() {
        let grid = ApertureGrid::centered(8, 8, 7.0, 100.0).unwrap();
        let err = ZernikeBasis::build(&grid, 60).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. } | Error::RankDeficient { .. }));
    }

    #[test]
    fn build_is_deterministic() {
        let a = ZernikeBasis::build(&desk_grid(), 15).unwrap();
        let b = ZernikeBasis::build(&desk_grid(), 15).unwrap();
        assert_eq!(a.sample_matrix(), b.sample_matrix());
    }
}
