//! Turns a finished run directory into plots and a text digest: two
//! convergence curves (SVG) and four surface heat maps (PNG).

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{RunSummary, ITERATIONS_CSV_HEADER};
use crate::grid::{write_atomic, SurfaceMap};
use image::{imageops, Rgb, RgbImage};
use plotters::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct CsvRow {
    pub k: usize,
    pub epsilon_norm: f64,
    pub rms_global: f64,
    pub rms_central: f64,
}

pub fn read_iterations_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == ITERATIONS_CSV_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: format!("unexpected header `{header}`"),
            })
        }
        None => {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: "empty file".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let ncols = ITERATIONS_CSV_HEADER.split(',').count();
        if cells.len() != ncols {
            return Err(Error::Parse {
                path: path.into(),
                line: idx + 1,
                message: format!("{} cells, expected {ncols}", cells.len()),
            });
        }
        let field = |i: usize| -> Result<f64> {
            cells[i].parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: idx + 1,
                message: format!("bad float `{}`", cells[i]),
            })
        };
        rows.push(CsvRow {
            k: cells[0].parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: idx + 1,
                message: format!("bad index `{}`", cells[0]),
            })?,
            epsilon_norm: field(1)?,
            rms_global: field(2)?,
            rms_central: field(3)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: "no data rows".into(),
        });
    }
    Ok(rows)
}

fn chart_err(path: &Path) -> impl Fn(Box<dyn std::error::Error + '_>) -> Error + '_ {
    move |e| Error::Artifact {
        path: path.into(),
        message: e.to_string(),
    }
}

type Series<'a> = (&'a str, Vec<(f64, f64)>, RGBColor);

/// One chart, one or two series. Switches the y axis to log scale when every
/// value is positive and the dynamic range warrants it.
fn line_chart(path: &Path, title: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let xs: Vec<f64> = series.iter().flat_map(|(_, pts, _)| pts.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|(_, pts, _)| pts.iter().map(|p| p.1)).collect();
    let x_lo = xs.iter().cloned().fold(f64::INFINITY, f64::min) - 0.5;
    let x_hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 0.5;
    let y_min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_y = y_min > 0.0 && y_max / y_min > 50.0;

    let root = SVGBackend::new(path, (860, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| chart_err(path)(Box::new(e)))?;
    let mut builder = ChartBuilder::on(&root);
    builder
        .caption(title, ("sans-serif", 22))
        .margin(14)
        .x_label_area_size(42)
        .y_label_area_size(68);

    if log_y {
        let y_lo = y_min * 0.8;
        let y_hi = y_max * 1.25;
        let mut chart = builder
            .build_cartesian_2d(x_lo..x_hi, (y_lo..y_hi).log_scale())
            .map_err(|e| chart_err(path)(Box::new(e)))?;
        chart
            .configure_mesh()
            .x_desc("iteration k")
            .y_desc(y_label)
            .draw()
            .map_err(|e| chart_err(path)(Box::new(e)))?;
        for (name, pts, color) in series {
            let c = *color;
            chart
                .draw_series(LineSeries::new(pts.iter().cloned(), c.stroke_width(2)))
                .map_err(|e| chart_err(path)(Box::new(e)))?
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.85))
            .draw()
            .map_err(|e| chart_err(path)(Box::new(e)))?;
    } else {
        let pad = ((y_max - y_min) * 0.08).max(1e-12);
        let mut chart = builder
            .build_cartesian_2d(x_lo..x_hi, (y_min - pad)..(y_max + pad))
            .map_err(|e| chart_err(path)(Box::new(e)))?;
        chart
            .configure_mesh()
            .x_desc("iteration k")
            .y_desc(y_label)
            .draw()
            .map_err(|e| chart_err(path)(Box::new(e)))?;
        for (name, pts, color) in series {
            let c = *color;
            chart
                .draw_series(LineSeries::new(pts.iter().cloned(), c.stroke_width(2)))
                .map_err(|e| chart_err(path)(Box::new(e)))?
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.85))
            .draw()
            .map_err(|e| chart_err(path)(Box::new(e)))?;
    }
    root.present().map_err(|e| chart_err(path)(Box::new(e)))?;
    Ok(())
}

const SEQ_STOPS: [[f64; 3]; 11] = [
    [0.267, 0.005, 0.329],
    [0.283, 0.141, 0.458],
    [0.254, 0.265, 0.530],
    [0.207, 0.372, 0.553],
    [0.164, 0.471, 0.558],
    [0.128, 0.567, 0.551],
    [0.135, 0.659, 0.518],
    [0.267, 0.749, 0.441],
    [0.478, 0.821, 0.3182],
    [0.741, 0.873, 0.150],
    [0.993, 0.906, 0.144],
];

fn color_seq(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0) * (SEQ_STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(SEQ_STOPS.len() - 2);
    let f = t - i as f64;
    let mut c = [0u8; 3];
    for ch in 0..3 {
        let v = SEQ_STOPS[i][ch] * (1.0 - f) + SEQ_STOPS[i + 1][ch] * f;
        c[ch] = (v * 255.0).round() as u8;
    }
    Rgb(c)
}

/// t in [-1, 1], blue through near-white to red.
fn color_div(t: f64) -> Rgb<u8> {
    let t = t.clamp(-1.0, 1.0);
    let (a, b, f) = if t < 0.0 {
        ([0.230, 0.299, 0.754], [0.865, 0.865, 0.865], t + 1.0)
    } else {
        ([0.865, 0.865, 0.865], [0.706, 0.016, 0.150], t)
    };
    let mut c = [0u8; 3];
    for ch in 0..3 {
        let v = a[ch] * (1.0 - f) + b[ch] * f;
        c[ch] = (v * 255.0).round() as u8;
    }
    Rgb(c)
}

const BACKGROUND: Rgb<u8> = Rgb([58, 58, 64]);

fn heatmap<F>(path: &Path, width: usize, height: usize, value_at: F, lo: f64, hi: f64, diverging: bool) -> Result<()>
where
    F: Fn(usize, usize) -> Option<f64>,
{
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        match value_at(y as usize, x as usize) {
            None => BACKGROUND,
            Some(v) => {
                if diverging {
                    let a = hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE);
                    color_div(v / a)
                } else {
                    let span = (hi - lo).max(f64::MIN_POSITIVE);
                    color_seq((v - lo) / span)
                }
            }
        }
    });
    let scale = (384 / width.max(height)).max(1) as u32;
    let scaled = imageops::resize(
        &img,
        width as u32 * scale,
        height as u32 * scale,
        imageops::FilterType::Nearest,
    );
    scaled.save(path).map_err(|e| Error::Artifact {
        path: path.into(),
        message: e.to_string(),
    })
}

fn masked_extrema(maps: &[&SurfaceMap]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for map in maps {
        for (h, &inside) in map.heights_um.iter().zip(&map.mask) {
            if inside {
                lo = lo.min(*h);
                hi = hi.max(*h);
            }
        }
    }
    (lo, hi)
}

fn text_digest(summary: &RunSummary, rows: &[CsvRow]) -> String {
    let first = rows.first().expect("csv rows checked non-empty");
    let last = rows.last().expect("csv rows checked non-empty");
    format!(
        "run digest\n\
         ==========\n\
         estimator: {}\n\
         seed: {}\n\
         basis modes: {}   actuators: {}   probes: {}\n\
         target: {}\n\
         probe conditioning (B Bt): {:.6e}\n\
         init residual (Frobenius): {:.6e}\n\
         iterations: {}\n\
         best k: {}\n\
         rms central at best: {:.6e} um (first {:.6e}, last {:.6e})\n\
         rms global at best: {:.6e} um (first {:.6e}, last {:.6e})\n\
         produced P-V at best: {:.6} um (desired {:.6})\n\
         solves not converged: {}\n",
        summary.estimator,
        summary.seed,
        summary.n_modes,
        summary.m_actuators,
        summary.s_probes,
        summary.target,
        summary.condition_bbt,
        summary.init_residual_fro,
        summary.iterations,
        summary.best_k,
        summary.best_rms_central_um,
        first.rms_central,
        last.rms_central,
        summary.best_rms_global_um,
        first.rms_global,
        last.rms_global,
        summary.best_pv_produced_um,
        summary.pv_desired_um,
        summary.bvls_nonconverged,
    )
}

/// Renders plots and a text digest for a finished run directory. Returns the
/// paths written.
pub fn render_run(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let summary = RunSummary::load_json(&run_dir.join("summary.json"))?;
    let rows = read_iterations_csv(&run_dir.join("iterations.csv"))?;
    let grid = cfg.grid.build()?;
    let desired = SurfaceMap::read_binary(&run_dir.join("desired.surf"), &grid)?;
    let produced = SurfaceMap::read_binary(&run_dir.join("produced_best.surf"), &grid)?;

    let plots = run_dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut written = Vec::new();

    let eps_path = plots.join("epsilon.svg");
    let eps_pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.k as f64, r.epsilon_norm)).collect();
    line_chart(
        &eps_path,
        "innovation norm per iteration",
        "|epsilon|",
        &[("|epsilon|", eps_pts, RGBColor(31, 119, 180))],
    )?;
    written.push(eps_path);

    let rms_path = plots.join("rms.svg");
    let g_pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.k as f64, r.rms_global)).collect();
    let c_pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.k as f64, r.rms_central)).collect();
    line_chart(
        &rms_path,
        "surface error per iteration",
        "rms error (um)",
        &[
            ("global", g_pts, RGBColor(214, 39, 40)),
            ("central", c_pts, RGBColor(44, 160, 44)),
        ],
    )?;
    written.push(rms_path);

    let (lo, hi) = masked_extrema(&[&desired, &produced]);
    let surf_value = |map: &SurfaceMap| {
        let heights = map.heights_um.clone();
        let mask = map.mask.clone();
        let w = map.width();
        move |r: usize, c: usize| {
            let i = r * w + c;
            if mask[i] {
                Some(heights[i])
            } else {
                None
            }
        }
    };

    let desired_path = plots.join("desired.png");
    heatmap(&desired_path, grid.width_px, grid.height_px, surf_value(&desired), lo, hi, false)?;
    written.push(desired_path);

    let produced_path = plots.join("produced.png");
    heatmap(&produced_path, grid.width_px, grid.height_px, surf_value(&produced), lo, hi, false)?;
    written.push(produced_path);

    let err_at = {
        let w = grid.width_px;
        let d = desired.heights_um.clone();
        let p = produced.heights_um.clone();
        let mask = desired.mask.clone();
        move |r: usize, c: usize| {
            let i = r * w + c;
            if mask[i] {
                Some(p[i] - d[i])
            } else {
                None
            }
        }
    };
    let mut err_abs_global: f64 = 0.0;
    let mut err_abs_central: f64 = 0.0;
    let central_radius = cfg.control.crop_fraction * grid.diameter_px / 2.0;
    let in_central = |r: usize, c: usize| {
        let dx = c as f64 - grid.center_px.0;
        let dy = r as f64 - grid.center_px.1;
        (dx * dx + dy * dy).sqrt() <= central_radius
    };
    for r in 0..grid.height_px {
        for c in 0..grid.width_px {
            if let Some(e) = err_at(r, c) {
                err_abs_global = err_abs_global.max(e.abs());
                if in_central(r, c) {
                    err_abs_central = err_abs_central.max(e.abs());
                }
            }
        }
    }

    let err_global_path = plots.join("error_global.png");
    heatmap(
        &err_global_path,
        grid.width_px,
        grid.height_px,
        &err_at,
        -err_abs_global,
        err_abs_global,
        true,
    )?;
    written.push(err_global_path);

    let err_central_path = plots.join("error_central.png");
    let err_central = |r: usize, c: usize| {
        if in_central(r, c) {
            err_at(r, c)
        } else {
            None
        }
    };
    heatmap(
        &err_central_path,
        grid.width_px,
        grid.height_px,
        err_central,
        -err_abs_central,
        err_abs_central,
        true,
    )?;
    written.push(err_central_path);

    let digest_path = run_dir.join("report.txt");
    write_atomic(&digest_path, text_digest(&summary, &rows).as_bytes())?;
    written.push(digest_path);

    Ok(written)
}
