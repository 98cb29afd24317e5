//! Runs experiments end to end: probe excitation, batch initialization,
//! the adaptive loop, and a directory of artifacts per run.

use crate::bvls::{self, BoxBounds};
use crate::config::{ExperimentConfig, DENSE_STATE_LIMIT};
use crate::control::{run_loop, BvlsDiag, IterationRecord};
use crate::error::{Error, Result};
use crate::estimator::{batch_init, generate_probes, EstimatorRegistry, DEFAULT_CONDITION_CAP};
use crate::grid::write_atomic;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const ITERATIONS_CSV_HEADER: &str = "k,epsilon_norm,rms_global,rms_central,pv_produced,\
bvls_iterations,bvls_kkt_residual,bvls_converged,bvls_objective,bvls_active_lower,\
bvls_active_upper,u_min,u_max,u_mean";

pub const SWEEP_CSV_HEADER: &str = "n_modes,status,best_k,best_rms_central,best_rms_global,condition_bbt";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub estimator_override: Option<String>,
    pub seed_override: Option<u64>,
    pub plots: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub estimator: String,
    pub seed: u64,
    pub n_modes: usize,
    pub m_actuators: usize,
    pub s_probes: usize,
    pub iterations: usize,
    pub target: String,
    pub condition_bbt: f64,
    pub init_residual_fro: f64,
    pub best_k: usize,
    pub best_rms_central_um: f64,
    pub best_rms_global_um: f64,
    pub best_pv_produced_um: f64,
    pub pv_desired_um: f64,
    pub final_rms_central_um: f64,
    pub final_rms_global_um: f64,
    pub bvls_nonconverged: usize,
}

pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub summary: RunSummary,
    pub records: Vec<IterationRecord>,
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn csv_line(r: &IterationRecord) -> String {
    let u_min = r.u.min();
    let u_max = r.u.max();
    let u_mean = r.u.mean();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.k,
        fmt_f(r.epsilon_norm),
        fmt_f(r.rms_global),
        fmt_f(r.rms_central),
        fmt_f(r.pv_produced),
        r.bvls.iterations,
        fmt_f(r.bvls.kkt_residual),
        r.bvls.converged,
        fmt_f(r.bvls.objective),
        r.bvls.active_lower,
        r.bvls.active_upper,
        fmt_f(u_min),
        fmt_f(u_max),
        fmt_f(u_mean),
    )
}

pub fn write_iterations_csv(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut out = String::from(ITERATIONS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&csv_line(r));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

impl RunSummary {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::Artifact {
            path: path.into(),
            message: e.to_string(),
        })?;
        write_atomic(path, &bytes)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.into(),
            line: 0,
            message: e.to_string(),
        })
    }
}

/// Runs the full pipeline with the estimator named in the (possibly
/// overridden) config and writes every artifact under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, opts: &RunOptions) -> Result<RunArtifacts> {
    let mut effective = cfg.clone();
    if let Some(seed) = opts.seed_override {
        effective.seed = seed;
    }
    if let Some(name) = &opts.estimator_override {
        effective.control.estimator = name.clone();
    }
    effective.output_dir = Some(out_dir.to_path_buf());
    effective.validate()?;
    run_resolved(&effective, out_dir, opts.plots)
}

/// Same pipeline with the estimator pinned to the non-adapting baseline.
pub fn run_baseline(cfg: &ExperimentConfig, out_dir: &Path, opts: &RunOptions) -> Result<RunArtifacts> {
    let mut effective = cfg.clone();
    if let Some(seed) = opts.seed_override {
        effective.seed = seed;
    }
    effective.control.estimator = "frozen".into();
    effective.output_dir = Some(out_dir.to_path_buf());
    effective.validate()?;
    run_resolved(&effective, out_dir, opts.plots)
}

fn run_resolved(cfg: &ExperimentConfig, out_dir: &Path, plots: bool) -> Result<RunArtifacts> {
    let setup = cfg.build()?;
    let m = setup.m;
    let n = setup.basis.n_modes();
    if cfg.control.estimator == "dense" && n * m > DENSE_STATE_LIMIT {
        return Err(Error::Config {
            path: "control.estimator".into(),
            message: format!("dense form at n*m = {} exceeds the {DENSE_STATE_LIMIT} state limit", n * m),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // plant iterations 0..s-1 are consumed by probing; the loop starts at s
    let probes = generate_probes(m, cfg.s_probes, cfg.theta_assumed, cfg.seed, |u, j| {
        setup.plant.observe(&setup.basis, u, j)
    })?;
    let init = batch_init(&probes, DEFAULT_CONDITION_CAP)?;

    let registry = EstimatorRegistry::with_builtin();
    let estimator = registry.create(&cfg.control.estimator, &init.l0_hat, cfg.control.delta, cfg.control.beta)?;

    let bounds = BoxBounds::unit(m);
    let first = bvls::solve(
        &init.l0_hat,
        &setup.target.z_d,
        &bounds,
        bvls::DEFAULT_TOL,
        bvls::default_max_iter(m),
    )?;
    let init_diag = BvlsDiag::from(&first);

    let output = run_loop(
        &setup.plant,
        &setup.basis,
        &setup.target,
        estimator,
        first.b_star.clone(),
        init_diag,
        &cfg.control,
        cfg.theta_assumed,
        cfg.s_probes,
    )?;

    let best = &output.records[output.best_index];
    let desired = setup.basis.synthesize(&setup.target.z_d)?;
    let produced_best = setup.basis.synthesize(&output.z_history[output.best_index])?;
    let last = output.records.last().expect("loop produced no records");

    let summary = RunSummary {
        schema_version: 1,
        estimator: cfg.control.estimator.clone(),
        seed: cfg.seed,
        n_modes: n,
        m_actuators: m,
        s_probes: cfg.s_probes,
        iterations: cfg.control.iterations,
        target: setup.target.description.clone(),
        condition_bbt: init.condition_bbt,
        init_residual_fro: init.residual_fro,
        best_k: best.k,
        best_rms_central_um: best.rms_central,
        best_rms_global_um: best.rms_global,
        best_pv_produced_um: best.pv_produced,
        pv_desired_um: desired.peak_to_valley()?,
        final_rms_central_um: last.rms_central,
        final_rms_global_um: last.rms_global,
        bvls_nonconverged: output.records.iter().filter(|r| !r.bvls.converged).count(),
    };

    let snapshot_toml = cfg.to_toml()?;
    write_atomic(&out_dir.join("config.toml"), snapshot_toml.as_bytes())?;
    probes.save(out_dir, "probes")?;
    write_iterations_csv(&out_dir.join("iterations.csv"), &output.records)?;
    output.final_snapshot.save_json(&out_dir.join("estimator_state.json"))?;
    desired.write_binary(&out_dir.join("desired.surf"))?;
    produced_best.write_binary(&out_dir.join("produced_best.surf"))?;
    if cfg.control.record_checkpoints {
        let ck_dir = out_dir.join("checkpoints");
        std::fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
        for ck in &output.checkpoints {
            let bytes = serde_json::to_vec(ck).map_err(|e| Error::Artifact {
                path: ck_dir.clone(),
                message: e.to_string(),
            })?;
            write_atomic(&ck_dir.join(format!("checkpoint_{:05}.json", ck.k)), &bytes)?;
        }
    }
    summary.save_json(&out_dir.join("summary.json"))?;
    if plots {
        crate::report::render_run(out_dir)?;
    }

    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        summary,
        records: output.records,
    })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub n_modes: usize,
    pub status: String,
    pub best_k: Option<usize>,
    pub best_rms_central: Option<f64>,
    pub best_rms_global: Option<f64>,
    pub condition_bbt: Option<f64>,
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let opt_u = |v: &Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        let opt_f = |v: &Option<f64>| v.map(fmt_f).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.n_modes,
            r.status,
            opt_u(&r.best_k),
            opt_f(&r.best_rms_central),
            opt_f(&r.best_rms_global),
            opt_f(&r.condition_bbt),
        ));
    }
    out
}

/// Repeats the run across basis sizes. Probe voltages share the raw seed, so
/// every point excites the plant identically; each point refits its own
/// basis. A failing point is recorded and skipped rather than aborting the
/// sweep.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    n_list: &[usize],
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<Vec<SweepRow>> {
    if n_list.is_empty() {
        return Err(Error::Config {
            path: "sweep".into(),
            message: "empty mode-count list".into(),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    for &n in n_list {
        let mut point = cfg.clone();
        point.n_modes = n;
        let sub = out_dir.join(format!("runs/n_{n:04}"));
        match run_experiment(&point, &sub, opts) {
            Ok(art) => rows.push(SweepRow {
                n_modes: n,
                status: "ok".into(),
                best_k: Some(art.summary.best_k),
                best_rms_central: Some(art.summary.best_rms_central_um),
                best_rms_global: Some(art.summary.best_rms_global_um),
                condition_bbt: Some(art.summary.condition_bbt),
            }),
            Err(e) => rows.push(SweepRow {
                n_modes: n,
                status: format!("{}: {e}", e.category()),
                best_k: None,
                best_rms_central: None,
                best_rms_global: None,
                condition_bbt: None,
            }),
        }
    }
    write_atomic(&out_dir.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    if rows.iter().all(|r| r.status != "ok") {
        return Err(Error::Numerical {
            context: "sweep".into(),
            message: "every sweep point failed".into(),
        });
    }
    Ok(rows)
}
