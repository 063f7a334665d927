//! End-to-end twin experiment: stages, sweeps and reports.
//!
//! Every stage reads its inputs from and writes its outputs to the run
//! directory, so the CLI can run stages one at a time.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ExperimentConfig, SweepAxis};
use crate::diagnostics::{
    field_rmse, forecast_ics, hovmoller, lyapunov_spectrum, mean_state, rmse_a, rmse_f, rmse_lyapunov,
    welch_psd, ForecastSkill, LyapunovSpectrum, PowerSpectrum,
};
use crate::dynamics::free_run;
use crate::enkf::{run_filter, Ensemble, FilterConfig};
use crate::error::{Error, Result};
use crate::hybrid::{
    initialize_from_field, read_history, resume_state, run_hybrid, Checkpoints, CycleRecord, Reference,
};
use crate::interp::cubic_interpolate;
use crate::io::{self, MetricRecord};
use crate::l96::{default_initial_state, generate_truth, Trajectory};
use crate::net::{NetworkParameters, Surrogate};
use crate::obs::sample_observations;

/// File layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.file("config.toml")
    }
    pub fn truth(&self) -> PathBuf {
        self.file("truth.bin")
    }
    pub fn observations(&self) -> PathBuf {
        self.file("observations.bin")
    }
    pub fn interpolated(&self) -> PathBuf {
        self.file("interpolated.bin")
    }
    pub fn interp_mask(&self) -> PathBuf {
        self.file("interpolated_mask.bin")
    }
    pub fn init_weights(&self) -> PathBuf {
        self.file("init_weights.bin")
    }
    pub fn init_log(&self) -> PathBuf {
        self.file("init_training.csv")
    }
    pub fn checkpoints(&self) -> Checkpoints {
        Checkpoints::new(self.file("checkpoints"))
    }
    pub fn best_weights(&self) -> PathBuf {
        self.file("best_weights.bin")
    }
    pub fn hybrid_summary(&self) -> PathBuf {
        self.file("hybrid.json")
    }
    pub fn history(&self) -> PathBuf {
        self.file("history.csv")
    }
    pub fn convergence(&self) -> PathBuf {
        self.file("convergence.csv")
    }
    pub fn surrogate_analysis(&self) -> PathBuf {
        self.file("surrogate_analysis.bin")
    }
    pub fn metrics(&self) -> PathBuf {
        self.file("metrics.jsonl")
    }
    pub fn failures(&self) -> PathBuf {
        self.file("failures.json")
    }
    pub fn rmse_f_curve(&self) -> PathBuf {
        self.file("rmse_f.csv")
    }
    pub fn psd(&self) -> PathBuf {
        self.file("psd.csv")
    }
    pub fn lyapunov(&self) -> PathBuf {
        self.file("lyapunov.csv")
    }
    pub fn hovmoller(&self, which: &str) -> PathBuf {
        self.file(&format!("hovmoller_{which}.csv"))
    }
    pub fn report(&self) -> PathBuf {
        self.file("report.json")
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

fn write_config(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    fs::create_dir_all(&paths.root)?;
    fs::write(paths.config(), cfg.to_toml())?;
    Ok(())
}

pub fn generate_truth_stage(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Trajectory> {
    write_config(cfg, paths)?;
    let p = cfg.model.params();
    let traj = generate_truth(&default_initial_state(&p), cfg.model.steps, &p, cfg.model.spinup)?;
    io::write_trajectory(&paths.truth(), &traj)?;
    Ok(traj)
}

pub fn observe_stage(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    let truth = io::read_trajectory(&paths.truth())?;
    let obs = sample_observations(&truth, cfg.obs_count()?, cfg.observations.sigma_obs, cfg.observations.seed)?;
    io::write_observations(&paths.observations(), &obs)
}

pub fn interp_stage(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<f64> {
    let obs = io::read_observations(&paths.observations())?;
    let field = cubic_interpolate(&obs, cfg.observations.scheme)?;
    io::write_interpolated(&paths.interpolated(), &paths.interp_mask(), &field, cfg.model.h)?;
    let rmse = match io::read_trajectory(&paths.truth()) {
        Ok(truth) => field_rmse(&field.states, &truth, cfg.evaluation.k0)?,
        Err(_) => f64::NAN,
    };
    Ok(rmse)
}

fn stamp_path(paths: &RunPaths) -> PathBuf {
    paths.checkpoints().dir.join("config_hash")
}

fn stamp_matches(cfg: &ExperimentConfig, paths: &RunPaths) -> bool {
    fs::read_to_string(stamp_path(paths)).is_ok_and(|s| s.trim() == cfg.hash())
}

/// Trains the warm-start network. With `reuse`, an existing network from a
/// run with the same configuration is kept.
pub fn init_stage(cfg: &ExperimentConfig, paths: &RunPaths, reuse: bool) -> Result<NetworkParameters> {
    if reuse && stamp_matches(cfg, paths) {
        if let Ok(p) = io::read_weights(&paths.init_weights(), Some(&cfg.network)) {
            log::info!("reusing {}", paths.init_weights().display());
            return Ok(p);
        }
    }
    let field = io::read_interpolated(&paths.interpolated(), &paths.interp_mask())?;
    let (params, report) = initialize_from_field(&field, &cfg.hybrid, cfg.network)?;
    io::write_weights(&paths.init_weights(), &params)?;
    io::write_training_log(&paths.init_log(), &report)?;
    let cp = paths.checkpoints();
    // a new warm start invalidates old cycles
    crate::hybrid::clear_checkpoints(&cp)?;
    fs::create_dir_all(&cp.dir)?;
    fs::write(stamp_path(paths), cfg.hash())?;
    Ok(params)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HybridSummary {
    pub best_cycle: Option<usize>,
    pub cycles_run: usize,
    pub bypass_da: bool,
}

fn reference_ics(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    forecast_ics(&cfg.model.params(), &cfg.evaluation.forecast_ics)
}

/// Runs the cycles, resuming from checkpoints written under the same config.
pub fn hybrid_stage(cfg: &ExperimentConfig, paths: &RunPaths, resume: bool) -> Result<HybridSummary> {
    let best_path = paths.best_weights();
    if best_path.exists() {
        fs::remove_file(&best_path)?;
    }
    let mut summary = HybridSummary {
        bypass_da: cfg.hybrid.bypass_da,
        ..HybridSummary::default()
    };
    if cfg.hybrid.cycles > 0 {
        let init = io::read_weights(&paths.init_weights(), Some(&cfg.network))?;
        let obs = io::read_observations(&paths.observations())?;
        let truth = io::read_trajectory(&paths.truth())?;
        let model = cfg.model.params();
        let ics = reference_ics(cfg)?;
        let reference = Reference::new(&truth, &model, &ics, cfg.evaluation.k0);
        let cp = paths.checkpoints();
        let (start, history) = match resume && stamp_matches(cfg, paths) {
            true => resume_state(&cp, &cfg.network)?.unwrap_or((init, vec![])),
            false => {
                crate::hybrid::clear_checkpoints(&cp)?;
                fs::create_dir_all(&cp.dir)?;
                fs::write(stamp_path(paths), cfg.hash())?;
                (init, vec![])
            }
        };
        if !history.is_empty() {
            log::info!("resuming after cycle {}", history.len());
        }
        let out = run_hybrid(
            start,
            &obs,
            &cfg.hybrid,
            truth.state(0),
            model.h,
            Some(&reference),
            Some(&cp),
            history,
        )?;
        io::write_weights(&best_path, &out.best)?;
        crate::hybrid::write_history(&paths.history(), &out.history)?;
        write_convergence(&paths.convergence(), &out.history)?;
        summary.best_cycle = out.best_cycle;
        summary.cycles_run = out.history.len();
    }
    fs::write(paths.hybrid_summary(), serde_json::to_string_pretty(&summary).expect("serializable"))?;
    Ok(summary)
}

fn write_convergence(path: &Path, history: &[CycleRecord]) -> Result<()> {
    io::write_csv(
        path,
        &["cycle", "rmse_f", "lambda1"],
        history.iter().map(|r| vec![r.cycle as f64, r.rmse_f, r.lambda1]),
    )
}

/// A metric that could not be computed, e.g. because the surrogate blew up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricFailure {
    pub metric: String,
    pub error: String,
}

#[derive(Default)]
struct Collector {
    metrics: Vec<MetricRecord>,
    failures: Vec<MetricFailure>,
}

impl Collector {
    fn push(&mut self, metric: &str, source: &str, value: f64, std: Option<f64>) {
        if !value.is_finite() {
            return self.fail(metric, &Error::non_finite(format!("{metric} = {value}")));
        }
        self.metrics.push(MetricRecord {
            metric: metric.into(),
            params: json!({ "source": source }),
            value,
            std,
        });
    }

    fn fail(&mut self, metric: &str, e: &Error) {
        log::warn!("{metric}: {e}");
        self.failures.push(MetricFailure {
            metric: metric.into(),
            error: e.to_string(),
        });
    }

    fn record<T>(&mut self, metric: &str, r: Result<T>) -> Option<T> {
        r.map_err(|e| self.fail(metric, &e)).ok()
    }
}

/// Steps per Lyapunov time for the true model's leading exponent.
pub fn lyapunov_time_steps(lambda1: f64, h: f64) -> f64 {
    1.0 / (lambda1 * h)
}

/// Forecast-horizon summary in Lyapunov time units.
pub fn saturation_lt(skill: &ForecastSkill, lt_steps: f64) -> Option<f64> {
    let lo = (8.0 * lt_steps).round() as usize;
    let hi = ((10.0 * lt_steps).round() as usize + 1).min(skill.rmse.len());
    if lo >= hi {
        return None;
    }
    skill.saturation_lead(lo..hi, 0.9).map(|l| l as f64 / lt_steps)
}

fn ratio_below(a: &PowerSpectrum, b: &PowerSpectrum, f_max: f64) -> f64 {
    a.frequencies
        .iter()
        .zip(a.densities.iter().zip(&b.densities))
        .filter(|(&f, _)| f < f_max)
        .map(|(_, (&x, &y))| (x / y).max(y / x))
        .fold(0.0, f64::max)
}

/// Computes every metric the artifacts allow and writes curves for plotting.
pub fn evaluate_stage(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Vec<MetricRecord>> {
    let ev = &cfg.evaluation;
    let model = cfg.model.params();
    let truth = io::read_trajectory(&paths.truth())?;
    let obs = io::read_observations(&paths.observations())?;
    let field = io::read_interpolated(&paths.interpolated(), &paths.interp_mask())?;
    let mut c = Collector::default();

    c.push("interp_rmse", "interpolated.bin", field_rmse(&field.states, &truth, ev.k0)?, None);

    let true_filter = FilterConfig {
        sigma_m: ev.true_model_sigma_m,
        ..cfg.filter
    };
    let ens = Ensemble::perturbed(truth.state(0), true_filter.n_members, true_filter.init_spread, true_filter.seed, 0)?;
    if let Some(a) = c.record("true_model_rmse_a", run_filter(&model, &obs, &true_filter, ens)) {
        c.push("true_model_rmse_a", "observations.bin", rmse_a(&a, &truth, ev.k0)?, None);
    }

    let ics = reference_ics(cfg)?;
    let x0 = &ics[..model.m];
    let truth_spec = lyapunov_spectrum(&model, x0, ev.lyapunov_exponents, ev.lyapunov_steps, ev.lyapunov_transient, 1)?;
    c.push("truth_lambda1", "model", truth_spec.leading(), None);
    c.push("truth_lyapunov_sum", "model", truth_spec.sum(), None);
    c.push("truth_positive_exponents", "model", truth_spec.positive_count() as f64, None);
    let truth_run = free_run(&model, x0, ev.free_run_steps, model.h)?;
    c.push("truth_mean", "model", mean_state(&truth_run), None);
    let truth_psd = welch_psd(&truth_run.component(ev.psd_component), &ev.psd)?;
    let lt_steps = lyapunov_time_steps(truth_spec.leading(), model.h);

    let mut surr_spec: Option<LyapunovSpectrum> = None;
    let mut surr_psd: Option<PowerSpectrum> = None;
    if paths.best_weights().exists() {
        let params = io::read_weights(&paths.best_weights(), Some(&cfg.network))?;
        let sur = Surrogate {
            params: &params,
            m: model.m,
            h: model.h,
        };
        let src = "best_weights.bin";
        if !cfg.hybrid.bypass_da {
            let ens = Ensemble::perturbed(truth.state(0), cfg.filter.n_members, cfg.filter.init_spread, cfg.filter.seed, 0)?;
            if let Some(a) = c.record("surrogate_rmse_a", run_filter(&sur, &obs, &cfg.filter, ens)) {
                c.push("surrogate_rmse_a", src, rmse_a(&a, &truth, ev.k0)?, None);
                io::write_analysis(&paths.surrogate_analysis(), &a)?;
            }
        }
        if let Some(skill) = c.record("rmse_f", rmse_f(&sur, &model, &ics, ev.max_lead)) {
            c.push("rmse_f_lead1", src, skill.at(1), Some(skill.std[1]));
            let two_lt = (2.0 * lt_steps).round() as usize;
            if two_lt < skill.rmse.len() {
                c.push("rmse_f_2lt", src, skill.at(two_lt), Some(skill.std[two_lt]));
            }
            match saturation_lt(&skill, lt_steps) {
                Some(t) => c.push("saturation_lyapunov_times", src, t, None),
                None => c.fail(
                    "saturation_lyapunov_times",
                    &Error::InvalidParameter("no saturation within the evaluated leads".into()),
                ),
            }
            io::write_csv(
                &paths.rmse_f_curve(),
                &["lead", "time", "lyapunov_time", "rmse", "std"],
                (0..skill.rmse.len()).map(|i| {
                    vec![i as f64, i as f64 * model.h, i as f64 / lt_steps, skill.rmse[i], skill.std[i]]
                }),
            )?;
        }
        surr_spec = c.record(
            "surrogate_lyapunov",
            lyapunov_spectrum(&sur, x0, ev.lyapunov_exponents, ev.lyapunov_steps, ev.lyapunov_transient, 1),
        );
        if let Some(s) = &surr_spec {
            c.push("surrogate_lambda1", src, s.leading(), None);
            c.push("surrogate_positive_exponents", src, s.positive_count() as f64, None);
            if let Some(r) = c.record("lyapunov_rmse", rmse_lyapunov(&truth_spec, s, ev.lyapunov_compare)) {
                c.push("lyapunov_rmse", src, r, None);
            }
        }
        if let Some(run) = c.record("surrogate_free_run", free_run(&sur, x0, ev.free_run_steps, model.h)) {
            c.push("surrogate_mean", src, mean_state(&run), None);
            surr_psd = c.record("surrogate_psd", welch_psd(&run.component(ev.psd_component), &ev.psd));
            if let Some(sp) = &surr_psd {
                c.push("psd_max_ratio_below_5hz", src, ratio_below(sp, &truth_psd, 5.0), None);
            }
        }
        if let Some(grids) = c.record("hovmoller", hovmoller(&sur, &model, x0, ev.hovmoller_steps)) {
            for (name, g) in ["truth", "surrogate", "difference"].iter().zip(&grids) {
                io::write_matrix_csv(&paths.hovmoller(name), g, model.m)?;
            }
        }
    }

    let nan = f64::NAN;
    io::write_csv(
        &paths.psd(),
        &["frequency", "truth", "surrogate"],
        truth_psd.frequencies.iter().enumerate().map(|(i, &f)| {
            vec![f, truth_psd.densities[i], surr_psd.as_ref().map_or(nan, |s| s.densities[i])]
        }),
    )?;
    io::write_csv(
        &paths.lyapunov(),
        &["index", "truth", "surrogate"],
        truth_spec.exponents.iter().enumerate().map(|(i, &t)| {
            vec![(i + 1) as f64, t, surr_spec.as_ref().map_or(nan, |s| s.exponents[i])]
        }),
    )?;

    let metrics_path = paths.metrics();
    if metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }
    io::append_metrics(&metrics_path, &c.metrics)?;
    fs::write(paths.failures(), serde_json::to_string_pretty(&c.failures).expect("serializable"))?;
    Ok(c.metrics)
}

/// One history line with missing values as null.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub cycle: usize,
    pub rmse_f: Option<f64>,
    pub lambda1: Option<f64>,
    pub train_loss: Option<f64>,
    pub rmse_a: Option<f64>,
    pub aborted: bool,
}

impl From<&CycleRecord> for HistoryRow {
    fn from(r: &CycleRecord) -> Self {
        let f = |v: f64| v.is_finite().then_some(v);
        Self {
            cycle: r.cycle,
            rmse_f: f(r.rmse_f),
            lambda1: f(r.lambda1),
            train_loss: f(r.train_loss),
            rmse_a: f(r.rmse_a),
            aborted: r.aborted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub version: String,
    pub metrics: Vec<MetricRecord>,
    pub failures: Vec<MetricFailure>,
    pub hybrid: Option<HybridSummary>,
    pub history: Vec<HistoryRow>,
}

impl ExperimentReport {
    pub fn metric(&self, name: &str) -> Option<&MetricRecord> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.metric(name).map(|m| m.value)
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Assembles the report from the artifacts in the run directory.
pub fn report_stage(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<ExperimentReport> {
    let metrics = io::read_metrics(&paths.metrics())?;
    let failures = match fs::read_to_string(paths.failures()) {
        Ok(s) => serde_json::from_str(&s).map_err(|e| Error::Format {
            path: paths.failures(),
            reason: e.to_string(),
        })?,
        Err(_) => vec![],
    };
    let hybrid = fs::read_to_string(paths.hybrid_summary())
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let history = if paths.history().exists() {
        read_history(&paths.history())?.iter().map(HistoryRow::from).collect()
    } else {
        vec![]
    };
    let report = ExperimentReport {
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        metrics,
        failures,
        hybrid,
        history,
    };
    fs::write(paths.report(), serde_json::to_string_pretty(&report).expect("serializable"))?;
    Ok(report)
}

/// Checks that the plot-data files of a completed run are present.
/// Curves whose computation failed (listed in the failures file) are skipped.
pub fn emit_plot_data(paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let failed: Vec<MetricFailure> = fs::read_to_string(paths.failures())
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or_default();
    let ok = |metric: &str| !failed.iter().any(|f| f.metric == metric);
    let mut files = vec![paths.psd(), paths.lyapunov()];
    if paths.best_weights().exists() {
        if ok("rmse_f") {
            files.push(paths.rmse_f_curve());
        }
        if ok("hovmoller") {
            for which in ["truth", "surrogate", "difference"] {
                files.push(paths.hovmoller(which));
            }
        }
    }
    if paths.history().exists() {
        let history = read_history(&paths.history())?;
        write_convergence(&paths.convergence(), &history)?;
        files.push(paths.convergence());
    }
    if let Some(missing) = files.iter().find(|f| !f.exists()) {
        return Err(Error::MissingArtifact(missing.clone()));
    }
    Ok(files)
}

/// Small artifacts worth keeping from a run directory: configuration,
/// reports, curves and the selected network. Large binaries are left out.
pub const EXPORTED: [&str; 16] = [
    "config.toml",
    "report.json",
    "metrics.jsonl",
    "failures.json",
    "hybrid.json",
    "history.csv",
    "convergence.csv",
    "init_training.csv",
    "best_weights.bin",
    "rmse_f.csv",
    "psd.csv",
    "lyapunov.csv",
    "hovmoller_truth.csv",
    "hovmoller_surrogate.csv",
    "hovmoller_difference.csv",
    "init_weights.bin",
];

/// Copies the [`EXPORTED`] files present in `src` into `dst`.
pub fn export_artifacts(src: &RunPaths, dst: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dst)?;
    let mut copied = vec![];
    for name in EXPORTED {
        let from = src.root.join(name);
        if from.exists() {
            let to = dst.join(name);
            fs::copy(&from, &to)?;
            copied.push(to);
        }
    }
    Ok(copied)
}

/// generate-truth, observe, interp, init, hybrid, evaluate, report.
pub fn run_experiment(cfg: &ExperimentConfig, resume: bool) -> Result<ExperimentReport> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.output.dir);
    let t0 = Instant::now();
    stage("generate-truth", generate_truth_stage(cfg, &paths))?;
    stage("observe", observe_stage(cfg, &paths))?;
    let interp = stage("interp", interp_stage(cfg, &paths))?;
    log::info!("interpolation RMSE {interp:.3}");
    if cfg.hybrid.cycles > 0 {
        stage("init", init_stage(cfg, &paths, resume))?;
    }
    stage("hybrid", hybrid_stage(cfg, &paths, resume))?;
    stage("evaluate", evaluate_stage(cfg, &paths))?;
    let report = stage("report", report_stage(cfg, &paths))?;
    stage("report", emit_plot_data(&paths))?;
    log::info!("run finished in {:.0}s", t0.elapsed().as_secs_f64());
    Ok(report)
}

/// Outcome of one sweep point.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub value: f64,
    pub dir: PathBuf,
    pub report: Option<ExperimentReport>,
    pub error: Option<String>,
}

pub const SWEEP_HEADER: [&str; 6] = [
    "value",
    "rmse_f_lead1",
    "rmse_f_lead1_std",
    "surrogate_rmse_a",
    "surrogate_lambda1",
    "failed",
];

pub fn sweep_dir(root: &Path, axis: SweepAxis, value: f64) -> PathBuf {
    root.join(format!("{}_{value}", axis.name()))
}

/// One full experiment per value under `root`, then a combined CSV.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    root: &Path,
    resume: bool,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        cfg.set_axis(axis, value)?;
        cfg.output.dir = sweep_dir(root, axis, value);
        log::info!("sweep {} = {value}", axis.name());
        let point = match run_experiment(&cfg, resume) {
            Ok(r) => SweepPoint {
                value,
                dir: cfg.output.dir,
                report: Some(r),
                error: None,
            },
            Err(e) => {
                log::error!("sweep {} = {value} failed: {e}", axis.name());
                SweepPoint {
                    value,
                    dir: cfg.output.dir,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        };
        points.push(point);
    }
    let nan = f64::NAN;
    io::write_csv(
        &root.join(format!("sweep_{}.csv", axis.name())),
        &SWEEP_HEADER,
        points.iter().map(|p| {
            let get = |n: &str| p.report.as_ref().and_then(|r| r.value(n)).unwrap_or(nan);
            let std = p
                .report
                .as_ref()
                .and_then(|r| r.metric("rmse_f_lead1"))
                .and_then(|m| m.std)
                .unwrap_or(nan);
            vec![
                p.value,
                get("rmse_f_lead1"),
                std,
                get("surrogate_rmse_a"),
                get("surrogate_lambda1"),
                if p.error.is_some() { 1.0 } else { 0.0 },
            ]
        }),
    )?;
    Ok(points)
}
