//! Alternating assimilation and training.
//!
//! The surrogate is first fitted to the spline-filled observations (observed
//! entries only as targets). Each cycle then runs the EnKF-N with the current
//! surrogate as forecast model and retrains on the analysis means, weighting
//! residuals by the inverse analysis variance.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{climatological_std, leading_exponent, rmse_a, rmse_f, rmse_per_step};
use crate::enkf::{run_filter, AnalysisSeries, Ensemble, FilterConfig};
use crate::error::{Error, Result};
use crate::interp::{cubic_interpolate, InterpolatedField, Scheme};
use crate::io;
use crate::l96::{ModelParams, Trajectory};
use crate::net::{train, Architecture, NetworkParameters, Surrogate, TrainConfig, TrainReport, TrainingSet};
use crate::obs::ObservationSeries;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    pub cycles: usize,
    pub epochs_per_cycle: usize,
    pub n_f: usize,
    pub init_epochs: usize,
    pub init_n_f: usize,
    /// Trailing fraction of the interpolated set held out during initialisation.
    pub init_holdout: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adagrad_eps: f64,
    /// Loss weights are `1 / max(variance, variance_floor)`.
    pub variance_floor: f64,
    /// Steps used for the per-cycle leading Lyapunov exponent.
    pub lyapunov_steps: usize,
    pub lyapunov_transient: usize,
    /// A cycle aborts when the analysis is further from the truth than an
    /// independent climate draw (sqrt(2) climatological std) on more than
    /// this fraction of steps.
    pub abort_fraction: f64,
    pub max_consecutive_aborts: usize,
    /// Stop after this many cycles without a better RMSE-f. Off when absent.
    pub patience: Option<usize>,
    /// Skip assimilation and train every cycle on the observations
    /// themselves. Needs every point observed at every step.
    pub bypass_da: bool,
    /// Supplied by the enclosing experiment configuration.
    #[serde(skip)]
    pub filter: FilterConfig,
    pub seed: u64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            cycles: 50,
            epochs_per_cycle: 20,
            n_f: 1,
            init_epochs: 40,
            init_n_f: 4,
            init_holdout: 0.1,
            batch_size: 256,
            learning_rate: 0.01,
            adagrad_eps: 1e-7,
            variance_floor: 1e-3,
            lyapunov_steps: 20_000,
            lyapunov_transient: 1_000,
            abort_fraction: 0.1,
            max_consecutive_aborts: 3,
            patience: None,
            bypass_da: false,
            filter: FilterConfig::default(),
            seed: 0,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        let positive = [
            ("n_f", self.n_f),
            ("init_n_f", self.init_n_f),
            ("batch_size", self.batch_size),
            ("max_consecutive_aborts", self.max_consecutive_aborts),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.adagrad_eps > 0.0 && self.variance_floor > 0.0) {
            return Err(Error::InvalidParameter(
                "learning rate, Adagrad epsilon and variance floor must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.init_holdout) || !(0.0..=1.0).contains(&self.abort_fraction) {
            return Err(Error::InvalidParameter(
                "holdout must be in [0, 1) and abort fraction in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn train_config(&self, epochs: usize, n_f: usize, holdout: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            n_f,
            batch_size: self.batch_size,
            lr: self.learning_rate,
            eps: self.adagrad_eps,
            holdout,
            seed,
        }
    }
}

/// Truth-side information for scoring cycles in a twin experiment.
pub struct Reference<'a> {
    /// States 0..=K aligned with the observations.
    pub truth: &'a Trajectory,
    pub model: &'a ModelParams,
    /// Forecast initial conditions, row-major.
    pub ics: &'a [f64],
    pub k0: usize,
    clim_std: f64,
}

impl<'a> Reference<'a> {
    pub fn new(truth: &'a Trajectory, model: &'a ModelParams, ics: &'a [f64], k0: usize) -> Self {
        Self {
            truth,
            model,
            ics,
            k0,
            clim_std: climatological_std(truth),
        }
    }

    pub fn climatological_std(&self) -> f64 {
        self.clim_std
    }
}

/// One line of the convergence history. NaN marks a metric that is not
/// available (no truth, or the surrogate blew up while being scored).
#[derive(Clone, Debug, PartialEq)]
pub struct CycleRecord {
    pub cycle: usize,
    pub rmse_f: f64,
    pub lambda1: f64,
    pub train_loss: f64,
    pub rmse_a: f64,
    pub aborted: bool,
    pub seconds: f64,
}

pub const HISTORY_HEADER: [&str; 7] = [
    "cycle",
    "rmse_f",
    "lambda1",
    "train_loss",
    "rmse_a",
    "aborted",
    "seconds",
];

impl CycleRecord {
    fn to_row(&self) -> Vec<f64> {
        vec![
            self.cycle as f64,
            self.rmse_f,
            self.lambda1,
            self.train_loss,
            self.rmse_a,
            if self.aborted { 1.0 } else { 0.0 },
            self.seconds,
        ]
    }

    fn from_row(row: &[f64]) -> Self {
        Self {
            cycle: row[0] as usize,
            rmse_f: row[1],
            lambda1: row[2],
            train_loss: row[3],
            rmse_a: row[4],
            aborted: row[5] != 0.0,
            seconds: row[6],
        }
    }
}

pub fn write_history(path: &Path, history: &[CycleRecord]) -> Result<()> {
    io::write_csv(path, &HISTORY_HEADER, history.iter().map(CycleRecord::to_row))
}

pub fn read_history(path: &Path) -> Result<Vec<CycleRecord>> {
    let (header, rows) = io::read_csv(path)?;
    if header != HISTORY_HEADER {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unexpected history header {header:?}"),
        });
    }
    Ok(rows.iter().map(|r| CycleRecord::from_row(r)).collect())
}

/// Per-cycle checkpoint layout under one directory.
#[derive(Clone, Debug)]
pub struct Checkpoints {
    pub dir: PathBuf,
}

impl Checkpoints {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn init_weights(&self) -> PathBuf {
        self.dir.join("init").join("weights.bin")
    }

    pub fn cycle_weights(&self, cycle: usize) -> PathBuf {
        self.dir.join(format!("cycle_{cycle:03}")).join("weights.bin")
    }

    pub fn history(&self) -> PathBuf {
        self.dir.join("history.csv")
    }

    pub fn last_analysis(&self) -> PathBuf {
        self.dir.join("analysis_last.bin")
    }

    pub fn best_weights(&self) -> PathBuf {
        self.dir.join("best_weights.bin")
    }
}

/// Training data from an analysis: inputs are the means, weights the
/// floored inverse variances.
pub fn training_set_from_analysis(a: &AnalysisSeries, floor: f64) -> Result<TrainingSet> {
    let weights = a.variances.iter().map(|v| 1.0 / v.max(floor)).collect();
    TrainingSet::new(a.m, a.means.clone(), weights)
}

/// Observed values with unit weights, for complete observations.
pub fn training_set_from_observations(obs: &ObservationSeries) -> Result<TrainingSet> {
    if obs.p() != obs.m {
        return Err(Error::Config(format!(
            "training directly on observations needs all {} points observed, got {}",
            obs.m,
            obs.p()
        )));
    }
    let states: Vec<f64> = obs.records.iter().flat_map(|r| r.values.iter().copied()).collect();
    let n = states.len();
    TrainingSet::new(obs.m, states, vec![1.0; n])
}

/// Fresh network fitted to the interpolated observations.
pub fn initialize_weights(
    obs: &ObservationSeries,
    cfg: &HybridConfig,
    arch: Architecture,
    scheme: Scheme,
) -> Result<(NetworkParameters, TrainReport, InterpolatedField)> {
    cfg.validate()?;
    let field = cubic_interpolate(obs, scheme)?;
    let (params, report) = initialize_from_field(&field, cfg, arch)?;
    Ok((params, report, field))
}

pub fn initialize_from_field(
    field: &InterpolatedField,
    cfg: &HybridConfig,
    arch: Architecture,
) -> Result<(NetworkParameters, TrainReport)> {
    let set = TrainingSet::new(field.m, field.states.clone(), field.mask_weights())?;
    let seed = rng::derive(cfg.seed, 0);
    let mut params = NetworkParameters::init(arch, seed)?;
    let tc = cfg.train_config(cfg.init_epochs, cfg.init_n_f, cfg.init_holdout, seed);
    let report = train(&mut params, &set, &tc)?;
    Ok((params, report))
}

/// Result of one assimilation + training cycle.
pub struct CycleOutcome {
    pub record: CycleRecord,
    /// Absent when the filter failed numerically.
    pub analysis: Option<AnalysisSeries>,
    pub report: Option<TrainReport>,
}

fn score(
    params: &NetworkParameters,
    cfg: &HybridConfig,
    m: usize,
    h: f64,
    start: &[f64],
    reference: Option<&Reference<'_>>,
) -> (f64, f64) {
    let sur = Surrogate { params, m, h };
    let rmse = reference
        .and_then(|r| rmse_f(&sur, r.model, r.ics, 1).ok())
        .map_or(f64::NAN, |s| s.at(1));
    let lambda1 = if cfg.lyapunov_steps > 0 {
        leading_exponent(&sur, start, cfg.lyapunov_steps, cfg.lyapunov_transient).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    (rmse, lambda1)
}

/// Runs the filter with the current surrogate, then retrains on its output.
/// `x0` centres the initial ensemble at k = 0.
pub fn run_cycle(
    params: &mut NetworkParameters,
    obs: &ObservationSeries,
    cfg: &HybridConfig,
    cycle: usize,
    x0: &[f64],
    h: f64,
    reference: Option<&Reference<'_>>,
) -> Result<CycleOutcome> {
    let start = Instant::now();
    let seed = rng::derive(cfg.seed, cycle as u64);
    let fcfg = FilterConfig {
        seed: rng::derive(cfg.filter.seed, cycle as u64),
        ..cfg.filter
    };
    let m = obs.m;
    let mut record = CycleRecord {
        cycle,
        rmse_f: f64::NAN,
        lambda1: f64::NAN,
        train_loss: f64::NAN,
        rmse_a: f64::NAN,
        aborted: false,
        seconds: 0.0,
    };
    let (set, analysis) = if cfg.bypass_da {
        (training_set_from_observations(obs)?, None)
    } else {
        let ens = Ensemble::perturbed(x0, fcfg.n_members, fcfg.init_spread, seed, 0)?;
        let filtered = {
            let sur = Surrogate { params: &*params, m, h };
            run_filter(&sur, obs, &fcfg, ens)
        };
        let analysis = match filtered {
            Ok(a) => a,
            Err(e) if e.is_validation() => return Err(e),
            Err(e) => {
                log::warn!("cycle {cycle}: filter failed: {e}");
                record.aborted = true;
                record.seconds = start.elapsed().as_secs_f64();
                return Ok(CycleOutcome {
                    record,
                    analysis: None,
                    report: None,
                });
            }
        };
        if let Some(r) = reference {
            record.rmse_a = rmse_a(&analysis, r.truth, r.k0)?;
            let per_step = rmse_per_step(&analysis.means, r.truth)?;
            let limit = std::f64::consts::SQRT_2 * r.climatological_std();
            let bad = per_step.iter().filter(|&&e| e > limit).count();
            if bad as f64 > cfg.abort_fraction * per_step.len() as f64 {
                log::warn!(
                    "cycle {cycle}: analysis error above {limit:.2} on {bad}/{} steps",
                    per_step.len()
                );
                record.aborted = true;
                record.seconds = start.elapsed().as_secs_f64();
                return Ok(CycleOutcome {
                    record,
                    analysis: Some(analysis),
                    report: None,
                });
            }
        }
        (training_set_from_analysis(&analysis, cfg.variance_floor)?, Some(analysis))
    };

    let tc = cfg.train_config(cfg.epochs_per_cycle, cfg.n_f, 0.0, seed);
    let report = train(params, &set, &tc)?;
    record.train_loss = report.final_loss().unwrap_or(f64::NAN);

    let last_state = match &analysis {
        Some(a) => a.mean(a.len()).to_vec(),
        None => obs.records.last().map_or(x0.to_vec(), |r| r.values.clone()),
    };
    let lyap_start = reference.map_or(&last_state[..], |r| &r.ics[..m]);
    let (rf, l1) = score(params, cfg, m, h, lyap_start, reference);
    record.rmse_f = rf;
    record.lambda1 = l1;
    record.seconds = start.elapsed().as_secs_f64();
    Ok(CycleOutcome {
        record,
        analysis,
        report: Some(report),
    })
}

/// Final state of a hybrid run.
pub struct HybridOutcome {
    /// Lowest RMSE-f when scored against a truth, otherwise the last cycle.
    pub best: NetworkParameters,
    pub best_cycle: Option<usize>,
    pub last: NetworkParameters,
    pub history: Vec<CycleRecord>,
    pub last_analysis: Option<AnalysisSeries>,
}

/// Cycles `start_cycle..=cfg.cycles` from `params`, optionally writing
/// checkpoints. `history` carries records of cycles already completed.
#[allow(clippy::too_many_arguments)]
pub fn run_hybrid(
    mut params: NetworkParameters,
    obs: &ObservationSeries,
    cfg: &HybridConfig,
    x0: &[f64],
    h: f64,
    reference: Option<&Reference<'_>>,
    checkpoints: Option<&Checkpoints>,
    mut history: Vec<CycleRecord>,
) -> Result<HybridOutcome> {
    cfg.validate()?;
    let start_cycle = history.last().map_or(1, |r| r.cycle + 1);
    let mut best: Option<(f64, usize, NetworkParameters)> = None;
    if let (Some(_), Some(cp)) = (reference, checkpoints) {
        // recover the best of already completed cycles
        for r in history.iter().filter(|r| !r.aborted && r.rmse_f.is_finite()) {
            if best.as_ref().is_none_or(|b| r.rmse_f < b.0) {
                let p = io::read_weights(&cp.cycle_weights(r.cycle), Some(params.architecture()))?;
                best = Some((r.rmse_f, r.cycle, p));
            }
        }
    }
    let mut consecutive = history.iter().rev().take_while(|r| r.aborted).count();
    let mut since_best = 0;
    let mut last_analysis = None;
    for cycle in start_cycle..=cfg.cycles {
        let outcome = run_cycle(&mut params, obs, cfg, cycle, x0, h, reference)?;
        let rec = outcome.record.clone();
        log::info!(
            "cycle {cycle}: rmse_f {:.4} lambda1 {:.3} rmse_a {:.3} loss {:.4}{} ({:.0}s)",
            rec.rmse_f,
            rec.lambda1,
            rec.rmse_a,
            rec.train_loss,
            if rec.aborted { " ABORTED" } else { "" },
            rec.seconds
        );
        history.push(rec.clone());
        if let Some(cp) = checkpoints {
            io::write_weights(&cp.cycle_weights(cycle), &params)?;
            write_history(&cp.history(), &history)?;
            if let Some(a) = &outcome.analysis {
                io::write_analysis(&cp.last_analysis(), a)?;
            }
        }
        last_analysis = outcome.analysis;
        if rec.aborted {
            consecutive += 1;
            if consecutive >= cfg.max_consecutive_aborts {
                return Err(Error::HybridDiverged {
                    cycle,
                    aborted: consecutive,
                });
            }
            continue;
        }
        consecutive = 0;
        if rec.rmse_f.is_finite() && best.as_ref().is_none_or(|b| rec.rmse_f < b.0) {
            best = Some((rec.rmse_f, cycle, params.clone()));
            since_best = 0;
            if let Some(cp) = checkpoints {
                io::write_weights(&cp.best_weights(), &params)?;
            }
        } else {
            since_best += 1;
        }
        if cfg.patience.is_some_and(|p| since_best >= p) {
            log::info!("no improvement for {since_best} cycles, stopping");
            break;
        }
    }
    let (best_params, best_cycle) = match best {
        Some((_, c, p)) => (p, Some(c)),
        None => (params.clone(), None),
    };
    Ok(HybridOutcome {
        best: best_params,
        best_cycle,
        last: params,
        history,
        last_analysis,
    })
}

/// Parameters and history of the latest completed cycle in `cp`, if any.
pub fn resume_state(cp: &Checkpoints, arch: &Architecture) -> Result<Option<(NetworkParameters, Vec<CycleRecord>)>> {
    let path = cp.history();
    if !path.exists() {
        return Ok(None);
    }
    let history = read_history(&path)?;
    let Some(last) = history.last() else {
        return Ok(None);
    };
    let params = io::read_weights(&cp.cycle_weights(last.cycle), Some(arch))?;
    Ok(Some((params, history)))
}

/// Removes every checkpoint file under `cp`.
pub fn clear_checkpoints(cp: &Checkpoints) -> Result<()> {
    if cp.dir.exists() {
        fs::remove_dir_all(&cp.dir)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::l96::{default_initial_state, generate_truth};
    use crate::net::ConvStack;
    use crate::obs::sample_observations;

    fn tiny_arch() -> Architecture {
        Architecture {
            stack: Some(ConvStack {
                bilinear_filters: 4,
                bilinear_kernel: 5,
                hidden_filters: 6,
                hidden_kernel: 5,
                output_kernel: 1,
            }),
        }
    }

    fn tiny_cfg() -> HybridConfig {
        HybridConfig {
            cycles: 2,
            epochs_per_cycle: 1,
            init_epochs: 2,
            init_n_f: 2,
            batch_size: 64,
            lyapunov_steps: 200,
            lyapunov_transient: 10,
            filter: FilterConfig {
                n_members: 10,
                ..FilterConfig::default()
            },
            seed: 3,
            ..HybridConfig::default()
        }
    }

    fn setup() -> (ModelParams, Trajectory, ObservationSeries) {
        let p = ModelParams::default();
        let truth = generate_truth(&default_initial_state(&p), 300, &p, 500).unwrap();
        let obs = sample_observations(&truth, 20, 1.0, 2).unwrap();
        (p, truth, obs)
    }

    #[test]
    fn loss_weights_are_floored_inverse_variances() {
        let a = AnalysisSeries::new(2, 5, 0.1, 0, vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 1e-6, 4.0, 0.25]).unwrap();
        let set = training_set_from_analysis(&a, 1e-3).unwrap();
        assert_eq!(set.weights, vec![2.0, 1000.0, 0.25, 4.0]);
        assert_eq!(set.states, a.means);
    }

    #[test]
    fn bypass_trains_on_complete_observations_without_a_filter() {
        let (p, truth, _) = setup();
        let obs = sample_observations(&truth, 40, 0.0, 2).unwrap();
        let cfg = HybridConfig {
            bypass_da: true,
            ..tiny_cfg()
        };
        let mut params = NetworkParameters::init(tiny_arch(), 1).unwrap();
        let before = params.clone();
        let out = run_cycle(&mut params, &obs, &cfg, 1, truth.state(0), p.h, None).unwrap();
        assert!(out.analysis.is_none());
        assert!(out.record.train_loss.is_finite());
        assert!(out.record.rmse_a.is_nan());
        assert_ne!(params, before);

        let sparse = sample_observations(&truth, 20, 0.0, 2).unwrap();
        let res = run_cycle(&mut params, &sparse, &cfg, 1, truth.state(0), p.h, None);
        assert!(res.is_err_and(|e| e.is_validation()));
    }

    #[test]
    fn zero_epochs_keep_parameters_but_produce_analysis() {
        let (p, truth, obs) = setup();
        let cfg = HybridConfig {
            epochs_per_cycle: 0,
            lyapunov_steps: 0,
            ..tiny_cfg()
        };
        let mut params = NetworkParameters::init(tiny_arch(), 1).unwrap();
        params.zero_output_layer();
        let before = params.clone();
        let ics = truth.as_slice()[..40 * 3].to_vec();
        let reference = Reference::new(&truth, &p, &ics, 100);
        let out = run_cycle(&mut params, &obs, &cfg, 1, truth.state(0), p.h, Some(&reference)).unwrap();
        assert_eq!(params, before);
        assert_eq!(out.analysis.unwrap().len(), 300);
    }

    #[test]
    fn all_zero_mask_is_rejected() {
        let field = InterpolatedField {
            m: 40,
            states: vec![1.0; 40 * 20],
            mask: vec![false; 40 * 20],
        };
        assert!(initialize_from_field(&field, &tiny_cfg(), tiny_arch()).is_err());
    }

    #[test]
    fn run_is_reproducible_and_selects_the_best_cycle() {
        let (p, truth, obs) = setup();
        let cfg = tiny_cfg();
        let ics = truth.as_slice()[40 * 50..40 * 60].to_vec();
        let reference = Reference::new(&truth, &p, &ics, 100);
        let run = || {
            let (init, _, _) = initialize_weights(&obs, &cfg, tiny_arch(), Scheme::SpaceTime).unwrap();
            run_hybrid(init, &obs, &cfg, truth.state(0), p.h, Some(&reference), None, vec![])
        };
        let (a, b) = (run(), run());
        match (a, b) {
            (Ok(a), Ok(b)) => {
                assert_eq!(a.history.len(), b.history.len());
                for (x, y) in a.history.iter().zip(&b.history) {
                    assert_eq!(x.rmse_f.to_bits(), y.rmse_f.to_bits());
                    assert_eq!(x.aborted, y.aborted);
                }
                assert_eq!(a.best, b.best);
                if let Some(c) = a.best_cycle {
                    let best = a.history.iter().find(|r| r.cycle == c).unwrap().rmse_f;
                    assert!(a
                        .history
                        .iter()
                        .filter(|r| !r.aborted && r.rmse_f.is_finite())
                        .all(|r| r.rmse_f >= best));
                }
            }
            (Err(a), Err(b)) => assert_eq!(a.to_string(), b.to_string()),
            _ => panic!("non-deterministic outcome"),
        }
    }

    #[test]
    fn checkpoints_allow_resuming() {
        let (p, truth, obs) = setup();
        let dir = tempfile::tempdir().unwrap();
        let cp = Checkpoints::new(dir.path());
        let cfg = HybridConfig {
            abort_fraction: 1.0,
            ..tiny_cfg()
        };
        let mut params = NetworkParameters::init(tiny_arch(), 1).unwrap();
        params.zero_output_layer();
        let one = HybridConfig { cycles: 1, ..cfg.clone() };
        run_hybrid(params.clone(), &obs, &one, truth.state(0), p.h, None, Some(&cp), vec![]).unwrap();
        let (resumed, hist) = resume_state(&cp, &tiny_arch()).unwrap().unwrap();
        assert_eq!(hist.len(), 1);
        let cont = run_hybrid(resumed, &obs, &cfg, truth.state(0), p.h, None, Some(&cp), hist).unwrap();
        let straight = run_hybrid(params, &obs, &cfg, truth.state(0), p.h, None, None, vec![]).unwrap();
        assert_eq!(cont.last, straight.last);
        assert_eq!(read_history(&cp.history()).unwrap().len(), 2);
        assert!(cp.last_analysis().exists());
    }

    #[test]
    fn history_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let h = vec![CycleRecord {
            cycle: 4,
            rmse_f: 0.25,
            lambda1: f64::NAN,
            train_loss: 3.0,
            rmse_a: 0.9,
            aborted: true,
            seconds: 12.5,
        }];
        write_history(&path, &h).unwrap();
        let back = read_history(&path).unwrap();
        assert_eq!(back[0].cycle, 4);
        assert!(back[0].lambda1.is_nan());
        assert!(back[0].aborted);
    }
}
