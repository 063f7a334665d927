//! Skill scores: analysis and forecast RMSE, climate mean, Lyapunov spectra
//! and power spectra.

mod lyapunov;
mod spectrum;

pub use lyapunov::{leading_exponent, lyapunov_spectrum, rmse_lyapunov, LyapunovSpectrum};
pub use spectrum::{welch_psd, PowerSpectrum, WelchConfig};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::StepModel;
use crate::enkf::AnalysisSeries;
use crate::error::{check_len, Error, Result};
use crate::l96::{generate_truth, ModelParams, Trajectory, DEFAULT_SPINUP};
use crate::rng::{self, Stream};

/// First analysis step scored by [`rmse_a`].
pub const DEFAULT_K0: usize = 100;

/// RMSE of estimates for k = 1..=K (row-major `K x m`) against `truth`
/// (states 0..=K), over k = k0..=K.
pub fn field_rmse(estimates: &[f64], truth: &Trajectory, k0: usize) -> Result<f64> {
    let m = truth.m();
    if truth.len() < 2 {
        return Err(Error::InvalidParameter("truth has no observed steps".into()));
    }
    let k_max = truth.len() - 1;
    check_len("estimate length", k_max * m, estimates.len())?;
    if k0 == 0 || k0 > k_max {
        return Err(Error::InvalidParameter(format!(
            "k0={k0} outside 1..={k_max}"
        )));
    }
    let mut se = 0.0;
    for k in k0..=k_max {
        let est = &estimates[(k - 1) * m..k * m];
        se += est
            .iter()
            .zip(truth.state(k))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok((se / ((k_max - k0 + 1) * m) as f64).sqrt())
}

/// Spatio-temporal RMSE of the analysis means from `k0` on.
pub fn rmse_a(analysis: &AnalysisSeries, truth: &Trajectory, k0: usize) -> Result<f64> {
    check_len("analysis dimension", truth.m(), analysis.m)?;
    field_rmse(&analysis.means, truth, k0)
}

/// Per-step analysis RMSE for k = 1..=K.
pub fn rmse_per_step(estimates: &[f64], truth: &Trajectory) -> Result<Vec<f64>> {
    let m = truth.m();
    check_len("estimate length", (truth.len() - 1) * m, estimates.len())?;
    Ok(estimates
        .chunks_exact(m)
        .enumerate()
        .map(|(i, e)| {
            let se: f64 = e.iter().zip(truth.state(i + 1)).map(|(a, b)| (a - b).powi(2)).sum();
            (se / m as f64).sqrt()
        })
        .collect())
}

/// Grand mean over all times and grid points.
pub fn mean_state(traj: &Trajectory) -> f64 {
    let v = traj.as_slice();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard deviation of all values of a trajectory around its grand mean.
pub fn climatological_std(traj: &Trajectory) -> f64 {
    let mu = mean_state(traj);
    let v = traj.as_slice();
    (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Where forecast initial conditions are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcProtocol {
    pub count: usize,
    /// Steps between consecutive initial conditions.
    pub spacing: usize,
    pub seed: u64,
}

impl Default for IcProtocol {
    fn default() -> Self {
        Self {
            count: 500,
            spacing: 20,
            seed: 0,
        }
    }
}

/// Initial conditions sampled from an independent true-model run that starts
/// from a seeded random state and is spun up before sampling.
pub fn forecast_ics(p: &ModelParams, proto: &IcProtocol) -> Result<Vec<f64>> {
    if proto.count == 0 || proto.spacing == 0 {
        return Err(Error::InvalidParameter(
            "forecast IC count and spacing must be positive".into(),
        ));
    }
    let mut rng = rng::stream(proto.seed, Stream::ForecastIcs);
    let x0: Vec<f64> = (0..p.m)
        .map(|_| p.forcing + Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let run = generate_truth(&x0, proto.count * proto.spacing, p, DEFAULT_SPINUP)?;
    Ok((0..proto.count)
        .flat_map(|i| run.state((i + 1) * proto.spacing).to_vec())
        .collect())
}

/// RMSE-f curve: entry `i` is lead `i` steps (entry 0 is the shared IC).
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSkill {
    pub rmse: Vec<f64>,
    /// Standard deviation over initial conditions of the per-IC RMSE.
    pub std: Vec<f64>,
}

impl ForecastSkill {
    pub fn at(&self, lead: usize) -> f64 {
        self.rmse[lead]
    }

    /// First lead whose RMSE reaches `frac` times the mean over `plateau`.
    pub fn saturation_lead(&self, plateau: std::ops::Range<usize>, frac: f64) -> Option<usize> {
        let window = self.rmse.get(plateau)?;
        if window.is_empty() {
            return None;
        }
        let level = window.iter().sum::<f64>() / window.len() as f64;
        self.rmse.iter().position(|&r| r >= frac * level)
    }
}

fn step_checked<M: StepModel + ?Sized>(model: &M, states: &mut [f64], lead: usize) -> Result<()> {
    let m = model.dim();
    let before = states.to_vec();
    if model.step_batch(states).is_err() {
        // find the culprit one state at a time
        for (ic, x) in before.chunks_exact(m).enumerate() {
            let mut y = x.to_vec();
            if model.step_batch(&mut y).is_err() || y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Forecast { ic, lead });
            }
        }
        return Err(Error::Forecast { ic: 0, lead });
    }
    if let Some(pos) = states.iter().position(|v| !v.is_finite()) {
        return Err(Error::Forecast { ic: pos / m, lead });
    }
    Ok(())
}

/// Forecasts every IC with both models and scores the surrogate against the truth.
pub fn rmse_f<S, T>(surrogate: &S, truth: &T, ics: &[f64], max_lead: usize) -> Result<ForecastSkill>
where
    S: StepModel + ?Sized,
    T: StepModel + ?Sized,
{
    let m = truth.dim();
    check_len("surrogate dimension", m, surrogate.dim())?;
    if ics.is_empty() || ics.len() % m != 0 {
        return Err(Error::Dimension {
            context: "forecast initial conditions",
            expected: m,
            actual: ics.len(),
        });
    }
    let n_ic = ics.len() / m;
    let mut xs = ics.to_vec();
    let mut xt = ics.to_vec();
    let mut rmse = vec![0.0];
    let mut std = vec![0.0];
    for lead in 1..=max_lead {
        step_checked(surrogate, &mut xs, lead)?;
        step_checked(truth, &mut xt, lead)?;
        let per_ic: Vec<f64> = xs
            .chunks_exact(m)
            .zip(xt.chunks_exact(m))
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / m as f64)
            .collect();
        let mse = per_ic.iter().sum::<f64>() / n_ic as f64;
        let ic_rmse: Vec<f64> = per_ic.iter().map(|v| v.sqrt()).collect();
        let mean_r = ic_rmse.iter().sum::<f64>() / n_ic as f64;
        let var = ic_rmse.iter().map(|r| (r - mean_r).powi(2)).sum::<f64>() / n_ic as f64;
        rmse.push(mse.sqrt());
        std.push(var.sqrt());
    }
    Ok(ForecastSkill { rmse, std })
}

/// Truth, surrogate and difference grids (`(steps+1) x m`) from one IC.
pub fn hovmoller<S, T>(
    surrogate: &S,
    truth: &T,
    x0: &[f64],
    steps: usize,
) -> Result<[Vec<f64>; 3]>
where
    S: StepModel + ?Sized,
    T: StepModel + ?Sized,
{
    let m = truth.dim();
    check_len("hovmoller initial state", m, x0.len())?;
    let (mut a, mut b) = (x0.to_vec(), x0.to_vec());
    let mut grids = [x0.to_vec(), x0.to_vec(), vec![0.0; m]];
    for lead in 1..=steps {
        step_checked(truth, &mut a, lead)?;
        step_checked(surrogate, &mut b, lead)?;
        grids[0].extend_from_slice(&a);
        grids[1].extend_from_slice(&b);
        grids[2].extend(b.iter().zip(&a).map(|(s, t)| s - t));
    }
    Ok(grids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_truth() -> (ModelParams, Trajectory) {
        let p = ModelParams::default();
        let t = generate_truth(&crate::l96::default_initial_state(&p), 300, &p, 200).unwrap();
        (p, t)
    }

    #[test]
    fn rmse_a_of_truth_is_zero_and_offset_is_recovered() {
        let (_, t) = small_truth();
        let exact: Vec<f64> = t.as_slice()[40..].to_vec();
        let a = AnalysisSeries::new(40, 30, 0.1, 0, exact.clone(), vec![0.0; exact.len()]).unwrap();
        assert_eq!(rmse_a(&a, &t, 100).unwrap(), 0.0);
        let shifted: Vec<f64> = exact.iter().map(|v| v - 0.75).collect();
        let a = AnalysisSeries::new(40, 30, 0.1, 0, shifted, vec![0.0; exact.len()]).unwrap();
        assert!((rmse_a(&a, &t, 100).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rmse_a_rejects_bad_k0_and_lengths() {
        let (_, t) = small_truth();
        let exact: Vec<f64> = t.as_slice()[40..].to_vec();
        let a = AnalysisSeries::new(40, 30, 0.1, 0, exact.clone(), vec![0.0; exact.len()]).unwrap();
        assert!(rmse_a(&a, &t, 301).is_err());
        assert!(rmse_a(&a, &t, 0).is_err());
        assert!(field_rmse(&exact[40..], &t, 100).is_err());
    }

    #[test]
    fn forecast_skill_of_a_model_against_itself_is_zero() {
        let (p, _) = small_truth();
        let ics = forecast_ics(&p, &IcProtocol { count: 7, spacing: 5, seed: 2 }).unwrap();
        let skill = rmse_f(&p, &p, &ics, 30).unwrap();
        assert!(skill.rmse.iter().all(|&r| r == 0.0));
        assert_eq!(skill.rmse.len(), 31);
    }

    #[test]
    fn perturbed_forcing_diverges() {
        let (p, _) = small_truth();
        let q = ModelParams { forcing: 8.1, ..p };
        let ics = forecast_ics(&p, &IcProtocol { count: 10, spacing: 20, seed: 1 }).unwrap();
        let skill = rmse_f(&q, &p, &ics, 200).unwrap();
        assert!(skill.rmse[1] > 0.0);
        assert!(skill.rmse[200] > 10.0 * skill.rmse[1]);
        assert!(skill.std[1] >= 0.0);
    }

    #[test]
    fn forecast_blow_up_names_ic_and_lead() {
        struct Exploding;
        impl StepModel for Exploding {
            fn dim(&self) -> usize {
                40
            }
            fn step_batch(&self, s: &mut [f64]) -> Result<()> {
                for v in s.iter_mut() {
                    *v = if *v > 9.0 { f64::NAN } else { *v + 1.0 };
                }
                Ok(())
            }
        }
        let mut ics = vec![0.0; 80];
        ics[40] = 5.0;
        let p = ModelParams::default();
        match rmse_f(&Exploding, &p, &ics, 10) {
            Err(Error::Forecast { ic, lead }) => assert_eq!((ic, lead), (1, 6)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ics_are_spaced_samples_and_seeded() {
        let p = ModelParams::default();
        let proto = IcProtocol { count: 4, spacing: 3, seed: 5 };
        let a = forecast_ics(&p, &proto).unwrap();
        assert_eq!(a, forecast_ics(&p, &proto).unwrap());
        let mut x = a[..40].to_vec();
        for _ in 0..3 {
            x = crate::l96::rk4_step(&x, &p).unwrap();
        }
        for (u, v) in x.iter().zip(&a[40..80]) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_of_constant_field() {
        let t = Trajectory::new(4, 0.05, vec![2.5; 40]).unwrap();
        assert_eq!(mean_state(&t), 2.5);
        assert_eq!(climatological_std(&t), 0.0);
    }

    #[test]
    fn saturation_lead_of_a_ramp() {
        let rmse: Vec<f64> = (0..100).map(|i| (i as f64 / 50.0).min(1.0)).collect();
        let skill = ForecastSkill { std: vec![0.0; 100], rmse };
        assert_eq!(skill.saturation_lead(80..100, 0.9), Some(45));
    }

    #[test]
    fn hovmoller_difference_starts_at_zero() {
        let p = ModelParams::default();
        let q = ModelParams { forcing: 8.5, ..p };
        let (_, t) = small_truth();
        let [a, b, d] = hovmoller(&q, &p, t.state(10), 20).unwrap();
        assert_eq!(a.len(), 21 * 40);
        assert!(d[..40].iter().all(|&v| v == 0.0));
        assert!((d[800] - (b[800] - a[800])).abs() < 1e-15);
    }
}
