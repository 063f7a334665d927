//! Benettin/QR estimation of Lyapunov exponents.

use nalgebra::DMatrix;

use crate::dynamics::TangentModel;
use crate::error::{check_finite, check_len, Error, Result};

/// Exponents per model-time unit, sorted descending.
#[derive(Clone, Debug, PartialEq)]
pub struct LyapunovSpectrum {
    pub exponents: Vec<f64>,
    pub n_steps: usize,
}

impl LyapunovSpectrum {
    pub fn leading(&self) -> f64 {
        self.exponents[0]
    }

    pub fn sum(&self) -> f64 {
        self.exponents.iter().sum()
    }

    /// Number of strictly positive exponents.
    pub fn positive_count(&self) -> usize {
        self.exponents.iter().filter(|&&l| l > 0.0).count()
    }
}

/// Propagates a `count`-column orthonormal frame along the trajectory from
/// `x0`, re-orthonormalising every `reorth_every` steps. Growth during the
/// first `transient` steps is discarded.
pub fn lyapunov_spectrum<M: TangentModel + ?Sized>(
    model: &M,
    x0: &[f64],
    count: usize,
    n_steps: usize,
    transient: usize,
    reorth_every: usize,
) -> Result<LyapunovSpectrum> {
    let m = model.dim();
    check_len("lyapunov initial state", m, x0.len())?;
    check_finite("lyapunov initial state", x0)?;
    if count == 0 || count > m {
        return Err(Error::InvalidParameter(format!(
            "exponent count {count} outside 1..={m}"
        )));
    }
    if n_steps == 0 || reorth_every == 0 {
        return Err(Error::InvalidParameter(
            "step count and re-orthonormalisation interval must be positive".into(),
        ));
    }
    let mut ws = model.workspace();
    let mut x = x0.to_vec();
    let mut frame = DMatrix::<f64>::identity(m, count);
    let mut sums = vec![0.0; count];
    let total = transient + n_steps;
    for step in 1..=total {
        model.step_with_tangents(&mut ws, &mut x, &mut frame)?;
        if step % reorth_every == 0 || step == transient || step == total {
            let qr = frame.clone().qr();
            let r = qr.r();
            for i in 0..count {
                let d = r[(i, i)].abs();
                if !(d > 0.0 && d.is_finite()) {
                    return Err(Error::RankCollapse { step });
                }
                if step > transient {
                    sums[i] += d.ln();
                }
            }
            frame = qr.q();
        }
    }
    let t = n_steps as f64 * model.time_step();
    let mut exponents: Vec<f64> = sums.iter().map(|s| s / t).collect();
    exponents.sort_by(|a, b| b.total_cmp(a));
    Ok(LyapunovSpectrum { exponents, n_steps })
}

/// Leading exponent only, by renormalising a single tangent vector.
pub fn leading_exponent<M: TangentModel + ?Sized>(
    model: &M,
    x0: &[f64],
    n_steps: usize,
    transient: usize,
) -> Result<f64> {
    lyapunov_spectrum(model, x0, 1, n_steps, transient, 1).map(|s| s.exponents[0])
}

/// Root of the summed squared differences over the first `n_lead` exponents.
pub fn rmse_lyapunov(reference: &LyapunovSpectrum, other: &LyapunovSpectrum, n_lead: usize) -> Result<f64> {
    if reference.exponents.len() < n_lead || other.exponents.len() < n_lead {
        return Err(Error::InvalidParameter(format!(
            "spectra need at least {n_lead} exponents"
        )));
    }
    Ok(reference.exponents[..n_lead]
        .iter()
        .zip(&other.exponents[..n_lead])
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::StepModel;
    use crate::l96::{default_initial_state, generate_truth, ModelParams};

    /// Linear map with known exponents ln|d_i| / h.
    struct Diagonal(Vec<f64>);

    impl StepModel for Diagonal {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn step_batch(&self, s: &mut [f64]) -> Result<()> {
            for (v, d) in s.iter_mut().zip(self.0.iter().cycle()) {
                *v *= d;
            }
            Ok(())
        }
    }

    impl TangentModel for Diagonal {
        type Workspace = ();
        fn time_step(&self) -> f64 {
            0.5
        }
        fn workspace(&self) {}
        fn step_with_tangents(&self, _: &mut (), x: &mut [f64], f: &mut DMatrix<f64>) -> Result<()> {
            self.step_batch(x)?;
            for (i, mut row) in f.row_iter_mut().enumerate() {
                row *= self.0[i];
            }
            Ok(())
        }
    }

    #[test]
    fn diagonal_map_has_log_exponents() {
        let d = Diagonal(vec![0.5, 2.0, 1.0]);
        let s = lyapunov_spectrum(&d, &[1.0, 1.0, 1.0], 3, 50, 5, 3).unwrap();
        let want = [2f64.ln() / 0.5, 0.0, 0.5f64.ln() / 0.5];
        for (a, b) in s.exponents.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn singular_map_collapses() {
        let d = Diagonal(vec![1.0, 0.0]);
        assert!(matches!(
            lyapunov_spectrum(&d, &[1.0, 1.0], 2, 10, 0, 1),
            Err(Error::RankCollapse { step: 1 })
        ));
    }

    #[test]
    fn short_l96_run_obeys_the_trace_rule() {
        let p = ModelParams::default();
        let x0 = generate_truth(&default_initial_state(&p), 0, &p, 1000).unwrap();
        let s = lyapunov_spectrum(&p, x0.state(0), 40, 2000, 200, 1).unwrap();
        assert!((s.sum() + 40.0).abs() < 0.5, "{}", s.sum());
        assert!(s.exponents.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.leading() > 1.0 && s.leading() < 2.5);
    }

    #[test]
    fn rmse_lyapunov_closed_form() {
        let a = LyapunovSpectrum { exponents: (0..40).map(|i| 2.0 - i as f64 * 0.1).collect(), n_steps: 1 };
        let mut b = a.clone();
        assert_eq!(rmse_lyapunov(&a, &b, 12).unwrap(), 0.0);
        for e in b.exponents.iter_mut() {
            *e += 0.3;
        }
        assert!((rmse_lyapunov(&a, &b, 12).unwrap() - 0.3 * 12f64.sqrt()).abs() < 1e-12);
        let short = LyapunovSpectrum { exponents: vec![1.0; 5], n_steps: 1 };
        assert!(rmse_lyapunov(&a, &short, 12).is_err());
    }
}
