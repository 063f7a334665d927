//! Welch power spectral density.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WelchConfig {
    /// Sampling frequency; one model-time unit is read as one second.
    pub fs: f64,
    pub seg_len: usize,
    /// Fraction of a segment shared with the next one.
    pub overlap: f64,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self {
            fs: 20.0,
            seg_len: 512,
            overlap: 0.5,
        }
    }
}

/// One-sided density on frequencies in (0, fs/2].
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSpectrum {
    pub frequencies: Vec<f64>,
    pub densities: Vec<f64>,
    pub segments: usize,
}

impl PowerSpectrum {
    pub fn resolution(&self) -> f64 {
        self.frequencies[0]
    }

    /// Rectangle-rule integral of the density.
    pub fn total_power(&self) -> f64 {
        self.densities.iter().sum::<f64>() * self.resolution()
    }
}

/// Mean-detrended, periodic-Hann-windowed, overlapping periodograms
/// averaged and scaled so that the density integrates to the variance.
/// The DC bin is dropped.
pub fn welch_psd(series: &[f64], cfg: &WelchConfig) -> Result<PowerSpectrum> {
    let n = cfg.seg_len;
    if n < 4 || n % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "segment length {n} must be even and at least 4"
        )));
    }
    if !(0.0..1.0).contains(&cfg.overlap) || !(cfg.fs > 0.0 && cfg.fs.is_finite()) {
        return Err(Error::InvalidParameter(
            "overlap must lie in [0, 1) and fs must be positive".into(),
        ));
    }
    if series.len() < n {
        return Err(Error::InvalidParameter(format!(
            "series of {} points is shorter than one segment ({n})",
            series.len()
        )));
    }
    check_finite("psd series", series)?;
    let step = n - (n as f64 * cfg.overlap).round() as usize;
    let segments = (series.len() - n) / step + 1;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect();
    let scale = 1.0 / (cfg.fs * window.iter().map(|w| w * w).sum::<f64>());

    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut acc = vec![0.0; n / 2 + 1];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for s in 0..segments {
        let seg = &series[s * step..s * step + n];
        let mean = seg.iter().sum::<f64>() / n as f64;
        for ((b, x), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, c) in acc.iter_mut().zip(&buf) {
            *a += c.norm_sqr();
        }
    }
    let frequencies = (1..=n / 2).map(|i| i as f64 * cfg.fs / n as f64).collect();
    let densities = (1..=n / 2)
        .map(|i| {
            let one_sided = if i == n / 2 { 1.0 } else { 2.0 };
            one_sided * scale * acc[i] / segments as f64
        })
        .collect();
    Ok(PowerSpectrum {
        frequencies,
        densities,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn reference_segmentation() {
        let s = welch_psd(&vec![0.0; 16_000], &WelchConfig::default()).unwrap();
        assert_eq!(s.segments, 61);
        assert_eq!(s.frequencies.len(), 256);
        assert!((s.frequencies[255] - 10.0).abs() < 1e-12);
        assert!(s.frequencies[0] > 0.0);
    }

    #[test]
    fn sine_peak_and_power() {
        let cfg = WelchConfig::default();
        // bin-centred frequency: 64 cycles per 512 samples
        let f0 = 64.0 * cfg.fs / 512.0;
        let amp = 3.0;
        let x: Vec<f64> = (0..16_000)
            .map(|i| amp * (2.0 * PI * f0 * i as f64 / cfg.fs).sin())
            .collect();
        let s = welch_psd(&x, &cfg).unwrap();
        let peak = s
            .densities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((s.frequencies[peak] - f0).abs() < 1e-12);
        assert!((s.total_power() / (amp * amp / 2.0) - 1.0).abs() < 0.01);
    }

    #[test]
    fn white_noise_is_flat_and_satisfies_parseval() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let sigma: f64 = 1.7;
        let d = Normal::new(0.0, sigma).unwrap();
        let x: Vec<f64> = (0..2_000_000).map(|_| d.sample(&mut rng)).collect();
        let cfg = WelchConfig::default();
        let s = welch_psd(&x, &cfg).unwrap();
        let flat = sigma * sigma / (cfg.fs / 2.0);
        // bin 1 overlaps the removed mean through the window's main lobe
        for &p in &s.densities[1..255] {
            assert!((p / flat - 1.0).abs() < 0.1, "{p} vs {flat}");
        }
        assert!((s.total_power() / (sigma * sigma) - 1.0).abs() < 0.05);
    }

    #[test]
    fn short_series_rejected() {
        assert!(welch_psd(&[1.0; 100], &WelchConfig::default()).is_err());
    }
}
