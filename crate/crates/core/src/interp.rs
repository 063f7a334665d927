//! Cubic-spline reconstruction of a sparsely observed field.
//!
//! Each grid point gets a natural cubic spline through its own observation
//! times. The default space-time scheme averages that with a periodic spline
//! across the observed points of each time step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obs::ObservationSeries;
use crate::par;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Per-grid-point temporal splines only.
    Temporal,
    /// Mean of the temporal and periodic spatial splines at unobserved points.
    #[default]
    SpaceTime,
}

/// Filled field for k = 1..=K, row-major, plus the observed mask.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolatedField {
    pub m: usize,
    pub states: Vec<f64>,
    pub mask: Vec<bool>,
}

impl InterpolatedField {
    pub fn len(&self) -> usize {
        self.states.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State at time index `k` (1-based).
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[(k - 1) * self.m..k * self.m]
    }

    pub fn observed(&self, k: usize, n: usize) -> bool {
        self.mask[(k - 1) * self.m + n]
    }

    /// Loss weights: 1 where observed, 0 elsewhere.
    pub fn mask_weights(&self) -> Vec<f64> {
        self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Natural cubic spline through strictly increasing abscissae.
#[derive(Clone, Debug)]
pub struct NaturalSpline {
    t: Vec<f64>,
    y: Vec<f64>,
    // second derivatives at the knots
    curv: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(t: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = t.len();
        if n < 2 || y.len() != n {
            return Err(Error::InvalidParameter(format!(
                "spline needs >= 2 matching knots, got {} abscissae and {} values",
                n,
                y.len()
            )));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("spline knots must increase".into()));
        }
        let mut curv = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations
            let inner = n - 2;
            let mut diag = vec![0.0; inner];
            let mut upper = vec![0.0; inner];
            let mut rhs = vec![0.0; inner];
            for i in 1..n - 1 {
                let h0 = t[i] - t[i - 1];
                let h1 = t[i + 1] - t[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for j in 1..inner {
                let lower = t[j + 1] - t[j];
                let w = lower / diag[j - 1];
                diag[j] -= w * upper[j - 1];
                rhs[j] -= w * rhs[j - 1];
            }
            curv[inner] = rhs[inner - 1] / diag[inner - 1];
            for j in (0..inner - 1).rev() {
                curv[j + 1] = (rhs[j] - upper[j] * curv[j + 2]) / diag[j];
            }
        }
        Ok(Self { t, y, curv })
    }

    /// Evaluates the spline; outside the knot range the end values are held.
    pub fn eval(&self, at: f64) -> f64 {
        let n = self.t.len();
        if at <= self.t[0] {
            return self.y[0];
        }
        if at >= self.t[n - 1] {
            return self.y[n - 1];
        }
        let i = match self.t.binary_search_by(|v| v.total_cmp(&at)) {
            Ok(i) => return self.y[i],
            Err(i) => i - 1,
        };
        self.eval_segment(i, at)
    }

    fn eval_segment(&self, i: usize, at: f64) -> f64 {
        let (t0, t1) = (self.t[i], self.t[i + 1]);
        let h = t1 - t0;
        let (a, b) = (t1 - at, at - t0);
        let (m0, m1) = (self.curv[i], self.curv[i + 1]);
        m0 * a * a * a / (6.0 * h)
            + m1 * b * b * b / (6.0 * h)
            + (self.y[i] / h - m0 * h / 6.0) * a
            + (self.y[i + 1] / h - m1 * h / 6.0) * b
    }
}

/// Cubic spline through points on a circle of circumference `period`.
fn periodic_spline_eval(pos: &[f64], y: &[f64], period: f64, at: &[f64]) -> Vec<f64> {
    let n = pos.len();
    let gap = |i: usize| {
        let next = if i + 1 == n { pos[0] + period } else { pos[i + 1] };
        next - pos[i]
    };
    // cyclic tridiagonal system for the knot curvatures, solved densely (n <= m)
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for i in 0..n {
        let prev = (i + n - 1) % n;
        let next = (i + 1) % n;
        let h0 = gap(prev);
        let h1 = gap(i);
        a[(i, prev)] += h0;
        a[(i, i)] += 2.0 * (h0 + h1);
        a[(i, next)] += h1;
        rhs[i] = 6.0 * ((y[next] - y[i]) / h1 - (y[i] - y[prev]) / h0);
    }
    let curv = a.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(n));
    at.iter()
        .map(|&x| {
            // segment i covers [pos[i], pos[i] + gap(i)) modulo the period
            let i = match pos.iter().rposition(|&p| p <= x) {
                Some(i) => i,
                None => n - 1,
            };
            let h = gap(i);
            let b = (x - pos[i]).rem_euclid(period);
            let a_ = h - b;
            let j = (i + 1) % n;
            curv[i] * a_ * a_ * a_ / (6.0 * h)
                + curv[j] * b * b * b / (6.0 * h)
                + (y[i] / h - curv[i] * h / 6.0) * a_
                + (y[j] / h - curv[j] * h / 6.0) * b
        })
        .collect()
}

/// Fills every unobserved (k, n) of `obs` by cubic interpolation.
///
/// Observed entries are copied through unchanged. Fails with the offending
/// grid point when any point has fewer than 4 observations.
pub fn cubic_interpolate(obs: &ObservationSeries, scheme: Scheme) -> Result<InterpolatedField> {
    let m = obs.m;
    let k_len = obs.len();
    let mut mask = vec![false; k_len * m];
    let mut states = vec![f64::NAN; k_len * m];
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); m];
    for (row, r) in obs.records.iter().enumerate() {
        for (&n, &v) in r.indices.iter().zip(&r.values) {
            mask[row * m + n] = true;
            states[row * m + n] = v;
            times[n].push(r.k as f64);
            values[n].push(v);
        }
    }
    for (point, t) in times.iter().enumerate() {
        if t.len() < 4 {
            return Err(Error::UnderObserved {
                point,
                count: t.len(),
            });
        }
    }

    let columns: Vec<Vec<f64>> = par::map_range(m, |n| {
        let spline = NaturalSpline::new(times[n].clone(), values[n].clone())
            .expect("knots validated above");
        (1..=k_len).map(|k| spline.eval(k as f64)).collect()
    });

    for (row, r) in obs.records.iter().enumerate() {
        let missing: Vec<usize> = (0..m).filter(|&n| !mask[row * m + n]).collect();
        if missing.is_empty() {
            continue;
        }
        let spatial = if scheme == Scheme::SpaceTime && r.p() >= 3 {
            let pos: Vec<f64> = r.indices.iter().map(|&i| i as f64).collect();
            let at: Vec<f64> = missing.iter().map(|&i| i as f64).collect();
            Some(periodic_spline_eval(&pos, &r.values, m as f64, &at))
        } else {
            None
        };
        for (j, &n) in missing.iter().enumerate() {
            let temporal = columns[n][row];
            states[row * m + n] = match &spatial {
                Some(s) => 0.5 * (temporal + s[j]),
                None => temporal,
            };
        }
    }
    Ok(InterpolatedField { m, states, mask })
}
