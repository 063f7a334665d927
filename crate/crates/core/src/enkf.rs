//! Finite-size ensemble Kalman filter (EnKF-N) in its dual form.
//!
//! The analysis minimizes, over ensemble-space coordinates `w` of the
//! unnormalised anomalies `A`,
//!
//! ```text
//! J(w) = ½‖d − Y w‖² + (N/2) ln(ε_N + wᵀw),   ε_N = 1 + 1/N
//! ```
//!
//! with `Y = H A / σ` and `d = (y − H x̄) / σ`. The log prior is handled
//! through its dual: a 1-D minimization over the scalar `ζ` followed by a
//! ridge solve. The updated anomalies come from the inverse square root of
//! the Hessian of `J` at the optimum.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::StepModel;
use crate::error::{check_finite, check_len, Error, Result};
use crate::obs::{ObservationRecord, ObservationSeries};
use crate::rng::{self, Rng, Stream};

/// Columns are members.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: DMatrix<f64>,
    pub k: usize,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>, k: usize) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::InvalidParameter(format!(
                "ensemble needs at least 2 members, got {}",
                members.ncols()
            )));
        }
        check_finite("ensemble", members.as_slice())?;
        Ok(Self { members, k })
    }

    /// `center` plus i.i.d. N(0, spread²) perturbations.
    pub fn perturbed(center: &[f64], n: usize, spread: f64, seed: u64, k: usize) -> Result<Self> {
        let mut rng = rng::stream(seed, Stream::EnsembleInit);
        let m = center.len();
        let mut members = DMatrix::from_fn(m, n, |i, _| center[i]);
        for v in members.iter_mut() {
            *v += spread * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
        Self::new(members, k)
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub n_members: usize,
    /// Additive model-noise standard deviation.
    pub sigma_m: f64,
    /// Spread of the initial perturbations around the starting state.
    #[serde(default = "default_init_spread")]
    pub init_spread: f64,
    /// Lower bound on the observation error assumed by the analysis, so that
    /// noise-free observations can still be assimilated.
    #[serde(default = "default_obs_error_floor")]
    pub obs_error_floor: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_init_spread() -> f64 {
    1.0
}

fn default_obs_error_floor() -> f64 {
    0.5
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_members: 30,
            sigma_m: 0.1,
            init_spread: 1.0,
            obs_error_floor: default_obs_error_floor(),
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_members < 2 {
            return Err(Error::InvalidParameter(format!(
                "ensemble size {} < 2",
                self.n_members
            )));
        }
        if !(self.sigma_m >= 0.0 && self.sigma_m.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma_m={}", self.sigma_m)));
        }
        if !(self.init_spread >= 0.0 && self.init_spread.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "init_spread={}",
                self.init_spread
            )));
        }
        if !(self.obs_error_floor > 0.0 && self.obs_error_floor.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "obs_error_floor={}",
                self.obs_error_floor
            )));
        }
        Ok(())
    }
}

/// Analysis means and diagonal covariances for k = 1..=K, row-major `K x m`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisSeries {
    pub m: usize,
    pub n_members: usize,
    pub sigma_m: f64,
    pub seed: u64,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl AnalysisSeries {
    pub fn new(
        m: usize,
        n_members: usize,
        sigma_m: f64,
        seed: u64,
        means: Vec<f64>,
        variances: Vec<f64>,
    ) -> Result<Self> {
        if m == 0 || means.len() % m != 0 {
            return Err(Error::Dimension {
                context: "analysis means",
                expected: m,
                actual: means.len(),
            });
        }
        check_len("analysis variances", means.len(), variances.len())?;
        check_finite("analysis means", &means)?;
        if variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(
                "analysis variances must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            m,
            n_members,
            sigma_m,
            seed,
            means,
            variances,
        })
    }

    pub fn len(&self) -> usize {
        self.means.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Analysis mean at `k` (1-based).
    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[(k - 1) * self.m..k * self.m]
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[(k - 1) * self.m..k * self.m]
    }
}

/// Sample mean and unbiased per-component variance.
pub fn ensemble_moments(ens: &Ensemble) -> (Vec<f64>, Vec<f64>) {
    let n = ens.size() as f64;
    let x = &ens.members;
    let mean: Vec<f64> = x.row_iter().map(|r| r.sum() / n).collect();
    let var = x
        .row_iter()
        .zip(&mean)
        .map(|(r, mu)| r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    (mean, var)
}

/// Propagates every member and adds N(0, sigma_m²) noise to each component.
pub fn forecast_ensemble<M: StepModel + ?Sized>(
    ens: &mut Ensemble,
    model: &M,
    sigma_m: f64,
    rng: &mut Rng,
) -> Result<()> {
    check_len("forecast model dimension", ens.dim(), model.dim())?;
    let k = ens.k + 1;
    model.step_batch(ens.members.as_mut_slice()).map_err(|e| match e {
        Error::Member { member, source, .. } => Error::Member { member, k, source },
        other => Error::Filter {
            k,
            source: Box::new(other),
        },
    })?;
    if let Some(pos) = ens.members.iter().position(|v| !v.is_finite()) {
        return Err(Error::Member {
            member: pos / ens.dim(),
            k,
            source: Box::new(Error::non_finite("forecast state")),
        });
    }
    if sigma_m > 0.0 {
        let noise = Normal::new(0.0, sigma_m).expect("validated sigma_m");
        for v in ens.members.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    ens.k = k;
    Ok(())
}

/// Outcome of the inner dual minimization, exposed for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalysisInfo {
    pub zeta: f64,
    /// Whether the rank-one correction had to be dropped from the Hessian.
    pub hessian_fallback: bool,
}

/// `D(ζ)` up to a constant, in terms of the eigen-decomposition `YᵀY = V Λ Vᵀ`
/// and `b = Vᵀ Yᵀ d`.
fn dual_cost(zeta: f64, lambda: &[f64], b: &[f64], n: f64, eps_n: f64) -> f64 {
    let fit: f64 = lambda.iter().zip(b).map(|(l, bj)| bj * bj / (zeta + l)).sum();
    -0.5 * fit + 0.5 * eps_n * zeta - 0.5 * n * zeta.ln()
}

fn minimize_dual(lambda: &[f64], b: &[f64], n: f64, eps_n: f64) -> Result<f64> {
    let upper = n / eps_n;
    let lower = upper * 1e-9;
    let f = |z: f64| dual_cost(z, lambda, b, n, eps_n);
    // the dual can be non-convex: scan a log grid, then refine the best cell
    const GRID: usize = 120;
    let ratio = (upper / lower).ln();
    let at = |i: usize| lower * (ratio * i as f64 / GRID as f64).exp();
    let mut best = (0, f64::INFINITY);
    for i in 0..=GRID {
        let v = f(at(i));
        if v < best.1 {
            best = (i, v);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::Minimization {
            lower,
            upper,
            reason: "dual cost is not finite on the search grid".into(),
        });
    }
    let (mut a, mut c) = (at(best.0.saturating_sub(1)), at((best.0 + 1).min(GRID)));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = c - g * (c - a);
    let mut x2 = a + g * (c - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    let mut iter = 0;
    while (c - a) > 1e-8 * (a + c) {
        iter += 1;
        if iter > 500 {
            return Err(Error::Minimization {
                lower: a,
                upper: c,
                reason: "golden-section search did not converge".into(),
            });
        }
        if f1 <= f2 {
            c = x2;
            x2 = x1;
            f2 = f1;
            x1 = c - g * (c - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (c - a);
            f2 = f(x2);
        }
    }
    let zeta = 0.5 * (a + c);
    let edge = if f(upper) < f(zeta) { upper } else { zeta };
    Ok(edge)
}

/// EnKF-N analysis in place. Returns the inflation diagnostics.
pub fn analysis_enkfn(
    ens: &mut Ensemble,
    obs: &ObservationRecord,
    sigma_obs: f64,
) -> Result<AnalysisInfo> {
    if obs.k != ens.k {
        return Err(Error::InvalidParameter(format!(
            "observation at k={} applied to ensemble at k={}",
            obs.k, ens.k
        )));
    }
    if !(sigma_obs > 0.0 && sigma_obs.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sigma_obs={sigma_obs} must be positive"
        )));
    }
    let (m, n) = (ens.dim(), ens.size());
    if let Some(&bad) = obs.indices.iter().find(|&&i| i >= m) {
        return Err(Error::InvalidIndices(format!("index {bad} out of range 0..{m}")));
    }
    let nf = n as f64;
    let eps_n = 1.0 + 1.0 / nf;

    let mean: DVector<f64> = ens.members.column_mean();
    let mut anomalies = ens.members.clone();
    for mut col in anomalies.column_iter_mut() {
        col -= &mean;
    }
    let p = obs.p();
    let y = DMatrix::from_fn(p, n, |r, c| anomalies[(obs.indices[r], c)] / sigma_obs);
    for (r, &idx) in obs.indices.iter().enumerate() {
        if y.row(r).iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateEnsemble { k: ens.k, index: idx });
        }
    }
    let d = DVector::from_iterator(
        p,
        obs.indices
            .iter()
            .zip(&obs.values)
            .map(|(&i, v)| (v - mean[i]) / sigma_obs),
    );

    let yty = y.transpose() * &y;
    let eig = SymmetricEigen::new(yty.clone());
    let lambda: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0)).collect();
    let ytd = y.transpose() * &d;
    let b = eig.eigenvectors.transpose() * &ytd;
    let zeta = minimize_dual(&lambda, b.as_slice(), nf, eps_n)?;

    let scaled = DVector::from_iterator(n, b.iter().zip(&lambda).map(|(bj, l)| bj / (zeta + l)));
    let w = &eig.eigenvectors * scaled;

    let mut hessian = yty.clone();
    for i in 0..n {
        hessian[(i, i)] += zeta;
    }
    let full = &hessian - (2.0 * zeta * zeta / nf) * (&w * w.transpose());
    let mut hessian_fallback = false;
    let mut heig = SymmetricEigen::new(full);
    if heig.eigenvalues.iter().any(|&l| l <= 0.0) {
        hessian_fallback = true;
        heig = SymmetricEigen::new(hessian);
    }
    let scale = DVector::from_iterator(
        n,
        heig.eigenvalues.iter().map(|l| ((nf - 1.0) / l).sqrt()),
    );
    let transform =
        &heig.eigenvectors * DMatrix::from_diagonal(&scale) * heig.eigenvectors.transpose();

    let new_mean = &mean + &anomalies * &w;
    let mut members = anomalies * transform;
    for mut col in members.column_iter_mut() {
        col += &new_mean;
    }
    check_finite("analysis ensemble", members.as_slice())?;
    ens.members = members;
    Ok(AnalysisInfo {
        zeta,
        hessian_fallback,
    })
}

/// Alternates forecasts and analyses over the whole observation series.
pub fn run_filter<M: StepModel + ?Sized>(
    model: &M,
    obs: &ObservationSeries,
    cfg: &FilterConfig,
    mut ens: Ensemble,
) -> Result<AnalysisSeries> {
    cfg.validate()?;
    check_len("filter ensemble dimension", obs.m, ens.dim())?;
    if ens.k != 0 {
        return Err(Error::InvalidParameter(format!(
            "initial ensemble must be at k=0, got k={}",
            ens.k
        )));
    }
    let mut rng = rng::stream(cfg.seed, Stream::ModelNoise);
    let sigma_obs = obs.sigma_obs.max(cfg.obs_error_floor);
    let mut means = Vec::with_capacity(obs.len() * obs.m);
    let mut variances = Vec::with_capacity(obs.len() * obs.m);
    for record in &obs.records {
        forecast_ensemble(&mut ens, model, cfg.sigma_m, &mut rng)?;
        analysis_enkfn(&mut ens, record, sigma_obs).map_err(|e| Error::Filter {
            k: record.k,
            source: Box::new(e),
        })?;
        let (mu, var) = ensemble_moments(&ens);
        means.extend(mu);
        variances.extend(var);
    }
    AnalysisSeries::new(obs.m, ens.size(), cfg.sigma_m, cfg.seed, means, variances)
}
