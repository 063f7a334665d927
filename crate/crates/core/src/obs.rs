//! Synthetic observations: a fresh random sub-sampling operator at every step
//! plus additive Gaussian noise.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_finite, Error, Result};
use crate::l96::Trajectory;
use crate::rng::{self, Stream};

/// Observations at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationRecord {
    pub k: usize,
    /// Observed grid points, distinct and ascending.
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl ObservationRecord {
    pub fn new(k: usize, indices: Vec<usize>, values: Vec<f64>, m: usize) -> Result<Self> {
        validate_indices(&indices, m)?;
        if indices.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidIndices("indices must be ascending".into()));
        }
        if indices.len() != values.len() {
            return Err(Error::Dimension {
                context: "observation record values",
                expected: indices.len(),
                actual: values.len(),
            });
        }
        check_finite("observation values", &values)?;
        Ok(Self { k, indices, values })
    }

    pub fn p(&self) -> usize {
        self.indices.len()
    }
}

/// One record per step k = 1..=K.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeries {
    pub m: usize,
    pub sigma_obs: f64,
    pub seed: u64,
    pub records: Vec<ObservationRecord>,
}

impl ObservationSeries {
    pub fn new(m: usize, sigma_obs: f64, seed: u64, records: Vec<ObservationRecord>) -> Result<Self> {
        if !(sigma_obs >= 0.0 && sigma_obs.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma_obs={sigma_obs} must be >= 0")));
        }
        let p = records.first().map_or(0, |r| r.p());
        for (i, r) in records.iter().enumerate() {
            if r.k != i + 1 {
                return Err(Error::InvalidParameter(format!(
                    "record {i} has k={}, expected {}",
                    r.k,
                    i + 1
                )));
            }
            if r.p() != p {
                return Err(Error::InvalidParameter(format!(
                    "record k={} has {} observations, series has {p}",
                    r.k,
                    r.p()
                )));
            }
            validate_indices(&r.indices, m)?;
        }
        Ok(Self {
            m,
            sigma_obs,
            seed,
            records,
        })
    }

    /// Number of observed steps K.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn p(&self) -> usize {
        self.records.first().map_or(0, |r| r.p())
    }

    /// Record for time index `k` (1-based).
    pub fn at(&self, k: usize) -> &ObservationRecord {
        &self.records[k - 1]
    }
}

fn validate_indices(indices: &[usize], m: usize) -> Result<()> {
    if indices.len() > m {
        return Err(Error::InvalidIndices(format!(
            "{} indices for a state of dimension {m}",
            indices.len()
        )));
    }
    let mut seen = vec![false; m];
    for &i in indices {
        if i >= m {
            return Err(Error::InvalidIndices(format!("index {i} out of range 0..{m}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidIndices(format!("duplicate index {i}")));
        }
    }
    Ok(())
}

/// Noise-free projection of `x` onto the observed indices.
pub fn apply_h(x: &[f64], indices: &[usize]) -> Result<Vec<f64>> {
    validate_indices(indices, x.len())?;
    Ok(indices.iter().map(|&i| x[i]).collect())
}

/// Draws `p` distinct locations per step and adds N(0, sigma_obs²) noise.
///
/// Observations cover k = 1..=K of `traj` (state 0 is never observed).
/// Noise is drawn for all m grid points at every step and then sub-sampled,
/// so the noise at a given (k, n) does not depend on `p`.
pub fn sample_observations(
    traj: &Trajectory,
    p: usize,
    sigma_obs: f64,
    seed: u64,
) -> Result<ObservationSeries> {
    let m = traj.m();
    if p == 0 || p > m {
        return Err(Error::InvalidParameter(format!(
            "p={p} observations per step must lie in 1..={m}"
        )));
    }
    if !(sigma_obs >= 0.0 && sigma_obs.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma_obs={sigma_obs} must be >= 0")));
    }
    let mut idx_rng = rng::stream(seed, Stream::ObservationIndices);
    let mut noise_rng = rng::stream(seed, Stream::ObservationNoise);
    let mut pool: Vec<usize> = (0..m).collect();
    let mut noise = vec![0.0; m];
    let mut records = Vec::with_capacity(traj.len().saturating_sub(1));
    for k in 1..traj.len() {
        let x = traj.state(k);
        pool.sort_unstable();
        let (chosen, _) = pool.partial_shuffle(&mut idx_rng, p);
        let mut indices = chosen.to_vec();
        indices.sort_unstable();
        for e in noise.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            *e = sigma_obs * z;
        }
        let values: Vec<f64> = indices.iter().map(|&i| x[i] + noise[i]).collect();
        check_finite("observation values", &values)?;
        records.push(ObservationRecord { k, indices, values });
    }
    Ok(ObservationSeries {
        m,
        sigma_obs,
        seed,
        records,
    })
}

/// Number of observations per step for a coverage fraction of the domain.
pub fn density_to_count(density: f64, m: usize) -> Result<usize> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidParameter(format!("density {density} must be in (0, 1]")));
    }
    Ok(((density * m as f64).round() as usize).clamp(1, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::l96::{default_initial_state, generate_truth, ModelParams};

    fn truth(k: usize) -> Trajectory {
        let p = ModelParams::default();
        generate_truth(&default_initial_state(&p), k, &p, 200).unwrap()
    }

    #[test]
    fn full_projection_is_identity() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.3).collect();
        let all: Vec<usize> = (0..40).collect();
        assert_eq!(apply_h(&x, &all).unwrap(), x);
    }

    #[test]
    fn single_index_projection() {
        let mut x = vec![0.0; 40];
        x[3] = 7.5;
        assert_eq!(apply_h(&x, &[3]).unwrap(), vec![7.5]);
    }

    #[test]
    fn projection_commutes_with_roll() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let idx = vec![1, 5, 17, 39];
        for s in 0..40 {
            let mut rolled = x.clone();
            rolled.rotate_right(s);
            let shifted: Vec<usize> = idx.iter().map(|i| (i + s) % 40).collect();
            assert_eq!(apply_h(&rolled, &shifted).unwrap(), apply_h(&x, &idx).unwrap());
        }
    }

    #[test]
    fn bad_indices_rejected() {
        let x = vec![0.0; 40];
        assert!(matches!(apply_h(&x, &[40]), Err(Error::InvalidIndices(_))));
        assert!(matches!(apply_h(&x, &[2, 2]), Err(Error::InvalidIndices(_))));
    }

    #[test]
    fn perfect_full_observations_equal_truth() {
        let t = truth(50);
        let obs = sample_observations(&t, 40, 0.0, 3).unwrap();
        assert_eq!(obs.len(), 50);
        for r in &obs.records {
            assert_eq!(r.values, t.state(r.k));
        }
    }

    #[test]
    fn too_many_observations_rejected() {
        let t = truth(5);
        assert!(sample_observations(&t, 41, 1.0, 0).is_err());
        assert!(sample_observations(&t, 0, 1.0, 0).is_err());
    }

    #[test]
    fn same_seed_same_series() {
        let t = truth(100);
        let a = sample_observations(&t, 20, 1.0, 42).unwrap();
        let b = sample_observations(&t, 20, 1.0, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_observations(&t, 20, 1.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_at_common_points_does_not_depend_on_p() {
        let t = truth(200);
        let a = sample_observations(&t, 12, 1.0, 7).unwrap();
        let full = sample_observations(&t, 40, 1.0, 7).unwrap();
        for (ra, rf) in a.records.iter().zip(&full.records) {
            for (i, &n) in ra.indices.iter().enumerate() {
                assert_eq!(ra.values[i], rf.values[n]);
            }
        }
    }

    #[test]
    fn density_rounds_to_nearest() {
        assert_eq!(density_to_count(0.5, 40).unwrap(), 20);
        assert_eq!(density_to_count(0.3, 40).unwrap(), 12);
        assert_eq!(density_to_count(1.0, 40).unwrap(), 40);
        assert!(density_to_count(0.0, 40).is_err());
    }
}
