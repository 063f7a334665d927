//! Lorenz-96 dynamics: tendency, RK4 resolvent, its exact tangent linear map
//! and truth-trajectory generation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{StepModel, TangentModel};
use crate::error::{check_finite, check_len, Error, Result};
use crate::par;

/// Steps discarded before any recorded trajectory.
pub const DEFAULT_SPINUP: usize = 1_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// State dimension.
    pub m: usize,
    /// Forcing.
    pub forcing: f64,
    /// Integration and observation step, model time units.
    pub h: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            m: 40,
            forcing: 8.0,
            h: 0.05,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 4 {
            return Err(Error::InvalidParameter(format!(
                "state dimension m={} must be at least 4",
                self.m
            )));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "time step h={} must be positive",
                self.h
            )));
        }
        if !self.forcing.is_finite() {
            return Err(Error::InvalidParameter("forcing must be finite".into()));
        }
        Ok(())
    }
}

#[inline]
fn wrap(i: isize, m: usize) -> usize {
    i.rem_euclid(m as isize) as usize
}

/// Unchecked tendency kernel; `out` and `x` have the same length.
#[inline]
pub(crate) fn tendency_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let m = x.len();
    // interior points avoid the modulo
    for n in 2..m - 1 {
        out[n] = (x[n + 1] - x[n - 2]) * x[n - 1] - x[n] + forcing;
    }
    for n in [0, 1, m - 1] {
        let ip1 = (n + 1) % m;
        let im1 = wrap(n as isize - 1, m);
        let im2 = wrap(n as isize - 2, m);
        out[n] = (x[ip1] - x[im2]) * x[im1] - x[n] + forcing;
    }
}

/// Jacobian of the tendency at `x` applied to `v`.
#[inline]
pub(crate) fn tendency_jvp_into(x: &[f64], v: &[f64], out: &mut [f64]) {
    let m = x.len();
    for n in 0..m {
        let ip1 = if n + 1 == m { 0 } else { n + 1 };
        let im1 = if n == 0 { m - 1 } else { n - 1 };
        let im2 = wrap(n as isize - 2, m);
        out[n] = (v[ip1] - v[im2]) * x[im1] + (x[ip1] - x[im2]) * v[im1] - v[n];
    }
}

/// dx/dt of the Lorenz-96 system.
pub fn l96_tendency(x: &[f64], p: &ModelParams) -> Result<Vec<f64>> {
    check_len("l96_tendency", p.m, x.len())?;
    check_finite("l96_tendency input", x)?;
    let mut out = vec![0.0; p.m];
    tendency_into(x, p.forcing, &mut out);
    Ok(out)
}

/// Continuous-time Jacobian-vector product of the tendency.
pub fn tendency_jvp(x: &[f64], v: &[f64], p: &ModelParams) -> Result<Vec<f64>> {
    check_len("tendency_jvp state", p.m, x.len())?;
    check_len("tendency_jvp vector", p.m, v.len())?;
    let mut out = vec![0.0; p.m];
    tendency_jvp_into(x, v, &mut out);
    Ok(out)
}

/// Scratch space for RK4 stepping and its tangent.
#[derive(Clone, Debug)]
pub struct Rk4Workspace {
    // stage states x1..x4 are kept for the tangent pass
    stages: [Vec<f64>; 4],
    k: [Vec<f64>; 4],
    dk: Vec<f64>,
    dx_stage: Vec<f64>,
    acc: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(m: usize) -> Self {
        let z = || vec![0.0; m];
        Self {
            stages: [z(), z(), z(), z()],
            k: [z(), z(), z(), z()],
            dk: z(),
            dx_stage: z(),
            acc: z(),
        }
    }

    /// Advances `x` in place by one step of size `h`, keeping stage states.
    pub fn step(&mut self, x: &mut [f64], forcing: f64, h: f64) {
        let m = x.len();
        let [s1, s2, s3, s4] = &mut self.stages;
        let [k1, k2, k3, k4] = &mut self.k;
        s1.copy_from_slice(x);
        tendency_into(s1, forcing, k1);
        for n in 0..m {
            s2[n] = x[n] + 0.5 * h * k1[n];
        }
        tendency_into(s2, forcing, k2);
        for n in 0..m {
            s3[n] = x[n] + 0.5 * h * k2[n];
        }
        tendency_into(s3, forcing, k3);
        for n in 0..m {
            s4[n] = x[n] + h * k3[n];
        }
        tendency_into(s4, forcing, k4);
        for n in 0..m {
            x[n] += h / 6.0 * (k1[n] + 2.0 * k2[n] + 2.0 * k3[n] + k4[n]);
        }
    }

    /// Applies the Jacobian of the most recent [`step`](Self::step) to `dx` in place.
    pub fn tangent(&mut self, dx: &mut [f64], h: f64) {
        let m = dx.len();
        let coef = [0.5 * h, 0.5 * h, h];
        self.acc.fill(0.0);
        self.dx_stage.copy_from_slice(dx);
        for stage in 0..4 {
            tendency_jvp_into(&self.stages[stage], &self.dx_stage, &mut self.dk);
            let w = if stage == 0 || stage == 3 { 1.0 } else { 2.0 };
            for n in 0..m {
                self.acc[n] += w * self.dk[n];
            }
            if stage < 3 {
                for n in 0..m {
                    self.dx_stage[n] = dx[n] + coef[stage] * self.dk[n];
                }
            }
        }
        for n in 0..m {
            dx[n] += h / 6.0 * self.acc[n];
        }
    }
}

/// One classical RK4 step of size `p.h`: the true resolvent.
pub fn rk4_step(x: &[f64], p: &ModelParams) -> Result<Vec<f64>> {
    check_len("rk4_step", p.m, x.len())?;
    check_finite("rk4_step input", x)?;
    let mut ws = Rk4Workspace::new(p.m);
    let mut out = x.to_vec();
    ws.step(&mut out, p.forcing, p.h);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::IntegrationFailure { step: 0 })
    }
}

/// Exact tangent linear map of [`rk4_step`] at `x`, applied to `dx`.
pub fn tangent_step(x: &[f64], dx: &[f64], p: &ModelParams) -> Result<Vec<f64>> {
    check_len("tangent_step state", p.m, x.len())?;
    check_len("tangent_step vector", p.m, dx.len())?;
    let mut ws = Rk4Workspace::new(p.m);
    let mut xs = x.to_vec();
    ws.step(&mut xs, p.forcing, p.h);
    let mut out = dx.to_vec();
    ws.tangent(&mut out, p.h);
    Ok(out)
}

/// Uniformly spaced sequence of states, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    m: usize,
    h: f64,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(m: usize, h: f64, data: Vec<f64>) -> Result<Self> {
        if m == 0 || data.is_empty() || data.len() % m != 0 {
            return Err(Error::InvalidParameter(format!(
                "trajectory buffer of {} values is not a positive multiple of m={m}",
                data.len()
            )));
        }
        check_finite("trajectory", &data)?;
        Ok(Self { m, h, data })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Number of stored states (K+1 for a K-step run).
    pub fn len(&self) -> usize {
        self.data.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.data[k * self.m..(k + 1) * self.m]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.m)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Time series of a single grid point.
    pub fn component(&self, n: usize) -> Vec<f64> {
        self.states().map(|s| s[n]).collect()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Iterates `k_steps` RK4 steps from `x0` after discarding `spinup` steps.
pub fn generate_truth(
    x0: &[f64],
    k_steps: usize,
    p: &ModelParams,
    spinup: usize,
) -> Result<Trajectory> {
    p.validate()?;
    check_len("generate_truth", p.m, x0.len())?;
    check_finite("generate_truth initial state", x0)?;
    let mut ws = Rk4Workspace::new(p.m);
    let mut x = x0.to_vec();
    for step in 0..spinup {
        ws.step(&mut x, p.forcing, p.h);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::IntegrationFailure { step });
        }
    }
    let mut data = Vec::with_capacity((k_steps + 1) * p.m);
    data.extend_from_slice(&x);
    for step in 0..k_steps {
        ws.step(&mut x, p.forcing, p.h);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::IntegrationFailure {
                step: spinup + step,
            });
        }
        data.extend_from_slice(&x);
    }
    Ok(Trajectory {
        m: p.m,
        h: p.h,
        data,
    })
}

/// The conventional perturbed rest state used to start spin-ups.
pub fn default_initial_state(p: &ModelParams) -> Vec<f64> {
    let mut x = vec![p.forcing; p.m];
    x[0] += 0.01;
    x
}

impl StepModel for ModelParams {
    fn dim(&self) -> usize {
        self.m
    }

    fn step_batch(&self, states: &mut [f64]) -> Result<()> {
        check_len("rk4 batch", 0, states.len() % self.m)?;
        let m = self.m;
        const PER_TASK: usize = 16;
        let failures = par::map_chunks_mut(states, m * PER_TASK, |ci, chunk| {
            let mut ws = Rk4Workspace::new(m);
            for (j, x) in chunk.chunks_exact_mut(m).enumerate() {
                ws.step(x, self.forcing, self.h);
                if !x.iter().all(|v| v.is_finite()) {
                    return Some(ci * PER_TASK + j);
                }
            }
            None
        });
        if let Some(member) = failures.into_iter().flatten().next() {
            return Err(Error::Member {
                member,
                k: 0,
                source: Box::new(Error::IntegrationFailure { step: 0 }),
            });
        }
        Ok(())
    }
}

impl TangentModel for ModelParams {
    type Workspace = Rk4Workspace;

    fn time_step(&self) -> f64 {
        self.h
    }

    fn workspace(&self) -> Rk4Workspace {
        Rk4Workspace::new(self.m)
    }

    fn step_with_tangents(
        &self,
        ws: &mut Rk4Workspace,
        x: &mut [f64],
        frame: &mut DMatrix<f64>,
    ) -> Result<()> {
        ws.step(x, self.forcing, self.h);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::IntegrationFailure { step: 0 });
        }
        for mut col in frame.column_iter_mut() {
            ws.tangent(col.as_mut_slice(), self.h);
        }
        Ok(())
    }
}
