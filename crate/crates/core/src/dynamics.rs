//! Model abstractions shared by the true resolvent and the surrogate.

use nalgebra::DMatrix;

use crate::error::{check_finite, check_len, Error, Result};
use crate::l96::Trajectory;

/// A one-step resolvent acting on batches of states.
pub trait StepModel: Sync {
    fn dim(&self) -> usize;

    /// Advances each row-major state of `states` (length a multiple of `dim`) by one step.
    fn step_batch(&self, states: &mut [f64]) -> Result<()>;
}

/// A resolvent that can also propagate tangent vectors exactly.
pub trait TangentModel: StepModel {
    type Workspace;

    /// Model time covered by one step.
    fn time_step(&self) -> f64;

    fn workspace(&self) -> Self::Workspace;

    /// Advances `x` one step and maps every column of `frame` through the
    /// Jacobian of the step taken at the old `x`.
    fn step_with_tangents(
        &self,
        ws: &mut Self::Workspace,
        x: &mut [f64],
        frame: &mut DMatrix<f64>,
    ) -> Result<()>;
}

impl<T: StepModel + ?Sized> StepModel for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn step_batch(&self, states: &mut [f64]) -> Result<()> {
        (**self).step_batch(states)
    }
}

/// Runs `model` freely for `steps` steps from `x0`, recording every state.
pub fn free_run<M: StepModel + ?Sized>(model: &M, x0: &[f64], steps: usize, h: f64) -> Result<Trajectory> {
    let m = model.dim();
    check_len("free_run", m, x0.len())?;
    check_finite("free_run initial state", x0)?;
    let mut data = Vec::with_capacity((steps + 1) * m);
    data.extend_from_slice(x0);
    let mut x = x0.to_vec();
    for step in 0..steps {
        model.step_batch(&mut x)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::IntegrationFailure { step });
        }
        data.extend_from_slice(&x);
    }
    Trajectory::new(m, h, data)
}
