//! Nonlinear observer for matched faults with a linear auxiliary function `omega(x) = C x`.

use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::{Matrix, Vector};

/// Observer gain `C` (`p x n`); the estimate is `u_f_hat = z + C x`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaultObserver {
    gain: Matrix,
}

impl FaultObserver {
    pub fn new(gain: Matrix, system: &SystemModel) -> Result<Self> {
        if gain.shape() != (system.input_dim(), system.state_dim()) {
            return Err(Error::Dimension(format!(
                "observer gain is {:?}, expected ({}, {})",
                gain.shape(),
                system.input_dim(),
                system.state_dim()
            )));
        }
        Ok(Self { gain })
    }

    pub fn gain(&self) -> &Matrix {
        &self.gain
    }

    /// `z(0) = -C x0`, so the estimate starts at zero.
    pub fn initial_state(&self, x0: &Vector) -> Vector {
        -(&self.gain * x0)
    }

    pub fn estimate(&self, z: &Vector, x: &Vector) -> Vector {
        z + &self.gain * x
    }

    /// `z' = -C (f(x) + g(x)(u + z + C x))`.
    pub fn derivative(&self, z: &Vector, x: &Vector, u: &Vector, system: &SystemModel) -> Vector {
        let estimate = self.estimate(z, x);
        -(&self.gain * (system.drift(x) + system.input_map(x) * (u + estimate)))
    }

    /// Smallest eigenvalue of the symmetric part of `C g(x)`; positive iff `C g` is positive definite.
    pub fn convergence_rate(&self, x: &Vector, system: &SystemModel) -> f64 {
        let lg = &self.gain * system.input_map(x);
        let sym = (&lg + lg.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }

    pub fn is_convergent_at(&self, x: &Vector, system: &SystemModel) -> bool {
        self.convergence_rate(x, system) > 0.0
    }
}

/// `u_f_hat = z + C x`.
pub fn observer_estimate(obs: &FaultObserver, z: &Vector, x: &Vector) -> Vector {
    obs.estimate(z, x)
}

/// `z'`, together with whether `C g(x)` is positive definite at `x`.
pub fn observer_derivative(
    obs: &FaultObserver,
    z: &Vector,
    x: &Vector,
    u: &Vector,
    system: &SystemModel,
) -> (Vector, bool) {
    (obs.derivative(z, x, u, system), obs.is_convergent_at(x, system))
}
