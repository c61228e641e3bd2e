//! Fixed-step simulation of the closed loop with zero-order-hold control.

pub mod config;
pub mod metrics;
mod run;
pub mod trajectory;

pub use config::{ControllerMode, ScenarioConfig, TimeGrid};
pub use metrics::{oscillation_count, MetricReport};
pub use run::{run_scenario, RunOutcome, Scenario};
pub use trajectory::Trajectory;

use crate::error::{Error, Result};

/// Classical fourth-order Runge-Kutta with reusable stage buffers.
#[derive(Clone, Debug)]
pub struct Rk4 {
    k: [Vec<f64>; 4],
    probe: Vec<f64>,
}

impl Rk4 {
    pub fn new(len: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; len]),
            probe: vec![0.0; len],
        }
    }

    /// Advances `y` from `t` to `t + dt` in place.
    ///
    /// `field(t, y, dy)` writes the derivative into `dy`. A non-finite derivative aborts the step and
    /// leaves `y` untouched.
    pub fn step<F>(&mut self, mut field: F, t: f64, y: &mut [f64], dt: f64) -> Result<()>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    {
        let n = y.len();
        let [k1, k2, k3, k4] = &mut self.k;
        let probe = &mut self.probe;
        let check = |k: &[f64], t: f64| match k.iter().position(|v| !v.is_finite()) {
            Some(component) => Err(Error::IntegrationDiverged { t, component }),
            None => Ok(()),
        };
        field(t, y, k1)?;
        check(k1, t)?;
        for i in 0..n {
            probe[i] = y[i] + 0.5 * dt * k1[i];
        }
        field(t + 0.5 * dt, probe, k2)?;
        check(k2, t)?;
        for i in 0..n {
            probe[i] = y[i] + 0.5 * dt * k2[i];
        }
        field(t + 0.5 * dt, probe, k3)?;
        check(k3, t)?;
        for i in 0..n {
            probe[i] = y[i] + dt * k3[i];
        }
        field(t + dt, probe, k4)?;
        check(k4, t)?;
        for i in 0..n {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        Ok(())
    }
}

/// One RK4 step returning the new state.
pub fn rk4_step<F>(field: F, y: &[f64], t: f64, dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if !(dt > 0.0) {
        return Err(crate::error::invalid("dt", "must be positive"));
    }
    let mut next = y.to_vec();
    Rk4::new(y.len()).step(field, t, &mut next, dt)?;
    Ok(next)
}
