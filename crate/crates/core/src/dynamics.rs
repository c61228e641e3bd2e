//! Control-affine plants and matched fault signals.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::{Matrix, Vector};

pub type VectorField = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;

const ORIGIN_TOL: f64 = 1e-12;

/// A plant `x' = f(x) + g(x) u` with `n` states and `p` inputs.
///
/// Cloning is cheap; the vector fields are shared.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    state_dim: usize,
    input_dim: usize,
    drift: VectorField,
    input_map: MatrixField,
    jacobian: Option<MatrixField>,
    input_map_bound: f64,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl SystemModel {
    /// Builds a model and checks `f(0) = 0` and the shapes of `f` and `g` at the origin.
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        input_dim: usize,
        drift: VectorField,
        input_map: MatrixField,
    ) -> Result<Self> {
        if state_dim == 0 || input_dim == 0 {
            return Err(invalid("dimensions", "state and input dimensions must be positive"));
        }
        let origin = Vector::zeros(state_dim);
        let f0 = drift(&origin);
        if f0.len() != state_dim {
            return Err(Error::Dimension(format!(
                "drift returns {} entries, expected {state_dim}",
                f0.len()
            )));
        }
        let g0 = input_map(&origin);
        if g0.shape() != (state_dim, input_dim) {
            return Err(Error::Dimension(format!(
                "input map is {:?}, expected ({state_dim}, {input_dim})",
                g0.shape()
            )));
        }
        let f0_norm = f0.norm();
        if !(f0_norm <= ORIGIN_TOL) {
            return Err(Error::DriftNotZeroAtOrigin(f0_norm));
        }
        Ok(Self {
            name: name.into(),
            state_dim,
            input_dim,
            drift,
            input_map,
            jacobian: None,
            input_map_bound: 1e6,
        })
    }

    pub fn with_jacobian(mut self, jacobian: MatrixField) -> Self {
        self.jacobian = Some(jacobian);
        self
    }

    /// Upper bound on `|g(x)|` checked along simulated trajectories.
    pub fn with_input_map_bound(mut self, bound: f64) -> Self {
        self.input_map_bound = bound;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input_map_bound(&self) -> f64 {
        self.input_map_bound
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    pub fn drift(&self, x: &Vector) -> Vector {
        (self.drift)(x)
    }

    pub fn input_map(&self, x: &Vector) -> Matrix {
        (self.input_map)(x)
    }

    /// `f(x) + g(x) u`.
    pub fn dynamics(&self, x: &Vector, u: &Vector) -> Vector {
        self.drift(x) + self.input_map(x) * u
    }

    /// Jacobian of the drift; central differences when no analytic form was supplied.
    pub fn jacobian(&self, x: &Vector) -> Matrix {
        match &self.jacobian {
            Some(jac) => jac(x),
            None => self.finite_difference_jacobian(x),
        }
    }

    pub fn finite_difference_jacobian(&self, x: &Vector) -> Matrix {
        let n = self.state_dim;
        let h = (1e-6 * x.norm()).max(1e-6);
        let mut jac = Matrix::zeros(n, n);
        let mut probe = x.clone();
        for j in 0..n {
            probe[j] = x[j] + h;
            let plus = self.drift(&probe);
            probe[j] = x[j] - h;
            let minus = self.drift(&probe);
            probe[j] = x[j];
            jac.set_column(j, &((plus - minus) / (2.0 * h)));
        }
        jac
    }

    /// Whether `0 < |g(x)| < bound` holds at `x`.
    pub fn input_map_in_bounds(&self, x: &Vector) -> bool {
        let norm = self.input_map(x).norm();
        norm > 0.0 && norm < self.input_map_bound
    }
}

/// Inverted pendulum `x1' = x2`, `x2' = (g/l) sin(x1) + u / (m l^2)`.
///
/// The angle is used as a raw number inside `sin`, whatever unit the caller has in mind.
pub fn make_pendulum(mass: f64, length: f64, gravity: f64) -> Result<SystemModel> {
    for (name, value) in [("mass", mass), ("length", length), ("gravity", gravity)] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(invalid(name, format!("must be positive, got {value}")));
        }
    }
    let stiffness = gravity / length;
    let input_gain = 1.0 / (mass * length * length);
    let drift: VectorField = Arc::new(move |x: &Vector| {
        Vector::from_vec(vec![x[1], stiffness * x[0].sin()])
    });
    let input_map: MatrixField =
        Arc::new(move |_x: &Vector| Matrix::from_row_slice(2, 1, &[0.0, input_gain]));
    let jacobian: MatrixField = Arc::new(move |x: &Vector| {
        Matrix::from_row_slice(2, 2, &[0.0, 1.0, stiffness * x[0].cos(), 0.0])
    });
    Ok(SystemModel::new("pendulum", 2, 1, drift, input_map)?.with_jacobian(jacobian))
}

/// Double integrator `p' = v`, `v' = u` with state ordering `(p_1.., v_1..)`.
pub fn make_double_integrator(axes: usize) -> Result<SystemModel> {
    if !(1..=2).contains(&axes) {
        return Err(invalid("axes", format!("must be 1 or 2, got {axes}")));
    }
    let n = 2 * axes;
    let drift: VectorField = Arc::new(move |x: &Vector| {
        let mut dx = Vector::zeros(n);
        for j in 0..axes {
            dx[j] = x[axes + j];
        }
        dx
    });
    let input_map: MatrixField = Arc::new(move |_x: &Vector| {
        let mut g = Matrix::zeros(n, axes);
        for j in 0..axes {
            g[(axes + j, j)] = 1.0;
        }
        g
    });
    let jacobian: MatrixField = Arc::new(move |_x: &Vector| {
        let mut jac = Matrix::zeros(n, n);
        for j in 0..axes {
            jac[(j, axes + j)] = 1.0;
        }
        jac
    });
    Ok(SystemModel::new("double-integrator", n, axes, drift, input_map)?.with_jacobian(jacobian))
}

/// Waveform of a single sinusoid term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Waveform {
    #[default]
    Sin,
    Cos,
}

/// `amplitude * wave(omega * t + phase)` added to one input channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidTerm {
    #[serde(default)]
    pub channel: usize,
    pub amplitude: f64,
    pub omega: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub wave: Waveform,
}

impl SinusoidTerm {
    fn angle(&self, t: f64) -> f64 {
        let shift = match self.wave {
            Waveform::Sin => 0.0,
            Waveform::Cos => FRAC_PI_2,
        };
        self.omega * t + self.phase + shift
    }

    fn value(&self, t: f64) -> f64 {
        self.amplitude * self.angle(t).sin()
    }

    fn derivative(&self, t: f64) -> f64 {
        self.amplitude * self.omega * self.angle(t).cos()
    }
}

/// Matched disturbance / actuator fault `u_f(t)` with an analytic time derivative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FaultSignal {
    Zero {
        channels: usize,
    },
    Constant {
        value: Vec<f64>,
    },
    SinusoidSum {
        offset: Vec<f64>,
        terms: Vec<SinusoidTerm>,
    },
    /// Piecewise-linear interpolation of `values[k]` at `times[k]`.
    Table {
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl FaultSignal {
    /// `-5 + 0.01 sin t + 0.03 cos t + 0.05 sin 2t + 0.04 cos 2t` on a single channel.
    pub fn biased_sinusoid() -> Self {
        let term = |amplitude, omega, wave| SinusoidTerm {
            channel: 0,
            amplitude,
            omega,
            phase: 0.0,
            wave,
        };
        FaultSignal::SinusoidSum {
            offset: vec![-5.0],
            terms: vec![
                term(0.01, 1.0, Waveform::Sin),
                term(0.03, 1.0, Waveform::Cos),
                term(0.05, 2.0, Waveform::Sin),
                term(0.04, 2.0, Waveform::Cos),
            ],
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            FaultSignal::Zero { channels } => *channels,
            FaultSignal::Constant { value } => value.len(),
            FaultSignal::SinusoidSum { offset, .. } => offset.len(),
            FaultSignal::Table { values, .. } => values.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FaultSignal::Zero { channels } if *channels == 0 => {
                Err(invalid("fault.channels", "must be positive"))
            }
            FaultSignal::SinusoidSum { offset, terms } => {
                if let Some(t) = terms.iter().find(|t| t.channel >= offset.len()) {
                    return Err(invalid(
                        "fault.terms",
                        format!("channel {} out of range for {} channels", t.channel, offset.len()),
                    ));
                }
                Ok(())
            }
            FaultSignal::Table { times, values } => {
                if times.len() < 2 || times.len() != values.len() {
                    return Err(invalid(
                        "fault.table",
                        "needs at least two rows and one value row per time",
                    ));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(invalid("fault.times", "must be strictly increasing"));
                }
                let width = values[0].len();
                if width == 0 || values.iter().any(|row| row.len() != width) {
                    return Err(invalid("fault.values", "rows must share a positive width"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Declared bounds `(eta1, eta2)` on `|u_f|` and `|u_f'|` over all time.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            FaultSignal::Zero { .. } => (0.0, 0.0),
            FaultSignal::Constant { value } => (Vector::from_column_slice(value).norm(), 0.0),
            FaultSignal::SinusoidSum { offset, terms } => {
                let mut value = offset.iter().map(|o| o.abs()).collect::<Vec<_>>();
                let mut rate = vec![0.0; offset.len()];
                for term in terms {
                    value[term.channel] += term.amplitude.abs();
                    rate[term.channel] += (term.amplitude * term.omega).abs();
                }
                (
                    Vector::from_vec(value).norm(),
                    Vector::from_vec(rate).norm(),
                )
            }
            FaultSignal::Table { times, values } => {
                let eta1 = values
                    .iter()
                    .map(|row| Vector::from_column_slice(row).norm())
                    .fold(0.0, f64::max);
                let eta2 = times
                    .windows(2)
                    .zip(values.windows(2))
                    .map(|(t, v)| {
                        let dv = Vector::from_column_slice(&v[1]) - Vector::from_column_slice(&v[0]);
                        dv.norm() / (t[1] - t[0])
                    })
                    .fold(0.0, f64::max);
                (eta1, eta2)
            }
        }
    }
}

/// Value and time derivative of the fault at `t >= 0`.
pub fn eval_fault(signal: &FaultSignal, t: f64) -> Result<(Vector, Vector)> {
    if !(t >= 0.0) {
        return Err(invalid("t", format!("fault time must be non-negative, got {t}")));
    }
    let p = signal.channels();
    match signal {
        FaultSignal::Zero { .. } => Ok((Vector::zeros(p), Vector::zeros(p))),
        FaultSignal::Constant { value } => {
            Ok((Vector::from_column_slice(value), Vector::zeros(p)))
        }
        FaultSignal::SinusoidSum { offset, terms } => {
            let mut value = Vector::from_column_slice(offset);
            let mut rate = Vector::zeros(p);
            for term in terms {
                value[term.channel] += term.value(t);
                rate[term.channel] += term.derivative(t);
            }
            Ok((value, rate))
        }
        FaultSignal::Table { times, values } => {
            let (start, end) = (times[0], times[times.len() - 1]);
            if t < start || t > end {
                return Err(Error::TableRange { t, start, end });
            }
            // partition_point gives the first node strictly after t
            let k = times.partition_point(|&node| node <= t).clamp(1, times.len() - 1);
            let (t0, t1) = (times[k - 1], times[k]);
            let v0 = Vector::from_column_slice(&values[k - 1]);
            let v1 = Vector::from_column_slice(&values[k]);
            let slope = (&v1 - &v0) / (t1 - t0);
            Ok((&v0 + &slope * (t - t0), slope))
        }
    }
}
