//! Declarative scenario description, read from and written to TOML.

use serde::{Deserialize, Serialize};

use crate::barrier::{BarrierForm, ClassK, ConstraintShape};
use crate::dynamics::{make_double_integrator, make_pendulum, FaultSignal, SystemModel};
use crate::error::{invalid, Error, Result};
use crate::learner::{LearnerGains, MonomialOrder, SampleRegion};
use crate::safeguard::{CostWeights, SafeguardConfig};
use crate::Matrix;

/// How the applied input is assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerMode {
    /// Learned policy with fault compensation only.
    ClassicalRl,
    /// Learned policy plus safeguard with constant gains.
    FixedSafeguard,
    /// Learned policy plus safeguard; gains flagged adaptive follow the adaptive law.
    AdaptiveSafeguard,
    /// Lagrangian policy using the true fault.
    KktExact,
    /// Learned policy passed through a minimal-change QP filter.
    QpFilter,
    /// Fixed nominal law plus safeguard, no learning.
    Handcrafted,
}

impl ControllerMode {
    pub const ALL: [ControllerMode; 6] = [
        ControllerMode::ClassicalRl,
        ControllerMode::FixedSafeguard,
        ControllerMode::AdaptiveSafeguard,
        ControllerMode::KktExact,
        ControllerMode::QpFilter,
        ControllerMode::Handcrafted,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerMode::ClassicalRl => "classical-rl",
            ControllerMode::FixedSafeguard => "fixed-safeguard",
            ControllerMode::AdaptiveSafeguard => "adaptive-safeguard",
            ControllerMode::KktExact => "kkt-exact",
            ControllerMode::QpFilter => "qp-filter",
            ControllerMode::Handcrafted => "handcrafted",
        }
    }

    /// Modes that promise safety; a violation in one of them is a regression.
    pub fn is_safeguarded(&self) -> bool {
        matches!(
            self,
            ControllerMode::FixedSafeguard | ControllerMode::AdaptiveSafeguard | ControllerMode::KktExact
        )
    }

    pub fn uses_learner(&self) -> bool {
        !matches!(self, ControllerMode::Handcrafted)
    }

    /// Modes whose initial state must lie strictly inside every chain set.
    pub fn needs_feasible_start(&self) -> bool {
        !matches!(self, ControllerMode::ClassicalRl)
    }
}

impl std::str::FromStr for ControllerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControllerMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid("mode", format!("unknown mode `{s}`")))
    }
}

impl std::fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemConfig {
    Pendulum { mass: f64, length: f64, gravity: f64 },
    DoubleIntegrator { axes: usize },
}

impl SystemConfig {
    pub fn build(&self) -> Result<SystemModel> {
        match *self {
            SystemConfig::Pendulum { mass, length, gravity } => make_pendulum(mass, length, gravity),
            SystemConfig::DoubleIntegrator { axes } => make_double_integrator(axes),
        }
    }
}

/// A weight matrix given as a scalar multiple of the identity, a diagonal, or in full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightMatrix {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl WeightMatrix {
    pub fn to_matrix(&self, dim: usize, name: &str) -> Result<Matrix> {
        match self {
            WeightMatrix::Scalar(s) => Ok(Matrix::identity(dim, dim) * *s),
            WeightMatrix::Diagonal(d) if d.len() == dim => Ok(Matrix::from_diagonal(&crate::Vector::from_column_slice(d))),
            WeightMatrix::Full(rows) if rows.len() == dim && rows.iter().all(|r| r.len() == dim) => {
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                Ok(Matrix::from_row_slice(dim, dim, &flat))
            }
            _ => Err(Error::Dimension(format!("{name} must be a scalar, a {dim}-entry diagonal or a {dim}x{dim} matrix"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub q: WeightMatrix,
    pub r: WeightMatrix,
}

impl CostConfig {
    pub fn build(&self, system: &SystemModel) -> Result<CostWeights> {
        CostWeights::new(
            self.q.to_matrix(system.state_dim(), "q")?,
            self.r.to_matrix(system.input_dim(), "r")?,
        )
    }
}

/// One state constraint with its safeguard settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub label: String,
    pub shape: ConstraintShape,
    #[serde(default = "one")]
    pub relative_degree: usize,
    /// Explicit class-K functions; when empty, `alpha_gain * s` is used at every level.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alphas: Vec<ClassK>,
    #[serde(default = "unit_gain")]
    pub alpha_gain: f64,
    #[serde(default)]
    pub form: BarrierForm,
    /// Initial safeguarding gain.
    #[serde(default)]
    pub ks0: f64,
    #[serde(default)]
    pub adaptive: bool,
    /// Linear gain of the class-K bound used by the KKT and QP baselines.
    #[serde(default = "unit_gain")]
    pub gamma3: f64,
}

fn one() -> usize {
    1
}

fn unit_gain() -> f64 {
    1.0
}

impl ConstraintConfig {
    pub fn alphas(&self) -> Vec<ClassK> {
        if self.alphas.is_empty() {
            vec![ClassK::linear(self.alpha_gain); self.relative_degree.saturating_sub(1)]
        } else {
            self.alphas.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Rows of `C` in `omega(x) = C x`.
    #[serde(default)]
    pub gain: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    #[serde(default)]
    pub order: MonomialOrder,
    pub critic0: Vec<f64>,
    pub actor0: Vec<f64>,
    /// `Gamma(0) = gamma0 * I`.
    pub gamma0: f64,
    #[serde(default)]
    pub gains: LearnerGains,
    pub samples: SampleRegion,
    /// Actor projection radius; ten times `|actor0|` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor_bound: Option<f64>,
    /// Weight of the barrier penalty added to the learner's stage cost.
    #[serde(default)]
    pub penalty_weight: f64,
    /// Threshold for the persistence-of-excitation check.
    #[serde(default)]
    pub pe_threshold: f64,
}

/// `offset + amplitude sin(omega t)` for one position axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackTarget {
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub omega: f64,
}

impl TrackTarget {
    pub fn at(&self, t: f64) -> f64 {
        self.offset + self.amplitude * (self.omega * t).sin()
    }
}

/// Fixed feedback law used by handcrafted scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NominalConfig {
    Zero,
    /// `u_j = kp (target_j(t) - p_j) - kv v_j` on a double integrator.
    PdTracking { kp: f64, kv: f64, targets: Vec<TrackTarget> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultPreset {
    Zero,
    #[serde(alias = "paper-sinusoid")]
    BiasedSinusoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FaultSpec {
    Preset(FaultPreset),
    Signal(FaultSignal),
}

impl Default for FaultSpec {
    fn default() -> Self {
        FaultSpec::Preset(FaultPreset::Zero)
    }
}

impl FaultSpec {
    pub fn to_signal(&self, channels: usize) -> Result<FaultSignal> {
        let signal = match self {
            FaultSpec::Preset(FaultPreset::Zero) => FaultSignal::Zero { channels },
            FaultSpec::Preset(FaultPreset::BiasedSinusoid) => {
                let base = FaultSignal::biased_sinusoid();
                match base {
                    FaultSignal::SinusoidSum { offset, terms } if channels > 1 => FaultSignal::SinusoidSum {
                        offset: offset.into_iter().chain(std::iter::repeat(0.0)).take(channels).collect(),
                        terms,
                    },
                    other => other,
                }
            }
            FaultSpec::Signal(signal) => signal.clone(),
        };
        signal.validate()?;
        if signal.channels() != channels {
            return Err(Error::Dimension(format!(
                "fault has {} channels, plant has {channels} inputs",
                signal.channels()
            )));
        }
        Ok(signal)
    }
}

/// Everything needed to reproduce one simulation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub mode: ControllerMode,
    pub system: SystemConfig,
    pub cost: CostConfig,
    pub x0: Vec<f64>,
    /// Simulated time in seconds.
    pub horizon: f64,
    /// Integration step in seconds; rounded down so that `1 / control_frequency` is a whole number of steps.
    pub dt: f64,
    /// Control recomputation rate in Hz.
    pub control_frequency: f64,
    /// Keep every `record_stride`-th integration step in the trajectory.
    #[serde(default = "one")]
    pub record_stride: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fault: FaultSpec,
    #[serde(default)]
    pub safeguard: SafeguardConfig,
    #[serde(default)]
    pub observer: ObserverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal: Option<NominalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learner: Option<LearnerConfig>,
    #[serde(default)]
    pub constraints: Vec<ConstraintConfig>,
}

/// Integration grid derived from `dt`, `control_frequency` and `horizon`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub substeps: usize,
    pub steps: usize,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        for (name, value) in [("dt", self.dt), ("control_frequency", self.control_frequency), ("horizon", self.horizon)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(invalid(name, format!("must be positive, got {value}")));
            }
        }
        if self.record_stride == 0 {
            return Err(invalid("record_stride", "must be positive"));
        }
        let period = 1.0 / self.control_frequency;
        let substeps = ((period / self.dt) - 1e-9).ceil().max(1.0) as usize;
        let dt = period / substeps as f64;
        let steps = (self.horizon / dt).round() as usize;
        Ok(TimeGrid { dt, substeps, steps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "demo"
mode = "classical-rl"
x0 = [1.0, 0.0]
horizon = 1.0
dt = 0.001
control_frequency = 1000.0

[system]
kind = "double-integrator"
axes = 1

[cost]
q = 1.0
r = [2.0]

[learner]
critic0 = [1.0, 1.0, 1.0]
actor0 = [1.0, 1.0, 1.0]
gamma0 = 10.0
samples = { lower = [-1.0, -1.0], upper = [1.0, 1.0], resolution = 3 }

[[constraints]]
label = "v"
shape = { kind = "halfspace", normal = [0.0, 1.0], offset = 2.0 }
ks0 = 0.5
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ScenarioConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.fault, FaultSpec::Preset(FaultPreset::Zero));
        assert_eq!(cfg.record_stride, 1);
        assert_eq!(cfg.constraints[0].relative_degree, 1);
        assert_eq!(cfg.constraints[0].gamma3, 1.0);
        assert_eq!(cfg.learner.as_ref().unwrap().gains, LearnerGains::default());
        let sys = cfg.system.build().unwrap();
        let w = cfg.cost.build(&sys).unwrap();
        assert_eq!(w.r()[(0, 0)], 2.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("horizon = 1.0", "horizon = 1.0\nhorizn = 2.0");
        assert!(matches!(ScenarioConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = ScenarioConfig::from_toml(MINIMAL).unwrap();
        cfg.fault = FaultSpec::Signal(FaultSignal::biased_sinusoid());
        cfg.nominal = Some(NominalConfig::PdTracking {
            kp: 100.0,
            kv: 1.0,
            targets: vec![TrackTarget { offset: 0.0, amplitude: 11.5, omega: 1.0 }],
        });
        let text = cfg.to_toml().unwrap();
        assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn time_grid_rounds_dt_down() {
        let mut cfg = ScenarioConfig::from_toml(MINIMAL).unwrap();
        cfg.control_frequency = 100.0;
        cfg.dt = 0.003;
        let grid = cfg.time_grid().unwrap();
        assert_eq!(grid.substeps, 4);
        assert!((grid.dt - 0.0025).abs() < 1e-15);
        assert_eq!(grid.steps, 400);
        cfg.dt = 0.001;
        assert_eq!(cfg.time_grid().unwrap().substeps, 10);
        cfg.control_frequency = 5000.0;
        let fast = cfg.time_grid().unwrap();
        assert_eq!(fast.substeps, 1);
        assert!((fast.dt - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn weight_matrix_forms() {
        let full = WeightMatrix::Full(vec![vec![2.0, 0.5], vec![0.5, 1.0]]);
        assert_eq!(full.to_matrix(2, "q").unwrap()[(0, 1)], 0.5);
        assert!(WeightMatrix::Diagonal(vec![1.0]).to_matrix(2, "q").is_err());
        let multi = FaultSpec::Preset(FaultPreset::BiasedSinusoid).to_signal(2).unwrap();
        assert_eq!(multi.channels(), 2);
    }

    #[test]
    fn modes_parse_by_name() {
        for mode in ControllerMode::ALL {
            assert_eq!(mode.as_str().parse::<ControllerMode>().unwrap(), mode);
        }
        assert!("bogus".parse::<ControllerMode>().is_err());
    }
}
