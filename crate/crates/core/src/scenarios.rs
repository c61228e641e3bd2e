//! Built-in scenarios.
//!
//! Every builder takes a seed; only the robot scenarios consume it, to place obstacles. The obstacles
//! are written into the returned configuration as explicit constraints, so a saved configuration
//! reproduces the run without the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::barrier::{BarrierForm, ConstraintShape};
use crate::learner::{LearnerGains, MonomialOrder, SampleRegion};
use crate::safeguard::SafeguardConfig;
use crate::simkit::config::{
    ConstraintConfig, ControllerMode, CostConfig, FaultSpec, LearnerConfig, NominalConfig, ObserverConfig,
    ScenarioConfig, SystemConfig, TrackTarget, WeightMatrix,
};

pub const DEFAULT_SEED: u64 = 7;

/// Start positions used by the robot comparisons.
pub const ROBOT_STARTS: [[f64; 2]; 4] = [[-3.0, -2.0], [2.0, 3.0], [2.5, -3.0], [-3.0, -1.5]];

pub struct RegistryEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub build: fn(u64) -> ScenarioConfig,
}

pub fn registry() -> Vec<RegistryEntry> {
    vec![
        RegistryEntry {
            name: "example1-ks",
            description: "1-axis double integrator tracking a sinusoid under a speed limit at 100 Hz control",
            build: example1,
        },
        RegistryEntry {
            name: "pendulum-classical",
            description: "inverted pendulum, actor-critic without safety terms",
            build: |seed| pendulum(seed, PendulumVariant::Classical),
        },
        RegistryEntry {
            name: "pendulum-penalty",
            description: "inverted pendulum, actor-critic with a barrier penalty in the stage cost",
            build: |seed| pendulum(seed, PendulumVariant::Penalty),
        },
        RegistryEntry {
            name: "pendulum-qpfilter",
            description: "inverted pendulum, actor-critic behind a QP safety filter, no observer",
            build: |seed| pendulum(seed, PendulumVariant::QpFilter),
        },
        RegistryEntry {
            name: "pendulum-horcbf",
            description: "inverted pendulum, actor-critic with high-order safeguard and fault observer",
            build: |seed| pendulum(seed, PendulumVariant::Safeguard),
        },
        RegistryEntry {
            name: "pendulum-kkt",
            description: "inverted pendulum, Lagrangian policy using the true fault",
            build: |seed| pendulum(seed, PendulumVariant::Kkt),
        },
        RegistryEntry {
            name: "robot-case1-classical",
            description: "planar robot among obstacles, actor-critic without safety terms",
            build: |seed| robot_case1(seed, RobotCase1::Classical),
        },
        RegistryEntry {
            name: "robot-case1-rcbf",
            description: "planar robot, first-order reciprocal barriers only (no authority over positions)",
            build: |seed| robot_case1(seed, RobotCase1::FirstOrder),
        },
        RegistryEntry {
            name: "robot-case1-horcbf",
            description: "planar robot, high-order safeguard on positions and velocities",
            build: |seed| robot_case1(seed, RobotCase1::HighOrder),
        },
        RegistryEntry {
            name: "robot-case2-fixed",
            description: "planar robot, fixed safeguard gains without manipulation",
            build: |seed| robot_case2(seed, RobotCase2::Fixed),
        },
        RegistryEntry {
            name: "robot-case2-adaptive-mu",
            description: "planar robot, fixed gains with gradient manipulation",
            build: |seed| robot_case2(seed, RobotCase2::ManipulationOnly),
        },
        RegistryEntry {
            name: "robot-case2-adaptive",
            description: "planar robot, adaptive position gains with gradient manipulation",
            build: |seed| robot_case2(seed, RobotCase2::Adaptive),
        },
        RegistryEntry {
            name: "lqr-double-integrator",
            description: "unconstrained 1-axis double integrator; the critic should reach the Riccati solution",
            build: lqr_double_integrator,
        },
    ]
}

/// Looks up `name` (or the alias `robot-ks` for `example1-ks`) and builds it.
pub fn build(name: &str, seed: Option<u64>) -> Option<ScenarioConfig> {
    let name = if name == "robot-ks" { "example1-ks" } else { name };
    registry()
        .into_iter()
        .find(|e| e.name == name)
        .map(|e| (e.build)(seed.unwrap_or(DEFAULT_SEED)))
}

fn halfspace(label: &str, normal: Vec<f64>, offset: f64, ks0: f64) -> ConstraintConfig {
    ConstraintConfig {
        label: label.into(),
        shape: ConstraintShape::Halfspace { normal, offset },
        relative_degree: 1,
        alphas: vec![],
        alpha_gain: 1.0,
        form: BarrierForm::Reciprocal,
        ks0,
        adaptive: false,
        gamma3: 1.0,
    }
}

fn base(name: &str, description: &str, mode: ControllerMode, system: SystemConfig, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        description: description.into(),
        mode,
        system,
        cost: CostConfig {
            q: WeightMatrix::Scalar(1.0),
            r: WeightMatrix::Scalar(1.0),
        },
        x0: vec![],
        horizon: 10.0,
        dt: 1e-3,
        control_frequency: 1000.0,
        record_stride: 1,
        seed,
        fault: FaultSpec::default(),
        safeguard: SafeguardConfig::default(),
        observer: ObserverConfig::default(),
        nominal: None,
        learner: None,
        constraints: vec![],
    }
}

fn example1(seed: u64) -> ScenarioConfig {
    let mut cfg = base(
        "example1-ks",
        "speed-limited tracking with a zero-order-hold safeguard",
        ControllerMode::Handcrafted,
        SystemConfig::DoubleIntegrator { axes: 1 },
        seed,
    );
    cfg.x0 = vec![0.0, 0.0];
    cfg.control_frequency = 100.0;
    cfg.nominal = Some(NominalConfig::PdTracking {
        kp: 100.0,
        kv: 1.0,
        targets: vec![TrackTarget {
            offset: 0.0,
            amplitude: 11.5,
            omega: 1.0,
        }],
    });
    cfg.constraints = vec![halfspace("v", vec![0.0, 1.0], 15.0, 50.0)];
    cfg
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PendulumVariant {
    Classical,
    Penalty,
    QpFilter,
    Safeguard,
    Kkt,
}

fn pendulum(seed: u64, variant: PendulumVariant) -> ScenarioConfig {
    let (name, mode) = match variant {
        PendulumVariant::Classical => ("pendulum-classical", ControllerMode::ClassicalRl),
        PendulumVariant::Penalty => ("pendulum-penalty", ControllerMode::ClassicalRl),
        PendulumVariant::QpFilter => ("pendulum-qpfilter", ControllerMode::QpFilter),
        PendulumVariant::Safeguard => ("pendulum-horcbf", ControllerMode::FixedSafeguard),
        PendulumVariant::Kkt => ("pendulum-kkt", ControllerMode::KktExact),
    };
    let mut cfg = base(
        name,
        "inverted pendulum with an angle limit (relative degree two) and a rate limit",
        mode,
        SystemConfig::Pendulum {
            mass: 2.0,
            length: 1.0,
            gravity: 10.0,
        },
        seed,
    );
    cfg.x0 = vec![0.5, 10.0];
    // the angle barrier needs a fine step: at coarser steps the discrete loop overshoots the boundary layer
    cfg.dt = 2e-5;
    cfg.control_frequency = 5e4;
    cfg.record_stride = 50;
    let mut angle = halfspace("theta", vec![1.0, 0.0], 0.8, 1.0);
    angle.relative_degree = 2;
    angle.alpha_gain = 100.0;
    let mut rate = halfspace("omega", vec![0.0, -1.0], 2.0, 1.0);
    // the baselines' decay rate matches the chain's; at rate 1 the two rows conflict from x0 on
    angle.gamma3 = 100.0;
    rate.gamma3 = 100.0;
    cfg.constraints = vec![angle, rate];
    cfg.learner = Some(LearnerConfig {
        order: MonomialOrder::Lexicographic,
        critic0: vec![40.0, 120.0, 30.0],
        actor0: vec![40.0, 120.0, 30.0],
        gamma0: 1000.0,
        gains: LearnerGains::default(),
        samples: SampleRegion {
            lower: vec![-0.5, -1.0],
            upper: vec![0.5, 1.0],
            resolution: 5,
        },
        actor_bound: None,
        penalty_weight: if variant == PendulumVariant::Penalty { 1.0 } else { 0.0 },
        pe_threshold: 0.0,
    });
    if variant == PendulumVariant::Safeguard {
        cfg.observer = ObserverConfig {
            enabled: true,
            gain: vec![vec![0.0, 20.0]],
        };
    }
    cfg
}

/// Obstacles of radius 0.3..0.5, one across each straight path from a start position to the origin.
pub fn sample_obstacles(seed: u64, starts: &[[f64; 2]]) -> Vec<([f64; 2], f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed: Vec<([f64; 2], f64)> = Vec::new();
    for start in starts {
        let length = (start[0] * start[0] + start[1] * start[1]).sqrt();
        let (dir, normal) = ([start[0] / length, start[1] / length], [-start[1] / length, start[0] / length]);
        for _ in 0..1000 {
            let radius = rng.gen_range(0.3..0.5);
            let along = rng.gen_range(0.3..0.7) * length;
            let lateral = rng.gen_range(-0.5..0.5) * radius;
            let center = [
                dir[0] * along + normal[0] * lateral,
                dir[1] * along + normal[1] * lateral,
            ];
            let dist = |p: [f64; 2]| ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
            let clear_of_starts = starts.iter().all(|s| dist(*s) > radius + 0.3);
            let clear_of_origin = dist([0.0, 0.0]) > radius + 0.3;
            let inside_area = dist([0.0, 0.0]) + radius < 3.7;
            let apart = placed.iter().all(|(c, r)| dist(*c) > radius + r + 0.2);
            if clear_of_starts && clear_of_origin && inside_area && apart {
                placed.push((center, radius));
                break;
            }
        }
    }
    placed
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RobotCase1 {
    Classical,
    FirstOrder,
    HighOrder,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RobotCase2 {
    Fixed,
    ManipulationOnly,
    Adaptive,
}

/// Area, obstacle and speed constraints for the planar robot.
fn robot_constraints(seed: u64, position_degree: usize, position_gain: f64, adaptive: bool) -> Vec<ConstraintConfig> {
    let position = |label: String, shape: ConstraintShape| ConstraintConfig {
        label,
        shape,
        relative_degree: position_degree,
        alphas: vec![],
        alpha_gain: 1.0,
        form: BarrierForm::Reciprocal,
        ks0: position_gain,
        adaptive,
        gamma3: 1.0,
    };
    let mut out = vec![position(
        "area".into(),
        ConstraintShape::BallInclusion {
            indices: vec![0, 1],
            center: vec![0.0, 0.0],
            radius: 4.0,
        },
    )];
    for (k, (center, radius)) in sample_obstacles(seed, &ROBOT_STARTS).into_iter().enumerate() {
        out.push(position(
            format!("obstacle{k}"),
            ConstraintShape::BallExclusion {
                indices: vec![0, 1],
                center: center.to_vec(),
                radius,
            },
        ));
    }
    let speed = 0.8;
    for (axis, name) in [(2, "vx"), (3, "vy")] {
        for (sign, suffix) in [(1.0, "max"), (-1.0, "min")] {
            let mut normal = vec![0.0; 4];
            normal[axis] = sign;
            out.push(halfspace(&format!("{name}_{suffix}"), normal, speed, 0.01));
        }
    }
    out
}

fn robot_learner() -> LearnerConfig {
    let mut w0 = vec![0.0; 10];
    w0[..3].copy_from_slice(&[40.0, 120.0, 30.0]);
    LearnerConfig {
        order: MonomialOrder::SquaresFirst,
        critic0: w0.clone(),
        actor0: w0,
        gamma0: 1000.0,
        gains: LearnerGains::default(),
        samples: SampleRegion {
            // wider boxes drive the second axis to a non-stabilizing solution from these initial weights
            lower: vec![-0.25; 4],
            upper: vec![0.25; 4],
            resolution: 3,
        },
        actor_bound: None,
        penalty_weight: 0.0,
        pe_threshold: 0.0,
    }
}

fn robot_base(name: &str, description: &str, mode: ControllerMode, seed: u64) -> ScenarioConfig {
    let mut cfg = base(name, description, mode, SystemConfig::DoubleIntegrator { axes: 2 }, seed);
    let start = ROBOT_STARTS[0];
    cfg.x0 = vec![start[0], start[1], 0.0, 0.0];
    cfg.horizon = 20.0;
    cfg.record_stride = 10;
    cfg.learner = Some(robot_learner());
    cfg
}

fn robot_case1(seed: u64, variant: RobotCase1) -> ScenarioConfig {
    let (name, mode, degree) = match variant {
        RobotCase1::Classical => ("robot-case1-classical", ControllerMode::ClassicalRl, 2),
        RobotCase1::FirstOrder => ("robot-case1-rcbf", ControllerMode::FixedSafeguard, 1),
        RobotCase1::HighOrder => ("robot-case1-horcbf", ControllerMode::FixedSafeguard, 2),
    };
    let mut cfg = robot_base(name, "planar double integrator in a disc with obstacles and speed limits", mode, seed);
    cfg.constraints = robot_constraints(seed, degree, 10.0, false);
    cfg
}

fn robot_case2(seed: u64, variant: RobotCase2) -> ScenarioConfig {
    let (name, mode, safeguard) = match variant {
        RobotCase2::Fixed => ("robot-case2-fixed", ControllerMode::FixedSafeguard, SafeguardConfig::default()),
        RobotCase2::ManipulationOnly => (
            "robot-case2-adaptive-mu",
            ControllerMode::AdaptiveSafeguard,
            SafeguardConfig {
                mu: 0.5,
                ..SafeguardConfig::default()
            },
        ),
        RobotCase2::Adaptive => (
            "robot-case2-adaptive",
            ControllerMode::AdaptiveSafeguard,
            SafeguardConfig {
                mu: 0.5,
                decay: 500.0,
                growth: 0.001,
                ..SafeguardConfig::default()
            },
        ),
    };
    let mut cfg = robot_base(name, "planar double integrator; safeguard gain tuning compared on cost", mode, seed);
    cfg.safeguard = safeguard;
    cfg.constraints = robot_constraints(seed, 2, 10.0, variant != RobotCase2::Fixed);
    cfg
}

fn lqr_double_integrator(seed: u64) -> ScenarioConfig {
    let mut cfg = base(
        "lqr-double-integrator",
        "unconstrained regulation; exact quadratic value function",
        ControllerMode::ClassicalRl,
        SystemConfig::DoubleIntegrator { axes: 1 },
        seed,
    );
    cfg.x0 = vec![1.0, 0.0];
    cfg.horizon = 20.0;
    cfg.record_stride = 10;
    cfg.learner = Some(LearnerConfig {
        order: MonomialOrder::Lexicographic,
        critic0: vec![4.0, 4.0, 4.0],
        actor0: vec![4.0, 4.0, 4.0],
        gamma0: 100.0,
        gains: LearnerGains {
            kc1: 0.1,
            kc2: 1.0,
            ka1: 100.0,
            ka2: 0.0,
            beta: 0.1,
        },
        samples: SampleRegion {
            lower: vec![-1.0, -1.0],
            upper: vec![1.0, 1.0],
            resolution: 5,
        },
        actor_bound: None,
        penalty_weight: 0.0,
        pe_threshold: 0.0,
    });
    cfg
}
