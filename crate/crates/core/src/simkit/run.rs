//! Closed-loop simulation of a scenario.

use std::sync::Arc;

use crate::barrier::{build_chain, BarrierFunction, ConstraintSpec, FeasibilityReport, SafetyFunction};
use crate::dynamics::{eval_fault, FaultSignal, SystemModel};
use crate::error::{invalid, Error, Result};
use crate::learner::{condition_block, Basis, Learner, LearnerState, Scratch, StateCost};
use crate::observer::FaultObserver;
use crate::safeguard::{
    gain_rate, kkt_rows, manipulate, project_halfspaces, qp_rows, safety_gradient, CostWeights, GainState,
};
use crate::{Matrix, Vector};

use super::config::{ControllerMode, NominalConfig, ScenarioConfig, TimeGrid};
use super::metrics::{oscillation_count, ConstraintMetrics, MetricReport};
use super::trajectory::Trajectory;
use super::Rk4;

const SETTLE_RADIUS: f64 = 0.05;
const NEAR_BOUNDARY_FRACTION: f64 = 0.1;
const PENALTY_FLOOR: f64 = 1e-3;

/// A validated scenario, ready to simulate.
#[derive(Clone, Debug)]
pub struct Scenario {
    config: ScenarioConfig,
    system: SystemModel,
    weights: CostWeights,
    barriers: Vec<BarrierFunction>,
    gains0: GainState,
    observer: Option<FaultObserver>,
    learner: Option<(Learner, LearnerState)>,
    fault: FaultSignal,
    grid: TimeGrid,
    x0: Vector,
}

/// Trajectory and metrics of a run, plus the error that cut it short, if any.
#[derive(Debug)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub report: MetricReport,
    pub failure: Option<Error>,
}

/// Offsets of each block in the augmented state.
#[derive(Clone, Copy, Debug)]
struct Layout {
    n: usize,
    p: usize,
    z: Option<usize>,
    learner: Option<(usize, usize)>,
    gains: usize,
    len: usize,
}

struct Control {
    u: Vector,
    complementarity: Option<f64>,
    qp_infeasible: bool,
}

/// Extra stage cost `w sum_j (1/psi_j - 1/psi_j(0))^2`, with `psi_j` floored at a small fraction of `psi_j(0)`.
fn barrier_penalty(barriers: &[BarrierFunction], weight: f64) -> Result<StateCost> {
    let mut parts = Vec::new();
    for bf in barriers {
        let psi0 = bf.psi_at_origin();
        if !(psi0 > 0.0) {
            return Err(invalid(
                "penalty_weight",
                format!("`{}`: the barrier penalty needs the origin strictly inside", bf.label()),
            ));
        }
        parts.push((bf.chain().clone(), psi0));
    }
    Ok(Arc::new(move |x: &Vector| {
        let total: f64 = parts
            .iter()
            .map(|(chain, psi0)| {
                let psi = chain.top(x).value.max(PENALTY_FLOOR * psi0);
                let gap = 1.0 / psi - 1.0 / psi0;
                gap * gap
            })
            .sum();
        weight * total
    }))
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        let system = config.system.build()?;
        let (n, p) = (system.state_dim(), system.input_dim());
        if config.x0.len() != n {
            return Err(Error::Dimension(format!("x0 has {} entries, state has {n}", config.x0.len())));
        }
        let x0 = Vector::from_column_slice(&config.x0);
        let weights = config.cost.build(&system)?;
        let grid = config.time_grid()?;
        config.safeguard.validate()?;

        let mut barriers = Vec::with_capacity(config.constraints.len());
        for (k, c) in config.constraints.iter().enumerate() {
            if config.constraints[..k].iter().any(|other| other.label == c.label) {
                return Err(invalid("constraints", format!("duplicate label `{}`", c.label)));
            }
            let safety = SafetyFunction::quadratic(c.shape.to_quadratic(n)?);
            let spec = ConstraintSpec::new(c.label.clone(), safety, c.relative_degree, c.alphas())?;
            barriers.push(BarrierFunction::new(build_chain(spec, &system)?, c.form)?);
        }
        let gains0 = GainState::new(
            config.constraints.iter().map(|c| c.ks0).collect(),
            config.constraints.iter().map(|c| c.adaptive).collect(),
            &config.safeguard,
        )?;

        let observer = if config.observer.enabled {
            let rows = &config.observer.gain;
            if rows.len() != p || rows.iter().any(|r| r.len() != n) {
                return Err(Error::Dimension(format!("observer gain must be {p}x{n}")));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            Some(FaultObserver::new(Matrix::from_row_slice(p, n, &flat), &system)?)
        } else {
            None
        };

        let learner = match (&config.learner, config.mode.uses_learner()) {
            (Some(lc), true) => {
                let basis = Basis::quadratic(n, lc.order);
                let s = basis.len();
                if lc.critic0.len() != s || lc.actor0.len() != s {
                    return Err(Error::Dimension(format!("basis has {s} features; critic0 and actor0 must match")));
                }
                if !(lc.gamma0 > 0.0) {
                    return Err(invalid("gamma0", "must be positive"));
                }
                let penalty = if lc.penalty_weight > 0.0 {
                    Some(barrier_penalty(&barriers, lc.penalty_weight)?)
                } else {
                    None
                };
                let state = LearnerState::new(
                    Vector::from_column_slice(&lc.critic0),
                    Vector::from_column_slice(&lc.actor0),
                    Matrix::identity(s, s) * lc.gamma0,
                    lc.actor_bound,
                )?;
                let learner =
                    Learner::new(basis, system.clone(), weights.clone(), lc.gains.clone(), lc.samples.grid()?, penalty)?;
                Some((learner, state))
            }
            (None, true) => return Err(invalid("learner", format!("mode `{}` needs a learner section", config.mode))),
            (_, false) => None,
        };

        if config.mode == ControllerMode::Handcrafted {
            match &config.nominal {
                None => return Err(invalid("nominal", "handcrafted mode needs a nominal law")),
                Some(NominalConfig::PdTracking { targets, .. }) => {
                    if n != 2 * p || targets.len() != p {
                        return Err(Error::Dimension(format!(
                            "pd-tracking needs a double integrator and one target per input ({p})"
                        )));
                    }
                }
                Some(NominalConfig::Zero) => {}
            }
        }

        let fault = config.fault.to_signal(p)?;
        let scenario = Self {
            config,
            system,
            weights,
            barriers,
            gains0,
            observer,
            learner,
            fault,
            grid,
            x0,
        };
        if scenario.config.mode.needs_feasible_start() {
            let reports = scenario.feasibility();
            if reports.iter().any(|r| !r.feasible()) {
                let text = reports.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
                return Err(Error::Infeasible(text));
            }
        }
        Ok(scenario)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn system(&self) -> &SystemModel {
        &self.system
    }

    pub fn barriers(&self) -> &[BarrierFunction] {
        &self.barriers
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn learner(&self) -> Option<&Learner> {
        self.learner.as_ref().map(|(l, _)| l)
    }

    /// Chain values of every constraint at `x0`.
    pub fn feasibility(&self) -> Vec<FeasibilityReport> {
        self.barriers.iter().map(|bf| bf.chain().initial_feasibility(&self.x0)).collect()
    }

    fn layout(&self) -> Layout {
        let (n, p) = (self.system.state_dim(), self.system.input_dim());
        let mut len = n;
        let z = self.observer.as_ref().map(|_| {
            len += p;
            len - p
        });
        let learner = self.learner.as_ref().map(|(l, _)| {
            let s = l.basis().len();
            let start = len;
            len += LearnerState::block_len(s);
            (start, s)
        });
        let gains = len;
        len += self.barriers.len();
        Layout {
            n,
            p,
            z,
            learner,
            gains,
            len,
        }
    }

    fn nominal(&self, t: f64, x: &Vector) -> Vector {
        let p = self.system.input_dim();
        match &self.config.nominal {
            Some(NominalConfig::PdTracking { kp, kv, targets }) => {
                Vector::from_fn(p, |j, _| kp * (targets[j].at(t) - x[j]) - kv * x[p + j])
            }
            _ => Vector::zeros(p),
        }
    }

    fn control(&self, t: f64, y: &[f64], layout: &Layout, active: &[bool]) -> Result<Control> {
        let x = Vector::from_column_slice(&y[..layout.n]);
        let ufhat = match (&self.observer, layout.z) {
            (Some(obs), Some(zs)) => obs.estimate(&Vector::from_column_slice(&y[zs..zs + layout.p]), &x),
            _ => Vector::zeros(layout.p),
        };
        let kstar = match (&self.learner, layout.learner) {
            (Some((learner, _)), Some((start, s))) => {
                learner.policy(&x, &y[start..start + LearnerState::block_len(s)])
            }
            _ => self.nominal(t, &x),
        };
        let gains = &y[layout.gains..layout.gains + self.barriers.len()];
        let mut out = Control {
            u: kstar.clone(),
            complementarity: None,
            qp_infeasible: false,
        };
        match self.config.mode {
            ControllerMode::ClassicalRl => out.u -= &ufhat,
            ControllerMode::FixedSafeguard | ControllerMode::AdaptiveSafeguard | ControllerMode::Handcrafted => {
                // g' grad V = -2 R k* for a policy of the form -1/2 R^-1 g' grad V
                let perf = self.weights.r() * &kstar * -2.0;
                for ((bf, &k), _) in self.barriers.iter().zip(gains).zip(active).filter(|(_, &on)| on) {
                    if k == 0.0 {
                        continue;
                    }
                    let grad = safety_gradient(bf, &x)?;
                    out.u += manipulate(&perf, &grad.lg_barrier(), k, &self.weights, self.config.safeguard.mu);
                }
                out.u -= &ufhat;
            }
            ControllerMode::KktExact => {
                let (uf, _) = eval_fault(&self.fault, t)?;
                let live: Vec<BarrierFunction> =
                    self.barriers.iter().zip(active).filter(|(_, &on)| on).map(|(b, _)| b.clone()).collect();
                let gamma3: Vec<f64> = self
                    .config
                    .constraints
                    .iter()
                    .zip(active)
                    .filter(|(_, &on)| on)
                    .map(|(c, _)| c.gamma3)
                    .collect();
                let rows = kkt_rows(&x, &live, &uf, &gamma3)?;
                let projection = project_halfspaces(&kstar, &rows, &self.weights);
                out.complementarity = Some(projection.complementarity(&rows));
                out.qp_infeasible = !projection.feasible;
                out.u = projection.u - &ufhat;
            }
            ControllerMode::QpFilter => {
                let chains: Vec<_> = self.barriers.iter().map(|b| b.chain()).collect();
                let gamma3: Vec<f64> = self.config.constraints.iter().map(|c| c.gamma3).collect();
                let rows = qp_rows(&x, &chains, &gamma3);
                let projection = project_halfspaces(&(&kstar - &ufhat), &rows, &self.weights);
                out.qp_infeasible = !projection.feasible;
                out.u = projection.u;
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn field(
        &self,
        t: f64,
        y: &[f64],
        dy: &mut [f64],
        u: &Vector,
        layout: &Layout,
        active: &[bool],
        scratch: &mut Scratch,
    ) -> Result<()> {
        let x = Vector::from_column_slice(&y[..layout.n]);
        let (uf, _) = eval_fault(&self.fault, t)?;
        let dx = self.system.dynamics(&x, &(u + &uf));
        dy[..layout.n].copy_from_slice(dx.as_slice());
        if let (Some(obs), Some(zs)) = (&self.observer, layout.z) {
            let z = Vector::from_column_slice(&y[zs..zs + layout.p]);
            dy[zs..zs + layout.p].copy_from_slice(obs.derivative(&z, &x, u, &self.system).as_slice());
        }
        let mut kstar = None;
        if let (Some((learner, _)), Some((start, s))) = (&self.learner, layout.learner) {
            let end = start + LearnerState::block_len(s);
            learner.rate(&x, u, &y[start..end], &mut dy[start..end], scratch);
            if self.config.mode == ControllerMode::AdaptiveSafeguard {
                kstar = Some(learner.policy(&x, &y[start..end]));
            }
        }
        let stage = kstar.map(|k| self.weights.stage_cost(&x, &k));
        for (j, bf) in self.barriers.iter().enumerate() {
            let idx = layout.gains + j;
            dy[idx] = match stage {
                Some(cost) if self.gains0.adaptive[j] && active[j] => {
                    gain_rate(y[idx], bf.chain().h(&x), cost, &self.config.safeguard)
                }
                _ => 0.0,
            };
        }
        Ok(())
    }

    fn columns(&self, layout: &Layout) -> Vec<String> {
        let mut cols = vec!["t".to_string()];
        cols.extend((0..layout.n).map(|i| format!("x{i}")));
        cols.extend((0..layout.p).map(|j| format!("u{j}")));
        for bf in &self.barriers {
            cols.extend((0..bf.chain().relative_degree()).map(|level| format!("psi_{}_{level}", bf.label())));
        }
        cols.extend(self.barriers.iter().map(|bf| format!("Ks_{}", bf.label())));
        cols.push("J".into());
        cols.extend((0..layout.p).map(|j| format!("uf{j}")));
        cols.extend((0..layout.p).map(|j| format!("ufhat{j}")));
        if let Some((_, s)) = layout.learner {
            cols.extend((0..s).map(|k| format!("wc{k}")));
            cols.extend((0..s).map(|k| format!("wa{k}")));
        }
        cols
    }

    #[allow(clippy::too_many_arguments)]
    fn row(&self, t: f64, y: &[f64], u: &Vector, psi: &[Vec<f64>], cost: f64, layout: &Layout) -> Result<Vec<f64>> {
        let mut row = Vec::with_capacity(64);
        row.push(t);
        row.extend_from_slice(&y[..layout.n]);
        row.extend(u.iter());
        for levels in psi {
            row.extend_from_slice(levels);
        }
        row.extend_from_slice(&y[layout.gains..layout.gains + self.barriers.len()]);
        row.push(cost);
        let (uf, _) = eval_fault(&self.fault, t)?;
        row.extend(uf.iter());
        row.extend(self.estimate(y, layout).iter());
        if let Some((start, s)) = layout.learner {
            row.extend_from_slice(&y[start..start + 2 * s]);
        }
        Ok(row)
    }

    fn estimate(&self, y: &[f64], layout: &Layout) -> Vector {
        match (&self.observer, layout.z) {
            (Some(obs), Some(zs)) => obs.estimate(
                &Vector::from_column_slice(&y[zs..zs + layout.p]),
                &Vector::from_column_slice(&y[..layout.n]),
            ),
            _ => Vector::zeros(layout.p),
        }
    }

    /// Simulates the whole horizon. Errors during the run end it early and are returned in the outcome.
    pub fn run(&self) -> RunOutcome {
        let layout = self.layout();
        let grid = self.grid;
        let nc = self.barriers.len();
        let mut y = vec![0.0; layout.len];
        y[..layout.n].copy_from_slice(self.x0.as_slice());
        if let (Some(obs), Some(zs)) = (&self.observer, layout.z) {
            y[zs..zs + layout.p].copy_from_slice(obs.initial_state(&self.x0).as_slice());
        }
        let mut wa_bound = None;
        let mut gamma0_max = None;
        let mut pe = None;
        if let (Some((learner, state)), Some((start, s))) = (&self.learner, layout.learner) {
            state.write_block(&mut y[start..start + LearnerState::block_len(s)]);
            wa_bound = Some(state.wa_bound);
            gamma0_max = Some(state.gamma.clone().symmetric_eigenvalues().max());
            let min = learner.pe_min_eigenvalue(&y[start..start + LearnerState::block_len(s)]);
            let threshold = self.config.learner.as_ref().map_or(0.0, |l| l.pe_threshold);
            pe = Some((min, min > 0.0 && min >= threshold));
        }
        y[layout.gains..layout.gains + nc].copy_from_slice(&self.gains0.gains);

        let mut trajectory = Trajectory::new(self.columns(&layout));
        let mut active = vec![true; nc];
        let psi0_start: Vec<f64> = self.barriers.iter().map(|b| b.chain().h(&self.x0)).collect();
        let mut cmetrics: Vec<ConstraintMetrics> = self
            .barriers
            .iter()
            .map(|b| ConstraintMetrics {
                label: b.label().to_string(),
                min_psi: vec![f64::INFINITY; b.chain().relative_degree()],
                first_violation_time: None,
                breach_time: None,
            })
            .collect();
        let mut state_min = vec![f64::INFINITY; layout.n];
        let mut state_max = vec![f64::NEG_INFINITY; layout.n];
        let mut gain_max = vec![0.0f64; nc];
        let mut gamma_eigs: Option<(f64, f64)> = None;
        let mut actor_norm_max: Option<f64> = None;
        let mut control_times = Vec::new();
        let mut control_inputs: Vec<Vec<f64>> = Vec::new();
        let mut control_near = Vec::new();
        let mut complementarity: Option<f64> = None;
        let mut qp_infeasible_steps = 0;
        let mut observer_bad = 0;
        let mut g_bound_failures = 0;
        let mut cost = 0.0;
        let mut last_outside: Option<f64> = None;
        let mut failure = None;

        let mut rk = Rk4::new(layout.len);
        let mut scratch = Scratch::default();
        let mut u = Vector::zeros(layout.p);
        let mut t = 0.0;
        let mut steps_done = 0;

        // observe the state at step k: safety monitor, extrema, learner health
        let mut observe = |t: f64,
                           y: &mut [f64],
                           active: &mut [bool],
                           cmetrics: &mut [ConstraintMetrics],
                           track_gamma: bool|
         -> Vec<Vec<f64>> {
            let x = Vector::from_column_slice(&y[..layout.n]);
            let psi: Vec<Vec<f64>> = self.barriers.iter().map(|b| b.chain().values(&x)).collect();
            for (j, levels) in psi.iter().enumerate() {
                let m = &mut cmetrics[j];
                for (lo, &v) in m.min_psi.iter_mut().zip(levels) {
                    *lo = lo.min(v);
                }
                if levels[0] <= 0.0 && m.first_violation_time.is_none() {
                    m.first_violation_time = Some(t);
                }
                if levels.iter().any(|&v| !(v > 0.0)) && active[j] {
                    active[j] = false;
                    m.breach_time.get_or_insert(t);
                }
            }
            for i in 0..layout.n {
                state_min[i] = state_min[i].min(y[i]);
                state_max[i] = state_max[i].max(y[i]);
            }
            if x.norm() >= SETTLE_RADIUS {
                last_outside = Some(t);
            }
            for j in 0..nc {
                gain_max[j] = gain_max[j].max(y[layout.gains + j]);
            }
            if let Some((start, s)) = layout.learner {
                let wa_norm = y[start + s..start + 2 * s].iter().map(|w| w * w).sum::<f64>().sqrt();
                actor_norm_max = Some(actor_norm_max.map_or(wa_norm, |m: f64| m.max(wa_norm)));
                if track_gamma {
                    let gamma = Matrix::from_row_slice(s, s, &y[start + 2 * s..start + 2 * s + s * s]);
                    let eig = gamma.symmetric_eigenvalues();
                    let (lo, hi) = (eig.min(), eig.max());
                    gamma_eigs = Some(gamma_eigs.map_or((lo, hi), |(a, b)| (a.min(lo), b.max(hi))));
                }
            }
            psi
        };

        let mut psi = observe(0.0, &mut y, &mut active, &mut cmetrics, true);
        let stage = |y: &[f64], u: &Vector| self.weights.stage_cost(&Vector::from_column_slice(&y[..layout.n]), u);

        for k in 0..grid.steps {
            if k % grid.substeps == 0 {
                match self.control(t, &y, &layout, &active) {
                    Ok(c) => {
                        u = c.u;
                        if let Some(res) = c.complementarity {
                            complementarity = Some(complementarity.map_or(res, |m: f64| m.max(res)));
                        }
                        qp_infeasible_steps += usize::from(c.qp_infeasible);
                    }
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
                let x = Vector::from_column_slice(&y[..layout.n]);
                if let Some(obs) = &self.observer {
                    observer_bad += usize::from(!obs.is_convergent_at(&x, &self.system));
                }
                g_bound_failures += usize::from(!self.system.input_map_in_bounds(&x));
                let near = psi
                    .iter()
                    .zip(&psi0_start)
                    .filter(|(_, &start)| start > 0.0)
                    .any(|(levels, &start)| levels[0] < NEAR_BOUNDARY_FRACTION * start);
                control_times.push(t);
                control_inputs.push(u.iter().copied().collect());
                control_near.push(near);
            }
            if k % self.config.record_stride == 0 {
                match self.row(t, &y, &u, &psi, cost, &layout) {
                    Ok(row) => trajectory.push(row),
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            let stage_before = stage(&y, &u);
            let active_now = active.clone();
            let step = rk.step(
                |tau, state, deriv| self.field(tau, state, deriv, &u, &layout, &active_now, &mut scratch),
                t,
                &mut y,
                grid.dt,
            );
            if let Err(e) = step {
                failure = Some(e);
                break;
            }
            if let Some((start, s)) = layout.learner {
                condition_block(&mut y[start..start + LearnerState::block_len(s)], s, wa_bound.unwrap_or(f64::INFINITY));
            }
            for j in 0..nc {
                let g = &mut y[layout.gains + j];
                *g = g.clamp(0.0, self.config.safeguard.gain_bound);
            }
            cost += 0.5 * grid.dt * (stage_before + stage(&y, &u));
            steps_done = k + 1;
            t = steps_done as f64 * grid.dt;
            let last = steps_done == grid.steps;
            let track_gamma = last || steps_done % self.config.record_stride == 0;
            psi = observe(t, &mut y, &mut active, &mut cmetrics, track_gamma);
            if last {
                match self.row(t, &y, &u, &psi, cost, &layout) {
                    Ok(row) => trajectory.push(row),
                    Err(e) => failure = Some(e),
                }
            }
        }

        let x_final = Vector::from_column_slice(&y[..layout.n]);
        let settling_time = if x_final.norm() < SETTLE_RADIUS && failure.is_none() {
            Some(last_outside.map_or(0.0, |t_out| t_out + grid.dt))
        } else {
            None
        };
        let observer_terminal_error = self.observer.as_ref().and_then(|_| {
            eval_fault(&self.fault, t).ok().map(|(uf, _)| (self.estimate(&y, &layout) - uf).norm())
        });
        let (final_critic, final_actor, pe_start) = match (&self.learner, layout.learner) {
            (Some(_), Some((start, s))) => (
                Some(y[start..start + s].to_vec()),
                Some(y[start + s..start + 2 * s].to_vec()),
                pe,
            ),
            _ => (None, None, None),
        };
        let report = MetricReport {
            scenario: self.config.name.clone(),
            mode: self.config.mode,
            final_time: t,
            steps: steps_done,
            control_updates: control_times.len(),
            total_cost: cost,
            constraints: cmetrics,
            settling_time,
            oscillation_count: oscillation_count(&control_times, &control_inputs, &control_near, 1.0),
            final_state: x_final.iter().copied().collect(),
            state_min,
            state_max,
            final_gains: y[layout.gains..layout.gains + nc].to_vec(),
            gain_max,
            observer_terminal_error,
            observer_not_convergent_steps: observer_bad,
            gamma_min_eig: gamma_eigs.map(|e| e.0),
            gamma_max_eig: gamma_eigs.map(|e| e.1),
            gamma0_max_eig: gamma0_max,
            actor_norm_max,
            actor_bound: wa_bound,
            pe_min_eig: pe_start.map(|p| p.0),
            pe_satisfied: pe_start.map(|p| p.1),
            final_critic,
            final_actor,
            kkt_complementarity_max: complementarity,
            qp_infeasible_steps,
            input_map_bound_failures: g_bound_failures,
            aborted: failure.is_some(),
            failure: failure.as_ref().map(ToString::to_string),
        };
        RunOutcome {
            trajectory,
            report,
            failure,
        }
    }
}

/// Validates the configuration and simulates it.
///
/// Configuration problems and infeasible initial states are errors; problems during the run are
/// reported in [`RunOutcome::failure`] alongside the partial trajectory.
pub fn run_scenario(config: &ScenarioConfig) -> Result<RunOutcome> {
    Ok(Scenario::new(config.clone())?.run())
}
