//! Summary statistics of a run, written as `key=value` lines.

use std::fmt;

use super::config::ControllerMode;

/// Per-constraint safety summary.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintMetrics {
    pub label: String,
    /// Minimum of each chain level over every integration step.
    pub min_psi: Vec<f64>,
    /// First time `psi_0 <= 0`.
    pub first_violation_time: Option<f64>,
    /// First time any chain level was `<= 0`; the barrier is disabled from then on.
    pub breach_time: Option<f64>,
}

impl ConstraintMetrics {
    pub fn violated(&self) -> bool {
        self.first_violation_time.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub scenario: String,
    pub mode: ControllerMode,
    pub final_time: f64,
    pub steps: usize,
    pub control_updates: usize,
    /// Accumulated `x'Qx + u'Ru`.
    pub total_cost: f64,
    pub constraints: Vec<ConstraintMetrics>,
    /// First time `|x|` stayed below 0.05 until the end.
    pub settling_time: Option<f64>,
    pub oscillation_count: usize,
    pub final_state: Vec<f64>,
    pub state_min: Vec<f64>,
    pub state_max: Vec<f64>,
    pub final_gains: Vec<f64>,
    pub gain_max: Vec<f64>,
    pub observer_terminal_error: Option<f64>,
    pub observer_not_convergent_steps: usize,
    pub gamma_min_eig: Option<f64>,
    pub gamma_max_eig: Option<f64>,
    pub gamma0_max_eig: Option<f64>,
    pub actor_norm_max: Option<f64>,
    pub actor_bound: Option<f64>,
    pub pe_min_eig: Option<f64>,
    pub pe_satisfied: Option<bool>,
    pub final_critic: Option<Vec<f64>>,
    pub final_actor: Option<Vec<f64>>,
    pub kkt_complementarity_max: Option<f64>,
    pub qp_infeasible_steps: usize,
    pub input_map_bound_failures: usize,
    pub aborted: bool,
    pub failure: Option<String>,
}

impl MetricReport {
    /// Any state constraint crossed at some integration step.
    pub fn violation(&self) -> bool {
        self.constraints.iter().any(ConstraintMetrics::violated)
    }

    pub fn first_violation_time(&self) -> Option<f64> {
        self.constraints
            .iter()
            .filter_map(|c| c.first_violation_time)
            .min_by(f64::total_cmp)
    }

    /// A violation in a mode that promises safety.
    pub fn safety_regression(&self) -> bool {
        self.mode.is_safeguarded() && self.violation()
    }

    pub fn constraint(&self, label: &str) -> Option<&ConstraintMetrics> {
        self.constraints.iter().find(|c| c.label == label)
    }

    /// Smallest `psi_0` across constraints.
    pub fn min_psi0(&self) -> Option<f64> {
        self.constraints.iter().map(|c| c.min_psi[0]).min_by(f64::total_cmp)
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| kv.push((k.to_string(), v));
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| format!("{x:?}"));
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        put("scenario", self.scenario.clone());
        put("mode", self.mode.to_string());
        put("final_time", format!("{:?}", self.final_time));
        put("steps", self.steps.to_string());
        put("control_updates", self.control_updates.to_string());
        put("total_cost", format!("{:?}", self.total_cost));
        put("violation", self.violation().to_string());
        put("first_violation_time", opt(self.first_violation_time()));
        put("safety_regression", self.safety_regression().to_string());
        for c in &self.constraints {
            for (level, value) in c.min_psi.iter().enumerate() {
                put(&format!("min_psi_{}_{level}", c.label), format!("{value:?}"));
            }
            put(&format!("violation_{}", c.label), c.violated().to_string());
            put(&format!("first_violation_time_{}", c.label), opt(c.first_violation_time));
            put(&format!("breach_time_{}", c.label), opt(c.breach_time));
        }
        put("settling_time", opt(self.settling_time));
        put("oscillation_count", self.oscillation_count.to_string());
        put("final_state", list(&self.final_state));
        put("final_state_norm", format!("{:?}", self.final_state.iter().map(|x| x * x).sum::<f64>().sqrt()));
        put("state_min", list(&self.state_min));
        put("state_max", list(&self.state_max));
        put("final_gains", list(&self.final_gains));
        put("gain_max", list(&self.gain_max));
        put("observer_terminal_error", opt(self.observer_terminal_error));
        put("observer_not_convergent_steps", self.observer_not_convergent_steps.to_string());
        put("gamma_min_eig", opt(self.gamma_min_eig));
        put("gamma_max_eig", opt(self.gamma_max_eig));
        put("gamma0_max_eig", opt(self.gamma0_max_eig));
        put("actor_norm_max", opt(self.actor_norm_max));
        put("actor_bound", opt(self.actor_bound));
        put("pe_min_eig", opt(self.pe_min_eig));
        put("pe_satisfied", self.pe_satisfied.map_or("none".into(), |b| b.to_string()));
        put("final_critic", self.final_critic.as_deref().map_or("none".into(), list));
        put("final_actor", self.final_actor.as_deref().map_or("none".into(), list));
        put("kkt_complementarity_max", opt(self.kkt_complementarity_max));
        put("qp_infeasible_steps", self.qp_infeasible_steps.to_string());
        put("input_map_bound_failures", self.input_map_bound_failures.to_string());
        put("aborted", self.aborted.to_string());
        put("failure", self.failure.clone().unwrap_or_else(|| "none".into()));
        kv
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_key_values() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Largest number of sign changes of the input increments inside any window of length `window`,
/// counting only instants flagged `near`.
///
/// `inputs[k]` is the input applied from `times[k]`. Zero increments are skipped, and a stretch
/// away from the boundary breaks the chain of increments. Multi-input signals take the worst channel.
pub fn oscillation_count(times: &[f64], inputs: &[Vec<f64>], near: &[bool], window: f64) -> usize {
    let channels = inputs.first().map_or(0, Vec::len);
    (0..channels)
        .map(|c| {
            let mut events = Vec::new();
            let mut last_sign = 0.0;
            for k in 1..inputs.len() {
                if !near[k] || !near[k - 1] {
                    last_sign = 0.0;
                    continue;
                }
                let (now, before) = (inputs[k][c], inputs[k - 1][c]);
                let du = now - before;
                if du.abs() <= 1e-9 * (1.0 + now.abs().max(before.abs())) {
                    continue;
                }
                let sign = du.signum();
                if last_sign != 0.0 && sign != last_sign {
                    events.push(times[k]);
                }
                last_sign = sign;
            }
            let mut best = 0;
            let mut start = 0;
            for end in 0..events.len() {
                while events[end] - events[start] >= window {
                    start += 1;
                }
                best = best.max(end + 1 - start);
            }
            best
        })
        .max()
        .unwrap_or(0)
}
