//! Actor-critic learning on a quadratic monomial basis with simulated experience at sampled states.
//!
//! The critic `V(x) = Wc' phi(x)` and actor `K(x) = -1/2 R^-1 g' grad(phi)' Wa` are tuned by continuous
//! laws that are integrated alongside the plant. The slice-based [`Learner::rate`] is the version used
//! by the simulator; the vector-valued free functions are straightforward references for it.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::SystemModel;
use crate::error::{invalid, Error, Result};
use crate::safeguard::CostWeights;
use crate::{Matrix, Vector};

/// Ordering of the degree-two monomials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonomialOrder {
    /// `x1^2, x1 x2, .., x1 xn, x2^2, ..`
    #[default]
    Lexicographic,
    /// All squares first, then the cross terms in lexicographic order.
    SquaresFirst,
}

/// All degree-two monomials `x_i x_j` of the state.
#[derive(Clone, Debug, PartialEq)]
pub struct Basis {
    state_dim: usize,
    pairs: Vec<(usize, usize)>,
}

impl Basis {
    pub fn quadratic(state_dim: usize, order: MonomialOrder) -> Self {
        let mut pairs = Vec::new();
        match order {
            MonomialOrder::Lexicographic => {
                for i in 0..state_dim {
                    for j in i..state_dim {
                        pairs.push((i, j));
                    }
                }
            }
            MonomialOrder::SquaresFirst => {
                pairs.extend((0..state_dim).map(|i| (i, i)));
                for i in 0..state_dim {
                    for j in i + 1..state_dim {
                        pairs.push((i, j));
                    }
                }
            }
        }
        Self { state_dim, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Human-readable monomial names such as `x0*x1`.
    pub fn names(&self) -> Vec<String> {
        self.pairs.iter().map(|(i, j)| format!("x{i}*x{j}")).collect()
    }

    pub fn eval(&self, x: &Vector) -> Vector {
        Vector::from_iterator(self.len(), self.pairs.iter().map(|&(i, j)| x[i] * x[j]))
    }

    /// `d phi / d x`, an `s x n` matrix.
    pub fn jacobian(&self, x: &Vector) -> Matrix {
        let mut out = Matrix::zeros(self.len(), self.state_dim);
        for (k, &(i, j)) in self.pairs.iter().enumerate() {
            out[(k, i)] += x[j];
            out[(k, j)] += x[i];
        }
        out
    }

    /// `grad(phi) * w` as an `s`-vector, written into `out`, without forming the Jacobian.
    fn jacobian_times(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        for (k, &(i, j)) in self.pairs.iter().enumerate() {
            out[k] = x[j] * w[i] + x[i] * w[j];
        }
    }
}

/// The five nonnegative learning gains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerGains {
    pub kc1: f64,
    pub kc2: f64,
    pub ka1: f64,
    pub ka2: f64,
    pub beta: f64,
}

impl Default for LearnerGains {
    fn default() -> Self {
        Self {
            kc1: 0.1,
            kc2: 1.0,
            ka1: 100.0,
            ka2: 1.0,
            beta: 0.1,
        }
    }
}

impl LearnerGains {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("kc1", self.kc1),
            ("kc2", self.kc2),
            ("ka1", self.ka1),
            ("ka2", self.ka2),
            ("beta", self.beta),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(invalid(name, format!("must be non-negative, got {value}")));
            }
        }
        Ok(())
    }
}

/// Critic and actor weights with the critic adaptation gain.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerState {
    pub wc: Vector,
    pub wa: Vector,
    pub gamma: Matrix,
    pub wa_bound: f64,
}

impl LearnerState {
    /// Actor bound defaults to ten times the initial actor norm.
    pub fn new(wc: Vector, wa: Vector, gamma: Matrix, wa_bound: Option<f64>) -> Result<Self> {
        let s = wc.len();
        if wa.len() != s || gamma.shape() != (s, s) {
            return Err(Error::Dimension(format!(
                "learner with {s} critic weights needs {s} actor weights and a {s}x{s} gain"
            )));
        }
        if !(gamma.clone().symmetric_eigenvalues().min() > 0.0) {
            return Err(invalid("gamma0", "must be positive definite"));
        }
        let wa_bound = wa_bound.unwrap_or(10.0 * wa.norm());
        if !(wa_bound > 0.0) || wa.norm() > wa_bound {
            return Err(invalid("wa_bound", format!("must be positive and at least |Wa(0)|, got {wa_bound}")));
        }
        Ok(Self {
            wc,
            wa,
            gamma,
            wa_bound,
        })
    }

    /// Number of scalars in the flattened `(Wc, Wa, Gamma)` block.
    pub fn block_len(s: usize) -> usize {
        2 * s + s * s
    }

    pub fn write_block(&self, out: &mut [f64]) {
        let s = self.wc.len();
        out[..s].copy_from_slice(self.wc.as_slice());
        out[s..2 * s].copy_from_slice(self.wa.as_slice());
        for i in 0..s {
            for j in 0..s {
                out[2 * s + i * s + j] = self.gamma[(i, j)];
            }
        }
    }

    pub fn from_block(block: &[f64], s: usize, wa_bound: f64) -> Self {
        Self {
            wc: Vector::from_column_slice(&block[..s]),
            wa: Vector::from_column_slice(&block[s..2 * s]),
            gamma: Matrix::from_row_slice(s, s, &block[2 * s..2 * s + s * s]),
            wa_bound,
        }
    }
}

/// Symmetrizes `Gamma` and radially projects `Wa` in a flattened block.
pub fn condition_block(block: &mut [f64], s: usize, wa_bound: f64) {
    let wa = &mut block[s..2 * s];
    let norm = wa.iter().map(|w| w * w).sum::<f64>().sqrt();
    if norm > wa_bound {
        let scale = wa_bound / norm;
        wa.iter_mut().for_each(|w| *w *= scale);
    }
    let gamma = &mut block[2 * s..2 * s + s * s];
    for i in 0..s {
        for j in i + 1..s {
            let mean = 0.5 * (gamma[i * s + j] + gamma[j * s + i]);
            gamma[i * s + j] = mean;
            gamma[j * s + i] = mean;
        }
    }
}

/// Axis-aligned operating box sampled on a uniform grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Grid points per axis.
    pub resolution: usize,
}

impl SampleRegion {
    pub fn grid(&self) -> Result<Vec<Vector>> {
        let n = self.lower.len();
        if n == 0 || self.upper.len() != n {
            return Err(invalid("samples", "lower and upper must have the state dimension"));
        }
        if self.resolution == 0 {
            return Err(invalid("samples.resolution", "must be positive"));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u)) {
            return Err(invalid("samples", "lower must not exceed upper"));
        }
        let r = self.resolution;
        let axis = |k: usize, idx: usize| {
            if r == 1 {
                0.5 * (self.lower[k] + self.upper[k])
            } else {
                self.lower[k] + (self.upper[k] - self.lower[k]) * idx as f64 / (r - 1) as f64
            }
        };
        let total = r.pow(n as u32);
        Ok((0..total)
            .map(|mut code| {
                Vector::from_fn(n, |k, _| {
                    let idx = code % r;
                    code /= r;
                    axis(k, idx)
                })
            })
            .collect())
    }
}

/// Extra state-dependent stage cost, e.g. a barrier penalty.
pub type StateCost = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;

/// Sampled states with the model quantities the learning laws need at each.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub points: Vec<Vector>,
    /// `grad(phi)(x_i) f(x_i)`, `s` entries per point.
    drift_terms: Vec<f64>,
    /// `grad(phi)(x_i) g(x_i)`, row-major `s x p` per point.
    input_terms: Vec<f64>,
    /// `x_i' Q x_i` plus any extra state cost.
    state_costs: Vec<f64>,
}

impl SampleSet {
    pub fn new(
        points: Vec<Vector>,
        basis: &Basis,
        system: &SystemModel,
        weights: &CostWeights,
        extra_cost: Option<&StateCost>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("samples", "need at least one sample point"));
        }
        let (s, p) = (basis.len(), system.input_dim());
        let mut drift_terms = Vec::with_capacity(points.len() * s);
        let mut input_terms = Vec::with_capacity(points.len() * s * p);
        let mut state_costs = Vec::with_capacity(points.len());
        for x in &points {
            if x.len() != system.state_dim() {
                return Err(Error::Dimension("sample point has the wrong dimension".into()));
            }
            let jac = basis.jacobian(x);
            drift_terms.extend((&jac * system.drift(x)).iter());
            let m = &jac * system.input_map(x);
            for i in 0..s {
                for j in 0..p {
                    input_terms.push(m[(i, j)]);
                }
            }
            let extra = extra_cost.map_or(0.0, |c| c(x));
            state_costs.push(x.dot(&(weights.q() * x)) + extra);
        }
        Ok(Self {
            points,
            drift_terms,
            input_terms,
            state_costs,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `V = Wc' phi(x)`.
pub fn value_eval(state: &LearnerState, basis: &Basis, x: &Vector) -> f64 {
    state.wc.dot(&basis.eval(x))
}

/// `K(x) = -1/2 R^-1 g' grad(phi)' Wa`.
pub fn policy_eval(state: &LearnerState, basis: &Basis, x: &Vector, system: &SystemModel, weights: &CostWeights) -> Vector {
    actor_policy(&state.wa, basis, x, system, weights)
}

pub fn actor_policy(wa: &Vector, basis: &Basis, x: &Vector, system: &SystemModel, weights: &CostWeights) -> Vector {
    let grad_v = basis.jacobian(x).transpose() * wa;
    weights.r_inv() * (system.input_map(x).transpose() * grad_v) * -0.5
}

/// `Wc' grad(phi)(f + g u) + x'Qx + u'Ru`.
pub fn bellman_error(
    state: &LearnerState,
    basis: &Basis,
    x: &Vector,
    u: &Vector,
    weights: &CostWeights,
    system: &SystemModel,
) -> f64 {
    let regressor = basis.jacobian(x) * system.dynamics(x, u);
    state.wc.dot(&regressor) + weights.stage_cost(x, u)
}

/// Bellman errors at the sample points under the actor policy.
pub fn sampled_bellman_errors(
    state: &LearnerState,
    basis: &Basis,
    samples: &SampleSet,
    weights: &CostWeights,
    system: &SystemModel,
) -> Vec<f64> {
    samples
        .points
        .iter()
        .map(|x| {
            let u = policy_eval(state, basis, x, system, weights);
            bellman_error(state, basis, x, &u, weights, system)
        })
        .collect()
}

/// Normalized regressor `phi_vec / (1 + |phi_vec|^2)^2` and the normalizer itself.
pub fn normalized(regressor: &Vector) -> (Vector, f64) {
    let norm = 1.0 + regressor.norm_squared();
    (regressor / (norm * norm), norm)
}

/// Reference evaluation of `(Wc', Gamma', Wa')` at state `x` under behavior input `u`.
pub fn learning_derivatives(
    state: &LearnerState,
    basis: &Basis,
    x: &Vector,
    u: &Vector,
    samples: &SampleSet,
    weights: &CostWeights,
    system: &SystemModel,
    gains: &LearnerGains,
) -> (Vector, Matrix, Vector) {
    let s = basis.len();
    let n_samples = samples.len() as f64;
    let g_phi = |x: &Vector| {
        let m = basis.jacobian(x) * system.input_map(x);
        &m * weights.r_inv() * m.transpose()
    };
    let mut critic_sum = Vector::zeros(s);
    let mut lambda = Matrix::zeros(s, s);
    let mut actor_sum = Vector::zeros(s);
    let mut add = |x: &Vector, u: &Vector, coeff: f64| {
        let regressor = basis.jacobian(x) * system.dynamics(x, u);
        let delta = state.wc.dot(&regressor) + weights.stage_cost(x, u);
        let rho = 1.0 + regressor.norm_squared();
        critic_sum += &regressor * (coeff * delta / (rho * rho));
        lambda += &regressor * regressor.transpose() * (coeff / (rho * rho));
        actor_sum += g_phi(x) * &state.wa * (coeff / (4.0 * rho * rho) * regressor.dot(&state.wc));
    };
    add(x, u, gains.kc1);
    for xi in &samples.points {
        let ui = policy_eval(state, basis, xi, system, weights);
        add(xi, &ui, gains.kc2 / n_samples);
    }
    let wc_dot = -(&state.gamma * critic_sum);
    let gamma_dot = &state.gamma * gains.beta - &state.gamma * lambda * &state.gamma;
    let wa_dot = -(&state.wa - &state.wc) * gains.ka1 - &state.wa * gains.ka2 + actor_sum;
    (wc_dot, gamma_dot, wa_dot)
}

/// `(Wc', Gamma')`.
pub fn critic_derivatives(
    state: &LearnerState,
    basis: &Basis,
    x: &Vector,
    u: &Vector,
    samples: &SampleSet,
    weights: &CostWeights,
    system: &SystemModel,
    gains: &LearnerGains,
) -> (Vector, Matrix) {
    let (wc, gamma, _) = learning_derivatives(state, basis, x, u, samples, weights, system, gains);
    (wc, gamma)
}

/// `Wa'` before projection.
pub fn actor_derivative(
    state: &LearnerState,
    basis: &Basis,
    x: &Vector,
    u: &Vector,
    samples: &SampleSet,
    weights: &CostWeights,
    system: &SystemModel,
    gains: &LearnerGains,
) -> Vector {
    learning_derivatives(state, basis, x, u, samples, weights, system, gains).2
}

/// Smallest eigenvalue of the averaged normalized outer products at the samples.
pub fn pe_min_eigenvalue(state: &LearnerState, basis: &Basis, samples: &SampleSet, weights: &CostWeights, system: &SystemModel) -> f64 {
    let s = basis.len();
    let mut lambda = Matrix::zeros(s, s);
    for xi in &samples.points {
        let ui = policy_eval(state, basis, xi, system, weights);
        let regressor = basis.jacobian(xi) * system.dynamics(xi, &ui);
        let rho = 1.0 + regressor.norm_squared();
        lambda += &regressor * regressor.transpose() / (rho * rho);
    }
    (lambda / samples.len() as f64).symmetric_eigenvalues().min()
}

/// `(min eigenvalue, min eigenvalue >= threshold)`.
pub fn pe_condition(
    state: &LearnerState,
    basis: &Basis,
    samples: &SampleSet,
    weights: &CostWeights,
    system: &SystemModel,
    threshold: f64,
) -> (f64, bool) {
    let min = pe_min_eigenvalue(state, basis, samples, weights, system);
    (min, min >= threshold)
}

/// Basis, model, samples and gains bundled for allocation-light evaluation inside the integrator.
#[derive(Clone)]
pub struct Learner {
    basis: Basis,
    system: SystemModel,
    weights: CostWeights,
    gains: LearnerGains,
    samples: SampleSet,
    extra_cost: Option<StateCost>,
    r: Vec<f64>,
    r_inv: Vec<f64>,
}

impl fmt::Debug for Learner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Learner")
            .field("basis", &self.basis)
            .field("gains", &self.gains)
            .field("samples", &self.samples.len())
            .field("extra_cost", &self.extra_cost.is_some())
            .finish()
    }
}

/// Reusable buffers for [`Learner::rate`].
#[derive(Clone, Debug, Default)]
pub struct Scratch {
    critic: Vec<f64>,
    lambda: Vec<f64>,
    actor: Vec<f64>,
    regressor: Vec<f64>,
    g_wa: Vec<f64>,
    m_row: Vec<f64>,
    tmp: Vec<f64>,
    u: Vec<f64>,
    z: Vec<f64>,
}

fn row_major(m: &Matrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    (0..rows * cols).map(|k| m[(k / cols, k % cols)]).collect()
}

impl Learner {
    pub fn new(
        basis: Basis,
        system: SystemModel,
        weights: CostWeights,
        gains: LearnerGains,
        points: Vec<Vector>,
        extra_cost: Option<StateCost>,
    ) -> Result<Self> {
        gains.validate()?;
        if basis.state_dim() != system.state_dim() {
            return Err(Error::Dimension("basis and plant disagree on the state dimension".into()));
        }
        let origin = Vector::zeros(system.state_dim());
        if basis.eval(&origin).norm() != 0.0 || basis.jacobian(&origin).norm() != 0.0 {
            return Err(invalid("basis", "features and their gradients must vanish at the origin"));
        }
        weights.check_dims(&system)?;
        let samples = SampleSet::new(points, &basis, &system, &weights, extra_cost.as_ref())?;
        let r = row_major(weights.r());
        let r_inv = row_major(weights.r_inv());
        Ok(Self {
            basis,
            system,
            weights,
            gains,
            samples,
            extra_cost,
            r,
            r_inv,
        })
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn samples(&self) -> &SampleSet {
        &self.samples
    }

    pub fn gains(&self) -> &LearnerGains {
        &self.gains
    }

    pub fn weights(&self) -> &CostWeights {
        &self.weights
    }

    pub fn system(&self) -> &SystemModel {
        &self.system
    }

    pub fn extra_cost(&self, x: &Vector) -> f64 {
        self.extra_cost.as_ref().map_or(0.0, |c| c(x))
    }

    /// Actor policy at `x` from a flattened block.
    pub fn policy(&self, x: &Vector, block: &[f64]) -> Vector {
        let s = self.basis.len();
        let wa = Vector::from_column_slice(&block[s..2 * s]);
        actor_policy(&wa, &self.basis, x, &self.system, &self.weights)
    }

    /// Critic value at `x` from a flattened block.
    pub fn value(&self, x: &Vector, block: &[f64]) -> f64 {
        let s = self.basis.len();
        Vector::from_column_slice(&block[..s]).dot(&self.basis.eval(x))
    }

    /// Gradient of the critic at `x` from a flattened block.
    pub fn value_gradient(&self, x: &Vector, block: &[f64]) -> Vector {
        let s = self.basis.len();
        self.basis.jacobian(x).transpose() * Vector::from_column_slice(&block[..s])
    }

    pub fn pe_min_eigenvalue(&self, block: &[f64]) -> f64 {
        let state = LearnerState::from_block(block, self.basis.len(), f64::INFINITY);
        pe_min_eigenvalue(&state, &self.basis, &self.samples, &self.weights, &self.system)
    }

    /// Adds one Bellman-error contribution with weight `coeff`.
    ///
    /// `drift` is `grad(phi) f` (s), `input` is `grad(phi) g` row-major (s x p), and `u` is the input
    /// applied, or `None` to use the actor policy.
    #[allow(clippy::too_many_arguments)]
    fn accumulate(
        &self,
        drift: &[f64],
        input: &[f64],
        state_cost: f64,
        u: Option<&[f64]>,
        coeff: f64,
        wc: &[f64],
        wa: &[f64],
        scratch: &mut Scratch,
    ) {
        let s = self.basis.len();
        let p = self.system.input_dim();
        let Scratch {
            critic,
            lambda,
            actor,
            regressor,
            g_wa,
            tmp,
            u: u_buf,
            z,
            ..
        } = scratch;
        // z = R^-1 M' Wa, so G Wa = M z and the actor input is -z/2
        for (j, zj) in tmp.iter_mut().enumerate().take(p) {
            *zj = (0..s).map(|i| input[i * p + j] * wa[i]).sum();
        }
        for (j, zj) in z.iter_mut().enumerate().take(p) {
            *zj = (0..p).map(|k| self.r_inv[j * p + k] * tmp[k]).sum();
        }
        for i in 0..s {
            g_wa[i] = (0..p).map(|j| input[i * p + j] * z[j]).sum();
        }
        match u {
            Some(u) => u_buf[..p].copy_from_slice(u),
            None => {
                for j in 0..p {
                    u_buf[j] = -0.5 * z[j];
                }
            }
        }
        let mut input_cost = 0.0;
        for j in 0..p {
            for k in 0..p {
                input_cost += u_buf[j] * self.r[j * p + k] * u_buf[k];
            }
        }
        let mut norm_sq = 0.0;
        let mut critic_dot = 0.0;
        for i in 0..s {
            let mut value = drift[i];
            for j in 0..p {
                value += input[i * p + j] * u_buf[j];
            }
            regressor[i] = value;
            norm_sq += value * value;
            critic_dot += wc[i] * value;
        }
        let delta = critic_dot + state_cost + input_cost;
        let rho = 1.0 + norm_sq;
        let weight = coeff / (rho * rho);
        for i in 0..s {
            critic[i] += weight * delta * regressor[i];
            let ri = weight * regressor[i];
            for j in 0..s {
                lambda[i * s + j] += ri * regressor[j];
            }
            actor[i] += 0.25 * weight * critic_dot * g_wa[i];
        }
    }

    /// Derivative of the flattened `(Wc, Wa, Gamma)` block at plant state `x` under input `u`.
    pub fn rate(&self, x: &Vector, u: &Vector, block: &[f64], out: &mut [f64], scratch: &mut Scratch) {
        let s = self.basis.len();
        let p = self.system.input_dim();
        let n = self.system.state_dim();
        for buf in [
            &mut scratch.critic,
            &mut scratch.actor,
            &mut scratch.regressor,
            &mut scratch.g_wa,
        ] {
            buf.clear();
            buf.resize(s, 0.0);
        }
        scratch.lambda.clear();
        scratch.lambda.resize(s * s, 0.0);
        for buf in [&mut scratch.tmp, &mut scratch.u, &mut scratch.z] {
            buf.clear();
            buf.resize(p.max(s), 0.0);
        }
        scratch.m_row.clear();
        scratch.m_row.resize(s * p + s, 0.0);

        let (wc, rest) = block.split_at(s);
        let (wa, gamma) = rest.split_at(s);

        // on-trajectory term
        let f = self.system.drift(x);
        let g = self.system.input_map(x);
        let mut on_traj = std::mem::take(&mut scratch.m_row);
        {
            let (drift, input) = on_traj.split_at_mut(s);
            self.basis.jacobian_times(x.as_slice(), f.as_slice(), drift);
            let mut column = vec![0.0; s];
            for j in 0..p {
                let gj: Vec<f64> = (0..n).map(|r| g[(r, j)]).collect();
                self.basis.jacobian_times(x.as_slice(), &gj, &mut column);
                for i in 0..s {
                    input[i * p + j] = column[i];
                }
            }
            let state_cost = x.dot(&(self.weights.q() * x)) + self.extra_cost(x);
            self.accumulate(drift, input, state_cost, Some(u.as_slice()), self.gains.kc1, wc, wa, scratch);
        }
        scratch.m_row = on_traj;

        // simulated experience
        let coeff = self.gains.kc2 / self.samples.len() as f64;
        if coeff != 0.0 {
            for k in 0..self.samples.len() {
                let drift = &self.samples.drift_terms[k * s..(k + 1) * s];
                let input = &self.samples.input_terms[k * s * p..(k + 1) * s * p];
                self.accumulate(drift, input, self.samples.state_costs[k], None, coeff, wc, wa, scratch);
            }
        }

        let (wc_dot, rest) = out.split_at_mut(s);
        let (wa_dot, gamma_dot) = rest.split_at_mut(s);
        for i in 0..s {
            wc_dot[i] = -(0..s).map(|j| gamma[i * s + j] * scratch.critic[j]).sum::<f64>();
            wa_dot[i] = -self.gains.ka1 * (wa[i] - wc[i]) - self.gains.ka2 * wa[i] + scratch.actor[i];
        }
        // Gamma' = beta Gamma - Gamma Lambda Gamma
        let lambda = &scratch.lambda;
        let mut lg = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                lg[i * s + j] = (0..s).map(|k| lambda[i * s + k] * gamma[k * s + j]).sum();
            }
        }
        for i in 0..s {
            for j in 0..s {
                let quad: f64 = (0..s).map(|k| gamma[i * s + k] * lg[k * s + j]).sum();
                gamma_dot[i * s + j] = self.gains.beta * gamma[i * s + j] - quad;
            }
        }
    }
}
