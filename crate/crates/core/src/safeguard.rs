//! Safeguarding controller, gradient manipulation, adaptive gains and the KKT / QP baselines.

use serde::{Deserialize, Serialize};

use crate::barrier::{BarrierFunction, PsiChain};
use crate::dynamics::SystemModel;
use crate::error::{invalid, Error, Result};
use crate::{Matrix, Vector};

const ZERO_NORM: f64 = 1e-12;
const DENOMINATOR_TOL: f64 = 1e-10;

/// Quadratic stage-cost weights `l(x, u) = x'Qx + u'Ru`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostWeights {
    q: Matrix,
    r: Matrix,
    r_inv: Matrix,
    sqrt_r_inv: Matrix,
}

fn min_eigenvalue(m: &Matrix) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

fn is_symmetric(m: &Matrix) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax())
}

impl CostWeights {
    pub fn new(q: Matrix, r: Matrix) -> Result<Self> {
        for (name, m) in [("Q", &q), ("R", &r)] {
            if !m.is_square() || !is_symmetric(m) {
                return Err(invalid(name, "must be square and symmetric"));
            }
            let min = min_eigenvalue(m);
            if !(min > 0.0) {
                return Err(invalid(name, format!("must be positive definite (min eigenvalue {min:e})")));
            }
        }
        let eig = r.clone().symmetric_eigen();
        let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
        let sqrt_r_inv = &eig.eigenvectors * Matrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
        let r_inv = &sqrt_r_inv * &sqrt_r_inv;
        Ok(Self {
            q,
            r,
            r_inv,
            sqrt_r_inv,
        })
    }

    pub fn identity(n: usize, p: usize) -> Self {
        Self::new(Matrix::identity(n, n), Matrix::identity(p, p)).expect("identity weights are valid")
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn r_inv(&self) -> &Matrix {
        &self.r_inv
    }

    pub fn sqrt_r_inv(&self) -> &Matrix {
        &self.sqrt_r_inv
    }

    pub fn stage_cost(&self, x: &Vector, u: &Vector) -> f64 {
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * u))
    }

    pub fn check_dims(&self, system: &SystemModel) -> Result<()> {
        let (n, p) = (system.state_dim(), system.input_dim());
        if self.q.nrows() != n || self.r.nrows() != p {
            return Err(Error::Dimension(format!(
                "weights are Q {}x{}, R {}x{}; plant has n = {n}, p = {p}",
                self.q.nrows(),
                self.q.ncols(),
                self.r.nrows(),
                self.r.ncols()
            )));
        }
        Ok(())
    }
}

/// `k*(x) = -1/2 R^-1 g(x)' grad V`.
pub fn optimal_policy(grad_v: &Vector, x: &Vector, system: &SystemModel, weights: &CostWeights) -> Vector {
    weights.r_inv() * (system.input_map(x).transpose() * grad_v) * -0.5
}

/// Tuning shared by every safeguarded constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafeguardConfig {
    /// Fraction of the safety gradient's performance-parallel part that is removed, in `[0, 1)`.
    #[serde(default)]
    pub mu: f64,
    /// Quadratic decay weight `Y` of the adaptive law.
    #[serde(default)]
    pub decay: f64,
    /// Growth weight `gamma` of the adaptive law.
    #[serde(default)]
    pub growth: f64,
    /// Projection bound on every gain.
    #[serde(default = "default_gain_bound")]
    pub gain_bound: f64,
}

fn default_gain_bound() -> f64 {
    1e4
}

impl Default for SafeguardConfig {
    fn default() -> Self {
        Self {
            mu: 0.0,
            decay: 0.0,
            growth: 0.0,
            gain_bound: default_gain_bound(),
        }
    }
}

impl SafeguardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mu) {
            return Err(invalid("mu", format!("must lie in [0, 1), got {}", self.mu)));
        }
        if !(self.decay >= 0.0) || !(self.growth >= 0.0) {
            return Err(invalid("decay/growth", "adaptive weights must be non-negative"));
        }
        if !(self.gain_bound > 0.0) {
            return Err(invalid("gain_bound", "must be positive"));
        }
        Ok(())
    }
}

/// One safeguarding gain per constraint, with a flag for whether it adapts.
#[derive(Clone, Debug, PartialEq)]
pub struct GainState {
    pub gains: Vec<f64>,
    pub adaptive: Vec<bool>,
}

impl GainState {
    pub fn new(gains: Vec<f64>, adaptive: Vec<bool>, cfg: &SafeguardConfig) -> Result<Self> {
        if gains.len() != adaptive.len() {
            return Err(Error::Dimension("one adaptivity flag per gain".into()));
        }
        if let Some(k) = gains.iter().find(|&&k| !(0.0..=cfg.gain_bound).contains(&k)) {
            return Err(invalid("ks0", format!("{k} outside [0, {}]", cfg.gain_bound)));
        }
        Ok(Self { gains, adaptive })
    }

    pub fn project(&mut self, cfg: &SafeguardConfig) {
        for k in &mut self.gains {
            *k = k.clamp(0.0, cfg.gain_bound);
        }
    }
}

/// `L_g B' = (dB/dpsi) L_g psi_{m-1}'`, the safety gradient in input space, with the barrier value data.
#[derive(Clone, Debug, PartialEq)]
pub struct SafetyGradient {
    pub psi: f64,
    pub dpsi: f64,
    pub lf_psi: f64,
    pub lg_psi: Vector,
}

impl SafetyGradient {
    pub fn lg_barrier(&self) -> Vector {
        &self.lg_psi * self.dpsi
    }

    pub fn lf_barrier(&self) -> f64 {
        self.lf_psi * self.dpsi
    }
}

pub fn safety_gradient(bf: &BarrierFunction, x: &Vector) -> Result<SafetyGradient> {
    let eval = bf.eval(x)?;
    let system = bf.chain().system();
    Ok(SafetyGradient {
        psi: eval.psi,
        dpsi: eval.dpsi,
        lf_psi: eval.grad_psi.dot(&system.drift(x)),
        lg_psi: system.input_map(x).transpose() * &eval.grad_psi,
    })
}

/// `u_s = -sum_j K_j R^-1 L_g psi_j' dB_j/dpsi`.
pub fn safeguard_force(
    x: &Vector,
    barriers: &[BarrierFunction],
    gains: &GainState,
    weights: &CostWeights,
) -> Result<Vector> {
    let p = weights.r().nrows();
    let mut total = Vector::zeros(p);
    for (bf, &k) in barriers.iter().zip(&gains.gains) {
        let grad = safety_gradient(bf, x)?;
        total -= weights.r_inv() * grad.lg_barrier() * k;
    }
    Ok(total)
}

/// Cosine of the angle between two vectors, clamped to `[-1, 1]`; zero if either is negligible.
pub fn cosine(a: &Vector, b: &Vector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Performance direction `sqrt(R^-1) g' grad V` and safety direction `sqrt(R^-1) L_g B'`.
fn frame_vectors(g_grad_v: &Vector, lg_barrier: &Vector, weights: &CostWeights) -> (Vector, Vector) {
    (weights.sqrt_r_inv() * g_grad_v, weights.sqrt_r_inv() * lg_barrier)
}

/// Gradient similarity given `g' grad V` and `L_g B'` in input space.
pub fn similarity(g_grad_v: &Vector, lg_barrier: &Vector, weights: &CostWeights) -> f64 {
    let (perf, safe) = frame_vectors(g_grad_v, lg_barrier, weights);
    cosine(&perf, &safe)
}

pub fn gradient_similarity(
    x: &Vector,
    grad_v: &Vector,
    bf: &BarrierFunction,
    system: &SystemModel,
    weights: &CostWeights,
) -> Result<f64> {
    let grad = safety_gradient(bf, x)?;
    let g_grad_v = system.input_map(x).transpose() * grad_v;
    Ok(similarity(&g_grad_v, &grad.lg_barrier(), weights))
}

/// Safeguard with the performance-parallel part of the safety gradient scaled by `1 - mu`.
///
/// Works on input-space vectors `g' grad V` and `L_g B'`. Without a performance direction the
/// unmanipulated force is returned.
pub fn manipulate(g_grad_v: &Vector, lg_barrier: &Vector, gain: f64, weights: &CostWeights, mu: f64) -> Vector {
    let (perf, safe) = frame_vectors(g_grad_v, lg_barrier, weights);
    let perf_sq = perf.norm_squared();
    if perf.norm() < ZERO_NORM || mu == 0.0 {
        return weights.r_inv() * lg_barrier * -gain;
    }
    let parallel = &perf * (perf.dot(&safe) / perf_sq);
    let perpendicular = &safe - &parallel;
    let tilde = parallel * (1.0 - mu) + perpendicular;
    weights.sqrt_r_inv() * tilde * -gain
}

pub fn manipulated_safeguard(
    x: &Vector,
    grad_v: &Vector,
    bf: &BarrierFunction,
    gain: f64,
    weights: &CostWeights,
    mu: f64,
) -> Result<Vector> {
    let grad = safety_gradient(bf, x)?;
    let g_grad_v = bf.chain().system().input_map(x).transpose() * grad_v;
    Ok(manipulate(&g_grad_v, &grad.lg_barrier(), gain, weights, mu))
}

/// Similarity of the manipulated safety gradient with the performance gradient.
pub fn manipulated_similarity(rho: f64, mu: f64) -> f64 {
    let parallel = (1.0 - mu) * rho;
    let norm = (parallel * parallel + 1.0 - rho * rho).sqrt();
    if norm < ZERO_NORM {
        0.0
    } else {
        parallel / norm
    }
}

/// `K^2 (1 - 2 rho^2 mu + rho^2 mu^2) |sqrt(R^-1) L_g B'|^2`: the Hamiltonian of the manipulated policy
/// when `grad V` solves the unconstrained HJB.
pub fn hamiltonian_excess_from(g_grad_v: &Vector, lg_barrier: &Vector, gain: f64, weights: &CostWeights, mu: f64) -> f64 {
    let (perf, safe) = frame_vectors(g_grad_v, lg_barrier, weights);
    let rho = cosine(&perf, &safe);
    let rho_sq = rho * rho;
    gain * gain * (1.0 - 2.0 * rho_sq * mu + rho_sq * mu * mu) * safe.norm_squared()
}

pub fn hamiltonian_excess(
    x: &Vector,
    grad_v: &Vector,
    bf: &BarrierFunction,
    gain: f64,
    weights: &CostWeights,
    mu: f64,
) -> Result<f64> {
    let grad = safety_gradient(bf, x)?;
    let g_grad_v = bf.chain().system().input_map(x).transpose() * grad_v;
    Ok(hamiltonian_excess_from(&g_grad_v, &grad.lg_barrier(), gain, weights, mu))
}

/// `dK/dt = -Y K^2 + gamma exp(-h) l(x, k*)`.
pub fn gain_rate(gain: f64, h_value: f64, stage_cost: f64, cfg: &SafeguardConfig) -> f64 {
    // exp(-h) overflows only far outside the safe set, where h is strongly negative
    let drive = (-h_value).min(700.0).exp();
    -cfg.decay * gain * gain + cfg.growth * drive * stage_cost
}

/// One RK4 step of the gain law with `h` and the stage cost frozen, followed by projection.
pub fn adapt_gain(gain: f64, h_value: f64, stage_cost: f64, cfg: &SafeguardConfig, dt: f64) -> f64 {
    let rate = |k: f64| gain_rate(k, h_value, stage_cost, cfg);
    let k1 = rate(gain);
    let k2 = rate(gain + 0.5 * dt * k1);
    let k3 = rate(gain + 0.5 * dt * k2);
    let k4 = rate(gain + dt * k3);
    (gain + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)).clamp(0.0, cfg.gain_bound)
}

/// Solution of `min |u - u_nom|_R^2` subject to `a_j . u <= c_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub u: Vector,
    pub multipliers: Vec<f64>,
    pub feasible: bool,
}

impl Projection {
    /// `max_j lambda_j |a_j . u - c_j|`.
    pub fn complementarity(&self, rows: &[(Vector, f64)]) -> f64 {
        rows.iter()
            .zip(&self.multipliers)
            .map(|((a, c), &lambda)| lambda * (a.dot(&self.u) - c).abs())
            .fold(0.0, f64::max)
    }
}

/// Active-set enumeration over at most two simultaneously active halfspaces.
///
/// Rows whose weighted norm `a R^-1 a'` falls below `1e-10` cannot be acted on and are left inactive.
pub fn project_halfspaces(u_nom: &Vector, rows: &[(Vector, f64)], weights: &CostWeights) -> Projection {
    let r_inv = weights.r_inv();
    let usable: Vec<usize> = (0..rows.len())
        .filter(|&j| rows[j].0.dot(&(r_inv * &rows[j].0)) > DENOMINATOR_TOL)
        .collect();
    let mut sets: Vec<Vec<usize>> = vec![vec![]];
    for (i, &j) in usable.iter().enumerate() {
        sets.push(vec![j]);
        for &k in &usable[i + 1..] {
            sets.push(vec![j, k]);
        }
    }
    let violation = |u: &Vector| {
        rows.iter()
            .map(|(a, c)| (a.dot(u) - c) / (1.0 + c.abs()))
            .fold(0.0, f64::max)
    };
    let mut best: Option<(f64, Projection)> = None;
    let mut least_violating: Option<(f64, Projection)> = None;
    for set in sets {
        let Some((u, lambdas)) = solve_active(u_nom, rows, &set, r_inv) else {
            continue;
        };
        let mut multipliers = vec![0.0; rows.len()];
        for (&j, &l) in set.iter().zip(&lambdas) {
            multipliers[j] = l;
        }
        let du = &u - u_nom;
        let cost = du.dot(&(weights.r() * &du));
        let worst = violation(&u);
        let candidate = Projection {
            u,
            multipliers,
            feasible: true,
        };
        if worst <= 1e-9 && lambdas.iter().all(|&l| l >= -1e-9) {
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, candidate));
            }
        } else if least_violating.as_ref().is_none_or(|(w, _)| worst < *w) {
            least_violating = Some((worst, candidate));
        }
    }
    match (best, least_violating) {
        (Some((_, p)), _) => p,
        (None, Some((_, mut p))) => {
            p.feasible = false;
            p
        }
        (None, None) => Projection {
            u: u_nom.clone(),
            multipliers: vec![0.0; rows.len()],
            feasible: false,
        },
    }
}

fn solve_active(u_nom: &Vector, rows: &[(Vector, f64)], set: &[usize], r_inv: &Matrix) -> Option<(Vector, Vec<f64>)> {
    if set.is_empty() {
        return Some((u_nom.clone(), vec![]));
    }
    let k = set.len();
    let a = Matrix::from_fn(k, u_nom.len(), |i, j| rows[set[i]].0[j]);
    let rhs = Vector::from_fn(k, |i, _| rows[set[i]].0.dot(u_nom) - rows[set[i]].1);
    let m = &a * r_inv * a.transpose();
    let det = m.determinant();
    if det.abs() <= DENOMINATOR_TOL * m.amax().max(1.0).powi(k as i32) {
        return None;
    }
    let lambda = m.lu().solve(&rhs)?;
    let u = u_nom - r_inv * a.transpose() * &lambda;
    Some((u, lambda.iter().copied().collect()))
}

/// Rows `a . u <= c` encoding `L_f B + L_g B (u + u_f) <= c3 psi` for every barrier.
pub fn kkt_rows(x: &Vector, barriers: &[BarrierFunction], uf: &Vector, gamma3: &[f64]) -> Result<Vec<(Vector, f64)>> {
    barriers
        .iter()
        .zip(gamma3)
        .map(|(bf, &c3)| {
            let grad = safety_gradient(bf, x)?;
            let lg = grad.lg_barrier();
            let c = c3 * grad.psi - grad.lf_barrier() - lg.dot(uf);
            Ok((lg, c))
        })
        .collect()
}

/// Lagrangian policy `u = k* - lambda R^-1 L_g B'` for one barrier, with exact knowledge of `u_f`.
pub fn kkt_policy(
    x: &Vector,
    kstar: &Vector,
    bf: &BarrierFunction,
    weights: &CostWeights,
    uf_known: &Vector,
    gamma3: f64,
) -> Result<(Vector, f64)> {
    let grad = safety_gradient(bf, x)?;
    let lg = grad.lg_barrier();
    let denominator = lg.dot(&(weights.r_inv() * &lg));
    if denominator <= DENOMINATOR_TOL {
        return Ok((kstar.clone(), 0.0));
    }
    let numerator = grad.lf_barrier() + lg.dot(&(kstar + uf_known)) - gamma3 * grad.psi;
    let lambda = (numerator / denominator).max(0.0);
    Ok((kstar - weights.r_inv() * &lg * lambda, lambda))
}

/// Rows `a . u <= c` encoding `L_f psi + L_g psi u >= -c3 psi` for every chain.
pub fn qp_rows(x: &Vector, chains: &[&PsiChain], gamma3: &[f64]) -> Vec<(Vector, f64)> {
    chains
        .iter()
        .zip(gamma3)
        .map(|(chain, &c3)| {
            let top = chain.top(x);
            let system = chain.system();
            let lf = top.gradient.dot(&system.drift(x));
            let lg = system.input_map(x).transpose() * &top.gradient;
            (-lg, c3 * top.value + lf)
        })
        .collect()
}

/// Minimal-change filter keeping every chain top inside its first-order barrier condition.
pub fn qp_safety_filter(
    x: &Vector,
    u_nominal: &Vector,
    chains: &[&PsiChain],
    gamma3: &[f64],
    weights: &CostWeights,
) -> Projection {
    project_halfspaces(u_nominal, &qp_rows(x, chains, gamma3), weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{build_chain, BarrierForm, ConstraintShape, ConstraintSpec, SafetyFunction};
    use crate::dynamics::{make_double_integrator, make_pendulum};
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn halfspace(normal: &[f64], offset: f64) -> SafetyFunction {
        let n = normal.len();
        SafetyFunction::quadratic(
            ConstraintShape::Halfspace { normal: normal.to_vec(), offset }.to_quadratic(n).unwrap(),
        )
    }

    fn velocity_barrier() -> BarrierFunction {
        let sys = make_double_integrator(1).unwrap();
        let spec = ConstraintSpec::new("v", halfspace(&[0.0, 1.0], 15.0), 1, vec![]).unwrap();
        BarrierFunction::new(build_chain(spec, &sys).unwrap(), BarrierForm::Reciprocal).unwrap()
    }

    fn pendulum_barriers() -> Vec<BarrierFunction> {
        let sys = make_pendulum(2.0, 1.0, 10.0).unwrap();
        let angle = ConstraintSpec::with_linear_alphas("theta", halfspace(&[1.0, 0.0], 0.8), 2, 100.0).unwrap();
        let rate = ConstraintSpec::new("omega", halfspace(&[0.0, -1.0], 2.0), 1, vec![]).unwrap();
        [angle, rate]
            .into_iter()
            .map(|spec| BarrierFunction::new(build_chain(spec, &sys).unwrap(), BarrierForm::Reciprocal).unwrap())
            .collect()
    }

    fn scalar_weights(q: f64, r: f64) -> CostWeights {
        CostWeights::new(Matrix::identity(2, 2) * q, Matrix::identity(1, 1) * r).unwrap()
    }

    #[test]
    fn weights_reject_indefinite_matrices() {
        assert!(CostWeights::new(Matrix::identity(2, 2), Matrix::from_element(1, 1, 0.0)).is_err());
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(CostWeights::new(asym, Matrix::identity(1, 1)).is_err());
        let r = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let w = CostWeights::new(Matrix::identity(2, 2), r.clone()).unwrap();
        assert!((w.sqrt_r_inv() * w.sqrt_r_inv() * &r - Matrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn optimal_policy_examples() {
        let sys = make_double_integrator(1).unwrap();
        let w = scalar_weights(1.0, 1.0);
        let x = v(&[1.0, 0.0]);
        assert_eq!(optimal_policy(&Vector::zeros(2), &x, &sys, &w), v(&[0.0]));
        let s3 = 3f64.sqrt();
        let grad_v = v(&[2.0 * s3, 2.0]);
        let u = optimal_policy(&grad_v, &x, &sys, &w);
        assert!((u[0] + 1.0).abs() < 1e-15);
        let halved = optimal_policy(&grad_v, &x, &sys, &scalar_weights(1.0, 2.0));
        assert!((halved[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn safeguard_force_examples() {
        let bf = velocity_barrier();
        let w = scalar_weights(1.0, 1.0);
        let x = v(&[0.0, 14.0]);
        let cfg = SafeguardConfig::default();
        let gains = GainState::new(vec![0.1], vec![false], &cfg).unwrap();
        let u = safeguard_force(&x, std::slice::from_ref(&bf), &gains, &w).unwrap();
        assert!((u[0] + 0.1).abs() < 1e-15);
        let zero = GainState::new(vec![0.0], vec![false], &cfg).unwrap();
        assert_eq!(safeguard_force(&x, &[bf], &zero, &w).unwrap(), v(&[0.0]));
    }

    #[test]
    fn constraint_without_input_authority_contributes_nothing() {
        // position constraint declared with relative degree one: L_g psi = 0 everywhere
        let sys = make_double_integrator(1).unwrap();
        let spec = ConstraintSpec::new("p", halfspace(&[1.0, 0.0], 5.0), 1, vec![]).unwrap();
        let position = BarrierFunction::new(build_chain(spec, &sys).unwrap(), BarrierForm::Reciprocal).unwrap();
        let w = scalar_weights(1.0, 1.0);
        let cfg = SafeguardConfig::default();
        let gains = GainState::new(vec![1.0, 0.1], vec![false, false], &cfg).unwrap();
        let x = v(&[0.0, 14.0]);
        let both = safeguard_force(&x, &[position, velocity_barrier()], &gains, &w).unwrap();
        assert!((both[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn similarity_extremes() {
        let w = scalar_weights(1.0, 1.0);
        let a = v(&[1.5]);
        assert_eq!(similarity(&a, &(&a * 2.0), &w), 1.0);
        assert_eq!(similarity(&a, &(-&a), &w), -1.0);
        let w2 = CostWeights::new(Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap();
        assert_eq!(similarity(&v(&[1.0, 0.0]), &v(&[0.0, 3.0]), &w2), 0.0);
        assert_eq!(similarity(&v(&[0.0, 0.0]), &v(&[0.0, 3.0]), &w2), 0.0);
    }

    #[test]
    fn manipulation_special_cases() {
        let w = CostWeights::new(Matrix::identity(2, 2), Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let perf = v(&[1.0, -0.5]);
        let safe = v(&[0.4, 2.0]);
        let plain = w.r_inv() * &safe * -3.0;
        assert!((manipulate(&perf, &safe, 3.0, &w, 0.0) - &plain).norm() < 1e-14);
        assert!((manipulate(&v(&[0.0, 0.0]), &safe, 3.0, &w, 0.7) - &plain).norm() < 1e-14);

        // orthogonal in the weighted frame: mu has no effect
        let frame_perf = w.sqrt_r_inv() * &perf;
        let frame_orth = v(&[-frame_perf[1], frame_perf[0]]);
        let orth = w.sqrt_r_inv().clone().try_inverse().unwrap() * frame_orth;
        let m0 = manipulate(&perf, &orth, 2.0, &w, 0.0);
        let m9 = manipulate(&perf, &orth, 2.0, &w, 0.9);
        assert!((m0 - m9).norm() < 1e-12);
    }

    #[test]
    fn antiparallel_gradients_vanish_as_mu_tends_to_one() {
        // direct 2-D construction with R = I: safety gradient = -perf + small orthogonal part
        let w = CostWeights::new(Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap();
        let perf = v(&[2.0, 0.0]);
        let safe = v(&[-3.0, 0.0]);
        let kstar = &perf * -0.5;
        let u = manipulate(&perf, &safe, 1.0, &w, 1.0 - 1e-9);
        assert!(u.dot(&kstar).abs() < 1e-8);
        assert!((manipulate(&perf, &safe, 1.0, &w, 0.5) - v(&[1.5, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn hamiltonian_excess_examples() {
        let w = scalar_weights(1.0, 1.0);
        let perf = v(&[1.0]);
        let safe = v(&[2.0]);
        assert!((hamiltonian_excess_from(&perf, &safe, 3.0, &w, 0.0) - 36.0).abs() < 1e-12);
        assert_eq!(hamiltonian_excess_from(&perf, &safe, 0.0, &w, 0.4), 0.0);
        assert!((hamiltonian_excess_from(&perf, &safe, 3.0, &w, 0.5) - 0.25 * 36.0).abs() < 1e-12);
    }

    #[test]
    fn gain_rate_examples() {
        let cfg = SafeguardConfig { mu: 0.0, decay: 500.0, growth: 0.001, gain_bound: 1e3 };
        assert_eq!(gain_rate(0.0, 1.0, 0.0, &cfg), 0.0);
        assert!((gain_rate(0.01, 1.0, 0.0, &cfg) + 0.05).abs() < 1e-15);
        let grow = SafeguardConfig { decay: 0.0, ..cfg.clone() };
        assert!((gain_rate(0.0, 0.0, 100.0, &grow) - 0.1).abs() < 1e-15);
        assert_eq!(adapt_gain(0.0, 0.3, 0.0, &cfg, 1e-3), 0.0);
    }

    #[test]
    fn kkt_policy_examples() {
        let bf = velocity_barrier();
        let w = scalar_weights(1.0, 1.0);
        let x = v(&[0.0, 5.0]);
        // far from the boundary: inactive
        let (u, lambda) = kkt_policy(&x, &v(&[1.0]), &bf, &w, &v(&[0.0]), 1.0).unwrap();
        assert_eq!((u[0], lambda), (1.0, 0.0));
    }

    #[test]
    fn kkt_formula_arithmetic() {
        // L_f B = 2, L_g B = 1, k* + u_f contributes 1, no gamma term, R = 1 -> lambda = 3
        let w = CostWeights::new(Matrix::identity(1, 1), Matrix::identity(1, 1)).unwrap();
        let rows = vec![(v(&[1.0]), -2.0)];
        let p = project_halfspaces(&v(&[1.0]), &rows, &w);
        assert!((p.multipliers[0] - 3.0).abs() < 1e-12);
        assert!((p.u[0] - (1.0 - 3.0)).abs() < 1e-12);
        assert!(p.complementarity(&rows) < 1e-12);
    }

    #[test]
    fn degenerate_rows_stay_inactive() {
        let w = CostWeights::new(Matrix::identity(1, 1), Matrix::identity(1, 1)).unwrap();
        let rows = vec![(v(&[1e-8]), -1.0)];
        let p = project_halfspaces(&v(&[2.0]), &rows, &w);
        assert_eq!(p.multipliers[0], 0.0);
        assert_eq!(p.u[0], 2.0);
    }

    #[test]
    fn one_dimensional_projection_hits_the_boundary() {
        let w = CostWeights::new(Matrix::identity(1, 1), Matrix::identity(1, 1) * 4.0).unwrap();
        let rows = vec![(v(&[-1.0]), 3.0)]; // u >= -3
        assert_eq!(project_halfspaces(&v(&[-1.0]), &rows, &w).u[0], -1.0);
        let p = project_halfspaces(&v(&[-10.0]), &rows, &w);
        assert!((p.u[0] + 3.0).abs() < 1e-12 && p.feasible);
    }

    #[test]
    fn contradictory_rows_flag_infeasible() {
        let w = CostWeights::new(Matrix::identity(1, 1), Matrix::identity(1, 1)).unwrap();
        let rows = vec![(v(&[1.0]), -1.0), (v(&[-1.0]), -1.0)]; // u <= -1 and u >= 1
        assert!(!project_halfspaces(&v(&[0.0]), &rows, &w).feasible);
    }

    #[test]
    fn pendulum_filter_with_only_velocity_binding() {
        let barriers = pendulum_barriers();
        let chains: Vec<&PsiChain> = barriers.iter().map(|b| b.chain()).collect();
        let w = scalar_weights(1.0, 1.0);
        let x = v(&[0.0, -1.9]);
        let u_nom = v(&[-50.0]);
        let both = qp_safety_filter(&x, &u_nom, &chains, &[1.0, 1.0], &w);
        let single = qp_safety_filter(&x, &u_nom, &chains[1..], &[1.0], &w);
        assert!(both.feasible && both.multipliers[0] == 0.0 && both.multipliers[1] > 0.0);
        assert!((both.u[0] - single.u[0]).abs() < 1e-12);
        // enumeration oracle: the velocity row alone, solved by hand
        let (a, c) = &qp_rows(&x, &chains, &[1.0, 1.0])[1];
        assert!((both.u[0] - c / a[0]).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn similarity_stays_in_range(a in proptest::collection::vec(-10.0..10.0f64, 2), b in proptest::collection::vec(-10.0..10.0f64, 2)) {
            let w = CostWeights::new(Matrix::identity(2, 2), Matrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0])).unwrap();
            let rho = similarity(&v(&a), &v(&b), &w);
            prop_assert!((-1.0..=1.0).contains(&rho));
        }

        #[test]
        fn manipulated_similarity_tracks_construction(
            rho in -1.0..1.0f64, mu in 0.0..0.99f64,
        ) {
            // build unit vectors with the given cosine and compare the closed form
            let w = CostWeights::new(Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap();
            let perf = v(&[1.0, 0.0]);
            let safe = v(&[rho, (1.0 - rho * rho).sqrt()]);
            let u = manipulate(&perf, &safe, 1.0, &w, mu);
            let direct = cosine(&perf, &(-u));
            prop_assert!((direct - manipulated_similarity(rho, mu)).abs() < 1e-9);
        }
    }
}
