//! Safety functions, the ψ-chain for high relative degree, and reciprocal barriers.
//!
//! A constraint `h(x) >= 0` of relative degree `m` is reduced to the top of the chain
//!
//! ```text
//! psi_0 = h
//! psi_i = grad(psi_{i-1}) . f(x) + alpha_i(psi_{i-1})      (i = 1 .. m-1)
//! ```
//!
//! and the barrier acts on `psi_{m-1}`, where the input appears.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemModel;
use crate::error::{invalid, Error, Result};
use crate::{Matrix, Vector};

type ScalarField = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;
type GradientField = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
type HessianField = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;

/// `h(x) = constant + linear . x + x' quadratic x` with `quadratic` symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticForm {
    pub constant: f64,
    pub linear: Vector,
    pub quadratic: Matrix,
}

impl QuadraticForm {
    pub fn new(constant: f64, linear: Vector, quadratic: Matrix) -> Result<Self> {
        let n = linear.len();
        if quadratic.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "quadratic part is {:?}, expected ({n}, {n})",
                quadratic.shape()
            )));
        }
        let quadratic = (&quadratic + quadratic.transpose()) * 0.5;
        Ok(Self {
            constant,
            linear,
            quadratic,
        })
    }

    pub fn value(&self, x: &Vector) -> f64 {
        self.constant + self.linear.dot(x) + x.dot(&(&self.quadratic * x))
    }

    pub fn gradient(&self, x: &Vector) -> Vector {
        &self.linear + &self.quadratic * x * 2.0
    }

    pub fn hessian(&self) -> Matrix {
        &self.quadratic * 2.0
    }
}

/// Geometric description of a safety function, as written in scenario files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConstraintShape {
    /// `offset - normal . x >= 0`
    Halfspace { normal: Vec<f64>, offset: f64 },
    /// Stay outside the ball over the selected state components: `|x_I - center|^2 - radius^2 >= 0`.
    BallExclusion {
        indices: Vec<usize>,
        center: Vec<f64>,
        radius: f64,
    },
    /// Stay inside the ball: `radius^2 - |x_I - center|^2 >= 0`.
    BallInclusion {
        indices: Vec<usize>,
        center: Vec<f64>,
        radius: f64,
    },
    /// General quadratic `constant + linear . x + x' quadratic x`.
    Custom {
        constant: f64,
        linear: Vec<f64>,
        quadratic: Vec<Vec<f64>>,
    },
}

impl ConstraintShape {
    pub fn to_quadratic(&self, n: usize) -> Result<QuadraticForm> {
        match self {
            ConstraintShape::Halfspace { normal, offset } => {
                if normal.len() != n {
                    return Err(Error::Dimension(format!(
                        "halfspace normal has {} entries, state has {n}",
                        normal.len()
                    )));
                }
                QuadraticForm::new(*offset, -Vector::from_column_slice(normal), Matrix::zeros(n, n))
            }
            ConstraintShape::BallExclusion {
                indices,
                center,
                radius,
            } => ball(n, indices, center, *radius, 1.0),
            ConstraintShape::BallInclusion {
                indices,
                center,
                radius,
            } => ball(n, indices, center, *radius, -1.0),
            ConstraintShape::Custom {
                constant,
                linear,
                quadratic,
            } => {
                if linear.len() != n || quadratic.len() != n || quadratic.iter().any(|r| r.len() != n) {
                    return Err(Error::Dimension(format!(
                        "custom constraint must use a {n}-vector and a {n}x{n} matrix"
                    )));
                }
                let rows: Vec<f64> = quadratic.iter().flatten().copied().collect();
                QuadraticForm::new(
                    *constant,
                    Vector::from_column_slice(linear),
                    Matrix::from_row_slice(n, n, &rows),
                )
            }
        }
    }
}

fn ball(n: usize, indices: &[usize], center: &[f64], radius: f64, sign: f64) -> Result<QuadraticForm> {
    if indices.is_empty() || indices.len() != center.len() {
        return Err(invalid("center", "indices and center must be non-empty and of equal length"));
    }
    if !(radius > 0.0) {
        return Err(invalid("radius", format!("must be positive, got {radius}")));
    }
    let mut linear = Vector::zeros(n);
    let mut quadratic = Matrix::zeros(n, n);
    let mut constant = -radius * radius;
    for (&k, &c) in indices.iter().zip(center) {
        if k >= n {
            return Err(Error::Dimension(format!("index {k} out of range for {n} states")));
        }
        quadratic[(k, k)] += 1.0;
        linear[k] -= 2.0 * c;
        constant += c * c;
    }
    QuadraticForm::new(sign * constant, linear * sign, quadratic * sign)
}

/// A scalar safety function `h` with its gradient and, when known, its Hessian.
#[derive(Clone)]
pub struct SafetyFunction {
    value: ScalarField,
    gradient: GradientField,
    hessian: Option<HessianField>,
}

impl fmt::Debug for SafetyFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SafetyFunction")
            .field("analytic_hessian", &self.hessian.is_some())
            .finish()
    }
}

impl SafetyFunction {
    pub fn new(value: ScalarField, gradient: GradientField) -> Self {
        Self {
            value,
            gradient,
            hessian: None,
        }
    }

    pub fn with_hessian(mut self, hessian: HessianField) -> Self {
        self.hessian = Some(hessian);
        self
    }

    pub fn quadratic(form: QuadraticForm) -> Self {
        let form = Arc::new(form);
        let (fv, fg, fh) = (form.clone(), form.clone(), form);
        Self::new(Arc::new(move |x| fv.value(x)), Arc::new(move |x| fg.gradient(x)))
            .with_hessian(Arc::new(move |_x| fh.hessian()))
    }

    pub fn value(&self, x: &Vector) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &Vector) -> Vector {
        (self.gradient)(x)
    }

    pub fn hessian(&self, x: &Vector) -> Matrix {
        match &self.hessian {
            Some(hess) => hess(x),
            None => {
                let n = x.len();
                let step = fd_step(x);
                let mut out = Matrix::zeros(n, n);
                let mut probe = x.clone();
                for j in 0..n {
                    probe[j] = x[j] + step;
                    let plus = self.gradient(&probe);
                    probe[j] = x[j] - step;
                    let minus = self.gradient(&probe);
                    probe[j] = x[j];
                    out.set_column(j, &((plus - minus) / (2.0 * step)));
                }
                (&out + out.transpose()) * 0.5
            }
        }
    }
}

/// Class-K function used at one level of the chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ClassK {
    /// `gain * s`
    Linear { gain: f64 },
    /// `gain * s^3`
    Cubic { gain: f64 },
}

impl ClassK {
    pub fn linear(gain: f64) -> Self {
        ClassK::Linear { gain }
    }

    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            ClassK::Linear { gain } => gain * s,
            ClassK::Cubic { gain } => gain * s * s * s,
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        match *self {
            ClassK::Linear { gain } => gain,
            ClassK::Cubic { gain } => 3.0 * gain * s * s,
        }
    }

    fn gain(&self) -> f64 {
        match *self {
            ClassK::Linear { gain } | ClassK::Cubic { gain } => gain,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.gain() > 0.0 && self.gain().is_finite()) {
            return Err(invalid("alpha", format!("gain must be positive, got {}", self.gain())));
        }
        let grid: Vec<f64> = (-20..=20).map(|k| k as f64 * 0.25).collect();
        if self.eval(0.0) != 0.0 || grid.windows(2).any(|w| !(self.eval(w[1]) > self.eval(w[0]))) {
            return Err(invalid("alpha", "must be strictly increasing with alpha(0) = 0"));
        }
        Ok(())
    }
}

/// A constraint `h(x) >= 0` with its relative degree and chain gains.
#[derive(Clone, Debug)]
pub struct ConstraintSpec {
    pub label: String,
    pub safety: SafetyFunction,
    pub relative_degree: usize,
    pub alphas: Vec<ClassK>,
}

impl ConstraintSpec {
    pub fn new(
        label: impl Into<String>,
        safety: SafetyFunction,
        relative_degree: usize,
        alphas: Vec<ClassK>,
    ) -> Result<Self> {
        let label = label.into();
        if relative_degree == 0 {
            return Err(invalid("relative_degree", format!("`{label}`: must be at least 1")));
        }
        if alphas.len() != relative_degree - 1 {
            return Err(invalid(
                "alphas",
                format!(
                    "`{label}`: relative degree {relative_degree} needs {} class-K functions, got {}",
                    relative_degree - 1,
                    alphas.len()
                ),
            ));
        }
        for alpha in &alphas {
            alpha.check()?;
        }
        Ok(Self {
            label,
            safety,
            relative_degree,
            alphas,
        })
    }

    /// Relative degree `m` with the default linear `alpha_i(s) = gain * s` at every level.
    pub fn with_linear_alphas(
        label: impl Into<String>,
        safety: SafetyFunction,
        relative_degree: usize,
        gain: f64,
    ) -> Result<Self> {
        let alphas = vec![ClassK::linear(gain); relative_degree.saturating_sub(1)];
        Self::new(label, safety, relative_degree, alphas)
    }
}

/// The functions `psi_0 .. psi_{m-1}` of one constraint on one plant.
#[derive(Clone, Debug)]
pub struct PsiChain {
    spec: ConstraintSpec,
    system: SystemModel,
}

/// Value and gradient of one chain level.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainLevel {
    pub value: f64,
    pub gradient: Vector,
}

fn fd_step(x: &Vector) -> f64 {
    (1e-6 * x.norm()).max(1e-6)
}

const PROBE_COUNT: usize = 16;

/// Builds the chain and checks on probe states that the input does not appear below level `m-1`.
pub fn build_chain(spec: ConstraintSpec, system: &SystemModel) -> Result<PsiChain> {
    let n = system.state_dim();
    let origin = Vector::zeros(n);
    let g0 = spec.safety.gradient(&origin);
    if g0.len() != n {
        return Err(Error::Dimension(format!(
            "constraint `{}` gradient has {} entries, state has {n}",
            spec.label,
            g0.len()
        )));
    }
    let chain = PsiChain {
        spec,
        system: system.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut probes = vec![origin];
    for _ in 0..PROBE_COUNT {
        probes.push(Vector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0)));
    }
    for level in 0..chain.spec.relative_degree - 1 {
        for x in &probes {
            let grad = chain.gradient_at(level, x);
            let g = system.input_map(x);
            let lg = g.transpose() * &grad;
            let scale = 1.0 + grad.norm() * g.norm();
            if lg.norm() > 1e-6 * scale {
                return Err(Error::RelativeDegree {
                    label: chain.spec.label.clone(),
                    level,
                });
            }
        }
    }
    Ok(chain)
}

impl PsiChain {
    pub fn label(&self) -> &str {
        &self.spec.label
    }

    pub fn relative_degree(&self) -> usize {
        self.spec.relative_degree
    }

    pub fn spec(&self) -> &ConstraintSpec {
        &self.spec
    }

    pub fn system(&self) -> &SystemModel {
        &self.system
    }

    /// `h(x)`, the raw safety margin.
    pub fn h(&self, x: &Vector) -> f64 {
        self.spec.safety.value(x)
    }

    fn value_at(&self, level: usize, x: &Vector) -> f64 {
        if level == 0 {
            return self.spec.safety.value(x);
        }
        let below = self.value_at(level - 1, x);
        self.gradient_at(level - 1, x).dot(&self.system.drift(x)) + self.spec.alphas[level - 1].eval(below)
    }

    fn gradient_at(&self, level: usize, x: &Vector) -> Vector {
        match level {
            0 => self.spec.safety.gradient(x),
            1 => {
                // grad(grad_h . f + alpha(h)) = H f + J' grad_h + alpha'(h) grad_h
                let grad_h = self.spec.safety.gradient(x);
                let h = self.spec.safety.value(x);
                let f = self.system.drift(x);
                let jac = self.system.jacobian(x);
                self.spec.safety.hessian(x) * f
                    + jac.transpose() * &grad_h
                    + grad_h * self.spec.alphas[0].derivative(h)
            }
            _ => {
                let step = fd_step(x);
                let mut probe = x.clone();
                Vector::from_fn(x.len(), |j, _| {
                    probe[j] = x[j] + step;
                    let plus = self.value_at(level, &probe);
                    probe[j] = x[j] - step;
                    let minus = self.value_at(level, &probe);
                    probe[j] = x[j];
                    (plus - minus) / (2.0 * step)
                })
            }
        }
    }

    /// All `m` levels; values may be negative.
    pub fn eval(&self, x: &Vector) -> Vec<ChainLevel> {
        (0..self.spec.relative_degree)
            .map(|level| ChainLevel {
                value: self.value_at(level, x),
                gradient: self.gradient_at(level, x),
            })
            .collect()
    }

    /// Values `psi_0 .. psi_{m-1}` without gradients of the top level.
    pub fn values(&self, x: &Vector) -> Vec<f64> {
        (0..self.spec.relative_degree).map(|level| self.value_at(level, x)).collect()
    }

    /// `psi_{m-1}` and its gradient.
    pub fn top(&self, x: &Vector) -> ChainLevel {
        let level = self.spec.relative_degree - 1;
        ChainLevel {
            value: self.value_at(level, x),
            gradient: self.gradient_at(level, x),
        }
    }

    /// `(L_f psi_{m-1}, L_g psi_{m-1})` with `L_g` as a `p`-vector.
    pub fn lie_derivatives(&self, x: &Vector) -> (f64, Vector) {
        let grad = self.top(x).gradient;
        let lf = grad.dot(&self.system.drift(x));
        let lg = self.system.input_map(x).transpose() * grad;
        (lf, lg)
    }

    /// Membership of `x` in the intersection of all chain sets (strict inequalities).
    pub fn initial_feasibility(&self, x0: &Vector) -> FeasibilityReport {
        let values = self.values(x0);
        let first_failing_level = values.iter().position(|&v| !(v > 0.0));
        FeasibilityReport {
            label: self.spec.label.clone(),
            values,
            first_failing_level,
        }
    }
}

/// Per-level chain values at an initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityReport {
    pub label: String,
    pub values: Vec<f64>,
    pub first_failing_level: Option<usize>,
}

impl FeasibilityReport {
    pub fn feasible(&self) -> bool {
        self.first_failing_level.is_none()
    }
}

impl fmt::Display for FeasibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.label)?;
        for (level, value) in self.values.iter().enumerate() {
            write!(f, " psi_{level}={value:.6}")?;
        }
        if let Some(level) = self.first_failing_level {
            write!(f, " (fails at level {level})")?;
        }
        Ok(())
    }
}

/// Energy function applied on top of `psi_{m-1}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BarrierForm {
    /// `1 / psi`
    #[default]
    Reciprocal,
    /// `(1/psi - 1/psi(0))^2`, zero at the origin.
    ShiftedSquare,
}

/// Barrier value, its derivative with respect to `psi_{m-1}`, and its state gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct BarrierEval {
    pub value: f64,
    pub dpsi: f64,
    pub psi: f64,
    pub grad_psi: Vector,
}

impl BarrierEval {
    /// `d B / d x`
    pub fn gradient(&self) -> Vector {
        &self.grad_psi * self.dpsi
    }
}

#[derive(Clone, Debug)]
pub struct BarrierFunction {
    chain: PsiChain,
    form: BarrierForm,
    psi_at_origin: f64,
}

impl BarrierFunction {
    pub fn new(chain: PsiChain, form: BarrierForm) -> Result<Self> {
        let origin = Vector::zeros(chain.system.state_dim());
        let psi_at_origin = chain.top(&origin).value;
        if form == BarrierForm::ShiftedSquare && !(psi_at_origin > 0.0) {
            return Err(invalid(
                "form",
                format!(
                    "`{}`: shifted-square barrier needs the origin strictly inside (psi(0) = {psi_at_origin})",
                    chain.label()
                ),
            ));
        }
        Ok(Self {
            chain,
            form,
            psi_at_origin,
        })
    }

    pub fn chain(&self) -> &PsiChain {
        &self.chain
    }

    pub fn form(&self) -> BarrierForm {
        self.form
    }

    pub fn label(&self) -> &str {
        self.chain.label()
    }

    pub fn psi_at_origin(&self) -> f64 {
        self.psi_at_origin
    }

    /// Barrier value and slope as functions of `psi > 0`.
    pub fn shape(&self, psi: f64) -> (f64, f64) {
        match self.form {
            BarrierForm::Reciprocal => (1.0 / psi, -1.0 / (psi * psi)),
            BarrierForm::ShiftedSquare => {
                let gap = 1.0 / psi - 1.0 / self.psi_at_origin;
                (gap * gap, -2.0 * gap / (psi * psi))
            }
        }
    }

    pub fn eval(&self, x: &Vector) -> Result<BarrierEval> {
        let top = self.chain.top(x);
        if !(top.value > 0.0) {
            return Err(Error::BoundaryCrossed {
                label: self.chain.label().to_string(),
                psi: top.value,
            });
        }
        let (value, dpsi) = self.shape(top.value);
        Ok(BarrierEval {
            value,
            dpsi,
            psi: top.value,
            grad_psi: top.gradient,
        })
    }
}

/// Free-function form of [`BarrierFunction::eval`].
pub fn eval_barrier(bf: &BarrierFunction, x: &Vector) -> Result<BarrierEval> {
    bf.eval(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{make_double_integrator, make_pendulum};
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn shape_fn(shape: ConstraintShape, n: usize) -> SafetyFunction {
        SafetyFunction::quadratic(shape.to_quadratic(n).unwrap())
    }

    fn velocity_chain() -> PsiChain {
        let sys = make_double_integrator(1).unwrap();
        let h = shape_fn(ConstraintShape::Halfspace { normal: vec![0.0, 1.0], offset: 15.0 }, 2);
        build_chain(ConstraintSpec::new("v", h, 1, vec![]).unwrap(), &sys).unwrap()
    }

    fn angle_chain() -> PsiChain {
        let sys = make_pendulum(2.0, 1.0, 10.0).unwrap();
        let h = shape_fn(ConstraintShape::Halfspace { normal: vec![1.0, 0.0], offset: 0.8 }, 2);
        build_chain(ConstraintSpec::with_linear_alphas("theta", h, 2, 100.0).unwrap(), &sys).unwrap()
    }

    fn obstacle_chain(center: [f64; 2], radius: f64) -> PsiChain {
        let sys = make_double_integrator(2).unwrap();
        let h = shape_fn(
            ConstraintShape::BallExclusion { indices: vec![0, 1], center: center.to_vec(), radius },
            4,
        );
        build_chain(ConstraintSpec::with_linear_alphas("obs", h, 2, 1.0).unwrap(), &sys).unwrap()
    }

    fn fd_gradient(f: impl Fn(&Vector) -> f64, x: &Vector) -> Vector {
        let step = 1e-6;
        Vector::from_fn(x.len(), |j, _| {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[j] += step;
            minus[j] -= step;
            (f(&plus) - f(&minus)) / (2.0 * step)
        })
    }

    fn rel_err(a: &Vector, b: &Vector) -> f64 {
        (a - b).norm() / b.norm().max(1.0)
    }

    #[test]
    fn velocity_chain_values() {
        let chain = velocity_chain();
        let levels = chain.eval(&v(&[0.0, 14.0]));
        assert_eq!(levels.len(), 1);
        assert_eq!(levels[0].value, 1.0);
        assert_eq!(levels[0].gradient, v(&[0.0, -1.0]));
        for x in [v(&[3.0, 1.0]), v(&[-7.0, 20.0])] {
            let (lf, lg) = chain.lie_derivatives(&x);
            assert_eq!(lf, 0.0);
            assert_eq!(lg, v(&[-1.0]));
        }
    }

    #[test]
    fn pendulum_chain_matches_closed_form() {
        let chain = angle_chain();
        assert_eq!(chain.top(&v(&[0.0, 0.0])).value, 80.0);
        for x in [v(&[0.1, -3.0]), v(&[0.5, 10.0])] {
            let expected = -x[1] + 100.0 * (0.8 - x[0]);
            assert!((chain.top(&x).value - expected).abs() < 1e-12);
        }
        let (_, lg) = chain.lie_derivatives(&v(&[0.0, 0.0]));
        assert!((lg[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn obstacle_chain_matches_closed_form() {
        let (c, r) = ([1.0, -0.5], 0.4);
        let chain = obstacle_chain(c, r);
        let boundary = v(&[c[0] + r, c[1], 0.0, 0.0]);
        let values = chain.values(&boundary);
        assert!(values[0].abs() < 1e-12 && values[1].abs() < 1e-12);
        let x = v(&[2.0, 0.7, -0.3, 0.4]);
        let d = [x[0] - c[0], x[1] - c[1]];
        let h = d[0] * d[0] + d[1] * d[1] - r * r;
        let psi1 = 2.0 * (d[0] * x[2] + d[1] * x[3]) + h;
        assert!((chain.top(&x).value - psi1).abs() < 1e-12);
        // L_g psi_1 = 2 (p - c)' at a point 2r to the right of the center, cross-checked by differences
        let far = v(&[c[0] + 2.0 * r, c[1], 0.0, 0.0]);
        let (_, lg) = chain.lie_derivatives(&far);
        let oracle = fd_gradient(|y| chain.top(y).value, &far);
        assert!((lg[0] - oracle[2]).abs() < 1e-6 && (lg[1] - oracle[3]).abs() < 1e-6);
        assert!((lg[0] - 4.0 * r).abs() < 1e-12);
    }

    #[test]
    fn relative_degree_violation_is_detected() {
        let sys = make_double_integrator(1).unwrap();
        let h = shape_fn(ConstraintShape::Halfspace { normal: vec![0.0, 1.0], offset: 15.0 }, 2);
        let err = build_chain(ConstraintSpec::with_linear_alphas("v", h, 2, 1.0).unwrap(), &sys);
        assert!(matches!(err, Err(Error::RelativeDegree { level: 0, .. })));
    }

    #[test]
    fn alpha_count_must_match_relative_degree() {
        let h = shape_fn(ConstraintShape::Halfspace { normal: vec![1.0, 0.0], offset: 1.0 }, 2);
        assert!(ConstraintSpec::new("x", h.clone(), 2, vec![]).is_err());
        assert!(ConstraintSpec::new("x", h.clone(), 0, vec![]).is_err());
        assert!(ConstraintSpec::new("x", h, 2, vec![ClassK::linear(-1.0)]).is_err());
    }

    #[test]
    fn feasibility_reports() {
        let chain = angle_chain();
        let report = chain.initial_feasibility(&v(&[0.5, 10.0]));
        assert!(report.feasible());
        assert!((report.values[0] - 0.3).abs() < 1e-12 && (report.values[1] - 20.0).abs() < 1e-9);
        let obstacle = obstacle_chain([0.0, 0.0], 1.0);
        let inside = obstacle.initial_feasibility(&v(&[0.2, 0.1, 0.0, 0.0]));
        assert_eq!(inside.first_failing_level, Some(0));
        let on_boundary = obstacle.initial_feasibility(&v(&[1.0, 0.0, 0.0, 0.0]));
        assert!(!on_boundary.feasible());
    }

    #[test]
    fn reciprocal_and_shifted_square_values() {
        let bf = BarrierFunction::new(velocity_chain(), BarrierForm::Reciprocal).unwrap();
        assert_eq!(bf.shape(1.0), (1.0, -1.0));
        let (value, slope) = bf.shape(0.1);
        assert!((value - 10.0).abs() < 1e-12 && (slope + 100.0).abs() < 1e-9);
        let shifted = BarrierFunction::new(angle_chain(), BarrierForm::ShiftedSquare).unwrap();
        assert_eq!(shifted.psi_at_origin(), 80.0);
        assert_eq!(shifted.shape(80.0), (0.0, 0.0));
        assert_eq!(shifted.eval(&v(&[0.0, 0.0])).unwrap().value, 0.0);
    }

    #[test]
    fn barrier_errors_past_the_boundary() {
        let bf = BarrierFunction::new(velocity_chain(), BarrierForm::Reciprocal).unwrap();
        match bf.eval(&v(&[0.0, 15.5])) {
            Err(Error::BoundaryCrossed { label, psi }) => {
                assert_eq!(label, "v");
                assert!((psi + 0.5).abs() < 1e-12);
            }
            other => panic!("expected boundary error, got {other:?}"),
        }
    }

    #[test]
    fn third_level_chain_uses_differences() {
        // position constraint p <= 1 on a triple integrator: relative degree 3
        let drift = Arc::new(|x: &Vector| v(&[x[1], x[2], 0.0])) as crate::dynamics::VectorField;
        let g = Arc::new(|_x: &Vector| Matrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]))
            as crate::dynamics::MatrixField;
        let sys = SystemModel::new("triple", 3, 1, drift, g).unwrap();
        let h = SafetyFunction::quadratic(
            ConstraintShape::Halfspace { normal: vec![1.0, 0.0, 0.0], offset: 1.0 }.to_quadratic(3).unwrap(),
        );
        let chain = build_chain(ConstraintSpec::with_linear_alphas("p", h, 3, 2.0).unwrap(), &sys).unwrap();
        let x = v(&[0.2, 0.3, -0.1]);
        // psi_1 = -v + 2(1-p), psi_2 = -a - 2v + 2 psi_1
        let psi1 = -x[1] + 2.0 * (1.0 - x[0]);
        let psi2 = -x[2] - 2.0 * x[1] + 2.0 * psi1;
        let values = chain.values(&x);
        assert!((values[1] - psi1).abs() < 1e-9);
        assert!((values[2] - psi2).abs() < 1e-6);
        let top = chain.top(&x).gradient;
        assert!((top - v(&[-4.0, -4.0, -1.0])).norm() < 1e-4);
    }

    proptest! {
        #[test]
        fn obstacle_chain_gradients_match_differences(
            px in -4.0..4.0f64, py in -4.0..4.0f64, vx in -1.0..1.0f64, vy in -1.0..1.0f64,
            cx in -2.0..2.0f64, cy in -2.0..2.0f64,
        ) {
            let chain = obstacle_chain([cx, cy], 0.5);
            let x = v(&[px, py, vx, vy]);
            for level in 0..2 {
                let oracle = fd_gradient(|y| chain.values(y)[level], &x);
                let grad = chain.eval(&x)[level].gradient.clone();
                prop_assert!(rel_err(&grad, &oracle) < 1e-5);
            }
        }

        #[test]
        fn pendulum_barrier_gradient_matches_differences(
            th in -1.0..0.75f64, om in -2.0..2.0f64,
        ) {
            let bf = BarrierFunction::new(angle_chain(), BarrierForm::Reciprocal).unwrap();
            let x = v(&[th, om]);
            prop_assume!(bf.chain().top(&x).value > 1.0);
            let oracle = fd_gradient(|y| bf.eval(y).unwrap().value, &x);
            prop_assert!(rel_err(&bf.eval(&x).unwrap().gradient(), &oracle) < 1e-5);
        }

        #[test]
        fn shifted_square_is_nonnegative(psi in 1e-3..1e3f64) {
            let bf = BarrierFunction::new(angle_chain(), BarrierForm::ShiftedSquare).unwrap();
            prop_assert!(bf.shape(psi).0 >= 0.0);
        }
    }
}
