//! Oracles shared by the property suite and the acceptance run.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safeguard_core::barrier::{build_chain, BarrierForm, BarrierFunction, ConstraintShape, ConstraintSpec, SafetyFunction};
use safeguard_core::dynamics::{make_double_integrator, make_pendulum, SystemModel};
use safeguard_core::safeguard::{hamiltonian_excess_from, manipulate, manipulated_similarity, CostWeights};
use safeguard_core::scenarios;
use safeguard_core::simkit::run_scenario;

pub type Check = Result<(), String>;

pub fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

/// Stabilizing solution of `A'P + PA - P B R^-1 B' P + Q = 0` by Kleinman iteration.
///
/// Each step solves the Lyapunov equation `(A - BK)'P + P(A - BK) = -(Q + K'RK)` through its
/// Kronecker form, so nothing from the library is involved.
pub fn riccati(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, k0: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let r_inv = r.clone().try_inverse().expect("R invertible");
    let mut k = k0;
    let mut p = DMatrix::zeros(n, n);
    for _ in 0..60 {
        let acl = a - b * &k;
        let rhs = -(q + k.transpose() * r * &k);
        let eye = DMatrix::<f64>::identity(n, n);
        let lhs = eye.kronecker(&acl.transpose()) + acl.transpose().kronecker(&eye);
        let vec_rhs = DVector::from_column_slice(rhs.as_slice());
        let sol = lhs.lu().solve(&vec_rhs).expect("Lyapunov system solvable");
        let next = DMatrix::from_column_slice(n, n, sol.as_slice());
        let next = (&next + next.transpose()) * 0.5;
        let done = (&next - &p).norm() < 1e-15 * (1.0 + next.norm());
        p = next;
        k = &r_inv * b.transpose() * &p;
        if done {
            break;
        }
    }
    p
}

pub fn riccati_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let r_inv = r.clone().try_inverse().unwrap();
    (a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q).norm()
}

/// Riccati solution for the 1-axis double integrator with `Q = I`, `R = 1`.
pub fn double_integrator_riccati() -> (DMatrix<f64>, f64) {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let q = DMatrix::identity(2, 2);
    let r = DMatrix::identity(1, 1);
    let p = riccati(&a, &b, &q, &r, DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
    let residual = riccati_residual(&a, &b, &q, &r, &p);
    (p, residual)
}

fn central_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = 1e-6 * (1.0 + x[i].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

fn halfspace(normal: &[f64], offset: f64) -> SafetyFunction {
    let shape = ConstraintShape::Halfspace {
        normal: normal.to_vec(),
        offset,
    };
    SafetyFunction::quadratic(shape.to_quadratic(normal.len()).unwrap())
}

pub type Sampler = fn(&mut ChaCha8Rng) -> DVector<f64>;

/// Barriers of the three studies, with a sampler for states strictly inside each chain.
pub fn study_barriers() -> Vec<(BarrierFunction, SystemModel, Sampler)> {
    let pendulum = make_pendulum(2.0, 1.0, 10.0).unwrap();
    let robot = make_double_integrator(2).unwrap();
    let line = make_double_integrator(1).unwrap();
    let angle = ConstraintSpec::with_linear_alphas("theta", halfspace(&[1.0, 0.0], 0.8), 2, 100.0).unwrap();
    let obstacle_shape = ConstraintShape::BallExclusion {
        indices: vec![0, 1],
        center: vec![1.0, 0.5],
        radius: 0.4,
    };
    let obstacle = ConstraintSpec::with_linear_alphas(
        "obstacle",
        SafetyFunction::quadratic(obstacle_shape.to_quadratic(4).unwrap()),
        2,
        1.0,
    )
    .unwrap();
    let area_shape = ConstraintShape::BallInclusion {
        indices: vec![0, 1],
        center: vec![0.0, 0.0],
        radius: 4.0,
    };
    let area = ConstraintSpec::with_linear_alphas(
        "area",
        SafetyFunction::quadratic(area_shape.to_quadratic(4).unwrap()),
        2,
        1.0,
    )
    .unwrap();
    let speed = ConstraintSpec::with_linear_alphas("v", halfspace(&[0.0, 1.0], 15.0), 1, 1.0).unwrap();
    let mk = |spec, sys: &SystemModel, form| BarrierFunction::new(build_chain(spec, sys).unwrap(), form).unwrap();
    vec![
        (mk(angle.clone(), &pendulum, BarrierForm::Reciprocal), pendulum.clone(), |rng| {
            v(&[rng.gen_range(-0.5..0.5), rng.gen_range(-2.0..2.0)])
        }),
        (mk(angle, &pendulum, BarrierForm::ShiftedSquare), pendulum.clone(), |rng| {
            v(&[rng.gen_range(-0.5..0.5), rng.gen_range(-2.0..2.0)])
        }),
        (mk(obstacle, &robot, BarrierForm::Reciprocal), robot.clone(), |rng| {
            v(&[
                rng.gen_range(-3.0..-1.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ])
        }),
        (mk(area, &robot, BarrierForm::Reciprocal), robot, |rng| {
            v(&[
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ])
        }),
        (mk(speed, &line, BarrierForm::Reciprocal), line, |rng| {
            v(&[rng.gen_range(-5.0..5.0), rng.gen_range(-10.0..10.0)])
        }),
    ]
}

/// Analytic barrier gradients against central differences of the barrier value.
pub fn check_barrier_gradients(samples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (bf, _, sample) in study_barriers() {
        let mut taken = 0;
        while taken < samples {
            let x = sample(&mut rng);
            let Ok(eval) = bf.eval(&x) else { continue };
            // keep clear of the boundary so the difference stencil stays inside the set
            if eval.psi < 0.05 {
                continue;
            }
            taken += 1;
            let numeric = central_gradient(|y| bf.eval(y).map(|e| e.value).unwrap_or(f64::NAN), &x);
            let analytic = eval.gradient();
            let rel = (&analytic - &numeric).norm() / analytic.norm().max(1e-3);
            worst = worst.max(rel);
            if !(rel < 1e-5) {
                return Err(format!("{}: relative gradient error {rel:e} at {:?}", bf.label(), x.as_slice()));
            }
        }
    }
    eprintln!("barrier gradients: worst relative error {worst:e}");
    Ok(())
}

/// Direct Hamiltonian of the manipulated policy on the LQR double integrator against the closed form.
pub fn check_hamiltonian_identity(samples: usize, seed: u64) -> Check {
    let (p, _) = double_integrator_riccati();
    let system = make_double_integrator(1).unwrap();
    let weights = CostWeights::new(DMatrix::identity(2, 2), DMatrix::from_element(1, 1, 1.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let x = v(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let lg_barrier = v(&[sign * rng.gen_range(0.2..3.0)]);
        let gain = rng.gen_range(0.5..5.0);
        let mu = rng.gen_range(0.0..0.9);
        let grad_v = &p * &x * 2.0;
        let g = system.input_map(&x);
        let g_grad_v = g.transpose() * &grad_v;
        let kstar = &g_grad_v * -0.5;
        let us = manipulate(&g_grad_v, &lg_barrier, gain, &weights, mu);
        let u = &kstar + &us;
        let direct = grad_v.dot(&(system.drift(&x) + &g * &u)) + x.dot(&x) + u.dot(&u);
        let closed = hamiltonian_excess_from(&g_grad_v, &lg_barrier, gain, &weights, mu);
        let rel = (direct - closed).abs() / closed.abs();
        if !(rel < 1e-8) {
            return Err(format!("Hamiltonian mismatch: direct {direct}, closed form {closed}, rel {rel:e}"));
        }
    }
    Ok(())
}

/// For random two-input geometries: the manipulated Hamiltonian never exceeds the unmanipulated
/// one, and when the gradients conflict the manipulated similarity rises with `mu` and matches
/// its closed form.
pub fn check_manipulation_geometry(configs: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mus: Vec<f64> = (0..50).map(|k| k as f64 / 50.0).collect();
    for c in 0..configs {
        let perf = v(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
        let safe = v(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
        let r = DMatrix::from_diagonal(&v(&[rng.gen_range(0.2..5.0), rng.gen_range(0.2..5.0)]));
        let weights = CostWeights::new(DMatrix::identity(2, 2), r).unwrap();
        let gain = rng.gen_range(0.01..10.0);
        let base = hamiltonian_excess_from(&perf, &safe, gain, &weights, 0.0);
        let p_frame = weights.sqrt_r_inv() * &perf;
        let s_frame = weights.sqrt_r_inv() * &safe;
        let rho = p_frame.dot(&s_frame) / (p_frame.norm() * s_frame.norm());
        let mut previous = f64::NEG_INFINITY;
        for &mu in &mus {
            let excess = hamiltonian_excess_from(&perf, &safe, gain, &weights, mu);
            if excess > base * (1.0 + 1e-12) + 1e-12 {
                return Err(format!("config {c}: excess {excess} at mu={mu} exceeds {base}"));
            }
            if rho < 0.0 {
                let us = manipulate(&perf, &safe, gain, &weights, mu);
                // -us points along the manipulated safety direction once mapped back to the frame
                let back = weights.sqrt_r_inv().clone().try_inverse().unwrap() * (&us * -1.0);
                let measured = p_frame.dot(&back) / (p_frame.norm() * back.norm());
                let formula = manipulated_similarity(rho, mu);
                if (measured - formula).abs() > 1e-9 {
                    return Err(format!("config {c}: similarity {measured} vs closed form {formula} at mu={mu}"));
                }
                if formula < previous - 1e-12 {
                    return Err(format!("config {c}: similarity decreased at mu={mu}"));
                }
                previous = formula;
            }
        }
    }
    Ok(())
}

/// Observer error under a constant fault against `|e(0)| exp(-sigma t)`, within 5%.
pub fn check_observer_decay() -> Check {
    use safeguard_core::observer::FaultObserver;
    use safeguard_core::simkit::rk4_step;
    #[allow(clippy::type_complexity)]
    let cases: Vec<(SystemModel, DMatrix<f64>, DVector<f64>, DVector<f64>, f64)> = vec![
        (
            make_pendulum(2.0, 1.0, 10.0).unwrap(),
            DMatrix::from_row_slice(1, 2, &[0.0, 20.0]),
            v(&[0.2, -0.3]),
            v(&[-5.0]),
            10.0,
        ),
        (
            make_double_integrator(2).unwrap(),
            DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 3.0]),
            v(&[1.0, -1.0, 0.0, 0.5]),
            v(&[0.7, -1.3]),
            3.0,
        ),
    ];
    for (system, gain, x0, fault, sigma) in cases {
        let obs = FaultObserver::new(gain, &system).map_err(|e| e.to_string())?;
        let n = system.state_dim();
        let p = system.input_dim();
        let mut y: Vec<f64> = x0.iter().copied().chain(obs.initial_state(&x0).iter().copied()).collect();
        let e0 = (obs.estimate(&DVector::from_column_slice(&y[n..]), &x0) - &fault).norm();
        let dt = 1e-3;
        let policy = |x: &DVector<f64>| -> DVector<f64> {
            // any bounded feedback works; the error dynamics do not depend on it
            DVector::from_iterator(p, (0..p).map(|j| -2.0 * x[j] - 2.0 * x[n - p + j]))
        };
        for k in 1..=1000 {
            y = rk4_step(
                |_t, s: &[f64], out: &mut [f64]| {
                    let x = DVector::from_column_slice(&s[..n]);
                    let z = DVector::from_column_slice(&s[n..]);
                    let u = policy(&x);
                    let dx = system.dynamics(&x, &(&u + &fault));
                    let dz = obs.derivative(&z, &x, &u, &system);
                    out[..n].copy_from_slice(dx.as_slice());
                    out[n..].copy_from_slice(dz.as_slice());
                    Ok(())
                },
                &y,
                (k - 1) as f64 * dt,
                dt,
            )
            .map_err(|e| e.to_string())?;
            let t = k as f64 * dt;
            let x = DVector::from_column_slice(&y[..n]);
            let err = (obs.estimate(&DVector::from_column_slice(&y[n..]), &x) - &fault).norm();
            let closed = e0 * (-sigma * t).exp();
            if closed > 1e-9 && (err - closed).abs() > 0.05 * closed {
                return Err(format!("{}: error {err:e} vs closed form {closed:e} at t={t}", system.name()));
            }
        }
    }
    Ok(())
}

/// Halving the step on a short nominal pendulum run moves the final state by less than `1e-5` relative.
pub fn check_step_halving() -> Check {
    let mut cfg = scenarios::build("pendulum-horcbf", None).unwrap();
    cfg.horizon = 0.5;
    let coarse = run_scenario(&cfg).map_err(|e| e.to_string())?;
    cfg.dt /= 2.0;
    let fine = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let a = v(&coarse.report.final_state);
    let b = v(&fine.report.final_state);
    let rel = (&a - &b).norm() / b.norm();
    if coarse.failure.is_some() || fine.failure.is_some() || !(rel < 1e-5) {
        return Err(format!("relative change {rel:e}"));
    }
    eprintln!("step halving: relative change {rel:e}");
    Ok(())
}

/// Two runs of the same configuration give bit-identical trajectories and reports.
pub fn check_determinism() -> Check {
    for name in ["example1-ks", "robot-case2-adaptive", "lqr-double-integrator"] {
        let mut cfg = scenarios::build(name, None).unwrap();
        cfg.horizon = cfg.horizon.min(2.0);
        let a = run_scenario(&cfg).map_err(|e| e.to_string())?;
        let b = run_scenario(&cfg).map_err(|e| e.to_string())?;
        let same_rows = a.trajectory.rows.len() == b.trajectory.rows.len()
            && a
                .trajectory
                .rows
                .iter()
                .zip(&b.trajectory.rows)
                .all(|(r, s)| r.iter().zip(s).all(|(x, y)| x.to_bits() == y.to_bits()));
        if !same_rows || a.report != b.report {
            return Err(format!("{name}: reruns differ"));
        }
    }
    Ok(())
}
