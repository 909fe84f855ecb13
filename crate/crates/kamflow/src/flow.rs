//! Reference integration of the non-autonomous Hamiltonian ODE and
//! conjugacy verification between the flow and a solved torus family.
//!
//! The integrator is an explicit Dormand-Prince 5(4) embedded pair with the
//! standard 4th-order continuous extension. A symplectic scheme is not used on
//! purpose: the system is non-autonomous with decaying forcing and all runs
//! are short, so accuracy is governed by the local tolerance and nothing is
//! conserved to exploit. Angles live unwrapped in the internal state and are
//! reduced mod 1 only at output.

use crate::hamiltonian::{ExpandedHamiltonian, HamiltonianModel};
use crate::torus_solver::AsymptoticTorusFamily;
use crate::{KamError, Result};

/// Right-hand side of a first-order system, with the number of leading
/// components that are angle variables (reduced mod 1 at output).
pub struct FlowField<'a> {
    pub n_angles: usize,
    pub f: Box<dyn Fn(f64, &[f64]) -> Result<Vec<f64>> + 'a>,
}

impl<'a> FlowField<'a> {
    /// Full-model field in `(q, p)`; leaves the admissible action domain
    /// with a domain error.
    pub fn from_model(model: &'a HamiltonianModel) -> Self {
        let n = model.n;
        FlowField {
            n_angles: n,
            f: Box::new(move |t, y| {
                let (q, p) = y.split_at(n);
                if p.iter().any(|x| !x.is_finite() || x.abs() > 1e6) {
                    return Err(KamError::DomainError {
                        point: p.to_vec(),
                        context: format!("action left the integration domain at t = {t}"),
                    });
                }
                let (dq, dp) = model.vector_field(q, p, t);
                Ok(dq.into_iter().chain(dp).collect())
            }),
        }
    }

    /// Expanded field in `(theta, I)` around a fixed `p0`.
    pub fn from_expanded(exp: &'a ExpandedHamiltonian) -> Self {
        let n = exp.n();
        FlowField {
            n_angles: n,
            f: Box::new(move |t, y| {
                let (q, i) = y.split_at(n);
                let (dq, di) = exp.eval_xh(q, i, t)?;
                Ok(dq.into_iter().chain(di).collect())
            }),
        }
    }

    /// Unperturbed expanded field (`a = b = 0` dropped).
    pub fn from_expanded_tilde(exp: &'a ExpandedHamiltonian) -> Self {
        let n = exp.n();
        FlowField {
            n_angles: n,
            f: Box::new(move |t, y| {
                let (q, i) = y.split_at(n);
                let (dq, di) = exp.eval_xh_tilde(q, i, t)?;
                Ok(dq.into_iter().chain(di).collect())
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// monotone in the direction of integration
    pub times: Vec<f64>,
    /// angle components reduced to `[0, 1)`
    pub states: Vec<Vec<f64>>,
    pub tol: f64,
    pub accepted: usize,
    pub rejected: usize,
    /// false when the field reported a domain exit before `t1`
    pub complete: bool,
}

// Dormand-Prince 5(4) tableau
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// embedded error weights (5th-order minus 4th-order solution)
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
// continuous-extension weights
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

struct DenseSegment {
    t0: f64,
    h: f64,
    rcont: [Vec<f64>; 5],
}

impl DenseSegment {
    fn eval(&self, t: f64) -> Vec<f64> {
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        self.rcont[0]
            .iter()
            .zip(&self.rcont[1])
            .zip(&self.rcont[2])
            .zip(&self.rcont[3])
            .zip(&self.rcont[4])
            .map(|((((&r0, &r1), &r2), &r3), &r4)| {
                r0 + s * (r1 + s1 * (r2 + s * (r3 + s1 * r4)))
            })
            .collect()
    }
}

fn reduce_output(y: &[f64], n_angles: usize) -> Vec<f64> {
    y.iter()
        .enumerate()
        .map(|(i, &x)| if i < n_angles { x.rem_euclid(1.0) } else { x })
        .collect()
}

/// Integrate `y' = f(t, y)` from `t0` to `t1` (either direction). When
/// `output_times` is given, states are sampled there by the 4th-order
/// continuous extension; otherwise the accepted step points are returned.
/// A domain exit yields the partial trajectory with `complete = false`.
pub fn integrate(
    field: &FlowField,
    state0: &[f64],
    t0: f64,
    t1: f64,
    tol: f64,
    output_times: Option<&[f64]>,
) -> Result<Trajectory> {
    if !(tol > 0.0) {
        return Err(KamError::InvalidArgument("tolerance must be positive".into()));
    }
    if let Some(out) = output_times {
        let dir = (t1 - t0).signum();
        for w in out.windows(2) {
            if (w[1] - w[0]) * dir <= 0.0 {
                return Err(KamError::InvalidArgument(
                    "output times must be monotone in the integration direction".into(),
                ));
            }
        }
    }
    let dim = state0.len();
    let dir: f64 = if t1 >= t0 { 1.0 } else { -1.0 };
    let mut t = t0;
    let mut y = state0.to_vec();
    let mut traj = Trajectory {
        times: vec![t0],
        states: vec![reduce_output(&y, field.n_angles)],
        tol,
        accepted: 0,
        rejected: 0,
        complete: true,
    };
    let mut pending: std::collections::VecDeque<f64> = output_times
        .map(|o| o.iter().copied().filter(|&x| (x - t0) * dir > 0.0).collect())
        .unwrap_or_default();
    if output_times.is_some() {
        traj.times.clear();
        traj.states.clear();
    }
    if t0 == t1 {
        if output_times.is_none() {
            return Ok(traj);
        }
    }
    let mut k1 = (field.f)(t, &y)?;
    let mut h = dir * (0.01 * (t1 - t0).abs()).clamp(1e-8, 0.1);
    let mut ks: Vec<Vec<f64>> = vec![vec![0.0; dim]; 7];
    loop {
        if (t - t1) * dir >= 0.0 {
            break;
        }
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }
        if h.abs() < 1e-14 * t.abs().max(1.0) {
            return Err(KamError::Stiffness { t });
        }
        ks[0].copy_from_slice(&k1);
        let mut failed_domain = None;
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in ks.iter().enumerate().take(s) {
                let a = A[s][j];
                if a != 0.0 {
                    for (yv, kv) in ys.iter_mut().zip(kj) {
                        *yv += h * a * kv;
                    }
                }
            }
            match (field.f)(t + C[s] * h, &ys) {
                Ok(v) => ks[s] = v,
                Err(KamError::DomainError { context, .. }) => {
                    failed_domain = Some(context);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if failed_domain.is_some() {
            // shrink towards the boundary like a rejected step; give up only
            // when the step underflows, so the partial trajectory ends close
            // to the domain boundary
            if h.abs() > 1e-12 * t.abs().max(1.0) {
                traj.rejected += 1;
                h *= 0.5;
                continue;
            }
            traj.complete = false;
            return Ok(traj);
        }
        // 5th-order solution (stage 7 coefficients) and embedded error
        let mut y_new = y.clone();
        let mut err: f64 = 0.0;
        for i in 0..dim {
            let mut e = 0.0;
            for (s, ksv) in ks.iter().enumerate() {
                e += E[s] * ksv[i];
                if s < 6 {
                    y_new[i] += h * A[6][s] * ksv[i];
                }
            }
            let sc = tol + tol * y[i].abs().max(y_new[i].abs());
            let ei = h * e / sc;
            err += ei * ei;
        }
        let err = (err / dim as f64).sqrt();
        if err <= 1.0 {
            // FSAL: stage 7 is f at (t+h, y_new)
            let k7 = match (field.f)(t + h, &y_new) {
                Ok(v) => v,
                Err(KamError::DomainError { .. }) => {
                    if h.abs() > 1e-12 * t.abs().max(1.0) {
                        traj.rejected += 1;
                        h *= 0.5;
                        continue;
                    }
                    traj.complete = false;
                    return Ok(traj);
                }
                Err(e) => return Err(e),
            };
            ks[6] = k7.clone();
            // continuous extension for this step
            let seg = {
                let mut rcont: [Vec<f64>; 5] = [
                    y.clone(),
                    vec![0.0; dim],
                    vec![0.0; dim],
                    vec![0.0; dim],
                    vec![0.0; dim],
                ];
                for i in 0..dim {
                    let dy = y_new[i] - y[i];
                    rcont[1][i] = dy;
                    rcont[2][i] = h * ks[0][i] - dy;
                    rcont[3][i] = dy - h * ks[6][i] - rcont[2][i];
                    let mut acc = 0.0;
                    for (s, ksv) in ks.iter().enumerate() {
                        acc += D[s] * ksv[i];
                    }
                    rcont[4][i] = h * acc;
                }
                DenseSegment { t0: t, h, rcont }
            };
            let t_new = t + h;
            while let Some(&tq) = pending.front() {
                if (tq - t_new) * dir <= 1e-13 * t_new.abs().max(1.0) {
                    let ys = seg.eval(tq);
                    traj.times.push(tq);
                    traj.states.push(reduce_output(&ys, field.n_angles));
                    pending.pop_front();
                } else {
                    break;
                }
            }
            t = t_new;
            y = y_new;
            k1 = k7;
            traj.accepted += 1;
            if output_times.is_none() {
                traj.times.push(t);
                traj.states.push(reduce_output(&y, field.n_angles));
            }
            let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
            h *= fac;
        } else {
            traj.rejected += 1;
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
    }
    // remaining requested outputs exactly at t1 (within rounding)
    while let Some(tq) = pending.pop_front() {
        if (tq - t1).abs() <= 1e-10 * t1.abs().max(1.0) {
            traj.times.push(tq);
            traj.states.push(reduce_output(&y, field.n_angles));
        }
    }
    Ok(traj)
}

/// Conjugacy between the flow of the expanded field and the solved embedding:
/// integrate from `psi^0(q)` and compare against `psi^t(q + omega t)` at 50
/// checkpoints up to `t_end` (negative for the minus branch).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConjugacyReport {
    pub max_deviation: f64,
    pub budget: f64,
    pub pass: bool,
    pub t_end: f64,
}

pub fn conjugacy_check(
    family: &AsymptoticTorusFamily,
    idx: usize,
    q: &[f64],
    t_end: f64,
    tol: f64,
) -> Result<ConjugacyReport> {
    let exp = &family.expansions[idx];
    let n = exp.n();
    let omega = &family.omegas[idx];
    let (q0, p0) = family.psi_at(idx, q, 0.0)?;
    let y0: Vec<f64> = q0
        .iter()
        .copied()
        .chain(p0.iter().zip(&family.param_grid[idx]).map(|(a, b)| a - b))
        .collect();
    let checkpoints: Vec<f64> = (1..=50).map(|i| t_end * i as f64 / 50.0).collect();
    let field = FlowField::from_expanded(exp);
    let traj = integrate(&field, &y0, 0.0, t_end, tol, Some(&checkpoints))?;
    if !traj.complete {
        return Err(KamError::DomainError {
            point: y0,
            context: "flow left the expansion domain during the conjugacy check".into(),
        });
    }
    let mut max_dev: f64 = 0.0;
    for (t, state) in traj.times.iter().zip(&traj.states) {
        let shifted: Vec<f64> = q.iter().zip(omega).map(|(a, w)| a + w * t).collect();
        let (qt, pt) = family.psi_at(idx, &shifted, *t)?;
        for a in 0..n {
            let dq = (state[a] - qt[a].rem_euclid(1.0)).rem_euclid(1.0);
            let dq = dq.min(1.0 - dq);
            let dp = state[n + a] - (pt[a] - family.param_grid[idx][a]);
            max_dev = max_dev.max(dq).max(dp.abs());
        }
    }
    let diag = &family.diagnostics[idx];
    let residual = diag
        .residuals
        .last()
        .copied()
        .unwrap_or(0.0)
        .max(diag.transport_defect);
    let budget = residual * t_end.abs() * 10.0 + tol;
    Ok(ConjugacyReport {
        max_deviation: max_dev,
        budget,
        pass: max_dev <= budget,
        t_end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay_norms::{Branch, TimeGrid};
    use crate::hamiltonian::{DecayProfile, Polynomial, SeparableMode};
    use crate::torus_fourier::TorusFun;
    use crate::torus_solver::{solve_family, SolverOptions};
    use std::f64::consts::TAU;

    fn free_rotation_model() -> HamiltonianModel {
        HamiltonianModel {
            n: 1,
            h: Polynomial::univariate(&[0.0, 0.0, 0.5]).unwrap(),
            remainder: None,
            modes: vec![],
            l: 2.0,
            eps: 0.0,
            upsilon: 10.0,
        }
    }

    fn reference_model(eps: f64) -> HamiltonianModel {
        let mut m = free_rotation_model();
        m.eps = eps;
        m.modes = vec![SeparableMode {
            angle: TorusFun::from_fn(1, 1, 1, |q| vec![(TAU * q[0]).cos()]),
            action: Polynomial::univariate(&[0.0, 1.0]).unwrap(),
            decay: DecayProfile::Poly { exponent: 4.0 },
            amplitude: eps,
        }];
        m
    }

    fn pendulum_field<'a>() -> FlowField<'a> {
        // H = p^2/2 + cos(2 pi q)/(2 pi)^2
        FlowField {
            n_angles: 1,
            f: Box::new(|_t, y| Ok(vec![y[1], (TAU * y[0]).sin() / TAU])),
        }
    }

    fn pendulum_energy(q: f64, p: f64) -> f64 {
        0.5 * p * p + (TAU * q).cos() / (TAU * TAU)
    }

    #[test]
    fn free_rotation_exact() {
        let model = free_rotation_model();
        let field = FlowField::from_model(&model);
        let traj = integrate(&field, &[0.2, 0.5], 0.0, 10.0, 1e-10, None).unwrap();
        let last = traj.states.last().unwrap();
        assert!((last[0] - 0.2).abs() < 1e-9, "{}", last[0]);
        assert!((last[1] - 0.5).abs() < 1e-9);
        assert!(traj.complete);
    }

    #[test]
    fn dense_output_free_rotation() {
        let model = free_rotation_model();
        let field = FlowField::from_model(&model);
        let out = [1.3, 3.7, 7.4];
        let traj = integrate(&field, &[0.2, 0.5], 0.0, 10.0, 1e-10, Some(&out)).unwrap();
        assert_eq!(traj.times, out.to_vec());
        for (t, s) in traj.times.iter().zip(&traj.states) {
            assert!((s[0] - (0.2 + 0.5 * t).rem_euclid(1.0)).abs() < 1e-9);
            assert!((s[1] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn pendulum_energy_drift() {
        let field = pendulum_field();
        let traj = integrate(&field, &[0.2, 0.3], 0.0, 100.0, 1e-10, None).unwrap();
        let e0 = pendulum_energy(0.2, 0.3);
        let mut worst: f64 = 0.0;
        for s in &traj.states {
            worst = worst.max((pendulum_energy(s[0], s[1]) - e0).abs());
        }
        assert!(worst <= 1e-7, "drift {worst:.3e}");
    }

    #[test]
    fn time_reversal_round_trip() {
        let field = pendulum_field();
        let tol = 1e-10;
        let fwd = integrate(&field, &[0.2, 0.3], 0.0, 10.0, tol, None).unwrap();
        let end = fwd.states.last().unwrap().clone();
        let back = integrate(&field, &end, 10.0, 0.0, tol, None).unwrap();
        let s = back.states.last().unwrap();
        let dq = (s[0] - 0.2).rem_euclid(1.0);
        let dq = dq.min(1.0 - dq);
        assert!(dq < 10.0 * tol && (s[1] - 0.3).abs() < 10.0 * tol);
    }

    #[test]
    fn flow_composition() {
        let field = pendulum_field();
        let tol = 1e-10;
        let half = integrate(&field, &[0.1, 0.4], 0.0, 5.0, tol, None).unwrap();
        let mid = half.states.last().unwrap().clone();
        let second = integrate(&field, &mid, 5.0, 10.0, tol, None).unwrap();
        let full = integrate(&field, &[0.1, 0.4], 0.0, 10.0, tol, None).unwrap();
        let a = second.states.last().unwrap();
        let b = full.states.last().unwrap();
        let dq = (a[0] - b[0]).rem_euclid(1.0);
        let dq = dq.min(1.0 - dq);
        assert!(dq < 10.0 * tol && (a[1] - b[1]).abs() < 10.0 * tol);
    }

    #[test]
    fn unperturbed_expanded_is_rigid_rotation() {
        let model = reference_model(1e-3);
        let exp = model.expand_at(&[0.3]).unwrap();
        let field = FlowField::from_expanded_tilde(&exp);
        let tol = 1e-11;
        let traj = integrate(&field, &[0.15, 0.0], 0.0, 12.0, tol, None).unwrap();
        let omega = exp.omega[0];
        for (t, s) in traj.times.iter().zip(&traj.states) {
            let dq = (s[0] - (0.15 + omega * t).rem_euclid(1.0)).rem_euclid(1.0);
            let dq = dq.min(1.0 - dq);
            assert!(dq < 1e-9, "t={t} dq={dq:.3e}");
            assert!(s[1].abs() < 1e-12);
        }
    }

    #[test]
    fn domain_exit_gives_partial_trajectory() {
        let field = FlowField {
            n_angles: 0,
            f: Box::new(|_t, y| {
                if y[0] > 2.0 {
                    Err(KamError::DomainError {
                        point: y.to_vec(),
                        context: "out".into(),
                    })
                } else {
                    Ok(vec![1.0])
                }
            }),
        };
        let traj = integrate(&field, &[0.0], 0.0, 10.0, 1e-8, None).unwrap();
        assert!(!traj.complete);
        // field exits at y = 2 (t = 2); the partial trajectory ends there
        let t_last = *traj.times.last().unwrap();
        assert!(t_last < 10.0 && (t_last - 2.0).abs() < 1e-6, "{t_last}");
    }

    #[test]
    fn singular_field_reports_stiffness() {
        // y' = y/(1 - t): solution blows up at t = 1
        let field = FlowField {
            n_angles: 0,
            f: Box::new(|t, y| Ok(vec![y[0] / (1.0 - t)])),
        };
        let err = integrate(&field, &[1.0], 0.0, 2.0, 1e-8, None).unwrap_err();
        assert!(matches!(err, KamError::Stiffness { .. }), "{err:?}");
    }

    fn solved_family(eps: f64, branch: Branch) -> AsymptoticTorusFamily {
        let model = reference_model(eps);
        let grid = TimeGrid::geometric(branch, 0.05, 1.05, 50.0).unwrap();
        solve_family(&model, &[vec![0.3]], &grid, &SolverOptions::default()).unwrap()
    }

    #[test]
    fn conjugacy_exact_for_unperturbed() {
        let fam = solved_family(0.0, Branch::Plus);
        let rep = conjugacy_check(&fam, 0, &[0.4], 20.0, 1e-10).unwrap();
        assert!(rep.max_deviation <= 1e-8, "{:.3e}", rep.max_deviation);
        assert!(rep.pass);
    }

    #[test]
    fn conjugacy_reference_model_both_branches() {
        for branch in [Branch::Plus, Branch::Minus] {
            let fam = solved_family(1e-3, branch);
            let t_end = match branch {
                Branch::Plus => 20.0,
                Branch::Minus => -20.0,
            };
            let rep = conjugacy_check(&fam, 0, &[0.4], t_end, 1e-10).unwrap();
            assert!(
                rep.max_deviation <= 1e-5,
                "{branch:?}: {:.3e}",
                rep.max_deviation
            );
        }
    }

    #[test]
    fn conjugacy_defect_grows_at_most_linearly() {
        let fam = solved_family(1e-3, Branch::Plus);
        let dev = |t_end: f64| {
            conjugacy_check(&fam, 0, &[0.4], t_end, 1e-10)
                .unwrap()
                .max_deviation
        };
        let d5 = dev(5.0);
        let d10 = dev(10.0);
        let d20 = dev(20.0);
        let floor = 1e-10;
        assert!(d10 <= 6.0 * (d5 + floor), "d5={d5:.3e} d10={d10:.3e}");
        assert!(d20 <= 6.0 * (d10 + floor), "d10={d10:.3e} d20={d20:.3e}");
    }
}
