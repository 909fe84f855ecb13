//! Gluing of positive and negative asymptotic torus families into
//! biasymptotically quasiperiodic orbits.
//!
//! The time-zero embeddings are certified near-identity maps, so their
//! inversion uses a damped fixed-point iteration (Jacobian-free on purpose:
//! the Lipschitz, extension-based mode is not differentiable). A glued orbit
//! follows the positive family for `t >= 0` and the negative family for
//! `t <= 0`; both branches give the target at `t = 0` by construction.

use crate::decay_norms::{measured_lipschitz, McShaneExtension, TimeGrid};
use crate::hamiltonian::HamiltonianModel;
use crate::torus_solver::{
    interp_family, solve_family, AsymptoticTorusFamily, SolverOptions,
};
use crate::{KamError, Result};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

/// Evaluation strategy for the time-zero embedding `phi0(q, p0)`.
pub enum TimeZeroMap<'a> {
    /// Solve the torus family on demand at each queried parameter (smooth
    /// mode; the frequency is exact at the solved point).
    Resolve {
        model: &'a HamiltonianModel,
        grid: TimeGrid,
        opts: SolverOptions,
        cache: RefCell<HashMap<Vec<u64>, Rc<AsymptoticTorusFamily>>>,
    },
    /// Lipschitz extension of the solved corrections across the parameter
    /// grid (near-integrable mode; frequencies stay grid values).
    Extended {
        family: &'a AsymptoticTorusFamily,
        lip: f64,
    },
    /// Arbitrary map, mainly for contraction tests and synthetic studies.
    Custom {
        n: usize,
        f: Box<dyn Fn(&[f64], &[f64]) -> (Vec<f64>, Vec<f64>) + 'a>,
    },
}

impl<'a> TimeZeroMap<'a> {
    pub fn resolve(model: &'a HamiltonianModel, grid: TimeGrid, opts: SolverOptions) -> Self {
        TimeZeroMap::Resolve {
            model,
            grid,
            opts,
            cache: RefCell::new(HashMap::new()),
        }
    }

    /// Extension mode with the Lipschitz constant measured on the grid
    /// (inflated by 50% so the extension certificate holds strictly).
    pub fn extended(family: &'a AsymptoticTorusFamily) -> Self {
        let est = crate::torus_solver::theorem_estimates(family, 1.0)
            .map(|r| r.deviation_lip.unwrap_or(0.0))
            .unwrap_or(0.0);
        TimeZeroMap::Extended {
            family,
            lip: est * 1.5 + 1e-9,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            TimeZeroMap::Resolve { model, .. } => model.n,
            TimeZeroMap::Extended { family, .. } => family.param_grid[0].len(),
            TimeZeroMap::Custom { n, .. } => *n,
        }
    }

    fn family_at(&self, p0: &[f64]) -> Result<Rc<AsymptoticTorusFamily>> {
        match self {
            TimeZeroMap::Resolve {
                model,
                grid,
                opts,
                cache,
            } => {
                let key: Vec<u64> = p0.iter().map(|x| x.to_bits()).collect();
                if let Some(f) = cache.borrow().get(&key) {
                    return Ok(f.clone());
                }
                let fam = Rc::new(solve_family(model, &[p0.to_vec()], grid, opts)?);
                cache.borrow_mut().insert(key, fam.clone());
                Ok(fam)
            }
            _ => Err(KamError::InvalidArgument(
                "family_at is only available in resolve mode".into(),
            )),
        }
    }

    /// `phi0(q, p0) = (q + u0, p0 + v0)`, angle component unwrapped.
    pub fn phi0(&self, q: &[f64], p0: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            TimeZeroMap::Resolve { model, .. } => {
                if !model.admissible(p0) {
                    return Err(KamError::NotCovered {
                        target: p0.to_vec(),
                        margin: 0.0,
                    });
                }
                let fam = self.family_at(p0)?;
                let (u0, v0) = fam.time_zero(0);
                let uv = u0.eval(q);
                let vv = v0.eval(q);
                Ok((
                    q.iter().zip(&uv).map(|(a, b)| a + b).collect(),
                    p0.iter().zip(&vv).map(|(a, b)| a + b).collect(),
                ))
            }
            TimeZeroMap::Extended { family, lip } => {
                let n = self.n();
                let mut qq = q.to_vec();
                let mut pp = p0.to_vec();
                for a in 0..n {
                    let us: Vec<(Vec<f64>, f64)> = family
                        .param_grid
                        .iter()
                        .enumerate()
                        .map(|(i, pg)| {
                            (pg.clone(), family.corrections[i].u.slices[0].eval(q)[a])
                        })
                        .collect();
                    let vs: Vec<(Vec<f64>, f64)> = family
                        .param_grid
                        .iter()
                        .enumerate()
                        .map(|(i, pg)| {
                            (pg.clone(), family.corrections[i].v.slices[0].eval(q)[a])
                        })
                        .collect();
                    let lu = lip.max(measured_lipschitz(&us) + 1e-12);
                    let lv = lip.max(measured_lipschitz(&vs) + 1e-12);
                    qq[a] += McShaneExtension::new(&us, lu)?.eval(p0);
                    pp[a] += McShaneExtension::new(&vs, lv)?.eval(p0);
                }
                Ok((qq, pp))
            }
            TimeZeroMap::Custom { f, .. } => Ok(f(q, p0)),
        }
    }
}

fn wrap_half(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    if r >= 0.5 {
        r - 1.0
    } else {
        r
    }
}

/// Invert the time-zero embedding by the damped fixed-point iteration
/// `x <- x - (phi0(x) - target)`, starting at the target itself.
/// `delta` is the uncovered boundary margin used in error reports (the
/// certified image margin is `2 delta` in the action radius).
pub fn invert_time_zero(
    map: &TimeZeroMap,
    target_q: &[f64],
    target_p: &[f64],
    delta: f64,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    invert_time_zero_from(map, target_q, target_p, target_q, target_p, delta)
}

/// Same as [`invert_time_zero`] with an explicit starting point.
pub fn invert_time_zero_from(
    map: &TimeZeroMap,
    target_q: &[f64],
    target_p: &[f64],
    start_q: &[f64],
    start_p: &[f64],
    delta: f64,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    invert_time_zero_with(map, target_q, target_p, start_q, start_p, delta, 1e-10)
}

/// Fully parameterized inversion: explicit start and convergence tolerance.
pub fn invert_time_zero_with(
    map: &TimeZeroMap,
    target_q: &[f64],
    target_p: &[f64],
    start_q: &[f64],
    start_p: &[f64],
    delta: f64,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let not_covered = || KamError::NotCovered {
        target: target_q.iter().chain(target_p).copied().collect(),
        margin: delta,
    };
    if target_p.iter().any(|x| x.abs() > 1.0 - 2.0 * delta) {
        return Err(not_covered());
    }
    let mut q = start_q.to_vec();
    let mut p = start_p.to_vec();
    let mut history = Vec::new();
    for iter in 0..100 {
        let (fq, fp) = match map.phi0(&q, &p) {
            Ok(v) => v,
            Err(KamError::NotCovered { .. }) | Err(KamError::DomainError { .. }) => {
                return Err(not_covered())
            }
            Err(e) => return Err(e),
        };
        let rq: Vec<f64> = fq
            .iter()
            .zip(target_q)
            .map(|(a, b)| wrap_half(a - b))
            .collect();
        let rp: Vec<f64> = fp.iter().zip(target_p).map(|(a, b)| a - b).collect();
        let res = rq
            .iter()
            .chain(&rp)
            .fold(0.0f64, |m, x| m.max(x.abs()));
        if res <= tol {
            return Ok((q.iter().map(|x| x.rem_euclid(1.0)).collect(), p, iter));
        }
        history.push(res);
        for (x, r) in q.iter_mut().zip(&rq) {
            *x -= r;
        }
        for (x, r) in p.iter_mut().zip(&rp) {
            *x -= r;
        }
        if p.iter().any(|x| x.abs() > 1.0) {
            return Err(not_covered());
        }
    }
    Err(KamError::NonConvergence {
        max_iter: 100,
        residual: *history.last().unwrap_or(&f64::NAN),
        history,
    })
}

enum BranchRepr<'a> {
    Solved(Rc<AsymptoticTorusFamily>),
    Extended {
        family: &'a AsymptoticTorusFamily,
        lip: f64,
    },
}

/// One glued side: preimage, asymptotic frequency, and the torus data used
/// to evaluate it.
pub struct GluedBranch<'a> {
    pub q_pre: Vec<f64>,
    pub p0: Vec<f64>,
    pub omega: Vec<f64>,
    pub residual: f64,
    repr: BranchRepr<'a>,
}

impl<'a> GluedBranch<'a> {
    /// `psi^t(q_pre + omega t)` as a full-coordinate state `(q mod 1, p)`.
    pub fn eval(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let shifted: Vec<f64> = self
            .q_pre
            .iter()
            .zip(&self.omega)
            .map(|(a, w)| a + w * t)
            .collect();
        match &self.repr {
            BranchRepr::Solved(fam) => {
                let (qq, pp) = fam.psi_at(0, &shifted, t)?;
                Ok((qq.into_iter().map(|x| x.rem_euclid(1.0)).collect(), pp))
            }
            BranchRepr::Extended { family, lip } => {
                let n = self.p0.len();
                let mut qq = shifted.clone();
                let mut pp = self.p0.clone();
                for a in 0..n {
                    let us: Result<Vec<(Vec<f64>, f64)>> = family
                        .param_grid
                        .iter()
                        .enumerate()
                        .map(|(i, pg)| {
                            Ok((
                                pg.clone(),
                                interp_family(&family.corrections[i].u, t.abs(), &shifted)?[a],
                            ))
                        })
                        .collect();
                    let vs: Result<Vec<(Vec<f64>, f64)>> = family
                        .param_grid
                        .iter()
                        .enumerate()
                        .map(|(i, pg)| {
                            Ok((
                                pg.clone(),
                                interp_family(&family.corrections[i].v, t.abs(), &shifted)?[a],
                            ))
                        })
                        .collect();
                    let us = us?;
                    let vs = vs?;
                    let lu = lip.max(measured_lipschitz(&us) + 1e-12);
                    let lv = lip.max(measured_lipschitz(&vs) + 1e-12);
                    qq[a] += McShaneExtension::new(&us, lu)?.eval(&self.p0);
                    pp[a] += McShaneExtension::new(&vs, lv)?.eval(&self.p0);
                }
                Ok((qq.into_iter().map(|x| x.rem_euclid(1.0)).collect(), pp))
            }
        }
    }
}

/// A biasymptotically quasiperiodic orbit through a time-zero target.
pub struct BiasymptoticOrbit<'a> {
    pub target_q: Vec<f64>,
    pub target_p: Vec<f64>,
    pub plus: GluedBranch<'a>,
    pub minus: GluedBranch<'a>,
}

impl<'a> BiasymptoticOrbit<'a> {
    /// `g(t)`: positive branch for `t >= 0`, negative branch for `t < 0`.
    pub fn eval(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if t >= 0.0 {
            self.plus.eval(t)
        } else {
            self.minus.eval(t)
        }
    }
}

fn glue_branch<'a>(
    map: &TimeZeroMap<'a>,
    target_q: &[f64],
    target_p: &[f64],
    delta: f64,
    name: &'static str,
) -> Result<GluedBranch<'a>> {
    let (q_pre, p0, _) = invert_time_zero(map, target_q, target_p, delta)
        .map_err(|e| KamError::GlueFailed {
            branch: name,
            source: Box::new(e),
        })?;
    match map {
        TimeZeroMap::Resolve { .. } => {
            let fam = map.family_at(&p0)?;
            let diag = &fam.diagnostics[0];
            let residual = diag
                .residuals
                .last()
                .copied()
                .unwrap_or(0.0)
                .max(diag.transport_defect);
            Ok(GluedBranch {
                q_pre,
                p0,
                omega: fam.omegas[0].clone(),
                residual,
                repr: BranchRepr::Solved(fam),
            })
        }
        TimeZeroMap::Extended { family, lip } => {
            // frequencies are grid values, no interpolation: take the
            // nearest parameter point
            let nearest = family
                .param_grid
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(&p0).map(|(x, y)| (x - y).abs()).sum();
                    let db: f64 = b.iter().zip(&p0).map(|(x, y)| (x - y).abs()).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            let residual = family
                .diagnostics
                .iter()
                .map(|d| {
                    d.residuals
                        .last()
                        .copied()
                        .unwrap_or(0.0)
                        .max(d.transport_defect)
                })
                .fold(0.0f64, f64::max);
            Ok(GluedBranch {
                q_pre,
                p0,
                omega: family.omegas[nearest].clone(),
                residual,
                repr: BranchRepr::Extended { family, lip: *lip },
            })
        }
        TimeZeroMap::Custom { .. } => Err(KamError::InvalidArgument(
            "custom maps carry no torus data to glue".into(),
        )),
    }
}

/// Glue the two one-sided families through a common time-zero target.
pub fn glue<'a>(
    plus: &TimeZeroMap<'a>,
    minus: &TimeZeroMap<'a>,
    target_q: &[f64],
    target_p: &[f64],
    delta: f64,
) -> Result<BiasymptoticOrbit<'a>> {
    let pb = glue_branch(plus, target_q, target_p, delta, "plus")?;
    let mb = glue_branch(minus, target_q, target_p, delta, "minus")?;
    Ok(BiasymptoticOrbit {
        target_q: target_q.to_vec(),
        target_p: target_p.to_vec(),
        plus: pb,
        minus: mb,
    })
}

/// Deviation of a full state from the rigid rotation of one branch.
fn rotation_deviation(
    state_q: &[f64],
    state_p: &[f64],
    branch: &GluedBranch,
    t: f64,
) -> f64 {
    let mut dev: f64 = 0.0;
    for a in 0..branch.p0.len() {
        let rot = (branch.q_pre[a] + branch.omega[a] * t).rem_euclid(1.0);
        dev = dev.max(wrap_half(state_q[a] - rot).abs());
        dev = dev.max((state_p[a] - branch.p0[a]).abs());
    }
    dev
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BranchDiagnostics {
    pub times: Vec<f64>,
    pub torus_deviation: Vec<f64>,
    pub flow_deviation: Vec<f64>,
    /// log-log slope of the torus-based deviation series
    pub slope: f64,
    /// max |flow deviation - torus deviation| over the checkpoints
    pub agreement: f64,
    pub budget: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceReport {
    pub plus: BranchDiagnostics,
    pub minus: BranchDiagnostics,
}

fn fit_loglog_slope(times: &[f64], devs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(devs)
        .filter(|(t, d)| **d > 1e-13 && **t > 0.0)
        .map(|(t, d)| (t.ln(), d.ln()))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let nf = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

fn branch_diagnostics(
    orbit: &BiasymptoticOrbit,
    model: &HamiltonianModel,
    t_max: f64,
    ode_tol: f64,
    sign: f64,
) -> Result<BranchDiagnostics> {
    let branch = if sign > 0.0 { &orbit.plus } else { &orbit.minus };
    let n = model.n;
    let count = 25usize;
    let t_lo: f64 = 0.2;
    let times: Vec<f64> = (0..count)
        .map(|i| sign * t_lo * (t_max / t_lo).powf(i as f64 / (count - 1) as f64))
        .collect();
    let mut torus_dev = Vec::with_capacity(count);
    for &t in &times {
        let (qq, pp) = orbit.eval(t)?;
        torus_dev.push(rotation_deviation(&qq, &pp, branch, t));
    }
    // independent check: integrate the full model from g(0)
    let (q0, p0full) = orbit.eval(0.0)?;
    let y0: Vec<f64> = q0.iter().chain(&p0full).copied().collect();
    let field = crate::flow::FlowField::from_model(model);
    let traj = crate::flow::integrate(&field, &y0, 0.0, sign * t_max, ode_tol, Some(&times))?;
    let mut flow_dev = vec![f64::NAN; count];
    for (t, state) in traj.times.iter().zip(&traj.states) {
        let idx = times
            .iter()
            .position(|x| (x - t).abs() < 1e-9 * t.abs().max(1.0))
            .unwrap();
        flow_dev[idx] = rotation_deviation(&state[..n], &state[n..], branch, *t);
    }
    let agreement = torus_dev
        .iter()
        .zip(&flow_dev)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let slope = fit_loglog_slope(
        &times.iter().map(|t| t.abs()).collect::<Vec<_>>(),
        &torus_dev,
    );
    Ok(BranchDiagnostics {
        times,
        torus_deviation: torus_dev,
        flow_deviation: flow_dev,
        slope,
        agreement,
        budget: branch.residual * t_max * 10.0 + ode_tol,
    })
}

/// Torus-based and flow-based deviation series on both branches, with
/// fitted decay slopes and their cross-method agreement.
pub fn convergence_diagnostics(
    orbit: &BiasymptoticOrbit,
    model: &HamiltonianModel,
    t_max: f64,
    ode_tol: f64,
) -> Result<ConvergenceReport> {
    Ok(ConvergenceReport {
        plus: branch_diagnostics(orbit, model, t_max, ode_tol, 1.0)?,
        minus: branch_diagnostics(orbit, model, t_max, ode_tol, -1.0)?,
    })
}

/// Declared good parameter set: `[-1, 1]` minus open exclusion intervals.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParamDomain {
    pub exclusions: Vec<(f64, f64)>,
}

impl ParamDomain {
    pub fn full() -> Self {
        Self { exclusions: vec![] }
    }

    pub fn contains(&self, p: f64) -> bool {
        p.abs() <= 1.0 && !self.exclusions.iter().any(|&(a, b)| p > a && p < b)
    }

    /// Lebesgue measure of the excluded part of `[-1, 1]`.
    pub fn mu(&self) -> f64 {
        self.exclusions
            .iter()
            .map(|&(a, b)| (b.min(1.0) - a.max(-1.0)).max(0.0))
            .sum()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CoverageSample {
    pub q: f64,
    pub p: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CoverageReport {
    pub samples: usize,
    pub failures: usize,
    pub fraction: f64,
    pub half_width: f64,
    /// `4 mu / Leb(T x B_1)`
    pub bound: f64,
    pub pass: bool,
    pub sample_log: Vec<CoverageSample>,
}

/// Monte Carlo coverage of the glued set over uniform targets in
/// `T^1 x [-1, 1]` (near-integrable mode; the parameter domain carries the
/// declared exclusions).
pub fn coverage_estimate(
    plus: &TimeZeroMap,
    minus: &TimeZeroMap,
    domain: &ParamDomain,
    delta: f64,
    samples: usize,
    seed: u64,
) -> Result<CoverageReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    let mut log = Vec::with_capacity(samples);
    for _ in 0..samples {
        let q = rng.gen_range(0.0..1.0);
        let p = rng.gen_range(-1.0..1.0);
        let ok = [plus, minus].iter().all(|map| {
            match invert_time_zero(map, &[q], &[p], delta) {
                Ok((_, p0, _)) => domain.contains(p0[0]),
                Err(_) => false,
            }
        });
        if !ok {
            failures += 1;
        }
        log.push(CoverageSample { q, p, covered: ok });
    }
    let fraction = if samples > 0 {
        failures as f64 / samples as f64
    } else {
        0.0
    };
    let half_width = if samples > 0 {
        1.96 * (fraction * (1.0 - fraction) / samples as f64).sqrt()
    } else {
        0.0
    };
    let bound = 4.0 * domain.mu() / 2.0;
    Ok(CoverageReport {
        samples,
        failures,
        fraction,
        half_width,
        bound,
        pass: fraction <= bound + 3.0 * half_width,
        sample_log: log,
    })
}
