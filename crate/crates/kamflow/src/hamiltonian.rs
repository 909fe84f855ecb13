//! Closed-form Hamiltonian models `H = h(p) + R(p) + f(q,p,t)`, their Taylor
//! expansion around an action point `p0` into `(e, omega, a, b, m, mbar)`,
//! vector-field evaluation, and checking of the smallness/decay hypotheses.
//!
//! Perturbations are finite sums of separable modes `amp * G(q) * P(p) * w(t)`
//! so every time slice of `a`, `b` and their angle derivatives is an exact
//! trigonometric polynomial and every time tail is exact.

use serde::{Deserialize, Serialize};

use crate::decay_norms::{
    family_norm, weighted_norm, ParamFamily, TailModel, TimeFamily, TimeGrid,
};
use crate::torus_fourier::{CollocationGrid, TorusFun};
use crate::{KamError, Result};

/// 16-point Gauss-Legendre nodes/weights on [-1, 1] (positive half; mirror
/// for the negative nodes). Exact for polynomial degree <= 31.
const GL16: [(f64, f64); 8] = [
    (0.0950125098376374, 0.1894506104550685),
    (0.2816035507792589, 0.1826034150449236),
    (0.4580167776572274, 0.1691565193950025),
    (0.6178762444026438, 0.1495959888165767),
    (0.7554044083550030, 0.1246289712555339),
    (0.8656312023878318, 0.0951585116824928),
    (0.9445750230732326, 0.0622535239386479),
    (0.9894009349916499, 0.0271524594117541),
];

/// Integrate `f` over [a, b] with 16-point Gauss-Legendre.
fn gl16(a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for &(x, w) in &GL16 {
        acc += w * (f(mid + half * x) + f(mid - half * x));
    }
    acc * half
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coeff: f64,
    /// one exponent per action variable
    pub powers: Vec<u32>,
}

/// Polynomial in the action variables, degree capped at 6 so that the
/// tau-quadrature in the expansion remainder is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub nvars: usize,
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn new(nvars: usize, terms: Vec<Monomial>) -> Result<Self> {
        for t in &terms {
            if t.powers.len() != nvars {
                return Err(KamError::DimensionMismatch(format!(
                    "monomial has {} exponents, expected {nvars}",
                    t.powers.len()
                )));
            }
            let deg: u32 = t.powers.iter().sum();
            if deg > 6 {
                return Err(KamError::InvalidArgument(format!(
                    "monomial degree {deg} exceeds the cap 6"
                )));
            }
        }
        Ok(Self { nvars, terms })
    }

    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: vec![],
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        Self {
            nvars,
            terms: vec![Monomial {
                coeff: c,
                powers: vec![0; nvars],
            }],
        }
    }

    /// Convenience for one variable: coefficients by ascending power.
    pub fn univariate(coeffs: &[f64]) -> Result<Self> {
        Self::new(
            1,
            coeffs
                .iter()
                .enumerate()
                .filter(|(_, &c)| c != 0.0)
                .map(|(i, &c)| Monomial {
                    coeff: c,
                    powers: vec![i as u32],
                })
                .collect(),
        )
    }

    pub fn eval(&self, p: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.coeff
                    * t.powers
                        .iter()
                        .zip(p)
                        .map(|(&e, &x)| x.powi(e as i32))
                        .product::<f64>()
            })
            .sum()
    }

    /// Exact symbolic partial derivative (coefficient times integer power).
    pub fn partial(&self, var: usize) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|t| t.powers[var] > 0)
            .map(|t| {
                let mut powers = t.powers.clone();
                let e = powers[var];
                powers[var] = e - 1;
                Monomial {
                    coeff: t.coeff * e as f64,
                    powers,
                }
            })
            .collect();
        Self {
            nvars: self.nvars,
            terms,
        }
    }

    pub fn gradient(&self) -> Vec<Polynomial> {
        (0..self.nvars).map(|v| self.partial(v)).collect()
    }

    pub fn hessian(&self) -> Vec<Vec<Polynomial>> {
        (0..self.nvars)
            .map(|a| (0..self.nvars).map(|b| self.partial(a).partial(b)).collect())
            .collect()
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|t| t.powers.iter().sum())
            .max()
            .unwrap_or(0)
    }
}

/// Even-in-time decay envelope of a separable mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DecayProfile {
    /// `1 / (1 + |t|^exponent)`
    Poly { exponent: f64 },
    /// `exp(-rate |t|)`
    Exp { rate: f64 },
}

impl DecayProfile {
    pub fn value(&self, t: f64) -> f64 {
        let t = t.abs();
        match *self {
            DecayProfile::Poly { exponent } => 1.0 / (1.0 + t.powf(exponent)),
            DecayProfile::Exp { rate } => (-rate * t).exp(),
        }
    }

    fn tail_model(&self, scale: f64) -> TailModel {
        match *self {
            DecayProfile::Poly { exponent } => TailModel::Poly { exponent, scale },
            DecayProfile::Exp { rate } => TailModel::Exp { rate, scale },
        }
    }
}

/// One separable perturbation term `amplitude * angle(q) * action(p) * decay(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparableMode {
    pub angle: TorusFun,
    pub action: Polynomial,
    pub decay: DecayProfile,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center_1d: f64,
    pub radius: f64,
}

impl Ball {
    pub fn contains(&self, x: f64) -> bool {
        (x - self.center_1d).abs() <= self.radius
    }
}

/// `C^2` bump `A * max(0, 1 - |p - c|^2 / r^2)^3` supported on a ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderTerm {
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
}

impl RemainderTerm {
    fn s(&self, p: &[f64]) -> f64 {
        let d2: f64 = p
            .iter()
            .zip(&self.center)
            .map(|(x, c)| (x - c) * (x - c))
            .sum();
        (1.0 - d2 / (self.radius * self.radius)).max(0.0)
    }

    pub fn eval(&self, p: &[f64]) -> f64 {
        let s = self.s(p);
        self.amplitude * s * s * s
    }

    pub fn grad(&self, p: &[f64]) -> Vec<f64> {
        let s = self.s(p);
        if s <= 0.0 {
            return vec![0.0; p.len()];
        }
        let r2 = self.radius * self.radius;
        p.iter()
            .zip(&self.center)
            .map(|(x, c)| self.amplitude * 3.0 * s * s * (-2.0 * (x - c) / r2))
            .collect()
    }

    pub fn hess(&self, p: &[f64]) -> Vec<Vec<f64>> {
        let n = p.len();
        let s = self.s(p);
        let mut out = vec![vec![0.0; n]; n];
        if s <= 0.0 {
            return out;
        }
        let r2 = self.radius * self.radius;
        let sa: Vec<f64> = p
            .iter()
            .zip(&self.center)
            .map(|(x, c)| -2.0 * (x - c) / r2)
            .collect();
        for a in 0..n {
            for b in 0..n {
                let s_ab = if a == b { -2.0 / r2 } else { 0.0 };
                out[a][b] = self.amplitude * (6.0 * s * sa[a] * sa[b] + 3.0 * s * s * s_ab);
            }
        }
        out
    }

    /// Crossing parameters of the segment `p0 + tau*i` with the support
    /// sphere, restricted to (0, 1). Used to split the tau-quadrature at the
    /// points where the bump's polynomial branch changes.
    fn segment_breakpoints(&self, p0: &[f64], i: &[f64]) -> Vec<f64> {
        let d0: Vec<f64> = p0.iter().zip(&self.center).map(|(x, c)| x - c).collect();
        let a: f64 = i.iter().map(|x| x * x).sum();
        if a == 0.0 {
            return vec![];
        }
        let b: f64 = 2.0 * d0.iter().zip(i).map(|(d, x)| d * x).sum::<f64>();
        let c: f64 = d0.iter().map(|d| d * d).sum::<f64>() - self.radius * self.radius;
        let disc = b * b - 4.0 * a * c;
        if disc <= 0.0 {
            return vec![];
        }
        let sq = disc.sqrt();
        [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
            .into_iter()
            .filter(|t| (1e-14..1.0 - 1e-14).contains(t))
            .collect()
    }
}

/// Remainder `R(p)` with the flat good set on which it vanishes to first
/// order by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Remainder {
    pub terms: Vec<RemainderTerm>,
    /// finite union of closed 1d balls (intervals) per axis-symmetric model;
    /// membership means every coordinate of p lies in some interval
    pub good_set: Vec<Ball>,
}

impl Remainder {
    pub fn eval(&self, p: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(p)).sum()
    }

    pub fn grad(&self, p: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; p.len()];
        for t in &self.terms {
            for (gi, d) in g.iter_mut().zip(t.grad(p)) {
                *gi += d;
            }
        }
        g
    }

    pub fn hess(&self, p: &[f64]) -> Vec<Vec<f64>> {
        let n = p.len();
        let mut h = vec![vec![0.0; n]; n];
        for t in &self.terms {
            let th = t.hess(p);
            for a in 0..n {
                for b in 0..n {
                    h[a][b] += th[a][b];
                }
            }
        }
        h
    }

    pub fn good_set_contains(&self, p: &[f64]) -> bool {
        p.iter()
            .all(|&x| self.good_set.iter().any(|ball| ball.contains(x)))
    }

    /// Verify flatness on the good set by sampling: R and its gradient must
    /// vanish (< 1e-12) at 10^3 deterministic sample points.
    pub fn verify_flat(&self, dim: usize) -> Result<()> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(71);
        if self.good_set.is_empty() {
            return Err(KamError::InvalidArgument("empty good set".into()));
        }
        for _ in 0..1000 {
            let p: Vec<f64> = (0..dim)
                .map(|_| {
                    let ball = &self.good_set[rng.gen_range(0..self.good_set.len())];
                    ball.center_1d + rng.gen_range(-1.0..1.0) * ball.radius
                })
                .collect();
            let v = self.eval(&p).abs();
            let g = self
                .grad(&p)
                .iter()
                .fold(0.0f64, |acc, x| acc.max(x.abs()));
            if v >= 1e-12 || g >= 1e-12 {
                return Err(KamError::DomainError {
                    point: p,
                    context: format!(
                        "remainder not flat on good set: |R| = {v:.3e}, |grad R| = {g:.3e}"
                    ),
                });
            }
        }
        Ok(())
    }
}

/// `H(q, p, t) = h(p) + R(p) + sum_j amp_j G_j(q) P_j(p) w_j(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianModel {
    pub n: usize,
    pub h: Polynomial,
    pub remainder: Option<Remainder>,
    pub modes: Vec<SeparableMode>,
    /// decay exponent of the hypothesis block
    pub l: f64,
    /// smallness budget
    pub eps: f64,
    /// Hessian bound
    pub upsilon: f64,
}

impl HamiltonianModel {
    pub fn validate(&self) -> Result<()> {
        if self.h.nvars != self.n {
            return Err(KamError::DimensionMismatch(
                "h has wrong number of action variables".into(),
            ));
        }
        for m in &self.modes {
            if m.angle.dim_domain != self.n || m.angle.dim_range != 1 {
                return Err(KamError::DimensionMismatch(
                    "mode angle factor must map T^n -> R".into(),
                ));
            }
            if m.action.nvars != self.n {
                return Err(KamError::DimensionMismatch(
                    "mode action factor has wrong arity".into(),
                ));
            }
        }
        if let Some(r) = &self.remainder {
            r.verify_flat(self.n)?;
        }
        Ok(())
    }

    pub fn h_eval(&self, p: &[f64]) -> f64 {
        self.h.eval(p) + self.remainder.as_ref().map_or(0.0, |r| r.eval(p))
    }

    pub fn f_eval(&self, q: &[f64], p: &[f64], t: f64) -> f64 {
        self.modes
            .iter()
            .map(|m| m.amplitude * m.angle.eval(q)[0] * m.action.eval(p) * m.decay.value(t))
            .sum()
    }

    pub fn full_eval(&self, q: &[f64], p: &[f64], t: f64) -> f64 {
        self.h_eval(p) + self.f_eval(q, p, t)
    }

    /// Hessian in p of the full Hamiltonian.
    pub fn hess_p(&self, q: &[f64], p: &[f64], t: f64) -> Vec<Vec<f64>> {
        let mut h: Vec<Vec<f64>> = self
            .h
            .hessian()
            .iter()
            .map(|row| row.iter().map(|poly| poly.eval(p)).collect())
            .collect();
        if let Some(r) = &self.remainder {
            let rh = r.hess(p);
            for a in 0..self.n {
                for b in 0..self.n {
                    h[a][b] += rh[a][b];
                }
            }
        }
        for m in &self.modes {
            let factor = m.amplitude * m.angle.eval(q)[0] * m.decay.value(t);
            let ah = m.action.hessian();
            for a in 0..self.n {
                for b in 0..self.n {
                    h[a][b] += factor * ah[a][b].eval(p);
                }
            }
        }
        h
    }

    /// Symplectic vector field of the full model in (q, p) coordinates.
    pub fn vector_field(&self, q: &[f64], p: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
        let mut dq: Vec<f64> = self.h.gradient().iter().map(|g| g.eval(p)).collect();
        if let Some(r) = &self.remainder {
            for (d, g) in dq.iter_mut().zip(r.grad(p)) {
                *d += g;
            }
        }
        let mut dp = vec![0.0; self.n];
        for m in &self.modes {
            let w = m.decay.value(t);
            let gq = m.angle.eval(q)[0];
            let pv = m.action.eval(p);
            for (v, ag) in dq.iter_mut().zip(m.action.gradient()) {
                *v += m.amplitude * gq * ag.eval(p) * w;
            }
            for axis in 0..self.n {
                let dg = m.angle.differentiate(axis).unwrap().eval(q)[0];
                dp[axis] -= m.amplitude * dg * pv * w;
            }
        }
        (dq, dp)
    }

    /// Expansion point admissibility: the closed unit action ball without a
    /// remainder (the integrable part is polynomial, hence entire), or the
    /// declared good set with one.
    pub fn admissible(&self, p0: &[f64]) -> bool {
        match &self.remainder {
            None => p0.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1.0 + 1e-9,
            Some(r) => r.good_set_contains(p0),
        }
    }

    /// Taylor-expand around p0 into `(e, omega, a, b, m, mbar)`.
    pub fn expand_at(&self, p0: &[f64]) -> Result<ExpandedHamiltonian> {
        if p0.len() != self.n {
            return Err(KamError::DimensionMismatch("p0 arity".into()));
        }
        if !self.admissible(p0) {
            return Err(KamError::DomainError {
                point: p0.to_vec(),
                context: "expansion point outside admissible ball / good set".into(),
            });
        }
        let e = self.h_eval(p0);
        let mut omega: Vec<f64> = self.h.gradient().iter().map(|g| g.eval(p0)).collect();
        if let Some(r) = &self.remainder {
            // zero on the good set, but keep the formula honest
            for (o, g) in omega.iter_mut().zip(r.grad(p0)) {
                *o += g;
            }
        }
        let dtheta_angle: Vec<Vec<TorusFun>> = self
            .modes
            .iter()
            .map(|m| {
                (0..self.n)
                    .map(|axis| m.angle.differentiate(axis).unwrap())
                    .collect()
            })
            .collect();
        let i_ball = if self.remainder.is_some() { 0.1 } else { 0.25 };
        Ok(ExpandedHamiltonian {
            model: self.clone(),
            p0: p0.to_vec(),
            e,
            omega,
            i_ball,
            dtheta_angle,
        })
    }
}

/// The expansion `H(theta, p0 + I, t) = e + omega.I + a + b.I + I^T m I`.
#[derive(Debug, Clone)]
pub struct ExpandedHamiltonian {
    pub model: HamiltonianModel,
    pub p0: Vec<f64>,
    pub e: f64,
    pub omega: Vec<f64>,
    /// radius of the I-ball on which the expansion is used
    pub i_ball: f64,
    dtheta_angle: Vec<Vec<TorusFun>>,
}

impl ExpandedHamiltonian {
    pub fn n(&self) -> usize {
        self.model.n
    }

    /// `a(q, t) = f(q, p0, t)`.
    pub fn a_at(&self, q: &[f64], t: f64) -> f64 {
        self.model.f_eval(q, &self.p0, t)
    }

    /// `b(q, t) = d_p f(q, p0, t)`.
    pub fn b_at(&self, q: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for m in &self.model.modes {
            let factor = m.amplitude * m.angle.eval(q)[0] * m.decay.value(t);
            for (o, g) in out.iter_mut().zip(m.action.gradient()) {
                *o += factor * g.eval(&self.p0);
            }
        }
        out
    }

    /// Angle gradient of `a`.
    pub fn dtheta_a_at(&self, q: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for (m, dth) in self.model.modes.iter().zip(&self.dtheta_angle) {
            let factor = m.amplitude * m.action.eval(&self.p0) * m.decay.value(t);
            for (o, d) in out.iter_mut().zip(dth) {
                *o += factor * d.eval(q)[0];
            }
        }
        out
    }

    /// `[axis][component]` angle gradient of `b`.
    pub fn dtheta_b_at(&self, q: &[f64], t: f64) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut out = vec![vec![0.0; n]; n];
        for (m, dth) in self.model.modes.iter().zip(&self.dtheta_angle) {
            let grad_p: Vec<f64> = m.action.gradient().iter().map(|g| g.eval(&self.p0)).collect();
            let w = m.amplitude * m.decay.value(t);
            for (axis, d) in dth.iter().enumerate() {
                let dv = d.eval(q)[0];
                for comp in 0..n {
                    out[axis][comp] += w * dv * grad_p[comp];
                }
            }
        }
        out
    }

    /// tau-integral `int_0^1 wt(tau) HessH(q, p0 + tau I, t) dtau` with the
    /// quadrature split at bump-support crossings so each piece is a
    /// polynomial in tau and the 16-point rule is exact.
    fn tau_integral(&self, q: &[f64], i: &[f64], t: f64, wt: impl Fn(f64) -> f64) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut cuts = vec![0.0, 1.0];
        if let Some(r) = &self.model.remainder {
            for term in &r.terms {
                cuts.extend(term.segment_breakpoints(&self.p0, i));
            }
        }
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
        let mut out = vec![vec![0.0; n]; n];
        for a in 0..n {
            for b in 0..n {
                let mut acc = 0.0;
                for w in cuts.windows(2) {
                    acc += gl16(w[0], w[1], |tau| {
                        let p: Vec<f64> =
                            self.p0.iter().zip(i).map(|(p0, ii)| p0 + tau * ii).collect();
                        wt(tau) * self.model.hess_p(q, &p, t)[a][b]
                    });
                }
                out[a][b] = acc;
            }
        }
        out
    }

    /// `m(theta, I, t) = int_0^1 (1 - tau) HessH(theta, p0 + tau I, t) dtau`.
    pub fn m_at(&self, q: &[f64], i: &[f64], t: f64) -> Vec<Vec<f64>> {
        self.tau_integral(q, i, t, |tau| 1.0 - tau)
    }

    /// `mbar(theta, I, t) = int_0^1 HessH(theta, p0 + tau I, t) dtau`,
    /// so that `d_I (I^T m I) = mbar I`.
    pub fn mbar_at(&self, q: &[f64], i: &[f64], t: f64) -> Vec<Vec<f64>> {
        self.tau_integral(q, i, t, |_| 1.0)
    }

    /// `mbar0(theta, t) = HessH(theta, p0, t)`.
    pub fn mbar0_at(&self, q: &[f64], t: f64) -> Vec<Vec<f64>> {
        self.model.hess_p(q, &self.p0, t)
    }

    /// Angle gradient of `m`: `[axis][a][b]`. Only the separable modes
    /// depend on the angles, so no support splitting is needed.
    pub fn dtheta_m_at(&self, q: &[f64], i: &[f64], t: f64) -> Vec<Vec<Vec<f64>>> {
        let n = self.n();
        let mut out = vec![vec![vec![0.0; n]; n]; n];
        for (m, dth) in self.model.modes.iter().zip(&self.dtheta_angle) {
            let ah = m.action.hessian();
            // int_0^1 (1-tau) P''(p0 + tau I) dtau per entry
            let mut hint = vec![vec![0.0; n]; n];
            for a in 0..n {
                for b in 0..n {
                    hint[a][b] = gl16(0.0, 1.0, |tau| {
                        let p: Vec<f64> =
                            self.p0.iter().zip(i).map(|(p0, ii)| p0 + tau * ii).collect();
                        (1.0 - tau) * ah[a][b].eval(&p)
                    });
                }
            }
            let w = m.amplitude * m.decay.value(t);
            for (axis, d) in dth.iter().enumerate() {
                let dv = w * d.eval(q)[0];
                for a in 0..n {
                    for b in 0..n {
                        out[axis][a][b] += dv * hint[a][b];
                    }
                }
            }
        }
        out
    }

    fn check_i_ball(&self, i: &[f64]) -> Result<()> {
        let norm = i.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > self.i_ball {
            return Err(KamError::DomainError {
                point: i.to_vec(),
                context: format!("|I| = {norm:.4} outside expansion ball {:.4}", self.i_ball),
            });
        }
        Ok(())
    }

    /// Vector field of the expanded Hamiltonian:
    /// `dtheta = omega + b + mbar I`, `dI = -d_theta a - d_theta b . I - d_theta m . I^2`.
    pub fn eval_xh(&self, q: &[f64], i: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_i_ball(i)?;
        let n = self.n();
        let mut dq = self.b_at(q, t);
        let mbar = self.mbar_at(q, i, t);
        for a in 0..n {
            dq[a] += self.omega[a];
            for b in 0..n {
                dq[a] += mbar[a][b] * i[b];
            }
        }
        let da = self.dtheta_a_at(q, t);
        let db = self.dtheta_b_at(q, t);
        let dm = self.dtheta_m_at(q, i, t);
        let mut dp = vec![0.0; n];
        for axis in 0..n {
            dp[axis] = -da[axis];
            for a in 0..n {
                dp[axis] -= db[axis][a] * i[a];
                for b in 0..n {
                    dp[axis] -= dm[axis][a][b] * i[a] * i[b];
                }
            }
        }
        Ok((dq, dp))
    }

    /// Vector field of the truncation `h~ = e + omega.I + I^T m I` (drop a, b).
    /// At I = 0 this is exactly `(omega, 0)`: the invariant-torus property.
    pub fn eval_xh_tilde(&self, q: &[f64], i: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_i_ball(i)?;
        let n = self.n();
        let mbar = self.mbar_at(q, i, t);
        let mut dq = self.omega.clone();
        for a in 0..n {
            for b in 0..n {
                dq[a] += mbar[a][b] * i[b];
            }
        }
        let dm = self.dtheta_m_at(q, i, t);
        let mut dp = vec![0.0; n];
        for axis in 0..n {
            for a in 0..n {
                for b in 0..n {
                    dp[axis] -= dm[axis][a][b] * i[a] * i[b];
                }
            }
        }
        Ok((dq, dp))
    }

    fn max_angle_order(&self) -> usize {
        self.model
            .modes
            .iter()
            .map(|m| m.angle.order)
            .max()
            .unwrap_or(0)
    }

    fn mode_tail(&self, scale_of: impl Fn(&SeparableMode) -> f64) -> TailModel {
        let grid = CollocationGrid::new(self.n(), 32);
        let mut tail: Option<TailModel> = None;
        for m in &self.model.modes {
            let scale = m.amplitude.abs() * m.angle.sup_norm(&grid) * scale_of(m);
            let t = m.decay.tail_model(scale);
            tail = Some(match tail {
                None => t,
                Some(prev) => crate::decay_norms::worst_tail(&prev, &t),
            });
        }
        tail.unwrap_or(TailModel::Poly {
            exponent: f64::INFINITY,
            scale: 0.0,
        })
    }

    /// `a` sampled on a one-sided time grid.
    pub fn a_family(&self, grid: TimeGrid) -> TimeFamily {
        let order = self.max_angle_order();
        let tail = self.mode_tail(|m| m.action.eval(&self.p0).abs());
        let n = self.n();
        TimeFamily::from_fn(grid, n, 1, order, tail, |q, t| vec![self.a_at(q, t)])
    }

    /// `b` sampled on a one-sided time grid.
    pub fn b_family(&self, grid: TimeGrid) -> TimeFamily {
        let order = self.max_angle_order();
        let p0 = self.p0.clone();
        let tail = self.mode_tail(|m| {
            m.action
                .gradient()
                .iter()
                .map(|g| g.eval(&p0).abs())
                .fold(0.0, f64::max)
        });
        let n = self.n();
        TimeFamily::from_fn(grid, n, n, order, tail, |q, t| self.b_at(q, t))
    }
}

/// One checked hypothesis line of the smallness/decay block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetCondition {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetReport {
    pub conditions: Vec<BudgetCondition>,
    pub pass: bool,
    /// continuity of mixed derivatives is enforced at depth 2, the weaker of
    /// the two hypothesis blocks; noted so reports are explicit about it
    pub continuity_note: String,
}

impl HamiltonianModel {
    fn budget_params(&self) -> Vec<Vec<f64>> {
        match &self.remainder {
            Some(r) => r
                .good_set
                .iter()
                .map(|b| vec![b.center_1d; self.n])
                .collect(),
            None => {
                let mut out = vec![vec![0.0; self.n]];
                for axis in 0..self.n {
                    for s in [-0.5, 0.5] {
                        let mut p = vec![0.0; self.n];
                        p[axis] = s;
                        out.push(p);
                    }
                }
                out
            }
        }
    }

    fn perturbation_families(
        &self,
        params: &[Vec<f64>],
        grid: &TimeGrid,
        slice: impl Fn(&Vec<f64>, &[f64], f64) -> Vec<f64>,
        dim_range: usize,
        tail: TailModel,
    ) -> Vec<TimeFamily> {
        let order = self
            .modes
            .iter()
            .map(|m| m.angle.order)
            .max()
            .unwrap_or(0);
        params
            .iter()
            .map(|p| {
                TimeFamily::from_fn(grid.clone(), self.n, dim_range, order, tail, |q, t| {
                    slice(p, q, t)
                })
            })
            .collect()
    }

    /// Check the smallness/decay hypotheses: the three norm combinations
    /// against eps, the Hessian bound against Upsilon, and the per-mode
    /// decay-exponent pattern.
    pub fn check_decay_budget(&self, sigma: f64) -> Result<BudgetReport> {
        let tgrid = TimeGrid::geometric(crate::decay_norms::Branch::Plus, 0.1, 1.2, 60.0)?;
        let cgrid = CollocationGrid::new(self.n, 64);
        let params = self.budget_params();
        let n = self.n;

        let min_exp = self
            .modes
            .iter()
            .map(|m| match m.decay {
                DecayProfile::Poly { exponent } => exponent,
                DecayProfile::Exp { .. } => f64::INFINITY,
            })
            .fold(f64::INFINITY, f64::min);
        let tail = TailModel::Poly {
            exponent: min_exp,
            scale: 1.0,
        };

        // d_p f and d_p^2 f in closed form for the analytic dp slices
        let dpf = |p: &Vec<f64>, q: &[f64], t: f64| -> Vec<f64> {
            let mut out = vec![0.0; n];
            for m in &self.modes {
                let fac = m.amplitude * m.angle.eval(q)[0] * m.decay.value(t);
                for (o, g) in out.iter_mut().zip(m.action.gradient()) {
                    *o += fac * g.eval(p);
                }
            }
            out
        };
        let dp2f = |p: &Vec<f64>, q: &[f64], t: f64| -> Vec<f64> {
            let mut out = vec![0.0; n * n];
            for m in &self.modes {
                let fac = m.amplitude * m.angle.eval(q)[0] * m.decay.value(t);
                let hh = m.action.hessian();
                for a in 0..n {
                    for b in 0..n {
                        out[a * n + b] += fac * hh[a][b].eval(p);
                    }
                }
            }
            out
        };

        let f_fams = self.perturbation_families(
            &params,
            &tgrid,
            |p, q, t| vec![self.f_eval(q, p, t)],
            1,
            tail,
        );
        let f_dp = self.perturbation_families(&params, &tgrid, &dpf, n, tail);
        let pf_f = ParamFamily::new(params.clone(), f_fams, Some(f_dp.clone()))?;
        let cond1 = weighted_norm(&pf_f, sigma + 2.0, 0.0, &cgrid)?.total;

        // d_q f family: differentiate the slices spectrally; dp slices are
        // the q-derivatives of the analytic d_p f slices
        let dqf_fams: Vec<TimeFamily> = pf_f
            .families
            .iter()
            .map(|fam| {
                fam.map_slices(|_, s| {
                    let mut parts = Vec::new();
                    for axis in 0..n {
                        parts.push(s.differentiate(axis).unwrap());
                    }
                    stack_range(&parts)
                })
            })
            .collect();
        let dqf_dp: Vec<TimeFamily> = f_dp
            .iter()
            .map(|fam| {
                fam.map_slices(|_, s| {
                    let mut parts = Vec::new();
                    for axis in 0..n {
                        parts.push(s.differentiate(axis).unwrap());
                    }
                    stack_range(&parts)
                })
            })
            .collect();
        let pf_dqf = ParamFamily::new(params.clone(), dqf_fams, Some(dqf_dp))?;
        let cond2 = family_norm(&pf_dqf, sigma, 1, self.l + 2.0, &cgrid)?;

        let dpf_dp = self.perturbation_families(&params, &tgrid, &dp2f, n * n, tail);
        let pf_dpf = ParamFamily::new(params.clone(), f_dp, Some(dpf_dp))?;
        let cond3 = family_norm(&pf_dpf, sigma, 2, self.l + 1.0, &cgrid)?;

        // Hessian bound surrogate: sup over sampled (p, t) of the C^{sigma+2}
        // surrogate in the angles of each Hessian entry
        let mut hess_sup: f64 = 0.0;
        for p in &params {
            for &t in tgrid.nodes().iter().take(12) {
                for a in 0..n {
                    for b in 0..n {
                        let entry = TorusFun::from_fn(
                            n,
                            1,
                            self.modes.iter().map(|m| m.angle.order).max().unwrap_or(0),
                            |q| vec![self.hess_p(q, p, t)[a][b]],
                        );
                        hess_sup = hess_sup.max(entry.holder_surrogate(sigma + 2.0, &cgrid));
                    }
                }
            }
        }

        let mut conditions = vec![
            BudgetCondition {
                name: "smallness: |f|_{s+2,0} + ||d_q f||_{s,1,l+2} + ||d_p f||_{s,2,l+1} < eps"
                    .into(),
                value: cond1 + cond2 + cond3,
                bound: self.eps,
                pass: cond1 + cond2 + cond3 < self.eps,
            },
            BudgetCondition {
                name: "hessian bound: sup_t |d_p^2 H|_{C^{s+2}} <= Upsilon".into(),
                value: hess_sup,
                bound: self.upsilon,
                pass: hess_sup <= self.upsilon,
            },
        ];
        for (j, m) in self.modes.iter().enumerate() {
            let (value, pass) = match m.decay {
                DecayProfile::Poly { exponent } => (exponent, exponent >= self.l + 2.0),
                DecayProfile::Exp { rate } => (rate, true),
            };
            conditions.push(BudgetCondition {
                name: format!("mode {j}: decay exponent >= l + 2"),
                value,
                bound: self.l + 2.0,
                pass,
            });
        }
        let pass = conditions.iter().all(|c| c.pass);
        Ok(BudgetReport {
            conditions,
            pass,
            continuity_note:
                "mixed-derivative continuity enforced at depth 2 (the weaker hypothesis variant)"
                    .into(),
        })
    }
}

/// Stack scalar-range functions of identical shape into one vector-valued one.
fn stack_range(parts: &[TorusFun]) -> TorusFun {
    let first = &parts[0];
    let mut out = TorusFun::zero(first.dim_domain, parts.len() * first.dim_range, first.order);
    let mut modes: Vec<Vec<i64>> = Vec::new();
    first.for_each_mode(|k, _| modes.push(k.to_vec()));
    for k in &modes {
        let dst = out.coeff_mut(k);
        let mut idx = 0;
        for p in parts {
            for &c in p.coeff(k) {
                dst[idx] = c;
                idx += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn cos_mode(n_order: usize) -> TorusFun {
        // cos(2 pi q) as a TorusFun
        TorusFun::from_fn(1, 1, n_order, |q| vec![(TAU * q[0]).cos()])
    }

    /// reference model: h = p^2/2, f = eps cos(2 pi q) p / (1 + t^4)
    fn reference_model(eps: f64) -> HamiltonianModel {
        HamiltonianModel {
            n: 1,
            h: Polynomial::univariate(&[0.0, 0.0, 0.5]).unwrap(),
            remainder: None,
            modes: vec![SeparableMode {
                angle: cos_mode(2),
                action: Polynomial::univariate(&[0.0, 1.0]).unwrap(),
                decay: DecayProfile::Poly { exponent: 4.0 },
                amplitude: eps,
            }],
            l: 2.0,
            eps,
            upsilon: 10.0,
        }
    }

    fn bumped_model() -> HamiltonianModel {
        HamiltonianModel {
            n: 1,
            h: Polynomial::univariate(&[0.0, 0.0, 0.5, 0.1]).unwrap(),
            remainder: Some(Remainder {
                terms: vec![RemainderTerm {
                    center: vec![0.45],
                    radius: 0.1,
                    amplitude: 0.3,
                }],
                good_set: vec![
                    Ball {
                        center_1d: 0.1,
                        radius: 0.2,
                    },
                    Ball {
                        center_1d: 0.7,
                        radius: 0.05,
                    },
                ],
            }),
            modes: vec![SeparableMode {
                angle: cos_mode(2),
                action: Polynomial::univariate(&[0.0, 0.5, 0.25]).unwrap(),
                decay: DecayProfile::Poly { exponent: 4.0 },
                amplitude: 1e-3,
            }],
            l: 2.0,
            eps: 1e-2,
            upsilon: 10.0,
        }
    }

    #[test]
    fn polynomial_eval_and_exact_gradient() {
        // h = 0.5 p^2 + 0.1 p^3 -> h' = p + 0.3 p^2 exactly
        let h = Polynomial::univariate(&[0.0, 0.0, 0.5, 0.1]).unwrap();
        let d = h.partial(0);
        for p in [-0.7, 0.0, 0.31, 1.5] {
            assert_eq!(d.eval(&[p]), p + 0.3 * p * p);
        }
    }

    #[test]
    fn polynomial_rejects_high_degree() {
        assert!(Polynomial::univariate(&[0.0; 8]).is_ok()); // zeros dropped
        let r = Polynomial::new(
            1,
            vec![Monomial {
                coeff: 1.0,
                powers: vec![7],
            }],
        );
        assert!(matches!(r, Err(KamError::InvalidArgument(_))));
    }

    #[test]
    fn expand_unperturbed_quadratic() {
        // h = p^2/2, f = 0, p0 = 0.3: e = 0.045, omega = 0.3, m = 1/2, mbar = 1
        let mut model = reference_model(0.0);
        model.modes.clear();
        let exp = model.expand_at(&[0.3]).unwrap();
        assert!((exp.e - 0.045).abs() < 1e-15);
        assert!((exp.omega[0] - 0.3).abs() < 1e-15);
        let m = exp.m_at(&[0.2], &[0.1], 1.0);
        assert!((m[0][0] - 0.5).abs() < 1e-13);
        let mb = exp.mbar_at(&[0.2], &[0.1], 1.0);
        assert!((mb[0][0] - 1.0).abs() < 1e-13);
    }

    #[test]
    fn expand_reference_a_and_b() {
        // a = 0.3 eps cos(2 pi q)/(1+t^4), b = eps cos(2 pi q)/(1+t^4)
        let eps = 1e-3;
        let model = reference_model(eps);
        let exp = model.expand_at(&[0.3]).unwrap();
        for (q, t) in [(0.0, 0.0), (0.13, 1.7), (0.77, 5.0)] {
            let env = 1.0 / (1.0 + t * t * t * t);
            let c = (TAU * q).cos();
            assert!((exp.a_at(&[q], t) - 0.3 * eps * c * env).abs() < 1e-15);
            assert!((exp.b_at(&[q], t)[0] - eps * c * env).abs() < 1e-15);
        }
    }

    #[test]
    fn reconstruction_identity() {
        // H(theta, p0 + I, t) = e + omega.I + a + b.I + I m I at random points
        let model = bumped_model();
        model.validate().unwrap();
        let exp = model.expand_at(&[0.1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let q = vec![rng.gen_range(0.0..1.0)];
            // reach across the bump support to exercise the split quadrature
            let i = vec![rng.gen_range(-0.6..0.6)];
            let t = rng.gen_range(0.0..10.0);
            let lhs = model.full_eval(&q, &[0.1 + i[0]], t);
            let m = exp.m_at(&q, &i, t)[0][0];
            let rhs = exp.e
                + exp.omega[0] * i[0]
                + exp.a_at(&q, t)
                + exp.b_at(&q, t)[0] * i[0]
                + m * i[0] * i[0];
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn mbar_is_derivative_of_m_quadratic_form() {
        // mbar I = d_I (I^T m I), finite-difference check
        let model = bumped_model();
        let exp = model.expand_at(&[0.1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-4;
        let term = model.remainder.as_ref().unwrap().terms[0].clone();
        let mut checked = 0;
        while checked < 20 {
            let q = vec![rng.gen_range(0.0..1.0)];
            let i = rng.gen_range(-0.3..0.3);
            let t = rng.gen_range(0.0..5.0);
            // the integrand is only piecewise-smooth in I where the segment
            // gains/loses a bump-boundary crossing; skip samples whose FD
            // stencil straddles such a transition
            let structure = |ii: f64| term.segment_breakpoints(&[0.1], &[ii]).len();
            let s0 = structure(i);
            if [-2.0, -1.0, 1.0, 2.0]
                .iter()
                .any(|&c| structure(i + c * h) != s0)
            {
                continue;
            }
            checked += 1;
            let quad = |ii: f64| exp.m_at(&q, &[ii], t)[0][0] * ii * ii;
            // 4th-order stencil: the bump remainder's higher derivatives are
            // too large for a plain central difference at this tolerance
            let fd = (-quad(i + 2.0 * h) + 8.0 * quad(i + h) - 8.0 * quad(i - h)
                + quad(i - 2.0 * h))
                / (12.0 * h);
            let mbar_i = exp.mbar_at(&q, &[i], t)[0][0] * i;
            assert!((fd - mbar_i).abs() < 1e-8, "{fd} vs {mbar_i}");
        }
    }

    #[test]
    fn expand_rejects_inadmissible_point() {
        let model = reference_model(1e-3);
        assert!(matches!(
            model.expand_at(&[1.3]),
            Err(KamError::DomainError { .. })
        ));
        let bumped = bumped_model();
        // inside B_{3/4} but outside the declared good set
        assert!(matches!(
            bumped.expand_at(&[0.45]),
            Err(KamError::DomainError { .. })
        ));
    }

    #[test]
    fn remainder_flat_on_good_set() {
        bumped_model().remainder.unwrap().verify_flat(1).unwrap();
        // a bump overlapping the good set must be rejected
        let bad = Remainder {
            terms: vec![RemainderTerm {
                center: vec![0.1],
                radius: 0.3,
                amplitude: 1.0,
            }],
            good_set: vec![Ball {
                center_1d: 0.1,
                radius: 0.2,
            }],
        };
        assert!(bad.verify_flat(1).is_err());
    }

    #[test]
    fn vector_field_matches_symplectic_gradient() {
        let model = bumped_model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for _ in 0..30 {
            let q = rng.gen_range(0.0..1.0);
            let p = rng.gen_range(-0.8..0.8);
            let t = rng.gen_range(0.0..5.0);
            let (dq, dp) = model.vector_field(&[q], &[p], t);
            let fd_p = (model.full_eval(&[q], &[p + h], t) - model.full_eval(&[q], &[p - h], t))
                / (2.0 * h);
            let fd_q = (model.full_eval(&[q + h], &[p], t) - model.full_eval(&[q - h], &[p], t))
                / (2.0 * h);
            let scale = 1.0 + dq[0].abs().max(dp[0].abs());
            assert!((dq[0] - fd_p).abs() / scale < 1e-6);
            assert!((dp[0] + fd_q).abs() / scale < 1e-6);
        }
    }

    #[test]
    fn expanded_field_matches_symplectic_gradient() {
        let model = reference_model(1e-2);
        let exp = model.expand_at(&[0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-5;
        let full = |q: f64, i: f64, t: f64| model.full_eval(&[q], &[0.3 + i], t);
        for _ in 0..30 {
            let q = rng.gen_range(0.0..1.0);
            let i = rng.gen_range(-0.2..0.2);
            let t = rng.gen_range(0.0..5.0);
            let (dq, dp) = exp.eval_xh(&[q], &[i], t).unwrap();
            let fd_i = (full(q, i + h, t) - full(q, i - h, t)) / (2.0 * h);
            let fd_q = (full(q + h, i, t) - full(q - h, i, t)) / (2.0 * h);
            assert!((dq[0] - fd_i).abs() < 1e-6, "{} vs {fd_i}", dq[0]);
            assert!((dp[0] + fd_q).abs() < 1e-6, "{} vs {}", dp[0], -fd_q);
        }
    }

    #[test]
    fn truncated_field_invariant_torus_at_zero_action() {
        let model = reference_model(1e-2);
        let exp = model.expand_at(&[0.3]).unwrap();
        let (dq, dp) = exp.eval_xh_tilde(&[0.37], &[0.0], 2.5).unwrap();
        assert_eq!(dq[0], exp.omega[0]);
        assert_eq!(dp[0], 0.0);
    }

    #[test]
    fn truncated_equals_full_without_perturbation() {
        let mut model = reference_model(0.0);
        model.modes.clear();
        let exp = model.expand_at(&[0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let q = vec![rng.gen_range(0.0..1.0)];
            let i = vec![rng.gen_range(-0.2..0.2)];
            let t = rng.gen_range(0.0..5.0);
            let a = exp.eval_xh(&q, &i, t).unwrap();
            let b = exp.eval_xh_tilde(&q, &i, t).unwrap();
            assert!((a.0[0] - b.0[0]).abs() < 1e-13);
            assert!((a.1[0] - b.1[0]).abs() < 1e-13);
        }
    }

    #[test]
    fn field_rejects_large_action() {
        let model = reference_model(1e-3);
        let exp = model.expand_at(&[0.3]).unwrap();
        assert!(matches!(
            exp.eval_xh(&[0.1], &[0.5], 0.0),
            Err(KamError::DomainError { .. })
        ));
    }

    #[test]
    fn branch_mirror_symmetry_of_families() {
        // even decay profile: a+(theta, t) = a-(theta, -t) slice by slice
        let model = reference_model(1e-3);
        let exp = model.expand_at(&[0.3]).unwrap();
        let gp = TimeGrid::geometric(crate::decay_norms::Branch::Plus, 0.2, 1.3, 10.0).unwrap();
        let gm = TimeGrid::geometric(crate::decay_norms::Branch::Minus, 0.2, 1.3, 10.0).unwrap();
        let ap = exp.a_family(gp);
        let am = exp.a_family(gm);
        for (sp, sm) in ap.slices.iter().zip(&am.slices) {
            let d = sp.sub(sm).unwrap();
            let grid = CollocationGrid::new(1, 32);
            assert!(d.sup_norm(&grid) < 1e-14);
        }
    }

    #[test]
    fn budget_passes_for_small_fast_decay() {
        // single mode eps0 cos(2 pi q) / (1 + t^{l+3}); the norm combination
        // carries the 2 pi derivative factors (~312x the amplitude here), so
        // the amplitude must sit well below eps for a pass
        let eps = 1e-2;
        let model = HamiltonianModel {
            n: 1,
            h: Polynomial::univariate(&[0.0, 0.0, 0.5]).unwrap(),
            remainder: None,
            modes: vec![SeparableMode {
                angle: cos_mode(1),
                action: Polynomial::constant(1, 1.0),
                decay: DecayProfile::Poly { exponent: 5.0 },
                amplitude: eps / 1000.0,
            }],
            l: 2.0,
            eps,
            upsilon: 10.0,
        };
        let report = model.check_decay_budget(0.5).unwrap();
        assert!(report.pass, "{:?}", report.conditions);
    }

    #[test]
    fn budget_fails_for_slow_decay() {
        let model = HamiltonianModel {
            n: 1,
            h: Polynomial::univariate(&[0.0, 0.0, 0.5]).unwrap(),
            remainder: None,
            modes: vec![SeparableMode {
                angle: cos_mode(1),
                action: Polynomial::constant(1, 1.0),
                decay: DecayProfile::Poly { exponent: 2.0 },
                amplitude: 1e-3,
            }],
            l: 3.0,
            eps: 1e-2,
            upsilon: 10.0,
        };
        let report = model.check_decay_budget(0.5).unwrap();
        assert!(!report.pass);
        let violated: Vec<&BudgetCondition> =
            report.conditions.iter().filter(|c| !c.pass).collect();
        assert!(violated.iter().any(|c| c.name.contains("decay exponent")));
    }

    #[test]
    fn budget_trivial_for_unperturbed() {
        let mut model = reference_model(0.0);
        model.modes.clear();
        model.eps = 1e-9;
        let report = model.check_decay_budget(0.5).unwrap();
        assert!(report.pass);
        assert_eq!(report.conditions[0].value, 0.0);
    }
}
