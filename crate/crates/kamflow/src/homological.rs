//! Solver for the transport (homological) equation
//! `omega . d_theta kappa + d_t kappa = g` with the asymptotic condition
//! `|kappa^t| -> 0` as `t -> +/-infinity`.
//!
//! The equation decouples per Fourier mode: with `w_k = 2 pi k . omega`,
//!
//! `kappa_k(t) = -int_t^infinity g_k(tau) exp(i w_k (tau - t)) dtau`
//!
//! (mirrored from `-infinity` on the negative branch). The integral is
//! evaluated by a backward recurrence over the time grid with a Filon-type
//! product rule on each interval: a local cubic interpolant of `g_k` times
//! the oscillatory factor, integrated exactly via moment recurrences. The
//! grid is auto-extended using the declared tail envelope until the certified
//! bound on the remaining tail is negligible. No small divisors appear for
//! any `omega`.

use num_complex::Complex64;

use crate::decay_norms::{weighted_norm_single, Branch, TailModel, TimeFamily};
use crate::torus_fourier::{CollocationGrid, TorusFun};
use crate::{KamError, Result};

const TAU: f64 = std::f64::consts::TAU;

/// Solution bundle of one homological solve.
#[derive(Debug, Clone)]
pub struct HomologicalSolution {
    pub kappa: TimeFamily,
    pub rhs: TimeFamily,
    pub omega: Vec<f64>,
    /// sup of `|omega . d_theta kappa + d_t kappa - g|` over the interior
    /// verification grid
    pub residual_sup: f64,
    /// slope of the log-log fit of `|kappa^t|_C0` over the last decade,
    /// negated (so it is comparable to the decay exponent `l`)
    pub decay_fit_exponent: f64,
    /// set when the right-hand side decays too slowly for the weighted
    /// derivative estimates (but is still absolutely integrable)
    pub warning: Option<String>,
}

/// Tuning knobs for the solver.
#[derive(Debug, Clone, Copy)]
pub struct HeOptions {
    /// tail bound target as a fraction of the data's sup norm
    pub tail_tol_factor: f64,
    /// spacing growth in the auto-extension region
    pub extension_ratio: f64,
    /// hard cap on extension nodes
    pub max_extension_nodes: usize,
    /// integrate each interval by Gauss-Kronrod instead of exact Filon
    /// moments (cross-check path)
    pub use_gauss_kronrod: bool,
}

impl Default for HeOptions {
    fn default() -> Self {
        Self {
            tail_tol_factor: 1e-10,
            extension_ratio: 1.02,
            max_extension_nodes: 200_000,
            use_gauss_kronrod: false,
        }
    }
}

/// Exact moments `M_m = int_0^h s^m exp(i w s) ds`, `m = 0..3`.
///
/// Upward recurrence for large `|w h|`; Taylor series near the removable
/// singularity at `w = 0` where the recurrence cancels catastrophically.
fn oscillatory_moments(w: f64, h: f64) -> [Complex64; 4] {
    let wh = w * h;
    let mut m = [Complex64::new(0.0, 0.0); 4];
    if wh.abs() < 5.0 {
        // M_m = sum_j (i w)^j h^(m+j+1) / (j! (m+j+1))
        for (mi, out) in m.iter_mut().enumerate() {
            let mut term = Complex64::new(h.powi(mi as i32 + 1), 0.0);
            let iw = Complex64::new(0.0, w);
            let mut acc = term / (mi as f64 + 1.0);
            let mut fact = Complex64::new(1.0, 0.0);
            for j in 1..48 {
                term *= h;
                fact *= iw / j as f64;
                let add = term * fact / (mi + j + 1) as f64;
                acc += add;
                if add.norm() < 1e-18 * acc.norm().max(1e-300) {
                    break;
                }
            }
            *out = acc;
        }
    } else {
        let iw = Complex64::new(0.0, w);
        let e = Complex64::new(0.0, wh).exp();
        m[0] = (e - 1.0) / iw;
        for mi in 1..4 {
            m[mi] = (Complex64::new(h.powi(mi as i32), 0.0) * e - mi as f64 * m[mi - 1]) / iw;
        }
    }
    m
}

/// Power-basis coefficients (about `x = 0`) of the interpolating cubic
/// through up to 4 points, via divided differences.
fn cubic_coeffs(xs: &[f64], ys: &[Complex64]) -> [Complex64; 4] {
    let n = xs.len();
    debug_assert!((1..=4).contains(&n));
    // Newton divided differences
    let mut dd: Vec<Complex64> = ys.to_vec();
    for level in 1..n {
        for i in (level..n).rev() {
            dd[i] = (dd[i] - dd[i - 1]) / (xs[i] - xs[i - level]);
        }
    }
    // expand Newton form prod (x - xs[j]) into powers
    let mut out = [Complex64::new(0.0, 0.0); 4];
    let mut basis = [Complex64::new(0.0, 0.0); 4];
    basis[0] = Complex64::new(1.0, 0.0);
    out[0] = dd[0];
    let mut deg = 0usize;
    for level in 1..n {
        // basis *= (x - xs[level-1])
        let root = xs[level - 1];
        let mut next = [Complex64::new(0.0, 0.0); 4];
        for d in 0..=deg {
            next[d + 1] += basis[d];
            next[d] -= basis[d] * root;
        }
        basis = next;
        deg += 1;
        for d in 0..=deg {
            out[d] += dd[level] * basis[d];
        }
    }
    out
}

/// Evaluate the local cubic at offset `s`.
fn cubic_eval(c: &[Complex64; 4], s: f64) -> Complex64 {
    ((c[3] * s + c[2]) * s + c[1]) * s + c[0]
}

/// 15-point Gauss-Kronrod rule on [a, b]: returns (K15 value, |K15 - G7|).
fn gk15(f: &mut impl FnMut(f64) -> Complex64, a: f64, b: f64) -> (Complex64, f64) {
    // Kronrod abscissae (positive half) and weights; starred lines are the
    // embedded Gauss-7 nodes
    const XK: [f64; 8] = [
        0.991455371120813,
        0.949107912342759, // *
        0.864864423359769,
        0.741531185599394, // *
        0.586087235467691,
        0.405845151377397, // *
        0.207784955007898,
        0.0, // *
    ];
    const WK: [f64; 8] = [
        0.022935322010529,
        0.063092092629979,
        0.104790010322250,
        0.140653259715525,
        0.169004726639267,
        0.190350578064785,
        0.204432940075298,
        0.209482141084728,
    ];
    const WG: [f64; 4] = [
        0.129484966168870,
        0.279705391489277,
        0.381830050505119,
        0.417959183673469,
    ];
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut k = Complex64::new(0.0, 0.0);
    let mut g = Complex64::new(0.0, 0.0);
    for (i, (&x, &wk)) in XK.iter().zip(&WK).enumerate() {
        let (fp, fm) = if x == 0.0 {
            let v = f(mid);
            (v, Complex64::new(0.0, 0.0))
        } else {
            (f(mid + half * x), f(mid - half * x))
        };
        let sum = if x == 0.0 { fp } else { fp + fm };
        k += wk * sum;
        if i % 2 == 1 {
            g += WG[i / 2] * sum;
        }
    }
    (k * half, ((k - g) * half).norm())
}

/// Adaptive GK15 with oscillation-resolved pre-splitting.
fn gk_interval(values_cubic: &[Complex64; 4], w: f64, h: f64, tol: f64) -> Complex64 {
    fn rec(
        f: &mut impl FnMut(f64) -> Complex64,
        a: f64,
        b: f64,
        tol: f64,
        depth: usize,
    ) -> Complex64 {
        let (v, err) = gk15(f, a, b);
        if err <= tol || depth == 0 {
            v
        } else {
            let m = 0.5 * (a + b);
            rec(f, a, m, tol / 2.0, depth - 1) + rec(f, m, b, tol / 2.0, depth - 1)
        }
    }
    let mut f = |s: f64| cubic_eval(values_cubic, s) * Complex64::new(0.0, w * s).exp();
    // keep each piece under ~3 radians of phase
    let pieces = ((w.abs() * h / 3.0).ceil() as usize).max(1);
    let mut acc = Complex64::new(0.0, 0.0);
    for p in 0..pieces {
        let a = h * p as f64 / pieces as f64;
        let b = h * (p + 1) as f64 / pieces as f64;
        acc += rec(&mut f, a, b, tol / pieces as f64, 24);
    }
    acc
}

/// Finite-difference weights (Fornberg) for the first derivative at `x0`
/// from arbitrary nodes `xs`.
fn fd_weights_first(x0: f64, xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let m = 1usize; // derivative order
    let mut c = vec![vec![0.0; m + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[m]).collect()
}

/// Solve the homological equation with default options.
pub fn solve_he(g: &TimeFamily, omega: &[f64]) -> Result<HomologicalSolution> {
    solve_he_with(g, omega, HeOptions::default())
}

/// Cross-check variant: same interpolation model, independent quadrature
/// (adaptive Gauss-Kronrod on oscillation-resolved subintervals).
pub fn solve_he_gk(g: &TimeFamily, omega: &[f64]) -> Result<HomologicalSolution> {
    solve_he_with(
        g,
        omega,
        HeOptions {
            use_gauss_kronrod: true,
            ..HeOptions::default()
        },
    )
}

pub fn solve_he_with(
    g: &TimeFamily,
    omega: &[f64],
    opts: HeOptions,
) -> Result<HomologicalSolution> {
    let first = &g.slices[0];
    if omega.len() != first.dim_domain {
        return Err(KamError::DimensionMismatch(
            "omega arity must match the angle dimension".into(),
        ));
    }

    // integrability of the declared tail
    let mut warning = None;
    match g.tail {
        TailModel::Poly { exponent, .. } => {
            if exponent <= 1.0 {
                return Err(KamError::DivergentIntegral { exponent });
            }
            if exponent <= 2.0 {
                warning = Some(format!(
                    "tail exponent {exponent} <= 2: weighted derivative estimates unavailable, \
                     solving on absolute integrability alone"
                ));
            }
        }
        TailModel::Exp { rate, .. } => {
            if rate <= 0.0 {
                return Err(KamError::DivergentIntegral { exponent: rate });
            }
        }
    }

    // mirror trick: the negative branch solves the positive-branch equation
    // in reflected time with omega -> -omega, and the result is negated
    let (omega_eff, out_sign): (Vec<f64>, f64) = match g.grid.branch {
        Branch::Plus => (omega.to_vec(), 1.0),
        Branch::Minus => (omega.iter().map(|x| -x).collect(), -1.0),
    };

    let base = g.grid.nodes();
    let nb = base.len();
    let cgrid = CollocationGrid::for_order(first.dim_domain, first.order);
    let gsup = g
        .slices
        .iter()
        .map(|s| s.sup_norm(&cgrid))
        .fold(0.0f64, f64::max);
    let tail_target = opts.tail_tol_factor * gsup.max(1e-12);

    // auto-extend the grid until the certified tail bound is negligible
    let mut times: Vec<f64> = base.to_vec();
    let mut step = if nb >= 2 {
        base[nb - 1] - base[nb - 2]
    } else {
        1.0
    };
    while g.tail.integral_beyond(*times.last().unwrap())? > tail_target {
        if times.len() - nb > opts.max_extension_nodes {
            return Err(KamError::InvalidArgument(format!(
                "tail bound target {tail_target:.3e} unreachable within \
                 {} extension nodes (tail decays too slowly)",
                opts.max_extension_nodes
            )));
        }
        let t = *times.last().unwrap() + step;
        times.push(t);
        step *= opts.extension_ratio;
    }
    let nt = times.len();
    let env_last = g.tail.envelope(base[nb - 1]);

    // collect modes once
    let mut modes: Vec<Vec<i64>> = Vec::new();
    first.for_each_mode(|k, _| modes.push(k.to_vec()));
    let m_range = first.dim_range;

    let mut kappa_slices: Vec<TorusFun> =
        (0..nb).map(|_| TorusFun::zero(first.dim_domain, m_range, first.order)).collect();

    for k in &modes {
        let w = TAU * k.iter().zip(&omega_eff).map(|(&ki, &o)| ki as f64 * o).sum::<f64>();
        for comp in 0..m_range {
            // mode series over base + extension nodes; extension follows the
            // declared envelope shape anchored at the last base slice
            let mut vals: Vec<Complex64> = Vec::with_capacity(nt);
            for slice in &g.slices {
                vals.push(slice.coeff(k)[comp]);
            }
            let anchor = vals[nb - 1];
            for &t in &times[nb..] {
                let ratio = if env_last > 0.0 {
                    g.tail.envelope(t) / env_last
                } else {
                    0.0
                };
                vals.push(anchor * ratio);
            }

            // backward recurrence from the far end (tail beyond is bounded
            // below tail_target and dropped)
            let mut acc = Complex64::new(0.0, 0.0);
            let mut kappa_at = vec![Complex64::new(0.0, 0.0); nb];
            if nt >= 2 {
                for j in (0..nt - 1).rev() {
                    let h = times[j + 1] - times[j];
                    let lo = j.saturating_sub(1);
                    let hi = (j + 2).min(nt - 1);
                    let xs: Vec<f64> = times[lo..=hi].iter().map(|x| x - times[j]).collect();
                    let cub = cubic_coeffs(&xs, &vals[lo..=hi]);
                    let integral = if opts.use_gauss_kronrod {
                        gk_interval(&cub, w, h, 1e-13 * (gsup.max(1.0)))
                    } else {
                        let mom = oscillatory_moments(w, h);
                        cub[0] * mom[0] + cub[1] * mom[1] + cub[2] * mom[2] + cub[3] * mom[3]
                    };
                    acc = -integral + Complex64::new(0.0, w * h).exp() * acc;
                    if j < nb {
                        kappa_at[j] = acc;
                    }
                }
            }
            for (slice, &v) in kappa_slices.iter_mut().zip(&kappa_at) {
                slice.coeff_mut(k)[comp] = out_sign * v;
            }
        }
    }

    // kappa inherits one power less of decay than the integrand
    let kappa_tail = match g.tail {
        TailModel::Poly { exponent, scale } => TailModel::Poly {
            exponent: exponent - 1.0,
            scale: scale / (exponent - 1.0).max(1e-6),
        },
        TailModel::Exp { rate, scale } => TailModel::Exp {
            rate,
            scale: scale / rate,
        },
    };
    let kappa = TimeFamily::new(g.grid.clone(), kappa_slices, kappa_tail)?;
    let residual_sup = residual(&kappa, g, omega)?;
    let decay_fit_exponent = fit_decay_exponent(&kappa);
    Ok(HomologicalSolution {
        kappa,
        rhs: g.clone(),
        omega: omega.to_vec(),
        residual_sup,
        decay_fit_exponent,
        warning,
    })
}

/// Sup of `|omega . d_theta kappa + d_t kappa - g|` over interior nodes
/// (two nodes dropped at each end where one-sided differences degrade) and
/// the collocation grid. `d_t` uses degree-4 finite-difference weights on
/// the signed non-uniform times.
pub fn residual(kappa: &TimeFamily, g: &TimeFamily, omega: &[f64]) -> Result<f64> {
    if kappa.grid != g.grid {
        return Err(KamError::GridMismatch(
            "kappa and g live on different time grids".into(),
        ));
    }
    let n = kappa.grid.len();
    if n < 5 {
        return Err(KamError::GridMismatch(
            "need at least 5 time nodes for the verification stencil".into(),
        ));
    }
    let signed: Vec<f64> = (0..n).map(|i| kappa.grid.signed(i)).collect();
    let first = &kappa.slices[0];
    let cgrid = CollocationGrid::for_order(first.dim_domain, first.order);
    let mut sup: f64 = 0.0;
    for j in 2..n - 2 {
        let lo = j - 2;
        let w = fd_weights_first(signed[j], &signed[lo..=lo + 4]);
        let mut dkdt = kappa.slices[lo].scale(w[0]);
        for (idx, &wi) in w.iter().enumerate().skip(1) {
            dkdt = dkdt.add(&kappa.slices[lo + idx].scale(wi))?;
        }
        let mut lhs = dkdt;
        for (axis, &oa) in omega.iter().enumerate() {
            if oa != 0.0 {
                lhs = lhs.add(&kappa.slices[j].differentiate(axis)?.scale(oa))?;
            }
        }
        let res = lhs.sub(&g.slices[j])?;
        sup = sup.max(res.sup_norm(&cgrid));
    }
    Ok(sup)
}

/// Slope of the log-log fit of slice sup-norms over the last decade of the
/// grid, negated. For data decaying like `t^{-l}` this approaches `l`.
pub fn fit_decay_exponent(f: &TimeFamily) -> f64 {
    let first = &f.slices[0];
    let cgrid = CollocationGrid::for_order(first.dim_domain, first.order);
    let horizon = f.grid.horizon();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, slice) in f.slices.iter().enumerate() {
        let t = f.grid.nodes()[i];
        if t >= horizon / 10.0 && t > 0.0 {
            let s = slice.sup_norm(&cgrid);
            if s > 1e-300 {
                xs.push(t.ln());
                ys.push(s.ln());
            }
        }
    }
    if xs.len() < 2 {
        return 0.0;
    }
    let nx = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / nx;
    let my = ys.iter().sum::<f64>() / nx;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    -(sxy / sxx)
}

/// Result of comparing the solution against the a-priori decay estimate
/// `|kappa|_{sigma,l} <= C(l, |omega|) |g|_{sigma,l+1}`.
#[derive(Debug, Clone, Copy)]
pub struct DecayReport {
    pub ratio: f64,
    pub c_check: f64,
    pub pass: bool,
    pub fit_slope: f64,
}

/// Assemble the candidate constant from the tail-integral calculus and
/// compare the measured norm ratio against it. Report-only: the constant
/// follows the estimate's proof shape and claims no sharpness.
pub fn decay_estimate_check(
    sol: &HomologicalSolution,
    sigma: f64,
    l: f64,
) -> Result<DecayReport> {
    let first = &sol.rhs.slices[0];
    let cgrid = CollocationGrid::new(first.dim_domain, (4 * first.order + 2).max(48));
    let gnorm = weighted_norm_single(&sol.rhs, sigma, l + 1.0, &cgrid)?.total;
    let knorm = weighted_norm_single(&sol.kappa, sigma, l, &cgrid)?.total;
    let ratio = if gnorm == 0.0 { 0.0 } else { knorm / gnorm };
    let omega_norm = sol.omega.iter().map(|x| x * x).sum::<f64>().sqrt();
    let c_check = 4.0
        * (crate::decay_norms::tail_bound_f(l + 1.0, 0.0)?
            + omega_norm * crate::decay_norms::tail_bound_g(l, 0.0)?
            + crate::decay_norms::tail_bound_f(l, 0.0)?);
    Ok(DecayReport {
        ratio,
        c_check,
        pass: ratio <= c_check,
        fit_slope: sol.decay_fit_exponent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay_norms::TimeGrid;
    use std::f64::consts::PI;

    fn dense_grid(branch: Branch, horizon: f64) -> TimeGrid {
        TimeGrid::geometric(branch, 0.004, 1.008, horizon).unwrap()
    }

    fn arctan_rhs(branch: Branch) -> TimeFamily {
        TimeFamily::from_fn(
            dense_grid(branch, 50.0),
            1,
            1,
            1,
            TailModel::Poly {
                exponent: 2.0,
                scale: 1.0,
            },
            |th, t| vec![(TAU * th[0]).cos() / (1.0 + t * t)],
        )
    }

    #[test]
    fn zero_rhs_gives_zero_solution() {
        let g = TimeFamily::zero(dense_grid(Branch::Plus, 10.0), 1, 1, 2);
        let sol = solve_he(&g, &[0.37]).unwrap();
        let cg = CollocationGrid::for_order(1, 2);
        for s in &sol.kappa.slices {
            assert_eq!(s.sup_norm(&cg), 0.0);
        }
        assert_eq!(sol.residual_sup, 0.0);
    }

    #[test]
    fn arctan_closed_form() {
        // omega = 0: kappa = -cos(2 pi theta) (pi/2 - arctan t)
        let g = arctan_rhs(Branch::Plus);
        let sol = solve_he(&g, &[0.0]).unwrap();
        let cg = CollocationGrid::new(1, 32);
        let mut worst: f64 = 0.0;
        for (i, s) in sol.kappa.slices.iter().enumerate() {
            let t = sol.kappa.grid.nodes()[i];
            let exact = TorusFun::from_fn(1, 1, 1, |th| {
                vec![-(TAU * th[0]).cos() * (PI / 2.0 - t.atan())]
            });
            worst = worst.max(s.sub(&exact).unwrap().sup_norm(&cg));
        }
        assert!(worst < 1e-8, "max deviation {worst:.3e}");
        assert!(sol.residual_sup < 1e-8, "residual {:.3e}", sol.residual_sup);
    }

    #[test]
    fn exponential_single_mode_oracle() {
        // g = e^{-t} cos(2 pi theta), any omega: the k = +/-1 coefficients
        // satisfy kappa_k = -g_k / (1 - i w), w = 2 pi k omega
        let omega = 0.37;
        let g = TimeFamily::from_fn(
            dense_grid(Branch::Plus, 40.0),
            1,
            1,
            1,
            TailModel::Exp {
                rate: 1.0,
                scale: 1.0,
            },
            |th, t| vec![(-t).exp() * (TAU * th[0]).cos()],
        );
        let sol = solve_he(&g, &[omega]).unwrap();
        let w = TAU * omega;
        let a = 1.0 / (1.0 + w * w);
        let b = w / (1.0 + w * w);
        let mut worst: f64 = 0.0;
        for (i, s) in sol.kappa.slices.iter().enumerate() {
            let t = sol.kappa.grid.nodes()[i];
            let expected = -0.5 * (-t).exp() * Complex64::new(a, b);
            worst = worst.max((s.coeff(&[1])[0] - expected).norm());
        }
        assert!(worst < 1e-8, "max coefficient deviation {worst:.3e}");
    }

    #[test]
    fn linearity() {
        let g1 = arctan_rhs(Branch::Plus);
        let g2 = TimeFamily::from_fn(
            dense_grid(Branch::Plus, 50.0),
            1,
            1,
            2,
            // same declared tail as g1 so the modeled extension is identical
            // in the standalone and combined solves (linearity is exact only
            // for a consistent tail model)
            TailModel::Poly {
                exponent: 2.0,
                scale: 1.0,
            },
            |th, t| vec![(2.0 * TAU * th[0]).sin() / (1.0 + t.powi(3))],
        );
        let omega = [0.41];
        let s1 = solve_he(&g1, &omega).unwrap();
        let s2 = solve_he(&g2, &omega).unwrap();
        let combo = g1
            .map_slices(|_, s| s.with_order(2).scale(0.7))
            .add(&g2.map_slices(|_, s| s.scale(-1.3)))
            .unwrap();
        let mut combo = combo;
        combo.tail = TailModel::Poly {
            exponent: 2.0,
            scale: 2.0,
        };
        let sc = solve_he(&combo, &omega).unwrap();
        let cg = CollocationGrid::new(1, 32);
        for i in 0..sc.kappa.slices.len() {
            let expected = s1.kappa.slices[i]
                .with_order(2)
                .scale(0.7)
                .add(&s2.kappa.slices[i].scale(-1.3))
                .unwrap();
            let d = sc.kappa.slices[i].sub(&expected).unwrap().sup_norm(&cg);
            assert!(d < 1e-10, "slice {i}: {d:.3e}");
        }
    }

    #[test]
    fn branch_mirror() {
        // even rhs, omega = 0: kappa_minus(theta, t) = -kappa_plus(theta, -t)
        let gp = arctan_rhs(Branch::Plus);
        let gm = arctan_rhs(Branch::Minus);
        let sp = solve_he(&gp, &[0.0]).unwrap();
        let sm = solve_he(&gm, &[0.0]).unwrap();
        let cg = CollocationGrid::new(1, 32);
        for (a, b) in sp.kappa.slices.iter().zip(&sm.kappa.slices) {
            let d = a.add(b).unwrap().sup_norm(&cg);
            assert!(d < 1e-8, "{d:.3e}");
        }
    }

    #[test]
    fn mode_decoupling() {
        // single input mode k = 2 -> only k = +/-2 appear in the output
        let g = TimeFamily::from_fn(
            dense_grid(Branch::Plus, 30.0),
            1,
            1,
            3,
            TailModel::Poly {
                exponent: 3.0,
                scale: 1.0,
            },
            |th, t| vec![(2.0 * TAU * th[0]).cos() / (1.0 + t.powi(3))],
        );
        let sol = solve_he(&g, &[0.29]).unwrap();
        for s in &sol.kappa.slices {
            s.for_each_mode(|k, c| {
                if k[0].abs() != 2 {
                    assert!(c[0].norm() < 1e-14, "leak into mode {}", k[0]);
                }
            });
        }
    }

    #[test]
    fn filon_matches_gauss_kronrod() {
        let g = TimeFamily::from_fn(
            dense_grid(Branch::Plus, 30.0),
            1,
            1,
            3,
            TailModel::Poly {
                exponent: 4.0,
                scale: 1.0,
            },
            |th, t| {
                vec![
                    ((TAU * th[0]).cos() + 0.4 * (3.0 * TAU * th[0]).sin()) / (1.0 + t.powi(4)),
                ]
            },
        );
        let omega = [0.83];
        let filon = solve_he(&g, &omega).unwrap();
        let gk = solve_he_gk(&g, &omega).unwrap();
        let cg = CollocationGrid::new(1, 32);
        let mut worst: f64 = 0.0;
        for (a, b) in filon.kappa.slices.iter().zip(&gk.kappa.slices) {
            worst = worst.max(a.sub(b).unwrap().sup_norm(&cg));
        }
        assert!(worst < 1e-8, "quadrature disagreement {worst:.3e}");
    }

    #[test]
    fn residual_detects_perturbation() {
        let g = arctan_rhs(Branch::Plus);
        let sol = solve_he(&g, &[0.0]).unwrap();
        let bump = TorusFun::from_fn(1, 1, 1, |th| vec![0.1 * (TAU * th[0]).cos()]);
        let mid = sol.kappa.slices.len() / 2;
        let perturbed = sol.kappa.map_slices(|i, s| {
            if i == mid {
                s.add(&bump).unwrap()
            } else {
                s.clone()
            }
        });
        let r = residual(&perturbed, &g, &[0.0]).unwrap();
        assert!(r >= 0.05, "residual only {r:.3e}");
    }

    #[test]
    fn residual_constant_kappa_formula() {
        // g = 0, kappa constant in t with d_theta kappa != 0:
        // residual = sup |omega . d_theta kappa|
        let grid = dense_grid(Branch::Plus, 10.0);
        let kappa = TimeFamily::from_fn(
            grid.clone(),
            1,
            1,
            1,
            TailModel::Poly {
                exponent: f64::INFINITY,
                scale: 1.0,
            },
            |th, _| vec![(TAU * th[0]).sin()],
        );
        let g = TimeFamily::zero(grid, 1, 1, 1);
        let omega = [0.5];
        let r = residual(&kappa, &g, &omega).unwrap();
        // |omega * 2 pi cos| sup = pi
        assert!((r - 0.5 * TAU).abs() < 1e-9, "{r}");
    }

    #[test]
    fn residual_rejects_mismatched_grids() {
        let g = arctan_rhs(Branch::Plus);
        let kappa = TimeFamily::zero(dense_grid(Branch::Plus, 30.0), 1, 1, 1);
        assert!(matches!(
            residual(&kappa, &g, &[0.0]),
            Err(KamError::GridMismatch(_))
        ));
    }

    #[test]
    fn rejects_non_integrable_tail() {
        let g = TimeFamily::from_fn(
            dense_grid(Branch::Plus, 10.0),
            1,
            1,
            1,
            TailModel::Poly {
                exponent: 1.0,
                scale: 1.0,
            },
            |th, t| vec![(TAU * th[0]).cos() / (1.0 + t)],
        );
        assert!(matches!(
            solve_he(&g, &[0.0]),
            Err(KamError::DivergentIntegral { .. })
        ));
    }

    #[test]
    fn warns_on_slow_but_integrable_tail() {
        let g = TimeFamily::from_fn(
            TimeGrid::geometric(Branch::Plus, 0.05, 1.05, 40.0).unwrap(),
            1,
            1,
            1,
            TailModel::Poly {
                exponent: 1.8,
                scale: 1.0,
            },
            |th, t| vec![(TAU * th[0]).cos() / (1.0 + t.powf(1.8))],
        );
        let opts = HeOptions {
            tail_tol_factor: 1e-6,
            ..HeOptions::default()
        };
        let sol = solve_he_with(&g, &[0.0], opts).unwrap();
        assert!(sol.warning.is_some());
    }

    #[test]
    fn decay_slope_matches_weight() {
        // g tail exactly c / (1 + t^{l+1}) with l = 2: |kappa| ~ t^{-2}
        let g = TimeFamily::from_fn(
            dense_grid(Branch::Plus, 60.0),
            1,
            1,
            1,
            TailModel::Poly {
                exponent: 3.0,
                scale: 1.0,
            },
            |th, t| vec![(TAU * th[0]).cos() / (1.0 + t.powi(3))],
        );
        let sol = solve_he(&g, &[0.0]).unwrap();
        let l = 2.0;
        assert!(
            (sol.decay_fit_exponent - l).abs() / l < 0.05,
            "fitted slope {}",
            sol.decay_fit_exponent
        );
    }

    #[test]
    fn decay_estimate_within_assembled_constant() {
        let g = TimeFamily::from_fn(
            dense_grid(Branch::Plus, 60.0),
            1,
            1,
            1,
            TailModel::Poly {
                exponent: 3.0,
                scale: 1.0,
            },
            |th, t| vec![(TAU * th[0]).cos() / (1.0 + t.powi(3))],
        );
        let sol = solve_he(&g, &[0.62]).unwrap();
        let report = decay_estimate_check(&sol, 0.0, 2.0).unwrap();
        assert!(report.ratio.is_finite() && report.ratio > 0.0);
        assert!(report.pass, "ratio {} vs C {}", report.ratio, report.c_check);
    }

    #[test]
    fn decay_estimate_zero_rhs() {
        let g = TimeFamily::zero(dense_grid(Branch::Plus, 10.0), 1, 1, 1);
        let sol = solve_he(&g, &[0.3]).unwrap();
        let report = decay_estimate_check(&sol, 0.0, 2.0).unwrap();
        assert_eq!(report.ratio, 0.0);
        assert!(report.pass);
    }

    #[test]
    fn moments_match_series_and_recurrence() {
        // agreement across the branch switch |wh| ~ 5
        for &(w, h) in &[(4.9_f64, 1.0_f64), (5.1, 1.0), (12.0, 0.42), (0.0, 0.3)] {
            let m = oscillatory_moments(w, h);
            // brute-force oracle
            for (mi, &mv) in m.iter().enumerate() {
                let nn = 200_000;
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..nn {
                    let s = (j as f64 + 0.5) * h / nn as f64;
                    acc += s.powi(mi as i32) * Complex64::new(0.0, w * s).exp();
                }
                acc *= h / nn as f64;
                assert!((mv - acc).norm() < 1e-9, "w={w} h={h} m={mi}");
            }
        }
    }

    #[test]
    fn fd_weights_exact_for_quartic() {
        let xs = [0.0, 0.13, 0.4, 0.55, 1.1];
        let x0 = 0.4;
        let w = fd_weights_first(x0, &xs);
        let f = |x: f64| 1.0 + x - 2.0 * x * x + 0.5 * x.powi(3) + 0.25 * x.powi(4);
        let df = |x: f64| 1.0 - 4.0 * x + 1.5 * x * x + x.powi(3);
        let approx: f64 = xs.iter().zip(&w).map(|(&x, &wi)| wi * f(x)).sum();
        assert!((approx - df(x0)).abs() < 1e-12);
    }
}
