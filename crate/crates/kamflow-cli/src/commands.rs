//! Subcommand implementations: solve, glue, verify, norms, tail-constants.
//!
//! All computation is sequential so every artifact is independent of the
//! requested thread count; reports are serde structs with fixed field order
//! so repeated runs are bit-identical at a fixed seed.

use crate::config::{RunConfig, RunMode};
use anyhow::Context;
use kamflow::biasymptotic::{
    convergence_diagnostics, coverage_estimate, glue, ParamDomain, TimeZeroMap,
};
use kamflow::decay_norms::{
    tail_bound_f, tail_bound_g, weighted_norm_single, Branch, TailModel, TimeFamily, TimeGrid,
};
use kamflow::flow::conjugacy_check;
use kamflow::torus_fourier::{CollocationGrid, TorusFun};
use kamflow::torus_solver::{solve_family, theorem_estimates, AsymptoticTorusFamily};
use serde::Serialize;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    let path = out.join(name);
    let text = serde_json::to_string_pretty(value)?;
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Every run echoes the fully resolved configuration next to its artifacts.
pub fn echo_resolved_config(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    write_json(out, "resolved-config.json", cfg)
}

// ---------------------------------------------------------------- solve ----

#[derive(Serialize)]
struct FamilyArtifact {
    p0: f64,
    branch: String,
    omega: f64,
    converged: bool,
    iterations: usize,
    residuals: Vec<f64>,
    ratios: Vec<f64>,
    transport_defect: f64,
    /// time-zero correction sampled at 64 equispaced angles
    u_time0: Vec<f64>,
    v_time0: Vec<f64>,
}

#[derive(Serialize)]
struct SolveFailure {
    p0: f64,
    branch: String,
    /// name of the violated condition
    condition: String,
}

#[derive(Serialize)]
struct SolveSummary {
    mode: String,
    all_converged: bool,
    empirical_c0_plus: f64,
    empirical_c0_minus: f64,
    failures: Vec<SolveFailure>,
}

fn branch_name(branch: Branch) -> &'static str {
    match branch {
        Branch::Plus => "plus",
        Branch::Minus => "minus",
    }
}

fn mode_name(mode: &RunMode) -> &'static str {
    match mode {
        RunMode::Integrable => "integrable",
        RunMode::NearIntegrable => "near-integrable",
    }
}

fn failure_condition(err: &kamflow::KamError) -> String {
    match err {
        kamflow::KamError::Divergence(_) => "contraction-ratio".into(),
        kamflow::KamError::NonConvergence { .. } => "max-iterations".into(),
        other => format!("{other:?}")
            .split(&['{', '('][..])
            .next()
            .unwrap_or("error")
            .trim()
            .to_lowercase(),
    }
}

pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> anyhow::Result<i32> {
    echo_resolved_config(cfg, out)?;
    let model = cfg.build_model()?;
    let opts = cfg.solver_options();
    let mut failures = Vec::new();
    let mut c0 = [0.0f64; 2];
    for (bi, branch) in [Branch::Plus, Branch::Minus].into_iter().enumerate() {
        let grid = cfg.time_grid(branch)?;
        let mut csv = String::from("p0,iter,residual,ratio\n");
        let mut solved: Vec<(f64, AsymptoticTorusFamily)> = Vec::new();
        for (pi, &p0) in cfg.params.grid.iter().enumerate() {
            match solve_family(&model, &[vec![p0]], &grid, &opts) {
                Ok(fam) => {
                    let diag = &fam.diagnostics[0];
                    for (i, r) in diag.residuals.iter().enumerate() {
                        let ratio = if i >= 1 {
                            format!("{:.17e}", diag.ratios[i - 1])
                        } else {
                            String::new()
                        };
                        csv.push_str(&format!("{p0},{i},{r:.17e},{ratio}\n"));
                    }
                    let angle_grid: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
                    let (u0, v0) = fam.time_zero(0);
                    let artifact = FamilyArtifact {
                        p0,
                        branch: branch_name(branch).into(),
                        omega: fam.omegas[0][0],
                        converged: diag.converged,
                        iterations: diag.iterations,
                        residuals: diag.residuals.clone(),
                        ratios: diag.ratios.clone(),
                        transport_defect: diag.transport_defect,
                        u_time0: angle_grid.iter().map(|&q| u0.eval(&[q])[0]).collect(),
                        v_time0: angle_grid.iter().map(|&q| v0.eval(&[q])[0]).collect(),
                    };
                    write_json(
                        out,
                        &format!("family_p{pi}_{}.json", branch_name(branch)),
                        &artifact,
                    )?;
                    solved.push((p0, fam));
                }
                Err(e) => failures.push(SolveFailure {
                    p0,
                    branch: branch_name(branch).into(),
                    condition: failure_condition(&e),
                }),
            }
        }
        fs::write(
            out.join(format!("residuals_{}.csv", branch_name(branch))),
            csv,
        )?;
        // empirical C0 over the solved part of the grid
        let mut worst: f64 = 0.0;
        for (_, fam) in &solved {
            if model.eps > 0.0 {
                let est = theorem_estimates(fam, model.eps)
                    .map_err(|e| anyhow::anyhow!("closeness estimate failed: {e}"))?;
                worst = worst.max(est.empirical_c0);
            }
        }
        c0[bi] = worst;
    }
    let summary = SolveSummary {
        mode: mode_name(&cfg.mode).into(),
        all_converged: failures.is_empty(),
        empirical_c0_plus: c0[0],
        empirical_c0_minus: c0[1],
        failures,
    };
    write_json(out, "summary.json", &summary)?;
    Ok(if summary.all_converged { 0 } else { 2 })
}

// ----------------------------------------------------------------- glue ----

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub q: f64,
    pub p: f64,
}

#[derive(Serialize)]
struct OrbitSide {
    q_pre: f64,
    p0: f64,
    omega: f64,
    slope: f64,
    agreement: f64,
    budget: f64,
}

#[derive(Serialize)]
struct OrbitArtifact {
    target_q: f64,
    target_p: f64,
    plus: OrbitSide,
    minus: OrbitSide,
}

#[derive(Serialize)]
struct RejectEntry {
    target_q: f64,
    target_p: f64,
    margin: f64,
    reason: String,
}

#[derive(Serialize)]
struct GlueSummary {
    glued: usize,
    rejected: usize,
}

pub fn load_targets(path: &Path) -> anyhow::Result<Vec<TargetSpec>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read targets file {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        anyhow::anyhow!(
            "targets error in {} at line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        )
    })
}

pub fn cmd_glue(cfg: &RunConfig, targets_path: &Path, out: &Path) -> anyhow::Result<i32> {
    echo_resolved_config(cfg, out)?;
    let targets = load_targets(targets_path)?;
    let model = cfg.build_model()?;
    let opts = cfg.solver_options();
    let grid_plus = cfg.time_grid(Branch::Plus)?;
    let grid_minus = cfg.time_grid(Branch::Minus)?;
    let domain = ParamDomain {
        exclusions: cfg.model.exclusions.clone(),
    };
    // near-integrable mode: pre-solve the families over the good grid
    let solved_pair: Option<(AsymptoticTorusFamily, AsymptoticTorusFamily)> = match cfg.mode {
        RunMode::Integrable => None,
        RunMode::NearIntegrable => {
            let params: Vec<Vec<f64>> = cfg
                .params
                .grid
                .iter()
                .filter(|p| domain.contains(**p))
                .map(|&p| vec![p])
                .collect();
            if params.is_empty() {
                anyhow::bail!("no parameter grid points inside the good set");
            }
            Some((
                solve_family(&model, &params, &grid_plus, &opts)
                    .map_err(|e| anyhow::anyhow!("plus-branch solve failed: {e}"))?,
                solve_family(&model, &params, &grid_minus, &opts)
                    .map_err(|e| anyhow::anyhow!("minus-branch solve failed: {e}"))?,
            ))
        }
    };
    let (plus_map, minus_map) = match (&cfg.mode, &solved_pair) {
        (RunMode::Integrable, _) => (
            TimeZeroMap::resolve(&model, grid_plus.clone(), opts.clone()),
            TimeZeroMap::resolve(&model, grid_minus.clone(), opts.clone()),
        ),
        (RunMode::NearIntegrable, Some((fp, fm))) => {
            (TimeZeroMap::extended(fp), TimeZeroMap::extended(fm))
        }
        _ => unreachable!(),
    };
    let t_max = (cfg.numerics.horizon * 0.4).min(20.0);
    let mut rejects = Vec::new();
    let mut glued = 0usize;
    for (ti, target) in targets.iter().enumerate() {
        if matches!(cfg.mode, RunMode::Integrable) && target.p.abs() > 0.5 {
            rejects.push(RejectEntry {
                target_q: target.q,
                target_p: target.p,
                margin: cfg.delta,
                reason: "target outside the covered set T^n x B_{1/2}".into(),
            });
            continue;
        }
        let orbit = match glue(&plus_map, &minus_map, &[target.q], &[target.p], cfg.delta) {
            Ok(o) => o,
            Err(e) => {
                rejects.push(RejectEntry {
                    target_q: target.q,
                    target_p: target.p,
                    margin: cfg.delta,
                    reason: format!("{e}"),
                });
                continue;
            }
        };
        let rep = convergence_diagnostics(&orbit, &model, t_max, cfg.numerics.ode_tol)
            .map_err(|e| anyhow::anyhow!("diagnostics failed: {e}"))?;
        let artifact = OrbitArtifact {
            target_q: target.q,
            target_p: target.p,
            plus: OrbitSide {
                q_pre: orbit.plus.q_pre[0],
                p0: orbit.plus.p0[0],
                omega: orbit.plus.omega[0],
                slope: rep.plus.slope,
                agreement: rep.plus.agreement,
                budget: rep.plus.budget,
            },
            minus: OrbitSide {
                q_pre: orbit.minus.q_pre[0],
                p0: orbit.minus.p0[0],
                omega: orbit.minus.omega[0],
                slope: rep.minus.slope,
                agreement: rep.minus.agreement,
                budget: rep.minus.budget,
            },
        };
        write_json(out, &format!("orbit_{ti}.json"), &artifact)?;
        // time series: negative times ascending, t = 0, positive times
        let mut csv = String::from("t,q,p,deviation_plus,deviation_minus\n");
        let mut rows: Vec<(f64, String)> = Vec::new();
        for (times, devs, col) in [
            (&rep.minus.times, &rep.minus.torus_deviation, 4usize),
            (&rep.plus.times, &rep.plus.torus_deviation, 3usize),
        ] {
            for (t, d) in times.iter().zip(devs) {
                let (gq, gp) = orbit
                    .eval(*t)
                    .map_err(|e| anyhow::anyhow!("orbit evaluation failed: {e}"))?;
                let dev_plus = if col == 3 { format!("{d:.17e}") } else { String::new() };
                let dev_minus = if col == 4 { format!("{d:.17e}") } else { String::new() };
                rows.push((
                    *t,
                    format!("{t:.17e},{:.17e},{:.17e},{dev_plus},{dev_minus}\n", gq[0], gp[0]),
                ));
            }
        }
        let (gq0, gp0) = orbit.eval(0.0).unwrap();
        rows.push((0.0, format!("0,{:.17e},{:.17e},,\n", gq0[0], gp0[0])));
        rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (_, row) in rows {
            csv.push_str(&row);
        }
        fs::write(out.join(format!("orbit_{ti}.csv")), csv)?;
        glued += 1;
    }
    write_json(out, "rejects.json", &rejects)?;
    write_json(
        out,
        "glue-summary.json",
        &GlueSummary {
            glued,
            rejected: rejects.len(),
        },
    )?;
    Ok(if rejects.is_empty() { 0 } else { 2 })
}

// --------------------------------------------------------------- verify ----

#[derive(Serialize)]
pub struct TailConstantRow {
    pub m: f64,
    pub f_at_1000: f64,
    pub f_limit: f64,
    pub g_at_1000: f64,
    pub g_limit: f64,
    pub pass: bool,
}

#[derive(Serialize)]
pub struct TailConstantsReport {
    pub rows: Vec<TailConstantRow>,
    pub f2_at_zero: f64,
    pub f2_at_zero_expected: f64,
    pub pass: bool,
}

pub fn tail_constants_report() -> anyhow::Result<TailConstantsReport> {
    let mut rows = Vec::new();
    let mut all = true;
    for m in [2.0f64, 3.0, 4.0] {
        let f = tail_bound_f(m, 1000.0).map_err(|e| anyhow::anyhow!("{e}"))?;
        let g = tail_bound_g(m, 1000.0).map_err(|e| anyhow::anyhow!("{e}"))?;
        let f_limit = 1.0 / (m - 1.0);
        let g_limit = 1.0 / (m * (m - 1.0));
        let pass = (f - f_limit).abs() <= 0.02 * f_limit && (g - g_limit).abs() <= 0.02 * g_limit;
        all &= pass;
        rows.push(TailConstantRow {
            m,
            f_at_1000: f,
            f_limit,
            g_at_1000: g,
            g_limit,
            pass,
        });
    }
    let f2_zero = tail_bound_f(2.0, 0.0).map_err(|e| anyhow::anyhow!("{e}"))?;
    let expected = std::f64::consts::FRAC_PI_2;
    let pass = all && (f2_zero - expected).abs() <= 0.02 * expected;
    Ok(TailConstantsReport {
        rows,
        f2_at_zero: f2_zero,
        f2_at_zero_expected: expected,
        pass,
    })
}

#[derive(Serialize)]
pub struct NormAlgebraReport {
    pub sigma_monotone: bool,
    pub weight_constant_two: bool,
    /// worst ratio |fg| / (|f|_0 |g|_s + |f|_s |g|_0) over the instances
    pub product_worst_ratio: f64,
    pub product_constant: f64,
    pub instances: usize,
    pub pass: bool,
}

pub fn norm_algebra_report(seed: u64) -> anyhow::Result<NormAlgebraReport> {
    use rand::{Rng, SeedableRng};
    let tgrid = TimeGrid::geometric(Branch::Plus, 0.1, 1.3, 30.0)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let grid = CollocationGrid::new(1, 64);
    let fam = TimeFamily::from_fn(
        tgrid.clone(),
        1,
        1,
        3,
        TailModel::Poly {
            exponent: 3.0,
            scale: 2.0,
        },
        |th, t| vec![((TAU * th[0]).cos() + 0.3 * (2.0 * TAU * th[0]).sin()) / (1.0 + t.powi(3))],
    );
    // exact monotonicity in the smoothness index
    let mut sigma_monotone = true;
    let mut prev = 0.0;
    for sigma in [0.5, 1.0, 1.5, 2.0] {
        let v = weighted_norm_single(&fam, sigma, 2.0, &grid)
            .map_err(|e| anyhow::anyhow!("{e}"))?
            .total;
        sigma_monotone &= v >= prev - 1e-14;
        prev = v;
    }
    // norm-level weight inequality with constant 2
    let mut weight_constant_two = true;
    for (l, m) in [(2.0, 1.0), (1.0, 2.0), (2.0, 2.0)] {
        let a = weighted_norm_single(&fam, 1.0, l, &grid)
            .map_err(|e| anyhow::anyhow!("{e}"))?
            .total;
        let b = weighted_norm_single(&fam, 1.0, l + m, &grid)
            .map_err(|e| anyhow::anyhow!("{e}"))?
            .total;
        weight_constant_two &= a <= 2.0 * b + 1e-12;
    }
    // product inequality with the single module constant
    const PRODUCT_CONSTANT: f64 = 4.0;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let instances = 100usize;
    let mut worst: f64 = 0.0;
    let (l, m) = (2.0, 1.0);
    for _ in 0..instances {
        let a0: f64 = rng.gen_range(-1.0..1.0);
        let a1: f64 = rng.gen_range(-1.0..1.0);
        let b1: f64 = rng.gen_range(-1.0..1.0);
        let b2: f64 = rng.gen_range(-1.0..1.0);
        let f = TimeFamily::from_fn(
            tgrid.clone(),
            1,
            1,
            2,
            TailModel::Poly {
                exponent: l,
                scale: 2.0,
            },
            move |th, t| vec![(a0 + a1 * (TAU * th[0]).cos()) / (1.0 + t.abs().powf(l))],
        );
        let g = TimeFamily::from_fn(
            tgrid.clone(),
            1,
            1,
            2,
            TailModel::Poly {
                exponent: m,
                scale: 2.0,
            },
            move |th, t| {
                vec![(b1 * (TAU * th[0]).sin() + b2 * (2.0 * TAU * th[0]).cos())
                    / (1.0 + t.abs().powf(m))]
            },
        );
        let prod_slices: Vec<TorusFun> = f
            .slices
            .iter()
            .zip(&g.slices)
            .map(|(a, b)| a.with_order(4).mul_scalar_fun(b))
            .collect::<Result<_, _>>()
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let prod = TimeFamily {
            grid: tgrid.clone(),
            slices: prod_slices,
            tail: TailModel::Poly {
                exponent: l + m,
                scale: 4.0,
            },
        };
        let nfg = weighted_norm_single(&prod, 1.0, l + m, &grid)
            .map_err(|e| anyhow::anyhow!("{e}"))?
            .total;
        let nf0 = weighted_norm_single(&f, 0.0, l, &grid)
            .map_err(|e| anyhow::anyhow!("{e}"))?
            .total;
        let nfs = weighted_norm_single(&f, 1.0, l, &grid)
            .map_err(|e| anyhow::anyhow!("{e}"))?
            .total;
        let ng0 = weighted_norm_single(&g, 0.0, m, &grid)
            .map_err(|e| anyhow::anyhow!("{e}"))?
            .total;
        let ngs = weighted_norm_single(&g, 1.0, m, &grid)
            .map_err(|e| anyhow::anyhow!("{e}"))?
            .total;
        let denom = nf0 * ngs + nfs * ng0;
        if denom > 0.0 {
            worst = worst.max(nfg / denom);
        }
    }
    Ok(NormAlgebraReport {
        sigma_monotone,
        weight_constant_two,
        product_worst_ratio: worst,
        product_constant: PRODUCT_CONSTANT,
        instances,
        pass: sigma_monotone && weight_constant_two && worst <= PRODUCT_CONSTANT,
    })
}

#[derive(Serialize)]
struct ChordSection {
    converged: bool,
    iterations: usize,
    final_residual: f64,
    ratios_after_first: Vec<f64>,
    ratios_bounded_by_half: bool,
}

#[derive(Serialize)]
struct ConjugacySection {
    deviation_plus: f64,
    deviation_minus: f64,
    budget_plus: f64,
    budget_minus: f64,
    pass: bool,
}

#[derive(Serialize)]
struct CoverageSection {
    samples: usize,
    failures: usize,
    fraction: f64,
    half_width: f64,
    bound: f64,
    pass: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    seed: u64,
    tail_constants: TailConstantsReport,
    norm_algebra: NormAlgebraReport,
    chord: ChordSection,
    conjugacy: ConjugacySection,
    coverage: CoverageSection,
    pass: bool,
}

pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> anyhow::Result<i32> {
    echo_resolved_config(cfg, out)?;
    let model = cfg.build_model()?;
    let opts = cfg.solver_options();
    let domain = ParamDomain {
        exclusions: cfg.model.exclusions.clone(),
    };
    let params: Vec<Vec<f64>> = cfg
        .params
        .grid
        .iter()
        .filter(|p| domain.contains(**p))
        .map(|&p| vec![p])
        .collect();
    if params.is_empty() {
        anyhow::bail!("no parameter grid points inside the good set");
    }
    let fam_plus = solve_family(&model, &params, &cfg.time_grid(Branch::Plus)?, &opts)
        .map_err(|e| anyhow::anyhow!("plus-branch solve failed: {e}"))?;
    let fam_minus = solve_family(&model, &params, &cfg.time_grid(Branch::Minus)?, &opts)
        .map_err(|e| anyhow::anyhow!("minus-branch solve failed: {e}"))?;
    let diag = &fam_plus.diagnostics[0];
    let ratios_after_first: Vec<f64> = diag.ratios.iter().skip(1).copied().collect();
    let chord = ChordSection {
        converged: diag.converged,
        iterations: diag.iterations,
        final_residual: diag.residuals.last().copied().unwrap_or(0.0),
        ratios_bounded_by_half: ratios_after_first.iter().all(|&r| r <= 0.5),
        ratios_after_first,
    };
    let t_end = (cfg.numerics.horizon * 0.4).min(20.0);
    let q_probe = [0.4f64];
    let rep_plus = conjugacy_check(&fam_plus, 0, &q_probe, t_end, cfg.numerics.ode_tol)
        .map_err(|e| anyhow::anyhow!("conjugacy check failed: {e}"))?;
    let rep_minus = conjugacy_check(&fam_minus, 0, &q_probe, -t_end, cfg.numerics.ode_tol)
        .map_err(|e| anyhow::anyhow!("conjugacy check failed: {e}"))?;
    let conjugacy = ConjugacySection {
        deviation_plus: rep_plus.max_deviation,
        deviation_minus: rep_minus.max_deviation,
        budget_plus: rep_plus.budget,
        budget_minus: rep_minus.budget,
        pass: rep_plus.max_deviation <= 1e-5 && rep_minus.max_deviation <= 1e-5,
    };
    let plus_map = TimeZeroMap::extended(&fam_plus);
    let minus_map = TimeZeroMap::extended(&fam_minus);
    let cov = coverage_estimate(
        &plus_map,
        &minus_map,
        &domain,
        cfg.delta,
        cfg.coverage_samples,
        cfg.seed,
    )
    .map_err(|e| anyhow::anyhow!("coverage estimate failed: {e}"))?;
    let coverage = CoverageSection {
        samples: cov.samples,
        failures: cov.failures,
        fraction: cov.fraction,
        half_width: cov.half_width,
        bound: cov.bound,
        pass: cov.pass,
    };
    let tail_constants = tail_constants_report()?;
    let norm_algebra = norm_algebra_report(cfg.seed)?;
    let pass = tail_constants.pass
        && norm_algebra.pass
        && chord.converged
        && chord.ratios_bounded_by_half
        && conjugacy.pass
        && coverage.pass;
    let report = VerifyReport {
        seed: cfg.seed,
        tail_constants,
        norm_algebra,
        chord,
        conjugacy,
        coverage,
        pass,
    };
    write_json(out, "verify.json", &report)?;
    Ok(if report.pass { 0 } else { 2 })
}

pub fn cmd_norms(cfg: &RunConfig, out: &Path) -> anyhow::Result<i32> {
    echo_resolved_config(cfg, out)?;
    let report = norm_algebra_report(cfg.seed)?;
    let pass = report.pass;
    write_json(out, "norms.json", &report)?;
    Ok(if pass { 0 } else { 2 })
}

pub fn cmd_tail_constants(cfg: &RunConfig, out: &Path) -> anyhow::Result<i32> {
    echo_resolved_config(cfg, out)?;
    let report = tail_constants_report()?;
    let pass = report.pass;
    write_json(out, "tail_constants.json", &report)?;
    Ok(if pass { 0 } else { 2 })
}
