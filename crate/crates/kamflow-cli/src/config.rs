//! Run configuration: schema-validated JSON with all defaults recorded.

use kamflow::decay_norms::{Branch, TimeGrid};
use kamflow::hamiltonian::{DecayProfile, HamiltonianModel, Polynomial, SeparableMode};
use kamflow::homological::HeOptions;
use kamflow::torus_fourier::TorusFun;
use kamflow::torus_solver::SolverOptions;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum RunMode {
    Integrable,
    NearIntegrable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "type", rename_all = "lowercase")]
pub enum DecaySpec {
    Poly { exponent: f64 },
    Exp { rate: f64 },
}

impl DecaySpec {
    pub fn to_profile(&self) -> DecayProfile {
        match *self {
            DecaySpec::Poly { exponent } => DecayProfile::Poly { exponent },
            DecaySpec::Exp { rate } => DecayProfile::Exp { rate },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    /// harmonic index k of the angle factor cos(2 pi k q + phase)
    pub harmonic: usize,
    #[serde(default)]
    pub phase: f64,
    /// coefficients of the action polynomial, low degree first
    pub action: Vec<f64>,
    pub decay: DecaySpec,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_n")]
    pub n: usize,
    /// coefficients of the integrable part h(p), low degree first
    pub h: Vec<f64>,
    #[serde(default)]
    pub modes: Vec<ModeSpec>,
    #[serde(default = "default_l")]
    pub l: f64,
    #[serde(default)]
    pub eps: f64,
    #[serde(default = "default_upsilon")]
    pub upsilon: f64,
    /// excluded open parameter intervals (near-integrable good set holes)
    #[serde(default)]
    pub exclusions: Vec<(f64, f64)>,
}

fn default_n() -> usize {
    1
}
fn default_l() -> f64 {
    2.0
}
fn default_upsilon() -> f64 {
    10.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsSpec {
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_first_step")]
    pub first_step: f64,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_ode_tol")]
    pub ode_tol: f64,
}

fn default_order() -> usize {
    16
}
fn default_sigma() -> f64 {
    1.0
}
fn default_first_step() -> f64 {
    0.05
}
fn default_ratio() -> f64 {
    1.05
}
fn default_horizon() -> f64 {
    50.0
}
fn default_tol() -> f64 {
    1e-9
}
fn default_max_iter() -> usize {
    25
}
fn default_ode_tol() -> f64 {
    1e-10
}

impl Default for NumericsSpec {
    fn default() -> Self {
        Self {
            order: default_order(),
            sigma: default_sigma(),
            first_step: default_first_step(),
            ratio: default_ratio(),
            horizon: default_horizon(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            ode_tol: default_ode_tol(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub numerics: NumericsSpec,
    pub params: ParamsSpec,
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_coverage_samples")]
    pub coverage_samples: usize,
    /// near-identity inversion margin delta used in reject reports
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_mode() -> RunMode {
    RunMode::Integrable
}
fn default_seed() -> u64 {
    1
}
fn default_coverage_samples() -> usize {
    2000
}
fn default_delta() -> f64 {
    1e-5
}

impl RunConfig {
    pub fn build_model(&self) -> anyhow::Result<HamiltonianModel> {
        if self.model.n != 1 {
            anyhow::bail!("only n = 1 models are supported by the driver");
        }
        let h = Polynomial::univariate(&self.model.h)
            .map_err(|e| anyhow::anyhow!("invalid h polynomial: {e}"))?;
        let mut modes = Vec::new();
        for m in &self.model.modes {
            if m.harmonic == 0 {
                anyhow::bail!("mode harmonic must be >= 1");
            }
            let k = m.harmonic;
            let phase = m.phase;
            let angle = TorusFun::from_fn(1, 1, k, move |q| {
                vec![(std::f64::consts::TAU * k as f64 * q[0] + phase).cos()]
            });
            modes.push(SeparableMode {
                angle,
                action: Polynomial::univariate(&m.action)
                    .map_err(|e| anyhow::anyhow!("invalid action polynomial: {e}"))?,
                decay: m.decay.to_profile(),
                amplitude: m.amplitude,
            });
        }
        Ok(HamiltonianModel {
            n: 1,
            h,
            remainder: None,
            modes,
            l: self.model.l,
            eps: self.model.eps,
            upsilon: self.model.upsilon,
        })
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            order: self.numerics.order,
            sigma: self.numerics.sigma,
            l: self.model.l,
            tol: self.numerics.tol,
            max_iter: self.numerics.max_iter,
            he: HeOptions::default(),
        }
    }

    pub fn time_grid(&self, branch: Branch) -> anyhow::Result<TimeGrid> {
        TimeGrid::geometric(
            branch,
            self.numerics.first_step,
            self.numerics.ratio,
            self.numerics.horizon,
        )
        .map_err(|e| anyhow::anyhow!("invalid time grid: {e}"))
    }
}

/// Parse a config file; JSON syntax errors carry line/column diagnostics.
pub fn load_config(path: &std::path::Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        anyhow::anyhow!(
            "config error in {} at line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        )
    })
}
