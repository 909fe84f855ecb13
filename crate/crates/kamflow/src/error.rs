use thiserror::Error;

/// Errors produced by the solver pipeline.
#[derive(Debug, Error)]
pub enum KamError {
    #[error("grid too coarse: {nodes} nodes per axis but order {order} needs at least {needed} (aliasing)")]
    Aliasing {
        nodes: usize,
        order: usize,
        needed: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shift amplitude {amplitude:.6} exceeds the single-chart bound 1/2")]
    ShiftTooLarge { amplitude: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("divergent integral: tail exponent {exponent} is not integrable")]
    DivergentIntegral { exponent: f64 },

    #[error("parameter data missing: {0}")]
    MissingParameterData(String),

    #[error("Lipschitz bound {declared:.6} violated by pair ({left:?}, {right:?}): quotient {quotient:.6}")]
    LipschitzViolation {
        declared: f64,
        left: Vec<f64>,
        right: Vec<f64>,
        quotient: f64,
    },

    #[error("point {point:?} outside admissible domain: {context}")]
    DomainError { point: Vec<f64>, context: String },

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("chord iteration diverged: {0}")]
    Divergence(String),

    #[error("chord iteration did not converge within {max_iter} steps; last residual {residual:.3e}")]
    NonConvergence {
        max_iter: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("step size underflow at t = {t:.6} (stiffness)")]
    Stiffness { t: f64 },

    #[error("target {target:?} not covered by the time-zero embedding (margin delta = {margin:.3e})")]
    NotCovered { target: Vec<f64>, margin: f64 },

    #[error("glue failed on the {branch} branch: {source}")]
    GlueFailed {
        branch: &'static str,
        #[source]
        source: Box<KamError>,
    },
}
