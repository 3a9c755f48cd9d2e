//! Per-iteration trace rows shared by every algorithm.

use crate::linalg::Mat;

/// One row per iteration; absent quantities stay `None` and are written as
/// empty CSV fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    /// `||X^k - 1x̄ᵀ||` (Frobenius).
    pub consensus_error: Option<f64>,
    /// `||∇f(x̄^k)||`.
    pub optimality_gap: Option<f64>,
    /// `max_i ||x_i^k - x*||`.
    pub max_node_error: Option<f64>,
    pub lyapunov: Option<f64>,
    /// Largest row norm of the innovation (estimate minus tracked value).
    pub innovation_max: Option<f64>,
    pub scale_s: Option<f64>,
    /// Mean over nodes of the bits sent so far.
    pub bits_cumulative: f64,
    pub seed: Option<u64>,
}

pub const TRACE_COLUMNS: [&str; 9] = [
    "iter",
    "consensus_error",
    "optimality_gap",
    "max_node_error",
    "lyapunov",
    "innovation_max",
    "scale_s",
    "bits_cumulative",
    "seed",
];

impl TraceRecord {
    /// Value of a float column by name.
    pub fn column(&self, name: &str) -> Option<f64> {
        match name {
            "iter" => Some(self.iter as f64),
            "consensus_error" => self.consensus_error,
            "optimality_gap" => self.optimality_gap,
            "max_node_error" => self.max_node_error,
            "lyapunov" => self.lyapunov,
            "innovation_max" => self.innovation_max,
            "scale_s" => self.scale_s,
            "bits_cumulative" => Some(self.bits_cumulative),
            "seed" => self.seed.map(|s| s as f64),
            _ => None,
        }
    }
}

/// Output of one algorithm run.
#[derive(Debug, Clone)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    /// Iterates after the last recorded row's update.
    pub final_x: Mat,
    /// Iterations at which the scaled innovation left the unit ball and was
    /// clamped.
    pub scaling_violations: Vec<usize>,
    /// `X^k` for every row, when requested.
    pub iterates: Vec<Mat>,
}

impl Trace {
    pub fn column(&self, name: &str) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.column(name)).collect()
    }
}
