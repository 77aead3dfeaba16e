use serde::Serialize;

/// One inner iteration of a primal-dual solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual: f64,
    /// Energy of the iterate, present only on recorded iterations.
    pub energy: Option<f64>,
}

/// Summary of a primal-dual solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
    pub energy: f64,
    pub converged: bool,
    pub sigma: f64,
    pub tau: f64,
    pub operator_norm: f64,
    pub history: Vec<IterationRecord>,
}

impl SolveReport {
    /// Residuals averaged over consecutive windows of `window` iterations.
    pub fn smoothed_residuals(&self, window: usize) -> Vec<f64> {
        self.history
            .chunks(window.max(1))
            .filter(|c| c.len() == window.max(1))
            .map(|c| c.iter().map(|r| r.residual).sum::<f64>() / c.len() as f64)
            .collect()
    }
}
