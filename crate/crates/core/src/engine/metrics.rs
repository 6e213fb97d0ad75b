use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Metrics of the network average `x_bar` at one recorded iteration.
///
/// `iter` counts completed rounds, so `iter = 0` is the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub iter: u64,
    /// `f(x_bar) - f*`
    pub suboptimality: f64,
    /// `||grad f(x_bar)||^2`
    pub grad_norm_sq: f64,
    /// `sum_i ||x_bar - x_i||^2`
    pub consensus_error: f64,
    pub bytes_cum: u64,
    /// Agents active in the round that produced this state; 0 for `iter = 0`.
    pub active_count: usize,
    /// Mean of `||m_i||^2` over agents. Not part of the CSV.
    #[serde(skip)]
    pub momentum_sq_mean: f64,
    /// Largest per-agent clipped-gradient deviation, when tracked. Not part of the CSV.
    #[serde(skip)]
    pub deviation_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<Record>,
    pub iterations: u64,
    pub total_bytes: u64,
    pub total_messages: u64,
    /// Fraction of gradient coordinates clamped by clipping, over all active steps.
    pub clipped_fraction: f64,
    /// Maximum of the tracked gradient deviations, if tracked.
    pub max_deviation: Option<f64>,
    /// `x_bar` after the last round.
    pub final_mean: Vec<f64>,
}

impl RunMetrics {
    pub fn last(&self) -> &Record {
        self.records.last().expect("a run always records its initial state")
    }

    /// Average of `||grad f(x_bar_t)||^2` over recorded `t < T`.
    pub fn mean_grad_norm_sq(&self) -> f64 {
        let before: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.iter < self.iterations)
            .map(|r| r.grad_norm_sq)
            .collect();
        before.iter().sum::<f64>() / before.len().max(1) as f64
    }

    /// Writes `iter, suboptimality, grad_norm_sq, consensus_error, bytes_cum, active_count`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}
