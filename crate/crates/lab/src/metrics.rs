//! Tracking metrics and aggregation.

use thiserror::Error;
use valve_core::{ControllerKind, EpisodeTrace};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("cannot score an empty trace")]
    EmptyTrace,
}

/// L2 norm of the tracking error, the figure reported as "MSE".
pub fn mse(trace: &EpisodeTrace) -> Result<f64, MetricError> {
    trace.mse().ok_or(MetricError::EmptyTrace)
}

/// Per-step mean of the squared tracking error.
pub fn mean_squared_error(trace: &EpisodeTrace) -> Result<f64, MetricError> {
    trace.mean_squared_error().ok_or(MetricError::EmptyTrace)
}

/// Mean and sample standard deviation (`n - 1`; zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of the tie-averaged ranks.
/// `None` for fewer than two points or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Trailing moving average; the first `window - 1` entries average what is
/// available.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= window {
            sum -= xs[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Element-wise mean of equally long curves.
pub fn mean_curve(curves: &[&[f64]]) -> Vec<f64> {
    let Some(len) = curves.iter().map(|c| c.len()).min() else {
        return Vec::new();
    };
    (0..len).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64).collect()
}

/// One aggregated line of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// `None` when aggregated over valves.
    pub valve: Option<u8>,
    pub controller: ControllerKind,
    pub condition: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
    pub seeds: Vec<u64>,
}

impl MetricReport {
    pub fn push(&mut self, valve: Option<u8>, controller: ControllerKind, condition: impl Into<String>, values: &[f64]) {
        let (mean, std) = mean_std(values);
        self.rows.push(ReportRow { valve, controller, condition: condition.into(), mean, std, count: values.len() });
    }

    pub fn find(&self, valve: Option<u8>, controller: ControllerKind, condition: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.valve == valve && r.controller == controller && r.condition == condition)
    }
}
