use super::ExitTable;
use crate::autograd::kernels::log_sum_exp;
use crate::error::{Error, Result};

const GRID_STEP: f64 = 0.25;
const GRID_POINTS: usize = 16;

/// `0.25, 0.5, ..., 4.0`.
pub fn temperature_grid() -> Vec<f64> {
    (1..=GRID_POINTS).map(|k| k as f64 * GRID_STEP).collect()
}

/// Mean negative log-likelihood of `logits / temperature`.
pub fn mean_nll(logits: &[Vec<f64>], labels: &[usize], temperature: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
            log_sum_exp(&scaled) - scaled[y]
        })
        .sum();
    total / labels.len() as f64
}

/// Grid temperature with the lowest mean NLL; exact ties go to the value
/// closest to 1.
pub fn select_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::validation(format!(
            "calibration needs matching nonempty logits and labels, got {} and {}",
            logits.len(),
            labels.len()
        )));
    }
    let mut best: (f64, f64) = (f64::INFINITY, 1.0);
    for t in temperature_grid() {
        let nll = mean_nll(logits, labels, t);
        if nll < best.0 || (nll == best.0 && (t - 1.0).abs() < (best.1 - 1.0).abs()) {
            best = (nll, t);
        }
    }
    Ok(best.1)
}

/// One temperature per classifier, fitted on held-out outputs.
pub fn calibrate_temperature(table: &ExitTable) -> Result<Vec<f64>> {
    let labels = table.labels()?;
    (0..table.num_exits())
        .map(|e| {
            let logits: Vec<Vec<f64>> = table.rows.iter().map(|r| r.logits[e].clone()).collect();
            select_temperature(&logits, &labels)
        })
        .collect()
}
