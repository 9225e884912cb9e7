use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{score, Metric};
use crate::error::{Error, Result};
use crate::exit::{ExitPolicy, ExitTable, ExitTrace, PolicyKind};
use crate::model::ExitTopology;

/// Evenly spaced thresholds strictly inside `(1/n_classes, 1)`: the 11
/// interior points of a 13-point grid.
pub fn threshold_grid(n_classes: usize) -> Result<Vec<f64>> {
    if n_classes < 2 {
        return Err(Error::validation("threshold grid needs at least 2 classes"));
    }
    let lo = 1.0 / n_classes as f64;
    Ok((1..=11).map(|k| lo + k as f64 * (1.0 - lo) / 12.0).collect())
}

/// How layers are charged for an instance leaving at classifier `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedupMode {
    /// `L_i`: one shared pass.
    #[serde(rename = "ee")]
    EarlyExit,
    /// `L_1 + ... + L_i`: every model in the cascade up to `i` ran.
    #[serde(rename = "mm")]
    MultiModel,
}

/// `S_1..S_M`: instances leaving at each classifier.
pub fn exit_counts(traces: &[ExitTrace], num_exits: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; num_exits];
    for t in traces {
        if t.exit == 0 || t.exit > num_exits {
            return Err(Error::validation(format!("trace exit {} outside 1..={num_exits}", t.exit)));
        }
        counts[t.exit - 1] += 1;
    }
    Ok(counts)
}

/// `Σ_i S_i·c_i / (L_M · Σ_i S_i)` with `c_i` the layer cost of mode.
pub fn speedup_from_counts(counts: &[usize], topology: &ExitTopology, mode: SpeedupMode) -> Result<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::validation("speedup of an empty trace set"));
    }
    let layers: usize = counts
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            s * match mode {
                SpeedupMode::EarlyExit => topology.exit_layer(i + 1),
                SpeedupMode::MultiModel => topology.cascade_cost(i + 1),
            }
        })
        .sum();
    Ok(layers as f64 / (topology.depth() * total) as f64)
}

pub fn speedup_ratio(traces: &[ExitTrace], topology: &ExitTopology, mode: SpeedupMode) -> Result<f64> {
    let counts = exit_counts(traces, topology.num_exits())?;
    speedup_from_counts(&counts, topology, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub speedup: f64,
    pub score: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolatedPoint {
    pub target: f64,
    /// Absent when no pair of points brackets the target.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub regime: String,
    pub policy: PolicyKind,
    pub mode: SpeedupMode,
    pub points: Vec<CurvePoint>,
    pub interpolated: Vec<InterpolatedPoint>,
}

impl CurveSet {
    pub fn new(regime: &str, policy: PolicyKind, mode: SpeedupMode, points: Vec<CurvePoint>, targets: &[f64]) -> Self {
        let interpolated = interpolate_at(&points, targets);
        Self {
            regime: regime.to_string(),
            policy,
            mode,
            points,
            interpolated,
        }
    }
}

/// One point per threshold, from precomputed classifier outputs.
pub fn sweep(
    table: &ExitTable,
    policy: &ExitPolicy,
    thresholds: &[f64],
    mode: SpeedupMode,
    metric: Metric,
    n_classes: usize,
) -> Result<Vec<CurvePoint>> {
    let topology = ExitTopology::new(table.layers.clone())?;
    let labels = table.labels()?;
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|t| {
            let traces = table.traces(&policy.with_threshold(t))?;
            let preds: Vec<usize> = traces.iter().map(|tr| tr.pred).collect();
            let counts = exit_counts(&traces, topology.num_exits())?;
            Ok(CurvePoint {
                threshold: t,
                speedup: speedup_from_counts(&counts, &topology, mode)?,
                score: score(metric, &preds, &labels, n_classes)?,
                counts,
            })
        })
        .collect()
}

/// Fixed speedup targets: `1/N, 1/4, 1/2, 3/4, 1` for depth `N`, plus
/// `1.375` and `1.75` for cascades, whose cost can exceed a single model.
pub fn target_ratios(depth: usize, mode: SpeedupMode) -> Vec<f64> {
    let mut t = vec![1.0 / depth as f64, 0.25, 0.5, 0.75, 1.0];
    if mode == SpeedupMode::MultiModel {
        t.extend([1.375, 1.75]);
    }
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Linear interpolation of score against speedup. Targets outside the
/// observed range are absent; there is no extrapolation.
pub fn interpolate_at(points: &[CurvePoint], targets: &[f64]) -> Vec<InterpolatedPoint> {
    let mut xy: Vec<(f64, f64)> = points.iter().map(|p| (p.speedup, p.score)).collect();
    xy.sort_by(|a, b| a.0.total_cmp(&b.0));
    targets
        .iter()
        .map(|&target| InterpolatedPoint {
            target,
            score: interpolate(&xy, target),
        })
        .collect()
}

fn interpolate(xy: &[(f64, f64)], x: f64) -> Option<f64> {
    if let Some(&(_, y)) = xy.iter().find(|p| p.0 == x) {
        return Some(y);
    }
    xy.windows(2).find_map(|w| {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        (x0 < x && x < x1).then(|| y0 + (y1 - y0) * (x - x0) / (x1 - x0))
    })
}

/// `threshold,speedup,score,S_1..S_M`.
pub fn curve_csv(points: &[CurvePoint], num_exits: usize) -> String {
    let mut out = String::from("threshold,speedup,score");
    for i in 1..=num_exits {
        let _ = write!(out, ",S_{i}");
    }
    out.push('\n');
    for p in points {
        let _ = write!(out, "{},{},{}", p.threshold, p.speedup, p.score);
        for c in &p.counts {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

pub fn write_curve_csv(path: &Path, points: &[CurvePoint], num_exits: usize) -> Result<()> {
    fs::write(path, curve_csv(points, num_exits)).map_err(|e| Error::io(path, e))
}
