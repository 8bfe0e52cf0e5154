//! Calibrated inference and evaluation reports.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{build_cost_matrix, matching_counts, predict_snapshot, solve_km, AssignmentError, ErrorField};
use crate::geometry::WorldCoord2D;
use crate::posnet::ModelParams;
use crate::scenario::Snapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Hard-EM models with image calibration.
    Proposed,
    /// Pretrained models, raw predictions.
    BaselineA,
    /// Pretrained models with image calibration.
    BaselineB,
    /// Hard-EM models, raw predictions.
    BaselineC,
    /// Pseudo-label models, raw predictions.
    PseudoLabel,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Proposed, Method::BaselineA, Method::BaselineB, Method::BaselineC, Method::PseudoLabel];

    pub fn calibrated(self) -> bool {
        matches!(self, Method::Proposed | Method::BaselineB)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::BaselineA => "baseline_a",
            Method::BaselineB => "baseline_b",
            Method::BaselineC => "baseline_c",
            Method::PseudoLabel => "pseudo_label",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown method '{0}' (expected one of proposed, baseline_a, baseline_b, baseline_c, pseudo_label)")]
pub struct UnknownMethod(pub String);

impl FromStr for Method {
    type Err = UnknownMethod;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| UnknownMethod(s.to_string()))
    }
}

/// Per-row output of calibrated inference.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedOutput {
    pub positions: Vec<WorldCoord2D>,
    pub raw_predictions: Vec<WorldCoord2D>,
    pub matched: Vec<Option<usize>>,
}

/// Matched CSI report their matched detection; unmatched CSI keep the model
/// prediction.
pub fn calibrated_predict(
    models: &[ModelParams],
    snapshot: &Snapshot,
    field: &ErrorField,
) -> Result<CalibratedOutput, AssignmentError> {
    let (cost, preds) = build_cost_matrix(snapshot, models, field)?;
    let assign = solve_km(&cost)?;
    let positions = assign
        .iter()
        .zip(&preds)
        .map(|(a, &p)| a.slot.map_or(p, |j| snapshot.detections[j]))
        .collect();
    Ok(CalibratedOutput { positions, raw_predictions: preds, matched: assign.iter().map(|a| a.slot).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    /// Mean over all test CSI.
    pub mean_error: f64,
    /// Mean of the per-station means.
    pub mean_error_bs_weighted: f64,
    pub per_bs_mean_error: Vec<f64>,
    pub per_bs_count: Vec<usize>,
    /// Sorted errors of every test CSI.
    pub cdf: Vec<f64>,
    /// Detection matching accuracy for calibrated methods.
    pub matching_accuracy: Option<f64>,
}

impl EvalReport {
    /// Builds a report from `(bs, error)` pairs.
    pub fn from_errors(method: Method, n_bs: usize, errors: &[(usize, f64)], matching: Option<f64>) -> Self {
        let mut per_sum = vec![0.0; n_bs];
        let mut per_count = vec![0; n_bs];
        for &(b, e) in errors {
            per_sum[b] += e;
            per_count[b] += 1;
        }
        let per_bs_mean_error: Vec<f64> = per_sum
            .iter()
            .zip(&per_count)
            .map(|(s, &n)| if n > 0 { s / n as f64 } else { f64::NAN })
            .collect();
        let mut cdf: Vec<f64> = errors.iter().map(|e| e.1).collect();
        cdf.sort_by(f64::total_cmp);
        let mean_error = if cdf.is_empty() { f64::NAN } else { cdf.iter().sum::<f64>() / cdf.len() as f64 };
        let present: Vec<f64> = per_bs_mean_error.iter().copied().filter(|v| !v.is_nan()).collect();
        let mean_error_bs_weighted = present.iter().sum::<f64>() / present.len().max(1) as f64;
        Self {
            method,
            mean_error,
            mean_error_bs_weighted,
            per_bs_mean_error,
            per_bs_count: per_count,
            cdf,
            matching_accuracy: matching,
        }
    }

    /// Empirical CDF at `x`.
    pub fn cdf_at(&self, x: f64) -> f64 {
        if self.cdf.is_empty() {
            return f64::NAN;
        }
        self.cdf.partition_point(|e| *e <= x) as f64 / self.cdf.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// `error,cdf` rows.
    pub fn cdf_csv(&self) -> String {
        let n = self.cdf.len() as f64;
        let mut s = String::from("error,cdf\n");
        for (i, e) in self.cdf.iter().enumerate() {
            s.push_str(&format!("{e},{}\n", (i + 1) as f64 / n));
        }
        s
    }
}

/// Evaluates a method on the test snapshots. `models` are the checkpoints the
/// method uses; `field` is required for calibrated methods.
pub fn evaluate(
    method: Method,
    models: &[ModelParams],
    test: &[Snapshot],
    field: Option<&ErrorField>,
) -> Result<EvalReport, AssignmentError> {
    if method.calibrated() && field.is_none() {
        return Err(AssignmentError::Config(format!("method {method} needs an error field")));
    }
    let per_snap: Vec<(Vec<(usize, f64)>, usize, usize)> = test
        .par_iter()
        .map(|snap| {
            let truth = snap.row_truth();
            let rows = snap.rows();
            let (positions, counts) = match field.filter(|_| method.calibrated()) {
                Some(f) => {
                    let out = calibrated_predict(models, snap, f)?;
                    let assign: Vec<_> = out
                        .matched
                        .iter()
                        .map(|&slot| crate::assignment::AssignmentVector { slot, n_detections: snap.detections.len() })
                        .collect();
                    (out.positions, matching_counts(&assign, snap))
                }
                None => (predict_snapshot(snap, models)?, (0, 0)),
            };
            let errs = rows.iter().zip(positions.iter().zip(&truth)).map(|(&(b, _), (p, t))| (b, p.distance(*t))).collect();
            Ok((errs, counts.0, counts.1))
        })
        .collect::<Result<_, AssignmentError>>()?;
    let mut errors = Vec::new();
    let (mut correct, mut total) = (0, 0);
    for (e, c, t) in per_snap {
        errors.extend(e);
        correct += c;
        total += t;
    }
    let matching = (method.calibrated() && total > 0).then(|| correct as f64 / total as f64);
    Ok(EvalReport::from_errors(method, models.len(), &errors, matching))
}

/// Reward (negated cost) matrix of one snapshot with the true and the KM
/// matches marked, as CSV: `row,col,reward,true_match,km_match`.
pub fn heatmap_csv(models: &[ModelParams], snapshot: &Snapshot, field: &ErrorField) -> Result<String, AssignmentError> {
    let (cost, _) = build_cost_matrix(snapshot, models, field)?;
    let assign = solve_km(&cost)?;
    let truth = snapshot.row_truth_detection();
    let mut s = String::from("row,col,reward,true_match,km_match\n");
    for r in 0..cost.n_rows {
        for c in 0..cost.n_cols {
            s.push_str(&format!(
                "{r},{c},{},{},{}\n",
                -cost.get(r, c),
                u8::from(truth[r] == Some(c)),
                u8::from(assign[r].slot == Some(c))
            ));
        }
    }
    Ok(s)
}
