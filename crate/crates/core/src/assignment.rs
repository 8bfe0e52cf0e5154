//! Matching of unlabeled CSI to image-derived positions: the spatial error
//! field that normalises costs, the cost matrix, the Kuhn–Munkres solver, the
//! nearest-neighbour baseline and label assembly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::WorldCoord2D;
use crate::posnet::{ModelParams, PosnetError};
use crate::scenario::{LabeledSample, Rect, Snapshot};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("{cols} detections cannot be matched to only {rows} CSI")]
    Infeasible { rows: usize, cols: usize },
    #[error("cost matrix entry ({row}, {col}) is not a finite non-negative number")]
    BadCost { row: usize, col: usize },
    #[error("error field needs at least one validation sample per station")]
    EmptyValidation,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Posnet(#[from] PosnetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorFieldConfig {
    /// Side length of the square bins (m).
    pub cell_size: f64,
    /// Smallest value the field may return (m).
    pub floor: f64,
    /// Bins with fewer samples fall back to the global RMSE.
    pub min_samples: usize,
}

impl Default for ErrorFieldConfig {
    fn default() -> Self {
        Self { cell_size: 10.0, floor: 0.5, min_samples: 3 }
    }
}

impl ErrorFieldConfig {
    pub fn validate(&self) -> Result<(), AssignmentError> {
        if !(self.cell_size > 0.0) || !(self.floor > 0.0) {
            return Err(AssignmentError::Config("cell_size and floor must be positive".into()));
        }
        Ok(())
    }
}

/// Grid-binned positioning RMSE per station, keyed by predicted location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorField {
    pub bounds: Rect,
    pub config: ErrorFieldConfig,
    pub nx: usize,
    pub ny: usize,
    /// Per station: row-major `ny x nx` bin values, already clamped.
    pub bins: Vec<Vec<f64>>,
    /// Per station global RMSE, already clamped.
    pub global: Vec<f64>,
}

impl ErrorField {
    /// Builds the field from `(predicted location, squared error)` pairs.
    pub fn from_residuals(
        bounds: Rect,
        config: ErrorFieldConfig,
        per_bs: &[Vec<(WorldCoord2D, f64)>],
    ) -> Result<Self, AssignmentError> {
        config.validate()?;
        let nx = ((bounds.width() / config.cell_size).ceil() as usize).max(1);
        let ny = ((bounds.height() / config.cell_size).ceil() as usize).max(1);
        let mut bins = Vec::with_capacity(per_bs.len());
        let mut global = Vec::with_capacity(per_bs.len());
        for res in per_bs {
            if res.is_empty() {
                return Err(AssignmentError::EmptyValidation);
            }
            let g = (res.iter().map(|r| r.1).sum::<f64>() / res.len() as f64).sqrt();
            let mut sum = vec![0.0; nx * ny];
            let mut count = vec![0usize; nx * ny];
            for &(p, e2) in res {
                let c = cell_index(&bounds, config.cell_size, nx, ny, p);
                sum[c] += e2;
                count[c] += 1;
            }
            bins.push(
                sum.iter()
                    .zip(&count)
                    .map(|(&s, &n)| {
                        let v = if n >= config.min_samples { (s / n as f64).sqrt() } else { g };
                        v.max(config.floor)
                    })
                    .collect(),
            );
            global.push(g.max(config.floor));
        }
        Ok(Self { bounds, config, nx, ny, bins, global })
    }

    /// A field returning `sigma` (clamped to the floor) everywhere.
    pub fn uniform(bounds: Rect, config: ErrorFieldConfig, n_bs: usize, sigma: f64) -> Self {
        let nx = ((bounds.width() / config.cell_size).ceil() as usize).max(1);
        let ny = ((bounds.height() / config.cell_size).ceil() as usize).max(1);
        let s = sigma.max(config.floor);
        Self { bounds, config, nx, ny, bins: vec![vec![s; nx * ny]; n_bs], global: vec![s; n_bs] }
    }

    pub fn n_bs(&self) -> usize {
        self.bins.len()
    }

    /// Error scale for station `bs` at predicted location `p`; locations
    /// outside the street are clamped onto the grid.
    pub fn sigma(&self, bs: usize, p: WorldCoord2D) -> f64 {
        self.bins[bs][cell_index(&self.bounds, self.config.cell_size, self.nx, self.ny, p)]
    }
}

fn cell_index(b: &Rect, cell: f64, nx: usize, ny: usize, p: WorldCoord2D) -> usize {
    let clamp = |v: f64, n: usize| -> usize {
        if v.is_nan() || v < 0.0 {
            0
        } else {
            (v as usize).min(n - 1)
        }
    };
    let ix = clamp((p.x - b.x_min) / cell, nx);
    let iy = clamp((p.y - b.y_min) / cell, ny);
    iy * nx + ix
}

/// Predicts every validation sample and bins squared errors by predicted
/// location.
pub fn estimate_error_field(
    models: &[ModelParams],
    validation: &[Vec<LabeledSample>],
    bounds: Rect,
    config: ErrorFieldConfig,
) -> Result<ErrorField, AssignmentError> {
    let residuals = models
        .iter()
        .zip(validation)
        .map(|(m, val)| {
            let preds = m.predict_batch(val.iter().map(|s| &s.csi))?;
            Ok(preds.into_iter().zip(val).map(|(p, s)| (p, p.distance_sq(s.position))).collect())
        })
        .collect::<Result<Vec<_>, PosnetError>>()?;
    ErrorField::from_residuals(bounds, config, &residuals)
}

/// Rows are CSI (BS-major), columns are detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub entries: Vec<f64>,
    /// `(bs, csi_index)` per row.
    pub row_meta: Vec<(usize, usize)>,
    /// Detection index per column.
    pub col_meta: Vec<usize>,
}

impl CostMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssignmentError> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let entries: Vec<f64> = rows.iter().flatten().copied().collect();
        if entries.len() != n_rows * n_cols {
            return Err(AssignmentError::Config("ragged cost rows".into()));
        }
        let m = Self {
            n_rows,
            n_cols,
            entries,
            row_meta: (0..n_rows).map(|r| (0, r)).collect(),
            col_meta: (0..n_cols).collect(),
        };
        m.check()?;
        Ok(m)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.n_cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.entries[r * self.n_cols..(r + 1) * self.n_cols]
    }

    fn check(&self) -> Result<(), AssignmentError> {
        match self.entries.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            Some(i) => Err(AssignmentError::BadCost { row: i / self.n_cols, col: i % self.n_cols }),
            None => Ok(()),
        }
    }

    /// Total cost of an assignment, summed in row order.
    pub fn total(&self, assignment: &[AssignmentVector]) -> f64 {
        assignment
            .iter()
            .enumerate()
            .filter_map(|(r, a)| a.slot.map(|c| self.get(r, c)))
            .sum()
    }
}

/// `||prediction - detection||^2 / sigma^2` for every row/column pair.
pub fn cost_matrix_from_predictions(
    predictions: &[WorldCoord2D],
    sigmas: &[f64],
    row_meta: Vec<(usize, usize)>,
    detections: &[WorldCoord2D],
) -> Result<CostMatrix, AssignmentError> {
    let n_rows = predictions.len();
    let n_cols = detections.len();
    let mut entries = Vec::with_capacity(n_rows * n_cols);
    for (p, s) in predictions.iter().zip(sigmas) {
        let inv = 1.0 / (s * s);
        entries.extend(detections.iter().map(|d| p.distance_sq(*d) * inv));
    }
    let m = CostMatrix { n_rows, n_cols, entries, row_meta, col_meta: (0..n_cols).collect() };
    m.check()?;
    Ok(m)
}

/// Predicts every CSI of a snapshot with its station's model and builds the
/// matching cost matrix. Returns the predictions in row order as well.
pub fn build_cost_matrix(
    snapshot: &Snapshot,
    models: &[ModelParams],
    field: &ErrorField,
) -> Result<(CostMatrix, Vec<WorldCoord2D>), AssignmentError> {
    let predictions = predict_snapshot(snapshot, models)?;
    let rows = snapshot.rows();
    let sigmas: Vec<f64> = rows.iter().zip(&predictions).map(|(&(b, _), &p)| field.sigma(b, p)).collect();
    let c = cost_matrix_from_predictions(&predictions, &sigmas, rows, &snapshot.detections)?;
    Ok((c, predictions))
}

/// Model output for every CSI of the snapshot in BS-major row order.
pub fn predict_snapshot(snapshot: &Snapshot, models: &[ModelParams]) -> Result<Vec<WorldCoord2D>, PosnetError> {
    let mut out = Vec::with_capacity(snapshot.n_csi());
    for (b, list) in snapshot.csi.iter().enumerate() {
        let tensors: Vec<_> = list.iter().map(crate::channel::csi_to_real).collect();
        out.extend(models[b].predict_batch(&tensors)?);
    }
    Ok(out)
}

/// Choice of one row among `n_detections` real slots plus the no-match slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentVector {
    pub slot: Option<usize>,
    pub n_detections: usize,
}

impl AssignmentVector {
    pub fn is_matched(&self) -> bool {
        self.slot.is_some()
    }

    /// Length `n_detections + 1`; the last entry is the no-match option.
    pub fn one_hot(&self) -> Vec<u8> {
        let mut v = vec![0; self.n_detections + 1];
        v[self.slot.unwrap_or(self.n_detections)] = 1;
        v
    }
}

/// Minimum-cost matching in which every detection is used exactly once and
/// every CSI takes at most one detection. Surplus CSI are matched to
/// zero-cost dummy columns, i.e. left unmatched.
pub fn solve_km(c: &CostMatrix) -> Result<Vec<AssignmentVector>, AssignmentError> {
    let (n, m) = (c.n_rows, c.n_cols);
    if m > n {
        return Err(AssignmentError::Infeasible { rows: n, cols: m });
    }
    let cols = hungarian(n, |i, j| if j < m { c.get(i, j) } else { 0.0 });
    Ok(cols
        .into_iter()
        .map(|j| AssignmentVector { slot: (j < m).then_some(j), n_detections: m })
        .collect())
}

/// Square Hungarian method with row/column potentials, O(n^3). Returns the
/// column assigned to each row.
fn hungarian(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Row-wise argmin (lowest index on ties); rows whose best cost exceeds
/// `threshold` stay unmatched. Several rows may share a column.
pub fn nearest_neighbour_match(c: &CostMatrix, threshold: f64) -> Vec<AssignmentVector> {
    (0..c.n_rows)
        .map(|r| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in c.row(r).iter().enumerate() {
                if best.is_none_or(|(_, bv)| v < bv) {
                    best = Some((j, v));
                }
            }
            let slot = best.filter(|&(_, v)| v <= threshold).map(|(j, _)| j);
            AssignmentVector { slot, n_detections: c.n_cols }
        })
        .collect()
}

/// Default no-match threshold: 99th percentile of validation squared errors
/// divided by the squared floor of the error field.
pub fn nn_threshold(validation_sq_errors: &[f64], floor: f64) -> f64 {
    if validation_sq_errors.is_empty() {
        return f64::INFINITY;
    }
    let mut v = validation_sq_errors.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((0.99 * (v.len() - 1) as f64).round() as usize).min(v.len() - 1);
    v[idx] / (floor * floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub targets: Vec<WorldCoord2D>,
    pub matched: Vec<bool>,
}

impl LabelSet {
    pub fn n_matched(&self) -> usize {
        self.matched.iter().filter(|m| **m).count()
    }
}

/// Matched CSI take their detection as label; unmatched CSI are labeled with
/// the model's own prediction.
pub fn assemble_labels(
    assignments: &[AssignmentVector],
    detections: &[WorldCoord2D],
    predictions: &[WorldCoord2D],
) -> LabelSet {
    let targets = assignments
        .iter()
        .zip(predictions)
        .map(|(a, &p)| a.slot.map_or(p, |j| detections[j]))
        .collect();
    let matched = assignments.iter().map(AssignmentVector::is_matched).collect();
    LabelSet { targets, matched }
}

/// Fraction of detections taken by the CSI of their true vehicle, or `None`
/// when the snapshot has no detections.
pub fn matching_accuracy(assignments: &[AssignmentVector], snapshot: &Snapshot) -> Option<f64> {
    let (correct, total) = matching_counts(assignments, snapshot);
    (total > 0).then(|| correct as f64 / total as f64)
}

/// `(correct, total)` detection counts behind [`matching_accuracy`].
pub fn matching_counts(assignments: &[AssignmentVector], snapshot: &Snapshot) -> (usize, usize) {
    let truth = snapshot.row_truth_detection();
    let total = snapshot.detections.len();
    let correct = (0..total)
        .filter(|&j| {
            truth
                .iter()
                .zip(assignments)
                .any(|(t, a)| *t == Some(j) && a.slot == Some(j))
        })
        .count();
    (correct, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn street() -> Rect {
        Rect { x_min: 0.0, x_max: 100.0, y_min: -10.0, y_max: 10.0 }
    }

    #[test]
    fn perfect_model_sits_at_floor() {
        let res = vec![(0..50).map(|i| (WorldCoord2D::new(i as f64 * 2.0, 0.0), 0.0)).collect()];
        let f = ErrorField::from_residuals(street(), ErrorFieldConfig::default(), &res).unwrap();
        assert!(f.bins[0].iter().all(|v| *v == 0.5));
        assert_eq!(f.global[0], 0.5);
    }

    #[test]
    fn uniform_error_is_constant() {
        let res = vec![(0..200).map(|i| (WorldCoord2D::new(i as f64 * 0.5, (i % 7) as f64 - 3.0), 9.0)).collect()];
        let f = ErrorField::from_residuals(street(), ErrorFieldConfig::default(), &res).unwrap();
        for x in [1.0, 33.0, 99.0, 500.0, -20.0] {
            assert!((f.sigma(0, WorldCoord2D::new(x, 2.0)) - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_bins_fall_back_to_global() {
        let mut res: Vec<(WorldCoord2D, f64)> = (0..30).map(|_| (WorldCoord2D::new(5.0, 0.0), 4.0)).collect();
        res.push((WorldCoord2D::new(95.0, 0.0), 400.0));
        let f = ErrorField::from_residuals(street(), ErrorFieldConfig::default(), &[res]).unwrap();
        let g = ((30.0 * 4.0 + 400.0) / 31.0f64).sqrt();
        assert!((f.sigma(0, WorldCoord2D::new(95.0, 0.0)) - g).abs() < 1e-12);
        assert!((f.sigma(0, WorldCoord2D::new(5.0, 0.0)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cost_entries() {
        let c = cost_matrix_from_predictions(
            &[WorldCoord2D::new(0.0, 0.0), WorldCoord2D::new(3.0, 4.0)],
            &[5.0, 10.0],
            vec![(0, 0), (0, 1)],
            &[WorldCoord2D::new(3.0, 4.0)],
        )
        .unwrap();
        assert_eq!(c.get(0, 0), 1.0);
        assert_eq!(c.get(1, 0), 0.0);
    }

    #[test]
    fn km_small_cases() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = solve_km(&c).unwrap();
        assert_eq!(a[0].slot, Some(0));
        assert_eq!(a[1].slot, Some(1));
        assert_eq!(c.total(&a), 2.0);
        let one = CostMatrix::from_rows(&[vec![3.5]]).unwrap();
        assert_eq!(solve_km(&one).unwrap()[0].slot, Some(0));
    }

    #[test]
    fn km_rejects_more_detections_than_csi() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(solve_km(&c), Err(AssignmentError::Infeasible { rows: 1, cols: 2 }));
    }

    #[test]
    fn km_without_detections_leaves_all_unmatched() {
        let c = CostMatrix::from_rows(&[vec![], vec![]]).unwrap();
        let a = solve_km(&c).unwrap();
        assert!(a.iter().all(|x| x.slot.is_none()));
        assert_eq!(a[0].one_hot(), vec![1]);
    }

    #[test]
    fn nn_examples() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = nearest_neighbour_match(&c, f64::INFINITY);
        assert_eq!((a[0].slot, a[1].slot), (Some(0), Some(1)));
        let c = CostMatrix::from_rows(&[vec![1.0, 5.0], vec![1.0, 5.0]]).unwrap();
        let a = nearest_neighbour_match(&c, f64::INFINITY);
        assert_eq!((a[0].slot, a[1].slot), (Some(0), Some(0)));
        let a = nearest_neighbour_match(&c, 0.5);
        assert!(a.iter().all(|x| x.slot.is_none()));
    }

    #[test]
    fn nn_threshold_percentile() {
        let errs: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(nn_threshold(&errs, 0.5), 99.0 / 0.25);
    }

    #[test]
    fn label_assembly() {
        let dets = [WorldCoord2D::new(1.0, 1.0), WorldCoord2D::new(2.0, 2.0), WorldCoord2D::new(3.0, 3.0)];
        let preds: Vec<WorldCoord2D> = (0..5).map(|i| WorldCoord2D::new(-(i as f64), 0.0)).collect();
        let slots = [Some(2), None, Some(0), Some(1), None];
        let a: Vec<AssignmentVector> = slots.iter().map(|&s| AssignmentVector { slot: s, n_detections: 3 }).collect();
        let l = assemble_labels(&a, &dets, &preds);
        assert_eq!(l.n_matched(), 3);
        assert_eq!(l.targets[0], dets[2]);
        assert_eq!(l.targets[1], preds[1]);
        assert_eq!(a[1].one_hot(), vec![0, 0, 0, 1]);
    }
}
