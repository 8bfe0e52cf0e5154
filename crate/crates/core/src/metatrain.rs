//! Training: supervised pretraining, the matching-based hard-EM loop with
//! meta-learned per-sample weights, the pseudo-labeling baseline and a
//! diagnostic monitor for the learning-rate bound that guarantees a
//! non-increasing validation loss.

use rand::seq::index;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{
    assemble_labels, build_cost_matrix, estimate_error_field, matching_counts, predict_snapshot, solve_km,
    AssignmentError, ErrorField, ErrorFieldConfig,
};
use crate::channel::{csi_to_real, CsiTensor};
use crate::geometry::WorldCoord2D;
use crate::posnet::{ArchSpec, GradientVector, ModelParams, Pair, PosnetError};
use crate::rng::{stream, task_rng, TaskRng};
use crate::scenario::{LabeledSample, Rect, Snapshot};

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Posnet(#[from] PosnetError),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at iteration {iteration}, station {bs}")]
    NonFinite { iteration: usize, bs: usize, what: &'static str },
    #[error("station {0} has no labeled samples")]
    EmptyLabeled(usize),
    #[error("training state: {0}")]
    State(String),
}

/// Step-decay learning rate: `initial * factor^floor((t - start) / period)`
/// once the 1-based step `t` exceeds `start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub period: usize,
    pub start: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, factor: 1.0, period: 1, start: 0 }
    }

    pub fn rate(&self, t: usize) -> f64 {
        if t <= self.start {
            self.initial
        } else {
            self.initial * self.factor.powi(((t - self.start) / self.period) as i32)
        }
    }
}

/// How raw meta-weights become loss coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `1 + xi * raw / max|raw|`
    Rectified,
    /// `max(raw, 0)`, rescaled to mean one over matched samples.
    Relu,
    /// Every sample has weight one.
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Share of the unlabeled term in the combined objective.
    pub gamma: f64,
    /// Rectification scale.
    pub xi: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: LrSchedule,
    pub iterations: usize,
    /// Snapshots per hard-EM mini-batch.
    pub em_batch: usize,
    pub em_lr: LrSchedule,
    /// Iterations between error-field re-estimates.
    pub sigma_period: usize,
    pub weighting: Weighting,
    pub error_field: ErrorFieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            xi: 1.0,
            pretrain_epochs: 5000,
            pretrain_batch: 32,
            pretrain_lr: LrSchedule { initial: 1e-3, factor: 0.9, period: 100, start: 2000 },
            iterations: 10000,
            em_batch: 24,
            em_lr: LrSchedule { initial: 1e-3, factor: 0.9, period: 200, start: 5000 },
            sigma_period: 500,
            weighting: Weighting::Rectified,
            error_field: ErrorFieldConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Returns the first violated constraint, naming the offending field.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return bad(format!("xi must be in [0, 1], got {}", self.xi));
        }
        for (name, v) in [
            ("pretrain_batch", self.pretrain_batch),
            ("em_batch", self.em_batch),
            ("sigma_period", self.sigma_period),
            ("pretrain_lr.period", self.pretrain_lr.period),
            ("em_lr.period", self.em_lr.period),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        for (name, s) in [("pretrain_lr", &self.pretrain_lr), ("em_lr", &self.em_lr)] {
            if !(s.initial > 0.0 && s.initial.is_finite()) {
                return bad(format!("{name}.initial must be positive, got {}", s.initial));
            }
            if !(s.factor > 0.0 && s.factor <= 1.0) {
                return bad(format!("{name}.factor must be in (0, 1], got {}", s.factor));
            }
        }
        self.error_field
            .validate()
            .map_err(|e| TrainError::Config(format!("error_field: {e}")))
    }
}

fn pairs(samples: &[LabeledSample]) -> Vec<Pair<'_>> {
    samples.iter().map(|s| (&s.csi, s.position)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Full training-set MSE before the first epoch.
    pub initial_loss: f64,
    /// Mean mini-batch loss of every epoch.
    pub epoch_loss: Vec<f64>,
    /// Full training-set MSE after the last epoch.
    pub final_loss: f64,
}

/// Supervised mini-batch SGD on one station's labeled set.
pub fn pretrain_model(
    model: &ModelParams,
    labeled: &[LabeledSample],
    cfg: &TrainConfig,
    seed: u64,
    bs: usize,
) -> Result<(ModelParams, PretrainLog), TrainError> {
    if labeled.is_empty() {
        return Err(TrainError::EmptyLabeled(bs));
    }
    let all = pairs(labeled);
    let initial_loss = model.labeled_loss(&all)?;
    let mut m = model.clone();
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 1..=cfg.pretrain_epochs {
        let mut rng = task_rng(seed, &[stream::PRETRAIN, bs as u64, epoch as u64]);
        order.shuffle(&mut rng);
        let lr = cfg.pretrain_lr.rate(epoch);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.pretrain_batch) {
            let batch: Vec<Pair> = chunk.iter().map(|&i| all[i]).collect();
            let (loss, g) = m.grad(&batch, None)?;
            m.apply_step(&g, lr);
            sum += loss;
            batches += 1;
        }
        epoch_loss.push(sum / batches as f64);
        if epoch % 100 == 0 {
            log::debug!("pretrain bs {bs} epoch {epoch}: loss {:.4}", sum / batches as f64);
        }
    }
    let final_loss = m.labeled_loss(&all)?;
    Ok((m, PretrainLog { initial_loss, epoch_loss, final_loss }))
}

/// Freshly initialised models, one per station, each from its own stream.
pub fn init_models(arch: &ArchSpec, n_bs: usize, seed: u64) -> Result<Vec<ModelParams>, TrainError> {
    (0..n_bs)
        .map(|b| Ok(ModelParams::init(arch.clone(), &mut task_rng(seed, &[stream::INIT, b as u64]))?))
        .collect()
}

/// Pretrains every station independently (and in parallel).
pub fn pretrain(
    models: &[ModelParams],
    labeled: &[Vec<LabeledSample>],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Vec<ModelParams>, Vec<PretrainLog>), TrainError> {
    cfg.validate()?;
    let results: Vec<_> = models
        .par_iter()
        .zip(labeled)
        .enumerate()
        .map(|(b, (m, l))| pretrain_model(m, l, cfg, seed, b))
        .collect::<Result<_, _>>()?;
    Ok(results.into_iter().unzip())
}

/// Unlabeled CSI of one station drawn from a mini-batch of snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledBatch {
    pub inputs: Vec<CsiTensor>,
    pub targets: Vec<WorldCoord2D>,
    pub matched: Vec<bool>,
    /// Position of the owning snapshot within the mini-batch.
    pub group: Vec<usize>,
    /// Number of snapshots in the mini-batch.
    pub n_groups: usize,
}

impl UnlabeledBatch {
    pub fn empty(n_groups: usize) -> Self {
        Self { inputs: Vec::new(), targets: Vec::new(), matched: Vec::new(), group: Vec::new(), n_groups }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n_matched(&self) -> usize {
        self.matched.iter().filter(|m| **m).count()
    }

    pub fn push(&mut self, x: CsiTensor, target: WorldCoord2D, matched: bool, group: usize) {
        self.inputs.push(x);
        self.targets.push(target);
        self.matched.push(matched);
        self.group.push(group);
    }

    fn pairs(&self) -> Vec<Pair<'_>> {
        self.inputs.iter().zip(&self.targets).map(|(x, t)| (x, *t)).collect()
    }

    /// Loss coefficient of each sample such that the unlabeled objective is
    /// `sum_v c_v * g_v`: the mean over snapshots of each snapshot's weighted
    /// loss divided by its matched count. Unmatched samples get zero.
    pub fn coefficients(&self, weights: &[f64]) -> Vec<f64> {
        let mut n_per_group = vec![0usize; self.n_groups];
        for (g, m) in self.group.iter().zip(&self.matched) {
            if *m {
                n_per_group[*g] += 1;
            }
        }
        (0..self.len())
            .map(|v| {
                if self.matched[v] {
                    weights[v] / (self.n_groups as f64 * n_per_group[self.group[v]] as f64)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Raw and rectified meta-weights of one station's batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub raw: Vec<f64>,
    pub rectified: Vec<f64>,
    /// Largest absolute raw weight.
    pub scale: f64,
}

/// `1 + xi * raw / max|raw|`, or all ones when every raw weight is zero.
pub fn rectify_weights(raw: &[f64], xi: f64) -> WeightVector {
    let scale = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rectified = if scale == 0.0 {
        vec![1.0; raw.len()]
    } else {
        raw.iter().map(|v| 1.0 + xi * v / scale).collect()
    };
    WeightVector { raw: raw.to_vec(), rectified, scale }
}

pub fn rectify_relu(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|v| v.max(0.0)).collect()
}

/// Gradients needed for the meta-weights of one station.
pub struct MetaGradients {
    pub val_loss: f64,
    pub val_grad: GradientVector,
    /// Per-sample gradients of matched samples (`None` for unmatched).
    pub sample_grads: Vec<Option<GradientVector>>,
    pub raw: Vec<f64>,
}

/// Raw weight of each unlabeled sample: inner product of the validation-loss
/// gradient with the sample's loss gradient. Unmatched samples get zero.
pub fn meta_gradients(
    model: &ModelParams,
    batch: &UnlabeledBatch,
    validation: &[LabeledSample],
) -> Result<MetaGradients, TrainError> {
    let (val_loss, val_grad) = model.grad(&pairs(validation), None)?;
    let all = batch.pairs();
    let mut sample_grads = vec![None; batch.len()];
    let idx: Vec<usize> = (0..batch.len()).filter(|&v| batch.matched[v]).collect();
    let sub: Vec<Pair> = idx.iter().map(|&v| all[v]).collect();
    for (v, g) in idx.iter().zip(model.per_sample_grads(&sub)?) {
        sample_grads[*v] = Some(g);
    }
    let raw = sample_grads.iter().map(|g| g.as_ref().map_or(0.0, |g| val_grad.dot(g))).collect();
    Ok(MetaGradients { val_loss, val_grad, sample_grads, raw })
}

pub fn compute_raw_weights(
    model: &ModelParams,
    batch: &UnlabeledBatch,
    validation: &[LabeledSample],
) -> Result<Vec<f64>, TrainError> {
    Ok(meta_gradients(model, batch, validation)?.raw)
}

/// Loss coefficients for the chosen weighting mode.
pub fn weights_for(mode: Weighting, raw: &[f64], matched: &[bool], xi: f64) -> Vec<f64> {
    match mode {
        Weighting::Rectified => rectify_weights(raw, xi).rectified,
        Weighting::Unweighted => vec![1.0; raw.len()],
        Weighting::Relu => {
            let mut w = rectify_relu(raw);
            let n = matched.iter().filter(|m| **m).count();
            let s: f64 = w.iter().zip(matched).filter(|(_, m)| **m).map(|(v, _)| v).sum();
            if s > 0.0 {
                let k = n as f64 / s;
                w.iter_mut().for_each(|v| *v *= k);
            }
            w
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub model: ModelParams,
    pub unlabeled_loss: f64,
    pub labeled_loss: f64,
    pub step_norm: f64,
}

/// One gradient step on `gamma * weighted unlabeled loss + (1 - gamma) *
/// labeled MSE`.
pub fn combined_step(
    model: &ModelParams,
    unlabeled: &UnlabeledBatch,
    weights: &[f64],
    labeled: &[Pair<'_>],
    gamma: f64,
    lr: f64,
) -> Result<StepOutcome, TrainError> {
    let coeff = unlabeled.coefficients(weights);
    let mut grad = GradientVector::zeros(model.n_params());
    let mut unlabeled_loss = 0.0;
    if gamma > 0.0 && coeff.iter().any(|c| *c != 0.0) {
        // grad() averages over the batch, so scale the coefficients up by its length
        let n = unlabeled.len() as f64;
        let w: Vec<f64> = coeff.iter().map(|c| c * n).collect();
        let (l, g) = model.grad(&unlabeled.pairs(), Some(&w))?;
        unlabeled_loss = l;
        grad.axpy(gamma, &g);
    }
    let mut labeled_loss = 0.0;
    if gamma < 1.0 && !labeled.is_empty() {
        let (l, g) = model.grad(labeled, None)?;
        labeled_loss = l;
        grad.axpy(1.0 - gamma, &g);
    }
    let step_norm = lr * grad.norm();
    Ok(StepOutcome { model: model.sgd_step(&grad, lr), unlabeled_loss, labeled_loss, step_norm })
}

/// Per-iteration diagnostics of one station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    /// Combined objective at the pre-step parameters.
    pub train_loss: f64,
    pub unlabeled_loss: f64,
    pub labeled_loss: f64,
    /// Validation MSE at the pre-step parameters.
    pub val_loss: f64,
    pub val_grad_norm: f64,
    pub max_sample_grad_norm: f64,
    /// Largest absolute raw weight.
    pub mu: f64,
    pub n_csi: usize,
    pub n_matched: usize,
    pub mean_weight: f64,
    pub step_norm: f64,
    /// Secant estimate of the validation-gradient Lipschitz constant between
    /// the previous and current pre-step parameters.
    pub secant_lipschitz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lr: f64,
    pub matching_accuracy: Option<f64>,
    pub stations: Vec<StationRecord>,
}

/// Resumable state of a hard-EM or pseudo-labeling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub format_version: u32,
    pub models: Vec<ModelParams>,
    /// Last completed iteration.
    pub iteration: usize,
    pub field: Option<ErrorField>,
    pub log: Vec<IterationRecord>,
    prev_val_grad: Vec<Option<GradientVector>>,
    prev_step: Vec<Option<f64>>,
}

impl TrainState {
    pub fn new(models: Vec<ModelParams>) -> Self {
        let n = models.len();
        Self {
            format_version: STATE_VERSION,
            models,
            iteration: 0,
            field: None,
            log: Vec::new(),
            prev_val_grad: vec![None; n],
            prev_step: vec![None; n],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let s: Self = serde_json::from_str(text).map_err(|e| TrainError::State(e.to_string()))?;
        if s.format_version != STATE_VERSION {
            return Err(TrainError::State(format!("unsupported version {}", s.format_version)));
        }
        if s.prev_val_grad.len() != s.models.len() || s.prev_step.len() != s.models.len() {
            return Err(TrainError::State("per-station vectors disagree with the model count".into()));
        }
        Ok(s)
    }
}

/// Data consumed by the unlabeled training loops.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub multimodal: &'a [Snapshot],
    pub labeled: &'a [Vec<LabeledSample>],
    pub validation: &'a [Vec<LabeledSample>],
    pub bounds: Rect,
}

pub fn em_iteration_rng(seed: u64, iteration: usize) -> TaskRng {
    task_rng(seed, &[stream::EM_ITERATION, iteration as u64])
}

pub fn pseudo_iteration_rng(seed: u64, iteration: usize) -> TaskRng {
    task_rng(seed, &[stream::PSEUDO_ITERATION, iteration as u64])
}

/// `k` distinct snapshot indices out of `n`, in sampling order.
pub fn sample_snapshots(rng: &mut TaskRng, n: usize, k: usize) -> Vec<usize> {
    index::sample(rng, n, k.min(n)).into_vec()
}

/// `count` labeled indices: distinct while `count <= len`, otherwise whole
/// shuffled passes followed by a distinct remainder.
pub fn sample_labeled(rng: &mut TaskRng, len: usize, count: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let k = (count - out.len()).min(len);
        out.extend(index::sample(rng, len, k).into_iter());
    }
    out
}

enum LabelSource<'a> {
    Matching,
    Fixed(&'a [Vec<WorldCoord2D>]),
}

/// Runs hard-EM iterations `state.iteration + 1 ..= min(stop_at, T)`.
pub fn run_hard_em(
    state: &mut TrainState,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    seed: u64,
    stop_at: usize,
) -> Result<(), TrainError> {
    run_loop(state, data, cfg, seed, stop_at, LabelSource::Matching)
}

/// Labels every multimodal CSI once with the given (pretrained) models.
pub fn pseudo_labels(models: &[ModelParams], multimodal: &[Snapshot]) -> Result<Vec<Vec<WorldCoord2D>>, TrainError> {
    multimodal
        .par_iter()
        .map(|s| predict_snapshot(s, models).map_err(TrainError::from))
        .collect()
}

/// Pseudo-labeling baseline: fixed labels from the pretrained models, then
/// the same weighted combined training as the hard-EM loop.
pub fn pseudo_label_baseline(
    state: &mut TrainState,
    labels: &[Vec<WorldCoord2D>],
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    seed: u64,
    stop_at: usize,
) -> Result<(), TrainError> {
    if data.multimodal.is_empty() {
        return Ok(());
    }
    run_loop(state, data, cfg, seed, stop_at, LabelSource::Fixed(labels))
}

fn run_loop(
    state: &mut TrainState,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    seed: u64,
    stop_at: usize,
    source: LabelSource<'_>,
) -> Result<(), TrainError> {
    cfg.validate()?;
    let n_bs = state.models.len();
    if data.labeled.len() != n_bs || data.validation.len() != n_bs {
        return Err(TrainError::Config("datasets and models disagree on the station count".into()));
    }
    if let Some(b) = data.labeled.iter().position(Vec::is_empty) {
        return Err(TrainError::EmptyLabeled(b));
    }
    if data.multimodal.is_empty() {
        return Ok(());
    }
    let last = stop_at.min(cfg.iterations);
    while state.iteration < last {
        let i = state.iteration + 1;
        let matching = matches!(source, LabelSource::Matching);
        if matching && (i - 1) % cfg.sigma_period == 0 {
            state.field =
                Some(estimate_error_field(&state.models, data.validation, data.bounds, cfg.error_field)?);
        }
        let mut rng = if matching { em_iteration_rng(seed, i) } else { pseudo_iteration_rng(seed, i) };
        let batch_idx = sample_snapshots(&mut rng, data.multimodal.len(), cfg.em_batch);
        let n_groups = batch_idx.len();

        // E-step over the whole mini-batch before any station updates.
        let mut batches: Vec<UnlabeledBatch> = (0..n_bs).map(|_| UnlabeledBatch::empty(n_groups)).collect();
        let (mut correct, mut total) = (0, 0);
        for (g, &k) in batch_idx.iter().enumerate() {
            let snap = &data.multimodal[k];
            let rows = snap.rows();
            let (targets, matched): (Vec<WorldCoord2D>, Vec<bool>) = match source {
                LabelSource::Matching => {
                    let field = state.field.as_ref().expect("field estimated at i = 1");
                    let (cost, preds) = build_cost_matrix(snap, &state.models, field)?;
                    let assign = solve_km(&cost)?;
                    let (c, t) = matching_counts(&assign, snap);
                    correct += c;
                    total += t;
                    let labels = assemble_labels(&assign, &snap.detections, &preds);
                    (labels.targets, labels.matched)
                }
                LabelSource::Fixed(l) => (l[k].clone(), vec![true; rows.len()]),
            };
            for ((&(b, ci), t), m) in rows.iter().zip(targets).zip(matched) {
                batches[b].push(csi_to_real(&snap.csi[b][ci]), t, m, g);
            }
        }
        let labeled_idx: Vec<Vec<usize>> = batches
            .iter()
            .enumerate()
            .map(|(b, u)| sample_labeled(&mut rng, data.labeled[b].len(), u.len()))
            .collect();
        let lr = cfg.em_lr.rate(i);

        let results: Vec<(ModelParams, StationRecord, GradientVector)> = (0..n_bs)
            .into_par_iter()
            .map(|b| {
                station_step(
                    &state.models[b],
                    &batches[b],
                    &labeled_idx[b],
                    data.labeled[b].as_slice(),
                    data.validation[b].as_slice(),
                    cfg,
                    lr,
                    i,
                    b,
                    state.prev_val_grad[b].as_ref(),
                    state.prev_step[b],
                )
            })
            .collect::<Result<_, _>>()?;

        let mut stations = Vec::with_capacity(n_bs);
        for (b, (m, rec, vg)) in results.into_iter().enumerate() {
            state.models[b] = m;
            state.prev_step[b] = Some(rec.step_norm);
            state.prev_val_grad[b] = Some(vg);
            stations.push(rec);
        }
        let matching_accuracy = (total > 0).then(|| correct as f64 / total as f64);
        if i % 100 == 0 || i == 1 {
            log::info!(
                "iteration {i}: lr {lr:.2e}, val loss {:?}, matching {:?}",
                stations.iter().map(|s| s.val_loss).collect::<Vec<_>>(),
                matching_accuracy
            );
        }
        state.log.push(IterationRecord { iteration: i, lr, matching_accuracy, stations });
        state.iteration = i;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn station_step(
    model: &ModelParams,
    batch: &UnlabeledBatch,
    labeled_idx: &[usize],
    labeled: &[LabeledSample],
    validation: &[LabeledSample],
    cfg: &TrainConfig,
    lr: f64,
    iteration: usize,
    bs: usize,
    prev_val_grad: Option<&GradientVector>,
    prev_step: Option<f64>,
) -> Result<(ModelParams, StationRecord, GradientVector), TrainError> {
    let meta = meta_gradients(model, batch, validation)?;
    let weights = weights_for(cfg.weighting, &meta.raw, &batch.matched, cfg.xi);
    let coeff = batch.coefficients(&weights);

    let mut grad = GradientVector::zeros(model.n_params());
    let mut unlabeled_loss = 0.0;
    let preds_needed = batch.matched.iter().any(|m| *m);
    if cfg.gamma > 0.0 && preds_needed {
        let losses = unlabeled_losses(model, batch)?;
        for (v, g) in meta.sample_grads.iter().enumerate() {
            if let Some(g) = g {
                grad.axpy(cfg.gamma * coeff[v], g);
                unlabeled_loss += coeff[v] * losses[v];
            }
        }
    }
    let mut labeled_loss = 0.0;
    if cfg.gamma < 1.0 && !labeled_idx.is_empty() {
        let lp: Vec<Pair> = labeled_idx.iter().map(|&j| (&labeled[j].csi, labeled[j].position)).collect();
        let (l, g) = model.grad(&lp, None)?;
        labeled_loss = l;
        grad.axpy(1.0 - cfg.gamma, &g);
    }
    if !grad.is_finite() {
        return Err(TrainError::NonFinite { iteration, bs, what: "gradient" });
    }
    let step_norm = lr * grad.norm();
    let new_model = model.sgd_step(&grad, lr);

    let mu = meta.raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n_matched = batch.n_matched();
    let mean_weight = if n_matched > 0 {
        weights.iter().zip(&batch.matched).filter(|(_, m)| **m).map(|(w, _)| w).sum::<f64>() / n_matched as f64
    } else {
        1.0
    };
    let secant_lipschitz = match (prev_val_grad, prev_step) {
        (Some(pg), Some(s)) if s > 0.0 => {
            let mut d = meta.val_grad.clone();
            d.axpy(-1.0, pg);
            Some(d.norm() / s)
        }
        _ => None,
    };
    let record = StationRecord {
        train_loss: cfg.gamma * unlabeled_loss + (1.0 - cfg.gamma) * labeled_loss,
        unlabeled_loss,
        labeled_loss,
        val_loss: meta.val_loss,
        val_grad_norm: meta.val_grad.norm(),
        max_sample_grad_norm: meta.sample_grads.iter().flatten().map(GradientVector::norm).fold(0.0, f64::max),
        mu,
        n_csi: batch.len(),
        n_matched,
        mean_weight,
        step_norm,
        secant_lipschitz,
    };
    Ok((new_model, record, meta.val_grad))
}

fn unlabeled_losses(model: &ModelParams, batch: &UnlabeledBatch) -> Result<Vec<f64>, TrainError> {
    let preds = model.predict_batch(&batch.inputs)?;
    Ok(preds.iter().zip(&batch.targets).map(|(p, t)| p.distance_sq(*t)).collect())
}

/// Estimates of the constants in the learning-rate bound and the per-iteration
/// checks derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    /// Per station: largest secant Lipschitz estimate along the trajectory.
    pub lipschitz: Vec<f64>,
    /// Per station: largest gradient norm observed (validation or sample).
    pub beta: Vec<f64>,
    /// `[iteration][station]` bound `mu * n / (2 L beta^2)`.
    pub bound: Vec<Vec<f64>>,
    /// `[iteration][station]` learning rate exceeded the bound.
    pub violation: Vec<Vec<bool>>,
    /// `[iteration][station]` validation loss rose over this iteration;
    /// unknown (`None`) for the last logged iteration.
    pub increase: Vec<Vec<Option<bool>>>,
}

impl LemmaReport {
    pub fn violation_count(&self) -> usize {
        self.violation.iter().flatten().filter(|v| **v).count()
    }

    /// Fraction of known iteration/station pairs whose validation loss rose.
    pub fn increase_fraction(&self) -> f64 {
        let known: Vec<bool> = self.increase.iter().flatten().flatten().copied().collect();
        if known.is_empty() {
            0.0
        } else {
            known.iter().filter(|v| **v).count() as f64 / known.len() as f64
        }
    }

    /// Smallest bound over all iterations and stations.
    pub fn min_bound(&self) -> f64 {
        self.bound.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Diagnostic only: reconstructs the bound from a logged run.
pub fn lemma1_monitor(log: &[IterationRecord]) -> Result<LemmaReport, TrainError> {
    if log.len() < 2 {
        return Err(TrainError::State("the monitor needs at least two logged iterations".into()));
    }
    let n_bs = log[0].stations.len();
    let mut lipschitz = vec![0.0f64; n_bs];
    let mut beta = vec![0.0f64; n_bs];
    for rec in log {
        for (b, s) in rec.stations.iter().enumerate() {
            if let Some(l) = s.secant_lipschitz {
                lipschitz[b] = lipschitz[b].max(l);
            }
            beta[b] = beta[b].max(s.val_grad_norm).max(s.max_sample_grad_norm);
        }
    }
    let mut bound = Vec::with_capacity(log.len());
    let mut violation = Vec::with_capacity(log.len());
    let mut increase = Vec::with_capacity(log.len());
    for (t, rec) in log.iter().enumerate() {
        let bt: Vec<f64> = rec
            .stations
            .iter()
            .enumerate()
            .map(|(b, s)| {
                let denom = 2.0 * lipschitz[b] * beta[b] * beta[b];
                if denom > 0.0 {
                    s.mu * s.n_matched as f64 / denom
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        violation.push(bt.iter().map(|&v| rec.lr > v).collect());
        bound.push(bt);
        increase.push(
            (0..n_bs)
                .map(|b| log.get(t + 1).map(|next| next.stations[b].val_loss > rec.stations[b].val_loss))
                .collect(),
        );
    }
    Ok(LemmaReport { lipschitz, beta, bound, violation, increase })
}

/// CSV header for [`log_csv_rows`].
pub fn log_csv_header(n_bs: usize) -> String {
    let mut cols = vec!["iteration".to_string(), "lr".into(), "matching_accuracy".into()];
    for b in 0..n_bs {
        for c in ["train_loss", "val_loss", "mean_weight", "mu", "n_matched", "bound_ok", "val_increase"] {
            cols.push(format!("bs{b}_{c}"));
        }
    }
    cols.join(",")
}

/// One CSV line per record. Bound flags use the running constants observed
/// up to and including that iteration, so rows never change once written.
pub fn log_csv_rows(log: &[IterationRecord], from: usize) -> Vec<String> {
    let n_bs = log.first().map_or(0, |r| r.stations.len());
    let mut lip = vec![0.0f64; n_bs];
    let mut beta = vec![0.0f64; n_bs];
    let mut out = Vec::new();
    for (t, rec) in log.iter().enumerate() {
        let mut cols = vec![
            rec.iteration.to_string(),
            format!("{:e}", rec.lr),
            rec.matching_accuracy.map_or(String::new(), |a| a.to_string()),
        ];
        for (b, s) in rec.stations.iter().enumerate() {
            if let Some(l) = s.secant_lipschitz {
                lip[b] = lip[b].max(l);
            }
            beta[b] = beta[b].max(s.val_grad_norm).max(s.max_sample_grad_norm);
            let denom = 2.0 * lip[b] * beta[b] * beta[b];
            let ok = denom == 0.0 || rec.lr <= s.mu * s.n_matched as f64 / denom;
            let inc = t.checked_sub(1).map(|p| s.val_loss > log[p].stations[b].val_loss);
            cols.extend([
                s.train_loss.to_string(),
                s.val_loss.to_string(),
                s.mean_weight.to_string(),
                s.mu.to_string(),
                s.n_matched.to_string(),
                u8::from(ok).to_string(),
                inc.map_or(String::new(), |v| u8::from(v).to_string()),
            ]);
        }
        if t >= from {
            out.push(cols.join(","));
        }
    }
    out
}

/// Error field of the given models on the validation sets.
pub fn final_error_field(
    models: &[ModelParams],
    validation: &[Vec<LabeledSample>],
    bounds: Rect,
    cfg: &TrainConfig,
) -> Result<ErrorField, TrainError> {
    Ok(estimate_error_field(models, validation, bounds, cfg.error_field)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posnet::Activation;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn schedule_decays_in_steps() {
        let s = LrSchedule { initial: 1e-3, factor: 0.9, period: 100, start: 2000 };
        assert_eq!(s.rate(1), 1e-3);
        assert_eq!(s.rate(2000), 1e-3);
        assert_eq!(s.rate(2099), 1e-3);
        assert!((s.rate(2100) - 9e-4).abs() < 1e-18);
        assert!((s.rate(2250) - 1e-3 * 0.81).abs() < 1e-18);
    }

    #[test]
    fn rectification_examples() {
        let w = rectify_weights(&[2.0, -1.0, 4.0], 1.0);
        assert_eq!(w.rectified, vec![1.5, 0.75, 2.0]);
        assert_eq!(w.scale, 4.0);
        assert_eq!(rectify_weights(&[2.0, -1.0, 4.0], 0.0).rectified, vec![1.0; 3]);
        assert_eq!(rectify_weights(&[0.0, 0.0], 1.0).rectified, vec![1.0; 2]);
        assert_eq!(rectify_relu(&[2.0, -1.0, 4.0]), vec![2.0, 0.0, 4.0]);
    }

    #[test]
    fn relu_mode_normalises_to_unit_mean() {
        let w = weights_for(Weighting::Relu, &[2.0, -1.0, 4.0, 0.0], &[true, true, true, false], 1.0);
        assert_eq!(w, vec![1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn invalid_gamma_names_field() {
        let cfg = TrainConfig { gamma: 1.5, ..Default::default() };
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("gamma"), "{e}");
    }

    fn linear_arch() -> ArchSpec {
        ArchSpec {
            n_residual_blocks: 0,
            conv_channels: vec![],
            kernel_size: 3,
            fc_widths: vec![2],
            activation: Activation::Identity,
            input_antennas: 2,
            input_subcarriers: 3,
            input_scale: 1.0,
            output_scale: 1.0,
            output_offset: [0.0, 0.0],
        }
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<LabeledSample> {
        let mut rng = task_rng(seed, &[]);
        (0..n)
            .map(|_| {
                let data: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
                let position = WorldCoord2D::new(data[0] - 2.0 * data[3], 0.5 * data[5] + data[7]);
                LabeledSample { csi: CsiTensor { n_antennas: 2, n_subcarriers: 3, data }, position }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let m = ModelParams::init(linear_arch(), &mut task_rng(1, &[])).unwrap();
        let cfg = TrainConfig { pretrain_epochs: 0, ..Default::default() };
        let (out, log) = pretrain_model(&m, &toy_samples(10, 2), &cfg, 3, 0).unwrap();
        assert_eq!(out, m);
        assert!(log.epoch_loss.is_empty());
    }

    #[test]
    fn full_batch_descent_on_least_squares_never_increases_loss() {
        let data = toy_samples(40, 4);
        let m = ModelParams::init(linear_arch(), &mut task_rng(5, &[])).unwrap();
        let cfg = TrainConfig {
            pretrain_epochs: 50,
            pretrain_batch: 40,
            pretrain_lr: LrSchedule::constant(0.01),
            ..Default::default()
        };
        let (_, log) = pretrain_model(&m, &data, &cfg, 6, 0).unwrap();
        for w in log.epoch_loss.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(log.final_loss < log.initial_loss);
    }

    #[test]
    fn coefficients_follow_group_counts() {
        let mut b = UnlabeledBatch::empty(2);
        let x = CsiTensor { n_antennas: 1, n_subcarriers: 1, data: vec![0.0; 2] };
        let p = WorldCoord2D::new(0.0, 0.0);
        b.push(x.clone(), p, true, 0);
        b.push(x.clone(), p, true, 0);
        b.push(x.clone(), p, false, 0);
        b.push(x, p, true, 1);
        let c = b.coefficients(&[1.0, 3.0, 5.0, 2.0]);
        assert_eq!(c, vec![0.25, 0.75, 0.0, 1.0]);
    }

    #[test]
    fn monitor_flags() {
        let rec = |i, lr, val| IterationRecord {
            iteration: i,
            lr,
            matching_accuracy: None,
            stations: vec![StationRecord {
                train_loss: 0.0,
                unlabeled_loss: 0.0,
                labeled_loss: 0.0,
                val_loss: val,
                val_grad_norm: 1.0,
                max_sample_grad_norm: 1.0,
                mu: 1.0,
                n_csi: 4,
                n_matched: 4,
                mean_weight: 1.0,
                step_norm: 0.1,
                secant_lipschitz: Some(2.0),
            }],
        };
        let flat: Vec<_> = (1..=5).map(|i| rec(i, 1e-3, 1.0)).collect();
        let r = lemma1_monitor(&flat).unwrap();
        assert_eq!(r.violation_count(), 0);
        assert_eq!(r.increase_fraction(), 0.0);
        assert_eq!(r.bound[0][0], 1.0);
        let hot: Vec<_> = (1..=5).map(|i| rec(i, 1e3, 1.0)).collect();
        assert_eq!(lemma1_monitor(&hot).unwrap().violation_count(), 5);
        assert!(lemma1_monitor(&flat[..1]).is_err());
    }
}
