//! Fold construction, class rebalancing, and the training loop.
//!
//! The cohort is split into two subject-exclusive folds with near-equal
//! per-class segment counts. Within a fold, whole subjects are assigned to
//! train/validation/test buckets targeting an 80/10/10 segment split.
//! Minority classes are upsampled (duplication with replacement) in the
//! training and validation sets only; test data is never touched.
//!
//! Training runs shuffled mini-batches of 32 through the network in
//! batch-statistics mode, evaluates the upsampled validation set in
//! inference mode after every epoch, snapshots the parameters whenever the
//! validation loss strictly improves, and stops at the epoch cap or after
//! a fixed number of non-improving epochs.
//!
//! Every random decision draws from its own seeded stream (fold tie
//! breaking, split tie breaking, upsampling, per-epoch shuffles, per-batch
//! dropout masks), so runs are bit-reproducible end to end.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{assemble_channels, ChannelConfig, PrepError};
use crate::eval::Prediction;
use crate::model::checkpoint::CheckpointError;
use crate::model::network::{
    apply_running_update, forward_logits, predict, train_forward_backward, DropoutMask,
};
use crate::model::{
    head, init_params, AdamConfig, AdamState, Checkpoint, ModelConfig, ModelError, ModelParams,
    Real,
};
use crate::rng::{derive_seed, stream};
use crate::segment::{Label, Segment};

/// Tolerated relative difference between the folds' per-class segment
/// counts.
pub const FOLD_BALANCE_TOLERANCE: f64 = 0.10;

/// Errors from fold construction and training.
#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("rhythm class {0} occurs in only one subject; subject-exclusive folds are impossible")]
    SingleSubjectClass(usize),
    #[error(
        "fold imbalance for class {class}: {fold1} vs {fold2} segments exceeds 10% of the smaller"
    )]
    FoldImbalance {
        class: usize,
        fold1: usize,
        fold2: usize,
    },
    #[error("class {0} has no segments in this set; cannot upsample")]
    EmptyClass(usize),
    #[error("the {0} split received no subjects")]
    EmptySplit(&'static str),
    #[error("dataset incompatible with model: {0}")]
    Incompatible(String),
    #[error("invalid training options: {0}")]
    BadOptions(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-subject class composition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub id: String,
    pub class_counts: [usize; 3],
}

impl SubjectSummary {
    pub fn total(&self) -> usize {
        self.class_counts.iter().sum()
    }

    /// The subject's stratification key: its most frequent rhythm class,
    /// ties toward the lower index.
    pub fn dominant_class(&self) -> usize {
        let mut best = 0;
        for c in 1..3 {
            if self.class_counts[c] > self.class_counts[best] {
                best = c;
            }
        }
        best
    }
}

/// Subject-exclusive two-fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_subjects: [Vec<String>; 2],
    /// Per-fold, per-class segment counts.
    pub class_counts: [[usize; 3]; 2],
}

impl FoldPlan {
    /// Subjects of one fold, 1-based fold index.
    pub fn fold(&self, fold: u8) -> &[String] {
        &self.fold_subjects[(fold - 1) as usize]
    }

    /// Check the balance invariant.
    pub fn validate(&self) -> Result<(), TrainingError> {
        for c in 0..3 {
            let (a, b) = (self.class_counts[0][c], self.class_counts[1][c]);
            if a + b == 0 {
                continue;
            }
            let smaller = a.min(b) as f64;
            if (a as f64 - b as f64).abs() > FOLD_BALANCE_TOLERANCE * smaller {
                return Err(TrainingError::FoldImbalance {
                    class: c,
                    fold1: a,
                    fold2: b,
                });
            }
        }
        Ok(())
    }
}

/// Build the two folds.
///
/// Greedy balanced assignment: subjects are grouped by dominant class and
/// sorted by descending segment count (seeded hash as the tie breaker);
/// each goes to the fold currently lighter in that class. A bounded swap
/// refinement pass then shaves any residual per-class imbalance. Errors if
/// a class with segments lives in a single subject, or if balance within
/// 10% is unreachable.
pub fn make_folds(subjects: &[SubjectSummary], seed: u64) -> Result<FoldPlan, TrainingError> {
    for c in 0..3 {
        let carriers = subjects.iter().filter(|s| s.class_counts[c] > 0).count();
        if carriers == 1 {
            return Err(TrainingError::SingleSubjectClass(c));
        }
    }

    let mut by_class: [Vec<&SubjectSummary>; 3] = Default::default();
    for s in subjects {
        by_class[s.dominant_class()].push(s);
    }
    for group in by_class.iter_mut() {
        group.sort_by(|a, b| {
            b.total()
                .cmp(&a.total())
                .then_with(|| derive_seed(seed, &a.id, 0).cmp(&derive_seed(seed, &b.id, 0)))
                .then_with(|| a.id.cmp(&b.id))
        });
    }

    let mut folds: [Vec<&SubjectSummary>; 2] = Default::default();
    let mut counts = [[0usize; 3]; 2];
    for (class, group) in by_class.iter().enumerate() {
        for s in group {
            let target = match counts[0][class].cmp(&counts[1][class]) {
                std::cmp::Ordering::Less => 0,
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Equal => {
                    let t0: usize = counts[0].iter().sum();
                    let t1: usize = counts[1].iter().sum();
                    usize::from(t0 > t1)
                }
            };
            folds[target].push(s);
            for c in 0..3 {
                counts[target][c] += s.class_counts[c];
            }
        }
    }

    // Swap refinement: exchange same-dominant-class subject pairs across
    // folds whenever that strictly reduces the total per-class imbalance.
    let imbalance = |counts: &[[usize; 3]; 2]| -> i64 {
        (0..3)
            .map(|c| (counts[0][c] as i64 - counts[1][c] as i64).abs())
            .sum()
    };
    loop {
        let current = imbalance(&counts);
        let mut best: Option<(usize, usize, i64)> = None;
        for (i, a) in folds[0].iter().enumerate() {
            for (j, b) in folds[1].iter().enumerate() {
                if a.dominant_class() != b.dominant_class() {
                    continue;
                }
                let mut trial = counts;
                for c in 0..3 {
                    trial[0][c] = trial[0][c] - a.class_counts[c] + b.class_counts[c];
                    trial[1][c] = trial[1][c] - b.class_counts[c] + a.class_counts[c];
                }
                let score = imbalance(&trial);
                if score < current && best.map_or(true, |(_, _, s)| score < s) {
                    best = Some((i, j, score));
                }
            }
        }
        match best {
            Some((i, j, _)) => {
                let a = folds[0][i];
                let b = folds[1][j];
                folds[0][i] = b;
                folds[1][j] = a;
                for c in 0..3 {
                    counts[0][c] = counts[0][c] - a.class_counts[c] + b.class_counts[c];
                    counts[1][c] = counts[1][c] - b.class_counts[c] + a.class_counts[c];
                }
            }
            None => break,
        }
    }

    let plan = FoldPlan {
        fold_subjects: [
            folds[0].iter().map(|s| s.id.clone()).collect(),
            folds[1].iter().map(|s| s.id.clone()).collect(),
        ],
        class_counts: counts,
    };
    plan.validate()?;
    Ok(plan)
}

/// Within-fold subject assignment to train/validation/test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Split one fold's subjects into 80/10/10 (by segments, subject-granular,
/// stratified by dominant class).
///
/// Per class: the smallest subject seeds the validation set, the second
/// smallest the test set, the rest train; validation and test then keep
/// absorbing the next smallest subjects while below 10% of the class's
/// segments. Classes with two subjects skip the test bucket (train and
/// validation must never be empty); singleton classes go wholly to train.
pub fn split_fold(fold_subjects: &[SubjectSummary], seed: u64) -> SplitPlan {
    let mut plan = SplitPlan {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut by_class: [Vec<&SubjectSummary>; 3] = Default::default();
    for s in fold_subjects {
        by_class[s.dominant_class()].push(s);
    }
    for group in by_class.iter_mut() {
        group.sort_by(|a, b| {
            a.total()
                .cmp(&b.total())
                .then_with(|| derive_seed(seed, &a.id, 1).cmp(&derive_seed(seed, &b.id, 1)))
                .then_with(|| a.id.cmp(&b.id))
        });
        let class_total: usize = group.iter().map(|s| s.total()).sum();
        let target = class_total as f64 * 0.10;
        match group.len() {
            0 => {}
            1 => plan.train.push(group[0].id.clone()),
            2 => {
                plan.val.push(group[0].id.clone());
                plan.train.push(group[1].id.clone());
            }
            _ => {
                let mut val_count = group[0].total();
                let mut test_count = group[1].total();
                plan.val.push(group[0].id.clone());
                plan.test.push(group[1].id.clone());
                let mut rest: Vec<&&SubjectSummary> = group[2..].iter().collect();
                // Keep at least one training subject per class.
                while rest.len() > 1 {
                    let candidate = rest[0];
                    if (val_count as f64) + (candidate.total() as f64) / 2.0 < target {
                        plan.val.push(candidate.id.clone());
                        val_count += candidate.total();
                        rest.remove(0);
                    } else if (test_count as f64) + (candidate.total() as f64) / 2.0 < target {
                        plan.test.push(candidate.id.clone());
                        test_count += candidate.total();
                        rest.remove(0);
                    } else {
                        break;
                    }
                }
                for s in rest {
                    plan.train.push(s.id.clone());
                }
            }
        }
    }
    plan.train.sort();
    plan.val.sort();
    plan.test.sort();
    plan
}

/// One segment ready for the network.
#[derive(Debug, Clone)]
pub struct FeatureItem {
    pub subject_id: String,
    /// Per-subject running index; pairs with the cohort manifest.
    pub segment_index: usize,
    pub label: Label,
    /// `(L, d)` channel stack.
    pub features: Array2<f64>,
}

/// A prepared dataset.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub channel_config: ChannelConfig,
    pub items: Vec<FeatureItem>,
}

/// A segment the preparation pipeline refused.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rejection {
    pub subject_id: String,
    pub segment_index: usize,
    pub reason: String,
}

/// Run the preparation pipeline over a cohort. Rejected segments (heart
/// rate unextractable, invalid data) are reported, not fatal.
pub fn prepare_dataset(
    segments: &[Segment],
    channel_config: ChannelConfig,
) -> (FeatureSet, Vec<Rejection>) {
    let mut per_subject = BTreeMap::<&str, usize>::new();
    let indexed: Vec<(usize, &Segment)> = segments
        .iter()
        .map(|seg| {
            let idx = per_subject.entry(seg.subject_id.as_str()).or_insert(0);
            let current = *idx;
            *idx += 1;
            (current, seg)
        })
        .collect();

    let results: Vec<(usize, &Segment, Result<crate::channels::ChannelStack, PrepError>)> =
        indexed
            .par_iter()
            .map(|&(idx, seg)| (idx, seg, assemble_channels(seg, channel_config)))
            .collect();

    let mut items = Vec::new();
    let mut rejections = Vec::new();
    for (idx, seg, result) in results {
        match result {
            Ok(stack) => items.push(FeatureItem {
                subject_id: seg.subject_id.clone(),
                segment_index: idx,
                label: seg.label,
                features: stack.data,
            }),
            Err(err) => rejections.push(Rejection {
                subject_id: seg.subject_id.clone(),
                segment_index: idx,
                reason: err.to_string(),
            }),
        }
    }
    (
        FeatureSet {
            channel_config,
            items,
        },
        rejections,
    )
}

/// Per-subject class counts over a feature set, ordered by subject id.
pub fn subject_summaries(set: &FeatureSet) -> Vec<SubjectSummary> {
    let mut map = BTreeMap::<&str, [usize; 3]>::new();
    for item in &set.items {
        map.entry(item.subject_id.as_str()).or_default()[item.label.index()] += 1;
    }
    map.into_iter()
        .map(|(id, class_counts)| SubjectSummary {
            id: id.to_string(),
            class_counts,
        })
        .collect()
}

/// Item indices belonging to a subject list.
pub fn indices_for_subjects(set: &FeatureSet, subjects: &[String]) -> Vec<usize> {
    let wanted: std::collections::BTreeSet<&str> = subjects.iter().map(|s| s.as_str()).collect();
    set.items
        .iter()
        .enumerate()
        .filter(|(_, item)| wanted.contains(item.subject_id.as_str()))
        .map(|(i, _)| i)
        .collect()
}

/// Duplicate minority-class segments (sampling with replacement) until all
/// three class counts match the majority. Never applied to test sets.
pub fn upsample_minority(
    set: &FeatureSet,
    indices: &[usize],
    seed: u64,
) -> Result<Vec<usize>, TrainingError> {
    let mut per_class: [Vec<usize>; 3] = Default::default();
    for &i in indices {
        per_class[set.items[i].label.index()].push(i);
    }
    let majority = per_class.iter().map(|v| v.len()).max().unwrap_or(0);
    for (c, members) in per_class.iter().enumerate() {
        if members.is_empty() {
            return Err(TrainingError::EmptyClass(c));
        }
    }
    let mut out = Vec::with_capacity(3 * majority);
    for (c, members) in per_class.iter().enumerate() {
        out.extend_from_slice(members);
        let mut rng = stream(seed, "upsample", c as u64);
        for _ in members.len()..majority {
            let pick = rand::Rng::random_range(&mut rng, 0..members.len());
            out.push(members[pick]);
        }
    }
    Ok(out)
}

/// Early-stopping state: strict improvement resets the counter; reaching
/// `patience` consecutive non-improving epochs stops the run.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_improvement: usize,
}

/// Verdict after observing one validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            StopDecision::Improved
        } else {
            self.since_improvement += 1;
            if self.since_improvement >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::NoImprovement
            }
        }
    }
}

/// Training-loop options. Defaults: batch 32, at most 200 epochs, early
/// stop after 40 non-improving epochs, standard Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 200,
            patience: 40,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.batch_size == 0 {
            return Err(TrainingError::BadOptions("batch size must be positive".into()));
        }
        if self.max_epochs == 0 || self.max_epochs > 200 {
            return Err(TrainingError::BadOptions(format!(
                "max epochs must be in 1..=200, got {}",
                self.max_epochs
            )));
        }
        if self.patience == 0 {
            return Err(TrainingError::BadOptions("patience must be positive".into()));
        }
        Ok(())
    }
}

/// Why a training run ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// The validation loss stalled for `patience` consecutive epochs.
    EarlyStop,
    /// The epoch cap was reached.
    MaxEpochs,
    /// Numerical failure; the last good checkpoint is retained.
    Aborted(String),
}

/// One epoch's losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot at the minimum validation loss.
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// Shuffled mini-batches; the last partial batch is kept, and a trailing
/// singleton is folded into the previous batch so batch statistics always
/// see at least two segments.
fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect();
    if batches.len() > 1 && batches.last().map(|b| b.len()) == Some(1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

fn build_batch<F: Real>(
    config: &ModelConfig,
    set: &FeatureSet,
    indices: &[usize],
) -> (Array3<F>, Vec<usize>) {
    let b = indices.len();
    let mut x = Array3::<F>::zeros((b, config.seq_len, config.input_channels));
    let mut labels = Vec::with_capacity(b);
    for (bi, &idx) in indices.iter().enumerate() {
        let item = &set.items[idx];
        for ((t, c), &v) in item.features.indexed_iter() {
            x[(bi, t, c)] = F::from(v).expect("finite feature");
        }
        labels.push(item.label.index());
    }
    (x, labels)
}

fn check_compatible(config: &ModelConfig, set: &FeatureSet) -> Result<(), TrainingError> {
    if set.items.is_empty() {
        return Err(TrainingError::Incompatible("empty feature set".into()));
    }
    let dim = set.items[0].features.dim();
    if dim != (config.seq_len, config.input_channels) {
        return Err(TrainingError::Incompatible(format!(
            "features are {dim:?}, model expects ({}, {})",
            config.seq_len, config.input_channels
        )));
    }
    Ok(())
}

/// Mean inference-mode cross-entropy over a set of items.
pub fn mean_xent_inference<F: Real>(
    config: &ModelConfig,
    params: &ModelParams<F>,
    set: &FeatureSet,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64, TrainingError> {
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size) {
        let (x, labels) = build_batch::<F>(config, set, chunk);
        let logits = forward_logits(config, params, &x)?;
        for (bi, &label) in labels.iter().enumerate() {
            let row: Vec<F> = logits.row(bi).to_vec();
            let (loss, _) = head::softmax_xent(&row, label);
            total += loss.to_f64().expect("finite loss");
        }
    }
    Ok(total / indices.len().max(1) as f64)
}

/// Train on pre-upsampled index sets. Returns the checkpoint with the
/// minimum validation loss; when `checkpoint_path` is given the best
/// checkpoint is (re)written at every improvement.
pub fn train<F: Real>(
    config: &ModelConfig,
    options: &TrainOptions,
    set: &FeatureSet,
    train_indices: &[usize],
    val_indices: &[usize],
    seed: u64,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome, TrainingError> {
    config.validate()?;
    options.validate()?;
    check_compatible(config, set)?;
    if train_indices.is_empty() {
        return Err(TrainingError::EmptySplit("train"));
    }
    if val_indices.is_empty() {
        return Err(TrainingError::EmptySplit("validation"));
    }

    let mut params = init_params::<F>(config, seed);
    let mut adam = AdamState::<F>::new(config);
    let mut stopper = EarlyStop::new(options.patience);
    let mut history = Vec::new();

    // "Last good checkpoint" starts as the initialization, so an abort in
    // epoch 1 still leaves a loadable state behind.
    let mut best_params = params.clone();
    let mut best_adam = adam.clone();
    let mut best_epoch = 0usize;
    let mut best_val = f64::MAX;

    let mut order: Vec<usize> = train_indices.to_vec();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=options.max_epochs {
        let mut shuffle_rng = stream(seed, "shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let batches = make_batches(&order, options.batch_size);

        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in batches.iter().enumerate() {
            let (x, labels) = build_batch::<F>(config, set, batch);
            let mask_seed = derive_seed(seed, "dropout", ((epoch as u64) << 24) | batch_idx as u64);
            let mut mask_rng = stream(mask_seed, "mask", 0);
            let mask = DropoutMask::<F>::generate(
                config.seq_len * batch.len(),
                config.bigru_width(),
                config.dropout_rate,
                &mut mask_rng,
            );
            let step = train_forward_backward(config, &params, &x, &labels, &mask)?;
            if !step.loss.is_finite() {
                stop = StopReason::Aborted(format!(
                    "non-finite training loss at epoch {epoch}, batch {batch_idx}"
                ));
                break 'epochs;
            }
            apply_running_update(&mut params, &step.batch_mean, &step.batch_var);
            if let Err(err) = adam.step(&mut params, &step.grads, &options.adam) {
                stop = StopReason::Aborted(format!("epoch {epoch}, batch {batch_idx}: {err}"));
                break 'epochs;
            }
            epoch_loss += step.loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / train_indices.len() as f64;

        let val_loss = mean_xent_inference(config, &params, set, val_indices, options.batch_size)?;
        if !val_loss.is_finite() {
            stop = StopReason::Aborted(format!("non-finite validation loss at epoch {epoch}"));
            break 'epochs;
        }
        let decision = stopper.observe(epoch, val_loss);
        let improved = decision == StopDecision::Improved;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            improved,
        });
        if improved {
            best_params = params.clone();
            best_adam = adam.clone();
            best_epoch = epoch;
            best_val = val_loss;
            if let Some(path) = checkpoint_path {
                Checkpoint::from_state(config, &best_params, Some(&best_adam), epoch, val_loss)
                    .save(path)?;
            }
        }
        if decision == StopDecision::Stop {
            stop = StopReason::EarlyStop;
            break;
        }
    }

    let checkpoint =
        Checkpoint::from_state(config, &best_params, Some(&best_adam), best_epoch, best_val);
    Ok(TrainOutcome {
        checkpoint,
        best_epoch,
        best_val_loss: best_val,
        history,
        stop,
    })
}

/// One fold's training artifacts.
#[derive(Debug, Clone)]
pub struct FoldRun {
    /// 1-based fold index the model was trained on.
    pub fold: u8,
    pub split: SplitPlan,
    pub outcome: TrainOutcome,
}

/// A complete two-fold cross-validation.
#[derive(Debug, Clone)]
pub struct CrossValOutcome {
    pub fold_plan: FoldPlan,
    pub folds: Vec<FoldRun>,
    /// Pooled subject-independent predictions, one per dataset item, in
    /// dataset order.
    pub predictions: Vec<Prediction>,
}

/// Train on each fold and predict every segment of the opposite fold.
pub fn cross_validate<F: Real>(
    config: &ModelConfig,
    options: &TrainOptions,
    set: &FeatureSet,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<CrossValOutcome, TrainingError> {
    check_compatible(config, set)?;
    let subjects = subject_summaries(set);
    let fold_plan = make_folds(&subjects, derive_seed(seed, "folds", 0))?;

    let mut folds = Vec::new();
    let mut pooled: Vec<Option<Prediction>> = vec![None; set.items.len()];
    for fold in 1..=2u8 {
        let train_fold: Vec<SubjectSummary> = subjects
            .iter()
            .filter(|s| fold_plan.fold(fold).contains(&s.id))
            .cloned()
            .collect();
        let opposite = fold_plan.fold(3 - fold);

        // Subject exclusivity, asserted on every run.
        for s in &train_fold {
            assert!(
                !opposite.contains(&s.id),
                "subject {} appears in both folds",
                s.id
            );
        }

        let split = split_fold(&train_fold, derive_seed(seed, "split", fold as u64));
        let train_idx = indices_for_subjects(set, &split.train);
        let val_idx = indices_for_subjects(set, &split.val);
        let up_train = upsample_minority(
            set,
            &train_idx,
            derive_seed(seed, "upsample-train", fold as u64),
        )?;
        let up_val = upsample_minority(
            set,
            &val_idx,
            derive_seed(seed, "upsample-val", fold as u64),
        )?;

        let ckpt_path = out_dir.map(|d| d.join(format!("fold{fold}-best.ckpt")));
        let outcome = train::<F>(
            config,
            options,
            set,
            &up_train,
            &up_val,
            derive_seed(seed, "train", fold as u64),
            ckpt_path.as_deref(),
        )?;

        let best_params: ModelParams<F> = outcome.checkpoint.params()?;
        let test_idx = indices_for_subjects(set, opposite);
        for chunk in test_idx.chunks(options.batch_size) {
            let (x, _) = build_batch::<F>(config, set, chunk);
            let preds = predict(config, &best_params, &x)?;
            for (&item_idx, (class, probs)) in chunk.iter().zip(preds) {
                let item = &set.items[item_idx];
                debug_assert!(pooled[item_idx].is_none(), "segment predicted twice");
                pooled[item_idx] = Some(Prediction {
                    subject_id: item.subject_id.clone(),
                    segment_index: item.segment_index,
                    label: item.label,
                    pred: Label::from_index(class).expect("three classes"),
                    probs,
                    model_fold: fold,
                });
            }
        }
        folds.push(FoldRun {
            fold,
            split,
            outcome,
        });
    }

    let predictions: Vec<Prediction> = pooled
        .into_iter()
        .map(|p| p.expect("every segment belongs to exactly one fold"))
        .collect();
    assert_eq!(predictions.len(), set.items.len());
    Ok(CrossValOutcome {
        fold_plan,
        folds,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_cohort, CohortConfig};

    fn subject(id: &str, counts: [usize; 3]) -> SubjectSummary {
        SubjectSummary {
            id: id.into(),
            class_counts: counts,
        }
    }

    #[test]
    fn four_equal_subjects_split_two_per_fold() {
        let subjects: Vec<SubjectSummary> = (0..4)
            .map(|i| subject(&format!("a{i}"), [0, 50, 0]))
            .chain((0..4).map(|i| subject(&format!("n{i}"), [50, 0, 0])))
            .chain((0..4).map(|i| subject(&format!("p{i}"), [0, 0, 50])))
            .collect();
        let plan = make_folds(&subjects, 1).unwrap();
        assert_eq!(plan.fold(1).len(), 6);
        assert_eq!(plan.fold(2).len(), 6);
        assert_eq!(plan.class_counts[0], plan.class_counts[1]);
    }

    #[test]
    fn table_one_shaped_counts_satisfy_balance() {
        let plan = FoldPlan {
            fold_subjects: [vec!["x".into()], vec!["y".into()]],
            class_counts: [[39_356, 12_265, 6_697], [39_363, 12_290, 6_342]],
        };
        plan.validate().unwrap();
    }

    #[test]
    fn make_folds_is_deterministic() {
        let subjects: Vec<SubjectSummary> = (0..12)
            .map(|i| subject(&format!("s{i:02}"), [30 + 7 * (i % 5), 10 + i, 5 + (i % 3)]))
            .collect();
        let a = make_folds(&subjects, 9).unwrap();
        let b = make_folds(&subjects, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_subject_class_is_rejected() {
        let subjects = vec![
            subject("a", [100, 0, 0]),
            subject("b", [100, 0, 0]),
            subject("c", [10, 0, 40]), // only carrier of PAC/PVC
            subject("d", [100, 20, 0]),
            subject("e", [100, 20, 0]),
        ];
        assert!(matches!(
            make_folds(&subjects, 1),
            Err(TrainingError::SingleSubjectClass(2))
        ));
    }

    #[test]
    fn split_assigns_each_subject_to_exactly_one_bucket() {
        let subjects: Vec<SubjectSummary> = (0..5)
            .map(|i| subject(&format!("n{i}"), [80 + 10 * i, 0, 0]))
            .chain((0..3).map(|i| subject(&format!("a{i}"), [0, 60 + 5 * i, 0])))
            .chain((0..4).map(|i| subject(&format!("p{i}"), [0, 0, 30 + 4 * i])))
            .collect();
        let split = split_fold(&subjects, 3);
        let mut all: Vec<&String> = split
            .train
            .iter()
            .chain(split.val.iter())
            .chain(split.test.iter())
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), subjects.len(), "no subject may repeat or vanish");
        // Every class must appear in train and val (upsampling needs it).
        for bucket in [&split.train, &split.val] {
            for class_prefix in ["n", "a", "p"] {
                assert!(
                    bucket.iter().any(|id| id.starts_with(class_prefix)),
                    "bucket {bucket:?} lacks class {class_prefix}"
                );
            }
        }
    }

    #[test]
    fn upsample_equalizes_class_counts() {
        let cohort = gen_cohort(&CohortConfig {
            n_subjects: 6,
            segments_per_subject: 20,
            ..CohortConfig::default()
        })
        .unwrap();
        let segments: Vec<Segment> = cohort.segments.iter().map(|c| c.segment.clone()).collect();
        let (set, rejects) = prepare_dataset(&segments, ChannelConfig::HrAcc);
        assert!(rejects.is_empty());
        let all: Vec<usize> = (0..set.items.len()).collect();
        let upsampled = upsample_minority(&set, &all, 5).unwrap();

        let mut counts = [0usize; 3];
        for &i in &upsampled {
            counts[set.items[i].label.index()] += 1;
        }
        assert_eq!(counts[0], counts[1]);
        assert_eq!(counts[1], counts[2]);
        // Duplicates must reference originals of the same class.
        for &i in &upsampled {
            assert!(all.contains(&i));
        }
    }

    #[test]
    fn upsample_leaves_balanced_sets_alone() {
        let cohort = gen_cohort(&CohortConfig {
            n_subjects: 6,
            segments_per_subject: 12,
            class_mix: [1.0 / 3.0, 1.0 / 3.0, 1.0 - 2.0 / 3.0],
            ..CohortConfig::default()
        })
        .unwrap();
        let segments: Vec<Segment> = cohort.segments.iter().map(|c| c.segment.clone()).collect();
        let (set, _) = prepare_dataset(&segments, ChannelConfig::HrAcc);
        let all: Vec<usize> = (0..set.items.len()).collect();
        let mut counts = [0usize; 3];
        for item in &set.items {
            counts[item.label.index()] += 1;
        }
        if counts[0] == counts[1] && counts[1] == counts[2] {
            let upsampled = upsample_minority(&set, &all, 1).unwrap();
            assert_eq!(upsampled.len(), all.len());
        }
    }

    #[test]
    fn upsample_rejects_empty_class() {
        let cohort = gen_cohort(&CohortConfig {
            n_subjects: 6,
            segments_per_subject: 10,
            ..CohortConfig::default()
        })
        .unwrap();
        let segments: Vec<Segment> = cohort.segments.iter().map(|c| c.segment.clone()).collect();
        let (set, _) = prepare_dataset(&segments, ChannelConfig::HrAcc);
        let nsr_only: Vec<usize> = (0..set.items.len())
            .filter(|&i| set.items[i].label == Label::Nsr)
            .collect();
        assert!(matches!(
            upsample_minority(&set, &nsr_only, 1),
            Err(TrainingError::EmptyClass(_))
        ));
    }

    #[test]
    fn early_stop_fires_after_patience_non_improving_epochs() {
        let mut stopper = EarlyStop::new(40);
        assert_eq!(stopper.observe(1, 1.0), StopDecision::Improved);
        for epoch in 2..=40 {
            assert_eq!(stopper.observe(epoch, 1.0), StopDecision::NoImprovement);
        }
        assert_eq!(
            stopper.observe(41, 1.0),
            StopDecision::Stop,
            "the 40th consecutive non-improving epoch stops the run"
        );
        assert_eq!(stopper.best(), (1, 1.0));
    }

    #[test]
    fn late_improvement_resets_the_counter() {
        let mut stopper = EarlyStop::new(40);
        stopper.observe(1, 1.0);
        for epoch in 2..=40 {
            stopper.observe(epoch, 1.0);
        }
        assert_eq!(stopper.observe(41, 0.9), StopDecision::Improved);
        for epoch in 42..=80 {
            assert_eq!(stopper.observe(epoch, 0.95), StopDecision::NoImprovement);
        }
        assert_eq!(stopper.observe(81, 0.95), StopDecision::Stop);
        assert_eq!(stopper.best(), (41, 0.9));
    }

    #[test]
    fn selected_epoch_has_run_minimum_loss() {
        let losses = [1.2, 0.9, 1.1, 0.7, 0.8, 0.75, 0.71, 0.9];
        let mut stopper = EarlyStop::new(3);
        for (i, &loss) in losses.iter().enumerate() {
            if stopper.observe(i + 1, loss) == StopDecision::Stop {
                break;
            }
        }
        let (epoch, best) = stopper.best();
        assert_eq!(epoch, 4);
        assert_eq!(best, 0.7);
        assert!(losses.iter().all(|&l| l >= best));
    }

    #[test]
    fn batches_keep_partials_but_fold_singletons() {
        let order: Vec<usize> = (0..65).collect();
        let batches = make_batches(&order, 32);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].len(), 32);
        assert_eq!(batches[1].len(), 33, "trailing singleton folds into the previous batch");

        let batches = make_batches(&(0..70).collect::<Vec<_>>(), 32);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].len(), 6, "ordinary partial batches survive");
    }

    #[test]
    fn options_reject_epoch_cap_above_200() {
        let options = TrainOptions {
            max_epochs: 500,
            ..TrainOptions::default()
        };
        assert!(options.validate().is_err());
    }
}
