//! Loss, optimizers, mini-batch training loop, seeding, and the evaluation
//! driver shared by the capsule fusion model and the baselines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::BaselineModel;
use crate::data::{Batch, MultimodalDataset};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::metrics::{best_threshold, metric_report, roc_auc, MetricReport};
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Var};

/// Anything trainable by the shared loop: it exposes its parameters and can
/// put class logits for a batch onto a tape.
pub trait MultimodalClassifier {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn n_classes(&self) -> usize;
    fn logits_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        override_param: Option<(ParamId, Var)>,
    ) -> Result<Var>;
}

impl MultimodalClassifier for FusionModel {
    fn params(&self) -> &ParamSet {
        FusionModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        FusionModel::params_mut(self)
    }

    fn n_classes(&self) -> usize {
        self.config().n_classes
    }

    fn logits_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        override_param: Option<(ParamId, Var)>,
    ) -> Result<Var> {
        Ok(self.forward_on_tape(tape, batch, override_param)?.logits)
    }
}

impl MultimodalClassifier for BaselineModel {
    fn params(&self) -> &ParamSet {
        BaselineModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        BaselineModel::params_mut(self)
    }

    fn n_classes(&self) -> usize {
        self.config().n_classes
    }

    fn logits_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        override_param: Option<(ParamId, Var)>,
    ) -> Result<Var> {
        BaselineModel::logits_on_tape(self, tape, batch, override_param)
    }
}

// ── loss ────────────────────────────────────────────────────────────────

/// Inverse-frequency class weights: `w_c = B / (n_classes * count_c)`.
pub fn auto_class_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::contract("auto_class_weights", "empty batch"));
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::contract(
                "auto_class_weights",
                format!("label {l} out of range for {n_classes} classes"),
            ));
        }
        counts[l] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateData(format!(
            "class {missing} absent, cannot derive weights"
        )));
    }
    let b = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| b / (n_classes as f64 * c as f64))
        .collect())
}

/// Class-weighted cross-entropy on probabilities:
/// `-(1/B) * sum_b w_{y_b} * ln(p[b, y_b] + 1e-12)`.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    weights: &[f64],
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::contract("weighted_cross_entropy", "empty batch"));
    }
    let n_classes = tape.shape(probs)[1];
    if weights.len() != n_classes {
        return Err(Error::contract(
            "weighted_cross_entropy",
            format!("{} weights for {n_classes} classes", weights.len()),
        ));
    }
    for &l in labels {
        if l >= n_classes {
            return Err(Error::contract(
                "weighted_cross_entropy",
                format!("label {l} out of range for {n_classes} classes"),
            ));
        }
    }
    let picked = tape.pick_per_row(probs, labels)?;
    let shifted = tape.add_scalar(picked, 1e-12)?;
    let logp = tape.ln(shifted)?;
    let w_col: Vec<f64> = labels.iter().map(|&l| weights[l]).collect();
    let w = tape.constant(vec![labels.len(), 1], w_col)?;
    let weighted = tape.mul(logp, w)?;
    let total = tape.sum_all(weighted)?;
    tape.mul_scalar(total, -1.0 / labels.len() as f64)
}

/// Eager scalar evaluation of the same loss (loop oracle for tests).
pub fn weighted_cross_entropy_value(
    probs: &Tensor,
    labels: &[usize],
    weights: &[f64],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::contract("weighted_cross_entropy", "empty batch"));
    }
    let n_classes = probs.shape()[1];
    let mut total = 0.0;
    for (b, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::contract(
                "weighted_cross_entropy",
                format!("label {l} out of range for {n_classes} classes"),
            ));
        }
        total += weights[l] * (probs.row(b)[l] + 1e-12).ln();
    }
    Ok(-total / labels.len() as f64)
}

/// Margin loss over probabilities, kept behind a config flag for
/// experimentation: positive classes are pushed above `m_plus`, negatives
/// below `m_minus`, with the standard 0.5 down-weighting of absent classes.
pub fn margin_loss(tape: &mut Tape, probs: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::contract("margin_loss", "empty batch"));
    }
    let (m_plus, m_minus, lambda) = (0.9, 0.1, 0.5);
    let n_classes = tape.shape(probs)[1];
    let batch = labels.len();
    let mut present = vec![0.0; batch * n_classes];
    let mut absent = vec![0.0; batch * n_classes];
    let mut w_row = vec![0.0; batch * n_classes];
    for (b, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::contract(
                "margin_loss",
                format!("label {l} out of range for {n_classes} classes"),
            ));
        }
        for c in 0..n_classes {
            if c == l {
                present[b * n_classes + c] = 1.0;
            } else {
                absent[b * n_classes + c] = lambda;
            }
            w_row[b * n_classes + c] = weights[l];
        }
    }
    let present = tape.constant(vec![batch, n_classes], present)?;
    let absent = tape.constant(vec![batch, n_classes], absent)?;
    let w_row = tape.constant(vec![batch, n_classes], w_row)?;

    // max(0, m+ - p)^2 for present classes, max(0, p - m-)^2 for absent.
    let neg_p = tape.mul_scalar(probs, -1.0)?;
    let up = tape.add_scalar(neg_p, m_plus)?;
    let up = tape.relu(up)?;
    let up = tape.mul(up, up)?;
    let down = tape.add_scalar(probs, -m_minus)?;
    let down = tape.relu(down)?;
    let down = tape.mul(down, down)?;

    let pos_term = tape.mul(present, up)?;
    let neg_term = tape.mul(absent, down)?;
    let both = tape.add(pos_term, neg_term)?;
    let weighted = tape.mul(both, w_row)?;
    let total = tape.sum_all(weighted)?;
    tape.mul_scalar(total, 1.0 / batch as f64)
}

// ── optimizers ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

/// Per-parameter optimizer state aligned with `ParamSet` entry order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    /// Adam first moment or SGD velocity.
    m: Vec<Vec<f64>>,
    /// Adam second moment (unused by SGD).
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .entries()
            .iter()
            .map(|e| vec![0.0; e.value.numel()])
            .collect();
        Optimizer {
            kind,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter with an accumulated gradient; missing
    /// gradients are treated as zero.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (i, entry) in params.entries_mut().iter_mut().enumerate() {
                    let grad = entry.value.grad().map(|g| g.to_vec());
                    let data = entry.value.data_mut();
                    for j in 0..data.len() {
                        let g = grad.as_ref().map_or(0.0, |g| g[j]);
                        self.m[i][j] = beta1 * self.m[i][j] + (1.0 - beta1) * g;
                        self.v[i][j] = beta2 * self.v[i][j] + (1.0 - beta2) * g * g;
                        let m_hat = self.m[i][j] / bc1;
                        let v_hat = self.v[i][j] / bc2;
                        data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd { momentum } => {
                for (i, entry) in params.entries_mut().iter_mut().enumerate() {
                    let grad = entry.value.grad().map(|g| g.to_vec());
                    let data = entry.value.data_mut();
                    for j in 0..data.len() {
                        let g = grad.as_ref().map_or(0.0, |g| g[j]);
                        self.m[i][j] = momentum * self.m[i][j] + g;
                        data[j] -= lr * self.m[i][j];
                    }
                }
            }
        }
    }
}

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", untagged)]
pub enum ClassWeights {
    Auto(AutoTag),
    Explicit([f64; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights::Auto(AutoTag::Auto)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    WeightedCrossEntropy,
    Margin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    pub class_weights: ClassWeights,
    pub seed: u64,
    /// Early-stopping patience in epochs on validation AUC; 0 disables.
    pub patience: usize,
    /// Train/validation/test fractions; must sum to 1.
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            loss: LossKind::default(),
            class_weights: ClassWeights::default(),
            seed: 0,
            patience: 10,
            split: [0.70, 0.15, 0.15],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        let sum: f64 = self.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split.iter().any(|&f| f <= 0.0) {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {:?}",
                self.split
            )));
        }
        if let ClassWeights::Explicit(w) = self.class_weights {
            if w.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
                return Err(Error::Config(format!(
                    "explicit class weights must be positive, got {w:?}"
                )));
            }
        }
        Ok(())
    }
}

// ── splitting ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder allocation of `n` items to the three fractions.
fn allocate(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for k in 0..(n - assigned) {
        counts[order[k % 3]] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Stratified split: each class is shuffled and allocated to the three
/// splits by largest remainder, preserving the class ratio within one
/// sample per split.
pub fn stratified_split(labels: &[u8], fractions: &[f64; 3], rng: &mut ChaCha8Rng) -> SplitIndices {
    let mut split = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(rng);
        let counts = allocate(idx.len(), fractions);
        split.train.extend(&idx[..counts[0]]);
        split.val.extend(&idx[counts[0]..counts[0] + counts[1]]);
        split.test.extend(&idx[counts[0] + counts[1]..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

// ── training loop ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub test_report: MetricReport,
}

impl TrainLog {
    /// CSV rendering: `epoch,train_loss,val_loss,val_auc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_auc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_auc
            ));
        }
        out
    }
}

/// Class probabilities for the selected samples, in index order.
pub fn predict_probs<M: MultimodalClassifier>(
    model: &M,
    ds: &MultimodalDataset,
    indices: &[usize],
) -> Result<Tensor> {
    let batch = ds.batch(indices);
    let mut tape = Tape::new();
    let logits = model.logits_on_tape(&mut tape, &batch, None)?;
    let probs_var = tape.softmax_last(logits)?;
    Ok(tape.value_tensor(probs_var))
}

fn positive_scores<M: MultimodalClassifier>(
    model: &M,
    ds: &MultimodalDataset,
    indices: &[usize],
) -> Result<(Vec<f64>, Vec<u8>, Tensor)> {
    let probs = predict_probs(model, ds, indices)?;
    let scores: Vec<f64> = (0..indices.len()).map(|b| probs.row(b)[1]).collect();
    let labels: Vec<u8> = indices.iter().map(|&i| ds.labels()[i]).collect();
    Ok((scores, labels, probs))
}

fn loss_on_batch<M: MultimodalClassifier>(
    model: &M,
    tape: &mut Tape,
    batch: &Batch,
    weights: &[f64],
    kind: LossKind,
) -> Result<Var> {
    let logits = model.logits_on_tape(tape, batch, None)?;
    let probs = tape.softmax_last(logits)?;
    match kind {
        LossKind::WeightedCrossEntropy => {
            weighted_cross_entropy(tape, probs, &batch.labels, weights)
        }
        LossKind::Margin => margin_loss(tape, probs, &batch.labels, weights),
    }
}

/// Resolve configured class weights against the training labels.
pub fn resolve_class_weights(
    config: &TrainConfig,
    train_labels: &[usize],
    n_classes: usize,
) -> Result<Vec<f64>> {
    match config.class_weights {
        ClassWeights::Auto(_) => auto_class_weights(train_labels, n_classes),
        ClassWeights::Explicit(w) => Ok(w.to_vec()),
    }
}

/// Train `model` in place. The dataset is split stratified by label with the
/// configured fractions and seed; mini-batches are reshuffled every epoch;
/// the best-validation-AUC parameters are restored at the end; the returned
/// log carries per-epoch records plus the final test report evaluated with
/// [`evaluate`].
pub fn train<M: MultimodalClassifier>(
    model: &mut M,
    ds: &MultimodalDataset,
    config: &TrainConfig,
    fpr_max: f64,
) -> Result<TrainLog> {
    config.validate()?;
    if ds.n_samples() < config.batch_size {
        return Err(Error::contract(
            "train",
            format!(
                "dataset has {} samples, smaller than one batch of {}",
                ds.n_samples(),
                config.batch_size
            ),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let split = stratified_split(ds.labels(), &config.split, &mut rng);
    for (name, part) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        let pos = part.iter().filter(|&&i| ds.labels()[i] == 1).count();
        if part.is_empty() || pos == 0 || pos == part.len() {
            return Err(Error::DegenerateData(format!(
                "{name} split has a single class ({pos} positives of {})",
                part.len()
            )));
        }
    }

    let train_labels: Vec<usize> = split
        .train
        .iter()
        .map(|&i| ds.labels()[i] as usize)
        .collect();
    let weights = resolve_class_weights(config, &train_labels, model.n_classes())?;

    let mut optimizer = Optimizer::new(config.optimizer, model.params());
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut epochs_since_best = 0usize;

    let mut order = split.train.clone();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = ds.batch(chunk);
            let mut tape = Tape::new();
            let loss = loss_on_batch(model, &mut tape, &batch, &weights, config.loss)?;
            loss_sum += tape.scalar_value(loss)? * chunk.len() as f64;
            tape.backward(loss)?;
            model.params_mut().zero_grads();
            tape.add_grads_to(model.params_mut());
            optimizer.step(model.params_mut(), config.learning_rate);
        }
        let train_loss = loss_sum / split.train.len() as f64;

        let val_batch = ds.batch(&split.val);
        let mut val_tape = Tape::new();
        let val_loss_var = loss_on_batch(model, &mut val_tape, &val_batch, &weights, config.loss)?;
        let val_loss = val_tape.scalar_value(val_loss_var)?;
        let (val_scores, val_labels, _) = positive_scores(model, ds, &split.val)?;
        let val_auc = roc_auc(&val_scores, &val_labels)?;

        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_auc,
        });

        let improved = best.as_ref().is_none_or(|(b, _)| val_auc > *b);
        if improved {
            best = Some((val_auc, model.params().snapshot()));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if config.patience > 0 && epochs_since_best >= config.patience {
                break;
            }
        }
    }

    if let Some((_, snapshot)) = &best {
        model.params_mut().restore(snapshot);
    }

    let test_report = evaluate(model, ds, &split, fpr_max)?;
    Ok(TrainLog {
        records,
        test_report,
    })
}

/// Score the test split: the F1 threshold is chosen on the validation split
/// and applied to the test split; AUC and partial AUC are computed on test
/// scores (positive-class probability).
pub fn evaluate<M: MultimodalClassifier>(
    model: &M,
    ds: &MultimodalDataset,
    split: &SplitIndices,
    fpr_max: f64,
) -> Result<MetricReport> {
    let (val_scores, val_labels, _) = positive_scores(model, ds, &split.val)?;
    let threshold = best_threshold(&val_scores, &val_labels)?;
    let (test_scores, test_labels, _) = positive_scores(model, ds, &split.test)?;
    metric_report(&test_scores, &test_labels, threshold, fpr_max)
}

/// Recompute the deterministic split a config produces for a dataset.
pub fn split_for(ds: &MultimodalDataset, config: &TrainConfig) -> SplitIndices {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    stratified_split(ds.labels(), &config.split, &mut rng)
}

// ── multi-seed driver ───────────────────────────────────────────────────

/// Outcome of one seed's run.
pub struct SeedRun<M> {
    pub seed: u64,
    pub model: M,
    pub log: TrainLog,
}

/// Train one model per seed, at most `threads` at a time, and return the
/// outcomes in seed order. Each run is fully isolated; results do not depend
/// on scheduling.
pub fn train_seeds<M, F>(
    ds: &MultimodalDataset,
    base_config: &TrainConfig,
    seeds: &[u64],
    threads: usize,
    factory: F,
    fpr_max: f64,
) -> Result<Vec<SeedRun<M>>>
where
    M: MultimodalClassifier + Send,
    F: Fn(u64) -> Result<M> + Sync,
{
    let threads = threads.max(1).min(seeds.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<SeedRun<M>>>>> =
        seeds.iter().map(|_| std::sync::Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let seed = seeds[i];
                let outcome = (|| {
                    let mut model = factory(seed)?;
                    let mut config = base_config.clone();
                    config.seed = seed;
                    let log = train(&mut model, ds, &config, fpr_max)?;
                    Ok(SeedRun { seed, model, log })
                })();
                *results[i].lock().expect("no poisoned slots") = Some(outcome);
            });
        }
    });

    results
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("no poisoned slots")
                .expect("every slot filled")
        })
        .collect()
}
