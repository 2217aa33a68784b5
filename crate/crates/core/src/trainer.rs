//! Joint optimization of the classifier and the per-sample permutation logits.
//!
//! Each mini-batch runs one forward pass, computes the gradients of the batch-mean
//! loss with respect to both the model parameters and the alpha rows of the batch,
//! and only then updates both. The model uses momentum SGD with a step schedule;
//! alpha rows take a bare gradient step with a constant rate. Evaluation uses the
//! classifier alone.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::losses::{self, LossFn, LossKind};
use crate::model::{Arch, Classifier, GradientSet, Layer};
use crate::noise::NoisyDataset;
use crate::numerics::{self, jacobian_vec_from_probs, l1_norm, ProbVec, RngSnapshot, RngState};
use crate::permlayer::{self, mix_apply, mix_grad, AlphaTable};
use crate::{Error, Result};

/// Slack added to the per-sample gradient-bound check.
pub const GRAD_BOUND_SLACK: f64 = 1e-9;

/// Checkpoint format version written into every checkpoint.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the permutation layer enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `l(P_bar f(x), e_y)`.
    PermutePrediction,
    /// `l(f(x), P_bar e_y)`, i.e. `l(f(x), softmax(alpha))`.
    PermuteLabel,
    /// `l(f(x), e_y)`; alpha is never touched.
    PlainCeBaseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::PermutePrediction => "permute_prediction",
            Variant::PermuteLabel => "permute_label",
            Variant::PlainCeBaseline => "plain_ce_baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permute_prediction" => Ok(Variant::PermutePrediction),
            "permute_label" => Ok(Variant::PermuteLabel),
            "plain_ce_baseline" => Ok(Variant::PlainCeBaseline),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

fn default_lr_decay() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// Model learning rate.
    pub lr: f64,
    /// Epochs (0-based) at which the model learning rate is multiplied by `lr_decay`.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    /// L2 decay added to the weight gradients (biases excluded).
    #[serde(default)]
    pub weight_decay: f64,
    /// Permutation-layer learning rate.
    pub eta_alpha: f64,
    /// Initial `softmax(alpha)[noisy_label]`.
    pub i_alpha: f64,
    pub seed: u64,
    /// Apply the model's decay schedule to `eta_alpha` as well.
    #[serde(default)]
    pub couple_alpha_schedule: bool,
}

impl TrainConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.eta_alpha >= 0.0 && self.eta_alpha.is_finite()) {
            return fail(format!(
                "eta_alpha must be non-negative, got {}",
                self.eta_alpha
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!(
                "milestones must be strictly increasing: {:?}",
                self.milestones
            ));
        }
        permlayer::validate_i_alpha(self.i_alpha, classes)
    }

    /// Model learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    pub fn eta_alpha_at(&self, epoch: usize) -> f64 {
        if self.couple_alpha_schedule {
            self.eta_alpha * self.lr_at(epoch) / self.lr
        } else {
            self.eta_alpha
        }
    }

    /// SHA-256 over the configuration and architecture, hex encoded.
    pub fn hash(&self, arch: &Arch) -> String {
        let json = serde_json::to_string(&(self, arch)).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Splits handed to the trainer. The test set carries clean labels.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: NoisyDataset,
    pub validation: Option<NoisyDataset>,
    pub test: Dataset,
}

impl TrainData {
    pub fn classes(&self) -> usize {
        self.train.data.classes
    }
}

/// Per-sample quantities gathered while computing a batch gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStats {
    pub index: usize,
    pub loss: f64,
    pub confidence: f64,
    /// `||grad_alpha l_i||_1` of the sample's own loss (not divided by the batch size).
    pub alpha_grad_l1: f64,
}

#[derive(Debug, Clone)]
pub struct BatchGrads {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Gradient of the mean loss with respect to the model parameters.
    pub model: GradientSet,
    /// Gradient of the mean loss with respect to each batch row of the alpha table.
    pub alpha: Vec<(usize, Vec<f64>)>,
    pub samples: Vec<SampleStats>,
}

/// Loss and gradients of the batch-mean objective for `batch` (indices into `data`).
pub fn batch_loss_and_grads(
    variant: Variant,
    loss: LossKind,
    model: &Classifier,
    alpha: &AlphaTable,
    data: &Dataset,
    batch: &[usize],
) -> Result<BatchGrads> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let c = model.classes;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = GradientSet::zeros_like(model);
    let mut alpha_grads = Vec::with_capacity(batch.len());
    let mut samples = Vec::with_capacity(batch.len());
    let mut total = 0.0;

    for &i in batch {
        if i >= data.len() || i >= alpha.len() {
            return Err(Error::Domain(format!("batch index {i} out of range")));
        }
        let y = data.labels[i];
        let cache = model.forward_cached(data.row(i))?;
        let f = &cache.probs;
        let target = ProbVec::one_hot(c, y)?;

        let (value, upstream, g_alpha) = match variant {
            Variant::PermutePrediction => {
                let s = numerics::softmax(alpha.row(i))?;
                let permuted = mix_apply(&s, y, f);
                let value = losses::value_raw(loss, &permuted, &target);
                let g_out = losses::grad_p_raw(loss, &permuted, &target);
                let g_alpha = mix_grad(&s, y, f, &g_out);
                // P_bar is symmetric: its transpose product is itself
                let upstream = mix_apply(&s, y, &g_out);
                (value, upstream, Some(g_alpha))
            }
            Variant::PermuteLabel => {
                let s = numerics::softmax(alpha.row(i))?;
                let value = losses::value_raw(loss, f, &s);
                let upstream = losses::grad_p_raw(loss, f, &s);
                let g_target = losses::grad_q_raw(loss, f, &s);
                (
                    value,
                    upstream,
                    Some(jacobian_vec_from_probs(&s, &g_target)),
                )
            }
            Variant::PlainCeBaseline => {
                let value = losses::value_raw(loss, f, &target);
                (value, losses::grad_p_raw(loss, f, &target), None)
            }
        };

        if !value.is_finite() || upstream.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite loss {value} at sample {i} (noisy label {}): prediction {:?}, alpha {:?}",
                y + 1,
                f.as_slice(),
                alpha.row(i)
            )));
        }
        total += value;
        model.backward_from(&cache, &upstream, scale, &mut grads)?;
        let alpha_grad_l1 = g_alpha.as_deref().map_or(0.0, l1_norm);
        samples.push(SampleStats {
            index: i,
            loss: value,
            confidence: numerics::confidence(f),
            alpha_grad_l1,
        });
        if let Some(mut g) = g_alpha {
            g.iter_mut().for_each(|v| *v *= scale);
            alpha_grads.push((i, g));
        }
    }

    Ok(BatchGrads {
        loss: total * scale,
        model: grads,
        alpha: alpha_grads,
        samples,
    })
}

/// Momentum SGD: `v <- mu v + (g + wd w)`, `w <- w - lr v`. Weight decay is applied
/// to weights only, never to biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Vec<Layer>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut Classifier, grads: &GradientSet, lr: f64) -> Result<()> {
        if grads.layers.len() != model.layers.len()
            || grads
                .layers
                .iter()
                .zip(&model.layers)
                .any(|(g, l)| g.rows != l.rows || g.cols != l.cols)
        {
            return Err(Error::Domain(
                "gradient shapes do not match the model".into(),
            ));
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| GradientSet::zeros_like(model).layers);
        for ((layer, g), v) in model.layers.iter_mut().zip(&grads.layers).zip(velocity) {
            for ((w, gw), vw) in layer.weight.iter_mut().zip(&g.weight).zip(&mut v.weight) {
                *vw = self.momentum * *vw + gw + self.weight_decay * *w;
                *w -= lr * *vw;
            }
            for ((b, gb), vb) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                *vb = self.momentum * *vb + gb;
                *b -= lr * *vb;
            }
        }
        Ok(())
    }
}

/// `alpha[i] <- alpha[i] - eta_alpha * g_i` for every row in `grads`.
pub fn alpha_step(table: &mut AlphaTable, grads: &[(usize, Vec<f64>)], eta_alpha: f64) {
    for (i, g) in grads {
        for (a, gi) in table.row_mut(*i).iter_mut().zip(g) {
            *a -= eta_alpha * gi;
        }
    }
}

/// Percentage of samples whose predicted class equals `labels`.
pub fn accuracy(model: &Classifier, data: &Dataset, labels: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if model.predict(data.row(i))? == y {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub eta_alpha: f64,
    pub train_loss: f64,
    /// Accuracy against the held-out noisy labels.
    pub validation_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub permutation_accuracy: f64,
    pub mean_confidence: f64,
    pub mean_alpha_grad_l1: f64,
    /// Samples with `confidence < 1/c`, on which the per-sample bound
    /// `||grad_alpha l_i||_1 <= (c M / 4) confidence` was checked.
    pub bound_checked: usize,
    pub bound_violations: usize,
    /// Largest observed `||grad_alpha l_i||_1 / ((c M / 4) confidence)` on checked samples.
    pub bound_max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub arch: Arch,
    pub config_hash: String,
    pub loss_grad_bound: Option<f64>,
    pub train_samples: usize,
    pub clean_fraction: f64,
    pub initial_permutation_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint_path: Option<String>,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<String>,
}

impl RunReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn final_test_accuracy(&self) -> f64 {
        self.last().map_or(f64::NAN, |r| r.test_accuracy)
    }

    pub fn final_permutation_accuracy(&self) -> f64 {
        self.last().map_or(self.initial_permutation_accuracy, |r| {
            r.permutation_accuracy
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub const CSV_HEADER: &'static str = "epoch,lr,eta_alpha,train_loss,validation_accuracy,test_accuracy,permutation_accuracy,mean_confidence,mean_alpha_grad_l1,bound_checked,bound_violations,bound_max_ratio";

    /// One row per epoch, columns as [`RunReport::CSV_HEADER`].
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let val = r
                .validation_accuracy
                .map(|v| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.lr,
                r.eta_alpha,
                r.train_loss,
                val,
                r.test_accuracy,
                r.permutation_accuracy,
                r.mean_confidence,
                r.mean_alpha_grad_l1,
                r.bound_checked,
                r.bound_violations,
                r.bound_max_ratio
            ));
        }
        out
    }
}

/// Everything needed to continue a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    pub model: Classifier,
    pub alpha: AlphaTable,
    pub optimizer: Sgd,
    pub rng: RngSnapshot,
    pub records: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "{}: checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }
}

/// Training state for one run.
pub struct Trainer<'a> {
    config: TrainConfig,
    arch: Arch,
    loss: LossFn,
    data: &'a TrainData,
    model: Classifier,
    alpha: AlphaTable,
    optimizer: Sgd,
    rng: RngState,
    epoch: usize,
    records: Vec<EpochRecord>,
    initial_permutation_accuracy: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, arch: Arch, data: &'a TrainData) -> Result<Self> {
        let classes = data.classes();
        config.validate(classes)?;
        if data.test.dim != data.train.data.dim {
            return Err(Error::Config(format!(
                "train has {} features but test has {}",
                data.train.data.dim, data.test.dim
            )));
        }
        let mut rng = RngState::seed_from_u64(config.seed);
        let model = Classifier::init(arch, data.train.data.dim, classes, &mut rng)?;
        let alpha = AlphaTable::init(data.train.noisy_labels(), config.i_alpha, classes)?;
        let initial_permutation_accuracy = alpha.permutation_accuracy(&data.train.clean_labels);
        Ok(Trainer {
            loss: LossFn::new(config.loss, classes),
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            config,
            arch,
            data,
            model,
            alpha,
            rng,
            epoch: 0,
            records: Vec::new(),
            initial_permutation_accuracy,
        })
    }

    /// Continues from `checkpoint`; fails if it was written under a different configuration.
    pub fn resume(
        config: TrainConfig,
        arch: Arch,
        data: &'a TrainData,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        let mut trainer = Trainer::new(config, arch, data)?;
        let expected = trainer.config.hash(&arch);
        if checkpoint.config_hash != expected {
            return Err(Error::Config(format!(
                "checkpoint config hash {} does not match {expected}",
                checkpoint.config_hash
            )));
        }
        if checkpoint.alpha.len() != data.train.len() {
            return Err(Error::Config(format!(
                "checkpoint alpha table has {} rows, training set has {}",
                checkpoint.alpha.len(),
                data.train.len()
            )));
        }
        trainer.model = checkpoint.model;
        trainer.alpha = checkpoint.alpha;
        trainer.optimizer = checkpoint.optimizer;
        trainer.rng = RngState::restore(&checkpoint.rng)?;
        trainer.epoch = checkpoint.epoch;
        trainer.records = checkpoint.records;
        Ok(trainer)
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }

    pub fn alpha(&self) -> &AlphaTable {
        &self.alpha
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash: self.config.hash(&self.arch),
            epoch: self.epoch,
            model: self.model.clone(),
            alpha: self.alpha.clone(),
            optimizer: self.optimizer.clone(),
            rng: self.rng.snapshot(),
            records: self.records.clone(),
        }
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            config: self.config.clone(),
            arch: self.arch,
            config_hash: self.config.hash(&self.arch),
            loss_grad_bound: self.loss.grad_bound_m,
            train_samples: self.data.train.len(),
            clean_fraction: self.data.train.clean_fraction(),
            initial_permutation_accuracy: self.initial_permutation_accuracy,
            epochs: self.records.clone(),
            checkpoint_path: None,
            diverged: None,
        }
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let train = &self.data.train.data;
        let classes = self.model.classes as f64;
        let lr = self.config.lr_at(self.epoch);
        let eta_alpha = self.config.eta_alpha_at(self.epoch);
        let bound = match (self.config.variant, self.loss.grad_bound_m) {
            (Variant::PermutePrediction, Some(m)) => Some(classes * m / 4.0),
            _ => None,
        };

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);

        let mut loss_sum = 0.0;
        let mut confidence_sum = 0.0;
        let mut grad_sum = 0.0;
        let (mut checked, mut violations, mut max_ratio) = (0usize, 0usize, 0.0f64);
        for batch in order.chunks(self.config.batch_size) {
            let grads = batch_loss_and_grads(
                self.config.variant,
                self.config.loss,
                &self.model,
                &self.alpha,
                train,
                batch,
            )?;
            loss_sum += grads.loss * batch.len() as f64;
            for s in &grads.samples {
                confidence_sum += s.confidence;
                grad_sum += s.alpha_grad_l1;
                if let Some(k) = bound {
                    if s.confidence < 1.0 / classes {
                        checked += 1;
                        let limit = k * s.confidence;
                        if s.alpha_grad_l1 > limit + GRAD_BOUND_SLACK {
                            violations += 1;
                        }
                        if limit > 0.0 {
                            max_ratio = max_ratio.max(s.alpha_grad_l1 / limit);
                        }
                    }
                }
            }
            // both updates use gradients taken at the pre-update parameters
            self.optimizer.step(&mut self.model, &grads.model, lr)?;
            if self.config.variant != Variant::PlainCeBaseline {
                alpha_step(&mut self.alpha, &grads.alpha, eta_alpha);
            }
        }
        if !self.model.is_finite() || !self.alpha.is_finite() {
            return Err(Error::Training(format!(
                "parameters became non-finite during epoch {}",
                self.epoch + 1
            )));
        }

        let n = train.len() as f64;
        let validation_accuracy = match &self.data.validation {
            Some(v) => Some(accuracy(&self.model, &v.data, v.noisy_labels())?),
            None => None,
        };
        let record = EpochRecord {
            epoch: self.epoch + 1,
            lr,
            eta_alpha,
            train_loss: loss_sum / n,
            validation_accuracy,
            test_accuracy: accuracy(&self.model, &self.data.test, &self.data.test.labels)?,
            permutation_accuracy: self
                .alpha
                .permutation_accuracy(&self.data.train.clean_labels),
            mean_confidence: confidence_sum / n,
            mean_alpha_grad_l1: grad_sum / n,
            bound_checked: checked,
            bound_violations: violations,
            bound_max_ratio: max_ratio,
        };
        self.records.push(record);
        self.epoch += 1;
        Ok(self.records.last().expect("just pushed"))
    }

    /// Runs the remaining epochs. A non-finite loss stops training and is reported
    /// as [`Error::Diverged`] carrying the epochs completed so far.
    pub fn run(&mut self) -> Result<RunReport> {
        while !self.is_done() {
            if let Err(e) = self.run_epoch() {
                return Err(match e {
                    Error::Training(msg) => {
                        let mut report = self.report();
                        report.diverged = Some(msg.clone());
                        Error::Diverged {
                            message: msg,
                            report: Box::new(report),
                        }
                    }
                    other => other,
                });
            }
        }
        Ok(self.report())
    }
}

/// Trains from scratch and returns the report.
pub fn train(config: &TrainConfig, arch: Arch, data: &TrainData) -> Result<RunReport> {
    Trainer::new(config.clone(), arch, data)?.run()
}

/// One cell of a `(eta_alpha, i_alpha)` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub eta_alpha: f64,
    pub i_alpha: f64,
    pub seed: u64,
    pub initial_permutation_accuracy: f64,
    pub perm_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Trains one run per grid cell, in parallel. Cell `k` (row-major over
/// `eta_alpha x i_alpha`) uses seed `template.seed + k`. Failed cells are recorded
/// and the sweep continues.
pub fn sweep(
    template: &TrainConfig,
    arch: Arch,
    data: &TrainData,
    eta_alpha_grid: &[f64],
    i_alpha_grid: &[f64],
) -> Result<Vec<SweepCell>> {
    if eta_alpha_grid.is_empty() || i_alpha_grid.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    let cells: Vec<(usize, f64, f64)> = eta_alpha_grid
        .iter()
        .flat_map(|&e| i_alpha_grid.iter().map(move |&i| (e, i)))
        .enumerate()
        .map(|(k, (e, i))| (k, e, i))
        .collect();
    Ok(cells
        .into_par_iter()
        .map(|(k, eta_alpha, i_alpha)| {
            let config = TrainConfig {
                eta_alpha,
                i_alpha,
                seed: template.seed.wrapping_add(k as u64),
                ..template.clone()
            };
            let initial = AlphaTable::init(data.train.noisy_labels(), i_alpha, data.classes())
                .map(|t| t.permutation_accuracy(&data.train.clean_labels))
                .unwrap_or(f64::NAN);
            let mut cell = SweepCell {
                eta_alpha,
                i_alpha,
                seed: config.seed,
                initial_permutation_accuracy: initial,
                perm_accuracy: None,
                test_accuracy: None,
                error: None,
            };
            match train(&config, arch, data) {
                Ok(report) => {
                    cell.perm_accuracy = Some(report.final_permutation_accuracy());
                    cell.test_accuracy = Some(report.final_test_accuracy());
                }
                Err(e) => cell.error = Some(e.to_string()),
            }
            cell
        })
        .collect())
}

pub const SWEEP_CSV_HEADER: &str = "eta_alpha,I_alpha,perm_accuracy,test_accuracy";

/// Long-format sweep table; failed cells leave the metric columns empty.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{}\n",
            c.eta_alpha,
            c.i_alpha,
            fmt(c.perm_accuracy),
            fmt(c.test_accuracy)
        ));
    }
    out
}
