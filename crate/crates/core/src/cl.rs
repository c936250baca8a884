//! Streaming continual-learning rules for the last fully-connected layer.
//!
//! Only the head (`W: M × N`, `b: N`) ever moves. Seven update rules are
//! supported: per-sample and batched SGD, their variants that freeze the
//! initial classes, learning without forgetting against a copy head, and
//! copy-weight-with-reinit consolidation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const CHECKPOINT_MAGIC: &[u8; 8] = b"CLHD0001";

#[derive(Debug, Error)]
pub enum ClError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("duplicate class label {0:?}")]
    DuplicateLabel(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown algorithm {0:?}")]
    UnknownAlgorithm(String),
    #[error("cannot checkpoint with {0} samples pending in the current batch")]
    PendingBatch(usize),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "tinyol")]
    TinyOl,
    #[serde(rename = "tinyol-batches")]
    TinyOlBatches,
    #[serde(rename = "tinyol-v2")]
    TinyOlV2,
    #[serde(rename = "tinyol-v2-batches")]
    TinyOlV2Batches,
    #[serde(rename = "lwf")]
    Lwf,
    #[serde(rename = "lwf-batches")]
    LwfBatches,
    #[serde(rename = "cwr")]
    Cwr,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::TinyOl,
        Algorithm::TinyOlBatches,
        Algorithm::TinyOlV2,
        Algorithm::TinyOlV2Batches,
        Algorithm::Lwf,
        Algorithm::LwfBatches,
        Algorithm::Cwr,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::TinyOl => "tinyol",
            Algorithm::TinyOlBatches => "tinyol-batches",
            Algorithm::TinyOlV2 => "tinyol-v2",
            Algorithm::TinyOlV2Batches => "tinyol-v2-batches",
            Algorithm::Lwf => "lwf",
            Algorithm::LwfBatches => "lwf-batches",
            Algorithm::Cwr => "cwr",
        }
    }

    /// Gradients are averaged over a batch before the head moves.
    pub fn accumulates(self) -> bool {
        matches!(self, Algorithm::TinyOlBatches | Algorithm::TinyOlV2Batches)
    }

    /// Anything happens at batch boundaries.
    pub fn uses_batches(self) -> bool {
        matches!(
            self,
            Algorithm::TinyOlBatches
                | Algorithm::TinyOlV2Batches
                | Algorithm::LwfBatches
                | Algorithm::Cwr
        )
    }

    pub fn freezes_initial_classes(self) -> bool {
        matches!(self, Algorithm::TinyOlV2 | Algorithm::TinyOlV2Batches)
    }

    pub fn is_lwf(self) -> bool {
        matches!(self, Algorithm::Lwf | Algorithm::LwfBatches)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = ClError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Self::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| ClError::UnknownAlgorithm(s.to_string()))
    }
}

/// Trainable last layer. `W[i][j]` maps feature `i` to class `j`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClHead {
    feature_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    class_labels: Vec<String>,
}

impl ClHead {
    pub fn zeros(feature_dim: usize, class_labels: Vec<String>) -> Result<Self, ClError> {
        let n = class_labels.len();
        Self::from_parts(feature_dim, vec![0.0; feature_dim * n], vec![0.0; n], class_labels)
    }

    pub fn from_parts(
        feature_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        class_labels: Vec<String>,
    ) -> Result<Self, ClError> {
        let n = class_labels.len();
        if bias.len() != n || weights.len() != feature_dim * n {
            return Err(ClError::Dimension(format!(
                "head with M={feature_dim}, N={n} needs {} weights and {n} biases, got {} and {}",
                feature_dim * n,
                weights.len(),
                bias.len()
            )));
        }
        check_unique(&class_labels)?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(ClError::NonFinite("head parameters"));
        }
        Ok(Self {
            feature_dim,
            weights,
            bias,
            class_labels,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn weight(&self, feature: usize, class: usize) -> f64 {
        self.weights[feature * self.num_classes() + class]
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_labels.iter().position(|l| l == label)
    }

    /// Logits `z_j = Σ_i W[i][j]·f[i] + b[j]`.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>, ClError> {
        if features.len() != self.feature_dim {
            return Err(ClError::Dimension(format!(
                "feature vector of length {} for a head expecting {}",
                features.len(),
                self.feature_dim
            )));
        }
        let n = self.num_classes();
        let mut z = self.bias.clone();
        for (row, &fi) in self.weights.chunks_exact(n.max(1)).zip(features) {
            for (zj, &w) in z.iter_mut().zip(row) {
                *zj += w * fi;
            }
        }
        Ok(z)
    }

    /// Appends one zero column and zero bias per new label; existing parameters are untouched.
    pub fn expand(&self, new_classes: &[String]) -> Result<ClHead, ClError> {
        let mut labels = self.class_labels.clone();
        labels.extend(new_classes.iter().cloned());
        check_unique(&labels)?;
        let (old_n, new_n) = (self.num_classes(), labels.len());
        let mut weights = Vec::with_capacity(self.feature_dim * new_n);
        for i in 0..self.feature_dim {
            weights.extend_from_slice(&self.weights[i * old_n..(i + 1) * old_n]);
            weights.resize((i + 1) * new_n, 0.0);
        }
        let mut bias = self.bias.clone();
        bias.resize(new_n, 0.0);
        Ok(ClHead {
            feature_dim: self.feature_dim,
            weights,
            bias,
            class_labels: labels,
        })
    }

    /// `θ ← θ − lr·g`, leaving columns below `first_trainable` unchanged.
    fn apply(&mut self, grad: &HeadGradient, lr: f64, first_trainable: usize) {
        let n = self.num_classes();
        for (row, grow) in self
            .weights
            .chunks_exact_mut(n)
            .zip(grad.dw.chunks_exact(n))
        {
            for j in first_trainable..n {
                row[j] -= lr * grow[j];
            }
        }
        for j in first_trainable..n {
            self.bias[j] -= lr * grad.db[j];
        }
    }

    fn column_reset(&mut self) {
        self.weights.iter_mut().for_each(|w| *w = 0.0);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// Argmax class, lowest index on ties.
    pub fn predict(&self, features: &[f64]) -> Result<usize, ClError> {
        Ok(argmax(&self.forward(features)?))
    }
}

fn check_unique(labels: &[String]) -> Result<(), ClError> {
    let mut seen = std::collections::HashSet::new();
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(ClError::DuplicateLabel(l.clone()));
        }
    }
    Ok(())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy `−ln p_y` in nats.
pub fn cross_entropy(probabilities: &[f64], label: usize) -> f64 {
    -probabilities[label].ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

impl HeadGradient {
    pub fn zeros(feature_dim: usize, classes: usize) -> Self {
        Self {
            dw: vec![0.0; feature_dim * classes],
            db: vec![0.0; classes],
        }
    }

    /// `dW = f ⊗ db`.
    pub fn outer(features: &[f64], db: Vec<f64>) -> Self {
        let mut dw = Vec::with_capacity(features.len() * db.len());
        for &fi in features {
            dw.extend(db.iter().map(|&d| fi * d));
        }
        Self { dw, db }
    }

    fn add_assign(&mut self, other: &HeadGradient) {
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            *a += b;
        }
        for (a, b) in self.db.iter_mut().zip(&other.db) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.dw.iter_mut().chain(self.db.iter_mut()).for_each(|v| *v *= s);
    }

    fn clear(&mut self) {
        self.dw.iter_mut().chain(self.db.iter_mut()).for_each(|v| *v = 0.0);
    }
}

/// Softmax cross-entropy gradient: `db = p − onehot(y)`, `dW = f ⊗ db`.
pub fn ce_gradient(features: &[f64], probabilities: &[f64], label: usize) -> Result<HeadGradient, ClError> {
    if label >= probabilities.len() {
        return Err(ClError::LabelOutOfRange {
            label,
            classes: probabilities.len(),
        });
    }
    let mut db = probabilities.to_vec();
    db[label] -= 1.0;
    Ok(HeadGradient::outer(features, db))
}

/// Gradient of `CE(p, y) + λ·CE(softmax(z/T), softmax(z_copy/T))` with respect
/// to the training head. At `T = 1` this is `db = (1+λ)p − onehot(y) − λq`.
pub fn lwf_gradient(
    features: &[f64],
    train_logits: &[f64],
    copy_logits: &[f64],
    label: usize,
    lambda: f64,
    temperature: f64,
) -> Result<HeadGradient, ClError> {
    if train_logits.len() != copy_logits.len() {
        return Err(ClError::Dimension("training and copy heads disagree on N".into()));
    }
    let p = softmax(train_logits);
    let mut db = ce_gradient(&[], &p, label)?.db;
    if lambda != 0.0 {
        let (pt, qt) = if temperature == 1.0 {
            (p, softmax(copy_logits))
        } else {
            let scaled = |z: &[f64]| softmax(&z.iter().map(|v| v / temperature).collect::<Vec<_>>());
            (scaled(train_logits), scaled(copy_logits))
        };
        let k = lambda / temperature;
        for ((d, a), b) in db.iter_mut().zip(&pt).zip(&qt) {
            *d += k * (a - b);
        }
    }
    Ok(HeadGradient::outer(features, db))
}

/// Combined LwF loss in nats for the given logits.
pub fn lwf_loss(train_logits: &[f64], copy_logits: &[f64], label: usize, lambda: f64, temperature: f64) -> f64 {
    let p = softmax(train_logits);
    let mut loss = cross_entropy(&p, label);
    if lambda != 0.0 {
        let scaled = |z: &[f64]| softmax(&z.iter().map(|v| v / temperature).collect::<Vec<_>>());
        let (pt, qt) = (scaled(train_logits), scaled(copy_logits));
        loss -= lambda * qt.iter().zip(&pt).map(|(q, p)| q * p.ln()).sum::<f64>();
    }
    loss
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CwrReinit {
    Zeros,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lwf_lambda: f64,
    pub lwf_temperature: f64,
    pub cwr_reinit: CwrReinit,
    /// Consolidation count credited to each pre-trained class before the stream starts.
    pub cwr_prior_count: u64,
    /// Number of classes the extractor was pre-trained on (the first columns of the head).
    pub initial_class_count: usize,
}

impl Default for ClConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            lwf_lambda: 1.0,
            lwf_temperature: 1.0,
            cwr_reinit: CwrReinit::Zeros,
            cwr_prior_count: 0,
            initial_class_count: 12,
        }
    }
}

impl ClConfig {
    pub fn validate(&self) -> Result<(), ClError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ClError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(ClError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lwf_lambda >= 0.0 && self.lwf_lambda.is_finite()) {
            return Err(ClError::InvalidConfig("lwf_lambda must be >= 0".into()));
        }
        if !(self.lwf_temperature > 0.0 && self.lwf_temperature.is_finite()) {
            return Err(ClError::InvalidConfig("lwf_temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Which head answers a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Training head, as used while the stream is running.
    Stream,
    /// Head used for final evaluation; the consolidated head for CWR.
    Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Prediction of the training head before the update.
    pub predicted: usize,
    /// Training loss before the update, in nats.
    pub loss: f64,
    /// A batch boundary was processed by this step.
    pub boundary: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct BatchAccumulator {
    gradient: HeadGradient,
    samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consolidated {
    pub head: ClHead,
    /// Consolidations that have touched each class.
    pub counts: Vec<u64>,
}

/// Learning state for one algorithm over one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ClState {
    algorithm: Algorithm,
    config: ClConfig,
    head: ClHead,
    copy_head: Option<ClHead>,
    consolidated: Option<Consolidated>,
    accumulator: Option<BatchAccumulator>,
    batch_samples: usize,
    batch_classes: Vec<bool>,
    batches_completed: u64,
    per_class_seen: Vec<u64>,
}

impl ClState {
    /// `head` is the pre-trained head already expanded to every class in the stream.
    pub fn new(algorithm: Algorithm, head: ClHead, config: ClConfig) -> Result<Self, ClError> {
        config.validate()?;
        if config.initial_class_count > head.num_classes() {
            return Err(ClError::InvalidConfig(format!(
                "initial_class_count {} exceeds head size {}",
                config.initial_class_count,
                head.num_classes()
            )));
        }
        let n = head.num_classes();
        let copy_head = algorithm.is_lwf().then(|| head.clone());
        let consolidated = (algorithm == Algorithm::Cwr).then(|| Consolidated {
            head: head.clone(),
            counts: (0..n)
                .map(|j| if j < config.initial_class_count { config.cwr_prior_count } else { 0 })
                .collect(),
        });
        let accumulator = algorithm.accumulates().then(|| BatchAccumulator {
            gradient: HeadGradient::zeros(head.feature_dim(), n),
            samples: 0,
        });
        Ok(Self {
            algorithm,
            config,
            head,
            copy_head,
            consolidated,
            accumulator,
            batch_samples: 0,
            batch_classes: vec![false; n],
            batches_completed: 0,
            per_class_seen: vec![0; n],
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn config(&self) -> &ClConfig {
        &self.config
    }

    pub fn head(&self) -> &ClHead {
        &self.head
    }

    pub fn copy_head(&self) -> Option<&ClHead> {
        self.copy_head.as_ref()
    }

    pub fn consolidated(&self) -> Option<&Consolidated> {
        self.consolidated.as_ref()
    }

    pub fn batches_completed(&self) -> u64 {
        self.batches_completed
    }

    pub fn per_class_seen(&self) -> &[u64] {
        &self.per_class_seen
    }

    /// Samples consumed since the last batch boundary.
    pub fn pending_samples(&self) -> usize {
        self.batch_samples
    }

    pub fn evaluation_head(&self) -> &ClHead {
        match &self.consolidated {
            Some(c) => &c.head,
            None => &self.head,
        }
    }

    pub fn predict(&self, features: &[f64], mode: PredictMode) -> Result<usize, ClError> {
        match mode {
            PredictMode::Stream => self.head.predict(features),
            PredictMode::Evaluation => self.evaluation_head().predict(features),
        }
    }

    /// Consumes one labelled sample.
    pub fn step(&mut self, features: &[f64], label: usize) -> Result<StepOutcome, ClError> {
        let n = self.head.num_classes();
        if label >= n {
            return Err(ClError::LabelOutOfRange { label, classes: n });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(ClError::NonFinite("feature vector"));
        }
        let logits = self.head.forward(features)?;
        let predicted = argmax(&logits);
        let lr = self.config.learning_rate;
        let frozen = if self.algorithm.freezes_initial_classes() {
            self.config.initial_class_count
        } else {
            0
        };

        let loss = if let Some(copy) = &self.copy_head {
            let copy_logits = copy.forward(features)?;
            let (lambda, temp) = (self.config.lwf_lambda, self.config.lwf_temperature);
            let grad = lwf_gradient(features, &logits, &copy_logits, label, lambda, temp)?;
            self.head.apply(&grad, lr, 0);
            lwf_loss(&logits, &copy_logits, label, lambda, temp)
        } else {
            let p = softmax(&logits);
            let grad = ce_gradient(features, &p, label)?;
            match &mut self.accumulator {
                Some(acc) => {
                    acc.gradient.add_assign(&grad);
                    acc.samples += 1;
                }
                None => self.head.apply(&grad, lr, frozen),
            }
            cross_entropy(&p, label)
        };

        self.per_class_seen[label] += 1;
        let mut boundary = false;
        if self.algorithm.uses_batches() {
            self.batch_classes[label] = true;
            self.batch_samples += 1;
            boundary = self.batch_samples == self.config.batch_size;
        }
        if boundary {
            self.close_batch();
        }
        if !self.head.is_finite() {
            return Err(ClError::NonFinite("training head after update"));
        }
        Ok(StepOutcome {
            predicted,
            loss,
            boundary,
        })
    }

    /// Flushes a trailing partial batch as a smaller batch. Returns whether anything was flushed.
    pub fn finish(&mut self) -> Result<bool, ClError> {
        if !self.algorithm.uses_batches() || self.batch_samples == 0 {
            return Ok(false);
        }
        self.close_batch();
        if !self.head.is_finite() {
            return Err(ClError::NonFinite("training head after final flush"));
        }
        Ok(true)
    }

    fn close_batch(&mut self) {
        let lr = self.config.learning_rate;
        let frozen = if self.algorithm.freezes_initial_classes() {
            self.config.initial_class_count
        } else {
            0
        };
        if let Some(acc) = &mut self.accumulator {
            if acc.samples > 0 {
                acc.gradient.scale(1.0 / acc.samples as f64);
                self.head.apply(&acc.gradient, lr, frozen);
            }
            acc.gradient.clear();
            acc.samples = 0;
        }
        if self.algorithm == Algorithm::LwfBatches {
            self.copy_head = Some(self.head.clone());
        }
        if let Some(cons) = &mut self.consolidated {
            let n = self.head.num_classes();
            for j in (0..n).filter(|&j| self.batch_classes[j]) {
                let k = cons.counts[j] as f64;
                for i in 0..self.head.feature_dim() {
                    let idx = i * n + j;
                    cons.head.weights[idx] = (cons.head.weights[idx] * k + self.head.weights[idx]) / (k + 1.0);
                }
                cons.head.bias[j] = (cons.head.bias[j] * k + self.head.bias[j]) / (k + 1.0);
                cons.counts[j] += 1;
            }
            if self.config.cwr_reinit == CwrReinit::Zeros {
                self.head.column_reset();
            }
        }
        self.batch_classes.iter_mut().for_each(|b| *b = false);
        self.batch_samples = 0;
        self.batches_completed += 1;
    }

    /// Little-endian checkpoint. Only allowed between batches.
    ///
    /// Layout: magic `CLHD0001`, algorithm u8, M u32, N u32, M_old u32,
    /// batches_completed u64, per_class_seen u64×N, then the training head,
    /// copy head (LwF) and consolidated head (CWR) as f64 `W` then `b`, the
    /// CWR consolidation counts u64×N, and finally the N class labels as
    /// u32-length-prefixed UTF-8.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<(), ClError> {
        if self.batch_samples != 0 {
            return Err(ClError::PendingBatch(self.batch_samples));
        }
        let n = self.head.num_classes();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[self.algorithm.tag()])?;
        w.write_all(&(self.head.feature_dim() as u32).to_le_bytes())?;
        w.write_all(&(n as u32).to_le_bytes())?;
        w.write_all(&(self.config.initial_class_count as u32).to_le_bytes())?;
        w.write_all(&self.batches_completed.to_le_bytes())?;
        for c in &self.per_class_seen {
            w.write_all(&c.to_le_bytes())?;
        }
        let write_head = |w: &mut dyn Write, h: &ClHead| -> std::io::Result<()> {
            for v in h.weights.iter().chain(&h.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        write_head(&mut w, &self.head)?;
        if let Some(copy) = &self.copy_head {
            write_head(&mut w, copy)?;
        }
        if let Some(cons) = &self.consolidated {
            write_head(&mut w, &cons.head)?;
            for c in &cons.counts {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        for label in self.head.class_labels() {
            w.write_all(&(label.len() as u32).to_le_bytes())?;
            w.write_all(label.as_bytes())?;
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>, ClError> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out)?;
        Ok(out)
    }

    /// Restores a checkpoint; hyper-parameters other than `M_old` come from `config`.
    pub fn read_checkpoint(bytes: &[u8], mut config: ClConfig) -> Result<Self, ClError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(ClError::BadCheckpoint("bad magic".into()));
        }
        let tag = r.take(1)?[0];
        let algorithm = Algorithm::from_tag(tag)
            .ok_or_else(|| ClError::BadCheckpoint(format!("unknown algorithm tag {tag}")))?;
        let m = r.u32()? as usize;
        let n = r.u32()? as usize;
        config.initial_class_count = r.u32()? as usize;
        let batches_completed = r.u64()?;
        let per_class_seen = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let read_params = |r: &mut Cursor| -> Result<(Vec<f64>, Vec<f64>), ClError> {
            let w = (0..m * n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            let b = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            Ok((w, b))
        };
        let head_params = read_params(&mut r)?;
        let copy_params = if algorithm.is_lwf() {
            Some(read_params(&mut r)?)
        } else {
            None
        };
        let cons_params = if algorithm == Algorithm::Cwr {
            let p = read_params(&mut r)?;
            let counts = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
            Some((p, counts))
        } else {
            None
        };
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            labels.push(
                String::from_utf8(raw.to_vec())
                    .map_err(|_| ClError::BadCheckpoint("class label is not UTF-8".into()))?,
            );
        }
        if r.pos != bytes.len() {
            return Err(ClError::BadCheckpoint("trailing bytes".into()));
        }
        let head = ClHead::from_parts(m, head_params.0, head_params.1, labels.clone())?;
        let mut state = ClState::new(algorithm, head, config)?;
        if let Some((w, b)) = copy_params {
            state.copy_head = Some(ClHead::from_parts(m, w, b, labels.clone())?);
        }
        if let Some(((w, b), counts)) = cons_params {
            state.consolidated = Some(Consolidated {
                head: ClHead::from_parts(m, w, b, labels)?,
                counts,
            });
        }
        state.batches_completed = batches_completed;
        state.per_class_seen = per_class_seen;
        Ok(state)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ClError> {
        let s = self
            .pos
            .checked_add(n)
            .and_then(|end| self.bytes.get(self.pos..end))
            .ok_or_else(|| ClError::BadCheckpoint("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ClError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ClError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ClError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
