//! Training the two primitive classifiers.
//!
//! The state tower and the object tower share the input features but no
//! parameters. Each is trained on its own labels with mean softmax
//! cross-entropy. A stratified validation split carved from the training
//! samples supplies the accuracies `A_sta` and `A_obj` used by the weighted
//! composition.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::checkpoint::{load_checkpoint, parameter_checksum, save_checkpoint};
use crate::classifiers::{
    check_dropout, token_dim, Architecture, AttentionClassifier, ClassifierKind, ClassifierModel,
    MlpClassifier, Mode, DEFAULT_PATCH_COUNT,
};
use crate::data::{Composition, Dataset, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix};

const STATE_STREAM: u64 = 1;
const OBJECT_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub classifier: ClassifierKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub validation_fraction: f64,
    pub patch_count: usize,
    pub dropout: f64,
    /// MLP hidden width; `None` means twice the feature dimension.
    pub hidden_size: Option<usize>,
    /// Divide attention logits by `sqrt(d_t)`.
    pub attention_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierKind::Mlp,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            seed: 0,
            validation_fraction: 0.1,
            patch_count: DEFAULT_PATCH_COUNT,
            dropout: 0.1,
            hidden_size: None,
            attention_scale: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patch_count == 0 {
            return Err(Error::input("epochs, batch_size and patch_count must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::input(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(Error::input(format!(
                "validation fraction {} outside (0, 0.5]",
                self.validation_fraction
            )));
        }
        if self.hidden_size == Some(0) {
            return Err(Error::input("hidden size must be positive"));
        }
        check_dropout(self.dropout)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::input(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    fn build(&self, rng: &mut ChaCha8Rng, dim: usize, classes: usize) -> Result<Architecture> {
        match self.classifier {
            ClassifierKind::Mlp => {
                let hidden = self.hidden_size.unwrap_or(2 * dim);
                Ok(Architecture::Mlp(MlpClassifier::new(
                    rng,
                    dim,
                    hidden,
                    classes,
                    self.dropout,
                )?))
            }
            ClassifierKind::Attention => {
                token_dim(dim, self.patch_count)?;
                Ok(Architecture::Attention(AttentionClassifier::new(
                    rng,
                    dim,
                    self.patch_count,
                    classes,
                    self.attention_scale,
                )?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasuredOn {
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveAccuracy {
    pub a_sta: f64,
    pub a_obj: f64,
    pub measured_on: MeasuredOn,
}

impl PrimitiveAccuracy {
    /// Weighting needs both accuracies strictly positive.
    pub fn supports_weighting(&self) -> bool {
        self.a_sta > 0.0 && self.a_obj > 0.0
    }
}

/// Fraction of `samples` whose state (object) argmax matches the label.
pub fn compute_primitive_accuracy<'a>(
    model_sta: &ClassifierModel,
    model_obj: &ClassifierModel,
    samples: impl IntoIterator<Item = &'a SampleRecord>,
    measured_on: MeasuredOn,
) -> Result<PrimitiveAccuracy> {
    let samples: Vec<&SampleRecord> = samples.into_iter().collect();
    if samples.is_empty() {
        return Err(Error::input("cannot measure accuracy on zero samples"));
    }
    let dim = model_sta.feature_dim();
    let mut data = Vec::with_capacity(samples.len() * dim);
    for s in &samples {
        data.extend_from_slice(s.features.as_slice());
    }
    let x = Matrix::from_vec(samples.len(), dim, data)?;
    let hits = |model: &ClassifierModel, label: fn(&SampleRecord) -> usize| -> Result<usize> {
        let logits = model.architecture.logits(&x, Mode::Inference)?;
        Ok(samples
            .iter()
            .enumerate()
            .filter(|(i, s)| argmax(logits.row(*i)) == Some(label(s)))
            .count())
    };
    let n = samples.len() as f64;
    Ok(PrimitiveAccuracy {
        a_sta: hits(model_sta, |s| s.state)? as f64 / n,
        a_obj: hits(model_obj, |s| s.object)? as f64 / n,
        measured_on,
    })
}

/// Indices into `ds.samples` for the fitting and validation parts of the
/// training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationSplit {
    pub fit: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Stratified by composition: each training composition with `n` samples
/// gives `round(n · fraction)` of them to validation, capped at `n - 1`.
/// If that yields nothing, one sample of the largest composition is moved.
pub fn split_validation(ds: &Dataset, fraction: f64, seed: u64) -> Result<ValidationSplit> {
    let mut by_comp: BTreeMap<Composition, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        if s.split == Split::Train {
            by_comp.entry(s.composition()).or_default().push(i);
        }
    }
    if by_comp.is_empty() {
        return Err(Error::input("dataset has no training samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let mut fit = Vec::new();
    let mut validation = Vec::new();
    let mut largest: Option<(usize, usize)> = None;
    for members in by_comp.values_mut() {
        members.shuffle(&mut rng);
        let n = members.len();
        let k = ((n as f64 * fraction).round() as usize).min(n - 1);
        validation.extend_from_slice(&members[..k]);
        if largest.is_none_or(|(_, m)| n - k > m) {
            largest = Some((fit.len(), n - k));
        }
        fit.extend_from_slice(&members[k..]);
    }
    if validation.is_empty() {
        match largest {
            Some((at, m)) if m >= 2 => validation.push(fit.remove(at)),
            _ => {
                return Err(Error::input(
                    "too few training samples to carve out a validation split",
                ))
            }
        }
    }
    fit.sort_unstable();
    validation.sort_unstable();
    Ok(ValidationSplit { fit, validation })
}

enum OptimizerState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl OptimizerState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPSILON: f64 = 1e-8;

    fn new(kind: Optimizer, n: usize) -> Self {
        match kind {
            Optimizer::Sgd => OptimizerState::Sgd,
            Optimizer::Adam => OptimizerState::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            OptimizerState::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerState::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - Self::BETA1.powi(*t);
                let c2 = 1.0 - Self::BETA2.powi(*t);
                for i in 0..params.len() {
                    m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * grad[i];
                    v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPSILON);
                }
            }
        }
    }
}

/// Mean training loss per epoch for each tower.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub state: Vec<f64>,
    pub object: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state_model: ClassifierModel,
    pub object_model: ClassifierModel,
    pub accuracy: PrimitiveAccuracy,
    pub history: LossHistory,
    pub split: ValidationSplit,
}

/// Fit one tower on `samples` (all of which must be training samples).
/// Returns the architecture and the mean loss of every epoch.
pub fn train_tower(
    cfg: &TrainConfig,
    samples: &[&SampleRecord],
    label: fn(&SampleRecord) -> usize,
    classes: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Architecture, Vec<f64>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::input("no samples to train on"));
    }
    assert!(
        samples.iter().all(|s| s.split == Split::Train),
        "training was handed a test-split sample"
    );
    let mut arch = cfg.build(rng, dim, classes)?;
    let mut params = arch.parameters();
    let mut opt = OptimizerState::new(cfg.optimizer, params.len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size * dim);
    let mut labels = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            labels.clear();
            for &i in chunk {
                batch.extend_from_slice(samples[i].features.as_slice());
                labels.push(label(samples[i]));
            }
            let x = Matrix::from_vec(chunk.len(), dim, batch.clone())?;
            let (loss, grad) = arch.loss_and_gradient(&x, &labels, Mode::Training(rng))?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("loss diverged in epoch {}", epoch + 1)));
            }
            total += loss * chunk.len() as f64;
            opt.step(&mut params, &grad, cfg.learning_rate);
            arch.set_parameters(&params).map_err(|_| {
                Error::numeric(format!("parameters diverged in epoch {}", epoch + 1))
            })?;
        }
        let mean = total / samples.len() as f64;
        log::debug!("{} epoch {}: loss {mean:.6}", cfg.classifier, epoch + 1);
        history.push(mean);
    }
    Ok((arch, history))
}

/// Train both towers on the training split and measure validation
/// accuracies. The towers draw from separate generator streams of
/// `cfg.seed` and run on two threads; results do not depend on scheduling.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = split_validation(ds, cfg.validation_fraction, cfg.seed)?;
    let fit: Vec<&SampleRecord> = split.fit.iter().map(|&i| &ds.samples[i]).collect();
    let tower = |stream: u64, label: fn(&SampleRecord) -> usize, classes: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        train_tower(cfg, &fit, label, classes, ds.dim, &mut rng)
    };
    let (state, object) = std::thread::scope(|scope| {
        let handle = scope.spawn(|| tower(STATE_STREAM, |s| s.state, ds.vocab.n_states()));
        let object = tower(OBJECT_STREAM, |s| s.object, ds.vocab.n_objects());
        (handle.join().expect("state tower panicked"), object)
    });
    let (state_arch, state_loss) = state?;
    let (object_arch, object_loss) = object?;

    let fingerprint = ds.fingerprint();
    let state_model =
        ClassifierModel::new(state_arch, ds.vocab.states.clone(), cfg.seed, fingerprint.clone())?;
    let object_model =
        ClassifierModel::new(object_arch, ds.vocab.objects.clone(), cfg.seed, fingerprint)?;
    let accuracy = compute_primitive_accuracy(
        &state_model,
        &object_model,
        split.validation.iter().map(|&i| &ds.samples[i]),
        MeasuredOn::Validation,
    )?;
    log::info!(
        "{}: validation a_sta = {:.4}, a_obj = {:.4}",
        cfg.classifier,
        accuracy.a_sta,
        accuracy.a_obj
    );
    Ok(TrainOutcome {
        state_model,
        object_model,
        accuracy,
        history: LossHistory {
            state: state_loss,
            object: object_loss,
        },
        split,
    })
}

/// Contents of `summary.json` next to a pair of checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub classifier: ClassifierKind,
    pub a_sta: f64,
    pub a_obj: f64,
    pub measured_on: MeasuredOn,
    pub config: TrainConfig,
    pub dataset_fingerprint: String,
    pub state_sha256: String,
    pub object_sha256: String,
    pub validation_samples: usize,
    pub loss_history: LossHistory,
}

impl TrainSummary {
    pub fn accuracy(&self) -> PrimitiveAccuracy {
        PrimitiveAccuracy {
            a_sta: self.a_sta,
            a_obj: self.a_obj,
            measured_on: self.measured_on,
        }
    }
}

pub const STATE_CHECKPOINT: &str = "state.json";
pub const OBJECT_CHECKPOINT: &str = "object.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Write both checkpoints and `summary.json` into `dir`.
pub fn save_outcome(outcome: &TrainOutcome, cfg: &TrainConfig, dir: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&outcome.state_model, &dir.join(STATE_CHECKPOINT))?;
    save_checkpoint(&outcome.object_model, &dir.join(OBJECT_CHECKPOINT))?;
    let summary = TrainSummary {
        classifier: cfg.classifier,
        a_sta: outcome.accuracy.a_sta,
        a_obj: outcome.accuracy.a_obj,
        measured_on: outcome.accuracy.measured_on,
        config: cfg.clone(),
        dataset_fingerprint: outcome.state_model.dataset_fingerprint.clone(),
        state_sha256: parameter_checksum(&outcome.state_model),
        object_sha256: parameter_checksum(&outcome.object_model),
        validation_samples: outcome.split.validation.len(),
        loss_history: outcome.history.clone(),
    };
    let path = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// A trained pair as read back from disk.
#[derive(Debug, Clone)]
pub struct TrainedPair {
    pub state_model: ClassifierModel,
    pub object_model: ClassifierModel,
    pub summary: TrainSummary,
}

pub fn load_trained(dir: &Path) -> Result<TrainedPair> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let summary: TrainSummary =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(TrainedPair {
        state_model: load_checkpoint(&dir.join(STATE_CHECKPOINT))?,
        object_model: load_checkpoint(&dir.join(OBJECT_CHECKPOINT))?,
        summary,
    })
}
