//! Primitive classifiers: the baseline MLP and the self-attention variant.
//!
//! Both map a feature vector to logits over one primitive vocabulary (states
//! or objects). A [`ClassifierModel`] wraps either architecture together with
//! the class names it predicts.

mod attention;
pub mod checkpoint;
mod linear;
mod mlp;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{AttentionClassifier, AttentionTrace};
pub use linear::Linear;
pub use mlp::MlpClassifier;

use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, ProbabilityVector, Tape, Var};

pub(crate) use attention::token_dim;
pub(crate) use mlp::check_dropout;

/// Default number of tokens the attention classifier splits a feature into.
pub const DEFAULT_PATCH_COUNT: usize = 8;

/// Precomputed image representation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::input("feature vector must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("feature vector contains NaN or Inf"));
        }
        Ok(Self(values))
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Mlp,
    Attention,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Mlp => "mlp",
            ClassifierKind::Attention => "attention",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ClassifierKind::Mlp),
            "attention" => Ok(ClassifierKind::Attention),
            other => Err(Error::input(format!("unknown classifier kind {other:?}"))),
        }
    }
}

/// Whether a forward pass applies dropout. Training mode draws masks from the
/// supplied generator.
pub enum Mode<'a> {
    Inference,
    Training(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Mlp(MlpClassifier),
    Attention(AttentionClassifier),
}

impl Architecture {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Architecture::Mlp(_) => ClassifierKind::Mlp,
            Architecture::Attention(_) => ClassifierKind::Attention,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Architecture::Mlp(m) => m.feature_dim(),
            Architecture::Attention(a) => a.feature_dim(),
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            Architecture::Mlp(m) => m.class_count(),
            Architecture::Attention(a) => a.class_count(),
        }
    }

    fn tensors(&self) -> Vec<&Matrix> {
        match self {
            Architecture::Mlp(m) => m.tensors(),
            Architecture::Attention(a) => a.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Architecture::Mlp(m) => m.tensors_mut(),
            Architecture::Attention(a) => a.tensors_mut(),
        }
    }

    /// Record a batch forward pass. Returns the logits node; `params` receives
    /// one leaf per parameter tensor in checkpoint order.
    fn record(&self, tape: &mut Tape, x: Var, mode: Mode<'_>, params: &mut Vec<Var>) -> Result<Var> {
        let d = tape.value(x).cols();
        if d != self.feature_dim() {
            return Err(Error::input(format!(
                "feature length {d} does not match model dimension {}",
                self.feature_dim()
            )));
        }
        match (self, mode) {
            (Architecture::Mlp(m), Mode::Training(rng)) => m.record(tape, x, Some(rng), params),
            (Architecture::Mlp(m), Mode::Inference) => {
                m.record::<ChaCha8Rng>(tape, x, None, params)
            }
            (Architecture::Attention(a), _) => a.record(tape, x, params),
        }
    }

    /// Logits for every row of a `batch x d` feature matrix.
    pub fn logits(&self, features: &Matrix, mode: Mode<'_>) -> Result<Matrix> {
        let mut tape = Tape::new();
        let x = tape.leaf(features.clone());
        let out = self.record(&mut tape, x, mode, &mut Vec::new())?;
        Ok(tape.value(out).clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    /// All parameters flattened in checkpoint order.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        if flat.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric("parameters contain NaN or Inf"));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Mean softmax cross-entropy over a batch and its gradient with respect
    /// to the flattened parameters.
    pub fn loss_and_gradient(
        &self,
        features: &Matrix,
        labels: &[usize],
        mode: Mode<'_>,
    ) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(features.clone());
        let mut params = Vec::new();
        let logits = self.record(&mut tape, x, mode, &mut params)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?;
        let mut flat = Vec::with_capacity(self.parameter_count());
        for p in params {
            match grads.get(p) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, tape.value(p).data().len())),
            }
        }
        Ok((tape.value(loss).get(0, 0), flat))
    }
}

fn single_row(model_dim: usize, f: &FeatureVector) -> Result<Matrix> {
    if f.len() != model_dim {
        return Err(Error::input(format!(
            "feature length {} does not match model dimension {model_dim}",
            f.len()
        )));
    }
    Matrix::row_vector(f.as_slice())
}

/// Logits of the MLP for one feature vector.
pub fn forward_mlp(model: &MlpClassifier, f: &FeatureVector, mode: Mode<'_>) -> Result<Vec<f64>> {
    let x = single_row(model.feature_dim(), f)?;
    let mut tape = Tape::new();
    let x = tape.leaf(x);
    let out = match mode {
        Mode::Training(rng) => model.record(&mut tape, x, Some(rng), &mut Vec::new())?,
        Mode::Inference => model.record::<ChaCha8Rng>(&mut tape, x, None, &mut Vec::new())?,
    };
    Ok(tape.value(out).data().to_vec())
}

/// Logits of the attention classifier for one feature vector. The attention
/// head has no dropout, so both modes compute the same function.
pub fn forward_attention(
    model: &AttentionClassifier,
    f: &FeatureVector,
    _mode: Mode<'_>,
) -> Result<Vec<f64>> {
    token_dim(f.len(), model.patch_count)?;
    let x = single_row(model.feature_dim(), f)?;
    let mut tape = Tape::new();
    let x = tape.leaf(x);
    let out = model.record(&mut tape, x, &mut Vec::new())?;
    Ok(tape.value(out).data().to_vec())
}

/// A trained primitive classifier plus the vocabulary it predicts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub architecture: Architecture,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub dataset_fingerprint: String,
}

impl ClassifierModel {
    pub fn new(
        architecture: Architecture,
        class_names: Vec<String>,
        seed: u64,
        dataset_fingerprint: String,
    ) -> Result<Self> {
        if class_names.len() != architecture.class_count() {
            return Err(Error::input(format!(
                "{} class names for a {}-way classifier",
                class_names.len(),
                architecture.class_count()
            )));
        }
        Ok(Self {
            architecture,
            class_names,
            seed,
            dataset_fingerprint,
        })
    }

    pub fn kind(&self) -> ClassifierKind {
        self.architecture.kind()
    }

    pub fn feature_dim(&self) -> usize {
        self.architecture.feature_dim()
    }

    pub fn class_count(&self) -> usize {
        self.architecture.class_count()
    }

    /// Inference-mode class distribution for one feature vector.
    pub fn predict_probs(&self, f: &FeatureVector) -> Result<ProbabilityVector> {
        let x = single_row(self.feature_dim(), f)?;
        let logits = self.architecture.logits(&x, Mode::Inference)?;
        softmax(logits.data())
    }

    /// Inference-mode distributions for every row of a `batch x d` matrix.
    pub fn predict_probs_batch(&self, features: &Matrix) -> Result<Vec<ProbabilityVector>> {
        let logits = self.architecture.logits(features, Mode::Inference)?;
        (0..logits.rows()).map(|r| softmax(logits.row(r))).collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::numerics::argmax;

    fn seeded_mlp(d: usize, h: usize, c: usize) -> MlpClassifier {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        MlpClassifier::new(&mut rng, d, h, c, 0.1).unwrap()
    }

    #[test]
    fn zero_mlp_gives_zero_logits() {
        let m = MlpClassifier::zeros(4, 3, 5);
        let f = FeatureVector::new(vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(forward_mlp(&m, &f, Mode::Inference).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn mlp_inference_is_deterministic() {
        let m = seeded_mlp(6, 12, 3);
        let f = FeatureVector::new(vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let a = forward_mlp(&m, &f, Mode::Inference).unwrap();
        let b = forward_mlp(&m, &f, Mode::Inference).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mlp_matches_hand_forward_pass() {
        // d=4, h=2, C=3 from seed 42, unit input. Recomputed with explicit
        // loops over the stored weights.
        let m = seeded_mlp(4, 2, 3);
        let f = FeatureVector::new(vec![1.0; 4]).unwrap();
        let w1 = &m.input_linear.weight;
        let b1 = m.input_linear.bias.as_ref().unwrap();
        let w2 = &m.output_linear.weight;
        let b2 = m.output_linear.bias.as_ref().unwrap();
        let mut hidden = [0.0f64; 2];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut acc = b1.get(0, j);
            for i in 0..4 {
                acc += w1.get(i, j);
            }
            *h = if acc > 0.0 { acc } else { 0.0 };
        }
        let mut expected = [0.0f64; 3];
        for (c, e) in expected.iter_mut().enumerate() {
            *e = b2.get(0, c) + hidden[0] * w2.get(0, c) + hidden[1] * w2.get(1, c);
        }
        let got = forward_mlp(&m, &f, Mode::Inference).unwrap();
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-9);
        }
    }

    #[test]
    fn mlp_training_mode_applies_dropout() {
        let mut m = seeded_mlp(8, 64, 3);
        m.dropout_rate = 0.5;
        let f = FeatureVector::new(vec![1.0; 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = forward_mlp(&m, &f, Mode::Training(&mut rng)).unwrap();
        let infer = forward_mlp(&m, &f, Mode::Inference).unwrap();
        assert_ne!(train, infer);
    }

    #[test]
    fn mlp_dimension_mismatch() {
        let m = seeded_mlp(4, 2, 3);
        let f = FeatureVector::new(vec![1.0; 5]).unwrap();
        assert!(matches!(forward_mlp(&m, &f, Mode::Inference), Err(Error::Input(_))));
    }

    #[test]
    fn attention_zero_weights_pass_features_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut a = AttentionClassifier::new(&mut rng, 8, 2, 3, true).unwrap();
        a.pre_linear = Linear::zeros(8, 8, true);
        a.q_linear = Matrix::zeros(4, 4);
        a.k_linear = Matrix::zeros(4, 4);
        a.v_linear = Matrix::zeros(4, 4);
        let f = FeatureVector::new((0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let got = forward_attention(&a, &f, Mode::Inference).unwrap();
        let head = Matrix::row_vector(f.as_slice())
            .unwrap()
            .matmul(&a.head_linear.weight)
            .unwrap();
        let expected: Vec<f64> = head
            .data()
            .iter()
            .zip(a.head_linear.bias.as_ref().unwrap().data())
            .map(|(x, b)| x + b)
            .collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn zero_value_weights_isolate_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = AttentionClassifier::new(&mut rng, 16, 4, 5, true).unwrap();
        a.v_linear = Matrix::zeros(4, 4);
        let f = FeatureVector::new((0..16).map(|i| (i as f64).sin()).collect()).unwrap();
        let got = forward_attention(&a, &f, Mode::Inference).unwrap();
        let mut plain = a.head_linear.bias.clone().unwrap();
        let proj = Matrix::row_vector(f.as_slice()).unwrap().matmul(&a.head_linear.weight).unwrap();
        for c in 0..5 {
            plain.set(0, c, plain.get(0, c) + proj.get(0, c)).unwrap();
        }
        assert_eq!(got, plain.data());
    }

    #[test]
    fn single_patch_attention_score_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = AttentionClassifier::new(&mut rng, 6, 1, 2, true).unwrap();
        let trace = a.trace(&[0.3, -0.1, 0.7, 1.2, -0.5, 0.0]).unwrap();
        assert_eq!(trace.scores.data(), &[1.0]);
        let v = trace.tokens.matmul(&a.v_linear).unwrap();
        assert_eq!(trace.mixed, v);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = AttentionClassifier::new(&mut rng, 32, 8, 4, true).unwrap();
        let f: Vec<f64> = (0..32).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let trace = a.trace(&f).unwrap();
        for r in 0..8 {
            let s: f64 = trace.scores.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rejects_indivisible_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            AttentionClassifier::new(&mut rng, 10, 4, 2, true),
            Err(Error::Input(_))
        ));
        let a = AttentionClassifier::new(&mut rng, 8, 4, 2, true).unwrap();
        let f = FeatureVector::new(vec![0.0; 10]).unwrap();
        assert!(forward_attention(&a, &f, Mode::Inference).is_err());
    }

    #[test]
    fn predict_probs_zero_logits_uniform_and_argmax_agrees() {
        let model = ClassifierModel::new(
            Architecture::Mlp(MlpClassifier::zeros(3, 2, 4)),
            (0..4).map(|i| format!("c{i}")).collect(),
            0,
            String::new(),
        )
        .unwrap();
        let p = model.predict_probs(&FeatureVector::new(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(p.as_slice(), &[0.25; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = Architecture::Attention(AttentionClassifier::new(&mut rng, 8, 2, 5, true).unwrap());
        let model = ClassifierModel::new(arch, (0..5).map(|i| i.to_string()).collect(), 4, String::new()).unwrap();
        for k in 0..20 {
            let f: Vec<f64> = (0..8).map(|i| ((i + k) as f64 * 1.3).cos() * 2.0).collect();
            let logits = forward_attention(
                match &model.architecture {
                    Architecture::Attention(a) => a,
                    _ => unreachable!(),
                },
                &FeatureVector::new(f.clone()).unwrap(),
                Mode::Inference,
            )
            .unwrap();
            let p = model.predict_probs(&FeatureVector::new(f).unwrap()).unwrap();
            assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(p.argmax(), argmax(&logits).unwrap());
        }
    }

    #[test]
    fn class_names_must_match() {
        let err = ClassifierModel::new(
            Architecture::Mlp(MlpClassifier::zeros(3, 2, 4)),
            vec!["a".into()],
            0,
            String::new(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn parameters_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut arch = Architecture::Attention(AttentionClassifier::new(&mut rng, 8, 2, 3, false).unwrap());
        let p = arch.parameters();
        assert_eq!(p.len(), 8 * 8 + 8 + 3 * 16 + 8 * 3 + 3);
        let shifted: Vec<f64> = p.iter().map(|x| x + 1.0).collect();
        arch.set_parameters(&shifted).unwrap();
        assert_eq!(arch.parameters(), shifted);
        assert!(arch.set_parameters(&p[1..]).is_err());
    }
}
