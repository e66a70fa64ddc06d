use rand::Rng;

use super::linear::{glorot_matrix, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// Self-attention head over a feature vector split into `patch_count`
/// contiguous tokens.
///
/// ```text
/// g      = pre_linear(f)                      d
/// tokens = g as P x d_t
/// A      = softmax_rows(Q Kᵀ / sqrt(d_t))      P x P
/// W      = A V                                P x d_t
/// logits = head_linear(f + flatten(W))        C
/// ```
///
/// `q`, `k` and `v` are bias-free `d_t x d_t` maps shared by every token.
/// The residual adds the raw input `f`, not the output of `pre_linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionClassifier {
    pub pre_linear: Linear,
    pub q_linear: Matrix,
    pub k_linear: Matrix,
    pub v_linear: Matrix,
    pub head_linear: Linear,
    pub patch_count: usize,
    pub scale_scores: bool,
}

/// Intermediate values of one forward pass, for inspection.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// `P x d_t` tokens after `pre_linear`.
    pub tokens: Matrix,
    /// `P x P` row-stochastic attention scores.
    pub scores: Matrix,
    /// `P x d_t` attention output `A·V`.
    pub mixed: Matrix,
    pub logits: Vec<f64>,
}

pub(crate) fn token_dim(feature_dim: usize, patch_count: usize) -> Result<usize> {
    if patch_count == 0 {
        return Err(Error::input("patch count must be at least 1"));
    }
    if feature_dim == 0 || !feature_dim.is_multiple_of(patch_count) {
        return Err(Error::input(format!(
            "feature dimension {feature_dim} is not divisible by patch count {patch_count}"
        )));
    }
    Ok(feature_dim / patch_count)
}

impl AttentionClassifier {
    pub fn new<R: Rng>(
        rng: &mut R,
        feature_dim: usize,
        patch_count: usize,
        classes: usize,
        scale_scores: bool,
    ) -> Result<Self> {
        let t = token_dim(feature_dim, patch_count)?;
        if classes == 0 {
            return Err(Error::input("class count must be positive"));
        }
        Ok(Self {
            pre_linear: Linear::glorot(rng, feature_dim, feature_dim, true),
            q_linear: glorot_matrix(rng, t, t),
            k_linear: glorot_matrix(rng, t, t),
            v_linear: glorot_matrix(rng, t, t),
            head_linear: Linear::glorot(rng, feature_dim, classes, true),
            patch_count,
            scale_scores,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.pre_linear.in_dim()
    }

    pub fn token_dim(&self) -> usize {
        self.feature_dim() / self.patch_count
    }

    pub fn class_count(&self) -> usize {
        self.head_linear.out_dim()
    }

    pub(crate) fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.pre_linear.tensors().collect();
        out.extend([&self.q_linear, &self.k_linear, &self.v_linear]);
        out.extend(self.head_linear.tensors());
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.pre_linear.tensors_mut().collect();
        out.extend([&mut self.q_linear, &mut self.k_linear, &mut self.v_linear]);
        out.extend(self.head_linear.tensors_mut());
        out
    }

    pub(crate) fn record(&self, tape: &mut Tape, x: Var, params: &mut Vec<Var>) -> Result<Var> {
        self.record_traced(tape, x, params).map(|n| n.logits)
    }

    fn record_traced(&self, tape: &mut Tape, x: Var, params: &mut Vec<Var>) -> Result<TraceNodes> {
        let (batch, d) = tape.value(x).shape();
        let p = self.patch_count;
        let t = token_dim(d, p)?;
        if d != self.feature_dim() {
            return Err(Error::input(format!(
                "feature length {d} does not match model dimension {}",
                self.feature_dim()
            )));
        }

        let g = self.pre_linear.record(tape, x, params)?;
        let tokens = tape.reshape(g, batch * p, t)?;

        let wq = tape.leaf(self.q_linear.clone());
        let wk = tape.leaf(self.k_linear.clone());
        let wv = tape.leaf(self.v_linear.clone());
        params.extend([wq, wk, wv]);
        let q = tape.matmul(tokens, wq)?;
        let k = tape.matmul(tokens, wk)?;
        let v = tape.matmul(tokens, wv)?;

        let mut scores = tape.group_scores(q, k, p)?;
        if self.scale_scores {
            scores = tape.scale(scores, 1.0 / (t as f64).sqrt())?;
        }
        let attn = tape.softmax_rows(scores);
        let mixed = tape.group_mix(attn, v, p)?;
        let flat = tape.reshape(mixed, batch, d)?;
        let residual = tape.add(x, flat)?;
        let logits = self.head_linear.record(tape, residual, params)?;
        Ok(TraceNodes {
            tokens,
            attn,
            mixed,
            logits,
        })
    }

    /// Inference-mode forward pass on one feature vector, keeping intermediates.
    pub fn trace(&self, features: &[f64]) -> Result<AttentionTrace> {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(features)?);
        let nodes = self.record_traced(&mut tape, x, &mut Vec::new())?;
        Ok(AttentionTrace {
            tokens: tape.value(nodes.tokens).clone(),
            scores: tape.value(nodes.attn).clone(),
            mixed: tape.value(nodes.mixed).clone(),
            logits: tape.value(nodes.logits).data().to_vec(),
        })
    }
}

struct TraceNodes {
    tokens: Var,
    attn: Var,
    mixed: Var,
    logits: Var,
}
