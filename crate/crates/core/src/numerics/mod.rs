//! Dense linear algebra, probability primitives and reverse-mode gradients.
//!
//! Everything here works in `f64`. Feature files are stored as `f32`, but the
//! finite-difference checks in [`grad_check`] need the extra precision.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, DEFAULT_GRAD_CHECK_STEP};
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|sum - 1|` accepted for a probability vector.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-6;

/// Lower clamp applied to the true-class probability before taking a log.
pub const CROSS_ENTROPY_EPSILON: f64 = 1e-12;

/// A categorical distribution over a primitive vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::input("probability vector must be non-empty"));
        }
        if let Some(bad) = entries
            .iter()
            .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::input(format!("probability entry {bad} outside [0,1]")));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            return Err(Error::input(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(entries))
    }

    /// Uniform distribution over `n` classes.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::input("probability vector must be non-empty"));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::input(format!("one-hot index {index} out of range {n}")));
        }
        let mut v = vec![0.0; n];
        v[index] = 1.0;
        Ok(Self(v))
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0).expect("probability vector is non-empty")
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(p: ProbabilityVector) -> Self {
        p.0
    }
}

/// First index of the maximum value, `None` for an empty slice.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Numerically stabilised softmax.
pub fn softmax(v: &[f64]) -> Result<ProbabilityVector> {
    if v.is_empty() {
        return Err(Error::input("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("softmax input contains NaN or Inf"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbabilityVector(out))
}

/// `exp(x - max) / sum` over a finite slice, written back into it.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `-ln(max(p[label], ε))`.
pub fn cross_entropy(p: &ProbabilityVector, label: usize) -> Result<f64> {
    let prob = p.as_slice().get(label).ok_or_else(|| {
        Error::input(format!("label {label} out of range for {} classes", p.len()))
    })?;
    Ok(-prob.max(CROSS_ENTROPY_EPSILON).ln())
}
