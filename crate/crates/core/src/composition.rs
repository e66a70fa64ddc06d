//! Joint state-object scoring.
//!
//! The composition score of `(s, o)` is `p_sta[s] · p_obj[o]`. The weighted
//! form first raises every state probability to `alpha = A_sta / A_obj`; with
//! `alpha < 1` the state distribution flattens while keeping its order, so the
//! object classifier dominates the joint score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feasibility::FeasibilityMask;
use crate::numerics::ProbabilityVector;

/// Exponent applied to state probabilities before composing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightExponent(f64);

impl WeightExponent {
    pub const ONE: WeightExponent = WeightExponent(1.0);

    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::input(format!("weight exponent {alpha} must be positive")));
        }
        Ok(Self(alpha))
    }

    /// `a_sta / a_obj`; both accuracies must be strictly positive.
    pub fn from_accuracies(a_sta: f64, a_obj: f64) -> Result<Self> {
        if !(a_sta.is_finite() && a_sta > 0.0 && a_obj.is_finite() && a_obj > 0.0) {
            return Err(Error::input(format!(
                "accuracies must be positive to weight (a_sta = {a_sta}, a_obj = {a_obj})"
            )));
        }
        Self::new(a_sta / a_obj)
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// `p^alpha` entrywise, `0^alpha = 0`. Not renormalised.
    pub fn apply(self, probs: &[f64]) -> Vec<f64> {
        if self.0 == 1.0 {
            return probs.to_vec();
        }
        probs
            .iter()
            .map(|&p| if p == 0.0 { 0.0 } else { p.powf(self.0) })
            .collect()
    }
}

/// `|states| x |objects|` scores, row-major by state. Masked cells hold
/// `f64::NEG_INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionScoreMatrix {
    n_states: usize,
    n_objects: usize,
    scores: Vec<f64>,
    weighted: bool,
}

impl CompositionScoreMatrix {
    /// Build from explicit scores; entries must be non-negative or `-inf`.
    pub fn from_scores(
        n_states: usize,
        n_objects: usize,
        scores: Vec<f64>,
        weighted: bool,
    ) -> Result<Self> {
        if n_states == 0 || n_objects == 0 {
            return Err(Error::input("score matrix must be non-empty"));
        }
        if scores.len() != n_states * n_objects {
            return Err(Error::input(format!(
                "{} scores for a {n_states}x{n_objects} grid",
                scores.len()
            )));
        }
        if scores
            .iter()
            .any(|s| s.is_nan() || *s == f64::INFINITY || (*s < 0.0 && *s != f64::NEG_INFINITY))
        {
            return Err(Error::input("scores must be non-negative or masked"));
        }
        Ok(Self {
            n_states,
            n_objects,
            scores,
            weighted,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn is_weighted(&self) -> bool {
        self.weighted
    }

    #[inline]
    pub fn get(&self, state: usize, object: usize) -> f64 {
        self.scores[state * self.n_objects + object]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_feasible(&self, state: usize, object: usize) -> bool {
        self.get(state, object) != f64::NEG_INFINITY
    }

    /// Sum over feasible cells.
    pub fn total(&self) -> f64 {
        self.scores.iter().filter(|s| s.is_finite()).sum()
    }
}

fn outer(states: &[f64], objects: &[f64], weighted: bool) -> Result<CompositionScoreMatrix> {
    if states.is_empty() || objects.is_empty() {
        return Err(Error::input("cannot compose an empty probability vector"));
    }
    let mut scores = Vec::with_capacity(states.len() * objects.len());
    for &s in states {
        scores.extend(objects.iter().map(|&o| s * o));
    }
    Ok(CompositionScoreMatrix {
        n_states: states.len(),
        n_objects: objects.len(),
        scores,
        weighted,
    })
}

/// Outer product `scores[s][o] = p_sta[s] · p_obj[o]`.
pub fn compose(
    p_sta: &ProbabilityVector,
    p_obj: &ProbabilityVector,
) -> Result<CompositionScoreMatrix> {
    outer(p_sta.as_slice(), p_obj.as_slice(), false)
}

/// `p_sta[i]^(a_sta / a_obj)` for every entry.
pub fn weight_state_probs(p_sta: &ProbabilityVector, a_sta: f64, a_obj: f64) -> Result<Vec<f64>> {
    let alpha = WeightExponent::from_accuracies(a_sta, a_obj)?;
    Ok(alpha.apply(p_sta.as_slice()))
}

pub fn compose_weighted(
    p_sta: &ProbabilityVector,
    p_obj: &ProbabilityVector,
    a_sta: f64,
    a_obj: f64,
) -> Result<CompositionScoreMatrix> {
    let alpha = WeightExponent::from_accuracies(a_sta, a_obj)?;
    compose_with_exponent(p_sta, p_obj, alpha)
}

/// Weighted composition from an already-validated exponent.
pub fn compose_with_exponent(
    p_sta: &ProbabilityVector,
    p_obj: &ProbabilityVector,
    alpha: WeightExponent,
) -> Result<CompositionScoreMatrix> {
    outer(&alpha.apply(p_sta.as_slice()), p_obj.as_slice(), true)
}

/// Replace every infeasible cell by `-inf`. Feasible cells keep their scores.
pub fn apply_mask(
    s: &CompositionScoreMatrix,
    mask: &FeasibilityMask,
) -> Result<CompositionScoreMatrix> {
    if (mask.n_states(), mask.n_objects()) != (s.n_states, s.n_objects) {
        return Err(Error::input(format!(
            "mask is {}x{}, scores are {}x{}",
            mask.n_states(),
            mask.n_objects(),
            s.n_states,
            s.n_objects
        )));
    }
    let mut out = s.clone();
    for (i, score) in out.scores.iter_mut().enumerate() {
        if !mask.is_feasible(i / s.n_objects, i % s.n_objects) {
            *score = f64::NEG_INFINITY;
        }
    }
    Ok(out)
}

/// Highest-scoring feasible cell as `(state, object)`. Ties go to the lowest
/// state index, then the lowest object index.
pub fn predict_composition(s: &CompositionScoreMatrix) -> Result<(usize, usize)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &score) in s.scores.iter().enumerate() {
        if score == f64::NEG_INFINITY {
            continue;
        }
        match best {
            Some((_, b)) if score <= b => {}
            _ => best = Some((i, score)),
        }
    }
    best.map(|(i, _)| (i / s.n_objects, i % s.n_objects))
        .ok_or_else(|| Error::Prediction("every composition is masked".into()))
}
