//! Open-world compositional zero-shot recognition.
//!
//! Two independent classifiers predict a state distribution and an object
//! distribution from a precomputed feature vector. Their outer product scores
//! every state-object composition; an optional accuracy-ratio exponent on the
//! state side shifts trust toward the stronger classifier, and a feasibility
//! mask removes implausible compositions before the argmax.

pub mod classifiers;
pub mod composition;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod feasibility;
pub mod numerics;
pub mod training;

pub use classifiers::{ClassifierKind, ClassifierModel, FeatureVector};
pub use composition::{CompositionScoreMatrix, WeightExponent};
pub use data::{Composition, Dataset, Vocabulary};
pub use error::{Error, Result};
pub use evaluation::{evaluate_open_world, BiasGrid, EvalReport, Variant};
pub use feasibility::{EmbeddingTable, FeasibilityMask};
pub use numerics::{Matrix, ProbabilityVector};
pub use training::{train, PrimitiveAccuracy, TrainConfig};
