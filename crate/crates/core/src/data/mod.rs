//! Datasets of precomputed features labelled with a state and an object.
//!
//! A composition is *seen* when it has training images. Unseen compositions
//! only ever appear in the test split; the open-world label space is the full
//! `states x objects` grid regardless of which compositions occur.

mod io;
mod synthetic;
mod transform;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use io::{
    load_dataset, read_manifest, save_dataset, save_dataset_with_notes, DatasetManifest,
    FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synthetic::{generate_synthetic, open_world_space, synthetic_embeddings, SyntheticConfig};
pub use transform::{
    apply_moving, perturb_moving, reduce_train_compositions, MovingMode, MovingPlan,
};

use crate::classifiers::FeatureVector;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::input(format!("unknown split tag {other:?}"))),
        }
    }
}

/// A `(state, object)` pair by vocabulary index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Composition {
    pub state: usize,
    pub object: usize,
}

impl Composition {
    pub fn new(state: usize, object: usize) -> Self {
        Self { state, object }
    }
}

pub type CompositionSet = BTreeSet<Composition>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub states: Vec<String>,
    pub objects: Vec<String>,
}

impl Vocabulary {
    pub fn new(states: Vec<String>, objects: Vec<String>) -> Result<Self> {
        if states.is_empty() || objects.is_empty() {
            return Err(Error::input("vocabulary needs at least one state and one object"));
        }
        for (what, names) in [("state", &states), ("object", &objects)] {
            let mut seen = HashSet::new();
            for n in names.iter() {
                if n.is_empty() {
                    return Err(Error::input(format!("empty {what} name")));
                }
                if !seen.insert(n) {
                    return Err(Error::input(format!("duplicate {what} name {n:?}")));
                }
            }
        }
        Ok(Self { states, objects })
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }

    /// Every primitive name, states first.
    pub fn primitive_names(&self) -> impl Iterator<Item = &str> {
        self.states.iter().chain(&self.objects).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub features: FeatureVector,
    pub state: usize,
    pub object: usize,
    pub split: Split,
}

impl SampleRecord {
    pub fn composition(&self) -> Composition {
        Composition::new(self.state, self.object)
    }
}

/// Which compositions are seen (have training data) and which are unseen.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen: CompositionSet,
    pub unseen: CompositionSet,
}

/// Composition and image counts in the layout of a dataset-statistics table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_compositions: usize,
    pub train_images: usize,
    pub test_seen_compositions: usize,
    pub test_seen_images: usize,
    pub test_unseen_compositions: usize,
    pub test_unseen_images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub dim: usize,
    pub samples: Vec<SampleRecord>,
    pub split: SplitSpec,
    /// Seed the dataset was generated with, when known.
    pub seed: Option<u64>,
}

impl Dataset {
    /// Assemble and validate.
    pub fn new(
        vocab: Vocabulary,
        dim: usize,
        samples: Vec<SampleRecord>,
        split: SplitSpec,
        seed: Option<u64>,
    ) -> Result<Self> {
        let ds = Self {
            vocab,
            dim,
            samples,
            split,
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Check every structural invariant: label ranges, uniform feature
    /// length, disjoint seen/unseen sets, train samples only on seen
    /// compositions, and every primitive covered by the train split.
    pub fn validate(&self) -> Result<()> {
        let (ns, no) = (self.vocab.n_states(), self.vocab.n_objects());
        if self.dim == 0 {
            return Err(Error::input("feature dimension must be positive"));
        }
        for c in self.split.seen.iter().chain(&self.split.unseen) {
            if c.state >= ns || c.object >= no {
                return Err(Error::input(format!("composition {c:?} outside vocabulary")));
            }
        }
        if let Some(c) = self.split.seen.intersection(&self.split.unseen).next() {
            return Err(Error::input(format!(
                "composition ({}, {}) is both seen and unseen",
                self.vocab.states[c.state], self.vocab.objects[c.object]
            )));
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::input(format!("duplicate sample id {:?}", s.id)));
            }
            if s.state >= ns || s.object >= no {
                return Err(Error::input(format!("sample {} has labels outside the vocabulary", s.id)));
            }
            if s.features.len() != self.dim {
                return Err(Error::input(format!(
                    "sample {} has {} features, dataset dimension is {}",
                    s.id,
                    s.features.len(),
                    self.dim
                )));
            }
            let c = s.composition();
            match s.split {
                Split::Train if !self.split.seen.contains(&c) => {
                    return Err(Error::input(format!(
                        "train sample {} is labelled with non-seen composition ({}, {})",
                        s.id, self.vocab.states[c.state], self.vocab.objects[c.object]
                    )));
                }
                Split::Test
                    if !self.split.seen.contains(&c) && !self.split.unseen.contains(&c) =>
                {
                    return Err(Error::input(format!(
                        "test sample {} has a composition that is neither seen nor unseen",
                        s.id
                    )));
                }
                _ => {}
            }
        }
        let (states, objects) = self.train_coverage();
        if let Some(s) = (0..ns).find(|s| !states.contains(s)) {
            return Err(Error::input(format!(
                "state {:?} has no training sample",
                self.vocab.states[s]
            )));
        }
        if let Some(o) = (0..no).find(|o| !objects.contains(o)) {
            return Err(Error::input(format!(
                "object {:?} has no training sample",
                self.vocab.objects[o]
            )));
        }
        Ok(())
    }

    fn train_coverage(&self) -> (BTreeSet<usize>, BTreeSet<usize>) {
        let mut states = BTreeSet::new();
        let mut objects = BTreeSet::new();
        for s in self.samples.iter().filter(|s| s.split == Split::Train) {
            states.insert(s.state);
            objects.insert(s.object);
        }
        (states, objects)
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Compositions with at least one training sample.
    pub fn train_compositions(&self) -> CompositionSet {
        self.samples_in(Split::Train).map(SampleRecord::composition).collect()
    }

    /// Seen compositions that also have test samples.
    pub fn test_seen_compositions(&self) -> CompositionSet {
        self.samples_in(Split::Test)
            .map(SampleRecord::composition)
            .filter(|c| self.split.seen.contains(c))
            .collect()
    }

    pub fn counts(&self) -> SplitCounts {
        let mut per_comp: BTreeMap<(Split, Composition), usize> = BTreeMap::new();
        for s in &self.samples {
            *per_comp.entry((s.split, s.composition())).or_default() += 1;
        }
        let mut c = SplitCounts::default();
        for ((split, comp), n) in per_comp {
            match split {
                Split::Train => {
                    c.train_compositions += 1;
                    c.train_images += n;
                }
                Split::Test if self.split.seen.contains(&comp) => {
                    c.test_seen_compositions += 1;
                    c.test_seen_images += n;
                }
                Split::Test => {
                    c.test_unseen_compositions += 1;
                    c.test_unseen_images += n;
                }
            }
        }
        c
    }

    /// Stack the features of `samples` into a `len x dim` matrix.
    pub fn feature_matrix<'a>(&self, samples: impl IntoIterator<Item = &'a SampleRecord>) -> Result<Matrix> {
        let mut data = Vec::new();
        let mut rows = 0;
        for s in samples {
            data.extend_from_slice(s.features.as_slice());
            rows += 1;
        }
        Matrix::from_vec(rows, self.dim, data)
    }

    /// SHA-256 over vocabulary, dimension, split sets and every sample with
    /// features at storage (`f32`) precision.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for name in self.vocab.primitive_names() {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        h.update((self.dim as u64).to_le_bytes());
        for (tag, set) in [(b's', &self.split.seen), (b'u', &self.split.unseen)] {
            for c in set {
                h.update([tag]);
                h.update((c.state as u64).to_le_bytes());
                h.update((c.object as u64).to_le_bytes());
            }
        }
        for s in &self.samples {
            h.update(s.id.as_bytes());
            h.update([0u8, s.split as u8]);
            h.update((s.state as u64).to_le_bytes());
            h.update((s.object as u64).to_le_bytes());
            for v in s.features.as_slice() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Round to the nearest `f32`, the precision features are stored at.
pub(crate) fn storage_round(v: f64) -> f64 {
    v as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> Dataset {
        let vocab = Vocabulary::new(vec!["wet".into(), "dry".into()], vec!["cat".into(), "dog".into()]).unwrap();
        let f = |x: f64| FeatureVector::new(vec![x, -x]).unwrap();
        let samples = vec![
            SampleRecord { id: "a".into(), features: f(1.0), state: 0, object: 0, split: Split::Train },
            SampleRecord { id: "b".into(), features: f(2.0), state: 1, object: 1, split: Split::Train },
            SampleRecord { id: "c".into(), features: f(3.0), state: 0, object: 1, split: Split::Test },
            SampleRecord { id: "d".into(), features: f(4.0), state: 0, object: 0, split: Split::Test },
        ];
        let split = SplitSpec {
            seen: [Composition::new(0, 0), Composition::new(1, 1)].into(),
            unseen: [Composition::new(0, 1)].into(),
        };
        Dataset::new(vocab, 2, samples, split, None).unwrap()
    }

    #[test]
    fn tiny_dataset_counts() {
        let ds = tiny();
        let c = ds.counts();
        assert_eq!(c.train_compositions, 2);
        assert_eq!(c.test_seen_compositions, 1);
        assert_eq!(c.test_unseen_images, 1);
        assert_eq!(ds.test_seen_compositions().len(), 1);
    }

    #[test]
    fn train_sample_on_unseen_composition_is_rejected() {
        let mut ds = tiny();
        ds.samples[2].split = Split::Train;
        assert!(matches!(ds.validate(), Err(Error::Input(_))));
    }

    #[test]
    fn overlapping_split_sets_rejected() {
        let mut ds = tiny();
        ds.split.unseen.insert(Composition::new(0, 0));
        assert!(ds.validate().is_err());
    }

    #[test]
    fn uncovered_primitive_rejected() {
        let mut ds = tiny();
        ds.samples.retain(|s| s.id != "b");
        ds.split.seen.remove(&Composition::new(1, 1));
        assert!(ds.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = tiny();
        let mut b = tiny();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.samples[0].features = FeatureVector::new(vec![1.5, -1.0]).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()], vec!["b".into()]).is_err());
        assert!(Vocabulary::new(vec![], vec!["b".into()]).is_err());
    }
}
