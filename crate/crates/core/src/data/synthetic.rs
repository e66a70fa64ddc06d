use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    storage_round, Composition, Dataset, SampleRecord, Split, SplitSpec, Vocabulary,
};
use crate::classifiers::{FeatureVector, DEFAULT_PATCH_COUNT};
use crate::error::{Error, Result};
use crate::feasibility::EmbeddingTable;

/// Size of the open-world label space.
pub fn open_world_space(n_states: usize, n_objects: usize) -> Result<usize> {
    if n_states == 0 || n_objects == 0 {
        return Err(Error::input("state and object counts must be positive"));
    }
    n_states
        .checked_mul(n_objects)
        .ok_or_else(|| Error::input("composition count overflows"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_states: usize,
    pub n_objects: usize,
    pub dim: usize,
    pub images_per_comp: usize,
    /// Fraction of the open-world grid that becomes seen compositions
    /// (rounded down, at least enough to cover every primitive).
    pub seen_fraction: f64,
    /// Standard deviation of the Gaussian noise on the object half of each
    /// feature, and on the state half unless `state_noise_sigma` is set.
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub state_noise_sigma: Option<f64>,
    /// Share of a seen composition's images that go to train.
    #[serde(default = "default_train_share")]
    pub train_share: f64,
    /// Fraction of seen compositions that also contribute test images; the
    /// rest are train-only.
    #[serde(default = "default_seen_test_fraction")]
    pub seen_test_fraction: f64,
    #[serde(default = "default_patch_count")]
    pub patch_count: usize,
}

fn default_train_share() -> f64 {
    0.8
}

fn default_seen_test_fraction() -> f64 {
    1.0
}

fn default_patch_count() -> usize {
    DEFAULT_PATCH_COUNT
}

impl SyntheticConfig {
    pub fn new(
        n_states: usize,
        n_objects: usize,
        dim: usize,
        images_per_comp: usize,
        seen_fraction: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        Self {
            n_states,
            n_objects,
            dim,
            images_per_comp,
            seen_fraction,
            noise_sigma,
            seed,
            state_noise_sigma: None,
            train_share: default_train_share(),
            seen_test_fraction: default_seen_test_fraction(),
            patch_count: default_patch_count(),
        }
    }

    fn validate(&self) -> Result<()> {
        open_world_space(self.n_states, self.n_objects)?;
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(Error::input(format!("dim {} must be positive and even", self.dim)));
        }
        if self.patch_count == 0 || !self.dim.is_multiple_of(self.patch_count) {
            return Err(Error::input(format!(
                "dim {} is not divisible by patch count {}",
                self.dim, self.patch_count
            )));
        }
        if self.images_per_comp == 0 {
            return Err(Error::input("images_per_comp must be positive"));
        }
        if !(self.seen_fraction > 0.0 && self.seen_fraction <= 1.0) {
            return Err(Error::input(format!(
                "seen fraction {} outside (0, 1]",
                self.seen_fraction
            )));
        }
        let state_sigma = self.state_noise_sigma.unwrap_or(self.noise_sigma);
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite())
            || !(state_sigma >= 0.0 && state_sigma.is_finite())
        {
            return Err(Error::input("noise sigma must be finite and non-negative"));
        }
        if !(self.train_share > 0.0 && self.train_share <= 1.0) {
            return Err(Error::input("train share must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.seen_test_fraction) {
            return Err(Error::input("seen test fraction must lie in [0, 1]"));
        }
        if self.train_images_per_comp() == 0 {
            return Err(Error::input("train share leaves no training image per composition"));
        }
        Ok(())
    }

    pub fn seen_count(&self) -> usize {
        let total = self.n_states * self.n_objects;
        // Guard against 0.5 * 35 style products landing a hair under an integer.
        ((total as f64 * self.seen_fraction) + 1e-9).floor() as usize
    }

    pub fn train_images_per_comp(&self) -> usize {
        (self.images_per_comp as f64 * self.train_share).round() as usize
    }

    pub fn test_images_per_comp(&self) -> usize {
        self.images_per_comp - self.train_images_per_comp().min(self.images_per_comp)
    }
}

struct Prototypes {
    states: Vec<Vec<f64>>,
    objects: Vec<Vec<f64>>,
}

fn draw_prototypes(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Prototypes {
    let half = cfg.dim / 2;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..half).map(|_| normal.sample(rng)).collect())
            .collect()
    };
    let states = draw(cfg.n_states);
    let objects = draw(cfg.n_objects);
    Prototypes { states, objects }
}

fn vocabulary(cfg: &SyntheticConfig) -> Vocabulary {
    Vocabulary::new(
        (0..cfg.n_states).map(|i| format!("state{i}")).collect(),
        (0..cfg.n_objects).map(|i| format!("object{i}")).collect(),
    )
    .expect("generated names are unique")
}

/// Seeded compositional dataset.
///
/// Every state gets a Gaussian prototype of length `dim/2`, every object
/// another; a sample of `(s, o)` is `concat(u_s, v_o)` plus Gaussian noise.
/// Seen compositions are drawn so that every primitive is covered, then
/// topped up at random.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (ns, no) = (cfg.n_states, cfg.n_objects);
    let n_seen = cfg.seen_count();
    let cover = ns.max(no);
    if n_seen < cover {
        return Err(Error::input(format!(
            "seen fraction {} yields {n_seen} seen compositions; covering {ns} states and {no} objects needs {cover}",
            cfg.seen_fraction
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = draw_prototypes(&mut rng, cfg);

    let mut state_order: Vec<usize> = (0..ns).collect();
    let mut object_order: Vec<usize> = (0..no).collect();
    state_order.shuffle(&mut rng);
    object_order.shuffle(&mut rng);
    let mut seen: BTreeSet<Composition> = (0..cover)
        .map(|i| Composition::new(state_order[i % ns], object_order[i % no]))
        .collect();
    let mut rest: Vec<Composition> = (0..ns)
        .flat_map(|s| (0..no).map(move |o| Composition::new(s, o)))
        .filter(|c| !seen.contains(c))
        .collect();
    rest.shuffle(&mut rng);
    seen.extend(rest.into_iter().take(n_seen - cover));

    let n_seen_test = ((n_seen as f64 * cfg.seen_test_fraction).round() as usize).min(n_seen);
    let mut seen_list: Vec<Composition> = seen.iter().copied().collect();
    seen_list.shuffle(&mut rng);
    let seen_in_test: BTreeSet<Composition> = seen_list.into_iter().take(n_seen_test).collect();

    let n_train = cfg.train_images_per_comp().min(cfg.images_per_comp);
    let n_test = cfg.test_images_per_comp();
    let state_noise = Normal::new(0.0, cfg.state_noise_sigma.unwrap_or(cfg.noise_sigma))
        .map_err(|e| Error::input(e.to_string()))?;
    let object_noise =
        Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::input(e.to_string()))?;

    let mut samples = Vec::new();
    let mut unseen = BTreeSet::new();
    for s in 0..ns {
        for o in 0..no {
            let c = Composition::new(s, o);
            let (train, test) = if seen.contains(&c) {
                if seen_in_test.contains(&c) {
                    (n_train, n_test)
                } else {
                    (cfg.images_per_comp, 0)
                }
            } else {
                (0, n_test)
            };
            if !seen.contains(&c) && test > 0 {
                unseen.insert(c);
            }
            for k in 0..train + test {
                let mut values = Vec::with_capacity(cfg.dim);
                values.extend(protos.states[s].iter().map(|u| u + state_noise.sample(&mut rng)));
                values.extend(protos.objects[o].iter().map(|v| v + object_noise.sample(&mut rng)));
                values.iter_mut().for_each(|v| *v = storage_round(*v));
                samples.push(SampleRecord {
                    id: format!("s{s}-o{o}-{k}"),
                    features: FeatureVector::new(values)?,
                    state: s,
                    object: o,
                    split: if k < train { Split::Train } else { Split::Test },
                });
            }
        }
    }

    Dataset::new(
        vocabulary(cfg),
        cfg.dim,
        samples,
        SplitSpec { seen, unseen },
        Some(cfg.seed),
    )
}

/// The prototypes of [`generate_synthetic`] as a primitive embedding table
/// (state prototypes under state names, object prototypes under object names).
pub fn synthetic_embeddings(cfg: &SyntheticConfig) -> Result<EmbeddingTable> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = draw_prototypes(&mut rng, cfg);
    let vocab = vocabulary(cfg);
    let entries = vocab
        .states
        .iter()
        .cloned()
        .zip(protos.states)
        .chain(vocab.objects.iter().cloned().zip(protos.objects));
    EmbeddingTable::from_entries(entries)
}
