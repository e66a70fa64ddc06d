use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{storage_round, Composition, Dataset, Split};
use crate::classifiers::{token_dim, FeatureVector};
use crate::error::{Error, Result};

/// Standard deviation of the per-sample offset in [`MovingMode::PermuteOffset`].
pub const MOVING_OFFSET_SIGMA: f64 = 1.0;

/// Feature-level analogue of displacing the object and recolouring the
/// background of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MovingMode {
    /// Shuffle the feature chunks of each sample.
    #[serde(rename = "permute")]
    Permute,
    /// Shuffle, then add one random chunk-sized vector to every chunk.
    #[serde(rename = "permute+offset")]
    PermuteOffset,
}

impl fmt::Display for MovingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MovingMode::Permute => "permute",
            MovingMode::PermuteOffset => "permute+offset",
        })
    }
}

impl FromStr for MovingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permute" => Ok(MovingMode::Permute),
            "permute+offset" => Ok(MovingMode::PermuteOffset),
            other => Err(Error::input(format!("unknown moving mode {other:?}"))),
        }
    }
}

/// Per-sample perturbation: output chunk `i` is input chunk `permutation[i]`,
/// plus `offset` when present.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingPlan {
    pub permutation: Vec<usize>,
    pub offset: Option<Vec<f64>>,
}

impl MovingPlan {
    pub fn identity(patch_count: usize) -> Self {
        Self {
            permutation: (0..patch_count).collect(),
            offset: None,
        }
    }

    /// Next plan from `rng`: a shuffle of `0..patch_count`, then (with
    /// offset) `token_dim` normal draws.
    pub fn draw(rng: &mut ChaCha8Rng, mode: MovingMode, patch_count: usize, token_dim: usize) -> Self {
        let mut permutation: Vec<usize> = (0..patch_count).collect();
        permutation.shuffle(rng);
        let offset = (mode == MovingMode::PermuteOffset).then(|| {
            let normal = Normal::new(0.0, MOVING_OFFSET_SIGMA).expect("valid sigma");
            (0..token_dim).map(|_| normal.sample(rng)).collect()
        });
        Self {
            permutation,
            offset,
        }
    }
}

pub fn apply_moving(features: &[f64], plan: &MovingPlan) -> Result<Vec<f64>> {
    let p = plan.permutation.len();
    let t = token_dim(features.len(), p)?;
    let mut sorted = plan.permutation.clone();
    sorted.sort_unstable();
    if sorted.iter().enumerate().any(|(i, &v)| i != v) {
        return Err(Error::input("moving plan is not a permutation"));
    }
    if plan.offset.as_ref().is_some_and(|o| o.len() != t) {
        return Err(Error::input("offset length differs from chunk length"));
    }
    let mut out = Vec::with_capacity(features.len());
    for &src in &plan.permutation {
        let chunk = &features[src * t..(src + 1) * t];
        match &plan.offset {
            Some(off) => out.extend(chunk.iter().zip(off).map(|(x, o)| x + o)),
            None => out.extend_from_slice(chunk),
        }
    }
    Ok(out)
}

/// Perturb every training sample with a seeded [`MovingPlan`]. Test samples
/// and all labels are left untouched. Plans are drawn in sample order from
/// one generator seeded with `seed`.
pub fn perturb_moving(ds: &Dataset, mode: MovingMode, patch_count: usize, seed: u64) -> Result<Dataset> {
    let t = token_dim(ds.dim, patch_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    for sample in out.samples.iter_mut().filter(|s| s.split == Split::Train) {
        let plan = MovingPlan::draw(&mut rng, mode, patch_count, t);
        let mut moved = apply_moving(sample.features.as_slice(), &plan)?;
        moved.iter_mut().for_each(|v| *v = storage_round(*v));
        sample.features = FeatureVector::new(moved)?;
    }
    out.validate()?;
    Ok(out)
}

/// Drop train-only compositions until `keep` training compositions remain.
///
/// Compositions that also appear among the seen test samples are always
/// kept. The fewest train-only compositions needed to keep every state and
/// object in the training split come next, and the remaining slots are
/// filled from the train-only compositions in seeded random order.
/// Dropped compositions lose their training samples and leave the seen set;
/// the test split is unchanged.
pub fn reduce_train_compositions(ds: &Dataset, keep: usize, seed: u64) -> Result<Dataset> {
    let current = ds.train_compositions();
    if keep == current.len() {
        return Ok(ds.clone());
    }
    if keep > current.len() {
        return Err(Error::input(format!(
            "cannot keep {keep} compositions, only {} are trained on",
            current.len()
        )));
    }
    let retained: BTreeSet<Composition> = ds
        .test_seen_compositions()
        .intersection(&current)
        .copied()
        .collect();
    if keep < retained.len() {
        return Err(Error::input(format!(
            "keep = {keep} is below the {} compositions shared with the test split",
            retained.len()
        )));
    }

    let mut candidates: Vec<Composition> = current.difference(&retained).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);

    let mut kept = retained.clone();
    kept.extend(minimum_cover(&retained, &candidates, ds.vocab.n_states(), ds.vocab.n_objects()));
    if kept.len() > keep {
        return Err(Error::input(format!(
            "keeping every state and object needs {} training compositions, asked for {keep}",
            kept.len()
        )));
    }
    for c in &candidates {
        if kept.len() == keep {
            break;
        }
        kept.insert(*c);
    }

    let mut out = ds.clone();
    out.samples
        .retain(|s| s.split == Split::Test || kept.contains(&s.composition()));
    for dropped in current.difference(&kept) {
        out.split.seen.remove(dropped);
    }
    out.validate()?;
    Ok(out)
}

/// Fewest candidates that, together with `fixed`, touch every state and
/// object: a maximum matching between the uncovered primitives, then one
/// candidate for each primitive still left over. Candidate order breaks
/// ties, so a shuffled list gives a seeded choice.
fn minimum_cover(
    fixed: &BTreeSet<Composition>,
    candidates: &[Composition],
    n_states: usize,
    n_objects: usize,
) -> Vec<Composition> {
    let mut state_done = vec![false; n_states];
    let mut object_done = vec![false; n_objects];
    for c in fixed {
        state_done[c.state] = true;
        object_done[c.object] = true;
    }
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n_states];
    for c in candidates {
        if !state_done[c.state] && !object_done[c.object] {
            adjacency[c.state].push(c.object);
        }
    }
    // Kuhn's augmenting paths; object -> matched state.
    fn augment(s: usize, adj: &[Vec<usize>], visited: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &o in &adj[s] {
            if !visited[o] {
                visited[o] = true;
                if owner[o].is_none_or(|t| augment(t, adj, visited, owner)) {
                    owner[o] = Some(s);
                    return true;
                }
            }
        }
        false
    }
    let mut owner: Vec<Option<usize>> = vec![None; n_objects];
    for (s, done) in state_done.iter().enumerate() {
        if !done {
            let mut visited = vec![false; n_objects];
            augment(s, &adjacency, &mut visited, &mut owner);
        }
    }
    let mut chosen = Vec::new();
    for (o, s) in owner.iter().enumerate() {
        if let Some(s) = *s {
            chosen.push(Composition::new(s, o));
            state_done[s] = true;
            object_done[o] = true;
        }
    }
    for c in candidates {
        if !state_done[c.state] || !object_done[c.object] {
            chosen.push(*c);
            state_done[c.state] = true;
            object_done[c.object] = true;
        }
    }
    chosen
}
