//! Feasibility masks over the open-world composition grid.
//!
//! A composition `(s, o)` is scored by how close `o` sits to the objects
//! already seen with `s`:
//!
//! ```text
//! rho(s, o) = max over seen (s, o') of cos(emb[o], emb[o'])
//! ```
//!
//! Cells at or above a threshold `tau` are feasible, and seen compositions
//! are feasible unconditionally. A state without any seen partner falls back
//! to the maximum over every object that occurs in the seen set.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Composition, CompositionSet, Vocabulary};
use crate::error::{Error, Result};

/// Fraction of plausible pairs [`calibrate_tau`] keeps feasible by default.
pub const DEFAULT_TAU_KEEP: f64 = 0.95;

/// Primitive name to embedding vector. All vectors share one length and
/// none is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_entries<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut vectors = BTreeMap::new();
        let mut dim = None;
        for (name, v) in entries {
            if name.is_empty() {
                return Err(Error::input("embedding with an empty name"));
            }
            if v.is_empty() {
                return Err(Error::input(format!("embedding {name:?} has no components")));
            }
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(Error::input(format!(
                    "embedding {name:?} has length {}, expected {}",
                    v.len(),
                    dim.unwrap_or(0)
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::input(format!("embedding {name:?} is not finite")));
            }
            if v.iter().all(|&x| x == 0.0) {
                return Err(Error::input(format!(
                    "embedding {name:?} is the zero vector; cosine is undefined"
                )));
            }
            if vectors.insert(name.clone(), v).is_some() {
                return Err(Error::input(format!("duplicate embedding {name:?}")));
            }
        }
        let dim = dim.ok_or_else(|| Error::input("embedding table is empty"))?;
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.vectors.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    fn require(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .ok_or_else(|| Error::input(format!("no embedding for primitive {name:?}")))
    }

    /// Every state and object of `vocab` has an entry.
    pub fn check_covers(&self, vocab: &Vocabulary) -> Result<()> {
        for name in vocab.primitive_names() {
            self.require(name)?;
        }
        Ok(())
    }
}

/// Rows `name,v1,...,ve` without a header.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut entries = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let mut fields = record.iter();
        let name = fields.next().unwrap_or_default().trim().to_string();
        let values = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("row {}: {e}", line + 1)))?;
        entries.push((name, values));
    }
    EmbeddingTable::from_entries(entries).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    for (name, v) in table.iter() {
        let mut row = vec![name.to_string()];
        row.extend(v.iter().map(f64::to_string));
        writer.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskProvenance {
    File,
    Estimated,
    AllFeasible,
}

/// Boolean `|states| x |objects|` grid, row-major by state.
///
/// Equality compares the grid only; provenance is bookkeeping.
#[derive(Debug, Clone)]
pub struct FeasibilityMask {
    n_states: usize,
    n_objects: usize,
    feasible: Vec<bool>,
    provenance: MaskProvenance,
}

impl PartialEq for FeasibilityMask {
    fn eq(&self, other: &Self) -> bool {
        self.n_states == other.n_states
            && self.n_objects == other.n_objects
            && self.feasible == other.feasible
    }
}

impl FeasibilityMask {
    pub fn all_feasible(n_states: usize, n_objects: usize) -> Result<Self> {
        if n_states == 0 || n_objects == 0 {
            return Err(Error::input("mask must have at least one state and one object"));
        }
        Ok(Self {
            n_states,
            n_objects,
            feasible: vec![true; n_states * n_objects],
            provenance: MaskProvenance::AllFeasible,
        })
    }

    /// Grid with at least one feasible cell.
    pub fn from_grid(n_states: usize, n_objects: usize, feasible: Vec<bool>) -> Result<Self> {
        Self::with_provenance(n_states, n_objects, feasible, MaskProvenance::Estimated)
    }

    fn with_provenance(
        n_states: usize,
        n_objects: usize,
        feasible: Vec<bool>,
        provenance: MaskProvenance,
    ) -> Result<Self> {
        if n_states == 0 || n_objects == 0 {
            return Err(Error::input("mask must have at least one state and one object"));
        }
        if feasible.len() != n_states * n_objects {
            return Err(Error::input(format!(
                "{} cells for a {n_states}x{n_objects} mask",
                feasible.len()
            )));
        }
        if !feasible.iter().any(|&f| f) {
            return Err(Error::input("mask has no feasible composition"));
        }
        Ok(Self {
            n_states,
            n_objects,
            feasible,
            provenance,
        })
    }

    /// Skips the non-empty check. Only for exercising the downstream error.
    #[cfg(test)]
    pub(crate) fn unchecked(n_states: usize, n_objects: usize, feasible: Vec<bool>) -> Self {
        Self {
            n_states,
            n_objects,
            feasible,
            provenance: MaskProvenance::Estimated,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn provenance(&self) -> MaskProvenance {
        self.provenance
    }

    #[inline]
    pub fn is_feasible(&self, state: usize, object: usize) -> bool {
        self.feasible[state * self.n_objects + object]
    }

    pub fn grid(&self) -> &[bool] {
        &self.feasible
    }

    pub fn count(&self) -> usize {
        self.feasible.iter().filter(|&&f| f).count()
    }

    /// Seen compositions that the mask would exclude.
    pub fn uncovered<'a>(&'a self, seen: &'a CompositionSet) -> impl Iterator<Item = Composition> + 'a {
        seen.iter()
            .copied()
            .filter(|c| c.state >= self.n_states || c.object >= self.n_objects || !self.is_feasible(c.state, c.object))
    }

    pub fn covers(&self, seen: &CompositionSet) -> bool {
        self.uncovered(seen).next().is_none()
    }
}

fn check_seen(vocab: &Vocabulary, seen: &CompositionSet) -> Result<()> {
    if seen.is_empty() {
        return Err(Error::input("feasibility needs at least one seen composition"));
    }
    if let Some(c) = seen
        .iter()
        .find(|c| c.state >= vocab.n_states() || c.object >= vocab.n_objects())
    {
        return Err(Error::input(format!("seen composition {c:?} outside vocabulary")));
    }
    Ok(())
}

/// Row-major `rho` for every cell of the vocabulary grid.
pub fn feasibility_scores(
    emb: &EmbeddingTable,
    vocab: &Vocabulary,
    seen: &CompositionSet,
) -> Result<Vec<f64>> {
    check_seen(vocab, seen)?;
    emb.check_covers(vocab)?;
    let no = vocab.n_objects();
    let objects: Vec<&[f64]> = vocab
        .objects
        .iter()
        .map(|n| emb.require(n))
        .collect::<Result<_>>()?;
    let mut sim = vec![0.0; no * no];
    for a in 0..no {
        for b in a..no {
            let c = if a == b { 1.0 } else { cosine(objects[a], objects[b]) };
            sim[a * no + b] = c;
            sim[b * no + a] = c;
        }
    }

    let mut partners: Vec<Vec<usize>> = vec![Vec::new(); vocab.n_states()];
    for c in seen {
        partners[c.state].push(c.object);
    }
    let mut fallback: Vec<usize> = seen.iter().map(|c| c.object).collect();
    fallback.sort_unstable();
    fallback.dedup();

    let mut out = Vec::with_capacity(vocab.n_states() * no);
    for p in &partners {
        let p = if p.is_empty() { &fallback } else { p };
        for o in 0..no {
            let rho = p
                .iter()
                .map(|&q| sim[o * no + q])
                .fold(f64::NEG_INFINITY, f64::max);
            out.push(rho);
        }
    }
    Ok(out)
}

/// `rho(state, object)` by primitive names.
pub fn feasibility_score(
    state: &str,
    object: &str,
    emb: &EmbeddingTable,
    vocab: &Vocabulary,
    seen: &CompositionSet,
) -> Result<f64> {
    let s = vocab
        .state_index(state)
        .ok_or_else(|| Error::input(format!("unknown state {state:?}")))?;
    let o = vocab
        .object_index(object)
        .ok_or_else(|| Error::input(format!("unknown object {object:?}")))?;
    Ok(feasibility_scores(emb, vocab, seen)?[s * vocab.n_objects() + o])
}

/// Cell feasible iff seen or `rho >= tau`. Any non-NaN `tau` is accepted;
/// values above 1 leave exactly the seen compositions.
pub fn build_mask(
    emb: &EmbeddingTable,
    vocab: &Vocabulary,
    seen: &CompositionSet,
    tau: f64,
) -> Result<FeasibilityMask> {
    if tau.is_nan() {
        return Err(Error::input("tau is NaN"));
    }
    let rho = feasibility_scores(emb, vocab, seen)?;
    let no = vocab.n_objects();
    let feasible = rho
        .iter()
        .enumerate()
        .map(|(i, &r)| r >= tau || seen.contains(&Composition::new(i / no, i % no)))
        .collect();
    FeasibilityMask::with_provenance(vocab.n_states(), no, feasible, MaskProvenance::Estimated)
}

/// Largest `tau` that keeps at least `keep` of the `plausible` pairs
/// feasible by score alone.
pub fn calibrate_tau(
    emb: &EmbeddingTable,
    vocab: &Vocabulary,
    seen: &CompositionSet,
    plausible: &CompositionSet,
    keep: f64,
) -> Result<f64> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::input(format!("keep fraction {keep} outside (0, 1]")));
    }
    if plausible.is_empty() {
        return Err(Error::input("no plausible pairs to calibrate on"));
    }
    let rho = feasibility_scores(emb, vocab, seen)?;
    let no = vocab.n_objects();
    let mut scores = Vec::with_capacity(plausible.len());
    for c in plausible {
        if c.state >= vocab.n_states() || c.object >= no {
            return Err(Error::input(format!("plausible pair {c:?} outside vocabulary")));
        }
        scores.push(rho[c.state * no + c.object]);
    }
    scores.sort_by(|a, b| b.total_cmp(a));
    let k = ((keep * scores.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(scores[k.min(scores.len()) - 1])
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskRow {
    state: String,
    object: String,
    feasible: u8,
}

/// Writes every cell, feasible or not, in row-major order.
pub fn save_mask(mask: &FeasibilityMask, vocab: &Vocabulary, path: &Path) -> Result<()> {
    if (mask.n_states, mask.n_objects) != (vocab.n_states(), vocab.n_objects()) {
        return Err(Error::input("mask shape differs from vocabulary"));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for s in 0..mask.n_states {
        for o in 0..mask.n_objects {
            w.serialize(MaskRow {
                state: vocab.states[s].clone(),
                object: vocab.objects[o].clone(),
                feasible: u8::from(mask.is_feasible(s, o)),
            })
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A parsed mask file plus the pairs that were listed more than once.
#[derive(Debug, Clone)]
pub struct LoadedMask {
    pub mask: FeasibilityMask,
    pub duplicates: Vec<Composition>,
}

/// Unlisted cells are infeasible. A repeated pair takes its last value.
pub fn read_mask(path: &Path, vocab: &Vocabulary) -> Result<LoadedMask> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let no = vocab.n_objects();
    let mut cells: BTreeMap<Composition, bool> = BTreeMap::new();
    let mut duplicates = Vec::new();
    for row in reader.deserialize::<MaskRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let s = vocab
            .state_index(&row.state)
            .ok_or_else(|| Error::format(path, format!("unknown state {:?}", row.state)))?;
        let o = vocab
            .object_index(&row.object)
            .ok_or_else(|| Error::format(path, format!("unknown object {:?}", row.object)))?;
        let value = match row.feasible {
            0 => false,
            1 => true,
            v => return Err(Error::format(path, format!("feasible must be 0 or 1, got {v}"))),
        };
        let c = Composition::new(s, o);
        if cells.insert(c, value).is_some() {
            duplicates.push(c);
        }
    }
    let mut grid = vec![false; vocab.n_states() * no];
    for (c, v) in cells {
        grid[c.state * no + c.object] = v;
    }
    let mask = FeasibilityMask::with_provenance(vocab.n_states(), no, grid, MaskProvenance::File)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(LoadedMask { mask, duplicates })
}

/// [`read_mask`], logging a warning per duplicated pair.
pub fn load_mask(path: &Path, vocab: &Vocabulary) -> Result<FeasibilityMask> {
    let loaded = read_mask(path, vocab)?;
    for c in &loaded.duplicates {
        log::warn!(
            "{}: pair ({}, {}) listed more than once; last occurrence wins",
            path.display(),
            vocab.states[c.state],
            vocab.objects[c.object]
        );
    }
    Ok(loaded.mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    /// Two states, three objects: o0 = [1,0], o1 = [0.6,0.8], o2 = [0.8,0.6].
    fn toy() -> (EmbeddingTable, Vocabulary, CompositionSet) {
        let vocab = Vocabulary::new(names("s", 2), names("o", 3)).unwrap();
        let emb = EmbeddingTable::from_entries([
            ("s0".to_string(), vec![1.0, 1.0]),
            ("s1".to_string(), vec![-1.0, 1.0]),
            ("o0".to_string(), vec![1.0, 0.0]),
            ("o1".to_string(), vec![0.6, 0.8]),
            ("o2".to_string(), vec![0.8, 0.6]),
        ])
        .unwrap();
        let seen = [Composition::new(0, 0), Composition::new(0, 1), Composition::new(1, 1)]
            .into_iter()
            .collect();
        (emb, vocab, seen)
    }

    #[test]
    fn hand_cosine_example() {
        let (emb, vocab, seen) = toy();
        let rho = feasibility_score("s0", "o2", &emb, &vocab, &seen).unwrap();
        assert!((rho - 0.96).abs() < 1e-12);
        assert!((feasibility_score("s0", "o0", &emb, &vocab, &seen).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_partner_scores_zero() {
        let vocab = Vocabulary::new(names("s", 1), names("o", 2)).unwrap();
        let emb = EmbeddingTable::from_entries([
            ("s0".to_string(), vec![1.0, 0.0]),
            ("o0".to_string(), vec![1.0, 0.0]),
            ("o1".to_string(), vec![0.0, 3.0]),
        ])
        .unwrap();
        let seen = [Composition::new(0, 0)].into_iter().collect();
        assert_eq!(feasibility_score("s0", "o1", &emb, &vocab, &seen).unwrap(), 0.0);
    }

    #[test]
    fn brute_force_mask_at_point_nine() {
        let (emb, vocab, seen) = toy();
        let mask = build_mask(&emb, &vocab, &seen, 0.9).unwrap();
        let obj = |o: usize| emb.get(&vocab.objects[o]).unwrap().to_vec();
        let cos = |a: &[f64], b: &[f64]| {
            let dot = a[0] * b[0] + a[1] * b[1];
            dot / ((a[0] * a[0] + a[1] * a[1]).sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt())
        };
        for s in 0..2 {
            let partners: Vec<usize> = seen.iter().filter(|c| c.state == s).map(|c| c.object).collect();
            for o in 0..3 {
                let rho = partners
                    .iter()
                    .map(|&q| cos(&obj(o), &obj(q)))
                    .fold(f64::NEG_INFINITY, f64::max);
                let expected = seen.contains(&Composition::new(s, o)) || rho >= 0.9;
                assert_eq!(mask.is_feasible(s, o), expected, "cell ({s}, {o})");
            }
        }
        // s1 only has o1: o2 at 0.96 passes, o0 at 0.6 does not.
        assert_eq!(mask.grid(), &[true, true, true, false, true, true]);
    }

    #[test]
    fn threshold_extremes() {
        let (emb, vocab, seen) = toy();
        assert_eq!(build_mask(&emb, &vocab, &seen, -1.0).unwrap().count(), 6);
        let strict = build_mask(&emb, &vocab, &seen, 1.01).unwrap();
        for s in 0..2 {
            for o in 0..3 {
                assert_eq!(strict.is_feasible(s, o), seen.contains(&Composition::new(s, o)));
            }
        }
        assert!(build_mask(&emb, &vocab, &seen, f64::NAN).is_err());
    }

    #[test]
    fn state_without_partner_uses_all_seen_objects() {
        let (emb, vocab, _) = toy();
        let seen: CompositionSet = [Composition::new(0, 0)].into_iter().collect();
        let a = feasibility_score("s1", "o2", &emb, &vocab, &seen).unwrap();
        assert!((a - 0.8).abs() < 1e-12);
    }

    #[test]
    fn missing_or_bad_embeddings() {
        let (_, vocab, seen) = toy();
        let partial =
            EmbeddingTable::from_entries([("o0".to_string(), vec![1.0, 0.0])]).unwrap();
        assert!(matches!(build_mask(&partial, &vocab, &seen, 0.5), Err(Error::Input(_))));
        assert!(EmbeddingTable::from_entries([("a".to_string(), vec![0.0, 0.0])]).is_err());
        assert!(EmbeddingTable::from_entries([
            ("a".to_string(), vec![1.0]),
            ("b".to_string(), vec![1.0, 2.0])
        ])
        .is_err());
    }

    #[test]
    fn calibration_keeps_requested_share() {
        let (emb, vocab, seen) = toy();
        let plausible: CompositionSet =
            [Composition::new(0, 2), Composition::new(1, 0), Composition::new(1, 2)].into_iter().collect();
        // rho: (0,2) = 0.96, (1,0) = 0.6, (1,2) = 0.96.
        let tau = calibrate_tau(&emb, &vocab, &seen, &plausible, 0.95).unwrap();
        assert!((tau - 0.6).abs() < 1e-12);
        let tau = calibrate_tau(&emb, &vocab, &seen, &plausible, 0.6).unwrap();
        assert!((tau - 0.96).abs() < 1e-12);
    }

    #[test]
    fn mask_and_embedding_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (emb, vocab, seen) = toy();
        let mask = build_mask(&emb, &vocab, &seen, 0.9).unwrap();
        let path = dir.path().join("mask.csv");
        save_mask(&mask, &vocab, &path).unwrap();
        let back = load_mask(&path, &vocab).unwrap();
        assert_eq!(back, mask);
        assert_eq!(back.provenance(), MaskProvenance::File);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("state,object,feasible\n"));

        let epath = dir.path().join("emb.csv");
        save_embeddings(&emb, &epath).unwrap();
        assert_eq!(load_embeddings(&epath).unwrap(), emb);
    }

    #[test]
    fn mask_file_errors_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let (_, vocab, _) = toy();
        let path = dir.path().join("m.csv");

        fs::write(&path, "state,object,feasible\ns0,o0,0\ns1,o2,0\n").unwrap();
        assert!(matches!(load_mask(&path, &vocab), Err(Error::Format { .. })));

        fs::write(&path, "state,object,feasible\ns0,o9,1\n").unwrap();
        assert!(matches!(load_mask(&path, &vocab), Err(Error::Format { .. })));

        fs::write(&path, "state,object,feasible\ns0,o0,2\n").unwrap();
        assert!(load_mask(&path, &vocab).is_err());

        fs::write(&path, "state,object,feasible\ns0,o0,1\ns1,o1,1\ns0,o0,0\n").unwrap();
        let loaded = read_mask(&path, &vocab).unwrap();
        assert_eq!(loaded.duplicates, vec![Composition::new(0, 0)]);
        assert!(!loaded.mask.is_feasible(0, 0));
        assert!(loaded.mask.is_feasible(1, 1));
        assert_eq!(loaded.mask.count(), 1);
    }

    fn random_setup(
        n_states: usize,
        n_objects: usize,
        seed: u64,
    ) -> (EmbeddingTable, Vocabulary, CompositionSet) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocabulary::new(names("s", n_states), names("o", n_objects)).unwrap();
        let entries: Vec<(String, Vec<f64>)> = vocab
            .primitive_names()
            .map(|n| {
                let mut v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                v[0] += 1e-3;
                (n.to_string(), v)
            })
            .collect();
        let emb = EmbeddingTable::from_entries(entries).unwrap();
        let mut seen: CompositionSet = CompositionSet::new();
        for s in 0..n_states {
            seen.insert(Composition::new(s, rng.random_range(0..n_objects)));
        }
        (emb, vocab, seen)
    }

    proptest! {
        #[test]
        fn raising_tau_never_adds_cells(seed in 0u64..500, t1 in -1.0f64..1.0, dt in 0.0f64..1.0) {
            let (emb, vocab, seen) = random_setup(3, 5, seed);
            let lo = build_mask(&emb, &vocab, &seen, t1).unwrap();
            let hi = build_mask(&emb, &vocab, &seen, t1 + dt).unwrap();
            for (a, b) in lo.grid().iter().zip(hi.grid()) {
                prop_assert!(*a || !*b);
            }
        }

        #[test]
        fn seen_always_feasible(seed in 0u64..500, tau in -2.0f64..3.0) {
            let (emb, vocab, seen) = random_setup(4, 4, seed);
            prop_assert!(build_mask(&emb, &vocab, &seen, tau).unwrap().covers(&seen));
        }

        #[test]
        fn score_ignores_partner_order(seed in 0u64..500, shuffle_seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (emb, vocab, seen) = random_setup(3, 6, seed);
            let rho = feasibility_scores(&emb, &vocab, &seen).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed);
            for s in 0..3 {
                let mut partners: Vec<usize> =
                    seen.iter().filter(|c| c.state == s).map(|c| c.object).collect();
                partners.shuffle(&mut rng);
                for o in 0..6 {
                    let target = emb.get(&vocab.objects[o]).unwrap();
                    let mut best = f64::NEG_INFINITY;
                    for &q in &partners {
                        best = best.max(cosine(target, emb.get(&vocab.objects[q]).unwrap()));
                    }
                    prop_assert!((rho[s * 6 + o] - best).abs() < 1e-12);
                }
            }
        }
    }
}
