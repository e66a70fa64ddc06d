//! Dataset directory layout:
//!
//! ```text
//! manifest.json     vocabulary, dimension, counts, seed
//! features.bin      b"SASF", u32 version, u32 n_samples, u32 dim, f32 LE row-major
//! labels.csv        id,state,object,split   (names, not indices)
//! seen_comps.csv    state,object            (optional)
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Composition, Dataset, SampleRecord, Split, SplitCounts, SplitSpec, Vocabulary};
use crate::classifiers::FeatureVector;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SASF";
pub const FEATURE_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const FEATURES: &str = "features.bin";
const LABELS: &str = "labels.csv";
const SEEN: &str = "seen_comps.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub states: Vec<String>,
    pub objects: Vec<String>,
    pub dim: usize,
    pub n_samples: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub counts: Option<SplitCounts>,
    /// Free-form provenance, e.g. the generator settings and transforms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    id: String,
    state: String,
    object: String,
    split: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CompositionRow {
    state: String,
    object: String,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    save_dataset_with_notes(ds, dir, None)
}

pub fn save_dataset_with_notes(
    ds: &Dataset,
    dir: &Path,
    notes: Option<serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let manifest = DatasetManifest {
        states: ds.vocab.states.clone(),
        objects: ds.vocab.objects.clone(),
        dim: ds.dim,
        n_samples: ds.samples.len(),
        seed: ds.seed,
        counts: Some(ds.counts()),
        notes,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let n = u32::try_from(ds.samples.len()).map_err(|_| Error::input("too many samples"))?;
    let d = u32::try_from(ds.dim).map_err(|_| Error::input("dimension too large"))?;
    let mut blob = Vec::with_capacity(16 + ds.samples.len() * ds.dim * 4);
    blob.extend_from_slice(FEATURE_MAGIC);
    blob.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    blob.extend_from_slice(&n.to_le_bytes());
    blob.extend_from_slice(&d.to_le_bytes());
    for s in &ds.samples {
        for v in s.features.as_slice() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let path = dir.join(FEATURES);
    fs::write(&path, blob).map_err(|e| Error::io(&path, e))?;

    let path = dir.join(LABELS);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for s in &ds.samples {
        w.serialize(LabelRow {
            id: s.id.clone(),
            state: ds.vocab.states[s.state].clone(),
            object: ds.vocab.objects[s.object].clone(),
            split: s.split.to_string(),
        })
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(SEEN);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for c in &ds.split.seen {
        w.serialize(CompositionRow {
            state: ds.vocab.states[c.state].clone(),
            object: ds.vocab.objects[c.object].clone(),
        })
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
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

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

fn read_features(path: &Path, n_samples: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "missing SASF header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (version, n, d) = (word(4), word(8) as usize, word(12) as usize);
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported feature version {version}")));
    }
    if n != n_samples || d != dim {
        return Err(Error::format(
            path,
            format!("header says {n}x{d}, manifest says {n_samples}x{dim}"),
        ));
    }
    let body = &bytes[16..];
    if body.len() != n * d * 4 {
        return Err(Error::format(
            path,
            format!(
                "size mismatch: {} bytes of features, expected {}",
                body.len(),
                n * d * 4
            ),
        ));
    }
    Ok(body
        .chunks_exact(d * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()
        })
        .collect())
}

fn lookup(vocab: &Vocabulary, path: &Path, state: &str, object: &str) -> Result<Composition> {
    let s = vocab
        .state_index(state)
        .ok_or_else(|| Error::format(path, format!("unknown state {state:?}")))?;
    let o = vocab
        .object_index(object)
        .ok_or_else(|| Error::format(path, format!("unknown object {object:?}")))?;
    Ok(Composition::new(s, o))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let vocab = Vocabulary::new(manifest.states.clone(), manifest.objects.clone())
        .map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
    let features = read_features(&dir.join(FEATURES), manifest.n_samples, manifest.dim)?;

    let path = dir.join(LABELS);
    let rows: Vec<LabelRow> = csv::Reader::from_path(&path)
        .map_err(|e| csv_error(&path, e))?
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(&path, e))?;
    if rows.len() != manifest.n_samples {
        return Err(Error::format(
            &path,
            format!("{} label rows for {} samples", rows.len(), manifest.n_samples),
        ));
    }
    let mut samples = Vec::with_capacity(rows.len());
    for (row, values) in rows.into_iter().zip(features) {
        let c = lookup(&vocab, &path, &row.state, &row.object)?;
        let split: Split = row
            .split
            .parse()
            .map_err(|e: Error| Error::format(&path, e.to_string()))?;
        samples.push(SampleRecord {
            id: row.id,
            features: FeatureVector::new(values)
                .map_err(|e| Error::format(dir.join(FEATURES), e.to_string()))?,
            state: c.state,
            object: c.object,
            split,
        });
    }

    let seen_path = dir.join(SEEN);
    let seen: BTreeSet<Composition> = if seen_path.exists() {
        let mut r = csv::Reader::from_path(&seen_path).map_err(|e| csv_error(&seen_path, e))?;
        let mut seen = BTreeSet::new();
        for row in r.deserialize::<CompositionRow>() {
            let row = row.map_err(|e| csv_error(&seen_path, e))?;
            seen.insert(lookup(&vocab, &seen_path, &row.state, &row.object)?);
        }
        seen
    } else {
        samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(SampleRecord::composition)
            .collect()
    };
    let unseen = samples
        .iter()
        .filter(|s| s.split == Split::Test)
        .map(SampleRecord::composition)
        .filter(|c| !seen.contains(c))
        .collect();

    Dataset::new(
        vocab,
        manifest.dim,
        samples,
        SplitSpec { seen, unseen },
        manifest.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn sample_ds() -> Dataset {
        generate_synthetic(&SyntheticConfig::new(3, 4, 8, 5, 0.6, 0.3, 4)).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_ds();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.vocab, ds.vocab);
        assert_eq!(back.split, ds.split);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!((&a.id, a.state, a.object, a.split), (&b.id, b.state, b.object, b.split));
            for (x, y) in a.features.as_slice().iter().zip(b.features.as_slice()) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn truncated_features_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&sample_ds(), dir.path()).unwrap();
        let path = dir.path().join(FEATURES);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("size mismatch")),
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn train_sample_on_unseen_composition_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_ds();
        save_dataset(&ds, dir.path()).unwrap();
        let unseen = ds.split.unseen.iter().next().unwrap();
        let (s, o) = (&ds.vocab.states[unseen.state], &ds.vocab.objects[unseen.object]);
        let path = dir.path().join(LABELS);
        let text = fs::read_to_string(&path).unwrap();
        let needle = format!(",{s},{o},test");
        assert!(text.contains(&needle));
        fs::write(&path, text.replacen(&needle, &format!(",{s},{o},train"), 1)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Input(_))));
    }

    #[test]
    fn unknown_split_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&sample_ds(), dir.path()).unwrap();
        let path = dir.path().join(LABELS);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replacen(",test", ",validation", 1)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));

        fs::remove_file(dir.path().join(FEATURES)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    }
}
