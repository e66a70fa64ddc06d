//! Model checkpoints: a JSON manifest plus a little-endian parameter blob.
//!
//! Blob layout: `b"SASP"`, `u32` version, then every parameter as an `f64`
//! in declaration order (MLP: input weight, input bias, output weight, output
//! bias; attention: pre weight, pre bias, q, k, v, head weight, head bias).
//! Weights are stored `in x out`, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Architecture, AttentionClassifier, ClassifierKind, ClassifierModel, Linear, MlpClassifier,
};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const PARAMETER_MAGIC: &[u8; 4] = b"SASP";
pub const PARAMETER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: ClassifierKind,
    pub feature_dim: usize,
    pub class_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_scale: Option<bool>,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub dataset_fingerprint: String,
    pub parameter_count: usize,
    pub parameter_file: String,
    pub parameter_sha256: String,
}

pub fn encode_parameters(params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.len() * 8);
    out.extend_from_slice(PARAMETER_MAGIC);
    out.extend_from_slice(&PARAMETER_VERSION.to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_parameters(bytes: &[u8], expected: usize) -> std::result::Result<Vec<f64>, String> {
    if bytes.len() < 8 || &bytes[..4] != PARAMETER_MAGIC {
        return Err("missing SASP magic".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != PARAMETER_VERSION {
        return Err(format!("unsupported parameter blob version {version}"));
    }
    let body = &bytes[8..];
    if body.len() != expected * 8 {
        return Err(format!(
            "blob holds {} bytes of parameters, expected {} ({expected} values)",
            body.len(),
            expected * 8
        ));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the encoded parameter blob.
pub fn parameter_checksum(model: &ClassifierModel) -> String {
    sha256_hex(&encode_parameters(&model.architecture.parameters()))
}

impl CheckpointManifest {
    fn describe(model: &ClassifierModel, parameter_file: String, sha: String) -> Self {
        let (hidden_size, dropout, patch_count, attention_scale) = match &model.architecture {
            Architecture::Mlp(m) => (Some(m.hidden_size()), Some(m.dropout_rate), None, None),
            Architecture::Attention(a) => (None, None, Some(a.patch_count), Some(a.scale_scores)),
        };
        Self {
            kind: model.kind(),
            feature_dim: model.feature_dim(),
            class_count: model.class_count(),
            hidden_size,
            dropout,
            patch_count,
            attention_scale,
            seed: model.seed,
            class_names: model.class_names.clone(),
            dataset_fingerprint: model.dataset_fingerprint.clone(),
            parameter_count: model.architecture.parameter_count(),
            parameter_file,
            parameter_sha256: sha,
        }
    }

    /// Zero-initialised architecture with the manifest's shapes.
    fn skeleton(&self) -> std::result::Result<Architecture, String> {
        let d = self.feature_dim;
        let c = self.class_count;
        if d == 0 || c == 0 {
            return Err("feature_dim and class_count must be positive".into());
        }
        match self.kind {
            ClassifierKind::Mlp => {
                let h = self.hidden_size.ok_or("mlp checkpoint lacks hidden_size")?;
                if h == 0 {
                    return Err("hidden_size must be positive".into());
                }
                let mut m = MlpClassifier::zeros(d, h, c);
                m.dropout_rate = self.dropout.unwrap_or(0.0);
                Ok(Architecture::Mlp(m))
            }
            ClassifierKind::Attention => {
                let p = self.patch_count.ok_or("attention checkpoint lacks patch_count")?;
                let t = super::token_dim(d, p).map_err(|e| e.to_string())?;
                Ok(Architecture::Attention(AttentionClassifier {
                    pre_linear: Linear::zeros(d, d, true),
                    q_linear: Matrix::zeros(t, t),
                    k_linear: Matrix::zeros(t, t),
                    v_linear: Matrix::zeros(t, t),
                    head_linear: Linear::zeros(d, c, true),
                    patch_count: p,
                    scale_scores: self.attention_scale.unwrap_or(true),
                }))
            }
        }
    }
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Write `<path>` (manifest, conventionally `*.json`) and its sibling `*.bin`.
pub fn save_checkpoint(model: &ClassifierModel, manifest_path: &Path) -> Result<()> {
    let blob = encode_parameters(&model.architecture.parameters());
    let blob_file = blob_path(manifest_path);
    let file_name = blob_file
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::input(format!("bad checkpoint path {}", manifest_path.display())))?
        .to_string();
    let manifest = CheckpointManifest::describe(model, file_name, sha256_hex(&blob));
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    fs::write(manifest_path, json + "\n").map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<ClassifierModel> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    let mut arch = manifest
        .skeleton()
        .map_err(|e| Error::format(manifest_path, e))?;
    if arch.parameter_count() != manifest.parameter_count {
        return Err(Error::format(
            manifest_path,
            format!(
                "parameter_count {} disagrees with shapes ({})",
                manifest.parameter_count,
                arch.parameter_count()
            ),
        ));
    }
    let blob_file = manifest_path.with_file_name(&manifest.parameter_file);
    let bytes = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    if sha256_hex(&bytes) != manifest.parameter_sha256 {
        return Err(Error::format(&blob_file, "parameter checksum mismatch"));
    }
    let params = decode_parameters(&bytes, manifest.parameter_count)
        .map_err(|e| Error::format(&blob_file, e))?;
    arch.set_parameters(&params)
        .map_err(|e| Error::format(&blob_file, e.to_string()))?;
    ClassifierModel::new(
        arch,
        manifest.class_names,
        manifest.seed,
        manifest.dataset_fingerprint,
    )
    .map_err(|e| Error::format(manifest_path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn models() -> Vec<ClassifierModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mlp = MlpClassifier::new(&mut rng, 8, 16, 3, 0.1).unwrap();
        let att = AttentionClassifier::new(&mut rng, 8, 4, 5, true).unwrap();
        vec![
            ClassifierModel::new(Architecture::Mlp(mlp), vec!["a".into(), "b".into(), "c".into()], 21, "fp".into()).unwrap(),
            ClassifierModel::new(
                Architecture::Attention(att),
                (0..5).map(|i| format!("o{i}")).collect(),
                21,
                "fp".into(),
            )
            .unwrap(),
        ]
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (i, m) in models().into_iter().enumerate() {
            let path = dir.path().join(format!("m{i}.json"));
            save_checkpoint(&m, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn blob_header_and_truncation() {
        let blob = encode_parameters(&[1.0, -2.5]);
        assert_eq!(&blob[..4], b"SASP");
        assert_eq!(u32::from_le_bytes(blob[4..8].try_into().unwrap()), 1);
        assert_eq!(blob.len(), 8 + 16);
        assert_eq!(decode_parameters(&blob, 2).unwrap(), vec![1.0, -2.5]);
        assert!(decode_parameters(&blob[..20], 2).is_err());
        assert!(decode_parameters(b"XXXX\x01\0\0\0", 0).is_err());
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = &models()[0];
        let path = dir.path().join("m.json");
        save_checkpoint(m, &path).unwrap();
        let bin = path.with_extension("bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[12] ^= 0xff;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
