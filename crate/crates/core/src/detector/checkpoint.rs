//! Parameter persistence: a JSON manifest plus one little-endian `f64`
//! binary file per tensor. Round trips are bit-exact and writes are
//! deterministic, so identical runs produce identical bytes on disk.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DetectorParams, ModelConfig};

const FORMAT: &str = "toy-detector-checkpoint-v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o failure at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest problem: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint format {0:?}")]
    Format(String),
    #[error("tensor {name}: expected {expected} values, found {got}")]
    TensorSize { name: String, expected: usize, got: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Write every tensor of `params` as `<name>.bin` under `dir`.
pub fn save_tensor_set(dir: &Path, params: &DetectorParams) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, t) in params.tensors() {
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(format!("{name}.bin"));
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Read a tensor set written by [`save_tensor_set`], shaped by `cfg`.
pub fn load_tensor_set(dir: &Path, cfg: &ModelConfig) -> Result<DetectorParams, CheckpointError> {
    let mut params = DetectorParams::zeros(cfg);
    for (name, t) in params.tensors_mut() {
        let path = dir.join(format!("{name}.bin"));
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() != t.len() * 8 {
            return Err(CheckpointError::TensorSize {
                name: name.to_string(),
                expected: t.len(),
                got: bytes.len() / 8,
            });
        }
        for (v, chunk) in t.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("chunks_exact yields 8 bytes"));
        }
    }
    Ok(params)
}

/// Save a model checkpoint: `manifest.json` plus a `tensors/` directory.
pub fn save_checkpoint(
    dir: &Path,
    cfg: &ModelConfig,
    params: &DetectorParams,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        format: FORMAT.to_string(),
        model: cfg.clone(),
        tensors: params
            .tensors()
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape.clone(),
                file: format!("tensors/{name}.bin"),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let path = dir.join("manifest.json");
    fs::write(&path, format!("{json}\n")).map_err(io_err(&path))?;
    save_tensor_set(&dir.join("tensors"), params)
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, DetectorParams), CheckpointError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Format(manifest.format));
    }
    manifest
        .model
        .validate()
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let expected = DetectorParams::zeros(&manifest.model);
    if manifest.tensors.len() != expected.tensors().len() {
        return Err(CheckpointError::Manifest(format!(
            "manifest lists {} tensors, model needs {}",
            manifest.tensors.len(),
            expected.tensors().len()
        )));
    }
    for (name, t) in expected.tensors() {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Manifest(format!("tensor {name} missing")))?;
        if entry.shape != t.shape {
            return Err(CheckpointError::Manifest(format!(
                "tensor {name}: manifest shape {:?} vs model shape {:?}",
                entry.shape, t.shape
            )));
        }
    }
    let params = load_tensor_set(&dir.join("tensors"), &manifest.model)?;
    Ok((manifest.model, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::default();
        let params = DetectorParams::init(&cfg, &mut rng_from(7));
        save_checkpoint(dir.path(), &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg, cfg2);
        for ((_, a), (_, b)) in params.tensors().into_iter().zip(params2.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn identical_saves_produce_identical_bytes() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::default();
        let params = DetectorParams::init(&cfg, &mut rng_from(9));
        save_checkpoint(d1.path(), &cfg, &params).unwrap();
        save_checkpoint(d2.path(), &cfg, &params).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.json")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
        for name in DetectorParams::NAMES {
            let f1 = std::fs::read(d1.path().join(format!("tensors/{name}.bin"))).unwrap();
            let f2 = std::fs::read(d2.path().join(format!("tensors/{name}.bin"))).unwrap();
            assert_eq!(f1, f2, "{name}");
        }
    }

    #[test]
    fn rejects_foreign_format_tag() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::default();
        let params = DetectorParams::zeros(&cfg);
        save_checkpoint(dir.path(), &cfg, &params).unwrap();
        let path = dir.path().join("manifest.json");
        let doctored = std::fs::read_to_string(&path)
            .unwrap()
            .replace(FORMAT, "somebody-elses-format");
        std::fs::write(&path, doctored).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn rejects_truncated_tensor_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::default();
        let params = DetectorParams::zeros(&cfg);
        save_checkpoint(dir.path(), &cfg, &params).unwrap();
        let bin = dir.path().join("tensors/cls_b.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(CheckpointError::TensorSize { .. })
        ));
    }
}
