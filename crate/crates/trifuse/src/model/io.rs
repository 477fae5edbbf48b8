//! Model file format: a human-readable JSON header (architecture, config,
//! parameter names + shapes sorted lexicographically) followed by the raw
//! little-endian f64 payload in header order.

use super::{Architecture, ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

const MAGIC: &[u8; 4] = b"TFMB";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: String,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize, PartialEq, Eq)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

fn sorted_entries(m: &ModelBundle) -> Vec<(String, &crate::tensor::Tensor)> {
    let mut entries = Vec::new();
    m.for_each(&mut |name, t| entries.push((name, t)));
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

/// Serialize a bundle to `path`.
pub fn save_model(m: &ModelBundle, path: &Path) -> Result<()> {
    let entries = sorted_entries(m);
    let header = Header {
        arch: m.arch.to_string(),
        config: m.config.clone(),
        params: entries
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, t) in entries {
        for v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load a bundle, reconstructing the architecture from the header config and
/// filling every registry tensor from the payload.
pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    read_exact(&mut file, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::VersionMismatch(format!(
            "{} is not a model file",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    read_exact(&mut file, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "model format version {version}, expected {MODEL_FORMAT_VERSION}"
        )));
    }
    let mut len = [0u8; 8];
    read_exact(&mut file, &mut len, "header length")?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut file, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::ShapeCorruption(format!("header: {e}")))?;

    let arch = Architecture::from_str(&header.arch)
        .map_err(|_| Error::ShapeCorruption(format!("unknown architecture '{}'", header.arch)))?;
    let mut bundle = ModelBundle::build(arch, &header.config, 0)?;

    // the header must list exactly the registry this architecture produces
    let expected: Vec<ParamEntry> = sorted_entries(&bundle)
        .iter()
        .map(|(name, t)| ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    if expected != header.params {
        return Err(Error::ShapeCorruption(
            "parameter table does not match the declared architecture".into(),
        ));
    }

    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for entry in &header.params {
        let numel: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; numel * 8];
        read_exact(&mut file, &mut buf, &entry.name)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::ShapeCorruption(format!(
                "non-finite values in '{}'",
                entry.name
            )));
        }
        values.insert(entry.name.clone(), data);
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(Error::ShapeCorruption("trailing bytes after payload".into()));
    }

    let mut fill_err = None;
    bundle.for_each_mut(&mut |name, t| {
        if fill_err.is_some() {
            return;
        }
        match values.remove(&name) {
            Some(data) => {
                if let Err(e) = t.set_data(data) {
                    fill_err = Some(e);
                }
            }
            None => fill_err = Some(Error::ShapeCorruption(format!("missing payload for '{name}'"))),
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    Ok(bundle)
}

/// Load and insist the stored config equals `expected`.
pub fn load_model_expecting(path: &Path, expected: &ModelConfig) -> Result<ModelBundle> {
    let bundle = load_model(path)?;
    if &bundle.config != expected {
        return Err(Error::VersionMismatch(
            "stored model config differs from the expected config".into(),
        ));
    }
    Ok(bundle)
}

fn read_exact(file: &mut fs::File, buf: &mut [u8], what: &str) -> Result<()> {
    file.read_exact(buf)
        .map_err(|_| Error::ShapeCorruption(format!("truncated while reading {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use crate::model::{Modality, OutputKind};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            input_dims: [3, 2, 2],
            lstm_hidden: [3, 3, 3],
            model_dim: 4,
            lmf_rank: 2,
            conv_kernels: [3, 3, 3],
            fused_conv_kernel: 1,
            crossmodal_layers: 1,
            self_attn_layers: 1,
            output: OutputKind::Regression,
            attn_dropout: 0.0,
            heads: 1,
            trailing_self_attention: false,
        }
    }

    fn sample() -> crate::data::MultimodalSample {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        crate::data::MultimodalSample {
            language: Tensor::normal(vec![5, 3], 1.0, &mut rng),
            audio: Tensor::normal(vec![4, 2], 1.0, &mut rng),
            visual: Tensor::normal(vec![3, 2], 1.0, &mut rng),
            label: Label::Sentiment(0.5),
        }
    }

    #[test]
    fn round_trip_reproduces_forward_exactly() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [
            Architecture::LmfMult,
            Architecture::FusionCmAttn,
            Architecture::MultLite,
            Architecture::UnimodalLstm(Modality::Visual),
        ] {
            let m = ModelBundle::build(arch, &config(), 41).unwrap();
            let path = dir.path().join(format!("{arch}.tfmb"));
            save_model(&m, &path).unwrap();
            let loaded = load_model(&path).unwrap();
            assert_eq!(loaded.arch, m.arch);
            let s = sample();
            assert_eq!(
                m.forward(&s, false).unwrap().data(),
                loaded.forward(&s, false).unwrap().data(),
                "{arch}"
            );
        }
    }

    #[test]
    fn truncated_file_is_shape_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelBundle::build(Architecture::FusionCmAttn, &config(), 1).unwrap();
        let path = dir.path().join("m.tfmb");
        save_model(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::ShapeCorruption(_))
        ));
    }

    #[test]
    fn wrong_magic_and_version_are_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tfmb");
        fs::write(&path, b"NOPE----------------").unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::VersionMismatch(_))
        ));

        let m = ModelBundle::build(Architecture::LmfMult, &config(), 1).unwrap();
        let good = dir.path().join("m.tfmb");
        save_model(&m, &good).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes[4] = 99; // bump the version word
        fs::write(&good, bytes).unwrap();
        assert!(matches!(
            load_model(&good),
            Err(Error::VersionMismatch(_))
        ));
    }

    #[test]
    fn cross_config_load_is_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelBundle::build(Architecture::LmfMult, &config(), 1).unwrap();
        let path = dir.path().join("m.tfmb");
        save_model(&m, &path).unwrap();
        let mut other = config();
        other.model_dim = 8;
        assert!(matches!(
            load_model_expecting(&path, &other),
            Err(Error::VersionMismatch(_))
        ));
        assert!(load_model_expecting(&path, &config()).is_ok());
    }
}
