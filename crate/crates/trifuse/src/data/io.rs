//! Dataset directory format: `manifest.json` plus `{train,valid,test}.jsonl`.
//!
//! Each record line is `{"l": [[...]], "a": [[...]], "v": [[...]], "label":
//! <float | [b,b,b,b]>}` with time-major arrays; floats round-trip exactly
//! through the shortest-decimal JSON encoding.

use super::{Dataset, DatasetManifest, Label, MultimodalSample, DATASET_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct Record {
    l: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    label: RecordLabel,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RecordLabel {
    Sentiment(f64),
    Emotions([u8; 4]),
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(|row| row.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::SchemaViolation(format!("{what} sequence is empty")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::SchemaViolation(format!(
            "{what} rows have inconsistent widths"
        )));
    }
    Tensor::matrix(rows.len(), d, rows.iter().flatten().copied().collect())
        .map_err(|e| Error::SchemaViolation(format!("{what}: {e}")))
}

impl From<&MultimodalSample> for Record {
    fn from(s: &MultimodalSample) -> Self {
        Record {
            l: to_rows(&s.language),
            a: to_rows(&s.audio),
            v: to_rows(&s.visual),
            label: match s.label {
                Label::Sentiment(x) => RecordLabel::Sentiment(x),
                Label::Emotions(b) => RecordLabel::Emotions(b),
            },
        }
    }
}

impl Record {
    fn into_sample(self) -> Result<MultimodalSample> {
        let sample = MultimodalSample {
            language: from_rows(&self.l, "language")?,
            audio: from_rows(&self.a, "audio")?,
            visual: from_rows(&self.v, "visual")?,
            label: match self.label {
                RecordLabel::Sentiment(x) => Label::Sentiment(x),
                RecordLabel::Emotions(b) => Label::Emotions(b),
            },
        };
        sample.validate()?;
        Ok(sample)
    }
}

/// Write `manifest.json` and the three split files into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&ds.manifest)?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    for (name, split) in [
        ("train", &ds.train),
        ("valid", &ds.valid),
        ("test", &ds.test),
    ] {
        let file = fs::File::create(dir.join(format!("{name}.jsonl")))?;
        let mut w = BufWriter::new(file);
        for sample in split {
            serde_json::to_writer(&mut w, &Record::from(sample))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Load a dataset directory, validating every record against the manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::SchemaViolation(format!(
            "missing manifest.json in {}",
            dir.display()
        )));
    }
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::SchemaViolation(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let read_split = |name: &str| -> Result<Vec<MultimodalSample>> {
        let path = dir.join(format!("{name}.jsonl"));
        if !path.exists() {
            return Err(Error::SchemaViolation(format!(
                "missing {name}.jsonl in {}",
                dir.display()
            )));
        }
        let reader = BufReader::new(fs::File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line).map_err(|e| {
                Error::SchemaViolation(format!("{name}.jsonl line {}: {e}", i + 1))
            })?;
            out.push(record.into_sample()?);
        }
        Ok(out)
    };
    let ds = Dataset {
        train: read_split("train")?,
        valid: read_split("valid")?,
        test: read_split("test")?,
        manifest,
    };
    ds.validate()?;
    Ok(ds)
}
