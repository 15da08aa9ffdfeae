//! Line-delimited JSON dataset files: one header line, then one sample per
//! line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DatasetIoError;
use crate::graph::{CandidateLabelSet, Dataset, Graph, PllSample, Split};
use crate::tensor::Tensor;

pub const FORMAT_NAME: &str = "gpcd-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    split: Split,
    num_classes: usize,
    /// Null when candidate sets vary in size.
    num_candidates: Option<usize>,
    feature_dim: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    features: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
    candidates: Vec<usize>,
    ground_truth: usize,
    causal_mask: Option<Vec<bool>>,
}

fn format_err(msg: impl Into<String>) -> DatasetIoError {
    DatasetIoError::Format(msg.into())
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        split: ds.split,
        num_classes: ds.num_classes,
        num_candidates: ds.num_candidates,
        feature_dim: ds.feature_dim,
        count: ds.samples.len(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| format_err(e.to_string()))?;
    w.write_all(b"\n")?;
    for s in &ds.samples {
        let rec = SampleRecord {
            features: s.graph.features().iter_rows().map(<[f64]>::to_vec).collect(),
            edges: s.graph.edges().to_vec(),
            candidates: s.candidates.classes().to_vec(),
            ground_truth: s.ground_truth,
            causal_mask: s.causal_mask.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| format_err(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetIoError> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| format_err("empty file"))??;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| format_err(format!("header: {e}")))?;
    if header.format != FORMAT_NAME {
        return Err(format_err(format!("unknown format `{}`", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(format_err(format!(
            "version {} is not supported (expected {FORMAT_VERSION})",
            header.version
        )));
    }

    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| format_err(format!("sample {i}: {e}")))?;
        if let Some(k) = header.num_candidates {
            if rec.candidates.len() != k {
                return Err(format_err(format!(
                    "sample {i} has {} candidates, header says K = {k}",
                    rec.candidates.len()
                )));
            }
        }
        if rec.features.iter().any(|r| r.len() != header.feature_dim) {
            return Err(format_err(format!(
                "sample {i} has rows not matching F = {}",
                header.feature_dim
            )));
        }
        let sample = (|| {
            let features = Tensor::from_rows(&rec.features)
                .map_err(|e| crate::error::GraphError::InvalidSample(e.to_string()))?;
            PllSample::new(
                Graph::new(features, rec.edges)?,
                CandidateLabelSet::new(rec.candidates, header.num_classes)?,
                rec.ground_truth,
                rec.causal_mask,
            )
        })()
        .map_err(|e| format_err(format!("sample {i}: {e}")))?;
        samples.push(sample);
    }
    if samples.len() != header.count {
        return Err(format_err(format!(
            "expected {} samples, found {} (truncated file?)",
            header.count,
            samples.len()
        )));
    }
    Dataset::new(header.split, header.num_classes, header.feature_dim, samples)
        .map_err(|e| format_err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_planted_dataset, PlantedConfig};
    use crate::noise::{add_annotator_pll, add_random_pll};

    fn small() -> Dataset {
        let cfg = PlantedConfig {
            n_samples: 12,
            ..PlantedConfig::default()
        };
        add_random_pll(&gen_planted_dataset(&cfg).unwrap(), 2, 3).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let ds = small();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn variable_k_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let ds = add_annotator_pll(&small(), &[1.0, 0.5, 0.5], 1).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&small(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let keep: Vec<&str> = text.lines().take(5).collect();
        std::fs::write(&path, keep.join("\n")).unwrap();
        assert!(matches!(load_dataset(&path), Err(DatasetIoError::Format(_))));

        // Cut mid-line as well.
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_dataset(&path), Err(DatasetIoError::Format(_))));
    }

    #[test]
    fn inconsistent_k_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&small(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut rec: serde_json::Value = serde_json::from_str(&lines[3]).unwrap();
        let gt = rec["ground_truth"].clone();
        rec["candidates"] = serde_json::json!([gt]);
        lines[3] = rec.to_string();
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(load_dataset(&path), Err(DatasetIoError::Format(_))));
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&small(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let text = text.replacen("\"version\":1", "\"version\":99", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(&path), Err(DatasetIoError::Format(_))));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(&dir.path().join("nope")),
            Err(DatasetIoError::Io(_))
        ));
    }
}
