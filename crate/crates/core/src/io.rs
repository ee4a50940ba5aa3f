//! Dataset CSV and checkpoint JSON.
//!
//! Dataset files carry a header `label,f0,f1,...` followed by one sample per
//! line. Labels may be any integers; they are mapped to contiguous ids in
//! ascending order on load. Checkpoints are JSON objects
//! `{"spec": {"kind": ..., "dims": [...]}, "weights": [...], "theta": ...}`.
//! Floats are written in shortest round-trip form, so both formats restore
//! every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::embedding::{EmbeddingState, ModelSpec};
use crate::error::{Error, Result};

/// Original label for each contiguous class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub original: Vec<i64>,
}

impl LabelMap {
    pub fn is_identity(&self) -> bool {
        self.original.iter().enumerate().all(|(i, &l)| l == i as i64)
    }
}

pub fn dataset_to_csv(dataset: &Dataset) -> String {
    let mut out = String::from("label");
    for f in 0..dataset.feature_dim() {
        let _ = write!(out, ",f{f}");
    }
    out.push('\n');
    for s in dataset.samples() {
        let _ = write!(out, "{}", s.label);
        for x in s.features.iter() {
            let _ = write!(out, ",{x:?}");
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_csv(dataset))?;
    Ok(())
}

pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<(Dataset, LabelMap)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_dataset_csv(&text, path)
}

/// Parses dataset CSV text; `origin` only labels error messages.
pub fn parse_dataset_csv(text: &str, origin: &Path) -> Result<(Dataset, LabelMap)> {
    let err = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(origin),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((hline, header)) = lines.next() else {
        return Err(err(1, "empty file".into()));
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols[0] != "label" || cols.len() < 2 {
        return Err(err(hline, "expected header 'label,f0,f1,...'".into()));
    }
    let ncols = cols.len();

    let mut raw: Vec<(i64, Vec<f64>)> = Vec::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != ncols {
            return Err(err(
                lineno,
                format!("expected {ncols} columns, found {}", fields.len()),
            ));
        }
        let label: i64 = fields[0]
            .parse()
            .map_err(|_| err(lineno, format!("bad label '{}'", fields[0])))?;
        let feats = fields[1..]
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(err(lineno, format!("bad feature value '{f}'"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        raw.push((label, feats));
    }
    if raw.is_empty() {
        return Err(err(hline, "no samples after header".into()));
    }

    let mut original: Vec<i64> = raw.iter().map(|(l, _)| *l).collect();
    original.sort_unstable();
    original.dedup();
    let samples = raw
        .into_iter()
        .map(|(l, f)| Sample {
            features: f.into(),
            label: original.binary_search(&l).expect("label collected above"),
        })
        .collect();
    Ok((Dataset::new(samples)?, LabelMap { original }))
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    spec: ModelSpec,
    weights: Vec<f64>,
    theta: f64,
}

pub fn checkpoint_to_json(state: &EmbeddingState) -> Result<String> {
    let ck = Checkpoint {
        spec: state.spec.clone(),
        weights: state.weights.0.clone(),
        theta: state.theta,
    };
    Ok(serde_json::to_string_pretty(&ck)?)
}

pub fn checkpoint_from_json(text: &str) -> Result<EmbeddingState> {
    let ck: Checkpoint = serde_json::from_str(text)?;
    ck.spec
        .validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if ck.weights.len() != ck.spec.num_weights() {
        return Err(Error::Checkpoint(format!(
            "spec {:?} needs {} weights, file has {}",
            ck.spec.dims,
            ck.spec.num_weights(),
            ck.weights.len()
        )));
    }
    EmbeddingState::new(ck.spec, ck.weights.into(), ck.theta)
}

pub fn save_checkpoint(state: &EmbeddingState, path: impl AsRef<Path>) -> Result<()> {
    let mut text = checkpoint_to_json(state)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EmbeddingState> {
    checkpoint_from_json(&fs::read_to_string(path)?)
}
