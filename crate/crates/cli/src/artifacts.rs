//! Run-directory artifacts: the manifest, saved model parameters, iteration
//! reports, and the metrics CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stm_core::config::RunConfig;
use stm_core::corpus::atomic_write;
use stm_core::model::{ReaderDims, ReaderParams};
use stm_core::selftrain::IterationReport;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const MODEL_FILE: &str = "model_final.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.json";

/// Everything needed to reproduce or inspect a run: the exact config (after
/// command-line overrides), derived sizes, artifact paths, and wall-clock
/// timings. Timings vary between runs; the reports never do.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config: RunConfig,
    /// Embedding rows allocated, covering both the configured vocabulary and
    /// every token id seen in the data.
    pub vocab_size: usize,
    pub train_instances: usize,
    pub dev_instances: usize,
    pub label_budget: usize,
    pub reports_path: String,
    pub model_path: String,
    pub iteration_secs: Vec<f64>,
    pub total_secs: f64,
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    atomic_write(&dir.join(MANIFEST_FILE), &bytes)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("no run manifest at {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
}

pub fn write_reports(path: &Path, reports: &[IterationReport]) -> Result<()> {
    let mut bytes = Vec::new();
    for report in reports {
        serde_json::to_writer(&mut bytes, report)?;
        bytes.push(b'\n');
    }
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn load_reports(path: &Path) -> Result<Vec<IterationReport>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read iteration reports {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .with_context(|| format!("{}: bad report on line {}", path.display(), i + 1))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SavedSlot {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    vocab: usize,
    dim: usize,
    contextualizer: bool,
    slots: BTreeMap<String, SavedSlot>,
}

pub fn save_model(path: &Path, params: &ReaderParams) -> Result<()> {
    let slots: BTreeMap<String, SavedSlot> = params
        .slot_names()
        .into_iter()
        .zip(params.slots())
        .map(|(name, arr)| {
            (name.to_string(), SavedSlot { shape: arr.shape().to_vec(), values: arr.values().to_vec() })
        })
        .collect();
    let model = SavedModel {
        vocab: params.dims.vocab,
        dim: params.dims.dim,
        contextualizer: params.dims.contextualizer,
        slots,
    };
    let mut bytes = serde_json::to_vec(&model)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ReaderParams> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read model {}", path.display()))?;
    let saved: SavedModel =
        serde_json::from_str(&text).with_context(|| format!("malformed model {}", path.display()))?;
    let dims = ReaderDims {
        vocab: saved.vocab,
        dim: saved.dim,
        contextualizer: saved.contextualizer,
    };
    let mut params = ReaderParams::zeros(dims);
    for (name, slot) in params.slot_names().into_iter().zip(params.slots_mut()) {
        let Some(stored) = saved.slots.get(name) else {
            bail!("model {}: missing slot {name}", path.display());
        };
        if stored.shape != slot.shape() || stored.values.len() != slot.len() {
            bail!(
                "model {}: slot {name} has shape {:?}, expected {:?}",
                path.display(),
                stored.shape,
                slot.shape()
            );
        }
        slot.values_mut().copy_from_slice(&stored.values);
    }
    Ok(params)
}

/// Flat `iteration,metric,value` rows for plotting.
pub fn metrics_csv(reports: &[IterationReport]) -> String {
    let mut out = String::from("iteration,metric,value\n");
    for r in reports {
        let mut push = |metric: &str, value: f64| {
            out.push_str(&format!("{},{},{}\n", r.iteration, metric, value));
        };
        if let Some(last) = r.train_loss.last() {
            push("train_loss", *last);
        }
        push("moved", r.moved.len() as f64);
        push("unlabeled", r.unlabeled_after as f64);
        push("labeled", r.labeled_after as f64);
        if let Some(acc) = r.answer_accuracy {
            push("answer_accuracy", acc);
        }
        for m in &r.evidence_metrics {
            push(&format!("precision_at_{}", m.k), m.precision);
            push(&format!("recall_at_{}", m.k), m.recall);
        }
    }
    out
}
