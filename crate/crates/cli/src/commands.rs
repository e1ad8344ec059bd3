//! The four batch commands: corpus generation, self-training runs,
//! held-out evaluation, and run summarization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use stm_core::config::RunConfig;
use stm_core::corpus::{self, atomic_write, Instance};
use stm_core::eval::{answer_accuracy, evidence_pr_at_k, evolution_report, EvidenceMetrics, EvolutionStats};
use stm_core::selftrain::{run_iteration, DataPools, IterationReport};

use crate::artifacts::{
    load_manifest, load_model, load_reports, metrics_csv, save_model, write_manifest,
    write_reports, RunManifest, EVAL_FILE, METRICS_FILE, MODEL_FILE, REPORTS_FILE,
};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn generate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.corpus.seed = s;
    }
    let data = corpus::generate(&cfg.corpus)?;
    fs::create_dir_all(out)?;
    corpus::save_jsonl(&out.join(CORPUS_FILE), &data)?;
    cfg.corpus.vocabulary().save(&out.join(VOCAB_FILE))?;

    let mut answers: BTreeMap<usize, usize> = BTreeMap::new();
    for inst in &data {
        *answers.entry(inst.answer).or_default() += 1;
    }
    let balance: Vec<String> = answers
        .iter()
        .map(|(a, n)| format!("{a}: {:.3}", *n as f64 / data.len() as f64))
        .collect();
    println!(
        "wrote {} instances to {} (seed {})",
        data.len(),
        out.join(CORPUS_FILE).display(),
        cfg.corpus.seed
    );
    println!("answer balance: {{{}}}", balance.join(", "));
    Ok(())
}

fn max_token(data: &[Instance]) -> usize {
    let mut max = 0usize;
    for inst in data {
        let seqs = inst
            .sentences
            .iter()
            .chain(inst.options.iter().flatten())
            .chain(std::iter::once(&inst.question));
        for seq in seqs {
            for &t in seq {
                max = max.max(t);
            }
        }
    }
    max
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.3}"),
        None => "-".into(),
    }
}

fn p_at_1(report: &IterationReport) -> Option<f64> {
    report.evidence_metrics.iter().find(|m| m.k == 1).map(|m| m.precision)
}

pub fn train(config: Option<&Path>, data_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.stm.master_seed = s;
    }
    let data = corpus::load_jsonl(data_path, None)?;
    if data.is_empty() {
        bail!("corpus {} holds no instances", data_path.display());
    }
    let vocab = cfg.corpus.vocab_size.max(max_token(&data) + 1);
    let (train, dev) = corpus::split(&data, cfg.stm.train_fraction, cfg.stm.master_seed)?;
    let budget = cfg.stm.budget(train.len());
    println!(
        "training on {} instances ({} dev), budget {} per iteration",
        train.len(),
        dev.len(),
        budget
    );

    fs::create_dir_all(out)?;
    let started = Instant::now();
    let mut pools = DataPools::new(train.clone());
    let mut reports: Vec<IterationReport> = Vec::with_capacity(cfg.stm.iterations);
    let mut iteration_secs = Vec::with_capacity(cfg.stm.iterations);
    let mut final_params = None;
    for iteration in 0..cfg.stm.iterations {
        let tick = Instant::now();
        let (params, next, report) = run_iteration(
            pools,
            &dev,
            vocab,
            &cfg.model,
            &cfg.stm,
            &cfg.eval,
            iteration,
            budget,
        )?;
        pools = next;
        iteration_secs.push(tick.elapsed().as_secs_f64());
        println!(
            "iteration {}: loss {} accuracy {} P@1 {} moved {} (unlabeled {} / labeled {})",
            report.iteration,
            fmt_opt(report.train_loss.last().copied()),
            fmt_opt(report.answer_accuracy),
            fmt_opt(p_at_1(&report)),
            report.moved.len(),
            report.unlabeled_after,
            report.labeled_after
        );
        reports.push(report);
        final_params = Some(params);
    }
    let params = final_params.expect("config validation guarantees iterations >= 1");

    write_reports(&out.join(REPORTS_FILE), &reports)?;
    save_model(&out.join(MODEL_FILE), &params)?;
    let manifest = RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg,
        vocab_size: vocab,
        train_instances: train.len(),
        dev_instances: dev.len(),
        label_budget: budget,
        reports_path: REPORTS_FILE.to_string(),
        model_path: MODEL_FILE.to_string(),
        iteration_secs,
        total_secs: started.elapsed().as_secs_f64(),
    };
    write_manifest(out, &manifest)?;
    println!("run written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    data: String,
    instances: usize,
    answer_accuracy: f64,
    evidence_metrics: Vec<EvidenceMetrics>,
}

pub fn eval(run_dir: &Path, data_path: &Path) -> Result<()> {
    let manifest = load_manifest(run_dir)?;
    let params = load_model(&run_dir.join(&manifest.model_path))?;
    let data = corpus::load_jsonl(data_path, None)?;
    if data.is_empty() {
        bail!("corpus {} holds no instances", data_path.display());
    }
    let accuracy = answer_accuracy(&params, &data)?;
    let has_gold = data.iter().all(|i| i.gold_evidence.as_ref().is_some_and(|g| !g.is_empty()));
    let evidence_metrics: Vec<EvidenceMetrics> = if has_gold {
        manifest
            .config
            .eval
            .pr_ks
            .iter()
            .map(|&k| evidence_pr_at_k(&params, &data, k))
            .collect::<stm_core::Result<_>>()?
    } else {
        Vec::new()
    };

    println!("answer accuracy: {accuracy:.4} over {} instances", data.len());
    for m in &evidence_metrics {
        println!("evidence P@{}: {:.4}  R@{}: {:.4}", m.k, m.precision, m.k, m.recall);
    }
    if !has_gold {
        println!("no gold evidence in the data; skipping evidence metrics");
    }

    let summary = EvalSummary {
        data: data_path.display().to_string(),
        instances: data.len(),
        answer_accuracy: accuracy,
        evidence_metrics,
    };
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    let eval_path = run_dir.join(EVAL_FILE);
    atomic_write(&eval_path, &bytes).context("writing evaluation summary")?;
    println!("evaluation written to {}", eval_path.display());
    Ok(())
}

/// Evolution fractions for a single-iteration run: nothing can be corrected,
/// corrupted, or recovered without a second iteration.
fn single_iteration_evolution(report: &IterationReport) -> Option<EvolutionStats> {
    if report.predictions.is_empty() {
        return None;
    }
    let n = report.predictions.len();
    let wrong = report.predictions.iter().filter(|p| !p.correct).count();
    Some(EvolutionStats {
        instances: n,
        initially_wrong: wrong as f64 / n as f64,
        corrected: 0.0,
        corrupted: 0.0,
        recovered: 0.0,
    })
}

pub fn report(run_dir: &Path) -> Result<()> {
    let manifest = load_manifest(run_dir)?;
    let reports = load_reports(&run_dir.join(&manifest.reports_path))?;
    if reports.is_empty() {
        bail!("run {} has no iteration reports", run_dir.display());
    }

    let csv = metrics_csv(&reports);
    let csv_path = run_dir.join(METRICS_FILE);
    atomic_write(&csv_path, csv.as_bytes()).context("writing metrics CSV")?;
    println!("metrics written to {}", csv_path.display());

    let evolution = if reports.len() == 1 {
        single_iteration_evolution(&reports[0])
    } else if reports.iter().all(|r| !r.predictions.is_empty()) {
        let traces: Vec<_> = reports.iter().map(|r| r.predictions.clone()).collect();
        Some(evolution_report(&traces)?)
    } else {
        None
    };
    match evolution {
        Some(stats) => {
            println!(
                "evidence evolution over {} instances: initially wrong {:.3}, corrected {:.3}, corrupted {:.3}, recovered {:.3}",
                stats.instances,
                stats.initially_wrong,
                stats.corrected,
                stats.corrupted,
                stats.recovered
            );
        }
        None => println!("no evidence predictions recorded; skipping evolution"),
    }
    Ok(())
}
