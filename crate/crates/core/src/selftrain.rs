//! The self-training engine: per iteration, train a fresh reader on both
//! pools, score every unlabeled instance with the trained model, keep the
//! most confident pseudo evidence labels, and move those instances into the
//! labeled pool.
//!
//! Pool membership only ever flows from `unlabeled` to `labeled`, and labels
//! are frozen once assigned. Every iteration re-initializes the model from a
//! seed derived from the master seed and the iteration index, so a whole run
//! is a pure function of (dataset, config).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{masked_softmax, AdamState, DenseArray, MASK_NEG};
use crate::config::{EvalConfig, ModelConfig, StmConfig};
use crate::corpus::Instance;
use crate::error::{Result, StmError};
use crate::eval::{answer_accuracy, evidence_pr_at_k, predicted_evidence, EvidenceMetrics, EvidencePrediction};
use crate::loss::{evidence_loss_value, item_loss, task_loss_value, BatchItem};
use crate::model::{Reader, ReaderDims, ReaderParams};
use crate::seeding::{derive_seed, STREAM_INIT, STREAM_SHUFFLE};

/// The two training pools: instances with answers only, and instances that
/// additionally carry pseudo evidence labels.
#[derive(Debug, Clone)]
pub struct DataPools {
    pub unlabeled: Vec<Instance>,
    pub labeled: Vec<Instance>,
}

impl DataPools {
    /// Starts a run with every instance unlabeled; any stale pseudo labels
    /// or confidences on the inputs are cleared.
    pub fn new(mut unlabeled: Vec<Instance>) -> Self {
        for inst in &mut unlabeled {
            inst.pseudo_evidence = None;
            inst.confidence = None;
        }
        DataPools { unlabeled, labeled: Vec::new() }
    }

    pub fn total(&self) -> usize {
        self.unlabeled.len() + self.labeled.len()
    }
}

/// An unlabeled instance scored by the trained model, ready for selection.
#[derive(Debug, Clone)]
pub struct Candidate {
    /// Position in the unlabeled pool.
    pub index: usize,
    pub id: String,
    pub l_task: f64,
    pub l_evidence: f64,
    pub labels: Vec<u8>,
    pub confidence: f64,
}

/// One instance moved into the labeled pool, with the losses it was
/// admitted under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MovedRecord {
    pub id: String,
    pub l_task: f64,
    pub l_evidence: f64,
    pub confidence: f64,
}

/// Everything observable about one iteration: the training curve, what
/// moved, pool sizes afterwards, and metrics on the development set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Mean per-instance loss for each epoch.
    pub train_loss: Vec<f64>,
    /// Instances moved into the labeled pool, most confident first.
    pub moved: Vec<MovedRecord>,
    pub unlabeled_after: usize,
    pub labeled_after: usize,
    /// Development answer accuracy; absent when no development set is given.
    pub answer_accuracy: Option<f64>,
    /// Development evidence precision/recall, one entry per configured k;
    /// empty when the development set lacks gold evidence.
    pub evidence_metrics: Vec<EvidenceMetrics>,
    /// Per-instance development evidence predictions for evolution analysis.
    pub predictions: Vec<EvidencePrediction>,
}

/// Greedy binary evidence labels for one score vector: `min(k, m)` rounds of
/// taking the unmasked sentence with the highest masked-softmax probability,
/// then masking it (ties go to the lowest index).
pub fn greedy_labels_from_scores(scores: &[f64], k: usize) -> Result<Vec<u8>> {
    if scores.is_empty() {
        return Err(StmError::Data("cannot label a document with no sentences".into()));
    }
    if k == 0 {
        return Err(StmError::Usage("pseudo labeling needs k >= 1".into()));
    }
    let m = scores.len();
    let score_row = DenseArray::vector(scores.to_vec());
    let mut mask = vec![0.0f64; m];
    let mut labels = vec![0u8; m];
    for _ in 0..k.min(m) {
        let lam = masked_softmax(&score_row, &DenseArray::vector(mask.clone()))?;
        let lam = lam.values();
        let mut pick = usize::MAX;
        for i in 0..m {
            if mask[i] == 0.0 && (pick == usize::MAX || lam[i] > lam[pick]) {
                pick = i;
            }
        }
        labels[pick] = 1;
        mask[pick] = MASK_NEG;
    }
    Ok(labels)
}

fn score_instance(params: &ReaderParams, instance: &Instance, k: usize) -> Result<(f64, Vec<u8>, f64)> {
    let mut reader = Reader::new(params);
    let pred = reader.predict(instance)?;
    let probs = reader.graph.value(pred.probs).values().to_vec();
    let (l_task, _) = task_loss_value(&probs, instance.answer)?;
    let scores = reader.graph.value(pred.evidence_scores).values().to_vec();
    let labels = greedy_labels_from_scores(&scores, k)?;
    let trace = evidence_loss_value(&scores, &labels, k.min(scores.len()))?;
    Ok((l_task, labels, trace.total))
}

/// Labels one instance with the trained model and reports the evidence loss
/// those labels incur. `k` is clamped to the sentence count.
pub fn generate_pseudo_labels(
    params: &ReaderParams,
    instance: &Instance,
    k: usize,
) -> Result<(Vec<u8>, f64)> {
    let (_, labels, l_evidence) = score_instance(params, instance, k)?;
    Ok((labels, l_evidence))
}

/// Selection confidence `exp(-l_task) * exp(-l_evidence)`, in `(0, 1]` for
/// non-negative losses and strictly decreasing in each.
pub fn confidence(l_task: f64, l_evidence: f64) -> f64 {
    (-l_task).exp() * (-l_evidence).exp()
}

/// Keeps candidates within both loss thresholds, sorts them by confidence
/// descending (ties by id ascending), and returns at most `budget` of them.
pub fn select(candidates: Vec<Candidate>, delta: f64, epsilon: f64, budget: usize) -> Vec<Candidate> {
    let mut kept: Vec<Candidate> = candidates
        .into_iter()
        .filter(|c| c.l_task <= delta && c.l_evidence <= epsilon)
        .collect();
    kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.id.cmp(&b.id)));
    kept.truncate(budget);
    kept
}

fn train_reader(
    params: &mut ReaderParams,
    pools: &DataPools,
    stm: &StmConfig,
    iteration: usize,
) -> Result<Vec<f64>> {
    let mut items: Vec<BatchItem> = pools
        .labeled
        .iter()
        .map(BatchItem::with_evidence)
        .chain(pools.unlabeled.iter().map(BatchItem::answer_only))
        .collect();
    items.sort_by(|a, b| a.instance.id.cmp(&b.instance.id));
    let mut opt = AdamState::new(&params.slots(), stm.learning_rate);
    let mut curve = Vec::with_capacity(stm.epochs);
    for epoch in 0..stm.epochs {
        let shuffle_seed = derive_seed(
            stm.master_seed,
            STREAM_SHUFFLE,
            (iteration * stm.epochs + epoch) as u64,
        );
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let mut epoch_loss = 0.0;
        for chunk in items.chunks(stm.batch_size) {
            let per_item: Vec<(f64, Vec<DenseArray>)> = chunk
                .par_iter()
                .map(|item| {
                    let mut reader = Reader::new(params);
                    let (node, _) = item_loss(&mut reader, item, stm.eta, stm.evidence_k)?;
                    reader.graph.backward(node)?;
                    Ok((reader.graph.value(node).item()?, reader.param_grads()))
                })
                .collect::<Result<_>>()?;
            let mut grads: Vec<DenseArray> =
                params.slot_shapes().into_iter().map(DenseArray::zeros).collect();
            for (value, item_grads) in &per_item {
                epoch_loss += value;
                for (acc, g) in grads.iter_mut().zip(item_grads) {
                    for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut grads {
                for v in g.values_mut() {
                    *v *= scale;
                }
            }
            opt.step(&mut params.slots_mut(), &grads)?;
        }
        curve.push(epoch_loss / items.len() as f64);
    }
    Ok(curve)
}

/// One full self-training iteration: re-initialize and train the reader on
/// both pools, score the unlabeled pool, select up to `budget` confident
/// instances, and move them (with frozen labels) into the labeled pool.
#[allow(clippy::too_many_arguments)]
pub fn run_iteration(
    pools: DataPools,
    dev: &[Instance],
    vocab: usize,
    model_cfg: &ModelConfig,
    stm: &StmConfig,
    eval_cfg: &EvalConfig,
    iteration: usize,
    budget: usize,
) -> Result<(ReaderParams, DataPools, IterationReport)> {
    stm.validate()?;
    if pools.total() == 0 {
        return Err(StmError::Config("cannot run an iteration on empty pools".into()));
    }
    let dims = ReaderDims {
        vocab,
        dim: model_cfg.embed_dim,
        contextualizer: model_cfg.contextualizer,
    };
    let init_seed = derive_seed(stm.master_seed, STREAM_INIT, iteration as u64);
    let mut params = ReaderParams::init(dims, init_seed);
    let train_loss = train_reader(&mut params, &pools, stm, iteration)?;

    let candidates: Vec<Candidate> = pools
        .unlabeled
        .par_iter()
        .enumerate()
        .map(|(index, inst)| {
            let (l_task, labels, l_evidence) = score_instance(&params, inst, stm.evidence_k)?;
            Ok(Candidate {
                index,
                id: inst.id.clone(),
                l_task,
                l_evidence,
                labels,
                confidence: confidence(l_task, l_evidence),
            })
        })
        .collect::<Result<_>>()?;
    let chosen = select(candidates, stm.delta, stm.epsilon, budget);

    let moved: Vec<MovedRecord> = chosen
        .iter()
        .map(|c| MovedRecord {
            id: c.id.clone(),
            l_task: c.l_task,
            l_evidence: c.l_evidence,
            confidence: c.confidence,
        })
        .collect();
    let mut assign: BTreeMap<usize, (Vec<u8>, f64)> =
        chosen.into_iter().map(|c| (c.index, (c.labels, c.confidence))).collect();
    let DataPools { unlabeled, mut labeled } = pools;
    let mut still_unlabeled = Vec::with_capacity(unlabeled.len() - assign.len());
    for (i, mut inst) in unlabeled.into_iter().enumerate() {
        if let Some((labels, conf)) = assign.remove(&i) {
            inst.pseudo_evidence = Some(labels);
            inst.confidence = Some(conf);
            labeled.push(inst);
        } else {
            still_unlabeled.push(inst);
        }
    }
    let pools = DataPools { unlabeled: still_unlabeled, labeled };

    let answer_acc = if dev.is_empty() { None } else { Some(answer_accuracy(&params, dev)?) };
    let dev_has_gold = !dev.is_empty()
        && dev.iter().all(|i| i.gold_evidence.as_ref().is_some_and(|g| !g.is_empty()));
    let evidence_metrics = if dev_has_gold {
        eval_cfg
            .pr_ks
            .iter()
            .map(|&k| evidence_pr_at_k(&params, dev, k))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let predictions = if dev_has_gold {
        predicted_evidence(&params, dev, stm.evidence_k)?
    } else {
        Vec::new()
    };

    let report = IterationReport {
        iteration,
        train_loss,
        moved,
        unlabeled_after: pools.unlabeled.len(),
        labeled_after: pools.labeled.len(),
        answer_accuracy: answer_acc,
        evidence_metrics,
        predictions,
    };
    Ok((params, pools, report))
}

/// Runs the full loop for `stm.iterations` rounds, starting with every
/// training instance unlabeled, and returns the final trained parameters
/// with one report per iteration. The per-iteration move budget defaults to
/// a tenth of the training set (see `StmConfig::budget`).
pub fn run_stm(
    train: Vec<Instance>,
    dev: &[Instance],
    vocab: usize,
    model_cfg: &ModelConfig,
    stm: &StmConfig,
    eval_cfg: &EvalConfig,
) -> Result<(ReaderParams, Vec<IterationReport>)> {
    stm.validate()?;
    if train.is_empty() {
        return Err(StmError::Config("training set is empty".into()));
    }
    let budget = stm.budget(train.len());
    let mut pools = DataPools::new(train);
    let mut reports = Vec::with_capacity(stm.iterations);
    let mut final_params = None;
    for iteration in 0..stm.iterations {
        let (params, next, report) =
            run_iteration(pools, dev, vocab, model_cfg, stm, eval_cfg, iteration, budget)?;
        pools = next;
        reports.push(report);
        final_params = Some(params);
    }
    Ok((final_params.expect("at least one iteration"), reports))
}
