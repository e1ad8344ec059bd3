//! Training objective: answer loss, step-wise masked evidence loss, and
//! their weighted combination over a batch.
//!
//! The evidence loss walks the labeled sentences one step at a time: each
//! step softmaxes the sentence scores under the current mask, charges the
//! negative log of the strongest labeled sentence, then masks that sentence
//! out for the following step. Selection is a constant of the forward pass;
//! gradients flow through the attention values only.

use crate::autodiff::{masked_softmax, DenseArray, Graph, NodeId, LOG_FLOOR, MASK_NEG};
use crate::corpus::Instance;
use crate::error::{Result, StmError};
use crate::model::Reader;

/// Negative log-likelihood of the gold answer. `clamped` records that the
/// gold probability sat below [`LOG_FLOOR`] and was floored before the log.
pub struct TaskLoss {
    pub node: NodeId,
    pub value: f64,
    pub clamped: bool,
}

pub fn task_loss(g: &mut Graph, probs: NodeId, gold: usize) -> Result<TaskLoss> {
    let p = g.value(probs);
    if p.shape().len() != 1 {
        return Err(StmError::Usage(format!(
            "task_loss expects a probability vector, got shape {:?}",
            p.shape()
        )));
    }
    if gold >= p.len() {
        return Err(StmError::Usage(format!(
            "gold answer {gold} out of range for {} classes",
            p.len()
        )));
    }
    let clamped = p.values()[gold] < LOG_FLOOR;
    let mut onehot = vec![0.0; p.len()];
    onehot[gold] = 1.0;
    let pick = g.constant(DenseArray::vector(onehot));
    let gold_prob = g.matmul(probs, pick)?;
    let logp = g.log(gold_prob)?;
    let node = g.scale(logp, -1.0)?;
    let value = g.value(node).item()?;
    Ok(TaskLoss { node, value, clamped })
}

/// Value-only twin of [`task_loss`] for labeling passes that need no
/// gradients. Returns `(loss, clamped)`.
pub fn task_loss_value(probs: &[f64], gold: usize) -> Result<(f64, bool)> {
    if gold >= probs.len() {
        return Err(StmError::Usage(format!(
            "gold answer {gold} out of range for {} classes",
            probs.len()
        )));
    }
    let p = probs[gold];
    Ok((-p.max(LOG_FLOOR).ln(), p < LOG_FLOOR))
}

/// Step-by-step record of one evidence-loss evaluation.
#[derive(Debug, Clone)]
pub struct EvidenceLossTrace {
    pub steps: usize,
    /// Masked sentence distribution at each step, full length `m`.
    pub lambdas: Vec<Vec<f64>>,
    /// Sentence charged at each step; distinct, all carrying a 1 label.
    pub selected: Vec<usize>,
    pub step_losses: Vec<f64>,
    /// Mean of `step_losses`.
    pub total: f64,
}

pub struct EvidenceLoss {
    pub node: NodeId,
    pub trace: EvidenceLossTrace,
}

/// Loss for extracting the `evidence`-labeled sentences in `k` steps, built
/// on the graph so it can be trained through.
pub fn evidence_loss(
    g: &mut Graph,
    scores: NodeId,
    evidence: &[u8],
    k: usize,
) -> Result<EvidenceLoss> {
    evidence_loss_inner(g, scores, evidence, k, None)
}

/// [`evidence_loss`] with the per-step selections pinned to `schedule`
/// instead of the running argmax. Selection is a forward-pass constant, so
/// gradient checks re-evaluate perturbed parameters against the schedule
/// recorded from the unperturbed trace.
pub fn evidence_loss_frozen(
    g: &mut Graph,
    scores: NodeId,
    evidence: &[u8],
    k: usize,
    schedule: &[usize],
) -> Result<EvidenceLoss> {
    if schedule.len() != k {
        return Err(StmError::Usage(format!(
            "schedule length {} does not match {k} steps",
            schedule.len()
        )));
    }
    evidence_loss_inner(g, scores, evidence, k, Some(schedule))
}

/// Value-only twin of [`evidence_loss`].
pub fn evidence_loss_value(scores: &[f64], evidence: &[u8], k: usize) -> Result<EvidenceLossTrace> {
    check_evidence(scores.len(), evidence, k)?;
    let score_row = DenseArray::vector(scores.to_vec());
    let mut masked = vec![false; scores.len()];
    let mut lambdas = Vec::with_capacity(k);
    let mut selected = Vec::with_capacity(k);
    let mut step_losses = Vec::with_capacity(k);
    for _ in 0..k {
        let lam = masked_softmax(&score_row, &mask_row(&masked))?;
        let lam = lam.values().to_vec();
        let pick = select_step(&lam, evidence, &masked);
        step_losses.push(-lam[pick].max(LOG_FLOOR).ln());
        masked[pick] = true;
        lambdas.push(lam);
        selected.push(pick);
    }
    let total = step_losses.iter().sum::<f64>() / k as f64;
    Ok(EvidenceLossTrace { steps: k, lambdas, selected, step_losses, total })
}

fn evidence_loss_inner(
    g: &mut Graph,
    scores: NodeId,
    evidence: &[u8],
    k: usize,
    schedule: Option<&[usize]>,
) -> Result<EvidenceLoss> {
    let s = g.value(scores);
    if s.shape().len() != 1 {
        return Err(StmError::Usage(format!(
            "evidence_loss expects a score vector, got shape {:?}",
            s.shape()
        )));
    }
    let m = s.len();
    check_evidence(m, evidence, k)?;
    let mut masked = vec![false; m];
    let mut lambdas = Vec::with_capacity(k);
    let mut selected = Vec::with_capacity(k);
    let mut step_losses = Vec::with_capacity(k);
    let mut step_nodes = Vec::with_capacity(k);
    for step in 0..k {
        let lam = g.masked_softmax(scores, mask_row(&masked))?;
        let lam_vals = g.value(lam).values().to_vec();
        let pick = match schedule {
            Some(order) => {
                let i = order[step];
                if i >= m || evidence[i] == 0 || masked[i] {
                    return Err(StmError::Usage(format!(
                        "schedule step {step} selects invalid sentence {i}"
                    )));
                }
                i
            }
            None => select_step(&lam_vals, evidence, &masked),
        };
        let mut onehot = vec![0.0; m];
        onehot[pick] = 1.0;
        let sel = g.constant(DenseArray::vector(onehot));
        let picked = g.matmul(lam, sel)?;
        let logp = g.log(picked)?;
        let step_node = g.scale(logp, -1.0)?;
        step_losses.push(g.value(step_node).item()?);
        step_nodes.push(step_node);
        masked[pick] = true;
        lambdas.push(lam_vals);
        selected.push(pick);
    }
    let mut sum = step_nodes[0];
    for &n in &step_nodes[1..] {
        sum = g.add(sum, n)?;
    }
    let node = g.scale(sum, 1.0 / k as f64)?;
    let total = g.value(node).item()?;
    Ok(EvidenceLoss {
        node,
        trace: EvidenceLossTrace { steps: k, lambdas, selected, step_losses, total },
    })
}

fn check_evidence(m: usize, evidence: &[u8], k: usize) -> Result<()> {
    if evidence.len() != m {
        return Err(StmError::Usage(format!(
            "evidence vector length {} does not match {m} sentences",
            evidence.len()
        )));
    }
    if evidence.iter().any(|&e| e > 1) {
        return Err(StmError::Usage("evidence labels must be 0 or 1".into()));
    }
    let ones = evidence.iter().filter(|&&e| e == 1).count();
    if ones == 0 {
        return Err(StmError::Contract(
            "evidence loss needs at least one labeled sentence".into(),
        ));
    }
    if k < 1 || k > ones {
        return Err(StmError::Contract(format!(
            "step count {k} outside 1..={ones} labeled sentences"
        )));
    }
    Ok(())
}

fn mask_row(masked: &[bool]) -> DenseArray {
    DenseArray::vector(masked.iter().map(|&m| if m { MASK_NEG } else { 0.0 }).collect())
}

/// Strongest labeled, still-unmasked sentence; ties go to the lowest index.
fn select_step(lam: &[f64], evidence: &[u8], masked: &[bool]) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in lam.iter().enumerate() {
        if evidence[i] == 0 || masked[i] {
            continue;
        }
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best.expect("check_evidence guarantees an unmasked labeled sentence").0
}

/// One instance of a training batch; `labeled` marks membership in the
/// evidence-labeled pool.
#[derive(Clone, Copy)]
pub struct BatchItem<'a> {
    pub instance: &'a Instance,
    pub labeled: bool,
}

impl<'a> BatchItem<'a> {
    pub fn answer_only(instance: &'a Instance) -> Self {
        Self { instance, labeled: false }
    }

    pub fn with_evidence(instance: &'a Instance) -> Self {
        Self { instance, labeled: true }
    }
}

/// One instance's contribution to the batch objective.
pub struct InstanceLoss {
    pub task: TaskLoss,
    pub evidence: Option<EvidenceLoss>,
}

/// Batch objective: every instance contributes its answer loss, and labeled
/// instances add `eta` times their evidence loss.
pub struct BatchLoss {
    pub node: NodeId,
    pub value: f64,
    pub parts: Vec<InstanceLoss>,
}

pub fn total_loss(
    reader: &mut Reader,
    batch: &[BatchItem],
    eta: f64,
    evidence_k: usize,
) -> Result<BatchLoss> {
    total_loss_inner(reader, batch, eta, evidence_k, None)
}

/// [`total_loss`] with `schedules[i]` pinning the evidence selections of
/// batch item `i` (`None` for answer-only items); see
/// [`evidence_loss_frozen`].
pub fn total_loss_frozen(
    reader: &mut Reader,
    batch: &[BatchItem],
    eta: f64,
    evidence_k: usize,
    schedules: &[Option<Vec<usize>>],
) -> Result<BatchLoss> {
    if schedules.len() != batch.len() {
        return Err(StmError::Usage(format!(
            "{} schedules for {} batch items",
            schedules.len(),
            batch.len()
        )));
    }
    total_loss_inner(reader, batch, eta, evidence_k, Some(schedules))
}

/// Builds one item's losses on the reader's graph and returns the combined
/// node (task plus `eta` times evidence for labeled items).
pub fn item_loss(
    reader: &mut Reader,
    item: &BatchItem,
    eta: f64,
    evidence_k: usize,
) -> Result<(NodeId, InstanceLoss)> {
    item_loss_inner(reader, item, eta, evidence_k, None)
}

fn item_loss_inner(
    reader: &mut Reader,
    item: &BatchItem,
    eta: f64,
    evidence_k: usize,
    schedule: Option<&[usize]>,
) -> Result<(NodeId, InstanceLoss)> {
    if eta < 0.0 {
        return Err(StmError::Usage(format!("eta must be >= 0, got {eta}")));
    }
    let inst = item.instance;
    let pred = reader.predict(inst)?;
    let task = task_loss(&mut reader.graph, pred.probs, inst.answer)?;
    let mut node = task.node;
    let evidence = if item.labeled {
        let labels = inst.pseudo_evidence.as_ref().ok_or_else(|| {
            StmError::Contract(format!(
                "instance {}: in the labeled pool without evidence labels",
                inst.id
            ))
        })?;
        let ones = labels.iter().filter(|&&e| e == 1).count();
        let k_eff = evidence_k.min(ones);
        let g = &mut reader.graph;
        let ev = match schedule {
            Some(order) => evidence_loss_frozen(g, pred.evidence_scores, labels, k_eff, order)?,
            None => evidence_loss(g, pred.evidence_scores, labels, k_eff)?,
        };
        let weighted = g.scale(ev.node, eta)?;
        node = g.add(node, weighted)?;
        Some(ev)
    } else {
        None
    };
    Ok((node, InstanceLoss { task, evidence }))
}

fn total_loss_inner(
    reader: &mut Reader,
    batch: &[BatchItem],
    eta: f64,
    evidence_k: usize,
    schedules: Option<&[Option<Vec<usize>>]>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(StmError::Usage("total_loss on an empty batch".into()));
    }
    let mut parts = Vec::with_capacity(batch.len());
    let mut total: Option<NodeId> = None;
    for (i, item) in batch.iter().enumerate() {
        let schedule = schedules.and_then(|s| s[i].as_deref());
        let (node, part) = item_loss_inner(reader, item, eta, evidence_k, schedule)?;
        parts.push(part);
        total = Some(match total {
            Some(t) => reader.graph.add(t, node)?,
            None => node,
        });
    }
    let node = total.expect("batch is non-empty");
    let value = reader.graph.value(node).item()?;
    Ok(BatchLoss { node, value, parts })
}
