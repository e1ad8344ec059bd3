//! Independent verification helpers for tests: a finite-difference gradient
//! checker and a brute-force evidence labeler. Both recompute their answers
//! from scratch, sharing no numeric kernels with the modules they check.

use crate::corpus::Instance;
use crate::error::{Result, StmError};
use crate::loss::{total_loss, total_loss_frozen, BatchItem};
use crate::model::{Reader, ReaderParams};

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug)]
pub struct GradCheck {
    /// Max over entries of `|fd - grad| / max(|fd|, |grad|, 1e-4)`.
    pub max_err: f64,
    pub worst_slot: String,
    pub worst_entry: usize,
    pub entries: usize,
}

/// Compares every parameter gradient of the batch objective against central
/// finite differences. Evidence selections are pinned to the unperturbed
/// trace, since selection is a constant of the forward pass. The objective is
/// only piecewise smooth (relu gates, log clamps), so a probe whose ±step
/// evaluations flip a gate shrinks its step until the gate pattern holds
/// still; the analytic gradient is the slope of the active piece, which a
/// central difference can only measure from inside that piece.
pub fn check_gradients(
    params: &ReaderParams,
    batch: &[(Instance, bool)],
    eta: f64,
    evidence_k: usize,
    step: f64,
) -> Result<GradCheck> {
    let (grads, schedules) = {
        let mut reader = Reader::new(params);
        let items = batch_items(batch);
        let loss = total_loss(&mut reader, &items, eta, evidence_k)?;
        reader.graph.backward(loss.node)?;
        let schedules: Vec<Option<Vec<usize>>> = loss
            .parts
            .iter()
            .map(|p| p.evidence.as_ref().map(|e| e.trace.selected.clone()))
            .collect();
        (reader.param_grads(), schedules)
    };
    let names = params.slot_names();
    let mut work = params.clone();
    let (_, base_gates) = frozen_value(&work, batch, eta, evidence_k, &schedules)?;
    let mut check = GradCheck {
        max_err: 0.0,
        worst_slot: String::new(),
        worst_entry: 0,
        entries: 0,
    };
    for slot in 0..grads.len() {
        for entry in 0..grads[slot].len() {
            let original = work.slots()[slot].values()[entry];
            let mut fd = 0.0;
            let mut h = step;
            for attempt in 0..3 {
                if attempt > 0 {
                    h /= 100.0;
                }
                set_entry(&mut work, slot, entry, original + h);
                let (plus, plus_gates) = frozen_value(&work, batch, eta, evidence_k, &schedules)?;
                set_entry(&mut work, slot, entry, original - h);
                let (minus, minus_gates) = frozen_value(&work, batch, eta, evidence_k, &schedules)?;
                fd = (plus - minus) / (2.0 * h);
                if plus_gates == base_gates && minus_gates == base_gates {
                    break;
                }
            }
            set_entry(&mut work, slot, entry, original);
            let grad = grads[slot].values()[entry];
            let err = (fd - grad).abs() / fd.abs().max(grad.abs()).max(1e-4);
            check.entries += 1;
            if err > check.max_err {
                check.max_err = err;
                check.worst_slot = names[slot].to_string();
                check.worst_entry = entry;
            }
        }
    }
    Ok(check)
}

fn batch_items(batch: &[(Instance, bool)]) -> Vec<BatchItem<'_>> {
    batch
        .iter()
        .map(|(inst, labeled)| BatchItem { instance: inst, labeled: *labeled })
        .collect()
}

fn set_entry(params: &mut ReaderParams, slot: usize, entry: usize, value: f64) {
    let mut slots = params.slots_mut();
    slots[slot].values_mut()[entry] = value;
}

fn frozen_value(
    params: &ReaderParams,
    batch: &[(Instance, bool)],
    eta: f64,
    evidence_k: usize,
    schedules: &[Option<Vec<usize>>],
) -> Result<(f64, Vec<bool>)> {
    let mut reader = Reader::new(params);
    let items = batch_items(batch);
    let value = total_loss_frozen(&mut reader, &items, eta, evidence_k, schedules)?.value;
    Ok((value, reader.graph.gate_signature()))
}

/// Exhaustive minimizer of the step-wise evidence loss over every binary
/// vector with exactly `k` ones. Naive softmax, lexicographic subset
/// enumeration, strict improvement keeps the first minimum. Returns the
/// labels and their loss.
pub fn exhaustive_evidence_labels(scores: &[f64], k: usize) -> Result<(Vec<u8>, f64)> {
    let m = scores.len();
    if k < 1 || k > m {
        return Err(StmError::Usage(format!(
            "subset size {k} outside 1..={m} sentences"
        )));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        let loss = subset_loss(scores, &subset);
        if best.as_ref().is_none_or(|(_, b)| loss < *b) {
            best = Some((subset.clone(), loss));
        }
        if !next_combination(&mut subset, m) {
            break;
        }
    }
    let (indices, loss) = best.expect("at least one subset");
    let mut labels = vec![0u8; m];
    for i in indices {
        labels[i] = 1;
    }
    Ok((labels, loss))
}

/// Advances `subset` to the next k-combination of `0..m` in lexicographic
/// order; false once the last combination has been seen.
fn next_combination(subset: &mut [usize], m: usize) -> bool {
    let k = subset.len();
    for i in (0..k).rev() {
        if subset[i] < m - k + i {
            subset[i] += 1;
            for j in i + 1..k {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn subset_loss(scores: &[f64], subset: &[usize]) -> f64 {
    let mut masked = vec![false; scores.len()];
    let mut total = 0.0;
    for _ in 0..subset.len() {
        let live_max = scores
            .iter()
            .zip(&masked)
            .filter(|&(_, &m)| !m)
            .map(|(&s, _)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores
            .iter()
            .zip(&masked)
            .filter(|&(_, &m)| !m)
            .map(|(&s, _)| (s - live_max).exp())
            .sum();
        let mut pick = None;
        let mut pick_prob = 0.0;
        for &i in subset {
            if masked[i] {
                continue;
            }
            let p = (scores[i] - live_max).exp() / z;
            if pick.is_none() || p > pick_prob {
                pick = Some(i);
                pick_prob = p;
            }
        }
        let i = pick.expect("subset member still unmasked");
        total += -pick_prob.max(1e-12).ln();
        masked[i] = true;
    }
    total / subset.len() as f64
}
