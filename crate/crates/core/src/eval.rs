//! Answer accuracy, evidence precision/recall at k, prediction-evolution
//! statistics across iterations, and a Jaccard-similarity rule baseline.
//!
//! All rankings order sentences by raw sentence-attention score with ties
//! going to the lowest index, the same rule the loss module uses.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::error::{Result, StmError};
use crate::model::{Reader, ReaderParams};

/// Averaged evidence retrieval quality at one cutoff.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvidenceMetrics {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub questions: usize,
}

/// One instance's extracted evidence and whether it lies inside the gold
/// set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidencePrediction {
    pub id: String,
    pub predicted: Vec<usize>,
    pub correct: bool,
}

/// How evidence predictions changed across iterations, as fractions of all
/// instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolutionStats {
    pub instances: usize,
    /// Wrong at the first iteration.
    pub initially_wrong: f64,
    /// Wrong at the first iteration, right at the last.
    pub corrected: f64,
    /// Right at some iteration, wrong at the next.
    pub corrupted: f64,
    /// Corrupted at some point yet right at the last iteration.
    pub recovered: f64,
}

/// Indices of the `k` largest scores, ties to the lowest index; returns all
/// indices when `k >= scores.len()`.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn predict_scores(params: &ReaderParams, instance: &Instance) -> Result<(usize, Vec<f64>)> {
    let mut reader = Reader::new(params);
    let pred = reader.predict(instance)?;
    let probs = reader.graph.value(pred.probs).values();
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    let scores = reader.graph.value(pred.evidence_scores).values().to_vec();
    Ok((best, scores))
}

/// Fraction of instances whose argmax answer matches gold (argmax ties go to
/// the lowest label).
pub fn answer_accuracy(params: &ReaderParams, data: &[Instance]) -> Result<f64> {
    if data.is_empty() {
        return Err(StmError::Usage("answer_accuracy on an empty dataset".into()));
    }
    let hits: Vec<bool> = data
        .par_iter()
        .map(|inst| predict_scores(params, inst).map(|(best, _)| best == inst.answer))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

fn gold_indices(inst: &Instance) -> Result<&[usize]> {
    let gold = inst
        .gold_evidence
        .as_deref()
        .ok_or_else(|| StmError::Data(format!("instance {}: gold evidence missing", inst.id)))?;
    if gold.is_empty() {
        return Err(StmError::Data(format!("instance {}: gold evidence empty", inst.id)));
    }
    Ok(gold)
}

fn pr_at_k_from_scores(scores: &[Vec<f64>], golds: &[&[usize]], k: usize) -> EvidenceMetrics {
    let mut precision = 0.0;
    let mut recall = 0.0;
    for (s, gold) in scores.iter().zip(golds) {
        let top = top_k_indices(s, k);
        let hits = top.iter().filter(|i| gold.contains(i)).count() as f64;
        precision += hits / k as f64;
        recall += hits / gold.len() as f64;
    }
    let n = scores.len() as f64;
    EvidenceMetrics {
        k,
        precision: precision / n,
        recall: recall / n,
        questions: scores.len(),
    }
}

/// Precision and recall of the model's top-`k` sentences against gold
/// evidence, averaged over the dataset.
pub fn evidence_pr_at_k(params: &ReaderParams, data: &[Instance], k: usize) -> Result<EvidenceMetrics> {
    if data.is_empty() {
        return Err(StmError::Usage("evidence_pr_at_k on an empty dataset".into()));
    }
    if k == 0 {
        return Err(StmError::Usage("evidence_pr_at_k needs k >= 1".into()));
    }
    let scores: Vec<Vec<f64>> = data
        .par_iter()
        .map(|inst| {
            gold_indices(inst)?;
            Ok(predict_scores(params, inst)?.1)
        })
        .collect::<Result<_>>()?;
    let golds: Vec<&[usize]> = data.iter().map(|i| gold_indices(i)).collect::<Result<_>>()?;
    Ok(pr_at_k_from_scores(&scores, &golds, k))
}

/// The model's top-`min(k, m)` sentences per instance, marked correct when
/// every predicted sentence is gold.
pub fn predicted_evidence(
    params: &ReaderParams,
    data: &[Instance],
    k: usize,
) -> Result<Vec<EvidencePrediction>> {
    if k == 0 {
        return Err(StmError::Usage("predicted_evidence needs k >= 1".into()));
    }
    data.par_iter()
        .map(|inst| {
            let gold = gold_indices(inst)?;
            let (_, scores) = predict_scores(params, inst)?;
            let predicted = top_k_indices(&scores, k.min(scores.len()));
            let correct = !predicted.is_empty() && predicted.iter().all(|i| gold.contains(i));
            Ok(EvidencePrediction { id: inst.id.clone(), predicted, correct })
        })
        .collect()
}

/// Aggregates per-iteration evidence predictions into the four evolution
/// fractions. Iterations must cover the same instances in the same order.
pub fn evolution_report(iterations: &[Vec<EvidencePrediction>]) -> Result<EvolutionStats> {
    if iterations.len() < 2 {
        return Err(StmError::Usage(format!(
            "evolution needs at least 2 iterations, got {}",
            iterations.len()
        )));
    }
    let first = &iterations[0];
    if first.is_empty() {
        return Err(StmError::Usage("evolution over an empty instance set".into()));
    }
    for (t, preds) in iterations.iter().enumerate().skip(1) {
        if preds.len() != first.len() {
            return Err(StmError::Data(format!(
                "iteration {t} covers {} instances, iteration 0 covers {}",
                preds.len(),
                first.len()
            )));
        }
        for (a, b) in first.iter().zip(preds) {
            if a.id != b.id {
                return Err(StmError::Data(format!(
                    "iteration {t} instance {} does not match iteration 0 instance {}",
                    b.id, a.id
                )));
            }
        }
    }
    let n = first.len();
    let mut initially_wrong = 0usize;
    let mut corrected = 0usize;
    let mut corrupted = 0usize;
    let mut recovered = 0usize;
    for i in 0..n {
        let track: Vec<bool> = iterations.iter().map(|preds| preds[i].correct).collect();
        let final_right = *track.last().expect("at least two iterations");
        if !track[0] {
            initially_wrong += 1;
            if final_right {
                corrected += 1;
            }
        }
        if track.windows(2).any(|w| w[0] && !w[1]) {
            corrupted += 1;
            if final_right {
                recovered += 1;
            }
        }
    }
    let frac = |c: usize| c as f64 / n as f64;
    Ok(EvolutionStats {
        instances: n,
        initially_wrong: frac(initially_wrong),
        corrected: frac(corrected),
        corrupted: frac(corrupted),
        recovered: frac(recovered),
    })
}

/// Jaccard similarity of each sentence's token set against the question
/// tokens (plus the gold option's tokens for multi-choice instances).
pub fn jaccard_scores(instance: &Instance) -> Vec<f64> {
    let mut reference: BTreeSet<usize> = instance.question.iter().copied().collect();
    if let Some(options) = &instance.options {
        if let Some(gold) = options.get(instance.answer) {
            reference.extend(gold.iter().copied());
        }
    }
    instance
        .sentences
        .iter()
        .map(|sent| {
            let tokens: BTreeSet<usize> = sent.iter().copied().collect();
            let inter = tokens.intersection(&reference).count();
            let union = tokens.union(&reference).count();
            if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect()
}

/// Binary labels for the `min(k, m)` most question-similar sentences.
pub fn jaccard_rule_labels(instance: &Instance, k: usize) -> Vec<u8> {
    let scores = jaccard_scores(instance);
    let mut labels = vec![0u8; scores.len()];
    for i in top_k_indices(&scores, k.min(scores.len())) {
        labels[i] = 1;
    }
    labels
}

/// Precision and recall of the Jaccard rule's top-`k` sentences.
pub fn jaccard_pr_at_k(data: &[Instance], k: usize) -> Result<EvidenceMetrics> {
    if data.is_empty() {
        return Err(StmError::Usage("jaccard_pr_at_k on an empty dataset".into()));
    }
    if k == 0 {
        return Err(StmError::Usage("jaccard_pr_at_k needs k >= 1".into()));
    }
    let scores: Vec<Vec<f64>> = data.iter().map(jaccard_scores).collect();
    let golds: Vec<&[usize]> = data.iter().map(|i| gold_indices(i)).collect::<Result<_>>()?;
    Ok(pr_at_k_from_scores(&scores, &golds, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusConfig};
    use crate::model::ReaderDims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn yesno(id: &str, question: Vec<usize>, sentences: Vec<Vec<usize>>, answer: usize) -> Instance {
        Instance {
            id: id.into(),
            question,
            sentences,
            options: None,
            answer,
            gold_evidence: None,
            pseudo_evidence: None,
            confidence: None,
        }
    }

    #[test]
    fn top_k_breaks_ties_toward_lowest_index() {
        assert_eq!(top_k_indices(&[1.0, 1.0, 0.0], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.0, 2.0, 2.0, 3.0], 2), vec![3, 1]);
        assert_eq!(top_k_indices(&[0.5], 3), vec![0]);
        assert_eq!(top_k_indices(&[-1.0, -2.0], 1), vec![0]);
    }

    #[test]
    fn constant_label_model_counts_correct_answers() {
        let mut instances = Vec::new();
        for (i, answer) in [0usize, 0, 0, 1].into_iter().enumerate() {
            instances.push(yesno(&format!("q{i}"), vec![1, 2], vec![vec![3, 4]], answer));
        }
        let params = ReaderParams::zeros(ReaderDims { vocab: 8, dim: 4, contextualizer: false });
        let acc = answer_accuracy(&params, &instances).unwrap();
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn empty_dataset_is_usage_error() {
        let params = ReaderParams::zeros(ReaderDims { vocab: 8, dim: 4, contextualizer: false });
        assert!(matches!(answer_accuracy(&params, &[]), Err(StmError::Usage(_))));
        assert!(matches!(evidence_pr_at_k(&params, &[], 1), Err(StmError::Usage(_))));
        assert!(matches!(jaccard_pr_at_k(&[], 1), Err(StmError::Usage(_))));
    }

    #[test]
    fn precision_recall_counting_fixture() {
        let scores = vec![vec![0.0, 0.0, 9.0, 8.0, 7.0, 1.0]];
        let gold: Vec<&[usize]> = vec![&[2, 5]];
        let m = pr_at_k_from_scores(&scores, &gold, 3);
        assert!((m.precision - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 0.5).abs() < 1e-15);
        assert_eq!(m.questions, 1);
    }

    #[test]
    fn p1_equals_r1_for_singleton_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m = rng.gen_range(1..7);
            let scores: Vec<Vec<f64>> = vec![(0..m).map(|_| rng.gen_range(-3.0..3.0)).collect()];
            let gold_i = rng.gen_range(0..m);
            let gold: Vec<&[usize]> = vec![std::slice::from_ref(&gold_i)];
            let metrics = pr_at_k_from_scores(&scores, &gold, 1);
            assert_eq!(metrics.precision, metrics.recall);
        }
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let m = rng.gen_range(2..8);
            let scores: Vec<Vec<f64>> = vec![(0..m).map(|_| rng.gen_range(-3.0..3.0)).collect()];
            let g1 = rng.gen_range(0..m);
            let g2 = rng.gen_range(0..m);
            let gold_vec: Vec<usize> = if g1 == g2 { vec![g1] } else { vec![g1.min(g2), g1.max(g2)] };
            let gold: Vec<&[usize]> = vec![&gold_vec];
            let mut last = 0.0;
            for k in 1..=m {
                let metrics = pr_at_k_from_scores(&scores, &gold, k);
                assert!(metrics.recall >= last - 1e-15);
                last = metrics.recall;
            }
            assert!((last - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn per_instance_counts_are_integers() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let n = rng.gen_range(1..5);
            let m = rng.gen_range(2..6);
            let scores: Vec<Vec<f64>> =
                (0..n).map(|_| (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let golds_owned: Vec<Vec<usize>> = (0..n).map(|_| vec![rng.gen_range(0..m)]).collect();
            let golds: Vec<&[usize]> = golds_owned.iter().map(|g| g.as_slice()).collect();
            let k = rng.gen_range(1..=m);
            let metrics = pr_at_k_from_scores(&scores, &golds, k);
            let hits = metrics.precision * k as f64 * n as f64;
            assert!((hits - hits.round()).abs() < 1e-9);
        }
    }

    /// Embeddings that make each key token orthogonal and every other token
    /// zero, with identity sentence bilinear: a sentence scores above zero
    /// exactly when it shares a key token with the question.
    fn key_detector_params(cfg: &CorpusConfig, dim: usize) -> ReaderParams {
        let mut params = ReaderParams::zeros(ReaderDims {
            vocab: cfg.vocab_size,
            dim,
            contextualizer: false,
        });
        for key in 0..cfg.key_tokens.min(dim) {
            params.embed.values_mut()[key * dim + key] = 1.0;
        }
        for i in 0..dim {
            params.sentence_bilinear.values_mut()[i * dim + i] = 1.0;
        }
        params
    }

    #[test]
    fn key_detector_is_a_perfect_extractor_without_decoys() {
        let cfg = CorpusConfig {
            instances: 40,
            sentences_per_doc: 6,
            sentence_len: 5,
            question_len: 3,
            vocab_size: 60,
            key_tokens: 6,
            decoy_rate: 0.0,
            noise_rate: 0.0,
            ..CorpusConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let params = key_detector_params(&cfg, 8);
        let metrics = evidence_pr_at_k(&params, &data, 1).unwrap();
        assert_eq!(metrics.precision, 1.0);
        let preds = predicted_evidence(&params, &data, 1).unwrap();
        assert!(preds.iter().all(|p| p.correct));
    }

    fn pred(id: &str, correct: bool) -> EvidencePrediction {
        EvidencePrediction { id: id.into(), predicted: vec![0], correct }
    }

    #[test]
    fn evolution_fixture_sequences() {
        let ids = ["a", "b", "c"];
        // a: wrong,wrong,right,right -> corrected
        // b: right,wrong,wrong,wrong -> corrupted, not recovered
        // c: right,wrong,right,right -> corrupted and recovered
        let tracks = [
            [false, true, true],
            [false, false, false],
            [true, false, true],
            [true, false, true],
        ];
        let iterations: Vec<Vec<EvidencePrediction>> = tracks
            .iter()
            .map(|row| ids.iter().zip(row).map(|(id, &c)| pred(id, c)).collect())
            .collect();
        let stats = evolution_report(&iterations).unwrap();
        assert_eq!(stats.instances, 3);
        assert!((stats.initially_wrong - 1.0 / 3.0).abs() < 1e-15);
        assert!((stats.corrected - 1.0 / 3.0).abs() < 1e-15);
        assert!((stats.corrupted - 2.0 / 3.0).abs() < 1e-15);
        assert!((stats.recovered - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn evolution_partitions_initially_wrong() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n = rng.gen_range(1..12);
            let t = rng.gen_range(2..5);
            let iterations: Vec<Vec<EvidencePrediction>> = (0..t)
                .map(|_| (0..n).map(|i| pred(&format!("i{i}"), rng.gen_bool(0.5))).collect())
                .collect();
            let stats = evolution_report(&iterations).unwrap();
            let never_corrected: f64 = (0..n)
                .filter(|&i| !iterations[0][i].correct && !iterations[t - 1][i].correct)
                .count() as f64
                / n as f64;
            assert!((stats.corrected + never_corrected - stats.initially_wrong).abs() < 1e-12);
            assert!(stats.recovered <= stats.corrupted + 1e-15);
            for f in [stats.initially_wrong, stats.corrected, stats.corrupted, stats.recovered] {
                assert!((0.0..=1.0).contains(&f));
            }
        }
    }

    #[test]
    fn evolution_errors_on_bad_input() {
        let one = vec![vec![pred("a", true)]];
        assert!(matches!(evolution_report(&one), Err(StmError::Usage(_))));
        let mismatched = vec![
            vec![pred("a", true), pred("b", false)],
            vec![pred("a", true)],
        ];
        assert!(matches!(evolution_report(&mismatched), Err(StmError::Data(_))));
        let misnamed = vec![vec![pred("a", true)], vec![pred("z", true)]];
        assert!(matches!(evolution_report(&misnamed), Err(StmError::Data(_))));
    }

    #[test]
    fn jaccard_fixture_similarities() {
        // question {1,2}; sentences {1,2,3} and {1,4,5}
        let inst = yesno("j", vec![1, 2], vec![vec![1, 2, 3], vec![1, 4, 5]], 0);
        let scores = jaccard_scores(&inst);
        assert!((scores[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((scores[1] - 0.25).abs() < 1e-15);
        assert_eq!(jaccard_rule_labels(&inst, 1), vec![1, 0]);
    }

    #[test]
    fn jaccard_identical_sentence_scores_one() {
        let inst = yesno("j", vec![1, 2], vec![vec![9, 8], vec![2, 1]], 0);
        let scores = jaccard_scores(&inst);
        assert_eq!(scores[1], 1.0);
        assert_eq!(jaccard_rule_labels(&inst, 1), vec![0, 1]);
    }

    #[test]
    fn jaccard_disjoint_sets_fall_back_to_index_order() {
        let inst = yesno("j", vec![1], vec![vec![5], vec![6], vec![7]], 0);
        assert_eq!(jaccard_scores(&inst), vec![0.0, 0.0, 0.0]);
        assert_eq!(jaccard_rule_labels(&inst, 2), vec![1, 1, 0]);
    }

    #[test]
    fn jaccard_uses_gold_option_tokens() {
        let mut inst = yesno("j", vec![1], vec![vec![7, 8], vec![2, 9]], 1);
        inst.options = Some(vec![vec![7], vec![2]]);
        // reference = {1, 2}: sentence 1 shares token 2, sentence 0 does not
        let scores = jaccard_scores(&inst);
        assert_eq!(scores[0], 0.0);
        assert!(scores[1] > 0.0);
        assert_eq!(jaccard_rule_labels(&inst, 1), vec![0, 1]);
    }

    #[test]
    fn duplicate_tokens_do_not_change_set_similarity() {
        let a = yesno("a", vec![1, 2], vec![vec![1, 1, 2, 2]], 0);
        let b = yesno("b", vec![1, 2], vec![vec![1, 2]], 0);
        assert_eq!(jaccard_scores(&a)[0], 1.0);
        assert_eq!(jaccard_scores(&a), jaccard_scores(&b));
    }
}
