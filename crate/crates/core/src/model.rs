//! Hierarchical-attention reader.
//!
//! A shared embedding encodes the query and each document sentence, with an
//! optional residual self-attention mixing layer per sequence. Token-level
//! attention pools each sentence twice: a query-conditioned pool (bilinear
//! against the pooled query) and a self pool that produces the sentence key
//! used by sentence-level attention. Sentence attention scores each key
//! against the query, and its softmax weights both drive evidence extraction
//! and form the document summary consumed by the answer heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseArray, Graph, NodeId};
use crate::corpus::Instance;
use crate::error::{Result, StmError};

pub const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderDims {
    pub vocab: usize,
    pub dim: usize,
    pub contextualizer: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextualizerParams {
    pub attn: DenseArray,
    pub value: DenseArray,
}

/// All trainable state. `slots()` fixes the canonical parameter order used
/// for gradients and the optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReaderParams {
    pub dims: ReaderDims,
    pub embed: DenseArray,
    pub contextualizer: Option<ContextualizerParams>,
    pub token_bilinear: DenseArray,
    pub sentence_bilinear: DenseArray,
    pub token_pool_w: DenseArray,
    pub token_pool_b: DenseArray,
    pub question_pool_w: DenseArray,
    pub question_pool_b: DenseArray,
    pub yesno_w: DenseArray,
    pub yesno_b: DenseArray,
    pub choice_hidden_w: DenseArray,
    pub choice_hidden_b: DenseArray,
    pub choice_out_w: DenseArray,
    pub choice_out_b: DenseArray,
}

impl ReaderParams {
    /// Uniform init in `[-INIT_RANGE, INIT_RANGE]`, fully determined by
    /// `seed`.
    pub fn init(dims: ReaderDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: Vec<usize>| {
            let n = shape.iter().product();
            let vals = (0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
            DenseArray::new(shape, vals).expect("init shape consistent")
        };
        let d = dims.dim;
        Self {
            dims,
            embed: draw(vec![dims.vocab, d]),
            contextualizer: dims.contextualizer.then(|| ContextualizerParams {
                attn: draw(vec![d, d]),
                value: draw(vec![d, d]),
            }),
            token_bilinear: draw(vec![d, d]),
            sentence_bilinear: draw(vec![d, d]),
            token_pool_w: draw(vec![d]),
            token_pool_b: draw(vec![]),
            question_pool_w: draw(vec![d]),
            question_pool_b: draw(vec![]),
            yesno_w: draw(vec![2, d]),
            yesno_b: draw(vec![2]),
            choice_hidden_w: draw(vec![d, d]),
            choice_hidden_b: draw(vec![d]),
            choice_out_w: draw(vec![d]),
            choice_out_b: draw(vec![]),
        }
    }

    /// All-zero parameters, mainly for fixture tests.
    pub fn zeros(dims: ReaderDims) -> Self {
        let d = dims.dim;
        Self {
            dims,
            embed: DenseArray::zeros(vec![dims.vocab, d]),
            contextualizer: dims.contextualizer.then(|| ContextualizerParams {
                attn: DenseArray::zeros(vec![d, d]),
                value: DenseArray::zeros(vec![d, d]),
            }),
            token_bilinear: DenseArray::zeros(vec![d, d]),
            sentence_bilinear: DenseArray::zeros(vec![d, d]),
            token_pool_w: DenseArray::zeros(vec![d]),
            token_pool_b: DenseArray::zeros(vec![]),
            question_pool_w: DenseArray::zeros(vec![d]),
            question_pool_b: DenseArray::zeros(vec![]),
            yesno_w: DenseArray::zeros(vec![2, d]),
            yesno_b: DenseArray::zeros(vec![2]),
            choice_hidden_w: DenseArray::zeros(vec![d, d]),
            choice_hidden_b: DenseArray::zeros(vec![d]),
            choice_out_w: DenseArray::zeros(vec![d]),
            choice_out_b: DenseArray::zeros(vec![]),
        }
    }

    pub fn slot_names(&self) -> Vec<&'static str> {
        let mut names = vec!["embed"];
        if self.contextualizer.is_some() {
            names.push("ctx_attn");
            names.push("ctx_value");
        }
        names.extend([
            "token_bilinear",
            "sentence_bilinear",
            "token_pool_w",
            "token_pool_b",
            "question_pool_w",
            "question_pool_b",
            "yesno_w",
            "yesno_b",
            "choice_hidden_w",
            "choice_hidden_b",
            "choice_out_w",
            "choice_out_b",
        ]);
        names
    }

    pub fn slots(&self) -> Vec<&DenseArray> {
        let mut slots = vec![&self.embed];
        if let Some(ctx) = &self.contextualizer {
            slots.push(&ctx.attn);
            slots.push(&ctx.value);
        }
        slots.extend([
            &self.token_bilinear,
            &self.sentence_bilinear,
            &self.token_pool_w,
            &self.token_pool_b,
            &self.question_pool_w,
            &self.question_pool_b,
            &self.yesno_w,
            &self.yesno_b,
            &self.choice_hidden_w,
            &self.choice_hidden_b,
            &self.choice_out_w,
            &self.choice_out_b,
        ]);
        slots
    }

    pub fn slots_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut slots = vec![&mut self.embed];
        if let Some(ctx) = &mut self.contextualizer {
            slots.push(&mut ctx.attn);
            slots.push(&mut ctx.value);
        }
        slots.extend([
            &mut self.token_bilinear,
            &mut self.sentence_bilinear,
            &mut self.token_pool_w,
            &mut self.token_pool_b,
            &mut self.question_pool_w,
            &mut self.question_pool_b,
            &mut self.yesno_w,
            &mut self.yesno_b,
            &mut self.choice_hidden_w,
            &mut self.choice_hidden_b,
            &mut self.choice_out_w,
            &mut self.choice_out_b,
        ]);
        slots
    }

    pub fn slot_shapes(&self) -> Vec<Vec<usize>> {
        self.slots().iter().map(|a| a.shape().to_vec()).collect()
    }
}

/// `x^T W y` for rank-1 `x`, `y` and a rank-2 `W`.
pub fn bilinear_score(g: &mut Graph, x: NodeId, w: NodeId, y: NodeId) -> Result<NodeId> {
    let xw = g.matmul(x, w)?;
    g.matmul(xw, y)
}

/// Everything the rest of the pipeline needs from one encoded (query,
/// document) pair. All fields are node ids into the reader's graph.
#[derive(Debug, Clone)]
pub struct EncodedInstance {
    pub question_tokens: NodeId,
    pub question: NodeId,
    pub sentence_tokens: Vec<NodeId>,
    pub token_summaries: NodeId,
    pub sentence_keys: NodeId,
    pub sentence_scores: NodeId,
    pub gamma: NodeId,
    pub summary: NodeId,
}

/// Output of a full forward pass on one instance.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Distribution over answer classes.
    pub probs: NodeId,
    /// One encoding for yes/no, one per option for multi-choice.
    pub encodings: Vec<EncodedInstance>,
    /// Sentence scores driving evidence extraction: the single encoding for
    /// yes/no, the gold option's encoding for multi-choice.
    pub evidence_scores: NodeId,
    pub gamma: NodeId,
}

/// A parameter set bound into a graph. Multiple instances may be encoded on
/// the same reader; their losses then share parameter nodes so one backward
/// sweep yields batch gradients.
pub struct Reader<'p> {
    pub graph: Graph,
    params: &'p ReaderParams,
    embed: NodeId,
    ctx: Option<(NodeId, NodeId)>,
    token_bilinear: NodeId,
    sentence_bilinear: NodeId,
    token_pool_w: NodeId,
    token_pool_b: NodeId,
    question_pool_w: NodeId,
    question_pool_b: NodeId,
    yesno_w: NodeId,
    yesno_b: NodeId,
    choice_hidden_w: NodeId,
    choice_hidden_b: NodeId,
    choice_out_w: NodeId,
    choice_out_b: NodeId,
}

impl<'p> Reader<'p> {
    pub fn new(params: &'p ReaderParams) -> Self {
        let mut graph = Graph::new();
        let mut slot = 0usize;
        let mut bind = |g: &mut Graph, a: &DenseArray| {
            let id = g.param(slot, a.clone());
            slot += 1;
            id
        };
        let embed = bind(&mut graph, &params.embed);
        let ctx = params
            .contextualizer
            .as_ref()
            .map(|c| (bind(&mut graph, &c.attn), bind(&mut graph, &c.value)));
        let token_bilinear = bind(&mut graph, &params.token_bilinear);
        let sentence_bilinear = bind(&mut graph, &params.sentence_bilinear);
        let token_pool_w = bind(&mut graph, &params.token_pool_w);
        let token_pool_b = bind(&mut graph, &params.token_pool_b);
        let question_pool_w = bind(&mut graph, &params.question_pool_w);
        let question_pool_b = bind(&mut graph, &params.question_pool_b);
        let yesno_w = bind(&mut graph, &params.yesno_w);
        let yesno_b = bind(&mut graph, &params.yesno_b);
        let choice_hidden_w = bind(&mut graph, &params.choice_hidden_w);
        let choice_hidden_b = bind(&mut graph, &params.choice_hidden_b);
        let choice_out_w = bind(&mut graph, &params.choice_out_w);
        let choice_out_b = bind(&mut graph, &params.choice_out_b);
        Self {
            graph,
            params,
            embed,
            ctx,
            token_bilinear,
            sentence_bilinear,
            token_pool_w,
            token_pool_b,
            question_pool_w,
            question_pool_b,
            yesno_w,
            yesno_b,
            choice_hidden_w,
            choice_hidden_b,
            choice_out_w,
            choice_out_b,
        }
    }

    pub fn params(&self) -> &ReaderParams {
        self.params
    }

    /// Gradients in `slots()` order after a `backward` call on the graph.
    pub fn param_grads(&self) -> Vec<DenseArray> {
        self.graph.param_grads(&self.params.slot_shapes())
    }

    fn check_tokens(&self, tokens: &[usize], instance_id: &str, place: &str) -> Result<()> {
        if tokens.is_empty() {
            return Err(StmError::Data(format!(
                "instance {instance_id}: {place} is empty"
            )));
        }
        for &t in tokens {
            if t >= self.params.dims.vocab {
                return Err(StmError::Data(format!(
                    "instance {instance_id}: {place} token id {t} out of vocabulary of size {}",
                    self.params.dims.vocab
                )));
            }
        }
        Ok(())
    }

    /// Embeds one token sequence to `[len, d]`, applying the residual
    /// self-attention mixing layer when enabled.
    fn encode_sequence(&mut self, tokens: &[usize]) -> Result<NodeId> {
        let g = &mut self.graph;
        let x = g.gather_rows(self.embed, tokens)?;
        let Some((attn, value)) = self.ctx else {
            return Ok(x);
        };
        let xa = g.matmul(x, attn)?;
        let xt = g.transpose(x)?;
        let raw = g.matmul(xa, xt)?;
        let scaled = g.scale(raw, 1.0 / (self.params.dims.dim as f64).sqrt())?;
        let weights = g.softmax(scaled)?;
        let xv = g.matmul(x, value)?;
        let mixed = g.matmul(weights, xv)?;
        g.add(x, mixed)
    }

    /// Learned softmax pooling of the query tokens into `h^Q`.
    fn pool_question(&mut self, question_tokens: NodeId) -> Result<NodeId> {
        let g = &mut self.graph;
        let raw = g.matmul(question_tokens, self.question_pool_w)?;
        let scores = g.add(raw, self.question_pool_b)?;
        let weights = g.softmax(scores)?;
        g.matmul(weights, question_tokens)
    }

    /// Token-level attention over one sentence: the query-conditioned summary
    /// `h^D_i` and the self-pooled key `s^D_i`.
    fn token_attention(&mut self, question: NodeId, sentence_tokens: NodeId) -> Result<(NodeId, NodeId)> {
        let g = &mut self.graph;
        let q_proj = g.matmul(question, self.token_bilinear)?;
        let alpha_scores = g.matmul(sentence_tokens, q_proj)?;
        let alpha = g.softmax(alpha_scores)?;
        let summary = g.matmul(alpha, sentence_tokens)?;
        let beta_raw = g.matmul(sentence_tokens, self.token_pool_w)?;
        let beta_scores = g.add(beta_raw, self.token_pool_b)?;
        let beta = g.softmax(beta_scores)?;
        let key = g.matmul(beta, sentence_tokens)?;
        Ok((summary, key))
    }

    /// Sentence-level attention: raw scores, their softmax, and the attended
    /// document summary.
    fn sentence_attention(
        &mut self,
        question: NodeId,
        keys: NodeId,
        summaries: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let g = &mut self.graph;
        let q_proj = g.matmul(question, self.sentence_bilinear)?;
        let scores = g.matmul(keys, q_proj)?;
        let gamma = g.softmax(scores)?;
        let summary = g.matmul(gamma, summaries)?;
        Ok((scores, gamma, summary))
    }

    /// Full hierarchical encoding of one instance against `query_tokens`.
    pub fn encode(&mut self, instance: &Instance, query_tokens: &[usize]) -> Result<EncodedInstance> {
        self.check_tokens(query_tokens, &instance.id, "query")?;
        if instance.sentences.is_empty() {
            return Err(StmError::Data(format!(
                "instance {}: document has no sentences",
                instance.id
            )));
        }
        let question_tokens = self.encode_sequence(query_tokens)?;
        let question = self.pool_question(question_tokens)?;
        let mut sentence_tokens = Vec::with_capacity(instance.sentences.len());
        let mut summaries = Vec::with_capacity(instance.sentences.len());
        let mut keys = Vec::with_capacity(instance.sentences.len());
        for (i, sent) in instance.sentences.iter().enumerate() {
            self.check_tokens(sent, &instance.id, &format!("sentence {i}"))?;
            let toks = self.encode_sequence(sent)?;
            sentence_tokens.push(toks);
            let (summary, key) = self.token_attention(question, toks)?;
            summaries.push(summary);
            keys.push(key);
        }
        let token_summaries = self.graph.stack_rows(&summaries)?;
        let sentence_keys = self.graph.stack_rows(&keys)?;
        let (sentence_scores, gamma, summary) =
            self.sentence_attention(question, sentence_keys, token_summaries)?;
        Ok(EncodedInstance {
            question_tokens,
            question,
            sentence_tokens,
            token_summaries,
            sentence_keys,
            sentence_scores,
            gamma,
            summary,
        })
    }

    /// `(P(No), P(Yes))` from an encoded instance.
    pub fn predict_yesno(&mut self, encoding: &EncodedInstance) -> Result<NodeId> {
        let g = &mut self.graph;
        let raw = g.matmul(self.yesno_w, encoding.summary)?;
        let logits = g.add(raw, self.yesno_b)?;
        g.softmax(logits)
    }

    /// Distribution over options; each option re-encodes the document with
    /// the option tokens appended to the question.
    pub fn predict_multichoice(
        &mut self,
        instance: &Instance,
    ) -> Result<(NodeId, Vec<EncodedInstance>)> {
        let options = instance.options.as_ref().ok_or_else(|| {
            StmError::Data(format!("instance {}: multichoice requires options", instance.id))
        })?;
        if options.len() < 2 {
            return Err(StmError::Data(format!(
                "instance {}: need at least 2 options, got {}",
                instance.id,
                options.len()
            )));
        }
        let mut encodings = Vec::with_capacity(options.len());
        let mut scores = Vec::with_capacity(options.len());
        for opt in options {
            let mut query = instance.question.clone();
            query.extend_from_slice(opt);
            let enc = self.encode(instance, &query)?;
            let g = &mut self.graph;
            let hidden_raw = g.matmul(self.choice_hidden_w, enc.summary)?;
            let hidden_shift = g.add(hidden_raw, self.choice_hidden_b)?;
            let hidden = g.relu(hidden_shift)?;
            let out_raw = g.matmul(self.choice_out_w, hidden)?;
            let score = g.add(out_raw, self.choice_out_b)?;
            scores.push(score);
            encodings.push(enc);
        }
        let joined = self.graph.concat(&scores)?;
        let probs = self.graph.softmax(joined)?;
        Ok((probs, encodings))
    }

    /// Dispatches on task kind. Multi-choice evidence scores come from the
    /// gold option's encoding, matching how evidence labels are generated.
    pub fn predict(&mut self, instance: &Instance) -> Result<Prediction> {
        match &instance.options {
            None => {
                let enc = self.encode(instance, &instance.question)?;
                let probs = self.predict_yesno(&enc)?;
                let (evidence_scores, gamma) = (enc.sentence_scores, enc.gamma);
                Ok(Prediction { probs, encodings: vec![enc], evidence_scores, gamma })
            }
            Some(options) => {
                if instance.answer >= options.len() {
                    return Err(StmError::Data(format!(
                        "instance {}: answer {} out of range for {} options",
                        instance.id,
                        instance.answer,
                        options.len()
                    )));
                }
                let (probs, encodings) = self.predict_multichoice(instance)?;
                let gold = &encodings[instance.answer];
                let (evidence_scores, gamma) = (gold.sentence_scores, gold.gamma);
                Ok(Prediction { probs, encodings, evidence_scores, gamma })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusConfig};

    fn dims(vocab: usize, dim: usize, ctx: bool) -> ReaderDims {
        ReaderDims { vocab, dim, contextualizer: ctx }
    }

    fn yesno_instance(question: Vec<usize>, sentences: Vec<Vec<usize>>) -> Instance {
        Instance {
            id: "t-000000".into(),
            question,
            sentences,
            options: None,
            answer: 0,
            gold_evidence: None,
            pseudo_evidence: None,
            confidence: None,
        }
    }

    // ── straight-line re-implementation used as a forward oracle ───────

    fn softmax_plain(xs: &[f64]) -> Vec<f64> {
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let es: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = es.iter().sum();
        es.iter().map(|&e| e / z).collect()
    }

    fn row_times_mat(row: &[f64], mat: &DenseArray) -> Vec<f64> {
        let (r, c) = (mat.shape()[0], mat.shape()[1]);
        assert_eq!(row.len(), r);
        let mut out = vec![0.0; c];
        for (i, &x) in row.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&mat.values()[i * c..(i + 1) * c]) {
                *o += x * w;
            }
        }
        out
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x * y).sum()
    }

    fn encode_seq_plain(p: &ReaderParams, toks: &[usize]) -> Vec<Vec<f64>> {
        let d = p.dims.dim;
        let x: Vec<Vec<f64>> =
            toks.iter().map(|&t| p.embed.values()[t * d..(t + 1) * d].to_vec()).collect();
        let Some(ctx) = &p.contextualizer else { return x };
        let l = x.len();
        let xa: Vec<Vec<f64>> = x.iter().map(|r| row_times_mat(r, &ctx.attn)).collect();
        let xv: Vec<Vec<f64>> = x.iter().map(|r| row_times_mat(r, &ctx.value)).collect();
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Vec::with_capacity(l);
        for i in 0..l {
            let scores: Vec<f64> = (0..l).map(|j| dot(&xa[i], &x[j]) * scale).collect();
            let a = softmax_plain(&scores);
            let mut row = x[i].clone();
            for j in 0..l {
                for k in 0..d {
                    row[k] += a[j] * xv[j][k];
                }
            }
            out.push(row);
        }
        out
    }

    fn pool_plain(rows: &[Vec<f64>], w: &DenseArray, b: f64) -> Vec<f64> {
        let scores: Vec<f64> = rows.iter().map(|r| dot(r, w.values()) + b).collect();
        let ws = softmax_plain(&scores);
        let mut out = vec![0.0; rows[0].len()];
        for (wi, r) in ws.iter().zip(rows) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += wi * v;
            }
        }
        out
    }

    struct PlainForward {
        probs: Vec<f64>,
        gamma: Vec<f64>,
        scores: Vec<f64>,
        summary: Vec<f64>,
    }

    fn straight_line_yesno(p: &ReaderParams, inst: &Instance) -> PlainForward {
        let q_rows = encode_seq_plain(p, &inst.question);
        let hq = pool_plain(&q_rows, &p.question_pool_w, p.question_pool_b.values()[0]);
        let q_tok_proj = row_times_mat(&hq, &p.token_bilinear);
        let q_sent_proj = row_times_mat(&hq, &p.sentence_bilinear);
        let mut keys = Vec::new();
        let mut summaries = Vec::new();
        for sent in &inst.sentences {
            let rows = encode_seq_plain(p, sent);
            let alpha_scores: Vec<f64> = rows.iter().map(|r| dot(r, &q_tok_proj)).collect();
            let alpha = softmax_plain(&alpha_scores);
            let mut summary = vec![0.0; p.dims.dim];
            for (a, r) in alpha.iter().zip(&rows) {
                for (s, &v) in summary.iter_mut().zip(r) {
                    *s += a * v;
                }
            }
            summaries.push(summary);
            keys.push(pool_plain(&rows, &p.token_pool_w, p.token_pool_b.values()[0]));
        }
        let scores: Vec<f64> = keys.iter().map(|k| dot(&q_sent_proj, k)).collect();
        let gamma = softmax_plain(&scores);
        let mut summary = vec![0.0; p.dims.dim];
        for (g, s) in gamma.iter().zip(&summaries) {
            for (o, &v) in summary.iter_mut().zip(s) {
                *o += g * v;
            }
        }
        let d = p.dims.dim;
        let logits: Vec<f64> = (0..2)
            .map(|c| dot(&p.yesno_w.values()[c * d..(c + 1) * d], &summary) + p.yesno_b.values()[c])
            .collect();
        PlainForward { probs: softmax_plain(&logits), gamma, scores, summary }
    }

    // ── tests ───────────────────────────────────────────────────────────

    #[test]
    fn init_is_deterministic_and_bounded() {
        let d = dims(12, 6, true);
        let a = ReaderParams::init(d, 42);
        let b = ReaderParams::init(d, 42);
        let c = ReaderParams::init(d, 43);
        assert_eq!(a.embed, b.embed);
        assert_ne!(a.embed, c.embed);
        for slot in a.slots() {
            for &v in slot.values() {
                assert!(v.abs() <= INIT_RANGE);
            }
        }
        assert_eq!(a.slots().len(), a.slot_names().len());
    }

    #[test]
    fn bilinear_score_matches_hand_value() {
        let mut g = Graph::new();
        let x = g.constant(DenseArray::vector(vec![1.0, 2.0]));
        let y = g.constant(DenseArray::vector(vec![3.0, 4.0]));
        let w = g.constant(DenseArray::matrix(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap());
        let s = bilinear_score(&mut g, x, w, y).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 17.0);
    }

    #[test]
    fn bilinear_identity_is_dot_and_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(DenseArray::vector(vec![1.0, 2.0]));
        let y = g.constant(DenseArray::vector(vec![3.0, 4.0]));
        let eye = g.constant(DenseArray::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero = g.constant(DenseArray::zeros(vec![2, 2]));
        let s_eye = bilinear_score(&mut g, x, eye, y).unwrap();
        let s_zero = bilinear_score(&mut g, x, zero, y).unwrap();
        assert_eq!(g.value(s_eye).item().unwrap(), 11.0);
        assert_eq!(g.value(s_zero).item().unwrap(), 0.0);
    }

    #[test]
    fn zero_params_give_uniform_yesno() {
        let params = ReaderParams::zeros(dims(8, 4, false));
        let inst = yesno_instance(vec![1, 2], vec![vec![3, 4], vec![5]]);
        let mut reader = Reader::new(&params);
        let pred = reader.predict(&inst).unwrap();
        assert_eq!(reader.graph.value(pred.probs).values(), &[0.5, 0.5]);
    }

    #[test]
    fn rigged_logits_give_quarter_three_quarters() {
        let mut params = ReaderParams::zeros(dims(2, 1, false));
        params.embed.values_mut()[0] = 1.0;
        params.yesno_w.values_mut()[1] = 3f64.ln();
        let inst = yesno_instance(vec![0], vec![vec![0]]);
        let mut reader = Reader::new(&params);
        let pred = reader.predict(&inst).unwrap();
        let probs = reader.graph.value(pred.probs).values();
        assert!((probs[0] - 0.25).abs() < 1e-12);
        assert!((probs[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn random_yesno_probs_are_distributions() {
        let cfg = CorpusConfig {
            instances: 20,
            sentences_per_doc: 4,
            sentence_len: 5,
            vocab_size: 50,
            key_tokens: 6,
            ..CorpusConfig::default()
        };
        let data = generate(&cfg).unwrap();
        for seed in 0..5u64 {
            let params = ReaderParams::init(dims(50, 8, true), seed);
            let mut reader = Reader::new(&params);
            for inst in &data {
                let pred = reader.predict(inst).unwrap();
                let probs = reader.graph.value(pred.probs).values();
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn identical_options_are_uniform() {
        let params = ReaderParams::init(dims(20, 6, true), 9);
        let mut inst = yesno_instance(vec![1, 2], vec![vec![3, 4], vec![5, 6]]);
        inst.options = Some(vec![vec![7, 8], vec![7, 8], vec![7, 8]]);
        let mut reader = Reader::new(&params);
        let pred = reader.predict(&inst).unwrap();
        let probs = reader.graph.value(pred.probs).values();
        for &p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multichoice_requires_two_options() {
        let params = ReaderParams::init(dims(20, 4, false), 1);
        let mut inst = yesno_instance(vec![1], vec![vec![2]]);
        inst.options = Some(vec![vec![3]]);
        let mut reader = Reader::new(&params);
        assert!(matches!(reader.predict_multichoice(&inst), Err(StmError::Data(_))));
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let cfg = CorpusConfig {
            instances: 12,
            sentences_per_doc: 5,
            sentence_len: 6,
            vocab_size: 60,
            key_tokens: 8,
            ..CorpusConfig::default()
        };
        let data = generate(&cfg).unwrap();
        for ctx in [false, true] {
            for (i, inst) in data.iter().enumerate() {
                let params = ReaderParams::init(dims(60, 7, ctx), i as u64);
                let mut reader = Reader::new(&params);
                let pred = reader.predict(inst).unwrap();
                let plain = straight_line_yesno(&params, inst);
                let enc = &pred.encodings[0];
                let got_probs = reader.graph.value(pred.probs).values();
                let got_gamma = reader.graph.value(pred.gamma).values();
                let got_scores = reader.graph.value(enc.sentence_scores).values();
                let got_summary = reader.graph.value(enc.summary).values();
                for (g, e) in got_probs.iter().zip(&plain.probs) {
                    assert!((g - e).abs() < 1e-9, "probs {g} vs {e}");
                }
                for (g, e) in got_gamma.iter().zip(&plain.gamma) {
                    assert!((g - e).abs() < 1e-9);
                }
                for (g, e) in got_scores.iter().zip(&plain.scores) {
                    assert!((g - e).abs() < 1e-9);
                }
                for (g, e) in got_summary.iter().zip(&plain.summary) {
                    assert!((g - e).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn sentence_permutation_permutes_gamma_and_keeps_summary() {
        let params = ReaderParams::init(dims(40, 6, true), 5);
        let base = yesno_instance(
            vec![1, 2, 3],
            vec![vec![4, 5, 6], vec![7, 8], vec![9, 10, 11], vec![12]],
        );
        let mut permuted = base.clone();
        permuted.sentences = vec![
            base.sentences[2].clone(),
            base.sentences[0].clone(),
            base.sentences[3].clone(),
            base.sentences[1].clone(),
        ];
        let perm = [2usize, 0, 3, 1];
        let mut r1 = Reader::new(&params);
        let p1 = r1.predict(&base).unwrap();
        let mut r2 = Reader::new(&params);
        let p2 = r2.predict(&permuted).unwrap();
        let g1 = r1.graph.value(p1.gamma).values();
        let g2 = r2.graph.value(p2.gamma).values();
        for (new_pos, &old_pos) in perm.iter().enumerate() {
            assert!((g2[new_pos] - g1[old_pos]).abs() < 1e-12);
        }
        let s1 = r1.graph.value(p1.encodings[0].summary).values();
        let s2 = r2.graph.value(p2.encodings[0].summary).values();
        for (a, b) in s1.iter().zip(s2) {
            assert!((a - b).abs() < 1e-12);
        }
        let pr1 = r1.graph.value(p1.probs).values();
        let pr2 = r2.graph.value(p2.probs).values();
        for (a, b) in pr1.iter().zip(pr2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn oov_token_is_data_error_naming_instance() {
        let params = ReaderParams::init(dims(10, 4, false), 1);
        let inst = yesno_instance(vec![1], vec![vec![2, 99]]);
        let mut reader = Reader::new(&params);
        match reader.predict(&inst) {
            Err(StmError::Data(msg)) => {
                assert!(msg.contains("t-000000"), "{msg}");
                assert!(msg.contains("99"), "{msg}");
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn empty_sentence_is_data_error() {
        let params = ReaderParams::init(dims(10, 4, false), 1);
        let inst = yesno_instance(vec![1], vec![vec![2], vec![]]);
        let mut reader = Reader::new(&params);
        assert!(matches!(reader.predict(&inst), Err(StmError::Data(_))));
    }

    #[test]
    fn single_sentence_gets_full_attention() {
        let params = ReaderParams::init(dims(10, 4, true), 3);
        let inst = yesno_instance(vec![1, 2], vec![vec![3, 4, 5]]);
        let mut reader = Reader::new(&params);
        let pred = reader.predict(&inst).unwrap();
        assert_eq!(reader.graph.value(pred.gamma).values(), &[1.0]);
    }

    #[test]
    fn single_token_sentence_summary_is_token_vector() {
        let params = ReaderParams::init(dims(10, 4, false), 3);
        let inst = yesno_instance(vec![1], vec![vec![7]]);
        let mut reader = Reader::new(&params);
        let pred = reader.predict(&inst).unwrap();
        let enc = &pred.encodings[0];
        let row = reader.graph.value(enc.token_summaries).values();
        let d = 4;
        let expect = &params.embed.values()[7 * d..8 * d];
        for (a, b) in row.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn without_contextualizer_tokens_are_embedding_rows() {
        let params = ReaderParams::init(dims(10, 3, false), 2);
        let inst = yesno_instance(vec![4, 6], vec![vec![1]]);
        let mut reader = Reader::new(&params);
        let enc = reader.encode(&inst, &inst.question).unwrap();
        let rows = reader.graph.value(enc.question_tokens).values();
        assert_eq!(&rows[..3], &params.embed.values()[4 * 3..5 * 3]);
        assert_eq!(&rows[3..], &params.embed.values()[6 * 3..7 * 3]);
    }
}
