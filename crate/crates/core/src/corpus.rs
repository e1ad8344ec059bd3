//! Synthetic reading-comprehension corpora with planted evidence, plus JSON
//! Lines ingestion and deterministic splitting.
//!
//! Each generated instance plants its question's key token inside
//! `evidence_count` evidence sentences, adjacent to a value token that
//! determines the answer. Decoy sentences repeat the key without any value
//! token, so lexical overlap alone cannot separate evidence from decoys.
//! Remaining sentences mix other keys, stray value tokens, and fillers, so
//! neither key presence nor value presence alone marks evidence: only the
//! key/value pair for the asked key answers the question.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StmError};
use crate::seeding::{derive_seed, STREAM_CORPUS, STREAM_SPLIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    YesNo,
    MultiChoice,
}

/// One reading-comprehension instance. `gold_evidence` is ground truth kept
/// for evaluation only; `pseudo_evidence` and `confidence` are runtime
/// self-training state and never serialized.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Instance {
    pub id: String,
    pub question: Vec<usize>,
    pub sentences: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<Vec<usize>>>,
    pub answer: usize,
    #[serde(rename = "evidence", skip_serializing_if = "Option::is_none")]
    pub gold_evidence: Option<Vec<usize>>,
    #[serde(skip)]
    pub pseudo_evidence: Option<Vec<u8>>,
    #[serde(skip)]
    pub confidence: Option<f64>,
}

impl Instance {
    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn num_answer_classes(&self) -> usize {
        match &self.options {
            Some(opts) => opts.len(),
            None => 2,
        }
    }

    /// Structural invariants; `vocab_size` bounds token ids when known.
    pub fn validate(&self, vocab_size: Option<usize>) -> Result<()> {
        let fail = |field: &str, msg: String| {
            Err(StmError::Data(format!("instance {}: {field}: {msg}", self.id)))
        };
        if self.question.is_empty() {
            return fail("question", "empty token list".into());
        }
        if self.sentences.is_empty() {
            return fail("sentences", "document has no sentences".into());
        }
        for (i, s) in self.sentences.iter().enumerate() {
            if s.is_empty() {
                return fail("sentences", format!("sentence {i} is empty"));
            }
        }
        if let Some(opts) = &self.options {
            if opts.len() < 2 {
                return fail("options", format!("need at least 2 options, got {}", opts.len()));
            }
            for (i, o) in opts.iter().enumerate() {
                if o.is_empty() {
                    return fail("options", format!("option {i} is empty"));
                }
            }
        }
        if self.answer >= self.num_answer_classes() {
            return fail(
                "answer",
                format!("label {} out of range for {} classes", self.answer, self.num_answer_classes()),
            );
        }
        if let Some(ev) = &self.gold_evidence {
            if ev.is_empty() {
                return fail("evidence", "empty evidence list".into());
            }
            for &e in ev {
                if e >= self.sentences.len() {
                    return fail(
                        "evidence",
                        format!("sentence index {e} out of range for {} sentences", self.sentences.len()),
                    );
                }
            }
        }
        if let Some(v) = vocab_size {
            let check = |toks: &[usize], place: &str| -> Result<()> {
                for &t in toks {
                    if t >= v {
                        return fail(place, format!("token id {t} out of vocabulary of size {v}"));
                    }
                }
                Ok(())
            };
            check(&self.question, "question")?;
            for s in &self.sentences {
                check(s, "sentences")?;
            }
            for o in self.options.iter().flatten() {
                check(o, "options")?;
            }
        }
        Ok(())
    }
}

/// Token-string to id mapping, written next to generated corpora.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<&str, usize> =
            self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let mut bytes = serde_json::to_vec_pretty(&map)?;
        bytes.push(b'\n');
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let map: BTreeMap<String, usize> = serde_json::from_str(&text)?;
        let size = map.len();
        let mut tokens = vec![String::new(); size];
        for (tok, id) in map {
            if id >= size {
                return Err(StmError::Data(format!(
                    "vocabulary id {id} out of range for {size} tokens"
                )));
            }
            tokens[id] = tok;
        }
        if tokens.iter().any(String::is_empty) {
            return Err(StmError::Data("vocabulary ids are not contiguous from 0".into()));
        }
        Ok(Self { tokens })
    }
}

fn default_task() -> TaskKind {
    TaskKind::YesNo
}
fn default_instances() -> usize {
    2500
}
fn default_sentences() -> usize {
    10
}
fn default_sentence_len() -> usize {
    2
}
fn default_question_len() -> usize {
    4
}
fn default_vocab_size() -> usize {
    20
}
fn default_key_tokens() -> usize {
    10
}
fn default_options() -> usize {
    4
}
fn default_decoy_rate() -> f64 {
    0.3
}
fn default_noise_rate() -> f64 {
    0.1
}
fn default_evidence_count() -> usize {
    1
}
fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default = "default_task")]
    pub task: TaskKind,
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_sentences")]
    pub sentences_per_doc: usize,
    #[serde(default = "default_sentence_len")]
    pub sentence_len: usize,
    #[serde(default = "default_question_len")]
    pub question_len: usize,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_key_tokens")]
    pub key_tokens: usize,
    #[serde(default = "default_options")]
    pub options: usize,
    #[serde(default = "default_decoy_rate")]
    pub decoy_rate: f64,
    #[serde(default = "default_noise_rate")]
    pub noise_rate: f64,
    #[serde(default = "default_evidence_count")]
    pub evidence_count: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config deserializes")
    }
}

impl CorpusConfig {
    fn num_values(&self) -> usize {
        match self.task {
            TaskKind::YesNo => 2,
            TaskKind::MultiChoice => self.options,
        }
    }

    /// First filler token id; keys occupy `[0, key_tokens)` and value tokens
    /// `[key_tokens, key_tokens + num_values)`.
    fn filler_base(&self) -> usize {
        self.key_tokens + self.num_values()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(StmError::Config(format!("infeasible corpus config: {msg}")));
        if self.sentences_per_doc == 0 {
            return err("sentences_per_doc must be at least 1".into());
        }
        if self.sentence_len < 2 {
            return err("sentence_len must be at least 2 to fit a key/value pair".into());
        }
        if self.question_len == 0 {
            return err("question_len must be at least 1".into());
        }
        if self.key_tokens < 2 {
            return err("key_tokens must be at least 2".into());
        }
        if self.evidence_count == 0 || self.evidence_count > self.sentences_per_doc {
            return err(format!(
                "evidence_count {} must be in 1..={}",
                self.evidence_count, self.sentences_per_doc
            ));
        }
        if self.task == TaskKind::MultiChoice && self.options < 2 {
            return err(format!("multichoice needs at least 2 options, got {}", self.options));
        }
        for (name, rate) in [("decoy_rate", self.decoy_rate), ("noise_rate", self.noise_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return err(format!("{name} {rate} must be in [0, 1]"));
            }
        }
        let min_vocab = self.filler_base() + 8;
        if self.vocab_size < min_vocab {
            return err(format!(
                "vocab_size {} too small; need at least {min_vocab} for keys, values and fillers",
                self.vocab_size
            ));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut tokens = Vec::with_capacity(self.vocab_size);
        for k in 0..self.key_tokens {
            tokens.push(format!("key{k:03}"));
        }
        match self.task {
            TaskKind::YesNo => {
                tokens.push("val_no".into());
                tokens.push("val_yes".into());
            }
            TaskKind::MultiChoice => {
                for o in 0..self.options {
                    tokens.push(format!("opt{o}"));
                }
            }
        }
        for f in 0..self.vocab_size - self.filler_base() {
            tokens.push(format!("filler{f:03}"));
        }
        Vocabulary::new(tokens)
    }
}

/// Generates the full corpus. Instance `i` depends only on `(config.seed, i)`,
/// so corpora are reproducible and extendable.
pub fn generate(cfg: &CorpusConfig) -> Result<Vec<Instance>> {
    cfg.validate()?;
    Ok((0..cfg.instances).map(|i| generate_instance(cfg, i)).collect())
}

/// Chances that a non-evidence, non-decoy sentence mentions an unasked key
/// and that it carries a stray value token.
const OTHER_KEY_RATE: f64 = 0.2;
const BARE_VALUE_RATE: f64 = 0.2;

fn generate_instance(cfg: &CorpusConfig, index: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_CORPUS, index as u64));
    let m = cfg.sentences_per_doc;
    let n_values = cfg.num_values();
    let filler_lo = cfg.filler_base();
    let filler = |rng: &mut ChaCha8Rng| rng.gen_range(filler_lo..cfg.vocab_size);

    let key = rng.gen_range(0..cfg.key_tokens);
    let answer = rng.gen_range(0..n_values);

    // evidence slots and their value tokens; a strict majority carries the
    // answer value so the label stays a deterministic function of the plant
    let mut slots: Vec<usize> = (0..m).collect();
    slots.shuffle(&mut rng);
    let mut evidence: Vec<usize> = slots[..cfg.evidence_count].to_vec();
    evidence.sort_unstable();
    let majority = cfg.evidence_count / 2 + 1;
    let mut planted_values = Vec::with_capacity(cfg.evidence_count);
    for i in 0..cfg.evidence_count {
        if i < majority {
            planted_values.push(answer);
        } else {
            let mut other = rng.gen_range(0..n_values - 1);
            if other >= answer {
                other += 1;
            }
            planted_values.push(other);
        }
    }
    planted_values.shuffle(&mut rng);

    let mut question = Vec::with_capacity(cfg.question_len);
    let key_pos = rng.gen_range(0..cfg.question_len);
    for p in 0..cfg.question_len {
        if p == key_pos {
            question.push(key);
        } else {
            question.push(filler(&mut rng));
        }
    }

    let mut sentences = Vec::with_capacity(m);
    let mut planted_iter = 0usize;
    for i in 0..m {
        let mut sent: Vec<usize> = (0..cfg.sentence_len).map(|_| filler(&mut rng)).collect();
        if evidence.contains(&i) {
            let value_token = cfg.key_tokens + planted_values[planted_iter];
            planted_iter += 1;
            let pos = rng.gen_range(0..cfg.sentence_len - 1);
            sent[pos] = key;
            sent[pos + 1] = value_token;
            if rng.gen_bool(cfg.noise_rate) {
                let drop_key = rng.gen_bool(0.5);
                let drop_pos = if drop_key { pos } else { pos + 1 };
                sent[drop_pos] = filler(&mut rng);
            }
        } else if rng.gen_bool(cfg.decoy_rate) {
            let pos = rng.gen_range(0..cfg.sentence_len);
            sent[pos] = key;
        } else {
            let has_key = rng.gen_bool(OTHER_KEY_RATE);
            let has_value = rng.gen_bool(BARE_VALUE_RATE);
            let key_pos = rng.gen_range(0..cfg.sentence_len);
            if has_key {
                let mut other_key = rng.gen_range(0..cfg.key_tokens - 1);
                if other_key >= key {
                    other_key += 1;
                }
                sent[key_pos] = other_key;
            }
            if has_value {
                let mut value_pos = rng.gen_range(0..cfg.sentence_len - 1);
                if value_pos >= key_pos {
                    value_pos += 1;
                }
                sent[value_pos] = cfg.key_tokens + rng.gen_range(0..n_values);
            }
        }
        sentences.push(sent);
    }

    let options = match cfg.task {
        TaskKind::YesNo => None,
        TaskKind::MultiChoice => Some(
            (0..cfg.options)
                .map(|o| vec![cfg.key_tokens + o, filler(&mut rng)])
                .collect(),
        ),
    };

    let prefix = match cfg.task {
        TaskKind::YesNo => "yn",
        TaskKind::MultiChoice => "mc",
    };
    Instance {
        id: format!("{prefix}-{index:06}"),
        question,
        sentences,
        options,
        answer,
        gold_evidence: Some(evidence),
        pseudo_evidence: None,
        confidence: None,
    }
}

// ── JSON Lines I/O ──────────────────────────────────────────────────────

#[derive(Deserialize)]
#[serde(untagged)]
enum Tok {
    Id(usize),
    Text(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    id: String,
    question: Vec<Tok>,
    sentences: Vec<Vec<Tok>>,
    #[serde(default)]
    options: Option<Vec<Vec<Tok>>>,
    answer: usize,
    #[serde(default)]
    evidence: Option<Vec<usize>>,
}

fn resolve_tokens(
    toks: Vec<Tok>,
    vocab: Option<&Vocabulary>,
    line: usize,
    id: &str,
) -> Result<Vec<usize>> {
    toks.into_iter()
        .map(|t| match t {
            Tok::Id(i) => Ok(i),
            Tok::Text(s) => match vocab.and_then(|v| v.id_of(&s)) {
                Some(i) => Ok(i),
                None => Err(StmError::Data(format!(
                    "line {line}: instance {id}: token {s:?} not in vocabulary"
                ))),
            },
        })
        .collect()
}

/// Reads instances from JSON Lines. Tokens may be ids, or strings resolved
/// through `vocab`. Errors carry the 1-based line number.
pub fn load_jsonl(path: &Path, vocab: Option<&Vocabulary>) -> Result<Vec<Instance>> {
    let file = fs::File::open(path).map_err(|e| {
        StmError::Data(format!("cannot open corpus {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(&line)
            .map_err(|e| StmError::Data(format!("line {lineno}: {e}")))?;
        let inst = Instance {
            question: resolve_tokens(raw.question, vocab, lineno, &raw.id)?,
            sentences: raw
                .sentences
                .into_iter()
                .map(|s| resolve_tokens(s, vocab, lineno, &raw.id))
                .collect::<Result<_>>()?,
            options: raw
                .options
                .map(|os| {
                    os.into_iter()
                        .map(|o| resolve_tokens(o, vocab, lineno, &raw.id))
                        .collect::<Result<Vec<_>>>()
                })
                .transpose()?,
            answer: raw.answer,
            gold_evidence: raw.evidence,
            pseudo_evidence: None,
            confidence: None,
            id: raw.id,
        };
        inst.validate(vocab.map(|v| v.size()))
            .map_err(|e| StmError::Data(format!("line {lineno}: {e}")))?;
        out.push(inst);
    }
    Ok(out)
}

/// Serializes instances as JSON Lines via a temp file and rename.
pub fn save_jsonl(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut bytes = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut bytes, inst)?;
        bytes.push(b'\n');
    }
    atomic_write(path, &bytes)
}

/// Writes `bytes` to `path` through a sibling temp file so readers never see
/// a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path)
        .map_err(|e| StmError::Io(e.error))?;
    Ok(())
}

/// Deterministic shuffle-then-partition into train and dev. `train_fraction`
/// must lie in `(0, 1]`; the dev split takes the remainder.
pub fn split(
    data: &[Instance],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Instance>, Vec<Instance>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(StmError::Config(format!(
            "train_fraction {train_fraction} must be in (0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPLIT, 0));
    order.shuffle(&mut rng);
    let n_train = ((data.len() as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(usize::from(!data.is_empty()), data.len());
    let (train_idx, dev_idx) = order.split_at(n_train);
    let pick = |idx: &[usize]| {
        let mut sorted: Vec<usize> = idx.to_vec();
        sorted.sort_unstable();
        sorted.iter().map(|&i| data[i].clone()).collect::<Vec<_>>()
    };
    Ok((pick(train_idx), pick(dev_idx)))
}
