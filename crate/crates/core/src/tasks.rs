//! Formal-language tasks (parity, modular arithmetic), curricula and
//! scaled-accuracy evaluation, plus a character corpus for smoke training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::model::{train_step_accum, Batch, Model, ModelConfig, Readout};
use crate::rng::Rng;

pub const DEFAULT_MODULUS: usize = 5;

/// Operator and bracket tokens sit right after the digits `0..m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Symbol {
    Digit(usize),
    Plus,
    Minus,
    Times,
    Open,
    Close,
}

impl Symbol {
    pub fn token(self, modulus: usize) -> usize {
        match self {
            Symbol::Digit(d) => d,
            Symbol::Plus => modulus,
            Symbol::Minus => modulus + 1,
            Symbol::Times => modulus + 2,
            Symbol::Open => modulus + 3,
            Symbol::Close => modulus + 4,
        }
    }

    pub fn from_token(t: usize, modulus: usize) -> Option<Self> {
        Some(match t.checked_sub(modulus) {
            None => Symbol::Digit(t),
            Some(0) => Symbol::Plus,
            Some(1) => Symbol::Minus,
            Some(2) => Symbol::Times,
            Some(3) => Symbol::Open,
            Some(4) => Symbol::Close,
            Some(_) => return None,
        })
    }

    fn glyph(self) -> String {
        match self {
            Symbol::Digit(d) => d.to_string(),
            Symbol::Plus => "+".into(),
            Symbol::Minus => "-".into(),
            Symbol::Times => "*".into(),
            Symbol::Open => "(".into(),
            Symbol::Close => ")".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Parity,
    ModArith,
    ModArithBrackets,
}

impl Task {
    pub fn vocab_size(self) -> usize {
        match self {
            Task::Parity => 2,
            Task::ModArith | Task::ModArithBrackets => DEFAULT_MODULUS + 5,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Task::Parity => 2,
            Task::ModArith | Task::ModArithBrackets => DEFAULT_MODULUS,
        }
    }

    /// Length actually generated for a requested `len`; expressions have
    /// odd length.
    pub fn realized_len(self, len: usize) -> usize {
        match self {
            Task::Parity => len.max(1),
            _ => {
                let l = len.max(1);
                l - (1 - l % 2)
            }
        }
    }

    pub fn generate(self, rng: &mut Rng, len: usize) -> Result<TaskInstance> {
        match self {
            Task::Parity => gen_parity(rng, len),
            Task::ModArith => gen_modarith(rng, self.realized_len(len), DEFAULT_MODULUS, false),
            Task::ModArithBrackets => gen_modarith(rng, self.realized_len(len), DEFAULT_MODULUS, true),
        }
    }

    pub fn label_of(self, tokens: &[usize]) -> Result<usize> {
        match self {
            Task::Parity => Ok(parity_label(tokens)),
            _ => eval_modarith(tokens, DEFAULT_MODULUS),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Parity => "parity",
            Task::ModArith => "modarith",
            Task::ModArithBrackets => "modarith_brackets",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parity" => Ok(Task::Parity),
            "modarith" | "mod_arith" => Ok(Task::ModArith),
            "modarith_brackets" | "mod_arith_brackets" => Ok(Task::ModArithBrackets),
            _ => Err(Error::Parameter(format!(
                "unknown task `{s}` (parity, modarith, modarith_brackets)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl TaskInstance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn parity_label(tokens: &[usize]) -> usize {
    tokens.iter().sum::<usize>() % 2
}

pub fn gen_parity(rng: &mut Rng, length: usize) -> Result<TaskInstance> {
    if length == 0 {
        return Err(Error::Parameter("parity length must be ≥ 1".into()));
    }
    let tokens: Vec<usize> = (0..length).map(|_| usize::from(rng.bernoulli(0.5))).collect();
    Ok(TaskInstance {
        label: parity_label(&tokens),
        tokens,
    })
}

fn random_op(rng: &mut Rng) -> Symbol {
    [Symbol::Plus, Symbol::Minus, Symbol::Times][rng.int_in(0, 2)]
}

/// Random expression of exactly `len` (odd) tokens. Brackets wrap a
/// sub-expression with probability ¼ at every node that has room.
fn gen_expr(rng: &mut Rng, len: usize, modulus: usize, brackets: bool, out: &mut Vec<Symbol>) {
    if len == 1 {
        out.push(Symbol::Digit(rng.int_in(0, modulus - 1)));
        return;
    }
    if brackets && rng.bernoulli(0.25) {
        out.push(Symbol::Open);
        gen_expr(rng, len - 2, modulus, brackets, out);
        out.push(Symbol::Close);
        return;
    }
    // left operand takes an odd share of the remaining len-1 tokens
    let left = 2 * rng.int_in(0, (len - 3) / 2) + 1;
    gen_expr(rng, left, modulus, brackets, out);
    out.push(random_op(rng));
    gen_expr(rng, len - 1 - left, modulus, brackets, out);
}

pub fn gen_modarith(rng: &mut Rng, length: usize, modulus: usize, brackets: bool) -> Result<TaskInstance> {
    if length % 2 == 0 || modulus < 2 {
        return Err(Error::Parameter(format!(
            "expression length must be odd and modulus ≥ 2 (got {length}, {modulus})"
        )));
    }
    let mut syms = Vec::with_capacity(length);
    if brackets {
        gen_expr(rng, length, modulus, true, &mut syms);
    } else {
        syms.push(Symbol::Digit(rng.int_in(0, modulus - 1)));
        while syms.len() < length {
            syms.push(random_op(rng));
            syms.push(Symbol::Digit(rng.int_in(0, modulus - 1)));
        }
    }
    let tokens: Vec<usize> = syms.iter().map(|s| s.token(modulus)).collect();
    let label = eval_modarith(&tokens, modulus)?;
    Ok(TaskInstance { tokens, label })
}

/// Value mod `modulus`, left to right within each bracket level.
pub fn eval_modarith(tokens: &[usize], modulus: usize) -> Result<usize> {
    let bad = |m: String| Err(Error::Parameter(format!("malformed expression: {m}")));
    // (accumulator, pending operator) per open bracket level
    let mut stack: Vec<(Option<usize>, Option<Symbol>)> = vec![(None, None)];
    let apply = |acc: Option<usize>, op: Option<Symbol>, v: usize| -> Option<usize> {
        let m = modulus as i64;
        match (acc, op) {
            (None, None) => Some(v),
            (Some(a), Some(op)) => {
                let (a, v) = (a as i64, v as i64);
                let r = match op {
                    Symbol::Plus => a + v,
                    Symbol::Minus => a - v,
                    _ => a * v,
                };
                Some(r.rem_euclid(m) as usize)
            }
            _ => None,
        }
    };
    for (i, &t) in tokens.iter().enumerate() {
        let Some(sym) = Symbol::from_token(t, modulus) else {
            return bad(format!("token {t} at {i} is outside the vocabulary"));
        };
        let top = stack.last_mut().expect("stack never empty");
        match sym {
            Symbol::Digit(d) => match apply(top.0, top.1, d) {
                Some(v) => *top = (Some(v), None),
                None => return bad(format!("operand without operator at {i}")),
            },
            Symbol::Plus | Symbol::Minus | Symbol::Times => {
                if top.0.is_none() || top.1.is_some() {
                    return bad(format!("operator without operand at {i}"));
                }
                top.1 = Some(sym);
            }
            Symbol::Open => {
                if top.0.is_some() && top.1.is_none() {
                    return bad(format!("bracket after operand at {i}"));
                }
                stack.push((None, None));
            }
            Symbol::Close => {
                let (inner, op) = stack.pop().expect("stack never empty");
                let (Some(v), None) = (inner, op) else {
                    return bad(format!("incomplete bracket at {i}"));
                };
                let Some(top) = stack.last_mut() else {
                    return bad(format!("unmatched `)` at {i}"));
                };
                match apply(top.0, top.1, v) {
                    Some(r) => *top = (Some(r), None),
                    None => return bad(format!("bracket after operand at {i}")),
                }
            }
        }
    }
    match stack.as_slice() {
        [(Some(v), None)] => Ok(*v),
        [_] => bad("dangling operator or empty expression".into()),
        _ => bad("unclosed bracket".into()),
    }
}

/// Stack check that brackets are balanced and never close below zero.
pub fn is_well_nested(tokens: &[usize], modulus: usize) -> bool {
    let mut depth = 0usize;
    for &t in tokens {
        match Symbol::from_token(t, modulus) {
            Some(Symbol::Open) => depth += 1,
            Some(Symbol::Close) => match depth.checked_sub(1) {
                Some(d) => depth = d,
                None => return false,
            },
            _ => {}
        }
    }
    depth == 0
}

pub fn render(tokens: &[usize], modulus: usize) -> String {
    tokens
        .iter()
        .map(|&t| Symbol::from_token(t, modulus).map_or("?".into(), Symbol::glyph))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `(acc − 1/k) / (1 − 1/k)`, clamped at 0.
pub fn scaled_accuracy(correct: usize, total: usize, num_classes: usize) -> Result<f64> {
    if total == 0 || num_classes < 2 || correct > total {
        return Err(Error::Parameter(format!(
            "scaled accuracy needs 0 ≤ correct ≤ total, total > 0, k ≥ 2 (got {correct}/{total}, k={num_classes})"
        )));
    }
    let chance = 1.0 / num_classes as f64;
    let acc = correct as f64 / total as f64;
    Ok(((acc - chance) / (1.0 - chance)).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub min_len: usize,
    /// Max training length per stage.
    pub stages: Vec<usize>,
    pub eval_len: usize,
    pub steps_per_stage: usize,
    pub batch_size: usize,
    pub eval_samples: usize,
    /// Loss is logged every this many steps.
    pub log_every: usize,
    /// Each step's batch is split into this many length-sorted pieces.
    pub length_buckets: usize,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            min_len: 3,
            stages: vec![40, 80, 120, 160],
            eval_len: 256,
            steps_per_stage: 2000,
            batch_size: 64,
            eval_samples: 512,
            log_every: 100,
            length_buckets: 4,
        }
    }
}

impl Curriculum {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(format!("curriculum: {m}")));
        if self.stages.is_empty() || self.steps_per_stage == 0 || self.batch_size == 0 || self.eval_samples == 0 {
            return bad("stages, steps, batch and eval samples must be non-empty");
        }
        if self.length_buckets == 0 || self.length_buckets > self.batch_size {
            return bad("length_buckets must be in 1..=batch_size");
        }
        if self.min_len == 0 || self.stages.iter().any(|&m| m < self.min_len) {
            return bad("min_len must be ≥ 1 and ≤ every stage max");
        }
        if self.stages.iter().any(|&m| m >= self.eval_len) {
            return bad("eval_len must exceed every training length");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub stage: usize,
    pub max_len: usize,
    pub train_loss: f64,
    pub eval_scaled_acc: Option<f64>,
}

pub const HISTORY_CSV_HEADER: &str = "step,stage,max_len,train_loss,eval_scaled_acc";

impl HistoryRow {
    pub fn csv_row(&self) -> String {
        let acc = self.eval_scaled_acc.map_or(String::new(), |a| format!("{a:.6}"));
        format!("{},{},{},{:.6},{}", self.step, self.stage, self.max_len, self.train_loss, acc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumResult {
    pub task: Task,
    pub lr: f64,
    pub history: Vec<HistoryRow>,
    pub final_scaled_acc: f64,
    /// Set when training stopped on a numerical fault.
    pub aborted: Option<String>,
}

impl CurriculumResult {
    pub fn history_csv(&self) -> String {
        let mut s = String::from(HISTORY_CSV_HEADER);
        s.push('\n');
        for r in &self.history {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

pub fn make_batch(task: Task, rng: &mut Rng, batch: usize, len: usize) -> Result<Batch> {
    let mut tokens = Vec::new();
    let mut targets = Vec::with_capacity(batch);
    let mut time = 0;
    for _ in 0..batch {
        let inst = task.generate(rng, len)?;
        time = inst.len();
        tokens.extend(inst.tokens);
        targets.push(inst.label);
    }
    Ok(Batch {
        tokens,
        batch,
        time,
        targets,
        lengths: None,
    })
}

/// Log-uniform length in `[min_len, max_len]`. Short sequences carry most
/// of the learning signal early on, long ones set the generalization.
pub fn sample_length(rng: &mut Rng, min_len: usize, max_len: usize) -> usize {
    let (a, b) = ((min_len as f64).ln(), ((max_len + 1) as f64).ln());
    (rng.uniform(a, b).exp().floor() as usize).clamp(min_len, max_len)
}

/// Right-pads `insts` with token 0 into one batch with per-row lengths.
pub fn ragged_batch(insts: &[TaskInstance]) -> Batch {
    let time = insts.iter().map(TaskInstance::len).max().unwrap_or(0);
    let mut tokens = Vec::with_capacity(insts.len() * time);
    for i in insts {
        tokens.extend_from_slice(&i.tokens);
        tokens.resize(tokens.len() + time - i.len(), 0);
    }
    Batch {
        tokens,
        batch: insts.len(),
        time,
        targets: insts.iter().map(|i| i.label).collect(),
        lengths: Some(insts.iter().map(TaskInstance::len).collect()),
    }
}

/// `batch` instances of mixed length, sorted by length and cut into
/// `buckets` ragged batches so that padding stays short. Together they form
/// one optimizer step.
pub fn make_mixed_batches(
    task: Task,
    rng: &mut Rng,
    batch: usize,
    min_len: usize,
    max_len: usize,
    buckets: usize,
) -> Result<Vec<Batch>> {
    if buckets == 0 || buckets > batch {
        return Err(Error::Parameter(format!("{buckets} length buckets for a batch of {batch}")));
    }
    let mut insts = (0..batch)
        .map(|_| {
            let len = sample_length(rng, min_len, max_len);
            task.generate(rng, len)
        })
        .collect::<Result<Vec<_>>>()?;
    insts.sort_by_key(TaskInstance::len);
    let per = batch.div_ceil(buckets);
    Ok(insts.chunks(per).map(ragged_batch).collect())
}

/// Scaled accuracy of `model` on `samples` fresh instances of length `len`.
pub fn evaluate(model: &Model, task: Task, rng: &mut Rng, len: usize, samples: usize) -> Result<f64> {
    const EVAL_BATCH: usize = 64;
    let mut correct = 0;
    let mut done = 0;
    while done < samples {
        let b = make_batch(task, rng, EVAL_BATCH.min(samples - done), len)?;
        let pred = model.predict(&b.tokens, b.batch, b.time)?;
        correct += pred.iter().zip(&b.targets).filter(|(p, t)| p == t).count();
        done += b.batch;
    }
    scaled_accuracy(correct, samples, task.num_classes())
}

pub fn task_model_config(task: Task, block: crate::block::Mamba3BlockConfig, n_layers: usize) -> ModelConfig {
    ModelConfig {
        block,
        n_layers,
        vocab_size: task.vocab_size(),
        num_classes: task.num_classes(),
        readout: Readout::Last,
    }
}

/// Trains through every stage, evaluating at `eval_len` after each stage.
pub fn run_curriculum(
    model_config: &ModelConfig,
    task: Task,
    curriculum: &Curriculum,
    lr: f64,
    seed: u64,
) -> Result<CurriculumResult> {
    Ok(train_curriculum(model_config, task, curriculum, lr, seed)?.0)
}

/// [`run_curriculum`] that also returns the trained model.
pub fn train_curriculum(
    model_config: &ModelConfig,
    task: Task,
    curriculum: &Curriculum,
    lr: f64,
    seed: u64,
) -> Result<(CurriculumResult, Model)> {
    curriculum.validate()?;
    let mut model = Model::new(ModelConfig {
        block: crate::block::Mamba3BlockConfig {
            seed,
            ..model_config.block.clone()
        },
        ..model_config.clone()
    })?;
    let mut train_rng = Rng::substream(seed, "train", 0);
    let mut eval_rng = Rng::substream(seed, "eval", 0);
    let adam = AdamConfig {
        lr,
        clip_norm: Some(1.0),
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new();
    let mut history = Vec::new();
    let mut step = 0;
    let mut aborted = None;
    'stages: for (stage, &max_len) in curriculum.stages.iter().enumerate() {
        let mut window = 0.0;
        let mut count = 0;
        for i in 0..curriculum.steps_per_stage {
            let parts = make_mixed_batches(
                task,
                &mut train_rng,
                curriculum.batch_size,
                curriculum.min_len,
                max_len,
                curriculum.length_buckets,
            )?;
            step += 1;
            match train_step_accum(&mut model, &parts, &mut opt, &adam) {
                Ok(s) => {
                    window += s.loss;
                    count += 1;
                }
                Err(e @ Error::NumericalFault { .. }) => {
                    log::warn!("{task} lr={lr:e}: aborted at step {step}: {e}");
                    history.push(HistoryRow {
                        step,
                        stage,
                        max_len,
                        train_loss: f64::NAN,
                        eval_scaled_acc: None,
                    });
                    aborted = Some(e.to_string());
                    break 'stages;
                }
                Err(e) => return Err(e),
            }
            let last = i + 1 == curriculum.steps_per_stage;
            if count == curriculum.log_every.max(1) || last {
                let eval = if last {
                    Some(evaluate(&model, task, &mut eval_rng, curriculum.eval_len, curriculum.eval_samples)?)
                } else {
                    None
                };
                history.push(HistoryRow {
                    step,
                    stage,
                    max_len,
                    train_loss: window / count as f64,
                    eval_scaled_acc: eval,
                });
                log::debug!("{task} lr={lr:e} step {step}: {}", history.last().expect("pushed").csv_row());
                window = 0.0;
                count = 0;
            }
        }
    }
    let final_scaled_acc = if aborted.is_some() {
        0.0
    } else {
        history.iter().rev().find_map(|r| r.eval_scaled_acc).unwrap_or(0.0)
    };
    Ok((
        CurriculumResult {
            task,
            lr,
            history,
            final_scaled_acc,
            aborted,
        },
        model,
    ))
}

/// `points` learning rates log-spaced over `[lo, hi]`.
pub fn lr_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || points == 0 {
        return Err(Error::Parameter(format!("bad lr grid [{lo}, {hi}] x {points}")));
    }
    if points == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub task: Task,
    pub runs: Vec<CurriculumResult>,
    pub best_lr: f64,
    pub best_scaled_acc: f64,
    /// Grid points skipped because an earlier run already reached the target.
    pub skipped: Vec<f64>,
}

pub struct SweepOutcome {
    pub report: SweepReport,
    pub best_model: Model,
}

/// Best-of-grid curriculum runs. With `stop_at`, the sweep ends as soon as
/// one run reaches it: the best over the grid is then at least that value.
pub fn run_sweep(
    model_config: &ModelConfig,
    task: Task,
    curriculum: &Curriculum,
    lrs: &[f64],
    seed: u64,
    stop_at: Option<f64>,
) -> Result<SweepOutcome> {
    if lrs.is_empty() {
        return Err(Error::Parameter("empty learning-rate grid".into()));
    }
    let mut runs: Vec<CurriculumResult> = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    let mut skipped = Vec::new();
    for (i, &lr) in lrs.iter().enumerate() {
        if stop_at.is_some_and(|t| runs.iter().any(|r| r.final_scaled_acc >= t)) {
            skipped.extend_from_slice(&lrs[i..]);
            break;
        }
        let (r, model) = train_curriculum(model_config, task, curriculum, lr, seed)?;
        log::info!("{task} lr={lr:.3e}: scaled acc {:.4}", r.final_scaled_acc);
        if best.as_ref().map_or(true, |b| r.final_scaled_acc > b.0) {
            best = Some((r.final_scaled_acc, model));
        }
        runs.push(r);
    }
    let (best_scaled_acc, best_model) = best.expect("at least one run");
    let best_lr = runs
        .iter()
        .find(|r| r.final_scaled_acc == best_scaled_acc)
        .expect("best run recorded")
        .lr;
    Ok(SweepOutcome {
        report: SweepReport {
            task,
            best_lr,
            best_scaled_acc,
            runs,
            skipped,
        },
        best_model,
    })
}

const CORPUS_WORDS: [&str; 48] = [
    "the", "a", "state", "space", "model", "reads", "writes", "keeps", "small", "large", "fast", "slow",
    "signal", "memory", "token", "sequence", "rotates", "decays", "grows", "every", "step", "and", "but",
    "while", "hidden", "input", "output", "gate", "of", "in", "with", "over", "time", "scan", "chunk",
    "matrix", "vector", "learns", "forgets", "holds", "simple", "quiet", "river", "stone", "light", "north",
    "under", "after",
];

/// Deterministic character corpus of `n_chars` bytes from a toy bigram
/// grammar over a fixed word list. Alphabet: `a..z`, space, `.`, newline.
pub fn char_corpus(seed: u64, n_chars: usize) -> Vec<u8> {
    let mut rng = Rng::substream(seed, "corpus", 0);
    let w = CORPUS_WORDS.len();
    // each word prefers a few successors, so the text has learnable structure
    let succ: Vec<[usize; 4]> = (0..w)
        .map(|_| [rng.int_in(0, w - 1), rng.int_in(0, w - 1), rng.int_in(0, w - 1), rng.int_in(0, w - 1)])
        .collect();
    let mut out = Vec::with_capacity(n_chars + 16);
    let mut cur = rng.int_in(0, w - 1);
    let mut in_sentence = 0;
    while out.len() < n_chars {
        out.extend_from_slice(CORPUS_WORDS[cur].as_bytes());
        in_sentence += 1;
        if in_sentence >= 4 && rng.bernoulli(0.2) {
            out.push(b'.');
            out.push(if rng.bernoulli(0.2) { b'\n' } else { b' ' });
            in_sentence = 0;
        } else {
            out.push(b' ');
        }
        cur = if rng.bernoulli(0.85) {
            succ[cur][rng.int_in(0, 3)]
        } else {
            rng.int_in(0, w - 1)
        };
    }
    out.truncate(n_chars);
    out
}

pub const CHAR_VOCAB: &[u8] = b"abcdefghijklmnopqrstuvwxyz .\n";

pub fn encode_chars(text: &[u8]) -> Result<Vec<usize>> {
    text.iter()
        .map(|c| {
            CHAR_VOCAB
                .iter()
                .position(|v| v == c)
                .ok_or_else(|| Error::Parameter(format!("byte {c:#x} outside the corpus alphabet")))
        })
        .collect()
}

/// Next-token batch of `batch` random windows of `time + 1` tokens.
pub fn corpus_batch(tokens: &[usize], rng: &mut Rng, batch: usize, time: usize) -> Result<Batch> {
    if tokens.len() <= time + 1 {
        return Err(Error::Parameter(format!("corpus of {} tokens is shorter than a window", tokens.len())));
    }
    let mut inp = Vec::with_capacity(batch * time);
    let mut tgt = Vec::with_capacity(batch * time);
    for _ in 0..batch {
        let s = rng.int_in(0, tokens.len() - time - 2);
        inp.extend_from_slice(&tokens[s..s + time]);
        tgt.extend_from_slice(&tokens[s + 1..s + time + 1]);
    }
    Ok(Batch {
        tokens: inp,
        batch,
        time,
        targets: tgt,
        lengths: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<usize> {
        s.split_whitespace()
            .map(|w| match w {
                "+" => 5,
                "-" => 6,
                "*" => 7,
                "(" => 8,
                ")" => 9,
                d => d.parse().unwrap(),
            })
            .collect()
    }

    #[test]
    fn parity_examples() {
        assert_eq!(parity_label(&[1, 0, 1, 1]), 1);
        assert_eq!(parity_label(&[0; 9]), 0);
        assert!(gen_parity(&mut Rng::new(1), 0).is_err());
    }

    #[test]
    fn parity_label_balance() {
        let mut rng = Rng::new(11);
        let ones: usize = (0..10_000).map(|_| gen_parity(&mut rng, 17).unwrap().label).sum();
        assert!((ones as f64 / 1e4 - 0.5).abs() < 0.02, "{ones}");
    }

    #[test]
    fn evaluator_examples() {
        assert_eq!(eval_modarith(&toks("1 + 2 * 3"), 5).unwrap(), 4);
        assert_eq!(eval_modarith(&toks("( 2 * ( 3 + 4 ) )"), 5).unwrap(), 4);
        assert_eq!(eval_modarith(&toks("3"), 5).unwrap(), 3);
        assert_eq!(eval_modarith(&toks("1 - 3"), 5).unwrap(), 3);
        for bad in ["", "1 +", "+ 1", "1 2", "( 1", "1 )", "( )", "1 ( 2 )", "11"] {
            assert!(eval_modarith(&toks(bad), 5).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn generated_expressions_are_valid() {
        let mut rng = Rng::new(5);
        for i in 0..2000 {
            let len = 2 * (i % 40) + 1;
            for task in [Task::ModArith, Task::ModArithBrackets] {
                let inst = task.generate(&mut rng, len).unwrap();
                assert_eq!(inst.len(), len);
                assert_eq!(task.label_of(&inst.tokens).unwrap(), inst.label);
                assert!(inst.tokens.iter().all(|&t| t < task.vocab_size()));
            }
        }
        assert_eq!(Task::ModArith.realized_len(40), 39);
    }

    #[test]
    fn bracket_generator_is_well_nested() {
        let mut rng = Rng::new(6);
        let mut with_brackets = 0;
        for i in 0..100_000 {
            let inst = gen_modarith(&mut rng, 2 * (i % 20) + 3, 5, true).unwrap();
            assert!(is_well_nested(&inst.tokens, 5), "{}", render(&inst.tokens, 5));
            with_brackets += usize::from(inst.tokens.contains(&8));
        }
        assert!(with_brackets > 50_000);
        assert!(!is_well_nested(&toks(") ( 1"), 5));
    }

    #[test]
    fn scaled_accuracy_examples() {
        assert_eq!(scaled_accuracy(50, 100, 2).unwrap(), 0.0);
        assert_eq!(scaled_accuracy(20, 100, 5).unwrap(), 0.0);
        assert_eq!(scaled_accuracy(100, 100, 5).unwrap(), 1.0);
        assert_eq!(scaled_accuracy(75, 100, 2).unwrap(), 0.5);
        assert_eq!(scaled_accuracy(10, 100, 2).unwrap(), 0.0);
        assert!(scaled_accuracy(0, 0, 2).is_err());
    }

    #[test]
    fn curriculum_validation() {
        let c = Curriculum::default();
        c.validate().unwrap();
        assert!(c.stages.iter().all(|&m| m < c.eval_len));
        let bad = Curriculum { eval_len: 160, ..c.clone() };
        assert!(bad.validate().is_err());
        let bad = Curriculum { min_len: 50, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lr_grid_is_log_spaced() {
        let g = lr_grid(1e-4, 1e-2, 8).unwrap();
        assert_eq!(g.len(), 8);
        assert!((g[0] - 1e-4).abs() < 1e-18 && (g[7] - 1e-2).abs() < 1e-15);
        let r = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - r).abs() < 1e-12));
    }

    #[test]
    fn corpus_is_deterministic_and_encodable() {
        let a = char_corpus(3, 10_000);
        assert_eq!(a, char_corpus(3, 10_000));
        assert_eq!(a.len(), 10_000);
        let t = encode_chars(&a).unwrap();
        let b = corpus_batch(&t, &mut Rng::new(1), 4, 16).unwrap();
        assert_eq!(b.targets.len(), 64);
        assert_eq!(b.tokens[1..16], b.targets[0..15]);
    }

    #[test]
    fn tiny_curriculum_runs_and_logs() {
        let block = crate::block::Mamba3BlockConfig::mamba3(8, 4, 2);
        let cfg = task_model_config(Task::Parity, block, 1);
        let cur = Curriculum {
            stages: vec![6, 8],
            eval_len: 12,
            steps_per_stage: 4,
            batch_size: 4,
            eval_samples: 16,
            log_every: 2,
            ..Curriculum::default()
        };
        let r = run_curriculum(&cfg, Task::Parity, &cur, 1e-3, 1).unwrap();
        assert_eq!(r.history.len(), 4);
        assert!(r.history[1].eval_scaled_acc.is_some() && r.history[0].eval_scaled_acc.is_none());
        assert!(r.history_csv().starts_with(HISTORY_CSV_HEADER));
        let sw = run_sweep(&cfg, Task::Parity, &cur, &[1e-3, 2e-3], 1, Some(-1.0)).unwrap().report;
        assert_eq!(sw.runs.len(), 1);
        assert_eq!(sw.skipped, vec![2e-3]);
    }

    #[test]
    fn mixed_batches_cover_the_range_in_sorted_buckets() {
        let mut rng = Rng::new(4);
        let lens: Vec<usize> = (0..4000).map(|_| sample_length(&mut rng, 3, 40)).collect();
        assert!(lens.iter().all(|&l| (3..=40).contains(&l)));
        assert!(lens.contains(&3) && lens.contains(&40));
        // log-uniform: about ln(11/3) / ln(41/3) of the mass is at most 10
        let short = lens.iter().filter(|&&l| l <= 10).count() as f64 / 4000.0;
        assert!((short - (11.0f64 / 3.0).ln() / (41.0f64 / 3.0).ln()).abs() < 0.03, "{short}");

        let parts = make_mixed_batches(Task::Parity, &mut rng, 10, 3, 40, 3).unwrap();
        assert_eq!(parts.iter().map(|b| b.batch).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut prev_max = 0;
        for b in &parts {
            let l = b.lengths.as_ref().unwrap();
            assert_eq!(b.time, *l.iter().max().unwrap());
            assert!(l[0] >= prev_max);
            prev_max = b.time;
            for (i, &n) in l.iter().enumerate() {
                let row = &b.tokens[i * b.time..(i + 1) * b.time];
                assert_eq!(parity_label(&row[..n]), b.targets[i]);
                assert!(row[n..].iter().all(|&t| t == 0));
            }
        }
        assert!(make_mixed_batches(Task::Parity, &mut rng, 4, 3, 40, 5).is_err());
    }
}
