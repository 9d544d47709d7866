//! Synthetic conditioned-generation tasks: small corpora whose target
//! distributions differ so sharply per dataset that conditioning
//! efficacy is directly measurable.
//!
//! Three generator kinds span three demands on the modulation signal:
//! memorizing a distribution (biased-unigram), tracking structure
//! (cyclic-grammar), and conditional routing (copy-with-marker).
//! Context embeddings are synthesized, not encoded: an orthogonalized
//! base direction per task plus per-description noise, which preserves
//! the many-descriptions-per-dataset shape of real context sets without
//! dragging a sentence encoder into the tests.
//!
//! Corpora are stored as ZTOK files: one ASCII header line
//! (`ZTOK v1 vocab=<V> seqs=<N> dataset=<id> split=<name>`), then per
//! sequence a `u32` loss-start index, a `u32` length, and that many
//! `u32` token ids, all little-endian.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::contexts::{assign_contexts, ContextRecord, ContextStore};
use crate::error::{Error, Result};
use crate::model::{forward_adapted, ConditionedModel};
use crate::numerics::{Rng, Tensor};
use crate::training::TrainExample;

/// Every generated sequence opens with this token; it is never emitted
/// elsewhere and never scored.
pub const BOS: usize = 0;

/// Minimum total-variation distance between any two tasks' emission
/// distributions — the "measurably distinct" floor, checked at
/// generation time.
pub const MIN_TASK_TV: f64 = 0.2;

// ── Task specifications ──────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorKind {
    /// Tokens after BOS drawn iid from `bias` (a distribution over the
    /// vocabulary with zero mass on BOS).
    BiasedUnigram { bias: Vec<f64> },
    /// The cycle repeated from a random phase; predictable once one
    /// token has been seen.
    CyclicGrammar { cycle: Vec<usize> },
    /// Random body tokens, then the marker, then a copy of the first
    /// body token; only the copy is scored.
    CopyWithMarker { marker: usize },
}

impl GeneratorKind {
    pub fn name(&self) -> &'static str {
        match self {
            GeneratorKind::BiasedUnigram { .. } => "biased-unigram",
            GeneratorKind::CyclicGrammar { .. } => "cyclic-grammar",
            GeneratorKind::CopyWithMarker { .. } => "copy-with-marker",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub task_id: String,
    pub kind: GeneratorKind,
    pub vocab_size: usize,
    /// Total sequence length including BOS.
    pub seq_len: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.task_id.is_empty()
            || !self
                .task_id
                .chars()
                .all(|c| c.is_ascii_graphic() && c != '=')
        {
            return Err(Error::config(format!(
                "task id {:?} must be non-empty printable ASCII without spaces or '='",
                self.task_id
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::config(format!(
                "task {}: vocab_size {} leaves no tokens besides BOS",
                self.task_id, self.vocab_size
            )));
        }
        if self.n_train == 0 {
            return Err(Error::config(format!(
                "task {}: n_train must be positive",
                self.task_id
            )));
        }
        match &self.kind {
            GeneratorKind::BiasedUnigram { bias } => {
                if self.seq_len < 2 {
                    return Err(Error::config(format!(
                        "task {}: seq_len {} leaves nothing to score",
                        self.task_id, self.seq_len
                    )));
                }
                if bias.len() != self.vocab_size {
                    return Err(Error::config(format!(
                        "task {}: bias has {} entries for vocab {}",
                        self.task_id,
                        bias.len(),
                        self.vocab_size
                    )));
                }
                if bias.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
                    return Err(Error::config(format!(
                        "task {}: bias entries must be non-negative",
                        self.task_id
                    )));
                }
                if bias[BOS] != 0.0 {
                    return Err(Error::config(format!(
                        "task {}: bias must put zero mass on the start token",
                        self.task_id
                    )));
                }
                let total: f64 = bias.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!(
                        "task {}: bias sums to {total}, not 1",
                        self.task_id
                    )));
                }
            }
            GeneratorKind::CyclicGrammar { cycle } => {
                if self.seq_len < 3 {
                    return Err(Error::config(format!(
                        "task {}: cyclic sequences need seq_len ≥ 3 (one token to fix the phase)",
                        self.task_id
                    )));
                }
                if cycle.is_empty() {
                    return Err(Error::config(format!(
                        "task {}: empty cycle",
                        self.task_id
                    )));
                }
                if let Some(&bad) = cycle.iter().find(|&&t| t == BOS || t >= self.vocab_size) {
                    return Err(Error::config(format!(
                        "task {}: cycle token {bad} outside 1..{}",
                        self.task_id, self.vocab_size
                    )));
                }
            }
            GeneratorKind::CopyWithMarker { marker } => {
                if self.seq_len < 4 {
                    return Err(Error::config(format!(
                        "task {}: copy sequences need seq_len ≥ 4 (BOS, body, marker, copy)",
                        self.task_id
                    )));
                }
                if *marker == BOS || *marker >= self.vocab_size {
                    return Err(Error::config(format!(
                        "task {}: marker {marker} outside 1..{}",
                        self.task_id, self.vocab_size
                    )));
                }
                if self.vocab_size < 3 {
                    return Err(Error::config(format!(
                        "task {}: vocab too small for distinct body tokens",
                        self.task_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// The analytic distribution of emitted (post-BOS) tokens — the
    /// quantity whose pairwise separation makes tasks distinguishable.
    pub fn emission_distribution(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.vocab_size];
        match &self.kind {
            GeneratorKind::BiasedUnigram { bias } => p.copy_from_slice(bias),
            GeneratorKind::CyclicGrammar { cycle } => {
                for &t in cycle {
                    p[t] += 1.0 / cycle.len() as f64;
                }
            }
            GeneratorKind::CopyWithMarker { marker } => {
                // Of the seq_len − 1 emitted tokens, one is the marker;
                // the body and the copy are uniform over the rest.
                let emitted = (self.seq_len - 1) as f64;
                let body_alphabet = self.vocab_size - 2; // minus BOS and marker
                for (t, slot) in p.iter_mut().enumerate() {
                    if t == BOS {
                        continue;
                    }
                    if t == *marker {
                        *slot = 1.0 / emitted;
                    } else {
                        *slot = (emitted - 1.0) / (emitted * body_alphabet as f64);
                    }
                }
            }
        }
        p
    }

    /// One fresh sequence plus the index scoring starts at.
    fn sample(&self, rng: &mut Rng) -> (Vec<usize>, usize) {
        let mut tokens = Vec::with_capacity(self.seq_len);
        tokens.push(BOS);
        match &self.kind {
            GeneratorKind::BiasedUnigram { bias } => {
                for _ in 1..self.seq_len {
                    tokens.push(draw_categorical(bias, rng));
                }
                (tokens, 1)
            }
            GeneratorKind::CyclicGrammar { cycle } => {
                let phase = rng.below(cycle.len());
                for p in 1..self.seq_len {
                    tokens.push(cycle[(phase + p - 1) % cycle.len()]);
                }
                // The first emitted token reveals the phase; everything
                // after it is predictable and scored.
                (tokens, 2)
            }
            GeneratorKind::CopyWithMarker { marker } => {
                let body_len = self.seq_len - 3;
                let mut first = BOS;
                for i in 0..=body_len {
                    let tok = draw_body_token(self.vocab_size, *marker, rng);
                    if i == 0 {
                        first = tok;
                    }
                    tokens.push(tok);
                }
                tokens.pop(); // drew body_len + 1; keep body_len, reuse logic below
                debug_assert_eq!(tokens.len(), 1 + body_len);
                tokens.push(*marker);
                tokens.push(first);
                (tokens, self.seq_len - 1)
            }
        }
    }
}

fn draw_categorical(p: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding leftovers land on the last positive-mass token.
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

fn draw_body_token(vocab: usize, marker: usize, rng: &mut Rng) -> usize {
    loop {
        let t = 1 + rng.below(vocab - 1);
        if t != marker {
            return t;
        }
    }
}

// ── Corpus generation ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TrainExample>,
    pub eval: Vec<TrainExample>,
}

/// All generated datasets plus the model-facing limits they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub vocab_size: usize,
    /// Longest sequence across datasets (incl. BOS).
    pub max_seq: usize,
    pub datasets: BTreeMap<String, DatasetSplit>,
}

impl DatasetBundle {
    pub fn dataset_ids(&self) -> Vec<&str> {
        self.datasets.keys().map(String::as_str).collect()
    }

    /// Flattened training set, dataset-major, generation order within.
    pub fn all_train(&self) -> Vec<TrainExample> {
        self.datasets
            .values()
            .flat_map(|s| s.train.iter().cloned())
            .collect()
    }
}

/// How context pseudo-embeddings are synthesized.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextGenOptions {
    pub d_c: usize,
    /// Descriptions per task reserved for training draws.
    pub train_descriptions: usize,
    /// Held-out descriptions per task, never sampled in training.
    pub eval_descriptions: usize,
    /// Per-coordinate std of the description noise around the task's
    /// base direction (base directions have norm √d_c, so coordinates
    /// are O(1) and noise 0.1 is a ~10% perturbation).
    pub noise: f64,
    pub seed: u64,
}

impl Default for ContextGenOptions {
    fn default() -> Self {
        ContextGenOptions {
            d_c: 64,
            train_descriptions: 8,
            eval_descriptions: 4,
            noise: 0.1,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub bundle: DatasetBundle,
    pub train_contexts: ContextStore,
    pub eval_contexts: ContextStore,
}

/// Deterministically generate corpora and context stores for `specs`.
/// Train/eval splits are disjoint as sequence sets; re-running with the
/// same inputs reproduces every byte.
pub fn gen_corpus(
    specs: &[SyntheticTaskSpec],
    ctx: &ContextGenOptions,
) -> Result<GeneratedCorpus> {
    if specs.is_empty() {
        return Err(Error::config("no task specs given".to_string()));
    }
    let mut ids = BTreeSet::new();
    let vocab = specs[0].vocab_size;
    for spec in specs {
        spec.validate()?;
        if !ids.insert(spec.task_id.as_str()) {
            return Err(Error::config(format!(
                "duplicate task id {:?}",
                spec.task_id
            )));
        }
        if spec.vocab_size != vocab {
            return Err(Error::config(format!(
                "task {}: vocab {} differs from {} — one model serves all tasks",
                spec.task_id, spec.vocab_size, vocab
            )));
        }
    }
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            let tv = total_variation(&a.emission_distribution(), &b.emission_distribution());
            if tv < MIN_TASK_TV {
                return Err(Error::config(format!(
                    "tasks {} and {} are too similar (TV {tv:.3} < {MIN_TASK_TV})",
                    a.task_id, b.task_id
                )));
            }
        }
    }

    let mut datasets = BTreeMap::new();
    let mut max_seq = 0;
    for spec in specs {
        datasets.insert(spec.task_id.clone(), gen_split(spec)?);
        max_seq = max_seq.max(spec.seq_len);
    }
    let task_ids: Vec<&str> = specs.iter().map(|s| s.task_id.as_str()).collect();
    let (train_contexts, eval_contexts) = gen_contexts(&task_ids, ctx)?;
    Ok(GeneratedCorpus {
        bundle: DatasetBundle {
            vocab_size: vocab,
            max_seq,
            datasets,
        },
        train_contexts,
        eval_contexts,
    })
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn gen_split(spec: &SyntheticTaskSpec) -> Result<DatasetSplit> {
    let mut train_rng = Rng::new(spec.seed).split(0x7261);
    let mut eval_rng = Rng::new(spec.seed).split(0xE7A1);
    let mut train = Vec::with_capacity(spec.n_train);
    let mut seen = BTreeSet::new();
    for _ in 0..spec.n_train {
        let (tokens, loss_from) = spec.sample(&mut train_rng);
        seen.insert(tokens.clone());
        train.push(TrainExample {
            tokens,
            loss_from,
            dataset: spec.task_id.clone(),
        });
    }
    // Eval sequences must not appear in train; internal repeats are fine.
    let mut eval = Vec::with_capacity(spec.n_eval);
    let budget = 1000 * spec.n_eval.max(1);
    let mut attempts = 0;
    while eval.len() < spec.n_eval {
        attempts += 1;
        if attempts > budget {
            return Err(Error::config(format!(
                "task {}: cannot draw {} eval sequences disjoint from train — \
                 the sequence space is too small",
                spec.task_id, spec.n_eval
            )));
        }
        let (tokens, loss_from) = spec.sample(&mut eval_rng);
        if seen.contains(&tokens) {
            continue;
        }
        eval.push(TrainExample {
            tokens,
            loss_from,
            dataset: spec.task_id.clone(),
        });
    }
    Ok(DatasetSplit { train, eval })
}

// ── Context pseudo-embeddings ────────────────────────────────────────

const DESCRIPTION_TEMPLATES: [&str; 4] = [
    "Continue sequences the way dataset {} does.",
    "You are generating tokens for {}; match its statistics.",
    "Respond in the characteristic pattern of {}.",
    "Follow the emission profile of dataset {}.",
];

fn description_text(task: &str, j: usize) -> String {
    let base = DESCRIPTION_TEMPLATES[j % DESCRIPTION_TEMPLATES.len()].replace("{}", task);
    if j < DESCRIPTION_TEMPLATES.len() {
        base
    } else {
        format!("{base} (variant {})", j / DESCRIPTION_TEMPLATES.len())
    }
}

/// Orthonormalized task directions (scaled to norm √d_c) plus noisy
/// per-description copies, split into train and held-out eval stores.
fn gen_contexts(
    task_ids: &[&str],
    opts: &ContextGenOptions,
) -> Result<(ContextStore, ContextStore)> {
    if opts.d_c == 0 || opts.train_descriptions == 0 {
        return Err(Error::config(
            "context generation needs d_c > 0 and at least one training description"
                .to_string(),
        ));
    }
    if task_ids.len() > opts.d_c {
        return Err(Error::config(format!(
            "{} tasks cannot get orthogonal directions in {} dimensions",
            task_ids.len(),
            opts.d_c
        )));
    }
    let mut rng = Rng::new(opts.seed).split(0xC0DE);
    let mut bases: Vec<Vec<f64>> = Vec::with_capacity(task_ids.len());
    for _ in task_ids {
        // Gram-Schmidt against the accepted directions.
        loop {
            let mut v: Vec<f64> = (0..opts.d_c).map(|_| rng.standard_normal()).collect();
            for b in &bases {
                let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                let b_norm2: f64 = b.iter().map(|c| c * c).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= dot / b_norm2 * bi;
                }
            }
            let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm > 1e-6 {
                let scale = (opts.d_c as f64).sqrt() / norm;
                bases.push(v.into_iter().map(|c| c * scale).collect());
                break;
            }
        }
    }

    let mut make_records = |split: &str, count: usize| -> Result<Vec<ContextRecord>> {
        let mut records = Vec::new();
        for (task, base) in task_ids.iter().zip(&bases) {
            for j in 0..count {
                let data: Vec<f64> = base
                    .iter()
                    .map(|&b| b + opts.noise * rng.standard_normal())
                    .collect();
                records.push(ContextRecord::new(
                    format!("{task}.{split}.{j}"),
                    *task,
                    description_text(task, j),
                    Tensor::from_vec(&[opts.d_c], data)?,
                )?);
            }
        }
        Ok(records)
    };
    let train = ContextStore::new(opts.d_c, make_records("train", opts.train_descriptions)?)?;
    let eval = ContextStore::new(opts.d_c, make_records("eval", opts.eval_descriptions)?)?;
    Ok((train, eval))
}

// ── ZTOK corpus files ────────────────────────────────────────────────

/// Serialize one dataset split. `dataset` and `split` must be
/// whitespace-free (they live in the space-separated header).
pub fn write_corpus(
    w: &mut impl Write,
    dataset: &str,
    split: &str,
    vocab: usize,
    examples: &[TrainExample],
) -> Result<()> {
    for (what, s) in [("dataset", dataset), ("split", split)] {
        if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') {
            return Err(Error::contract(format!(
                "{what} name {s:?} cannot appear in a corpus header"
            )));
        }
    }
    writeln!(w, "ZTOK v1 vocab={vocab} seqs={} dataset={dataset} split={split}", examples.len())?;
    for ex in examples {
        ex.validate()?;
        if let Some(&bad) = ex.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::contract(format!(
                "token {bad} outside the declared vocab {vocab}"
            )));
        }
        w.write_all(&(ex.loss_from as u32).to_le_bytes())?;
        w.write_all(&(ex.tokens.len() as u32).to_le_bytes())?;
        for &t in &ex.tokens {
            w.write_all(&(t as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parse a ZTOK stream: `(dataset, split, vocab, examples)`.
pub fn read_corpus(r: &mut impl Read) -> Result<(String, String, usize, Vec<TrainExample>)> {
    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            return Err(Error::input("corpus header is unterminated".to_string()));
        }
        if byte[0] == b'\n' {
            break;
        }
        if header.len() > 512 {
            return Err(Error::input("corpus header is implausibly long".to_string()));
        }
        header.push(byte[0]);
    }
    let header = String::from_utf8(header)
        .map_err(|_| Error::input("corpus header is not UTF-8".to_string()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    let [magic, version, rest @ ..] = fields.as_slice() else {
        return Err(Error::input(format!("malformed corpus header {header:?}")));
    };
    if *magic != "ZTOK" || *version != "v1" {
        return Err(Error::input(format!(
            "not a v1 token corpus (header {header:?})"
        )));
    }
    let mut kv = BTreeMap::new();
    for field in rest {
        let (k, v) = field.split_once('=').ok_or_else(|| {
            Error::input(format!("bad corpus header field {field:?}"))
        })?;
        kv.insert(k, v);
    }
    let get = |k: &str| -> Result<&str> {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::input(format!("corpus header is missing {k}")))
    };
    let vocab: usize = get("vocab")?
        .parse()
        .map_err(|_| Error::input("bad vocab in corpus header".to_string()))?;
    let seqs: usize = get("seqs")?
        .parse()
        .map_err(|_| Error::input("bad seqs in corpus header".to_string()))?;
    let dataset = get("dataset")?.to_string();
    let split = get("split")?.to_string();

    let mut read_u32 = |what: &str, seq: usize| -> Result<u32> {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf).map_err(|_| {
            Error::input(format!("sequence {seq}: truncated while reading {what}"))
        })?;
        Ok(u32::from_le_bytes(buf))
    };
    let mut examples = Vec::with_capacity(seqs.min(1 << 16));
    for seq in 0..seqs {
        let loss_from = read_u32("loss_from", seq)? as usize;
        let len = read_u32("length", seq)? as usize;
        if len < 2 || len > 1 << 20 {
            return Err(Error::input(format!(
                "sequence {seq}: implausible length {len}"
            )));
        }
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            let t = read_u32("token", seq)? as usize;
            if t >= vocab {
                return Err(Error::input(format!(
                    "sequence {seq}: token {t} outside vocab {vocab}"
                )));
            }
            tokens.push(t);
        }
        let ex = TrainExample {
            tokens,
            loss_from,
            dataset: dataset.clone(),
        };
        ex.validate()
            .map_err(|e| Error::input(format!("sequence {seq}: {e}")))?;
        examples.push(ex);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::input(
            "trailing bytes after the last sequence".to_string(),
        ));
    }
    Ok((dataset, split, vocab, examples))
}

pub fn save_corpus(
    path: &Path,
    dataset: &str,
    split: &str,
    vocab: usize,
    examples: &[TrainExample],
) -> Result<()> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, dataset, split, vocab, examples)
        .map_err(|e| Error::load(path, e.to_string()))?;
    std::fs::write(path, buf).map_err(|e| Error::load(path, e.to_string()))
}

pub fn load_corpus(path: &Path) -> Result<(String, String, usize, Vec<TrainExample>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    read_corpus(&mut bytes.as_slice()).map_err(|e| Error::load(path, e.to_string()))
}

// ── Conditioned evaluation ───────────────────────────────────────────

/// One (context, task) measurement: unsmoothed mean cross-entropy over
/// the task's eval split and greedy next-token accuracy on scored
/// positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCell {
    pub context_id: String,
    /// The dataset the context describes (its "home" task).
    pub context_dataset: String,
    pub task: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Context-major: all tasks for the first context, then the next.
    pub cells: Vec<EvalCell>,
    pub tasks: Vec<String>,
    pub context_ids: Vec<String>,
    /// Identity-signal baseline (shared factors, no conditioning),
    /// one entry per task: (loss, accuracy).
    pub unconditioned: BTreeMap<String, (f64, f64)>,
}

impl EvalReport {
    fn mean_where(&self, keep: impl Fn(&EvalCell) -> bool) -> (f64, f64) {
        let mut loss = 0.0;
        let mut acc = 0.0;
        let mut n = 0;
        for cell in self.cells.iter().filter(|c| keep(c)) {
            loss += cell.loss;
            acc += cell.accuracy;
            n += 1;
        }
        if n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (loss / n as f64, acc / n as f64)
        }
    }

    /// Mean over cells where the context describes the task it is
    /// evaluated on.
    pub fn matched(&self) -> (f64, f64) {
        self.mean_where(|c| c.context_dataset == c.task)
    }

    /// Mean over cells pairing a context with a foreign task.
    pub fn mismatched(&self) -> (f64, f64) {
        self.mean_where(|c| c.context_dataset != c.task)
    }

    pub fn unconditioned_mean(&self) -> (f64, f64) {
        let n = self.unconditioned.len().max(1) as f64;
        (
            self.unconditioned.values().map(|v| v.0).sum::<f64>() / n,
            self.unconditioned.values().map(|v| v.1).sum::<f64>() / n,
        )
    }

    /// Relative loss improvement of matched conditioning over the
    /// identity baseline: `(unconditioned − matched) / unconditioned`.
    pub fn matched_margin_vs_unconditioned(&self) -> f64 {
        let (matched, _) = self.matched();
        let (unc, _) = self.unconditioned_mean();
        (unc - matched) / unc
    }

    /// True iff every task's matched cells all beat every mismatched
    /// cell evaluating the same task.
    pub fn diagonal_dominant(&self) -> bool {
        self.tasks.iter().all(|task| {
            let worst_matched = self
                .cells
                .iter()
                .filter(|c| &c.task == task && c.context_dataset == *task)
                .map(|c| c.loss)
                .fold(f64::NEG_INFINITY, f64::max);
            let best_mismatched = self
                .cells
                .iter()
                .filter(|c| &c.task == task && c.context_dataset != *task)
                .map(|c| c.loss)
                .fold(f64::INFINITY, f64::min);
            worst_matched < best_mismatched
        })
    }

    /// Plain-text matrix plus summary, for terminals and run logs.
    pub fn render_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let id_width = self
            .context_ids
            .iter()
            .map(|s| s.len())
            .chain(["(unconditioned)".len()].into_iter())
            .max()
            .unwrap_or(8);
        write!(out, "{:id_width$}", "context").unwrap();
        for task in &self.tasks {
            write!(out, "  {task:>18}").unwrap();
        }
        out.push('\n');
        for ctx in &self.context_ids {
            write!(out, "{ctx:id_width$}").unwrap();
            for task in &self.tasks {
                let cell = self
                    .cells
                    .iter()
                    .find(|c| &c.context_id == ctx && &c.task == task)
                    .expect("complete matrix");
                write!(out, "  {:>11.4} ({:>3.0}%)", cell.loss, cell.accuracy * 100.0).unwrap();
            }
            out.push('\n');
        }
        write!(out, "{:id_width$}", "(unconditioned)").unwrap();
        for task in &self.tasks {
            let (loss, acc) = self.unconditioned[task];
            write!(out, "  {:>11.4} ({:>3.0}%)", loss, acc * 100.0).unwrap();
        }
        out.push('\n');
        let (m_loss, m_acc) = self.matched();
        let (x_loss, x_acc) = self.mismatched();
        let (u_loss, u_acc) = self.unconditioned_mean();
        writeln!(out, "matched:       loss {m_loss:.4}  acc {:.1}%", m_acc * 100.0).unwrap();
        writeln!(out, "mismatched:    loss {x_loss:.4}  acc {:.1}%", x_acc * 100.0).unwrap();
        writeln!(out, "unconditioned: loss {u_loss:.4}  acc {:.1}%", u_acc * 100.0).unwrap();
        writeln!(
            out,
            "matched improves on unconditioned by {:.1}% (loss, relative)",
            self.matched_margin_vs_unconditioned() * 100.0
        )
        .unwrap();
        out
    }

    /// Machine-readable cells: `context_id,context_dataset,task,loss,accuracy`.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("context_id,context_dataset,task,loss,accuracy\n");
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{}",
                c.context_id, c.context_dataset, c.task, c.loss, c.accuracy
            )
            .unwrap();
        }
        for (task, (loss, acc)) in &self.unconditioned {
            writeln!(out, "(unconditioned),,{task},{loss},{acc}").unwrap();
        }
        out
    }
}

fn bank_mean_loss_acc(
    base: &crate::model::BaseWeights,
    bank: &crate::lora::AdapterSet,
    examples: &[TrainExample],
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let (input, targets, score_from) = ex.sft_view()?;
        let logits = forward_adapted(base, bank, input)?;
        let (sum, count) = logits.cross_entropy_sum(targets, 0.0, score_from)?;
        loss_sum += sum.item()?;
        let picks = logits.argmax_rows()?;
        for (row, &target) in targets.iter().enumerate().skip(score_from) {
            if picks[row] == target {
                correct += 1;
            }
        }
        total += count;
    }
    Ok((loss_sum / total as f64, correct as f64 / total as f64))
}

fn split_mean_loss_acc(
    model: &ConditionedModel,
    bank: Option<&crate::lora::AdapterSet>,
    examples: &[TrainExample],
) -> Result<(f64, f64)> {
    bank_mean_loss_acc(&model.base, bank.unwrap_or(&model.pairs), examples)
}

/// Per-task unsmoothed mean loss and greedy accuracy of one static
/// adapter bank over every dataset's eval split — how a materialized
/// (or multi-task) adapter file is scored without a hypernetwork in
/// the loop.
pub fn eval_adapter_bank(
    base: &crate::model::BaseWeights,
    bank: &crate::lora::AdapterSet,
    bundle: &DatasetBundle,
) -> Result<BTreeMap<String, (f64, f64)>> {
    let mut out = BTreeMap::new();
    for (task, split) in &bundle.datasets {
        if split.eval.is_empty() {
            return Err(Error::config(format!(
                "dataset {task} has no eval split to measure on"
            )));
        }
        out.insert(task.clone(), bank_mean_loss_acc(base, bank, &split.eval)?);
    }
    Ok(out)
}

/// Evaluate a trained conditioned model against every (context, task)
/// pair in the store and bundle, with an identity-signal baseline row.
/// Each context's adapter bank is materialized once and reused across
/// that context's cells.
pub fn eval_conditioned(
    model: &ConditionedModel,
    bundle: &DatasetBundle,
    store: &ContextStore,
) -> Result<EvalReport> {
    let tasks: Vec<String> = bundle.datasets.keys().cloned().collect();
    for (task, split) in &bundle.datasets {
        if split.eval.is_empty() {
            return Err(Error::config(format!(
                "dataset {task} has no eval split to measure on"
            )));
        }
    }
    let task_refs: Vec<&str> = tasks.iter().map(String::as_str).collect();
    let (assigned, _orphans) = assign_contexts(store, &task_refs)?;

    let mut cells = Vec::new();
    let mut context_ids = Vec::new();
    for task_contexts in assigned.values() {
        for record in task_contexts {
            context_ids.push(record.id.clone());
            let bank = model.materialize_adapter(&record.embedding)?;
            for task in &tasks {
                let (loss, accuracy) =
                    split_mean_loss_acc(model, Some(&bank), &bundle.datasets[task].eval)?;
                cells.push(EvalCell {
                    context_id: record.id.clone(),
                    context_dataset: record.dataset_id.clone(),
                    task: task.clone(),
                    loss,
                    accuracy,
                });
            }
        }
    }
    let mut unconditioned = BTreeMap::new();
    for task in &tasks {
        let (loss, accuracy) = split_mean_loss_acc(model, None, &bundle.datasets[task].eval)?;
        unconditioned.insert(task.clone(), (loss, accuracy));
    }
    Ok(EvalReport {
        cells,
        tasks,
        context_ids,
        unconditioned,
    })
}

// ── The acceptance task family ───────────────────────────────────────

/// Three biased-unigram tasks over disjoint four-token groups of a
/// 16-token vocabulary — distinct enough (pairwise TV = 1.0) that
/// conditioning either works visibly or fails visibly.
pub fn desk_task_specs() -> Vec<SyntheticTaskSpec> {
    let group_bias = |lo: usize| {
        let mut bias = vec![0.0; 16];
        for t in lo..lo + 4 {
            bias[t] = 0.25;
        }
        bias
    };
    ["unigram-a", "unigram-b", "unigram-c"]
        .into_iter()
        .zip([2usize, 6, 10])
        .enumerate()
        .map(|(i, (id, lo))| SyntheticTaskSpec {
            task_id: id.to_string(),
            kind: GeneratorKind::BiasedUnigram {
                bias: group_bias(lo),
            },
            vocab_size: 16,
            seq_len: 4,
            n_train: 96,
            n_eval: 48,
            seed: 101 + i as u64,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::HyperVariant;
    use crate::model::{init_base, ModelConfig};
    use crate::training::{train_zhyper, ContextSource, TrainConfig, TrainMode};

    /// Mass 0.85 on `hot`, the rest on its two neighbors — sharp enough
    /// to separate tasks, diffuse enough that disjoint eval splits exist.
    fn unigram_spec(id: &str, hot: usize, seed: u64) -> SyntheticTaskSpec {
        let mut bias = vec![0.0; 12];
        bias[hot] = 0.85;
        bias[hot + 1] = 0.075;
        bias[hot + 2] = 0.075;
        SyntheticTaskSpec {
            task_id: id.to_string(),
            kind: GeneratorKind::BiasedUnigram { bias },
            vocab_size: 12,
            seq_len: 4,
            n_train: 20,
            n_eval: 6,
            seed,
        }
    }

    #[test]
    fn degenerate_bias_emits_only_that_token() {
        // With all mass on one token there is exactly one possible
        // sequence, so no disjoint eval split can exist: train-only.
        let mut bias = vec![0.0; 12];
        bias[3] = 1.0;
        let spec = SyntheticTaskSpec {
            task_id: "always-3".to_string(),
            kind: GeneratorKind::BiasedUnigram { bias },
            vocab_size: 12,
            seq_len: 4,
            n_train: 20,
            n_eval: 0,
            seed: 9,
        };
        let split = gen_split(&spec).unwrap();
        for ex in &split.train {
            assert_eq!(ex.tokens[0], BOS);
            assert!(ex.tokens[1..].iter().all(|&t| t == 3), "{:?}", ex.tokens);
            assert_eq!(ex.loss_from, 1);
        }
        assert!(split.eval.is_empty());

        // Asking for held-out sequences anyway must fail loudly rather
        // than silently duplicating train data.
        let mut impossible = spec;
        impossible.n_eval = 1;
        let err = gen_split(&impossible).unwrap_err().to_string();
        assert!(err.contains("disjoint"), "{err}");
    }

    #[test]
    fn cyclic_period_two_alternates_exactly() {
        let spec = SyntheticTaskSpec {
            task_id: "ab".to_string(),
            kind: GeneratorKind::CyclicGrammar { cycle: vec![4, 7] },
            vocab_size: 9,
            seq_len: 6,
            n_train: 30,
            n_eval: 0,
            seed: 5,
        };
        let split = gen_split(&spec).unwrap();
        let mut phases = BTreeSet::new();
        for ex in &split.train {
            let body = &ex.tokens[1..];
            phases.insert(body[0]);
            for pair in body.windows(2) {
                assert_ne!(pair[0], pair[1], "strict alternation");
                assert!(pair[0] == 4 && pair[1] == 7 || pair[0] == 7 && pair[1] == 4);
            }
            assert_eq!(ex.loss_from, 2, "phase must be observed before scoring");
        }
        assert_eq!(phases.len(), 2, "both phases occur");
    }

    #[test]
    fn copy_task_scores_only_the_copied_token() {
        let spec = SyntheticTaskSpec {
            task_id: "copy".to_string(),
            kind: GeneratorKind::CopyWithMarker { marker: 8 },
            vocab_size: 9,
            seq_len: 6,
            n_train: 40,
            n_eval: 0,
            seed: 6,
        };
        let split = gen_split(&spec).unwrap();
        for ex in &split.train {
            let n = ex.tokens.len();
            assert_eq!(n, 6);
            assert_eq!(ex.tokens[n - 2], 8, "marker before the copy");
            assert_eq!(ex.tokens[n - 1], ex.tokens[1], "copies the first body token");
            assert!(ex.tokens[1..n - 2].iter().all(|&t| t != 8 && t != BOS));
            assert_eq!(ex.loss_from, n - 1);
        }
    }

    #[test]
    fn empirical_distributions_of_distinct_tasks_separate() {
        // 1000 sequences each; empirical TV must clear the same floor
        // the analytic check enforces.
        let mut a = unigram_spec("a", 3, 21);
        let mut b = unigram_spec("b", 7, 22);
        for spec in [&mut a, &mut b] {
            spec.n_train = 1000;
            if let GeneratorKind::BiasedUnigram { bias } = &mut spec.kind {
                // Soften to non-degenerate distributions.
                for p in bias.iter_mut() {
                    *p = if *p > 0.0 { 0.7 } else { 0.3 / 10.0 };
                }
                bias[BOS] = 0.0;
                let total: f64 = bias.iter().sum();
                for p in bias.iter_mut() {
                    *p /= total;
                }
            }
        }
        let empirical = |spec: &SyntheticTaskSpec| -> Vec<f64> {
            let split = gen_split(spec).unwrap();
            let mut counts = vec![0.0; spec.vocab_size];
            let mut n = 0.0;
            for ex in &split.train {
                for &t in &ex.tokens[1..] {
                    counts[t] += 1.0;
                    n += 1.0;
                }
            }
            counts.iter().map(|c| c / n).collect()
        };
        let tv = total_variation(&empirical(&a), &empirical(&b));
        assert!(tv >= MIN_TASK_TV, "empirical TV {tv}");
    }

    #[test]
    fn generation_is_a_pure_function_of_specs() {
        let specs = desk_task_specs();
        let opts = ContextGenOptions::default();
        let one = gen_corpus(&specs, &opts).unwrap();
        let two = gen_corpus(&specs, &opts).unwrap();
        assert_eq!(one.bundle, two.bundle);

        // Byte-level check through the serializers.
        let serialize = |c: &GeneratedCorpus| -> Vec<u8> {
            let mut buf = Vec::new();
            for (name, split) in &c.bundle.datasets {
                write_corpus(&mut buf, name, "train", c.bundle.vocab_size, &split.train)
                    .unwrap();
                write_corpus(&mut buf, name, "eval", c.bundle.vocab_size, &split.eval).unwrap();
            }
            crate::contexts::write_context_store(&mut buf, &c.train_contexts).unwrap();
            crate::contexts::write_context_store(&mut buf, &c.eval_contexts).unwrap();
            buf
        };
        assert_eq!(serialize(&one), serialize(&two));
    }

    #[test]
    fn train_and_eval_splits_are_disjoint() {
        let specs = desk_task_specs();
        let corpus = gen_corpus(&specs, &ContextGenOptions::default()).unwrap();
        for split in corpus.bundle.datasets.values() {
            let train_set: BTreeSet<&Vec<usize>> =
                split.train.iter().map(|e| &e.tokens).collect();
            for ex in &split.eval {
                assert!(!train_set.contains(&ex.tokens), "{:?} leaked", ex.tokens);
            }
        }
    }

    #[test]
    fn near_identical_tasks_are_rejected() {
        let a = unigram_spec("a", 3, 1);
        let mut b = unigram_spec("b", 3, 2); // same emission distribution
        b.seed = 99;
        let err = gen_corpus(&[a.clone(), b], &ContextGenOptions::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("too similar"), "{err}");

        let dup = gen_corpus(&[a.clone(), a], &ContextGenOptions::default())
            .unwrap_err()
            .to_string();
        assert!(dup.contains("duplicate"), "{dup}");
    }

    #[test]
    fn context_directions_are_orthogonal_and_descriptions_cluster() {
        let (train, eval) = gen_contexts(
            &["p", "q", "r"],
            &ContextGenOptions {
                d_c: 32,
                train_descriptions: 6,
                eval_descriptions: 3,
                noise: 0.1,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(train.len(), 18);
        assert_eq!(eval.len(), 9);
        let cos = |a: &Tensor, b: &Tensor| -> f64 {
            let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        for (i, a) in train.records().iter().enumerate() {
            for b in &train.records()[i + 1..] {
                let c = cos(&a.embedding, &b.embedding);
                if a.dataset_id == b.dataset_id {
                    assert!(c > 0.9, "same task descriptions must cluster: {c}");
                } else {
                    assert!(c.abs() < 0.2, "cross-task must stay near-orthogonal: {c}");
                }
            }
        }
        // Held-out descriptions sit in the same cluster as training ones.
        let t0 = &train.for_dataset("p")[0].embedding;
        let e0 = &eval.for_dataset("p")[0].embedding;
        assert!(cos(t0, e0) > 0.9);
    }

    #[test]
    fn corpus_files_round_trip_and_reject_corruption() {
        let spec = unigram_spec("rt", 5, 77);
        let split = gen_split(&spec).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, "rt", "train", 12, &split.train).unwrap();
        let (dataset, split_name, vocab, examples) =
            read_corpus(&mut buf.as_slice()).unwrap();
        assert_eq!((dataset.as_str(), split_name.as_str(), vocab), ("rt", "train", 12));
        assert_eq!(examples, split.train);

        // Write→read→write is byte-identical.
        let mut again = Vec::new();
        write_corpus(&mut again, &dataset, &split_name, vocab, &examples).unwrap();
        assert_eq!(buf, again);

        // Token beyond the declared vocab.
        let mut corrupt = buf.clone();
        let last4 = corrupt.len() - 4;
        corrupt[last4..].copy_from_slice(&100u32.to_le_bytes());
        let err = read_corpus(&mut corrupt.as_slice()).unwrap_err().to_string();
        assert!(err.contains("outside vocab"), "{err}");

        // Truncation and trailing garbage.
        assert!(read_corpus(&mut &buf[..buf.len() - 2]).is_err());
        let mut padded = buf.clone();
        padded.push(7);
        assert!(read_corpus(&mut padded.as_slice()).is_err());

        // Names that would corrupt the header are refused at write time.
        assert!(write_corpus(&mut Vec::new(), "has space", "train", 12, &split.train).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.ztok");
        save_corpus(&path, "rt", "train", 12, &split.train).unwrap();
        assert_eq!(load_corpus(&path).unwrap().3, split.train);
    }

    fn tiny_eval_setup(
        n_tasks: usize,
    ) -> (Vec<SyntheticTaskSpec>, ContextGenOptions) {
        let specs: Vec<SyntheticTaskSpec> = (0..n_tasks)
            .map(|i| unigram_spec(&format!("task{i}"), 3 + 4 * i, 50 + i as u64))
            .collect();
        let opts = ContextGenOptions {
            d_c: 8,
            train_descriptions: 3,
            eval_descriptions: 2,
            noise: 0.05,
            seed: 4,
        };
        (specs, opts)
    }

    fn tiny_model_for(vocab: usize, max_seq: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: vocab,
            max_seq,
            q_out: 8,
            v_out: 4,
        }
    }

    #[test]
    fn untrained_eval_matrix_has_full_shape_and_log_vocab_entries() {
        let (specs, opts) = tiny_eval_setup(2);
        let corpus = gen_corpus(&specs, &opts).unwrap();
        let mut rng = Rng::new(60);
        let base = init_base(
            &tiny_model_for(corpus.bundle.vocab_size, corpus.bundle.max_seq),
            &mut rng,
        )
        .unwrap();
        let mut cfg = TrainConfig::desk_defaults(TrainMode::ZhyperDiag);
        cfg.rank = 2;
        cfg.hyper_d_in = 6;
        cfg.hyper_d_hidden = 8;
        cfg.hyper_d_out = 8;
        cfg.hyper_d_t = 3;
        cfg.hyper_d_l = 3;
        let model =
            crate::training::init_conditioned(base, corpus.eval_contexts.dim(), &cfg).unwrap();
        let report = eval_conditioned(&model, &corpus.bundle, &corpus.eval_contexts).unwrap();

        // (#contexts) × (#tasks) cells: 2 tasks × 2 eval descriptions
        // each = 4 contexts, 2 tasks.
        assert_eq!(report.context_ids.len(), 4);
        assert_eq!(report.tasks.len(), 2);
        assert_eq!(report.cells.len(), 8);
        let ln_v = (corpus.bundle.vocab_size as f64).ln();
        for cell in &report.cells {
            assert!(
                cell.loss > 0.5 * ln_v && cell.loss < 2.0 * ln_v,
                "untrained loss {} should sit near ln(vocab) {ln_v}",
                cell.loss
            );
        }
        // Untrained factors have B = 0: conditioning cannot matter yet,
        // so every cell equals the unconditioned baseline for its task.
        for cell in &report.cells {
            let (u_loss, _) = report.unconditioned[&cell.task];
            assert!((cell.loss - u_loss).abs() < 1e-12);
        }
        let text = report.render_text();
        assert!(text.contains("(unconditioned)"));
        assert!(report.to_csv().lines().count() >= 9);
    }

    #[test]
    fn conditioning_beats_the_identity_baseline_after_training() {
        // Two tasks with opposite degenerate biases: the shared factors
        // alone must average them, while the hypernetwork can route by
        // context. After a short run, matched cells must win on loss,
        // with the diagonal dominant and a clear relative margin.
        let (specs, opts) = tiny_eval_setup(2);
        let corpus = gen_corpus(&specs, &opts).unwrap();
        let mut rng = Rng::new(61);
        let base = init_base(
            &tiny_model_for(corpus.bundle.vocab_size, corpus.bundle.max_seq),
            &mut rng,
        )
        .unwrap();
        let mut cfg = TrainConfig::desk_defaults(TrainMode::ZhyperDiag);
        cfg.steps = 220;
        cfg.batch_size = 8;
        cfg.max_lr = 2e-2;
        cfg.neftune_alpha = 1.0;
        cfg.rank = 2;
        cfg.hyper_d_in = 8;
        cfg.hyper_d_hidden = 12;
        cfg.hyper_d_out = 12;
        cfg.hyper_d_t = 3;
        cfg.hyper_d_l = 3;
        cfg.seed = 62;
        let train_set = corpus.bundle.all_train();
        let (model, logs) =
            train_zhyper(base, &train_set, &corpus.train_contexts, &cfg).unwrap();
        assert!(logs.last().unwrap().loss < logs.first().unwrap().loss);

        // Evaluate on held-out descriptions the training never sampled.
        let report = eval_conditioned(&model, &corpus.bundle, &corpus.eval_contexts).unwrap();
        let (matched_loss, matched_acc) = report.matched();
        let (unc_loss, _) = report.unconditioned_mean();
        assert!(
            matched_loss < unc_loss,
            "matched {matched_loss} vs unconditioned {unc_loss}\n{}",
            report.render_text()
        );
        assert!(
            report.matched_margin_vs_unconditioned() > 0.10,
            "margin too thin:\n{}",
            report.render_text()
        );
        assert!(report.diagonal_dominant(), "\n{}", report.render_text());
        // Split disjointness skews eval sequences toward off-tokens, so
        // even a perfect hot-token predictor caps out near the eval
        // hot-token fraction (~1/3 here) rather than 1.0. Claim what is
        // robust: matched accuracy beats mismatched, unconditioned, and
        // twice the 1/12 chance floor.
        let (mismatched_loss, mismatched_acc) = report.mismatched();
        let (_, unc_acc) = report.unconditioned_mean();
        assert!(matched_loss < mismatched_loss);
        assert!(
            matched_acc > mismatched_acc && matched_acc > unc_acc && matched_acc > 2.0 / 12.0,
            "matched accuracy {matched_acc}\n{}",
            report.render_text()
        );
    }

    #[test]
    fn eval_requires_eval_splits_and_contexts() {
        let (mut specs, opts) = tiny_eval_setup(2);
        specs[0].n_eval = 0;
        let corpus = gen_corpus(&specs, &opts).unwrap();
        let mut rng = Rng::new(63);
        let base = init_base(
            &tiny_model_for(corpus.bundle.vocab_size, corpus.bundle.max_seq),
            &mut rng,
        )
        .unwrap();
        let mut cfg = TrainConfig::desk_defaults(TrainMode::ZhyperDiag);
        cfg.rank = 2;
        cfg.hyper_d_in = 6;
        cfg.hyper_d_hidden = 8;
        cfg.hyper_d_out = 8;
        cfg.hyper_d_t = 3;
        cfg.hyper_d_l = 3;
        let model =
            crate::training::init_conditioned(base, corpus.eval_contexts.dim(), &cfg).unwrap();
        let err = eval_conditioned(&model, &corpus.bundle, &corpus.eval_contexts)
            .unwrap_err()
            .to_string();
        assert!(err.contains("no eval split"), "{err}");
    }

    #[test]
    fn desk_specs_are_mutually_far_apart() {
        let specs = desk_task_specs();
        assert_eq!(specs.len(), 3);
        for (i, a) in specs.iter().enumerate() {
            a.validate().unwrap();
            for b in &specs[i + 1..] {
                let tv =
                    total_variation(&a.emission_distribution(), &b.emission_distribution());
                assert_eq!(tv, 1.0, "disjoint supports have maximal TV");
            }
        }
    }

    #[test]
    fn acceptance_variant_of_hyper_must_match_mode() {
        // `desk_task_specs` is consumed by conditioned runs in both
        // variants; make sure the variants stay reachable.
        assert_eq!(TrainMode::ZhyperDiag.hyper_variant(), Some(HyperVariant::Diag));
        assert_eq!(
            TrainMode::ZhyperSquare.hyper_variant(),
            Some(HyperVariant::Square)
        );
    }
}
