//! Supervised fine-tuning: AdamW over the adapter factors (and, in the
//! conditioned modes, the hypernetwork), with the base model untouched.
//!
//! The loop is deterministic and resumable: every random choice at step
//! `n` — batch indices, per-example context draws, embedding noise — is
//! derived by splitting a fresh stream from `(seed, n)`, so training is
//! a pure function of (initial state, config, corpus), and a run
//! interrupted at any step continues bit-identically from a checkpoint.
//!
//! Optimizer updates are functional: a step consumes the old parameter
//! bag and returns a new one whose tensors are fresh leaves, which keeps
//! graph history from leaking across steps without any mutable-tensor
//! machinery.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hypernet::{init_hypernet, HyperConfig, HyperVariant};
use crate::lora::AdapterSet;
use crate::model::{
    forward_adapted_noisy, init_pairs, BaseWeights, ConditionedModel,
};
use crate::numerics::{ztsr, Precision, Rng, Tensor};
use crate::params::ParamBag;

// ── Modes ────────────────────────────────────────────────────────────

/// What gets trained and how adapters are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Shared factors + hypernetwork emitting per-context diagonal signals.
    ZhyperDiag,
    /// Shared factors + hypernetwork emitting per-context square signals.
    ZhyperSquare,
    /// One shared adapter bank for all datasets, no conditioning.
    Mtl,
    /// An independent adapter bank per dataset (the skyline baseline).
    Oracle,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::ZhyperDiag,
        TrainMode::ZhyperSquare,
        TrainMode::Mtl,
        TrainMode::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::ZhyperDiag => "zhyper-diag",
            TrainMode::ZhyperSquare => "zhyper-square",
            TrainMode::Mtl => "mtl",
            TrainMode::Oracle => "oracle",
        }
    }

    /// The signal variant this mode conditions with, if any.
    pub fn hyper_variant(self) -> Option<HyperVariant> {
        match self {
            TrainMode::ZhyperDiag => Some(HyperVariant::Diag),
            TrainMode::ZhyperSquare => Some(HyperVariant::Square),
            TrainMode::Mtl | TrainMode::Oracle => None,
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<TrainMode> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown mode {s:?}; expected one of zhyper-diag, zhyper-square, mtl, oracle"
                ))
            })
    }
}

// ── Configuration ────────────────────────────────────────────────────

/// Everything a run needs beyond the corpus and the base weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    /// Micro-batches folded into one optimizer step.
    pub grad_accum: usize,
    pub max_lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    /// Embedding-noise strength; 0 disables it.
    pub neftune_alpha: f64,
    /// Draw one context per dataset per batch instead of one per
    /// example. Off by default: per-example draws see more of each
    /// dataset's description set per step.
    pub context_per_batch: bool,
    pub rank: usize,
    /// LoRA scale folded onto every delta.
    pub adapter_scale: f64,
    /// Std of the gaussian A-factor init (B always starts at zero).
    pub a_init_std: f64,
    /// Hypernetwork trunk widths (conditioned modes only).
    pub hyper_d_in: usize,
    pub hyper_d_hidden: usize,
    pub hyper_d_out: usize,
    /// Site-tag embedding widths.
    pub hyper_d_t: usize,
    pub hyper_d_l: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Reference schedule at desk scale: batch 8 with no accumulation,
    /// 20% linear warmup into linear decay, label smoothing 0.1, weight
    /// decay 0.1, embedding-noise α = 5. The peak rate is 2.5e-4 — desk
    /// models are ~1000× smaller than the shapes this schedule was
    /// designed around and need the hotter rate to move in 2k steps.
    pub fn desk_defaults(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            steps: 2000,
            batch_size: 8,
            grad_accum: 1,
            max_lr: 2.5e-4,
            warmup_frac: 0.2,
            label_smoothing: 0.1,
            weight_decay: 0.1,
            neftune_alpha: 5.0,
            context_per_batch: false,
            rank: 4,
            adapter_scale: 2.0,
            a_init_std: 0.2,
            hyper_d_in: 64,
            hyper_d_hidden: 128,
            hyper_d_out: 128,
            hyper_d_t: 64,
            hyper_d_l: 64,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::config(
                "steps, batch_size, and grad_accum must be positive".to_string(),
            ));
        }
        if !(self.max_lr.is_finite() && self.max_lr > 0.0) {
            return Err(Error::config(format!("bad max_lr {}", self.max_lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config(format!(
                "warmup_frac {} outside [0, 1)",
                self.warmup_frac
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.weight_decay < 0.0 || self.neftune_alpha < 0.0 {
            return Err(Error::config(
                "weight_decay and neftune_alpha must be non-negative".to_string(),
            ));
        }
        if self.rank == 0 {
            return Err(Error::config("rank must be positive".to_string()));
        }
        if !(self.adapter_scale.is_finite() && self.a_init_std.is_finite()) {
            return Err(Error::config("non-finite adapter init".to_string()));
        }
        for (name, v) in [
            ("hyper_d_in", self.hyper_d_in),
            ("hyper_d_hidden", self.hyper_d_hidden),
            ("hyper_d_out", self.hyper_d_out),
            ("hyper_d_t", self.hyper_d_t),
            ("hyper_d_l", self.hyper_d_l),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Key=value rendering, one pair per field. The inverse of
    /// [`TrainConfig::from_kv`]; also used as the run-manifest echo.
    /// Field names accepted by [`TrainConfig::apply_kv`], in the order
    /// [`TrainConfig::to_kv`] emits them.
    pub const KEYS: [&'static str; 19] = [
        "mode",
        "steps",
        "batch_size",
        "grad_accum",
        "max_lr",
        "warmup_frac",
        "label_smoothing",
        "weight_decay",
        "neftune_alpha",
        "context_per_batch",
        "rank",
        "adapter_scale",
        "a_init_std",
        "hyper_d_in",
        "hyper_d_hidden",
        "hyper_d_out",
        "hyper_d_t",
        "hyper_d_l",
        "seed",
    ];

    pub fn has_key(key: &str) -> bool {
        Self::KEYS.contains(&key)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![("mode".to_string(), self.mode.to_string())];
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        push("steps", self.steps.to_string());
        push("batch_size", self.batch_size.to_string());
        push("grad_accum", self.grad_accum.to_string());
        push("max_lr", format!("{:e}", self.max_lr));
        push("warmup_frac", self.warmup_frac.to_string());
        push("label_smoothing", self.label_smoothing.to_string());
        push("weight_decay", self.weight_decay.to_string());
        push("neftune_alpha", self.neftune_alpha.to_string());
        push("context_per_batch", self.context_per_batch.to_string());
        push("rank", self.rank.to_string());
        push("adapter_scale", self.adapter_scale.to_string());
        push("a_init_std", self.a_init_std.to_string());
        push("hyper_d_in", self.hyper_d_in.to_string());
        push("hyper_d_hidden", self.hyper_d_hidden.to_string());
        push("hyper_d_out", self.hyper_d_out.to_string());
        push("hyper_d_t", self.hyper_d_t.to_string());
        push("hyper_d_l", self.hyper_d_l.to_string());
        push("seed", self.seed.to_string());
        kv
    }

    /// Apply key=value overrides on top of `self`. Unknown keys error,
    /// to catch config-file typos instead of silently ignoring them.
    pub fn apply_kv(&mut self, pairs: &[(String, String)]) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>()
                .map_err(|_| Error::config(format!("bad value {v:?} for {key}")))
        }
        for (key, value) in pairs {
            match key.as_str() {
                "mode" => self.mode = value.parse()?,
                "steps" => self.steps = parse(key, value)?,
                "batch_size" => self.batch_size = parse(key, value)?,
                "grad_accum" => self.grad_accum = parse(key, value)?,
                "max_lr" => self.max_lr = parse(key, value)?,
                "warmup_frac" => self.warmup_frac = parse(key, value)?,
                "label_smoothing" => self.label_smoothing = parse(key, value)?,
                "weight_decay" => self.weight_decay = parse(key, value)?,
                "neftune_alpha" => self.neftune_alpha = parse(key, value)?,
                "context_per_batch" => self.context_per_batch = parse(key, value)?,
                "rank" => self.rank = parse(key, value)?,
                "adapter_scale" => self.adapter_scale = parse(key, value)?,
                "a_init_std" => self.a_init_std = parse(key, value)?,
                "hyper_d_in" => self.hyper_d_in = parse(key, value)?,
                "hyper_d_hidden" => self.hyper_d_hidden = parse(key, value)?,
                "hyper_d_out" => self.hyper_d_out = parse(key, value)?,
                "hyper_d_t" => self.hyper_d_t = parse(key, value)?,
                "hyper_d_l" => self.hyper_d_l = parse(key, value)?,
                "seed" => self.seed = parse(key, value)?,
                _ => return Err(Error::config(format!("unknown training option {key:?}"))),
            }
        }
        self.validate()
    }

    /// The hypernetwork shape this config implies for a model with
    /// `layers` layers and `d_c`-dimensional context embeddings.
    pub fn hyper_config(&self, layers: usize, d_c: usize) -> Result<HyperConfig> {
        let variant = self.mode.hyper_variant().ok_or_else(|| {
            Error::config(format!("mode {} has no hypernetwork", self.mode))
        })?;
        Ok(HyperConfig {
            layers,
            d_c,
            d_t: self.hyper_d_t,
            d_l: self.hyper_d_l,
            d_mlp_in: self.hyper_d_in,
            d_mlp_hidden: self.hyper_d_hidden,
            d_mlp_out: self.hyper_d_out,
            rank: self.rank,
            variant,
        })
    }
}

// ── Schedule and noise ───────────────────────────────────────────────

/// Linear warmup to `max_lr` over `⌈warmup_frac·total⌉` steps, then
/// linear decay to zero at `total`. Step 0 runs at rate 0 (it still
/// updates optimizer moments), and the final step's rate is positive.
pub fn lr_at(step: usize, total: usize, max_lr: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = ((total as f64 * warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        max_lr * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        max_lr * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Uniform embedding noise scaled by α/√(rows·cols) — strong enough to
/// regularize short toy sequences, vanishing as sequences grow.
pub fn neftune_noise(rng: &mut Rng, rows: usize, cols: usize, alpha: f64) -> Tensor {
    let bound = alpha / ((rows * cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.uniform_sym() * bound)
        .collect();
    Tensor::from_vec(&[rows, cols], data).expect("finite noise")
}

// ── Corpus ───────────────────────────────────────────────────────────

/// One training sequence. `loss_from` is the index of the first token
/// that is scored; everything before it is conditioning-only (at minimum
/// the start token, which nothing predicts).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub tokens: Vec<usize>,
    pub loss_from: usize,
    /// Which dataset the example belongs to — the key used to look up
    /// context embeddings and to split oracle training.
    pub dataset: String,
}

impl TrainExample {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() < 2 {
            return Err(Error::input(format!(
                "example needs at least 2 tokens, got {}",
                self.tokens.len()
            )));
        }
        if self.loss_from == 0 || self.loss_from >= self.tokens.len() {
            return Err(Error::input(format!(
                "loss_from {} outside 1..{} (the start token is never scored)",
                self.loss_from,
                self.tokens.len()
            )));
        }
        Ok(())
    }

    /// Teacher-forcing view: input positions, next-token targets, and
    /// the first target row that is scored.
    pub fn sft_view(&self) -> Result<(&[usize], &[usize], usize)> {
        self.validate()?;
        let n = self.tokens.len();
        Ok((&self.tokens[..n - 1], &self.tokens[1..], self.loss_from - 1))
    }
}

/// Mean scored-token cross-entropy of one example's logits.
pub fn sequence_loss(
    logits: &Tensor,
    targets: &[usize],
    score_from: usize,
    smoothing: f64,
) -> Result<(Tensor, usize)> {
    let (sum, count) = logits.cross_entropy_sum(targets, smoothing, score_from)?;
    Ok((sum.scale(1.0 / count as f64), count))
}

// ── Context lookup ───────────────────────────────────────────────────

/// Where conditioned training gets a context embedding for an example.
/// Stores usually hold several alternative description embeddings per
/// dataset; `sample` draws one per example.
pub trait ContextSource {
    fn sample(&self, dataset: &str, rng: &mut Rng) -> Result<Tensor>;
    /// Context embedding width.
    fn dim(&self) -> usize;
}

/// One fixed embedding per dataset — handy for tests and frozen evals.
pub struct FixedContexts {
    pub by_dataset: BTreeMap<String, Tensor>,
    pub d_c: usize,
}

impl FixedContexts {
    pub fn new(by_dataset: BTreeMap<String, Tensor>) -> Result<FixedContexts> {
        let mut d_c = None;
        for (name, t) in &by_dataset {
            let &[d] = t.shape() else {
                return Err(Error::contract(format!(
                    "context for {name} must be a vector, got shape {:?}",
                    t.shape()
                )));
            };
            if *d_c.get_or_insert(d) != d {
                return Err(Error::contract(format!(
                    "context for {name} has width {d}, others have {}",
                    d_c.unwrap()
                )));
            }
        }
        let d_c = d_c.ok_or_else(|| Error::contract("no contexts given".to_string()))?;
        Ok(FixedContexts { by_dataset, d_c })
    }
}

impl ContextSource for FixedContexts {
    fn sample(&self, dataset: &str, _rng: &mut Rng) -> Result<Tensor> {
        self.by_dataset
            .get(dataset)
            .cloned()
            .ok_or_else(|| Error::key(format!("no context for dataset {dataset:?}")))
    }

    fn dim(&self) -> usize {
        self.d_c
    }
}

// ── Optimizer ────────────────────────────────────────────────────────

/// AdamW with decoupled weight decay. State is keyed by the parameter's
/// position in the bag's canonical visit order, so it survives the
/// functional rebuild each step. Decay multiplies every parameter by
/// `1 − lr·wd` whether or not it received gradient this step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update: read leaf gradients, advance moments, and return a
    /// rebuilt bag of fresh leaves. The input bag is left untouched.
    pub fn step<B: ParamBag>(&mut self, bag: &B, lr: f64) -> Result<B> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut slot = 0usize;
        let mut failure = None;
        let next = bag.map(&mut |t| {
            if failure.is_some() {
                slot += 1;
                return t.clone();
            }
            if self.m.len() == slot {
                self.m.push(vec![0.0; t.numel()]);
                self.v.push(vec![0.0; t.numel()]);
            }
            if slot >= self.m.len() || self.m[slot].len() != t.numel() {
                failure = Some(Error::contract(format!(
                    "optimizer state slot {slot} does not match the parameter bag"
                )));
                slot += 1;
                return t.clone();
            }
            let g = t.grad_or_zeros();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let decay = 1.0 - lr * self.weight_decay;
            let data: Vec<f64> = t
                .data()
                .iter()
                .zip(&g)
                .enumerate()
                .map(|(i, (&w, &gi))| {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    w * decay - lr * m_hat / (v_hat.sqrt() + self.eps)
                })
                .collect();
            slot += 1;
            t.with_data(data).expect("update preserves shape")
        });
        if let Some(err) = failure {
            return Err(err);
        }
        if slot != self.m.len() {
            return Err(Error::contract(format!(
                "parameter bag has {slot} tensors but optimizer state has {}",
                self.m.len()
            )));
        }
        Ok(next)
    }

    /// Persist moments and step count: `m{i}.ztsr` / `v{i}.ztsr` plus a
    /// small manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::load(dir, e.to_string()))?;
        let mut manifest = String::new();
        writeln!(manifest, "step {}", self.step).unwrap();
        writeln!(manifest, "slots {}", self.m.len()).unwrap();
        writeln!(manifest, "weight_decay {}", self.weight_decay).unwrap();
        std::fs::write(dir.join("manifest.txt"), manifest)
            .map_err(|e| Error::load(dir, e.to_string()))?;
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            let mt = Tensor::from_vec(&[m.len()], m.clone())?;
            let vt = Tensor::from_vec(&[v.len()], v.clone())?;
            ztsr::save_tensor(&dir.join(format!("m{i}.ztsr")), &mt, Precision::F64)?;
            ztsr::save_tensor(&dir.join(format!("v{i}.ztsr")), &vt, Precision::F64)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<AdamW> {
        let manifest_path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::load(&manifest_path, e.to_string()))?;
        let mut step = None;
        let mut slots = None;
        let mut weight_decay = None;
        for line in text.lines() {
            match line.split_whitespace().collect::<Vec<_>>().as_slice() {
                ["step", v] => step = v.parse::<usize>().ok(),
                ["slots", v] => slots = v.parse::<usize>().ok(),
                ["weight_decay", v] => weight_decay = v.parse::<f64>().ok(),
                [] => continue,
                _ => {
                    return Err(Error::load(
                        &manifest_path,
                        format!("unrecognized entry {line:?}"),
                    ))
                }
            }
        }
        let (step, slots, weight_decay) = match (step, slots, weight_decay) {
            (Some(s), Some(n), Some(wd)) => (s, n, wd),
            _ => {
                return Err(Error::load(
                    &manifest_path,
                    "manifest must list step, slots, and weight_decay".to_string(),
                ))
            }
        };
        let mut opt = AdamW::new(weight_decay);
        opt.step = step;
        for i in 0..slots {
            let (m, _) = ztsr::load_tensor(&dir.join(format!("m{i}.ztsr")))?;
            let (v, _) = ztsr::load_tensor(&dir.join(format!("v{i}.ztsr")))?;
            if m.numel() != v.numel() {
                return Err(Error::load(
                    &manifest_path,
                    format!("slot {i}: m and v sizes disagree"),
                ));
            }
            opt.m.push(m.data().to_vec());
            opt.v.push(v.data().to_vec());
        }
        Ok(opt)
    }
}

// ── Models under training ────────────────────────────────────────────

/// A frozen base plus one shared adapter bank — the unconditioned
/// baseline, and the building block oracle mode trains per dataset.
#[derive(Debug, Clone)]
pub struct MtlModel {
    pub base: BaseWeights,
    pub pairs: AdapterSet,
}

impl ParamBag for MtlModel {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        for (_, (pair, _)) in self.pairs.iter() {
            f(&pair.a);
            f(&pair.b);
        }
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        let mut entries = BTreeMap::new();
        for (key, (pair, m)) in self.pairs.iter() {
            let rebuilt = crate::lora::LoRAPair {
                a: f(&pair.a),
                b: f(&pair.b),
                rank: pair.rank,
                scale: pair.scale,
            };
            entries.insert(*key, (rebuilt, m.clone()));
        }
        let pairs = AdapterSet::new(self.pairs.layers(), self.pairs.kinds(), entries)
            .expect("site coverage unchanged");
        MtlModel {
            base: self.base.clone(),
            pairs,
        }
    }
}

// ── The loop ─────────────────────────────────────────────────────────

/// One row of the loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_csv(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for l in logs {
        writeln!(out, "{},{:e},{}", l.step, l.lr, l.loss).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::load(path, e.to_string()))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<StepLog>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("step,lr,loss") => {}
        other => {
            return Err(Error::load(
                path,
                format!("expected loss-trace header, got {other:?}"),
            ))
        }
    }
    let mut logs = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let parsed = (|| -> Option<StepLog> {
            let [step, lr, loss] = fields.as_slice() else {
                return None;
            };
            Some(StepLog {
                step: step.parse().ok()?,
                lr: lr.parse().ok()?,
                loss: loss.parse().ok()?,
            })
        })();
        logs.push(parsed.ok_or_else(|| {
            Error::load(path, format!("row {}: bad loss-trace line {line:?}", i + 2))
        })?);
    }
    Ok(logs)
}

/// Stream tags so each concern gets independent randomness per step.
const STREAM_BATCH: u64 = 0xB47C;
const STREAM_NOISE: u64 = 0x4E01;
const STREAM_CTX: u64 = 0xC074;

fn step_rng(seed: u64, stream: u64, step: usize) -> Rng {
    Rng::new(seed).split(stream).split(step as u64)
}

/// Per-micro-batch loss: sum tensor and scored-token count.
type MicroLoss<'a, B> = dyn FnMut(&B, &[&TrainExample], &mut Rng, &mut Rng) -> Result<(Tensor, usize)>
    + 'a;

/// The shared driver: sample → loss → backward → AdamW for steps
/// `start_step..end_step`. The learning-rate schedule always spans the
/// full `cfg.steps`, so stopping early and resuming later retraces the
/// uninterrupted run exactly. Gradients from `grad_accum` micro-batches
/// accumulate on the leaves before the single optimizer update.
fn drive<B: ParamBag>(
    mut bag: B,
    cfg: &TrainConfig,
    corpus: &[TrainExample],
    opt: &mut AdamW,
    start_step: usize,
    end_step: usize,
    micro_loss: &mut MicroLoss<B>,
) -> Result<(B, Vec<StepLog>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::input("training corpus is empty".to_string()));
    }
    for ex in corpus {
        ex.validate()?;
    }
    if start_step > end_step || end_step > cfg.steps {
        return Err(Error::config(format!(
            "step span {start_step}..{end_step} does not fit the {}-step schedule",
            cfg.steps
        )));
    }
    let mut logs = Vec::with_capacity(end_step - start_step);
    for step in start_step..end_step {
        let mut batch_rng = step_rng(cfg.seed, STREAM_BATCH, step);
        let mut noise_rng = step_rng(cfg.seed, STREAM_NOISE, step);
        let mut ctx_rng = step_rng(cfg.seed, STREAM_CTX, step);
        let lr = lr_at(step, cfg.steps, cfg.max_lr, cfg.warmup_frac);
        let mut step_loss = 0.0;
        for _ in 0..cfg.grad_accum {
            let batch: Vec<&TrainExample> = (0..cfg.batch_size)
                .map(|_| &corpus[batch_rng.below(corpus.len())])
                .collect();
            let (sum, count) = micro_loss(&bag, &batch, &mut noise_rng, &mut ctx_rng)?;
            let mean = sum.scale(1.0 / (count as f64 * cfg.grad_accum as f64));
            let value = mean.item()? * cfg.grad_accum as f64;
            if !value.is_finite() {
                return Err(Error::contract(format!(
                    "loss diverged to {value} at step {step}"
                )));
            }
            step_loss += value / cfg.grad_accum as f64;
            mean.backward()?;
        }
        bag = opt.step(&bag, lr)?;
        logs.push(StepLog {
            step,
            lr,
            loss: step_loss,
        });
    }
    Ok((bag, logs))
}

fn conditioned_micro_loss(
    model: &ConditionedModel,
    batch: &[&TrainExample],
    contexts: &dyn ContextSource,
    per_batch: bool,
    alpha: f64,
    smoothing: f64,
    noise_rng: &mut Rng,
    ctx_rng: &mut Rng,
) -> Result<(Tensor, usize)> {
    let mut total: Option<Tensor> = None;
    let mut count = 0;
    // With per-batch sampling, the first example of each dataset draws
    // the context and the rest of the batch reuses it.
    let mut batch_draws: BTreeMap<&str, Tensor> = BTreeMap::new();
    for ex in batch {
        let (input, targets, score_from) = ex.sft_view()?;
        let c = if per_batch {
            match batch_draws.get(ex.dataset.as_str()) {
                Some(c) => c.clone(),
                None => {
                    let c = contexts.sample(&ex.dataset, ctx_rng)?;
                    batch_draws.insert(&ex.dataset, c.clone());
                    c
                }
            }
        } else {
            contexts.sample(&ex.dataset, ctx_rng)?
        };
        let noise = (alpha > 0.0)
            .then(|| neftune_noise(noise_rng, input.len(), model.base.cfg.d_model, alpha));
        let logits = model.forward_conditioned_noisy(input, &c, noise.as_ref())?;
        let (sum, n) = logits.cross_entropy_sum(targets, smoothing, score_from)?;
        count += n;
        total = Some(match total {
            Some(t) => t.add(&sum)?,
            None => sum,
        });
    }
    Ok((total.expect("non-empty batch"), count))
}

fn mtl_micro_loss(
    model: &MtlModel,
    batch: &[&TrainExample],
    alpha: f64,
    smoothing: f64,
    noise_rng: &mut Rng,
) -> Result<(Tensor, usize)> {
    let mut total: Option<Tensor> = None;
    let mut count = 0;
    for ex in batch {
        let (input, targets, score_from) = ex.sft_view()?;
        let noise = (alpha > 0.0)
            .then(|| neftune_noise(noise_rng, input.len(), model.base.cfg.d_model, alpha));
        let logits = forward_adapted_noisy(&model.base, &model.pairs, input, noise.as_ref())?;
        let (sum, n) = logits.cross_entropy_sum(targets, smoothing, score_from)?;
        count += n;
        total = Some(match total {
            Some(t) => t.add(&sum)?,
            None => sum,
        });
    }
    Ok((total.expect("non-empty batch"), count))
}

/// Train the conditioned model (shared factors + hypernetwork) from a
/// fresh init. Returns the trained model and its loss trace.
pub fn train_zhyper(
    base: BaseWeights,
    corpus: &[TrainExample],
    contexts: &dyn ContextSource,
    cfg: &TrainConfig,
) -> Result<(ConditionedModel, Vec<StepLog>)> {
    let model = init_conditioned(base, contexts.dim(), cfg)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    resume_zhyper(model, &mut opt, 0, cfg.steps, corpus, contexts, cfg)
}

/// Fresh conditioned model the way a run starts: zero-delta factors and
/// an identity-signal hypernetwork.
pub fn init_conditioned(
    base: BaseWeights,
    d_c: usize,
    cfg: &TrainConfig,
) -> Result<ConditionedModel> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let pairs = init_pairs(&base.cfg, cfg.rank, cfg.adapter_scale, cfg.a_init_std, &mut rng)?;
    let hyper = init_hypernet(&cfg.hyper_config(base.cfg.layers, d_c)?, &mut rng)?;
    ConditionedModel::new(base, pairs, hyper)
}

/// Run steps `start_step..end_step` of a conditioned training schedule
/// with existing optimizer state — the resume path behind run
/// checkpoints (pass `end_step = cfg.steps` to finish the run).
pub fn resume_zhyper(
    model: ConditionedModel,
    opt: &mut AdamW,
    start_step: usize,
    end_step: usize,
    corpus: &[TrainExample],
    contexts: &dyn ContextSource,
    cfg: &TrainConfig,
) -> Result<(ConditionedModel, Vec<StepLog>)> {
    if cfg.mode.hyper_variant() != Some(model.hyper.cfg.variant) {
        return Err(Error::config(format!(
            "mode {} cannot train a {} hypernetwork",
            cfg.mode,
            model.hyper.cfg.variant.name()
        )));
    }
    let (alpha, smoothing) = (cfg.neftune_alpha, cfg.label_smoothing);
    let per_batch = cfg.context_per_batch;
    drive(
        model,
        cfg,
        corpus,
        opt,
        start_step,
        end_step,
        &mut |m, batch, noise_rng, ctx_rng| {
            conditioned_micro_loss(
                m, batch, contexts, per_batch, alpha, smoothing, noise_rng, ctx_rng,
            )
        },
    )
}

/// Train one shared adapter bank over the whole corpus (mode `mtl`).
pub fn train_mtl(
    base: BaseWeights,
    corpus: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<(MtlModel, Vec<StepLog>)> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let pairs = init_pairs(&base.cfg, cfg.rank, cfg.adapter_scale, cfg.a_init_std, &mut rng)?;
    let model = MtlModel { base, pairs };
    let mut opt = AdamW::new(cfg.weight_decay);
    resume_mtl(model, &mut opt, 0, cfg.steps, corpus, cfg)
}

/// Run steps `start_step..end_step` of an unconditioned schedule.
pub fn resume_mtl(
    model: MtlModel,
    opt: &mut AdamW,
    start_step: usize,
    end_step: usize,
    corpus: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<(MtlModel, Vec<StepLog>)> {
    let (alpha, smoothing) = (cfg.neftune_alpha, cfg.label_smoothing);
    drive(
        model,
        cfg,
        corpus,
        opt,
        start_step,
        end_step,
        &mut |m, batch, noise_rng, _ctx_rng| {
            mtl_micro_loss(m, batch, alpha, smoothing, noise_rng)
        },
    )
}

/// Train an independent adapter bank per dataset (mode `oracle`): each
/// bank sees only its own dataset's examples, for the full step budget.
/// Loss traces come back keyed like the banks.
pub fn train_oracle(
    base: &BaseWeights,
    corpus: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<BTreeMap<String, (AdapterSet, Vec<StepLog>)>> {
    let mut datasets: BTreeMap<&str, Vec<TrainExample>> = BTreeMap::new();
    for ex in corpus {
        datasets.entry(&ex.dataset).or_default().push(ex.clone());
    }
    if datasets.is_empty() {
        return Err(Error::input("training corpus is empty".to_string()));
    }
    let mut out = BTreeMap::new();
    for (name, subset) in datasets {
        let (trained, logs) = train_mtl(base.clone(), &subset, cfg)?;
        out.insert(name.to_string(), (trained.pairs, logs));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_adapted, forward_base, init_base, ModelConfig};

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            max_seq: 8,
            q_out: 8,
            v_out: 4,
        }
    }

    fn tiny_train_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            steps: 12,
            batch_size: 4,
            grad_accum: 1,
            max_lr: 1e-2,
            warmup_frac: 0.25,
            label_smoothing: 0.1,
            weight_decay: 0.1,
            neftune_alpha: 1.0,
            context_per_batch: false,
            rank: 2,
            adapter_scale: 1.0,
            a_init_std: 0.2,
            hyper_d_in: 6,
            hyper_d_hidden: 8,
            hyper_d_out: 8,
            hyper_d_t: 3,
            hyper_d_l: 3,
            seed: 11,
        }
    }

    /// Repetition corpus: sequences [1, t, t, t] teach "repeat the
    /// previous token" — learnable by a tiny model in a few dozen steps.
    /// Scoring starts at the first repeat, the earliest predictable spot.
    fn repeat_corpus(datasets: &[&str]) -> Vec<TrainExample> {
        let mut out = Vec::new();
        for name in datasets {
            for t in 2..8usize {
                out.push(TrainExample {
                    tokens: vec![1, t, t, t],
                    loss_from: 2,
                    dataset: name.to_string(),
                });
            }
        }
        out
    }

    /// Minimal one-tensor bag for optimizer unit tests.
    #[derive(Clone)]
    struct One(Tensor);
    impl ParamBag for One {
        fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
            f(&self.0);
        }
        fn map(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
            One(f(&self.0))
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in TrainMode::ALL {
            assert_eq!(mode.name().parse::<TrainMode>().unwrap(), mode);
        }
        assert!("zhyper".parse::<TrainMode>().is_err());
    }

    #[test]
    fn config_kv_round_trips_and_rejects_unknown_keys() {
        let cfg = TrainConfig::desk_defaults(TrainMode::ZhyperSquare);
        let kv = cfg.to_kv();
        let mut rebuilt = TrainConfig::desk_defaults(TrainMode::Mtl);
        rebuilt.apply_kv(&kv).unwrap();
        assert_eq!(rebuilt, cfg);

        let mut cfg = TrainConfig::desk_defaults(TrainMode::Mtl);
        let err = cfg
            .apply_kv(&[("warmup_fraction".to_string(), "0.5".to_string())])
            .unwrap_err()
            .to_string();
        assert!(err.contains("warmup_fraction"), "{err}");
        assert!(cfg
            .apply_kv(&[("max_lr".to_string(), "fast".to_string())])
            .is_err());

        // The declared key list is exactly what to_kv emits, so the
        // two cannot drift apart silently.
        let emitted: Vec<&str> = kv.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(emitted, TrainConfig::KEYS);
        assert!(TrainConfig::has_key("rank") && !TrainConfig::has_key("d_model"));
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let total = 10;
        let max = 1.0;
        // warmup = ceil(0.2·10) = 2 steps.
        assert_eq!(lr_at(0, total, max, 0.2), 0.0);
        assert_eq!(lr_at(1, total, max, 0.2), 0.5);
        assert_eq!(lr_at(2, total, max, 0.2), 1.0);
        // Then linear decay; the last in-schedule step still trains.
        assert_eq!(lr_at(6, total, max, 0.2), 0.5);
        assert_eq!(lr_at(9, total, max, 0.2), 0.125);
        assert_eq!(lr_at(10, total, max, 0.2), 0.0);
        for step in 0..total {
            let here = lr_at(step, total, max, 0.2);
            assert!(here.is_finite() && here >= 0.0 && here <= max);
        }
    }

    #[test]
    fn noise_respects_the_alpha_bound_and_varies() {
        let mut rng = Rng::new(3);
        let n1 = neftune_noise(&mut rng, 4, 16, 5.0);
        let bound = 5.0 / 64.0f64.sqrt();
        assert!(n1.data().iter().all(|v| v.abs() <= bound));
        assert!(n1.data().iter().any(|v| v.abs() > bound * 0.5));
        let n2 = neftune_noise(&mut rng, 4, 16, 5.0);
        assert_ne!(n1.data(), n2.data(), "fresh draw each call");
    }

    #[test]
    fn adamw_matches_a_longhand_update() {
        // Single 1-element parameter, fixed gradient, two steps computed
        // with explicit arithmetic.
        let (lr, wd, g) = (0.1, 0.1, 0.5);
        let mut opt = AdamW::new(wd);
        let mut bag = One(Tensor::param(&[1], vec![1.0]).unwrap());

        let mut w = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for step in 1..=2 {
            // Drive the same fixed gradient through a trivial graph.
            let loss = bag.0.scale(g).sum().unwrap();
            loss.backward().unwrap();
            bag = opt.step(&bag, lr).unwrap();

            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(step));
            let v_hat = v / (1.0 - 0.999f64.powi(step));
            w = w * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + 1e-8);
            assert!(
                (bag.0.data()[0] - w).abs() < 1e-15,
                "step {step}: {} vs {w}",
                bag.0.data()[0]
            );
        }
    }

    #[test]
    fn decay_shrinks_parameters_that_got_no_gradient() {
        #[derive(Clone)]
        struct Two(Tensor, Tensor);
        impl ParamBag for Two {
            fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
                f(&self.0);
                f(&self.1);
            }
            fn map(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
                Two(f(&self.0), f(&self.1))
            }
        }
        let bag = Two(
            Tensor::param(&[1], vec![2.0]).unwrap(),
            Tensor::param(&[1], vec![4.0]).unwrap(),
        );
        // Loss touches only the first parameter.
        bag.0.scale(1.0).sum().unwrap().backward().unwrap();
        let mut opt = AdamW::new(0.5);
        let next = opt.step(&bag, 0.1).unwrap();
        assert_eq!(next.1.data()[0], 4.0 * (1.0 - 0.1 * 0.5));
        assert!(next.0.data()[0] < 2.0 * (1.0 - 0.1 * 0.5));
        // Functional: the old bag still holds the old values.
        assert_eq!(bag.0.data()[0], 2.0);
        assert_eq!(bag.1.data()[0], 4.0);
    }

    #[test]
    fn optimizer_state_survives_the_disk_round_trip() {
        let mut opt = AdamW::new(0.1);
        let mut bag = One(Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        for _ in 0..3 {
            bag.0.sum().unwrap().backward().unwrap();
            bag = opt.step(&bag, 0.05).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt");
        opt.save(&path).unwrap();
        let mut reloaded = AdamW::load(&path).unwrap();
        assert_eq!(reloaded.steps_taken(), 3);

        // Continuing from the copy matches continuing the original.
        let bag2 = One(bag.0.to_param());
        bag.0.sum().unwrap().backward().unwrap();
        bag2.0.sum().unwrap().backward().unwrap();
        let a = opt.step(&bag, 0.05).unwrap();
        let b = reloaded.step(&bag2, 0.05).unwrap();
        assert_eq!(a.0.data(), b.0.data());
    }

    #[test]
    fn sft_view_splits_inputs_targets_and_score_start() {
        let ex = TrainExample {
            tokens: vec![1, 5, 6, 7],
            loss_from: 2,
            dataset: "d".to_string(),
        };
        let (input, targets, score_from) = ex.sft_view().unwrap();
        assert_eq!(input, &[1, 5, 6]);
        assert_eq!(targets, &[5, 6, 7]);
        assert_eq!(score_from, 1); // rows scoring tokens 6, 7

        for bad_from in [0, 4] {
            let bad = TrainExample {
                loss_from: bad_from,
                ..ex.clone()
            };
            assert!(bad.validate().is_err(), "loss_from {bad_from}");
        }
    }

    /// Constant-continuation corpus: every sequence ends `…, t, 9, 9`,
    /// so the optimum is a strong logit bias toward 9 — squarely inside
    /// what Q/V adapters over a frozen random readout can express.
    fn always_nine_corpus(dataset: &str) -> Vec<TrainExample> {
        (2..8usize)
            .map(|t| TrainExample {
                tokens: vec![1, t, 9, 9],
                loss_from: 2,
                dataset: dataset.to_string(),
            })
            .collect()
    }

    #[test]
    fn mtl_training_reduces_loss_and_leaves_the_base_untouched() {
        let mut rng = Rng::new(42);
        let base = init_base(&tiny_model_cfg(), &mut rng).unwrap();
        let fingerprint = base.checksum();
        let corpus = always_nine_corpus("only");
        let mut cfg = tiny_train_cfg(TrainMode::Mtl);
        cfg.steps = 80;
        cfg.max_lr = 2e-2;

        // Pre-training loss of the raw base, unsmoothed.
        let eval = |set: Option<&AdapterSet>| -> f64 {
            let mut total = 0.0;
            let mut n = 0;
            for ex in &corpus {
                let (input, targets, from) = ex.sft_view().unwrap();
                let logits = match set {
                    Some(s) => forward_adapted(&base, s, input).unwrap(),
                    None => forward_base(&base, input).unwrap(),
                };
                let (sum, count) = logits.cross_entropy_sum(targets, 0.0, from).unwrap();
                total += sum.item().unwrap();
                n += count;
            }
            total / n as f64
        };
        let before = eval(None);
        let (trained, logs) = train_mtl(base.clone(), &corpus, &cfg).unwrap();
        let after = eval(Some(&trained.pairs));
        assert_eq!(logs.len(), 80);
        assert!(
            after < before * 0.6,
            "training must cut loss: {before} → {after}"
        );
        assert_eq!(trained.base.checksum(), fingerprint, "base must stay frozen");
    }

    #[test]
    fn conditioned_training_runs_and_moves_hypernet_parameters() {
        let mut rng = Rng::new(43);
        let base = init_base(&tiny_model_cfg(), &mut rng).unwrap();
        let corpus = repeat_corpus(&["a", "b"]);
        let mut cfg = tiny_train_cfg(TrainMode::ZhyperDiag);
        cfg.steps = 30;
        cfg.max_lr = 2e-2;
        cfg.grad_accum = 2; // exercise gradient accumulation too
        let contexts = FixedContexts::new(
            [
                (
                    "a".to_string(),
                    Tensor::from_vec(&[5], vec![1.0, 0.0, 0.0, 0.5, -0.5]).unwrap(),
                ),
                (
                    "b".to_string(),
                    Tensor::from_vec(&[5], vec![0.0, 1.0, -0.5, 0.0, 0.5]).unwrap(),
                ),
            ]
            .into(),
        )
        .unwrap();

        let fresh = init_conditioned(base.clone(), 5, &cfg).unwrap();
        let head_before = fresh.hyper.head.b.data().to_vec();
        let fingerprint = base.checksum();
        let (trained, logs) = train_zhyper(base, &corpus, &contexts, &cfg).unwrap();
        assert_eq!(logs.len(), 30);
        assert!(logs.iter().all(|l| l.loss.is_finite()));
        assert!(logs.last().unwrap().loss < logs.first().unwrap().loss);
        assert_eq!(trained.base.checksum(), fingerprint);
        // B-factors start at zero, so hypernet gradients are zero at
        // step 0 — but once B moves, the signal head must move too.
        assert_ne!(trained.hyper.head.b.data(), head_before.as_slice());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let mut rng = Rng::new(44);
        let base = init_base(&tiny_model_cfg(), &mut rng).unwrap();
        let corpus = repeat_corpus(&["only"]);
        let cfg = tiny_train_cfg(TrainMode::Mtl);

        let (run1, logs1) = train_mtl(base.clone(), &corpus, &cfg).unwrap();
        let (run2, logs2) = train_mtl(base.clone(), &corpus, &cfg).unwrap();
        assert_eq!(logs1, logs2, "same seed, same trace");
        for (a, b) in run1.params().iter().zip(run2.params()) {
            assert_eq!(a.data(), b.data());
        }

        // Stop at step 7 (of the same 12-step schedule), checkpoint the
        // optimizer, reload, and finish.
        let mut rng = Rng::new(cfg.seed);
        let pairs =
            init_pairs(&tiny_model_cfg(), cfg.rank, cfg.adapter_scale, cfg.a_init_std, &mut rng)
                .unwrap();
        let model = MtlModel {
            base: base.clone(),
            pairs,
        };
        let mut opt = AdamW::new(cfg.weight_decay);
        let (mid, mut logs_a) = resume_mtl(model, &mut opt, 0, 7, &corpus, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        opt.save(&dir.path().join("opt")).unwrap();
        let mut opt2 = AdamW::load(&dir.path().join("opt")).unwrap();
        let (done, logs_b) = resume_mtl(mid, &mut opt2, 7, cfg.steps, &corpus, &cfg).unwrap();
        logs_a.extend(logs_b);
        assert_eq!(logs_a, logs1, "resumed trace matches the one-shot run");
        for (a, b) in done.params().iter().zip(run1.params()) {
            assert_eq!(a.data(), b.data(), "resumed weights match bit for bit");
        }
    }

    #[test]
    fn oracle_mode_trains_one_bank_per_dataset_on_its_own_data() {
        let mut rng = Rng::new(45);
        let base = init_base(&tiny_model_cfg(), &mut rng).unwrap();
        // Dataset "x" repeats the token; dataset "y" always continues
        // with 9 regardless of input. A bank trained only on one cannot
        // be optimal for the other.
        let mut corpus = repeat_corpus(&["x"]);
        corpus.extend(always_nine_corpus("y"));
        let mut cfg = tiny_train_cfg(TrainMode::Oracle);
        cfg.steps = 60;
        cfg.max_lr = 2e-2;
        let banks = train_oracle(&base, &corpus, &cfg).unwrap();
        assert_eq!(
            banks.keys().collect::<Vec<_>>(),
            vec!["x", "y"],
            "one bank per dataset"
        );

        let mean_loss = |set: &AdapterSet, data: &[TrainExample]| -> f64 {
            let mut total = 0.0;
            let mut n = 0;
            for ex in data {
                let (input, targets, from) = ex.sft_view().unwrap();
                let logits = forward_adapted(&base, set, input).unwrap();
                let (sum, count) = logits.cross_entropy_sum(targets, 0.0, from).unwrap();
                total += sum.item().unwrap();
                n += count;
            }
            total / n as f64
        };
        let x_data: Vec<_> = corpus.iter().filter(|e| e.dataset == "x").cloned().collect();
        let y_data: Vec<_> = corpus.iter().filter(|e| e.dataset == "y").cloned().collect();
        let (x_bank, _) = &banks["x"];
        let (y_bank, _) = &banks["y"];
        assert!(mean_loss(x_bank, &x_data) < mean_loss(y_bank, &x_data));
        assert!(mean_loss(y_bank, &y_data) < mean_loss(x_bank, &y_data));
    }

    #[test]
    fn loss_csv_round_trips() {
        let logs = vec![
            StepLog {
                step: 0,
                lr: 0.0,
                loss: 2.5,
            },
            StepLog {
                step: 1,
                lr: 1.25e-4,
                loss: 2.25,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&path, &logs).unwrap();
        assert_eq!(read_loss_csv(&path).unwrap(), logs);
        std::fs::write(&path, "step,lr\n0,1\n").unwrap();
        assert!(read_loss_csv(&path).is_err());
    }

    #[test]
    fn divergent_loss_is_reported_not_propagated() {
        // A micro-loss that overflows to inf and then NaNs via inf − inf;
        // the driver must stop with a diagnostic, not feed NaN to AdamW.
        let bag = One(Tensor::param(&[1], vec![1.0]).unwrap());
        let cfg = tiny_train_cfg(TrainMode::Mtl);
        let corpus = repeat_corpus(&["only"]);
        let mut opt = AdamW::new(cfg.weight_decay);
        let outcome = drive(
            bag,
            &cfg,
            &corpus,
            &mut opt,
            0,
            cfg.steps,
            &mut |b: &One, _batch, _n, _c| {
                let inf = b.0.scale(1e308).scale(1e308).sum()?;
                Ok((inf.sub(&inf)?, 1))
            },
        );
        let err = match outcome {
            Ok(_) => panic!("expected the driver to refuse a NaN loss"),
            Err(e) => e.to_string(),
        };
        assert!(err.contains("diverged"), "{err}");
    }
}
