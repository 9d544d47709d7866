//! Desk-scale decoder-only transformer: the frozen base model whose Q
//! and V projections take modulated adapters.
//!
//! Architecture: learned token + position embeddings, pre-norm residual
//! blocks (causal self-attention, then a GELU feed-forward), a final
//! norm, and a linear vocabulary head. Attention is grouped-query: query
//! heads of width `q_out / n_heads`, and `v_out / head_dim` key/value
//! heads shared round-robin — so Q and V projections can have the
//! asymmetric output widths that make per-type adapter budgets differ.
//!
//! Base weights are plain constants, not trainable leaves: the backward
//! pass cannot reach them by construction, which is the strongest form
//! of "frozen". Only adapter factors and the hypernetwork train.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hypernet::HyperNetwork;
use crate::lora::{adapted_forward, AdapterSet, LoRAPair, Modulation, ProjKind};
use crate::numerics::ztsr;
use crate::numerics::{concat_cols, Precision, Rng, Tensor};
use crate::params::ParamBag;

/// Embedding tables draw from N(0, 1); projections use 1/√fan_in. Unit
/// embedding scale is deliberate: a pre-norm layer normalizes it away,
/// and training-time embedding noise (α/√(seq·d), tuned against
/// unit-norm embeddings) stays a mild regularizer instead of drowning
/// the signal at desk-scale sequence lengths.
const EMB_STD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Q projection output width.
    pub q_out: usize,
    /// K/V projection output width (the grouped-query dimension).
    pub v_out: usize,
}

impl ModelConfig {
    /// The default toy shape: 2 layers of d_model 64 with a 4:1 ratio
    /// between Q and V output widths, mirroring the asymmetric projection
    /// dims of full-scale grouped-query models.
    pub fn desk_7b_shape() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 16,
            max_seq: 16,
            q_out: 64,
            v_out: 16,
        }
    }

    /// Field names accepted by [`ModelConfig::apply_kv`], in the order
    /// [`ModelConfig::to_kv`] emits them.
    pub const KEYS: [&'static str; 8] = [
        "layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq", "q_out", "v_out",
    ];

    pub fn has_key(key: &str) -> bool {
        Self::KEYS.contains(&key)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            self.layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.vocab_size,
            self.max_seq,
            self.q_out,
            self.v_out,
        ]
        .iter()
        .zip(Self::KEYS)
        .map(|(v, k)| (k.to_string(), v.to_string()))
        .collect()
    }

    /// Apply `key = value` overrides; unknown keys and unparsable
    /// values are config errors, and the result is re-validated.
    pub fn apply_kv(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (key, value) in pairs {
            let v: usize = value.parse().map_err(|_| {
                Error::config(format!("bad value {value:?} for {key}"))
            })?;
            match key.as_str() {
                "layers" => self.layers = v,
                "d_model" => self.d_model = v,
                "n_heads" => self.n_heads = v,
                "d_ff" => self.d_ff = v,
                "vocab_size" => self.vocab_size = v,
                "max_seq" => self.max_seq = v,
                "q_out" => self.q_out = v,
                "v_out" => self.v_out = v,
                _ => {
                    return Err(Error::config(format!(
                        "unknown model option {key:?}"
                    )))
                }
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("q_out", self.q_out),
            ("v_out", self.v_out),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("model config: {name} must be positive")));
            }
        }
        if self.q_out % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model config: q_out {} not divisible by n_heads {}",
                self.q_out, self.n_heads
            )));
        }
        let head_dim = self.q_out / self.n_heads;
        if self.v_out % head_dim != 0 {
            return Err(Error::config(format!(
                "model config: v_out {} not divisible by head width {head_dim}",
                self.v_out
            )));
        }
        let n_kv = self.v_out / head_dim;
        if self.n_heads % n_kv != 0 {
            return Err(Error::config(format!(
                "model config: {} query heads cannot share {n_kv} key/value heads evenly",
                self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.q_out / self.n_heads
    }

    pub fn n_kv_heads(&self) -> usize {
        self.v_out / self.head_dim()
    }

    /// Adapter dimensions per projection type: (d_in, d_out).
    pub fn proj_dims(&self, kind: ProjKind) -> (usize, usize) {
        match kind {
            ProjKind::Q => (self.d_model, self.q_out),
            ProjKind::V => (self.d_model, self.v_out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub ff1: Tensor,
    pub ff1_b: Tensor,
    pub ff2: Tensor,
    pub ff2_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct BaseWeights {
    pub cfg: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub ln_f_g: Tensor,
    pub ln_f_b: Tensor,
    pub head: Tensor,
}

const LN_EPS: f64 = 1e-5;

fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.standard_normal() * std).collect();
    Tensor::from_vec(shape, data).expect("finite gaussian draws")
}

/// Fresh frozen base. Same seed, same weights, bit for bit.
pub fn init_base(cfg: &ModelConfig, rng: &mut Rng) -> Result<BaseWeights> {
    cfg.validate()?;
    let mut rng = rng.split(0x42_41_53_45);
    let d = cfg.d_model;
    let proj = |rng: &mut Rng, d_in: usize, d_out: usize| {
        gaussian(rng, &[d_in, d_out], 1.0 / (d_in as f64).sqrt())
    };
    let tok_emb = gaussian(&mut rng, &[cfg.vocab_size, d], EMB_STD);
    let pos_emb = gaussian(&mut rng, &[cfg.max_seq, d], EMB_STD);
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        layers.push(LayerWeights {
            ln1_g: Tensor::ones(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: proj(&mut rng, d, cfg.q_out),
            wk: proj(&mut rng, d, cfg.v_out),
            wv: proj(&mut rng, d, cfg.v_out),
            wo: proj(&mut rng, cfg.q_out, d),
            ln2_g: Tensor::ones(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            ff1: proj(&mut rng, d, cfg.d_ff),
            ff1_b: Tensor::zeros(&[cfg.d_ff]),
            ff2: proj(&mut rng, cfg.d_ff, d),
            ff2_b: Tensor::zeros(&[d]),
        });
    }
    Ok(BaseWeights {
        cfg: cfg.clone(),
        tok_emb,
        pos_emb,
        layers,
        ln_f_g: Tensor::ones(&[d]),
        ln_f_b: Tensor::zeros(&[d]),
        head: proj(&mut rng, d, cfg.vocab_size),
    })
}

impl BaseWeights {
    /// Named tensors in canonical order (also the checkpoint order).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (field, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("ff1", &l.ff1),
                ("ff1_b", &l.ff1_b),
                ("ff2", &l.ff2),
                ("ff2_b", &l.ff2_b),
            ] {
                out.push((format!("layer{i}.{field}"), t));
            }
        }
        out.push(("ln_f_g".to_string(), &self.ln_f_g));
        out.push(("ln_f_b".to_string(), &self.ln_f_b));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// FNV-1a over shapes and value bytes of every weight — the
    /// frozen-base fingerprint compared before and after training.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.named_tensors() {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.to_le_bytes());
            }
        }
        hash
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

// ── Checkpointing ────────────────────────────────────────────────────

/// Write the base to `dir`: one ZTSR file per tensor plus `manifest.txt`
/// (config lines, then one `tensor <name> <shape> <role>` line each).
pub fn save_base(dir: &Path, base: &BaseWeights) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::load(dir, e.to_string()))?;
    let cfg = &base.cfg;
    let mut manifest = String::new();
    for (k, v) in [
        ("layers", cfg.layers),
        ("d_model", cfg.d_model),
        ("n_heads", cfg.n_heads),
        ("d_ff", cfg.d_ff),
        ("vocab_size", cfg.vocab_size),
        ("max_seq", cfg.max_seq),
        ("q_out", cfg.q_out),
        ("v_out", cfg.v_out),
    ] {
        writeln!(manifest, "config {k} {v}").unwrap();
    }
    for (name, t) in base.named_tensors() {
        let shape = t
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        writeln!(manifest, "tensor {name} {shape} frozen-base").unwrap();
        ztsr::save_tensor(&dir.join(format!("{name}.ztsr")), t, Precision::F64)?;
    }
    std::fs::write(dir.join("manifest.txt"), manifest)
        .map_err(|e| Error::load(dir, e.to_string()))
}

/// Load a base checkpoint written by [`save_base`], verifying that every
/// manifest entry exists with its declared shape.
pub fn load_base(dir: &Path) -> Result<BaseWeights> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    let mut config: BTreeMap<String, usize> = BTreeMap::new();
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["config", key, value] => {
                let value = value.parse::<usize>().map_err(|_| {
                    Error::load(
                        &manifest_path,
                        format!("line {}: bad config value {value:?}", lineno + 1),
                    )
                })?;
                config.insert(key.to_string(), value);
            }
            ["tensor", name, shape, _role] => {
                let (t, _) = ztsr::load_tensor(&dir.join(format!("{name}.ztsr")))?;
                let declared: Vec<usize> = shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| {
                        Error::load(
                            &manifest_path,
                            format!("line {}: bad shape {shape:?}", lineno + 1),
                        )
                    })?;
                if t.shape() != declared {
                    return Err(Error::load(
                        &manifest_path,
                        format!(
                            "tensor {name}: file has shape {:?} but manifest declares {declared:?}",
                            t.shape()
                        ),
                    ));
                }
                tensors.insert(name.to_string(), t);
            }
            _ => {
                return Err(Error::load(
                    &manifest_path,
                    format!("line {}: unrecognized entry {line:?}", lineno + 1),
                ))
            }
        }
    }
    let get_cfg = |key: &str| -> Result<usize> {
        config
            .get(key)
            .copied()
            .ok_or_else(|| Error::load(&manifest_path, format!("missing config {key}")))
    };
    let cfg = ModelConfig {
        layers: get_cfg("layers")?,
        d_model: get_cfg("d_model")?,
        n_heads: get_cfg("n_heads")?,
        d_ff: get_cfg("d_ff")?,
        vocab_size: get_cfg("vocab_size")?,
        max_seq: get_cfg("max_seq")?,
        q_out: get_cfg("q_out")?,
        v_out: get_cfg("v_out")?,
    };
    cfg.validate()?;
    let mut take = |name: &str| -> Result<Tensor> {
        tensors
            .remove(name)
            .ok_or_else(|| Error::load(&manifest_path, format!("missing tensor {name}")))
    };
    let tok_emb = take("tok_emb")?;
    let pos_emb = take("pos_emb")?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        layers.push(LayerWeights {
            ln1_g: take(&format!("layer{i}.ln1_g"))?,
            ln1_b: take(&format!("layer{i}.ln1_b"))?,
            wq: take(&format!("layer{i}.wq"))?,
            wk: take(&format!("layer{i}.wk"))?,
            wv: take(&format!("layer{i}.wv"))?,
            wo: take(&format!("layer{i}.wo"))?,
            ln2_g: take(&format!("layer{i}.ln2_g"))?,
            ln2_b: take(&format!("layer{i}.ln2_b"))?,
            ff1: take(&format!("layer{i}.ff1"))?,
            ff1_b: take(&format!("layer{i}.ff1_b"))?,
            ff2: take(&format!("layer{i}.ff2"))?,
            ff2_b: take(&format!("layer{i}.ff2_b"))?,
        });
    }
    let base = BaseWeights {
        cfg,
        tok_emb,
        pos_emb,
        layers,
        ln_f_g: take("ln_f_g")?,
        ln_f_b: take("ln_f_b")?,
        head: take("head")?,
    };
    if let Some(stray) = tensors.keys().next() {
        return Err(Error::load(
            &manifest_path,
            format!("manifest lists tensor {stray} that the model does not use"),
        ));
    }
    Ok(base)
}

// ── Forward passes ───────────────────────────────────────────────────

/// Per-site adapter source for one forward pass.
enum Adapters<'a> {
    None,
    /// Baked bank: each site's (pair, modulation) comes from the set.
    Set(&'a AdapterSet),
    /// Shared pairs plus freshly generated modulations, site-keyed.
    Generated(&'a AdapterSet, &'a BTreeMap<(usize, ProjKind), Modulation>),
}

impl Adapters<'_> {
    fn at(&self, layer: usize, kind: ProjKind) -> Result<Option<(&LoRAPair, &Modulation)>> {
        match self {
            Adapters::None => Ok(None),
            Adapters::Set(set) => {
                let (pair, m) = set.get(layer, kind)?;
                Ok(Some((pair, m)))
            }
            Adapters::Generated(set, signals) => {
                let (pair, _) = set.get(layer, kind)?;
                let m = signals.get(&(layer, kind)).ok_or_else(|| {
                    Error::key(format!("no generated signal for (layer {layer}, {kind})"))
                })?;
                Ok(Some((pair, m)))
            }
        }
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::input("forward: empty token sequence".to_string()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::input(format!(
            "forward: sequence length {} exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::input(format!(
            "forward: token id {bad} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn forward_inner(
    base: &BaseWeights,
    tokens: &[usize],
    adapters: &Adapters,
    embedding_noise: Option<&Tensor>,
) -> Result<Tensor> {
    check_tokens(&base.cfg, tokens)?;
    let cfg = &base.cfg;
    let s = tokens.len();
    let head_dim = cfg.head_dim();
    let group_size = cfg.n_heads / cfg.n_kv_heads();

    let mut x = base
        .tok_emb
        .embedding_lookup(tokens)?
        .add(&base.pos_emb.slice_rows(0, s)?.detach())?;
    if let Some(noise) = embedding_noise {
        x = x.add(noise)?;
    }

    for (layer_idx, layer) in base.layers.iter().enumerate() {
        let h = x.layer_norm(&layer.ln1_g, &layer.ln1_b, LN_EPS)?;
        let q = match adapters.at(layer_idx, ProjKind::Q)? {
            Some((pair, m)) => adapted_forward(&layer.wq, pair, m, &h)?,
            None => h.matmul(&layer.wq)?,
        };
        let k = h.matmul(&layer.wk)?;
        let v = match adapters.at(layer_idx, ProjKind::V)? {
            Some((pair, m)) => adapted_forward(&layer.wv, pair, m, &h)?,
            None => h.matmul(&layer.wv)?,
        };

        let mut head_outputs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let q_h = q.slice_cols(head * head_dim, (head + 1) * head_dim)?;
            let group = head / group_size;
            let k_g = k.slice_cols(group * head_dim, (group + 1) * head_dim)?;
            let v_g = v.slice_cols(group * head_dim, (group + 1) * head_dim)?;
            let scores = q_h
                .matmul(&k_g.transpose()?)?
                .scale(1.0 / (head_dim as f64).sqrt());
            let probs = scores.causal_mask_add()?.softmax_rows()?;
            head_outputs.push(probs.matmul(&v_g)?);
        }
        let refs: Vec<&Tensor> = head_outputs.iter().collect();
        let attn = concat_cols(&refs)?.matmul(&layer.wo)?;
        x = x.add(&attn)?;

        let h2 = x.layer_norm(&layer.ln2_g, &layer.ln2_b, LN_EPS)?;
        let ff = h2
            .matmul(&layer.ff1)?
            .add(&layer.ff1_b)?
            .gelu()
            .matmul(&layer.ff2)?
            .add(&layer.ff2_b)?;
        x = x.add(&ff)?;
    }

    x.layer_norm(&base.ln_f_g, &base.ln_f_b, LN_EPS)?
        .matmul(&base.head)
}

/// Logits of the unadapted base: `[seq × vocab]`.
pub fn forward_base(base: &BaseWeights, tokens: &[usize]) -> Result<Tensor> {
    forward_inner(base, tokens, &Adapters::None, None)
}

/// Logits with a baked adapter bank applied at every configured site.
pub fn forward_adapted(base: &BaseWeights, set: &AdapterSet, tokens: &[usize]) -> Result<Tensor> {
    forward_inner(base, tokens, &Adapters::Set(set), None)
}

/// [`forward_adapted`] with optional training-time embedding noise.
pub fn forward_adapted_noisy(
    base: &BaseWeights,
    set: &AdapterSet,
    tokens: &[usize],
    embedding_noise: Option<&Tensor>,
) -> Result<Tensor> {
    forward_inner(base, tokens, &Adapters::Set(set), embedding_noise)
}

/// The frozen base, the shared adapter factors, and the hypernetwork
/// that modulates them per context.
#[derive(Debug, Clone)]
pub struct ConditionedModel {
    pub base: BaseWeights,
    /// Shared factors; modulations here are Identity placeholders.
    pub pairs: AdapterSet,
    pub hyper: HyperNetwork,
}

impl ConditionedModel {
    pub fn new(base: BaseWeights, pairs: AdapterSet, hyper: HyperNetwork) -> Result<Self> {
        if pairs.layers() != base.cfg.layers {
            return Err(Error::config(format!(
                "adapter bank spans {} layers but the model has {}",
                pairs.layers(),
                base.cfg.layers
            )));
        }
        if hyper.cfg.layers != base.cfg.layers {
            return Err(Error::config(format!(
                "hypernetwork knows {} layers but the model has {}",
                hyper.cfg.layers, base.cfg.layers
            )));
        }
        for (&(layer, kind), (pair, _)) in pairs.iter() {
            let (d_in, d_out) = base.cfg.proj_dims(kind);
            if pair.d_in() != d_in || pair.d_out() != d_out {
                return Err(Error::config(format!(
                    "pair at (layer {layer}, {kind}) is {}×{}→{} but the projection needs {d_in}→{d_out}",
                    pair.d_in(),
                    pair.rank,
                    pair.d_out()
                )));
            }
            if pair.rank != hyper.cfg.rank {
                return Err(Error::config(format!(
                    "pair at (layer {layer}, {kind}) has rank {} but the hypernetwork emits rank {}",
                    pair.rank, hyper.cfg.rank
                )));
            }
        }
        Ok(ConditionedModel { base, pairs, hyper })
    }

    /// Logits under context `c`: one batched hypernetwork evaluation
    /// produces all L·|{Q,V}| signals, then each site applies its own.
    pub fn forward_conditioned(&self, tokens: &[usize], c: &Tensor) -> Result<Tensor> {
        self.forward_conditioned_noisy(tokens, c, None)
    }

    /// Training-time variant with optional embedding noise.
    pub fn forward_conditioned_noisy(
        &self,
        tokens: &[usize],
        c: &Tensor,
        embedding_noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        let signals: BTreeMap<_, _> = self.hyper.forward_all(c)?.into_iter().collect();
        forward_inner(
            &self.base,
            tokens,
            &Adapters::Generated(&self.pairs, &signals),
            embedding_noise,
        )
    }

    /// Bake the per-context signals into a standalone adapter bank. The
    /// result is graph-free (safe to serialize) and reproduces
    /// `forward_conditioned` for this context. Its `signal_size` is the
    /// per-context cost in values: L·|{Q,V}|·r or ·r².
    pub fn materialize_adapter(&self, c: &Tensor) -> Result<AdapterSet> {
        let signals: BTreeMap<_, _> = self.hyper.forward_all(c)?.into_iter().collect();
        self.pairs.with_modulations(|key, _| {
            let m = signals
                .get(key)
                .ok_or_else(|| Error::key(format!("no signal for site {key:?}")))?;
            Ok(match m {
                Modulation::Identity => Modulation::Identity,
                Modulation::Diag(z) => Modulation::Diag(z.detach()),
                Modulation::Square(z) => Modulation::Square(z.detach()),
            })
        })
    }
}

impl ParamBag for ConditionedModel {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        for (_, (pair, _)) in self.pairs.iter() {
            f(&pair.a);
            f(&pair.b);
        }
        self.hyper.visit(f);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        // Rebuild factors through f in the same site order visit used.
        let mut entries = BTreeMap::new();
        for (key, (pair, m)) in self.pairs.iter() {
            let rebuilt = LoRAPair {
                a: f(&pair.a),
                b: f(&pair.b),
                rank: pair.rank,
                scale: pair.scale,
            };
            entries.insert(*key, (rebuilt, m.clone()));
        }
        let pairs = AdapterSet::new(self.pairs.layers(), self.pairs.kinds(), entries)
            .expect("site coverage unchanged");
        ConditionedModel {
            base: self.base.clone(),
            pairs,
            hyper: self.hyper.map(f),
        }
    }
}

/// Fresh trainable factors for every (layer, Q/V) site: A ~ N(0, a_std),
/// B = 0 — so every delta starts at zero and the model starts exactly at
/// the base — with Identity modulation placeholders.
pub fn init_pairs(
    cfg: &ModelConfig,
    rank: usize,
    scale: f64,
    a_std: f64,
    rng: &mut Rng,
) -> Result<AdapterSet> {
    cfg.validate()?;
    if rank == 0 {
        return Err(Error::config("adapter rank must be positive".to_string()));
    }
    let mut rng = rng.split(0x50_41_49_52);
    let mut entries = BTreeMap::new();
    for layer in 0..cfg.layers {
        for kind in ProjKind::ALL {
            let (d_in, d_out) = cfg.proj_dims(kind);
            let a_data: Vec<f64> = (0..d_in * rank)
                .map(|_| rng.standard_normal() * a_std)
                .collect();
            let pair = LoRAPair::new(
                Tensor::param(&[d_in, rank], a_data)?,
                Tensor::zeros(&[rank, d_out]).to_param(),
                scale,
            )?;
            entries.insert((layer, kind), (pair, Modulation::Identity));
        }
    }
    AdapterSet::new(cfg.layers, &ProjKind::ALL, entries)
}
