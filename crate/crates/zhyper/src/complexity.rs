//! Parameter-budget arithmetic: what each adaptation method costs to
//! train and what it must materialize per context.
//!
//! Five methods are compared on equal footing:
//!
//! * `mtl` — one shared adapter bank, no conditioning.
//! * `zhyper-diag` / `zhyper-square` — shared factors plus the trunk
//!   from [`crate::hypernet`], whose head emits r (or r²) values.
//! * `t2l` — a modeled full-adapter hypernetwork: the same trunk, but
//!   one head **per projection type** emitting the entire flattened
//!   r·(d_in+d_out) adapter, and no shared factors.
//! * `hyperlora` — the same full-adapter emission plus a declared
//!   per-task query-embedding table.
//!
//! The t2l/hyperlora budgets are models of published architectures we
//! do not reimplement; their heads-emit-everything convention and the
//! declared table size are assumptions, and their budgets are flagged
//! [`ParamBudget::modeled`]. The zhyper budgets are not models: a test
//! checks them against the parameter count of the actually-constructed
//! network, tensor for tensor.

use std::fmt;

use crate::error::{Error, Result};
use crate::hypernet::HyperVariant;
use crate::lora::ProjKind;
use crate::model::ModelConfig;

// ── Specs ────────────────────────────────────────────────────────────

/// The adapted sites of a transformer: per projection type, the dims an
/// adapter must bridge, repeated across `layers`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub layers: usize,
    /// Ordered (label, d_in, d_out) per adapted projection type.
    pub sites: Vec<(String, usize, usize)>,
    pub rank: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.rank == 0 {
            return Err(Error::contract(
                "architecture spec needs positive layers and rank".to_string(),
            ));
        }
        if self.sites.is_empty() {
            return Err(Error::contract("no adapted sites declared".to_string()));
        }
        for (label, d_in, d_out) in &self.sites {
            if *d_in == 0 || *d_out == 0 {
                return Err(Error::contract(format!(
                    "site {label}: dimensions must be positive"
                )));
            }
        }
        Ok(())
    }

    /// The 32-layer reference shape whose query and value projections
    /// are 4096→4096 and 4096→1024 — the geometry all published totals
    /// in this family are quoted against.
    pub fn ref_7b(rank: usize) -> ArchSpec {
        ArchSpec {
            layers: 32,
            sites: vec![
                ("q".to_string(), 4096, 4096),
                ("v".to_string(), 4096, 1024),
            ],
            rank,
        }
    }

    /// The adapted sites of an actual model config, so budgets can be
    /// checked against a constructed network.
    pub fn from_model(cfg: &ModelConfig, rank: usize) -> ArchSpec {
        ArchSpec {
            layers: cfg.layers,
            sites: ProjKind::ALL
                .iter()
                .map(|&k| {
                    let (d_in, d_out) = cfg.proj_dims(k);
                    (k.to_string(), d_in, d_out)
                })
                .collect(),
            rank,
        }
    }
}

/// Widths of the shared trunk plus the declared size of the modeled
/// hyperlora task table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperSpec {
    pub d_c: usize,
    pub d_t: usize,
    pub d_l: usize,
    pub d_mlp_in: usize,
    pub d_mlp_hidden: usize,
    pub d_mlp_out: usize,
    /// Rows of the modeled per-task query-embedding table (hyperlora
    /// only); each row is `d_c` wide. Zero means "not declared".
    pub hyperlora_tasks: usize,
}

impl HyperSpec {
    /// Widths matching [`crate::hypernet::HyperConfig::canonical`].
    pub fn canonical() -> HyperSpec {
        HyperSpec {
            d_c: 1024,
            d_t: 64,
            d_l: 64,
            d_mlp_in: 128,
            d_mlp_hidden: 512,
            d_mlp_out: 512,
            hyperlora_tasks: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_c", self.d_c),
            ("d_t", self.d_t),
            ("d_l", self.d_l),
            ("d_mlp_in", self.d_mlp_in),
            ("d_mlp_hidden", self.d_mlp_hidden),
            ("d_mlp_out", self.d_mlp_out),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::contract(format!(
                    "hyper spec: {name} must be positive"
                )));
            }
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.d_c + self.d_t + self.d_l
    }

    /// proj + three trunk blocks, weights and biases — everything
    /// before the head.
    fn trunk_params(&self) -> usize {
        let linear = |d_in: usize, d_out: usize| d_in * d_out + d_out;
        linear(self.input_width(), self.d_mlp_in)
            + linear(self.d_mlp_in, self.d_mlp_hidden)
            + linear(self.d_mlp_hidden, self.d_mlp_hidden)
            + linear(self.d_mlp_hidden, self.d_mlp_out)
    }

    fn head_params(&self, out: usize) -> usize {
        self.d_mlp_out * out + out
    }

    /// Type and layer tag tables for an architecture.
    fn table_params(&self, spec: &ArchSpec) -> usize {
        spec.sites.len() * self.d_t + spec.layers * self.d_l
    }
}

// ── Methods and budgets ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Mtl,
    ZhyperDiag,
    ZhyperSquare,
    T2l,
    HyperLora,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Mtl,
        Method::ZhyperDiag,
        Method::ZhyperSquare,
        Method::T2l,
        Method::HyperLora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mtl => "mtl",
            Method::ZhyperDiag => "zhyper-diag",
            Method::ZhyperSquare => "zhyper-square",
            Method::T2l => "t2l",
            Method::HyperLora => "hyperlora",
        }
    }

    /// Budgets for methods we model rather than build carry this flag
    /// (and a "(modeled)" marker in reports).
    pub fn modeled(self) -> bool {
        matches!(self, Method::T2l | Method::HyperLora)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s {
            "mtl" => Ok(Method::Mtl),
            "zhyper-diag" => Ok(Method::ZhyperDiag),
            "zhyper-square" | "zhyper-mix" => Ok(Method::ZhyperSquare),
            "t2l" => Ok(Method::T2l),
            "hyperlora" => Ok(Method::HyperLora),
            other => Err(Error::contract(format!(
                "unknown method {other:?} (expected mtl, zhyper-diag, zhyper-square, t2l, or hyperlora)"
            ))),
        }
    }
}

/// Itemized trainable-parameter budget for one method on one
/// architecture. `total` is always the sum of the three parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBudget {
    pub method: Method,
    /// Shared low-rank factors (A and B across all sites).
    pub lora_params: usize,
    /// Trunk and head(s) of the generating network.
    pub hyper_params: usize,
    /// Tag tables and any declared task table.
    pub embed_params: usize,
    pub total: usize,
    /// What one context costs to materialize: the signal for the
    /// zhyper variants, the full adapters for t2l/hyperlora, nothing
    /// for mtl.
    pub per_context_output_size: usize,
    /// Symbolic capacity order of the induced hypothesis class.
    pub rademacher_order: &'static str,
    pub modeled: bool,
}

/// Trainable parameters of plain low-rank factors over every site:
/// Σ over layers and types of r·(d_in + d_out).
pub fn lora_param_count(spec: &ArchSpec) -> Result<usize> {
    spec.validate()?;
    Ok(spec
        .sites
        .iter()
        .map(|(_, d_in, d_out)| spec.rank * (d_in + d_out))
        .sum::<usize>()
        * spec.layers)
}

/// What one context costs to materialize under each method: the
/// modulation signal for the zhyper variants (r or r² values per
/// site), the entire adapter stack for full-emission methods, and
/// nothing for the unconditioned baseline.
pub fn per_context_signal_size(method: Method, spec: &ArchSpec) -> Result<usize> {
    spec.validate()?;
    let n_sites = spec.layers * spec.sites.len();
    Ok(match method {
        Method::Mtl => 0,
        Method::ZhyperDiag => n_sites * spec.rank,
        Method::ZhyperSquare => n_sites * spec.rank * spec.rank,
        Method::T2l | Method::HyperLora => lora_param_count(spec)?,
    })
}

/// The symbolic capacity tag for each method's hypothesis class. The
/// orders are comparable because the classes nest: scaling r values ⊆
/// mixing r² values ⊆ emitting all r(d_in+d_out) entries.
pub fn rademacher_order(method: Method) -> &'static str {
    match method {
        Method::ZhyperDiag => "√(r/N)",
        Method::ZhyperSquare => "r/√N",
        Method::Mtl | Method::T2l | Method::HyperLora => "√(r(d_in+d_out)/N)",
    }
}

/// Itemized budget for `method` on `spec`, with generator widths from
/// `hspec` where the method has a generator.
pub fn method_budget(method: Method, spec: &ArchSpec, hspec: &HyperSpec) -> Result<ParamBudget> {
    spec.validate()?;
    hspec.validate()?;
    let (lora_params, hyper_params, embed_params) = match method {
        Method::Mtl => (lora_param_count(spec)?, 0, 0),
        Method::ZhyperDiag | Method::ZhyperSquare => {
            let variant = if method == Method::ZhyperDiag {
                HyperVariant::Diag
            } else {
                HyperVariant::Square
            };
            let head = hspec.head_params(variant.signal_len(spec.rank));
            (
                lora_param_count(spec)?,
                hspec.trunk_params() + head,
                hspec.table_params(spec),
            )
        }
        Method::T2l => {
            // Full-adapter emission: one head per projection type, each
            // wide enough for that type's flattened factors. The
            // description encoder is external (as it is for us), so it
            // contributes nothing here.
            let heads: usize = spec
                .sites
                .iter()
                .map(|(_, d_in, d_out)| hspec.head_params(spec.rank * (d_in + d_out)))
                .sum();
            (0, hspec.trunk_params() + heads, hspec.table_params(spec))
        }
        Method::HyperLora => {
            let heads: usize = spec
                .sites
                .iter()
                .map(|(_, d_in, d_out)| hspec.head_params(spec.rank * (d_in + d_out)))
                .sum();
            (
                0,
                hspec.trunk_params() + heads,
                hspec.table_params(spec) + hspec.hyperlora_tasks * hspec.d_c,
            )
        }
    };
    Ok(ParamBudget {
        method,
        lora_params,
        hyper_params,
        embed_params,
        total: lora_params + hyper_params + embed_params,
        per_context_output_size: per_context_signal_size(method, spec)?,
        rademacher_order: rademacher_order(method),
        modeled: method.modeled(),
    })
}

/// Budgets for every method on one (spec, hspec) pair, in enum order.
pub fn standard_budgets(spec: &ArchSpec, hspec: &HyperSpec) -> Result<Vec<ParamBudget>> {
    Method::ALL
        .iter()
        .map(|&m| method_budget(m, spec, hspec))
        .collect()
}

// ── Reports ──────────────────────────────────────────────────────────

/// `12_345_678` → `"12,345,678"`.
pub fn with_separators(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Two-decimal millions, the convention budget tables are quoted in.
pub fn in_millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

/// Aligned plain-text budget table.
pub fn budget_report_text(rows: &[ParamBudget]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    writeln!(
        out,
        "{:<24} {:>14} {:>14} {:>12} {:>14} {:>9} {:>12}  {}",
        "method", "lora", "hyper", "embed", "total", "≈", "per-context", "capacity"
    )
    .unwrap();
    for b in rows {
        let name = if b.modeled {
            format!("{} (modeled)", b.method)
        } else {
            b.method.to_string()
        };
        writeln!(
            out,
            "{:<24} {:>14} {:>14} {:>12} {:>14} {:>9} {:>12}  {}",
            name,
            with_separators(b.lora_params),
            with_separators(b.hyper_params),
            with_separators(b.embed_params),
            with_separators(b.total),
            in_millions(b.total),
            with_separators(b.per_context_output_size),
            b.rademacher_order,
        )
        .unwrap();
    }
    out
}

/// Machine-readable itemization: `method,component,count` with one row
/// per part plus `total` and `per_context_output` rows.
pub fn budget_report_csv(rows: &[ParamBudget]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("method,component,count\n");
    for b in rows {
        for (component, count) in [
            ("lora", b.lora_params),
            ("hyper", b.hyper_params),
            ("embed", b.embed_params),
            ("total", b.total),
            ("per_context_output", b.per_context_output_size),
        ] {
            writeln!(out, "{},{component},{count}", b.method).unwrap();
        }
    }
    out
}

/// Group budgets by rank for side-by-side comparison text
/// (`builder(rank)` supplies the spec at each rank).
pub fn rank_sweep_report(
    ranks: &[usize],
    hspec: &HyperSpec,
    builder: impl Fn(usize) -> ArchSpec,
) -> Result<String> {
    let mut out = String::new();
    for &r in ranks {
        let spec = builder(r);
        out.push_str(&format!("rank {r}\n"));
        out.push_str(&budget_report_text(&standard_budgets(&spec, hspec)?));
        out.push('\n');
    }
    Ok(out)
}
