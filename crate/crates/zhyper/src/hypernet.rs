//! The factorized hypernetwork: (context, type, layer) → modulation.
//!
//! One trunk serves every injection site. A site is identified to the
//! network purely through two learned embedding rows — one per projection
//! type, one per layer — concatenated onto the context embedding:
//!
//! ```text
//! input  = c ∥ e_type ∥ e_layer            (d_c + d_t + d_ℓ)
//! x      = input·W_proj + b                (→ d_mlp_in)
//! x      = gelu(x·W_i + b_i)  for 3 blocks (→ d_mlp_hidden → d_mlp_out)
//! signal = x·W_head + b_head               (→ r or r²)
//! ```
//!
//! The head emits r values (diag) or r² (square) — never a full adapter.
//! That fixed-size output is the whole point: adapter quality lives in
//! the shared factors, and the per-context work is a rank-sized signal.
//!
//! Initialization warm-starts at plain LoRA: the head weight is zero and
//! its bias is ones (diag) or a flattened identity (square), so every
//! site's signal is exactly the identity modulation at step zero while
//! gradients through the head are already alive.

use crate::error::{Error, Result};
use crate::lora::{Modulation, ProjKind, SiteKey};
use crate::numerics::{concat_cols, stack_rows, Rng, Tensor};
use crate::params::{Linear, ParamBag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperVariant {
    Diag,
    Square,
}

impl HyperVariant {
    pub fn name(self) -> &'static str {
        match self {
            HyperVariant::Diag => "diag",
            HyperVariant::Square => "square",
        }
    }

    /// Head width for rank r: r or r².
    pub fn signal_len(self, rank: usize) -> usize {
        match self {
            HyperVariant::Diag => rank,
            HyperVariant::Square => rank * rank,
        }
    }
}

impl std::str::FromStr for HyperVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<HyperVariant> {
        match s {
            "diag" => Ok(HyperVariant::Diag),
            // "mix" appears as a synonym for the square variant in some
            // descriptions of this family; accept it quietly.
            "square" | "mix" => Ok(HyperVariant::Square),
            other => Err(Error::config(format!(
                "unknown modulation variant {other:?} (expected diag or square)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperConfig {
    pub layers: usize,
    pub d_c: usize,
    pub d_t: usize,
    pub d_l: usize,
    pub d_mlp_in: usize,
    pub d_mlp_hidden: usize,
    pub d_mlp_out: usize,
    pub rank: usize,
    pub variant: HyperVariant,
}

impl HyperConfig {
    /// The canonical widths: 1024-dim contexts, 64-dim type/layer tags,
    /// and the 128→512→512 trunk.
    pub fn canonical(layers: usize, rank: usize, variant: HyperVariant) -> HyperConfig {
        HyperConfig {
            layers,
            d_c: 1024,
            d_t: 64,
            d_l: 64,
            d_mlp_in: 128,
            d_mlp_hidden: 512,
            d_mlp_out: 512,
            rank,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("d_c", self.d_c),
            ("d_t", self.d_t),
            ("d_l", self.d_l),
            ("d_mlp_in", self.d_mlp_in),
            ("d_mlp_hidden", self.d_mlp_hidden),
            ("d_mlp_out", self.d_mlp_out),
            ("rank", self.rank),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::contract(format!(
                    "hypernetwork config: {name} must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.d_c + self.d_t + self.d_l
    }
}

/// Learned identity tags for sites: one row per projection type, one
/// per layer.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    /// `[|{Q,V}| × d_t]`
    pub e_type: Tensor,
    /// `[L × d_ℓ]`
    pub e_layer: Tensor,
}

impl ParamBag for EmbeddingTables {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.e_type);
        f(&self.e_layer);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        EmbeddingTables {
            e_type: f(&self.e_type),
            e_layer: f(&self.e_layer),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HyperNetwork {
    pub cfg: HyperConfig,
    pub tables: EmbeddingTables,
    pub proj: Linear,
    pub trunk: [Linear; 3],
    pub head: Linear,
}

impl ParamBag for HyperNetwork {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.tables.visit(f);
        self.proj.visit(f);
        for block in &self.trunk {
            block.visit(f);
        }
        self.head.visit(f);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        HyperNetwork {
            cfg: self.cfg.clone(),
            tables: self.tables.map(f),
            proj: self.proj.map(f),
            trunk: [
                self.trunk[0].map(f),
                self.trunk[1].map(f),
                self.trunk[2].map(f),
            ],
            head: self.head.map(f),
        }
    }
}

fn gaussian_param(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.standard_normal() * std).collect();
    Tensor::param(shape, data).expect("finite gaussian draws")
}

fn kaiming_linear(rng: &mut Rng, d_in: usize, d_out: usize) -> Linear {
    let std = (2.0 / d_in as f64).sqrt();
    Linear {
        w: gaussian_param(rng, &[d_in, d_out], std),
        b: Tensor::zeros(&[d_out]).to_param(),
    }
}

/// Fresh hypernetwork: gaussian trunk, N(0, 0.02) tables, and the
/// identity-signal head described in the module docs.
pub fn init_hypernet(cfg: &HyperConfig, rng: &mut Rng) -> Result<HyperNetwork> {
    cfg.validate()?;
    let mut rng = rng.split(0x48_59_50_45); // one private stream per concern
    let tables = EmbeddingTables {
        e_type: gaussian_param(&mut rng, &[ProjKind::ALL.len(), cfg.d_t], 0.02),
        e_layer: gaussian_param(&mut rng, &[cfg.layers, cfg.d_l], 0.02),
    };
    let proj = kaiming_linear(&mut rng, cfg.input_width(), cfg.d_mlp_in);
    let trunk = [
        kaiming_linear(&mut rng, cfg.d_mlp_in, cfg.d_mlp_hidden),
        kaiming_linear(&mut rng, cfg.d_mlp_hidden, cfg.d_mlp_hidden),
        kaiming_linear(&mut rng, cfg.d_mlp_hidden, cfg.d_mlp_out),
    ];
    let width = cfg.variant.signal_len(cfg.rank);
    let head_bias = match cfg.variant {
        HyperVariant::Diag => vec![1.0; cfg.rank],
        HyperVariant::Square => {
            let mut id = vec![0.0; cfg.rank * cfg.rank];
            for i in 0..cfg.rank {
                id[i * cfg.rank + i] = 1.0;
            }
            id
        }
    };
    let head = Linear {
        w: Tensor::zeros(&[cfg.d_mlp_out, width]).to_param(),
        b: Tensor::param(&[width], head_bias)?,
    };
    Ok(HyperNetwork {
        cfg: cfg.clone(),
        tables,
        proj,
        trunk,
        head,
    })
}

impl HyperNetwork {
    fn check_context(&self, c: &Tensor) -> Result<()> {
        if c.shape() != [self.cfg.d_c] {
            return Err(Error::Shape {
                op: "hyper_forward",
                lhs: vec![self.cfg.d_c],
                rhs: c.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Raw head output rows for the given sites, one row per site —
    /// exactly `sites.len()` head evaluations, batched through the trunk.
    fn signal_rows(&self, c: &Tensor, sites: &[SiteKey]) -> Result<Tensor> {
        self.check_context(c)?;
        if sites.is_empty() {
            return Err(Error::contract(
                "hyper_forward: no sites requested".to_string(),
            ));
        }
        for &(layer, _) in sites {
            if layer >= self.cfg.layers {
                return Err(Error::key(format!(
                    "hyper_forward: layer {layer} out of range (model has {} layers)",
                    self.cfg.layers
                )));
            }
        }
        let type_ids: Vec<usize> = sites.iter().map(|&(_, t)| t.index()).collect();
        let layer_ids: Vec<usize> = sites.iter().map(|&(l, _)| l).collect();
        let e_t = self.tables.e_type.embedding_lookup(&type_ids)?;
        let e_l = self.tables.e_layer.embedding_lookup(&layer_ids)?;
        let c_rows: Vec<&Tensor> = std::iter::repeat(c).take(sites.len()).collect();
        let c_all = stack_rows(&c_rows)?;
        let input = concat_cols(&[&c_all, &e_t, &e_l])?;
        let mut x = self.proj.forward(&input)?;
        for block in &self.trunk {
            x = block.forward(&x)?.gelu();
        }
        self.head.forward(&x)
    }

    /// Modulation for one injection site.
    pub fn forward(&self, c: &Tensor, kind: ProjKind, layer: usize) -> Result<Modulation> {
        let rows = self.signal_rows(c, &[(layer, kind)])?;
        self.row_to_modulation(&rows, 0)
    }

    /// Modulations for every configured site of one context, evaluated
    /// as a single batch: (layer 0 Q, layer 0 V, layer 1 Q, …).
    pub fn forward_all(&self, c: &Tensor) -> Result<Vec<(SiteKey, Modulation)>> {
        let sites: Vec<SiteKey> = (0..self.cfg.layers)
            .flat_map(|l| ProjKind::ALL.into_iter().map(move |t| (l, t)))
            .collect();
        let rows = self.signal_rows(c, &sites)?;
        sites
            .into_iter()
            .enumerate()
            .map(|(i, site)| Ok((site, self.row_to_modulation(&rows, i)?)))
            .collect()
    }

    fn row_to_modulation(&self, rows: &Tensor, index: usize) -> Result<Modulation> {
        let r = self.cfg.rank;
        let row = rows.row(index)?;
        Ok(match self.cfg.variant {
            HyperVariant::Diag => Modulation::Diag(row),
            HyperVariant::Square => Modulation::Square(row.reshape(&[r, r])?),
        })
    }

    /// Named tensors in canonical (visit) order, for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("e_type".to_string(), &self.tables.e_type),
            ("e_layer".to_string(), &self.tables.e_layer),
            ("proj.w".to_string(), &self.proj.w),
            ("proj.b".to_string(), &self.proj.b),
        ];
        for (i, block) in self.trunk.iter().enumerate() {
            out.push((format!("trunk{i}.w"), &block.w));
            out.push((format!("trunk{i}.b"), &block.b));
        }
        out.push(("head.w".to_string(), &self.head.w));
        out.push(("head.b".to_string(), &self.head.b));
        out
    }
}

/// Write the hypernetwork to `dir`: one ZTSR file per tensor plus a
/// `manifest.txt` of config lines and `tensor <name> <shape> <role>`
/// lines, matching the base-model checkpoint layout.
pub fn save_hypernet(dir: &std::path::Path, h: &HyperNetwork) -> Result<()> {
    use std::fmt::Write as _;
    std::fs::create_dir_all(dir).map_err(|e| Error::load(dir, e.to_string()))?;
    let cfg = &h.cfg;
    let mut manifest = String::new();
    for (k, v) in [
        ("layers", cfg.layers),
        ("d_c", cfg.d_c),
        ("d_t", cfg.d_t),
        ("d_l", cfg.d_l),
        ("d_mlp_in", cfg.d_mlp_in),
        ("d_mlp_hidden", cfg.d_mlp_hidden),
        ("d_mlp_out", cfg.d_mlp_out),
        ("rank", cfg.rank),
    ] {
        writeln!(manifest, "config {k} {v}").unwrap();
    }
    writeln!(manifest, "config variant {}", cfg.variant.name()).unwrap();
    for (name, t) in h.named_tensors() {
        let shape = t
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        writeln!(manifest, "tensor {name} {shape} hypernet").unwrap();
        crate::numerics::ztsr::save_tensor(
            &dir.join(format!("{name}.ztsr")),
            t,
            crate::numerics::Precision::F64,
        )?;
    }
    std::fs::write(dir.join("manifest.txt"), manifest)
        .map_err(|e| Error::load(dir, e.to_string()))
}

/// Load a hypernetwork checkpoint written by [`save_hypernet`]. Loaded
/// tensors come back as trainable parameters.
pub fn load_hypernet(dir: &std::path::Path) -> Result<HyperNetwork> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    let mut config: std::collections::BTreeMap<String, String> = Default::default();
    let mut tensors: std::collections::BTreeMap<String, Tensor> = Default::default();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            ["config", key, value] => {
                config.insert(key.to_string(), value.to_string());
            }
            ["tensor", name, shape, _role] => {
                let (t, _) = crate::numerics::ztsr::load_tensor(&dir.join(format!("{name}.ztsr")))?;
                let shape_str = t
                    .shape()
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("x");
                if shape_str != *shape {
                    return Err(Error::load(
                        &manifest_path,
                        format!("tensor {name}: file has shape {shape_str} but manifest declares {shape}"),
                    ));
                }
                tensors.insert(name.to_string(), t.to_param());
            }
            _ => {
                return Err(Error::load(
                    &manifest_path,
                    format!("line {}: unrecognized entry {line:?}", lineno + 1),
                ))
            }
        }
    }
    let num = |key: &str| -> Result<usize> {
        config
            .get(key)
            .ok_or_else(|| Error::load(&manifest_path, format!("missing config {key}")))?
            .parse::<usize>()
            .map_err(|_| Error::load(&manifest_path, format!("bad config value for {key}")))
    };
    let variant: HyperVariant = config
        .get("variant")
        .ok_or_else(|| Error::load(&manifest_path, "missing config variant".to_string()))?
        .parse()?;
    let cfg = HyperConfig {
        layers: num("layers")?,
        d_c: num("d_c")?,
        d_t: num("d_t")?,
        d_l: num("d_l")?,
        d_mlp_in: num("d_mlp_in")?,
        d_mlp_hidden: num("d_mlp_hidden")?,
        d_mlp_out: num("d_mlp_out")?,
        rank: num("rank")?,
        variant,
    };
    cfg.validate()?;
    let mut take = |name: &str| -> Result<Tensor> {
        tensors
            .remove(name)
            .ok_or_else(|| Error::load(&manifest_path, format!("missing tensor {name}")))
    };
    let h = HyperNetwork {
        cfg,
        tables: EmbeddingTables {
            e_type: take("e_type")?,
            e_layer: take("e_layer")?,
        },
        proj: Linear {
            w: take("proj.w")?,
            b: take("proj.b")?,
        },
        trunk: [
            Linear {
                w: take("trunk0.w")?,
                b: take("trunk0.b")?,
            },
            Linear {
                w: take("trunk1.w")?,
                b: take("trunk1.b")?,
            },
            Linear {
                w: take("trunk2.w")?,
                b: take("trunk2.b")?,
            },
        ],
        head: Linear {
            w: take("head.w")?,
            b: take("head.b")?,
        },
    };
    if let Some(stray) = tensors.keys().next() {
        return Err(Error::load(
            &manifest_path,
            format!("manifest lists tensor {stray} that the network does not use"),
        ));
    }
    // Shape coherence beyond what validate() can see.
    for (name, t) in h.named_tensors() {
        let expect: Vec<usize> = match name.as_str() {
            "e_type" => vec![ProjKind::ALL.len(), h.cfg.d_t],
            "e_layer" => vec![h.cfg.layers, h.cfg.d_l],
            "proj.w" => vec![h.cfg.input_width(), h.cfg.d_mlp_in],
            "proj.b" => vec![h.cfg.d_mlp_in],
            "trunk0.w" => vec![h.cfg.d_mlp_in, h.cfg.d_mlp_hidden],
            "trunk0.b" | "trunk1.b" => vec![h.cfg.d_mlp_hidden],
            "trunk1.w" => vec![h.cfg.d_mlp_hidden, h.cfg.d_mlp_hidden],
            "trunk2.w" => vec![h.cfg.d_mlp_hidden, h.cfg.d_mlp_out],
            "trunk2.b" => vec![h.cfg.d_mlp_out],
            "head.w" => vec![h.cfg.d_mlp_out, h.cfg.variant.signal_len(h.cfg.rank)],
            "head.b" => vec![h.cfg.variant.signal_len(h.cfg.rank)],
            _ => unreachable!("named_tensors is exhaustive"),
        };
        if t.shape() != expect {
            return Err(Error::load(
                &manifest_path,
                format!("tensor {name}: shape {:?} does not fit the config", t.shape()),
            ));
        }
    }
    Ok(h)
}
