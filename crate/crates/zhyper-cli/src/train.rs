//! `train`: assemble the effective configuration from defaults, an
//! optional `key = value` file, and flags (flags win), run the chosen
//! mode, and write a self-describing run directory. `load_run` is the
//! inverse used by `eval` and `gen-adapter`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use zhyper::contexts::load_context_store;
use zhyper::hypernet::{load_hypernet, save_hypernet, HyperVariant};
use zhyper::lora::AdapterSet;
use zhyper::model::{
    init_base, load_base, save_base, BaseWeights, ConditionedModel, ModelConfig,
};
use zhyper::numerics::{Precision, Rng};
use zhyper::tasks::DatasetBundle;
use zhyper::training::{
    train_mtl, train_oracle, train_zhyper, write_loss_csv, StepLog, TrainConfig, TrainMode,
};
use zhyper::zadp::{load_adapter_set, save_adapter_set};
use zhyper::{Error, Result};

use crate::data::load_bundle;
use crate::manifest::RunManifest;

/// Flag-level overrides, applied on top of the config file.
#[derive(Debug, Default)]
pub struct TrainOverrides {
    pub config: Option<PathBuf>,
    pub mode: Option<String>,
    pub variant: Option<String>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub rank: Option<usize>,
}

/// Parse a line-oriented `key = value` file. Blank lines and `#`
/// comments are skipped; everything else must have an `=`.
pub fn read_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut kv = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "{}:{}: expected key = value, got {raw:?}",
                path.display(),
                i + 1
            )));
        };
        kv.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(kv)
}

/// Split mixed config pairs into model fields and training fields;
/// anything neither accepts is a typo worth stopping for.
fn route_kv(
    kv: Vec<(String, String)>,
) -> Result<(Vec<(String, String)>, Vec<(String, String)>)> {
    let mut model_kv = Vec::new();
    let mut train_kv = Vec::new();
    for (k, v) in kv {
        if ModelConfig::has_key(&k) {
            model_kv.push((k, v));
        } else if TrainConfig::has_key(&k) {
            train_kv.push((k, v));
        } else {
            return Err(Error::config(format!(
                "unknown config option {k:?} (not a model or training field)"
            )));
        }
    }
    Ok((model_kv, train_kv))
}

/// The mode the flags ask for, if they ask for one. `--variant` is
/// sugar for the conditioned modes and must agree with `--mode`.
fn flag_mode(mode: Option<&str>, variant: Option<&str>) -> Result<Option<TrainMode>> {
    let variant = match variant {
        Some("diag") => Some(HyperVariant::Diag),
        Some("square") => Some(HyperVariant::Square),
        Some(other) => {
            return Err(Error::config(format!(
                "unknown variant {other:?}; expected diag or square"
            )))
        }
        None => None,
    };
    let mode = mode.map(|m| m.parse::<TrainMode>()).transpose()?;
    match (mode, variant) {
        (Some(m), Some(v)) if m.hyper_variant() != Some(v) => Err(Error::config(format!(
            "--mode {m} conflicts with --variant {}",
            v.name()
        ))),
        (Some(m), _) => Ok(Some(m)),
        (None, Some(HyperVariant::Diag)) => Ok(Some(TrainMode::ZhyperDiag)),
        (None, Some(HyperVariant::Square)) => Ok(Some(TrainMode::ZhyperSquare)),
        (None, None) => Ok(None),
    }
}

/// The fully resolved run configuration: desk defaults, then the config
/// file, then flags, validated against the corpus it will train on.
pub struct RunSettings {
    pub mcfg: ModelConfig,
    pub tcfg: TrainConfig,
}

pub fn assemble(bundle: &DatasetBundle, o: &TrainOverrides) -> Result<RunSettings> {
    let kv = match &o.config {
        Some(path) => read_kv_file(path)?,
        None => Vec::new(),
    };
    let (model_kv, train_kv) = route_kv(kv)?;

    let from_flags = flag_mode(o.mode.as_deref(), o.variant.as_deref())?;
    let from_file = train_kv
        .iter()
        .rev()
        .find(|(k, _)| k == "mode")
        .map(|(_, v)| v.parse::<TrainMode>())
        .transpose()?;
    let mode = from_flags.or(from_file).unwrap_or(TrainMode::ZhyperDiag);

    let mut tcfg = TrainConfig::desk_defaults(mode);
    tcfg.apply_kv(&train_kv)?;
    tcfg.mode = mode;
    if let Some(steps) = o.steps {
        tcfg.steps = steps;
    }
    if let Some(seed) = o.seed {
        tcfg.seed = seed;
    }
    if let Some(rank) = o.rank {
        tcfg.rank = rank;
    }
    tcfg.validate()?;

    let mut mcfg = ModelConfig::desk_7b_shape();
    mcfg.vocab_size = bundle.vocab_size;
    mcfg.max_seq = bundle.max_seq;
    mcfg.apply_kv(&model_kv)?;
    if mcfg.vocab_size < bundle.vocab_size {
        return Err(Error::config(format!(
            "model vocab {} is smaller than the corpus vocab {}",
            mcfg.vocab_size, bundle.vocab_size
        )));
    }
    // Training inputs drop the final token, so seq − 1 positions must fit.
    if mcfg.max_seq + 1 < bundle.max_seq {
        return Err(Error::config(format!(
            "model max_seq {} cannot hold {}-token sequences",
            mcfg.max_seq, bundle.max_seq
        )));
    }
    Ok(RunSettings { mcfg, tcfg })
}

/// The `key = value` echo written as `config.txt`: enough to rebuild
/// both configs, which is enough to replay the run against its data.
fn config_echo(mcfg: &ModelConfig, tcfg: &TrainConfig) -> String {
    let mut out = String::from("# model\n");
    for (k, v) in mcfg.to_kv() {
        writeln!(out, "{k} = {v}").unwrap();
    }
    out.push_str("\n# training\n");
    for (k, v) in tcfg.to_kv() {
        writeln!(out, "{k} = {v}").unwrap();
    }
    out
}

pub fn cmd_train(data: &Path, out: &Path, o: &TrainOverrides) -> Result<()> {
    let bundle = load_bundle(data)?;
    let RunSettings { mcfg, tcfg } = assemble(&bundle, o)?;
    let corpus = bundle.all_train();
    let base = init_base(&mcfg, &mut Rng::new(tcfg.seed))?;
    std::fs::create_dir_all(out).map_err(|e| Error::load(out, e.to_string()))?;

    let mut manifest = RunManifest::new("train");
    manifest.setting("data", data.display());
    for (k, v) in mcfg.to_kv().into_iter().chain(tcfg.to_kv()) {
        manifest.setting(&k, v);
    }

    std::fs::write(out.join("config.txt"), config_echo(&mcfg, &tcfg))
        .map_err(|e| Error::load(out.join("config.txt"), e.to_string()))?;
    manifest.artifact("config.txt");
    save_base(&out.join("base"), &base)?;
    manifest.artifact("base");

    let started = Instant::now();
    let last_loss = match tcfg.mode {
        TrainMode::ZhyperDiag | TrainMode::ZhyperSquare => {
            let store = load_context_store(&data.join("contexts.zemb"))?;
            for task in bundle.dataset_ids() {
                if store.for_dataset(task).is_empty() {
                    return Err(Error::config(format!(
                        "no context descriptions for dataset {task:?} in {}",
                        data.join("contexts.zemb").display()
                    )));
                }
            }
            let (model, logs) = train_zhyper(base, &corpus, &store, &tcfg)?;
            save_hypernet(&out.join("hyper"), &model.hyper)?;
            save_adapter_set(&out.join("factors.zadp"), &model.pairs, Precision::F64)?;
            write_loss_csv(&out.join("loss.csv"), &logs)?;
            manifest.artifact("hyper");
            manifest.artifact("factors.zadp");
            manifest.artifact("loss.csv");
            final_loss(&logs)
        }
        TrainMode::Mtl => {
            let (model, logs) = train_mtl(base, &corpus, &tcfg)?;
            save_adapter_set(&out.join("adapters.zadp"), &model.pairs, Precision::F64)?;
            write_loss_csv(&out.join("loss.csv"), &logs)?;
            manifest.artifact("adapters.zadp");
            manifest.artifact("loss.csv");
            final_loss(&logs)
        }
        TrainMode::Oracle => {
            let banks = train_oracle(&base, &corpus, &tcfg)?;
            let mut mean = 0.0;
            for (task, (bank, logs)) in &banks {
                let bank_file = format!("adapters-{task}.zadp");
                let loss_file = format!("loss-{task}.csv");
                save_adapter_set(&out.join(&bank_file), bank, Precision::F64)?;
                write_loss_csv(&out.join(&loss_file), logs)?;
                manifest.artifact(bank_file);
                manifest.artifact(loss_file);
                mean += final_loss(logs) / banks.len() as f64;
            }
            mean
        }
    };
    manifest.write(out)?;

    println!(
        "mode {} steps {} final-loss {:.6} elapsed {:.1}s",
        tcfg.mode,
        tcfg.steps,
        last_loss,
        started.elapsed().as_secs_f64()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn final_loss(logs: &[StepLog]) -> f64 {
    logs.last().map(|l| l.loss).unwrap_or(f64::NAN)
}

// ── Loading a run back ───────────────────────────────────────────────

/// What a run directory holds, by mode.
pub enum RunKind {
    /// Shared factors plus a trained signal network (`zhyper-*`).
    Conditioned(ConditionedModel),
    /// One shared adapter bank (`mtl`).
    Static { base: BaseWeights, pairs: AdapterSet },
    /// Per-dataset banks saved as separate files (`oracle`); evaluate
    /// them explicitly via `--adapter`.
    PerDataset { base: BaseWeights },
}

pub struct LoadedRun {
    pub tcfg: TrainConfig,
    pub kind: RunKind,
}

impl LoadedRun {
    pub fn base(&self) -> &BaseWeights {
        match &self.kind {
            RunKind::Conditioned(m) => &m.base,
            RunKind::Static { base, .. } => base,
            RunKind::PerDataset { base } => base,
        }
    }

    /// The conditioned model, or a clear error for runs without one.
    pub fn conditioned(&self) -> Result<&ConditionedModel> {
        match &self.kind {
            RunKind::Conditioned(m) => Ok(m),
            _ => Err(Error::config(format!(
                "this is a {} run; it has no signal network to condition with",
                self.tcfg.mode
            ))),
        }
    }
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let kv = read_kv_file(&dir.join("config.txt"))?;
    let (model_kv, train_kv) = route_kv(kv)?;
    let mut mcfg = ModelConfig::desk_7b_shape();
    mcfg.apply_kv(&model_kv)?;
    let mut tcfg = TrainConfig::desk_defaults(TrainMode::ZhyperDiag);
    tcfg.apply_kv(&train_kv)?;

    let base = load_base(&dir.join("base"))?;
    if base.cfg != mcfg {
        return Err(Error::load(
            dir,
            "checkpointed base does not match the run's config echo".to_string(),
        ));
    }
    let kind = match tcfg.mode {
        TrainMode::ZhyperDiag | TrainMode::ZhyperSquare => {
            let hyper = load_hypernet(&dir.join("hyper"))?;
            let (pairs, _) = load_adapter_set(&dir.join("factors.zadp"))?;
            RunKind::Conditioned(ConditionedModel::new(base, pairs, hyper)?)
        }
        TrainMode::Mtl => {
            let (pairs, _) = load_adapter_set(&dir.join("adapters.zadp"))?;
            RunKind::Static { base, pairs }
        }
        TrainMode::Oracle => RunKind::PerDataset { base },
    };
    Ok(LoadedRun { tcfg, kind })
}
