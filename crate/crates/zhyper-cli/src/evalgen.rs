//! `eval` and `gen-adapter`: score a run against a data directory —
//! the full context × task matrix for conditioned runs, or a single
//! adapter bank — and materialize one context's bank to a file.

use std::path::{Path, PathBuf};

use zhyper::contexts::{
    embedder_from_env, load_context_store, run_external_embedder, EMBEDDER_ENV,
};
use zhyper::model::BaseWeights;
use zhyper::numerics::ztsr::load_tensor;
use zhyper::numerics::{Precision, Tensor};
use zhyper::tasks::{eval_adapter_bank, eval_conditioned, DatasetBundle};
use zhyper::zadp::{load_adapter_set, save_adapter_set};
use zhyper::{Error, Result};

use crate::data::load_bundle;
use crate::manifest::RunManifest;
use crate::train::{load_run, RunKind};

pub struct EvalOptions {
    pub contexts: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub context_id: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(data: &Path, run: &Path, o: &EvalOptions) -> Result<()> {
    if o.adapter.is_some() && o.context_id.is_some() {
        return Err(Error::config(
            "--adapter and --context-id are mutually exclusive".to_string(),
        ));
    }
    let bundle = load_bundle(data)?;
    let loaded = load_run(run)?;
    let contexts_path = o
        .contexts
        .clone()
        .unwrap_or_else(|| data.join("contexts.zemb"));

    if let Some(path) = &o.adapter {
        let (bank, _) = load_adapter_set(path)?;
        return print_bank_eval(loaded.base(), &bank, &bundle);
    }
    if let Some(id) = &o.context_id {
        let model = loaded.conditioned()?;
        let store = load_context_store(&contexts_path)?;
        let bank = model.materialize_adapter(&store.get(id)?.embedding)?;
        return print_bank_eval(&model.base, &bank, &bundle);
    }

    // No bank named: conditioned runs get the full matrix, an mtl run
    // scores its one shared bank, and oracle runs must pick a file.
    let model = match &loaded.kind {
        RunKind::Conditioned(m) => m,
        RunKind::Static { base, pairs } => return print_bank_eval(base, pairs, &bundle),
        RunKind::PerDataset { .. } => {
            return Err(Error::config(
                "oracle runs save one bank per dataset; pick one with --adapter".to_string(),
            ))
        }
    };
    let store = load_context_store(&contexts_path)?;
    let report = eval_conditioned(model, &bundle, &store)?;
    let text = report.render_text();
    print!("{text}");

    let out_dir = o.out.clone().unwrap_or_else(|| run.to_path_buf());
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::load(&out_dir, e.to_string()))?;
    std::fs::write(out_dir.join("eval.txt"), &text)
        .map_err(|e| Error::load(out_dir.join("eval.txt"), e.to_string()))?;
    std::fs::write(out_dir.join("eval.csv"), report.to_csv())
        .map_err(|e| Error::load(out_dir.join("eval.csv"), e.to_string()))?;

    let mut manifest = RunManifest::new("eval");
    manifest.setting("data", data.display());
    manifest.setting("run", run.display());
    manifest.setting("contexts", contexts_path.display());
    manifest.artifact("eval.txt");
    manifest.artifact("eval.csv");
    manifest.write_named(&out_dir, "eval-manifest.txt")?;
    println!("wrote {}", out_dir.join("eval.txt").display());
    Ok(())
}

/// One line per task plus a combined mean, printed precisely enough to
/// compare two evaluation paths for bit-level agreement.
fn print_bank_eval(base: &BaseWeights, bank: &zhyper::lora::AdapterSet, bundle: &DatasetBundle) -> Result<()> {
    let per_task = eval_adapter_bank(base, bank, bundle)?;
    let mut loss_sum = 0.0;
    for (task, (loss, acc)) in &per_task {
        println!("task {task} loss {loss:.6} acc {acc:.4}");
        loss_sum += loss;
    }
    println!("mean-loss {:.17e}", loss_sum / per_task.len() as f64);
    Ok(())
}

pub struct GenAdapterOptions {
    pub context_id: Option<String>,
    pub contexts: Option<PathBuf>,
    pub embedding: Option<PathBuf>,
    pub text: Option<String>,
}

pub fn cmd_gen_adapter(run: &Path, out: &Path, o: &GenAdapterOptions) -> Result<()> {
    let loaded = load_run(run)?;
    let model = loaded.conditioned()?;
    let given = [
        o.context_id.is_some(),
        o.embedding.is_some(),
        o.text.is_some(),
    ];
    if given.iter().filter(|&&b| b).count() != 1 {
        return Err(Error::config(
            "give exactly one of --context-id, --embedding, or --text".to_string(),
        ));
    }

    let c: Tensor = if let Some(id) = &o.context_id {
        let path = o.contexts.as_ref().ok_or_else(|| {
            Error::config("--context-id needs --contexts FILE to resolve against".to_string())
        })?;
        load_context_store(path)?.get(id)?.embedding.clone()
    } else if let Some(path) = &o.embedding {
        let (t, _) = load_tensor(path)?;
        let &[_] = t.shape() else {
            return Err(Error::input(format!(
                "embedding must be a vector, got shape {:?}",
                t.shape()
            )));
        };
        t
    } else {
        let text = o.text.as_deref().expect("checked above");
        let command = embedder_from_env().ok_or_else(|| {
            Error::config(format!(
                "--text needs the {EMBEDDER_ENV} environment variable to name an embedder"
            ))
        })?;
        let store = run_external_embedder(
            &command,
            &[("adhoc".to_string(), "adhoc".to_string(), text.to_string())],
        )?;
        store.records()[0].embedding.clone()
    };
    let d_c = model.hyper.cfg.d_c;
    if c.numel() != d_c {
        return Err(Error::config(format!(
            "context embedding has width {}, the run expects {d_c}",
            c.numel()
        )));
    }

    let bank = model.materialize_adapter(&c)?;
    save_adapter_set(out, &bank, Precision::F64)?;

    let dir = out.parent().filter(|p| !p.as_os_str().is_empty());
    let file = out
        .file_name()
        .ok_or_else(|| Error::config(format!("{} is not a file path", out.display())))?
        .to_string_lossy()
        .to_string();
    let mut manifest = RunManifest::new("gen-adapter");
    manifest.setting("run", run.display());
    if let Some(id) = &o.context_id {
        manifest.setting("context-id", id);
    }
    manifest.artifact(&file);
    manifest.write_named(dir.unwrap_or(Path::new(".")), &format!("{file}.manifest.txt"))?;

    let cfg = &model.hyper.cfg;
    let signal = cfg.layers * 2 * cfg.variant.signal_len(cfg.rank);
    let stored: usize = bank.iter().map(|(_, (p, _))| p.a.numel() + p.b.numel()).sum();
    println!(
        "wrote {} (signal {signal} values folded into {stored} adapter values)",
        out.display()
    );
    Ok(())
}
