//! `gen-data`: materialize a named corpus preset as ZTOK/ZEMB files,
//! and the loader that turns a data directory back into a
//! [`DatasetBundle`] for `train` and `eval`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use zhyper::contexts::save_context_store;
use zhyper::tasks::{
    desk_task_specs, gen_corpus, load_corpus, save_corpus, ContextGenOptions, DatasetBundle,
    DatasetSplit, SyntheticTaskSpec,
};
use zhyper::{Error, Result};

use crate::manifest::RunManifest;

/// A named, fully specified corpus recipe. `--seed` shifts every task
/// and context seed by the same offset, so seed 0 is the recipe as
/// written and other seeds are fresh but equally shaped corpora.
pub fn preset_specs(
    name: &str,
    seed: u64,
) -> Result<(Vec<SyntheticTaskSpec>, ContextGenOptions)> {
    match name {
        // Three sharply distinct unigram tasks, four descriptions each —
        // small enough to train against in minutes, distinct enough that
        // the conditioning either shows up in the eval matrix or doesn't.
        "desk" | "desk-acceptance" => {
            let mut specs = desk_task_specs();
            for spec in &mut specs {
                spec.seed = spec.seed.wrapping_add(seed);
            }
            let ctx = ContextGenOptions {
                d_c: 64,
                train_descriptions: 4,
                eval_descriptions: 0,
                noise: 0.1,
                seed: 17u64.wrapping_add(seed),
            };
            Ok((specs, ctx))
        }
        // As above but with held-out descriptions, for probing whether
        // conditioning survives context embeddings never seen in training.
        "desk-heldout" => {
            let (specs, mut ctx) = preset_specs("desk", seed)?;
            ctx.eval_descriptions = 2;
            Ok((specs, ctx))
        }
        other => Err(Error::config(format!(
            "unknown preset {other:?}; expected desk, desk-acceptance, or desk-heldout"
        ))),
    }
}

pub fn cmd_gen_data(preset: &str, seed: u64, out: &Path) -> Result<()> {
    let (specs, ctx) = preset_specs(preset, seed)?;
    let corpus = gen_corpus(&specs, &ctx)?;
    std::fs::create_dir_all(out).map_err(|e| Error::load(out, e.to_string()))?;

    let mut manifest = RunManifest::new("gen-data");
    manifest.setting("preset", preset);
    manifest.setting("seed", seed);

    let bundle = &corpus.bundle;
    let mut summary = String::new();
    writeln!(summary, "vocab {}", bundle.vocab_size).unwrap();
    writeln!(summary, "max_seq {}", bundle.max_seq).unwrap();
    for (task, split) in &bundle.datasets {
        let train_file = format!("{task}.train.ztok");
        save_corpus(&out.join(&train_file), task, "train", bundle.vocab_size, &split.train)?;
        manifest.artifact(&train_file);
        let mut files = train_file;
        if !split.eval.is_empty() {
            let eval_file = format!("{task}.eval.ztok");
            save_corpus(&out.join(&eval_file), task, "eval", bundle.vocab_size, &split.eval)?;
            write!(files, " {eval_file}").unwrap();
            manifest.artifact(format!("{task}.eval.ztok"));
        }
        writeln!(
            summary,
            "dataset {task} train {} eval {} files {files}",
            split.train.len(),
            split.eval.len()
        )
        .unwrap();
    }

    save_context_store(&out.join("contexts.zemb"), &corpus.train_contexts)?;
    manifest.artifact("contexts.zemb");
    writeln!(summary, "contexts contexts.zemb records {}", corpus.train_contexts.len()).unwrap();
    if !corpus.eval_contexts.is_empty() {
        save_context_store(&out.join("contexts-eval.zemb"), &corpus.eval_contexts)?;
        manifest.artifact("contexts-eval.zemb");
        writeln!(
            summary,
            "contexts contexts-eval.zemb records {}",
            corpus.eval_contexts.len()
        )
        .unwrap();
    }

    std::fs::write(out.join("corpus.txt"), &summary)
        .map_err(|e| Error::load(out.join("corpus.txt"), e.to_string()))?;
    manifest.artifact("corpus.txt");
    manifest.write(out)?;

    print!("{summary}");
    println!("wrote {}", out.display());
    Ok(())
}

/// Rebuild the bundle from every `*.ztok` file in a data directory. The
/// files are self-describing, so the directory layout carries no
/// meaning beyond "these corpora belong together".
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::load(dir, e.to_string()))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "ztok"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::load(dir, "no .ztok corpus files here".to_string()));
    }

    let mut vocab: Option<usize> = None;
    let mut max_seq = 0;
    let mut datasets: BTreeMap<String, DatasetSplit> = BTreeMap::new();
    for path in &paths {
        let (dataset, split, file_vocab, examples) = load_corpus(path)?;
        if *vocab.get_or_insert(file_vocab) != file_vocab {
            return Err(Error::load(
                path,
                format!("vocab {file_vocab} differs from the other corpora here"),
            ));
        }
        max_seq = max_seq.max(examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0));
        let entry = datasets.entry(dataset.clone()).or_insert_with(|| DatasetSplit {
            train: Vec::new(),
            eval: Vec::new(),
        });
        let side = match split.as_str() {
            "train" => &mut entry.train,
            "eval" => &mut entry.eval,
            other => {
                return Err(Error::load(
                    path,
                    format!("unknown split {other:?}; expected train or eval"),
                ))
            }
        };
        if !side.is_empty() {
            return Err(Error::load(
                path,
                format!("second {split} corpus for dataset {dataset:?}"),
            ));
        }
        *side = examples;
    }
    for (task, split) in &datasets {
        if split.train.is_empty() {
            return Err(Error::load(
                dir,
                format!("dataset {task:?} has eval data but no train corpus"),
            ));
        }
    }
    Ok(DatasetBundle {
        vocab_size: vocab.expect("at least one corpus"),
        max_seq,
        datasets,
    })
}
