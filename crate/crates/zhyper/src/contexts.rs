//! Context ingestion: textual condition descriptions paired with their
//! precomputed fixed-length embeddings, grouped by dataset.
//!
//! Embeddings arrive precomputed — any sentence encoder can produce
//! them offline — in the ZEMB container below. For live generation
//! there is an external-embedder hook: spawn a configured executable,
//! feed it one tab-separated `id \t dataset \t text` line per record,
//! and read a complete ZEMB stream back from its stdout.
//!
//! ZEMB v1 layout (little-endian):
//!
//! ```text
//! "ZEMB" | u16 version | u32 d_c | u32 count
//! per record:
//!   u16 id_len     | id (UTF-8)
//!   u16 dataset_len| dataset id (UTF-8)
//!   u32 text_len   | description text (UTF-8)
//!   d_c × f32      | embedding (widened to f64 in memory)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::ztsr::{read_bytes, read_u16, read_u32, write_u16, write_u32};
use crate::numerics::{Rng, Tensor};
use crate::training::ContextSource;

const MAGIC: &[u8; 4] = b"ZEMB";
const VERSION: u16 = 1;

/// One stored condition: a description and its embedding.
#[derive(Debug, Clone)]
pub struct ContextRecord {
    pub id: String,
    pub dataset_id: String,
    pub text: String,
    /// `[d_c]`, finite.
    pub embedding: Tensor,
}

impl PartialEq for ContextRecord {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.dataset_id == other.dataset_id
            && self.text == other.text
            && self.embedding.shape() == other.embedding.shape()
            && self.embedding.data() == other.embedding.data()
    }
}

impl ContextRecord {
    pub fn new(
        id: impl Into<String>,
        dataset_id: impl Into<String>,
        text: impl Into<String>,
        embedding: Tensor,
    ) -> Result<ContextRecord> {
        let record = ContextRecord {
            id: id.into(),
            dataset_id: dataset_id.into(),
            text: text.into(),
            embedding,
        };
        record.validate()?;
        Ok(record)
    }

    fn validate(&self) -> Result<()> {
        let &[_] = self.embedding.shape() else {
            return Err(Error::contract(format!(
                "context {}: embedding must be a vector, got shape {:?}",
                self.id,
                self.embedding.shape()
            )));
        };
        if self.id.is_empty() {
            return Err(Error::contract("context id must be non-empty".to_string()));
        }
        // Tensor construction already rejects non-finite values.
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.embedding.numel()
    }
}

/// Immutable set of context records with a dataset index. Records keep
/// their file order; lookups by dataset return them ordered by id.
#[derive(Debug, Clone)]
pub struct ContextStore {
    d_c: usize,
    records: Vec<ContextRecord>,
    by_dataset: BTreeMap<String, Vec<usize>>,
    by_id: BTreeMap<String, usize>,
}

impl ContextStore {
    /// Build and validate: uniform dimension, unique ids.
    pub fn new(d_c: usize, records: Vec<ContextRecord>) -> Result<ContextStore> {
        if d_c == 0 {
            return Err(Error::contract("d_c must be positive".to_string()));
        }
        let mut by_dataset: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_id = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            if r.dim() != d_c {
                return Err(Error::contract(format!(
                    "record {i} ({}): embedding width {} but the store declares {d_c}",
                    r.id,
                    r.dim()
                )));
            }
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(Error::contract(format!(
                    "record {i}: duplicate context id {:?}",
                    r.id
                )));
            }
            by_dataset.entry(r.dataset_id.clone()).or_default().push(i);
        }
        // Stable per-dataset order by id, independent of file order.
        for indices in by_dataset.values_mut() {
            indices.sort_by(|&a, &b| records[a].id.cmp(&records[b].id));
        }
        Ok(ContextStore {
            d_c,
            records,
            by_dataset,
            by_id,
        })
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ContextRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Result<&ContextRecord> {
        self.by_id
            .get(id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::key(format!("no context with id {id:?}")))
    }

    /// The dataset's records, ordered by id. Empty if unknown.
    pub fn for_dataset(&self, dataset: &str) -> Vec<&ContextRecord> {
        self.by_dataset
            .get(dataset)
            .map(|idx| idx.iter().map(|&i| &self.records[i]).collect())
            .unwrap_or_default()
    }

    pub fn dataset_ids(&self) -> Vec<&str> {
        self.by_dataset.keys().map(String::as_str).collect()
    }
}

impl ContextSource for ContextStore {
    /// Uniform draw among the dataset's descriptions.
    fn sample(&self, dataset: &str, rng: &mut Rng) -> Result<Tensor> {
        let indices = self
            .by_dataset
            .get(dataset)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::key(format!("no contexts for dataset {dataset:?}")))?;
        let pick = indices[rng.below(indices.len())];
        Ok(self.records[pick].embedding.clone())
    }

    fn dim(&self) -> usize {
        self.d_c
    }
}

/// Associate each named dataset with its context records (`𝒞_i`). Every
/// dataset must have at least one; records whose dataset is not listed
/// are ignored, and the orphan count is returned for reporting.
pub fn assign_contexts<'s>(
    store: &'s ContextStore,
    datasets: &[&str],
) -> Result<(BTreeMap<String, Vec<&'s ContextRecord>>, usize)> {
    let mut out = BTreeMap::new();
    for &name in datasets {
        let records = store.for_dataset(name);
        if records.is_empty() {
            return Err(Error::config(format!(
                "dataset {name:?} has no context descriptions in the store"
            )));
        }
        out.insert(name.to_string(), records);
    }
    let wanted: BTreeSet<&str> = datasets.iter().copied().collect();
    let orphans = store
        .records
        .iter()
        .filter(|r| !wanted.contains(r.dataset_id.as_str()))
        .count();
    Ok((out, orphans))
}

// ── ZEMB io ──────────────────────────────────────────────────────────

fn string_field(
    r: &mut impl Read,
    len: usize,
    record: usize,
    what: &str,
) -> Result<String> {
    let bytes = read_bytes(r, len)?;
    String::from_utf8(bytes)
        .map_err(|_| Error::input(format!("record {record}: {what} is not UTF-8")))
}

/// Serialize a store. Embeddings are stored at 32-bit precision (they
/// arrive from encoders that emit f32), so values must already be
/// exactly representable — which everything read from ZEMB is.
pub fn write_context_store(w: &mut impl Write, store: &ContextStore) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u16(w, VERSION)?;
    write_u32(w, u32::try_from(store.d_c).map_err(|_| {
        Error::contract(format!("d_c {} exceeds the format limit", store.d_c))
    })?)?;
    write_u32(w, u32::try_from(store.records.len()).map_err(|_| {
        Error::contract(format!(
            "record count {} exceeds the format limit",
            store.records.len()
        ))
    })?)?;
    for (i, rec) in store.records.iter().enumerate() {
        for (what, s, limit) in [
            ("id", &rec.id, u16::MAX as usize),
            ("dataset id", &rec.dataset_id, u16::MAX as usize),
        ] {
            if s.len() > limit {
                return Err(Error::contract(format!(
                    "record {i}: {what} longer than the format allows"
                )));
            }
        }
        write_u16(w, rec.id.len() as u16)?;
        w.write_all(rec.id.as_bytes())?;
        write_u16(w, rec.dataset_id.len() as u16)?;
        w.write_all(rec.dataset_id.as_bytes())?;
        let text_len = u32::try_from(rec.text.len()).map_err(|_| {
            Error::contract(format!("record {i}: text longer than the format allows"))
        })?;
        write_u32(w, text_len)?;
        w.write_all(rec.text.as_bytes())?;
        for &v in rec.embedding.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parse and validate a ZEMB stream. Values are widened to f64 exactly;
/// non-finite entries are rejected with their record and position.
pub fn read_context_store(r: &mut impl Read) -> Result<ContextStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::input(format!(
            "not a context-store file (magic {magic:02x?})"
        )));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::input(format!(
            "unsupported context-store version {version}"
        )));
    }
    let d_c = read_u32(r)? as usize;
    if d_c == 0 {
        return Err(Error::input("context store declares d_c = 0".to_string()));
    }
    let count = read_u32(r)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let id_len = read_u16(r)? as usize;
        let id = string_field(r, id_len, i, "id")?;
        let ds_len = read_u16(r)? as usize;
        let dataset_id = string_field(r, ds_len, i, "dataset id")?;
        let text_len = read_u32(r)? as usize;
        let text = string_field(r, text_len, i, "text")?;
        let mut data = Vec::with_capacity(d_c);
        for k in 0..d_c {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            let v = f32::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(Error::input(format!(
                    "record {i} ({id}): non-finite embedding value at position {k}"
                )));
            }
            data.push(v as f64);
        }
        let embedding = Tensor::from_vec(&[d_c], data)?;
        records.push(ContextRecord {
            id,
            dataset_id,
            text,
            embedding,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::input(
            "trailing bytes after the last context record".to_string(),
        ));
    }
    ContextStore::new(d_c, records)
}

pub fn save_context_store(path: &Path, store: &ContextStore) -> Result<()> {
    let mut buf = Vec::new();
    write_context_store(&mut buf, store)
        .map_err(|e| Error::load(path, e.to_string()))?;
    std::fs::write(path, buf).map_err(|e| Error::load(path, e.to_string()))
}

pub fn load_context_store(path: &Path) -> Result<ContextStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    read_context_store(&mut bytes.as_slice()).map_err(|e| Error::load(path, e.to_string()))
}

// ── External embedder hook ───────────────────────────────────────────

/// Name of the environment variable that points at an external
/// embedding executable.
pub const EMBEDDER_ENV: &str = "ZHYPER_EMBEDDER";

/// The configured external embedder command, if any.
pub fn embedder_from_env() -> Option<String> {
    std::env::var(EMBEDDER_ENV).ok().filter(|s| !s.is_empty())
}

/// Run the external embedder: one `id \t dataset \t text` line per
/// record on its stdin, a complete ZEMB stream expected on its stdout.
/// The returned store must cover exactly the requested ids.
pub fn run_external_embedder(
    command: &str,
    requests: &[(String, String, String)],
) -> Result<ContextStore> {
    use std::process::{Command, Stdio};
    let mut input = String::new();
    for (id, dataset, text) in requests {
        for (what, s) in [("id", id), ("dataset id", dataset), ("text", text)] {
            if s.contains(['\t', '\n']) {
                return Err(Error::input(format!(
                    "embedder request {id:?}: {what} may not contain tabs or newlines"
                )));
            }
        }
        input.push_str(&format!("{id}\t{dataset}\t{text}\n"));
    }
    let mut child = Command::new(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| Error::load(command, format!("cannot start embedder: {e}")))?;
    child
        .stdin
        .take()
        .expect("stdin was piped")
        .write_all(input.as_bytes())
        .map_err(|e| Error::load(command, format!("embedder rejected input: {e}")))?;
    let output = child
        .wait_with_output()
        .map_err(|e| Error::load(command, e.to_string()))?;
    if !output.status.success() {
        return Err(Error::load(
            command,
            format!("embedder exited with {}", output.status),
        ));
    }
    let store = read_context_store(&mut output.stdout.as_slice())
        .map_err(|e| Error::load(command, format!("embedder output: {e}")))?;
    for (id, _, _) in requests {
        store.get(id).map_err(|_| {
            Error::load(command, format!("embedder output is missing id {id:?}"))
        })?;
    }
    if store.len() != requests.len() {
        return Err(Error::load(
            command,
            format!(
                "embedder returned {} records for {} requests",
                store.len(),
                requests.len()
            ),
        ));
    }
    Ok(store)
}
