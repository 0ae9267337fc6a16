//! Durable storage: the append-only prototype log (`mirlog.v1`) and the
//! dataset export directory.
//!
//! Log layout: an 8-byte header followed by frames of
//! `[u32 payload length][u32 CRC-32 of payload][JSON payload]`, little endian.
//!
//! Export layout:
//!
//! ```text
//! <dir>/manifest.json      counts, dimension, metric, reliable_only
//! <dir>/descriptors.tsv    embedding file (manifest header, id\tclass\tvalues)
//! <dir>/metadata.jsonl     one JSON object per prototype, same order
//! <dir>/taxonomy.txt       taxonomy fixture
//! ```

use crate::ann::PrototypeId;
use crate::features::{read_embedding_file, write_embedding_file, EmbeddingManifest, EmbeddingRecord, FeatureError, RegionOfInterest};
use crate::metadata::MetadataRecord;
use crate::ontology::{OntologyError, Taxonomy};
use crate::recognition::Prototype;
use crate::vector::{Descriptor, Metric, VectorError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const LOG_FILE_NAME: &str = "mirlog.v1";
pub const LOG_MAGIC: &[u8; 8] = b"MIRLOG\x00\x01";
const FRAME_HEADER: usize = 8;
const MAX_PAYLOAD: u32 = 256 << 20;

pub const EXPORT_FORMAT: &str = "protorec-export/1";
pub const DESCRIPTORS_FILE: &str = "descriptors.tsv";
pub const METADATA_FILE: &str = "metadata.jsonl";
pub const TAXONOMY_FILE: &str = "taxonomy.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PersistenceError {
    #[error("record {seq} is corrupt: {reason}")]
    CorruptRecord { seq: u64, reason: String },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("storage full: log limit of {limit} bytes reached")]
    StorageFull { limit: u64 },
    #[error("not a prototype log")]
    BadHeader,
    #[error("invalid export: {0}")]
    InvalidExport(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One state change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LogOp {
    Add { prototype: Prototype },
    Flag { id: PrototypeId, reliable: bool },
    Label { id: PrototypeId, label: Option<String> },
}

impl LogOp {
    pub fn target(&self) -> PrototypeId {
        match self {
            LogOp::Add { prototype } => prototype.id,
            LogOp::Flag { id, .. } | LogOp::Label { id, .. } => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub op: LogOp,
}

/// The prototype map a log replays to.
pub type StoreState = BTreeMap<PrototypeId, Prototype>;

/// Applies `op` to `state`, rejecting ops that do not fit it.
pub fn apply_op(state: &mut StoreState, op: &LogOp) -> Result<(), PersistenceError> {
    match op {
        LogOp::Add { prototype } => {
            check_prototype(state.values().next().map(|p| p.descriptor.dim()), prototype)?;
            if state.contains_key(&prototype.id) {
                return Err(PersistenceError::SchemaViolation(format!("prototype {} added twice", prototype.id)));
            }
            state.insert(prototype.id, prototype.clone());
        }
        LogOp::Flag { id, reliable } => unknown_id(state.get_mut(id), *id)?.reliable = *reliable,
        LogOp::Label { id, label } => unknown_id(state.get_mut(id), *id)?.user_label = label.clone(),
    }
    Ok(())
}

fn unknown_id(p: Option<&mut Prototype>, id: PrototypeId) -> Result<&mut Prototype, PersistenceError> {
    p.ok_or_else(|| PersistenceError::SchemaViolation(format!("unknown prototype {id}")))
}

fn check_prototype(dim: Option<usize>, p: &Prototype) -> Result<(), PersistenceError> {
    let violation = |m: String| Err(PersistenceError::SchemaViolation(m));
    if p.class_synset.is_empty() {
        return violation(format!("prototype {} has no class", p.id));
    }
    if let Err(e) = Descriptor::new(p.descriptor.values().to_vec(), p.descriptor.metric()) {
        return violation(format!("prototype {}: {e}", p.id));
    }
    match dim {
        Some(d) if d != p.descriptor.dim() => violation(format!(
            "prototype {} has dimension {}, store holds {d}",
            p.id,
            p.descriptor.dim()
        )),
        _ => Ok(()),
    }
}

/// Result of reading a log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Replay {
    pub state: StoreState,
    pub last_seq: u64,
    /// Byte length of the valid prefix.
    pub valid_len: u64,
}

/// Strict replay: any damaged or partial record is an error.
pub fn replay(path: impl AsRef<Path>) -> Result<Replay, PersistenceError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    replay_bytes(&bytes, false)
}

/// Replays an in-memory log. With `tolerate_torn_tail`, a trailing partial
/// or damaged frame ends the replay instead of failing it.
pub fn replay_bytes(bytes: &[u8], tolerate_torn_tail: bool) -> Result<Replay, PersistenceError> {
    if bytes.len() < LOG_MAGIC.len() || &bytes[..LOG_MAGIC.len()] != LOG_MAGIC {
        return Err(PersistenceError::BadHeader);
    }
    let mut out = Replay {
        valid_len: LOG_MAGIC.len() as u64,
        ..Replay::default()
    };
    let mut pos = LOG_MAGIC.len();
    while pos < bytes.len() {
        let seq = out.last_seq + 1;
        let corrupt = |reason: &str| PersistenceError::CorruptRecord {
            seq,
            reason: reason.to_string(),
        };
        let frame = read_frame(&bytes[pos..]).map_err(corrupt).and_then(|(payload, used)| {
            let rec: LogRecord = serde_json::from_slice(payload).map_err(|e| corrupt(&e.to_string()))?;
            if rec.seq != seq {
                return Err(corrupt(&format!("sequence {} out of order", rec.seq)));
            }
            Ok((rec, used))
        });
        let (rec, used) = match frame {
            Ok(f) => f,
            Err(_) if tolerate_torn_tail => break,
            Err(e) => return Err(e),
        };
        apply_op(&mut out.state, &rec.op).map_err(|e| PersistenceError::CorruptRecord {
            seq,
            reason: e.to_string(),
        })?;
        pos += used;
        out.last_seq = seq;
        out.valid_len = pos as u64;
    }
    Ok(out)
}

fn read_frame(buf: &[u8]) -> Result<(&[u8], usize), &'static str> {
    if buf.len() < FRAME_HEADER {
        return Err("truncated frame header");
    }
    let len = u32::from_le_bytes(buf[0..4].try_into().unwrap());
    let crc = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err("implausible frame length");
    }
    let end = FRAME_HEADER + len as usize;
    if buf.len() < end {
        return Err("truncated payload");
    }
    let payload = &buf[FRAME_HEADER..end];
    if crc32fast::hash(payload) != crc {
        return Err("checksum mismatch");
    }
    Ok((payload, end))
}

fn encode_frame(rec: &LogRecord) -> Vec<u8> {
    let payload = serde_json::to_vec(rec).expect("log records serialize");
    let mut frame = Vec::with_capacity(FRAME_HEADER + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    frame.extend_from_slice(&payload);
    frame
}

/// Append handle on a log file. Tracks enough state to reject ops that
/// would not replay.
#[derive(Debug)]
pub struct PrototypeLog {
    file: File,
    path: PathBuf,
    last_seq: u64,
    len: u64,
    ids: HashSet<PrototypeId>,
    dim: Option<usize>,
    max_bytes: Option<u64>,
    sync: bool,
}

impl PrototypeLog {
    /// Opens or creates the log, dropping a torn trailing record left by a
    /// crash. Returns the handle and the replayed state.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, StoreState), PersistenceError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.is_empty() {
            file.write_all(LOG_MAGIC)?;
            file.sync_all()?;
            bytes.extend_from_slice(LOG_MAGIC);
        }
        let replay = replay_bytes(&bytes, true)?;
        if replay.valid_len < bytes.len() as u64 {
            file.set_len(replay.valid_len)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::Start(replay.valid_len))?;
        let log = Self {
            file,
            path,
            last_seq: replay.last_seq,
            len: replay.valid_len,
            ids: replay.state.keys().copied().collect(),
            dim: replay.state.values().next().map(|p| p.descriptor.dim()),
            max_bytes: None,
            sync: true,
        };
        Ok((log, replay.state))
    }

    /// Caps the file size; appends that would exceed it fail with `StorageFull`.
    pub fn with_limit(mut self, max_bytes: Option<u64>) -> Self {
        self.max_bytes = max_bytes;
        self
    }

    /// Disables the per-append fsync (bulk imports, tests on slow disks).
    pub fn with_sync(mut self, sync: bool) -> Self {
        self.sync = sync;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn len_bytes(&self) -> u64 {
        self.len
    }

    /// Validates and durably writes `op`, returning its sequence number.
    pub fn append(&mut self, op: &LogOp) -> Result<u64, PersistenceError> {
        match op {
            LogOp::Add { prototype } => {
                check_prototype(self.dim, prototype)?;
                if self.ids.contains(&prototype.id) {
                    return Err(PersistenceError::SchemaViolation(format!("prototype {} added twice", prototype.id)));
                }
            }
            LogOp::Flag { id, .. } | LogOp::Label { id, .. } => {
                if !self.ids.contains(id) {
                    return Err(PersistenceError::SchemaViolation(format!("unknown prototype {id}")));
                }
            }
        }
        let rec = LogRecord {
            seq: self.last_seq + 1,
            op: op.clone(),
        };
        let frame = encode_frame(&rec);
        if let Some(limit) = self.max_bytes {
            if self.len + frame.len() as u64 > limit {
                return Err(PersistenceError::StorageFull { limit });
            }
        }
        if let Err(e) = self.file.write_all(&frame).and_then(|_| if self.sync { self.file.sync_data() } else { Ok(()) }) {
            // leave the file at the last good boundary
            let _ = self.file.set_len(self.len);
            let _ = self.file.seek(SeekFrom::Start(self.len));
            return Err(match e.kind() {
                std::io::ErrorKind::StorageFull => PersistenceError::StorageFull { limit: self.len },
                _ => e.into(),
            });
        }
        self.len += frame.len() as u64;
        self.last_seq = rec.seq;
        if let LogOp::Add { prototype } = op {
            self.ids.insert(prototype.id);
            self.dim.get_or_insert(prototype.descriptor.dim());
        }
        Ok(rec.seq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub format: String,
    pub count: usize,
    pub reliable_count: usize,
    pub dim: usize,
    pub metric: Option<Metric>,
    pub reliable_only: bool,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetadataLine {
    id: PrototypeId,
    user_id: String,
    timestamp: i64,
    roi: Option<RegionOfInterest>,
    reliable: bool,
    user_label: Option<String>,
    normalized: bool,
    metadata: MetadataRecord,
}

/// Writes the export directory, creating it if needed.
pub fn export_dataset<'a, I>(
    prototypes: I,
    taxonomy: &Taxonomy,
    dir: impl AsRef<Path>,
    reliable_only: bool,
) -> Result<ExportManifest, PersistenceError>
where
    I: IntoIterator<Item = &'a Prototype>,
{
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let chosen: Vec<&Prototype> = prototypes.into_iter().filter(|p| p.reliable || !reliable_only).collect();
    let dim = chosen.first().map_or(0, |p| p.descriptor.dim());
    let metric = chosen.first().map(|p| p.descriptor.metric());
    if chosen.iter().any(|p| p.descriptor.dim() != dim || Some(p.descriptor.metric()) != metric) {
        return Err(PersistenceError::SchemaViolation("prototypes differ in dimension or metric".into()));
    }
    let records: Vec<EmbeddingRecord> = chosen
        .iter()
        .map(|p| EmbeddingRecord {
            external_id: p.id.to_string(),
            class_synset: p.class_synset.clone(),
            values: p.descriptor.values().to_vec(),
        })
        .collect();
    let emb = EmbeddingManifest::new("protorec", dim, metric.unwrap_or(Metric::Euclidean));
    let mut w = BufWriter::new(File::create(dir.join(DESCRIPTORS_FILE))?);
    write_embedding_file(&mut w, &emb, &records)?;
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join(METADATA_FILE))?);
    for p in &chosen {
        let line = MetadataLine {
            id: p.id,
            user_id: p.user_id.clone(),
            timestamp: p.timestamp,
            roi: p.roi,
            reliable: p.reliable,
            user_label: p.user_label.clone(),
            normalized: p.descriptor.is_normalized(),
            metadata: p.metadata.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    std::fs::write(dir.join(TAXONOMY_FILE), taxonomy.to_fixture_string())?;
    let manifest = ExportManifest {
        format: EXPORT_FORMAT.into(),
        count: chosen.len(),
        reliable_count: chosen.iter().filter(|p| p.reliable).count(),
        dim,
        metric,
        reliable_only,
        files: [DESCRIPTORS_FILE, METADATA_FILE, TAXONOMY_FILE].map(String::from).to_vec(),
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportedDataset {
    pub manifest: ExportManifest,
    pub prototypes: StoreState,
    pub taxonomy: Taxonomy,
}

pub fn import_dataset(dir: impl AsRef<Path>) -> Result<ImportedDataset, PersistenceError> {
    let dir = dir.as_ref();
    let invalid = |m: String| PersistenceError::InvalidExport(m);
    let manifest: ExportManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != EXPORT_FORMAT {
        return Err(invalid(format!("unsupported format `{}`", manifest.format)));
    }
    let taxonomy = Taxonomy::load(dir.join(TAXONOMY_FILE))?;
    let (emb, records) = read_embedding_file(BufReader::new(File::open(dir.join(DESCRIPTORS_FILE))?))?;
    let meta_lines: Vec<MetadataLine> = BufReader::new(File::open(dir.join(METADATA_FILE))?)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect::<Result<_, PersistenceError>>()?;
    if records.len() != manifest.count || meta_lines.len() != manifest.count {
        return Err(invalid(format!(
            "manifest counts {} prototypes, files hold {} descriptors and {} metadata lines",
            manifest.count,
            records.len(),
            meta_lines.len()
        )));
    }
    let mut prototypes = StoreState::new();
    for (rec, meta) in records.into_iter().zip(meta_lines) {
        if rec.external_id != meta.id.to_string() {
            return Err(invalid(format!("descriptor {} paired with metadata {}", rec.external_id, meta.id)));
        }
        let descriptor = restore_descriptor(rec.values, emb.metric, meta.normalized)
            .map_err(|e| invalid(format!("prototype {}: {e}", meta.id)))?;
        let p = Prototype {
            id: meta.id,
            descriptor,
            class_synset: rec.class_synset,
            metadata: meta.metadata,
            user_id: meta.user_id,
            timestamp: meta.timestamp,
            roi: meta.roi,
            reliable: meta.reliable,
            user_label: meta.user_label,
        };
        apply_op(&mut prototypes, &LogOp::Add { prototype: p })?;
    }
    Ok(ImportedDataset {
        manifest,
        prototypes,
        taxonomy,
    })
}

fn restore_descriptor(values: Vec<f64>, metric: Metric, normalized: bool) -> Result<Descriptor, VectorError> {
    Descriptor::restore(values, metric, normalized)
}
