//! Append-only, linear version history of diagram snapshots.
//!
//! On disk a store is a directory of `v{version}.drawio.xml` snapshots plus a
//! `history.json` manifest. Snapshots are written before the manifest and the
//! manifest is replaced atomically, so an interrupted write leaves the
//! previous manifest (a prefix of versions) in place.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::codec::{check_wellformed, parse, serialize, ParseIssue};
use crate::model::{CellKind, Diagram, DiagramDiff, Violation};

pub const MANIFEST_FILE: &str = "history.json";
const MANIFEST_FORMAT: u32 = 1;
/// Auto summaries name the affected labels up to this many changed cells.
const SUMMARY_LABEL_LIMIT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    UserPrompt,
    Restore,
    Import,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub version: u64,
    pub parent_version: Option<u64>,
    pub timestamp: DateTime<Utc>,
    pub xml_snapshot: String,
    pub summary: String,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub version: u64,
    pub timestamp: DateTime<Utc>,
    pub summary: String,
    pub origin: Origin,
}

#[derive(Debug, thiserror::Error)]
pub enum HistoryError {
    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt history manifest: {detail}")]
    CorruptManifest { missing: Vec<u64>, detail: String },
    #[error("unknown version {0}")]
    UnknownVersion(u64),
    #[error("diagram violates structural invariants: {0:?}")]
    InvalidDiagram(Vec<Violation>),
    #[error("not a loadable diagram: {0:?}")]
    InvalidXml(Vec<ParseIssue>),
}

fn storage(path: &Path) -> impl FnOnce(std::io::Error) -> HistoryError + '_ {
    move |source| HistoryError::Storage {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    version: u64,
    parent_version: Option<u64>,
    timestamp: DateTime<Utc>,
    summary: String,
    origin: Origin,
    file: String,
}

pub fn snapshot_file_name(version: u64) -> String {
    format!("v{version}.drawio.xml")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HistoryStore {
    entries: Vec<HistoryEntry>,
    /// When set, every append is written through to this directory.
    dir: Option<PathBuf>,
}

impl HistoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or starts) a write-through store in `dir`.
    pub fn open(dir: &Path) -> Result<Self, HistoryError> {
        fs::create_dir_all(dir).map_err(storage(dir))?;
        let mut store = Self::load(dir)?;
        store.dir = Some(dir.to_path_buf());
        Ok(store)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head(&self) -> Option<&HistoryEntry> {
        self.entries.last()
    }

    pub fn entry(&self, version: u64) -> Option<&HistoryEntry> {
        usize::try_from(version).ok().and_then(|i| self.entries.get(i))
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.entries
            .iter()
            .map(|e| LogEntry {
                version: e.version,
                timestamp: e.timestamp,
                summary: e.summary.clone(),
                origin: e.origin,
            })
            .collect()
    }

    /// Parsed head snapshot.
    pub fn head_diagram(&self) -> Option<Diagram> {
        self.head().and_then(|e| parse(&e.xml_snapshot).ok())
    }

    /// Adds `d` as the new head. An empty `summary` is generated from the
    /// diff against the previous head.
    pub fn append(&mut self, d: &Diagram, summary: &str, origin: Origin) -> Result<u64, HistoryError> {
        let violations = d.integrity_check();
        if !violations.is_empty() {
            return Err(HistoryError::InvalidDiagram(violations));
        }
        let xml = serialize(d).map_err(|e| match e {
            crate::codec::SerializeError::IntegrityViolation(v) => HistoryError::InvalidDiagram(v),
        })?;
        let summary = if summary.trim().is_empty() {
            let previous = self.head_diagram().unwrap_or_else(|| Diagram::new_empty(d.name.clone()));
            summarize(&previous, d)
        } else {
            summary.to_string()
        };
        let parent = self.head().map(|h| h.version);
        self.push(xml, parent, summary, origin)
    }

    /// Parses and appends externally edited XML.
    pub fn append_xml(&mut self, xml: &str, summary: &str, origin: Origin) -> Result<u64, HistoryError> {
        let d = parse(xml).map_err(HistoryError::InvalidXml)?;
        self.append(&d, summary, origin)
    }

    /// Re-commits an old snapshot as a new head; nothing is removed.
    pub fn restore(&mut self, version: u64) -> Result<u64, HistoryError> {
        let target = self.entry(version).ok_or(HistoryError::UnknownVersion(version))?.clone();
        let head = self.head().map(|h| h.version);
        let summary = if head == Some(version) {
            format!("restored v{version} (no-op: already the current version)")
        } else {
            let changes = match (self.head_diagram(), parse(&target.xml_snapshot)) {
                (Some(from), Ok(to)) => summarize(&from, &to),
                _ => String::from("no changes"),
            };
            format!("restored v{version}: {changes}")
        };
        self.push(target.xml_snapshot, Some(version), summary, Origin::Restore)
    }

    fn push(&mut self, xml: String, parent: Option<u64>, summary: String, origin: Origin) -> Result<u64, HistoryError> {
        let entry = HistoryEntry {
            version: self.entries.len() as u64,
            parent_version: parent,
            timestamp: Utc::now(),
            xml_snapshot: xml,
            summary,
            origin,
        };
        let version = entry.version;
        self.entries.push(entry);
        if let Some(dir) = self.dir.clone() {
            let written = write_snapshot(&dir, &self.entries[version as usize]).and_then(|()| write_manifest(&dir, &self.entries));
            if let Err(e) = written {
                self.entries.pop();
                return Err(e);
            }
        }
        Ok(version)
    }

    /// Writes every snapshot and the manifest to `dir`.
    pub fn persist(&self, dir: &Path) -> Result<(), HistoryError> {
        fs::create_dir_all(dir).map_err(storage(dir))?;
        for e in &self.entries {
            write_snapshot(dir, e)?;
        }
        write_manifest(dir, &self.entries)
    }

    /// Reads a store. A missing manifest means an empty store; a manifest
    /// whose snapshots are missing or broken is refused.
    pub fn load(dir: &Path) -> Result<Self, HistoryError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let raw = match fs::read_to_string(&manifest_path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::new()),
            Err(e) => return Err(storage(&manifest_path)(e)),
        };
        let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| HistoryError::CorruptManifest {
            missing: Vec::new(),
            detail: format!("{MANIFEST_FILE}: {e}"),
        })?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(HistoryError::CorruptManifest {
                missing: Vec::new(),
                detail: format!("unsupported manifest format {}", manifest.format),
            });
        }
        let mut entries = Vec::with_capacity(manifest.entries.len());
        let mut missing = Vec::new();
        for (i, m) in manifest.entries.into_iter().enumerate() {
            if m.version != i as u64 {
                return Err(HistoryError::CorruptManifest {
                    missing: vec![i as u64],
                    detail: format!("expected version {i}, found {}", m.version),
                });
            }
            let path = dir.join(&m.file);
            match fs::read_to_string(&path) {
                Ok(xml) if check_wellformed(&xml).is_empty() => entries.push(HistoryEntry {
                    version: m.version,
                    parent_version: m.parent_version,
                    timestamp: m.timestamp,
                    xml_snapshot: xml,
                    summary: m.summary,
                    origin: m.origin,
                }),
                Ok(_) => missing.push(m.version),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => missing.push(m.version),
                Err(e) => return Err(storage(&path)(e)),
            }
        }
        if !missing.is_empty() {
            let names: Vec<String> = missing.iter().map(|v| format!("v{v}")).collect();
            return Err(HistoryError::CorruptManifest {
                detail: format!("missing or unreadable snapshots: {}", names.join(", ")),
                missing,
            });
        }
        Ok(Self { entries, dir: None })
    }
}

fn write_snapshot(dir: &Path, e: &HistoryEntry) -> Result<(), HistoryError> {
    let path = dir.join(snapshot_file_name(e.version));
    fs::write(&path, &e.xml_snapshot).map_err(storage(&path))
}

fn write_manifest(dir: &Path, entries: &[HistoryEntry]) -> Result<(), HistoryError> {
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        entries: entries
            .iter()
            .map(|e| ManifestEntry {
                version: e.version,
                parent_version: e.parent_version,
                timestamp: e.timestamp,
                summary: e.summary.clone(),
                origin: e.origin,
                file: snapshot_file_name(e.version),
            })
            .collect(),
    };
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(storage(&tmp))?;
    f.write_all(body.as_bytes()).map_err(storage(&tmp))?;
    f.sync_all().map_err(storage(&tmp))?;
    let target = dir.join(MANIFEST_FILE);
    fs::rename(&tmp, &target).map_err(storage(&target))
}

fn plural(n: usize, one: &str, many: &str) -> String {
    format!("{n} {}", if n == 1 { one } else { many })
}

/// Human-readable change summary, e.g. `+2 vertices (Web, DB), -1 edge`.
pub fn summarize(old: &Diagram, new: &Diagram) -> String {
    let diff: DiagramDiff = old.diff(new);
    if diff.is_empty() {
        return "no changes".to_string();
    }
    let with_labels = diff.changed_count() <= SUMMARY_LABEL_LIMIT;
    let kind_of = |d: &Diagram, id: &str| d.cell(id).map(|c| c.kind);
    let label_of = |d: &Diagram, id: &str| d.cell(id).map(|c| c.label.clone()).unwrap_or_default();

    let mut parts = Vec::new();
    for (sign, ids, source) in [("+", &diff.added, new), ("-", &diff.removed, old)] {
        for (kind, one, many) in [
            (CellKind::Vertex, "vertex", "vertices"),
            (CellKind::Edge, "edge", "edges"),
            (CellKind::Layer, "layer", "layers"),
            (CellKind::Root, "root", "roots"),
        ] {
            let matching: Vec<&String> = ids.iter().filter(|id| kind_of(source, id) == Some(kind)).collect();
            if matching.is_empty() {
                continue;
            }
            let mut part = format!("{sign}{}", plural(matching.len(), one, many));
            let labels: Vec<String> = matching
                .iter()
                .map(|id| label_of(source, id))
                .filter(|l| !l.is_empty())
                .collect();
            if with_labels && !labels.is_empty() {
                part.push_str(&format!(" ({})", labels.join(", ")));
            }
            parts.push(part);
        }
    }
    if !diff.relabeled.is_empty() {
        let mut part = plural(diff.relabeled.len(), "relabeled", "relabeled");
        if with_labels {
            let pairs: Vec<String> = diff.relabeled.iter().map(|r| format!("{} -> {}", r.old, r.new)).collect();
            part.push_str(&format!(" ({})", pairs.join(", ")));
        }
        parts.push(part);
    }
    if !diff.moved.is_empty() {
        let mut part = plural(diff.moved.len(), "moved", "moved");
        if with_labels {
            let labels: Vec<String> = diff.moved.iter().map(|m| label_of(new, &m.id)).filter(|l| !l.is_empty()).collect();
            if !labels.is_empty() {
                part.push_str(&format!(" ({})", labels.join(", ")));
            }
        }
        parts.push(part);
    }
    parts.join(", ")
}
