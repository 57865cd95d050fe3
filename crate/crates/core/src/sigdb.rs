//! Single-file JSON store of CVE records and their signatures.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::siggen::{Signature, SignatureKind};

pub const DB_SCHEMA: &str = "vulmatch-db/1";

#[derive(Debug, Error)]
pub enum DbError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported database schema {found:?} (expected {DB_SCHEMA:?})")]
    SchemaVersionMismatch { found: String },
    #[error("schema error at {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("invalid database at {path}: {reason}")]
    Integrity { path: String, reason: String },
    #[error("unknown CVE {0}")]
    UnknownCve(String),
}

fn integrity(path: impl Into<String>, reason: impl Into<String>) -> DbError {
    DbError::Integrity {
        path: path.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CveRecord {
    pub cve_id: String,
    pub project: String,
    pub vulnerable_files: Vec<String>,
    pub vulnerable_functions: Vec<String>,
    pub affected_versions: Vec<String>,
}

impl CveRecord {
    /// Minimal record for a CVE touching a single function.
    pub fn single(cve_id: &str, project: &str, file: &str, function: &str, version: &str) -> Self {
        CveRecord {
            cve_id: cve_id.into(),
            project: project.into(),
            vulnerable_files: vec![file.into()],
            vulnerable_functions: vec![function.into()],
            affected_versions: vec![version.into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureDatabase {
    pub schema: String,
    pub records: Vec<CveRecord>,
    pub signatures: Vec<Signature>,
}

impl Default for SignatureDatabase {
    fn default() -> Self {
        SignatureDatabase {
            schema: DB_SCHEMA.into(),
            records: Vec::new(),
            signatures: Vec::new(),
        }
    }
}

#[derive(Deserialize)]
struct SchemaProbe {
    schema: Option<String>,
}

impl SignatureDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, cve_id: &str) -> Option<&CveRecord> {
        self.records.iter().find(|r| r.cve_id == cve_id)
    }

    /// Insert a record, or merge its lists into the existing one.
    pub fn upsert_record(&mut self, rec: CveRecord) {
        match self.records.iter_mut().find(|r| r.cve_id == rec.cve_id) {
            None => self.records.push(rec),
            Some(r) => {
                if r.project.is_empty() {
                    r.project = rec.project;
                }
                merge(&mut r.vulnerable_files, rec.vulnerable_files);
                merge(&mut r.vulnerable_functions, rec.vulnerable_functions);
                merge(&mut r.affected_versions, rec.affected_versions);
            }
        }
    }

    /// Append signatures, giving each the next free ordinal for its
    /// (cve, function, kind) key. Every CVE must already have a record.
    pub fn add_signatures(&mut self, sigs: impl IntoIterator<Item = Signature>) -> Result<(), DbError> {
        for mut s in sigs {
            if self.record(&s.cve_id).is_none() {
                return Err(DbError::UnknownCve(s.cve_id));
            }
            s.ordinal = self
                .signatures
                .iter()
                .filter(|o| o.cve_id == s.cve_id && o.function_name == s.function_name && o.kind == s.kind)
                .map(|o| o.ordinal + 1)
                .max()
                .unwrap_or(0);
            self.signatures.push(s);
        }
        Ok(())
    }

    /// All signatures, or those of one CVE, in stored order.
    pub fn query(&self, cve_id: Option<&str>) -> Result<Vec<&Signature>, DbError> {
        match cve_id {
            None => Ok(self.signatures.iter().collect()),
            Some(id) => {
                if self.record(id).is_none() {
                    return Err(DbError::UnknownCve(id.to_owned()));
                }
                Ok(self.signatures.iter().filter(|s| s.cve_id == id).collect())
            }
        }
    }

    /// CVE ids that have at least one signature, in first-appearance order.
    pub fn cve_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.signatures
            .iter()
            .map(|s| s.cve_id.as_str())
            .filter(|c| seen.insert(*c))
            .collect()
    }

    pub fn validate(&self) -> Result<(), DbError> {
        if self.schema != DB_SCHEMA {
            return Err(DbError::SchemaVersionMismatch {
                found: self.schema.clone(),
            });
        }
        let mut ids = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            let at = |f: &str| format!("records[{i}].{f}");
            if r.cve_id.is_empty() {
                return Err(integrity(at("cve_id"), "empty CVE id"));
            }
            if !ids.insert(r.cve_id.as_str()) {
                return Err(integrity(at("cve_id"), format!("duplicate record {}", r.cve_id)));
            }
            for (name, list) in [
                ("vulnerable_files", &r.vulnerable_files),
                ("vulnerable_functions", &r.vulnerable_functions),
                ("affected_versions", &r.affected_versions),
            ] {
                if list.is_empty() {
                    return Err(integrity(at(name), "list must not be empty"));
                }
            }
        }
        let mut keys: BTreeSet<(&str, &str, SignatureKind, u32)> = BTreeSet::new();
        for (i, s) in self.signatures.iter().enumerate() {
            if !ids.contains(s.cve_id.as_str()) {
                return Err(integrity(
                    format!("signatures[{i}].cve_id"),
                    format!("no record for {}", s.cve_id),
                ));
            }
            if !keys.insert((&s.cve_id, &s.function_name, s.kind, s.ordinal)) {
                return Err(integrity(
                    format!("signatures[{i}]"),
                    format!(
                        "duplicate ({}, {}, {}, {})",
                        s.cve_id, s.function_name, s.kind, s.ordinal
                    ),
                ));
            }
            s.validate()
                .map_err(|reason| integrity(format!("signatures[{i}]"), reason))?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, DbError> {
        // Check the version first so an old or future file gets a clear error
        // instead of a field-level one.
        let probe: SchemaProbe = serde_json::from_str(text).map_err(|e| DbError::Schema {
            path: ".".into(),
            reason: e.to_string(),
        })?;
        match probe.schema.as_deref() {
            Some(DB_SCHEMA) => {}
            Some(other) => {
                return Err(DbError::SchemaVersionMismatch {
                    found: other.to_owned(),
                })
            }
            None => {
                return Err(DbError::Schema {
                    path: "schema".into(),
                    reason: "missing field".into(),
                })
            }
        }
        let de = &mut serde_json::Deserializer::from_str(text);
        let db: SignatureDatabase =
            serde_path_to_error::deserialize(de).map_err(|e| DbError::Schema {
                path: e.path().to_string(),
                reason: e.inner().to_string(),
            })?;
        db.validate()?;
        Ok(db)
    }

    /// Pretty JSON with LF line endings and a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("database serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, DbError> {
        let text = std::fs::read_to_string(path).map_err(|source| DbError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Load, or start empty when the file does not exist yet.
    pub fn load_or_default(path: &Path) -> Result<Self, DbError> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    /// Write to a temporary file in the target directory, then rename over
    /// the destination.
    pub fn save(&self, path: &Path) -> Result<(), DbError> {
        let io = |source| DbError::Io {
            path: path.display().to_string(),
            source,
        };
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(self.to_json().as_bytes()).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }
}

fn merge(into: &mut Vec<String>, from: Vec<String>) {
    for x in from {
        if !into.contains(&x) {
            into.push(x);
        }
    }
}
