//! Directory layout:
//!
//! ```text
//! <root>/<id>/session.json          slot index, step errors
//! <root>/<id>/artifacts/<slot>-v<k>.json
//! <root>/<id>/audit/<seq>.json
//! <root>/<id>/exports/model-v<k>.bpmn
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{ArtifactVersion, Provenance, SessionError, SessionState, SlotRef, Step, StepError};
use crate::bpmn_io::{export_artifact_json, export_bpmn_xml, import_artifact_json, Artifact, SlotName};
use crate::llm_gateway::LlmExchange;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    id: String,
    created: DateTime<Utc>,
    slots: BTreeMap<SlotName, Vec<VersionMeta>>,
    #[serde(default)]
    errors: BTreeMap<Step, StepError>,
    audit_entries: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VersionMeta {
    version: u32,
    provenance: Provenance,
    parents: Vec<SlotRef>,
    timestamp: DateTime<Utc>,
}

fn io(path: &Path, e: std::io::Error) -> SessionError {
    SessionError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), SessionError> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn read(path: &Path) -> Result<String, SessionError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => SessionError::CorruptStore(format!("missing {}", path.display())),
        _ => io(path, e),
    })
}

fn corrupt(path: &Path, detail: impl std::fmt::Display) -> SessionError {
    SessionError::CorruptStore(format!("{}: {detail}", path.display()))
}

/// Writes the session below `root/<id>` and returns that directory.
pub fn save_session(session: &SessionState, root: &Path) -> Result<PathBuf, SessionError> {
    let dir = root.join(&session.id);
    save_session_dir(session, &dir)?;
    Ok(dir)
}

/// Writes the session into `dir` itself.
pub fn save_session_dir(session: &SessionState, dir: &Path) -> Result<(), SessionError> {
    for sub in ["artifacts", "audit", "exports"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
    }
    let mut slots = BTreeMap::new();
    for (slot, versions) in &session.slots {
        let mut metas = Vec::with_capacity(versions.len());
        for v in versions {
            let file = dir.join("artifacts").join(format!("{slot}-v{}.json", v.version));
            write(&file, &(export_artifact_json(&v.value) + "\n"))?;
            if let Artifact::Model(m) = &v.value {
                let bpmn = dir.join("exports").join(format!("model-v{}.bpmn", v.version));
                write(&bpmn, &export_bpmn_xml(&m.model, &m.activities))?;
            }
            metas.push(VersionMeta {
                version: v.version,
                provenance: v.provenance,
                parents: v.parents.clone(),
                timestamp: v.timestamp,
            });
        }
        slots.insert(*slot, metas);
    }
    for (i, exchange) in session.audit.iter().enumerate() {
        let file = dir.join("audit").join(format!("{:06}.json", i + 1));
        write(&file, &(serde_json::to_string_pretty(exchange).expect("exchange serializes") + "\n"))?;
    }
    let index = Index {
        id: session.id.clone(),
        created: session.created,
        slots,
        errors: session.errors.clone(),
        audit_entries: session.audit.len(),
    };
    // index last, so a crash mid-save leaves the previous index pointing at complete files
    let tmp = dir.join("session.json.tmp");
    write(&tmp, &(serde_json::to_string_pretty(&index).expect("index serializes") + "\n"))?;
    let target = dir.join("session.json");
    fs::rename(&tmp, &target).map_err(|e| io(&target, e))
}

pub fn load_session(root: &Path, id: &str) -> Result<SessionState, SessionError> {
    load_session_dir(&root.join(id))
}

pub fn load_session_dir(dir: &Path) -> Result<SessionState, SessionError> {
    let index_path = dir.join("session.json");
    if !index_path.exists() {
        return Err(SessionError::NotFound(dir.display().to_string()));
    }
    let index: Index = serde_json::from_str(&read(&index_path)?).map_err(|e| corrupt(&index_path, e))?;
    let mut slots = BTreeMap::new();
    for (slot, metas) in index.slots {
        let mut versions = Vec::with_capacity(metas.len());
        for (i, meta) in metas.into_iter().enumerate() {
            if meta.version as usize != i + 1 {
                return Err(corrupt(&index_path, format!("{slot} versions are not numbered 1..n")));
            }
            let file = dir.join("artifacts").join(format!("{slot}-v{}.json", meta.version));
            let value = import_artifact_json(slot, &read(&file)?).map_err(|e| corrupt(&file, e))?;
            versions.push(ArtifactVersion {
                version: meta.version,
                value,
                provenance: meta.provenance,
                parents: meta.parents,
                timestamp: meta.timestamp,
            });
        }
        slots.insert(slot, versions);
    }
    let mut audit = Vec::with_capacity(index.audit_entries);
    for i in 1..=index.audit_entries {
        let file = dir.join("audit").join(format!("{i:06}.json"));
        let exchange: LlmExchange = serde_json::from_str(&read(&file)?).map_err(|e| corrupt(&file, e))?;
        audit.push(exchange);
    }
    if !slots.contains_key(&SlotName::Description) {
        return Err(corrupt(&index_path, "session has no description"));
    }
    Ok(SessionState {
        id: index.id,
        created: index.created,
        slots,
        audit,
        errors: index.errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::create_session;

    #[test]
    fn empty_session_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = create_session("A customer orders a car.").unwrap();
        let path = save_session(&s, dir.path()).unwrap();
        assert!(path.join("artifacts/description-v1.json").exists());
        assert_eq!(load_session(dir.path(), s.id()).unwrap(), s);
    }

    #[test]
    fn truncated_index_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let s = create_session("x").unwrap();
        let path = save_session(&s, dir.path()).unwrap();
        let index = path.join("session.json");
        let text = fs::read_to_string(&index).unwrap();
        fs::write(&index, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_session_dir(&path), Err(SessionError::CorruptStore(_))));
    }

    #[test]
    fn truncated_artifact_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let s = create_session("x").unwrap();
        let path = save_session(&s, dir.path()).unwrap();
        fs::write(path.join("artifacts/description-v1.json"), "{\"descr").unwrap();
        assert!(matches!(load_session_dir(&path), Err(SessionError::CorruptStore(_))));
    }

    #[test]
    fn missing_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_session(dir.path(), "nope"), Err(SessionError::NotFound(_))));
    }
}
