//! Shared plumbing for pipeline front ends (the CLI and the C ABI): loading
//! bundle directories, resolving requested concept ids, and shaping gate
//! decisions into the JSON report format.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{debug, info};
use serde_json::json;

use crate::adapter::ConceptModule;
use crate::bundles::load_concept;
use crate::error::{Error, Result};
use crate::gating::{active_set, GateDecision};

/// Loads every `*.gmt` bundle in a directory, keyed and ordered by concept id.
pub fn load_concept_dir(dir: &Path) -> Result<BTreeMap<String, ConceptModule>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "gmt"))
        .collect();
    paths.sort();
    let mut concepts = BTreeMap::new();
    for path in paths {
        let module = load_concept(&path)
            .map_err(|e| annotate(e, &format!("in bundle {}", path.display())))?;
        debug!("loaded concept {} from {}", module.concept_id(), path.display());
        if let Some(previous) = concepts.insert(module.concept_id().to_string(), module) {
            return Err(Error::Collision(format!(
                "concept id {} appears in more than one bundle",
                previous.concept_id()
            )));
        }
    }
    info!("loaded {} concept bundle(s) from {}", concepts.len(), dir.display());
    Ok(concepts)
}

/// Wraps a non-I/O error with file context; I/O errors keep their kind so
/// callers can still distinguish them.
fn annotate(e: Error, context: &str) -> Error {
    match e {
        Error::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other} ({context})")),
    }
}

/// Splits a comma-separated id list, dropping blanks around separators.
pub fn parse_id_list(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Resolves requested ids against the loaded bundles, sorted and deduplicated.
pub fn select_concepts<'a>(
    concepts: &'a BTreeMap<String, ConceptModule>,
    ids: &[String],
) -> Result<Vec<&'a ConceptModule>> {
    let mut unique: Vec<&str> = ids.iter().map(String::as_str).collect();
    unique.sort_unstable();
    unique.dedup();
    unique
        .into_iter()
        .map(|id| {
            concepts
                .get(id)
                .ok_or_else(|| Error::InvalidInput(format!("unknown concept id {id}")))
        })
        .collect()
}

/// The machine-readable gate report: the sorted active set plus one record
/// per decision in input order.
pub fn decisions_to_json(decisions: &[GateDecision]) -> serde_json::Value {
    json!({
        "active": active_set(decisions),
        "decisions": decisions
            .iter()
            .map(|d| {
                json!({
                    "concept_id": d.concept_id,
                    "text_hit": d.text_hit,
                    "visual_score": d.visual_score,
                    "active": d.active,
                })
            })
            .collect::<Vec<_>>(),
    })
}
