//! Model files.
//!
//! A model is one JSON document. Factor arrays are stored as base64 of
//! little-endian `f64` bytes so values survive bit for bit. The `checksum`
//! field is the SHA-256 (hex) of the canonical JSON of the document with
//! `checksum` removed; canonical means compact with object keys sorted.
//!
//! Version history:
//! - 1: no `seen` lists and no training report.
//! - 2: current.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, ModelError, Result};
use crate::factorization::Hyperparams;
use crate::ingest::Normalization;
use crate::train::{ConvergenceReport, FacTModel, PersonalResiduals, SideSpecs, StopReason, TrainConfig};
use crate::tree::FactorTree;

pub const FORMAT_VERSION: u32 = 2;

/// Serde adapter storing `Vec<f64>` as base64 little-endian bytes.
pub mod b64 {
    use super::*;
    use serde::{de, Deserializer, Serializer};

    pub fn encode(values: &[f64]) -> String {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        STANDARD.encode(bytes)
    }

    pub fn decode(text: &str) -> std::result::Result<Vec<f64>, String> {
        let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
        if bytes.len() % 8 != 0 {
            return Err(format!("{} bytes is not a whole number of f64", bytes.len()));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&encode(values))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        decode(&text).map_err(de::Error::custom)
    }
}

/// Training settings as stored; `hp` lives at the top level of the file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredConfig {
    h: usize,
    max_alternations: usize,
    alt_tol: f64,
    use_parent_factors: bool,
    use_personal_residuals: bool,
    bins: usize,
    normalization: Normalization,
    min_node_size: usize,
    init_rounds: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    hp: Hyperparams,
    config: StoredConfig,
    vocab: Vec<String>,
    users: Vec<String>,
    items: Vec<String>,
    spec: SideSpecs,
    user_tree: FactorTree,
    item_tree: FactorTree,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    personal_residuals: Option<PersonalResiduals>,
    seen: Vec<Vec<usize>>,
    report: ConvergenceReport,
}

fn to_file(model: &FacTModel) -> ModelFile {
    let c = &model.config;
    ModelFile {
        version: FORMAT_VERSION,
        hp: c.hp.clone(),
        config: StoredConfig {
            h: c.h,
            max_alternations: c.max_alternations,
            alt_tol: c.alt_tol,
            use_parent_factors: c.use_parent_factors,
            use_personal_residuals: c.use_personal_residuals,
            bins: c.bins,
            normalization: c.normalization,
            min_node_size: c.min_node_size,
            init_rounds: c.init_rounds,
        },
        vocab: model.vocab.clone(),
        users: model.users.clone(),
        items: model.items.clone(),
        spec: model.spec.clone(),
        user_tree: model.user_tree.clone(),
        item_tree: model.item_tree.clone(),
        personal_residuals: model.personal.clone(),
        seen: model.seen.clone(),
        report: model.report.clone(),
    }
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Model(ModelError::Schema(msg.into()))
}

fn from_file(f: ModelFile) -> Result<FacTModel> {
    let c = f.config;
    let config = TrainConfig {
        h: c.h,
        max_alternations: c.max_alternations,
        alt_tol: c.alt_tol,
        use_parent_factors: c.use_parent_factors,
        use_personal_residuals: c.use_personal_residuals,
        bins: c.bins,
        normalization: c.normalization,
        min_node_size: c.min_node_size,
        init_rounds: c.init_rounds,
        hp: f.hp,
    };
    let mut user_tree = f.user_tree;
    let mut item_tree = f.item_tree;
    check_tree(&user_tree, f.users.len(), f.vocab.len(), "user_tree")?;
    check_tree(&item_tree, f.items.len(), f.vocab.len(), "item_tree")?;
    if user_tree.dim != item_tree.dim {
        return Err(schema("user and item trees disagree on dimension"));
    }
    user_tree.reindex();
    item_tree.reindex();
    if let Some(p) = &f.personal_residuals {
        if p.users.rows() != f.users.len()
            || p.items.rows() != f.items.len()
            || p.users.dim() != user_tree.dim
            || p.items.dim() != user_tree.dim
        {
            return Err(schema("personal residuals have the wrong shape"));
        }
    }
    if f.seen.len() != f.users.len() || f.seen.iter().flatten().any(|&j| j >= f.items.len()) {
        return Err(schema("seen lists do not match users and items"));
    }
    Ok(FacTModel {
        config,
        vocab: f.vocab,
        users: f.users,
        items: f.items,
        spec: f.spec,
        user_tree,
        item_tree,
        personal: f.personal_residuals,
        seen: f.seen,
        report: f.report,
    })
}

fn check_tree(tree: &FactorTree, n_entities: usize, n_features: usize, name: &str) -> Result<()> {
    if tree.n_entities != n_entities {
        return Err(schema(format!("{name} covers {} entities, expected {n_entities}", tree.n_entities)));
    }
    if tree.nodes.is_empty() {
        return Err(schema(format!("{name} has no nodes")));
    }
    let mut covered = vec![0u32; n_entities];
    for (k, node) in tree.nodes.iter().enumerate() {
        if node.id != k || node.residual.len() != tree.dim || node.accumulated.len() != tree.dim {
            return Err(schema(format!("{name} node {k} is malformed")));
        }
        if node.predicate.is_some() != node.children.is_some() {
            return Err(schema(format!("{name} node {k} has a predicate without children or the reverse")));
        }
        if let Some(p) = node.predicate {
            if p.feature >= n_features {
                return Err(schema(format!("{name} node {k} tests unknown feature {}", p.feature)));
            }
        }
        if let Some(children) = node.children {
            if children.iter().any(|&c| c <= k || c >= tree.nodes.len() || tree.nodes[c].parent != Some(k)) {
                return Err(schema(format!("{name} node {k} has invalid children")));
            }
        } else {
            for &e in &node.members {
                if e >= n_entities {
                    return Err(schema(format!("{name} node {k} lists unknown entity {e}")));
                }
                covered[e] += 1;
            }
        }
    }
    if covered.iter().any(|&c| c != 1) {
        return Err(schema(format!("{name} leaves do not partition the entities")));
    }
    Ok(())
}

fn checksum(doc: &Value) -> String {
    let bytes = serde_json::to_vec(doc).expect("value serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Serialises a model to the file format (with checksum).
pub fn to_bytes(model: &FacTModel) -> Result<Vec<u8>> {
    let mut doc = serde_json::to_value(to_file(model))?;
    let sum = checksum(&doc);
    doc.as_object_mut()
        .expect("model is an object")
        .insert("checksum".into(), Value::String(sum));
    let mut out = serde_json::to_vec_pretty(&doc)?;
    out.push(b'\n');
    Ok(out)
}

pub fn save_model(model: &FacTModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// What happened while loading.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub file_version: u32,
    /// One note per migration step applied.
    pub migrations: Vec<String>,
}

fn migrate_v1(doc: &mut serde_json::Map<String, Value>) -> String {
    let n_users = doc.get("users").and_then(Value::as_array).map_or(0, Vec::len);
    doc.insert("seen".into(), Value::Array(vec![Value::Array(Vec::new()); n_users]));
    let report = ConvergenceReport {
        initial_objective: 0.0,
        objectives: Vec::new(),
        stop_reason: StopReason::MaxAlternations,
        timings: Vec::new(),
    };
    doc.insert("report".into(), serde_json::to_value(report).expect("report serializes"));
    doc.insert("version".into(), Value::from(2));
    "migrated v1 -> v2: no seen-item lists recorded (seen filtering disabled), empty training report".into()
}

pub fn from_bytes(bytes: &[u8]) -> Result<(FacTModel, LoadReport)> {
    let doc: Value = serde_json::from_slice(bytes)
        .map_err(|e| Error::Model(ModelError::Checksum(format!("file is not a complete JSON document: {e}"))))?;
    let Value::Object(mut doc) = doc else {
        return Err(schema("top level is not an object"));
    };
    let version = doc
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| schema("missing or non-integer version"))? as u32;
    if version > FORMAT_VERSION || version == 0 {
        return Err(Error::Model(ModelError::Version {
            found: version,
            supported: FORMAT_VERSION,
        }));
    }
    let stored = match doc.remove("checksum") {
        Some(Value::String(s)) => s,
        _ => return Err(schema("missing checksum")),
    };
    let actual = checksum(&Value::Object(doc.clone()));
    if stored != actual {
        return Err(Error::Model(ModelError::Checksum(format!(
            "stored {stored}, computed {actual}"
        ))));
    }
    let mut report = LoadReport {
        file_version: version,
        migrations: Vec::new(),
    };
    if version == 1 {
        let note = migrate_v1(&mut doc);
        log::info!("{note}");
        report.migrations.push(note);
    }
    let file: ModelFile = serde_json::from_value(Value::Object(doc)).map_err(|e| schema(e.to_string()))?;
    Ok((from_file(file)?, report))
}

pub fn load_model_with_report(path: &Path) -> Result<(FacTModel, LoadReport)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub fn load_model(path: &Path) -> Result<FacTModel> {
    Ok(load_model_with_report(path)?.0)
}

/// Rewrites a current-format document as version 1 (drops `seen` and
/// `report`). Used to produce legacy fixtures.
pub fn downgrade_to_v1(bytes: &[u8]) -> Result<Vec<u8>> {
    let Value::Object(mut doc) = serde_json::from_slice(bytes)? else {
        return Err(schema("top level is not an object"));
    };
    doc.remove("checksum");
    doc.remove("seen");
    doc.remove("report");
    doc.insert("version".into(), Value::from(1));
    let mut doc = Value::Object(doc);
    let sum = checksum(&doc);
    doc.as_object_mut()
        .expect("object")
        .insert("checksum".into(), Value::String(sum));
    let mut out = serde_json::to_vec_pretty(&doc)?;
    out.push(b'\n');
    Ok(out)
}
