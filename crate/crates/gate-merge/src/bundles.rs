//! File schemas layered on the tensor container: concept bundles, base and
//! composed weights, merged-delta sets, patch features, and probe vectors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapter::{ConceptModule, LoraAdapter};
use crate::compose::{
    BaseModelWeights, ComposedModelWeights, Provenance, EMBEDDING_TABLE_NAME, OUTPUT_HEAD_NAME,
};
use crate::container::{Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::gating::PatchFeatures;
use crate::matrix::l2_norm;
use crate::merging::MergedDelta;

pub const FORMAT_VERSION: &str = "1";

const TOKEN_EMBEDDING: &str = "token_embedding";
const HEAD_ROW: &str = "head_row";
const PROTOTYPE: &str = "prototype";
const LORA_PREFIX: &str = "lora.";
const DELTA_PREFIX: &str = "delta.";
const PROBE_PREFIX: &str = "probe.";
const PATCHES: &str = "patches";

fn parse_meta_f64(container: &TensorContainer, key: &str) -> Result<f64> {
    let raw = container.require_meta(key)?;
    raw.parse::<f64>()
        .map_err(|_| Error::Schema(format!("meta {key} is not a number: {raw}")))
}

fn parse_meta_u64(container: &TensorContainer, key: &str) -> Result<u64> {
    let raw = container.require_meta(key)?;
    raw.parse::<u64>()
        .map_err(|_| Error::Schema(format!("meta {key} is not an unsigned integer: {raw}")))
}

fn parse_meta_string_list(container: &TensorContainer, key: &str) -> Result<Vec<String>> {
    let raw = container.require_meta(key)?;
    serde_json::from_str::<Vec<String>>(raw)
        .map_err(|_| Error::Schema(format!("meta {key} is not a JSON string array: {raw}")))
}

fn string_list_json(items: &[String]) -> String {
    serde_json::to_string(items).expect("string lists are valid JSON")
}

fn number_string(x: f64) -> String {
    serde_json::to_string(&x).expect("finite numbers are valid JSON")
}

fn check_format_version(container: &TensorContainer) -> Result<()> {
    let v = container.require_meta("format_version")?;
    if v != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported format_version {v}, expected {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

fn require_vector(container: &TensorContainer, name: &str) -> Result<Vec<f32>> {
    let t = container.require(name)?;
    match t.shape() {
        [_] => Ok(t.data().to_vec()),
        other => Err(Error::Schema(format!(
            "entry {name} must be rank-1, got shape {other:?}"
        ))),
    }
}

/// Serializes a concept to a container.
///
/// All adapters must share one (rank, scale) pair, which the bundle stores as
/// metadata; adapterless concepts store the placeholder pair (0, 0).
pub fn concept_to_container(module: &ConceptModule) -> Result<TensorContainer> {
    let mut rank_scale: Option<(usize, f64)> = None;
    for adapter in module.adapters().values() {
        let pair = (adapter.rank(), adapter.scale());
        match rank_scale {
            None => rank_scale = Some(pair),
            Some(existing) if existing == pair => {}
            Some(existing) => {
                return Err(Error::InvalidInput(format!(
                    "bundle requires uniform adapter rank/scale, got {existing:?} and {pair:?}"
                )))
            }
        }
    }
    let (rank, scale) = rank_scale.unwrap_or((0, 0.0));

    let mut container = TensorContainer::new();
    container.insert(
        TOKEN_EMBEDDING,
        Tensor::vector(module.token_embedding().to_vec())?,
    )?;
    container.insert(HEAD_ROW, Tensor::vector(module.head_row().to_vec())?)?;
    container.insert(PROTOTYPE, Tensor::vector(module.prototype().to_vec())?)?;
    for (name, adapter) in module.adapters() {
        container.insert(
            format!("{LORA_PREFIX}{name}.A"),
            Tensor::from_matrix(adapter.a_factor()),
        )?;
        container.insert(
            format!("{LORA_PREFIX}{name}.B"),
            Tensor::from_matrix(adapter.b_factor()),
        )?;
    }
    container.set_meta("concept_id", module.concept_id());
    container.set_meta("rank", rank.to_string());
    container.set_meta("scale", number_string(scale));
    container.set_meta("format_version", FORMAT_VERSION);
    Ok(container)
}

/// Rebuilds a concept from a bundle container, re-validating every module
/// invariant (factor shapes, rank agreement, prototype norm).
pub fn concept_from_container(container: &TensorContainer) -> Result<ConceptModule> {
    check_format_version(container)?;
    let concept_id = container.require_meta("concept_id")?.to_string();
    let rank = container.require_meta("rank")?;
    let rank: usize = rank
        .parse()
        .map_err(|_| Error::Schema(format!("meta rank is not an integer: {rank}")))?;
    let scale = parse_meta_f64(container, "scale")?;

    let token_embedding = require_vector(container, TOKEN_EMBEDDING)?;
    let head_row = require_vector(container, HEAD_ROW)?;
    let prototype = require_vector(container, PROTOTYPE)?;

    let mut factors: BTreeMap<String, (Option<&Tensor>, Option<&Tensor>)> = BTreeMap::new();
    for (name, tensor) in container.tensors() {
        let Some(rest) = name.strip_prefix(LORA_PREFIX) else {
            continue;
        };
        if let Some(tensor_name) = rest.strip_suffix(".A") {
            factors.entry(tensor_name.to_string()).or_default().0 = Some(tensor);
        } else if let Some(tensor_name) = rest.strip_suffix(".B") {
            factors.entry(tensor_name.to_string()).or_default().1 = Some(tensor);
        } else {
            return Err(Error::Schema(format!(
                "adapter entry {name} must end in .A or .B"
            )));
        }
    }

    let mut adapters = Vec::with_capacity(factors.len());
    for (tensor_name, (a, b)) in factors {
        let (Some(a), Some(b)) = (a, b) else {
            return Err(Error::Schema(format!(
                "adapter {tensor_name} is missing its A or B factor"
            )));
        };
        let a = a.to_matrix()?;
        let b = b.to_matrix()?;
        if a.cols() != rank {
            return Err(Error::Schema(format!(
                "adapter {tensor_name}: A has {} columns but meta rank is {rank}",
                a.cols()
            )));
        }
        if b.rows() != rank {
            return Err(Error::Schema(format!(
                "adapter {tensor_name}: B has {} rows but meta rank is {rank}",
                b.rows()
            )));
        }
        adapters.push(LoraAdapter::new(tensor_name, a, b, rank, scale)?);
    }

    ConceptModule::new(concept_id, token_embedding, head_row, adapters, prototype)
}

pub fn store_concept(module: &ConceptModule, path: &Path) -> Result<u64> {
    concept_to_container(module)?.save(path)
}

pub fn load_concept(path: &Path) -> Result<ConceptModule> {
    concept_from_container(&TensorContainer::load(path)?)
}

pub fn base_weights_to_container(base: &BaseModelWeights) -> Result<TensorContainer> {
    let mut container = TensorContainer::new();
    for (name, tensor) in base.tensors() {
        container.insert(name.clone(), Tensor::from_matrix(tensor))?;
    }
    container.insert(
        EMBEDDING_TABLE_NAME,
        Tensor::from_matrix(base.embedding_table()),
    )?;
    container.insert(OUTPUT_HEAD_NAME, Tensor::from_matrix(base.output_head()))?;
    container.set_meta("vocab", string_list_json(base.vocab()));
    container.set_meta("format_version", FORMAT_VERSION);
    Ok(container)
}

pub fn base_weights_from_container(container: &TensorContainer) -> Result<BaseModelWeights> {
    check_format_version(container)?;
    let vocab = parse_meta_string_list(container, "vocab")?;
    let embedding = container.require(EMBEDDING_TABLE_NAME)?.to_matrix()?;
    let head = container.require(OUTPUT_HEAD_NAME)?.to_matrix()?;
    let mut tensors = BTreeMap::new();
    for (name, tensor) in container.tensors() {
        if name == EMBEDDING_TABLE_NAME || name == OUTPUT_HEAD_NAME {
            continue;
        }
        tensors.insert(name.clone(), tensor.to_matrix()?);
    }
    BaseModelWeights::new(tensors, embedding, head, vocab)
}

pub fn store_base_weights(base: &BaseModelWeights, path: &Path) -> Result<u64> {
    base_weights_to_container(base)?.save(path)
}

pub fn load_base_weights(path: &Path) -> Result<BaseModelWeights> {
    base_weights_from_container(&TensorContainer::load(path)?)
}

/// Composed weights serialize like base weights plus provenance metadata.
pub fn composed_to_container(composed: &ComposedModelWeights) -> Result<TensorContainer> {
    let mut container = base_weights_to_container(&composed.weights)?;
    container.set_meta("concepts", string_list_json(&composed.provenance.concepts));
    container.set_meta("seed", composed.provenance.seed.to_string());
    container.set_meta("drop_rate", number_string(composed.provenance.drop_rate));
    Ok(container)
}

pub fn composed_from_container(container: &TensorContainer) -> Result<ComposedModelWeights> {
    let weights = base_weights_from_container(container)?;
    let provenance = Provenance {
        concepts: parse_meta_string_list(container, "concepts")?,
        seed: parse_meta_u64(container, "seed")?,
        drop_rate: parse_meta_f64(container, "drop_rate")?,
    };
    Ok(ComposedModelWeights { weights, provenance })
}

pub fn store_composed(composed: &ComposedModelWeights, path: &Path) -> Result<u64> {
    composed_to_container(composed)?.save(path)
}

pub fn load_composed(path: &Path) -> Result<ComposedModelWeights> {
    composed_from_container(&TensorContainer::load(path)?)
}

/// The output of one merge invocation: fused deltas plus the flags and active
/// set that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedDeltaSet {
    pub deltas: Vec<MergedDelta>,
    pub active: Vec<String>,
    pub drop_rate: f64,
    pub seed: u64,
}

pub fn merged_set_to_container(set: &MergedDeltaSet) -> Result<TensorContainer> {
    let mut container = TensorContainer::new();
    for record in &set.deltas {
        container.insert(
            format!("{DELTA_PREFIX}{}", record.tensor_name),
            Tensor::from_matrix(&record.delta),
        )?;
        container.set_meta(
            format!("contributors.{}", record.tensor_name),
            string_list_json(&record.contributors),
        );
    }
    container.set_meta("active", string_list_json(&set.active));
    container.set_meta("drop_rate", number_string(set.drop_rate));
    container.set_meta("seed", set.seed.to_string());
    container.set_meta("format_version", FORMAT_VERSION);
    Ok(container)
}

pub fn merged_set_from_container(container: &TensorContainer) -> Result<MergedDeltaSet> {
    check_format_version(container)?;
    let active = parse_meta_string_list(container, "active")?;
    let drop_rate = parse_meta_f64(container, "drop_rate")?;
    let seed = parse_meta_u64(container, "seed")?;
    let mut deltas = Vec::new();
    for (name, tensor) in container.tensors() {
        let Some(tensor_name) = name.strip_prefix(DELTA_PREFIX) else {
            return Err(Error::Schema(format!(
                "unexpected entry {name} in a merged-delta file"
            )));
        };
        let contributors =
            parse_meta_string_list(container, &format!("contributors.{tensor_name}"))?;
        if contributors.is_empty() {
            return Err(Error::Schema(format!(
                "delta {tensor_name} lists no contributors"
            )));
        }
        deltas.push(MergedDelta {
            tensor_name: tensor_name.to_string(),
            delta: tensor.to_matrix()?,
            contributors,
            drop_rate,
            seed,
        });
    }
    Ok(MergedDeltaSet {
        deltas,
        active,
        drop_rate,
        seed,
    })
}

pub fn store_merged_set(set: &MergedDeltaSet, path: &Path) -> Result<u64> {
    merged_set_to_container(set)?.save(path)
}

pub fn load_merged_set(path: &Path) -> Result<MergedDeltaSet> {
    merged_set_from_container(&TensorContainer::load(path)?)
}

pub fn patch_features_to_container(features: &PatchFeatures) -> Result<TensorContainer> {
    let mut container = TensorContainer::new();
    container.insert(
        PATCHES,
        Tensor::new(
            vec![features.num_patches(), features.dim()],
            features.data().to_vec(),
        )?,
    )?;
    container.set_meta("format_version", FORMAT_VERSION);
    Ok(container)
}

pub fn patch_features_from_container(container: &TensorContainer) -> Result<PatchFeatures> {
    check_format_version(container)?;
    let t = container.require(PATCHES)?;
    match t.shape() {
        &[p, d] => PatchFeatures::new(p, d, t.data().to_vec()),
        other => Err(Error::Schema(format!(
            "entry {PATCHES} must be rank-2, got shape {other:?}"
        ))),
    }
}

pub fn store_patch_features(features: &PatchFeatures, path: &Path) -> Result<u64> {
    patch_features_to_container(features)?.save(path)
}

pub fn load_patch_features(path: &Path) -> Result<PatchFeatures> {
    patch_features_from_container(&TensorContainer::load(path)?)
}

/// Per-concept probe inputs for the interference benchmark.
pub fn probes_to_container(probes: &BTreeMap<String, Vec<f32>>) -> Result<TensorContainer> {
    let mut container = TensorContainer::new();
    for (concept_id, x) in probes {
        container.insert(format!("{PROBE_PREFIX}{concept_id}"), Tensor::vector(x.clone())?)?;
    }
    container.set_meta("format_version", FORMAT_VERSION);
    Ok(container)
}

pub fn probes_from_container(container: &TensorContainer) -> Result<BTreeMap<String, Vec<f32>>> {
    check_format_version(container)?;
    let mut probes = BTreeMap::new();
    for (name, tensor) in container.tensors() {
        let Some(concept_id) = name.strip_prefix(PROBE_PREFIX) else {
            return Err(Error::Schema(format!(
                "unexpected entry {name} in a probes file"
            )));
        };
        match tensor.shape() {
            [_] => {
                probes.insert(concept_id.to_string(), tensor.data().to_vec());
            }
            other => {
                return Err(Error::Schema(format!(
                    "probe {concept_id} must be rank-1, got shape {other:?}"
                )))
            }
        }
    }
    Ok(probes)
}

pub fn store_probes(probes: &BTreeMap<String, Vec<f32>>, path: &Path) -> Result<u64> {
    probes_to_container(probes)?.save(path)
}

pub fn load_probes(path: &Path) -> Result<BTreeMap<String, Vec<f32>>> {
    probes_from_container(&TensorContainer::load(path)?)
}

/// Threshold below which a mean patch vector is considered degenerate.
pub const PROTOTYPE_DEGENERACY_EPS: f64 = 1e-12;

/// Builds a unit-norm prototype as the normalized mean of every patch vector
/// across all support feature sets.
pub fn build_prototype(support: &[PatchFeatures]) -> Result<Vec<f32>> {
    let first = support
        .first()
        .ok_or_else(|| Error::InvalidInput("prototype needs a non-empty support set".into()))?;
    let dim = first.dim();
    let mut sum = vec![0.0f64; dim];
    let mut count = 0usize;
    for features in support {
        if features.dim() != dim {
            return Err(Error::Dimension(format!(
                "support features mix dims {dim} and {}",
                features.dim()
            )));
        }
        for j in 0..features.num_patches() {
            for (acc, &v) in sum.iter_mut().zip(features.patch(j)) {
                *acc += v as f64;
            }
        }
        count += features.num_patches();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < PROTOTYPE_DEGENERACY_EPS {
        return Err(Error::DegeneratePrototype(
            "support patches average to the zero vector".into(),
        ));
    }
    let proto: Vec<f32> = mean.iter().map(|v| (v / norm) as f32).collect();
    debug_assert!((l2_norm(&proto) - 1.0).abs() < 1e-6);
    Ok(proto)
}
