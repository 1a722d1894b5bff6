//! Concept modules: low-rank adapters, token rows, and visual prototypes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::{l2_norm, WeightMatrix};

/// Tolerance on ‖prototype‖₂ = 1 checks.
pub const PROTOTYPE_NORM_TOL: f64 = 1e-5;

/// Low-rank factor pair targeting one named base tensor.
///
/// The materialized update is `(scale / rank) * A @ B`, the standard LoRA
/// scaling convention.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    tensor_name: String,
    a_factor: WeightMatrix,
    b_factor: WeightMatrix,
    rank: usize,
    scale: f64,
}

impl LoraAdapter {
    pub fn new(
        tensor_name: impl Into<String>,
        a_factor: WeightMatrix,
        b_factor: WeightMatrix,
        rank: usize,
        scale: f64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidConfig("rank must be positive".into()));
        }
        if a_factor.cols() != rank || b_factor.rows() != rank {
            return Err(Error::Dimension(format!(
                "factor shapes {}x{} and {}x{} do not share inner dimension rank={rank}",
                a_factor.rows(),
                a_factor.cols(),
                b_factor.rows(),
                b_factor.cols()
            )));
        }
        let (d_out, d_in) = (a_factor.rows(), b_factor.cols());
        if rank >= d_out.min(d_in) {
            return Err(Error::InvalidConfig(format!(
                "rank {rank} must be < min(d_in={d_in}, d_out={d_out})"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("scale must be > 0, got {scale}")));
        }
        Ok(Self {
            tensor_name: tensor_name.into(),
            a_factor,
            b_factor,
            rank,
            scale,
        })
    }

    pub fn tensor_name(&self) -> &str {
        &self.tensor_name
    }

    pub fn a_factor(&self) -> &WeightMatrix {
        &self.a_factor
    }

    pub fn b_factor(&self) -> &WeightMatrix {
        &self.b_factor
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn d_out(&self) -> usize {
        self.a_factor.rows()
    }

    pub fn d_in(&self) -> usize {
        self.b_factor.cols()
    }

    /// Materializes the full-shape update `(scale/rank) * A @ B`.
    ///
    /// Products and sums accumulate in f64; the result is stored as f32.
    /// Shape agreement is guaranteed by construction, so this cannot fail.
    pub fn materialize_delta(&self) -> WeightMatrix {
        let multiplier = self.scale / self.rank as f64;
        self.a_factor
            .matmul_scaled(&self.b_factor, multiplier)
            .expect("factor shapes validated at construction")
    }
}

/// The complete personalized representation of one concept: token embedding,
/// output-head row, named adapters, and a unit-norm visual prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModule {
    concept_id: String,
    token_embedding: Vec<f32>,
    head_row: Vec<f32>,
    adapters: BTreeMap<String, LoraAdapter>,
    prototype: Vec<f32>,
}

impl ConceptModule {
    pub fn new(
        concept_id: impl Into<String>,
        token_embedding: Vec<f32>,
        head_row: Vec<f32>,
        adapters: Vec<LoraAdapter>,
        prototype: Vec<f32>,
    ) -> Result<Self> {
        let concept_id = concept_id.into();
        validate_concept_id(&concept_id)?;
        if token_embedding.is_empty() || token_embedding.len() != head_row.len() {
            return Err(Error::Dimension(format!(
                "token embedding ({}) and head row ({}) must have equal positive length",
                token_embedding.len(),
                head_row.len()
            )));
        }
        for (label, v) in [("token_embedding", &token_embedding), ("head_row", &head_row)] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("{label} contains non-finite values")));
            }
        }
        validate_prototype(&prototype)?;
        let mut map = BTreeMap::new();
        for adapter in adapters {
            let name = adapter.tensor_name().to_string();
            if map.insert(name.clone(), adapter).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate adapter for tensor {name:?} in concept {concept_id:?}"
                )));
            }
        }
        Ok(Self {
            concept_id,
            token_embedding,
            head_row,
            adapters: map,
            prototype,
        })
    }

    pub fn concept_id(&self) -> &str {
        &self.concept_id
    }

    pub fn token_embedding(&self) -> &[f32] {
        &self.token_embedding
    }

    pub fn head_row(&self) -> &[f32] {
        &self.head_row
    }

    /// Hidden dimensionality shared by the token embedding and head row.
    pub fn hidden_dim(&self) -> usize {
        self.token_embedding.len()
    }

    pub fn adapters(&self) -> &BTreeMap<String, LoraAdapter> {
        &self.adapters
    }

    pub fn adapter(&self, tensor_name: &str) -> Option<&LoraAdapter> {
        self.adapters.get(tensor_name)
    }

    pub fn prototype(&self) -> &[f32] {
        &self.prototype
    }
}

fn validate_concept_id(id: &str) -> Result<()> {
    if id.is_empty() {
        return Err(Error::InvalidInput("concept id must be non-empty".into()));
    }
    if id
        .chars()
        .any(|c| c.is_whitespace() || matches!(c, '<' | '>' | '\u{27E8}' | '\u{27E9}'))
    {
        return Err(Error::InvalidInput(format!(
            "concept id {id:?} must not contain whitespace or angle brackets"
        )));
    }
    Ok(())
}

/// Checks ‖prototype‖₂ = 1 within [`PROTOTYPE_NORM_TOL`].
pub fn validate_prototype(prototype: &[f32]) -> Result<()> {
    if prototype.is_empty() {
        return Err(Error::InvalidInput("prototype must be non-empty".into()));
    }
    if prototype.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("prototype contains non-finite values".into()));
    }
    let norm = l2_norm(prototype);
    if (norm - 1.0).abs() > PROTOTYPE_NORM_TOL {
        return Err(Error::InvalidInput(format!(
            "prototype must be l2-normalized, got norm {norm}"
        )));
    }
    Ok(())
}
