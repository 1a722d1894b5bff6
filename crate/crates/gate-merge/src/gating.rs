//! Input-dependent concept gating from text mentions and patch similarity.
//!
//! A concept activates when its bracketed token appears in the query, or when
//! top-K pooled cosine similarity between its prototype and the image patch
//! features reaches the threshold τ.

use crate::adapter::ConceptModule;
use crate::error::{Error, Result};
use crate::matrix::{dot, l2_norm};

/// Visual score reported when no image features are supplied.
pub const NO_FEATURES_SCORE: f64 = -1.0;

/// A textual query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub text: String,
}

impl Query {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }
}

/// Bracket glyphs wrapping a concept id to form its vocabulary token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BracketStyle {
    pub open: String,
    pub close: String,
}

impl Default for BracketStyle {
    fn default() -> Self {
        Self {
            open: "<".into(),
            close: ">".into(),
        }
    }
}

impl BracketStyle {
    /// The literal token for a concept id, e.g. `<bo>`.
    pub fn token(&self, concept_id: &str) -> String {
        format!("{}{}{}", self.open, concept_id, self.close)
    }
}

/// ℓ2-normalized patch features from a frozen vision encoder, one row per
/// patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    num_patches: usize,
    dim: usize,
    data: Vec<f32>,
}

/// Tolerance on per-row unit-norm checks.
pub const PATCH_NORM_TOL: f64 = 1e-5;

impl PatchFeatures {
    /// Builds patch features from flat row-major data, checking that every
    /// row is ℓ2-normalized within [`PATCH_NORM_TOL`].
    pub fn new(num_patches: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if num_patches == 0 || dim == 0 {
            return Err(Error::Dimension(
                "patch features need positive patch count and dimension".into(),
            ));
        }
        if data.len() != num_patches * dim {
            return Err(Error::Dimension(format!(
                "feature data length {} does not match {num_patches}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("patch features contain non-finite values".into()));
        }
        for j in 0..num_patches {
            let norm = l2_norm(&data[j * dim..(j + 1) * dim]);
            if (norm - 1.0).abs() > PATCH_NORM_TOL {
                return Err(Error::InvalidInput(format!(
                    "patch {j} is not l2-normalized (norm {norm})"
                )));
            }
        }
        Ok(Self {
            num_patches,
            dim,
            data,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch(&self, j: usize) -> &[f32] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Gating hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    /// Similarity threshold τ; comparison is inclusive (`score >= tau`).
    pub tau: f64,
    /// Number of top patch scores pooled, clamped to the patch count.
    pub top_k: usize,
    pub brackets: BracketStyle,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            top_k: 8,
            brackets: BracketStyle::default(),
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-concept relevance record.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub concept_id: String,
    pub text_hit: bool,
    pub visual_score: f64,
    pub active: bool,
}

/// True iff the bracketed concept token occurs verbatim in the query.
pub fn text_relevance(query: &Query, concept_id: &str, brackets: &BracketStyle) -> bool {
    query.text.contains(&brackets.token(concept_id))
}

/// Cosine score of every patch against a unit-norm prototype.
pub fn patch_scores(features: &PatchFeatures, prototype: &[f32]) -> Result<Vec<f64>> {
    if prototype.len() != features.dim() {
        return Err(Error::Dimension(format!(
            "prototype length {} does not match feature dim {}",
            prototype.len(),
            features.dim()
        )));
    }
    Ok((0..features.num_patches())
        .map(|j| dot(features.patch(j), prototype))
        .collect())
}

/// Mean of the `k` largest scores; `k` is clamped to the score count.
///
/// Ties at the boundary resolve to the lowest patch index, which cannot
/// change the mean but keeps the selected set deterministic.
pub fn topk_pool(scores: &[f64], k: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("cannot pool empty scores".into()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("top_k must be >= 1".into()));
    }
    let k = k.min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort: descending by score, equal scores keep ascending index
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("scores are finite"));
    let sum: f64 = order[..k].iter().map(|&j| scores[j]).sum();
    Ok(sum / k as f64)
}

/// Evaluates the gate for every concept and returns one decision per concept,
/// in input order.
///
/// A concept is active when text-mentioned or, if features are present, when
/// its pooled visual score reaches `tau`. Without features the visual score
/// is reported as [`NO_FEATURES_SCORE`] and only text can activate.
pub fn gate(
    query: &Query,
    features: Option<&PatchFeatures>,
    concepts: &[ConceptModule],
    config: &GateConfig,
) -> Result<Vec<GateDecision>> {
    config.validate()?;
    let mut decisions = Vec::with_capacity(concepts.len());
    for concept in concepts {
        let text_hit = text_relevance(query, concept.concept_id(), &config.brackets);
        let (visual_score, visually_supported) = match features {
            Some(f) => {
                let scores = patch_scores(f, concept.prototype())?;
                let pooled = topk_pool(&scores, config.top_k)?;
                (pooled, pooled >= config.tau)
            }
            None => (NO_FEATURES_SCORE, false),
        };
        decisions.push(GateDecision {
            concept_id: concept.concept_id().to_string(),
            text_hit,
            visual_score,
            active: text_hit || visually_supported,
        });
    }
    Ok(decisions)
}

/// Sorted ids of the active concepts.
pub fn active_set(decisions: &[GateDecision]) -> Vec<String> {
    let mut ids: Vec<String> = decisions
        .iter()
        .filter(|d| d.active)
        .map(|d| d.concept_id.clone())
        .collect();
    ids.sort();
    ids
}
