//! Application of fused deltas to base weights and concept-token vocabulary
//! extension.

use std::collections::{BTreeMap, BTreeSet};

use crate::adapter::ConceptModule;
use crate::error::{Error, Result};
use crate::matrix::WeightMatrix;
use crate::merging::MergedDelta;

/// Entry names reserved for the vocabulary tables in weight files; the plain
/// tensor map must not use them.
pub const EMBEDDING_TABLE_NAME: &str = "embedding_table";
pub const OUTPUT_HEAD_NAME: &str = "output_head";

/// A base model's adaptable tensors plus its two vocabulary tables.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModelWeights {
    tensors: BTreeMap<String, WeightMatrix>,
    embedding_table: WeightMatrix,
    output_head: WeightMatrix,
    vocab: Vec<String>,
}

impl BaseModelWeights {
    /// Builds a weight set, checking that both tables are V×d with V equal to
    /// the vocab length and that vocab tokens are unique.
    pub fn new(
        tensors: BTreeMap<String, WeightMatrix>,
        embedding_table: WeightMatrix,
        output_head: WeightMatrix,
        vocab: Vec<String>,
    ) -> Result<Self> {
        if embedding_table.shape() != output_head.shape() {
            return Err(Error::Dimension(format!(
                "embedding table {}x{} and output head {}x{} must agree",
                embedding_table.rows(),
                embedding_table.cols(),
                output_head.rows(),
                output_head.cols()
            )));
        }
        if embedding_table.rows() != vocab.len() {
            return Err(Error::Dimension(format!(
                "tables have {} rows but vocab lists {} tokens",
                embedding_table.rows(),
                vocab.len()
            )));
        }
        let unique: BTreeSet<&str> = vocab.iter().map(String::as_str).collect();
        if unique.len() != vocab.len() {
            return Err(Error::InvalidInput("vocab contains duplicate tokens".into()));
        }
        for reserved in [EMBEDDING_TABLE_NAME, OUTPUT_HEAD_NAME] {
            if tensors.contains_key(reserved) {
                return Err(Error::InvalidInput(format!(
                    "tensor name {reserved} is reserved for the vocabulary tables"
                )));
            }
        }
        Ok(Self {
            tensors,
            embedding_table,
            output_head,
            vocab,
        })
    }

    pub fn tensors(&self) -> &BTreeMap<String, WeightMatrix> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&WeightMatrix> {
        self.tensors.get(name)
    }

    pub fn embedding_table(&self) -> &WeightMatrix {
        &self.embedding_table
    }

    pub fn output_head(&self) -> &WeightMatrix {
        &self.output_head
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Shared width of the vocabulary tables.
    pub fn hidden_dim(&self) -> usize {
        self.embedding_table.cols()
    }
}

/// How a composed weight set came to be: which concepts, under which mask
/// seed and drop rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub concepts: Vec<String>,
    pub seed: u64,
    pub drop_rate: f64,
}

/// Base-shaped weights carrying composition provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedModelWeights {
    pub weights: BaseModelWeights,
    pub provenance: Provenance,
}

/// Adds each fused delta onto its target tensor; untargeted tensors are
/// carried over bit-for-bit.
///
/// Provenance records the union of contributor ids and the shared
/// (seed, drop_rate) of the merge records.
pub fn apply_deltas(base: &BaseModelWeights, merged: &[MergedDelta]) -> Result<ComposedModelWeights> {
    let mut seen = BTreeSet::new();
    let mut concepts = BTreeSet::new();
    let mut tensors = base.tensors.clone();
    for record in merged {
        if !seen.insert(record.tensor_name.as_str()) {
            return Err(Error::InvalidInput(format!(
                "duplicate merged delta for tensor {}",
                record.tensor_name
            )));
        }
        let target = base.tensor(&record.tensor_name).ok_or_else(|| {
            Error::MissingTensor(format!(
                "base weights have no tensor named {}",
                record.tensor_name
            ))
        })?;
        tensors.insert(record.tensor_name.clone(), target.add(&record.delta)?);
        concepts.extend(record.contributors.iter().cloned());
    }
    for pair in merged.windows(2) {
        if pair[0].seed != pair[1].seed || pair[0].drop_rate != pair[1].drop_rate {
            return Err(Error::InvalidInput(
                "merged deltas disagree on seed or drop rate".into(),
            ));
        }
    }
    let provenance = Provenance {
        concepts: concepts.into_iter().collect(),
        seed: merged.first().map_or(0, |r| r.seed),
        drop_rate: merged.first().map_or(0.0, |r| r.drop_rate),
    };
    Ok(ComposedModelWeights {
        weights: BaseModelWeights {
            tensors,
            embedding_table: base.embedding_table.clone(),
            output_head: base.output_head.clone(),
            vocab: base.vocab.clone(),
        },
        provenance,
    })
}

/// Appends one vocab token, embedding row, and head row per concept, in
/// lexicographic concept id order.
///
/// Pre-existing rows are preserved bit-exactly. A concept id that equals an
/// existing vocab token, or appears twice, is a collision.
pub fn extend_vocab(
    base: &BaseModelWeights,
    concepts: &[&ConceptModule],
) -> Result<ComposedModelWeights> {
    let d = base.hidden_dim();
    let mut ordered: Vec<&ConceptModule> = concepts.to_vec();
    ordered.sort_by(|a, b| a.concept_id().cmp(b.concept_id()));
    let existing: BTreeSet<&str> = base.vocab.iter().map(String::as_str).collect();
    for pair in ordered.windows(2) {
        if pair[0].concept_id() == pair[1].concept_id() {
            return Err(Error::Collision(format!(
                "concept id {} appears more than once",
                pair[0].concept_id()
            )));
        }
    }
    for c in &ordered {
        if existing.contains(c.concept_id()) {
            return Err(Error::Collision(format!(
                "concept id {} already present in base vocab",
                c.concept_id()
            )));
        }
        if c.hidden_dim() != d {
            return Err(Error::Dimension(format!(
                "concept {} embeds in dim {} but tables are {d}-wide",
                c.concept_id(),
                c.hidden_dim()
            )));
        }
    }

    let grown = base.vocab.len() + ordered.len();
    let mut vocab = base.vocab.clone();
    let mut embedding = base.embedding_table.data().to_vec();
    let mut head = base.output_head.data().to_vec();
    for c in &ordered {
        vocab.push(c.concept_id().to_string());
        embedding.extend_from_slice(c.token_embedding());
        head.extend_from_slice(c.head_row());
    }

    Ok(ComposedModelWeights {
        weights: BaseModelWeights {
            tensors: base.tensors.clone(),
            embedding_table: WeightMatrix::new(grown, d, embedding)?,
            output_head: WeightMatrix::new(grown, d, head)?,
            vocab,
        },
        provenance: Provenance {
            concepts: ordered.iter().map(|c| c.concept_id().to_string()).collect(),
            seed: 0,
            drop_rate: 0.0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: Vec<f32>) -> WeightMatrix {
        WeightMatrix::new(rows, cols, data).unwrap()
    }

    fn small_base() -> BaseModelWeights {
        let mut tensors = BTreeMap::new();
        tensors.insert("w".to_string(), m(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        tensors.insert("other".to_string(), m(1, 2, vec![0.25, -0.75]));
        BaseModelWeights::new(
            tensors,
            m(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]),
            m(2, 3, vec![-0.1, -0.2, -0.3, -0.4, -0.5, -0.6]),
            vec!["tok0".into(), "tok1".into()],
        )
        .unwrap()
    }

    fn delta_for(name: &str, delta: WeightMatrix) -> MergedDelta {
        MergedDelta {
            tensor_name: name.to_string(),
            delta,
            contributors: vec!["c".to_string()],
            drop_rate: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn base_validation() {
        let tables_disagree = BaseModelWeights::new(
            BTreeMap::new(),
            m(2, 3, vec![0.0; 6]),
            m(3, 2, vec![0.0; 6]),
            vec!["a".into(), "b".into()],
        );
        assert!(tables_disagree.is_err());

        let vocab_short = BaseModelWeights::new(
            BTreeMap::new(),
            m(2, 3, vec![0.0; 6]),
            m(2, 3, vec![0.0; 6]),
            vec!["a".into()],
        );
        assert!(vocab_short.is_err());

        let dup_vocab = BaseModelWeights::new(
            BTreeMap::new(),
            m(2, 3, vec![0.0; 6]),
            m(2, 3, vec![0.0; 6]),
            vec!["a".into(), "a".into()],
        );
        assert!(dup_vocab.is_err());

        let mut reserved = BTreeMap::new();
        reserved.insert(EMBEDDING_TABLE_NAME.to_string(), m(1, 1, vec![0.0]));
        let clash = BaseModelWeights::new(
            reserved,
            m(2, 3, vec![0.0; 6]),
            m(2, 3, vec![0.0; 6]),
            vec!["a".into(), "b".into()],
        );
        assert!(clash.is_err());
    }

    #[test]
    fn apply_empty_is_identity() {
        let base = small_base();
        let composed = apply_deltas(&base, &[]).unwrap();
        assert_eq!(composed.weights, base);
        assert!(composed.provenance.concepts.is_empty());
    }

    #[test]
    fn apply_hand_example() {
        let base = small_base();
        let merged = delta_for("w", m(2, 2, vec![0.5, 0.0, 0.0, -0.5]));
        let composed = apply_deltas(&base, &[merged]).unwrap();
        assert_eq!(
            composed.weights.tensor("w").unwrap().data(),
            &[1.5, 0.0, 0.0, 0.5]
        );
        // untargeted tensor untouched
        assert_eq!(
            composed.weights.tensor("other").unwrap().data(),
            base.tensor("other").unwrap().data()
        );
        assert_eq!(composed.provenance.concepts, vec!["c".to_string()]);
    }

    #[test]
    fn apply_additive_inverse_zeroes_target() {
        let base = small_base();
        let merged = delta_for("w", m(2, 2, vec![-1.0, 0.0, 0.0, -1.0]));
        let composed = apply_deltas(&base, &[merged]).unwrap();
        assert!(composed
            .weights
            .tensor("w")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn apply_unknown_tensor_and_shape_mismatch() {
        let base = small_base();
        let unknown = delta_for("nope", m(1, 1, vec![1.0]));
        assert!(matches!(
            apply_deltas(&base, &[unknown]),
            Err(Error::MissingTensor(_))
        ));
        let wrong_shape = delta_for("w", m(1, 2, vec![1.0, 2.0]));
        assert!(matches!(
            apply_deltas(&base, &[wrong_shape]),
            Err(Error::Dimension(_))
        ));
    }

    fn concept(id: &str, fill: f32, d: usize) -> ConceptModule {
        let mut proto = vec![0.0; 4];
        proto[0] = 1.0;
        ConceptModule::new(id, vec![fill; d], vec![-fill; d], vec![], proto).unwrap()
    }

    #[test]
    fn extend_zero_concepts_is_identity() {
        let base = small_base();
        let out = extend_vocab(&base, &[]).unwrap();
        assert_eq!(out.weights, base);
    }

    #[test]
    fn extend_appends_lexicographically() {
        let base = small_base();
        let zed = concept("zed", 9.0, 3);
        let anna = concept("anna", 7.0, 3);
        let out = extend_vocab(&base, &[&zed, &anna]).unwrap();
        assert_eq!(
            out.weights.vocab(),
            &["tok0".to_string(), "tok1".into(), "anna".into(), "zed".into()]
        );
        assert_eq!(out.weights.embedding_table().shape(), (4, 3));
        assert_eq!(out.weights.embedding_table().row(2), &[7.0, 7.0, 7.0]);
        assert_eq!(out.weights.embedding_table().row(3), &[9.0, 9.0, 9.0]);
        assert_eq!(out.weights.output_head().row(2), &[-7.0, -7.0, -7.0]);
        // prior rows preserved bit-exactly
        assert_eq!(out.weights.embedding_table().row(0), base.embedding_table().row(0));
        assert_eq!(out.weights.output_head().row(1), base.output_head().row(1));
        assert_eq!(out.provenance.concepts, vec!["anna".to_string(), "zed".into()]);
    }

    #[test]
    fn extend_rejects_collisions_and_dim_mismatch() {
        let base = small_base();
        let clash = concept("tok0", 1.0, 3);
        assert!(matches!(
            extend_vocab(&base, &[&clash]),
            Err(Error::Collision(_))
        ));

        let a1 = concept("same", 1.0, 3);
        let a2 = concept("same", 2.0, 3);
        assert!(matches!(
            extend_vocab(&base, &[&a1, &a2]),
            Err(Error::Collision(_))
        ));

        let wrong_d = concept("fine", 1.0, 5);
        assert!(matches!(
            extend_vocab(&base, &[&wrong_d]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn apply_then_subtract_recovers_base() {
        let base = small_base();
        let d = m(2, 2, vec![0.125, -3.5, 9.75, 0.0625]);
        let neg = m(2, 2, d.data().iter().map(|v| -v).collect());
        let once = apply_deltas(&base, &[delta_for("w", d)]).unwrap();
        let back = apply_deltas(&once.weights, &[delta_for("w", neg)]).unwrap();
        for (a, b) in back
            .weights
            .tensor("w")
            .unwrap()
            .data()
            .iter()
            .zip(base.tensor("w").unwrap().data())
        {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}
