//! Independent reference implementations and audit harnesses: a scalar
//! re-derivation of the merge, a Monte-Carlo unbiasedness check, synthetic
//! concept sets with controllable support overlap, and the interference
//! benchmark behind `gmerge bench-interference`.

use std::collections::BTreeMap;

use crate::adapter::{ConceptModule, LoraAdapter};
use crate::compose::BaseModelWeights;
use crate::error::{Error, Result};
use crate::matrix::WeightMatrix;
use crate::merging::{dare_sparsify, merge_pipeline, naive_sum, SparsifyConfig};
use crate::prng::MaskStream;

/// Scalar per-coordinate re-derivation of the sign-elect-then-average merge.
///
/// Kept deliberately naive: one coordinate at a time, values gathered into a
/// fresh list, summed in ascending order (the canonical order shared with the
/// production path), elected, filtered, averaged. Bit-equal to
/// `merging::ties_merge` by construction.
pub fn ref_ties_merge(deltas: &[&WeightMatrix]) -> Result<WeightMatrix> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::InvalidInput("need at least one delta".into()))?;
    let (rows, cols) = (first.rows(), first.cols());
    for d in deltas {
        if d.rows() != rows || d.cols() != cols {
            return Err(Error::Dimension("delta shapes disagree".into()));
        }
    }

    fn sgn(x: f64) -> i32 {
        if x > 0.0 {
            1
        } else if x < 0.0 {
            -1
        } else {
            0
        }
    }

    let mut out = vec![0.0f32; rows * cols];
    for u in 0..rows {
        for v in 0..cols {
            let mut values: Vec<f64> = Vec::new();
            for d in deltas {
                values.push(d.get(u, v) as f64);
            }
            values.sort_by(f64::total_cmp);
            let mut total = 0.0f64;
            for &x in &values {
                total += x;
            }
            let gamma = sgn(total);
            if gamma == 0 {
                continue;
            }
            let mut sum = 0.0f64;
            let mut count = 0u32;
            for &x in &values {
                if sgn(x) == gamma {
                    sum += x;
                    count += 1;
                }
            }
            out[u * cols + v] = (sum / count as f64) as f32;
        }
    }
    WeightMatrix::new(rows, cols, out)
}

/// Result of a Monte-Carlo unbiasedness sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McReport {
    /// Frobenius deviation of the sample mean from the input delta; relative
    /// when the input is nonzero, absolute otherwise.
    pub deviation: f64,
    pub relative: bool,
    /// Fraction of mask decisions that kept their element.
    pub kept_fraction: f64,
}

const MC_CONCEPT: &str = "mc";
const MC_TENSOR: &str = "delta";

/// Averages the sparsifier over seeds 0..num_seeds and reports how far the
/// sample mean strays from the input.
///
/// Seeds are swept in a fixed order with f64 accumulation, so the report is
/// bit-reproducible. Requires at least 1,000 seeds for a meaningful estimate.
pub fn mc_unbiasedness(delta: &WeightMatrix, drop_rate: f64, num_seeds: u64) -> Result<McReport> {
    if num_seeds < 1000 {
        return Err(Error::InvalidInput(format!(
            "need at least 1000 seeds, got {num_seeds}"
        )));
    }
    let elements = delta.rows() * delta.cols();
    let mut sums = vec![0.0f64; elements];
    let mut kept = 0u64;
    for seed in 0..num_seeds {
        let config = SparsifyConfig::new(drop_rate, seed)?;
        let sparse = dare_sparsify(delta, &config, MC_CONCEPT, MC_TENSOR)?;
        for (acc, &v) in sums.iter_mut().zip(sparse.data()) {
            *acc += v as f64;
        }
        let stream = MaskStream::new(seed, MC_CONCEPT, MC_TENSOR);
        for i in 0..elements {
            if !stream.drops(i as u64, drop_rate) {
                kept += 1;
            }
        }
    }

    let n = num_seeds as f64;
    let mut dev_sq = 0.0f64;
    let mut ref_sq = 0.0f64;
    for (sum, &v) in sums.iter().zip(delta.data()) {
        let diff = sum / n - v as f64;
        dev_sq += diff * diff;
        ref_sq += (v as f64) * (v as f64);
    }
    let (deviation, relative) = if ref_sq > 0.0 {
        ((dev_sq / ref_sq).sqrt(), true)
    } else {
        (dev_sq.sqrt(), false)
    };
    Ok(McReport {
        deviation,
        relative,
        kept_fraction: kept as f64 / (n * elements as f64),
    })
}

/// Shape of a generated concept set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_concepts: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub scale: f64,
    /// Fraction of output rows whose updates are shared by all concepts;
    /// the remaining rows are split into per-concept private blocks.
    pub support_overlap: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.num_concepts == 0 || self.num_concepts > 99 {
            return Err(Error::InvalidSpec(
                "num_concepts must be between 1 and 99".into(),
            ));
        }
        if self.d_in == 0 || self.d_out == 0 {
            return Err(Error::InvalidSpec("dimensions must be positive".into()));
        }
        if self.rank == 0 || self.rank >= self.d_in.min(self.d_out) {
            return Err(Error::InvalidSpec(
                "rank must satisfy 1 <= rank < min(d_in, d_out)".into(),
            ));
        }
        if !self.support_overlap.is_finite() || !(0.0..=1.0).contains(&self.support_overlap) {
            return Err(Error::InvalidSpec("support_overlap must lie in [0, 1]".into()));
        }
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::InvalidSpec("scale must be positive".into()));
        }
        Ok(())
    }
}

/// A generated instance: concepts, a matching base model, and one probe
/// vector per concept.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub concepts: Vec<ConceptModule>,
    pub base: BaseModelWeights,
    pub probes: BTreeMap<String, Vec<f32>>,
}

/// Name of the single tensor every synthetic concept adapts.
pub const SYNTHETIC_TENSOR: &str = "target";

fn prng_values(seed: u64, concept_id: &str, stream_name: &str, count: usize) -> Vec<f32> {
    let stream = MaskStream::new(seed, concept_id, stream_name);
    (0..count)
        .map(|i| (2.0 * stream.unit(i as u64) - 1.0) as f32)
        .collect()
}

/// Deterministically generates `spec.num_concepts` concepts that all adapt
/// one shared tensor.
///
/// The first `floor(support_overlap * d_out)` output rows are active for
/// every concept; the remaining rows are partitioned into disjoint
/// per-concept blocks, so `support_overlap = 0` yields deltas with disjoint
/// nonzero supports. Prototypes are distinct standard basis vectors (pairwise
/// cosine 0). Generation is a pure function of the `SyntheticSpec` fields.
pub fn make_synthetic_concepts(spec: &SyntheticSpec) -> Result<SyntheticSet> {
    spec.validate()?;
    let n = spec.num_concepts;
    let shared_rows = (spec.support_overlap * spec.d_out as f64).floor() as usize;
    let shared_rows = shared_rows.min(spec.d_out);
    let private_total = spec.d_out - shared_rows;
    if shared_rows < spec.d_out && private_total < n {
        return Err(Error::InvalidSpec(format!(
            "{private_total} private rows cannot cover {n} concepts; raise d_out or support_overlap"
        )));
    }
    let block = private_total.checked_div(n).unwrap_or(0);

    let proto_dim = n.max(8);
    let hidden = spec.d_out;
    let mut concepts = Vec::with_capacity(n);
    let mut probes = BTreeMap::new();
    for k in 0..n {
        let concept_id = format!("c{k:02}");

        // A has PRNG rows on the concept's active rows and zeros elsewhere
        let a_values = prng_values(
            spec.seed,
            &concept_id,
            "init.A",
            spec.d_out * spec.rank,
        );
        let mut a_data = vec![0.0f32; spec.d_out * spec.rank];
        let mut active_rows: Vec<usize> = (0..shared_rows).collect();
        let start = shared_rows + k * block;
        active_rows.extend(start..start + block);
        for row in active_rows {
            let range = row * spec.rank..(row + 1) * spec.rank;
            a_data[range.clone()].copy_from_slice(&a_values[range]);
        }
        let a = WeightMatrix::new(spec.d_out, spec.rank, a_data)?;
        let b = WeightMatrix::new(
            spec.rank,
            spec.d_in,
            prng_values(spec.seed, &concept_id, "init.B", spec.rank * spec.d_in),
        )?;
        let adapter = LoraAdapter::new(SYNTHETIC_TENSOR, a, b, spec.rank, spec.scale)?;

        let token_embedding = prng_values(spec.seed, &concept_id, "embed", hidden);
        let head_row = prng_values(spec.seed, &concept_id, "head", hidden);
        let mut prototype = vec![0.0f32; proto_dim];
        prototype[k] = 1.0;

        probes.insert(
            concept_id.clone(),
            prng_values(spec.seed, &concept_id, "probe", spec.d_in),
        );
        concepts.push(ConceptModule::new(
            concept_id,
            token_embedding,
            head_row,
            vec![adapter],
            prototype,
        )?);
    }

    let mut tensors = BTreeMap::new();
    tensors.insert(
        SYNTHETIC_TENSOR.to_string(),
        WeightMatrix::new(
            spec.d_out,
            spec.d_in,
            prng_values(spec.seed, "base", SYNTHETIC_TENSOR, spec.d_out * spec.d_in),
        )?,
    );
    let base_vocab_len = 4;
    let base = BaseModelWeights::new(
        tensors,
        WeightMatrix::new(
            base_vocab_len,
            hidden,
            prng_values(spec.seed, "base", "embedding_table", base_vocab_len * hidden),
        )?,
        WeightMatrix::new(
            base_vocab_len,
            hidden,
            prng_values(spec.seed, "base", "output_head", base_vocab_len * hidden),
        )?,
        (0..base_vocab_len).map(|i| format!("tok{i}")).collect(),
    )?;

    Ok(SyntheticSet {
        concepts,
        base,
        probes,
    })
}

/// One concept's interference numbers: how far the merged (and naively
/// summed) weights drift from that concept's solo-adapter behavior on its
/// probe input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptFidelity {
    pub concept_id: String,
    pub fidelity_merge: f64,
    pub fidelity_naive: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceReport {
    pub per_concept: Vec<ConceptFidelity>,
    pub mean_fidelity_merge: f64,
    pub mean_fidelity_naive: f64,
    pub max_fidelity_merge: f64,
    pub max_fidelity_naive: f64,
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn diff_norm_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Compares merged and naively summed updates against each concept's solo
/// behavior.
///
/// For concept c with probe x_c, the solo reference is (W + δ_c)x_c per
/// adapted tensor; the reported number is the stacked relative deviation
/// sqrt(Σ_t ‖(W_t+δ')x_c − (W_t+δ_c)x_c‖²) / sqrt(Σ_t ‖(W_t+δ_c)x_c‖²) with
/// δ' the merged (resp. naive) update. Concepts lacking a tensor contribute
/// δ_c = 0 there.
pub fn interference_report(
    concepts: &[&ConceptModule],
    base: &BaseModelWeights,
    probes: &BTreeMap<String, Vec<f32>>,
    config: &SparsifyConfig,
    bypass_single: bool,
) -> Result<InterferenceReport> {
    let merged = merge_pipeline(concepts, config, bypass_single)?;
    let tensor_names: Vec<&str> = merged.iter().map(|m| m.tensor_name.as_str()).collect();

    let mut merged_weights = Vec::with_capacity(tensor_names.len());
    let mut naive_weights = Vec::with_capacity(tensor_names.len());
    let mut base_weights = Vec::with_capacity(tensor_names.len());
    for (record, name) in merged.iter().zip(&tensor_names) {
        let w = base
            .tensor(name)
            .ok_or_else(|| Error::MissingTensor(format!("base weights lack tensor {name}")))?;
        let raw: Vec<WeightMatrix> = concepts
            .iter()
            .filter_map(|c| c.adapter(name))
            .map(|a| a.materialize_delta())
            .collect();
        let refs: Vec<&WeightMatrix> = raw.iter().collect();
        let naive = naive_sum(&refs)?;
        merged_weights.push(w.add(&record.delta)?);
        naive_weights.push(w.add(&naive)?);
        base_weights.push(w);
    }

    let mut per_concept = Vec::with_capacity(concepts.len());
    for concept in concepts {
        let x = probes.get(concept.concept_id()).ok_or_else(|| {
            Error::InvalidInput(format!(
                "no probe vector for concept {}",
                concept.concept_id()
            ))
        })?;
        let mut num_merge = 0.0f64;
        let mut num_naive = 0.0f64;
        let mut den = 0.0f64;
        for (t, name) in tensor_names.iter().enumerate() {
            let y_solo = match concept.adapter(name) {
                Some(adapter) => base_weights[t]
                    .add(&adapter.materialize_delta())?
                    .matvec(x)?,
                None => base_weights[t].matvec(x)?,
            };
            let y_merge = merged_weights[t].matvec(x)?;
            let y_naive = naive_weights[t].matvec(x)?;
            num_merge += diff_norm_sq(&y_merge, &y_solo);
            num_naive += diff_norm_sq(&y_naive, &y_solo);
            den += norm_sq(&y_solo);
        }
        if den == 0.0 {
            return Err(Error::InvalidInput(format!(
                "solo response for concept {} is exactly zero; fidelity undefined",
                concept.concept_id()
            )));
        }
        per_concept.push(ConceptFidelity {
            concept_id: concept.concept_id().to_string(),
            fidelity_merge: (num_merge / den).sqrt(),
            fidelity_naive: (num_naive / den).sqrt(),
        });
    }

    let n = per_concept.len() as f64;
    let report = InterferenceReport {
        mean_fidelity_merge: per_concept.iter().map(|c| c.fidelity_merge).sum::<f64>() / n,
        mean_fidelity_naive: per_concept.iter().map(|c| c.fidelity_naive).sum::<f64>() / n,
        max_fidelity_merge: per_concept
            .iter()
            .map(|c| c.fidelity_merge)
            .fold(0.0, f64::max),
        max_fidelity_naive: per_concept
            .iter()
            .map(|c| c.fidelity_naive)
            .fold(0.0, f64::max),
        per_concept,
    };
    Ok(report)
}
