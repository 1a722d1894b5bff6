//! Stochastic sparsification and sign-consistent fusion of adapter deltas.
//!
//! `dare_sparsify` drops entries with probability p and rescales survivors by
//! 1/(1-p), which keeps the expectation unchanged. `ties_merge` elects a
//! per-coordinate dominant sign and averages only the entries that agree with
//! it. `merge_pipeline` chains both over the active concepts, one fused delta
//! per adapted tensor.

use std::collections::BTreeSet;

use crate::adapter::ConceptModule;
use crate::error::{Error, Result};
use crate::matrix::WeightMatrix;
use crate::prng::MaskStream;

/// Sparsification parameters shared by every mask in one merge invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsifyConfig {
    /// Per-entry drop probability, in [0, 1).
    pub drop_rate: f64,
    /// Base seed; masks are keyed by (seed, concept_id, tensor_name).
    pub seed: u64,
}

impl SparsifyConfig {
    pub fn new(drop_rate: f64, seed: u64) -> Result<Self> {
        let config = Self { drop_rate, seed };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.drop_rate.is_finite() || !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::InvalidConfig(format!(
                "drop rate must lie in [0, 1), got {}",
                self.drop_rate
            )));
        }
        Ok(())
    }
}

/// Per-coordinate elected directions, entries in {-1, 0, +1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
}

impl SignMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }
}

/// One fused tensor update together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedDelta {
    pub tensor_name: String,
    pub delta: WeightMatrix,
    /// Contributing concept ids, sorted lexicographically.
    pub contributors: Vec<String>,
    pub drop_rate: f64,
    pub seed: u64,
}

/// Drops each entry with probability `config.drop_rate` and rescales the
/// survivors by 1/(1-p).
///
/// The mask is a pure function of (seed, concept_id, tensor_name, element
/// index), so repeated calls are bit-identical. p = 0 returns the input
/// unchanged. Rescaling happens in f64 and is stored as f32; a survivor that
/// overflows f32 is reported as a data error.
pub fn dare_sparsify(
    delta: &WeightMatrix,
    config: &SparsifyConfig,
    concept_id: &str,
    tensor_name: &str,
) -> Result<WeightMatrix> {
    config.validate()?;
    let p = config.drop_rate;
    if p == 0.0 {
        return Ok(delta.clone());
    }
    let stream = MaskStream::new(config.seed, concept_id, tensor_name);
    let data: Vec<f32> = delta
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if stream.drops(i as u64, p) {
                0.0
            } else {
                (v as f64 / (1.0 - p)) as f32
            }
        })
        .collect();
    WeightMatrix::new(delta.rows(), delta.cols(), data)
}

fn check_same_shapes(deltas: &[&WeightMatrix]) -> Result<(usize, usize)> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::InvalidInput("need at least one delta".into()))?;
    let shape = (first.rows(), first.cols());
    for d in &deltas[1..] {
        if (d.rows(), d.cols()) != shape {
            return Err(Error::Dimension(format!(
                "delta shapes disagree: {}x{} vs {}x{}",
                shape.0,
                shape.1,
                d.rows(),
                d.cols()
            )));
        }
    }
    Ok(shape)
}

fn sign_of(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Sums the values in ascending order so the result depends only on the
/// multiset, never on input ordering.
fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Elects the dominant sign at each coordinate: the sign of the summed
/// deltas, with exact cancellation (or all zeros) electing 0.
///
/// Sums accumulate in f64 over a canonical value ordering, so the election is
/// invariant to the order of `deltas`.
pub fn sign_elect(deltas: &[&WeightMatrix]) -> Result<SignMatrix> {
    let (rows, cols) = check_same_shapes(deltas)?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut scratch = Vec::with_capacity(deltas.len());
    for i in 0..rows * cols {
        scratch.clear();
        scratch.extend(deltas.iter().map(|d| d.data()[i] as f64));
        data.push(sign_of(canonical_sum(&mut scratch)));
    }
    Ok(SignMatrix { rows, cols, data })
}

/// Fuses deltas coordinate-wise: entries whose sign matches the elected
/// direction are averaged, everything else is discarded.
///
/// Zero entries carry no direction and never join the electorate, so deltas
/// with disjoint supports merge into their elementwise sum. Coordinates whose
/// election is 0 output 0. Like [`sign_elect`], sums follow a canonical value
/// ordering, making the result invariant to input ordering.
pub fn ties_merge(deltas: &[&WeightMatrix]) -> Result<WeightMatrix> {
    let (rows, cols) = check_same_shapes(deltas)?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut scratch = Vec::with_capacity(deltas.len());
    for i in 0..rows * cols {
        scratch.clear();
        scratch.extend(deltas.iter().map(|d| d.data()[i] as f64));
        let gamma = sign_of(canonical_sum(&mut scratch));
        if gamma == 0 {
            data.push(0.0f32);
            continue;
        }
        // scratch is already sorted; filtering keeps the canonical order
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for &v in scratch.iter() {
            if sign_of(v) == gamma {
                sum += v;
                count += 1;
            }
        }
        data.push((sum / count as f64) as f32);
    }
    WeightMatrix::new(rows, cols, data)
}

/// Elementwise sum, the interference-prone baseline that merging replaces.
pub fn naive_sum(deltas: &[&WeightMatrix]) -> Result<WeightMatrix> {
    let (rows, cols) = check_same_shapes(deltas)?;
    let mut scratch = Vec::with_capacity(deltas.len());
    let data: Vec<f32> = (0..rows * cols)
        .map(|i| {
            scratch.clear();
            scratch.extend(deltas.iter().map(|d| d.data()[i] as f64));
            canonical_sum(&mut scratch) as f32
        })
        .collect();
    WeightMatrix::new(rows, cols, data)
}

/// Runs sparsify-then-merge for every tensor adapted by any active concept.
///
/// Concepts lacking a given tensor contribute nothing there. With a single
/// active concept and `bypass_single` set, its materialized deltas pass
/// through verbatim with no sparsification. Output is sorted by tensor name;
/// contributor lists are sorted by concept id.
pub fn merge_pipeline(
    concepts: &[&ConceptModule],
    config: &SparsifyConfig,
    bypass_single: bool,
) -> Result<Vec<MergedDelta>> {
    config.validate()?;
    if concepts.is_empty() {
        return Err(Error::InvalidInput(
            "merge requires at least one active concept".into(),
        ));
    }
    let mut ordered: Vec<&ConceptModule> = concepts.to_vec();
    ordered.sort_by(|a, b| a.concept_id().cmp(b.concept_id()));
    for pair in ordered.windows(2) {
        if pair[0].concept_id() == pair[1].concept_id() {
            return Err(Error::InvalidInput(format!(
                "duplicate concept id in active set: {}",
                pair[0].concept_id()
            )));
        }
    }

    let tensor_names: BTreeSet<&str> = ordered
        .iter()
        .flat_map(|c| c.adapters().keys().map(String::as_str))
        .collect();

    let bypass = bypass_single && ordered.len() == 1;
    let mut merged = Vec::with_capacity(tensor_names.len());
    for name in tensor_names {
        let holders: Vec<&ConceptModule> = ordered
            .iter()
            .filter(|c| c.adapter(name).is_some())
            .copied()
            .collect();
        let raw: Vec<WeightMatrix> = holders
            .iter()
            .map(|c| c.adapter(name).expect("holder has this tensor").materialize_delta())
            .collect();
        let delta = if bypass {
            raw.into_iter().next().expect("holders non-empty")
        } else {
            let sparsified: Vec<WeightMatrix> = holders
                .iter()
                .zip(&raw)
                .map(|(c, d)| dare_sparsify(d, config, c.concept_id(), name))
                .collect::<Result<_>>()?;
            let refs: Vec<&WeightMatrix> = sparsified.iter().collect();
            ties_merge(&refs)?
        };
        merged.push(MergedDelta {
            tensor_name: name.to_string(),
            delta,
            contributors: holders.iter().map(|c| c.concept_id().to_string()).collect(),
            drop_rate: config.drop_rate,
            seed: config.seed,
        });
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::LoraAdapter;

    fn m(rows: usize, cols: usize, data: Vec<f32>) -> WeightMatrix {
        WeightMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn config_rejects_bad_drop_rates() {
        assert!(SparsifyConfig::new(1.0, 0).is_err());
        assert!(SparsifyConfig::new(1.5, 0).is_err());
        assert!(SparsifyConfig::new(-0.1, 0).is_err());
        assert!(SparsifyConfig::new(f64::NAN, 0).is_err());
        assert!(SparsifyConfig::new(0.0, 0).is_ok());
        assert!(SparsifyConfig::new(0.999, 0).is_ok());
    }

    #[test]
    fn dare_zero_rate_is_identity() {
        let delta = m(2, 3, vec![0.1, -2.5, 3.25, 0.0, 7.125, -0.375]);
        let config = SparsifyConfig::new(0.0, 99).unwrap();
        let out = dare_sparsify(&delta, &config, "c", "t").unwrap();
        assert_eq!(out.data(), delta.data());
    }

    #[test]
    fn dare_zero_input_stays_zero() {
        let delta = WeightMatrix::zeros(3, 3);
        let config = SparsifyConfig::new(0.7, 5).unwrap();
        let out = dare_sparsify(&delta, &config, "c", "t").unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dare_frozen_reference_mask() {
        // 4x4 ones, p=0.5, seed=7, concept "a", tensor "w"; survivors scale
        // to exactly 2.0. Reference rows computed by an independent
        // implementation of the mask contract.
        let delta = m(4, 4, vec![1.0; 16]);
        let config = SparsifyConfig::new(0.5, 7).unwrap();
        let out = dare_sparsify(&delta, &config, "a", "w").unwrap();
        let expected: Vec<f32> = vec![
            0.0, 2.0, 2.0, 2.0, //
            0.0, 0.0, 2.0, 2.0, //
            0.0, 0.0, 2.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(out.data(), expected.as_slice());
    }

    #[test]
    fn dare_is_deterministic_and_keyed() {
        let delta = m(2, 2, vec![1.0, -1.0, 0.5, -0.5]);
        let config = SparsifyConfig::new(0.5, 11).unwrap();
        let a = dare_sparsify(&delta, &config, "x", "t").unwrap();
        let b = dare_sparsify(&delta, &config, "x", "t").unwrap();
        assert_eq!(a.data(), b.data());

        let mut distinct = false;
        for t in ["t0", "t1", "t2", "t3", "t4", "t5", "t6", "t7"] {
            let c = dare_sparsify(&delta, &config, "x", t).unwrap();
            if c.data() != a.data() {
                distinct = true;
                break;
            }
        }
        assert!(distinct, "masks should vary across tensor names");
    }

    #[test]
    fn dare_rejects_full_drop() {
        let delta = m(1, 1, vec![1.0]);
        let config = SparsifyConfig {
            drop_rate: 1.0,
            seed: 0,
        };
        assert!(matches!(
            dare_sparsify(&delta, &config, "c", "t"),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn sign_election_examples() {
        let d1 = m(1, 2, vec![1.0, -2.0]);
        let d2 = m(1, 2, vec![2.0, 1.0]);
        let gamma = sign_elect(&[&d1, &d2]).unwrap();
        assert_eq!(gamma.data(), &[1, -1]);

        let a = m(1, 1, vec![1.0]);
        let b = m(1, 1, vec![-1.0]);
        assert_eq!(sign_elect(&[&a, &b]).unwrap().data(), &[0]);

        let single = m(1, 2, vec![-3.0, 0.0]);
        assert_eq!(sign_elect(&[&single]).unwrap().data(), &[-1, 0]);
    }

    #[test]
    fn sign_election_shape_mismatch() {
        let a = m(1, 2, vec![1.0, 2.0]);
        let b = m(2, 1, vec![1.0, 2.0]);
        assert!(matches!(sign_elect(&[&a, &b]), Err(Error::Dimension(_))));
        assert!(matches!(sign_elect(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn ties_worked_example() {
        let d1 = m(2, 2, vec![1.0, -2.0, 0.0, 3.0]);
        let d2 = m(2, 2, vec![2.0, 1.0, 0.0, -1.0]);
        let out = ties_merge(&[&d1, &d2]).unwrap();
        assert_eq!(out.data(), &[1.5, -2.0, 0.0, 3.0]);
    }

    #[test]
    fn ties_single_delta_is_identity() {
        let d = m(2, 2, vec![0.1, -0.2, 0.0, 123.456]);
        let out = ties_merge(&[&d]).unwrap();
        assert_eq!(out.data(), d.data());
    }

    #[test]
    fn ties_disjoint_supports_sum() {
        let d1 = m(2, 2, vec![1.5, 0.0, 0.0, -2.5]);
        let d2 = m(2, 2, vec![0.0, 3.0, 0.0, 0.0]);
        let out = ties_merge(&[&d1, &d2]).unwrap();
        assert_eq!(out.data(), &[1.5, 3.0, 0.0, -2.5]);
    }

    #[test]
    fn ties_exact_cancellation_gives_zero() {
        let d1 = m(1, 1, vec![4.0]);
        let d2 = m(1, 1, vec![-4.0]);
        assert_eq!(ties_merge(&[&d1, &d2]).unwrap().data(), &[0.0]);
    }

    #[test]
    fn naive_sum_examples() {
        let a = m(1, 1, vec![1.0]);
        let b = m(1, 1, vec![2.0]);
        assert_eq!(naive_sum(&[&a, &b]).unwrap().data(), &[3.0]);

        let x = m(2, 1, vec![0.5, -3.0]);
        let neg = m(2, 1, vec![-0.5, 3.0]);
        assert_eq!(naive_sum(&[&x, &neg]).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn naive_sum_matches_chained_add() {
        let a = m(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let b = m(2, 2, vec![-1.0, 2.0, -3.0, 4.0]);
        let c = m(2, 2, vec![10.0, 20.0, 30.0, 40.0]);
        let direct = naive_sum(&[&a, &b, &c]).unwrap();
        let chained = a.add(&b).unwrap().add(&c).unwrap();
        for (x, y) in direct.data().iter().zip(chained.data()) {
            assert!((x - y).abs() <= f32::EPSILON * x.abs().max(1.0));
        }
    }

    fn concept_with_adapters(id: &str, tensors: &[(&str, f32)]) -> ConceptModule {
        // rank-1 adapter on 2x2 tensors: A = [[v],[0]], B = [[1, 0]], scale 1
        // materializes to [[v, 0], [0, 0]]
        let adapters = tensors
            .iter()
            .map(|(name, v)| {
                LoraAdapter::new(
                    *name,
                    m(2, 1, vec![*v, 0.0]),
                    m(1, 2, vec![1.0, 0.0]),
                    1,
                    1.0,
                )
                .unwrap()
            })
            .collect();
        ConceptModule::new(id, vec![0.0; 4], vec![0.0; 4], adapters, vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn pipeline_single_concept_bypasses_sparsification() {
        let c = concept_with_adapters("solo", &[("w", 2.5)]);
        let config = SparsifyConfig::new(0.9, 3).unwrap();
        let merged = merge_pipeline(&[&c], &config, true).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].tensor_name, "w");
        assert_eq!(merged[0].contributors, vec!["solo".to_string()]);
        let expected = c.adapter("w").unwrap().materialize_delta();
        assert_eq!(merged[0].delta.data(), expected.data());
    }

    #[test]
    fn pipeline_zero_rate_matches_raw_ties() {
        let c1 = concept_with_adapters("a", &[("w", 1.0)]);
        let c2 = concept_with_adapters("b", &[("w", 3.0)]);
        let config = SparsifyConfig::new(0.0, 7).unwrap();
        let merged = merge_pipeline(&[&c2, &c1], &config, true).unwrap();
        let d1 = c1.adapter("w").unwrap().materialize_delta();
        let d2 = c2.adapter("w").unwrap().materialize_delta();
        let expected = ties_merge(&[&d1, &d2]).unwrap();
        assert_eq!(merged[0].delta.data(), expected.data());
        assert_eq!(merged[0].contributors, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn pipeline_disjoint_tensors_pass_through() {
        let c1 = concept_with_adapters("a", &[("w0", 1.0)]);
        let c2 = concept_with_adapters("b", &[("w1", -2.0)]);
        let c3 = concept_with_adapters("c", &[("w2", 0.5)]);
        let config = SparsifyConfig::new(0.0, 0).unwrap();
        let merged = merge_pipeline(&[&c1, &c2, &c3], &config, true).unwrap();
        assert_eq!(merged.len(), 3);
        for (concept, record) in [(&c1, &merged[0]), (&c2, &merged[1]), (&c3, &merged[2])] {
            let expected = concept
                .adapter(&record.tensor_name)
                .unwrap()
                .materialize_delta();
            assert_eq!(record.delta.data(), expected.data());
            assert_eq!(record.contributors, vec![concept.concept_id().to_string()]);
        }
    }

    #[test]
    fn pipeline_rejects_empty_and_duplicates() {
        let config = SparsifyConfig::new(0.0, 0).unwrap();
        assert!(matches!(
            merge_pipeline(&[], &config, true),
            Err(Error::InvalidInput(_))
        ));
        let c = concept_with_adapters("dup", &[("w", 1.0)]);
        assert!(matches!(
            merge_pipeline(&[&c, &c], &config, true),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn pipeline_shape_conflict_is_dimension_error() {
        let c1 = concept_with_adapters("a", &[("w", 1.0)]);
        // 3x3 adapter under the same tensor name
        let big = LoraAdapter::new(
            "w",
            m(3, 1, vec![1.0, 0.0, 0.0]),
            m(1, 3, vec![1.0, 0.0, 0.0]),
            1,
            1.0,
        )
        .unwrap();
        let c2 = ConceptModule::new("b", vec![0.0; 4], vec![0.0; 4], vec![big], vec![1.0, 0.0])
            .unwrap();
        let config = SparsifyConfig::new(0.0, 0).unwrap();
        assert!(matches!(
            merge_pipeline(&[&c1, &c2], &config, false),
            Err(Error::Dimension(_))
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn small_matrices(n: usize) -> impl Strategy<Value = Vec<WeightMatrix>> {
            prop::collection::vec(
                prop::collection::vec(-10.0f32..10.0, 9).prop_map(|d| m(3, 3, d)),
                n,
            )
        }

        proptest! {
            #[test]
            fn sign_safety_and_magnitude_bound(deltas in small_matrices(4)) {
                let refs: Vec<&WeightMatrix> = deltas.iter().collect();
                let gamma = sign_elect(&refs).unwrap();
                let merged = ties_merge(&refs).unwrap();
                for i in 0..9 {
                    let out = merged.data()[i] as f64;
                    let g = gamma.data()[i];
                    prop_assert!(sign_of(out) == 0 || sign_of(out) == g);
                    let max_mag = deltas
                        .iter()
                        .map(|d| (d.data()[i] as f64).abs())
                        .fold(0.0f64, f64::max);
                    prop_assert!(out.abs() <= max_mag);
                }
            }

            #[test]
            fn merge_is_permutation_invariant(
                deltas in small_matrices(5),
                perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
            ) {
                let refs: Vec<&WeightMatrix> = deltas.iter().collect();
                let shuffled: Vec<&WeightMatrix> = perm.iter().map(|&i| &deltas[i]).collect();
                let (m0, m1) = (ties_merge(&refs).unwrap(), ties_merge(&shuffled).unwrap());
                prop_assert_eq!(m0.data(), m1.data());
                let (s0, s1) = (sign_elect(&refs).unwrap(), sign_elect(&shuffled).unwrap());
                prop_assert_eq!(s0.data(), s1.data());
            }

            #[test]
            fn dare_survivors_scale_exactly(
                data in prop::collection::vec(-5.0f32..5.0, 16),
                p in 0.05f64..0.95,
                seed in any::<u64>(),
            ) {
                let delta = m(4, 4, data);
                let config = SparsifyConfig { drop_rate: p, seed };
                let out = dare_sparsify(&delta, &config, "c", "t").unwrap();
                for (i, (&orig, &got)) in delta.data().iter().zip(out.data()).enumerate() {
                    if got == 0.0 {
                        continue; // dropped, or orig was 0
                    }
                    let expected = (orig as f64 / (1.0 - p)) as f32;
                    prop_assert_eq!(got, expected, "element {}", i);
                }
            }
        }
    }
}
