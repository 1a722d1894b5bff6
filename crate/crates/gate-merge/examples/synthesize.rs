//! Writes a small synthetic concept library to a directory: one bundle per
//! concept plus base weights, probe inputs, and patch features, ready for
//! the `gmerge` CLI. The patch features copy the prototypes of the first
//! two concepts, so visual gating finds exactly those concepts in frame.
//!
//!   cargo run --example synthesize -- /tmp/gm-demo [num_concepts] [overlap]

use std::path::PathBuf;

use gate_merge::bundles::{
    store_base_weights, store_concept, store_patch_features, store_probes,
};
use gate_merge::gating::PatchFeatures;
use gate_merge::oracle::{make_synthetic_concepts, SyntheticSpec};

fn main() -> gate_merge::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().unwrap_or_else(|| "gm-demo".into()));
    let num_concepts: usize = args.next().map(|s| s.parse().expect("count")).unwrap_or(3);
    let support_overlap: f64 = args.next().map(|s| s.parse().expect("overlap")).unwrap_or(0.5);

    let spec = SyntheticSpec {
        num_concepts,
        d_in: 16,
        d_out: 24,
        rank: 4,
        scale: 8.0,
        support_overlap,
        seed: 0,
    };
    let set = make_synthetic_concepts(&spec)?;

    let concepts_dir = root.join("concepts");
    std::fs::create_dir_all(&concepts_dir)?;
    for concept in &set.concepts {
        let path = concepts_dir.join(format!("{}.gmt", concept.concept_id()));
        store_concept(concept, &path)?;
        println!("wrote {}", path.display());
    }
    let base_path = root.join("base.gmt");
    store_base_weights(&set.base, &base_path)?;
    println!("wrote {}", base_path.display());
    let probes_path = root.join("probes.gmt");
    store_probes(&set.probes, &probes_path)?;
    println!("wrote {}", probes_path.display());

    let in_frame: Vec<&[f32]> = set.concepts.iter().take(2).map(|c| c.prototype()).collect();
    let dim = in_frame[0].len();
    let data: Vec<f32> = in_frame.iter().flat_map(|p| p.iter().copied()).collect();
    let features = PatchFeatures::new(in_frame.len(), dim, data)?;
    let features_path = root.join("features.gmt");
    store_patch_features(&features, &features_path)?;
    println!("wrote {}", features_path.display());
    Ok(())
}
