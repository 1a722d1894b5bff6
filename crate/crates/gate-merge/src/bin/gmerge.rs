//! Command-line pipeline driver: gate concepts, merge their adapters, apply
//! the result to base weights. Exit codes: 0 success, 2 usage or validation
//! error, 3 I/O error. Diagnostics go to stderr (level via GM_LOG_LEVEL);
//! reports are JSON on stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use gate_merge::bundles::{
    load_base_weights, load_merged_set, load_patch_features, load_probes, store_composed,
    store_merged_set, MergedDeltaSet,
};
use gate_merge::error::{Error, Result};
use gate_merge::gating::{active_set, gate, GateConfig, GateDecision, PatchFeatures, Query};
use gate_merge::matrix::l2_norm;
use gate_merge::merging::{merge_pipeline, SparsifyConfig};
use gate_merge::oracle::interference_report;
use gate_merge::pipeline::{decisions_to_json, load_concept_dir, parse_id_list, select_concepts};
use gate_merge::{apply_deltas, extend_vocab, ConceptModule, Provenance, TensorContainer};

#[derive(Parser)]
#[command(name = "gmerge", version, about = "Gate, merge, and apply concept adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decide which concepts a query activates.
    Gate {
        /// Query text; a bracketed concept id like <bo> counts as a mention.
        #[arg(long)]
        query: String,
        /// Optional patch-features file for visual evidence.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Directory of concept bundles (*.gmt).
        #[arg(long)]
        concepts: PathBuf,
        /// Similarity threshold (inclusive).
        #[arg(long, default_value_t = 0.3)]
        tau: f64,
        /// Patches pooled per score.
        #[arg(long = "top-k", default_value_t = 8)]
        top_k: usize,
    },
    /// Sparsify and fuse the adapters of the listed concepts.
    Merge {
        #[arg(long)]
        concepts: PathBuf,
        /// Comma-separated concept ids.
        #[arg(long)]
        active: String,
        #[arg(long, default_value_t = 0.8)]
        drop_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Sparsify even when a single concept is active.
        #[arg(long)]
        no_bypass_single: bool,
    },
    /// Add merged deltas to base weights and extend the vocabulary.
    Apply {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        merged: PathBuf,
        #[arg(long)]
        concepts: PathBuf,
        /// Comma-separated concept ids; may be empty.
        #[arg(long)]
        active: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize any container file.
    Inspect { file: PathBuf },
    /// Compare merged against naively summed adapters on probe inputs.
    BenchInterference {
        #[arg(long)]
        concepts: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        drop_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_bypass_single: bool,
    },
    /// Gate, merge, and apply in one invocation.
    Run {
        #[arg(long)]
        query: String,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        concepts: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        tau: f64,
        #[arg(long = "top-k", default_value_t = 8)]
        top_k: usize,
        #[arg(long, default_value_t = 0.8)]
        drop_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_bypass_single: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("GM_LOG_LEVEL")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io(_) => 3,
                _ => 2,
            })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gate {
            query,
            features,
            concepts,
            tau,
            top_k,
        } => cmd_gate(&query, features.as_deref(), &concepts, tau, top_k),
        Command::Merge {
            concepts,
            active,
            drop_rate,
            seed,
            out,
            no_bypass_single,
        } => cmd_merge(&concepts, &active, drop_rate, seed, &out, !no_bypass_single),
        Command::Apply {
            base,
            merged,
            concepts,
            active,
            out,
        } => cmd_apply(&base, &merged, &concepts, &active, &out),
        Command::Inspect { file } => cmd_inspect(&file),
        Command::BenchInterference {
            concepts,
            base,
            probes,
            drop_rate,
            seed,
            no_bypass_single,
        } => cmd_bench(&concepts, &base, &probes, drop_rate, seed, !no_bypass_single),
        Command::Run {
            query,
            features,
            concepts,
            base,
            out,
            tau,
            top_k,
            drop_rate,
            seed,
            no_bypass_single,
        } => cmd_run(
            &query,
            features.as_deref(),
            &concepts,
            &base,
            &out,
            tau,
            top_k,
            drop_rate,
            seed,
            !no_bypass_single,
        ),
    }
}

fn run_gate(
    query: &str,
    features_path: Option<&Path>,
    concepts: &BTreeMap<String, ConceptModule>,
    tau: f64,
    top_k: usize,
) -> Result<Vec<GateDecision>> {
    let features: Option<PatchFeatures> = match features_path {
        Some(path) => Some(load_patch_features(path)?),
        None => None,
    };
    let config = GateConfig {
        tau,
        top_k,
        ..GateConfig::default()
    };
    let ordered: Vec<ConceptModule> = concepts.values().cloned().collect();
    let decisions = gate(&Query::new(query), features.as_ref(), &ordered, &config)?;
    info!(
        "gate: {} of {} concept(s) active at tau={tau}",
        decisions.iter().filter(|d| d.active).count(),
        decisions.len()
    );
    Ok(decisions)
}

fn cmd_gate(
    query: &str,
    features: Option<&Path>,
    concepts_dir: &Path,
    tau: f64,
    top_k: usize,
) -> Result<()> {
    let concepts = load_concept_dir(concepts_dir)?;
    let decisions = run_gate(query, features, &concepts, tau, top_k)?;
    println!("{}", decisions_to_json(&decisions));
    Ok(())
}

fn cmd_merge(
    concepts_dir: &Path,
    active_raw: &str,
    drop_rate: f64,
    seed: u64,
    out: &Path,
    bypass_single: bool,
) -> Result<()> {
    let config = SparsifyConfig::new(drop_rate, seed)?;
    let active = parse_id_list(active_raw);
    if active.is_empty() {
        return Err(Error::InvalidInput(
            "merge needs a non-empty --active list".into(),
        ));
    }
    let concepts = load_concept_dir(concepts_dir)?;
    let selected = select_concepts(&concepts, &active)?;
    let deltas = merge_pipeline(&selected, &config, bypass_single)?;
    let set = MergedDeltaSet {
        active: selected.iter().map(|c| c.concept_id().to_string()).collect(),
        deltas,
        drop_rate,
        seed,
    };
    let bytes = store_merged_set(&set, out)?;
    info!("wrote {bytes} bytes to {}", out.display());
    println!(
        "{}",
        json!({
            "active": set.active,
            "out": out.display().to_string(),
            "tensors": set.deltas.iter().map(|d| d.tensor_name.clone()).collect::<Vec<_>>(),
        })
    );
    Ok(())
}

fn cmd_apply(
    base_path: &Path,
    merged_path: &Path,
    concepts_dir: &Path,
    active_raw: &str,
    out: &Path,
) -> Result<()> {
    let base = load_base_weights(base_path)?;
    let set = load_merged_set(merged_path)?;
    let concepts = load_concept_dir(concepts_dir)?;
    let active = parse_id_list(active_raw);
    let selected = select_concepts(&concepts, &active)?;
    let active_ids: Vec<String> = selected.iter().map(|c| c.concept_id().to_string()).collect();
    if set.active != active_ids {
        warn!(
            "merged file was produced for active set {:?}, applying with {:?}",
            set.active, active_ids
        );
    }

    let composed = apply_deltas(&base, &set.deltas)?;
    let mut composed = extend_vocab(&composed.weights, &selected)?;
    composed.provenance = Provenance {
        concepts: active_ids,
        seed: set.seed,
        drop_rate: set.drop_rate,
    };
    let bytes = store_composed(&composed, out)?;
    info!("wrote {bytes} bytes to {}", out.display());
    println!(
        "{}",
        json!({
            "concepts": composed.provenance.concepts,
            "out": out.display().to_string(),
            "vocab_len": composed.weights.vocab().len(),
        })
    );
    Ok(())
}

fn cmd_inspect(file: &Path) -> Result<()> {
    let container = TensorContainer::load(file)?;
    println!("{}: {} tensor entries", file.display(), container.tensors().len());
    for (name, tensor) in container.tensors() {
        println!(
            "  {name}  shape={:?}  l2={:.6}",
            tensor.shape(),
            l2_norm(tensor.data())
        );
    }
    println!("meta: {} keys", container.meta().len());
    for (key, value) in container.meta() {
        println!("  {key} = {value}");
    }
    Ok(())
}

fn cmd_bench(
    concepts_dir: &Path,
    base_path: &Path,
    probes_path: &Path,
    drop_rate: f64,
    seed: u64,
    bypass_single: bool,
) -> Result<()> {
    let config = SparsifyConfig::new(drop_rate, seed)?;
    let concepts = load_concept_dir(concepts_dir)?;
    if concepts.is_empty() {
        return Err(Error::InvalidInput("no concept bundles to benchmark".into()));
    }
    let base = load_base_weights(base_path)?;
    let probes = load_probes(probes_path)?;
    let refs: Vec<&ConceptModule> = concepts.values().collect();
    let report = interference_report(&refs, &base, &probes, &config, bypass_single)?;
    println!(
        "{}",
        json!({
            "aggregates": {
                "max_fidelity_merge": report.max_fidelity_merge,
                "max_fidelity_naive": report.max_fidelity_naive,
                "mean_fidelity_merge": report.mean_fidelity_merge,
                "mean_fidelity_naive": report.mean_fidelity_naive,
            },
            "drop_rate": drop_rate,
            "per_concept": report
                .per_concept
                .iter()
                .map(|c| {
                    json!({
                        "concept_id": c.concept_id,
                        "fidelity_merge": c.fidelity_merge,
                        "fidelity_naive": c.fidelity_naive,
                    })
                })
                .collect::<Vec<_>>(),
            "seed": seed,
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    query: &str,
    features: Option<&Path>,
    concepts_dir: &Path,
    base_path: &Path,
    out: &Path,
    tau: f64,
    top_k: usize,
    drop_rate: f64,
    seed: u64,
    bypass_single: bool,
) -> Result<()> {
    let config = SparsifyConfig::new(drop_rate, seed)?;
    let concepts = load_concept_dir(concepts_dir)?;
    let base = load_base_weights(base_path)?;
    let decisions = run_gate(query, features, &concepts, tau, top_k)?;
    let active = active_set(&decisions);
    let selected = select_concepts(&concepts, &active)?;

    let deltas = if selected.is_empty() {
        info!("no active concepts; output carries the base weights verbatim");
        Vec::new()
    } else {
        merge_pipeline(&selected, &config, bypass_single)?
    };
    let composed = apply_deltas(&base, &deltas)?;
    let mut composed = extend_vocab(&composed.weights, &selected)?;
    composed.provenance = Provenance {
        concepts: active.clone(),
        seed,
        drop_rate,
    };
    let bytes = store_composed(&composed, out)?;
    info!("wrote {bytes} bytes to {}", out.display());

    let mut report = decisions_to_json(&decisions);
    report["out"] = json!(out.display().to_string());
    println!("{report}");
    Ok(())
}
