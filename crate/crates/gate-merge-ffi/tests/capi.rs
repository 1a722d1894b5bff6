//! Drives the C ABI the way a foreign caller would: through raw pointers
//! and NUL-terminated strings, checking status codes and error messages.

use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use gate_merge::bundles::{load_composed, store_base_weights, store_concept};
use gate_merge::oracle::{make_synthetic_concepts, SyntheticSpec, SYNTHETIC_TENSOR};
use gate_merge_ffi::{
    gm_apply_to_file, gm_concept_set_free, gm_concept_set_ids_json, gm_concept_set_len,
    gm_concept_set_load_dir, gm_concept_set_load_file, gm_concept_set_new, gm_gate_json,
    gm_last_error_message, gm_merge_to_file, gm_string_free, gm_version, GmStatus,
};

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn take_string(ptr: *mut c_char) -> String {
    assert!(!ptr.is_null());
    let s = unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_string();
    unsafe { gm_string_free(ptr) };
    s
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(gm_last_error_message()) }
        .to_str()
        .unwrap()
        .to_string()
}

struct Fixture {
    dir: tempfile::TempDir,
    concepts_dir: CString,
    base_path: CString,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        num_concepts: 3,
        d_in: 10,
        d_out: 12,
        rank: 2,
        scale: 4.0,
        support_overlap: 0.5,
        seed: 33,
    };
    let set = make_synthetic_concepts(&spec).unwrap();
    let concepts_dir = dir.path().join("concepts");
    std::fs::create_dir(&concepts_dir).unwrap();
    for concept in &set.concepts {
        store_concept(
            concept,
            &concepts_dir.join(format!("{}.gmt", concept.concept_id())),
        )
        .unwrap();
    }
    let base_path = dir.path().join("base.gmt");
    store_base_weights(&set.base, &base_path).unwrap();
    Fixture {
        concepts_dir: c(concepts_dir.to_str().unwrap()),
        base_path: c(base_path.to_str().unwrap()),
        dir,
    }
}

#[test]
fn version_is_a_nonempty_static_string() {
    let v = unsafe { CStr::from_ptr(gm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn full_pipeline_through_the_c_abi() {
    let fx = fixture();
    let set = gm_concept_set_new();
    assert_eq!(
        unsafe { gm_concept_set_load_dir(set, fx.concepts_dir.as_ptr()) },
        GmStatus::Ok
    );
    assert_eq!(unsafe { gm_concept_set_len(set) }, 3);

    let mut ids_ptr: *mut c_char = ptr::null_mut();
    assert_eq!(
        unsafe { gm_concept_set_ids_json(set, &mut ids_ptr) },
        GmStatus::Ok
    );
    assert_eq!(take_string(ids_ptr), r#"["c00","c01","c02"]"#);

    let query = c("put <c00> beside <c02>");
    let mut gate_ptr: *mut c_char = ptr::null_mut();
    assert_eq!(
        unsafe { gm_gate_json(set, query.as_ptr(), ptr::null(), 0.3, 8, &mut gate_ptr) },
        GmStatus::Ok
    );
    let report: serde_json::Value = serde_json::from_str(&take_string(gate_ptr)).unwrap();
    assert_eq!(report["active"], serde_json::json!(["c00", "c02"]));

    let merged_path = fx.dir.path().join("merged.gmt");
    let merged_c = c(merged_path.to_str().unwrap());
    let active = c("c00,c02");
    assert_eq!(
        unsafe {
            gm_merge_to_file(set, active.as_ptr(), 0.8, 7, true, merged_c.as_ptr())
        },
        GmStatus::Ok
    );
    assert!(merged_path.exists());

    let out_path = fx.dir.path().join("composed.gmt");
    let out_c = c(out_path.to_str().unwrap());
    assert_eq!(
        unsafe {
            gm_apply_to_file(
                fx.base_path.as_ptr(),
                merged_c.as_ptr(),
                set,
                active.as_ptr(),
                out_c.as_ptr(),
            )
        },
        GmStatus::Ok
    );
    let composed = load_composed(&out_path).unwrap();
    assert_eq!(
        composed.provenance.concepts,
        vec!["c00".to_string(), "c02".into()]
    );
    assert!(composed.weights.vocab().ends_with(&["c00".to_string(), "c02".into()]));
    assert!(composed.weights.tensor(SYNTHETIC_TENSOR).is_some());

    unsafe { gm_concept_set_free(set) };
}

#[test]
fn null_arguments_are_rejected_not_dereferenced() {
    let set = gm_concept_set_new();
    assert_eq!(
        unsafe { gm_concept_set_load_file(set, ptr::null()) },
        GmStatus::NullArgument
    );
    assert!(last_error().contains("NULL"));
    assert_eq!(
        unsafe { gm_concept_set_load_dir(ptr::null_mut(), ptr::null()) },
        GmStatus::NullArgument
    );
    let mut out: *mut c_char = ptr::null_mut();
    assert_eq!(
        unsafe { gm_gate_json(ptr::null(), ptr::null(), ptr::null(), 0.3, 8, &mut out) },
        GmStatus::NullArgument
    );
    assert!(out.is_null(), "out-parameters stay untouched on failure");
    assert_eq!(unsafe { gm_concept_set_len(ptr::null()) }, 0);
    unsafe { gm_concept_set_free(set) };
    unsafe { gm_concept_set_free(ptr::null_mut()) };
    unsafe { gm_string_free(ptr::null_mut()) };
}

#[test]
fn invalid_utf8_is_reported() {
    let set = gm_concept_set_new();
    let bad = [0xffu8, 0xfe, 0x00];
    assert_eq!(
        unsafe { gm_concept_set_load_file(set, bad.as_ptr() as *const c_char) },
        GmStatus::InvalidUtf8
    );
    assert!(last_error().contains("UTF-8"));
    unsafe { gm_concept_set_free(set) };
}

#[test]
fn status_codes_distinguish_missing_corrupt_and_invalid() {
    let fx = fixture();
    let set = gm_concept_set_new();

    let missing = c("/nonexistent/nowhere.gmt");
    assert_eq!(
        unsafe { gm_concept_set_load_file(set, missing.as_ptr()) },
        GmStatus::Io
    );

    let corrupt_path = fx.dir.path().join("corrupt.gmt");
    std::fs::write(&corrupt_path, b"junk").unwrap();
    let corrupt = c(corrupt_path.to_str().unwrap());
    assert_eq!(
        unsafe { gm_concept_set_load_file(set, corrupt.as_ptr()) },
        GmStatus::DataFormat
    );
    assert!(!last_error().is_empty());

    assert_eq!(
        unsafe { gm_concept_set_load_dir(set, fx.concepts_dir.as_ptr()) },
        GmStatus::Ok
    );
    let active = c("c00");
    let out = c(fx.dir.path().join("m.gmt").to_str().unwrap());
    assert_eq!(
        unsafe { gm_merge_to_file(set, active.as_ptr(), 1.0, 0, true, out.as_ptr()) },
        GmStatus::InvalidInput,
        "a drop rate of 1.0 keeps nothing and is rejected"
    );
    let empty = c(" , ");
    assert_eq!(
        unsafe { gm_merge_to_file(set, empty.as_ptr(), 0.5, 0, true, out.as_ptr()) },
        GmStatus::InvalidInput
    );
    assert!(last_error().contains("active"));
    let ghost = c("ghost");
    assert_eq!(
        unsafe { gm_merge_to_file(set, ghost.as_ptr(), 0.5, 0, true, out.as_ptr()) },
        GmStatus::InvalidInput
    );
    assert!(last_error().contains("ghost"));

    unsafe { gm_concept_set_free(set) };
}

#[test]
fn duplicate_concept_ids_leave_the_set_unchanged() {
    let fx = fixture();
    let set = gm_concept_set_new();
    let bundle = Path::new(fx.concepts_dir.to_str().unwrap()).join("c00.gmt");
    let bundle_c = c(bundle.to_str().unwrap());
    assert_eq!(
        unsafe { gm_concept_set_load_file(set, bundle_c.as_ptr()) },
        GmStatus::Ok
    );
    assert_eq!(
        unsafe { gm_concept_set_load_file(set, bundle_c.as_ptr()) },
        GmStatus::InvalidInput
    );
    assert_eq!(unsafe { gm_concept_set_len(set) }, 1);
    // the directory contains c00 as well, so bulk loading must refuse it too
    assert_eq!(
        unsafe { gm_concept_set_load_dir(set, fx.concepts_dir.as_ptr()) },
        GmStatus::InvalidInput
    );
    assert_eq!(unsafe { gm_concept_set_len(set) }, 1, "failed bulk load must not partially apply");
    unsafe { gm_concept_set_free(set) };
}

#[test]
fn merge_bit_equals_the_cli_library_path() {
    let fx = fixture();
    let set = gm_concept_set_new();
    assert_eq!(
        unsafe { gm_concept_set_load_dir(set, fx.concepts_dir.as_ptr()) },
        GmStatus::Ok
    );
    let active = c("c00,c01,c02");
    let out_path = fx.dir.path().join("via_ffi.gmt");
    let out_c = c(out_path.to_str().unwrap());
    assert_eq!(
        unsafe { gm_merge_to_file(set, active.as_ptr(), 0.8, 42, true, out_c.as_ptr()) },
        GmStatus::Ok
    );
    unsafe { gm_concept_set_free(set) };

    // same merge through the library directly
    let concepts =
        gate_merge::pipeline::load_concept_dir(Path::new(fx.concepts_dir.to_str().unwrap()))
            .unwrap();
    let selected: Vec<&gate_merge::ConceptModule> = concepts.values().collect();
    let config = gate_merge::merging::SparsifyConfig::new(0.8, 42).unwrap();
    let deltas = gate_merge::merging::merge_pipeline(&selected, &config, true).unwrap();
    let expected = gate_merge::bundles::MergedDeltaSet {
        active: concepts.keys().cloned().collect(),
        deltas,
        drop_rate: 0.8,
        seed: 42,
    };
    let direct_path = fx.dir.path().join("direct.gmt");
    gate_merge::bundles::store_merged_set(&expected, &direct_path).unwrap();
    assert_eq!(
        std::fs::read(&out_path).unwrap(),
        std::fs::read(&direct_path).unwrap(),
        "FFI and library merges must be byte-identical"
    );
}
