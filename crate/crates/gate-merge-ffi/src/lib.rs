//! C ABI over the gate-merge toolkit.
//!
//! Conventions: every function returns a GmStatus; out-parameters are
//! written only on `GM_STATUS_OK`. Strings are NUL-terminated UTF-8. Strings
//! returned through out-parameters are owned by the caller and must be
//! released with gm_string_free. gm_last_error_message describes the
//! most recent failure on the calling thread and stays valid until the next
//! failing call on that thread. All entry points are panic-safe: a panic is
//! reported as `GM_STATUS_PANIC` instead of unwinding across the boundary.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gate_merge::bundles::{
    load_base_weights, load_concept, load_merged_set, load_patch_features, store_composed,
    store_merged_set, MergedDeltaSet,
};
use gate_merge::gating::{gate, GateConfig, PatchFeatures, Query};
use gate_merge::merging::{merge_pipeline, SparsifyConfig};
use gate_merge::pipeline::{decisions_to_json, load_concept_dir, parse_id_list, select_concepts};
use gate_merge::{apply_deltas, extend_vocab, ConceptModule, Error, Provenance};

/// Result of every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Arguments or configuration were rejected (bad ids, shapes, rates).
    InvalidInput = 3,
    /// A file was readable but not a valid container or bundle.
    DataFormat = 4,
    /// The operating system reported an I/O failure.
    Io = 5,
    /// An internal invariant failed; the library caught a panic.
    Panic = 6,
}

/// An owned collection of concept bundles, keyed by concept id.
pub struct GmConceptSet {
    concepts: BTreeMap<String, ConceptModule>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(e: &Error) -> GmStatus {
    set_error(&e.to_string());
    match e {
        Error::Io(_) => GmStatus::Io,
        Error::Format(_)
        | Error::Truncated(_)
        | Error::Data(_)
        | Error::Schema(_)
        | Error::MissingTensor(_) => GmStatus::DataFormat,
        _ => GmStatus::InvalidInput,
    }
}

/// Returns the last error message for this thread; never NULL, empty when no
/// call has failed. Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Returns the library version as a static string; never NULL.
#[no_mangle]
pub extern "C" fn gm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Releases a string returned through an out-parameter. NULL is a no-op.
///
/// # Safety
/// `s` must be NULL or a pointer previously returned by this library, and
/// must not be used again after this call.
#[no_mangle]
pub unsafe extern "C" fn gm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn guarded(f: impl FnOnce() -> GmStatus) -> GmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            GmStatus::Panic
        }
    }
}

/// Borrows a required string argument, reporting NULL and UTF-8 failures.
///
/// # Safety
/// `ptr` must be NULL or point to a NUL-terminated string.
unsafe fn require_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, GmStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} must not be NULL"));
        return Err(GmStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(GmStatus::InvalidUtf8)
        }
    }
}

unsafe fn require_set<'a>(ptr: *const GmConceptSet) -> Result<&'a GmConceptSet, GmStatus> {
    if ptr.is_null() {
        set_error("concept set must not be NULL");
        return Err(GmStatus::NullArgument);
    }
    Ok(&*ptr)
}

unsafe fn require_set_mut<'a>(ptr: *mut GmConceptSet) -> Result<&'a mut GmConceptSet, GmStatus> {
    if ptr.is_null() {
        set_error("concept set must not be NULL");
        return Err(GmStatus::NullArgument);
    }
    Ok(&mut *ptr)
}

fn export_string(value: String, out: *mut *mut c_char) -> GmStatus {
    if out.is_null() {
        set_error("output pointer must not be NULL");
        return GmStatus::NullArgument;
    }
    match CString::new(value) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            GmStatus::Ok
        }
        Err(_) => {
            set_error("result contained an interior NUL byte");
            GmStatus::InvalidInput
        }
    }
}

/// Creates an empty concept set. Release with gm_concept_set_free.
#[no_mangle]
pub extern "C" fn gm_concept_set_new() -> *mut GmConceptSet {
    Box::into_raw(Box::new(GmConceptSet {
        concepts: BTreeMap::new(),
    }))
}

/// Releases a concept set. NULL is a no-op.
///
/// # Safety
/// `set` must be NULL or a pointer from gm_concept_set_new, and must not be
/// used again after this call.
#[no_mangle]
pub unsafe extern "C" fn gm_concept_set_free(set: *mut GmConceptSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Number of concepts held by the set; 0 for NULL.
///
/// # Safety
/// `set` must be NULL or a valid concept set.
#[no_mangle]
pub unsafe extern "C" fn gm_concept_set_len(set: *const GmConceptSet) -> usize {
    if set.is_null() {
        return 0;
    }
    (*set).concepts.len()
}

/// Loads one concept bundle file into the set. Duplicate concept ids are
/// rejected and leave the set unchanged.
///
/// # Safety
/// `set` must come from gm_concept_set_new; `path` must be a
/// NUL-terminated string or NULL.
#[no_mangle]
pub unsafe extern "C" fn gm_concept_set_load_file(
    set: *mut GmConceptSet,
    path: *const c_char,
) -> GmStatus {
    guarded(|| {
        let set = match require_set_mut(set) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let path = match require_str(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let module = match load_concept(Path::new(path)) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        let id = module.concept_id().to_string();
        if set.concepts.contains_key(&id) {
            set_error(&format!("concept id {id} is already loaded"));
            return GmStatus::InvalidInput;
        }
        set.concepts.insert(id, module);
        GmStatus::Ok
    })
}

/// Loads every `*.gmt` bundle in a directory into the set. On any failure
/// the set is left unchanged.
///
/// # Safety
/// Same contracts as gm_concept_set_load_file.
#[no_mangle]
pub unsafe extern "C" fn gm_concept_set_load_dir(
    set: *mut GmConceptSet,
    dir: *const c_char,
) -> GmStatus {
    guarded(|| {
        let set = match require_set_mut(set) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let dir = match require_str(dir, "dir") {
            Ok(d) => d,
            Err(status) => return status,
        };
        let loaded = match load_concept_dir(Path::new(dir)) {
            Ok(l) => l,
            Err(e) => return fail(&e),
        };
        for id in loaded.keys() {
            if set.concepts.contains_key(id) {
                set_error(&format!("concept id {id} is already loaded"));
                return GmStatus::InvalidInput;
            }
        }
        set.concepts.extend(loaded);
        GmStatus::Ok
    })
}

/// Writes a JSON array of the loaded concept ids to `out_json`.
///
/// # Safety
/// `set` must be a valid concept set; `out_json` must point to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn gm_concept_set_ids_json(
    set: *const GmConceptSet,
    out_json: *mut *mut c_char,
) -> GmStatus {
    guarded(|| {
        let set = match require_set(set) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let ids: Vec<&str> = set.concepts.keys().map(String::as_str).collect();
        export_string(serde_json::to_string(&ids).expect("ids serialize"), out_json)
    })
}

/// Gates the loaded concepts against a query and optional patch features,
/// writing the decision report as JSON to `out_json`.
///
/// `features_path` may be NULL for text-only gating. `tau` is the inclusive
/// similarity threshold and `top_k` the number of pooled patches.
///
/// # Safety
/// Pointer arguments follow the module conventions; `out_json` must point to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn gm_gate_json(
    set: *const GmConceptSet,
    query: *const c_char,
    features_path: *const c_char,
    tau: f64,
    top_k: usize,
    out_json: *mut *mut c_char,
) -> GmStatus {
    guarded(|| {
        let set = match require_set(set) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let query = match require_str(query, "query") {
            Ok(q) => q,
            Err(status) => return status,
        };
        let features: Option<PatchFeatures> = if features_path.is_null() {
            None
        } else {
            let path = match require_str(features_path, "features_path") {
                Ok(p) => p,
                Err(status) => return status,
            };
            match load_patch_features(Path::new(path)) {
                Ok(f) => Some(f),
                Err(e) => return fail(&e),
            }
        };
        let config = GateConfig {
            tau,
            top_k,
            ..GateConfig::default()
        };
        let ordered: Vec<ConceptModule> = set.concepts.values().cloned().collect();
        let decisions = match gate(&Query::new(query), features.as_ref(), &ordered, &config) {
            Ok(d) => d,
            Err(e) => return fail(&e),
        };
        export_string(decisions_to_json(&decisions).to_string(), out_json)
    })
}

/// Sparsifies and fuses the adapters of the listed concepts, writing the
/// merged-delta container to `out_path`.
///
/// `active_csv` is a comma-separated id list and must select at least one
/// concept. `bypass_single` skips sparsification when exactly one concept is
/// active.
///
/// # Safety
/// Pointer arguments follow the module conventions.
#[no_mangle]
pub unsafe extern "C" fn gm_merge_to_file(
    set: *const GmConceptSet,
    active_csv: *const c_char,
    drop_rate: f64,
    seed: u64,
    bypass_single: bool,
    out_path: *const c_char,
) -> GmStatus {
    guarded(|| {
        let set = match require_set(set) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let active_csv = match require_str(active_csv, "active_csv") {
            Ok(a) => a,
            Err(status) => return status,
        };
        let out_path = match require_str(out_path, "out_path") {
            Ok(o) => o,
            Err(status) => return status,
        };
        let config = match SparsifyConfig::new(drop_rate, seed) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        let active = parse_id_list(active_csv);
        if active.is_empty() {
            set_error("merge needs a non-empty active list");
            return GmStatus::InvalidInput;
        }
        let selected = match select_concepts(&set.concepts, &active) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        let deltas = match merge_pipeline(&selected, &config, bypass_single) {
            Ok(d) => d,
            Err(e) => return fail(&e),
        };
        let merged = MergedDeltaSet {
            active: selected.iter().map(|c| c.concept_id().to_string()).collect(),
            deltas,
            drop_rate,
            seed,
        };
        match store_merged_set(&merged, Path::new(out_path)) {
            Ok(_) => GmStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Adds a merged-delta file to base weights, extends the vocabulary with the
/// listed concepts, and writes the composed container to `out_path`.
///
/// `active_csv` may be empty, in which case only the deltas are applied.
///
/// # Safety
/// Pointer arguments follow the module conventions.
#[no_mangle]
pub unsafe extern "C" fn gm_apply_to_file(
    base_path: *const c_char,
    merged_path: *const c_char,
    set: *const GmConceptSet,
    active_csv: *const c_char,
    out_path: *const c_char,
) -> GmStatus {
    guarded(|| {
        let set = match require_set(set) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let base_path = match require_str(base_path, "base_path") {
            Ok(b) => b,
            Err(status) => return status,
        };
        let merged_path = match require_str(merged_path, "merged_path") {
            Ok(m) => m,
            Err(status) => return status,
        };
        let active_csv = match require_str(active_csv, "active_csv") {
            Ok(a) => a,
            Err(status) => return status,
        };
        let out_path = match require_str(out_path, "out_path") {
            Ok(o) => o,
            Err(status) => return status,
        };
        let base = match load_base_weights(Path::new(base_path)) {
            Ok(b) => b,
            Err(e) => return fail(&e),
        };
        let merged = match load_merged_set(Path::new(merged_path)) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        let active = parse_id_list(active_csv);
        let selected = match select_concepts(&set.concepts, &active) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        let active_ids: Vec<String> =
            selected.iter().map(|c| c.concept_id().to_string()).collect();
        let composed = match apply_deltas(&base, &merged.deltas) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        let mut composed = match extend_vocab(&composed.weights, &selected) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        composed.provenance = Provenance {
            concepts: active_ids,
            seed: merged.seed,
            drop_rate: merged.drop_rate,
        };
        match store_composed(&composed, Path::new(out_path)) {
            Ok(_) => GmStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}
