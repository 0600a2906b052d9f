//! C ABI for embedding the engine.
//!
//! Conventions:
//! - Every fallible call returns a [`WdbStatus`]; `WDB_STATUS_OK` is 0.
//!   On failure, [`wdb_last_error`] returns a thread-local message.
//! - Handles (`WdbWorld`, `WdbModel`, `WdbResult`) are opaque; free them
//!   with the matching `*_free` function, exactly once.
//! - Strings returned by result accessors stay valid until the result
//!   handle is freed. Strings passed in must be NUL-terminated UTF-8.
//! - Handles are not thread-safe: do not call into the library with the
//!   same handle from two threads at once. `wdb_evaluate` parallelizes
//!   internally over its own world clones.
//!
//! The companion header `include/worlddb.h` is generated at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use worlddb::evaluator::{self, EvaluationConfig, MarginalEstimate, Mode};
use worlddb::factor::exact::exact_query_marginals;
use worlddb::factor::FactorGraphSpec;
use worlddb::mcmc::Proposer;
use worlddb::ner::{self, BatchFlipProposer, SynthConfig};
use worlddb::query::{self, Query};
use worlddb::store::{self, IngestOptions, World, TOKEN};

/// Status codes mirroring the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum WdbStatus {
    WdbStatusOk = 0,
    WdbStatusUsage = 1,
    WdbStatusData = 2,
    WdbStatusResourceCap = 3,
    WdbStatusInternal = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &worlddb::Error) -> WdbStatus {
    match err.exit_code() {
        3 => WdbStatus::WdbStatusResourceCap,
        _ => WdbStatus::WdbStatusData,
    }
}

/// Message describing the most recent failure on this thread. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wdb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn wdb_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// An opaque possible world. Not thread-safe; see the module notes.
pub struct WdbWorld {
    world: World,
}

/// An opaque factor-graph model.
pub struct WdbModel {
    spec: FactorGraphSpec,
}

/// An opaque marginal table: tuples with counts and probabilities.
pub struct WdbResult {
    columns: CString,
    tuples: Vec<CString>,
    counts: Vec<u64>,
    z: u64,
    probabilities: Vec<f64>,
}

/// Sampling configuration for [`wdb_evaluate`]. `mode` 0 is naive, 1 is
/// incremental. Zero-initialize and override what you need; zero counts
/// fall back to the defaults (100 samples, 10000 steps, 1 chain).
#[repr(C)]
#[derive(Clone, Copy)]
pub struct WdbEvalConfig {
    pub mode: u32,
    pub samples: u64,
    pub steps_per_sample: u64,
    pub chains: u64,
    pub seed: u64,
    pub burn_in: u64,
}

fn guard<F: FnOnce() -> WdbStatus>(f: F) -> WdbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            WdbStatus::WdbStatusInternal
        }
    }
}

unsafe fn read_path(ptr: *const c_char, what: &str) -> Result<PathBuf, WdbStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(WdbStatus::WdbStatusUsage);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(WdbStatus::WdbStatusUsage)
        }
    }
}

unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, WdbStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(WdbStatus::WdbStatusUsage);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(WdbStatus::WdbStatusUsage)
        }
    }
}

fn store_out<T>(out: *mut *mut T, value: T, what: &str) -> WdbStatus {
    if out.is_null() {
        set_error(&format!("{what} output pointer is null"));
        return WdbStatus::WdbStatusUsage;
    }
    unsafe {
        *out = Box::into_raw(Box::new(value));
    }
    WdbStatus::WdbStatusOk
}

/// Load a world from a tab-separated corpus (TOK_ID, DOC_ID, STRING,
/// TRUTH); labels start at "O" and are hidden.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wdb_world_from_corpus(
    path: *const c_char,
    out: *mut *mut WdbWorld,
) -> WdbStatus {
    guard(|| {
        let path = match read_path(path, "corpus path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match store::ingest_tokens(&path, IngestOptions::default()) {
            Ok(world) => store_out(out, WdbWorld { world }, "world"),
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Load a world from a snapshot written by [`wdb_world_save_snapshot`] or
/// the CLI's `ingest`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wdb_world_from_snapshot(
    path: *const c_char,
    out: *mut *mut WdbWorld,
) -> WdbStatus {
    guard(|| {
        let path = match read_path(path, "snapshot path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match store::read_snapshot(&path) {
            Ok(world) => store_out(out, WdbWorld { world }, "world"),
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Write the world to a snapshot file.
///
/// # Safety
/// `world` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wdb_world_save_snapshot(
    world: *const WdbWorld,
    path: *const c_char,
) -> WdbStatus {
    guard(|| {
        if world.is_null() {
            set_error("world is null");
            return WdbStatus::WdbStatusUsage;
        }
        let path = match read_path(path, "snapshot path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match store::write_snapshot(&(*world).world, &path) {
            Ok(()) => WdbStatus::WdbStatusOk,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Number of tuples in the TOKEN relation (0 when absent).
///
/// # Safety
/// `world` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wdb_world_token_count(world: *const WdbWorld) -> u64 {
    if world.is_null() {
        return 0;
    }
    (*world)
        .world
        .relation(TOKEN)
        .map(|r| r.tuples.len() as u64)
        .unwrap_or(0)
}

/// # Safety
/// `world` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn wdb_world_free(world: *mut WdbWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Load a model file (templates, weights, hidden declarations).
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wdb_model_load(
    path: *const c_char,
    out: *mut *mut WdbModel,
) -> WdbStatus {
    guard(|| {
        let path = match read_path(path, "model path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match worlddb::model::load_model(&path) {
            Ok(loaded) => store_out(
                out,
                WdbModel { spec: loaded.spec },
                "model",
            ),
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// `model` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn wdb_model_free(model: *mut WdbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Generate a reproducible synthetic corpus, and a matching model file when
/// `model_path` is non-null.
///
/// # Safety
/// `corpus_path` must be valid; `model_path` may be null.
#[no_mangle]
pub unsafe extern "C" fn wdb_generate_corpus(
    docs: u64,
    tokens_per_doc: u64,
    vocab: u64,
    entity_rate: f64,
    seed: u64,
    corpus_path: *const c_char,
    model_path: *const c_char,
) -> WdbStatus {
    guard(|| {
        let corpus = match read_path(corpus_path, "corpus path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        if !(0.0..=1.0).contains(&entity_rate) {
            set_error("entity_rate must lie in [0, 1]");
            return WdbStatus::WdbStatusUsage;
        }
        let cfg = SynthConfig {
            docs,
            tokens_per_doc,
            vocab,
            entity_rate,
            seed,
        };
        if let Err(e) = ner::generate_corpus(&cfg, &corpus) {
            set_error(&e.to_string());
            return status_of(&e);
        }
        if !model_path.is_null() {
            let model = match read_path(model_path, "model path") {
                Ok(p) => p,
                Err(s) => return s,
            };
            if let Err(e) = ner::write_model_file(&ner::matching_weights(&cfg), &model) {
                set_error(&e.to_string());
                return status_of(&e);
            }
        }
        WdbStatus::WdbStatusOk
    })
}

fn result_from_estimate(est: &MarginalEstimate) -> WdbResult {
    let join = |parts: Vec<String>| {
        CString::new(parts.join("\t").replace('\0', " ")).unwrap_or_default()
    };
    WdbResult {
        columns: join(est.columns.clone()),
        tuples: est
            .counts
            .keys()
            .map(|t| join(t.iter().map(|v| v.to_string()).collect()))
            .collect(),
        counts: est.counts.values().copied().collect(),
        z: est.z,
        probabilities: est
            .counts
            .values()
            .map(|m| *m as f64 / est.z as f64)
            .collect(),
    }
}

/// Token worlds use the batched document proposer; generic worlds fall
/// back to whole-world uniform flips.
fn pick_proposer(world: &World) -> worlddb::Result<ProposerSeed> {
    if world.token_index(TOKEN).is_some() {
        Ok(ProposerSeed::Batch)
    } else {
        Ok(ProposerSeed::Uniform(
            worlddb::mcmc::UniformFlipProposer::new(world)?,
        ))
    }
}

#[derive(Clone)]
enum ProposerSeed {
    Batch,
    Uniform(worlddb::mcmc::UniformFlipProposer),
}

impl ProposerSeed {
    fn build(&self) -> Box<dyn Proposer + Send> {
        match self {
            ProposerSeed::Batch => Box::new(BatchFlipProposer::new()),
            ProposerSeed::Uniform(u) => Box::new(u.clone()),
        }
    }
}

/// Estimate per-tuple marginals of `query_text` by sampling. The world
/// handle itself is not mutated; chains run on internal clones.
///
/// # Safety
/// `world` and `model` must be live handles; `query_text` a valid string;
/// `out` writable. `config` may be null for defaults.
#[no_mangle]
pub unsafe extern "C" fn wdb_evaluate(
    world: *const WdbWorld,
    model: *const WdbModel,
    query_text: *const c_char,
    config: *const WdbEvalConfig,
    out: *mut *mut WdbResult,
) -> WdbStatus {
    guard(|| {
        if world.is_null() || model.is_null() {
            set_error("world/model handle is null");
            return WdbStatus::WdbStatusUsage;
        }
        let query_text = match read_str(query_text, "query") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let c = if config.is_null() {
            WdbEvalConfig {
                mode: 1,
                samples: 0,
                steps_per_sample: 0,
                chains: 0,
                seed: 0,
                burn_in: 0,
            }
        } else {
            *config
        };
        if c.mode > 1 {
            set_error("mode must be 0 (naive) or 1 (incremental)");
            return WdbStatus::WdbStatusUsage;
        }
        let defaults = EvaluationConfig::default();
        let cfg = EvaluationConfig {
            mode: if c.mode == 0 { Mode::Naive } else { Mode::Incremental },
            samples: if c.samples == 0 { defaults.samples } else { c.samples },
            steps_per_sample: if c.steps_per_sample == 0 {
                defaults.steps_per_sample
            } else {
                c.steps_per_sample
            },
            chains: if c.chains == 0 { 1 } else { c.chains },
            seed: c.seed,
            burn_in: c.burn_in,
            ..Default::default()
        };
        let base = &(*world).world;
        let spec = &(*model).spec;
        let run = || -> worlddb::Result<MarginalEstimate> {
            let mut w = base.clone_world();
            spec.bind(&mut w)?;
            let q: Query = query::parse(query_text)?;
            let seed_proposer = pick_proposer(&w)?;
            if cfg.chains == 1 {
                let mut proposer = seed_proposer.build();
                match cfg.mode {
                    Mode::Naive => {
                        evaluator::evaluate_naive(&mut w, spec, proposer.as_mut(), &q, &cfg)
                    }
                    Mode::Incremental => {
                        evaluator::evaluate_incremental(&mut w, spec, proposer.as_mut(), &q, &cfg)
                    }
                }
            } else {
                evaluator::evaluate_parallel(&w, spec, &move |_| seed_proposer.build(), &q, &cfg)
            }
        };
        match run() {
            Ok(est) => store_out(out, result_from_estimate(&est), "result"),
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Exact marginals by enumeration, refused above `cap` joint assignments
/// (pass 0 for the default cap).
///
/// # Safety
/// Handles must be live; `query_text` valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wdb_oracle(
    world: *const WdbWorld,
    model: *const WdbModel,
    query_text: *const c_char,
    cap: u64,
    out: *mut *mut WdbResult,
) -> WdbStatus {
    guard(|| {
        if world.is_null() || model.is_null() {
            set_error("world/model handle is null");
            return WdbStatus::WdbStatusUsage;
        }
        let query_text = match read_str(query_text, "query") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let cap = if cap == 0 {
            worlddb::factor::exact::DEFAULT_ENUMERATION_CAP
        } else {
            cap
        };
        let base = &(*world).world;
        let spec = &(*model).spec;
        let run = || -> worlddb::Result<WdbResult> {
            let mut w = base.clone_world();
            spec.bind(&mut w)?;
            let q: Query = query::parse(query_text)?;
            let plan = query::validate(&q, &w)?;
            let marginals = exact_query_marginals(spec, &w, &q, cap)?;
            let join = |parts: Vec<String>| {
                CString::new(parts.join("\t").replace('\0', " ")).unwrap_or_default()
            };
            Ok(WdbResult {
                columns: join(plan.columns),
                tuples: marginals
                    .keys()
                    .map(|t| join(t.iter().map(|v| v.to_string()).collect()))
                    .collect(),
                counts: vec![0; marginals.len()],
                z: 0,
                probabilities: marginals.values().copied().collect(),
            })
        };
        match run() {
            Ok(res) => store_out(out, res, "result"),
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Number of distinct answer tuples.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wdb_result_row_count(result: *const WdbResult) -> usize {
    if result.is_null() {
        return 0;
    }
    (*result).tuples.len()
}

/// Tab-joined output column names. Valid until the result is freed.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wdb_result_columns(result: *const WdbResult) -> *const c_char {
    if result.is_null() {
        return std::ptr::null();
    }
    (*result).columns.as_ptr()
}

/// Tab-joined values of one answer tuple, or null when out of range. Valid
/// until the result is freed.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wdb_result_tuple(result: *const WdbResult, row: usize) -> *const c_char {
    if result.is_null() || row >= (*result).tuples.len() {
        return std::ptr::null();
    }
    let r = &*result;
    r.tuples[row].as_ptr()
}

/// Number of sampled worlds whose answer contained the tuple (0 for oracle
/// results).
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wdb_result_count(result: *const WdbResult, row: usize) -> u64 {
    if result.is_null() || row >= (*result).counts.len() {
        return 0;
    }
    let r = &*result;
    r.counts[row]
}

/// Total sampled worlds (0 for oracle results).
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wdb_result_z(result: *const WdbResult) -> u64 {
    if result.is_null() {
        return 0;
    }
    (*result).z
}

/// Estimated (or exact) probability of the tuple being in the answer.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wdb_result_probability(result: *const WdbResult, row: usize) -> f64 {
    if result.is_null() || row >= (*result).probabilities.len() {
        return f64::NAN;
    }
    let r = &*result;
    r.probabilities[row]
}

/// # Safety
/// `result` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn wdb_result_free(result: *mut WdbResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}
