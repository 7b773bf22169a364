//! C ABI over `crcd-core`.
//!
//! Every function returns a status code (`CRCD_OK` or an error code) and
//! writes results through out-pointers. On failure, `crcd_last_error`
//! returns a message for the calling thread. Handles are opaque and must be
//! released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crcd::config::RunConfig;
use crcd::losses::{self, BaselineLoss};
use crcd::mi::{self, MiCriticConfig, SyntheticJointSpec};
use crcd::queue::{ReplayQueue, SamplingPolicy};
use crcd::runner;
use crcd::CrcdError;

pub const CRCD_OK: i32 = 0;
pub const CRCD_ERR_CONFIG: i32 = 1;
pub const CRCD_ERR_SCHEMA: i32 = 2;
pub const CRCD_ERR_USAGE: i32 = 3;
pub const CRCD_ERR_DEGENERATE_INPUT: i32 = 4;
pub const CRCD_ERR_DEGENERATE_RELATION: i32 = 5;
pub const CRCD_ERR_NUMERICAL: i32 = 6;
pub const CRCD_ERR_WARM_UP: i32 = 7;
pub const CRCD_ERR_INGESTION: i32 = 8;
pub const CRCD_ERR_IO: i32 = 9;
pub const CRCD_ERR_JSON: i32 = 10;
pub const CRCD_ERR_NULL_POINTER: i32 = 11;
pub const CRCD_ERR_INVALID_UTF8: i32 = 12;
pub const CRCD_ERR_PANIC: i32 = 13;

pub const CRCD_POLICY_QUEUE: i32 = 0;
pub const CRCD_POLICY_RANDOM: i32 = 1;

pub const CRCD_BASELINE_TRIPLET: i32 = 0;
pub const CRCD_BASELINE_LOGISTIC: i32 = 1;
pub const CRCD_BASELINE_INFONCE: i32 = 2;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure {
    code: i32,
    message: String,
}

impl From<CrcdError> for Failure {
    fn from(e: CrcdError) -> Self {
        Failure { code: e.code(), message: e.to_string() }
    }
}

fn fail(code: i32, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CRCD_OK
        }
        Ok(Err(e)) => {
            set_last_error(&e.message);
            e.code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            CRCD_ERR_PANIC
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(CRCD_ERR_NULL_POINTER, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| fail(CRCD_ERR_NULL_POINTER, format!("{what} is null")))
}

unsafe fn string(p: *const c_char, what: &str) -> FfiResult<String> {
    if p.is_null() {
        return Err(fail(CRCD_ERR_NULL_POINTER, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_string)
        .map_err(|_| fail(CRCD_ERR_INVALID_UTF8, format!("{what} is not UTF-8")))
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> FfiResult<Array2<f64>> {
    ArrayView2::from_shape((rows, cols), data)
        .map(|v| v.to_owned())
        .map_err(|e| fail(CRCD_ERR_USAGE, e.to_string()))
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn crcd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn crcd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Relation contrastive loss from critic scores.
///
/// `positive` holds `m` scores in (0, 1]; `negative` is row-major `m × n`.
/// `out_saturations` may be null.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn crcd_relation_contrastive_loss(
    positive: *const f64,
    negative: *const f64,
    m: usize,
    n: usize,
    literal_n: bool,
    out_loss: *mut f64,
    out_saturations: *mut usize,
) -> i32 {
    guard(|| {
        let pos = slice(positive, m, "positive")?;
        let neg = matrix(slice(negative, m * n, "negative")?, m, n)?;
        let v = losses::relation_contrastive_loss(pos, &neg, literal_n)?;
        *out(out_loss, "out_loss")? = v.loss;
        if let Some(s) = out_saturations.as_mut() {
            *s = v.saturations;
        }
        Ok(())
    })
}

/// Soft-target loss `ρ² · mean CE(softmax(zT/ρ), softmax(zS/ρ))` over `rows × classes` logits.
///
/// # Safety
/// Pointers must be valid for `rows * classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn crcd_kd_loss(
    teacher_logits: *const f64,
    student_logits: *const f64,
    rows: usize,
    classes: usize,
    rho: f64,
    out_loss: *mut f64,
) -> i32 {
    guard(|| {
        let zt = matrix(slice(teacher_logits, rows * classes, "teacher_logits")?, rows, classes)?;
        let zs = matrix(slice(student_logits, rows * classes, "student_logits")?, rows, classes)?;
        *out(out_loss, "out_loss")? = losses::kd_loss(&zt, &zs, rho)?;
        Ok(())
    })
}

/// Baseline contrastive loss for one anchor. `kind` is a `CRCD_BASELINE_*`
/// constant; `param` is the margin (triplet) or temperature (others).
///
/// # Safety
/// `u` and `v_pos` hold `dim` doubles, `v_negs` holds `n * dim`.
#[no_mangle]
pub unsafe extern "C" fn crcd_baseline_loss(
    kind: i32,
    u: *const f64,
    v_pos: *const f64,
    v_negs: *const f64,
    dim: usize,
    n: usize,
    param: f64,
    out_loss: *mut f64,
) -> i32 {
    guard(|| {
        let kind = match kind {
            CRCD_BASELINE_TRIPLET => BaselineLoss::TripletMargin,
            CRCD_BASELINE_LOGISTIC => BaselineLoss::Logistic,
            CRCD_BASELINE_INFONCE => BaselineLoss::InfoNce,
            k => return Err(fail(CRCD_ERR_USAGE, format!("unknown baseline kind {k}"))),
        };
        let u = Array1::from(slice(u, dim, "u")?.to_vec());
        let vp = Array1::from(slice(v_pos, dim, "v_pos")?.to_vec());
        let vn = matrix(slice(v_negs, n * dim, "v_negs")?, n, dim)?;
        *out(out_loss, "out_loss")? = losses::baseline_contrastive_loss(kind, &u, &vp, &vn, param)?;
        Ok(())
    })
}

/// Closed-form mutual information (nats) of a synthetic joint given as text,
/// e.g. `gaussian:0.9` or `discrete:0.5,0;0,0.5`.
///
/// # Safety
/// `spec` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn crcd_true_mi(spec: *const c_char, out_mi: *mut f64) -> i32 {
    guard(|| {
        let spec: SyntheticJointSpec = string(spec, "spec")?.parse()?;
        *out(out_mi, "out_mi")? = mi::true_mi(&spec)?;
        Ok(())
    })
}

/// Trains the default critic on the joint and reports the final held-out bound.
/// `out_sound` is set when every checkpoint stayed below the true MI plus tolerance.
///
/// # Safety
/// `spec` must be NUL-terminated; out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn crcd_mi_bound(
    spec: *const c_char,
    negatives: usize,
    train_steps: usize,
    seed: u64,
    out_bound: *mut f64,
    out_true_mi: *mut f64,
    out_sound: *mut bool,
) -> i32 {
    guard(|| {
        let mut spec: SyntheticJointSpec = string(spec, "spec")?.parse()?;
        spec.seed = seed;
        let r = mi::fit_and_bound(&spec, &MiCriticConfig::default(), negatives, train_steps)?;
        *out(out_bound, "out_bound")? = r.final_bound;
        *out(out_true_mi, "out_true_mi")? = r.true_mi;
        *out(out_sound, "out_sound")? = r.sound;
        Ok(())
    })
}

/// Opaque replay queue.
pub struct CrcdQueue {
    inner: ReplayQueue,
}

/// # Safety
/// `out_queue` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn crcd_queue_new(
    capacity: usize,
    feature_dim: usize,
    gradient_dim: usize,
    policy: i32,
    seed: u64,
    out_queue: *mut *mut CrcdQueue,
) -> i32 {
    guard(|| {
        let slot = out(out_queue, "out_queue")?;
        let policy = match policy {
            CRCD_POLICY_QUEUE => SamplingPolicy::Queue,
            CRCD_POLICY_RANDOM => SamplingPolicy::Random,
            p => return Err(fail(CRCD_ERR_USAGE, format!("unknown policy {p}"))),
        };
        let inner = ReplayQueue::new(capacity, feature_dim, gradient_dim, policy, ChaCha8Rng::seed_from_u64(seed))?;
        *slot = Box::into_raw(Box::new(CrcdQueue { inner }));
        Ok(())
    })
}

/// # Safety
/// `queue` must come from `crcd_queue_new` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn crcd_queue_free(queue: *mut CrcdQueue) {
    if !queue.is_null() {
        drop(Box::from_raw(queue));
    }
}

/// Appends `count` entries; features are `count × feature_dim`, gradients `count × gradient_dim`.
///
/// # Safety
/// Pointers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn crcd_queue_push(
    queue: *mut CrcdQueue,
    sample_ids: *const usize,
    features: *const f64,
    gradients: *const f64,
    count: usize,
    feature_dim: usize,
    gradient_dim: usize,
) -> i32 {
    guard(|| {
        let q = out(queue, "queue")?;
        let ids = slice(sample_ids, count, "sample_ids")?;
        let f = matrix(slice(features, count * feature_dim, "features")?, count, feature_dim)?;
        let g = matrix(slice(gradients, count * gradient_dim, "gradients")?, count, gradient_dim)?;
        q.inner.push_batch(ids, f.view(), g.view())?;
        Ok(())
    })
}

/// # Safety
/// `queue` and `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn crcd_queue_len(queue: *const CrcdQueue, out_len: *mut usize) -> i32 {
    guard(|| {
        let q = queue.as_ref().ok_or_else(|| fail(CRCD_ERR_NULL_POINTER, "queue is null"))?;
        *out(out_len, "out_len")? = q.inner.len();
        Ok(())
    })
}

/// Writes the sample ids of `count` negatives for `anchor` into `out_ids`.
/// Returns `CRCD_ERR_WARM_UP` while too few eligible entries exist.
///
/// # Safety
/// `out_ids` must have room for `count` values.
#[no_mangle]
pub unsafe extern "C" fn crcd_queue_sample(
    queue: *mut CrcdQueue,
    anchor: usize,
    count: usize,
    out_ids: *mut usize,
) -> i32 {
    guard(|| {
        let q = out(queue, "queue")?;
        if count > 0 && out_ids.is_null() {
            return Err(fail(CRCD_ERR_NULL_POINTER, "out_ids is null"));
        }
        let picked = q.inner.sample_negatives(anchor, count)?;
        for (i, e) in picked.iter().enumerate() {
            *out_ids.add(i) = e.sample_id;
        }
        Ok(())
    })
}

/// Opaque parsed run configuration.
pub struct CrcdConfig {
    inner: RunConfig,
    overrides: Vec<String>,
}

/// Parses TOML text with optional `key=value` overrides.
///
/// # Safety
/// `toml_text` is NUL-terminated; `overrides` holds `n_overrides` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn crcd_config_parse(
    toml_text: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out_config: *mut *mut CrcdConfig,
) -> i32 {
    guard(|| {
        let slot = out(out_config, "out_config")?;
        let text = string(toml_text, "toml_text")?;
        let ov = slice(overrides, n_overrides, "overrides")?
            .iter()
            .map(|&p| string(p, "override"))
            .collect::<FfiResult<Vec<_>>>()?;
        let inner = RunConfig::from_toml_str(&text, &ov)?;
        *slot = Box::into_raw(Box::new(CrcdConfig { inner, overrides: ov }));
        Ok(())
    })
}

/// # Safety
/// `config` must come from `crcd_config_parse`. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn crcd_config_free(config: *mut CrcdConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Copies the config hash (64 hex chars plus NUL) into `buf`.
///
/// # Safety
/// `buf` must have room for `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn crcd_config_hash(config: *const CrcdConfig, buf: *mut c_char, buf_len: usize) -> i32 {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| fail(CRCD_ERR_NULL_POINTER, "config is null"))?;
        let h = c.inner.config_hash();
        if buf.is_null() {
            return Err(fail(CRCD_ERR_NULL_POINTER, "buf is null"));
        }
        if buf_len < h.len() + 1 {
            return Err(fail(CRCD_ERR_USAGE, format!("buffer needs {} bytes", h.len() + 1)));
        }
        ptr::copy_nonoverlapping(h.as_ptr().cast::<c_char>(), buf, h.len());
        *buf.add(h.len()) = 0;
        Ok(())
    })
}

/// Trains the teacher and writes its checkpoint to `checkpoint_path`
/// (the configured path when null). `out_top1` receives test accuracy in percent.
///
/// # Safety
/// `config` must be valid; `checkpoint_path` is null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn crcd_train_teacher(
    config: *const CrcdConfig,
    checkpoint_path: *const c_char,
    out_top1: *mut f64,
) -> i32 {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| fail(CRCD_ERR_NULL_POINTER, "config is null"))?;
        let path = if checkpoint_path.is_null() {
            c.inner.teacher_checkpoint()
        } else {
            PathBuf::from(string(checkpoint_path, "checkpoint_path")?)
        };
        let ck = runner::run_teacher(&c.inner, &path, &mut |_| {})?;
        *out(out_top1, "out_top1")? = ck.test.top1;
        Ok(())
    })
}

/// Runs distillation into `out_dir` and reports final and best top-1 (percent).
///
/// # Safety
/// `config` must be valid; `out_dir` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn crcd_distill(
    config: *const CrcdConfig,
    out_dir: *const c_char,
    resume: bool,
    out_final_top1: *mut f64,
    out_best_top1: *mut f64,
) -> i32 {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| fail(CRCD_ERR_NULL_POINTER, "config is null"))?;
        let dir = PathBuf::from(string(out_dir, "out_dir")?);
        let r = runner::run_distill(&c.inner, &dir, &c.overrides, resume, &mut |_| {})?;
        *out(out_final_top1, "out_final_top1")? = r.final_top1;
        if let Some(b) = out_best_top1.as_mut() {
            *b = r.best_top1;
        }
        Ok(())
    })
}
