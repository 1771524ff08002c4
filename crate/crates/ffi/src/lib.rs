//! C ABI over `spatial-bench`.
//!
//! Every fallible function returns an [`SbStatus`]; on failure the message is
//! kept per thread and read with [`sb_last_error`]. Objects cross the
//! boundary as opaque handles that the caller frees with the matching
//! `*_free` function. Panics are caught and reported as `SB_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use spatial_bench::config::EnvConfig;
use spatial_bench::eval::{self, FlowAggregation};
use spatial_bench::geometry::{classify_direction, relative_angle, TaskVariant, Vec3};
use spatial_bench::sampler::{generate_dataset, GenerateOptions};
use spatial_bench::scene::TripleSpec;
use spatial_bench::store::{read_manifest, write_manifest, AttentionTensor, FeatureTensor, SampleRecord};
use spatial_bench::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbStatus {
    Ok = 0,
    InvalidArgument = 1,
    Degenerate = 2,
    Io = 3,
    CorruptFile = 4,
    SchemaMismatch = 5,
    ShapeMismatch = 6,
    BudgetExhausted = 7,
    UnknownName = 8,
    Numeric = 9,
    Internal = 10,
}

/// Label codes, in the order front, back, left, right; `SB_LABEL_NONE`
/// marks an ambiguous direction.
pub const SB_LABEL_NONE: i32 = -1;

/// Task variant codes.
pub const SB_VARIANT_EGO: i32 = 0;
pub const SB_VARIANT_ALLO: i32 = 1;

/// Flow aggregation codes.
pub const SB_FLOW_SUM: i32 = 0;
pub const SB_FLOW_MEAN: i32 = 1;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SbStatus {
    match e {
        Error::DegenerateFrame | Error::DegenerateTarget | Error::MissingObject(_) => SbStatus::Degenerate,
        Error::InvalidParameter(_) | Error::OutOfBounds { .. } | Error::Config(_) | Error::EmptyInput => {
            SbStatus::InvalidArgument
        }
        Error::Io { .. } | Error::MissingFeatures { .. } => SbStatus::Io,
        Error::CorruptFile(_) => SbStatus::CorruptFile,
        Error::SchemaMismatch { .. } => SbStatus::SchemaMismatch,
        Error::ShapeMismatch(_) | Error::EmptyCategory(_) | Error::EmptyFold(_) => SbStatus::ShapeMismatch,
        Error::BudgetExhausted { .. } => SbStatus::BudgetExhausted,
        Error::UnknownEnvironment { .. } | Error::UnknownCategory(_) => SbStatus::UnknownName,
        Error::DegenerateVariance => SbStatus::Numeric,
        Error::StaleCache => SbStatus::Internal,
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Error>) -> SbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SbStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {msg}"));
            SbStatus::Internal
        }
    }
}

fn null_check<T>(p: *const T, name: &str) -> Result<(), Error> {
    if p.is_null() {
        Err(Error::InvalidParameter(format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Error> {
    null_check(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidParameter(format!("`{name}` is not UTF-8")))
}

fn variant(code: i32) -> Result<TaskVariant, Error> {
    match code {
        SB_VARIANT_EGO => Ok(TaskVariant::Ego),
        SB_VARIANT_ALLO => Ok(TaskVariant::Allo),
        _ => Err(Error::InvalidParameter(format!("variant code {code}"))),
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Ground-plane relative angle of `target` around `source`, seen from
/// `viewpoint`, in degrees. Points are `[x, y, z]`.
///
/// # Safety
/// Each pointer must reference three readable doubles; `out_theta` one writable double.
#[no_mangle]
pub unsafe extern "C" fn sb_relative_angle(
    viewpoint: *const f64,
    source: *const f64,
    target: *const f64,
    out_theta: *mut f64,
) -> SbStatus {
    guard(|| {
        null_check(viewpoint, "viewpoint")?;
        null_check(source, "source")?;
        null_check(target, "target")?;
        null_check(out_theta, "out_theta")?;
        let v = |p: *const f64| {
            let s = std::slice::from_raw_parts(p, 3);
            Vec3::new(s[0], s[1], s[2])
        };
        *out_theta = relative_angle(v(viewpoint), v(source), v(target))?.degrees();
        Ok(())
    })
}

/// Direction label code for an angle, or `SB_LABEL_NONE` inside an ambiguity cone.
///
/// # Safety
/// `out_label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_classify_direction(theta: f64, half_width: f64, out_label: *mut i32) -> SbStatus {
    guard(|| {
        null_check(out_label, "out_label")?;
        let angle = spatial_bench::geometry::RelativeAngle::new(theta);
        *out_label = classify_direction(angle, half_width)?.map_or(SB_LABEL_NONE, |l| l.index() as i32);
        Ok(())
    })
}

/// Opaque set of sample records.
pub struct SbDataset {
    records: Vec<SampleRecord>,
}

/// Samples `n` scenes from a built-in environment. `triple` is
/// `"source,target,viewpoint"` or NULL for the environment default.
///
/// # Safety
/// `env` must be a NUL-terminated string, `triple` NULL or one; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sb_dataset_generate(
    env: *const c_char,
    triple: *const c_char,
    n: usize,
    seed: u64,
    out: *mut *mut SbDataset,
) -> SbStatus {
    guard(|| {
        null_check(out, "out")?;
        let name = str_arg(env, "env")?;
        let env = EnvConfig::builtin(name).ok_or_else(|| Error::UnknownEnvironment {
            name: name.to_owned(),
            known: EnvConfig::builtin_names(),
        })?;
        let triple: TripleSpec = if triple.is_null() {
            env.default_triple.clone()
        } else {
            str_arg(triple, "triple")?.parse()?
        };
        let (records, _) = generate_dataset(&env, &triple, n, seed, GenerateOptions::default())?;
        *out = Box::into_raw(Box::new(SbDataset { records }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sb_dataset_read(path: *const c_char, out: *mut *mut SbDataset) -> SbStatus {
    guard(|| {
        null_check(out, "out")?;
        let records = read_manifest(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(SbDataset { records }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sb_dataset_write(ds: *const SbDataset, path: *const c_char) -> SbStatus {
    guard(|| {
        null_check(ds, "dataset")?;
        write_manifest(Path::new(str_arg(path, "path")?), &(*ds).records)
    })
}

/// Number of records; 0 for a NULL handle.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_dataset_len(ds: *const SbDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.records.len())
}

/// Label code and signed angle of record `index` under a variant.
///
/// # Safety
/// `ds` must be a live handle; `out_label` and `out_theta` writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn sb_dataset_label(
    ds: *const SbDataset,
    index: usize,
    variant_code: i32,
    out_label: *mut i32,
    out_theta: *mut f64,
) -> SbStatus {
    guard(|| {
        null_check(ds, "dataset")?;
        let v = variant(variant_code)?;
        let ds = &*ds;
        let r = ds
            .records
            .get(index)
            .ok_or_else(|| Error::InvalidParameter(format!("index {index} out of range")))?;
        if !out_label.is_null() {
            *out_label = r.label(v).index() as i32;
        }
        if !out_theta.is_null() {
            *out_theta = match v {
                TaskVariant::Ego => r.theta_ego,
                TaskVariant::Allo => r.theta_allo,
            };
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_dataset_free(ds: *mut SbDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Opaque feature tensor (`SPRT`).
pub struct SbFeatures {
    tensor: FeatureTensor,
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sb_features_read(path: *const c_char, out: *mut *mut SbFeatures) -> SbStatus {
    guard(|| {
        null_check(out, "out")?;
        let tensor = FeatureTensor::read(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(SbFeatures { tensor }));
        Ok(())
    })
}

/// Shape of a feature tensor; any out pointer may be NULL.
///
/// # Safety
/// `f` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_features_shape(
    f: *const SbFeatures,
    n_tokens: *mut u32,
    dim: *mut u32,
    layer_id: *mut u32,
) -> SbStatus {
    guard(|| {
        null_check(f, "features")?;
        let t = &(*f).tensor;
        for (p, v) in [(n_tokens, t.n_tokens), (dim, t.dim), (layer_id, t.layer_id)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Row-major `n_tokens × dim` values, owned by the handle.
///
/// # Safety
/// `f` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_features_data(f: *const SbFeatures) -> *const f32 {
    f.as_ref().map_or(std::ptr::null(), |f| f.tensor.values.as_ptr())
}

/// # Safety
/// `f` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_features_free(f: *mut SbFeatures) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Opaque attention tensor (`SPAT`), row-stochastic per (layer, head).
pub struct SbAttention {
    tensor: AttentionTensor,
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sb_attention_read(path: *const c_char, out: *mut *mut SbAttention) -> SbStatus {
    guard(|| {
        null_check(out, "out")?;
        let tensor = AttentionTensor::read(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(SbAttention { tensor }));
        Ok(())
    })
}

/// # Safety
/// `a` must be a live handle; out pointers writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn sb_attention_shape(
    a: *const SbAttention,
    layers: *mut u32,
    heads: *mut u32,
    n_tokens: *mut u32,
) -> SbStatus {
    guard(|| {
        null_check(a, "attention")?;
        let t = &(*a).tensor;
        for (p, v) in [(layers, t.layers), (heads, t.heads), (n_tokens, t.n_tokens)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Per-layer flow from `source` to `destination` tokens. `categories` holds
/// one id per token; `out_values` must have room for one value per layer.
///
/// # Safety
/// `categories` must reference `n_categories` values and `out_values`
/// `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sb_attention_flow(
    a: *const SbAttention,
    categories: *const u16,
    n_categories: usize,
    source: u16,
    destination: u16,
    aggregation: i32,
    out_values: *mut f64,
    out_len: usize,
) -> SbStatus {
    guard(|| {
        null_check(a, "attention")?;
        null_check(categories, "categories")?;
        null_check(out_values, "out_values")?;
        let agg = match aggregation {
            SB_FLOW_SUM => FlowAggregation::Sum,
            SB_FLOW_MEAN => FlowAggregation::Mean,
            _ => return Err(Error::InvalidParameter(format!("aggregation code {aggregation}"))),
        };
        let t = &(*a).tensor;
        if out_len < t.layers as usize {
            return Err(Error::ShapeMismatch(format!("{out_len} output slots for {} layers", t.layers)));
        }
        let cats = std::slice::from_raw_parts(categories, n_categories);
        let curve = eval::attention_flow(t, cats, source, destination, agg)?;
        std::slice::from_raw_parts_mut(out_values, curve.values.len()).copy_from_slice(&curve.values);
        Ok(())
    })
}

/// # Safety
/// `a` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_attention_free(a: *mut SbAttention) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// Pearson correlation of two series of length `n`.
///
/// # Safety
/// `xs` and `ys` must reference `n` doubles; `out_r` writable.
#[no_mangle]
pub unsafe extern "C" fn sb_pearson_r(xs: *const f64, ys: *const f64, n: usize, out_r: *mut f64) -> SbStatus {
    guard(|| {
        null_check(xs, "xs")?;
        null_check(ys, "ys")?;
        null_check(out_r, "out_r")?;
        *out_r = eval::pearson_r(std::slice::from_raw_parts(xs, n), std::slice::from_raw_parts(ys, n))?;
        Ok(())
    })
}

/// Mean rank per model of a row-major `n_models × n_columns` score table.
///
/// # Safety
/// `table` must reference `n_models·n_columns` doubles and `out_ranks` `n_models`.
#[no_mangle]
pub unsafe extern "C" fn sb_mean_rank(
    table: *const f64,
    n_models: usize,
    n_columns: usize,
    out_ranks: *mut f64,
) -> SbStatus {
    guard(|| {
        null_check(table, "table")?;
        null_check(out_ranks, "out_ranks")?;
        let len = n_models
            .checked_mul(n_columns)
            .ok_or_else(|| Error::InvalidParameter("table size overflows".into()))?;
        let flat = std::slice::from_raw_parts(table, len);
        let rows: Vec<Vec<f64>> = flat.chunks(n_columns.max(1)).map(<[f64]>::to_vec).collect();
        let ranks = eval::mean_rank(&rows)?;
        std::slice::from_raw_parts_mut(out_ranks, n_models).copy_from_slice(&ranks);
        Ok(())
    })
}
