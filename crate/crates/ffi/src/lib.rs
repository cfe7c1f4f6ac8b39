//! C ABI over `tabgen-core`.
//!
//! Handles are opaque and owned by the caller once returned; free them with
//! the matching `*_free`. Strings handed out by the library are freed with
//! [`tabgen_string_free`]. Every call returns a [`TabgenStatus`]; on failure
//! [`tabgen_last_error_message`] describes what went wrong on this thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tabgen::augmentor::{augment_probs, serialize_probs, serialize_target, TreeEnsembleModel};
use tabgen::ingest::{read_csv, Dataset, IngestError, Row, Value};
use tabgen::outparse::{parse_prediction, ParseStatus};
use tabgen::serializer::{serialize_features, SerializationConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TabgenStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Model = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TabgenParseStatus {
    Ok = 0,
    Truncated = 1,
    Failed = 2,
}

/// A loaded table, optionally with a target column.
pub struct TabgenDataset {
    inner: Dataset,
}

/// A calibrated tree ensemble read from a model file.
pub struct TabgenModel {
    inner: TreeEnsembleModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(TabgenStatus, String);

impl Fail {
    fn new(status: TabgenStatus, msg: impl Into<String>) -> Self {
        Fail(status, msg.into())
    }
}

impl From<IngestError> for Fail {
    fn from(e: IngestError) -> Self {
        let status = match e {
            IngestError::Io { .. } => TabgenStatus::Io,
            _ => TabgenStatus::Parse,
        };
        Fail(status, e.to_string())
    }
}

fn set_error(msg: String) {
    // interior NULs would truncate the message anyway
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TabgenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TabgenStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TabgenStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::new(TabgenStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::new(TabgenStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail::new(TabgenStatus::NullArgument, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail::new(TabgenStatus::NullArgument, format!("{name} is null")))
}

fn to_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail::new(TabgenStatus::InvalidArgument, "output contains a NUL byte"))
}

fn with_target(mut d: Dataset, target: Option<&str>) -> Result<Dataset, Fail> {
    if let Some(t) = target {
        let name = d.resolve_column(t).map(str::to_owned).ok_or_else(|| {
            Fail::new(TabgenStatus::InvalidArgument, format!("no column named `{t}`"))
        })?;
        d.target_column = Some(name);
    }
    Ok(d)
}

fn row_at(d: &Dataset, row: usize) -> Result<&Row, Fail> {
    d.rows.get(row).ok_or_else(|| {
        Fail::new(
            TabgenStatus::InvalidArgument,
            format!("row {row} out of range ({} rows)", d.num_rows()),
        )
    })
}

/// Lays the dataset's cells out where the model's encoder expects them,
/// matching features by column name.
fn aligned_row(m: &TreeEnsembleModel, d: &Dataset, row: &Row) -> Result<Row, Fail> {
    let width = m.encoder.features.iter().map(|f| f.source + 1).max().unwrap_or(0);
    let mut cells = vec![Value::Missing; width];
    for f in &m.encoder.features {
        let i = d.column_index(&f.name).ok_or_else(|| {
            Fail::new(TabgenStatus::Model, format!("dataset has no feature column `{}`", f.name))
        })?;
        cells[f.source] = row.cells[i].clone();
    }
    Ok(Row { id: row.id, cells })
}

fn predict(m: &TreeEnsembleModel, d: &Dataset, row: usize) -> Result<Vec<f64>, Fail> {
    let r = aligned_row(m, d, row_at(d, row)?)?;
    let x = m.encoder.transform_row(&r);
    m.ensemble
        .predict_proba(&x)
        .map_err(|e| Fail::new(TabgenStatus::Model, e.to_string()))
}

/// Message for the last failed call on this thread, or null after a
/// successful one. The pointer is valid until the next tabgen call on the
/// same thread and must not be freed.
#[no_mangle]
pub extern "C" fn tabgen_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn tabgen_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tabgen_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses CSV text. `target` may be null.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tabgen_dataset_from_csv(
    id: *const c_char,
    csv_text: *const c_char,
    target: *const c_char,
    out: *mut *mut TabgenDataset,
) -> TabgenStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let id = str_arg(id, "id")?;
        let text = str_arg(csv_text, "csv_text")?;
        let target = opt_str_arg(target, "target")?;
        let d = read_csv(id, Path::new(id), text.as_bytes())?;
        let d = with_target(d, target)?;
        *out = Box::into_raw(Box::new(TabgenDataset { inner: d }));
        Ok(())
    })
}

/// Reads a CSV file; the dataset id is the file stem. `target` may be null.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tabgen_dataset_from_file(
    path: *const c_char,
    target: *const c_char,
    out: *mut *mut TabgenDataset,
) -> TabgenStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = Path::new(str_arg(path, "path")?);
        let target = opt_str_arg(target, "target")?;
        let file = File::open(path)
            .map_err(|e| Fail::new(TabgenStatus::Io, format!("cannot read {}: {e}", path.display())))?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        let d = with_target(read_csv(id, path, file)?, target)?;
        *out = Box::into_raw(Box::new(TabgenDataset { inner: d }));
        Ok(())
    })
}

/// Number of data rows, 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn tabgen_dataset_num_rows(ds: *const TabgenDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.num_rows())
}

/// Renders row `row` as `name is value; ...` text, skipping the target.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tabgen_dataset_serialize_row(
    ds: *const TabgenDataset,
    row: usize,
    out: *mut *mut c_char,
) -> TabgenStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let d = &ref_arg(ds, "ds")?.inner;
        let text = serialize_features(row_at(d, row)?, d, &SerializationConfig::default());
        *out = to_c_string(text)?;
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tabgen_dataset_free(ds: *mut TabgenDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a model file written by the training pipeline.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tabgen_model_load(path: *const c_char, out: *mut *mut TabgenModel) -> TabgenStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = Path::new(str_arg(path, "path")?);
        if !path.is_file() {
            return Err(Fail::new(TabgenStatus::Io, format!("no model file at {}", path.display())));
        }
        let m = TreeEnsembleModel::load(path).map_err(|e| Fail::new(TabgenStatus::Model, e.to_string()))?;
        *out = Box::into_raw(Box::new(TabgenModel { inner: m }));
        Ok(())
    })
}

/// Size of the model's class space, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn tabgen_model_num_classes(model: *const TabgenModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.space.len())
}

/// Writes calibrated class probabilities for one row into `out`, which
/// must hold at least `tabgen_model_num_classes` values.
///
/// # Safety
/// Handles must be live; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tabgen_model_predict_proba(
    model: *const TabgenModel,
    ds: *const TabgenDataset,
    row: usize,
    out: *mut f64,
    len: usize,
) -> TabgenStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.inner;
        let d = &ref_arg(ds, "ds")?.inner;
        if out.is_null() {
            return Err(Fail::new(TabgenStatus::NullArgument, "out is null"));
        }
        let k = m.space.len();
        if len < k {
            return Err(Fail::new(
                TabgenStatus::InvalidArgument,
                format!("buffer holds {len} values, model has {k} classes"),
            ));
        }
        let p = predict(m, d, row)?;
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(&p);
        Ok(())
    })
}

/// Augmented target text (`class 0: p0; ...`) for one row. The dataset must
/// have its target column set.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tabgen_model_augment(
    model: *const TabgenModel,
    ds: *const TabgenDataset,
    row: usize,
    out: *mut *mut c_char,
) -> TabgenStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = &ref_arg(model, "model")?.inner;
        let d = &ref_arg(ds, "ds")?.inner;
        let t = d
            .target_index()
            .ok_or_else(|| Fail::new(TabgenStatus::InvalidArgument, "dataset has no target column"))?;
        let cell = &row_at(d, row)?.cells[t];
        let class = m.space.class_of(cell).ok_or_else(|| {
            Fail::new(TabgenStatus::InvalidArgument, format!("row {row}: target {cell:?} is not in the class space"))
        })?;
        let p = predict(m, d, row)?;
        let a = augment_probs(&p, class).map_err(|e| Fail::new(TabgenStatus::Model, e.to_string()))?;
        *out = to_c_string(serialize_target(&a))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tabgen_model_free(model: *mut TabgenModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Maps generated text to a class among `num_classes`. `out_class` may be
/// null; it is left untouched when parsing fails.
///
/// # Safety
/// `text` must be NUL-terminated; `out_status` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tabgen_parse_prediction(
    text: *const c_char,
    num_classes: usize,
    out_class: *mut usize,
    out_status: *mut TabgenParseStatus,
) -> TabgenStatus {
    guard(|| {
        let status = out_arg(out_status, "out_status")?;
        let text = str_arg(text, "text")?;
        let parsed = parse_prediction(text, num_classes);
        *status = match parsed.status {
            ParseStatus::Ok => TabgenParseStatus::Ok,
            ParseStatus::Truncated => TabgenParseStatus::Truncated,
            ParseStatus::Failed => TabgenParseStatus::Failed,
        };
        if let (Some(c), Some(slot)) = (parsed.predicted_class, out_class.as_mut()) {
            *slot = c;
        }
        Ok(())
    })
}

/// Renders `len` probabilities as `class 0: p0; class 1: p1; ...`.
///
/// # Safety
/// `probs` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tabgen_serialize_probs(probs: *const f64, len: usize, out: *mut *mut c_char) -> TabgenStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if probs.is_null() {
            return Err(Fail::new(TabgenStatus::NullArgument, "probs is null"));
        }
        let p = std::slice::from_raw_parts(probs, len);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Fail::new(TabgenStatus::InvalidArgument, "probabilities must be finite"));
        }
        *out = to_c_string(serialize_probs(p))?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> Option<String> {
        let p = tabgen_last_error_message();
        (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
    }

    #[test]
    fn panics_become_status_codes() {
        let s = guard(|| panic!("kaboom"));
        assert_eq!(s, TabgenStatus::Panic);
        assert_eq!(last_error().as_deref(), Some("panic: kaboom"));
        assert_eq!(guard(|| Ok(())), TabgenStatus::Ok);
        assert_eq!(last_error(), None);
    }

    #[test]
    fn errors_are_per_thread() {
        guard(|| Err(Fail::new(TabgenStatus::Io, "here")));
        let other = std::thread::spawn(last_error).join().unwrap();
        assert_eq!(other, None);
        assert_eq!(last_error().as_deref(), Some("here"));
    }

    #[test]
    fn nul_bytes_in_messages_survive() {
        guard(|| Err(Fail::new(TabgenStatus::Parse, "a\0b")));
        assert_eq!(last_error().as_deref(), Some("a b"));
    }
}
