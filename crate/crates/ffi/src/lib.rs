//! C interface: load a checkpoint, separate mixtures, score estimates.
//!
//! Every fallible call returns a [`CasnetStatus`]; on failure a message is
//! available from [`casnet_last_error`] on the same thread. Handles are
//! opaque and must be released with [`casnet_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use casnet::chanenc::EmbeddingSource;
use casnet::evalkit::separate;
use casnet::film::Model;
use casnet::gradcore::lossops::si_snr_db;
use casnet::gradcore::ParamStore;
use casnet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CasnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Internal = 5,
}

/// Embedding sources accepted by [`casnet_separate`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CasnetEmbeddingSource {
    /// The mixture itself; `aux` is ignored.
    Same = 0,
    /// The auxiliary recording passed in `aux`.
    Aux = 1,
    AllOnes = 2,
    Gaussian = 3,
    NoFilm = 4,
}

/// Opaque model handle.
pub struct CasnetModel {
    model: Model,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let mut m = msg.into();
    m.retain(|c| c != '\0');
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(m).expect("nul bytes removed"));
}

fn fail(status: CasnetStatus, msg: impl Into<String>) -> CasnetStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> CasnetStatus {
    match e {
        Error::Io { .. } | Error::WavFormat { .. } => CasnetStatus::Io,
        Error::Checkpoint(_) => CasnetStatus::Checkpoint,
        Error::Shape { .. } | Error::InvalidArgument(_) | Error::Config(_) => CasnetStatus::InvalidArgument,
        _ => CasnetStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), CasnetStatus>) -> CasnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CasnetStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(CasnetStatus::Internal, "internal panic"),
    }
}

fn lift<T>(r: casnet::Result<T>) -> Result<T, CasnetStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

/// Message describing the last failure on this thread, or an empty string.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn casnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn casnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by the `casnet` tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn casnet_model_load(path: *const c_char, out: *mut *mut CasnetModel) -> CasnetStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(CasnetStatus::NullPointer, "path and out must not be null"));
        }
        *out = ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(CasnetStatus::InvalidArgument, "path is not valid UTF-8"))?;
        let (model, store) = lift(Model::load(Path::new(p)))?;
        *out = Box::into_raw(Box::new(CasnetModel { model, store }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`casnet_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn casnet_model_free(model: *mut CasnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of separated sources, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn casnet_model_num_sources(model: *const CasnetModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.cfg.separator.n_sources)
}

/// 1 when the model has a channel encoder, 0 otherwise or for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn casnet_model_has_channel_encoder(model: *const CasnetModel) -> i32 {
    model.as_ref().map_or(0, |m| i32::from(!m.model.cfg.is_baseline()))
}

/// Separates `mixture[0..len]` into `out`, laid out source-major
/// (`out[s * len + t]`), which must hold `num_sources * len` values.
/// `aux` is read only for [`CasnetEmbeddingSource::Aux`]; `seed` drives
/// the Gaussian embedding.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn casnet_separate(
    model: *const CasnetModel,
    mixture: *const f64,
    len: usize,
    source: i32,
    aux: *const f64,
    aux_len: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> CasnetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| fail(CasnetStatus::NullPointer, "model is null"))?;
        if mixture.is_null() || out.is_null() {
            return Err(fail(CasnetStatus::NullPointer, "mixture and out must not be null"));
        }
        let src = match source {
            0 => EmbeddingSource::SameMixture,
            1 => EmbeddingSource::OtherChannel,
            2 => EmbeddingSource::AllOnes,
            3 => EmbeddingSource::GaussianNoise,
            4 => EmbeddingSource::Bypass,
            s => return Err(fail(CasnetStatus::InvalidArgument, format!("unknown embedding source {s}"))),
        };
        let n = m.model.cfg.separator.n_sources;
        if out_len != n * len {
            return Err(fail(CasnetStatus::InvalidArgument, format!("out holds {out_len} values, need {}", n * len)));
        }
        let x = slice::from_raw_parts(mixture, len);
        let aux_slice = match src {
            EmbeddingSource::SameMixture => Some(x),
            EmbeddingSource::OtherChannel => {
                if aux.is_null() {
                    return Err(fail(CasnetStatus::NullPointer, "this embedding source needs aux"));
                }
                Some(slice::from_raw_parts(aux, aux_len))
            }
            _ => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = lift(separate(&m.model, &m.store, x, src, aux_slice, &mut rng))?;
        let o = slice::from_raw_parts_mut(out, out_len);
        for (dst, s) in o.chunks_mut(len.max(1)).zip(&est) {
            dst.copy_from_slice(s);
        }
        Ok(())
    })
}

/// Scale-invariant SNR in dB of `est` against `target`, both of length `len`.
///
/// # Safety
/// Pointers must be valid for `len` values; `out_db` for one.
#[no_mangle]
pub unsafe extern "C" fn casnet_si_snr(est: *const f64, target: *const f64, len: usize, out_db: *mut f64) -> CasnetStatus {
    guard(|| {
        if est.is_null() || target.is_null() || out_db.is_null() {
            return Err(fail(CasnetStatus::NullPointer, "null argument"));
        }
        let v = lift(si_snr_db(slice::from_raw_parts(est, len), slice::from_raw_parts(target, len)))?;
        *out_db = v;
        Ok(())
    })
}
