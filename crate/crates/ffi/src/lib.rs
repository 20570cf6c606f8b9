//! C ABI over the featureflow core.
//!
//! Bundles are opaque handles owned by the caller (`ff_bundle_free`).
//! Every fallible call returns an [`FfStatus`]; on failure the message is
//! available from [`ff_last_error`] on the same thread. Strings handed out
//! by this library must be released with [`ff_string_free`]. Panics never
//! cross the boundary; they surface as `FF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use featureflow::flowgraph::ExportFormat;
use featureflow::gateway::{flow_artifact, generate_text, FlowRequest, GenerateRequest};
use featureflow::matching::{match_top_k, DEFAULT_BLOCK};
use featureflow::tensors::{load_bundle, ModelBundle, Site, SitePosition};
use featureflow::toymodel::{synth_planted_bundle, PlantedConfig, SamplerConfig};
use featureflow::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NotFound = 4,
    Io = 5,
    BufferSize = 6,
    Panic = 7,
}

pub const FF_SITE_RES: u32 = 0;
pub const FF_SITE_MLP: u32 = 1;
pub const FF_SITE_ATT: u32 = 2;

/// Opaque handle to a loaded bundle.
pub struct FfBundle {
    inner: ModelBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> FfStatus {
    match e {
        Error::Io { .. } | Error::MissingFile(_) | Error::Manifest(_) => FfStatus::Io,
        Error::MissingDictionary(_) | Error::OutOfRange { .. } => FfStatus::NotFound,
        _ => FfStatus::InvalidArgument,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (FfStatus, String)>) -> FfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FfStatus::Panic
        }
    }
}

fn core(e: Error) -> (FfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FfStatus, String) {
    (FfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: the caller passes a NUL-terminated string that outlives the call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (FfStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn bundle_ref<'a>(b: *const FfBundle) -> Result<&'a ModelBundle, (FfStatus, String)> {
    if b.is_null() {
        return Err(null("bundle"));
    }
    // SAFETY: non-null handles come from ff_bundle_load / ff_bundle_synth.
    Ok(unsafe { &(*b).inner })
}

fn site_of(site: u32) -> Result<Site, (FfStatus, String)> {
    match site {
        FF_SITE_RES => Ok(Site::Res),
        FF_SITE_MLP => Ok(Site::Mlp),
        FF_SITE_ATT => Ok(Site::Att),
        other => Err((FfStatus::InvalidArgument, format!("unknown site code {other}"))),
    }
}

fn into_c_string(bytes: Vec<u8>) -> Result<*mut c_char, (FfStatus, String)> {
    CString::new(bytes)
        .map(CString::into_raw)
        .map_err(|_| (FfStatus::InvalidArgument, "output contains a NUL byte".to_owned()))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn ff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a bundle directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_bundle_load(path: *const c_char, out: *mut *mut FfBundle) -> FfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { read_str(path, "path") }?;
        let inner = load_bundle(Path::new(path)).map_err(core)?;
        unsafe { *out = Box::into_raw(Box::new(FfBundle { inner })) };
        Ok(())
    })
}

/// Build the default planted toy bundle for `seed` in memory.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_bundle_synth(seed: u64, out: *mut *mut FfBundle) -> FfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = PlantedConfig {
            seed,
            ..PlantedConfig::default()
        };
        let (inner, _) = synth_planted_bundle(&cfg).map_err(core)?;
        unsafe { *out = Box::into_raw(Box::new(FfBundle { inner })) };
        Ok(())
    })
}

/// Release a bundle. NULL is ignored.
///
/// # Safety
/// `bundle` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ff_bundle_free(bundle: *mut FfBundle) {
    if !bundle.is_null() {
        drop(unsafe { Box::from_raw(bundle) });
    }
}

/// # Safety
/// `bundle` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_bundle_layer_count(bundle: *const FfBundle, out: *mut usize) -> FfStatus {
    guard(|| {
        let b = unsafe { bundle_ref(bundle) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = b.layer_count };
        Ok(())
    })
}

/// # Safety
/// `bundle` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_bundle_model_dim(bundle: *const FfBundle, out: *mut usize) -> FfStatus {
    guard(|| {
        let b = unsafe { bundle_ref(bundle) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = b.model_dim };
        Ok(())
    })
}

/// Dictionary size at (`layer`, `site`).
///
/// # Safety
/// `bundle` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_bundle_n_features(bundle: *const FfBundle, layer: usize, site: u32, out: *mut usize) -> FfStatus {
    guard(|| {
        let b = unsafe { bundle_ref(bundle) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = b.dictionary(SitePosition::new(layer, site_of(site)?)).map_err(core)?;
        unsafe { *out = d.n_features() };
        Ok(())
    })
}

/// Top-1 cosine match of every source feature. `len` must equal the source
/// dictionary size; features without a match get index -1 and score NaN.
///
/// # Safety
/// `indices` and `scores` must each point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn ff_match_top1(
    bundle: *const FfBundle,
    src_layer: usize,
    src_site: u32,
    tgt_layer: usize,
    tgt_site: u32,
    indices: *mut i64,
    scores: *mut f64,
    len: usize,
) -> FfStatus {
    guard(|| {
        let b = unsafe { bundle_ref(bundle) }?;
        if indices.is_null() || scores.is_null() {
            return Err(null("output buffer"));
        }
        let src = b.dictionary(SitePosition::new(src_layer, site_of(src_site)?)).map_err(core)?;
        let tgt = b.dictionary(SitePosition::new(tgt_layer, site_of(tgt_site)?)).map_err(core)?;
        if len != src.n_features() {
            return Err((FfStatus::BufferSize, format!("buffers hold {len} entries, source has {}", src.n_features())));
        }
        let map = match_top_k(src, tgt, 1, DEFAULT_BLOCK).map_err(core)?;
        // SAFETY: the caller guarantees `len` writable elements in each buffer.
        let (idx, sc) = unsafe { (std::slice::from_raw_parts_mut(indices, len), std::slice::from_raw_parts_mut(scores, len)) };
        for i in 0..len {
            match map.top1(i) {
                Some((j, s)) => {
                    idx[i] = j as i64;
                    sc[i] = s;
                }
                None => {
                    idx[i] = -1;
                    sc[i] = f64::NAN;
                }
            }
        }
        Ok(())
    })
}

/// Flow graph of `seed_feature` (`layer:site:index`) as JSON, byte-identical
/// to the CLI and HTTP artifacts. Free `*out` with `ff_string_free`.
///
/// # Safety
/// `seed_feature` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_flow_graph_json(
    bundle: *const FfBundle,
    seed_feature: *const c_char,
    t_res: f64,
    t_module: f64,
    out: *mut *mut c_char,
) -> FfStatus {
    guard(|| {
        let b = unsafe { bundle_ref(bundle) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let req = FlowRequest {
            seed_feature: unsafe { read_str(seed_feature, "seed_feature") }?.to_owned(),
            t_res,
            t_module,
            format: ExportFormat::Json,
            run_id: None,
        };
        let bytes = flow_artifact(b, &req).map_err(core)?;
        unsafe { *out = into_c_string(bytes)? };
        Ok(())
    })
}

/// Unsteered continuation of `prompt` with the default sampler settings,
/// except `max_len`, `seed` and `greedy`. Free `*out` with `ff_string_free`.
///
/// # Safety
/// `prompt` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_generate(
    bundle: *const FfBundle,
    prompt: *const c_char,
    max_len: usize,
    seed: u64,
    greedy: bool,
    out: *mut *mut c_char,
) -> FfStatus {
    guard(|| {
        let b = unsafe { bundle_ref(bundle) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let req = GenerateRequest {
            prompt: unsafe { read_str(prompt, "prompt") }?.to_owned(),
            sampler: SamplerConfig {
                max_len,
                seed,
                greedy,
                ..SamplerConfig::default()
            },
        };
        let text = generate_text(b, &req).map_err(core)?.text;
        // generated bytes may include NUL; C strings cannot carry it
        unsafe { *out = into_c_string(text.replace('\0', "\u{FFFD}").into_bytes())? };
        Ok(())
    })
}

/// Release a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ff_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
