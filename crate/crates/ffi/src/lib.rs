//! C ABI over `shield-core`: load parameter bundles, compile them to
//! branch-free graphs, run the graphs, and the Welch t-test.
//!
//! Every fallible function returns a [`ShieldStatus`]. On failure the
//! message is available from [`shield_last_error`] on the same thread until
//! the next failing call. Handles are opaque and freed with their `_free`
//! function; passing NULL to a `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use shield_core::bundle::{load_bundle, BundleFile};
use shield_core::cli::graph_for;
use shield_core::graph::BranchFreeGraph;
use shield_core::training::SelectionMode;
use shield_core::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShieldStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Graph = 6,
    Panic = 7,
}

/// Selection mode of a bundle as reported by [`shield_bundle_info`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShieldMode {
    Baseline = 0,
    Modelwise = 1,
    Layerwise = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ShieldBundleInfo {
    pub mode: u32,
    pub model_count: usize,
    pub layer_count: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub quantized: bool,
}

/// A loaded parameter bundle.
pub struct ShieldBundle {
    file: BundleFile,
}

/// A compiled branch-free graph.
pub struct ShieldGraph {
    graph: BranchFreeGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> ShieldStatus {
    match err {
        Error::Shape(_) => ShieldStatus::Shape,
        Error::InvalidArgument(_) | Error::BitOutOfRange { .. } | Error::EmptyDataset | Error::Overflow(_) => {
            ShieldStatus::InvalidArgument
        }
        Error::Format { .. } | Error::Config(_) => ShieldStatus::Format,
        Error::Graph(_) => ShieldStatus::Graph,
        Error::File { .. } | Error::Io(_) => ShieldStatus::Io,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (ShieldStatus, String)>) -> ShieldStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ShieldStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ShieldStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (ShieldStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (ShieldStatus, String) {
    (ShieldStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (ShieldStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn shield_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a bundle file. On success `*out` owns a handle to release with
/// [`shield_bundle_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shield_bundle_load(path: *const c_char, out: *mut *mut ShieldBundle) -> ShieldStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (ShieldStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let file = load_bundle(Path::new(path)).map_err(core_err)?;
        *out = Box::into_raw(Box::new(ShieldBundle { file }));
        Ok(())
    })
}

/// # Safety
/// `bundle` must come from [`shield_bundle_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn shield_bundle_free(bundle: *mut ShieldBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// # Safety
/// `bundle` must be a live handle and `info` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shield_bundle_info(bundle: *const ShieldBundle, info: *mut ShieldBundleInfo) -> ShieldStatus {
    guard(|| {
        let b = bundle.as_ref().ok_or_else(|| null("bundle"))?;
        let info = info.as_mut().ok_or_else(|| null("info"))?;
        let bundle = &b.file.bundle;
        let arch = bundle.arch();
        *info = ShieldBundleInfo {
            mode: match bundle.mode() {
                SelectionMode::Baseline => ShieldMode::Baseline,
                SelectionMode::Modelwise => ShieldMode::Modelwise,
                SelectionMode::Layerwise => ShieldMode::Layerwise,
            } as u32,
            model_count: bundle.model_count(),
            layer_count: arch.layer_count(),
            input_dim: arch.input_dim(),
            output_dim: arch.output_dim(),
            quantized: b.file.quantized.is_some(),
        };
        Ok(())
    })
}

/// Compiles a bundle: the plain graph for baselines, the multiplexed graph
/// otherwise. Release the result with [`shield_graph_free`].
///
/// # Safety
/// `bundle` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shield_graph_compile(bundle: *const ShieldBundle, out: *mut *mut ShieldGraph) -> ShieldStatus {
    guard(|| {
        let b = bundle.as_ref().ok_or_else(|| null("bundle"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let graph = graph_for(&b.file.bundle).map_err(core_err)?;
        *out = Box::into_raw(Box::new(ShieldGraph { graph }));
        Ok(())
    })
}

/// # Safety
/// `graph` must come from [`shield_graph_compile`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn shield_graph_free(graph: *mut ShieldGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// # Safety
/// `graph` must be a live handle and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shield_graph_node_count(graph: *const ShieldGraph, count: *mut usize) -> ShieldStatus {
    guard(|| {
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        *count.as_mut().ok_or_else(|| null("count"))? = g.graph.node_count();
        Ok(())
    })
}

/// Number of ±1 selection inputs the graph expects.
///
/// # Safety
/// `graph` must be a live handle and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shield_graph_selection_bits(graph: *const ShieldGraph, count: *mut usize) -> ShieldStatus {
    guard(|| {
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        *count.as_mut().ok_or_else(|| null("count"))? = g.graph.selection_bit_count();
        Ok(())
    })
}

/// Runs the graph on one image. `bits` holds one ±1 value per selection
/// input; `out` receives the class probabilities and must hold exactly
/// `out_len` = output dimension values.
///
/// # Safety
/// Pointers must reference arrays of the given lengths.
#[no_mangle]
pub unsafe extern "C" fn shield_graph_execute(
    graph: *const ShieldGraph,
    image: *const f32,
    image_len: usize,
    bits: *const f32,
    bits_len: usize,
    out: *mut f32,
    out_len: usize,
) -> ShieldStatus {
    guard(|| {
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        let image = slice(image, image_len, "image")?;
        let bits = slice(bits, bits_len, "bits")?;
        let result = g.graph.execute(&Tensor::vector(image.to_vec()), bits).map_err(core_err)?;
        if result.len() != out_len {
            return Err((ShieldStatus::Shape, format!("output has {} values, buffer {out_len}", result.len())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(result.data());
        Ok(())
    })
}

/// Text dump of the graph, one node per line. Release with
/// [`shield_string_free`].
///
/// # Safety
/// `graph` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shield_graph_dump(graph: *const ShieldGraph, out: *mut *mut c_char) -> ShieldStatus {
    guard(|| {
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = CString::new(g.graph.dump()).unwrap().into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn shield_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Per-point Welch t-scores. `a` is an `na × len` row-major matrix, `b` is
/// `nb × len`, and `out` receives `len` values.
///
/// # Safety
/// Pointers must reference arrays of the given sizes.
#[no_mangle]
pub unsafe extern "C" fn shield_welch_t(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    len: usize,
    out: *mut f64,
) -> ShieldStatus {
    guard(|| {
        if len == 0 {
            return Err((ShieldStatus::InvalidArgument, "trace length is zero".into()));
        }
        let cells =
            |n: usize| n.checked_mul(len).ok_or((ShieldStatus::InvalidArgument, "matrix size overflows".to_string()));
        let a = slice(a, cells(na)?, "a")?;
        let b = slice(b, cells(nb)?, "b")?;
        let rows = |m: &[f64]| m.chunks(len).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let t = shield_core::tvla::welch_t(&rows(a), &rows(b)).map_err(core_err)?;
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&t);
        Ok(())
    })
}

/// Hamming weight of an int8 value's two's-complement pattern.
#[no_mangle]
pub extern "C" fn shield_leak_value(q: i8) -> f32 {
    shield_core::leakage::leak_value(q)
}
