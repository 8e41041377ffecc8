//! C ABI over the `ccnn` engine.
//!
//! Every fallible call returns a [`CcnnStatus`]; on failure a message is
//! available from [`ccnn_last_error`] on the same thread. Models are opaque
//! handles created by `ccnn_model_load*` and released with [`ccnn_model_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ccnn::arch::{Network, NetworkSpec, FINAL_HEAD, MID_A, MID_B};
use ccnn::cascade::{Cascade, CascadePolicy, ExitPoint};
use ccnn::cost::network_cost;
use ccnn::model_file::{load_model, save_model, ModelFile};
use ccnn::quant::{fake_quantize, quantized_storage, QuantScheme};
use ccnn::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed or unsupported file contents.
    Format = 4,
    Dimension = 5,
    Usage = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

/// Opaque model handle.
pub struct CcnnModel {
    net: Network<f32>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CcnnModelInfo {
    pub input_size: u32,
    pub input_channels: u32,
    pub num_classes: u32,
    /// 1 for a final-head-only network, 3 with both branches.
    pub num_heads: u32,
    pub param_count: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CcnnCascadeResult {
    pub predicted_class: u32,
    /// Non-zero when the sample left at the gating branch.
    pub early_exit: u8,
    pub confidence: f64,
    pub macs: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CcnnCostSummary {
    pub params: u64,
    pub mid_a_macs: u64,
    pub mid_b_macs: u64,
    pub final_macs: u64,
    /// Every layer including both branches.
    pub total_macs: u64,
    /// Storage in bytes at 32-bit floats.
    pub float_bytes: f64,
    /// Storage in bytes under the 8/4/8 scheme.
    pub quantized_bytes: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CcnnStatus {
    match e {
        Error::Io(_) => CcnnStatus::Io,
        Error::Dimension(_) => CcnnStatus::Dimension,
        Error::Usage(_) => CcnnStatus::Usage,
        Error::Param(_) | Error::Spec(_) | Error::Accounting(_) => CcnnStatus::InvalidArgument,
        Error::Data(_)
        | Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::CountMismatch { .. }
        | Error::CorruptRecord { .. }
        | Error::VersionMismatch { .. }
        | Error::Checksum { .. }
        | Error::UnknownEncoding(_)
        | Error::Json(_) => CcnnStatus::Format,
        Error::Diverged { .. } => CcnnStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into a status and error message.
fn guard(f: impl FnOnce() -> Result<(), (CcnnStatus, String)>) -> CcnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CcnnStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CcnnStatus::Internal
        }
    }
}

fn lift<T>(r: ccnn::Result<T>) -> Result<T, (CcnnStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CcnnStatus, String) {
    (CcnnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CcnnStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CcnnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const CcnnModel) -> Result<&'a CcnnModel, (CcnnStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn image_tensor(net: &Network<f32>, data: &[f32]) -> Result<Tensor<f32>, (CcnnStatus, String)> {
    let [c, h, w] = net.spec().input_shape();
    lift(Tensor::new(&[1, c, h, w], data.to_vec()))
}

fn scheme(conv: u8, fc: u8, gwap: u8) -> Result<QuantScheme, (CcnnStatus, String)> {
    let s = QuantScheme { conv_bits: conv, classifier_bits: fc, gwap_bits: gwap };
    lift(s.validate()).map(|_| s)
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ccnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn ccnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn ccnn_model_load(path: *const c_char, out: *mut *mut CcnnModel) -> CcnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let net = lift(load_model(Path::new(path)).and_then(|f| f.to_network()))?;
        *out = Box::into_raw(Box::new(CcnnModel { net }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ccnn_model_load_bytes(data: *const u8, len: usize, out: *mut *mut CcnnModel) -> CcnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if data.is_null() {
            return Err(null("data"));
        }
        let bytes = std::slice::from_raw_parts(data, len);
        let net = lift(ModelFile::from_bytes(bytes).and_then(|f| f.to_network()))?;
        *out = Box::into_raw(Box::new(CcnnModel { net }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ccnn_model_free(model: *mut CcnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ccnn_model_info(model: *const CcnnModel, out: *mut CcnnModelInfo) -> CcnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let spec = m.net.spec();
        *out = CcnnModelInfo {
            input_size: spec.input_size as u32,
            input_channels: spec.input_channels as u32,
            num_classes: spec.num_classes as u32,
            num_heads: spec.head_names().len() as u32,
            param_count: m.net.params().scalar_count() as u64,
        };
        Ok(())
    })
}

/// Classifies one image of `input_channels * input_size^2` floats in `[0, 1]`.
/// The gate is the first branch; `fuse_late` non-zero averages the second
/// branch with the final head on the late path.
#[no_mangle]
pub unsafe extern "C" fn ccnn_cascade_infer(
    model: *const CcnnModel,
    image: *const f32,
    len: usize,
    threshold: f64,
    fuse_late: u8,
    out: *mut CcnnCascadeResult,
) -> CcnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if image.is_null() {
            return Err(null("image"));
        }
        let x = image_tensor(&m.net, std::slice::from_raw_parts(image, len))?;
        let policy = CascadePolicy { threshold, exit_head: MID_A.to_string(), fuse_late: fuse_late != 0 };
        let r = lift(Cascade::new(&m.net, policy).and_then(|c| c.infer(&x)))?.remove(0);
        *out = CcnnCascadeResult {
            predicted_class: r.predicted as u32,
            early_exit: (r.exit == ExitPoint::Early) as u8,
            confidence: r.confidence,
            macs: r.macs,
        };
        Ok(())
    })
}

/// Writes `num_classes` logits of `head` ("mid_a", "mid_b" or "final") into `out`.
#[no_mangle]
pub unsafe extern "C" fn ccnn_head_logits(
    model: *const CcnnModel,
    head: *const c_char,
    image: *const f32,
    len: usize,
    out: *mut f32,
    out_len: usize,
) -> CcnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let head = match str_arg(head, "head")? {
            h @ (MID_A | MID_B | FINAL_HEAD) => h,
            other => return Err((CcnnStatus::InvalidArgument, format!("unknown head {other:?}"))),
        };
        if image.is_null() {
            return Err(null("image"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let k = m.net.spec().num_classes;
        if out_len < k {
            return Err((CcnnStatus::InvalidArgument, format!("output buffer holds {out_len} floats, need {k}")));
        }
        let x = image_tensor(&m.net, std::slice::from_raw_parts(image, len))?;
        let logits = lift(m.net.infer_logits_for(&x, &[head]))?;
        let row = logits[head].data();
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(row);
        Ok(())
    })
}

/// Analytic cost of the full-width cascaded network for `num_classes`.
#[no_mangle]
pub unsafe extern "C" fn ccnn_default_cost(num_classes: u32, out: *mut CcnnCostSummary) -> CcnnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let spec = lift(NetworkSpec::cascaded(num_classes as usize))?;
        let float = lift(network_cost(&spec, Some(&QuantScheme::float32())))?;
        let quant = lift(network_cost(&spec, Some(&QuantScheme::default())))?;
        let exit = |name: &str| float.exit(name).map_or(0, |e| e.macs);
        *out = CcnnCostSummary {
            params: float.total_params(),
            mid_a_macs: exit(MID_A),
            mid_b_macs: exit(MID_B),
            final_macs: exit(FINAL_HEAD),
            total_macs: float.total_macs(),
            float_bytes: float.storage.as_ref().map_or(0.0, |s| s.total_bytes()),
            quantized_bytes: quant.storage.as_ref().map_or(0.0, |s| s.total_bytes()),
        };
        Ok(())
    })
}

/// Creates a new handle whose weights are quantized then dequantized with
/// the given bit widths (2, 4, 8, 16 or 32 for float).
#[no_mangle]
pub unsafe extern "C" fn ccnn_model_quantize(
    model: *const CcnnModel,
    conv_bits: u8,
    fc_bits: u8,
    gwap_bits: u8,
    out: *mut *mut CcnnModel,
) -> CcnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = scheme(conv_bits, fc_bits, gwap_bits)?;
        let params = lift(fake_quantize(m.net.params(), &s))?;
        let net = lift(Network::new(m.net.spec().clone(), params))?;
        *out = Box::into_raw(Box::new(CcnnModel { net }));
        Ok(())
    })
}

/// Writes the model to `path` quantized with the given bit widths.
/// `storage_bytes`, if non-null, receives the analytic weight storage.
#[no_mangle]
pub unsafe extern "C" fn ccnn_model_save_quantized(
    model: *const CcnnModel,
    path: *const c_char,
    conv_bits: u8,
    fc_bits: u8,
    gwap_bits: u8,
    storage_bytes: *mut f64,
) -> CcnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = str_arg(path, "path")?;
        let s = scheme(conv_bits, fc_bits, gwap_bits)?;
        lift(save_model(Path::new(path), &m.net, Some(&s)))?;
        if let Some(b) = storage_bytes.as_mut() {
            *b = lift(quantized_storage(m.net.params(), &s))?.total_bytes();
        }
        Ok(())
    })
}
