use std::ffi::{CStr, CString};
use std::ptr;

use ccnn::arch::{build_network, NetworkSpec};
use ccnn::cascade::{cascade_infer, CascadePolicy};
use ccnn::model_file::save_model;
use ccnn_ffi::*;

fn saved_model(dir: &tempfile::TempDir) -> (CString, ccnn::arch::Network<f32>) {
    let net = build_network(&NetworkSpec::hccr(5, 8, true).unwrap(), 4).unwrap();
    let path = dir.path().join("m.ccnn");
    save_model(&path, &net, None).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), net)
}

fn last_error() -> String {
    let p = ccnn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn image(seed: u32) -> Vec<f32> {
    (0..64 * 64u32).map(|i| (i.wrapping_mul(2654435761) ^ seed) % 1000).map(|v| v as f32 / 1000.0).collect()
}

#[test]
fn load_infer_free() {
    let dir = tempfile::tempdir().unwrap();
    let (path, net) = saved_model(&dir);
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(ccnn_model_load(path.as_ptr(), &mut model), CcnnStatus::Ok);
        assert!(!model.is_null());
        assert!(ccnn_last_error().is_null());

        let mut info = CcnnModelInfo::default();
        assert_eq!(ccnn_model_info(model, &mut info), CcnnStatus::Ok);
        assert_eq!((info.input_size, info.num_classes, info.num_heads), (64, 5, 3));

        let img = image(1);
        let mut res = CcnnCascadeResult::default();
        assert_eq!(ccnn_cascade_infer(model, img.as_ptr(), img.len(), 0.0, 1, &mut res), CcnnStatus::Ok);
        assert_eq!(res.early_exit, 1);
        let t = ccnn::Tensor::new(&[1, 64, 64], img.clone()).unwrap();
        let direct = cascade_infer(&t, &net, &CascadePolicy::with_threshold(0.0)).unwrap();
        assert_eq!(res.predicted_class as usize, direct.predicted);
        assert_eq!(res.macs, direct.macs);

        let mut logits = [0f32; 5];
        let head = CString::new("final").unwrap();
        assert_eq!(
            ccnn_head_logits(model, head.as_ptr(), img.as_ptr(), img.len(), logits.as_mut_ptr(), 5),
            CcnnStatus::Ok
        );
        let x = ccnn::Tensor::new(&[1, 1, 64, 64], img).unwrap();
        assert_eq!(&logits[..], net.infer_logits_for(&x, &["final"]).unwrap()["final"].data());

        ccnn_model_free(model);
        ccnn_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_reported() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/no/such/model.ccnn").unwrap();
    unsafe {
        assert_eq!(ccnn_model_load(missing.as_ptr(), &mut model), CcnnStatus::Io);
        assert!(model.is_null());
        assert!(last_error().contains("/no/such/model.ccnn"));

        assert_eq!(ccnn_model_load(ptr::null(), &mut model), CcnnStatus::NullPointer);
        let junk = [0u8; 32];
        assert_eq!(ccnn_model_load_bytes(junk.as_ptr(), junk.len(), &mut model), CcnnStatus::Format);

        let mut info = CcnnModelInfo::default();
        assert_eq!(ccnn_model_info(ptr::null(), &mut info), CcnnStatus::NullPointer);
    }
}

#[test]
fn bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(&dir);
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(ccnn_model_load(path.as_ptr(), &mut model), CcnnStatus::Ok);
        let img = image(2);
        let mut res = CcnnCascadeResult::default();
        assert_eq!(ccnn_cascade_infer(model, img.as_ptr(), 10, 0.5, 1, &mut res), CcnnStatus::Dimension);
        assert_eq!(ccnn_cascade_infer(model, img.as_ptr(), img.len(), -1.0, 1, &mut res), CcnnStatus::InvalidArgument);

        let mut logits = [0f32; 2];
        let head = CString::new("final").unwrap();
        assert_eq!(
            ccnn_head_logits(model, head.as_ptr(), img.as_ptr(), img.len(), logits.as_mut_ptr(), 2),
            CcnnStatus::InvalidArgument
        );
        let bogus = CString::new("mid_c").unwrap();
        assert_eq!(
            ccnn_head_logits(model, bogus.as_ptr(), img.as_ptr(), img.len(), logits.as_mut_ptr(), 2),
            CcnnStatus::InvalidArgument
        );

        let mut q = ptr::null_mut();
        assert_eq!(ccnn_model_quantize(model, 8, 3, 8, &mut q), CcnnStatus::InvalidArgument);
        assert!(q.is_null());
        ccnn_model_free(model);
    }
}

#[test]
fn default_cost_figures() {
    let mut c = CcnnCostSummary::default();
    unsafe {
        assert_eq!(ccnn_default_cost(3755, &mut c), CcnnStatus::Ok);
    }
    assert_eq!(c.params, 5_352_705);
    assert_eq!((c.mid_a_macs, c.mid_b_macs, c.final_macs), (51_620_608, 65_822_848, 90_953_216));
    assert_eq!(c.float_bytes, 5_352_705.0 * 4.0);
    assert!(c.quantized_bytes < c.float_bytes / 6.0);
}

#[test]
fn quantize_and_save() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(&dir);
    let out = CString::new(dir.path().join("q.ccnn").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    let mut q = ptr::null_mut();
    let mut bytes = 0.0;
    unsafe {
        assert_eq!(ccnn_model_load(path.as_ptr(), &mut model), CcnnStatus::Ok);
        assert_eq!(ccnn_model_quantize(model, 8, 4, 8, &mut q), CcnnStatus::Ok);
        assert_eq!(ccnn_model_save_quantized(model, out.as_ptr(), 8, 4, 8, &mut bytes), CcnnStatus::Ok);
        let mut reloaded = ptr::null_mut();
        assert_eq!(ccnn_model_load(out.as_ptr(), &mut reloaded), CcnnStatus::Ok);
        // The in-memory quantized copy and the reloaded file agree.
        let img = image(3);
        let head = CString::new("mid_a").unwrap();
        let (mut a, mut b) = ([0f32; 5], [0f32; 5]);
        ccnn_head_logits(q, head.as_ptr(), img.as_ptr(), img.len(), a.as_mut_ptr(), 5);
        ccnn_head_logits(reloaded, head.as_ptr(), img.as_ptr(), img.len(), b.as_mut_ptr(), 5);
        assert_eq!(a, b);
        ccnn_model_free(reloaded);
        ccnn_model_free(q);
        ccnn_model_free(model);
    }
    assert!(bytes > 0.0);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(ccnn_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/ccnn.h");
    for name in [
        "ccnn_last_error",
        "ccnn_version",
        "ccnn_model_load",
        "ccnn_model_load_bytes",
        "ccnn_model_free",
        "ccnn_model_info",
        "ccnn_cascade_infer",
        "ccnn_head_logits",
        "ccnn_default_cost",
        "ccnn_model_quantize",
        "ccnn_model_save_quantized",
        "CCNN_STATUS_OK",
        "typedef struct CcnnModel CcnnModel;",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
