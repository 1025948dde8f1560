use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use convexcert::{FeatureConvexClassifier, FeatureMap, IcnnParams, IcnnSpec, Norm, Tensor};
use convexcert_ffi::*;

fn saved_model(dir: &Path) -> (CString, FeatureConvexClassifier) {
    let spec = IcnnSpec::new(8, vec![6, 4], true, 11).unwrap();
    let icnn = IcnnParams::init(&spec).unwrap();
    let mu = Tensor::vector(vec![0.5; 4]).unwrap();
    let clf = FeatureConvexClassifier::new(FeatureMap::concat(mu).unwrap(), icnn, 0.25).unwrap();
    let path = dir.join("m.ccm");
    convexcert::model_io::save_classifier(&clf, &path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), clf)
}

fn load(path: &CString) -> *mut CcClassifier {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { cc_classifier_load(path.as_ptr(), &mut h) }, CcStatus::Ok);
    assert!(!h.is_null());
    h
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cc_last_error_message()) }.to_str().unwrap().to_owned()
}

#[test]
fn matches_the_library_through_the_handle() {
    let dir = tempfile::tempdir().unwrap();
    let (path, clf) = saved_model(dir.path());
    let h = load(&path);
    let mut dim = 0usize;
    assert_eq!(unsafe { cc_classifier_input_dim(h, &mut dim) }, CcStatus::Ok);
    assert_eq!(dim, 4);

    for x in [[0.1f32, 0.9, 0.3, 0.7], [0.5, 0.5, 0.5, 0.5], [1.0, 0.0, 0.0, 1.0]] {
        let t = Tensor::vector(x.to_vec()).unwrap();
        let mut class = 0u8;
        let mut s = 0f32;
        let st = unsafe { cc_classifier_predict(h, x.as_ptr(), 4, &mut class, &mut s) };
        assert_eq!(st, CcStatus::Ok);
        assert_eq!(s.to_bits(), clf.shifted_logit(&t).unwrap().to_bits());
        assert_eq!(class, clf.predict(&t).unwrap().as_u8());
        for (code, p) in [(CC_NORM_L1, Norm::L1), (CC_NORM_L2, Norm::L2), (CC_NORM_LINF, Norm::Linf)] {
            let mut r = -1.0;
            assert_eq!(unsafe { cc_classifier_certify(h, x.as_ptr(), 4, code, &mut r) }, CcStatus::Ok);
            let want = clf.certify(&t, &[p]).unwrap().radius(p).unwrap();
            assert_eq!(r.to_bits(), want.to_bits());
        }
    }
    unsafe { cc_classifier_free(h) };
}

#[test]
fn tau_round_trips_through_save() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(dir.path());
    let h = load(&path);
    let mut tau = 0f32;
    assert_eq!(unsafe { cc_classifier_tau(h, &mut tau) }, CcStatus::Ok);
    assert_eq!(tau, 0.25);
    assert_eq!(unsafe { cc_classifier_set_tau(h, -1.5) }, CcStatus::Ok);
    assert_eq!(unsafe { cc_classifier_set_tau(h, f32::NAN) }, CcStatus::InvalidArgument);

    let out = CString::new(dir.path().join("n.ccm").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cc_classifier_save(h, out.as_ptr()) }, CcStatus::Ok);
    let h2 = load(&out);
    assert_eq!(unsafe { cc_classifier_tau(h2, &mut tau) }, CcStatus::Ok);
    assert_eq!(tau, -1.5);
    unsafe {
        cc_classifier_free(h);
        cc_classifier_free(h2);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = ptr::null_mut();
    let missing = CString::new(dir.path().join("nope.ccm").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cc_classifier_load(missing.as_ptr(), &mut h) }, CcStatus::Io);
    assert!(h.is_null());
    assert!(!last_error().is_empty());

    let junk = dir.path().join("junk.ccm");
    std::fs::write(&junk, b"not a model at all").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    let st = unsafe { cc_classifier_load(junk.as_ptr(), &mut h) };
    assert!(matches!(st, CcStatus::Format | CcStatus::Version), "{st:?}");

    assert_eq!(unsafe { cc_classifier_load(ptr::null(), &mut h) }, CcStatus::NullPointer);
    assert_eq!(unsafe { cc_classifier_load(missing.as_ptr(), ptr::null_mut()) }, CcStatus::NullPointer);

    let (path, _) = saved_model(dir.path());
    let h = load(&path);
    assert!(last_error().is_empty());
    let x = [0.0f32; 3];
    let mut r = 0.0;
    assert_eq!(unsafe { cc_classifier_certify(h, x.as_ptr(), 3, CC_NORM_L2, &mut r) }, CcStatus::Shape);
    assert_eq!(unsafe { cc_classifier_certify(h, x.as_ptr(), 3, 7, &mut r) }, CcStatus::UnsupportedNorm);
    assert_eq!(unsafe { cc_classifier_certify(h, ptr::null(), 4, CC_NORM_L2, &mut r) }, CcStatus::NullPointer);
    assert_eq!(unsafe { cc_classifier_predict(ptr::null(), x.as_ptr(), 3, ptr::null_mut(), ptr::null_mut()) }, CcStatus::NullPointer);
    unsafe {
        cc_classifier_free(h);
        cc_classifier_free(ptr::null_mut());
    }
}

#[test]
fn free_functions() {
    let v = [3.0f32, -4.0];
    let mut out = 0.0;
    assert_eq!(unsafe { cc_dual_norm(v.as_ptr(), 2, CC_NORM_L1, &mut out) }, CcStatus::Ok);
    assert_eq!(out, 4.0);
    assert_eq!(unsafe { cc_dual_norm(v.as_ptr(), 2, CC_NORM_L2, &mut out) }, CcStatus::Ok);
    assert_eq!(out, 5.0);
    assert_eq!(unsafe { cc_dual_norm(v.as_ptr(), 2, CC_NORM_LINF, &mut out) }, CcStatus::Ok);
    assert_eq!(out, 7.0);

    assert_eq!(unsafe { cc_separability_bound(2, 2, 1, &mut out) }, CcStatus::Ok);
    assert!((out - 1.0 / 6.0).abs() < 1e-12);
    assert_eq!(unsafe { cc_separability_bound(2, 2, 4, &mut out) }, CcStatus::Ok);
    assert_eq!(out, 1.0);
    assert_eq!(unsafe { cc_separability_bound(0, 2, 4, &mut out) }, CcStatus::InvalidArgument);

    let v = unsafe { CStr::from_ptr(cc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_exports() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/convexcert.h")).unwrap();
    for name in [
        "cc_classifier_load",
        "cc_classifier_free",
        "cc_classifier_save",
        "cc_classifier_input_dim",
        "cc_classifier_tau",
        "cc_classifier_set_tau",
        "cc_classifier_predict",
        "cc_classifier_certify",
        "cc_dual_norm",
        "cc_separability_bound",
        "cc_last_error_message",
        "cc_version",
        "typedef struct CcClassifier CcClassifier",
        "CC_STATUS_OK = 0",
        "CC_NORM_LINF 3",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/convexcert.h");
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    assert!(status.success());
}
