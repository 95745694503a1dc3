use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use sili_core::data::write_synthetic_fixture;
use sili_core::harness::{TrainConfig, Trainer};
use sili_core::image::ImageTensor;
use sili_core::synthesis::downsample;
use sili_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sili_last_error()) }.to_string_lossy().into_owned()
}

fn rgb_bytes(img: &ImageTensor) -> Vec<u8> {
    img.data().iter().map(|&v| (v * 255.0).round() as u8).collect()
}

/// One epoch on the fixture, returning the last checkpoint.
fn checkpoint(root: &Path) -> PathBuf {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", "fixture_sili.toml"].iter().collect();
    let mut cfg = TrainConfig::load(path).unwrap();
    cfg.dataset = root.join("data");
    cfg.output_dir = root.join("out");
    cfg.epochs = 1;
    write_synthetic_fixture(&cfg.dataset, 8, 64, 0).unwrap();
    Trainer::new(cfg).unwrap().run().unwrap();
    root.join("out").join("last")
}

#[test]
fn load_predict_free_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let c_dir = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { sili_model_load(c_dir.as_ptr(), &mut model) }, SiliStatus::Ok, "{}", last_error());
    assert!(!model.is_null());

    let pre = ImageTensor::load_png(dir.path().join("data/A/synthetic_000.png")).unwrap();
    let post = ImageTensor::load_png(dir.path().join("data/B/synthetic_000.png")).unwrap();
    let lr = downsample(&post, 4.0).unwrap();
    let (pa, pb) = (rgb_bytes(&pre), rgb_bytes(&lr));
    let mut mask = vec![7u8; 64 * 64];
    let status = unsafe {
        sili_model_predict(model, pa.as_ptr(), 64, 64, pb.as_ptr(), lr.height(), lr.width(), 0.0, mask.as_mut_ptr(), mask.len())
    };
    assert_eq!(status, SiliStatus::Ok, "{}", last_error());
    assert!(mask.iter().all(|&v| v <= 1));

    // Same bytes through the core API.
    let a = ImageTensor::new(64, 64, 3, pa.iter().map(|&b| f32::from(b) / 255.0).collect()).unwrap();
    let b = ImageTensor::new(lr.height(), lr.width(), 3, pb.iter().map(|&b| f32::from(b) / 255.0).collect()).unwrap();
    let expect = sili_core::harness::checkpoint::load(&ckpt)
        .unwrap()
        .build_model()
        .unwrap()
        .predict_pair(&a, &b, None)
        .unwrap();
    assert_eq!(mask, expect.data());

    let mut short = vec![0u8; 10];
    let status = unsafe {
        sili_model_predict(model, pa.as_ptr(), 64, 64, pb.as_ptr(), lr.height(), lr.width(), 4.0, short.as_mut_ptr(), short.len())
    };
    assert_eq!(status, SiliStatus::InvalidArgument);
    assert!(last_error().contains("mask_out"));
    unsafe { sili_model_free(model) };
}

#[test]
fn load_failures_report_status_and_message() {
    let mut model = 1usize as *mut SiliModel;
    let missing = CString::new("/nonexistent/ckpt").unwrap();
    let status = unsafe { sili_model_load(missing.as_ptr(), &mut model) };
    assert_ne!(status, SiliStatus::Ok);
    assert!(model.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { sili_model_load(ptr::null(), &mut model) }, SiliStatus::NullPointer);
    assert_eq!(unsafe { sili_model_load(missing.as_ptr(), ptr::null_mut()) }, SiliStatus::NullPointer);
    unsafe { sili_model_free(ptr::null_mut()) };

    let mut out = [0u8; 4];
    let status = unsafe { sili_model_predict(ptr::null(), ptr::null(), 1, 1, ptr::null(), 1, 1, 1.0, out.as_mut_ptr(), 4) };
    assert_eq!(status, SiliStatus::NullPointer);
    assert_eq!(last_error(), "model is null");
}

#[test]
fn confusion_and_metrics() {
    let pred = [1u8, 1, 0, 0, 1, 0];
    let gt = [1u8, 0, 1, 0, 1, 0];
    let mut c = SiliConfusion::default();
    assert_eq!(unsafe { sili_confusion(pred.as_ptr(), gt.as_ptr(), 6, &mut c) }, SiliStatus::Ok);
    assert_eq!(c, SiliConfusion { tp: 2, fp: 1, fn_: 1, tn: 2 });
    assert_eq!(last_error(), "");

    let mut m = SiliMetrics::default();
    assert_eq!(unsafe { sili_metrics(&c, &mut m) }, SiliStatus::Ok);
    assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
    assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
    assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
    assert!((m.iou - 0.5).abs() < 1e-12);
    assert!((m.oa - 4.0 / 6.0).abs() < 1e-12);

    let bad = [2u8, 0, 0, 0, 0, 0];
    assert_eq!(unsafe { sili_confusion(bad.as_ptr(), gt.as_ptr(), 6, &mut c) }, SiliStatus::InvalidArgument);
    assert!(last_error().contains("pred[0]"));
    assert_eq!(unsafe { sili_metrics(ptr::null(), &mut m) }, SiliStatus::NullPointer);
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(sili_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header: PathBuf = [env!("CARGO_MANIFEST_DIR"), "include", "sili.h"].iter().collect();
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["sili_model_load", "sili_model_predict", "sili_model_free", "sili_confusion", "sili_metrics", "sili_last_error"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler; skipping compile check");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        "#include \"sili.h\"\n\
         int main(void) {\n\
           SiliModel *m = 0;\n\
           SiliConfusion c = {0};\n\
           SiliMetrics r;\n\
           SiliStatus s = sili_model_load(\"x\", &m);\n\
           s = sili_metrics(&c, &r);\n\
           sili_model_free(m);\n\
           return s == SILI_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let out = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
