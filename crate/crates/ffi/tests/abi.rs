use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use lightgc2n_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = lgc2n_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn small_config(epochs: &str) -> *mut Lgc2nConfig {
    let cfg = lgc2n_config_new();
    for (k, v) in [("accounts", "12"), ("items", "40"), ("pool_size", "8"), ("epochs", epochs)] {
        assert_eq!(unsafe { lgc2n_config_set(cfg, c(k).as_ptr(), c(v).as_ptr()) }, Lgc2nStatus::Ok);
    }
    cfg
}

#[test]
fn config_errors_are_reported() {
    let cfg = lgc2n_config_new();
    unsafe {
        assert_eq!(lgc2n_config_set(cfg, c("alpha").as_ptr(), c("zero").as_ptr()), Lgc2nStatus::Config);
        assert!(last_error().contains("alpha"));
        assert_eq!(lgc2n_config_set(cfg, c("nope").as_ptr(), c("1").as_ptr()), Lgc2nStatus::Config);
        assert_eq!(lgc2n_config_set(cfg, ptr::null(), c("1").as_ptr()), Lgc2nStatus::NullPointer);
        let bad = [0xffu8, 0];
        assert_eq!(lgc2n_config_set(cfg, bad.as_ptr().cast(), c("1").as_ptr()), Lgc2nStatus::InvalidString);
        assert_eq!(lgc2n_config_set(cfg, c("alpha").as_ptr(), c("3").as_ptr()), Lgc2nStatus::Ok);
        assert!(lgc2n_last_error().is_null());
        lgc2n_config_free(cfg);
        lgc2n_config_free(ptr::null_mut());
    }
}

#[test]
fn train_evaluate_score_round_trip() {
    let cfg = small_config("2");
    unsafe {
        let mut data = ptr::null_mut();
        assert_eq!(lgc2n_dataset_synthetic(cfg, &mut data), Lgc2nStatus::Ok);
        let mut shape = Lgc2nDatasetShape::default();
        assert_eq!(lgc2n_dataset_shape(data, &mut shape), Lgc2nStatus::Ok);
        assert_eq!((shape.items, shape.accounts), (40, 12));
        assert!(shape.test_sequences > 0);

        let mut model = ptr::null_mut();
        assert_eq!(lgc2n_model_train(cfg, data, &mut model), Lgc2nStatus::Ok);
        let mut count = 0usize;
        assert_eq!(lgc2n_model_parameter_count(model, &mut count), Lgc2nStatus::Ok);
        assert!(count > 0);

        let mut metrics = Lgc2nMetrics::default();
        assert_eq!(lgc2n_model_evaluate(model, data, &mut metrics), Lgc2nStatus::Ok);
        assert_eq!(metrics.evaluated, shape.test_sequences);
        assert!(metrics.mrr_5 <= metrics.recall_5 && metrics.recall_5 <= metrics.recall_20);

        let mut scores = vec![0.0; shape.items];
        assert_eq!(lgc2n_model_scores(model, data, 0, scores.as_mut_ptr(), scores.len()), Lgc2nStatus::Ok);
        assert!(scores.iter().all(|s| s.is_finite()));
        assert_eq!(lgc2n_model_scores(model, data, 0, scores.as_mut_ptr(), 3), Lgc2nStatus::BufferSize);
        assert_eq!(
            lgc2n_model_scores(model, data, usize::MAX, scores.as_mut_ptr(), scores.len()),
            Lgc2nStatus::Data
        );

        let dir = tempfile::tempdir().unwrap();
        let path = c(dir.path().join("m.ckpt").to_str().unwrap());
        assert_eq!(lgc2n_model_save(model, path.as_ptr()), Lgc2nStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(lgc2n_model_load(path.as_ptr(), &mut back), Lgc2nStatus::Ok);
        let mut again = Lgc2nMetrics::default();
        assert_eq!(lgc2n_model_evaluate(back, data, &mut again), Lgc2nStatus::Ok);
        assert_eq!(metrics, again);

        lgc2n_model_free(back);
        lgc2n_model_free(model);
        lgc2n_dataset_free(data);
        lgc2n_config_free(cfg);
    }
}

#[test]
fn load_and_compatibility_errors() {
    let cfg = small_config("0");
    unsafe {
        let mut data = ptr::null_mut();
        let missing = c("/nonexistent/interactions.tsv");
        assert_eq!(lgc2n_dataset_load(cfg, missing.as_ptr(), &mut data), Lgc2nStatus::Data);
        assert!(last_error().contains("/nonexistent/interactions.tsv"));
        assert!(data.is_null());

        assert_eq!(lgc2n_dataset_synthetic(cfg, &mut data), Lgc2nStatus::Ok);
        let mut model = ptr::null_mut();
        assert_eq!(lgc2n_model_train(cfg, data, &mut model), Lgc2nStatus::Ok);

        let other_cfg = small_config("0");
        assert_eq!(lgc2n_config_set(other_cfg, c("items").as_ptr(), c("48").as_ptr()), Lgc2nStatus::Ok);
        let mut other = ptr::null_mut();
        assert_eq!(lgc2n_dataset_synthetic(other_cfg, &mut other), Lgc2nStatus::Ok);
        let mut metrics = Lgc2nMetrics::default();
        assert_eq!(lgc2n_model_evaluate(model, other, &mut metrics), Lgc2nStatus::Incompatible);
        assert_eq!(lgc2n_model_train(cfg, data, ptr::null_mut()), Lgc2nStatus::NullPointer);
        assert_eq!(lgc2n_model_evaluate(ptr::null(), data, &mut metrics), Lgc2nStatus::NullPointer);

        lgc2n_model_free(model);
        lgc2n_dataset_free(other);
        lgc2n_dataset_free(data);
        lgc2n_config_free(other_cfg);
        lgc2n_config_free(cfg);
    }
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let here = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib_dir = target_dir();
    if !lib_dir.join("liblightgc2n_ffi.so").exists() {
        panic!("shared library not found in {}", lib_dir.display());
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg(here.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(here.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .arg("-llightgc2n_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .expect("cc runs");
    assert!(status.success());
    let out = Command::new(&exe).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.starts_with("items=40 "), "{stdout}");
}
