use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use narvid_ffi::*;

fn spec(seed: u64) -> NarvidPlantSpec {
    NarvidPlantSpec { episodes: 12, frames: 6, words: 4, dim: 16, seed, signal: 1.0, corrupt: 0.0, overlap: 0.0 }
}

fn last_error() -> String {
    let p = narvid_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn generate(s: NarvidPlantSpec) -> *mut NarvidDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { narvid_dataset_generate(&s, &mut ds) }, NarvidStatus::Ok);
    ds
}

#[test]
fn zero_shot_round_trip() {
    let ds = generate(spec(3));
    unsafe {
        assert_eq!((narvid_dataset_len(ds), narvid_dataset_dim(ds)), (12, 16));
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("d.nrv").to_str().unwrap()).unwrap();
        assert_eq!(narvid_dataset_write(ds, path.as_ptr()), NarvidStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(narvid_dataset_read(path.as_ptr(), &mut back), NarvidStatus::Ok);
        assert_eq!(narvid_dataset_len(back), 12);

        let mut scores = ptr::null_mut();
        assert_eq!(narvid_scores_compute(ptr::null(), back, 0.4, 0.1, &mut scores), NarvidStatus::Ok);
        assert_eq!(narvid_scores_size(scores), 12);
        let mut report = NarvidReport::default();
        assert_eq!(
            narvid_scores_report(scores, NarvidFusionMode::Qv, NarvidDirection::T2v, &mut report),
            NarvidStatus::Ok
        );
        assert_eq!((report.r1, report.n), (100.0, 12));

        let mut buf = vec![0.0; 144];
        assert_eq!(narvid_scores_fuse(scores, NarvidFusionMode::Sum, buf.as_mut_ptr(), 10), NarvidStatus::Shape);
        assert_eq!(narvid_scores_fuse(scores, NarvidFusionMode::Sum, buf.as_mut_ptr(), 144), NarvidStatus::Ok);
        assert!(narvid_last_error().is_null());
        assert!(buf.iter().all(|v| v.is_finite()) && buf.iter().any(|&v| v != 0.0));

        narvid_scores_free(scores);
        narvid_dataset_free(back);
        narvid_dataset_free(ds);
    }
}

#[test]
fn train_save_load_and_score() {
    let ds = generate(NarvidPlantSpec { signal: 0.6, corrupt: 0.25, overlap: 0.25, ..spec(1) });
    let cfg = CString::new(r#"{"epochs": 2, "batch_size": 4, "heads": 2}"#).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(narvid_train(ds, cfg.as_ptr(), &mut model), NarvidStatus::Ok);
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(narvid_model_save(model, path.as_ptr()), NarvidStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(narvid_model_load(path.as_ptr(), &mut loaded), NarvidStatus::Ok);

        let mut a = ptr::null_mut();
        let mut b = ptr::null_mut();
        assert_eq!(narvid_scores_compute(model, ds, 0.4, 0.1, &mut a), NarvidStatus::Ok);
        assert_eq!(narvid_scores_compute(loaded, ds, 0.4, 0.1, &mut b), NarvidStatus::Ok);
        let (mut ra, mut rb) = (NarvidReport::default(), NarvidReport::default());
        narvid_scores_report(a, NarvidFusionMode::Standardized, NarvidDirection::V2t, &mut ra);
        narvid_scores_report(b, NarvidFusionMode::Standardized, NarvidDirection::V2t, &mut rb);
        assert_eq!(ra, rb);

        assert_eq!(narvid_scores_compute(model, ds, 1.5, 0.1, &mut a), NarvidStatus::Config);
        narvid_scores_free(a);
        narvid_scores_free(b);
        narvid_model_free(model);
        narvid_model_free(loaded);
        narvid_dataset_free(ds);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut ds = ptr::null_mut();
        let bad = NarvidPlantSpec { corrupt: 1.5, ..spec(0) };
        assert_eq!(narvid_dataset_generate(&bad, &mut ds), NarvidStatus::Usage);
        assert!(last_error().contains("corrupt"));
        assert!(ds.is_null());

        assert_eq!(narvid_dataset_generate(ptr::null(), &mut ds), NarvidStatus::NullPointer);
        assert_eq!(narvid_dataset_generate(&spec(0), ptr::null_mut()), NarvidStatus::NullPointer);

        let missing = CString::new("/nonexistent/narvid/d.nrv").unwrap();
        assert_eq!(narvid_dataset_read(missing.as_ptr(), &mut ds), NarvidStatus::Io);
        assert!(last_error().contains("/nonexistent/narvid/d.nrv"));

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.nrv");
        std::fs::write(&junk, b"not a container").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(narvid_dataset_read(junk.as_ptr(), &mut ds), NarvidStatus::Format);

        let gen = generate(spec(0));
        let cfg = CString::new(r#"{"batch_size": 64}"#).unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(narvid_train(gen, cfg.as_ptr(), &mut model), NarvidStatus::Usage);
        let cfg = CString::new(r#"{"tau": -1}"#).unwrap();
        assert_eq!(narvid_train(gen, cfg.as_ptr(), &mut model), NarvidStatus::Config);
        narvid_dataset_free(gen);

        assert_eq!((narvid_dataset_len(ptr::null()), narvid_scores_size(ptr::null())), (0, 0));
        narvid_dataset_free(ptr::null_mut());
        narvid_model_free(ptr::null_mut());
        narvid_scores_free(ptr::null_mut());
        assert_eq!(CStr::from_ptr(narvid_version()).to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("narvid.h")
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(header()).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(h.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in
        ["typedef struct NarvidDataset NarvidDataset;", "NARVID_STATUS_CORRUPTION = 9", "NARVID_FUSION_MODE_QN = 3"]
    {
        assert!(h.contains(ty), "{ty}");
    }
}

fn compiler() -> Option<&'static str> {
    ["cc", "clang", "gcc"].into_iter().find(|c| Command::new(c).arg("--version").output().is_ok())
}

#[test]
fn c_program_links_and_runs() {
    let cc = compiler().expect("a C compiler");
    // the static library sits next to the test binary's deps directory
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    let lib = lib_dir.join("libnarvid_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let c_src = dir.path().join("smoke.c");
    std::fs::write(
        &c_src,
        r#"
#include <stdio.h>
#include "narvid.h"

int main(void) {
    NarvidPlantSpec spec = {16, 6, 4, 16, 9, 1.0, 0.0, 0.0};
    NarvidDataset *ds = NULL;
    NarvidScores *scores = NULL;
    NarvidReport r;
    if (narvid_dataset_generate(&spec, &ds) != NARVID_STATUS_OK) return 1;
    if (narvid_scores_compute(NULL, ds, 0.4, 0.1, &scores) != NARVID_STATUS_OK) return 2;
    if (narvid_scores_report(scores, NARVID_FUSION_MODE_QV, NARVID_DIRECTION_T2V, &r) != NARVID_STATUS_OK) return 3;
    spec.signal = 2.0;
    if (narvid_dataset_generate(&spec, &ds) != NARVID_STATUS_USAGE) return 4;
    printf("%zu %.1f %s\n", r.n, r.r1, narvid_last_error() ? "err" : "none");
    narvid_scores_free(scores);
    narvid_dataset_free(ds);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new(cc)
        .arg(&c_src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "16 100.0 err");
}
