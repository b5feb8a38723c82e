use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use cdf::model::ModelConfig;
use cdf::synth::{Corpus, CorpusConfig, Split};
use cdf::train::{self, TrainConfig};
use cdf_ffi::*;

fn tiny_corpus() -> CorpusConfig {
    CorpusConfig {
        seed: 5,
        base_radicals: 6,
        right_classes: 8,
        val_classes: 2,
        train_per_class: 2,
        test_per_class: 1,
        val_per_class: 1,
        misspelled_classes: 4,
        misspelled_per_class: 1,
        image_size: 32,
        ..CorpusConfig::default()
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        enc_channels: [4, 4, 8],
        proto_dim: 8,
        emb_dim: 8,
        state_dim: 8,
        att_dim: 8,
        coverage_channels: 2,
        glimpse_dim: 8,
        key_dim: 4,
        char_dim: 8,
        max_len: 8,
        ..ModelConfig::default()
    }
}

/// Corpus on disk plus a one-epoch checkpoint.
fn fixture(dir: &Path) -> Corpus {
    let corpus = Corpus::generate(&tiny_corpus()).unwrap();
    corpus.write(&dir.join("corpus")).unwrap();
    let mc = train::model_config_for(&corpus, tiny_model());
    let tc = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    train::fit(&corpus, mc, &tc, Some(&dir.join("run")), &mut |_| {}).unwrap();
    corpus
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cdf_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn open_assess_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture(dir.path());
    let (cd, ck) = (cstr(&dir.path().join("corpus")), cstr(&dir.path().join("run/best.ckpt")));
    unsafe {
        let mut c = ptr::null_mut();
        assert_eq!(cdf_corrector_open(cd.as_ptr(), ck.as_ptr(), &mut c), CdfStatus::Ok, "{}", last_error());
        assert_eq!(cdf_corrector_image_size(c), 32);
        assert_eq!(cdf_corrector_class_count(c), corpus.n_classes() as u32);
        assert_eq!(cdf_corrector_set_options(c, 1, 1, CdfCorrectorKind::EditDistance, 3), CdfStatus::Ok);

        for i in corpus.indices(Split::Test) {
            let pixels = corpus.images[i].intensities();
            let mut r = ptr::null_mut();
            assert_eq!(cdf_assess(c, pixels.as_ptr(), pixels.len(), &mut r), CdfStatus::Ok);
            let ids = CStr::from_ptr(cdf_result_ids(r)).to_str().unwrap().to_string();
            let mis = cdf_result_is_misspelled(r);
            let n = cdf_result_candidate_count(r);
            if mis == 1 {
                assert_eq!(cdf_result_class(r), -1);
                assert_eq!(n, 3);
                let (mut k, mut s) = (0u32, 0f64);
                let mut prev = f64::NEG_INFINITY;
                for j in 0..n {
                    assert_eq!(cdf_result_candidate(r, j, &mut k, &mut s), CdfStatus::Ok);
                    assert!((k as usize) < corpus.n_classes() && s >= prev);
                    prev = s;
                }
                assert_eq!(cdf_result_candidate(r, n, &mut k, &mut s), CdfStatus::OutOfRange);
            } else {
                assert_eq!(mis, 0);
                let class = cdf_result_class(r);
                assert!(class >= 0);
                let expect = corpus.vocab.decode(corpus.dict.sequence(cdf::ids::CharClass(class as u32)).unwrap());
                assert_eq!(ids, expect);
                assert_eq!(n, 0);
            }
            cdf_result_free(r);
        }

        // The PGM path gives the same answer as the pixel buffer.
        let i = corpus.indices(Split::Test)[0];
        let path = cstr(&dir.path().join("corpus").join(corpus.records[i].path()));
        let pixels = corpus.images[i].intensities();
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(cdf_assess_pgm(c, path.as_ptr(), &mut a), CdfStatus::Ok);
        assert_eq!(cdf_assess(c, pixels.as_ptr(), pixels.len(), &mut b), CdfStatus::Ok);
        assert_eq!(CStr::from_ptr(cdf_result_ids(a)), CStr::from_ptr(cdf_result_ids(b)));
        assert_eq!(cdf_result_class(a), cdf_result_class(b));
        cdf_result_free(a);
        cdf_result_free(b);
        cdf_corrector_free(c);
    }
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cstr(&dir.path().join("nope.ckpt"));
    unsafe {
        let mut c = ptr::null_mut();
        assert_eq!(cdf_corrector_open(ptr::null(), missing.as_ptr(), &mut c), CdfStatus::NullPointer);
        assert!(c.is_null());
        assert_eq!(cdf_corrector_open(missing.as_ptr(), missing.as_ptr(), &mut c), CdfStatus::Io);
        assert!(last_error().contains("nope.ckpt"));
        assert_eq!(cdf_corrector_set_options(ptr::null_mut(), 1, 1, CdfCorrectorKind::Fetcher, 5), CdfStatus::NullPointer);
        let mut r = ptr::null_mut();
        let px = [0f32; 4];
        assert_eq!(cdf_assess(ptr::null(), px.as_ptr(), 4, &mut r), CdfStatus::NullPointer);
        assert!(r.is_null());
        assert_eq!(cdf_result_is_misspelled(ptr::null()), -1);
        assert_eq!(cdf_result_class(ptr::null()), -1);
        assert!(cdf_result_ids(ptr::null()).is_null());
        assert_eq!(cdf_corrector_image_size(ptr::null()), 0);
        cdf_corrector_free(ptr::null_mut());
        cdf_result_free(ptr::null_mut());
        let msg = CStr::from_ptr(cdf_status_message(CdfStatus::Incompatible));
        assert_eq!(msg.to_str().unwrap(), "checkpoint and corpus disagree");
    }
}

#[test]
fn bad_inputs_and_mismatched_corpus() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let other = Corpus::generate(&CorpusConfig { base_radicals: 7, ..tiny_corpus() }).unwrap();
    other.write(&dir.path().join("other")).unwrap();
    let ck = cstr(&dir.path().join("run/best.ckpt"));
    unsafe {
        let mut c = ptr::null_mut();
        let od = cstr(&dir.path().join("other"));
        assert_eq!(cdf_corrector_open(od.as_ptr(), ck.as_ptr(), &mut c), CdfStatus::Incompatible);
        assert!(c.is_null());

        let cd = cstr(&dir.path().join("corpus"));
        assert_eq!(cdf_corrector_open(cd.as_ptr(), ck.as_ptr(), &mut c), CdfStatus::Ok);
        assert_eq!(cdf_corrector_set_options(c, 1, 1, CdfCorrectorKind::Fetcher, 0), CdfStatus::InvalidArgument);
        let mut r = ptr::null_mut();
        let short = vec![0f32; 10];
        assert_eq!(cdf_assess(c, short.as_ptr(), short.len(), &mut r), CdfStatus::InvalidArgument);
        assert!(last_error().contains("1024"));
        let mut nan = vec![0f32; 1024];
        nan[3] = f32::NAN;
        assert_eq!(cdf_assess(c, nan.as_ptr(), nan.len(), &mut r), CdfStatus::InvalidArgument);
        assert!(r.is_null());
        cdf_corrector_free(c);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cdf.h")).unwrap();
    for f in [
        "cdf_corrector_open",
        "cdf_corrector_free",
        "cdf_corrector_set_options",
        "cdf_assess",
        "cdf_assess_pgm",
        "cdf_result_candidate",
        "cdf_result_free",
        "cdf_last_error",
        "typedef struct CdfCorrector CdfCorrector",
        "CDF_STATUS_OK = 0",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
}

/// Compiles and runs a C program against the header and static library.
#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let target = manifest.join("../../target/debug");
    let lib = target.join("libcdf_ffi.a");
    if !lib.exists() || std::process::Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include "cdf.h"
#include <stdio.h>
#include <string.h>
int main(void) {
    CdfCorrector *c = NULL;
    CdfStatus s = cdf_corrector_open("/nonexistent", "/nonexistent.ckpt", &c);
    if (s != CDF_STATUS_IO || c != NULL) return 1;
    if (strlen(cdf_last_error()) == 0) return 2;
    if (strcmp(cdf_status_message(CDF_STATUS_OK), "ok") != 0) return 3;
    printf("%s\n", cdf_last_error());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = std::process::Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).contains("nonexistent"));
}
