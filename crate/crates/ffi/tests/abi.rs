use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use crcd_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(crcd_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn rc_loss_matches_closed_form() {
    let pos = [1.0, 0.5];
    let neg = [0.25, 0.25, 0.5, 0.5];
    let mut loss = f64::NAN;
    let mut sat = usize::MAX;
    let rc = unsafe { crcd_relation_contrastive_loss(pos.as_ptr(), neg.as_ptr(), 2, 2, false, &mut loss, &mut sat) };
    assert_eq!(rc, CRCD_OK);
    // row 0: -ln 1 - 2 ln 0.75; row 1: -ln 0.5 - 2 ln 0.5
    let expected = (-2.0 * 0.75f64.ln() + 3.0 * 2f64.ln()) / 2.0;
    assert!((loss - expected).abs() < 1e-15);
    assert_eq!(sat, 0);
}

#[test]
fn null_and_usage_errors_set_message() {
    let mut loss = 0.0;
    let rc = unsafe { crcd_relation_contrastive_loss(ptr::null(), ptr::null(), 1, 1, false, &mut loss, ptr::null_mut()) };
    assert_eq!(rc, CRCD_ERR_NULL_POINTER);
    assert!(last_error().contains("positive"));

    let zt = [1.0, 2.0];
    let rc = unsafe { crcd_kd_loss(zt.as_ptr(), zt.as_ptr(), 1, 2, 4.0, &mut loss) };
    assert_eq!(rc, CRCD_OK);
    // identical logits: rho^2 times the entropy of softmax([1/4, 2/4])
    let p1 = 1.0 / (1.0 + (0.25f64).exp());
    let entropy = -(p1 * p1.ln() + (1.0 - p1) * (1.0 - p1).ln());
    assert!((loss - 16.0 * entropy).abs() < 1e-12, "{loss}");
    assert_eq!(last_error(), "");

    let rc = unsafe { crcd_baseline_loss(99, zt.as_ptr(), zt.as_ptr(), zt.as_ptr(), 2, 1, 0.1, &mut loss) };
    assert_eq!(rc, CRCD_ERR_USAGE);
}

#[test]
fn baseline_triplet_value() {
    let u = [1.0, 0.0];
    let vp = [1.0, 0.0];
    let vn = [0.0, 1.0, 1.0, 0.0];
    let mut loss = 0.0;
    let rc = unsafe { crcd_baseline_loss(CRCD_BASELINE_TRIPLET, u.as_ptr(), vp.as_ptr(), vn.as_ptr(), 2, 2, 0.4, &mut loss) };
    assert_eq!(rc, CRCD_OK);
    // cosines: pos 1, negs 0 and 1 -> mean(relu(0-1+.4), relu(1-1+.4)) = 0.2
    assert!((loss - 0.2).abs() < 1e-12);
}

#[test]
fn true_mi_and_bad_spec() {
    let spec = CString::new("gaussian:0.9").unwrap();
    let mut mi = 0.0;
    assert_eq!(unsafe { crcd_true_mi(spec.as_ptr(), &mut mi) }, CRCD_OK);
    assert!((mi - (-0.5 * (1.0f64 - 0.81).ln())).abs() < 1e-12);
    let bad = CString::new("laplace:1").unwrap();
    assert_eq!(unsafe { crcd_true_mi(bad.as_ptr(), &mut mi) }, CRCD_ERR_USAGE);
    assert!(!last_error().is_empty());
}

#[test]
fn mi_bound_is_sound_for_independent_joint() {
    let spec = CString::new("gaussian:0").unwrap();
    let (mut bound, mut truth, mut sound) = (0.0, 1.0, false);
    let rc = unsafe { crcd_mi_bound(spec.as_ptr(), 8, 50, 1, &mut bound, &mut truth, &mut sound) };
    assert_eq!(rc, CRCD_OK, "{}", last_error());
    assert_eq!(truth, 0.0);
    assert!(sound);
    assert!(bound <= 0.05);
}

#[test]
fn queue_handle_lifecycle() {
    let mut q = ptr::null_mut();
    assert_eq!(unsafe { crcd_queue_new(3, 1, 1, CRCD_POLICY_QUEUE, 0, &mut q) }, CRCD_OK);
    let ids = [10usize, 11, 12, 13];
    let vals = [0.0f64; 4];
    assert_eq!(unsafe { crcd_queue_push(q, ids.as_ptr(), vals.as_ptr(), vals.as_ptr(), 2, 1, 1) }, CRCD_OK);
    let mut out = [0usize; 2];
    assert_eq!(unsafe { crcd_queue_sample(q, 10, 2, out.as_mut_ptr()) }, CRCD_ERR_WARM_UP);
    assert_eq!(unsafe { crcd_queue_push(q, ids[2..].as_ptr(), vals.as_ptr(), vals.as_ptr(), 2, 1, 1) }, CRCD_OK);
    let mut len = 0;
    assert_eq!(unsafe { crcd_queue_len(q, &mut len) }, CRCD_OK);
    assert_eq!(len, 3);
    assert_eq!(unsafe { crcd_queue_sample(q, 12, 2, out.as_mut_ptr()) }, CRCD_OK);
    assert_eq!(out, [11, 13]);
    unsafe { crcd_queue_free(q) };
    unsafe { crcd_queue_free(ptr::null_mut()) };
}

const CONFIG: &str = r#"
version = 1
name = "ffi"

[data]
num_classes = 3
sample_shape = [6]
train_per_class = 12
test_per_class = 6

[teacher]
hidden = [8]
feature_dim = 6
epochs = 2
batch_size = 8

[student]
feature_dim = 4

[distill]
negatives = 8
batch_size = 6
relation_dim = 8
proj_dim = 4
epochs = 1
"#;

#[test]
fn config_handle_and_training() {
    let dir = tempfile::tempdir().unwrap();
    let text = CString::new(CONFIG).unwrap();
    let ckpt = dir.path().join("teacher.json");
    let ov = CString::new(format!("teacher.checkpoint=\"{}\"", ckpt.display())).unwrap();
    let ovs = [ov.as_ptr()];
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { crcd_config_parse(text.as_ptr(), ovs.as_ptr(), 1, &mut cfg) }, CRCD_OK, "{}", last_error());

    let mut buf = [0 as std::ffi::c_char; 65];
    assert_eq!(unsafe { crcd_config_hash(cfg, buf.as_mut_ptr(), 65) }, CRCD_OK);
    let hash = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_owned();
    assert_eq!(hash.len(), 64);
    assert_eq!(unsafe { crcd_config_hash(cfg, buf.as_mut_ptr(), 10) }, CRCD_ERR_USAGE);

    let out = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
    let (mut top1, mut best) = (0.0, 0.0);
    assert_eq!(unsafe { crcd_distill(cfg, out.as_ptr(), false, &mut top1, &mut best) }, CRCD_ERR_CONFIG);
    assert!(last_error().contains("train-teacher"));

    let mut t1 = 0.0;
    assert_eq!(unsafe { crcd_train_teacher(cfg, ptr::null(), &mut t1) }, CRCD_OK, "{}", last_error());
    assert!(ckpt.exists());
    assert!((0.0..=100.0).contains(&t1));
    assert_eq!(unsafe { crcd_distill(cfg, out.as_ptr(), false, &mut top1, &mut best) }, CRCD_OK, "{}", last_error());
    assert!(best >= top1);
    assert!(dir.path().join("run").join("result.json").exists());
    unsafe { crcd_config_free(cfg) };
}

#[test]
fn schema_error_code_through_abi() {
    let text = CString::new(CONFIG.replace("negatives = 8", "negatives = -8")).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { crcd_config_parse(text.as_ptr(), ptr::null(), 0, &mut cfg) }, CRCD_ERR_SCHEMA);
    assert!(last_error().contains("distill.negatives"));
    assert!(cfg.is_null());
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps/
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(header_dir.join("crcd.h").exists());
    let lib = target_dir().join("libcrcd_ffi.a");
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "crcd.h"
int main(void) {
    double mi = 0.0;
    if (crcd_true_mi("gaussian:0.5", &mi) != CRCD_OK) return 1;
    double loss = 0.0;
    double pos[1] = {1.0};
    double neg[1] = {0.5};
    if (crcd_relation_contrastive_loss(pos, neg, 1, 1, false, &loss, NULL) != CRCD_OK) return 2;
    CrcdQueue *q = NULL;
    if (crcd_queue_new(0, 1, 1, CRCD_POLICY_QUEUE, 0, &q) != CRCD_ERR_CONFIG) return 3;
    printf("%.6f %.6f %s\n", mi, loss, crcd_last_error());
    return 0;
}
"#,
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let syntax = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&header_dir)
        .arg(&src)
        .status()
        .expect("C compiler available");
    assert!(syntax.success());
    if !lib.exists() {
        panic!("static library not found at {}", lib.display());
    }
    let exe = tmp.path().join("main");
    let status = Command::new(&cc)
        .arg("-I")
        .arg(&header_dir)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("0.143841 0.693147 configuration error"), "{text}");
}
