use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use geowarp::geometry::Extrinsics;
use geowarp::grid::Grid;
use geowarp::metrics;
use geowarp::prompt_lifting::PointCloud;
use geowarp::segmenter::{SegmenterConfig, SegmenterModel};
use geowarp::synthscene::{generate_rig, random_scene, render_view, SceneGenConfig};
use geowarp::warp;
use geowarp_ffi::*;
use nalgebra::Vector3;

fn last_error() -> String {
    let p = gw_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn row_major3(m: &nalgebra::Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

fn row_major4(e: &Extrinsics) -> [f64; 16] {
    let m = e.to_matrix4();
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = m[(r, c)];
        }
    }
    out
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(gw_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_lifecycle_and_prediction_match_rust() {
    let mut model: *mut GwModel = ptr::null_mut();
    assert_eq!(unsafe { gw_model_new_default(&mut model) }, GwStatus::Ok);
    assert!(!model.is_null());
    assert!(gw_last_error_message().is_null());

    let reference = SegmenterModel::new(SegmenterConfig::default()).unwrap();
    let mut count = 0usize;
    assert_eq!(unsafe { gw_model_trainable_count(model, &mut count) }, GwStatus::Ok);
    assert_eq!(count, reference.trainable_count());

    let (h, w) = (6, 5);
    let rgb: Vec<f64> = (0..h * w * 3).map(|i| (i % 7) as f64 / 7.0).collect();
    let text = CString::new("red sphere").unwrap();
    let mut logits = vec![0.0; h * w];
    let st = unsafe { gw_predict_logits(model, rgb.as_ptr(), h, w, text.as_ptr(), logits.as_mut_ptr()) };
    assert_eq!(st, GwStatus::Ok, "{}", last_error());

    let image = geowarp::grid::RgbImage::from_vec(h, w, rgb.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap();
    let expected = reference.predict_logits(&image, &reference.parse_text("red sphere").unwrap()).unwrap();
    assert_eq!(logits, expected.as_slice());

    let unknown = CString::new("purple dodecahedron").unwrap();
    let st = unsafe { gw_predict_logits(model, rgb.as_ptr(), h, w, unknown.as_ptr(), logits.as_mut_ptr()) };
    assert_eq!(st, GwStatus::Config);
    assert!(!last_error().is_empty());

    unsafe { gw_model_free(model) };
    unsafe { gw_model_free(ptr::null_mut()) };
}

#[test]
fn null_arguments_are_reported() {
    assert_eq!(unsafe { gw_model_new_default(ptr::null_mut()) }, GwStatus::NullArgument);
    assert!(last_error().contains("out"));
    let mut out = 0.0;
    let st = unsafe { gw_miou(ptr::null(), ptr::null(), 2, 2, &mut out) };
    assert_eq!(st, GwStatus::NullArgument);
    let mut model: *mut GwModel = ptr::null_mut();
    let st = unsafe { gw_model_from_config(ptr::null(), &mut model) };
    assert_eq!(st, GwStatus::NullArgument);
    assert!(model.is_null());
}

#[test]
fn missing_files_are_data_errors() {
    let mut model: *mut GwModel = ptr::null_mut();
    let path = CString::new("/nonexistent/model.toml").unwrap();
    assert_eq!(unsafe { gw_model_from_config(path.as_ptr(), &mut model) }, GwStatus::Data);
    assert!(last_error().contains("/nonexistent/model.toml"));

    assert_eq!(unsafe { gw_model_new_default(&mut model) }, GwStatus::Ok);
    let adapters = CString::new("/nonexistent/adapters.bin").unwrap();
    assert_eq!(unsafe { gw_model_load_adapters(model, adapters.as_ptr()) }, GwStatus::Data);
    unsafe { gw_model_free(model) };
}

#[test]
fn config_and_adapters_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SegmenterConfig::default();
    let cfg_path = dir.path().join("model.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).unwrap();

    let mut trained = SegmenterModel::new(cfg).unwrap();
    for buf in trained.trainable_buffers_mut() {
        for (i, v) in buf.iter_mut().enumerate() {
            *v = 0.01 * ((i % 5) as f64 - 2.0);
        }
    }
    let adapters_path = dir.path().join("adapters.bin");
    trained.save_adapters(&adapters_path).unwrap();

    let mut model: *mut GwModel = ptr::null_mut();
    let c_cfg = CString::new(cfg_path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { gw_model_from_config(c_cfg.as_ptr(), &mut model) }, GwStatus::Ok);
    let c_ad = CString::new(adapters_path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { gw_model_load_adapters(model, c_ad.as_ptr()) }, GwStatus::Ok, "{}", last_error());

    let (h, w) = (4, 4);
    let rgb = vec![0.5; h * w * 3];
    let text = CString::new("blue box").unwrap();
    let mut logits = vec![0.0; h * w];
    assert_eq!(
        unsafe { gw_predict_logits(model, rgb.as_ptr(), h, w, text.as_ptr(), logits.as_mut_ptr()) },
        GwStatus::Ok,
        "{}",
        last_error()
    );
    let image = geowarp::grid::RgbImage::filled(h, w, [0.5; 3]);
    let expected = trained.predict_logits(&image, &trained.parse_text("blue box").unwrap()).unwrap();
    assert_eq!(logits, expected.as_slice());
    unsafe { gw_model_free(model) };
}

#[test]
fn warp_matches_rust_api() {
    let scene = random_scene(&SceneGenConfig::default(), 3).unwrap();
    let rig = generate_rig(2, [0.0, 0.0, 0.0], 3.0, 3).unwrap();
    let (ka, ea) = &rig.cameras[0];
    let (kb, eb) = &rig.cameras[1];
    let view_b = render_view(&scene, kb, eb);
    let (h, w) = (ka.height, ka.width);
    let logits_a = Grid::from_fn(h, w, |r, c| (r as f64 * 0.3).sin() + c as f64 * 0.01);

    let field = warp::compute_warp_field(&view_b.frame.depth, ka, kb, ea, eb).unwrap();
    let (expected, expected_valid) = warp::warp_logits(&logits_a, &field).unwrap();

    let n = kb.height * kb.width;
    let mut out = vec![0.0; n];
    let mut valid = vec![0u8; n];
    let st = unsafe {
        gw_warp_logits(
            logits_a.as_slice().as_ptr(),
            h,
            w,
            view_b.frame.depth.as_slice().as_ptr(),
            kb.height,
            kb.width,
            row_major3(&ka.matrix()).as_ptr(),
            row_major3(&kb.matrix()).as_ptr(),
            row_major4(ea).as_ptr(),
            row_major4(eb).as_ptr(),
            out.as_mut_ptr(),
            valid.as_mut_ptr(),
        )
    };
    assert_eq!(st, GwStatus::Ok, "{}", last_error());
    assert_eq!(out, expected.as_slice());
    let valid_bool: Vec<bool> = valid.iter().map(|&v| v != 0).collect();
    assert_eq!(valid_bool, expected_valid.as_slice());
    assert!(valid_bool.iter().any(|&v| v));
}

#[test]
fn bad_extrinsics_are_rejected() {
    let k = [10.0, 0.0, 2.0, 0.0, 10.0, 2.0, 0.0, 0.0, 1.0];
    let mut e = [0.0; 16];
    for i in 0..4 {
        e[i * 5] = 1.0;
    }
    let mut skew = e;
    skew[1] = 0.5;
    let logits = vec![0.0; 16];
    let depth = vec![1.0; 16];
    let mut out = vec![0.0; 16];
    let mut valid = vec![0u8; 16];
    let st = unsafe {
        gw_warp_logits(
            logits.as_ptr(),
            4,
            4,
            depth.as_ptr(),
            4,
            4,
            k.as_ptr(),
            k.as_ptr(),
            e.as_ptr(),
            skew.as_ptr(),
            out.as_mut_ptr(),
            valid.as_mut_ptr(),
        )
    };
    assert_ne!(st, GwStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn metrics_match_rust_api() {
    let pred = [1u8, 1, 0, 0, 1, 0];
    let gt = [1u8, 0, 0, 1, 1, 0];
    let mut iou = 0.0;
    assert_eq!(unsafe { gw_miou(pred.as_ptr(), gt.as_ptr(), 2, 3, &mut iou) }, GwStatus::Ok);
    assert_eq!(iou, 0.5);

    let x = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0];
    let y = [0.1, 0.0, 0.0, 1.0, 0.5, 0.0];
    let (cx, cy) = (
        PointCloud::new(x.chunks(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect()),
        PointCloud::new(y.chunks(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect()),
    );
    let mut cd = 0.0;
    assert_eq!(unsafe { gw_chamfer(x.as_ptr(), 3, y.as_ptr(), 2, 2.0, &mut cd) }, GwStatus::Ok);
    assert_eq!(cd, metrics::chamfer(&cx, &cy, 2.0).unwrap());
    let mut f = 0.0;
    assert_eq!(unsafe { gw_fscore(x.as_ptr(), 3, y.as_ptr(), 2, 0.2, &mut f) }, GwStatus::Ok);
    assert_eq!(f, metrics::fscore(&cx, &cy, 0.2).unwrap());

    let st = unsafe { gw_chamfer(x.as_ptr(), 3, y.as_ptr(), 2, 0.0, &mut cd) };
    assert_eq!(st, GwStatus::Data);
    assert!(last_error().contains("normalization"));
}

#[test]
fn header_compiles_and_links_from_c() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler on PATH, skipping");
        return;
    };
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = crate_dir.join("include");
    assert!(header_dir.join("geowarp.h").is_file());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "geowarp.h"
int main(void) {
    GwModel *m = NULL;
    if (gw_model_new_default(&m) != GW_STATUS_OK) return 1;
    size_t n = 0;
    if (gw_model_trainable_count(m, &n) != GW_STATUS_OK || n == 0) return 2;
    unsigned char a[4] = {1, 1, 0, 0}, b[4] = {1, 0, 0, 0};
    double iou = 0.0;
    if (gw_miou(a, b, 2, 2, &iou) != GW_STATUS_OK || iou != 0.5) return 3;
    if (gw_model_new_default(NULL) != GW_STATUS_NULL_ARGUMENT) return 4;
    if (gw_last_error_message() == NULL) return 5;
    gw_model_free(m);
    printf("%s\n", gw_version());
    return 0;
}
"#,
    )
    .unwrap();
    let st = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(&header_dir)
        .arg(&src)
        .status()
        .unwrap();
    assert!(st.success(), "header does not compile as C99");

    // Link against the staticlib when cargo has already produced it.
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libgeowarp_ffi.a");
    if !lib.is_file() {
        eprintln!("{} not built, skipping link step", lib.display());
        return;
    }
    let exe = dir.path().join("smoke");
    let st = Command::new(cc)
        .arg("-I")
        .arg(&header_dir)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(st.success(), "linking against the staticlib failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C smoke test exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
