use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use nclr_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        nclr_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn scene(seed: u64) -> *mut NclrScene {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { nclr_scene_generate(seed, 64, 16, 16, &mut s) }, NclrStatus::Ok);
    s
}

struct Geometry {
    points: Vec<f64>,
    pose: [f64; 12],
    k: NclrIntrinsics,
}

fn geometry(s: *const NclrScene) -> Geometry {
    let (mut n, mut h, mut w) = (0usize, 0usize, 0usize);
    unsafe {
        assert_eq!(nclr_scene_dims(s, &mut n, &mut h, &mut w), NclrStatus::Ok);
    }
    assert_eq!((n, h, w), (64, 16, 16));
    let mut points = vec![0.0; 3 * n];
    let mut pose = [0.0; 12];
    let mut k = NclrIntrinsics {
        fx: 0.0,
        fy: 0.0,
        cx: 0.0,
        cy: 0.0,
        width: 0,
        height: 0,
    };
    unsafe {
        assert_eq!(nclr_scene_geometry(s, points.as_mut_ptr(), pose.as_mut_ptr(), &mut k), NclrStatus::Ok);
    }
    Geometry { points, pose, k }
}

#[test]
fn project_then_solve_recovers_the_scene_pose() {
    let s = scene(4);
    let g = geometry(s);
    let n = g.points.len() / 3;
    let mut uv = vec![0.0; 2 * n];
    let mut valid = vec![0u8; n];
    unsafe {
        let st = nclr_project(g.points.as_ptr(), n, g.pose.as_ptr(), &g.k, uv.as_mut_ptr(), valid.as_mut_ptr());
        assert_eq!(st, NclrStatus::Ok);
    }
    let keep: Vec<usize> = (0..n).filter(|&i| valid[i] == 1).collect();
    let pts: Vec<f64> = keep.iter().flat_map(|&i| g.points[3 * i..3 * i + 3].to_vec()).collect();
    let tg: Vec<f64> = keep.iter().flat_map(|&i| uv[2 * i..2 * i + 2].to_vec()).collect();
    let mut est = [0.0; 12];
    let mut residual = f64::NAN;
    let st = unsafe {
        nclr_solve_pose(pts.as_ptr(), tg.as_ptr(), keep.len(), &g.k, 5, est.as_mut_ptr(), &mut residual)
    };
    assert_eq!(st, NclrStatus::Ok, "{}", last_error());
    assert!(residual < 1e-8);
    let (mut t, mut r) = (f64::NAN, f64::NAN);
    unsafe {
        assert_eq!(nclr_rte(est.as_ptr(), g.pose.as_ptr(), &mut t), NclrStatus::Ok);
        assert_eq!(nclr_rre(est.as_ptr(), g.pose.as_ptr(), 1, &mut r), NclrStatus::Ok);
        nclr_scene_free(s);
    }
    assert!(t < 1e-6 && r < 1e-6, "rte {t} rre {r}");
}

#[test]
fn errors_carry_codes_and_messages() {
    let k = NclrIntrinsics {
        fx: 8.0,
        fy: 8.0,
        cx: 3.5,
        cy: 3.5,
        width: 8,
        height: 8,
    };
    let pts = [0.0, 0.0, 5.0, 1.0, 0.0, 5.0, 0.0, 1.0, 5.0];
    let tg = [3.5, 3.5, 5.1, 3.5, 3.5, 5.1];
    let mut pose = [0.0; 12];
    let mut res = 0.0;
    let st = unsafe { nclr_solve_pose(pts.as_ptr(), tg.as_ptr(), 3, &k, 5, pose.as_mut_ptr(), &mut res) };
    assert_eq!(st, NclrStatus::InsufficientCorrespondences);
    assert!(last_error().contains("at least 6"), "{}", last_error());

    let st = unsafe { nclr_solve_pose(ptr::null(), tg.as_ptr(), 3, &k, 5, pose.as_mut_ptr(), &mut res) };
    assert_eq!(st, NclrStatus::NullPointer);
    assert_eq!(last_error(), "points is null");

    let bad = NclrIntrinsics { fx: -1.0, ..k };
    let mut uv = [0.0; 2];
    let mut v = [0u8; 1];
    let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let st = unsafe { nclr_project(pts.as_ptr(), 1, id.as_ptr(), &bad, uv.as_mut_ptr(), v.as_mut_ptr()) };
    assert_eq!(st, NclrStatus::InvalidArgument);

    let missing = CString::new("/nonexistent/scene.nclr").unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { nclr_scene_load(missing.as_ptr(), &mut s) }, NclrStatus::Io);
    assert!(s.is_null());

    let st = unsafe { nclr_project(pts.as_ptr(), 1, id.as_ptr(), &k, uv.as_mut_ptr(), v.as_mut_ptr()) };
    assert_eq!(st, NclrStatus::Ok);
    assert_eq!(last_error(), "");
    assert_eq!((uv, v), ([3.5, 3.5], [1]));
}

#[test]
fn scenes_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("a.nclr").to_str().unwrap()).unwrap();
    let s = scene(9);
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(nclr_scene_save(s, path.as_ptr()), NclrStatus::Ok);
        assert_eq!(nclr_scene_load(path.as_ptr(), &mut back), NclrStatus::Ok);
    }
    let (a, b) = (geometry(s), geometry(back));
    assert_eq!(a.points, b.points);
    assert_eq!(a.pose, b.pose);
    unsafe {
        nclr_scene_free(s);
        nclr_scene_free(back);
        nclr_scene_free(ptr::null_mut());
    }
}

#[test]
fn model_handles_load_check_layout_and_evaluate() {
    use nclr::encoder::EncoderConfig;
    let dir = tempfile::tempdir().unwrap();
    let enc = EncoderConfig {
        channels: 8,
        hidden: 8,
        ..EncoderConfig::default()
    };
    let params = dir.path().join("p.nclp");
    nclr::model::init_model(&enc, 1).save(&params).unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train.encoder]\nchannels = 8\nhidden = 8\n").unwrap();
    let p = CString::new(params.to_str().unwrap()).unwrap();
    let c = CString::new(cfg.to_str().unwrap()).unwrap();

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { nclr_model_load(p.as_ptr(), ptr::null(), &mut m) }, NclrStatus::Version);
    assert_eq!(unsafe { nclr_model_load(p.as_ptr(), c.as_ptr(), &mut m) }, NclrStatus::Ok);

    let s = scene(2);
    let mut out = NclrSceneMetrics::default();
    let abl = CString::new("learnable-hard").unwrap();
    unsafe {
        assert_eq!(nclr_model_evaluate(m, s, abl.as_ptr(), &mut out), NclrStatus::Ok);
    }
    assert!((0.0..=1.0).contains(&out.acc_at_5px));
    assert!(out.match_mean_px.is_finite());
    let bad = CString::new("fancy").unwrap();
    unsafe {
        assert_eq!(nclr_model_evaluate(m, s, bad.as_ptr(), &mut out), NclrStatus::Config);
        nclr_model_free(m);
        nclr_scene_free(s);
    }
}

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn have(tool: &str) -> bool {
    Command::new(tool).arg("--version").output().is_ok()
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = header_dir().join("nclr.h");
    assert!(header.exists());
    for (tool, lang) in [("cc", "c"), ("c++", "c++")] {
        if !have(tool) {
            eprintln!("{tool} not found; skipping {lang} header check");
            continue;
        }
        let st = Command::new(tool)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(&header)
            .status()
            .unwrap();
        assert!(st.success(), "{lang} rejected the header");
    }
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "nclr.h"

int main(void) {
    NclrScene *s = NULL;
    if (nclr_scene_generate(5, 64, 16, 16, &s) != NCLR_STATUS_OK) return 1;
    size_t n, h, w;
    nclr_scene_dims(s, &n, &h, &w);
    double pts[64 * 3], pose[12], uv[64 * 2], est[12], res, t;
    uint8_t valid[64];
    NclrIntrinsics k;
    nclr_scene_geometry(s, pts, pose, &k);
    nclr_project(pts, n, pose, &k, uv, valid);
    double p2[64 * 3], t2[64 * 2];
    size_t m = 0;
    for (size_t i = 0; i < n; i++) {
        if (!valid[i]) continue;
        for (int j = 0; j < 3; j++) p2[3 * m + j] = pts[3 * i + j];
        for (int j = 0; j < 2; j++) t2[2 * m + j] = uv[2 * i + j];
        m++;
    }
    if (nclr_solve_pose(p2, t2, m, &k, 5, est, &res) != NCLR_STATUS_OK) return 2;
    nclr_rte(est, pose, &t);
    nclr_scene_free(s);
    char buf[64];
    if (nclr_solve_pose(p2, t2, 3, &k, 5, est, &res) != NCLR_STATUS_INSUFFICIENT_CORRESPONDENCES) return 3;
    if (nclr_last_error(buf, sizeof buf) == 0) return 4;
    printf("rte=%g version=%s\n", t, nclr_version());
    return t < 1e-6 ? 0 : 5;
}
"#;

#[test]
fn c_program_links_against_the_static_library() {
    if !have("cc") {
        eprintln!("cc not found; skipping link test");
        return;
    }
    // Test binaries live in target/<profile>/deps; the library one level up.
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = lib_dir.join("libnclr_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping link test", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let st = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header_dir())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(st.success(), "C program failed to build");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("rte="));
}
