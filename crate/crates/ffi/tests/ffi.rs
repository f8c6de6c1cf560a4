use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use feedback_opf::{build_sensitivities, init_policy, parse_feeder, solve_nonlinear, Arch, InjectionState};
use feedback_opf_ffi::*;

const TWO_BUS: &str = "buses: 2, base_kva: 100, v0: 1\nline,0,1,0.01,0.02,pu";
const EIGHT_BUS: &str = include_str!("../../core/data/feeder8.feeder");

fn parse(text: &str) -> *mut FopfFeeder {
    let c = CString::new(text).unwrap();
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { fopf_feeder_parse(c.as_ptr(), &mut f) }, FopfStatus::Ok);
    assert!(!f.is_null());
    f
}

fn last_error() -> String {
    let p = fopf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn sensitivities_and_norm_match_core() {
    let f = parse(EIGHT_BUS);
    let mut n = 0usize;
    assert_eq!(unsafe { fopf_feeder_bus_count(f, &mut n) }, FopfStatus::Ok);
    assert_eq!(n, 7);
    let (mut r, mut x) = (vec![0.0; n * n], vec![0.0; n * n]);
    assert_eq!(unsafe { fopf_feeder_sensitivities(f, r.as_mut_ptr(), x.as_mut_ptr(), n * n) }, FopfStatus::Ok);
    let model = build_sensitivities(&parse_feeder(EIGHT_BUS).unwrap(), 1.0);
    for i in 0..n {
        for j in 0..n {
            assert_eq!(r[i * n + j], model.r[(i, j)]);
            assert_eq!(x[i * n + j], model.x[(i, j)]);
        }
    }
    let mut norm = 0.0;
    assert_eq!(unsafe { fopf_feeder_spectral_norm(f, &mut norm) }, FopfStatus::Ok);
    assert!((norm - model.a_norm).abs() < 1e-12);
    assert_eq!(unsafe { fopf_feeder_sensitivities(f, r.as_mut_ptr(), x.as_mut_ptr(), 3) }, FopfStatus::InvalidArgument);
    unsafe { fopf_feeder_free(f) };
}

#[test]
fn power_flow_matches_core() {
    let f = parse(EIGHT_BUS);
    let n = 7;
    let p = vec![0.1; n];
    let q = vec![0.05; n];
    let pu = vec![-0.6; n];
    let qu = vec![-0.2; n];
    let mut v = vec![0.0; n];
    let mut iters = 0usize;
    let status = unsafe { fopf_power_flow(f, p.as_ptr(), q.as_ptr(), pu.as_ptr(), qu.as_ptr(), n, v.as_mut_ptr(), &mut iters) };
    assert_eq!(status, FopfStatus::Ok);
    let g = parse_feeder(EIGHT_BUS).unwrap();
    let sol = solve_nonlinear(&g, &InjectionState { p, q, p_u: pu, q_u: qu }, 1.0).unwrap();
    assert_eq!(v, sol.v);
    assert_eq!(iters, sol.iterations);
    unsafe { fopf_feeder_free(f) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut f = ptr::null_mut();
    let bad = CString::new("buses: 2, base_kva: 100, v0: 1\nline,0,1,-0.01,0.02,pu").unwrap();
    assert_eq!(unsafe { fopf_feeder_parse(bad.as_ptr(), &mut f) }, FopfStatus::Parse);
    assert!(f.is_null());
    assert!(last_error().contains("impedance"), "{}", last_error());

    let missing = CString::new("/nonexistent/feeder.txt").unwrap();
    assert_eq!(unsafe { fopf_feeder_load(missing.as_ptr(), &mut f) }, FopfStatus::Io);

    let mut out = 0.0;
    assert_eq!(unsafe { fopf_feeder_spectral_norm(ptr::null(), &mut out) }, FopfStatus::NullPointer);
    assert_eq!(unsafe { fopf_tracking_bound(1.2, 0.1, 0.5, 0.0, &mut out) }, FopfStatus::Numerical);
    assert_eq!(unsafe { fopf_tracking_bound(0.5, 0.1, 0.5, 0.0, &mut out) }, FopfStatus::Ok);
    assert!((out - 0.1).abs() < 1e-15);
    assert!(fopf_last_error().is_null());

    let heavy = parse(TWO_BUS);
    let (z, load) = ([0.0], [-40.0]);
    let mut v = [0.0];
    let s = unsafe { fopf_power_flow(heavy, z.as_ptr(), z.as_ptr(), load.as_ptr(), load.as_ptr(), 1, v.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(s, FopfStatus::Numerical);
    unsafe { fopf_feeder_free(heavy) };
}

#[test]
fn rho_matches_formula() {
    let mut rho = 0.0;
    assert_eq!(unsafe { fopf_rho(2.0, 2.0, 0.1, 0.5, 0.48, &mut rho) }, FopfStatus::Ok);
    let a: f64 = 0.48;
    let want = (1.0 + a * a * (4.0 + 0.0025 + 2.0 * 2.0 * 0.05) - 2.0 * a * 2.0).sqrt();
    assert!((rho - want).abs() < 1e-12);
    assert_eq!(unsafe { fopf_rho(2.0, 2.0, 0.1, 0.5, -1.0, &mut rho) }, FopfStatus::InvalidArgument);
}

#[test]
fn policy_round_trip_and_local_update() {
    let policy = init_policy(3, &[2], Arch { hidden_layers: 1, width: 4 }, 1.0, 0.5, 7).unwrap();
    let dir = std::env::temp_dir().join(format!("fopf-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("policy.txt");
    policy.save(&path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fopf_policy_load(c.as_ptr(), &mut h) }, FopfStatus::Ok);

    let nd = &policy.nodes[0];
    let mut u = 0.0;
    assert_eq!(unsafe { fopf_policy_eval(h, 2, 0, 1.01, -0.3, &mut u) }, FopfStatus::Ok);
    assert!((u - (nd.p.mlp(-0.3) + nd.p.k * 1.01)).abs() < 1e-12);
    assert_eq!(unsafe { fopf_policy_eval(h, 1, 0, 1.0, 0.0, &mut u) }, FopfStatus::InvalidArgument);
    assert_eq!(unsafe { fopf_policy_eval(h, 2, 5, 1.0, 0.0, &mut u) }, FopfStatus::InvalidArgument);

    let view = FopfLocalView {
        p: 0.2,
        q: 0.1,
        v_hat: 0.98,
        p_u: -0.3,
        q_u: -0.1,
        p_floor: 0.0,
        q_floor: 0.0,
        weight: 1.0,
        p_lo: 0.0,
        p_hi: 1.0,
        q_lo: 0.0,
        q_hi: 1.0,
    };
    let (mut p, mut q) = (0.0, 0.0);
    assert_eq!(unsafe { fopf_local_update(h, 2, &view, 0.48, &mut p, &mut q) }, FopfStatus::Ok);
    let up = nd.p.mlp(-0.3) + nd.p.k * 0.98;
    let want_p = (0.2 - 0.48 * (2.0 * 0.2 + up)).clamp(0.0, 1.0);
    assert!((p - want_p).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&q));

    assert_eq!(unsafe { fopf_local_update(ptr::null(), 2, &view, 0.48, &mut p, &mut q) }, FopfStatus::Ok);
    assert!((p - (0.2 - 0.48 * 0.4)).abs() < 1e-12);
    unsafe { fopf_policy_free(h) };
    std::fs::remove_dir_all(&dir).ok();
}

fn lib_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(manifest.join("include/feedback_opf.h")).unwrap();
    for name in ["fopf_feeder_load", "fopf_power_flow", "fopf_policy_eval", "fopf_local_update", "fopf_rho", "fopf_last_error"] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let lib = lib_dir().join("libfeedback_opf_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let out_dir = tempfile_dir();
    let exe = out_dir.join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c_smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stdout));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("n=1 v=0.9"));
    std::fs::remove_dir_all(&out_dir).ok();
}

fn tempfile_dir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("fopf-c-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
