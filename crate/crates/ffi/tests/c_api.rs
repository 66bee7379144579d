use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use cenkf_ffi::*;

const CSV: &str = "t_min,kind,value
0,tube_feed,60000
0,glucose_meas,120
10,tube_feed,60000
20,tube_feed,60000
30,tube_feed,60000
40,tube_feed,60000
50,tube_feed,60000
60,glucose_meas,118
60,tube_feed,60000
70,tube_feed,60000
80,tube_feed,60000
90,tube_feed,60000
100,tube_feed,60000
110,tube_feed,60000
120,glucose_meas,125
";

fn last_error() -> String {
    let p = cenkf_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn timeline() -> *mut CenkfTimeline {
    let id = CString::new("p1").unwrap();
    let csv = CString::new(CSV).unwrap();
    let mut tl = ptr::null_mut();
    assert_eq!(unsafe { cenkf_timeline_from_csv(id.as_ptr(), csv.as_ptr(), &mut tl) }, CenkfStatus::Ok);
    tl
}

#[test]
fn run_through_handles() {
    let tl = timeline();
    assert_eq!(unsafe { cenkf_timeline_len(tl) }, 15);

    let json = CString::new(r#"{"particles": 12, "seed": 3, "experiment": "is", "mse_cutoff": {"rule": "time", "minutes": 30}}"#).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { cenkf_config_new(json.as_ptr(), &mut cfg) }, CenkfStatus::Ok);

    let mut res = ptr::null_mut();
    assert_eq!(unsafe { cenkf_run(tl, cfg, &mut res) }, CenkfStatus::Ok, "{:?}", cenkf_last_error());
    assert_eq!(unsafe { cenkf_result_len(res) }, 3);
    assert_eq!(unsafe { cenkf_result_aborted(res) }, 0);

    let mut rec = CenkfRecord::default();
    let mut sq = Vec::new();
    for i in 0..3 {
        assert_eq!(unsafe { cenkf_result_record(res, i, &mut rec) }, CenkfStatus::Ok);
        assert!(rec.forecast_min <= rec.forecast_mean && rec.forecast_mean <= rec.forecast_max);
        if rec.t > 30.0 {
            sq.push((rec.y - rec.forecast_mean).powi(2));
        }
    }
    assert_eq!(rec.t, 120.0);
    assert_eq!(rec.y, 125.0);
    let mut mse = 0.0;
    assert_eq!(unsafe { cenkf_result_mse(res, &mut mse) }, CenkfStatus::Ok);
    assert!((mse - sq.iter().sum::<f64>() / sq.len() as f64).abs() <= 1e-12 * mse.max(1.0));

    assert_eq!(unsafe { cenkf_result_record(res, 3, &mut rec) }, CenkfStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));

    let dir = tempfile::tempdir().unwrap();
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cenkf_result_export(res, d.as_ptr()) }, CenkfStatus::Ok);
    assert!(dir.path().join("forecasts.csv").is_file());

    unsafe {
        cenkf_result_free(res);
        cenkf_config_free(cfg);
        cenkf_timeline_free(tl);
    }
}

#[test]
fn errors_are_reported() {
    let mut tl = ptr::null_mut();
    assert_eq!(unsafe { cenkf_timeline_from_path(ptr::null(), &mut tl) }, CenkfStatus::NullPointer);
    assert!(tl.is_null());

    let id = CString::new("bad").unwrap();
    let csv = CString::new("t_min,kind,value\n0,coffee,1\n").unwrap();
    assert_eq!(unsafe { cenkf_timeline_from_csv(id.as_ptr(), csv.as_ptr(), &mut tl) }, CenkfStatus::Parse);
    assert!(last_error().contains("coffee"));

    let mut cfg = ptr::null_mut();
    let json = CString::new(r#"{"particles": 1}"#).unwrap();
    assert_eq!(unsafe { cenkf_config_new(json.as_ptr(), &mut cfg) }, CenkfStatus::InvalidArgument);
    let json = CString::new(r#"{"particle_count": 10}"#).unwrap();
    assert_eq!(unsafe { cenkf_config_new(json.as_ptr(), &mut cfg) }, CenkfStatus::Parse);
    assert!(cfg.is_null());

    // a successful call clears the previous message
    assert_eq!(unsafe { cenkf_config_new(ptr::null(), &mut cfg) }, CenkfStatus::Ok);
    assert!(cenkf_last_error().is_null());
    unsafe { cenkf_config_free(cfg) };

    let mut res = ptr::null_mut();
    assert_eq!(unsafe { cenkf_run(ptr::null(), ptr::null(), &mut res) }, CenkfStatus::NullPointer);
    unsafe {
        cenkf_timeline_free(ptr::null_mut());
        cenkf_result_free(ptr::null_mut());
    }
}

#[test]
fn qp_box_projection() {
    // min ½|x - (2, -3)|² with x in [0, 1]²  ->  (1, 0)
    let q = [1.0, 0.0, 0.0, 1.0];
    let c = [-2.0, 3.0];
    let b_mat = [1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
    let b = [1.0, 0.0, 1.0, 0.0];
    let mut x = [f64::NAN; 2];
    let s = unsafe { cenkf_qp_solve(2, q.as_ptr(), c.as_ptr(), 0, ptr::null(), ptr::null(), 4, b_mat.as_ptr(), b.as_ptr(), x.as_mut_ptr()) };
    assert_eq!(s, CenkfStatus::Ok);
    assert!((x[0] - 1.0).abs() < 1e-12 && x[1].abs() < 1e-12, "{x:?}");

    // on the line x1 + x2 = 1 the box leaves only (1, 0) near (2, -3)
    let a_mat = [1.0, 1.0];
    let a = [1.0];
    let s = unsafe { cenkf_qp_solve(2, q.as_ptr(), c.as_ptr(), 1, a_mat.as_ptr(), a.as_ptr(), 4, b_mat.as_ptr(), b.as_ptr(), x.as_mut_ptr()) };
    assert_eq!(s, CenkfStatus::Ok);
    assert!((x[0] - 1.0).abs() < 1e-12 && x[1].abs() < 1e-12, "{x:?}");

    let b_bad = [-1.0, 0.0, 1.0, 0.0];
    let s = unsafe { cenkf_qp_solve(2, q.as_ptr(), c.as_ptr(), 0, ptr::null(), ptr::null(), 4, b_mat.as_ptr(), b_bad.as_ptr(), x.as_mut_ptr()) };
    assert_eq!(s, CenkfStatus::Run);
}

#[test]
fn simulate_without_feed_matches_between_calls() {
    let dim = cenkf_state_dim();
    assert_eq!(dim, 6);
    let v0 = [100.0, 250.0, 12000.0, 80.0, 80.0, 80.0];
    let times = [0.0, 30.0, 60.0];
    let mut out = vec![0.0; 3 * dim];
    let s = unsafe { cenkf_simulate(v0.as_ptr(), times.as_ptr(), 3, ptr::null(), ptr::null(), 0, out.as_mut_ptr()) };
    assert_eq!(s, CenkfStatus::Ok);
    assert_eq!(&out[..dim], &v0);
    // restarting from the 30-min state lands on the same 60-min state
    let mut again = vec![0.0; 2 * dim];
    let s = unsafe { cenkf_simulate(out[dim..2 * dim].as_ptr(), times[1..].as_ptr(), 2, ptr::null(), ptr::null(), 0, again.as_mut_ptr()) };
    assert_eq!(s, CenkfStatus::Ok);
    for (a, b) in again[dim..].iter().zip(&out[2 * dim..]) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
    }

    let bad = [0.0, 10.0, 5.0];
    let s = unsafe { cenkf_simulate(v0.as_ptr(), bad.as_ptr(), 3, ptr::null(), ptr::null(), 0, out.as_mut_ptr()) };
    assert_eq!(s, CenkfStatus::Run);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(cenkf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn compiler(name: &str) -> Option<String> {
    let cc = std::env::var(name.to_uppercase()).unwrap_or_else(|_| name.to_string());
    Command::new(&cc).arg("--version").output().ok().filter(|o| o.status.success()).map(|_| cc)
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("cenkf.h").is_file());
    let dir = tempfile::tempdir().unwrap();
    let src = "#include \"cenkf.h\"\nint main(void) { cenkf_record r; cenkf_status s = CENKF_STATUS_OK; (void)r; return (int)s + (int)cenkf_state_dim() * 0; }\n";
    for (tool, ext, extra) in [("cc", "c", "-std=c99"), ("c++", "cpp", "-std=c++11")] {
        let Some(cc) = compiler(tool) else {
            eprintln!("{tool} not found, skipping");
            continue;
        };
        let file = dir.path().join(format!("probe.{ext}"));
        std::fs::write(&file, src).unwrap();
        let out = Command::new(cc)
            .args([extra, "-Wall", "-Werror", "-fsyntax-only", "-I"])
            .arg(&include)
            .arg(&file)
            .output()
            .unwrap();
        assert!(out.status.success(), "{tool}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
