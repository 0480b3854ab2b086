use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tgv_core::experiments::read_report_csv;
use tgv_core::pgm::{read_image, write_image, PgmFormat, PgmImage};

fn tgv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgv")).args(args).output().expect("spawn tgv")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_succeeds() {
    let out = tgv(&["verify"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 10);
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&tgv(&["--help"])), 0);
    assert_eq!(code(&tgv(&["denoise", "--help"])), 0);
}

#[test]
fn denoise_constant_image_is_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let (input, output) = (dir.path().join("in.pgm"), dir.path().join("out.pgm"));
    let image = PgmImage {
        width: 12,
        height: 9,
        maxval: 255,
        samples: vec![117; 108],
    };
    write_image(&image, &input, PgmFormat::Plain).unwrap();
    let out = tgv(&["denoise", "--input", path(&input), "--output", path(&output), "--model", "tgv2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_image(&output).unwrap(), image);
}

#[test]
fn sweep_writes_one_row_per_beta() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let out = tgv(&[
        "sweep-beta", "--size", "17", "--betas", "20,5,0.5", "--max-iters", "3000", "--out-dir", path(&out_dir),
        "--threads", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_report_csv(&out_dir.join("report.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r.beta).collect::<Vec<_>>(), vec![20.0, 5.0, 0.5]);
    let manifest = fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("rows = 3"), "{manifest}");
    assert!(out_dir.join("u_00.pgm").exists());
}

#[test]
fn iteration_cap_reports_not_converged() {
    let dir = tempfile::tempdir().unwrap();
    let out = tgv(&["sweep-beta", "--size", "17", "--betas", "5", "--max-iters", "3", "--out-dir", path(dir.path())]);
    assert_eq!(code(&out), 6);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "size = 17\nbetas = 7, 3\nmax-iters = 3000\n").unwrap();
    let out_dir = dir.path().join("o");
    let out = tgv(&["--config", path(&cfg), "sweep-beta", "--betas", "4", "--out-dir", path(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_report_csv(&out_dir.join("report.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].beta, 4.0);
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.pgm");
    fs::write(&bad, b"P5\n4 4\n255\n\x00\x01").unwrap();
    let out_file = dir.path().join("out.pgm");

    assert_eq!(code(&tgv(&["bogus"])), 2);
    assert_eq!(code(&tgv(&["denoise", "--alpha", "-1", "--input", path(&bad), "--output", "x.pgm"])), 3);
    assert_eq!(code(&tgv(&["denoise", "--output", path(&out_file)])), 4);
    assert_eq!(code(&tgv(&["denoise", "--input", "/nonexistent/in.pgm", "--output", path(&out_file)])), 4);
    let out = tgv(&["denoise", "--input", path(&bad), "--output", path(&out_file)]);
    assert_eq!(code(&out), 8);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    // Failed runs leave nothing behind.
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("bad.pgm")]);
}

#[test]
fn approx_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("approx.csv");
    let out = tgv(&["approx", "--size", "33", "--scales", "4,2,1.5,1.1", "--output", path(&csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("scale,u_l1,w_l1"));
}
