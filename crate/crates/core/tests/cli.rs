use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn perfquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perfquant"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let o = perfquant(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_map(p: &Path) -> Vec<f32> {
    let b = fs::read(p).unwrap();
    b[26..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[test]
fn simulate_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let spec = d.path().join("phantom.json");
    fs::write(&spec, r#"{"noise_sd": 5.0, "rv_lead_s": 2.0}"#).unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&["simulate", "--config", s(&spec), "--seed", "7", "--out", s(&a)]);
    ok(&["simulate", "--config", s(&spec), "--seed", "7", "--out", s(&b)]);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 10);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn nlls_and_zero_weight_bayes_agree_on_noise_free_phantom() {
    let d = tempfile::tempdir().unwrap();
    let p = |n: &str| d.path().join(n);
    ok(&["simulate", "--seed", "1", "--out", s(&p("sim"))]);
    ok(&["convert", s(&p("sim")), "--out", s(&p("conv"))]);
    ok(&["fit", s(&p("conv")), "--out", s(&p("nlls")), "--method", "nlls"]);
    ok(&[
        "fit",
        s(&p("conv")),
        "--out",
        s(&p("bayes")),
        "--method",
        "bayes",
        "--spatial-weight",
        "0",
    ]);
    let a = read_map(&p("nlls/map_mbf.pqis"));
    let b = read_map(&p("bayes/map_mbf.pqis"));
    assert!(p("bayes/sd_mbf.pqis").is_file());
    let mut n = 0;
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.is_nan(), y.is_nan());
        if x.is_finite() {
            assert!((y / x - 1.0).abs() < 0.02, "{x} vs {y}");
            n += 1;
        }
    }
    assert!(n > 100);
}

#[test]
fn bad_magic_is_a_validation_error_naming_the_offset() {
    let d = tempfile::tempdir().unwrap();
    let sim = d.path().join("sim");
    ok(&["simulate", "--seed", "0", "--out", s(&sim)]);
    let series = sim.join("series.pqis");
    let mut b = fs::read(&series).unwrap();
    b[1] = b'X';
    fs::write(&series, b).unwrap();
    let o = perfquant(&["moco", s(&sim), "--out", s(&d.path().join("m"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("offset 1"), "{err}");
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(perfquant(&["--help"]).status.code(), Some(0));
    assert_eq!(perfquant(&["bogus"]).status.code(), Some(1));
    assert_eq!(
        perfquant(&["fit", s(d.path()), "--out", "x", "--method", "lsq"])
            .status
            .code(),
        Some(1)
    );
    let cfg = d.path().join("run.json");
    fs::write(&cfg, r#"{"fit": {"metod": "nlls"}}"#).unwrap();
    let o = perfquant(&[
        "convert",
        s(d.path()),
        "--out",
        s(&d.path().join("o")),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("metod"));
    // A directory without a series is missing input files, not bad input.
    let o = perfquant(&["moco", s(d.path()), "--out", s(&d.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_renders_windowed_maps() {
    let d = tempfile::tempdir().unwrap();
    let p = |n: &str| d.path().join(n);
    ok(&["simulate", "--seed", "2", "--out", s(&p("sim"))]);
    ok(&["convert", s(&p("sim")), "--out", s(&p("conv"))]);
    ok(&["fit", s(&p("conv")), "--out", s(&p("fit"))]);
    ok(&["analyze", s(&p("fit")), "--out", s(&p("an")), "--threshold", "2.5"]);
    ok(&[
        "report",
        s(&p("an")),
        "--out",
        s(&p("rep")),
        "--wmin",
        "0",
        "--wmax",
        "4",
    ]);
    let pgm = fs::read(p("rep/map_mbf.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    assert_eq!(pgm.len(), 13 + 64 * 64);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(p("rep/report.json")).unwrap()).unwrap();
    assert_eq!(report["vessels"]["patient"]["threshold"], 2.5);
    assert_eq!(report["vessels"]["patient"]["patient_positive"], true);
    assert_eq!(
        perfquant(&[
            "report",
            s(&p("an")),
            "--out",
            s(&p("r2")),
            "--wmin",
            "3",
            "--wmax",
            "1"
        ])
        .status
        .code(),
        Some(1)
    );
}
