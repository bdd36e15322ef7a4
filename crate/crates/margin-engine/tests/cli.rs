//! End-to-end tests of the command-line binary.

use std::io::Write;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_margin-engine"))
}

fn write_data(dir: &Path) -> std::path::PathBuf {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let path = dir.join("data.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "y,x,z,group").unwrap();
    for _ in 0..300 {
        let x: f64 = rng.gen_range(-2.0..2.0);
        let z: f64 = rng.gen_range(0.2..3.0);
        let g = ["A", "B", "C"][rng.gen_range(0..3)];
        let eta = 0.3 + 0.8 * x - 0.4 * z
            + match g {
                "B" => 0.5,
                "C" => -0.6,
                _ => 0.0,
            };
        let p = 1.0 / (1.0 + (-eta as f64).exp());
        let y = (rng.gen_range(0.0..1.0) < p) as u8;
        writeln!(f, "{y},{x},{z},{g}").unwrap();
    }
    path
}

#[test]
fn fit_then_margins_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let model = dir.path().join("model.json");
    let out = bin()
        .args([
            "fit",
            "--data",
            data.to_str().unwrap(),
            "--formula",
            "y ~ x * group + log1p(z)",
            "--family",
            "binomial",
            "--out",
            model.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(model.exists());

    let out = bin()
        .args([
            "margins",
            "--data",
            data.to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("EffectsResult:"), "{text}");
    assert!(text.contains("N=300"), "{text}");
    assert!(text.contains("dy/dx"), "{text}");
}

#[test]
fn margins_json_and_csv_formats() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    for format in ["json", "csv"] {
        let out = bin()
            .args([
                "margins",
                "--data",
                data.to_str().unwrap(),
                "--formula",
                "y ~ x + group",
                "--format",
                format,
                "--include-gradients",
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        if format == "json" {
            let v: serde_json::Value = serde_json::from_str(&text).unwrap();
            assert!(v["effects"].as_array().unwrap().len() >= 3);
            assert!(v["effects"][0]["gradient"].is_array());
        } else {
            assert!(text.starts_with("variable,contrast,"), "{text}");
            assert!(text.contains("gradient_0"), "{text}");
        }
    }
}

#[test]
fn seconddiff_categorical_moderator() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let out = bin()
        .args([
            "seconddiff",
            "--data",
            data.to_str().unwrap(),
            "--formula",
            "y ~ x * group",
            "--family",
            "binomial",
            "--focal",
            "x",
            "--moderator",
            "group",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Delta(dy/dx)"), "{text}");
    assert!(text.contains(" vs "), "{text}");
}

#[test]
fn seconddiff_continuous_moderator_at_points() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let out = bin()
        .args([
            "seconddiff",
            "--data",
            data.to_str().unwrap(),
            "--formula",
            "y ~ x * z",
            "--focal",
            "x",
            "--moderator",
            "z",
            "--at",
            "0.5,1.5,2.5",
            "--format",
            "csv",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    // header plus one row per point
    assert_eq!(text.lines().count(), 4, "{text}");
}

#[test]
fn matrix_dump_program_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let run = || {
        let out = bin()
            .args([
                "matrix",
                "--data",
                data.to_str().unwrap(),
                "--formula",
                "y ~ x * group + log1p(z)",
                "--dump-program",
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert!(a.contains("contrast group"), "{a}");
    assert!(a.contains("mulspan"), "{a}");
    // the dump parses back into a structural listing
    margin_engine::compiler::parse_program(&a).unwrap();
}

#[test]
fn byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let run = |threads: &str| {
        let out = bin()
            .args([
                "margins",
                "--data",
                data.to_str().unwrap(),
                "--formula",
                "y ~ x * group + log1p(z)",
                "--family",
                "binomial",
                "--format",
                "json",
                "--threads",
                threads,
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let a = run("1");
    let b = run("2");
    let c = run("8");
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn errors_are_single_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let out = bin()
        .args([
            "margins",
            "--data",
            data.to_str().unwrap(),
            "--formula",
            "y ~ x +",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn profile_grid_quantiles() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let out = bin()
        .args([
            "profile",
            "--data",
            data.to_str().unwrap(),
            "--formula",
            "y ~ x + z + group",
            "--grid",
            "quantiles",
            "--values",
            "x:0.25,0.5,0.75",
            "--vars",
            "x",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("profile effects"), "{text}");
    assert!(text.contains("at_x"), "{text}");
}

#[test]
fn contrast_between_group_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let out = bin()
        .args([
            "contrast",
            "--data",
            data.to_str().unwrap(),
            "--formula",
            "y ~ x * group",
            "--family",
            "binomial",
            "--vars",
            "x",
            "--scenarios",
            "group=A,B",
            "--first",
            "at:group=A",
            "--second",
            "at:group=B",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Contrast"), "{text}");
}

#[test]
fn bench_complexity_orders_formulas() {
    let out = bin()
        .args([
            "bench", "--suite", "complexity", "--n", "20000", "--reps", "3", "--format",
            "json",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    let reports = v.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    let simple = reports[0]["median_ns_per_row"].as_f64().unwrap();
    let complex = reports[1]["median_ns_per_row"].as_f64().unwrap();
    assert!(simple < complex, "simple {simple} !< complex {complex}");
    assert_eq!(reports[0]["bytes_per_row"].as_u64().unwrap(), 0);
    assert_eq!(reports[1]["bytes_per_row"].as_u64().unwrap(), 0);
}
