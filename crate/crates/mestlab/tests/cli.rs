//! Black-box tests of the command-line interface: round trips through the
//! file formats, manifest emission, and exit codes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mestlab"))
}

fn write_lines(path: &Path, rows: &[&str]) {
    std::fs::write(path, rows.join("\n") + "\n").unwrap();
}

#[test]
fn design_gen_fit_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let design = dir.path().join("x.csv");
    let fitfile = dir.path().join("fit.json");

    let st = bin()
        .args(["design", "gen", "--family", "iid(gaussian)", "--n", "40", "--p", "5"])
        .args(["--seed", "7", "--out"])
        .arg(&design)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(design.with_extension("manifest.json").exists());

    let x = mestlab::io::read_matrix(&design).unwrap();
    assert_eq!((x.nrows(), x.ncols()), (40, 5));
    let y: Vec<String> = (0..40).map(|i| format!("{}", ((i * 7919) % 13) as f64 / 13.0 - 0.5)).collect();
    let y_refs: Vec<&str> = y.iter().map(String::as_str).collect();
    let response = dir.path().join("y.csv");
    write_lines(&response, &y_refs);

    let st = bin()
        .args(["fit", "--design"])
        .arg(&design)
        .args(["--response"])
        .arg(&response)
        .args(["--loss", "square", "--out"])
        .arg(&fitfile)
        .status()
        .unwrap();
    assert!(st.success());

    let text = std::fs::read_to_string(&fitfile).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(parsed["converged"].as_bool().unwrap());
    assert_eq!(parsed["beta"].as_array().unwrap().len(), 5);
    assert_eq!(parsed["loss"]["kind"], "Square");
    assert!(fitfile.with_extension("manifest.json").exists());

    // the reported beta matches an in-process square-loss fit
    let yv = mestlab::io::read_vector(&response).unwrap();
    let d = mestlab::design::DesignMatrix::new(x, false, None).unwrap();
    let reference = mestlab::solver::fit(
        &d,
        &yv,
        &mestlab::loss::LossSpec::square(),
        &mestlab::solver::SolverOptions::default(),
    )
    .unwrap();
    for (k, v) in parsed["beta"].as_array().unwrap().iter().enumerate() {
        assert!((v.as_f64().unwrap() - reference.beta[k]).abs() < 1e-12);
    }
}

#[test]
fn loo_and_jackknife_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let design = dir.path().join("x.csv");
    let st = bin()
        .args(["design", "gen", "--family", "iid(uniform)", "--n", "30", "--p", "4"])
        .args(["--seed", "3", "--out"])
        .arg(&design)
        .status()
        .unwrap();
    assert!(st.success());

    let y: Vec<String> = (0..30).map(|i| format!("{}", (i as f64 * 0.37).sin())).collect();
    let y_refs: Vec<&str> = y.iter().map(String::as_str).collect();
    let response = dir.path().join("y.csv");
    write_lines(&response, &y_refs);

    let loo_out = dir.path().join("loo.csv");
    let st = bin()
        .args(["loo", "--design"])
        .arg(&design)
        .args(["--response"])
        .arg(&response)
        .args(["--coords", "1,3", "--out"])
        .arg(&loo_out)
        .status()
        .unwrap();
    assert!(st.success());
    let text = std::fs::read_to_string(&loo_out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3); // header + two coordinates
    assert!(lines[0].starts_with("j,bj,beta_j"));
    assert!(lines[1].starts_with("1,"));
    assert!(lines[2].starts_with("3,"));

    let jk_out = dir.path().join("jk.json");
    let st = bin()
        .args(["jackknife", "--design"])
        .arg(&design)
        .args(["--response"])
        .arg(&response)
        .args(["--loss", "square", "--coord", "2", "--out"])
        .arg(&jk_out)
        .status()
        .unwrap();
    assert!(st.success());
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&jk_out).unwrap()).unwrap();
    let var: f64 = parsed["variance"].as_str().unwrap().parse().unwrap();
    assert!(var > 0.0);
}

#[test]
fn coverage_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cov.conf");
    std::fs::write(
        &config,
        "# tiny smoke cell\nfamily = iid(gaussian)\nn_list = 60\nkappa = 0.5\nouter_reps = 2\ninner_reps = 40\ncoords = 1,2\nalpha = 0.05\nbonferroni = true\nseed = 42\n",
    )
    .unwrap();
    let run = |out: &Path| {
        let st = bin()
            .args(["--threads", "2", "coverage", "--config"])
            .arg(&config)
            .args(["--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
        std::fs::read(out.join("coverage.csv")).unwrap()
    };
    let a = run(&dir.path().join("out_a"));
    let b = run(&dir.path().join("out_b"));
    assert_eq!(a, b);
    assert!(dir.path().join("out_a/summary.csv").exists());
    assert!(dir.path().join("out_a/manifest.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // missing input file: usage/configuration error -> 2
    let st = bin()
        .args(["fit", "--design", "/nonexistent/x.csv", "--response", "/nonexistent/y.csv"])
        .args(["--out"])
        .arg(dir.path().join("fit.json"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));

    // rank-deficient design: numerical failure -> 3
    let design = dir.path().join("singular.csv");
    write_lines(
        &design,
        &["1,1", "2,2", "3,3", "4,4", "5,5", "6,6", "7,7", "8,8"],
    );
    let response = dir.path().join("y.csv");
    write_lines(&response, &["0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8"]);
    let st = bin()
        .args(["fit", "--design"])
        .arg(&design)
        .args(["--response"])
        .arg(&response)
        .args(["--out"])
        .arg(dir.path().join("fit.json"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
}
