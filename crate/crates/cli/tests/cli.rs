use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tsdlab::spectral::{io, svd, Matrix};

fn tsdlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsdlab"))
        .current_dir(dir)
        .arg("-q")
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let at = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| l.split(',').nth(at).unwrap().to_string())
        .collect()
}

fn write_pair(dir: &Path) -> (PathBuf, PathBuf) {
    let w = Matrix::from_fn(6, 9, |i, j| {
        ((i + 1) as f64 * (j + 2) as f64 * 0.7 + (j * j) as f64 * 0.3).sin()
    });
    let f = svd(&w).unwrap();
    assert!(f.sigma.windows(2).all(|p| p[0] - p[1] > 1e-3) && f.sigma[5] > 1e-3);
    let mut w_star = w.clone();
    w_star.add_outer(&f.left(2), f.vt.row(2), 3.0 * f.sigma[2]);
    w_star.add_outer(&f.left(4), f.vt.row(4), -2.0 * f.sigma[4]);
    let (a, b) = (dir.join("w.tsdw"), dir.join("w_star.csv"));
    io::write_matrix(&a, &w).unwrap();
    io::write_matrix(&b, &w_star).unwrap();
    (a, b)
}

#[test]
fn identical_weights_give_a_flat_spectrum() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, _) = write_pair(tmp.path());
    let w = w.to_str().unwrap();
    let out = tsdlab(
        tmp.path(),
        &["oracle", "--w", w, "--w-star", w, "--out", "o"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("o/spectrum.csv")).unwrap();
    assert!(column(&csv, "abs")
        .iter()
        .all(|v| v.parse::<f64>().unwrap() == 0.0));
}

#[test]
fn planted_pair_spikes_at_the_planted_indices() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, ws) = write_pair(tmp.path());
    let out = tsdlab(
        tmp.path(),
        &[
            "oracle",
            "--w",
            w.to_str().unwrap(),
            "--w-star",
            ws.to_str().unwrap(),
            "--out",
            "o",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("o/spectrum.csv")).unwrap();
    let rates: Vec<f64> = column(&csv, "signed")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    assert!((rates[2] - 3.0).abs() < 1e-5);
    assert!((rates[4] + 2.0).abs() < 1e-5);
    for i in [0, 1, 3, 5] {
        assert!(rates[i].abs() < 1e-10, "index {i}: {}", rates[i]);
    }
    let ranks = column(&csv, "rank");
    assert_eq!((ranks[2].as_str(), ranks[4].as_str()), ("0", "1"));
}

#[test]
fn missing_input_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tsdlab(
        tmp.path(),
        &[
            "oracle",
            "--w",
            "nope.tsdw",
            "--w-star",
            "nope.tsdw",
            "--out",
            "o",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.tsdw"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn config_errors_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("bad.cfg"),
        "steps = 10\n# note\nlr = fast\n",
    )
    .unwrap();
    let out = tsdlab(tmp.path(), &["train", "--config", "bad.cfg", "--out", "o"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    fs::write(tmp.path().join("typo.cfg"), "stepz = 10\n").unwrap();
    let out = tsdlab(tmp.path(), &["train", "--config", "typo.cfg", "--out", "o"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("stepz"));

    let out = tsdlab(tmp.path(), &["train", "--set", "steps", "--out", "o"]);
    assert_eq!(code(&out), 2);
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn divergence_exits_with_numeric_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tsdlab(
        tmp.path(),
        &[
            "train",
            "--set",
            "lr=1e6",
            "--set",
            "steps=200",
            "--out",
            "o",
        ],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn zero_learning_rate_keeps_validation_loss_flat() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tsdlab(
        tmp.path(),
        &[
            "train",
            "--set",
            "lr=0",
            "--set",
            "steps=40",
            "--set",
            "t_prelaunch=20",
            "--set",
            "record_every=10",
            "--out",
            "o",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("o/trace.csv")).unwrap();
    let vals: Vec<String> = column(&csv, "val_loss")
        .into_iter()
        .filter(|v| !v.is_empty())
        .collect();
    assert_eq!(vals.len(), 4);
    assert!(vals.iter().all(|v| *v == vals[0]));
}

#[test]
fn dash_defaults_and_flag_precedence_show_in_effective_config() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("run.cfg"),
        "method = dash\nseed = 4\nsteps = 120\n",
    )
    .unwrap();
    let out = tsdlab(
        tmp.path(),
        &["train", "--config", "run.cfg", "--seed", "9", "--out", "o"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = fs::read_to_string(tmp.path().join("o/effective_config.txt")).unwrap();
    let lines: Vec<&str> = cfg.lines().collect();
    for want in [
        "t_prelaunch=100",
        "s_dash=8",
        "epsilon=0.000001",
        "seed=9",
        "method=dash",
    ] {
        assert!(lines.contains(&want), "{want} missing from\n{cfg}");
    }
    assert_eq!(lines.iter().filter(|l| l.starts_with("seed=")).count(), 1);
}

#[test]
fn analyze_reports_alignment_only_with_a_dash_term() {
    let tmp = tempfile::tempdir().unwrap();
    for (dir, method) in [("lora", "lora"), ("dash", "dash")] {
        let out = tsdlab(
            tmp.path(),
            &[
                "train",
                "--set",
                &format!("method={method}"),
                "--set",
                "steps=120",
                "--out",
                dir,
            ],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let state = format!("{dir}/state");
        let out = tsdlab(
            tmp.path(),
            &["analyze", "--state", &state, "--out", &format!("{dir}-a")],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let lora = fs::read_to_string(tmp.path().join("lora-a/analysis.csv")).unwrap();
    let dash = fs::read_to_string(tmp.path().join("dash-a/analysis.csv")).unwrap();
    assert!(!column(&lora, "precision")[0].is_empty());
    assert!(column(&lora, "amp_dash")[0].is_empty());
    assert!(column(&lora, "tsd_ltsd")[0].is_empty());
    assert!(!column(&dash, "amp_dash")[0].is_empty());
    assert!(!column(&dash, "tsd_ltsd")[0].is_empty());
}

#[test]
fn empty_runs_give_a_header_only_report() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("runs")).unwrap();
    let out = tsdlab(tmp.path(), &["report", "--runs", "runs", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("o/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("method,mode,t,s,seed,"));
}

#[test]
fn ablate_then_report_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "ablate",
        "--set",
        "methods=dash",
        "--set",
        "direction_modes=tsd,random",
        "--set",
        "seeds=0,1",
        "--set",
        "steps=150",
    ];
    for out_dir in ["a", "b"] {
        let mut full = args.to_vec();
        full.extend(["--out", out_dir]);
        let out = tsdlab(tmp.path(), &full);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let out = tsdlab(tmp.path(), &["report", "--runs", "a/runs", "--out", "c"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let read = |p: &str| fs::read(tmp.path().join(p)).unwrap();
    let report = String::from_utf8(read("a/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 4);
    assert_eq!(read("a/report.csv"), read("b/report.csv"));
    assert_eq!(read("a/report.json"), read("b/report.json"));
    assert_eq!(read("a/report.csv"), read("c/report.csv"));
    assert_eq!(
        read("a/plotdata/pr_vs_step.csv"),
        read("c/plotdata/pr_vs_step.csv")
    );
}
