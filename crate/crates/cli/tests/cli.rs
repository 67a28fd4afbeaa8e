use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn labelcil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelcil"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p)
        .unwrap_or_else(|e| panic!("{}: {e}", p.display()))
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn run_emits_reports_per_seed_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = labelcil(&["run", "--config", s(&fixture()), "--out", s(&out), "--threads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for seed in [0, 1] {
        for m in ["vanilla-classifier", "vag"] {
            let d = out.join(format!("seed_{seed}/{m}"));
            let acc = lines(&d.join("accuracy.csv"));
            assert_eq!(acc[0], "after_task,task,accuracy");
            assert_eq!(acc.len(), 1 + 3, "two tasks give a 3-entry triangle");
            let conf = lines(&d.join("confusion.csv"));
            assert_eq!(conf.len(), 1 + 4);
            assert_eq!(lines(&d.join("nc.csv")).len(), 1 + 3);
            assert!(d.join("report.json").exists());
        }
    }
    let metrics = lines(&out.join("metrics.csv"));
    assert_eq!(metrics[0], "seed,method,task,accuracy,nc,last_task_bias");
    assert_eq!(metrics.len(), 1 + 2 * 2 * 2);
    assert!(lines(&out.join("curve.csv"))[0].starts_with("method,task,seeds"));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("vag") && summary.contains("±"));
    let echoed = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echoed.contains("d_model = 8"));
}

#[test]
fn reruns_are_byte_identical_and_report_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = labelcil(&["run", "--config", s(&fixture()), "--out", s(out), "--seeds", "3"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.csv", "curve.csv", "summary.txt", "seed_3/vag/confusion.csv", "seed_3/vag/nc.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rep = dir.path().join("rep");
    let o = labelcil(&["report", s(&a), s(&b), "--out", s(&rep)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(rep.join("summary.txt")).unwrap();
    let sections: Vec<Vec<&str>> = text
        .split("== ")
        .filter(|x| !x.is_empty())
        .map(|sec| sec.lines().skip(1).collect())
        .collect();
    assert_eq!(sections.len(), 2);
    assert_eq!(sections[0], sections[1]);
    let curve = lines(&rep.join("curve.csv"));
    assert!(curve[0].starts_with("run,method,task"));
    assert_eq!(curve.len(), 1 + 2 * 2 * 2);
}

#[test]
fn sweep_writes_one_column_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = labelcil(&[
        "sweep",
        "--config",
        s(&fixture()),
        "--out",
        s(&out),
        "--seeds",
        "0",
        "--param",
        "train.lambda_lpr=0,0.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = lines(&out.join("sweep.csv"));
    assert_eq!(rows[0], "method,seed,train.lambda_lpr=0,train.lambda_lpr=0.5");
    // two methods, each with seed 0 and a mean row
    assert_eq!(rows.len(), 1 + 2 * 2);
    assert!(rows.iter().skip(1).all(|r| r.split(',').count() == 4 && !r.ends_with(',')));
    assert!(out.join("train.lambda_lpr=0.5/metrics.csv").exists());
    assert!(lines(&out.join("status.csv")).iter().skip(1).all(|l| l.contains(",ok,")));
}

#[test]
fn gen_data_writes_dataset_and_streams_that_run_accepts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = labelcil(&["gen-data", "--config", s(&fixture()), "--out", s(&out), "--seeds", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&out.join("dataset.jsonl")).len(), 4 * (6 + 2 + 3));
    let stream = out.join("seed_5");
    assert!(stream.join("manifest.json").exists());
    assert_eq!(lines(&stream.join("task_2_test.jsonl")).len(), 2 * 3);

    let text = fs::read_to_string(fixture()).unwrap();
    let tail = &text[text.find("[model]").unwrap()..];
    let cfg = dir.path().join("stream.toml");
    fs::write(
        &cfg,
        format!("methods = [\"vanilla-classifier\", \"vag\"]\n\n[data]\nstream = {:?}\n\n{tail}", s(&stream)),
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = labelcil(&["run", "--config", s(&cfg), "--out", s(&run), "--seeds", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&run.join("metrics.csv")).len(), 1 + 2 * 2);
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "methods = [\"vag\"]\n\n[train]\nlearning_rate = 1\n").unwrap();
    let o = labelcil(&["run", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml") && err.contains("line 4"), "{err}");

    let mismatch = dir.path().join("mismatch.toml");
    fs::write(&mismatch, "[data.synthetic]\nclasses = 21\n").unwrap();
    let o = labelcil(&["run", "--config", s(&mismatch)]);
    assert_eq!(o.status.code(), Some(2));

    let o = labelcil(&["run", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = labelcil(&["sweep", "--config", s(&fixture()), "--param", "train.epochs=2,-1"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    let o = labelcil(&["run"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let missing = dir.path().join("nope.jsonl");
    fs::write(&cfg, format!("[data]\npath = {:?}\ntasks = 2\nclasses_per_task = 2\n", s(&missing))).unwrap();
    let o = labelcil(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let o = labelcil(&["report", s(&dir.path().join("no-such-run"))]);
    assert_eq!(o.status.code(), Some(3));
}
