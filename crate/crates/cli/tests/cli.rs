use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn boxqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxqa"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const KGT: &str = "\
Alice\tworks_on\tP1
Alice\tworks_on\tP2
Bob\tworks_on\tP2
Bob\tworks_on\tP3
P1\trelated\tP2
P2\trelated\tP3
Carol\tworks_on\tP3
";

/// A ring of 40 entities with two relations, dense enough to sample every template.
fn ring(dir: &Path) {
    let mut text = String::new();
    for i in 0..40 {
        for (r, step) in [("a", 1), ("b", 3)] {
            text.push_str(&format!("n{i}\t{r}\tn{}\n", (i + step) % 40));
            text.push_str(&format!("n{i}\t{r}\tn{}\n", (i + step + 1) % 40));
        }
    }
    fs::write(dir.join("ring.tsv"), text).unwrap();
}

#[test]
fn stats_reports_counts() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("kg.tsv"), KGT).unwrap();
    let out = boxqa(tmp.path(), &["--graph", "kg.tsv", "stats", "--json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["entities"], 6);
    assert_eq!(v["edges"], 7);
    assert_eq!(v["relation_types"], 2);

    let text = boxqa(tmp.path(), &["--graph", "kg.tsv", "stats"]);
    assert!(stdout(&text).contains("edges           7"));
}

#[test]
fn missing_graph_fails_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = boxqa(
        tmp.path(),
        &[
            "--graph", "nope.tsv", "--out", "run", "--seed", "1", "split",
        ],
    );
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("graph_path"), "{}", stderr(&out));

    let out = boxqa(tmp.path(), &["stats"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("graph_path"));
}

#[test]
fn sampling_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    ring(tmp.path());
    let files = [
        "split.json",
        "dataset/train.jsonl",
        "dataset/val.jsonl",
        "dataset/test.jsonl",
        "dataset/manifest.json",
    ];
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = boxqa(
            tmp.path(),
            &[
                "--graph",
                "ring.tsv",
                "--out",
                run,
                "--seed",
                "7",
                "--set",
                "quota=10,2,5",
                "sample",
            ],
        );
        assert!(out.status.success(), "{}", stderr(&out));
        runs.push(
            files
                .iter()
                .map(|f| fs::read(tmp.path().join(run).join(f)).unwrap())
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(runs[0], runs[1]);
    assert!(!runs[0][1].is_empty());
}

#[test]
fn invalid_gamma_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    ring(tmp.path());
    let out = boxqa(
        tmp.path(),
        &[
            "--graph", "ring.tsv", "--out", "run", "--seed", "1", "--set", "gamma=-1", "train",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("gamma"), "{}", stderr(&out));
    assert!(!tmp.path().join("run/checkpoints").exists());
}

#[test]
fn full_pipeline_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    ring(tmp.path());
    fs::write(
        tmp.path().join("run.cfg"),
        "graph_path = ring.tsv\nout_dir = run\nseed = 3\nquota = 10,2,5\ndim = 4\nmax_steps = 40\neval_every = 20\n",
    )
    .unwrap();
    for cmd in [
        vec!["sample"],
        vec!["train"],
        vec!["eval"],
        vec!["report", "--emit", "csv"],
    ] {
        let mut args = vec!["--config", "run.cfg"];
        args.extend(cmd);
        let out = boxqa(tmp.path(), &args);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
    }
    let run = tmp.path().join("run");
    for f in [
        "checkpoints/best.json",
        "train_log.csv",
        "reports/eval_test.json",
        "run_manifest.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(run.join("reports/report_test.csv")).unwrap();
    assert!(csv.starts_with("template,metric,value"));
}
