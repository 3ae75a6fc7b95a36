use std::path::Path;
use std::process::{Command, Output};

fn rbe(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_rbe"))
        .args(args)
        .current_dir(dir)
        .env_remove("RBE_REPORT_DIR")
        .output()
        .expect("spawn rbe");
    out
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = rbe(args, dir);
    assert!(
        out.status.success(),
        "rbe {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TRAIN_FLAGS: &[&str] = &[
    "--code-dim", "16", "--B", "2", "--batch-size", "32", "--queue-len", "128", "--hard-top-k", "16",
    "--epochs", "2", "--momentum-coef", "0.9", "--learning-rate", "0.01",
];

#[test]
fn end_to_end_flat_and_ivf() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["gen-data", "--out", "data", "--clusters", "60", "--per-cluster", "5", "--dim", "24", "--sigma", "0.1"], dir);
    for f in ["data/data.embf", "data/data.embf.ids", "data/pairs.embp", "data/truth.embg"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }

    let mut train = vec!["train", "--data", "data/data.embf", "--pairs", "data/pairs.embp", "--out", "model.rbem", "--report", "train.csv"];
    train.extend_from_slice(TRAIN_FLAGS);
    ok(&train, dir);
    let report = std::fs::read_to_string(dir.join("train.csv")).unwrap();
    assert!(report.lines().any(|l| l == "# batch_size=32"));
    assert!(report.lines().any(|l| l.starts_with("step,loss")));

    ok(&["encode", "--model", "model.rbem", "--data", "data/data.embf", "--out", "codes"], dir);
    assert!(dir.join("codes/manifest.txt").exists());

    ok(&["build-index", "--model", "model.rbem", "--data", "data/data.embf", "--out", "flat", "--B", "2"], dir);
    ok(
        &["build-index", "--model", "model.rbem", "--data", "data/data.embf", "--out", "ivf", "--type", "ivf", "--nlist", "6"],
        dir,
    );

    let mut recalls = Vec::new();
    for (index, kernel, extra) in [
        ("flat", "bitwise", vec![]),
        ("flat", "sdc-exact", vec![]),
        ("ivf", "sdc-exact", vec!["--nprobe", "6"]),
    ] {
        let results = format!("{index}-{kernel}.csv");
        let mut args = vec![
            "search", "--index", index, "--model", "model.rbem", "--queries", "data/data.embf", "--kernel", kernel, "--k", "4",
            "--exclude-self", "--out", &results,
        ];
        args.extend(extra);
        ok(&args, dir);
        let text = std::fs::read_to_string(dir.join(&results)).unwrap();
        assert_eq!(text.lines().count(), 1 + 300 * 4);
        let line = ok(&["eval", "--results", &results, "--truth", "data/truth.embg", "--k", "4"], dir);
        let recall: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&recall), "{line}");
        recalls.push(recall);
    }
    // Exact kernels agree, and probing every list is exhaustive.
    assert_eq!(recalls[0], recalls[1]);
    assert_eq!(recalls[1], recalls[2]);

    let csv = ok(
        &[
            "bench", "--index", "flat", "--model", "model.rbem", "--query-file", "data/data.embf", "--queries", "20",
            "--kernels", "bitwise,sdc-exact", "--float-data", "data/data.embf",
        ],
        dir,
    );
    let kernels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(kernels, ["bitwise", "sdc-exact", "float"]);
}

#[test]
fn train_bc_runs_against_old_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["gen-data", "--out", "data", "--clusters", "40", "--per-cluster", "4", "--dim", "16"], dir);
    let mut train = vec!["train", "--data", "data/data.embf", "--pairs", "data/pairs.embp", "--out", "old.rbem"];
    train.extend_from_slice(TRAIN_FLAGS);
    ok(&train, dir);
    let mut bc = vec![
        "train-bc", "--data", "data/data.embf", "--old-data", "data/data.embf", "--old-model", "old.rbem", "--pairs",
        "data/pairs.embp", "--out", "new.rbem", "--model-seed", "3", "--report", "bc.csv",
    ];
    bc.extend_from_slice(TRAIN_FLAGS);
    ok(&bc, dir);
    let report = std::fs::read_to_string(dir.join("bc.csv")).unwrap();
    let last = report.lines().last().unwrap();
    let bc_loss: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
    assert!(bc_loss > 0.0, "{last}");
}

#[test]
fn run_writes_reports_under_env_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("exp.txt"),
        "name=tiny\nnum_clusters=80\nper_cluster=5\ndim=16\nlatent_dim=8\ntrain_clusters=40\nnum_queries=20\n\
         total_bits=32\nk=4\ntrain.batch_size=32\ntrain.queue_len=64\ntrain.hard_top_k=8\ntrain.epochs=1\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rbe"))
        .args(["run", "--config", "exp.txt"])
        .current_dir(dir)
        .env("RBE_REPORT_DIR", dir.join("reports-env"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.txt", "version.txt", "recall.csv", "summary.txt"] {
        assert!(dir.join("reports-env/tiny").join(f).exists(), "{f} missing");
    }
}

#[test]
fn errors_are_reported_not_panicked() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = rbe(&["encode", "--model", "missing.rbem", "--data", "nope.embf", "--out", "x"], dir);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing.rbem") || err.contains("nope.embf"), "{err}");

    std::fs::write(dir.join("bad.txt"), "nope=1\n").unwrap();
    let out = rbe(&["run", "--config", "bad.txt"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let out = rbe(&["search", "--index", "x", "--model", "m", "--queries", "q", "--kernel", "fastest"], dir);
    assert!(!out.status.success());
}

#[test]
fn import_csv_round_trips_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("rows.csv"), "1,0,0\n0,0.5,0.25\n").unwrap();
    let out = rbe(&["import-csv", "--input", "rows.csv", "--out", "rows.embf"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("2 rows of dimension 3"));
    std::fs::write(dir.join("ragged.csv"), "1,0\n1\n").unwrap();
    assert!(!rbe(&["import-csv", "--input", "ragged.csv", "--out", "r.embf"], dir).status.success());
}
