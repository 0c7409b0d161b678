use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn demo(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/demo").join(file)
}

fn squadrank(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_squadrank"))
        .arg("--config")
        .arg(demo("config.toml"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = squadrank(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn ranked_ids(path: PathBuf, key: &str) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v[key]
                .as_array()
                .unwrap()
                .iter()
                .map(|e| e["item_id"].as_str().unwrap().to_string())
                .collect()
        })
        .collect()
}

#[test]
fn pipeline_lifts_recall_over_coarse_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["pipeline", "--transcripts"]);
    assert!(stdout.contains("R@1"));
    for f in ["pools.jsonl", "rankings.jsonl", "transcripts.jsonl", "metrics.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let fused = json(dir.path().join("metrics.json"));
    assert_eq!(fused["r1"], 1.0);
    assert!(fused["grouped"]["conditions"]["rain"].is_object());

    let pools = dir.path().join("pools.jsonl");
    ok(dir.path(), &["evaluate", "--pools", pools.to_str().unwrap()]);
    let coarse = json(dir.path().join("metrics.json"));
    assert!(coarse["r1"].as_f64().unwrap() < 1.0);
}

#[test]
fn staged_commands_match_pipeline() {
    let whole = tempfile::tempdir().unwrap();
    ok(whole.path(), &["pipeline"]);

    let staged = tempfile::tempdir().unwrap();
    let p = |f: &str| staged.path().join(f).to_str().unwrap().to_string();
    ok(staged.path(), &["retrieve"]);
    ok(staged.path(), &["verify", "--pools", &p("pools.jsonl")]);
    ok(
        staged.path(),
        &[
            "rerank",
            "--pools",
            &p("pools.jsonl"),
            "--transcripts",
            &p("transcripts.jsonl"),
        ],
    );
    assert_eq!(
        fs::read(whole.path().join("rankings.jsonl")).unwrap(),
        fs::read(staged.path().join("rankings.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(whole.path().join("pools.jsonl")).unwrap(),
        fs::read(staged.path().join("pools.jsonl")).unwrap()
    );
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--lambda", "1", "pipeline"]);
    assert_eq!(
        ranked_ids(dir.path().join("pools.jsonl"), "entries"),
        ranked_ids(dir.path().join("rankings.jsonl"), "ranking")
    );
    assert!(json(dir.path().join("metrics.json"))["r1"].as_f64().unwrap() < 1.0);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let one = tempfile::tempdir().unwrap();
    let four = tempfile::tempdir().unwrap();
    ok(one.path(), &["--workers", "1", "pipeline", "--transcripts"]);
    ok(four.path(), &["--workers", "4", "pipeline", "--transcripts"]);
    for f in ["pools.jsonl", "rankings.jsonl", "transcripts.jsonl", "metrics.json"] {
        assert_eq!(
            fs::read(one.path().join(f)).unwrap(),
            fs::read(four.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_gallery_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = squadrank(dir.path(), &["--gallery", "/no/such/gallery.jsonl", "pipeline"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/gallery.jsonl"));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn out_of_range_parameters_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for args in [["--xi", "1.5"], ["--lambda", "-0.2"], ["--k", "0"], ["--rounds", "0"]] {
        let mut full = args.to_vec();
        full.push("pipeline");
        let o = squadrank(dir.path(), &full);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn mining_is_reproducible_and_reports_shortfall() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["mine"]);
    ok(b.path(), &["mine"]);
    assert_eq!(
        fs::read(a.path().join("sft.jsonl")).unwrap(),
        fs::read(b.path().join("sft.jsonl")).unwrap()
    );
    let summary = json(a.path().join("sft_summary.json"));
    assert_eq!(summary["per_role_counts"]["writer"], 3);

    let o = squadrank(a.path(), &["mine", "--total", "9000"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("short by"));
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "sweep",
            "--lambdas",
            "0,0.4,1",
            "--xis",
            "0,0.95,1",
            "--rounds-grid",
            "2",
        ],
    );
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,xi,rounds,r1,r5,r10,map");
    assert_eq!(lines.len(), 10);
}

#[test]
fn index_reports_gallery_shape() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["index"]);
    let summary = json(dir.path().join("index.json"));
    assert_eq!(summary["items"], 8);
    assert_eq!(summary["dimension"], 3);
}
