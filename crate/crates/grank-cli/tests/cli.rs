//! End-to-end CLI exercise: generate data, train briefly, build an index,
//! evaluate, retrieve, bench, sweep, and verify — all through the binary.

use std::path::Path;
use std::process::Command;

fn grank() -> Command {
    Command::new(env!("CARGO_BIN_EXE_grank"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn grank");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(
        out.status.success(),
        "command failed\nstdout:\n{stdout}\nstderr:\n{stderr}"
    );
    stdout
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.tsv");
    let ckpt = dir.path().join("model.grnk");
    let index = dir.path().join("items.gidx");
    let metrics = dir.path().join("metrics.jsonl");

    run_ok(grank().args([
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
        "--n-items",
        "400",
        "--n-users",
        "60",
        "--n-topics",
        "4",
        "--seq-len",
        "24",
    ]));
    assert!(data.exists());
    assert!(Path::new(&format!("{}.manifest", data.display())).exists());

    let train_out = run_ok(grank().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--metrics",
        metrics.to_str().unwrap(),
        "--d",
        "16",
        "--l",
        "8",
        "--layers",
        "1",
        "--long-len",
        "12",
        "--batch-size",
        "8",
        "--epochs",
        "1",
        "--lr",
        "0.01",
        "--tau",
        "0.2",
        "--log-interval",
        "2",
        "--seed",
        "5",
    ]));
    assert!(train_out.contains("checkpoint at"), "{train_out}");
    assert!(ckpt.exists());
    assert!(Path::new(&format!("{}.cfg", ckpt.display())).exists());
    let metrics_text = std::fs::read_to_string(&metrics).unwrap();
    assert!(!metrics_text.is_empty());
    for line in metrics_text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("loss_total").is_some());
        assert!(v.get("wall_ms").is_some());
    }

    run_ok(grank().args([
        "build-index",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        index.to_str().unwrap(),
        "--quantized",
    ]));
    assert!(index.exists());

    let eval_out = run_ok(grank().args([
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--index",
        index.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--k",
        "10",
        "--k1",
        "100",
        "--k2",
        "20",
    ]));
    assert!(eval_out.contains("recall@10"), "{eval_out}");
    assert!(Path::new(&format!("{}.eval.json", ckpt.display())).exists());

    // retrieval against the dataset
    let retrieve_out = run_ok(grank().args([
        "retrieve",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--index",
        index.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--user-id",
        "0",
        "--k1",
        "50",
        "--k2",
        "5",
    ]));
    let parsed: serde_json::Value = serde_json::from_str(&retrieve_out).unwrap();
    assert_eq!(parsed["final_"]["entries"].as_array().unwrap().len(), 5);

    // quantized serving path
    run_ok(grank().args([
        "retrieve",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--index",
        index.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--user-id",
        "1",
        "--k1",
        "50",
        "--k2",
        "5",
        "--quantized",
    ]));

    let bench_out = run_ok(grank().args([
        "bench",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--index",
        index.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--concurrency",
        "2",
        "--requests",
        "12",
        "--warmup",
        "2",
        "--k1",
        "50",
        "--k2",
        "10",
    ]));
    let report: serde_json::Value = serde_json::from_str(&bench_out).unwrap();
    assert_eq!(report["requests"], 12);
    assert!(report["p50_ms"].as_f64().unwrap() <= report["p99_ms"].as_f64().unwrap());

    let sweep_out = run_ok(grank().args([
        "sweep",
        "--axis",
        "k1",
        "--values",
        "20,50,100",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--index",
        index.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--k",
        "10",
        "--k2",
        "20",
    ]));
    assert!(sweep_out.contains("csv at"), "{sweep_out}");
    let csv_path = format!("{}.sweep-k1.csv", ckpt.display());
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 4); // header + 3 values

    // stage-1 recall must be non-decreasing in k1 (containment property)
    let mut stage1: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(5).unwrap().parse().unwrap())
        .collect();
    let sorted = {
        let mut s = stage1.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s
    };
    assert_eq!(stage1, sorted, "stage-1 recall should grow with k1");
    stage1.dedup();

    // resume training for one more epoch through the CLI
    run_ok(grank().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--lr",
        "0.01",
        "--tau",
        "0.2",
        "--seed",
        "5",
    ]));
}

#[test]
fn retrieve_from_stdin() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.tsv");
    let ckpt = dir.path().join("model.grnk");
    let index = dir.path().join("items.gidx");

    run_ok(grank().args([
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--n-items",
        "200",
        "--n-users",
        "20",
        "--n-topics",
        "2",
        "--seq-len",
        "12",
    ]));
    run_ok(grank().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--d",
        "8",
        "--l",
        "4",
        "--layers",
        "1",
        "--long-len",
        "8",
        "--batch-size",
        "4",
        "--epochs",
        "1",
    ]));
    run_ok(grank().args([
        "build-index",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        index.to_str().unwrap(),
    ]));

    let mut child = grank()
        .args([
            "retrieve",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--index",
            index.to_str().unwrap(),
            "--stdin",
            "--k1",
            "20",
            "--k2",
            "5",
        ])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .as_mut()
        .unwrap()
        .write_all(
            b"user_id\titem_id\ttimestamp\tdwell\tengagement_code\n9\t3\t1\t0.8\t2\n9\t17\t2\t0.4\t1\n",
        )
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let parsed: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("retrieve emits JSON");
    assert_eq!(parsed["final_"]["entries"].as_array().unwrap().len(), 5);
}

#[test]
fn verify_quick_passes() {
    let out = run_ok(grank().args(["verify", "--quick"]));
    assert!(out.contains("PASS"), "{out}");
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn flops_command_reports_reduction() {
    let out = run_ok(grank().args(["flops", "--l", "64", "--b", "300", "--d", "128"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let reduction = v["reduction"].as_f64().unwrap();
    assert!((reduction - 0.822).abs() < 0.0005);
}
