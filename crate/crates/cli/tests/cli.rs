use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn multigrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multigrain"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = multigrain(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--seed", "3", "--n", "12", "--out", d.to_str().unwrap()]);
    }
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert!(ta.len() > 12);
    assert_eq!(ta, tb);
}

#[test]
fn train_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["gen-data", "--n", "16", "--out", data.to_str().unwrap()]);
    let out = ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--steps",
        "3",
        "--set",
        "batch_size=4",
        "--set",
        "warmup_steps=1",
    ]);
    assert!(out.contains("final.ckpt"));
    let ckpt = run.join("final.ckpt");
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let table = ok(&["eval-grounding", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(table.contains("mean IoU"));
    let line = fs::read_to_string(run.join("final.grounding.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert!(v["mean_iou"].is_number());

    let table = ok(&[
        "eval-retrieval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--k",
        "4",
    ]);
    assert!(table.contains("text->vision"));

    let curves = tmp.path().join("curves");
    ok(&[
        "emit-curves",
        "--metrics",
        run.join("metrics.jsonl").to_str().unwrap(),
        "--out",
        curves.to_str().unwrap(),
    ]);
    let loss = fs::read_to_string(curves.join("loss.tsv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
}

#[test]
fn unknown_flag_fails() {
    let out = multigrain(&["gen-data", "--out", "x", "--bogus"]);
    assert!(!out.status.success());
}

#[test]
fn missing_data_reports_a_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = multigrain(&[
        "eval-grounding",
        "--ckpt",
        tmp.path().join("none.ckpt").to_str().unwrap(),
        "--data",
        tmp.path().join("none").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(err.trim().lines().last().unwrap()).unwrap();
    assert!(v["error"].is_string());
}
