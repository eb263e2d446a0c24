use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sinkgp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sinkgp"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn sinkgp")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn toy(dir: &Path, count: &str, extra: &[&str]) {
    let mut args = vec!["toygen", "--count", count, "--cloud-size", "12", "--out", "toy"];
    args.extend_from_slice(extra);
    ok(&sinkgp(dir, &args));
}

#[test]
fn toygen_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    toy(a.path(), "5", &["--seed", "4"]);
    toy(b.path(), "5", &["--seed", "4"]);
    let files: Vec<_> = fs::read_dir(a.path().join("toy"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(files.len(), 6);
    for f in files {
        assert_eq!(
            fs::read(a.path().join("toy").join(&f)).unwrap(),
            fs::read(b.path().join("toy").join(&f)).unwrap()
        );
    }
}

#[test]
fn fit_then_predict_reproduces_training_targets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d, "12", &[]);
    let summary: Value = serde_json::from_str(&ok(&sinkgp(
        d,
        &[
            "fit",
            "toy/manifest.json",
            "--max-iters",
            "5",
            "--noise",
            "0",
            "--out",
            "model.json",
            "--ref-out",
            "ref.json",
        ],
    )))
    .unwrap();
    assert_eq!(summary["kind"], "regression");
    assert_eq!(summary["q"], 6);
    assert_eq!(summary["noise"], 0.0);
    let model: Value = serde_json::from_str(&fs::read_to_string(d.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["format"], "sinkgp-model/1");
    assert_eq!(model["ref"]["x_raw"].as_array().unwrap().len(), 6);
    let trace = fs::read_to_string(d.join("model.json.trace.jsonl")).unwrap();
    assert!(trace.lines().count() >= 2);

    let out = sinkgp(d, &["predict", "model.json", "toy/manifest.json"]);
    let csv = ok(&out);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(d.join("toy/manifest.json")).unwrap()).unwrap();
    let targets: Vec<f64> = manifest["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["target"].as_f64().unwrap())
        .collect();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("id,mean,variance"));
    for (line, t) in lines.zip(&targets) {
        let mean: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((mean - t).abs() <= 1e-5, "{mean} vs {t}");
    }
    let metric: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(metric["evs"].as_f64().unwrap() > 0.999);

    let emb = ok(&sinkgp(d, &["embed", "toy/manifest.json", "--ref", "ref.json"]));
    assert_eq!(emb.lines().count(), 13);
    assert!(emb.starts_with("id,g_1,g_2,g_3,g_4,g_5,g_6,converged\n"));
}

#[test]
fn zero_iterations_and_classification() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d, "10", &["--classification"]);
    let summary: Value = serde_json::from_str(&ok(&sinkgp(
        d,
        &["fit", "toy/manifest.json", "--max-iters", "0", "--q", "3"],
    )))
    .unwrap();
    assert_eq!(summary["kind"], "classification");
    assert_eq!(summary["iterations"], 0);
    let trace = fs::read_to_string(d.join("model.json.trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 1);

    let csv = ok(&sinkgp(
        d,
        &["predict", "model.json", "toy/manifest.json", "--out", "pred.csv"],
    ));
    assert!(serde_json::from_str::<Value>(&csv).unwrap()["accuracy"].is_number());
    let pred = fs::read_to_string(d.join("pred.csv")).unwrap();
    assert!(pred.starts_with("id,mean,variance,probability\n"));
    for line in pred.lines().skip(1) {
        let p: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn identical_measures_embed_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a.csv"), "x1,x2,weight\n0.1,0.2,1\n-0.3,0.4,2\n").unwrap();
    fs::write(
        d.join("m.json"),
        r#"{"dim":2,"items":[{"path":"a.csv"},{"path":"a.csv"}]}"#,
    )
    .unwrap();
    let csv = ok(&sinkgp(d, &["embed", "m.json", "--q", "4"]));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);
}

#[test]
fn gram_exports_with_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d, "4", &[]);
    ok(&sinkgp(
        d,
        &[
            "gram",
            "toy/manifest.json",
            "--q",
            "5",
            "--variance",
            "2",
            "--out",
            "s.csv",
        ],
    ));
    ok(&sinkgp(
        d,
        &[
            "gram",
            "toy/manifest.json",
            "--kernel",
            "mmd",
            "--hat-sigma",
            "3",
            "--out",
            "m.csv",
        ],
    ));
    for (file, kind, diag) in [("s.csv", "sinkhorn", 2.0), ("m.csv", "mmd", 3.0)] {
        let rows: Vec<Vec<f64>> = fs::read_to_string(d.join(file))
            .unwrap()
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 4);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row[i], diag);
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, rows[j][i]);
            }
        }
        let side: Value =
            serde_json::from_str(&fs::read_to_string(d.join(format!("{file}.json"))).unwrap()).unwrap();
        assert_eq!(side["format"], "sinkgp-gram/1");
        assert_eq!(side["kernel"], kind);
        assert_eq!(side["n"], 4);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d, "6", &[]);

    let out = sinkgp(
        d,
        &[
            "embed",
            "toy/manifest.json",
            "--q",
            "6",
            "--max-iter",
            "1",
            "--strict",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "not_converged");

    let out = sinkgp(d, &["embed", "missing.json", "--q", "6"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(serde_json::from_slice::<Value>(&out.stderr).unwrap()["message"].is_string());

    assert_eq!(
        sinkgp(d, &["fit", "toy/manifest.json", "--kernel", "nope"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        sinkgp(d, &["embed", "toy/manifest.json", "--q", "6", "--eps", "-1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        sinkgp(d, &["embed", "toy/manifest.json", "--bogus"])
            .status
            .code(),
        Some(2)
    );

    fs::write(d.join("future.json"), r#"{"format":"sinkgp-model/9"}"#).unwrap();
    assert_eq!(
        sinkgp(d, &["predict", "future.json", "toy/manifest.json"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn empty_manifest_predicts_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d, "5", &[]);
    ok(&sinkgp(d, &["fit", "toy/manifest.json", "--max-iters", "1"]));
    fs::write(d.join("empty.json"), r#"{"dim":2,"items":[]}"#).unwrap();
    assert_eq!(
        ok(&sinkgp(d, &["predict", "model.json", "empty.json"])),
        "id,mean,variance\n"
    );
}

#[test]
fn benchmark_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(&sinkgp(
        dir.path(),
        &["benchmark", "--sizes", "4x9,3x4", "--repeats", "1"],
    ));
    assert_eq!(csv.lines().count(), 7);
}
