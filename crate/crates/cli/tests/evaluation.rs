mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use common::*;
use serde_json::{json, Value};

fn eval_fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/evaluation")
        .join(name)
}

#[test]
fn consistency_on_twelve_pairs() {
    let out: Value =
        serde_json::from_str(&coe_ok(&["consistency", "--pairs", s(&eval_fixture("pairs_12.json"))])).unwrap();
    assert_eq!(out["report"]["n_pairs"], 12);
    assert_eq!(out["report"]["agreements"], 8);
    assert!((out["report"]["rate"].as_f64().unwrap() - 0.667).abs() < 1e-3);
}

#[test]
fn consistency_reads_entropy_from_db() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = json!([{
        "pair_id": "p1",
        "upper": {"layer": "block2", "channel": 3},
        "lower": {"layer": "block1", "channel": 0},
        "human_scores": [2, 2, 1]
    }]);
    let path = dir.path().join("pairs.json");
    fs::write(&path, pairs.to_string()).unwrap();
    let out: Value = serde_json::from_str(&coe_ok(&[
        "consistency",
        "--pairs",
        s(&path),
        "--db",
        s(&golden().join("acd.jsonl")),
    ]))
    .unwrap();
    assert_eq!(out["pairs"][0]["cpe_upper"], 1.0);
    assert_eq!(out["report"]["agreements"], 1);
    assert!(!coe(&["consistency", "--pairs", s(&path)]).status.success());
}

#[test]
fn empty_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.json");
    fs::write(&path, "[]").unwrap();
    assert!(!coe(&["consistency", "--pairs", s(&path)]).status.success());
    assert!(!coe(&["sample", "--outcomes", s(&path)]).status.success());
}

#[test]
fn sample_is_seven_to_three() {
    let outcomes: Vec<Value> =
        serde_json::from_str(&fs::read_to_string(eval_fixture("outcomes.json")).unwrap()).unwrap();
    let ids: Vec<String> = serde_json::from_str(&coe_ok(&[
        "sample",
        "--outcomes",
        s(&eval_fixture("outcomes.json")),
        "--n",
        "100",
        "--seed",
        "3",
    ]))
    .unwrap();
    assert_eq!(ids.len(), 100);
    let correct = ids
        .iter()
        .filter(|id| {
            let o = outcomes.iter().find(|o| o["sample_id"] == id.as_str()).unwrap();
            o["label"] == o["prediction"]
        })
        .count();
    assert_eq!(correct, 70);
}

#[test]
fn judge_aggregates_golden_chains() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture();
    let mut chains = Vec::new();
    for sample in ["tench_001", "tench_002"] {
        fs::copy(
            golden().join(format!("{sample}.chain.json")),
            dir.path().join(format!("{sample}.chain.json")),
        )
        .unwrap();
        fs::copy(
            fx.join(format!("samples/{sample}.txt")),
            dir.path().join(format!("{sample}.txt")),
        )
        .unwrap();
        chains.push(dir.path().join(format!("{sample}.chain.json")));
    }
    let mut args = vec!["evaluate", "judge", "--chains"];
    args.extend(chains.iter().map(|c| s(c)));
    let out: Value = serde_json::from_str(&coe_ok(&args)).unwrap();
    let scores = out["scores"].as_array().unwrap();
    assert_eq!(scores.len(), 2);
    let mut sums = [0.0; 4];
    for sc in scores {
        let (a, c, u, t) = (
            sc["accuracy"].as_u64().unwrap(),
            sc["completeness"].as_u64().unwrap(),
            sc["user_interpretability"].as_u64().unwrap(),
            sc["total"].as_u64().unwrap(),
        );
        assert_eq!(t, a + c + u);
        for (slot, v) in sums.iter_mut().zip([a, c, u, t]) {
            *slot += v as f64 / 2.0;
        }
    }
    let agg = &out["aggregate"];
    for (k, v) in ["accuracy", "completeness", "user_interpretability", "total"]
        .iter()
        .zip(sums)
    {
        assert!((agg[*k].as_f64().unwrap() - v).abs() < 1e-9, "{k}");
    }
}

fn bundle_inputs(dir: &Path, n: usize) -> std::path::PathBuf {
    let samples: Vec<Value> = (0..n)
        .map(|i| {
            let image = format!("img_{i:03}.txt");
            fs::write(dir.join(&image), format!("image {i}")).unwrap();
            json!({
                "sample_id": format!("s{i:03}"),
                "image_path": image,
                "prediction": "tench",
                "label": "tench",
                "explanations": {
                    "coe": format!("chain explanation {i}"),
                    "baseline": format!("baseline explanation {i}"),
                    "saliency": format!("saliency explanation {i}"),
                }
            })
        })
        .collect();
    let path = dir.join("samples.json");
    fs::write(&path, serde_json::to_string(&samples).unwrap()).unwrap();
    path
}

fn fill_sheets(
    sheets_dir: &Path,
    mapping: &Value,
    score_of: impl Fn(&str) -> [&'static str; 3],
) -> Vec<std::path::PathBuf> {
    let mut paths: Vec<_> = fs::read_dir(sheets_dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    for p in &paths {
        let text = fs::read_to_string(p).unwrap();
        let mut lines = text.lines();
        let mut out = format!("{}\n", lines.next().unwrap());
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            let method = mapping["aliases"][cols[1]][cols[2]].as_str().unwrap();
            let [a, c, u] = score_of(method);
            out.push_str(&format!("{},{},{},{a},{c},{u}\n", cols[0], cols[1], cols[2]));
        }
        fs::write(p, out).unwrap();
    }
    paths
}

#[test]
fn human_bundle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = bundle_inputs(dir.path(), 100);
    let bundle = dir.path().join("bundle");
    coe_ok(&["evaluate", "export", "--samples", s(&samples), "--out", s(&bundle)]);

    assert_eq!(fs::read_dir(bundle.join("records")).unwrap().count(), 100);
    assert_eq!(fs::read_dir(bundle.join("sheets")).unwrap().count(), 10);
    let record: Value = serde_json::from_str(&fs::read_to_string(bundle.join("records/s007.json")).unwrap()).unwrap();
    let text = record.to_string();
    for method in ["coe", "baseline", "saliency"] {
        assert!(
            !text.contains(&format!("\"{method}\"")),
            "record leaks method name {method}"
        );
    }
    assert!(bundle.join(record["image"].as_str().unwrap()).is_file());
    let header = fs::read_to_string(bundle.join("sheets/group_01.csv")).unwrap();
    assert!(header.starts_with("group_id,sample_id,method_alias,accuracy,completeness,user_interpretability\n"));

    let mapping: Value = serde_json::from_str(&fs::read_to_string(bundle.join("mapping.json")).unwrap()).unwrap();
    let sheets = fill_sheets(&bundle.join("sheets"), &mapping, |m| match m {
        "coe" => ["2", "2", "1"],
        "baseline" => ["1", "0", "1"],
        _ => ["0", "1", "2"],
    });
    let mapping_path = bundle.join("mapping.json");
    let mut args = vec!["evaluate", "import", "--mapping", s(&mapping_path), "--sheets"];
    args.extend(sheets.iter().map(|p| s(p)));
    let report: BTreeMap<String, Value> = serde_json::from_str(&coe_ok(&args)).unwrap();
    assert_eq!(report["coe"]["total"], 5.0);
    assert_eq!(report["coe"]["n_samples"], 100);
    assert_eq!(report["baseline"]["accuracy"], 1.0);
    assert_eq!(report["saliency"]["user_interpretability"], 2.0);

    // Same inputs give the same aliases.
    let again = dir.path().join("again");
    coe_ok(&["evaluate", "export", "--samples", s(&samples), "--out", s(&again)]);
    assert_eq!(
        fs::read(again.join("mapping.json")).unwrap(),
        fs::read(bundle.join("mapping.json")).unwrap()
    );
}

#[test]
fn import_rejects_bad_and_missing_scores() {
    let dir = tempfile::tempdir().unwrap();
    let samples = bundle_inputs(dir.path(), 4);
    let bundle = dir.path().join("bundle");
    coe_ok(&[
        "evaluate",
        "export",
        "--samples",
        s(&samples),
        "--groups",
        "2",
        "--out",
        s(&bundle),
    ]);
    let mapping: Value = serde_json::from_str(&fs::read_to_string(bundle.join("mapping.json")).unwrap()).unwrap();
    let sheets = fill_sheets(&bundle.join("sheets"), &mapping, |m| {
        if m == "coe" {
            ["4", "1", "1"]
        } else {
            ["1", "1", "1"]
        }
    });
    let mapping_path = bundle.join("mapping.json");
    let mut args = vec!["evaluate", "import", "--mapping", s(&mapping_path), "--sheets"];
    args.extend(sheets.iter().map(|p| s(p)));
    let out = coe(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside 0..=2"));

    let sheets = fill_sheets(&bundle.join("sheets"), &mapping, |_| ["1", "1", "1"]);
    let out = coe(&[
        "evaluate",
        "import",
        "--mapping",
        s(&bundle.join("mapping.json")),
        "--sheets",
        s(&sheets[0]),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("s002") && err.contains("s003"), "{err}");
}

#[test]
fn export_requires_images_and_narratives() {
    let dir = tempfile::tempdir().unwrap();
    let samples = bundle_inputs(dir.path(), 2);
    fs::remove_file(dir.path().join("img_001.txt")).unwrap();
    let out = coe(&[
        "evaluate",
        "export",
        "--samples",
        s(&samples),
        "--out",
        s(&dir.path().join("b")),
    ]);
    assert!(!out.status.success());

    let samples = bundle_inputs(dir.path(), 2);
    let mut v: Vec<Value> = serde_json::from_str(&fs::read_to_string(&samples).unwrap()).unwrap();
    v[1]["explanations"].as_object_mut().unwrap().remove("coe");
    fs::write(&samples, serde_json::to_string(&v).unwrap()).unwrap();
    let out = coe(&[
        "evaluate",
        "export",
        "--samples",
        s(&samples),
        "--out",
        s(&dir.path().join("c")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no explanation"));
}
