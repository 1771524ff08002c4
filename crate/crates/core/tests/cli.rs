//! End-to-end runs of the command-line front end.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use spatial_bench::cli::main_with_args;
use spatial_bench::store::{read_manifest, AttentionTensor};
use spatial_bench::camera::TokenCategoryMap;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("spatial-bench").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Relative path → bytes for every file under `dir`.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(&["generate", "--n", "200", "--seed", "7", "--out", p(&a)]), 0);
    assert_eq!(run(&["generate", "--n", "200", "--seed", "7", "--out", p(&b)]), 0);
    let (mut ta, mut tb) = (tree(&a), tree(&b));
    let (ra, rb) = (ta.remove("run.json").unwrap(), tb.remove("run.json").unwrap());
    assert_eq!(ta, tb);
    assert_eq!(ta.keys().filter(|k| k.starts_with("maps/")).count(), 200);
    let (ja, jb): (serde_json::Value, serde_json::Value) =
        (serde_json::from_slice(&ra).unwrap(), serde_json::from_slice(&rb).unwrap());
    assert_eq!(ja["input_hash"], jb["input_hash"]);
    assert_eq!(ja["seed"], 7);
    assert_eq!(ja["command"]["generate"]["n"], 200);
}

#[test]
fn ego_default_size() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["generate", "--out", p(tmp.path())]), 0);
    assert_eq!(read_manifest(&tmp.path().join("manifest.jsonl")).unwrap().len(), 5000);
}

#[test]
fn binary_exit_codes_and_config_variable() {
    let bin = env!("CARGO_BIN_EXE_spatial-bench");
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(bin)
        .args(["generate", "--env", "atlantis", "--n", "5", "--out", p(tmp.path())])
        .env_remove("SPATIAL_BENCH_CONFIG")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown_environment"));
    for env in ["flat", "forest", "desert", "town", "city"] {
        assert!(stderr.contains(env), "{stderr}");
    }

    let out = Command::new(bin).args(["generate", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // runtime failure: a manifest that is not one
    std::fs::write(tmp.path().join("manifest.jsonl"), "garbage\n").unwrap();
    let out = Command::new(bin)
        .args(["split", "--data", p(tmp.path()), "--out", p(&tmp.path().join("s"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error["));

    let cfg = tmp.path().join("bench.toml");
    let mut text = String::from("version = 1\n\n");
    let mut custom = spatial_bench::config::EnvConfig::flat();
    custom.name = "atlantis".into();
    let file = spatial_bench::config::BenchConfig {
        environments: vec![custom],
        ..Default::default()
    };
    text = file.to_toml().replace("version = 1\n", &text);
    std::fs::write(&cfg, text).unwrap();
    let data = tmp.path().join("atl");
    let out = Command::new(bin)
        .args(["generate", "--env", "atlantis", "--n", "8", "--out", p(&data)])
        .env("SPATIAL_BENCH_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(read_manifest(&data.join("manifest.jsonl")).unwrap().iter().all(|r| r.environment == "atlantis"));
    assert_eq!(json(&data.join("run.json"))["config"], p(&cfg));
}

#[test]
fn rank_hand_table() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("acc.csv");
    // column 1: A > B > C; column 2: B > A > C
    std::fs::write(&table, "model,flat,forest\nA,90,80\nB,80,90\nC,70,70\n").unwrap();
    let out = tmp.path().join("r");
    assert_eq!(run(&["rank", "--table", p(&table), "--out", p(&out)]), 0);
    let csv = std::fs::read_to_string(out.join("ranks.csv")).unwrap();
    assert_eq!(csv, "model,mean_rank\nA,1.5\nB,1.5\nC,3\n");
}

#[test]
fn correlate_inverts_before_fitting() {
    let tmp = tempfile::tempdir().unwrap();
    let scores = tmp.path().join("s.csv");
    std::fs::write(&scores, "model,acc,rmse\nm1,0.5,3.0\nm2,0.6,2.0\nm3,0.9,1.5\nm4,0.7,2.5\n").unwrap();
    let (plain, inv) = (tmp.path().join("plain"), tmp.path().join("inv"));
    assert_eq!(run(&["correlate", "--scores", p(&scores), "--x", "rmse", "--y", "acc", "--out", p(&plain)]), 0);
    assert_eq!(
        run(&["correlate", "--scores", p(&scores), "--x", "rmse", "--y", "acc", "--invert-x", "--out", p(&inv)]),
        0
    );
    let (a, b) = (json(&plain.join("correlation.json")), json(&inv.join("correlation.json")));
    let (ra, rb) = (a["r"].as_f64().unwrap(), b["r"].as_f64().unwrap());
    assert!(ra < 0.0 && (ra + rb).abs() < 1e-12, "{ra} {rb}");
    assert_eq!(b["x_inverted"], true);
    assert_eq!(a["r_squared"], b["r_squared"]);
}

#[test]
fn attnflow_on_uniform_attention() {
    let tmp = tempfile::tempdir().unwrap();
    // 2×2 patches + CLS; two layers, two heads, uniform rows
    let attn = tmp.path().join("a.spat");
    AttentionTensor::new(2, 2, 5, vec![0.2; 2 * 2 * 25]).unwrap().write(&attn).unwrap();
    let map = tmp.path().join("m.spcm");
    TokenCategoryMap {
        rows: 2,
        cols: 2,
        cells: vec![6, 1, 1, 0],
        specials: vec![0xFF00],
    }
    .write(&map)
    .unwrap();
    let out = tmp.path().join("flow");
    let code = run(&[
        "attnflow", "--attention", p(&attn), "--map", p(&map), "--source", "human", "--dest", "tree",
        "--compare", "cls", "--out", p(&out),
    ]);
    assert_eq!(code, 0);
    let f = json(&out.join("flow.json"));
    let vals = |k: &str| -> Vec<f64> { f[k]["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect() };
    // one human patch, two tree patches, 0.2 per edge, summed over two tree patches
    assert_eq!(vals("flow"), vec![2.0 * f64::from(0.2f32); 2]);
    assert_eq!(vals("compare"), vec![f64::from(0.2f32); 2]);
    assert!(out.join("flow.svg").exists());
    assert_eq!(run(&["attnflow", "--attention", p(&attn), "--map", p(&map), "--source", "car", "--dest", "tree", "--out", p(&out)]), 1);
}

#[test]
fn commands_leave_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("gen");
    assert_eq!(run(&["generate", "--n", "40", "--seed", "3", "--out", p(&data)]), 0);
    let before = tree(&data);
    let split = tmp.path().join("split");
    assert_eq!(run(&["split", "--data", p(&data), "--out", p(&split)]), 0);
    let feats = tmp.path().join("feat");
    assert_eq!(run(&["encode-oracle", "--data", p(&split), "--mask", "human", "--out", p(&feats)]), 0);
    assert_eq!(tree(&data), before);
    let split_before = tree(&split);
    let train = tmp.path().join("train");
    let args = [
        "train", "--data", p(&split), "--features", p(&feats), "--head", "linear", "--epochs", "3",
        "--batch-size", "8", "--lr", "0.01", "--dropout", "0.2", "--out", p(&train),
    ];
    assert_eq!(run(&args), 0);
    assert_eq!(tree(&split), split_before);
    assert!(train.join("probe.sppb").exists());
    let summary = json(&train.join("train.json"));
    assert!(summary["test_accuracy"].as_f64().unwrap() >= 0.0);
    let oracle = json(&feats.join("oracle.json"));
    assert_eq!(oracle["masked_categories"], serde_json::json!([6]));
}
