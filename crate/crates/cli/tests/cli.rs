use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
name = "tiny"
metrics = ["accuracy", "loss"]

[task]
kind = "classification"
n = 64
data_seed = 3

[train]
optimizer = "sgd"
learning_rate = 0.1
epochs = 4
batch_size = 16

[analysis]
hessian_k = 2
resolution = 5
mc_grid_points = 5
connector_steps = 3
probe_count = 16

[[configs]]
id = "A"
layer_widths = [2, 6, 2]
activation = "tanh"
seeds = [0, 1]

[[configs]]
id = "B"
layer_widths = [2, 6, 6, 2]
activation = "relu"
residual = true
seeds = [0, 1]
"#;

fn lossatlas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lossatlas"))
        .args(args)
        .env_remove("LOSSATLAS_STORE")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn tda_prints_pairs_of_hand_traced_row() {
    let tmp = tempfile::tempdir().unwrap();
    let field = write(tmp.path(), "row.json", "[[3, 0, 2, 1, 4]]");
    let out = tmp.path().join("tda");
    let o = lossatlas(&["tda", "--field", s(&field), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("branches: 2"), "{}", stdout(&o));
    assert!(stdout(&o).contains("pairs: (0, 4), (1, 2)"), "{}", stdout(&o));
    let pairs: Value = serde_json::from_slice(&fs::read(out.join("persistence.json")).unwrap()).unwrap();
    assert_eq!(pairs["kind"], "persistence");
    assert_eq!(pairs["data"].as_array().unwrap().len(), 2);
    let mt: Value = serde_json::from_slice(&fs::read(out.join("mergetree.json")).unwrap()).unwrap();
    assert_eq!(mt["kind"], "merge_tree");

    let again = lossatlas(&["tda", "--field", s(&field), "--out", s(&out)]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    assert_eq!(code(&lossatlas(&["tda", "--field", s(&field), "--out", s(&out), "--force"])), 0);
}

#[test]
fn tda_monotone_field_has_one_branch() {
    let tmp = tempfile::tempdir().unwrap();
    let field = write(tmp.path(), "f.json", "[[0, 1, 2], [3, 4, 5], [6, 7, 8]]");
    let o = lossatlas(&["tda", "--field", s(&field)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("branches: 1"));
}

#[test]
fn tda_diagonal_neighbours_merge_under_eight_connectivity() {
    let tmp = tempfile::tempdir().unwrap();
    let field = write(tmp.path(), "f.json", "[[0, 5], [5, 1]]");
    let four = lossatlas(&["tda", "--field", s(&field), "--connectivity", "4"]);
    let eight = lossatlas(&["tda", "--field", s(&field), "--connectivity", "8"]);
    assert!(stdout(&four).contains("branches: 2"), "{}", stdout(&four));
    assert!(stdout(&eight).contains("branches: 1"), "{}", stdout(&eight));
    assert_eq!(code(&lossatlas(&["tda", "--field", s(&field), "--connectivity", "6"])), 2);
}

#[test]
fn tda_rejects_malformed_fields_with_domain_error() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, text) in [("a.json", "not json"), ("b.json", "[[1, 2], [3]]"), ("c.json", "[]")] {
        let field = write(tmp.path(), name, text);
        let out = tmp.path().join(format!("out-{name}"));
        let o = lossatlas(&["tda", "--field", s(&field), "--out", s(&out)]);
        assert_eq!(code(&o), 1, "{name}: {}", stderr(&o));
        assert!(!out.exists());
    }
    let o = lossatlas(&["tda", "--field", s(&tmp.path().join("missing.json"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    let o = lossatlas(&["atlas", "--manifest", s(&missing), "--out", s(&tmp.path().join("b"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
    assert!(!tmp.path().join("b").exists());

    let bad = write(tmp.path(), "bad.toml", &TINY.replace("epochs = 4", "epochs = -4"));
    let o = lossatlas(&["validate", "--manifest", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.epochs"), "{}", stderr(&o));

    assert_eq!(code(&lossatlas(&["bogus"])), 2);
    assert_eq!(code(&lossatlas(&["export", "--bundle", "x", "--view", "pictures"])), 2);
    assert_eq!(code(&lossatlas(&["--threads", "0", "validate", "--manifest", s(&bad)])), 2);
}

#[test]
fn single_metric_commands_echo_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write(tmp.path(), "m.toml", TINY);
    let rec = tmp.path().join("rec.json");
    let o = lossatlas(&["train", "--manifest", s(&manifest), "--config", "A", "--seed", "7", "--out", s(&rec)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&fs::read(&rec).unwrap()).unwrap();
    assert_eq!(v["kind"], "model_record");
    assert_eq!(v["data"]["seed"], 7);
    assert_eq!(v["data"]["id"], "A-s7");

    let o = lossatlas(&["hessian", "--manifest", s(&manifest), "--config", "A", "--seed", "7", "--record", s(&rec)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let h: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(h["kind"], "hessian");
    assert_eq!(h["data"]["eigenvalues"].as_array().unwrap().len(), 2);

    let o = lossatlas(&["hessian", "--manifest", s(&manifest), "--config", "A", "--seed", "8", "--record", s(&rec)]);
    assert_eq!(code(&o), 2);

    let o = lossatlas(&["mc", "--manifest", s(&manifest), "--config", "A", "--seed", "0", "--other-seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mc: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(mc["kind"], "mode_connectivity");
    let o = lossatlas(&[
        "cka", "--manifest", s(&manifest), "--config", "A", "--seed", "0", "--other-config", "B", "--other-seed", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = lossatlas(&["train", "--manifest", s(&manifest), "--config", "Z", "--seed", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn atlas_rerun_is_cached_and_identical_then_exports() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write(tmp.path(), "m.toml", TINY);
    let out = tmp.path().join("bundle");
    let store = tmp.path().join("store");
    let first = lossatlas(&["atlas", "--manifest", s(&manifest), "--out", s(&out), "--store", s(&store)]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let text = stdout(&first);
    assert!(text.contains("models     4") && text.contains("edges      2"), "{text}");
    assert!(text.contains("computed"), "{text}");
    let before = tree(&out);

    assert_eq!(code(&lossatlas(&["atlas", "--manifest", s(&manifest), "--out", s(&out)])), 2);
    let rerun = lossatlas(&["atlas", "--manifest", s(&manifest), "--out", s(&out), "--force"]);
    assert_eq!(code(&rerun), 0, "{}", stderr(&rerun));
    assert!(stdout(&rerun).contains("all stages cached"), "{}", stdout(&rerun));
    assert_eq!(before, tree(&out));

    let o = lossatlas(&["validate", "--bundle", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("bundle ok"));

    let index: Value = serde_json::from_slice(&fs::read(out.join("bundle.json")).unwrap()).unwrap();
    let id = index["data"]["experiment_id"].as_str().unwrap().to_string();

    let o = lossatlas(&["export", "--experiment", &id, "--store", s(&store), "--view", "global"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = stdout(&o);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "model_id,config_id,x,y,accuracy,loss,lambda_1,lambda_2");
    assert_eq!(lines.count(), 4);

    let o = lossatlas(&["export", "--bundle", s(&out), "--view", "persistence", "--model", "A-s0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("birth,death,persistence,birth_row,birth_col,death_row,death_col\n"));

    let csv_path = tmp.path().join("landscape.csv");
    let o = lossatlas(&[
        "export", "--bundle", s(&out), "--view", "landscape", "--model", "B-s1", "--out", s(&csv_path),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("row,col,alpha,beta,loss\n"));
    assert_eq!(text.lines().count(), 1 + 25);
    let o = lossatlas(&["export", "--bundle", s(&out), "--view", "landscape", "--model", "B-s1", "--out", s(&csv_path)]);
    assert_eq!(code(&o), 2);

    let o = lossatlas(&["export", "--experiment", "0123456789abcdef", "--store", s(&store), "--view", "global"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("not found"), "{}", stderr(&o));
    let o = lossatlas(&["export", "--bundle", s(&out), "--view", "landscape"]);
    assert_eq!(code(&o), 2);

    fs::write(out.join("graph.json"), "{").unwrap();
    let o = lossatlas(&["validate", "--bundle", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("graph.json"), "{}", stderr(&o));
}
