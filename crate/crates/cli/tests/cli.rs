use promptvit::checkpoint;
use promptvit::vit::{init_backbone, ViTConfig};
use promptvit::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptvit"))
}

fn vit() -> ViTConfig {
    ViTConfig {
        num_layers: 1,
        width: 8,
        num_heads: 2,
        image_channels: 3,
        image_size: [8, 8],
        patch_size: [4, 4],
        num_classes: 4,
    }
}

fn write_backbone(path: &Path) {
    let s: ParamStore<f32> = init_backbone(&vit(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    checkpoint::save(&s, path).unwrap();
}

fn config(dir: &Path, extra_task_train: usize) -> std::path::PathBuf {
    let text = format!(
        r#"{{
  "schema_version": 1,
  "backbone": {{"checkpoint": "bb.pmvt", "vit": {vit}}},
  "tasks": [
    {{"spec": {{"name": "plain", "group": "natural", "family": "downstream_variant", "num_classes": 4,
      "n_train": 20, "n_test": 8, "image_size": [3, 8, 8], "generator_seed": 1}}}},
    {{"spec": {{"name": "cue", "group": "instance", "family": "instance_cue", "num_classes": 4,
      "cue_positions": 2, "n_train": {extra_task_train}, "n_test": 8, "image_size": [3, 8, 8], "generator_seed": 1}}}}
  ],
  "methods": [{{"kind": "full"}}, {{"kind": "linear"}}, {{"kind": "dvpt", "prompt_count": 2, "metanet_layers": 2}}],
  "train": {{"epochs": 2, "batch_size": 8}},
  "seeds": [0, 1],
  "output_dir": "out",
  "pretrain": {{
    "upstream": {{"family": "upstream_shapes", "num_classes": 4, "n_train": 16, "n_test": 4,
      "image_size": [3, 8, 8], "generator_seed": 2}},
    "train": {{"learning_rate": 0.003, "batch_size": 16}},
    "epoch_cap": 300
  }}
}}"#,
        vit = serde_json::to_string(&vit()).unwrap()
    );
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["run", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_or_bad_config_exits_two() {
    assert_eq!(run(&["run"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 9}"#).unwrap();
    assert_eq!(run(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    // Valid file, but the checkpoint does not exist yet.
    let cfg = config(dir.path(), 20);
    assert_eq!(run(&["run", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn paramcount_prints_group_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 20);
    let out = run(&["paramcount", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let header = text.lines().next().unwrap();
    for col in ["method", "backbone", "prompts", "metanet", "head", "trainable", "closed_form"] {
        assert!(header.split('\t').any(|c| c == col), "{header}");
    }
    assert_eq!(text.lines().count(), 4);
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let n = cols.len();
        assert_eq!(cols[n - 3], cols[n - 2], "mask sum differs from closed form: {line}");
    }
}

#[test]
fn run_twice_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 20);
    write_backbone(&dir.path().join("bb.pmvt"));
    let c = cfg.to_str().unwrap();
    let mut csvs = Vec::new();
    for (out, threads) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let o = dir.path().join(out);
        let res = run(&["run", "--config", c, "--out", o.to_str().unwrap(), "--threads", threads]);
        assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
        csvs.push(std::fs::read(o.join("summary.csv")).unwrap());
        assert!(o.join("record.json").is_file());
        assert_eq!(std::fs::read_dir(o.join("logs")).unwrap().count(), 3 * 2 * 2);
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0], csvs[2]);
    let text = String::from_utf8(csvs[0].clone()).unwrap();
    assert!(text.starts_with("method,task,seed_count,mean_acc,std,trainable_params,wins_vs_full\n"));
    assert!(text.contains("mean:natural"));
}

#[test]
fn seed_flag_replaces_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 20);
    write_backbone(&dir.path().join("bb.pmvt"));
    let o = dir.path().join("o");
    let res = run(&["run", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(res.status.code(), Some(0));
    let names: Vec<String> = std::fs::read_dir(o.join("logs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 6);
    assert!(names.iter().all(|n| n.ends_with("__s7.jsonl")));
}

#[test]
fn failed_cell_is_recorded_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // Four training examples cannot be split 80/20.
    let cfg = config(dir.path(), 4);
    write_backbone(&dir.path().join("bb.pmvt"));
    let res = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/record.json")).unwrap()).unwrap();
    let runs = record["runs"].as_array().unwrap();
    let failed = runs.iter().filter(|r| r["status"] == "failed").count();
    assert_eq!(failed, 3 * 2);
    assert_eq!(runs.len(), 3 * 2 * 2);
}

#[test]
fn pretrain_then_ablations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 20);
    let c = cfg.to_str().unwrap();
    let res = run(&["pretrain", "--config", c]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(dir.path().join("bb.pmvt").is_file());
    assert!(dir.path().join("out/pretrain.jsonl").is_file());

    let res = run(&["ablate-depth", "--config", c, "--seed", "0"]);
    assert_eq!(res.status.code(), Some(0));
    let text = String::from_utf8(res.stdout).unwrap();
    let depths: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(depths, ["2", "2", "4", "4", "6", "6"]);

    let res = run(&["ablate-mode", "--config", c, "--seed", "0"]);
    assert_eq!(res.status.code(), Some(0));
    assert!(dir.path().join("out/mode.csv").is_file());
}

#[test]
fn shipped_config_parses() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.json");
    let out = run(&["paramcount", "--config", cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 8);
}
