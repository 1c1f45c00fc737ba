use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FAST: &str = r#"
seed = 3

[data.synth]
n_bags = 40
bag_size = 12
dim = 6

[flow]
layers = 2
pool_size = 64
keep_fraction = 0.25

[train]
warmup_epochs = 4
ramp_epochs = 1
flow_epochs = 3
finetune_epochs = 3
flow_batch = 32
eval_every = 2
triplets = 16
beta = 0.1
"#;

fn ovad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovad"))
        .args(args)
        .env_remove("OVAD_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ovad(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fast_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("fast.toml");
    fs::write(&p, format!("{FAST}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains all stages of the fast config into `dir/train`.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = fast_config(dir, "");
    let out = dir.join("train");
    ok(&["train", "-c", s(&cfg), "-o", s(&out)]);
    (cfg, out)
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--seed", "7", "-o", s(&a)]);
    ok(&["synth", "--seed", "7", "-o", s(&b)]);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.as_array().unwrap().len(), 100);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    for e in manifest.as_array().unwrap() {
        let f = e["path"].as_str().unwrap();
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    assert!(a.join("config.toml").exists());
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[data.synth]\nn_classes = 0\n").unwrap();
    assert_eq!(ovad(&["synth", "-c", s(&cfg), "-o", s(dir.path())]).status.code(), Some(2));
    let good = fast_config(dir.path(), "");
    let out = ovad(&["train", "-c", s(&good), "--stages", "13", "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let missing = ovad(&["train", "-c", s(&dir.path().join("nope.toml")), "-o", s(dir.path())]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn staged_training_resumes_to_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, full) = trained(dir.path());
    for k in 1..=3 {
        assert!(full.join(format!("stage{k}.ckpt")).exists());
    }

    let part = dir.path().join("part");
    ok(&["train", "-c", s(&cfg), "--stages", "1", "-o", s(&part)]);
    assert!(part.join("stage1.ckpt").exists());
    assert!(!part.join("stage2.ckpt").exists());
    ok(&["train", "-c", s(&cfg), "--stages", "12", "--resume", s(&part.join("stage1.ckpt")), "-o", s(&part)]);
    ok(&["train", "-c", s(&cfg), "--resume", s(&part.join("stage2.ckpt")), "-o", s(&part)]);
    assert_eq!(fs::read(part.join("stage3.ckpt")).unwrap(), fs::read(full.join("stage3.ckpt")).unwrap());
    assert_eq!(fs::read(part.join("train.jsonl")).unwrap(), fs::read(full.join("train.jsonl")).unwrap());

    let log = fs::read_to_string(full.join("train.jsonl")).unwrap();
    let stage3: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .filter(|r: &serde_json::Value| r["stage"] == 3)
        .collect();
    assert!(!stage3.is_empty());
    assert!(stage3.iter().all(|r| r["omega"].is_u64() && r["dg"] == 16));
}

#[test]
fn evaluation_commands_on_a_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, run) = trained(dir.path());
    let ckpt = run.join("stage3.ckpt");

    let eval_dir = dir.path().join("eval");
    let line = ok(&["eval", "-c", s(&cfg), "--checkpoint", s(&ckpt), "-o", s(&eval_dir)]);
    assert!(line.starts_with("test: overall roc "));
    assert!(eval_dir.join("report.json").exists());
    ok(&["eval", "-c", s(&cfg), "--checkpoint", s(&ckpt), "--scorer", "flow", "-o", s(&eval_dir)]);

    let other = dir.path().join("other.toml");
    fs::write(&other, FAST.replace("seed = 3", "seed = 4")).unwrap();
    let refused = ovad(&["eval", "-c", s(&other), "--checkpoint", s(&ckpt), "-o", s(&eval_dir)]);
    assert_eq!(refused.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("different config"));

    let score_dir = dir.path().join("score");
    ok(&["score", "-c", s(&cfg), "--checkpoint", s(&ckpt), "-o", s(&score_dir)]);
    let csv = fs::read_to_string(score_dir.join("scores.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("bag,instance,score,label"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 40 * 12);
    for r in &rows {
        let v: f64 = r.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    let curve_dir = dir.path().join("curves");
    ok(&["curves", "-c", s(&cfg), "--checkpoint", s(&ckpt), "-o", s(&curve_dir)]);
    let roc = fs::read_to_string(curve_dir.join("roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,x,y\n"));
    let pts: Vec<(f64, f64)> = roc
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[1], v[2])
        })
        .collect();
    assert_eq!(pts.first(), Some(&(0.0, 0.0)));
    assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    assert!(curve_dir.join("pr.csv").exists());
}

#[test]
fn ablate_writes_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path(), "");
    let out = dir.path().join("ablate");
    ok(&["ablate", "-c", s(&cfg), "--seeds", "2", "--variants", "full,no_all", "-o", s(&out)]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config,seeds,overall_roc,overall_pr,unseen_roc,unseen_pr,seen_roc,seen_pr");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "no_all", "flow_scorer"]);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(1) == Some("2")));
    assert_eq!(ovad(&["ablate", "-c", s(&cfg), "--variants", "bogus", "-o", s(&out)]).status.code(), Some(2));
}
