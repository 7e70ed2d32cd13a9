use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[corpus]
n_contexts = 6
n_items_per_context = 6

[model]
d_model = 8
n_heads = 2
d_ff = 16

[train.stage1]
epochs = 1
lora_rank = 2
lora_alpha = 4.0

[train.stage2]
lora_rank = 2
lora_alpha = 4.0

[eval]
max_new_tokens = 4

[gradcheck]
d_model = 8
coordinates = 12
"#;

fn bin(dir: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_newsdistill"))
        .arg("--run-dir")
        .arg(dir)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice::<Value>(&out.stderr).expect("stderr is JSON")["error"].clone()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{TINY}\n{extra}")).unwrap();
    p
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn stages_run_in_order_and_rerun_as_no_ops() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", "");
    let run = tmp.path().join("run");

    let e = err(&bin(&run, &cfg, &["evaluate"]));
    assert_eq!(e["kind"], "ordering");
    assert!(e["message"].as_str().unwrap().contains("generate"));

    for stage in ["generate", "acquire", "partition"] {
        assert_eq!(ok(&bin(&run, &cfg, &[stage]))["ran"], true, "{stage}");
    }
    let e = err(&bin(&run, &cfg, &["evaluate", "--ablation", "full"]));
    assert_eq!(e["kind"], "ordering");
    assert!(e["message"].as_str().unwrap().contains("train-stage1"));

    let knowledge = fs::read(run.join("knowledge.jsonl")).unwrap();
    assert_eq!(ok(&bin(&run, &cfg, &["acquire"]))["ran"], false);
    assert_eq!(fs::read(run.join("knowledge.jsonl")).unwrap(), knowledge);

    ok(&bin(&run, &cfg, &["train-stage1"]));
    ok(&bin(&run, &cfg, &["train-stage2"]));
    let m = ok(&bin(&run, &cfg, &["evaluate"]));
    let acc = m["summary"]["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(run.join("eval/Full/metrics.json").exists());
    assert!(run.join("eval/Full/predictions.jsonl").exists());
    assert_eq!(ok(&bin(&run, &cfg, &["evaluate"]))["ran"], false);

    let manifest: Value = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["stamps"]["evaluate:Full"].is_string());
    assert!(!run.join(".lock").exists());
}

#[test]
fn loss_ablations_match_zero_weight_stage2_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", "");
    let run = tmp.path().join("run");
    ok(&bin(&run, &cfg, &["run"]));
    ok(&bin(&run, &cfg, &["evaluate", "--ablation", "NoDpoStep2"]));
    ok(&bin(&run, &cfg, &["evaluate", "--ablation", "no-lora-ft-step2"]));

    for (mode, weights) in [("NoDpoStep2", "alpha = 0.0"), ("NoLoraFtStep2", "gamma = 0.0")] {
        // The same file with one Stage-2 weight zeroed.
        let text = TINY.replace("[train.stage2]\n", &format!("[train.stage2]\n{weights}\n"));
        let zcfg = tmp.path().join(format!("{mode}.toml"));
        fs::write(&zcfg, text).unwrap();
        let zrun = tmp.path().join(mode);
        ok(&bin(&zrun, &zcfg, &["run"]));
        assert_eq!(
            tree(&run.join("eval").join(mode).join("checkpoint")),
            tree(&zrun.join("checkpoints/stage2")),
            "{mode}"
        );
    }
}

#[test]
fn errors_are_json_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", "");
    let run = tmp.path().join("run");

    let e = err(&bin(&run, &cfg, &["evaluate", "--ablation", "bogus"]));
    assert_eq!(e["kind"], "argument");
    ok(&bin(&run, &cfg, &["gradcheck"]));

    let e = err(&bin(&run, &cfg, &["no-such-command"]));
    assert_eq!(e["kind"], "usage");

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "primary_teacher = \"nobody\"\n").unwrap();
    assert_eq!(err(&bin(&run, &bad, &["generate"]))["kind"], "config");

    fs::write(run.join(".lock"), "1").unwrap();
    assert_eq!(err(&bin(&run, &cfg, &["generate"]))["kind"], "locked");
}

#[test]
fn saved_config_and_seed_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", "");
    let run = tmp.path().join("run");
    ok(&bin(&run, &cfg, &["--seed", "5", "generate"]));
    let out = Command::new(env!("CARGO_BIN_EXE_newsdistill"))
        .args(["--run-dir"])
        .arg(&run)
        .arg("show-config")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("d_model = 8"));
    assert!(text.contains("seed = 5"));
    // Unchanged saved config: generate is already current.
    let again = Command::new(env!("CARGO_BIN_EXE_newsdistill"))
        .arg("--run-dir")
        .arg(&run)
        .arg("generate")
        .output()
        .unwrap();
    assert_eq!(ok(&again)["ran"], false);
}
