use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qtraffic::config::ExperimentConfig;
use qtraffic::synth::WorldConfig;

fn qtraffic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qtraffic")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn null_config() -> ExperimentConfig {
    ExperimentConfig {
        world: WorldConfig::null(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn help_documents_every_subcommand_and_flag() {
    let o = qtraffic(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for word in ["generate", "preprocess", "events", "qi", "train", "evaluate", "gradcheck", "repro", "--config", "--seed", "--out"] {
        assert!(text.contains(word), "--help lacks {word}:\n{text}");
    }
    let o = qtraffic(&["train", "--help"]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("--variant"));
}

#[test]
fn null_world_events_are_empty() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &null_config());
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    for stage in ["generate", "preprocess", "events"] {
        let o = qtraffic(&[stage, "--config", &cfg, "--out", out]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let csv = fs::read_to_string(Path::new(out).join("events/events.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1, "{csv}");
    assert_eq!(csv.trim_end(), qtraffic::io::EVENT_COLUMNS.join(","));
    let world: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(out).join("generate/world.json")).unwrap()).unwrap();
    assert!(world["recovery_rate"].is_null());
    assert!(Path::new(out).join("events/.done").is_file());
}

#[test]
fn evaluate_without_training_names_missing_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &null_config());
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    for stage in ["generate", "preprocess", "events", "qi"] {
        assert!(qtraffic(&[stage, "--config", &cfg, "--out", out]).status.success());
    }
    let o = qtraffic(&["evaluate", "--config", &cfg, "--out", out]);
    assert!(!o.status.success());
    let err = stderr(&o);
    for name in ["seq2seq_seed0.ckpt", "hybrid_seed2.ckpt", "qtraffic train"] {
        assert!(err.contains(name), "{err}");
    }
    assert!(!Path::new(out).join("evaluate/.done").exists());
}

#[test]
fn stages_demand_their_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = qtraffic(&["preprocess", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("qtraffic generate"), "{}", stderr(&o));
}

#[test]
fn bad_configs_are_rejected_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    let text = ExperimentConfig::default().to_toml().unwrap().replace("epochs", "epoch");
    fs::write(&path, text).unwrap();
    let out = tmp.path().join("out");
    let o = qtraffic(&["generate", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bad.toml"), "{}", stderr(&o));
    assert!(!out.exists());

    let o = qtraffic(&["train", "--variant", "lstm", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn rerun_reproduces_bytes_and_seed_changes_them() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &null_config());
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let o = qtraffic(&["generate", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.join("manifest.json")).unwrap()
    };
    let a = run("a", "3");
    assert_eq!(a, run("a", "3"));
    assert_eq!(a, run("b", "3"));
    assert_ne!(a, run("c", "4"));
    let manifest: qtraffic::pipeline::Manifest = serde_json::from_slice(&a).unwrap();
    let paths: Vec<&str> = manifest.artifacts.iter().map(|x| x.path.as_str()).collect();
    assert!(paths.contains(&"generate/queries.csv") && paths.contains(&"config.toml"), "{paths:?}");
}
