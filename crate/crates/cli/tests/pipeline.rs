//! End-to-end checks driving the compiled binary through the whole
//! pipeline on a tiny synthetic world.

use std::path::PathBuf;
use std::process::Command;

fn rrg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rrg"))
}

fn ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn rrg");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &[&str] = &[
    "--set", "canvas=32",
    "--set", "patch=8",
    "--set", "channels=8",
    "--set", "width=16",
    "--set", "heads=2",
    "--set", "layers=1",
    "--set", "ffn_hidden=24",
    "--set", "memory_dim=16",
    "--set", "memory_slots=8",
    "--set", "gamma=3",
    "--set", "max_len=24",
    "--set", "n_categories=8",
    "--set", "batch_size=2",
    "--set", "steps=2",
];

fn jsonl_lines(path: &PathBuf) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn the_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);

    let stdout = ok(rrg()
        .args(["synth", "--n", "4", "--seed", "9", "--canvas", "32", "--categories", "8", "--out"])
        .arg(p("refs.jsonl")));
    assert!(stdout.contains("wrote 4 records"), "{stdout}");
    let refs = jsonl_lines(&p("refs.jsonl"));
    assert_eq!(refs.len(), 4);
    assert!(refs[0]["objects"].is_array() && refs[0]["report"].is_string());

    let stdout = ok(rrg()
        .args(["train"])
        .args(TINY)
        .args(["--n", "4", "--data-seed", "9", "--quiet", "--log"])
        .arg(p("loss.jsonl"))
        .arg("--out")
        .arg(p("model.ckpt")));
    assert!(stdout.contains("trained to step 2"), "{stdout}");
    let log = jsonl_lines(&p("loss.jsonl"));
    assert_eq!(log.len(), 2);
    for entry in &log {
        for key in ["gen", "rs", "ap", "dr", "con"] {
            assert!(entry["losses"][key].is_number(), "missing {key}");
        }
    }

    let stdout = ok(rrg()
        .args(["generate", "--checkpoint"])
        .arg(p("model.ckpt"))
        .args(["--n", "4", "--data-seed", "9"])
        .args(["--train-n", "4", "--train-seed", "9", "--emit-graphs", "--out"])
        .arg(p("preds.jsonl")));
    assert!(stdout.contains("wrote 4 reports"), "{stdout}");
    let preds = jsonl_lines(&p("preds.jsonl"));
    assert!(preds[0]["report"].is_string() && preds[0]["objects"].is_array());

    let stdout = ok(rrg()
        .args(["evaluate", "--predictions"])
        .arg(p("preds.jsonl"))
        .arg("--references")
        .arg(p("refs.jsonl"))
        .arg("--out")
        .arg(p("metrics.json")));
    assert!(stdout.contains("BL-1"), "{stdout}");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("metrics.json")).unwrap()).unwrap();
    let b1 = metrics["bleu_1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&b1));

    let stdout = ok(rrg()
        .args(["graph", "--checkpoint"])
        .arg(p("model.ckpt"))
        .args(["--n", "2", "--data-seed", "9", "--train-n", "4", "--train-seed", "9", "--out"])
        .arg(p("graphs.jsonl")));
    assert!(stdout.contains("wrote 2 graphs"), "{stdout}");
    let graphs = jsonl_lines(&p("graphs.jsonl"));
    assert!(graphs[0]["image_id"].is_string() && graphs[0]["objects"].is_array());
}

#[test]
fn overrides_beat_the_config_file_and_resume_refuses_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    let mut toml = String::new();
    for chunk in TINY.chunks(2) {
        toml.push_str(&format!("{}\n", chunk[1].replace('=', " = ")));
    }
    toml = toml.replace("steps = 2", "steps = 1");
    std::fs::write(&cfg_path, toml).unwrap();

    let ckpt = dir.path().join("model.ckpt");
    let stdout = ok(rrg()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--set", "steps=2", "--n", "4", "--quiet", "--out"])
        .arg(&ckpt));
    assert!(stdout.contains("trained to step 2"), "{stdout}");

    let out = rrg()
        .args(["train", "--resume"])
        .arg(&ckpt)
        .args(["--set", "steps=5", "--n", "4", "--quiet", "--out"])
        .arg(dir.path().join("again.ckpt"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--resume"), "{stderr}");

    let stdout = ok(rrg()
        .args(["train", "--resume"])
        .arg(&ckpt)
        .args(["--n", "4", "--quiet", "--out"])
        .arg(dir.path().join("again.ckpt")));
    assert!(stdout.contains("(0 new)"), "{stdout}");
}
