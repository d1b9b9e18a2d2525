use std::path::Path;

use codi::cli::{run, EXIT_CHECK_FAILED, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use codi::records;

const TINY: &str = r#"
seed = 3
episodes = 2
max_steps = 16
sample_steps = 6
demo_episodes = 12
joint_demo_episodes = 4

[guidance]
mc_samples = 8

[train]
step_count = 15
batch_size = 16
hidden_width = 16
hidden_layers = 1

[cost_model]
step_count = 10
batch_size = 16
hidden_width = 8
hidden_layers = 1

[finetune]
iterations = 1
states_per_iteration = 2
rollouts_per_state = 2

[finetune.inner]
step_count = 5
batch_size = 8
hidden_width = 8
hidden_layers = 1

[finetune.inner.schedule]
step_count = 6
"#;

fn codi(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("codi").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn with_config(dir: &Path, extra: &[&str]) -> Vec<String> {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let mut v = vec!["--config".to_string(), cfg.display().to_string(), "--out".into(), dir.join("run").display().to_string()];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn call(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let v = with_config(dir, args);
    let refs: Vec<&str> = v.iter().map(|s| s.as_str()).collect();
    codi(&refs)
}

#[test]
fn full_pipeline_for_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, out, err) = call(d, &["gen-demos"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("single-agent records"));
    let (code, _, err) = call(d, &["train", "--all"]);
    assert_eq!(code, EXIT_OK, "{err}");
    for m in ["dpmd", "sdac", "expo"] {
        let (code, _, err) = call(d, &["finetune", "--method", m]);
        assert_eq!(code, EXIT_OK, "{m}: {err}");
    }
    for m in ["codi", "codi-indep", "cg-joint", "cg-product", "dpmd", "sdac", "expo", "unguided"] {
        let (code, out, err) = call(d, &["eval", "--method", m, "--deterministic"]);
        assert_eq!(code, EXIT_OK, "{m}: {err}");
        assert!(out.contains(&format!("\"method\":\"{m}\"")), "{out}");
    }
    let table = records::read_metrics(&d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(table.rows.len(), 8);
    assert!(table.rows.iter().all(|r| r.error_count == 0 && r.episodes == 2));
    let traces: Vec<records::TraceRecord> = records::read_lines(&d.join("run/traces-codi.jsonl")).unwrap();
    assert!(traces.iter().any(|t| t.episode == 1));

    let (code, out, _) = call(d, &["rollout", "--episode", "1"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.starts_with("episode 1:"));

    let (code, out, _) = codi(&["inspect", d.join("run/policy.ckpt").to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("score model"), "{out}");
    let (code, out, _) = codi(&["inspect", d.join("run/joint-demos.bin").to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("kind     dataset"), "{out}");
}

#[test]
fn eval_is_reproducible_across_worker_modes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(call(d, &["gen-demos"]).0, EXIT_OK);
    assert_eq!(call(d, &["train"]).0, EXIT_OK);
    let a = call(d, &["eval", "--deterministic"]).1;
    let b = call(d, &["eval", "--deterministic"]).1;
    let c = call(d, &["eval"]).1;
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn exit_codes() {
    assert_eq!(codi(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(codi(&["eval", "--method", "cg"]).0, EXIT_USAGE);
    assert_eq!(codi(&["--help"]).0, EXIT_OK);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "episodes = 0\n").unwrap();
    assert_eq!(codi(&["eval", "--config", bad.to_str().unwrap()]).0, EXIT_USAGE);
    // missing artifacts are a runtime error
    let out = dir.path().join("empty");
    assert_eq!(codi(&["eval", "--out", out.to_str().unwrap()]).0, EXIT_RUNTIME);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let (code, _, err) = codi(&["inspect", junk.to_str().unwrap()]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("unsupported format"), "{err}");
    assert_eq!(codi(&["finetune", "--method", "codi", "--out", out.to_str().unwrap()]).0, EXIT_USAGE);
}

#[test]
fn verify_runs_the_identity_suite() {
    let (code, out, _) = codi(&["verify", "--instances", "20"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out.lines().count(), 5);
    assert!(out.lines().all(|l| l.starts_with("PASS")));
    assert_ne!(EXIT_OK, EXIT_CHECK_FAILED);
}
