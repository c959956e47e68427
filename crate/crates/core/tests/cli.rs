use std::path::{Path, PathBuf};

use serde_json::Value;

use promptsmith::cli::{dispatch, EXIT_DOMAIN, EXIT_OK, EXIT_USAGE};

const DEMO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/demo");

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(out_dir: &Path, args: &[&str]) -> Outcome {
    run_env(out_dir, args, Vec::new())
}

fn run_env(out_dir: &Path, args: &[&str], env: Vec<(String, String)>) -> Outcome {
    let mut argv = vec!["promptsmith", "--seed", "7", "--out-dir", out_dir.to_str().unwrap()];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = dispatch(argv, env, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn records(out_dir: &Path) -> Vec<PathBuf> {
    match std::fs::read_dir(out_dir.join("runs")) {
        Ok(rd) => rd.map(|e| e.unwrap().path()).collect(),
        Err(_) => Vec::new(),
    }
}

fn image() -> String {
    format!("{DEMO}/demo-00.png")
}

#[test]
fn each_invocation_writes_one_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let img = image();
    let invocations: Vec<Vec<&str>> = vec![
        vec!["caption", "--image", &img],
        vec!["inject", "--image", &img, "--source-word", "cat"],
        vec!["optimize", "--image", &img, "--source-word", "cat", "--steps", "20"],
        vec!["filter", "--image", &img, "--prompt", "a cat on the sofa", "--source-word", "cat"],
        vec!["edit", "--image", &img, "--source-word", "cat", "--target-word", "dog", "--prompt", "a cat"],
        vec!["edit", "--image", &img, "--source-word", "cat", "--target-word", "dog", "--backend", "sdedit"],
    ];
    for (i, args) in invocations.iter().enumerate() {
        run(dir.path(), args);
        assert_eq!(records(dir.path()).len(), i + 1, "after {args:?}");
    }
    for path in records(dir.path()) {
        let rec: Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
        for key in ["command", "argv", "config", "inputs_digest", "outputs", "wall_time", "tool_version", "exit_code"] {
            assert!(rec.get(key).is_some(), "missing {key}");
        }
        assert_eq!(rec["error"].is_null(), rec["exit_code"] == 0);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let img = image();
    let ok = run(dir.path(), &["inject", "--image", &img, "--source-word", "cat"]);
    assert_eq!(ok.code, EXIT_OK, "{}", ok.stderr);
    let report: Value = serde_json::from_str(&ok.stdout).unwrap();
    assert!(report["chosen"]["text"].as_str().unwrap().split(' ').any(|w| w == "cat"));

    let usage = run(dir.path(), &["inject", "--image", &img]);
    assert_eq!(usage.code, EXIT_USAGE);
    assert!(usage.stderr.contains("--source-word"));

    let unknown = run(
        dir.path(),
        &["edit", "--image", &img, "--source-word", "cat", "--target-word", "dog", "--backend", "sdedit"],
    );
    assert_eq!(unknown.code, EXIT_DOMAIN);
    assert!(unknown.stderr.contains("sdedit") && unknown.stderr.contains("not registered"), "{}", unknown.stderr);

    let vocab = run(dir.path(), &["inject", "--image", &img, "--source-word", "zebra"]);
    assert_eq!(vocab.code, EXIT_DOMAIN);

    let missing = run(dir.path(), &["caption", "--image", "/nonexistent.png"]);
    assert_eq!(missing.code, EXIT_DOMAIN);
}

#[test]
fn flags_beat_env_beat_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[caption]\nmax_tokens = 3\n").unwrap();
    let img = image();
    let words = |o: Outcome| -> usize {
        assert_eq!(o.code, 0, "{}", o.stderr);
        let v: Value = serde_json::from_str(&o.stdout).unwrap();
        v["caption"]["tokens"].as_array().unwrap().len()
    };
    let c = cfg.to_str().unwrap();
    assert!(words(run(dir.path(), &["--config", c, "caption", "--image", &img])) <= 3);
    let env = vec![("PROMPTSMITH_CAPTION__MAX_TOKENS".to_string(), "2".to_string())];
    assert!(words(run_env(dir.path(), &["--config", c, "caption", "--image", &img], env.clone())) <= 2);
    assert!(words(run_env(dir.path(), &["--config", c, "caption", "--image", &img, "--max-tokens", "1"], env)) <= 1);
}

#[test]
fn same_seed_same_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let img = image();
    for args in [
        vec!["inject", "--image", img.as_str(), "--source-word", "cat"],
        vec!["optimize", "--image", img.as_str(), "--source-word", "cat", "--steps", "50"],
        vec!["filter", "--image", img.as_str(), "--prompt", "the cat sitting on a sofa"],
    ] {
        let a = run(dir.path(), &args);
        let b = run(dir.path(), &args);
        assert_eq!(a.code, 0, "{}", a.stderr);
        assert_eq!(a.stdout, b.stdout);
    }
}

#[test]
fn edit_writes_image_and_bench_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let img = image();
    let e = run(
        dir.path(),
        &["--set", "sampler.resolution=64", "edit", "--image", &img, "--source-word", "cat", "--target-word", "dog"],
    );
    assert_eq!(e.code, 0, "{}", e.stderr);
    let v: Value = serde_json::from_str(&e.stdout).unwrap();
    assert!(v["edited_prompt"]["text"].as_str().unwrap().contains("dog"));
    let pngs = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 1);

    let manifest = format!("{DEMO}/manifest.json");
    let b = run(
        dir.path(),
        &["--set", "sampler.resolution=64", "bench", "--manifest", &manifest, "--methods", "one_noun,caption"],
    );
    assert_eq!(b.code, 0, "{}", b.stderr);
    let v: Value = serde_json::from_str(&b.stdout).unwrap();
    assert_eq!(v["reports"].as_array().unwrap().len(), 2);
    for f in ["reports.json", "per_sample.csv", "tradeoff.json", "tradeoff.csv", "tradeoff.svg"] {
        assert!(dir.path().join("bench").join(f).exists(), "{f}");
    }
}

#[test]
fn binary_reports_usage_errors() {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_promptsmith"))
        .args(["inject"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}
