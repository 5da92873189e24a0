use std::path::Path;
use std::process::{Command, Output};

use hrnet_forge::cli::config::RunConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hrnet-forge"));
    c.env_remove("HRNET_FORGE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes the rendered `toy-seg` preset with `overrides` applied.
fn toy_config(dir: &Path, overrides: &[(&str, &str)]) -> String {
    let mut text = String::new();
    for line in RunConfig::preset("toy-seg").unwrap().render().lines() {
        let key = line.split('=').next().unwrap().trim();
        match overrides.iter().find(|(k, _)| *k == key) {
            Some((k, v)) => text.push_str(&format!("{k} = {v}\n")),
            None => text.push_str(&format!("{line}\n")),
        }
    }
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn describe_lists_layers_and_outputs() {
    let o = run(&["describe", "--config", "tiny", "--size", "64x64"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.starts_with("network width"));
    assert!(s.lines().any(|l| l.starts_with("output ")));
}

#[test]
fn cost_writes_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cost");
    let o = run(&["cost", "--config", "w18cls", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = std::fs::read_to_string(out.join("cost.tsv")).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next(), Some("layer\tstage\tbranch\tparams\tmacs"));
    let params: u64 = lines.map(|l| l.split('\t').nth(3).unwrap().parse::<u64>().unwrap()).sum();
    assert!((21_000_000..21_500_000).contains(&params), "{params}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["describe", "--size", "64by64"]).status.code(), Some(1));
    assert_eq!(run(&["describe", "--config", "/no/such/file"]).status.code(), Some(1));
    assert_eq!(run(&["describe", "--config", "tiny", "--size", "65x64"]).status.code(), Some(1));
    assert_eq!(run(&["gen-data", "--config", "toy-seg"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "task = segmentation\nwidth = many\n").unwrap();
    let o = run(&["describe", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn thread_variable_is_validated() {
    for bad in ["0", "lots", "-2"] {
        let o = bin().env("HRNET_FORGE_THREADS", bad).args(["describe", "--config", "tiny"]).output().unwrap();
        assert_eq!(o.status.code(), Some(1), "{bad}");
    }
    let o = bin().env("HRNET_FORGE_THREADS", "2").args(["describe", "--config", "tiny"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn missing_checkpoint_is_io_error() {
    let o = run(&["eval", "--config", "toy-seg", "--checkpoint", "/no/such/checkpoint.bin"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_is_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(
        dir.path(),
        &[("lr", "1e30"), ("momentum", "0"), ("max_iter", "6"), ("data_samples", "8"), ("precision", "verify")],
    );
    let out = dir.path().join("run");
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let dump = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = run(&["gen-data", "--config", "toy-lm", "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>()
    };
    let a = dump("a", "4");
    assert_eq!(a, dump("b", "4"));
    assert_ne!(a, dump("c", "5"));
    assert!(a.len() > 2);
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), &[("max_iter", "4"), ("data_samples", "8")]);
    let out = dir.path().join("run");
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = out.join("checkpoint.bin");
    assert!(ck.exists() && out.join("loss.tsv").exists());

    let eval_dir = dir.path().join("eval");
    let o = run(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        ck.to_str().unwrap(),
        "--flip-eval",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("miou"));
    assert!(eval_dir.join("predictions.tensor").exists());

    // a checkpoint is bound to the config that produced it
    let o = run(&["eval", "--config", &cfg, "--seed", "99", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
