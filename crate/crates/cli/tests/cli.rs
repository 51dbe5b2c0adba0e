use std::path::Path;
use std::process::{Command, Output};

use pfm_cli::artifacts::{read_cloud, read_manifest};
use pfm_cli::config::RunConfig;
use pfm_core::flowmatch::{FieldConfig, FlowField, SampleSource};
use pfm_core::prefdata::GaussianMixture;
use pfm_core::rng::derive_seed;

const SMALL: &str = "[data]\nn = 200\n[train]\nepochs = 3\n[model]\nhidden = [8]\n[infer]\nn_samples = 50\n";

fn pfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfm")).args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

fn out(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn stdout_is_json_lines_and_artifacts_are_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = pfm(&["train", "--config", &cfg, "--out", &out(tmp.path(), "t")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    for line in stdout.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("event").is_some());
    }
    let names: Vec<String> = read_manifest(&tmp.path().join("t")).unwrap().into_iter().map(|e| e.path).collect();
    assert_eq!(names, ["config.resolved.toml", "dataset.csv", "flow.ckpt", "train_loss.csv"]);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let dir = tmp.path().join("a");
    assert!(pfm(&["gen-data", "--config", &cfg, "--seed", "9", "--out", dir.to_str().unwrap()]).status.success());
    let first = read_manifest(&dir).unwrap();
    let resolved = dir.join("config.resolved.toml");
    let copy = tmp.path().join("resolved.toml");
    std::fs::copy(&resolved, &copy).unwrap();
    assert!(pfm(&["gen-data", "--config", copy.to_str().unwrap()]).status.success());
    assert_eq!(read_manifest(&dir).unwrap(), first);
}

#[test]
fn invalid_config_exits_1_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    std::fs::write(&p, "[data]\nn = 0\n").unwrap();
    let o = pfm(&["gen-data", "--config", p.to_str().unwrap(), "--out", &out(tmp.path(), "x")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data.n"));
    assert!(o.stdout.is_empty());

    std::fs::write(&p, "[data]\nnn = 3\n").unwrap();
    let o = pfm(&["gen-data", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nn"));
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(pfm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(pfm(&["train", "--seed", "x"]).status.code(), Some(1));
    assert_eq!(pfm(&["--help"]).status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let o = pfm(&["infer", "--out", &out(tmp.path(), "none")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn zero_field_inference_returns_the_source_draws() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let field = FlowField::zeroed(&FieldConfig::default(), 2, 0, 1).unwrap();
    let dir = tmp.path().join("z");
    std::fs::create_dir_all(&dir).unwrap();
    field.save(dir.join("flow.ckpt")).unwrap();
    let o = pfm(&["infer", "--config", &cfg, "--seed", "4", "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got = read_cloud(&dir.join("samples.csv")).unwrap();
    let want = SampleSource::reference(GaussianMixture::default_reference())
        .draw_many(50, derive_seed(4, "infer", 0))
        .unwrap();
    assert_eq!(got, want);
}

#[test]
fn single_iteration_matches_train_then_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[iterate]\niterations = 1\n");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for cmd in ["train", "infer"] {
        assert!(pfm(&[cmd, "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    }
    assert!(pfm(&["iterate", "--config", &cfg, "--out", b.to_str().unwrap()]).status.success());
    for f in ["dataset.csv", "flow.ckpt", "train_loss.csv", "samples.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join("iter_1").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn oracle_bundled_instances_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("o.toml");
    std::fs::write(&cfg, "[oracle]\nobjective_instances = 5\niterate_instances = 5\n").unwrap();
    let dir = tmp.path().join("o");
    let o = pfm(&["oracle", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("oracle_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["all_passed"], true);

    // a bundled instance file can be fed back in
    let inst = dir.join("instances/three_point_total_order.txt");
    std::fs::write(&cfg, format!("[oracle]\ninstance = {:?}\n", inst.to_str().unwrap())).unwrap();
    let o = pfm(&["oracle", "--config", cfg.to_str().unwrap(), "--out", &out(tmp.path(), "one")]);
    assert_eq!(o.status.code(), Some(0));

    std::fs::write(&inst, "3\nnot numbers\n").unwrap();
    let o = pfm(&["oracle", "--config", cfg.to_str().unwrap(), "--out", &out(tmp.path(), "bad")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_scores_named_clouds() {
    let tmp = tempfile::tempdir().unwrap();
    let base = write_config(tmp.path(), "");
    let dir = tmp.path().join("e");
    assert!(pfm(&["train", "--config", &base, "--out", dir.to_str().unwrap()]).status.success());
    assert!(pfm(&["infer", "--config", &base, "--out", dir.to_str().unwrap()]).status.success());
    let mut cfg = RunConfig::from_toml(SMALL).unwrap();
    cfg.data.dataset = Some(dir.join("dataset.csv"));
    cfg.eval.clouds.insert("pfm".into(), dir.join("samples.csv"));
    let p = tmp.path().join("eval.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    let o = pfm(&["eval", "--config", p.to_str().unwrap(), "--out", &out(tmp.path(), "m")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("m/metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("pfm,"));

    cfg.eval.clouds.insert("missing".into(), tmp.path().join("nope.csv"));
    std::fs::write(&p, cfg.to_toml()).unwrap();
    assert_eq!(pfm(&["eval", "--config", p.to_str().unwrap()]).status.code(), Some(1));
}
