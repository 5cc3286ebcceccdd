use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use codistill::config::RunConfig;

const TINY: &str = r#"
seed = 3
out_dir = "unused"

[data]
grid_h = 4
grid_w = 4
frames = 4
n_classes = 3

[dataset]
n_train = 32
n_heldout = 16

[model]
n_blocks = 4
hidden_dim = 8
time_embed_dim = 8

[base]
iterations = 20
batch_size = 4

[importance]
n_samples = 2
batch_size = 4
retention = 0.7

[stage2]
iterations = 6
batch_size = 4

[distill]
iterations = 3
fake_steps = 2
steps = 2
batch_size = 4

[eval]
n_samples = 8
teacher_steps = 4
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_codistill"));
    c.env_remove("FLGN_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stagewise_commands_reproduce_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("stages"), dir.path().join("whole"));
    let common = |extra: &[&str]| {
        let mut v = vec!["--config", s(&cfg), "--out", s(&a)];
        v.extend_from_slice(extra);
        v.iter().map(|x| x.to_string()).collect::<Vec<_>>()
    };
    let step = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd.to_string()];
        args.extend(common(extra));
        let o = bin().args(&args).output().unwrap();
        assert_ok(&o);
    };
    step("gen-data", &[]);
    step("train-base", &[]);
    let base = a.join("base.flgn");
    step("score-blocks", &["--init", s(&base)]);
    let keep = a.join("importance.json");
    step("train-stage2", &["--init", s(&base), "--keep", s(&keep)]);
    step("distill", &["--init", s(&a.join("stage2.flgn"))]);
    step("sample", &["--init", s(&a.join("generator.flgn")), "--n", "4"]);
    step("eval", &[]);
    assert!(a.join("metrics.json").exists());

    assert_ok(&run(&["pipeline", "--config", s(&cfg), "--out", s(&b)]));
    for name in ["base.flgn", "importance.json", "stage2.flgn", "generator.flgn", "distill_loss.csv", "stage2_loss.csv", "base_loss.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn distill_without_init_is_a_precondition_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = run(&["distill", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage2"));
}

#[test]
fn wrong_stage_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_ok(&run(&["train-base", "--config", s(&cfg), "--out", s(dir.path())]));
    let o = run(&["distill", "--config", s(&cfg), "--out", s(dir.path()), "--init", s(&dir.path().join("base.flgn"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn corrupt_checkpoint_and_missing_config_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let junk = dir.path().join("junk.flgn");
    fs::write(&junk, b"NOPE0000").unwrap();
    let o = run(&["sample", "--config", s(&cfg), "--out", s(dir.path()), "--init", s(&junk)]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["gen-data", "--config", s(&dir.path().join("absent.toml"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn environment_overrides_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let env_out = dir.path().join("from_env");
    let flag_out = dir.path().join("from_flag");
    let o = bin()
        .env("FLGN_OUT", &env_out)
        .args(["gen-data", "--config", s(&cfg), "--out", s(&flag_out)])
        .output()
        .unwrap();
    assert_ok(&o);
    assert!(env_out.join("train_labels.csv").exists());
    assert!(!flag_out.exists());
}

#[test]
fn resolved_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_ok(&run(&["gen-data", "--config", s(&cfg), "--out", s(dir.path()), "--seed", "9"]));
    let resolved = RunConfig::load(dir.path().join("config.resolved.toml")).unwrap();
    let mut expected = RunConfig::from_toml(TINY).unwrap();
    expected.seed = 9;
    expected.out_dir = resolved.out_dir.clone();
    assert_eq!(resolved, expected);
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--out", s(dir.path())]);
    assert_ok(&o);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report.to_string().contains("surrogate"));
}
