use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[core]
k = 4
q = 2
m = 2

[channel]
forward_snr_db = 10.0

[protocol]
gamma = 0.99
t_max = 8

[codec]
d_latent = 8

[training]
batch_size = 16
pretrain_steps = 3
finetune_steps = 2
val_every = 2
val_sessions = 50
calibration_sessions = 64

[eval]
sessions = 200
gammas = [0.99, 0.999]
"#;

fn deepvlf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepvlf"))
        .args(args)
        .current_dir(dir)
        .env_remove("DEEPVLF_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_dir() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn repo_config(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn default_config_has_full_scale_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let o = deepvlf(dir.path(), &["config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for line in [
        "batch_size = 8192",
        "learning_rate = 0.001",
        "weight_decay = 0.001",
        "vartheta = 10.0",
        "epsilon = 9.0",
        "k = 51",
        "q = 17",
        "m = 3",
    ] {
        assert!(text.lines().any(|l| l.trim() == line), "missing `{line}` in\n{text}");
    }
}

#[test]
fn effective_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["full.toml", "smoke.toml"] {
        let first = deepvlf(dir.path(), &["config", "-c", &repo_config(name), "--set", "eval.sessions=77"]);
        assert!(first.status.success(), "{}", stderr(&first));
        let path = dir.path().join("effective.toml");
        fs::write(&path, &first.stdout).unwrap();
        let second = deepvlf(dir.path(), &["config", "-c", path.to_str().unwrap()]);
        assert_eq!(stdout(&first), stdout(&second));
    }
}

#[test]
fn overrides_are_last_wins_and_seed_falls_back_to_env() {
    let (dir, cfg) = tiny_dir();
    let cfg = cfg.to_str().unwrap();
    let o = deepvlf(dir.path(), &["config", "-c", cfg, "--set", "eval.sessions=5", "--set", "eval.sessions=9"]);
    assert!(stdout(&o).contains("sessions = 9"));

    let run = |extra: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_deepvlf"));
        c.args(["config", "-c", cfg]).args(extra).env_remove("DEEPVLF_SEED");
        if let Some(v) = env {
            c.env("DEEPVLF_SEED", v);
        }
        stdout(&c.output().unwrap())
    };
    assert!(run(&[], None).starts_with("seed = 3"));
    assert!(run(&[], Some("42")).starts_with("seed = 42"));
    assert!(run(&["--seed", "8"], Some("42")).starts_with("seed = 8"));
}

#[test]
fn inconsistent_geometry_is_a_config_error() {
    let (dir, cfg) = tiny_dir();
    let o = deepvlf(dir.path(), &["eval", "-c", cfg.to_str().unwrap(), "--oracle-stub", "--set", "core.k=5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("core.k"), "{}", stderr(&o));
    let o = deepvlf(dir.path(), &["config", "-c", cfg.to_str().unwrap(), "--set", "protocol.gamma=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("protocol.gamma"));
}

#[test]
fn oracle_stub_eval_is_a_harness_self_test() {
    let (dir, cfg) = tiny_dir();
    let cfg = cfg.to_str().unwrap();
    let o = deepvlf(dir.path(), &["eval", "-c", cfg, "--oracle-stub", "--csv", "a.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    // tau+ = 5 at 10 dB, so every group takes five symbols
    assert!(line.contains("bler=0.0000e0"), "{line}");
    assert!(line.contains("rate=0.400000"), "{line}");
    assert_eq!(fs::read_to_string(dir.path().join("a.csv")).unwrap().lines().count(), 2);

    let o = deepvlf(dir.path(), &["eval", "-c", cfg, "--oracle-stub", "--csv", "b.csv"]);
    assert!(o.status.success());
    assert_eq!(fs::read(dir.path().join("a.csv")).unwrap(), fs::read(dir.path().join("b.csv")).unwrap());

    let o = deepvlf(dir.path(), &["eval", "-c", cfg, "--oracle-stub", "--sessions", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_replay_sweep_pipeline() {
    let (dir, cfg) = tiny_dir();
    let cfg = cfg.to_str().unwrap();
    let d = dir.path();

    let o = deepvlf(d, &["train", "-c", cfg, "--phase", "pretrain", "--checkpoint", "pre.ckpt", "--metrics", "pre.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(d.join("pre.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| l.contains("\"phase\":\"pretrain\"")));

    let o = deepvlf(d, &["train", "-c", cfg, "--checkpoint", "full.ckpt", "--metrics", "full.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(d.join("full.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"phase\":\"finetune\"")).count(), 2);
    assert!(log.contains("bler_estimate\":0") || log.contains("bler_estimate\":1"));
    assert!(d.join("full.ckpt.best").exists());

    let eval = |csv: &str, ts: &str| {
        deepvlf(d, &["eval", "-c", cfg, "--checkpoint", "full.ckpt", "--workers", "1", "--csv", csv, "--transcripts", ts])
    };
    let o = eval("e1.csv", "t1.jsonl");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("gamma=0.99 "));
    let o = eval("e2.csv", "t2.jsonl");
    assert!(o.status.success());
    assert_eq!(fs::read(d.join("e1.csv")).unwrap(), fs::read(d.join("e2.csv")).unwrap());
    assert_eq!(fs::read(d.join("t1.jsonl")).unwrap(), fs::read(d.join("t2.jsonl")).unwrap());

    let o = deepvlf(d, &["replay", "-c", cfg, "--checkpoint", "full.ckpt", "--transcripts", "t1.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("replayed 200 sessions"));
    // a transcript checked against other parameters fails
    let o = deepvlf(d, &["replay", "-c", cfg, "--checkpoint", "pre.ckpt", "--transcripts", "t1.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("replay diverged at round 1"), "{}", stderr(&o));

    // a checkpoint does not load against a different codec section
    let o = deepvlf(d, &["eval", "-c", cfg, "--checkpoint", "full.ckpt", "--set", "codec.d_latent=9"]);
    assert_eq!(o.status.code(), Some(2));

    // single-point sweep reproduces the eval row
    let o = deepvlf(
        d,
        &["sweep", "-c", cfg, "--checkpoint", "full.ckpt", "--set", "eval.gammas=[0.99]", "--csv", "s.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(d.join("s.csv")).unwrap(), fs::read(d.join("e1.csv")).unwrap());

    // per-threshold checkpoints, one missing
    let o = deepvlf(
        d,
        &[
            "sweep", "-c", cfg, "--point-checkpoint", "0.99=full.ckpt", "--point-checkpoint", "0.999=missing.ckpt",
            "--csv", "p.csv", "--plot-data", "plot.csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("skipped gamma=0.999"), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.join("p.csv")).unwrap().lines().count(), 2);
    assert!(d.join("plot.csv").exists());
}

#[test]
fn oracle_sweep_over_default_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = deepvlf(dir.path(), &["sweep", "--oracle-stub", "--set", "eval.sessions=100", "--csv", "grid.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with(
        "gamma,snr_fwd_db,snr_fb_db,n_sessions,bler,bler_ci_low,bler_ci_high,group_error_rate,\
         avg_code_rate,avg_power,forced_fraction,seed"
    ));
}

#[test]
fn divergence_keeps_last_checkpoint_and_exits_3() {
    let (dir, cfg) = tiny_dir();
    let o = deepvlf(
        dir.path(),
        &["train", "-c", cfg.to_str().unwrap(), "--set", "training.learning_rate=1e300", "--checkpoint", "div.ckpt"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert!(dir.path().join("div.ckpt").exists());
}

#[test]
fn missing_files_are_io_errors() {
    let (dir, cfg) = tiny_dir();
    let o = deepvlf(dir.path(), &["eval", "-c", cfg.to_str().unwrap(), "--checkpoint", "nope.ckpt"]);
    assert_eq!(o.status.code(), Some(4));
    let o = deepvlf(dir.path(), &["config", "-c", "nope.toml"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn gradcheck_passes_and_honours_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let a = deepvlf(dir.path(), &["gradcheck", "--seed", "4"]);
    assert!(a.status.success(), "{}", stdout(&a));
    assert!(stdout(&a).contains("gradcheck PASS"));
    let b = deepvlf(dir.path(), &["gradcheck", "--seed", "4"]);
    assert_eq!(a.stdout, b.stdout);
    let strict = deepvlf(dir.path(), &["gradcheck", "--seed", "4", "--tol-p95", "1e-30"]);
    assert_eq!(strict.status.code(), Some(1));
    assert!(stdout(&strict).contains("\"tol_p95\":1e-30"));
}
