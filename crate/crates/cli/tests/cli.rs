use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[task]
kind = "gaussian"
mu = [1.0, -0.5]
sigma = 0.5

[net]
hidden = 16
depth = 1
time_features = 8
time_embed = 8
cond_embed = 4

[teacher]
steps = 20
batch_size = 16
log_every = 5

[student]
steps = 10
batch_size = 16
log_every = 5

[cfg]
mode = "teacher_null"
w = 0.0

[sample]
n_samples = 64
teacher_steps = 8
sweep = [1, 2]
"#;

fn mflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn no_arguments_is_usage_error() {
    let out = mflow(&[]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_exits_cleanly() {
    let out = mflow(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["train-teacher", "distill", "sample", "eval", "verify", "gen-data"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(code(&mflow(&["bake"])), 1);
    assert_eq!(code(&mflow(&["verify", "--colour"])), 1);
}

#[test]
fn unknown_override_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mflow(&["verify", "--out", dir.path().to_str().unwrap(), "--set", "teacher.stepz=3"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn verify_writes_residual_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = mflow(&["verify", "--grid", "8", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("residual.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,s,max_resid,mean_resid"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 64);
    let mut evaluated = 0;
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        if f[2] == "skipped" {
            continue;
        }
        evaluated += 1;
        assert!(f[2].parse::<f64>().unwrap() < 1e-3, "{row}");
    }
    assert_eq!(evaluated, 28);
    assert!(dir.path().join("resolved_config.toml").exists());
}

#[test]
fn verify_with_too_few_integrator_steps_is_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = mflow(&["verify", "--grid", "4", "--steps", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("empty");
    for cmd in ["distill", "sample", "eval"] {
        let out = mflow(&[cmd, "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(code(&out), 3, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn exploding_learning_rate_is_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = mflow(&[
        "train-teacher",
        "--config",
        &cfg,
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--set",
        "teacher.lr=1e300",
        "--set",
        "teacher.grad_clip=0",
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_distill_sample_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    for (cmd, extra) in [
        ("train-teacher", vec!["--steps", "12"]),
        ("distill", vec![]),
        ("sample", vec!["--steps", "2"]),
        ("eval", vec![]),
    ] {
        let mut args = vec![cmd, "--config", &cfg, "--out", run_s];
        args.extend(extra);
        let out = mflow(&args);
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["teacher.ckpt", "student.ckpt", "teacher_log.csv", "student_log.csv", "samples.csv", "eval.csv", "resolved_config.toml"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("teacher_log.csv")).unwrap();
    assert_eq!(log.lines().last().unwrap().split(',').next(), Some("11"));
    let samples = std::fs::read_to_string(run.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().next(), Some("x,y"));
    assert_eq!(samples.lines().count(), 65);
    let eval = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().next(), Some("N,metric_name,value,n_samples,seed"));
    assert!(eval.contains("\n1,mean_err,"));
    assert!(eval.contains("\n2,energy_distance,"));
    assert!(eval.contains("\n8,teacher_cov_err,"));
}

#[test]
fn seed_changes_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let points = |seed: &str, name: &str| {
        let out_dir = dir.path().join(name);
        let out = mflow(&["gen-data", "--config", &cfg, "--seed", seed, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(out_dir.join("points.csv")).unwrap()
    };
    let a = points("1", "a");
    assert_eq!(a, points("1", "b"));
    assert_ne!(a, points("2", "c"));
    assert_eq!(a.lines().count(), 65);
}

#[test]
fn gen_data_writes_super_resolution_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("pairs_run");
    let out = mflow(&[
        "gen-data",
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "task.kind=toysr",
        "--set",
        "task.hr_size=16",
        "--set",
        "sample.n_samples=3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    let hr = std::fs::read(out_dir.join("pairs/0000_hr.pgm")).unwrap();
    assert!(hr.starts_with(b"P5\n16 16\n255\n"));
    let lr = std::fs::read(out_dir.join("pairs/0002_lr.pgm")).unwrap();
    assert!(lr.starts_with(b"P5\n4 4\n255\n"));
}
