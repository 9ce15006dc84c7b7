//! `mflow`: train a teacher, distill a student, sample, evaluate, verify the
//! analytic oracle and generate toy data.
//!
//! Every command reads a TOML config (`--config`), applies `--set key=value`
//! overrides, then `--seed` and `--steps`, and writes `resolved_config.toml`
//! next to its outputs in `--out`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
//! 3 I/O or checkpoint error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mflow_core::analytic::{identity_residual_grid, max_residual, midpoint_grid, residual_csv, AnalyticFlow, ResidualSettings};
use mflow_core::data::{from_z, manifest_csv, points_csv, write_pgm, Dataset};
use mflow_core::nets::FieldNet;
use mflow_core::sampler::{
    format_value, psnr, sample_student, sample_teacher_euler, steps_sweep, sweep_csv, task_metrics, upsample_baseline,
    EvalSet, SweepRow,
};
use mflow_core::train::{
    distill_student, load_student, load_teacher, train_teacher, RunConfig, RunIo, RESOLVED_CONFIG,
    STUDENT_CHECKPOINT, TEACHER_CHECKPOINT,
};
use mflow_core::{par, Tensor};

/// Residual threshold for `verify`.
const VERIFY_TOLERANCE: f64 = 1e-3;
const VERIFY_PROBES: usize = 64;

#[derive(Parser, Debug)]
#[command(name = "mflow", version, about = "MeanFlow distillation laboratory", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the rectified-flow teacher (`--steps` sets teacher.steps).
    TrainTeacher(Common),
    /// Distill the teacher into a student (`--steps` sets student.steps).
    Distill(Common),
    /// Sample the student (`--steps` sets the number of sampling steps).
    Sample(Common),
    /// Step sweep and baselines on a held-out set (`--steps` replaces the sweep).
    Eval(Common),
    /// Check the average-velocity identity on the analytic flow (`--grid` cells
    /// per axis, `--steps` integrator steps).
    Verify(Common),
    /// Write toy data: PGM pairs for super-resolution, point CSVs otherwise.
    GenData(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "runs/default")]
    out: PathBuf,
    #[arg(long, value_name = "N")]
    steps: Option<u64>,
    #[arg(long, value_name = "K", default_value_t = 8)]
    grid: usize,
    /// Dotted config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Resume training from a periodic checkpoint.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<NumericalFailure>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<mflow_core::Error>() {
            return match e {
                e if e.is_numerical() => 2,
                mflow_core::Error::Io { .. } | mflow_core::Error::Checkpoint(_) => 3,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn resolve(c: &Common, steps_key: Option<&str>) -> anyhow::Result<RunConfig> {
    let text = match &c.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| mflow_core::Error::Io {
            path: p.clone(),
            source: e,
        })?,
        None => String::new(),
    };
    let mut overrides = c.set.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let (Some(n), Some(key)) = (c.steps, steps_key) {
        overrides.push(format!("{key}={n}"));
    }
    Ok(RunConfig::from_toml_with(&text, &overrides)?)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| mflow_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).map_err(|e| mflow_core::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_text(&out.join(RESOLVED_CONFIG), &cfg.to_toml())
}

fn init_threads(cfg: &RunConfig) {
    let threads = match (par::threads_from_env(), cfg.threads) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    if let Err(e) = par::init_threads(threads) {
        log::warn!("could not size the worker pool: {e}");
    }
}

fn student_path(out: &Path) -> PathBuf {
    out.join(STUDENT_CHECKPOINT)
}

fn teacher_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.teacher_checkpoint
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join(TEACHER_CHECKPOINT))
}

fn image(ds: &Dataset, row: &[f64]) -> anyhow::Result<Tensor> {
    let Dataset::ToySr(c) = ds else {
        bail!("images exist only for the super-resolution task");
    };
    Ok(from_z(&Tensor::new(&[c.hr_size, c.hr_size], row.to_vec())?))
}

fn train_cmd(c: &Common) -> anyhow::Result<()> {
    let cfg = resolve(c, Some("teacher.steps"))?;
    init_threads(&cfg);
    let io = RunIo {
        out: Some(c.out.clone()),
        resume: c.resume.clone(),
    };
    let run = train_teacher(&cfg, &io)?;
    let last = run.log.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "teacher: {} steps, final loss {last:.5e}, wrote {}",
        run.adam.step,
        c.out.join(TEACHER_CHECKPOINT).display()
    );
    Ok(())
}

fn distill_cmd(c: &Common) -> anyhow::Result<()> {
    let cfg = resolve(c, Some("student.steps"))?;
    init_threads(&cfg);
    let tpath = teacher_path(&cfg, &c.out);
    let teacher = load_teacher(&cfg, &tpath).with_context(|| format!("loading teacher {}", tpath.display()))?;
    let io = RunIo {
        out: Some(c.out.clone()),
        resume: c.resume.clone(),
    };
    let run = distill_student(&cfg, &teacher, &io)?;
    let last = run.log.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "student: {} steps, final loss {last:.5e}, wrote {}",
        run.adam.step,
        student_path(&c.out).display()
    );
    Ok(())
}

fn load_student_for(cfg: &RunConfig, out: &Path) -> anyhow::Result<FieldNet> {
    let path = student_path(out);
    load_student(cfg, &path).with_context(|| format!("loading student {}", path.display()))
}

fn sample_cmd(c: &Common) -> anyhow::Result<()> {
    let cfg = resolve(c, Some("sample.steps"))?;
    init_threads(&cfg);
    let ds = Dataset::from_config(&cfg.task)?;
    let student = load_student_for(&cfg, &c.out)?;
    prepare_out(&c.out, &cfg)?;
    let set = EvalSet::new(&ds, cfg.sample.n_samples, cfg.seed)?;
    let samples = sample_student(&student, &set.z0, &set.lr, &set.labels, cfg.sample.steps)?;
    if !samples.is_finite() {
        return Err(NumericalFailure("student produced non-finite samples".into()).into());
    }
    match ds {
        Dataset::ToySr(_) => {
            let dir = c.out.join("samples");
            std::fs::create_dir_all(&dir).map_err(|e| mflow_core::Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let mut manifest = String::from("index,label,file,psnr\n");
            for i in 0..set.len() {
                let img = image(&ds, samples.row(i))?;
                let hr = image(&ds, set.reference.row(i))?;
                let name = format!("sample_{i:04}.pgm");
                write_pgm(&dir.join(&name), &img)?;
                writeln!(manifest, "{i},{},{name},{}", set.labels[i], format_value(psnr(&img, &hr)?))?;
            }
            write_text(&c.out.join("samples.csv"), &manifest)?;
            println!("wrote {} images to {}", set.len(), dir.display());
        }
        _ => {
            write_text(&c.out.join("samples.csv"), &points_csv(&samples))?;
            println!("wrote {} samples to {}", set.len(), c.out.join("samples.csv").display());
        }
    }
    Ok(())
}

fn eval_cmd(c: &Common) -> anyhow::Result<()> {
    let mut cfg = resolve(c, None)?;
    if let Some(n) = c.steps {
        cfg.sample.sweep = vec![usize::try_from(n)?];
        cfg.validate()?;
    }
    init_threads(&cfg);
    let ds = Dataset::from_config(&cfg.task)?;
    let student = load_student_for(&cfg, &c.out)?;
    prepare_out(&c.out, &cfg)?;
    let set = EvalSet::new(&ds, cfg.sample.n_samples, cfg.sample.seed)?;
    let mut rows = steps_sweep(&student, &ds, &set, &cfg.sample.sweep)?;
    let mut extra = |n: usize, prefix: &str, metrics: Vec<(&'static str, f64)>| {
        for (name, value) in metrics {
            rows.push(SweepRow {
                n,
                metric: format!("{prefix}_{name}"),
                value,
                n_samples: set.len(),
                seed: set.seed,
            });
        }
    };
    if matches!(ds, Dataset::ToySr(_)) {
        let base = upsample_baseline(&ds, &set)?;
        extra(0, "baseline", task_metrics(&ds, &set, &base)?);
    }
    let tpath = teacher_path(&cfg, &c.out);
    if tpath.exists() {
        let teacher = load_teacher(&cfg, &tpath)?;
        let n = cfg.sample.teacher_steps;
        let ts = sample_teacher_euler(&teacher, ds.labels(), &set.z0, &set.lr, &set.labels, n, None)?;
        extra(n, "teacher", task_metrics(&ds, &set, &ts)?);
    }
    if rows.iter().any(|r| r.value.is_nan()) {
        return Err(NumericalFailure("evaluation produced NaN metrics".into()).into());
    }
    let csv = sweep_csv(&rows);
    write_text(&c.out.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn verify_cmd(c: &Common) -> anyhow::Result<()> {
    let cfg = resolve(c, None)?;
    init_threads(&cfg);
    if c.grid == 0 {
        bail!("--grid must be positive");
    }
    let flow = match Dataset::from_config(&cfg.task)? {
        Dataset::Gaussian(f) => f,
        _ => AnalyticFlow::new(vec![1.0, -0.5], 0.5)?,
    };
    prepare_out(&c.out, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probes = Tensor::randn(&[VERIFY_PROBES, flow.dim()], &mut rng);
    let settings = ResidualSettings {
        steps: c.steps.map_or(Ok(ResidualSettings::default().steps), usize::try_from)?,
        ..ResidualSettings::default()
    };
    let grid = midpoint_grid(c.grid);
    let cells = identity_residual_grid(&flow, &grid, &grid, &probes, settings)?;
    let path = c.out.join("residual.csv");
    write_text(&path, &residual_csv(&cells))?;
    let max = max_residual(&cells);
    println!("max residual {max:.3e} over {} cells, wrote {}", cells.len(), path.display());
    if !(max < VERIFY_TOLERANCE) {
        return Err(NumericalFailure(format!("identity residual {max:.3e} exceeds {VERIFY_TOLERANCE:e}")).into());
    }
    Ok(())
}

fn gen_data_cmd(c: &Common) -> anyhow::Result<()> {
    let cfg = resolve(c, None)?;
    init_threads(&cfg);
    let ds = Dataset::from_config(&cfg.task)?;
    prepare_out(&c.out, &cfg)?;
    let n = cfg.sample.n_samples;
    match &ds {
        Dataset::ToySr(sr) => {
            let pairs = Dataset::sr_pairs(sr, n, cfg.seed)?;
            let dir = c.out.join("pairs");
            std::fs::create_dir_all(&dir).map_err(|e| mflow_core::Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            for (i, p) in pairs.iter().enumerate() {
                write_pgm(&dir.join(format!("{i:04}_hr.pgm")), &p.hr)?;
                write_pgm(&dir.join(format!("{i:04}_lr.pgm")), &p.lr)?;
            }
            write_text(&c.out.join("manifest.csv"), &manifest_csv(&pairs, &sr.degrade))?;
            println!("wrote {n} pairs to {}", dir.display());
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let data = ds.sample_data(n, &mut rng, &mflow_core::data::Augment::none())?;
            write_text(&c.out.join("points.csv"), &points_csv(&data.z1))?;
            println!("wrote {n} points to {}", c.out.join("points.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::TrainTeacher(c) => train_cmd(c),
        Command::Distill(c) => distill_cmd(c),
        Command::Sample(c) => sample_cmd(c),
        Command::Eval(c) => eval_cmd(c),
        Command::Verify(c) => verify_cmd(c),
        Command::GenData(c) => gen_data_cmd(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
