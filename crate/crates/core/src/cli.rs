//! Command-line surface: `train`, `predict`, `check`, `inspect`, `bench`.
//!
//! Exit codes: 0 on success (including a passing check suite), 1 on runtime
//! failures or a failing check, 2 on usage errors — unknown subcommands,
//! flags, or config keys.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::fixtures;
use crate::io::checkpoint::{
    build_checkpoint, load_checkpoint, restore_model, save_checkpoint, CheckpointError, Restored,
};
use crate::io::config::{read_config_file, ConfigError};
use crate::io::extxyz::{parse_extxyz, Dataset, ExtxyzError};
use crate::model::{EquivarianceGroup, Head, Model, ModelConfig, ModelError};
use crate::train::{train_loop, TrainError, TrainState};
use crate::verify::{
    appendix_oracle_suite, equivariance_report, gradient_report, oracle_result_lines, Tolerances,
};
use crate::{Real, EPS_SCALE};

#[derive(Parser)]
#[command(name = "tensornet", version, about = "Equivariant interatomic model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a dataset; writes checkpoints and per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write predictions.
    Predict(PredictArgs),
    /// Run a verification suite and report RESULT lines.
    Check(CheckArgs),
    /// Print a checkpoint's config block and array manifest.
    Inspect(InspectArgs),
    /// Time forward and forward+backward passes on a dataset.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Line-oriented `key = value` config file; unknown keys are rejected.
    #[arg(long)]
    config: PathBuf,
    /// Extended-XYZ training data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated outputs: e (energy), f (forces), mu (dipole),
    /// alpha (polarizability), sigma (shielding).
    #[arg(long, default_value = "e")]
    heads: String,
    /// Output text file, one `frame <idx> energy <float>` block per frame.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// Which suite to run.
    #[arg(value_enum)]
    suite: CheckSuite,
    /// Checkpoint to verify.
    #[arg(long, conflicts_with = "random_init")]
    ckpt: Option<PathBuf>,
    /// Verify a freshly initialized model instead of a checkpoint.
    #[arg(long)]
    random_init: bool,
    /// Seed for sampled transforms, fixtures, and fresh parameters.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Copy, Clone, ValueEnum)]
enum CheckSuite {
    /// Random rotations (and reflections for full-group models) on every head.
    Equivariance,
    /// Central-difference force check plus the net-force bound.
    Gradients,
    /// Tensor-algebra identity oracles on random channel stacks.
    Appendix,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Timed passes over the dataset (after one warmup pass).
    #[arg(long, default_value_t = 10)]
    repeat: usize,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::UnknownKey { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

macro_rules! runtime_error {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_error!(CheckpointError, ExtxyzError, ModelError, TrainError, std::io::Error);

/// Parse and dispatch; `args` is the full argv including the program name.
pub fn run_cli(args: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Predict(args) => cmd_predict(&args),
        Command::Check(args) => cmd_check(&args),
        Command::Inspect(args) => cmd_inspect(&args),
        Command::Bench(args) => cmd_bench(&args),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<bool, CliError> {
    let full = read_config_file(&args.config)?;
    let dataset = parse_extxyz(&args.data)?;
    let mut model = Model::new(full.model.clone(), full.init_seed)?;
    let mut state = TrainState::new(&model.params);
    let outcome = train_loop(&mut model, &mut state, &dataset.systems, &full.train)?;

    std::fs::create_dir_all(&args.out)?;
    let mut metrics_text = String::new();
    for record in &outcome.records {
        let line = record.line();
        println!("{line}");
        metrics_text.push_str(&line);
        metrics_text.push('\n');
    }
    std::fs::write(args.out.join("metrics.txt"), metrics_text)?;

    let metrics = vec![
        ("best_val_loss".to_string(), outcome.best_val_loss.to_string()),
        ("best_epoch".to_string(), outcome.best_epoch.to_string()),
        ("stop_reason".to_string(), outcome.stop_reason.clone()),
    ];
    let final_path = args.out.join("model.ckpt");
    save_checkpoint(&final_path, &build_checkpoint(&model, &full.train, Some(&state), metrics.clone()))?;
    let best_model = Model::from_parts(full.model.clone(), outcome.best_params.clone())?;
    let best_path = args.out.join("best.ckpt");
    save_checkpoint(&best_path, &build_checkpoint(&best_model, &full.train, None, metrics))?;

    println!("stop: {}", outcome.stop_reason);
    println!("wrote {}", final_path.display());
    println!("wrote {}", best_path.display());
    Ok(true)
}

fn cmd_predict(args: &PredictArgs) -> Result<bool, CliError> {
    let (with_forces, extra) = parse_head_spec(&args.heads)?;
    let restored = restore_model(&load_checkpoint(&args.ckpt)?)?;
    let dataset = parse_extxyz(&args.data)?;

    let mut text = String::new();
    for (idx, system) in dataset.systems.iter().enumerate() {
        let pred = restored.model.predict(system, &extra, with_forces)?;
        writeln!(text, "frame {idx} energy {}", pred.energy).unwrap();
        if let Some(forces) = &pred.forces {
            for (k, f) in forces.iter().enumerate() {
                writeln!(text, "force {k} {} {} {}", f[0], f[1], f[2]).unwrap();
            }
        }
        if let Some(d) = pred.dipole {
            writeln!(text, "dipole {} {} {}", d[0], d[1], d[2]).unwrap();
        }
        if let Some(a) = pred.polarizability {
            let joined = a.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
            writeln!(text, "polarizability {joined}").unwrap();
        }
        if let Some(shieldings) = &pred.shieldings {
            for (k, s) in shieldings.iter().enumerate() {
                let joined = s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
                writeln!(text, "shielding {k} {joined}").unwrap();
            }
        }
        if let Some(shifts) = &pred.chemical_shifts {
            for (k, v) in shifts.iter().enumerate() {
                writeln!(text, "chemical_shift {k} {v}").unwrap();
            }
        }
    }
    std::fs::write(&args.out, text)?;
    println!("wrote {} ({} frames)", args.out.display(), dataset.systems.len());
    Ok(true)
}

fn parse_head_spec(spec: &str) -> Result<(bool, Vec<Head>), CliError> {
    let mut with_forces = false;
    let mut extra = Vec::new();
    let push = |head: Head, extra: &mut Vec<Head>| {
        if !extra.contains(&head) {
            extra.push(head);
        }
    };
    for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match token {
            "e" => {}
            "f" => with_forces = true,
            "mu" => push(Head::Dipole, &mut extra),
            "alpha" => push(Head::Polarizability, &mut extra),
            "sigma" => push(Head::Shielding, &mut extra),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown head `{other}` (expected e, f, mu, alpha, sigma)"
                )))
            }
        }
    }
    Ok((with_forces, extra))
}

fn cmd_check(args: &CheckArgs) -> Result<bool, CliError> {
    match args.suite {
        CheckSuite::Appendix => {
            let checks = appendix_oracle_suite(args.seed, 1000);
            for line in oracle_result_lines(&checks) {
                println!("{line}");
            }
            Ok(checks.iter().all(|c| c.pass))
        }
        CheckSuite::Equivariance => {
            let model = model_from_flags(args)?;
            let system = check_fixture(args.seed, model.config.max_atomic_number);
            let include_parity = model.config.equivariance_group == EquivarianceGroup::O3;
            let report = equivariance_report(
                &model,
                &system,
                20,
                args.seed,
                include_parity,
                &Tolerances::default(),
            )?;
            print!("{}", report.table());
            for line in report.result_lines() {
                println!("{line}");
            }
            Ok(report.pass)
        }
        CheckSuite::Gradients => {
            let model = model_from_flags(args)?;
            let system = check_fixture(args.seed, model.config.max_atomic_number);
            let report = gradient_report(&model, &system, 1e-4, 1e-5 * EPS_SCALE)?;
            for line in report.result_lines() {
                println!("{line}");
            }
            Ok(report.pass)
        }
    }
}

/// Shared 10-atom probe for the model-level check suites: H/C/O, restricted
/// to whatever the model's species table can evaluate.
fn check_fixture(seed: u64, max_z: u32) -> crate::geometry::AtomicSystem {
    let species: Vec<u32> = [1, 6, 8].into_iter().filter(|&z| z <= max_z).collect();
    fixtures::random_cloud(seed.wrapping_add(101), 10, &species, 4.0)
}

fn model_from_flags(args: &CheckArgs) -> Result<Model, CliError> {
    match (&args.ckpt, args.random_init) {
        (Some(path), false) => Ok(restore_model(&load_checkpoint(path)?)?.model),
        (None, true) => {
            let config = ModelConfig {
                n_channels: 16,
                n_rbf: 8,
                enabled_heads: Head::ALL.to_vec(),
                ..ModelConfig::default()
            };
            Ok(Model::new(config, args.seed)?)
        }
        _ => Err(CliError::Usage("provide exactly one of --ckpt <file> or --random-init".into())),
    }
}

fn cmd_inspect(args: &InspectArgs) -> Result<bool, CliError> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    println!("version {}", ckpt.version);
    print!("{}", ckpt.config_text);
    println!("arrays {}", ckpt.arrays.len());
    for a in &ckpt.arrays {
        let dims = if a.dims.is_empty() {
            "scalar".to_string()
        } else {
            a.dims.iter().map(u64::to_string).collect::<Vec<_>>().join("x")
        };
        println!("array {} dtype={} dims={} numel={}", a.name, a.data.dtype_name(), dims, a.numel());
    }
    Ok(true)
}

fn cmd_bench(args: &BenchArgs) -> Result<bool, CliError> {
    if args.repeat == 0 {
        return Err(CliError::Usage("--repeat must be at least 1".into()));
    }
    let Restored { model, .. } = restore_model(&load_checkpoint(&args.ckpt)?)?;
    let dataset = parse_extxyz(&args.data)?;
    let n = dataset.systems.len();

    // Warmup so allocator effects do not dominate the first timing.
    for system in &dataset.systems {
        model.forces(system)?;
    }

    let time_per_system = |work: &dyn Fn(&Dataset) -> Result<(), ModelError>| {
        let start = Instant::now();
        for _ in 0..args.repeat {
            work(&dataset)?;
        }
        Ok::<Real, ModelError>(start.elapsed().as_secs_f64() * 1e3 / (args.repeat * n) as f64)
    };
    let forward = time_per_system(&|ds| {
        ds.systems.iter().try_for_each(|s| model.energy(s).map(|_| ()))
    })?;
    let forward_backward = time_per_system(&|ds| {
        ds.systems.iter().try_for_each(|s| model.forces(s).map(|_| ()))
    })?;

    println!("bench forward {forward:.3} ms/system over {n} systems x {} repeats", args.repeat);
    println!("bench forward_backward {forward_backward:.3} ms/system over {n} systems x {} repeats", args.repeat);
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::extxyz::write_extxyz;
    use std::path::Path;

    fn cli(args: &[&str]) -> u8 {
        let mut argv = vec!["tensornet".to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        run_cli(&argv)
    }

    fn write_morse_data(path: &Path, count: usize, seed: u64) {
        let systems = fixtures::morse_dataset(count, seed, Default::default());
        let dataset = Dataset {
            systems,
            energy_unit: String::new(),
            length_unit: String::new(),
            source: String::new(),
        };
        write_extxyz(path, &dataset).unwrap();
    }

    #[test]
    fn usage_errors_exit_2_and_help_exits_0() {
        assert_eq!(cli(&["frobnicate"]), 2);
        assert_eq!(cli(&["predict", "--bogus"]), 2);
        assert_eq!(cli(&[]), 2);
        assert_eq!(cli(&["check", "equivariance", "--seed", "1"]), 2);
        assert_eq!(cli(&["--help"]), 0);
    }

    #[test]
    fn appendix_check_passes_on_a_fresh_build() {
        assert_eq!(cli(&["check", "appendix", "--seed", "7"]), 0);
    }

    #[test]
    fn gradient_check_passes_with_random_init() {
        assert_eq!(cli(&["check", "gradients", "--random-init", "--seed", "3"]), 0);
    }

    #[test]
    fn check_suites_accept_a_species_limited_checkpoint() {
        // The probe fixture must stay inside the checkpoint's species table,
        // or checking (say) a hydrogen-only model becomes impossible.
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("h2.ckpt");
        let config = crate::model::ModelConfig {
            n_channels: 4,
            n_rbf: 6,
            n_interaction_layers: 1,
            max_atomic_number: 2,
            ..Default::default()
        };
        let model = Model::new(config, 9).unwrap();
        let built = crate::io::build_checkpoint(&model, &Default::default(), None, Vec::new());
        crate::io::save_checkpoint(&ckpt, &built).unwrap();
        assert_eq!(cli(&["check", "equivariance", "--ckpt", ckpt.to_str().unwrap()]), 0);
        assert_eq!(cli(&["check", "gradients", "--ckpt", ckpt.to_str().unwrap()]), 0);
    }

    #[test]
    fn train_then_predict_inspect_check_and_bench() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data.xyz");
        write_morse_data(&data, 8, 5);
        let config = dir.path().join("train.cfg");
        std::fs::write(
            &config,
            "model.n_channels = 4\nmodel.n_rbf = 6\nmodel.n_interaction_layers = 1\n\
             model.max_atomic_number = 10\nmodel.cutoff = 5.0\n\
             train.batch_size = 4\ntrain.max_epochs = 2\ntrain.warmup_steps = 2\n\
             train.val_fraction = 0.25\ntrain.loss.energy = 1\ntrain.loss.forces = 0.1\n",
        )
        .unwrap();
        let out = dir.path().join("run");
        let run = |extra: &[&str]| {
            let mut args = vec!["train", "--config"];
            args.push(config.to_str().unwrap());
            args.extend(["--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
            args.extend(extra);
            cli(&args)
        };
        assert_eq!(run(&[]), 0);

        let ckpt = out.join("model.ckpt");
        assert!(ckpt.exists() && out.join("best.ckpt").exists());
        let metrics = std::fs::read_to_string(out.join("metrics.txt")).unwrap();
        assert_eq!(metrics.lines().count(), 2);
        assert!(metrics.starts_with("epoch 0 step "), "{metrics}");

        assert_eq!(cli(&["inspect", "--ckpt", ckpt.to_str().unwrap()]), 0);

        let pred = dir.path().join("pred.txt");
        let predict = |heads: &str, out_file: &Path| {
            cli(&[
                "predict",
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--heads",
                heads,
                "--out",
                out_file.to_str().unwrap(),
            ])
        };
        assert_eq!(predict("e,f", &pred), 0);
        let text = std::fs::read_to_string(&pred).unwrap();
        assert!(text.starts_with("frame 0 energy "), "{text}");
        assert!(text.contains("\nforce 0 "), "{text}");
        assert_eq!(text.lines().filter(|l| l.starts_with("frame ")).count(), 8);

        // A head the checkpoint was not built with is a runtime failure;
        // a head token outside the vocabulary is a usage error.
        assert_eq!(predict("mu", &pred), 1);
        assert_eq!(predict("q", &pred), 2);

        assert_eq!(cli(&["check", "equivariance", "--ckpt", ckpt.to_str().unwrap()]), 0);
        assert_eq!(
            cli(&["bench", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--repeat", "1"]),
            0
        );
    }

    #[test]
    fn bad_configs_and_missing_files_split_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("bad.cfg");
        let data = dir.path().join("d.xyz");
        std::fs::write(&data, "1\nenergy=0\nH 0 0 0\n").unwrap();
        let out = dir.path().join("o");

        std::fs::write(&config, "model.n_chanels = 4\n").unwrap();
        let train_args = |cfg: &Path, dat: &Path| {
            cli(&[
                "train",
                "--config",
                cfg.to_str().unwrap(),
                "--data",
                dat.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
        };
        assert_eq!(train_args(&config, &data), 2);

        std::fs::write(&config, "model.n_channels = 4\nmodel.n_rbf = 6\n").unwrap();
        assert_eq!(train_args(&config, &dir.path().join("nope.xyz")), 1);
    }
}
