use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use datagen::io::manifest_hash;
use datagen::{build_splits, PerturbationConfig, SplitKind};
use harness::ablate::ablate_with;
use harness::gradcheck::run_suite;
use harness::train::train_with;
use harness::{evaluate_splits, precondition, robustness_eval, Axis, Checkpoint, HarnessError, Result, TrainConfig};

#[derive(Parser)]
#[command(
    name = "fatformer",
    version,
    about = "Synthetic forgery detection: data, training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        train: usize,
        #[arg(long, default_value_t = 64)]
        val: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write its checkpoint; the report goes to stdout.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML file with TrainConfig fields; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Field override, e.g. `loss_mode=linear_probe`. Repeatable.
        #[arg(long = "ablation", value_name = "KEY=VALUE")]
        ablation: Vec<String>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "in", value_parser = ["in", "cross", "val"])]
        split: String,
    },
    /// Train one model per setting of an ablation axis.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under each perturbation and their combination.
    Robust {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Check the default model instead of a small one.
        #[arg(long)]
        full: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            train,
            val,
            test,
            seed,
        } => {
            let bundle = build_splits(train, val, test, seed)?;
            let sep = precondition::require(&bundle)?;
            datagen::io::save(&bundle, &out)?;
            eprintln!(
                "oracle: threshold {:.5}, test_in {:.4}, test_cross {:.4}",
                sep.threshold, sep.test_in, sep.test_cross
            );
            println!("{}", manifest_hash(&bundle));
        }
        Command::Train {
            data,
            config,
            out,
            ablation,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            for kv in &ablation {
                cfg.apply_override(kv)?;
            }
            cfg.validate()?;
            let bundle = datagen::io::load(&data)?;
            precondition::require(&bundle)?;
            let outcome = train_with(&cfg, &bundle, |e, h| {
                eprintln!(
                    "epoch {:>3}  loss {:.5}  val acc {:.4}",
                    e + 1,
                    h.loss_curve[e],
                    h.val_acc[e]
                );
            })?;
            outcome.checkpoint.save(&out)?;
            println!("{}", outcome.report.to_json());
        }
        Command::Eval { ckpt, data, split } => {
            let kind = SplitKind::parse(&split)?;
            let ck = Checkpoint::load(&ckpt)?;
            let bundle = datagen::io::load(&data)?;
            let report = evaluate_splits(&ck, &[bundle.split(kind)], &manifest_hash(&bundle))?;
            println!("{}", report.to_json());
        }
        Command::Ablate {
            data,
            axis,
            out,
            config,
        } => {
            let axis = Axis::parse(&axis)?;
            let base = load_config(config.as_deref())?;
            let bundle = datagen::io::load(&data)?;
            precondition::require(&bundle)?;
            let table = ablate_with(&base, axis, &bundle, |_, r| {
                eprintln!("{}: ACC_M {:.4}  AP_M {:.4}", r.setting, r.report.acc_m, r.report.ap_m);
            })?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join(format!("{}.json", axis.name())), table.to_json())?;
            std::fs::write(out.join(format!("{}.txt", axis.name())), table.render())?;
            print!("{}", table.render());
        }
        Command::Robust { ckpt, data } => {
            let ck = Checkpoint::load(&ckpt)?;
            let bundle = datagen::io::load(&data)?;
            let report = robustness_eval(&ck, &bundle, &PerturbationConfig::default())?;
            println!("{}", report.to_json());
        }
        Command::Gradcheck { full } => {
            let summary = run_suite(full)?;
            for l in &summary.lines {
                eprintln!(
                    "{:<14} {} tensors {:>5} coords ({} shortened)  max rel err {:.2e}  {}",
                    l.name,
                    l.tensors,
                    l.coords,
                    l.reduced_steps,
                    l.max_rel_error,
                    if l.passed { "ok" } else { "FAIL" }
                );
            }
            println!("{}", summary.to_json());
            if !summary.passed() {
                return Err(HarnessError::GradCheck(format!(
                    "max relative error {:.3e} exceeds {:.0e}",
                    summary.max_rel_error(),
                    summary.tol
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
