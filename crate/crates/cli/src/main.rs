use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clkd_cli::config::{self, Overrides};
use clkd_cli::runner::{self, Experiment};
use clkd_cli::{CliResult, Failure};
use clkd_core::checkpoint;
use clkd_core::gradcheck::{self, GradCheckSpec};
use clkd_core::models::ModelSpec;

/// Experiment runner for the class-aware logit distillation laboratory.
#[derive(Parser)]
#[command(name = "clkd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Override the output directory from the config file.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Override the seed list, e.g. "1,2,3".
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Worker threads for independent (variant, seed) runs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train or load the teacher, then distill the student per seed.
    Run { config: PathBuf },
    /// Run the five-variant ablation with a shared teacher and paired seeds.
    Ablation { config: PathBuf },
    /// Substitute one parameter over a value list, one run per value per seed.
    Sweep {
        config: PathBuf,
        /// Dotted parameter path, e.g. distill.beta or run.batch_size.
        #[arg(long)]
        param: String,
        /// Comma-separated values to substitute.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
    },
    /// Compare every registered loss against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write one tap's test-set activations to CSV.
    ExportEmbeddings {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which model section describes the checkpoint.
        #[arg(long, default_value = "student")]
        model: String,
        #[arg(long, default_value = "penultimate")]
        tap: String,
    },
    /// Train a linear classifier on a frozen model's tap features.
    LinearProbe {
        config: PathBuf,
        /// Checkpoint to probe; without it the configured student is
        /// distilled first (first seed).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "student")]
        model: String,
        #[arg(long, default_value = "penultimate")]
        tap: String,
    },
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 6)]
    dim: usize,
    /// Seeds for the random inputs.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code.clamp(0, 255) as u8)
        }
    }
}

fn load_with_overrides(path: &Path, overrides: &Overrides) -> CliResult<config::LoadedConfig> {
    let loaded = config::load(path)?;
    let mut raw = loaded.raw;
    config::apply_overrides(&mut raw, overrides)?;
    config::from_value(raw)
}

fn dispatch(cli: Cli) -> CliResult<ExitCode> {
    let overrides = Overrides {
        out_dir: cli.out_dir.clone(),
        seeds: cli.seeds.clone(),
    };
    match cli.command {
        Command::Run { config } => {
            let loaded = load_with_overrides(&config, &overrides)?;
            let exp = Experiment::build(&loaded)?;
            let report = runner::run(&exp, cli.threads)?;
            print_summaries(&report);
            println!("report: {}", exp.out_dir.join("report.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablation { config } => {
            let loaded = load_with_overrides(&config, &overrides)?;
            let exp = Experiment::build(&loaded)?;
            let report = runner::ablation(&exp, cli.threads)?;
            print_summaries(&report);
            println!("report: {}", exp.out_dir.join("report.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            param,
            values,
        } => {
            let loaded = load_with_overrides(&config, &overrides)?;
            let report = runner::sweep(&loaded, &param, &values, cli.threads)?;
            print_summaries(&report);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck(args) => {
            let spec = GradCheckSpec {
                batch: args.batch,
                classes: args.classes,
                feature_dim: args.dim,
                seeds: args.seeds,
                epsilon: args.epsilon,
            };
            let rows = gradcheck::run(&spec)?;
            let mut all_pass = true;
            println!("{:<16} {:>14} {:>14}  status", "loss", "max_rel_err", "teacher_grad");
            for row in &rows {
                println!(
                    "{:<16} {:>14.3e} {:>14.3e}  {}",
                    row.loss,
                    row.max_rel_err,
                    row.teacher_grad_norm,
                    if row.pass { "pass" } else { "FAIL" }
                );
                all_pass &= row.pass;
            }
            Ok(if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::ExportEmbeddings {
            config,
            checkpoint: ckpt,
            out,
            model,
            tap,
        } => {
            let loaded = load_with_overrides(&config, &overrides)?;
            let exp = Experiment::build(&loaded)?;
            let spec = select_model(&exp, &model)?;
            let params = checkpoint::load(&ckpt)?;
            runner::export_embeddings(&exp, &spec, &params, &tap, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::LinearProbe {
            config,
            checkpoint: ckpt,
            model,
            tap,
        } => {
            let loaded = load_with_overrides(&config, &overrides)?;
            let exp = Experiment::build(&loaded)?;
            let spec = select_model(&exp, &model)?;
            let params = match ckpt {
                Some(path) => checkpoint::load(&path)?,
                None => {
                    let teacher = exp.prepare_teacher()?;
                    let seed = exp.cfg.run.seeds[0];
                    let run = exp_student_run(&exp, seed);
                    let distill = clkd_core::trainer::DistillSpec {
                        teacher_spec: &exp.teacher_spec,
                        teacher: &teacher,
                        weights: &exp.weights,
                        feature: exp.feature.as_ref(),
                    };
                    clkd_core::trainer::distill_student(&run, &distill)?.0
                }
            };
            let accuracy = runner::linear_probe(&exp, &spec, &params, &tap)?;
            println!("probe accuracy: {accuracy}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn select_model(exp: &Experiment, which: &str) -> CliResult<ModelSpec> {
    match which {
        "student" => Ok(exp.student_spec.clone()),
        "teacher" => Ok(exp.teacher_spec.clone()),
        other => Err(Failure {
            code: 2,
            message: format!("unknown model {other:?}, expected student or teacher"),
        }),
    }
}

// The probe path needs a student TrainRun outside the runner module.
fn exp_student_run<'a>(exp: &'a Experiment, seed: u64) -> clkd_core::trainer::TrainRun<'a> {
    clkd_core::trainer::TrainRun {
        model_spec: &exp.student_spec,
        train: &exp.train,
        test: &exp.test,
        optim: exp.student_optim(),
        schedule: exp.student_schedule(),
        epochs: exp.cfg.student.epochs,
        batch_size: exp.cfg.run.batch_size,
        seed,
        topk: exp.cfg.run.topk,
        augment: config::augment_flags(&exp.cfg.run.augment),
        record_timing: false,
    }
}

fn print_summaries(report: &clkd_cli::report::RunReport) {
    for run_id in report.run_ids() {
        if let Some(median) = report.median_best_top1(&run_id) {
            println!("{run_id}: median best top-1 {median:.4}");
        }
    }
}
