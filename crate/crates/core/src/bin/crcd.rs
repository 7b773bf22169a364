use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crcd::config::RunConfig;
use crcd::mi::{fit_and_bound, MiCriticConfig, SyntheticJointSpec};
use crcd::report::{collect_runs, emit_report, render_mi_table, Format, MI_REPORT_FILE};
use crcd::runner::{self, EvalTarget, TEACHER_FILE};
use crcd::{CrcdError, Result};

#[derive(Parser)]
#[command(name = "crcd", version, about = "Relation contrastive distillation runs, evaluation and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// `key=value`, dotted path or unique bare key; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replaces the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutFormat::Json)]
    format: OutFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Csv => Format::Csv,
            OutFormat::Json => Format::Json,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured teacher with cross-entropy.
    TrainTeacher {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Distill the configured student from a trained teacher.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score the teacher or a run's student on the test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = Target::Student)]
        target: Target,
    },
    /// Fit a critic on a synthetic joint and compare its bound with the true MI.
    MiOracle {
        /// `gaussian:RHO[:DIM]` or `discrete:p00,p01;p10,p11`.
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 64)]
        negatives: usize,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OutFormat::Json)]
        format: OutFormat,
    },
    /// Aggregate finished runs into a table and sweep plots.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
        format: OutFormat,
        /// Dotted config path to plot against; repeatable.
        #[arg(long = "axis", default_values_t = ["distill.negatives".to_string(), "distill.tau".to_string()])]
        axes: Vec<String>,
        /// Where to write table and plot files; stdout only when absent.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs) -> Result<(RunConfig, Vec<String>)> {
    let mut overrides = args.overrides.clone();
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::load(&args.config, &overrides)?;
    Ok((cfg, overrides))
}

fn print_record(format: OutFormat, fields: &[(&str, serde_json::Value)]) {
    match format {
        OutFormat::Json => {
            let map: serde_json::Map<String, serde_json::Value> =
                fields.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
            println!("{}", serde_json::Value::Object(map));
        }
        OutFormat::Csv => {
            let head: Vec<&str> = fields.iter().map(|f| f.0).collect();
            let row: Vec<String> = fields
                .iter()
                .map(|(_, v)| match v {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Number(n) => n
                        .as_f64()
                        .filter(|_| n.is_f64())
                        .map(crcd::report::sig4)
                        .unwrap_or_else(|| n.to_string()),
                    other => other.to_string(),
                })
                .collect();
            println!("{}\n{}", head.join(","), row.join(","));
        }
    }
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<()> {
    runner::write_atomic(&dir.join(name), text.as_bytes())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::TrainTeacher { run } => {
            let (cfg, _) = load_config(&run)?;
            let path = match &run.out_dir {
                Some(d) => d.join(TEACHER_FILE),
                None => cfg.teacher_checkpoint(),
            };
            let ckpt = runner::run_teacher(&cfg, &path, &mut |e| {
                eprintln!("teacher epoch {:>3}  lr {:.4}  loss {:.4}  top1 {:.2}", e.epoch, e.lr, e.mean_loss, e.test.top1);
            })?;
            print_record(
                run.format,
                &[
                    ("model", ckpt.spec.name.clone().into()),
                    ("epochs", ckpt.epochs.into()),
                    ("top1", ckpt.test.top1.into()),
                    ("checkpoint", path.display().to_string().into()),
                ],
            );
        }
        Command::Distill { run, resume } => {
            let (cfg, overrides) = load_config(&run)?;
            let out = run.out_dir.clone().unwrap_or_else(|| runner::default_run_dir(&cfg));
            let result = runner::run_distill(&cfg, &out, &overrides, resume, &mut |r| {
                eprintln!(
                    "epoch {:>3}  lr {:.4}  loss {:.4}  skipped {}  top1 {:.2}",
                    r.stats.epoch, r.stats.lr, r.stats.mean_loss.total, r.stats.skipped_steps, r.test.top1
                );
            })?;
            print_record(
                run.format,
                &[
                    ("run_id", result.run_id.clone().into()),
                    ("method", result.method.clone().into()),
                    ("teacher", result.teacher.clone().into()),
                    ("student", result.student.clone().into()),
                    ("final_top1", result.final_top1.into()),
                    ("best_top1", result.best_top1.into()),
                    ("out_dir", out.display().to_string().into()),
                ],
            );
        }
        Command::Eval { run, target } => {
            let (cfg, _) = load_config(&run)?;
            let dir = run.out_dir.clone().unwrap_or_else(|| runner::default_run_dir(&cfg));
            let t = match target {
                Target::Teacher => EvalTarget::Teacher,
                Target::Student => EvalTarget::Student,
            };
            let acc = runner::evaluate_run(&cfg, &dir, t)?;
            print_record(
                run.format,
                &[
                    ("top1", acc.top1.into()),
                    ("top5", acc.top5.map(Into::into).unwrap_or(serde_json::Value::Null)),
                    ("samples", acc.samples.into()),
                ],
            );
        }
        Command::MiOracle { spec, negatives, steps, seed, out_dir, format } => {
            let mut spec: SyntheticJointSpec = spec.parse()?;
            spec.seed = seed;
            let report = fit_and_bound(&spec, &MiCriticConfig::default(), negatives, steps)?;
            if let Some(d) = &out_dir {
                write_out(d, MI_REPORT_FILE, &serde_json::to_string_pretty(&report)?)?;
            }
            print!("{}", render_mi_table(std::slice::from_ref(&report), format.into()));
            if !report.sound {
                eprintln!("bound exceeded the true MI beyond sampling tolerance");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { runs, format, axes, out_dir } => {
            let (results, mi) = collect_runs(&runs)?;
            let report = emit_report(&results, &mi, &axes, format.into())?;
            print!("{}", report.table);
            if let Some(d) = &out_dir {
                for (name, text) in &report.files {
                    write_out(d, name, text)?;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CrcdError::Usage(_) | CrcdError::Schema { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
