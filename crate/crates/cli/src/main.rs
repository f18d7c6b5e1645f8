use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use selfres::sampler::ScoreMode;
use selfres_cli::checks;
use selfres_cli::commands::{cmd_bench, cmd_dump_weights, cmd_eval, cmd_gen, cmd_run};
use selfres_cli::config::{SamplerKind, ScheduleFlag};
use selfres_cli::{exit_code, resolve_config, Overrides, EXIT_BAD_CONFIG, EXIT_FAILURE};

#[derive(Parser)]
#[command(name = "selfres", version, about = "Self-reflective visual token sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment config; keys override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset seed for `gen`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// table1-grid or smoke.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    schedule: Option<ScheduleArg>,
    /// First sampling layer.
    #[arg(long, global = true)]
    r: Option<usize>,
    /// Segment count.
    #[arg(long, global = true)]
    ns: Option<usize>,
    /// Steps of a smooth schedule.
    #[arg(long, global = true)]
    m: Option<usize>,
    #[arg(long, global = true, value_enum)]
    score: Option<ScoreArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted events.
    Gen,
    /// Run one sampler over a dataset.
    Run {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Score a predictions CSV.
    Eval { predictions: PathBuf },
    /// Compare every method of the config grid.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Write every weight matrix as a tensor file.
    DumpWeights,
    /// Run the acceptance checks.
    Selftest {
        /// Videos in the directional benchmark.
        #[arg(long, default_value_t = 200)]
        videos: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Linear,
    Selfres,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Regular,
    Smooth,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    Attention,
    Cosine,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_BAD_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn run(cli: Cli) -> selfres::Result<i32> {
    let flags = Overrides {
        seed: cli.seed,
        mode: cli.mode.map(|m| match m {
            ModeArg::Linear => SamplerKind::Linear,
            ModeArg::Selfres => SamplerKind::Selfres,
        }),
        schedule: cli.schedule.map(|s| match s {
            ScheduleArg::Regular => ScheduleFlag::Regular,
            ScheduleArg::Smooth => ScheduleFlag::Smooth,
        }),
        r: cli.r,
        ns: cli.ns,
        m: cli.m,
        score: cli.score.map(|s| match s {
            ScoreArg::Attention => ScoreMode::Attention,
            ScoreArg::Cosine => ScoreMode::Cosine,
        }),
    };
    let cfg = resolve_config(cli.preset.as_deref(), cli.config.as_deref(), &flags)?;
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::Gen => {
            let dir = out("data");
            let entries = cmd_gen(&cfg, &dir)?;
            println!("wrote {} videos and {}", entries.len(), dir.join("manifest.txt").display());
        }
        Command::Run { dataset } => {
            let dir = out("run");
            let summary = cmd_run(&cfg, &dataset, &dir)?;
            println!(
                "{}: {} videos; predictions in {}",
                cfg.method(),
                summary.records.len(),
                dir.join("predictions.csv").display()
            );
        }
        Command::Eval { predictions } => {
            let dir = cli.out.clone().unwrap_or_else(|| {
                predictions.parent().map(PathBuf::from).unwrap_or_default()
            });
            let summary = cmd_eval(&predictions, &cfg.class_set()?, &dir)?;
            print!("{}", summary.report);
        }
        Command::Bench { dataset } => {
            let summary = cmd_bench(&cfg, &dataset, &out("bench"))?;
            print!("{}", summary.table);
        }
        Command::DumpWeights => {
            let dir = out("weights");
            let paths = cmd_dump_weights(&cfg, &dir)?;
            println!("wrote {} tensors to {}", paths.len(), dir.display());
        }
        Command::Selftest { videos } => {
            let dir = out("selftest");
            std::fs::create_dir_all(&dir).map_err(|e| selfres::Error::io(&dir, e))?;
            let outcomes = checks::run_all(&dir, videos);
            for o in &outcomes {
                println!("{o}");
            }
            if outcomes.iter().any(|o| !o.passed) {
                return Ok(EXIT_FAILURE);
            }
        }
    }
    Ok(0)
}
