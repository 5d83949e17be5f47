use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use partialmine_cli::{ablate, eval, generate, gradcheck, seed_override, train, CliError};

/// Joint training on partially labeled multi-domain data.
#[derive(Debug, Parser)]
#[command(name = "partialmine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic benchmark directory.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a benchmark directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one CSV with a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Manifest with the domain registry; defaults to the one beside the data.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run an ablation plan.
    Ablate {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of the composite objective's gradient.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

fn run(cmd: Command) -> Result<(), CliError> {
    let seed = seed_override()?;
    match cmd {
        Command::Generate { config, out } => {
            let m = generate(&config, &out, seed)?;
            println!("wrote {} files to {}", m.files.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let s = train(&config, &data, &out, seed)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        }
        Command::Eval { model, data, report, manifest } => {
            let r = eval(&model, &data, &report, manifest.as_deref())?;
            println!("mean AUC {}", r.mean.map_or("n/a".into(), |m| format!("{m:.4}")));
        }
        Command::Ablate { plan, out, jobs } => {
            let r = ablate(&plan, out.as_deref(), jobs, seed)?;
            let failed = r.runs.iter().filter(|x| x.result.is_err()).count();
            println!("{} runs, {failed} failed", r.runs.len());
        }
        Command::Gradcheck { seed: s, eps } => {
            let r = gradcheck(s.or(seed).unwrap_or(0), eps)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
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
