use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use sevloss::Weighting;
use sevloss_cli::{
    cmd_eval, cmd_generate, cmd_gradcheck, cmd_stats, cmd_synth, cmd_train, cmd_validate_data,
    Overrides,
};

/// Severity-weighted fine-tuning of small character-level language models.
#[derive(Parser)]
#[command(name = "sevloss", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_weighting(s: &str) -> Result<Weighting, String> {
    Weighting::from_str(s).map_err(|e| e.to_string())
}

fn parse_sizes(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected three comma-separated counts, got {s:?}"));
    };
    let p = |x: &str| x.parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok([p(a)?, p(b)?, p(c)?])
}

#[derive(Subcommand)]
enum Command {
    /// Check every line of a JSONL record file.
    ValidateData { path: PathBuf },
    /// Print class counts, mean distribution and weight range.
    Stats {
        path: PathBuf,
        /// mild | strong | balanced | uniform-ce | alpha,beta,gamma
        #[arg(long, default_value = "balanced", value_parser = parse_weighting)]
        weights: Weighting,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic corpus.
    Synth {
        /// Class sizes non-critical,neutral,critical
        #[arg(long, default_value = "46,30,24", value_parser = parse_sizes)]
        sizes: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a TOML config; flags override the file.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// mild | strong | balanced | uniform-ce | alpha,beta,gamma
        #[arg(long, value_parser = |s: &str| parse_weighting(s).map(|_| s.to_string()))]
        weights: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        eval_every: Option<usize>,
        /// Training records; replaces any data source in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Unweighted metrics overall and per severity class.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of every parameter gradient on the reference model.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "balanced", value_parser = parse_weighting)]
        weights: Weighting,
    },
    /// Greedy completion of a prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::ValidateData { path } => cmd_validate_data(&path, &mut out),
        Command::Stats {
            path,
            weights,
            json,
        } => cmd_stats(&path, &weights, json, &mut out).map(|_| true),
        Command::Synth { sizes, seed, out: path } => cmd_synth(sizes, seed, &path, &mut out).map(|_| true),
        Command::Train {
            config,
            seed,
            weights,
            steps,
            batch_size,
            lr,
            eval_every,
            data,
            valid,
            checkpoint,
            history,
        } => {
            let o = Overrides {
                seed,
                weights,
                steps,
                batch_size,
                learning_rate: lr,
                eval_every,
                train: data,
                valid,
                checkpoint,
                history,
            };
            cmd_train(&config, &o).map(|_| true)
        }
        Command::Eval {
            checkpoint,
            data,
            json,
        } => cmd_eval(&checkpoint, &data, json, &mut out).map(|_| true),
        Command::Gradcheck {
            trials,
            tol,
            seed,
            weights,
        } => cmd_gradcheck(trials, tol, seed, &weights, &mut out),
        Command::Generate {
            checkpoint,
            prompt,
            max_new,
        } => cmd_generate(&checkpoint, &prompt, max_new, &mut out).map(|_| true),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
