//! Command-line front end: train experiments from a TOML config, evaluate
//! checkpoints, solve tabular models exactly, and compare run summaries.
//! Log verbosity comes from `RUST_LOG` (error/warn/info/debug).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ocmdp::harness::{
    compare_runs, eval_checkpoint, load_config, read_summary_csv, render_comparison,
    run_experiment, write_comparison_csv,
};
use ocmdp::oracle::{brute_force_optimal, load_model, value_iteration, write_qtable_csv};

#[derive(Parser)]
#[command(name = "ocmdp", version, about = "Cost-aware sensing RL workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an experiment described by a TOML config, one run per seed.
    Train(TrainArgs),
    /// Greedy-evaluate a checkpoint directory.
    Eval(EvalArgs),
    /// Solve a tabular model exactly (value iteration or brute force).
    Oracle(OracleArgs),
    /// Compare two or more run summaries with one-sided Welch tests.
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Replace the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Seed directory holding the checkpoints (and config.toml nearby).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of greedy evaluation episodes.
    #[arg(long)]
    episodes: usize,
}

#[derive(Args)]
struct OracleArgs {
    /// Tabular model file (TOML).
    #[arg(long)]
    model: PathBuf,
    /// Run the exhaustive finite-horizon search instead of value iteration.
    #[arg(long)]
    brute_force: bool,
    /// Horizon for the brute-force search.
    #[arg(long)]
    horizon: Option<usize>,
    /// Value-iteration tolerance.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Where to write the Q table CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// summary.csv paths (each next to its config.toml).
    #[arg(required = true, num_args = 2..)]
    summaries: Vec<PathBuf>,
    /// Optional CSV output for the pairwise tests.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(clean) if clean => ExitCode::SUCCESS,
        Ok(_) => {
            eprintln!("one or more runs failed; see the summary");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> ocmdp::Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let mut config = load_config(&args.config)?;
            if let Some(seed) = args.seed_override {
                config.seeds = vec![seed];
            }
            if let Some(out) = args.out {
                config.output_dir = out;
            }
            let summary = run_experiment(&config)?;
            Ok(!summary.any_failed())
        }
        Command::Eval(args) => {
            let stats = eval_checkpoint(&args.checkpoint, args.episodes)?;
            println!(
                "episodes {}  mean utility {:.6}  mean reward {:.6}  mean obs cost {:.6}  mean length {:.3}",
                stats.episodes,
                stats.mean_utility,
                stats.mean_reward,
                stats.mean_obs_cost,
                stats.mean_episode_len
            );
            Ok(true)
        }
        Command::Oracle(args) => {
            let loaded = load_model(&args.model)?;
            if args.brute_force {
                let horizon = args.horizon.ok_or_else(|| {
                    ocmdp::Error::Config("--brute-force needs --horizon".into())
                })?;
                let init = loaded.init.ok_or_else(|| {
                    ocmdp::Error::Config(
                        "brute force needs an init distribution in the model file".into(),
                    )
                })?;
                let bf = brute_force_optimal(&loaded.model, horizon, &init)?;
                println!("optimal expected utility: {:.17e}", bf.value);
                if let Some(tree) = bf.tree {
                    println!("policy tree nodes: {}", tree.node_count());
                }
            } else {
                let vi = value_iteration(&loaded.model, args.tol, 10_000_000)?;
                eprintln!("converged in {} iterations", vi.iters);
                match args.out {
                    Some(path) => {
                        let file = std::fs::File::create(&path)
                            .map_err(|e| ocmdp::Error::file(path.clone(), e))?;
                        write_qtable_csv(file, &vi.q)?;
                    }
                    None => write_qtable_csv(std::io::stdout().lock(), &vi.q)?,
                }
            }
            Ok(true)
        }
        Command::Compare(args) => {
            let summaries = args
                .summaries
                .iter()
                .map(|p| read_summary_csv(p))
                .collect::<ocmdp::Result<Vec<_>>>()?;
            let cmp = compare_runs(&summaries)?;
            print!("{}", render_comparison(&cmp));
            if let Some(out) = args.out {
                write_comparison_csv(&out, &cmp)?;
            }
            Ok(true)
        }
    }
}
