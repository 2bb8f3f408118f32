use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zopro::cli;
use zopro::optim::Method;
use zopro::Error;

#[derive(Parser)]
#[command(name = "zopro", version, about = "Zeroth-order preference optimisation on a toy environment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimise/collect/refine loop and persist a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Compute trajectory analytics for a run directory.
    Analyze {
        /// Run directory written by `train`.
        #[arg(long = "config", visible_alias = "run")]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep eta x epsilon, one sub-run per pair.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "1e-3,1e-4,1e-5")]
        eta_list: String,
        #[arg(long, default_value = "1e-3,1e-4,1e-5")]
        epsilon_list: String,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Run several methods from the same starting point.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "zopro,spsa,first_order")]
        methods: String,
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => ExitCode::from(2),
        _ => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let result = match args.command {
        Command::Train { config, out, seed_override } => cli::cmd_train(&config, &out, seed_override).map(|o| {
            match &o.error {
                None => println!("completed {} iterations in {}", o.manifest.iterations_completed, o.dir.display()),
                Some(e) => eprintln!(
                    "run aborted after {} iterations: {e} (partial artifacts in {})",
                    o.manifest.iterations_completed,
                    o.dir.display()
                ),
            }
            o.succeeded()
        }),
        Command::Analyze { run, out } => cli::cmd_analyze(&run, &out).map(|r| {
            let flags: Vec<&str> = r.flags.iter().map(|f| f.label()).collect();
            println!("analysed {} checkpoints; flags: [{}]", r.tags.len(), flags.join(", "));
            true
        }),
        Command::Grid { config, out, eta_list, epsilon_list, seed_override } => cli::parse_list(&eta_list)
            .and_then(|etas| Ok((etas, cli::parse_list(&epsilon_list)?)))
            .and_then(|(etas, eps)| cli::cmd_grid(&config, &etas, &eps, &out, seed_override))
            .map(|rows| {
                for r in &rows {
                    println!("eta {:e} epsilon {:e}: delta {:+.4} collapsed {}", r.eta, r.epsilon, r.final_reward_delta, r.collapsed_flag);
                }
                true
            }),
        Command::Compare { config, out, methods, seed_override } => cli::parse_list::<Method>(&methods)
            .and_then(|m| cli::cmd_compare(&config, &m, &out, seed_override))
            .map(|cmp| {
                for t in &cmp.traces {
                    let reach = cmp.threshold.and_then(|th| t.evaluations_to(th));
                    println!(
                        "{}: {:.4} -> {:.4}, evaluations to threshold: {}",
                        t.method.name(),
                        t.initial_mean_reward,
                        t.final_mean_reward(),
                        reach.map_or("not reached".to_string(), |n| n.to_string())
                    );
                }
                true
            }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => fail(&e),
    }
}
