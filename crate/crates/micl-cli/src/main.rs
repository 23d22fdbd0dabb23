//! Experiment harness: config-driven subcommands over the micl core, with
//! reproducible run directories, manifests, and CSV/JSON table emission.

mod cmds;
mod manifest;
mod tables;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "micl", version, about = "In-context learning laboratory for finite Markov-chain ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a task set and training/out-of-distribution sequence batches.
    GenData(cmds::GenDataArgs),
    /// Autoregressive losses of the four Bayes predictors over K and N grids.
    EvalPredictors(cmds::EvalPredictorsArgs),
    /// Train the two-layer transformer.
    Train(cmds::TrainArgs),
    /// Train the symmetry-constrained attention-only model.
    TrainSa(cmds::TrainSaArgs),
    /// Behavioral and mechanistic readouts over a training run's checkpoints.
    Readouts(cmds::ReadoutsArgs),
    /// Mean-ablation edge importance tracing.
    Trace(cmds::TraceArgs),
    /// Task-vector activation patching.
    Patch(cmds::PatchArgs),
    /// (beta, delta) loss-landscape scan with inner weight optimization.
    Landscape(cmds::LandscapeArgs),
    /// Transition-time scaling of the SA model across sequence lengths.
    Scaling(cmds::ScalingArgs),
    /// Ensemble statistics and escape-dynamics theory quantities.
    Theory(cmds::TheoryArgs),
    /// Train the minimal encoder-pool-decoder memorization network.
    MinimalMem(cmds::MinimalMemArgs),
    /// Binary search for the kinetic memorization-generalization boundary.
    K1Search(cmds::K1SearchArgs),
    /// Binary search for the capacity boundary of the minimal network.
    K2Search(cmds::K2SearchArgs),
    /// Merge metric logs across runs with bootstrap confidence intervals.
    Report(cmds::ReportArgs),
    /// Verify a run directory against its manifest.
    SelfCheck(cmds::SelfCheckArgs),
}

fn main() {
    // MICL_THREADS caps the worker pool; single-threaded runs are the
    // byte-reproducibility reference.
    if let Ok(threads) = std::env::var("MICL_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().ok();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmds::gen_data(a),
        Command::EvalPredictors(a) => cmds::eval_predictors(a),
        Command::Train(a) => cmds::train(a),
        Command::TrainSa(a) => cmds::train_sa(a),
        Command::Readouts(a) => cmds::readouts(a),
        Command::Trace(a) => cmds::trace(a),
        Command::Patch(a) => cmds::patch(a),
        Command::Landscape(a) => cmds::landscape(a),
        Command::Scaling(a) => cmds::scaling(a),
        Command::Theory(a) => cmds::theory(a),
        Command::MinimalMem(a) => cmds::minimal_mem(a),
        Command::K1Search(a) => cmds::k1_search(a),
        Command::K2Search(a) => cmds::k2_search(a),
        Command::Report(a) => cmds::report(a),
        Command::SelfCheck(a) => cmds::self_check(a),
    };
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            let code = match &err {
                micl_core::Error::Numeric(_) => 3,
                _ => 2,
            };
            std::process::exit(code);
        }
    }
}
