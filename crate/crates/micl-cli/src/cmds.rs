//! Subcommand implementations. Every command reads an optional TOML config,
//! lets explicit flags override file values, echoes the merged config into
//! the run manifest, and registers each emitted file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use micl_core::markov::{build_task_set, sample_ood_batch, sample_training_batch};
use micl_core::sa::{self, SaTrainConfig, SaVariant};
use micl_core::transformer::{
    self, LossMode, Optimizer, Positional, TrainConfig, TransformerConfig, TransformerParams,
};
use micl_core::{Error, Result};

use crate::manifest::{self, Run};
use crate::tables::{f, write_json, Csv};

fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let raw = std::fs::read_to_string(p)?;
            toml::from_str(&raw).map_err(|e| Error::parameter(format!("config: {e}")))
        }
    }
}

macro_rules! merge {
    ($cfg:expr, $args:expr, $($field:ident),* $(,)?) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

fn start_run<C: Serialize>(name: &str, cfg: &C, seed: u64, out: &Option<PathBuf>) -> Result<Run> {
    let value = serde_json::to_value(cfg).map_err(Error::from)?;
    Run::create(name, value, seed, out.as_deref()).map_err(Error::from)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also sample an out-of-distribution batch of the same size.
    #[arg(long)]
    ood: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    c: usize,
    alpha: f64,
    k: usize,
    n: usize,
    batch: usize,
    seed: u64,
    ood: bool,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig { c: 10, alpha: 1.0, k: 8, n: 256, batch: 128, seed: 0, ood: false }
    }
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg: GenDataConfig = load_config(&args.config)?;
    merge!(cfg, args, c, alpha, k, n, batch, seed);
    cfg.ood |= args.ood;
    let mut run = start_run("gen-data", &cfg, cfg.seed, &args.out_dir)?;
    let tasks = build_task_set(cfg.seed, cfg.k, cfg.c, cfg.alpha)?;
    // Task sets serialize as their generating manifest; matrices regenerate.
    let task_manifest = serde_json::json!({
        "seed": cfg.seed, "k": cfg.k, "c": cfg.c, "alpha": cfg.alpha,
    });
    let path = run.output("tables/task_set.json");
    std::fs::write(path, serde_json::to_vec_pretty(&task_manifest).map_err(Error::from)?)?;
    let seqs = sample_training_batch(&tasks, cfg.n, cfg.batch, cfg.seed, 0)?;
    let bin = run.output("tables/train_batch.bin");
    let side = run.output("tables/train_batch.json");
    micl_core::io::write_sequence_batch(&bin, &side, &seqs, cfg.c, cfg.seed)?;
    if cfg.ood {
        let seqs: Vec<_> = sample_ood_batch(cfg.c, cfg.alpha, cfg.n, cfg.batch, cfg.seed, 1)?
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        let bin = run.output("tables/ood_batch.bin");
        let side = run.output("tables/ood_batch.json");
        micl_core::io::write_sequence_batch(&bin, &side, &seqs, cfg.c, cfg.seed)?;
    }
    let dir = run.finish()?;
    println!("wrote {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-predictors
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvalPredictorsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Single K evaluated at --n (short form of a one-point grid).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct EvalPredictorsConfig {
    c: usize,
    alpha: f64,
    k: usize,
    n: usize,
    k_grid: Vec<usize>,
    n_grid: Vec<usize>,
    trials: usize,
    seed: u64,
}

impl Default for EvalPredictorsConfig {
    fn default() -> Self {
        EvalPredictorsConfig {
            c: 10,
            alpha: 1.0,
            k: 8,
            n: 256,
            k_grid: vec![],
            n_grid: vec![],
            trials: 500,
            seed: 0,
        }
    }
}

pub fn eval_predictors(args: EvalPredictorsArgs) -> Result<()> {
    let mut cfg: EvalPredictorsConfig = load_config(&args.config)?;
    merge!(cfg, args, c, alpha, k, n, k_grid, n_grid, trials, seed);
    if cfg.k_grid.is_empty() {
        cfg.k_grid = vec![cfg.k];
    }
    let mut run = start_run("eval-predictors", &cfg, cfg.seed, &args.out_dir)?;
    let rows = micl_core::bayes::predictor_loss_scan(
        cfg.c,
        cfg.alpha,
        &cfg.k_grid,
        &cfg.n_grid,
        cfg.n,
        cfg.k,
        cfg.trials,
        cfg.seed,
    )?;
    let mut csv = Csv::new(&["predictor", "k", "n", "loss_mean", "loss_sem", "trials", "seed"]);
    for r in &rows {
        csv.row(&[
            r.predictor.to_string(),
            r.k.to_string(),
            r.n.to_string(),
            f(r.loss_mean),
            f(r.loss_sem),
            r.trials.to_string(),
            r.seed.to_string(),
        ]);
    }
    csv.write(&run.output("tables/predictor_losses.csv"))?;
    for r in &rows {
        println!("{}  K={} N={}  {:.4} +- {:.4}", r.predictor, r.k, r.n, r.loss_mean, r.loss_sem);
    }
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train (transformer)
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task_seed: Option<u64>,
    #[arg(long)]
    eval_batch: Option<usize>,
    /// Gradient-reweighting factor on previous-token attention.
    #[arg(long)]
    reweight: Option<f64>,
    /// Enable ground-truth task injection into MLP1.
    #[arg(long)]
    inject: bool,
    /// Non-autoregressive variant: MLP1 removed, additive relative biases,
    /// final-position loss, SGD with momentum.
    #[arg(long)]
    nonauto: bool,
    /// Save every checkpoint as a MICL1 file (final always saved).
    #[arg(long)]
    save_checkpoints: bool,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(default)]
pub struct TrainCliConfig {
    pub c: usize,
    pub d: usize,
    pub alpha: f64,
    pub k: usize,
    pub n: usize,
    pub batch: usize,
    pub iters: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub task_seed: u64,
    pub eval_batch: usize,
    pub reweight: Option<f64>,
    pub inject: bool,
    pub nonauto: bool,
    pub sgd_momentum: f64,
    pub save_checkpoints: bool,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        TrainCliConfig {
            c: 10,
            d: 64,
            alpha: 1.0,
            k: 8,
            n: 256,
            batch: 128,
            iters: 1000,
            lr: 1e-3,
            weight_decay: 1e-3,
            seed: 0,
            task_seed: 0,
            eval_batch: 256,
            reweight: None,
            inject: false,
            nonauto: false,
            sgd_momentum: 0.9,
            save_checkpoints: false,
        }
    }
}

pub fn build_train_setup(cfg: &TrainCliConfig) -> (TransformerConfig, TrainConfig) {
    let mut model = TransformerConfig::reference(cfg.c, cfg.d, cfg.n);
    if cfg.nonauto {
        model.positional = Positional::AdditiveRelative;
        model.mlp1_enabled = false;
    }
    if cfg.inject {
        model.task_injection = Some(cfg.k);
    }
    let mut train = TrainConfig::new(cfg.n, cfg.batch, cfg.iters, cfg.seed);
    train.eval_batch = cfg.eval_batch;
    train.grad_reweight = cfg.reweight;
    train.task_injection = cfg.inject;
    if cfg.nonauto {
        train.loss_mode = LossMode::FinalPosition;
        train.optimizer = Optimizer::Sgd { lr: cfg.lr, momentum: cfg.sgd_momentum };
    } else {
        train.optimizer =
            Optimizer::AdamW { lr: cfg.lr, betas: (0.9, 0.95), weight_decay: cfg.weight_decay };
    }
    (model, train)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainCliConfig = load_config(&args.config)?;
    merge!(cfg, args, c, d, alpha, k, n, batch, iters, lr, weight_decay, seed, task_seed, eval_batch);
    if args.reweight.is_some() {
        cfg.reweight = args.reweight;
    }
    cfg.inject |= args.inject;
    cfg.nonauto |= args.nonauto;
    cfg.save_checkpoints |= args.save_checkpoints;
    let mut run = start_run("train", &cfg, cfg.seed, &args.out_dir)?;
    let tasks = build_task_set(cfg.task_seed, cfg.k, cfg.c, cfg.alpha)?;
    let (model_config, train_config) = build_train_setup(&cfg);
    let mut params = TransformerParams::init(model_config, cfg.seed);
    let out = transformer::train(&mut params, &tasks, &train_config)?;
    let mut csv = Csv::new(&[
        "iter", "loss_train", "loss_gen", "phi_delta1", "phi_beta2", "nA1", "nA2", "wall_time",
    ]);
    for m in &out.metrics {
        csv.row(&[
            m.iter.to_string(),
            f(m.loss_train),
            f(m.loss_gen),
            f(m.phi_delta1),
            f(m.phi_beta2),
            f(m.n_a1),
            f(m.n_a2),
            f(m.wall_time),
        ]);
    }
    csv.write(&run.output("tables/metrics.csv"))?;
    write_json(&run.output("run-config.json"), &cfg)?;
    if cfg.save_checkpoints {
        for (iter, ckpt) in &out.checkpoints {
            let path = run.output(&format!("checkpoints/iter-{iter:08}.micl1"));
            micl_core::io::write_transformer_checkpoint(&path, ckpt)?;
        }
    }
    let final_path = run.output("checkpoints/final.micl1");
    micl_core::io::write_transformer_checkpoint(&final_path, &out.params)?;
    let dir = run.finish()?;
    println!(
        "trained {} iters; final loss_train {:.4}, loss_gen {:.4} -> {}",
        cfg.iters,
        out.metrics.last().map(|m| m.loss_train).unwrap_or(f64::NAN),
        out.metrics.last().map(|m| m.loss_gen).unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

/// Loads a transformer back from a training run directory.
pub fn load_trained(run_dir: &Path) -> Result<(TransformerParams, TrainCliConfig)> {
    let cfg: TrainCliConfig =
        serde_json::from_slice(&std::fs::read(run_dir.join("run-config.json"))?)
            .map_err(Error::from)?;
    let (model_config, _) = build_train_setup(&cfg);
    let tensors = micl_core::io::read_checkpoint(&run_dir.join("checkpoints/final.micl1"))?;
    let mut ps = micl_core::optim::ParamSet::new();
    for (name, t) in tensors {
        ps.push(name, t);
    }
    Ok((TransformerParams::from_param_set(model_config, &ps)?, cfg))
}

// ---------------------------------------------------------------------------
// train-sa
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainSaArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// full | constrained | reduced
    #[arg(long)]
    variant: Option<String>,
    /// control | bias-ablated
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// How many seeds to run (seed, seed+1, ...).
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSaCliConfig {
    c: usize,
    alpha: f64,
    n: usize,
    batch: usize,
    lr: f64,
    iters: usize,
    seed: u64,
    variant: String,
    data: String,
    eval_every: usize,
    seeds: usize,
}

impl Default for TrainSaCliConfig {
    fn default() -> Self {
        TrainSaCliConfig {
            c: 10,
            alpha: 1.0,
            n: 128,
            batch: 256,
            lr: 1.0,
            iters: 6000,
            seed: 0,
            variant: "constrained".into(),
            data: "control".into(),
            eval_every: 1,
            seeds: 1,
        }
    }
}

fn parse_variant(s: &str) -> Result<SaVariant> {
    match s {
        "full" => Ok(SaVariant::Full),
        "constrained" => Ok(SaVariant::Constrained),
        "reduced" => Ok(SaVariant::Reduced),
        other => Err(Error::parameter(format!("unknown variant {other}"))),
    }
}

fn parse_data_mode(s: &str) -> Result<sa::DataMode> {
    match s {
        "control" => Ok(sa::DataMode::Control),
        "bias-ablated" | "bias_ablated" => Ok(sa::DataMode::BiasAblated),
        other => Err(Error::parameter(format!("unknown data mode {other}"))),
    }
}

fn sa_log_csv(log: &sa::SaTrainLog) -> Csv {
    let mut header: Vec<String> =
        ["iter", "loss", "w_a", "w_b", "w_c", "w_d", "beta", "delta"].iter().map(|s| s.to_string()).collect();
    header.extend(log.block_labels.iter().cloned());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::new(&header_refs);
    for r in &log.rows {
        let mut fields = vec![
            r.iter.to_string(),
            f(r.loss),
            f(r.w[0]),
            f(r.w[1]),
            f(r.w[2]),
            f(r.w[3]),
            f(r.beta),
            f(r.delta),
        ];
        fields.extend(r.block_norms.iter().map(|v| f(*v)));
        csv.row(&fields);
    }
    csv
}

pub fn train_sa(args: TrainSaArgs) -> Result<()> {
    let mut cfg: TrainSaCliConfig = load_config(&args.config)?;
    merge!(cfg, args, c, alpha, n, batch, lr, iters, seed, variant, data, eval_every, seeds);
    let variant = parse_variant(&cfg.variant)?;
    let data = parse_data_mode(&cfg.data)?;
    let mut run = start_run("train-sa", &cfg, cfg.seed, &args.out_dir)?;
    let base = sa::fixed_length_baselines(cfg.c, cfg.alpha, cfg.n, 4000, cfg.seed ^ 0xbead)?;
    println!(
        "predictor baselines at N={}: L1gen {:.4} ({:.4}), L2gen {:.4} ({:.4})",
        cfg.n, base.l1gen.value, base.l1gen.sem, base.l2gen.value, base.l2gen.sem
    );
    for s in 0..cfg.seeds {
        let mut sc = SaTrainConfig::new(cfg.n, cfg.iters, cfg.seed + s as u64, variant);
        sc.c = cfg.c;
        sc.alpha = cfg.alpha;
        sc.batch = cfg.batch;
        sc.lr = cfg.lr;
        sc.data = data;
        sc.eval_every = cfg.eval_every;
        let log = sa::sa_train(&sc)?;
        let csv = sa_log_csv(&log);
        csv.write(&run.output(&format!("tables/trajectory-seed{}.csv", cfg.seed + s as u64)))?;
        let tau = sa::detect_tau_2gen(&log, base.l1gen.value, base.l2gen.value);
        println!(
            "seed {}: final loss {:.4}, tau(predictor levels) = {:?}",
            cfg.seed + s as u64,
            log.rows.last().map(|r| r.loss).unwrap_or(f64::NAN),
            tau
        );
    }
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// readouts
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ReadoutsArgs {
    /// Training run directory (needs saved checkpoints).
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    train_batch: usize,
    #[arg(long, default_value_t = 256)]
    ood_batch: usize,
    #[arg(long, default_value_t = 64)]
    mem_per_task: usize,
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
}

pub fn readouts(args: ReadoutsArgs) -> Result<()> {
    let cfg_json = serde_json::json!({
        "run": args.run.display().to_string(),
        "train_batch": args.train_batch,
        "ood_batch": args.ood_batch,
        "mem_per_task": args.mem_per_task,
        "epsilon": args.epsilon,
    });
    let (final_params, tcfg) = load_trained(&args.run)?;
    let mut run = Run::create("readouts", cfg_json, tcfg.seed, args.out_dir.as_deref())?;
    let tasks = Arc::new(build_task_set(tcfg.task_seed, tcfg.k, tcfg.c, tcfg.alpha)?);
    // Checkpoint series if saved, else the final parameters only.
    let mut checkpoints: Vec<(usize, TransformerParams)> = Vec::new();
    let ckpt_dir = args.run.join("checkpoints");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&ckpt_dir)?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.file_name().map_or(false, |n| n.to_string_lossy().starts_with("iter-")))
        .collect();
    entries.sort();
    let (model_config, _) = build_train_setup(&tcfg);
    for path in entries {
        let iter: usize = path
            .file_stem()
            .and_then(|s| s.to_string_lossy().strip_prefix("iter-").map(|v| v.parse().ok()))
            .flatten()
            .ok_or_else(|| Error::parameter("bad checkpoint name"))?;
        let tensors = micl_core::io::read_checkpoint(&path)?;
        let mut ps = micl_core::optim::ParamSet::new();
        for (name, t) in tensors {
            ps.push(name, t);
        }
        checkpoints.push((iter, TransformerParams::from_param_set(model_config.clone(), &ps)?));
    }
    if checkpoints.is_empty() {
        checkpoints.push((tcfg.iters, final_params.clone()));
    }
    // Mechanistic readouts per checkpoint.
    let batch = sample_training_batch(&tasks, tcfg.n, args.train_batch, tcfg.seed ^ 0x0dd, 77)?;
    let mut csv = Csv::new(&["k", "iter", "metric", "value"]);
    for (iter, params) in &checkpoints {
        let rows = [
            ("phi_delta1", micl_core::diagnostics::phi_delta(params, &batch, 1)?),
            ("phi_delta2", micl_core::diagnostics::phi_delta(params, &batch, 2)?),
            ("phi_beta1", micl_core::diagnostics::phi_beta(params, &batch, 1)?),
            ("phi_beta2", micl_core::diagnostics::phi_beta(params, &batch, 2)?),
            ("n_a1", micl_core::diagnostics::n_attend(params, &batch, 1)?),
            ("n_a2", micl_core::diagnostics::n_attend(params, &batch, 2)?),
        ];
        for (metric, value) in rows {
            csv.row(&[tcfg.k.to_string(), iter.to_string(), metric.to_string(), f(value)]);
        }
    }
    // Behavioral divergences.
    let grid = micl_core::diagnostics::behavioral_grid(
        &checkpoints,
        &tasks,
        (8 * tcfg.k).min(args.train_batch * 8),
        args.ood_batch,
        tcfg.seed ^ 0xd1,
    )?;
    for row in &grid {
        csv.row(&[
            tcfg.k.to_string(),
            row.iter.to_string(),
            format!("divergence_{}", row.predictor),
            f(row.divergence),
        ]);
    }
    csv.write(&run.output("tables/readouts.csv"))?;
    // Memorization report on the final model.
    let report = micl_core::diagnostics::memorization_scores(
        &final_params,
        &tasks,
        args.mem_per_task,
        args.epsilon,
        tcfg.seed ^ 0x3e3,
    )?;
    write_json(&run.output("tables/memorization.json"), &report)?;
    println!(
        "memorized fraction: strict {:.3}, loose {:.3}",
        report.fraction_strict, report.fraction_loose
    );
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// trace / patch
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TraceArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 0.25)]
    report_threshold: f64,
}

pub fn trace(args: TraceArgs) -> Result<()> {
    let cfg = serde_json::json!({
        "run": args.run.display().to_string(),
        "batch": args.batch,
        "report_threshold": args.report_threshold,
    });
    let (params, tcfg) = load_trained(&args.run)?;
    let mut run = Run::create("trace", cfg, tcfg.seed, args.out_dir.as_deref())?;
    let tasks = Arc::new(build_task_set(tcfg.task_seed, tcfg.k, tcfg.c, tcfg.alpha)?);
    let batch = sample_training_batch(&tasks, tcfg.n, args.batch, tcfg.seed ^ 0x77ace, 9)?;
    let map = micl_core::tracing::trace(&params, &batch, None)?;
    let mut csv = Csv::new(&["source", "target", "kl_nats"]);
    for (edge, kl) in &map.entries {
        csv.row(&[format!("{:?}", edge.source), format!("{:?}", edge.target), f(*kl)]);
    }
    csv.write(&run.output("tables/importance.csv"))?;
    // Report-time thresholding only; the full map is always written.
    let mut kept: Vec<_> =
        map.entries.iter().filter(|(_, kl)| *kl > args.report_threshold).collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (edge, kl) in kept {
        println!("{:<22} {:.4}", edge.label(), kl);
    }
    run.finish()?;
    Ok(())
}

#[derive(Args)]
pub struct PatchArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// att2 | att1
    #[arg(long, default_value = "att2")]
    site: String,
    /// Donor and host task indices.
    #[arg(long, default_value_t = 0)]
    task_a: usize,
    #[arg(long, default_value_t = 1)]
    task_b: usize,
}

pub fn patch(args: PatchArgs) -> Result<()> {
    let cfg = serde_json::json!({
        "run": args.run.display().to_string(),
        "batch": args.batch,
        "site": args.site,
        "task_a": args.task_a,
        "task_b": args.task_b,
    });
    let (params, tcfg) = load_trained(&args.run)?;
    let mut run = Run::create("patch", cfg, tcfg.seed, args.out_dir.as_deref())?;
    let tasks = Arc::new(build_task_set(tcfg.task_seed, tcfg.k, tcfg.c, tcfg.alpha)?);
    let site = match args.site.as_str() {
        "att2" => micl_core::tracing::PatchSite::Att2,
        "att1" => micl_core::tracing::PatchSite::Att1,
        other => return Err(Error::parameter(format!("unknown site {other}"))),
    };
    let sample_from = |task: usize, stream: u64| -> Result<Vec<micl_core::markov::Sequence>> {
        (0..args.batch)
            .map(|i| {
                let mut rng = micl_core::streams::sequence_rng(tcfg.seed ^ 0x9a7c, stream, i as u64);
                let mut seq =
                    micl_core::markov::sample_sequence(tasks.matrix(task), tcfg.n, &mut rng)?;
                seq.task_index = Some(task);
                Ok(seq)
            })
            .collect()
    };
    let batch_a = sample_from(args.task_a, 1)?;
    let batch_b = sample_from(args.task_b, 2)?;
    let report = micl_core::tracing::patch_task_vector(&params, &tasks, &batch_a, &batch_b, site)?;
    write_json(&run.output("tables/patching.json"), &report)?;
    for cell in &report.cells {
        println!("{:<12} vs {:<3}: similarity {:.4}", cell.condition, cell.predictor, cell.similarity_mean);
    }
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// landscape / scaling / theory
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct LandscapeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    beta_max: Option<f64>,
    #[arg(long)]
    delta_max: Option<f64>,
    #[arg(long)]
    grid_steps: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct LandscapeCliConfig {
    c: usize,
    alpha: f64,
    n: usize,
    ensemble: usize,
    beta_max: f64,
    delta_max: f64,
    grid_steps: usize,
    inner_steps: usize,
    inner_lr: f64,
    seed: u64,
}

impl Default for LandscapeCliConfig {
    fn default() -> Self {
        LandscapeCliConfig {
            c: 10,
            alpha: 1.0,
            n: 1024,
            ensemble: 2048,
            beta_max: 8.0,
            delta_max: 8.0,
            grid_steps: 9,
            inner_steps: 500,
            inner_lr: 0.1,
            seed: 17,
        }
    }
}

pub fn landscape(args: LandscapeArgs) -> Result<()> {
    let mut cfg: LandscapeCliConfig = load_config(&args.config)?;
    merge!(cfg, args, c, alpha, n, ensemble, beta_max, delta_max, grid_steps, inner_steps, inner_lr, seed);
    let mut run = start_run("landscape", &cfg, cfg.seed, &args.out_dir)?;
    let axis = |max: f64| -> Vec<f64> {
        (0..cfg.grid_steps).map(|i| max * i as f64 / (cfg.grid_steps - 1) as f64).collect()
    };
    let config = sa::LandscapeConfig {
        c: cfg.c,
        alpha: cfg.alpha,
        n: cfg.n,
        ensemble: cfg.ensemble,
        inner_steps: cfg.inner_steps,
        inner_lr: cfg.inner_lr,
        seed: cfg.seed,
    };
    let cells = sa::landscape_scan(&axis(cfg.beta_max), &axis(cfg.delta_max), &config)?;
    let mut csv = Csv::new(&["beta", "delta", "loss", "w_a", "w_b", "w_c", "w_d"]);
    for cell in &cells {
        csv.row(&[
            f(cell.beta),
            f(cell.delta),
            f(cell.loss),
            f(cell.w[0]),
            f(cell.w[1]),
            f(cell.w[2]),
            f(cell.w[3]),
        ]);
    }
    csv.write(&run.output("tables/landscape.csv"))?;
    run.finish()?;
    Ok(())
}

#[derive(Args)]
pub struct ScalingArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingCliConfig {
    n_list: Vec<usize>,
    seeds: usize,
    c: usize,
    alpha: f64,
    batch: usize,
    lr: f64,
    seed: u64,
    variant: String,
}

impl Default for ScalingCliConfig {
    fn default() -> Self {
        ScalingCliConfig {
            n_list: vec![32, 64, 128, 256],
            seeds: 4,
            c: 10,
            alpha: 1.0,
            batch: 256,
            lr: 1.0,
            seed: 100,
            variant: "reduced".into(),
        }
    }
}

/// Iteration budget that comfortably covers the transition at each N.
pub fn scaling_iters(n: usize) -> usize {
    match n {
        0..=32 => 2500,
        33..=64 => 4000,
        65..=128 => 6000,
        _ => 10_000,
    }
}

pub fn run_scaling(
    cfg: &ScalingCliConfig,
) -> Result<(Vec<(usize, u64, Option<usize>)>, Vec<(usize, f64)>)> {
    let variant = parse_variant(&cfg.variant)?;
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for &n in &cfg.n_list {
        let (l1, l2) = sa::model_plateau_levels(cfg.c, cfg.alpha, n, 2000, cfg.seed ^ 0x9a)?;
        let mut taus = Vec::new();
        for s in 0..cfg.seeds {
            let mut sc = SaTrainConfig::new(n, scaling_iters(n), cfg.seed + s as u64, variant);
            sc.c = cfg.c;
            sc.alpha = cfg.alpha;
            sc.batch = cfg.batch;
            sc.lr = cfg.lr;
            let log = sa::sa_train(&sc)?;
            let tau = sa::detect_tau_2gen(&log, l1, l2);
            rows.push((n, cfg.seed + s as u64, tau));
            if let Some(t) = tau {
                taus.push(t as f64);
            }
        }
        taus.sort_by(f64::total_cmp);
        if !taus.is_empty() {
            let mid = taus.len() / 2;
            let median = if taus.len() % 2 == 1 {
                taus[mid]
            } else {
                0.5 * (taus[mid - 1] + taus[mid])
            };
            medians.push((n, median));
        }
    }
    Ok((rows, medians))
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let dx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let dy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    num / (dx * dy).sqrt()
}

pub fn scaling(args: ScalingArgs) -> Result<()> {
    let mut cfg: ScalingCliConfig = load_config(&args.config)?;
    merge!(cfg, args, n_list, seeds, c, alpha, batch, lr, seed, variant);
    let mut run = start_run("scaling", &cfg, cfg.seed, &args.out_dir)?;
    let (rows, medians) = run_scaling(&cfg)?;
    let mut csv = Csv::new(&["n", "seed", "tau"]);
    for (n, seed, tau) in &rows {
        csv.row(&[
            n.to_string(),
            seed.to_string(),
            tau.map(|t| t.to_string()).unwrap_or_else(|| "not-found".into()),
        ]);
    }
    csv.write(&run.output("tables/tau.csv"))?;
    let xs: Vec<f64> = medians
        .iter()
        .map(|(n, _)| *n as f64 / micl_core::theory::harmonic(*n))
        .collect();
    let ys: Vec<f64> = medians.iter().map(|(_, t)| *t).collect();
    let r = if xs.len() >= 2 { pearson(&xs, &ys) } else { f64::NAN };
    let summary = serde_json::json!({
        "medians": medians,
        "n_over_hn": xs,
        "pearson_r": r,
    });
    write_json(&run.output("tables/scaling.json"), &summary)?;
    println!("tau medians {medians:?}; Pearson r against N/H_N = {r:.4}");
    run.finish()?;
    Ok(())
}

#[derive(Args)]
pub struct TheoryArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    c: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Print only the F1 comparison.
    #[arg(long)]
    f1: bool,
    #[arg(long, default_value_t = 8)]
    d_max: usize,
    #[arg(long, default_value_t = 100_000)]
    f_samples: usize,
    #[arg(long, default_value_t = 10_000)]
    i_samples: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [128usize, 1024])]
    n_grid: Vec<usize>,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

pub fn theory(args: TheoryArgs) -> Result<()> {
    let cfg = serde_json::json!({
        "c": args.c, "alpha": args.alpha, "f1": args.f1, "d_max": args.d_max,
        "f_samples": args.f_samples, "i_samples": args.i_samples,
        "n_grid": args.n_grid, "seed": args.seed,
    });
    let mut run = Run::create("theory", cfg, args.seed, args.out_dir.as_deref())?;
    let stats = micl_core::theory::EnsembleStats::estimate(
        args.c,
        args.alpha,
        args.d_max,
        args.f_samples,
        args.i_samples,
        args.seed,
    )?;
    let analytic = micl_core::theory::f1_analytic(args.c, args.alpha)?;
    let f1 = stats.f_d(1)?;
    println!(
        "F1 analytic = {:.6} ({}) | Monte-Carlo = {:.6} +- {:.6} over {} matrices",
        analytic,
        format_rational(args.c, args.alpha),
        f1.value,
        f1.sem,
        f1.samples
    );
    let mut csv = Csv::new(&["quantity", "n_or_d", "estimate", "sem", "samples", "seed"]);
    csv.row(&["f1_analytic".into(), "1".into(), f(analytic), f(0.0), "0".into(), args.seed.to_string()]);
    for d in 1..=args.d_max {
        let e = stats.f_d(d)?;
        csv.row(&[
            "f_d".into(),
            d.to_string(),
            f(e.value),
            f(e.sem),
            e.samples.to_string(),
            args.seed.to_string(),
        ]);
    }
    csv.row(&[
        "i".into(),
        "0".into(),
        f(stats.i.value),
        f(stats.i.sem),
        stats.i.samples.to_string(),
        args.seed.to_string(),
    ]);
    csv.row(&[
        "c_beta_remainder".into(),
        "0".into(),
        f(stats.c_beta_remainder.value),
        f(stats.c_beta_remainder.sem),
        stats.c_beta_remainder.samples.to_string(),
        args.seed.to_string(),
    ]);
    if !args.f1 {
        for &n in &args.n_grid {
            let cd = micl_core::theory::c_delta(1.0 / 3.0, 1.0 / 3.0, n, &stats)?;
            let cb = micl_core::theory::c_beta(1.0 / 3.0, n, &stats)?;
            let tau_na = micl_core::theory::tau_prediction(n, micl_core::theory::TauMode::NonAutoregressive)?;
            let tau_a = micl_core::theory::tau_prediction(n, micl_core::theory::TauMode::Autoregressive)?;
            for (name, v) in [("c_delta", cd), ("c_beta", cb), ("tau_nonauto", tau_na), ("tau_auto", tau_a)] {
                csv.row(&[
                    name.into(),
                    n.to_string(),
                    f(v),
                    f(0.0),
                    "0".into(),
                    args.seed.to_string(),
                ]);
            }
        }
    }
    csv.write(&run.output("tables/theory.csv"))?;
    run.finish()?;
    Ok(())
}

fn format_rational(c: usize, alpha: f64) -> String {
    if (alpha - 1.0).abs() < 1e-12 {
        format!("{}/{}", c - 1, c * c + c)
    } else {
        "closed form".into()
    }
}

// ---------------------------------------------------------------------------
// minimal-mem / k1-search / k2-search
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct MinimalMemArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// 0 trains on fresh matrices every batch (K -> infinity).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d_phi: Option<usize>,
    #[arg(long)]
    d_emb: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task_seed: Option<u64>,
    #[arg(long)]
    mlp1_layers: Option<usize>,
    #[arg(long)]
    mlp2_layers: Option<usize>,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(default)]
pub struct MinimalCliConfig {
    pub c: usize,
    pub alpha: f64,
    pub k: usize,
    pub d_phi: usize,
    pub d_emb: usize,
    pub n: usize,
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub task_seed: u64,
    pub mlp1_layers: usize,
    pub mlp2_layers: usize,
    pub hidden1_mult: usize,
    pub hidden2_mult: usize,
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for MinimalCliConfig {
    fn default() -> Self {
        MinimalCliConfig {
            c: 10,
            alpha: 1.0,
            k: 8,
            d_phi: 64,
            d_emb: 16,
            n: 256,
            iters: 800,
            lr: 2e-3,
            batch: 32,
            seed: 0,
            task_seed: 7,
            mlp1_layers: 1,
            mlp2_layers: 2,
            hidden1_mult: 4,
            hidden2_mult: 2,
            eval_every: 50,
            eval_batch: 64,
        }
    }
}

pub fn minimal_setup(
    cfg: &MinimalCliConfig,
) -> Result<(micl_core::minimal::MinimalConfig, micl_core::minimal::TaskData, micl_core::minimal::MinimalTrainConfig)> {
    let mut mc = micl_core::minimal::MinimalConfig::desk(cfg.c, cfg.d_phi, cfg.n);
    mc.d_emb = cfg.d_emb;
    mc.mlp1_layers = cfg.mlp1_layers;
    mc.mlp2_layers = cfg.mlp2_layers;
    mc.hidden1_mult = cfg.hidden1_mult;
    mc.hidden2_mult = cfg.hidden2_mult;
    let data = if cfg.k == 0 {
        micl_core::minimal::TaskData::Fresh { c: cfg.c, alpha: cfg.alpha }
    } else {
        micl_core::minimal::TaskData::Fixed(Arc::new(build_task_set(
            cfg.task_seed,
            cfg.k,
            cfg.c,
            cfg.alpha,
        )?))
    };
    let mut tc = micl_core::minimal::MinimalTrainConfig::new(cfg.iters, cfg.seed);
    tc.batch = cfg.batch;
    tc.lr = cfg.lr;
    tc.eval_every = cfg.eval_every;
    tc.eval_batch = cfg.eval_batch;
    Ok((mc, data, tc))
}

pub fn minimal_mem(args: MinimalMemArgs) -> Result<()> {
    let mut cfg: MinimalCliConfig = load_config(&args.config)?;
    merge!(cfg, args, c, alpha, k, d_phi, d_emb, n, iters, lr, batch, seed, task_seed, mlp1_layers, mlp2_layers);
    let mut run = start_run("minimal-mem", &cfg, cfg.seed, &args.out_dir)?;
    let (mc, data, tc) = minimal_setup(&cfg)?;
    let mut params = micl_core::minimal::MinimalParams::init(mc, cfg.seed);
    let out = micl_core::minimal::train(&mut params, &data, &tc)?;
    let mut csv = Csv::new(&["iter", "loss_train", "loss_gen", "l2gen_train", "l2gen_gen"]);
    for m in &out.metrics {
        csv.row(&[
            m.iter.to_string(),
            f(m.loss_train),
            f(m.loss_gen),
            f(m.l2gen_train),
            f(m.l2gen_gen),
        ]);
    }
    csv.write(&run.output("tables/metrics.csv"))?;
    let last = out.metrics.last().unwrap();
    println!(
        "final: L_train {:.4} (margin {:+.4}), L_gen {:.4} (margin {:+.4})",
        last.loss_train,
        last.loss_train - last.l2gen_train,
        last.loss_gen,
        last.loss_gen - last.l2gen_gen
    );
    run.finish()?;
    Ok(())
}

#[derive(Args)]
pub struct K1SearchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    k_lo: Option<usize>,
    #[arg(long)]
    k_hi: Option<usize>,
    #[arg(long)]
    max_probes: Option<usize>,
    #[arg(long)]
    phi_threshold: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task_seed: Option<u64>,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(default)]
pub struct K1CliConfig {
    pub k_lo: usize,
    pub k_hi: usize,
    pub max_probes: usize,
    pub phi_threshold: f64,
    pub train: TrainCliConfig,
}

impl Default for K1CliConfig {
    fn default() -> Self {
        let mut train = TrainCliConfig::default();
        train.d = 32;
        train.n = 64;
        train.batch = 32;
        train.iters = 3000;
        train.eval_batch = 128;
        K1CliConfig { k_lo: 2, k_hi: 64, max_probes: 8, phi_threshold: 0.45, train }
    }
}

pub fn k1_search(args: K1SearchArgs) -> Result<()> {
    let mut cfg: K1CliConfig = load_config(&args.config)?;
    if let Some(v) = args.k_lo {
        cfg.k_lo = v;
    }
    if let Some(v) = args.k_hi {
        cfg.k_hi = v;
    }
    if let Some(v) = args.max_probes {
        cfg.max_probes = v;
    }
    if let Some(v) = args.phi_threshold {
        cfg.phi_threshold = v;
    }
    if let Some(v) = args.iters {
        cfg.train.iters = v;
    }
    if let Some(v) = args.d {
        cfg.train.d = v;
    }
    if let Some(v) = args.n {
        cfg.train.n = v;
    }
    if let Some(v) = args.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.task_seed {
        cfg.train.task_seed = v;
    }
    let mut run = start_run("k1-search", &cfg, cfg.train.seed, &args.out_dir)?;
    let (model_config, train_config) = build_train_setup(&cfg.train);
    let result = micl_core::diagnostics::k1_search(
        &model_config,
        &train_config,
        cfg.train.alpha,
        cfg.train.task_seed,
        cfg.k_lo,
        cfg.k_hi,
        cfg.phi_threshold,
        cfg.max_probes,
    )?;
    write_json(&run.output("tables/k1.json"), &result)?;
    println!(
        "K1 bracket [{}, {}], midpoint {:.1}{}",
        result.bracket.0,
        result.bracket.1,
        result.midpoint,
        if result.budget_exhausted { " (budget exhausted)" } else { "" }
    );
    for p in &result.probes {
        println!("  K={:<5} max phi_beta2 = {:.3} -> {}", p.k, p.max_phi_beta, if p.met { "met" } else { "unmet" });
    }
    run.finish()?;
    Ok(())
}

#[derive(Args)]
pub struct K2SearchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    k_lo: Option<usize>,
    #[arg(long)]
    k_hi: Option<usize>,
    #[arg(long)]
    max_probes: Option<usize>,
    #[arg(long)]
    margin_window: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    d_phi: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(default)]
pub struct K2CliConfig {
    pub k_lo: usize,
    pub k_hi: usize,
    pub max_probes: usize,
    pub margin_window: usize,
    pub minimal: MinimalCliConfig,
}

impl Default for K2CliConfig {
    fn default() -> Self {
        let mut minimal = MinimalCliConfig::default();
        minimal.n = 64;
        minimal.iters = 600;
        K2CliConfig { k_lo: 2, k_hi: 256, max_probes: 8, margin_window: 4, minimal }
    }
}

pub fn k2_search(args: K2SearchArgs) -> Result<()> {
    let mut cfg: K2CliConfig = load_config(&args.config)?;
    if let Some(v) = args.k_lo {
        cfg.k_lo = v;
    }
    if let Some(v) = args.k_hi {
        cfg.k_hi = v;
    }
    if let Some(v) = args.max_probes {
        cfg.max_probes = v;
    }
    if let Some(v) = args.margin_window {
        cfg.margin_window = v;
    }
    if let Some(v) = args.iters {
        cfg.minimal.iters = v;
    }
    if let Some(v) = args.d_phi {
        cfg.minimal.d_phi = v;
    }
    if let Some(v) = args.seed {
        cfg.minimal.seed = v;
    }
    let mut run = start_run("k2-search", &cfg, cfg.minimal.seed, &args.out_dir)?;
    let (mc, _, tc) = minimal_setup(&cfg.minimal)?;
    let result = micl_core::minimal::k2_search(
        &mc,
        &tc,
        cfg.minimal.alpha,
        cfg.minimal.task_seed,
        cfg.k_lo,
        cfg.k_hi,
        cfg.margin_window,
        cfg.max_probes,
    )?;
    write_json(&run.output("tables/k2.json"), &result)?;
    println!("K2-hat bracket [{}, {}]{}", result.bracket.0, result.bracket.1,
        result.warning.as_deref().map(|w| format!(" ({w})")).unwrap_or_default());
    for p in &result.probes {
        println!("  K={:<6} margin {:+.4} -> {}", p.k, p.margin, if p.memorized { "memorized" } else { "not memorized" });
    }
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// report / self-check
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ReportArgs {
    /// Run directories whose tables/metrics.csv share a schema.
    #[arg(required = false)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long, default_value_t = 5)]
    seed: u64,
}

pub fn report(args: ReportArgs) -> Result<()> {
    if args.runs.is_empty() {
        return Err(Error::parameter("report needs at least one run directory"));
    }
    let cfg = serde_json::json!({
        "runs": args.runs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>(),
        "resamples": args.resamples,
        "seed": args.seed,
    });
    let mut run = Run::create("report", cfg, args.seed, args.out_dir.as_deref())?;
    // Load metric tables.
    let mut header: Option<Vec<String>> = None;
    let mut tables: Vec<Vec<Vec<f64>>> = Vec::new();
    for dir in &args.runs {
        let raw = std::fs::read_to_string(dir.join("tables/metrics.csv"))?;
        let mut lines = raw.lines();
        let head: Vec<String> =
            lines.next().ok_or_else(|| Error::parameter("empty metrics.csv"))?.split(',').map(|s| s.to_string()).collect();
        match &header {
            None => header = Some(head),
            Some(h) if *h == head => {}
            _ => return Err(Error::parameter("metric schemas differ between runs")),
        }
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap_or(f64::NAN)).collect())
            .collect();
        tables.push(rows);
    }
    let header = header.unwrap();
    let min_rows = tables.iter().map(|t| t.len()).min().unwrap_or(0);
    let mut csv_header = vec!["iter".to_string(), "metric".to_string(), "median".to_string(), "ci_lo".to_string(), "ci_hi".to_string(), "runs".to_string()];
    let csv_refs: Vec<&str> = csv_header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::new(&csv_refs);
    use rand::Rng;
    let mut rng = micl_core::streams::misc_rng(args.seed, 0);
    for row in 0..min_rows {
        let iter = tables[0][row][0];
        for (col, metric) in header.iter().enumerate().skip(1) {
            if metric == "wall_time" {
                continue;
            }
            let values: Vec<f64> = tables.iter().map(|t| t[row][col]).collect();
            let median = median_of(&values);
            // Bootstrap 95% CI over runs.
            let mut stats: Vec<f64> = (0..args.resamples)
                .map(|_| {
                    let sample: Vec<f64> =
                        (0..values.len()).map(|_| values[rng.gen_range(0..values.len())]).collect();
                    median_of(&sample)
                })
                .collect();
            stats.sort_by(f64::total_cmp);
            let lo = stats[(0.025 * (args.resamples - 1) as f64).round() as usize];
            let hi = stats[(0.975 * (args.resamples - 1) as f64).round() as usize];
            csv.row(&[
                f(iter),
                metric.clone(),
                f(median),
                f(lo),
                f(hi),
                values.len().to_string(),
            ]);
        }
    }
    csv.write(&run.output("tables/merged.csv"))?;
    // Plot spec: enough for any plotter to reconstruct figure analogues.
    let plot_spec = serde_json::json!({
        "x": {"column": "iter", "scale": "log"},
        "y": {"column": "median", "label": "value"},
        "series": header.iter().skip(1).filter(|m| *m != "wall_time").collect::<Vec<_>>(),
        "bands": {"lo": "ci_lo", "hi": "ci_hi"},
        "source": "tables/merged.csv",
    });
    write_json(&run.output("tables/plot-spec.json"), &plot_spec)?;
    csv_header.clear();
    run.finish()?;
    Ok(())
}

fn median_of(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[derive(Args)]
pub struct SelfCheckArgs {
    run: PathBuf,
}

pub fn self_check(args: SelfCheckArgs) -> Result<()> {
    manifest::self_check(&args.run).map_err(Error::parameter)?;
    println!("ok: {}", args.run.display());
    Ok(())
}
