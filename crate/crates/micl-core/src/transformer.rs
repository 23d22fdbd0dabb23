//! The two-layer transformer: rotary attention, GELU MLPs, residual caching
//! for circuit work, autoregressive AdamW training with logarithmically
//! spaced checkpoints, the MLP1-removed non-autoregressive variant, and the
//! two kinetic perturbations (gradient reweighting and task injection).
//!
//! Two forward paths share the same numeric kernels: a plain evaluation
//! forward that fills a [`ResidualCache`], and a taped forward for training.

use rayon::prelude::*;

use crate::bayes::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::markov::{sample_training_batch, Sequence, TaskSet};
use crate::optim::{AdamW, ParamSet, Sgd};
use crate::streams;
use crate::tensor::{dgemm, gelu_scalar, layer_norm_rows, rotary_rows, softmax_causal_rows, Graph, Tensor, Var};

pub const ROTARY_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Positional {
    Rotary,
    AdditiveRelative,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TransformerConfig {
    pub c: usize,
    pub d: usize,
    pub n_max: usize,
    pub positional: Positional,
    pub mlp1_enabled: bool,
    /// Learnable per-task vectors added to the MLP1 input when set.
    pub task_injection: Option<usize>,
}

impl TransformerConfig {
    pub fn reference(c: usize, d: usize, n_max: usize) -> Self {
        TransformerConfig {
            c,
            d,
            n_max,
            positional: Positional::Rotary,
            mlp1_enabled: true,
            task_injection: None,
        }
    }
}

/// One layer's weights. Linear maps act on row vectors: y = x W with
/// W[in, out], i.e. W_q here stores the transpose of the paper's W_Q.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub w_in: Tensor,
    pub w_out: Tensor,
}

#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub config: TransformerConfig,
    /// Embedding rows: [C, D].
    pub we: Tensor,
    pub layers: [LayerParams; 2],
    /// Readout: [D, C].
    pub wu: Tensor,
    /// Additive relative positional bias tables per layer (offset r = n - i).
    pub rel_bias: Option<[Tensor; 2]>,
    /// Task-injection table: [K, D].
    pub task_table: Option<Tensor>,
}

impl TransformerParams {
    /// GPT-2 style init: N(0, 1/D) everywhere except the residual-projecting
    /// matrices (values and MLP output), which use N(0, 1/(4D)).
    pub fn init(config: TransformerConfig, seed: u64) -> Self {
        let mut rng = streams::init_rng(seed);
        let d = config.d;
        let std = (1.0 / d as f64).sqrt();
        let std_resid = (1.0 / (4 * d) as f64).sqrt();
        let mut layer = || LayerParams {
            wq: Tensor::randn(&[d, d], std, &mut rng),
            wk: Tensor::randn(&[d, d], std, &mut rng),
            wv: Tensor::randn(&[d, d], std_resid, &mut rng),
            w_in: Tensor::randn(&[d, 4 * d], std, &mut rng),
            w_out: Tensor::randn(&[4 * d, d], std_resid, &mut rng),
        };
        let layers = [layer(), layer()];
        let we = Tensor::randn(&[config.c, d], std, &mut rng);
        let wu = Tensor::randn(&[d, config.c], std, &mut rng);
        let rel_bias = match config.positional {
            Positional::Rotary => None,
            Positional::AdditiveRelative => {
                Some([Tensor::zeros(&[config.n_max]), Tensor::zeros(&[config.n_max])])
            }
        };
        let task_table = config.task_injection.map(|k| Tensor::zeros(&[k, d]));
        TransformerParams { config, we, layers, wu, rel_bias, task_table }
    }

    /// Flattens into a named parameter set (optimizer order).
    pub fn to_param_set(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("we", self.we.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            ps.push(format!("l{l}.wq"), layer.wq.clone());
            ps.push(format!("l{l}.wk"), layer.wk.clone());
            ps.push(format!("l{l}.wv"), layer.wv.clone());
            ps.push(format!("l{l}.w_in"), layer.w_in.clone());
            ps.push(format!("l{l}.w_out"), layer.w_out.clone());
        }
        ps.push("wu", self.wu.clone());
        if let Some(rb) = &self.rel_bias {
            ps.push("rel_bias0", rb[0].clone());
            ps.push("rel_bias1", rb[1].clone());
        }
        if let Some(tt) = &self.task_table {
            ps.push("task_table", tt.clone());
        }
        ps
    }

    pub fn from_param_set(config: TransformerConfig, ps: &ParamSet) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            ps.get(name).cloned().ok_or_else(|| Error::contract(format!("missing tensor {name}")))
        };
        let layer = |l: usize| -> Result<LayerParams> {
            Ok(LayerParams {
                wq: get(&format!("l{l}.wq"))?,
                wk: get(&format!("l{l}.wk"))?,
                wv: get(&format!("l{l}.wv"))?,
                w_in: get(&format!("l{l}.w_in"))?,
                w_out: get(&format!("l{l}.w_out"))?,
            })
        };
        let rel_bias = match config.positional {
            Positional::Rotary => None,
            Positional::AdditiveRelative => Some([get("rel_bias0")?, get("rel_bias1")?]),
        };
        let task_table = match config.task_injection {
            Some(_) => Some(get("task_table")?),
            None => None,
        };
        Ok(TransformerParams {
            we: get("we")?,
            layers: [layer(0)?, layer(1)?],
            wu: get("wu")?,
            rel_bias,
            task_table,
            config,
        })
    }
}

/// Residual-stream snapshots from one forward pass. All matrices are
/// row-major [N, D] (attention maps [N, N], logits [N, C]).
#[derive(Debug, Clone)]
pub struct ResidualCache {
    pub x0: Vec<f64>,
    pub att1: Vec<f64>,
    pub mlp1: Option<Vec<f64>>,
    pub att2: Vec<f64>,
    /// Att2 output split by residual source at the attended positions:
    /// token, att1, mlp1 (in that order; the token part carries the
    /// layer-norm centering so the three sum to `att2` exactly).
    pub att2_components: [Vec<f64>; 3],
    pub mlp2: Vec<f64>,
    pub logits: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub want_cache: bool,
    /// Ground-truth task index for task injection.
    pub task_index: Option<usize>,
    /// Replace the Att2 block output per position ([N, D] row-major).
    pub att2_override: Option<&'a [f64]>,
    /// Replace the Att1 block output per position.
    pub att1_override: Option<&'a [f64]>,
}

fn linear(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let (ins, outs) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), rows * ins);
    let mut out = vec![0.0; rows * outs];
    dgemm(rows, ins, outs, 1.0, x, false, &w.data, false, 0.0, &mut out);
    out
}

/// Attention score matrix for one layer on already-normalized inputs.
fn attention_weights(
    xb: &[f64],
    n: usize,
    d: usize,
    layer: &LayerParams,
    positional: Positional,
    rel_bias: Option<&Tensor>,
) -> Vec<f64> {
    let mut q = linear(xb, n, &layer.wq);
    let mut k = linear(xb, n, &layer.wk);
    if positional == Positional::Rotary {
        rotary_rows(&mut q, n, d, ROTARY_BASE, 0, false);
        rotary_rows(&mut k, n, d, ROTARY_BASE, 0, false);
    }
    let mut scores = vec![0.0; n * n];
    dgemm(n, d, n, 1.0 / (d as f64).sqrt(), &q, false, &k, true, 0.0, &mut scores);
    if let Some(bias) = rel_bias {
        for i in 0..n {
            for j in 0..=i {
                scores[i * n + j] += bias.data[i - j];
            }
        }
    }
    softmax_causal_rows(&mut scores, n);
    scores
}

fn mlp(y: &[f64], n: usize, layer: &LayerParams) -> Vec<f64> {
    let d = layer.w_in.shape[0];
    let mut yb = vec![0.0; y.len()];
    layer_norm_rows(y, n, d, &mut yb);
    let mut h = linear(&yb, n, &layer.w_in);
    for v in h.iter_mut() {
        *v = gelu_scalar(*v);
    }
    linear(&h, n, &layer.w_out)
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Evaluation forward pass (no tape). Returns per-position predictive
/// distributions and, when requested, the residual cache.
pub fn forward(
    params: &TransformerParams,
    seq: &Sequence,
    opts: ForwardOptions,
) -> Result<(Vec<PredictiveDistribution>, Option<ResidualCache>)> {
    let config = &params.config;
    let n = seq.len();
    let (c, d) = (config.c, config.d);
    if n == 0 || n > config.n_max {
        return Err(Error::contract(format!(
            "sequence length {n} outside 1..={}",
            config.n_max
        )));
    }
    // Injection applies only when a ground-truth index accompanies the
    // sequence; out-of-distribution draws evaluate without it.
    if opts.task_index.is_some() && params.task_table.is_none() {
        return Err(Error::contract("task index supplied but injection is not configured"));
    }
    if let (Some(table), Some(k)) = (&params.task_table, opts.task_index) {
        if k >= table.shape[0] {
            return Err(Error::contract("task index out of range"));
        }
    }
    // x0
    let mut x0 = vec![0.0; n * d];
    for (i, row) in x0.chunks_mut(d).enumerate() {
        row.copy_from_slice(&params.we.data[seq.state(i) * d..(seq.state(i) + 1) * d]);
    }
    // layer 1 attention
    let mut x0b = vec![0.0; n * d];
    layer_norm_rows(&x0, n, d, &mut x0b);
    let a1 = attention_weights(
        &x0b,
        n,
        d,
        &params.layers[0],
        config.positional,
        params.rel_bias.as_ref().map(|rb| &rb[0]),
    );
    let v1 = linear(&x0b, n, &params.layers[0].wv);
    let mut att1 = vec![0.0; n * d];
    dgemm(n, n, d, 1.0, &a1, false, &v1, false, 0.0, &mut att1);
    if let Some(ov) = opts.att1_override {
        att1.copy_from_slice(ov);
    }
    let mut y1 = x0.clone();
    add(&mut y1, &att1);
    // MLP1 (+ optional task injection added to its input)
    let mlp1 = if config.mlp1_enabled {
        let mut input = y1.clone();
        if let (Some(table), Some(k)) = (&params.task_table, opts.task_index) {
            for row in input.chunks_mut(d) {
                for (x, t) in row.iter_mut().zip(&table.data[k * d..(k + 1) * d]) {
                    *x += t;
                }
            }
        }
        Some(mlp(&input, n, &params.layers[0]))
    } else {
        None
    };
    let mut x1 = y1.clone();
    if let Some(m) = &mlp1 {
        add(&mut x1, m);
    }
    // layer 2 attention
    let mut x1b = vec![0.0; n * d];
    let inv_std1 = layer_norm_rows(&x1, n, d, &mut x1b);
    let a2 = attention_weights(
        &x1b,
        n,
        d,
        &params.layers[1],
        config.positional,
        params.rel_bias.as_ref().map(|rb| &rb[1]),
    );
    let v2 = linear(&x1b, n, &params.layers[1].wv);
    let mut att2 = vec![0.0; n * d];
    dgemm(n, n, d, 1.0, &a2, false, &v2, false, 0.0, &mut att2);
    // Per-source decomposition of Att2 under the unperturbed LN statistics:
    // token component carries the centering term so the three sum exactly.
    let att2_components = if opts.want_cache {
        let mean_of = |row: &[f64]| row.iter().sum::<f64>() / d as f64;
        let mut comps = [vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]];
        let zero = vec![0.0; n * d];
        let sources: [&Vec<f64>; 3] = [
            &x0,
            &att1,
            match &mlp1 {
                Some(m) => m,
                None => &zero,
            },
        ];
        for (s, src) in sources.iter().enumerate() {
            let mut lnpart = vec![0.0; n * d];
            for i in 0..n {
                let mu = if s == 0 { mean_of(&x1[i * d..(i + 1) * d]) } else { 0.0 };
                for j in 0..d {
                    lnpart[i * d + j] = (src[i * d + j] - mu) * inv_std1[i];
                }
            }
            let vpart = linear(&lnpart, n, &params.layers[1].wv);
            dgemm(n, n, d, 1.0, &a2, false, &vpart, false, 0.0, &mut comps[s]);
        }
        Some(comps)
    } else {
        None
    };
    let att2 = match opts.att2_override {
        Some(ov) => ov.to_vec(),
        None => att2,
    };
    let mut y2 = x1.clone();
    add(&mut y2, &att2);
    // MLP2
    let mlp2 = mlp(&y2, n, &params.layers[1]);
    let mut x2 = y2.clone();
    add(&mut x2, &mlp2);
    // readout
    let logits = linear(&x2, n, &params.wu);
    let outputs = (0..n)
        .map(|i| {
            let row = &logits[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut probs: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= z);
            PredictiveDistribution::new_unchecked(probs)
        })
        .collect();
    let cache = if opts.want_cache {
        Some(ResidualCache {
            x0,
            att1,
            mlp1,
            att2,
            att2_components: att2_components.unwrap(),
            mlp2,
            logits,
            a1,
            a2,
            n,
        })
    } else {
        None
    };
    Ok((outputs, cache))
}

/// Rotary attention score between a query and key separated by `offset`
/// positions: both are rotated by their absolute positions, dotted, and
/// scaled by 1/sqrt(D).
pub fn rotary_scores(q: &[f64], k: &[f64], offset: usize) -> Result<f64> {
    if q.len() != k.len() || q.len() % 2 != 0 {
        return Err(Error::contract("rotary needs equal, even dimensions"));
    }
    let d = q.len();
    let mut qr = q.to_vec();
    let mut kr = k.to_vec();
    rotary_rows(&mut qr, 1, d, ROTARY_BASE, offset, false);
    rotary_rows(&mut kr, 1, d, ROTARY_BASE, 0, false);
    Ok(qr.iter().zip(&kr).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Taped training forward.
// ---------------------------------------------------------------------------

struct TapedParams {
    we: Var,
    layers: Vec<[Var; 5]>,
    wu: Var,
    rel_bias: Option<[Var; 2]>,
    task_table: Option<Var>,
}

fn tape_params(g: &mut Graph, p: &TransformerParams) -> TapedParams {
    TapedParams {
        we: g.param(&p.we),
        layers: p
            .layers
            .iter()
            .map(|l| {
                [g.param(&l.wq), g.param(&l.wk), g.param(&l.wv), g.param(&l.w_in), g.param(&l.w_out)]
            })
            .collect(),
        wu: g.param(&p.wu),
        rel_bias: p.rel_bias.as_ref().map(|rb| [g.param(&rb[0]), g.param(&rb[1])]),
        task_table: p.task_table.as_ref().map(|t| g.param(&t)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LossMode {
    Autoregressive,
    FinalPosition,
}

/// Builds the taped loss for one sequence; targets are the next states, so
/// the sequence must carry one more state than the scored positions.
#[allow(clippy::too_many_arguments)]
fn taped_sequence_loss(
    g: &mut Graph,
    tp: &TapedParams,
    p: &TransformerParams,
    states: &[u16],
    loss_mode: LossMode,
    grad_reweight: Option<f64>,
    task_index: Option<usize>,
) -> Result<Var> {
    let config = &p.config;
    let (d, _c) = (config.d, config.c);
    let n = states.len() - 1;
    let idx: Vec<usize> = states[..n].iter().map(|&s| s as usize).collect();
    let x0 = g.gather_rows(tp.we, &idx)?;
    let attention = |g: &mut Graph,
                     xb: Var,
                     layer: usize,
                     reweight: Option<f64>|
     -> Result<Var> {
        let [wq, wk, wv, _, _] = tp.layers[layer];
        let mut q = g.matmul(xb, wq)?;
        let mut k = g.matmul(xb, wk)?;
        if config.positional == Positional::Rotary {
            q = g.rotary(q, ROTARY_BASE, 0)?;
            k = g.rotary(k, ROTARY_BASE, 0)?;
        }
        let qk = g.matmul_t(q, k, false, true)?;
        let mut scores = g.scale(qk, 1.0 / (d as f64).sqrt())?;
        if let Some(rb) = &tp.rel_bias {
            scores = g.add_rel_bias(scores, rb[layer])?;
        }
        let mut a = g.softmax_causal(scores)?;
        if let Some(w) = reweight {
            a = g.grad_scale_subdiag(a, w)?;
        }
        let v = g.matmul(xb, wv)?;
        g.matmul(a, v)
    };
    let mlp_block = |g: &mut Graph, y: Var, layer: usize| -> Result<Var> {
        let [_, _, _, w_in, w_out] = tp.layers[layer];
        let yb = g.layer_norm(y)?;
        let h = g.matmul(yb, w_in)?;
        let ha = g.gelu(h)?;
        g.matmul(ha, w_out)
    };
    let x0b = g.layer_norm(x0)?;
    let att1 = attention(g, x0b, 0, grad_reweight)?;
    let y1 = g.add(x0, att1)?;
    let x1 = if config.mlp1_enabled {
        let mlp1_input = match (&tp.task_table, task_index) {
            (Some(table), Some(k)) => {
                let row = g.gather_rows(*table, &[k])?;
                g.add_row(y1, row)?
            }
            (Some(_), None) => {
                return Err(Error::contract("task injection enabled but sequence has no task index"))
            }
            _ => y1,
        };
        let m1 = mlp_block(g, mlp1_input, 0)?;
        g.add(y1, m1)?
    } else {
        y1
    };
    let x1b = g.layer_norm(x1)?;
    let att2 = attention(g, x1b, 1, None)?;
    let y2 = g.add(x1, att2)?;
    let m2 = mlp_block(g, y2, 1)?;
    let x2 = g.add(y2, m2)?;
    let logits = g.matmul(x2, tp.wu)?;
    match loss_mode {
        LossMode::Autoregressive => {
            let targets: Vec<usize> = states[1..].iter().map(|&s| s as usize).collect();
            g.cross_entropy(logits, &targets)
        }
        LossMode::FinalPosition => {
            let last = g.gather_rows(logits, &[n - 1])?;
            g.cross_entropy(last, &[states[n] as usize])
        }
    }
}

/// Loss and parameter gradients over a slice of sequences (mean over the
/// slice). Gradient order matches `TransformerParams::to_param_set`.
pub fn batch_loss_and_grads(
    params: &TransformerParams,
    seqs: &[Sequence],
    loss_mode: LossMode,
    grad_reweight: Option<f64>,
    use_task_injection: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let tp = tape_params(&mut g, params);
    let mut losses = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let ti = if use_task_injection { seq.task_index } else { None };
        losses.push(taped_sequence_loss(
            &mut g,
            &tp,
            params,
            &seq.states,
            loss_mode,
            grad_reweight,
            ti,
        )?);
    }
    // Mean over the slice.
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let mean = g.scale(total, 1.0 / seqs.len() as f64)?;
    let loss = g.value(mean)[0];
    let mut grads = g.backward(mean)?;
    let mut order: Vec<Var> = vec![tp.we];
    for l in &tp.layers {
        order.extend_from_slice(l);
    }
    order.push(tp.wu);
    if let Some(rb) = &tp.rel_bias {
        order.extend_from_slice(rb);
    }
    if let Some(tt) = &tp.task_table {
        order.push(*tt);
    }
    let out = order
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();
    Ok((loss, out))
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Optimizer {
    AdamW { lr: f64, betas: (f64, f64), weight_decay: f64 },
    Sgd { lr: f64, momentum: f64 },
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub n_max: usize,
    pub batch: usize,
    pub iters: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub grad_reweight: Option<f64>,
    pub task_injection: bool,
    /// Evaluation/checkpoint schedule: logarithmically spaced iterations.
    pub checkpoints_per_decade: usize,
    /// Sequences per evaluation batch (train and OOD).
    pub eval_batch: usize,
}

impl TrainConfig {
    pub fn new(n_max: usize, batch: usize, iters: usize, seed: u64) -> Self {
        TrainConfig {
            n_max,
            batch,
            iters,
            optimizer: Optimizer::AdamW { lr: 1e-3, betas: (0.9, 0.95), weight_decay: 1e-3 },
            seed,
            loss_mode: LossMode::Autoregressive,
            grad_reweight: None,
            task_injection: false,
            checkpoints_per_decade: 20,
            eval_batch: 256,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    pub loss_train: f64,
    pub loss_gen: f64,
    pub phi_delta1: f64,
    pub phi_beta2: f64,
    pub n_a1: f64,
    pub n_a2: f64,
    pub wall_time: f64,
}

pub struct TrainOutput {
    pub params: TransformerParams,
    pub metrics: Vec<MetricRow>,
    /// Logarithmically spaced parameter snapshots (iteration, params).
    pub checkpoints: Vec<(usize, TransformerParams)>,
}

/// Logarithmic checkpoint schedule: `per_decade` points per decade starting
/// at iteration 1, deduplicated, always including the final iteration.
pub fn checkpoint_schedule(iters: usize, per_decade: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last = 0usize;
    let mut k = 0usize;
    loop {
        let it = (10f64).powf(k as f64 / per_decade as f64).round() as usize;
        if it >= iters {
            break;
        }
        if it > last {
            out.push(it);
            last = it;
        }
        k += 1;
    }
    if iters > 0 {
        out.push(iters);
    }
    out
}

/// Trains the transformer autoregressively (or at the final position for
/// the non-autoregressive variant). Aborts on non-finite loss, returning a
/// diagnostic checkpoint of the failing parameters in the error message
/// path.
pub fn train(
    params: &mut TransformerParams,
    tasks: &TaskSet,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    if config.task_injection != params.task_table.is_some() {
        return Err(Error::contract("task-injection flag does not match parameter table"));
    }
    let mut ps = params.to_param_set();
    let mut adamw = match config.optimizer {
        Optimizer::AdamW { lr, betas, weight_decay } => Some(AdamW::new(lr, betas, weight_decay)),
        Optimizer::Sgd { .. } => None,
    };
    let mut sgd = match config.optimizer {
        Optimizer::Sgd { lr, momentum } => Some(Sgd::new(lr, momentum)),
        Optimizer::AdamW { .. } => None,
    };
    let schedule = checkpoint_schedule(config.iters, config.checkpoints_per_decade);
    let mut next_ckpt = 0usize;
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    // Fixed evaluation batches.
    let eval_train = sample_training_batch(tasks, config.n_max + 1, config.eval_batch, config.seed ^ 0xe7a1, 1_000_000)?;
    let eval_ood: Vec<Sequence> = crate::markov::sample_ood_batch(
        tasks.c(),
        tasks.alpha(),
        config.n_max + 1,
        config.eval_batch,
        config.seed ^ 0xe7a1,
        2_000_000,
    )?
    .into_iter()
    .map(|(_, s)| s)
    .collect();
    let start = std::time::Instant::now();
    let chunks = 8usize.min(config.batch);
    for iter in 0..config.iters {
        let current = TransformerParams::from_param_set(params.config.clone(), &ps)?;
        // Evaluate on schedule (model state before this iteration's update).
        if next_ckpt < schedule.len() && (iter + 1) == schedule[next_ckpt] {
            let row = evaluate(&current, &eval_train, &eval_ood, iter + 1, start.elapsed().as_secs_f64(), config)?;
            metrics.push(row);
            checkpoints.push((iter + 1, current.clone()));
            next_ckpt += 1;
        }
        let batch = sample_training_batch(tasks, config.n_max + 1, config.batch, config.seed, iter as u64)?;
        let per_chunk = (config.batch + chunks - 1) / chunks;
        let parts: Vec<Result<(f64, Vec<Vec<f64>>, usize)>> = (0..chunks)
            .into_par_iter()
            .map(|ci| {
                let lo = ci * per_chunk;
                let hi = ((ci + 1) * per_chunk).min(config.batch);
                if lo >= hi {
                    return Ok((0.0, Vec::new(), 0));
                }
                let (loss, grads) = batch_loss_and_grads(
                    &current,
                    &batch[lo..hi],
                    config.loss_mode,
                    config.grad_reweight,
                    config.task_injection,
                )?;
                Ok((loss * (hi - lo) as f64, grads, hi - lo))
            })
            .collect();
        let mut total_loss = 0.0;
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for part in parts {
            let (l, g, count) = part?;
            if count == 0 {
                continue;
            }
            total_loss += l;
            if grads.is_empty() {
                grads = g.into_iter().map(|v| v.iter().map(|x| x * count as f64).collect()).collect();
            } else {
                for (acc, gv) in grads.iter_mut().zip(&g) {
                    for (a, b) in acc.iter_mut().zip(gv) {
                        *a += b * count as f64;
                    }
                }
            }
        }
        let scale = 1.0 / config.batch as f64;
        total_loss *= scale;
        if !total_loss.is_finite() {
            // Diagnostic checkpoint for post-mortem before aborting.
            checkpoints.push((iter, current));
            return Err(Error::numeric(format!("non-finite loss at iteration {iter}")));
        }
        for gv in grads.iter_mut() {
            for v in gv.iter_mut() {
                *v *= scale;
            }
        }
        let grads_opt: Vec<Option<Vec<f64>>> = grads.into_iter().map(Some).collect();
        if let Some(opt) = adamw.as_mut() {
            opt.step(&mut ps, &grads_opt);
        } else if let Some(opt) = sgd.as_mut() {
            opt.step(&mut ps, &grads_opt);
        }
    }
    *params = TransformerParams::from_param_set(params.config.clone(), &ps)?;
    Ok(TrainOutput { params: params.clone(), metrics, checkpoints })
}

fn evaluate(
    params: &TransformerParams,
    eval_train: &[Sequence],
    eval_ood: &[Sequence],
    iter: usize,
    wall_time: f64,
    config: &TrainConfig,
) -> Result<MetricRow> {
    let mut loss_train = 0.0;
    let mut loss_gen = 0.0;
    let mut phi_delta1 = 0.0;
    let mut phi_beta2 = 0.0;
    let mut ent1 = 0.0;
    let mut ent2 = 0.0;
    let results: Vec<Result<(f64, f64, f64, f64, f64, f64)>> = eval_train
        .par_iter()
        .zip(eval_ood.par_iter())
        .map(|(tr, ood)| {
            // Sequences carry one extra state for targets; the model scores
            // the first n_max positions.
            let n = params.config.n_max;
            let scored_tr = Sequence { states: tr.states[..n].to_vec(), task_index: tr.task_index };
            let ti = if config.task_injection { tr.task_index } else { None };
            let (out_tr, cache) = forward(
                params,
                &scored_tr,
                ForwardOptions { want_cache: true, task_index: ti, ..Default::default() },
            )?;
            let lt = crate::bayes::autoregressive_loss_of_outputs(&out_tr, tr)?.nats;
            // OOD sequences carry no task index; injection cannot apply.
            let scored_ood = Sequence { states: ood.states[..n].to_vec(), task_index: None };
            let (out_ood, _) = forward(params, &scored_ood, ForwardOptions::default())?;
            let lg = crate::bayes::autoregressive_loss_of_outputs(&out_ood, ood)?.nats;
            let cache = cache.unwrap();
            let (pd, pb, e1, e2) = crate::diagnostics::attention_readouts(&cache, &scored_tr);
            Ok((lt, lg, pd, pb, e1, e2))
        })
        .collect();
    let m = eval_train.len() as f64;
    for r in results {
        let (lt, lg, pd, pb, e1, e2) = r?;
        loss_train += lt / m;
        loss_gen += lg / m;
        phi_delta1 += pd / m;
        phi_beta2 += pb / m;
        ent1 += e1 / m;
        ent2 += e2 / m;
    }
    Ok(MetricRow {
        iter,
        loss_train,
        loss_gen,
        phi_delta1,
        phi_beta2,
        n_a1: ent1.exp(),
        n_a2: ent2.exp(),
        wall_time,
    })
}
