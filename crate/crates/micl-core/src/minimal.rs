//! The encoder-pool-decoder minimal memorization network: a frozen random
//! embedding, MLP1 over neighboring-pair concatenations, a running-mean
//! pool forming the task vector, and MLP2 decoding (current state, task
//! vector) into next-state logits. Includes the K2-hat binary-search
//! procedure on the training-loss margin against the 2-Gen predictor.

use rayon::prelude::*;

use crate::bayes::{autoregressive_loss, PredictiveDistribution, PredictorKind};
use crate::error::{Error, Result};
use crate::markov::{sample_training_batch, Sequence, TaskSet};
use crate::optim::{AdamW, ParamSet};
use crate::streams;
use crate::tensor::{dgemm, gelu_scalar, Graph, Tensor, Var};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MinimalConfig {
    pub c: usize,
    pub d_emb: usize,
    pub d_phi: usize,
    /// Hidden layers in the encoder MLP (1 or 2).
    pub mlp1_layers: usize,
    /// Hidden layers in the decoder MLP (1 or 2); the reference model uses 2.
    pub mlp2_layers: usize,
    pub n_max: usize,
    /// Hidden width multipliers (hidden = mult * input width).
    pub hidden1_mult: usize,
    pub hidden2_mult: usize,
}

impl MinimalConfig {
    pub fn reference(c: usize, d_phi: usize, n_max: usize) -> Self {
        MinimalConfig {
            c,
            d_emb: 64,
            d_phi,
            mlp1_layers: 1,
            mlp2_layers: 2,
            n_max,
            hidden1_mult: 4,
            hidden2_mult: 4,
        }
    }

    /// Smaller desk-scale layout for CPU budgets: narrow frozen embedding,
    /// 4x encoder hidden (pair identification needs the width), 2x decoder.
    pub fn desk(c: usize, d_phi: usize, n_max: usize) -> Self {
        MinimalConfig {
            c,
            d_emb: 16,
            d_phi,
            mlp1_layers: 1,
            mlp2_layers: 2,
            n_max,
            hidden1_mult: 4,
            hidden2_mult: 2,
        }
    }

    pub fn mlp1_hidden(&self) -> usize {
        self.hidden1_mult * (2 * self.d_emb)
    }

    pub fn mlp2_hidden(&self) -> usize {
        self.hidden2_mult * (self.d_emb + self.d_phi)
    }
}

/// Parameters; `we` is frozen at its Gaussian init and never trained.
#[derive(Debug, Clone)]
pub struct MinimalParams {
    pub config: MinimalConfig,
    pub we: Tensor,
    /// Learned stand-in for the previous state at position 1.
    pub start: Tensor,
    /// Encoder weight stack: [2D -> h], (h -> h)?, [h -> d_phi].
    pub mlp1: Vec<Tensor>,
    /// Decoder stack: [D + d_phi -> h], (h -> h)?, [h -> C].
    pub mlp2: Vec<Tensor>,
}

impl MinimalParams {
    pub fn init(config: MinimalConfig, seed: u64) -> Self {
        let mut rng = streams::init_rng(seed ^ 0x3141);
        let std_of = |ins: usize| (1.0 / ins as f64).sqrt();
        let we = Tensor::randn(&[config.c, config.d_emb], std_of(config.d_emb), &mut rng);
        let start = Tensor::randn(&[1, config.d_emb], std_of(config.d_emb), &mut rng);
        let stack = |dims: &[usize], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Tensor> {
            dims.windows(2).map(|w| Tensor::randn(&[w[0], w[1]], std_of(w[0]), rng)).collect()
        };
        let h1 = config.mlp1_hidden();
        let mut dims1 = vec![2 * config.d_emb, h1];
        for _ in 1..config.mlp1_layers {
            dims1.push(h1);
        }
        dims1.push(config.d_phi);
        let h2 = config.mlp2_hidden();
        let mut dims2 = vec![config.d_emb + config.d_phi, h2];
        for _ in 1..config.mlp2_layers {
            dims2.push(h2);
        }
        dims2.push(config.c);
        let mlp1 = stack(&dims1, &mut rng);
        let mlp2 = stack(&dims2, &mut rng);
        MinimalParams { config, we, start, mlp1, mlp2 }
    }

    /// Trainable tensors only; the frozen embedding stays outside.
    pub fn to_param_set(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("start", self.start.clone());
        for (i, t) in self.mlp1.iter().enumerate() {
            ps.push(format!("mlp1.{i}"), t.clone());
        }
        for (i, t) in self.mlp2.iter().enumerate() {
            ps.push(format!("mlp2.{i}"), t.clone());
        }
        ps
    }

    pub fn load_param_set(&mut self, ps: &ParamSet) -> Result<()> {
        let get = |name: &str| -> Result<Tensor> {
            ps.get(name).cloned().ok_or_else(|| Error::contract(format!("missing {name}")))
        };
        self.start = get("start")?;
        for i in 0..self.mlp1.len() {
            self.mlp1[i] = get(&format!("mlp1.{i}"))?;
        }
        for i in 0..self.mlp2.len() {
            self.mlp2[i] = get(&format!("mlp2.{i}"))?;
        }
        Ok(())
    }
}

fn mlp_eval(stack: &[Tensor], x: &[f64], rows: usize) -> Vec<f64> {
    let mut h = x.to_vec();
    for (li, w) in stack.iter().enumerate() {
        let (ins, outs) = (w.shape[0], w.shape[1]);
        let mut out = vec![0.0; rows * outs];
        dgemm(rows, ins, outs, 1.0, &h, false, &w.data, false, 0.0, &mut out);
        if li + 1 < stack.len() {
            for v in out.iter_mut() {
                *v = gelu_scalar(*v);
            }
        }
        h = out;
    }
    h
}

/// Per-position predictions plus, optionally, the pooled task vectors.
pub fn forward(
    params: &MinimalParams,
    seq: &Sequence,
    phi_override: Option<&[f64]>,
) -> Result<(Vec<PredictiveDistribution>, Vec<f64>)> {
    let config = &params.config;
    let (c, d, dp) = (config.c, config.d_emb, config.d_phi);
    let n = seq.len();
    if n == 0 || n > config.n_max {
        return Err(Error::contract("sequence length out of range"));
    }
    // Pair inputs: current one-hot embedding concat previous (start at i=0).
    let mut pairs = vec![0.0; n * 2 * d];
    for i in 0..n {
        let cur = &params.we.data[seq.state(i) * d..(seq.state(i) + 1) * d];
        pairs[i * 2 * d..i * 2 * d + d].copy_from_slice(cur);
        let prev: &[f64] = if i == 0 {
            &params.start.data
        } else {
            &params.we.data[seq.state(i - 1) * d..(seq.state(i - 1) + 1) * d]
        };
        pairs[i * 2 * d + d..(i + 1) * 2 * d].copy_from_slice(prev);
    }
    let lambda = mlp_eval(&params.mlp1, &pairs, n);
    // Running mean over the first n pair embeddings.
    let mut phi = vec![0.0; n * dp];
    let mut acc = vec![0.0; dp];
    for i in 0..n {
        for j in 0..dp {
            acc[j] += lambda[i * dp + j];
            phi[i * dp + j] = acc[j] / (i + 1) as f64;
        }
    }
    if let Some(ov) = phi_override {
        if ov.len() != phi.len() {
            return Err(Error::contract("phi override shape mismatch"));
        }
        phi.copy_from_slice(ov);
    }
    // Decoder input: current embedding concat phi.
    let mut dec = vec![0.0; n * (d + dp)];
    for i in 0..n {
        let cur = &params.we.data[seq.state(i) * d..(seq.state(i) + 1) * d];
        dec[i * (d + dp)..i * (d + dp) + d].copy_from_slice(cur);
        dec[i * (d + dp) + d..(i + 1) * (d + dp)].copy_from_slice(&phi[i * dp..(i + 1) * dp]);
    }
    let logits = mlp_eval(&params.mlp2, &dec, n);
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
    Ok((outputs, phi))
}

/// Taped batched loss: every sequence contributes all its autoregressive
/// positions. Returns gradients ordered as in `to_param_set`.
pub fn batch_loss_and_grads(
    params: &MinimalParams,
    seqs: &[Sequence],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let config = &params.config;
    let (d, dp) = (config.d_emb, config.d_phi);
    let n = seqs[0].len() - 1;
    if seqs.iter().any(|s| s.len() != n + 1) {
        return Err(Error::contract("batch sequences must share length"));
    }
    let b = seqs.len();
    let mut g = Graph::new();
    let we = g.constant(&params.we);
    let start = g.param(&params.start);
    let table = g.concat_rows(&[we, start])?;
    let mlp1: Vec<Var> = params.mlp1.iter().map(|t| g.param(t)).collect();
    let mlp2: Vec<Var> = params.mlp2.iter().map(|t| g.param(t)).collect();
    //

    let start_row = config.c;
    let mut cur_idx = Vec::with_capacity(b * n);
    let mut prev_idx = Vec::with_capacity(b * n);
    let mut targets = Vec::with_capacity(b * n);
    for seq in seqs {
        for i in 0..n {
            cur_idx.push(seq.state(i));
            prev_idx.push(if i == 0 { start_row } else { seq.state(i - 1) });
            targets.push(seq.state(i + 1));
        }
    }
    let cur = g.gather_rows(table, &cur_idx)?;
    let prev = g.gather_rows(table, &prev_idx)?;
    let pairs = g.concat_cols(&[cur, prev])?;
    let mut h = pairs;
    for (li, w) in mlp1.iter().enumerate() {
        h = g.matmul(h, *w)?;
        if li + 1 < mlp1.len() {
            h = g.gelu(h)?;
        }
    }
    let phi = g.prefix_mean(h, n)?;
    let dec = g.concat_cols(&[cur, phi])?;
    let mut z = dec;
    for (li, w) in mlp2.iter().enumerate() {
        z = g.matmul(z, *w)?;
        if li + 1 < mlp2.len() {
            z = g.gelu(z)?;
        }
    }
    let loss = g.cross_entropy(z, &targets)?;
    let value = g.value(loss)[0];
    let mut grads = g.backward(loss)?;
    let mut order: Vec<Var> = vec![start];
    order.extend(&mlp1);
    order.extend(&mlp2);
    let out = order
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();
    let _ = (d, dp);
    Ok((value, out))
}

/// Where training sequences come from: a frozen task set or fresh matrices
/// every batch (the K -> infinity regime).
#[derive(Debug, Clone)]
pub enum TaskData {
    Fixed(std::sync::Arc<TaskSet>),
    Fresh { c: usize, alpha: f64 },
}

impl TaskData {
    fn sample(&self, n: usize, count: usize, seed: u64, batch_id: u64) -> Result<Vec<Sequence>> {
        match self {
            TaskData::Fixed(tasks) => sample_training_batch(tasks, n, count, seed, batch_id),
            TaskData::Fresh { c, alpha } => Ok(crate::markov::sample_ood_batch(
                *c,
                *alpha,
                n,
                count,
                seed,
                batch_id,
            )?
            .into_iter()
            .map(|(_, s)| s)
            .collect()),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MinimalTrainConfig {
    pub batch: usize,
    pub iters: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl MinimalTrainConfig {
    pub fn new(iters: usize, seed: u64) -> Self {
        MinimalTrainConfig {
            batch: 64,
            iters,
            lr: 1e-3,
            betas: (0.9, 0.95),
            weight_decay: 1e-3,
            seed,
            eval_every: 50,
            eval_batch: 128,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MinimalMetricRow {
    pub iter: usize,
    pub loss_train: f64,
    pub loss_gen: f64,
    /// Mean autoregressive 2-Gen predictor loss on the train evaluation batch.
    pub l2gen_train: f64,
    /// Same baseline on the fresh-ensemble batch.
    pub l2gen_gen: f64,
}

pub struct MinimalTrainOutput {
    pub params: MinimalParams,
    pub metrics: Vec<MinimalMetricRow>,
}

/// Autoregressive AdamW training with the same trainer contract as the
/// transformer: deterministic batches, chunk-ordered gradient reduction,
/// non-finite-loss abort.
pub fn train(
    params: &mut MinimalParams,
    data: &TaskData,
    config: &MinimalTrainConfig,
) -> Result<MinimalTrainOutput> {
    let n_max = params.config.n_max;
    let c = params.config.c;
    let mut ps = params.to_param_set();
    let mut opt = AdamW::new(config.lr, config.betas, config.weight_decay);
    let eval_train = data.sample(n_max + 1, config.eval_batch, config.seed ^ 0x11, 9_000_000)?;
    let eval_gen: Vec<Sequence> = crate::markov::sample_ood_batch(
        c,
        match data {
            TaskData::Fixed(t) => t.alpha(),
            TaskData::Fresh { alpha, .. } => *alpha,
        },
        n_max + 1,
        config.eval_batch,
        config.seed ^ 0x11,
        9_500_000,
    )?
    .into_iter()
    .map(|(_, s)| s)
    .collect();
    let baseline = |batch: &[Sequence]| -> Result<f64> {
        let losses: Vec<f64> = batch
            .par_iter()
            .map(|s| Ok(autoregressive_loss(&PredictorKind::TwoGen, s, c)?.nats))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    };
    let l2gen_train = baseline(&eval_train)?;
    let l2gen_gen = baseline(&eval_gen)?;
    let mut metrics = Vec::new();
    let chunks = 4usize.min(config.batch);
    for iter in 0..config.iters {
        let mut current = params.clone();
        current.load_param_set(&ps)?;
        if iter % config.eval_every == 0 || iter + 1 == config.iters {
            let eval_loss = |batch: &[Sequence]| -> Result<f64> {
                let losses: Vec<f64> = batch
                    .par_iter()
                    .map(|s| {
                        let scored = Sequence {
                            states: s.states[..n_max].to_vec(),
                            task_index: s.task_index,
                        };
                        let (out, _) = forward(&current, &scored, None)?;
                        Ok(crate::bayes::autoregressive_loss_of_outputs(&out, s)?.nats)
                    })
                    .collect::<Result<_>>()?;
                Ok(losses.iter().sum::<f64>() / losses.len() as f64)
            };
            metrics.push(MinimalMetricRow {
                iter,
                loss_train: eval_loss(&eval_train)?,
                loss_gen: eval_loss(&eval_gen)?,
                l2gen_train,
                l2gen_gen,
            });
        }
        let batch = data.sample(n_max + 1, config.batch, config.seed, iter as u64)?;
        let per_chunk = (config.batch + chunks - 1) / chunks;
        let parts: Vec<Result<(f64, Vec<Vec<f64>>, usize)>> = (0..chunks)
            .into_par_iter()
            .map(|ci| {
                let lo = ci * per_chunk;
                let hi = ((ci + 1) * per_chunk).min(config.batch);
                if lo >= hi {
                    return Ok((0.0, Vec::new(), 0));
                }
                let (l, gs) = batch_loss_and_grads(&current, &batch[lo..hi])?;
                Ok((l * (hi - lo) as f64, gs, hi - lo))
            })
            .collect();
        let mut total_loss = 0.0;
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for part in parts {
            let (l, gs, count) = part?;
            if count == 0 {
                continue;
            }
            total_loss += l;
            if grads.is_empty() {
                grads = gs.into_iter().map(|v| v.iter().map(|x| x * count as f64).collect()).collect();
            } else {
                for (acc, gv) in grads.iter_mut().zip(&gs) {
                    for (a, b) in acc.iter_mut().zip(gv) {
                        *a += b * count as f64;
                    }
                }
            }
        }
        total_loss /= config.batch as f64;
        if !total_loss.is_finite() {
            return Err(Error::numeric(format!("non-finite minimal loss at iteration {iter}")));
        }
        let grads_opt: Vec<Option<Vec<f64>>> = grads
            .into_iter()
            .map(|mut v| {
                v.iter_mut().for_each(|x| *x /= config.batch as f64);
                Some(v)
            })
            .collect();
        opt.step(&mut ps, &grads_opt);
    }
    params.load_param_set(&ps)?;
    Ok(MinimalTrainOutput { params: params.clone(), metrics })
}

/// K2-hat binary search: a diversity K counts as memorizable when the mean
/// margin <L_train - L_2Gen> over the trailing evaluation window is
/// negative.
#[derive(Debug, Clone, serde::Serialize)]
pub struct K2Probe {
    pub k: usize,
    pub margin: f64,
    pub memorized: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct K2Result {
    pub bracket: (usize, usize),
    pub probes: Vec<K2Probe>,
    pub warning: Option<String>,
}

#[allow(clippy::too_many_arguments)]
pub fn k2_search(
    config: &MinimalConfig,
    train_config: &MinimalTrainConfig,
    alpha: f64,
    task_seed: u64,
    k_lo: usize,
    k_hi: usize,
    margin_window: usize,
    max_probes: usize,
) -> Result<K2Result> {
    if k_lo >= k_hi {
        return Err(Error::parameter("need k_lo < k_hi"));
    }
    let mut probes: Vec<K2Probe> = Vec::new();
    let probe = |k: usize, probes: &mut Vec<K2Probe>| -> Result<bool> {
        let tasks = std::sync::Arc::new(crate::markov::build_task_set(task_seed, k, config.c, alpha)?);
        let mut params = MinimalParams::init(config.clone(), train_config.seed);
        let out = train(&mut params, &TaskData::Fixed(tasks), train_config)?;
        let rows = &out.metrics;
        let tail = rows.len().saturating_sub(margin_window);
        let margin = rows[tail..]
            .iter()
            .map(|r| r.loss_train - r.l2gen_train)
            .sum::<f64>()
            / rows[tail..].len() as f64;
        let memorized = margin < 0.0;
        probes.push(K2Probe { k, margin, memorized });
        Ok(memorized)
    };
    let mut lo = k_lo;
    let mut hi = k_hi;
    if !probe(lo, &mut probes)? {
        // Even the smallest diversity is not memorized: collapsed bracket.
        return Ok(K2Result { bracket: (lo, lo), probes, warning: Some("lower edge not memorized".into()) });
    }
    if probe(hi, &mut probes)? {
        return Ok(K2Result { bracket: (hi, hi), probes, warning: Some("upper edge still memorized".into()) });
    }
    while hi > 2 * lo && probes.len() < max_probes {
        let mid = ((lo as f64 * hi as f64).sqrt().round() as usize).clamp(lo + 1, hi - 1);
        if probe(mid, &mut probes)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Consistency check: memorized probes should all sit below unmemorized
    // ones; report the widest consistent bracket otherwise.
    let max_mem = probes.iter().filter(|p| p.memorized).map(|p| p.k).max();
    let min_unmem = probes.iter().filter(|p| !p.memorized).map(|p| p.k).min();
    let warning = match (max_mem, min_unmem) {
        (Some(a), Some(b)) if a > b => Some(format!(
            "non-monotone probes: memorized at {a} but not at {b}; bracket widened"
        )),
        _ => None,
    };
    let bracket = match (max_mem, min_unmem) {
        (Some(a), Some(b)) => (a.min(b), a.max(b)),
        _ => (lo, hi),
    };
    Ok(K2Result { bracket, probes, warning })
}
