//! Circuit tracing for the two-layer transformer: the path-expanded 23-edge
//! graph, mean-ablation importance maps, task-vector activation patching,
//! and task-vector mutual-information estimation.
//!
//! The forward pass here is the decomposed one: every source vector of
//! Table-form (token, attention outputs split by residual source, MLP
//! outputs) is materialized explicitly, so the edge decomposition is exact
//! by construction. Layer norms inside perturbed passes reuse the statistics
//! of the unperturbed input.

use std::sync::Arc;

use rayon::prelude::*;

use crate::bayes::{kl_divergence, MemOrder, MemPosterior, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::markov::{Sequence, TaskSet};
use crate::tensor::{dgemm, gelu_scalar, rotary_rows, softmax_causal_rows, Tensor, LAYER_NORM_EPS};
use crate::transformer::{Positional, TransformerParams, ROTARY_BASE};

// ---------------------------------------------------------------------------
// Edge graph.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum Source {
    Token,
    A1Token,
    Mlp1,
    A2Token,
    A2A1,
    A2Mlp1,
    Mlp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum Target {
    A1Q,
    A1K,
    Mlp1,
    A2Q,
    A2K,
    Mlp2,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub struct EdgeId {
    pub source: Source,
    pub target: Target,
}

impl EdgeId {
    pub fn new(source: Source, target: Target) -> Self {
        EdgeId { source, target }
    }

    pub fn label(&self) -> String {
        format!("{:?}->{:?}", self.source, self.target)
    }
}

/// The residual-stream sources visible to each target.
pub fn sources_for(target: Target) -> &'static [Source] {
    use Source::*;
    match target {
        Target::A1Q | Target::A1K => &[Token],
        Target::Mlp1 => &[Token, A1Token],
        Target::A2Q | Target::A2K => &[Token, A1Token, Mlp1],
        Target::Mlp2 => &[Token, A1Token, Mlp1, A2Token, A2A1, A2Mlp1],
        Target::Linear => &[Token, A1Token, Mlp1, A2Token, A2A1, A2Mlp1, Mlp2],
    }
}

pub fn is_valid(edge: EdgeId) -> bool {
    sources_for(edge.target).contains(&edge.source)
}

/// All 23 edges of the path-expanded graph, in deterministic order.
pub fn enumerate_edges() -> Vec<EdgeId> {
    use Target::*;
    [A1Q, A1K, Mlp1, A2Q, A2K, Mlp2, Linear]
        .into_iter()
        .flat_map(|t| sources_for(t).iter().map(move |&s| EdgeId::new(s, t)))
        .collect()
}

// ---------------------------------------------------------------------------
// Decomposed forward.
// ---------------------------------------------------------------------------

struct RowStats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

fn row_stats(x: &[f64], n: usize, d: usize) -> RowStats {
    let mut mean = vec![0.0; n];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let m = row.iter().sum::<f64>() / d as f64;
        let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d as f64;
        mean[i] = m;
        inv_std[i] = 1.0 / (v + LAYER_NORM_EPS).sqrt();
    }
    RowStats { mean, inv_std }
}

fn ln_with(x: &[f64], n: usize, d: usize, stats: &RowStats) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] = (x[i * d + j] - stats.mean[i]) * stats.inv_std[i];
        }
    }
    out
}

fn linear(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let (ins, outs) = (w.shape[0], w.shape[1]);
    let mut out = vec![0.0; rows * outs];
    dgemm(rows, ins, outs, 1.0, x, false, &w.data, false, 0.0, &mut out);
    out
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn sub(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x -= y;
    }
}

/// Attention weights from explicit (possibly different) query and key
/// streams, already layer-normalized.
fn attention_from(
    qsrc: &[f64],
    ksrc: &[f64],
    n: usize,
    d: usize,
    wq: &Tensor,
    wk: &Tensor,
    positional: Positional,
    rel_bias: Option<&Tensor>,
) -> Vec<f64> {
    let mut q = linear(qsrc, n, wq);
    let mut k = linear(ksrc, n, wk);
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

fn mlp_with_stats(y: &[f64], n: usize, stats: &RowStats, w_in: &Tensor, w_out: &Tensor) -> Vec<f64> {
    let d = w_in.shape[0];
    let yb = ln_with(y, n, d, stats);
    let mut h = linear(&yb, n, w_in);
    for v in h.iter_mut() {
        *v = gelu_scalar(*v);
    }
    linear(&h, n, w_out)
}

/// Everything one clean decomposed pass produces.
pub struct TraceCache {
    pub n: usize,
    /// Source vectors, keyed in `Source` declaration order: token, A1 out,
    /// MLP1 out, the three Att2 components, MLP2 out. Each is [N, D].
    pub sources: [Vec<f64>; 7],
    pub outputs: Vec<PredictiveDistribution>,
    x0_stats: RowStats,
    y1_stats: RowStats,
    x1_stats: RowStats,
    y2_stats: RowStats,
    x0b: Vec<f64>,
    x1b: Vec<f64>,
    y1: Vec<f64>,
    y2: Vec<f64>,
    x2: Vec<f64>,
    a2: Vec<f64>,
}

fn source_index(s: Source) -> usize {
    match s {
        Source::Token => 0,
        Source::A1Token => 1,
        Source::Mlp1 => 2,
        Source::A2Token => 3,
        Source::A2A1 => 4,
        Source::A2Mlp1 => 5,
        Source::Mlp2 => 6,
    }
}

fn softmax_rows_to_outputs(logits: &[f64], n: usize, c: usize) -> Vec<PredictiveDistribution> {
    (0..n)
        .map(|i| {
            let row = &logits[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut probs: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= z);
            PredictiveDistribution::new_unchecked(probs)
        })
        .collect()
}

/// Clean decomposed forward; the per-target source sums reproduce the plain
/// forward pass exactly.
pub fn decomposed_forward(params: &TransformerParams, seq: &Sequence) -> Result<TraceCache> {
    let config = &params.config;
    let (c, d) = (config.c, config.d);
    let n = seq.len();
    if n == 0 || n > config.n_max {
        return Err(Error::contract("sequence length out of range"));
    }
    if !config.mlp1_enabled {
        return Err(Error::contract("tracing requires the full two-layer variant"));
    }
    let mut x0 = vec![0.0; n * d];
    for (i, row) in x0.chunks_mut(d).enumerate() {
        row.copy_from_slice(&params.we.data[seq.state(i) * d..(seq.state(i) + 1) * d]);
    }
    let x0_stats = row_stats(&x0, n, d);
    let x0b = ln_with(&x0, n, d, &x0_stats);
    let rb = |l: usize| params.rel_bias.as_ref().map(|r| &r[l]);
    let a1 = attention_from(&x0b, &x0b, n, d, &params.layers[0].wq, &params.layers[0].wk, config.positional, rb(0));
    let v1 = linear(&x0b, n, &params.layers[0].wv);
    let mut att1 = vec![0.0; n * d];
    dgemm(n, n, d, 1.0, &a1, false, &v1, false, 0.0, &mut att1);
    let mut y1 = x0.clone();
    add(&mut y1, &att1);
    let y1_stats = row_stats(&y1, n, d);
    let mlp1 = mlp_with_stats(&y1, n, &y1_stats, &params.layers[0].w_in, &params.layers[0].w_out);
    let mut x1 = y1.clone();
    add(&mut x1, &mlp1);
    let x1_stats = row_stats(&x1, n, d);
    let x1b = ln_with(&x1, n, d, &x1_stats);
    let a2 = attention_from(&x1b, &x1b, n, d, &params.layers[1].wq, &params.layers[1].wk, config.positional, rb(1));
    // Att2 components: LN applied per source with the centering assigned to
    // the token part, so the three sum to the full Att2 output.
    let comp = |src: &[f64], center: bool| -> Vec<f64> {
        let mut lnpart = vec![0.0; n * d];
        for i in 0..n {
            let mu = if center { x1_stats.mean[i] } else { 0.0 };
            for j in 0..d {
                lnpart[i * d + j] = (src[i * d + j] - mu) * x1_stats.inv_std[i];
            }
        }
        let v = linear(&lnpart, n, &params.layers[1].wv);
        let mut out = vec![0.0; n * d];
        dgemm(n, n, d, 1.0, &a2, false, &v, false, 0.0, &mut out);
        out
    };
    let a2_token = comp(&x0, true);
    let a2_a1 = comp(&att1, false);
    let a2_mlp1 = comp(&mlp1, false);
    let mut att2 = a2_token.clone();
    add(&mut att2, &a2_a1);
    add(&mut att2, &a2_mlp1);
    let mut y2 = x1.clone();
    add(&mut y2, &att2);
    let y2_stats = row_stats(&y2, n, d);
    let mlp2 = mlp_with_stats(&y2, n, &y2_stats, &params.layers[1].w_in, &params.layers[1].w_out);
    let mut x2 = y2.clone();
    add(&mut x2, &mlp2);
    let logits = linear(&x2, n, &params.wu);
    let outputs = softmax_rows_to_outputs(&logits, n, c);
    Ok(TraceCache {
        n,
        sources: [x0, att1, mlp1, a2_token, a2_a1, a2_mlp1, mlp2],
        outputs,
        x0_stats,
        y1_stats,
        x1_stats,
        y2_stats,
        x0b,
        x1b,
        y1,
        y2,
        x2,
        a2,
    })
}

/// Per-position batch means of every source vector.
pub fn source_means(caches: &[TraceCache]) -> [Vec<f64>; 7] {
    let n = caches[0].n;
    let d = caches[0].sources[0].len() / n;
    let mut means: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n * d]);
    for cache in caches {
        for s in 0..7 {
            for (m, v) in means[s].iter_mut().zip(&cache.sources[s]) {
                *m += v / caches.len() as f64;
            }
        }
    }
    means
}

/// Forward pass with one edge mean-ablated: the source's deviation from its
/// batch mean is subtracted from the target's input, layer norms keep the
/// clean statistics, and everything downstream of the target is recomputed.
pub fn ablated_forward(
    params: &TransformerParams,
    clean: &TraceCache,
    edge: EdgeId,
    means: &[Vec<f64>; 7],
) -> Result<Vec<PredictiveDistribution>> {
    if !is_valid(edge) {
        return Err(Error::contract(format!("invalid edge {}", edge.label())));
    }
    let config = &params.config;
    let (c, d) = (config.c, config.d);
    let n = clean.n;
    let si = source_index(edge.source);
    // The perturbed aggregate the target consumes.
    let deviation: Vec<f64> = clean.sources[si]
        .iter()
        .zip(&means[si])
        .map(|(v, m)| v - m)
        .collect();
    let rb = |l: usize| params.rel_bias.as_ref().map(|r| &r[l]);
    // Recompute from the target onward.
    let (a1, att1_new): (Vec<f64>, Vec<f64>) = match edge.target {
        Target::A1Q | Target::A1K => {
            let mut x0_tilde = clean.sources[0].clone();
            sub(&mut x0_tilde, &deviation);
            let xb_tilde = ln_with(&x0_tilde, n, d, &clean.x0_stats);
            let (qsrc, ksrc) = match edge.target {
                Target::A1Q => (&xb_tilde, &clean.x0b),
                _ => (&clean.x0b, &xb_tilde),
            };
            let a1 = attention_from(qsrc, ksrc, n, d, &params.layers[0].wq, &params.layers[0].wk, config.positional, rb(0));
            let v1 = linear(&clean.x0b, n, &params.layers[0].wv);
            let mut att1 = vec![0.0; n * d];
            dgemm(n, n, d, 1.0, &a1, false, &v1, false, 0.0, &mut att1);
            (a1, att1)
        }
        _ => (Vec::new(), clean.sources[1].clone()),
    };
    let _ = a1;
    let changed_att1 = matches!(edge.target, Target::A1Q | Target::A1K);
    // y1 and MLP1.
    let mut y1 = clean.sources[0].clone();
    add(&mut y1, &att1_new);
    let mlp1_new = if edge.target == Target::Mlp1 {
        let mut y1_tilde = clean.y1.clone();
        sub(&mut y1_tilde, &deviation);
        mlp_with_stats(&y1_tilde, n, &clean.y1_stats, &params.layers[0].w_in, &params.layers[0].w_out)
    } else if changed_att1 {
        mlp_with_stats(&y1, n, &clean.y1_stats, &params.layers[0].w_in, &params.layers[0].w_out)
    } else {
        clean.sources[2].clone()
    };
    let mut x1 = y1.clone();
    add(&mut x1, &mlp1_new);
    let layer1_changed = changed_att1 || edge.target == Target::Mlp1;
    // Layer-2 attention.
    let x1b = if layer1_changed { ln_with(&x1, n, d, &clean.x1_stats) } else { clean.x1b.clone() };
    let (a2, att2_new) = match edge.target {
        Target::A2Q | Target::A2K => {
            let mut x1_tilde = x1.clone();
            sub(&mut x1_tilde, &deviation);
            let xb_tilde = ln_with(&x1_tilde, n, d, &clean.x1_stats);
            let (qsrc, ksrc) = match edge.target {
                Target::A2Q => (&xb_tilde, &x1b),
                _ => (&x1b, &xb_tilde),
            };
            let a2 = attention_from(qsrc, ksrc, n, d, &params.layers[1].wq, &params.layers[1].wk, config.positional, rb(1));
            let v2 = linear(&x1b, n, &params.layers[1].wv);
            let mut att2 = vec![0.0; n * d];
            dgemm(n, n, d, 1.0, &a2, false, &v2, false, 0.0, &mut att2);
            (a2, att2)
        }
        _ => {
            if layer1_changed {
                let a2 = attention_from(&x1b, &x1b, n, d, &params.layers[1].wq, &params.layers[1].wk, config.positional, rb(1));
                let v2 = linear(&x1b, n, &params.layers[1].wv);
                let mut att2 = vec![0.0; n * d];
                dgemm(n, n, d, 1.0, &a2, false, &v2, false, 0.0, &mut att2);
                (a2, att2)
            } else {
                let mut att2 = clean.sources[3].clone();
                add(&mut att2, &clean.sources[4]);
                add(&mut att2, &clean.sources[5]);
                (clean.a2.clone(), att2)
            }
        }
    };
    let _ = a2;
    let mut y2 = x1.clone();
    add(&mut y2, &att2_new);
    // MLP2.
    let mlp2_new = if edge.target == Target::Mlp2 {
        let mut y2_tilde = clean.y2.clone();
        sub(&mut y2_tilde, &deviation);
        mlp_with_stats(&y2_tilde, n, &clean.y2_stats, &params.layers[1].w_in, &params.layers[1].w_out)
    } else if edge.target == Target::Linear {
        clean.sources[6].clone()
    } else {
        mlp_with_stats(&y2, n, &clean.y2_stats, &params.layers[1].w_in, &params.layers[1].w_out)
    };
    let mut x2 = y2;
    add(&mut x2, &mlp2_new);
    if edge.target == Target::Linear {
        x2 = clean.x2.clone();
        sub(&mut x2, &deviation);
    }
    let logits = linear(&x2, n, &params.wu);
    Ok(softmax_rows_to_outputs(&logits, n, c))
}

/// Mean-ablation importance of each edge: the batch-mean position-averaged
/// KL of the unperturbed outputs from the ablated outputs.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ImportanceMap {
    pub entries: Vec<(EdgeId, f64)>,
    pub batch: usize,
}

pub fn trace(
    params: &TransformerParams,
    batch: &[Sequence],
    edges: Option<&[EdgeId]>,
) -> Result<ImportanceMap> {
    if batch.is_empty() {
        return Err(Error::parameter("empty tracing batch"));
    }
    let caches: Vec<TraceCache> =
        batch.par_iter().map(|s| decomposed_forward(params, s)).collect::<Result<_>>()?;
    let means = source_means(&caches);
    let all_edges = enumerate_edges();
    let edges: Vec<EdgeId> = match edges {
        Some(e) => {
            for edge in e {
                if !is_valid(*edge) {
                    return Err(Error::contract(format!("invalid edge {}", edge.label())));
                }
            }
            e.to_vec()
        }
        None => all_edges,
    };
    let entries: Vec<(EdgeId, f64)> = edges
        .par_iter()
        .map(|&edge| -> Result<(EdgeId, f64)> {
            let mut total = 0.0;
            for cache in &caches {
                let perturbed = ablated_forward(params, cache, edge, &means)?;
                let kl: f64 = cache
                    .outputs
                    .iter()
                    .zip(&perturbed)
                    .map(|(p, q)| kl_divergence(p, q))
                    .sum::<f64>()
                    / cache.n as f64;
                total += kl;
            }
            Ok((edge, total / batch.len() as f64))
        })
        .collect::<Result<_>>()?;
    Ok(ImportanceMap { entries, batch: batch.len() })
}

// ---------------------------------------------------------------------------
// Task-vector patching.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum PatchSite {
    Att2,
    Att1,
}

/// Similarity of model outputs to a per-position reference predictor:
/// exp(-KL / KL_uniform), both position-averaged over the sequence.
pub fn similarity(
    reference: &[PredictiveDistribution],
    model: &[PredictiveDistribution],
) -> f64 {
    let c = reference[0].c();
    let uniform = PredictiveDistribution::uniform(c);
    let n = reference.len() as f64;
    let kl: f64 = reference.iter().zip(model).map(|(p, q)| kl_divergence(p, q)).sum::<f64>() / n;
    let klu: f64 = model.iter().map(|q| kl_divergence(&uniform, q)).sum::<f64>() / n;
    (-kl / klu.max(1e-12)).exp()
}

/// Hybrid 2-Mem predictor: the posterior comes from the donor sequence's
/// prefixes, the predicted column from the host sequence's current state.
pub fn hybrid_2mem_outputs(
    posterior_seq: &Sequence,
    state_seq: &Sequence,
    tasks: &TaskSet,
) -> Result<Vec<PredictiveDistribution>> {
    if posterior_seq.len() != state_seq.len() {
        return Err(Error::contract("patching batches must share sequence length"));
    }
    let mut post = MemPosterior::new(tasks, MemOrder::TwoPoint)?;
    (0..posterior_seq.len())
        .map(|i| {
            post.push(posterior_seq.state(i));
            post.predictive(state_seq.state(i))
        })
        .collect()
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PatchCell {
    pub condition: String,
    pub predictor: String,
    pub similarity_mean: f64,
    pub similarities: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PatchReport {
    pub site: PatchSite,
    pub cells: Vec<PatchCell>,
}

impl PatchReport {
    pub fn cell(&self, condition: &str, predictor: &str) -> Option<&PatchCell> {
        self.cells.iter().find(|c| c.condition == condition && c.predictor == predictor)
    }
}

/// Runs the four-condition patching experiment on the transformer: forward
/// on A caching the site's output per position, forward on B with the site
/// overwritten by A's vectors (and vice versa), scored against the four
/// posterior/state predictor hybrids (AA, AB, BA, BB).
pub fn patch_task_vector(
    params: &TransformerParams,
    tasks: &Arc<TaskSet>,
    batch_a: &[Sequence],
    batch_b: &[Sequence],
    site: PatchSite,
) -> Result<PatchReport> {
    if batch_a.len() != batch_b.len() || batch_a.is_empty() {
        return Err(Error::contract("patching batches must pair up"));
    }
    if !params.config.mlp1_enabled && site == PatchSite::Att2 {
        return Err(Error::contract("site unavailable in this variant"));
    }
    use crate::transformer::{forward, ForwardOptions};
    // Model outputs per condition.
    let run_plain = |batch: &[Sequence]| -> Result<Vec<(Vec<PredictiveDistribution>, Vec<f64>)>> {
        batch
            .par_iter()
            .map(|s| {
                let (out, cache) =
                    forward(params, s, ForwardOptions { want_cache: true, ..Default::default() })?;
                let cache = cache.unwrap();
                let site_vectors = match site {
                    PatchSite::Att2 => cache.att2,
                    PatchSite::Att1 => cache.att1,
                };
                Ok((out, site_vectors))
            })
            .collect()
    };
    let a_clean = run_plain(batch_a)?;
    let b_clean = run_plain(batch_b)?;
    let run_patched = |batch: &[Sequence],
                       donors: &[(Vec<PredictiveDistribution>, Vec<f64>)]|
     -> Result<Vec<Vec<PredictiveDistribution>>> {
        batch
            .par_iter()
            .zip(donors.par_iter())
            .map(|(s, (_, donor))| {
                let opts = match site {
                    PatchSite::Att2 => {
                        ForwardOptions { att2_override: Some(donor.as_slice()), ..Default::default() }
                    }
                    PatchSite::Att1 => {
                        ForwardOptions { att1_override: Some(donor.as_slice()), ..Default::default() }
                    }
                };
                Ok(forward(params, s, opts)?.0)
            })
            .collect()
    };
    let b_patch_a = run_patched(batch_b, &a_clean)?;
    let a_patch_b = run_patched(batch_a, &b_clean)?;
    // Reference predictors per pair: XY = posterior from X, states from Y.
    let order = match site {
        PatchSite::Att2 => MemOrder::TwoPoint,
        PatchSite::Att1 => MemOrder::OnePoint,
    };
    let hybrid = |x: &Sequence, y: &Sequence| -> Result<Vec<PredictiveDistribution>> {
        let mut post = MemPosterior::new(tasks, order)?;
        (0..x.len())
            .map(|i| {
                post.push(x.state(i));
                post.predictive(y.state(i))
            })
            .collect()
    };
    let conditions: [(&str, &Vec<Vec<PredictiveDistribution>>, bool); 4] = [
        ("A", &a_clean.iter().map(|(o, _)| o.clone()).collect::<Vec<_>>(), true),
        ("B", &b_clean.iter().map(|(o, _)| o.clone()).collect::<Vec<_>>(), false),
        ("B(patch A)", &b_patch_a, false),
        ("A(patch B)", &a_patch_b, true),
    ];
    let mut cells = Vec::new();
    for (cond_name, outputs, _host_is_a) in &conditions {
        for (pred_name, post_src, state_src) in [
            ("AA", 0usize, 0usize),
            ("AB", 0, 1),
            ("BA", 1, 0),
            ("BB", 1, 1),
        ] {
            let sims: Vec<f64> = (0..batch_a.len())
                .map(|i| -> Result<f64> {
                    let x = if post_src == 0 { &batch_a[i] } else { &batch_b[i] };
                    let y = if state_src == 0 { &batch_a[i] } else { &batch_b[i] };
                    let reference = hybrid(x, y)?;
                    Ok(similarity(&reference, &outputs[i]))
                })
                .collect::<Result<_>>()?;
            let mean = sims.iter().sum::<f64>() / sims.len() as f64;
            cells.push(PatchCell {
                condition: cond_name.to_string(),
                predictor: pred_name.to_string(),
                similarity_mean: mean,
                similarities: sims,
            });
        }
    }
    Ok(PatchReport { site, cells })
}

// ---------------------------------------------------------------------------
// Pair embeddings and task-vector information content.
// ---------------------------------------------------------------------------

/// MLP1-output embedding for every ordered state pair, cached from 2-state
/// probe sequences: column (prev * C + cur) is MLP1's output at the last
/// token of (prev, cur). Shape [D, C^2] (row-major D rows).
pub fn estimate_pair_embeddings(params: &TransformerParams) -> Result<Tensor> {
    let c = params.config.c;
    let d = params.config.d;
    let mut data = vec![0.0; d * c * c];
    for prev in 0..c {
        for cur in 0..c {
            let seq = Sequence { states: vec![prev as u16, cur as u16], task_index: None };
            let cache = decomposed_forward(params, &seq)?;
            let col = prev * c + cur;
            for j in 0..d {
                data[j * c * c + col] = cache.sources[2][d + j];
            }
        }
    }
    Tensor::from_vec(&[d, c * c], data)
}

/// A Gaussian mixture component in the (possibly projected) embedding space.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MiReport {
    pub bits: f64,
    pub dim: usize,
    pub ridge_applied: bool,
    pub mc_samples: usize,
}

/// Monte-Carlo mutual information of a uniform Gaussian mixture in bits:
/// H(phi) and H(phi|K) are estimated on shared samples, which cancels the
/// dominant per-sample fluctuation. Singular covariances get a 1e-9 ridge.
pub fn gaussian_mixture_mi(
    components: &[GaussianComponent],
    mc_samples: usize,
    seed: u64,
) -> Result<MiReport> {
    use nalgebra::{Cholesky, DMatrix, DVector};
    use rand_distr::{Distribution, StandardNormal};
    let k = components.len();
    if k == 0 {
        return Err(Error::parameter("no mixture components"));
    }
    let dim = components[0].mean.len();
    let mut ridge_applied = false;
    let chols: Vec<Cholesky<f64, nalgebra::Dyn>> = components
        .iter()
        .map(|comp| {
            let m = DMatrix::from_row_slice(dim, dim, &comp.cov);
            match Cholesky::new(m.clone()) {
                Some(c) => c,
                None => {
                    ridge_applied = true;
                    let ridged = m + DMatrix::identity(dim, dim) * 1e-9;
                    Cholesky::new(ridged).expect("ridged covariance still singular")
                }
            }
        })
        .collect();
    let log_dets: Vec<f64> = chols
        .iter()
        .map(|c| 2.0 * (0..dim).map(|i| c.l()[(i, i)].ln()).sum::<f64>())
        .collect();
    let log_pdf = |ci: usize, x: &DVector<f64>| -> f64 {
        let mean = DVector::from_row_slice(&components[ci].mean);
        let diff = x - mean;
        let solved = chols[ci].solve(&diff);
        let quad = diff.dot(&solved);
        -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_dets[ci] + quad)
    };
    let mut rng = crate::streams::misc_rng(seed, 0);
    let mut h_mix = 0.0; // -E log q(x)
    let mut h_cond = 0.0; // -E log p(x | k)
    let per = (mc_samples + k - 1) / k;
    let total = per * k;
    for ci in 0..k {
        let mean = DVector::from_row_slice(&components[ci].mean);
        for _ in 0..per {
            let z = DVector::from_iterator(dim, (0..dim).map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            }));
            let x = &mean + chols[ci].l() * z;
            let lps: Vec<f64> = (0..k).map(|cj| log_pdf(cj, &x)).collect();
            let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_q =
                max + lps.iter().map(|l| (l - max).exp()).sum::<f64>().ln() - (k as f64).ln();
            h_mix -= log_q / total as f64;
            h_cond -= lps[ci] / total as f64;
        }
    }
    let nats = (h_mix - h_cond).max(0.0);
    let bits = (nats / std::f64::consts::LN_2).min((k as f64).log2());
    Ok(MiReport { bits, dim, ridge_applied, mc_samples: total })
}

/// Task-vector mutual information: Gaussian components built from the pair
/// embeddings and each task's stationary pair distribution, projected onto
/// the principal subspace keeping `pca_var` of the variance.
pub fn task_vector_mi(
    embeddings: &Tensor,
    tasks: &TaskSet,
    n: usize,
    mc_samples: usize,
    pca_var: f64,
    seed: u64,
) -> Result<MiReport> {
    use nalgebra::{DMatrix, SymmetricEigen};
    let c = tasks.c();
    let d = embeddings.shape[0];
    let pairs = c * c;
    if embeddings.shape[1] != pairs {
        return Err(Error::contract("embedding width must be C^2"));
    }
    // PCA over the C^2 embedding columns.
    let col = |j: usize| -> Vec<f64> { (0..d).map(|r| embeddings.data[r * pairs + j]).collect() };
    let mut mean = vec![0.0; d];
    for j in 0..pairs {
        for (m, v) in mean.iter_mut().zip(col(j)) {
            *m += v / pairs as f64;
        }
    }
    let mut cov: DMatrix<f64> = DMatrix::zeros(d, d);
    for j in 0..pairs {
        let cj = col(j);
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (cj[a] - mean[a]) * (cj[b] - mean[b]) / pairs as f64;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        let (va, vb): (f64, f64) = (eig.eigenvalues[a], eig.eigenvalues[b]);
        vb.total_cmp(&va)
    });
    let total_var: f64 = eig.eigenvalues.iter().sum::<f64>().max(1e-300);
    let mut kept = Vec::new();
    let mut acc = 0.0;
    for &i in &order {
        kept.push(i);
        acc += eig.eigenvalues[i];
        if acc / total_var >= pca_var {
            break;
        }
    }
    let dim = kept.len();
    // Projected embedding matrix P E: [dim, pairs].
    let mut pe = vec![0.0; dim * pairs];
    for (r, &ei) in kept.iter().enumerate() {
        for j in 0..pairs {
            let cj = col(j);
            let mut v = 0.0;
            for a in 0..d {
                v += eig.eigenvectors[(a, ei)] * (cj[a] - mean[a]);
            }
            pe[r * pairs + j] = v;
        }
    }
    // Components per task.
    let components: Vec<GaussianComponent> = (0..tasks.k())
        .map(|k| -> Result<GaussianComponent> {
            let t = tasks.matrix(k);
            let p = t.stationary()?;
            let mut pk = vec![0.0; pairs];
            for prev in 0..c {
                for cur in 0..c {
                    pk[prev * c + cur] = p[prev] * t.prob(cur, prev);
                }
            }
            let mut m = vec![0.0; dim];
            for r in 0..dim {
                m[r] = (0..pairs).map(|j| pe[r * pairs + j] * pk[j]).sum();
            }
            // cov = (1/n) PE (diag(pk) - pk pk^T) PE^T
            let mut covk = vec![0.0; dim * dim];
            for a in 0..dim {
                for b in 0..dim {
                    let mut v = 0.0;
                    for j in 0..pairs {
                        v += pe[a * pairs + j] * pk[j] * pe[b * pairs + j];
                    }
                    v -= m[a] * m[b];
                    covk[a * dim + b] = v / n as f64;
                }
            }
            Ok(GaussianComponent { mean: m, cov: covk })
        })
        .collect::<Result<_>>()?;
    gaussian_mixture_mi(&components, mc_samples, seed)
}
