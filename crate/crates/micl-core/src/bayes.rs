//! The four Bayes predictors (1-Gen, 2-Gen, 1-Mem, 2-Mem) and the loss and
//! divergence metrics used to classify model behavior.
//!
//! Memorizing posteriors are accumulated in log space and normalized by
//! log-sum-exp, so scans over long sequences and large task sets never
//! underflow. The incremental [`MemPosterior`] adds one log-factor per new
//! state, keeping autoregressive evaluation O(N K).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::markov::{Sequence, TaskSet, TransitionMatrix};

/// Probabilities below this floor are clamped inside logs and KLs so metrics
/// stay finite; callers can observe whether the floor ever fired.
pub const LOG_FLOOR: f64 = 1e-12;

/// Default 1-Gen Dirichlet regularizer.
pub const DEFAULT_ALPHA_PRIME: f64 = 1.0;

/// A normalized distribution over the next state.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    probs: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::contract("negative probability"));
        }
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::contract(format!("probabilities sum to {sum}")));
        }
        Ok(PredictiveDistribution { probs })
    }

    /// Skips validation; for internal constructions that are normalized by
    /// design.
    pub(crate) fn new_unchecked(probs: Vec<f64>) -> Self {
        PredictiveDistribution { probs }
    }

    pub fn uniform(c: usize) -> Self {
        PredictiveDistribution { probs: vec![1.0 / c as f64; c] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn c(&self) -> usize {
        self.probs.len()
    }

    /// log prob of `state`, clamped at the floor; the flag reports clamping.
    pub fn log_prob(&self, state: usize) -> (f64, bool) {
        let p = self.probs[state];
        if p < LOG_FLOOR {
            (LOG_FLOOR.ln(), true)
        } else {
            (p.ln(), false)
        }
    }
}

/// Position-averaged KL divergence between matched per-position predictions,
/// with the model side floored.
pub fn kl_divergence(p: &PredictiveDistribution, q: &PredictiveDistribution) -> f64 {
    p.probs
        .iter()
        .zip(&q.probs)
        .map(|(&a, &b)| {
            if a <= 0.0 {
                0.0
            } else {
                a * (a.ln() - b.max(LOG_FLOOR).ln())
            }
        })
        .sum()
}

/// `D_KL^{S_N}`: mean KL over aligned per-position outputs.
pub fn sequence_kl(
    reference: &[PredictiveDistribution],
    model: &[PredictiveDistribution],
) -> Result<f64> {
    if reference.len() != model.len() || reference.is_empty() {
        return Err(Error::contract("mismatched or empty per-position outputs"));
    }
    let total: f64 = reference.iter().zip(model).map(|(p, q)| kl_divergence(p, q)).sum();
    Ok(total / reference.len() as f64)
}

/// Which Bayes predictor to evaluate.
#[derive(Debug, Clone)]
pub enum PredictorKind {
    OneGen { alpha_prime: f64 },
    TwoGen,
    OneMem(Arc<TaskSet>),
    TwoMem(Arc<TaskSet>),
}

impl PredictorKind {
    pub fn label(&self) -> &'static str {
        match self {
            PredictorKind::OneGen { .. } => "1-gen",
            PredictorKind::TwoGen => "2-gen",
            PredictorKind::OneMem(_) => "1-mem",
            PredictorKind::TwoMem(_) => "2-mem",
        }
    }

    pub fn predict(&self, prefix: &[u16], c: usize) -> Result<PredictiveDistribution> {
        match self {
            PredictorKind::OneGen { alpha_prime } => Ok(predict_1gen(prefix, c, *alpha_prime)),
            PredictorKind::TwoGen => {
                if prefix.is_empty() {
                    return Err(Error::parameter("2-gen needs a current state"));
                }
                Ok(predict_2gen(prefix, c))
            }
            PredictorKind::OneMem(tasks) => predict_1mem(prefix, tasks),
            PredictorKind::TwoMem(tasks) => predict_2mem(prefix, tasks),
        }
    }

    /// Per-position predictions for prefixes S_1..S_n of `seq`.
    pub fn predict_all(&self, seq: &Sequence, c: usize) -> Result<Vec<PredictiveDistribution>> {
        match self {
            PredictorKind::OneMem(tasks) | PredictorKind::TwoMem(tasks) => {
                let order = match self {
                    PredictorKind::OneMem(_) => MemOrder::OnePoint,
                    _ => MemOrder::TwoPoint,
                };
                let mut post = MemPosterior::new(tasks, order)?;
                (0..seq.len())
                    .map(|i| {
                        post.push(seq.state(i));
                        post.predictive(seq.state(i))
                    })
                    .collect()
            }
            _ => (1..=seq.len())
                .map(|n| self.predict(&seq.states[..n], c))
                .collect(),
        }
    }
}

/// 1-Gen: `(n_tau + alpha') / (n + C alpha')` from 1-point counts of the
/// prefix. The empty prefix yields the uniform distribution.
pub fn predict_1gen(prefix: &[u16], c: usize, alpha_prime: f64) -> PredictiveDistribution {
    let mut counts = vec![0.0; c];
    for &s in prefix {
        counts[s as usize] += 1.0;
    }
    let denom = prefix.len() as f64 + c as f64 * alpha_prime;
    PredictiveDistribution::new_unchecked(
        counts.iter().map(|&n| (n + alpha_prime) / denom).collect(),
    )
}

/// 2-Gen: `(m_{tau mu} + 1) / (n_mu + C)` where transitions are counted
/// within the prefix and `mu` is the final prefix state.
pub fn predict_2gen(prefix: &[u16], c: usize) -> PredictiveDistribution {
    let mu = *prefix.last().expect("2-gen needs a current state") as usize;
    let mut m = vec![0.0; c];
    let mut n_mu = 0.0;
    for w in prefix.windows(2) {
        if w[0] as usize == mu {
            m[w[1] as usize] += 1.0;
            n_mu += 1.0;
        }
    }
    let denom = n_mu + c as f64;
    PredictiveDistribution::new_unchecked(m.iter().map(|&v| (v + 1.0) / denom).collect())
}

/// Unregularized 2-point estimator `m_{tau mu} / n_mu`, the SA-transformer
/// limit. Returns None when `mu` has no observed transitions.
pub fn predict_2gen_unregularized(prefix: &[u16], c: usize) -> Option<PredictiveDistribution> {
    let mu = *prefix.last()? as usize;
    let mut m = vec![0.0; c];
    let mut n_mu = 0.0;
    for w in prefix.windows(2) {
        if w[0] as usize == mu {
            m[w[1] as usize] += 1.0;
            n_mu += 1.0;
        }
    }
    if n_mu == 0.0 {
        return None;
    }
    Some(PredictiveDistribution::new_unchecked(
        m.iter().map(|&v| v / n_mu).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemOrder {
    OnePoint,
    TwoPoint,
}

/// Incrementally maintained log-posterior over the task set.
#[derive(Debug, Clone)]
pub struct MemPosterior<'a> {
    tasks: &'a TaskSet,
    order: MemOrder,
    log_post: Vec<f64>,
    prev: Option<usize>,
}

impl<'a> MemPosterior<'a> {
    pub fn new(tasks: &'a TaskSet, order: MemOrder) -> Result<Self> {
        if tasks.k() < 1 {
            return Err(Error::parameter("memorizer needs k >= 1"));
        }
        Ok(MemPosterior { tasks, order, log_post: vec![0.0; tasks.k()], prev: None })
    }

    /// Absorbs the next observed state into the posterior.
    pub fn push(&mut self, state: usize) {
        for (k, lp) in self.log_post.iter_mut().enumerate() {
            let t = self.tasks.matrix(k);
            let factor = match (self.order, self.prev) {
                (MemOrder::OnePoint, _) | (MemOrder::TwoPoint, None) => {
                    t.stationary().expect("stationary")[state]
                }
                (MemOrder::TwoPoint, Some(prev)) => t.prob(state, prev),
            };
            *lp += factor.max(LOG_FLOOR).ln();
        }
        self.prev = Some(state);
    }

    /// Normalized posterior weights via log-sum-exp.
    pub fn weights(&self) -> Vec<f64> {
        log_normalize(&self.log_post)
    }

    /// Posterior-mixed next-state distribution given current state `mu`.
    pub fn predictive(&self, mu: usize) -> Result<PredictiveDistribution> {
        if self.prev.is_none() {
            return Err(Error::parameter("posterior has seen no states"));
        }
        let c = self.tasks.c();
        let w = self.weights();
        let mut probs = vec![0.0; c];
        for (k, wk) in w.iter().enumerate() {
            let t = self.tasks.matrix(k);
            for tau in 0..c {
                probs[tau] += wk * t.prob(tau, mu);
            }
        }
        Ok(PredictiveDistribution::new_unchecked(probs))
    }
}

fn log_normalize(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_w.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// 1-Mem: posterior over tasks from stationary likelihoods of every prefix
/// state, mixed over transition columns.
pub fn predict_1mem(prefix: &[u16], tasks: &TaskSet) -> Result<PredictiveDistribution> {
    if prefix.is_empty() {
        return Err(Error::parameter("1-mem needs n >= 1"));
    }
    let mut post = MemPosterior::new(tasks, MemOrder::OnePoint)?;
    for &s in prefix {
        post.push(s as usize);
    }
    post.predictive(*prefix.last().unwrap() as usize)
}

/// 2-Mem: posterior from the stationary start plus transition likelihoods.
pub fn predict_2mem(prefix: &[u16], tasks: &TaskSet) -> Result<PredictiveDistribution> {
    if prefix.is_empty() {
        return Err(Error::parameter("2-mem needs n >= 1"));
    }
    let mut post = MemPosterior::new(tasks, MemOrder::TwoPoint)?;
    for &s in prefix {
        post.push(s as usize);
    }
    post.predictive(*prefix.last().unwrap() as usize)
}

/// Outcome of an autoregressive loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossOutcome {
    pub nats: f64,
    /// True when any realized state had to be clamped at the log floor.
    pub floored: bool,
}

/// Autoregressive cross-entropy of a predictor on a sequence:
/// `-(1/N) sum_n log pred(s_{n+1} | S_n)` with `N = len - 1`.
pub fn autoregressive_loss(
    predictor: &PredictorKind,
    seq: &Sequence,
    c: usize,
) -> Result<LossOutcome> {
    if seq.len() < 2 {
        return Err(Error::parameter("autoregressive loss needs length >= 2"));
    }
    let preds = predictor.predict_all(seq, c)?;
    let mut total = 0.0;
    let mut floored = false;
    let n = seq.len() - 1;
    for i in 0..n {
        let (lp, fl) = preds[i].log_prob(seq.state(i + 1));
        total -= lp;
        floored |= fl;
    }
    Ok(LossOutcome { nats: total / n as f64, floored })
}

/// Autoregressive cross-entropy of externally supplied per-position outputs.
pub fn autoregressive_loss_of_outputs(
    outputs: &[PredictiveDistribution],
    seq: &Sequence,
) -> Result<LossOutcome> {
    if seq.len() < 2 || outputs.len() < seq.len() - 1 {
        return Err(Error::contract("outputs shorter than sequence"));
    }
    let n = seq.len() - 1;
    let mut total = 0.0;
    let mut floored = false;
    for i in 0..n {
        let (lp, fl) = outputs[i].log_prob(seq.state(i + 1));
        total -= lp;
        floored |= fl;
    }
    Ok(LossOutcome { nats: total / n as f64, floored })
}

/// The behavioral divergence `D` of Eq. (1): half the mean position-averaged
/// KL over training sequences plus half over out-of-distribution sequences.
///
/// `model_train[i]` / `model_ood[i]` hold the model's per-position outputs on
/// the i-th sequence of each batch.
pub fn divergence_d(
    predictor: &PredictorKind,
    train_batch: &[Sequence],
    model_train: &[Vec<PredictiveDistribution>],
    ood_batch: &[Sequence],
    model_ood: &[Vec<PredictiveDistribution>],
    c: usize,
) -> Result<f64> {
    if train_batch.is_empty() || ood_batch.is_empty() {
        return Err(Error::contract("divergence needs non-empty batches"));
    }
    if train_batch.len() != model_train.len() || ood_batch.len() != model_ood.len() {
        return Err(Error::contract("model outputs unaligned with batches"));
    }
    let mean_over = |batch: &[Sequence],
                     model: &[Vec<PredictiveDistribution>]|
     -> Result<f64> {
        let mut total = 0.0;
        for (seq, outputs) in batch.iter().zip(model) {
            let refs = predictor.predict_all(seq, c)?;
            total += sequence_kl(&refs, &outputs[..refs.len()])?;
        }
        Ok(total / batch.len() as f64)
    };
    Ok(0.5 * mean_over(train_batch, model_train)? + 0.5 * mean_over(ood_batch, model_ood)?)
}

/// One row of a predictor-loss scan.
#[derive(Debug, Clone)]
pub struct ScanRow {
    pub predictor: &'static str,
    pub k: usize,
    pub n: usize,
    pub loss_mean: f64,
    pub loss_sem: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Scans the autoregressive loss of each predictor over a K grid (at fixed
/// `n_fixed`) and over an N grid (at fixed `k_fixed`).
pub fn predictor_loss_scan(
    c: usize,
    alpha: f64,
    k_grid: &[usize],
    n_grid: &[usize],
    n_fixed: usize,
    k_fixed: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<ScanRow>> {
    if k_grid.is_empty() && n_grid.is_empty() {
        return Err(Error::parameter("scan grids are empty"));
    }
    let mut rows = Vec::new();
    let mut batch_id = 0u64;
    for &k in k_grid {
        rows.extend(scan_point(c, alpha, k, n_fixed, trials, seed, &mut batch_id)?);
    }
    for &n in n_grid {
        if k_grid.contains(&k_fixed) && n == n_fixed {
            continue;
        }
        rows.extend(scan_point(c, alpha, k_fixed, n, trials, seed, &mut batch_id)?);
    }
    Ok(rows)
}

fn scan_point(
    c: usize,
    alpha: f64,
    k: usize,
    n: usize,
    trials: usize,
    seed: u64,
    batch_id: &mut u64,
) -> Result<Vec<ScanRow>> {
    let tasks = Arc::new(crate::markov::build_task_set(seed, k, c, alpha)?);
    let seqs = crate::markov::sample_training_batch(&tasks, n + 1, trials, seed, {
        *batch_id += 1;
        *batch_id
    })?;
    let kinds = [
        PredictorKind::OneGen { alpha_prime: DEFAULT_ALPHA_PRIME },
        PredictorKind::TwoGen,
        PredictorKind::OneMem(tasks.clone()),
        PredictorKind::TwoMem(tasks.clone()),
    ];
    kinds
        .iter()
        .map(|kind| {
            let losses: Vec<f64> = seqs
                .iter()
                .map(|s| autoregressive_loss(kind, s, c).map(|o| o.nats))
                .collect::<Result<_>>()?;
            let (mean, sem) = mean_sem(&losses);
            Ok(ScanRow {
                predictor: kind.label(),
                k,
                n,
                loss_mean: mean,
                loss_sem: sem,
                trials,
                seed,
            })
        })
        .collect()
}

pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Exact oracle cross-entropy of the true transition column: the loss an
/// oracle predictor achieves on sequences from `t`, in expectation.
pub fn oracle_entropy(t: &TransitionMatrix) -> Result<f64> {
    let p = t.stationary()?;
    let c = t.c();
    let mut h = 0.0;
    for mu in 0..c {
        for tau in 0..c {
            let tp = t.prob(tau, mu);
            if tp > 0.0 {
                h -= p[mu] * tp * tp.ln();
            }
        }
    }
    Ok(h)
}
