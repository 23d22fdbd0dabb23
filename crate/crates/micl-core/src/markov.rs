//! Dirichlet-ensemble Markov chains: transition matrices, stationary
//! distributions, state sequences, and the bias-ablated sequences used in the
//! escape-dynamics experiments.
//!
//! Convention: `entries[tau][mu] = P(next = tau | current = mu)`, so every
//! *column* sums to one and the stationary distribution satisfies
//! `sum_mu p_mu * T[tau][mu] = p_tau`.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::streams;

pub const STATIONARY_TOL: f64 = 1e-13;
pub const STATIONARY_MAX_ITERS: usize = 100_000;

/// Column-stochastic C x C transition matrix with a cached stationary
/// distribution.
#[derive(Debug)]
pub struct TransitionMatrix {
    c: usize,
    /// Row-major, `entries[tau * c + mu]`.
    entries: Vec<f64>,
    stationary: OnceLock<Vec<f64>>,
}

impl Clone for TransitionMatrix {
    fn clone(&self) -> Self {
        let st = OnceLock::new();
        if let Some(p) = self.stationary.get() {
            let _ = st.set(p.clone());
        }
        TransitionMatrix { c: self.c, entries: self.entries.clone(), stationary: st }
    }
}

impl TransitionMatrix {
    /// Builds a matrix from row-major entries, validating column sums.
    pub fn from_entries(c: usize, entries: Vec<f64>) -> Result<Self> {
        if c < 2 {
            return Err(Error::parameter(format!("state count must be >= 2, got {c}")));
        }
        if entries.len() != c * c {
            return Err(Error::parameter("entry count does not match c*c"));
        }
        for mu in 0..c {
            let mut sum = 0.0;
            for tau in 0..c {
                let v = entries[tau * c + mu];
                if !(v >= 0.0) {
                    return Err(Error::parameter(format!("negative entry at ({tau},{mu})")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::parameter(format!(
                    "column {mu} sums to {sum}, expected 1 within 1e-12"
                )));
            }
        }
        Ok(TransitionMatrix { c, entries, stationary: OnceLock::new() })
    }

    pub fn c(&self) -> usize {
        self.c
    }

    /// `P(next = tau | current = mu)`.
    #[inline]
    pub fn prob(&self, tau: usize, mu: usize) -> f64 {
        self.entries[tau * self.c + mu]
    }

    /// Column `mu` as a dense vector: the next-state distribution given `mu`.
    pub fn column(&self, mu: usize) -> Vec<f64> {
        (0..self.c).map(|tau| self.prob(tau, mu)).collect()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Stationary distribution, computed on first use by power iteration and
    /// cached.
    pub fn stationary(&self) -> Result<&[f64]> {
        if let Some(p) = self.stationary.get() {
            return Ok(p);
        }
        let p = stationary_distribution(self)?;
        Ok(self.stationary.get_or_init(|| p))
    }
}

/// Ordered, seed-nested collection of transition matrices.
#[derive(Debug, Clone)]
pub struct TaskSet {
    matrices: Vec<TransitionMatrix>,
    seed: u64,
    c: usize,
    alpha: f64,
}

impl TaskSet {
    /// Wraps explicit matrices as a task set (for tests and synthetic
    /// constructions); all matrices must share the state count.
    pub fn from_matrices(
        matrices: Vec<TransitionMatrix>,
        seed: u64,
        alpha: f64,
    ) -> Result<Self> {
        let c = matrices.first().ok_or_else(|| Error::parameter("empty task set"))?.c();
        if matrices.iter().any(|m| m.c() != c) {
            return Err(Error::parameter("mixed state counts in task set"));
        }
        Ok(TaskSet { matrices, seed, c, alpha })
    }

    pub fn matrices(&self) -> &[TransitionMatrix] {
        &self.matrices
    }
    pub fn matrix(&self, k: usize) -> &TransitionMatrix {
        &self.matrices[k]
    }
    pub fn k(&self) -> usize {
        self.matrices.len()
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// A sampled state sequence; `task_index` is absent for out-of-distribution
/// draws.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub states: Vec<u16>,
    pub task_index: Option<usize>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.states.len()
    }
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
    #[inline]
    pub fn state(&self, i: usize) -> usize {
        self.states[i] as usize
    }
}

/// Samples a transition matrix with each column i.i.d. Dir(alpha, c).
///
/// Dirichlet draws are c independent Gamma(alpha, 1) variates normalized per
/// column.
pub fn sample_transition_matrix(
    rng: &mut impl Rng,
    c: usize,
    alpha: f64,
) -> Result<TransitionMatrix> {
    if c < 2 {
        return Err(Error::parameter(format!("state count must be >= 2, got {c}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::parameter(format!("alpha must be > 0, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::parameter(format!("gamma distribution: {e}")))?;
    let mut entries = vec![0.0; c * c];
    for mu in 0..c {
        let mut sum = 0.0;
        let mut col = vec![0.0; c];
        for tau in 0..c {
            // Guard against the measure-zero all-zero column.
            let g = loop {
                let g: f64 = gamma.sample(rng);
                if g.is_finite() {
                    break g;
                }
            };
            col[tau] = g;
            sum += g;
        }
        if sum <= 0.0 {
            return Err(Error::numeric("degenerate Dirichlet draw (zero column)"));
        }
        for tau in 0..c {
            entries[tau * c + mu] = col[tau] / sum;
        }
    }
    // Columns are normalized by construction; skip the validation pass.
    Ok(TransitionMatrix { c, entries, stationary: OnceLock::new() })
}

/// Power iteration for the stationary distribution: uniform start, L1
/// tolerance 1e-13, at most 1e5 iterations.
pub fn stationary_distribution(t: &TransitionMatrix) -> Result<Vec<f64>> {
    let c = t.c;
    let mut p = vec![1.0 / c as f64; c];
    let mut next = vec![0.0; c];
    for iter in 0..STATIONARY_MAX_ITERS {
        for tau in 0..c {
            let row = &t.entries[tau * c..(tau + 1) * c];
            next[tau] = row.iter().zip(&p).map(|(a, b)| a * b).sum();
        }
        // Renormalize to shed accumulated rounding.
        let norm: f64 = next.iter().sum();
        for v in next.iter_mut() {
            *v /= norm;
        }
        let diff: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut p, &mut next);
        if diff < STATIONARY_TOL {
            return Ok(p);
        }
        let _ = iter;
    }
    Err(Error::numeric(format!(
        "stationary power iteration did not converge in {STATIONARY_MAX_ITERS} iterations"
    )))
}

fn sample_categorical(rng: &mut impl Rng, probs: impl Iterator<Item = f64>, n: usize) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    n - 1
}

/// Samples a length-n sequence: s1 from the stationary distribution, then
/// s_{i+1} from column s_i.
pub fn sample_sequence(
    t: &TransitionMatrix,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Sequence> {
    if n < 1 {
        return Err(Error::parameter("sequence length must be >= 1"));
    }
    let c = t.c;
    let p = t.stationary()?;
    let mut states = Vec::with_capacity(n);
    let s1 = sample_categorical(rng, p.iter().copied(), c);
    states.push(s1 as u16);
    for _ in 1..n {
        let cur = *states.last().unwrap() as usize;
        let s = sample_categorical(rng, (0..c).map(|tau| t.prob(tau, cur)), c);
        states.push(s as u16);
    }
    Ok(Sequence { states, task_index: None })
}

/// Returns a copy of `seq` with the penultimate state replaced by an
/// independent draw from the stationary distribution of `t`. Destroys the
/// short-range return correlation behind F1 while preserving the 1-point
/// marginals.
pub fn ablate_penultimate(
    seq: &Sequence,
    t: &TransitionMatrix,
    rng: &mut impl Rng,
) -> Result<Sequence> {
    let n = seq.len();
    if n < 2 {
        return Err(Error::parameter("ablation needs a sequence of length >= 2"));
    }
    let p = t.stationary()?;
    let mut out = seq.clone();
    out.states[n - 2] = sample_categorical(rng, p.iter().copied(), t.c) as u16;
    Ok(out)
}

/// Builds a deterministic, seed-nested task set: matrix k is drawn from its
/// own RNG stream, so the first k matrices agree for any k' >= k.
pub fn build_task_set(seed: u64, k: usize, c: usize, alpha: f64) -> Result<TaskSet> {
    if k < 1 {
        return Err(Error::parameter("task set needs k >= 1"));
    }
    let mut matrices = Vec::with_capacity(k);
    for index in 0..k {
        let mut rng = streams::matrix_rng(seed, index as u64);
        matrices.push(sample_transition_matrix(&mut rng, c, alpha)?);
    }
    Ok(TaskSet { matrices, seed, c, alpha })
}

/// Samples `count` training sequences of length `n` from `tasks`, one task
/// drawn uniformly per sequence, with per-sequence RNG streams keyed by
/// `batch_id`.
pub fn sample_training_batch(
    tasks: &TaskSet,
    n: usize,
    count: usize,
    seed: u64,
    batch_id: u64,
) -> Result<Vec<Sequence>> {
    (0..count)
        .map(|i| {
            let mut rng = streams::sequence_rng(seed, batch_id, i as u64);
            let k = rng.gen_range(0..tasks.k());
            let mut seq = sample_sequence(tasks.matrix(k), n, &mut rng)?;
            seq.task_index = Some(k);
            Ok(seq)
        })
        .collect()
}

/// Samples `count` out-of-distribution sequences, each from a fresh matrix
/// drawn directly from the Dirichlet ensemble.
pub fn sample_ood_batch(
    c: usize,
    alpha: f64,
    n: usize,
    count: usize,
    seed: u64,
    batch_id: u64,
) -> Result<Vec<(TransitionMatrix, Sequence)>> {
    (0..count)
        .map(|i| {
            let mut rng = streams::sequence_rng(seed, batch_id, i as u64);
            let t = sample_transition_matrix(&mut rng, c, alpha)?;
            let seq = sample_sequence(&t, n, &mut rng)?;
            Ok((t, seq))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn columns_are_stochastic_and_entries_nonnegative() {
        let mut r = rng(0);
        for _ in 0..100 {
            let t = sample_transition_matrix(&mut r, 10, 1.0).unwrap();
            for mu in 0..10 {
                let sum: f64 = (0..10).map(|tau| t.prob(tau, mu)).sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!((0..10).all(|tau| t.prob(tau, mu) >= 0.0));
            }
        }
    }

    #[test]
    fn dirichlet_mean_entry_matches_one_over_c() {
        // Dirichlet marginal mean is 1/C; Monte-Carlo over 1e5 draws at 3 sigma.
        let mut r = rng(1);
        let draws = 100_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            let t = sample_transition_matrix(&mut r, 10, 1.0).unwrap();
            sum += t.prob(0, 0);
        }
        let mean = sum / draws as f64;
        // Var of a Dir(1, 10) marginal is 9/1100.
        let sigma = (9.0 / 1100.0 / draws as f64).sqrt();
        assert!((mean - 0.1).abs() < 3.0 * sigma, "mean {mean} off 0.1");
    }

    #[test]
    fn high_alpha_columns_approach_uniform() {
        let mut r = rng(2);
        let t = sample_transition_matrix(&mut r, 2, 1e7).unwrap();
        for mu in 0..2 {
            assert!((t.prob(0, mu) - 0.5).abs() < 1e-2);
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_matrices() {
        let a = sample_transition_matrix(&mut rng(7), 10, 1.0).unwrap();
        let b = sample_transition_matrix(&mut rng(7), 10, 1.0).unwrap();
        assert_eq!(a.entries(), b.entries());
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(sample_transition_matrix(&mut rng(0), 1, 1.0).is_err());
        assert!(sample_transition_matrix(&mut rng(0), 3, 0.0).is_err());
        assert!(sample_transition_matrix(&mut rng(0), 3, -1.0).is_err());
    }

    #[test]
    fn stationary_of_uniform_matrix_is_uniform() {
        let c = 6;
        let t = TransitionMatrix::from_entries(c, vec![1.0 / c as f64; c * c]).unwrap();
        let p = t.stationary().unwrap();
        for v in p {
            assert!((v - 1.0 / c as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_of_two_state_matrix_matches_hand_solution() {
        // Columns (0.9, 0.1) and (0.2, 0.8): p = (2/3, 1/3).
        let t = TransitionMatrix::from_entries(2, vec![0.9, 0.2, 0.1, 0.8]).unwrap();
        let p = t.stationary().unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-10);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn near_permutation_matrix_has_near_uniform_stationary() {
        // Cycle 0 -> 1 -> 2 -> 0 with eps mixing is doubly stochastic.
        let eps = 1e-3;
        let c = 3;
        let mut e = vec![eps / 2.0; c * c];
        for mu in 0..c {
            e[((mu + 1) % c) * c + mu] = 1.0 - eps;
            e[mu * c + mu] = eps / 2.0;
            e[((mu + 2) % c) * c + mu] = eps / 2.0;
        }
        let t = TransitionMatrix::from_entries(c, e).unwrap();
        let p = t.stationary().unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stationary_residual_is_small_on_sampled_matrices() {
        let mut r = rng(3);
        for _ in 0..50 {
            let t = sample_transition_matrix(&mut r, 10, 1.0).unwrap();
            let p = t.stationary().unwrap().to_vec();
            for tau in 0..10 {
                let tp: f64 = (0..10).map(|mu| t.prob(tau, mu) * p[mu]).sum();
                assert!((tp - p[tau]).abs() < 1e-10);
            }
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_cycle_sequence_follows_the_cycle() {
        let eps = 1e-12;
        let c = 3;
        let mut e = vec![eps / 2.0; c * c];
        for mu in 0..c {
            e[((mu + 1) % c) * c + mu] = 1.0 - eps;
            e[mu * c + mu] = eps / 2.0;
            e[((mu + 2) % c) * c + mu] = eps / 2.0;
        }
        let t = TransitionMatrix::from_entries(c, e).unwrap();
        let seq = sample_sequence(&t, 50, &mut rng(4)).unwrap();
        for i in 1..seq.len() {
            assert_eq!(seq.state(i), (seq.state(i - 1) + 1) % c);
        }
    }

    #[test]
    fn single_step_sequence_is_a_stationary_draw() {
        let t = sample_transition_matrix(&mut rng(5), 4, 1.0).unwrap();
        let seq = sample_sequence(&t, 1, &mut rng(6)).unwrap();
        assert_eq!(seq.len(), 1);
        assert!(seq.state(0) < 4);
    }

    #[test]
    fn empirical_bigram_frequencies_match_stationary_times_transition() {
        let t = sample_transition_matrix(&mut rng(8), 4, 1.0).unwrap();
        let n = 100_000;
        let seq = sample_sequence(&t, n, &mut rng(9)).unwrap();
        let p = t.stationary().unwrap().to_vec();
        let mut counts = vec![0usize; 16];
        for i in 1..n {
            counts[seq.state(i) * 4 + seq.state(i - 1)] += 1;
        }
        for tau in 0..4 {
            for mu in 0..4 {
                let expect = p[mu] * t.prob(tau, mu);
                let freq = counts[tau * 4 + mu] as f64 / (n - 1) as f64;
                let sigma = (expect * (1.0 - expect) / (n - 1) as f64).sqrt();
                // Markov dependence inflates the multinomial error a little;
                // allow 5 nominal sigma.
                assert!(
                    (freq - expect).abs() < 5.0 * sigma.max(1e-5),
                    "bigram ({tau},{mu}): {freq} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn one_point_frequencies_match_stationary_within_3_sigma() {
        let t = sample_transition_matrix(&mut rng(10), 10, 1.0).unwrap();
        let n = 200_000;
        let seq = sample_sequence(&t, n, &mut rng(11)).unwrap();
        let p = t.stationary().unwrap().to_vec();
        let mut counts = vec![0usize; 10];
        for i in 0..n {
            counts[seq.state(i)] += 1;
        }
        for tau in 0..10 {
            let freq = counts[tau] as f64 / n as f64;
            let sigma = (p[tau] * (1.0 - p[tau]) / n as f64).sqrt();
            // 1-point counts of a mixing chain: allow a generous multiple of
            // the i.i.d. sigma to absorb autocorrelation.
            assert!((freq - p[tau]).abs() < 6.0 * sigma, "state {tau}");
        }
    }

    #[test]
    fn ablation_replaces_only_the_penultimate_state() {
        let t = sample_transition_matrix(&mut rng(12), 5, 1.0).unwrap();
        let seq = sample_sequence(&t, 20, &mut rng(13)).unwrap();
        let ab = ablate_penultimate(&seq, &t, &mut rng(14)).unwrap();
        for i in 0..20 {
            if i != 18 {
                assert_eq!(seq.states[i], ab.states[i]);
            }
        }
        let seq2 = sample_sequence(&t, 2, &mut rng(15)).unwrap();
        let ab2 = ablate_penultimate(&seq2, &t, &mut rng(16)).unwrap();
        assert_eq!(seq2.states[1], ab2.states[1]);
        let seq1 = sample_sequence(&t, 1, &mut rng(17)).unwrap();
        assert!(ablate_penultimate(&seq1, &t, &mut rng(18)).is_err());
    }

    #[test]
    fn ablation_removes_the_return_bias() {
        // P(s_1 = s_3 | chain) exceeds sum_tau p_tau^2-type baseline before
        // ablation; after resampling s_1 the correlation collapses to the
        // independent product.
        let t = sample_transition_matrix(&mut rng(19), 5, 0.3).unwrap();
        let p = t.stationary().unwrap().to_vec();
        let trials = 200_000;
        let mut rret = rng(20);
        let (mut hit_raw, mut hit_abl) = (0u64, 0u64);
        for i in 0..trials {
            let _ = i;
            let seq = sample_sequence(&t, 3, &mut rret).unwrap();
            if seq.state(0) == seq.state(2) {
                hit_raw += 1;
            }
            let ab = ablate_penultimate(
                &Sequence { states: seq.states[..2].to_vec(), task_index: None },
                &t,
                &mut rret,
            )
            .unwrap();
            // s_3 depends on s_2 only, so reuse it.
            if ab.state(0) == seq.state(2) {
                hit_abl += 1;
            }
        }
        // Analytic targets.
        let c = 5;
        let raw_expect: f64 = (0..c)
            .map(|s1| {
                (0..c)
                    .map(|s2| p[s1] * t.prob(s2, s1) * t.prob(s1, s2))
                    .sum::<f64>()
            })
            .sum();
        let abl_expect: f64 = (0..c)
            .map(|s1| {
                (0..c)
                    .map(|s2| p[s1] * p[s2] * t.prob(s1, s2))
                    .sum::<f64>()
            })
            .sum();
        let raw = hit_raw as f64 / trials as f64;
        let abl = hit_abl as f64 / trials as f64;
        let sig = (0.25 / trials as f64).sqrt() * 3.0;
        assert!((raw - raw_expect).abs() < sig, "raw {raw} vs {raw_expect}");
        assert!((abl - abl_expect).abs() < sig, "ablated {abl} vs {abl_expect}");
    }

    #[test]
    fn task_sets_nest_by_seed() {
        let a = build_task_set(42, 2, 10, 1.0).unwrap();
        let b = build_task_set(42, 4, 10, 1.0).unwrap();
        for k in 0..2 {
            assert_eq!(a.matrix(k).entries(), b.matrix(k).entries());
        }
        let c = build_task_set(43, 2, 10, 1.0).unwrap();
        assert_ne!(a.matrix(0).entries(), c.matrix(0).entries());
        let single = build_task_set(1, 1, 3, 2.0).unwrap();
        assert_eq!(single.k(), 1);
        assert!(build_task_set(1, 0, 3, 1.0).is_err());
    }

    #[test]
    fn training_batches_are_reproducible() {
        let tasks = build_task_set(5, 4, 6, 1.0).unwrap();
        let a = sample_training_batch(&tasks, 16, 8, 99, 3).unwrap();
        let b = sample_training_batch(&tasks, 16, 8, 99, 3).unwrap();
        assert_eq!(a, b);
        let c = sample_training_batch(&tasks, 16, 8, 99, 4).unwrap();
        assert_ne!(a, c);
    }
}
