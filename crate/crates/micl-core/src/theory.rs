//! Closed-form and Monte-Carlo evaluation of the escape-dynamics theory:
//! the return-bias coefficients F_d, the induction bias I, the first-order
//! loss slopes c_delta and c_beta, the predicted (beta, delta) flow, and the
//! transition-time scaling predictions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::markov::{sample_transition_matrix, TransitionMatrix};
use crate::streams;

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub sem: f64,
    pub samples: usize,
}

impl Estimate {
    fn from_samples(xs: &[f64]) -> Self {
        let (value, sem) = crate::bayes::mean_sem(xs);
        Estimate { value, sem, samples: xs.len() }
    }
}

/// Analytic F1 = (C-1) / (C^2 alpha + C) for the symmetric Dirichlet
/// ensemble.
pub fn f1_analytic(c: usize, alpha: f64) -> Result<f64> {
    if c < 2 {
        return Err(Error::parameter("state count must be >= 2"));
    }
    if !(alpha > 0.0) {
        return Err(Error::parameter("alpha must be positive"));
    }
    let cf = c as f64;
    Ok((cf - 1.0) / (cf * cf * alpha + cf))
}

/// Per-matrix F_d value: trace(T^{d+1}) - 1.
pub fn f_d_of(t: &TransitionMatrix, d: usize) -> f64 {
    let c = t.c();
    // power[.] = T^{d} applied column-wise, accumulated by repeated multiply.
    let mut power = t.entries().to_vec();
    for _ in 0..d {
        let mut next = vec![0.0; c * c];
        crate::tensor::dgemm(c, c, c, 1.0, t.entries(), false, &power, false, 0.0, &mut next);
        power = next;
    }
    let trace: f64 = (0..c).map(|i| power[i * c + i]).sum();
    trace - 1.0
}

/// Per-matrix induction bias I = sum_mu p_mu^2 (sum_tau T_{tau mu}^2 / p_tau - 1).
/// Cauchy-Schwarz makes it non-negative for every matrix.
pub fn i_of(t: &TransitionMatrix) -> Result<f64> {
    let c = t.c();
    let p = t.stationary()?;
    let mut total = 0.0;
    for mu in 0..c {
        let inner: f64 = (0..c).map(|tau| t.prob(tau, mu).powi(2) / p[tau]).sum();
        total += p[mu] * p[mu] * (inner - 1.0);
    }
    Ok(total)
}

/// The first expectation inside c_beta, < sum_mu p_mu T_mumu - p_mu^2 >,
/// which the theory treats as negligible; computed rather than assumed.
pub fn c_beta_remainder_of(t: &TransitionMatrix) -> Result<f64> {
    let c = t.c();
    let p = t.stationary()?;
    Ok((0..c).map(|mu| p[mu] * t.prob(mu, mu) - p[mu] * p[mu]).sum())
}

/// Ensemble-level Monte-Carlo statistics, cached with standard errors.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub c: usize,
    pub alpha: f64,
    pub seed: u64,
    pub f_d: Vec<Estimate>,
    pub i: Estimate,
    pub i_min: f64,
    pub c_beta_remainder: Estimate,
}

impl EnsembleStats {
    /// Estimates F_d for d = 1..=d_max over `f_samples` matrices and I (plus
    /// its remainder term) over `i_samples` matrices.
    pub fn estimate(
        c: usize,
        alpha: f64,
        d_max: usize,
        f_samples: usize,
        i_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if d_max < 1 {
            return Err(Error::parameter("d_max must be >= 1"));
        }
        // F_d samples: per matrix, all d at once (T^{d+1} accumulated).
        let f_rows: Vec<Vec<f64>> = (0..f_samples)
            .into_par_iter()
            .map(|i| -> Result<Vec<f64>> {
                let mut rng = streams::misc_rng(seed, i as u64);
                let t = sample_transition_matrix(&mut rng, c, alpha)?;
                let mut power = t.entries().to_vec();
                let mut out = Vec::with_capacity(d_max);
                for _ in 0..d_max {
                    let mut next = vec![0.0; c * c];
                    crate::tensor::dgemm(c, c, c, 1.0, t.entries(), false, &power, false, 0.0, &mut next);
                    power = next;
                    out.push((0..c).map(|i| power[i * c + i]).sum::<f64>() - 1.0);
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let f_d = (0..d_max)
            .map(|d| Estimate::from_samples(&f_rows.iter().map(|r| r[d]).collect::<Vec<_>>()))
            .collect();

        let i_rows: Vec<(f64, f64)> = (0..i_samples)
            .into_par_iter()
            .map(|i| -> Result<(f64, f64)> {
                let mut rng = streams::misc_rng(seed ^ 0x5eed, i as u64);
                let t = sample_transition_matrix(&mut rng, c, alpha)?;
                Ok((i_of(&t)?, c_beta_remainder_of(&t)?))
            })
            .collect::<Result<_>>()?;
        let i_vals: Vec<f64> = i_rows.iter().map(|r| r.0).collect();
        let rem: Vec<f64> = i_rows.iter().map(|r| r.1).collect();
        Ok(EnsembleStats {
            c,
            alpha,
            seed,
            f_d,
            i: Estimate::from_samples(&i_vals),
            i_min: i_vals.iter().copied().fold(f64::INFINITY, f64::min),
            c_beta_remainder: Estimate::from_samples(&rem),
        })
    }

    pub fn f_d(&self, d: usize) -> Result<Estimate> {
        self.f_d
            .get(d - 1)
            .copied()
            .ok_or_else(|| Error::parameter(format!("F_{d} not estimated (d_max = {})", self.f_d.len())))
    }
}

/// Harmonic number H_n.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum()
}

/// First-order slope along delta:
/// c_delta = w_B F1 / n + (w_D / n) sum_{i<=n} F_{n-i+1} / i.
/// F_d beyond the estimated range decays below Monte-Carlo resolution and is
/// truncated to zero.
pub fn c_delta(w_b: f64, w_d: f64, n: usize, stats: &EnsembleStats) -> Result<f64> {
    if n < 2 {
        return Err(Error::parameter("c_delta needs n >= 2"));
    }
    let f1 = stats.f_d(1)?.value;
    let mut tail = 0.0;
    for i in 1..=n {
        let d = n - i + 1;
        if d <= stats.f_d.len() {
            tail += stats.f_d[d - 1].value / i as f64;
        }
    }
    Ok(w_b * f1 / n as f64 + w_d * tail / n as f64)
}

/// First-order slope along beta: c_beta = w_C (H_n / n) I.
pub fn c_beta(w_c: f64, n: usize, stats: &EnsembleStats) -> Result<f64> {
    if n < 2 {
        return Err(Error::parameter("c_beta needs n >= 2"));
    }
    Ok(w_c * harmonic(n) / n as f64 * stats.i.value)
}

/// Euler-integrated early-time flow of (beta, delta) with w_B = w_C = 1/3:
///   dbeta/dt = (H_N / 3N) I
///   ddelta/dt = (H_N / 3N) I beta + F1 / 3N   (control)
/// the F1 term is dropped in the bias-ablated mode. Curves are reported in
/// optimizer steps: each Euler step advances `eval_every` SGD iterations at
/// learning rate `lr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowMode {
    Control,
    BiasAblated,
}

pub fn predicted_flow(
    n: usize,
    steps: usize,
    lr: f64,
    eval_every: usize,
    mode: FlowMode,
    stats: &EnsembleStats,
) -> Result<Vec<(f64, f64, f64)>> {
    if n < 2 {
        return Err(Error::parameter("flow needs n >= 2"));
    }
    let i_rate = harmonic(n) / (3.0 * n as f64) * stats.i.value;
    let f1_rate = stats.f_d(1)?.value / (3.0 * n as f64);
    let dt = lr * eval_every as f64;
    let mut beta = 0.0;
    let mut delta = 0.0;
    let mut out = Vec::with_capacity(steps + 1);
    out.push((0.0, beta, delta));
    for s in 1..=steps {
        let dbeta = i_rate;
        let ddelta = i_rate * beta
            + match mode {
                FlowMode::Control => f1_rate,
                FlowMode::BiasAblated => 0.0,
            };
        beta += dt * dbeta;
        delta += dt * ddelta;
        out.push(((s * eval_every) as f64, beta, delta));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauMode {
    NonAutoregressive,
    Autoregressive,
}

/// Transition-time scaling prediction, up to a common prefactor:
/// N / H_N for fixed-length training, and the harmonic-averaged
/// (1/N sum_m H_m/m)^{-1} ~ 2N/(log N)^2 for autoregressive training.
pub fn tau_prediction(n: usize, mode: TauMode) -> Result<f64> {
    if n < 2 {
        return Err(Error::parameter("tau prediction needs n >= 2"));
    }
    match mode {
        TauMode::NonAutoregressive => Ok(n as f64 / harmonic(n)),
        TauMode::Autoregressive => {
            let mean: f64 =
                (1..=n).map(|m| harmonic(m) / m as f64).sum::<f64>() / n as f64;
            Ok(1.0 / mean)
        }
    }
}
