//! The symmetry-constrained attention-only transformer in its three
//! parameterizations, trained non-autoregressively at the final position on
//! fresh Dirichlet matrices (the K -> infinity regime), plus transition-time
//! detection, loss-landscape scans, and early-time exponent fits.
//!
//! Forward passes and gradients are hand-derived (and finite-difference
//! checked): the reduced (beta, delta) model runs in O(N + C) per sequence,
//! the constrained and full models in O(N^2 + N C).

use rayon::prelude::*;

use crate::bayes::{predict_1gen, predict_2gen, PredictiveDistribution, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::markov::{ablate_penultimate, sample_sequence, sample_transition_matrix, Sequence};
use crate::streams;
use crate::theory::Estimate;

/// Reduced two-parameter model: previous-token bias delta, match scalar
/// beta, and explicit expert weights on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedParams {
    pub delta: f64,
    pub beta: f64,
    /// (w_A, w_B, w_C, w_D), non-negative, summing to 1.
    pub w: [f64; 4],
}

impl ReducedParams {
    pub fn plateau() -> Self {
        ReducedParams { delta: 0.0, beta: 0.0, w: [0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0] }
    }
}

/// The eight-scalar SA-transformer: one layer-1 content scalar, four layer-2
/// block scalars, two relative positional-bias tables, and four expert
/// logits with the first pinned to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SaParams {
    pub beta1_1: f64,
    pub beta2: [f64; 4],
    /// p1[r] = P^(1)_{-r}; r = 0 is the self offset, r = 1 the previous token.
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub w_logits: [f64; 4],
}

impl SaParams {
    pub fn zeros(n_max: usize) -> Self {
        SaParams {
            beta1_1: 0.0,
            beta2: [0.0; 4],
            p1: vec![0.0; n_max],
            p2: vec![0.0; n_max],
            w_logits: [0.0; 4],
        }
    }

    pub fn weights(&self) -> [f64; 4] {
        softmax4(&self.w_logits)
    }

    /// Embeds reduced parameters: beta2[2] = beta, p1[1] = delta, rest zero.
    pub fn from_reduced(r: &ReducedParams, n_max: usize) -> Self {
        let mut p = SaParams::zeros(n_max);
        p.beta2[2] = r.beta;
        if n_max > 1 {
            p.p1[1] = r.delta;
        }
        p.w_logits = logits_for(&r.w);
        p
    }
}

/// Unconstrained validation model: full content matrices M1 (C x C) and
/// M2 (2C x 2C) with positional tables and expert logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FullSaParams {
    pub c: usize,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub w_logits: [f64; 4],
}

impl FullSaParams {
    pub fn zeros(c: usize, n_max: usize) -> Self {
        FullSaParams {
            c,
            m1: vec![0.0; c * c],
            m2: vec![0.0; 4 * c * c],
            p1: vec![0.0; n_max],
            p2: vec![0.0; n_max],
            w_logits: [0.0; 4],
        }
    }

    pub fn weights(&self) -> [f64; 4] {
        softmax4(&self.w_logits)
    }

    /// Embeds the constrained scalars into block-identity matrices.
    pub fn from_constrained(p: &SaParams, c: usize) -> Self {
        let mut f = FullSaParams::zeros(c, p.p1.len());
        for i in 0..c {
            f.m1[i * c + i] = p.beta1_1;
            let d = 2 * c;
            f.m2[i * d + i] = p.beta2[0];
            f.m2[i * d + (c + i)] = p.beta2[1];
            f.m2[(c + i) * d + i] = p.beta2[2];
            f.m2[(c + i) * d + (c + i)] = p.beta2[3];
        }
        f.p1 = p.p1.clone();
        f.p2 = p.p2.clone();
        f.w_logits = p.w_logits;
        f
    }
}

pub fn softmax4(logits: &[f64; 4]) -> [f64; 4] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w = [0.0; 4];
    let mut z = 0.0;
    for e in 0..4 {
        w[e] = (logits[e] - max).exp();
        z += w[e];
    }
    for e in w.iter_mut() {
        *e /= z;
    }
    w
}

fn logits_for(w: &[f64; 4]) -> [f64; 4] {
    // logit_A pinned at 0; degenerate zero weights clamp far negative.
    let base = w[0].max(1e-300);
    let mut l = [0.0; 4];
    for e in 1..4 {
        l[e] = (w[e].max(1e-300) / base).ln();
    }
    l
}

/// The four expert distributions at the final position.
#[derive(Debug, Clone)]
pub struct Experts {
    /// Rows: repeat-token, layer-1 pool, layer-2 pool, composed path.
    pub e: [Vec<f64>; 4],
}

impl Experts {
    pub fn mix(&self, w: &[f64; 4]) -> Vec<f64> {
        let c = self.e[0].len();
        let mut pi = vec![0.0; c];
        for (we, ee) in w.iter().zip(&self.e) {
            for tau in 0..c {
                pi[tau] += we * ee[tau];
            }
        }
        pi
    }
}

// ---------------------------------------------------------------------------
// Reduced model: O(N + C) forward and backward.
// ---------------------------------------------------------------------------

struct ReducedCache {
    /// A^{(2)}_{iN} for every position (0-based).
    a2: Vec<f64>,
    /// Match scores m_i entering the layer-2 softmax.
    m: Vec<f64>,
    experts: Experts,
    pi: Vec<f64>,
}

fn reduced_cache(p: &ReducedParams, states: &[u16], c: usize) -> ReducedCache {
    let n = states.len();
    let mu = states[n - 1] as usize;
    let ed = p.delta.exp();
    let mut k = vec![0.0f64; c];
    let mut k_mu = 0.0;
    let mut m = vec![0.0; n];
    for i in 0..n {
        let s = states[i] as usize;
        k[s] += 1.0;
        if s == mu {
            k_mu += 1.0;
        }
        if i == 0 {
            m[i] = if s == mu { 1.0 } else { 0.0 };
        } else {
            let z = i as f64 + ed; // (i+1-1) + e^delta at 1-based position i+1
            let prev_match = if states[i - 1] as usize == mu { ed - 1.0 } else { 0.0 };
            m[i] = (k_mu + prev_match) / z;
        }
    }
    // Layer-2 softmax over positions.
    let beta = p.beta;
    let max = m.iter().map(|v| beta * v).fold(f64::NEG_INFINITY, f64::max);
    let mut a2 = vec![0.0; n];
    let mut z2 = 0.0;
    for i in 0..n {
        a2[i] = (beta * m[i] - max).exp();
        z2 += a2[i];
    }
    for v in a2.iter_mut() {
        *v /= z2;
    }
    // Experts.
    let mut e_a = vec![0.0; c];
    e_a[mu] = 1.0;
    // E_B = a_N.
    let z_n = (n - 1) as f64 + ed;
    let mut e_b = vec![0.0; c];
    if n == 1 {
        e_b[states[0] as usize] = 1.0;
    } else {
        for tau in 0..c {
            e_b[tau] = k[tau] / z_n;
        }
        e_b[states[n - 2] as usize] += (ed - 1.0) / z_n;
    }
    // E_C: pool of one-hots under A2.
    let mut e_c = vec![0.0; c];
    for i in 0..n {
        e_c[states[i] as usize] += a2[i];
    }
    // E_D via suffix sums of A2_i / Z_i.
    let mut e_d = vec![0.0; c];
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        let z = if i == 0 { 1.0 } else { i as f64 + ed };
        suffix += a2[i] / z;
        e_d[states[i] as usize] += suffix;
        if i >= 1 {
            e_d[states[i - 1] as usize] += (ed - 1.0) * a2[i] / z;
        }
    }
    let experts = Experts { e: [e_a, e_b, e_c, e_d] };
    let pi = experts.mix(&p.w);
    ReducedCache { a2, m, experts, pi }
}

/// Final-position prediction of the reduced model.
pub fn reduced_forward(p: &ReducedParams, seq: &Sequence, c: usize) -> Result<PredictiveDistribution> {
    if seq.is_empty() {
        return Err(Error::parameter("empty sequence"));
    }
    let cache = reduced_cache(p, &seq.states, c);
    Ok(PredictiveDistribution::new_unchecked(cache.pi))
}

/// The four expert distributions of the reduced model (for landscape scans).
pub fn reduced_experts(p: &ReducedParams, states: &[u16], c: usize) -> Experts {
    reduced_cache(p, states, c).experts
}

/// Gradient of the floored full-cross-entropy loss
/// `-sum_tau t[tau] ln pi_tau` with respect to (delta, beta, w).
#[derive(Debug, Clone, Copy, Default)]
pub struct ReducedGrad {
    pub delta: f64,
    pub beta: f64,
    pub w: [f64; 4],
    pub loss: f64,
    pub floored: bool,
}

pub fn reduced_loss_grad(p: &ReducedParams, states: &[u16], c: usize, target_col: &[f64]) -> ReducedGrad {
    let n = states.len();
    let mu = states[n - 1] as usize;
    let cache = reduced_cache(p, states, c);
    let ed = p.delta.exp();
    // Loss and dL/dpi.
    let mut loss = 0.0;
    let mut floored = false;
    let mut g = vec![0.0; c]; // dL/dpi
    for tau in 0..c {
        let t = target_col[tau];
        if t == 0.0 {
            continue;
        }
        let pi = cache.pi[tau];
        if pi < LOG_FLOOR {
            loss -= t * LOG_FLOOR.ln();
            floored = true;
        } else {
            loss -= t * pi.ln();
            g[tau] = -t / pi;
        }
    }
    // Expert-weight gradient.
    let mut gw = [0.0; 4];
    for e in 0..4 {
        gw[e] = dot(&g, &cache.experts.e[e]);
    }
    let (w_b, w_c, w_d) = (p.w[1], p.w[2], p.w[3]);
    // dL/dA2_i and the softmax pullback r_i.
    let n_f = |i: usize| -> f64 { if i == 0 { 1.0 } else { i as f64 + ed } };
    // dA2_i = w_C g[s_i] + w_D <g, a_i>; <g, a_i> = (gk_i + (e^d - 1) g[prev]) / Z_i.
    let mut d_a2 = vec![0.0; n];
    let mut gk = 0.0; // running <g, k_i>
    for i in 0..n {
        gk += g[states[i] as usize];
        let ga_i = if i == 0 {
            g[states[0] as usize]
        } else {
            let prev = states[i - 1] as usize;
            (gk + (ed - 1.0) * g[prev]) / n_f(i)
        };
        d_a2[i] = w_c * g[states[i] as usize] + w_d * ga_i;
    }
    let s: f64 = (0..n).map(|i| cache.a2[i] * d_a2[i]).sum();
    let mut g_beta = 0.0;
    let mut g_delta = 0.0;
    let mut gk2 = 0.0; // running <g, k_i> for the second sweep
    let mut k_mu = 0.0;
    for i in 0..n {
        let r_i = cache.a2[i] * (d_a2[i] - s);
        g_beta += r_i * cache.m[i];
        let si = states[i] as usize;
        gk2 += g[si];
        if si == mu {
            k_mu += 1.0;
        }
        if i >= 1 {
            // D_i[tau] = w_D A2_i g[tau] + [tau=mu] beta r_i + [i=N] w_B g[tau]
            let last = i == n - 1;
            let prev = states[i - 1] as usize;
            let d_prev = w_d * cache.a2[i] * g[prev]
                + if prev == mu { p.beta * r_i } else { 0.0 }
                + if last { w_b * g[prev] } else { 0.0 };
            let dk = w_d * cache.a2[i] * gk2
                + p.beta * r_i * k_mu
                + if last { w_b * gk2 } else { 0.0 };
            let z = n_f(i);
            let pos = (i + 1) as f64; // 1-based position
            g_delta += ed * (pos * d_prev - dk) / (z * z);
        }
    }
    ReducedGrad { delta: g_delta, beta: g_beta, w: gw, loss, floored }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Full model (the constrained model is the block-identity special case).
// ---------------------------------------------------------------------------

struct FullCache {
    /// Per-position attended-content vectors a_i, row-major [n, c].
    a: Vec<f64>,
    /// Layer-1 attention rows, flattened lower triangle (row i has i+1 entries).
    tri: Vec<f64>,
    /// Layer-2 weights on the final position.
    a2: Vec<f64>,
    experts: Experts,
    pi: Vec<f64>,
}

fn tri_offset(i: usize) -> usize {
    i * (i + 1) / 2
}

fn full_cache(p: &FullSaParams, states: &[u16], w: &[f64; 4]) -> FullCache {
    let c = p.c;
    let n = states.len();
    let mu = states[n - 1] as usize;
    let d2 = 2 * c;
    let mut a = vec![0.0; n * c];
    let mut tri = vec![0.0; tri_offset(n)];
    // Layer-1 rows.
    for i in 0..n {
        let si = states[i] as usize;
        let off = tri_offset(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            let sj = states[j] as usize;
            let score = p.m1[sj * c + si] + p.p1[i - j];
            tri[off + j] = score;
            if score > max {
                max = score;
            }
        }
        let mut z = 0.0;
        for j in 0..=i {
            let e = (tri[off + j] - max).exp();
            tri[off + j] = e;
            z += e;
        }
        for j in 0..=i {
            tri[off + j] /= z;
            a[i * c + states[j] as usize] += tri[off + j];
        }
    }
    let a_n: Vec<f64> = a[(n - 1) * c..n * c].to_vec();
    // Layer-2 scores on the final position's row.
    // v12[sigma] = (M12 a_N)[sigma]; v21[tau] = M21[tau, mu]; v22 = M22 a_N.
    let mut v12 = vec![0.0; c];
    let mut v22 = vec![0.0; c];
    for tau in 0..c {
        for tp in 0..c {
            v12[tau] += p.m2[tau * d2 + (c + tp)] * a_n[tp];
            v22[tau] += p.m2[(c + tau) * d2 + (c + tp)] * a_n[tp];
        }
    }
    let mut scores2 = vec![0.0; n];
    let mut max2 = f64::NEG_INFINITY;
    for i in 0..n {
        let si = states[i] as usize;
        let ai = &a[i * c..(i + 1) * c];
        let mut e = p.m2[si * d2 + mu] + v12[si] + p.p2[n - 1 - i];
        for tau in 0..c {
            e += ai[tau] * (p.m2[(c + tau) * d2 + mu] + v22[tau]);
        }
        scores2[i] = e;
        if e > max2 {
            max2 = e;
        }
    }
    let mut a2 = vec![0.0; n];
    let mut z2 = 0.0;
    for i in 0..n {
        a2[i] = (scores2[i] - max2).exp();
        z2 += a2[i];
    }
    for v in a2.iter_mut() {
        *v /= z2;
    }
    drop(scores2);
    // Experts.
    let mut e_a = vec![0.0; c];
    e_a[mu] = 1.0;
    let e_b = a_n.clone();
    let mut e_c = vec![0.0; c];
    let mut e_d = vec![0.0; c];
    for i in 0..n {
        e_c[states[i] as usize] += a2[i];
        for tau in 0..c {
            e_d[tau] += a2[i] * a[i * c + tau];
        }
    }
    let experts = Experts { e: [e_a, e_b, e_c, e_d] };
    let pi = experts.mix(w);
    FullCache { a, tri, a2, experts, pi }
}

/// Final-position prediction of the unconstrained (or embedded constrained)
/// model.
pub fn full_forward(p: &FullSaParams, seq: &Sequence) -> Result<PredictiveDistribution> {
    if seq.is_empty() {
        return Err(Error::parameter("empty sequence"));
    }
    let cache = full_cache(p, &seq.states, &p.weights());
    Ok(PredictiveDistribution::new_unchecked(cache.pi))
}

/// Gradients of the full model's floored cross-entropy loss.
#[derive(Debug, Clone)]
pub struct FullGrad {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    /// Gradient pulled back through the pinned-logit softmax.
    pub w_logits: [f64; 4],
    /// Raw gradient with respect to the expert weights themselves.
    pub w_raw: [f64; 4],
    pub loss: f64,
    pub floored: bool,
}

pub fn full_loss_grad(p: &FullSaParams, states: &[u16], target_col: &[f64]) -> FullGrad {
    full_loss_grad_with_w(p, states, target_col, &p.weights())
}

pub fn full_loss_grad_with_w(
    p: &FullSaParams,
    states: &[u16],
    target_col: &[f64],
    w: &[f64; 4],
) -> FullGrad {
    let c = p.c;
    let d2 = 2 * c;
    let n = states.len();
    let mu = states[n - 1] as usize;
    let w = *w;
    let cache = full_cache(p, states, &w);
    let mut loss = 0.0;
    let mut floored = false;
    let mut g = vec![0.0; c];
    for tau in 0..c {
        let t = target_col[tau];
        if t == 0.0 {
            continue;
        }
        let pi = cache.pi[tau];
        if pi < LOG_FLOOR {
            loss -= t * LOG_FLOOR.ln();
            floored = true;
        } else {
            loss -= t * pi.ln();
            g[tau] = -t / pi;
        }
    }
    let mut gw = [0.0; 4];
    for e in 0..4 {
        gw[e] = dot(&g, &cache.experts.e[e]);
    }
    // Softmax pullback onto the three free logits.
    let mean: f64 = (0..4).map(|e| w[e] * gw[e]).sum();
    let mut g_logits = [0.0; 4];
    for e in 1..4 {
        g_logits[e] = w[e] * (gw[e] - mean);
    }
    // dL/dA2_i -> r_i.
    let mut d_a2 = vec![0.0; n];
    for i in 0..n {
        d_a2[i] = w[2] * g[states[i] as usize] + w[3] * dot(&g, &cache.a[i * c..(i + 1) * c]);
    }
    let s: f64 = (0..n).map(|i| cache.a2[i] * d_a2[i]).sum();
    let r: Vec<f64> = (0..n).map(|i| cache.a2[i] * (d_a2[i] - s)).collect();
    // Gradients through the layer-2 scores.
    let mut gm2 = vec![0.0; 4 * c * c];
    let mut gp2 = vec![0.0; p.p2.len()];
    // D[i][tau]: gradient wrt a_i.
    let mut d = vec![0.0; n * c];
    let a_n: Vec<f64> = cache.a[(n - 1) * c..n * c].to_vec();
    // vecA[tau] = sum_i r_i a_i[tau]
    let mut vec_a = vec![0.0; c];
    for i in 0..n {
        for tau in 0..c {
            vec_a[tau] += r[i] * cache.a[i * c + tau];
        }
    }
    let mut v22 = vec![0.0; c];
    for tau in 0..c {
        for tp in 0..c {
            v22[tau] += p.m2[(c + tau) * d2 + (c + tp)] * a_n[tp];
        }
    }
    for i in 0..n {
        let si = states[i] as usize;
        gp2[n - 1 - i] += r[i];
        gm2[si * d2 + mu] += r[i];
        // block12: dM12[si, tp] += r_i a_N[tp]; pullback to a_N below.
        for tp in 0..c {
            gm2[si * d2 + (c + tp)] += r[i] * a_n[tp];
        }
        // block21 and block22 content gradients onto a_i.
        for tau in 0..c {
            d[i * c + tau] += r[i] * (p.m2[(c + tau) * d2 + mu] + v22[tau]);
        }
    }
    // block21 parameter gradient: dM21[tau, mu] += vecA[tau].
    for tau in 0..c {
        gm2[(c + tau) * d2 + mu] += vec_a[tau];
    }
    // block22 parameter gradient: dM22[tau, tp] += vecA[tau] a_N[tp].
    for tau in 0..c {
        for tp in 0..c {
            gm2[(c + tau) * d2 + (c + tp)] += vec_a[tau] * a_n[tp];
        }
    }
    // a_N receives: expert-B path, M12 path, M22 path.
    {
        let last = (n - 1) * c;
        for tau in 0..c {
            d[last + tau] += w[1] * g[tau];
        }
        // M12 path: sum_i r_i M12[s_i, tau].
        for i in 0..n {
            let si = states[i] as usize;
            for tau in 0..c {
                d[last + tau] += r[i] * p.m2[si * d2 + (c + tau)];
            }
        }
        // M22 path: sum_tau vecA[tau] M22[tau, tp].
        for tp in 0..c {
            let mut acc = 0.0;
            for tau in 0..c {
                acc += vec_a[tau] * p.m2[(c + tau) * d2 + (c + tp)];
            }
            d[last + tp] += acc;
        }
    }
    // Expert-D path onto every a_i.
    for i in 0..n {
        for tau in 0..c {
            d[i * c + tau] += w[3] * cache.a2[i] * g[tau];
        }
    }
    // Layer-1 softmax rows.
    let mut gm1 = vec![0.0; c * c];
    let mut gp1 = vec![0.0; p.p1.len()];
    for i in 0..n {
        let si = states[i] as usize;
        let off = tri_offset(i);
        let di = &d[i * c..(i + 1) * c];
        // inner = sum_j A_ji D_i[s_j] = <a_i, D_i>
        let inner = dot(&cache.a[i * c..(i + 1) * c], di);
        for j in 0..=i {
            let sj = states[j] as usize;
            let ds = cache.tri[off + j] * (di[sj] - inner);
            gm1[sj * c + si] += ds;
            gp1[i - j] += ds;
        }
    }
    FullGrad { m1: gm1, m2: gm2, p1: gp1, p2: gp2, w_logits: g_logits, w_raw: gw, loss, floored }
}

/// Constrained forward: the eight-scalar model evaluated by embedding into
/// the block-identity full model.
pub fn constrained_forward(p: &SaParams, seq: &Sequence, c: usize) -> Result<PredictiveDistribution> {
    full_forward(&FullSaParams::from_constrained(p, c), seq)
}

/// Gradients of the constrained model, obtained by summing the tied entries
/// of the full-model gradient.
#[derive(Debug, Clone)]
pub struct ConstrainedGrad {
    pub beta1_1: f64,
    pub beta2: [f64; 4],
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub w_logits: [f64; 4],
    pub loss: f64,
    pub floored: bool,
}

pub fn constrained_loss_grad(
    p: &SaParams,
    states: &[u16],
    c: usize,
    target_col: &[f64],
) -> ConstrainedGrad {
    let full = FullSaParams::from_constrained(p, c);
    let fg = full_loss_grad(&full, states, target_col);
    let d2 = 2 * c;
    let mut beta2 = [0.0; 4];
    let mut beta1_1 = 0.0;
    for i in 0..c {
        beta1_1 += fg.m1[i * c + i];
        beta2[0] += fg.m2[i * d2 + i];
        beta2[1] += fg.m2[i * d2 + (c + i)];
        beta2[2] += fg.m2[(c + i) * d2 + i];
        beta2[3] += fg.m2[(c + i) * d2 + (c + i)];
    }
    ConstrainedGrad {
        beta1_1,
        beta2,
        p1: fg.p1,
        p2: fg.p2,
        w_logits: fg.w_logits,
        loss: fg.loss,
        floored: fg.floored,
    }
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SaVariant {
    Full,
    Constrained,
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DataMode {
    Control,
    BiasAblated,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SaTrainConfig {
    pub c: usize,
    pub alpha: f64,
    pub n: usize,
    pub batch: usize,
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
    pub variant: SaVariant,
    pub data: DataMode,
    /// Log cadence in iterations.
    pub eval_every: usize,
    /// Learning-rate multiplier for the simplex-projected expert weights.
    /// A full-size step overshoots straight onto simplex vertices where the
    /// metric floor silences the escaping gradient.
    pub w_lr_scale: f64,
}

impl SaTrainConfig {
    pub fn new(n: usize, iters: usize, seed: u64, variant: SaVariant) -> Self {
        SaTrainConfig {
            c: 10,
            alpha: 1.0,
            n,
            batch: 256,
            lr: 1.0,
            iters,
            seed,
            variant,
            data: DataMode::Control,
            eval_every: 1,
            w_lr_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SaRow {
    pub iter: usize,
    pub loss: f64,
    pub w: [f64; 4],
    pub beta: f64,
    pub delta: f64,
    pub block_norms: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SaTrainLog {
    pub config: SaTrainConfig,
    pub rows: Vec<SaRow>,
    pub floored_samples: usize,
    pub block_labels: Vec<String>,
}

enum TrainState {
    Reduced { delta: f64, beta: f64, w: [f64; 4] },
    Constrained { p: SaParams, w: [f64; 4] },
    Full { p: FullSaParams, w: [f64; 4] },
}

impl TrainState {
    fn weights(&self) -> [f64; 4] {
        match self {
            TrainState::Reduced { w, .. }
            | TrainState::Constrained { w, .. }
            | TrainState::Full { w, .. } => *w,
        }
    }
}

fn frob(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Trains the SA-transformer with plain SGD on the final-position
/// cross-entropy, sampling a fresh transition matrix for every sequence in
/// every batch (the K -> infinity regime). Aborts with a numeric error if
/// the loss turns non-finite, returning the trajectory collected so far in
/// the error message.
pub fn sa_train(config: &SaTrainConfig) -> Result<SaTrainLog> {
    if config.n < 2 || config.batch == 0 || config.eval_every == 0 {
        return Err(Error::parameter("bad SA training config"));
    }
    let mut state = match config.variant {
        SaVariant::Reduced => TrainState::Reduced { delta: 0.0, beta: 0.0, w: [0.25; 4] },
        SaVariant::Constrained => {
            TrainState::Constrained { p: SaParams::zeros(config.n), w: [0.25; 4] }
        }
        SaVariant::Full => {
            TrainState::Full { p: FullSaParams::zeros(config.c, config.n), w: [0.25; 4] }
        }
    };
    let block_labels: Vec<String> = match config.variant {
        SaVariant::Reduced => vec![],
        SaVariant::Constrained => ["beta2_1", "beta2_2", "beta2_3", "beta2_4", "beta1_1", "p1_norm", "p2_norm"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        SaVariant::Full => {
            ["m2_11_frob", "m2_12_frob", "m2_21_frob", "m2_22_frob", "m1_frob", "p2_norm", "m2_21_diag_mean", "m2_21_offdiag_frob"]
                .iter()
                .map(|s| s.to_string())
                .collect()
        }
    };
    let mut rows = Vec::new();
    let mut floored_samples = 0usize;
    let chunks = 8usize.min(config.batch);
    for iter in 0..config.iters {
        // One batch: fresh matrix + sequence per item, fixed chunked
        // reduction order for determinism under any thread count.
        let per_chunk = (config.batch + chunks - 1) / chunks;
        let batch_results: Vec<Result<BatchAccum>> = (0..chunks)
            .into_par_iter()
            .map(|chunk| {
                let lo = chunk * per_chunk;
                let hi = ((chunk + 1) * per_chunk).min(config.batch);
                let mut acc = BatchAccum::zero(&state, config);
                for item in lo..hi {
                    let mut rng = streams::sequence_rng(config.seed, iter as u64, item as u64);
                    let t = sample_transition_matrix(&mut rng, config.c, config.alpha)?;
                    let mut seq = sample_sequence(&t, config.n, &mut rng)?;
                    if config.data == DataMode::BiasAblated {
                        seq = ablate_penultimate(&seq, &t, &mut rng)?;
                    }
                    let col = t.column(seq.state(config.n - 1));
                    acc.accumulate(&state, config, &seq.states, &col);
                }
                Ok(acc)
            })
            .collect();
        let mut total = BatchAccum::zero(&state, config);
        for r in batch_results {
            total.merge(r?);
        }
        let scale = 1.0 / config.batch as f64;
        let loss = total.loss * scale;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite loss at iteration {iter}")));
        }
        floored_samples += total.floored;
        if iter % config.eval_every == 0 {
            rows.push(log_row(iter, loss, &state, &block_labels));
        }
        apply_sgd(&mut state, &total, scale * config.lr, config.w_lr_scale);
    }
    Ok(SaTrainLog { config: config.clone(), rows, floored_samples, block_labels })
}

struct BatchAccum {
    loss: f64,
    floored: usize,
    // Gradient accumulators, laid out per variant.
    scalars: Vec<f64>,
    vec_a: Vec<f64>,
    vec_b: Vec<f64>,
    vec_c: Vec<f64>,
    vec_d: Vec<f64>,
    w_grad: [f64; 4],
}

impl BatchAccum {
    fn zero(state: &TrainState, config: &SaTrainConfig) -> Self {
        let (na, nb, nc, nd, ns) = match state {
            TrainState::Reduced { .. } => (0, 0, 0, 0, 2),
            TrainState::Constrained { .. } => (config.n, config.n, 0, 0, 5),
            TrainState::Full { p, .. } => (p.p1.len(), p.p2.len(), p.c * p.c, 4 * p.c * p.c, 0),
        };
        BatchAccum {
            loss: 0.0,
            floored: 0,
            scalars: vec![0.0; ns],
            vec_a: vec![0.0; na],
            vec_b: vec![0.0; nb],
            vec_c: vec![0.0; nc],
            vec_d: vec![0.0; nd],
            w_grad: [0.0; 4],
        }
    }

    fn accumulate(&mut self, state: &TrainState, _config: &SaTrainConfig, states: &[u16], col: &[f64]) {
        match state {
            TrainState::Reduced { delta, beta, w } => {
                let p = ReducedParams { delta: *delta, beta: *beta, w: *w };
                let g = reduced_loss_grad(&p, states, col.len(), col);
                self.loss += g.loss;
                self.floored += g.floored as usize;
                self.scalars[0] += g.delta;
                self.scalars[1] += g.beta;
                for e in 0..4 {
                    self.w_grad[e] += g.w[e];
                }
            }
            TrainState::Constrained { p, w } => {
                let full = FullSaParams::from_constrained(p, col.len());
                let g = full_loss_grad_with_w(&full, states, col, w);
                self.loss += g.loss;
                self.floored += g.floored as usize;
                let c = col.len();
                let d2 = 2 * c;
                for i in 0..c {
                    self.scalars[0] += g.m1[i * c + i];
                    self.scalars[1] += g.m2[i * d2 + i];
                    self.scalars[2] += g.m2[i * d2 + (c + i)];
                    self.scalars[3] += g.m2[(c + i) * d2 + i];
                    self.scalars[4] += g.m2[(c + i) * d2 + (c + i)];
                }
                add_into(&mut self.vec_a, &g.p1);
                add_into(&mut self.vec_b, &g.p2);
                for e in 0..4 {
                    self.w_grad[e] += g.w_raw[e];
                }
            }
            TrainState::Full { p, w } => {
                let g = full_loss_grad_with_w(p, states, col, w);
                self.loss += g.loss;
                self.floored += g.floored as usize;
                add_into(&mut self.vec_a, &g.p1);
                add_into(&mut self.vec_b, &g.p2);
                add_into(&mut self.vec_c, &g.m1);
                add_into(&mut self.vec_d, &g.m2);
                for e in 0..4 {
                    self.w_grad[e] += g.w_raw[e];
                }
            }
        }
    }

    fn merge(&mut self, other: BatchAccum) {
        self.loss += other.loss;
        self.floored += other.floored;
        add_into(&mut self.scalars, &other.scalars);
        add_into(&mut self.vec_a, &other.vec_a);
        add_into(&mut self.vec_b, &other.vec_b);
        add_into(&mut self.vec_c, &other.vec_c);
        add_into(&mut self.vec_d, &other.vec_d);
        for e in 0..4 {
            self.w_grad[e] += other.w_grad[e];
        }
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn apply_sgd(state: &mut TrainState, acc: &BatchAccum, step: f64, w_scale: f64) {
    // Expert weights update by projected SGD directly on the simplex: the
    // logit softmax would give w_A a power-law tail (its advantage gap
    // collapses to O(F_1) once small), while the escape-dynamics analysis
    // and the 500-iteration w_A bound presume direct-coordinate flow.
    match state {
        TrainState::Reduced { delta, beta, w } => {
            *delta -= step * acc.scalars[0];
            *beta -= step * acc.scalars[1];
            for e in 0..4 {
                w[e] -= w_scale * step * acc.w_grad[e];
            }
            project_simplex(w);
        }
        TrainState::Constrained { p, w } => {
            p.beta1_1 -= step * acc.scalars[0];
            for e in 0..4 {
                p.beta2[e] -= step * acc.scalars[1 + e];
            }
            for (x, g) in p.p1.iter_mut().zip(&acc.vec_a) {
                *x -= step * g;
            }
            for (x, g) in p.p2.iter_mut().zip(&acc.vec_b) {
                *x -= step * g;
            }
            for e in 0..4 {
                w[e] -= w_scale * step * acc.w_grad[e];
            }
            project_simplex(w);
        }
        TrainState::Full { p, w } => {
            for (x, g) in p.p1.iter_mut().zip(&acc.vec_a) {
                *x -= step * g;
            }
            for (x, g) in p.p2.iter_mut().zip(&acc.vec_b) {
                *x -= step * g;
            }
            for (x, g) in p.m1.iter_mut().zip(&acc.vec_c) {
                *x -= step * g;
            }
            for (x, g) in p.m2.iter_mut().zip(&acc.vec_d) {
                *x -= step * g;
            }
            for e in 0..4 {
                w[e] -= w_scale * step * acc.w_grad[e];
            }
            project_simplex(w);
        }
    }
}

fn log_row(iter: usize, loss: f64, state: &TrainState, _labels: &[String]) -> SaRow {
    let w = state.weights();
    match state {
        TrainState::Reduced { delta, beta, .. } => SaRow {
            iter,
            loss,
            w,
            beta: *beta,
            delta: *delta,
            block_norms: vec![],
        },
        TrainState::Constrained { p, .. } => SaRow {
            iter,
            loss,
            w,
            beta: p.beta2[2],
            delta: if p.p1.len() > 1 { p.p1[1] } else { 0.0 },
            block_norms: vec![
                p.beta2[0].abs(),
                p.beta2[1].abs(),
                p.beta2[2].abs(),
                p.beta2[3].abs(),
                p.beta1_1.abs(),
                frob(&p.p1),
                frob(&p.p2),
            ],
        },
        TrainState::Full { p, .. } => {
            let c = p.c;
            let d2 = 2 * c;
            let block = |ro: usize, co: usize| -> f64 {
                let mut s = 0.0;
                for i in 0..c {
                    for j in 0..c {
                        s += p.m2[(ro + i) * d2 + (co + j)].powi(2);
                    }
                }
                s.sqrt()
            };
            let diag_mean: f64 =
                (0..c).map(|i| p.m2[(c + i) * d2 + i]).sum::<f64>() / c as f64;
            let offdiag: f64 = {
                let mut s = 0.0;
                for i in 0..c {
                    for j in 0..c {
                        if i != j {
                            s += p.m2[(c + i) * d2 + j].powi(2);
                        }
                    }
                }
                s.sqrt()
            };
            SaRow {
                iter,
                loss,
                w,
                beta: diag_mean,
                delta: if p.p1.len() > 1 { p.p1[1] } else { 0.0 },
                block_norms: vec![
                    block(0, 0),
                    block(0, c),
                    block(c, 0),
                    block(c, c),
                    frob(&p.m1),
                    frob(&p.p2),
                    diag_mean,
                    offdiag,
                ],
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Baselines, transition detection, landscape, exponents, sign test.
// ---------------------------------------------------------------------------

/// Monte-Carlo final-position cross-entropy of the regularized 1-Gen and
/// 2-Gen predictors on fresh length-n sequences: the loss levels the SA
/// plateaus sit at.
#[derive(Debug, Clone, Copy)]
pub struct FixedLenBaselines {
    pub l1gen: Estimate,
    pub l2gen: Estimate,
}

pub fn fixed_length_baselines(
    c: usize,
    alpha: f64,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<FixedLenBaselines> {
    let rows: Vec<(f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let mut rng = streams::misc_rng(seed ^ 0xba5e, i as u64);
            let t = sample_transition_matrix(&mut rng, c, alpha)?;
            let seq = sample_sequence(&t, n, &mut rng)?;
            let col = t.column(seq.state(n - 1));
            let p1 = predict_1gen(&seq.states, c, crate::bayes::DEFAULT_ALPHA_PRIME);
            let p2 = predict_2gen(&seq.states, c);
            let ce = |p: &PredictiveDistribution| -> f64 {
                -(0..c).map(|tau| col[tau] * p.probs()[tau].max(LOG_FLOOR).ln()).sum::<f64>()
            };
            Ok((ce(&p1), ce(&p2)))
        })
        .collect::<Result<_>>()?;
    let l1: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let l2: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (m1, s1) = crate::bayes::mean_sem(&l1);
    let (m2, s2) = crate::bayes::mean_sem(&l2);
    Ok(FixedLenBaselines {
        l1gen: Estimate { value: m1, sem: s1, samples },
        l2gen: Estimate { value: m2, sem: s2, samples },
    })
}

/// Monte-Carlo loss levels of the model-class 1-Gen and 2-Gen
/// implementations: the reduced model at the plateau point
/// (w = (0, 1/3, 1/3, 1/3), beta = delta = 0) and deep in the induction
/// basin (beta = delta = 8) with ensemble-optimized expert weights. At small
/// N these sit above the Bayes-predictor losses because context states that
/// never appeared carry the metric floor; transition detection needs the
/// levels the model itself can reach.
pub fn model_plateau_levels(
    c: usize,
    alpha: f64,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let config = LandscapeConfig {
        c,
        alpha,
        n,
        ensemble: samples,
        inner_steps: 300,
        inner_lr: 0.1,
        seed,
    };
    // The hard (8, 8) corner over-sharpens at desk-scale N (the floored loss
    // rewards soft matching that leaks mass onto unseen transitions), so the
    // 2-point level is the best cell over a coarse candidate grid.
    let origin = landscape_scan(&[0.0], &[0.0], &config)?[0].loss;
    let cells = landscape_scan(&[1.5, 2.0, 3.0, 4.0, 6.0, 8.0], &[3.0, 6.0, 9.0], &config)?;
    let best = cells.iter().map(|cl| cl.loss).fold(f64::INFINITY, f64::min);
    Ok((origin, best))
}

/// Trailing moving average over `window` log rows.
pub fn smooth_loss(rows: &[SaRow], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len());
    let mut acc = 0.0;
    for (i, r) in rows.iter().enumerate() {
        acc += r.loss;
        if i >= window {
            acc -= rows[i - window].loss;
        }
        out.push(acc / window.min(i + 1) as f64);
    }
    out
}

pub const TAU_SMOOTH_WINDOW: usize = 25;

/// First logged iteration where the smoothed loss falls below the midpoint
/// of the two plateau levels; None when the transition never happens.
pub fn detect_tau_2gen(log: &SaTrainLog, l1gen: f64, l2gen: f64) -> Option<usize> {
    let mid = 0.5 * (l1gen + l2gen);
    let smoothed = smooth_loss(&log.rows, TAU_SMOOTH_WINDOW);
    log.rows
        .iter()
        .zip(&smoothed)
        .find(|(_, &s)| s < mid)
        .map(|(r, _)| r.iter)
}

/// One landscape cell after inner optimization of the expert weights.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LandscapeCell {
    pub beta: f64,
    pub delta: f64,
    pub loss: f64,
    pub w: [f64; 4],
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LandscapeConfig {
    pub c: usize,
    pub alpha: f64,
    pub n: usize,
    pub ensemble: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub seed: u64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig { c: 10, alpha: 1.0, n: 1024, ensemble: 2048, inner_steps: 500, inner_lr: 0.1, seed: 17 }
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(w: &mut [f64; 4]) {
    let mut sorted = *w;
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut rho = 0;
    for (i, &u) in sorted.iter().enumerate() {
        acc += u;
        if u + (1.0 - acc) / (i + 1) as f64 > 0.0 {
            rho = i + 1;
        }
    }
    let partial: f64 = sorted[..rho].iter().sum();
    let theta = (partial - 1.0) / rho as f64;
    for v in w.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
}

/// Scans the (beta, delta) lattice; for each cell the expert weights are
/// optimized by projected gradient descent on a fixed Monte-Carlo ensemble.
pub fn landscape_scan(
    betas: &[f64],
    deltas: &[f64],
    config: &LandscapeConfig,
) -> Result<Vec<LandscapeCell>> {
    if betas.is_empty() || deltas.is_empty() {
        return Err(Error::parameter("empty landscape grid"));
    }
    // Fixed ensemble of (sequence, target column) pairs.
    let ensemble: Vec<(Vec<u16>, Vec<f64>)> = (0..config.ensemble)
        .into_par_iter()
        .map(|i| -> Result<(Vec<u16>, Vec<f64>)> {
            let mut rng = streams::misc_rng(config.seed ^ 0x1a2d, i as u64);
            let t = sample_transition_matrix(&mut rng, config.c, config.alpha)?;
            let seq = sample_sequence(&t, config.n, &mut rng)?;
            let col = t.column(seq.state(config.n - 1));
            Ok((seq.states, col))
        })
        .collect::<Result<_>>()?;
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for (bi, _) in betas.iter().enumerate() {
        for (di, _) in deltas.iter().enumerate() {
            cells.push((bi, di));
        }
    }
    let results: Vec<LandscapeCell> = cells
        .into_par_iter()
        .map(|(bi, di)| {
            let beta = betas[bi];
            let delta = deltas[di];
            let probe = ReducedParams { delta, beta, w: [0.25; 4] };
            // Per-sequence expert distributions at this cell.
            let experts: Vec<Experts> = ensemble
                .iter()
                .map(|(states, _)| reduced_experts(&probe, states, config.c))
                .collect();
            let loss_and_grad = |w: &[f64; 4]| -> (f64, [f64; 4]) {
                let mut loss = 0.0;
                let mut grad = [0.0; 4];
                for ((_, col), ex) in ensemble.iter().zip(&experts) {
                    let pi = ex.mix(w);
                    for tau in 0..config.c {
                        let t = col[tau];
                        if t == 0.0 {
                            continue;
                        }
                        let p = pi[tau];
                        if p < LOG_FLOOR {
                            loss -= t * LOG_FLOOR.ln();
                        } else {
                            loss -= t * p.ln();
                            for e in 0..4 {
                                grad[e] -= t * ex.e[e][tau] / p;
                            }
                        }
                    }
                }
                let m = ensemble.len() as f64;
                (loss / m, [grad[0] / m, grad[1] / m, grad[2] / m, grad[3] / m])
            };
            let mut w = [0.25; 4];
            for _ in 0..config.inner_steps {
                let (_, g) = loss_and_grad(&w);
                for e in 0..4 {
                    w[e] -= config.inner_lr * g[e];
                }
                project_simplex(&mut w);
            }
            let (loss, _) = loss_and_grad(&w);
            LandscapeCell { beta, delta, loss, w }
        })
        .collect();
    Ok(results)
}

/// Log-log slopes of the seed-averaged beta(t) and delta(t) trajectories
/// over an iteration window.
#[derive(Debug, Clone)]
pub struct Exponents {
    pub slope_beta: f64,
    pub slope_delta: f64,
    pub points_beta: usize,
    pub points_delta: usize,
    pub warning: Option<String>,
}

pub fn early_time_exponents(
    trajectories: &[&SaTrainLog],
    window: (usize, usize),
) -> Result<Exponents> {
    if trajectories.is_empty() {
        return Err(Error::parameter("no trajectories"));
    }
    let len = trajectories.iter().map(|t| t.rows.len()).min().unwrap();
    let mut pts_beta = Vec::new();
    let mut pts_delta = Vec::new();
    for idx in 0..len {
        let iter = trajectories[0].rows[idx].iter;
        if iter < window.0 || iter > window.1 || iter == 0 {
            continue;
        }
        let beta: f64 =
            trajectories.iter().map(|t| t.rows[idx].beta).sum::<f64>() / trajectories.len() as f64;
        let delta: f64 =
            trajectories.iter().map(|t| t.rows[idx].delta).sum::<f64>() / trajectories.len() as f64;
        if beta > 0.0 {
            pts_beta.push(((iter as f64).ln(), beta.ln()));
        }
        if delta > 0.0 {
            pts_delta.push(((iter as f64).ln(), delta.ln()));
        }
    }
    let fit = |pts: &[(f64, f64)]| -> f64 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        num / den
    };
    let mut warning = None;
    if pts_beta.len() < 5 || pts_delta.len() < 5 {
        warning = Some(format!(
            "insufficient pre-transition samples (beta {}, delta {})",
            pts_beta.len(),
            pts_delta.len()
        ));
    }
    Ok(Exponents {
        slope_beta: if pts_beta.len() >= 2 { fit(&pts_beta) } else { f64::NAN },
        slope_delta: if pts_delta.len() >= 2 { fit(&pts_delta) } else { f64::NAN },
        points_beta: pts_beta.len(),
        points_delta: pts_delta.len(),
        warning,
    })
}

/// Monte-Carlo gradient of the SA loss at the 1-Gen point
/// (w = (0, 1/3, 1/3, 1/3), beta = delta = 0).
#[derive(Debug, Clone, Copy)]
pub struct OriginGradient {
    pub g_beta: Estimate,
    pub g_delta: Estimate,
}

pub fn gradient_at_one_gen_point(
    c: usize,
    alpha: f64,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<OriginGradient> {
    let p = ReducedParams::plateau();
    let rows: Vec<(f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let mut rng = streams::misc_rng(seed ^ 0x0a11, i as u64);
            let t = sample_transition_matrix(&mut rng, c, alpha)?;
            let seq = sample_sequence(&t, n, &mut rng)?;
            let col = t.column(seq.state(n - 1));
            let g = reduced_loss_grad(&p, &seq.states, c, &col);
            Ok((g.beta, g.delta))
        })
        .collect::<Result<_>>()?;
    let gb: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let gd: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (mb, sb) = crate::bayes::mean_sem(&gb);
    let (md, sd) = crate::bayes::mean_sem(&gd);
    Ok(OriginGradient {
        g_beta: Estimate { value: mb, sem: sb, samples },
        g_delta: Estimate { value: md, sem: sd, samples },
    })
}
