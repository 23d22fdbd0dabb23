use micl_core::bayes::{predict_1gen, predict_2gen, LOG_FLOOR};
use micl_core::markov::{sample_sequence, sample_transition_matrix};
use micl_core::sa::{reduced_forward, ReducedParams};
use micl_core::markov::Sequence;
use rand_chacha::rand_core::SeedableRng;

fn main() {
    for &n in &[32usize, 64, 128, 256] {
        let samples = 30000;
        let mut gap_origin = 0.0; // floored origin-model loss minus 1-gen predictor loss
        let mut gap_limit = 0.0;  // floored near-2-gen model loss minus 2-gen predictor loss
        let origin = ReducedParams { delta: 0.0, beta: 0.0, w: [0.0, 1.0/3.0, 1.0/3.0, 1.0/3.0] };
        let limit = ReducedParams { delta: 8.0, beta: 8.0, w: [0.0, 0.05, 0.93, 0.02] };
        let mut floored_o = 0usize; let mut floored_l = 0usize;
        for i in 0..samples {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1000 + i as u64);
            let t = sample_transition_matrix(&mut rng, 10, 1.0).unwrap();
            let seq = sample_sequence(&t, n, &mut rng).unwrap();
            let col = t.column(seq.state(n - 1));
            let ce = |probs: &[f64], fl: &mut usize| -> f64 {
                let mut l = 0.0;
                for tau in 0..10 {
                    let p = probs[tau];
                    if p < LOG_FLOOR { *fl += 1; }
                    l -= col[tau] * p.max(LOG_FLOOR).ln();
                }
                l
            };
            let mut dummy = 0usize;
            let po = reduced_forward(&origin, &seq, 10).unwrap();
            let pl = reduced_forward(&limit, &seq, 10).unwrap();
            let p1 = predict_1gen(&seq.states, 10, 1.0);
            let p2 = predict_2gen(&seq.states, 10);
            gap_origin += ce(po.probs(), &mut floored_o) - ce(p1.probs(), &mut dummy);
            gap_limit += ce(pl.probs(), &mut floored_l) - ce(p2.probs(), &mut dummy);
            let _ = Sequence { states: vec![], task_index: None };
        }
        println!("N={n:4}: origin gap (model-vs-1gen) = {:+.4} nats (floor hits {}), limit gap (model-vs-2gen) = {:+.4} nats (floor hits {})",
            gap_origin / samples as f64, floored_o, gap_limit / samples as f64, floored_l);
    }
}
