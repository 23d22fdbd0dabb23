use micl_core::sa::*;
fn main() {
    for &n in &[32usize, 64, 128, 256] {
        let iters = match n { 32 => 2500, 64 => 3500, 128 => 5000, _ => 9000 };
        let t0 = std::time::Instant::now();
        let (l1, l2) = model_plateau_levels(10, 1.0, n, 2000, 77).unwrap();
        let tl = t0.elapsed();
        let base = fixed_length_baselines(10, 1.0, n, 4000, 99).unwrap();
        let mut taus = Vec::new();
        let t0 = std::time::Instant::now();
        for seed in 0..3u64 {
            let mut config = SaTrainConfig::new(n, iters, 100 + seed, SaVariant::Reduced);
            config.eval_every = 1;
            let log = sa_train(&config).unwrap();
            taus.push(detect_tau_2gen(&log, l1, l2));
        }
        println!("N={n:4}: model levels ({l1:.4},{l2:.4}) [{tl:?}] vs predictor ({:.4},{:.4}); taus={taus:?} train={:?}",
            base.l1gen.value, base.l2gen.value, t0.elapsed());
    }
}
