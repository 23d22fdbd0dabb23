use micl_core::sa::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(128);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6000);
    let variant = match args.get(3).map(|s| s.as_str()).unwrap_or("constrained") {
        "reduced" => SaVariant::Reduced,
        "full" => SaVariant::Full,
        _ => SaVariant::Constrained,
    };
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);
    let t0 = std::time::Instant::now();
    let base = fixed_length_baselines(10, 1.0, n, 4000, 99).unwrap();
    println!("baselines: L1gen = {:.4} ({:.4}), L2gen = {:.4} ({:.4})  [{:?}]",
        base.l1gen.value, base.l1gen.sem, base.l2gen.value, base.l2gen.sem, t0.elapsed());
    let mut config = SaTrainConfig::new(n, iters, seed, variant);
    config.eval_every = 1;
    let t0 = std::time::Instant::now();
    let log = sa_train(&config).unwrap();
    let dt = t0.elapsed();
    println!("train {:?} N={} iters={} took {:?} ({:.2} ms/iter)", variant, n, iters, dt, dt.as_secs_f64()*1e3/iters as f64);
    let tau = detect_tau_2gen(&log, base.l1gen.value, base.l2gen.value);
    println!("tau = {:?}", tau);
    for r in log.rows.iter().step_by((iters/25).max(1)) {
        println!("iter {:6}  loss {:.4}  w=[{:.3} {:.3} {:.3} {:.3}]  beta={:.3} delta={:.3}",
            r.iter, r.loss, r.w[0], r.w[1], r.w[2], r.w[3], r.beta, r.delta);
    }
    let last = log.rows.last().unwrap();
    println!("final: loss {:.4} vs L2gen {:.4}; floored={}", last.loss, base.l2gen.value, log.floored_samples);
}
