use micl_core::markov::build_task_set;
use micl_core::transformer::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let k: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(32);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let d: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(32);
    let n: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(64);
    let reweight: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let inject: bool = args.get(6).map(|s| s == "inject").unwrap_or(false);
    let tasks = build_task_set(5, k, 10, 1.0).unwrap();
    let mut config = TransformerConfig::reference(10, d, n);
    if inject { config.task_injection = Some(k); }
    let mut params = TransformerParams::init(config, 1);
    let lr: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let mut tc = TrainConfig::new(n, 32, iters, 1);
    tc.optimizer = Optimizer::AdamW { lr, betas: (0.9, 0.95), weight_decay: 1e-3 };
    tc.eval_batch = 128;
    if reweight < 1.0 { tc.grad_reweight = Some(reweight); }
    tc.task_injection = inject;
    let t0 = std::time::Instant::now();
    let out = train(&mut params, &tasks, &tc).unwrap();
    let dt = t0.elapsed();
    let max_phi = out.metrics.iter().map(|m| m.phi_beta2).fold(0.0f64, f64::max);
    println!("K={k} D={d} N={n} rw={reweight} inject={inject} lr={lr}: {:?} ({:.0} ms/iter), max phi_beta2 = {max_phi:.3}", dt, dt.as_secs_f64()*1e3/iters as f64);
    for m in out.metrics.iter().filter(|m| [1,10,50,100,200,400,800,1200,1600,2000,2500,3000,4000,5000].contains(&m.iter)) {
        println!("  iter {:5} L_tr {:.4} L_gen {:.4} phi_d1 {:.3} phi_b2 {:.3} nA1 {:.1} nA2 {:.1}",
            m.iter, m.loss_train, m.loss_gen, m.phi_delta1, m.phi_beta2, m.n_a1, m.n_a2);
    }
}
