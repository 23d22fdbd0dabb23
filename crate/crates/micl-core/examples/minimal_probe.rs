use micl_core::minimal::*;
use micl_core::markov::build_task_set;
use std::sync::Arc;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("mem");
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1200);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(32);
    let n: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(256);
    let (d_phi, data) = match mode {
        "fresh" => (128usize, TaskData::Fresh { c: 10, alpha: 1.0 }),
        _ => (64, TaskData::Fixed(Arc::new(build_task_set(7, 8, 10, 1.0).unwrap()))),
    };
    let config = MinimalConfig::desk(10, d_phi, n);
    let mut params = MinimalParams::init(config, 1);
    let mut tc = MinimalTrainConfig::new(iters, 1);
    tc.batch = batch;
    tc.lr = lr;
    tc.eval_every = 50;
    tc.eval_batch = 64;
    let t0 = std::time::Instant::now();
    let out = train(&mut params, &data, &tc).unwrap();
    let dt = t0.elapsed();
    println!("mode={mode} n={n} iters={iters} lr={lr} batch={batch} took {:?} ({:.0} ms/iter)", dt, dt.as_secs_f64()*1e3/iters as f64);
    for r in out.metrics.iter().step_by(2) {
        println!("iter {:5}  L_train {:.4} (2gen {:.4}, margin {:+.4})   L_gen {:.4} (2gen {:.4}, margin {:+.4})",
            r.iter, r.loss_train, r.l2gen_train, r.loss_train - r.l2gen_train,
            r.loss_gen, r.l2gen_gen, r.loss_gen - r.l2gen_gen);
    }
}
