use micl_core::sa::*;
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scale: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let mut config = SaTrainConfig::new(128, 600, 3, SaVariant::Constrained);
    config.w_lr_scale = scale;
    let log = sa_train(&config).unwrap();
    let min_wa = log.rows.iter().take(500).map(|r| r.w[0]).fold(1.0f64, f64::min);
    println!("scale={scale}: min w_A over first 500 iters = {min_wa:.4}");
    for r in log.rows.iter().step_by(25) {
        println!("iter {:4} w=[{:.4} {:.4} {:.4} {:.4}] beta={:.3} delta={:.3} loss={:.4}",
          r.iter, r.w[0], r.w[1], r.w[2], r.w[3], r.beta, r.delta, r.loss);
    }
}
