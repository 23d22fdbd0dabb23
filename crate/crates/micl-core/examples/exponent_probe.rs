use micl_core::sa::*;

fn main() {
    let n = 128;
    let iters = 2500;
    let seeds = 8;
    for mode in [DataMode::Control, DataMode::BiasAblated] {
        let mut logs = Vec::new();
        let t0 = std::time::Instant::now();
        for s in 0..seeds {
            let mut c = SaTrainConfig::new(n, iters, 300 + s, SaVariant::Reduced);
            c.batch = 512;
            c.lr = 0.5;
            c.data = mode;
            logs.push(sa_train(&c).unwrap());
        }
        println!("{mode:?}: {seeds} seeds x {iters} iters took {:?}", t0.elapsed());
        let refs: Vec<&SaTrainLog> = logs.iter().collect();
        for window in [(20usize, 150usize), (30, 300), (50, 600), (100, 1200), (200, 2400)] {
            let ex = early_time_exponents(&refs, window).unwrap();
            println!("  window {window:?}: slope_beta {:.3} ({} pts), slope_delta {:.3} ({} pts) {}",
                ex.slope_beta, ex.points_beta, ex.slope_delta, ex.points_delta,
                ex.warning.unwrap_or_default());
        }
        let last = &logs[0].rows[iters-1];
        println!("  seed0 end: beta={:.3} delta={:.3} loss={:.4}", last.beta, last.delta, last.loss);
    }
}
