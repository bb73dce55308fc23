use posegen::check::check_module;
use std::time::Instant;

fn main() {
    for seed in [0u64, 1, 2, 3, 4] {
        let t0 = Instant::now();
        let report = check_module("all", seed).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!(
            "seed {seed}: {} entries, worst {:.3e}, passed {}, {:.1}s",
            report.lines.len(),
            report.worst(),
            report.passed(),
            dt
        );
        for (name, err) in &report.lines {
            if *err > 1e-6 {
                println!("  high: {name} {err:.3e}");
            }
        }
    }
}
