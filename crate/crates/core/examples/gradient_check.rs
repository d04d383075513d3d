//! Runs the finite-difference suite over every layer, the composed toy
//! network and the contrastive loss, printing the worst relative error.

use spatial_contrast::gradcheck;

fn main() {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(7);
    let start = std::time::Instant::now();
    for report in gradcheck::run_suite(seed, 50) {
        println!(
            "{:<16} trials={:<3} coords={:<6} kinks={:<3} max_rel_err={:.3e}",
            report.op,
            report.trials,
            report.result.checked,
            report.result.kinks,
            report.result.max_rel_error
        );
    }
    println!("elapsed {:.2?}", start.elapsed());
}
