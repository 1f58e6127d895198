//! Prints per-method summary statistics for a small Monte Carlo batch.

use defslam_core::montecarlo::{run_batch, summarize, ExperimentConfig};

fn main() {
    let mut config = ExperimentConfig::default();
    config.runs = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);
    let start = std::time::Instant::now();
    let rows = run_batch(&config).expect("batch");
    let table = summarize(&rows);
    for row in &rows {
        println!(
            "run {:2} {:>10}: pos {:8.3} heading {:7.4} feature {:8.3}",
            row.run,
            row.method.as_str(),
            row.position_rmse(),
            row.rmse_heading,
            row.feature_rmse
        );
    }
    println!(
        "batch of {} runs in {:.1}s",
        config.runs,
        start.elapsed().as_secs_f64()
    );
    for m in &table.methods {
        println!(
            "{:>10}: median pos {:8.3} mm | heading {:7.4} rad | feature {:8.3} mm | wins {}",
            m.method.as_str(),
            m.median_position_rmse,
            m.median_heading_rmse,
            m.median_feature_rmse,
            m.wins
        );
    }
}
