//! Dataset generation, batch evaluation, metrics, sweeps and reports.

pub mod datagen;
pub mod eval;
pub mod logs;
pub mod metrics;
pub mod report;

pub use datagen::{generate_dataset, DatagenConfig, DatagenReport};
pub use eval::{classify, evaluate, evaluate_metrics, robustness_sweep, run_scenario, Family, Policy, SweepCell, SweepReport};
pub use logs::{load_episodes, read_ndjson, save_episodes, write_ndjson, LogError};
pub use metrics::{compute_metrics, MetricsReport, TimingStats};
pub use report::{render_trajectories, render_value_slice, write_metrics_csv, write_report, ReportError};

/// Independent stream seed for item `i` of a run seeded with `seed`.
pub fn sub_seed(seed: u64, i: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed ^ i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
