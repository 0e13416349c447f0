//! Optimization, schedules, training loops, evaluation and benchmarking.

mod adam;
mod bench;
mod loops;
mod metrics;
mod range;
mod schedule;

pub use adam::{AdamConfig, AdamState};
pub use bench::{bench_inference, BenchReport, BENCH_WARMUP};
pub use loops::{
    evaluate, predict_videos, read_log, train, train_stateful, train_stateless, EpochLog, EvalConfig, TrainConfig,
    TrainSummary, WindowCursor,
};
pub use metrics::{aggregate_predictions, argmax, window_weight, ConfusedPair, MetricsReport, WEIGHT_EXPONENT};
pub use range::{
    lr_range_test, range_csv, NetworkRangeTarget, RangeRecord, RangeTarget, RANGE_MIN_ITERS, RANGE_SMOOTHING,
    RANGE_STOP_FACTOR,
};
pub use schedule::{plateau_update, Phase, Position, ScheduleSpec};

#[cfg(test)]
mod tests;
