//! Training loop, evaluation, checkpoints, the ablation benchmark and the
//! gradient-check runner behind the command-line tool.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod train;

pub use bench::{cmd_bench, BenchConfig, BenchReport};
pub use checkpoint::Checkpoint;
pub use config::{Precision, RunConfig};
pub use eval::{cmd_eval, evaluate, EvalReport};
pub use metrics::{read_jsonl, write_jsonl, MetricsRecord, Split};
pub use train::{cmd_train, datasets, train, TrainOutcome, METRICS_FILE};
