//! Training, evaluation and experiment drivers behind the CLI.

pub mod ablate;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod render;
pub mod train;

pub use ablate::{run_ablations, AblationReport, AblationRow};
pub use checkpoint::Checkpoint;
pub use config::{AblationSwitches, DataConfig, EvalConfig, ModelSpec, RunConfig, TrainConfig};
pub use evaluate::{evaluate, evaluate_copy, EvalReport, TaskRow};
pub use train::{train, StepRecord, TrainOptions, TrainOutcome, CHECKPOINT_FILE, METRICS_FILE};

use std::path::Path;

use crate::error::Result;
use crate::synth::{make_dataset, DatasetSpec, Manifest};

/// Write the `train` and `test` splits described by `cfg`.
pub fn make_data(cfg: &RunConfig, dir: &Path) -> Result<(Manifest, Manifest)> {
    let train = DatasetSpec {
        synth: cfg.synth,
        counts: cfg.data.train.clone(),
    };
    let test = DatasetSpec {
        synth: cfg.synth,
        counts: cfg.data.test.clone(),
    };
    Ok((make_dataset(&train, cfg.seed, dir, "train")?, make_dataset(&test, cfg.seed, dir, "test")?))
}

/// Output root: `INTERLEAVE_OUT` when set, else `runs`.
pub fn default_out_root() -> std::path::PathBuf {
    std::env::var_os("INTERLEAVE_OUT")
        .map(Into::into)
        .unwrap_or_else(|| "runs".into())
}
