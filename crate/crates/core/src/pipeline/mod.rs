//! Three-stage training, scoring, checkpoints and ablations.
//!
//! Stage 1 trains the encoder and head on `L_MIL + β·L_triplet` while the
//! clean-set ramp tightens. Stage 2 freezes both and fits the flow to encoded
//! normal instances. Stage 3 freezes the encoder and flow and fine-tunes the
//! head on the clean set, flow pseudo anomalies and normal instances.

mod ablation;
mod checkpoint;
mod config;
mod model;
mod train;

pub use ablation::{
    ablation_table, run_grid, run_variant, write_ablation_csv, AblationRow, RunOutcome, Variant,
};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    DataConfig, EvidentialConfig, ExperimentConfig, PseudoSource, SelectionRule, TrainConfig,
};
pub use model::{early_stop, param_hash, score_video, Model};
pub use train::{
    evaluate, score_bags, selection_thresholds, stage1_objective, stream_rng, ExperimentData,
    GraphBag, LogRecord, Scorer, Stage1Objective, StageReport, Trainer,
};
