//! Desk-scale training rig: an Adam-trained MLP that saves, compresses,
//! kills and resumes itself; an online logistic task for regret; ablation
//! and compressor sweeps.

pub mod ablation;
pub mod adam;
pub mod mlp;
pub mod regret;
pub mod train;

pub use ablation::{ablation_cells, ablation_suite, chain_archives, compressor_sweep, AblationRow, AblationTable, CompressorRow};
pub use adam::{adam_step, AdamConfig, LrSchedule};
pub use mlp::{Activation, DataSpec, Dataset, MlpParams, MlpSpec};
pub use regret::{regret_experiment, MaskRule, RegretConfig, RegretReport};
pub use train::{eval_weights, pair, run_paired, run_training, CheckpointReport, PairedReport, RunReport, TrainConfig, Trainer};
