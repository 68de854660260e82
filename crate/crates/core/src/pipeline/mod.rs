//! Stage orchestration shared by the command-line tool and the acceptance
//! tests: one configuration, one directory per stage, snapshots everywhere.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod stages;

pub use ablate::{leakage_experiment, score_edit, Ablation, EditAblationReport, EditScores, LeakageReport};
pub use config::{PipelineConfig, CLASSES};
pub use eval::{compute_metrics, eval_views, load_metrics, EvalMetrics};
pub use stages::{require, Stage, StageDir, CONFIG_SNAPSHOT, STAGE_LOG};
