//! Synthetic probe tasks, classification fine-tuning and the method
//! comparison harness.

pub mod compare;
pub mod finetune;
pub mod probe;

pub use compare::{compare_methods, CellResult, CellSummary, CompareConfig, ComparisonReport, MethodRow, Preset, REPORT_BANNER};
pub use finetune::{accuracy, fine_tune, majority_baseline, ClassifierHead, FineTuneConfig, FineTuneResult};
pub use probe::{Example, ProbeTask, TaskKind, TaskSplits, FIRST_CONTENT, MARK};
