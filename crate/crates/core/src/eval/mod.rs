//! Evaluation: feature extraction, rank-1 reports and ablation grids.

pub mod features;
pub mod grid;
pub mod report;

pub use features::{extract_features, FeatureEntry, FeatureTable, Label, SkippedSequence};
pub use grid::{ablation_table1, ablation_table2, window_sweep, GridReport, GridRow};
pub use report::{rank1, rank1_from_distances, Cell, ConditionReport, EvalReport};
