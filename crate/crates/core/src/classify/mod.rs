//! Linear SVM classification and cross-validated evaluation.

mod cv;
mod grid;
mod svm;

pub use cv::{
    compute_all_mads, concatenated_features, cross_validate, cross_validate_features, cross_validate_mads,
    fit_fold, rows_to_matrix, run_folds, stack_descriptors, summarize, CvParams, CvReport, Dictionary,
    EncoderSettings, FittedEncoder, FoldFeatures, FoldModels, FoldOutcome,
};
pub use grid::{best_cells, grid_search, GridBest, GridCell, GridReport};
pub use svm::{train_svm, LinearModel, SvmOptions};
