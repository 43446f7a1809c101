//! Evaluation harness, metrics and diagnostics.

pub mod analysis;
pub mod diagnostics;
pub mod experiment;
pub mod metrics;

pub use analysis::{
    pearson, permutation_p_value, sfs_distance_analysis, DistanceAnalysis, DistanceAnalysisRecord,
};
pub use diagnostics::{
    class_distance_distributions, export_embeddings, separability_index, silhouette_coefficient,
    ClassDistances, DistanceSummary, EmbeddingRow,
};
pub use experiment::{
    lopo_folds, run_experiment, ExperimentConfig, ExperimentRun, Fold, FoldResult, ModelConfig,
    PersonalizationMode, WeeklyPrediction,
};
pub use metrics::{
    build_relapse_test_set, f2_score, per_patient_f2, pooled_counts, ConfusionCounts,
    MetricsReport, SeedMetrics, SkippedFold,
};
