//! Personalized relapse prediction from hourly mobile-sensing data.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: dense, bidirectional LSTM, batch-norm and dropout layers with
//!   hand-written reverse-mode gradients, BCE / soft-F2 losses, ADAM, and a
//!   finite-difference gradient checker.
//! - [`data`]: cohort CSV ingest, 144-dim day vectors, imputation, min-max
//!   normalization, week labeling and sliding observation windows.
//! - [`synth`]: seeded synthetic cohorts with trait-dependent behaviour and
//!   prodromal drift before relapses.
//! - [`personalization`]: patient-similarity metrics, ranking and balanced
//!   training-subset construction.
//! - [`models`]: the supervised bi-LSTM predictor, the encoder-decoder
//!   Mahalanobis anomaly baseline, the random-forest baseline and late fusion.
//! - [`eval`]: leave-one-patient-out sequential evaluation, F2 metrics,
//!   relapse test set, distance analysis and separability diagnostics.

pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod personalization;
pub mod seed;
pub mod synth;

pub use data::{
    Cohort, DayVector, Modality, Normalizer, ObservationWindow, PatientDays, PatientProfile,
    RelapseEvent, WindowConfig, DAY_DIM, HOURS, MODALITIES,
};
pub use error::{Error, Result};
pub use eval::{ConfusionCounts, FoldResult, MetricsReport};
pub use models::{FusionScheme, TrainedModel};
pub use personalization::{PersonalizationMetric, SimilarityRanking, TrainingSubset};
