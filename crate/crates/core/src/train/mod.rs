//! Training regimes, checkpoints, sampling and diagnostics.

pub mod config;
pub mod diagnostics;
pub mod run;
pub mod state;
pub mod steps;
pub mod toy;

pub use config::{variant_by_name, variant_of, LazyStart, Regime, TrainConfig, Variant, VariantFlags};
pub use diagnostics::{diversity_score, sample, sample_paired};
pub use run::{resume, train, RunSummary};
pub use state::{fingerprint, TrainState};
pub use steps::{classifier_phase, cogan_step, dann_step, gan_step, StepOutcome};
