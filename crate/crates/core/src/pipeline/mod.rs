//! End-to-end rating of a sample, the threshold baseline, model bundles and
//! evaluation sweeps.

mod bundle;
mod eval;
mod ladder;
mod rate;

use thiserror::Error;

pub use bundle::{BundleManifest, ModelBundle, BUNDLE_FORMAT_VERSION, MANIFEST_FILE, PURITY_FILE, SEG_FILE};
pub use eval::{
    error_vs_levels, eval_dataset, eval_samples, render_markdown, write_eval_outputs, CurvePoint, EvalConfig,
    EvalSummary, LevelErrorRow, LevelSweep, OrderSensitivity, Predictor, SampleRow,
};
pub use ladder::{purity_to_level, LadderError, LevelLadder, DEFAULT_THRESHOLDS};
pub use rate::{
    model_digest, rate_by_threshold, rate_heatmaps_by_threshold, rate_sample, RatingMethod, RatingReport,
    Timing,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("expected {expected} images, found {found}")]
    ImageCount { expected: usize, found: usize },
    #[error("image {index} is {width}x{height}, expected {expected}x{expected}")]
    ImageSize {
        index: usize,
        expected: usize,
        width: usize,
        height: usize,
    },
    #[error("ladder has {ladder} levels but the model predicts {model}")]
    LadderMismatch { ladder: usize, model: usize },
    #[error("{what} digest mismatch: recorded {recorded}, recomputed {actual}")]
    DigestMismatch {
        what: String,
        recorded: String,
        actual: String,
    },
    #[error("model bundle: {0}")]
    Bundle(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error(transparent)]
    Ladder(#[from] LadderError),
    #[error(transparent)]
    Seg(#[from] crate::seg_net::SegError),
    #[error(transparent)]
    Purity(#[from] crate::purity_net::PurityError),
    #[error(transparent)]
    Checkpoint(#[from] crate::nn::CheckpointError),
    #[error(transparent)]
    Heatmap(#[from] crate::heatmap::HeatmapError),
    #[error(transparent)]
    Sim(#[from] crate::scene_sim::SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
