//! Procedural granule-pile scenes with exact masks and physical ground truth.

use std::path::PathBuf;

use thiserror::Error;

mod dataset;
mod geometry;
mod material;
mod population;
mod render;

pub use dataset::{
    export_dataset, generate_dataset, generate_populations, image_name, mask_name, sample_id, Annotation,
    Dataset, DatasetManifest, SampleData, Split, SplitAssignment, Splits, FORMAT_VERSION,
};
pub use geometry::Polygon;
pub use material::{default_palette, validate_palette, ColorModel, MaterialSpec};
pub use population::{
    direct_mass_purity, mass_purity_from_volume_fractions, sample_population, sample_population_with_id,
    true_mass_purity, GeneratorConfig, Granule, MaterialFraction, RenderSettings, SamplePopulation,
};
pub use render::{stir_and_render, true_area_purity, Placement, StirredScene};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("palette is empty")]
    EmptyPalette,
    #[error("palette must contain exactly one copper material, found {0}")]
    CopperCount(usize),
    #[error("material {name} has invalid density {density}")]
    BadDensity { name: String, density: f64 },
    #[error("purity range [{0}, {1}] must satisfy 0 < lo <= hi <= 1")]
    PurityRange(f64, f64),
    #[error("no population with purity in [{0}, {1}] found; widen the range or add granules")]
    PurityUnreachable(f64, f64),
    #[error("stir index {index} out of range for {stirs} stirs")]
    StirIndex { index: usize, stirs: usize },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("output directory {0} is not empty (use overwrite)")]
    OutputOccupied(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Heatmap(#[from] crate::heatmap::HeatmapError),
}
