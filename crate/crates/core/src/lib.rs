//! Machine-vision rating of waste copper granules.
//!
//! A synthetic granule-pile simulator supplies images with exact masks and
//! mass purities. A segmentation network turns each of the `n` stirred
//! images of a sample into a copper/impurity heatmap; a three-branch purity
//! network reads the stacked heatmaps and predicts per-image area purity,
//! the sample's mass purity and its rating level.

pub mod augment;
pub mod digest;
pub mod heatmap;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod purity_net;
pub mod scene_sim;
pub mod seed;
pub mod seg_net;
pub mod trainer;
