use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{LevelLadder, PipelineError};
use crate::digest::sha256_hex;
use crate::heatmap::{stack_heatmaps, Heatmap};
use crate::nn::{Parameterized, Tensor};
use crate::purity_net::PurityModel;
use crate::seg_net::{predict_heatmap, SegModel};

/// What produced a report's numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingMethod {
    /// Segmentation followed by the purity network.
    Network,
    /// Mean analytic area purity of the predicted heatmaps.
    Threshold,
    /// Ground-truth passthrough.
    Oracle,
}

/// Wall-clock seconds per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub segmentation_seconds: f64,
    pub purity_seconds: f64,
}

/// Result of rating one sample. `level` is authoritative; `ladder_level` is
/// the ladder mapping of `mass_purity`, kept so disagreement is visible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingReport {
    pub sample_id: String,
    pub method: RatingMethod,
    pub area_purities: Vec<f64>,
    pub mass_purity: f64,
    pub level: usize,
    pub ladder_level: usize,
    pub model_digest: String,
    pub ladder: LevelLadder,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

/// Digest identifying a segmentation + purity model pair.
pub fn model_digest(seg: &SegModel, purity: &PurityModel) -> String {
    sha256_hex(format!("{}:{}", seg.param_digest(), purity.param_digest()).as_bytes())
}

fn check_images(
    images: &[RgbImage],
    expected_n: Option<usize>,
    size: Option<usize>,
) -> Result<(), PipelineError> {
    if let Some(n) = expected_n {
        if images.len() != n {
            return Err(PipelineError::ImageCount {
                expected: n,
                found: images.len(),
            });
        }
    }
    let Some(first) = images.first() else {
        return Err(PipelineError::ImageCount {
            expected: expected_n.unwrap_or(1),
            found: 0,
        });
    };
    let expected = size.unwrap_or(first.width() as usize);
    for (index, img) in images.iter().enumerate() {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let reference = size.map_or((first.width() as usize, first.height() as usize), |s| (s, s));
        if (w, h) != reference {
            return Err(PipelineError::ImageSize {
                index,
                expected,
                width: w,
                height: h,
            });
        }
    }
    Ok(())
}

/// Heatmaps of every image, plus the mean feature map when requested.
fn segment(
    seg: &SegModel,
    images: &[RgbImage],
    features: bool,
) -> Result<(Vec<Heatmap>, Option<Tensor>), PipelineError> {
    let mut maps = Vec::with_capacity(images.len());
    let mut sum: Option<Tensor> = None;
    for img in images {
        let out = seg.forward(img)?;
        maps.push(predict_heatmap(&out));
        if features {
            match &mut sum {
                Some(s) => s.add_assign(&out.features),
                None => sum = Some(out.features),
            }
        }
    }
    if let Some(s) = &mut sum {
        let inv = 1.0 / images.len() as f32;
        s.data.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((maps, sum))
}

/// Rates one sample: segmentation, heatmap stack, purity network.
pub fn rate_sample(
    seg: &SegModel,
    purity: &PurityModel,
    images: &[RgbImage],
    ladder: &LevelLadder,
    sample_id: &str,
) -> Result<RatingReport, PipelineError> {
    let t = &purity.topology;
    check_images(images, Some(t.n), Some(t.image_size))?;
    if ladder.num_levels() != t.num_levels {
        return Err(PipelineError::LadderMismatch {
            ladder: ladder.num_levels(),
            model: t.num_levels,
        });
    }
    let clock = Instant::now();
    let (maps, features) = segment(seg, images, t.fuse_features)?;
    let segmentation_seconds = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let out = purity.forward(&stack_heatmaps(&maps)?, features.as_ref())?;
    let purity_seconds = clock.elapsed().as_secs_f64();
    Ok(RatingReport {
        sample_id: sample_id.to_string(),
        method: RatingMethod::Network,
        ladder_level: ladder.level(out.mass_purity),
        area_purities: out.area_purities,
        mass_purity: out.mass_purity,
        level: out.level,
        model_digest: model_digest(seg, purity),
        ladder: ladder.clone(),
        timing: Some(Timing {
            segmentation_seconds,
            purity_seconds,
        }),
    })
}

/// Baseline: the mean area purity of the predicted heatmaps stands in for
/// mass purity, and the ladder assigns the level.
pub fn rate_by_threshold(
    seg: &SegModel,
    images: &[RgbImage],
    ladder: &LevelLadder,
    sample_id: &str,
) -> Result<RatingReport, PipelineError> {
    check_images(images, None, None)?;
    let clock = Instant::now();
    let (maps, _) = segment(seg, images, false)?;
    let segmentation_seconds = clock.elapsed().as_secs_f64();
    let mut report = rate_heatmaps_by_threshold(&maps, ladder, sample_id, &seg.param_digest())?;
    report.timing = Some(Timing {
        segmentation_seconds,
        purity_seconds: 0.0,
    });
    Ok(report)
}

/// The threshold baseline applied to given heatmaps (predicted or true).
pub fn rate_heatmaps_by_threshold(
    heatmaps: &[Heatmap],
    ladder: &LevelLadder,
    sample_id: &str,
    model_digest: &str,
) -> Result<RatingReport, PipelineError> {
    if heatmaps.is_empty() {
        return Err(PipelineError::ImageCount {
            expected: 1,
            found: 0,
        });
    }
    let area_purities: Vec<f64> = heatmaps.iter().map(Heatmap::area_purity).collect();
    let mass_purity = area_purities.iter().sum::<f64>() / area_purities.len() as f64;
    let level = ladder.level(mass_purity);
    Ok(RatingReport {
        sample_id: sample_id.to_string(),
        method: RatingMethod::Threshold,
        area_purities,
        mass_purity,
        level,
        ladder_level: level,
        model_digest: model_digest.to_string(),
        ladder: ladder.clone(),
        timing: None,
    })
}
