//! Binary copper/impurity heatmaps and the metrics computed on them.
//!
//! Label `0` is copper, label `1` is impurity. On disk a heatmap is an 8-bit
//! grayscale PNG with `0` for copper and `255` for impurity.

use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const COPPER: u8 = 0;
pub const IMPURITY: u8 = 1;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("dimension mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    DimensionMismatch {
        left_h: usize,
        left_w: usize,
        right_h: usize,
        right_w: usize,
    },
    #[error("heatmap must have positive dimensions, got {0}x{1}")]
    Empty(usize, usize),
    #[error("label buffer has {got} cells, expected {expected}")]
    BadLength { got: usize, expected: usize },
    #[error("label {value} at cell {index} is not 0 or 1")]
    BadLabel { index: usize, value: u8 },
    #[error("mask pixel value {value} at ({x}, {y}) is neither 0 nor 255")]
    BadPixel { x: u32, y: u32, value: u8 },
    #[error("cannot stack an empty collection of heatmaps")]
    EmptyStack,
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// An H×W grid of {0, 1} labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Heatmap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self, HeatmapError> {
        if height == 0 || width == 0 {
            return Err(HeatmapError::Empty(height, width));
        }
        if labels.len() != height * width {
            return Err(HeatmapError::BadLength {
                got: labels.len(),
                expected: height * width,
            });
        }
        if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(HeatmapError::BadLabel { index, value });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        assert!(height > 0 && width > 0 && label <= 1);
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        assert!(label <= 1, "heatmap labels are 0 or 1");
        self.labels[y * self.width + x] = label;
    }

    pub fn impurity_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == IMPURITY).count()
    }

    pub fn copper_count(&self) -> usize {
        self.len() - self.impurity_count()
    }

    /// Fraction of copper pixels.
    pub fn area_purity(&self) -> f64 {
        self.copper_count() as f64 / self.len() as f64
    }

    pub fn impurity_fraction(&self) -> f64 {
        self.impurity_count() as f64 / self.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            labels: self.labels.iter().map(|&l| 1 - l).collect(),
        }
    }

    fn check_same_dims(&self, other: &Heatmap) -> Result<(), HeatmapError> {
        if self.height != other.height || self.width != other.width {
            return Err(HeatmapError::DimensionMismatch {
                left_h: self.height,
                left_w: self.width,
                right_h: other.height,
                right_w: other.width,
            });
        }
        Ok(())
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.get(y as usize, x as usize) * 255])
        })
    }

    /// Strict decode: only 0 and 255 are accepted.
    pub fn from_gray_image(img: &GrayImage) -> Result<Self, HeatmapError> {
        let (w, h) = img.dimensions();
        let mut labels = Vec::with_capacity((w * h) as usize);
        for (x, y, px) in img.enumerate_pixels() {
            labels.push(match px.0[0] {
                0 => COPPER,
                255 => IMPURITY,
                value => return Err(HeatmapError::BadPixel { x, y, value }),
            });
        }
        Heatmap::new(h as usize, w as usize, labels)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), HeatmapError> {
        self.to_gray_image().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, HeatmapError> {
        let img = image::open(path)?.into_luma8();
        Self::from_gray_image(&img)
    }
}

/// Pixel confusion counts, `counts[truth][pred]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; 2]; 2],
}

impl Confusion {
    pub fn between(pred: &Heatmap, truth: &Heatmap) -> Result<Self, HeatmapError> {
        pred.check_same_dims(truth)?;
        let mut c = Confusion::default();
        for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
            c.counts[t as usize][p as usize] += 1;
        }
        Ok(c)
    }

    pub fn add(&mut self, other: &Confusion) {
        for t in 0..2 {
            for p in 0..2 {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// IoU of one class; a class absent from both maps scores 1.
    pub fn class_iou(&self, class: usize) -> f64 {
        let other = 1 - class;
        let inter = self.counts[class][class];
        let union = inter + self.counts[class][other] + self.counts[other][class];
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn metrics(&self) -> SegMetrics {
        let iou_copper = self.class_iou(COPPER as usize);
        let iou_impurity = self.class_iou(IMPURITY as usize);
        SegMetrics {
            iou_copper,
            iou_impurity,
            miou: (iou_copper + iou_impurity) / 2.0,
            confusion: *self,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub iou_copper: f64,
    pub iou_impurity: f64,
    pub miou: f64,
    pub confusion: Confusion,
}

/// Per-class IoU and their mean for one prediction/truth pair.
pub fn miou(pred: &Heatmap, truth: &Heatmap) -> Result<SegMetrics, HeatmapError> {
    Ok(Confusion::between(pred, truth)?.metrics())
}

/// Corpus-level metrics: confusion counts are summed before computing IoU.
pub fn corpus_miou<'a, I>(pairs: I) -> Result<SegMetrics, HeatmapError>
where
    I: IntoIterator<Item = (&'a Heatmap, &'a Heatmap)>,
{
    let mut total = Confusion::default();
    for (pred, truth) in pairs {
        total.add(&Confusion::between(pred, truth)?);
    }
    Ok(total.metrics())
}

/// `n` heatmaps of identical size stored channel-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeatmapStack {
    channels: usize,
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl HeatmapStack {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let plane = self.height * self.width;
        &self.labels[c * plane..(c + 1) * plane]
    }

    pub fn channel_heatmap(&self, c: usize) -> Heatmap {
        Heatmap {
            height: self.height,
            width: self.width,
            labels: self.channel(c).to_vec(),
        }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Returns a stack whose channel `i` is channel `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.channels);
        let mut labels = Vec::with_capacity(self.labels.len());
        for &c in order {
            labels.extend_from_slice(self.channel(c));
        }
        Self { labels, ..*self }
    }
}

pub fn stack_heatmaps(hs: &[Heatmap]) -> Result<HeatmapStack, HeatmapError> {
    let first = hs.first().ok_or(HeatmapError::EmptyStack)?;
    let mut labels = Vec::with_capacity(first.len() * hs.len());
    for h in hs {
        first.check_same_dims(h)?;
        labels.extend_from_slice(&h.labels);
    }
    Ok(HeatmapStack {
        channels: hs.len(),
        height: first.height,
        width: first.width,
        labels,
    })
}
