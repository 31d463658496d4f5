//! Impurity cut-paste augmentation and joint image/mask geometric transforms.
//!
//! Cut-paste works in two steps: every connected impurity region of the
//! training images is cut out into a [`PatchBank`]; later, `k` randomly
//! chosen, randomly rotated patches are hard-pasted onto copper areas of a
//! training image, and the mask is updated so it stays exact.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::write_atomic;
use crate::heatmap::{Heatmap, COPPER, IMPURITY};
use crate::seed;

/// Regions smaller than this many pixels are not banked.
pub const DEFAULT_MIN_AREA: usize = 16;

/// Placement attempts per patch before giving up on it.
pub const PLACEMENT_RETRIES: usize = 32;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("patch bank is empty")]
    EmptyBank,
    #[error("image {image_w}x{image_h} does not match mask {mask_w}x{mask_h}")]
    SizeMismatch {
        image_w: usize,
        image_h: usize,
        mask_w: usize,
        mask_h: usize,
    },
    #[error("patch bank directory is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Axis-aligned rectangle in source-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// One cut-out impurity region: bbox-sized pixels plus a coverage mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpurityPatch {
    pub pixels: RgbImage,
    /// Row-major over the bbox; `true` where the region covers the pixel.
    pub coverage: Vec<bool>,
    pub source_id: String,
    pub bbox: BBox,
}

impl ImpurityPatch {
    pub fn area(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }

    fn covered(&self, x: usize, y: usize) -> bool {
        self.coverage[y * self.bbox.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchBank {
    pub patches: Vec<ImpurityPatch>,
    pub rng_seed: u64,
}

impl PatchBank {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

fn check_sizes(image: &RgbImage, mask: &Heatmap) -> Result<(), AugmentError> {
    if image.width() as usize != mask.width() || image.height() as usize != mask.height() {
        return Err(AugmentError::SizeMismatch {
            image_w: image.width() as usize,
            image_h: image.height() as usize,
            mask_w: mask.width(),
            mask_h: mask.height(),
        });
    }
    Ok(())
}

/// 4-connected components of impurity pixels, each as a list of `(x, y)`.
pub fn impurity_components(mask: &Heatmap) -> Vec<Vec<(usize, usize)>> {
    let (w, h) = (mask.width(), mask.height());
    let labels = mask.labels();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || labels[start] != IMPURITY {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            comp.push((x, y));
            let mut visit = |j: usize| {
                if !seen[j] && labels[j] == IMPURITY {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(comp);
    }
    out
}

/// Cuts every impurity component of at least `min_area` pixels out of the
/// given `(source_id, image, mask)` triples, in input then scan order.
pub fn extract_impurity_regions<'a, I>(
    scenes: I,
    min_area: usize,
    rng_seed: u64,
) -> Result<PatchBank, AugmentError>
where
    I: IntoIterator<Item = (&'a str, &'a RgbImage, &'a Heatmap)>,
{
    let mut patches = Vec::new();
    for (source_id, image, mask) in scenes {
        check_sizes(image, mask)?;
        for comp in impurity_components(mask) {
            if comp.len() < min_area.max(1) {
                continue;
            }
            let x0 = comp.iter().map(|p| p.0).min().expect("non-empty");
            let x1 = comp.iter().map(|p| p.0).max().expect("non-empty");
            let y0 = comp.iter().map(|p| p.1).min().expect("non-empty");
            let y1 = comp.iter().map(|p| p.1).max().expect("non-empty");
            let bbox = BBox {
                x: x0,
                y: y0,
                width: x1 - x0 + 1,
                height: y1 - y0 + 1,
            };
            let mut coverage = vec![false; bbox.width * bbox.height];
            let mut pixels = RgbImage::new(bbox.width as u32, bbox.height as u32);
            for &(x, y) in &comp {
                let (px, py) = (x - x0, y - y0);
                coverage[py * bbox.width + px] = true;
                pixels.put_pixel(px as u32, py as u32, *image.get_pixel(x as u32, y as u32));
            }
            patches.push(ImpurityPatch {
                pixels,
                coverage,
                source_id: source_id.to_string(),
                bbox,
            });
        }
    }
    Ok(PatchBank { patches, rng_seed })
}

/// A patch resampled at some rotation: covered pixels as offsets from the
/// anchor (the rounded centroid of the rotated coverage) with their colors.
#[derive(Clone, Debug, PartialEq)]
pub struct RotatedPatch {
    pub offsets: Vec<(i64, i64, Rgb<u8>)>,
}

impl RotatedPatch {
    pub fn area(&self) -> usize {
        self.offsets.len()
    }
}

/// Nearest-neighbour rotation of a patch about its bbox center.
pub fn rotate_patch(patch: &ImpurityPatch, angle: f64) -> RotatedPatch {
    let (w, h) = (patch.bbox.width as f64, patch.bbox.height as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (sin, cos) = angle.sin_cos();
    let r = (w * w + h * h).sqrt() / 2.0 + 1.0;
    let span = r.ceil() as i64;
    let mut cells = Vec::new();
    for oy in -span..=span {
        for ox in -span..=span {
            // Destination pixel center relative to the rotation center,
            // mapped back into the patch frame.
            let (dx, dy) = (ox as f64 + 0.5, oy as f64 + 0.5);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            if sx < 0.0 || sy < 0.0 || sx >= w || sy >= h {
                continue;
            }
            let (ix, iy) = (sx as usize, sy as usize);
            if patch.covered(ix, iy) {
                cells.push((ox, oy, *patch.pixels.get_pixel(ix as u32, iy as u32)));
            }
        }
    }
    if cells.is_empty() {
        return RotatedPatch { offsets: cells };
    }
    let n = cells.len() as f64;
    let ax = (cells.iter().map(|c| c.0 as f64).sum::<f64>() / n).round() as i64;
    let ay = (cells.iter().map(|c| c.1 as f64).sum::<f64>() / n).round() as i64;
    RotatedPatch {
        offsets: cells.into_iter().map(|(x, y, c)| (x - ax, y - ay, c)).collect(),
    }
}

/// Result of [`paste_impurities`].
#[derive(Clone, Debug, PartialEq)]
pub struct PasteOutcome {
    pub image: RgbImage,
    pub mask: Heatmap,
    /// Patches actually placed (≤ k).
    pub pasted: usize,
    /// Union of all pasted coverage, row-major over the frame.
    pub covered: Vec<bool>,
}

/// Pastes `k` patches chosen with replacement, each rotated uniformly in
/// [0, 2π) and anchored on a copper pixel with its whole coverage in bounds.
pub fn paste_impurities(
    image: &RgbImage,
    mask: &Heatmap,
    bank: &PatchBank,
    k: usize,
    seed_value: u64,
) -> Result<PasteOutcome, AugmentError> {
    check_sizes(image, mask)?;
    if bank.is_empty() {
        return Err(AugmentError::EmptyBank);
    }
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let mut out_image = image.clone();
    let mut out_mask = mask.clone();
    let mut covered = vec![false; (w * h) as usize];
    let mut rng = seed::rng(seed_value, &[seed::tag::PASTE]);
    let mut pasted = 0;
    for _ in 0..k {
        let patch = &bank.patches[rng.random_range(0..bank.len())];
        let rotated = rotate_patch(patch, rng.random_range(0.0..std::f64::consts::TAU));
        if rotated.offsets.is_empty() {
            continue;
        }
        let copper: Vec<usize> = out_mask
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == COPPER)
            .map(|(i, _)| i)
            .collect();
        if copper.is_empty() {
            break;
        }
        let (min_x, max_x, min_y, max_y) = rotated.offsets.iter().fold(
            (i64::MAX, i64::MIN, i64::MAX, i64::MIN),
            |(a, b, c, d), &(x, y, _)| (a.min(x), b.max(x), c.min(y), d.max(y)),
        );
        for _ in 0..PLACEMENT_RETRIES {
            let anchor = copper[rng.random_range(0..copper.len())] as i64;
            let (ax, ay) = (anchor % w, anchor / w);
            if ax + min_x < 0 || ay + min_y < 0 || ax + max_x >= w || ay + max_y >= h {
                continue;
            }
            for &(dx, dy, color) in &rotated.offsets {
                let (x, y) = ((ax + dx) as usize, (ay + dy) as usize);
                out_image.put_pixel(x as u32, y as u32, color);
                out_mask.set(y, x, IMPURITY);
                covered[y * w as usize + x] = true;
            }
            pasted += 1;
            break;
        }
    }
    Ok(PasteOutcome {
        image: out_image,
        mask: out_mask,
        pasted,
        covered,
    })
}

/// Which standard transforms [`standard_augment`] may draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentOps {
    pub flip: bool,
    pub rotate: bool,
    pub translate: bool,
}

impl Default for AugmentOps {
    fn default() -> Self {
        Self {
            flip: true,
            rotate: true,
            translate: true,
        }
    }
}

/// A concrete geometric transform: flips, then quarter turns
/// counter-clockwise, then a wrap-around shift.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
    pub shift: (usize, usize),
}

impl Transform {
    pub fn random<R: Rng + ?Sized>(ops: AugmentOps, width: usize, height: usize, rng: &mut R) -> Self {
        let mut t = Transform::default();
        if ops.flip {
            t.flip_h = rng.random_bool(0.5);
            t.flip_v = rng.random_bool(0.5);
        }
        if ops.rotate {
            t.quarter_turns = if width == height {
                rng.random_range(0..4)
            } else {
                2 * rng.random_range(0..2)
            };
        }
        if ops.translate {
            t.shift = (rng.random_range(0..width), rng.random_range(0..height));
        }
        t
    }

    /// Output dimensions for an input of `width × height`.
    pub fn output_dims(&self, width: usize, height: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (height, width)
        } else {
            (width, height)
        }
    }

    /// Source coordinate of output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, width: usize, height: usize) -> (usize, usize) {
        let (ow, oh) = self.output_dims(width, height);
        // Undo the shift.
        let x = (x + ow - self.shift.0 % ow) % ow;
        let y = (y + oh - self.shift.1 % oh) % oh;
        // Undo the rotation; (fw, fh) are the dims before rotating.
        let (mut x, mut y) = (x, y);
        let (mut cw, mut ch) = (ow, oh);
        for _ in 0..self.quarter_turns % 4 {
            // A CCW turn maps (sx, sy) in a cw'×ch' frame to (sy, cw'-1-sx);
            // invert it.
            let (sx, sy) = (ch - 1 - y, x);
            (x, y) = (sx, sy);
            (cw, ch) = (ch, cw);
        }
        debug_assert_eq!((cw, ch), (width, height));
        if self.flip_h {
            x = width - 1 - x;
        }
        if self.flip_v {
            y = height - 1 - y;
        }
        (x, y)
    }

    pub fn apply(&self, image: &RgbImage, mask: &Heatmap) -> Result<(RgbImage, Heatmap), AugmentError> {
        check_sizes(image, mask)?;
        let (w, h) = (mask.width(), mask.height());
        let (ow, oh) = self.output_dims(w, h);
        let mut out_img = RgbImage::new(ow as u32, oh as u32);
        let mut labels = Vec::with_capacity(ow * oh);
        for y in 0..oh {
            for x in 0..ow {
                let (sx, sy) = self.source(x, y, w, h);
                out_img.put_pixel(x as u32, y as u32, *image.get_pixel(sx as u32, sy as u32));
                labels.push(mask.get(sy, sx));
            }
        }
        let mask = Heatmap::new(oh, ow, labels).expect("consistent dimensions");
        Ok((out_img, mask))
    }
}

/// Draws a random [`Transform`] from `ops` and applies it jointly.
pub fn standard_augment(
    image: &RgbImage,
    mask: &Heatmap,
    ops: AugmentOps,
    seed_value: u64,
) -> Result<(RgbImage, Heatmap), AugmentError> {
    let mut rng = seed::rng(seed_value, &[seed::tag::AUGMENT]);
    Transform::random(ops, mask.width(), mask.height(), &mut rng).apply(image, mask)
}

#[derive(Serialize, Deserialize)]
struct BankIndex {
    rng_seed: u64,
    patches: Vec<BankEntry>,
}

#[derive(Serialize, Deserialize)]
struct BankEntry {
    pixels: String,
    coverage: String,
    source_id: String,
    bbox: BBox,
}

impl PatchBank {
    /// Writes `patch_<i>.png` / `patch_<i>_coverage.png` pairs plus `index.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), AugmentError> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, p) in self.patches.iter().enumerate() {
            let pixels = format!("patch_{i:05}.png");
            let coverage = format!("patch_{i:05}_coverage.png");
            p.pixels.save(dir.join(&pixels))?;
            let cov = GrayImage::from_fn(p.bbox.width as u32, p.bbox.height as u32, |x, y| {
                Luma([if p.covered(x as usize, y as usize) { 255 } else { 0 }])
            });
            cov.save(dir.join(&coverage))?;
            entries.push(BankEntry {
                pixels,
                coverage,
                source_id: p.source_id.clone(),
                bbox: p.bbox,
            });
        }
        let index = BankIndex {
            rng_seed: self.rng_seed,
            patches: entries,
        };
        write_atomic(&dir.join("index.json"), &serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self, AugmentError> {
        let index: BankIndex = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
        let mut patches = Vec::with_capacity(index.patches.len());
        for e in index.patches {
            let pixels = image::open(dir.join(&e.pixels))?.to_rgb8();
            let cov = image::open(dir.join(&e.coverage))?.to_luma8();
            let dims = (e.bbox.width as u32, e.bbox.height as u32);
            if pixels.dimensions() != dims || cov.dimensions() != dims {
                return Err(AugmentError::Corrupt(format!(
                    "{} size differs from bbox",
                    e.pixels
                )));
            }
            let coverage = cov.pixels().map(|p| p[0] > 127).collect::<Vec<_>>();
            if !coverage.iter().any(|&c| c) {
                return Err(AugmentError::Corrupt(format!(
                    "{} has empty coverage",
                    e.coverage
                )));
            }
            patches.push(ImpurityPatch {
                pixels,
                coverage,
                source_id: e.source_id,
                bbox: e.bbox,
            });
        }
        Ok(Self {
            patches,
            rng_seed: index.rng_seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with_blobs() -> (RgbImage, Heatmap) {
        let (w, h) = (24usize, 20usize);
        let mut labels = vec![COPPER; w * h];
        // 5×5, 4×6 and a 3×3 sub-threshold blob.
        for (x0, y0, bw, bh) in [(1, 1, 5, 5), (12, 2, 4, 6), (3, 14, 3, 3), (15, 12, 6, 6)] {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    labels[y * w + x] = IMPURITY;
                }
            }
        }
        let mask = Heatmap::new(h, w, labels).unwrap();
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb([x as u8 * 10, y as u8 * 10, 7]));
        (img, mask)
    }

    #[test]
    fn extraction_counts_components_above_threshold() {
        let (img, mask) = scene_with_blobs();
        let bank = extract_impurity_regions([("a", &img, &mask)], DEFAULT_MIN_AREA, 1).unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.patches[0].area(), 25);
        assert_eq!(
            bank.patches[0].bbox,
            BBox {
                x: 1,
                y: 1,
                width: 5,
                height: 5
            }
        );
        // Pixels copied verbatim.
        assert_eq!(*bank.patches[0].pixels.get_pixel(0, 0), *img.get_pixel(1, 1));

        let copper = Heatmap::filled(8, 8, COPPER);
        let bank = extract_impurity_regions([("b", &RgbImage::new(8, 8), &copper)], 16, 1).unwrap();
        assert!(bank.is_empty());
    }

    #[test]
    fn zero_rotation_keeps_patch_shape() {
        let (img, mask) = scene_with_blobs();
        let bank = extract_impurity_regions([("a", &img, &mask)], 16, 1).unwrap();
        for p in &bank.patches {
            assert_eq!(rotate_patch(p, 0.0).area(), p.area());
        }
    }

    #[test]
    fn paste_on_all_copper_scene_counts_rotated_coverage() {
        let (img, mask) = scene_with_blobs();
        let bank = PatchBank {
            patches: extract_impurity_regions([("a", &img, &mask)], 16, 1)
                .unwrap()
                .patches[..1]
                .to_vec(),
            rng_seed: 1,
        };
        let target = Heatmap::filled(40, 40, COPPER);
        let canvas = RgbImage::new(40, 40);
        for seed_value in 0..20 {
            let out = paste_impurities(&canvas, &target, &bank, 1, seed_value).unwrap();
            assert_eq!(out.pasted, 1);
            // Replay the draws to recover the rotation used.
            let mut rng = seed::rng(seed_value, &[seed::tag::PASTE]);
            let _: usize = rng.random_range(0..1);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            assert_eq!(
                out.mask.impurity_count(),
                rotate_patch(&bank.patches[0], angle).area()
            );
        }
    }

    #[test]
    fn k_zero_is_identity_and_empty_bank_errors() {
        let (img, mask) = scene_with_blobs();
        let bank = extract_impurity_regions([("a", &img, &mask)], 16, 1).unwrap();
        let out = paste_impurities(&img, &mask, &bank, 0, 3).unwrap();
        assert_eq!((out.image, out.mask, out.pasted), (img.clone(), mask.clone(), 0));
        let empty = PatchBank {
            patches: vec![],
            rng_seed: 0,
        };
        assert!(matches!(
            paste_impurities(&img, &mask, &empty, 1, 0),
            Err(AugmentError::EmptyBank)
        ));
    }

    #[test]
    fn paste_gives_up_without_copper() {
        let (img, mask) = scene_with_blobs();
        let bank = extract_impurity_regions([("a", &img, &mask)], 16, 1).unwrap();
        let all_imp = Heatmap::filled(20, 24, IMPURITY);
        let out = paste_impurities(&img, &all_imp, &bank, 3, 0).unwrap();
        assert_eq!(out.pasted, 0);
        assert_eq!(out.mask, all_imp);
    }

    #[test]
    fn transforms_are_consistent() {
        let (img, mask) = scene_with_blobs();
        let flip = Transform {
            flip_h: true,
            ..Default::default()
        };
        let (i1, m1) = flip.apply(&img, &mask).unwrap();
        let (i2, m2) = flip.apply(&i1, &m1).unwrap();
        assert_eq!((i2, m2), (img.clone(), mask.clone()));
        assert_eq!(
            Transform::default().apply(&img, &mask).unwrap(),
            (img.clone(), mask.clone())
        );

        let turn = Transform {
            quarter_turns: 1,
            ..Default::default()
        };
        let (ti, tm) = turn.apply(&img, &mask).unwrap();
        assert_eq!((tm.width(), tm.height()), (20, 24));
        // A CCW quarter turn sends the top-right corner to the top-left.
        assert_eq!(*ti.get_pixel(0, 0), *img.get_pixel(23, 0));
        let mut back = (ti, tm);
        for _ in 0..3 {
            back = turn.apply(&back.0, &back.1).unwrap();
        }
        assert_eq!(back, (img, mask));
    }

    #[test]
    fn bank_persists_losslessly() {
        let (img, mask) = scene_with_blobs();
        let bank = extract_impurity_regions([("a", &img, &mask)], 16, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bank.save_dir(dir.path()).unwrap();
        assert_eq!(PatchBank::load_dir(dir.path()).unwrap(), bank);
    }
}
