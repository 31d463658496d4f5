use std::collections::VecDeque;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::geometry::Polygon;
use super::population::SamplePopulation;
use super::SimError;
use crate::heatmap::{Heatmap, COPPER, IMPURITY};
use crate::seed;

const NO_GRANULE: u32 = u32::MAX;

/// Where one granule landed in a stirred layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub granule: usize,
    pub center: [f64; 2],
    pub angle: f64,
}

#[derive(Clone, Debug)]
pub struct StirredScene {
    pub image: RgbImage,
    pub mask: Heatmap,
    pub stir_index: usize,
    /// Granule index owning each pixel, row-major.
    pub top_granule: Vec<u32>,
    /// Bottom-to-top drawing order.
    pub placements: Vec<Placement>,
}

impl StirredScene {
    /// `(material, footprint area)` of every placed granule, sorted.
    pub fn inventory(&self, pop: &SamplePopulation) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .placements
            .iter()
            .map(|p| {
                let g = &pop.granules[p.granule];
                (g.material, g.footprint.placed(p.angle, p.center).area())
            })
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        v
    }
}

/// Fraction of copper pixels in the scene's mask.
pub fn true_area_purity(scene: &StirredScene) -> f64 {
    scene.mask.area_purity()
}

/// Re-lays the whole population at random (position, rotation, stacking
/// order) and renders the top view. Pixels no granule covers are given to
/// the nearest covered pixel's granule so the frame is fully tiled.
pub fn stir_and_render(pop: &SamplePopulation, stir_index: usize) -> Result<StirredScene, SimError> {
    let settings = &pop.render;
    if stir_index >= settings.stirs {
        return Err(SimError::StirIndex {
            index: stir_index,
            stirs: settings.stirs,
        });
    }
    let size = settings.image_size;
    let mut rng = seed::rng(pop.rng_seed, &[seed::tag::STIR, stir_index as u64]);

    let span = size as f64 + 2.0 * settings.margin_px;
    let mut placements: Vec<Placement> = (0..pop.granules.len())
        .map(|granule| Placement {
            granule,
            center: [
                rng.random_range(0.0..span) - settings.margin_px,
                rng.random_range(0.0..span) - settings.margin_px,
            ],
            angle: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    placements.shuffle(&mut rng);

    let mut top = vec![NO_GRANULE; size * size];
    for p in &placements {
        let poly = pop.granules[p.granule].footprint.placed(p.angle, p.center);
        rasterize(&poly, size, |idx| top[idx] = p.granule as u32);
    }
    fill_gaps(&mut top, size);

    let mut center_of = vec![[0.0; 2]; pop.granules.len()];
    let mut radius_of = vec![1.0; pop.granules.len()];
    for p in &placements {
        center_of[p.granule] = p.center;
        radius_of[p.granule] = pop.granules[p.granule].footprint.radius().max(1.0);
    }

    let brightness: f32 = rng.random_range(0.92..1.08);
    let noise = Normal::new(0.0f32, settings.color_noise.max(0.0)).expect("finite noise");
    let mut image = RgbImage::new(size as u32, size as u32);
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let id = top[y * size + x] as usize;
            let g = &pop.granules[id];
            let mat = &pop.palette[g.material];
            labels.push(if mat.is_copper { COPPER } else { IMPURITY });

            let [cx, cy] = center_of[id];
            let d = ((x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) / radius_of[id]).min(1.0);
            let mut shade = brightness * (1.0 - settings.shading * (d * d) as f32);
            if is_rim(&top, size, x, y) {
                shade *= 0.82;
            }
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = (mat.color.mean[c] + g.tint[c]) * shade + noise.sample(&mut rng);
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            image.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }

    Ok(StirredScene {
        image,
        mask: Heatmap::new(size, size, labels).expect("binary labels"),
        stir_index,
        top_granule: top,
        placements,
    })
}

fn is_rim(top: &[u32], size: usize, x: usize, y: usize) -> bool {
    let id = top[y * size + x];
    (x > 0 && top[y * size + x - 1] != id)
        || (x + 1 < size && top[y * size + x + 1] != id)
        || (y > 0 && top[(y - 1) * size + x] != id)
        || (y + 1 < size && top[(y + 1) * size + x] != id)
}

/// Calls `paint` with the index of every pixel whose center lies inside `poly`.
fn rasterize(poly: &Polygon, size: usize, mut paint: impl FnMut(usize)) {
    let ([x0, y0], [x1, y1]) = poly.bounds();
    let clamp = |v: f64| v.floor().clamp(0.0, size as f64) as usize;
    let (xa, xb) = (clamp(x0), clamp(x1 + 1.0));
    let (ya, yb) = (clamp(y0), clamp(y1 + 1.0));
    for y in ya..yb {
        for x in xa..xb {
            if poly.contains(x as f64 + 0.5, y as f64 + 0.5) {
                paint(y * size + x);
            }
        }
    }
}

/// Multi-source breadth-first fill of uncovered pixels, seeded in raster order.
fn fill_gaps(top: &mut [u32], size: usize) {
    let mut queue: VecDeque<usize> = (0..top.len()).filter(|&i| top[i] != NO_GRANULE).collect();
    if queue.is_empty() {
        return;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % size, i / size);
        let mut visit = |j: usize, top: &mut [u32]| {
            if top[j] == NO_GRANULE {
                top[j] = top[i];
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1, top);
        }
        if x + 1 < size {
            visit(i + 1, top);
        }
        if y > 0 {
            visit(i - size, top);
        }
        if y + 1 < size {
            visit(i + size, top);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_sim::population::{sample_population, GeneratorConfig, Granule};

    fn small_pop(seed: u64) -> SamplePopulation {
        let cfg = GeneratorConfig {
            image_size: 32,
            granule_count: [30, 40],
            granule_radius_px: [3.0, 5.0],
            ..GeneratorConfig::default()
        };
        sample_population(&cfg, seed).unwrap()
    }

    #[test]
    fn frame_fully_covered_and_mask_coherent() {
        let pop = small_pop(1);
        for k in 0..4 {
            let s = stir_and_render(&pop, k).unwrap();
            assert_eq!(s.image.dimensions(), (32, 32));
            assert_eq!((s.mask.height(), s.mask.width()), (32, 32));
            for (i, &id) in s.top_granule.iter().enumerate() {
                assert_ne!(id, NO_GRANULE);
                let copper = pop.palette[pop.granules[id as usize].material].is_copper;
                assert_eq!(s.mask.labels()[i] == COPPER, copper);
            }
        }
    }

    #[test]
    fn topmost_covering_granule_owns_each_covered_pixel() {
        // Exhaustive check against an independent per-pixel scan from the top.
        let pop = small_pop(2);
        let s = stir_and_render(&pop, 0).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let owner = s.placements.iter().rev().find(|p| {
                    pop.granules[p.granule]
                        .footprint
                        .placed(p.angle, p.center)
                        .contains(x as f64 + 0.5, y as f64 + 0.5)
                });
                if let Some(p) = owner {
                    assert_eq!(s.top_granule[y * 32 + x], p.granule as u32);
                }
            }
        }
    }

    #[test]
    fn stirs_conserve_population_and_change_layout() {
        let pop = small_pop(3);
        let a = stir_and_render(&pop, 0).unwrap();
        let b = stir_and_render(&pop, 1).unwrap();
        let (ia, ib) = (a.inventory(&pop), b.inventory(&pop));
        assert_eq!(ia.len(), ib.len());
        for (x, y) in ia.iter().zip(&ib) {
            assert_eq!(x.0, y.0);
            assert!((x.1 - y.1).abs() <= 1e-9 * x.1);
        }
        assert_ne!(a.top_granule, b.top_granule);
    }

    #[test]
    fn stir_is_deterministic() {
        let pop = small_pop(4);
        let a = stir_and_render(&pop, 2).unwrap();
        let b = stir_and_render(&pop, 2).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn stir_index_out_of_range() {
        let pop = small_pop(5);
        assert!(matches!(
            stir_and_render(&pop, pop.render.stirs),
            Err(SimError::StirIndex { .. })
        ));
    }

    #[test]
    fn single_copper_granule_fills_frame() {
        let mut pop = small_pop(6);
        pop.granules = vec![Granule {
            material: 0,
            footprint: Polygon {
                vertices: vec![[-40.0, -40.0], [40.0, -40.0], [40.0, 40.0], [-40.0, 40.0]],
            },
            thickness_cm: 0.2,
            tint: [0.0; 3],
        }];
        let s = stir_and_render(&pop, 0).unwrap();
        assert_eq!(s.mask.impurity_count(), 0);
        assert_eq!(true_area_purity(&s), 1.0);
    }

    #[test]
    fn area_purity_matches_pixel_count_and_mean_tracks_population() {
        let cfg = GeneratorConfig {
            image_size: 64,
            granule_count: [150, 170],
            granule_radius_px: [3.0, 5.0],
            purity_range: [0.79, 0.81],
            ..GeneratorConfig::default()
        };
        let pop = sample_population(&cfg, 21).unwrap();
        let mut purities = Vec::new();
        for k in 0..16 {
            let s = stir_and_render(&pop, k).unwrap();
            let zeros = s.mask.labels().iter().filter(|&&l| l == 0).count();
            let counted = zeros as f64 / (64.0 * 64.0);
            assert_eq!(true_area_purity(&s), counted);
            purities.push(counted);
        }
        let mean = purities.iter().sum::<f64>() / 16.0;
        assert!(purities.iter().any(|&p| p != purities[0]));
        assert!(
            (mean - pop.copper_area_fraction()).abs() < 0.05,
            "mean {mean} vs {}",
            pop.copper_area_fraction()
        );
    }
}
