use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::geometry::Polygon;
use super::material::{default_palette, validate_palette, MaterialSpec};
use super::SimError;
use crate::pipeline::LevelLadder;
use crate::seed;

/// Everything needed to synthesize a dataset of granule samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Side length of the square frames, in pixels.
    pub image_size: usize,
    /// Stirs (captured images) per sample.
    pub stirs: usize,
    pub samples: usize,
    /// Inclusive range of true mass purity; each sample draws a target in it.
    pub purity_range: [f64; 2],
    pub granule_count: [usize; 2],
    pub granule_radius_px: [f64; 2],
    pub vertex_count: [usize; 2],
    pub radius_jitter: f64,
    pub thickness_cm: f64,
    pub pixel_size_cm: f64,
    /// Dirichlet concentration of each sample's impurity mix (per material).
    pub mix_concentration: f64,
    /// Per-pixel Gaussian noise standard deviation, in 8-bit levels.
    pub color_noise: f32,
    /// Radial darkening towards granule rims, 0 = flat.
    pub shading: f32,
    pub palette: Vec<MaterialSpec>,
    /// Train/val/test group counts; samples are split into equal groups.
    pub split_groups: [usize; 3],
    pub level_thresholds: LevelLadder,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            stirs: 16,
            samples: 66,
            purity_range: [0.70, 0.99],
            granule_count: [300, 360],
            granule_radius_px: [5.0, 9.0],
            vertex_count: [5, 10],
            radius_jitter: 0.3,
            thickness_cm: 0.2,
            pixel_size_cm: 0.02,
            mix_concentration: 20.0,
            color_noise: 6.0,
            shading: 0.25,
            palette: default_palette(),
            split_groups: [8, 2, 1],
            level_thresholds: LevelLadder::default(),
            seed: 2023,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<usize, SimError> {
        let copper = validate_palette(&self.palette)?;
        let [lo, hi] = self.purity_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(SimError::PurityRange(lo, hi));
        }
        let bad = |what: &str| Err(SimError::Config(what.to_string()));
        if self.image_size == 0 {
            return bad("image_size must be positive");
        }
        if self.stirs == 0 {
            return bad("stirs must be at least 1");
        }
        if self.granule_count[0] == 0 || self.granule_count[0] > self.granule_count[1] {
            return bad("granule_count must be a non-empty range of positive counts");
        }
        if !(self.granule_radius_px[0] > 0.0 && self.granule_radius_px[0] <= self.granule_radius_px[1]) {
            return bad("granule_radius_px must be a positive range");
        }
        if self.vertex_count[0] < 3 || self.vertex_count[0] > self.vertex_count[1] {
            return bad("vertex_count must be a range starting at 3 or more");
        }
        if !(0.0..0.9).contains(&self.radius_jitter) {
            return bad("radius_jitter must lie in [0, 0.9)");
        }
        if !(self.thickness_cm > 0.0 && self.pixel_size_cm > 0.0) {
            return bad("thickness_cm and pixel_size_cm must be positive");
        }
        if !(self.mix_concentration > 0.0) {
            return bad("mix_concentration must be positive");
        }
        Ok(copper)
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            image_size: self.image_size,
            stirs: self.stirs,
            margin_px: self.granule_radius_px[1] * (1.0 + self.radius_jitter),
            color_noise: self.color_noise,
            shading: self.shading,
        }
    }
}

/// Frame geometry and noise settings carried by every population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub image_size: usize,
    pub stirs: usize,
    pub margin_px: f64,
    pub color_noise: f32,
    pub shading: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Granule {
    /// Index into the population's palette.
    pub material: usize,
    /// Footprint centered on the origin, pixel units.
    pub footprint: Polygon,
    pub thickness_cm: f64,
    /// Per-granule color offset, added to the material mean.
    pub tint: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePopulation {
    pub sample_id: String,
    pub palette: Vec<MaterialSpec>,
    pub granules: Vec<Granule>,
    pub pixel_size_cm: f64,
    /// Grams.
    pub total_mass: f64,
    /// cm³.
    pub total_volume: f64,
    pub rng_seed: u64,
    pub render: RenderSettings,
}

impl SamplePopulation {
    pub fn granule_volume(&self, g: &Granule) -> f64 {
        g.footprint.area() * self.pixel_size_cm * self.pixel_size_cm * g.thickness_cm
    }

    /// Volume per palette entry, cm³.
    pub fn volume_by_material(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.palette.len()];
        for g in &self.granules {
            v[g.material] += self.granule_volume(g);
        }
        v
    }

    /// Footprint area per palette entry, px².
    pub fn area_by_material(&self) -> Vec<f64> {
        let mut a = vec![0.0; self.palette.len()];
        for g in &self.granules {
            a[g.material] += g.footprint.area();
        }
        a
    }

    /// Share of total footprint area that is copper.
    pub fn copper_area_fraction(&self) -> f64 {
        let a = self.area_by_material();
        let copper: f64 = a
            .iter()
            .zip(&self.palette)
            .filter(|(_, m)| m.is_copper)
            .map(|(a, _)| a)
            .sum();
        copper / a.iter().sum::<f64>()
    }

    pub fn material_breakdown(&self) -> Vec<MaterialFraction> {
        let v = self.volume_by_material();
        self.palette
            .iter()
            .zip(&v)
            .map(|(m, &vol)| MaterialFraction {
                name: m.name.clone(),
                density: m.density,
                volume_fraction: vol / self.total_volume,
            })
            .collect()
    }

    fn with_totals(mut self) -> Self {
        let v = self.volume_by_material();
        self.total_volume = v.iter().sum();
        self.total_mass = v.iter().zip(&self.palette).map(|(v, m)| v * m.density).sum();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialFraction {
    pub name: String,
    pub density: f64,
    pub volume_fraction: f64,
}

/// Copper mass purity from total mass `m`, total volume `V` and the
/// `(density, volume fraction)` of every impurity kind:
/// `m0 = m - Σ ρ_i · p_i · V`, `P = m0 / m`.
pub fn mass_purity_from_volume_fractions(
    total_mass: f64,
    total_volume: f64,
    impurities: &[(f64, f64)],
) -> f64 {
    let impurity_mass: f64 = impurities
        .iter()
        .map(|&(density, fraction)| density * fraction * total_volume)
        .sum();
    (total_mass - impurity_mass) / total_mass
}

/// Mass purity by the subtraction form over impurity volume fractions.
pub fn true_mass_purity(pop: &SamplePopulation) -> f64 {
    let volumes = pop.volume_by_material();
    let impurities: Vec<(f64, f64)> = pop
        .palette
        .iter()
        .zip(&volumes)
        .filter(|(m, _)| !m.is_copper)
        .map(|(m, &v)| (m.density, v / pop.total_volume))
        .collect();
    mass_purity_from_volume_fractions(pop.total_mass, pop.total_volume, &impurities).clamp(0.0, 1.0)
}

/// Copper mass over total mass, summed granule by granule.
pub fn direct_mass_purity(pop: &SamplePopulation) -> f64 {
    let mut copper = 0.0;
    let mut total = 0.0;
    for g in &pop.granules {
        let m = pop.palette[g.material].density * pop.granule_volume(g);
        total += m;
        if pop.palette[g.material].is_copper {
            copper += m;
        }
    }
    copper / total
}

const MAX_ATTEMPTS: usize = 64;

/// Draws one granule population whose true mass purity lies inside
/// `config.purity_range`. Deterministic in `(config, seed)`.
pub fn sample_population(config: &GeneratorConfig, seed: u64) -> Result<SamplePopulation, SimError> {
    sample_population_with_id(config, seed, format!("pop_{seed:016x}"))
}

pub fn sample_population_with_id(
    config: &GeneratorConfig,
    seed: u64,
    sample_id: String,
) -> Result<SamplePopulation, SimError> {
    let copper = config.validate()?;
    let [lo, hi] = config.purity_range;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = seed::rng(seed, &[seed::tag::SAMPLE, attempt as u64]);
        let target = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let pop = draw_population(config, copper, target, &mut rng, seed, sample_id.clone());
        let p = true_mass_purity(&pop);
        if (lo..=hi).contains(&p) {
            return Ok(pop);
        }
    }
    Err(SimError::PurityUnreachable(lo, hi))
}

fn draw_population<R: Rng>(
    config: &GeneratorConfig,
    copper: usize,
    target: f64,
    rng: &mut R,
    seed: u64,
    sample_id: String,
) -> SamplePopulation {
    let count = rng.random_range(config.granule_count[0]..=config.granule_count[1]);
    let [r_lo, r_hi] = config.granule_radius_px;
    let footprints: Vec<Polygon> = (0..count)
        .map(|_| {
            let vertices = rng.random_range(config.vertex_count[0]..=config.vertex_count[1]);
            let radius = if r_lo == r_hi {
                r_lo
            } else {
                rng.random_range(r_lo..=r_hi)
            };
            Polygon::random_star(rng, vertices, radius, config.radius_jitter)
        })
        .collect();
    let areas: Vec<f64> = footprints.iter().map(Polygon::area).collect();
    let total_area: f64 = areas.iter().sum();

    // Impurity mix as area shares over the non-copper materials.
    let impurity_ids: Vec<usize> = (0..config.palette.len()).filter(|&i| i != copper).collect();
    let gamma = Gamma::new(config.mix_concentration, 1.0).expect("validated concentration");
    let raw: Vec<f64> = impurity_ids
        .iter()
        .map(|_| gamma.sample(rng).max(1e-12))
        .collect();
    let raw_sum: f64 = raw.iter().sum();
    let shares: Vec<f64> = raw.iter().map(|w| w / raw_sum).collect();
    let mean_density: f64 = impurity_ids
        .iter()
        .zip(&shares)
        .map(|(&i, s)| config.palette[i].density * s)
        .sum();

    // With uniform thickness mass purity is a function of areas:
    // P = ρc·Ac / (ρc·Ac + ρ̄·Ai), solved for the impurity area Ai.
    let rho_c = config.palette[copper].density;
    let impurity_area = if impurity_ids.is_empty() {
        0.0
    } else {
        total_area * rho_c * (1.0 - target) / (rho_c * (1.0 - target) + mean_density * target)
    };
    let mut targets = vec![0.0; config.palette.len()];
    targets[copper] = total_area - impurity_area;
    for (&i, s) in impurity_ids.iter().zip(&shares) {
        targets[i] = impurity_area * s;
    }

    // Largest remaining deficit takes the next granule.
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let mut assigned = vec![0.0; config.palette.len()];
    let mut material = vec![copper; count];
    for &k in &order {
        let mut best = copper;
        let mut best_deficit = f64::NEG_INFINITY;
        for (m, (&t, &a)) in targets.iter().zip(&assigned).enumerate() {
            let deficit = t - a;
            if deficit > best_deficit {
                best = m;
                best_deficit = deficit;
            }
        }
        material[k] = best;
        assigned[best] += areas[k];
    }
    refine_towards(&mut material, &areas, &config.palette, copper, &targets, target);

    let granules = footprints
        .into_iter()
        .zip(material)
        .map(|(footprint, m)| {
            let j = config.palette[m].color.jitter;
            let tint = [
                rng.random_range(-1.0f32..=1.0) * j[0],
                rng.random_range(-1.0f32..=1.0) * j[1],
                rng.random_range(-1.0f32..=1.0) * j[2],
            ];
            Granule {
                material: m,
                footprint,
                thickness_cm: config.thickness_cm,
                tint,
            }
        })
        .collect();

    SamplePopulation {
        sample_id,
        palette: config.palette.clone(),
        granules,
        pixel_size_cm: config.pixel_size_cm,
        total_mass: 0.0,
        total_volume: 0.0,
        rng_seed: seed,
        render: config.render_settings(),
    }
    .with_totals()
}

/// Single-granule reassignments that move the mass purity closer to `target`.
fn refine_towards(
    material: &mut [usize],
    areas: &[f64],
    palette: &[MaterialSpec],
    copper: usize,
    targets: &[f64],
    target: f64,
) {
    let density = |m: usize| palette[m].density;
    let mut copper_mass: f64 = 0.0;
    let mut total_mass: f64 = 0.0;
    let mut assigned = vec![0.0; palette.len()];
    for (&m, &a) in material.iter().zip(areas) {
        total_mass += density(m) * a;
        if m == copper {
            copper_mass += density(m) * a;
        }
        assigned[m] += a;
    }
    for _ in 0..material.len() {
        let current = (copper_mass / total_mass - target).abs();
        // Impurity granules may become copper; copper granules may become the
        // impurity kind furthest below its area target.
        let refill = (0..palette.len()).filter(|&m| m != copper).max_by(|&a, &b| {
            (targets[a] - assigned[a])
                .partial_cmp(&(targets[b] - assigned[b]))
                .unwrap()
                .then(b.cmp(&a))
        });
        let mut best: Option<(usize, usize, f64)> = None;
        for (k, (&m, &a)) in material.iter().zip(areas).enumerate() {
            let to = if m == copper {
                match refill {
                    Some(r) => r,
                    None => continue,
                }
            } else {
                copper
            };
            let cm = copper_mass - if m == copper { density(m) * a } else { 0.0 }
                + if to == copper { density(to) * a } else { 0.0 };
            let tm = total_mass - density(m) * a + density(to) * a;
            let err = (cm / tm - target).abs();
            if err < best.map_or(current, |b| b.2) {
                best = Some((k, to, err));
            }
        }
        let Some((k, to, _)) = best else { break };
        let (from, a) = (material[k], areas[k]);
        if from == copper {
            copper_mass -= density(from) * a;
        }
        if to == copper {
            copper_mass += density(to) * a;
        }
        total_mass += (density(to) - density(from)) * a;
        assigned[from] -= a;
        assigned[to] += a;
        material[k] = to;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            granule_count: [40, 60],
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn eq1_worked_example() {
        let p = mass_purity_from_volume_fractions(100.0, 50.0, &[(2.0, 0.1)]);
        assert!((p - 0.9).abs() < 1e-12);
        assert_eq!(mass_purity_from_volume_fractions(100.0, 50.0, &[]), 1.0);
    }

    #[test]
    fn pure_copper_population() {
        let cfg = GeneratorConfig {
            purity_range: [1.0, 1.0],
            ..small_config()
        };
        let pop = sample_population(&cfg, 11).unwrap();
        assert!(pop.granules.iter().all(|g| g.material == 0));
        assert_eq!(true_mass_purity(&pop), 1.0);
    }

    #[test]
    fn all_impurity_population_has_zero_purity() {
        let mut pop = sample_population(&small_config(), 5).unwrap();
        for g in &mut pop.granules {
            g.material = 3;
        }
        let pop = pop.with_totals();
        assert_eq!(true_mass_purity(&pop), 0.0);
        assert_eq!(direct_mass_purity(&pop), 0.0);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = small_config();
        assert_eq!(
            sample_population(&cfg, 42).unwrap(),
            sample_population(&cfg, 42).unwrap()
        );
        assert_ne!(
            sample_population(&cfg, 42).unwrap(),
            sample_population(&cfg, 43).unwrap()
        );
    }

    #[test]
    fn targeted_purity_lands_in_range() {
        let cfg = GeneratorConfig {
            purity_range: [0.83, 0.87],
            ..GeneratorConfig::default()
        };
        let pop = sample_population(&cfg, 7).unwrap();
        let p = true_mass_purity(&pop);
        assert!((0.83..=0.87).contains(&p), "purity {p}");
    }

    #[test]
    fn rejects_bad_ranges_and_palettes() {
        for range in [[0.0, 0.5], [0.5, 1.1], [0.9, 0.8], [-0.1, 0.2]] {
            let cfg = GeneratorConfig {
                purity_range: range,
                ..small_config()
            };
            assert!(matches!(
                sample_population(&cfg, 1),
                Err(SimError::PurityRange(..))
            ));
        }
        let cfg = GeneratorConfig {
            palette: vec![],
            ..small_config()
        };
        assert!(matches!(sample_population(&cfg, 1), Err(SimError::EmptyPalette)));
    }

    #[test]
    fn footprints_are_simple_with_uniform_thickness() {
        let pop = sample_population(&small_config(), 9).unwrap();
        assert!(!pop.granules.is_empty());
        for g in &pop.granules {
            assert!(g.footprint.is_simple());
            assert!(g.thickness_cm > 0.0);
            assert_eq!(g.thickness_cm, pop.granules[0].thickness_cm);
        }
    }

    #[test]
    fn totals_match_per_granule_sums() {
        let pop = sample_population(&small_config(), 12).unwrap();
        let volume: f64 = pop.granules.iter().map(|g| pop.granule_volume(g)).sum();
        let mass: f64 = pop
            .granules
            .iter()
            .map(|g| pop.granule_volume(g) * pop.palette[g.material].density)
            .sum();
        assert!((pop.total_volume - volume).abs() <= 1e-12 * volume);
        assert!((pop.total_mass - mass).abs() <= 1e-12 * mass);
    }

    #[test]
    fn eq1_equivalence_and_area_consistency() {
        let cfg = small_config();
        for s in 0..1000u64 {
            let pop = sample_population(&cfg, s).unwrap();
            let eq1 = true_mass_purity(&pop);
            assert!((eq1 - direct_mass_purity(&pop)).abs() <= 1e-12, "seed {s}");

            // Brute-force per-granule footprint oracle (uniform thickness).
            let mut copper_area = 0.0;
            let mut weighted = 0.0;
            for g in &pop.granules {
                let area = g.footprint.area();
                let rho = pop.palette[g.material].density;
                weighted += rho * area;
                if pop.palette[g.material].is_copper {
                    copper_area += rho * area;
                }
            }
            assert!((eq1 - copper_area / weighted).abs() <= 1e-9, "seed {s}");
        }
    }
}
