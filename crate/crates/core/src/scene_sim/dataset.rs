//! On-disk dataset layout.
//!
//! ```text
//! manifest.json
//! samples/<id>/images/img_<k>.png   8-bit RGB
//! samples/<id>/masks/mask_<k>.png   8-bit gray, 0 = copper, 255 = impurity
//! samples/<id>/annotation.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::population::{
    sample_population_with_id, true_mass_purity, GeneratorConfig, MaterialFraction, SamplePopulation,
};
use super::render::stir_and_render;
use super::SimError;
use crate::digest::{json_digest, write_atomic};
use crate::heatmap::Heatmap;
use crate::pipeline::LevelLadder;
use crate::seed;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Sample ids grouped consecutively and dealt to train/val/test by group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub splits: Splits,
    pub groups: Vec<Vec<String>>,
}

impl SplitAssignment {
    /// Equal consecutive groups; the first `counts[0]` go to train, the next
    /// `counts[1]` to val, the rest to test.
    pub fn by_groups(ids: &[String], counts: [usize; 3]) -> Result<Self, SimError> {
        let groups_total: usize = counts.iter().sum();
        if groups_total == 0 || ids.is_empty() || ids.len() % groups_total != 0 {
            return Err(SimError::Config(format!(
                "{} samples cannot be divided into {groups_total} equal groups",
                ids.len()
            )));
        }
        let size = ids.len() / groups_total;
        let groups: Vec<Vec<String>> = ids.chunks(size).map(<[String]>::to_vec).collect();
        let mut splits = Splits::default();
        for (g, members) in groups.iter().enumerate() {
            let bucket = if g < counts[0] {
                &mut splits.train
            } else if g < counts[0] + counts[1] {
                &mut splits.val
            } else {
                &mut splits.test
            };
            bucket.extend(members.iter().cloned());
        }
        Ok(Self { splits, groups })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n: usize,
    pub image_size: usize,
    pub splits: Splits,
    pub groups: Vec<Vec<String>>,
    pub num_levels: usize,
    pub level_thresholds: Vec<f64>,
    pub generator_config_digest: String,
}

impl DatasetManifest {
    pub fn ladder(&self) -> Result<LevelLadder, SimError> {
        LevelLadder::new(self.level_thresholds.clone())
            .map_err(|e| SimError::Config(format!("manifest ladder: {e}")))
    }

    pub fn group_of(&self, id: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.iter().any(|s| s == id))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub area_purity: Vec<f64>,
    pub mass_purity: f64,
    pub rating_level: usize,
    pub material_breakdown: Vec<MaterialFraction>,
}

fn index_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(3)
}

pub fn image_name(k: usize, n: usize) -> String {
    format!("img_{k:0w$}.png", w = index_width(n))
}

pub fn mask_name(k: usize, n: usize) -> String {
    format!("mask_{k:0w$}.png", w = index_width(n))
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:04}")
}

fn prepare_output(out: &Path, overwrite: bool) -> Result<(), SimError> {
    if out.exists() {
        let occupied = fs::read_dir(out)?.next().is_some();
        if occupied {
            if !overwrite {
                return Err(SimError::OutputOccupied(out.to_path_buf()));
            }
            fs::remove_dir_all(out)?;
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

/// Renders `n` stirs of every population and writes the dataset.
pub fn export_dataset(
    populations: &[SamplePopulation],
    n: usize,
    assignment: &SplitAssignment,
    ladder: &LevelLadder,
    generator_config_digest: &str,
    out: &Path,
    overwrite: bool,
) -> Result<DatasetManifest, SimError> {
    if n == 0 {
        return Err(SimError::Config("n must be at least 1".into()));
    }
    let mut covered: Vec<&String> = assignment.splits.all().collect();
    covered.sort();
    let mut ids: Vec<&String> = populations.iter().map(|p| &p.sample_id).collect();
    ids.sort();
    if covered != ids || covered.windows(2).any(|w| w[0] == w[1]) {
        return Err(SimError::Config(
            "split assignment must cover every sample exactly once".into(),
        ));
    }
    let image_size = populations.first().map_or(0, |p| p.render.image_size);
    prepare_output(out, overwrite)?;

    for pop in populations {
        if pop.render.stirs < n || pop.render.image_size != image_size {
            return Err(SimError::Config(format!(
                "sample {} renders {} stirs at {}px, dataset needs {n} at {image_size}px",
                pop.sample_id, pop.render.stirs, pop.render.image_size
            )));
        }
        let dir = out.join("samples").join(&pop.sample_id);
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let mut area_purity = Vec::with_capacity(n);
        for k in 0..n {
            let scene = stir_and_render(pop, k)?;
            scene.image.save(dir.join("images").join(image_name(k, n)))?;
            scene.mask.save_png(&dir.join("masks").join(mask_name(k, n)))?;
            area_purity.push(scene.mask.area_purity());
        }
        let mass_purity = true_mass_purity(pop);
        let annotation = Annotation {
            area_purity,
            mass_purity,
            rating_level: ladder.level(mass_purity),
            material_breakdown: pop.material_breakdown(),
        };
        write_atomic(
            &dir.join("annotation.json"),
            &serde_json::to_vec_pretty(&annotation)?,
        )?;
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        n,
        image_size,
        splits: assignment.splits.clone(),
        groups: assignment.groups.clone(),
        num_levels: ladder.num_levels(),
        level_thresholds: ladder.thresholds().to_vec(),
        generator_config_digest: generator_config_digest.to_string(),
    };
    write_atomic(&out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Populations for every sample of `config`, each from its own seed stream.
pub fn generate_populations(config: &GeneratorConfig) -> Result<Vec<SamplePopulation>, SimError> {
    (0..config.samples)
        .map(|i| {
            let s = seed::derive(config.seed, &[seed::tag::SAMPLE, i as u64]);
            sample_population_with_id(config, s, sample_id(i))
        })
        .collect()
}

/// Samples, splits and exports a full dataset from one config.
pub fn generate_dataset(
    config: &GeneratorConfig,
    out: &Path,
    overwrite: bool,
) -> Result<DatasetManifest, SimError> {
    config.validate()?;
    let populations = generate_populations(config)?;
    let ids: Vec<String> = populations.iter().map(|p| p.sample_id.clone()).collect();
    let assignment = SplitAssignment::by_groups(&ids, config.split_groups)?;
    export_dataset(
        &populations,
        config.stirs,
        &assignment,
        &config.level_thresholds,
        &json_digest(config),
        out,
        overwrite,
    )
}

/// One sample loaded from disk.
#[derive(Clone, Debug)]
pub struct SampleData {
    pub id: String,
    pub images: Vec<RgbImage>,
    pub masks: Vec<Heatmap>,
    pub annotation: Annotation,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, SimError> {
        let bytes = fs::read(root.join("manifest.json"))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(SimError::Config(format!(
                "unsupported dataset format version {}",
                manifest.format_version
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn sample_dir(&self, id: &str) -> PathBuf {
        self.root.join("samples").join(id)
    }

    pub fn annotation(&self, id: &str) -> Result<Annotation, SimError> {
        let bytes = fs::read(self.sample_dir(id).join("annotation.json"))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn load_sample(&self, id: &str) -> Result<SampleData, SimError> {
        let dir = self.sample_dir(id);
        let n = self.manifest.n;
        let mut images = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for k in 0..n {
            images.push(image::open(dir.join("images").join(image_name(k, n)))?.into_rgb8());
            masks.push(Heatmap::load_png(&dir.join("masks").join(mask_name(k, n)))?);
        }
        Ok(SampleData {
            id: id.to_string(),
            images,
            masks,
            annotation: self.annotation(id)?,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SampleData>, SimError> {
        self.manifest
            .splits
            .get(split)
            .iter()
            .map(|id| self.load_sample(id))
            .collect()
    }
}
