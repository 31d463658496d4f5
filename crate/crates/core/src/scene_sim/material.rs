use serde::{Deserialize, Serialize};

use super::SimError;

/// Mean RGB color with a uniform per-channel jitter range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorModel {
    pub mean: [f32; 3],
    pub jitter: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub name: String,
    /// g/cm³
    pub density: f64,
    pub is_copper: bool,
    pub color: ColorModel,
}

impl MaterialSpec {
    fn new(name: &str, density: f64, is_copper: bool, mean: [f32; 3], jitter: [f32; 3]) -> Self {
        Self {
            name: name.to_string(),
            density,
            is_copper,
            color: ColorModel { mean, jitter },
        }
    }
}

/// Copper plus six impurity materials spanning 0.9 to 7.9 g/cm³.
pub fn default_palette() -> Vec<MaterialSpec> {
    vec![
        MaterialSpec::new("copper", 8.96, true, [192.0, 112.0, 58.0], [16.0, 12.0, 10.0]),
        MaterialSpec::new(
            "polypropylene",
            0.9,
            false,
            [226.0, 226.0, 214.0],
            [10.0, 10.0, 10.0],
        ),
        MaterialSpec::new("pvc", 1.4, false, [72.0, 112.0, 172.0], [10.0, 12.0, 14.0]),
        MaterialSpec::new("glass", 2.5, false, [118.0, 172.0, 138.0], [12.0, 12.0, 12.0]),
        MaterialSpec::new("aluminium", 2.7, false, [172.0, 174.0, 180.0], [10.0, 10.0, 10.0]),
        MaterialSpec::new("zinc", 7.1, false, [108.0, 118.0, 136.0], [8.0, 8.0, 10.0]),
        MaterialSpec::new("iron", 7.87, false, [62.0, 56.0, 52.0], [8.0, 8.0, 8.0]),
    ]
}

/// Checks the palette invariants and returns the copper index.
pub fn validate_palette(palette: &[MaterialSpec]) -> Result<usize, SimError> {
    if palette.is_empty() {
        return Err(SimError::EmptyPalette);
    }
    for m in palette {
        if !(m.density > 0.0 && m.density.is_finite()) {
            return Err(SimError::BadDensity {
                name: m.name.clone(),
                density: m.density,
            });
        }
    }
    let copper: Vec<usize> = palette
        .iter()
        .enumerate()
        .filter(|(_, m)| m.is_copper)
        .map(|(i, _)| i)
        .collect();
    match copper.as_slice() {
        [i] => Ok(*i),
        other => Err(SimError::CopperCount(other.len())),
    }
}
