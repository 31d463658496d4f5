use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Thresholds of the default 7-level ladder. Level 1 is the best grade.
pub const DEFAULT_THRESHOLDS: [f64; 6] = [0.95, 0.94, 0.88, 0.85, 0.82, 0.745];

#[derive(Debug, Error, PartialEq)]
pub enum LadderError {
    #[error("a ladder needs at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("threshold {index} = {value} lies outside (0, 1)")]
    OutOfRange { index: usize, value: f64 },
    #[error("thresholds must be strictly decreasing (index {index})")]
    NotDecreasing { index: usize },
    #[error("equal-width ladder needs a lower bound in [0, 1), got {0}")]
    BadLowerBound(f64),
}

/// Monotone step map from purity to level.
///
/// `level(p)` is the smallest `j` with `p >= thresholds[j - 1]`, and
/// `num_levels` when no threshold is reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LevelLadder {
    thresholds: Vec<f64>,
}

impl LevelLadder {
    pub fn new(thresholds: Vec<f64>) -> Result<Self, LadderError> {
        if thresholds.is_empty() {
            return Err(LadderError::TooFewLevels(thresholds.len() + 1));
        }
        for (index, &value) in thresholds.iter().enumerate() {
            if !(value > 0.0 && value < 1.0) {
                return Err(LadderError::OutOfRange { index, value });
            }
            if index > 0 && value >= thresholds[index - 1] {
                return Err(LadderError::NotDecreasing { index });
            }
        }
        Ok(Self { thresholds })
    }

    /// `num_levels` equal-width bands over `[lower, 1.0]`.
    pub fn equal_width(num_levels: usize, lower: f64) -> Result<Self, LadderError> {
        if num_levels < 2 {
            return Err(LadderError::TooFewLevels(num_levels));
        }
        if !(0.0..1.0).contains(&lower) {
            return Err(LadderError::BadLowerBound(lower));
        }
        let width = (1.0 - lower) / num_levels as f64;
        let thresholds = (1..num_levels).map(|j| 1.0 - j as f64 * width).collect();
        Self::new(thresholds)
    }

    pub fn num_levels(&self) -> usize {
        self.thresholds.len() + 1
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn level(&self, purity: f64) -> usize {
        self.thresholds
            .iter()
            .position(|&t| purity >= t)
            .map_or(self.num_levels(), |i| i + 1)
    }
}

impl Default for LevelLadder {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

impl TryFrom<Vec<f64>> for LevelLadder {
    type Error = LadderError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<LevelLadder> for Vec<f64> {
    fn from(l: LevelLadder) -> Self {
        l.thresholds
    }
}

pub fn purity_to_level(purity: f64, ladder: &LevelLadder) -> usize {
    ladder.level(purity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_ladder_reproduces_published_pairs() {
        let ladder = LevelLadder::default();
        let pairs = [
            (0.970, 1),
            (0.944, 2),
            (0.938, 3),
            (0.908, 3),
            (0.855, 4),
            (0.842, 5),
            (0.797, 6),
            (0.771, 6),
            (0.751, 6),
            (0.735, 7),
            (0.976, 1),
        ];
        for (p, level) in pairs {
            assert_eq!(purity_to_level(p, &ladder), level, "purity {p}");
        }
        assert_eq!(ladder.num_levels(), 7);
    }

    #[test]
    fn extremes() {
        let ladder = LevelLadder::default();
        assert_eq!(ladder.level(1.0), 1);
        assert_eq!(ladder.level(0.0), 7);
        assert_eq!(ladder.level(0.95), 1);
    }

    #[test]
    fn rejects_invalid_ladders() {
        assert_eq!(LevelLadder::new(vec![]), Err(LadderError::TooFewLevels(1)));
        assert!(matches!(
            LevelLadder::new(vec![0.9, 0.9]),
            Err(LadderError::NotDecreasing { index: 1 })
        ));
        assert!(matches!(
            LevelLadder::new(vec![1.0]),
            Err(LadderError::OutOfRange { .. })
        ));
        assert_eq!(
            LevelLadder::equal_width(1, 0.5),
            Err(LadderError::TooFewLevels(1))
        );
        assert!(serde_json::from_str::<LevelLadder>("[0.5, 0.6]").is_err());
    }

    #[test]
    fn equal_width_bands() {
        let l = LevelLadder::equal_width(2, 0.7).unwrap();
        assert_eq!(l.thresholds(), &[0.85]);
        let l = LevelLadder::equal_width(5, 0.5).unwrap();
        assert_eq!(l.num_levels(), 5);
        assert_eq!(l.level(0.95), 1);
        assert_eq!(l.level(0.5), 5);
    }

    proptest! {
        #[test]
        fn level_is_monotone(
            raw in proptest::collection::btree_set(1u32..999, 1..9),
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
        ) {
            let thresholds: Vec<f64> = raw.iter().rev().map(|&t| t as f64 / 1000.0).collect();
            let ladder = LevelLadder::new(thresholds).unwrap();
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            prop_assert!(ladder.level(hi) <= ladder.level(lo));
            prop_assert!((1..=ladder.num_levels()).contains(&ladder.level(lo)));
            prop_assert_eq!(ladder.level(1.0), 1);
        }
    }
}
