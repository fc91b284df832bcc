use serde::{Deserialize, Serialize};

use super::render::{render_scene_with, RenderConfig};
use super::{Color, DataError, ObjectSpec, SceneRecord, ShapeClass};
use crate::numcore::SeededRng;

/// Inclusive range of object counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountBucket {
    pub min: usize,
    pub max: usize,
}

impl CountBucket {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, n: usize) -> bool {
        (self.min..=self.max).contains(&n)
    }
}

fn default_buckets() -> Vec<CountBucket> {
    vec![
        CountBucket::new(1, 3),
        CountBucket::new(4, 6),
        CountBucket::new(7, 10),
    ]
}
fn default_classes() -> Vec<ShapeClass> {
    ShapeClass::ALL.to_vec()
}
fn default_colors() -> Vec<Color> {
    Color::ALL.to_vec()
}
fn default_side() -> usize {
    64
}
fn default_min_size() -> usize {
    7
}
fn default_max_size() -> usize {
    12
}
fn default_scene_attempts() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountingConfig {
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_buckets")]
    pub buckets: Vec<CountBucket>,
    #[serde(default = "default_classes")]
    pub classes: Vec<ShapeClass>,
    #[serde(default = "default_colors")]
    pub colors: Vec<Color>,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    /// Placement-box side range in pixels.
    #[serde(default = "default_min_size")]
    pub min_size: usize,
    #[serde(default = "default_max_size")]
    pub max_size: usize,
    #[serde(default)]
    pub render: RenderConfig,
    /// Fresh placement attempts per record before giving up on crowding.
    #[serde(default = "default_scene_attempts")]
    pub scene_attempts: usize,
}

impl CountingConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            buckets: default_buckets(),
            classes: default_classes(),
            colors: default_colors(),
            width: default_side(),
            height: default_side(),
            min_size: default_min_size(),
            max_size: default_max_size(),
            render: RenderConfig::default(),
            scene_attempts: default_scene_attempts(),
        }
    }

    pub fn cells(&self) -> usize {
        self.buckets.len() * self.classes.len()
    }

    /// `(bucket, class)` cell of record `i`. Cells are dealt round-robin, so
    /// every cell receives ⌊n/cells⌋ or ⌈n/cells⌉ records.
    pub fn cell_of(&self, i: usize) -> (usize, usize) {
        let c = i % self.cells();
        (c / self.classes.len(), c % self.classes.len())
    }

    fn validate(&self) -> Result<(), DataError> {
        let cells = self.cells();
        if cells == 0 || self.n < cells {
            return Err(DataError::InfeasibleBalance { n: self.n, cells });
        }
        if self.colors.is_empty() {
            return Err(DataError::Format("no colours configured".into()));
        }
        if let Some(b) = self.buckets.iter().find(|b| b.min == 0 || b.min > b.max) {
            return Err(DataError::Format(format!(
                "invalid count bucket {}..={}",
                b.min, b.max
            )));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(DataError::Format("invalid object size range".into()));
        }
        if self.max_size > self.width.min(self.height) {
            return Err(DataError::DoesNotFit(format!(
                "objects up to {} px on a {}×{} canvas",
                self.max_size, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Stratified counting dataset. Record `i` draws its exact count uniformly
/// from its bucket and is rendered from a seed derived from `(seed, i)`, so
/// records are independent of generation order.
pub fn sample_counting_dataset(cfg: &CountingConfig) -> Result<Vec<SceneRecord>, DataError> {
    cfg.validate()?;
    (0..cfg.n).map(|i| sample_record(cfg, i)).collect()
}

fn sample_record(cfg: &CountingConfig, i: usize) -> Result<SceneRecord, DataError> {
    let (b, c) = cfg.cell_of(i);
    let bucket = cfg.buckets[b];
    let class = cfg.classes[c];
    let mut rng = SeededRng::derive(cfg.seed, i as u64);
    let count = rng.between(bucket.min, bucket.max);
    let mut last_err = None;
    for _ in 0..cfg.scene_attempts.max(1) {
        let specs: Vec<ObjectSpec> = (0..count)
            .map(|_| ObjectSpec {
                class,
                color: cfg.colors[rng.below(cfg.colors.len())],
                width: rng.between(cfg.min_size, cfg.max_size),
                height: rng.between(cfg.min_size, cfg.max_size),
                position: None,
            })
            .collect();
        match render_scene_with(&specs, cfg.width, cfg.height, rng.next_u64(), &cfg.render) {
            Ok(r) => return Ok(r),
            Err(e @ DataError::TooCrowded { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}
