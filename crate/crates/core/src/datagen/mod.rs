//! Synthetic shape scenes with captions, grounding boxes on a `[0, 1000]`
//! integer grid, and counting datasets balanced across count buckets and
//! shape classes.

mod bbox;
mod caption;
mod counting;
mod io;
mod render;

pub use bbox::{denormalize_bbox, normalize_bbox, BBox, PixelBox, NORM_SCALE};
pub use caption::{make_caption, parse_caption, EMPTY_CAPTION};
pub use counting::{sample_counting_dataset, CountBucket, CountingConfig};
pub use io::{read_dataset, read_ppm, write_dataset, write_ppm, DATASET_FILE};
pub use render::{render_scene, ObjectSpec, Raster, RenderConfig, BACKGROUND};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{ImageBatch, ModelError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DataError {
    #[error("inverted box {0:?}")]
    InvertedBox(PixelBox),
    #[error("box {bbox:?} lies outside a {width}×{height} image")]
    OutOfImage {
        bbox: PixelBox,
        width: usize,
        height: usize,
    },
    #[error("object does not fit: {0}")]
    DoesNotFit(String),
    #[error("could not place object {index} under the IoU cap after {retries} attempts")]
    TooCrowded { index: usize, retries: usize },
    #[error("cannot balance {n} samples over {cells} cells")]
    InfeasibleBalance { n: usize, cells: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    /// Axis-aligned rectangle of any aspect ratio.
    Square,
    /// Ellipse inscribed in the placement box.
    Circle,
    /// Isosceles triangle with its apex at the top centre.
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Square, ShapeClass::Circle, ShapeClass::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Square => "square",
            ShapeClass::Circle => "circle",
            ShapeClass::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ShapeClass::Square => "squares",
            ShapeClass::Circle => "circles",
            ShapeClass::Triangle => "triangles",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 80, 220],
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: ShapeClass,
    pub color: Color,
    pub pixel_bbox: PixelBox,
    pub norm_bbox: BBox,
}

pub type CountTargets = BTreeMap<(ShapeClass, Color), usize>;

pub fn count_objects(objects: &[SceneObject]) -> CountTargets {
    let mut counts = CountTargets::new();
    for o in objects {
        *counts.entry((o.class, o.color)).or_default() += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub image: Raster,
    pub objects: Vec<SceneObject>,
    pub caption: String,
    pub count_targets: CountTargets,
}

impl SceneRecord {
    pub fn image_batch(&self) -> Result<ImageBatch, DataError> {
        Ok(ImageBatch::from_rgb8(
            self.image.width,
            self.image.height,
            &self.image.data,
        )?)
    }

    /// Checks box normalization and count consistency.
    pub fn validate(&self) -> Result<(), DataError> {
        for o in &self.objects {
            let want = normalize_bbox(o.pixel_bbox, self.image.width, self.image.height)?;
            if want != o.norm_bbox {
                return Err(DataError::Format(format!(
                    "normalized box {:?} does not match pixel box {:?}",
                    o.norm_bbox, o.pixel_bbox
                )));
            }
        }
        if count_objects(&self.objects) != self.count_targets {
            return Err(DataError::Format(
                "count targets disagree with objects".into(),
            ));
        }
        Ok(())
    }
}
