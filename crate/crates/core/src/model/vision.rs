//! Images, patch extraction and spatial merge ordering.

use super::{ModelConfig, ModelError};
use crate::numcore::Tensor;

/// An RGB image as `[H × W × 3]` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pixels: Tensor,
}

impl ImageBatch {
    pub fn new(pixels: Tensor) -> Result<Self, ModelError> {
        if pixels.ndim() != 3 || pixels.shape()[2] != 3 {
            return Err(ModelError::ShapeMismatch(format!(
                "image tensor {:?} is not H×W×3",
                pixels.shape()
            )));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ModelError::ShapeMismatch(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { pixels })
    }

    /// Interleaved 8-bit RGB, scaled by 1/255.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self, ModelError> {
        if rgb.len() != width * height * 3 {
            return Err(ModelError::ShapeMismatch(format!(
                "{} bytes for a {width}×{height} RGB image",
                rgb.len()
            )));
        }
        let data = rgb.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(Tensor::new(vec![height, width, 3], data)?)
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }
}

/// Flattened patches `[N × patch²·3]` in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub data: Tensor,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub patch_size: usize,
}

impl Patches {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Reorders patches (with their coordinates) by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let width = self.data.last_dim();
        let mut data = Vec::with_capacity(self.data.numel());
        for &i in order {
            data.extend_from_slice(&self.data.data()[i * width..(i + 1) * width]);
        }
        Self {
            data: Tensor::new(vec![order.len(), width], data).expect("same size"),
            rows: order.iter().map(|&i| self.rows[i]).collect(),
            cols: order.iter().map(|&i| self.cols[i]).collect(),
            patch_size: self.patch_size,
        }
    }
}

pub fn patchify(img: &ImageBatch, cfg: &ModelConfig) -> Result<Patches, ModelError> {
    let (h, w, p) = (img.height(), img.width(), cfg.patch_size);
    if h > cfg.max_image_side || w > cfg.max_image_side {
        return Err(ModelError::ImageTooLarge {
            height: h,
            width: w,
            max: cfg.max_image_side,
        });
    }
    if h % p != 0 || w % p != 0 {
        return Err(ModelError::IndivisibleImage {
            height: h,
            width: w,
            patch: p,
        });
    }
    let (gr, gc) = (h / p, w / p);
    let px = img.pixels().data();
    let mut data = Vec::with_capacity(h * w * 3);
    let mut rows = Vec::with_capacity(gr * gc);
    let mut cols = Vec::with_capacity(gr * gc);
    for r in 0..gr {
        for c in 0..gc {
            for y in 0..p {
                let start = ((r * p + y) * w + c * p) * 3;
                data.extend_from_slice(&px[start..start + p * 3]);
            }
            rows.push(r);
            cols.push(c);
        }
    }
    Ok(Patches {
        data: Tensor::new(vec![gr * gc, p * p * 3], data)?,
        rows,
        cols,
        patch_size: p,
    })
}

/// Inverse of [`patchify`] for patches in any order.
pub fn unpatchify(
    patches: &Patches,
    height: usize,
    width: usize,
) -> Result<ImageBatch, ModelError> {
    let p = patches.patch_size;
    let mut px = vec![0.0; height * width * 3];
    for (n, (&r, &c)) in patches.rows.iter().zip(&patches.cols).enumerate() {
        let patch = &patches.data.data()[n * p * p * 3..(n + 1) * p * p * 3];
        for y in 0..p {
            let start = ((r * p + y) * width + c * p) * 3;
            px[start..start + p * 3].copy_from_slice(&patch[y * p * 3..(y + 1) * p * 3]);
        }
    }
    ImageBatch::new(Tensor::new(vec![height, width, 3], px)?)
}

/// Spatial merge layout: `order` lists patch indices so that consecutive runs
/// of `factor²` entries form one neighbourhood, neighbourhoods in row-major
/// order over the merged grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergePlan {
    pub order: Vec<usize>,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl MergePlan {
    pub fn tokens(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

pub fn merge_plan(rows: &[usize], cols: &[usize], factor: usize) -> Result<MergePlan, ModelError> {
    let n = rows.len();
    if n == 0 || cols.len() != n {
        return Err(ModelError::ShapeMismatch(format!(
            "{n} rows for {} cols",
            cols.len()
        )));
    }
    let gr = rows.iter().max().unwrap() + 1;
    let gc = cols.iter().max().unwrap() + 1;
    if gr * gc != n {
        return Err(ModelError::IndivisibleGrid(format!(
            "{n} patches do not tile a {gr}×{gc} grid"
        )));
    }
    if gr % factor != 0 || gc % factor != 0 {
        return Err(ModelError::IndivisibleGrid(format!(
            "{gr}×{gc} grid with merge factor {factor}"
        )));
    }
    let mut at = vec![usize::MAX; n];
    for (i, (&r, &c)) in rows.iter().zip(cols).enumerate() {
        let slot = &mut at[r * gc + c];
        if *slot != usize::MAX {
            return Err(ModelError::IndivisibleGrid(format!(
                "duplicate patch coordinate ({r}, {c})"
            )));
        }
        *slot = i;
    }
    let (mr, mc) = (gr / factor, gc / factor);
    let mut order = Vec::with_capacity(n);
    for r in 0..mr {
        for c in 0..mc {
            for dr in 0..factor {
                for dc in 0..factor {
                    order.push(at[(r * factor + dr) * gc + c * factor + dc]);
                }
            }
        }
    }
    Ok(MergePlan {
        order,
        grid_rows: mr,
        grid_cols: mc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;

    fn cfg(patch: usize) -> ModelConfig {
        ModelConfig {
            patch_size: patch,
            ..ModelConfig::toy()
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageBatch {
        let mut rng = SeededRng::new(seed);
        ImageBatch::new(rng.uniform_tensor(&[h, w, 3], 0.0, 1.0)).unwrap()
    }

    #[test]
    fn single_patch() {
        let p = patchify(&random_image(16, 16, 1), &cfg(16)).unwrap();
        assert_eq!(
            (p.len(), p.rows.clone(), p.cols.clone()),
            (1, vec![0], vec![0])
        );
    }

    #[test]
    fn tall_image_orders_rows() {
        let p = patchify(&random_image(32, 16, 1), &cfg(16)).unwrap();
        assert_eq!(p.rows, vec![0, 1]);
        assert_eq!(p.cols, vec![0, 0]);
    }

    #[test]
    fn round_trip_and_permutation() {
        let img = random_image(8, 12, 2);
        let p = patchify(&img, &cfg(4)).unwrap();
        assert_eq!(unpatchify(&p, 8, 12).unwrap(), img);
        let shuffled = p.permuted(&[5, 3, 1, 0, 2, 4]);
        assert_eq!(unpatchify(&shuffled, 8, 12).unwrap(), img);
    }

    #[test]
    fn indivisible_and_oversized_images() {
        assert!(matches!(
            patchify(&random_image(10, 8, 0), &cfg(4)),
            Err(ModelError::IndivisibleImage { .. })
        ));
        assert!(matches!(
            patchify(&random_image(128, 8, 0), &cfg(4)),
            Err(ModelError::ImageTooLarge { .. })
        ));
    }

    #[test]
    fn merge_plan_groups_neighbourhoods() {
        // 4×4 grid in row-major order
        let rows: Vec<usize> = (0..16).map(|i| i / 4).collect();
        let cols: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let plan = merge_plan(&rows, &cols, 2).unwrap();
        assert_eq!(plan.tokens(), 4);
        assert_eq!(&plan.order[..8], &[0, 1, 4, 5, 2, 3, 6, 7]);
        assert!(merge_plan(&rows[..12], &cols[..12], 2).is_err());
        let n64: Vec<usize> = (0..64).collect();
        let plan = merge_plan(
            &n64.iter().map(|i| i / 8).collect::<Vec<_>>(),
            &n64.iter().map(|i| i % 8).collect::<Vec<_>>(),
            2,
        )
        .unwrap();
        assert_eq!(plan.tokens(), 16);
    }
}
