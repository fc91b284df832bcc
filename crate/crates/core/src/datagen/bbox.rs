use serde::{Deserialize, Serialize};

use super::DataError;

/// Normalized coordinates span `0..=NORM_SCALE` on each axis.
pub const NORM_SCALE: usize = 1000;

/// Pixel corners, top-left inclusive and bottom-right exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl PixelBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> usize {
        self.x2.saturating_sub(self.x1) * self.y2.saturating_sub(self.y1)
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let ix = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let iy = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Box on the `[0, 1000]` grid with `x1 < x2` and `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    x1: usize,
    y1: usize,
    x2: usize,
    y2: usize,
}

impl BBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self, DataError> {
        if x1 >= x2 || y1 >= y2 || x2 > NORM_SCALE || y2 > NORM_SCALE {
            return Err(DataError::Format(format!(
                "invalid normalized box [{x1},{y1},{x2},{y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [usize; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let [a, b, c, d] = self.coords();
        let [e, f, g, h] = other.coords();
        PixelBox::new(a, b, c, d).iou(&PixelBox::new(e, f, g, h))
    }
}

impl TryFrom<[usize; 4]> for BBox {
    type Error = DataError;
    fn try_from(c: [usize; 4]) -> Result<Self, DataError> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

/// `round(v · to / from)` with halves rounded away from zero, in exact
/// integer arithmetic.
fn rescale(v: usize, to: usize, from: usize) -> usize {
    (2 * v * to + from) / (2 * from)
}

/// Scales pixel corners onto the `[0, 1000]` grid, x by width and y by
/// height. A box thinner than one grid unit (possible only on sides longer
/// than 1000 px) would collapse; it is widened by one unit on the side whose
/// rounding moved less.
pub fn normalize_bbox(px: PixelBox, width: usize, height: usize) -> Result<BBox, DataError> {
    if px.x1 >= px.x2 || px.y1 >= px.y2 {
        return Err(DataError::InvertedBox(px));
    }
    if px.x2 > width || px.y2 > height {
        return Err(DataError::OutOfImage {
            bbox: px,
            width,
            height,
        });
    }
    let (x1, x2) = normalize_span(px.x1, px.x2, width);
    let (y1, y2) = normalize_span(px.y1, px.y2, height);
    BBox::new(x1, y1, x2, y2)
}

fn normalize_span(lo: usize, hi: usize, dim: usize) -> (usize, usize) {
    let a = rescale(lo, NORM_SCALE, dim).min(NORM_SCALE);
    let b = rescale(hi, NORM_SCALE, dim).min(NORM_SCALE);
    if a < b {
        return (a, b);
    }
    // Error (in units of 1/(2·dim)) introduced by moving each side outward.
    let exact = |v: usize| 2 * v * NORM_SCALE;
    let cost_lo = if a > 0 {
        exact(lo).abs_diff(2 * (a - 1) * dim)
    } else {
        usize::MAX
    };
    let cost_hi = if b < NORM_SCALE {
        exact(hi).abs_diff(2 * (b + 1) * dim)
    } else {
        usize::MAX
    };
    if cost_hi <= cost_lo {
        (a, b + 1)
    } else {
        (a - 1, b)
    }
}

/// Maps a normalized box back to pixel corners, rounding to the nearest
/// pixel.
pub fn denormalize_bbox(b: BBox, width: usize, height: usize) -> PixelBox {
    let [x1, y1, x2, y2] = b.coords();
    PixelBox::new(
        rescale(x1, width, NORM_SCALE),
        rescale(y1, height, NORM_SCALE),
        rescale(x2, width, NORM_SCALE),
        rescale(y2, height, NORM_SCALE),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let b = normalize_bbox(PixelBox::new(80, 60, 400, 300), 800, 600).unwrap();
        assert_eq!(b.coords(), [100, 100, 500, 500]);
        let b = normalize_bbox(PixelBox::new(0, 0, 37, 91), 37, 91).unwrap();
        assert_eq!(b.coords(), [0, 0, 1000, 1000]);
        assert_eq!(
            denormalize_bbox(BBox::new(0, 0, 1000, 1000).unwrap(), 640, 480),
            PixelBox::new(0, 0, 640, 480)
        );
        assert_eq!(
            denormalize_bbox(BBox::new(500, 500, 1000, 1000).unwrap(), 200, 100),
            PixelBox::new(100, 50, 200, 100)
        );
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        // 1/8 of 1000 is 125 exactly, 1/16 is 62.5 → 63.
        assert_eq!(rescale(1, 1000, 16), 63);
        assert_eq!(rescale(1, 1000, 8), 125);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            normalize_bbox(PixelBox::new(5, 0, 5, 3), 10, 10),
            Err(DataError::InvertedBox(_))
        ));
        assert!(matches!(
            normalize_bbox(PixelBox::new(0, 0, 11, 3), 10, 10),
            Err(DataError::OutOfImage { .. })
        ));
        assert!(BBox::new(3, 3, 3, 4).is_err());
    }

    #[test]
    fn thin_box_on_wide_image_stays_valid() {
        for x in 0..1024 {
            let b = normalize_bbox(PixelBox::new(x, 0, x + 1, 1), 1025, 1).unwrap();
            let [x1, _, x2, _] = b.coords();
            assert!(x1 < x2);
        }
    }
}
