use serde::{Deserialize, Serialize};

use super::{
    count_objects, make_caption, normalize_bbox, Color, DataError, PixelBox, SceneObject,
    SceneRecord, ShapeClass,
};
use crate::numcore::SeededRng;

pub const BACKGROUND: [u8; 3] = [255, 255, 255];

/// Row-major RGB8 image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = std::iter::repeat_n(rgb, width * height).flatten().collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// One object to draw inside a `width × height` placement box. Without a
/// position the box is placed uniformly at random.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: ShapeClass,
    pub color: Color,
    pub width: usize,
    pub height: usize,
    pub position: Option<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Largest IoU allowed between any two placement boxes.
    pub iou_cap: f64,
    pub max_retries: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            iou_cap: 0.3,
            max_retries: 100,
        }
    }
}

/// Whether the centre of pixel `(px, py)` (relative to the placement box)
/// lies inside the shape.
fn covers(class: ShapeClass, w: usize, h: usize, px: usize, py: usize) -> bool {
    let (w, h) = (w as f64, h as f64);
    let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
    match class {
        ShapeClass::Square => true,
        ShapeClass::Circle => {
            let (rx, ry) = (w / 2.0, h / 2.0);
            ((cx - rx) / rx).powi(2) + ((cy - ry) / ry).powi(2) <= 1.0
        }
        ShapeClass::Triangle => (cx - w / 2.0).abs() <= (w / 2.0) * (cy / h),
    }
}

/// Draws the shape and returns its tight pixel bounding box.
fn draw(img: &mut Raster, spec: &ObjectSpec, x0: usize, y0: usize) -> Option<PixelBox> {
    let mut tight: Option<PixelBox> = None;
    for py in 0..spec.height {
        for px in 0..spec.width {
            if !covers(spec.class, spec.width, spec.height, px, py) {
                continue;
            }
            let (x, y) = (x0 + px, y0 + py);
            img.set(x, y, spec.color.rgb());
            tight = Some(match tight {
                None => PixelBox::new(x, y, x + 1, y + 1),
                Some(b) => {
                    PixelBox::new(b.x1.min(x), b.y1.min(y), b.x2.max(x + 1), b.y2.max(y + 1))
                }
            });
        }
    }
    tight
}

pub fn render_scene(
    specs: &[ObjectSpec],
    width: usize,
    height: usize,
    seed: u64,
) -> Result<SceneRecord, DataError> {
    render_scene_with(specs, width, height, seed, &RenderConfig::default())
}

/// Rasterizes `specs` in order onto a blank canvas. Later objects paint over
/// earlier ones; each object's box is the tight box of its own shape.
pub fn render_scene_with(
    specs: &[ObjectSpec],
    width: usize,
    height: usize,
    seed: u64,
    cfg: &RenderConfig,
) -> Result<SceneRecord, DataError> {
    if width == 0 || height == 0 {
        return Err(DataError::DoesNotFit(format!(
            "empty canvas {width}×{height}"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut img = Raster::filled(width, height, BACKGROUND);
    let mut placed: Vec<PixelBox> = Vec::new();
    let mut objects = Vec::with_capacity(specs.len());
    for (index, spec) in specs.iter().enumerate() {
        if spec.width == 0 || spec.height == 0 || spec.width > width || spec.height > height {
            return Err(DataError::DoesNotFit(format!(
                "object {index} of size {}×{} on a {width}×{height} canvas",
                spec.width, spec.height
            )));
        }
        let crowded = |b: &PixelBox| placed.iter().any(|p| p.iou(b) > cfg.iou_cap);
        let (x0, y0) = match spec.position {
            Some((x, y)) => {
                if x + spec.width > width || y + spec.height > height {
                    return Err(DataError::DoesNotFit(format!(
                        "object {index} at ({x},{y}) leaves the canvas"
                    )));
                }
                if crowded(&PixelBox::new(x, y, x + spec.width, y + spec.height)) {
                    return Err(DataError::TooCrowded { index, retries: 0 });
                }
                (x, y)
            }
            None => {
                let mut found = None;
                for _ in 0..cfg.max_retries {
                    let x = rng.between(0, width - spec.width);
                    let y = rng.between(0, height - spec.height);
                    if !crowded(&PixelBox::new(x, y, x + spec.width, y + spec.height)) {
                        found = Some((x, y));
                        break;
                    }
                }
                found.ok_or(DataError::TooCrowded {
                    index,
                    retries: cfg.max_retries,
                })?
            }
        };
        placed.push(PixelBox::new(x0, y0, x0 + spec.width, y0 + spec.height));
        let pixel_bbox = draw(&mut img, spec, x0, y0).ok_or_else(|| {
            DataError::DoesNotFit(format!("object {index} covers no pixel centre"))
        })?;
        let norm_bbox = normalize_bbox(pixel_bbox, width, height)?;
        objects.push(SceneObject {
            class: spec.class,
            color: spec.color,
            pixel_bbox,
            norm_bbox,
        });
    }
    let count_targets = count_objects(&objects);
    let caption = make_caption(&count_targets);
    Ok(SceneRecord {
        image: img,
        objects,
        caption,
        count_targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x: usize, y: usize, w: usize, h: usize) -> ObjectSpec {
        ObjectSpec {
            class: ShapeClass::Square,
            color: Color::Red,
            width: w,
            height: h,
            position: Some((x, y)),
        }
    }

    #[test]
    fn empty_scene() {
        let r = render_scene(&[], 16, 16, 0).unwrap();
        assert!(r.objects.is_empty());
        assert_eq!(r.caption, "an empty image");
        assert!(r.image.data.chunks(3).all(|p| p == BACKGROUND));
    }

    #[test]
    fn rectangle_box_is_exact() {
        let r = render_scene(&[rect(10, 10, 20, 20)], 64, 64, 0).unwrap();
        assert_eq!(r.objects[0].pixel_bbox, PixelBox::new(10, 10, 30, 30));
        assert_eq!(r.image.pixel(10, 10), Color::Red.rgb());
        assert_eq!(r.image.pixel(30, 30), BACKGROUND);
        r.validate().unwrap();
    }

    #[test]
    fn round_shapes_have_tight_boxes() {
        for class in [ShapeClass::Circle, ShapeClass::Triangle] {
            let spec = ObjectSpec {
                class,
                color: Color::Blue,
                width: 11,
                height: 9,
                position: Some((3, 4)),
            };
            let r = render_scene(&[spec], 32, 32, 0).unwrap();
            let b = r.objects[0].pixel_bbox;
            let painted = |x: usize, y: usize| r.image.pixel(x, y) == Color::Blue.rgb();
            assert!((b.x1..b.x2).any(|x| painted(x, b.y1)));
            assert!((b.x1..b.x2).any(|x| painted(x, b.y2 - 1)));
            assert!((b.y1..b.y2).any(|y| painted(b.x1, y)));
            assert!((b.y1..b.y2).any(|y| painted(b.x2 - 1, y)));
            let outside = (0..32)
                .flat_map(|y| (0..32).map(move |x| (x, y)))
                .filter(|&(x, y)| !(b.x1..b.x2).contains(&x) || !(b.y1..b.y2).contains(&y));
            assert!(outside.into_iter().all(|(x, y)| !painted(x, y)));
        }
    }

    #[test]
    fn random_placement_is_deterministic() {
        let specs: Vec<ObjectSpec> = (0..5)
            .map(|i| ObjectSpec {
                class: ShapeClass::ALL[i % 3],
                color: Color::ALL[i % 3],
                width: 10,
                height: 10,
                position: None,
            })
            .collect();
        let a = render_scene(&specs, 64, 64, 9).unwrap();
        let b = render_scene(&specs, 64, 64, 9).unwrap();
        assert_eq!(a, b);
        for (i, p) in a.objects.iter().enumerate() {
            for q in &a.objects[..i] {
                assert!(p.pixel_bbox.iou(&q.pixel_bbox) <= 0.3 + 1e-12);
            }
        }
    }

    #[test]
    fn fitting_and_crowding_errors() {
        assert!(matches!(
            render_scene(&[rect(0, 0, 65, 5)], 64, 64, 0),
            Err(DataError::DoesNotFit(_))
        ));
        assert!(matches!(
            render_scene(&[rect(60, 0, 5, 5)], 64, 64, 0),
            Err(DataError::DoesNotFit(_))
        ));
        let full = ObjectSpec {
            position: None,
            ..rect(0, 0, 16, 16)
        };
        assert!(matches!(
            render_scene(&[full, full], 16, 16, 0),
            Err(DataError::TooCrowded { index: 1, .. })
        ));
    }
}
