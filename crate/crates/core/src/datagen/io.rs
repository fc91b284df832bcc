//! Binary PPM (P6) images and JSON-lines dataset files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    count_objects, BBox, Color, DataError, PixelBox, Raster, SceneObject, SceneRecord, ShapeClass,
};

pub const DATASET_FILE: &str = "dataset.jsonl";
const IMAGE_DIR: &str = "images";

pub fn write_ppm(path: &Path, img: &Raster) -> Result<(), DataError> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.data);
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a P6 file with maxval 255. Comments in the header are accepted.
pub fn read_ppm(path: &Path) -> Result<Raster, DataError> {
    let bytes = fs::read(path)?;
    let bad = |what: &str| DataError::Format(format!("{}: {what}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("non-ASCII header"))?
                .to_string(),
        );
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let need = width * height * 3;
    if width == 0 || height == 0 || bytes.len() < pos || bytes.len() - pos != need {
        return Err(bad("raster size does not match header"));
    }
    Ok(Raster {
        width,
        height,
        data: bytes[pos..].to_vec(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectLine {
    class: ShapeClass,
    color: Color,
    bbox: BBox,
    pixel_bbox: [usize; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CountLine {
    class: ShapeClass,
    color: Color,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    image: String,
    objects: Vec<ObjectLine>,
    caption: String,
    counts: Vec<CountLine>,
}

/// Writes `dir/dataset.jsonl` plus one PPM per record under `dir/images/`.
/// Returns the JSONL path.
pub fn write_dataset(dir: &Path, records: &[SceneRecord]) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let path = dir.join(DATASET_FILE);
    let mut out = BufWriter::new(fs::File::create(&path)?);
    for (i, r) in records.iter().enumerate() {
        let rel = format!("{IMAGE_DIR}/{i:06}.ppm");
        write_ppm(&dir.join(&rel), &r.image)?;
        let line = RecordLine {
            image: rel,
            objects: r
                .objects
                .iter()
                .map(|o| ObjectLine {
                    class: o.class,
                    color: o.color,
                    bbox: o.norm_bbox,
                    pixel_bbox: [
                        o.pixel_bbox.x1,
                        o.pixel_bbox.y1,
                        o.pixel_bbox.x2,
                        o.pixel_bbox.y2,
                    ],
                })
                .collect(),
            caption: r.caption.clone(),
            counts: r
                .count_targets
                .iter()
                .map(|(&(class, color), &count)| CountLine {
                    class,
                    color,
                    count,
                })
                .collect(),
        };
        let json = serde_json::to_string(&line).map_err(|e| DataError::Format(e.to_string()))?;
        writeln!(out, "{json}")?;
    }
    out.flush()?;
    Ok(path)
}

/// Reads a dataset written by [`write_dataset`]; image paths are resolved
/// relative to the JSONL file. An empty file is a format error.
pub fn read_dataset(path: &Path) -> Result<Vec<SceneRecord>, DataError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: String| DataError::Format(format!("{}:{}: {e}", path.display(), n + 1));
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let image = read_ppm(&base.join(&rec.image))?;
        let objects = rec
            .objects
            .iter()
            .map(|o| {
                let [x1, y1, x2, y2] = o.pixel_bbox;
                SceneObject {
                    class: o.class,
                    color: o.color,
                    pixel_bbox: PixelBox::new(x1, y1, x2, y2),
                    norm_bbox: o.bbox,
                }
            })
            .collect::<Vec<_>>();
        let count_targets = rec
            .counts
            .iter()
            .map(|c| ((c.class, c.color), c.count))
            .collect();
        let record = SceneRecord {
            image,
            objects,
            caption: rec.caption,
            count_targets,
        };
        record.validate().map_err(|e| at(e.to_string()))?;
        if count_objects(&record.objects) != record.count_targets {
            return Err(at("counts disagree with objects".into()));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(DataError::Format(format!(
            "{}: dataset is empty",
            path.display()
        )));
    }
    Ok(records)
}
