use exms_core::datagen::{
    count_objects, denormalize_bbox, normalize_bbox, parse_caption, render_scene, sample_counting_dataset, BBox, Color,
    CountingConfig, ObjectSpec, PixelBox, ShapeClass,
};
use exms_core::numcore::SeededRng;

use super::Recorder;
use crate::error::CliError;

const SEED: u64 = 0x6461_7461;
const BOXES: usize = 10_000;

fn random_box(rng: &mut SeededRng, w: usize, h: usize) -> PixelBox {
    let x1 = rng.below(w);
    let y1 = rng.below(h);
    PixelBox::new(x1, y1, rng.between(x1 + 1, w), rng.between(y1 + 1, h))
}

fn examples() -> Result<f64, CliError> {
    let checks = [
        (normalize_bbox(PixelBox::new(80, 60, 400, 300), 800, 600)?.coords(), [100, 100, 500, 500]),
        (normalize_bbox(PixelBox::new(0, 0, 37, 91), 37, 91)?.coords(), [0, 0, 1000, 1000]),
    ];
    let px = [
        (denormalize_bbox(BBox::new(0, 0, 1000, 1000)?, 640, 480), PixelBox::new(0, 0, 640, 480)),
        (denormalize_bbox(BBox::new(500, 500, 1000, 1000)?, 200, 100), PixelBox::new(100, 50, 200, 100)),
    ];
    let bad = checks.iter().filter(|(a, b)| a != b).count() + px.iter().filter(|(a, b)| a != b).count();
    Ok(bad as f64)
}

/// Largest excess of `|denormalize(normalize(b)) − b|` over
/// `dim/2000 + 0.5` pixels, per coordinate, across random boxes on random
/// image sizes up to 1024.
fn round_trip(rng: &mut SeededRng) -> Result<f64, CliError> {
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..BOXES {
        let (w, h) = (rng.between(1, 1024), rng.between(1, 1024));
        let b = random_box(rng, w, h);
        let back = denormalize_bbox(normalize_bbox(b, w, h)?, w, h);
        for (orig, got, dim) in [(b.x1, back.x1, w), (b.y1, back.y1, h), (b.x2, back.x2, w), (b.y2, back.y2, h)] {
            let bound = dim as f64 / 2000.0 + 0.5;
            worst = worst.max(orig.abs_diff(got) as f64 - bound);
        }
    }
    Ok(worst.max(0.0))
}

/// Same excess in normalized units for `normalize(denormalize(b))`, bound
/// `500/dim + 0.5`, on boxes whose pixel image stays non-degenerate.
fn inverse_round_trip(rng: &mut SeededRng) -> Result<f64, CliError> {
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..BOXES {
        let (w, h) = (rng.between(1, 1024), rng.between(1, 1024));
        let x1 = rng.below(1000);
        let y1 = rng.below(1000);
        let b = BBox::new(x1, y1, rng.between(x1 + 1, 1000), rng.between(y1 + 1, 1000))?;
        let px = denormalize_bbox(b, w, h);
        if px.x1 >= px.x2 || px.y1 >= px.y2 {
            continue;
        }
        let back = normalize_bbox(px, w, h)?.coords();
        for (k, (orig, got)) in b.coords().into_iter().zip(back).enumerate() {
            let dim = if k % 2 == 0 { w } else { h };
            worst = worst.max(orig.abs_diff(got) as f64 - (500.0 / dim as f64 + 0.5));
        }
    }
    Ok(worst.max(0.0))
}

fn balance_and_records() -> Result<(f64, f64, f64), CliError> {
    let cfg = CountingConfig::new(1000, SEED);
    let records = sample_counting_dataset(&cfg)?;
    let cells = cfg.cells();
    let mut counts = vec![0usize; cells];
    let mut misplaced = 0usize;
    let mut inconsistent = 0usize;
    for rec in &records {
        let n = rec.objects.len();
        let class = rec.objects.first().map(|o| o.class);
        let cell = cfg
            .buckets
            .iter()
            .position(|b| b.contains(n))
            .zip(class.and_then(|c| cfg.classes.iter().position(|&k| k == c)));
        match cell {
            Some((b, c)) if rec.objects.iter().all(|o| Some(o.class) == class) => counts[b * cfg.classes.len() + c] += 1,
            _ => misplaced += 1,
        }
        let parsed = parse_caption(&rec.caption).ok();
        let consistent = parsed.as_ref() == Some(&rec.count_targets)
            && count_objects(&rec.objects) == rec.count_targets
            && rec.objects.iter().all(|o| normalize_bbox(o.pixel_bbox, rec.image.width, rec.image.height).ok() == Some(o.norm_bbox));
        inconsistent += usize::from(!consistent);
    }
    let ideal = cfg.n as f64 / cells as f64;
    let deviation = counts.iter().map(|&c| (c as f64 - ideal).abs()).fold(0.0, f64::max);
    Ok((deviation, misplaced as f64, inconsistent as f64))
}

fn determinism(rng: &mut SeededRng) -> Result<f64, CliError> {
    let mut differing = 0usize;
    for _ in 0..10 {
        let specs: Vec<ObjectSpec> = (0..rng.between(1, 4))
            .map(|_| ObjectSpec {
                class: ShapeClass::ALL[rng.below(3)],
                color: Color::ALL[rng.below(3)],
                width: rng.between(6, 14),
                height: rng.between(6, 14),
                position: None,
            })
            .collect();
        let seed = rng.next_u64();
        let a = render_scene(&specs, 64, 64, seed)?;
        let b = render_scene(&specs, 64, 64, seed)?;
        differing += usize::from(a.image != b.image || a.objects != b.objects);
    }
    Ok(differing as f64)
}

pub(super) fn run() -> Vec<super::CheckOutcome> {
    let mut rec = Recorder::new("data");
    let mut rng = SeededRng::new(SEED);
    rec.record("bbox_examples", 0.0, examples());
    rec.record(format!("bbox_round_trip_pixels ({BOXES} boxes)"), 0.0, round_trip(&mut rng));
    rec.record(format!("bbox_round_trip_normalized ({BOXES} boxes)"), 0.0, inverse_round_trip(&mut rng));
    match balance_and_records() {
        Ok((deviation, misplaced, inconsistent)) => {
            rec.record("counting_balance_default_1000", 1.0, Ok(deviation));
            rec.record("counting_records_match_cell", 0.0, Ok(misplaced));
            rec.record("caption_counts_boxes_consistent", 0.0, Ok(inconsistent));
        }
        Err(e) => {
            let msg = e.to_string();
            rec.record("counting_balance_default_1000", 1.0, Err(e));
            rec.record("counting_records_match_cell", 0.0, Err(CliError::Data(msg.clone())));
            rec.record("caption_counts_boxes_consistent", 0.0, Err(CliError::Data(msg)));
        }
    }
    rec.record("render_determinism", 0.0, determinism(&mut rng));
    rec.finish()
}
