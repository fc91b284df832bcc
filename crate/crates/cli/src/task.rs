//! How scene records become token sequences, plus the caption reward and
//! candidate construction used by the preference objectives.

use exms_core::datagen::{make_caption, parse_caption, BBox, Color, CountTargets, SceneRecord, ShapeClass, EMPTY_CAPTION};
use exms_core::model::{encode, ImageBatch, ModelConfig, TokenSeq, TrainExample, BOS, EOS};
use exms_core::numcore::SeededRng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Target text produced for an image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFormat {
    /// Counting caption, e.g. `2 red circles and 1 blue circle`.
    #[default]
    Caption,
    /// One `color class [x1,y1,x2,y2]` phrase per object on the normalized
    /// grid.
    Grounding,
}

pub fn target_text(rec: &SceneRecord, fmt: TaskFormat) -> String {
    match fmt {
        TaskFormat::Caption => rec.caption.clone(),
        TaskFormat::Grounding => {
            let mut objs: Vec<_> = rec.objects.iter().map(|o| (o.class, o.color, o.norm_bbox.coords())).collect();
            objs.sort();
            if objs.is_empty() {
                return EMPTY_CAPTION.to_string();
            }
            objs.iter()
                .map(|(class, color, [x1, y1, x2, y2])| format!("{color} {class} [{x1},{y1},{x2},{y2}]"))
                .collect::<Vec<_>>()
                .join(" and ")
        }
    }
}

/// Parses grounding output into `(class, color, box)` triples, skipping
/// malformed phrases.
pub fn parse_grounding(text: &str) -> Vec<(ShapeClass, Color, BBox)> {
    text.split(" and ")
        .filter_map(|phrase| {
            let (head, rest) = phrase.split_once(" [")?;
            let (color, class) = head.split_once(' ')?;
            let color = Color::ALL.into_iter().find(|c| c.name() == color)?;
            let class = ShapeClass::ALL.into_iter().find(|c| c.name() == class)?;
            let inner = rest.strip_suffix(']')?;
            let v: Vec<usize> = inner.split(',').map(|s| s.parse().ok()).collect::<Option<_>>()?;
            let [x1, y1, x2, y2] = v[..] else {
                return None;
            };
            Some((class, color, BBox::new(x1, y1, x2, y2).ok()?))
        })
        .collect()
}

/// Counts implied by generated text in either format; `None` when the text
/// does not parse.
pub fn parse_counts(text: &str, fmt: TaskFormat) -> Option<CountTargets> {
    match fmt {
        TaskFormat::Caption => parse_caption(text).ok(),
        TaskFormat::Grounding => {
            if text == EMPTY_CAPTION {
                return Some(CountTargets::new());
            }
            let objs = parse_grounding(text);
            if objs.len() != text.split(" and ").count() {
                return None;
            }
            let mut counts = CountTargets::new();
            for (class, color, _) in objs {
                *counts.entry((class, color)).or_default() += 1;
            }
            Some(counts)
        }
    }
}

/// `[BOS]` followed by the image's visual slots in row-major merge order.
pub fn image_prompt(cfg: &ModelConfig, width: usize, height: usize) -> TokenSeq {
    let side = cfg.patch_size * cfg.merge_factor;
    let mut seq = TokenSeq::from_ids(&[BOS]).expect("BOS is a text token");
    seq.push_image(height / side, width / side);
    seq
}

/// Appends `response` and EOS to `prompt`; the returned mask marks the
/// appended tokens.
pub fn with_response(prompt: &TokenSeq, response: &str) -> Result<(TokenSeq, Vec<bool>), CliError> {
    let mut seq = prompt.clone();
    let mut mask = vec![false; seq.len()];
    for id in encode(response).into_iter().chain([EOS]) {
        seq.push_text(id)?;
        mask.push(true);
    }
    Ok((seq, mask))
}

pub struct Sample {
    pub image: ImageBatch,
    pub prompt: TokenSeq,
    pub target: String,
    pub counts: CountTargets,
    pub record: SceneRecord,
}

impl Sample {
    pub fn new(rec: &SceneRecord, cfg: &ModelConfig, fmt: TaskFormat) -> Result<Self, CliError> {
        Ok(Self {
            image: rec.image_batch()?,
            prompt: image_prompt(cfg, rec.image.width, rec.image.height),
            target: target_text(rec, fmt),
            counts: rec.count_targets.clone(),
            record: rec.clone(),
        })
    }

    /// Supervised example: loss on the target text and EOS only.
    pub fn train_example(&self) -> Result<TrainExample, CliError> {
        let (seq, loss_mask) = with_response(&self.prompt, &self.target)?;
        Ok(TrainExample { seq, image: Some(self.image.clone()), loss_mask })
    }
}

/// 1 for an exact match, `1 / (1 + L1 count error)` for other parseable
/// text, 0 for text that does not parse.
pub fn count_reward(text: &str, truth: &CountTargets, fmt: TaskFormat) -> f64 {
    let Some(pred) = parse_counts(text, fmt) else {
        return 0.0;
    };
    let mut l1 = 0usize;
    for (k, &n) in truth {
        l1 += n.abs_diff(pred.get(k).copied().unwrap_or(0));
    }
    for (k, &n) in &pred {
        if !truth.contains_key(k) {
            l1 += n;
        }
    }
    1.0 / (1.0 + l1 as f64)
}

/// Applies `edits` random count or colour changes to a caption's counts.
pub fn perturb_counts(truth: &CountTargets, edits: usize, rng: &mut SeededRng) -> CountTargets {
    let mut c = truth.clone();
    for _ in 0..edits {
        let keys: Vec<_> = c.keys().copied().collect();
        if keys.is_empty() {
            let class = ShapeClass::ALL[rng.below(3)];
            let color = Color::ALL[rng.below(3)];
            c.insert((class, color), 1 + rng.below(3));
            continue;
        }
        let key = keys[rng.below(keys.len())];
        match rng.below(3) {
            0 => *c.get_mut(&key).unwrap() += 1,
            1 => {
                let n = c[&key];
                if n > 1 {
                    *c.get_mut(&key).unwrap() -= 1;
                } else {
                    *c.get_mut(&key).unwrap() += 2;
                }
            }
            _ => {
                let n = c.remove(&key).unwrap();
                let color = Color::ALL[(Color::ALL.iter().position(|&x| x == key.1).unwrap() + 1 + rng.below(2)) % 3];
                *c.entry((key.0, color)).or_default() += n;
            }
        }
    }
    c
}

/// A wrong caption differing from the truth, for DPO's rejected response.
pub fn rejected_caption(truth: &CountTargets, rng: &mut SeededRng) -> String {
    loop {
        let c = perturb_counts(truth, 1, rng);
        if &c != truth {
            return make_caption(&c);
        }
    }
}

/// GROUPER candidates: the true caption followed by `g − 1` perturbations
/// with increasing numbers of edits.
pub fn caption_candidates(truth: &CountTargets, g: usize, rng: &mut SeededRng) -> Vec<String> {
    let mut out = vec![make_caption(truth)];
    for k in 1..g {
        out.push(make_caption(&perturb_counts(truth, k, rng)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use exms_core::datagen::{render_scene, ObjectSpec};

    fn scene() -> SceneRecord {
        let spec = |class, color, x| ObjectSpec { class, color, width: 10, height: 12, position: Some((x, 4)) };
        render_scene(
            &[spec(ShapeClass::Circle, Color::Red, 2), spec(ShapeClass::Square, Color::Blue, 30)],
            64,
            64,
            0,
        )
        .unwrap()
    }

    #[test]
    fn grounding_text_round_trips() {
        let rec = scene();
        let text = target_text(&rec, TaskFormat::Grounding);
        assert!(text.starts_with("blue square ["));
        let parsed = parse_grounding(&text);
        assert_eq!(parsed.len(), 2);
        assert_eq!(parse_counts(&text, TaskFormat::Grounding).unwrap(), rec.count_targets);
    }

    #[test]
    fn rewards() {
        let rec = scene();
        assert_eq!(count_reward(&rec.caption, &rec.count_targets, TaskFormat::Caption), 1.0);
        assert_eq!(count_reward("1 blue square", &rec.count_targets, TaskFormat::Caption), 0.5);
        assert_eq!(count_reward("garbage", &rec.count_targets, TaskFormat::Caption), 0.0);
    }

    #[test]
    fn rejected_differs_from_truth() {
        let rec = scene();
        let mut rng = SeededRng::new(1);
        for _ in 0..20 {
            assert_ne!(rejected_caption(&rec.count_targets, &mut rng), rec.caption);
        }
    }
}
