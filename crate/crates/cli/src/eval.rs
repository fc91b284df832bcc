//! Held-out metrics: teacher-forced next-token accuracy plus greedy-decoding
//! caption, counting and grounding scores.

use std::path::Path;

use exms_core::datagen::read_dataset;
use exms_core::model::{argmax, checkpoint, decode, generate, Model, SamplingParams, EOS};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::task::{parse_counts, parse_grounding, Sample, TaskFormat};

/// Fraction of supervised target tokens (including EOS) whose argmax
/// prediction is correct.
pub fn next_token_accuracy(model: &Model, samples: &[Sample]) -> Result<f64, CliError> {
    let (mut hit, mut total) = (0usize, 0usize);
    let v = model.config().vocab_size;
    for s in samples {
        let ex = s.train_example()?;
        let vis = model.visual_embeds(&s.image)?;
        let logits = model.decoder_forward(&ex.seq, Some(&vis))?;
        for t in 1..ex.seq.len() {
            if !ex.loss_mask[t] {
                continue;
            }
            let row = &logits.data()[(t - 1) * v..t * v];
            hit += usize::from(argmax(row) == ex.seq.ids()[t] as usize);
            total += 1;
        }
    }
    if total == 0 {
        return Err(CliError::Format("no supervised tokens to evaluate".into()));
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub next_token_accuracy: f64,
    /// Greedy output equals the target text.
    pub caption_exact_match: f64,
    /// Total object count in the greedy output equals the true total.
    pub counting_accuracy: f64,
    /// Fraction of ground-truth objects matched by a generated box of the
    /// same class and colour with IoU ≥ 0.5. Grounding format only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grounding_iou50: Option<f64>,
}

pub fn greedy_text(model: &Model, s: &Sample, max_tokens: usize) -> Result<String, CliError> {
    let mut ids = generate(model, &s.prompt, Some(&s.image), &SamplingParams::greedy(max_tokens))?;
    if ids.last() == Some(&EOS) {
        ids.pop();
    }
    Ok(decode(&ids))
}

pub fn evaluate(model: &Model, samples: &[Sample], fmt: TaskFormat) -> Result<EvalReport, CliError> {
    if samples.is_empty() {
        return Err(CliError::Format("dataset is empty".into()));
    }
    let next_token_accuracy = next_token_accuracy(model, samples)?;
    let (mut exact, mut counted, mut matched, mut objects) = (0usize, 0usize, 0usize, 0usize);
    for s in samples {
        let text = greedy_text(model, s, s.target.len() + 8)?;
        exact += usize::from(text == s.target);
        let truth: usize = s.counts.values().sum();
        if let Some(pred) = parse_counts(&text, fmt) {
            counted += usize::from(pred.values().sum::<usize>() == truth);
        }
        if fmt == TaskFormat::Grounding {
            let mut boxes = parse_grounding(&text);
            for o in &s.record.objects {
                objects += 1;
                let hit = boxes
                    .iter()
                    .position(|(c, col, b)| *c == o.class && *col == o.color && b.iou(&o.norm_bbox) >= 0.5);
                if let Some(i) = hit {
                    boxes.swap_remove(i);
                    matched += 1;
                }
            }
        }
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        records: samples.len(),
        next_token_accuracy,
        caption_exact_match: exact as f64 / n,
        counting_accuracy: counted as f64 / n,
        grounding_iou50: (fmt == TaskFormat::Grounding).then(|| matched as f64 / objects.max(1) as f64),
    })
}

pub fn load_samples(model: &Model, dataset: &Path, fmt: TaskFormat) -> Result<Vec<Sample>, CliError> {
    read_dataset(dataset)?.iter().map(|r| Sample::new(r, model.config(), fmt)).collect()
}

pub fn cmd_eval(checkpoint_path: &Path, dataset: &Path, fmt: TaskFormat) -> Result<EvalReport, CliError> {
    let model = checkpoint::load(checkpoint_path)?;
    let samples = load_samples(&model, dataset, fmt)?;
    evaluate(&model, &samples, fmt)
}
