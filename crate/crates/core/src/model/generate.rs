//! Autoregressive sampling with temperature, nucleus (top-p) filtering and a
//! presence penalty. The MTP head never takes part.

use super::tokens::{TokenId, TokenSeq, BOS, EOS, IMAGE_SLOT, PAD};
use super::vision::ImageBatch;
use super::{Model, ModelError};
use crate::numcore::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingParams {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
    /// Subtracted from the raw logit of every token already generated.
    pub presence_penalty: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            presence_penalty: 0.0,
            max_tokens: 64,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::InvalidSamplingParams(format!(
                "temperature {} < 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ModelError::InvalidSamplingParams(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if !self.presence_penalty.is_finite() {
            return Err(ModelError::InvalidSamplingParams(
                "presence_penalty must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Lowest index among the maximal entries.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Probabilities after temperature scaling and top-p truncation: the kept set
/// is the shortest prefix of tokens sorted by descending probability (ties by
/// lower id) whose mass reaches `top_p`.
pub fn nucleus_probs(logits: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    if top_p >= 1.0 {
        return probs;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    // Absorbs summation rounding so a prefix whose exact mass equals `top_p`
    // is accepted.
    const MASS_SLACK: f64 = 1e-12;
    let mut mass = 0.0;
    let mut keep = order.len();
    for (n, &i) in order.iter().enumerate() {
        mass += probs[i];
        if mass >= top_p - MASS_SLACK {
            keep = n + 1;
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    for &i in &order[..keep] {
        out[i] = probs[i];
    }
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// Chooses the next token from raw logits. `emitted[i]` marks tokens already
/// generated, which receive the presence penalty.
pub fn sample_next(
    logits: &[f64],
    emitted: &[bool],
    sp: &SamplingParams,
    rng: &mut SeededRng,
) -> usize {
    let adjusted: Vec<f64> = logits
        .iter()
        .zip(emitted)
        .map(|(&l, &seen)| if seen { l - sp.presence_penalty } else { l })
        .collect();
    if sp.temperature == 0.0 {
        return argmax(&adjusted);
    }
    let probs = nucleus_probs(&adjusted, sp.temperature, sp.top_p);
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Generates up to `max_tokens` text tokens after `prompt`, stopping after an
/// end-of-sequence token. Image-slot, padding and BOS ids are never sampled.
pub fn generate(
    model: &Model,
    prompt: &TokenSeq,
    image: Option<&ImageBatch>,
    sp: &SamplingParams,
) -> Result<Vec<TokenId>, ModelError> {
    sp.validate()?;
    let cfg = model.config();
    let visual = match image {
        Some(img) => Some(model.visual_embeds(img)?),
        None => None,
    };
    let embeds = visual.as_ref().map_or(0, |v| v.shape()[0]);
    if embeds != prompt.visual_count() {
        return Err(ModelError::SlotCountMismatch {
            slots: prompt.visual_count(),
            embeds,
        });
    }
    let mut rng = SeededRng::new(sp.seed);
    let mut seq = prompt.clone();
    let mut emitted = vec![false; cfg.vocab_size];
    let mut out = Vec::new();
    for _ in 0..sp.max_tokens {
        let logits = model.decoder_forward(&seq, visual.as_ref())?;
        let v = cfg.vocab_size;
        let mut last = logits.data()[(seq.len() - 1) * v..seq.len() * v].to_vec();
        for banned in [PAD, BOS, IMAGE_SLOT] {
            last[banned as usize] = f64::NEG_INFINITY;
        }
        let next = sample_next(&last, &emitted, sp, &mut rng) as TokenId;
        emitted[next as usize] = true;
        out.push(next);
        if next == EOS {
            break;
        }
        seq.push_text(next)?;
    }
    Ok(out)
}
