use std::path::Path;

use exms_core::datagen::read_ppm;
use exms_core::model::{checkpoint, decode, encode, generate, ImageBatch, ModelConfig, SamplingParams, TokenId, TokenSeq, BOS};

use crate::error::CliError;

/// Placeholder in a prompt for the image's visual tokens.
pub const IMAGE_MARKER: &str = "<image>";

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub text: String,
}

/// BOS followed by the prompt text, with every [`IMAGE_MARKER`] expanded to
/// the visual slots of an image of `image_size` (width, height).
pub fn build_prompt(cfg: &ModelConfig, prompt: &str, image_size: Option<(usize, usize)>) -> Result<TokenSeq, CliError> {
    let markers = prompt.matches(IMAGE_MARKER).count();
    if markers > 0 && image_size.is_none() {
        return Err(CliError::SlotCountMismatch(format!(
            "prompt has {markers} image marker(s) but no image was given"
        )));
    }
    let mut seq = TokenSeq::from_ids(&[BOS])?;
    let side = cfg.patch_size * cfg.merge_factor;
    for (i, piece) in prompt.split(IMAGE_MARKER).enumerate() {
        if i > 0 {
            let (w, h) = image_size.expect("checked above");
            seq.push_image(h / side, w / side);
        }
        for id in encode(piece) {
            seq.push_text(id)?;
        }
    }
    Ok(seq)
}

pub fn cmd_generate(
    checkpoint_path: &Path,
    prompt: &str,
    image: Option<&Path>,
    sp: &SamplingParams,
) -> Result<Generation, CliError> {
    sp.validate()?;
    let model = checkpoint::load(checkpoint_path)?;
    let img = match image {
        Some(p) => {
            let r = read_ppm(p)?;
            Some(ImageBatch::from_rgb8(r.width, r.height, &r.data)?)
        }
        None => None,
    };
    let seq = build_prompt(model.config(), prompt, img.as_ref().map(|i| (i.width(), i.height())))?;
    let tokens = generate(&model, &seq, img.as_ref(), sp)?;
    Ok(Generation { text: decode(&tokens), tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markers_expand_to_slots() {
        let cfg = ModelConfig::toy();
        let seq = build_prompt(&cfg, "<image>ab", Some((16, 8))).unwrap();
        assert_eq!(seq.len(), 1 + 2 + 2);
        assert_eq!(seq.visual_count(), 2);
        assert_eq!(build_prompt(&cfg, "ab", None).unwrap().len(), 3);
        assert!(matches!(build_prompt(&cfg, "<image>", None), Err(CliError::SlotCountMismatch(_))));
    }
}
