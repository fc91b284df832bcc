//! The miniature vision-language model: patchifier and vision encoder with
//! 2D RoPE, spatial merger, causal decoder with 1D RoPE, and a depth-1
//! multi-token-prediction head used only in training.

pub mod checkpoint;
mod config;
mod forward;
mod generate;
mod params;
mod tokens;
mod vision;

pub use config::ModelConfig;
pub use forward::{
    decoder_on_tape, encode_on_tape, example_loss_on_tape, merge_on_tape, mtp_logits_on_tape,
    response_logprobs_on_tape, visual_embeds_on_tape, DecoderStates, LossVars, TrainExample,
};
pub use generate::{argmax, generate, nucleus_probs, sample_next, SamplingParams};
pub use params::{init_params, Bound, ParamStore};
pub use tokens::{
    decode, encode, is_special, Modality, TokenId, TokenSeq, BOS, EOS, IMAGE_SLOT, PAD, VOCAB_SIZE,
};
pub use vision::{merge_plan, patchify, unpatchify, ImageBatch, MergePlan, Patches};

use crate::layers::LayerError;
use crate::numcore::{NumError, Tape, Tensor};
use crate::posttrain::PostTrainError;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("image {height}×{width} is not divisible into {patch}-pixel patches")]
    IndivisibleImage {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("image {height}×{width} exceeds maximum side {max}")]
    ImageTooLarge {
        height: usize,
        width: usize,
        max: usize,
    },
    #[error("patch grid cannot be merged: {0}")]
    IndivisibleGrid(String),
    #[error("sequence has {slots} visual slots but {embeds} visual embeddings were supplied")]
    SlotCountMismatch { slots: usize, embeds: usize },
    #[error("sequence of length {len} is shorter than the required {min}")]
    SequenceTooShort { len: usize, min: usize },
    #[error("multi-token prediction is disabled in this configuration")]
    MtpDisabled,
    #[error("invalid sampling parameters: {0}")]
    InvalidSamplingParams(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    PostTrain(#[from] PostTrainError),
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Checks that `params` holds exactly the tensors `cfg` calls for. MTP
    /// weights may be absent only when `cfg.mtp_enabled` is false.
    pub fn new(cfg: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        let template = init_params(
            &ModelConfig {
                mtp_enabled: true,
                ..cfg.clone()
            },
            0,
        );
        let has_mtp = params.has_prefix("mtp.");
        if cfg.mtp_enabled && !has_mtp {
            return Err(ModelError::MissingParam(
                "mtp.* (mtp_enabled is set)".into(),
            ));
        }
        for (name, t) in template.iter() {
            if name.starts_with("mtp.") && !has_mtp {
                continue;
            }
            let got = params
                .get(name)
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            if got.shape() != t.shape() {
                return Err(ModelError::ShapeMismatch(format!(
                    "{name}: expected {:?}, found {:?}",
                    t.shape(),
                    got.shape()
                )));
            }
        }
        if let Some(extra) = params.names().iter().find(|n| template.get(n).is_none()) {
            return Err(ModelError::ShapeMismatch(format!(
                "unexpected parameter {extra}"
            )));
        }
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let params = init_params(&cfg, seed);
        Self::new(cfg, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn has_mtp_weights(&self) -> bool {
        self.params.has_prefix("mtp.")
    }

    /// Copy with the MTP head removed (and disabled).
    pub fn without_mtp(&self) -> Self {
        let mut params = self.params.clone();
        params.remove_prefix("mtp.");
        Self {
            cfg: ModelConfig {
                mtp_enabled: false,
                ..self.cfg.clone()
            },
            params,
        }
    }

    /// Vision encoder output `[N × d_model]` for the image's patches in
    /// row-major order.
    pub fn encode_image(&self, img: &ImageBatch) -> Result<Tensor, ModelError> {
        self.encode_patches(&patchify(img, &self.cfg)?)
    }

    /// Encoder output for patches in arbitrary order; positions come from the
    /// patch coordinates only.
    pub fn encode_patches(&self, patches: &Patches) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = encode_on_tape(&mut tape, &p, &self.cfg, patches)?;
        Ok(tape.value(out).clone())
    }

    pub fn merge_tokens(
        &self,
        enc: &Tensor,
        rows: &[usize],
        cols: &[usize],
    ) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let e = tape.constant(enc.clone());
        let (out, _) = merge_on_tape(&mut tape, &p, &self.cfg, e, rows, cols)?;
        Ok(tape.value(out).clone())
    }

    /// Merger output `[M × d_model]`, one row per visual token.
    pub fn visual_embeds(&self, img: &ImageBatch) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let (out, _) = visual_embeds_on_tape(&mut tape, &p, &self.cfg, img)?;
        Ok(tape.value(out).clone())
    }

    /// Vocabulary logits `[T × vocab]`.
    pub fn decoder_forward(
        &self,
        seq: &TokenSeq,
        visual: Option<&Tensor>,
    ) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let vis = forward::constant_visual(&mut tape, visual);
        let states = decoder_on_tape(&mut tape, &p, &self.cfg, seq, vis)?;
        Ok(tape.value(states.logits).clone())
    }

    /// Mean MTP cross-entropy over the supervised targets of `ex`.
    pub fn mtp_loss(&self, ex: &TrainExample) -> Result<f64, ModelError> {
        if !self.cfg.mtp_enabled {
            return Err(ModelError::MtpDisabled);
        }
        if ex.seq.len() < 3 {
            return Err(ModelError::SequenceTooShort {
                len: ex.seq.len(),
                min: 3,
            });
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let visual = match &ex.image {
            Some(img) => Some(visual_embeds_on_tape(&mut tape, &p, &self.cfg, img)?.0),
            None => None,
        };
        let states = decoder_on_tape(&mut tape, &p, &self.cfg, &ex.seq, visual)?;
        let logits = mtp_logits_on_tape(&mut tape, &p, &self.cfg, &ex.seq, &states)?;
        let (targets, mask) = ex.mtp_targets();
        let loss = crate::posttrain::sft_loss(&mut tape, logits, &targets, &mask)?;
        Ok(tape.value(loss).item())
    }

    /// `(total, main, mtp)` training loss values for one example.
    pub fn loss(&self, ex: &TrainExample) -> Result<(f64, f64, Option<f64>), ModelError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let l = example_loss_on_tape(&mut tape, &p, &self.cfg, ex)?;
        Ok((
            tape.value(l.total).item(),
            tape.value(l.main).item(),
            l.mtp.map(|m| tape.value(m).item()),
        ))
    }
}
