//! Differentiable forward passes recorded on a [`Tape`].

use super::params::Bound;
use super::tokens::{Modality, TokenSeq, PAD};
use super::vision::{merge_plan, ImageBatch, MergePlan, Patches};
use super::{patchify, ModelConfig, ModelError};
use crate::layers::{attention_on_tape, AttnConfig, RopeMode, RopeParams, RopeTable};
use crate::numcore::{Tape, Tensor, Var};
use crate::posttrain::sft_loss;

/// Pre-norm transformer block: attention then SwiGLU MLP, each residual.
pub(crate) fn block(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    attn: &AttnConfig,
    rope: &RopeTable,
) -> Result<Var, ModelError> {
    let t = tape.shape(x)[0];
    let w = |name: &str| p.get(&format!("{prefix}.{name}"));
    let xn = tape.rms_norm(x, w("attn_norm")?, cfg.rms_eps)?;
    let q = tape.matmul(xn, w("wq")?)?;
    let q = tape.reshape(q, &[t, cfg.n_heads, cfg.head_dim])?;
    let k = tape.matmul(xn, w("wk")?)?;
    let k = tape.reshape(k, &[t, cfg.n_kv_heads, cfg.head_dim])?;
    let v = tape.matmul(xn, w("wv")?)?;
    let v = tape.reshape(v, &[t, cfg.n_kv_heads, cfg.head_dim])?;
    let q = rope.apply_on_tape(tape, q, 0)?;
    let k = rope.apply_on_tape(tape, k, 0)?;
    let a = attention_on_tape(tape, q, k, v, attn, cfg.attn_chunk)?;
    let a = tape.reshape(a, &[t, cfg.n_heads * cfg.head_dim])?;
    let o = tape.matmul(a, w("wo")?)?;
    let x = tape.add(x, o)?;

    let xn = tape.rms_norm(x, w("mlp_norm")?, cfg.rms_eps)?;
    let gate = tape.matmul(xn, w("w_gate")?)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(xn, w("w_up")?)?;
    let h = tape.mul(gate, up)?;
    let down = tape.matmul(h, w("w_down")?)?;
    Ok(tape.add(x, down)?)
}

/// Vision encoder over patches: linear patch embedding followed by
/// bidirectional blocks with 2D RoPE on the patch coordinates.
pub fn encode_on_tape(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    patches: &Patches,
) -> Result<Var, ModelError> {
    let input = tape.constant(patches.data.clone());
    let x = tape.matmul(input, p.get("enc.patch_embed.w")?)?;
    let mut x = tape.add(x, p.get("enc.patch_embed.b")?)?;
    let rope = RopeParams::new(cfg.head_dim, cfg.rope_theta, RopeMode::TwoDimensional)?
        .table_2d(&patches.rows, &patches.cols)?;
    for l in 0..cfg.n_layers_enc {
        let attn = cfg.attn(false, cfg.enc_attention.window_for(l));
        x = block(tape, p, cfg, &format!("enc.layers.{l}"), x, &attn, &rope)?;
    }
    Ok(x)
}

/// Channel-concatenates each merge neighbourhood and projects it to the
/// decoder width with a two-layer SiLU MLP.
pub fn merge_on_tape(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    enc: Var,
    rows: &[usize],
    cols: &[usize],
) -> Result<(Var, MergePlan), ModelError> {
    let plan = merge_plan(rows, cols, cfg.merge_factor)?;
    let d = tape.shape(enc)[1];
    let f2 = cfg.merge_factor * cfg.merge_factor;
    let grouped = tape.gather_rows(enc, &plan.order)?;
    let x = tape.reshape(grouped, &[plan.tokens(), f2 * d])?;
    let h = tape.matmul(x, p.get("merger.w1")?)?;
    let h = tape.add(h, p.get("merger.b1")?)?;
    let h = tape.silu(h)?;
    let out = tape.matmul(h, p.get("merger.w2")?)?;
    let out = tape.add(out, p.get("merger.b2")?)?;
    Ok((out, plan))
}

pub fn visual_embeds_on_tape(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    img: &ImageBatch,
) -> Result<(Var, MergePlan), ModelError> {
    let patches = patchify(img, cfg)?;
    let enc = encode_on_tape(tape, p, cfg, &patches)?;
    merge_on_tape(tape, p, cfg, enc, &patches.rows, &patches.cols)
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderStates {
    /// Input embeddings after visual-slot substitution, `[T × d]`.
    pub inputs: Var,
    /// Residual stream after the last block, before the final norm.
    pub hidden: Var,
    pub logits: Var,
}

pub fn decoder_on_tape(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    seq: &TokenSeq,
    visual: Option<Var>,
) -> Result<DecoderStates, ModelError> {
    if seq.is_empty() {
        return Err(ModelError::InvalidSequence("empty sequence".into()));
    }
    let slots = seq.visual_count();
    let embeds = visual.map_or(0, |v| tape.shape(v)[0]);
    if slots != embeds {
        return Err(ModelError::SlotCountMismatch { slots, embeds });
    }
    let text_ids: Vec<usize> = seq
        .ids()
        .iter()
        .zip(seq.modality())
        .filter(|(_, &m)| m == Modality::Text)
        .map(|(&id, _)| id as usize)
        .collect();
    if let Some(&bad) = text_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::InvalidSequence(format!(
            "token {bad} outside vocabulary"
        )));
    }
    let table = p.get("dec.tok_embed")?;
    let inputs = match visual {
        None => tape.gather_rows(table, &text_ids)?,
        Some(vis) => {
            let n_text = text_ids.len();
            let stacked = if n_text == 0 {
                vis
            } else {
                let tok = tape.gather_rows(table, &text_ids)?;
                tape.concat_rows(&[tok, vis])?
            };
            let (mut ti, mut vi) = (0, n_text);
            let order: Vec<usize> = seq
                .modality()
                .iter()
                .map(|m| {
                    let slot = if *m == Modality::Text {
                        &mut ti
                    } else {
                        &mut vi
                    };
                    *slot += 1;
                    *slot - 1
                })
                .collect();
            tape.gather_rows(stacked, &order)?
        }
    };
    let rope = RopeParams::new(cfg.head_dim, cfg.rope_theta, RopeMode::OneDimensional)?
        .table_1d(seq.text_pos())?;
    let mut x = inputs;
    for l in 0..cfg.n_layers_dec {
        let attn = cfg.attn(true, cfg.dec_attention.window_for(l));
        x = block(tape, p, cfg, &format!("dec.layers.{l}"), x, &attn, &rope)?;
    }
    let xn = tape.rms_norm(x, p.get("dec.final_norm")?, cfg.rms_eps)?;
    let logits = tape.matmul(xn, p.get("dec.lm_head")?)?;
    Ok(DecoderStates {
        inputs,
        hidden: x,
        logits,
    })
}

/// Depth-1 multi-token prediction: position `t` combines the decoder hidden
/// state at `t` with the input embedding at `t + 1`, runs one extra causal
/// block and predicts the token at `t + 2` through the shared output head.
/// Returns `[T − 2 × vocab]` logits.
pub fn mtp_logits_on_tape(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    seq: &TokenSeq,
    states: &DecoderStates,
) -> Result<Var, ModelError> {
    if !cfg.mtp_enabled {
        return Err(ModelError::MtpDisabled);
    }
    let t = seq.len();
    if t < 3 {
        return Err(ModelError::SequenceTooShort { len: t, min: 3 });
    }
    let n = t - 2;
    let here: Vec<usize> = (0..n).collect();
    let next: Vec<usize> = (1..=n).collect();
    let h = tape.gather_rows(states.hidden, &here)?;
    let e = tape.gather_rows(states.inputs, &next)?;
    let hn = tape.rms_norm(h, p.get("mtp.norm_hidden")?, cfg.rms_eps)?;
    let en = tape.rms_norm(e, p.get("mtp.norm_embed")?, cfg.rms_eps)?;
    let cat = tape.concat_last(&[hn, en])?;
    let z = tape.matmul(cat, p.get("mtp.proj")?)?;
    let rope = RopeParams::new(cfg.head_dim, cfg.rope_theta, RopeMode::OneDimensional)?
        .table_1d(&seq.text_pos()[..n])?;
    let z = block(tape, p, cfg, "mtp.block", z, &cfg.attn(true, None), &rope)?;
    let zn = tape.rms_norm(z, p.get("mtp.final_norm")?, cfg.rms_eps)?;
    Ok(tape.matmul(zn, p.get("dec.lm_head")?)?)
}

/// A supervised sequence: `loss_mask[t]` marks token `t` as a prediction
/// target (predicted from position `t − 1`, and by MTP from `t − 2`).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub seq: TokenSeq,
    pub image: Option<ImageBatch>,
    pub loss_mask: Vec<bool>,
}

impl TrainExample {
    /// Next-token targets and mask aligned with logits rows `0..T`.
    pub fn next_token_targets(&self) -> (Vec<usize>, Vec<bool>) {
        shifted_targets(self, 1)
    }

    /// Targets for MTP rows `0..T−2` (the token two ahead).
    pub fn mtp_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let (mut t, mut m) = shifted_targets(self, 2);
        t.truncate(self.seq.len().saturating_sub(2));
        m.truncate(self.seq.len().saturating_sub(2));
        (t, m)
    }

    pub fn supervised_tokens(&self) -> usize {
        self.loss_mask.iter().skip(1).filter(|&&m| m).count()
    }
}

fn shifted_targets(ex: &TrainExample, shift: usize) -> (Vec<usize>, Vec<bool>) {
    let ids = ex.seq.ids();
    (0..ids.len())
        .map(|t| match ids.get(t + shift) {
            Some(&id) => (id as usize, ex.loss_mask[t + shift]),
            None => (PAD as usize, false),
        })
        .unzip()
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub main: Var,
    pub mtp: Option<Var>,
    pub logits: Var,
}

/// Next-token cross-entropy plus `mtp_weight ×` the MTP loss when the head is
/// enabled and has at least one supervised target.
pub fn example_loss_on_tape(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    ex: &TrainExample,
) -> Result<LossVars, ModelError> {
    if ex.loss_mask.len() != ex.seq.len() {
        return Err(ModelError::InvalidSequence(format!(
            "loss mask has {} entries for {} tokens",
            ex.loss_mask.len(),
            ex.seq.len()
        )));
    }
    let visual = match &ex.image {
        Some(img) => Some(visual_embeds_on_tape(tape, p, cfg, img)?.0),
        None => None,
    };
    let states = decoder_on_tape(tape, p, cfg, &ex.seq, visual)?;
    let (targets, mask) = ex.next_token_targets();
    let main = sft_loss(tape, states.logits, &targets, &mask)?;
    let mut total = main;
    let mut mtp = None;
    if cfg.mtp_enabled && ex.seq.len() >= 3 {
        let (mt, mm) = ex.mtp_targets();
        if mm.iter().any(|&m| m) {
            let logits = mtp_logits_on_tape(tape, p, cfg, &ex.seq, &states)?;
            let loss = sft_loss(tape, logits, &mt, &mm)?;
            if cfg.mtp_weight != 0.0 {
                let weighted = tape.scale(loss, cfg.mtp_weight)?;
                total = tape.add(main, weighted)?;
            }
            mtp = Some(loss);
        }
    }
    Ok(LossVars {
        total,
        main,
        mtp,
        logits: states.logits,
    })
}

/// Per-token log-probabilities of `ids[t]` for every position `t` with
/// `mask[t]` set, read from the decoder in one pass. Used by the preference
/// objectives.
pub fn response_logprobs_on_tape(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    seq: &TokenSeq,
    visual: Option<Var>,
    response: &[bool],
) -> Result<Var, ModelError> {
    let states = decoder_on_tape(tape, p, cfg, seq, visual)?;
    let rows: Vec<usize> = (1..seq.len())
        .filter(|&t| response[t])
        .map(|t| t - 1)
        .collect();
    let targets: Vec<usize> = (1..seq.len())
        .filter(|&t| response[t])
        .map(|t| seq.ids()[t] as usize)
        .collect();
    if rows.is_empty() {
        return Err(ModelError::InvalidSequence("response has no tokens".into()));
    }
    let logits = tape.gather_rows(states.logits, &rows)?;
    let logp = tape.log_softmax_lastdim(logits)?;
    Ok(tape.pick_last(logp, &targets)?)
}

pub(crate) fn constant_visual(tape: &mut Tape, visual: Option<&Tensor>) -> Option<Var> {
    visual.map(|v| tape.constant(v.clone()))
}
