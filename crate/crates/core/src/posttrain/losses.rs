use super::{grouper_advantages, LossConfig, PostTrainError, PreferencePair, RewardGroup};
use crate::numcore::{kernels, Tape, Tensor, Var};

/// Mean next-token negative log-likelihood of `targets` under `logits`
/// (`[T × V]`) over positions where `mask` is true.
pub fn sft_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<Var, PostTrainError> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || targets.len() != mask.len() {
        return Err(PostTrainError::LengthMismatch(format!(
            "logits {shape:?}, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(PostTrainError::AllMasked);
    }
    // Masked positions may carry placeholder targets; pin them to a valid id.
    let idx: Vec<usize> = targets
        .iter()
        .zip(mask)
        .map(|(&t, &m)| if m { t } else { 0 })
        .collect();
    let weights: Vec<f64> = mask
        .iter()
        .map(|&m| if m { -1.0 / count as f64 } else { 0.0 })
        .collect();
    let logp = tape.log_softmax_lastdim(logits)?;
    let picked = tape.pick_last(logp, &idx)?;
    let w = tape.constant(Tensor::from_parts(vec![weights.len()], weights));
    let weighted = tape.mul(picked, w)?;
    Ok(tape.sum(weighted)?)
}

/// Value-only form of [`sft_loss`].
pub fn sft_loss_value(
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
) -> Result<f64, PostTrainError> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = sft_loss(&mut tape, l, targets, mask)?;
    Ok(tape.value(loss).item())
}

/// `−log σ(β·m)` for a log-ratio margin `m`.
pub fn dpo_loss_value(margin: f64, beta: f64) -> f64 {
    -kernels::log_sigmoid(beta * margin)
}

/// DPO on the tape. `chosen` and `rejected` hold per-token policy
/// log-probabilities; the reference enters only through its sequence sums.
pub fn dpo_loss(
    tape: &mut Tape,
    chosen: Var,
    rejected: Var,
    ref_chosen_sum: f64,
    ref_rejected_sum: f64,
    cfg: &LossConfig,
) -> Result<Var, PostTrainError> {
    cfg.validate()?;
    let sc = tape.sum(chosen)?;
    let sr = tape.sum(rejected)?;
    let diff = tape.sub(sc, sr)?;
    let margin = tape.add_scalar(diff, ref_rejected_sum - ref_chosen_sum)?;
    let z = tape.scale(margin, cfg.beta)?;
    let ls = tape.log_sigmoid(z)?;
    Ok(tape.scale(ls, -1.0)?)
}

impl PreferencePair {
    /// Loss and its gradients with respect to the chosen and rejected policy
    /// log-probabilities.
    pub fn loss_and_grad(
        &self,
        cfg: &LossConfig,
    ) -> Result<(f64, Vec<f64>, Vec<f64>), PostTrainError> {
        self.validate()?;
        let mut tape = Tape::new();
        let c = tape.param(Tensor::from_vec(self.chosen_logprobs_policy.clone())?);
        let r = tape.param(Tensor::from_vec(self.rejected_logprobs_policy.clone())?);
        let rc: f64 = self.chosen_logprobs_ref.iter().sum();
        let rr: f64 = self.rejected_logprobs_ref.iter().sum();
        let loss = dpo_loss(&mut tape, c, r, rc, rr, cfg)?;
        let g = tape.backward(loss)?;
        Ok((
            tape.value(loss).item(),
            g.wrt(c).into_data(),
            g.wrt(r).into_data(),
        ))
    }
}

fn weighted_mean_logprob_sum(
    tape: &mut Tape,
    responses: &[Var],
    coeffs: &[f64],
    exponentiate: bool,
) -> Result<Var, PostTrainError> {
    if responses.len() != coeffs.len() || responses.is_empty() {
        return Err(PostTrainError::LengthMismatch(format!(
            "{} responses for {} advantages",
            responses.len(),
            coeffs.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&r, &a) in responses.iter().zip(coeffs) {
        let m = tape.mean(r)?;
        let m = if exponentiate { tape.exp(m)? } else { m };
        let term = tape.scale(m, a)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty responses"))
}

/// `−(1/G) Σ A_i · exp(mean log π(y_i))` for one group with precomputed
/// advantages.
pub fn grouper_loss(
    tape: &mut Tape,
    responses: &[Var],
    advantages: &[f64],
) -> Result<Var, PostTrainError> {
    let s = weighted_mean_logprob_sum(tape, responses, advantages, true)?;
    Ok(tape.scale(s, -1.0 / responses.len() as f64)?)
}

/// GROUPER averaged uniformly over groups. Degenerate groups are skipped;
/// if every group is degenerate the batch is empty.
pub fn grouper_batch_loss(
    tape: &mut Tape,
    groups: &[(Vec<Var>, Vec<f64>)],
    cfg: &LossConfig,
) -> Result<Var, PostTrainError> {
    let mut losses = Vec::new();
    for (responses, rewards) in groups {
        match grouper_advantages(rewards, cfg) {
            Ok(a) => losses.push(grouper_loss(tape, responses, &a)?),
            Err(PostTrainError::Degenerate { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if losses.is_empty() {
        return Err(PostTrainError::EmptyBatch);
    }
    let n = losses.len();
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / n as f64)?)
}

/// Policy-gradient surrogate `−Σ A_i · mean log π(y_i)`.
pub fn grpo_surrogate_loss(
    tape: &mut Tape,
    responses: &[Var],
    advantages: &[f64],
) -> Result<Var, PostTrainError> {
    let s = weighted_mean_logprob_sum(tape, responses, advantages, false)?;
    Ok(tape.scale(s, -1.0)?)
}

impl RewardGroup {
    /// GROUPER loss and gradients with respect to each response's per-token
    /// log-probabilities.
    pub fn grouper_loss_and_grad(
        &self,
        cfg: &LossConfig,
    ) -> Result<(f64, Vec<Vec<f64>>), PostTrainError> {
        let a = grouper_advantages(&self.rewards, cfg)?;
        let mut tape = Tape::new();
        let vars = self
            .response_logprobs_policy
            .iter()
            .map(|lp| Ok(tape.param(Tensor::from_vec(lp.clone())?)))
            .collect::<Result<Vec<_>, PostTrainError>>()?;
        let loss = grouper_loss(&mut tape, &vars, &a)?;
        let g = tape.backward(loss)?;
        Ok((
            tape.value(loss).item(),
            vars.iter().map(|&v| g.wrt(v).into_data()).collect(),
        ))
    }

    pub fn grouper_loss(&self, cfg: &LossConfig) -> Result<f64, PostTrainError> {
        self.grouper_loss_and_grad(cfg).map(|(l, _)| l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sft_uniform_and_saturated() {
        let v = 7;
        let logits = Tensor::zeros(&[3, v]);
        let l = sft_loss_value(&logits, &[1, 2, 3], &[true, true, false]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        let mut data = vec![0.0; 2 * v];
        data[4] = 20.0;
        data[v + 1] = 20.0;
        let logits = Tensor::new(vec![2, v], data).unwrap();
        assert!(sft_loss_value(&logits, &[4, 1], &[true, true]).unwrap() < 1e-4);
        assert_eq!(
            sft_loss_value(&logits, &[4, 1], &[false, false]),
            Err(PostTrainError::AllMasked)
        );
        assert!(matches!(
            sft_loss_value(&logits, &[4], &[true]),
            Err(PostTrainError::LengthMismatch(_))
        ));
    }

    #[test]
    fn dpo_examples() {
        assert!((dpo_loss_value(0.0, 0.1) - std::f64::consts::LN_2).abs() < 1e-15);
        // −log σ(0.2) evaluated independently.
        let want = (1.0 + (-0.2f64).exp()).ln();
        assert!((dpo_loss_value(2.0, 0.1) - want).abs() < 1e-15);
        assert!((want - 0.598139).abs() < 1e-6);
        assert!(dpo_loss_value(10.0 / 0.1, 0.1) < 1e-4);
    }

    #[test]
    fn dpo_gradient_signs() {
        let pair = PreferencePair {
            prompt_len: 3,
            chosen_logprobs_policy: vec![-0.5, -1.0],
            chosen_logprobs_ref: vec![-0.5, -1.0],
            rejected_logprobs_policy: vec![-2.0],
            rejected_logprobs_ref: vec![-2.0],
        };
        let (l, gc, gr) = pair.loss_and_grad(&LossConfig::default()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(gc.iter().all(|&g| g < 0.0));
        assert!(gr.iter().all(|&g| g > 0.0));
        let bad = PreferencePair {
            chosen_logprobs_policy: vec![0.5, -1.0],
            ..pair
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn grouper_symmetric_cancels() {
        let p: f64 = 0.3;
        let lp = vec![p.ln(); 3];
        let g = RewardGroup::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![lp.clone(), lp.clone(), lp.clone(), lp],
        )
        .unwrap();
        assert!(g.grouper_loss(&LossConfig::default()).unwrap().abs() < 1e-15);
    }
}
