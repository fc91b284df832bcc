use exms_core::numcore::{SeededRng, Tensor};
use exms_core::posttrain::{
    grouper_advantages, grpo_advantages, sft_loss_value, LossConfig, PostTrainError, PreferencePair, StdMode,
};

use super::{max_abs_diff, Recorder};
use crate::error::CliError;

const SEED: u64 = 0x6c6f_7373;
const TOL: f64 = 1e-12;

fn flag(ok: bool) -> Result<f64, CliError> {
    Ok(if ok { 0.0 } else { 1.0 })
}

fn random_rewards(rng: &mut SeededRng, g: usize) -> Vec<f64> {
    (0..g).map(|_| 3.0 * rng.normal()).collect()
}

fn logprobs(rng: &mut SeededRng) -> Vec<f64> {
    (0..rng.between(1, 8)).map(|_| -rng.uniform() * 5.0).collect()
}

pub(super) fn run() -> Vec<super::CheckOutcome> {
    let mut rec = Recorder::new("losses");
    let mut rng = SeededRng::new(SEED);
    let cfg = LossConfig::default();

    let example = grouper_advantages(&[1.0, 2.0, 3.0, 4.0], &cfg)
        .map(|a| max_abs_diff(&a, &[-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0]))
        .map_err(CliError::from);
    rec.record("grouper_example_1234", TOL, example);
    let pairs = grouper_advantages(&[0.0, 0.0, 1.0, 1.0], &cfg)
        .map(|a| max_abs_diff(&a, &[-1.0, -1.0, 1.0, 1.0]))
        .map_err(CliError::from);
    rec.record("grouper_example_0011", TOL, pairs);

    let mut range = 0.0f64;
    let mut affine = 0.0f64;
    let mut modes = 0.0f64;
    let mut failure = None;
    for _ in 0..100 {
        let r = random_rewards(&mut rng, cfg.group_size);
        let (scale, shift) = (0.01 + 10.0 * rng.uniform(), 20.0 * rng.uniform() - 10.0);
        let moved: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
        let sample_cfg = LossConfig { grouper_std_mode: StdMode::Sample, ..cfg };
        match (grouper_advantages(&r, &cfg), grouper_advantages(&moved, &cfg), grouper_advantages(&r, &sample_cfg)) {
            (Ok(a), Ok(b), Ok(c)) => {
                let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let outside = a.iter().map(|v| (v.abs() - 1.0).max(0.0)).fold(0.0, f64::max);
                range = range.max((lo + 1.0).abs()).max((hi - 1.0).abs()).max(outside);
                affine = affine.max(max_abs_diff(&a, &b));
                modes = modes.max(max_abs_diff(&a, &c));
            }
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => failure = Some(e),
        }
    }
    let or_fail = |v: f64, f: &Option<PostTrainError>| match f {
        Some(e) => Err(CliError::from(e.clone())),
        None => Ok(v),
    };
    rec.record("grouper_range_endpoints (100 groups)", TOL, or_fail(range, &failure));
    rec.record("grouper_affine_invariance (100 groups)", TOL, or_fail(affine, &failure));
    rec.record("grouper_std_mode_independent (100 groups)", TOL, or_fail(modes, &failure));
    let constant = [5.0; 4];
    rec.record(
        "grouper_constant_group_degenerate",
        0.0,
        flag(matches!(grouper_advantages(&constant, &cfg), Err(PostTrainError::Degenerate { .. }))),
    );

    let mut identity = 0.0f64;
    let mut sign_violations = 0usize;
    let mut failure = None;
    for _ in 0..100 {
        let (chosen, rejected) = (logprobs(&mut rng), logprobs(&mut rng));
        let pair = PreferencePair {
            prompt_len: rng.between(1, 10),
            chosen_logprobs_ref: chosen.clone(),
            chosen_logprobs_policy: chosen,
            rejected_logprobs_ref: rejected.clone(),
            rejected_logprobs_policy: rejected,
        };
        match pair.loss_and_grad(&cfg) {
            Ok((loss, gc, gr)) => {
                identity = identity.max((loss - std::f64::consts::LN_2).abs());
                // Descent direction raises chosen and lowers rejected log-probs.
                sign_violations += gc.iter().filter(|&&g| g >= 0.0).count() + gr.iter().filter(|&&g| g <= 0.0).count();
            }
            Err(e) => failure = Some(e),
        }
    }
    rec.record("dpo_identity_log2 (100 pairs)", TOL, or_fail(identity, &failure));
    rec.record("dpo_gradient_signs (100 pairs)", 0.0, or_fail(sign_violations as f64, &failure));

    let mut grpo_sum = 0.0f64;
    let mut filter_errors = 0usize;
    let mut failure = None;
    for _ in 0..50 {
        let groups: Vec<Vec<f64>> = (0..rng.between(1, 6))
            .map(|_| {
                let g = rng.between(2, 6);
                if rng.below(3) == 0 {
                    vec![rng.uniform(); g]
                } else {
                    random_rewards(&mut rng, g)
                }
            })
            .collect();
        let expect: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].iter().any(|&r| r != groups[i][0])).collect();
        match grpo_advantages(&groups, &cfg) {
            Ok(out) => {
                filter_errors += usize::from(out.surviving != expect);
                grpo_sum = out.advantages.iter().map(|a| a.iter().sum::<f64>().abs()).fold(grpo_sum, f64::max);
            }
            Err(PostTrainError::EmptyBatch) => filter_errors += usize::from(!expect.is_empty()),
            Err(e) => failure = Some(e),
        }
    }
    rec.record("grpo_zero_variance_filter (50 batches)", 0.0, or_fail(filter_errors as f64, &failure));
    rec.record("grpo_advantages_sum_to_zero (50 batches)", TOL, or_fail(grpo_sum, &failure));

    let uniform = (|| -> Result<f64, CliError> {
        let v = 260;
        let logits = Tensor::zeros(&[6, v]);
        let targets: Vec<usize> = (0..6).map(|_| rng.below(v)).collect();
        let loss = sft_loss_value(&logits, &targets, &[true, false, true, true, false, true])?;
        Ok((loss - (v as f64).ln()).abs())
    })();
    rec.record("sft_uniform_logits_log_vocab", TOL, uniform);
    rec.finish()
}
