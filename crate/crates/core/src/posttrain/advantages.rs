use super::{LossConfig, PostTrainError, StdMode};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn group_std(rewards: &[f64], mode: StdMode) -> f64 {
    let m = mean(rewards);
    let ss: f64 = rewards.iter().map(|r| (r - m) * (r - m)).sum();
    let denom = match mode {
        StdMode::Population => rewards.len() as f64,
        StdMode::Sample => (rewards.len() - 1).max(1) as f64,
    };
    (ss / denom).sqrt()
}

/// Z-scores rewards, then maps them affinely onto `[−1, 1]` so the worst
/// response gets −1 and the best +1. Constant groups are
/// [`PostTrainError::Degenerate`] and must be dropped by the caller.
pub fn grouper_advantages(rewards: &[f64], cfg: &LossConfig) -> Result<Vec<f64>, PostTrainError> {
    if rewards.len() != cfg.group_size {
        return Err(PostTrainError::GroupSizeMismatch {
            expected: cfg.group_size,
            got: rewards.len(),
        });
    }
    let std = group_std(rewards, cfg.grouper_std_mode);
    if std <= cfg.zero_variance_eps {
        return Err(PostTrainError::Degenerate { std });
    }
    let m = mean(rewards);
    let z: Vec<f64> = rewards.iter().map(|r| (r - m) / std).collect();
    let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Err(PostTrainError::Degenerate { std });
    }
    Ok(z.iter()
        .map(|zi| 2.0 * (zi - lo) / (hi - lo) - 1.0)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrpoAdvantages {
    /// One advantage list per surviving group, aligned with `surviving`.
    pub advantages: Vec<Vec<f64>>,
    /// Indices (into the input) of groups that passed filtering.
    pub surviving: Vec<usize>,
}

/// Mean-baseline advantages `r_i − mean(r)` with no std normalization.
/// Groups whose rewards are constant (population std ≤ `zero_variance_eps`)
/// carry no signal and are removed.
pub fn grpo_advantages<R: AsRef<[f64]>>(
    groups: &[R],
    cfg: &LossConfig,
) -> Result<GrpoAdvantages, PostTrainError> {
    let mut advantages = Vec::new();
    let mut surviving = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        let rewards = g.as_ref();
        if rewards.is_empty() {
            return Err(PostTrainError::InvalidGroup(format!("group {i} is empty")));
        }
        if group_std(rewards, StdMode::Population) <= cfg.zero_variance_eps {
            continue;
        }
        let m = mean(rewards);
        advantages.push(rewards.iter().map(|r| r - m).collect());
        surviving.push(i);
    }
    if surviving.is_empty() {
        return Err(PostTrainError::EmptyBatch);
    }
    Ok(GrpoAdvantages {
        advantages,
        surviving,
    })
}
