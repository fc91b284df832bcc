//! The training loop for every objective: batches in a seed-determined
//! order, one tape per step, Adam updates, metrics and a final checkpoint.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use exms_core::model::{
    checkpoint, example_loss_on_tape, generate, response_logprobs_on_tape, visual_embeds_on_tape, Bound, Model,
    SamplingParams, TokenSeq, EOS,
};
use exms_core::numcore::{Adam, SeededRng, Tape, Var};
use exms_core::posttrain::{
    dpo_loss, grouper_batch_loss, grpo_advantages, grpo_surrogate_loss, PostTrainError,
};

use crate::config::{Objective, RunConfig};
use crate::error::CliError;
use crate::eval::{load_samples, next_token_accuracy};
use crate::metrics::{MetricRecord, MetricsWriter, METRICS_FILE};
use crate::task::{caption_candidates, count_reward, rejected_caption, with_response, Sample};

pub const CHECKPOINT_FILE: &str = "checkpoint.exms";

// Stream ids for the per-purpose generators derived from the run seed.
const STREAM_BATCHES: u64 = 1;
const STREAM_CANDIDATES: u64 = 2;
const STREAM_ROLLOUTS: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub final_eval_accuracy: Option<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub seconds: f64,
}

/// Epoch-wise shuffled sample order.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, STREAM_BATCHES);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, b: usize) -> Vec<usize> {
        (0..b)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

enum State {
    Sft,
    Dpo { reference: Model, rejected: Vec<String>, ref_sums: Vec<Option<(f64, f64)>> },
    Grouper { candidates: Vec<Vec<String>>, rewards: Vec<Vec<f64>> },
    Grpo,
}

struct StepOut {
    loss: Var,
    main: Option<Var>,
    mtp: Option<Var>,
    tokens: u64,
    groups_kept: Option<usize>,
}

/// Sum of per-token reference log-probabilities of `response` after the
/// sample's prompt.
fn frozen_logprob_sum(model: &Model, s: &Sample, response: &str) -> Result<f64, CliError> {
    let (seq, mask) = with_response(&s.prompt, response)?;
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let (vis, _) = visual_embeds_on_tape(&mut tape, &p, model.config(), &s.image)?;
    let lp = response_logprobs_on_tape(&mut tape, &p, model.config(), &seq, Some(vis), &mask)?;
    Ok(tape.value(lp).sum())
}

fn sum_vars(tape: &mut Tape, vars: &[Var], scale: f64) -> Result<Var, CliError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v).map_err(|e| CliError::Model(e.to_string()))?;
    }
    tape.scale(acc, scale).map_err(|e| CliError::Model(e.to_string()))
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    samples: Vec<Sample>,
    state: State,
    rollout_rng: SeededRng,
}

impl Trainer<'_> {
    fn step(&mut self, tape: &mut Tape, p: &Bound, model: &Model, batch: &[usize]) -> Result<Option<StepOut>, CliError> {
        let mcfg = model.config();
        let scale = 1.0 / batch.len() as f64;
        match &mut self.state {
            State::Sft => {
                let (mut totals, mut mains, mut mtps, mut tokens) = (Vec::new(), Vec::new(), Vec::new(), 0);
                for &i in batch {
                    let ex = self.samples[i].train_example()?;
                    tokens += ex.supervised_tokens() as u64;
                    let l = example_loss_on_tape(tape, p, mcfg, &ex)?;
                    totals.push(l.total);
                    mains.push(l.main);
                    mtps.extend(l.mtp);
                }
                let loss = sum_vars(tape, &totals, scale)?;
                let main = Some(sum_vars(tape, &mains, scale)?);
                let mtp = if mtps.is_empty() { None } else { Some(sum_vars(tape, &mtps, 1.0 / mtps.len() as f64)?) };
                Ok(Some(StepOut { loss, main, mtp, tokens, groups_kept: None }))
            }
            State::Dpo { reference, rejected, ref_sums } => {
                let mut losses = Vec::new();
                let mut tokens = 0;
                for &i in batch {
                    let s = &self.samples[i];
                    let (rc, rr) = match ref_sums[i] {
                        Some(v) => v,
                        None => {
                            let v = (
                                frozen_logprob_sum(reference, s, &s.target)?,
                                frozen_logprob_sum(reference, s, &rejected[i])?,
                            );
                            ref_sums[i] = Some(v);
                            v
                        }
                    };
                    let (vis, _) = visual_embeds_on_tape(tape, p, mcfg, &s.image)?;
                    let (cs, cm) = with_response(&s.prompt, &s.target)?;
                    let (rs, rm) = with_response(&s.prompt, &rejected[i])?;
                    tokens += (cm.iter().filter(|&&m| m).count() + rm.iter().filter(|&&m| m).count()) as u64;
                    let c = response_logprobs_on_tape(tape, p, mcfg, &cs, Some(vis), &cm)?;
                    let r = response_logprobs_on_tape(tape, p, mcfg, &rs, Some(vis), &rm)?;
                    losses.push(dpo_loss(tape, c, r, rc, rr, &self.cfg.loss)?);
                }
                let loss = sum_vars(tape, &losses, scale)?;
                Ok(Some(StepOut { loss, main: None, mtp: None, tokens, groups_kept: None }))
            }
            State::Grouper { candidates, rewards } => {
                let mut groups = Vec::new();
                let mut tokens = 0;
                for &i in batch {
                    let s = &self.samples[i];
                    let (vis, _) = visual_embeds_on_tape(tape, p, mcfg, &s.image)?;
                    let mut vars = Vec::new();
                    for text in &candidates[i] {
                        let (seq, mask) = with_response(&s.prompt, text)?;
                        tokens += mask.iter().filter(|&&m| m).count() as u64;
                        vars.push(response_logprobs_on_tape(tape, p, mcfg, &seq, Some(vis), &mask)?);
                    }
                    groups.push((vars, rewards[i].clone()));
                }
                match grouper_batch_loss(tape, &groups, &self.cfg.loss) {
                    Ok(loss) => Ok(Some(StepOut { loss, main: None, mtp: None, tokens, groups_kept: None })),
                    Err(PostTrainError::EmptyBatch) => Ok(None),
                    Err(e) => Err(e.into()),
                }
            }
            State::Grpo => {
                let g = self.cfg.loss.group_size;
                let mut rollouts: Vec<Vec<(TokenSeq, Vec<bool>)>> = Vec::new();
                let mut rewards: Vec<Vec<f64>> = Vec::new();
                for &i in batch {
                    let s = &self.samples[i];
                    let max_tokens = self.cfg.train.rollout_max_tokens.unwrap_or(s.target.len() + 8);
                    let (mut group, mut r) = (Vec::new(), Vec::new());
                    for _ in 0..g {
                        let sp = SamplingParams {
                            temperature: self.cfg.train.rollout_temperature,
                            top_p: 1.0,
                            presence_penalty: 0.0,
                            max_tokens,
                            seed: self.rollout_rng.next_u64(),
                        };
                        let ids = generate(model, &s.prompt, Some(&s.image), &sp)?;
                        let text_ids: Vec<_> = ids.iter().copied().filter(|&t| t != EOS).collect();
                        let text = exms_core::model::decode(&text_ids);
                        r.push(count_reward(&text, &s.counts, self.cfg.data.task));
                        let mut seq = s.prompt.clone();
                        let mut mask = vec![false; seq.len()];
                        for id in ids {
                            seq.push_text(id)?;
                            mask.push(true);
                        }
                        group.push((seq, mask));
                    }
                    rollouts.push(group);
                    rewards.push(r);
                }
                let adv = match grpo_advantages(&rewards, &self.cfg.loss) {
                    Ok(a) => a,
                    Err(PostTrainError::EmptyBatch) => return Ok(None),
                    Err(e) => return Err(e.into()),
                };
                let mut losses = Vec::new();
                let mut tokens = 0;
                for (a, &gi) in adv.advantages.iter().zip(&adv.surviving) {
                    let s = &self.samples[batch[gi]];
                    let (vis, _) = visual_embeds_on_tape(tape, p, mcfg, &s.image)?;
                    let mut vars = Vec::new();
                    for (seq, mask) in &rollouts[gi] {
                        tokens += mask.iter().filter(|&&m| m).count() as u64;
                        vars.push(response_logprobs_on_tape(tape, p, mcfg, seq, Some(vis), mask)?);
                    }
                    losses.push(grpo_surrogate_loss(tape, &vars, a)?);
                }
                let kept = losses.len();
                let loss = sum_vars(tape, &losses, 1.0 / kept as f64)?;
                Ok(Some(StepOut { loss, main: None, mtp: None, tokens, groups_kept: Some(kept) }))
            }
        }
    }
}

fn initial_model(cfg: &RunConfig) -> Result<Model, CliError> {
    match &cfg.data.reference {
        Some(path) => {
            let m = checkpoint::load(path)?;
            if m.config() != &cfg.model {
                return Err(CliError::Config(format!(
                    "model section differs from the configuration stored in {}",
                    path.display()
                )));
            }
            Ok(m)
        }
        None => Ok(Model::init(cfg.model.clone(), cfg.seed)?),
    }
}

/// Runs the configured objective and writes `checkpoint.exms` and
/// `metrics.jsonl` into `train.out_dir`. Identical configs produce
/// byte-identical outputs unless `log_throughput` is set.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let started = Instant::now();
    fs::create_dir_all(&cfg.train.out_dir)?;
    let mut model = initial_model(cfg)?;
    let fmt = cfg.data.task;
    let samples = load_samples(&model, &cfg.data.train, fmt)?;
    let eval = match &cfg.data.eval {
        Some(p) => Some(load_samples(&model, p, fmt)?),
        None => None,
    };
    let mut cand_rng = SeededRng::derive(cfg.seed, STREAM_CANDIDATES);
    let state = match cfg.objective {
        Objective::Sft => State::Sft,
        Objective::Dpo => State::Dpo {
            reference: model.clone(),
            rejected: samples.iter().map(|s| rejected_caption(&s.counts, &mut cand_rng)).collect(),
            ref_sums: vec![None; samples.len()],
        },
        Objective::Grouper => {
            let candidates: Vec<Vec<String>> = samples
                .iter()
                .map(|s| caption_candidates(&s.counts, cfg.loss.group_size, &mut cand_rng))
                .collect();
            let rewards = candidates
                .iter()
                .zip(&samples)
                .map(|(c, s)| c.iter().map(|t| count_reward(t, &s.counts, fmt)).collect())
                .collect();
            State::Grouper { candidates, rewards }
        }
        Objective::Grpo => State::Grpo,
    };
    let mut batcher = Batcher::new(samples.len(), cfg.seed);
    let mut trainer = Trainer { cfg, samples, state, rollout_rng: SeededRng::derive(cfg.seed, STREAM_ROLLOUTS) };

    let metrics_path = cfg.train.out_dir.join(METRICS_FILE);
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut opt = Adam::new(cfg.train.learning_rate, model.params().tensors());
    let mut tokens = 0u64;
    let mut final_loss = f64::NAN;
    let mut final_eval = None;
    for step in 0..cfg.train.steps {
        let batch = batcher.next(cfg.train.batch_size);
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, true);
        let out = trainer.step(&mut tape, &p, &model, &batch)?;
        let (loss, main, mtp, groups_kept) = match out {
            Some(o) => {
                let loss = tape.value(o.loss).item();
                if !loss.is_finite() {
                    return Err(CliError::DivergedLoss { step, what: format!("loss {loss}") });
                }
                let grads = tape.backward(o.loss).map_err(|e| CliError::Model(e.to_string()))?;
                let g: Vec<Vec<f64>> = p
                    .vars()
                    .iter()
                    .zip(model.params().tensors())
                    .map(|(&v, t)| grads.wrt_data(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
                    .collect();
                if g.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(CliError::DivergedLoss { step, what: "non-finite gradient".into() });
                }
                opt.update(model.params_mut().tensors_mut(), &g);
                tokens += o.tokens;
                let val = |v: Option<Var>| v.map(|v| tape.value(v).item());
                (loss, val(o.main), val(o.mtp), o.groups_kept)
            }
            // Every group was filtered: nothing to learn from this batch.
            None => (0.0, None, None, Some(0)),
        };
        final_loss = loss;
        let last = step + 1 == cfg.train.steps;
        let eval_now = eval.is_some() && (last || cfg.train.eval_every.is_some_and(|e| (step + 1) % e == 0));
        let eval_accuracy = match (&eval, eval_now) {
            (Some(ev), true) => Some(next_token_accuracy(&model, ev)?),
            _ => None,
        };
        if eval_accuracy.is_some() {
            final_eval = eval_accuracy;
        }
        if step % cfg.train.log_every == 0 || last || eval_accuracy.is_some() {
            let secs = started.elapsed().as_secs_f64();
            let rec = MetricRecord {
                step,
                objective: cfg.objective.name().to_string(),
                loss,
                main,
                mtp,
                tokens,
                tokens_per_sec: cfg.train.log_throughput.then(|| tokens as f64 / secs.max(1e-9)),
                eval_accuracy,
                groups_kept,
            };
            log::info!("step {step} loss {loss:.6}{}", eval_accuracy.map_or(String::new(), |a| format!(" eval {a:.4}")));
            metrics.append(&rec)?;
        }
    }
    let ckpt = cfg.train.out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&model, &ckpt)?;
    Ok(TrainSummary {
        steps: cfg.train.steps,
        final_loss,
        final_eval_accuracy: final_eval,
        checkpoint: ckpt,
        metrics: metrics_path,
        seconds: started.elapsed().as_secs_f64(),
    })
}
