//! Backward pass against central finite differences for every tape
//! operation, the attention and RoPE rules, each training objective and the
//! full model loss.

use exms_core::layers::{attention_on_tape, AttnConfig, RopeParams};
use exms_core::model::{
    example_loss_on_tape, ImageBatch, Model, ModelConfig, TokenSeq, TrainExample, BOS, EOS, IMAGE_SLOT,
};
use exms_core::numcore::{
    finite_diff_coords, finite_diff_grad, rel_err, SeededRng, Tape, Tensor, Var, DEFAULT_STEP, GRAD_REL_TOL,
};
use exms_core::posttrain::{dpo_loss, grouper_advantages, grouper_loss, grpo_advantages, grpo_surrogate_loss, sft_loss, LossConfig};

use super::Recorder;
use crate::error::CliError;

const INSTANCES: u64 = 20;
const SEED: u64 = 0x6772_6164;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, CliError>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
}

fn case(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var, CliError> + 'static) -> Case {
    Case { inputs, build: Box::new(build) }
}

fn forward(build: &Build, inputs: &[Tensor], weight: &Tensor) -> Result<f64, CliError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).data().iter().zip(weight.data()).map(|(a, b)| a * b).sum())
}

/// Relative error of the gradient of `Σ out ⊙ w` for a random fixed `w`.
fn case_error(c: &Case, rng: &mut SeededRng) -> Result<f64, CliError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = c.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (c.build)(&mut tape, &vars)?;
    let weight = rng.normal_tensor(tape.shape(out), 1.0);
    let w = tape.constant(weight.clone());
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.wrt(v).into_data()).collect();
    let mut failed = None;
    let numeric = finite_diff_grad(
        |ps| {
            forward(&c.build, ps, &weight).unwrap_or_else(|e| {
                failed = Some(e);
                f64::NAN
            })
        },
        &c.inputs,
        DEFAULT_STEP,
    );
    if let Some(e) = failed {
        return Err(e);
    }
    let numeric: Vec<f64> = numeric.into_iter().flat_map(Tensor::into_data).collect();
    Ok(rel_err(&analytic, &numeric))
}

fn dims(rng: &mut SeededRng) -> (usize, usize) {
    (rng.between(1, 4), rng.between(1, 5))
}

fn normal(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    rng.normal_tensor(shape, 1.0)
}

fn op_cases() -> Vec<(&'static str, fn(&mut SeededRng) -> Case)> {
    vec![
        ("add", |rng| {
            let (r, c) = dims(rng);
            case(vec![normal(rng, &[r, c]), normal(rng, &[r, c])], |t, v| Ok(t.add(v[0], v[1])?))
        }),
        ("add_broadcast", |rng| {
            let (r, c) = dims(rng);
            case(vec![normal(rng, &[r, c]), normal(rng, &[c])], |t, v| Ok(t.add(v[0], v[1])?))
        }),
        ("sub", |rng| {
            let (r, c) = dims(rng);
            case(vec![normal(rng, &[r, c]), normal(rng, &[r, c])], |t, v| Ok(t.sub(v[0], v[1])?))
        }),
        ("mul", |rng| {
            let (r, c) = dims(rng);
            case(vec![normal(rng, &[r, c]), normal(rng, &[r, c])], |t, v| Ok(t.mul(v[0], v[1])?))
        }),
        ("mul_broadcast", |rng| {
            let (r, c) = dims(rng);
            case(vec![normal(rng, &[2, r, c]), normal(rng, &[r, c])], |t, v| Ok(t.mul(v[0], v[1])?))
        }),
        ("scale", |rng| {
            let (r, c) = dims(rng);
            let k = rng.normal();
            case(vec![normal(rng, &[r, c])], move |t, v| Ok(t.scale(v[0], k)?))
        }),
        ("add_scalar", |rng| {
            let (r, c) = dims(rng);
            let k = rng.normal();
            case(vec![normal(rng, &[r, c])], move |t, v| Ok(t.add_scalar(v[0], k)?))
        }),
        ("matmul", |rng| {
            let (m, k) = dims(rng);
            let n = rng.between(1, 4);
            case(vec![normal(rng, &[m, k]), normal(rng, &[k, n])], |t, v| Ok(t.matmul(v[0], v[1])?))
        }),
        ("sum", |rng| {
            let (r, c) = dims(rng);
            case(vec![normal(rng, &[r, c])], |t, v| Ok(t.sum(v[0])?))
        }),
        ("mean", |rng| {
            let (r, c) = dims(rng);
            case(vec![normal(rng, &[r, c])], |t, v| Ok(t.mean(v[0])?))
        }),
        ("exp", |rng| {
            let (r, c) = dims(rng);
            case(vec![rng.uniform_tensor(&[r, c], -1.5, 1.5)], |t, v| Ok(t.exp(v[0])?))
        }),
        ("log_sigmoid", |rng| {
            let (r, c) = dims(rng);
            case(vec![rng.normal_tensor(&[r, c], 3.0)], |t, v| Ok(t.log_sigmoid(v[0])?))
        }),
        ("silu", |rng| {
            let (r, c) = dims(rng);
            case(vec![rng.normal_tensor(&[r, c], 2.0)], |t, v| Ok(t.silu(v[0])?))
        }),
        ("softmax_lastdim", |rng| {
            let (r, c) = dims(rng);
            case(vec![rng.normal_tensor(&[r, c + 1], 2.0)], |t, v| Ok(t.softmax_lastdim(v[0])?))
        }),
        ("log_softmax_lastdim", |rng| {
            let (r, c) = dims(rng);
            case(vec![rng.normal_tensor(&[r, c + 1], 2.0)], |t, v| Ok(t.log_softmax_lastdim(v[0])?))
        }),
        ("rms_norm", |rng| {
            let (r, c) = dims(rng);
            case(vec![normal(rng, &[r, c + 1]), rng.uniform_tensor(&[c + 1], 0.5, 1.5)], |t, v| {
                Ok(t.rms_norm(v[0], v[1], 1e-6)?)
            })
        }),
        ("gather_rows", |rng| {
            let (r, c) = dims(rng);
            let idx: Vec<usize> = (0..rng.between(1, 6)).map(|_| rng.below(r)).collect();
            case(vec![normal(rng, &[r, c])], move |t, v| Ok(t.gather_rows(v[0], &idx)?))
        }),
        ("pick_last", |rng| {
            let (r, c) = dims(rng);
            let idx: Vec<usize> = (0..r).map(|_| rng.below(c)).collect();
            case(vec![normal(rng, &[r, c])], move |t, v| Ok(t.pick_last(v[0], &idx)?))
        }),
        ("concat_last", |rng| {
            let (r, c) = dims(rng);
            let c2 = rng.between(1, 3);
            case(vec![normal(rng, &[r, c]), normal(rng, &[r, c2]), normal(rng, &[r, 1])], |t, v| {
                Ok(t.concat_last(v)?)
            })
        }),
        ("concat_rows", |rng| {
            let (r, c) = dims(rng);
            let r2 = rng.between(1, 3);
            case(vec![normal(rng, &[r, c]), normal(rng, &[r2, c])], |t, v| Ok(t.concat_rows(v)?))
        }),
        ("reshape", |rng| {
            let (r, c) = dims(rng);
            case(vec![normal(rng, &[r, c])], move |t, v| {
                let flat = t.reshape(v[0], &[c, r])?;
                // Follow with a nonlinearity so slot order matters.
                Ok(t.silu(flat)?)
            })
        }),
        ("rope_1d", |rng| {
            let tlen = rng.between(1, 5);
            let positions: Vec<usize> = (0..tlen).map(|_| rng.below(50)).collect();
            let table = RopeParams::one_d(6).expect("even head_dim").table_1d(&positions).expect("1D params");
            case(vec![normal(rng, &[tlen, 2, 6])], move |t, v| Ok(table.apply_on_tape(t, v[0], 0)?))
        }),
        ("rope_2d", |rng| {
            let n = rng.between(1, 5);
            let rows: Vec<usize> = (0..n).map(|_| rng.below(8)).collect();
            let cols: Vec<usize> = (0..n).map(|_| rng.below(8)).collect();
            let table = RopeParams::two_d(8).expect("head_dim % 4 == 0").table_2d(&rows, &cols).expect("2D params");
            case(vec![normal(rng, &[n, 2, 8])], move |t, v| Ok(table.apply_on_tape(t, v[0], 0)?))
        }),
        ("attention", |rng| {
            let tlen = rng.between(1, 6);
            let n_kv = rng.between(1, 2);
            let n_heads = n_kv * rng.between(1, 2);
            let d = 4;
            let causal = rng.below(2) == 0;
            let window = if rng.below(2) == 0 { Some(rng.between(1, 3)) } else { None };
            let chunk = if rng.below(2) == 0 { Some(rng.between(1, 3)) } else { None };
            let cfg = AttnConfig { n_heads, n_kv_heads: n_kv, head_dim: d, causal, window };
            case(
                vec![normal(rng, &[tlen, n_heads, d]), normal(rng, &[tlen, n_kv, d]), normal(rng, &[tlen, n_kv, d])],
                move |t, v| Ok(attention_on_tape(t, v[0], v[1], v[2], &cfg, chunk)?),
            )
        }),
    ]
}

/// Per-token log-probabilities `[n]` of random target tokens under a
/// softmax over `logits` `[n × V]`.
fn token_logprobs(t: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var, CliError> {
    let lp = t.log_softmax_lastdim(logits)?;
    Ok(t.pick_last(lp, targets)?)
}

fn response_logits(rng: &mut SeededRng, vocab: usize) -> (Tensor, Vec<usize>) {
    let n = rng.between(1, 4);
    (rng.normal_tensor(&[n, vocab], 1.5), (0..n).map(|_| rng.below(vocab)).collect())
}

/// Rewards for a group of `g` that are never constant.
fn spread_rewards(rng: &mut SeededRng, g: usize) -> Vec<f64> {
    let mut r: Vec<f64> = (0..g).map(|_| rng.uniform()).collect();
    r[0] = -1.0;
    r
}

fn loss_cases() -> Vec<(&'static str, fn(&mut SeededRng) -> Case)> {
    vec![
        ("sft_loss", |rng| {
            let (tlen, v) = (rng.between(1, 5), rng.between(2, 6));
            let targets: Vec<usize> = (0..tlen).map(|_| rng.below(v)).collect();
            let mut mask: Vec<bool> = (0..tlen).map(|_| rng.below(3) > 0).collect();
            mask[rng.below(tlen)] = true;
            case(vec![rng.normal_tensor(&[tlen, v], 2.0)], move |t, x| Ok(sft_loss(t, x[0], &targets, &mask)?))
        }),
        ("dpo_loss", |rng| {
            let (lc, tc) = response_logits(rng, 5);
            let (lr, tr) = response_logits(rng, 5);
            let cfg = LossConfig { beta: 0.05 + 1.95 * rng.uniform(), ..LossConfig::default() };
            let (ref_c, ref_r) = (-rng.uniform() * 4.0, -rng.uniform() * 4.0);
            case(vec![lc, lr], move |t, x| {
                let c = token_logprobs(t, x[0], &tc)?;
                let r = token_logprobs(t, x[1], &tr)?;
                Ok(dpo_loss(t, c, r, ref_c, ref_r, &cfg)?)
            })
        }),
        ("grouper_loss", |rng| {
            let cfg = LossConfig::default();
            let adv = grouper_advantages(&spread_rewards(rng, cfg.group_size), &cfg).expect("non-constant rewards");
            let (inputs, targets): (Vec<Tensor>, Vec<Vec<usize>>) =
                (0..cfg.group_size).map(|_| response_logits(rng, 4)).unzip();
            case(inputs, move |t, x| {
                let responses =
                    x.iter().zip(&targets).map(|(&l, tg)| token_logprobs(t, l, tg)).collect::<Result<Vec<_>, _>>()?;
                Ok(grouper_loss(t, &responses, &adv)?)
            })
        }),
        ("grpo_surrogate_loss", |rng| {
            let cfg = LossConfig::default();
            let g = rng.between(2, 5);
            let rewards = spread_rewards(rng, g);
            let adv = grpo_advantages(&[rewards], &cfg).expect("non-constant rewards").advantages.remove(0);
            let (inputs, targets): (Vec<Tensor>, Vec<Vec<usize>>) = (0..g).map(|_| response_logits(rng, 4)).unzip();
            case(inputs, move |t, x| {
                let responses =
                    x.iter().zip(&targets).map(|(&l, tg)| token_logprobs(t, l, tg)).collect::<Result<Vec<_>, _>>()?;
                Ok(grpo_surrogate_loss(t, &responses, &adv)?)
            })
        }),
    ]
}

/// SFT + λ·MTP loss of the toy model on a random image-caption example,
/// probed at two coordinates of every parameter tensor.
fn model_loss_error(rng: &mut SeededRng) -> Result<f64, CliError> {
    let cfg = ModelConfig::toy();
    let model = Model::init(cfg.clone(), rng.next_u64())?;
    let side = cfg.patch_size * cfg.merge_factor;
    let (h, w) = (side * rng.between(1, 2), side * rng.between(1, 2));
    let image = ImageBatch::new(rng.uniform_tensor(&[h, w, 3], 0.0, 1.0))?;
    let mut seq = TokenSeq::from_ids(&[BOS])?;
    seq.push_image(h / side, w / side);
    for _ in 0..rng.between(2, 5) {
        seq.push_text(rng.below(256) as u32)?;
    }
    seq.push_text(EOS)?;
    let loss_mask = seq.ids().iter().map(|&id| id != BOS && id != IMAGE_SLOT).collect();
    let ex = TrainExample { seq, image: Some(image), loss_mask };

    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let lv = example_loss_on_tape(&mut tape, &bound, &cfg, &ex)?;
    let grads = tape.backward(lv.total)?;
    let params = model.params().tensors().to_vec();
    let coords: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(p, t)| [(p, rng.below(t.numel())), (p, rng.below(t.numel()))]).collect();
    let analytic: Vec<f64> = coords.iter().map(|&(p, i)| grads.wrt(bound.vars()[p]).data()[i]).collect();
    let mut work = model.clone();
    let numeric = finite_diff_coords(
        |ps| {
            work.params_mut().tensors_mut().clone_from_slice(ps);
            work.loss(&ex).map_or(f64::NAN, |l| l.0)
        },
        &params,
        &coords,
        DEFAULT_STEP,
    );
    Ok(rel_err(&analytic, &numeric))
}

fn worst(errors: impl Iterator<Item = Result<f64, CliError>>) -> Result<f64, CliError> {
    let mut max = 0.0f64;
    for e in errors {
        let e = e?;
        // NaN must surface as a failure rather than vanish in `max`.
        if e.is_nan() {
            return Ok(f64::NAN);
        }
        max = max.max(e);
    }
    Ok(max)
}

pub(super) fn run() -> Vec<super::CheckOutcome> {
    let mut rec = Recorder::new("gradients");
    for (k, (name, make)) in op_cases().into_iter().chain(loss_cases()).enumerate() {
        let observed = worst((0..INSTANCES).map(|i| {
            let mut rng = SeededRng::derive(SEED + k as u64, i);
            let c = make(&mut rng);
            case_error(&c, &mut rng)
        }));
        rec.record(format!("{name} ({INSTANCES} instances)"), GRAD_REL_TOL, observed);
    }
    let observed = worst((0..INSTANCES).map(|i| model_loss_error(&mut SeededRng::derive(SEED, 1000 + i))));
    rec.record(format!("sft_plus_mtp_model_loss ({INSTANCES} instances)"), GRAD_REL_TOL, observed);
    rec.finish()
}
