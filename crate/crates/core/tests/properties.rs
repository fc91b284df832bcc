//! Property tests over the invariants of attention, RoPE, the post-training
//! objectives, the box convention and the counting data.

use exms_core::datagen::{
    count_objects, denormalize_bbox, make_caption, normalize_bbox, parse_caption, render_scene,
    sample_counting_dataset, BBox, Color, CountTargets, CountingConfig, ObjectSpec, PixelBox,
    ShapeClass,
};
use exms_core::layers::{
    attention_on_tape, attention_weights, chunked_attention, gqa_attention, rope_1d_apply,
    rope_2d_apply, AttnConfig, RopeParams,
};
use exms_core::numcore::{
    finite_diff_grad, rel_err, SeededRng, Tape, Tensor, DEFAULT_STEP, GRAD_REL_TOL,
};
use exms_core::posttrain::{
    dpo_loss, grouper_advantages, grpo_advantages, LossConfig, PostTrainError, PreferencePair,
};
use proptest::prelude::*;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn attn_cfg() -> impl Strategy<Value = AttnConfig> {
    (
        1usize..=3,
        1usize..=3,
        1usize..=4,
        any::<bool>(),
        prop::option::of(1usize..6),
    )
        .prop_map(|(kv, group, half, causal, window)| AttnConfig {
            n_heads: kv * group,
            n_kv_heads: kv,
            head_dim: 2 * half,
            causal,
            window,
        })
}

fn qkv(rng: &mut SeededRng, t: usize, cfg: &AttnConfig) -> (Tensor, Tensor, Tensor) {
    (
        rng.normal_tensor(&[t, cfg.n_heads, cfg.head_dim], 1.0),
        rng.normal_tensor(&[t, cfg.n_kv_heads, cfg.head_dim], 1.0),
        rng.normal_tensor(&[t, cfg.n_kv_heads, cfg.head_dim], 1.0),
    )
}

fn rewards(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

fn spread(r: &[f64]) -> bool {
    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo > 1e-3
}

fn row_slice(x: &Tensor, rows: usize) -> Vec<f64> {
    let stride = x.numel() / x.shape()[0];
    x.data()[..rows * stride].to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_are_distributions(cfg in attn_cfg(), t in 1usize..10, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let (q, k, _) = qkv(&mut rng, t, &cfg);
        let w = attention_weights(&q, &k, &cfg).unwrap();
        for row in w.data().chunks(t) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        for h in 0..cfg.n_heads {
            for i in 0..t {
                for j in 0..t {
                    let masked = (cfg.causal && j > i) || cfg.window.is_some_and(|win| i.abs_diff(j) > win);
                    if masked {
                        prop_assert_eq!(w.data()[(h * t + i) * t + j], 0.0);
                    }
                }
            }
        }
    }

    /// Causal attention over a prefix equals the leading rows of attention
    /// over the full sequence.
    #[test]
    fn causal_attention_ignores_the_future(cfg in attn_cfg(), t in 2usize..12, seed in any::<u64>()) {
        let cfg = AttnConfig { causal: true, ..cfg };
        let mut rng = SeededRng::new(seed);
        let (q, k, v) = qkv(&mut rng, t, &cfg);
        let full = gqa_attention(&q, &k, &v, &cfg).unwrap();
        let p = 1 + rng.below(t - 1);
        let cut = |x: &Tensor| {
            let mut s = x.shape().to_vec();
            s[0] = p;
            Tensor::new(s, row_slice(x, p)).unwrap()
        };
        let prefix = gqa_attention(&cut(&q), &cut(&k), &cut(&v), &cfg).unwrap();
        prop_assert_eq!(prefix.data(), &row_slice(&full, p)[..]);
    }

    #[test]
    fn chunked_matches_dense(cfg in attn_cfg(), t in 1usize..40, chunk in 1usize..50, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let (q, k, v) = qkv(&mut rng, t, &cfg);
        let dense = gqa_attention(&q, &k, &v, &cfg).unwrap();
        let chunked = chunked_attention(&q, &k, &v, &cfg, chunk).unwrap();
        prop_assert!(max_diff(dense.data(), chunked.data()) <= 1e-10);
    }

    #[test]
    fn attention_gradients_match_finite_differences(cfg in attn_cfg(), t in 1usize..6, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let (q, k, v) = qkv(&mut rng, t, &cfg);
        let w = rng.normal_tensor(q.shape(), 1.0);
        let objective = |tape: &mut Tape, xs: &[Tensor]| {
            let vars: Vec<_> = xs.iter().map(|x| tape.param(x.clone())).collect();
            let out = attention_on_tape(tape, vars[0], vars[1], vars[2], &cfg, None).unwrap();
            let wv = tape.constant(w.clone());
            let prod = tape.mul(out, wv).unwrap();
            (vars, tape.sum(prod).unwrap())
        };
        let inputs = [q, k, v];
        let mut tape = Tape::new();
        let (vars, loss) = objective(&mut tape, &inputs);
        let grads = tape.backward(loss).unwrap();
        let numeric = finite_diff_grad(
            |xs| {
                let mut t = Tape::new();
                let (_, l) = objective(&mut t, xs);
                t.value(l).item()
            },
            &inputs,
            DEFAULT_STEP,
        );
        for (var, fd) in vars.iter().zip(&numeric) {
            prop_assert!(rel_err(grads.wrt(*var).data(), fd.data()) <= GRAD_REL_TOL);
        }
    }

    #[test]
    fn rope_preserves_norms(t in 1usize..8, quarters in 1usize..5, seed in any::<u64>()) {
        let d = 4 * quarters;
        let mut rng = SeededRng::new(seed);
        let x = rng.normal_tensor(&[t, d], 1.0);
        let pos: Vec<usize> = (0..t).map(|_| rng.below(5000)).collect();
        let rows: Vec<usize> = (0..t).map(|_| rng.below(100)).collect();
        let cols: Vec<usize> = (0..t).map(|_| rng.below(100)).collect();
        let norms = |y: &Tensor| y.data().chunks(d).map(|r| dot(r, r).sqrt()).collect::<Vec<_>>();
        let a = rope_1d_apply(&x, &pos, &RopeParams::one_d(d).unwrap()).unwrap();
        let b = rope_2d_apply(&x, &rows, &cols, &RopeParams::two_d(d).unwrap()).unwrap();
        prop_assert!(max_diff(&norms(&a), &norms(&x)) <= 1e-12);
        prop_assert!(max_diff(&norms(&b), &norms(&x)) <= 1e-12);
    }

    #[test]
    fn rope_scores_depend_on_offset_only(p in 0usize..3000, shift in 0usize..3000, delta in 0usize..200, seed in any::<u64>()) {
        let d = 16;
        let params = RopeParams::one_d(d).unwrap();
        let mut rng = SeededRng::new(seed);
        let (q, k) = (rng.normal_tensor(&[1, d], 1.0), rng.normal_tensor(&[1, d], 1.0));
        let score = |a: usize, b: usize| {
            dot(rope_1d_apply(&q, &[a], &params).unwrap().data(), rope_1d_apply(&k, &[b], &params).unwrap().data())
        };
        prop_assert!((score(p + delta, p) - score(shift + delta, shift)).abs() <= 1e-10);
    }

    #[test]
    fn grouper_advantages_span_unit_interval(r in rewards(2..=8), s in 0.01f64..100.0, b in -100.0f64..100.0) {
        prop_assume!(spread(&r));
        let cfg = LossConfig { group_size: r.len(), ..LossConfig::default() };
        let a = grouper_advantages(&r, &cfg).unwrap();
        let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((lo + 1.0).abs() <= 1e-12 && (hi - 1.0).abs() <= 1e-12);
        let moved: Vec<f64> = r.iter().map(|x| s * x + b).collect();
        prop_assert!(max_diff(&a, &grouper_advantages(&moved, &cfg).unwrap()) <= 1e-9);
        // Order is preserved.
        for i in 0..r.len() {
            for j in 0..r.len() {
                if r[i] < r[j] {
                    prop_assert!(a[i] <= a[j]);
                }
            }
        }
    }

    #[test]
    fn grouper_rejects_constant_groups(v in -10.0f64..10.0, g in 2usize..8) {
        let degenerate = matches!(grouper_advantages(&vec![v; g], &LossConfig { group_size: g, ..LossConfig::default() }), Err(PostTrainError::Degenerate { .. }));
        prop_assert!(degenerate);
    }

    #[test]
    fn dpo_is_log_two_at_reference(chosen in rewards(1..=6), rejected in rewards(1..=6), beta in 0.01f64..2.0) {
        let lp = |v: &[f64]| v.iter().map(|x| -x.abs() / 10.0).collect::<Vec<_>>();
        let (c, r) = (lp(&chosen), lp(&rejected));
        let pair = PreferencePair {
            prompt_len: 1,
            chosen_logprobs_policy: c.clone(),
            chosen_logprobs_ref: c,
            rejected_logprobs_policy: r.clone(),
            rejected_logprobs_ref: r,
        };
        let cfg = LossConfig { beta, ..LossConfig::default() };
        let (loss, gc, gr) = pair.loss_and_grad(&cfg).unwrap();
        prop_assert!((loss - std::f64::consts::LN_2).abs() <= 1e-12);
        prop_assert!(gc.iter().all(|&g| g < 0.0));
        prop_assert!(gr.iter().all(|&g| g > 0.0));
    }

    #[test]
    fn dpo_gradient_matches_finite_differences(nc in 1usize..5, nr in 1usize..5, beta in 0.05f64..1.0, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let cfg = LossConfig { beta, ..LossConfig::default() };
        let inputs = [rng.uniform_tensor(&[nc], -4.0, 0.0), rng.uniform_tensor(&[nr], -4.0, 0.0)];
        let (rc, rr) = (-3.0 * rng.uniform(), -3.0 * rng.uniform());
        let mut tape = Tape::new();
        let c = tape.param(inputs[0].clone());
        let r = tape.param(inputs[1].clone());
        let loss = dpo_loss(&mut tape, c, r, rc, rr, &cfg).unwrap();
        let grads = tape.backward(loss).unwrap();
        let numeric = finite_diff_grad(
            |xs| {
                let mut t = Tape::new();
                let (c, r) = (t.param(xs[0].clone()), t.param(xs[1].clone()));
                let l = dpo_loss(&mut t, c, r, rc, rr, &cfg).unwrap();
                t.value(l).item()
            },
            &inputs,
            DEFAULT_STEP,
        );
        prop_assert!(rel_err(grads.wrt(c).data(), numeric[0].data()) <= GRAD_REL_TOL);
        prop_assert!(rel_err(grads.wrt(r).data(), numeric[1].data()) <= GRAD_REL_TOL);
    }

    #[test]
    fn grpo_keeps_exactly_the_varied_groups(groups in prop::collection::vec(prop_oneof![
        rewards(2..=6),
        (-5.0f64..5.0, 2usize..6).prop_map(|(v, g)| vec![v; g]),
    ], 1..6)) {
        let expect: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].iter().any(|&x| x != groups[i][0])).collect();
        match grpo_advantages(&groups, &LossConfig::default()) {
            Ok(out) => {
                prop_assert_eq!(&out.surviving, &expect);
                for a in &out.advantages {
                    prop_assert!(a.iter().sum::<f64>().abs() <= 1e-12 * a.len() as f64 * 50.0);
                }
            }
            Err(e) => {
                prop_assert_eq!(e, PostTrainError::EmptyBatch);
                prop_assert!(expect.is_empty());
            }
        }
    }

    #[test]
    fn bbox_round_trip_is_within_half_a_bin(w in 1usize..2048, h in 1usize..2048, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let (x1, y1) = (rng.below(w), rng.below(h));
        let px = PixelBox::new(x1, y1, rng.between(x1 + 1, w), rng.between(y1 + 1, h));
        let b = normalize_bbox(px, w, h).unwrap();
        let [bx1, by1, bx2, by2] = b.coords();
        prop_assert!(bx1 < bx2 && by1 < by2 && bx2 <= 1000 && by2 <= 1000);
        let back = denormalize_bbox(b, w, h);
        for (o, g, dim) in [(px.x1, back.x1, w), (px.y1, back.y1, h), (px.x2, back.x2, w), (px.y2, back.y2, h)] {
            prop_assert!(o.abs_diff(g) as f64 <= dim as f64 / 2000.0 + 0.5);
        }
        prop_assert!(BBox::new(bx2, by1, bx1, by2).is_err());
    }

    #[test]
    fn caption_round_trips(counts in prop::collection::btree_map(
        (0usize..3, 0usize..3).prop_map(|(s, c)| (ShapeClass::ALL[s], Color::ALL[c])),
        1usize..12,
        0..9,
    )) {
        let counts: CountTargets = counts;
        prop_assert_eq!(parse_caption(&make_caption(&counts)).unwrap(), counts);
    }

    #[test]
    fn rendering_is_deterministic(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = SeededRng::new(seed);
        let specs: Vec<ObjectSpec> = (0..n)
            .map(|_| ObjectSpec {
                class: ShapeClass::ALL[rng.below(3)],
                color: Color::ALL[rng.below(3)],
                width: rng.between(6, 12),
                height: rng.between(6, 12),
                position: None,
            })
            .collect();
        let a = render_scene(&specs, 64, 64, seed).unwrap();
        let b = render_scene(&specs, 64, 64, seed).unwrap();
        prop_assert_eq!(&a.image, &b.image);
        prop_assert_eq!(&a.objects, &b.objects);
        prop_assert_eq!(count_objects(&a.objects).values().sum::<usize>(), n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn counting_cells_are_balanced(n in 9usize..120, seed in any::<u64>()) {
        let cfg = CountingConfig::new(n, seed);
        let records = sample_counting_dataset(&cfg).unwrap();
        prop_assert_eq!(records.len(), n);
        let mut cells = vec![0usize; cfg.cells()];
        for r in &records {
            let bucket = cfg.buckets.iter().position(|b| b.contains(r.objects.len())).unwrap();
            let class = cfg.classes.iter().position(|&c| c == r.objects[0].class).unwrap();
            cells[bucket * cfg.classes.len() + class] += 1;
        }
        let ideal = n as f64 / cfg.cells() as f64;
        prop_assert!(cells.iter().all(|&c| (c as f64 - ideal).abs() <= 1.0));
    }
}
