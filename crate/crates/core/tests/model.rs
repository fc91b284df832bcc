use exms_core::model::{
    encode, example_loss_on_tape, generate, patchify, unpatchify, ImageBatch, Model, ModelConfig,
    ModelError, Patches, SamplingParams, TokenId, TokenSeq, TrainExample, BOS, EOS, IMAGE_SLOT,
};
use exms_core::numcore::{
    finite_diff_coords, rel_err, SeededRng, Tape, Tensor, DEFAULT_STEP, GRAD_REL_TOL,
};

fn random_image(rng: &mut SeededRng, h: usize, w: usize) -> ImageBatch {
    ImageBatch::new(rng.uniform_tensor(&[h, w, 3], 0.0, 1.0)).unwrap()
}

/// BOS, visual slots for an `h×w` image (if any), then `text`.
fn prompt(cfg: &ModelConfig, image: Option<(usize, usize)>, text: &str) -> TokenSeq {
    let mut seq = TokenSeq::from_ids(&[BOS]).unwrap();
    if let Some((h, w)) = image {
        let side = cfg.patch_size * cfg.merge_factor;
        seq.push_image(h / side, w / side);
    }
    for id in encode(text) {
        seq.push_text(id).unwrap();
    }
    seq
}

fn example(cfg: &ModelConfig, rng: &mut SeededRng, text: &str) -> TrainExample {
    let img = random_image(rng, 8, 8);
    let mut seq = prompt(cfg, Some((8, 8)), text);
    seq.push_text(EOS).unwrap();
    let loss_mask = seq
        .ids()
        .iter()
        .map(|&id| id != IMAGE_SLOT && id != BOS)
        .collect();
    TrainExample {
        seq,
        image: Some(img),
        loss_mask,
    }
}

fn loss_with(model: &Model, params: &[Tensor], ex: &TrainExample) -> f64 {
    let mut m = model.clone();
    m.params_mut().tensors_mut().clone_from_slice(params);
    m.loss(ex).unwrap().0
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let cfg = ModelConfig::toy();
    let model = Model::init(cfg.clone(), 11).unwrap();
    let mut rng = SeededRng::new(5);
    let ex = example(&cfg, &mut rng, "2 red");

    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let l = example_loss_on_tape(&mut tape, &bound, &cfg, &ex).unwrap();
    assert!(l.mtp.is_some());
    let grads = tape.backward(l.total).unwrap();

    // Three coordinates from every parameter tensor, so each group is probed.
    let params = model.params().tensors().to_vec();
    let mut coords = Vec::new();
    for (p, t) in params.iter().enumerate() {
        for _ in 0..3 {
            coords.push((p, rng.below(t.numel())));
        }
    }
    let numeric = finite_diff_coords(
        |ps| loss_with(&model, ps, &ex),
        &params,
        &coords,
        DEFAULT_STEP,
    );
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(p, i)| grads.wrt(bound.vars()[p]).data()[i])
        .collect();
    let err = rel_err(&analytic, &numeric);
    assert!(err <= GRAD_REL_TOL, "rel err {err}");

    // Per group, to localise a failure.
    for (p, name) in model.params().names().iter().enumerate() {
        let idx: Vec<usize> = (0..coords.len()).filter(|&c| coords[c].0 == p).collect();
        let a: Vec<f64> = idx.iter().map(|&c| analytic[c]).collect();
        let n: Vec<f64> = idx.iter().map(|&c| numeric[c]).collect();
        let scale = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        let abs: f64 = a
            .iter()
            .zip(&n)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(
            abs <= GRAD_REL_TOL * scale.max(1e-8),
            "{name}: {a:?} vs {n:?}"
        );
    }
}

#[test]
fn mtp_weight_zero_gives_main_loss() {
    let cfg = ModelConfig {
        mtp_weight: 0.0,
        ..ModelConfig::toy()
    };
    let model = Model::init(cfg.clone(), 2).unwrap();
    let ex = example(&cfg, &mut SeededRng::new(1), "abc");
    let (total, main, mtp) = model.loss(&ex).unwrap();
    assert_eq!(total, main);
    assert!(mtp.unwrap() > 0.0);
}

#[test]
fn mtp_positions_and_errors() {
    let cfg = ModelConfig::toy();
    let model = Model::init(cfg.clone(), 2).unwrap();
    let seq = TokenSeq::from_ids(&[BOS, 65, 66]).unwrap();
    let ex = TrainExample {
        seq: seq.clone(),
        image: None,
        loss_mask: vec![false, true, true],
    };
    let (t, m) = ex.mtp_targets();
    assert_eq!((t, m), (vec![66], vec![true]));
    assert!(model.mtp_loss(&ex).unwrap() > 0.0);
    let short = TrainExample {
        seq: seq.prefix(2),
        image: None,
        loss_mask: vec![false, true],
    };
    assert_eq!(
        model.mtp_loss(&short),
        Err(ModelError::SequenceTooShort { len: 2, min: 3 })
    );
    assert_eq!(
        model.without_mtp().mtp_loss(&ex),
        Err(ModelError::MtpDisabled)
    );
}

#[test]
fn decoder_is_causal_at_every_position() {
    let cfg = ModelConfig::toy();
    let model = Model::init(cfg.clone(), 3).unwrap();
    let ids: Vec<TokenId> = [BOS].into_iter().chain(encode("hello wor")).collect();
    let base = model
        .decoder_forward(&TokenSeq::from_ids(&ids).unwrap(), None)
        .unwrap();
    let v = cfg.vocab_size;
    for t in 1..ids.len() {
        let mut changed = ids.clone();
        changed[t] = if changed[t] == 120 { 121 } else { 120 };
        let out = model
            .decoder_forward(&TokenSeq::from_ids(&changed).unwrap(), None)
            .unwrap();
        assert_eq!(&out.data()[..t * v], &base.data()[..t * v], "position {t}");
        assert_ne!(&out.data()[t * v..], &base.data()[t * v..]);
    }
}

#[test]
fn slot_count_must_match() {
    let cfg = ModelConfig::toy();
    let model = Model::init(cfg.clone(), 3).unwrap();
    let seq = prompt(&cfg, Some((8, 8)), "x");
    assert_eq!(
        model.decoder_forward(&seq, None),
        Err(ModelError::SlotCountMismatch {
            slots: 1,
            embeds: 0
        })
    );
    let vis = model
        .visual_embeds(&random_image(&mut SeededRng::new(0), 16, 8))
        .unwrap();
    assert_eq!(vis.shape(), &[2, cfg.d_model]);
    assert_eq!(
        model.decoder_forward(&seq, Some(&vis)),
        Err(ModelError::SlotCountMismatch {
            slots: 1,
            embeds: 2
        })
    );
}

#[test]
fn empty_visual_input_matches_text_path_bitwise() {
    let cfg = ModelConfig::toy();
    let model = Model::init(cfg.clone(), 4).unwrap();
    let seq = prompt(&cfg, None, "abc");
    assert_eq!(
        model.decoder_forward(&seq, None).unwrap().shape(),
        &[4, cfg.vocab_size]
    );
    let a = model.decoder_forward(&seq, None).unwrap();
    let b = model.decoder_forward(&seq, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sequence_length_counts_text_and_visual_tokens() {
    let cfg = ModelConfig::toy();
    let seq = prompt(&cfg, Some((16, 16)), "ab");
    assert_eq!(seq.visual_count(), cfg.visual_tokens(16, 16));
    assert_eq!(seq.len(), seq.text_count() + seq.visual_count());
    assert_eq!(seq.text_pos(), &(0..seq.len()).collect::<Vec<_>>()[..]);
}

#[test]
fn encoder_output_follows_coordinates_not_order() {
    let cfg = ModelConfig::toy();
    let model = Model::init(cfg.clone(), 6).unwrap();
    let mut rng = SeededRng::new(8);
    let img = random_image(&mut rng, 16, 12);
    let patches = patchify(&img, &cfg).unwrap();
    let base = model.encode_patches(&patches).unwrap();
    let mut order: Vec<usize> = (0..patches.len()).collect();
    rng.shuffle(&mut order);
    let out = model.encode_patches(&patches.permuted(&order)).unwrap();
    let d = cfg.d_model;
    for (new, &old) in order.iter().enumerate() {
        for c in 0..d {
            assert!((out.data()[new * d + c] - base.data()[old * d + c]).abs() <= 1e-10);
        }
    }
}

#[test]
fn zero_output_projections_leave_patch_embeddings() {
    let cfg = ModelConfig::toy();
    let mut model = Model::init(cfg.clone(), 6).unwrap();
    for l in 0..cfg.n_layers_enc {
        for w in ["wo", "w_down"] {
            let t = model
                .params_mut()
                .get_mut(&format!("enc.layers.{l}.{w}"))
                .unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let img = random_image(&mut SeededRng::new(2), 8, 8);
    let patches = patchify(&img, &cfg).unwrap();
    let p = model.params();
    let emb = patches
        .data
        .matmul(p.get("enc.patch_embed.w").unwrap())
        .unwrap();
    let b = p.get("enc.patch_embed.b").unwrap();
    let out = model.encode_image(&img).unwrap();
    for (i, (&o, &e)) in out.data().iter().zip(emb.data()).enumerate() {
        assert!((o - (e + b.data()[i % cfg.d_model])).abs() < 1e-12);
    }
}

#[test]
fn patch_round_trip() {
    let cfg = ModelConfig {
        patch_size: 16,
        ..ModelConfig::toy()
    };
    let img = random_image(&mut SeededRng::new(1), 32, 16);
    let p: Patches = patchify(&img, &cfg).unwrap();
    assert_eq!((p.rows.clone(), p.cols.clone()), (vec![0, 1], vec![0, 0]));
    assert_eq!(unpatchify(&p, 32, 16).unwrap(), img);
    let odd = random_image(&mut SeededRng::new(1), 20, 16);
    assert!(matches!(
        patchify(&odd, &cfg),
        Err(ModelError::IndivisibleImage { .. })
    ));
}

#[test]
fn merger_identity_and_mixing() {
    let d = 32;
    let cfg = ModelConfig {
        merge_factor: 1,
        mlp_hidden: 2 * d,
        ..ModelConfig::toy()
    };
    let mut model = Model::init(cfg.clone(), 1).unwrap();
    // silu(x) − silu(−x) = x, so [I, −I] then [I; −I] is the identity.
    let w1 = Tensor::from_fn(&[d, 2 * d], |k| {
        let (i, j) = (k / (2 * d), k % (2 * d));
        if j == i {
            1.0
        } else if j == i + d {
            -1.0
        } else {
            0.0
        }
    });
    let w2 = Tensor::from_fn(&[2 * d, d], |k| {
        let (i, j) = (k / d, k % d);
        if i == j {
            1.0
        } else if i == j + d {
            -1.0
        } else {
            0.0
        }
    });
    model.params_mut().insert("merger.w1", w1);
    model.params_mut().insert("merger.w2", w2);
    let enc = SeededRng::new(3).normal_tensor(&[6, d], 1.0);
    let rows = vec![0, 0, 0, 1, 1, 1];
    let cols = vec![0, 1, 2, 0, 1, 2];
    let out = model.merge_tokens(&enc, &rows, &cols).unwrap();
    assert!(out.max_abs_diff(&enc) < 1e-12);

    let cfg = ModelConfig::toy();
    let model = Model::init(cfg.clone(), 1).unwrap();
    let enc = SeededRng::new(3).normal_tensor(&[4, cfg.d_model], 1.0);
    let (rows, cols) = (vec![0, 0, 1, 1], vec![0, 1, 0, 1]);
    let base = model.merge_tokens(&enc, &rows, &cols).unwrap();
    assert_eq!(base.shape(), &[1, cfg.d_model]);
    for r in 0..4 {
        let mut e = enc.clone();
        e.data_mut()[r * cfg.d_model] += 0.5;
        assert!(
            model
                .merge_tokens(&e, &rows, &cols)
                .unwrap()
                .max_abs_diff(&base)
                > 0.0
        );
    }
    let enc = SeededRng::new(3).normal_tensor(&[64, cfg.d_model], 1.0);
    let rows: Vec<usize> = (0..64).map(|i| i / 8).collect();
    let cols: Vec<usize> = (0..64).map(|i| i % 8).collect();
    assert_eq!(
        model.merge_tokens(&enc, &rows, &cols).unwrap().shape()[0],
        16
    );
    assert!(matches!(
        model.merge_tokens(
            &enc.reshape(&[64, cfg.d_model]).unwrap(),
            &vec![0; 64],
            &(0..64).collect::<Vec<_>>()
        ),
        Err(ModelError::IndivisibleGrid(_))
    ));
}

#[test]
fn generation_ignores_mtp_head_and_seed_when_greedy() {
    let cfg = ModelConfig::toy();
    let model = Model::init(cfg.clone(), 9).unwrap();
    let stripped = model.without_mtp();
    let img = random_image(&mut SeededRng::new(4), 8, 8);
    let seq = prompt(&cfg, Some((8, 8)), "a");
    let sp = SamplingParams {
        max_tokens: 6,
        seed: 1,
        ..SamplingParams::default()
    };
    assert_eq!(
        generate(&model, &seq, Some(&img), &sp).unwrap(),
        generate(&stripped, &seq, Some(&img), &sp).unwrap()
    );
    let g0 = generate(
        &model,
        &seq,
        Some(&img),
        &SamplingParams {
            seed: 0,
            ..SamplingParams::greedy(6)
        },
    )
    .unwrap();
    let g1 = generate(
        &model,
        &seq,
        Some(&img),
        &SamplingParams {
            seed: 77,
            ..SamplingParams::greedy(6)
        },
    )
    .unwrap();
    assert_eq!(g0, g1);
    assert!(g0.iter().all(|&t| t != IMAGE_SLOT));
    assert!(matches!(
        generate(&model, &seq, None, &sp),
        Err(ModelError::SlotCountMismatch {
            slots: 1,
            embeds: 0
        })
    ));
}
