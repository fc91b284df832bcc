use exms_core::layers::{attention_weights, chunked_attention, gqa_attention, AttnConfig, LayerError};
use exms_core::numcore::{SeededRng, Tensor};

use super::{max_abs_diff, Recorder};
use crate::error::CliError;

const SEED: u64 = 0x6174_746e;

/// Per-head softmax attention written directly from the definition, with
/// KV heads repeated `n_heads / n_kv_heads` times.
fn dense_oracle(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttnConfig) -> Vec<f64> {
    let (t, h, d) = (q.shape()[0], cfg.n_heads, cfg.head_dim);
    let kvh = cfg.n_kv_heads;
    let rep = h / kvh;
    let at = |x: &Tensor, heads: usize, i: usize, hh: usize, c: usize| x.data()[(i * heads + hh) * d + c];
    let mut out = vec![0.0; t * h * d];
    for head in 0..h {
        let g = head / rep;
        for i in 0..t {
            let allowed: Vec<usize> = (0..t)
                .filter(|&j| !(cfg.causal && j > i) && cfg.window.is_none_or(|w| i.abs_diff(j) <= w))
                .collect();
            let scores: Vec<f64> = allowed
                .iter()
                .map(|&j| (0..d).map(|c| at(q, h, i, head, c) * at(k, kvh, j, g, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                out[(i * h + head) * d + c] = allowed.iter().zip(&e).map(|(&j, w)| w / z * at(v, kvh, j, g, c)).sum();
            }
        }
    }
    out
}

fn qkv(rng: &mut SeededRng, t: usize, cfg: &AttnConfig) -> (Tensor, Tensor, Tensor) {
    let d = cfg.head_dim;
    (
        rng.normal_tensor(&[t, cfg.n_heads, d], 1.0),
        rng.normal_tensor(&[t, cfg.n_kv_heads, d], 1.0),
        rng.normal_tensor(&[t, cfg.n_kv_heads, d], 1.0),
    )
}

fn random_cfg(rng: &mut SeededRng, n_heads: usize, n_kv_heads: usize) -> AttnConfig {
    let window = if rng.below(2) == 0 { Some(rng.between(1, 4)) } else { None };
    AttnConfig { n_heads, n_kv_heads, head_dim: 4 * rng.between(1, 2), causal: rng.below(2) == 0, window }
}

fn oracle_error(rng: &mut SeededRng, kv_of: fn(usize) -> usize) -> Result<f64, CliError> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let h = [1, 2, 4][rng.below(3)];
        let cfg = random_cfg(rng, h, kv_of(h));
        let t = rng.between(1, 9);
        let (q, k, v) = qkv(rng, t, &cfg);
        worst = worst.max(max_abs_diff(gqa_attention(&q, &k, &v, &cfg)?.data(), &dense_oracle(&q, &k, &v, &cfg)));
    }
    Ok(worst)
}

/// Row `i` of `[T × H × d]`.
fn row(x: &Tensor, i: usize) -> &[f64] {
    let w = x.numel() / x.shape()[0];
    &x.data()[i * w..(i + 1) * w]
}

/// Perturbs k and v at each position `j` in turn and returns the largest
/// change seen at any position `i` that must not see `j`.
fn leak(rng: &mut SeededRng, cfg: &AttnConfig, t: usize) -> Result<f64, CliError> {
    let (q, k, v) = qkv(rng, t, cfg);
    let base = gqa_attention(&q, &k, &v, cfg)?;
    let mut worst = 0.0f64;
    let w = k.numel() / t;
    for j in 0..t {
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for x in &mut k2.data_mut()[j * w..(j + 1) * w] {
            *x += 3.0;
        }
        for x in &mut v2.data_mut()[j * w..(j + 1) * w] {
            *x -= 2.0;
        }
        let out = gqa_attention(&q, &k2, &v2, cfg)?;
        for i in 0..t {
            let hidden = (cfg.causal && j > i) || cfg.window.is_some_and(|w| i.abs_diff(j) > w);
            if hidden {
                worst = worst.max(max_abs_diff(row(&out, i), row(&base, i)));
            }
        }
    }
    Ok(worst)
}

pub(super) fn run() -> Vec<super::CheckOutcome> {
    let mut rec = Recorder::new("attention");
    let mut rng = SeededRng::new(SEED);

    rec.record("group_size_1_equals_mha", 1e-12, oracle_error(&mut rng, |h| h));
    rec.record("multi_query_matches_oracle", 1e-12, oracle_error(&mut rng, |_| 1));
    rec.record("grouped_matches_oracle", 1e-12, oracle_error(&mut rng, |h| (h / 2).max(1)));

    let rows = (|| -> Result<f64, CliError> {
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let cfg = random_cfg(&mut rng, 4, 2);
            let t = rng.between(1, 12);
            let (q, k, _) = qkv(&mut rng, t, &cfg);
            let p = attention_weights(&q, &k, &cfg)?;
            for r in p.data().chunks(t) {
                worst = worst.max((r.iter().sum::<f64>() - 1.0).abs());
            }
        }
        Ok(worst)
    })();
    rec.record("weights_rows_sum_to_one", 1e-12, rows);

    let causal = (|| -> Result<f64, CliError> {
        let mut worst = 0.0f64;
        for t in [1, 5, 12] {
            let cfg = AttnConfig { n_heads: 4, n_kv_heads: 2, head_dim: 4, causal: true, window: None };
            worst = worst.max(leak(&mut rng, &cfg, t)?);
        }
        Ok(worst)
    })();
    rec.record("causal_future_perturbation", 0.0, causal);

    let window = (|| -> Result<f64, CliError> {
        let mut worst = 0.0f64;
        for w in [1, 2, 4] {
            for causal in [false, true] {
                let cfg = AttnConfig { n_heads: 2, n_kv_heads: 1, head_dim: 4, causal, window: Some(w) };
                worst = worst.max(leak(&mut rng, &cfg, 10)?);
            }
        }
        Ok(worst)
    })();
    rec.record("window_outside_perturbation", 0.0, window);

    let wide = (|| -> Result<f64, CliError> {
        let mut worst = 0.0f64;
        for causal in [false, true] {
            let t = 9;
            let plain = AttnConfig { n_heads: 4, n_kv_heads: 2, head_dim: 4, causal, window: None };
            let (q, k, v) = qkv(&mut rng, t, &plain);
            let a = gqa_attention(&q, &k, &v, &plain)?;
            for w in [t, t + 3] {
                let b = gqa_attention(&q, &k, &v, &AttnConfig { window: Some(w), ..plain })?;
                worst = worst.max(max_abs_diff(a.data(), b.data()));
            }
        }
        Ok(worst)
    })();
    rec.record("window_at_least_t_equals_unwindowed", 0.0, wide);

    let single = (|| -> Result<f64, CliError> {
        let cfg = AttnConfig { n_heads: 4, n_kv_heads: 2, head_dim: 4, causal: true, window: None };
        let (q, k, v) = qkv(&mut rng, 1, &cfg);
        let out = gqa_attention(&q, &k, &v, &cfg)?;
        let expect: Vec<f64> = (0..4).flat_map(|h| row(&v, 0)[(h / 2) * 4..(h / 2 + 1) * 4].to_vec()).collect();
        Ok(max_abs_diff(out.data(), &expect))
    })();
    rec.record("single_key_returns_value", 1e-15, single);

    let bad = AttnConfig { n_heads: 3, n_kv_heads: 2, head_dim: 4, causal: false, window: None };
    let (q, k, v) = qkv(&mut rng, 2, &bad);
    let indivisible = matches!(gqa_attention(&q, &k, &v, &bad), Err(LayerError::IndivisibleHeads { .. }));
    rec.record("indivisible_heads_rejected", 0.0, Ok(if indivisible { 0.0 } else { 1.0 }));

    for t in [5usize, 64, 257] {
        let chunked = (|| -> Result<f64, CliError> {
            let mut worst = 0.0f64;
            for causal in [false, true] {
                let cfg = AttnConfig { n_heads: 4, n_kv_heads: 2, head_dim: 8, causal, window: None };
                let (q, k, v) = qkv(&mut rng, t, &cfg);
                let dense = gqa_attention(&q, &k, &v, &cfg)?;
                for chunk in [1, 2, (t / 2).max(1), t, t + 5] {
                    let c = chunked_attention(&q, &k, &v, &cfg, chunk)?;
                    worst = worst.max(max_abs_diff(c.data(), dense.data()));
                }
            }
            Ok(worst)
        })();
        rec.record(format!("chunked_equals_dense_t{t}"), 1e-10, chunked);
    }

    let windowed_chunks = (|| -> Result<f64, CliError> {
        let mut worst = 0.0f64;
        for chunk in [1, 3, 7, 16] {
            let cfg = AttnConfig { n_heads: 2, n_kv_heads: 2, head_dim: 4, causal: true, window: Some(5) };
            let (q, k, v) = qkv(&mut rng, 64, &cfg);
            let c = chunked_attention(&q, &k, &v, &cfg, chunk)?;
            worst = worst.max(max_abs_diff(c.data(), gqa_attention(&q, &k, &v, &cfg)?.data()));
        }
        Ok(worst)
    })();
    rec.record("chunked_windowed_equals_dense", 1e-10, windowed_chunks);
    rec.finish()
}
