//! Grouped-query attention, dense and blockwise.
//!
//! Queries are `[T × n_heads × d]`, keys and values `[T × n_kv_heads × d]`.
//! Query head `h` reads KV head `h / group_size`.

use serde::{Deserialize, Serialize};

use super::LayerError;
use crate::numcore::{kernels, BackwardRule, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub causal: bool,
    /// Keys further than `window` positions from the query are masked.
    pub window: Option<usize>,
}

impl AttnConfig {
    pub fn validate(&self) -> Result<(), LayerError> {
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(LayerError::InvalidConfig(
                "attention dimensions must be positive".into(),
            ));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(LayerError::IndivisibleHeads {
                n_heads: self.n_heads,
                n_kv_heads: self.n_kv_heads,
            });
        }
        if self.window == Some(0) {
            return Err(LayerError::InvalidConfig(
                "window must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn kv_head(&self, head: usize) -> usize {
        head / self.group_size()
    }

    /// Whether query position `i` may attend to key position `j`.
    pub fn visible(&self, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        match self.window {
            Some(w) => i.abs_diff(j) <= w,
            None => true,
        }
    }
}

/// Which layers of a stack use the sliding window. Every `global_every`-th
/// layer (1-based) attends globally; the rest use `window`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridPattern {
    pub window: Option<usize>,
    pub global_every: usize,
}

impl Default for HybridPattern {
    fn default() -> Self {
        Self {
            window: None,
            global_every: 4,
        }
    }
}

impl HybridPattern {
    pub fn window_for(&self, layer: usize) -> Option<usize> {
        if self.global_every > 0 && (layer + 1) % self.global_every == 0 {
            None
        } else {
            self.window
        }
    }
}

#[derive(Clone, Copy)]
struct Dims {
    t: usize,
    h: usize,
    hkv: usize,
    d: usize,
}

fn dims(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttnConfig) -> Result<Dims, LayerError> {
    cfg.validate()?;
    let shape_ok = |t: &Tensor, heads: usize| {
        t.ndim() == 3 && t.shape()[1] == heads && t.shape()[2] == cfg.head_dim
    };
    if !shape_ok(q, cfg.n_heads) || !shape_ok(k, cfg.n_kv_heads) || !shape_ok(v, cfg.n_kv_heads) {
        return Err(LayerError::ShapeMismatch(format!(
            "q {:?}, k {:?}, v {:?} against {} heads / {} kv heads of width {}",
            q.shape(),
            k.shape(),
            v.shape(),
            cfg.n_heads,
            cfg.n_kv_heads,
            cfg.head_dim
        )));
    }
    let t = q.shape()[0];
    if k.shape()[0] != t || v.shape()[0] != t {
        return Err(LayerError::ShapeMismatch(format!(
            "sequence lengths differ: q {t}, k {}, v {}",
            k.shape()[0],
            v.shape()[0]
        )));
    }
    Ok(Dims {
        t,
        h: cfg.n_heads,
        hkv: cfg.n_kv_heads,
        d: cfg.head_dim,
    })
}

fn q_row(q: &[f64], dm: Dims, i: usize, h: usize) -> &[f64] {
    let base = (i * dm.h + h) * dm.d;
    &q[base..base + dm.d]
}

fn kv_row(kv: &[f64], dm: Dims, j: usize, g: usize) -> &[f64] {
    let base = (j * dm.hkv + g) * dm.d;
    &kv[base..base + dm.d]
}

/// Attention probabilities of query `i`, head `h` over all keys, written into
/// `probs` (masked keys get exactly 0).
fn row_probs(
    q: &[f64],
    k: &[f64],
    dm: Dims,
    cfg: &AttnConfig,
    h: usize,
    i: usize,
    probs: &mut [f64],
) -> Result<(), LayerError> {
    let scale = 1.0 / (dm.d as f64).sqrt();
    let g = cfg.kv_head(h);
    let qi = q_row(q, dm, i, h);
    let mut max = f64::NEG_INFINITY;
    for (j, p) in probs.iter_mut().enumerate() {
        *p = if cfg.visible(i, j) {
            kernels::dot(qi, kv_row(k, dm, j, g)) * scale
        } else {
            f64::NEG_INFINITY
        };
        max = max.max(*p);
    }
    if max == f64::NEG_INFINITY {
        return Err(LayerError::EmptyAttentionRow { head: h, row: i });
    }
    let mut z = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        z += *p;
    }
    probs.iter_mut().for_each(|p| *p /= z);
    Ok(())
}

/// Softmax attention weights `[n_heads × T × T]`; masked entries are 0.
pub fn attention_weights(q: &Tensor, k: &Tensor, cfg: &AttnConfig) -> Result<Tensor, LayerError> {
    let dm = dims(q, k, k, cfg)?;
    let mut out = vec![0.0; dm.h * dm.t * dm.t];
    for h in 0..dm.h {
        for i in 0..dm.t {
            let base = (h * dm.t + i) * dm.t;
            row_probs(
                q.data(),
                k.data(),
                dm,
                cfg,
                h,
                i,
                &mut out[base..base + dm.t],
            )?;
        }
    }
    Ok(Tensor::new(vec![dm.h, dm.t, dm.t], out)?)
}

/// Dense grouped-query attention.
pub fn gqa_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttnConfig,
) -> Result<Tensor, LayerError> {
    let dm = dims(q, k, v, cfg)?;
    let mut out = vec![0.0; dm.t * dm.h * dm.d];
    let mut probs = vec![0.0; dm.t];
    for h in 0..dm.h {
        let g = cfg.kv_head(h);
        for i in 0..dm.t {
            row_probs(q.data(), k.data(), dm, cfg, h, i, &mut probs)?;
            let base = (i * dm.h + h) * dm.d;
            let o = &mut out[base..base + dm.d];
            for (j, &p) in probs.iter().enumerate() {
                if p != 0.0 {
                    for (x, &vv) in o.iter_mut().zip(kv_row(v.data(), dm, j, g)) {
                        *x += p * vv;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(q.shape().to_vec(), out)?)
}

/// Attention computed over key/value blocks of `chunk` positions with a
/// running maximum and running denominator, so no full score row is ever
/// materialized. Equal to [`gqa_attention`] up to rounding.
pub fn chunked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttnConfig,
    chunk: usize,
) -> Result<Tensor, LayerError> {
    if chunk == 0 {
        return Err(LayerError::InvalidConfig("chunk must be at least 1".into()));
    }
    let dm = dims(q, k, v, cfg)?;
    let scale = 1.0 / (dm.d as f64).sqrt();
    let mut out = vec![0.0; dm.t * dm.h * dm.d];
    let mut scores = vec![0.0; chunk];
    let mut acc = vec![0.0; dm.d];
    for h in 0..dm.h {
        let g = cfg.kv_head(h);
        for i in 0..dm.t {
            let qi = q_row(q.data(), dm, i, h);
            let mut run_max = f64::NEG_INFINITY;
            let mut denom = 0.0;
            acc.iter_mut().for_each(|a| *a = 0.0);
            for start in (0..dm.t).step_by(chunk) {
                let end = (start + chunk).min(dm.t);
                let mut block_max = f64::NEG_INFINITY;
                for j in start..end {
                    let s = if cfg.visible(i, j) {
                        kernels::dot(qi, kv_row(k.data(), dm, j, g)) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                    scores[j - start] = s;
                    block_max = block_max.max(s);
                }
                if block_max == f64::NEG_INFINITY {
                    continue;
                }
                let new_max = run_max.max(block_max);
                let rescale = (run_max - new_max).exp();
                denom *= rescale;
                acc.iter_mut().for_each(|a| *a *= rescale);
                for j in start..end {
                    let s = scores[j - start];
                    if s == f64::NEG_INFINITY {
                        continue;
                    }
                    let w = (s - new_max).exp();
                    denom += w;
                    for (a, &vv) in acc.iter_mut().zip(kv_row(v.data(), dm, j, g)) {
                        *a += w * vv;
                    }
                }
                run_max = new_max;
            }
            if denom == 0.0 {
                return Err(LayerError::EmptyAttentionRow { head: h, row: i });
            }
            let base = (i * dm.h + h) * dm.d;
            for (o, a) in out[base..base + dm.d].iter_mut().zip(&acc) {
                *o = a / denom;
            }
        }
    }
    Ok(Tensor::new(q.shape().to_vec(), out)?)
}

/// Differentiable attention. With `chunk` set the forward pass runs
/// blockwise; the backward pass recomputes probabilities one row at a time.
pub fn attention_on_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttnConfig,
    chunk: Option<usize>,
) -> Result<Var, LayerError> {
    let (tq, tk, tv) = (tape.value(q), tape.value(k), tape.value(v));
    let out = match chunk {
        Some(c) if c < tq.shape()[0] => chunked_attention(tq, tk, tv, cfg, c)?,
        _ => gqa_attention(tq, tk, tv, cfg)?,
    };
    Ok(tape.custom(&[q, k, v], out, Box::new(AttentionRule { cfg: *cfg }))?)
}

struct AttentionRule {
    cfg: AttnConfig,
}

impl BackwardRule for AttentionRule {
    fn name(&self) -> &'static str {
        "gqa_attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let dm = dims(q, k, v, &self.cfg).expect("validated in forward");
        let scale = 1.0 / (dm.d as f64).sqrt();
        let mut dq = vec![0.0; q.numel()];
        let mut dk = vec![0.0; k.numel()];
        let mut dv = vec![0.0; v.numel()];
        let mut probs = vec![0.0; dm.t];
        let mut dscore = vec![0.0; dm.t];
        for h in 0..dm.h {
            let g = self.cfg.kv_head(h);
            for i in 0..dm.t {
                row_probs(q.data(), k.data(), dm, &self.cfg, h, i, &mut probs)
                    .expect("validated in forward");
                let obase = (i * dm.h + h) * dm.d;
                let go = &grad_out[obase..obase + dm.d];
                let mut inner = 0.0;
                for j in 0..dm.t {
                    let dp = if probs[j] != 0.0 {
                        kernels::dot(go, kv_row(v.data(), dm, j, g))
                    } else {
                        0.0
                    };
                    dscore[j] = dp;
                    inner += probs[j] * dp;
                }
                let qi = q_row(q.data(), dm, i, h);
                for j in 0..dm.t {
                    let p = probs[j];
                    if p == 0.0 {
                        continue;
                    }
                    let ds = p * (dscore[j] - inner) * scale;
                    let kbase = (j * dm.hkv + g) * dm.d;
                    for c in 0..dm.d {
                        dq[obase + c] += ds * k.data()[kbase + c];
                        dk[kbase + c] += ds * qi[c];
                        dv[kbase + c] += p * go[c];
                    }
                }
            }
        }
        vec![
            needs[0].then_some(dq),
            needs[1].then_some(dk),
            needs[2].then_some(dv),
        ]
    }
}
