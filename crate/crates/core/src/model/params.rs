use std::collections::HashMap;

use super::{ModelConfig, ModelError};
use crate::numcore::{SeededRng, Tape, Tensor, Var};

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        let kept: Vec<(String, Tensor)> = self
            .names
            .drain(..)
            .zip(self.tensors.drain(..))
            .filter(|(n, _)| !n.starts_with(prefix))
            .collect();
        self.index.clear();
        for (n, t) in kept {
            self.insert(n, t);
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.names.iter().any(|n| n.starts_with(prefix))
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Tape handles for a [`ParamStore`] binding, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn block_params(
    store: &mut ParamStore,
    rng: &mut SeededRng,
    cfg: &ModelConfig,
    prefix: &str,
    depth: usize,
) {
    let d = cfg.d_model;
    let q = cfg.n_heads * cfg.head_dim;
    let kv = cfg.kv_dim();
    let f = cfg.mlp_hidden;
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    let out_scale = 1.0 / (2.0 * depth.max(1) as f64).sqrt();
    store.insert(format!("{prefix}.attn_norm"), Tensor::ones(&[d]));
    store.insert(format!("{prefix}.wq"), rng.normal_tensor(&[d, q], fan(d)));
    store.insert(format!("{prefix}.wk"), rng.normal_tensor(&[d, kv], fan(d)));
    store.insert(format!("{prefix}.wv"), rng.normal_tensor(&[d, kv], fan(d)));
    store.insert(
        format!("{prefix}.wo"),
        rng.normal_tensor(&[q, d], fan(q) * out_scale),
    );
    store.insert(format!("{prefix}.mlp_norm"), Tensor::ones(&[d]));
    store.insert(
        format!("{prefix}.w_gate"),
        rng.normal_tensor(&[d, f], fan(d)),
    );
    store.insert(format!("{prefix}.w_up"), rng.normal_tensor(&[d, f], fan(d)));
    store.insert(
        format!("{prefix}.w_down"),
        rng.normal_tensor(&[f, d], fan(f) * out_scale),
    );
}

/// Random initial weights for every parameter group of `cfg`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = SeededRng::new(seed);
    let mut s = ParamStore::new();
    let d = cfg.d_model;
    let fan = |n: usize| 1.0 / (n as f64).sqrt();

    let p = cfg.patch_dim();
    s.insert("enc.patch_embed.w", rng.normal_tensor(&[p, d], fan(p)));
    s.insert("enc.patch_embed.b", Tensor::zeros(&[d]));
    for l in 0..cfg.n_layers_enc {
        block_params(
            &mut s,
            &mut rng,
            cfg,
            &format!("enc.layers.{l}"),
            cfg.n_layers_enc,
        );
    }

    let m_in = cfg.merge_factor * cfg.merge_factor * d;
    let m_hidden = cfg.mlp_hidden;
    s.insert("merger.w1", rng.normal_tensor(&[m_in, m_hidden], fan(m_in)));
    s.insert("merger.b1", Tensor::zeros(&[m_hidden]));
    s.insert(
        "merger.w2",
        rng.normal_tensor(&[m_hidden, d], fan(m_hidden)),
    );
    s.insert("merger.b2", Tensor::zeros(&[d]));

    s.insert(
        "dec.tok_embed",
        rng.normal_tensor(&[cfg.vocab_size, d], 1.0),
    );
    for l in 0..cfg.n_layers_dec {
        block_params(
            &mut s,
            &mut rng,
            cfg,
            &format!("dec.layers.{l}"),
            cfg.n_layers_dec,
        );
    }
    s.insert("dec.final_norm", Tensor::ones(&[d]));
    s.insert(
        "dec.lm_head",
        rng.normal_tensor(&[d, cfg.vocab_size], fan(d)),
    );

    if cfg.mtp_enabled {
        s.insert("mtp.norm_hidden", Tensor::ones(&[d]));
        s.insert("mtp.norm_embed", Tensor::ones(&[d]));
        s.insert("mtp.proj", rng.normal_tensor(&[2 * d, d], fan(2 * d)));
        block_params(&mut s, &mut rng, cfg, "mtp.block", 1);
        s.insert("mtp.final_norm", Tensor::ones(&[d]));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_covers_mtp() {
        let cfg = ModelConfig::toy();
        let a = init_params(&cfg, 3);
        assert_eq!(a, init_params(&cfg, 3));
        assert_ne!(a, init_params(&cfg, 4));
        assert!(a.has_prefix("mtp."));
        let mut stripped = a.clone();
        stripped.remove_prefix("mtp.");
        assert!(!stripped.has_prefix("mtp."));
        assert!(stripped.get("dec.lm_head").is_some());
        assert_eq!(
            stripped.len() + a.names().iter().filter(|n| n.starts_with("mtp.")).count(),
            a.len()
        );
    }
}
