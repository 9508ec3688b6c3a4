//! Toy encoder-decoder transformer and checkpoints.
//!
//! Pre-norm residual blocks with RMS normalization, rotary self-attention
//! in both stacks, cross-attention over the final encoder states and a
//! SwiGLU feed-forward in every layer. Input embedding and output
//! projection are separate `[vocab, hidden]` matrices.

mod batch;
mod forward;
mod io;

pub use batch::Batch;
pub use forward::{batch_loss, bind_params, eval_examples, forward, forward_batch, frozen_params, loss, EvalTotals, Params};
pub use io::{load_checkpoint, save_checkpoint, MANIFEST_FILE, BLOB_FILE};

use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::special::SPECIAL_COUNT;
use crate::error::{bail, Result};
use crate::tensor::{Precision, Real, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
    pub precision: Precision,
}

impl ModelConfig {
    /// Config with `head_dim = hidden / n_heads`.
    pub fn new(n_enc_layers: usize, n_dec_layers: usize, hidden: usize, ffn: usize, n_heads: usize, vocab_size: usize) -> Result<Self> {
        if n_heads == 0 || !hidden.is_multiple_of(n_heads) {
            bail!(Config, "hidden {hidden} is not divisible by {n_heads} heads");
        }
        let cfg = ModelConfig {
            n_enc_layers,
            n_dec_layers,
            hidden,
            ffn,
            n_heads,
            head_dim: hidden / n_heads,
            vocab_size,
            max_enc_len: 1024,
            max_dec_len: 1024,
            precision: Precision::F32,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Desk-scale default keeping a 1:2 encoder:decoder depth ratio.
    pub fn toy_default() -> Self {
        Self::new(6, 12, 128, 344, 8, 4096).expect("default config is valid")
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("hidden", self.hidden),
            ("ffn", self.ffn),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("max_enc_len", self.max_enc_len),
            ("max_dec_len", self.max_dec_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            bail!(Config, "{name} must be positive");
        }
        if !self.head_dim.is_multiple_of(2) {
            bail!(Config, "head_dim {} must be even for rotary encoding", self.head_dim);
        }
        if self.vocab_size < SPECIAL_COUNT as usize {
            bail!(Config, "vocab_size {} is below the {SPECIAL_COUNT} reserved tokens", self.vocab_size);
        }
        Ok(())
    }

    /// Width of the attention projections, `n_heads * head_dim`.
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (h, a, f, v) = (self.hidden, self.attn_width(), self.ffn, self.vocab_size);
        let embeddings = 2 * v * h;
        let enc_layer = 4 * h * a + 3 * h * f + 2 * h;
        let dec_layer = 8 * h * a + 3 * h * f + 3 * h;
        embeddings + self.n_enc_layers * enc_layer + self.n_dec_layers * dec_layer + 2 * h
    }

    /// Every tensor name and shape this config requires, sorted by name.
    pub fn tensor_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (h, a, f, v) = (self.hidden, self.attn_width(), self.ffn, self.vocab_size);
        let mut m = BTreeMap::new();
        m.insert("embed".into(), vec![v, h]);
        m.insert("lm_head".into(), vec![v, h]);
        m.insert("enc.final_norm".into(), vec![h]);
        m.insert("dec.final_norm".into(), vec![h]);
        let attn = |m: &mut BTreeMap<String, Vec<usize>>, p: String| {
            for w in ["q", "k", "v"] {
                m.insert(format!("{p}.{w}"), vec![h, a]);
            }
            m.insert(format!("{p}.o"), vec![a, h]);
        };
        let ffn = |m: &mut BTreeMap<String, Vec<usize>>, p: String| {
            m.insert(format!("{p}.gate"), vec![h, f]);
            m.insert(format!("{p}.up"), vec![h, f]);
            m.insert(format!("{p}.down"), vec![f, h]);
        };
        for i in 0..self.n_enc_layers {
            m.insert(format!("enc.{i}.attn_norm"), vec![h]);
            attn(&mut m, format!("enc.{i}.attn"));
            m.insert(format!("enc.{i}.ffn_norm"), vec![h]);
            ffn(&mut m, format!("enc.{i}.ffn"));
        }
        for i in 0..self.n_dec_layers {
            m.insert(format!("dec.{i}.self_norm"), vec![h]);
            attn(&mut m, format!("dec.{i}.self"));
            m.insert(format!("dec.{i}.cross_norm"), vec![h]);
            attn(&mut m, format!("dec.{i}.cross"));
            m.insert(format!("dec.{i}.ffn_norm"), vec![h]);
            ffn(&mut m, format!("dec.{i}.ffn"));
        }
        m
    }
}

/// Column range of each head inside the Q/K/V outputs (equivalently the
/// row range inside O).
pub fn head_ranges(n_heads: usize, head_dim: usize) -> Vec<Range<usize>> {
    (0..n_heads).map(|h| h * head_dim..(h + 1) * head_dim).collect()
}

/// Prefixes of every attention module (`enc.0.attn`, `dec.3.cross`, ...).
pub fn attention_modules(cfg: &ModelConfig) -> Vec<String> {
    let mut out: Vec<String> = (0..cfg.n_enc_layers).map(|i| format!("enc.{i}.attn")).collect();
    for i in 0..cfg.n_dec_layers {
        out.push(format!("dec.{i}.self"));
        out.push(format!("dec.{i}.cross"));
    }
    out
}

/// Prefixes of every feed-forward module.
pub fn ffn_modules(cfg: &ModelConfig) -> Vec<String> {
    let enc = (0..cfg.n_enc_layers).map(|i| format!("enc.{i}.ffn"));
    enc.chain((0..cfg.n_dec_layers).map(|i| format!("dec.{i}.ffn"))).collect()
}

/// Config, named tensors and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint<F = f32> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<F>>,
    pub metadata: BTreeMap<String, String>,
}

impl<F: Real> ModelCheckpoint<F> {
    /// Scaled-normal initialization, deterministic per seed.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.precision != F::PRECISION {
            bail!(Config, "config precision {:?} does not match element type {:?}", config.precision, F::PRECISION);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.tensor_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<F> = if shape.len() == 1 {
                vec![F::one(); n]
            } else {
                let residual_out = name.ends_with(".o") || name.ends_with(".down");
                let layers = if name.starts_with("enc.") { config.n_enc_layers } else { config.n_dec_layers };
                let scale = if residual_out { 1.0 / (2.0 * layers as f64).sqrt() } else { 1.0 };
                (0..n).map(|_| F::of(normal.sample(&mut rng) * scale)).collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        let mut metadata = BTreeMap::new();
        metadata.insert("seed".into(), seed.to_string());
        metadata.insert("stage".into(), "init".into());
        Ok(ModelCheckpoint { config, tensors, metadata })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<F>> {
        match self.tensors.get(name) {
            Some(t) => Ok(t),
            None => bail!(Format, "missing tensor {name}"),
        }
    }

    /// Every required tensor present with the shape the config implies,
    /// and nothing else.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.tensor_shapes();
        for (name, shape) in &expected {
            let t = self.tensor(name)?;
            if t.shape() != shape.as_slice() {
                bail!(Format, "tensor {name} has shape {:?}, config implies {shape:?}", t.shape());
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            bail!(Format, "unexpected tensor {extra}");
        }
        Ok(())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.to_string(), value.into());
    }

    pub fn cast<G: Real>(&self) -> ModelCheckpoint<G> {
        ModelCheckpoint {
            config: self.config.clone().with_precision(G::PRECISION),
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            metadata: self.metadata.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig::new(2, 4, 64, 172, 4, 512).unwrap()
    }

    #[test]
    fn param_count_matches_tensors() {
        let m = ModelCheckpoint::<f32>::build(small(), 0).unwrap();
        assert_eq!(m.param_count(), m.config.param_count());
        m.validate().unwrap();
    }

    #[test]
    fn hidden_must_divide_heads() {
        assert!(matches!(ModelConfig::new(1, 1, 30, 8, 4, 512), Err(crate::Error::Config(_))));
        assert!(ModelConfig::new(1, 1, 32, 8, 4, 100).is_err());
    }

    #[test]
    fn seeds_are_deterministic() {
        let a = ModelCheckpoint::<f32>::build(small(), 7).unwrap();
        let b = ModelCheckpoint::<f32>::build(small(), 7).unwrap();
        let c = ModelCheckpoint::<f32>::build(small(), 8).unwrap();
        assert_eq!(a, b);
        assert!(a.tensors.iter().any(|(k, t)| c.tensors[k] != *t));
    }

    #[test]
    fn head_ranges_partition_width() {
        let r = head_ranges(4, 16);
        assert_eq!(r.first().unwrap().start, 0);
        assert_eq!(r.last().unwrap().end, 64);
        assert!(r.windows(2).all(|w| w[0].end == w[1].start));
    }
}
