use std::collections::BTreeMap;

use super::{Batch, ModelCheckpoint, ModelConfig};
use crate::corpus::special::PAD;
use crate::denoising::DenoisedExample;
use crate::error::{bail, Result};
use crate::tensor::{AttentionSpec, Real, Tape, Tensor, Var};

/// Tape handles for every named parameter.
pub type Params = BTreeMap<String, Var>;

/// Records every checkpoint tensor as a leaf. Leaves inherit each
/// tensor's `requires_grad` flag.
pub fn bind_params<F: Real>(tape: &mut Tape<F>, model: &ModelCheckpoint<F>) -> Params {
    model.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect()
}

/// Records every checkpoint tensor as a constant, for inference.
pub fn frozen_params<F: Real>(tape: &mut Tape<F>, model: &ModelCheckpoint<F>) -> Params {
    model.tensors.iter().map(|(k, t)| (k.clone(), tape.constant(t))).collect()
}

struct Ctx<'a, F: Real> {
    tape: &'a mut Tape<F>,
    params: &'a Params,
    cfg: &'a ModelConfig,
}

impl<F: Real> Ctx<'_, F> {
    fn p(&self, name: &str) -> Result<Var> {
        match self.params.get(name) {
            Some(&v) => Ok(v),
            None => bail!(Format, "missing tensor {name}"),
        }
    }

    fn spec(&self, batch: usize, q_len: usize, k_len: usize, causal: bool, key_mask: Option<Vec<bool>>) -> AttentionSpec {
        AttentionSpec { batch, q_len, k_len, n_heads: self.cfg.n_heads, head_dim: self.cfg.head_dim, causal, key_mask }
    }

    /// Self-attention (`kv = None`, rotary on Q and K) or cross-attention
    /// over `kv` (no rotary: encoder and decoder positions are unrelated).
    fn attention(&mut self, prefix: &str, x: Var, kv: Option<Var>, positions: &[usize], spec: AttentionSpec) -> Result<Var> {
        let (h, d) = (self.cfg.n_heads, self.cfg.head_dim);
        let src = kv.unwrap_or(x);
        let q = self.tape.matmul(x, self.p(&format!("{prefix}.q"))?)?;
        let k = self.tape.matmul(src, self.p(&format!("{prefix}.k"))?)?;
        let v = self.tape.matmul(src, self.p(&format!("{prefix}.v"))?)?;
        let (q, k) = if kv.is_none() {
            (self.tape.rotary(q, positions, h, d)?, self.tape.rotary(k, positions, h, d)?)
        } else {
            (q, k)
        };
        let a = self.tape.attention(q, k, v, spec)?;
        self.tape.matmul(a, self.p(&format!("{prefix}.o"))?)
    }

    fn ffn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gate = self.tape.matmul(x, self.p(&format!("{prefix}.gate"))?)?;
        let up = self.tape.matmul(x, self.p(&format!("{prefix}.up"))?)?;
        let act = self.tape.silu(gate);
        let h = self.tape.mul(act, up)?;
        self.tape.matmul(h, self.p(&format!("{prefix}.down"))?)
    }

    fn residual(&mut self, x: Var, norm: &str, f: impl FnOnce(&mut Self, Var) -> Result<Var>) -> Result<Var> {
        let n = self.tape.rmsnorm(x, self.p(norm)?)?;
        let y = f(self, n)?;
        self.tape.add(x, y)
    }
}

/// Decoder logits `[batch * dec_len, vocab]` for a batch.
pub fn forward_batch<F: Real>(tape: &mut Tape<F>, params: &Params, cfg: &ModelConfig, batch: &Batch) -> Result<Var> {
    if batch.enc_len > cfg.max_enc_len || batch.dec_len > cfg.max_dec_len {
        bail!(
            Input,
            "lengths {}/{} exceed model maxima {}/{}",
            batch.enc_len,
            batch.dec_len,
            cfg.max_enc_len,
            cfg.max_dec_len
        );
    }
    let mut cx = Ctx { tape, params, cfg };
    let (b, te, td) = (batch.size, batch.enc_len, batch.dec_len);
    let enc_pos: Vec<usize> = (0..b * te).map(|r| r % te).collect();
    let dec_pos: Vec<usize> = (0..b * td).map(|r| r % td).collect();
    let key_mask: Vec<bool> = batch.enc_ids.iter().map(|&t| t != PAD as usize).collect();
    let embed = cx.p("embed")?;

    let mut x = cx.tape.embedding(embed, &batch.enc_ids)?;
    for i in 0..cfg.n_enc_layers {
        let spec = cx.spec(b, te, te, false, Some(key_mask.clone()));
        x = cx.residual(x, &format!("enc.{i}.attn_norm"), |cx, n| {
            cx.attention(&format!("enc.{i}.attn"), n, None, &enc_pos, spec)
        })?;
        x = cx.residual(x, &format!("enc.{i}.ffn_norm"), |cx, n| cx.ffn(&format!("enc.{i}.ffn"), n))?;
    }
    let memory = cx.tape.rmsnorm(x, cx.p("enc.final_norm")?)?;

    let mut y = cx.tape.embedding(embed, &batch.dec_input)?;
    for i in 0..cfg.n_dec_layers {
        let spec = cx.spec(b, td, td, true, None);
        y = cx.residual(y, &format!("dec.{i}.self_norm"), |cx, n| {
            cx.attention(&format!("dec.{i}.self"), n, None, &dec_pos, spec)
        })?;
        let spec = cx.spec(b, td, te, false, Some(key_mask.clone()));
        y = cx.residual(y, &format!("dec.{i}.cross_norm"), |cx, n| {
            cx.attention(&format!("dec.{i}.cross"), n, Some(memory), &dec_pos, spec)
        })?;
        y = cx.residual(y, &format!("dec.{i}.ffn_norm"), |cx, n| cx.ffn(&format!("dec.{i}.ffn"), n))?;
    }
    let out = cx.tape.rmsnorm(y, cx.p("dec.final_norm")?)?;
    cx.tape.matmul_nt(out, cx.p("lm_head")?)
}

/// Masked mean cross-entropy of a batch, recorded on the tape.
pub fn batch_loss<F: Real>(tape: &mut Tape<F>, params: &Params, cfg: &ModelConfig, batch: &Batch) -> Result<Var> {
    let logits = forward_batch(tape, params, cfg, batch)?;
    tape.cross_entropy(logits, &batch.dec_target, &batch.loss_mask)
}

/// Logits `[dec_len, vocab]` for one unpadded example.
pub fn forward<F: Real>(model: &ModelCheckpoint<F>, enc_ids: &[u32], dec_input_ids: &[u32]) -> Result<Tensor<F>> {
    let batch = Batch::single(enc_ids, dec_input_ids)?;
    if let Some(&t) = enc_ids.iter().chain(dec_input_ids).find(|&&t| t as usize >= model.config.vocab_size) {
        bail!(Input, "token id {t} out of range for vocabulary of {}", model.config.vocab_size);
    }
    let mut tape = Tape::new();
    let params = frozen_params(&mut tape, model);
    let logits = forward_batch(&mut tape, &params, &model.config, &batch)?;
    Ok(tape.value(logits).clone())
}

/// Mean negative log-likelihood of `targets` under `logits[n, vocab]`
/// over the positions where `loss_mask` is set.
pub fn loss<F: Real>(logits: &Tensor<F>, targets: &[u32], loss_mask: &[bool]) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let out = tape.cross_entropy(l, &targets, loss_mask)?;
    Ok(tape.value(out).clone())
}

/// Summed loss over a set of examples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalTotals {
    pub nll: f64,
    pub tokens: usize,
}

impl EvalTotals {
    /// Token-weighted mean negative log-likelihood.
    pub fn mean(&self) -> Result<f64> {
        if self.tokens == 0 {
            bail!(Contract, "no loss tokens evaluated");
        }
        Ok(self.nll / self.tokens as f64)
    }
}

/// Evaluates examples in batches of `batch_size` without recording
/// gradients.
pub fn eval_examples<F: Real>(model: &ModelCheckpoint<F>, examples: &[DenoisedExample], batch_size: usize) -> Result<EvalTotals> {
    let mut totals = EvalTotals::default();
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::from_examples(chunk)?;
        if !batch.has_loss() {
            continue;
        }
        let mut tape = Tape::new();
        let params = frozen_params(&mut tape, model);
        let l = batch_loss(&mut tape, &params, &model.config, &batch)?;
        let n = batch.loss_mask.iter().filter(|&&m| m).count();
        totals.nll += tape.value(l).data()[0].f64() * n as f64;
        totals.tokens += n;
    }
    Ok(totals)
}
