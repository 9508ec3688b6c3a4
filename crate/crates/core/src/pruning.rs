//! Checkpoint-to-checkpoint compression: whole layers, structured widths
//! (hidden channels, attention heads, FFN channels) and vocabulary rows.
//!
//! Every operation only removes entries; each surviving scalar is copied
//! unchanged from its source tensor.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::special::SPECIAL_COUNT;
use crate::corpus::{Document, TokenFrequency, Tokenizer, Vocab};
use crate::denoising::{DenoisedExample, NoiserSpec};
use crate::error::{bail, Result};
use crate::model::{attention_modules, eval_examples, ffn_modules, head_ranges, ModelCheckpoint};
use crate::packing::{ul2_source_len, TokenStream};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPrunePlan {
    pub enc_drop: Vec<usize>,
    pub dec_drop: Vec<usize>,
    pub stage_label: String,
}

fn check_drop(drop: &[usize], n: usize, stack: &str) -> Result<()> {
    if drop.windows(2).any(|w| w[0] >= w[1]) {
        bail!(Plan, "{stack} drop list {drop:?} is not sorted and unique");
    }
    if let Some(&i) = drop.iter().find(|&&i| i >= n) {
        bail!(Plan, "{stack} layer {i} out of range for {n} layers");
    }
    if !drop.is_empty() && drop.len() == n {
        bail!(Plan, "plan drops every {stack} layer");
    }
    Ok(())
}

impl LayerPrunePlan {
    pub fn validate(&self, n_enc: usize, n_dec: usize) -> Result<()> {
        check_drop(&self.enc_drop, n_enc, "encoder")?;
        check_drop(&self.dec_drop, n_dec, "decoder")
    }

    pub fn is_empty(&self) -> bool {
        self.enc_drop.is_empty() && self.dec_drop.is_empty()
    }
}

/// Sorted gaps between consecutive picks, smallest first.
fn sorted_gaps(picks: &[usize]) -> Vec<usize> {
    let mut g: Vec<usize> = picks.windows(2).map(|w| w[1] - w[0]).collect();
    g.sort_unstable();
    g
}

/// Picks `n_drop` layers from the unprotected band
/// `protect_low..n_layers - protect_high`, spreading them out: the sorted
/// gap vector is maximized lexicographically (so the minimum gap first),
/// ties going to the lexicographically smallest index list. A single
/// drop goes to the band center.
pub fn select_layers(n_layers: usize, n_drop: usize, protect_low: usize, protect_high: usize) -> Result<Vec<usize>> {
    let reserved = protect_low + protect_high + 1;
    if n_drop + reserved > n_layers {
        bail!(Config, "cannot drop {n_drop} of {n_layers} layers protecting {protect_low} low and {protect_high} high");
    }
    let (lo, hi) = (protect_low, n_layers - protect_high - 1);
    match n_drop {
        0 => return Ok(Vec::new()),
        1 => return Ok(vec![(lo + hi) / 2]),
        _ => {}
    }
    // Depth-first over index lists in lexicographic order, so a later
    // list only replaces the incumbent when its gaps are strictly better.
    let mut best: Option<(Vec<usize>, Vec<usize>)> = None;
    let mut picks = Vec::with_capacity(n_drop);
    fn extend(
        picks: &mut Vec<usize>,
        next: usize,
        hi: usize,
        k: usize,
        best: &mut Option<(Vec<usize>, Vec<usize>)>,
    ) {
        if picks.len() == k {
            let gaps = sorted_gaps(picks);
            if best.as_ref().is_none_or(|(g, _)| gaps > *g) {
                *best = Some((gaps, picks.clone()));
            }
            return;
        }
        let remaining = k - picks.len();
        for i in next..=hi + 1 - remaining {
            if let (Some((g, _)), Some(&last)) = (best.as_ref(), picks.last()) {
                // A gap below the incumbent's minimum can never win.
                if i - last < g[0] {
                    continue;
                }
            }
            picks.push(i);
            extend(picks, i + 1, hi, k, best);
            picks.pop();
        }
    }
    extend(&mut picks, lo, hi, n_drop, &mut best);
    Ok(best.expect("feasible band").1)
}

/// Layer index encoded in a tensor name such as `dec.7.ffn.up`.
fn layer_of(name: &str) -> Option<(&str, usize, &str)> {
    let mut parts = name.splitn(3, '.');
    let stack = parts.next()?;
    let idx = parts.next()?.parse().ok()?;
    Some((stack, idx, parts.next()?))
}

fn renumber(drop: &[usize], n: usize) -> Vec<Option<usize>> {
    let mut next = 0;
    (0..n)
        .map(|i| {
            if drop.binary_search(&i).is_ok() {
                None
            } else {
                next += 1;
                Some(next - 1)
            }
        })
        .collect()
}

/// Layers shielded at each end of a stack of `n` when choosing drops.
pub fn protected_layers(n: usize) -> usize {
    n / 5
}

/// Drops `enc` encoder and `dec` decoder layers, each chosen by
/// [`select_layers`] with [`protected_layers`] shielded at both ends.
pub fn plan_layer_drop(cfg: &crate::model::ModelConfig, enc: usize, dec: usize, label: &str) -> Result<LayerPrunePlan> {
    let (ne, nd) = (cfg.n_enc_layers, cfg.n_dec_layers);
    Ok(LayerPrunePlan {
        enc_drop: select_layers(ne, enc, protected_layers(ne), protected_layers(ne))?,
        dec_drop: select_layers(nd, dec, protected_layers(nd), protected_layers(nd))?,
        stage_label: label.to_string(),
    })
}

/// Removes whole layers; survivors are renumbered in order.
pub fn prune_layers<F: Real>(model: &ModelCheckpoint<F>, plan: &LayerPrunePlan) -> Result<ModelCheckpoint<F>> {
    let cfg = &model.config;
    plan.validate(cfg.n_enc_layers, cfg.n_dec_layers)?;
    let enc = renumber(&plan.enc_drop, cfg.n_enc_layers);
    let dec = renumber(&plan.dec_drop, cfg.n_dec_layers);
    let mut tensors = BTreeMap::new();
    for (name, t) in &model.tensors {
        let new_name = match layer_of(name) {
            Some(("enc", i, rest)) => enc[i].map(|j| format!("enc.{j}.{rest}")),
            Some(("dec", i, rest)) => dec[i].map(|j| format!("dec.{j}.{rest}")),
            _ => Some(name.clone()),
        };
        if let Some(n) = new_name {
            tensors.insert(n, t.clone());
        }
    }
    let mut config = cfg.clone();
    config.n_enc_layers -= plan.enc_drop.len();
    config.n_dec_layers -= plan.dec_drop.len();
    let mut out = ModelCheckpoint { config, tensors, metadata: model.metadata.clone() };
    if !plan.stage_label.is_empty() {
        out.set_meta("stage", plan.stage_label.clone());
    }
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralPrunePlan {
    pub target_hidden: usize,
    pub target_ffn: usize,
    pub target_heads: usize,
    /// Residual-stream channels, shared by every tensor touching it.
    pub kept_hidden_idx: Vec<usize>,
    /// FFN channels per feed-forward module.
    pub kept_ffn_idx: BTreeMap<String, Vec<usize>>,
    /// Heads per attention module.
    pub kept_head_idx: BTreeMap<String, Vec<usize>>,
    pub seed: u64,
}

fn sample_sorted(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Uniform random channels and heads per dependency group.
pub fn make_neural_plan(
    cfg: &crate::model::ModelConfig,
    target_hidden: usize,
    target_ffn: usize,
    target_heads: usize,
    seed: u64,
) -> Result<NeuralPrunePlan> {
    let targets = [(target_hidden, cfg.hidden, "hidden"), (target_ffn, cfg.ffn, "ffn"), (target_heads, cfg.n_heads, "heads")];
    for (t, cur, name) in targets {
        if t == 0 || t > cur {
            bail!(Config, "{name} target {t} must be in 1..={cur}");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept_hidden_idx = sample_sorted(&mut rng, cfg.hidden, target_hidden);
    let kept_ffn_idx = ffn_modules(cfg).into_iter().map(|m| (m, sample_sorted(&mut rng, cfg.ffn, target_ffn))).collect();
    let kept_head_idx =
        attention_modules(cfg).into_iter().map(|m| (m, sample_sorted(&mut rng, cfg.n_heads, target_heads))).collect();
    Ok(NeuralPrunePlan { target_hidden, target_ffn, target_heads, kept_hidden_idx, kept_ffn_idx, kept_head_idx, seed })
}

fn check_kept(idx: &[usize], n: usize, want: usize, what: &str) -> Result<()> {
    if idx.len() != want {
        bail!(Plan, "{what} keeps {} entries, target is {want}", idx.len());
    }
    if idx.windows(2).any(|w| w[0] >= w[1]) || idx.last().is_some_and(|&i| i >= n) {
        bail!(Plan, "{what} indices must be sorted, unique and below {n}");
    }
    Ok(())
}

impl NeuralPrunePlan {
    pub fn validate(&self, cfg: &crate::model::ModelConfig) -> Result<()> {
        check_kept(&self.kept_hidden_idx, cfg.hidden, self.target_hidden, "hidden")?;
        let ffn = ffn_modules(cfg);
        if ffn.len() != self.kept_ffn_idx.len() || ffn.iter().any(|m| !self.kept_ffn_idx.contains_key(m)) {
            bail!(Plan, "FFN modules in plan do not match the model");
        }
        for (m, idx) in &self.kept_ffn_idx {
            check_kept(idx, cfg.ffn, self.target_ffn, m)?;
        }
        let attn = attention_modules(cfg);
        if attn.len() != self.kept_head_idx.len() || attn.iter().any(|m| !self.kept_head_idx.contains_key(m)) {
            bail!(Plan, "attention modules in plan do not match the model");
        }
        for (m, idx) in &self.kept_head_idx {
            check_kept(idx, cfg.n_heads, self.target_heads, m)?;
        }
        Ok(())
    }
}

fn select_elems<F: Real>(t: &Tensor<F>, idx: &[usize]) -> Result<Tensor<F>> {
    Tensor::new(vec![idx.len()], idx.iter().map(|&i| t.data()[i]).collect())
}

/// Dense slicing along the plan's dependency groups.
pub fn prune_neurons<F: Real>(model: &ModelCheckpoint<F>, plan: &NeuralPrunePlan) -> Result<ModelCheckpoint<F>> {
    let cfg = &model.config;
    plan.validate(cfg)?;
    let hid = &plan.kept_hidden_idx;
    let ranges = head_ranges(cfg.n_heads, cfg.head_dim);
    let head_cols = |m: &str| -> Vec<usize> { plan.kept_head_idx[m].iter().flat_map(|&h| ranges[h].clone()).collect() };
    let mut tensors = BTreeMap::new();
    for (name, t) in &model.tensors {
        let (module, leaf) = name.rsplit_once('.').unwrap_or(("", name));
        let out = match leaf {
            _ if t.shape().len() == 1 => select_elems(t, hid)?,
            "embed" | "lm_head" => t.select_cols(hid)?,
            "q" | "k" | "v" => t.select_rows(hid)?.select_cols(&head_cols(module))?,
            "o" => t.select_rows(&head_cols(module))?.select_cols(hid)?,
            "gate" | "up" => t.select_rows(hid)?.select_cols(&plan.kept_ffn_idx[module])?,
            "down" => t.select_rows(&plan.kept_ffn_idx[module])?.select_cols(hid)?,
            _ => bail!(Plan, "no pruning rule for tensor {name}"),
        };
        tensors.insert(name.clone(), out);
    }
    let mut config = cfg.clone();
    config.hidden = plan.target_hidden;
    config.ffn = plan.target_ffn;
    config.n_heads = plan.target_heads;
    let out = ModelCheckpoint { config, tensors, metadata: model.metadata.clone() };
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabPrunePlan {
    pub keep_k: usize,
    /// Vocabulary size the plan was made for.
    pub source_size: usize,
    pub retained_ids: Vec<u32>,
    /// Old id to new id for every retained token.
    pub remap: BTreeMap<u32, u32>,
}

/// Specials plus the most frequent other tokens, ties to the lower id.
pub fn make_vocab_plan(freq: &TokenFrequency, keep_k: usize) -> Result<VocabPrunePlan> {
    let size = freq.counts.len();
    let specials = SPECIAL_COUNT as usize;
    if keep_k < specials || keep_k > size {
        bail!(Config, "keep_k {keep_k} must be in {specials}..={size}");
    }
    let mut ranked: Vec<u32> = (SPECIAL_COUNT..size as u32).collect();
    ranked.sort_by_key(|&i| (std::cmp::Reverse(freq.counts[i as usize]), i));
    let mut retained: Vec<u32> = (0..SPECIAL_COUNT).chain(ranked.into_iter().take(keep_k - specials)).collect();
    retained.sort_unstable();
    let remap = retained.iter().enumerate().map(|(new, &old)| (old, new as u32)).collect();
    Ok(VocabPrunePlan { keep_k, source_size: size, retained_ids: retained, remap })
}

pub fn apply_vocab_plan<F: Real>(model: &ModelCheckpoint<F>, plan: &VocabPrunePlan) -> Result<ModelCheckpoint<F>> {
    if plan.source_size != model.config.vocab_size {
        bail!(Plan, "plan made for vocabulary {} applied to {}", plan.source_size, model.config.vocab_size);
    }
    let rows: Vec<usize> = plan.retained_ids.iter().map(|&i| i as usize).collect();
    let mut out = model.clone();
    for name in ["embed", "lm_head"] {
        let t = out.tensor(name)?.select_rows(&rows)?;
        out.tensors.insert(name.into(), t);
    }
    out.config.vocab_size = plan.keep_k;
    out.set_meta("vocab_source_size", plan.source_size.to_string());
    out.validate()?;
    Ok(out)
}

/// Keeps the `keep_k` most useful rows of the embedding and output
/// projection and restricts the tokenizer to match.
pub fn prune_vocab<F: Real>(
    model: &ModelCheckpoint<F>,
    vocab: &Vocab,
    freq: &TokenFrequency,
    keep_k: usize,
) -> Result<(ModelCheckpoint<F>, Vocab, VocabPrunePlan)> {
    if vocab.vocab_size() != model.config.vocab_size || freq.counts.len() != model.config.vocab_size {
        bail!(Plan, "tokenizer, frequencies and model disagree on vocabulary size");
    }
    let plan = make_vocab_plan(freq, keep_k)?;
    let pruned = apply_vocab_plan(model, &plan)?;
    let new_vocab = vocab.pruned(plan.retained_ids.clone())?;
    Ok((pruned, new_vocab, plan))
}

pub fn save_plan<T: Serialize>(plan: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(plan)?)?;
    Ok(())
}

pub fn load_plan<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneStrategy {
    Layer,
    Neural,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: PruneStrategy,
    pub step: usize,
    pub params: usize,
    pub params_pruned: usize,
    pub dev_loss: f64,
}

/// Width fraction kept after `step` neural-sweep steps.
const NEURAL_STEP: f64 = 0.07;

fn shrink(n: usize, keep: f64) -> usize {
    ((n as f64 * keep).round() as usize).clamp(1, n)
}

/// Prunes repeatedly without any recovery, scoring every step on `dev`.
///
/// The layer strategy removes one layer per step, from whichever stack
/// keeps the larger share of its depth, at the center of its band past
/// the outermost layers. The neural strategy shrinks hidden, FFN and head
/// counts by another 7% of their original size per step; each step prunes
/// the previous step's model so kept sets are nested.
pub fn sweep_direct_prune<F: Real>(
    model: &ModelCheckpoint<F>,
    strategy: PruneStrategy,
    steps: usize,
    dev: &[DenoisedExample],
    seed: u64,
    batch_size: usize,
) -> Result<Vec<SweepRow>> {
    let base = model.param_count();
    let row = |m: &ModelCheckpoint<F>, step: usize| -> Result<SweepRow> {
        let dev_loss = eval_examples(m, dev, batch_size)?.mean()?;
        Ok(SweepRow { strategy, step, params: m.param_count(), params_pruned: base - m.param_count(), dev_loss })
    };
    let mut rows = vec![row(model, 0)?];
    let mut cur = model.clone();
    let orig = model.config.clone();
    for step in 1..=steps {
        cur = match strategy {
            PruneStrategy::Layer => {
                let (e, d) = (cur.config.n_enc_layers, cur.config.n_dec_layers);
                let enc_share = e as f64 / orig.n_enc_layers as f64;
                let dec_share = d as f64 / orig.n_dec_layers as f64;
                let mut plan = LayerPrunePlan { stage_label: format!("sweep-layer-{step}"), ..Default::default() };
                // Dropping one of the protected band needs a layer left over.
                let (enc_ok, dec_ok) = (e >= 4, d >= 4);
                if enc_ok && (enc_share > dec_share || !dec_ok) {
                    plan.enc_drop = select_layers(e, 1, 1, 1)?;
                } else if dec_ok {
                    plan.dec_drop = select_layers(d, 1, 1, 1)?;
                } else {
                    break;
                }
                prune_layers(&cur, &plan)?
            }
            PruneStrategy::Neural => {
                let keep = 1.0 - NEURAL_STEP * step as f64;
                if keep <= 0.0 {
                    break;
                }
                let plan = make_neural_plan(
                    &cur.config,
                    shrink(orig.hidden, keep),
                    shrink(orig.ffn, keep),
                    shrink(orig.n_heads, keep),
                    seed.wrapping_add(step as u64),
                )?;
                prune_neurons(&cur, &plan)?
            }
        };
        rows.push(row(&cur, step)?);
    }
    Ok(rows)
}

pub fn write_sweep<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSweepRow {
    pub k: usize,
    pub dev_loss_zh: f64,
    pub dev_loss_en: f64,
}

/// Dev examples from `docs` under `spec`, retokenized by `vocab`.
pub fn dev_examples<T: Tokenizer>(
    docs: &[Document],
    vocab: &T,
    spec: &NoiserSpec,
    count: usize,
    max_enc: usize,
    max_dec: usize,
    seed: u64,
) -> Result<Vec<DenoisedExample>> {
    let ids: Vec<Vec<u32>> = docs.iter().map(|d| vocab.encode(&d.text)).collect();
    let len = ul2_source_len(spec, max_enc, max_dec)?;
    let mut stream = TokenStream::new(&ids);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let Some(w) = stream.take(len) else { break };
        out.push(spec.apply(&w, crate::denoising::example_seed(seed, i as u64))?.padded(max_enc, max_dec));
    }
    if out.is_empty() {
        bail!(Input, "dev documents are too short for a single {} example", spec.name);
    }
    Ok(out)
}

/// Settings shared by every point of a vocabulary sweep.
#[derive(Clone, Debug)]
pub struct VocabSweepDev<'a> {
    pub zh: &'a [Document],
    pub en: &'a [Document],
    pub spec: &'a NoiserSpec,
    pub examples: usize,
    pub max_enc: usize,
    pub max_dec: usize,
    pub seed: u64,
    pub batch_size: usize,
}

/// Dev loss on two sub-corpora for every candidate vocabulary size.
pub fn sweep_vocab<F: Real>(
    model: &ModelCheckpoint<F>,
    vocab: &Vocab,
    freq: &TokenFrequency,
    k_list: &[usize],
    dev: &VocabSweepDev,
) -> Result<Vec<VocabSweepRow>> {
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let (m, v, _) = prune_vocab(model, vocab, freq, k)?;
        let loss = |docs: &[Document]| -> Result<f64> {
            let ex = dev_examples(docs, &v, dev.spec, dev.examples, dev.max_enc, dev.max_dec, dev.seed)?;
            eval_examples(&m, &ex, dev.batch_size)?.mean()
        };
        rows.push(VocabSweepRow { k, dev_loss_zh: loss(dev.zh)?, dev_loss_en: loss(dev.en)? });
    }
    Ok(rows)
}

pub fn write_vocab_sweep<W: Write>(out: W, rows: &[VocabSweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn spread_selection() {
        assert_eq!(select_layers(12, 3, 2, 2).unwrap(), vec![2, 5, 9]);
        assert_eq!(select_layers(12, 1, 2, 2).unwrap(), vec![5]);
        assert!(select_layers(12, 0, 2, 2).unwrap().is_empty());
        assert_eq!(select_layers(12, 7, 2, 2).unwrap(), vec![2, 3, 4, 5, 6, 7, 9]);
        assert!(select_layers(12, 8, 2, 2).is_err());
    }

    #[test]
    fn deep_stack_drop_renumbers_layers() {
        let cfg = ModelConfig::new(12, 36, 16, 24, 2, 256).unwrap();
        let m: ModelCheckpoint = ModelCheckpoint::build(cfg, 0).unwrap();
        let plan = LayerPrunePlan { enc_drop: vec![4, 8], dec_drop: vec![7, 11, 18, 20, 22, 30], stage_label: "stage1".into() };
        let p = prune_layers(&m, &plan).unwrap();
        assert_eq!((p.config.n_enc_layers, p.config.n_dec_layers), (10, 30));
        assert_eq!(p.tensors["enc.4.attn.q"], m.tensors["enc.5.attn.q"]);
        assert_eq!(p.tensors["dec.29.ffn.up"], m.tensors["dec.35.ffn.up"]);
        assert_eq!(p.param_count(), p.config.param_count());
        assert_eq!(p.metadata["stage"], "stage1");
        let bad = LayerPrunePlan { enc_drop: vec![12], ..Default::default() };
        assert!(matches!(prune_layers(&m, &bad), Err(crate::Error::Plan(_))));
    }

    #[test]
    fn toy_stage_four_targets() {
        let cfg = ModelConfig::toy_default();
        let plan = make_neural_plan(&cfg, 80, 216, 4, 9).unwrap();
        assert_eq!(plan, make_neural_plan(&cfg, 80, 216, 4, 9).unwrap());
        assert_ne!(plan, make_neural_plan(&cfg, 80, 216, 4, 10).unwrap());
        let full = make_neural_plan(&cfg, 128, 344, 8, 1).unwrap();
        assert_eq!(full.kept_hidden_idx, (0..128).collect::<Vec<_>>());
        assert!(make_neural_plan(&cfg, 129, 344, 8, 1).is_err());
    }

    #[test]
    fn vocab_top_k() {
        let a = SPECIAL_COUNT;
        let mut freq = TokenFrequency::zeros(SPECIAL_COUNT as usize + 3);
        freq.add(&[a; 10]);
        freq.add(&[a + 1; 5]);
        freq.add(&[a + 2]);
        let plan = make_vocab_plan(&freq, SPECIAL_COUNT as usize + 2).unwrap();
        assert_eq!(plan.retained_ids.len(), SPECIAL_COUNT as usize + 2);
        assert!(plan.remap.contains_key(&a) && plan.remap.contains_key(&(a + 1)));
        assert!(!plan.remap.contains_key(&(a + 2)));
        assert!(make_vocab_plan(&freq, 3).is_err());
    }
}
