//! UL2 denoisers: span corruption with sentinels and prefix/continuation
//! splitting.
//!
//! Every objective yields a [`DenoisedExample`]. The decoder input is the
//! target shifted right behind the family's mode token, so the encoder
//! carries only source tokens and sentinels.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::corpus::special::{SentinelFamily, EOS, PAD};
use crate::error::{bail, Result};

/// Number of entries in the canonical table.
pub const N_NOISERS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NoiseName {
    R1,
    R2,
    S,
    X1,
    X2,
    X3,
    X4,
    /// Fused S/R/X example from the padding-free objective.
    Mix,
}

impl NoiseName {
    pub const CANONICAL: [NoiseName; N_NOISERS] =
        [NoiseName::R1, NoiseName::R2, NoiseName::S, NoiseName::X1, NoiseName::X2, NoiseName::X3, NoiseName::X4];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseName::R1 => "R1",
            NoiseName::R2 => "R2",
            NoiseName::S => "S",
            NoiseName::X1 => "X1",
            NoiseName::X2 => "X2",
            NoiseName::X3 => "X3",
            NoiseName::X4 => "X4",
            NoiseName::Mix => "Mix",
        }
    }
}

impl std::fmt::Display for NoiseName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How span lengths are chosen once the masked count and span count are
/// fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanLengths {
    /// Masked tokens split as evenly as possible across spans.
    #[default]
    Even,
    /// Lengths drawn around the mean, then nudged to the exact total.
    Poisson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiserSpec {
    pub name: NoiseName,
    pub mean_span: Option<usize>,
    pub corruption_ratio: f64,
    pub sentinel_family: SentinelFamily,
    /// First decoder input token for examples of this family.
    pub prefix_token: u32,
}

impl NoiserSpec {
    fn new(name: NoiseName, mean_span: Option<usize>, corruption_ratio: f64, family: SentinelFamily) -> Self {
        NoiserSpec { name, mean_span, corruption_ratio, sentinel_family: family, prefix_token: family.mode_token() }
    }

    pub fn is_sequential(&self) -> bool {
        self.mean_span.is_none()
    }

    /// Builds an example with the objective this spec describes.
    pub fn apply(&self, ids: &[u32], seed: u64) -> Result<DenoisedExample> {
        if self.is_sequential() {
            s_denoise(ids, self, seed)
        } else {
            span_corrupt(ids, self, seed)
        }
    }

    /// Encoder and decoder lengths this spec produces for a source of
    /// `len` tokens, without drawing any randomness.
    pub fn output_lengths(&self, len: usize) -> (usize, usize) {
        match self.mean_span {
            None => {
                let split = s_split(len, self.corruption_ratio);
                (split + 1, len - split + 1)
            }
            Some(mu) => {
                let (m, s) = mask_counts(len, self.corruption_ratio, mu);
                (len - m + s, m + s + 1)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiserTable {
    specs: Vec<NoiserSpec>,
}

impl NoiserTable {
    pub fn canonical() -> Self {
        use NoiseName::*;
        use SentinelFamily as F;
        NoiserTable {
            specs: vec![
                NoiserSpec::new(R1, Some(3), 0.15, F::R),
                NoiserSpec::new(R2, Some(8), 0.15, F::R),
                NoiserSpec::new(S, None, 0.25, F::S),
                NoiserSpec::new(X1, Some(3), 0.50, F::X),
                NoiserSpec::new(X2, Some(8), 0.50, F::X),
                NoiserSpec::new(X3, Some(64), 0.15, F::X),
                NoiserSpec::new(X4, Some(64), 0.50, F::X),
            ],
        }
    }

    pub fn specs(&self) -> &[NoiserSpec] {
        &self.specs
    }

    pub fn get(&self, i: usize) -> &NoiserSpec {
        &self.specs[i]
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn position(&self, name: NoiseName) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoisedExample {
    pub enc_ids: Vec<u32>,
    pub dec_input_ids: Vec<u32>,
    pub dec_target_ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub noise_name: NoiseName,
    #[serde(skip)]
    pub source_len: usize,
}

impl DenoisedExample {
    fn from_target(enc_ids: Vec<u32>, dec_target_ids: Vec<u32>, mode: u32, noise_name: NoiseName, source_len: usize) -> Self {
        let mut dec_input_ids = Vec::with_capacity(dec_target_ids.len());
        dec_input_ids.push(mode);
        dec_input_ids.extend_from_slice(&dec_target_ids[..dec_target_ids.len() - 1]);
        let loss_mask = vec![true; dec_target_ids.len()];
        DenoisedExample { enc_ids, dec_input_ids, dec_target_ids, loss_mask, noise_name, source_len }
    }

    /// Appends PAD (with a false loss mask) up to the given lengths,
    /// truncating anything longer.
    pub fn padded(mut self, enc_len: usize, dec_len: usize) -> Self {
        self.enc_ids.resize(enc_len, PAD);
        self.dec_input_ids.resize(dec_len, PAD);
        self.dec_target_ids.resize(dec_len, PAD);
        self.loss_mask.resize(dec_len, false);
        self
    }

    /// Positions holding PAD across encoder and decoder input.
    pub fn pad_count(&self) -> usize {
        self.enc_ids.iter().chain(&self.dec_input_ids).filter(|&&t| t == PAD).count()
    }

    /// Number of decoder positions contributing to the loss.
    pub fn loss_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Sentinels in encoder order.
    pub fn enc_sentinels(&self) -> Vec<u32> {
        self.enc_ids.iter().copied().filter(|&t| is_family_sentinel(t)).collect()
    }

    /// Sentinels opening each decoder span, in order.
    pub fn dec_sentinels(&self) -> Vec<u32> {
        self.dec_target_ids.iter().copied().filter(|&t| is_family_sentinel(t)).collect()
    }

    /// Splices the decoder spans back into the encoder's sentinel slots.
    ///
    /// A decoder target that does not open with a sentinel is one
    /// continuation filling the encoder's final sentinel.
    pub fn reconstruct(&self) -> Result<Vec<u32>> {
        let live = self.loss_mask.iter().take_while(|&&m| m).count();
        let target = &self.dec_target_ids[..live];
        let Some((&EOS, body)) = target.split_last() else {
            bail!(Contract, "decoder target does not end with EOS");
        };
        let mut spans: Vec<(Option<u32>, Vec<u32>)> = Vec::new();
        for &t in body {
            if is_family_sentinel(t) {
                spans.push((Some(t), Vec::new()));
            } else {
                if spans.is_empty() {
                    spans.push((None, Vec::new()));
                }
                spans.last_mut().unwrap().1.push(t);
            }
        }
        let enc: Vec<u32> = self.enc_ids.iter().copied().filter(|&t| t != PAD).collect();
        let slots = enc.iter().filter(|&&t| is_family_sentinel(t)).count();
        if slots != spans.len() {
            bail!(Contract, "{slots} encoder sentinels but {} decoder spans", spans.len());
        }
        let mut spans = spans.into_iter();
        let mut out = Vec::with_capacity(self.source_len);
        for t in enc {
            if !is_family_sentinel(t) {
                out.push(t);
                continue;
            }
            let (sentinel, tokens) = spans.next().unwrap();
            if sentinel.is_some_and(|s| s != t) {
                bail!(Contract, "encoder sentinel {t} answered by decoder sentinel {sentinel:?}");
            }
            out.extend(tokens);
        }
        Ok(out)
    }
}

fn is_family_sentinel(t: u32) -> bool {
    crate::corpus::special::is_sentinel(t)
}

/// Masked count `m` and span count `s` for a source of `len` tokens.
pub fn mask_counts(len: usize, ratio: f64, mean_span: usize) -> (usize, usize) {
    let m = (ratio * len as f64).round() as usize;
    let s = ((m as f64 / mean_span as f64).round() as usize).max(1);
    (m, s)
}

fn s_split(len: usize, ratio: f64) -> usize {
    ((1.0 - ratio) * len as f64 - 1e-9).ceil() as usize
}

/// Derives a per-example seed from a run seed and the example's index.
pub fn example_seed(seed: u64, index: u64) -> u64 {
    xxh3_64_with_seed(&index.to_le_bytes(), seed)
}

pub fn span_corrupt(ids: &[u32], spec: &NoiserSpec, seed: u64) -> Result<DenoisedExample> {
    span_corrupt_with(ids, spec, seed, SpanLengths::Even)
}

pub fn span_corrupt_with(ids: &[u32], spec: &NoiserSpec, seed: u64, lengths: SpanLengths) -> Result<DenoisedExample> {
    let Some(mu) = spec.mean_span else {
        bail!(Contract, "span corruption needs a mean span, {} has none", spec.name);
    };
    let n = ids.len();
    if n < 2 * mu || n < 2 {
        bail!(Input, "{n} tokens is too short for {} (mean span {mu})", spec.name);
    }
    let (m, s) = mask_counts(n, spec.corruption_ratio, mu);
    if m == 0 || m >= n {
        bail!(Input, "{n} tokens masks {m} under {}", spec.name);
    }
    let family = spec.sentinel_family;
    let sentinels: Vec<u32> = (0..s).map(|i| family.sentinel(i)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span_lens = match lengths {
        SpanLengths::Even => even_lengths(m, s),
        SpanLengths::Poisson => poisson_lengths(m, s, mu, &mut rng),
    };
    let gaps = place_gaps(n - m, s, &mut rng);
    Ok(assemble(ids, &gaps, &span_lens, &sentinels, None, spec.prefix_token, spec.name))
}

fn even_lengths(m: usize, s: usize) -> Vec<usize> {
    (0..s).map(|i| m / s + usize::from(i < m % s)).collect()
}

fn poisson_lengths(m: usize, s: usize, mu: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let poisson = Poisson::new(mu as f64).expect("positive mean");
    let mut lens: Vec<usize> = (0..s).map(|_| (poisson.sample(rng) as usize).max(1)).collect();
    let mut total: usize = lens.iter().sum();
    while total != m {
        let i = rng.random_range(0..s);
        if total < m {
            lens[i] += 1;
            total += 1;
        } else if lens[i] > 1 {
            lens[i] -= 1;
            total -= 1;
        }
    }
    lens
}

/// Splits `unmasked` tokens into `s + 1` gaps around `s` spans. Interior
/// gaps get at least one token when there are enough to go round, so spans
/// never touch; the rest is a uniformly random composition.
fn place_gaps(unmasked: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let floor = if unmasked >= s.saturating_sub(1) { 1 } else { 0 };
    let spare = unmasked - floor * s.saturating_sub(1);
    // Stars and bars: choose s bar positions among spare + s slots.
    let mut bars = index::sample(rng, spare + s, s).into_vec();
    bars.sort_unstable();
    let mut gaps = Vec::with_capacity(s + 1);
    let mut prev = 0;
    for (i, &b) in bars.iter().enumerate() {
        let stars = b - prev;
        gaps.push(stars + if i > 0 { floor } else { 0 });
        prev = b + 1;
    }
    gaps.push(spare + s - prev);
    gaps
}

/// Lays out gaps and spans. With `tail` set, the last `tail` source tokens
/// become one more span behind the final sentinel.
fn assemble(
    ids: &[u32],
    gaps: &[usize],
    span_lens: &[usize],
    sentinels: &[u32],
    tail: Option<usize>,
    mode: u32,
    name: NoiseName,
) -> DenoisedExample {
    let mut enc = Vec::with_capacity(ids.len());
    let mut dec = Vec::new();
    let mut at = 0;
    for (i, &len) in span_lens.iter().enumerate() {
        enc.extend_from_slice(&ids[at..at + gaps[i]]);
        at += gaps[i];
        enc.push(sentinels[i]);
        dec.push(sentinels[i]);
        dec.extend_from_slice(&ids[at..at + len]);
        at += len;
    }
    enc.extend_from_slice(&ids[at..at + gaps[span_lens.len()]]);
    at += gaps[span_lens.len()];
    if let Some(t) = tail {
        let s = sentinels[span_lens.len()];
        enc.push(s);
        dec.push(s);
        dec.extend_from_slice(&ids[at..at + t]);
        at += t;
    }
    debug_assert_eq!(at, ids.len());
    dec.push(EOS);
    DenoisedExample::from_target(enc, dec, mode, name, ids.len())
}

/// Mixed example: random spans over a prefix plus a continuation tail.
/// `span_lens` and `tail` are fixed by the caller; gaps are sampled.
pub(crate) fn corrupt_with_tail(
    ids: &[u32],
    span_lens: &[usize],
    tail: usize,
    family: SentinelFamily,
    name: NoiseName,
    rng: &mut ChaCha8Rng,
) -> Result<DenoisedExample> {
    let masked: usize = span_lens.iter().sum::<usize>() + tail;
    if masked > ids.len() {
        bail!(Input, "{masked} masked tokens exceed a {}-token source", ids.len());
    }
    let sentinels: Vec<u32> = (0..=span_lens.len()).map(|i| family.sentinel(i)).collect::<Result<_>>()?;
    let unmasked = ids.len() - masked;
    let gaps = if span_lens.is_empty() { vec![unmasked] } else { place_gaps(unmasked, span_lens.len(), rng) };
    Ok(assemble(ids, &gaps, span_lens, &sentinels, Some(tail), family.mode_token(), name))
}

pub fn s_denoise(ids: &[u32], spec: &NoiserSpec, _seed: u64) -> Result<DenoisedExample> {
    if !spec.is_sequential() {
        bail!(Contract, "{} is not a sequential denoiser", spec.name);
    }
    let n = ids.len();
    if n < 4 {
        bail!(Input, "{n} tokens is too short for prefix/continuation splitting");
    }
    let split = s_split(n, spec.corruption_ratio);
    if split == 0 || split >= n {
        bail!(Input, "split at {split} leaves an empty side of a {n}-token source");
    }
    let sentinel = spec.sentinel_family.sentinel(0)?;
    let mut enc = ids[..split].to_vec();
    enc.push(sentinel);
    let mut dec = ids[split..].to_vec();
    dec.push(EOS);
    Ok(DenoisedExample::from_target(enc, dec, spec.prefix_token, spec.name, n))
}

/// Deterministic categorical sampler over noiser indices.
#[derive(Clone, Debug)]
pub struct NoiseSampler {
    rng: ChaCha8Rng,
}

impl NoiseSampler {
    pub fn new(seed: u64) -> Self {
        NoiseSampler { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn draw(&mut self, p: &[f64]) -> Result<usize> {
        check_simplex(p)?;
        let dist = WeightedIndex::new(p).map_err(|e| crate::Error::Contract(format!("bad weights: {e}")))?;
        Ok(dist.sample(&mut self.rng))
    }
}

pub fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        bail!(Contract, "probabilities must be finite and nonnegative: {p:?}");
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        bail!(Contract, "probabilities sum to {total}, not 1");
    }
    Ok(())
}

/// One categorical draw from the table under `p`.
pub fn sample_noiser<'a>(table: &'a NoiserTable, p: &[f64], seed: u64) -> Result<&'a NoiserSpec> {
    if p.len() != table.len() {
        bail!(Contract, "{} probabilities for {} noisers", p.len(), table.len());
    }
    Ok(table.get(NoiseSampler::new(seed).draw(p)?))
}
