//! Fixed-shape example construction and padding accounting.
//!
//! Documents are read as one token stream, joined by EOS, and cut into
//! source windows. The classic UL2 baseline gives each noiser the longest
//! window whose output fits the maximum lengths and pads the rest.
//! Optimized-UL2 mixes a continuation tail with R/X-style spans under
//! one global mask rate, so that every example fills a fixed shape.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::special::{SentinelFamily, EOS, PAD};
use crate::denoising::{
    corrupt_with_tail, example_seed, mask_counts, DenoisedExample, NoiseName, NoiseSampler, NoiserSpec, NoiserTable,
};
use crate::error::{bail, Result};

/// Sentinels available to one example.
const FAMILY_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub global_mask_rate: f64,
    pub s_lower: usize,
    pub s_upper: usize,
    pub s_mean: f64,
    pub s_std: f64,
    pub enc_len_fixed: usize,
    pub dec_len_fixed: usize,
    pub mix_fraction: f64,
    pub s_fixed_count: usize,
}

/// Source length, masked count and span count of a mix example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixGeometry {
    pub source_len: usize,
    pub masked: usize,
    /// R/X spans, not counting the continuation tail.
    pub spans: usize,
    /// Positions left as padding across encoder and decoder.
    pub residue: usize,
}

impl MixSpec {
    /// Defaults for an explicit shape: S counts drawn around half the
    /// decoder, pure-S examples fill the decoder.
    pub fn for_shape(enc_len: usize, dec_len: usize) -> Self {
        let d = dec_len as f64;
        MixSpec {
            global_mask_rate: 0.25,
            s_lower: ((0.2 * d).round() as usize).max(1),
            s_upper: ((0.8 * d).round() as usize).max(1),
            s_mean: 0.5 * d,
            s_std: 0.15 * d,
            enc_len_fixed: enc_len,
            dec_len_fixed: dec_len,
            mix_fraction: 0.2,
            s_fixed_count: dec_len.saturating_sub(1),
        }
    }

    /// Defaults with the decoder length balanced against the encoder
    /// length: the mix geometry fits exactly and uses about as many spans
    /// as the R/X budget calls for at the mean S count.
    pub fn for_enc_len(enc_len: usize, rate: f64) -> Result<Self> {
        let mut best: Option<((usize, usize), MixSpec)> = None;
        for dec_len in 4..=enc_len {
            let spec = MixSpec { global_mask_rate: rate, ..MixSpec::for_shape(enc_len, dec_len) };
            let Ok(g) = spec.geometry() else { continue };
            let natural = natural_spans(g.masked.saturating_sub(spec.s_mean.round() as usize));
            let score = (g.residue, g.spans.abs_diff(natural));
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, spec));
            }
        }
        match best {
            Some((_, spec)) => Ok(spec),
            None => bail!(Config, "no decoder length balances encoder length {enc_len} at mask rate {rate}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.global_mask_rate > 0.0 && self.global_mask_rate < 1.0) {
            bail!(Config, "global mask rate {} outside (0, 1)", self.global_mask_rate);
        }
        if self.s_lower == 0 || self.s_lower > self.s_upper {
            bail!(Config, "S bounds [{}, {}] are not 0 < lower <= upper", self.s_lower, self.s_upper);
        }
        if !(0.0..=1.0).contains(&self.mix_fraction) {
            bail!(Config, "mix fraction {} outside [0, 1]", self.mix_fraction);
        }
        if self.enc_len_fixed < 2 || self.dec_len_fixed < 2 {
            bail!(Config, "fixed lengths ({}, {}) too small", self.enc_len_fixed, self.dec_len_fixed);
        }
        if self.s_fixed_count == 0 || self.s_fixed_count >= self.dec_len_fixed {
            bail!(Config, "fixed S count {} must be in 1..{}", self.s_fixed_count, self.dec_len_fixed);
        }
        if !(self.s_std >= 0.0 && self.s_mean.is_finite()) {
            bail!(Config, "S count distribution ({}, {}) is invalid", self.s_mean, self.s_std);
        }
        Ok(())
    }

    /// Solves for the mix layout. An example with `k` spans over a source
    /// of `L` tokens masking `M = round(rate * L)` has an encoder of
    /// `L - M + k + 1` and a decoder of `M + k + 2`; the solver takes the
    /// layout with the least padding, then the longest source.
    pub fn geometry(&self) -> Result<MixGeometry> {
        self.validate()?;
        let (e, d) = (self.enc_len_fixed, self.dec_len_fixed);
        let mut best: Option<MixGeometry> = None;
        for k in 1..FAMILY_SIZE {
            let Some(mut len) = (e + d).checked_sub(2 * k + 3) else { break };
            while len > 0 {
                let m = (self.global_mask_rate * len as f64).round() as usize;
                let (enc, dec) = (len - m + k + 1, m + k + 2);
                if enc <= e && dec <= d {
                    if m >= k + self.s_lower && m < len {
                        let g = MixGeometry { source_len: len, masked: m, spans: k, residue: e - enc + d - dec };
                        if best.is_none_or(|b| (g.residue, usize::MAX - g.source_len) < (b.residue, usize::MAX - b.source_len)) {
                            best = Some(g);
                        }
                    }
                    break;
                }
                len -= 1;
            }
        }
        match best {
            Some(g) => Ok(g),
            None => bail!(Config, "no mix layout fits encoder {e} / decoder {d}"),
        }
    }

    /// Source tokens one pure-S example consumes.
    pub fn pure_s_source_len(&self) -> usize {
        self.enc_len_fixed - 1 + self.s_fixed_count
    }
}

/// Span count the R/X budget implies with half in mean-3 spans and half
/// in mean-8 spans.
fn natural_spans(budget: usize) -> usize {
    let (b3, b8) = (budget.div_ceil(2), budget / 2);
    let k3 = if b3 > 0 { mask_counts(b3, 1.0, 3).1 } else { 0 };
    let k8 = if b8 > 0 { mask_counts(b8, 1.0, 8).1 } else { 0 };
    k3 + k8
}

fn even(total: usize, parts: usize) -> impl Iterator<Item = usize> {
    (0..parts).map(move |i| total / parts + usize::from(i < total % parts))
}

/// Span lengths for an R/X budget spread over exactly `k` spans: half the
/// budget (plus any odd token) in short spans, half in long ones, with
/// span counts in proportion to what mean lengths 3 and 8 would give.
fn rx_spans(budget: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(budget >= k && k >= 1);
    let (b3, b8) = (budget.div_ceil(2), budget / 2);
    let k3 = if b8 == 0 || k == 1 {
        k
    } else {
        let (n3, n8) = (b3 as f64 / 3.0, b8 as f64 / 8.0);
        let want = (k as f64 * n3 / (n3 + n8)).round() as usize;
        want.clamp(k.saturating_sub(b8).max(1), b3.min(k - 1))
    };
    let mut lens: Vec<usize> = if k3 == k { even(budget, k).collect() } else { even(b3, k3).chain(even(b8, k - k3)).collect() };
    lens.shuffle(rng);
    lens
}

/// Mix-Denoising: a continuation tail plus R/X spans over the prefix,
/// under the X family. The source is truncated to the solved length.
pub fn mix_denoise(ids: &[u32], spec: &MixSpec, seed: u64) -> Result<DenoisedExample> {
    let g = spec.geometry()?;
    mix_with(ids, spec, &g, seed)
}

fn mix_with(ids: &[u32], spec: &MixSpec, g: &MixGeometry, seed: u64) -> Result<DenoisedExample> {
    if ids.len() < g.source_len {
        bail!(Input, "{} tokens cannot fill a {}-token mix source", ids.len(), g.source_len);
    }
    let ids = &ids[..g.source_len];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(spec.s_mean, spec.s_std).expect("validated");
    let drawn = normal.sample(&mut rng).round().max(0.0) as usize;
    let tail = drawn.clamp(spec.s_lower, spec.s_upper.min(g.masked - g.spans));
    let spans = rx_spans(g.masked - tail, g.spans, &mut rng);
    let ex = corrupt_with_tail(ids, &spans, tail, SentinelFamily::X, NoiseName::Mix, &mut rng)?;
    Ok(ex.padded(spec.enc_len_fixed, spec.dec_len_fixed))
}

/// Prefix/continuation example with exactly `s_fixed_count` continuation
/// tokens; a short source leaves encoder padding.
pub fn make_pure_s(ids: &[u32], spec: &MixSpec, _seed: u64) -> Result<DenoisedExample> {
    spec.validate()?;
    let c = spec.s_fixed_count;
    if ids.len() <= c {
        bail!(Input, "{} tokens cannot supply {c} continuation tokens and a prefix", ids.len());
    }
    let ids = &ids[..ids.len().min(spec.pure_s_source_len())];
    let split = ids.len() - c;
    let mut enc = ids[..split].to_vec();
    enc.push(SentinelFamily::S.sentinel(0)?);
    let mut dec_input = vec![SentinelFamily::S.mode_token()];
    dec_input.extend_from_slice(&ids[split..]);
    let mut dec_target = ids[split..].to_vec();
    dec_target.push(EOS);
    let ex = DenoisedExample {
        enc_ids: enc,
        loss_mask: vec![true; dec_target.len()],
        dec_input_ids: dec_input,
        dec_target_ids: dec_target,
        noise_name: NoiseName::S,
        source_len: ids.len(),
    };
    Ok(ex.padded(spec.enc_len_fixed, spec.dec_len_fixed))
}

/// Documents read back to back with an EOS between neighbours.
#[derive(Clone, Debug)]
pub struct TokenStream<'a> {
    docs: &'a [Vec<u32>],
    doc: usize,
    offset: usize,
    cycle: bool,
    /// A separator is owed before the next document's first token.
    separator: bool,
}

impl<'a> TokenStream<'a> {
    pub fn new(docs: &'a [Vec<u32>]) -> Self {
        TokenStream { docs, doc: 0, offset: 0, cycle: false, separator: false }
    }

    /// Starts reading at document `doc` (modulo the corpus size).
    pub fn starting_at(mut self, doc: usize) -> Self {
        self.doc = if self.docs.is_empty() { 0 } else { doc % self.docs.len() };
        self
    }

    /// Restarts from the first document instead of running dry.
    pub fn cycled(mut self) -> Self {
        self.cycle = self.docs.iter().any(|d| !d.is_empty());
        self
    }

    /// The next `n` tokens, or `None` once fewer than `n` remain.
    pub fn take(&mut self, n: usize) -> Option<Vec<u32>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.doc == self.docs.len() {
                if !self.cycle {
                    return None;
                }
                self.doc = 0;
            }
            let d = &self.docs[self.doc];
            if d.is_empty() {
                self.doc += 1;
                continue;
            }
            if self.separator {
                out.push(EOS);
                self.separator = false;
                continue;
            }
            let k = (n - out.len()).min(d.len() - self.offset);
            out.extend_from_slice(&d[self.offset..self.offset + k]);
            self.offset += k;
            if self.offset == d.len() {
                self.doc += 1;
                self.offset = 0;
                self.separator = true;
            }
        }
        Some(out)
    }
}

/// Optimized-UL2 stream: each example is a mix example with probability
/// `mix_fraction`, else pure S. Stops when the corpus runs out.
pub fn build_batch_oul2(docs: &[Vec<u32>], spec: &MixSpec, seed: u64) -> Result<Vec<DenoisedExample>> {
    let mut out = Vec::new();
    let mut gen = Oul2Generator::new(spec, seed)?;
    let mut stream = TokenStream::new(docs);
    while let Some(ex) = gen.next(&mut stream)? {
        out.push(ex);
    }
    Ok(out)
}

/// Stateful Optimized-UL2 example source over a token stream.
#[derive(Clone, Debug)]
pub struct Oul2Generator {
    spec: MixSpec,
    geometry: MixGeometry,
    rng: ChaCha8Rng,
    seed: u64,
    index: u64,
}

impl Oul2Generator {
    pub fn new(spec: &MixSpec, seed: u64) -> Result<Self> {
        let geometry = spec.geometry()?;
        Ok(Oul2Generator { spec: spec.clone(), geometry, rng: ChaCha8Rng::seed_from_u64(seed), seed, index: 0 })
    }

    pub fn geometry(&self) -> MixGeometry {
        self.geometry
    }

    pub fn next(&mut self, stream: &mut TokenStream) -> Result<Option<DenoisedExample>> {
        let mix = self.rng.random_bool(self.spec.mix_fraction);
        let need = if mix { self.geometry.source_len } else { self.spec.pure_s_source_len() };
        let Some(window) = stream.take(need) else { return Ok(None) };
        let seed = example_seed(self.seed, self.index);
        self.index += 1;
        let ex = if mix { mix_with(&window, &self.spec, &self.geometry, seed)? } else { make_pure_s(&window, &self.spec, seed)? };
        Ok(Some(ex))
    }
}

/// Longest source whose output under `spec` fits the given maxima.
pub fn ul2_source_len(spec: &NoiserSpec, max_enc: usize, max_dec: usize) -> Result<usize> {
    let shortest = spec.mean_span.map_or(4, |mu| 2 * mu);
    for len in (shortest..=max_enc + max_dec).rev() {
        let (enc, dec) = spec.output_lengths(len);
        let sentinels_ok = spec.mean_span.is_none_or(|mu| mask_counts(len, spec.corruption_ratio, mu).1 <= FAMILY_SIZE);
        if enc <= max_enc && dec <= max_dec && sentinels_ok {
            return Ok(len);
        }
    }
    bail!(Config, "{} cannot fit encoder {max_enc} / decoder {max_dec}", spec.name)
}

/// Classic UL2 stream: a noiser drawn per example from `p`, applied to
/// the longest window that fits, then padded to the maxima.
pub fn build_batch_ul2(
    docs: &[Vec<u32>],
    table: &NoiserTable,
    p: &[f64],
    max_enc: usize,
    max_dec: usize,
    seed: u64,
) -> Result<Vec<DenoisedExample>> {
    let fits: Vec<usize> = table.specs().iter().map(|s| ul2_source_len(s, max_enc, max_dec)).collect::<Result<_>>()?;
    let mut sampler = NoiseSampler::new(seed);
    let mut stream = TokenStream::new(docs);
    let mut out = Vec::new();
    for index in 0.. {
        let i = sampler.draw(p)?;
        let Some(window) = stream.take(fits[i]) else { break };
        let ex = table.get(i).apply(&window, example_seed(seed, index))?;
        out.push(ex.padded(max_enc, max_dec));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PaddingStats {
    pub total_positions: usize,
    pub padded_positions: usize,
    pub fraction: f64,
}

/// PAD share over encoder and decoder-input positions of every example.
pub fn measure_padding(examples: &[DenoisedExample]) -> Result<PaddingStats> {
    if examples.is_empty() {
        bail!(Contract, "padding of an empty example stream is undefined");
    }
    let total: usize = examples.iter().map(|e| e.enc_ids.len() + e.dec_input_ids.len()).sum();
    let padded: usize = examples.iter().map(DenoisedExample::pad_count).sum();
    if total == 0 {
        bail!(Contract, "examples have no positions");
    }
    Ok(PaddingStats { total_positions: total, padded_positions: padded, fraction: padded as f64 / total as f64 })
}

/// Fraction of source tokens an example masks, with PAD excluded.
pub fn realized_mask_fraction(ex: &DenoisedExample) -> f64 {
    let live = ex.loss_tokens();
    let sentinels = ex.dec_sentinels().len();
    // The decoder holds masked tokens, span sentinels and EOS.
    let masked = live - sentinels - 1;
    let source = ex.enc_ids.iter().filter(|&&t| t != PAD).count() - ex.enc_sentinels().len() + masked;
    masked as f64 / source as f64
}
