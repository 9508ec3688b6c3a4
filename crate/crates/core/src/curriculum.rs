//! Dynamic-UL2: loss-driven reweighting of the noiser mixture.
//!
//! Every `eval_interval` steps the model is scored on a fixed validation
//! set per noiser. Noisers whose loss sits above the reference get
//! sampled more: `p' ∝ p · exp(max(ℓ − ℓ_ref, 0))`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::denoising::{check_simplex, example_seed, DenoisedExample, NoiserTable, N_NOISERS};
use crate::error::{bail, Result};
use crate::model::{eval_examples, ModelCheckpoint};
use crate::packing::{ul2_source_len, TokenStream};
use crate::tensor::Real;

/// Loss gaps above this are clamped before exponentiation.
pub const MAX_GAP: f64 = 10.0;

/// Starting mixture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialMix {
    #[default]
    Uniform,
    /// Weights proportional to instance counts: `k` for every span
    /// noiser, one for the prefix/continuation noiser.
    NumProportional { k: f64 },
    Explicit(Vec<f64>),
}

impl InitialMix {
    pub fn probabilities(&self, table: &NoiserTable) -> Result<[f64; N_NOISERS]> {
        let w: Vec<f64> = match self {
            InitialMix::Uniform => vec![1.0; N_NOISERS],
            InitialMix::NumProportional { k } => {
                if !(*k > 0.0 && k.is_finite()) {
                    bail!(Config, "instance count {k} must be positive");
                }
                table.specs().iter().map(|s| if s.is_sequential() { 1.0 } else { *k }).collect()
            }
            InitialMix::Explicit(p) => p.clone(),
        };
        if w.len() != N_NOISERS {
            bail!(Config, "initial mix has {} entries, expected {N_NOISERS}", w.len());
        }
        let total: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / total).collect();
        check_simplex(&p)?;
        Ok(p.try_into().unwrap())
    }
}

/// Where the reference losses come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// The model before this stage's prune action.
    #[default]
    Parent,
    /// The pruned model before any recovery step.
    PrunedStart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub eval_interval: usize,
    pub initial: InitialMix,
    pub reference: ReferenceSource,
    /// Validation examples per noiser.
    pub val_examples: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig { eval_interval: 100, initial: InitialMix::Uniform, reference: ReferenceSource::Parent, val_examples: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub p: [f64; N_NOISERS],
    pub ell_ref: [f64; N_NOISERS],
    pub last_losses: Option<[f64; N_NOISERS]>,
    pub eval_interval: usize,
    /// Training step the mixture was last updated at.
    pub step: usize,
    pub updates: usize,
}

impl CurriculumState {
    pub fn new(p: [f64; N_NOISERS], ell_ref: [f64; N_NOISERS], eval_interval: usize) -> Result<Self> {
        if eval_interval == 0 {
            bail!(Config, "evaluation interval must be positive");
        }
        let state = CurriculumState { p, ell_ref, last_losses: None, eval_interval, step: 0, updates: 0 };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        check_simplex(&self.p)?;
        if let Some(bad) = self.ell_ref.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            bail!(Contract, "reference loss {bad} is not finite and nonnegative");
        }
        Ok(())
    }
}

/// Clamped loss gaps `min(max(ℓ − ℓ_ref, 0), MAX_GAP)`.
pub fn loss_gaps(losses: &[f64; N_NOISERS], ell_ref: &[f64; N_NOISERS]) -> [f64; N_NOISERS] {
    std::array::from_fn(|i| (losses[i] - ell_ref[i]).clamp(0.0, MAX_GAP))
}

pub fn update_weights(state: &CurriculumState, losses: &[f64; N_NOISERS]) -> Result<CurriculumState> {
    state.validate()?;
    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
        bail!(Contract, "validation loss {bad} is not finite");
    }
    let delta = loss_gaps(losses, &state.ell_ref);
    let p = if delta.iter().all(|&d| d == 0.0) {
        state.p
    } else {
        let alpha: [f64; N_NOISERS] = std::array::from_fn(|i| state.p[i] * delta[i].exp());
        let total: f64 = alpha.iter().sum();
        alpha.map(|a| a / total)
    };
    Ok(CurriculumState {
        p,
        last_losses: Some(*losses),
        step: state.step + state.eval_interval,
        updates: state.updates + 1,
        ..state.clone()
    })
}

/// Frozen per-noiser validation sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValSuite {
    sets: Vec<Vec<DenoisedExample>>,
}

impl ValSuite {
    pub fn new(sets: Vec<Vec<DenoisedExample>>) -> Result<Self> {
        if sets.len() != N_NOISERS {
            bail!(Contract, "validation suite has {} sets, expected {N_NOISERS}", sets.len());
        }
        if let Some(i) = sets.iter().position(|s| s.iter().all(|e| e.loss_tokens() == 0)) {
            bail!(Contract, "validation set {i} has no loss tokens");
        }
        Ok(ValSuite { sets })
    }

    /// `per_type` examples for every noiser, each drawn from the start of
    /// the dev documents so all noisers see the same text.
    pub fn build(
        docs: &[Vec<u32>],
        table: &NoiserTable,
        per_type: usize,
        max_enc: usize,
        max_dec: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut sets = Vec::with_capacity(table.len());
        for (i, spec) in table.specs().iter().enumerate() {
            let len = ul2_source_len(spec, max_enc, max_dec)?;
            let mut stream = TokenStream::new(docs).cycled();
            let mut set = Vec::with_capacity(per_type);
            for j in 0..per_type {
                let Some(window) = stream.take(len) else {
                    bail!(Input, "dev documents are empty");
                };
                let s = example_seed(seed, (i * per_type + j) as u64);
                set.push(spec.apply(&window, s)?.padded(max_enc, max_dec));
            }
            sets.push(set);
        }
        ValSuite::new(sets)
    }

    pub fn sets(&self) -> &[Vec<DenoisedExample>] {
        &self.sets
    }
}

/// Mean masked cross-entropy of the model on every validation set.
pub fn eval_noise_losses<F: Real>(model: &ModelCheckpoint<F>, suite: &ValSuite, batch_size: usize) -> Result<[f64; N_NOISERS]> {
    let mut out = [0.0; N_NOISERS];
    for (o, set) in out.iter_mut().zip(&suite.sets) {
        *o = eval_examples(model, set, batch_size)?.mean()?;
    }
    Ok(out)
}

/// Runs an update when `t` is a multiple of the evaluation interval.
pub fn maybe_update<F: Real>(
    state: &CurriculumState,
    model: &ModelCheckpoint<F>,
    suite: &ValSuite,
    t: usize,
    batch_size: usize,
) -> Result<CurriculumState> {
    if t == 0 {
        bail!(Contract, "curriculum steps start at 1");
    }
    if !t.is_multiple_of(state.eval_interval) {
        return Ok(state.clone());
    }
    let losses = eval_noise_losses(model, suite, batch_size)?;
    let mut next = update_weights(state, &losses)?;
    next.step = t;
    Ok(next)
}

pub fn trajectory_header() -> Vec<String> {
    let names = NoiserTable::canonical().specs().iter().map(|s| s.name).collect::<Vec<_>>();
    std::iter::once("step".to_string())
        .chain(names.iter().map(|n| format!("p_{n}")))
        .chain(names.iter().map(|n| format!("l_{n}")))
        .collect()
}

/// One row per mixture update.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub p: [f64; N_NOISERS],
    pub losses: [f64; N_NOISERS],
}

impl TrajectoryRow {
    pub fn from_state(state: &CurriculumState) -> Option<Self> {
        state.last_losses.map(|losses| TrajectoryRow { step: state.step, p: state.p, losses })
    }
}

pub fn write_trajectory<W: Write>(out: W, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header())?;
    for r in rows {
        let fields = std::iter::once(r.step.to_string()).chain(r.p.iter().chain(&r.losses).map(f64::to_string));
        w.write_record(fields)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory<R: Read>(input: R) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(trajectory_header().iter().map(String::as_str)) {
        bail!(Format, "trajectory header does not match");
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| crate::Error::Format(format!("bad trajectory field {i}")))
        };
        let step = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| crate::Error::Format("bad step".into()))?;
        let mut p = [0.0; N_NOISERS];
        let mut losses = [0.0; N_NOISERS];
        for i in 0..N_NOISERS {
            p[i] = num(1 + i)?;
            losses[i] = num(1 + N_NOISERS + i)?;
        }
        rows.push(TrajectoryRow { step, p, losses });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(p: [f64; N_NOISERS]) -> CurriculumState {
        CurriculumState::new(p, [1.0; N_NOISERS], 100).unwrap()
    }

    #[test]
    fn two_type_reduction() {
        let mut p = [0.0; N_NOISERS];
        p[0] = 0.5;
        p[1] = 0.5;
        let mut losses = [1.0; N_NOISERS];
        losses[0] = 1.0 + std::f64::consts::LN_2;
        let next = update_weights(&state(p), &losses).unwrap();
        assert!((next.p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((next.p[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(next.updates, 1);
    }

    #[test]
    fn no_gap_is_a_fixed_point() {
        let p = [0.1, 0.2, 0.05, 0.15, 0.2, 0.2, 0.1];
        let next = update_weights(&state(p), &[0.5; N_NOISERS]).unwrap();
        assert_eq!(next.p, p);
        assert!(update_weights(&state(p), &[f64::NAN; N_NOISERS]).is_err());
    }

    #[test]
    fn gaps_are_clamped() {
        let mut losses = [1.0; N_NOISERS];
        losses[2] = 1e6;
        let next = update_weights(&state([1.0 / 7.0; N_NOISERS]), &losses).unwrap();
        let e = MAX_GAP.exp();
        assert!((next.p[2] - e / (e + 6.0)).abs() < 1e-12);
    }

    #[test]
    fn initial_mixes() {
        let t = NoiserTable::canonical();
        assert_eq!(InitialMix::Uniform.probabilities(&t).unwrap(), [1.0 / 7.0; N_NOISERS]);
        let p = InitialMix::NumProportional { k: 4.0 }.probabilities(&t).unwrap();
        assert!((p[2] - 1.0 / 25.0).abs() < 1e-15 && (p[0] - 4.0 / 25.0).abs() < 1e-15);
        assert!(InitialMix::Explicit(vec![1.0; 3]).probabilities(&t).is_err());
    }

    #[test]
    fn trajectory_roundtrip() {
        let rows = vec![TrajectoryRow { step: 100, p: [1.0 / 7.0; N_NOISERS], losses: [std::f64::consts::PI; N_NOISERS] }];
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,p_R1,p_R2,p_S,p_X1,p_X2,p_X3,p_X4,l_R1,l_R2,l_S,l_X1,l_X2,l_X3,l_X4\n"));
        assert_eq!(read_trajectory(&buf[..]).unwrap(), rows);
    }
}
