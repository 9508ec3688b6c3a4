//! Training loops, schedules and the staged compression pipeline.
//!
//! A stage applies its prune action, then trains with one of three
//! objectives: classic UL2 with a fixed mixture, Dynamic-UL2 with the
//! curriculum steering the mixture, or Optimized-UL2 fixed-shape batches.
//! Every stage is a pure function of its input checkpoint, its data
//! offset and its seed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{train_tokenizer, Document, TokenFrequency, Tokenizer, Vocab};
use crate::curriculum::{
    update_weights, write_trajectory, CurriculumConfig, CurriculumState, ReferenceSource, TrajectoryRow, ValSuite,
};
use crate::denoising::{example_seed, DenoisedExample, NoiseSampler, NoiserTable, N_NOISERS};
use crate::error::{bail, Error, Result};
use crate::model::{batch_loss, eval_examples, save_checkpoint, Batch, EvalTotals, ModelCheckpoint, ModelConfig};
use crate::packing::{ul2_source_len, MixSpec, Oul2Generator, TokenStream};
use crate::pruning::{
    apply_vocab_plan, make_neural_plan, make_vocab_plan, plan_layer_drop, prune_layers, prune_neurons, save_plan,
    LayerPrunePlan, NeuralPrunePlan, VocabPrunePlan,
};
use crate::tensor::{Real, Tape};

/// Consecutive nonfinite losses tolerated before a stage is abandoned.
pub const DIVERGENCE_PATIENCE: usize = 10;

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        bail!(Contract, "step {step} beyond schedule of {total_steps} steps");
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * progress).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1, clip_norm: 1.0 }
    }
}

/// AdamW with moments kept in f64.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamConfig,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamW { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Clips, then updates every tensor that has a gradient. Returns the
    /// pre-clip gradient norm.
    pub fn step<F: Real>(&mut self, model: &mut ModelCheckpoint<F>, grads: &BTreeMap<String, Vec<F>>, lr: f64) -> f64 {
        let norm = grads.values().flatten().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
        let scale = if norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let c = &self.cfg;
        let (bc1, bc2) = (1.0 - c.beta1.powi(self.t), 1.0 - c.beta2.powi(self.t));
        for (name, g) in grads {
            let t = model.tensors.get_mut(name).expect("gradient for a model tensor");
            let decay = if t.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.f64() * scale;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps) + decay * w.f64();
                *w = F::of(w.f64() - lr * update);
            }
        }
        norm
    }
}

/// Loss and named gradients of one batch.
pub fn loss_and_grads<F: Real>(model: &ModelCheckpoint<F>, batch: &Batch) -> Result<(f64, BTreeMap<String, Vec<F>>)> {
    let mut tape = Tape::new();
    let params: BTreeMap<String, _> =
        model.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(&t.clone().with_grad(true)))).collect();
    let l = batch_loss(&mut tape, &params, &model.config, batch)?;
    let value = tape.value(l).data()[0].f64();
    let mut grads = tape.backward(l)?;
    let named = params.into_iter().filter_map(|(k, v)| grads.take(v).map(|g| (k, g))).collect();
    Ok((value, named))
}

/// One optimizer step. Returns the batch loss, or `None` when it was not
/// finite, in which case the model is left untouched.
pub fn train_step<F: Real>(model: &mut ModelCheckpoint<F>, opt: &mut AdamW, batch: &Batch, lr: f64) -> Result<Option<f64>> {
    let (loss, grads) = loss_and_grads(model, batch)?;
    if !loss.is_finite() || grads.values().flatten().any(|g| !g.f64().is_finite()) {
        return Ok(None);
    }
    opt.step(model, &grads, lr);
    Ok(Some(loss))
}

/// `exp` of the mean masked negative log-likelihood.
pub fn evaluate_ppl<F: Real>(model: &ModelCheckpoint<F>, dev: &[DenoisedExample], batch_size: usize) -> Result<f64> {
    if dev.is_empty() {
        bail!(Contract, "empty dev set");
    }
    Ok(eval_examples(model, dev, batch_size)?.mean()?.exp())
}

/// Per-noiser losses and the token-weighted loss over the whole suite.
pub fn suite_losses<F: Real>(model: &ModelCheckpoint<F>, suite: &ValSuite, batch_size: usize) -> Result<([f64; N_NOISERS], f64)> {
    let mut per = [0.0; N_NOISERS];
    let mut all = EvalTotals::default();
    for (p, set) in per.iter_mut().zip(suite.sets()) {
        let t = eval_examples(model, set, batch_size)?;
        *p = t.mean()?;
        all.nll += t.nll;
        all.tokens += t.tokens;
    }
    Ok((per, all.mean()?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Fixed noiser mixture, one noiser per batch.
    Ul2,
    /// Mixture steered by the curriculum.
    Dul2,
    /// Fixed-shape mixed and continuation examples.
    Oul2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneAction {
    Layers(LayerPrunePlan),
    Neural(NeuralPrunePlan),
    Vocab(VocabPrunePlan),
}

impl PruneAction {
    pub fn apply<F: Real>(&self, model: &ModelCheckpoint<F>) -> Result<ModelCheckpoint<F>> {
        match self {
            PruneAction::Layers(p) => prune_layers(model, p),
            PruneAction::Neural(p) => prune_neurons(model, p),
            PruneAction::Vocab(p) => apply_vocab_plan(model, p),
        }
    }

    /// The config after this action, checking the plan against `cfg`.
    pub fn apply_config(&self, cfg: &ModelConfig) -> Result<ModelConfig> {
        let mut out = cfg.clone();
        match self {
            PruneAction::Layers(p) => {
                p.validate(cfg.n_enc_layers, cfg.n_dec_layers)?;
                out.n_enc_layers -= p.enc_drop.len();
                out.n_dec_layers -= p.dec_drop.len();
            }
            PruneAction::Neural(p) => {
                p.validate(cfg)?;
                out.hidden = p.target_hidden;
                out.ffn = p.target_ffn;
                out.n_heads = p.target_heads;
            }
            PruneAction::Vocab(p) => {
                if p.source_size != cfg.vocab_size {
                    bail!(Plan, "vocabulary plan for {} applied to {}", p.source_size, cfg.vocab_size);
                }
                out.vocab_size = p.keep_k;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchShape {
    pub batch_size: usize,
    pub enc_len: usize,
    pub dec_len: usize,
}

impl BatchShape {
    pub fn tokens(&self) -> usize {
        self.batch_size * (self.enc_len + self.dec_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage_id: usize,
    pub label: String,
    pub objective: Objective,
    pub token_budget: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub prune_action: Option<PruneAction>,
    pub batch: BatchShape,
    /// Fixed-shape settings, required by the Optimized-UL2 objective.
    pub mix: Option<MixSpec>,
}

impl StagePlan {
    pub fn steps(&self) -> usize {
        self.token_budget / self.batch.tokens()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max >= self.lr_min && self.lr_min > 0.0) {
            bail!(Config, "stage {}: need lr_max >= lr_min > 0, got {} / {}", self.stage_id, self.lr_max, self.lr_min);
        }
        if self.token_budget == 0 || self.batch.batch_size == 0 || self.steps() == 0 {
            bail!(Config, "stage {}: token budget {} buys no steps", self.stage_id, self.token_budget);
        }
        if self.objective == Objective::Oul2 {
            let Some(mix) = &self.mix else {
                bail!(Config, "stage {}: Optimized-UL2 needs a mix spec", self.stage_id);
            };
            mix.geometry()?;
            if (mix.enc_len_fixed, mix.dec_len_fixed) != (self.batch.enc_len, self.batch.dec_len) {
                bail!(Config, "stage {}: mix shape differs from batch shape", self.stage_id);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub dev_loss: f64,
    pub losses: [f64; N_NOISERS],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub trajectory: Vec<TrajectoryRow>,
}

impl TrainLog {
    pub fn dev_start(&self) -> Option<f64> {
        self.evals.first().map(|e| e.dev_loss)
    }

    pub fn dev_end(&self) -> Option<f64> {
        self.evals.last().map(|e| e.dev_loss)
    }
}

pub fn write_train_log<W: Write>(out: W, rows: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn eval_header() -> Vec<String> {
    let names = NoiserTable::canonical().specs().iter().map(|s| format!("l_{}", s.name)).collect::<Vec<_>>();
    ["step".to_string(), "dev_loss".to_string()].into_iter().chain(names).collect()
}

pub fn write_eval_log<W: Write>(out: W, rows: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(eval_header())?;
    for r in rows {
        let fields = [r.step.to_string(), r.dev_loss.to_string()].into_iter().chain(r.losses.iter().map(f64::to_string));
        w.write_record(fields)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything a stage reads besides its model and plan.
#[derive(Clone, Debug)]
pub struct StageEnv<'a> {
    pub train_docs: &'a [Vec<u32>],
    pub suite: &'a ValSuite,
    pub table: &'a NoiserTable,
    pub adam: AdamConfig,
    /// Steps between curriculum updates, each preceded by a dev evaluation.
    pub eval_interval: usize,
    /// Steps between dev evaluations in stages without a curriculum.
    pub monitor_interval: usize,
    pub eval_batch: usize,
    /// Where to leave the last good checkpoint if training diverges.
    pub rescue_dir: Option<PathBuf>,
}

/// Builds training batches for one stage.
enum BatchSource<'a> {
    Ul2 { stream: TokenStream<'a>, sampler: NoiseSampler, fits: Vec<usize>, shape: BatchShape, seed: u64, next: u64 },
    Oul2 { stream: TokenStream<'a>, gen: Oul2Generator, size: usize },
}

impl BatchSource<'_> {
    fn next(&mut self, table: &NoiserTable, p: &[f64]) -> Result<Batch> {
        let examples = match self {
            BatchSource::Ul2 { stream, sampler, fits, shape, seed, next } => {
                let i = sampler.draw(p)?;
                let spec = table.get(i);
                let mut out = Vec::with_capacity(shape.batch_size);
                for _ in 0..shape.batch_size {
                    let window = stream.take(fits[i]).ok_or_else(|| Error::Input("training corpus is empty".into()))?;
                    out.push(spec.apply(&window, example_seed(*seed, *next))?.padded(shape.enc_len, shape.dec_len));
                    *next += 1;
                }
                out
            }
            BatchSource::Oul2 { stream, gen, size } => {
                let mut out = Vec::with_capacity(*size);
                for _ in 0..*size {
                    out.push(gen.next(stream)?.ok_or_else(|| Error::Input("training corpus is empty".into()))?);
                }
                out
            }
        };
        Batch::from_examples(&examples)
    }
}

/// Applies the stage's prune action, then trains for `plan.steps()`
/// steps. A curriculum is required for Dynamic-UL2 and steers the noiser
/// mixture; Classic UL2 samples uniformly.
pub fn train_stage<F: Real>(
    model: &ModelCheckpoint<F>,
    plan: &StagePlan,
    env: &StageEnv,
    data_offset: usize,
    curriculum: Option<CurriculumState>,
    seed: u64,
) -> Result<(ModelCheckpoint<F>, TrainLog)> {
    plan.validate()?;
    let mut model = match &plan.prune_action {
        Some(a) => a.apply(model)?,
        None => model.clone(),
    };
    model.set_meta("stage", plan.label.clone());
    let mut state = match (plan.objective, curriculum) {
        (Objective::Dul2, Some(s)) => Some(s),
        (Objective::Dul2, None) => bail!(Config, "stage {}: Dynamic-UL2 needs a curriculum", plan.stage_id),
        _ => None,
    };
    let stream = TokenStream::new(env.train_docs).starting_at(data_offset).cycled();
    let mut source = match plan.objective {
        Objective::Oul2 => {
            let mix = plan.mix.as_ref().expect("validated");
            BatchSource::Oul2 { stream, gen: Oul2Generator::new(mix, seed)?, size: plan.batch.batch_size }
        }
        _ => {
            let fits = env
                .table
                .specs()
                .iter()
                .map(|s| ul2_source_len(s, plan.batch.enc_len, plan.batch.dec_len))
                .collect::<Result<_>>()?;
            BatchSource::Ul2 { stream, sampler: NoiseSampler::new(seed), fits, shape: plan.batch, seed, next: 0 }
        }
    };
    let uniform = [1.0 / N_NOISERS as f64; N_NOISERS];
    let mut log = TrainLog::default();
    let (losses, dev) = suite_losses(&model, env.suite, env.eval_batch)?;
    log.evals.push(EvalRecord { step: 0, dev_loss: dev, losses });
    if let Some(s) = &state {
        log.trajectory.push(TrajectoryRow { step: 0, p: s.p, losses });
    }
    let mut opt = AdamW::new(env.adam.clone());
    let total = plan.steps();
    let interval = if state.is_some() { env.eval_interval } else { env.monitor_interval };
    let mut bad = 0;
    for t in 1..=total {
        let p = state.as_ref().map_or(&uniform, |s| &s.p);
        let batch = source.next(env.table, p)?;
        let lr = cosine_lr(t - 1, total, plan.lr_max, plan.lr_min)?;
        match train_step(&mut model, &mut opt, &batch, lr)? {
            Some(loss) => {
                bad = 0;
                log.steps.push(StepRecord { step: t, lr, train_loss: loss });
            }
            None => {
                bad += 1;
                log.steps.push(StepRecord { step: t, lr, train_loss: f64::NAN });
                if bad >= DIVERGENCE_PATIENCE {
                    if let Some(dir) = &env.rescue_dir {
                        save_checkpoint(&model, dir)?;
                    }
                    return Err(Error::Divergence { step: t, reason: format!("{bad} consecutive nonfinite losses") });
                }
            }
        }
        if t % interval == 0 && t != total {
            let (losses, dev) = suite_losses(&model, env.suite, env.eval_batch)?;
            log.evals.push(EvalRecord { step: t, dev_loss: dev, losses });
            if let Some(s) = state.as_mut() {
                let mut next = update_weights(s, &losses)?;
                next.step = t;
                log.trajectory.extend(TrajectoryRow::from_state(&next));
                *s = next;
            }
        }
    }
    let (losses, dev) = suite_losses(&model, env.suite, env.eval_batch)?;
    log.evals.push(EvalRecord { step: total, dev_loss: dev, losses });
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Documents the tokenizer is trained on (taken from the front).
    pub tokenizer_docs: usize,
    /// Documents held out at the end for validation.
    pub dev_docs: usize,
    /// Budget of stages 1 to 5, split by `stage_ratios`.
    pub total_tokens: usize,
    pub stage_ratios: [usize; 5],
    /// Budget of the base pretraining run that produces the parent model.
    pub base_tokens: usize,
    pub base_lr: (f64, f64),
    pub prune_lr: (f64, f64),
    pub continual_lr: (f64, f64),
    pub batch: BatchShape,
    /// Encoder length of the fixed-shape stage; the decoder length is
    /// derived from it.
    pub oul2_enc_len: usize,
    pub oul2_batch_size: usize,
    pub curriculum: CurriculumConfig,
    pub adam: AdamConfig,
    pub eval_batch: usize,
    /// Steps between dev evaluations outside the curriculum stages.
    pub monitor_interval: usize,
    /// Retained vocabulary after the final cut.
    pub vocab_keep: usize,
    /// Layers dropped per stack in stages 1 to 3.
    pub layer_drops: [(usize, usize); 3],
    pub neural_targets: (usize, usize, usize),
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 17,
            model: ModelConfig::toy_default(),
            tokenizer_docs: 1500,
            dev_docs: 200,
            total_tokens: 2_000_000,
            stage_ratios: [10, 10, 15, 65, 700],
            base_tokens: 400_000,
            base_lr: (1e-3, 1e-4),
            prune_lr: (1e-4, 5e-5),
            continual_lr: (5e-5, 1e-5),
            batch: BatchShape { batch_size: 4, enc_len: 128, dec_len: 96 },
            oul2_enc_len: 256,
            oul2_batch_size: 4,
            curriculum: CurriculumConfig { eval_interval: 10, val_examples: 8, ..Default::default() },
            adam: AdamConfig::default(),
            eval_batch: 16,
            monitor_interval: 100,
            vocab_keep: 1890,
            layer_drops: [(1, 2), (1, 1), (0, 1)],
            neural_targets: (80, 216, 4),
        }
    }
}

impl PipelineConfig {
    pub fn stage_budget(&self, stage: usize) -> usize {
        let total: usize = self.stage_ratios.iter().sum();
        self.total_tokens * self.stage_ratios[stage - 1] / total
    }

    /// Stage plans for stages 1 to 5, with the layer and neural plans
    /// made against the configs the earlier stages leave behind.
    pub fn stage_plans(&self) -> Result<Vec<StagePlan>> {
        let mut cfg = self.model.clone();
        let mut plans = Vec::with_capacity(5);
        for (i, &(enc, dec)) in self.layer_drops.iter().enumerate() {
            let stage_id = i + 1;
            let action = PruneAction::Layers(plan_layer_drop(&cfg, enc, dec, &format!("stage{stage_id}"))?);
            cfg = action.apply_config(&cfg)?;
            plans.push(self.recovery_plan(stage_id, Some(action)));
        }
        let (h, f, heads) = self.neural_targets;
        let action = PruneAction::Neural(make_neural_plan(&cfg, h, f, heads, self.seed.wrapping_add(4))?);
        action.apply_config(&cfg)?;
        plans.push(self.recovery_plan(4, Some(action)));
        let mix = MixSpec::for_enc_len(self.oul2_enc_len, 0.25)?;
        plans.push(StagePlan {
            stage_id: 5,
            label: "stage5".into(),
            objective: Objective::Oul2,
            token_budget: self.stage_budget(5),
            lr_max: self.continual_lr.0,
            lr_min: self.continual_lr.1,
            prune_action: None,
            batch: BatchShape { batch_size: self.oul2_batch_size, enc_len: mix.enc_len_fixed, dec_len: mix.dec_len_fixed },
            mix: Some(mix),
        });
        for p in &plans {
            p.validate()?;
        }
        Ok(plans)
    }

    fn recovery_plan(&self, stage_id: usize, action: Option<PruneAction>) -> StagePlan {
        StagePlan {
            stage_id,
            label: format!("stage{stage_id}"),
            objective: Objective::Dul2,
            token_budget: self.stage_budget(stage_id),
            lr_max: self.prune_lr.0,
            lr_min: self.prune_lr.1,
            prune_action: action,
            batch: self.batch,
            mix: None,
        }
    }

    /// Model shape a stage starts from: the configured model with every
    /// earlier stage's prune action applied.
    pub fn stage_input_config(&self, stage_id: usize) -> Result<ModelConfig> {
        if stage_id > 5 {
            bail!(Config, "no stage {stage_id}; stages run from 0 to 5");
        }
        let mut cfg = self.model.clone();
        for plan in self.stage_plans()?.iter().take_while(|p| p.stage_id < stage_id) {
            if let Some(a) = &plan.prune_action {
                cfg = a.apply_config(&cfg)?;
            }
        }
        Ok(cfg)
    }

    pub fn base_plan(&self) -> StagePlan {
        StagePlan {
            stage_id: 0,
            label: "base".into(),
            objective: Objective::Ul2,
            token_budget: self.base_tokens,
            lr_max: self.base_lr.0,
            lr_min: self.base_lr.1,
            prune_action: None,
            batch: self.batch,
            mix: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.dev_docs == 0 || self.tokenizer_docs == 0 {
            bail!(Config, "dev and tokenizer document counts must be positive");
        }
        if self.curriculum.eval_interval == 0 || self.monitor_interval == 0 || self.eval_batch == 0 {
            bail!(Config, "evaluation interval and batch must be positive");
        }
        if self.vocab_keep > self.model.vocab_size {
            bail!(Config, "vocab_keep {} exceeds vocabulary {}", self.vocab_keep, self.model.vocab_size);
        }
        self.base_plan().validate()?;
        let plans = self.stage_plans()?;
        let mut cfg = self.model.clone();
        for p in &plans {
            if let Some(a) = &p.prune_action {
                cfg = a.apply_config(&cfg)?;
            }
        }
        Ok(())
    }
}

/// Outcome of one stage of the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage_id: usize,
    pub label: String,
    pub objective: Objective,
    pub steps: usize,
    pub token_budget: usize,
    pub params: usize,
    /// Dev loss of the input model, before the prune action.
    pub dev_parent: f64,
    /// Dev loss right after the prune action.
    pub dev_start: f64,
    pub dev_end: f64,
    /// Training compute, estimated as six FLOPs per parameter per position.
    pub est_flops: f64,
    pub checkpoint: Option<String>,
    pub plan: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabCutReport {
    pub keep_k: usize,
    pub params: usize,
    pub dev_before: f64,
    pub dev_after: f64,
    pub checkpoint: Option<String>,
    pub plan: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub seed: u64,
    pub original_params: usize,
    pub final_params: usize,
    pub stages: Vec<StageReport>,
    pub vocab_cut: VocabCutReport,
}

/// Everything a finished pipeline leaves in memory.
pub struct PipelineResult {
    pub base: ModelCheckpoint,
    pub stage_models: Vec<ModelCheckpoint>,
    pub final_model: ModelCheckpoint,
    pub vocab: Vocab,
    pub final_vocab: Vocab,
    pub frequencies: TokenFrequency,
    pub logs: Vec<TrainLog>,
    pub manifest: PipelineManifest,
    pub dev_docs: Vec<Document>,
    /// Dev suite under the original tokenizer.
    pub suite: ValSuite,
}

/// Tokenized corpus split into tokenizer, training and dev parts.
pub struct PreparedCorpus {
    pub vocab: Vocab,
    pub train: Vec<Vec<u32>>,
    pub dev: Vec<Vec<u32>>,
    pub dev_docs: Vec<Document>,
    pub frequencies: TokenFrequency,
}

pub fn prepare_corpus(cfg: &PipelineConfig, docs: &[Document]) -> Result<PreparedCorpus> {
    if docs.len() <= cfg.dev_docs {
        bail!(Input, "{} documents cannot spare {} for validation", docs.len(), cfg.dev_docs);
    }
    let (train_docs, dev_docs) = docs.split_at(docs.len() - cfg.dev_docs);
    let vocab = train_tokenizer(&train_docs[..cfg.tokenizer_docs.min(train_docs.len())], cfg.model.vocab_size)?;
    let train: Vec<Vec<u32>> = train_docs.iter().map(|d| vocab.encode(&d.text)).collect();
    let dev = dev_docs.iter().map(|d| vocab.encode(&d.text)).collect();
    let mut frequencies = TokenFrequency::zeros(vocab.vocab_size());
    for ids in &train {
        frequencies.add(ids);
    }
    Ok(PreparedCorpus { vocab, train, dev, dev_docs: dev_docs.to_vec(), frequencies })
}

fn data_offset(seed: u64, stage: usize, docs: usize) -> usize {
    (example_seed(seed, 1000 + stage as u64) % docs.max(1) as u64) as usize
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Corpus, dev suite and settings shared by every stage of a run.
pub struct PipelineContext {
    pub cfg: PipelineConfig,
    pub corpus: PreparedCorpus,
    pub table: NoiserTable,
    /// Dev suite under the original tokenizer.
    pub suite: ValSuite,
    pub rescue_dir: Option<PathBuf>,
}

impl PipelineContext {
    pub fn new(cfg: &PipelineConfig, docs: &[Document]) -> Result<Self> {
        cfg.validate()?;
        let corpus = prepare_corpus(cfg, docs)?;
        let table = NoiserTable::canonical();
        let suite = Self::dev_suite(cfg, &table, &corpus.dev)?;
        Ok(PipelineContext { cfg: cfg.clone(), corpus, table, suite, rescue_dir: None })
    }

    /// Validation suite over tokenized dev documents at the recovery batch shape.
    pub fn dev_suite(cfg: &PipelineConfig, table: &NoiserTable, dev: &[Vec<u32>]) -> Result<ValSuite> {
        let (enc, dec) = (cfg.batch.enc_len, cfg.batch.dec_len);
        ValSuite::build(dev, table, cfg.curriculum.val_examples, enc, dec, cfg.seed ^ 0x5eed)
    }

    /// The stage plan with this id: 0 is base pretraining.
    pub fn plan(&self, stage_id: usize) -> Result<StagePlan> {
        if stage_id == 0 {
            return Ok(self.cfg.base_plan());
        }
        let plans = self.cfg.stage_plans()?;
        match plans.into_iter().find(|p| p.stage_id == stage_id) {
            Some(p) => Ok(p),
            None => bail!(Config, "no stage {stage_id}; stages run from 0 to 5"),
        }
    }

    /// Per-noiser losses and overall dev loss under the original tokenizer.
    pub fn dev_losses<F: Real>(&self, model: &ModelCheckpoint<F>) -> Result<([f64; N_NOISERS], f64)> {
        suite_losses(model, &self.suite, self.cfg.eval_batch)
    }

    /// Runs one stage from its input checkpoint. The result depends only
    /// on the parent, the plan and the run config.
    pub fn run_stage(&self, parent: &ModelCheckpoint, plan: &StagePlan) -> Result<(ModelCheckpoint, TrainLog)> {
        let cfg = &self.cfg;
        let curriculum = if plan.objective == Objective::Dul2 {
            let p0 = cfg.curriculum.initial.probabilities(&self.table)?;
            let ell_ref = match cfg.curriculum.reference {
                ReferenceSource::Parent => self.dev_losses(parent)?.0,
                ReferenceSource::PrunedStart => {
                    let pruned = plan.prune_action.as_ref().map_or(Ok(parent.clone()), |a| a.apply(parent))?;
                    self.dev_losses(&pruned)?.0
                }
            };
            Some(CurriculumState::new(p0, ell_ref, cfg.curriculum.eval_interval)?)
        } else {
            None
        };
        let env = StageEnv {
            train_docs: &self.corpus.train,
            suite: &self.suite,
            table: &self.table,
            adam: cfg.adam.clone(),
            eval_interval: cfg.curriculum.eval_interval,
            monitor_interval: cfg.monitor_interval,
            eval_batch: cfg.eval_batch,
            rescue_dir: self.rescue_dir.clone(),
        };
        let offset = data_offset(cfg.seed, plan.stage_id, self.corpus.train.len());
        train_stage(parent, plan, &env, offset, curriculum, cfg.seed.wrapping_add(plan.stage_id as u64))
    }

    /// The final vocabulary cut, with the tokenizer and dev suite that go
    /// with the smaller vocabulary.
    pub fn vocab_cut(&self, model: &ModelCheckpoint) -> Result<(ModelCheckpoint, Vocab, VocabPrunePlan, ValSuite)> {
        let plan = make_vocab_plan(&self.corpus.frequencies, self.cfg.vocab_keep)?;
        let cut = apply_vocab_plan(model, &plan)?;
        let vocab = self.corpus.vocab.pruned(plan.retained_ids.clone())?;
        let dev: Vec<Vec<u32>> = self.corpus.dev_docs.iter().map(|d| vocab.encode(&d.text)).collect();
        let suite = Self::dev_suite(&self.cfg, &self.table, &dev)?;
        Ok((cut, vocab, plan, suite))
    }
}

/// Writes a stage's checkpoint, plan and logs under `dir/label`.
pub fn persist_stage(dir: &Path, plan: &StagePlan, model: &ModelCheckpoint, log: &TrainLog) -> Result<()> {
    let dir = dir.join(&plan.label);
    std::fs::create_dir_all(&dir)?;
    save_checkpoint(model, &dir.join("checkpoint"))?;
    write_file(&dir.join("train_log.csv"), |w| write_train_log(w, &log.steps))?;
    write_file(&dir.join("eval_log.csv"), |w| write_eval_log(w, &log.evals))?;
    if plan.objective == Objective::Dul2 {
        write_file(&dir.join("trajectory.csv"), |w| write_trajectory(w, &log.trajectory))?;
    }
    save_plan(plan, &dir.join("plan.json"))
}

/// Base pretraining, stages 1 to 5 and the final vocabulary cut. With
/// `out` set, every checkpoint, plan and log is written under it.
pub fn run_pipeline(cfg: &PipelineConfig, docs: &[Document], out: Option<&Path>) -> Result<PipelineResult> {
    let mut ctx = PipelineContext::new(cfg, docs)?;
    ctx.rescue_dir = out.map(|d| d.join("rescue"));
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        ctx.corpus.vocab.save(&dir.join("tokenizer.json"))?;
        std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    }
    let init = ModelCheckpoint::<f32>::build(cfg.model.clone(), cfg.seed)?;
    let original_params = init.param_count();
    let mut reports = Vec::new();
    let mut logs = Vec::new();
    let mut stage_models = Vec::new();
    let mut current = init;
    for stage_id in 0..=5 {
        let plan = ctx.plan(stage_id)?;
        let parent_dev = ctx.dev_losses(&current)?.1;
        let (next, log) = ctx.run_stage(&current, &plan)?;
        let paths = match out {
            Some(dir) => {
                persist_stage(dir, &plan, &next, &log)?;
                (Some(format!("{}/checkpoint", plan.label)), Some(format!("{}/plan.json", plan.label)))
            }
            None => (None, None),
        };
        reports.push(report(&plan, &next, &log, parent_dev, paths.0, paths.1));
        logs.push(log);
        stage_models.push(next.clone());
        current = next;
    }
    let base = stage_models.remove(0);
    let (final_model, final_vocab, vplan, final_suite) = ctx.vocab_cut(&current)?;
    let dev_before = ctx.dev_losses(&current)?.1;
    let dev_after = suite_losses(&final_model, &final_suite, cfg.eval_batch)?.1;
    let (mut vc, mut vp) = (None, None);
    if let Some(dir) = out.map(|d| d.join("vocab")) {
        std::fs::create_dir_all(&dir)?;
        let mut m = final_model.clone();
        m.set_meta("stage", "vocab");
        save_checkpoint(&m, &dir.join("checkpoint"))?;
        save_plan(&vplan, &dir.join("plan.json"))?;
        final_vocab.save(&dir.join("tokenizer.json"))?;
        vc = Some("vocab/checkpoint".into());
        vp = Some("vocab/plan.json".into());
    }
    let manifest = PipelineManifest {
        seed: cfg.seed,
        original_params,
        final_params: final_model.param_count(),
        stages: reports,
        vocab_cut: VocabCutReport {
            keep_k: cfg.vocab_keep,
            params: final_model.param_count(),
            dev_before,
            dev_after,
            checkpoint: vc,
            plan: vp,
        },
    };
    if let Some(dir) = out {
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    }
    let PipelineContext { corpus, suite, .. } = ctx;
    Ok(PipelineResult {
        base,
        stage_models,
        final_model,
        vocab: corpus.vocab,
        final_vocab,
        frequencies: corpus.frequencies,
        logs,
        manifest,
        dev_docs: corpus.dev_docs,
        suite,
    })
}

fn report(plan: &StagePlan, model: &ModelCheckpoint, log: &TrainLog, parent: f64, checkpoint: Option<String>, plan_path: Option<String>) -> StageReport {
    StageReport {
        stage_id: plan.stage_id,
        label: plan.label.clone(),
        objective: plan.objective,
        steps: log.steps.len(),
        token_budget: plan.token_budget,
        params: model.param_count(),
        dev_parent: parent,
        dev_start: log.dev_start().unwrap_or(f64::NAN),
        dev_end: log.dev_end().unwrap_or(f64::NAN),
        est_flops: 6.0 * model.param_count() as f64 * (log.steps.len() * plan.batch.tokens()) as f64,
        checkpoint,
        plan: plan_path,
    }
}
