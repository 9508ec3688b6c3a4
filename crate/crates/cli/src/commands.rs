use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ul2prune::corpus::{
    classify_lang, clean_corpus, dedup, read_jsonl, summarize, train_tokenizer, write_jsonl, Document, Lang, TokenFrequency, Tokenizer,
    Vocab,
};
use ul2prune::curriculum::ValSuite;
use ul2prune::denoising::{DenoisedExample, NoiseName, NoiserTable};
use ul2prune::model::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use ul2prune::packing::{build_batch_oul2, build_batch_ul2, measure_padding, PaddingStats};
use ul2prune::pruning::{
    apply_vocab_plan, load_plan, make_neural_plan, make_vocab_plan, plan_layer_drop, prune_layers, prune_neurons,
    save_plan, sweep_direct_prune, sweep_vocab, write_sweep, write_vocab_sweep, LayerPrunePlan, NeuralPrunePlan,
    PruneStrategy, VocabPrunePlan, VocabSweepDev,
};
use ul2prune::trainer::{
    persist_stage, run_pipeline, suite_losses, write_eval_log, EvalRecord, PipelineConfig, PipelineContext,
};
use ul2prune::{Error, Result};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PackObjective {
    Ul2,
    Oul2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    Layer,
    Neural,
    Vocab,
}

/// Padding summary written next to packed examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PadReport {
    pub examples: usize,
    pub padded_positions: usize,
    pub total_positions: usize,
    pub fraction: f64,
}

impl From<(usize, PaddingStats)> for PadReport {
    fn from((examples, s): (usize, PaddingStats)) -> Self {
        PadReport { examples, padded_positions: s.padded_positions, total_positions: s.total_positions, fraction: s.fraction }
    }
}

/// Dev perplexity and per-noiser losses of one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub params: usize,
    pub vocab_size: usize,
    pub dev_loss: f64,
    pub ppl: f64,
    pub losses: Vec<(NoiseName, f64)>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// One JSON record per line, with errors carrying the line number.
fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

fn read_docs(input: Option<&Path>, cfg: &RunConfig) -> Result<Vec<Document>> {
    match input {
        Some(p) => read_jsonl(p),
        None => cfg.documents(),
    }
}

/// The tokenizer from `path`, or one trained exactly as the pipeline does.
fn tokenizer(path: Option<&Path>, cfg: &PipelineConfig, docs: &[Document]) -> Result<Vocab> {
    match path {
        Some(p) => Vocab::load(p),
        None => {
            let train = &docs[..docs.len().saturating_sub(cfg.dev_docs)];
            train_tokenizer(&train[..cfg.tokenizer_docs.min(train.len())], cfg.model.vocab_size)
        }
    }
}

fn check_vocab(model: &ModelCheckpoint, vocab: &Vocab) -> Result<()> {
    if model.config.vocab_size != vocab.vocab_size() {
        return Err(Error::Plan(format!(
            "checkpoint vocabulary {} does not match tokenizer vocabulary {}",
            model.config.vocab_size,
            vocab.vocab_size()
        )));
    }
    Ok(())
}

/// Dev documents: the tail of the corpus the pipeline holds out.
fn dev_docs<'a>(cfg: &PipelineConfig, docs: &'a [Document]) -> Result<&'a [Document]> {
    if docs.len() <= cfg.dev_docs {
        return Err(Error::Input(format!("{} documents cannot spare {} for validation", docs.len(), cfg.dev_docs)));
    }
    Ok(&docs[docs.len() - cfg.dev_docs..])
}

fn dev_suite(cfg: &PipelineConfig, vocab: &Vocab, docs: &[Document]) -> Result<ValSuite> {
    let ids: Vec<Vec<u32>> = dev_docs(cfg, docs)?.iter().map(|d| vocab.encode(&d.text)).collect();
    PipelineContext::dev_suite(cfg, &NoiserTable::canonical(), &ids)
}

fn stage_name(out: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    Ok(out.join(name))
}

pub fn corpus_clean(cfg: &RunConfig, input: Option<&Path>, out: &Path) -> Result<()> {
    let docs = read_docs(input, cfg)?;
    let (kept, stats) = clean_corpus(&docs, &cfg.corpus.filters);
    write_jsonl(&stage_name(out, "clean.jsonl")?, &kept)?;
    write_json(&out.join("clean_stats.json"), &stats)?;
    println!("clean: {} -> {} documents", stats.docs_in, stats.docs_out);
    Ok(())
}

pub fn corpus_dedup(cfg: &RunConfig, input: Option<&Path>, out: &Path) -> Result<()> {
    let docs = read_docs(input, cfg)?;
    let (kept, stats) = dedup(&docs, &cfg.corpus.filters.dedup)?;
    write_jsonl(&stage_name(out, "dedup.jsonl")?, &kept)?;
    write_json(&out.join("dedup_stats.json"), &stats)?;
    println!("dedup: {} -> {} documents", docs.len(), kept.len());
    Ok(())
}

pub fn corpus_stats(cfg: &RunConfig, input: Option<&Path>, out: &Path) -> Result<()> {
    let docs = read_docs(input, cfg)?;
    let stats = summarize(&docs, &cfg.corpus.filters)?;
    write_json(&stage_name(out, "corpus_stats.json")?, &stats)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

/// Packs the corpus into fixed-shape examples under either objective.
pub fn pack(cfg: &RunConfig, objective: PackObjective, input: Option<&Path>, tok: Option<&Path>, out: &Path) -> Result<()> {
    let docs = read_docs(input, cfg)?;
    let vocab = tokenizer(tok, &cfg.pipeline, &docs)?;
    let ids: Vec<Vec<u32>> = docs.iter().map(|d| vocab.encode(&d.text)).collect();
    let (enc, dec) = (cfg.pack.enc_len, cfg.pack.dec_len);
    let examples = match objective {
        PackObjective::Ul2 => {
            let table = NoiserTable::canonical();
            let p = cfg.pipeline.curriculum.initial.probabilities(&table)?;
            build_batch_ul2(&ids, &table, &p, enc, dec, cfg.seed())?
        }
        PackObjective::Oul2 => build_batch_oul2(&ids, &cfg.pack.mix_spec(), cfg.seed())?,
    };
    let report = PadReport::from((examples.len(), measure_padding(&examples)?));
    write_jsonl(&stage_name(out, "examples.jsonl")?, &examples)?;
    vocab.save(&out.join("tokenizer.json"))?;
    write_json(&out.join("padstats.json"), &report)?;
    println!("{} examples, padding fraction {:.4}", report.examples, report.fraction);
    Ok(())
}

pub fn padstats(input: &Path, out: &Path) -> Result<()> {
    let examples: Vec<DenoisedExample> = read_records(input)?;
    let report = PadReport::from((examples.len(), measure_padding(&examples)?));
    write_json(&stage_name(out, "padstats.json")?, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn save_pruned<P: Serialize>(model: &ModelCheckpoint, plan: &P, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    save_checkpoint(model, &out.join("checkpoint"))?;
    save_plan(plan, &out.join("plan.json"))?;
    println!("pruned to {} parameters", model.param_count());
    Ok(())
}

pub fn prune_layers_cmd(checkpoint: &Path, plan: Option<&Path>, drops: (usize, usize), out: &Path) -> Result<()> {
    let model: ModelCheckpoint = load_checkpoint(checkpoint)?;
    let plan: LayerPrunePlan = match plan {
        Some(p) => load_plan(p)?,
        None => plan_layer_drop(&model.config, drops.0, drops.1, "cli")?,
    };
    save_pruned(&prune_layers(&model, &plan)?, &plan, out)
}

pub fn prune_neurons_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    plan: Option<&Path>,
    targets: Option<(usize, usize, usize)>,
    out: &Path,
) -> Result<()> {
    let model: ModelCheckpoint = load_checkpoint(checkpoint)?;
    let plan: NeuralPrunePlan = match (plan, targets) {
        (Some(p), _) => load_plan(p)?,
        (None, Some((h, f, heads))) => make_neural_plan(&model.config, h, f, heads, cfg.seed())?,
        (None, None) => return Err(Error::Config("neural pruning needs --plan or --hidden/--ffn/--heads".into())),
    };
    save_pruned(&prune_neurons(&model, &plan)?, &plan, out)
}

/// Token counts over the training part of the corpus.
fn frequencies(cfg: &PipelineConfig, vocab: &Vocab, docs: &[Document]) -> TokenFrequency {
    let mut freq = TokenFrequency::zeros(vocab.vocab_size());
    for d in &docs[..docs.len().saturating_sub(cfg.dev_docs)] {
        freq.add(&vocab.encode(&d.text));
    }
    freq
}

pub fn prune_vocab_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    tok: Option<&Path>,
    plan: Option<&Path>,
    keep: Option<usize>,
    out: &Path,
) -> Result<()> {
    let model: ModelCheckpoint = load_checkpoint(checkpoint)?;
    let docs = cfg.documents()?;
    let vocab = tokenizer(tok, &cfg.pipeline, &docs)?;
    check_vocab(&model, &vocab)?;
    let plan: VocabPrunePlan = match plan {
        Some(p) => load_plan(p)?,
        None => make_vocab_plan(&frequencies(&cfg.pipeline, &vocab, &docs), keep.unwrap_or(cfg.pipeline.vocab_keep))?,
    };
    let pruned = apply_vocab_plan(&model, &plan)?;
    save_pruned(&pruned, &plan, out)?;
    vocab.pruned(plan.retained_ids.clone())?.save(&out.join("tokenizer.json"))
}

/// Direct-prune sweeps without recovery, written as CSV.
pub fn prune_sweep_cmd(cfg: &RunConfig, checkpoint: &Path, tok: Option<&Path>, kind: SweepKind, out: &Path) -> Result<()> {
    let model: ModelCheckpoint = load_checkpoint(checkpoint)?;
    let docs = cfg.documents()?;
    let vocab = tokenizer(tok, &cfg.pipeline, &docs)?;
    check_vocab(&model, &vocab)?;
    let p = &cfg.pipeline;
    let batch = p.eval_batch;
    let path = match kind {
        SweepKind::Layer | SweepKind::Neural => {
            let strategy = if kind == SweepKind::Layer { PruneStrategy::Layer } else { PruneStrategy::Neural };
            let dev: Vec<DenoisedExample> = dev_suite(p, &vocab, &docs)?.sets().concat();
            let rows = sweep_direct_prune(&model, strategy, cfg.sweep.steps, &dev, cfg.seed(), batch)?;
            let path = stage_name(out, &format!("sweep_{}.csv", if kind == SweepKind::Layer { "layer" } else { "neural" }))?;
            write_with(&path, |w| write_sweep(w, &rows))?;
            path
        }
        SweepKind::Vocab => {
            let dev = dev_docs(p, &docs)?;
            let by_lang = |lang: Lang| -> Vec<Document> {
                dev.iter().filter(|d| classify_lang(d, &cfg.corpus.filters.lang) == lang).cloned().collect()
            };
            let (zh, en) = (by_lang(Lang::Zh), by_lang(Lang::En));
            let table = NoiserTable::canonical();
            let spec = table.get(table.position(NoiseName::S).unwrap());
            let sweep_dev = VocabSweepDev {
                zh: &zh,
                en: &en,
                spec,
                examples: cfg.sweep.vocab_examples,
                max_enc: p.batch.enc_len,
                max_dec: p.batch.dec_len,
                seed: cfg.seed(),
                batch_size: batch,
            };
            let freq = frequencies(p, &vocab, &docs);
            let rows = sweep_vocab(&model, &vocab, &freq, &cfg.sweep.vocab_k, &sweep_dev)?;
            let path = stage_name(out, "sweep_vocab.csv")?;
            write_with(&path, |w| write_vocab_sweep(w, &rows))?;
            path
        }
    };
    println!("wrote {}", path.display());
    Ok(())
}

/// Runs one stage from a parent checkpoint, checking the stage's prune
/// action against the parent before any data is prepared.
pub fn train(cfg: &RunConfig, stage: usize, parent: Option<&Path>, out: &Path) -> Result<()> {
    let p = &cfg.pipeline;
    let plan = if stage == 0 {
        p.base_plan()
    } else {
        match p.stage_plans()?.into_iter().find(|s| s.stage_id == stage) {
            Some(plan) => plan,
            None => return Err(Error::Config(format!("no stage {stage}; stages run from 0 to 5"))),
        }
    };
    let parent: ModelCheckpoint = match (parent, stage) {
        (Some(path), _) => load_checkpoint(path)?,
        (None, 0) => ModelCheckpoint::build(p.model.clone(), p.seed)?,
        (None, _) => return Err(Error::Config(format!("stage {stage} needs a --parent checkpoint"))),
    };
    let expected = p.stage_input_config(stage)?;
    if parent.config != expected {
        return Err(Error::Plan(format!("{} expects a parent shaped {expected:?}, got {:?}", plan.label, parent.config)));
    }
    let docs = cfg.documents()?;
    let mut ctx = PipelineContext::new(p, &docs)?;
    ctx.rescue_dir = Some(out.join("rescue"));
    let (model, log) = ctx.run_stage(&parent, &plan)?;
    persist_stage(out, &plan, &model, &log)?;
    println!(
        "{}: {} steps, dev {:.4} -> {:.4}, {} parameters",
        plan.label,
        log.steps.len(),
        log.dev_start().unwrap_or(f64::NAN),
        log.dev_end().unwrap_or(f64::NAN),
        model.param_count()
    );
    Ok(())
}

pub fn pipeline(cfg: &RunConfig, out: &Path) -> Result<()> {
    let docs = cfg.documents()?;
    let result = run_pipeline(&cfg.pipeline, &docs, Some(out))?;
    let mut summary = std::io::stdout().lock();
    for s in &result.manifest.stages {
        writeln!(summary, "{}: dev {:.4} -> {:.4}, {} parameters", s.label, s.dev_start, s.dev_end, s.params)?;
    }
    let m = &result.manifest;
    writeln!(summary, "parameters {} -> {} ({:.3}x)", m.original_params, m.final_params, m.final_params as f64 / m.original_params as f64)?;
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, tok: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let model: ModelCheckpoint = load_checkpoint(checkpoint)?;
    let docs = cfg.documents()?;
    let vocab = tokenizer(tok, &cfg.pipeline, &docs)?;
    check_vocab(&model, &vocab)?;
    let suite = dev_suite(&cfg.pipeline, &vocab, &docs)?;
    let (losses, dev_loss) = suite_losses(&model, &suite, cfg.pipeline.eval_batch)?;
    let report = EvalReport {
        params: model.param_count(),
        vocab_size: model.config.vocab_size,
        dev_loss,
        ppl: dev_loss.exp(),
        losses: NoiseName::CANONICAL.into_iter().zip(losses).collect(),
    };
    write_json(&stage_name(out, "eval.json")?, &report)?;
    write_with(&out.join("eval.csv"), |w| write_eval_log(w, &[EvalRecord { step: 0, dev_loss, losses }]))?;
    println!("dev loss {dev_loss:.4}, ppl {:.2}", report.ppl);
    Ok(report)
}
