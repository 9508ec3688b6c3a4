use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use ul2prune::corpus::synth::{generate, SynthConfig};
use ul2prune::corpus::{process, read_jsonl, CorpusConfig, Document};
use ul2prune::packing::MixSpec;
use ul2prune::trainer::PipelineConfig;
use ul2prune::{Error, Result};

/// Everything one invocation needs, read from a single TOML file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `pipeline.seed` when set.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub corpus: CorpusSection,
    pub pipeline: PipelineConfig,
    pub pack: PackSection,
    pub sweep: SweepSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// JSONL corpus; when absent a synthetic corpus is generated.
    pub input: Option<PathBuf>,
    pub synth_docs: usize,
    pub synth_seed: u64,
    /// Run scrub, clean and dedup before tokenizing.
    pub process: bool,
    pub filters: CorpusConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { input: None, synth_docs: 10_000, synth_seed: 7, process: true, filters: CorpusConfig::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackSection {
    pub enc_len: usize,
    pub dec_len: usize,
    /// Fused-example geometry; defaults to the solver's choice for the shape.
    pub mix: Option<MixSpec>,
}

impl Default for PackSection {
    fn default() -> Self {
        PackSection { enc_len: 570, dec_len: 380, mix: None }
    }
}

impl PackSection {
    pub fn mix_spec(&self) -> MixSpec {
        self.mix.clone().unwrap_or_else(|| MixSpec::for_shape(self.enc_len, self.dec_len))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub steps: usize,
    /// Candidate vocabulary sizes for the vocabulary sweep.
    pub vocab_k: Vec<usize>,
    /// Dev examples per language in the vocabulary sweep.
    pub vocab_examples: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { steps: 10, vocab_k: vec![4096, 3500, 3000, 2500, 2000, 1500, 1000, 500], vocab_examples: 16 }
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Sets `path` (dotted) in `table`, creating intermediate tables.
fn set_path(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_error(format!("malformed key '{path}'")));
    }
    let (last, parents) = keys.split_last().unwrap();
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(config_error(format!("'{k}' in '{path}' is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Recursively overlays `over` onto `base`; non-table values replace.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `key=value`; the value is read as TOML, falling back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let Some((key, raw)) = s.split_once('=') else {
        return Err(config_error(format!("override '{s}' is not key=value")));
    };
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key.trim().to_string(), value))
}

impl RunConfig {
    /// Layers the optional config file and then the overrides onto the
    /// defaults, so any single key can be changed, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = Table::try_from(RunConfig::default()).map_err(config_error)?;
        if let Some(p) = path {
            merge(&mut table, std::fs::read_to_string(p)?.parse::<Table>().map_err(config_error)?);
        }
        for o in overrides {
            let (key, value) = parse_override(o)?;
            set_path(&mut table, &key, value)?;
        }
        let mut cfg: RunConfig = Value::Table(table).try_into().map_err(config_error)?;
        if let Some(seed) = cfg.seed {
            cfg.pipeline.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.corpus.filters.dedup.validate()?;
        self.pack.mix_spec().geometry()?;
        if self.corpus.input.is_none() && self.corpus.synth_docs == 0 {
            return Err(config_error("synthetic corpus needs at least one document"));
        }
        if self.sweep.vocab_examples == 0 {
            return Err(config_error("vocabulary sweep needs at least one example"));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.pipeline.seed
    }

    /// The configured corpus, processed when asked.
    pub fn documents(&self) -> Result<Vec<Document>> {
        let docs = match &self.corpus.input {
            Some(p) => read_jsonl(p)?,
            None => generate(&SynthConfig::new(self.corpus.synth_docs, self.corpus.synth_seed)),
        };
        if self.corpus.process {
            Ok(process(&docs, &self.corpus.filters)?.0)
        } else {
            Ok(docs)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_as_toml_then_string() {
        assert_eq!(parse_override("a.b=3").unwrap(), ("a.b".into(), Value::Integer(3)));
        assert_eq!(parse_override("x=[1, 2]").unwrap().1, Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
        assert_eq!(parse_override("p=runs/a").unwrap().1, Value::String("runs/a".into()));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load(None, &["pipeline.monitor_interval=7".into(), "seed=3".into()]).unwrap();
        assert_eq!((cfg.pipeline.monitor_interval, cfg.seed()), (7, 3));
    }

    #[test]
    fn file_values_layer_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[pipeline.model]\nvocab_size = 2048\n[pipeline]\nvocab_keep = 1000\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["pipeline.vocab_keep=900".into()]).unwrap();
        assert_eq!((cfg.pipeline.model.vocab_size, cfg.pipeline.model.hidden, cfg.pipeline.vocab_keep), (2048, 128, 900));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::load(None, &["pipeline.bogus=1".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &["nope=1".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(RunConfig::load(None, &["pipeline.vocab_keep=99999".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &["pack.enc_len=4".into(), "pack.dec_len=2".into()]), Err(Error::Config(_))));
    }
}
