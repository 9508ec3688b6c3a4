use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ul2prune::corpus::read_jsonl;
use ul2prune::model::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use ul2prune::tensor::Tensor;
use ul2prune::trainer::eval_header;

/// A run small enough to train end to end in seconds.
const MINI: &str = r#"
seed = 3

[corpus]
synth_docs = 300
synth_seed = 2

[pipeline]
tokenizer_docs = 100
dev_docs = 20
total_tokens = 120000
base_tokens = 8000
oul2_enc_len = 64
oul2_batch_size = 2
eval_batch = 8
monitor_interval = 20
vocab_keep = 500
layer_drops = [[1, 1], [0, 1], [0, 1]]
neural_targets = [24, 32, 3]

[pipeline.model]
n_enc_layers = 3
n_dec_layers = 6
hidden = 32
ffn = 48
n_heads = 4
head_dim = 8
vocab_size = 600

[pipeline.batch]
batch_size = 2
enc_len = 128
dec_len = 96

[pipeline.curriculum]
eval_interval = 2
val_examples = 2

[pack]
enc_len = 256
dec_len = 96

[sweep]
steps = 3
vocab_k = [600, 550, 500]
vocab_examples = 2
"#;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(name)
}

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        fs::write(&config, MINI).unwrap();
        Run { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Runs the binary with the mini config, writing under `out`.
    fn cli(&self, out: &str, args: &[&str]) -> Output {
        let out = self.path(out);
        Command::new(env!("CARGO_BIN_EXE_ul2prune"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(out)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) -> Output {
        let o = self.cli(out, args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        o
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn same_files(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
}

#[test]
fn clean_then_dedup_matches_golden() {
    let run = Run::new();
    let input = fixture("corpus_1k.jsonl");
    run.ok("c", &["corpus", "clean", "--input", input.to_str().unwrap()]);
    let cleaned = run.path("c/clean.jsonl");
    run.ok("d", &["corpus", "dedup", "--input", cleaned.to_str().unwrap()]);
    let out = read_jsonl(&run.path("d/dedup.jsonl")).unwrap();
    assert_eq!(out, read_jsonl(&fixture("corpus_1k.golden.jsonl")).unwrap());
    // A second pass changes nothing.
    let deduped = run.path("d/dedup.jsonl");
    run.ok("d2", &["corpus", "dedup", "--input", deduped.to_str().unwrap()]);
    assert_eq!(fs::read(run.path("d/dedup.jsonl")).unwrap(), fs::read(run.path("d2/dedup.jsonl")).unwrap());
    run.ok("s", &["corpus", "stats", "--input", deduped.to_str().unwrap()]);
    assert_eq!(validate_outputs(run.dir.path()), 4);
}

#[test]
fn stats_of_an_empty_corpus_are_zero() {
    let run = Run::new();
    let empty = run.path("empty.jsonl");
    fs::write(&empty, "").unwrap();
    run.ok("s", &["corpus", "stats", "--input", empty.to_str().unwrap()]);
    let stats: serde_json::Value = serde_json::from_slice(&fs::read(run.path("s/corpus_stats.json")).unwrap()).unwrap();
    for key in ["docs_in", "docs_out", "lang_zh", "lang_en"] {
        assert_eq!(stats[key], 0, "{key}");
    }
    assert_eq!(stats["dedup"]["docs_dropped"], 0);
}

#[test]
fn malformed_records_fail_with_their_line() {
    let run = Run::new();
    let bad = run.path("bad.jsonl");
    fs::write(&bad, "{\"id\":\"a\",\"text\":\"x\",\"source\":\"s\"}\nnot json\n").unwrap();
    let o = run.cli("x", &["corpus", "clean", "--input", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let o = run.cli("x", &["padstats", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn packing_is_reproducible_and_padstats_agree() {
    let run = Run::new();
    run.ok("a", &["pack", "--objective", "oul2"]);
    run.ok("b", &["pack", "--objective", "oul2"]);
    same_files(&run.path("a"), &run.path("b"));
    let examples = run.path("a/examples.jsonl");
    run.ok("s", &["padstats", examples.to_str().unwrap()]);
    assert_eq!(fs::read(run.path("a/padstats.json")).unwrap(), fs::read(run.path("s/padstats.json")).unwrap());
    run.ok("u", &["pack", "--objective", "ul2"]);
    let frac = |p: &str| -> f64 {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(run.path(p)).unwrap()).unwrap();
        v["fraction"].as_f64().unwrap()
    };
    assert!(frac("a/padstats.json") < 0.05);
    assert!(frac("u/padstats.json") > frac("a/padstats.json"));
    assert_eq!(validate_outputs(run.dir.path()), 7);
}

#[test]
fn config_errors_exit_before_any_work() {
    let run = Run::new();
    assert_eq!(code(&run.cli("x", &["--set", "pipeline.nope=1", "pipeline"])), 2);
    assert_eq!(code(&run.cli("x", &["--set", "pipeline.vocab_keep=9999", "pipeline"])), 2);
    assert_eq!(code(&run.cli("x", &["train", "--stage", "1"])), 2);
    assert_eq!(code(&run.cli("x", &["train", "--stage", "9"])), 2);
    assert!(!run.path("x").exists());
    let missing = run.path("missing");
    assert_eq!(code(&run.cli("x", &["eval", "--checkpoint", missing.to_str().unwrap()])), 4);
}

fn mini_model() -> ModelCheckpoint {
    let config = ul2prune::model::ModelConfig::new(3, 6, 32, 48, 4, 600).unwrap();
    ModelCheckpoint::build(config, 3).unwrap()
}

#[test]
fn uniform_stub_has_perplexity_equal_to_vocab_size() {
    let run = Run::new();
    let mut model = mini_model();
    let shape = model.tensor("lm_head").unwrap().shape().to_vec();
    model.tensors.insert("lm_head".into(), Tensor::zeros(&shape));
    save_checkpoint(&model, &run.path("stub")).unwrap();
    let stub = run.path("stub");
    run.ok("e", &["eval", "--checkpoint", stub.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.path("e/eval.json")).unwrap()).unwrap();
    let ppl = report["ppl"].as_f64().unwrap();
    assert!((ppl - 600.0).abs() < 600.0 * 1e-5, "{ppl}");
    let csv = fs::read_to_string(run.path("e/eval.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), eval_header().join(","));
    run.ok("e2", &["eval", "--checkpoint", stub.to_str().unwrap()]);
    same_files(&run.path("e"), &run.path("e2"));
    assert_eq!(validate_outputs(&run.path("e")), 2);
}

#[test]
fn nonfinite_weights_exit_with_divergence() {
    let run = Run::new();
    let mut model = mini_model();
    let shape = model.tensor("embed").unwrap().shape().to_vec();
    let mut t = Tensor::zeros(&shape);
    t.data_mut().fill(f32::NAN);
    model.tensors.insert("embed".into(), t);
    save_checkpoint(&model, &run.path("nan")).unwrap();
    let nan = run.path("nan");
    let o = run.cli("t", &["train", "--stage", "0", "--parent", nan.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.path("t/rescue").exists());
}

#[test]
fn pipeline_stages_reproduce_in_isolation_and_prune_commands_apply() {
    let run = Run::new();
    run.ok("p", &["pipeline"]);
    for label in ["base", "stage1", "stage2", "stage3", "stage4", "stage5", "vocab"] {
        assert!(run.path("p").join(label).join("checkpoint").exists(), "{label}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.path("p/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stages"].as_array().unwrap().len(), 6);

    // Each stage rerun from its parent checkpoint gives the same files.
    for (stage, parent, label) in [("1", "base", "stage1"), ("5", "stage4", "stage5")] {
        let parent = run.path(&format!("p/{parent}/checkpoint"));
        run.ok("t", &["train", "--stage", stage, "--parent", parent.to_str().unwrap()]);
        same_files(&run.path(&format!("p/{label}/checkpoint")), &run.path(&format!("t/{label}/checkpoint")));
        assert_eq!(fs::read(run.path(&format!("p/{label}/eval_log.csv"))).unwrap(), fs::read(run.path(&format!("t/{label}/eval_log.csv"))).unwrap());
    }
    // A stage plan aimed at the wrong parent is refused.
    let base = run.path("p/base/checkpoint");
    assert_eq!(code(&run.cli("x", &["train", "--stage", "2", "--parent", base.to_str().unwrap()])), 2);

    // Layer pruning drops the planned layers; the written plan reapplies identically.
    let b = base.to_str().unwrap();
    run.ok("l", &["prune", "layers", "--checkpoint", b, "--enc-drop", "1", "--dec-drop", "2"]);
    let pruned: ModelCheckpoint = load_checkpoint(&run.path("l/checkpoint")).unwrap();
    assert_eq!((pruned.config.n_enc_layers, pruned.config.n_dec_layers), (2, 4));
    let plan = run.path("l/plan.json");
    run.ok("l2", &["prune", "layers", "--checkpoint", b, "--plan", plan.to_str().unwrap()]);
    same_files(&run.path("l/checkpoint"), &run.path("l2/checkpoint"));
    assert_eq!(fs::read(run.path("l/plan.json")).unwrap(), fs::read(run.path("l2/plan.json")).unwrap());

    run.ok("n", &["prune", "neurons", "--checkpoint", b, "--hidden", "16", "--ffn", "24", "--heads", "2"]);
    let narrow: ModelCheckpoint = load_checkpoint(&run.path("n/checkpoint")).unwrap();
    assert_eq!((narrow.config.hidden, narrow.config.ffn, narrow.config.n_heads), (16, 24, 2));

    // Keeping the whole vocabulary changes nothing.
    let tok = run.path("p/tokenizer.json");
    let t = tok.to_str().unwrap();
    run.ok("v", &["prune", "vocab", "--checkpoint", b, "--tokenizer", t, "--keep", "600"]);
    let kept: ModelCheckpoint = load_checkpoint(&run.path("v/checkpoint")).unwrap();
    let original: ModelCheckpoint = load_checkpoint(&base).unwrap();
    assert_eq!(kept.tensors, original.tensors);
    // A plan for another vocabulary does not fit.
    let vplan = run.path("p/vocab/plan.json");
    let small = run.path("p/vocab/checkpoint");
    let o = run.cli("x", &["prune", "vocab", "--checkpoint", small.to_str().unwrap(), "--plan", vplan.to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    run.ok("s", &["prune", "sweep", "--checkpoint", b, "--tokenizer", t, "--kind", "layer"]);
    let csv = fs::read_to_string(run.path("s/sweep_layer.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "strategy,step,params,params_pruned,dev_loss");
    assert_eq!(csv.lines().count(), 1 + 4);
    run.ok("s", &["prune", "sweep", "--checkpoint", b, "--tokenizer", t, "--kind", "vocab"]);
    let csv = fs::read_to_string(run.path("s/sweep_vocab.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "k,dev_loss_zh,dev_loss_en");
    assert_eq!(csv.lines().count(), 1 + 3);

    // The final checkpoint evaluates under the cut tokenizer.
    let vtok = run.path("p/vocab/tokenizer.json");
    run.ok("e", &["eval", "--checkpoint", small.to_str().unwrap(), "--tokenizer", vtok.to_str().unwrap()]);

    // Everything written above conforms to the shipped schemas.
    assert!(validate_outputs(run.dir.path()) > 40);
}

fn schema_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn load_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// The schema for an emitted JSON file, chosen by name and, for plans, by shape.
fn schema_for(path: &Path, value: &serde_json::Value) -> Option<serde_json::Value> {
    let name = path.file_name()?.to_str()?;
    let in_checkpoint = path.parent().is_some_and(|p| p.ends_with("checkpoint"));
    let file = match name {
        "manifest.json" if in_checkpoint => "checkpoint.schema.json",
        "manifest.json" => "manifest.schema.json",
        "config.json" => "pipeline_config.schema.json",
        "tokenizer.json" => "tokenizer.schema.json",
        "padstats.json" => "padstats.schema.json",
        "eval.json" => "eval.schema.json",
        "corpus_stats.json" | "clean_stats.json" => "corpus_stats.schema.json",
        "dedup_stats.json" => "dedup_stats.schema.json",
        "plan.json" => {
            let def = ["stage_id", "enc_drop", "target_hidden", "keep_k"]
                .iter()
                .zip(["stage_plan", "layer_plan", "neural_plan", "vocab_plan"])
                .find(|(key, _)| value.get(**key).is_some())
                .map(|(_, def)| def)
                .unwrap_or_else(|| panic!("unrecognized plan {}", path.display()));
            let mut schema = load_json(&schema_dir().join("plans.schema.json"));
            schema["$ref"] = format!("#/$defs/{def}").into();
            return Some(schema);
        }
        _ => return None,
    };
    Some(load_json(&schema_dir().join(file)))
}

/// Validates every JSON and CSV file under `dir`; returns how many were checked.
fn validate_outputs(dir: &Path) -> usize {
    let headers = load_json(&schema_dir().join("csv_headers.json"));
    let mut checked = 0;
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let name = path.file_name().unwrap().to_str().unwrap().to_string();
            if name.ends_with(".json") {
                let value = load_json(&path);
                let schema = schema_for(&path, &value).unwrap_or_else(|| panic!("no schema for {}", path.display()));
                let validator = jsonschema::validator_for(&schema).unwrap();
                let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
                assert!(errors.is_empty(), "{}: {errors:?}", path.display());
                checked += 1;
            } else if name.ends_with(".csv") {
                let want: Vec<&str> = headers[&name].as_array().unwrap_or_else(|| panic!("no header for {name}")).iter().map(|h| h.as_str().unwrap()).collect();
                let text = fs::read_to_string(&path).unwrap();
                let mut lines = text.lines();
                assert_eq!(lines.next().unwrap().split(',').collect::<Vec<_>>(), want, "{}", path.display());
                for line in lines {
                    let fields: Vec<&str> = line.split(',').collect();
                    assert_eq!(fields.len(), want.len(), "{}", path.display());
                    for (h, f) in want.iter().zip(&fields) {
                        assert!(*h == "strategy" || f.parse::<f64>().is_ok(), "{}: {h}={f}", path.display());
                    }
                }
                checked += 1;
            }
        }
    }
    checked
}
