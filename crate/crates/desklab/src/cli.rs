//! The `desklab` command line. Every subcommand reads its settings from a
//! resolved [`RunConfig`] and writes its outputs, the resolved config and a
//! report into `io.out`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use desklab_core::elo::{toy_task, train_elo, GradMode};
use desklab_core::eval::{eval_niah, eval_perplexity, gen_niah_case, NiahCase, NiahVocab};
use desklab_core::model::{build_model, ModelConfig, ModelParams};
use desklab_core::pipeline::{
    assign_category, bucket_upsample_by_quality, dedup_global, entropy_score, keyword_classifier, keyword_density,
    mix_streams, pack_sequences, pack_sequential, upsample_by_dup_count, RepeatMap, UpsamplePolicy,
};
use desklab_core::rng::{derived, seeded};
use desklab_core::synth::{retrieval_sequence, MarkovSource};
use desklab_core::tokenizer::{merge_tokenizers, tokens_per_byte, train_bpe, Rules, TokenizerModel};
use desklab_core::trainer::{run_curriculum, StageSpec, TrainBatch, TrainConfig, TrainSequence, TrainState};
use serde_json::json;

use crate::checkpoint::{config_to_text, read_checkpoint, set_config_field, write_checkpoint};
use crate::corpus::{read_corpus, write_corpus};
use crate::error::{Error, Result};
use crate::metrics::write_metrics;
use crate::packed::{read_packed, write_packed};
use crate::report::{Check, Report};
use crate::runconfig::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "desklab", version, about = "Desk-scale hybrid-attention language model laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Global exact dedup with duplication counts.
    Dedup(Common),
    /// Quality scores and keyword category per document.
    Score(Common),
    /// Repeat documents by duplication count or quality bucket.
    Upsample(Common),
    /// Weighted mix of named corpora.
    Mix(Common),
    /// Train a byte-level BPE tokenizer.
    TokenizeTrain(Common),
    /// Merge a general and a domain tokenizer.
    TokenizeMerge(Common),
    /// Tokenize a corpus and pack it into fixed-length rows.
    Pack(Common),
    /// Pre-train a desk model.
    Train(Common),
    /// Needle-in-a-haystack retrieval accuracy of a checkpoint.
    EvalNiah(Common),
    /// Perplexity of a checkpoint on a packed corpus.
    EvalPpl(Common),
    /// Optimize the ELO upper bound on an enumerable toy task.
    EloDemo(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set io.input=PATH`.
    #[arg(long)]
    input: Option<String>,
    /// Shorthand for `--set io.out=DIR`.
    #[arg(long)]
    out: Option<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

/// Run the CLI and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("desklab: {e}");
            e.exit_code()
        }
    }
}

/// Parse and run one command in-process, returning its summary text.
pub fn execute<I, T>(argv: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::Usage(e.to_string()))?;
    dispatch(cli.command)
}

fn dispatch(cmd: Command) -> Result<String> {
    let (name, common, defaults, body): (&str, Common, RunConfig, fn(&RunConfig, &Path) -> Result<Report>) = match cmd {
        Command::Dedup(c) => ("dedup", c, base(&[]), cmd_dedup),
        Command::Score(c) => ("score", c, base(&[("score.keywords", "")]), cmd_score),
        Command::Upsample(c) => (
            "upsample",
            c,
            base(&[
                ("upsample.policy", "dup_count"),
                ("upsample.map", "log2"),
                ("upsample.dimension", "entropy"),
                ("upsample.fraction", "0.1"),
                ("upsample.repeats", "10"),
                ("upsample.drop", "0"),
            ]),
            cmd_upsample,
        ),
        Command::Mix(c) => ("mix", c, base(&[("mix.streams", ""), ("mix.n", "1000"), ("mix.seed", "0")]), cmd_mix),
        Command::TokenizeTrain(c) => (
            "tokenize-train",
            c,
            base(&[("tokenizer.vocab_size", "1024"), ("tokenizer.char_coverage", "0.9999")]),
            cmd_tokenize_train,
        ),
        Command::TokenizeMerge(c) => (
            "tokenize-merge",
            c,
            base(&[("tokenizer.general", ""), ("tokenizer.domain", "")]),
            cmd_tokenize_merge,
        ),
        Command::Pack(c) => (
            "pack",
            c,
            base(&[("pack.tokenizer", ""), ("pack.seq_len", "256"), ("pack.pad_id", "0")]),
            cmd_pack,
        ),
        Command::Train(c) => ("train", c, train_defaults(), cmd_train),
        Command::EvalNiah(c) => ("eval-niah", c, niah_defaults(), cmd_eval_niah),
        Command::EvalPpl(c) => ("eval-ppl", c, base(&[("eval.checkpoint", "")]), cmd_eval_ppl),
        Command::EloDemo(c) => (
            "elo-demo",
            c,
            base(&[
                ("elo.alphabet", "4"),
                ("elo.length", "2"),
                ("elo.good", "9"),
                ("elo.hit", "0.99"),
                ("elo.miss", "0.05"),
                ("elo.lr", "1.0"),
                ("elo.steps", "500"),
                ("elo.mode", "cot_only"),
                ("elo.target", "0.9"),
            ]),
            cmd_elo_demo,
        ),
    };
    let config = resolve(defaults, &common)?;
    if common.print_config {
        return Ok(config.to_text());
    }
    let out = PathBuf::from(config.required("io.out")?);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let resolved = out.join("resolved.cfg");
    std::fs::write(&resolved, config.to_text()).map_err(|e| Error::io(&resolved, e))?;
    let report = body(&config, &out)?;
    debug_assert_eq!(report.command, name);
    report.write(&out)?;
    Ok(report.summary())
}

fn base(extra: &[(&str, &str)]) -> RunConfig {
    let mut c = RunConfig::with_defaults(&[("io.input", ""), ("io.out", "")]);
    for (k, v) in extra {
        c.add_default(*k, *v);
    }
    c
}

fn resolve(mut config: RunConfig, common: &Common) -> Result<RunConfig> {
    if let Some(path) = &common.config {
        config.apply_file(path)?;
    }
    for kv in &common.set {
        config.apply_override(kv)?;
    }
    if let Some(p) = &common.input {
        config.set("io.input", p)?;
    }
    if let Some(p) = &common.out {
        config.set("io.out", p)?;
    }
    Ok(config)
}

fn cmd_dedup(config: &RunConfig, out: &Path) -> Result<Report> {
    let docs = read_corpus(config.required("io.input")?)?;
    let n_in = docs.len();
    let kept = dedup_global(docs)?;
    write_corpus(out.join("deduped.jsonl"), &kept)?;
    let dups: u64 = kept.iter().map(|d| d.dup_count as u64).sum();
    Ok(Report::new(
        "dedup",
        config,
        json!({"docs_in": n_in, "docs_out": kept.len(), "dup_count_total": dups}),
        vec![Check::new("dup counts conserve documents", dups as f64, "<=", n_in as f64)],
    ))
}

fn cmd_score(config: &RunConfig, out: &Path) -> Result<Report> {
    let mut docs = read_corpus(config.required("io.input")?)?;
    let keywords: Vec<&str> = config.str("score.keywords").split(',').map(str::trim).filter(|k| !k.is_empty()).collect();
    for d in &mut docs {
        d.quality.insert("entropy".into(), entropy_score(&d.text));
        if !keywords.is_empty() {
            d.quality.insert("keyword_density".into(), keyword_density(&d.text, &keywords));
        }
        d.category = Some(assign_category(d, &keyword_classifier)?);
    }
    write_corpus(out.join("scored.jsonl"), &docs)?;
    let mut per_cat: BTreeMap<u8, usize> = BTreeMap::new();
    for d in &docs {
        *per_cat.entry(d.category.unwrap_or(0)).or_default() += 1;
    }
    Ok(Report::new("score", config, json!({"docs": docs.len(), "per_category": per_cat}), vec![]))
}

fn cmd_upsample(config: &RunConfig, out: &Path) -> Result<Report> {
    let docs = read_corpus(config.required("io.input")?)?;
    let result = match config.str("upsample.policy") {
        "dup_count" => {
            let map = match config.str("upsample.map") {
                "log2" => RepeatMap::Log2,
                "identity" => RepeatMap::Identity,
                other => return Err(Error::Usage(format!("upsample.map must be log2 or identity, got {other}"))),
            };
            upsample_by_dup_count(&docs, &UpsamplePolicy::by_dup_count(map))?
        }
        "top_fraction" => {
            let policy = UpsamplePolicy::top_fraction(config.get("upsample.fraction")?, config.get("upsample.repeats")?);
            bucket_upsample_by_quality(&docs, config.str("upsample.dimension"), &policy, config.get("upsample.drop")?)?
        }
        other => return Err(Error::Usage(format!("upsample.policy must be dup_count or top_fraction, got {other}"))),
    };
    write_corpus(out.join("upsampled.jsonl"), &result)?;
    let mut reps: BTreeMap<&str, u32> = BTreeMap::new();
    for d in &result {
        *reps.entry(d.id.as_str()).or_default() += 1;
    }
    let max_rep = reps.values().copied().max().unwrap_or(0);
    Ok(Report::new(
        "upsample",
        config,
        json!({"docs_in": docs.len(), "docs_out": result.len(), "max_repeats": max_rep}),
        vec![Check::new("repetition clamp", max_rep as f64, "<=", 10.0)],
    ))
}

/// `name:path:weight` entries separated by commas.
fn cmd_mix(config: &RunConfig, out: &Path) -> Result<Report> {
    let mut streams = BTreeMap::new();
    let mut weights = BTreeMap::new();
    for entry in config.required("mix.streams")?.split(',') {
        let parts: Vec<&str> = entry.trim().split(':').collect();
        let [name, path, w] = parts[..] else {
            return Err(Error::Usage(format!("mix.streams entry {entry:?} is not name:path:weight")));
        };
        let w: f64 = w.parse().map_err(|_| Error::Usage(format!("bad weight in {entry:?}")))?;
        streams.insert(name.to_string(), read_corpus(path)?);
        weights.insert(name.to_string(), w);
    }
    let n: usize = config.get("mix.n")?;
    let mixed = mix_streams(&streams, &weights, n, config.get("mix.seed")?)?;
    write_corpus(out.join("mixed.jsonl"), &mixed)?;
    let mut counts: BTreeMap<String, usize> = streams.keys().map(|k| (k.clone(), 0)).collect();
    for d in &mixed {
        for (name, docs) in &streams {
            if docs.iter().any(|s| s.id == d.id) {
                *counts.get_mut(name).unwrap() += 1;
                break;
            }
        }
    }
    Ok(Report::new("mix", config, json!({"docs": mixed.len(), "per_stream": counts}), vec![]))
}

fn rules_from(config: &RunConfig) -> Result<Rules> {
    Ok(Rules { char_coverage: config.get("tokenizer.char_coverage")?, ..Rules::default() })
}

fn read_tokenizer(path: &str) -> Result<TokenizerModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(TokenizerModel::from_text(&text)?)
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn cmd_tokenize_train(config: &RunConfig, out: &Path) -> Result<Report> {
    let docs = read_corpus(config.required("io.input")?)?;
    let model = train_bpe(docs.iter().map(|d| d.text.as_str()), config.get("tokenizer.vocab_size")?, rules_from(config)?)?;
    write_text(out.join("tokenizer.model"), &model.to_text())?;
    let tpb = tokens_per_byte(&model, docs.iter().map(|d| d.text.as_str()));
    let mut lossless = true;
    for d in &docs {
        lossless &= model.decode(&model.encode(&d.text))? == d.text;
    }
    Ok(Report::new(
        "tokenize-train",
        config,
        json!({"vocab_size": model.vocab_size(), "merges": model.merges().len(), "tokens_per_byte": tpb}),
        vec![Check::new("round trip on training corpus", lossless as u8 as f64, ">=", 1.0)],
    ))
}

fn cmd_tokenize_merge(config: &RunConfig, out: &Path) -> Result<Report> {
    let general = read_tokenizer(config.required("tokenizer.general")?)?;
    let domain = read_tokenizer(config.required("tokenizer.domain")?)?;
    let merged = merge_tokenizers(&general, &domain)?;
    write_text(out.join("tokenizer.model"), &merged.to_text())?;
    let mut results = json!({
        "general_vocab": general.vocab_size(),
        "domain_vocab": domain.vocab_size(),
        "merged_vocab": merged.vocab_size(),
    });
    let mut checks = vec![];
    if let Ok(input) = config.required("io.input") {
        let docs = read_corpus(input)?;
        let texts = || docs.iter().map(|d| d.text.as_str());
        let (g, m) = (tokens_per_byte(&general, texts()), tokens_per_byte(&merged, texts()));
        results["general_tokens_per_byte"] = json!(g);
        results["merged_tokens_per_byte"] = json!(m);
        checks.push(Check::new("merged tokens per byte vs general", m, "<=", g));
    }
    Ok(Report::new("tokenize-merge", config, results, checks))
}

fn cmd_pack(config: &RunConfig, out: &Path) -> Result<Report> {
    let docs = read_corpus(config.required("io.input")?)?;
    let tok = read_tokenizer(config.required("pack.tokenizer")?)?;
    let seq_len: usize = config.get("pack.seq_len")?;
    let pad: u32 = config.get("pack.pad_id")?;
    let ids: Vec<Vec<u32>> = docs.iter().map(|d| tok.encode(&d.text)).filter(|t| !t.is_empty()).collect();
    let packed = pack_sequences(&ids, seq_len, pad)?;
    let naive = pack_sequential(&ids, seq_len, pad)?;
    write_packed(out.join("packed.bin"), &packed)?;
    let s = packed.stats;
    Ok(Report::new(
        "pack",
        config,
        json!({
            "rows": packed.sequences.len(),
            "tokens_in": s.tokens_in,
            "tokens_packed": s.tokens_packed,
            "tokens_padded": s.tokens_padded,
            "split_docs": s.split_docs,
            "tokens_truncated": s.tokens_truncated,
            "naive_rows": naive.sequences.len(),
            "naive_tokens_padded": naive.stats.tokens_padded,
        }),
        vec![
            Check::new("tokens conserved", s.tokens_packed as f64, ">=", s.tokens_in as f64),
            Check::new("padding vs sequential baseline", s.tokens_padded as f64, "<=", naive.stats.tokens_padded as f64),
        ],
    ))
}

fn train_defaults() -> RunConfig {
    let mut c = base(&[
        ("train.seed", "7"),
        ("train.tokens", "200000"),
        ("train.seq_len", "128"),
        ("train.batch_rows", "4"),
        ("train.stages", ""),
        ("train.peak_lr", "0.003"),
        ("train.floor_lr", "0.0003"),
        ("train.warmup_steps", "20"),
        ("train.decay_fraction", "0.3"),
        ("train.beta1", "0.9"),
        ("train.beta2", "0.95"),
        ("train.weight_decay", "0.0"),
        ("train.grad_clip_norm", "1.0"),
        ("train.agc", "true"),
        ("data.source", "markov"),
        ("data.path", ""),
        ("data.seed", "1"),
        ("data.branching", "3"),
        ("data.pairs", "0"),
        ("data.min_gap", "64"),
        ("niah.filler", "32"),
        ("niah.keys", "16"),
        ("niah.values", "16"),
    ]);
    for line in config_to_text(&ModelConfig::desk(64, 2)).lines() {
        let (k, v) = line.split_once(" = ").expect("key = value");
        c.add_default(format!("model.{k}"), if k == "layer_pattern" { "auto" } else { v });
    }
    c
}

fn model_config(config: &RunConfig) -> Result<ModelConfig> {
    let mut mc = ModelConfig::desk(config.get("model.vocab_size")?, config.get("model.n_layers")?);
    for (k, v) in config.entries() {
        let Some(field) = k.strip_prefix("model.") else { continue };
        if field == "vocab_size" || field == "n_layers" || (field == "layer_pattern" && v == "auto") {
            continue;
        }
        set_config_field(&mut mc, field, v)?;
    }
    mc.validate()?;
    Ok(mc)
}

fn niah_vocab(config: &RunConfig) -> Result<NiahVocab> {
    Ok(NiahVocab::split(config.get("niah.filler")?, config.get("niah.keys")?, config.get("niah.values")?))
}

/// `seq_len:tokens:rope_base` stages separated by commas, or one stage from
/// `train.seq_len` and `train.tokens`.
fn stages(config: &RunConfig, rope_base: f64) -> Result<Vec<StageSpec>> {
    let source = config.str("data.source").to_string();
    let text = config.str("train.stages");
    if text.is_empty() {
        return Ok(vec![StageSpec {
            token_budget: config.get("train.tokens")?,
            context_len: config.get("train.seq_len")?,
            rope_base,
            data_policy: source,
        }]);
    }
    text.split(',')
        .map(|s| {
            let p: Vec<&str> = s.trim().split(':').collect();
            let bad = || Error::Usage(format!("stage {s:?} is not seq_len:tokens:rope_base"));
            let [len, tokens, rope] = p[..] else { return Err(bad()) };
            Ok(StageSpec {
                token_budget: tokens.parse().map_err(|_| bad())?,
                context_len: len.parse().map_err(|_| bad())?,
                rope_base: rope.parse().map_err(|_| bad())?,
                data_policy: source.clone(),
            })
        })
        .collect()
}

/// Endless batch stream for one stage.
fn batch_stream(
    config: &RunConfig,
    mc: &ModelConfig,
    stage_index: usize,
    len: usize,
) -> Result<Box<dyn Iterator<Item = TrainBatch>>> {
    let rows: usize = config.get("train.batch_rows")?;
    let seed: u64 = config.get("data.seed")?;
    match config.str("data.source") {
        "markov" => {
            let source = MarkovSource::new(mc.vocab_size, config.get("data.branching")?, &mut seeded(seed))?;
            let mut rng = derived(seed, 1 + stage_index as u64);
            let ones = vec![1u32; len];
            Ok(Box::new(std::iter::from_fn(move || {
                let seqs = (0..rows).map(|_| TrainSequence::from_packed(&source.sample(len, &mut rng), &ones)).collect();
                Some(TrainBatch::new(seqs))
            })))
        }
        "retrieval" => {
            let vocab = niah_vocab(config)?;
            if vocab.size() > mc.vocab_size {
                return Err(Error::Usage(format!("retrieval alphabet of {} exceeds model vocabulary", vocab.size())));
            }
            let pairs = match config.get::<usize>("data.pairs")? {
                0 => (len / 16).max(1),
                p => p,
            };
            let gap: usize = config.get("data.min_gap")?;
            retrieval_sequence(&vocab, len, pairs, gap, &mut seeded(seed))?;
            let mut rng = derived(seed, 1 + stage_index as u64);
            Ok(Box::new(std::iter::from_fn(move || {
                let seqs = (0..rows)
                    .map(|_| retrieval_sequence(&vocab, len, pairs, gap, &mut rng).expect("validated above"))
                    .collect();
                Some(TrainBatch::new(seqs))
            })))
        }
        "packed" => {
            let packed = read_packed(config.required("data.path")?, 0)?;
            if packed.seq_len != len {
                return Err(Error::Usage(format!("packed rows have length {}, stage wants {len}", packed.seq_len)));
            }
            if packed.sequences.is_empty() {
                return Err(Error::Usage("packed file has no rows".into()));
            }
            let mut next = 0usize;
            Ok(Box::new(std::iter::from_fn(move || {
                let seqs = (0..rows)
                    .map(|_| {
                        let r = next % packed.sequences.len();
                        next += 1;
                        TrainSequence::from_packed(&packed.sequences[r], &packed.model_sample_ids(r))
                    })
                    .collect();
                Some(TrainBatch::new(seqs))
            })))
        }
        other => Err(Error::Usage(format!("data.source must be markov, retrieval or packed, got {other}"))),
    }
}

fn cmd_train(config: &RunConfig, out: &Path) -> Result<Report> {
    let mc = model_config(config)?;
    let specs = stages(config, mc.rope_base)?;
    let rows: u64 = config.get("train.batch_rows")?;
    let steps: u64 = specs.iter().map(|s| s.token_budget.div_ceil(rows * s.context_len as u64)).sum();
    let warmup: u64 = config.get("train.warmup_steps")?;
    let decay = (steps as f64 * config.get::<f64>("train.decay_fraction")?) as u64;
    let tc = TrainConfig {
        peak_lr: config.get("train.peak_lr")?,
        floor_lr: config.get("train.floor_lr")?,
        warmup_steps: warmup,
        stable_steps: steps.saturating_sub(warmup + decay),
        decay_steps: decay,
        beta1: config.get("train.beta1")?,
        beta2: config.get("train.beta2")?,
        eps: 1e-8,
        weight_decay: config.get("train.weight_decay")?,
        grad_clip_norm: config.get("train.grad_clip_norm")?,
        batch_tokens: (rows as usize) * specs[0].context_len,
        agc: config.get("train.agc")?,
    };
    tc.validate()?;
    let mut params = build_model(&mc, config.get("train.seed")?)?;
    let mut state = TrainState::new(&params);
    let mut streams = Vec::with_capacity(specs.len());
    for (i, s) in specs.iter().enumerate() {
        streams.push(Some(batch_stream(config, &mc, i, s.context_len)?));
    }
    let log = run_curriculum(&mut params, &mc, &specs, |i, _| streams[i].take().expect("one stream per stage"), &tc, &mut state)?;
    write_metrics(out.join("metrics.csv"), &log)?;
    write_checkpoint(out.join("model.ckpt"), &mc, &params)?;
    let tail = log.len().clamp(1, 20);
    let final_loss = log.iter().rev().take(tail).map(|r| r.loss).sum::<f64>() / tail as f64;
    let threshold = 0.7 * (mc.vocab_size as f64).ln();
    Ok(Report::new(
        "train",
        config,
        json!({
            "steps": log.len(),
            "updates": state.updates,
            "skipped": log.iter().filter(|r| r.skipped).count(),
            "tokens": state.tokens,
            "first_loss": log.first().map(|r| r.loss),
            "final_loss": final_loss,
        }),
        vec![Check::new("final loss vs 0.7 ln V", final_loss, "<", threshold)],
    ))
}

fn niah_defaults() -> RunConfig {
    base(&[
        ("eval.checkpoint", ""),
        ("niah.cases", "100"),
        ("niah.len", "256"),
        ("niah.context", "256"),
        ("niah.seed", "1000"),
        ("niah.filler", "32"),
        ("niah.keys", "16"),
        ("niah.values", "16"),
    ])
}

fn load(config: &RunConfig) -> Result<(ModelConfig, ModelParams)> {
    read_checkpoint(config.required("eval.checkpoint")?)
}

fn cmd_eval_niah(config: &RunConfig, out: &Path) -> Result<Report> {
    let (mc, params) = load(config)?;
    let vocab = niah_vocab(config)?;
    if vocab.size() > mc.vocab_size {
        return Err(Error::Usage(format!("retrieval alphabet of {} exceeds model vocabulary", vocab.size())));
    }
    let n: usize = config.get("niah.cases")?;
    let len: usize = config.get("niah.len")?;
    let seed: u64 = config.get("niah.seed")?;
    let cases: Vec<NiahCase> = (0..n)
        .map(|i| gen_niah_case(len, (i % 10) as f64 / 10.0, &vocab, seed + i as u64))
        .collect::<desklab_core::Result<_>>()?;
    let report = eval_niah(&params, &mc, &cases, config.get("niah.context")?)?;
    let far: Vec<bool> = cases
        .iter()
        .zip(&report.outcomes)
        .filter(|(c, _)| c.distance() >= mc.window_size)
        .filter_map(|(_, o)| *o)
        .collect();
    let far_acc = if far.is_empty() { 0.0 } else { far.iter().filter(|&&h| h).count() as f64 / far.len() as f64 };
    let mut csv = String::from("decile,cases,correct,accuracy\n");
    for (i, b) in report.per_depth.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{},{}", b.cases, b.correct, b.accuracy().map_or(String::new(), |a| a.to_string()));
    }
    write_text(out.join("niah_depth.csv"), &csv)?;
    let per_depth: Vec<_> = report.per_depth.iter().map(|b| json!({"cases": b.cases, "correct": b.correct})).collect();
    Ok(Report::new(
        "eval-niah",
        config,
        json!({
            "protocol": "synthetic key-value retrieval",
            "accuracy": report.accuracy,
            "beyond_window_accuracy": far_acc,
            "beyond_window_cases": far.len(),
            "evaluated": report.evaluated,
            "skipped": report.skipped,
            "per_depth": per_depth,
        }),
        vec![Check::new("beyond-window accuracy", far_acc, ">=", 0.9)],
    ))
}

fn cmd_eval_ppl(config: &RunConfig, _out: &Path) -> Result<Report> {
    let (mc, params) = load(config)?;
    let packed = read_packed(config.required("io.input")?, 0)?;
    let mut docs: Vec<Vec<u32>> = Vec::new();
    for (seq, ids) in packed.sequences.iter().zip(&packed.sample_ids) {
        let mut start = 0;
        for i in 1..=seq.len() {
            if i == seq.len() || ids[i] != ids[start] {
                if ids[start] != 0 {
                    docs.push(seq[start..i].to_vec());
                }
                start = i;
            }
        }
    }
    let r = eval_perplexity(&params, &mc, &docs)?;
    let uniform = mc.vocab_size as f64;
    Ok(Report::new(
        "eval-ppl",
        config,
        json!({"perplexity": r.perplexity, "mean_cross_entropy": r.mean_cross_entropy, "tokens": r.tokens, "documents": docs.len()}),
        vec![Check::new("perplexity vs uniform", r.perplexity, "<", uniform)],
    ))
}

fn cmd_elo_demo(config: &RunConfig, out: &Path) -> Result<Report> {
    let (task, mut policy) = toy_task(
        config.get("elo.alphabet")?,
        config.get("elo.length")?,
        config.get("elo.good")?,
        config.get("elo.hit")?,
        config.get("elo.miss")?,
    )?;
    let mode = match config.str("elo.mode") {
        "cot_only" => GradMode::CotOnly,
        "full" => GradMode::Full,
        other => return Err(Error::Usage(format!("elo.mode must be cot_only or full, got {other}"))),
    };
    let target: f64 = config.get("elo.target")?;
    let log = train_elo(&mut policy, &task, config.get("elo.steps")?, config.get("elo.lr")?, mode, target)?;
    let mut csv = String::from("step,l_elo,l_upper,p_answer\n");
    for r in &log {
        let _ = writeln!(csv, "{},{:?},{:?},{:?}", r.step, r.l_elo, r.l_upper, r.p_answer);
    }
    write_text(out.join("elo.csv"), &csv)?;
    let violations = log.iter().filter(|r| r.l_elo > r.l_upper + 1e-12).count();
    let last = log.last().expect("at least one row");
    let mut table = String::from(" step     L_ELO   L_upper  pi(A|Q)\n");
    let stride = (log.len() / 10).max(1);
    for (i, r) in log.iter().enumerate() {
        if i % stride == 0 || i + 1 == log.len() {
            let _ = writeln!(table, "{:5} {:9.6} {:9.6} {:8.4}", r.step, r.l_elo, r.l_upper, r.p_answer);
        }
    }
    write_text(out.join("elo_table.txt"), &table)?;
    Ok(Report::new(
        "elo-demo",
        config,
        json!({"steps": last.step, "final_p_answer": last.p_answer, "table": table.lines().collect::<Vec<_>>()}),
        vec![
            Check::new("rows with L_ELO > L_upper", violations as f64, "<=", 0.0),
            Check::new("final pi(A|Q)", last.p_answer, ">", target),
        ],
    ))
}
