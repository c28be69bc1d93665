//! Subcommand implementations for the `dkplm` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use dkplm::corpus::{link_corpus, read_corpus_lines, FrequencyTable, LinkedSentence, PowerLawFit, Vocabulary};
use dkplm::detector::detect_all;
use dkplm::injection::KgTokens;
use dkplm::pretrain::{train, TrainData, TrainOutputs};
use dkplm::probe::{evaluate, read_probe_file, ClozeQuery, ProbeResult};
use dkplm::synth::{SynthConfig, SynthData};
use dkplm::{DkplmModel, Error, KnowledgeGraph, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "dkplm", version, about = "Knowledge-injected masked LM pretraining at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary, entity frequencies and power-law fit.
    Build(BuildArgs),
    /// Score mentions and select long-tail entities.
    Detect(DetectArgs),
    /// Pretrain with knowledge injection and decoding.
    Pretrain(CommonArgs),
    /// Zero-shot cloze probing of a checkpoint.
    Probe(ProbeArgs),
    /// Rank-frequency data for plotting.
    ExportPlots(CommonArgs),
    /// Write a synthetic graph, corpus and probe set.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. `--train.lambda1 0.4`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub triples: Option<PathBuf>,
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Model weights; without one a seeded random model is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sentences to score (defaults to the configured corpus).
    #[arg(long)]
    pub sentences: Option<PathBuf>,
    /// Write reports here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Probe JSON-lines (defaults to `paths.probes`).
    #[arg(long)]
    pub probes: Option<PathBuf>,
    /// Per-query ranks TSV.
    #[arg(long)]
    pub ranks: Option<PathBuf>,
    /// Also write the result JSON here.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Config(_) => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Names of the build artifacts inside `paths.out_dir`.
pub mod artifacts {
    pub const VOCAB: &str = "vocab.tsv";
    pub const FREQUENCY: &str = "frequency.tsv";
    pub const POWER_LAW: &str = "power_law.json";
    pub const ENTITIES: &str = "entities.tsv";
    pub const RELATIONS: &str = "relations.tsv";
    pub const RANK_FREQUENCY: &str = "rank_frequency.tsv";
    pub const PRETRAIN_DIR: &str = "pretrain";
}

/// Parses `--a.b value` / `--a.b=value` pairs.
pub fn parse_overrides(raw: &[String]) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let key = flag.strip_prefix("--").ok_or_else(|| CliError::usage(format!("expected --key value, got {flag:?}")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| CliError::usage(format!("missing value for --{key}")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

pub fn resolve_config(common: &CommonArgs, extra: &[(String, String)]) -> CliResult<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut pairs = extra.to_vec();
    pairs.extend(parse_overrides(&common.overrides)?);
    let cfg = base.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `<out_dir>/<command>.manifest.json` with the config and the
/// digests of every existing input.
pub fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path], extra: Value) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut digests = serde_json::Map::new();
    for p in inputs {
        if p.exists() {
            digests.insert(p.display().to_string(), Value::String(sha256_file(p)?));
        }
    }
    let manifest = json!({ "command": command, "config": cfg, "inputs": digests, "extra": extra });
    let path = dir.join(format!("{command}.manifest.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("missing {what}: {}", path.display())))
    }
}

fn load_kg(cfg: &RunConfig) -> CliResult<KnowledgeGraph> {
    require(&cfg.paths.triples, "triples file")?;
    if let Some(d) = &cfg.paths.descriptions {
        require(d, "descriptions file")?;
    }
    Ok(KnowledgeGraph::load(&cfg.paths.triples, cfg.paths.descriptions.as_deref())?)
}

fn kg_inputs(cfg: &RunConfig) -> Vec<&Path> {
    let mut v = vec![cfg.paths.triples.as_path()];
    if let Some(d) = &cfg.paths.descriptions {
        v.push(d);
    }
    v
}

/// Build artifacts loaded back for later commands.
pub struct Built {
    pub kg: KnowledgeGraph,
    pub vocab: Vocabulary,
    pub freq: FrequencyTable,
}

pub fn load_built(cfg: &RunConfig) -> CliResult<Built> {
    let dir = &cfg.paths.out_dir;
    let vocab_path = dir.join(artifacts::VOCAB);
    let freq_path = dir.join(artifacts::FREQUENCY);
    require(&vocab_path, "build artifact (run `dkplm build` first)")?;
    require(&freq_path, "build artifact (run `dkplm build` first)")?;
    let kg = load_kg(cfg)?;
    let vocab = Vocabulary::read_tsv(&vocab_path)?;
    let freq = FrequencyTable::read_tsv(&freq_path, &kg)?;
    Ok(Built { kg, vocab, freq })
}

pub fn linked_corpus(cfg: &RunConfig, path: &Path, built: &Built) -> CliResult<Vec<LinkedSentence>> {
    require(path, "corpus")?;
    let lines = read_corpus_lines(path)?;
    Ok(link_corpus(&lines, &built.kg, &built.vocab, cfg.encoder.max_len)?)
}

pub fn cmd_build(args: &BuildArgs) -> CliResult<()> {
    let mut extra = Vec::new();
    for (key, v) in [("paths.corpus", &args.corpus), ("paths.triples", &args.triples), ("paths.descriptions", &args.descriptions), ("paths.out_dir", &args.out)] {
        if let Some(p) = v {
            extra.push((key.to_string(), Value::String(p.display().to_string()).to_string()));
        }
    }
    let cfg = resolve_config(&args.common, &extra)?;
    require(&cfg.paths.corpus, "corpus")?;
    let mut inputs = kg_inputs(&cfg);
    inputs.push(&cfg.paths.corpus);
    let dir = &cfg.paths.out_dir;
    write_manifest(dir, "build", &cfg, &inputs, Value::Null)?;

    let kg = load_kg(&cfg)?;
    let lines = read_corpus_lines(&cfg.paths.corpus)?;
    let vocab = Vocabulary::build(lines.iter().map(String::as_str), &kg);
    let sentences = link_corpus(&lines, &kg, &vocab, cfg.encoder.max_len)?;
    let freq = FrequencyTable::count(&sentences)?;
    vocab.write_tsv(&dir.join(artifacts::VOCAB))?;
    freq.write_tsv(&dir.join(artifacts::FREQUENCY), &kg)?;
    kg.write_entity_table(&dir.join(artifacts::ENTITIES))?;
    kg.write_relation_table(&dir.join(artifacts::RELATIONS))?;
    let fit = match PowerLawFit::fit_table(&freq) {
        Ok(f) => serde_json::to_value(f)?,
        Err(Error::DegenerateFrequencyTable) => json!({ "error": "degenerate frequency table" }),
        Err(e) => return Err(e.into()),
    };
    let report = json!({
        "fit": fit,
        "n_entities_mentioned": freq.len(),
        "n_mentions": freq.total(),
        "median_frequency": freq.median(),
    });
    let path = dir.join(artifacts::POWER_LAW);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::Io { path, source: e })?;
    log::info!("built {} words, {} mentioned entities", vocab.len(), freq.len());
    Ok(())
}

fn model_for(cfg: &RunConfig, vocab: &Vocabulary, checkpoint: Option<&Path>) -> CliResult<(DkplmModel, bool)> {
    match checkpoint {
        Some(p) => {
            require(p, "checkpoint")?;
            let (model, ck_vocab) = DkplmModel::load(p)?;
            if let Some(v) = ck_vocab {
                if &v != vocab {
                    return Err(Error::Checkpoint("checkpoint vocabulary differs from the build vocabulary".into()).into());
                }
            }
            if model.config().vocab_size != vocab.len() {
                return Err(Error::Checkpoint("checkpoint vocab_size does not match the vocabulary".into()).into());
            }
            Ok((model, false))
        }
        None => {
            let mut enc = cfg.encoder.clone();
            enc.vocab_size = vocab.len();
            Ok((DkplmModel::new(enc, cfg.seed, cfg.decoder.delta_d)?, true))
        }
    }
}

pub fn cmd_detect(args: &DetectArgs) -> CliResult<()> {
    let mut cfg = resolve_config(&args.common, &[])?;
    let sentences_path = args.sentences.clone().unwrap_or_else(|| cfg.paths.corpus.clone());
    let built = load_built(&cfg)?;
    cfg.detection.resolve(&built.freq);
    let mut inputs = kg_inputs(&cfg);
    inputs.push(&sentences_path);
    if let Some(c) = &args.checkpoint {
        inputs.push(c);
    }
    let random_init = args.checkpoint.is_none();
    write_manifest(&cfg.paths.out_dir, "detect", &cfg, &inputs, json!({ "random_init": random_init }))?;
    let corpus = linked_corpus(&cfg, &sentences_path, &built)?;
    let (model, random) = model_for(&cfg, &built.vocab, args.checkpoint.as_deref())?;
    if random {
        log::warn!("no checkpoint given; scoring with a seeded random model (seed {})", cfg.seed);
    }
    let indexed: Vec<(u64, &LinkedSentence)> = corpus.iter().enumerate().map(|(i, s)| (i as u64, s)).collect();
    let reports = detect_all(&indexed, &built.kg, &built.freq, &model.encoder, &cfg.detection)?;
    let mut out = Vec::new();
    for r in &reports {
        let mut v = r.to_json(&built.kg);
        v["random_init"] = Value::Bool(random);
        writeln!(out, "{}", serde_json::to_string(&v)?).expect("write to vec");
    }
    match &args.output {
        Some(p) => fs::write(p, out).map_err(|e| Error::Io { path: p.clone(), source: e })?,
        None => std::io::stdout().write_all(&out).map_err(|e| Error::Io { path: "<stdout>".into(), source: e })?,
    }
    Ok(())
}

pub fn cmd_pretrain(args: &CommonArgs) -> CliResult<()> {
    let mut cfg = resolve_config(args, &[])?;
    let built = load_built(&cfg)?;
    cfg.detection.resolve(&built.freq);
    cfg.encoder.vocab_size = built.vocab.len();
    cfg.encoder.validate()?;
    let mut inputs = kg_inputs(&cfg);
    inputs.push(&cfg.paths.corpus);
    write_manifest(&cfg.paths.out_dir, "pretrain", &cfg, &inputs, Value::Null)?;
    let corpus = linked_corpus(&cfg, &cfg.paths.corpus.clone(), &built)?;
    let toks = KgTokens::new(&built.kg, &built.vocab, cfg.encoder.max_len)?;
    let mut model = DkplmModel::new(cfg.encoder.clone(), cfg.seed, cfg.decoder.delta_d)?;
    let data = TrainData { kg: &built.kg, vocab: &built.vocab, toks: &toks, corpus: &corpus, freq: &built.freq, detection: &cfg.detection };
    let out = TrainOutputs { dir: cfg.paths.out_dir.join(artifacts::PRETRAIN_DIR) };
    let summary = train(&mut model, &data, &cfg.train, cfg.decoder.delta_trainable, &out)?;
    log::info!("finished {} steps; final checkpoint {}", summary.metrics.len(), summary.final_checkpoint.display());
    Ok(())
}

/// Loads the checkpoint and probe set; touches no graph files.
pub fn run_probe(checkpoint: &Path, probes: &Path) -> CliResult<(ProbeResult, Vec<ClozeQuery>, Vocabulary)> {
    require(checkpoint, "checkpoint")?;
    require(probes, "probe file")?;
    let (model, vocab) = DkplmModel::load(checkpoint)?;
    let vocab = vocab.ok_or_else(|| CliError::from(Error::Checkpoint("checkpoint carries no vocabulary".into())))?;
    let records = read_probe_file(probes)?;
    if records.is_empty() {
        return Err(CliError::usage(format!("probe file {} is empty", probes.display())));
    }
    let queries = records.iter().map(|r| ClozeQuery::from_record(r, &vocab)).collect::<dkplm::Result<Vec<_>>>()?;
    let result = evaluate(&model.encoder, &queries)?;
    Ok((result, queries, vocab))
}

pub fn cmd_probe(args: &ProbeArgs) -> CliResult<()> {
    let cfg = resolve_config(&args.common, &[])?;
    let probes = args
        .probes
        .clone()
        .or_else(|| cfg.paths.probes.clone())
        .ok_or_else(|| CliError::usage("no probe file given (--probes or paths.probes)"))?;
    write_manifest(&cfg.paths.out_dir, "probe", &cfg, &[args.checkpoint.as_path(), probes.as_path()], Value::Null)?;
    let (result, queries, vocab) = run_probe(&args.checkpoint, &probes)?;
    let text = serde_json::to_string_pretty(&result)? + "\n";
    if let Some(p) = &args.ranks {
        result.write_ranks_tsv(p, &queries, Some(&vocab))?;
    }
    if let Some(p) = &args.output {
        fs::write(p, &text).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    }
    print!("{text}");
    Ok(())
}

pub fn cmd_export_plots(args: &CommonArgs) -> CliResult<()> {
    let cfg = resolve_config(args, &[])?;
    let built = load_built(&cfg)?;
    let dir = &cfg.paths.out_dir;
    write_manifest(dir, "export-plots", &cfg, &[dir.join(artifacts::FREQUENCY).as_path()], Value::Null)?;
    let fit = PowerLawFit::fit_table(&built.freq).ok();
    let mut out = String::from("rank\tentity\tcount\tfitted\n");
    for (rank, e, c) in built.freq.ranked() {
        let fitted = fit.map_or(String::new(), |f| format!("{}", f.predict(rank)));
        out.push_str(&format!("{rank}\t{}\t{c}\t{fitted}\n", built.kg.entity_name(e)));
    }
    let path = dir.join(artifacts::RANK_FREQUENCY);
    fs::write(&path, out).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig { seed: args.seed, ..Default::default() };
    let data = SynthData::generate(&cfg)?;
    data.write_to(&args.out)?;
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Build(a) => cmd_build(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Probe(a) => cmd_probe(a),
        Command::ExportPlots(a) => cmd_export_plots(a),
        Command::Synth(a) => cmd_synth(a),
    }
}
