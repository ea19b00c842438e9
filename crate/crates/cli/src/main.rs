// SPDX-License-Identifier: MIT OR Apache-2.0

//! `flowroutes`: traces, head statistics, SVD reports and the local API.
//!
//! Exit codes: 0 on success, 1 on a runtime error, 2 on a usage error.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowroutes_core::analysis::{
    activation_frequency, diff_frequencies, head_stats, svd_head_tokens, svd_report_csv,
    svd_report_text, FrequencyMatrix, FrequencyMode, PositionFilter, PromptContributions,
    TaxonomyThresholds, DEFAULT_FREQUENCY_TAU, DEFAULT_TOP_K,
};
use flowroutes_core::bench::run_bench;
use flowroutes_core::corpus::{ioi_prompts, read_corpus, Prompt};
use flowroutes_core::model::toy::{
    prev_token_model, random_weights, write_model_dir, zero_block_weights, TOY_VOCAB_SIZE,
};
use flowroutes_core::model::{next_token, Model, ModelConfig};
use flowroutes_core::routes::{
    extract_routes, start_at, to_dot, to_json, DEFAULT_RENORMALIZE, DEFAULT_TAU,
};
use flowroutes_core::Error as CoreError;
use flowroutes_service::{AppState, ServiceConfig, DEFAULT_CACHE_CAP, DEFAULT_PORT};
use rayon::prelude::*;

use manifest::RunManifest;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Vocabulary { .. }
            | CoreError::Encoding(_)
            | CoreError::Context { .. }
            | CoreError::OutOfRange(_)
            | CoreError::Empty(_)
            | CoreError::Parse(_)
            | CoreError::Io { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "flowroutes",
    version,
    about = "Information flow routes through decoder-only transformers"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Model directory (config.json, model.safetensors, tokenizer files).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Importance threshold.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Renormalize importances after thresholding.
    #[arg(long, global = true, action = clap::ArgAction::Set)]
    renormalize: Option<bool>,
    /// Worker threads for corpus commands.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "flowroutes-out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum Family {
    Gpt2,
    Llama,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum ToyKind {
    /// Random weights.
    Random,
    /// Random embeddings and zero attention and feed-forward blocks.
    ZeroBlock,
    /// One layer; head 0 attends to the previous token, head 1 uniformly.
    PrevToken,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract the route graph of one prompt.
    Trace {
        #[arg(long, conflicts_with = "ids")]
        prompt: Option<String>,
        /// Comma-separated token ids.
        #[arg(long, value_delimiter = ',')]
        ids: Option<Vec<u32>>,
        /// Start position (default: last).
        #[arg(long)]
        position: Option<usize>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Head activation frequencies over a corpus.
    Heads {
        #[arg(long)]
        corpus: PathBuf,
        /// Corpus lines are space-separated token ids.
        #[arg(long)]
        ids: bool,
        /// per_example or per_junction.
        #[arg(long, default_value = "per_example")]
        mode: String,
        /// last or all.
        #[arg(long, default_value = "last")]
        position: String,
        /// Also write taxonomy flags.
        #[arg(long)]
        classify: bool,
        #[arg(long, default_value_t = TaxonomyThresholds::default().share)]
        share_threshold: f64,
        #[arg(long, default_value_t = TaxonomyThresholds::default().case)]
        case_threshold: f64,
        /// Absolute importance units.
        #[arg(long, default_value_t = TaxonomyThresholds::default().first_subword_cap)]
        first_subword_cap: f64,
    },
    /// Elementwise difference of two frequency CSVs.
    Diff { a: PathBuf, b: PathBuf },
    /// Top unembedding tokens of a head's OV singular directions.
    Svd {
        /// 0-based block index.
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        k: usize,
    },
    /// Time forward passes and extraction over a corpus.
    Bench {
        /// Corpus file (default: generated IOI prompts).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        ids: bool,
        /// Number of generated prompts.
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the HTTP API on localhost.
    Serve {
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        ids: bool,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CACHE_CAP)]
        cache_cap: usize,
    },
    /// Write a seeded synthetic model into the output directory.
    MakeToyModel {
        #[arg(long, value_enum, default_value = "gpt2")]
        family: Family,
        #[arg(long, value_enum, default_value = "random")]
        kind: ToyKind,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 4)]
        d_head: usize,
        #[arg(long, default_value_t = TOY_VOCAB_SIZE)]
        vocab: usize,
        #[arg(long, default_value_t = 64)]
        n_ctx: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Common {
    fn load_model(&self, m: &mut RunManifest) -> CliResult<Model> {
        let dir = self
            .model
            .as_ref()
            .ok_or_else(|| CliError::Usage("--model DIR is required".into()))?;
        if !dir.is_dir() {
            return Err(CliError::Usage(format!(
                "model directory {} does not exist",
                dir.display()
            )));
        }
        let t = Instant::now();
        let model = Model::load(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        m.model = Some(dir.clone());
        m.time("load", ms(t));
        Ok(model)
    }

    fn tau(&self, default: f64, m: &mut RunManifest) -> CliResult<f64> {
        let tau = self.tau.unwrap_or(default);
        if !tau.is_finite() || tau < 0.0 {
            return Err(CliError::Usage(format!(
                "--tau must be a non-negative number, got {tau}"
            )));
        }
        m.tau = Some(tau);
        Ok(tau)
    }

    fn renormalize(&self, m: &mut RunManifest) -> bool {
        let r = self.renormalize.unwrap_or(DEFAULT_RENORMALIZE);
        m.renormalize = Some(r);
        r
    }

    fn out_dir(&self) -> CliResult<&Path> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(&self.out)
    }
}

fn load_corpus(path: &Path, ids: bool, m: &mut RunManifest) -> CliResult<Vec<Prompt>> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "corpus file {} does not exist",
            path.display()
        )));
    }
    let prompts = read_corpus(path, ids)?;
    if prompts.is_empty() {
        return Err(CliError::Usage(format!(
            "corpus {} has no prompts",
            path.display()
        )));
    }
    m.input("corpus", path.display().to_string());
    m.flag("ids", ids);
    m.flag("prompts", prompts.len());
    Ok(prompts)
}

fn trace(
    c: &Common,
    prompt: Option<String>,
    ids: Option<Vec<u32>>,
    position: Option<usize>,
    format: Format,
) -> CliResult<()> {
    let mut m = RunManifest::new("trace");
    let tau = c.tau(DEFAULT_TAU, &mut m)?;
    let renormalize = c.renormalize(&mut m);
    let prompt = match (prompt, ids) {
        (Some(p), None) => {
            m.input("prompt", p.as_str());
            Prompt::Text(p)
        }
        (None, Some(ids)) => {
            m.input("ids", ids.clone());
            Prompt::Ids(ids)
        }
        _ => return Err(CliError::Usage("trace needs --prompt or --ids".into())),
    };
    let model = c.load_model(&mut m)?;
    let out = c.out_dir()?;
    let started = Instant::now();
    let seq = prompt.tokens(&model)?;
    if seq.len() > model.config().n_ctx {
        return Err(CoreError::Context {
            len: seq.len(),
            limit: model.config().n_ctx,
        }
        .into());
    }
    let cache = model.forward(&seq)?;
    m.time("forward", ms(started));
    let t = Instant::now();
    let start = start_at(&cache, position)?;
    let graph = extract_routes(&model, &cache, start, tau, renormalize)?;
    m.time("extraction", ms(t));
    let elapsed = ms(started);
    let (id, _) = next_token(&cache);
    m.flag(
        "position",
        position.map_or_else(|| "last".into(), serde_json::Value::from),
    );
    let path = match format {
        Format::Json => {
            m.flag("format", "json");
            m.write_output(out, "trace.json", &(to_json(&graph)? + "\n"))?
        }
        Format::Dot => {
            m.flag("format", "dot");
            m.write_output(out, "trace.dot", &to_dot(&graph))?
        }
    };
    m.time("total", elapsed);
    m.finish(out)?;
    println!("predicted token: {:?}", model.token_string(id));
    println!("elapsed ms: {elapsed:.3}");
    println!(
        "wrote {} ({} nodes, {} edges)",
        path.display(),
        graph.nodes.len(),
        graph.edges.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn heads(
    c: &Common,
    corpus: &Path,
    ids: bool,
    mode: &str,
    position: &str,
    classify: bool,
    th: TaxonomyThresholds,
) -> CliResult<()> {
    let mut m = RunManifest::new("heads");
    let tau = c.tau(DEFAULT_FREQUENCY_TAU, &mut m)?;
    let renormalize = c.renormalize(&mut m);
    let mode: FrequencyMode = mode.parse()?;
    let filter: PositionFilter = position.parse()?;
    m.flag("mode", serde_json::to_value(mode).expect("enum serializes"));
    m.flag(
        "position",
        serde_json::to_value(filter).expect("enum serializes"),
    );
    m.flag("classify", classify);
    let prompts = load_corpus(corpus, ids, &mut m)?;
    let model = c.load_model(&mut m)?;
    let out = c.out_dir()?;
    let t = Instant::now();
    let caches = prompts
        .par_iter()
        .map(|p| {
            let seq = p.tokens(&model)?;
            if seq.len() > model.config().n_ctx {
                return Err(CoreError::Context {
                    len: seq.len(),
                    limit: model.config().n_ctx,
                });
            }
            model.forward(&seq)
        })
        .collect::<flowroutes_core::Result<Vec<_>>>()?;
    m.time("forward", ms(t));
    let t = Instant::now();
    let freq = activation_frequency(&model, &caches, tau, renormalize, filter, mode)?;
    m.time("frequency", ms(t));
    m.write_output(out, "frequency.csv", &freq.to_csv()?)?;
    if classify {
        m.flag("share_threshold", th.share);
        m.flag("case_threshold", th.case);
        m.flag("first_subword_cap", th.first_subword_cap);
        let t = Instant::now();
        let contribs = caches
            .par_iter()
            .map(|cache| PromptContributions::from_cache(&model, cache))
            .collect::<flowroutes_core::Result<Vec<_>>>()?;
        let rows = head_stats(&contribs, &freq, &th)?;
        m.time("classify", ms(t));
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let text = String::from_utf8(bytes).map_err(|e| CliError::Runtime(e.to_string()))?;
        m.write_output(out, "head_stats.csv", &text)?;
        let flagged: Vec<String> = rows
            .iter()
            .filter(|r| r.prev_token_flag || r.subword_merge_flag)
            .map(|r| {
                let kind = if r.prev_token_flag {
                    "prev-token"
                } else {
                    "subword-merge"
                };
                format!("l{}h{} {kind}", r.layer, r.head)
            })
            .collect();
        println!(
            "flagged heads: {}",
            if flagged.is_empty() {
                "none".into()
            } else {
                flagged.join(", ")
            }
        );
    }
    let outputs = m.outputs.clone();
    m.finish(out)?;
    for p in outputs {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn read_frequency(path: &Path) -> CliResult<FrequencyMatrix> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(FrequencyMatrix::from_csv(&text)?)
}

fn diff(c: &Common, a: &Path, b: &Path) -> CliResult<()> {
    let mut m = RunManifest::new("diff");
    m.input("a", a.display().to_string());
    m.input("b", b.display().to_string());
    let d = diff_frequencies(&read_frequency(a)?, &read_frequency(b)?)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let out = c.out_dir()?;
    let p = m.write_output(out, "diff.csv", &d.to_csv()?)?;
    m.finish(out)?;
    println!("wrote {}", p.display());
    Ok(())
}

fn svd(c: &Common, layer: usize, head: usize, k: usize) -> CliResult<()> {
    let mut m = RunManifest::new("svd");
    m.flag("layer", layer);
    m.flag("head", head);
    m.flag("k", k);
    let model = c.load_model(&mut m)?;
    let out = c.out_dir()?;
    let t = Instant::now();
    let dirs = svd_head_tokens(&model, layer, head, k)?;
    m.time("svd", ms(t));
    let stem = format!("svd-l{layer}-h{head}");
    m.write_output(out, &format!("{stem}.csv"), &svd_report_csv(&dirs)?)?;
    let text = svd_report_text(layer, head, &dirs);
    m.write_output(out, &format!("{stem}.txt"), &text)?;
    m.finish(out)?;
    print!("{text}");
    Ok(())
}

fn bench(c: &Common, corpus: Option<&Path>, ids: bool, n: usize, seed: u64) -> CliResult<()> {
    let mut m = RunManifest::new("bench");
    let tau = c.tau(DEFAULT_TAU, &mut m)?;
    let renormalize = c.renormalize(&mut m);
    let prompts = match corpus {
        Some(p) => load_corpus(p, ids, &mut m)?,
        None => {
            if n == 0 {
                return Err(CliError::Usage("--n must be positive".into()));
            }
            m.input("corpus", "generated ioi");
            m.flag("n", n);
            m.flag("seed", seed);
            ioi_prompts(n, seed).into_iter().map(Prompt::Text).collect()
        }
    };
    let model = c.load_model(&mut m)?;
    let out = c.out_dir()?;
    let report = run_bench(&model, &prompts, tau, renormalize)?;
    m.time("tokenize", report.tokenize_ms);
    m.time("forward", report.forward_ms);
    m.time("extraction", report.extraction_ms);
    m.time("total", report.total_ms);
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    m.write_output(out, "bench.json", &(json + "\n"))?;
    m.finish(out)?;
    print!("{}", report.summary());
    Ok(())
}

fn serve(
    c: &Common,
    port: u16,
    corpus: Option<&Path>,
    ids: bool,
    ui_dir: Option<PathBuf>,
    cache_cap: usize,
) -> CliResult<()> {
    let mut m = RunManifest::new("serve");
    let corpus = corpus.map(|p| load_corpus(p, ids, &mut m)).transpose()?;
    let model = c.load_model(&mut m)?;
    if let Some(dir) = &ui_dir {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!(
                "ui directory {} does not exist",
                dir.display()
            )));
        }
    }
    let mut config = ServiceConfig {
        cache_cap,
        corpus,
        ui_dir,
        ..ServiceConfig::default()
    };
    if let Some(n) = c.threads {
        config.workers = n;
    }
    let state = AppState::new(model, config);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("serving on http://127.0.0.1:{port}");
    rt.block_on(flowroutes_service::serve(state, port))
        .map_err(|e| CliError::Runtime(format!("server error: {e}")))
}

#[allow(clippy::too_many_arguments)]
fn make_toy_model(
    c: &Common,
    family: Family,
    kind: ToyKind,
    layers: usize,
    heads: usize,
    d_head: usize,
    vocab: usize,
    n_ctx: usize,
    seed: u64,
) -> CliResult<()> {
    let mut m = RunManifest::new("make-toy-model");
    for (k, v) in [
        ("layers", layers),
        ("heads", heads),
        ("d_head", d_head),
        ("vocab", vocab),
        ("n_ctx", n_ctx),
    ] {
        if v == 0 {
            return Err(CliError::Usage(format!(
                "--{} must be positive",
                k.replace('_', "-")
            )));
        }
        m.flag(k, v);
    }
    m.flag("seed", seed);
    m.flag("family", format!("{family:?}").to_lowercase());
    m.flag("kind", format!("{kind:?}").to_lowercase());
    let (cfg, weights) = match kind {
        ToyKind::PrevToken => {
            if family != Family::Gpt2 {
                return Err(CliError::Usage(
                    "the prev-token model is GPT-2 style only".into(),
                ));
            }
            prev_token_model(vocab, seed)?
        }
        ToyKind::Random | ToyKind::ZeroBlock => {
            let mut cfg = match family {
                Family::Gpt2 => ModelConfig::gpt2_style(layers, heads, d_head, vocab),
                Family::Llama => ModelConfig::llama_style(layers, heads, d_head, vocab),
            };
            cfg.n_ctx = n_ctx;
            if family == Family::Gpt2 && vocab >= TOY_VOCAB_SIZE {
                cfg.prepend_bos = true;
                cfg.bos_token_id = Some(TOY_VOCAB_SIZE as u32 - 1);
            }
            let w = if kind == ToyKind::Random {
                random_weights(&cfg, seed)?
            } else {
                zero_block_weights(&cfg, seed)?
            };
            (cfg, w)
        }
    };
    let out = c.out_dir()?;
    write_model_dir(out, &cfg, &weights)?;
    m.outputs.push(out.join("config.json"));
    m.outputs.push(out.join("model.safetensors"));
    m.finish(out)?;
    println!("wrote model to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Trace {
            prompt,
            ids,
            position,
            format,
        } => trace(c, prompt, ids, position, format),
        Command::Heads {
            corpus,
            ids,
            mode,
            position,
            classify,
            share_threshold,
            case_threshold,
            first_subword_cap,
        } => heads(
            c,
            &corpus,
            ids,
            &mode,
            &position,
            classify,
            TaxonomyThresholds {
                share: share_threshold,
                case: case_threshold,
                first_subword_cap,
            },
        ),
        Command::Diff { a, b } => diff(c, &a, &b),
        Command::Svd { layer, head, k } => svd(c, layer, head, k),
        Command::Bench {
            corpus,
            ids,
            n,
            seed,
        } => bench(c, corpus.as_deref(), ids, n, seed),
        Command::Serve {
            port,
            corpus,
            ids,
            ui_dir,
            cache_cap,
        } => serve(c, port, corpus.as_deref(), ids, ui_dir, cache_cap),
        Command::MakeToyModel {
            family,
            kind,
            layers,
            heads,
            d_head,
            vocab,
            n_ctx,
            seed,
        } => make_toy_model(c, family, kind, layers, heads, d_head, vocab, n_ctx, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Usage(msg) | CliError::Runtime(msg)) = &e;
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}
