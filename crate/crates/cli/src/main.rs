use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use epic::bm25::{Bm25Params, InvertedIndex};
use epic::encoder::{Encoder, EncoderConfig};
use epic::eval::{latency_bench, load_queries, mrr_at_10, Qrels, RunFile, TIMED_QUERIES, WARMUP_QUERIES};
use epic::head::{value_histogram, EpicHead};
use epic::lexicon::Vocabulary;
use epic::pipeline::{explain, ExplainMode, Pipeline, PipelineConfig};
use epic::store::{precompute, StoreReader};
use epic::synthetic::{generate, load_corpus, SyntheticConfig};
use epic::training::{load_triples, train, Checkpoint, TrainConfig, TrainContext};

#[derive(Parser)]
#[command(name = "epic", version, about = "Learned sparse re-ranking over a BM25 first stage")]
struct Cli {
    /// Seed for every random choice (generator, encoder and head init).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic synonym collection as TSV files.
    Synth(SynthArgs),
    /// Build a vocabulary from a corpus (and optional query files).
    BuildVocab(BuildVocabArgs),
    /// Build the BM25 inverted index.
    BuildBm25(BuildBm25Args),
    /// Train the scoring head on triples.
    Train(TrainArgs),
    /// Encode every document into the vector store.
    Precompute(PrecomputeArgs),
    /// Re-rank BM25 results and write a TREC run file.
    Rerank(RerankArgs),
    /// MRR@10 of a run file.
    Eval(EvalArgs),
    /// Per-query latency with warmup.
    Bench(BenchArgs),
    /// Show query term weights or document weights and expansions.
    Explain(ExplainArgs),
    /// Distribution of stored document vector values in 0.1 bins.
    Histogram(HistogramArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    bench_queries: usize,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Query TSV files whose text should also be covered.
    #[arg(long)]
    queries: Vec<PathBuf>,
    #[arg(long, default_value_t = 30000)]
    max_terms: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildBm25Args {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Porter-stem the BM25 term space.
    #[arg(long)]
    stem: bool,
    #[arg(long, default_value_t = 0.9)]
    k1: f64,
    #[arg(long, default_value_t = 0.4)]
    b: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Encoder weights; created from `--seed` when the file does not exist.
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    triples: PathBuf,
    #[arg(long)]
    valid_queries: PathBuf,
    #[arg(long)]
    valid_qrels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 512)]
    eval_every: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    /// Comma-separated re-ranking cutoffs to choose from.
    #[arg(long, value_delimiter = ',', default_value = "10,25,50,100")]
    cutoffs: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
}

#[derive(Args)]
struct PrecomputeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep only the r largest values per document.
    #[arg(long)]
    prune: Option<usize>,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the cutoff chosen during training.
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long)]
    first_stage_k: Option<usize>,
    #[arg(long, default_value = "epic")]
    tag: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Count judged queries without any relevant document as zeros.
    #[arg(long)]
    include_unjudged: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = WARMUP_QUERIES)]
    warmup: usize,
    #[arg(long, default_value_t = TIMED_QUERIES)]
    timed: usize,
    /// Repeat the whole protocol to show run-to-run variance.
    #[arg(long, default_value_t = 2)]
    repeats: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Query,
    Document,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long, value_enum, default_value_t = Mode::Query)]
    mode: Mode,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

#[derive(Args)]
struct HistogramArgs {
    #[arg(long)]
    store: PathBuf,
    /// Also report the share of values at or below this edge.
    #[arg(long, default_value_t = 0.1)]
    edge: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::BuildVocab(a) => build_vocab(a),
        Command::BuildBm25(a) => build_bm25(a),
        Command::Train(a) => train_cmd(a, seed),
        Command::Precompute(a) => precompute_cmd(a),
        Command::Rerank(a) => rerank(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Histogram(a) => histogram(a),
    }
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let config = SyntheticConfig {
        bench_queries: a.bench_queries,
        seed,
        ..Default::default()
    };
    let collection = generate(&config)?;
    collection.write_to(&a.out)?;
    info!(
        "wrote {} documents, {} triples, {} validation and {} test queries to {}",
        collection.docs.len(),
        collection.train_triples.len(),
        collection.valid_queries.len(),
        collection.test_queries.len(),
        a.out.display()
    );
    Ok(())
}

fn build_vocab(a: BuildVocabArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let mut texts: Vec<String> = corpus.into_iter().map(|d| d.1).collect();
    for path in &a.queries {
        texts.extend(load_queries(path)?.into_iter().map(|q| q.1));
    }
    let vocab = Vocabulary::build(&texts, a.max_terms)?;
    vocab.save(&a.out)?;
    info!("vocabulary of {} terms written to {}", vocab.len(), a.out.display());
    Ok(())
}

fn build_bm25(a: BuildBm25Args) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let params = Bm25Params {
        k1: a.k1,
        b: a.b,
        stem: a.stem,
    };
    let index = InvertedIndex::build(corpus.iter().map(|(i, t)| (i.as_str(), t.as_str())), &vocab, params)?;
    index.save(&a.out)?;
    info!(
        "indexed {} documents (avg length {:.1}) into {}",
        index.doc_count(),
        index.avg_doc_length(),
        a.out.display()
    );
    Ok(())
}

fn load_or_create_encoder(path: &Path, config: EncoderConfig, vocab: &Vocabulary) -> Result<Encoder> {
    if path.exists() {
        let encoder = Encoder::load(path)?;
        if *encoder.config() != config {
            warn!("using existing encoder at {}; its shape overrides the flags", path.display());
        }
        return Ok(encoder);
    }
    let encoder = Encoder::init(config, vocab)?;
    encoder.save(path)?;
    info!("created encoder {} (seed {})", path.display(), config.seed);
    Ok(encoder)
}

fn train_cmd(a: TrainArgs, seed: u64) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let corpus = load_corpus(&a.corpus)?;
    let index = InvertedIndex::load(&a.index)?;
    if index.vocab_checksum() != vocab.checksum() {
        bail!("index {} was built with a different vocabulary", a.index.display());
    }
    let encoder_config = EncoderConfig {
        dim: a.dim,
        layers: a.layers,
        heads: a.heads,
        max_len: a.max_len,
        seed,
    };
    let encoder = load_or_create_encoder(&a.encoder, encoder_config, &vocab)?;
    let texts = ordered_texts(&corpus, &index)?;
    let ctx = TrainContext::new(&vocab, &encoder, &index, &texts)?;
    let triples = load_triples(&a.triples)?;
    let valid_queries = load_queries(&a.valid_queries)?;
    let valid_qrels = Qrels::load(&a.valid_qrels)?;
    let config = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        eval_every: a.eval_every,
        patience: a.patience,
        seed,
        cutoff_grid: a.cutoffs,
        ..Default::default()
    };
    let head = EpicHead::init_tied(&encoder, seed);
    let start = Instant::now();
    let outcome = train(head, &ctx, &triples, &valid_queries, &valid_qrels, &config)?;
    info!(
        "trained in {:.1}s over {} steps: validation MRR@10 {:.4} (initial {:.4}), cutoff {}",
        start.elapsed().as_secs_f64(),
        outcome.steps,
        outcome.best_mrr,
        outcome.initial_mrr,
        outcome.rerank_cutoff
    );
    Checkpoint {
        head: outcome.head,
        config,
        vocab_checksum: vocab.checksum(),
        rerank_cutoff: outcome.rerank_cutoff,
        validation_mrr: outcome.best_mrr,
    }
    .save(&a.out)?;
    Ok(())
}

/// Document texts in index ordinal order.
fn ordered_texts(corpus: &[(String, String)], index: &InvertedIndex) -> Result<Vec<String>> {
    if corpus.len() != index.doc_count() {
        bail!("corpus has {} documents but the index has {}", corpus.len(), index.doc_count());
    }
    corpus
        .iter()
        .zip(index.doc_ids())
        .map(|((id, text), indexed)| {
            if id != indexed {
                bail!("corpus order differs from the index at document {id}");
            }
            Ok(text.clone())
        })
        .collect()
}

fn precompute_cmd(a: PrecomputeArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let encoder = Encoder::load(&a.encoder)?;
    let checkpoint = Checkpoint::load(&a.head)?;
    checkpoint.check_vocab(&vocab)?;
    let start = Instant::now();
    let summary = precompute(&checkpoint.head, &encoder, &vocab, &corpus, a.prune, &a.out)?;
    info!(
        "stored {} documents ({} bytes, {} empty) in {:.1}s",
        summary.doc_count,
        summary.bytes,
        summary.empty_docs,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn open_pipeline(config: &Path, cutoff: Option<usize>, first_stage_k: Option<usize>) -> Result<Pipeline> {
    let mut cfg = PipelineConfig::load(config)?;
    if cutoff.is_some() {
        cfg.rerank_cutoff = cutoff;
    }
    if let Some(k) = first_stage_k {
        cfg.first_stage_k = k;
    }
    Ok(Pipeline::open(&cfg)?)
}

fn rerank(a: RerankArgs) -> Result<()> {
    let pipeline = open_pipeline(&a.config, a.cutoff, a.first_stage_k)?;
    let queries = load_queries(&a.queries)?;
    let run = pipeline.rerank_all(&queries)?;
    run.save(&a.out, &a.tag)?;
    info!(
        "re-ranked {} queries at cutoff {} into {}",
        queries.len(),
        pipeline.rerank_cutoff,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = RunFile::load(&a.run)?;
    let qrels = Qrels::load(&a.qrels)?;
    println!("{:.4}", mrr_at_10(&run, &qrels, a.include_unjudged)?);
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let pipeline = open_pipeline(&a.config, None, None)?;
    let queries: Vec<String> = load_queries(&a.queries)?.into_iter().map(|q| q.1).collect();
    let mut means = Vec::new();
    for round in 1..=a.repeats.max(1) {
        let report = latency_bench(&pipeline, &queries, a.warmup, a.timed)?;
        println!("run\t{round}");
        print!("{}", report.render());
        means.push(report.mean_ms);
    }
    if means.len() > 1 {
        let (lo, hi) = means
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &m| (lo.min(m), hi.max(m)));
        println!("mean_spread\t{:.4}", hi / lo);
    }
    Ok(())
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    let cfg = PipelineConfig::load(&a.config)?;
    let vocab = Vocabulary::load(&cfg.vocab)?;
    let encoder = Encoder::load(&cfg.encoder)?;
    let checkpoint = Checkpoint::load(&cfg.head).with_context(|| format!("loading {}", cfg.head.display()))?;
    checkpoint.check_vocab(&vocab)?;
    let mode = match a.mode {
        Mode::Query => ExplainMode::Query,
        Mode::Document => ExplainMode::Document,
    };
    for t in explain(&checkpoint.head, &encoder, &vocab, &a.text, mode, a.top_k)? {
        let kind = if t.expansion { "expansion" } else { "term" };
        println!("{kind}\t{}\t{:.6}", t.term, t.weight);
    }
    Ok(())
}

fn histogram(a: HistogramArgs) -> Result<()> {
    let store = StoreReader::open(&a.store)?;
    let vectors = (0..store.doc_count())
        .map(|i| store.read_vector(i))
        .collect::<epic::Result<Vec<_>>>()?;
    let hist = value_histogram(&vectors)?;
    for (bin, count) in &hist.bins {
        println!("{:.1}\t{count}", *bin as f64 / 10.0);
    }
    println!(
        "at_or_below_{}\t{:.6}",
        a.edge,
        hist.fraction_at_or_below(a.edge)
    );
    Ok(())
}
