//! Command-line front end: generate and ingest corpora, evaluate queries
//! with marginal probabilities, compute exact oracle answers, and benchmark
//! the two evaluators against each other.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use worlddb::evaluator::{
    self, EvaluationConfig, LossPoint, MarginalEstimate, Mode,
};
use worlddb::factor::exact::{exact_query_marginals, DEFAULT_ENUMERATION_CAP};
use worlddb::factor::FactorGraphSpec;
use worlddb::ner::{self, BatchFlipProposer, SynthConfig};
use worlddb::query::{self, Query};
use worlddb::store::{self, IngestOptions, SkipScope, World};

#[derive(Parser)]
#[command(
    name = "worlddb",
    about = "Probabilistic database engine: one stored world, factor-graph scoring, \
             MCMC sampling, incrementally maintained query answers",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Naive,
    Incremental,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TimingArg {
    /// Measure wall-clock time.
    Wall,
    /// Write zeros in timing columns (byte-reproducible outputs).
    None,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ChainStreamsArg {
    /// Each chain draws from its own RNG stream.
    Distinct,
    /// All chains replay stream 0 (diagnostic).
    Shared,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScopeArg {
    Document,
    Corpus,
}

#[derive(Subcommand)]
enum Command {
    /// Write a reproducible synthetic token corpus (and optionally a
    /// matching model file).
    Generate(GenerateArgs),
    /// Read a TSV corpus into a store snapshot.
    Ingest(IngestArgs),
    /// Estimate per-tuple marginals of a query by MCMC sampling.
    Evaluate(EvaluateArgs),
    /// Exact marginals by brute-force enumeration (small worlds only).
    Oracle(OracleArgs),
    /// Compare naive and incremental evaluation across corpus sizes.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 25)]
    docs: u64,
    #[arg(long, default_value_t = 40)]
    tokens_per_doc: u64,
    /// Vocabulary size; roughly a third becomes capitalized entity strings.
    #[arg(long, default_value_t = 120)]
    vocab: u64,
    /// Probability a position starts an entity mention.
    #[arg(long, default_value_t = 0.25)]
    entity_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus TSV path.
    #[arg(long)]
    out: PathBuf,
    /// Also write a model file with weights matched to the vocabulary.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    /// TSV corpus (TOK_ID, DOC_ID, STRING, TRUTH).
    #[arg(long)]
    corpus: PathBuf,
    /// Snapshot path to write.
    #[arg(long)]
    out: PathBuf,
    /// Group identical strings per document or across the corpus.
    #[arg(long, value_enum, default_value_t = ScopeArg::Document)]
    skip_scope: ScopeArg,
    /// Skip-link all strings, not only capitalized ones.
    #[arg(long, default_value_t = false)]
    all_strings: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Store snapshot.
    #[arg(long)]
    store: PathBuf,
    /// Model file.
    #[arg(long)]
    model: PathBuf,
    /// Query text (see README for the grammar).
    #[arg(long)]
    query: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Incremental)]
    mode: ModeArg,
    /// Number of samples (thinned; the initial world adds one more).
    #[arg(long, default_value_t = 100)]
    samples: u64,
    /// MCMC steps between samples.
    #[arg(long, default_value_t = 10_000)]
    steps_per_sample: u64,
    #[arg(long, default_value_t = 1)]
    chains: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Walks discarded before sampling starts.
    #[arg(long, default_value_t = 0)]
    burn_in: u64,
    /// Marginal CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Reference marginals; enables the loss curve.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Loss-curve CSV path (defaults to <out>.loss.csv).
    #[arg(long)]
    loss_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TimingArg::Wall)]
    timing: TimingArg,
    #[arg(long, value_enum, default_value_t = ChainStreamsArg::Distinct)]
    chain_streams: ChainStreamsArg,
    /// Cross-check maintained answers against full execution every N
    /// samples (incremental debugging).
    #[arg(long)]
    crosscheck_every: Option<u64>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long)]
    out: PathBuf,
    /// Refuse when the joint hidden state space exceeds this many
    /// assignments.
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    cap: u64,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Comma-separated corpus sizes in tokens, e.g. 1000,10000,100000.
    #[arg(long)]
    sizes: String,
    /// Query to benchmark (defaults to the selection-projection query).
    #[arg(long, default_value = "SELECT STRING FROM TOKEN WHERE LABEL='B-PER'")]
    query: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    steps_per_sample: u64,
    #[arg(long, default_value_t = 40)]
    tokens_per_doc: u64,
    #[arg(long, default_value_t = 0.25)]
    entity_rate: f64,
    /// Samples of the reference run that stands in for ground truth.
    #[arg(long, default_value_t = 1500)]
    truth_samples: u64,
    /// Cap on samples per timed run.
    #[arg(long, default_value_t = 400)]
    max_samples: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = TimingArg::Wall)]
    timing: TimingArg,
    /// Working directory for generated corpora and snapshots.
    #[arg(long)]
    workdir: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Ingest(args) => cmd_ingest(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Benchmark(args) => cmd_benchmark(args),
    };
    match result {
        Ok(()) => {}
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            std::process::exit(code);
        }
    }
}

struct CliError {
    code: i32,
    message: String,
}

impl From<worlddb::Error> for CliError {
    fn from(e: worlddb::Error) -> CliError {
        CliError {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: 1,
        message: message.into(),
    }
}

type CliResult = Result<(), CliError>;

fn cmd_generate(args: GenerateArgs) -> CliResult {
    let cfg = SynthConfig {
        docs: args.docs,
        tokens_per_doc: args.tokens_per_doc,
        vocab: args.vocab,
        entity_rate: args.entity_rate,
        seed: args.seed,
    };
    if !(0.0..=1.0).contains(&cfg.entity_rate) {
        return Err(usage("--entity-rate must lie in [0, 1]"));
    }
    ner::generate_corpus(&cfg, &args.out)?;
    if let Some(model_out) = &args.model_out {
        ner::write_model_file(&ner::matching_weights(&cfg), model_out)?;
    }
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> CliResult {
    let options = IngestOptions {
        skip_scope: match args.skip_scope {
            ScopeArg::Document => SkipScope::Document,
            ScopeArg::Corpus => SkipScope::Corpus,
        },
        caps_only: !args.all_strings,
    };
    let world = store::ingest_tokens(&args.corpus, options)?;
    store::write_snapshot(&world, &args.out)?;
    Ok(())
}

fn load_store_and_model(
    store_path: &Path,
    model_path: &Path,
) -> Result<(World, FactorGraphSpec), CliError> {
    let mut world = store::read_snapshot(store_path)?;
    let loaded = worlddb::model::load_model(model_path)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    loaded.spec.bind(&mut world)?;
    Ok((world, loaded.spec))
}

fn parse_query(text: &str) -> Result<Query, CliError> {
    query::parse(text).map_err(|e| CliError {
        code: 2,
        message: e.to_string(),
    })
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult {
    if args.samples < 1 || args.steps_per_sample < 1 || args.chains < 1 {
        return Err(usage("--samples, --steps-per-sample and --chains must be at least 1"));
    }
    let (world, spec) = load_store_and_model(&args.store, &args.model)?;
    let q = parse_query(&args.query)?;
    let cfg = EvaluationConfig {
        mode: match args.mode {
            ModeArg::Naive => Mode::Naive,
            ModeArg::Incremental => Mode::Incremental,
        },
        samples: args.samples,
        steps_per_sample: args.steps_per_sample,
        chains: args.chains,
        seed: args.seed,
        burn_in: args.burn_in,
        crosscheck_every: args.crosscheck_every,
        shared_chain_streams: args.chain_streams == ChainStreamsArg::Shared,
    };

    let est = if let Some(truth_path) = &args.truth {
        if args.chains != 1 {
            return Err(usage("loss curves require --chains 1"));
        }
        let truth = evaluator::read_truth_csv(truth_path)?;
        let mut w = world;
        let mut proposer = BatchFlipProposer::new();
        let mut points: Vec<LossPoint> = Vec::new();
        let wall = args.timing == TimingArg::Wall;
        let start = Instant::now();
        let est = {
            let mut observer = |sample: u64, counts: &BTreeMap<Vec<store::Value>, u64>, z: u64| {
                let elapsed_ms = if wall {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                };
                let snapshot = MarginalEstimate {
                    columns: Vec::new(),
                    counts: counts.clone(),
                    z,
                };
                let loss = evaluator::squared_error_vs_truth(&snapshot, &truth);
                points.push(LossPoint {
                    sample,
                    elapsed_ms,
                    loss,
                });
                true
            };
            evaluator::evaluate_with_observer(&mut w, &spec, &mut proposer, &q, &cfg, &mut observer)?
        };
        let loss_out = args
            .loss_out
            .clone()
            .unwrap_or_else(|| loss_path(&args.out));
        evaluator::write_loss_csv(&points, &loss_out)?;
        est
    } else if args.chains == 1 {
        let mut w = world;
        let mut proposer = BatchFlipProposer::new();
        match cfg.mode {
            Mode::Naive => evaluator::evaluate_naive(&mut w, &spec, &mut proposer, &q, &cfg)?,
            Mode::Incremental => {
                evaluator::evaluate_incremental(&mut w, &spec, &mut proposer, &q, &cfg)?
            }
        }
    } else {
        evaluator::evaluate_parallel(
            &world,
            &spec,
            &|_| Box::new(BatchFlipProposer::new()),
            &q,
            &cfg,
        )?
    };
    evaluator::write_marginals_csv(&est, &args.out)?;
    Ok(())
}

fn loss_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".loss.csv");
    out.with_file_name(name)
}

fn cmd_oracle(args: OracleArgs) -> CliResult {
    let (world, spec) = load_store_and_model(&args.store, &args.model)?;
    let q = parse_query(&args.query)?;
    let plan = query::validate(&q, &world)?;
    let marginals = exact_query_marginals(&spec, &world, &q, args.cap)?;
    evaluator::write_exact_csv(&plan.columns, &marginals, &args.out)?;
    Ok(())
}

struct BenchRow {
    tuples: u64,
    mode: Mode,
    samples_to_half: i64,
    time_to_half_ms: i64,
}

fn cmd_benchmark(args: BenchmarkArgs) -> CliResult {
    let sizes: Vec<u64> = args
        .sizes
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("bad --sizes list {:?}", args.sizes)))?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(usage("--sizes needs positive token counts"));
    }
    let q = parse_query(&args.query)?;
    let workdir = args
        .workdir
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join(format!("worlddb-bench-{}", args.seed)));
    std::fs::create_dir_all(&workdir).map_err(worlddb::Error::from)?;
    let wall = args.timing == TimingArg::Wall;

    let mut rows: Vec<BenchRow> = Vec::new();
    for &size in &sizes {
        let docs = size.div_ceil(args.tokens_per_doc);
        // Vocabulary grows sublinearly with corpus size, so strings repeat
        // across many documents and per-string marginals actually converge
        // within a run.
        let cfg = SynthConfig {
            docs,
            tokens_per_doc: args.tokens_per_doc,
            vocab: (size / 250).clamp(30, 2000),
            entity_rate: args.entity_rate,
            seed: args.seed ^ size,
        };
        let corpus = workdir.join(format!("corpus-{size}.tsv"));
        ner::generate_corpus(&cfg, &corpus)?;
        let world = store::ingest_tokens(&corpus, IngestOptions::default())?;
        let weights = ner::matching_weights(&cfg);
        let spec = ner::build_skip_chain_spec(&weights);

        // Reference marginals from a long incremental run.
        let truth_cfg = EvaluationConfig {
            mode: Mode::Incremental,
            samples: args.truth_samples,
            steps_per_sample: args.steps_per_sample,
            seed: args.seed.wrapping_add(0x517e),
            ..Default::default()
        };
        let mut truth_world = world.clone_world();
        let mut truth_proposer = BatchFlipProposer::new();
        let truth = evaluator::evaluate_incremental(
            &mut truth_world,
            &spec,
            &mut truth_proposer,
            &q,
            &truth_cfg,
        )?
        .marginals();

        for mode in [Mode::Naive, Mode::Incremental] {
            let run_cfg = EvaluationConfig {
                mode,
                samples: args.max_samples,
                steps_per_sample: args.steps_per_sample,
                seed: args.seed,
                ..Default::default()
            };
            let mut w = world.clone_world();
            let mut proposer = BatchFlipProposer::new();
            let mut losses: Vec<(u64, u64, f64)> = Vec::new();
            let start = Instant::now();
            {
                // Stop as soon as the loss halves; the timing rows need
                // nothing past the crossing.
                let mut initial = f64::INFINITY;
                let mut observer =
                    |sample: u64, counts: &BTreeMap<Vec<store::Value>, u64>, z: u64| {
                        let elapsed = if wall {
                            start.elapsed().as_millis() as u64
                        } else {
                            0
                        };
                        let loss = evaluator::squared_error_counts(counts, z, &truth);
                        losses.push((sample, elapsed, loss));
                        if sample == 0 {
                            initial = loss;
                            true
                        } else {
                            loss > initial / 2.0
                        }
                    };
                evaluator::evaluate_with_observer(
                    &mut w,
                    &spec,
                    &mut proposer,
                    &q,
                    &run_cfg,
                    &mut observer,
                )?;
            }
            let initial = losses.first().map(|(_, _, l)| *l).unwrap_or(0.0);
            let crossing = losses
                .iter()
                .find(|(s, _, l)| *s > 0 && *l <= initial / 2.0);
            let (samples_to_half, time_to_half_ms) = match crossing {
                Some((s, t, _)) => (*s as i64, *t as i64),
                None => (-1, -1),
            };
            rows.push(BenchRow {
                tuples: size,
                mode,
                samples_to_half,
                time_to_half_ms,
            });
        }
    }

    let mut w = csv::Writer::from_path(&args.out)
        .map_err(|e| CliError { code: 2, message: e.to_string() })?;
    w.write_record(["tuples", "mode", "samples_to_half", "time_to_half_ms"])
        .map_err(|e| CliError { code: 2, message: e.to_string() })?;
    for r in rows {
        w.write_record([
            r.tuples.to_string(),
            r.mode.to_string(),
            r.samples_to_half.to_string(),
            r.time_to_half_ms.to_string(),
        ])
        .map_err(|e| CliError { code: 2, message: e.to_string() })?;
    }
    w.flush().map_err(worlddb::Error::from)?;
    Ok(())
}
