//! `lsb`: command-line front end. Every subcommand is a thin shell over one
//! library operation; exit codes are 0 on success, 1 on usage errors, 2 on
//! data or runtime errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lsb_core::datastore::{self, Format, SelectionBatch};
use lsb_core::fusion::{self, FusionMode, FusionParams, FusionSample};
use lsb_core::knn::{lsb_expand, top_k, KnnConfig, Metric};
use lsb_core::lookalike::{
    build_mismatch_dataset, lt_filter, train_lookalike, LookalikeModel, LookalikeTrainConfig,
};
use lsb_core::metrics::{evaluate_binary, DEFAULT_PRECISION_TARGETS};
use lsb_core::pipeline::{plan_round, run_loop, PipelineState, RoundConfig};
use lsb_core::synth::{
    generate_needle_task, generate_synthetic_corpus, NeedleTaskConfig, SyntheticCorpusConfig,
};
use lsb_core::uncertainty::{acquisition_score, select_seeds, select_statistical, AcquisitionStrategy, SeedRule};

#[derive(Parser)]
#[command(name = "lsb", version, about = "Latent-space-broadening data selection")]
struct Cli {
    /// Worker threads for parallel scoring and retrieval (outputs are
    /// thread-count independent).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Machine-readable JSON on stdout instead of human tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Packed,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Format {
        match f {
            FormatArg::Jsonl => Format::Jsonl,
            FormatArg::Packed => Format::Packed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    #[value(alias = "least_confident")]
    LeastConfident,
    Margin,
    #[value(alias = "max_entropy")]
    MaxEntropy,
}

impl From<StrategyArg> for AcquisitionStrategy {
    fn from(s: StrategyArg) -> AcquisitionStrategy {
        match s {
            StrategyArg::LeastConfident => AcquisitionStrategy::LeastConfident,
            StrategyArg::Margin => AcquisitionStrategy::Margin,
            StrategyArg::MaxEntropy => AcquisitionStrategy::MaxEntropy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Euclidean,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(alias = "avg_pool")]
    AvgPool,
    Attention,
}

impl From<ModeArg> for FusionMode {
    fn from(m: ModeArg) -> FusionMode {
        match m {
            ModeArg::AvgPool => FusionMode::AvgPool,
            ModeArg::Attention => FusionMode::Attention,
        }
    }
}

#[derive(Args)]
struct KnnArgs {
    /// Candidate pool corpus.
    #[arg(long)]
    pool: PathBuf,
    /// Labeled corpus that seed ids resolve against.
    #[arg(long)]
    labeled: Option<PathBuf>,
    /// Single query id (looked up in --labeled, or in --pool without it).
    #[arg(long, conflicts_with = "seeds_file")]
    query_id: Option<String>,
    /// Seed set JSON produced by `lsb seeds`.
    #[arg(long)]
    seeds_file: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::Cosine)]
    metric: MetricArg,
    /// Keep one entry per (seed, candidate) attribution instead of the best.
    #[arg(long)]
    no_dedupe: bool,
    /// Rank labeled ids too instead of excluding them from the pool.
    #[arg(long)]
    include_labeled: bool,
    /// Write the expansion as a selection batch file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus file and report dims and violations.
    Validate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
        format: FormatArg,
    },
    /// Score every record under one acquisition strategy.
    Score {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        /// Select the top-scoring records and write them as a batch file.
        #[arg(long, requires = "out")]
        budget: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mine seed badcases from a labeled corpus.
    Seeds {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, conflicts_with = "threshold")]
        quantile: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact k-NN retrieval / LSB expansion against a pool.
    Knn(KnnArgs),
    /// Train the lookalike mismatch model on a labeled corpus.
    LookalikeTrain {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        l2: f64,
        #[arg(long, default_value_t = 2000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-8)]
        tolerance: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        class_weighting: bool,
        /// Keep only this fraction of match examples (seeded subsample).
        #[arg(long)]
        negative_keep: Option<f64>,
    },
    /// Filter a selection batch by lookalike threshold.
    LtFilter {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        batch: PathBuf,
        /// Corpus resolving batch ids to embeddings.
        #[arg(long)]
        source: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Binary metrics over a scored file ({"id","score","label"} per line).
    Evaluate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        f1_threshold: f64,
        /// Precision targets for the R@P columns.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_PRECISION_TARGETS)]
        targets: Vec<f64>,
        /// Also write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a synthetic corpus into a state directory.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Corpus config JSON (seed flag overrides its seed).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one selection round against a state directory.
    Round {
        #[arg(long)]
        state_dir: PathBuf,
        /// Round config JSON; flags override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Plan and emit the batch files, then halt without annotating.
        #[arg(long)]
        manual: bool,
        #[arg(long)]
        lookalike_threshold: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a corpus and run the full loop for T rounds.
    Loop {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        rounds: u32,
        /// Loop config JSON with "corpus" and "round" sections.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train fusion params on the needle-in-audio task.
    FuseTrain {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        seed: u64,
        /// Needle task config JSON (seed flag overrides its seed).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Evaluate saved fusion params on a corpus with audio and labels.
    FuseEval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
    },
    /// Finite-difference check of the fusion gradients.
    GradCheck {
        #[arg(long, value_enum, default_value_t = ModeArg::Attention)]
        mode: ModeArg,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 8)]
        d_audio: usize,
        #[arg(long, default_value_t = 6)]
        d_cls: usize,
        #[arg(long, default_value_t = 5)]
        rows: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap prints help/version on stdout with success; usage errors
            // exit 1 per the interface contract.
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("lsb: could not configure {threads} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("lsb: {err:#}");
            ExitCode::from(2)
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoredLine {
    id: String,
    score: f64,
    label: u8,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct LoopConfig {
    corpus: SyntheticCorpusConfig,
    round: RoundConfig,
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn state_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        dir.join("labeled.jsonl"),
        dir.join("pool.jsonl"),
        dir.join("heldout.jsonl"),
        dir.join("oracle.json"),
        dir.join("state.json"),
    )
}

fn load_state(dir: &Path) -> Result<PipelineState> {
    let (labeled, pool, heldout, oracle, state) = state_paths(dir);
    let labeled = datastore::load_samples(&labeled, Format::Jsonl)?;
    let pool = datastore::load_samples(&pool, Format::Jsonl)?;
    let heldout = datastore::load_samples(&heldout, Format::Jsonl)?;
    let oracle = serde_json::from_str(&std::fs::read_to_string(oracle)?)?;
    let mut s = PipelineState::new(labeled, pool, oracle, heldout)?;
    if let Ok(text) = std::fs::read_to_string(state) {
        let v: serde_json::Value = serde_json::from_str(&text)?;
        s.round = v["round"].as_u64().unwrap_or(0) as u32;
    }
    Ok(s)
}

fn save_state(dir: &Path, state: &PipelineState) -> Result<()> {
    let (labeled, pool, heldout, oracle, state_file) = state_paths(dir);
    datastore::write_samples(&state.labeled, &labeled, Format::Jsonl)?;
    datastore::write_samples(&state.pool, &pool, Format::Jsonl)?;
    datastore::write_samples(&state.heldout, &heldout, Format::Jsonl)?;
    std::fs::write(oracle, serde_json::to_string_pretty(&state.oracle)?)?;
    std::fs::write(state_file, serde_json::json!({ "round": state.round }).to_string())?;
    Ok(())
}

fn load_fusion_samples(path: &Path) -> Result<Vec<FusionSample>> {
    let set = datastore::load_samples(path, Format::Jsonl)?;
    let mut samples = Vec::with_capacity(set.len());
    for record in set.records() {
        let audio = record
            .audio
            .clone()
            .with_context(|| format!("record {} has no audio rows", record.id))?;
        let label = record
            .label
            .with_context(|| format!("record {} has no label", record.id))?;
        samples.push(FusionSample {
            id: record.id.clone(),
            audio,
            embedding: record.embedding.clone(),
            label,
        });
    }
    Ok(samples)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { input, format } => {
            let set = datastore::load_samples(&input, format.into())?;
            let dims = set.dims();
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({
                        "records": set.len(),
                        "embedding_dim": dims.embedding,
                        "classes": dims.classes,
                        "audio_dim": dims.audio,
                        "labeled": set.records().iter().filter(|r| r.label.is_some()).count(),
                    })
                );
            } else {
                println!(
                    "{}: {} records, d={}, C={}, audio={:?}",
                    input.display(),
                    set.len(),
                    dims.embedding,
                    dims.classes,
                    dims.audio
                );
            }
        }
        Command::Score { input, strategy, budget, out } => {
            let set = datastore::load_samples(&input, Format::Jsonl)?;
            let strategy: AcquisitionStrategy = strategy.into();
            if let (Some(budget), Some(out)) = (budget, &out) {
                let batch = select_statistical(&set, strategy, budget)?;
                datastore::write_selection(&batch, out)?;
                eprintln!("wrote {} selected ids to {}", batch.len(), out.display());
            }
            for record in set.records() {
                let score = acquisition_score(&record.probs, strategy)?;
                if cli.json {
                    println!("{}", serde_json::json!({ "id": record.id, "score": score }));
                } else {
                    println!("{}\t{score:.6}", record.id);
                }
            }
        }
        Command::Seeds { input, quantile, threshold, out } => {
            let set = datastore::load_samples(&input, Format::Jsonl)?;
            let rule = match (quantile, threshold) {
                (Some(q), None) => SeedRule::Quantile(q),
                (None, Some(t)) => SeedRule::Threshold(t),
                (None, None) => SeedRule::default(),
                (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
            };
            let seeds = select_seeds(&set, rule)?;
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&seeds)?)?;
            }
            if cli.json {
                println!("{}", serde_json::to_string(&seeds)?);
            } else {
                println!("{} seeds under {rule:?}", seeds.len());
                for (id, loss) in &seeds.entries {
                    println!("{id}\t{loss:.6}");
                }
            }
        }
        Command::Knn(args) => {
            let pool = datastore::load_samples(&args.pool, Format::Jsonl)?;
            let metric = match args.metric {
                MetricArg::Cosine => Metric::Cosine,
                MetricArg::Euclidean => Metric::Euclidean,
            };
            let cfg = KnnConfig {
                k: args.k,
                metric,
                dedupe: !args.no_dedupe,
                exclude_labeled: !args.include_labeled,
            };
            let batch: SelectionBatch = match (&args.query_id, &args.seeds_file) {
                (Some(id), None) => {
                    let labeled = match &args.labeled {
                        Some(path) => datastore::load_samples(path, Format::Jsonl)?,
                        None => pool.clone(),
                    };
                    let query = labeled
                        .get(id)
                        .with_context(|| format!("query id {id:?} not found"))?;
                    let list = top_k(query, &pool, &cfg)?;
                    if cli.json {
                        println!("{}", serde_json::to_string(&list)?);
                    } else {
                        for n in &list.neighbors {
                            println!("{}\t{:.6}", n.id, n.distance);
                        }
                    }
                    return Ok(());
                }
                (None, Some(seeds_file)) => {
                    let labeled_path = args
                        .labeled
                        .as_ref()
                        .context("--seeds-file requires --labeled")?;
                    let labeled = datastore::load_samples(labeled_path, Format::Jsonl)?;
                    let seeds = serde_json::from_str(&std::fs::read_to_string(seeds_file)?)?;
                    lsb_expand(&seeds, &labeled, &pool, &cfg)?
                }
                _ => bail!("exactly one of --query-id or --seeds-file is required"),
            };
            if let Some(out) = &args.out {
                datastore::write_selection(&batch, out)?;
                eprintln!("wrote {} candidates to {}", batch.len(), out.display());
            }
            if cli.json {
                println!("{}", serde_json::to_string(&batch)?);
            } else {
                for entry in &batch.entries {
                    println!(
                        "{}\t{:.6}\t{}",
                        entry.id,
                        entry.score,
                        entry.seed_id.as_deref().unwrap_or("-")
                    );
                }
            }
        }
        Command::LookalikeTrain {
            labeled,
            out,
            l2,
            max_iters,
            tolerance,
            seed,
            class_weighting,
            negative_keep,
        } => {
            let set = datastore::load_samples(&labeled, Format::Jsonl)?;
            let examples = build_mismatch_dataset(&set)?;
            let cfg = LookalikeTrainConfig {
                l2,
                max_iters,
                tolerance,
                seed,
                class_weighting,
                negative_keep,
                ..Default::default()
            };
            let model = train_lookalike(&examples, &cfg)?;
            model.save(&out)?;
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({
                        "iterations": model.meta.iterations,
                        "final_loss": model.meta.final_loss,
                        "positives": model.meta.positives,
                        "negatives": model.meta.negatives,
                        "model": out.display().to_string(),
                    })
                );
            } else {
                println!(
                    "trained in {} iterations, final loss {:.6} ({} mismatch / {} match)",
                    model.meta.iterations,
                    model.meta.final_loss,
                    model.meta.positives,
                    model.meta.negatives
                );
            }
        }
        Command::LtFilter { model, batch, source, threshold, out } => {
            let model = LookalikeModel::load(&model)?;
            let batch = datastore::load_selection(&batch, 0)?;
            let source = datastore::load_samples(&source, Format::Jsonl)?;
            let filtered = lt_filter(&model, &batch, &source, threshold)?;
            datastore::write_selection(&filtered, &out)?;
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({ "kept": filtered.len(), "of": batch.len() })
                );
            } else {
                println!("kept {} of {} at threshold {threshold}", filtered.len(), batch.len());
            }
        }
        Command::Evaluate { input, f1_threshold, targets, report } => {
            let text = std::fs::read_to_string(&input)?;
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: ScoredLine = serde_json::from_str(line)
                    .with_context(|| format!("line {} of {}", n + 1, input.display()))?;
                scores.push(parsed.score);
                labels.push(parsed.label != 0);
            }
            let eval = evaluate_binary(&scores, &labels, f1_threshold, &targets)?;
            if let Some(report_path) = report {
                std::fs::write(&report_path, eval.to_json())?;
            }
            if cli.json {
                println!("{}", serde_json::to_string(&eval)?);
            } else {
                print!("{}", eval.render_table());
            }
        }
        Command::Synth { out_dir, seed, config } => {
            let mut cfg: SyntheticCorpusConfig = read_config(config.as_deref())?;
            cfg.seed = seed;
            let corpus = generate_synthetic_corpus(&cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            let state = PipelineState::from_corpus(corpus)?;
            save_state(&out_dir, &state)?;
            std::fs::write(
                out_dir.join("corpus_config.json"),
                serde_json::to_string_pretty(&cfg)?,
            )?;
            eprintln!(
                "synthesized {} labeled / {} pool / {} heldout into {}",
                state.labeled.len(),
                state.pool.len(),
                state.heldout.len(),
                out_dir.display()
            );
        }
        Command::Round { state_dir, config, manual, lookalike_threshold, k, seed } => {
            let mut round_cfg: RoundConfig = read_config(config.as_deref())?;
            if let Some(lt) = lookalike_threshold {
                round_cfg.lookalike_threshold = lt;
            }
            if let Some(k) = k {
                round_cfg.knn.k = k;
            }
            if let Some(seed) = seed {
                round_cfg.seed = seed;
            }
            let state = load_state(&state_dir)?;
            if manual {
                let plan = plan_round(&state, &round_cfg)?;
                for batch in &plan.batches {
                    let name = format!("pending_round{:03}_{}.jsonl", state.round, batch.strategy);
                    datastore::write_selection(batch, &state_dir.join(&name))?;
                    eprintln!("wrote {name} ({} ids)", batch.len());
                }
                for warning in &plan.warnings {
                    eprintln!("warning: {warning}");
                }
                println!(
                    "planned round {} with {} ids; annotate the pending files and re-ingest",
                    state.round,
                    plan.batches.iter().map(|b| b.len()).sum::<usize>()
                );
            } else {
                let next = lsb_core::pipeline::run_round(&state, &round_cfg)?;
                let record = next.history.last().expect("round ran");
                for batch in &record.batches {
                    let name = format!("round{:03}_{}.jsonl", record.round, batch.strategy);
                    datastore::write_selection(batch, &state_dir.join(name))?;
                }
                std::fs::write(
                    state_dir.join(format!("round{:03}_eval.json", record.round)),
                    record.report.to_json(),
                )?;
                save_state(&state_dir, &next)?;
                if cli.json {
                    println!(
                        "{}",
                        serde_json::json!({
                            "round": record.round,
                            "annotated": record.annotated.len(),
                            "auc": record.report.auc,
                            "warnings": record.warnings,
                        })
                    );
                } else {
                    println!(
                        "round {}: annotated {}, held-out AUC {:.4}",
                        record.round,
                        record.annotated.len(),
                        record.report.auc
                    );
                    for warning in &record.warnings {
                        eprintln!("warning: {warning}");
                    }
                }
            }
        }
        Command::Loop { out_dir, seed, rounds, config } => {
            let mut cfg: LoopConfig = read_config(config.as_deref())?;
            cfg.corpus.seed = seed;
            cfg.round.seed = seed;
            let corpus = generate_synthetic_corpus(&cfg.corpus)?;
            let state = PipelineState::from_corpus(corpus)?;
            let out = run_loop(state, &cfg.round, rounds, Some(&out_dir))?;
            save_state(&out_dir, &out)?;
            if cli.json {
                let rows: Vec<_> = out
                    .history
                    .iter()
                    .map(|r| {
                        serde_json::json!({
                            "round": r.round,
                            "annotated": r.annotated.len(),
                            "auc": r.report.auc,
                            "accuracy": r.report.accuracy,
                        })
                    })
                    .collect();
                println!("{}", serde_json::to_string(&rows)?);
            } else {
                for r in &out.history {
                    println!(
                        "round {}: annotated {:4} | held-out AUC {:.4} acc {:.4}",
                        r.round,
                        r.annotated.len(),
                        r.report.auc,
                        r.report.accuracy.unwrap_or(f64::NAN)
                    );
                }
            }
        }
        Command::FuseTrain { mode, seed, config, out, epochs, learning_rate, batch_size } => {
            let mut task: NeedleTaskConfig = read_config(config.as_deref())?;
            task.seed = seed;
            let (train, test) = generate_needle_task(&task);
            let cfg = fusion::ToyTrainConfig { learning_rate, epochs, batch_size, seed };
            let init = FusionParams::seeded(task.d_cls, task.audio.d_audio, 2, seed);
            let outcome = fusion::train_toy(&train, &test, init, &cfg, mode.into())?;
            if let Some(out) = &out {
                std::fs::write(out, outcome.params.to_json())?;
                eprintln!("wrote params to {}", out.display());
            }
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({
                        "test_accuracy": outcome.test_accuracy,
                        "auc": outcome.report.auc,
                        "final_train_loss": outcome.epoch_losses.last(),
                    })
                );
            } else {
                println!("test accuracy {:.4}", outcome.test_accuracy);
                print!("{}", outcome.report.render_table());
            }
        }
        Command::FuseEval { params, input, mode } => {
            let params = FusionParams::from_json(&std::fs::read_to_string(&params)?)?;
            let samples = load_fusion_samples(&input)?;
            let (report, accuracy) = fusion::evaluate_fusion(&params, &samples, mode.into())?;
            if cli.json {
                println!("{}", serde_json::to_string(&report)?);
            } else {
                println!("accuracy {accuracy:.4}");
                print!("{}", report.render_table());
            }
        }
        Command::GradCheck { mode, seed, step, d_audio, d_cls, rows, batch, classes } => {
            let params = FusionParams::seeded(d_cls, d_audio, classes, seed);
            let samples = lsb_core::synth::random_fusion_batch(
                seed ^ 0x9e37,
                batch,
                rows,
                d_audio,
                d_cls,
                classes,
            );
            let report = fusion::grad_check(&params, &samples, mode.into(), step)?;
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({
                        "max_rel_error": report.max_rel_error,
                        "worst_coordinate": report.worst_coordinate,
                        "checked": report.checked,
                        "total_params": report.total_params,
                    })
                );
            } else {
                println!(
                    "max relative error {:.3e} at {} ({} of {} params checked)",
                    report.max_rel_error, report.worst_coordinate, report.checked, report.total_params
                );
            }
        }
    }
    Ok(())
}
