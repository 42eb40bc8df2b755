//! `retrosql`: ingest data, draw subsets, pre-train, train, evaluate and
//! aggregate runs.
//!
//! Errors end the process with a class-specific exit code and one line on
//! stderr: `error class=<name> code=<n>: <message>`.

mod report;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use retrosql::corpus::{
    load_paraphrase_pairs, load_wikisql, pattern_histogram, sample_hybrid, sample_random, sample_uniform, tokenize,
    top_patterns, write_paraphrase_pairs, Dataset,
};
use retrosql::encoder::{pretrain_paraphrase, Vocab};
use retrosql::evaluator::evaluate;
use retrosql::model::Model;
use retrosql::retriever::build_index;
use retrosql::synthetic::{generate, paraphrase_pairs, synthetic_patterns, SyntheticConfig};
use retrosql::trainer::{dataset_words, train};

use report::{aggregate, classify, CliError, RunConfig, REPORT_FILE};

#[derive(Parser, Debug)]
#[command(version, about = "Retrieval-based text-to-SQL experiments")]
struct Cli {
    /// TOML file with [model], [train] and [pretrain] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for encoding and evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert WikiSQL question and table files into a dataset artifact.
    Ingest {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        tables: PathBuf,
        /// Dataset file; the ingest report goes next to it as `<out>.report.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a random, uniform or hybrid subset of a dataset.
    Subset {
        dataset: PathBuf,
        #[arg(long, value_enum)]
        strategy: Strategy,
        /// Subset size (random).
        #[arg(long)]
        n: Option<usize>,
        /// Examples per pattern (uniform).
        #[arg(long)]
        per_pattern: Option<usize>,
        /// Use the this many most frequent patterns (uniform, hybrid).
        #[arg(long, default_value_t = 85)]
        top: usize,
        /// Sampling ratio, as a number or a fraction like `1/128` (hybrid).
        #[arg(long, value_parser = parse_ratio)]
        ratio: Option<f64>,
        /// Minimum examples per pattern (hybrid).
        #[arg(long, default_value_t = 7)]
        floor: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus (train/dev/test datasets and paraphrase pairs).
    Synth {
        #[arg(long, default_value_t = 600)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_dev: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        #[arg(long, default_value_t = 2000)]
        n_pairs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the encoder on paraphrase pairs (`first<TAB>second<TAB>0|1`).
    Pretrain {
        pairs: PathBuf,
        /// Datasets whose words should also get vocabulary entries.
        #[arg(long)]
        vocab_from: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset, selecting the checkpoint by dev LF.
    Train {
        train: PathBuf,
        dev: PathBuf,
        /// Start from this checkpoint (e.g. a pre-trained encoder).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with the given retrieval set on a test set.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        retrieval: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Output directory (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean ± standard deviation of the evaluation reports of several runs.
    Report { runs: Vec<PathBuf> },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    Random,
    Uniform,
    Hybrid,
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
            a / b
        }
        None => s.parse().map_err(|e| format!("{e}"))?,
    };
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("ratio must be positive, got {s}"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn cmd_ingest(questions: &Path, tables: &Path, out: &Path) -> Result<()> {
    let (data, report) = load_wikisql(questions, tables)?;
    data.save(out)?;
    let mut report_path = out.as_os_str().to_owned();
    report_path.push(".report.json");
    write_json(Path::new(&report_path), &report)?;
    println!(
        "{} examples from {} records ({} dropped for repeated where-columns, {} with unaligned values, {} tables)",
        report.examples, report.records, report.dropped_duplicate_columns, report.unaligned_examples, report.tables
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_subset(
    dataset: &Path,
    strategy: Strategy,
    n: Option<usize>,
    per_pattern: Option<usize>,
    top: usize,
    ratio: Option<f64>,
    floor: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let data = load_dataset(dataset)?;
    let missing = |flag: &str| CliError::Usage(format!("--strategy {strategy:?} needs --{flag}").to_lowercase());
    let top_ids = top_patterns(&pattern_histogram(&data), top);
    let subset = match strategy {
        Strategy::Random => sample_random(&data, n.ok_or_else(|| missing("n"))?, seed)?,
        Strategy::Uniform => sample_uniform(&data, &top_ids, per_pattern.ok_or_else(|| missing("per-pattern"))?, seed)?,
        Strategy::Hybrid => sample_hybrid(&data, &top_ids, ratio.ok_or_else(|| missing("ratio"))?, floor, seed)?,
    };
    subset.save(out)?;
    let hist = pattern_histogram(&subset);
    println!(
        "{} examples over {} patterns written to {}",
        subset.len(),
        hist.iter().filter(|&&c| c > 0).count(),
        out.display()
    );
    Ok(())
}

fn cmd_synth(n_train: usize, n_dev: usize, n_test: usize, n_pairs: usize, seed: u64, out: &Path) -> Result<()> {
    create_dir(out)?;
    let corpus = generate(&SyntheticConfig {
        n_train,
        n_dev,
        n_test,
        seed,
        ..SyntheticConfig::default()
    })?;
    corpus.train.save(&out.join("train.json"))?;
    corpus.dev.save(&out.join("dev.json"))?;
    corpus.test.save(&out.join("test.json"))?;
    write_paraphrase_pairs(&out.join("pairs.tsv"), &paraphrase_pairs(n_pairs, &synthetic_patterns(), seed)?)?;
    println!("synthetic corpus written to {}", out.display());
    Ok(())
}

fn cmd_pretrain(config: &RunConfig, pairs_path: &Path, vocab_from: &[PathBuf], out: &Path) -> Result<()> {
    let pairs = load_paraphrase_pairs(pairs_path)?;
    let mut words: Vec<String> = pairs.iter().flat_map(|p| tokenize(&p.first).into_iter().chain(tokenize(&p.second))).collect();
    for path in vocab_from {
        words.extend(dataset_words(&load_dataset(path)?));
    }
    let vocab = Vocab::build(words.iter().map(String::as_str));
    let mut model = Model::new(config.model, vocab)?;
    create_dir(out)?;
    config.echo(out)?;
    let report = pretrain_paraphrase(&pairs, &model.config, &model.vocab, &mut model.encoder, &config.pretrain)?;
    model.save(&out.join("pretrained.ckpt"))?;
    write_json(&out.join("pretrain_report.json"), &report)?;
    println!(
        "held-out pair accuracy {:.4} after {} epochs; checkpoint {}",
        report.holdout_accuracy,
        report.epochs,
        out.join("pretrained.ckpt").display()
    );
    Ok(())
}

fn cmd_train(config: &RunConfig, train_path: &Path, dev_path: &Path, init: Option<&Path>, out: &Path) -> Result<()> {
    let train_set = load_dataset(train_path)?;
    let dev = load_dataset(dev_path)?;
    let model = match init {
        Some(p) => Model::load(p, Some(&config.model)).with_context(|| format!("loading {}", p.display()))?,
        None => Model::new(config.model, Vocab::default())?,
    };
    create_dir(out)?;
    config.echo(out)?;
    let state = train(model, &train_set, &dev, &config.train, Some(out))?;
    if let Some(report) = &state.best_report {
        write_json(&out.join("dev_report.json"), report)?;
    }
    let run = serde_json::json!({
        "format": "retrosql-run",
        "version": 1,
        "train": train_path,
        "dev": dev_path,
        "init": init,
        "epochs": state.epoch,
        "best_epoch": state.best_epoch,
        "best_dev_lf": state.best_dev_lf,
        "retrieval_trained": state.retrieval_trained,
        "checkpoint": state.best_checkpoint_path,
    });
    write_json(&out.join("run.json"), &run)?;
    println!(
        "best dev LF {:.4} at epoch {} of {}; run directory {}",
        state.best_dev_lf,
        state.best_epoch,
        state.epoch,
        out.display()
    );
    Ok(())
}

fn cmd_eval(config: &RunConfig, checkpoint: &Path, retrieval: &Path, test: &Path, out: Option<&Path>) -> Result<()> {
    let model = Model::load(checkpoint, None).with_context(|| format!("loading {}", checkpoint.display()))?;
    let retrieval_set = load_dataset(retrieval)?;
    let test_set = load_dataset(test)?;
    let index = build_index(&retrieval_set, &model.encoder(), &retrieval.display().to_string())?;
    let (report, records) = evaluate(&model, &index, &test_set, config.train.neighbors)?;

    let out = match out {
        Some(o) => o.to_path_buf(),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    create_dir(&out)?;
    if !out.join(report::CONFIG_FILE).exists() {
        config.echo(&out)?;
    }
    write_json(&out.join(REPORT_FILE), &report)?;
    fs::write(out.join("metrics.jsonl"), report.to_jsonl(config.train.seed))?;
    let lines: Vec<String> = records.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
    fs::write(out.join("records.jsonl"), lines.join("\n") + "\n")?;
    print!("{}", report.to_table());
    info!("encoder checksum {}", model.encoder_checksum());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    config.validate()?;
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build_global()
        .context("starting worker threads")?;
    let seed = config.train.seed;
    match &cli.command {
        Command::Ingest { questions, tables, out } => cmd_ingest(questions, tables, out),
        Command::Subset {
            dataset,
            strategy,
            n,
            per_pattern,
            top,
            ratio,
            floor,
            out,
        } => cmd_subset(dataset, *strategy, *n, *per_pattern, *top, *ratio, *floor, seed, out),
        Command::Synth {
            n_train,
            n_dev,
            n_test,
            n_pairs,
            out,
        } => cmd_synth(*n_train, *n_dev, *n_test, *n_pairs, seed, out),
        Command::Pretrain { pairs, vocab_from, out } => cmd_pretrain(&config, pairs, vocab_from, out),
        Command::Train { train, dev, init, out } => cmd_train(&config, train, dev, init.as_deref(), out),
        Command::Eval {
            checkpoint,
            retrieval,
            test,
            out,
        } => cmd_eval(&config, checkpoint, retrieval, test, out.as_deref()),
        Command::Report { runs } => {
            let agg = aggregate(runs)?;
            print!("{agg}");
            println!("({} runs)", agg.runs);
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    if let Err(err) = run(cli) {
        let (code, class) = classify(&err);
        let msg = format!("{err:#}").replace('\n', " ");
        eprintln!("error class={class} code={code}: {msg}");
        std::process::exit(code);
    }
}
