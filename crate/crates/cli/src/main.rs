//! `bico`: dataset generation, training, evaluation and experiments.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bico_core::config::RunConfig;
use bico_core::data::files::{read_manifest, read_tests, read_vocab, verify_files, verify_regeneration, write_dataset, MANIFEST_FILE};
use bico_core::data::{generate_bundle, scan_reverse_leaks, TestItem, PAD};
use bico_core::experiment::{init_model, run_points, run_reversal_experiment, sweep_points, PairedReport};
use bico_core::model::{load_checkpoint, save_checkpoint};
use bico_core::numeric::{Precision, Real};
use bico_core::train::{evaluate_em, steps_per_epoch, train, EvalReport};
use bico_core::Error;
use clap::{Args, Parser, Subcommand};

use output::{write_json, write_text, MetricsWriter};

#[derive(Parser)]
#[command(name = "bico", version, about = "Micro-transformer lab for reverse-direction fact recall")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted `key=value` assignment applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Floating-point width for training and evaluation.
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
    /// Models trained concurrently by `experiment`.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset files and manifest under `<output_dir>/data`.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Report the reverse-ordering scan over the training split.
        #[arg(long)]
        scan_leaks: bool,
    },
    /// Check a dataset directory against its manifest and regenerate it.
    VerifyData {
        /// Directory written by `gen-data`.
        dir: PathBuf,
    },
    /// Train one model; writes a checkpoint, metrics and evaluation.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the paraphrase and reverse test splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Read test items from a dataset directory instead of regenerating.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Paired NTP/BICO comparison, or a sweep when `[sweep]` lists are set.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let as_config_error = |e: Error| match e {
        Error::Io { path, source } => Error::InvalidConfig(format!("{}: {source}", path.display())),
        other => other,
    };
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path, &common.overrides).map_err(as_config_error)?,
        None => RunConfig::from_toml_with("", &common.overrides)?,
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(p) = &common.precision {
        config.precision = Precision::from_bits(p.parse()?).expect("clap restricts the values");
    }
    Ok(config)
}

fn prepare_output(config: &RunConfig) -> Result<&Path> {
    let out = config.output_dir.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("config.toml"), &config.to_toml())?;
    Ok(out)
}

fn cmd_gen_data(config: &RunConfig, scan_leaks: bool) -> Result<()> {
    let out = prepare_output(config)?;
    let bundle = generate_bundle(&config.data, config.seed)?;
    let dir = out.join("data");
    let manifest = write_dataset(&bundle, &config.data, config.seed, &dir)?;
    println!(
        "task {}: {} facts, {} training sequences, {} paraphrase and {} reverse test items, vocabulary {}",
        manifest.task,
        manifest.counts.facts,
        manifest.counts.train,
        manifest.counts.paraphrase_test,
        manifest.counts.reverse_test,
        manifest.counts.vocab
    );
    println!("wrote {}", dir.display());
    if scan_leaks {
        let leaks = scan_reverse_leaks(&bundle.train, &bundle.facts, bundle.task);
        println!("reverse leaks: {}", leaks.len());
        if let Some(l) = leaks.first() {
            return Err(Error::ReverseLeak(format!("fact {} in training sequence {}", l.fact, l.sequence)).into());
        }
    }
    Ok(())
}

fn cmd_verify_data(dir: &Path) -> Result<()> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let changed = verify_files(dir)?;
    let drifted = verify_regeneration(&manifest)?;
    if !changed.is_empty() {
        return Err(Error::Dataset(format!("files differ from manifest hashes: {}", changed.join(", "))).into());
    }
    if !drifted.is_empty() {
        return Err(Error::Dataset(format!("regeneration differs for: {}", drifted.join(", "))).into());
    }
    println!("{}: {} files match the manifest and regenerate identically", dir.display(), manifest.files.len());
    Ok(())
}

fn print_eval(name: &str, r: &EvalReport) {
    println!(
        "{name:<10} exact_match {:.3}  mean_likelihood {:.4}  ({} items)",
        r.exact_match_rate,
        r.mean_likelihood,
        r.items.len()
    );
}

fn cmd_train<F: Real>(config: &RunConfig) -> Result<()> {
    let out = prepare_output(config)?;
    let bundle = generate_bundle(&config.data, config.seed)?;
    let mut model = init_model::<F>(config, &bundle)?;
    let train_config = config.train_config();
    let per_epoch = steps_per_epoch(bundle.train.len(), train_config.batch_size);
    let mut metrics = MetricsWriter::create(&out.join("metrics.jsonl"))?;
    let ckpt = out.join("model.ckpt");
    let start = Instant::now();
    let mut epoch_loss = 0.0;

    let result = train(&mut model, &bundle.train, &train_config, PAD, |r| {
        metrics.record(r);
        epoch_loss += r.loss;
        if (r.step + 1) % per_epoch == 0 {
            eprintln!(
                "epoch {:>3}/{}  mean loss {:.4}  ({:.0}s)",
                r.epoch + 1,
                train_config.epochs,
                epoch_loss / per_epoch as f64,
                start.elapsed().as_secs_f64()
            );
            epoch_loss = 0.0;
        }
    });
    if let Err(e) = result {
        metrics.finish()?;
        if matches!(e, Error::Divergence { .. }) {
            save_checkpoint(&model, &ckpt)?;
            eprintln!("last good parameters saved to {}", ckpt.display());
        }
        return Err(e.into());
    }

    let checksum = save_checkpoint(&model, &ckpt)?;
    let paraphrase = evaluate_em(&model, &bundle.paraphrase_test)?;
    let reverse = evaluate_em(&model, &bundle.reverse_test)?;
    metrics.eval("paraphrase", &paraphrase);
    metrics.eval("reverse", &reverse);
    metrics.finish()?;
    write_json(
        &out.join("evaluation.json"),
        &serde_json::json!({ "paraphrase": paraphrase, "reverse": reverse }),
    )?;
    println!("checkpoint {} sha256 {checksum}", ckpt.display());
    print_eval("paraphrase", &paraphrase);
    print_eval("reverse", &reverse);
    Ok(())
}

fn test_splits(config: &RunConfig, data: Option<&Path>) -> Result<(usize, Vec<TestItem>, Vec<TestItem>)> {
    match data {
        Some(dir) => {
            let changed = verify_files(dir)?;
            if !changed.is_empty() {
                return Err(Error::Dataset(format!("files differ from manifest hashes: {}", changed.join(", "))).into());
            }
            let vocab = read_vocab(&dir.join("vocab.txt"))?;
            Ok((
                vocab.len(),
                read_tests(&dir.join("paraphrase_test.tsv"), &vocab)?,
                read_tests(&dir.join("reverse_test.tsv"), &vocab)?,
            ))
        }
        None => {
            let b = generate_bundle(&config.data, config.seed)?;
            Ok((b.vocab.len(), b.paraphrase_test, b.reverse_test))
        }
    }
}

fn cmd_evaluate<F: Real>(config: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let model = load_checkpoint::<F>(checkpoint)?;
    let (vocab, para, rev) = test_splits(config, data)?;
    if model.config().vocab_size != vocab {
        bail!(Error::Dataset(format!(
            "checkpoint vocabulary {} does not match dataset vocabulary {vocab}",
            model.config().vocab_size
        )));
    }
    let out = prepare_output(config)?;
    let paraphrase = evaluate_em(&model, &para)?;
    let reverse = evaluate_em(&model, &rev)?;
    write_json(
        &out.join("evaluation.json"),
        &serde_json::json!({ "paraphrase": paraphrase, "reverse": reverse }),
    )?;
    print_eval("paraphrase", &paraphrase);
    print_eval("reverse", &reverse);
    Ok(())
}

fn cmd_experiment<F: Real>(config: &RunConfig, jobs: usize) -> Result<()> {
    let out = prepare_output(config)?;
    if config.sweep.is_empty() {
        let (outcome, report) = run_reversal_experiment::<F>(config, jobs)?;
        for trained in [&outcome.baseline, &outcome.points[0]] {
            let label = &trained.report.label;
            save_checkpoint(&trained.model, &out.join(format!("{label}.ckpt")))?;
            MetricsWriter::write_all(&out.join(format!("{label}.metrics.jsonl")), &trained.report)?;
        }
        write_json(&out.join("report.json"), &report)?;
        write_text(&out.join("report.txt"), &report.table())?;
        print!("{}", report.table());
        return Ok(());
    }

    let points = sweep_points(config);
    eprintln!("sweep: {} points plus the NTP baseline", points.len());
    let outcome = run_points::<F>(config, &points, jobs)?;
    let sweep = outcome.report(config.seed);
    save_checkpoint(&outcome.baseline.model, &out.join("baseline.ckpt"))?;
    MetricsWriter::write_all(&out.join("baseline.metrics.jsonl"), &sweep.baseline)?;
    for (i, (trained, paired)) in outcome.points.iter().zip(sweep.paired()).enumerate() {
        let dir = out.join("points").join(format!("{i:02}"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        save_checkpoint(&trained.model, &dir.join("model.ckpt"))?;
        MetricsWriter::write_all(&dir.join("metrics.jsonl"), &trained.report)?;
        write_json(&dir.join("report.json"), &paired)?;
        write_text(&dir.join("report.txt"), &PairedReport::table(&paired))?;
    }
    write_json(&out.join("summary.json"), &sweep)?;
    write_text(&out.join("summary.txt"), &sweep.table())?;
    print!("{}", sweep.table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::VerifyData { dir } => cmd_verify_data(&dir),
        Command::GenData { common, scan_leaks } => cmd_gen_data(&load_config(&common)?, scan_leaks),
        Command::Train { common } => {
            let config = load_config(&common)?;
            match config.precision {
                Precision::F32 => cmd_train::<f32>(&config),
                Precision::F64 => cmd_train::<f64>(&config),
            }
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
        } => {
            let config = load_config(&common)?;
            match config.precision {
                Precision::F32 => cmd_evaluate::<f32>(&config, &checkpoint, data.as_deref()),
                Precision::F64 => cmd_evaluate::<f64>(&config, &checkpoint, data.as_deref()),
            }
        }
        Command::Experiment { common } => {
            let config = load_config(&common)?;
            match config.precision {
                Precision::F32 => cmd_experiment::<f32>(&config, common.jobs),
                Precision::F64 => cmd_experiment::<f64>(&config, common.jobs),
            }
        }
    }
}

/// 2 configuration, 3 data, 4 divergence, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let core = err.chain().find_map(|c| c.downcast_ref::<Error>());
    match core {
        Some(Error::InvalidConfig(_)) => 2,
        Some(Error::Dataset(_) | Error::PoolExhausted(_) | Error::ReverseLeak(_) | Error::TokenOutOfRange { .. }) => 3,
        Some(Error::Divergence { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
