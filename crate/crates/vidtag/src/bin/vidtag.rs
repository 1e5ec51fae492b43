use std::fs::File;
use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidtag::checkpoint::Checkpoint;
use vidtag::config::{CellArg, ModelArg, ResolvedConfig, SchemaArgs, TrainConfig, WordLossArg};
use vidtag::dataset::{write_examples, Dataset};
use vidtag::example::{parse_example, FeatureSchema};
use vidtag::synthetic::{generate_range, SyntheticSpec};
use vidtag::tfrecord::read_tfrecord;
use vidtag::train::{train_to_dir, Trainer};
use vidtag_core::gating::{default_betas, default_probabilities, ordering_report, report_csv, McSettings};
use vidtag_core::gradcheck::check_model;
use vidtag_core::layers::Parameters;
use vidtag_core::model::{Batch, Model};

/// Multi-label video tagging with a label-sentence LSTM translator.
///
/// Every option can also be set through the environment variable named in
/// its help text (prefix `VIDTAG_`).
#[derive(Parser)]
#[command(name = "vidtag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write config.json, metrics.csv and checkpoint.bin.
    Train {
        #[command(flatten)]
        config: TrainConfig,
        #[command(flatten)]
        schema: SchemaArgs,
        /// Training TFRecord files.
        #[arg(long = "train", required = true, num_args = 1.., env = "VIDTAG_TRAIN")]
        train: Vec<PathBuf>,
        /// Validation TFRecord files.
        #[arg(long = "val", num_args = 1.., env = "VIDTAG_VAL")]
        val: Vec<PathBuf>,
        /// Run directory.
        #[arg(long, env = "VIDTAG_OUT")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint in inference mode.
    Eval {
        #[arg(long, env = "VIDTAG_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long = "data", required = true, num_args = 1.., env = "VIDTAG_DATA")]
        data: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv, env = "VIDTAG_FORMAT")]
        format: Format,
    },
    /// Finite-difference check of every parameter group on a tiny model.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ModelArg::GuidedLogistic, env = "VIDTAG_MODEL")]
        model: ModelArg,
        #[arg(long, value_enum, default_value_t = CellArg::Lstm, env = "VIDTAG_CELL")]
        cell: CellArg,
        #[arg(long, env = "VIDTAG_BN_FEATURE")]
        bn_feature: bool,
        #[arg(long, env = "VIDTAG_BN_PROJECTION")]
        bn_projection: bool,
        #[arg(long, value_enum, default_value_t = WordLossArg::Softmax, env = "VIDTAG_LOSS_WORD")]
        loss_word: WordLossArg,
        #[arg(long, default_value_t = 0.5, env = "VIDTAG_BETA")]
        beta: f64,
        #[arg(long, default_value_t = 0, env = "VIDTAG_SEED")]
        seed: u64,
    },
    /// Closed-form and Monte-Carlo equilibria of the injection chain.
    GatingAnalyze {
        #[arg(long, default_value_t = 100_000, env = "VIDTAG_TRIALS")]
        trials: usize,
        #[arg(long, default_value_t = 100, env = "VIDTAG_STEPS")]
        steps: usize,
        #[arg(long, default_value_t = 42, env = "VIDTAG_SEED")]
        seed: u64,
        /// Skip sampling and report the closed form only.
        #[arg(long)]
        no_mc: bool,
        /// CSV destination (stdout when absent).
        #[arg(long, env = "VIDTAG_OUT")]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic dataset as TFRecord.
    MakeSynthetic {
        #[arg(long, default_value_t = 50, env = "VIDTAG_VOCAB")]
        vocab: usize,
        #[arg(long, env = "VIDTAG_VIDEOS")]
        videos: usize,
        /// Index of the first video; disjoint ranges give disjoint splits.
        #[arg(long, default_value_t = 0, env = "VIDTAG_START")]
        start: usize,
        #[arg(long, default_value_t = 48, env = "VIDTAG_RGB_DIM")]
        rgb_dim: usize,
        #[arg(long, default_value_t = 16, env = "VIDTAG_AUDIO_DIM")]
        audio_dim: usize,
        #[arg(long, default_value_t = 3.4, env = "VIDTAG_MEAN_TAGS")]
        mean_tags: f64,
        #[arg(long, default_value_t = 30, env = "VIDTAG_MAX_TAGS")]
        max_tags: usize,
        #[arg(long, default_value_t = 0.5, env = "VIDTAG_NOISE")]
        noise: f64,
        #[arg(long, default_value_t = 0, env = "VIDTAG_SEED")]
        seed: u64,
        #[arg(long, env = "VIDTAG_OUT")]
        out: PathBuf,
    },
    /// Verify framing and summarize the records of a TFRecord file.
    InspectTfrecord {
        path: PathBuf,
        #[command(flatten)]
        schema: SchemaArgs,
        /// Records to print in detail.
        #[arg(long, default_value_t = 5)]
        limit: usize,
        /// Check framing only; do not parse examples.
        #[arg(long)]
        raw: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Text,
}

fn train(config: TrainConfig, schema: FeatureSchema, train: &[PathBuf], val: &[PathBuf], out: PathBuf) -> Result<()> {
    let train_data = Dataset::load(train, &schema).context("loading training data")?;
    let val_data = if val.is_empty() { None } else { Some(Dataset::load(val, &schema).context("loading validation data")?) };
    let data_vocab = train_data.min_vocab().max(val_data.as_ref().map_or(0, Dataset::min_vocab));
    let resolved = ResolvedConfig::new(config, schema, data_vocab)?;
    eprintln!(
        "training {:?} on {} videos ({} skipped without labels), vocabulary {}",
        resolved.train.model, train_data.len(), train_data.skipped, resolved.vocab
    );
    let trainer = train_to_dir(resolved, &train_data, val_data.as_ref(), &out)?;
    if let Some(v) = &val_data {
        print!("{}", trainer.evaluate(v)?.to_csv());
    }
    Ok(())
}

fn eval(checkpoint: PathBuf, data: &[PathBuf], format: Format) -> Result<()> {
    let ck = Checkpoint::load(&checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let dataset = Dataset::load(data, &ck.config.schema)?;
    let report = trainer.evaluate(&dataset)?;
    print!("{}", match format {
        Format::Csv => report.to_csv(),
        Format::Text => report.to_text(),
    });
    Ok(())
}

fn gradcheck(config: TrainConfig, beta: f64) -> Result<bool> {
    let mut r = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(&mut r, config.model_config(4, 6)?)?;
    // move away from the symmetric initialization so every term is exercised
    model.visit_params("", &mut |_, p| {
        let noise = vidtag_core::init::gaussian(&mut r, p.value.shape(), 0.3);
        p.value.add_assign(&noise).expect("same shape");
    });
    let features = vidtag_core::init::gaussian(&mut r, &[3, 4], 1.0);
    let batch = Batch::new(features, &[vec![0, 3], vec![2], vec![1, 4, 5]], 6)?;
    let report = check_model(&model, &batch, beta, config.seed)?;
    println!("group,size,rel_error,verdict");
    for g in &report {
        let verdict = match (g.passed, g.discontinuous) {
            (true, _) => "pass",
            (false, true) => "fail (argmax feedback changed under perturbation)",
            (false, false) => "fail",
        };
        println!("{},{},{:.3e},{verdict}", g.name, g.size, g.rel_error);
    }
    Ok(report.iter().all(|g| g.passed))
}

fn gating(trials: usize, steps: usize, seed: u64, no_mc: bool, out: Option<PathBuf>) -> Result<()> {
    let ps = default_probabilities();
    let grid: Vec<(f64, f64)> = ps.iter().flat_map(|&p| ps.iter().map(move |&q| (p, q))).collect();
    let mc = (!no_mc).then_some(McSettings { steps, trials, seed });
    let csv = report_csv(&ordering_report(&grid, &default_betas(), mc)?);
    match out {
        Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn inspect(path: PathBuf, schema: FeatureSchema, limit: usize, raw: bool) -> Result<()> {
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let (mut count, mut bytes, mut labels) = (0usize, 0usize, 0usize);
    for record in read_tfrecord(BufReader::new(file)) {
        let record = record.with_context(|| format!("reading {}", path.display()))?;
        bytes += record.len();
        if !raw {
            let ex = parse_example(&record, &schema).with_context(|| format!("record {count}"))?;
            labels += ex.labels.len();
            if count < limit {
                println!("{}\tlabels={:?}", String::from_utf8_lossy(&ex.id), ex.labels);
            }
        }
        count += 1;
    }
    println!("records={count} payload_bytes={bytes}");
    if !raw && count > 0 {
        println!("mean_labels={:.3}", labels as f64 / count as f64);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, schema, train: t, val, out } => train(config, schema.schema(), &t, &val, out),
        Command::Eval { checkpoint, data, format } => eval(checkpoint, &data, format),
        Command::Gradcheck { model, cell, bn_feature, bn_projection, loss_word, beta, seed } => {
            let config = TrainConfig {
                model,
                cell,
                bn_feature,
                bn_projection,
                loss_word,
                beta,
                seed,
                hidden: 5,
                embed: 3,
                batch_size: 3,
                ..Default::default()
            };
            match gradcheck(config, beta) {
                Ok(true) => Ok(()),
                Ok(false) => return ExitCode::FAILURE,
                Err(e) => Err(e),
            }
        }
        Command::GatingAnalyze { trials, steps, seed, no_mc, out } => gating(trials, steps, seed, no_mc, out),
        Command::MakeSynthetic { vocab, videos, start, rgb_dim, audio_dim, mean_tags, max_tags, noise, seed, out } => {
            let spec = SyntheticSpec { vocab, rgb_dim, audio_dim, mean_tags, max_tags, noise, seed };
            generate_range(&spec, start, videos)
                .map_err(anyhow::Error::from)
                .and_then(|ex| Ok(write_examples(&out, &ex, &FeatureSchema::with_dims(rgb_dim, audio_dim))?))
        }
        Command::InspectTfrecord { path, schema, limit, raw } => inspect(path, schema.schema(), limit, raw),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
