//! `xivector`: generate synthetic data, train, embed, score and evaluate.
//!
//! Log verbosity follows `XIVECTOR_LOG` (`error`, `warn`, `info`, `debug`,
//! `trace`; default `info`).

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use xivector::data::kv::KeyValues;
use xivector::data::trials::attach_scores;
use xivector::data::{
    gen_synthetic_corpus, load_model, load_trials, read_features, read_scores, save_model, write_scores,
    write_trials, Corpus, SynthConfig,
};
use xivector::decoder::extract_embedding;
use xivector::eval::experiment::run_experiment_to;
use xivector::eval::metrics::points_csv;
use xivector::eval::{all_pairs_trials, compute_metrics, embed_all, score_trials, CostModel, ModelSpec};
use xivector::model::ModelParams;
use xivector::train::{train, write_history, TrainConfig};
use xivector::{Exec, Pooling};

const LOG_ENV: &str = "XIVECTOR_LOG";

#[derive(Parser)]
#[command(name = "xivector", version, about = "Speaker embeddings with Gaussian posterior pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic corpus and write it with an all-pairs trial list.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a corpus directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-epoch loss history as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Embed one feature file; writes the embedding as one line of text.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine-score a trial list using `<features>/<id>.xvf` files.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print EER and MinDCF for a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        p_target: f64,
        #[arg(long, default_value_t = 1.0)]
        c_miss: f64,
        #[arg(long, default_value_t = 1.0)]
        c_fa: f64,
        /// Also write the operating points as CSV.
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// Train and evaluate every configured system; writes a CSV.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train {
            config,
            corpus,
            out,
            history,
        } => train_cmd(&config, &corpus, &out, history.as_deref()),
        Command::Embed { model, features, out } => embed(&model, &features, &out),
        Command::Score {
            model,
            trials,
            features,
            out,
        } => score(&model, &trials, &features, &out),
        Command::Eval {
            scores,
            trials,
            p_target,
            c_miss,
            c_fa,
            points,
        } => eval(
            &scores,
            &trials,
            &CostModel { p_target, c_miss, c_fa },
            points.as_deref(),
        ),
        Command::Experiment { config, out } => {
            run_experiment_to(&config, &out)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let kv = KeyValues::load(config)?;
    let cfg = SynthConfig::from_kv(&kv)?;
    let corpus = gen_synthetic_corpus(&cfg)?;
    corpus.write_dir(out)?;
    write_trials(&all_pairs_trials(&corpus)?, &out.join("trials.txt"))?;
    log::info!("wrote {} sequences to {}", corpus.len(), out.display());
    Ok(())
}

const TRAIN_KEYS: &[&str] = &["system", "seed"];

fn train_cmd(config: &Path, corpus_dir: &Path, out: &Path, history: Option<&Path>) -> Result<()> {
    let kv = KeyValues::load(config)?;
    let known: Vec<&str> = TRAIN_KEYS
        .iter()
        .chain(ModelSpec::KEYS)
        .chain(TrainConfig::KEYS)
        .copied()
        .collect();
    kv.check_known(&known)?;
    let system: Pooling = kv.get_or("system", Pooling::XIVECTOR)?;
    let seed: u64 = kv.get_or("seed", 0)?;
    let spec = ModelSpec::from_kv(&kv)?;
    let train_cfg = TrainConfig::from_kv(&kv)?;
    let corpus = Corpus::read_dir(corpus_dir)?;
    let input_dim = corpus.feature_dim().context("corpus is empty")?;
    let model_cfg = spec.build(input_dim, corpus.num_speakers()?, system)?;
    let outcome = train(&corpus, ModelParams::init(model_cfg, seed), &train_cfg)?;
    save_model(&outcome.params, out)?;
    if let Some(path) = history {
        write_history(&outcome.history, path)?;
    }
    if let Some(last) = outcome.history.last() {
        log::info!(
            "trained {system} for {} epochs: loss {:.4} accuracy {:.3}",
            last.epoch,
            last.loss,
            last.accuracy
        );
    }
    Ok(())
}

fn embed(model: &Path, features: &Path, out: &Path) -> Result<()> {
    let params = load_model(model)?;
    let seq = read_features(features)?;
    let e = extract_embedding(&seq, &params)?;
    let mut line = seq.id.clone();
    for v in e.data() {
        let _ = write!(line, " {v}");
    }
    line.push('\n');
    fs::write(out, line).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn score(model: &Path, trials_path: &Path, features: &Path, out: &Path) -> Result<()> {
    let params = load_model(model)?;
    let trials = load_trials(trials_path)?;
    if trials.is_empty() {
        bail!("{} has no trials", trials_path.display());
    }
    let ids: BTreeSet<&str> = trials
        .iter()
        .flat_map(|t| [t.enroll_id.as_str(), t.test_id.as_str()])
        .collect();
    let seqs = ids
        .iter()
        .map(|id| read_features(&features.join(format!("{id}.xvf"))))
        .collect::<xivector::Result<Vec<_>>>()?;
    let embeddings: HashMap<_, _> = embed_all(&params, &seqs, Exec::Parallel)?;
    let scored = score_trials(&trials, &embeddings, Exec::Parallel)?;
    write_scores(&scored, out)?;
    log::info!("scored {} trials", scored.len());
    Ok(())
}

fn eval(scores: &Path, trials_path: &Path, costs: &CostModel, points: Option<&Path>) -> Result<()> {
    let mut trials = load_trials(trials_path)?;
    attach_scores(&mut trials, &read_scores(scores)?)?;
    let m = compute_metrics(&trials, costs)?;
    println!("trials {}", trials.len());
    println!("eer {:.6}", m.eer);
    println!("min_dcf {:.6}", m.min_dcf);
    if let Some(path) = points {
        fs::write(path, points_csv(&m.points)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
