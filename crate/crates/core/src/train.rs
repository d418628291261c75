//! Minibatch SGD over utterance classification.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::kv::KeyValues;
use crate::data::Corpus;
use crate::decoder::forward_on;
use crate::encoder::check_input;
use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams};
use crate::optim::sgd_step;
use crate::par::{self, Exec};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Training stops once the relative change in epoch loss falls below
    /// this.
    pub tolerance: f64,
    /// Frames per training example (crop or tile).
    pub segment_frames: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 0.05,
            max_epochs: 30,
            tolerance: 1e-4,
            segment_frames: 40,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "batch_size",
        "learning_rate",
        "max_epochs",
        "tolerance",
        "segment_frames",
        "train_seed",
        "exec",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.segment_frames == 0 {
            return Err(Error::Config("segment_frames must be ≥ 1".into()));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::Config("tolerance must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Reads the keys in [`TrainConfig::KEYS`]; absent keys keep defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let exec = match kv.raw("exec") {
            None => d.exec,
            Some("parallel") => Exec::Parallel,
            Some("sequential") => Exec::Sequential,
            Some(other) => return Err(Error::Config(format!("unknown exec mode `{other}`"))),
        };
        let cfg = TrainConfig {
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            max_epochs: kv.get_or("max_epochs", d.max_epochs)?,
            tolerance: kv.get_or("tolerance", d.tolerance)?,
            segment_frames: kv.get_or("segment_frames", d.segment_frames)?,
            seed: kv.get_or("train_seed", d.seed)?,
            exec,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleGrad {
    pub loss: f64,
    pub correct: bool,
    pub grads: Gradients,
}

/// Loss and `∂loss/∂θ` for a single example.
pub fn example_gradient(params: &ModelParams, ex: &Example) -> Result<ExampleGrad> {
    check_input(&params.config().encoder, &ex.features, "train")?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape)?;
    let x = tape.constant(ex.features.clone())?;
    let fwd = forward_on(&mut tape, params, &vars, x)?;
    let logits = tape.value(fwd.logits).data();
    let predicted = argmax(logits);
    let loss_var = tape.cross_entropy(fwd.logits, ex.label)?;
    let loss = tape.value(loss_var).data()[0];
    tape.backward(loss_var)?;
    Ok(ExampleGrad {
        loss,
        correct: predicted == ex.label,
        grads: params.collect_grads(&mut tape, &vars),
    })
}

/// Mean loss over a batch without touching the parameters.
pub fn batch_loss(params: &ModelParams, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch_loss"));
    }
    let mut total = 0.0;
    for ex in batch {
        check_input(&params.config().encoder, &ex.features, "batch_loss")?;
        let mut tape = Tape::new();
        let vars = params.bind_constants(&mut tape)?;
        let x = tape.constant(ex.features.clone())?;
        let fwd = forward_on(&mut tape, params, &vars, x)?;
        let l = tape.cross_entropy(fwd.logits, ex.label)?;
        total += tape.value(l).data()[0];
    }
    Ok(total / batch.len() as f64)
}

/// Pre-update statistics of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// Mean gradient over `batch`, accumulated in batch order.
pub fn batch_gradient(params: &ModelParams, batch: &[Example], exec: Exec) -> Result<(StepStats, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("train_minibatch"));
    }
    let per_example = par::try_map(exec, batch, |ex| example_gradient(params, ex))?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros_like(params);
    let mut stats = StepStats { loss: 0.0, correct: 0 };
    for eg in &per_example {
        grads.add_scaled(&eg.grads, scale);
        stats.loss += eg.loss * scale;
        stats.correct += usize::from(eg.correct);
    }
    Ok((stats, grads))
}

/// One SGD step on the mean cross-entropy of `batch`. The returned loss is
/// measured before the update.
pub fn train_minibatch(params: &mut ModelParams, batch: &[Example], cfg: &TrainConfig) -> Result<StepStats> {
    let (stats, grads) = batch_gradient(params, batch, cfg.exec)?;
    if !stats.loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite { op: "train_minibatch" });
    }
    sgd_step(params, &grads, cfg.learning_rate)?;
    if !params.is_finite() {
        return Err(Error::NonFinite { op: "sgd_step" });
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
}

/// Trains `params` on every labelled sequence of `corpus`.
pub fn train(corpus: &Corpus, mut params: ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    corpus.validate()?;
    let speakers = corpus.num_speakers()?;
    if speakers < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 speakers, corpus has {speakers}"
        )));
    }
    let classes = params.config().decoder.num_speakers;
    if classes != speakers {
        return Err(Error::Config(format!(
            "model predicts {classes} classes but corpus has {speakers} speakers"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history: Vec<EpochStats> = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|&i| {
                    let seq = &corpus.sequences[i];
                    let slack = seq.num_frames().saturating_sub(cfg.segment_frames);
                    let offset = rng.random_range(0..=slack);
                    Example {
                        features: seq.crop_or_repeat(cfg.segment_frames, offset),
                        label: seq.speaker.expect("validated labels"),
                    }
                })
                .collect();
            let stats = train_minibatch(&mut params, &batch, cfg)?;
            loss_sum += stats.loss * batch.len() as f64;
            correct += stats.correct;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / corpus.len() as f64,
            accuracy: correct as f64 / corpus.len() as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} accuracy {:.3}",
            stats.loss,
            stats.accuracy
        );
        let converged = history
            .last()
            .is_some_and(|prev| ((prev.loss - stats.loss) / prev.loss).abs() < cfg.tolerance);
        history.push(stats);
        if converged {
            log::info!("loss change below {} after epoch {epoch}; stopping", cfg.tolerance);
            break;
        }
    }
    Ok(TrainOutcome { params, history })
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss,accuracy\n");
    for h in history {
        let _ = writeln!(s, "{},{},{}", h.epoch, h.loss, h.accuracy);
    }
    s
}

pub fn write_history(history: &[EpochStats], path: &Path) -> Result<()> {
    fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
