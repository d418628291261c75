//! Train-and-evaluate runs comparing pooling systems.
//!
//! A config file names a training corpus, an evaluation corpus and a trial
//! list (paths relative to the config), the systems to compare and the
//! seeds to average over. Each (system, seed) pair trains a fresh model,
//! embeds the evaluation corpus, scores the trials with cosine similarity
//! and yields one CSV row.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::kv::KeyValues;
use crate::data::{load_trials, Corpus, TrialRecord};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::metrics::{compute_metrics, CostModel};
use crate::eval::scoring::{embed_all, score_trials};
use crate::model::{ModelConfig, ModelParams};
use crate::pooling::Pooling;
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Three-layer trunk sized by [`ModelSpec::pooling_dim`].
    Desk,
    /// Five-layer trunk at the published sizes.
    Tdnn5,
}

/// Everything about a model except its pooling, input dim and class count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub pooling_dim: usize,
    pub aux_hidden: usize,
    pub embedding_dim: usize,
    pub hidden_dims: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            architecture: Architecture::Desk,
            pooling_dim: 32,
            aux_hidden: 16,
            embedding_dim: 32,
            hidden_dims: vec![],
        }
    }
}

impl ModelSpec {
    pub fn build(&self, input_dim: usize, num_speakers: usize, pooling: Pooling) -> Result<ModelConfig> {
        let mut encoder = match self.architecture {
            Architecture::Desk => EncoderConfig::desk(input_dim, self.pooling_dim, self.aux_hidden),
            Architecture::Tdnn5 => EncoderConfig::tdnn5(input_dim),
        };
        encoder.isotropic = pooling.isotropic();
        let decoder = DecoderConfig::new(
            pooling.output_dim(encoder.pooling_dim),
            self.embedding_dim,
            self.hidden_dims.clone(),
            num_speakers,
        );
        ModelConfig::new(encoder, pooling, decoder)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub systems: Vec<Pooling>,
    pub seeds: Vec<u64>,
    pub costs: CostModel,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            systems: vec![Pooling::XVECTOR, Pooling::XIVECTOR],
            seeds: vec![0],
            costs: CostModel::default(),
        }
    }
}

impl ModelSpec {
    pub const KEYS: &'static [&'static str] = &["architecture", "pooling_dim", "aux_hidden", "embedding_dim", "hidden_dims"];

    /// Reads [`ModelSpec::KEYS`]; absent keys keep defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = ModelSpec::default();
        let architecture = match kv.raw("architecture") {
            None | Some("desk") => Architecture::Desk,
            Some("tdnn5") => Architecture::Tdnn5,
            Some(other) => return Err(Error::Config(format!("unknown architecture `{other}`"))),
        };
        Ok(ModelSpec {
            architecture,
            pooling_dim: kv.get_or("pooling_dim", d.pooling_dim)?,
            aux_hidden: kv.get_or("aux_hidden", d.aux_hidden)?,
            embedding_dim: kv.get_or("embedding_dim", d.embedding_dim)?,
            hidden_dims: kv.get_list("hidden_dims")?.unwrap_or_default(),
        })
    }
}

const KEYS: &[&str] = &["train_corpus", "eval_corpus", "trials", "systems", "seeds", "p_target", "c_miss", "c_fa"];

impl ExperimentConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let known: Vec<&str> = KEYS
            .iter()
            .chain(ModelSpec::KEYS)
            .chain(TrainConfig::KEYS)
            .copied()
            .collect();
        kv.check_known(&known)?;
        let d = ExperimentConfig::default();
        let model = ModelSpec::from_kv(kv)?;
        let costs = CostModel {
            p_target: kv.get_or("p_target", d.costs.p_target)?,
            c_miss: kv.get_or("c_miss", d.costs.c_miss)?,
            c_fa: kv.get_or("c_fa", d.costs.c_fa)?,
        };
        costs.validate()?;
        let cfg = ExperimentConfig {
            model,
            train: TrainConfig::from_kv(kv)?,
            systems: kv.get_list("systems")?.unwrap_or(d.systems),
            seeds: kv.get_list("seeds")?.unwrap_or(d.seeds),
            costs,
        };
        if cfg.systems.is_empty() || cfg.seeds.is_empty() {
            return Err(Error::Config("need at least one system and one seed".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemResult {
    pub system: Pooling,
    pub seed: u64,
    pub eer: f64,
    pub min_dcf: f64,
    pub final_train_loss: f64,
    pub final_train_accuracy: f64,
}

/// Trains one system with `seed` and evaluates it on `trials`.
pub fn run_system(
    cfg: &ExperimentConfig,
    system: Pooling,
    seed: u64,
    train_corpus: &Corpus,
    eval_corpus: &Corpus,
    trials: &[TrialRecord],
) -> Result<SystemResult> {
    let input_dim = train_corpus
        .feature_dim()
        .ok_or(Error::EmptyInput("run_system"))?;
    let model_cfg = cfg.model.build(input_dim, train_corpus.num_speakers()?, system)?;
    let params = ModelParams::init(model_cfg, seed);
    let train_cfg = TrainConfig {
        seed: cfg.train.seed.wrapping_add(seed),
        ..cfg.train.clone()
    };
    log::info!("training {system} (seed {seed})");
    let outcome = train(train_corpus, params, &train_cfg)?;
    let last = *outcome.history.last().ok_or_else(|| Error::Config("max_epochs is 0".into()))?;
    let embeddings = embed_all(&outcome.params, &eval_corpus.sequences, train_cfg.exec)?;
    let scored = score_trials(trials, &embeddings, train_cfg.exec)?;
    let metrics = compute_metrics(&scored, &cfg.costs)?;
    log::info!(
        "{system} seed {seed}: EER {:.4} minDCF {:.4}",
        metrics.eer,
        metrics.min_dcf
    );
    Ok(SystemResult {
        system,
        seed,
        eer: metrics.eer,
        min_dcf: metrics.min_dcf,
        final_train_loss: last.loss,
        final_train_accuracy: last.accuracy,
    })
}

/// Every (system, seed) pair, systems outermost.
pub fn run_systems(
    cfg: &ExperimentConfig,
    train_corpus: &Corpus,
    eval_corpus: &Corpus,
    trials: &[TrialRecord],
) -> Result<Vec<SystemResult>> {
    let mut out = Vec::with_capacity(cfg.systems.len() * cfg.seeds.len());
    for &system in &cfg.systems {
        for &seed in &cfg.seeds {
            out.push(run_system(cfg, system, seed, train_corpus, eval_corpus, trials)?);
        }
    }
    Ok(out)
}

pub fn results_csv(results: &[SystemResult]) -> String {
    let mut s = String::from("mode,eer,min_dcf,seed\n");
    for r in results {
        let _ = writeln!(s, "{},{:.6},{:.6},{}", r.system, r.eer, r.min_dcf, r.seed);
    }
    s
}

/// Seed-averaged `(system, eer, min_dcf)` in first-seen system order.
pub fn average_by_system(results: &[SystemResult]) -> Vec<(Pooling, f64, f64)> {
    let mut out: Vec<(Pooling, f64, f64, usize)> = Vec::new();
    for r in results {
        match out.iter_mut().find(|e| e.0 == r.system) {
            Some(e) => {
                e.1 += r.eer;
                e.2 += r.min_dcf;
                e.3 += 1;
            }
            None => out.push((r.system, r.eer, r.min_dcf, 1)),
        }
    }
    out.into_iter()
        .map(|(p, e, d, n)| (p, e / n as f64, d / n as f64))
        .collect()
}

/// Every unordered pair of distinct sequences; target when the speakers
/// match.
pub fn all_pairs_trials(corpus: &Corpus) -> Result<Vec<TrialRecord>> {
    let seqs = &corpus.sequences;
    let mut out = Vec::new();
    for (i, a) in seqs.iter().enumerate() {
        for b in &seqs[i + 1..] {
            let (Some(sa), Some(sb)) = (a.speaker, b.speaker) else {
                return Err(Error::Config(format!(
                    "cannot label trial {} {}: unknown speaker",
                    a.id, b.id
                )));
            };
            out.push(TrialRecord::new(a.id.clone(), b.id.clone(), sa == sb));
        }
    }
    Ok(out)
}

fn resolve(base: &Path, kv: &KeyValues, key: &str) -> Result<PathBuf> {
    let raw: String = kv.require(key)?;
    let path = base.join(raw);
    if !path.exists() {
        return Err(Error::Config(format!("`{key}` points to missing {}", path.display())));
    }
    Ok(path)
}

/// Runs the experiment described by the config at `path`; returns the CSV.
pub fn run_experiment(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::Config(format!("missing experiment config {}", path.display())));
    }
    let kv = KeyValues::load(path)?;
    let cfg = ExperimentConfig::from_kv(&kv)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let train_corpus = Corpus::read_dir(&resolve(base, &kv, "train_corpus")?)?;
    let eval_corpus = Corpus::read_dir(&resolve(base, &kv, "eval_corpus")?)?;
    let trials = load_trials(&resolve(base, &kv, "trials")?)?;
    let results = run_systems(&cfg, &train_corpus, &eval_corpus, &trials)?;
    Ok(results_csv(&results))
}

/// [`run_experiment`], writing the CSV to `out`.
pub fn run_experiment_to(path: &Path, out: &Path) -> Result<()> {
    let csv = run_experiment(path)?;
    fs::write(out, csv).map_err(|e| Error::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_synthetic_corpus, SynthConfig};
    use crate::data::write_trials;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelSpec {
                pooling_dim: 6,
                aux_hidden: 4,
                embedding_dim: 5,
                ..ModelSpec::default()
            },
            train: TrainConfig {
                batch_size: 4,
                max_epochs: 2,
                segment_frames: 8,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    fn corpora() -> (Corpus, Corpus) {
        let synth = SynthConfig {
            num_speakers: 3,
            segments_per_speaker: 3,
            frames: 10,
            latent_dim: 4,
            obs_dim: 5,
            ..SynthConfig::default()
        }
        .with_prior(0.0, 0.0);
        let train = gen_synthetic_corpus(&SynthConfig { seed: 1, ..synth.clone() }).unwrap();
        let eval = gen_synthetic_corpus(&SynthConfig { seed: 2, ..synth }).unwrap();
        (train, eval)
    }

    #[test]
    fn config_from_kv() {
        let kv = KeyValues::parse(
            "systems = xvector, xivector, no_prior\nseeds = 1,2\npooling_dim = 8\nlearning_rate = 0.1\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.systems.len(), 3);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.model.pooling_dim, 8);
        assert_eq!(cfg.train.learning_rate, 0.1);
        assert!(ExperimentConfig::from_kv(&KeyValues::parse("systems = bogus\n").unwrap()).is_err());
        assert!(ExperimentConfig::from_kv(&KeyValues::parse("colour = red\n").unwrap()).is_err());
    }

    #[test]
    fn all_pairs_labels() {
        let (_, eval) = corpora();
        let trials = all_pairs_trials(&eval).unwrap();
        assert_eq!(trials.len(), 9 * 8 / 2);
        assert_eq!(trials.iter().filter(|t| t.target).count(), 3 * 3);
    }

    #[test]
    fn config_file_run_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (train, eval) = corpora();
        train.write_dir(&dir.path().join("train")).unwrap();
        eval.write_dir(&dir.path().join("eval")).unwrap();
        write_trials(&all_pairs_trials(&eval).unwrap(), &dir.path().join("trials.txt")).unwrap();
        let conf = dir.path().join("exp.conf");
        fs::write(
            &conf,
            "train_corpus = train\neval_corpus = eval\ntrials = trials.txt\n\
             systems = xvector, xivector\nseeds = 5\npooling_dim = 6\naux_hidden = 4\n\
             embedding_dim = 5\nbatch_size = 4\nmax_epochs = 2\nsegment_frames = 8\n",
        )
        .unwrap();
        let a = run_experiment(&conf).unwrap();
        assert_eq!(a.lines().count(), 3);
        assert!(a.starts_with("mode,eer,min_dcf,seed\nxvector,"));
        assert_eq!(a, run_experiment(&conf).unwrap());
    }

    #[test]
    fn missing_files_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            run_experiment(&dir.path().join("nope.conf")),
            Err(Error::Config(_))
        ));
        let conf = dir.path().join("exp.conf");
        fs::write(&conf, "train_corpus = a\neval_corpus = b\ntrials = c\n").unwrap();
        assert!(matches!(run_experiment(&conf), Err(Error::Config(_))));
    }

    #[test]
    fn in_memory_rows() {
        let (train, eval) = corpora();
        let trials = all_pairs_trials(&eval).unwrap();
        let res = run_systems(&small_cfg(), &train, &eval, &trials).unwrap();
        assert_eq!(res.len(), 2);
        assert!(res.iter().all(|r| (0.0..=1.0).contains(&r.eer)));
        let avg = average_by_system(&res);
        assert_eq!(avg[0].0, Pooling::XVECTOR);
    }
}
