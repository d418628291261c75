//! Synthetic corpora drawn from the linear Gaussian frame model.
//!
//! For speaker `s` a latent `h_s ~ N(μ_p, L_p⁻¹)` is drawn once. Every frame
//! of every segment of that speaker is `z_t = h_s + ε_t` with
//! `ε_t ~ N(0, L_t⁻¹)` and a diagonal `L_t` drawn per frame from the noise
//! model. Observed features are `x_t = map(z_t)`. The latent, clean points
//! and true precisions are kept as oracle channels.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::kv::KeyValues;
use crate::data::{Corpus, FrameSequence, OracleSegment};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationMap {
    Identity,
    Linear,
    LinearTanh,
}

impl FromStr for ObservationMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ObservationMap::Identity),
            "linear" => Ok(ObservationMap::Linear),
            "linear_tanh" | "linear+tanh" => Ok(ObservationMap::LinearTanh),
            other => Err(Error::Config(format!("unknown observation map `{other}`"))),
        }
    }
}

impl fmt::Display for ObservationMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObservationMap::Identity => "identity",
            ObservationMap::Linear => "linear",
            ObservationMap::LinearTanh => "linear_tanh",
        })
    }
}

/// Per-frame noise precisions.
///
/// Each frame gets a log-precision drawn uniformly from
/// `[log_precision_min, log_precision_max]`, shared by all dimensions. With
/// probability `burst_prob` a segment also gets one noise burst: a run of
/// `burst_fraction·T` consecutive frames in which a random subset of
/// dimensions (each kept with probability `burst_dim_fraction`) has its
/// log-precision replaced by `burst_log_precision`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub log_precision_min: f64,
    pub log_precision_max: f64,
    pub burst_prob: f64,
    pub burst_fraction: f64,
    pub burst_dim_fraction: f64,
    pub burst_log_precision: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            log_precision_min: 0.0,
            log_precision_max: 2.0,
            burst_prob: 0.5,
            burst_fraction: 0.3,
            burst_dim_fraction: 0.5,
            burst_log_precision: -3.0,
        }
    }
}

impl NoiseModel {
    pub fn homoscedastic(log_precision: f64) -> Self {
        NoiseModel {
            log_precision_min: log_precision,
            log_precision_max: log_precision,
            burst_prob: 0.0,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub segments_per_speaker: usize,
    pub frames: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    /// Ground-truth prior mean, `[latent_dim]`.
    pub prior_mean: Vec<f64>,
    /// Ground-truth prior log-precision, `[latent_dim]`.
    pub prior_log_precision: Vec<f64>,
    pub noise: NoiseModel,
    pub obs_map: ObservationMap,
    /// Scale applied to the mixed latent before `tanh`.
    pub obs_gain: f64,
    /// Seeds speakers, segments and noise.
    pub seed: u64,
    /// Seeds the observation mixing matrix, so corpora with different
    /// `seed` but the same `map_seed` share one feature space.
    pub map_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_speakers: 10,
            segments_per_speaker: 10,
            frames: 40,
            latent_dim: 16,
            obs_dim: 20,
            prior_mean: vec![0.0; 16],
            prior_log_precision: vec![0.0; 16],
            noise: NoiseModel::default(),
            obs_map: ObservationMap::LinearTanh,
            obs_gain: 0.5,
            seed: 0,
            map_seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "num_speakers",
    "segments_per_speaker",
    "frames",
    "latent_dim",
    "obs_dim",
    "prior_mean",
    "prior_log_precision",
    "frame_log_precision_min",
    "frame_log_precision_max",
    "burst_prob",
    "burst_fraction",
    "burst_dim_fraction",
    "burst_log_precision",
    "obs_map",
    "obs_gain",
    "seed",
    "map_seed",
];

fn broadcast(values: Vec<f64>, dim: usize, key: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; dim]),
        n if n == dim => Ok(values),
        n => Err(Error::Config(format!(
            "`{key}` has {n} values, expected 1 or {dim}"
        ))),
    }
}

impl SynthConfig {
    /// Same dimensions as `self` with the prior set to a scalar per dim.
    pub fn with_prior(mut self, mean: f64, log_precision: f64) -> Self {
        self.prior_mean = vec![mean; self.latent_dim];
        self.prior_log_precision = vec![log_precision; self.latent_dim];
        self
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_known(KEYS)?;
        let d = SynthConfig::default();
        let n = NoiseModel::default();
        let latent_dim = kv.get_or("latent_dim", d.latent_dim)?;
        let prior_mean = kv.get_list("prior_mean")?.unwrap_or_else(|| vec![0.0]);
        let prior_lp = kv.get_list("prior_log_precision")?.unwrap_or_else(|| vec![0.0]);
        let cfg = SynthConfig {
            num_speakers: kv.get_or("num_speakers", d.num_speakers)?,
            segments_per_speaker: kv.get_or("segments_per_speaker", d.segments_per_speaker)?,
            frames: kv.get_or("frames", d.frames)?,
            latent_dim,
            obs_dim: kv.get_or("obs_dim", d.obs_dim)?,
            prior_mean: broadcast(prior_mean, latent_dim, "prior_mean")?,
            prior_log_precision: broadcast(prior_lp, latent_dim, "prior_log_precision")?,
            noise: NoiseModel {
                log_precision_min: kv.get_or("frame_log_precision_min", n.log_precision_min)?,
                log_precision_max: kv.get_or("frame_log_precision_max", n.log_precision_max)?,
                burst_prob: kv.get_or("burst_prob", n.burst_prob)?,
                burst_fraction: kv.get_or("burst_fraction", n.burst_fraction)?,
                burst_dim_fraction: kv.get_or("burst_dim_fraction", n.burst_dim_fraction)?,
                burst_log_precision: kv.get_or("burst_log_precision", n.burst_log_precision)?,
            },
            obs_map: kv.get_or("obs_map", d.obs_map)?,
            obs_gain: kv.get_or("obs_gain", d.obs_gain)?,
            seed: kv.get_or("seed", d.seed)?,
            map_seed: kv.get_or("map_seed", d.map_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        format!(
            "num_speakers = {}\nsegments_per_speaker = {}\nframes = {}\nlatent_dim = {}\nobs_dim = {}\n\
             prior_mean = {}\nprior_log_precision = {}\nframe_log_precision_min = {}\n\
             frame_log_precision_max = {}\nburst_prob = {}\nburst_fraction = {}\n\
             burst_dim_fraction = {}\nburst_log_precision = {}\nobs_map = {}\nobs_gain = {}\n\
             seed = {}\nmap_seed = {}\n",
            self.num_speakers,
            self.segments_per_speaker,
            self.frames,
            self.latent_dim,
            self.obs_dim,
            list(&self.prior_mean),
            list(&self.prior_log_precision),
            self.noise.log_precision_min,
            self.noise.log_precision_max,
            self.noise.burst_prob,
            self.noise.burst_fraction,
            self.noise.burst_dim_fraction,
            self.noise.burst_log_precision,
            self.obs_map,
            self.obs_gain,
            self.seed,
            self.map_seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_speakers", self.num_speakers),
            ("segments_per_speaker", self.segments_per_speaker),
            ("frames", self.frames),
            ("latent_dim", self.latent_dim),
            ("obs_dim", self.obs_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be at least 1")));
        }
        if self.prior_mean.len() != self.latent_dim || self.prior_log_precision.len() != self.latent_dim {
            return Err(Error::Config("prior dims must equal latent_dim".into()));
        }
        let n = &self.noise;
        let finite = [
            n.log_precision_min,
            n.log_precision_max,
            n.burst_log_precision,
            self.obs_gain,
        ]
        .iter()
        .chain(&self.prior_mean)
        .chain(&self.prior_log_precision)
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("synthetic config values must be finite".into()));
        }
        if n.log_precision_min > n.log_precision_max {
            return Err(Error::Config("frame log-precision range is empty".into()));
        }
        for (name, p) in [
            ("burst_prob", n.burst_prob),
            ("burst_fraction", n.burst_fraction),
            ("burst_dim_fraction", n.burst_dim_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("`{name}` must lie in [0, 1]")));
            }
        }
        if self.obs_map == ObservationMap::Identity && self.obs_dim != self.latent_dim {
            return Err(Error::Config("identity observation map needs obs_dim = latent_dim".into()));
        }
        Ok(())
    }

    /// `[latent_dim × obs_dim]` mixing matrix, a function of `map_seed` only.
    pub fn mixing_matrix(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.map_seed ^ 0x6d69_7869_6e67);
        let scale = 1.0 / (self.latent_dim as f64).sqrt();
        let data = (0..self.latent_dim * self.obs_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(vec![self.latent_dim, self.obs_dim], data).expect("shape")
    }
}

fn observe(cfg: &SynthConfig, mixing: &Tensor, z: &[f64], out: &mut Vec<f64>) {
    match cfg.obs_map {
        ObservationMap::Identity => out.extend_from_slice(z),
        ObservationMap::Linear | ObservationMap::LinearTanh => {
            let f = cfg.obs_dim;
            let start = out.len();
            out.resize(start + f, 0.0);
            let row = &mut out[start..];
            for (i, &zi) in z.iter().enumerate() {
                for (o, &m) in row.iter_mut().zip(mixing.row(i)) {
                    *o += zi * m;
                }
            }
            if cfg.obs_map == ObservationMap::LinearTanh {
                row.iter_mut().for_each(|v| *v = (cfg.obs_gain * *v).tanh());
            }
        }
    }
}

fn segment_log_precision(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (t_len, d) = (cfg.frames, cfg.latent_dim);
    let n = &cfg.noise;
    let mut lp = Vec::with_capacity(t_len * d);
    for _ in 0..t_len {
        let level = if n.log_precision_max > n.log_precision_min {
            rng.random_range(n.log_precision_min..=n.log_precision_max)
        } else {
            n.log_precision_min
        };
        lp.extend(std::iter::repeat_n(level, d));
    }
    if n.burst_prob > 0.0 && rng.random_bool(n.burst_prob) {
        let len = ((n.burst_fraction * t_len as f64).round() as usize).clamp(1, t_len);
        let start = rng.random_range(0..=t_len - len);
        let mut dims: Vec<usize> = (0..d).filter(|_| rng.random_bool(n.burst_dim_fraction)).collect();
        if dims.is_empty() {
            dims.push(rng.random_range(0..d));
        }
        for t in start..start + len {
            for &i in &dims {
                lp[t * d + i] = n.burst_log_precision;
            }
        }
    }
    lp
}

/// Draws a corpus; a pure function of `cfg` (seeds included).
pub fn gen_synthetic_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mixing = cfg.mixing_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (t_len, d) = (cfg.frames, cfg.latent_dim);
    let mut sequences = Vec::with_capacity(cfg.num_speakers * cfg.segments_per_speaker);
    let mut oracle = Vec::with_capacity(sequences.capacity());

    for spk in 0..cfg.num_speakers {
        let latent: Vec<f64> = (0..d)
            .map(|i| {
                let sd = (-0.5 * cfg.prior_log_precision[i]).exp();
                cfg.prior_mean[i] + sd * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        for seg in 0..cfg.segments_per_speaker {
            let lp = segment_log_precision(cfg, &mut rng);
            let mut points = Vec::with_capacity(t_len * d);
            for t in 0..t_len {
                for i in 0..d {
                    let sd = (-0.5 * lp[t * d + i]).exp();
                    points.push(latent[i] + sd * rng.sample::<f64, _>(StandardNormal));
                }
            }
            let mut feats = Vec::with_capacity(t_len * cfg.obs_dim);
            for t in 0..t_len {
                observe(cfg, &mixing, &points[t * d..(t + 1) * d], &mut feats);
            }
            sequences.push(FrameSequence::new(
                format!("spk{spk:04}-seg{seg:03}"),
                Some(spk),
                Tensor::new(vec![t_len, cfg.obs_dim], feats)?,
            ));
            oracle.push(OracleSegment {
                latent: latent.clone(),
                points: Tensor::new(vec![t_len, d], points)?,
                log_precision: Tensor::new(vec![t_len, d], lp)?,
            });
        }
    }
    Ok(Corpus {
        sequences,
        oracle: Some(oracle),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_speakers: 3,
            segments_per_speaker: 2,
            frames: 12,
            latent_dim: 4,
            obs_dim: 5,
            ..SynthConfig::default()
        }
        .with_prior(0.5, 1.0)
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = gen_synthetic_corpus(&small()).unwrap();
        let b = gen_synthetic_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 1;
        let c = gen_synthetic_corpus(&other).unwrap();
        assert_ne!(a.sequences[0].features, c.sequences[0].features);
    }

    #[test]
    fn map_seed_controls_mixing_only() {
        let mut a = small();
        let mut b = small();
        a.seed = 3;
        b.seed = 4;
        assert_eq!(a.mixing_matrix(), b.mixing_matrix());
        b.map_seed = 9;
        assert_ne!(a.mixing_matrix(), b.mixing_matrix());
    }

    #[test]
    fn shapes_labels_and_oracle() {
        let corpus = gen_synthetic_corpus(&small()).unwrap();
        assert_eq!(corpus.len(), 6);
        assert_eq!(corpus.num_speakers().unwrap(), 3);
        let oracle = corpus.oracle.as_ref().unwrap();
        for (s, o) in corpus.sequences.iter().zip(oracle) {
            assert_eq!(s.features.shape(), &[12, 5]);
            assert_eq!(o.points.shape(), &[12, 4]);
            assert!(s.features.data().iter().all(|v| v.abs() < 1.0));
        }
        assert_eq!(oracle[0].latent, oracle[1].latent);
        assert_ne!(oracle[0].latent, oracle[2].latent);
    }

    #[test]
    fn identity_map_exposes_points() {
        let mut cfg = small();
        cfg.obs_map = ObservationMap::Identity;
        cfg.obs_dim = 4;
        let corpus = gen_synthetic_corpus(&cfg).unwrap();
        let o = &corpus.oracle.as_ref().unwrap()[0];
        assert_eq!(corpus.sequences[0].features, o.points);
    }

    #[test]
    fn bursts_hit_a_contiguous_run() {
        let mut cfg = small();
        cfg.noise = NoiseModel {
            log_precision_min: 1.0,
            log_precision_max: 1.0,
            burst_prob: 1.0,
            burst_fraction: 0.25,
            burst_dim_fraction: 1.0,
            burst_log_precision: -4.0,
        };
        let corpus = gen_synthetic_corpus(&cfg).unwrap();
        for o in corpus.oracle.unwrap() {
            let burst_rows: Vec<usize> = (0..12).filter(|&t| o.log_precision.get2(t, 0) == -4.0).collect();
            assert_eq!(burst_rows.len(), 3);
            assert_eq!(burst_rows[2] - burst_rows[0], 2);
        }
    }

    #[test]
    fn kv_round_trip_and_validation() {
        let cfg = small();
        let back = SynthConfig::from_kv(&KeyValues::parse(&cfg.to_kv_string()).unwrap()).unwrap();
        assert_eq!(back, cfg);

        let kv = KeyValues::parse("num_speakers = 0").unwrap();
        assert!(SynthConfig::from_kv(&kv).is_err());
        let kv = KeyValues::parse("obs_map = identity\nobs_dim = 3\nlatent_dim = 4").unwrap();
        assert!(SynthConfig::from_kv(&kv).is_err());
        let kv = KeyValues::parse("colour = blue").unwrap();
        assert!(SynthConfig::from_kv(&kv).is_err());
        let kv = KeyValues::parse("latent_dim = 3\nprior_mean = 1,2").unwrap();
        assert!(SynthConfig::from_kv(&kv).is_err());
    }
}
