//! Corpora, synthetic data and on-disk formats.

pub mod checkpoint;
pub mod features;
pub mod kv;
pub mod synth;
pub mod trials;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_model, save_model};
pub use features::{read_features, write_features};
pub use synth::{gen_synthetic_corpus, NoiseModel, ObservationMap, SynthConfig};
pub use trials::{load_trials, read_scores, write_scores, write_trials, TrialRecord};

/// One utterance: a `[T×F]` feature matrix and, for training data, the
/// speaker label.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub id: String,
    pub speaker: Option<usize>,
    pub features: Tensor,
}

impl FrameSequence {
    pub fn new(id: impl Into<String>, speaker: Option<usize>, features: Tensor) -> Self {
        FrameSequence {
            id: id.into(),
            speaker,
            features,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Exactly `len` frames: a window starting at `offset` when the
    /// sequence is long enough, otherwise the sequence tiled end to end.
    pub fn crop_or_repeat(&self, len: usize, offset: usize) -> Tensor {
        let t = self.num_frames();
        let f = self.dim();
        let data = self.features.data();
        let mut out = Vec::with_capacity(len * f);
        if t >= len {
            let start = offset.min(t - len);
            out.extend_from_slice(&data[start * f..(start + len) * f]);
        } else {
            for i in 0..len {
                let src = i % t;
                out.extend_from_slice(&data[src * f..(src + 1) * f]);
            }
        }
        Tensor::new(vec![len, f], out).expect("consistent shape")
    }
}

/// Ground truth kept alongside a synthetic segment.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSegment {
    /// Latent `h` of the segment's speaker, `[D_true]`.
    pub latent: Vec<f64>,
    /// Clean points `z_t = h + ε_t`, `[T×D_true]`.
    pub points: Tensor,
    /// Log-precision of each `ε_t`, `[T×D_true]`.
    pub log_precision: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<FrameSequence>,
    /// Parallel to `sequences` for synthetic corpora.
    pub oracle: Option<Vec<OracleSegment>>,
}

/// Manifest listing `utt_id speaker` pairs inside a corpus directory.
pub const MANIFEST: &str = "manifest.txt";
pub const FEATURE_EXT: &str = "xvf";

impl Corpus {
    pub fn new(sequences: Vec<FrameSequence>) -> Self {
        Corpus {
            sequences,
            oracle: None,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.sequences.first().map(FrameSequence::dim)
    }

    /// Number of distinct speaker labels, after checking they are dense in
    /// `[0, C)` and that every sequence has one.
    pub fn num_speakers(&self) -> Result<usize> {
        let mut seen = BTreeSet::new();
        for s in &self.sequences {
            let label = s
                .speaker
                .ok_or_else(|| Error::Config(format!("sequence `{}` has no speaker label", s.id)))?;
            seen.insert(label);
        }
        let c = seen.len();
        if seen.iter().copied().ne(0..c) {
            return Err(Error::Config("speaker labels are not dense in [0, C)".into()));
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(f) = self.feature_dim() else {
            return Err(Error::Config("corpus is empty".into()));
        };
        if let Some(bad) = self.sequences.iter().find(|s| s.dim() != f) {
            return Err(Error::Config(format!(
                "sequence `{}` has {} features, corpus has {f}",
                bad.id,
                bad.dim()
            )));
        }
        Ok(())
    }

    /// Writes every sequence as `<id>.xvf` plus a manifest of labels.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for s in &self.sequences {
            write_features(s, &dir.join(format!("{}.{FEATURE_EXT}", s.id)))?;
            match s.speaker {
                Some(l) => manifest.push_str(&format!("{} {l}\n", s.id)),
                None => manifest.push_str(&format!("{}\n", s.id)),
            }
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    /// Reads a directory written by [`Corpus::write_dir`]. Without a
    /// manifest, every `.xvf` file is loaded unlabeled in name order.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST);
        let mut sequences = Vec::new();
        if manifest.exists() {
            let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            for (n, line) in text.lines().enumerate() {
                let mut parts = line.split_whitespace();
                let Some(id) = parts.next() else { continue };
                let speaker = match parts.next() {
                    Some(tok) => Some(tok.parse::<usize>().map_err(|_| Error::Parse {
                        line: n + 1,
                        message: format!("bad speaker label `{tok}`"),
                    })?),
                    None => None,
                };
                let mut seq = read_features(&dir.join(format!("{id}.{FEATURE_EXT}")))?;
                seq.id = id.to_string();
                seq.speaker = speaker;
                sequences.push(seq);
            }
        } else {
            let mut paths: Vec<_> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == FEATURE_EXT))
                .collect();
            paths.sort();
            for p in paths {
                sequences.push(read_features(&p)?);
            }
        }
        let corpus = Corpus::new(sequences);
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn find(&self, id: &str) -> Option<&FrameSequence> {
        self.sequences.iter().find(|s| s.id == id)
    }
}
