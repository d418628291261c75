//! Utterance-level classifier and embedding extraction.

use serde::{Deserialize, Serialize};

use crate::data::FrameSequence;
use crate::encoder::{check_input, encode_on};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pooling::pool_on;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Width of the pooled vector (D, or 2D with a second-order term).
    pub input_dim: usize,
    /// Width of the first fully-connected layer, whose pre-activation output
    /// is the embedding.
    pub embedding_dim: usize,
    /// Extra hidden layers between the embedding layer and the output.
    pub hidden_dims: Vec<usize>,
    pub num_speakers: usize,
}

impl DecoderConfig {
    pub fn new(input_dim: usize, embedding_dim: usize, hidden_dims: Vec<usize>, num_speakers: usize) -> Self {
        DecoderConfig {
            input_dim,
            embedding_dim,
            hidden_dims,
            num_speakers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.input_dim, self.embedding_dim, self.num_speakers];
        if all.iter().chain(&self.hidden_dims).any(|&d| d == 0) {
            return Err(Error::Config("decoder dims must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) struct DecodedVars {
    pub embedding: Var,
    pub logits: Var,
}

/// `fc → ReLU → [fc → ReLU]* → fc`; returns the first pre-activation and
/// the logits.
pub(crate) fn decode_on(tape: &mut Tape, params: &ModelParams, vars: &[Var], pooled: Var) -> Result<DecodedVars> {
    let layers = &params.layout().decoder;
    let (first, rest) = layers.split_first().expect("decoder has layers");
    let embedding = tape.affine(pooled, vars[first.weight], vars[first.bias])?;
    let mut h = embedding;
    for layer in rest {
        let act = tape.relu(h)?;
        h = tape.affine(act, vars[layer.weight], vars[layer.bias])?;
    }
    Ok(DecodedVars { embedding, logits: h })
}

/// Everything one utterance produces on a tape.
pub(crate) struct ForwardVars {
    pub pooled: Var,
    pub embedding: Var,
    pub logits: Var,
}

pub(crate) fn forward_on(tape: &mut Tape, params: &ModelParams, vars: &[Var], x: Var) -> Result<ForwardVars> {
    let enc = encode_on(tape, params, vars, x)?;
    let prior = params.prior_vars(tape, vars)?;
    let pooled = pool_on(tape, params.config().pooling, enc.z, enc.log_precision, prior)?;
    let dec = decode_on(tape, params, vars, pooled)?;
    Ok(ForwardVars {
        pooled,
        embedding: dec.embedding,
        logits: dec.logits,
    })
}

/// Class logits `[C]` for a pooled vector of shape `[Din]` or `[1×Din]`.
pub fn decode_forward(pooled: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let din = params.config().decoder.input_dim;
    let shape_ok = matches!(pooled.shape(), [n] | [1, n] if *n == din);
    if !shape_ok {
        return Err(Error::dim(
            "decode_forward",
            format!("expected {din} pooled values, got {:?}", pooled.shape()),
        ));
    }
    let mut tape = Tape::new();
    let vars = params.bind_constants(&mut tape)?;
    let p = tape.constant(pooled.clone().reshape(vec![1, din])?)?;
    let out = decode_on(&mut tape, params, &vars, p)?;
    Ok(Tensor::vector(tape.value(out.logits).data().to_vec()))
}

/// Pooled utterance vector `[Din]` as fed to the decoder.
pub fn pooled_vector(x: &FrameSequence, params: &ModelParams) -> Result<Tensor> {
    run(x, params, |_, f| f.pooled)
}

/// Speaker embedding `[E]`: the first decoder layer's output before its
/// non-linearity.
pub fn extract_embedding(x: &FrameSequence, params: &ModelParams) -> Result<Tensor> {
    run(x, params, |_, f| f.embedding)
}

fn run(x: &FrameSequence, params: &ModelParams, pick: impl Fn(&Tape, &ForwardVars) -> Var) -> Result<Tensor> {
    check_input(&params.config().encoder, &x.features, "extract_embedding")?;
    let mut tape = Tape::new();
    let vars = params.bind_constants(&mut tape)?;
    let input = tape.constant(x.features.clone())?;
    let fwd = forward_on(&mut tape, params, &vars, input)?;
    let v = pick(&tape, &fwd);
    Ok(Tensor::vector(tape.value(v).data().to_vec()))
}
