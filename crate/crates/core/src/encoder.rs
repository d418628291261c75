//! Frame encoder: a TDNN trunk with a point-estimate head and an
//! uncertainty head predicting per-frame diagonal log-precisions.

use serde::{Deserialize, Serialize};

use crate::data::FrameSequence;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One dilated convolution layer of the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TdnnLayerSpec {
    pub out_dim: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl TdnnLayerSpec {
    pub const fn new(out_dim: usize, kernel: usize, dilation: usize) -> Self {
        TdnnLayerSpec {
            out_dim,
            kernel,
            dilation,
        }
    }

    /// Frames of context on each side of the center tap.
    pub fn half_context(&self) -> usize {
        (self.kernel - 1) / 2 * self.dilation
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layers: Vec<TdnnLayerSpec>,
    pub pooling_dim: usize,
    pub aux_hidden: usize,
    /// Uncertainty head emits one log-precision per frame, shared by all dims.
    pub isotropic: bool,
    /// Trunk layer feeding the uncertainty head; `None` taps the last layer.
    pub aux_tap: Option<usize>,
}

impl EncoderConfig {
    /// Kernel/dilation pairs of the standard five-layer x-vector trunk.
    pub const TDNN5_CONTEXTS: [(usize, usize); 5] = [(5, 1), (3, 2), (3, 3), (1, 1), (1, 1)];

    /// Five-layer trunk at the published sizes (512-wide hidden layers,
    /// a 1500-dim pooling layer and a 256-unit uncertainty head).
    pub fn tdnn5(input_dim: usize) -> Self {
        let widths = [512, 512, 512, 512, 1500];
        let layers = Self::TDNN5_CONTEXTS
            .iter()
            .zip(widths)
            .map(|(&(k, d), w)| TdnnLayerSpec::new(w, k, d))
            .collect();
        EncoderConfig {
            input_dim,
            layers,
            pooling_dim: 1500,
            aux_hidden: 256,
            isotropic: false,
            aux_tap: None,
        }
    }

    /// Three-layer trunk of width `pooling_dim` using the first three
    /// TDNN-5 contexts.
    pub fn desk(input_dim: usize, pooling_dim: usize, aux_hidden: usize) -> Self {
        let layers = Self::TDNN5_CONTEXTS[..3]
            .iter()
            .map(|&(k, d)| TdnnLayerSpec::new(pooling_dim, k, d))
            .collect();
        EncoderConfig {
            input_dim,
            layers,
            pooling_dim,
            aux_hidden,
            isotropic: false,
            aux_tap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.pooling_dim == 0 || self.aux_hidden == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        let Some(last) = self.layers.last() else {
            return Err(Error::Config("encoder needs at least one TDNN layer".into()));
        };
        if last.out_dim != self.pooling_dim {
            return Err(Error::Config(format!(
                "last TDNN layer has {} outputs but pooling dim is {}",
                last.out_dim, self.pooling_dim
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_dim == 0 || l.kernel == 0 || l.dilation == 0 {
                return Err(Error::Config(format!("TDNN layer {i} has a zero field")));
            }
        }
        if let Some(tap) = self.aux_tap {
            if tap >= self.layers.len() {
                return Err(Error::Config(format!(
                    "aux tap {tap} beyond {} TDNN layers",
                    self.layers.len()
                )));
            }
        }
        Ok(())
    }

    pub fn tap_layer(&self) -> usize {
        self.aux_tap.unwrap_or(self.layers.len() - 1)
    }

    pub fn tap_dim(&self) -> usize {
        self.layers[self.tap_layer()].out_dim
    }

    /// Total receptive field on each side, in frames.
    pub fn half_context(&self) -> usize {
        self.layers.iter().map(TdnnLayerSpec::half_context).sum()
    }
}

/// Per-frame point estimates and their diagonal log-precisions.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `[T×D]`
    pub z: Tensor,
    /// `[T×D]`; under the isotropic head every column of a row is equal.
    pub log_precision: Tensor,
}

pub(crate) struct TrunkVars {
    pub outputs: Vec<Var>,
}

impl TrunkVars {
    pub fn last(&self) -> Var {
        *self.outputs.last().expect("non-empty trunk")
    }
}

pub(crate) fn check_input(cfg: &EncoderConfig, features: &Tensor, op: &'static str) -> Result<()> {
    let s = features.shape();
    if s.len() != 2 || s[1] != cfg.input_dim {
        return Err(Error::dim(
            op,
            format!("expected [T×{}] features, got {s:?}", cfg.input_dim),
        ));
    }
    if s[0] == 0 {
        return Err(Error::EmptyInput(op));
    }
    Ok(())
}

pub(crate) fn trunk_on(tape: &mut Tape, params: &ModelParams, vars: &[Var], x: Var) -> Result<TrunkVars> {
    let cfg = &params.config().encoder;
    let layout = params.layout();
    let mut h = x;
    let mut outputs = Vec::with_capacity(cfg.layers.len());
    for (spec, slot) in cfg.layers.iter().zip(&layout.tdnn) {
        let pre = tape.conv1d_dilated(h, vars[slot.weight], spec.dilation, vars[slot.bias])?;
        h = tape.relu(pre)?;
        outputs.push(h);
    }
    Ok(TrunkVars { outputs })
}

/// Uncertainty head: `2·log(softplus(fc2(relu(fc1(h)))))`.
pub(crate) fn aux_head_on(tape: &mut Tape, params: &ModelParams, vars: &[Var], feats: Var) -> Result<Var> {
    let cfg = &params.config().encoder;
    let [fc1, fc2] = params
        .layout()
        .aux
        .ok_or_else(|| Error::Config("model has no uncertainty head".into()))?;
    let hidden = tape.affine(feats, vars[fc1.weight], vars[fc1.bias])?;
    let hidden = tape.relu(hidden)?;
    let pre = tape.affine(hidden, vars[fc2.weight], vars[fc2.bias])?;
    let log_sp = tape.log_softplus(pre)?;
    let log_precision = tape.scale(log_sp, 2.0)?;
    if cfg.isotropic {
        tape.broadcast_cols(log_precision, cfg.pooling_dim)
    } else {
        Ok(log_precision)
    }
}

pub(crate) struct EncodedVars {
    pub z: Var,
    pub log_precision: Option<Var>,
}

/// Runs the trunk and, when the model has one, the uncertainty head.
pub(crate) fn encode_on(tape: &mut Tape, params: &ModelParams, vars: &[Var], x: Var) -> Result<EncodedVars> {
    let trunk = trunk_on(tape, params, vars, x)?;
    let z = trunk.last();
    let log_precision = if params.layout().aux.is_some() {
        let tap = trunk.outputs[params.config().encoder.tap_layer()];
        Some(aux_head_on(tape, params, vars, tap)?)
    } else {
        None
    };
    Ok(EncodedVars { z, log_precision })
}

/// Frame-level representation `[T×D]` produced by the TDNN stack.
pub fn tdnn_forward(x: &FrameSequence, params: &ModelParams) -> Result<Tensor> {
    check_input(&params.config().encoder, &x.features, "tdnn_forward")?;
    let mut tape = Tape::new();
    let vars = params.bind_constants(&mut tape)?;
    let input = tape.constant(x.features.clone())?;
    let trunk = trunk_on(&mut tape, params, &vars, input)?;
    Ok(tape.value(trunk.last()).clone())
}

/// Log-precisions `[T×D]` from the tapped trunk features.
pub fn aux_head_forward(frame_feats: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let cfg = &params.config().encoder;
    if frame_feats.shape().len() != 2 || frame_feats.cols() != cfg.tap_dim() {
        return Err(Error::dim(
            "aux_head_forward",
            format!("expected [T×{}], got {:?}", cfg.tap_dim(), frame_feats.shape()),
        ));
    }
    let mut tape = Tape::new();
    let vars = params.bind_constants(&mut tape)?;
    let feats = tape.constant(frame_feats.clone())?;
    let out = aux_head_on(&mut tape, params, &vars, feats)?;
    Ok(tape.value(out).clone())
}

pub fn encode(x: &FrameSequence, params: &ModelParams) -> Result<EncoderOutput> {
    check_input(&params.config().encoder, &x.features, "encode")?;
    if params.layout().aux.is_none() {
        return Err(Error::Config(
            "statistics-pooling model has no uncertainty head to encode with".into(),
        ));
    }
    let mut tape = Tape::new();
    let vars = params.bind_constants(&mut tape)?;
    let input = tape.constant(x.features.clone())?;
    let enc = encode_on(&mut tape, params, &vars, input)?;
    Ok(EncoderOutput {
        z: tape.value(enc.z).clone(),
        log_precision: tape.value(enc.log_precision.expect("aux head")).clone(),
    })
}
