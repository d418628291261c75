//! Model configuration and the flat parameter store θ.
//!
//! Every trainable tensor (trunk kernels, uncertainty head, prior, decoder)
//! lives in one ordered list so that gradients, SGD updates, finite
//! difference checks and checkpoints can treat θ uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pooling::{Pooling, PriorParams, PriorVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pooling: Pooling,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, pooling: Pooling, decoder: DecoderConfig) -> Result<Self> {
        let cfg = ModelConfig {
            encoder,
            pooling,
            decoder,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Desk-scale model: three TDNN layers of width `pooling_dim`, an
    /// uncertainty head of `aux_hidden` units and a single embedding layer.
    pub fn desk(
        input_dim: usize,
        pooling_dim: usize,
        aux_hidden: usize,
        embedding_dim: usize,
        num_speakers: usize,
        pooling: Pooling,
    ) -> Result<Self> {
        let mut encoder = EncoderConfig::desk(input_dim, pooling_dim, aux_hidden);
        encoder.isotropic = pooling.isotropic();
        let decoder = DecoderConfig::new(pooling.output_dim(pooling_dim), embedding_dim, vec![], num_speakers);
        Self::new(encoder, pooling, decoder)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let expected = self.pooling.output_dim(self.encoder.pooling_dim);
        if self.decoder.input_dim != expected {
            return Err(Error::Config(format!(
                "{} pooling emits {expected} values but decoder expects {}",
                self.pooling, self.decoder.input_dim
            )));
        }
        if self.encoder.isotropic != self.pooling.isotropic() {
            return Err(Error::Config(format!(
                "encoder isotropic flag ({}) disagrees with {} pooling",
                self.encoder.isotropic, self.pooling
            )));
        }
        Ok(())
    }
}

/// Indices of a weight/bias pair in the parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorSlot {
    pub mean: usize,
    pub log_precision: usize,
}

/// Where each named tensor sits in the flat parameter list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tdnn: Vec<LayerSlot>,
    pub aux: Option<[LayerSlot; 2]>,
    pub prior: Option<PriorSlot>,
    pub decoder: Vec<LayerSlot>,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    fan_in: Vec<usize>,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut b = LayoutBuilder::default();
        let enc = &cfg.encoder;

        let mut in_dim = enc.input_dim;
        let tdnn = enc
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let slot = b.layer(
                    &format!("encoder.tdnn{i}"),
                    vec![l.kernel, in_dim, l.out_dim],
                    l.kernel * in_dim,
                );
                in_dim = l.out_dim;
                slot
            })
            .collect();

        let aux = cfg.pooling.has_uncertainty_head().then(|| {
            let out = if enc.isotropic { 1 } else { enc.pooling_dim };
            let fc1 = b.layer("encoder.aux_fc1", vec![enc.tap_dim(), enc.aux_hidden], enc.tap_dim());
            let fc2 = b.layer("encoder.aux_fc2", vec![enc.aux_hidden, out], enc.aux_hidden);
            [fc1, fc2]
        });

        let prior = cfg.pooling.uses_prior().then(|| PriorSlot {
            mean: b.push("prior.mean", vec![enc.pooling_dim], 0),
            log_precision: b.push("prior.log_precision", vec![enc.pooling_dim], 0),
        });

        let dec = &cfg.decoder;
        let mut widths = vec![dec.input_dim, dec.embedding_dim];
        widths.extend(&dec.hidden_dims);
        widths.push(dec.num_speakers);
        let decoder = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let name = match i {
                    0 => "decoder.embedding".to_string(),
                    i if i == widths.len() - 2 => "decoder.output".to_string(),
                    i => format!("decoder.hidden{i}"),
                };
                b.layer(&name, vec![w[0], w[1]], w[0])
            })
            .collect();

        ParamLayout {
            tdnn,
            aux,
            prior,
            decoder,
            names: b.names,
            shapes: b.shapes,
            fan_in: b.fan_in,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Default)]
struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    fan_in: Vec<usize>,
}

impl LayoutBuilder {
    fn push(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> usize {
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.fan_in.push(fan_in);
        self.names.len() - 1
    }

    fn layer(&mut self, prefix: &str, weight_shape: Vec<usize>, fan_in: usize) -> LayerSlot {
        let out = *weight_shape.last().expect("weight has dims");
        LayerSlot {
            weight: self.push(&format!("{prefix}.weight"), weight_shape, fan_in),
            bias: self.push(&format!("{prefix}.bias"), vec![out], 0),
        }
    }
}

/// The full parameter set θ: network weights plus the pooling prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: ParamLayout,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Weights uniform in `±sqrt(6 / fan_in)`, biases and the prior at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .shapes
            .iter()
            .zip(&layout.fan_in)
            .map(|(shape, &fan_in)| {
                let mut t = Tensor::zeros(shape);
                if fan_in > 0 {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    t.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.random_range(-bound..bound));
                }
                t
            })
            .collect();
        ModelParams {
            config,
            layout,
            tensors,
        }
    }

    /// Reassembles parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if named.len() != layout.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want_name, want_shape)) in named.into_iter().zip(layout.names.iter().zip(&layout.shapes)) {
            if &name != want_name {
                return Err(Error::Checkpoint {
                    section: name,
                    message: format!("expected section `{want_name}`"),
                });
            }
            if t.shape() != want_shape.as_slice() {
                return Err(Error::Checkpoint {
                    section: name,
                    message: format!("shape {:?} does not match {want_shape:?}", t.shape()),
                });
            }
            tensors.push(t);
        }
        Ok(ModelParams {
            config,
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.layout.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn prior(&self) -> Option<PriorParams> {
        self.layout.prior.map(|slot| PriorParams {
            mean: self.tensors[slot.mean].clone(),
            log_precision: self.tensors[slot.log_precision].clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Places θ on the tape as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| tape.variable(t.clone())).collect()
    }

    /// Places θ on the tape as constants (inference only).
    pub fn bind_constants(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    pub(crate) fn prior_vars(&self, tape: &mut Tape, vars: &[Var]) -> Result<Option<PriorVars>> {
        let Some(slot) = self.layout.prior else {
            return Ok(None);
        };
        let d = self.config.encoder.pooling_dim;
        Ok(Some(PriorVars {
            mean: tape.reshape(vars[slot.mean], &[1, d])?,
            log_precision: tape.reshape(vars[slot.log_precision], &[1, d])?,
        }))
    }

    /// Collects `∂loss/∂θ` after [`Tape::backward`].
    pub fn collect_grads(&self, tape: &mut Tape, vars: &[Var]) -> Gradients {
        Gradients(
            vars.iter()
                .zip(&self.tensors)
                .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
                .collect(),
        )
    }
}

/// Gradient of a scalar loss with respect to every tensor of θ, in layout
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients(params.tensors.iter().map(|t| vec![0.0; t.len()]).collect())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (acc, g) in self.0.iter_mut().zip(&other.0) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += scale * v;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}
