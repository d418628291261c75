//! Speaker embeddings that pool frame-level representations as a Gaussian
//! posterior, weighting each frame by its predicted precision.
//!
//! The crate carries its own small reverse-mode autodiff ([`tape`]), a TDNN
//! encoder with an uncertainty head ([`encoder`]), statistics and posterior
//! pooling ([`pooling`]), a classification decoder trained with minibatch
//! SGD ([`decoder`], [`train`]), file formats and a synthetic corpus
//! generator ([`data`]), and cosine scoring with EER/MinDCF ([`eval`]).
//!
//! ```
//! use xivector::data::FrameSequence;
//! use xivector::model::{ModelConfig, ModelParams};
//! use xivector::pooling::Pooling;
//! use xivector::tensor::Tensor;
//!
//! let cfg = ModelConfig::desk(4, 8, 6, 5, 3, Pooling::XIVECTOR).unwrap();
//! let params = ModelParams::init(cfg, 7);
//! let x = FrameSequence::new("utt", None, Tensor::filled(&[12, 4], 0.5));
//! let e = xivector::decoder::extract_embedding(&x, &params).unwrap();
//! assert_eq!(e.len(), 5);
//! ```

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod par;
pub mod pooling;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};
pub use par::Exec;
pub use pooling::Pooling;
pub use tensor::Tensor;
