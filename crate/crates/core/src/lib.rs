//! Deep conditional random fields for word recognition.
//!
//! A stack of logistic layers, initialized by greedy RBM pretraining, maps each
//! character frame to a latent feature vector; a first-order linear-chain CRF
//! labels the sequence of features. Training is online: structured perceptron
//! steps for the CRF and L1-regularized SGD for the encoder.

pub mod cli;
pub mod container;
pub mod crf;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod math;
pub mod rbm;
pub mod trainer;

pub use container::ModelContainer;
pub use crf::{ChainMarginals, CrfGradients, CrfParams, DecodeResult, PairwiseMode};
pub use data::{Dataset, LabelAlphabet, LabeledSequence, WordImage};
pub use encoder::{EncoderStack, ForwardTrace, Layer, LayerGrad};
pub use error::{Error, Result};
pub use eval::{EvalReport, ModelTag};
pub use rbm::{PretrainConfig, Rbm};
pub use trainer::{DeepCrfModel, TrainConfig};
