pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod dialogue;
pub mod encoder;
pub mod entmax;
pub mod error;
pub mod eval;
pub mod gcn;
pub mod gradcheck;
pub mod inducer;
pub mod kuma;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tagger;
pub mod train;

pub use autograd::{AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor, Var};
pub use error::{Error, Result};
