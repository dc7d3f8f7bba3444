//! Prototype-guided structured radiology reporting at desk scale.
//!
//! The pipeline mines template-aligned labels from free-text reports, pools
//! image embeddings of mined exemplars into one prototype per answer option,
//! and trains a hierarchical question-answering model whose logits receive a
//! learned residual computed from retrieved prototypes.

pub mod backbone;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod head;
pub mod knowledge_base;
pub mod model;
pub mod experiment;
pub mod nn;
pub mod pipeline;
pub mod remote;
pub mod synth;
pub mod template;
pub mod terminology;
pub mod train;

pub use error::{Error, Result};
