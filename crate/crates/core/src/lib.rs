//! GMM-free flat-start training for hybrid HMM/DNN acoustic models.
//!
//! A randomly initialized network is trained straight from phone-level
//! transcripts, either by iterated cross-entropy training and realignment or
//! by a modified MMI criterion whose numerator occupancies come from
//! forward-backward over the transcript graph and whose denominator is the
//! best path through a free phone loop. Context-dependent tied states are
//! then grown with a KL-divergence decision tree over the network's
//! posteriors.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod dnn;
pub mod error;
pub mod exec;
pub mod flatstart;
pub mod hmm;
pub mod numerics;
pub mod statetying;
pub mod training;

pub use error::{Error, Result};
