//! Knowledge-replay fine-tuning for a miniature vision-language captioner.
//!
//! The crate generates synthetic concept corpora, trains a small
//! encoder-decoder captioner in three phases (concept-rich pretraining,
//! generic fine-tuning, and fine-tuning with knowledge replay against a frozen
//! teacher), and scores captions with BLEU, ROUGE-L, CIDEr-D and keyword
//! recognition accuracy.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
