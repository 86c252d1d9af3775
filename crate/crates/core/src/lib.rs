//! Soft-alignment training objectives for sequence-to-sequence domain
//! adaptation, at desk scale.
//!
//! The crate covers the full experimental pipeline: synthetic multi-domain
//! parallel corpora ([`corpus`]), span-reporting subword tokenizers
//! ([`tokenizer`]), frozen grounding embeddings with decontextualization
//! ([`grounding`]), span matching and alignment-based target construction
//! ([`align`]), a differentiable encoder-decoder model with reverse-mode
//! gradients ([`model`]), the objective family ([`objectives`]), the
//! adaptation loop ([`trainer`]), BLEU evaluation and robustness reporting
//! ([`eval`]), and the experiment harness ([`harness`]).

pub mod align;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod grounding;
pub mod harness;
mod kv;
pub mod model;
pub mod objectives;
pub mod tape;
pub mod tokenizer;
pub mod trainer;


pub use corpus::{CorpusSplits, DomainSpec, SentencePair};
pub use error::{Error, Result};
pub use grounding::{ContextualEncoder, EmbeddingVector, GroundingTable, Provenance};



pub use tokenizer::{Subword, Vocabulary};

