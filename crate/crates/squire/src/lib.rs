//! Sequence-to-sequence multi-hop knowledge graph reasoning.
//!
//! The pipeline turns a knowledge graph given as triple files into a trained
//! path generator and a filtered link-prediction report:
//!
//! 1. [`kg`] loads triples, builds the token vocabulary (entities, relations
//!    and their inverses, specials) and the train-edge adjacency index.
//! 2. [`rules`] mines compositional chain rules with exact confidence scores
//!    and instantiates rule bodies into evidential paths.
//! 3. [`sampler`] builds query/path training pairs per triple: rule-guided
//!    first, random-sampled next, single-hop fallback last, plus entity-token
//!    masking.
//! 4. [`nn`] is a small dense-tensor engine with reverse-mode gradients, Adam
//!    and a warmup/decay learning-rate schedule.
//! 5. [`model`] is the masked Transformer encoder that maps (query, path
//!    prefix) to a next-token distribution through a tied embedding matrix.
//! 6. [`trainer`] runs the training loop and the iterative data-aggregation
//!    strategy that re-grows the training set from the model's own prefixes.
//! 7. [`decode`] generates paths by grammar-constrained beam search and ranks
//!    tail entities by max-score or self-consistency.
//! 8. [`eval`] computes filtered MRR / Hits@N and the edge-constraint report.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod error;
pub mod eval;
pub mod kg;
pub mod model;
pub mod nn;
pub mod rng;
pub mod rules;
pub mod sampler;
pub mod trainer;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
