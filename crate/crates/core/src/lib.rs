//! Legal case matching and retrieval with law-article-aware interaction.
//!
//! The model pairs a sentence-level semantic interaction branch with a legal
//! branch driven by an auxiliary applicable-article prediction task. Candidate
//! side tensors can be precomputed so re-ranking only runs the cheap
//! cross-case interaction per query.

pub mod autograd;
pub mod bim;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod export;
pub mod heads;
pub mod lim;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod verification;

pub use config::{EvalConfig, LossConfig, ModelConfig, RunConfig, Task, Variant};
pub use data::{Case, CasePair, Corpus, LawArticle, RankingQuery};
pub use error::{Error, Result};
