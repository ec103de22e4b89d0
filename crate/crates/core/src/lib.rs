//! Graph collaborative filtering with rerank-vote augmentation.
//!
//! The crate covers the whole offline pipeline:
//!
//! * [`data`]: interaction logs, item catalogs, leave-one-out splits and the
//!   on-disk formats for embeddings and synthesized edges.
//! * [`graph`]: the bipartite user/item graph, its symmetric normalized
//!   adjacency, low-degree user selection and augmented-graph merging.
//! * [`embedding`]: LightGCN-style linear propagation, layer pooling, scoring
//!   and retrieval.
//! * [`train`]: BPR and two-view InfoNCE objectives with analytic gradients,
//!   Adam, and the vanilla / contrastive training loops.
//! * [`ensemble`]: reciprocal-rank vote aggregation, the concentration bound
//!   and a Mallows permutation simulator for checking it.
//! * [`rerank`]: prompt construction, output parsing and reranking backends.
//! * [`augment`]: the per-user augmentation pipeline.
//! * [`eval`]: Recall / NDCG / APLT under leave-one-out evaluation.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Results are
//! identical either way.

pub mod augment;
pub mod data;
pub mod embedding;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod graph;
pub mod par;
pub mod rerank;
pub mod train;

pub use error::{Error, Result};
