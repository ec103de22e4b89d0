//! Per-user augmentation: retrieve candidates, collect several rerankings,
//! fuse them, and keep the best `p` items as new interactions.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentedEdge, AugmentedEdgeSet, Catalog, IdTable, Interaction, InteractionLog};
use crate::embedding::{similar_users, top_k_candidates, EmbeddingMatrix};
use crate::ensemble::{aggregate_order, rrf_scores, Permutation};
use crate::error::{Error, Result};
use crate::graph::{low_degree_users, InteractionGraph};
use crate::par;
use crate::rerank::{
    rerank_once, CandidateEntry, FewShotExample, HistoryEntry, RerankBackend, RerankRequest,
};

/// Rated items of the similar user shown as the example's answer.
pub const FEWSHOT_ANSWER_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Users at or below this degree quantile are augmented.
    pub quantile: f64,
    /// Candidates retrieved per user.
    pub k: usize,
    /// Independent rerankings per user.
    pub votes: usize,
    /// Edges kept per user.
    pub p: usize,
    pub parallelism: usize,
    pub few_shot: bool,
    pub reasoning: bool,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            quantile: 0.25,
            k: 10,
            votes: 8,
            p: 1,
            parallelism: 4,
            few_shot: true,
            reasoning: true,
            seed: 2024,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "quantile must be in (0, 1], got {}",
                self.quantile
            )));
        }
        if self.k == 0 || self.votes == 0 || self.p == 0 || self.p > self.k {
            return Err(Error::InvalidParameter(format!(
                "need k, votes, p >= 1 and p <= k (k={}, votes={}, p={})",
                self.k, self.votes, self.p
            )));
        }
        Ok(())
    }

    /// Successful rerankings required before a user gets edges.
    pub fn quorum(&self) -> usize {
        self.votes.div_ceil(2)
    }
}

/// Read-only inputs shared by every user.
#[derive(Debug)]
pub struct AugmentContext<'a> {
    pub graph: &'a InteractionGraph,
    pub retrieval: &'a EmbeddingMatrix,
    pub ids: &'a IdTable,
    pub catalog: &'a Catalog,
    histories: Vec<Vec<Interaction>>,
}

impl<'a> AugmentContext<'a> {
    /// `train` must be the log `graph` was built from.
    pub fn new(
        graph: &'a InteractionGraph,
        retrieval: &'a EmbeddingMatrix,
        train: &'a InteractionLog,
        catalog: &'a Catalog,
    ) -> Result<Self> {
        if retrieval.rows() != graph.layout().n_nodes() {
            return Err(Error::ShapeMismatch(format!(
                "retrieval embeddings have {} rows, graph has {} nodes",
                retrieval.rows(),
                graph.layout().n_nodes()
            )));
        }
        let mut histories = train.user_histories();
        histories.resize(graph.n_users(), Vec::new());
        Ok(Self {
            graph,
            retrieval,
            ids: &train.ids,
            catalog,
            histories,
        })
    }

    pub fn history(&self, user: usize) -> &[Interaction] {
        &self.histories[user]
    }

    fn entry(&self, item: usize) -> Result<&crate::data::CatalogEntry> {
        self.catalog.require(self.ids.item_id(item))
    }

    fn history_entries(&self, records: &[Interaction]) -> Result<Vec<HistoryEntry>> {
        records
            .iter()
            .map(|r| {
                let e = self.entry(r.item)?;
                Ok(HistoryEntry {
                    title: e.title.clone(),
                    year: e.year,
                    genres: e.genres.clone(),
                    rating: r.rating,
                })
            })
            .collect()
    }

    /// Top-1 similar user's history with their last few items, best rated
    /// first, as the answer. `None` when that user has too little history.
    fn fewshot(&self, user: usize) -> Result<Option<FewShotExample>> {
        let layout = self.graph.layout();
        let Some(&(similar, _)) = similar_users(self.retrieval, layout, user, 1)?.first() else {
            return Ok(None);
        };
        let records = self.history(similar);
        if records.len() <= FEWSHOT_ANSWER_LEN {
            log::debug!("user {user}: similar user {similar} too sparse, using zero-shot");
            return Ok(None);
        }
        let split = records.len() - FEWSHOT_ANSWER_LEN;
        let mut answer = records[split..].to_vec();
        answer.sort_by(|a, b| b.rating.total_cmp(&a.rating));
        Ok(Some(FewShotExample {
            history: self.history_entries(&records[..split])?,
            rated: self.history_entries(&answer)?,
        }))
    }

    /// The reranking request for `user` over `candidates`.
    pub fn request(&self, user: usize, candidates: &[usize], cfg: &AugmentationConfig) -> Result<RerankRequest> {
        let candidates = candidates
            .iter()
            .map(|&item| {
                let e = self.entry(item)?;
                Ok(CandidateEntry {
                    item,
                    title: e.title.clone(),
                    year: e.year,
                    genres: e.genres.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RerankRequest {
            user,
            history: self.history_entries(self.history(user))?,
            candidates,
            fewshot: if cfg.few_shot { self.fewshot(user)? } else { None },
            reasoning: cfg.reasoning,
        })
    }
}

/// Result for one augmented user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserAugmentation {
    pub user: usize,
    pub edges: Vec<AugmentedEdge>,
    /// Every candidate item, fused order, best first.
    pub ranking: Vec<usize>,
    pub successes: usize,
}

fn user_seed(seed: u64, user: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Augments one user. `Err` carries the reason the user was skipped.
pub fn augment_user(
    ctx: &AugmentContext<'_>,
    user: usize,
    cfg: &AugmentationConfig,
    backend: &RerankBackend,
) -> std::result::Result<UserAugmentation, String> {
    let candidates = top_k_candidates(ctx.retrieval, ctx.graph, user, cfg.k)
        .map_err(|e| e.to_string())?
        .items;
    if candidates.is_empty() {
        return Err("no eligible candidates".into());
    }
    let req = ctx.request(user, &candidates, cfg).map_err(|e| e.to_string())?;

    let seed = user_seed(cfg.seed, user);
    let outcomes: Vec<Result<Permutation>> = par::map_indices(cfg.votes, |vote| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(vote as u64);
        rerank_once(backend, &req, &mut rng)
    });
    let mut perms = Vec::with_capacity(cfg.votes);
    let mut last_error = None;
    for outcome in outcomes {
        match outcome {
            Ok(p) => perms.push(p),
            Err(e) => {
                log::debug!("user {user}: rerank failed: {e}");
                last_error = Some(e);
            }
        }
    }
    if perms.len() < cfg.quorum() {
        let why = last_error.map_or_else(String::new, |e| format!(": {e}"));
        return Err(format!(
            "only {} of {} rerankings succeeded{why}",
            perms.len(),
            cfg.votes
        ));
    }

    let scores = rrf_scores(&perms).map_err(|e| e.to_string())?;
    let retrieval_order: Vec<usize> = (0..candidates.len()).collect();
    let fused = aggregate_order(&scores, &retrieval_order).map_err(|e| e.to_string())?;
    let edges = fused
        .iter()
        .take(cfg.p)
        .map(|&slot| AugmentedEdge {
            user,
            item: candidates[slot],
            rrf_score: scores.get(slot) as f32,
            votes: perms.len() as u32,
        })
        .collect();
    Ok(UserAugmentation {
        user,
        edges,
        ranking: fused.iter().map(|&s| candidates[s]).collect(),
        successes: perms.len(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct AugmentationOutcome {
    pub edges: AugmentedEdgeSet,
    /// Skipped users with the reason, by user index.
    pub skipped: Vec<(usize, String)>,
    /// Fused candidate ranking per augmented user.
    pub rankings: BTreeMap<usize, Vec<usize>>,
    pub targets: usize,
}

/// Augments every user in the configured low-degree quantile.
pub fn run_augmentation(
    ctx: &AugmentContext<'_>,
    cfg: &AugmentationConfig,
    backend: &RerankBackend,
) -> Result<AugmentationOutcome> {
    cfg.validate()?;
    let targets: Vec<usize> = low_degree_users(ctx.graph, cfg.quantile)?.into_iter().collect();
    log::info!("augmenting {} users", targets.len());
    let results = par::with_parallelism(cfg.parallelism, || {
        par::map_slice(&targets, |&u| augment_user(ctx, u, cfg, backend))
    });
    let mut out = AugmentationOutcome {
        targets: targets.len(),
        ..Default::default()
    };
    let mut edges = Vec::new();
    for (&user, result) in targets.iter().zip(results) {
        match result {
            Ok(aug) => {
                edges.extend(aug.edges);
                out.rankings.insert(user, aug.ranking);
            }
            Err(reason) => {
                log::warn!("skipping user {}: {reason}", ctx.ids.user_id(user));
                out.skipped.push((user, reason));
            }
        }
    }
    out.edges = AugmentedEdgeSet::new(edges);
    Ok(out)
}
