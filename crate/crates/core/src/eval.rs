//! Top-K accuracy and long-tail metrics under leave-one-out evaluation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embedding::{rank_items, score_items, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::graph::InteractionGraph;
use crate::par;

/// Recommended items per user, best first.
pub type Recommendations = BTreeMap<usize, Vec<usize>>;

/// Held-out item per evaluated user.
pub type Truth = BTreeMap<usize, usize>;

/// Default cutoffs.
pub const DEFAULT_CUTOFFS: [usize; 2] = [10, 20];

/// Share of items counted as the popular head.
pub const HEAD_SHARE: f64 = 0.2;

fn mean_over_truth(truth: &Truth, per_user: impl Fn(usize, usize) -> f64) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().map(|(&u, &i)| per_user(u, i)).sum::<f64>() / truth.len() as f64
}

fn top(recs: &Recommendations, user: usize, k: usize) -> &[usize] {
    recs.get(&user).map_or(&[], |l| &l[..l.len().min(k)])
}

pub fn recall_at_k(recs: &Recommendations, truth: &Truth, k: usize) -> f64 {
    mean_over_truth(truth, |u, i| f64::from(u8::from(top(recs, u, k).contains(&i))))
}

/// With one relevant item the ideal DCG is 1, so this is `1 / log2(pos + 1)`
/// at the item's 1-based position.
pub fn ndcg_at_k(recs: &Recommendations, truth: &Truth, k: usize) -> f64 {
    mean_over_truth(truth, |u, i| {
        top(recs, u, k)
            .iter()
            .position(|&x| x == i)
            .map_or(0.0, |p| 1.0 / ((p + 2) as f64).log2())
    })
}

/// Items outside the most popular `ceil(HEAD_SHARE * n_items)` by train
/// degree (ties to the lower index).
pub fn long_tail_set(graph: &InteractionGraph) -> BTreeSet<usize> {
    let n = graph.n_items();
    let head = ((HEAD_SHARE * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut items: Vec<usize> = (0..n).collect();
    items.sort_by(|&a, &b| {
        graph
            .item_degree(b)
            .cmp(&graph.item_degree(a))
            .then(a.cmp(&b))
    });
    items.into_iter().skip(head).collect()
}

/// Mean share of long-tail items in each evaluated user's list; an empty
/// list counts as 0.
pub fn aplt_at_k(recs: &Recommendations, tail: &BTreeSet<usize>, truth: &Truth, k: usize) -> f64 {
    mean_over_truth(truth, |u, _| {
        let list = top(recs, u, k);
        if list.is_empty() {
            return 0.0;
        }
        list.iter().filter(|i| tail.contains(i)).count() as f64 / list.len() as f64
    })
}

/// Top-`k` unseen items for each user in `users`.
pub fn recommend(
    e: &EmbeddingMatrix,
    graph: &InteractionGraph,
    users: &[usize],
    k: usize,
) -> Result<Recommendations> {
    let layout = graph.layout();
    if e.rows() != layout.n_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "embedding has {} rows, graph has {} nodes",
            e.rows(),
            layout.n_nodes()
        )));
    }
    if let Some(&u) = users.iter().find(|&&u| u >= layout.n_users) {
        return Err(Error::IndexOutOfRange {
            what: "user",
            index: u,
            len: layout.n_users,
        });
    }
    let lists = par::map_slice(users, |&u| {
        rank_items(&score_items(e, layout, u), graph.items_of(u), k)
    });
    Ok(users.iter().copied().zip(lists).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub recall: f64,
    pub ndcg: f64,
    pub aplt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cutoffs: BTreeMap<usize, CutoffMetrics>,
    pub n_eval_users: usize,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.cutoffs.get(&k)
    }
}

/// Scores every user in `truth` against all items, excluding their train
/// items, and reports each metric at each cutoff.
pub fn evaluate(
    e: &EmbeddingMatrix,
    truth: &Truth,
    graph: &InteractionGraph,
    cutoffs: &[usize],
) -> Result<EvalReport> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::InvalidParameter("cutoffs must be positive".into()));
    }
    let users: Vec<usize> = truth.keys().copied().collect();
    let max_k = *cutoffs.iter().max().expect("nonempty");
    let recs = recommend(e, graph, &users, max_k)?;
    let tail = long_tail_set(graph);
    let cutoffs = cutoffs
        .iter()
        .map(|&k| {
            let m = CutoffMetrics {
                recall: recall_at_k(&recs, truth, k),
                ndcg: ndcg_at_k(&recs, truth, k),
                aplt: aplt_at_k(&recs, &tail, truth, k),
            };
            (k, m)
        })
        .collect();
    Ok(EvalReport {
        cutoffs,
        n_eval_users: truth.len(),
    })
}
