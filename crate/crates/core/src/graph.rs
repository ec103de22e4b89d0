//! Bipartite interaction graph and its normalized adjacency.
//!
//! Node layout is fixed: users occupy `[0, n_users)` and items
//! `[n_users, n_users + n_items)`.

use std::collections::BTreeSet;
use std::hash::{Hash, Hasher};

use crate::data::{AugmentedEdgeSet, InteractionLog};
use crate::error::{Error, Result};

/// Sizes of the user and item blocks of the node index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeLayout {
    pub n_users: usize,
    pub n_items: usize,
}

impl NodeLayout {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn user_node(&self, user: usize) -> usize {
        user
    }

    pub fn item_node(&self, item: usize) -> usize {
        self.n_users + item
    }
}

/// Unweighted bipartite graph with sorted adjacency lists on both sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionGraph {
    n_users: usize,
    n_items: usize,
    user_items: Vec<Vec<usize>>,
    item_users: Vec<Vec<usize>>,
    n_edges: usize,
}

impl InteractionGraph {
    /// One edge per unique (user, item) pair of the log. Sizes come from the
    /// log's id table so indices agree with every other artifact.
    pub fn from_log(log: &InteractionLog) -> Self {
        Self::from_edges(
            log.ids.n_users(),
            log.ids.n_items(),
            log.records.iter().map(|r| (r.user, r.item)),
        )
    }

    /// Builds a graph from (user, item) pairs; duplicates collapse.
    ///
    /// Panics if an index is out of range.
    pub fn from_edges(
        n_users: usize,
        n_items: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Self {
        let mut user_items = vec![Vec::new(); n_users];
        for (u, i) in edges {
            assert!(u < n_users && i < n_items, "edge ({u}, {i}) out of range");
            user_items[u].push(i);
        }
        let mut item_users = vec![Vec::new(); n_items];
        let mut n_edges = 0;
        for (u, items) in user_items.iter_mut().enumerate() {
            items.sort_unstable();
            items.dedup();
            n_edges += items.len();
            for &i in items.iter() {
                item_users[i].push(u);
            }
        }
        Self {
            n_users,
            n_items,
            user_items,
            item_users,
            n_edges,
        }
    }

    pub fn layout(&self) -> NodeLayout {
        NodeLayout {
            n_users: self.n_users,
            n_items: self.n_items,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn user_degree(&self, user: usize) -> usize {
        self.user_items[user].len()
    }

    pub fn item_degree(&self, item: usize) -> usize {
        self.item_users[item].len()
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        self.user_items.iter().map(Vec::len).collect()
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        self.item_users.iter().map(Vec::len).collect()
    }

    /// Items of `user`, ascending.
    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.user_items[user]
    }

    /// Users of `item`, ascending.
    pub fn users_of(&self, item: usize) -> &[usize] {
        &self.item_users[item]
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        self.user_items
            .get(user)
            .is_some_and(|items| items.binary_search(&item).is_ok())
    }

    /// All edges ordered by (user, item).
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }

    pub fn normalized_adjacency(&self) -> NormalizedAdjacency {
        NormalizedAdjacency::from_graph(self)
    }
}

/// Symmetric normalized adjacency `D^-1/2 A D^-1/2` in CSR form, without
/// self-loops. Entry (u, i) is `1 / sqrt(deg(u) * deg(i))`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    layout: NodeLayout,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f32>,
    fingerprint: u64,
}

impl NormalizedAdjacency {
    pub fn from_graph(graph: &InteractionGraph) -> Self {
        let layout = graph.layout();
        let n = layout.n_nodes();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(2 * graph.n_edges());
        let mut values = Vec::with_capacity(2 * graph.n_edges());
        row_ptr.push(0);
        let weight = |du: usize, di: usize| (1.0 / ((du as f64) * (di as f64)).sqrt()) as f32;
        for u in 0..graph.n_users() {
            let du = graph.user_degree(u);
            for &i in graph.items_of(u) {
                col_idx.push(layout.item_node(i));
                values.push(weight(du, graph.item_degree(i)));
            }
            row_ptr.push(col_idx.len());
        }
        for i in 0..graph.n_items() {
            let di = graph.item_degree(i);
            for &u in graph.users_of(i) {
                col_idx.push(layout.user_node(u));
                values.push(weight(graph.user_degree(u), di));
            }
            row_ptr.push(col_idx.len());
        }
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        layout.n_users.hash(&mut hasher);
        layout.n_items.hash(&mut hasher);
        col_idx.hash(&mut hasher);
        row_ptr.hash(&mut hasher);
        Self {
            layout,
            row_ptr,
            col_idx,
            values,
            fingerprint: hasher.finish(),
        }
    }

    pub fn layout(&self) -> NodeLayout {
        self.layout
    }

    pub fn n_nodes(&self) -> usize {
        self.layout.n_nodes()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Structural identity of the underlying graph.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Column indices and values of `row`, columns ascending.
    pub fn row(&self, row: usize) -> (&[usize], &[f32]) {
        let span = self.row_ptr[row]..self.row_ptr[row + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    /// Entry lookup; zero where there is no edge.
    pub fn get(&self, row: usize, col: usize) -> f32 {
        let (cols, vals) = self.row(row);
        cols.binary_search(&col).map(|k| vals[k]).unwrap_or(0.0)
    }

    /// Dense copy, for tests and small graphs.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n_nodes();
        let mut dense = vec![vec![0.0; n]; n];
        for (r, row) in dense.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c] = v as f64;
            }
        }
        dense
    }

    /// `out = self * x` for row-major `x` with `dim` columns. Each output row
    /// accumulates its neighbours in ascending column order.
    pub fn spmm(&self, x: &[f32], dim: usize, out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.n_nodes() * dim);
        debug_assert_eq!(out.len(), self.n_nodes() * dim);
        crate::par::for_each_row_mut(out, dim, |r, dst| {
            dst.iter_mut().for_each(|v| *v = 0.0);
            let (cols, vals) = self.row(r);
            for (&c, &w) in cols.iter().zip(vals) {
                let src = &x[c * dim..(c + 1) * dim];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        });
    }
}

/// Users whose degree is at most the nearest-rank `quantile` of the user
/// degree multiset. Ties at the threshold are included.
pub fn low_degree_users(graph: &InteractionGraph, quantile: f64) -> Result<BTreeSet<usize>> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "quantile must be in (0, 1], got {quantile}"
        )));
    }
    let n = graph.n_users();
    if n == 0 {
        return Err(Error::InvalidParameter("graph has no users".into()));
    }
    let mut degrees = graph.user_degrees();
    degrees.sort_unstable();
    // nearest rank, 1-indexed: ceil(q * n)
    let rank = ((quantile * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let threshold = degrees[rank - 1];
    Ok((0..n)
        .filter(|&u| graph.user_degree(u) <= threshold)
        .collect())
}

/// The original graph together with the synthesized edges merged into it.
#[derive(Debug, Clone)]
pub struct AugmentedGraph {
    pub base: InteractionGraph,
    pub new_edges: AugmentedEdgeSet,
    pub merged: InteractionGraph,
}

impl AugmentedGraph {
    pub fn adjacency(&self) -> NormalizedAdjacency {
        self.merged.normalized_adjacency()
    }
}

/// Merges `new_edges` into `graph`. Every new edge must be absent from the
/// graph and unique within the set.
pub fn merge_augmented(
    graph: &InteractionGraph,
    new_edges: &AugmentedEdgeSet,
) -> Result<AugmentedGraph> {
    let mut seen = BTreeSet::new();
    for e in &new_edges.edges {
        if e.user >= graph.n_users() {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: e.user,
                len: graph.n_users(),
            });
        }
        if e.item >= graph.n_items() {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: e.item,
                len: graph.n_items(),
            });
        }
        if graph.has_edge(e.user, e.item) || !seen.insert((e.user, e.item)) {
            return Err(Error::EdgeAlreadyObserved {
                user: e.user,
                item: e.item,
            });
        }
    }
    let merged = InteractionGraph::from_edges(
        graph.n_users(),
        graph.n_items(),
        graph
            .edges()
            .chain(new_edges.edges.iter().map(|e| (e.user, e.item))),
    );
    Ok(AugmentedGraph {
        base: graph.clone(),
        new_edges: new_edges.clone(),
        merged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AugmentedEdge, InteractionLog};
    use proptest::prelude::*;

    fn edge(user: usize, item: usize) -> AugmentedEdge {
        AugmentedEdge {
            user,
            item,
            rrf_score: 1.0,
            votes: 1,
        }
    }

    /// Graph whose users have exactly the given degrees over a large item set.
    fn graph_with_user_degrees(degrees: &[usize]) -> InteractionGraph {
        let n_items = degrees.iter().copied().max().unwrap_or(0).max(1);
        InteractionGraph::from_edges(
            degrees.len(),
            n_items,
            degrees
                .iter()
                .enumerate()
                .flat_map(|(u, &d)| (0..d).map(move |i| (u, i))),
        )
    }

    #[test]
    fn build_single_edge() {
        let log = InteractionLog::parse("u\ti\t4.0\t1\n").unwrap();
        let g = InteractionGraph::from_log(&log);
        assert_eq!(g.n_edges(), 1);
        assert_eq!(g.user_degrees(), vec![1]);
        assert_eq!(g.item_degrees(), vec![1]);
    }

    #[test]
    fn build_shared_item() {
        let log = InteractionLog::parse("u\ti\t4.0\t1\nv\ti\t4.0\t1\n").unwrap();
        let g = InteractionGraph::from_log(&log);
        assert_eq!(g.item_degrees(), vec![2]);
        assert_eq!(g.n_edges(), 2);
    }

    #[test]
    fn build_empty() {
        let g = InteractionGraph::from_edges(0, 0, std::iter::empty());
        assert_eq!(g.n_edges(), 0);
        assert_eq!(g.normalized_adjacency().nnz(), 0);
    }

    #[test]
    fn adjacency_single_edge_is_one() {
        let g = InteractionGraph::from_edges(1, 1, [(0, 0)]);
        let a = g.normalized_adjacency();
        assert_eq!(a.get(0, 1), 1.0);
        assert_eq!(a.get(1, 0), 1.0);
        assert_eq!(a.get(0, 0), 0.0);
    }

    #[test]
    fn adjacency_degree_two_item() {
        let g = InteractionGraph::from_edges(2, 1, [(0, 0), (1, 0)]);
        let a = g.normalized_adjacency();
        assert!((a.get(0, 2) as f64 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert!((a.get(2, 1) as f64 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
    }

    #[test]
    fn adjacency_isolated_user_row_empty() {
        let g = InteractionGraph::from_edges(2, 1, [(0, 0)]);
        let a = g.normalized_adjacency();
        assert!(a.row(1).0.is_empty());
        assert!(a.to_dense()[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn low_degree_nearest_rank() {
        let g = graph_with_user_degrees(&[1, 1, 2, 5, 8, 9, 10, 12]);
        // Brute force: sorted degrees, 1-indexed rank ceil(0.25 * 8) = 2.
        let mut sorted = g.user_degrees();
        sorted.sort();
        assert_eq!(sorted[1], 1);
        let picked = low_degree_users(&g, 0.25).unwrap();
        assert_eq!(picked.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn low_degree_ties_and_full_quantile() {
        let g = graph_with_user_degrees(&[3, 3, 3, 3]);
        for q in [0.01, 0.25, 0.5, 1.0] {
            assert_eq!(low_degree_users(&g, q).unwrap().len(), 4);
        }
        let g = graph_with_user_degrees(&[1, 4, 2, 9]);
        assert_eq!(low_degree_users(&g, 1.0).unwrap().len(), 4);
    }

    #[test]
    fn low_degree_rejects_bad_quantile() {
        let g = graph_with_user_degrees(&[1, 2]);
        for q in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(low_degree_users(&g, q).is_err());
        }
    }

    #[test]
    fn merge_empty_is_identity() {
        let g = InteractionGraph::from_edges(2, 2, [(0, 0), (1, 1)]);
        let aug = merge_augmented(&g, &AugmentedEdgeSet::default()).unwrap();
        assert_eq!(aug.adjacency(), g.normalized_adjacency());
    }

    #[test]
    fn merge_updates_normalization() {
        // u0-i0 existing, u1-i0 existing; add u0-i1 (fresh item).
        let g = InteractionGraph::from_edges(2, 2, [(0, 0), (1, 0)]);
        let aug = merge_augmented(&g, &AugmentedEdgeSet::new(vec![edge(0, 1)])).unwrap();
        assert_eq!(aug.merged.item_degree(1), 1);
        assert_eq!(aug.merged.user_degree(0), 2);
        let a = aug.adjacency();
        // deg(u0)=2, deg(i0)=2, deg(i1)=1, deg(u1)=1.
        let close = |x: f32, y: f64| (x as f64 - y).abs() < 1e-7;
        assert!(close(a.get(0, 2), 0.5));
        assert!(close(a.get(0, 3), 1.0 / 2f64.sqrt()));
        assert!(close(a.get(1, 2), 1.0 / 2f64.sqrt()));
        assert_eq!(aug.merged.n_edges(), g.n_edges() + 1);
    }

    #[test]
    fn merge_rejects_existing_edge() {
        let g = InteractionGraph::from_edges(1, 2, [(0, 0)]);
        let err = merge_augmented(&g, &AugmentedEdgeSet::new(vec![edge(0, 0)])).unwrap_err();
        assert!(err.to_string().contains("edge already observed"));
        let dup = AugmentedEdgeSet::new(vec![edge(0, 1), edge(0, 1)]);
        assert!(merge_augmented(&g, &dup).is_err());
    }

    fn arb_graph() -> impl Strategy<Value = InteractionGraph> {
        (1usize..8, 1usize..12).prop_flat_map(|(nu, ni)| {
            proptest::collection::vec((0..nu, 0..ni), 0..30)
                .prop_map(move |edges| InteractionGraph::from_edges(nu, ni, edges))
        })
    }

    proptest! {
        #[test]
        fn adjacency_symmetric_and_matches_dense(g in arb_graph()) {
            let a = g.normalized_adjacency();
            let dense = a.to_dense();
            let layout = g.layout();
            // Brute-force dense construction from the degree definition.
            let n = layout.n_nodes();
            let mut oracle = vec![vec![0.0f64; n]; n];
            for (u, i) in g.edges() {
                let w = 1.0 / ((g.user_degree(u) * g.item_degree(i)) as f64).sqrt();
                oracle[u][layout.item_node(i)] = w;
                oracle[layout.item_node(i)][u] = w;
            }
            for r in 0..n {
                prop_assert_eq!(dense[r][r], 0.0);
                for c in 0..n {
                    prop_assert_eq!(dense[r][c], dense[c][r]);
                    prop_assert!((dense[r][c] - oracle[r][c]).abs() < 1e-7);
                }
                let row_sum: f64 = dense[r].iter().sum();
                let oracle_sum: f64 = oracle[r].iter().sum();
                prop_assert!((row_sum - oracle_sum).abs() < 1e-6);
            }
        }

        #[test]
        fn degrees_match_incident_edges(g in arb_graph()) {
            let mut du = vec![0; g.n_users()];
            let mut di = vec![0; g.n_items()];
            for (u, i) in g.edges() {
                du[u] += 1;
                di[i] += 1;
            }
            prop_assert_eq!(du, g.user_degrees());
            prop_assert_eq!(di, g.item_degrees());
        }

        #[test]
        fn low_degree_is_monotone(g in arb_graph(), q1 in 0.01f64..1.0, q2 in 0.01f64..1.0) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let small = low_degree_users(&g, lo).unwrap();
            let large = low_degree_users(&g, hi).unwrap();
            prop_assert!(small.is_subset(&large));
        }

        #[test]
        fn merge_preserves_base(g in arb_graph(), extra in proptest::collection::vec((0usize..8, 0usize..12), 0..10)) {
            let mut seen = BTreeSet::new();
            let new: Vec<_> = extra
                .into_iter()
                .filter(|&(u, i)| u < g.n_users() && i < g.n_items() && !g.has_edge(u, i) && seen.insert((u, i)))
                .map(|(u, i)| edge(u, i))
                .collect();
            let n_new = new.len();
            let aug = merge_augmented(&g, &AugmentedEdgeSet::new(new)).unwrap();
            prop_assert_eq!(aug.merged.n_edges(), g.n_edges() + n_new);
            for (u, i) in g.edges() {
                prop_assert!(aug.merged.has_edge(u, i));
            }
        }
    }
}
