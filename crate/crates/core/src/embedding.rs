//! Embedding matrices, linear graph propagation and retrieval.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{InteractionGraph, NodeLayout, NormalizedAdjacency};

/// Standard deviation of the initial embedding entries.
pub const INIT_STD: f64 = 0.1;

/// Dense row-major `rows x dim` matrix of f32.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    layer_tag: usize,
}

impl PartialEq for EmbeddingMatrix {
    /// Bitwise equality of shape and entries; the layer tag is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.dim == other.dim
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
            layer_tag: 0,
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows} x {dim} matrix",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            dim,
            data,
            layer_tag: 0,
        })
    }

    /// I.i.d. `N(0, std^2)` entries from a seeded ChaCha8 stream.
    pub fn gaussian(rows: usize, dim: usize, std: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "embedding dimension must be at least 1".into(),
            ));
        }
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidParameter(format!("normal distribution: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * dim)
            .map(|_| normal.sample(&mut rng) as f32)
            .collect();
        Self::from_vec(rows, dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer_tag(&self) -> usize {
        self.layer_tag
    }

    pub fn with_layer_tag(mut self, tag: usize) -> Self {
        self.layer_tag = tag;
        self
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn first_non_finite_row(&self) -> Option<usize> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|k| k / self.dim.max(1))
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Initial embeddings for `n_nodes` nodes: `N(0, 0.1^2)`, deterministic in
/// `seed`.
pub fn init_embeddings(n_nodes: usize, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::gaussian(n_nodes, dim, INIT_STD, seed)
}

/// Per-layer representations `[E0, A E0, ..., A^L E0]`.
#[derive(Debug, Clone)]
pub struct LayerStack {
    pub layers: Vec<EmbeddingMatrix>,
    /// Fingerprint of the adjacency that produced the stack.
    pub adjacency_id: u64,
}

impl LayerStack {
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }
}

/// Linear propagation with no transform and no self term:
/// `layers[l] = A * layers[l - 1]`.
pub fn propagate(
    e0: &EmbeddingMatrix,
    adj: &NormalizedAdjacency,
    layers: usize,
) -> Result<LayerStack> {
    if e0.rows() != adj.n_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "embedding has {} rows, adjacency has {} nodes",
            e0.rows(),
            adj.n_nodes()
        )));
    }
    let mut stack = Vec::with_capacity(layers + 1);
    stack.push(e0.clone().with_layer_tag(0));
    for l in 1..=layers {
        let mut next = EmbeddingMatrix::zeros(e0.rows(), e0.dim()).with_layer_tag(l);
        adj.spmm(stack[l - 1].as_slice(), e0.dim(), next.as_mut_slice());
        stack.push(next);
    }
    Ok(LayerStack {
        layers: stack,
        adjacency_id: adj.fingerprint(),
    })
}

/// Elementwise mean over all layers of the stack.
pub fn mean_pool(stack: &LayerStack) -> EmbeddingMatrix {
    let first = &stack.layers[0];
    let mut out = EmbeddingMatrix::zeros(first.rows(), first.dim());
    for layer in &stack.layers {
        for (o, v) in out.as_mut_slice().iter_mut().zip(layer.as_slice()) {
            *o += v;
        }
    }
    let count = stack.layers.len() as f32;
    out.as_mut_slice().iter_mut().for_each(|v| *v /= count);
    out.with_layer_tag(stack.depth())
}

/// The deepest layer of the stack, unchanged.
pub fn last_layer(stack: &LayerStack) -> EmbeddingMatrix {
    stack.layers[stack.depth()].clone()
}

/// Computes `sum_l A^l x_l` for per-layer inputs `x_0..x_L` (absent entries
/// are zero). Since `A` is symmetric this is the adjoint of the propagation
/// map, i.e. the backward pass from per-layer gradients to `E0`.
pub fn propagate_adjoint(
    adj: &NormalizedAdjacency,
    per_layer: &[Option<&[f32]>],
    dim: usize,
) -> Vec<f32> {
    let n = adj.n_nodes() * dim;
    let mut acc = vec![0.0f32; n];
    let mut scratch = vec![0.0f32; n];
    for (l, x) in per_layer.iter().enumerate().rev() {
        if l + 1 < per_layer.len() {
            adj.spmm(&acc, dim, &mut scratch);
            std::mem::swap(&mut acc, &mut scratch);
        }
        if let Some(x) = x {
            for (a, v) in acc.iter_mut().zip(x.iter()) {
                *a += v;
            }
        }
    }
    acc
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn check_index(what: &'static str, index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(Error::IndexOutOfRange { what, index, len });
    }
    Ok(())
}

/// Inner-product preference score `e_u . e_i`.
pub fn score(e: &EmbeddingMatrix, layout: NodeLayout, user: usize, item: usize) -> Result<f64> {
    check_index("user", user, layout.n_users)?;
    check_index("item", item, layout.n_items)?;
    if e.rows() != layout.n_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "embedding has {} rows, layout has {} nodes",
            e.rows(),
            layout.n_nodes()
        )));
    }
    Ok(dot(
        e.row(layout.user_node(user)),
        e.row(layout.item_node(item)),
    ))
}

/// Scores of `user` against every item, indexed by item.
pub fn score_items(e: &EmbeddingMatrix, layout: NodeLayout, user: usize) -> Vec<f64> {
    let eu = e.row(layout.user_node(user));
    (0..layout.n_items)
        .map(|i| dot(eu, e.row(layout.item_node(i))))
        .collect()
}

/// Orders items by descending score, ascending index on ties, skipping
/// `exclude` (sorted ascending), and keeps the first `k`.
pub fn rank_items(scores: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut eligible: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < eligible.len() {
        eligible.select_nth_unstable_by(k, cmp);
        eligible.truncate(k);
    }
    eligible.sort_by(cmp);
    eligible
}

/// Retrieval shortlist for one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidates {
    /// Item indices, best first.
    pub items: Vec<usize>,
    /// Set when fewer than the requested number of items were eligible.
    pub truncated: bool,
}

/// The `k` highest-scoring items `user` has not interacted with in `graph`.
pub fn top_k_candidates(
    e: &EmbeddingMatrix,
    graph: &InteractionGraph,
    user: usize,
    k: usize,
) -> Result<Candidates> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let layout = graph.layout();
    check_index("user", user, layout.n_users)?;
    let scores = score_items(e, layout, user);
    let items = rank_items(&scores, graph.items_of(user), k);
    let truncated = items.len() < k;
    if truncated {
        log::warn!(
            "user {user}: only {} eligible candidates (asked for {k})",
            items.len()
        );
    }
    Ok(Candidates { items, truncated })
}

/// Cosine similarity of two users; zero-norm rows compare as `-inf`.
pub fn cosine_similarity(e: &EmbeddingMatrix, a: usize, b: usize) -> f64 {
    let (ra, rb) = (e.row(a), e.row(b));
    let norm = dot(ra, ra).sqrt() * dot(rb, rb).sqrt();
    if norm == 0.0 {
        return f64::NEG_INFINITY;
    }
    dot(ra, rb) / norm
}

/// The `m` users most cosine-similar to `user`, excluding `user` itself.
/// Ties go to the lower index.
pub fn similar_users(
    e: &EmbeddingMatrix,
    layout: NodeLayout,
    user: usize,
    m: usize,
) -> Result<Vec<(usize, f64)>> {
    if m == 0 {
        return Err(Error::InvalidParameter("m must be at least 1".into()));
    }
    check_index("user", user, layout.n_users)?;
    let mut sims: Vec<(usize, f64)> = (0..layout.n_users)
        .filter(|&v| v != user)
        .map(|v| {
            (
                v,
                cosine_similarity(e, layout.user_node(user), layout.user_node(v)),
            )
        })
        .collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sims.truncate(m);
    Ok(sims)
}
