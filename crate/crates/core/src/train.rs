//! Objectives, gradients and training loops.
//!
//! Both losses are generic over [`Scalar`] so training can run in f32 while
//! gradient checks run in f64. Loss values are always accumulated in f64.
//!
//! The vanilla model optimizes BPR on mean-pooled LightGCN embeddings. The
//! contrastive model encodes the original and the augmented graph from one
//! shared `E0`, optimizes BPR on the last augmented layer, and adds a
//! weighted InfoNCE term that pulls the two views of each batch node
//! together.

use std::collections::BTreeSet;
use std::fmt::Debug;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    init_embeddings, last_layer, mean_pool, propagate, propagate_adjoint, EmbeddingMatrix,
    LayerStack,
};
use crate::error::{Error, Result};
use crate::graph::{AugmentedGraph, InteractionGraph, NodeLayout, NormalizedAdjacency};

/// Floating-point type the losses can run in.
pub trait Scalar: Float + Debug + Send + Sync + 'static {
    /// `c = a * b` with explicit row/column strides (see `matrixmultiply`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    );

    fn from_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: the asserted lengths cover every strided access for
                // the contiguous row- or column-major layouts used here.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Hyperparameters shared by both training modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(alias = "d")]
    pub dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(alias = "L")]
    pub layers: usize,
    pub batch_size: usize,
    /// Weight of the contrastive term.
    pub lambda: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            learning_rate: 1e-3,
            epochs: 100,
            layers: 2,
            batch_size: 2048,
            lambda: 0.05,
            tau: 0.2,
            seed: 2024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.dim == 0 || self.batch_size == 0 {
            return bad("dim and batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("lambda must be in (0, 1), got {}", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }
}

/// A (user, positive item, negative item) training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleBatch {
    pub triples: Vec<Triple>,
    /// Distinct node indices (users and items) touched by the batch, ascending.
    pub node_set: Vec<usize>,
}

/// Draws positives uniformly from the graph's edges and one uniform
/// unobserved negative per positive.
#[derive(Debug, Clone)]
pub struct TripleSampler<'g> {
    graph: &'g InteractionGraph,
    edges: Vec<(usize, usize)>,
}

impl<'g> TripleSampler<'g> {
    pub fn new(graph: &'g InteractionGraph) -> Result<Self> {
        if graph.n_edges() == 0 || graph.n_items() < 2 {
            return Err(Error::Sampling(
                "need at least one edge and two items".into(),
            ));
        }
        Ok(Self {
            graph,
            edges: graph.edges().collect(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<TripleBatch> {
        let g = self.graph;
        let layout = g.layout();
        let max_attempts = 100 * batch_size + 100;
        let mut triples = Vec::with_capacity(batch_size);
        let mut attempts = 0;
        while triples.len() < batch_size {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::Sampling(format!(
                    "gave up after {max_attempts} draws: users interact with every item"
                )));
            }
            let (user, pos) = self.edges[rng.random_range(0..self.edges.len())];
            if g.user_degree(user) >= g.n_items() {
                continue;
            }
            let neg = loop {
                let j = rng.random_range(0..g.n_items());
                if !g.has_edge(user, j) {
                    break j;
                }
            };
            triples.push(Triple { user, pos, neg });
        }
        let node_set: BTreeSet<usize> = triples
            .iter()
            .flat_map(|t| {
                [
                    layout.user_node(t.user),
                    layout.item_node(t.pos),
                    layout.item_node(t.neg),
                ]
            })
            .collect();
        Ok(TripleBatch {
            triples,
            node_set: node_set.into_iter().collect(),
        })
    }
}

pub fn sample_batch<R: Rng + ?Sized>(
    graph: &InteractionGraph,
    batch_size: usize,
    rng: &mut R,
) -> Result<TripleBatch> {
    TripleSampler::new(graph)?.sample(batch_size, rng)
}

/// Loss value plus its gradient with respect to a node matrix.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub grad: Vec<T>,
}

/// `softplus(x) = ln(1 + e^x)`, stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn dot_t<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Summed BPR loss `sum -ln sigmoid(y_ui - y_uj)` over the triples of
/// `emb` (an `n_nodes x dim` matrix), with its dense gradient.
pub fn bpr_loss<T: Scalar>(
    emb: &[T],
    dim: usize,
    layout: NodeLayout,
    triples: &[Triple],
) -> LossGrad<T> {
    let mut grad = vec![T::zero(); emb.len()];
    let mut loss = 0.0;
    let row = |n: usize| &emb[n * dim..(n + 1) * dim];
    for t in triples {
        let (un, pn, nn) = (
            layout.user_node(t.user),
            layout.item_node(t.pos),
            layout.item_node(t.neg),
        );
        let (eu, ei, ej) = (row(un), row(pn), row(nn));
        let diff = dot_t(eu, ei) - dot_t(eu, ej);
        loss += softplus(-diff.as_f64());
        // d/dx softplus(-x) = -sigmoid(-x) = -1 / (1 + e^x)
        let coef = T::from_f64(-1.0 / (1.0 + diff.as_f64().exp()));
        for k in 0..dim {
            let (u, i, j) = (eu[k], ei[k], ej[k]);
            grad[un * dim + k] = grad[un * dim + k] + coef * (i - j);
            grad[pn * dim + k] = grad[pn * dim + k] + coef * u;
            grad[nn * dim + k] = grad[nn * dim + k] - coef * u;
        }
    }
    LossGrad { loss, grad }
}

/// Which denominator the InfoNCE loss uses for node `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveForm {
    /// `sum_{j in B}`: standard InfoNCE, the positive is in the denominator.
    IncludeSelf,
    /// `sum_{j in B \ {i}}`: positive removed from the denominator.
    ExcludeSelf,
}

/// InfoNCE loss and gradients for both views.
#[derive(Debug, Clone)]
pub struct ContrastiveLossGrad<T> {
    pub loss: f64,
    pub grad_aug: Vec<T>,
    pub grad_org: Vec<T>,
}

/// Two-view InfoNCE over the batch `nodes`, standard (self-inclusive) form.
///
/// Rows of both views are L2-normalized before comparison; a zero-norm row
/// is an error. Gradients are with respect to the unnormalized rows.
pub fn info_nce_loss<T: Scalar>(
    aug: &[T],
    org: &[T],
    dim: usize,
    nodes: &[usize],
    tau: f64,
) -> Result<ContrastiveLossGrad<T>> {
    info_nce_loss_with(ContrastiveForm::IncludeSelf, aug, org, dim, nodes, tau)
}

pub fn info_nce_loss_with<T: Scalar>(
    form: ContrastiveForm,
    aug: &[T],
    org: &[T],
    dim: usize,
    nodes: &[usize],
    tau: f64,
) -> Result<ContrastiveLossGrad<T>> {
    if aug.len() != org.len() {
        return Err(Error::ShapeMismatch("views differ in size".into()));
    }
    let m = nodes.len();
    let (za, na) = gather_normalized(aug, dim, nodes)?;
    let (zo, no) = gather_normalized(org, dim, nodes)?;
    let inv_tau = T::from_f64(1.0 / tau);

    // s = za zo^T / tau
    let mut s = vec![T::zero(); m * m];
    T::gemm(m, dim, m, &za, dim as isize, 1, &zo, 1, dim as isize, &mut s);
    s.iter_mut().for_each(|v| *v = *v * inv_tau);

    // Row-wise softmax over the denominator set; g = dL/ds.
    let mut loss = 0.0;
    let mut g = vec![T::zero(); m * m];
    for i in 0..m {
        let row = &s[i * m..(i + 1) * m];
        let in_denominator = |j: usize| form == ContrastiveForm::IncludeSelf || j != i;
        let max = (0..m)
            .filter(|&j| in_denominator(j))
            .map(|j| row[j])
            .fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for j in (0..m).filter(|&j| in_denominator(j)) {
            let e = (row[j] - max).exp();
            g[i * m + j] = e;
            denom = denom + e;
        }
        if denom > T::zero() {
            for j in (0..m).filter(|&j| in_denominator(j)) {
                g[i * m + j] = g[i * m + j] / denom;
            }
            loss += (max + denom.ln()).as_f64();
        }
        loss -= row[i].as_f64();
        g[i * m + i] = g[i * m + i] - T::one();
    }

    // dza = g zo / tau, dzo = g^T za / tau
    let mut dza = vec![T::zero(); m * dim];
    let mut dzo = vec![T::zero(); m * dim];
    T::gemm(m, m, dim, &g, m as isize, 1, &zo, dim as isize, 1, &mut dza);
    T::gemm(m, m, dim, &g, 1, m as isize, &za, dim as isize, 1, &mut dzo);

    let mut grad_aug = vec![T::zero(); aug.len()];
    let mut grad_org = vec![T::zero(); org.len()];
    scatter_normalized_grad(&mut grad_aug, &za, &na, &dza, inv_tau, dim, nodes);
    scatter_normalized_grad(&mut grad_org, &zo, &no, &dzo, inv_tau, dim, nodes);
    Ok(ContrastiveLossGrad {
        loss,
        grad_aug,
        grad_org,
    })
}

fn gather_normalized<T: Scalar>(
    emb: &[T],
    dim: usize,
    nodes: &[usize],
) -> Result<(Vec<T>, Vec<T>)> {
    let mut z = Vec::with_capacity(nodes.len() * dim);
    let mut norms = Vec::with_capacity(nodes.len());
    for &n in nodes {
        let row = emb
            .get(n * dim..(n + 1) * dim)
            .ok_or(Error::IndexOutOfRange {
                what: "node",
                index: n,
                len: emb.len() / dim.max(1),
            })?;
        let norm = dot_t(row, row).sqrt();
        if norm.is_nan() || norm <= T::zero() {
            return Err(Error::DegenerateEmbedding { node: n });
        }
        z.extend(row.iter().map(|&v| v / norm));
        norms.push(norm);
    }
    Ok((z, norms))
}

/// Backpropagates through `z = e / |e|`: `de = (dz - z (z . dz)) / |e|`,
/// with `dz` still to be scaled by `scale`.
fn scatter_normalized_grad<T: Scalar>(
    out: &mut [T],
    z: &[T],
    norms: &[T],
    dz: &[T],
    scale: T,
    dim: usize,
    nodes: &[usize],
) {
    for (r, &n) in nodes.iter().enumerate() {
        let zr = &z[r * dim..(r + 1) * dim];
        let dr = &dz[r * dim..(r + 1) * dim];
        let proj = dot_t(zr, dr);
        let k = scale / norms[r];
        for c in 0..dim {
            out[n * dim + c] = out[n * dim + c] + k * (dr[c] - zr[c] * proj);
        }
    }
}

/// `bpr + lambda * cl`.
pub fn total_loss(bpr: f64, cl: f64, lambda: f64) -> f64 {
    bpr + lambda * cl
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 / (1.0 - self.beta1.powi(self.t)) as f32;
        let c2 = 1.0 / (1.0 - self.beta2.powi(self.t)) as f32;
        let (lr, eps) = (self.lr as f32, self.eps as f32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m * c1) / ((*v * c2).sqrt() + eps);
        }
    }
}

/// Per-epoch training losses, each the mean over the epoch's batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub bpr_loss: f64,
    pub cl_loss: f64,
    pub total: f64,
}

/// How the layer stack is reduced to the scoring representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Last,
}

impl Pooling {
    fn apply(self, stack: &LayerStack) -> EmbeddingMatrix {
        match self {
            Pooling::Mean => mean_pool(stack),
            Pooling::Last => last_layer(stack),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// Pooled representation used for scoring.
    pub embeddings: EmbeddingMatrix,
    /// The learned `E0`.
    pub base: EmbeddingMatrix,
    pub history: Vec<EpochMetrics>,
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub bpr: f64,
    pub cl: f64,
    pub total: f64,
}

/// BPR loss of a batch as a function of `E0`, with its gradient.
pub fn bpr_objective(
    e0: &EmbeddingMatrix,
    adj: &NormalizedAdjacency,
    layers: usize,
    pooling: Pooling,
    layout: NodeLayout,
    triples: &[Triple],
) -> Result<(f64, Vec<f32>)> {
    let rep = pooling.apply(&propagate(e0, adj, layers)?);
    let mut out = bpr_loss(rep.as_slice(), e0.dim(), layout, triples);
    if pooling == Pooling::Mean {
        let w = 1.0 / (layers + 1) as f32;
        out.grad.iter_mut().for_each(|g| *g *= w);
    }
    let per_layer: Vec<Option<&[f32]>> = (0..=layers)
        .map(|l| (pooling == Pooling::Mean || l == layers).then_some(&out.grad[..]))
        .collect();
    Ok((out.loss, propagate_adjoint(adj, &per_layer, e0.dim())))
}

/// `BPR(last augmented layer) + lambda * InfoNCE(mean views)` of a batch as
/// a function of the shared `E0`, with its gradient.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_objective(
    e0: &EmbeddingMatrix,
    adj_org: &NormalizedAdjacency,
    adj_aug: &NormalizedAdjacency,
    layers: usize,
    layout: NodeLayout,
    batch: &TripleBatch,
    lambda: f64,
    tau: f64,
) -> Result<(BatchLoss, Vec<f32>)> {
    let dim = e0.dim();
    let aug_stack = propagate(e0, adj_aug, layers)?;
    let org_stack = propagate(e0, adj_org, layers)?;
    let bpr = bpr_loss(aug_stack.layers[layers].as_slice(), dim, layout, &batch.triples);
    let cl = info_nce_loss(
        mean_pool(&aug_stack).as_slice(),
        mean_pool(&org_stack).as_slice(),
        dim,
        &batch.node_set,
        tau,
    )?;
    let loss = BatchLoss {
        bpr: bpr.loss,
        cl: cl.loss,
        total: total_loss(bpr.loss, cl.loss, lambda),
    };

    let w = (lambda / (layers + 1) as f64) as f32;
    let cl_aug: Vec<f32> = cl.grad_aug.iter().map(|g| g * w).collect();
    let cl_org: Vec<f32> = cl.grad_org.iter().map(|g| g * w).collect();
    let top: Vec<f32> = cl_aug.iter().zip(&bpr.grad).map(|(c, b)| c + b).collect();
    let aug_layers: Vec<Option<&[f32]>> = (0..=layers)
        .map(|l| Some(if l == layers { &top[..] } else { &cl_aug[..] }))
        .collect();
    let org_layers: Vec<Option<&[f32]>> = vec![Some(&cl_org[..]); layers + 1];
    let mut g0 = propagate_adjoint(adj_aug, &aug_layers, dim);
    let g_org = propagate_adjoint(adj_org, &org_layers, dim);
    g0.iter_mut().zip(&g_org).for_each(|(a, b)| *a += b);
    Ok((loss, g0))
}

/// Vanilla LightGCN: BPR on mean-pooled embeddings.
pub fn train_vanilla(graph: &InteractionGraph, config: &TrainConfig) -> Result<TrainedModel> {
    train_bpr(graph, config, Pooling::Mean, |_| {})
}

/// BPR-only training with a chosen pooling; `on_epoch` sees each epoch's
/// metrics as they are produced.
pub fn train_bpr(
    graph: &InteractionGraph,
    config: &TrainConfig,
    pooling: Pooling,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainedModel> {
    config.validate()?;
    let adj = graph.normalized_adjacency();
    let (mut e0, mut rng) = init_state(graph, config)?;
    let pool = |e0: &EmbeddingMatrix| -> Result<EmbeddingMatrix> {
        Ok(pooling.apply(&propagate(e0, &adj, config.layers)?))
    };
    let mut history = Vec::with_capacity(config.epochs);
    if config.epochs > 0 {
        let sampler = TripleSampler::new(graph)?;
        let mut adam = Adam::new(config.learning_rate, e0.as_slice().len());
        let batches = graph.n_edges().div_ceil(config.batch_size);
        for epoch in 0..config.epochs {
            let mut bpr_sum = 0.0;
            for _ in 0..batches {
                let batch = sampler.sample(config.batch_size, &mut rng)?;
                let (loss, g0) =
                    bpr_objective(&e0, &adj, config.layers, pooling, graph.layout(), &batch.triples)?;
                guard(epoch, loss)?;
                bpr_sum += loss;
                adam.step(e0.as_mut_slice(), &g0);
            }
            let bpr = bpr_sum / batches as f64;
            let metrics = EpochMetrics {
                epoch,
                bpr_loss: bpr,
                cl_loss: 0.0,
                total: bpr,
            };
            log::debug!("epoch {epoch}: bpr {bpr:.5}");
            on_epoch(&metrics);
            history.push(metrics);
        }
    }
    Ok(TrainedModel {
        embeddings: pool(&e0)?,
        base: e0,
        history,
    })
}

/// Two-view contrastive training on the original and augmented graphs.
/// Returns the last augmented layer as the scoring representation.
pub fn train_votegcl(
    graph: &InteractionGraph,
    aug: &AugmentedGraph,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    train_votegcl_with(graph, aug, config, |_| {})
}

pub fn train_votegcl_with(
    graph: &InteractionGraph,
    aug: &AugmentedGraph,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainedModel> {
    config.validate()?;
    let merged = &aug.merged;
    if merged.layout() != graph.layout() || graph.edges().any(|(u, i)| !merged.has_edge(u, i)) {
        return Err(Error::InvalidParameter(
            "augmented graph must contain the original graph".into(),
        ));
    }
    let adj_org = graph.normalized_adjacency();
    let adj_aug = merged.normalized_adjacency();
    let (mut e0, mut rng) = init_state(graph, config)?;
    let layers = config.layers;
    let mut history = Vec::with_capacity(config.epochs);
    if config.epochs > 0 {
        let sampler = TripleSampler::new(merged)?;
        let mut adam = Adam::new(config.learning_rate, e0.as_slice().len());
        let batches = merged.n_edges().div_ceil(config.batch_size);
        for epoch in 0..config.epochs {
            let (mut bpr_sum, mut cl_sum, mut total_sum) = (0.0, 0.0, 0.0);
            for _ in 0..batches {
                let batch = sampler.sample(config.batch_size, &mut rng)?;
                let (loss, g0) = contrastive_objective(
                    &e0,
                    &adj_org,
                    &adj_aug,
                    layers,
                    graph.layout(),
                    &batch,
                    config.lambda,
                    config.tau,
                )?;
                guard(epoch, loss.total)?;
                bpr_sum += loss.bpr;
                cl_sum += loss.cl;
                total_sum += loss.total;
                adam.step(e0.as_mut_slice(), &g0);
            }
            let n = batches as f64;
            let metrics = EpochMetrics {
                epoch,
                bpr_loss: bpr_sum / n,
                cl_loss: cl_sum / n,
                total: total_sum / n,
            };
            log::debug!(
                "epoch {epoch}: bpr {:.5} cl {:.5} total {:.5}",
                metrics.bpr_loss,
                metrics.cl_loss,
                metrics.total
            );
            on_epoch(&metrics);
            history.push(metrics);
        }
    }
    let stack = propagate(&e0, &adj_aug, layers)?;
    Ok(TrainedModel {
        embeddings: last_layer(&stack),
        base: e0,
        history,
    })
}

/// Mean-pooled representations of both views, for measuring how far apart
/// the views of a trained model are.
pub fn view_embeddings(
    base: &EmbeddingMatrix,
    graph: &InteractionGraph,
    aug: &AugmentedGraph,
    layers: usize,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let pa = mean_pool(&propagate(base, &aug.merged.normalized_adjacency(), layers)?);
    let po = mean_pool(&propagate(base, &graph.normalized_adjacency(), layers)?);
    Ok((pa, po))
}

fn init_state(
    graph: &InteractionGraph,
    config: &TrainConfig,
) -> Result<(EmbeddingMatrix, ChaCha8Rng)> {
    let e0 = init_embeddings(graph.layout().n_nodes(), config.dim, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    Ok((e0, rng))
}

fn guard(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss })
    }
}

/// Adjacency the contrastive model uses for its augmented view.
pub fn augmented_adjacency(aug: &AugmentedGraph) -> NormalizedAdjacency {
    aug.merged.normalized_adjacency()
}

/// Largest relative error between the analytic gradient of `loss_fn` at
/// `point` and a central difference with step `eps`, over `coords` random
/// coordinates. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    point: &[f64],
    eps: f64,
    coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be in [1e-6, 1e-3], got {eps}"
        )));
    }
    if point.is_empty() {
        return Ok(0.0);
    }
    let (_, analytic) = loss_fn(point);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let k = rng.random_range(0..point.len());
        x[k] = point[k] + eps;
        let (up, _) = loss_fn(&x);
        x[k] = point[k] - eps;
        let (down, _) = loss_fn(&x);
        x[k] = point[k];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AugmentedEdge, AugmentedEdgeSet};
    use crate::embedding::{cosine_similarity, score};
    use crate::graph::merge_augmented;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::Rng;

    fn layout(n_users: usize, n_items: usize) -> NodeLayout {
        NodeLayout { n_users, n_items }
    }

    fn random_matrix(rows: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Two-dimensional embeddings that give the triple (0, 0, 1) a score
    /// difference of `diff`.
    fn bpr_with_diff(diff: f64) -> f64 {
        let emb = [1.0, 0.0, diff, 0.0, 0.0, 0.0];
        bpr_loss(&emb, 2, layout(1, 2), &[Triple { user: 0, pos: 0, neg: 1 }]).loss
    }

    #[test]
    fn bpr_closed_form_values() {
        assert!(close(bpr_with_diff(0.0), std::f64::consts::LN_2, 1e-12));
        // softplus(-1) = ln(1 + e^-1)
        assert!(close(bpr_with_diff(1.0), (1.0 + (-1.0f64).exp()).ln(), 1e-12));
        assert!(close(bpr_with_diff(1.0), 0.3132617, 1e-7));
        let saturated = bpr_with_diff(40.0);
        assert!((0.0..1e-12).contains(&saturated));
        assert!(bpr_with_diff(-800.0).is_finite());
    }

    #[test]
    fn bpr_symmetric_saddle_has_zero_user_gradient() {
        // e_i == e_j: the user gradient coef * (e_i - e_j) vanishes exactly.
        let emb = [0.3, -0.2, 0.5, 0.7, 0.5, 0.7];
        let out = bpr_loss(&emb, 2, layout(1, 2), &[Triple { user: 0, pos: 0, neg: 1 }]);
        assert_eq!(&out.grad[0..2], &[0.0, 0.0]);
    }

    #[test]
    fn info_nce_single_node_is_zero() {
        let z = [0.6, 0.8];
        let out = info_nce_loss(&z, &z, 2, &[0], 0.2).unwrap();
        assert!(close(out.loss, 0.0, 1e-12));
    }

    #[test]
    fn info_nce_two_orthogonal_nodes() {
        let z = [1.0, 0.0, 0.0, 1.0];
        let out = info_nce_loss(&z, &z, 2, &[0, 1], 1.0).unwrap();
        let want = 2.0 * (-1.0 + (1f64.exp() + 1.0).ln());
        assert!(close(out.loss, want, 1e-12));
        assert!(close(out.loss, 0.6265234, 1e-7));
    }

    #[test]
    fn info_nce_rejects_zero_rows() {
        let aug = [0.0, 0.0, 1.0, 0.0];
        let org = [1.0, 0.0, 1.0, 0.0];
        let err = info_nce_loss(&aug, &org, 2, &[0, 1], 0.2).unwrap_err();
        assert!(err.to_string().contains("degenerate embedding"));
    }

    #[test]
    fn info_nce_batch_order_invariant() {
        let aug = random_matrix(6, 4, 1);
        let org = random_matrix(6, 4, 2);
        let a = info_nce_loss(&aug, &org, 4, &[0, 2, 3, 5], 0.2).unwrap();
        let b = info_nce_loss(&aug, &org, 4, &[5, 3, 0, 2], 0.2).unwrap();
        assert!(close(a.loss, b.loss, 1e-12));
        for (x, y) in a.grad_aug.iter().zip(&b.grad_aug) {
            assert!(close(*x, *y, 1e-12));
        }
    }

    #[test]
    fn info_nce_forms_differ_by_log_partition_gap() {
        let (m, dim, tau) = (5, 3, 0.2);
        let aug = random_matrix(m, dim, 11);
        let org = random_matrix(m, dim, 12);
        let nodes: Vec<usize> = (0..m).collect();
        let with = info_nce_loss_with(ContrastiveForm::IncludeSelf, &aug, &org, dim, &nodes, tau)
            .unwrap()
            .loss;
        let without = info_nce_loss_with(ContrastiveForm::ExcludeSelf, &aug, &org, dim, &nodes, tau)
            .unwrap()
            .loss;
        let norm = |v: &[f64]| -> Vec<f64> {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        };
        let z: Vec<Vec<f64>> = (0..m).map(|i| norm(&aug[i * dim..(i + 1) * dim])).collect();
        let zo: Vec<Vec<f64>> = (0..m).map(|i| norm(&org[i * dim..(i + 1) * dim])).collect();
        let s = |i: usize, j: usize| z[i].iter().zip(&zo[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
        let gap: f64 = (0..m)
            .map(|i| {
                let all: f64 = (0..m).map(|j| s(i, j).exp()).sum();
                let others: f64 = (0..m).filter(|&j| j != i).map(|j| s(i, j).exp()).sum();
                all.ln() - others.ln()
            })
            .sum();
        assert!(close(with - without, gap, 1e-10), "{} vs {gap}", with - without);
    }

    #[test]
    fn f32_and_f64_agree() {
        let aug = random_matrix(4, 3, 5);
        let org = random_matrix(4, 3, 6);
        let nodes = [0, 1, 2, 3];
        let hi = info_nce_loss(&aug, &org, 3, &nodes, 0.2).unwrap();
        let aug32: Vec<f32> = aug.iter().map(|&v| v as f32).collect();
        let org32: Vec<f32> = org.iter().map(|&v| v as f32).collect();
        let lo = info_nce_loss(&aug32, &org32, 3, &nodes, 0.2).unwrap();
        assert!(close(hi.loss, lo.loss, 1e-4));
        for (a, b) in hi.grad_org.iter().zip(&lo.grad_org) {
            assert!(close(*a, *b as f64, 1e-4));
        }
    }

    #[test]
    fn bpr_gradient_matches_finite_differences() {
        let l = layout(3, 4);
        let triples = [
            Triple { user: 0, pos: 0, neg: 1 },
            Triple { user: 1, pos: 2, neg: 3 },
            Triple { user: 2, pos: 1, neg: 0 },
            Triple { user: 0, pos: 3, neg: 2 },
            Triple { user: 1, pos: 0, neg: 1 },
        ];
        let point = random_matrix(7, 4, 3);
        let err = finite_difference_check(
            |x| {
                let out = bpr_loss(x, 4, l, &triples);
                (out.loss, out.grad)
            },
            &point,
            1e-5,
            50,
            1,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        let (m, dim) = (4, 5);
        let nodes: Vec<usize> = (0..m).collect();
        let point = random_matrix(2 * m, dim, 8);
        let err = finite_difference_check(
            |x| {
                let (aug, org) = x.split_at(m * dim);
                let out = info_nce_loss(aug, org, dim, &nodes, 0.2).unwrap();
                (out.loss, [out.grad_aug, out.grad_org].concat())
            },
            &point,
            1e-5,
            50,
            2,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn finite_difference_step_is_validated() {
        let f = |x: &[f64]| (x[0] * x[0], vec![2.0 * x[0]]);
        assert!(finite_difference_check(f, &[1.0], 1e-2, 1, 0).is_err());
        assert!(finite_difference_check(f, &[1.0], 1e-5, 1, 0).unwrap() < 1e-8);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.7, 0.0, 0.05), 0.7);
        assert_eq!(total_loss(1.0, 2.0, 0.1), 1.2);
        assert!(total_loss(1.0, 3.0, 0.1) >= total_loss(1.0, 2.0, 0.1));
    }

    proptest! {
        #[test]
        fn total_loss_decomposes(b in 0.0f64..1e3, c in 0.0f64..1e3, lambda in 0.001f64..0.999) {
            let t = total_loss(b, c, lambda);
            // Exact up to the final rounding of the sum.
            let ulp = f64::EPSILON * t.abs().max(f64::MIN_POSITIVE);
            prop_assert!(((t - b) - lambda * c).abs() <= ulp);
        }

        #[test]
        fn bpr_loss_non_negative(seed in any::<u64>()) {
            let emb = random_matrix(5, 3, seed);
            let triples = [Triple { user: 0, pos: 0, neg: 1 }, Triple { user: 1, pos: 2, neg: 0 }];
            prop_assert!(bpr_loss(&emb, 3, layout(2, 3), &triples).loss >= 0.0);
        }

        #[test]
        fn normalized_inputs_have_unit_norm(seed in any::<u64>()) {
            let emb = random_matrix(4, 6, seed);
            let (z, _) = gather_normalized(&emb, 6, &[0, 1, 2, 3]).unwrap();
            for r in 0..4 {
                let n: f64 = z[r * 6..(r + 1) * 6].iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sample_forced_negative() {
        let g = InteractionGraph::from_edges(1, 2, [(0, 0)]);
        let mut rng = StdRng::seed_from_u64(0);
        let b = sample_batch(&g, 8, &mut rng).unwrap();
        assert!(b.triples.iter().all(|t| t.pos == 0 && t.neg == 1));
        assert_eq!(b.node_set, vec![0, 1, 2]);
    }

    #[test]
    fn sample_shape_and_validity() {
        let edges = [(0, 0), (0, 1), (1, 2), (1, 3), (2, 4), (2, 0), (3, 1), (3, 5), (4, 2), (4, 6)];
        let g = InteractionGraph::from_edges(5, 8, edges);
        let mut rng = StdRng::seed_from_u64(1);
        let b = sample_batch(&g, 4, &mut rng).unwrap();
        assert_eq!(b.triples.len(), 4);
        for t in &b.triples {
            assert!(g.has_edge(t.user, t.pos));
            assert!(!g.has_edge(t.user, t.neg));
        }
        let again = sample_batch(&g, 4, &mut StdRng::seed_from_u64(1)).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn sample_errors() {
        let mut rng = StdRng::seed_from_u64(0);
        let empty = InteractionGraph::from_edges(1, 3, std::iter::empty());
        assert!(sample_batch(&empty, 1, &mut rng).is_err());
        let full = InteractionGraph::from_edges(1, 2, [(0, 0), (0, 1)]);
        assert!(matches!(sample_batch(&full, 1, &mut rng), Err(Error::Sampling(_))));
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            dim: 8,
            learning_rate: 0.05,
            epochs: 60,
            layers: 2,
            batch_size: 4,
            lambda: 0.05,
            tau: 0.2,
            seed: 3,
        }
    }

    #[test]
    fn vanilla_learns_two_user_fixture() {
        // u0-i0 and u1-i1; after training each user prefers its own item.
        let g = InteractionGraph::from_edges(2, 2, [(0, 0), (1, 1)]);
        let model = train_vanilla(&g, &small_config()).unwrap();
        let s = |u, i| score(&model.embeddings, g.layout(), u, i).unwrap();
        assert!(s(0, 0) > s(0, 1));
        assert!(s(1, 1) > s(1, 0));
    }

    #[test]
    fn zero_epochs_returns_pooled_init() {
        let g = InteractionGraph::from_edges(2, 2, [(0, 0), (1, 1)]);
        let config = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let model = train_vanilla(&g, &config).unwrap();
        let e0 = init_embeddings(4, 8, config.seed).unwrap();
        let want = mean_pool(&propagate(&e0, &g.normalized_adjacency(), 2).unwrap());
        assert_eq!(model.embeddings, want);
        assert!(model.history.is_empty());
    }

    #[test]
    fn vanilla_is_deterministic() {
        let g = InteractionGraph::from_edges(3, 4, [(0, 0), (1, 1), (2, 2), (0, 3)]);
        let a = train_vanilla(&g, &small_config()).unwrap();
        let b = train_vanilla(&g, &small_config()).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lambda: 0.0, ..Default::default() },
            TrainConfig { lambda: 1.0, ..Default::default() },
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { dim: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let parsed: TrainConfig = serde_json::from_str(r#"{"d": 16, "L": 3}"#).unwrap();
        assert_eq!((parsed.dim, parsed.layers, parsed.epochs), (16, 3, 100));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }

    fn fixture() -> InteractionGraph {
        let edges = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 3), (3, 4), (4, 4), (4, 0), (5, 1), (5, 3)];
        InteractionGraph::from_edges(6, 6, edges)
    }

    #[test]
    fn votegcl_with_identical_views_tracks_last_layer_bpr() {
        let g = fixture();
        let aug = merge_augmented(&g, &AugmentedEdgeSet::default()).unwrap();
        let config = TrainConfig {
            lambda: 1e-12,
            ..small_config()
        };
        let contrastive = train_votegcl(&g, &aug, &config).unwrap();
        let plain = train_bpr(&g, &config, Pooling::Last, |_| {}).unwrap();
        let layout = g.layout();
        for u in 0..g.n_users() {
            for i in 0..g.n_items() {
                let a = score(&contrastive.embeddings, layout, u, i).unwrap();
                let b = score(&plain.embeddings, layout, u, i).unwrap();
                assert!((a - b).abs() < 1e-3 * (1.0 + b.abs()), "({u},{i}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn votegcl_is_deterministic_and_rejects_foreign_graph() {
        let g = fixture();
        let aug = merge_augmented(
            &g,
            &AugmentedEdgeSet::new(vec![AugmentedEdge { user: 5, item: 5, rrf_score: 1.0, votes: 1 }]),
        )
        .unwrap();
        let config = TrainConfig { epochs: 10, ..small_config() };
        let a = train_votegcl(&g, &aug, &config).unwrap();
        let b = train_votegcl(&g, &aug, &config).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.embeddings, b.embeddings);

        let other = InteractionGraph::from_edges(6, 6, [(0, 5)]);
        assert!(train_votegcl(&other, &aug, &config).is_err());
    }

    fn augmented_fixture() -> (InteractionGraph, AugmentedGraph) {
        let g = fixture();
        let aug = merge_augmented(
            &g,
            &AugmentedEdgeSet::new(vec![
                AugmentedEdge { user: 5, item: 5, rrf_score: 1.0, votes: 1 },
                AugmentedEdge { user: 0, item: 3, rrf_score: 1.0, votes: 1 },
            ]),
        )
        .unwrap();
        (g, aug)
    }

    /// Checks an f32 objective of `E0` against central differences, with a
    /// tolerance loose enough for f32 forward passes.
    fn check_e0_gradient(objective: impl Fn(&EmbeddingMatrix) -> (f64, Vec<f32>), rows: usize, dim: usize) {
        let e0 = EmbeddingMatrix::gaussian(rows, dim, 0.5, 21).unwrap();
        let (_, grad) = objective(&e0);
        let mut rng = StdRng::seed_from_u64(4);
        let h = 1e-2f32;
        for _ in 0..50 {
            let k = rng.random_range(0..rows * dim);
            let mut x = e0.clone();
            x.as_mut_slice()[k] += h;
            let up = objective(&x).0;
            x.as_mut_slice()[k] -= 2.0 * h;
            let down = objective(&x).0;
            let numeric = (up - down) / (2.0 * h as f64);
            let analytic = grad[k] as f64;
            assert!(
                (numeric - analytic).abs() <= 1e-3 + 1e-2 * analytic.abs(),
                "coord {k}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn bpr_objective_gradient_through_propagation() {
        let g = fixture();
        let adj = g.normalized_adjacency();
        let triples = sample_batch(&g, 6, &mut StdRng::seed_from_u64(2)).unwrap().triples;
        for pooling in [Pooling::Mean, Pooling::Last] {
            check_e0_gradient(
                |e0| bpr_objective(e0, &adj, 2, pooling, g.layout(), &triples).unwrap(),
                12,
                4,
            );
        }
    }

    #[test]
    fn contrastive_objective_gradient_through_both_views() {
        let (g, aug) = augmented_fixture();
        let (adj_org, adj_aug) = (g.normalized_adjacency(), aug.merged.normalized_adjacency());
        let batch = sample_batch(&aug.merged, 6, &mut StdRng::seed_from_u64(3)).unwrap();
        check_e0_gradient(
            |e0| {
                let (loss, grad) =
                    contrastive_objective(e0, &adj_org, &adj_aug, 2, g.layout(), &batch, 0.5, 0.2)
                        .unwrap();
                (loss.total, grad)
            },
            12,
            4,
        );
    }

    fn late_contrastive_loss(lambda: f64) -> f64 {
        let (g, aug) = augmented_fixture();
        let config = TrainConfig { lambda, epochs: 80, ..small_config() };
        let model = train_votegcl(&g, &aug, &config).unwrap();
        model.history[70..].iter().map(|m| m.cl_loss).sum::<f64>() / 10.0
    }

    #[test]
    fn stronger_contrastive_weight_lowers_contrastive_loss() {
        let weak = late_contrastive_loss(0.01);
        let strong = late_contrastive_loss(0.5);
        assert!(strong < weak, "cl at 0.5 = {strong}, at 0.01 = {weak}");
    }

    /// Two views that differ substantially: roughly a quarter of all
    /// unobserved pairs are added to the augmented graph.
    fn dense_augmentation() -> (InteractionGraph, AugmentedGraph) {
        let edges = (0..12).flat_map(|u| [(u, u % 10), (u, (u * 3 + 1) % 10)]);
        let g = InteractionGraph::from_edges(12, 10, edges);
        let new = (0..12)
            .flat_map(|u| (0..10).map(move |i| (u, i)))
            .filter(|&(u, i)| !g.has_edge(u, i) && (u + i) % 4 == 0)
            .map(|(user, item)| AugmentedEdge { user, item, rrf_score: 1.0, votes: 1 })
            .collect();
        let aug = merge_augmented(&g, &AugmentedEdgeSet::new(new)).unwrap();
        (g, aug)
    }

    fn mean_view_gap(lambda: f64) -> f64 {
        let (g, aug) = dense_augmentation();
        let config = TrainConfig {
            dim: 16,
            learning_rate: 0.01,
            epochs: 80,
            layers: 2,
            batch_size: 8,
            lambda,
            tau: 0.2,
            seed: 3,
        };
        let model = train_votegcl(&g, &aug, &config).unwrap();
        let (pa, po) = view_embeddings(&model.base, &g, &aug, config.layers).unwrap();
        let n = pa.rows();
        let both =
            EmbeddingMatrix::from_vec(2 * n, pa.dim(), [pa.as_slice(), po.as_slice()].concat())
                .unwrap();
        (0..n).map(|r| 1.0 - cosine_similarity(&both, r, n + r)).sum::<f64>() / n as f64
    }

    #[test]
    fn stronger_contrastive_weight_aligns_views() {
        let weak = mean_view_gap(0.01);
        let strong = mean_view_gap(0.2);
        assert!(strong < weak, "gap at 0.2 = {strong}, at 0.01 = {weak}");
    }
}
