//! Reciprocal-rank aggregation, top-p selection, the concentration bound,
//! and a Mallows permutation model for simulating stochastic rankers.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// A ranking of `K` candidate slots: `ranks[slot]` is the 0-based rank.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    ranks: Vec<usize>,
}

impl Permutation {
    pub fn from_ranks(ranks: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; ranks.len()];
        for &r in &ranks {
            match seen.get_mut(r) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::InvalidPermutation(format!("rank {r} repeated"))),
                None => {
                    return Err(Error::InvalidPermutation(format!(
                        "rank {r} out of range for {} slots",
                        ranks.len()
                    )))
                }
            }
        }
        Ok(Self { ranks })
    }

    /// Builds from a best-first list of slots.
    pub fn from_order(order: &[usize]) -> Result<Self> {
        let k = order.len();
        let mut ranks = vec![usize::MAX; k];
        for (r, &slot) in order.iter().enumerate() {
            match ranks.get_mut(slot) {
                Some(x) if *x == usize::MAX => *x = r,
                Some(_) => {
                    return Err(Error::InvalidPermutation(format!("slot {slot} repeated")))
                }
                None => {
                    return Err(Error::InvalidPermutation(format!(
                        "slot {slot} out of range for {k} slots"
                    )))
                }
            }
        }
        Ok(Self { ranks })
    }

    pub fn identity(k: usize) -> Self {
        Self {
            ranks: (0..k).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn rank(&self, slot: usize) -> usize {
        self.ranks[slot]
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    /// Slots best first.
    pub fn order(&self) -> Vec<usize> {
        let mut order = vec![0; self.ranks.len()];
        for (slot, &r) in self.ranks.iter().enumerate() {
            order[r] = slot;
        }
        order
    }
}

/// Number of slot pairs ordered differently by `a` and `b`.
pub fn kendall_tau(a: &Permutation, b: &Permutation) -> usize {
    assert_eq!(a.len(), b.len(), "permutations differ in length");
    let k = a.len();
    let mut d = 0;
    for x in 0..k {
        for y in x + 1..k {
            let sa = a.rank(x) < a.rank(y);
            let sb = b.rank(x) < b.rank(y);
            d += usize::from(sa != sb);
        }
    }
    d
}

/// Per-slot aggregate scores `S(i) = sum_n 1 / (rank_n(i) + 1)`.
///
/// When `N * lcm(1..=K)` fits in a `u128` the scores are kept as exact
/// integer numerators over that common denominator, so comparisons are
/// exact and the floats are correctly rounded quotients, independent of
/// the order of the votes.
#[derive(Debug, Clone, PartialEq)]
pub struct RrfScores {
    scores: Vec<f64>,
    votes: usize,
    exact: Option<(Vec<u128>, u128)>,
}

impl RrfScores {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, slot: usize) -> f64 {
        self.scores[slot]
    }

    pub fn votes(&self) -> usize {
        self.votes
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Exact numerators and their common denominator, when available.
    pub fn exact(&self) -> Option<(&[u128], u128)> {
        self.exact.as_ref().map(|(n, d)| (&n[..], *d))
    }

    /// Compares the scores of two slots.
    pub fn cmp_slots(&self, a: usize, b: usize) -> Ordering {
        match &self.exact {
            Some((num, _)) => num[a].cmp(&num[b]),
            None => self.scores[a].total_cmp(&self.scores[b]),
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn lcm_up_to(k: usize) -> Option<u128> {
    (1..=k as u128).try_fold(1u128, |acc, x| (acc / gcd(acc, x)).checked_mul(x))
}

pub fn rrf_scores(perms: &[Permutation]) -> Result<RrfScores> {
    let first = perms
        .first()
        .ok_or_else(|| Error::InvalidParameter("no permutations to aggregate".into()))?;
    let k = first.len();
    for p in perms {
        if p.len() != k {
            return Err(Error::InvalidPermutation(format!(
                "expected {k} slots, found {}",
                p.len()
            )));
        }
    }
    let n = perms.len();
    let exact = lcm_up_to(k)
        .filter(|den| den.checked_mul(n as u128).is_some())
        .map(|den| {
            let mut num = vec![0u128; k];
            for p in perms {
                for (slot, &r) in p.ranks.iter().enumerate() {
                    num[slot] += den / (r as u128 + 1);
                }
            }
            (num, den)
        });
    let scores = match &exact {
        Some((num, den)) => num.iter().map(|&x| x as f64 / *den as f64).collect(),
        None => {
            // Sum per slot in ascending-rank order: still vote-order free.
            let mut counts = vec![vec![0usize; k]; k];
            for p in perms {
                for (slot, &r) in p.ranks.iter().enumerate() {
                    counts[slot][r] += 1;
                }
            }
            counts
                .iter()
                .map(|c| {
                    c.iter()
                        .enumerate()
                        .map(|(r, &m)| m as f64 / (r + 1) as f64)
                        .sum()
                })
                .collect()
        }
    };
    Ok(RrfScores {
        scores,
        votes: n,
        exact,
    })
}

/// All slots by descending score; ties go to the slot appearing earlier in
/// `candidate_order` (the retrieval order).
pub fn aggregate_order(scores: &RrfScores, candidate_order: &[usize]) -> Result<Vec<usize>> {
    let k = scores.len();
    let position = Permutation::from_order(candidate_order)?;
    if position.len() != k {
        return Err(Error::InvalidParameter(format!(
            "candidate order has {} slots, scores have {k}",
            position.len()
        )));
    }
    let mut slots: Vec<usize> = (0..k).collect();
    slots.sort_by(|&a, &b| {
        scores
            .cmp_slots(b, a)
            .then(position.rank(a).cmp(&position.rank(b)))
    });
    Ok(slots)
}

/// The `p` best slots, see [`aggregate_order`].
pub fn select_top_p(scores: &RrfScores, p: usize, candidate_order: &[usize]) -> Result<Vec<usize>> {
    if p == 0 || p > scores.len() {
        return Err(Error::InvalidParameter(format!(
            "p must be in [1, {}], got {p}",
            scores.len()
        )));
    }
    let mut order = aggregate_order(scores, candidate_order)?;
    order.truncate(p);
    Ok(order)
}

/// Inputs of the concentration bound: `N` votes, expected gap `mu`, and the
/// range `[a, b]` of the per-vote score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub n: usize,
    pub mu: f64,
    pub a: f64,
    pub b: f64,
}

impl BoundParams {
    /// Score range for 0-based ranks: `g` spans `[1/K, 1]`.
    pub fn zero_based(n: usize, mu: f64, k: usize) -> Self {
        Self {
            n,
            mu,
            a: 1.0 / k as f64,
            b: 1.0,
        }
    }

    /// The `[1/(K+1), 1]` range.
    pub fn one_based(n: usize, mu: f64, k: usize) -> Self {
        Self {
            n,
            mu,
            a: 1.0 / (k + 1) as f64,
            b: 1.0,
        }
    }
}

/// `exp(-N mu^2 / (2 (B - A)^2))`, capped at 1.
pub fn hoeffding_bound(params: &BoundParams) -> Result<f64> {
    let BoundParams { n, mu, a, b } = *params;
    if mu.is_nan() || mu <= 0.0 {
        return Err(Error::TheoremInapplicable(mu));
    }
    if n == 0 || a.is_nan() || b.is_nan() || b <= a {
        return Err(Error::InvalidParameter(format!(
            "need N >= 1 and B > A, got N={n}, A={a}, B={b}"
        )));
    }
    let w = b - a;
    Ok((-(n as f64) * mu * mu / (2.0 * w * w)).exp().min(1.0))
}

/// Mallows distribution over permutations: `P(s) ~ exp(-theta d(s, center))`
/// with `d` the Kendall-tau distance.
#[derive(Debug, Clone, PartialEq)]
pub struct MallowsModel {
    center: Permutation,
    theta: f64,
    /// `weights[j] = exp(-theta j)`.
    weights: Vec<f64>,
}

impl MallowsModel {
    pub fn new(center: Permutation, theta: f64) -> Result<Self> {
        if !(theta >= 0.0 && theta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dispersion must be finite and >= 0, got {theta}"
            )));
        }
        let weights = (0..center.len()).map(|j| (-theta * j as f64).exp()).collect();
        Ok(Self {
            center,
            theta,
            weights,
        })
    }

    pub fn center(&self) -> &Permutation {
        &self.center
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn k(&self) -> usize {
        self.center.len()
    }

    /// Exact probability of `perm`.
    pub fn probability(&self, perm: &Permutation) -> f64 {
        let z: f64 = (0..self.k())
            .map(|k| self.weights[..=k].iter().sum::<f64>())
            .product();
        (-self.theta * kendall_tau(perm, &self.center) as f64).exp() / z
    }
}

/// Repeated insertion: the `k`-th item of the center order goes to
/// position `j <= k` of the partial list with weight `exp(-theta (k - j))`.
pub fn mallows_sample<R: Rng + ?Sized>(model: &MallowsModel, rng: &mut R) -> Permutation {
    let center = model.center.order();
    let mut list: Vec<usize> = Vec::with_capacity(center.len());
    for (k, &slot) in center.iter().enumerate() {
        // displacement d = k - j has weight exp(-theta d)
        let total: f64 = model.weights[..=k].iter().sum();
        let mut x = rng.random::<f64>() * total;
        let mut d = k;
        for (i, w) in model.weights[..=k].iter().enumerate() {
            if x < *w {
                d = i;
                break;
            }
            x -= w;
        }
        list.insert(k - d, slot);
    }
    Permutation::from_order(&list).expect("insertion yields a permutation")
}

/// Mean of `rank(worse) - rank(better)` over `samples` draws.
pub fn estimate_rank_gap<R: Rng + ?Sized>(
    model: &MallowsModel,
    worse: usize,
    better: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    estimate_mean(model, samples, rng, |p| {
        p.rank(worse) as f64 - p.rank(better) as f64
    })
}

/// Mean of `g(rank(better)) - g(rank(worse))` with `g(r) = 1/(r+1)`: the
/// expected per-vote score margin.
pub fn estimate_score_gap<R: Rng + ?Sized>(
    model: &MallowsModel,
    worse: usize,
    better: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let g = |r: usize| 1.0 / (r + 1) as f64;
    estimate_mean(model, samples, rng, |p| g(p.rank(better)) - g(p.rank(worse)))
}

fn estimate_mean<R: Rng + ?Sized>(
    model: &MallowsModel,
    samples: usize,
    rng: &mut R,
    f: impl Fn(&Permutation) -> f64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidParameter("samples must be at least 1".into()));
    }
    let sum: f64 = (0..samples).map(|_| f(&mallows_sample(model, rng))).sum();
    Ok(sum / samples as f64)
}

/// Observed misranking frequency with its Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisrankRate {
    pub rate: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Fraction of `trials` in which the `votes`-vote aggregate score of
/// `worse` strictly exceeds that of `better`. Trials run in parallel, each
/// on its own stream derived from one draw of `rng`.
pub fn empirical_misrank_rate<R: Rng + ?Sized>(
    model: &MallowsModel,
    worse: usize,
    better: usize,
    votes: usize,
    trials: usize,
    rng: &mut R,
) -> Result<MisrankRate> {
    if votes == 0 || trials == 0 {
        return Err(Error::InvalidParameter(
            "votes and trials must be at least 1".into(),
        ));
    }
    let base = rng.random::<u64>();
    let hits = par::count_indices(trials, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        rng.set_stream(t as u64);
        let perms: Vec<Permutation> = (0..votes).map(|_| mallows_sample(model, &mut rng)).collect();
        let s = rrf_scores(&perms).expect("sampled permutations are valid");
        s.cmp_slots(worse, better) == Ordering::Greater
    });
    let rate = hits as f64 / trials as f64;
    Ok(MisrankRate {
        rate,
        std_error: (rate * (1.0 - rate) / trials as f64).sqrt(),
        trials,
    })
}

/// One line of a bound-verification sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundRow {
    pub n: usize,
    pub theta: f64,
    pub mu_hat: f64,
    pub empirical_rate: f64,
    pub std_error: f64,
    /// Bound evaluated at the estimated rank gap.
    pub bound: f64,
    pub score_gap: f64,
    /// Bound evaluated at the estimated score margin instead.
    pub score_gap_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundSweep {
    pub k: usize,
    pub votes: Vec<usize>,
    pub thetas: Vec<f64>,
    pub trials: usize,
    /// Draws used to estimate the gaps.
    pub gap_samples: usize,
    pub seed: u64,
}

/// Runs the sweep for the top two items of an identity-centered model:
/// slot 1 is the worse item, slot 0 the better one.
pub fn verify_bound(sweep: &BoundSweep) -> Result<Vec<BoundRow>> {
    if sweep.k < 2 {
        return Err(Error::InvalidParameter("need at least 2 candidates".into()));
    }
    let (worse, better) = (1, 0);
    let mut rows = Vec::new();
    for (ti, &theta) in sweep.thetas.iter().enumerate() {
        let model = MallowsModel::new(Permutation::identity(sweep.k), theta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sweep.seed);
        rng.set_stream(ti as u64);
        let mu_hat = estimate_rank_gap(&model, worse, better, sweep.gap_samples, &mut rng)?;
        let score_gap = estimate_score_gap(&model, worse, better, sweep.gap_samples, &mut rng)?;
        for &n in &sweep.votes {
            let m = empirical_misrank_rate(&model, worse, better, n, sweep.trials, &mut rng)?;
            let bound = hoeffding_bound(&BoundParams::zero_based(n, mu_hat, sweep.k))?;
            let score_gap_bound =
                hoeffding_bound(&BoundParams::zero_based(n, score_gap, sweep.k))?;
            rows.push(BoundRow {
                n,
                theta,
                mu_hat,
                empirical_rate: m.rate,
                std_error: m.std_error,
                bound,
                score_gap,
                score_gap_bound,
            });
        }
    }
    Ok(rows)
}

pub const BOUND_TSV_HEADER: &str = "N\ttheta\tmu_hat\tempirical_rate\tbound";

pub fn bound_rows_tsv(rows: &[BoundRow]) -> String {
    let mut out = String::from(BOUND_TSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6e}\n",
            r.n, r.theta, r.mu_hat, r.empirical_rate, r.bound
        ));
    }
    out
}
