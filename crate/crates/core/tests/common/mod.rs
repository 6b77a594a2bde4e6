//! Independent oracles and random generators shared by the integration tests.
#![allow(dead_code)]

use hmmdist::gaussian::Gaussian;
use hmmdist::hmm::{GmmHmm, Sequence};
use hmmdist::mixture::GaussianMixture;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn simplex(rng: &mut impl Rng, k: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(floor..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

/// `A Aᵀ + shift·I` with `A` uniform in `[-1, 1]`.
pub fn random_spd(rng: &mut impl Rng, d: usize, shift: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let s = &a * a.transpose() + DMatrix::identity(d, d) * shift;
    (&s + s.transpose()) * 0.5
}

pub fn random_gaussian(rng: &mut impl Rng, d: usize, spread: f64) -> Gaussian {
    let mean = DVector::from_fn(d, |_, _| rng.random_range(-spread..spread));
    Gaussian::new(mean, random_spd(rng, d, 0.2)).unwrap()
}

pub fn random_mixture(rng: &mut impl Rng, m: usize, d: usize, spread: f64) -> GaussianMixture {
    let comps = (0..m).map(|_| random_gaussian(rng, d, spread)).collect();
    GaussianMixture::new(comps, simplex(rng, m, 0.1)).unwrap()
}

pub fn random_transition(rng: &mut impl Rng, m: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        let row = simplex(rng, m, 0.05);
        for j in 0..m {
            t[(i, j)] = row[j];
        }
    }
    t
}

pub fn random_hmm(rng: &mut impl Rng, m: usize, d: usize, spread: f64) -> GmmHmm {
    let comps = (0..m).map(|_| random_gaussian(rng, d, spread)).collect();
    GmmHmm::new(random_transition(rng, m), comps).unwrap()
}

/// Basic feasible solutions of a transportation problem, by brute force
/// over every choice of `m + n − 1` basic cells.
pub fn transport_vertices(cost: &DMatrix<f64>, mu: &[f64], nu: &[f64]) -> Vec<(f64, DMatrix<f64>)> {
    let (m, n) = (mu.len(), nu.len());
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let k = m + n - 1;
    let mut out: Vec<(f64, DMatrix<f64>)> = Vec::new();
    for subset in combinations(cells.len(), k) {
        // Row sums and the first n − 1 column sums; the last column is implied.
        let mut a = DMatrix::zeros(k, k);
        let mut b = DVector::zeros(k);
        for (c, &idx) in subset.iter().enumerate() {
            let (i, j) = cells[idx];
            a[(i, c)] = 1.0;
            if j + 1 < n {
                a[(m + j, c)] = 1.0;
            }
        }
        for i in 0..m {
            b[i] = mu[i];
        }
        for j in 0..n - 1 {
            b[m + j] = nu[j];
        }
        let Some(x) = a.clone().lu().solve(&b) else { continue };
        if (&a * &x - &b).amax() > 1e-12 || x.iter().any(|&v| v < -1e-14) {
            continue;
        }
        let mut plan = DMatrix::zeros(m, n);
        for (c, &idx) in subset.iter().enumerate() {
            let (i, j) = cells[idx];
            plan[(i, j)] = x[c].max(0.0);
        }
        let objective = plan.component_mul(cost).sum();
        if !out.iter().any(|(_, p)| (p - &plan).amax() <= 1e-12) {
            out.push((objective, plan));
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Optimal objective, optimal vertex, and the gap to the next-best vertex.
pub fn brute_force_transport(cost: &DMatrix<f64>, mu: &[f64], nu: &[f64]) -> (f64, DMatrix<f64>, f64) {
    let v = transport_vertices(cost, mu, nu);
    let gap = v.get(1).map_or(f64::INFINITY, |s| s.0 - v[0].0);
    (v[0].0, v[0].1.clone(), gap)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Log-likelihood by summing over every hidden path.
pub fn path_enumeration_log_likelihood(h: &GmmHmm, s: &Sequence) -> f64 {
    let m = h.states();
    let t_len = s.len();
    let pi = h.stationary();
    let mut terms = Vec::with_capacity(m.pow(t_len as u32));
    let mut path = vec![0usize; t_len];
    loop {
        let mut lp = pi[path[0]].ln() + h.components()[path[0]].log_pdf(s.row(0));
        for t in 1..t_len {
            lp += h.transition()[(path[t - 1], path[t])].ln() + h.components()[path[t]].log_pdf(s.row(t));
        }
        terms.push(lp);
        let mut k = 0;
        loop {
            if k == t_len {
                let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                return mx + terms.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            }
            path[k] += 1;
            if path[k] < m {
                break;
            }
            path[k] = 0;
            k += 1;
        }
    }
}

/// A perfect matching between two equal-size point sets with a certificate:
/// `dual ≤ optimal ≤ primal`, where `dual` comes from potentials checked
/// against every pair.
pub struct CertifiedAssignment {
    pub primal: f64,
    pub dual: f64,
    pub assignment: Vec<usize>,
}

/// `‖x_i − y_j‖^p` for `p` = 1 or 2, with the targets stored per
/// coordinate so that a whole row of costs vectorizes.
struct DenseCost {
    xs: Vec<Vec<f64>>,
    cols: Vec<Vec<f64>>,
    p: f64,
}

impl DenseCost {
    fn new(x: &DMatrix<f64>, y: &DMatrix<f64>, p: f64) -> Self {
        assert!(p == 1.0 || p == 2.0);
        assert_eq!(x.nrows(), y.nrows());
        let xs = x.row_iter().map(|r| r.iter().copied().collect()).collect();
        let cols = (0..y.ncols()).map(|c| y.column(c).iter().copied().collect()).collect();
        Self { xs, cols, p }
    }

    fn n(&self) -> usize {
        self.xs.len()
    }

    fn cost(&self, i: usize, j: usize) -> f64 {
        let d2: f64 = self.cols.iter().zip(&self.xs[i]).map(|(col, xi)| (xi - col[j]) * (xi - col[j])).sum();
        if self.p == 2.0 {
            d2
        } else {
            d2.sqrt()
        }
    }

    /// `out[j] = cost(i, j) + prices[j]`.
    fn reduced_row(&self, i: usize, prices: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (col, &xi) in self.cols.iter().zip(&self.xs[i]) {
            for (o, &yj) in out.iter_mut().zip(col) {
                let t = xi - yj;
                *o += t * t;
            }
        }
        if self.p != 2.0 {
            for o in out.iter_mut() {
                *o = o.sqrt();
            }
        }
        for (o, p) in out.iter_mut().zip(prices) {
            *o += p;
        }
    }

    fn total(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(i, &j)| self.cost(i, j)).sum()
    }

    /// Dual value of `prices` with `u_i = min_j (c_ij + p_j)`, which makes
    /// `u_i − p_j ≤ c_ij` hold for every pair. Also returns, per source, the
    /// targets whose reduced cost undercuts the assigned one by more than
    /// `slack`, cheapest first.
    fn dual(&self, prices: &[f64], assignment: &[usize], slack: f64, limit: usize) -> (f64, Vec<Vec<usize>>, f64) {
        let n = self.n();
        let mut buf = vec![0.0; n];
        let mut dual = -prices.iter().sum::<f64>();
        let mut violated = vec![Vec::new(); n];
        let mut worst = 0.0f64;
        let mut cand: Vec<(f64, usize)> = Vec::new();
        for i in 0..n {
            self.reduced_row(i, prices, &mut buf);
            let assigned = buf[assignment[i]];
            let u = buf.iter().copied().fold(f64::INFINITY, f64::min);
            dual += u;
            worst = worst.max(assigned - u);
            if assigned - u > slack {
                cand.clear();
                cand.extend(buf.iter().enumerate().filter(|e| *e.1 < assigned - slack).map(|(j, &v)| (v, j)));
                cand.sort_by(|a, b| a.0.total_cmp(&b.0));
                violated[i].extend(cand.iter().take(limit).map(|e| e.1));
            }
        }
        (dual, violated, worst)
    }
}

/// Min-cost perfect matching between the rows of `x` and `y` for the cost
/// `‖x − y‖^p` (`p` = 1 or 2), by an ε-scaling auction over all pairs,
/// run until the certified gap is at most `rel_gap · primal`.
pub fn certified_assignment(x: &DMatrix<f64>, y: &DMatrix<f64>, p: f64, rel_gap: f64) -> CertifiedAssignment {
    let dense = DenseCost::new(x, y, p);
    let n = dense.n();
    let scale = (0..n).map(|i| dense.cost(i, 0)).fold(0.0, f64::max);
    let mut prices = vec![0.0; n];
    let mut lists = Shortlists::new(n, 16);
    let mut eps = (scale / 2.0).max(1e-12);
    loop {
        let assignment = dense_auction_phase(&dense, &mut prices, &mut lists, eps);
        let primal = dense.total(&assignment);
        // ε-complementary slackness on every pair bounds the gap by nε.
        if n as f64 * eps <= 0.5 * rel_gap * primal {
            let (dual, _, _) = dense.dual(&prices, &assignment, f64::INFINITY, 0);
            if primal - dual <= rel_gap * primal {
                return CertifiedAssignment { primal, dual, assignment };
            }
        }
        eps = (eps / 6.0).max(0.25 * rel_gap * primal / n as f64);
    }
}

/// Like [`certified_assignment`], for sizes where a dense auction is too
/// slow but a good guess of the transport map is known: `anchors[i]` stands
/// in for the image of `x_i`.
///
/// Candidate edges are the `k` nearest `y` to each anchor, plus a random
/// perfect matching. A sparse ε-scaling auction solves the candidate
/// problem; the prices are then checked against all `n²` pairs, and
/// violated pairs are added and the auction rerun until the certified gap
/// is below `rel_gap · primal`.
pub fn certified_assignment_sparse(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    anchors: &DMatrix<f64>,
    p: f64,
    k: usize,
    rel_gap: f64,
    seed: u64,
) -> CertifiedAssignment {
    let dense = DenseCost::new(x, y, p);
    let n = dense.n();
    let near = DenseCost::new(anchors, y, 2.0);
    let zero = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let mut edges: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        near.reduced_row(i, &zero, &mut buf);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.select_nth_unstable_by(k.min(n - 1), |&a, &b| buf[a].total_cmp(&buf[b]));
        idx.truncate(k.min(n));
        edges.push(idx);
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng(seed));
    for i in 0..n {
        if !edges[i].contains(&perm[i]) {
            edges[i].push(perm[i]);
        }
    }

    let max_cost = edges.iter().enumerate().flat_map(|(i, e)| e.iter().map(move |&j| (i, j))).map(|(i, j)| dense.cost(i, j)).fold(0.0, f64::max);
    let mut prices = vec![0.0; n];
    let mut eps = (max_cost / 4.0).max(1e-12);
    loop {
        let (assignment, primal, final_eps) = loop {
            let assignment = sparse_auction_phase(&edges, &dense, &mut prices, eps);
            let primal = dense.total(&assignment);
            let final_eps = 0.25 * rel_gap * primal / n as f64;
            if eps <= final_eps {
                break (assignment, primal, final_eps);
            }
            eps = (eps / 6.0).max(final_eps);
        };
        let (dual, violated, worst) = dense.dual(&prices, &assignment, eps, 24);
        let mut added = 0;
        for (e, v) in edges.iter_mut().zip(violated) {
            for j in v {
                if !e.contains(&j) {
                    e.push(j);
                    added += 1;
                }
            }
        }
        if primal - dual <= rel_gap * primal || added == 0 {
            return CertifiedAssignment { primal, dual, assignment };
        }
        // Large violations need prices to move far, which small ε does slowly.
        eps = worst.clamp(final_eps, max_cost);
    }
}

/// One Gauss-Seidel auction pass over candidate edges at fixed ε, starting
/// from no assignment.
fn sparse_auction_phase(edges: &[Vec<usize>], cost: &DenseCost, prices: &mut [f64], eps: f64) -> Vec<usize> {
    let n = prices.len();
    let mut owner = vec![usize::MAX; n];
    let mut queue: Vec<usize> = (0..n).rev().collect();
    while let Some(i) = queue.pop() {
        let (mut w1, mut w2, mut j1) = (f64::INFINITY, f64::INFINITY, usize::MAX);
        for &j in &edges[i] {
            let v = cost.cost(i, j) + prices[j];
            if v < w1 {
                w2 = w1;
                w1 = v;
                j1 = j;
            } else if v < w2 {
                w2 = v;
            }
        }
        let step = if w2.is_finite() { w2 - w1 } else { 0.0 };
        prices[j1] += step + eps;
        if owner[j1] != usize::MAX {
            queue.push(owner[j1]);
        }
        owner[j1] = i;
    }
    invert(&owner)
}

fn invert(owner: &[usize]) -> Vec<usize> {
    let mut assigned = vec![usize::MAX; owner.len()];
    for (j, &i) in owner.iter().enumerate() {
        assigned[i] = j;
    }
    assigned
}

/// Per-source shortlist of the cheapest targets from the last full scan.
/// Prices only rise during an auction, so every target off the list still
/// costs at least `bound`, and the list answers a bid exactly whenever its
/// two best entries stay below that.
struct Shortlists {
    lists: Vec<Vec<usize>>,
    bound: Vec<f64>,
    len: usize,
    scratch: Vec<(f64, usize)>,
    buf: Vec<f64>,
}

impl Shortlists {
    fn new(n: usize, len: usize) -> Self {
        Self {
            lists: vec![Vec::new(); n],
            bound: vec![f64::NEG_INFINITY; n],
            len: len.min(n.saturating_sub(1)).max(1),
            scratch: Vec::new(),
            buf: vec![0.0; n],
        }
    }

    fn rescan(&mut self, dense: &DenseCost, prices: &[f64], i: usize) {
        const CHUNK: usize = 16;
        dense.reduced_row(i, prices, &mut self.buf);
        let keep = self.len + 1;
        let top = &mut self.scratch;
        top.clear();
        let mut worst = f64::INFINITY;
        for (c, chunk) in self.buf.chunks(CHUNK).enumerate() {
            if top.len() == keep && !chunk.iter().fold(false, |acc, &v| acc | (v < worst)) {
                continue;
            }
            for (o, &v) in chunk.iter().enumerate() {
                if top.len() < keep || v < worst {
                    let pos = top.partition_point(|e| e.0 <= v);
                    top.insert(pos, (v, c * CHUNK + o));
                    top.truncate(keep);
                    if top.len() == keep {
                        worst = top[keep - 1].0;
                    }
                }
            }
        }
        self.bound[i] = if top.len() == keep { top[keep - 1].0 } else { f64::INFINITY };
        self.lists[i].clear();
        self.lists[i].extend(top.iter().take(self.len).map(|e| e.1));
    }

    /// Best and second-best reduced cost for source `i`, and the best target.
    fn top_two(&mut self, dense: &DenseCost, prices: &[f64], i: usize) -> (f64, f64, usize) {
        let mut rescanned = false;
        loop {
            let (mut w1, mut w2, mut j1) = (f64::INFINITY, f64::INFINITY, usize::MAX);
            for &j in &self.lists[i] {
                let v = dense.cost(i, j) + prices[j];
                if v < w1 {
                    w2 = w1;
                    w1 = v;
                    j1 = j;
                } else if v < w2 {
                    w2 = v;
                }
            }
            if w2 <= self.bound[i] || rescanned {
                return (w1, w2.min(self.bound[i]), j1);
            }
            self.rescan(dense, prices, i);
            rescanned = true;
        }
    }
}

/// One Gauss-Seidel auction pass over all pairs at fixed ε, starting from
/// no assignment but keeping prices and shortlists.
fn dense_auction_phase(dense: &DenseCost, prices: &mut [f64], lists: &mut Shortlists, eps: f64) -> Vec<usize> {
    let n = prices.len();
    let mut owner = vec![usize::MAX; n];
    let mut queue: Vec<usize> = (0..n).rev().collect();
    while let Some(i) = queue.pop() {
        let (w1, w2, j1) = lists.top_two(dense, prices, i);
        let step = if w2.is_finite() { w2 - w1 } else { 0.0 };
        prices[j1] += step + eps;
        if owner[j1] != usize::MAX {
            queue.push(owner[j1]);
        }
        owner[j1] = i;
    }
    invert(&owner)
}
