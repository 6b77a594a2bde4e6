//! Discrete optimal transport.
//!
//! [`solve_exact_transport`] is a transportation simplex (the network simplex
//! specialized to the complete bipartite graph) for the small state
//! registration problems. [`sinkhorn`] solves the entropy-regularized problem
//! for large sample couplings, with epsilon scaling and log-domain absorption
//! of the scaling vectors.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Tolerance on marginal sums for the exact solver.
pub const MARGINAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub weights: DMatrix<f64>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    /// `Σ wᵢⱼ costᵢⱼ` (no entropy term).
    pub objective: f64,
    /// ∞-norm violation of the marginal constraints.
    pub marginal_residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn validate_marginal(name: &str, v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::invalid(format!("{name} marginal is empty")));
    }
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid(format!("{name} marginal has negative or non-finite entries")));
    }
    Ok(v.iter().sum())
}

fn validate_cost(cost: &DMatrix<f64>, m: usize, n: usize) -> Result<()> {
    if cost.nrows() != m {
        return Err(Error::DimensionMismatch { expected: m, found: cost.nrows() });
    }
    if cost.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: cost.ncols() });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("cost matrix has non-finite entries"));
    }
    Ok(())
}

fn residual(weights: &DMatrix<f64>, mu: &[f64], nu: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for (i, &m) in mu.iter().enumerate() {
        worst = worst.max((weights.row(i).sum() - m).abs());
    }
    for (j, &n) in nu.iter().enumerate() {
        worst = worst.max((weights.column(j).sum() - n).abs());
    }
    worst
}

fn objective(weights: &DMatrix<f64>, cost: &DMatrix<f64>) -> f64 {
    weights.iter().zip(cost.iter()).map(|(w, c)| w * c).sum()
}

/// Exact minimum-cost coupling of `mu` and `nu` under `cost`.
///
/// The returned plan is a vertex of the transport polytope. Zero-mass rows
/// and columns are removed before solving and come back as zero rows and
/// columns.
pub fn solve_exact_transport(cost: &DMatrix<f64>, mu: &[f64], nu: &[f64]) -> Result<TransportPlan> {
    let (m, n) = (mu.len(), nu.len());
    let row_mass = validate_marginal("row", mu)?;
    let col_mass = validate_marginal("column", nu)?;
    validate_cost(cost, m, n)?;
    if (row_mass - col_mass).abs() > MARGINAL_TOL {
        return Err(Error::InfeasibleMarginals { row_mass, col_mass });
    }
    if (row_mass - 1.0).abs() > MARGINAL_TOL {
        return Err(Error::invalid(format!("marginals must sum to 1, got {row_mass}")));
    }

    let rows: Vec<usize> = (0..m).filter(|&i| mu[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n).filter(|&j| nu[j] > 0.0).collect();
    let sub_mu: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    // Rescale the columns so both sides carry bitwise the same total mass.
    let scale = row_mass / col_mass;
    let sub_nu: Vec<f64> = cols.iter().map(|&j| nu[j] * scale).collect();
    let sub_cost = DMatrix::from_fn(rows.len(), cols.len(), |a, b| cost[(rows[a], cols[b])]);

    let mut solver = TransportSimplex::new(&sub_cost, &sub_mu, &sub_nu);
    let iterations = solver.run()?;
    let sub_nu_raw: Vec<f64> = cols.iter().map(|&j| nu[j]).collect();
    solver.resolve_flows(&sub_mu, &sub_nu_raw);

    let mut weights = DMatrix::zeros(m, n);
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            weights[(i, j)] = solver.flow[(a, b)].max(0.0);
        }
    }
    Ok(TransportPlan {
        objective: objective(&weights, cost),
        marginal_residual: residual(&weights, mu, nu),
        weights,
        row_marginal: mu.to_vec(),
        col_marginal: nu.to_vec(),
        converged: true,
        iterations,
    })
}

/// Transportation simplex on a dense `m × n` problem with positive marginals.
struct TransportSimplex<'a> {
    cost: &'a DMatrix<f64>,
    m: usize,
    n: usize,
    flow: DMatrix<f64>,
    basic: DMatrix<bool>,
    basis: Vec<(usize, usize)>,
}

enum PivotRule {
    Dantzig,
    Bland,
}

impl<'a> TransportSimplex<'a> {
    fn new(cost: &'a DMatrix<f64>, mu: &[f64], nu: &[f64]) -> Self {
        let (m, n) = (mu.len(), nu.len());
        let mut flow = DMatrix::zeros(m, n);
        let mut basic = DMatrix::from_element(m, n, false);
        let mut basis = Vec::with_capacity(m + n - 1);
        // North-west corner rule; exactly m + n - 1 cells form a spanning tree.
        let mut supply = mu.to_vec();
        let mut demand = nu.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let x = supply[i].min(demand[j]);
            flow[(i, j)] = x;
            basic[(i, j)] = true;
            basis.push((i, j));
            let row_done = supply[i] <= demand[j];
            supply[i] -= x;
            demand[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if i == m - 1 {
                j += 1;
            } else if j == n - 1 || row_done {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { cost, m, n, flow, basic, basis }
    }

    /// Recomputes the basic flows from the marginals by peeling leaves off
    /// the basis tree. Pivoting leaves rounding residue on cells that should
    /// carry nothing; here a leaf takes exactly its node's remaining mass,
    /// so equal masses cancel to an exact zero.
    fn resolve_flows(&mut self, mu: &[f64], nu: &[f64]) {
        let (m, n) = (self.m, self.n);
        let adjacency = self.adjacency();
        let mut degree: Vec<usize> = adjacency.iter().map(Vec::len).collect();
        let mut remaining: Vec<f64> = mu.iter().chain(nu).copied().collect();
        let mut used = DMatrix::from_element(m, n, false);
        let mut leaves: VecDeque<usize> = (0..m + n).filter(|&k| degree[k] == 1).collect();
        while let Some(node) = leaves.pop_front() {
            if degree[node] != 1 {
                continue;
            }
            let Some(&other) = adjacency[node].iter().find(|&&o| {
                let (i, j) = if node < m { (node, o - m) } else { (o, node - m) };
                !used[(i, j)]
            }) else {
                continue;
            };
            let (i, j) = if node < m { (node, other - m) } else { (other, node - m) };
            used[(i, j)] = true;
            let x = remaining[node].max(0.0);
            self.flow[(i, j)] = x;
            remaining[other] -= x;
            remaining[node] = 0.0;
            degree[node] -= 1;
            degree[other] -= 1;
            if degree[other] == 1 {
                leaves.push_back(other);
            }
        }
    }

    /// Dual potentials `u_i + v_j = c_ij` on basic cells, with `u_0 = 0`.
    fn potentials(&self, adjacency: &[Vec<usize>]) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.m, self.n);
        let mut u = vec![f64::NAN; m];
        let mut v = vec![f64::NAN; n];
        u[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &other in &adjacency[node] {
                if node < m {
                    let j = other - m;
                    if v[j].is_nan() {
                        v[j] = self.cost[(node, j)] - u[node];
                        queue.push_back(other);
                    }
                } else {
                    let j = node - m;
                    if u[other].is_nan() {
                        u[other] = self.cost[(other, j)] - v[j];
                        queue.push_back(other);
                    }
                }
            }
        }
        (u, v)
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for &(i, j) in &self.basis {
            adj[i].push(self.m + j);
            adj[self.m + j].push(i);
        }
        adj
    }

    /// Tree path between column node `j` and row node `i` as a list of cells.
    fn tree_path(&self, adjacency: &[Vec<usize>], i: usize, j: usize) -> Vec<(usize, usize)> {
        let (m, n) = (self.m, self.n);
        let start = m + j;
        let mut parent = vec![usize::MAX; m + n];
        parent[start] = start;
        let mut queue = VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            if node == i {
                break;
            }
            for &next in &adjacency[node] {
                if parent[next] == usize::MAX {
                    parent[next] = node;
                    queue.push_back(next);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = i;
        while node != start {
            let p = parent[node];
            let cell = if node < m { (node, p - m) } else { (p, node - m) };
            cells.push(cell);
            node = p;
        }
        // Ordered from column j towards row i.
        cells.reverse();
        cells
    }

    fn run(&mut self) -> Result<usize> {
        let (m, n) = (self.m, self.n);
        if m == 1 || n == 1 {
            return Ok(0);
        }
        let scale = self.cost.amax();
        if scale == 0.0 {
            return Ok(0);
        }
        let tol = 1e-12 * scale;
        let max_iter = 200 * (m + n) * (m + n) + 1000;
        let mut rule = PivotRule::Dantzig;
        let mut degenerate_run = 0usize;

        for iter in 0..max_iter {
            let adjacency = self.adjacency();
            let (u, v) = self.potentials(&adjacency);

            let mut entering = None;
            let mut best = -tol;
            'scan: for i in 0..m {
                for j in 0..n {
                    if self.basic[(i, j)] {
                        continue;
                    }
                    let r = self.cost[(i, j)] - u[i] - v[j];
                    if r < best {
                        entering = Some((i, j));
                        match rule {
                            PivotRule::Dantzig => best = r,
                            PivotRule::Bland => break 'scan,
                        }
                    }
                }
            }
            let Some((ei, ej)) = entering else {
                return Ok(iter);
            };

            // Cells alternate -, +, -, ... starting at the one sharing column ej.
            let path = self.tree_path(&adjacency, ei, ej);
            let mut theta = f64::INFINITY;
            let mut leaving = 0usize;
            for (k, &(i, j)) in path.iter().enumerate().step_by(2) {
                let x = self.flow[(i, j)];
                let better = x < theta
                    || (matches!(rule, PivotRule::Bland) && x == theta && (i, j) < path[leaving]);
                if better {
                    theta = x;
                    leaving = k;
                }
            }
            for (k, &(i, j)) in path.iter().enumerate() {
                if k % 2 == 0 {
                    self.flow[(i, j)] -= theta;
                } else {
                    self.flow[(i, j)] += theta;
                }
            }
            let (li, lj) = path[leaving];
            self.flow[(li, lj)] = 0.0;
            self.basic[(li, lj)] = false;
            self.flow[(ei, ej)] = theta;
            self.basic[(ei, ej)] = true;
            let slot = self.basis.iter().position(|&c| c == (li, lj)).expect("leaving cell is basic");
            self.basis[slot] = (ei, ej);

            if theta <= 0.0 {
                degenerate_run += 1;
                if degenerate_run > 2 * (m + n) {
                    rule = PivotRule::Bland;
                }
            } else {
                degenerate_run = 0;
            }
        }
        Err(Error::Numerical(format!("transport simplex did not terminate after {max_iter} pivots")))
    }
}

/// Parameters of the Sinkhorn solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    /// Target regularization. `None` means `0.05 · median(cost)`.
    pub epsilon: Option<f64>,
    /// Stop once the ∞-norm marginal violation is at most `tol`.
    pub tol: f64,
    /// Total iteration budget across all scaling stages.
    pub max_iter: usize,
    /// Number of halvings; the first stage runs at `2^scaling_steps · ε`.
    pub scaling_steps: u32,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self { epsilon: None, tol: 1e-6, max_iter: 10_000, scaling_steps: 3 }
    }
}

fn median(values: &DMatrix<f64>) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().collect();
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Default regularization for a cost matrix: `0.05 · median(cost)`, falling
/// back to the mean (and then to 1) for degenerate matrices.
pub fn default_epsilon(cost: &DMatrix<f64>) -> f64 {
    let med = median(cost);
    if med > 0.0 {
        return 0.05 * med;
    }
    let mean = cost.mean();
    if mean > 0.0 {
        0.05 * mean
    } else {
        1.0
    }
}

const ABSORB_ABOVE: f64 = 1e50;
const ABSORB_BELOW: f64 = 1e-50;

/// Entropy-regularized transport between `mu` and `nu`.
///
/// Runs scaling iterations on a stabilized kernel `exp((f_i + g_j - C_ij)/ε)`;
/// the scaling vectors are absorbed into the log-domain potentials whenever
/// they leave `[1e-50, 1e50]` and at every change of ε. Non-convergence is
/// reported through [`TransportPlan::converged`], not as an error.
pub fn sinkhorn(cost: &DMatrix<f64>, mu: &[f64], nu: &[f64], params: &SinkhornParams) -> Result<TransportPlan> {
    let (m, n) = (mu.len(), nu.len());
    let row_mass = validate_marginal("row", mu)?;
    let col_mass = validate_marginal("column", nu)?;
    validate_cost(cost, m, n)?;
    if (row_mass - col_mass).abs() > MARGINAL_TOL {
        return Err(Error::InfeasibleMarginals { row_mass, col_mass });
    }
    if let Some(eps) = params.epsilon {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {eps}")));
        }
    }
    if !(params.tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }

    let rows: Vec<usize> = (0..m).filter(|&i| mu[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n).filter(|&j| nu[j] > 0.0).collect();
    let reduced = rows.len() < m || cols.len() < n;
    let sub_cost;
    let c = if reduced {
        sub_cost = DMatrix::from_fn(rows.len(), cols.len(), |a, b| cost[(rows[a], cols[b])]);
        &sub_cost
    } else {
        cost
    };
    let a: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    let b: Vec<f64> = cols.iter().map(|&j| nu[j]).collect();

    let target = params.epsilon.unwrap_or_else(|| default_epsilon(c));
    let mut state = SinkhornState::new(c, &a, &b);
    let stages: Vec<f64> = (0..=params.scaling_steps)
        .rev()
        .map(|k| target * f64::powi(2.0, k as i32))
        .collect();

    let mut iterations = 0usize;
    let mut converged = false;
    for (s, &eps) in stages.iter().enumerate() {
        let last = s + 1 == stages.len();
        let stage_tol = if last { params.tol } else { params.tol * 10.0 };
        state.start_stage(eps);
        let done = state.iterate(stage_tol, params.max_iter, &mut iterations)?;
        if last {
            converged = done;
        }
        if iterations >= params.max_iter && !done {
            break;
        }
    }

    let sub_plan = state.into_plan();
    let weights = if reduced {
        let mut w = DMatrix::zeros(m, n);
        for (ra, &i) in rows.iter().enumerate() {
            for (cb, &j) in cols.iter().enumerate() {
                w[(i, j)] = sub_plan[(ra, cb)];
            }
        }
        w
    } else {
        sub_plan
    };
    Ok(TransportPlan {
        objective: objective(&weights, cost),
        marginal_residual: residual(&weights, mu, nu),
        weights,
        row_marginal: mu.to_vec(),
        col_marginal: nu.to_vec(),
        converged,
        iterations,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

struct SinkhornState<'a> {
    cost: &'a DMatrix<f64>,
    a: &'a [f64],
    b: &'a [f64],
    eps: f64,
    f: Vec<f64>,
    g: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    kernel: DMatrix<f64>,
}

impl<'a> SinkhornState<'a> {
    fn new(cost: &'a DMatrix<f64>, a: &'a [f64], b: &'a [f64]) -> Self {
        let (m, n) = (a.len(), b.len());
        Self {
            cost,
            a,
            b,
            eps: 1.0,
            f: vec![0.0; m],
            g: vec![0.0; n],
            u: vec![1.0; m],
            v: vec![1.0; n],
            kernel: DMatrix::zeros(m, n),
        }
    }

    /// Log-domain row update followed by a kernel rebuild.
    fn start_stage(&mut self, eps: f64) {
        self.absorb();
        self.eps = eps;
        let (m, n) = (self.a.len(), self.b.len());
        let mut maxes = vec![f64::NEG_INFINITY; m];
        for j in 0..n {
            let col = self.cost.column(j);
            for i in 0..m {
                maxes[i] = maxes[i].max((self.g[j] - col[i]) / eps);
            }
        }
        let mut sums = vec![0.0; m];
        for j in 0..n {
            let col = self.cost.column(j);
            for i in 0..m {
                sums[i] += ((self.g[j] - col[i]) / eps - maxes[i]).exp();
            }
        }
        for i in 0..m {
            self.f[i] = eps * self.a[i].ln() - eps * (maxes[i] + sums[i].ln());
        }
        self.rebuild_kernel();
    }

    fn rebuild_kernel(&mut self) {
        let (m, n) = (self.a.len(), self.b.len());
        let inv = 1.0 / self.eps;
        for j in 0..n {
            let gj = self.g[j];
            let col = self.cost.column(j);
            let mut kcol = self.kernel.column_mut(j);
            for i in 0..m {
                kcol[i] = ((self.f[i] + gj - col[i]) * inv).exp();
            }
        }
        self.u.iter_mut().for_each(|x| *x = 1.0);
        self.v.iter_mut().for_each(|x| *x = 1.0);
    }

    fn absorb(&mut self) {
        for (f, u) in self.f.iter_mut().zip(&self.u) {
            *f += self.eps * u.ln();
        }
        for (g, v) in self.g.iter_mut().zip(&self.v) {
            *g += self.eps * v.ln();
        }
        self.u.iter_mut().for_each(|x| *x = 1.0);
        self.v.iter_mut().for_each(|x| *x = 1.0);
    }

    /// Column scaling update fused with the product `K v`, one pass over the kernel.
    fn column_update_and_product(&mut self, kv: &mut [f64]) {
        let m = self.a.len();
        kv.iter_mut().for_each(|x| *x = 0.0);
        if m == 0 {
            return;
        }
        for (j, col) in self.kernel.as_slice().chunks_exact(m).enumerate() {
            let s = dot(col, &self.u);
            let vj = self.b[j] / s;
            self.v[j] = vj;
            if vj == 0.0 || !vj.is_finite() {
                continue;
            }
            for (o, k) in kv.iter_mut().zip(col) {
                *o += k * vj;
            }
        }
    }

    fn scalings_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite() && *x > 0.0)
    }

    fn needs_absorb(&self) -> bool {
        self.u.iter().chain(&self.v).any(|&x| !(ABSORB_BELOW..=ABSORB_ABOVE).contains(&x))
    }

    /// Returns true when the row residual drops to `tol`.
    fn iterate(&mut self, tol: f64, max_iter: usize, iterations: &mut usize) -> Result<bool> {
        let m = self.a.len();
        let mut kv = vec![0.0; m];
        let mut retried = false;
        while *iterations < max_iter {
            self.column_update_and_product(&mut kv);
            *iterations += 1;
            if !self.scalings_finite() || kv.iter().any(|x| !x.is_finite()) {
                if retried {
                    return Err(Error::Numerical("non-finite Sinkhorn scaling vector".into()));
                }
                retried = true;
                // Restart the stage from the last finite potentials.
                self.u.iter_mut().for_each(|x| *x = 1.0);
                self.v.iter_mut().for_each(|x| *x = 1.0);
                let eps = self.eps;
                self.start_stage(eps);
                continue;
            }
            let resid = (0..m).map(|i| (self.u[i] * kv[i] - self.a[i]).abs()).fold(0.0, f64::max);
            if resid <= tol {
                return Ok(true);
            }
            for i in 0..m {
                self.u[i] = self.a[i] / kv[i];
            }
            if !self.scalings_finite() {
                if retried {
                    return Err(Error::Numerical("non-finite Sinkhorn scaling vector".into()));
                }
                retried = true;
                self.u.iter_mut().for_each(|x| *x = 1.0);
                self.v.iter_mut().for_each(|x| *x = 1.0);
                let eps = self.eps;
                self.start_stage(eps);
                continue;
            }
            if self.needs_absorb() {
                self.absorb();
                self.rebuild_kernel();
            }
        }
        Ok(false)
    }

    /// `diag(u) K diag(v)`, reusing the kernel storage.
    fn into_plan(self) -> DMatrix<f64> {
        let mut k = self.kernel;
        for (j, &vj) in self.v.iter().enumerate() {
            for (i, x) in k.column_mut(j).iter_mut().enumerate() {
                *x *= self.u[i] * vj;
            }
        }
        k
    }
}
