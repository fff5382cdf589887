//! Minibatch transport-plan construction.
//!
//! The pairing between source and target minibatches is chosen to minimize the
//! kinetic-energy path cost of the trained interpolant,
//!
//! ```text
//! c(x0, x1) = E_t ‖ dμ/dt̂ − f(μ_t) ‖² ≈ (1/K) Σ_k ‖ dμ/dt̂ − f(μ) ‖²(t_k) ,
//! ```
//!
//! a Monte-Carlo estimate over `K` sampled times. One time draw is shared by
//! every entry of a cost matrix: common random numbers keep the *ranking* of
//! candidate pairings stable, which is what the assignment solver consumes.
//! With `φ ≡ 0` and `f ≡ 0` the cost collapses to `‖x1 − x0‖²` and the
//! machinery reduces to plain squared-Euclidean minibatch optimal transport.
//!
//! Solvers: an exact minimum-cost assignment (shortest augmenting paths, with
//! lexicographic tie-breaking on the optimal set), an entropic alternative
//! (log-domain Sinkhorn), and the independent pairing used as an ablation.
//! The minibatch plan is a knowingly biased surrogate for the full transport
//! plan; no debiasing is attempted.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fields::ReferenceField;
use crate::interpolant::PathInterpolant;
use crate::numkit::{dist_sq, Matrix};
use crate::rng;

/// How interpolation times for the cost estimator are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSampling {
    /// `k` times drawn uniformly at random (default `k = 1`).
    UniformRandom { k: usize },
    /// `n` equispaced midpoints `(j + ½)/n`.
    Equispaced { n: usize },
}

impl Default for TimeSampling {
    fn default() -> Self {
        TimeSampling::UniformRandom { k: 1 }
    }
}

impl TimeSampling {
    pub fn count(&self) -> usize {
        match self {
            TimeSampling::UniformRandom { k } => *k,
            TimeSampling::Equispaced { n } => *n,
        }
    }

    /// Materialize the time draws. Random modes consume `rng`; equispaced
    /// modes ignore it.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match self {
            TimeSampling::UniformRandom { k } => {
                if *k == 0 {
                    return Err(Error::config("k", "need at least one time sample"));
                }
                Ok((0..*k).map(|_| rng.random_range(0.0..1.0)).collect())
            }
            TimeSampling::Equispaced { n } => {
                if *n == 0 {
                    return Err(Error::config("n", "need at least one time sample"));
                }
                Ok((0..*n).map(|j| (j as f64 + 0.5) / *n as f64).collect())
            }
        }
    }
}

/// Pairwise path costs between two minibatches.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    costs: Matrix,
    pub time_mode: TimeSampling,
}

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.costs.rows()
    }

    pub fn cols(&self) -> usize {
        self.costs.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs.get(i, j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.costs
    }

    pub fn from_matrix(costs: Matrix, time_mode: TimeSampling) -> Self {
        CostMatrix { costs, time_mode }
    }
}

/// How a coupling was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CouplingMode {
    ExactAssignment,
    Sinkhorn { eps: f64 },
    Independent,
}

/// Convergence report for the Sinkhorn solver.
#[derive(Debug, Clone, Copy)]
pub struct SinkhornReport {
    pub converged: bool,
    pub iterations: usize,
    pub marginal_violation: f64,
}

/// A pairing of source and target indices with its transport cost.
#[derive(Debug, Clone)]
pub struct Coupling {
    pairs: Vec<(usize, usize)>,
    plan: Option<Matrix>,
    pub total_cost: f64,
    pub mode: CouplingMode,
    pub sinkhorn: Option<SinkhornReport>,
}

impl Coupling {
    /// Index pairs, one per source row (assignment and independent modes).
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Dense plan with uniform marginals (Sinkhorn mode).
    pub fn plan(&self) -> Option<&Matrix> {
        self.plan.as_ref()
    }

    /// The permutation as `row -> col`, when the coupling is one.
    pub fn permutation(&self) -> Vec<usize> {
        let mut p = vec![0; self.pairs.len()];
        for &(i, j) in &self.pairs {
            p[i] = j;
        }
        p
    }

    /// Mean entry cost of this coupling under a given matrix.
    pub fn cost_under(&self, c: &CostMatrix) -> f64 {
        if let Some(plan) = &self.plan {
            let mut total = 0.0;
            for i in 0..plan.rows() {
                for j in 0..plan.cols() {
                    total += plan.get(i, j) * c.get(i, j);
                }
            }
            total
        } else {
            let s: f64 = self.pairs.iter().map(|&(i, j)| c.get(i, j)).sum();
            s / self.pairs.len().max(1) as f64
        }
    }

    /// Draw `count` index pairs distributed according to the coupling. For
    /// assignment/independent couplings the discrete pairs are cycled; for a
    /// Sinkhorn plan pairs are sampled from the plan probabilities.
    pub fn draw_pairs(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
        match &self.plan {
            None => (0..count).map(|k| self.pairs[k % self.pairs.len()]).collect(),
            Some(plan) => {
                let total: f64 = plan.as_slice().iter().sum();
                (0..count)
                    .map(|_| {
                        let mut u = rng.random_range(0.0..total);
                        for i in 0..plan.rows() {
                            for j in 0..plan.cols() {
                                u -= plan.get(i, j);
                                if u <= 0.0 {
                                    return (i, j);
                                }
                            }
                        }
                        (plan.rows() - 1, plan.cols() - 1)
                    })
                    .collect()
            }
        }
    }
}

/// Monte-Carlo path cost for a single pair; the time draws come from
/// `mode` with the given seed, matching [`cost_matrix`] under the same seed.
pub fn path_cost(
    interp: &PathInterpolant,
    field: &ReferenceField,
    segment: usize,
    x0: &[f64],
    x1: &[f64],
    mode: TimeSampling,
    seed: u64,
) -> Result<f64> {
    let mut stream = rng::stream(seed, "coupling/times");
    let times = mode.sample(&mut stream)?;
    let b0 = Matrix::row_vector(x0);
    let b1 = Matrix::row_vector(x1);
    let costs = pair_costs_at_times(interp, field, segment, &b0, &b1, &[(0, 0)], &times)?;
    Ok(costs[0])
}

/// Mean squared residual `‖dμ/dt̂ − f(μ)‖²` over `times` for each listed pair.
fn pair_costs_at_times(
    interp: &PathInterpolant,
    field: &ReferenceField,
    segment: usize,
    batch0: &Matrix,
    batch1: &Matrix,
    pairs: &[(usize, usize)],
    times: &[f64],
) -> Result<Vec<f64>> {
    let d = interp.dim();
    let n = pairs.len();
    let mut x0 = Matrix::zeros(n, d);
    let mut x1 = Matrix::zeros(n, d);
    for (r, &(i, j)) in pairs.iter().enumerate() {
        x0.row_mut(r).copy_from_slice(batch0.row(i));
        x1.row_mut(r).copy_from_slice(batch1.row(j));
    }
    let mut acc = vec![0.0; n];
    for &t in times {
        let tv = vec![t; n];
        let (mu, dot) = interp.mu_and_dot_batch(segment, &x0, &x1, &tv)?;
        let t_hat = interp.global_time(segment, t)?;
        let f_vals = field.eval_batch(&mu, &vec![t_hat; n])?;
        for r in 0..n {
            let sq: f64 = (0..d)
                .map(|c| {
                    let rv = dot.get(r, c) - f_vals.get(r, c);
                    rv * rv
                })
                .sum();
            acc[r] += sq;
        }
    }
    let inv = 1.0 / times.len() as f64;
    Ok(acc.into_iter().map(|a| a * inv).collect())
}

/// Pairwise path-cost matrix between two minibatches.
///
/// All entries share one set of time draws (common random numbers), so
/// per-pair noise cancels out of the pair ranking.
pub fn cost_matrix(
    interp: &PathInterpolant,
    field: &ReferenceField,
    segment: usize,
    batch0: &Matrix,
    batch1: &Matrix,
    mode: TimeSampling,
    seed: u64,
) -> Result<CostMatrix> {
    if batch0.rows() == 0 || batch1.rows() == 0 {
        return Err(Error::config("batch", "cost matrix needs nonempty batches"));
    }
    let mut stream = rng::stream(seed, "coupling/times");
    let times = mode.sample(&mut stream)?;
    let pairs: Vec<(usize, usize)> = (0..batch0.rows())
        .flat_map(|i| (0..batch1.rows()).map(move |j| (i, j)))
        .collect();
    let flat = pair_costs_at_times(interp, field, segment, batch0, batch1, &pairs, &times)?;
    if flat.iter().any(|c| !c.is_finite()) {
        return Err(Error::Training("non-finite path cost in coupling matrix".into()));
    }
    let costs = Matrix::from_vec(batch0.rows(), batch1.rows(), flat)?;
    Ok(CostMatrix {
        costs,
        time_mode: mode,
    })
}

/// Squared-Euclidean cost matrix — the zero-drift special case.
pub fn squared_euclid_matrix(batch0: &Matrix, batch1: &Matrix) -> Result<CostMatrix> {
    if batch0.cols() != batch1.cols() {
        return Err(Error::dimension("batches live in different dimensions"));
    }
    let mut costs = Matrix::zeros(batch0.rows(), batch1.rows());
    for i in 0..batch0.rows() {
        for j in 0..batch1.rows() {
            costs.set(i, j, dist_sq(batch0.row(i), batch1.row(j)));
        }
    }
    Ok(CostMatrix {
        costs,
        time_mode: TimeSampling::Equispaced { n: 1 },
    })
}

/// Exact minimum-cost assignment on a square cost matrix.
///
/// Ties on the optimal value resolve to the lexicographically smallest
/// permutation (row 0's column minimal, then row 1's, …). Tie detection uses
/// the solver's dual potentials; edges within `1e-9·max(1, max|C|)` of tight
/// participate in the tie set.
pub fn solve_assignment(c: &CostMatrix) -> Result<Coupling> {
    if c.rows() != c.cols() {
        return Err(Error::dimension(format!(
            "assignment needs a square matrix, got {}x{} (use sinkhorn for unbalanced batches)",
            c.rows(),
            c.cols()
        )));
    }
    let n = c.rows();
    let (mut row_to_col, u, v) = min_cost_assignment(c.matrix());

    let scale = c
        .matrix()
        .as_slice()
        .iter()
        .fold(1.0_f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale;
    if has_ties(c.matrix(), &row_to_col, &u, &v, tol) {
        row_to_col = lexicographic_min_matching(c.matrix(), &u, &v, tol, &row_to_col);
    }

    let total_cost: f64 = (0..n).map(|i| c.get(i, row_to_col[i])).sum();
    Ok(Coupling {
        pairs: (0..n).map(|i| (i, row_to_col[i])).collect(),
        plan: None,
        total_cost,
        mode: CouplingMode::ExactAssignment,
        sinkhorn: None,
    })
}

/// Shortest-augmenting-path assignment (Jonker–Volgenant style), returning
/// the row→col matching and dual potentials with `u[i] + v[j] ≤ c[i][j]`.
fn min_cost_assignment(c: &Matrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = c.rows();
    // 1-based with col 0 as sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

fn reduced_cost(c: &Matrix, u: &[f64], v: &[f64], i: usize, j: usize) -> f64 {
    c.get(i, j) - u[i] - v[j]
}

/// Does any row have a tight edge besides its assigned column?
fn has_ties(c: &Matrix, row_to_col: &[usize], u: &[f64], v: &[f64], tol: f64) -> bool {
    let n = c.rows();
    for i in 0..n {
        for j in 0..n {
            if j != row_to_col[i] && reduced_cost(c, u, v, i, j) <= tol {
                return true;
            }
        }
    }
    false
}

/// Lexicographically smallest perfect matching within the tight-edge graph.
///
/// Complementary slackness confines every optimal permutation to tight edges,
/// and any perfect matching on tight edges attains the optimum, so a greedy
/// column choice with a feasibility check per row is exact.
fn lexicographic_min_matching(
    c: &Matrix,
    u: &[f64],
    v: &[f64],
    tol: f64,
    fallback: &[usize],
) -> Vec<usize> {
    let n = c.rows();
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| reduced_cost(c, u, v, i, j) <= tol)
                .collect()
        })
        .collect();

    let mut chosen = vec![usize::MAX; n];
    let mut col_taken = vec![false; n];
    for i in 0..n {
        let mut fixed = false;
        for &j in &tight[i] {
            if col_taken[j] {
                continue;
            }
            col_taken[j] = true;
            chosen[i] = j;
            if rows_matchable(&tight, &col_taken, i + 1, n) {
                fixed = true;
                break;
            }
            col_taken[j] = false;
            chosen[i] = usize::MAX;
        }
        if !fixed {
            // numerically degenerate tie set; keep the solver's matching
            return fallback.to_vec();
        }
    }
    chosen
}

/// Can rows `from..n` be perfectly matched into free columns of the tight
/// graph? Kuhn's augmenting-path matching.
fn rows_matchable(tight: &[Vec<usize>], col_taken: &[bool], from: usize, n: usize) -> bool {
    let mut col_owner = vec![usize::MAX; n];
    fn augment(
        row: usize,
        tight: &[Vec<usize>],
        col_taken: &[bool],
        col_owner: &mut [usize],
        visited: &mut [bool],
    ) -> bool {
        for &j in &tight[row] {
            if col_taken[j] || visited[j] {
                continue;
            }
            visited[j] = true;
            if col_owner[j] == usize::MAX
                || augment(col_owner[j], tight, col_taken, col_owner, visited)
            {
                col_owner[j] = row;
                return true;
            }
        }
        false
    }
    for row in from..n {
        let mut visited = vec![false; n];
        if !augment(row, tight, col_taken, &mut col_owner, &mut visited) {
            return false;
        }
    }
    true
}

const SINKHORN_TOL: f64 = 1e-6;
const SINKHORN_MAX_ITERS: usize = 10_000;

/// Entropic plan with uniform marginals via log-domain Sinkhorn iterations.
///
/// Small regularization converges slowly from a cold start, so the potentials
/// are annealed: iterate briefly at a large ε, halve it toward the target, and
/// warm-start each stage from the previous one. Stops when the worst marginal
/// violation falls below `1e-6` or after 10⁴ total iterations; the report
/// carries the achieved violation either way.
pub fn solve_sinkhorn(c: &CostMatrix, eps: f64) -> Result<Coupling> {
    if eps <= 0.0 {
        return Err(Error::config("eps", "entropic regularization must be positive"));
    }
    let (n, m) = (c.rows(), c.cols());
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    // overrelaxation accelerates the linear tail; θ = 1 is the plain update
    let one_round = |f: &mut Vec<f64>, g: &mut Vec<f64>, cur_eps: f64, theta: f64| {
        for i in 0..n {
            let lse = log_sum_exp((0..m).map(|j| (g[j] - c.get(i, j)) / cur_eps));
            let target = cur_eps * (a.ln() - lse);
            f[i] = (1.0 - theta) * f[i] + theta * target;
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - c.get(i, j)) / cur_eps));
            let target = cur_eps * (b.ln() - lse);
            g[j] = (1.0 - theta) * g[j] + theta * target;
        }
    };

    let max_c = c.matrix().as_slice().iter().fold(0.0_f64, |x, v| x.max(v.abs()));
    let mut iterations = 0;
    let mut cur_eps = max_c.max(eps);
    const SCALING_ROUNDS: usize = 10;
    while cur_eps > eps && iterations + SCALING_ROUNDS < SINKHORN_MAX_ITERS {
        for _ in 0..SCALING_ROUNDS {
            one_round(&mut f, &mut g, cur_eps, 1.0);
            iterations += 1;
        }
        cur_eps = (cur_eps * 0.5).max(eps);
    }

    let mut violation = f64::INFINITY;
    while iterations < SINKHORN_MAX_ITERS {
        iterations += 1;
        one_round(&mut f, &mut g, eps, 1.8);
        violation = marginal_violation(c, &f, &g, eps, a, b);
        if violation < SINKHORN_TOL {
            break;
        }
    }

    let mut plan = Matrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            plan.set(i, j, ((f[i] + g[j] - c.get(i, j)) / eps).exp());
        }
    }
    let mut total_cost = 0.0;
    for i in 0..n {
        for j in 0..m {
            total_cost += plan.get(i, j) * c.get(i, j);
        }
    }
    // a row-greedy readout gives representative pairs for inspection
    let pairs = (0..n)
        .map(|i| {
            let mut best = 0;
            for j in 1..m {
                if plan.get(i, j) > plan.get(i, best) {
                    best = j;
                }
            }
            (i, best)
        })
        .collect();
    Ok(Coupling {
        pairs,
        plan: Some(plan),
        total_cost,
        mode: CouplingMode::Sinkhorn { eps },
        sinkhorn: Some(SinkhornReport {
            converged: violation < SINKHORN_TOL,
            iterations,
            marginal_violation: violation,
        }),
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn marginal_violation(c: &CostMatrix, f: &[f64], g: &[f64], eps: f64, a: f64, b: f64) -> f64 {
    let (n, m) = (c.rows(), c.cols());
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let row: f64 = (0..m)
            .map(|j| ((f[i] + g[j] - c.get(i, j)) / eps).exp())
            .sum();
        worst = worst.max((row - a).abs());
    }
    for j in 0..m {
        let col: f64 = (0..n)
            .map(|i| ((f[i] + g[j] - c.get(i, j)) / eps).exp())
            .sum();
        worst = worst.max((col - b).abs());
    }
    worst
}

/// Pair by incoming order; the minibatch shuffle supplies the randomness.
pub fn independent_coupling(n0: usize, n1: usize) -> Result<Coupling> {
    if n0 != n1 {
        return Err(Error::dimension(format!(
            "independent coupling needs equal batch sizes, got {n0} and {n1}"
        )));
    }
    Ok(Coupling {
        pairs: (0..n0).map(|i| (i, i)).collect(),
        plan: None,
        total_cost: 0.0,
        mode: CouplingMode::Independent,
        sinkhorn: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Activation;

    fn unit_interp(dim: usize) -> PathInterpolant {
        PathInterpolant::straight(dim, &[4], vec![0.0, 1.0]).unwrap()
    }

    fn brute_force_min(c: &Matrix) -> f64 {
        fn go(c: &Matrix, rows_done: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = c.rows();
            if rows_done == n {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    go(c, rows_done + 1, used, acc + c.get(rows_done, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(c, 0, &mut vec![false; c.cols()], 0.0, &mut best);
        best
    }

    #[test]
    fn constant_integrand_path_cost() {
        // φ ≡ 0, f ≡ 0: cost = ‖x1 − x0‖² for any draws
        let interp = unit_interp(2);
        let field = ReferenceField::Zero { dim: 2 };
        for mode in [
            TimeSampling::UniformRandom { k: 1 },
            TimeSampling::UniformRandom { k: 7 },
            TimeSampling::Equispaced { n: 5 },
        ] {
            let c = path_cost(&interp, &field, 0, &[0.0, 0.0], &[2.0, 0.0], mode, 3).unwrap();
            assert!((c - 4.0).abs() < 1e-12, "{mode:?}: {c}");
        }
    }

    #[test]
    fn matched_constant_field_has_zero_cost() {
        // f constant equal to the pair displacement
        let interp = unit_interp(3);
        let field = ReferenceField::spiral(0.2, 0.0, 3).unwrap(); // (0.2, 0, 0)
        let c = path_cost(
            &interp,
            &field,
            0,
            &[0.0, 0.0, 0.0],
            &[0.2, 0.0, 0.0],
            TimeSampling::UniformRandom { k: 4 },
            9,
        )
        .unwrap();
        assert!(c < 1e-28);
    }

    #[test]
    fn monte_carlo_cost_agrees_with_dense_quadrature() {
        // random interpolant: K = 512 draws vs 10⁴-point trapezoid
        let interp =
            PathInterpolant::seeded(2, &[8, 8], Activation::Silu, 31, vec![0.0, 1.0]).unwrap();
        let field = ReferenceField::Rotational2D { omega: 1.0 };
        let x0 = [0.7, -0.1];
        let x1 = [-0.4, 0.8];

        let k = 512;
        let mc = path_cost(
            &interp,
            &field,
            0,
            &x0,
            &x1,
            TimeSampling::UniformRandom { k },
            17,
        )
        .unwrap();

        // dense trapezoid over [0,1]
        let m = 10_000;
        let mut quad = 0.0;
        let integrand = |t: f64| -> f64 {
            let mu = interp.mu(&x0, &x1, t).unwrap();
            let dot = interp.mu_dot(&x0, &x1, t).unwrap();
            let f = field.eval(&mu, t);
            (0..2).map(|c| (dot[c] - f[c]).powi(2)).sum()
        };
        for s in 0..m {
            let t0 = s as f64 / m as f64;
            let t1 = (s + 1) as f64 / m as f64;
            quad += 0.5 * (integrand(t0) + integrand(t1)) / m as f64;
        }

        // MC standard error from an independent draw set
        let mut se_stream = rng::stream(999, "coupling/se");
        let samples: Vec<f64> = (0..k)
            .map(|_| integrand(se_stream.random_range(0.0..1.0)))
            .collect();
        let mean = samples.iter().sum::<f64>() / k as f64;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (k - 1) as f64;
        let se = (var / k as f64).sqrt();
        assert!(
            (mc - quad).abs() < 3.0 * se,
            "mc {mc}, quad {quad}, 3se {}",
            3.0 * se
        );
    }

    #[test]
    fn one_by_one_matrix_equals_path_cost() {
        let interp = unit_interp(2);
        let field = ReferenceField::Rotational2D { omega: 0.7 };
        let b0 = Matrix::row_vector(&[1.0, 0.0]);
        let b1 = Matrix::row_vector(&[0.0, 1.0]);
        let mode = TimeSampling::UniformRandom { k: 3 };
        let cm = cost_matrix(&interp, &field, 0, &b0, &b1, mode, 5).unwrap();
        let pc = path_cost(&interp, &field, 0, b0.row(0), b1.row(0), mode, 5).unwrap();
        assert_eq!(cm.get(0, 0), pc);
    }

    #[test]
    fn zero_case_reduces_to_squared_euclid() {
        let interp = unit_interp(2);
        let field = ReferenceField::Zero { dim: 2 };
        let b0 = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![-1.0, 0.5]]).unwrap();
        let b1 = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![1.0, -1.0]]).unwrap();
        let cm = cost_matrix(
            &interp,
            &field,
            0,
            &b0,
            &b1,
            TimeSampling::UniformRandom { k: 1 },
            11,
        )
        .unwrap();
        let eu = squared_euclid_matrix(&b0, &b1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((cm.get(i, j) - eu.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matrix_entries_match_per_pair_calls_with_same_seed() {
        let interp =
            PathInterpolant::seeded(2, &[6], Activation::Silu, 13, vec![0.0, 1.0]).unwrap();
        let field = ReferenceField::Rotational2D { omega: 1.0 };
        let b0 = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.5, -0.5], vec![1.0, 0.0]]).unwrap();
        let b1 = Matrix::from_rows(&[vec![-0.3, 0.3], vec![0.8, 0.8], vec![0.0, -1.0]]).unwrap();
        let mode = TimeSampling::UniformRandom { k: 2 };
        let seed = 77;
        let cm = cost_matrix(&interp, &field, 0, &b0, &b1, mode, seed).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let pc = path_cost(&interp, &field, 0, b0.row(i), b1.row(j), mode, seed).unwrap();
                assert!((cm.get(i, j) - pc).abs() < 1e-15, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn cost_matrix_is_row_permutation_equivariant() {
        let interp = unit_interp(2);
        let field = ReferenceField::Rotational2D { omega: 2.0 };
        let b0 = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let b1 = Matrix::from_rows(&[vec![1.0, 1.0], vec![-1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let mode = TimeSampling::Equispaced { n: 3 };
        let base = cost_matrix(&interp, &field, 0, &b0, &b1, mode, 1).unwrap();
        let perm = [2usize, 0, 1];
        let b0p = b0.select_rows(&perm);
        let swapped = cost_matrix(&interp, &field, 0, &b0p, &b1, mode, 1).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for j in 0..3 {
                assert_eq!(swapped.get(new_row, j), base.get(old_row, j));
            }
        }
    }

    #[test]
    fn assignment_solves_two_by_two() {
        let c = CostMatrix::from_matrix(
            Matrix::from_rows(&[vec![0.0, 10.0], vec![10.0, 0.0]]).unwrap(),
            TimeSampling::default(),
        );
        let coupling = solve_assignment(&c).unwrap();
        assert_eq!(coupling.pairs(), &[(0, 0), (1, 1)]);
        assert_eq!(coupling.total_cost, 0.0);
    }

    #[test]
    fn uniform_costs_break_ties_lexicographically() {
        for n in [2usize, 3, 5] {
            let c = CostMatrix::from_matrix(
                Matrix::from_vec(n, n, vec![1.0; n * n]).unwrap(),
                TimeSampling::default(),
            );
            let coupling = solve_assignment(&c).unwrap();
            let expect: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
            assert_eq!(coupling.pairs(), expect.as_slice(), "n = {n}");
        }
    }

    #[test]
    fn structured_ties_pick_smallest_columns() {
        // two optima: (0→0, 1→1) and (0→1, 1→0); lexicographic keeps 0→0
        let c = CostMatrix::from_matrix(
            Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 3.0]]).unwrap(),
            TimeSampling::default(),
        );
        let coupling = solve_assignment(&c).unwrap();
        assert_eq!(coupling.pairs(), &[(0, 0), (1, 1)]);
        assert_eq!(coupling.total_cost, 4.0);
    }

    #[test]
    fn assignment_matches_brute_force_on_random_matrices() {
        let mut stream = rng::stream(123, "test/assignment");
        for trial in 0..100 {
            let n = 2 + (trial % 7);
            let data: Vec<f64> = (0..n * n).map(|_| stream.random_range(0.0..10.0)).collect();
            let m = Matrix::from_vec(n, n, data).unwrap();
            let c = CostMatrix::from_matrix(m.clone(), TimeSampling::default());
            let coupling = solve_assignment(&c).unwrap();
            let brute = brute_force_min(&m);
            assert_eq!(coupling.total_cost, brute, "trial {trial} n {n}");
        }
    }

    #[test]
    fn non_square_assignment_is_rejected() {
        let c = CostMatrix::from_matrix(Matrix::zeros(2, 3), TimeSampling::default());
        assert!(solve_assignment(&c).is_err());
    }

    #[test]
    fn sinkhorn_large_eps_is_near_uniform() {
        let mut stream = rng::stream(5, "test/sinkhorn");
        let n = 4;
        let data: Vec<f64> = (0..n * n).map(|_| stream.random_range(0.0..1.0)).collect();
        let max_c = data.iter().cloned().fold(0.0, f64::max);
        let c = CostMatrix::from_matrix(Matrix::from_vec(n, n, data).unwrap(), TimeSampling::default());
        let coupling = solve_sinkhorn(&c, 100.0 * max_c).unwrap();
        let plan = coupling.plan().unwrap();
        let uniform = 1.0 / (n * n) as f64;
        for v in plan.as_slice() {
            assert!((v - uniform).abs() / uniform < 0.01);
        }
    }

    #[test]
    fn sinkhorn_small_eps_concentrates_on_assignment() {
        let c = CostMatrix::from_matrix(
            Matrix::from_rows(&[vec![0.0, 10.0], vec![10.0, 0.0]]).unwrap(),
            TimeSampling::default(),
        );
        let coupling = solve_sinkhorn(&c, 0.01).unwrap();
        let plan = coupling.plan().unwrap();
        let diag = plan.get(0, 0) + plan.get(1, 1);
        assert!(diag > 0.999, "diagonal mass {diag}");
    }

    #[test]
    fn sinkhorn_marginals_are_uniform_and_entries_nonnegative() {
        let mut stream = rng::stream(8, "test/sinkhorn2");
        let n = 5;
        let data: Vec<f64> = (0..n * n).map(|_| stream.random_range(0.0..3.0)).collect();
        let c = CostMatrix::from_matrix(Matrix::from_vec(n, n, data).unwrap(), TimeSampling::default());
        let coupling = solve_sinkhorn(&c, 0.1).unwrap();
        let plan = coupling.plan().unwrap();
        assert!(plan.as_slice().iter().all(|&v| v >= 0.0));
        for i in 0..n {
            let row: f64 = (0..n).map(|j| plan.get(i, j)).sum();
            assert!((row - 1.0 / n as f64).abs() < 1e-6);
        }
        for j in 0..n {
            let col: f64 = (0..n).map(|i| plan.get(i, j)).sum();
            assert!((col - 1.0 / n as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn sinkhorn_cost_dominates_assignment_and_gap_shrinks() {
        let mut stream = rng::stream(24, "test/sinkhorn3");
        let n = 5;
        let data: Vec<f64> = (0..n * n).map(|_| stream.random_range(0.0..5.0)).collect();
        let c = CostMatrix::from_matrix(Matrix::from_vec(n, n, data).unwrap(), TimeSampling::default());
        let exact = solve_assignment(&c).unwrap().total_cost / n as f64;
        let mut prev_gap = f64::INFINITY;
        for eps in [1.0, 0.1, 0.01] {
            let coupling = solve_sinkhorn(&c, eps).unwrap();
            let report = coupling.sinkhorn.unwrap();
            assert!(
                report.converged,
                "eps {eps}: stopped at violation {} after {} iterations",
                report.marginal_violation, report.iterations
            );
            let gap = coupling.total_cost - exact;
            // a plan feasible only up to the violation can undercut the
            // optimum by at most (n+m)·violation·max|C|
            let max_c = c.matrix().as_slice().iter().fold(0.0_f64, |x, v| x.max(*v));
            let slack = 2.0 * n as f64 * report.marginal_violation * max_c;
            assert!(gap >= -slack, "plan cost {gap:+e} below optimum at eps {eps}");
            assert!(gap <= prev_gap + slack, "gap grew at eps {eps}");
            prev_gap = gap;
        }
    }

    #[test]
    fn sinkhorn_reports_nonconvergence_honestly() {
        // this instance is nearly degenerate at ε = 0.1: two pairings are
        // almost tied and the iteration cannot reach 1e-6 within the cap
        let mut stream = rng::stream(21, "test/sinkhorn3");
        let n = 5;
        let data: Vec<f64> = (0..n * n).map(|_| stream.random_range(0.0..5.0)).collect();
        let c = CostMatrix::from_matrix(Matrix::from_vec(n, n, data).unwrap(), TimeSampling::default());
        let coupling = solve_sinkhorn(&c, 0.1).unwrap();
        let report = coupling.sinkhorn.unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 10_000);
        assert!(report.marginal_violation >= 1e-6);
        assert!(report.marginal_violation < 1e-4, "still nearly feasible");
    }

    #[test]
    fn euclid_assignment_on_sorted_line_is_monotone() {
        // sorted 1-D points with sorted targets: the optimal matching is the
        // order-preserving one
        let b0 = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.5], vec![4.0]]).unwrap();
        let b1 = Matrix::from_rows(&[vec![0.3], vec![1.2], vec![2.4], vec![4.4]]).unwrap();
        let c = squared_euclid_matrix(&b0, &b1).unwrap();
        let coupling = solve_assignment(&c).unwrap();
        assert_eq!(coupling.permutation(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn independent_coupling_pairs_in_order() {
        let c = independent_coupling(4, 4).unwrap();
        assert_eq!(c.pairs(), &[(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(independent_coupling(3, 4).is_err());
    }

    #[test]
    fn independent_pair_cost_approaches_matrix_mean() {
        // shuffled batches: E[c(i, i)] over shuffles = mean of the matrix
        let mut stream = rng::stream(42, "test/independent");
        let n = 8;
        let data: Vec<f64> = (0..n * n).map(|_| stream.random_range(0.0..1.0)).collect();
        let m = Matrix::from_vec(n, n, data).unwrap();
        let c = CostMatrix::from_matrix(m.clone(), TimeSampling::default());
        let matrix_mean: f64 = m.as_slice().iter().sum::<f64>() / (n * n) as f64;

        let trials = 20_000;
        let mut acc = 0.0;
        let mut samples = Vec::with_capacity(trials);
        for _ in 0..trials {
            // random permutation of target rows = shuffled arrival order
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = stream.random_range(0..=i);
                perm.swap(i, j);
            }
            let coupling = independent_coupling(n, n).unwrap();
            let cost: f64 = coupling
                .pairs()
                .iter()
                .map(|&(i, _)| m.get(i, perm[i]))
                .sum::<f64>()
                / n as f64;
            acc += cost;
            samples.push(cost);
        }
        let mean = acc / trials as f64;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
            / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - matrix_mean).abs() < 3.0 * se,
            "mean {mean} vs matrix mean {matrix_mean}"
        );
        let _ = c;
    }
}
