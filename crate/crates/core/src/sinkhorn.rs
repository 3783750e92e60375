//! Discrete optimal transport: log-domain Sinkhorn, an exhaustive oracle for
//! tiny instances, and the barycentric projection of a plan onto a map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CostMatrix, Point2, SampleBatch};

/// Cap on the adaptive relaxation weight.
pub const DEFAULT_OVER_RELAXATION: f64 = 1.98;

pub const DEFAULT_EPSILON_SCALING: f64 = 0.5;

/// Marginal tolerance of the intermediate annealing stages.
const STAGE_TOLERANCE: f64 = 1e-4;

/// Plain sweeps between two estimates of the contraction rate.
const RATE_WINDOW: usize = 40;

/// Below this the iterations get slow and rounding starts to bite.
pub const SMALL_EPSILON_WARNING: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Bound on the L1 deviation of the row marginal (columns are exact after each sweep).
    pub tolerance: f64,
    /// Upper bound on the relaxation weight ω of the dual updates,
    /// `f ← (1 − ω) f + ω f_sinkhorn`. With 1 the iteration is plain Sinkhorn;
    /// above 1 the weight is picked from the observed contraction rate of the
    /// plain sweeps once that rate settles.
    pub over_relaxation: f64,
    /// Geometric factor for a cold start that anneals ε down from the largest
    /// cost; `None` runs every sweep at the target ε. Ignored with a warm start.
    pub epsilon_scaling: Option<f64>,
    #[serde(skip)]
    pub warm_start: Option<(Vec<f64>, Vec<f64>)>,
}

impl SinkhornConfig {
    pub fn new(epsilon: f64) -> Self {
        SinkhornConfig {
            epsilon,
            max_iterations: 10_000,
            tolerance: 1e-6,
            over_relaxation: DEFAULT_OVER_RELAXATION,
            epsilon_scaling: Some(DEFAULT_EPSILON_SCALING),
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteOtSolution {
    /// Source potential in cost units, gauge fixed so its mean is zero.
    pub u_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    /// Row-major `rows × cols` plan.
    pub plan: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub epsilon: f64,
    pub iterations_used: usize,
    /// ‖row sums − a‖₁ + ‖column sums − b‖₁.
    pub marginal_error: f64,
    pub converged: bool,
}

impl DiscreteOtSolution {
    pub fn plan_at(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.cols + j]
    }

    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        self.plan
            .iter()
            .zip(cost.entries())
            .map(|(p, c)| p * c)
            .sum()
    }
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_weights(w: &[f64], what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::InvalidWeights(format!("{what} is empty")));
    }
    if w.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidWeights(format!(
            "{what} has a non-positive entry"
        )));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidWeights(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// Max-shifted log Σ exp, fixed left-to-right reduction order.
#[inline]
fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let mut s = 0.0;
    for v in values {
        let d = v - m;
        // e^-50 is below the f64 resolution of a sum whose largest term is 1
        if d > -50.0 {
            s += d.exp();
        }
    }
    m + s.ln()
}

/// Plan entries `exp((f_i + g_j − c_ij)/ε) a_i b_j` and the total marginal error.
fn plan_and_error(
    cost: &CostMatrix,
    log_a: &[f64],
    log_b: &[f64],
    f: &[f64],
    g: &[f64],
    a: &[f64],
    b: &[f64],
    eps: f64,
) -> (Vec<f64>, f64) {
    let (n, m) = (cost.rows(), cost.cols());
    let mut plan = vec![0.0; n * m];
    let mut col = vec![0.0; m];
    let mut err = 0.0;
    for i in 0..n {
        let c = cost.row(i);
        let row = &mut plan[i * m..(i + 1) * m];
        let mut s = 0.0;
        for j in 0..m {
            let p = ((f[i] + g[j] - c[j]) / eps + log_a[i] + log_b[j]).exp();
            row[j] = p;
            s += p;
            col[j] += p;
        }
        err += (s - a[i]).abs();
    }
    err += col.iter().zip(b).map(|(s, bj)| (s - bj).abs()).sum::<f64>();
    (plan, err)
}

/// Entropic OT between weighted point sets, computed entirely in log space.
///
/// Alternates `f_i = −ε log Σ_j b_j exp((g_j − c_ij)/ε)` and the symmetric
/// update for `g` until the row marginal is within `tolerance` (L1).
pub fn sinkhorn_log(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    cfg: &SinkhornConfig,
) -> Result<DiscreteOtSolution> {
    let (n, m) = (cost.rows(), cost.cols());
    check_weights(a, "source weights")?;
    check_weights(b, "target weights")?;
    if a.len() != n || b.len() != m {
        return Err(Error::DimensionMismatch {
            expected: n * m,
            got: a.len() * b.len(),
            context: "weights vs cost matrix",
        });
    }
    let eps = cfg.epsilon;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    if eps < SMALL_EPSILON_WARNING {
        log::warn!(
            "sinkhorn epsilon {eps} is below {SMALL_EPSILON_WARNING}; expect slow convergence"
        );
    }
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let (mut f, mut g) = match &cfg.warm_start {
        Some((u, v)) => {
            if u.len() != n || v.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: n + m,
                    got: u.len() + v.len(),
                    context: "warm start vectors",
                });
            }
            (u.clone(), v.clone())
        }
        None => (vec![0.0; n], vec![0.0; m]),
    };

    let omega_max = cfg.over_relaxation;
    if !(omega_max >= 1.0 && omega_max < 2.0) {
        return Err(Error::InvalidParameter(format!(
            "over-relaxation must lie in [1, 2), got {omega_max}"
        )));
    }
    let scaling = match (cfg.epsilon_scaling, &cfg.warm_start) {
        (Some(s), None) => {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "epsilon scaling factor must lie in (0, 1), got {s}"
                )));
            }
            Some(s)
        }
        _ => None,
    };
    let mut iterations = 0;
    let mut cost_t = None;
    if let Some(s) = scaling {
        let mut stage_eps = cost.max();
        loop {
            stage_eps *= s;
            // keep at least one sweep for the target ε
            if stage_eps <= eps || iterations + 1 >= cfg.max_iterations {
                break;
            }
            let ct = cost_t.get_or_insert_with(|| cost.transpose());
            let problem = Problem {
                cost,
                cost_t: ct,
                log_a: &log_a,
                log_b: &log_b,
                a,
                b,
                eps: stage_eps,
            };
            iterations += problem.iterate(
                &mut f,
                &mut g,
                STAGE_TOLERANCE.max(cfg.tolerance),
                cfg.max_iterations - iterations - 1,
                omega_max,
            )?;
        }
    }
    let (mut plan, mut err) = plan_and_error(cost, &log_a, &log_b, &f, &g, a, b, eps);
    if err > cfg.tolerance && iterations < cfg.max_iterations {
        let ct = cost_t.get_or_insert_with(|| cost.transpose());
        let problem = Problem {
            cost,
            cost_t: ct,
            log_a: &log_a,
            log_b: &log_b,
            a,
            b,
            eps,
        };
        iterations += problem.iterate(
            &mut f,
            &mut g,
            cfg.tolerance,
            cfg.max_iterations - iterations,
            omega_max,
        )?;
        (plan, err) = plan_and_error(cost, &log_a, &log_b, &f, &g, a, b, eps);
    }

    let shift = f.iter().sum::<f64>() / n as f64;
    for x in &mut f {
        *x -= shift;
    }
    for y in &mut g {
        *y += shift;
    }
    if plan.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            loss: "sinkhorn plan".into(),
            step: iterations,
        });
    }
    Ok(DiscreteOtSolution {
        u_hat: f,
        v_hat: g,
        plan,
        rows: n,
        cols: m,
        epsilon: eps,
        iterations_used: iterations,
        marginal_error: err,
        converged: err <= cfg.tolerance,
    })
}

struct Problem<'a> {
    cost: &'a CostMatrix,
    cost_t: &'a CostMatrix,
    log_a: &'a [f64],
    log_b: &'a [f64],
    a: &'a [f64],
    b: &'a [f64],
    eps: f64,
}

impl Problem<'_> {
    fn sweep(&self, transposed: bool, dual: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let (c, log_w) = if transposed {
            (self.cost_t, self.log_a)
        } else {
            (self.cost, self.log_b)
        };
        let k = dual.len();
        for (r, o) in out.iter_mut().enumerate() {
            let row = c.row(r);
            for q in 0..k {
                scratch[q] = (dual[q] - row[q]) / self.eps + log_w[q];
            }
            *o = log_sum_exp(&scratch[..k]);
        }
    }

    /// Relaxed alternating updates of `(f, g)` until the L1 marginal deviation
    /// drops below `tolerance` or `budget` iterations pass. Returns the count.
    fn iterate(
        &self,
        f: &mut Vec<f64>,
        g: &mut Vec<f64>,
        tolerance: f64,
        budget: usize,
        omega_max: f64,
    ) -> Result<usize> {
        let (n, m, eps) = (f.len(), g.len(), self.eps);
        let (log_a, log_b, a, b) = (self.log_a, self.log_b, self.a, self.b);
        let mut scratch = vec![0.0; n.max(m)];
        // row_lse[i] = log Σ_j b_j exp((g_j − c_ij)/ε), col_lse[j] = log Σ_i a_i exp((f_i − c_ij)/ε)
        let mut row_lse = vec![0.0; n];
        let mut col_lse = vec![0.0; m];
        let mut iterations = 0;
        self.sweep(false, g, &mut row_lse, &mut scratch);
        let mut omega = 1.0;
        let mut omega_cap = omega_max;
        // error at the start of the current rate window, and the previous rate
        let mut window_start = f64::INFINITY;
        let mut last_rate = f64::NAN;
        // state to fall back to when a relaxed phase blows up
        let mut checkpoint: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        loop {
            for (fi, l) in f.iter_mut().zip(&row_lse) {
                *fi = (1.0 - omega) * *fi - omega * eps * l;
            }
            self.sweep(true, f, &mut col_lse, &mut scratch);
            for (gj, l) in g.iter_mut().zip(&col_lse) {
                *gj = (1.0 - omega) * *gj - omega * eps * l;
            }
            iterations += 1;
            if f.iter().chain(g.iter()).any(|x| x.is_nan()) {
                return Err(Error::NonFinite {
                    loss: "sinkhorn potentials".into(),
                    step: iterations,
                });
            }
            self.sweep(false, g, &mut row_lse, &mut scratch);
            // Marginals of the current (f, g) from the sweeps already done.
            let row_err: f64 = (0..n)
                .map(|i| ((f[i] / eps + log_a[i] + row_lse[i]).exp() - a[i]).abs())
                .sum();
            let col_err: f64 = (0..m)
                .map(|j| ((g[j] / eps + log_b[j] + col_lse[j]).exp() - b[j]).abs())
                .sum();
            let total = row_err + col_err;
            // headroom for rounding when the plan is rebuilt
            if total <= 0.99 * tolerance || iterations >= budget {
                break;
            }

            if omega > 1.0 {
                let (_, _, base) = checkpoint
                    .as_ref()
                    .expect("relaxed phase without checkpoint");
                if !(total < 1e3 * base) {
                    let (f0, g0, base) = checkpoint.take().expect("checked above");
                    log::debug!(
                        "sinkhorn relaxation {omega:.4} diverged at step {iterations}, backing off"
                    );
                    *f = f0;
                    *g = g0;
                    omega_cap = 1.0 + (omega - 1.0) / 2.0;
                    omega = 1.0;
                    window_start = base;
                    last_rate = f64::NAN;
                    self.sweep(false, g, &mut row_lse, &mut scratch);
                }
                continue;
            }
            if omega_cap > 1.0 && iterations % RATE_WINDOW == 0 {
                let rate = (total / window_start).powf(1.0 / RATE_WINDOW as f64);
                window_start = total;
                // Two agreeing windows mean the slow linear mode dominates.
                if rate < 1.0 && (rate.ln() / last_rate.ln() - 1.0).abs() < 0.1 {
                    omega = (2.0 / (1.0 + (1.0 - rate).sqrt())).min(omega_cap);
                    checkpoint = Some((f.clone(), g.clone(), total));
                }
                last_rate = rate;
            }
        }
        Ok(iterations)
    }
}

/// Exact OT plan and cost for tiny instances.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    pub plan: Vec<f64>,
    pub cost: f64,
    /// For the uniform square case: the chosen assignment `i → assignment[i]`.
    pub assignment: Option<Vec<usize>>,
}

pub const MAX_PERMUTATION_SIZE: usize = 8;
pub const MAX_VERTEX_SEARCH_CELLS: usize = 12;

/// Exhaustive minimiser of ⟨π, c⟩ over the transport polytope.
///
/// Uniform square instances with `n ≤ 8` enumerate permutations in
/// lexicographic order and keep the first minimiser. Other instances with at
/// most 12 cells enumerate every basic feasible solution (spanning-tree
/// supports of the bipartite graph).
pub fn brute_force_ot(cost: &CostMatrix, a: &[f64], b: &[f64]) -> Result<ExactSolution> {
    let (n, m) = (cost.rows(), cost.cols());
    check_weights(a, "source weights")?;
    check_weights(b, "target weights")?;
    if a.len() != n || b.len() != m {
        return Err(Error::DimensionMismatch {
            expected: n * m,
            got: a.len() * b.len(),
            context: "weights vs cost matrix",
        });
    }
    let uniform = n == m
        && a.iter()
            .chain(b)
            .all(|w| (w - 1.0 / n as f64).abs() < 1e-12);
    if uniform && n <= MAX_PERMUTATION_SIZE {
        return Ok(best_permutation(cost));
    }
    if n * m > MAX_VERTEX_SEARCH_CELLS {
        return Err(Error::InstanceTooLarge {
            rows: n,
            cols: m,
            limit: "uniform square n <= 8 or n*m <= 12",
        });
    }
    vertex_search(cost, a, b)
}

fn best_permutation(cost: &CostMatrix) -> ExactSolution {
    let n = cost.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let c: f64 = perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let mut plan = vec![0.0; n * n];
    for (i, &j) in best.iter().enumerate() {
        plan[i * n + j] = 1.0 / n as f64;
    }
    ExactSolution {
        plan,
        cost: best_cost / n as f64,
        assignment: Some(best),
    }
}

/// Advances to the next permutation in lexicographic order.
fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn vertex_search(cost: &CostMatrix, a: &[f64], b: &[f64]) -> Result<ExactSolution> {
    let (n, m) = (cost.rows(), cost.cols());
    let cells = n * m;
    let basis = n + m - 1;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1u32 << cells) {
        if mask.count_ones() as usize != basis {
            continue;
        }
        if let Some(flow) = tree_flow(mask, n, m, a, b) {
            let c: f64 = flow.iter().zip(cost.entries()).map(|(f, c)| f * c).sum();
            if best.as_ref().map_or(true, |(bc, _)| c < *bc - 1e-15) {
                best = Some((c, flow));
            }
        }
    }
    let (cost, plan) = best.expect("the northwest-corner vertex always exists");
    Ok(ExactSolution {
        plan,
        cost,
        assignment: None,
    })
}

/// Solves the marginal constraints on a candidate spanning-tree support by
/// peeling leaves. Returns `None` unless the support is a tree with a
/// non-negative flow.
fn tree_flow(mask: u32, n: usize, m: usize, a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let mut active: Vec<(usize, usize)> = (0..n * m)
        .filter(|k| mask & (1 << k) != 0)
        .map(|k| (k / m, k % m))
        .collect();
    let mut supply: Vec<f64> = a.to_vec();
    let mut demand: Vec<f64> = b.to_vec();
    let mut flow = vec![0.0; n * m];
    while !active.is_empty() {
        let mut degree = vec![0usize; n + m];
        for &(i, j) in &active {
            degree[i] += 1;
            degree[n + j] += 1;
        }
        // A forest on n + m nodes with n + m − 1 edges always has a leaf; no leaf means a cycle.
        let leaf = active
            .iter()
            .position(|&(i, j)| degree[i] == 1 || degree[n + j] == 1)?;
        let (i, j) = active.swap_remove(leaf);
        let x = if degree[i] == 1 { supply[i] } else { demand[j] };
        if x < -1e-12 {
            return None;
        }
        let x = x.max(0.0);
        flow[i * m + j] = x;
        supply[i] -= x;
        demand[j] -= x;
    }
    let residual: f64 = supply.iter().chain(&demand).map(|r| r.abs()).sum();
    (residual < 1e-9).then_some(flow)
}

/// Maps each source atom to the barycenter of its conditional plan row:
/// `T(x_i) = Σ_j π_ij y_j / Σ_j π_ij`.
pub fn barycentric_map(plan: &[f64], ys: &SampleBatch) -> Result<Vec<Point2>> {
    let m = ys.len();
    if m == 0 || plan.len() % m != 0 {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: plan.len(),
            context: "plan columns vs target batch",
        });
    }
    plan.chunks_exact(m)
        .enumerate()
        .map(|(i, row)| {
            let mass: f64 = row.iter().sum();
            if !(mass > 0.0) {
                return Err(Error::ZeroRowMass(i));
            }
            let mut acc = Point2::ORIGIN;
            for (p, y) in row.iter().zip(&ys.points) {
                acc = acc + *y * *p;
            }
            Ok(acc * (1.0 / mass))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cost_matrix, sample_four_balls, sample_unit_ball, Role};
    use crate::rng::seeded;
    use rand::Rng;

    fn batch(points: &[(f64, f64)], role: Role) -> SampleBatch {
        SampleBatch::new(
            points.iter().map(|&(a, b)| Point2::new(a, b)).collect(),
            role,
        )
    }

    fn random_instance(seed: u64, n: usize) -> (SampleBatch, SampleBatch, CostMatrix) {
        let mut rng = seeded(seed, 0);
        let mut pts = |role| {
            SampleBatch::new(
                (0..n)
                    .map(|_| Point2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                    .collect(),
                role,
            )
        };
        let x = pts(Role::Source);
        let y = pts(Role::Target);
        let c = cost_matrix(&x, &y).unwrap();
        (x, y, c)
    }

    #[test]
    fn one_by_one() {
        let c = CostMatrix::from_vec(1, 1, vec![3.7]).unwrap();
        let s = sinkhorn_log(&c, &[1.0], &[1.0], &SinkhornConfig::new(0.3)).unwrap();
        assert_eq!(s.plan, vec![1.0]);
        assert_eq!(s.marginal_error, 0.0);
        assert!(s.converged);
    }

    #[test]
    fn rejects_bad_weights() {
        let c = CostMatrix::from_vec(2, 2, vec![0.0; 4]).unwrap();
        let cfg = SinkhornConfig::new(0.1);
        assert!(matches!(
            sinkhorn_log(&c, &[1.0, 0.0], &[0.5, 0.5], &cfg),
            Err(Error::InvalidWeights(_))
        ));
        assert!(matches!(
            sinkhorn_log(&c, &[0.6, 0.6], &[0.5, 0.5], &cfg),
            Err(Error::InvalidWeights(_))
        ));
    }

    #[test]
    fn reports_non_convergence() {
        let (_, _, c) = random_instance(1, 6);
        let cfg = SinkhornConfig {
            max_iterations: 1,
            ..SinkhornConfig::new(0.005)
        };
        let w = uniform_weights(6);
        let s = sinkhorn_log(&c, &w, &w, &cfg).unwrap();
        assert!(!s.converged);
        assert_eq!(s.iterations_used, 1);
        assert!(s.marginal_error > cfg.tolerance);
    }

    #[test]
    fn matches_permutation_oracle() {
        let w = uniform_weights(6);
        for seed in 0..10 {
            let (_, _, c) = random_instance(100 + seed, 6);
            let exact = brute_force_ot(&c, &w, &w).unwrap();
            let s = sinkhorn_log(&c, &w, &w, &SinkhornConfig::new(0.005)).unwrap();
            assert!(s.converged);
            let sc = s.transport_cost(&c);
            assert!(exact.cost <= sc + 1e-12);
            assert!(
                (sc - exact.cost).abs() <= 0.01 * exact.cost.max(1e-12),
                "{sc} vs {}",
                exact.cost
            );
        }
    }

    #[test]
    fn barycentric_targets_near_assignment() {
        let w = uniform_weights(6);
        let mut checked = 0;
        for seed in 0..20 {
            let (_, y, c) = random_instance(200 + seed, 6);
            let exact = brute_force_ot(&c, &w, &w).unwrap();
            // Skip near ties: at this ε the entropic plan splits mass between
            // two matchings whose total costs differ by less than 0.1.
            let mut totals = Vec::new();
            all_permutation_costs(&c, &mut (0..6).collect::<Vec<_>>(), 0, &mut totals);
            totals.sort_by(f64::total_cmp);
            if totals[1] - totals[0] < 0.1 {
                continue;
            }
            checked += 1;
            let s = sinkhorn_log(&c, &w, &w, &SinkhornConfig::new(0.005)).unwrap();
            let t = barycentric_map(&s.plan, &y).unwrap();
            for (i, &j) in exact.assignment.as_ref().unwrap().iter().enumerate() {
                let d = (t[i] - y.points[j]).norm();
                assert!(d < 0.05, "seed {seed} row {i}: {d}");
            }
        }
        assert!(checked >= 5, "only {checked} instances without near ties");
    }

    fn all_permutation_costs(c: &CostMatrix, perm: &mut Vec<usize>, k: usize, out: &mut Vec<f64>) {
        if k == perm.len() {
            out.push(perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum());
            return;
        }
        for l in k..perm.len() {
            perm.swap(k, l);
            all_permutation_costs(c, perm, k + 1, out);
            perm.swap(k, l);
        }
    }

    #[test]
    fn brute_force_examples() {
        let c = CostMatrix::from_vec(2, 2, vec![0.0, 5.0, 5.0, 0.0]).unwrap();
        let w = uniform_weights(2);
        let s = brute_force_ot(&c, &w, &w).unwrap();
        assert_eq!(s.cost, 0.0);
        assert_eq!(s.assignment, Some(vec![0, 1]));

        let x = batch(&[(0.0, 0.0), (2.0, 0.0)], Role::Source);
        let y = batch(&[(1.0, 1.0), (3.0, 1.0)], Role::Target);
        let c = cost_matrix(&x, &y).unwrap();
        // identity: (2 + 2)/2 = 2; crossing: (10 + 2)/2 = 6
        let s = brute_force_ot(&c, &w, &w).unwrap();
        assert_eq!(s.assignment, Some(vec![0, 1]));
        assert_eq!(s.cost, 2.0);
    }

    #[test]
    fn brute_force_ties_pick_lexicographically_smallest() {
        let c = CostMatrix::from_vec(3, 3, vec![1.0; 9]).unwrap();
        let w = uniform_weights(3);
        assert_eq!(
            brute_force_ot(&c, &w, &w).unwrap().assignment,
            Some(vec![0, 1, 2])
        );
    }

    #[test]
    fn brute_force_general_weights() {
        // 2 x 3 with non-uniform weights; compare against a fine grid search over
        // the two free parameters of the polytope.
        let c = CostMatrix::from_vec(2, 3, vec![1.0, 2.0, 4.0, 3.0, 1.0, 0.5]).unwrap();
        let a = [0.4, 0.6];
        let b = [0.3, 0.3, 0.4];
        let s = brute_force_ot(&c, &a, &b).unwrap();
        let mut best = f64::INFINITY;
        // vertices are multiples of 0.1, which this 0.001 grid contains
        let steps = 300;
        for p in 0..=steps {
            for q in 0..=steps {
                let x00 = 0.3 * p as f64 / steps as f64;
                let x01 = 0.3 * q as f64 / steps as f64;
                let x02 = a[0] - x00 - x01;
                let (x10, x11, x12) = (b[0] - x00, b[1] - x01, b[2] - x02);
                if [x02, x10, x11, x12].iter().all(|v| *v >= -1e-12) {
                    let v = x00 * 1.0 + x01 * 2.0 + x02 * 4.0 + x10 * 3.0 + x11 * 1.0 + x12 * 0.5;
                    best = best.min(v);
                }
            }
        }
        assert!((s.cost - best).abs() < 1e-9, "{} vs {best}", s.cost);
        let rows: Vec<f64> = s.plan.chunks(3).map(|r| r.iter().sum()).collect();
        assert!((rows[0] - 0.4).abs() < 1e-12 && (rows[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn brute_force_too_large() {
        let c = CostMatrix::from_vec(9, 9, vec![0.0; 81]).unwrap();
        let w = uniform_weights(9);
        assert!(matches!(
            brute_force_ot(&c, &w, &w),
            Err(Error::InstanceTooLarge { .. })
        ));
    }

    #[test]
    fn barycentric_examples() {
        let y = batch(&[(1.0, 2.0), (-3.0, 0.5), (0.0, 4.0)], Role::Target);
        let n = 3.0;
        let mut id = vec![0.0; 9];
        for i in 0..3 {
            id[i * 3 + i] = 1.0 / n;
        }
        assert_eq!(barycentric_map(&id, &y).unwrap(), y.points);

        let a = [0.2, 0.5, 0.3];
        let b = [0.1, 0.6, 0.3];
        let prod: Vec<f64> = a
            .iter()
            .flat_map(|ai| b.iter().map(move |bj| ai * bj))
            .collect();
        let bary = y
            .points
            .iter()
            .zip(&b)
            .fold(Point2::ORIGIN, |acc, (p, w)| acc + *p * *w);
        for t in barycentric_map(&prod, &y).unwrap() {
            assert!((t - bary).norm() < 1e-12);
        }

        let zero = vec![0.0, 0.0, 0.0, 0.5, 0.5, 0.0];
        let y2 = batch(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)], Role::Target);
        assert!(matches!(
            barycentric_map(&zero, &y2),
            Err(Error::ZeroRowMass(0))
        ));
    }

    #[test]
    fn marginals_conserved_and_gauge_fixed() {
        let mut rng = seeded(7, 0);
        let x = sample_unit_ball(40, &mut rng);
        let y = sample_four_balls(30, &mut rng);
        let c = cost_matrix(&x, &y).unwrap();
        let cfg = SinkhornConfig::new(0.05);
        let s = sinkhorn_log(&c, &uniform_weights(40), &uniform_weights(30), &cfg).unwrap();
        assert!(s.converged);
        assert!(s.marginal_error <= 2.0 * cfg.tolerance);
        assert!(s.plan.iter().all(|p| *p >= 0.0));
        assert!(s.u_hat.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn cost_monotone_in_epsilon() {
        let mut rng = seeded(8, 0);
        let x = sample_unit_ball(20, &mut rng);
        let y = sample_four_balls(20, &mut rng);
        let c = cost_matrix(&x, &y).unwrap();
        let w = uniform_weights(20);
        let mut prev = f64::INFINITY;
        for eps in [1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01] {
            let s = sinkhorn_log(&c, &w, &w, &SinkhornConfig::new(eps)).unwrap();
            let tc = s.transport_cost(&c);
            assert!(tc <= prev + 1e-6, "eps {eps}: {tc} > {prev}");
            prev = tc;
        }
    }

    #[test]
    fn warm_start_from_optimum() {
        let mut rng = seeded(9, 0);
        let x = sample_unit_ball(50, &mut rng);
        let y = sample_four_balls(50, &mut rng);
        let c = cost_matrix(&x, &y).unwrap();
        let w = uniform_weights(50);
        let cold = sinkhorn_log(&c, &w, &w, &SinkhornConfig::new(0.05)).unwrap();
        let warm_cfg = SinkhornConfig {
            warm_start: Some((cold.u_hat.clone(), cold.v_hat.clone())),
            ..SinkhornConfig::new(0.05)
        };
        let warm = sinkhorn_log(&c, &w, &w, &warm_cfg).unwrap();
        assert!(warm.converged);
        assert!(warm.iterations_used <= 2, "{}", warm.iterations_used);
        assert!(cold.iterations_used > 2);
    }

    #[test]
    fn next_permutation_enumerates_all() {
        let mut p = vec![0, 1, 2, 3];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 24);
        assert_eq!(p, vec![3, 2, 1, 0]);
    }
}
