//! Gradient flows of the map network on feature-matching and
//! nearest-neighbour Lagrangians, optionally regularised by the transport cost.
//!
//! Every loss here is a function of the mapped points `TX` and the target
//! batch `Y`. Each returns its value together with `∂L/∂TX`, which is then
//! pulled back through the map network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Monitor;
use crate::geometry::{Point2, SampleBatch};
use crate::nn::{Gradient, Mlp, Optimizer};
use crate::rng::{seeded, stream};
use crate::train::{check_finite, BatchSampler, TrainOutcome, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowFeatures {
    /// Means of `x0, x1, x0², x1², x0·x1`.
    Covariance,
    /// Means of `exp(−‖y − z_k‖²/σ²)` over a set of centres `z_k`.
    GaussianBumps {
        centers: Vec<Point2>,
        sigma: f64,
    },
    DiscrepancyAtK {
        k: usize,
    },
    SymDiscrepancyAtK {
        k: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowLossKind {
    pub features: FlowFeatures,
    pub with_transport_cost: bool,
}

pub const DEFAULT_BUMP_SIGMA: f64 = 0.5;

/// `n × n` grid of centres on `[−half_width, half_width]²`, row by row.
pub fn bump_grid(n: usize, half_width: f64) -> Vec<Point2> {
    if n == 1 {
        return vec![Point2::ORIGIN];
    }
    let step = 2.0 * half_width / (n - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            out.push(Point2::new(
                -half_width + step * b as f64,
                -half_width + step * a as f64,
            ));
        }
    }
    out
}

/// The default 9 × 9 grid on `[−2, 2]²` with σ = 0.5.
pub fn default_bumps() -> FlowFeatures {
    FlowFeatures::GaussianBumps {
        centers: bump_grid(9, 2.0),
        sigma: DEFAULT_BUMP_SIGMA,
    }
}

impl FlowFeatures {
    pub fn validate(&self, batch_source: usize, batch_target: usize) -> Result<()> {
        match self {
            FlowFeatures::Covariance => Ok(()),
            FlowFeatures::GaussianBumps { centers, sigma } => {
                if centers.is_empty() {
                    return Err(Error::InvalidParameter(
                        "gaussian bumps need centres".into(),
                    ));
                }
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "bump sigma must be positive, got {sigma}"
                    )));
                }
                Ok(())
            }
            FlowFeatures::DiscrepancyAtK { k } => check_k(*k, batch_target),
            FlowFeatures::SymDiscrepancyAtK { k } => check_k(*k, batch_target.min(batch_source)),
        }
    }
}

fn check_k(k: usize, limit: usize) -> Result<()> {
    if k == 0 || k > limit {
        return Err(Error::InvalidParameter(format!(
            "neighbour count k={k} must lie in 1..={limit}"
        )));
    }
    Ok(())
}

/// A loss value and its gradient with respect to the mapped points, laid out
/// like [`SampleBatch::flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct PointLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn monomials(p: Point2) -> [f64; 5] {
    [p.x0, p.x1, p.x0 * p.x0, p.x1 * p.x1, p.x0 * p.x1]
}

fn monomial_jacobian(p: Point2) -> [[f64; 2]; 5] {
    [
        [1.0, 0.0],
        [0.0, 1.0],
        [2.0 * p.x0, 0.0],
        [0.0, 2.0 * p.x1],
        [p.x1, p.x0],
    ]
}

/// Feature-mean matching for features with a known Jacobian.
fn feature_matching<const K: usize>(
    tx: &[Point2],
    y: &[Point2],
    features: impl Fn(Point2) -> [f64; K],
    jacobian: impl Fn(Point2) -> [[f64; 2]; K],
) -> Result<PointLoss> {
    if tx.is_empty() || y.is_empty() {
        return Err(Error::EmptyBatch("feature matching"));
    }
    let mut diff = [0.0; K];
    for p in tx {
        for (d, f) in diff.iter_mut().zip(features(*p)) {
            *d += f / tx.len() as f64;
        }
    }
    for p in y {
        for (d, f) in diff.iter_mut().zip(features(*p)) {
            *d -= f / y.len() as f64;
        }
    }
    let value = diff.iter().map(|d| d * d).sum();
    let scale = 2.0 / tx.len() as f64;
    let mut grad = Vec::with_capacity(2 * tx.len());
    for p in tx {
        let jac = jacobian(*p);
        let (mut g0, mut g1) = (0.0, 0.0);
        for (d, j) in diff.iter().zip(jac) {
            g0 += d * j[0];
            g1 += d * j[1];
        }
        grad.push(scale * g0);
        grad.push(scale * g1);
    }
    Ok(PointLoss { value, grad })
}

pub fn covariance_loss(tx: &[Point2], y: &[Point2]) -> Result<PointLoss> {
    feature_matching(tx, y, monomials, monomial_jacobian)
}

pub fn gaussian_bump_loss(
    tx: &[Point2],
    y: &[Point2],
    centers: &[Point2],
    sigma: f64,
) -> Result<PointLoss> {
    if tx.is_empty() || y.is_empty() {
        return Err(Error::EmptyBatch("gaussian bump loss"));
    }
    if centers.is_empty() || !(sigma > 0.0) {
        return Err(Error::InvalidParameter(
            "gaussian bumps need centres and sigma > 0".into(),
        ));
    }
    let inv_s2 = 1.0 / (sigma * sigma);
    let bump = |p: Point2, z: Point2| (-(p - z).norm_sq() * inv_s2).exp();
    let nx = tx.len() as f64;
    let ny = y.len() as f64;
    let diff: Vec<f64> = centers
        .iter()
        .map(|&z| {
            tx.iter().map(|&p| bump(p, z)).sum::<f64>() / nx
                - y.iter().map(|&p| bump(p, z)).sum::<f64>() / ny
        })
        .collect();
    let value = diff.iter().map(|d| d * d).sum();
    let mut grad = Vec::with_capacity(2 * tx.len());
    for &p in tx {
        let (mut g0, mut g1) = (0.0, 0.0);
        for (&z, d) in centers.iter().zip(&diff) {
            // ∂f/∂p = −2 (p − z)/σ² · f
            let w = -2.0 * inv_s2 * bump(p, z) * d;
            g0 += w * (p.x0 - z.x0);
            g1 += w * (p.x1 - z.x1);
        }
        grad.push(2.0 * g0 / nx);
        grad.push(2.0 * g1 / nx);
    }
    Ok(PointLoss { value, grad })
}

/// Indices of the `k` points of `to` nearest to each point of `from`, nearest
/// first; equal distances keep the smaller index first.
pub fn nearest_neighbors(from: &[Point2], to: &[Point2], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > to.len() {
        return Err(Error::InvalidParameter(format!(
            "neighbour count k={k} must lie in 1..={}",
            to.len()
        )));
    }
    let mut order: Vec<usize> = Vec::with_capacity(to.len());
    let mut dist = vec![0.0; to.len()];
    Ok(from
        .iter()
        .map(|&p| {
            for (d, &q) in dist.iter_mut().zip(to) {
                *d = (p - q).norm_sq();
            }
            let by = |a: &usize, b: &usize| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b));
            if k == 1 {
                let best = (0..to.len()).min_by(by).expect("non-empty");
                return vec![best];
            }
            order.clear();
            order.extend(0..to.len());
            if k < to.len() {
                order.select_nth_unstable_by(k - 1, by);
                order.truncate(k);
            }
            order.sort_by(by);
            order.clone()
        })
        .collect())
}

/// Adds `Σ_l d(a_i, b_{n_l(i)})` to the loss and its gradient in `a` to `grad_a`
/// (and in `b` to `grad_b` when given), scaled by `scale`.
fn accumulate_distances(
    a: &[Point2],
    b: &[Point2],
    neighbors: &[Vec<usize>],
    scale: f64,
    grad_a: &mut [f64],
    mut grad_b: Option<&mut [f64]>,
) -> f64 {
    let mut total = 0.0;
    for (i, row) in neighbors.iter().enumerate() {
        for &j in row {
            let delta = a[i] - b[j];
            let d = delta.norm();
            total += d;
            // subgradient 0 at coincident points
            if d > 0.0 {
                let g = delta * (scale / d);
                grad_a[2 * i] += g.x0;
                grad_a[2 * i + 1] += g.x1;
                if let Some(gb) = grad_b.as_deref_mut() {
                    gb[2 * j] -= g.x0;
                    gb[2 * j + 1] -= g.x1;
                }
            }
        }
    }
    scale * total
}

/// `(1/b_X) Σ_i Σ_{l≤k} d(TX_i, Y_{j_l(i)})` with the neighbour sets frozen
/// for the gradient.
pub fn discrepancy_at_k(tx: &[Point2], y: &[Point2], k: usize) -> Result<PointLoss> {
    if tx.is_empty() || y.is_empty() {
        return Err(Error::EmptyBatch("discrepancy"));
    }
    let nn = nearest_neighbors(tx, y, k)?;
    let mut grad = vec![0.0; 2 * tx.len()];
    let value = accumulate_distances(tx, y, &nn, 1.0 / tx.len() as f64, &mut grad, None);
    Ok(PointLoss { value, grad })
}

/// [`discrepancy_at_k`] plus the reverse direction averaged over the targets.
pub fn sym_discrepancy_at_k(tx: &[Point2], y: &[Point2], k: usize) -> Result<PointLoss> {
    if tx.is_empty() || y.is_empty() {
        return Err(Error::EmptyBatch("symmetric discrepancy"));
    }
    if k > tx.len() {
        return Err(Error::InvalidParameter(format!(
            "neighbour count k={k} must lie in 1..={}",
            tx.len()
        )));
    }
    let PointLoss {
        value: forward,
        mut grad,
    } = discrepancy_at_k(tx, y, k)?;
    let back = nearest_neighbors(y, tx, k)?;
    let mut unused = vec![0.0; 2 * y.len()];
    let reverse = accumulate_distances(
        y,
        tx,
        &back,
        1.0 / y.len() as f64,
        &mut unused,
        Some(&mut grad),
    );
    Ok(PointLoss {
        value: forward + reverse,
        grad,
    })
}

/// `(1/b_X) Σ_i ‖X_i − TX_i‖²` and its gradient in `TX`.
pub fn transport_cost_term(x: &[Point2], tx: &[Point2]) -> PointLoss {
    let n = x.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(2 * x.len());
    for (&p, &q) in x.iter().zip(tx) {
        let d = q - p;
        value += d.norm_sq();
        grad.push(2.0 * d.x0 / n);
        grad.push(2.0 * d.x1 / n);
    }
    PointLoss {
        value: value / n,
        grad,
    }
}

pub fn feature_loss(features: &FlowFeatures, tx: &[Point2], y: &[Point2]) -> Result<PointLoss> {
    match features {
        FlowFeatures::Covariance => covariance_loss(tx, y),
        FlowFeatures::GaussianBumps { centers, sigma } => {
            gaussian_bump_loss(tx, y, centers, *sigma)
        }
        FlowFeatures::DiscrepancyAtK { k } => discrepancy_at_k(tx, y, *k),
        FlowFeatures::SymDiscrepancyAtK { k } => sym_discrepancy_at_k(tx, y, *k),
    }
}

#[derive(Debug, Clone)]
pub struct FlowLossValue {
    /// `base + cost`.
    pub total: f64,
    pub base: f64,
    /// Zero unless the transport-cost term is enabled.
    pub cost: f64,
    pub grad: Gradient,
}

pub const FLOW_LOSS_NAMES: [&str; 3] = ["loss", "base", "cost"];

/// The Lagrangian on `(T_w(X), Y)` plus, when enabled, the mean transport
/// cost; returns the exact parameter gradient.
pub fn flow_loss(
    x: &SampleBatch,
    model: &Mlp,
    y: &SampleBatch,
    kind: &FlowLossKind,
) -> Result<FlowLossValue> {
    x.ensure_non_empty("flow source batch")?;
    y.ensure_non_empty("flow target batch")?;
    let (out, cache) = model.forward_batch(&x.flat())?;
    let tx = SampleBatch::from_flat(&out, crate::geometry::Role::Mapped).points;
    let PointLoss {
        value: base,
        mut grad,
    } = feature_loss(&kind.features, &tx, &y.points)?;
    let mut cost = 0.0;
    if kind.with_transport_cost {
        let c = transport_cost_term(&x.points, &tx);
        cost = c.value;
        for (g, h) in grad.iter_mut().zip(&c.grad) {
            *g += h;
        }
    }
    let back = model.backward(&cache, &grad)?;
    Ok(FlowLossValue {
        total: base + cost,
        base,
        cost,
        grad: back.params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub loss: FlowLossKind,
}

/// Gradient descent on the flow Lagrangian with fresh batches every step.
pub fn train_flow(
    training: &TrainingConfig,
    cfg: &FlowConfig,
    seed: u64,
    monitor: &mut Monitor,
) -> Result<TrainOutcome> {
    training.validate()?;
    cfg.loss
        .features
        .validate(training.batch_source, training.batch_target)?;
    let mut init = seeded(seed, stream::INIT);
    let mut map = training.map_network.identity_map(&mut init)?;
    let mut opt = Optimizer::new(training.optimizer, &map);
    let mut data = BatchSampler::for_training(training, seed);
    monitor.observe(0, &map)?;
    for step in 1..=training.iterations {
        let (x, y) = data.pair();
        let v = flow_loss(&x, &map, &y, &cfg.loss)?;
        check_finite(v.total, "flow", step)?;
        opt.step(&mut map, &v.grad, "flow", step)?;
        monitor.record_losses(step, &[v.total, v.base, v.cost])?;
        monitor.observe(step, &map)?;
    }
    Ok(TrainOutcome::new(map))
}
