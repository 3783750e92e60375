//! Regularised dual training with potential networks, followed by a
//! barycentric map fit.
//!
//! Stage one minimises the negated empirical dual over networks `u(x)` and
//! `v(y)`; stage two regresses the map onto the plan densities those
//! potentials induce.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{CsvWriter, Monitor};
use crate::geometry::{cost_matrix, CostMatrix, SampleBatch};
use crate::nn::{Mlp, Optimizer, OptimizerConfig};
use crate::rng::{seeded, stream};
use crate::train::{check_finite, BatchSampler, NetworkConfig, TrainOutcome, TrainingConfig};

pub const U_CHECKPOINT: &str = "potential_u.json";
pub const V_CHECKPOINT: &str = "potential_v.json";
pub const DUAL_LOSSES_CSV: &str = "dual_losses.csv";
pub const DUAL_MAP_LOSS_NAMES: [&str; 1] = ["loss"];

/// Counter keys reported by [`fit_map_from_potentials`].
pub const EMPTY_ROWS: &str = "empty_density_rows";
pub const SKIPPED_BATCHES: &str = "skipped_batches";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    Entropic,
    L2,
}

/// How the regulariser is averaged over the `b_X × b_Y` batch pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average over both indices.
    Mean,
    /// Double sum divided by `b_X` only.
    Sum,
}

impl Aggregation {
    fn weight(self, rows: usize, cols: usize) -> f64 {
        match self {
            Aggregation::Mean => 1.0 / (rows * cols) as f64,
            Aggregation::Sum => 1.0 / rows as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualConfig {
    pub regularization: Regularization,
    pub epsilon: f64,
    pub aggregation: Aggregation,
    /// Steps of the potential stage; the map stage runs `TrainingConfig::iterations`.
    pub dual_iterations: usize,
    pub potential_network: NetworkConfig,
    pub dual_optimizer: OptimizerConfig,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig {
            regularization: Regularization::Entropic,
            epsilon: 0.1,
            aggregation: Aggregation::Mean,
            dual_iterations: 1000,
            potential_network: NetworkConfig::default(),
            dual_optimizer: OptimizerConfig::default(),
        }
    }
}

impl DualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.potential_network.hidden.contains(&0) {
            return Err(Error::InvalidParameter(
                "hidden widths must be positive".into(),
            ));
        }
        self.dual_optimizer.validate()
    }
}

/// Value and gradient of a batch dual loss in the per-point potential values.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBatchLoss {
    pub value: f64,
    /// The regulariser term alone, already multiplied by its aggregation weight.
    pub penalty: f64,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
}

fn check_dims(u: &[f64], v: &[f64], cost: &CostMatrix, epsilon: f64) -> Result<()> {
    if u.len() != cost.rows() || v.len() != cost.cols() {
        return Err(Error::DimensionMismatch {
            expected: cost.rows() + cost.cols(),
            got: u.len() + v.len(),
            context: "dual values vs cost matrix",
        });
    }
    if u.is_empty() || v.is_empty() {
        return Err(Error::EmptyBatch("dual batch"));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    Ok(())
}

fn non_finite(what: &str) -> Error {
    Error::NonFinite {
        loss: what.to_string(),
        step: 0,
    }
}

/// `−[mean u + mean v − ε·Agg exp((u_i + v_j − c_ij)/ε)]`.
pub fn entropic_dual_batch_loss(
    u: &[f64],
    v: &[f64],
    cost: &CostMatrix,
    epsilon: f64,
    aggregation: Aggregation,
) -> Result<DualBatchLoss> {
    check_dims(u, v, cost, epsilon)?;
    let (n, m) = (u.len(), v.len());
    let w = aggregation.weight(n, m);
    let mut top = f64::NEG_INFINITY;
    for i in 0..n {
        for (j, c) in cost.row(i).iter().enumerate() {
            top = top.max((u[i] + v[j] - c) / epsilon);
        }
    }
    if !top.is_finite() {
        return Err(non_finite("entropic dual"));
    }
    // exp(d_ij) = exp(d_ij − top)·exp(top); the scale is applied once at the end
    let mut grad_u = vec![0.0; n];
    let mut grad_v = vec![0.0; m];
    let mut total = 0.0;
    for i in 0..n {
        for (j, c) in cost.row(i).iter().enumerate() {
            let e = ((u[i] + v[j] - c) / epsilon - top).exp();
            grad_u[i] += e;
            grad_v[j] += e;
            total += e;
        }
    }
    let scale = w * top.exp();
    let penalty = epsilon * scale * total;
    let mean_u = u.iter().sum::<f64>() / n as f64;
    let mean_v = v.iter().sum::<f64>() / m as f64;
    let value = -(mean_u + mean_v - penalty);
    if !value.is_finite() {
        return Err(non_finite("entropic dual"));
    }
    grad_u
        .iter_mut()
        .for_each(|g| *g = scale * *g - 1.0 / n as f64);
    grad_v
        .iter_mut()
        .for_each(|g| *g = scale * *g - 1.0 / m as f64);
    Ok(DualBatchLoss {
        value,
        penalty,
        grad_u,
        grad_v,
    })
}

/// `−[mean u + mean v − (1/4ε)·Agg (u_i + v_j − c_ij)₊²]`.
pub fn l2_dual_batch_loss(
    u: &[f64],
    v: &[f64],
    cost: &CostMatrix,
    epsilon: f64,
    aggregation: Aggregation,
) -> Result<DualBatchLoss> {
    check_dims(u, v, cost, epsilon)?;
    let (n, m) = (u.len(), v.len());
    let w = aggregation.weight(n, m);
    let mut grad_u = vec![0.0; n];
    let mut grad_v = vec![0.0; m];
    let mut total = 0.0;
    for i in 0..n {
        for (j, c) in cost.row(i).iter().enumerate() {
            let d = u[i] + v[j] - c;
            if d > 0.0 {
                total += d * d;
                grad_u[i] += d;
                grad_v[j] += d;
            }
        }
    }
    let penalty = w * total / (4.0 * epsilon);
    let mean_u = u.iter().sum::<f64>() / n as f64;
    let mean_v = v.iter().sum::<f64>() / m as f64;
    let value = -(mean_u + mean_v - penalty);
    if !value.is_finite() {
        return Err(non_finite("l2 dual"));
    }
    let s = w / (2.0 * epsilon);
    grad_u.iter_mut().for_each(|g| *g = s * *g - 1.0 / n as f64);
    grad_v.iter_mut().for_each(|g| *g = s * *g - 1.0 / m as f64);
    Ok(DualBatchLoss {
        value,
        penalty,
        grad_u,
        grad_v,
    })
}

pub fn dual_batch_loss(
    regularization: Regularization,
    u: &[f64],
    v: &[f64],
    cost: &CostMatrix,
    epsilon: f64,
    aggregation: Aggregation,
) -> Result<DualBatchLoss> {
    match regularization {
        Regularization::Entropic => entropic_dual_batch_loss(u, v, cost, epsilon, aggregation),
        Regularization::L2 => l2_dual_batch_loss(u, v, cost, epsilon, aggregation),
    }
}

pub fn plan_density_entropic(u: f64, v: f64, c: f64, epsilon: f64) -> f64 {
    ((u + v - c) / epsilon).exp()
}

pub fn plan_density_l2(u: f64, v: f64, c: f64, epsilon: f64) -> f64 {
    (u + v - c).max(0.0) / (2.0 * epsilon)
}

/// The two potential networks produced by [`train_dual`].
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub u: Mlp,
    pub v: Mlp,
    /// Dual loss per step.
    pub trace: Vec<f64>,
}

impl DualPotentials {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.u.save_checkpoint(&dir.join(U_CHECKPOINT))?;
        self.v.save_checkpoint(&dir.join(V_CHECKPOINT))
    }

    /// Reloads checkpoints; the trace is not persisted here.
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(DualPotentials {
            u: Mlp::load_checkpoint(&dir.join(U_CHECKPOINT))?,
            v: Mlp::load_checkpoint(&dir.join(V_CHECKPOINT))?,
            trace: Vec::new(),
        })
    }

    pub fn values(&self, x: &SampleBatch, y: &SampleBatch) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            self.u.forward_batch(&x.flat())?.0,
            self.v.forward_batch(&y.flat())?.0,
        ))
    }
}

/// Stage one: joint descent of the dual loss over both potential networks.
///
/// With `out_dir` set, the loss trace goes to [`DUAL_LOSSES_CSV`] and the
/// final networks to their checkpoints.
pub fn train_dual(
    training: &TrainingConfig,
    cfg: &DualConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<DualPotentials> {
    training.validate()?;
    cfg.validate()?;
    let mut init = seeded(seed, stream::INIT);
    let mut u = cfg.potential_network.zero_potential(2, &mut init)?;
    let mut v = cfg.potential_network.zero_potential(2, &mut init)?;
    let mut opt_u = Optimizer::new(cfg.dual_optimizer, &u);
    let mut opt_v = Optimizer::new(cfg.dual_optimizer, &v);
    let mut data = BatchSampler::for_training(training, seed);
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let mut w = CsvWriter::create(&dir.join(DUAL_LOSSES_CSV))?;
            w.line("step,loss")?;
            Some(w)
        }
        None => None,
    };
    let mut trace = Vec::with_capacity(cfg.dual_iterations);
    for step in 1..=cfg.dual_iterations {
        let (x, y) = data.pair();
        let cost = cost_matrix(&x, &y)?;
        let (u_vals, u_cache) = u.forward_batch(&x.flat())?;
        let (v_vals, v_cache) = v.forward_batch(&y.flat())?;
        let loss = dual_batch_loss(
            cfg.regularization,
            &u_vals,
            &v_vals,
            &cost,
            cfg.epsilon,
            cfg.aggregation,
        )
        .map_err(|e| match e {
            Error::NonFinite { loss, .. } => Error::NonFinite { loss, step },
            other => other,
        })?;
        check_finite(loss.value, "dual", step)?;
        let gu = u.backward(&u_cache, &loss.grad_u)?.params;
        let gv = v.backward(&v_cache, &loss.grad_v)?.params;
        opt_u.step(&mut u, &gu, "dual u", step)?;
        opt_v.step(&mut v, &gv, "dual v", step)?;
        if let Some(w) = log.as_mut() {
            w.line(&format!("{step},{}", loss.value))?;
        }
        trace.push(loss.value);
    }
    if let Some(w) = log {
        w.finish()?;
    }
    let potentials = DualPotentials { u, v, trace };
    if let Some(dir) = out_dir {
        potentials.save(dir)?;
    }
    Ok(potentials)
}

/// Row-normalised plan densities; `None` marks a row with no mass.
pub fn normalized_density_rows(
    regularization: Regularization,
    u: &[f64],
    v: &[f64],
    cost: &CostMatrix,
    epsilon: f64,
) -> Vec<Option<Vec<f64>>> {
    (0..u.len())
        .map(|i| {
            let row = cost.row(i);
            let mut w: Vec<f64> = match regularization {
                Regularization::Entropic => {
                    // softmax in log space so huge exponents cannot overflow
                    let d: Vec<f64> = row
                        .iter()
                        .zip(v)
                        .map(|(c, vj)| (u[i] + vj - c) / epsilon)
                        .collect();
                    let top = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if !top.is_finite() {
                        return None;
                    }
                    d.iter().map(|x| (x - top).exp()).collect()
                }
                Regularization::L2 => row
                    .iter()
                    .zip(v)
                    .map(|(c, vj)| plan_density_l2(u[i], *vj, *c, epsilon))
                    .collect(),
            };
            let total: f64 = w.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                return None;
            }
            w.iter_mut().for_each(|x| *x /= total);
            Some(w)
        })
        .collect()
}

/// Density-weighted barycentric regression of the map on one batch.
///
/// Returns the loss `mean_i Σ_j w_ij ‖T(X_i) − Y_j‖²` over rows with mass,
/// the gradient in `T(X_i)` (zero on empty rows) and the number of empty rows.
pub fn barycentric_fit_loss(
    tx: &[f64],
    y: &SampleBatch,
    rows: &[Option<Vec<f64>>],
) -> (f64, Vec<f64>, usize) {
    let ys = y.flat();
    let mut grad = vec![0.0; tx.len()];
    let kept = rows.iter().filter(|r| r.is_some()).count();
    if kept == 0 {
        return (0.0, grad, rows.len());
    }
    let mut loss = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let Some(w) = row else { continue };
        let (t0, t1) = (tx[2 * i], tx[2 * i + 1]);
        let mut bary = [0.0, 0.0];
        for (j, wj) in w.iter().enumerate() {
            let (d0, d1) = (t0 - ys[2 * j], t1 - ys[2 * j + 1]);
            loss += wj * (d0 * d0 + d1 * d1);
            bary[0] += wj * ys[2 * j];
            bary[1] += wj * ys[2 * j + 1];
        }
        grad[2 * i] = 2.0 * (t0 - bary[0]) / kept as f64;
        grad[2 * i + 1] = 2.0 * (t1 - bary[1]) / kept as f64;
    }
    (loss / kept as f64, grad, rows.len() - kept)
}

/// Stage two: fit the map to the plan densities of frozen potentials.
pub fn fit_map_from_potentials(
    training: &TrainingConfig,
    cfg: &DualConfig,
    potentials: &DualPotentials,
    seed: u64,
    monitor: &mut Monitor,
) -> Result<TrainOutcome> {
    training.validate()?;
    cfg.validate()?;
    let mut init = seeded(seed, stream::INIT);
    let mut map = training.map_network.identity_map(&mut init)?;
    let mut opt = Optimizer::new(training.optimizer, &map);
    let mut data = BatchSampler::new(
        seed,
        stream::MAP_DATA,
        training.batch_source,
        training.batch_target,
    );
    let mut empty_rows = 0u64;
    let mut skipped = 0u64;
    monitor.observe(0, &map)?;
    for step in 1..=training.iterations {
        let (x, y) = data.pair();
        let cost = cost_matrix(&x, &y)?;
        let (u_vals, v_vals) = potentials.values(&x, &y)?;
        let rows =
            normalized_density_rows(cfg.regularization, &u_vals, &v_vals, &cost, cfg.epsilon);
        let (tx, cache) = map.forward_batch(&x.flat())?;
        let (loss, grad_tx, empty) = barycentric_fit_loss(&tx, &y, &rows);
        empty_rows += empty as u64;
        if empty == rows.len() {
            skipped += 1;
        } else {
            check_finite(loss, "dual map fit", step)?;
            let g = map.backward(&cache, &grad_tx)?.params;
            opt.step(&mut map, &g, "dual map fit", step)?;
            monitor.record_losses(step, &[loss])?;
        }
        monitor.observe(step, &map)?;
    }
    if empty_rows > 0 {
        log::warn!("{empty_rows} source points had no plan mass and were skipped");
    }
    let mut out = TrainOutcome::new(map);
    out.counters.insert(EMPTY_ROWS.to_string(), empty_rows);
    out.counters.insert(SKIPPED_BATCHES.to_string(), skipped);
    Ok(out)
}

/// Both stages; potential checkpoints land in `out_dir` when given.
pub fn train_dual_pipeline(
    training: &TrainingConfig,
    cfg: &DualConfig,
    seed: u64,
    out_dir: Option<&Path>,
    monitor: &mut Monitor,
) -> Result<TrainOutcome> {
    let potentials = train_dual(training, cfg, seed, out_dir)?;
    fit_map_from_potentials(training, cfg, &potentials, seed, monitor)
}
