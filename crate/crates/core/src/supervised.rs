//! Per-batch Sinkhorn solutions used as regression labels.
//!
//! Every `inner_iterations` fitting steps a fresh pair of batches is solved;
//! the labels are the normalised potentials, the barycentric targets or the
//! rescaled plan, depending on [`SupervisedKind`].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::dual::{
    barycentric_fit_loss, fit_map_from_potentials, Aggregation, DualConfig, DualPotentials,
    Regularization, DUAL_LOSSES_CSV,
};
use crate::error::{Error, Result};
use crate::eval::{CsvWriter, Monitor};
use crate::geometry::{cost_matrix, Point2, SampleBatch};
use crate::nn::{Mlp, Optimizer, OptimizerConfig};
use crate::rng::{seeded, stream};
use crate::sinkhorn::{
    barycentric_map, sinkhorn_log, uniform_weights, DiscreteOtSolution, SinkhornConfig,
};
use crate::train::{check_finite, BatchSampler, NetworkConfig, TrainOutcome, TrainingConfig};

pub const SUPERVISED_MAP_LOSS_NAMES: [&str; 1] = ["loss"];
pub const SUPERVISED_PROB_LOSS_NAMES: [&str; 2] = ["plan_loss", "map_loss"];

/// Counter keys.
pub const SKIPPED_BATCHES: &str = "skipped_batches";
pub const LABEL_BATCHES: &str = "label_batches";
pub const SINKHORN_ITERATIONS: &str = "sinkhorn_iterations";

/// Consecutive unsolved batches tolerated before giving up.
const MAX_CONSECUTIVE_SKIPS: usize = 100;

/// The potential gauge is fixed up to this dyadic grid so the shift is exact.
const GAUGE_GRID: f64 = 1.0 / (1u64 << 30) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedKind {
    DualPotentials,
    TransportMap,
    PlanMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    Absolute,
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedConfig {
    pub kind: SupervisedKind,
    pub epsilon: f64,
    pub sinkhorn_max_iterations: usize,
    pub sinkhorn_tolerance: f64,
    /// Fitting steps per solved batch.
    pub inner_iterations: usize,
    /// Seed Sinkhorn with the current potential networks (potential labels only).
    pub warm_start: bool,
    /// Solved batches buffered ahead of the fitting loop; 0 solves inline.
    pub prefetch: usize,
    /// Norm of the potential regression.
    pub loss_norm: LossNorm,
    /// Steps of the potential stage; the map stage runs `TrainingConfig::iterations`.
    pub dual_iterations: usize,
    pub potential_network: NetworkConfig,
    pub plan_network: NetworkConfig,
    /// Optimiser of the potential or plan networks.
    pub fit_optimizer: OptimizerConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            kind: SupervisedKind::TransportMap,
            epsilon: 0.05,
            sinkhorn_max_iterations: 10_000,
            sinkhorn_tolerance: 1e-6,
            inner_iterations: 200,
            warm_start: false,
            prefetch: 0,
            loss_norm: LossNorm::Absolute,
            dual_iterations: 1000,
            potential_network: NetworkConfig::default(),
            plan_network: NetworkConfig::default(),
            fit_optimizer: OptimizerConfig::default(),
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.005 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "supervised epsilon must be at least 0.005, got {}",
                self.epsilon
            )));
        }
        if self.inner_iterations == 0 {
            return Err(Error::InvalidParameter(
                "inner iterations must be positive".into(),
            ));
        }
        if self.warm_start && self.kind != SupervisedKind::DualPotentials {
            return Err(Error::Config(
                "warm starts need potential networks (kind dual_potentials)".into(),
            ));
        }
        if self.warm_start && self.prefetch > 0 {
            return Err(Error::Config(
                "warm starts read the networks while solving, so they need prefetch = 0".into(),
            ));
        }
        if self.potential_network.hidden.contains(&0) || self.plan_network.hidden.contains(&0) {
            return Err(Error::InvalidParameter(
                "hidden widths must be positive".into(),
            ));
        }
        self.fit_optimizer.validate()
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            max_iterations: self.sinkhorn_max_iterations,
            tolerance: self.sinkhorn_tolerance,
            ..SinkhornConfig::new(self.epsilon)
        }
    }

    /// The settings the map stage of the potential pipeline shares with the regularised dual.
    pub fn map_stage(&self) -> DualConfig {
        DualConfig {
            regularization: Regularization::Entropic,
            epsilon: self.epsilon,
            aggregation: Aggregation::Mean,
            dual_iterations: self.dual_iterations,
            potential_network: self.potential_network.clone(),
            dual_optimizer: self.fit_optimizer,
        }
    }
}

/// Shifts `u` down and `v` up by the mean of `u`, rounded to a fine dyadic
/// grid; pairwise sums `u_i + v_j` are unchanged.
pub fn normalize_potentials(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    if u.is_empty() {
        return (Vec::new(), v.to_vec());
    }
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    let c = (mean / GAUGE_GRID).round_ties_even() * GAUGE_GRID;
    (
        u.iter().map(|x| x - c).collect(),
        v.iter().map(|x| x + c).collect(),
    )
}

/// Loss value and gradient in the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Regression {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn regress(pred: &[f64], label: &[f64], norm: LossNorm) -> Regression {
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(label)
        .map(|(p, l)| {
            let d = p - l;
            match norm {
                LossNorm::Absolute => {
                    value += d.abs();
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                LossNorm::Squared => {
                    value += d * d;
                    2.0 * d
                }
            }
        })
        .collect();
    Regression { value, grad }
}

/// `Σ_i |u_i − û_i| + Σ_j |v_j − v̂_j|` (or squares); gradients per side.
pub fn supervised_dual_loss(
    u_pred: &[f64],
    v_pred: &[f64],
    u_label: &[f64],
    v_label: &[f64],
    norm: LossNorm,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if u_pred.len() != u_label.len() || v_pred.len() != v_label.len() {
        return Err(Error::DimensionMismatch {
            expected: u_label.len() + v_label.len(),
            got: u_pred.len() + v_pred.len(),
            context: "potential predictions vs labels",
        });
    }
    let ru = regress(u_pred, u_label, norm);
    let rv = regress(v_pred, v_label, norm);
    Ok((ru.value + rv.value, ru.grad, rv.grad))
}

/// `(1/b_X) Σ_i ‖T(X_i) − T̂_i‖²` with the gradient in the flat predictions.
pub fn supervised_map_loss(pred: &[f64], targets: &[Point2]) -> Result<Regression> {
    if pred.len() != 2 * targets.len() {
        return Err(Error::DimensionMismatch {
            expected: 2 * targets.len(),
            got: pred.len(),
            context: "map predictions vs targets",
        });
    }
    if targets.is_empty() {
        return Err(Error::EmptyBatch("supervised map targets"));
    }
    let n = targets.len() as f64;
    let flat: Vec<f64> = targets.iter().flat_map(|p| p.to_array()).collect();
    let mut r = regress(pred, &flat, LossNorm::Squared);
    r.value /= n;
    r.grad.iter_mut().for_each(|g| *g /= n);
    Ok(r)
}

/// `(1/b_X b_Y) Σ_ij (π_w(X_i, Y_j) − b_X b_Y π̂_ij)²` with the gradient in the scores.
pub fn supervised_plan_loss(scores: &[f64], plan: &[f64]) -> Result<Regression> {
    if scores.len() != plan.len() {
        return Err(Error::DimensionMismatch {
            expected: plan.len(),
            got: scores.len(),
            context: "plan scores vs labels",
        });
    }
    if plan.is_empty() {
        return Err(Error::EmptyBatch("supervised plan labels"));
    }
    let cells = plan.len() as f64;
    let labels: Vec<f64> = plan.iter().map(|p| p * cells).collect();
    let mut r = regress(scores, &labels, LossNorm::Squared);
    r.value /= cells;
    r.grad.iter_mut().for_each(|g| *g /= cells);
    Ok(r)
}

/// Row-major `(x_i, y_j)` pair inputs for a plan network.
pub fn pair_inputs(x: &SampleBatch, y: &SampleBatch) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * x.len() * y.len());
    for p in &x.points {
        for q in &y.points {
            out.extend_from_slice(&[p.x0, p.x1, q.x0, q.x1]);
        }
    }
    out
}

/// Current network predictions on the batch, used as Sinkhorn starting potentials.
pub fn warm_start_from_networks(
    u: &Mlp,
    v: &Mlp,
    x: &SampleBatch,
    y: &SampleBatch,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((u.forward_batch(&x.flat())?.0, v.forward_batch(&y.flat())?.0))
}

pub fn solve_batch(
    x: &SampleBatch,
    y: &SampleBatch,
    cfg: &SinkhornConfig,
) -> Result<DiscreteOtSolution> {
    let cost = cost_matrix(x, y)?;
    sinkhorn_log(
        &cost,
        &uniform_weights(x.len()),
        &uniform_weights(y.len()),
        cfg,
    )
}

/// One solved pair of batches.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub x: SampleBatch,
    pub y: SampleBatch,
    /// `None` when Sinkhorn did not converge.
    pub solution: Option<DiscreteOtSolution>,
}

fn label(x: SampleBatch, y: SampleBatch, cfg: &SinkhornConfig) -> Result<LabeledBatch> {
    let sol = solve_batch(&x, &y, cfg)?;
    Ok(LabeledBatch {
        x,
        y,
        solution: sol.converged.then_some(sol),
    })
}

/// Produces solved batches in draw order, either inline or from a bounded
/// background queue. Both modes see the same batches.
enum LabelSource {
    Inline {
        data: BatchSampler,
        cfg: SinkhornConfig,
    },
    Queue(Receiver<Result<LabeledBatch>>),
}

impl LabelSource {
    fn next(&mut self, warm: Option<&(Mlp, Mlp)>) -> Result<LabeledBatch> {
        match self {
            LabelSource::Inline { data, cfg } => {
                let (x, y) = data.pair();
                let mut cfg = cfg.clone();
                if let Some((u, v)) = warm {
                    cfg.warm_start = Some(warm_start_from_networks(u, v, &x, &y)?);
                }
                label(x, y, &cfg)
            }
            LabelSource::Queue(rx) => rx
                .recv()
                .map_err(|_| Error::Config("label producer stopped unexpectedly".into()))?,
        }
    }
}

/// Runs `body` with a label source; with `prefetch > 0` a producer thread
/// solves up to that many batches ahead.
fn with_labels<T>(
    training: &TrainingConfig,
    cfg: &SupervisedConfig,
    seed: u64,
    body: impl FnOnce(&mut LabelSource) -> Result<T>,
) -> Result<T> {
    let data = BatchSampler::for_training(training, seed);
    let sinkhorn = cfg.sinkhorn();
    if cfg.prefetch == 0 {
        return body(&mut LabelSource::Inline {
            data,
            cfg: sinkhorn,
        });
    }
    let (tx, rx) = sync_channel(cfg.prefetch);
    thread::scope(|s| {
        s.spawn(move || {
            let mut data = data;
            loop {
                let (x, y) = data.pair();
                // a send error means the consumer is done
                if tx.send(label(x, y, &sinkhorn)).is_err() {
                    break;
                }
            }
        });
        let mut source = LabelSource::Queue(rx);
        // dropping the receiver when `body` returns stops the producer
        body(&mut source)
    })
}

struct Labels {
    skipped: u64,
    batches: u64,
    sinkhorn_iterations: u64,
}

impl Labels {
    fn new() -> Self {
        Labels {
            skipped: 0,
            batches: 0,
            sinkhorn_iterations: 0,
        }
    }

    /// Next converged batch, skipping and counting failures.
    fn next(
        &mut self,
        source: &mut LabelSource,
        warm: Option<&(Mlp, Mlp)>,
    ) -> Result<(LabeledBatch, DiscreteOtSolution)> {
        for _ in 0..MAX_CONSECUTIVE_SKIPS {
            let mut b = source.next(warm)?;
            self.batches += 1;
            match b.solution.take() {
                Some(sol) => {
                    self.sinkhorn_iterations += sol.iterations_used as u64;
                    return Ok((b, sol));
                }
                None => {
                    self.skipped += 1;
                    log::warn!("sinkhorn did not converge on a label batch; skipping it");
                }
            }
        }
        Err(Error::Config(format!(
            "{MAX_CONSECUTIVE_SKIPS} consecutive label batches failed to converge"
        )))
    }

    fn record(&self, counters: &mut BTreeMap<String, u64>) {
        counters.insert(SKIPPED_BATCHES.to_string(), self.skipped);
        counters.insert(LABEL_BATCHES.to_string(), self.batches);
        counters.insert(SINKHORN_ITERATIONS.to_string(), self.sinkhorn_iterations);
    }
}

/// Direct regression of the map onto per-batch barycentric targets.
pub fn train_supervised_map(
    training: &TrainingConfig,
    cfg: &SupervisedConfig,
    seed: u64,
    monitor: &mut Monitor,
) -> Result<TrainOutcome> {
    training.validate()?;
    cfg.validate()?;
    let mut init = seeded(seed, stream::INIT);
    let mut map = training.map_network.identity_map(&mut init)?;
    let mut opt = Optimizer::new(training.optimizer, &map);
    let mut labels = Labels::new();
    monitor.observe(0, &map)?;
    with_labels(training, cfg, seed, |source| {
        let mut current: Option<(Vec<f64>, Vec<Point2>)> = None;
        for step in 1..=training.iterations {
            if (step - 1) % cfg.inner_iterations == 0 {
                let (b, sol) = labels.next(source, None)?;
                current = Some((b.x.flat(), barycentric_map(&sol.plan, &b.y)?));
            }
            let (xs, targets) = current.as_ref().expect("labels drawn on the first step");
            let (pred, cache) = map.forward_batch(xs)?;
            let r = supervised_map_loss(&pred, targets)?;
            check_finite(r.value, "supervised map", step)?;
            let g = map.backward(&cache, &r.grad)?.params;
            opt.step(&mut map, &g, "supervised map", step)?;
            monitor.record_losses(step, &[r.value])?;
            monitor.observe(step, &map)?;
        }
        Ok(())
    })?;
    let mut out = TrainOutcome::new(map);
    labels.record(&mut out.counters);
    Ok(out)
}

/// Potential networks regressed onto normalised Sinkhorn potentials.
///
/// The trace and checkpoints go to `out_dir` in the same layout as the
/// regularised dual, so the map stage can reload them.
pub fn train_supervised_potentials(
    training: &TrainingConfig,
    cfg: &SupervisedConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(DualPotentials, BTreeMap<String, u64>)> {
    training.validate()?;
    cfg.validate()?;
    let mut init = seeded(seed, stream::INIT);
    let u = cfg.potential_network.zero_potential(2, &mut init)?;
    let v = cfg.potential_network.zero_potential(2, &mut init)?;
    let mut opt_u = Optimizer::new(cfg.fit_optimizer, &u);
    let mut opt_v = Optimizer::new(cfg.fit_optimizer, &v);
    let mut nets = (u, v);
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
    let mut labels = Labels::new();
    with_labels(training, cfg, seed, |source| {
        let mut current = None;
        for step in 1..=cfg.dual_iterations {
            if (step - 1) % cfg.inner_iterations == 0 {
                let warm = cfg.warm_start.then_some(&nets);
                let (b, sol) = labels.next(source, warm)?;
                let (un, vn) = normalize_potentials(&sol.u_hat, &sol.v_hat);
                current = Some((b.x.flat(), b.y.flat(), un, vn));
            }
            let (xs, ys, un, vn) = current.as_ref().expect("labels drawn on the first step");
            let (u, v) = &mut nets;
            let (up, uc) = u.forward_batch(xs)?;
            let (vp, vc) = v.forward_batch(ys)?;
            let (value, gu, gv) = supervised_dual_loss(&up, &vp, un, vn, cfg.loss_norm)?;
            check_finite(value, "supervised dual", step)?;
            let gu = u.backward(&uc, &gu)?.params;
            let gv = v.backward(&vc, &gv)?.params;
            opt_u.step(u, &gu, "supervised u", step)?;
            opt_v.step(v, &gv, "supervised v", step)?;
            if let Some(w) = log.as_mut() {
                w.line(&format!("{step},{value}"))?;
            }
            trace.push(value);
        }
        Ok(())
    })?;
    if let Some(w) = log {
        w.finish()?;
    }
    let (u, v) = nets;
    let potentials = DualPotentials { u, v, trace };
    if let Some(dir) = out_dir {
        potentials.save(dir)?;
    }
    let mut counters = BTreeMap::new();
    labels.record(&mut counters);
    Ok((potentials, counters))
}

/// Plan network regressed onto rescaled Sinkhorn plans, interleaved with a
/// barycentric map fit on the network's own densities.
pub fn train_supervised_plan(
    training: &TrainingConfig,
    cfg: &SupervisedConfig,
    seed: u64,
    monitor: &mut Monitor,
) -> Result<TrainOutcome> {
    training.validate()?;
    cfg.validate()?;
    let mut init = seeded(seed, stream::INIT);
    let mut map = training.map_network.identity_map(&mut init)?;
    // the product plan has density one everywhere
    let mut plan_net = cfg.plan_network.constant(4, 1.0, &mut init)?;
    let mut map_opt = Optimizer::new(training.optimizer, &map);
    let mut plan_opt = Optimizer::new(cfg.fit_optimizer, &plan_net);
    let mut labels = Labels::new();
    let mut empty_rows = 0u64;
    monitor.observe(0, &map)?;
    with_labels(training, cfg, seed, |source| {
        let mut current = None;
        for step in 1..=training.iterations {
            if (step - 1) % cfg.inner_iterations == 0 {
                let (b, sol) = labels.next(source, None)?;
                let pairs = pair_inputs(&b.x, &b.y);
                current = Some((b.x, b.y, pairs, sol.plan));
            }
            let (x, y, pairs, plan) = current.as_ref().expect("labels drawn on the first step");
            let (scores, cache) = plan_net.forward_batch(pairs)?;
            let r = supervised_plan_loss(&scores, plan)?;
            check_finite(r.value, "supervised plan", step)?;
            let g = plan_net.backward(&cache, &r.grad)?.params;
            plan_opt.step(&mut plan_net, &g, "supervised plan", step)?;

            let rows = plan_rows(&plan_net.forward_batch(pairs)?.0, y.len());
            let (tx, map_cache) = map.forward_batch(&x.flat())?;
            let (map_loss, grad_tx, empty) = barycentric_fit_loss(&tx, y, &rows);
            empty_rows += empty as u64;
            if empty < rows.len() {
                check_finite(map_loss, "supervised plan map", step)?;
                let g = map.backward(&map_cache, &grad_tx)?.params;
                map_opt.step(&mut map, &g, "supervised plan map", step)?;
            }
            monitor.record_losses(step, &[r.value, map_loss])?;
            monitor.observe(step, &map)?;
        }
        Ok(())
    })?;
    let mut out = TrainOutcome::new(map);
    labels.record(&mut out.counters);
    out.counters
        .insert(crate::dual::EMPTY_ROWS.to_string(), empty_rows);
    Ok(out)
}

/// Row-normalises non-negative parts of plan scores; rows without mass are `None`.
fn plan_rows(scores: &[f64], cols: usize) -> Vec<Option<Vec<f64>>> {
    scores
        .chunks_exact(cols)
        .map(|row| {
            let w: Vec<f64> = row.iter().map(|s| s.max(0.0)).collect();
            let total: f64 = w.iter().sum();
            (total > 0.0 && total.is_finite()).then(|| w.iter().map(|x| x / total).collect())
        })
        .collect()
}

/// Potential stage followed by the density-weighted map fit.
pub fn train_supervised_dual_pipeline(
    training: &TrainingConfig,
    cfg: &SupervisedConfig,
    seed: u64,
    out_dir: Option<&Path>,
    monitor: &mut Monitor,
) -> Result<TrainOutcome> {
    let (potentials, first) = train_supervised_potentials(training, cfg, seed, out_dir)?;
    let mut out = fit_map_from_potentials(training, &cfg.map_stage(), &potentials, seed, monitor)?;
    for (k, v) in first {
        out.counters.entry(k).or_insert(v);
    }
    Ok(out)
}

/// Dispatch on the label kind; a single-stage entry point for map and plan labels.
pub fn train_supervised(
    training: &TrainingConfig,
    cfg: &SupervisedConfig,
    seed: u64,
    out_dir: Option<&Path>,
    monitor: &mut Monitor,
) -> Result<TrainOutcome> {
    match cfg.kind {
        SupervisedKind::TransportMap => train_supervised_map(training, cfg, seed, monitor),
        SupervisedKind::PlanMatrix => train_supervised_plan(training, cfg, seed, monitor),
        SupervisedKind::DualPotentials => {
            train_supervised_dual_pipeline(training, cfg, seed, out_dir, monitor)
        }
    }
}
