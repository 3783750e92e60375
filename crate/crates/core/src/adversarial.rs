//! Min-max training of a map against a critic.
//!
//! The map minimises `mean_i c(X_i, T(X_i)) + λ·[mean_i f(T(X_i)) − mean_j f(Y_j)]`
//! while the critic `f` ascends the bracketed penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Monitor;
use crate::geometry::SampleBatch;
use crate::nn::{Gradient, Mlp, Optimizer, OptimizerConfig};
use crate::rng::{seeded, stream};
use crate::train::{check_finite, BatchSampler, NetworkConfig, TrainOutcome, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialConfig {
    pub lambda: f64,
    /// Critic ascent steps before every map step; an experiment suffix `_N` means `N − 1`.
    pub critic_steps_per_map_step: usize,
    /// Element-wise clipping of the critic gradient.
    pub clip_threshold: Option<f64>,
    pub critic_network: NetworkConfig,
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.critic_steps_per_map_step == 0 {
            return Err(Error::InvalidParameter(
                "critic steps per map step must be at least 1".into(),
            ));
        }
        if let Some(c) = self.clip_threshold {
            if !(c > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "clip threshold must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialValue {
    /// `cost + λ·penalty`.
    pub map_loss: f64,
    pub cost: f64,
    /// `mean_i f(T(X_i)) − mean_j f(Y_j)`.
    pub penalty: f64,
}

pub const ADVERSARIAL_LOSS_NAMES: [&str; 3] = ["loss", "cost", "adversarial"];

fn mapped(map: &Mlp, x: &SampleBatch) -> Result<(Vec<f64>, crate::nn::ForwardCache)> {
    map.forward_batch(&x.flat())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn adversarial_objective(
    x: &SampleBatch,
    y: &SampleBatch,
    map: &Mlp,
    critic: &Mlp,
    lambda: f64,
) -> Result<AdversarialValue> {
    x.ensure_non_empty("adversarial source batch")?;
    y.ensure_non_empty("adversarial target batch")?;
    let (tx, _) = mapped(map, x)?;
    let cost = x
        .flat()
        .iter()
        .zip(&tx)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    let (f_tx, _) = critic.forward_batch(&tx)?;
    let (f_y, _) = critic.forward_batch(&y.flat())?;
    let penalty = mean(&f_tx) - mean(&f_y);
    Ok(AdversarialValue {
        map_loss: cost + lambda * penalty,
        cost,
        penalty,
    })
}

/// Objective value and the gradient of `map_loss` in the map parameters, critic frozen.
pub fn map_gradient(
    x: &SampleBatch,
    y: &SampleBatch,
    map: &Mlp,
    critic: &Mlp,
    lambda: f64,
) -> Result<(AdversarialValue, Gradient)> {
    x.ensure_non_empty("adversarial source batch")?;
    y.ensure_non_empty("adversarial target batch")?;
    let xs = x.flat();
    let (tx, map_cache) = mapped(map, x)?;
    let n = x.len() as f64;
    let (f_tx, critic_cache) = critic.forward_batch(&tx)?;
    let (f_y, _) = critic.forward_batch(&y.flat())?;
    let pull = critic.backward(&critic_cache, &vec![lambda / n; x.len()])?;
    let mut cost = 0.0;
    let mut grad_tx = pull.inputs;
    for ((g, a), b) in grad_tx.iter_mut().zip(&xs).zip(&tx) {
        cost += (b - a) * (b - a);
        *g += 2.0 * (b - a) / n;
    }
    let cost = cost / n;
    let penalty = mean(&f_tx) - mean(&f_y);
    let back = map.backward(&map_cache, &grad_tx)?;
    Ok((
        AdversarialValue {
            map_loss: cost + lambda * penalty,
            cost,
            penalty,
        },
        back.params,
    ))
}

/// The critic's objective `λ·penalty` (to ascend) and its gradient in the critic parameters.
pub fn critic_gradient(
    x: &SampleBatch,
    y: &SampleBatch,
    map: &Mlp,
    critic: &Mlp,
    lambda: f64,
) -> Result<(f64, Gradient)> {
    x.ensure_non_empty("adversarial source batch")?;
    y.ensure_non_empty("adversarial target batch")?;
    let (mut inputs, _) = mapped(map, x)?;
    inputs.extend(y.flat());
    let (f, cache) = critic.forward_batch(&inputs)?;
    let (nx, ny) = (x.len(), y.len());
    let mut grad_out = vec![lambda / nx as f64; nx];
    grad_out.extend(std::iter::repeat_n(-lambda / ny as f64, ny));
    let back = critic.backward(&cache, &grad_out)?;
    let objective = lambda * (mean(&f[..nx]) - mean(&f[nx..]));
    Ok((objective, back.params))
}

/// One ascent step on the critic; returns the objective before the step and
/// the largest applied gradient entry.
pub fn critic_step(
    x: &SampleBatch,
    y: &SampleBatch,
    map: &Mlp,
    critic: &mut Mlp,
    opt: &mut Optimizer,
    lambda: f64,
    step: usize,
) -> Result<(f64, f64)> {
    let (objective, mut grad) = critic_gradient(x, y, map, critic, lambda)?;
    check_finite(objective, "critic", step)?;
    // ascent: descend the negated objective
    grad.scale(-1.0);
    let applied = opt.step(critic, &grad, "critic", step)?;
    Ok((objective, applied))
}

pub fn train_adversarial(
    training: &TrainingConfig,
    cfg: &AdversarialConfig,
    seed: u64,
    monitor: &mut Monitor,
) -> Result<TrainOutcome> {
    training.validate()?;
    cfg.validate()?;
    let mut init = seeded(seed, stream::INIT);
    let mut map = training.map_network.identity_map(&mut init)?;
    let mut critic = cfg.critic_network.zero_potential(2, &mut init)?;
    let mut map_opt = Optimizer::new(training.optimizer, &map);
    let critic_cfg = OptimizerConfig {
        clip_threshold: cfg.clip_threshold,
        ..training.optimizer
    };
    critic_cfg.validate()?;
    let mut critic_opt = Optimizer::new(critic_cfg, &critic);
    let mut data = BatchSampler::for_training(training, seed);
    let mut critic_data = BatchSampler::new(
        seed,
        stream::CRITIC_DATA,
        training.batch_source,
        training.batch_target,
    );
    monitor.observe(0, &map)?;
    let mut critic_steps = 0;
    for step in 1..=training.iterations {
        for _ in 0..cfg.critic_steps_per_map_step {
            critic_steps += 1;
            let (x, y) = critic_data.pair();
            critic_step(
                &x,
                &y,
                &map,
                &mut critic,
                &mut critic_opt,
                cfg.lambda,
                critic_steps,
            )?;
        }
        let (x, y) = data.pair();
        let (v, grad) = map_gradient(&x, &y, &map, &critic, cfg.lambda)?;
        check_finite(v.map_loss, "adversarial map", step)?;
        map_opt.step(&mut map, &grad, "adversarial map", step)?;
        monitor.record_losses(step, &[v.map_loss, v.cost, v.penalty])?;
        monitor.observe(step, &map)?;
    }
    Ok(TrainOutcome::new(map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_four_balls, sample_unit_ball, Role};
    use crate::nn::{init_identity_map, init_zero_potential, Activation};
    use crate::testing::{central_difference_gradient, max_relative_error};
    use rand::Rng;

    fn randomized(m: &mut Mlp, seed: u64) {
        let mut rng = seeded(seed, 9);
        for p in m.params_mut() {
            *p = rng.gen_range(-0.6..0.6);
        }
    }

    fn setup(seed: u64) -> (SampleBatch, SampleBatch, Mlp, Mlp) {
        let mut rng = seeded(seed, 0);
        let mut map = init_identity_map(2, 2, &[5, 4], Activation::Tanh, &mut rng).unwrap();
        let mut critic = init_zero_potential(2, &[6], Activation::Tanh, &mut rng).unwrap();
        randomized(&mut map, seed);
        randomized(&mut critic, seed + 1000);
        let x = sample_unit_ball(7, &mut rng);
        let y = sample_four_balls(6, &mut rng);
        (x, y, map, critic)
    }

    #[test]
    fn zero_critic_gives_pure_cost() {
        let mut rng = seeded(1, 0);
        let mut map = init_identity_map(2, 2, &[8], Activation::Tanh, &mut rng).unwrap();
        randomized(&mut map, 1);
        let critic = init_zero_potential(2, &[8], Activation::Tanh, &mut rng).unwrap();
        let x = sample_unit_ball(20, &mut rng);
        let y = sample_four_balls(20, &mut rng);
        let v = adversarial_objective(&x, &y, &map, &critic, 3.0).unwrap();
        assert_eq!(v.penalty, 0.0);
        assert_eq!(v.map_loss, v.cost);
        let tx = crate::eval::apply_map(&map, &x.points).unwrap();
        let cost: f64 = x
            .points
            .iter()
            .zip(&tx)
            .map(|(a, b)| (*a - *b).norm_sq())
            .sum::<f64>()
            / 20.0;
        assert!((v.cost - cost).abs() < 1e-12);
    }

    #[test]
    fn identity_on_identical_batches_cancels() {
        let (x, _, _, critic) = setup(2);
        let map = init_identity_map(2, 2, &[4], Activation::Tanh, &mut seeded(2, 1)).unwrap();
        let y = SampleBatch::new(x.points.clone(), Role::Target);
        let v = adversarial_objective(&x, &y, &map, &critic, 1.0).unwrap();
        assert_eq!(v.penalty, 0.0);
        assert_eq!(v.cost, 0.0);
    }

    #[test]
    fn lambda_linearity() {
        let (x, y, map, critic) = setup(3);
        let a = adversarial_objective(&x, &y, &map, &critic, 1.5).unwrap();
        let b = adversarial_objective(&x, &y, &map, &critic, 3.0).unwrap();
        assert_eq!(a.penalty, b.penalty);
        assert!(((b.map_loss - b.cost) - 2.0 * (a.map_loss - a.cost)).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let (x, y, map, critic) = setup(seed);
            let lambda = 0.7;
            let (v, g) = map_gradient(&x, &y, &map, &critic, lambda).unwrap();
            let direct = adversarial_objective(&x, &y, &map, &critic, lambda).unwrap();
            assert!((v.map_loss - direct.map_loss).abs() < 1e-14);
            let fd = central_difference_gradient(map.params(), 1e-5, |p| {
                let mut m = map.clone();
                m.params_mut().copy_from_slice(p);
                adversarial_objective(&x, &y, &m, &critic, lambda)
                    .unwrap()
                    .map_loss
            });
            assert!(
                max_relative_error(g.values(), &fd) < 1e-4,
                "map seed {seed}"
            );

            let (obj, g) = critic_gradient(&x, &y, &map, &critic, lambda).unwrap();
            assert!((obj - lambda * direct.penalty).abs() < 1e-14);
            let fd = central_difference_gradient(critic.params(), 1e-5, |p| {
                let mut c = critic.clone();
                c.params_mut().copy_from_slice(p);
                lambda
                    * adversarial_objective(&x, &y, &map, &c, lambda)
                        .unwrap()
                        .penalty
            });
            assert!(
                max_relative_error(g.values(), &fd) < 1e-4,
                "critic seed {seed}"
            );
        }
    }

    #[test]
    fn frozen_critic_map_step_descends() {
        for seed in 0..5 {
            let (x, y, map, critic) = setup(seed);
            let (v0, g) = map_gradient(&x, &y, &map, &critic, 1.0).unwrap();
            let mut decreased_at = Vec::new();
            for lr in [1e-1, 1e-2, 1e-3, 1e-4] {
                let mut m = map.clone();
                let mut opt = Optimizer::new(OptimizerConfig::sgd(lr), &m);
                opt.step(&mut m, &g, "map", 1).unwrap();
                let v1 = adversarial_objective(&x, &y, &m, &critic, 1.0).unwrap();
                if v1.map_loss < v0.map_loss {
                    decreased_at.push(lr);
                }
            }
            assert!(
                decreased_at.contains(&1e-4),
                "seed {seed}: {decreased_at:?}"
            );
        }
    }

    #[test]
    fn clipping_bounds_critic_updates() {
        let (x, y, map, mut critic) = setup(4);
        let cfg = OptimizerConfig {
            clip_threshold: Some(0.01),
            ..OptimizerConfig::sgd(1.0)
        };
        let mut opt = Optimizer::new(cfg, &critic);
        for step in 1..=5 {
            let before = critic.params().to_vec();
            let (_, applied) =
                critic_step(&x, &y, &map, &mut critic, &mut opt, 100.0, step).unwrap();
            assert!(applied <= 0.01);
            for (a, b) in before.iter().zip(critic.params()) {
                assert!((a - b).abs() <= 0.01 + 1e-15);
            }
        }
    }

    fn small_run(iterations: usize, lambda: f64) -> (crate::eval::EvalReport, tempfile::TempDir) {
        let gt = crate::eval::build_ground_truth(20, 0.05, 1).unwrap().truth;
        let training = TrainingConfig {
            iterations,
            batch_source: 16,
            batch_target: 16,
            map_network: NetworkConfig {
                hidden: vec![8],
                activation: Activation::Tanh,
            },
            ..Default::default()
        };
        let cfg = AdversarialConfig {
            lambda,
            critic_steps_per_map_step: 2,
            clip_threshold: None,
            critic_network: NetworkConfig {
                hidden: vec![8],
                activation: Activation::Tanh,
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let mut mon = Monitor::new(
            &gt,
            iterations,
            &Default::default(),
            &ADVERSARIAL_LOSS_NAMES,
            Some(dir.path()),
            0,
        )
        .unwrap();
        train_adversarial(&training, &cfg, 0, &mut mon).unwrap();
        (mon.finish().unwrap(), dir)
    }

    #[test]
    fn logged_components_add_up() {
        let lambda = 2.5;
        let (_, dir) = small_run(30, lambda);
        let rows = crate::eval::read_csv(
            &dir.path().join(crate::eval::LOSSES_CSV),
            &["step", "loss", "cost", "adversarial"],
        )
        .unwrap();
        assert_eq!(rows.len(), 30);
        for r in rows {
            assert_eq!(r[1], r[2] + lambda * r[3]);
        }
    }

    #[test]
    fn zero_iterations_is_identity() {
        let (r, _) = small_run(0, 1.0);
        let gt = crate::eval::build_ground_truth(20, 0.05, 1).unwrap().truth;
        assert_eq!(
            r.min_eps2,
            crate::eval::epsilon2_points(&gt.sources, &gt).unwrap()
        );
    }

    #[test]
    fn validation() {
        let mut cfg = AdversarialConfig {
            lambda: 1.0,
            critic_steps_per_map_step: 1,
            clip_threshold: Some(0.01),
            critic_network: NetworkConfig::default(),
        };
        assert!(cfg.validate().is_ok());
        cfg.critic_steps_per_map_step = 0;
        assert!(cfg.validate().is_err());
        cfg.critic_steps_per_map_step = 1;
        cfg.lambda = 0.0;
        assert!(cfg.validate().is_err());
    }
}
