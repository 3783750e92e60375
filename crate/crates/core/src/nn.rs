//! Small fully connected networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector. Layer `k` maps `dims[k]` inputs to
//! `dims[k + 1]` outputs and stores its weight matrix row-major
//! (`dims[k + 1] × dims[k]`) followed by its bias. Every layer but the last is
//! followed by the activation. With `skip_connection` set the network computes
//! `x + residual(x)`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => fast_tanh(z),
            Activation::Relu => z.max(0.0),
            Activation::Softplus => {
                // log(1 + e^z) without overflow
                if z > 0.0 {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            // sigmoid(z) = 1 - exp(-softplus(z))
            Activation::Softplus => -(-a).exp_m1(),
        }
    }
}

/// Gradient of a scalar loss, aligned index for index with [`Mlp::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn clip_elementwise(&mut self, threshold: f64) {
        for g in &mut self.0 {
            *g = g.clamp(-threshold, threshold);
        }
    }
}

/// Activations recorded by [`Mlp::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// `layers[0]` is the input; `layers[k]` the activated output of hidden layer `k`.
    layers: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: Gradient,
    /// Gradient with respect to the inputs, row-major `batch × dims[0]`.
    pub inputs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
    activation: Activation,
    skip_connection: bool,
}

/// `tanh` through `expm1`, accurate near zero and cheaper than libm's.
#[inline]
fn fast_tanh(z: f64) -> f64 {
    if z.abs() > 19.0 {
        // tanh(19) rounds to 1
        return z.signum();
    }
    let e = (2.0 * z).exp_m1();
    e / (e + 2.0)
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl Mlp {
    pub fn from_parts(
        layer_dims: Vec<usize>,
        params: Vec<f64>,
        activation: Activation,
        skip_connection: bool,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "layer dims must have at least two positive entries, got {layer_dims:?}"
            )));
        }
        let expected = param_count(&layer_dims);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
                context: "parameter vector",
            });
        }
        if skip_connection && layer_dims[0] != *layer_dims.last().unwrap() {
            return Err(Error::DimensionMismatch {
                expected: layer_dims[0],
                got: *layer_dims.last().unwrap(),
                context: "skip connection needs equal input and output dims",
            });
        }
        Ok(Mlp {
            layer_dims,
            params,
            activation,
            skip_connection,
        })
    }

    /// Glorot-uniform weights and zero biases on every layer.
    pub fn random<R: Rng + ?Sized>(
        layer_dims: Vec<usize>,
        activation: Activation,
        skip_connection: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Vec::with_capacity(param_count(&layer_dims));
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Mlp::from_parts(layer_dims, params, activation, skip_connection)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn skip_connection(&self) -> bool {
        self.skip_connection
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Offset of layer `k`'s weights in the flat vector; its bias follows the weights.
    fn layer_offset(&self, k: usize) -> usize {
        param_count(&self.layer_dims[..=k])
    }

    /// Zero the final layer's weights and set its bias to `bias`.
    fn set_head(&mut self, bias: f64) {
        let last = self.n_layers() - 1;
        let (n_in, n_out) = (self.layer_dims[last], self.layer_dims[last + 1]);
        let off = self.layer_offset(last);
        self.params[off..off + n_in * n_out].fill(0.0);
        self.params[off + n_in * n_out..off + (n_in + 1) * n_out].fill(bias);
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(input)?.0)
    }

    /// Evaluates a row-major batch of inputs, keeping the activations for [`Mlp::backward`].
    pub fn forward_batch(&self, inputs: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let d_in = self.input_dim();
        if !inputs.len().is_multiple_of(d_in) {
            return Err(Error::DimensionMismatch {
                expected: d_in,
                got: inputs.len() % d_in,
                context: "forward input length must be a multiple of the input dim",
            });
        }
        let batch = inputs.len() / d_in;
        let n_layers = self.n_layers();
        let mut layers: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        layers.push(inputs.to_vec());
        let mut output = Vec::new();
        for k in 0..n_layers {
            let (n_in, n_out) = (self.layer_dims[k], self.layer_dims[k + 1]);
            let off = self.layer_offset(k);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + (n_in + 1) * n_out];
            let prev = &layers[k];
            let last = k + 1 == n_layers;
            let mut next = vec![0.0; batch * n_out];
            // column-major copy so the inner loop runs over contiguous outputs
            let mut wt = vec![0.0; n_in * n_out];
            for o in 0..n_out {
                for q in 0..n_in {
                    wt[q * n_out + o] = weights[o * n_in + q];
                }
            }
            for (x, z) in prev.chunks_exact(n_in).zip(next.chunks_exact_mut(n_out)) {
                z.copy_from_slice(bias);
                for (xq, col) in x.iter().zip(wt.chunks_exact(n_out)) {
                    for (zo, w) in z.iter_mut().zip(col) {
                        *zo += w * xq;
                    }
                }
                if !last {
                    for zo in z.iter_mut() {
                        *zo = self.activation.apply(*zo);
                    }
                }
            }
            if last {
                output = next;
            } else {
                layers.push(next);
            }
        }
        if self.skip_connection {
            for (o, x) in output.iter_mut().zip(inputs) {
                *o += x;
            }
        }
        Ok((output, ForwardCache { batch, layers }))
    }

    /// Exact gradient of a scalar loss given `∂loss/∂output` for every batch row.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &[f64]) -> Result<Backward> {
        let n_layers = self.n_layers();
        if cache.layers.len() != n_layers
            || cache
                .layers
                .iter()
                .enumerate()
                .any(|(k, l)| l.len() != cache.batch * self.layer_dims[k])
        {
            return Err(Error::CacheMismatch(
                "cached activations have the wrong shape",
            ));
        }
        if grad_output.len() != cache.batch * self.output_dim() {
            return Err(Error::CacheMismatch("upstream gradient length"));
        }
        let batch = cache.batch;
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = grad_output.to_vec();
        let mut grad_inputs = Vec::new();
        for k in (0..n_layers).rev() {
            let (n_in, n_out) = (self.layer_dims[k], self.layer_dims[k + 1]);
            let off = self.layer_offset(k);
            let weights = &self.params[off..off + n_in * n_out];
            let prev = &cache.layers[k];
            {
                let (gw, gb) = grad[off..off + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
                for (x, d) in prev.chunks_exact(n_in).zip(delta.chunks_exact(n_out)) {
                    for (o, &dout) in d.iter().enumerate() {
                        if dout == 0.0 {
                            continue;
                        }
                        gb[o] += dout;
                        for (g, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                            *g += dout * xi;
                        }
                    }
                }
            }
            let mut prev_delta = vec![0.0; batch * n_in];
            for (pd, d) in prev_delta
                .chunks_exact_mut(n_in)
                .zip(delta.chunks_exact(n_out))
            {
                for (o, &dout) in d.iter().enumerate() {
                    if dout == 0.0 {
                        continue;
                    }
                    for (p, w) in pd.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                        *p += w * dout;
                    }
                }
            }
            if k > 0 {
                for (p, a) in prev_delta.iter_mut().zip(prev) {
                    *p *= self.activation.derivative_from_output(*a);
                }
                delta = prev_delta;
            } else {
                grad_inputs = prev_delta;
            }
        }
        if self.skip_connection {
            for (g, d) in grad_inputs.iter_mut().zip(grad_output) {
                *g += d;
            }
        }
        Ok(Backward {
            params: Gradient(grad),
            inputs: grad_inputs,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let record = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        let text = serde_json::to_string(&record)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let record: Checkpoint = serde_json::from_str(&text)?;
        if record.format != CHECKPOINT_FORMAT || record.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                    record.format, record.version
                ),
            });
        }
        let m = record.model;
        Mlp::from_parts(m.layer_dims, m.params, m.activation, m.skip_connection)
    }
}

pub const CHECKPOINT_FORMAT: &str = "otnet-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model record: `{"format", "version", "model": {layer_dims, params, activation, skip_connection}}`.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Mlp,
}

fn dims_with(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

/// Residual network whose head is zeroed, so it is exactly the identity at init.
pub fn init_identity_map<R: Rng + ?Sized>(
    input_dim: usize,
    output_dim: usize,
    hidden: &[usize],
    activation: Activation,
    rng: &mut R,
) -> Result<Mlp> {
    if input_dim != output_dim {
        return Err(Error::DimensionMismatch {
            expected: input_dim,
            got: output_dim,
            context: "identity map needs equal input and output dims",
        });
    }
    let mut m = Mlp::random(
        dims_with(input_dim, hidden, output_dim),
        activation,
        true,
        rng,
    )?;
    m.set_head(0.0);
    Ok(m)
}

/// Scalar network that is identically zero at init.
pub fn init_zero_potential<R: Rng + ?Sized>(
    input_dim: usize,
    hidden: &[usize],
    activation: Activation,
    rng: &mut R,
) -> Result<Mlp> {
    init_constant(input_dim, hidden, activation, 0.0, rng)
}

/// Scalar network that is identically `value` at init.
pub fn init_constant<R: Rng + ?Sized>(
    input_dim: usize,
    hidden: &[usize],
    activation: Activation,
    value: f64,
    rng: &mut R,
) -> Result<Mlp> {
    let mut m = Mlp::random(dims_with(input_dim, hidden, 1), activation, false, rng)?;
    m.set_head(value);
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Element-wise value clipping of the gradient before the update.
    pub clip_threshold: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_threshold: None,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
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

/// SGD or Adam state for one model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, model: &Mlp) -> Self {
        let n = match config.kind {
            OptimizerKind::Adam => model.params().len(),
            OptimizerKind::Sgd => 0,
        };
        Optimizer {
            config,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one descent step and returns the largest applied gradient entry.
    pub fn step(
        &mut self,
        model: &mut Mlp,
        grad: &Gradient,
        loss_name: &str,
        step: usize,
    ) -> Result<f64> {
        if grad.len() != model.params().len() {
            return Err(Error::DimensionMismatch {
                expected: model.params().len(),
                got: grad.len(),
                context: "gradient length",
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                loss: format!("{loss_name} gradient"),
                step,
            });
        }
        let mut g = grad.clone();
        if let Some(c) = self.config.clip_threshold {
            g.clip_elementwise(c);
        }
        self.steps += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, gi) in model.params_mut().iter_mut().zip(&g.0) {
                    *p -= lr * gi;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.config.beta1, self.config.beta2);
                let t = self.steps as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let eps = self.config.adam_epsilon;
                for (((p, gi), m), v) in model
                    .params_mut()
                    .iter_mut()
                    .zip(&g.0)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    *m = b1 * *m + (1.0 - b1) * gi;
                    *v = b2 * *v + (1.0 - b2) * gi * gi;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(g.max_abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::testing::{central_difference_gradient, max_relative_error};
    use rand::Rng;

    #[test]
    fn fast_tanh_matches_libm() {
        let mut rng = seeded(4, 0);
        for k in 0..20_000 {
            let z: f64 = match k % 3 {
                0 => rng.gen_range(-1e-6..1e-6),
                1 => rng.gen_range(-3.0..3.0),
                _ => rng.gen_range(-40.0..40.0),
            };
            let (a, b) = (fast_tanh(z), z.tanh());
            assert!(
                (a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(f64::MIN_POSITIVE),
                "{z}: {a} vs {b}"
            );
        }
        assert_eq!(fast_tanh(0.0), 0.0);
        assert_eq!(fast_tanh(1e3), 1.0);
        assert_eq!(fast_tanh(-1e3), -1.0);
    }

    /// Naive forward: rebuild every layer as nested vectors and apply the recurrence.
    fn reference_forward(m: &Mlp, x: &[f64]) -> Vec<f64> {
        let dims = m.layer_dims();
        let p = m.params();
        let mut idx = 0;
        let mut h = x.to_vec();
        for k in 0..dims.len() - 1 {
            let mut w = vec![vec![0.0; dims[k]]; dims[k + 1]];
            for row in w.iter_mut() {
                for e in row.iter_mut() {
                    *e = p[idx];
                    idx += 1;
                }
            }
            let b: Vec<f64> = p[idx..idx + dims[k + 1]].to_vec();
            idx += dims[k + 1];
            let z: Vec<f64> = (0..dims[k + 1])
                .map(|o| b[o] + (0..dims[k]).map(|i| w[o][i] * h[i]).sum::<f64>())
                .collect();
            h = if k + 2 == dims.len() {
                z
            } else {
                z.into_iter()
                    .map(|v| match m.activation() {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.max(0.0),
                        Activation::Softplus => (1.0 + v.exp()).ln(),
                    })
                    .collect()
            };
        }
        if m.skip_connection() {
            for (o, xi) in h.iter_mut().zip(x) {
                *o += xi;
            }
        }
        h
    }

    fn perturbed(m: &Mlp, rng: &mut impl Rng) -> Mlp {
        let mut m = m.clone();
        for p in m.params_mut() {
            *p += rng.gen_range(-0.5..0.5);
        }
        m
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(param_count(&[2, 16, 16, 2]), 3 * 16 + 17 * 16 + 17 * 2);
        let m = Mlp::random(
            vec![2, 64, 64, 2],
            Activation::Tanh,
            false,
            &mut seeded(0, 0),
        )
        .unwrap();
        assert_eq!(m.params().len(), param_count(&[2, 64, 64, 2]));
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = seeded(1, 0);
        for act in [Activation::Tanh, Activation::Relu, Activation::Softplus] {
            for skip in [false, true] {
                let m = Mlp::random(vec![2, 7, 5, 2], act, skip, &mut rng).unwrap();
                let m = perturbed(&m, &mut rng);
                for _ in 0..20 {
                    let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                    let a = m.forward(&x).unwrap();
                    let b = reference_forward(&m, &x);
                    for (u, v) in a.iter().zip(&b) {
                        assert!((u - v).abs() < 1e-12, "{act:?} {skip}: {u} vs {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = Mlp::random(vec![2, 4, 1], Activation::Tanh, false, &mut seeded(0, 0)).unwrap();
        assert!(matches!(
            m.forward(&[1.0, 2.0, 3.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn identity_init_is_exact() {
        let mut rng = seeded(2, 0);
        let m = init_identity_map(2, 2, &[16, 16], Activation::Tanh, &mut rng).unwrap();
        assert_eq!(m.forward(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
        for _ in 0..1000 {
            let x = [rng.gen_range(-2.0..=2.0), rng.gen_range(-2.0..=2.0)];
            assert_eq!(m.forward(&x).unwrap(), x.to_vec());
        }
        // Jacobian at init: backprop of each unit output direction gives a unit input gradient.
        let x = [0.4, 1.3];
        let (_, cache) = m.forward_batch(&x).unwrap();
        let j0 = m.backward(&cache, &[1.0, 0.0]).unwrap().inputs;
        let j1 = m.backward(&cache, &[0.0, 1.0]).unwrap().inputs;
        assert_eq!(j0[0] * j1[1] - j0[1] * j1[0], 1.0);
    }

    #[test]
    fn identity_init_rejects_dim_mismatch() {
        let r = init_identity_map(2, 3, &[8], Activation::Tanh, &mut seeded(0, 0));
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn identity_moves_after_one_step() {
        let mut rng = seeded(3, 0);
        let mut m = init_identity_map(2, 2, &[8, 8], Activation::Tanh, &mut rng).unwrap();
        let x = [0.2, -0.4, 0.9, 0.1];
        let (out, cache) = m.forward_batch(&x).unwrap();
        // loss = sum |T(x) - (x + (1, 1))|^2 pulls every point by (1, 1)
        let g: Vec<f64> = out
            .iter()
            .zip(&x)
            .map(|(o, xi)| 2.0 * (o - xi - 1.0))
            .collect();
        let grad = m.backward(&cache, &g).unwrap().params;
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &m);
        opt.step(&mut m, &grad, "displacement", 0).unwrap();
        let y = m.forward(&[0.5, 0.5]).unwrap();
        assert_ne!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn zero_potential_and_its_head_gradient() {
        let a = init_zero_potential(2, &[8, 8], Activation::Tanh, &mut seeded(4, 0)).unwrap();
        let b = init_zero_potential(2, &[8, 8], Activation::Tanh, &mut seeded(5, 0)).unwrap();
        assert_ne!(a.params(), b.params());
        let x = [0.7, -1.1];
        assert_eq!(a.forward(&x).unwrap(), vec![0.0]);
        assert_eq!(b.forward(&x).unwrap(), vec![0.0]);

        let (_, cache) = a.forward_batch(&x).unwrap();
        let g = a.backward(&cache, &[1.0]).unwrap().params;
        let last_hidden = &cache.layers[2];
        let head = a.layer_offset(2);
        assert_eq!(&g.values()[head..head + 8], last_hidden.as_slice());
        assert!(last_hidden.iter().any(|h| *h != 0.0));
        assert_eq!(g.values()[head + 8], 1.0);
        // nothing upstream of a zero head receives gradient
        assert!(g.values()[..head].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_linear_in_upstream() {
        let mut rng = seeded(6, 0);
        let m = perturbed(
            &Mlp::random(vec![2, 16, 16, 2], Activation::Tanh, false, &mut rng).unwrap(),
            &mut rng,
        );
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, cache) = m.forward_batch(&x).unwrap();
        let zero = m.backward(&cache, &[0.0; 10]).unwrap();
        assert!(zero.params.values().iter().all(|g| *g == 0.0));

        let g1: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g2: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let mut a = m.backward(&cache, &g1).unwrap().params;
        a.add_assign(&m.backward(&cache, &g2).unwrap().params);
        let b = m.backward(&cache, &sum).unwrap().params;
        for (u, v) in a.values().iter().zip(b.values()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let mut rng = seeded(7, 0);
        let m = Mlp::random(vec![2, 4, 2], Activation::Tanh, false, &mut rng).unwrap();
        let other = Mlp::random(vec![2, 5, 2], Activation::Tanh, false, &mut rng).unwrap();
        let (_, cache) = other.forward_batch(&[0.1, 0.2]).unwrap();
        assert!(matches!(
            m.backward(&cache, &[1.0, 1.0]),
            Err(Error::CacheMismatch(_))
        ));
        let (_, cache) = m.forward_batch(&[0.1, 0.2]).unwrap();
        assert!(matches!(
            m.backward(&cache, &[1.0]),
            Err(Error::CacheMismatch(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded(8, 0);
        for act in [Activation::Tanh, Activation::Softplus, Activation::Relu] {
            for trial in 0..5 {
                let skip = trial % 2 == 0;
                let m = perturbed(
                    &Mlp::random(vec![2, 16, 16, 2], act, skip, &mut rng).unwrap(),
                    &mut rng,
                );
                let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.5..1.5)).collect();
                let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
                // scalar loss: sum w * out + 0.5 * sum out^2
                let loss = |p: &[f64]| {
                    let mut mm = m.clone();
                    mm.params_mut().copy_from_slice(p);
                    let out = mm.forward_batch(&x).unwrap().0;
                    out.iter()
                        .zip(&w)
                        .map(|(o, wi)| wi * o + 0.5 * o * o)
                        .sum::<f64>()
                };
                let (out, cache) = m.forward_batch(&x).unwrap();
                let up: Vec<f64> = out.iter().zip(&w).map(|(o, wi)| wi + o).collect();
                let g = m.backward(&cache, &up).unwrap().params;
                let fd = central_difference_gradient(m.params(), 1e-5, loss);
                let err = max_relative_error(g.values(), &fd);
                assert!(err < 1e-4, "{act:?}: relative error {err}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = seeded(9, 0);
        let m = perturbed(
            &Mlp::random(vec![2, 8, 8, 1], Activation::Tanh, false, &mut rng).unwrap(),
            &mut rng,
        );
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let (_, cache) = m.forward_batch(&x).unwrap();
        let g = m.backward(&cache, &[1.0; 3]).unwrap().inputs;
        let fd = central_difference_gradient(&x, 1e-5, |xs| {
            m.forward_batch(xs).unwrap().0.iter().sum::<f64>()
        });
        assert!(max_relative_error(&g, &fd) < 1e-4);
    }

    #[test]
    fn sgd_arithmetic() {
        let mut m = Mlp::from_parts(vec![1, 1], vec![1.0, 0.0], Activation::Tanh, false).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &m);
        opt.step(&mut m, &Gradient(vec![2.0, 0.0]), "test", 0)
            .unwrap();
        assert!((m.params()[0] - 0.8).abs() < 1e-15);
        let before = m.params().to_vec();
        opt.step(&mut m, &Gradient(vec![0.0, 0.0]), "test", 1)
            .unwrap();
        assert_eq!(m.params(), before.as_slice());
    }

    #[test]
    fn adam_zero_gradient_only_counts() {
        let mut m = Mlp::from_parts(vec![1, 1], vec![0.3, -0.2], Activation::Tanh, false).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default(), &m);
        opt.step(&mut m, &Gradient(vec![0.0, 0.0]), "test", 0)
            .unwrap();
        assert_eq!(m.params(), &[0.3, -0.2]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn clipping_is_elementwise() {
        let mut m = Mlp::from_parts(vec![1, 1], vec![0.0, 0.0], Activation::Tanh, false).unwrap();
        let cfg = OptimizerConfig {
            clip_threshold: Some(0.01),
            ..OptimizerConfig::sgd(1.0)
        };
        let mut opt = Optimizer::new(cfg, &m);
        let applied = opt
            .step(&mut m, &Gradient(vec![5.0, -0.001]), "test", 0)
            .unwrap();
        assert_eq!(applied, 0.01);
        assert_eq!(m.params(), &[-0.01, 0.001]);
    }

    #[test]
    fn non_finite_gradient_names_loss() {
        let mut m = Mlp::from_parts(vec![1, 1], vec![0.0, 0.0], Activation::Tanh, false).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default(), &m);
        let err = opt
            .step(&mut m, &Gradient(vec![f64::NAN, 0.0]), "critic", 12)
            .unwrap_err();
        match err {
            Error::NonFinite { loss, step } => {
                assert!(loss.contains("critic"));
                assert_eq!(step, 12);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = Mlp::random(vec![2, 6, 2], Activation::Softplus, true, &mut seeded(1, 1)).unwrap();
        m.save_checkpoint(&path).unwrap();
        assert_eq!(Mlp::load_checkpoint(&path).unwrap(), m);

        std::fs::write(&path, r#"{"format":"otnet-mlp","version":99,"model":{"layer_dims":[1,1],"params":[0,0],"activation":"tanh","skip_connection":false}}"#).unwrap();
        assert!(matches!(
            Mlp::load_checkpoint(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut rng = seeded(10, 0);
            let mut m = init_identity_map(2, 2, &[8, 8], Activation::Tanh, &mut rng).unwrap();
            let mut opt = Optimizer::new(OptimizerConfig::default(), &m);
            for step in 0..20 {
                let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (out, cache) = m.forward_batch(&x).unwrap();
                let g: Vec<f64> = out.iter().map(|o| 2.0 * (o - 0.5)).collect();
                let grad = m.backward(&cache, &g).unwrap().params;
                opt.step(&mut m, &grad, "test", step).unwrap();
            }
            m
        };
        assert_eq!(run().params(), run().params());
    }
}
