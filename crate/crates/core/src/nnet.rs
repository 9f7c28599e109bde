//! Feedforward networks trained by backpropagation and Adam.
//!
//! Hidden layers use ReLU followed by inverted dropout; the output layer is
//! linear. Weights are stored `(fan_in, fan_out)` so a batch forward pass is
//! `x·W + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer sizes must be positive and at least two: {0:?}")]
    BadLayerSizes(Vec<usize>),
    #[error("dropout must lie in [0, 1), got {0}")]
    BadDropout(f64),
    #[error("input width {got} does not match network input {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("forward cache was produced by a different parameter version")]
    StaleCache,
    #[error("gradient shape {got:?} does not match output shape {expected:?}")]
    GradientShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("checkpoint: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

/// Multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
    dropout: f64,
    /// Bumped on every parameter update; caches carry the version they saw.
    #[serde(default)]
    version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks are drawn from a stream seeded by `seed`.
    Train {
        seed: u64,
    },
}

/// Activations saved by [`Mlp::forward`] for [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// Input to each layer (post-dropout for hidden layers).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
    /// Scaled keep masks (`0` or `1/(1-p)`), one per hidden layer when training.
    masks: Vec<Option<Array2<f64>>>,
}

/// Parameter gradients, shaped like the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl Mlp {
    /// He-uniform weights, zero biases.
    pub fn new(sizes: &[usize], dropout: f64, seed: u64) -> Result<Mlp, NnError> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(NnError::BadLayerSizes(sizes.to_vec()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(NnError::BadDropout(dropout));
        }
        let mut rng = rng_from(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let limit = (6.0 / w[0] as f64).sqrt();
                let weights =
                    Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-limit..limit));
                Layer {
                    weights,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            layers,
            dropout,
            version: 0,
        })
    }

    /// Builds a network from explicit layers.
    pub fn from_layers(layers: Vec<Layer>, dropout: f64) -> Result<Mlp, NnError> {
        if layers.is_empty() {
            return Err(NnError::BadLayerSizes(vec![]));
        }
        let mut sizes = vec![layers[0].weights.nrows()];
        for l in &layers {
            if l.weights.nrows() != *sizes.last().expect("non-empty")
                || l.bias.len() != l.weights.ncols()
            {
                return Err(NnError::BadLayerSizes(sizes));
            }
            sizes.push(l.weights.ncols());
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(NnError::BadDropout(dropout));
        }
        Ok(Mlp {
            sizes,
            layers,
            dropout,
            version: 0,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn n_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, ForwardCache), NnError> {
        if x.ncols() != self.input_width() {
            return Err(NnError::WidthMismatch {
                expected: self.input_width(),
                got: x.ncols(),
            });
        }
        let mut rng = match mode {
            Mode::Train { seed } if self.dropout > 0.0 => Some(rng_from(seed)),
            _ => None,
        };
        let keep = 1.0 - self.dropout;
        let last = self.layers.len() - 1;
        let mut cache = ForwardCache {
            version: self.version,
            inputs: vec![],
            pre: vec![],
            masks: vec![],
        };
        let mut a = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weights) + &layer.bias;
            cache.inputs.push(a);
            if k == last {
                return Ok((z, cache));
            }
            let mut h = z.mapv(|v| v.max(0.0));
            let mask = rng.as_mut().map(|r| {
                Array2::from_shape_simple_fn(h.raw_dim(), || {
                    if r.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
            });
            if let Some(m) = &mask {
                h *= m;
            }
            cache.pre.push(z);
            cache.masks.push(mask);
            a = h;
        }
        unreachable!("at least one layer")
    }

    /// Output of the network in eval mode.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.forward(x, Mode::Eval).map(|(y, _)| y)
    }

    /// Reverse-mode gradients of `Σ grad_out ⊙ output` with respect to all
    /// parameters.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<f64>,
    ) -> Result<Gradients, NnError> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(NnError::StaleCache);
        }
        let n = cache.inputs[0].nrows();
        let expected = (n, self.output_width());
        if grad_out.dim() != expected {
            return Err(NnError::GradientShape {
                expected,
                got: grad_out.dim(),
            });
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.to_owned();
        for k in (0..self.layers.len()).rev() {
            let input = &cache.inputs[k];
            grads.push(Layer {
                weights: input.t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            });
            if k == 0 {
                break;
            }
            let mut d = delta.dot(&self.layers[k].weights.t());
            if let Some(m) = &cache.masks[k - 1] {
                d *= m;
            }
            d.zip_mut_with(&cache.pre[k - 1], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            delta = d;
        }
        grads.reverse();
        for (k, g) in grads.iter().enumerate() {
            if g.weights
                .iter()
                .chain(g.bias.iter())
                .any(|v| !v.is_finite())
            {
                return Err(NnError::NonFiniteGradient { layer: k });
            }
        }
        Ok(Gradients { layers: grads })
    }

    pub fn to_json(&self) -> Result<String, NnError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Mlp, NnError> {
        let m: Mlp = serde_json::from_str(s)?;
        Mlp::from_layers(m.layers, m.dropout)
    }
}

/// Adam with decoupled weight decay and an exponential learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub base_lr: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Layer>,
    v: Vec<Layer>,
}

impl Adam {
    pub fn new(model: &Mlp, base_lr: f64, gamma: f64, weight_decay: f64) -> Adam {
        let zeros: Vec<Layer> = model.layers.iter().map(Layer::zeros_like).collect();
        Adam {
            base_lr,
            gamma,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// `base · γ^epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.base_lr * self.gamma.powi(epoch as i32)
    }

    /// One update at the learning rate of `epoch`. Weight decay shrinks the
    /// parameters before the moment-based step.
    pub fn step(
        &mut self,
        model: &mut Mlp,
        grads: &Gradients,
        epoch: usize,
    ) -> Result<(), NnError> {
        if grads.layers.len() != model.layers.len() {
            return Err(NnError::StaleCache);
        }
        for (k, g) in grads.layers.iter().enumerate() {
            if g.weights
                .iter()
                .chain(g.bias.iter())
                .any(|v| !v.is_finite())
            {
                return Err(NnError::NonFiniteGradient { layer: k });
            }
        }
        self.step += 1;
        let lr = self.learning_rate(epoch);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let shrink = 1.0 - lr * self.weight_decay;
        let update = |theta: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *theta *= shrink;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *theta -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (k, layer) in model.layers.iter_mut().enumerate() {
            let g = &grads.layers[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            ndarray::Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|t, &gr, mm, vv| update(t, gr, mm, vv));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|t, &gr, mm, vv| update(t, gr, mm, vv));
        }
        model.version += 1;
        Ok(())
    }
}

/// Network plus optimizer state, as written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Mlp,
    pub optimizer: Option<Adam>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from(seed);
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(&mut rng))
    }

    /// Loss `Σ w ⊙ f(x)` with fixed random weights `w`.
    fn fd_check(sizes: &[usize], dropout: f64, seed: u64) -> f64 {
        let mut net = Mlp::new(sizes, dropout, seed).unwrap();
        // nonzero biases so the check covers them meaningfully
        for (k, l) in net.layers.iter_mut().enumerate() {
            l.bias = random_matrix(1, l.bias.len(), seed + 50 + k as u64)
                .row(0)
                .to_owned()
                * 0.1;
        }
        let x = random_matrix(6, sizes[0], seed + 1);
        let w = random_matrix(6, *sizes.last().unwrap(), seed + 2);
        let mode = Mode::Train { seed: 99 };
        let loss = |n: &Mlp| (n.forward(x.view(), mode).unwrap().0 * &w).sum();
        let (_, cache) = net.forward(x.view(), mode).unwrap();
        let grads = net.backward(&cache, w.view()).unwrap();
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for k in 0..net.layers.len() {
            let shape = net.layers[k].weights.raw_dim();
            for idx in ndarray::indices(shape) {
                let mut p = net.clone();
                p.layers[k].weights[idx] += eps;
                let mut m = net.clone();
                m.layers[k].weights[idx] -= eps;
                let num = (loss(&p) - loss(&m)) / (2.0 * eps);
                let ana = grads.layers[k].weights[idx];
                worst = worst.max((num - ana).abs() / (num.abs() + ana.abs()).max(1e-6));
            }
            for j in 0..net.layers[k].bias.len() {
                let mut p = net.clone();
                p.layers[k].bias[j] += eps;
                let mut m = net.clone();
                m.layers[k].bias[j] -= eps;
                let num = (loss(&p) - loss(&m)) / (2.0 * eps);
                let ana = grads.layers[k].bias[j];
                worst = worst.max((num - ana).abs() / (num.abs() + ana.abs()).max(1e-6));
            }
        }
        worst
    }

    #[test]
    fn gradient_check_across_architectures() {
        for sizes in [vec![3, 1], vec![3, 4, 1], vec![3, 4, 4, 2]] {
            for dropout in [0.0, 0.3] {
                let err = fd_check(&sizes, dropout, 7);
                assert!(err < 1e-5, "{sizes:?} dropout {dropout}: {err}");
            }
        }
    }

    #[test]
    fn linear_net_is_affine() {
        let layer = Layer {
            weights: array![[2.0], [-1.0]],
            bias: array![0.5],
        };
        let net = Mlp::from_layers(vec![layer], 0.0).unwrap();
        let y = net.predict(array![[1.0, 3.0], [0.0, 0.0]].view()).unwrap();
        assert_eq!(y, array![[-0.5], [0.5]]);
    }

    #[test]
    fn linear_weight_gradient_by_hand() {
        let layer = Layer {
            weights: array![[0.3], [0.7]],
            bias: array![0.0],
        };
        let net = Mlp::from_layers(vec![layer], 0.0).unwrap();
        let x = array![[1.0, 2.0], [3.0, -1.0]];
        let (_, cache) = net.forward(x.view(), Mode::Eval).unwrap();
        let g = net.backward(&cache, array![[0.5], [2.0]].view()).unwrap();
        // dW = xᵀ·g = [1·0.5 + 3·2, 2·0.5 − 1·2]
        assert_eq!(g.layers[0].weights, array![[6.5], [-1.0]]);
        assert_eq!(g.layers[0].bias, array![2.5]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let net = Mlp::new(&[3, 5, 2], 0.2, 1).unwrap();
        let x = random_matrix(4, 3, 2);
        let (_, cache) = net.forward(x.view(), Mode::Train { seed: 3 }).unwrap();
        let g = net.backward(&cache, Array2::zeros((4, 2)).view()).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        assert_eq!(
            Mlp::new(&[34, 64, 64, 1], 0.1, 5).unwrap(),
            Mlp::new(&[34, 64, 64, 1], 0.1, 5).unwrap()
        );
        assert_ne!(
            Mlp::new(&[4, 3, 1], 0.1, 5).unwrap(),
            Mlp::new(&[4, 3, 1], 0.1, 6).unwrap()
        );
        assert_eq!(Mlp::new(&[34, 1], 0.0, 0).unwrap().n_parameters(), 35);
        assert!(Mlp::new(&[3, 0, 1], 0.1, 0).is_err());
        assert!(Mlp::new(&[3], 0.1, 0).is_err());
        assert!(Mlp::new(&[3, 1], 1.0, 0).is_err());
        let net = Mlp::new(&[3, 2, 1], 0.0, 0).unwrap();
        assert!(matches!(
            net.forward(Array2::zeros((1, 4)).view(), Mode::Eval),
            Err(NnError::WidthMismatch {
                expected: 3,
                got: 4
            })
        ));
    }

    #[test]
    fn eval_is_repeatable_and_dropout_is_unbiased() {
        let net = Mlp::new(&[4, 8, 1], 0.3, 11).unwrap();
        let x = random_matrix(3, 4, 12);
        let e1 = net.predict(x.view()).unwrap();
        assert_eq!(e1, net.predict(x.view()).unwrap());
        let n_masks = 10_000;
        let mut acc = Array2::<f64>::zeros(e1.raw_dim());
        for s in 0..n_masks {
            acc += &net.forward(x.view(), Mode::Train { seed: s }).unwrap().0;
        }
        acc /= n_masks as f64;
        for (a, e) in acc.iter().zip(e1.iter()) {
            assert!((a - e).abs() / e.abs().max(1e-3) < 0.02, "{a} vs {e}");
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = Mlp::new(&[2, 3, 1], 0.0, 1).unwrap();
        let x = random_matrix(2, 2, 1);
        let (_, cache) = net.forward(x.view(), Mode::Eval).unwrap();
        let g = net.backward(&cache, Array2::ones((2, 1)).view()).unwrap();
        Adam::new(&net, 0.01, 1.0, 0.0)
            .step(&mut net, &g, 0)
            .unwrap();
        assert!(matches!(
            net.backward(&cache, Array2::ones((2, 1)).view()),
            Err(NnError::StaleCache)
        ));
    }

    #[test]
    fn learning_rate_schedule() {
        let net = Mlp::new(&[2, 1], 0.0, 0).unwrap();
        let opt = Adam::new(&net, 0.1, 0.7, 0.05);
        assert!((opt.learning_rate(2) - 0.049).abs() < 1e-15);
        assert_eq!(opt.learning_rate(0), 0.1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let layer = Layer {
            weights: array![[1.0], [-2.0]],
            bias: array![0.5],
        };
        let mut net = Mlp::from_layers(vec![layer], 0.0).unwrap();
        let grads = Gradients {
            layers: vec![Layer {
                weights: array![[3.0], [-0.01]],
                bias: array![0.0],
            }],
        };
        let mut opt = Adam::new(&net, 0.1, 1.0, 0.0);
        opt.step(&mut net, &grads, 0).unwrap();
        assert!((net.layers[0].weights[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((net.layers[0].weights[[1, 0]] + 1.9).abs() < 1e-5);
        assert_eq!(net.layers[0].bias[0], 0.5);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        let mut net = Mlp::new(&[3, 4, 1], 0.0, 2).unwrap();
        let before = net.layers.clone();
        let zero = Gradients {
            layers: net.layers.iter().map(Layer::zeros_like).collect(),
        };
        let mut opt = Adam::new(&net, 0.1, 0.7, 0.0);
        for e in 0..3 {
            opt.step(&mut net, &zero, e).unwrap();
        }
        assert_eq!(net.layers, before);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let layer = Layer {
            weights: array![[2.0]],
            bias: array![0.0],
        };
        let mut net = Mlp::from_layers(vec![layer], 0.0).unwrap();
        let zero = Gradients {
            layers: vec![Layer {
                weights: array![[0.0]],
                bias: array![0.0],
            }],
        };
        Adam::new(&net, 0.1, 1.0, 0.05)
            .step(&mut net, &zero, 0)
            .unwrap();
        assert!((net.layers[0].weights[[0, 0]] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut net = Mlp::new(&[2, 2, 1], 0.0, 0).unwrap();
        let mut g = Gradients {
            layers: net.layers.iter().map(Layer::zeros_like).collect(),
        };
        g.layers[1].bias[0] = f64::NAN;
        let err = Adam::new(&net, 0.1, 1.0, 0.0)
            .step(&mut net, &g, 0)
            .unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGradient { layer: 1 }));
    }

    #[test]
    fn memorizes_small_regression_task() {
        let x = random_matrix(20, 3, 21);
        let y = random_matrix(20, 1, 22);
        let mut net = Mlp::new(&[3, 32, 32, 1], 0.0, 23).unwrap();
        let mut opt = Adam::new(&net, 0.01, 1.0, 0.0);
        let mse = |n: &Mlp| {
            (n.predict(x.view()).unwrap() - &y)
                .mapv(|v| v * v)
                .mean()
                .unwrap()
        };
        let initial = mse(&net);
        for _ in 0..500 {
            let (out, cache) = net.forward(x.view(), Mode::Train { seed: 0 }).unwrap();
            let g = net
                .backward(&cache, ((out - &y) * (2.0 / 20.0)).view())
                .unwrap();
            opt.step(&mut net, &g, 0).unwrap();
        }
        assert!(mse(&net) < 0.1 * initial, "{} vs {}", mse(&net), initial);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Mlp::new(&[3, 4, 2], 0.1, 9).unwrap();
        let back = Mlp::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back.layers, net.layers);
        assert_eq!(back.sizes(), net.sizes());
        let x = random_matrix(2, 3, 1);
        assert_eq!(
            back.predict(x.view()).unwrap(),
            net.predict(x.view()).unwrap()
        );
    }
}
