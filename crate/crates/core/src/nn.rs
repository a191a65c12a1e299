//! Small fully-connected network with ReLU hidden layers, mean-squared-error
//! backprop and Adam. Enough to train a random-network-distillation
//! predictor; nothing more general.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    /// `weights[l]` has shape `(layer_sizes[l + 1], layer_sizes[l])`.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Parameter-shaped container for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Params {
    fn zeros_like(net: &Mlp) -> Self {
        Params {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
    }
}

fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(Error::Invalid(format!(
            "layer sizes must list >= 2 positive sizes, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// Uniform `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]` weights, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let mut r = rng::substream(seed, "mlp-init", &[]);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                r.gen_range(-bound..bound)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Invalid("need one bias per weight matrix".into()));
        }
        let mut layer_sizes = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            let prev = *layer_sizes.last().unwrap();
            if w.ncols() != prev {
                return Err(Error::DimensionMismatch {
                    expected: prev,
                    got: w.ncols(),
                });
            }
            if b.len() != w.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: w.nrows(),
                    got: b.len(),
                });
            }
            layer_sizes.push(w.nrows());
        }
        check_sizes(&layer_sizes)?;
        let net = Mlp {
            layer_sizes,
            weights,
            biases,
        };
        if !net.params().all(|x| x.is_finite()) {
            return Err(Error::Invalid("non-finite parameter".into()));
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params().count()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.layer_sizes {
            h.update((*s as u64).to_le_bytes());
        }
        for x in self.params() {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: batch.ncols(),
            });
        }
        Ok(())
    }

    /// Rows of `batch` are inputs; rows of the result are outputs.
    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch)?;
        let last = self.weights.len() - 1;
        let mut h = batch.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(&w.t()) + b;
            if l < last {
                h.mapv_inplace(relu);
            }
        }
        Ok(h)
    }

    /// Mean squared error over batch rows and output coordinates, with its
    /// gradient by reverse accumulation.
    pub fn mse_grad(&self, batch: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Params)> {
        self.check_input(&batch)?;
        if targets.nrows() != batch.nrows() || targets.ncols() != self.output_dim() {
            return Err(Error::Invalid(format!(
                "targets shape {:?} does not match batch of {} rows and output dim {}",
                targets.shape(),
                batch.nrows(),
                self.output_dim()
            )));
        }
        let last = self.weights.len() - 1;
        // activations[l] feeds layer l
        let mut activations = vec![batch.to_owned()];
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = activations[l].dot(&w.t()) + b;
            if l < last {
                z.mapv_inplace(relu);
            }
            activations.push(z);
        }
        let out = activations.pop().unwrap();
        let diff = &out - &targets;
        let count = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;

        let mut grads = Params::zeros_like(self);
        let mut delta = diff * (2.0 / count);
        for l in (0..=last).rev() {
            let input = &activations[l];
            grads.weights[l] = delta.t().dot(input);
            grads.biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                // ReLU'(z) is 1 exactly where the stored activation is positive
                ndarray::Zip::from(&mut back)
                    .and(input)
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = back;
            }
        }
        Ok((loss, grads))
    }

    /// Checkpoint as JSON with every parameter written to 17 significant
    /// digits.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\"layer_sizes\":[");
        let sizes: Vec<String> = self.layer_sizes.iter().map(usize::to_string).collect();
        s.push_str(&sizes.join(","));
        s.push_str("],\"weights\":[");
        for (l, w) in self.weights.iter().enumerate() {
            if l > 0 {
                s.push(',');
            }
            write_floats(&mut s, w.iter());
        }
        s.push_str("],\"biases\":[");
        for (l, b) in self.biases.iter().enumerate() {
            if l > 0 {
                s.push(',');
            }
            write_floats(&mut s, b.iter());
        }
        s.push_str("]}");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            layer_sizes: Vec<usize>,
            weights: Vec<Vec<f64>>,
            biases: Vec<Vec<f64>>,
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| Error::Invalid(e.to_string()))?;
        check_sizes(&raw.layer_sizes)?;
        let n_layers = raw.layer_sizes.len() - 1;
        if raw.weights.len() != n_layers || raw.biases.len() != n_layers {
            return Err(Error::Invalid("parameter arrays do not match layer sizes".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, (w, b)) in raw.weights.into_iter().zip(raw.biases).enumerate() {
            let shape = (raw.layer_sizes[l + 1], raw.layer_sizes[l]);
            weights.push(
                Array2::from_shape_vec(shape, w).map_err(|e| Error::Invalid(e.to_string()))?,
            );
            biases.push(Array1::from_vec(b));
        }
        Mlp::from_parts(weights, biases)
    }
}

fn write_floats<'a>(s: &mut String, xs: impl Iterator<Item = &'a f64>) {
    s.push('[');
    for (i, x) in xs.enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{x:.16e}").unwrap();
    }
    s.push(']');
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Params,
    second: Params,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(net: &Mlp) -> Self {
        Self::with_learning_rate(net, DEFAULT_LEARNING_RATE)
    }

    pub fn with_learning_rate(net: &Mlp, learning_rate: f64) -> Self {
        AdamState {
            first: Params::zeros_like(net),
            second: Params::zeros_like(net),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(net: &mut Mlp, grads: &Params, state: &mut AdamState) -> Result<()> {
    if grads.weights.len() != net.weights.len()
        || grads
            .weights
            .iter()
            .zip(&net.weights)
            .any(|(g, w)| g.raw_dim() != w.raw_dim())
        || grads
            .biases
            .iter()
            .zip(&net.biases)
            .any(|(g, b)| g.raw_dim() != b.raw_dim())
    {
        return Err(Error::Invalid("gradient shapes do not match the network".into()));
    }
    if !grads.values().all(|g| g.is_finite()) {
        return Err(Error::Invalid("non-finite gradient".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.learning_rate, state.eps_hat);
    let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for l in 0..net.weights.len() {
        ndarray::Zip::from(&mut net.weights[l])
            .and(&grads.weights[l])
            .and(&mut state.first.weights[l])
            .and(&mut state.second.weights[l])
            .for_each(update);
        ndarray::Zip::from(&mut net.biases[l])
            .and(&grads.biases[l])
            .and(&mut state.first.biases[l])
            .and(&mut state.second.biases[l])
            .for_each(update);
    }
    Ok(())
}

pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub full_batch_max: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: DEFAULT_LEARNING_RATE,
            full_batch_max: 4096,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Fit `net` to `targets` with Adam for `epochs` passes. Full batch up to
/// `full_batch_max` rows, otherwise shuffled minibatches of `batch_size`.
/// Returns the mean training loss of each epoch.
pub fn train_mse(
    net: &mut Mlp,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    use rand::seq::SliceRandom;

    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::Invalid("no training rows".into()));
    }
    let mut adam = AdamState::with_learning_rate(net, cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let loss = if n <= cfg.full_batch_max {
            let (loss, g) = net.mse_grad(inputs, targets)?;
            check_loss(loss, cfg.seed, epoch)?;
            adam_step(net, &g, &mut adam)?;
            loss
        } else {
            order.shuffle(&mut rng::substream(cfg.seed, "minibatch", &[epoch as u64]));
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let x = inputs.select(Axis(0), chunk);
                let y = targets.select(Axis(0), chunk);
                let (loss, g) = net.mse_grad(x.view(), y.view())?;
                check_loss(loss, cfg.seed, epoch)?;
                adam_step(net, &g, &mut adam)?;
                total += loss * chunk.len() as f64;
            }
            total / n as f64
        };
        losses.push(loss);
    }
    Ok(losses)
}

fn check_loss(loss: f64, seed: u64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { seed, epoch })
    }
}

pub fn rows_to_array<R: AsRef<[f64]>>(rows: &[R], dim: usize) -> Result<Array2<f64>> {
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        let r = r.as_ref();
        if r.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.len(),
            });
        }
        flat.extend_from_slice(r);
    }
    Ok(Array2::from_shape_vec((rows.len(), dim), flat).expect("shape checked"))
}
