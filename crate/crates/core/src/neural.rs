//! Encoder/decoder dictionary trained jointly with the Koopman matrix.
//!
//! The joint objective for a window `x_0 … x_T` is
//!
//! ```text
//! (1/T) Σ_{i<T} [ p₁ ‖x_i − dec(enc(x_i))‖² + p₂ ‖enc(x_{i+1}) − K^{i+1} enc(x_0)‖² ]
//! ```
//!
//! summed over a batch of windows. Gradients are exact reverse mode.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::Observables;
use crate::error::{check_dim, Error, Result};
use crate::koopman::least_squares_operator;
use crate::systems::SnapshotSet;

/// Dense network: `tanh` on hidden layers, identity on the output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedforwardNet {
    widths: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

/// Weight and bias gradients, shaped like the network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl NetGrad {
    fn zeros_like(net: &FeedforwardNet) -> Self {
        NetGrad {
            weights: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.transpose().iter());
            out.extend(b.iter());
        }
    }
}

impl FeedforwardNet {
    /// Scale-balanced uniform initialization, `±√(6 / (fan_in + fan_out))`.
    pub fn new_random<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        validate_widths(widths)?;
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit)));
            biases.push(DVector::zeros(fan_out));
        }
        Ok(FeedforwardNet {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        validate_widths(widths)?;
        Ok(FeedforwardNet {
            widths: widths.to_vec(),
            weights: widths.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: widths[1..].iter().map(|&m| DVector::zeros(m)).collect(),
        })
    }

    pub fn from_parts(weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidInput("need one bias per weight layer".into()));
        }
        let mut widths = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            check_dim(*widths.last().expect("nonempty"), w.ncols())?;
            check_dim(w.nrows(), b.len())?;
            widths.push(w.nrows());
        }
        if weights.iter().flat_map(|w| w.iter()).chain(biases.iter().flat_map(|b| b.iter())).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite network parameter".into()));
        }
        Ok(FeedforwardNet { widths, weights, biases })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_width(), x.len())?;
        let acts = self.forward_cached(&DVector::from_column_slice(x));
        Ok(acts.last().expect("output").iter().copied().collect())
    }

    /// Activations `a_0 = x, a_1, …, a_L`.
    fn forward_cached(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * acts.last().expect("nonempty") + b;
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// Accumulates parameter gradients given `dL/d(output)`; returns `dL/dx`.
    fn backward(&self, acts: &[DVector<f64>], grad_out: DVector<f64>, grads: &mut NetGrad) -> DVector<f64> {
        let last = self.weights.len() - 1;
        let mut delta = grad_out;
        for l in (0..=last).rev() {
            if l < last {
                // a = tanh(z) ⇒ dz = da ⊙ (1 − a²)
                delta.zip_apply(&acts[l + 1], |d, a| *d *= 1.0 - a * a);
            }
            grads.weights[l].ger(1.0, &delta, &acts[l], 1.0);
            grads.biases[l] += &delta;
            delta = self.weights[l].tr_mul(&delta);
        }
        delta
    }

    fn params_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.transpose().iter());
            out.extend(b.iter());
        }
    }

    fn set_params(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (rows, cols) = w.shape();
            for i in 0..rows {
                for j in 0..cols {
                    w[(i, j)] = src[k];
                    k += 1;
                }
            }
            for v in b.iter_mut() {
                *v = src[k];
                k += 1;
            }
        }
        k
    }

    pub fn to_file(&self) -> NetworkFile {
        NetworkFile {
            widths: self.widths.clone(),
            layers: self
                .weights
                .iter()
                .zip(&self.biases)
                .map(|(w, b)| LayerFile {
                    weights: w.transpose().iter().copied().collect(),
                    bias: b.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: &NetworkFile) -> Result<Self> {
        validate_widths(&file.widths)?;
        check_dim(file.widths.len() - 1, file.layers.len())?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (w, layer) in file.widths.windows(2).zip(&file.layers) {
            check_dim(w[0] * w[1], layer.weights.len())?;
            check_dim(w[1], layer.bias.len())?;
            weights.push(DMatrix::from_row_slice(w[1], w[0], &layer.weights));
            biases.push(DVector::from_column_slice(&layer.bias));
        }
        Self::from_parts(weights, biases)
    }
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::InvalidInput("network needs ≥ 2 positive layer widths".into()));
    }
    Ok(())
}

impl Observables for FeedforwardNet {
    fn input_dim(&self) -> usize {
        self.input_width()
    }

    fn output_dim(&self) -> usize {
        self.output_width()
    }

    fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x)
    }
}

/// Serialized network: widths, then row-major weights and biases per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub widths: Vec<usize>,
    pub layers: Vec<LayerFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multi-step horizon `T`.
    pub horizon: usize,
    pub p1: f64,
    pub p2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 200,
            batch_size: 32,
            horizon: 16,
            p1: 1.0,
            p2: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p1 > 0.0 && self.p2 > 0.0) {
            return Err(Error::InvalidInput("loss weights p1, p2 must be positive".into()));
        }
        if self.horizon == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("horizon and batch size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput("need learning_rate > 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Encoder, decoder and Koopman matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct JointModel {
    pub encoder: FeedforwardNet,
    pub decoder: FeedforwardNet,
    pub k: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointGrad {
    pub encoder: NetGrad,
    pub decoder: NetGrad,
    pub k: DMatrix<f64>,
}

impl JointGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.encoder.flatten_into(&mut v);
        self.decoder.flatten_into(&mut v);
        v.extend(self.k.transpose().iter());
        v
    }
}

impl JointModel {
    pub fn validate(&self) -> Result<()> {
        check_dim(self.encoder.output_width(), self.decoder.input_width())?;
        check_dim(self.encoder.input_width(), self.decoder.output_width())?;
        check_dim(self.encoder.output_width(), self.k.nrows())?;
        check_dim(self.k.nrows(), self.k.ncols())
    }

    /// Flat parameter vector: encoder, decoder, then `K` row-major.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.encoder.params_into(&mut v);
        self.decoder.params_into(&mut v);
        v.extend(self.k.transpose().iter());
        v
    }

    pub fn set_params(&mut self, src: &[f64]) {
        let mut k = self.encoder.set_params(src);
        k += self.decoder.set_params(&src[k..]);
        let n = self.k.nrows();
        for i in 0..n {
            for j in 0..n {
                self.k[(i, j)] = src[k];
                k += 1;
            }
        }
    }
}

/// Mean squared reconstruction error over a batch.
pub fn loss_autoencoder(encoder: &FeedforwardNet, decoder: &FeedforwardNet, batch: &[Vec<f64>]) -> Result<f64> {
    check_dim(encoder.output_width(), decoder.input_width())?;
    check_dim(encoder.input_width(), decoder.output_width())?;
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for x in batch {
        let xhat = decoder.forward(&encoder.forward(x)?)?;
        total += x.iter().zip(&xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// `Σ_{i<T} ‖enc(x_{i+1}) − K^{i+1} enc(x_0)‖²` over one trajectory segment.
pub fn loss_forward(encoder: &FeedforwardNet, k: &DMatrix<f64>, traj: &[Vec<f64>], horizon: usize) -> Result<f64> {
    check_dim(encoder.output_width(), k.nrows())?;
    check_dim(k.nrows(), k.ncols())?;
    if traj.len() < horizon + 1 {
        return Err(Error::InvalidInput(format!(
            "trajectory of length {} is shorter than horizon + 1 = {}",
            traj.len(),
            horizon + 1
        )));
    }
    let mut p = DVector::from_vec(encoder.forward(&traj[0])?);
    let mut total = 0.0;
    for x in &traj[1..=horizon] {
        p = k * p;
        let z = DVector::from_vec(encoder.forward(x)?);
        total += (z - &p).norm_squared();
    }
    Ok(total)
}

/// Joint objective summed over windows of length `horizon + 1`.
pub fn joint_loss(model: &JointModel, windows: &[&[Vec<f64>]], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for w in windows {
        total += window_loss_grad(model, w, cfg, None)?;
    }
    Ok(total)
}

/// Exact gradients of [`joint_loss`] with respect to all parameters.
pub fn backprop_gradients(model: &JointModel, windows: &[&[Vec<f64>]], cfg: &TrainConfig) -> Result<(f64, JointGrad)> {
    model.validate()?;
    let mut grad = JointGrad {
        encoder: NetGrad::zeros_like(&model.encoder),
        decoder: NetGrad::zeros_like(&model.decoder),
        k: DMatrix::zeros(model.k.nrows(), model.k.ncols()),
    };
    let mut total = 0.0;
    for w in windows {
        total += window_loss_grad(model, w, cfg, Some(&mut grad))?;
    }
    Ok((total, grad))
}

fn window_loss_grad(model: &JointModel, window: &[Vec<f64>], cfg: &TrainConfig, grad: Option<&mut JointGrad>) -> Result<f64> {
    let t = cfg.horizon;
    if window.len() < t + 1 {
        return Err(Error::InvalidInput("window shorter than horizon + 1".into()));
    }
    let n = model.encoder.input_width();
    let scale = 1.0 / t as f64;
    let enc_acts: Vec<Vec<DVector<f64>>> = window[..=t]
        .iter()
        .map(|x| {
            check_dim(n, x.len())?;
            Ok(model.encoder.forward_cached(&DVector::from_column_slice(x)))
        })
        .collect::<Result<_>>()?;
    let z: Vec<&DVector<f64>> = enc_acts.iter().map(|a| a.last().expect("output")).collect();

    let mut loss = 0.0;
    let mut dz: Vec<DVector<f64>> = z.iter().map(|v| DVector::zeros(v.len())).collect();
    let want_grad = grad.is_some();
    let mut dec_parts = Vec::new();

    for i in 0..t {
        let dec_acts = model.decoder.forward_cached(z[i]);
        let r = dec_acts.last().expect("output") - DVector::from_column_slice(&window[i]);
        loss += cfg.p1 * scale * r.norm_squared();
        if want_grad {
            dec_parts.push((i, dec_acts, r * (2.0 * cfg.p1 * scale)));
        }
    }

    // forward predictions p_i = K^i z_0
    let mut preds = Vec::with_capacity(t + 1);
    preds.push(z[0].clone());
    for i in 1..=t {
        let next = &model.k * &preds[i - 1];
        preds.push(next);
    }
    let errs: Vec<DVector<f64>> = (1..=t).map(|i| z[i] - &preds[i]).collect();
    for e in &errs {
        loss += cfg.p2 * scale * e.norm_squared();
    }

    if let Some(grad) = grad {
        for (i, acts, gout) in dec_parts {
            let g = model.decoder.backward(&acts, gout, &mut grad.decoder);
            dz[i] += g;
        }
        let c = 2.0 * cfg.p2 * scale;
        let mut g_next: Option<DVector<f64>> = None;
        for i in (1..=t).rev() {
            let mut g = &errs[i - 1] * (-c);
            if let Some(gn) = &g_next {
                g += model.k.tr_mul(gn);
            }
            grad.k.ger(1.0, &g, &preds[i - 1], 1.0);
            dz[i] += &errs[i - 1] * c;
            g_next = Some(g);
        }
        if let Some(g1) = g_next {
            dz[0] += model.k.tr_mul(&g1);
        }
        for (acts, d) in enc_acts.iter().zip(dz) {
            model.encoder.backward(acts, d, &mut grad.encoder);
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: JointModel,
    /// Mean joint loss per window; entry 0 is before training.
    pub losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Momentum gradient descent on the joint objective.
///
/// The decoder mirrors the encoder widths. `K` starts from a one-step
/// least-squares fit on the initial encoder outputs. Returns the parameters
/// with the lowest recorded loss.
pub fn train_joint(data: &SnapshotSet, widths: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    validate_widths(widths)?;
    check_dim(data.dim(), widths[0])?;
    let trajs = data.trajectories();
    let windows: Vec<&[Vec<f64>]> = trajs
        .iter()
        .flat_map(|t| (0..t.len().saturating_sub(cfg.horizon)).map(move |s| &t[s..=s + cfg.horizon]))
        .collect();
    if windows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no trajectory has the {} states required by the horizon",
            cfg.horizon + 1
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = FeedforwardNet::new_random(widths, &mut rng)?;
    let rev: Vec<usize> = widths.iter().rev().copied().collect();
    let decoder = FeedforwardNet::new_random(&rev, &mut rng)?;
    let zx = lift_columns(&encoder, &data.x)?;
    let zy = lift_columns(&encoder, &data.y)?;
    let (k, _) = least_squares_operator(&zx, &zy, 1e-10)?;
    let mut model = JointModel { encoder, decoder, k };

    let count = windows.len() as f64;
    let mean_loss = |m: &JointModel| joint_loss(m, &windows, cfg).map(|l| l / count);
    let initial = mean_loss(&model)?;
    if !initial.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let mut losses = vec![initial];
    let mut best = (initial, 0, model.clone());
    let mut params = model.params();
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[Vec<f64>]> = chunk.iter().map(|&i| windows[i]).collect();
            let (_, g) = backprop_gradients(&model, &batch, cfg)?;
            let inv = 1.0 / batch.len() as f64;
            for ((p, v), gi) in params.iter_mut().zip(velocity.iter_mut()).zip(g.flatten()) {
                *v = cfg.momentum * *v - cfg.learning_rate * gi * inv;
                *p += *v;
            }
            model.set_params(&params);
        }
        let loss = mean_loss(&model)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, epoch, model.clone());
        }
    }
    Ok(TrainOutcome {
        model: best.2,
        losses,
        best_epoch: best.1,
    })
}

/// Columns `Φ(x_j)` for each state.
pub(crate) fn lift_columns(lift: &dyn Observables, xs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let cols = crate::par::try_map_range(xs.len(), |i| lift.lift(&xs[i]))?;
    let m = lift.output_dim();
    let mut out = DMatrix::zeros(m, xs.len());
    for (j, c) in cols.iter().enumerate() {
        out.column_mut(j).copy_from_slice(c);
    }
    Ok(out)
}
