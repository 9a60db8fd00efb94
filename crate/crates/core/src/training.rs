//! Mini-batch gradient descent with hand-derived backpropagation, plus the
//! meta-unlearning procedure and the surrogate hijack trainer.
//!
//! All training is plain SGD over seeded shuffles, so results are exactly
//! reproducible. Loss is mean cross-entropy of the softmaxed logits.

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{self, Activation, InitScheme, Network, NetworkSpec, TapPoint};
use crate::util::mix_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Training loss above this value aborts the run as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Hyperparameters for one SGD training run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Parameter(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Accuracy on the training set after the final epoch.
    pub train_accuracy: f64,
    /// Accuracy on a held-out set, when the caller evaluated one.
    pub test_accuracy: Option<f64>,
    pub wall_clock_s: f64,
}

/// Per-layer gradients with the same shapes as the network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Flatten in the same layout as [`Network::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

/// Mean cross-entropy loss and its gradient over a batch.
///
/// The gradient is computed by backpropagation; every component matches a
/// central finite difference of the loss (the test suites check this).
pub fn loss_and_grad(net: &Network, features: &[&[f64]], labels: &[usize]) -> Result<(f64, Gradients)> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Parameter(format!(
            "batch needs matching nonempty features/labels, got {}/{}",
            features.len(),
            labels.len()
        )));
    }
    let n_out = net.output_dim();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_out) {
        return Err(Error::Parameter(format!(
            "label {bad} outside the network's {n_out} outputs"
        )));
    }

    let batch = features.len() as f64;
    let mut grads = Gradients::zeros_like(net);
    let mut total_loss = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        let trace = net.forward_full(x)?;
        if trace.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite activations in forward pass".into()));
        }
        let probs = network::softmax(&trace.logits);
        total_loss -= probs[y].max(f64::MIN_POSITIVE).ln();

        // delta at the output layer: (softmax - onehot) / batch
        let mut delta: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (p - if i == y { 1.0 } else { 0.0 }) / batch)
            .collect();

        for layer_idx in (0..net.layers.len()).rev() {
            let input: &[f64] = if layer_idx == 0 {
                &trace.input
            } else {
                &trace.hidden[layer_idx - 1]
            };
            let layer = &net.layers[layer_idx];
            let grad = &mut grads.layers[layer_idx];
            for r in 0..layer.rows {
                let d = delta[r];
                grad.bias[r] += d;
                let row = &mut grad.weights[r * layer.cols..(r + 1) * layer.cols];
                for (g, v) in row.iter_mut().zip(input) {
                    *g += d * v;
                }
            }
            if layer_idx > 0 {
                // push delta through W^T and the activation derivative
                let mut upstream = vec![0.0; layer.cols];
                for r in 0..layer.rows {
                    let d = delta[r];
                    let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                    for (u, w) in upstream.iter_mut().zip(row) {
                        *u += d * w;
                    }
                }
                let act_deriv = trace.activation_derivative(layer_idx - 1, net.spec.activation);
                delta = upstream
                    .into_iter()
                    .zip(act_deriv)
                    .map(|(u, dact)| u * dact)
                    .collect();
            }
        }
    }
    let loss = total_loss / batch;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok((loss, grads))
}

fn apply_sgd_step(net: &mut Network, grads: &Gradients, lr: f64) {
    for (layer, grad) in net.layers.iter_mut().zip(&grads.layers) {
        for (w, g) in layer.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }
}

fn check_divergence(loss: f64, epoch: usize) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
        return Err(Error::Numeric(format!(
            "training diverged at epoch {epoch} (loss {loss})"
        )));
    }
    Ok(())
}

fn batch_views<'a>(
    ds: &'a LabeledDataset,
    indices: &[usize],
) -> (Vec<&'a [f64]>, Vec<usize>) {
    let features: Vec<&[f64]> = indices.iter().map(|&i| ds.samples[i].features.as_slice()).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| ds.samples[i].original_label).collect();
    (features, labels)
}

/// Train a network on the original task with vanilla SGD.
///
/// Batches come from a seeded shuffle per epoch; for fixed seeds the final
/// weights are bitwise reproducible.
pub fn train(net: &Network, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    validate_compat(net, ds)?;
    let start = Instant::now();
    let mut model = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (features, labels) = batch_views(ds, chunk);
            let (loss, grads) = loss_and_grad(&model, &features, &labels)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            check_divergence(loss, epoch)?;
            apply_sgd_step(&mut model, &grads, cfg.learning_rate);
            epoch_loss += loss;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    let train_accuracy = dataset_accuracy(&model, ds)?;
    Ok((
        model,
        TrainReport {
            epoch_losses,
            train_accuracy,
            test_accuracy: None,
            wall_clock_s: start.elapsed().as_secs_f64(),
        },
    ))
}

fn validate_compat(net: &Network, ds: &LabeledDataset) -> Result<()> {
    if ds.feature_dim != net.input_dim() {
        return Err(Error::Config(format!(
            "dataset dimension {} does not match network input width {}",
            ds.feature_dim,
            net.input_dim()
        )));
    }
    if ds.n_classes_original > net.output_dim() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the network emits {} logits",
            ds.n_classes_original,
            net.output_dim()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of the network over a dataset's original labels.
pub fn dataset_loss(net: &Network, ds: &LabeledDataset) -> Result<f64> {
    let features: Vec<&[f64]> = ds.samples.iter().map(|s| s.features.as_slice()).collect();
    let labels: Vec<usize> = ds.samples.iter().map(|s| s.original_label).collect();
    let (loss, _) = loss_and_grad(net, &features, &labels)?;
    Ok(loss)
}

/// Fraction of samples whose argmax logit equals the original label.
pub fn dataset_accuracy(net: &Network, ds: &LabeledDataset) -> Result<f64> {
    let mut hits = 0;
    for s in &ds.samples {
        if net.predict(&s.features)? == s.original_label {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Accuracy of a classifier over bare (features, label) pairs.
pub fn pairs_accuracy(net: &Network, pairs: &[(Vec<f64>, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Parameter("cannot score an empty evaluation set".into()));
    }
    let mut hits = 0;
    for (x, y) in pairs {
        if net.predict(x)? == *y {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// How the two meta-unlearning updates are committed each batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnMode {
    /// Commit the inner original-task step, then add the unlearning step on
    /// top of it. With `beta = 0` this is exactly plain SGD.
    CommitBoth,
    /// Keep the inner step as a lookahead only: the unlearning step is added
    /// to the pre-update parameters. With `beta = 0` parameters never move.
    EvaluateOnly,
}

/// Parameters of the meta-unlearning procedure.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UnlearnConfig {
    /// Step size of the inner original-task update (also used for the
    /// auxiliary head's own descent step).
    pub alpha: f64,
    /// Step size of the gradient-ascent step on the hijack-task loss.
    /// Zero disables unlearning entirely.
    pub beta: f64,
    pub mode: UnlearnMode,
    /// Layer feeding the auxiliary hijack head; `None` means the last
    /// hidden layer.
    pub tap: Option<TapPoint>,
}

impl UnlearnConfig {
    pub fn new(alpha: f64, beta: f64) -> Self {
        UnlearnConfig {
            alpha,
            beta,
            mode: UnlearnMode::CommitBoth,
            tap: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Parameter(format!(
                "unlearn alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Parameter(format!(
                "unlearn beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// One meta-unlearning parameter update, expressed over flat vectors.
///
/// Computes the inner step `theta' = theta - alpha * grad_original(theta)`,
/// evaluates the hijack-task gradient at `theta'` (first order: no chain
/// rule through the inner step), and adds `beta` times that gradient on top
/// of either `theta'` ([`UnlearnMode::CommitBoth`]) or the untouched
/// `theta` ([`UnlearnMode::EvaluateOnly`]). A zero `beta` skips the hijack
/// evaluation entirely.
pub fn meta_unlearn_step<FI, FJ>(
    theta: &[f64],
    alpha: f64,
    beta: f64,
    mode: UnlearnMode,
    grad_original: FI,
    grad_hijack: FJ,
) -> Vec<f64>
where
    FI: FnOnce(&[f64]) -> Vec<f64>,
    FJ: FnOnce(&[f64]) -> Vec<f64>,
{
    let g_inner = grad_original(theta);
    let inner: Vec<f64> = theta.iter().zip(&g_inner).map(|(t, g)| t - alpha * g).collect();
    let base: &[f64] = match mode {
        UnlearnMode::CommitBoth => &inner,
        UnlearnMode::EvaluateOnly => theta,
    };
    if beta == 0.0 {
        return base.to_vec();
    }
    let g_hijack = grad_hijack(&inner);
    base.iter().zip(&g_hijack).map(|(b, g)| b + beta * g).collect()
}

/// Linear auxiliary head mapping tapped features to hijack classes.
struct AuxHead {
    weights: Vec<f64>, // rows = m, cols = feature dim
    bias: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl AuxHead {
    fn init(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = rand_distr::Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("he sigma");
        let weights = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
        AuxHead {
            weights,
            bias: vec![0.0; rows],
            rows,
            cols,
        }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            out[r] += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }
}

/// Train on the original task while unlearning the hijack task.
///
/// Each batch performs the inner original-task step and the hijack-task
/// ascent step of [`meta_unlearn_step`]. The hijack loss is cross-entropy
/// through an auxiliary linear head attached to the tapped layer; the head
/// takes its own descent step every batch and is discarded at the end.
pub fn meta_unlearn_train(
    net: &Network,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    ucfg: &UnlearnConfig,
) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    ucfg.validate()?;
    validate_compat(net, ds)?;
    if !ds.has_hijack_labels() {
        return Err(Error::Config("meta-unlearning needs hijack labels".into()));
    }
    let tap_point = match ucfg.tap {
        Some(p) => p,
        None => {
            if net.hidden_count() == 0 {
                TapPoint::Logits
            } else {
                TapPoint::Layer(net.hidden_count() - 1)
            }
        }
    };
    let tap_dim = match tap_point {
        TapPoint::Logits => net.output_dim(),
        TapPoint::Layer(k) => {
            if k >= net.hidden_count() {
                return Err(Error::Config(format!(
                    "unlearn tap layer {k} out of range ({} hidden layers)",
                    net.hidden_count()
                )));
            }
            net.realized_widths[k + 1]
        }
    };

    let start = Instant::now();
    let m = ds.n_classes_hijack;
    let mut head = AuxHead::init(m, tap_dim, mix_seed(cfg.seed, HEAD_SEED_STREAM));
    let mut model = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..ds.len()).collect();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (features, labels) = batch_views(ds, chunk);
            let hijack_labels: Vec<usize> = chunk
                .iter()
                .map(|&i| ds.samples[i].hijack_label.expect("validated above"))
                .collect();

            let (loss, inner_grads) = loss_and_grad(&model, &features, &labels)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            check_divergence(loss, epoch)?;

            if ucfg.beta == 0.0 {
                // degenerates to plain SGD on the original task
                apply_sgd_step(&mut model, &inner_grads, ucfg.alpha);
            } else {
                let mut inner_model = model.clone();
                apply_sgd_step(&mut inner_model, &inner_grads, ucfg.alpha);
                let (hijack_net_grads, head_grads) =
                    hijack_loss_grads(&inner_model, &head, tap_point, &features, &hijack_labels)?;
                let base = match ucfg.mode {
                    UnlearnMode::CommitBoth => &inner_model,
                    UnlearnMode::EvaluateOnly => &model,
                };
                let mut next = base.clone();
                ascend(&mut next, &hijack_net_grads, ucfg.beta);
                model = next;
                // the probe head keeps learning the hijack task (descent)
                for (w, g) in head.weights.iter_mut().zip(&head_grads.weights) {
                    *w -= ucfg.alpha * g;
                }
                for (b, g) in head.bias.iter_mut().zip(&head_grads.bias) {
                    *b -= ucfg.alpha * g;
                }
            }
            epoch_loss += loss;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    let train_accuracy = dataset_accuracy(&model, ds)?;
    Ok((
        model,
        TrainReport {
            epoch_losses,
            train_accuracy,
            test_accuracy: None,
            wall_clock_s: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Stream index separating the auxiliary head's RNG from the shuffle RNG.
const HEAD_SEED_STREAM: u64 = 0xAE51;

fn ascend(net: &mut Network, grads: &Gradients, beta: f64) {
    for (layer, grad) in net.layers.iter_mut().zip(&grads.layers) {
        for (w, g) in layer.weights.iter_mut().zip(&grad.weights) {
            *w += beta * g;
        }
        for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
            *b += beta * g;
        }
    }
}

/// Gradient of the hijack cross-entropy (through the auxiliary head) with
/// respect to the network parameters and the head parameters.
fn hijack_loss_grads(
    net: &Network,
    head: &AuxHead,
    tap_point: TapPoint,
    features: &[&[f64]],
    hijack_labels: &[usize],
) -> Result<(Gradients, LayerGrad)> {
    let batch = features.len() as f64;
    let mut net_grads = Gradients::zeros_like(net);
    let mut head_grads = LayerGrad {
        weights: vec![0.0; head.weights.len()],
        bias: vec![0.0; head.bias.len()],
    };
    // index of the last network layer that feeds the tap
    let tap_layer = match tap_point {
        TapPoint::Logits => net.layers.len() - 1,
        TapPoint::Layer(k) => k,
    };
    for (x, &y) in features.iter().zip(hijack_labels) {
        let trace = net.forward_full(x)?;
        let tapped: &[f64] = match tap_point {
            TapPoint::Logits => &trace.logits,
            TapPoint::Layer(k) => &trace.hidden[k],
        };
        let probs = network::softmax(&head.logits(tapped));
        let delta_head: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (p - if i == y { 1.0 } else { 0.0 }) / batch)
            .collect();
        for r in 0..head.rows {
            let d = delta_head[r];
            head_grads.bias[r] += d;
            let row = &mut head_grads.weights[r * head.cols..(r + 1) * head.cols];
            for (g, v) in row.iter_mut().zip(tapped) {
                *g += d * v;
            }
        }
        // gradient flowing into the tapped features
        let mut upstream = vec![0.0; head.cols];
        for r in 0..head.rows {
            let d = delta_head[r];
            let row = &head.weights[r * head.cols..(r + 1) * head.cols];
            for (u, w) in upstream.iter_mut().zip(row) {
                *u += d * w;
            }
        }
        // continue backprop through the network below the tap
        let mut delta = match tap_point {
            TapPoint::Logits => upstream,
            TapPoint::Layer(k) => {
                let act_deriv = trace.activation_derivative(k, net.spec.activation);
                upstream
                    .into_iter()
                    .zip(act_deriv)
                    .map(|(u, dact)| u * dact)
                    .collect()
            }
        };
        for layer_idx in (0..=tap_layer).rev() {
            let input: &[f64] = if layer_idx == 0 {
                &trace.input
            } else {
                &trace.hidden[layer_idx - 1]
            };
            let layer = &net.layers[layer_idx];
            let grad = &mut net_grads.layers[layer_idx];
            for r in 0..layer.rows {
                let d = delta[r];
                grad.bias[r] += d;
                let row = &mut grad.weights[r * layer.cols..(r + 1) * layer.cols];
                for (g, v) in row.iter_mut().zip(input) {
                    *g += d * v;
                }
            }
            if layer_idx > 0 {
                let mut upstream = vec![0.0; layer.cols];
                for r in 0..layer.rows {
                    let d = delta[r];
                    let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                    for (u, w) in upstream.iter_mut().zip(row) {
                        *u += d * w;
                    }
                }
                let act_deriv = trace.activation_derivative(layer_idx - 1, net.spec.activation);
                delta = upstream
                    .into_iter()
                    .zip(act_deriv)
                    .map(|(u, dact)| u * dact)
                    .collect();
            }
        }
    }
    Ok((net_grads, head_grads))
}

/// Hidden width of the surrogate classifier.
const SURROGATE_HIDDEN: usize = 32;

/// Train a fresh small MLP that maps extracted vectors to hijack labels.
///
/// This is the stronger-access comparison: a model trained directly on the
/// hijack task over the same extracted vectors the distance rule sees.
pub fn train_surrogate(
    vectors: &[Vec<f64>],
    hijack_labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Network> {
    if vectors.is_empty() || vectors.len() != hijack_labels.len() {
        return Err(Error::Parameter(format!(
            "surrogate needs matching nonempty vectors/labels, got {}/{}",
            vectors.len(),
            hijack_labels.len()
        )));
    }
    let m = hijack_labels.iter().max().map(|&v| v + 1).unwrap_or(0);
    let distinct = {
        let mut seen = vec![false; m];
        hijack_labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Config(format!(
            "surrogate training needs >= 2 hijack classes, found {distinct}"
        )));
    }
    let dim = vectors[0].len();
    let samples: Vec<crate::datasets::Sample> = vectors
        .iter()
        .zip(hijack_labels)
        .map(|(v, &l)| crate::datasets::Sample {
            features: v.clone(),
            original_label: l,
            hijack_label: None,
        })
        .collect();
    let ds = LabeledDataset::new(samples, m, 0, "surrogate-train")?;
    let spec = NetworkSpec::new(
        vec![dim, SURROGATE_HIDDEN, m],
        Activation::Relu,
        1.0,
        InitScheme::He,
        cfg.seed,
    );
    let net = network::build(&spec)?;
    let (trained, _) = train(&net, &ds, cfg)?;
    Ok(trained)
}
