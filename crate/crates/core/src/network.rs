//! Small feedforward networks with per-layer activation taps.
//!
//! A network is a stack of dense layers: hidden layers apply the configured
//! activation, the last layer is linear and produces logits. Hidden widths
//! can be scaled by a width-expansion factor, initialization is fully
//! deterministic from the spec seed, and models round-trip bit-exactly
//! through a binary file format.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights and biases i.i.d. `N(0, sigma^2)`.
    Gaussian { sigma: f64 },
    /// Weights `N(0, 2 / fan_in)`, biases zero.
    He,
}

/// Architecture description: `layer_widths = [d_in, h_1, .., h_L, n_out]`.
///
/// `width_expansion` scales hidden widths only; each is rounded half-up and
/// clamped to at least 1. Input and output widths are never scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub width_expansion: f64,
    pub init: InitScheme,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        activation: Activation,
        width_expansion: f64,
        init: InitScheme,
        seed: u64,
    ) -> Self {
        NetworkSpec {
            layer_widths,
            activation,
            width_expansion,
            init,
            seed,
        }
    }

    /// Widths after applying the expansion factor to hidden layers.
    pub fn realized_widths(&self) -> Result<Vec<usize>> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Parameter(
                "layer_widths needs at least input and output entries".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Parameter("layer widths must all be >= 1".into()));
        }
        if !self.width_expansion.is_finite() || self.width_expansion <= 0.0 {
            return Err(Error::Parameter(format!(
                "width_expansion must be positive and finite, got {}",
                self.width_expansion
            )));
        }
        let last = self.layer_widths.len() - 1;
        Ok(self
            .layer_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if i == 0 || i == last {
                    w
                } else {
                    // round-half-up, clamped at 1
                    ((w as f64 * self.width_expansion).round() as usize).max(1)
                }
            })
            .collect())
    }

    fn validate(&self) -> Result<()> {
        self.realized_widths()?;
        if let InitScheme::Gaussian { sigma } = self.init {
            if !sigma.is_finite() || sigma < 0.0 {
                return Err(Error::Parameter(format!(
                    "gaussian init sigma must be finite and >= 0, got {sigma}"
                )));
            }
        }
        Ok(())
    }
}

/// One dense layer; `weights` is row-major with shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl DenseLayer {
    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut out = self.bias.clone();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out[r] += acc;
        }
        out
    }
}

/// An immutable trained or initialized network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub realized_widths: Vec<usize>,
    pub layers: Vec<DenseLayer>,
}

/// All per-layer outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Post-activation output of each hidden layer, in order.
    pub hidden: Vec<Vec<f64>>,
    /// Pre-softmax output of the final linear layer.
    pub logits: Vec<f64>,
}

/// Where to read an activation vector from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TapPoint {
    /// Post-activation output of hidden layer `k` (0-based).
    Layer(usize),
    /// The final pre-softmax logit vector.
    Logits,
}

impl std::fmt::Display for TapPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TapPoint::Layer(k) => write!(f, "layer:{k}"),
            TapPoint::Logits => write!(f, "logits"),
        }
    }
}

/// Build a network with deterministic weights drawn from the spec seed.
pub fn build(spec: &NetworkSpec) -> Result<Network> {
    spec.validate()?;
    let widths = spec.realized_widths()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for w in widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let (weight_dist, bias_sigma) = match spec.init {
            InitScheme::Gaussian { sigma } => (Normal::new(0.0, sigma), sigma),
            InitScheme::He => (Normal::new(0.0, (2.0 / fan_in as f64).sqrt()), 0.0),
        };
        let weight_dist = weight_dist
            .map_err(|e| Error::Parameter(format!("invalid init distribution: {e}")))?;
        let weights: Vec<f64> = (0..fan_in * fan_out).map(|_| weight_dist.sample(&mut rng)).collect();
        let bias: Vec<f64> = if bias_sigma > 0.0 {
            let bias_dist = Normal::new(0.0, bias_sigma).expect("validated sigma");
            (0..fan_out).map(|_| bias_dist.sample(&mut rng)).collect()
        } else {
            vec![0.0; fan_out]
        };
        layers.push(DenseLayer {
            weights,
            bias,
            rows: fan_out,
            cols: fan_in,
        });
    }
    Ok(Network {
        spec: spec.clone(),
        realized_widths: widths,
        layers,
    })
}

impl Network {
    pub fn input_dim(&self) -> usize {
        self.realized_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.realized_widths.last().expect("at least two widths")
    }

    /// Number of hidden layers.
    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    /// Run the network on one input, recording every layer output.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        Ok(self.forward_full(x)?.into_trace())
    }

    /// Forward pass that also keeps pre-activations, for backprop.
    pub(crate) fn forward_full(&self, x: &[f64]) -> Result<FullTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::Parameter(format!(
                "input length {} does not match network input width {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::with_capacity(self.hidden_count());
        let mut current = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.matvec(&current);
            pre.push(z.clone());
            if i + 1 < self.layers.len() {
                let a: Vec<f64> = z.iter().map(|&v| self.spec.activation.apply(v)).collect();
                hidden.push(a.clone());
                current = a;
            } else {
                current = z;
            }
        }
        Ok(FullTrace {
            input: x.to_vec(),
            pre_activations: pre,
            hidden,
            logits: current,
        })
    }

    /// Total number of learnable parameters: `sum(in*out + out)` over layers.
    pub fn param_count(&self) -> usize {
        self.realized_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Flatten all parameters (per layer: weights row-major, then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            flat.extend_from_slice(&layer.weights);
            flat.extend_from_slice(&layer.bias);
        }
        flat
    }

    /// Overwrite all parameters from a flat vector laid out as
    /// [`Network::flat_params`] produces.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Parameter(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Argmax class of the logits for one input; ties break to the lowest
    /// class index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let trace = self.forward(x)?;
        Ok(argmax(&trace.logits))
    }
}

/// Index of the maximum entry; ties break to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) struct FullTrace {
    pub input: Vec<f64>,
    pub pre_activations: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl FullTrace {
    fn into_trace(self) -> ForwardTrace {
        ForwardTrace {
            hidden: self.hidden,
            logits: self.logits,
        }
    }

    pub(crate) fn activation_derivative(&self, layer: usize, activation: Activation) -> Vec<f64> {
        self.pre_activations[layer]
            .iter()
            .map(|&z| activation.derivative(z))
            .collect()
    }
}

/// Read one activation vector out of a trace, by value.
pub fn tap(trace: &ForwardTrace, point: TapPoint) -> Result<Vec<f64>> {
    match point {
        TapPoint::Logits => Ok(trace.logits.clone()),
        TapPoint::Layer(k) => trace
            .hidden
            .get(k)
            .cloned()
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "layer index {k} out of range: network has {} hidden layers",
                    trace.hidden.len()
                ))
            }),
    }
}

const MODEL_MAGIC: &[u8; 4] = b"SNML";
const MODEL_VERSION: u16 = 1;

/// Serialize a network into the binary model format.
///
/// Layout: magic `SNML`, format version `u16`, spec (width count `u32`,
/// base widths `u32` each, activation tag `u8`, init tag `u8` + sigma `f64`,
/// expansion `f64`, seed `u64`), then per layer the weights row-major and
/// the bias vector, all little-endian `f64`. Round-trips are bit-exact.
pub fn serialize(net: &Network) -> Result<Vec<u8>> {
    for layer in &net.layers {
        if layer.weights.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("refusing to serialize non-finite weights".into()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.spec.layer_widths.len() as u32).to_le_bytes());
    for &w in &net.spec.layer_widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.push(match net.spec.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    let (init_tag, sigma) = match net.spec.init {
        InitScheme::Gaussian { sigma } => (0u8, sigma),
        InitScheme::He => (1u8, 0.0),
    };
    out.push(init_tag);
    out.extend_from_slice(&sigma.to_le_bytes());
    out.extend_from_slice(&net.spec.width_expansion.to_le_bytes());
    out.extend_from_slice(&net.spec.seed.to_le_bytes());
    for layer in &net.layers {
        for v in layer.weights.iter().chain(layer.bias.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "model payload truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reconstruct a network from bytes produced by [`serialize`].
pub fn deserialize(bytes: &[u8]) -> Result<Network> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("bad model magic".into()));
    }
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model format version {version}")));
    }
    let n_widths = r.u32()? as usize;
    if n_widths < 2 {
        return Err(Error::Format(format!("model declares {n_widths} widths")));
    }
    let mut layer_widths = Vec::with_capacity(n_widths);
    for _ in 0..n_widths {
        layer_widths.push(r.u32()? as usize);
    }
    let activation = match r.take(1)?[0] {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        t => return Err(Error::Format(format!("unknown activation tag {t}"))),
    };
    let init_tag = r.take(1)?[0];
    let sigma = r.f64()?;
    let init = match init_tag {
        0 => InitScheme::Gaussian { sigma },
        1 => InitScheme::He,
        t => return Err(Error::Format(format!("unknown init tag {t}"))),
    };
    let width_expansion = r.f64()?;
    let seed = r.u64()?;
    let spec = NetworkSpec {
        layer_widths,
        activation,
        width_expansion,
        init,
        seed,
    };
    let widths = spec
        .realized_widths()
        .map_err(|e| Error::Format(format!("model spec invalid: {e}")))?;
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for w in widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let mut weights = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_in * fan_out {
            weights.push(r.f64()?);
        }
        let mut bias = Vec::with_capacity(fan_out);
        for _ in 0..fan_out {
            bias.push(r.f64()?);
        }
        layers.push(DenseLayer {
            weights,
            bias,
            rows: fan_out,
            cols: fan_in,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after model payload",
            bytes.len() - r.pos
        )));
    }
    Ok(Network {
        spec,
        realized_widths: widths,
        layers,
    })
}
