//! Server-side trainable network: `L` cascaded gated adapters over the
//! device's pivot activations, followed by a linear head.
//!
//! Layer `i` mixes the backbone activation with the previous adapter output,
//! then applies a bottleneck residual adapter:
//!
//! ```text
//! mu_i   = sigmoid(alpha_i)
//! s_in_i = (1 - mu_i) * A_i + mu_i * h_{i-1}        (h_0 := A_1)
//! h_i    = s_in_i + act(s_in_i · W_down_i) · W_up_i
//! y_side = h_L · head_w + head_b
//! ```
//!
//! Training minimizes mean squared error against the masked delta target,
//! with hand-written backpropagation.

use crate::numerics::{
    matmul, matmul_nt, matmul_tn, sigmoid, Activation, SeededRng, ShapeError, Tensor,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SideNetError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("expected {expected} activation tensors, got {actual}")]
    LayerCount { expected: usize, actual: usize },
    #[error("invalid side network config: {0}")]
    Config(String),
    #[error("forward state is stale: taken at version {state}, network is at {net}")]
    StaleState { state: u64, net: u64 },
    #[error("side network blob: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideNetworkConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub num_classes: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub activation: Activation,
    pub init_seed: u64,
}

impl SideNetworkConfig {
    pub const DEFAULT_BOTTLENECK: usize = 64;
    pub const DEFAULT_LEARNING_RATE: f64 = 5e-4;

    pub fn validate(&self) -> Result<(), SideNetError> {
        if self.num_layers == 0 || self.hidden == 0 || self.num_classes == 0 {
            return Err(SideNetError::Config(
                "layers, hidden and classes must be positive".into(),
            ));
        }
        if self.bottleneck == 0 || self.bottleneck > self.hidden {
            return Err(SideNetError::Config(format!(
                "bottleneck {} must be in 1..={}",
                self.bottleneck, self.hidden
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SideNetError::Config(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `L·(1 + 2·d·r) + d·C + C`.
    pub fn parameter_count(&self) -> usize {
        self.num_layers * (1 + 2 * self.hidden * self.bottleneck)
            + self.hidden * self.num_classes
            + self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub alpha: f64,
    /// `[d × r]`
    pub w_down: Tensor,
    /// `[r × d]`
    pub w_up: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideNetwork {
    config: SideNetworkConfig,
    pub layers: Vec<AdapterLayer>,
    /// `[d × C]`
    pub head_w: Tensor,
    pub head_b: Vec<f64>,
    version: u64,
}

/// Gradient of the loss for every parameter, laid out like [`SideNetwork`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub alpha: Vec<f64>,
    pub w_down: Vec<Tensor>,
    pub w_up: Vec<Tensor>,
    pub head_w: Tensor,
    pub head_b: Vec<f64>,
}

impl Gradients {
    /// Flattened in the network's declared parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..self.alpha.len() {
            out.push(self.alpha[i]);
            out.extend_from_slice(self.w_down[i].data());
            out.extend_from_slice(self.w_up[i].data());
        }
        out.extend_from_slice(self.head_w.data());
        out.extend_from_slice(&self.head_b);
        out
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for i in 0..self.alpha.len() {
            out.push(std::slice::from_ref(&self.alpha[i]));
            out.push(self.w_down[i].data());
            out.push(self.w_up[i].data());
        }
        out.push(self.head_w.data());
        out.push(&self.head_b);
        out
    }
}

/// Intermediates from one forward pass, consumed by the matching backward.
#[derive(Debug, Clone)]
pub struct SideForwardState {
    version: u64,
    inputs: Vec<Tensor>,
    s_in: Vec<Tensor>,
    pre: Vec<Tensor>,
    act: Vec<Tensor>,
    hidden: Vec<Tensor>,
}

impl SideNetwork {
    /// Fresh network: `alpha = 0`, `W_down ~ U(±1/√d)`, `W_up = 0`,
    /// `head_w ~ U(±1/√d)`, `head_b = 0`.
    pub fn new(config: SideNetworkConfig) -> Result<Self, SideNetError> {
        config.validate()?;
        let (d, r, c) = (config.hidden, config.bottleneck, config.num_classes);
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = SeededRng::new(config.init_seed);
        let layers = (0..config.num_layers)
            .map(|_| AdapterLayer {
                alpha: 0.0,
                w_down: Tensor::uniform(&[d, r], bound, &mut rng),
                w_up: Tensor::zeros(&[r, d]),
            })
            .collect();
        let head_w = Tensor::uniform(&[d, c], bound, &mut rng);
        Ok(Self {
            config,
            layers,
            head_w,
            head_b: vec![0.0; c],
            version: 0,
        })
    }

    /// Every parameter set to zero.
    pub fn zeros(config: SideNetworkConfig) -> Result<Self, SideNetError> {
        let mut net = Self::new(config)?;
        for s in net.param_slices_mut() {
            s.fill(0.0);
        }
        Ok(net)
    }

    pub fn config(&self) -> &SideNetworkConfig {
        &self.config
    }

    /// Bumped by every optimizer step; used to detect stale forward state.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn parameter_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter buffers in declared order: per layer `alpha, W_down, W_up`,
    /// then `head_w`, `head_b`.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(std::slice::from_ref(&l.alpha));
            out.push(l.w_down.data());
            out.push(l.w_up.data());
        }
        out.push(self.head_w.data());
        out.push(&self.head_b);
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(std::slice::from_mut(&mut l.alpha));
            out.push(l.w_down.data_mut());
            out.push(l.w_up.data_mut());
        }
        out.push(self.head_w.data_mut());
        out.push(&mut self.head_b);
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<(), SideNetError> {
        if values.len() != self.parameter_count() {
            return Err(SideNetError::Format(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for s in self.param_slices_mut() {
            for v in s.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Copy with every parameter rounded to `f32`, matching what
    /// deserializing a deployed network yields.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for s in out.param_slices_mut() {
            for v in s.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        out
    }
}

/// `(1 - μ)·A + μ·h_prev` with `μ = sigmoid(alpha)`.
pub fn gate_mix(a: &Tensor, h_prev: &Tensor, alpha: f64) -> Result<Tensor, ShapeError> {
    let mu = sigmoid(alpha);
    a.zip_map(h_prev, "gate_mix", |x, h| (1.0 - mu) * x + mu * h)
}

/// Residual bottleneck: `s_in + act(s_in·W_down)·W_up`.
pub fn adapter_forward(
    s_in: &Tensor,
    w_down: &Tensor,
    w_up: &Tensor,
    act: Activation,
) -> Result<Tensor, ShapeError> {
    let z = matmul(s_in, w_down)?;
    let a = z.map(|v| act.apply(v));
    s_in.add(&matmul(&a, w_up)?)
}

/// Runs the adapter chain and head. Returns the raw linear output `y_side`
/// (no softmax) and the intermediates needed by [`side_backward`].
pub fn side_forward(
    net: &SideNetwork,
    activations: &[Tensor],
) -> Result<(Tensor, SideForwardState), SideNetError> {
    let cfg = &net.config;
    if activations.len() != cfg.num_layers {
        return Err(SideNetError::LayerCount {
            expected: cfg.num_layers,
            actual: activations.len(),
        });
    }
    let batch = activations[0].rows();
    for a in activations {
        if a.shape() != [batch, cfg.hidden] {
            return Err(ShapeError::Mismatch {
                op: "side_forward",
                left: a.shape().to_vec(),
                right: vec![batch, cfg.hidden],
            }
            .into());
        }
    }
    let n = cfg.num_layers;
    let mut state = SideForwardState {
        version: net.version,
        inputs: activations.to_vec(),
        s_in: Vec::with_capacity(n),
        pre: Vec::with_capacity(n),
        act: Vec::with_capacity(n),
        hidden: Vec::with_capacity(n),
    };
    for (i, layer) in net.layers.iter().enumerate() {
        let prev = if i == 0 {
            &activations[0]
        } else {
            &state.hidden[i - 1]
        };
        let s_in = gate_mix(&activations[i], prev, layer.alpha)?;
        let z = matmul(&s_in, &layer.w_down)?;
        let a = z.map(|v| cfg.activation.apply(v));
        let h = s_in.add(&matmul(&a, &layer.w_up)?)?;
        state.s_in.push(s_in);
        state.pre.push(z);
        state.act.push(a);
        state.hidden.push(h);
    }
    let y = matmul(&state.hidden[n - 1], &net.head_w)?.add_row_vector(&net.head_b)?;
    Ok((y, state))
}

/// Mean squared error `(1/(B·C))·Σ(y_side − Δy)²`.
pub fn side_loss(y_side: &Tensor, delta_y: &Tensor) -> Result<f64, ShapeError> {
    let diff = y_side.sub(delta_y)?;
    let n = diff.len() as f64;
    Ok(diff.data().iter().fold(0.0, |acc, e| acc + e * e) / n)
}

/// Exact gradients of [`side_loss`] with respect to every parameter.
pub fn side_backward(
    net: &SideNetwork,
    state: SideForwardState,
    y_side: &Tensor,
    delta_y: &Tensor,
) -> Result<Gradients, SideNetError> {
    if state.version != net.version {
        return Err(SideNetError::StaleState {
            state: state.version,
            net: net.version,
        });
    }
    let cfg = &net.config;
    let n = cfg.num_layers;
    let scale = 2.0 / y_side.len() as f64;
    let dy = y_side.zip_map(delta_y, "side_backward", |y, t| scale * (y - t))?;

    let head_w = matmul_tn(&state.hidden[n - 1], &dy)?;
    let head_b = dy.sum_rows();
    let mut dh = matmul_nt(&dy, &net.head_w)?;

    let mut alpha = vec![0.0; n];
    let mut w_down: Vec<Tensor> = Vec::with_capacity(n);
    let mut w_up: Vec<Tensor> = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let layer = &net.layers[i];
        w_up.push(matmul_tn(&state.act[i], &dh)?);
        let da = matmul_nt(&dh, &layer.w_up)?;
        let dz = da.zip_map(&state.pre[i], "act_grad", |g, z| {
            g * cfg.activation.derivative(z)
        })?;
        w_down.push(matmul_tn(&state.s_in[i], &dz)?);
        let ds_in = dh.add(&matmul_nt(&dz, &layer.w_down)?)?;

        let mu = sigmoid(layer.alpha);
        let prev = if i == 0 {
            &state.inputs[0]
        } else {
            &state.hidden[i - 1]
        };
        // d s_in / d mu = h_prev − A_i; for the first layer that is zero.
        let dmu = ds_in
            .data()
            .iter()
            .zip(prev.data().iter().zip(state.inputs[i].data()))
            .fold(0.0, |acc, (g, (h, a))| acc + g * (h - a));
        alpha[i] = dmu * mu * (1.0 - mu);
        if i > 0 {
            dh = ds_in.scale(mu);
        }
    }
    w_down.reverse();
    w_up.reverse();
    Ok(Gradients {
        alpha,
        w_down,
        w_up,
        head_w,
        head_b,
    })
}

/// Adam moments (unused for SGD) and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(net: &SideNetwork) -> Self {
        let n = net.parameter_count();
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

pub fn optimizer_step(net: &mut SideNetwork, grads: &Gradients, opt: &mut OptimizerState) {
    let lr = net.config.learning_rate;
    let optimizer = net.config.optimizer;
    opt.step += 1;
    let t = opt.step as i32;
    let mut idx = 0;
    let grad_slices = grads.slices();
    for (params, g) in net.param_slices_mut().into_iter().zip(grad_slices) {
        for (p, &g) in params.iter_mut().zip(g) {
            match optimizer {
                Optimizer::Sgd => *p -= lr * g,
                Optimizer::Adam { beta1, beta2, eps } => {
                    let m = &mut opt.m[idx];
                    let v = &mut opt.v[idx];
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / (1.0 - beta1.powi(t));
                    let v_hat = *v / (1.0 - beta2.powi(t));
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            idx += 1;
        }
    }
    net.version += 1;
}

/// One forward/backward/update on a batch; returns the pre-update loss.
pub fn train_step(
    net: &mut SideNetwork,
    opt: &mut OptimizerState,
    activations: &[Tensor],
    delta_y: &Tensor,
) -> Result<f64, SideNetError> {
    let (y, state) = side_forward(net, activations)?;
    let loss = side_loss(&y, delta_y)?;
    let grads = side_backward(net, state, &y, delta_y)?;
    optimizer_step(net, &grads, opt);
    Ok(loss)
}

const BLOB_MAGIC: &[u8; 4] = b"PAES";
const BLOB_VERSION: u8 = 1;
/// magic, version, L, d, r, C (u32), activation, optimizer (u8),
/// lr, beta1, beta2, eps (f64), init_seed (u64).
pub const BLOB_HEADER_LEN: usize = 4 + 1 + 4 * 4 + 2 + 4 * 8 + 8;

impl SideNetwork {
    /// `PAES` blob: header, parameters as LE f32 in declared order, CRC32
    /// of everything before the trailer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(BLOB_HEADER_LEN + 4 * self.parameter_count() + 4);
        out.extend_from_slice(BLOB_MAGIC);
        out.push(BLOB_VERSION);
        for v in [c.num_layers, c.hidden, c.bottleneck, c.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(c.activation.code());
        let (code, b1, b2, eps) = match c.optimizer {
            Optimizer::Sgd => (0u8, 0.0, 0.0, 0.0),
            Optimizer::Adam { beta1, beta2, eps } => (1u8, beta1, beta2, eps),
        };
        out.push(code);
        for v in [c.learning_rate, b1, b2, eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.init_seed.to_le_bytes());
        for s in self.param_slices() {
            for &v in s {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SideNetError> {
        let fmt = |m: &str| SideNetError::Format(m.to_string());
        if bytes.len() < BLOB_HEADER_LEN + 4 {
            return Err(fmt("truncated"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let crc = u32::from_le_bytes(trailer.try_into().unwrap());
        if crc32fast::hash(body) != crc {
            return Err(fmt("crc mismatch"));
        }
        if &body[..4] != BLOB_MAGIC {
            return Err(fmt("bad magic"));
        }
        if body[4] != BLOB_VERSION {
            return Err(SideNetError::Format(format!(
                "unsupported version {}",
                body[4]
            )));
        }
        let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().unwrap()) as usize;
        let f64_at = |i: usize| f64::from_le_bytes(body[i..i + 8].try_into().unwrap());
        let activation =
            Activation::from_code(body[21]).ok_or_else(|| fmt("unknown activation"))?;
        let optimizer = match body[22] {
            0 => Optimizer::Sgd,
            1 => Optimizer::Adam {
                beta1: f64_at(31),
                beta2: f64_at(39),
                eps: f64_at(47),
            },
            _ => return Err(fmt("unknown optimizer")),
        };
        let config = SideNetworkConfig {
            num_layers: u32_at(5),
            hidden: u32_at(9),
            bottleneck: u32_at(13),
            num_classes: u32_at(17),
            learning_rate: f64_at(23),
            optimizer,
            activation,
            init_seed: u64::from_le_bytes(body[55..63].try_into().unwrap()),
        };
        let mut net = SideNetwork::zeros(config)?;
        let params = &body[BLOB_HEADER_LEN..];
        if params.len() != 4 * net.parameter_count() {
            return Err(SideNetError::Format(format!(
                "expected {} parameter bytes, found {}",
                4 * net.parameter_count(),
                params.len()
            )));
        }
        let values: Vec<f64> = params
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        net.set_flat_params(&values)?;
        net.version = 0;
        Ok(net)
    }
}
