//! A small fully connected multi-label classifier: ReLU hidden layers and K
//! independent sigmoid outputs, with hand-derived backpropagation, Adam, a
//! one-cycle learning-rate schedule and an EMA parameter shadow.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io;
use crate::numeric::{clamp_prob, sigmoid, Matrix, Rng, PROB_EPS};
use crate::{Error, Result};

const STREAM_INIT: u64 = 0x1417;

/// All weights and biases of a network, stored flat.
///
/// Layer `l` maps `sizes[l]` inputs to `sizes[l + 1]` outputs; its weights
/// are an `in × out` row-major block followed by `out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    sizes: Vec<usize>,
    data: Vec<f64>,
}

impl Params {
    pub fn zeros(sizes: &[usize]) -> Self {
        let len = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Params {
            sizes: sizes.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn zeros_like(other: &Params) -> Self {
        Params::zeros(&other.sizes)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len().saturating_sub(1)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..=layer].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn weight_range(&self, layer: usize) -> Range<usize> {
        let start = self.offset(layer);
        start..start + self.sizes[layer] * self.sizes[layer + 1]
    }

    pub fn bias_range(&self, layer: usize) -> Range<usize> {
        let end = self.weight_range(layer).end;
        end..end + self.sizes[layer + 1]
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.data[self.weight_range(layer)]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.weight_range(layer);
        &mut self.data[r]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.data[self.bias_range(layer)]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.bias_range(layer);
        &mut self.data[r]
    }

    /// Human-readable name of the flat parameter at `index`.
    pub fn name_of(&self, index: usize) -> String {
        for l in 0..self.n_layers() {
            let w = self.weight_range(l);
            if w.contains(&index) {
                let k = index - w.start;
                let out = self.sizes[l + 1];
                return format!("layer{l}.weights[{}][{}]", k / out, k % out);
            }
            let b = self.bias_range(l);
            if b.contains(&index) {
                return format!("layer{l}.biases[{}]", index - b.start);
            }
        }
        format!("param[{index}]")
    }

    pub fn scale(&self, k: f64) -> Params {
        Params {
            sizes: self.sizes.clone(),
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    fn to_layers(&self) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..self.n_layers() {
            let out = self.sizes[l + 1];
            weights.push(self.weights(l).chunks(out).map(<[f64]>::to_vec).collect());
            biases.push(self.biases(l).to_vec());
        }
        (weights, biases)
    }

    fn from_layers(sizes: &[usize], weights: &[Vec<Vec<f64>>], biases: &[Vec<f64>]) -> Result<Params> {
        let mut p = Params::zeros(sizes);
        let layers = p.n_layers();
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::invalid(
                "weights",
                format!("expected {layers} layers, got {} weight and {} bias blocks", weights.len(), biases.len()),
            ));
        }
        for l in 0..layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = Matrix::from_rows(&weights[l]).map_err(|e| Error::invalid(format!("weights[{l}]"), e.to_string()))?;
            if w.shape() != (n_in, n_out) {
                return Err(Error::invalid(
                    format!("weights[{l}]"),
                    format!("expected {n_in}x{n_out}, got {}x{}", w.rows(), w.cols()),
                ));
            }
            if biases[l].len() != n_out {
                return Err(Error::invalid(
                    format!("biases[{l}]"),
                    format!("expected {n_out} values, got {}", biases[l].len()),
                ));
            }
            if biases[l].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("biases[{l}]")));
            }
            p.weights_mut(l).copy_from_slice(w.data());
            p.biases_mut(l).copy_from_slice(&biases[l]);
        }
        Ok(p)
    }
}

/// Multi-label MLP with ReLU hidden layers and sigmoid outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    params: Params,
}

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input to each layer (the batch, then each hidden activation).
    inputs: Vec<Matrix>,
    /// Unclamped sigmoid outputs.
    sigmoid: Matrix,
    /// Clamped probabilities.
    pub probs: Matrix,
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::invalid(
            "layer_sizes",
            format!("need at least input and output sizes, got {sizes:?}"),
        ));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("layer_sizes", format!("zero-width layer in {sizes:?}")));
    }
    Ok(())
}

/// `a · W + b` for a row-major `in × out` weight block.
fn affine(a: &Matrix, w: &[f64], b: &[f64]) -> Matrix {
    let (n_in, n_out) = (a.cols(), b.len());
    debug_assert_eq!(w.len(), n_in * n_out);
    let mut z = Matrix::zeros(a.rows(), n_out);
    for r in 0..a.rows() {
        let out = z.row_mut(r);
        out.copy_from_slice(b);
        for (k, &x) in a.row(r).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, wv) in out.iter_mut().zip(&w[k * n_out..(k + 1) * n_out]) {
                *o += x * wv;
            }
        }
    }
    z
}

impl Classifier {
    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut params = Params::zeros(layer_sizes);
        let mut rng = Rng::derive(seed, &[STREAM_INIT]);
        for l in 0..params.n_layers() {
            let scale = 1.0 / (layer_sizes[l] as f64).sqrt();
            for w in params.weights_mut(l) {
                *w = scale * rng.standard_normal();
            }
        }
        Ok(Classifier { params })
    }

    pub fn from_params(params: Params) -> Result<Self> {
        validate_sizes(params.layer_sizes())?;
        if let Some(i) = params.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(params.name_of(i)));
        }
        Ok(Classifier { params })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn layer_sizes(&self) -> &[usize] {
        self.params.layer_sizes()
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes()[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_sizes().last().expect("validated sizes")
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(batch)?.probs)
    }

    pub fn forward_trace(&self, batch: &Matrix) -> Result<ForwardTrace> {
        if batch.cols() != self.n_inputs() {
            return Err(Error::DimensionMismatch {
                op: "forward",
                left: batch.shape(),
                right: (self.n_inputs(), self.n_outputs()),
            });
        }
        let layers = self.params.n_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut a = batch.clone();
        for l in 0..layers - 1 {
            let z = affine(&a, self.params.weights(l), self.params.biases(l));
            inputs.push(a);
            a = z.map(|v| v.max(0.0));
        }
        let logits = affine(&a, self.params.weights(layers - 1), self.params.biases(layers - 1));
        inputs.push(a);
        let sig = logits.map(sigmoid);
        let probs = sig.map(clamp_prob);
        Ok(ForwardTrace {
            inputs,
            sigmoid: sig,
            probs,
        })
    }

    /// Gradient of a loss with respect to all parameters, given
    /// `grad_output = ∂loss/∂probs` for the batch.
    pub fn backward(&self, batch: &Matrix, grad_output: &Matrix) -> Result<Params> {
        let trace = self.forward_trace(batch)?;
        self.backward_trace(&trace, grad_output)
    }

    pub fn backward_trace(&self, trace: &ForwardTrace, grad_output: &Matrix) -> Result<Params> {
        if grad_output.shape() != trace.probs.shape() {
            return Err(Error::DimensionMismatch {
                op: "backward",
                left: grad_output.shape(),
                right: trace.probs.shape(),
            });
        }
        let mut grads = Params::zeros_like(&self.params);
        // Through the clamp and the sigmoid: zero where the clamp is active.
        let mut delta = Matrix::zeros(grad_output.rows(), grad_output.cols());
        for ((d, &g), &s) in delta
            .data_mut()
            .iter_mut()
            .zip(grad_output.data())
            .zip(trace.sigmoid.data())
        {
            *d = if (PROB_EPS..=1.0 - PROB_EPS).contains(&s) {
                g * s * (1.0 - s)
            } else {
                0.0
            };
        }
        for l in (0..self.params.n_layers()).rev() {
            let a = &trace.inputs[l];
            let n_out = self.layer_sizes()[l + 1];
            {
                let gw = grads.weights_mut(l);
                for r in 0..a.rows() {
                    let d_row = delta.row(r);
                    for (k, &x) in a.row(r).iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        for (g, dv) in gw[k * n_out..(k + 1) * n_out].iter_mut().zip(d_row) {
                            *g += x * dv;
                        }
                    }
                }
            }
            {
                let gb = grads.biases_mut(l);
                for r in 0..delta.rows() {
                    for (g, dv) in gb.iter_mut().zip(delta.row(r)) {
                        *g += dv;
                    }
                }
            }
            if l == 0 {
                break;
            }
            // Back to the previous layer's activation, then through its ReLU.
            let w = self.params.weights(l);
            let n_in = self.layer_sizes()[l];
            let mut prev = Matrix::zeros(delta.rows(), n_in);
            for r in 0..delta.rows() {
                let d_row = delta.row(r);
                let a_row = a.row(r);
                let p_row = prev.row_mut(r);
                for k in 0..n_in {
                    if a_row[k] > 0.0 {
                        p_row[k] = crate::numeric::dot(&w[k * n_out..(k + 1) * n_out], d_row);
                    }
                }
            }
            delta = prev;
        }
        Ok(grads)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl OptimState {
    pub fn new(model: &Classifier, config: AdamConfig) -> Self {
        OptimState {
            config,
            m: Params::zeros_like(model.params()),
            v: Params::zeros_like(model.params()),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step(model: &mut Classifier, opt: &mut OptimState, grads: &Params, lr: f64) -> Result<()> {
    let theta = &mut model.params;
    if grads.layer_sizes() != theta.layer_sizes() || opt.m.layer_sizes() != theta.layer_sizes() {
        return Err(Error::invalid(
            "grads",
            format!(
                "layer sizes {:?} do not match model {:?}",
                grads.layer_sizes(),
                theta.layer_sizes()
            ),
        ));
    }
    if let Some(i) = grads.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", theta.name_of(i))));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::invalid("lr", format!("must be finite and >= 0, got {lr}")));
    }
    let AdamConfig { beta1, beta2, eps } = opt.config;
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in theta
        .as_mut_slice()
        .iter_mut()
        .zip(grads.as_slice())
        .zip(opt.m.as_mut_slice())
        .zip(opt.v.as_mut_slice())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// One-cycle policy: cosine warm-up from `max_lr/start_div` to `max_lr`, then
/// cosine annealing down to `max_lr/final_div` at the last step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub start_div: f64,
    pub final_div: f64,
}

impl LrSchedule {
    pub fn one_cycle(max_lr: f64, total_steps: usize) -> Self {
        LrSchedule {
            max_lr,
            total_steps,
            warmup_fraction: 0.3,
            start_div: 25.0,
            final_div: 1e4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::invalid("max_lr", format!("must be positive, got {}", self.max_lr)));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("total_steps", "must be positive"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::invalid(
                "warmup_fraction",
                format!("must lie in (0, 1), got {}", self.warmup_fraction),
            ));
        }
        if !(self.start_div > 1.0) {
            return Err(Error::invalid("start_div", format!("must exceed 1, got {}", self.start_div)));
        }
        if !(self.final_div > 1.0) {
            return Err(Error::invalid("final_div", format!("must exceed 1, got {}", self.final_div)));
        }
        Ok(())
    }

    /// Step at which the schedule reaches `max_lr`.
    pub fn peak_step(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).floor() as usize).min(self.total_steps - 1)
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        self.validate()?;
        if step >= self.total_steps {
            return Err(Error::invalid(
                "step",
                format!("{step} is outside the schedule of {} steps", self.total_steps),
            ));
        }
        let cos_interp = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (PI * frac).cos());
        let peak = self.peak_step();
        let start = self.max_lr / self.start_div;
        let end = self.max_lr / self.final_div;
        Ok(if step <= peak {
            if peak == 0 {
                self.max_lr
            } else {
                cos_interp(start, self.max_lr, step as f64 / peak as f64)
            }
        } else {
            let span = (self.total_steps - 1 - peak) as f64;
            cos_interp(self.max_lr, end, (step - peak) as f64 / span)
        })
    }
}

/// Exponential moving average of the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaShadow {
    pub shadow: Params,
    pub decay: f64,
}

impl EmaShadow {
    pub fn new(model: &Classifier, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid("ema_decay", format!("must lie in [0, 1], got {decay}")));
        }
        Ok(EmaShadow {
            shadow: model.params().clone(),
            decay,
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * theta`.
    pub fn update(&mut self, model: &Classifier) -> Result<()> {
        self.update_with_decay(model, self.decay)
    }

    pub fn update_with_decay(&mut self, model: &Classifier, decay: f64) -> Result<()> {
        if self.shadow.layer_sizes() != model.layer_sizes() {
            return Err(Error::invalid(
                "ema",
                format!(
                    "shadow sizes {:?} do not match model {:?}",
                    self.shadow.layer_sizes(),
                    model.layer_sizes()
                ),
            ));
        }
        for (s, &p) in self.shadow.as_mut_slice().iter_mut().zip(model.params().as_slice()) {
            *s = decay * *s + (1.0 - decay) * p;
        }
        Ok(())
    }

    /// Decay for the `updates`-th update with the usual warm-up correction
    /// `min(decay, (1 + t) / (10 + t))`, which keeps the shadow from being
    /// dominated by the initialization on short runs.
    pub fn warmup_decay(&self, updates: u64) -> f64 {
        let t = updates as f64;
        self.decay.min((1.0 + t) / (10.0 + t))
    }

    pub fn model(&self) -> Classifier {
        Classifier {
            params: self.shadow.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimStateFile {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    ema_weights: Vec<Vec<Vec<f64>>>,
    ema_biases: Vec<Vec<f64>>,
    ema_decay: f64,
    opt_state: OptimStateFile,
    step: u64,
}

/// Live model, EMA shadow and optimizer state, as saved to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Classifier,
    pub ema: EmaShadow,
    pub opt: OptimState,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let (weights, biases) = self.model.params.to_layers();
        let (ema_weights, ema_biases) = self.ema.shadow.to_layers();
        let file = CheckpointFile {
            layer_sizes: self.model.layer_sizes().to_vec(),
            weights,
            biases,
            ema_weights,
            ema_biases,
            ema_decay: self.ema.decay,
            opt_state: OptimStateFile {
                beta1: self.opt.config.beta1,
                beta2: self.opt.config.beta2,
                eps: self.opt.config.eps,
                step: self.opt.step,
                m: self.opt.m.as_slice().to_vec(),
                v: self.opt.v.as_slice().to_vec(),
            },
            step: self.step,
        };
        let mut s = serde_json::to_string(&file).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn from_json(path: &Path, text: &str) -> Result<Self> {
        let file: CheckpointFile = io::parse_json(path, text)?;
        let wrap = |e: Error| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        validate_sizes(&file.layer_sizes).map_err(wrap)?;
        let params = Params::from_layers(&file.layer_sizes, &file.weights, &file.biases).map_err(wrap)?;
        let shadow = Params::from_layers(&file.layer_sizes, &file.ema_weights, &file.ema_biases).map_err(wrap)?;
        let model = Classifier::from_params(params).map_err(wrap)?;
        let mut ema = EmaShadow::new(&model, file.ema_decay).map_err(wrap)?;
        ema.shadow = shadow;
        let mut opt = OptimState::new(
            &model,
            AdamConfig {
                beta1: file.opt_state.beta1,
                beta2: file.opt_state.beta2,
                eps: file.opt_state.eps,
            },
        );
        for (name, src, dst) in [
            ("opt_state.m", &file.opt_state.m, &mut opt.m),
            ("opt_state.v", &file.opt_state.v, &mut opt.v),
        ] {
            if src.len() != dst.len() {
                return Err(wrap(Error::invalid(
                    name,
                    format!("expected {} values, got {}", dst.len(), src.len()),
                )));
            }
            dst.as_mut_slice().copy_from_slice(src);
        }
        opt.step = file.opt_state.step;
        Ok(Checkpoint {
            model,
            ema,
            opt,
            step: file.step,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(path, &io::read_to_string(path)?)
    }
}
