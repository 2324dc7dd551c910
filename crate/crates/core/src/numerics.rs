//! Dense-math substrate: tensors, tanh multilayer perceptrons with hand-derived
//! backward passes, Adam, global-norm clipping and a central-difference
//! gradient oracle. Everything is `f64`.

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

/// Row-major dense tensor of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return shape_err(format!("tensor shape {shape:?} must be non-empty and positive"));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return shape_err(format!(
                "tensor shape {shape:?} holds {n} values, got {}",
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor values"));
        }
        Ok(Self { shape, values })
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Width of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.values.len() / self.last_dim()
    }
}

/// Multilayer perceptron: tanh on hidden layers, identity on the output.
///
/// All parameters live in one flat vector. Layer `l` stores its weight matrix
/// (`sizes[l+1]` rows by `sizes[l]` columns, row-major) followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    sizes: Vec<usize>,
    data: Vec<f64>,
}

/// Cached activations from a forward pass (input first, output last).
#[derive(Debug, Clone)]
pub struct MlpTrace {
    acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an output")
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl MlpParams {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return shape_err(format!("layer sizes {sizes:?} need at least two positive entries"));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            data: vec![0.0; param_count(sizes)],
        })
    }

    /// Glorot-uniform weights, zero biases; the output layer is scaled by
    /// `out_scale` so freshly initialised heads start near zero.
    pub fn init(sizes: &[usize], out_scale: f64, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(sizes)?;
        let n_layers = p.n_layers();
        for l in 0..n_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if l + 1 == n_layers { out_scale } else { 1.0 };
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            let (w_off, _) = p.layer_offsets(l);
            for v in &mut p.data[w_off..w_off + fan_in * fan_out] {
                *v = dist.sample(rng) * scale;
            }
        }
        Ok(p)
    }

    /// Builds parameters from a layer list and a flat vector in declaration order.
    pub fn from_flat(sizes: &[usize], data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(sizes)?;
        if data.len() != p.data.len() {
            return shape_err(format!(
                "layer sizes {sizes:?} need {} parameters, got {}",
                p.data.len(),
                data.len()
            ));
        }
        p.data = data;
        Ok(p)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Offsets of (weights, bias) for layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    /// Mutable view of the output-layer bias.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let l = self.n_layers() - 1;
        let (_, b) = self.layer_offsets(l);
        let n = self.sizes[l + 1];
        &mut self.data[b..b + n]
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<MlpTrace> {
        if input.len() != self.sizes[0] {
            return shape_err(format!(
                "mlp input width {} does not match first layer width {}",
                input.len(),
                self.sizes[0]
            ));
        }
        let n_layers = self.n_layers();
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.data[off..off + n_in * n_out];
            let b = &self.data[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let x = &acts[l];
            let hidden = l + 1 < n_layers;
            let out: Vec<f64> = (0..n_out)
                .map(|j| {
                    let row = &w[j * n_in..(j + 1) * n_in];
                    let z = b[j] + dot(row, x);
                    if hidden {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        Ok(MlpTrace { acts })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.acts.pop().expect("output"))
    }

    /// Backward pass. When `param_grads` is `Some`, parameter gradients are
    /// accumulated into it (same layout as [`MlpParams::flat`]). Returns the
    /// gradient with respect to the input.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        upstream: &[f64],
        mut param_grads: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_width() {
            return shape_err(format!(
                "upstream gradient width {} does not match output width {}",
                upstream.len(),
                self.output_width()
            ));
        }
        if let Some(g) = param_grads.as_deref() {
            if g.len() != self.data.len() {
                return shape_err("parameter gradient buffer has wrong length");
            }
        }
        let n_layers = self.n_layers();
        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < n_layers {
                for (d, a) in delta.iter_mut().zip(&trace.acts[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let (w_off, b_off) = self.layer_offsets(l);
            let x = &trace.acts[l];
            if let Some(g) = param_grads.as_deref_mut() {
                for j in 0..n_out {
                    let dj = delta[j];
                    if dj != 0.0 {
                        let row = &mut g[w_off + j * n_in..w_off + (j + 1) * n_in];
                        for (gi, xi) in row.iter_mut().zip(x) {
                            *gi += dj * xi;
                        }
                    }
                    g[b_off + j] += dj;
                }
            }
            let w = &self.data[w_off..w_off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for j in 0..n_out {
                let dj = delta[j];
                if dj != 0.0 {
                    for (p, wi) in prev.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                        *p += dj * wi;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Applies the network to a `[in]` or `[rows, in]` tensor.
pub fn mlp_forward(params: &MlpParams, input: &Tensor) -> Result<Tensor> {
    let width = input.last_dim();
    if width != params.input_width() {
        return shape_err(format!(
            "input last dimension {width} does not match first layer width {}",
            params.input_width()
        ));
    }
    let mut out = Vec::with_capacity(input.rows() * params.output_width());
    for row in input.values().chunks(width) {
        out.extend(params.forward(row)?);
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("non-empty") = params.output_width();
    Tensor::new(shape, out)
}

/// Gradients of the scalar `sum(upstream * forward(input))`, summed over rows.
pub fn mlp_backward(
    params: &MlpParams,
    input: &Tensor,
    upstream: &Tensor,
) -> Result<(Vec<f64>, Tensor)> {
    let width = input.last_dim();
    if width != params.input_width() {
        return shape_err("input width does not match network");
    }
    if upstream.last_dim() != params.output_width() || upstream.rows() != input.rows() {
        return shape_err(format!(
            "upstream gradient shape {:?} does not match forward output",
            upstream.shape()
        ));
    }
    let mut grads = vec![0.0; params.len()];
    let mut input_grad = Vec::with_capacity(input.values().len());
    for (row, up) in input
        .values()
        .chunks(width)
        .zip(upstream.values().chunks(params.output_width()))
    {
        let trace = params.forward_trace(row)?;
        input_grad.extend(params.backward(&trace, up, Some(&mut grads))?);
    }
    Ok((grads, Tensor::new(input.shape().to_vec(), input_grad)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// In-place Adam update with bias correction.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return shape_err(format!(
            "adam: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adam gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

pub fn global_norm(groups: &[&[f64]]) -> f64 {
    groups
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all groups jointly so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(groups: &mut [&mut [f64]], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = groups
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in groups.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Central-difference gradient of `loss` at `params`.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0);
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = loss(&p);
            p[i] = orig - h;
            let down = loss(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor, as used by the gradient checks.
pub fn rel_err(a: f64, b: f64, abs_floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(abs_floor)
}

/// Gradient-check acceptance: `|a - b| <= atol + rtol * max(|a|, |b|)`.
pub fn grad_close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * a.abs().max(b.abs())
}

/// Standard normal draw via Box-Muller on two uniforms from the stream.
pub fn randn(rng: &mut Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
