//! Fully connected networks with reverse-mode gradients and an Adam optimizer.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! row-major as `[out][in]`, followed by its bias of length `out`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Activation {
    Silu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + libm::exp(-x)),
            Activation::Tanh => libm::tanh(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + libm::exp(-x));
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let th = libm::tanh(x);
                1.0 - th * th
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Multilayer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    activation: Activation,
}

/// Per-layer activations recorded by a forward pass, consumed by backprop.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    // acts[0] is the input, acts[l + 1] the output of layer l
    acts: Vec<Vec<f64>>,
    // pre-activations of hidden layers
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// Number of parameters implied by `sizes`.
    pub fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.iter().any(|s| *s == 0) {
            return Err(Error::invalid("layer sizes need at least two positive entries"));
        }
        Ok(())
    }

    /// All-zero network.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::check_sizes(sizes)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; Self::param_count(sizes)],
            activation,
        })
    }

    /// LeCun-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / libm::sqrt(fan_in as f64);
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = scale * rng::normal(rng);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        Self::check_sizes(sizes)?;
        check_dim(Self::param_count(sizes), params.len())?;
        Ok(Self { sizes: sizes.to_vec(), params, activation })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Zero the output layer so the network starts as the constant zero map.
    pub fn zero_output_layer(&mut self) {
        let n = self.sizes.len();
        let last = self.sizes[n - 2] * self.sizes[n - 1] + self.sizes[n - 1];
        let len = self.params.len();
        self.params[len - last..].iter_mut().for_each(|p| *p = 0.0);
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let start = offset;
            offset += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    /// Forward pass recording activations into `tape`.
    pub fn forward_tape(&self, input: &[f64], tape: &mut Tape) -> Result<()> {
        check_dim(self.input_dim(), input.len())?;
        let depth = self.sizes.len() - 1;
        tape.acts.resize_with(depth + 1, Vec::new);
        tape.pre.resize_with(depth.saturating_sub(1), Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(input);
        for (l, (start, n_in, n_out)) in self.layers().enumerate() {
            let w = &self.params[start..start + n_in * n_out];
            let b = &self.params[start + n_in * n_out..start + n_in * n_out + n_out];
            let (head, tail) = tape.acts.split_at_mut(l + 1);
            let x = &head[l];
            let y = &mut tail[0];
            y.clear();
            y.extend((0..n_out).map(|o| dot(&w[o * n_in..(o + 1) * n_in], x) + b[o]));
            if l + 1 < depth {
                let pre = &mut tape.pre[l];
                pre.clear();
                pre.extend_from_slice(y);
                for v in y.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.output_dim(), out.len())?;
        let mut tape = Tape::default();
        self.forward_tape(input, &mut tape)?;
        out.copy_from_slice(tape.output());
        Ok(())
    }

    /// Backpropagate `d_out` through the pass recorded in `tape`, accumulating
    /// into `d_params` and optionally writing the input gradient.
    pub fn backward(
        &self,
        tape: &Tape,
        d_out: &[f64],
        d_params: &mut [f64],
        d_input: Option<&mut [f64]>,
    ) -> Result<()> {
        check_dim(self.output_dim(), d_out.len())?;
        check_dim(self.params.len(), d_params.len())?;
        let layers: Vec<_> = self.layers().collect();
        let mut delta = d_out.to_vec();
        let mut next = Vec::new();
        for (l, &(start, n_in, n_out)) in layers.iter().enumerate().rev() {
            let x = &tape.acts[l];
            let w = &self.params[start..start + n_in * n_out];
            {
                let (gw, gb) = d_params[start..start + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    if delta[o] != 0.0 {
                        axpy(delta[o], x, &mut gw[o * n_in..(o + 1) * n_in]);
                    }
                    gb[o] += delta[o];
                }
            }
            if l == 0 && d_input.is_none() {
                break;
            }
            next.clear();
            next.resize(n_in, 0.0);
            for o in 0..n_out {
                if delta[o] != 0.0 {
                    axpy(delta[o], &w[o * n_in..(o + 1) * n_in], &mut next);
                }
            }
            if l > 0 {
                for (g, z) in next.iter_mut().zip(&tape.pre[l - 1]) {
                    *g *= self.activation.derivative(*z);
                }
            }
            core::mem::swap(&mut delta, &mut next);
        }
        if let Some(d_input) = d_input {
            check_dim(self.input_dim(), d_input.len())?;
            d_input.copy_from_slice(&delta);
        }
        Ok(())
    }
}

/// Collects parameter gradients while a loss closure runs forward passes.
pub struct GradAccumulator<'a> {
    model: &'a Mlp,
    grad: Vec<f64>,
    tape: Tape,
}

impl<'a> GradAccumulator<'a> {
    pub fn new(model: &'a Mlp) -> Self {
        Self { model, grad: vec![0.0; model.params.len()], tape: Tape::default() }
    }

    pub fn model(&self) -> &Mlp {
        self.model
    }

    /// Forward one input row, keeping its activations for [`Self::backward`].
    pub fn forward(&mut self, input: &[f64]) -> Result<&[f64]> {
        self.model.forward_tape(input, &mut self.tape)?;
        Ok(self.tape.output())
    }

    /// Add `d_out · ∂output/∂params` for the most recent forward row.
    pub fn backward(&mut self, d_out: &[f64]) -> Result<()> {
        self.model.backward(&self.tape, d_out, &mut self.grad, None)
    }

    /// Like [`Self::backward`], also returning `d_out · ∂output/∂input`.
    pub fn backward_with_input(&mut self, d_out: &[f64], d_input: &mut [f64]) -> Result<()> {
        self.model.backward(&self.tape, d_out, &mut self.grad, Some(d_input))
    }

    /// Direct access for loss terms that depend on parameters explicitly.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn into_grad(self) -> Vec<f64> {
        self.grad
    }
}

/// Evaluate a scalar loss and its parameter gradient.
///
/// The closure computes the loss through the accumulator's forward passes and
/// feeds `∂loss/∂output` back row by row.
pub fn mlp_gradients<F>(model: &Mlp, loss: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut GradAccumulator<'_>) -> Result<f64>,
{
    let mut acc = GradAccumulator::new(model);
    let value = loss(&mut acc)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let grad = acc.into_grad();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((value, grad))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u32,
}

impl Adam {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.steps += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.steps as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.steps as f64);
        let step = self.learning_rate * libm::sqrt(c2) / c1;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= step * *m / (libm::sqrt(*v) + self.epsilon);
        }
    }
}
