//! Minimal batched dense networks with exact backpropagation and Adam.
//!
//! Tensors are flat row-major `Vec<f64>`: a batch of `b` vectors of width `w`
//! occupies `b * w` contiguous values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LearnerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Uniform fan-in initialization in `±scale/√inputs`.
    fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, scale: f64, rng: &mut R) -> Self {
        let bound = scale / (inputs as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs, activation);
        layer
            .weights
            .iter_mut()
            .chain(layer.bias.iter_mut())
            .for_each(|w| *w = rng.gen_range(-bound..=bound));
        layer
    }

    fn forward(&self, input: &[f64], batch: usize, out: &mut Vec<f64>) {
        let (i, o) = (self.inputs, self.outputs);
        out.clear();
        for _ in 0..batch {
            out.extend_from_slice(&self.bias);
        }
        // out (batch × o) += input (batch × i) · Wᵀ (i × o)
        // SAFETY: every pointer covers the full row-major extent implied by
        // its dimensions and strides, and `out` does not alias the inputs.
        unsafe {
            matrixmultiply::dgemm(
                batch,
                i,
                o,
                1.0,
                input.as_ptr(),
                i as isize,
                1,
                self.weights.as_ptr(),
                1,
                i as isize,
                1.0,
                out.as_mut_ptr(),
                o as isize,
                1,
            );
        }
        if self.activation != Activation::Linear {
            for v in out.iter_mut() {
                *v = self.activation.apply(*v);
            }
        }
    }
}

/// Feed-forward stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

/// Activations kept from a forward pass; `values[0]` is the input and
/// `values[k + 1]` the output of layer `k`.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pub batch: usize,
    pub values: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl DenseNet {
    /// `sizes = [in, h1, ..., out]`, one activation per layer. The last layer
    /// is initialized with `final_scale` instead of the fan-in bound.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activations: &[Activation],
        final_scale: Option<f64>,
        rng: &mut R,
    ) -> Self {
        assert_eq!(sizes.len(), activations.len() + 1, "one activation per layer");
        let n = activations.len();
        let layers = (0..n)
            .map(|k| {
                if k + 1 == n {
                    if let Some(scale) = final_scale {
                        let mut l = Layer::zeros(sizes[k], sizes[k + 1], activations[k]);
                        l.weights
                            .iter_mut()
                            .chain(l.bias.iter_mut())
                            .for_each(|w| *w = rng.gen_range(-scale..=scale));
                        return l;
                    }
                }
                Layer::init(sizes[k], sizes[k + 1], activations[k], 1.0, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, LearnerError> {
        for (k, w) in layers.windows(2).enumerate() {
            if w[0].outputs != w[1].inputs {
                return Err(LearnerError::Shape(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    w[0].outputs,
                    k + 1,
                    w[1].inputs
                )));
            }
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(LearnerError::Shape("layer parameter length".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Batched forward pass; `input.len()` must be `batch * input_dim`.
    pub fn forward(&self, input: &[f64], batch: usize) -> Result<ForwardCache, LearnerError> {
        if input.len() != batch * self.input_dim() {
            return Err(LearnerError::Shape(format!(
                "input of length {} for batch {batch} × width {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        for layer in &self.layers {
            let mut out = Vec::new();
            layer.forward(values.last().unwrap(), batch, &mut out);
            values.push(out);
        }
        let cache = ForwardCache { batch, values };
        if cache.output().iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFinite("network output".into()));
        }
        Ok(cache)
    }

    /// Forward pass for a single input vector.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, LearnerError> {
        let mut cache = self.forward(input, 1)?;
        Ok(cache.values.pop().unwrap_or_default())
    }

    /// Backpropagates `grad_out` (∂loss/∂output, batch × out). Parameter
    /// gradients are accumulated into `grads` when given; returns
    /// ∂loss/∂input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], mut grads: Option<&mut Gradients>) -> Vec<f64> {
        let batch = cache.batch;
        let mut delta = grad_out.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let output = &cache.values[k + 1];
            for (d, y) in delta.iter_mut().zip(output) {
                *d *= layer.activation.derivative_from_output(*y);
            }
            let input = &cache.values[k];
            let (i, o) = (layer.inputs, layer.outputs);
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = &mut g.layers[k];
                for row in delta.chunks(o) {
                    for (b, d) in gb.iter_mut().zip(row) {
                        *b += d;
                    }
                }
                // gW (o × i) += deltaᵀ (o × batch) · input (batch × i)
                // SAFETY: as in `Layer::forward`.
                unsafe {
                    matrixmultiply::dgemm(
                        o,
                        batch,
                        i,
                        1.0,
                        delta.as_ptr(),
                        1,
                        o as isize,
                        input.as_ptr(),
                        i as isize,
                        1,
                        1.0,
                        gw.as_mut_ptr(),
                        i as isize,
                        1,
                    );
                }
            }
            let mut next = vec![0.0; batch * i];
            // grad_in (batch × i) = delta (batch × o) · W (o × i)
            // SAFETY: as in `Layer::forward`.
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    o,
                    i,
                    1.0,
                    delta.as_ptr(),
                    o as isize,
                    1,
                    layer.weights.as_ptr(),
                    i as isize,
                    1,
                    0.0,
                    next.as_mut_ptr(),
                    i as isize,
                    1,
                );
            }
            delta = next;
        }
        delta
    }

    /// All parameters, layer by layer: weights (row-major) then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<(), LearnerError> {
        if params.len() != self.param_count() {
            return Err(LearnerError::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut i = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[i..i + nw]);
            i += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[i..i + nb]);
            i += nb;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// `self ← (1 − τ)·self + τ·online`.
    pub fn polyak_update(&mut self, online: &DenseNet, tau: f64) {
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            for (a, b) in t.weights.iter_mut().zip(&o.weights) {
                *a = (1.0 - tau) * *a + tau * b;
            }
            for (a, b) in t.bias.iter_mut().zip(&o.bias) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
    }
}

/// Per-layer `(∂W, ∂b)` with the same shapes as a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b).all(|v| v.is_finite()))
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    first: Gradients,
    second: Gradients,
    steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(net: &DenseNet) -> Self {
        Self {
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
            steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One descent step on `net` using gradients of the loss.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.steps.min(i32::MAX as u64) as i32);
        let step = lr * c2.sqrt() / c1;
        let eps = self.epsilon * c2.sqrt();
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[k];
            let (mw, mb) = &mut self.first.layers[k];
            let (vw, vb) = &mut self.second.layers[k];
            let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
            let g = gw.iter().chain(gb.iter());
            let m = mw.iter_mut().chain(mb.iter_mut());
            let v = vw.iter_mut().chain(vb.iter_mut());
            for (((p, g), m), v) in params.zip(g).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}
