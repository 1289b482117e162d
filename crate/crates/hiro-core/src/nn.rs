//! Multilayer perceptrons with hand-written backpropagation and Adam.
//!
//! Hidden layers are tanh. The output is either raw (critics) or
//! tanh-scaled into a symmetric range (actors), so actor outputs always lie
//! strictly inside their declared bounds.
//!
//! Single-sample and batched paths accumulate in the same order (bias first,
//! then ascending input index; batch sums ascend over rows), so they produce
//! bit-identical results and identical seeds reproduce training exactly.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Bounds, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub enum OutputTransform {
    /// Raw affine output (value heads).
    Identity,
    /// y_i = h_i * tanh(z_i): squashes into (-h_i, h_i) (policy heads).
    TanhScaled(Bounds),
}

/// Fully-connected network parameters. `weights[i]` has shape
/// (layer_sizes[i+1], layer_sizes[i]); biases start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    output: OutputTransform,
}

/// Parameter-congruent buffers: gradients and Adam moments.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Gradients {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_scaled(b, 1.0);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            for v in w.as_mut_slice() {
                *v *= s;
            }
        }
        for b in &mut self.biases {
            for v in b {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn congruent_with(&self, params: &MlpParams) -> bool {
        self.weights.len() == params.weights.len()
            && self
                .weights
                .iter()
                .zip(&params.weights)
                .all(|(a, b)| a.same_shape(b))
            && self
                .biases
                .iter()
                .zip(&params.biases)
                .all(|(a, b)| a.len() == b.len())
    }
}

impl MlpParams {
    /// Initializes weights uniformly in ±1/sqrt(fan_in), biases at zero.
    /// Draw order is layer-ascending, then row, then column, which pins the
    /// consumed RNG stream for reproducibility.
    pub fn new(layer_sizes: &[usize], output: OutputTransform, rng: &mut Rng) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "mlp needs at least input and output layers".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "zero-width layer in {layer_sizes:?}"
            )));
        }
        if let OutputTransform::TanhScaled(b) = &output {
            if b.dim() != *layer_sizes.last().unwrap() {
                return Err(Error::Shape(format!(
                    "output bounds dim {} vs output layer {}",
                    b.dim(),
                    layer_sizes.last().unwrap()
                )));
            }
        }
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = 1.0 / (fan_in as f64).sqrt();
            weights.push(Matrix::from_fn(fan_out, fan_in, |_, _| {
                rng.uniform_in(-limit, limit)
            }));
            biases.push(vec![0.0; fan_out]);
        }
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            output,
        })
    }

    /// Rebuilds a network from decoded parts, revalidating every shape.
    pub(crate) fn from_raw_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        output: OutputTransform,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Shape(format!("bad layer sizes {layer_sizes:?}")));
        }
        if weights.len() != layer_sizes.len() - 1 || biases.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} weight / {} bias blocks for {} layers",
                weights.len(),
                biases.len(),
                layer_sizes.len()
            )));
        }
        for l in 0..weights.len() {
            if weights[l].rows() != layer_sizes[l + 1]
                || weights[l].cols() != layer_sizes[l]
                || biases[l].len() != layer_sizes[l + 1]
            {
                return Err(Error::Shape(format!("layer {l} parameter shapes disagree")));
            }
        }
        if let OutputTransform::TanhScaled(bounds) = &output {
            if bounds.dim() != *layer_sizes.last().unwrap() {
                return Err(Error::Shape("output bounds dim vs last layer".into()));
            }
        }
        Ok(MlpParams {
            layer_sizes,
            weights,
            biases,
            output,
        })
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

    pub fn output_transform(&self) -> &OutputTransform {
        &self.output
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// Raw parameter access for optimizers, checkpoints, and gradient checks.
    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn congruent_with(&self, other: &MlpParams) -> bool {
        self.layer_sizes == other.layer_sizes && self.output == other.output
    }

    fn apply_output(&self, z: &mut [f64]) {
        match &self.output {
            OutputTransform::Identity => {}
            OutputTransform::TanhScaled(b) => {
                for (v, h) in z.iter_mut().zip(b.half_widths()) {
                    *v = h * v.tanh();
                }
            }
        }
    }

    /// Layer affine step: out[o] = bias[o] + sum_k w[o,k] x[k], accumulated
    /// bias-first in ascending k. The batched path repeats this order exactly.
    fn affine(w: &Matrix, b: &[f64], x: &[f64], out: &mut [f64]) {
        for (o, acc) in out.iter_mut().enumerate() {
            let row = w.row(o);
            let mut a = b[o];
            for (wv, xv) in row.iter().zip(x) {
                a = wv.mul_add(*xv, a);
            }
            *acc = a;
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input len {} vs expected {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut act = input.to_vec();
        let last = self.num_layers() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = vec![0.0; w.rows()];
            Self::affine(w, b, &act, &mut z);
            if i < last {
                for v in &mut z {
                    *v = v.tanh();
                }
            } else {
                self.apply_output(&mut z);
            }
            act = z;
        }
        Ok(act)
    }

    /// Forward pass retaining every post-activation layer output.
    fn forward_trace(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(input.to_vec());
        let last = self.num_layers() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = vec![0.0; w.rows()];
            Self::affine(w, b, acts.last().unwrap(), &mut z);
            if i < last {
                for v in &mut z {
                    *v = v.tanh();
                }
            } else {
                self.apply_output(&mut z);
            }
            acts.push(z);
        }
        acts
    }

    /// Converts dL/dy into dL/dz at the output layer.
    fn output_grad_to_dz(&self, y: &[f64], dy: &[f64]) -> Vec<f64> {
        match &self.output {
            OutputTransform::Identity => dy.to_vec(),
            OutputTransform::TanhScaled(b) => dy
                .iter()
                .zip(y)
                .zip(b.half_widths())
                .map(|((g, yv), h)| {
                    let t = yv / h;
                    g * h * (1.0 - t * t)
                })
                .collect(),
        }
    }

    /// Backpropagates `output_gradient` (dL/dy) through the network at
    /// `input`. Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(
        &self,
        input: &[f64],
        output_gradient: &[f64],
    ) -> Result<(Gradients, Vec<f64>)> {
        self.check_input(input)?;
        if output_gradient.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "output gradient len {} vs expected {}",
                output_gradient.len(),
                self.output_dim()
            )));
        }
        let acts = self.forward_trace(input);
        let mut grads = Gradients::zeros_like(self);
        let mut dz = self.output_grad_to_dz(acts.last().unwrap(), output_gradient);
        for i in (0..self.num_layers()).rev() {
            grads.weights[i].add_outer_scaled(&dz, &acts[i], 1.0);
            for (g, d) in grads.biases[i].iter_mut().zip(&dz) {
                *g += d;
            }
            let mut da = vec![0.0; self.layer_sizes[i]];
            self.weights[i].matvec_transposed(&dz, &mut da);
            if i > 0 {
                // acts[i] is a tanh output; d tanh(z) = 1 - tanh(z)^2.
                for (d, a) in da.iter_mut().zip(&acts[i]) {
                    *d *= 1.0 - a * a;
                }
            }
            dz = da;
        }
        Ok((grads, dz))
    }

    fn check_batch(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch input width {} vs expected {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn affine_batch(w: &Matrix, b: &[f64], x: &Matrix) -> Matrix {
        // z = x . w^T + b, written k-outer so the inner loop runs over the
        // contiguous output index and pipelines; per-(row, o) accumulation is
        // bias-first ascending k, matching `affine` bit-for-bit.
        let wt = Matrix::from_fn(w.cols(), w.rows(), |k, o| w.get(o, k));
        let mut z = Matrix::zeros(x.rows(), w.rows());
        for r in 0..x.rows() {
            z.row_mut(r).copy_from_slice(b);
        }
        for r in 0..x.rows() {
            let xrow = x.row(r);
            let zrow = z.row_mut(r);
            for (k, xv) in xrow.iter().enumerate() {
                let wtrow = wt.row(k);
                for (zv, wv) in zrow.iter_mut().zip(wtrow) {
                    *zv = xv.mul_add(*wv, *zv);
                }
            }
        }
        z
    }

    /// Batched forward: one input per row. Bit-identical to per-row `forward`.
    pub fn forward_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_batch(inputs)?;
        Ok(self.forward_trace_batch(inputs).pop().unwrap())
    }

    fn forward_trace_batch(&self, inputs: &Matrix) -> Vec<Matrix> {
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(inputs.clone());
        let last = self.num_layers() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = Self::affine_batch(w, b, acts.last().unwrap());
            if i < last {
                for v in z.as_mut_slice() {
                    *v = v.tanh();
                }
            } else {
                for r in 0..z.rows() {
                    self.apply_output(z.row_mut(r));
                }
            }
            acts.push(z);
        }
        acts
    }

    /// Batched backward. `output_gradients` holds dL/dy per row; returns the
    /// gradient sum over rows (ascending row order) and per-row input
    /// gradients. Summing per-row `backward` results in row order gives the
    /// same bits.
    pub fn backward_batch(
        &self,
        inputs: &Matrix,
        output_gradients: &Matrix,
    ) -> Result<(Gradients, Matrix)> {
        self.check_batch(inputs)?;
        if output_gradients.cols() != self.output_dim() || output_gradients.rows() != inputs.rows()
        {
            return Err(Error::Shape(format!(
                "batch output gradients {}x{} vs expected {}x{}",
                output_gradients.rows(),
                output_gradients.cols(),
                inputs.rows(),
                self.output_dim()
            )));
        }
        let acts = self.forward_trace_batch(inputs);
        let rows = inputs.rows();
        let mut grads = Gradients::zeros_like(self);
        let y = acts.last().unwrap();
        let mut dz = Matrix::zeros(rows, self.output_dim());
        for r in 0..rows {
            let row = self.output_grad_to_dz(y.row(r), output_gradients.row(r));
            dz.row_mut(r).copy_from_slice(&row);
        }
        for i in (0..self.num_layers()).rev() {
            for r in 0..rows {
                grads.weights[i].add_outer_scaled(dz.row(r), acts[i].row(r), 1.0);
                for (g, d) in grads.biases[i].iter_mut().zip(dz.row(r)) {
                    *g += d;
                }
            }
            let mut da = Matrix::zeros(rows, self.layer_sizes[i]);
            for r in 0..rows {
                self.weights[i].matvec_transposed(dz.row(r), da.row_mut(r));
            }
            if i > 0 {
                let a = &acts[i];
                for r in 0..rows {
                    for (d, av) in da.row_mut(r).iter_mut().zip(a.row(r)) {
                        *d *= 1.0 - av * av;
                    }
                }
            }
            dz = da;
        }
        Ok((grads, dz))
    }
}

/// Adam optimizer state bound to one network's shape.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(params: &MlpParams, lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn hyperparams(&self) -> (f64, f64, f64) {
        (self.beta1, self.beta2, self.eps)
    }

    pub(crate) fn raw_parts(&self) -> (u64, f64, f64, f64, f64, &Gradients, &Gradients) {
        (
            self.step, self.lr, self.beta1, self.beta2, self.eps, &self.m, &self.v,
        )
    }

    pub(crate) fn from_raw_parts(
        step: u64,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Gradients,
        v: Gradients,
    ) -> Self {
        AdamState {
            step,
            lr,
            beta1,
            beta2,
            eps,
            m,
            v,
        }
    }

    /// One Adam update in place. Rejects gradient buffers that do not match
    /// the parameter shape or contain non-finite values.
    pub fn adam_step(&mut self, params: &mut MlpParams, grads: &Gradients) -> Result<()> {
        if !grads.congruent_with(params) || !self.m.congruent_with(params) {
            return Err(Error::Shape(
                "adam_step: gradient/parameter shape mismatch".into(),
            ));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("adam_step: non-finite gradient".into()));
        }
        self.step += 1;
        let (lr, beta1, beta2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        };
        for i in 0..params.weights.len() {
            update(
                params.weights[i].as_mut_slice(),
                grads.weights[i].as_slice(),
                self.m.weights[i].as_mut_slice(),
                self.v.weights[i].as_mut_slice(),
            );
            update(
                params.biases[i].as_mut_slice(),
                grads.biases[i].as_slice(),
                self.m.biases[i].as_mut_slice(),
                self.v.biases[i].as_mut_slice(),
            );
        }
        Ok(())
    }
}

/// Polyak averaging: target = tau * online + (1 - tau) * target.
pub fn soft_update(target: &mut MlpParams, online: &MlpParams, tau: f64) -> Result<()> {
    if !target.congruent_with(online) {
        return Err(Error::Shape("soft_update: architecture mismatch".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!(
            "soft_update: tau {tau} outside [0,1]"
        )));
    }
    for (tw, ow) in target.weights.iter_mut().zip(&online.weights) {
        for (t, o) in tw.as_mut_slice().iter_mut().zip(ow.as_slice()) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }
    for (tb, ob) in target.biases.iter_mut().zip(&online.biases) {
        for (t, o) in tb.iter_mut().zip(ob) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }
    Ok(())
}
