use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor2,
    pub grad: Tensor2,
}

impl Parameter {
    pub fn new(value: Tensor2) -> Self {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Tensor2::zeros(rows, cols))
    }

    /// Glorot-uniform weights, `U(±√(6/(fan_in+fan_out)))`.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self::new(Tensor2::new(fan_in, fan_out, data).expect("sized by construction"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }
}

/// Anything that owns parameters in a fixed, named order.
///
/// `named_params` and `params_mut` must enumerate the same parameters in the
/// same order; checkpointing, the optimizer and the gradient checker rely on
/// it.
pub trait ParamSet {
    fn named_params(&self) -> Vec<(String, &Parameter)>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_values(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    fn flat_values(&self) -> Vec<f64> {
        self.named_params()
            .iter()
            .flat_map(|(_, p)| p.value.data().iter().copied())
            .collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.named_params()
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter().copied())
            .collect()
    }

    /// Overwrite one scalar addressed by its index in `flat_values` order.
    fn set_flat_value(&mut self, index: usize, value: f64) {
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.value.len();
            if index < offset + n {
                p.value.data_mut()[index - offset] = value;
                return;
            }
            offset += n;
        }
        panic!("flat parameter index {index} out of range ({offset})");
    }

    /// Add another instance's gradients into ours. Both must share a layout.
    fn add_grads_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let theirs = other.named_params();
        let mine = self.params_mut();
        assert_eq!(mine.len(), theirs.len(), "parameter layouts differ");
        for (m, (_, t)) in mine.into_iter().zip(theirs) {
            m.grad.add_scaled(&t.grad, 1.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Elu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Elu => elu_scalar(x),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => elu_derivative(x),
        }
    }
}

#[inline]
pub fn elu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub fn elu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// `x · W + b`, with `b` broadcast over rows.
pub fn linear_forward(x: &Tensor2, w: &Parameter, b: &Parameter) -> Result<Tensor2> {
    if x.cols() != w.value.rows() {
        return Err(Error::shape(format!(
            "linear input has {} columns, weight expects {}",
            x.cols(),
            w.value.rows()
        )));
    }
    if b.value.shape() != (1, w.value.cols()) {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match weight output width {}",
            b.value.shape(),
            w.value.cols()
        )));
    }
    let mut out = x.matmul(&w.value)?;
    let bias = b.value.data();
    for r in 0..out.rows() {
        for (o, bb) in out.row_mut(r).iter_mut().zip(bias) {
            *o += bb;
        }
    }
    Ok(out)
}

pub fn elu(x: &Tensor2) -> Tensor2 {
    x.map(elu_scalar)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.is_empty() {
        return Err(Error::arg("mse_loss on empty input"));
    }
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "mse_loss lengths {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Parameter::glorot(fan_in, fan_out, rng),
            bias: Parameter::zeros(1, fan_out),
            activation,
        }
    }

    pub fn zeroed(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            weight: Parameter::zeros(fan_in, fan_out),
            bias: Parameter::zeros(1, fan_out),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.cols()
    }

    /// Returns `(pre_activation, output)`.
    pub fn forward(&self, x: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        let z = linear_forward(x, &self.weight, &self.bias)?;
        let a = match self.activation {
            Activation::Identity => z.clone(),
            act => z.map(|v| act.apply(v)),
        };
        Ok((z, a))
    }

    /// Backward through the affine map given the gradient at the
    /// pre-activation. Accumulates weight and bias gradients and returns the
    /// gradient with respect to the input when `need_input` is set.
    pub fn backward_pre(
        &mut self,
        x: &Tensor2,
        dz: &Tensor2,
        need_input: bool,
    ) -> Result<Option<Tensor2>> {
        self.weight.grad.accumulate_tn(x, dz)?;
        self.bias.grad.add_scaled(&dz.sum_rows(), 1.0);
        if need_input {
            Ok(Some(dz.matmul_nt(&self.weight.value)?))
        } else {
            Ok(None)
        }
    }

    fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl ParamSet for Dense {
    fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        self.push_named("dense", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        self.push_mut(&mut out);
        out
    }
}

/// Feed-forward stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Intermediate values kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Tensor2>,
    /// Pre-activation of each layer.
    pre: Vec<Tensor2>,
}

impl MlpCache {
    pub fn output_pre_activation(&self) -> &Tensor2 {
        self.pre.last().expect("non-empty network")
    }
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; hidden layers use `hidden`, the last
    /// layer uses `output`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::new(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeroed(dims: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::zeroed(dims[i], dims[i + 1], act)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty network").fan_out()
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut a = x.clone();
        for layer in &self.layers {
            a = layer.forward(&a)?.1;
        }
        Ok(a)
    }

    pub fn forward_cached(&self, x: &Tensor2) -> Result<(Tensor2, MlpCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for layer in &self.layers {
            let (z, out) = layer.forward(&a)?;
            inputs.push(a);
            pre.push(z);
            a = out;
        }
        Ok((a, MlpCache { inputs, pre }))
    }

    /// Backpropagate `d_out` (gradient at the network output). Accumulates
    /// parameter gradients; returns the input gradient when requested.
    pub fn backward(
        &mut self,
        cache: &MlpCache,
        d_out: &Tensor2,
        need_input: bool,
    ) -> Result<Option<Tensor2>> {
        let n = self.layers.len();
        let mut grad = d_out.clone();
        for i in (0..n).rev() {
            let layer = &mut self.layers[i];
            let z = &cache.pre[i];
            if layer.activation != Activation::Identity {
                for (g, &zz) in grad.data_mut().iter_mut().zip(z.data()) {
                    *g *= layer.activation.derivative(zz);
                }
            }
            let want_input = i > 0 || need_input;
            match layer.backward_pre(&cache.inputs[i], &grad, want_input)? {
                Some(g) => grad = g,
                None => return Ok(None),
            }
        }
        Ok(Some(grad))
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.push_named(&format!("{prefix}.layer{i}"), out);
        }
    }

    pub(crate) fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        for layer in &mut self.layers {
            layer.push_mut(out);
        }
    }
}

impl ParamSet for Mlp {
    fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        self.push_named("mlp", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        self.push_mut(&mut out);
        out
    }
}
