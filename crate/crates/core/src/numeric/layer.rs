//! Dense layers and layer stacks with hand-derived backpropagation.
//!
//! A layer computes `y = dropout(activation(x·W + b))` where `W` is `in × out`.
//! Dropout is inverted: kept units are scaled by `1 / (1 - rate)` at train
//! time so inference needs no rescaling.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::ParamSlot;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Draw fresh dropout masks and cache intermediates.
    Train,
    /// No dropout; intermediates are still cached so a backward pass is possible.
    Infer,
    /// Reuse the dropout mask from the previous forward pass.
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    rate: f64,
}

impl DropoutSpec {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Validation(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        Ok(DropoutSpec { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    input: Matrix,
    pre: Matrix,
    activated: Matrix,
    /// Per-element multiplier: 0 for dropped units, `1/(1-rate)` for kept.
    mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Matrix,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
    #[serde(skip)]
    cache: Option<ForwardCache>,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Validation(format!(
                "layer dimensions must be positive, got {input_dim}x{output_dim}"
            )));
        }
        let limit = (6.0 / (input_dim + output_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let data = (0..input_dim * output_dim).map(|_| dist.sample(rng)).collect();
        Ok(DenseLayer {
            weights: Matrix::from_vec(input_dim, output_dim, data)?,
            bias: vec![0.0; output_dim],
            activation,
            cache: None,
        })
    }

    pub fn from_parts(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::Shape(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weights.cols()
            )));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
            cache: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn pre_activation(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "layer expects {} inputs, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        let mut pre = input.matmul(&self.weights)?;
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(pre)
    }

    /// Stateless inference pass: no dropout, nothing cached.
    pub fn infer(&self, input: &Matrix) -> Result<Matrix> {
        let act = self.activation;
        Ok(self.pre_activation(input)?.map(|z| act.apply(z)))
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        input: &Matrix,
        mode: Mode,
        dropout: Option<DropoutSpec>,
        rng: &mut R,
    ) -> Result<Matrix> {
        let pre = self.pre_activation(input)?;
        let act = self.activation;
        let activated = pre.map(|z| act.apply(z));
        let mask = match mode {
            Mode::Infer => None,
            Mode::Train => match dropout {
                Some(d) if d.rate > 0.0 => {
                    let keep = 1.0 / (1.0 - d.rate);
                    Some(
                        (0..activated.data().len())
                            .map(|_| if rng.gen::<f64>() < d.rate { 0.0 } else { keep })
                            .collect(),
                    )
                }
                _ => None,
            },
            Mode::Replay => {
                let cache = self
                    .cache
                    .as_ref()
                    .ok_or_else(|| Error::State("replay without a prior forward pass".into()))?;
                if let Some(mask) = &cache.mask {
                    if mask.len() != activated.data().len() {
                        return Err(Error::Shape(format!(
                            "replayed dropout mask covers {} values, batch has {}",
                            mask.len(),
                            activated.data().len()
                        )));
                    }
                }
                cache.mask.clone()
            }
        };
        let output = match &mask {
            Some(m) => {
                let mut out = activated.clone();
                for (o, k) in out.data_mut().iter_mut().zip(m) {
                    *o *= k;
                }
                out
            }
            None => activated.clone(),
        };
        self.cache = Some(ForwardCache {
            input: input.clone(),
            pre,
            activated,
            mask,
        });
        Ok(output)
    }

    /// Chain rule through dropout, activation and the affine map.
    pub fn backward(&self, upstream: &Matrix) -> Result<DenseGrads> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward without a matching forward pass".into()))?;
        if upstream.rows() != cache.pre.rows() || upstream.cols() != cache.pre.cols() {
            return Err(Error::Shape(format!(
                "upstream gradient {}x{} does not match layer output {}x{}",
                upstream.rows(),
                upstream.cols(),
                cache.pre.rows(),
                cache.pre.cols()
            )));
        }
        let mut delta = upstream.clone();
        {
            let d = delta.data_mut();
            let z = cache.pre.data();
            let a = cache.activated.data();
            match &cache.mask {
                Some(mask) => {
                    for i in 0..d.len() {
                        d[i] *= mask[i] * self.activation.derivative(z[i], a[i]);
                    }
                }
                None => {
                    for i in 0..d.len() {
                        d[i] *= self.activation.derivative(z[i], a[i]);
                    }
                }
            }
        }
        Ok(DenseGrads {
            weights: cache.input.t_matmul(&delta)?,
            bias: delta.sum_rows(),
            input: delta.matmul_t(&self.weights)?,
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// A feed-forward stack: ReLU hidden layers (each with optional dropout)
/// and an optional output layer without dropout. An empty stack is the
/// identity map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerStack {
    input_dim: usize,
    layers: Vec<DenseLayer>,
    dropout: Vec<Option<DropoutSpec>>,
    #[serde(skip)]
    grads: Vec<Option<(Matrix, Vec<f64>)>>,
}

impl LayerStack {
    /// `hidden[i]` units with `dropout[i]` (missing entries mean no dropout),
    /// followed by `output` when given.
    pub fn build<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        dropout: &[f64],
        output: Option<(usize, Activation)>,
        rng: &mut R,
    ) -> Result<Self> {
        if dropout.len() > hidden.len() {
            return Err(Error::Validation(format!(
                "{} dropout rates for {} hidden layers",
                dropout.len(),
                hidden.len()
            )));
        }
        let mut layers = Vec::new();
        let mut rates = Vec::new();
        let mut width = input_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(DenseLayer::new(width, h, Activation::Relu, rng)?);
            rates.push(match dropout.get(i) {
                Some(&r) if r > 0.0 => Some(DropoutSpec::new(r)?),
                Some(&r) => {
                    DropoutSpec::new(r)?;
                    None
                }
                None => None,
            });
            width = h;
        }
        if let Some((out, act)) = output {
            layers.push(DenseLayer::new(width, out, act, rng)?);
            rates.push(None);
        }
        if input_dim == 0 {
            return Err(Error::Validation("layer stack input dimension must be positive".into()));
        }
        let n = layers.len();
        Ok(LayerStack {
            input_dim,
            layers,
            dropout: rates,
            grads: vec![None; n],
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>, dropout: Vec<Option<DropoutSpec>>) -> Result<Self> {
        if layers.is_empty() || layers.len() != dropout.len() {
            return Err(Error::Validation(
                "layer stack needs layers and one dropout entry per layer".into(),
            ));
        }
        let input_dim = layers[0].input_dim();
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer of width {} feeds a layer expecting {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        let n = layers.len();
        Ok(LayerStack {
            input_dim,
            layers,
            dropout,
            grads: vec![None; n],
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn dropout_rates(&self) -> Vec<f64> {
        self.dropout.iter().map(|d| d.map_or(0.0, |d| d.rate())).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, DenseLayer::output_dim)
    }

    /// Layer widths from input to output, e.g. `[100, 128, 64, 1]`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::output_dim))
            .collect()
    }

    pub fn infer(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "stack expects {} inputs, got {}",
                self.input_dim,
                input.cols()
            )));
        }
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        input: &Matrix,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Matrix> {
        if input.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "stack expects {} inputs, got {}",
                self.input_dim,
                input.cols()
            )));
        }
        let mut x = input.clone();
        for (layer, d) in self.layers.iter_mut().zip(&self.dropout) {
            x = layer.forward(&x, mode, *d, rng)?;
        }
        Ok(x)
    }

    /// Backpropagate and keep parameter gradients for the next optimizer step.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        if self.grads.len() != self.layers.len() {
            self.grads = vec![None; self.layers.len()];
        }
        let mut g = upstream.clone();
        for (layer, slot) in self.layers.iter().zip(self.grads.iter_mut()).rev() {
            let grads = layer.backward(&g)?;
            *slot = Some((grads.weights, grads.bias));
            g = grads.input;
        }
        Ok(g)
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.clear_cache();
        }
        self.grads = vec![None; self.layers.len()];
    }

    /// Parameter/gradient pairs in a fixed order. Fails if backward has not run.
    pub fn param_slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamSlot<'a>>) -> Result<()> {
        if self.grads.len() != self.layers.len() {
            return Err(Error::State(format!("`{prefix}` has no gradients")));
        }
        for (i, (layer, grads)) in self.layers.iter_mut().zip(self.grads.iter()).enumerate() {
            let (gw, gb) = grads
                .as_ref()
                .ok_or_else(|| Error::State(format!("`{prefix}.{i}` has no gradients")))?;
            let DenseLayer { weights, bias, .. } = layer;
            out.push(ParamSlot {
                name: format!("{prefix}.{i}.weights"),
                values: weights.data_mut(),
                grad: gw.data(),
            });
            out.push(ParamSlot {
                name: format!("{prefix}.{i}.bias"),
                values: bias.as_mut_slice(),
                grad: gb.as_slice(),
            });
        }
        Ok(())
    }

    /// Flat copy of all parameters, in `param_slots` order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable references to every scalar parameter, in `flat_params` order.
    pub fn params_mut(&mut self) -> Vec<&mut f64> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            let DenseLayer { weights, bias, .. } = l;
            out.extend(weights.data_mut().iter_mut());
            out.extend(bias.iter_mut());
        }
        out
    }

    /// Flat copy of all gradients, in `flat_params` order.
    pub fn flat_grads(&self) -> Option<Vec<f64>> {
        let mut out = Vec::new();
        for g in &self.grads {
            let (w, b) = g.as_ref()?;
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn identity_layer() -> DenseLayer {
        let w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        DenseLayer::from_parts(w, vec![0.0, 0.0], Activation::Identity).unwrap()
    }

    #[test]
    fn identity_forward_and_backward() {
        let mut rng = rng_from(0, &[]);
        let mut layer = identity_layer();
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let y = layer.forward(&x, Mode::Train, None, &mut rng).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let g = layer
            .backward(&Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap())
            .unwrap();
        assert_eq!(g.input.data(), &[1.0, 0.0]);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut rng = rng_from(0, &[]);
        let w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut relu = DenseLayer::from_parts(w.clone(), vec![0.0; 2], Activation::Relu).unwrap();
        let x = Matrix::from_rows(&[vec![-1.0, 3.0]]).unwrap();
        let y = relu.forward(&x, Mode::Train, None, &mut rng).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0]);
        // Dead unit passes no gradient.
        let g = relu
            .backward(&Matrix::from_rows(&[vec![5.0, 1.0]]).unwrap())
            .unwrap();
        assert_eq!(g.input.data(), &[0.0, 1.0]);
        assert_eq!(g.weights.get(0, 0), 0.0);

        let sig = DenseLayer::from_parts(w, vec![0.0; 2], Activation::Sigmoid).unwrap();
        let y = sig.infer(&Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_requires_forward() {
        let layer = identity_layer();
        let up = Matrix::zeros(1, 2);
        assert!(matches!(layer.backward(&up), Err(Error::State(_))));
        let mut layer = identity_layer();
        let mut rng = rng_from(0, &[]);
        assert!(matches!(
            layer.forward(&Matrix::zeros(1, 2), Mode::Replay, None, &mut rng),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let mut layer = identity_layer();
        let mut rng = rng_from(0, &[]);
        let x = Matrix::zeros(1, 3);
        assert!(matches!(
            layer.forward(&x, Mode::Train, None, &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dropout_rate_validation() {
        assert!(DropoutSpec::new(1.0).is_err());
        assert!(DropoutSpec::new(-0.1).is_err());
        assert!(DropoutSpec::new(0.0).is_ok());
    }

    #[test]
    fn inverted_dropout_conventions() {
        let mut rng = rng_from(3, &[]);
        let x = Matrix::from_vec(4, 5, (0..20).map(|i| i as f64 / 7.0 - 1.0).collect()).unwrap();
        let mut layer = DenseLayer::new(5, 6, Activation::Relu, &mut rng).unwrap();
        let infer = layer.infer(&x).unwrap();
        // Infer mode ignores the rate.
        for rate in [0.0, 0.3, 0.9] {
            let y = layer
                .forward(&x, Mode::Infer, Some(DropoutSpec::new(rate).unwrap()), &mut rng)
                .unwrap();
            assert_eq!(y, infer);
        }
        // Rate zero in train mode equals inference.
        let y = layer
            .forward(&x, Mode::Train, Some(DropoutSpec::new(0.0).unwrap()), &mut rng)
            .unwrap();
        assert_eq!(y, infer);
        // Kept units are rescaled by 1/(1-rate).
        let y = layer
            .forward(&x, Mode::Train, Some(DropoutSpec::new(0.5).unwrap()), &mut rng)
            .unwrap();
        for (a, b) in y.data().iter().zip(infer.data()) {
            assert!(*a == 0.0 || (a - 2.0 * b).abs() < 1e-12);
        }
        // Replay reproduces the same mask.
        let again = layer
            .forward(&x, Mode::Replay, Some(DropoutSpec::new(0.5).unwrap()), &mut rng)
            .unwrap();
        assert_eq!(again, y);
    }

    #[test]
    fn stack_widths() {
        let mut rng = rng_from(0, &[]);
        let s = LayerStack::build(
            100,
            &[128, 128, 64],
            &[0.5, 0.5, 0.2],
            Some((1, Activation::Sigmoid)),
            &mut rng,
        )
        .unwrap();
        assert_eq!(s.widths(), vec![100, 128, 128, 64, 1]);
        assert_eq!(s.dropout_rates(), vec![0.5, 0.5, 0.2, 0.0]);
        let id = LayerStack::build(3, &[], &[], None, &mut rng).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(id.infer(&x).unwrap(), x);
        assert_eq!(id.output_dim(), 3);
        assert!(LayerStack::build(0, &[4], &[], None, &mut rng).is_err());
    }
}
