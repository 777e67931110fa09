//! Dense feedforward network with hand-written backpropagation.
//!
//! Weights are stored `fan_out x fan_in` so a layer computes `W x + b`.
//! Batched passes work on row-major `batch x width` matrices.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use serde::{Deserialize, Serialize};

use super::rng::SeededRng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Silu,
    Softplus,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Identity,
        Activation::Tanh,
        Activation::Silu,
        Activation::Softplus,
    ];

    pub fn tag(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Silu => 2,
            Activation::Softplus => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Silu => z * sigmoid(z),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Softplus => sigmoid(z),
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

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNet {
    layers: Vec<Layer>,
}

/// Per-layer activations kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// `batch x input_width` gradient with respect to the network input.
    pub input: Array2<f64>,
}

impl Gradients {
    /// Parameter gradients in the same order as [`FeedForwardNet::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("contiguous weights"));
            out.push(b.as_slice().expect("contiguous bias"));
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|g| g * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|g| g * factor);
        }
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }
}

impl FeedForwardNet {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Shape {
                    expected: pair[0].fan_out(),
                    got: pair[1].fan_in(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Shape {
                    expected: l.fan_out(),
                    got: l.bias.len(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Multilayer perceptron with `hidden_activation` on every hidden layer and
    /// a linear output. Weights ~ N(0, 1/fan_in), biases zero.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_activation: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (1.0 / fan_in as f64).sqrt();
                let data = rng
                    .normal_vec(fan_in * fan_out)
                    .into_iter()
                    .map(|z| z * scale)
                    .collect();
                Layer {
                    weights: Array2::from_shape_vec((fan_out, fan_in), data).expect("shape"),
                    bias: Array1::zeros(fan_out),
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        hidden_activation
                    },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| (l.fan_in() + 1) * l.fan_out())
            .sum()
    }

    /// Mutable parameter buffers ordered `W0, b0, W1, b1, ...`.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("contiguous weights"));
            out.push(l.bias.as_slice_mut().expect("contiguous bias"));
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weights.as_slice().expect("contiguous weights"));
            out.push(l.bias.as_slice().expect("contiguous bias"));
        }
        out
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_width() {
            return Err(Error::Shape {
                expected: self.input_width(),
                got: x.len(),
            });
        }
        let mut a = Array1::from_vec(x.to_vec());
        for l in &self.layers {
            let mut z = l.weights.dot(&a);
            z += &l.bias;
            z.mapv_inplace(|v| l.activation.apply(v));
            a = z;
        }
        Ok(a.to_vec())
    }

    fn check_batch(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return Err(Error::Shape {
                expected: self.input_width(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Batched forward pass without keeping intermediates.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&x)?;
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.weights.t());
            z += &l.bias;
            z.mapv_inplace(|v| l.activation.apply(v));
            a = z;
        }
        Ok(a)
    }

    /// Batched forward pass that records what backpropagation needs.
    pub fn forward_train(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_batch(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.weights.t());
            z += &l.bias;
            let out = z.mapv(|v| l.activation.apply(v));
            inputs.push(a);
            pre_activations.push(z);
            a = out;
        }
        Ok((
            a,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Gradients of `sum_b upstream[b] . output[b]`, summed over the batch.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<Gradients> {
        let batch = cache.inputs[0].nrows();
        if upstream.ncols() != self.output_width() || upstream.nrows() != batch {
            return Err(Error::Shape {
                expected: self.output_width(),
                got: upstream.ncols(),
            });
        }
        let n = self.layers.len();
        let mut weights = vec![Array2::zeros((0, 0)); n];
        let mut biases = vec![Array1::zeros(0); n];
        let mut delta = upstream.to_owned();
        for i in (0..n).rev() {
            let l = &self.layers[i];
            if l.activation != Activation::Identity {
                let z = &cache.pre_activations[i];
                ndarray::Zip::from(&mut delta)
                    .and(z)
                    .for_each(|d, &zv| *d *= l.activation.derivative(zv));
            }
            weights[i] = delta.t().dot(&cache.inputs[i]).as_standard_layout().into_owned();
            biases[i] = delta.sum_axis(Axis(0));
            delta = delta.dot(&l.weights);
        }
        Ok(Gradients {
            weights,
            biases,
            input: delta,
        })
    }

    /// Single-sample backward pass: gradients of `upstream . f(x)`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Gradients> {
        if upstream.len() != self.output_width() {
            return Err(Error::Shape {
                expected: self.output_width(),
                got: upstream.len(),
            });
        }
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let (_, cache) = self.forward_train(xv)?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row view");
        self.backward_batch(&cache, up)
    }

    pub fn all_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Row-major concatenation helper: writes `parts` side by side into `row`.
pub fn write_row(mut row: ndarray::ArrayViewMut1<f64>, parts: &[&[f64]]) {
    let mut i = 0;
    for p in parts {
        for &v in *p {
            row[i] = v;
            i += 1;
        }
    }
    debug_assert_eq!(i, row.len());
}

pub fn view_row(x: &[f64]) -> ArrayView1<'_, f64> {
    ArrayView1::from(x)
}
