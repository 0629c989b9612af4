use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::SeededRng;
use crate::error::check_dim;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `h`.
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidArgument("hidden_dims must be non-empty".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("all layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every dense layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One affine layer; `weights` is `(fan_out, fan_in)` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Weights and biases of a network conforming to `spec`. Hidden layers use
/// `spec.activation`; the output layer is linear.
///
/// The same type carries parameter gradients. Serialized form stores each
/// layer's weights as one flat row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpParamsRepr", into = "MlpParamsRepr")]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<DenseLayer>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| DenseLayer {
                weights: Array2::zeros((fan_out, fan_in)),
                bias: Array1::zeros(fan_out),
            })
            .collect();
        Self {
            spec: spec.clone(),
            layers,
        }
    }

    /// LeCun-normal weights (variance `1 / fan_in`), zero biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut params = Self::zeros(spec);
        for layer in &mut params.layers {
            let scale = (1.0 / layer.weights.ncols() as f64).sqrt();
            layer
                .weights
                .iter_mut()
                .for_each(|w| *w = scale * rng.standard_normal());
        }
        params
    }

    pub fn zero_like(&self) -> Self {
        Self::zeros(&self.spec)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend(layer.weights.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn from_flat(spec: &MlpSpec, flat: &[f64]) -> Result<Self> {
        spec.validate()?;
        let mut params = Self::zeros(spec);
        check_dim("flat parameter vector", params.num_params(), flat.len())?;
        let mut cursor = flat.iter().copied();
        for layer in &mut params.layers {
            layer
                .weights
                .iter_mut()
                .chain(layer.bias.iter_mut())
                .for_each(|p| *p = cursor.next().expect("length checked"));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(params)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|w| w.is_finite()) && l.bias.iter().all(|b| b.is_finite())
        })
    }

    /// Mutable views of every parameter tensor, in flat order.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weights.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            [
                l.weights.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) {
        for (dst, src) in self.tensors_mut().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn zero_final_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weights.fill(0.0);
            last.bias.fill(0.0);
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRepr {
    fan_in: usize,
    fan_out: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpParamsRepr {
    spec: MlpSpec,
    layers: Vec<LayerRepr>,
}

impl From<MlpParams> for MlpParamsRepr {
    fn from(p: MlpParams) -> Self {
        let layers = p
            .layers
            .into_iter()
            .map(|l| LayerRepr {
                fan_in: l.weights.ncols(),
                fan_out: l.weights.nrows(),
                weights: l.weights.into_raw_vec_and_offset().0,
                bias: l.bias.into_raw_vec_and_offset().0,
            })
            .collect();
        Self {
            spec: p.spec,
            layers,
        }
    }
}

impl TryFrom<MlpParamsRepr> for MlpParams {
    type Error = Error;

    fn try_from(repr: MlpParamsRepr) -> Result<Self> {
        repr.spec.validate()?;
        let shapes = repr.spec.layer_shapes();
        check_dim("layer count", shapes.len(), repr.layers.len())?;
        let mut layers = Vec::with_capacity(shapes.len());
        for ((fan_in, fan_out), l) in shapes.into_iter().zip(repr.layers) {
            if l.fan_in != fan_in || l.fan_out != fan_out {
                return Err(Error::Format(format!(
                    "layer shape ({}, {}) does not match spec ({fan_out}, {fan_in})",
                    l.fan_out, l.fan_in
                )));
            }
            check_dim("layer bias", fan_out, l.bias.len())?;
            let weights = Array2::from_shape_vec((fan_out, fan_in), l.weights)
                .map_err(|e| Error::Format(e.to_string()))?;
            layers.push(DenseLayer {
                weights,
                bias: Array1::from(l.bias),
            });
        }
        let params = Self {
            spec: repr.spec,
            layers,
        };
        if !params.is_finite() {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(params)
    }
}

/// Layer activations kept from a forward pass; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

/// Row-batched forward pass. `inputs` is `(batch, input_dim)`.
pub fn forward_batch(
    params: &MlpParams,
    inputs: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, ForwardCache)> {
    check_dim("network input", params.spec.input_dim, inputs.ncols())?;
    let last = params.layers.len() - 1;
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    activations.push(inputs.to_owned());
    for (k, layer) in params.layers.iter().enumerate() {
        let mut z = activations[k].dot(&layer.weights.t());
        z += &layer.bias;
        if k < last {
            let act = params.spec.activation;
            z.mapv_inplace(|v| act.apply(v));
        }
        activations.push(z);
    }
    let output = activations.last().expect("at least one layer").clone();
    Ok((output, ForwardCache { activations }))
}

/// Reverse pass matching a [`forward_batch`] call. Parameter gradients are
/// summed over the batch; input gradients are per row.
pub fn backward_batch(
    params: &MlpParams,
    cache: &ForwardCache,
    output_grad: ArrayView2<'_, f64>,
) -> Result<(MlpParams, Array2<f64>)> {
    let batch = cache.activations[0].nrows();
    check_dim("output gradient rows", batch, output_grad.nrows())?;
    check_dim("output gradient", params.spec.output_dim, output_grad.ncols())?;
    let mut grads = params.zero_like();
    let mut delta = output_grad.to_owned();
    for k in (0..params.layers.len()).rev() {
        let layer_in = &cache.activations[k];
        grads.layers[k].weights = delta.t().dot(layer_in);
        grads.layers[k].bias = delta.sum_axis(Axis(0));
        let mut upstream = delta.dot(&params.layers[k].weights);
        if k > 0 {
            let act = params.spec.activation;
            upstream.zip_mut_with(layer_in, |g, &h| *g *= act.derivative_from_output(h));
        }
        delta = upstream;
    }
    Ok((grads, delta))
}

pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>> {
    check_dim("network input", params.spec.input_dim, input.len())?;
    let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous row");
    let (out, _) = forward_batch(params, x)?;
    Ok(out.into_raw_vec_and_offset().0)
}

/// Exact reverse-mode gradients of `output_grad · f(input)` with respect to
/// the parameters and the input.
pub fn mlp_backward(
    params: &MlpParams,
    input: &[f64],
    output_grad: &[f64],
) -> Result<(MlpParams, Vec<f64>)> {
    check_dim("network input", params.spec.input_dim, input.len())?;
    check_dim("output gradient", params.spec.output_dim, output_grad.len())?;
    let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous row");
    let g = ArrayView2::from_shape((1, output_grad.len()), output_grad).expect("contiguous row");
    let (_, cache) = forward_batch(params, x)?;
    let (grads, input_grad) = backward_batch(params, &cache, g)?;
    Ok((grads, input_grad.into_raw_vec_and_offset().0))
}
