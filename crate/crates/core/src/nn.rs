//! Layer stacks shared by the generators, critics and the classifier.
//!
//! A [`NetSpec`] is plain data (serializable into run configs); a [`Network`]
//! is a validated spec with its per-layer shapes resolved. Parameters live
//! in a [`ParameterStore`] under `"{prefix}.{layer}.{w|b|gamma|beta}"`, with
//! running normalization statistics as buffers `"...rmean"` / `"...rvar"`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    conv_out_len, conv_transpose_out_len, Array, AutodiffError, BoundParams, ParameterStore, Tensor,
};
use crate::seed::{self, Rng};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("layer {layer} ({kind:?}): expected {expected}, got input shape {actual:?}")]
    Shape {
        layer: usize,
        kind: LayerKind,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("network output shape {actual:?} does not match the target {expected:?}")]
    Output { expected: Vec<usize>, actual: Vec<usize> },
    #[error("missing running statistics {0}")]
    MissingBuffer(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv,
    ConvTranspose,
    MaxPool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

fn ones() -> [usize; 2] {
    [1, 1]
}

/// One layer. `out` is the feature count of a dense layer or the channel
/// count of a (transposed) convolution; max-pool keeps channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default)]
    pub out: usize,
    #[serde(default = "ones")]
    pub kernel: [usize; 2],
    #[serde(default = "ones")]
    pub stride: [usize; 2],
    #[serde(default)]
    pub padding: [usize; 2],
    #[serde(default)]
    pub output_padding: [usize; 2],
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub norm: bool,
    /// Dense layers only: reshape the output to `[C, H, W]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reshape: Option<[usize; 3]>,
}

impl LayerSpec {
    pub fn dense(out: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense,
            out,
            kernel: [1, 1],
            stride: [1, 1],
            padding: [0, 0],
            output_padding: [0, 0],
            activation,
            norm: false,
            reshape: None,
        }
    }

    pub fn conv(out: usize, kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2], activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv,
            out,
            kernel,
            stride,
            padding,
            ..Self::dense(out, activation)
        }
    }

    pub fn conv_transpose(
        out: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        activation: Activation,
    ) -> Self {
        Self {
            kind: LayerKind::ConvTranspose,
            ..Self::conv(out, kernel, stride, padding, activation)
        }
    }

    pub fn max_pool(kernel: [usize; 2], stride: [usize; 2]) -> Self {
        Self {
            kind: LayerKind::MaxPool,
            kernel,
            stride,
            ..Self::dense(0, Activation::Identity)
        }
    }

    pub fn with_norm(mut self, norm: bool) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_reshape(mut self, shape: [usize; 3]) -> Self {
        self.reshape = Some(shape);
        self
    }

    fn has_weights(&self) -> bool {
        self.kind != LayerKind::MaxPool
    }

    /// Output shape (without batch) for a given input shape.
    fn output_shape(&self, layer: usize, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let err = |expected: String| NnError::Shape {
            layer,
            kind: self.kind,
            expected,
            actual: input.to_vec(),
        };
        match self.kind {
            LayerKind::Dense => {
                if self.out == 0 {
                    return Err(err("a positive output width".into()));
                }
                match self.reshape {
                    Some([c, h, w]) if c * h * w != self.out => {
                        Err(err(format!("reshape {c}x{h}x{w} to hold {} features", self.out)))
                    }
                    Some(r) => Ok(r.to_vec()),
                    None => Ok(vec![self.out]),
                }
            }
            LayerKind::Conv | LayerKind::ConvTranspose | LayerKind::MaxPool => {
                if input.len() != 3 {
                    return Err(err("a [C, H, W] input".into()));
                }
                let mut hw = [0; 2];
                for axis in 0..2 {
                    let len = input[axis + 1];
                    hw[axis] = match self.kind {
                        LayerKind::ConvTranspose => conv_transpose_out_len(
                            len,
                            self.kernel[axis],
                            self.stride[axis],
                            self.padding[axis],
                            self.output_padding[axis],
                        ),
                        LayerKind::MaxPool => conv_out_len(len, self.kernel[axis], self.stride[axis], 0),
                        _ => conv_out_len(len, self.kernel[axis], self.stride[axis], self.padding[axis]),
                    }
                    .ok_or_else(|| {
                        err(format!(
                            "axis {axis} length compatible with K={:?} S={:?} P={:?} OP={:?}",
                            self.kernel, self.stride, self.padding, self.output_padding
                        ))
                    })?;
                }
                let ch = if self.kind == LayerKind::MaxPool { input[0] } else { self.out };
                if ch == 0 {
                    return Err(err("a positive channel count".into()));
                }
                Ok(vec![ch, hw[0], hw[1]])
            }
        }
    }
}

/// Input shape (without batch), layers, and the LeakyReLU slope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub leaky_slope: f64,
}

impl NetSpec {
    /// Per-layer output shapes, validated symbolically.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let mut cur = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.output_shape(i, &cur)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>, NnError> {
        Ok(self.shapes()?.pop().unwrap_or_else(|| self.input.clone()))
    }

    pub fn fingerprint(&self) -> u64 {
        seed::fingerprint(&serde_json::to_vec(self).expect("spec serializes"))
    }
}

/// Result of a forward pass: the output and, in training mode, the updated
/// running statistics of every normalization layer.
pub struct Forward {
    pub out: Tensor,
    pub running: Vec<(String, Array)>,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetSpec,
    inputs: Vec<Vec<usize>>,
    prefix: String,
}

impl Network {
    pub fn new(spec: NetSpec, prefix: &str) -> Result<Self, NnError> {
        let shapes = spec.shapes()?;
        let mut inputs = vec![spec.input.clone()];
        inputs.extend(shapes.iter().take(shapes.len().saturating_sub(1)).cloned());
        Ok(Self {
            spec,
            inputs,
            prefix: prefix.to_string(),
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.spec.output_shape().expect("validated at construction")
    }

    fn name(&self, layer: usize, what: &str) -> String {
        format!("{}.{layer}.{what}", self.prefix)
    }

    fn in_features(&self, layer: usize) -> usize {
        self.inputs[layer].iter().product()
    }

    /// Inserts freshly initialized parameters: weights and biases uniform
    /// in `±1/sqrt(fan_in)`, normalization scale 1 and shift 0.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut Rng) {
        for (i, layer) in self.spec.layers.iter().enumerate() {
            if !layer.has_weights() {
                continue;
            }
            let k = layer.kernel[0] * layer.kernel[1];
            let (w_shape, fan_in) = match layer.kind {
                LayerKind::Dense => (vec![self.in_features(i), layer.out], self.in_features(i)),
                LayerKind::Conv => {
                    let c = self.inputs[i][0];
                    (vec![layer.out, c, layer.kernel[0], layer.kernel[1]], c * k)
                }
                LayerKind::ConvTranspose => {
                    let c = self.inputs[i][0];
                    (vec![c, layer.out, layer.kernel[0], layer.kernel[1]], layer.out * k)
                }
                LayerKind::MaxPool => unreachable!(),
            };
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let mut uniform = |shape: &[usize]| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Array::new(shape.to_vec(), data).expect("sized to shape")
            };
            let w = uniform(&w_shape);
            store.insert(self.name(i, "w"), w);
            if layer.norm {
                store.insert(self.name(i, "gamma"), Array::full(&[layer.out], 1.0));
                store.insert(self.name(i, "beta"), Array::zeros(&[layer.out]));
                store.insert_buffer(self.name(i, "rmean"), Array::zeros(&[layer.out]));
                store.insert_buffer(self.name(i, "rvar"), Array::full(&[layer.out], 1.0));
            } else {
                let b = uniform(&[layer.out]);
                store.insert(self.name(i, "b"), b);
            }
        }
    }

    /// Runs the stack on `x` of shape `[B, ..input]`. Normalization uses
    /// batch statistics when `train` and the stored running statistics
    /// otherwise.
    pub fn forward(&self, params: &BoundParams, store: &ParameterStore, x: &Tensor, train: bool) -> Result<Forward, NnError> {
        let batch = x.shape().first().copied().unwrap_or(0);
        let mut want = vec![batch];
        want.extend(&self.spec.input);
        if x.shape() != want.as_slice() {
            return Err(NnError::Shape {
                layer: 0,
                kind: self.spec.layers.first().map_or(LayerKind::Dense, |l| l.kind),
                expected: format!("batched input {want:?}"),
                actual: x.shape().to_vec(),
            });
        }
        let mut h = x.clone();
        let mut running = Vec::new();
        let chan = |t: &Tensor| {
            let mut s = vec![1; t.shape().len()];
            s[1] = t.shape()[1];
            s
        };
        for (i, layer) in self.spec.layers.iter().enumerate() {
            h = match layer.kind {
                LayerKind::Dense => {
                    let flat = h.reshape(&[batch, self.in_features(i)])?;
                    flat.matmul(params.get(&self.name(i, "w"))?)?
                }
                LayerKind::Conv => h.conv2d(params.get(&self.name(i, "w"))?, layer.stride, layer.padding)?,
                LayerKind::ConvTranspose => h.conv_transpose2d(
                    params.get(&self.name(i, "w"))?,
                    layer.stride,
                    layer.padding,
                    layer.output_padding,
                )?,
                LayerKind::MaxPool => h.max_pool2d(layer.kernel, layer.stride)?,
            };
            if layer.has_weights() {
                if layer.norm {
                    let (y, stats) = self.batch_norm(i, &h, params, store, train)?;
                    h = y;
                    running.extend(stats);
                } else {
                    let b = params.get(&self.name(i, "b"))?.reshape(&chan(&h))?;
                    h = h.add_bcast(&b)?;
                }
            }
            if layer.kind == LayerKind::Dense {
                if let Some(r) = layer.reshape {
                    h = h.reshape(&[batch, r[0], r[1], r[2]])?;
                }
            }
            h = match layer.activation {
                Activation::Identity => h,
                Activation::Relu => h.relu(),
                Activation::LeakyRelu => h.leaky_relu(self.spec.leaky_slope),
                Activation::Tanh => h.tanh(),
                Activation::Sigmoid => h.sigmoid(),
            };
        }
        Ok(Forward { out: h, running })
    }

    /// Normalization over every axis except 1 (features or channels).
    fn batch_norm(
        &self,
        i: usize,
        x: &Tensor,
        params: &BoundParams,
        store: &ParameterStore,
        train: bool,
    ) -> Result<(Tensor, Vec<(String, Array)>), NnError> {
        let c = x.shape()[1];
        let mut stat = vec![1; x.shape().len()];
        stat[1] = c;
        let gamma = params.get(&self.name(i, "gamma"))?.reshape(&stat)?;
        let beta = params.get(&self.name(i, "beta"))?.reshape(&stat)?;
        let (mean_name, var_name) = (self.name(i, "rmean"), self.name(i, "rvar"));
        let buffer = |name: &str| store.buffer(name).cloned().ok_or_else(|| NnError::MissingBuffer(name.to_string()));
        if train {
            let n = (x.numel() / c) as f64;
            let mean = x.sum_to(&stat)?.scale(1.0 / n);
            let centered = x.sub(&mean.broadcast_to(x.shape())?)?;
            let var = centered.square().sum_to(&stat)?.scale(1.0 / n);
            let y = centered
                .mul_bcast(&var.add_scalar(BN_EPS).powf(-0.5))?
                .mul_bcast(&gamma)?
                .add_bcast(&beta)?;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let blend = |old: &Array, new: &[f64], scale: f64| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(o, v)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * v * scale)
                    .collect();
                Array::new(vec![c], data).expect("channel sized")
            };
            let rmean = blend(&buffer(&mean_name)?, mean.value().data(), 1.0);
            let rvar = blend(&buffer(&var_name)?, var.value().data(), unbias);
            Ok((y, vec![(mean_name, rmean), (var_name, rvar)]))
        } else {
            let rmean = buffer(&mean_name)?;
            let inv = buffer(&var_name)?.map(|v| 1.0 / (v + BN_EPS).sqrt());
            let mean = Tensor::constant(rmean.reshape(&stat)?);
            let inv = Tensor::constant(inv.reshape(&stat)?);
            let y = x.sub(&mean.broadcast_to(x.shape())?)?.mul_bcast(&inv)?.mul_bcast(&gamma)?.add_bcast(&beta)?;
            Ok((y, Vec::new()))
        }
    }

    /// Names of this network's normalization layers, for introspection.
    pub fn norm_layers(&self) -> Vec<usize> {
        (0..self.spec.layers.len()).filter(|&i| self.spec.layers[i].norm).collect()
    }
}

/// Writes running statistics produced by a training-mode forward pass.
pub fn apply_running(store: &mut ParameterStore, running: Vec<(String, Array)>) {
    for (name, value) in running {
        if let Some(slot) = store.buffer_mut(&name) {
            *slot = value;
        }
    }
}
