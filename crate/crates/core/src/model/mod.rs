//! The feed-forward convolutional network: layer specs, parameters, and a
//! cached forward pass with matching backpropagation.

mod spec;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::{self, ConvGeometry, PoolIndices, Scalar, Tensor, TensorError};

pub use spec::{ActShape, LayerSpec, ModelSpec, Tap};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model configuration: {0}")]
    Config(String),
    #[error("model spec line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("reading model spec {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parameter `{0}` is missing from the model state")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {actual:?}, spec requires {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("backward called on a forward pass that kept no cache (use `forward`, not `infer`)")]
    NoCache,
    #[error("backward expects {expected} output gradient(s), got {actual}")]
    GradCount { expected: usize, actual: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

pub fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Trainable parameters, keyed by `layer<i>.weight` / `layer<i>.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub step_count: u64,
}

impl<T: Scalar> ModelState<T> {
    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            step_count: self.step_count,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checks every parameter against the shapes the spec implies.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let expected = param_shapes(spec)?;
        for (name, shape) in &expected {
            let t = self.param(name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(ModelError::Config(format!(
                "state has parameter `{extra}` the spec does not define"
            )));
        }
        Ok(())
    }
}

/// Parameter shapes for the spec's nominal input size.
pub fn param_shapes(spec: &ModelSpec) -> Result<BTreeMap<String, Vec<usize>>> {
    let shapes = spec.validate_nominal()?;
    let mut out = BTreeMap::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let input = if i == 0 {
            ActShape::Map {
                c: spec.input_channels,
                h: spec.input_size.0,
                w: spec.input_size.1,
            }
        } else {
            shapes[i - 1]
        };
        match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                ..
            } => {
                let ActShape::Map { c, .. } = input else {
                    unreachable!("validated")
                };
                out.insert(weight_name(i), vec![out_channels, c, kernel, kernel]);
                out.insert(bias_name(i), vec![out_channels]);
            }
            LayerSpec::Affine { out_features } => {
                out.insert(weight_name(i), vec![out_features, input.numel()]);
                out.insert(bias_name(i), vec![out_features]);
            }
            _ => {}
        }
    }
    Ok(out)
}

/// He-normal weights (std `sqrt(2 / fan_in)`) and zero biases, drawn in
/// layer order from a ChaCha8 stream seeded with `seed`.
pub fn init_params<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ModelState<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, shape) in param_shapes(spec)? {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(shape)?
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z * std)
            })?
        };
        params.insert(name, t);
    }
    Ok(ModelState {
        params,
        step_count: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One globally pooled `[N, D_t]` matrix per contrastive tap.
    Features,
    /// `[N, num_classes]` from the final layer.
    Logits,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    /// Input of every executed layer; `inputs[0]` is the centered batch.
    inputs: Vec<Tensor<T>>,
    pools: Vec<Option<PoolIndices>>,
    /// Pre-pooling shape of each tap output.
    tap_shapes: Vec<Vec<usize>>,
}

/// Result of a forward pass. Holds the activations backward needs unless
/// produced by [`infer`].
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub mode: Mode,
    pub outputs: Vec<Tensor<T>>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Forward<T> {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// The single output of a logits pass, or the first tap's features.
    pub fn output(&self) -> &Tensor<T> {
        &self.outputs[0]
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub input: Tensor<T>,
}

/// Forward pass keeping the cache needed by [`backward`].
pub fn forward<T: Scalar>(
    spec: &ModelSpec,
    state: &ModelState<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<Forward<T>> {
    run(spec, state, input, mode, true)
}

/// Forward pass that discards intermediate activations.
pub fn infer<T: Scalar>(
    spec: &ModelSpec,
    state: &ModelState<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<Forward<T>> {
    run(spec, state, input, mode, false)
}

fn run<T: Scalar>(
    spec: &ModelSpec,
    state: &ModelState<T>,
    input: &Tensor<T>,
    mode: Mode,
    keep: bool,
) -> Result<Forward<T>> {
    let (_, c, h, w) = input.dims4("model input")?;
    spec.validate(c, h, w)?;
    state.check_against(spec)?;

    let depth = match mode {
        Mode::Features => spec.tap_depth() + 1,
        Mode::Logits => spec.layers.len(),
    };
    let mut cur = center(spec, input)?;
    let mut inputs = Vec::new();
    let mut pools = Vec::new();
    let mut layer_outputs: Vec<Option<Tensor<T>>> = vec![None; depth];
    let tapped = |i: usize| mode == Mode::Features && spec.taps.iter().any(|t| t.layer == i);

    for (i, layer) in spec.layers[..depth].iter().enumerate() {
        let (next, pool) = apply(i, layer, state, &cur)?;
        if tapped(i) {
            layer_outputs[i] = Some(next.clone());
        }
        if keep {
            inputs.push(std::mem::replace(&mut cur, next));
            pools.push(pool);
        } else {
            cur = next;
        }
    }

    let (outputs, tap_shapes) = match mode {
        Mode::Logits => (vec![cur], Vec::new()),
        Mode::Features => {
            let mut outs = Vec::with_capacity(spec.taps.len());
            let mut shapes = Vec::with_capacity(spec.taps.len());
            for tap in &spec.taps {
                let t = layer_outputs[tap.layer].as_ref().expect("tap recorded");
                shapes.push(t.shape().to_vec());
                outs.push(pool_features(t)?);
            }
            (outs, shapes)
        }
    };
    Ok(Forward {
        mode,
        outputs,
        cache: keep.then_some(Cache {
            inputs,
            pools,
            tap_shapes,
        }),
    })
}

fn center<T: Scalar>(spec: &ModelSpec, input: &Tensor<T>) -> Result<Tensor<T>> {
    let Some(mean) = &spec.channel_mean else {
        return Ok(input.clone());
    };
    let (_, c, h, w) = input.dims4("model input")?;
    let plane = h * w;
    let mut out = input.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        *v -= T::of(mean[(idx / plane) % c]);
    }
    Ok(out.finite("channel mean")?)
}

fn pool_features<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(match t.rank() {
        4 => tensor::global_avg_pool(t)?,
        _ => t.clone(),
    })
}

fn apply<T: Scalar>(
    index: usize,
    layer: &LayerSpec,
    state: &ModelState<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Option<PoolIndices>)> {
    Ok(match *layer {
        LayerSpec::Conv { stride, pad, .. } => (
            tensor::conv2d(
                x,
                state.param(&weight_name(index))?,
                state.param(&bias_name(index))?,
                ConvGeometry::new(stride, pad),
            )?,
            None,
        ),
        LayerSpec::Relu => (tensor::relu(x)?, None),
        LayerSpec::MaxPool { size, stride } => {
            let (y, idx) = tensor::maxpool2d(x, size, stride)?;
            (y, Some(idx))
        }
        LayerSpec::GlobalAvgPool => (tensor::global_avg_pool(x)?, None),
        LayerSpec::Affine { .. } => (
            tensor::affine(
                x,
                state.param(&weight_name(index))?,
                state.param(&bias_name(index))?,
            )?,
            None,
        ),
    })
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot.take() {
        None => *slot = Some(g),
        Some(mut acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            acc.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b);
            *slot = Some(acc.finite("gradient accumulation")?);
        }
    }
    Ok(())
}

/// Backpropagates `output_grads` (one per output of `fwd`) to every
/// parameter and to the network input.
pub fn backward<T: Scalar>(
    spec: &ModelSpec,
    state: &ModelState<T>,
    fwd: &Forward<T>,
    output_grads: &[Tensor<T>],
) -> Result<Gradients<T>> {
    let cache = fwd.cache.as_ref().ok_or(ModelError::NoCache)?;
    if output_grads.len() != fwd.outputs.len() {
        return Err(ModelError::GradCount {
            expected: fwd.outputs.len(),
            actual: output_grads.len(),
        });
    }
    for (g, out) in output_grads.iter().zip(&fwd.outputs) {
        if g.shape() != out.shape() {
            return Err(ModelError::Config(format!(
                "output gradient shape {:?} does not match output shape {:?}",
                g.shape(),
                out.shape()
            )));
        }
    }
    let depth = cache.inputs.len();
    let mut pending: Vec<Option<Tensor<T>>> = vec![None; depth];
    match fwd.mode {
        Mode::Logits => pending[depth - 1] = Some(output_grads[0].clone()),
        Mode::Features => {
            for ((tap, g), shape) in spec.taps.iter().zip(output_grads).zip(&cache.tap_shapes) {
                let g = if shape.len() == 4 {
                    tensor::global_avg_pool_backward(shape, g)?
                } else {
                    g.clone()
                };
                accumulate(&mut pending[tap.layer], g)?;
            }
        }
    }

    let mut params = BTreeMap::new();
    let mut carry: Option<Tensor<T>> = None;
    for i in (0..depth).rev() {
        if let Some(g) = carry.take() {
            accumulate(&mut pending[i], g)?;
        }
        let x = &cache.inputs[i];
        // The deepest executed layer is always a tap or the head, so every
        // layer below it receives a gradient.
        let g = pending[i]
            .take()
            .expect("gradient reaches every executed layer");
        let gin = match spec.layers[i] {
            LayerSpec::Conv { stride, pad, .. } => {
                let grads = tensor::conv2d_backward(
                    x,
                    state.param(&weight_name(i))?,
                    &g,
                    ConvGeometry::new(stride, pad),
                )?;
                params.insert(weight_name(i), grads.weight);
                params.insert(bias_name(i), grads.bias);
                grads.input
            }
            LayerSpec::Relu => tensor::relu_backward(x, &g)?,
            LayerSpec::MaxPool { .. } => tensor::maxpool2d_backward(
                cache.pools[i].as_ref().expect("pool indices cached"),
                &g,
            )?,
            LayerSpec::GlobalAvgPool => tensor::global_avg_pool_backward(x.shape(), &g)?,
            LayerSpec::Affine { .. } => {
                let grads = tensor::affine_backward(x, state.param(&weight_name(i))?, &g)?;
                params.insert(weight_name(i), grads.weight);
                params.insert(bias_name(i), grads.bias);
                grads.input
            }
        };
        carry = Some(gin);
    }

    // Layers past the deepest tap receive no gradient in feature mode.
    for (name, shape) in param_shapes(spec)? {
        if !params.contains_key(&name) {
            params.insert(name, Tensor::zeros(shape)?);
        }
    }
    Ok(Gradients {
        params,
        input: carry.expect("at least one layer"),
    })
}
