//! The multi-level wavelet CNN.
//!
//! With widths `w[0] = input_channels` and `w[1..=L] = channel_schedule`:
//!
//! * contracting level `l` (1..=L): DWT, then `convs_per_block` conv+ReLU
//!   layers, the first mapping `4 w[l-1] -> w[l]`, the rest `w[l] -> w[l]`;
//! * expanding level `l` (L..=1): `convs_per_block` conv layers, the last
//!   mapping `w[l] -> 4 w[l-1]`, then IWT. For `l > 1` the contracting
//!   output of level `l-1` is added to the result. The last conv of level 1
//!   is linear; every other conv is followed by a ReLU.
//!
//! In residual mode the input image is added to the network output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{self, ConvLayerParams};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::wavelet::{self, SubbandStack};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub levels: usize,
    pub convs_per_block: usize,
    pub channel_schedule: Vec<usize>,
    pub input_channels: usize,
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            convs_per_block: 3,
            channel_schedule: vec![64, 256, 1024],
            input_channels: 1,
            residual: false,
        }
    }
}

/// One conv layer's place in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub relu: bool,
}

impl ModelConfig {
    /// Small configuration used for tests and the scaled experiment.
    pub fn desk() -> Self {
        ModelConfig {
            levels: 2,
            convs_per_block: 2,
            channel_schedule: vec![16, 32],
            input_channels: 1,
            residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.convs_per_block == 0 {
            return Err(Error::Config("convs_per_block must be >= 1".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        if self.channel_schedule.len() != self.levels {
            return Err(Error::Config(format!(
                "channel_schedule has {} entries but levels is {}",
                self.channel_schedule.len(),
                self.levels
            )));
        }
        if self.channel_schedule.contains(&0) {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        let last = *self.channel_schedule.last().expect("levels >= 1");
        if self.channel_schedule.iter().any(|&w| w > last) {
            return Err(Error::Config("the last channel_schedule entry must be the widest".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        if level == 0 {
            self.input_channels
        } else {
            self.channel_schedule[level - 1]
        }
    }

    /// Every conv layer in builder order: contracting levels 1..=L, then
    /// expanding levels L..=1.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(2 * self.levels * self.convs_per_block);
        for l in 1..=self.levels {
            for j in 0..self.convs_per_block {
                let c_in = if j == 0 { 4 * self.width(l - 1) } else { self.width(l) };
                specs.push(LayerSpec {
                    c_in,
                    c_out: self.width(l),
                    relu: true,
                });
            }
        }
        for l in (1..=self.levels).rev() {
            for j in 0..self.convs_per_block {
                let last = j + 1 == self.convs_per_block;
                specs.push(LayerSpec {
                    c_in: self.width(l),
                    c_out: if last { 4 * self.width(l - 1) } else { self.width(l) },
                    relu: !(last && l == 1),
                });
            }
        }
        specs
    }

    pub fn num_params(&self) -> usize {
        self.layer_specs().iter().map(|s| s.c_out * s.c_in * 9 + s.c_out).sum()
    }

    /// Spatial sizes must be divisible by `2^levels`.
    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.input_channels {
            return Err(Error::shape(
                "mwcnn forward",
                format!("{} input channels", self.input_channels),
                shape,
            ));
        }
        let f = 1usize << self.levels;
        if shape.h == 0 || shape.w == 0 || !shape.h.is_multiple_of(f) || !shape.w.is_multiple_of(f) {
            return Err(Error::NotDivisible {
                height: shape.h,
                width: shape.w,
                levels: self.levels,
            });
        }
        Ok(())
    }
}

/// All conv parameters of a network plus the config that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub layers: Vec<ConvLayerParams<T>>,
}

pub type ParamGradients<T = f32> = Vec<ConvLayerParams<T>>;

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_specs()
            .iter()
            .map(|s| ConvLayerParams::zeros(s.c_out, s.c_in))
            .collect();
        Ok(ModelParams { config, layers })
    }

    /// Checks every layer shape against the config.
    pub fn shape_walk(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.layer_specs();
        if specs.len() != self.layers.len() {
            return Err(Error::shape("shape walk", format!("{} layers", specs.len()), self.layers.len()));
        }
        for (i, (spec, layer)) in specs.iter().zip(&self.layers).enumerate() {
            let want = Shape::new(spec.c_out, spec.c_in, 3, 3);
            if layer.weights.shape() != want || layer.bias.len() != spec.c_out {
                return Err(Error::shape(
                    "shape walk",
                    format!("layer {i} {want}"),
                    format!("{} with {} biases", layer.weights.shape(), layer.bias.len()),
                ));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(ConvLayerParams::num_params).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layers: self.layers.iter().map(ConvLayerParams::cast).collect(),
        }
    }

    /// Zeroed gradient buffers shaped like the parameters.
    pub fn zero_grads(&self) -> ParamGradients<T> {
        self.layers.iter().map(|l| ConvLayerParams::zeros(l.c_out(), l.c_in())).collect()
    }
}

/// He-normal weights (variance `2 / fan_in`) and zero biases.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for spec in config.layer_specs() {
        let fan_in = spec.c_in * 9;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let shape = Shape::new(spec.c_out, spec.c_in, 3, 3);
        let weights = Tensor::from_fn(shape, |_| normal.sample(&mut rng) as f32);
        layers.push(ConvLayerParams {
            weights,
            bias: vec![0.0; spec.c_out],
        });
    }
    Ok(ModelParams { config, layers })
}

/// Activations kept by the forward pass for backprop.
struct Trace<T> {
    /// Input of each conv layer.
    inputs: Vec<Tensor<T>>,
    /// Pre-activation output of each conv layer that has a ReLU.
    pre: Vec<Option<Tensor<T>>>,
}

fn run<T: Scalar>(params: &ModelParams<T>, input: &Tensor<T>, mut trace: Option<&mut Trace<T>>) -> Result<Tensor<T>> {
    let cfg = &params.config;
    cfg.check_input(input.shape())?;
    if params.layers.len() != cfg.layer_specs().len() {
        params.shape_walk()?;
    }
    let specs = cfg.layer_specs();
    let mut layer = 0;
    let mut conv = |x: Tensor<T>, trace: &mut Option<&mut Trace<T>>| -> Result<Tensor<T>> {
        let out = ops::conv2d_forward(&x, &params.layers[layer])?;
        let relu = specs[layer].relu;
        layer += 1;
        let y = if relu { ops::relu_forward(&out) } else { out.clone() };
        if let Some(t) = trace.as_deref_mut() {
            t.inputs.push(x);
            t.pre.push(relu.then_some(out));
        }
        Ok(y)
    };

    let mut x = input.clone();
    let mut skips = Vec::with_capacity(cfg.levels);
    for _ in 0..cfg.levels {
        x = wavelet::dwt_forward(&x)?.into_tensor();
        for _ in 0..cfg.convs_per_block {
            x = conv(x, &mut trace)?;
        }
        skips.push(x.clone());
    }
    // the bottleneck output is never added back
    skips.pop();
    for l in (1..=cfg.levels).rev() {
        for _ in 0..cfg.convs_per_block {
            x = conv(x, &mut trace)?;
        }
        x = wavelet::iwt_forward(&SubbandStack::from_tensor(x)?)?;
        if l > 1 {
            let skip = skips.pop().expect("one skip per inner level");
            x = ops::add_forward(&x, &skip)?;
        }
    }
    if cfg.residual {
        x = ops::add_forward(&x, input)?;
    }
    Ok(x)
}

pub fn forward<T: Scalar>(params: &ModelParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    run(params, input, None)
}

/// Gradients of `<grad_output, forward(params, input)>` with respect to every
/// conv layer, in builder order.
pub fn backward<T: Scalar>(params: &ModelParams<T>, input: &Tensor<T>, grad_output: &Tensor<T>) -> Result<ParamGradients<T>> {
    Ok(forward_backward(params, input, |out| {
        if out.shape() != grad_output.shape() {
            return Err(Error::shape("mwcnn backward", out.shape(), grad_output.shape()));
        }
        Ok((T::zero(), grad_output.clone()))
    })?
    .1)
}

/// Runs forward, asks `loss` for a scalar and the output gradient, then
/// backpropagates. Returns the scalar and the parameter gradients.
pub fn forward_backward<T: Scalar>(
    params: &ModelParams<T>,
    input: &Tensor<T>,
    loss: impl FnOnce(&Tensor<T>) -> Result<(T, Tensor<T>)>,
) -> Result<(T, ParamGradients<T>)> {
    let cfg = &params.config;
    let mut trace = Trace {
        inputs: Vec::new(),
        pre: Vec::new(),
    };
    let out = run(params, input, Some(&mut trace))?;
    let (value, mut g) = loss(&out)?;

    let mut grads: ParamGradients<T> = Vec::with_capacity(params.layers.len());
    let mut layer = params.layers.len();
    let mut conv_back = |g: Tensor<T>, grads: &mut ParamGradients<T>| -> Result<Tensor<T>> {
        layer -= 1;
        let g = match &trace.pre[layer] {
            Some(pre) => ops::relu_backward(pre, &g)?,
            None => g,
        };
        let cg = ops::conv2d_backward(&trace.inputs[layer], &params.layers[layer], &g)?;
        grads.push(ConvLayerParams {
            weights: cg.weights,
            bias: cg.bias,
        });
        Ok(cg.input)
    };

    // expanding path, level 1 first; skip gradients land at index l-2
    let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; cfg.levels.saturating_sub(1)];
    for l in 1..=cfg.levels {
        if l > 1 {
            let (to_main, to_skip) = ops::add_backward(&g);
            skip_grads[l - 2] = Some(to_skip);
            g = to_main;
        }
        g = wavelet::iwt_backward(&g)?.into_tensor();
        for _ in 0..cfg.convs_per_block {
            g = conv_back(g, &mut grads)?;
        }
    }
    // contracting path, deepest level first
    for l in (1..=cfg.levels).rev() {
        if l < cfg.levels {
            let extra = skip_grads[l - 1].take().expect("skip gradient recorded");
            g = ops::add_forward(&g, &extra)?;
        }
        for _ in 0..cfg.convs_per_block {
            g = conv_back(g, &mut grads)?;
        }
        g = wavelet::dwt_backward(&SubbandStack::from_tensor(g)?)?;
    }
    grads.reverse();
    Ok((value, grads))
}
