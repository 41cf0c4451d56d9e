//! Small convolutional classifiers split into a feature extractor and a head.
//!
//! The layer list is cut at `split_point`: layers before it form the feature
//! extractor, whose output is the map set `A`; the remaining layers, global
//! average pooling and the dense stack form the classifier head. Both halves
//! share one flat parameter list, so the head can be run on `A` and on a
//! masked copy of `A` with the same weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Input extent as `[channels, height, width]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Number of leading layers that make up the feature extractor.
    pub split_point: usize,
    /// Hidden widths of the dense stack after global pooling (ReLU between).
    #[serde(default)]
    pub head_hidden: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for ModelSpec {
    /// Three 3×3 conv stages (32, 64, 128 channels); the maps after the last
    /// conv's ReLU are `A`; the head is global average pooling plus one
    /// dense layer.
    fn default() -> Self {
        let conv = |channels| LayerSpec::Conv {
            channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let pool = LayerSpec::MaxPool { window: 2, stride: 2 };
        Self {
            input: [3, 32, 32],
            layers: vec![
                conv(32),
                LayerSpec::Relu,
                pool.clone(),
                conv(64),
                LayerSpec::Relu,
                pool,
                conv(128),
                LayerSpec::Relu,
            ],
            split_point: 8,
            head_hidden: Vec::new(),
            num_classes: 10,
            init_seed: 0,
        }
    }
}

/// Shape of one parameter tensor plus its He fan-in (0 for biases).
struct ParamShape {
    shape: Vec<usize>,
    fan_in: usize,
}

impl ModelSpec {
    /// Checks layer geometry and returns the `[C, H, W]` extent after every
    /// layer (index 0 is the input).
    pub fn trace_shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.split_point > self.layers.len() {
            return Err(Error::Config(format!(
                "split_point {} exceeds {} layers",
                self.split_point,
                self.layers.len()
            )));
        }
        if self.num_classes == 0 || self.input.contains(&0) {
            return Err(Error::Config("input extents and num_classes must be positive".into()));
        }
        let mut shapes = vec![self.input];
        let mut cur = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            let [c, h, w] = cur;
            cur = match *layer {
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if channels == 0 || kernel == 0 || stride == 0 || kernel > h + 2 * padding || kernel > w + 2 * padding {
                        return Err(Error::Config(format!("layer {i}: invalid conv on {c}×{h}×{w}")));
                    }
                    [
                        channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ]
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { window, stride } => {
                    if window == 0 || stride == 0 || window > h || window > w {
                        return Err(Error::Config(format!("layer {i}: invalid pool on {c}×{h}×{w}")));
                    }
                    [c, (h - window) / stride + 1, (w - window) / stride + 1]
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// `[N_c, H_a, W_a]` of the feature maps exposed at the split.
    pub fn feature_shape(&self) -> Result<[usize; 3]> {
        Ok(self.trace_shapes()?[self.split_point])
    }

    fn param_shapes(&self) -> Result<Vec<ParamShape>> {
        let shapes = self.trace_shapes()?;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Conv { channels, kernel, .. } = *layer {
                let c_in = shapes[i][0];
                out.push(ParamShape {
                    shape: vec![channels, c_in, kernel, kernel],
                    fan_in: c_in * kernel * kernel,
                });
                out.push(ParamShape {
                    shape: vec![channels],
                    fan_in: 0,
                });
            }
        }
        let mut width = shapes.last().expect("input shape")[0];
        for &next in self.head_hidden.iter().chain(std::iter::once(&self.num_classes)) {
            out.push(ParamShape {
                shape: vec![next, width],
                fan_in: width,
            });
            out.push(ParamShape {
                shape: vec![next],
                fan_in: 0,
            });
            width = next;
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum())
    }
}

/// A model: its spec and a flat parameter list (conv kernel/bias pairs in
/// layer order, then dense weight/bias pairs).
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Tensor>,
}

/// Parameters of a model registered on a tape.
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Model {
    /// He-normal (fan-in) weights, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .param_shapes()?
            .into_iter()
            .map(|p| {
                if p.fan_in == 0 {
                    return Tensor::zeros(&p.shape);
                }
                let normal = Normal::new(0.0f32, (2.0 / p.fan_in as f32).sqrt()).expect("positive std");
                let n = p.shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(p.shape, data).expect("param shape")
            })
            .collect();
        Ok(Self { spec, params })
    }

    /// Initializes with the spec's own `init_seed`.
    pub fn from_spec(spec: ModelSpec) -> Result<Self> {
        let seed = spec.init_seed;
        Self::init(spec, seed)
    }

    pub fn zeroed(spec: ModelSpec) -> Result<Self> {
        let params = spec
            .param_shapes()?
            .into_iter()
            .map(|p| Tensor::zeros(&p.shape))
            .collect();
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s.shape != p.shape())
        {
            return Err(Error::dim("model", "parameter shapes do not match spec"));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundParams> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect::<Result<Vec<_>>>()
            .map(BoundParams)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, c, h, w] if [*c, *h, *w] == self.spec.input => Ok(()),
            _ => Err(Error::dim(
                "forward_features",
                format!("input {shape:?} does not match model input {:?}", self.spec.input),
            )),
        }
    }

    /// Index of the first parameter used by layer `layer`.
    fn conv_param_offset(&self, layer: usize) -> usize {
        2 * self.spec.layers[..layer]
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count()
    }

    fn run_layers(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        mut x: Var,
        range: std::ops::Range<usize>,
    ) -> Result<Var> {
        let mut p = self.conv_param_offset(range.start);
        for layer in &self.spec.layers[range] {
            x = match *layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let y = tape.conv2d(x, params.0[p], stride, padding)?;
                    let y = tape.channel_bias(y, params.0[p + 1])?;
                    p += 2;
                    y
                }
                LayerSpec::Relu => tape.relu(x)?,
                LayerSpec::MaxPool { window, stride } => tape.max_pool2d(x, window, stride)?,
            };
        }
        Ok(x)
    }

    fn run_head(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let mut h = tape.global_avg_pool(x)?;
        let mut p = self.conv_param_offset(self.spec.layers.len());
        let depth = self.spec.head_hidden.len() + 1;
        for i in 0..depth {
            h = tape.dense(h, params.0[p], Some(params.0[p + 1]))?;
            p += 2;
            if i + 1 < depth {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Feature extractor: `x: N×C×H×W → A: N×N_c×H_a×W_a`.
    pub fn forward_features(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        self.run_layers(tape, params, x, 0..self.spec.split_point)
    }

    /// Classifier head: `A → N×num_classes` logits.
    pub fn forward_classifier(&self, tape: &mut Tape, params: &BoundParams, a: Var) -> Result<Var> {
        let [c, h, w] = self.spec.feature_shape()?;
        match *tape.value(a).shape() {
            [_, ac, ah, aw] if [ac, ah, aw] == [c, h, w] => {}
            ref s => {
                return Err(Error::dim(
                    "forward_classifier",
                    format!("maps {s:?} do not match split contract [N, {c}, {h}, {w}]"),
                ))
            }
        }
        let x = self.run_layers(tape, params, a, self.spec.split_point..self.spec.layers.len())?;
        self.run_head(tape, params, x)
    }

    /// The whole network in one pass.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let y = self.run_layers(tape, params, x, 0..self.spec.layers.len())?;
        self.run_head(tape, params, y)
    }

    /// Inference-only logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let y = self.forward(&mut tape, &params, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Inference-only feature maps `A`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let a = self.forward_features(&mut tape, &params, xv)?;
        Ok(tape.value(a).clone())
    }

    /// Inference-only head logits on given maps.
    pub fn classify(&self, a: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let av = tape.constant(a.clone())?;
        let y = self.forward_classifier(&mut tape, &params, av)?;
        Ok(tape.value(y).clone())
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
