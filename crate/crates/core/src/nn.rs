//! Declarative model specifications and their instantiated parameter sets.
//!
//! A model is an encoder (an ordered list of layers) followed by exactly one
//! dense prediction head, so `forward(x) == head(embed(x))`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv2dGeometry, Gradients, Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    PoolMean {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Activation {
        function: Activation,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default = "default_true")]
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            trainable: true,
        }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        Self::new(LayerKind::Dense {
            in_features,
            out_features,
        })
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn pool_mean(kernel: usize, stride: usize) -> Self {
        Self::new(LayerKind::PoolMean { kernel, stride })
    }

    pub fn flatten() -> Self {
        Self::new(LayerKind::Flatten)
    }

    pub fn activation(function: Activation) -> Self {
        Self::new(LayerKind::Activation { function })
    }

    /// Per-sample output shape, or `None` if `input` is not a valid input.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => (input == [in_features]).then(|| vec![out_features]),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = <[usize; 3]>::try_from(input).ok()?;
                if c != in_channels || stride == 0 || kernel == 0 {
                    return None;
                }
                let out = |s: usize| (s + 2 * padding).checked_sub(kernel).map(|d| d / stride + 1);
                Some(vec![out_channels, out(h)?, out(w)?])
            }
            LayerKind::PoolMean { kernel, stride } => {
                let [c, h, w] = <[usize; 3]>::try_from(input).ok()?;
                if stride == 0 || kernel == 0 {
                    return None;
                }
                let out = |s: usize| s.checked_sub(kernel).map(|d| d / stride + 1);
                Some(vec![c, out(h)?, out(w)?])
            }
            LayerKind::Flatten => Some(vec![input.iter().product()]),
            LayerKind::Activation { .. } => Some(input.to_vec()),
        }
    }

    /// Shapes of this layer's parameters as `(weight, bias)`.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match self.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some((vec![in_features, out_features], vec![out_features])),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::PoolMean { .. } => "pool-mean",
            LayerKind::Flatten => "flatten",
            LayerKind::Activation { .. } => "activation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape (no batch dimension).
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub head: HeadSpec,
}

impl ModelSpec {
    /// Checks that consecutive layer shapes compose and returns the
    /// per-sample shape after each encoder layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "model `{}`: invalid input shape {:?}",
                self.name, self.input_shape
            )));
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).ok_or_else(|| {
                Error::Config(format!(
                    "model `{}`: layer {i} ({}) cannot accept input of shape {shape:?}",
                    self.name,
                    layer.kind_name()
                ))
            })?;
            shapes.push(shape.clone());
        }
        if shape != [self.head.in_features] {
            return Err(Error::Config(format!(
                "model `{}`: head expects {} features, encoder produces {shape:?}",
                self.name, self.head.in_features
            )));
        }
        if self.head.out_features == 0 {
            return Err(Error::Config(format!("model `{}`: head has no outputs", self.name)));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_shapes().map(|_| ())
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_features
    }

    /// Encoder output width.
    pub fn feature_dim(&self) -> usize {
        self.head.in_features
    }

    /// Same encoder with a head resized to `num_classes`.
    pub fn with_classes(&self, num_classes: usize) -> ModelSpec {
        let mut spec = self.clone();
        spec.head.out_features = num_classes;
        spec
    }

    /// Names, shapes and weight-decay flags of every parameter, in storage order.
    pub fn param_layout(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((w, b)) = layer.param_shapes() {
                out.push(ParamInfo {
                    name: format!("encoder.{i}.weight"),
                    shape: w,
                    is_weight: true,
                    encoder: true,
                    trainable: layer.trainable,
                });
                out.push(ParamInfo {
                    name: format!("encoder.{i}.bias"),
                    shape: b,
                    is_weight: false,
                    encoder: true,
                    trainable: layer.trainable,
                });
            }
        }
        out.push(ParamInfo {
            name: "head.weight".into(),
            shape: vec![self.head.in_features, self.head.out_features],
            is_weight: true,
            encoder: false,
            trainable: true,
        });
        out.push(ParamInfo {
            name: "head.bias".into(),
            shape: vec![self.head.out_features],
            is_weight: false,
            encoder: false,
            trainable: true,
        });
        out
    }

    /// Stable 32-bit digest of the canonical JSON form.
    pub fn digest(&self) -> u32 {
        let json = serde_json::to_vec(self).expect("model spec serializes");
        crc32fast::hash(&json)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub is_weight: bool,
    pub encoder: bool,
    pub trainable: bool,
}

pub const PRESETS: [&str; 6] = ["conv-t", "conv-s", "linear", "mlp-s", "patch-s", "teacher-l"];

/// Builds a named preset for the given per-sample input shape and class count.
///
/// `conv-t`, `conv-s` and `patch-s` need image input `[C, H, W]`; `linear`,
/// `mlp-s` and `teacher-l` flatten whatever they receive.
pub fn preset(name: &str, input_shape: &[usize], num_classes: usize, act: Activation) -> Result<ModelSpec> {
    let image = || -> Result<(usize, usize, usize)> {
        match *input_shape {
            [c, h, w] if h == w => Ok((c, h, w)),
            _ => Err(Error::Config(format!(
                "preset `{name}` needs square image input [C, H, W], got {input_shape:?}"
            ))),
        }
    };
    let flat: usize = input_shape.iter().product();
    let a = LayerSpec::activation(act);
    let (layers, features) = match name {
        // Identity encoder: the head alone is a linear classifier on the input.
        "linear" => (vec![LayerSpec::flatten()], flat),
        "mlp-s" => (
            vec![LayerSpec::flatten(), LayerSpec::dense(flat, 64), a.clone()],
            64,
        ),
        "teacher-l" => (
            vec![
                LayerSpec::flatten(),
                LayerSpec::dense(flat, 256),
                a.clone(),
                LayerSpec::dense(256, 256),
                a.clone(),
            ],
            256,
        ),
        "patch-s" => {
            let (c, h, _) = image()?;
            let patch = if h % 4 == 0 { 4 } else { 1 };
            let tokens = (h / patch) * (h / patch);
            (
                vec![
                    LayerSpec::conv2d(c, 16, patch, patch, 0),
                    a.clone(),
                    LayerSpec::flatten(),
                    LayerSpec::dense(16 * tokens, 64),
                    a.clone(),
                ],
                64,
            )
        }
        "conv-t" | "conv-s" => {
            let (c, h, _) = image()?;
            let (c1, c2) = if name == "conv-t" { (8, 16) } else { (16, 32) };
            if h < 2 {
                return Err(Error::Config(format!("preset `{name}` needs images of side >= 2")));
            }
            let mut layers = vec![
                LayerSpec::conv2d(c, c1, 3, 1, 1),
                a.clone(),
                LayerSpec::pool_mean(2, 2),
                LayerSpec::conv2d(c1, c2, 3, 1, 1),
                a.clone(),
                LayerSpec::pool_mean(h / 2, h / 2),
                LayerSpec::flatten(),
            ];
            let features = if name == "conv-s" {
                layers.push(LayerSpec::dense(c2, 64));
                layers.push(a.clone());
                64
            } else {
                c2
            };
            (layers, features)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    let spec = ModelSpec {
        name: name.to_string(),
        input_shape: input_shape.to_vec(),
        layers,
        head: HeadSpec {
            in_features: features,
            out_features: num_classes,
        },
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
    /// Weight decay applies to weights only.
    pub decay: bool,
    pub encoder: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
}

/// Tape handles for a model's parameters, aligned with `Model::params`.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables already on a tape, one per parameter in layout order.
    pub fn from_vars(vars: Vec<Var>) -> Bound {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Draws from `N(0, std^2)` truncated to `[-2 std, 2 std]` by rejection.
///
/// Draws are rounded to `f32`, so a fresh model survives a checkpoint round
/// trip bit for bit.
pub fn sample_truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let x = (z * std) as f32 as f64;
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

fn trunc_normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|x| *x = sample_truncated_normal(rng, std));
    t
}

impl Model {
    /// Weights from a ±2σ truncated normal, zero biases; deterministic in `seed`.
    pub fn init_truncated_normal(spec: &ModelSpec, std: f64, seed: u64) -> Result<Model> {
        if !(std.is_finite() && std > 0.0) {
            return Err(Error::InvalidArgument(format!("init std must be positive, got {std}")));
        }
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .param_layout()
            .into_iter()
            .map(|info| {
                let tensor = if info.is_weight {
                    trunc_normal_tensor(&info.shape, std, &mut rng)
                } else {
                    Tensor::zeros(&info.shape)
                };
                Param {
                    name: info.name,
                    tensor: tensor.with_requires_grad(info.trainable),
                    frozen: !info.trainable,
                    decay: info.is_weight,
                    encoder: info.encoder,
                }
            })
            .collect();
        Ok(Model {
            spec: spec.clone(),
            params,
        })
    }

    /// Builds a model from explicit parameter values in layout order.
    pub fn from_tensors(spec: &ModelSpec, tensors: Vec<(String, Tensor)>) -> Result<Model> {
        spec.validate()?;
        let layout = spec.param_layout();
        if layout.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for `{}`, found {}",
                layout.len(),
                spec.name,
                tensors.len()
            )));
        }
        let params = layout
            .into_iter()
            .zip(tensors)
            .map(|(info, (name, tensor))| {
                if name != info.name || tensor.shape() != info.shape.as_slice() {
                    return Err(Error::LayerShape {
                        layer: info.name,
                        expected: info.shape,
                        found: tensor.shape().to_vec(),
                    });
                }
                Ok(Param {
                    name,
                    tensor: tensor.with_requires_grad(info.trainable),
                    frozen: !info.trainable,
                    decay: info.is_weight,
                    encoder: info.encoder,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Model {
            spec: spec.clone(),
            params,
        })
    }

    /// Encoder weights from a checkpoint, head freshly initialized with
    /// `(std, seed)`. The checkpoint head may have any class count.
    pub fn load_pretrained(spec: &ModelSpec, path: &Path, std: f64, seed: u64) -> Result<Model> {
        let ckpt = checkpoint::read(path)?;
        Model::with_pretrained_encoder(spec, &ckpt.model.named_tensors(), std, seed)
    }

    pub fn with_pretrained_encoder(
        spec: &ModelSpec,
        tensors: &[(String, Tensor)],
        std: f64,
        seed: u64,
    ) -> Result<Model> {
        let mut model = Model::init_truncated_normal(spec, std, seed)?;
        for p in model.params.iter_mut().filter(|p| p.encoder) {
            let Some((_, src)) = tensors.iter().find(|(n, _)| *n == p.name) else {
                return Err(Error::LayerShape {
                    layer: p.name.clone(),
                    expected: p.tensor.shape().to_vec(),
                    found: vec![],
                });
            };
            if src.shape() != p.tensor.shape() {
                return Err(Error::LayerShape {
                    layer: p.name.clone(),
                    expected: p.tensor.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            p.tensor.data_mut().copy_from_slice(src.data());
        }
        let extra = tensors
            .iter()
            .filter(|(n, _)| n.starts_with("encoder."))
            .find(|(n, _)| !model.params.iter().any(|p| p.name == *n));
        if let Some((name, t)) = extra {
            return Err(Error::LayerShape {
                layer: name.clone(),
                expected: vec![],
                found: t.shape().to_vec(),
            });
        }
        for p in model.params.iter_mut() {
            p.frozen = false;
            p.tensor.set_requires_grad(true);
        }
        Ok(model)
    }

    /// Marks every encoder parameter frozen and the head trainable.
    pub fn freeze_encoder(mut self) -> Model {
        for p in self.params.iter_mut() {
            p.frozen = p.encoder;
            p.tensor.set_requires_grad(!p.frozen);
        }
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn frozen_mask(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.frozen).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone().with_requires_grad(false)))
            .collect()
    }

    /// Copy with every parameter rounded to `f32`, i.e. what a checkpoint stores.
    pub fn rounded_to_f32(&self) -> Model {
        let mut m = self.clone();
        m.params.iter_mut().for_each(|p| p.tensor.round_to_f32());
        m
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Records parameters on the tape. Frozen parameters become constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.frozen {
                    tape.constant(&p.tensor)
                } else {
                    tape.leaf(&p.tensor)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds the tape gradients into the parameter grad buffers.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if p.frozen {
                continue;
            }
            if let Some(g) = grads.get(v) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.spec.input_shape);
            return Err(Error::shape("model input", shape, &expected));
        }
        Ok(())
    }

    /// Encoder output on the tape, `[batch, feature_dim]`.
    pub fn embed_on(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        self.check_batch(tape.shape(input))?;
        let batch = tape.shape(input)[0];
        let mut x = input;
        let mut p = 0;
        for layer in &self.spec.layers {
            x = match layer.kind {
                LayerKind::Dense { .. } => {
                    let y = tape.matmul(x, bound.vars[p])?;
                    let y = tape.add_bias(y, bound.vars[p + 1])?;
                    p += 2;
                    y
                }
                LayerKind::Conv2d { stride, padding, .. } => {
                    let y = tape.conv2d(
                        x,
                        bound.vars[p],
                        bound.vars[p + 1],
                        Conv2dGeometry { stride, padding },
                    )?;
                    p += 2;
                    y
                }
                LayerKind::PoolMean { kernel, stride } => tape.mean_pool(x, kernel, stride)?,
                LayerKind::Flatten => {
                    let features = tape.shape(x)[1..].iter().product();
                    tape.reshape(x, vec![batch, features])?
                }
                LayerKind::Activation { function } => match function {
                    Activation::Relu => tape.relu(x)?,
                    Activation::Gelu => tape.gelu(x)?,
                },
            };
        }
        if tape.shape(x).len() != 2 {
            let features = tape.shape(x)[1..].iter().product();
            x = tape.reshape(x, vec![batch, features])?;
        }
        Ok(x)
    }

    pub fn head_on(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let n = bound.vars.len();
        let y = tape.matmul(features, bound.vars[n - 2])?;
        tape.add_bias(y, bound.vars[n - 1])
    }

    pub fn forward_on(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        let features = self.embed_on(tape, bound, input)?;
        self.head_on(tape, bound, features)
    }

    /// Inference-only forward pass.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape);
        let x = tape.constant(batch);
        let y = self.forward_on(&mut tape, &bound, x)?;
        Ok(tape.to_tensor(y))
    }

    /// Encoder features for a batch, before the head.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape);
        let x = tape.constant(batch);
        let y = self.embed_on(&mut tape, &bound, x)?;
        Ok(tape.to_tensor(y))
    }

    /// Applies only the head to precomputed features.
    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape);
        let x = tape.constant(features);
        let y = self.head_on(&mut tape, &bound, x)?;
        Ok(tape.to_tensor(y))
    }

    fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(&p.tensor)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_spec(d: usize, hidden: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            name: "tiny".into(),
            input_shape: vec![d],
            layers: vec![LayerSpec::dense(d, hidden), LayerSpec::activation(Activation::Relu)],
            head: HeadSpec {
                in_features: hidden,
                out_features: classes,
            },
        }
    }

    #[test]
    fn truncated_normal_respects_two_sigma_bound() {
        let spec = preset("teacher-l", &[32], 10, Activation::Relu).unwrap();
        let m = Model::init_truncated_normal(&spec, 0.02, 7).unwrap();
        for p in m.params() {
            if p.decay {
                assert!(p.tensor.data().iter().all(|w| w.abs() <= 0.04));
            } else {
                assert!(p.tensor.data().iter().all(|&b| b == 0.0));
            }
        }
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let spec = preset("mlp-s", &[16], 4, Activation::Relu).unwrap();
        let a = Model::init_truncated_normal(&spec, 0.02, 3).unwrap();
        let b = Model::init_truncated_normal(&spec, 0.02, 3).unwrap();
        let c = Model::init_truncated_normal(&spec, 0.02, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(Model::init_truncated_normal(&spec, 0.0, 3).is_err());
    }

    #[test]
    fn truncated_second_moment_matches_closed_form() {
        // For N(0, s^2) truncated at ±2s, Var = s^2 (1 - 4 phi(2) / (2 Phi(2) - 1)).
        let phi2 = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mass = 0.954_499_736_103_641_6; // erf(2 / sqrt 2)
        let expected = 0.02 * (1.0 - 4.0 * phi2 / mass).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_truncated_normal(&mut rng, 0.02)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!((std - expected).abs() / expected < 0.05, "{std} vs {expected}");
        assert!((expected - 0.017_59).abs() < 1e-5);
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let spec = dense_spec(3, 4, 2);
        let mut m = Model::init_truncated_normal(&spec, 0.02, 0).unwrap();
        m.params_mut().iter_mut().for_each(|p| p.tensor.data_mut().fill(0.0));
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        assert!(m.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_encoder_and_head_reproduce_input() {
        let spec = ModelSpec {
            name: "id".into(),
            input_shape: vec![3],
            layers: vec![LayerSpec::dense(3, 3)],
            head: HeadSpec {
                in_features: 3,
                out_features: 3,
            },
        };
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let tensors = spec
            .param_layout()
            .into_iter()
            .map(|i| {
                let data = if i.is_weight { eye.clone() } else { vec![0.0; 3] };
                (i.name, Tensor::new(i.shape, data).unwrap())
            })
            .collect();
        let m = Model::from_tensors(&spec, tensors).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.5, -2.0, 0.25, 9.0, 0.0, -1.0]).unwrap();
        assert_eq!(m.embed(&x).unwrap().data(), x.data());
        assert_eq!(m.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn two_layer_forward_matches_hand_rolled_matrices() {
        let spec = dense_spec(3, 2, 2);
        let m = Model::init_truncated_normal(&spec, 0.5, 9).unwrap();
        let x = [0.3, -1.0, 2.0];
        let p: Vec<&[f64]> = m.params().iter().map(|p| p.tensor.data()).collect();
        let mut h = [0.0; 2];
        for j in 0..2 {
            h[j] = (0..3).map(|i| x[i] * p[0][i * 2 + j]).sum::<f64>() + p[1][j];
            h[j] = h[j].max(0.0);
        }
        let mut logits = [0.0; 2];
        for j in 0..2 {
            logits[j] = (0..2).map(|i| h[i] * p[2][i * 2 + j]).sum::<f64>() + p[3][j];
        }
        let out = m.forward(&Tensor::new(vec![1, 3], x.to_vec()).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(logits) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_equals_head_of_embed() {
        for name in PRESETS {
            let shape: &[usize] = if name.starts_with("conv") || name == "patch-s" { &[1, 8, 8] } else { &[12] };
            let spec = preset(name, shape, 5, Activation::Gelu).unwrap();
            let m = Model::init_truncated_normal(&spec, 0.3, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let n: usize = shape.iter().product();
            let data = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut batch_shape = vec![3];
            batch_shape.extend_from_slice(shape);
            let x = Tensor::new(batch_shape, data).unwrap();
            let logits = m.forward(&x).unwrap();
            let recomposed = m.head(&m.embed(&x).unwrap()).unwrap();
            assert_eq!(logits, recomposed, "{name}");
        }
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let spec = dense_spec(3, 2, 2);
        let m = Model::init_truncated_normal(&spec, 0.02, 0).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros(&[2, 4])), Err(Error::Shape { .. })));
    }

    #[test]
    fn image_presets_need_images() {
        assert!(matches!(
            preset("conv-t", &[32], 3, Activation::Relu),
            Err(Error::Config(_))
        ));
        assert!(preset("nope", &[32], 3, Activation::Relu).is_err());
    }

    #[test]
    fn spec_validation_catches_broken_chains() {
        let mut spec = dense_spec(4, 3, 2);
        spec.layers.push(LayerSpec::dense(5, 3));
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn freeze_marks_encoder_only() {
        let spec = preset("mlp-s", &[6], 3, Activation::Relu).unwrap();
        let m = Model::init_truncated_normal(&spec, 0.02, 0).unwrap().freeze_encoder();
        for p in m.params() {
            assert_eq!(p.frozen, p.encoder, "{}", p.name);
            assert_eq!(p.tensor.requires_grad(), !p.frozen);
        }
    }

    #[test]
    fn pretrained_encoder_shape_mismatch_names_layer() {
        let wide = preset("mlp-s", &[6], 3, Activation::Relu).unwrap();
        let narrow = preset("mlp-s", &[5], 3, Activation::Relu).unwrap();
        let src = Model::init_truncated_normal(&wide, 0.02, 0).unwrap();
        let err = Model::with_pretrained_encoder(&narrow, &src.named_tensors(), 0.02, 1).unwrap_err();
        match err {
            Error::LayerShape { layer, .. } => assert_eq!(layer, "encoder.1.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
