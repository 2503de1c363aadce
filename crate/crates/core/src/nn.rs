//! Layer definitions, sequential models and forward passes that capture the
//! output of every learnable layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamSlot, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Linear { out_features: usize },
    Conv2d { out_channels: usize, kh: usize, kw: usize },
    Relu,
    Elu { alpha: f64 },
    MaxPool2d { kh: usize, kw: usize },
    Flatten,
}

impl LayerKind {
    pub fn is_learnable(&self) -> bool {
        matches!(self, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::Elu { .. })
    }

    pub fn name(&self) -> String {
        match self {
            LayerKind::Linear { out_features } => format!("Linear({out_features})"),
            LayerKind::Conv2d { out_channels, kh, kw } => format!("Conv2D({out_channels}, {kh}x{kw})"),
            LayerKind::Relu => "ReLU".into(),
            LayerKind::Elu { alpha } => format!("ELU({alpha})"),
            LayerKind::MaxPool2d { kh, kw } => format!("MaxPool2D({kh}, {kw})"),
            LayerKind::Flatten => "Flatten".into(),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize], position: usize) -> Result<Vec<usize>> {
        let mismatch = |expected: &str| Error::LayerShape {
            position,
            kind: self.name(),
            expected: expected.into(),
            actual: input.to_vec(),
        };
        match *self {
            LayerKind::Linear { out_features } => {
                if input.len() != 1 {
                    return Err(mismatch("a flat feature vector"));
                }
                Ok(vec![out_features])
            }
            LayerKind::Conv2d { out_channels, kh, kw } => {
                if input.len() != 3 || input[1] < kh || input[2] < kw {
                    return Err(mismatch(&format!("C x H x W with H >= {kh}, W >= {kw}")));
                }
                Ok(vec![out_channels, input[1] - kh + 1, input[2] - kw + 1])
            }
            LayerKind::MaxPool2d { kh, kw } => {
                if input.len() != 3 || input[1] < kh || input[2] < kw {
                    return Err(mismatch(&format!("C x H x W with H >= {kh}, W >= {kw}")));
                }
                Ok(vec![input[0], input[1] / kh, input[2] / kw])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Relu | LayerKind::Elu { .. } => Ok(input.to_vec()),
        }
    }
}

/// A layer and, for learnable kinds, its weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self { kind, weight: None, bias: None }
    }

    pub fn with_params(kind: LayerKind, weight: Tensor, bias: Tensor) -> Self {
        Self { kind, weight: Some(weight), bias: Some(bias) }
    }
}

/// Where a learnable layer's representation is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CapturePoint {
    /// Raw output of the Linear/Conv2D layer.
    #[default]
    PreActivation,
    /// Output of the activation that immediately follows, when there is one.
    PostActivation,
}

/// Named reference architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// MLP for 2-D inputs: three ELU hidden layers of width 100, one logit.
    A,
    /// CNN for 1 x 28 x 28 images with ten logits.
    B,
}

impl Architecture {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Some(Architecture::A),
            "B" => Some(Architecture::B),
            _ => None,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Architecture::A => "A",
            Architecture::B => "B",
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Architecture::A => vec![2],
            Architecture::B => vec![1, 28, 28],
        }
    }

    pub fn layers(&self) -> Vec<LayerKind> {
        use LayerKind::*;
        match self {
            Architecture::A => vec![
                Linear { out_features: 100 },
                Elu { alpha: 1.0 },
                Linear { out_features: 100 },
                Elu { alpha: 1.0 },
                Linear { out_features: 100 },
                Elu { alpha: 1.0 },
                Linear { out_features: 1 },
            ],
            Architecture::B => vec![
                Conv2d { out_channels: 16, kh: 5, kw: 5 },
                Relu,
                Conv2d { out_channels: 32, kh: 5, kw: 5 },
                Relu,
                MaxPool2d { kh: 2, kw: 2 },
                Conv2d { out_channels: 64, kh: 5, kw: 5 },
                Relu,
                MaxPool2d { kh: 2, kw: 2 },
                Flatten,
                Linear { out_features: 100 },
                Relu,
                Linear { out_features: 10 },
            ],
        }
    }

    pub fn build(&self, seed: u64) -> Result<Model> {
        Model::init(self.input_shape(), &self.layers(), seed)
    }
}

/// Representations of every learnable layer from one forward pass;
/// index `l` holds the output of learnable layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace(Vec<Tensor>);

impl From<Vec<Tensor>> for ActivationTrace {
    fn from(layers: Vec<Tensor>) -> Self {
        ActivationTrace(layers)
    }
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.0[l]
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.0
    }
}

/// An ordered stack of layers with a fixed per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    learnable_index: Vec<usize>,
    /// Per-sample input shape of each layer (plus the final output shape).
    shapes: Vec<Vec<usize>>,
    capture: CapturePoint,
}

impl Model {
    /// Builds a model with freshly initialized parameters: uniform weights in
    /// `+-1/sqrt(fan_in)` and zero biases, drawn from a seeded generator.
    pub fn init(input_shape: Vec<usize>, kinds: &[LayerKind], seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.clone();
        let mut layers = Vec::with_capacity(kinds.len());
        for (position, kind) in kinds.iter().enumerate() {
            let next = kind.output_shape(&shape, position)?;
            let layer = match *kind {
                LayerKind::Linear { out_features } => {
                    let fan_in = shape[0];
                    let w = uniform_tensor(&mut rng, vec![out_features, fan_in], fan_in);
                    LayerSpec::with_params(*kind, w, Tensor::zeros(&[out_features]))
                }
                LayerKind::Conv2d { out_channels, kh, kw } => {
                    let fan_in = shape[0] * kh * kw;
                    let w = uniform_tensor(&mut rng, vec![out_channels, shape[0], kh, kw], fan_in);
                    LayerSpec::with_params(*kind, w, Tensor::zeros(&[out_channels]))
                }
                _ => LayerSpec::new(*kind),
            };
            layers.push(layer);
            shape = next;
        }
        Model::from_layers(input_shape, layers)
    }

    /// Assembles a model from layers that already carry parameters,
    /// validating every shape along the way.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Model> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad input shape {input_shape:?}")));
        }
        let mut shapes = vec![input_shape.clone()];
        let mut learnable_index = Vec::new();
        for (position, layer) in layers.iter().enumerate() {
            let input = shapes.last().expect("non-empty").clone();
            validate_kind(&layer.kind, position)?;
            let out = layer.kind.output_shape(&input, position)?;
            if layer.kind.is_learnable() {
                let (wshape, bshape) = match layer.kind {
                    LayerKind::Linear { out_features } => (vec![out_features, input[0]], vec![out_features]),
                    LayerKind::Conv2d { out_channels, kh, kw } => {
                        (vec![out_channels, input[0], kh, kw], vec![out_channels])
                    }
                    _ => unreachable!(),
                };
                let ok = layer.weight.as_ref().map(|w| w.shape() == wshape.as_slice()) == Some(true)
                    && layer.bias.as_ref().map(|b| b.shape() == bshape.as_slice()) == Some(true);
                if !ok {
                    return Err(Error::LayerShape {
                        position,
                        kind: layer.kind.name(),
                        expected: format!("weight {wshape:?} and bias {bshape:?}"),
                        actual: layer.weight.as_ref().map(|w| w.shape().to_vec()).unwrap_or_default(),
                    });
                }
                learnable_index.push(position);
            } else if layer.weight.is_some() || layer.bias.is_some() {
                return Err(Error::InvalidArgument(format!(
                    "layer {position} ({}) cannot carry parameters",
                    layer.kind.name()
                )));
            }
            shapes.push(out);
        }
        if learnable_index.is_empty() {
            return Err(Error::InvalidArgument("model has no learnable layer".into()));
        }
        Ok(Model { input_shape, layers, learnable_index, shapes, capture: CapturePoint::default() })
    }

    pub fn with_capture(mut self, capture: CapturePoint) -> Self {
        self.capture = capture;
        self
    }

    pub fn capture(&self) -> CapturePoint {
        self.capture
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty")
    }

    pub fn num_outputs(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Number of learnable layers.
    pub fn num_learnable(&self) -> usize {
        self.learnable_index.len()
    }

    /// Layer position of learnable layer `l`.
    pub fn learnable_position(&self, l: usize) -> usize {
        self.learnable_index[l]
    }

    pub fn learnable_index(&self) -> &[usize] {
        &self.learnable_index
    }

    /// Per-sample shape of learnable layer `l`'s captured representation.
    pub fn trace_shape(&self, l: usize) -> &[usize] {
        &self.shapes[self.capture_position(l) + 1]
    }

    fn capture_position(&self, l: usize) -> usize {
        let pos = self.learnable_index[l];
        match self.capture {
            CapturePoint::PostActivation
                if self.layers.get(pos + 1).is_some_and(|n| n.kind.is_activation()) =>
            {
                pos + 1
            }
            _ => pos,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().map(|(_, t)| t.len()).sum()
    }

    /// All parameters in layer order, weight before bias.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.layers.iter().enumerate().flat_map(|(layer, spec)| {
            let w = spec.weight.as_ref().map(|t| (ParamId { layer, slot: ParamSlot::Weight }, t));
            let b = spec.bias.as_ref().map(|t| (ParamId { layer, slot: ParamSlot::Bias }, t));
            w.into_iter().chain(b)
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.layers.iter_mut().enumerate().flat_map(|(layer, spec)| {
            let w = spec.weight.as_mut().map(|t| (ParamId { layer, slot: ParamSlot::Weight }, t));
            let b = spec.bias.as_mut().map(|t| (ParamId { layer, slot: ParamSlot::Bias }, t));
            w.into_iter().chain(b)
        })
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        let spec = self.layers.get(id.layer)?;
        match id.slot {
            ParamSlot::Weight => spec.weight.as_ref(),
            ParamSlot::Bias => spec.bias.as_ref(),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        let spec = self.layers.get_mut(id.layer)?;
        match id.slot {
            ParamSlot::Weight => spec.weight.as_mut(),
            ParamSlot::Bias => spec.bias.as_mut(),
        }
    }

    /// Checks that `batch` is `N x input_shape`.
    pub fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::LayerShape {
                position: 0,
                kind: self.layers[0].kind.name(),
                expected: format!("N x {:?}", self.input_shape),
                actual: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape`, returning the logits node and one
    /// node per learnable layer. Parameters are differentiable only when
    /// `track_params` is set.
    pub fn forward_on<'m>(
        &'m self,
        tape: &mut Tape<'m>,
        input: Var,
        track_params: bool,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.value(input))?;
        let mut h = input;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (layer, spec) in self.layers.iter().enumerate() {
            h = match spec.kind {
                LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                    let w = spec.weight.as_ref().expect("validated");
                    let b = spec.bias.as_ref().expect("validated");
                    let wv = tape.param(w, ParamId { layer, slot: ParamSlot::Weight }, track_params);
                    let bv = tape.param(b, ParamId { layer, slot: ParamSlot::Bias }, track_params);
                    if matches!(spec.kind, LayerKind::Linear { .. }) {
                        tape.linear(h, wv, bv)?
                    } else {
                        tape.conv2d(h, wv, bv)?
                    }
                }
                LayerKind::Relu => tape.relu(h)?,
                LayerKind::Elu { alpha } => tape.elu(h, alpha)?,
                LayerKind::MaxPool2d { kh, kw } => tape.max_pool2d(h, kh, kw)?,
                LayerKind::Flatten => tape.flatten(h)?,
            };
            outputs.push(h);
        }
        let trace = (0..self.num_learnable()).map(|l| outputs[self.capture_position(l)]).collect();
        Ok((h, trace))
    }

    /// Inference forward pass returning logits and the activation trace.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, ActivationTrace)> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let (logits, trace) = self.forward_on(&mut tape, x, false)?;
        let trace = ActivationTrace(trace.iter().map(|&v| tape.value(v).clone()).collect());
        Ok((tape.value(logits).clone(), trace))
    }

    /// Logits only, evaluated in chunks of `chunk` samples.
    pub fn logits(&self, batch: &Tensor, chunk: usize) -> Result<Tensor> {
        self.check_input(batch)?;
        let n = batch.batch();
        let mut data = Vec::with_capacity(n * self.num_outputs());
        for start in (0..n).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(batch.select(&idx), false);
            let (logits, _) = self.forward_on(&mut tape, x, false)?;
            data.extend_from_slice(tape.value(logits).data());
        }
        Tensor::new(vec![n, self.num_outputs()], data)
    }
}

fn validate_kind(kind: &LayerKind, position: usize) -> Result<()> {
    let ok = match *kind {
        LayerKind::Linear { out_features } => out_features > 0,
        LayerKind::Conv2d { out_channels, kh, kw } => out_channels > 0 && kh > 0 && kw > 0,
        LayerKind::MaxPool2d { kh, kw } => kh > 0 && kw > 0,
        LayerKind::Elu { alpha } => alpha.is_finite(),
        LayerKind::Relu | LayerKind::Flatten => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("layer {position}: invalid hyperparameters {}", kind.name())))
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("consistent by construction")
}
