//! Layer-graph intermediate representation.
//!
//! A [`Model`] is a list of layers in topological order. Layer 0 reads the
//! model input; every other layer names its predecessors by index. Weights are
//! stored output-channels-first, so deleting a filter is removing one leading
//! slice of the kernel tensor.

mod blocks;
mod io;

pub use blocks::{identify_prune_blocks, BlockRole, PruneBlock};
pub use io::{load_model, save_model, MANIFEST_FILE, MANIFEST_FORMAT, TENSOR_DIR};

use std::fmt;

use crate::tensor::{Shape, WeightTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }

    /// Output extent and leading (top/left) padding along one axis.
    /// "same" puts the odd extra pixel on the trailing side.
    pub fn resolve(self, input: usize, kernel: usize, stride: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(input);
                Some((out, total / 2))
            }
            Padding::Valid => {
                if input < kernel {
                    None
                } else {
                    Some(((input - kernel) / stride + 1, 0))
                }
            }
        }
    }
}

impl std::str::FromStr for Padding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(format!("unknown padding mode '{other}'")),
        }
    }
}

/// Convolution parameters, shared by regular and depthwise convolutions.
///
/// Regular: weight `(N_out, N_in, K, K)`. Depthwise: weight `(N, 1, K, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub weight: WeightTensor,
    pub bias: Option<WeightTensor>,
}

impl Conv {
    pub fn out_channels(&self) -> usize {
        self.weight.dims.first().copied().unwrap_or(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims.get(1).copied().unwrap_or(0)
    }

    /// Parameters belonging to filter `j` (kernel slice plus bias entry).
    pub fn filter_params(&self, j: usize) -> impl Iterator<Item = f32> + '_ {
        let n = self.weight.slice_len();
        self.weight.data[j * n..(j + 1) * n]
            .iter()
            .copied()
            .chain(self.bias.iter().map(move |b| b.data[j]))
    }
}

/// Inference-mode batch normalization with stored moving statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub epsilon: f32,
    pub scale: WeightTensor,
    pub shift: WeightTensor,
    pub mean: WeightTensor,
    pub variance: WeightTensor,
}

impl BatchNorm {
    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn tensors(&self) -> [&WeightTensor; 4] {
        [&self.scale, &self.shift, &self.mean, &self.variance]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    /// Pool over the whole spatial extent; `kernel`/`stride` are ignored.
    pub global: bool,
}

impl Pool {
    pub fn global() -> Self {
        Self {
            kernel: 0,
            stride: 1,
            padding: Padding::Valid,
            global: true,
        }
    }

    pub fn window(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: Padding::Valid,
            global: false,
        }
    }
}

/// Fully connected layer, weight `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: WeightTensor,
    pub bias: Option<WeightTensor>,
}

impl Dense {
    pub fn out_features(&self) -> usize {
        self.weight.dims.first().copied().unwrap_or(0)
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims.get(1).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv2D(Conv),
    DepthwiseConv2D(Conv),
    BatchNorm(BatchNorm),
    /// Rectifier, optionally clipped from above (ReLU6 uses `cap = 6`).
    ReLU { cap: Option<f32> },
    Add,
    AvgPool(Pool),
    MaxPool(Pool),
    Dense(Dense),
    Softmax,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2D,
    DepthwiseConv2D,
    BatchNorm,
    ReLU,
    Add,
    AvgPool,
    MaxPool,
    Dense,
    Softmax,
    Flatten,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::Conv2D,
        LayerKind::DepthwiseConv2D,
        LayerKind::BatchNorm,
        LayerKind::ReLU,
        LayerKind::Add,
        LayerKind::AvgPool,
        LayerKind::MaxPool,
        LayerKind::Dense,
        LayerKind::Softmax,
        LayerKind::Flatten,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv2D => "conv2d",
            LayerKind::DepthwiseConv2D => "depthwise_conv2d",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::ReLU => "relu",
            LayerKind::Add => "add",
            LayerKind::AvgPool => "avg_pool",
            LayerKind::MaxPool => "max_pool",
            LayerKind::Dense => "dense",
            LayerKind::Softmax => "softmax",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn parse(s: &str) -> Option<LayerKind> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv2D | LayerKind::DepthwiseConv2D)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Op {
    pub fn kind(&self) -> LayerKind {
        match self {
            Op::Conv2D(_) => LayerKind::Conv2D,
            Op::DepthwiseConv2D(_) => LayerKind::DepthwiseConv2D,
            Op::BatchNorm(_) => LayerKind::BatchNorm,
            Op::ReLU { .. } => LayerKind::ReLU,
            Op::Add => LayerKind::Add,
            Op::AvgPool(_) => LayerKind::AvgPool,
            Op::MaxPool(_) => LayerKind::MaxPool,
            Op::Dense(_) => LayerKind::Dense,
            Op::Softmax => LayerKind::Softmax,
            Op::Flatten => LayerKind::Flatten,
        }
    }

    pub fn conv(&self) -> Option<&Conv> {
        match self {
            Op::Conv2D(c) | Op::DepthwiseConv2D(c) => Some(c),
            _ => None,
        }
    }

    /// All stored tensors of this layer with their manifest role names.
    pub fn tensors(&self) -> Vec<(&'static str, &WeightTensor)> {
        match self {
            Op::Conv2D(c) | Op::DepthwiseConv2D(c) => {
                let mut v = vec![("weight", &c.weight)];
                if let Some(b) = &c.bias {
                    v.push(("bias", b));
                }
                v
            }
            Op::Dense(d) => {
                let mut v = vec![("weight", &d.weight)];
                if let Some(b) = &d.bias {
                    v.push(("bias", b));
                }
                v
            }
            Op::BatchNorm(bn) => vec![
                ("scale", &bn.scale),
                ("shift", &bn.shift),
                ("mean", &bn.mean),
                ("variance", &bn.variance),
            ],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    /// Predecessor layer indices. Empty only for layer 0, which reads the
    /// model input.
    pub inputs: Vec<usize>,
    pub op: Op,
}

impl Layer {
    pub fn new(name: impl Into<String>, inputs: Vec<usize>, op: Op) -> Self {
        Self {
            name: name.into(),
            inputs,
            op,
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.op.kind()
    }
}

/// Per-channel input normalization applied before layer 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub input: Shape,
    pub classes: usize,
    pub normalization: Option<Normalization>,
    /// Free-form provenance notes carried in the manifest.
    pub notes: Option<String>,
    pub layers: Vec<Layer>,
}

impl Model {
    pub fn new(name: impl Into<String>, input: Shape, classes: usize) -> Self {
        Self {
            name: name.into(),
            input,
            classes,
            normalization: None,
            notes: None,
            layers: Vec::new(),
        }
    }

    /// Appends a layer and returns its index.
    pub fn push(&mut self, name: impl Into<String>, inputs: Vec<usize>, op: Op) -> usize {
        self.layers.push(Layer::new(name, inputs, op));
        self.layers.len() - 1
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn output_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Consumers of each layer's output.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            for &p in &layer.inputs {
                if p < out.len() {
                    out[p].push(i);
                }
            }
        }
        out
    }

    /// Output shape of every layer. Fails on the first inconsistency.
    pub fn shapes(&self) -> crate::Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let inputs: Vec<Shape> = if layer.inputs.is_empty() {
                vec![self.input]
            } else {
                layer
                    .inputs
                    .iter()
                    .map(|&p| {
                        shapes.get(p).copied().ok_or_else(|| {
                            crate::Error::layer(i, &layer.name, "predecessor out of order")
                        })
                    })
                    .collect::<crate::Result<_>>()?
            };
            let s = output_shape(&layer.op, &inputs)
                .map_err(|m| crate::Error::layer(i, &layer.name, m))?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Longest input-to-output path counted in weighted layers
    /// (convolutions and dense layers).
    pub fn weighted_depth(&self) -> usize {
        let mut depth = vec![0usize; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            let base = layer.inputs.iter().map(|&p| depth[p]).max().unwrap_or(0);
            let own = matches!(
                layer.kind(),
                LayerKind::Conv2D | LayerKind::DepthwiseConv2D | LayerKind::Dense
            ) as usize;
            depth[i] = base + own;
        }
        depth.last().copied().unwrap_or(0)
    }

    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind() == kind).count()
    }
}

/// Output shape of one op given its input shapes.
pub fn output_shape(op: &Op, inputs: &[Shape]) -> Result<Shape, String> {
    let first = *inputs.first().ok_or("no input")?;
    match op {
        Op::Conv2D(c) | Op::DepthwiseConv2D(c) => {
            if c.stride == 0 {
                return Err("stride must be >= 1".into());
            }
            let depthwise = matches!(op, Op::DepthwiseConv2D(_));
            let expected_in = if depthwise {
                c.out_channels()
            } else {
                c.in_channels()
            };
            if first.channels != expected_in {
                return Err(format!(
                    "expects {} input channels, producer has {}",
                    expected_in, first.channels
                ));
            }
            let (h, _) = c
                .padding
                .resolve(first.height, c.kernel, c.stride)
                .ok_or("kernel larger than input")?;
            let (w, _) = c
                .padding
                .resolve(first.width, c.kernel, c.stride)
                .ok_or("kernel larger than input")?;
            Ok(Shape::new(c.out_channels(), h, w))
        }
        Op::BatchNorm(bn) => {
            if bn.channels() != first.channels {
                return Err(format!(
                    "normalizes {} channels, producer has {}",
                    bn.channels(),
                    first.channels
                ));
            }
            Ok(first)
        }
        Op::ReLU { .. } | Op::Softmax => Ok(first),
        Op::Add => {
            if inputs.len() != 2 {
                return Err("add needs exactly two inputs".into());
            }
            if inputs[0] != inputs[1] {
                return Err(format!(
                    "add operands differ: {} vs {}",
                    inputs[0], inputs[1]
                ));
            }
            Ok(first)
        }
        Op::AvgPool(p) | Op::MaxPool(p) => {
            if p.global {
                return Ok(Shape::new(first.channels, 1, 1));
            }
            if p.stride == 0 || p.kernel == 0 {
                return Err("pool kernel and stride must be >= 1".into());
            }
            let (h, _) = p
                .padding
                .resolve(first.height, p.kernel, p.stride)
                .ok_or("pool window larger than input")?;
            let (w, _) = p
                .padding
                .resolve(first.width, p.kernel, p.stride)
                .ok_or("pool window larger than input")?;
            Ok(Shape::new(first.channels, h, w))
        }
        Op::Flatten => Ok(Shape::new(first.numel(), 1, 1)),
        Op::Dense(d) => {
            if d.in_features() != first.numel() {
                return Err(format!(
                    "expects {} input features, producer has {}",
                    d.in_features(),
                    first.numel()
                ));
            }
            Ok(Shape::new(d.out_features(), 1, 1))
        }
    }
}

/// One broken invariant. `layer` is `None` for model-level rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub layer: Option<usize>,
    pub rule: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(i) => write!(f, "layer {i} [{}]: {}", self.rule, self.detail),
            None => write!(f, "model [{}]: {}", self.rule, self.detail),
        }
    }
}

/// Checks every structural invariant; an empty result means the model is
/// safe to execute.
pub fn validate(model: &Model) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |layer: Option<usize>, rule: &'static str, detail: String| {
        out.push(Violation {
            layer,
            rule,
            detail,
        })
    };

    if model.layers.is_empty() {
        push(None, "graph.empty", "model has no layers".into());
        return out;
    }
    if model.input.numel() == 0 {
        push(None, "input.shape", format!("degenerate input {}", model.input));
    }
    if let Some(norm) = &model.normalization {
        if norm.mean.len() != model.input.channels || norm.std.len() != model.input.channels {
            push(
                None,
                "input.normalization",
                "normalization length differs from input channels".into(),
            );
        }
        if norm.std.iter().any(|s| !s.is_finite() || *s == 0.0)
            || norm.mean.iter().any(|m| !m.is_finite())
        {
            push(
                None,
                "input.normalization",
                "normalization values must be finite with nonzero std".into(),
            );
        }
    }

    let consumers = model.consumers();
    let mut structural_ok = true;
    for (i, layer) in model.layers.iter().enumerate() {
        let l = Some(i);
        if i == 0 {
            if !layer.inputs.is_empty() {
                push(l, "graph.input", "layer 0 must read the model input".into());
                structural_ok = false;
            }
        } else if layer.inputs.is_empty() {
            push(
                l,
                "graph.input",
                "only layer 0 may read the model input".into(),
            );
            structural_ok = false;
        }
        if layer.inputs.iter().any(|&p| p >= i) {
            push(
                l,
                "graph.order",
                "predecessors must precede the layer (DAG in topological order)".into(),
            );
            structural_ok = false;
        }
        let arity = if layer.kind() == LayerKind::Add { 2 } else { 1 };
        if i > 0 && layer.inputs.len() != arity {
            push(
                l,
                "graph.arity",
                format!(
                    "{} takes {arity} input(s), has {}",
                    layer.kind(),
                    layer.inputs.len()
                ),
            );
            structural_ok = false;
        }
        if i + 1 < model.layers.len() && consumers[i].is_empty() {
            push(
                l,
                "graph.output",
                "dangling layer: only the last layer may be unconsumed".into(),
            );
        }
        if model.layers[..i].iter().any(|o| o.name == layer.name) {
            push(l, "layer.name", format!("duplicate name '{}'", layer.name));
        }

        for (role, t) in layer.op.tensors() {
            if !t.is_consistent() {
                push(
                    l,
                    "weights.size",
                    format!(
                        "{role}: dims {:?} need {} values, found {}",
                        t.dims,
                        t.numel(),
                        t.len()
                    ),
                );
            }
            if !t.all_finite() {
                push(l, "weights.finite", format!("{role} has non-finite values"));
            }
        }

        match &layer.op {
            Op::Conv2D(c) | Op::DepthwiseConv2D(c) => {
                let depthwise = layer.kind() == LayerKind::DepthwiseConv2D;
                let dims = &c.weight.dims;
                if dims.len() != 4 || dims[2] != c.kernel || dims[3] != c.kernel {
                    push(
                        l,
                        "conv.dims",
                        format!("weight dims {dims:?} do not match kernel {}", c.kernel),
                    );
                } else if depthwise && dims[1] != 1 {
                    push(
                        l,
                        "depthwise.dims",
                        format!("depthwise weight must be N x 1 x K x K, got {dims:?}"),
                    );
                }
                if c.kernel == 0 || c.stride == 0 {
                    push(l, "conv.params", "kernel and stride must be >= 1".into());
                }
                if let Some(b) = &c.bias {
                    if b.len() != c.out_channels() {
                        push(
                            l,
                            "conv.bias",
                            format!("bias length {} != {}", b.len(), c.out_channels()),
                        );
                    }
                }
            }
            Op::BatchNorm(bn) => {
                let n = bn.channels();
                if bn.tensors().iter().any(|t| t.len() != n) {
                    push(
                        l,
                        "batchnorm.lengths",
                        "scale, shift, mean and variance must have equal length".into(),
                    );
                }
                if bn.variance.data.iter().any(|v| *v < 0.0) {
                    push(l, "batchnorm.variance", "negative moving variance".into());
                }
                if !(bn.epsilon.is_finite() && bn.epsilon >= 0.0) {
                    push(l, "batchnorm.epsilon", "epsilon must be finite".into());
                }
            }
            Op::Dense(d) => {
                if d.weight.dims.len() != 2 {
                    push(
                        l,
                        "dense.dims",
                        format!("dense weight must be 2D, got {:?}", d.weight.dims),
                    );
                }
                if let Some(b) = &d.bias {
                    if b.len() != d.out_features() {
                        push(
                            l,
                            "dense.bias",
                            format!("bias length {} != {}", b.len(), d.out_features()),
                        );
                    }
                }
            }
            _ => {}
        }
    }

    if !structural_ok {
        return out;
    }

    // Shape propagation; a failing layer poisons its descendants so only the
    // root cause is reported.
    let mut shapes: Vec<Option<Shape>> = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let inputs: Option<Vec<Shape>> = if layer.inputs.is_empty() {
            Some(vec![model.input])
        } else {
            layer.inputs.iter().map(|&p| shapes[p]).collect()
        };
        let shape = match inputs {
            None => None,
            Some(inputs) => match output_shape(&layer.op, &inputs) {
                Ok(s) => Some(s),
                Err(detail) => {
                    let rule = match layer.kind() {
                        LayerKind::Add => "add.shapes",
                        LayerKind::Dense => "dense.features",
                        LayerKind::BatchNorm => "batchnorm.channels",
                        LayerKind::DepthwiseConv2D => "depthwise.channels",
                        _ => "channels",
                    };
                    push(Some(i), rule, detail);
                    None
                }
            },
        };
        shapes.push(shape);
    }
    if let Some(Some(last)) = shapes.last() {
        if last.numel() != model.classes {
            push(
                Some(model.layers.len() - 1),
                "output.classes",
                format!(
                    "final output has {} values, model declares {} classes",
                    last.numel(),
                    model.classes
                ),
            );
        }
    }
    out
}
