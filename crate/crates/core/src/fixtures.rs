//! Random-weight reference architectures for CIFAR-sized inputs.
//!
//! Weights are He-normal, BatchNorm statistics are mildly perturbed around
//! the identity so activations stay in a sensible range. The same seed always
//! produces the same model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::{BatchNorm, Conv, Dense, Model, Normalization, Op, Padding, Pool};
use crate::tensor::{Shape, Tensor3, WeightTensor};

pub const CIFAR_INPUT: Shape = Shape::new(3, 32, 32);

/// Incremental model builder that tracks channel counts.
pub struct Builder {
    pub model: Model,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(name: &str, input: Shape, classes: usize, seed: u64) -> Self {
        Self {
            model: Model::new(name, input, classes),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn inputs(from: Option<usize>) -> Vec<usize> {
        from.map(|i| vec![i]).unwrap_or_default()
    }

    fn normal(&mut self, n: usize, std: f32) -> Vec<f32> {
        let d = Normal::new(0.0f32, std).expect("valid std");
        (0..n).map(|_| d.sample(&mut self.rng)).collect()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        from: Option<usize>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> usize {
        let fan_in = (cin * kernel * kernel) as f32;
        let data = self.normal(cout * cin * kernel * kernel, (2.0 / fan_in).sqrt());
        let bias = bias.then(|| WeightTensor::from_vec(self.normal(cout, 0.05)));
        let op = Op::Conv2D(Conv {
            kernel,
            stride,
            padding: Padding::Same,
            weight: WeightTensor::new(vec![cout, cin, kernel, kernel], data),
            bias,
        });
        self.model.push(name, Self::inputs(from), op)
    }

    pub fn depthwise(&mut self, name: &str, from: usize, channels: usize, kernel: usize, stride: usize) -> usize {
        let fan_in = (kernel * kernel) as f32;
        let data = self.normal(channels * kernel * kernel, (2.0 / fan_in).sqrt());
        let op = Op::DepthwiseConv2D(Conv {
            kernel,
            stride,
            padding: Padding::Same,
            weight: WeightTensor::new(vec![channels, 1, kernel, kernel], data),
            bias: None,
        });
        self.model.push(name, vec![from], op)
    }

    pub fn batch_norm(&mut self, name: &str, from: usize, channels: usize) -> usize {
        let scale: Vec<f32> = (0..channels).map(|_| self.rng.random_range(0.6..1.4)).collect();
        let shift = self.normal(channels, 0.1);
        let mean = self.normal(channels, 0.1);
        let variance: Vec<f32> = (0..channels).map(|_| self.rng.random_range(0.5..1.5)).collect();
        let op = Op::BatchNorm(BatchNorm {
            epsilon: 1e-3,
            scale: WeightTensor::from_vec(scale),
            shift: WeightTensor::from_vec(shift),
            mean: WeightTensor::from_vec(mean),
            variance: WeightTensor::from_vec(variance),
        });
        self.model.push(name, vec![from], op)
    }

    pub fn relu(&mut self, name: &str, from: usize, cap: Option<f32>) -> usize {
        self.model.push(name, vec![from], Op::ReLU { cap })
    }

    pub fn add(&mut self, name: &str, a: usize, b: usize) -> usize {
        self.model.push(name, vec![a, b], Op::Add)
    }

    pub fn max_pool(&mut self, name: &str, from: usize, kernel: usize, stride: usize) -> usize {
        self.model.push(name, vec![from], Op::MaxPool(Pool::window(kernel, stride)))
    }

    pub fn global_avg_pool(&mut self, name: &str, from: usize) -> usize {
        self.model.push(name, vec![from], Op::AvgPool(Pool::global()))
    }

    pub fn flatten(&mut self, name: &str, from: usize) -> usize {
        self.model.push(name, vec![from], Op::Flatten)
    }

    pub fn dense(&mut self, name: &str, from: usize, inputs: usize, outputs: usize) -> usize {
        let data = self.normal(outputs * inputs, (1.0 / inputs as f32).sqrt());
        let bias = WeightTensor::from_vec(self.normal(outputs, 0.01));
        let op = Op::Dense(Dense {
            weight: WeightTensor::new(vec![outputs, inputs], data),
            bias: Some(bias),
        });
        self.model.push(name, vec![from], op)
    }

    /// Conv, BatchNorm and ReLU in sequence; returns the ReLU index.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_bn_relu(
        &mut self,
        prefix: &str,
        from: Option<usize>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        cap: Option<f32>,
    ) -> usize {
        let c = self.conv(&format!("{prefix}_conv"), from, cin, cout, kernel, stride, false);
        let b = self.batch_norm(&format!("{prefix}_bn"), c, cout);
        self.relu(&format!("{prefix}_relu"), b, cap)
    }

    pub fn finish(self) -> Model {
        self.model
    }
}

fn cifar_normalization() -> Normalization {
    Normalization {
        mean: vec![0.4914, 0.4822, 0.4465],
        std: vec![0.2470, 0.2435, 0.2616],
    }
}

/// CIFAR ResNet of depth `6n + 2` with stage widths 16/32/64. Shortcuts that
/// change shape use a 1x1 projection convolution with BatchNorm.
pub fn resnet_cifar(depth: usize, classes: usize, seed: u64) -> Model {
    assert!(depth >= 8 && (depth - 2).is_multiple_of(6), "depth must be 6n + 2");
    let n = (depth - 2) / 6;
    let mut b = Builder::new(&format!("resnet{depth}-cifar"), CIFAR_INPUT, classes, seed);
    let mut x = b.conv_bn_relu("stem", None, 3, 16, 3, 1, None);
    let mut cin = 16;
    for (stage, width) in [16usize, 32, 64].into_iter().enumerate() {
        for block in 0..n {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let p = format!("s{}b{}", stage + 1, block + 1);
            let h = b.conv_bn_relu(&format!("{p}_1"), Some(x), cin, width, 3, stride, None);
            let c2 = b.conv(&format!("{p}_2_conv"), Some(h), width, width, 3, 1, false);
            let bn2 = b.batch_norm(&format!("{p}_2_bn"), c2, width);
            let shortcut = if stride != 1 || cin != width {
                let c = b.conv(&format!("{p}_proj_conv"), Some(x), cin, width, 1, stride, false);
                b.batch_norm(&format!("{p}_proj_bn"), c, width)
            } else {
                x
            };
            let sum = b.add(&format!("{p}_add"), bn2, shortcut);
            x = b.relu(&format!("{p}_out"), sum, None);
            cin = width;
        }
    }
    let pool = b.global_avg_pool("pool", x);
    let flat = b.flatten("flatten", pool);
    b.dense("fc", flat, 64, classes);
    let mut m = b.finish();
    m.normalization = Some(cifar_normalization());
    m.notes = Some("projection shortcuts (1x1 conv + BN) where shape changes".into());
    m
}

pub fn resnet56(seed: u64) -> Model {
    resnet_cifar(56, 10, seed)
}

/// (expansion, output channels, repeats, first stride)
const MOBILENET_V2_CIFAR: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 1),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

/// MobileNetV2 adapted to 32x32 inputs: stride-1 stem and second stage,
/// identity residuals only where shape is preserved, ReLU6 activations.
pub fn mobilenet_v2_cifar(classes: usize, seed: u64) -> Model {
    let relu6 = Some(6.0);
    let mut b = Builder::new("mobilenetv2-cifar", CIFAR_INPUT, classes, seed);
    let mut x = b.conv_bn_relu("stem", None, 3, 32, 3, 1, relu6);
    let mut cin = 32;
    let mut index = 0;
    for (t, c, repeats, first_stride) in MOBILENET_V2_CIFAR {
        for r in 0..repeats {
            index += 1;
            let stride = if r == 0 { first_stride } else { 1 };
            let p = format!("b{index}");
            let hidden = cin * t;
            let expanded = if t == 1 {
                x
            } else {
                b.conv_bn_relu(&format!("{p}_expand"), Some(x), cin, hidden, 1, 1, relu6)
            };
            let dw = b.depthwise(&format!("{p}_dw_conv"), expanded, hidden, 3, stride);
            let dw_bn = b.batch_norm(&format!("{p}_dw_bn"), dw, hidden);
            let dw_out = b.relu(&format!("{p}_dw_relu"), dw_bn, relu6);
            let proj = b.conv(&format!("{p}_project_conv"), Some(dw_out), hidden, c, 1, 1, false);
            let mut out = b.batch_norm(&format!("{p}_project_bn"), proj, c);
            if stride == 1 && cin == c {
                out = b.add(&format!("{p}_add"), out, x);
            }
            x = out;
            cin = c;
        }
    }
    let head = b.conv_bn_relu("head", Some(x), cin, 1280, 1, 1, relu6);
    let pool = b.global_avg_pool("pool", head);
    let flat = b.flatten("flatten", pool);
    b.dense("fc", flat, 1280, classes);
    let mut m = b.finish();
    m.normalization = Some(cifar_normalization());
    m.notes = Some("CIFAR variant: stem stride 1, stage-2 stride 1, ReLU6 as capped ReLU".into());
    m
}

const VGG16: [usize; 18] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0,
];

/// VGG-16 with BatchNorm for CIFAR: thirteen 3x3 conv blocks, five 2x2 max
/// pools and a single 512-to-classes dense head.
pub fn vgg16_cifar(classes: usize, seed: u64) -> Model {
    let mut b = Builder::new("vgg16-cifar", CIFAR_INPUT, classes, seed);
    let mut x: Option<usize> = None;
    let mut cin = 3;
    let (mut conv_i, mut pool_i) = (0, 0);
    for width in VGG16 {
        if width == 0 {
            pool_i += 1;
            let from = x.expect("network starts with a convolution");
            x = Some(b.max_pool(&format!("pool{pool_i}"), from, 2, 2));
            continue;
        }
        conv_i += 1;
        x = Some(b.conv_bn_relu(&format!("conv{conv_i}"), x, cin, width, 3, 1, None));
        cin = width;
    }
    let flat = b.flatten("flatten", x.expect("layers exist"));
    b.dense("fc", flat, 512, classes);
    let mut m = b.finish();
    m.normalization = Some(cifar_normalization());
    m.notes = Some("CIFAR head: flatten then one dense layer 512 -> classes".into());
    m
}

/// Uniform `[0, 1)` images, the value range of decoded CIFAR pixels.
pub fn random_images(count: usize, shape: Shape, seed: u64) -> Vec<Tensor3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let data = (0..shape.numel()).map(|_| rng.random::<f32>()).collect();
            Tensor3::new(shape.channels, shape.height, shape.width, data)
        })
        .collect()
}

/// Architecture ids accepted by [`build`].
pub const ARCHITECTURES: [&str; 3] = ["resnet56", "mobilenetv2", "vgg16"];

pub fn build(architecture: &str, seed: u64) -> Option<Model> {
    Some(match architecture {
        "resnet56" => resnet56(seed),
        "mobilenetv2" => mobilenet_v2_cifar(10, seed),
        "vgg16" => vgg16_cifar(10, seed),
        _ => return None,
    })
}
