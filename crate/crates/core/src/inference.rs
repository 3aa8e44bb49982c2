//! Single-image forward execution.
//!
//! Every call owns its scratch buffers, so one immutable [`Model`] can be
//! shared by any number of concurrent forward passes.

use rayon::prelude::*;

use crate::dataset::LabeledImage;
use crate::model::{output_shape, BatchNorm, Conv, Dense, Model, Op, Pool};
use crate::tensor::{Shape, Tensor3};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub scores: Vec<f32>,
}

impl Logits {
    /// Index of the largest score; ties go to the lower class index.
    pub fn argmax(&self) -> usize {
        self.top_k(1)[0]
    }

    /// The `k` best classes ordered by descending score, lower index first
    /// on ties.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    }
}

/// One layer's output for one image, `N x X x Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapStack {
    pub layer: usize,
    pub image: usize,
    pub maps: Tensor3,
}

pub fn forward(model: &Model, input: &Tensor3) -> Result<Logits> {
    let run = execute(model, input, None, None)?;
    Ok(Logits {
        scores: run.output.expect("full pass yields output").data,
    })
}

/// Forward pass that also returns the activation produced by layer `capture`.
pub fn forward_capture(
    model: &Model,
    input: &Tensor3,
    capture: usize,
) -> Result<(Logits, FeatureMapStack)> {
    check_capture(model, capture)?;
    let run = execute(model, input, Some(capture), None)?;
    let maps = run.captured.expect("capture layer executed");
    Ok((
        Logits {
            scores: run.output.expect("full pass yields output").data,
        },
        FeatureMapStack {
            layer: capture,
            image: 0,
            maps,
        },
    ))
}

/// Runs only as far as layer `capture` and returns its activation.
pub fn capture_activation(model: &Model, input: &Tensor3, capture: usize) -> Result<Tensor3> {
    check_capture(model, capture)?;
    let run = execute(model, input, Some(capture), Some(capture))?;
    Ok(run.captured.expect("capture layer executed"))
}

fn check_capture(model: &Model, capture: usize) -> Result<()> {
    if capture >= model.layers.len() {
        return Err(Error::Capture(format!(
            "layer {capture} does not exist (model has {} layers)",
            model.layers.len()
        )));
    }
    Ok(())
}

struct Run {
    output: Option<Tensor3>,
    captured: Option<Tensor3>,
}

fn execute(
    model: &Model,
    input: &Tensor3,
    capture: Option<usize>,
    stop_after: Option<usize>,
) -> Result<Run> {
    if input.shape() != model.input {
        return Err(Error::Shape(format!(
            "input is {}, model expects {}",
            input.shape(),
            model.input
        )));
    }
    let n = model.layers.len();
    let mut last_use = vec![0usize; n];
    for (i, layer) in model.layers.iter().enumerate() {
        for &p in &layer.inputs {
            last_use[p] = last_use[p].max(i);
        }
    }
    let stop = stop_after.unwrap_or(n - 1);

    let normalized;
    let source = match &model.normalization {
        Some(norm) => {
            let mut t = input.clone();
            for c in 0..t.channels {
                let (m, s) = (norm.mean[c], norm.std[c]);
                for v in t.plane_mut(c) {
                    *v = (*v - m) / s;
                }
            }
            normalized = t;
            &normalized
        }
        None => input,
    };

    let mut values: Vec<Option<Tensor3>> = vec![None; n];
    let mut captured = None;
    for i in 0..=stop {
        let layer = &model.layers[i];
        let args: Vec<&Tensor3> = if layer.inputs.is_empty() {
            vec![source]
        } else {
            layer
                .inputs
                .iter()
                .map(|&p| {
                    values[p].as_ref().ok_or_else(|| {
                        Error::Shape(format!("layer {i} reads layer {p} before it is computed"))
                    })
                })
                .collect::<Result<_>>()?
        };
        let shapes: Vec<Shape> = args.iter().map(|t| t.shape()).collect();
        let expected = output_shape(&layer.op, &shapes)
            .map_err(|m| Error::Shape(format!("layer {i} ({}): {m}", layer.name)))?;
        let out = apply(&layer.op, &args);
        debug_assert_eq!(out.shape(), expected);
        for &p in &layer.inputs {
            if last_use[p] == i && Some(p) != capture {
                values[p] = None;
            }
        }
        if Some(i) == capture {
            captured = Some(out.clone());
        }
        values[i] = Some(out);
    }
    let output = if stop == n - 1 {
        values[n - 1].take().map(|t| {
            let len = t.data.len();
            Tensor3::new(len, 1, 1, t.data)
        })
    } else {
        None
    };
    Ok(Run { output, captured })
}

fn apply(op: &Op, args: &[&Tensor3]) -> Tensor3 {
    let x = args[0];
    match op {
        Op::Conv2D(c) => conv2d(x, c),
        Op::DepthwiseConv2D(c) => depthwise_conv2d(x, c),
        Op::BatchNorm(bn) => batch_norm(x, bn),
        Op::ReLU { cap } => {
            let cap = cap.unwrap_or(f32::INFINITY);
            let mut t = x.clone();
            for v in &mut t.data {
                *v = v.max(0.0).min(cap);
            }
            t
        }
        Op::Add => {
            let mut t = x.clone();
            for (a, b) in t.data.iter_mut().zip(&args[1].data) {
                *a += *b;
            }
            t
        }
        Op::AvgPool(p) => pool(x, p, false),
        Op::MaxPool(p) => pool(x, p, true),
        Op::Dense(d) => dense(x, d),
        Op::Softmax => {
            let max = x.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exp: Vec<f32> = x.data.iter().map(|v| (v - max).exp()).collect();
            let sum: f32 = exp.iter().sum();
            Tensor3::new(
                x.channels,
                x.height,
                x.width,
                exp.into_iter().map(|e| e / sum).collect(),
            )
        }
        Op::Flatten => Tensor3::new(x.data.len(), 1, 1, x.data.clone()),
    }
}

/// Range of output positions `o` with `o*stride + tap - pad` inside `0..extent`.
fn valid_outputs(out: usize, extent: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let hi = if extent + pad > tap {
        ((extent - 1 + pad - tap) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Accumulates `weight * input_plane` shifted by one kernel tap into `out`.
#[allow(clippy::too_many_arguments)]
fn accumulate_tap(
    out: &mut [f32],
    (oh, ow): (usize, usize),
    inp: &[f32],
    (h, w): (usize, usize),
    (ky, kx): (usize, usize),
    (pt, pl): (usize, usize),
    stride: usize,
    weight: f32,
) {
    let (y0, y1) = valid_outputs(oh, h, stride, ky, pt);
    let (x0, x1) = valid_outputs(ow, w, stride, kx, pl);
    if x0 >= x1 {
        return;
    }
    for oy in y0..y1 {
        let iy = oy * stride + ky - pt;
        let in_row = &inp[iy * w..(iy + 1) * w];
        let out_row = &mut out[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            let ix0 = x0 + kx - pl;
            for (o, i) in out_row[x0..x1].iter_mut().zip(&in_row[ix0..ix0 + (x1 - x0)]) {
                *o += weight * *i;
            }
        } else {
            for (ox, o) in out_row.iter_mut().enumerate().take(x1).skip(x0) {
                *o += weight * in_row[ox * stride + kx - pl];
            }
        }
    }
}

/// Cross-correlation (no kernel flip) of every filter with the input.
pub(crate) fn conv2d(x: &Tensor3, c: &Conv) -> Tensor3 {
    let k = c.kernel;
    let (oh, pt) = c.padding.resolve(x.height, k, c.stride).expect("validated");
    let (ow, pl) = c.padding.resolve(x.width, k, c.stride).expect("validated");
    let n_out = c.out_channels();
    let n_in = c.in_channels();
    let mut out = Tensor3::zeros(n_out, oh, ow);
    for o in 0..n_out {
        let plane = out.plane_mut(o);
        if let Some(b) = &c.bias {
            plane.fill(b.data[o]);
        }
        for ci in 0..n_in {
            let inp = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let w = c.weight.data[((o * n_in + ci) * k + ky) * k + kx];
                    accumulate_tap(
                        plane,
                        (oh, ow),
                        inp,
                        (x.height, x.width),
                        (ky, kx),
                        (pt, pl),
                        c.stride,
                        w,
                    );
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_conv2d(x: &Tensor3, c: &Conv) -> Tensor3 {
    let k = c.kernel;
    let (oh, pt) = c.padding.resolve(x.height, k, c.stride).expect("validated");
    let (ow, pl) = c.padding.resolve(x.width, k, c.stride).expect("validated");
    let n = c.out_channels();
    let mut out = Tensor3::zeros(n, oh, ow);
    for ch in 0..n {
        let plane = out.plane_mut(ch);
        if let Some(b) = &c.bias {
            plane.fill(b.data[ch]);
        }
        let inp = x.plane(ch);
        for ky in 0..k {
            for kx in 0..k {
                let w = c.weight.data[(ch * k + ky) * k + kx];
                accumulate_tap(
                    plane,
                    (oh, ow),
                    inp,
                    (x.height, x.width),
                    (ky, kx),
                    (pt, pl),
                    c.stride,
                    w,
                );
            }
        }
    }
    out
}

fn batch_norm(x: &Tensor3, bn: &BatchNorm) -> Tensor3 {
    let mut t = x.clone();
    for c in 0..t.channels {
        let mean = bn.mean.data[c];
        let denom = (bn.variance.data[c] + bn.epsilon).sqrt();
        let (scale, shift) = (bn.scale.data[c], bn.shift.data[c]);
        for v in t.plane_mut(c) {
            *v = (*v - mean) / denom * scale + shift;
        }
    }
    t
}

/// Pooling; padded positions are excluded from both max and mean.
fn pool(x: &Tensor3, p: &Pool, max: bool) -> Tensor3 {
    if p.global {
        let data = (0..x.channels)
            .map(|c| {
                let plane = x.plane(c);
                if max {
                    plane.iter().copied().fold(f32::NEG_INFINITY, f32::max)
                } else {
                    plane.iter().sum::<f32>() / plane.len() as f32
                }
            })
            .collect();
        return Tensor3::new(x.channels, 1, 1, data);
    }
    let (oh, pt) = p.padding.resolve(x.height, p.kernel, p.stride).expect("validated");
    let (ow, pl) = p.padding.resolve(x.width, p.kernel, p.stride).expect("validated");
    let mut out = Tensor3::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        let inp = x.plane(c);
        let plane = out.plane_mut(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if max { f32::NEG_INFINITY } else { 0.0 };
                let mut count = 0usize;
                for ky in 0..p.kernel {
                    let iy = (oy * p.stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for kx in 0..p.kernel {
                        let ix = (ox * p.stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= x.width as isize {
                            continue;
                        }
                        let v = inp[iy as usize * x.width + ix as usize];
                        if max {
                            acc = acc.max(v);
                        } else {
                            acc += v;
                        }
                        count += 1;
                    }
                }
                plane[oy * ow + ox] = if max { acc } else { acc / count as f32 };
            }
        }
    }
    out
}

fn dense(x: &Tensor3, d: &Dense) -> Tensor3 {
    let n_in = d.in_features();
    let data = (0..d.out_features())
        .map(|j| {
            let row = &d.weight.data[j * n_in..(j + 1) * n_in];
            let dot: f32 = row.iter().zip(&x.data).map(|(w, v)| w * v).sum();
            dot + d.bias.as_ref().map_or(0.0, |b| b.data[j])
        })
        .collect();
    Tensor3::new(d.out_features(), 1, 1, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
    pub count: usize,
}

/// Top-1 and top-5 accuracy; ties between equal logits favor the lower
/// class index.
pub fn evaluate_accuracy(model: &Model, data: &[LabeledImage]) -> Result<Accuracy> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let hits: Vec<(bool, bool)> = data
        .par_iter()
        .map(|img| {
            let logits = forward(model, &img.pixels)?;
            let top = logits.top_k(5);
            Ok((top[0] == img.label, top.contains(&img.label)))
        })
        .collect::<Result<_>>()?;
    let n = data.len() as f64;
    Ok(Accuracy {
        top1: hits.iter().filter(|h| h.0).count() as f64 / n,
        top5: hits.iter().filter(|h| h.1).count() as f64 / n,
        count: data.len(),
    })
}
