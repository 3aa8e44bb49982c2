//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numeric code.
#![allow(dead_code)]

use qsfm_core::fixtures::Builder;
use qsfm_core::model::{Model, Op, Padding};
use qsfm_core::tensor::{Shape, Tensor3};

/// A small network exercising every layer kind, sized so maps are tiny.
pub fn small_model(seed: u64) -> Model {
    let mut b = Builder::new("small", Shape::new(3, 8, 8), 5, seed);
    let r1 = b.conv_bn_relu("c1", None, 3, 4, 3, 1, None);
    let c2 = b.conv("c2_conv", Some(r1), 4, 6, 3, 2, true);
    let bn2 = b.batch_norm("c2_bn", c2, 6);
    let r2 = b.relu("c2_relu", bn2, Some(6.0));
    let dw = b.depthwise("dw_conv", r2, 6, 3, 1);
    let dwb = b.batch_norm("dw_bn", dw, 6);
    let dwr = b.relu("dw_relu", dwb, None);
    let c3 = b.conv("c3_conv", Some(dwr), 6, 6, 1, 1, false);
    let c3b = b.batch_norm("c3_bn", c3, 6);
    let sum = b.add("add", c3b, r2);
    let mp = b.max_pool("pool", sum, 2, 2);
    let flat = b.flatten("flatten", mp);
    b.dense("fc", flat, 6 * 2 * 2, 5);
    b.finish()
}

/// Output size and leading pad, computed from first principles.
fn geometry(padding: Padding, input: usize, k: usize, s: usize) -> (usize, usize) {
    match padding {
        Padding::Valid => ((input - k) / s + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(s);
            let need = ((out - 1) * s + k).saturating_sub(input);
            (out, need / 2)
        }
    }
}

/// Every layer's output, by direct index arithmetic.
pub fn naive_forward_all(model: &Model, input: &Tensor3) -> Vec<Tensor3> {
    let mut x = input.clone();
    if let Some(norm) = &model.normalization {
        for c in 0..x.channels {
            let n = x.height * x.width;
            for v in &mut x.data[c * n..(c + 1) * n] {
                *v = (*v - norm.mean[c]) / norm.std[c];
            }
        }
    }
    let mut outs: Vec<Tensor3> = Vec::new();
    for layer in &model.layers {
        let src: Vec<&Tensor3> = if layer.inputs.is_empty() {
            vec![&x]
        } else {
            layer.inputs.iter().map(|&i| &outs[i]).collect()
        };
        let a = src[0];
        let at = |t: &Tensor3, c: usize, y: usize, xx: usize| t.data[(c * t.height + y) * t.width + xx];
        let out = match &layer.op {
            Op::Conv2D(c) | Op::DepthwiseConv2D(c) => {
                let depthwise = matches!(layer.op, Op::DepthwiseConv2D(_));
                let k = c.kernel;
                let (oh, pt) = geometry(c.padding, a.height, k, c.stride);
                let (ow, pl) = geometry(c.padding, a.width, k, c.stride);
                let cout = c.weight.dims[0];
                let cin = c.weight.dims[1];
                let mut o = Tensor3::zeros(cout, oh, ow);
                for f in 0..cout {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0f64;
                            for ci in 0..cin {
                                let src_c = if depthwise { f } else { ci };
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (y * c.stride + ky) as isize - pt as isize;
                                        let ix = (xx * c.stride + kx) as isize - pl as isize;
                                        if iy < 0 || ix < 0 || iy >= a.height as isize || ix >= a.width as isize {
                                            continue;
                                        }
                                        let w = c.weight.data[((f * cin + ci) * k + ky) * k + kx];
                                        acc += w as f64 * at(a, src_c, iy as usize, ix as usize) as f64;
                                    }
                                }
                            }
                            if let Some(b) = &c.bias {
                                acc += b.data[f] as f64;
                            }
                            o.data[(f * oh + y) * ow + xx] = acc as f32;
                        }
                    }
                }
                o
            }
            Op::BatchNorm(bn) => {
                let mut o = a.clone();
                let n = a.height * a.width;
                for c in 0..a.channels {
                    let inv = 1.0 / (bn.variance.data[c] as f64 + bn.epsilon as f64).sqrt();
                    for v in &mut o.data[c * n..(c + 1) * n] {
                        let z = (*v as f64 - bn.mean.data[c] as f64) * inv;
                        *v = (z * bn.scale.data[c] as f64 + bn.shift.data[c] as f64) as f32;
                    }
                }
                o
            }
            Op::ReLU { cap } => {
                let mut o = a.clone();
                for v in &mut o.data {
                    *v = v.max(0.0);
                    if let Some(cap) = cap {
                        *v = v.min(*cap);
                    }
                }
                o
            }
            Op::Add => {
                let mut o = a.clone();
                for (v, w) in o.data.iter_mut().zip(&src[1].data) {
                    *v += w;
                }
                o
            }
            Op::AvgPool(p) | Op::MaxPool(p) => {
                let max = matches!(layer.op, Op::MaxPool(_));
                let (k, s) = if p.global { (a.height.max(a.width), 1) } else { (p.kernel, p.stride) };
                let (oh, pt, ow, pl) = if p.global {
                    (1, 0, 1, 0)
                } else {
                    let (oh, pt) = geometry(p.padding, a.height, k, s);
                    let (ow, pl) = geometry(p.padding, a.width, k, s);
                    (oh, pt, ow, pl)
                };
                let mut o = Tensor3::zeros(a.channels, oh, ow);
                for c in 0..a.channels {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut vals = Vec::new();
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * s + ky) as isize - pt as isize;
                                    let ix = (xx * s + kx) as isize - pl as isize;
                                    if iy >= 0 && ix >= 0 && iy < a.height as isize && ix < a.width as isize {
                                        vals.push(at(a, c, iy as usize, ix as usize) as f64);
                                    }
                                }
                            }
                            let v = if max {
                                vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                vals.iter().sum::<f64>() / vals.len() as f64
                            };
                            o.data[(c * oh + y) * ow + xx] = v as f32;
                        }
                    }
                }
                o
            }
            Op::Flatten => Tensor3::new(a.data.len(), 1, 1, a.data.clone()),
            Op::Dense(d) => {
                let (out, inp) = (d.weight.dims[0], d.weight.dims[1]);
                let data = (0..out)
                    .map(|j| {
                        let mut acc: f64 = (0..inp)
                            .map(|i| d.weight.data[j * inp + i] as f64 * a.data[i] as f64)
                            .sum();
                        if let Some(b) = &d.bias {
                            acc += b.data[j] as f64;
                        }
                        acc as f32
                    })
                    .collect();
                Tensor3::new(out, 1, 1, data)
            }
            Op::Softmax => {
                let m = a.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let e: Vec<f64> = a.data.iter().map(|&v| ((v - m) as f64).exp()).collect();
                let s: f64 = e.iter().sum();
                Tensor3::new(a.data.len(), 1, 1, e.iter().map(|v| (v / s) as f32).collect())
            }
        };
        outs.push(out);
    }
    outs
}

pub fn naive_logits(model: &Model, input: &Tensor3) -> Vec<f32> {
    naive_forward_all(model, input).pop().unwrap().data
}

/// Whole-map SSIM written out in one pass of explicit sums.
pub fn ssim_oracle(a: &[f32], b: &[f32], d: f64) -> f64 {
    let n = a.len() as f64;
    let mu_a = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mu_b = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var_a = a.iter().map(|&v| (v as f64 - mu_a).powi(2)).sum::<f64>() / n;
    let var_b = b.iter().map(|&v| (v as f64 - mu_b).powi(2)).sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(&x, &y)| (x as f64 - mu_a) * (y as f64 - mu_b)).sum::<f64>() / n;
    let c1 = (0.01 * d).powi(2);
    let c2 = (0.03 * d).powi(2);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

pub fn neg_euclidean_oracle(a: &[f32], b: &[f32]) -> f64 {
    -a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

pub fn range_oracle(data: &[f32]) -> f64 {
    let mut lo = f64::INFINITY;
    for &v in data {
        lo = lo.min(v as f64);
    }
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        hi = hi.max(v as f64);
    }
    let d = hi - lo;
    if d < 1e-12 {
        1e-12
    } else {
        d
    }
}

/// Greedy deletion by literal rescanning: every iteration searches all
/// pairs for the maximum among surviving channels.
pub fn greedy_oracle(n: usize, sim: &dyn Fn(usize, usize) -> f64, aux: &[f64], k: usize) -> Vec<usize> {
    let mut alive = vec![true; n];
    let mut deleted = Vec::new();
    while deleted.len() < k {
        let mut best: Option<(usize, usize)> = None;
        for m in 0..n {
            for j in m + 1..n {
                if !alive[m] || !alive[j] {
                    continue;
                }
                match best {
                    Some((bm, bj)) if sim(bm, bj) >= sim(m, j) => {}
                    _ => best = Some((m, j)),
                }
            }
        }
        let (m, j) = best.expect("pair available");
        let victim = if aux[m] > aux[j] { j } else { m };
        alive[victim] = false;
        deleted.push(victim);
    }
    deleted.sort_unstable();
    deleted
}

/// Lowest-k by stable argsort.
pub fn argsort_oracle(aux: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..aux.len()).collect();
    idx.sort_by(|&a, &b| aux[a].partial_cmp(&aux[b]).unwrap());
    let mut v = idx[..k].to_vec();
    v.sort_unstable();
    v
}

/// Singular values through the eigenvalues of the Gram matrix, found with
/// cyclic Jacobi rotations.
pub fn singular_values_oracle(rows: usize, cols: usize, data: &[f32]) -> Vec<f64> {
    let (p, wide) = if rows <= cols { (rows, true) } else { (cols, false) };
    let q = if wide { cols } else { rows };
    let get = |i: usize, k: usize| -> f64 {
        if wide {
            data[i * cols + k] as f64
        } else {
            data[k * cols + i] as f64
        }
    };
    let mut g = vec![0.0f64; p * p];
    for i in 0..p {
        for j in 0..p {
            g[i * p + j] = (0..q).map(|k| get(i, k) * get(j, k)).sum();
        }
    }
    for _ in 0..100 {
        let off: f64 = (0..p)
            .flat_map(|i| (0..p).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| g[i * p + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for a in 0..p {
            for b in a + 1..p {
                let apq = g[a * p + b];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (g[b * p + b] - g[a * p + a]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..p {
                    let gka = g[k * p + a];
                    let gkb = g[k * p + b];
                    g[k * p + a] = c * gka - s * gkb;
                    g[k * p + b] = s * gka + c * gkb;
                }
                for k in 0..p {
                    let gak = g[a * p + k];
                    let gbk = g[b * p + k];
                    g[a * p + k] = c * gak - s * gbk;
                    g[b * p + k] = s * gak + c * gbk;
                }
            }
        }
    }
    let mut sv: Vec<f64> = (0..p).map(|i| g[i * p + i].max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

pub fn rank_oracle(rows: usize, cols: usize, data: &[f32]) -> usize {
    let sv = singular_values_oracle(rows, cols, data);
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    let tol = rows.max(cols) as f64 * smax * f32::EPSILON as f64;
    sv.iter().filter(|&&s| s > tol).count()
}
