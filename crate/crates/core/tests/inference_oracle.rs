mod common;

use common::{naive_forward_all, naive_logits, small_model};
use qsfm_core::dataset::LabeledImage;
use qsfm_core::fixtures::{random_images, resnet_cifar, Builder, CIFAR_INPUT};
use qsfm_core::inference::{capture_activation, evaluate_accuracy, forward, forward_capture};
use qsfm_core::model::{Op, Padding};
use qsfm_core::tensor::{Shape, Tensor3};
use qsfm_core::Error;

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn small_model_matches_naive_loops() {
    for seed in 0..4 {
        let m = small_model(seed);
        for img in random_images(3, m.input, seed + 100) {
            let got = forward(&m, &img).unwrap();
            let want = naive_logits(&m, &img);
            assert!(max_abs_diff(&got.scores, &want) < 1e-5);
        }
    }
}

#[test]
fn every_capture_point_matches_naive_loops() {
    let m = small_model(9);
    let img = &random_images(1, m.input, 1)[0];
    let all = naive_forward_all(&m, img);
    for (i, want) in all.iter().enumerate() {
        let got = capture_activation(&m, img, i).unwrap();
        assert_eq!(got.shape(), want.shape(), "layer {i}");
        assert!(max_abs_diff(&got.data, &want.data) < 1e-5, "layer {i}");
    }
}

#[test]
fn forward_capture_returns_logits_and_stack() {
    let m = small_model(2);
    let img = &random_images(1, m.input, 3)[0];
    let (logits, stack) = forward_capture(&m, img, 3).unwrap();
    assert_eq!(logits, forward(&m, img).unwrap());
    assert_eq!(stack.layer, 3);
    assert_eq!(stack.maps, capture_activation(&m, img, 3).unwrap());
}

#[test]
fn shallow_resnet_matches_naive_loops() {
    let m = resnet_cifar(8, 10, 4);
    let img = &random_images(1, CIFAR_INPUT, 8)[0];
    let got = forward(&m, img).unwrap();
    assert!(max_abs_diff(&got.scores, &naive_logits(&m, img)) < 1e-5);
}

#[test]
fn valid_padding_and_strides_match_naive_loops() {
    for (k, s, pad) in [(3, 2, Padding::Valid), (2, 2, Padding::Same), (4, 3, Padding::Same), (5, 1, Padding::Valid)] {
        let mut b = Builder::new("geom", Shape::new(2, 11, 9), 3, 7);
        let c = b.conv("c", None, 2, 3, k, s, true);
        if let Op::Conv2D(conv) = &mut b.model.layers[c].op {
            conv.padding = pad;
        }
        let f = b.flatten("f", c);
        let feats = b.model.shapes().unwrap()[f].numel();
        b.dense("fc", f, feats, 3);
        let m = b.finish();
        let img = &random_images(1, m.input, 2)[0];
        let got = forward(&m, img).unwrap();
        assert!(max_abs_diff(&got.scores, &naive_logits(&m, img)) < 1e-5, "k{k} s{s} {pad:?}");
    }
}

#[test]
fn mismatched_input_shape_is_diagnosed() {
    let m = small_model(0);
    let err = forward(&m, &Tensor3::zeros(3, 9, 8)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

/// Global average of channel 0 is `c / 9` for class `c`; the dense layer
/// scores `2 r j / 9 - (j / 9)^2`, maximal at `j = c`.
fn stub_oracle() -> qsfm_core::model::Model {
    let mut b = Builder::new("stub", Shape::new(3, 4, 4), 10, 0);
    let p = b.model.push("pool", vec![], Op::AvgPool(qsfm_core::model::Pool::global()));
    let f = b.flatten("flatten", p);
    let fc = b.dense("fc", f, 3, 10);
    if let Op::Dense(d) = &mut b.model.layers[fc].op {
        for j in 0..10 {
            d.weight.data[j * 3] = 2.0 * j as f32 / 9.0;
            d.weight.data[j * 3 + 1] = 0.0;
            d.weight.data[j * 3 + 2] = 0.0;
            d.bias.as_mut().unwrap().data[j] = -((j as f32 / 9.0).powi(2));
        }
    }
    b.finish()
}

fn stub_data(count: usize) -> Vec<LabeledImage> {
    (0..count)
        .map(|i| {
            let label = i % 10;
            let mut pixels = Tensor3::zeros(3, 4, 4);
            pixels.plane_mut(0).fill(label as f32 / 9.0);
            LabeledImage { pixels, label }
        })
        .collect()
}

#[test]
fn stub_oracle_is_always_right() {
    let acc = evaluate_accuracy(&stub_oracle(), &stub_data(50)).unwrap();
    assert_eq!(acc.top1, 1.0);
    assert_eq!(acc.top5, 1.0);
    assert_eq!(acc.count, 50);
}

#[test]
fn accuracy_matches_per_image_argmax() {
    let m = small_model(5);
    let images = random_images(200, m.input, 21);
    let data: Vec<LabeledImage> = images
        .into_iter()
        .enumerate()
        .map(|(i, pixels)| LabeledImage { pixels, label: (i * 7) % 5 })
        .collect();
    let hits = data
        .iter()
        .filter(|d| {
            let l = naive_logits(&m, &d.pixels);
            let best = (0..l.len()).fold(0, |b, j| if l[j] > l[b] { j } else { b });
            best == d.label
        })
        .count();
    let acc = evaluate_accuracy(&m, &data).unwrap();
    assert_eq!(acc.top1, hits as f64 / 200.0);
}

#[test]
fn empty_evaluation_set_is_rejected() {
    assert!(evaluate_accuracy(&small_model(0), &[]).is_err());
}
