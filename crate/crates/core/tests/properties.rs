mod common;

use common::small_model;
use proptest::prelude::*;
use qsfm_core::auxiliary::{avg_rank, matrix_rank, RankTolerance};
use qsfm_core::dataset::ProbeSet;
use qsfm_core::fixtures::{random_images, Builder};
use qsfm_core::inference::{capture_activation, forward, forward_capture};
use qsfm_core::metrics::{count_params, CostConvention};
use qsfm_core::model::{identify_prune_blocks, validate, Model, Op, Padding};
use qsfm_core::pruner::{plan_channel_deletion, prune_block, DeleteSet};
use qsfm_core::similarity::{image_pair_scores, pairwise_similarity, SimilarityMeasure};
use qsfm_core::tensor::{Map2, Shape, Tensor3};

/// (out channels, kernel, stride, same padding, depthwise follow-up)
type LayerSpec = (usize, usize, usize, bool, bool);

fn chain(input: Shape, specs: &[LayerSpec], seed: u64) -> Option<Model> {
    let mut b = Builder::new("chain", input, 4, seed);
    let mut x: Option<usize> = None;
    let mut cin = input.channels;
    for (i, &(cout, k, s, same, dw)) in specs.iter().enumerate() {
        let c = b.conv(&format!("c{i}"), x, cin, cout, k, s, i % 2 == 0);
        if !same {
            if let Op::Conv2D(conv) = &mut b.model.layers[c].op {
                conv.padding = Padding::Valid;
            }
        }
        let bn = b.batch_norm(&format!("bn{i}"), c, cout);
        let r = b.relu(&format!("r{i}"), bn, None);
        x = Some(if dw { b.depthwise(&format!("dw{i}"), r, cout, 3, 1) } else { r });
        cin = cout;
    }
    let f = b.flatten("flatten", x?);
    let shapes = b.model.shapes().ok()?;
    let feats = shapes.last()?.numel();
    b.dense("fc", f, feats, 4);
    Some(b.finish())
}

fn specs() -> impl Strategy<Value = Vec<LayerSpec>> {
    prop::collection::vec((1usize..5, 1usize..4, 1usize..3, any::<bool>(), any::<bool>()), 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn validating_models_never_shape_fault(specs in specs(), hw in 5usize..10, seed in any::<u64>()) {
        let input = Shape::new(2, hw, hw);
        if let Some(m) = chain(input, &specs, seed) {
            if validate(&m).is_empty() {
                let img = &random_images(1, input, seed)[0];
                prop_assert!(forward(&m, img).is_ok());
            }
        }
    }

    #[test]
    fn blocks_partition_convolutions(specs in specs(), seed in any::<u64>()) {
        if let Some(m) = chain(Shape::new(2, 9, 9), &specs, seed) {
            let blocks = identify_prune_blocks(&m);
            let convs: Vec<usize> = (0..m.layers.len()).filter(|&i| m.layers[i].kind().is_conv()).collect();
            let mut covered: Vec<usize> = blocks.iter().map(|b| b.conv).collect();
            covered.sort_unstable();
            prop_assert_eq!(covered, convs);
            let mut all: Vec<usize> = blocks.iter().flat_map(|b| b.layers()).collect();
            let n = all.len();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), n);
        }
    }

    #[test]
    fn pruning_is_sound_and_strictly_cheaper(specs in specs(), seed in any::<u64>(), pick in any::<u64>()) {
        let Some(m) = chain(Shape::new(2, 9, 9), &specs, seed) else { return Ok(()) };
        prop_assume!(validate(&m).is_empty());
        let img = &random_images(1, m.input, seed)[0];
        for block in identify_prune_blocks(&m) {
            if plan_channel_deletion(&m, &block).is_err() {
                continue;
            }
            let n = m.shapes().unwrap()[block.capture].channels;
            if n < 2 {
                continue;
            }
            let k = 1 + (pick as usize) % (n - 1);
            let idx: Vec<usize> = (0..k).map(|i| (i * 7 + pick as usize) % n).collect();
            let del = DeleteSet::from_indices(block.conv, n, &idx).unwrap();
            let p = prune_block(&m, &block, &del).unwrap();
            prop_assert!(validate(&p).is_empty());
            prop_assert!(forward(&p, img).is_ok());
            let conv = CostConvention::default();
            let (a, b) = (count_params(&m, conv).unwrap(), count_params(&p, conv).unwrap());
            prop_assert!(b.params < a.params && b.flops < a.flops);
        }
    }

    #[test]
    fn bias_free_conv_is_linear(scale in prop_oneof![Just(0.5f32), Just(2.0), Just(-3.0)], seed in any::<u64>()) {
        let mut b = Builder::new("lin", Shape::new(3, 7, 7), 4, seed);
        let c = b.conv("c", None, 3, 4, 3, 2, false);
        let f = b.flatten("f", c);
        b.dense("fc", f, 4 * 16, 4);
        let m = b.finish();
        let img = &random_images(1, m.input, seed)[0];
        let y = capture_activation(&m, img, c).unwrap();
        let ys = capture_activation(&m, &img.scale(scale), c).unwrap();
        let peak = y.data.iter().fold(0.0f32, |m, v| m.max(v.abs())) * scale.abs();
        for (a, b) in y.data.iter().zip(&ys.data) {
            prop_assert!((a * scale - b).abs() <= 1e-5 * peak);
        }
    }

    #[test]
    fn capture_does_not_perturb_logits(seed in any::<u64>(), layer in 0usize..13) {
        let m = small_model(seed);
        let img = &random_images(1, m.input, seed ^ 1)[0];
        let (logits, _) = forward_capture(&m, img, layer).unwrap();
        let plain = forward(&m, img).unwrap();
        prop_assert_eq!(
            logits.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            plain.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn depthwise_channels_are_independent(seed in any::<u64>(), c in 0usize..5, delta in 0.1f32..5.0) {
        let mut b = Builder::new("dw", Shape::new(5, 6, 6), 4, seed);
        let d = b.model.push("dw", vec![], Op::AvgPool(qsfm_core::model::Pool::window(1, 1)));
        let dw = b.depthwise("dw_conv", d, 5, 3, 1);
        let f = b.flatten("f", dw);
        b.dense("fc", f, 5 * 36, 4);
        let m = b.finish();
        let img = random_images(1, m.input, seed).pop().unwrap();
        let mut bumped = img.clone();
        for v in bumped.plane_mut(c) {
            *v += delta;
        }
        let (a, b) = (capture_activation(&m, &img, dw).unwrap(), capture_activation(&m, &bumped, dw).unwrap());
        for ch in 0..5 {
            if ch != c {
                prop_assert_eq!(a.plane(ch), b.plane(ch));
            }
        }
        prop_assert_ne!(a.plane(c), b.plane(c));
    }

    #[test]
    fn same_padding_keeps_extent(k in prop_oneof![Just(1usize), Just(3), Just(5), Just(7)], h in 1usize..12, w in 1usize..12) {
        prop_assert_eq!(Padding::Same.resolve(h, k, 1).map(|r| r.0), Some(h));
        prop_assert_eq!(Padding::Same.resolve(w, k, 1).map(|r| r.0), Some(w));
    }

    #[test]
    fn rank_ignores_scaling(seed in any::<u64>(), c in prop_oneof![Just(0.5f32), Just(2.0), Just(-3.0)]) {
        let img = random_images(1, Shape::new(1, 6, 9), seed).pop().unwrap();
        let mut data = img.data.clone();
        // Make the map rank deficient: row 3 repeats row 0.
        let row0 = data[..9].to_vec();
        data[27..36].copy_from_slice(&row0);
        let scaled: Vec<f32> = data.iter().map(|v| v * c).collect();
        let r = matrix_rank(Map2::new(6, 9, &data), RankTolerance::Default);
        prop_assert_eq!(r, matrix_rank(Map2::new(6, 9, &scaled), RankTolerance::Default));
        prop_assert_eq!(r, 5);
    }
}

#[test]
fn pair_scores_are_exactly_symmetric_and_self_similar() {
    let m = small_model(3);
    let probe = ProbeSet::from_tensors(random_images(3, m.input, 2), "random");
    for block in identify_prune_blocks(&m) {
        for measure in [SimilarityMeasure::ssim(), SimilarityMeasure::neg_euclidean()] {
            let s = pairwise_similarity(&m, &block, &probe, &measure).unwrap();
            for a in 0..s.n {
                for b in 0..s.n {
                    if a != b {
                        assert_eq!(s.get(a, b).to_bits(), s.get(b, a).to_bits());
                    }
                }
            }
        }
        for img in &probe.images {
            let stack = capture_activation(&m, img, block.capture).unwrap();
            let mut doubled = Tensor3::zeros(2, stack.height, stack.width);
            for c in 0..stack.channels {
                if stack.plane(c).iter().all(|&v| v == stack.plane(c)[0]) {
                    continue;
                }
                doubled.plane_mut(0).copy_from_slice(stack.plane(c));
                doubled.plane_mut(1).copy_from_slice(stack.plane(c));
                let v = image_pair_scores(&doubled, &SimilarityMeasure::ssim())[0];
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn averaging_is_linear_over_concatenation() {
    let m = small_model(4);
    let a = ProbeSet::from_tensors(random_images(3, m.input, 10), "a");
    let b = ProbeSet::from_tensors(random_images(5, m.input, 11), "b");
    let both = a.concat(&b);
    let block = identify_prune_blocks(&m)[1];
    for measure in [SimilarityMeasure::ssim(), SimilarityMeasure::neg_euclidean()] {
        let (sa, sb, sab) = (
            pairwise_similarity(&m, &block, &a, &measure).unwrap(),
            pairwise_similarity(&m, &block, &b, &measure).unwrap(),
            pairwise_similarity(&m, &block, &both, &measure).unwrap(),
        );
        for (x, y, v) in sab.pairs() {
            let want = (3.0 * sa.get(x, y) + 5.0 * sb.get(x, y)) / 8.0;
            assert!((v - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }
}

#[test]
fn duplicated_filters_get_equal_ranks() {
    let mut b = Builder::new("dup", Shape::new(3, 10, 10), 4, 1);
    let c = b.conv("c", None, 3, 5, 3, 1, false);
    let r = b.relu("r", c, None);
    let f = b.flatten("f", r);
    b.dense("fc", f, 500, 4);
    let mut m = b.finish();
    if let Op::Conv2D(conv) = &mut m.layers[c].op {
        let src = conv.weight.data[0..27].to_vec();
        conv.weight.data[54..81].copy_from_slice(&src);
    }
    let probe = ProbeSet::from_tensors(random_images(4, m.input, 3), "random");
    let ranks = avg_rank(&m, &identify_prune_blocks(&m)[0], &probe, RankTolerance::Default).unwrap();
    assert_eq!(ranks.ranks[0], ranks.ranks[2]);
}

#[test]
fn channels_that_are_always_zero_prune_exactly() {
    let mut b = Builder::new("zero", Shape::new(3, 8, 8), 4, 2);
    let c1 = b.conv("c1", None, 3, 6, 3, 1, true);
    let bn = b.batch_norm("bn1", c1, 6);
    let r1 = b.relu("r1", bn, None);
    let r2 = b.conv_bn_relu("c2", Some(r1), 6, 5, 3, 1, None);
    let p = b.global_avg_pool("pool", r2);
    let f = b.flatten("f", p);
    b.dense("fc", f, 5, 4);
    let mut m = b.finish();
    if let Op::BatchNorm(n) = &mut m.layers[bn].op {
        n.shift.data[1] = -1e6;
        n.shift.data[4] = -1e6;
    }
    let images = random_images(16, m.input, 4);
    for img in &images {
        let s = capture_activation(&m, img, r1).unwrap();
        assert!(s.plane(1).iter().chain(s.plane(4)).all(|&v| v == 0.0));
    }
    let block = identify_prune_blocks(&m)[0];
    let pruned = prune_block(&m, &block, &DeleteSet::from_indices(c1, 6, &[1, 4]).unwrap()).unwrap();
    for img in &images {
        let (a, b) = (forward(&m, img).unwrap().scores, forward(&pruned, img).unwrap().scores);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}
