mod common;

use common::{argsort_oracle, greedy_oracle, small_model};
use proptest::prelude::*;
use qsfm_core::auxiliary::{l1_scores, random_scores};
use qsfm_core::dataset::ProbeSet;
use qsfm_core::fixtures::random_images;
use qsfm_core::model::identify_prune_blocks;
use qsfm_core::pruner::{select_baseline, select_delete_set, Decision};
use qsfm_core::similarity::{SimilarityMatrix, SimilarityMeasure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(rng: &mut ChaCha8Rng, n: usize, coarse: bool) -> (Vec<f64>, Vec<f64>) {
    // Coarse values force ties in both the matrix and the auxiliary scores.
    let draw = |rng: &mut ChaCha8Rng| {
        if coarse {
            rng.random_range(0..4) as f64 / 4.0
        } else {
            rng.random::<f64>()
        }
    };
    let mut dense = vec![0.0; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let v = draw(rng);
            dense[a * n + b] = v;
            dense[b * n + a] = v;
        }
    }
    let aux = (0..n).map(|_| draw(rng)).collect();
    (dense, aux)
}

#[test]
fn hundred_random_instances_match_rescan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let n = rng.random_range(2..=8);
        let k = rng.random_range(0..n);
        let (dense, aux) = instance(&mut rng, n, case % 2 == 0);
        let s = SimilarityMatrix::from_dense(0, n, &dense, SimilarityMeasure::ssim());
        let got = select_delete_set(&s, &aux, k).unwrap();
        let want = greedy_oracle(n, &|a, b| dense[a * n + b], &aux, k);
        assert_eq!(got.indices, want, "case {case}");
        assert_eq!(got.replay(), got.indices);
    }
}

#[test]
fn six_channel_example_matches_rescan() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (dense, aux) = instance(&mut rng, 6, false);
    let s = SimilarityMatrix::from_dense(0, 6, &dense, SimilarityMeasure::ssim());
    let got = select_delete_set(&s, &aux, 3).unwrap();
    assert_eq!(got.indices, greedy_oracle(6, &|a, b| dense[a * 6 + b], &aux, 3));
    assert_eq!(got.trace.len(), 3);
}

#[test]
fn equal_auxiliary_deletes_first_member() {
    let dense = [0.0, 0.9, 0.1, 0.9, 0.0, 0.2, 0.1, 0.2, 0.0];
    let s = SimilarityMatrix::from_dense(0, 3, &dense, SimilarityMeasure::ssim());
    let d = select_delete_set(&s, &[1.0, 1.0, 1.0], 1).unwrap();
    assert_eq!(d.indices, vec![0]);
    match &d.trace[0] {
        Decision::Pair { m, n, victim, .. } => assert_eq!((*m, *n, *victim), (0, 1, 0)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn l1_baseline_matches_argsort() {
    let m = small_model(4);
    let probe = ProbeSet::from_tensors(random_images(4, m.input, 9), "random");
    for block in identify_prune_blocks(&m) {
        let aux = l1_scores(&m, &block, &probe).unwrap().values;
        for k in 0..aux.len() {
            let got = select_baseline(block.conv, &aux, k).unwrap();
            assert_eq!(got.indices, argsort_oracle(&aux, k));
        }
    }
}

#[test]
fn random_baseline_is_seeded() {
    let a = random_scores(3, 16, 7).values;
    assert_eq!(a, random_scores(3, 16, 7).values);
    assert_ne!(a, random_scores(3, 16, 8).values);
    assert_ne!(a, random_scores(4, 16, 7).values);
    assert_eq!(select_baseline(3, &a, 5).unwrap().indices, argsort_oracle(&a, 5));
}

#[test]
fn invalid_requests_are_rejected() {
    let s = SimilarityMatrix::from_dense(0, 2, &[0.0, 0.5, 0.5, 0.0], SimilarityMeasure::ssim());
    assert!(select_delete_set(&s, &[1.0, 2.0], 2).is_err());
    assert!(select_delete_set(&s, &[1.0], 1).is_err());
    assert!(select_delete_set(&s, &[1.0, f64::NAN], 1).is_err());
}

proptest! {
    #[test]
    fn greedy_matches_rescan(seed in any::<u64>(), n in 2usize..=8, coarse in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(0..n);
        let (dense, aux) = instance(&mut rng, n, coarse);
        let s = SimilarityMatrix::from_dense(0, n, &dense, SimilarityMeasure::ssim());
        let got = select_delete_set(&s, &aux, k).unwrap();
        prop_assert_eq!(got.len(), k);
        prop_assert_eq!(got.indices, greedy_oracle(n, &|a, b| dense[a * n + b], &aux, k));
    }

    #[test]
    fn baseline_deletes_exactly_the_lowest(aux in prop::collection::vec(0.0f64..10.0, 2..20), pick in 0usize..19) {
        let k = pick % aux.len();
        let got = select_baseline(0, &aux, k).unwrap();
        prop_assert_eq!(got.len(), k);
        let kept_min = (0..aux.len()).filter(|i| !got.indices.contains(i)).map(|i| aux[i]).fold(f64::INFINITY, f64::min);
        prop_assert!(got.indices.iter().all(|&i| aux[i] <= kept_min));
    }
}
