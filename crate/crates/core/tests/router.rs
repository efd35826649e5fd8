use proptest::prelude::*;

use uirl::router::{similarity, top_k_indices, topk_reallocate, RouterState};
use uirl::Tensor;

fn scores() -> impl Strategy<Value = (Vec<f32>, usize)> {
    prop::collection::vec(-1.0f32..1.0, 1..12).prop_flat_map(|v| {
        let t = v.len();
        (Just(v), 1..=t)
    })
}

proptest! {
    #[test]
    fn reallocation_is_a_sparse_distribution((s_o, k) in scores()) {
        let out = topk_reallocate(&s_o, k).unwrap();
        prop_assert_eq!(out.mask.iter().filter(|m| **m).count(), k);
        prop_assert!(out.s.iter().all(|v| *v >= 0.0));
        prop_assert!(out.s.iter().zip(&out.mask).all(|(v, m)| *m || *v == 0.0));
        let sum: f32 = out.s.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-5);
    }

    #[test]
    fn kept_entries_dominate_dropped_ones((s_o, k) in scores()) {
        let kept = top_k_indices(&s_o, k);
        let floor = kept.iter().map(|&i| s_o[i]).fold(f32::INFINITY, f32::min);
        for (i, v) in s_o.iter().enumerate() {
            if !kept.contains(&i) {
                prop_assert!(*v <= floor);
            }
        }
    }

    #[test]
    fn positive_scaling_keeps_the_selection((s_o, k) in scores(), c in 0.01f32..100.0) {
        let a = topk_reallocate(&s_o, k).unwrap();
        let scaled: Vec<f32> = s_o.iter().map(|v| v * c).collect();
        let b = topk_reallocate(&scaled, k).unwrap();
        prop_assert_eq!(&a.mask, &b.mask);
        for (x, y) in a.s.iter().zip(&b.s) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn similarity_of_bank_column_is_one() {
    let bank = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let d = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
    assert_eq!(similarity(&d, &bank).unwrap(), vec![0.0, 1.0]);
}

#[test]
fn predictions_are_deterministic_and_bounded() {
    let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let r = RouterState::with_defaults(labels.clone(), 1).unwrap();
    let image = uirl::degradations::gen_clean_image(4, 48, 40).unwrap();
    let a = r.predict_with_crop_correction(&image, 2).unwrap();
    let b = RouterState::with_defaults(labels, 1).unwrap().predict_with_crop_correction(&image, 2).unwrap();
    assert_eq!(a, b);
    assert!(a.s_o.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(a.mask.iter().filter(|m| **m).count(), 2);
}
