mod common;

use common::*;
use proptest::prelude::*;
use weakseg::datamodel::Source;
use weakseg::datasets::{split, DatasetManifest, ManifestEntry};
use weakseg::saliency::{binarize, midlayer_map};
use weakseg::{equivariance_loss, iou, ActivationStack, Mask, RotationOp, SaliencyMap, Split, Tensor3};

fn map_strategy() -> impl Strategy<Value = SaliencyMap> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f64..10.0, h * w)
            .prop_map(move |v| SaliencyMap::new(h, w, v, Source::Midlayer, "p").unwrap())
    })
}

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0u8..2, h * w),
            prop::collection::vec(0u8..2, h * w),
        )
            .prop_map(move |(a, b)| (Mask::from_vec(h, w, a).unwrap(), Mask::from_vec(h, w, b).unwrap()))
    })
}

fn permute(m: &Mask, perm: &[usize]) -> Mask {
    let d: Vec<u8> = perm.iter().map(|&i| m.data()[i]).collect();
    Mask::from_vec(m.height(), m.width(), d).unwrap()
}

proptest! {
    #[test]
    fn binarize_is_scale_invariant(m in map_strategy(), k in 1e-3f64..1e3, tau in 0.0f64..=1.0) {
        let a = binarize(&m, tau).unwrap().mask;
        let b = binarize(&m.scaled(k), tau).unwrap().mask;
        // Scaling can move a value across the threshold only by rounding.
        let thr = tau * m.max();
        for (idx, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            if x != y {
                prop_assert!((m.values()[idx] - thr).abs() <= 1e-12 * thr.max(1.0));
            }
        }
    }

    #[test]
    fn binarize_masks_nest(m in map_strategy(), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = binarize(&m, lo).unwrap().mask;
        let b = binarize(&m, hi).unwrap().mask;
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x >= y));
    }

    #[test]
    fn binarize_tau_one_selects_argmax(m in map_strategy()) {
        let mask = binarize(&m, 1.0).unwrap().mask;
        let max = m.max();
        for (v, b) in m.values().iter().zip(mask.data()) {
            prop_assert_eq!(*b == 1, max > 0.0 && *v == max);
        }
    }

    #[test]
    fn iou_symmetry_identity_permutation((a, b) in mask_pair(), seed in any::<u64>()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        prop_assert!((0.0..=1.0).contains(&ab));
        let mut perm: Vec<usize> = (0..a.data().len()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng(seed));
        prop_assert_eq!(ab, iou(&permute(&a, &perm), &permute(&b, &perm)).unwrap());
    }

    #[test]
    fn midlayer_ignores_channel_order(k in 1usize..6, seed in any::<u64>()) {
        use rand::{seq::SliceRandom, Rng};
        let mut r = rng(seed);
        let f = Tensor3::from_fn(k, 4, 5, |_, _, _| r.gen_range(0.0..3.0));
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut r);
        let g = Tensor3::from_fn(k, 4, 5, |c, i, j| f.get(order[c], i, j));
        let stack = |features| ActivationStack { features, class_map: Tensor3::zeros(1, 4, 5), scores: vec![0.0] };
        let a = midlayer_map(&stack(f), "x").unwrap();
        let b = midlayer_map(&stack(g), "x").unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn head_is_affine_in_features(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        use rand::Rng;
        let mut model = tiny_model(seed % 7);
        let (w, _) = model.head_weights();
        model.set_head(&w, &[0.0]).unwrap();
        let mut r = rng(seed);
        let k = model.architecture().feature_channels();
        let b1 = Tensor3::from_fn(k, 8, 8, |_, _, _| r.gen_range(0.0..1.0));
        let b2 = Tensor3::from_fn(k, 8, 8, |_, _, _| r.gen_range(0.0..1.0));
        let mix = Tensor3::from_fn(k, 8, 8, |c, i, j| alpha * b1.get(c, i, j) + beta * b2.get(c, i, j));
        let a1 = model.head_forward(b1).unwrap();
        let a2 = model.head_forward(b2).unwrap();
        let am = model.head_forward(mix).unwrap();
        for idx in 0..am.class_map.data().len() {
            let want = alpha * a1.class_map.data()[idx] + beta * a2.class_map.data()[idx];
            prop_assert!((am.class_map.data()[idx] - want).abs() < 1e-10);
        }
        prop_assert!((am.scores[0] - (alpha * a1.scores[0] + beta * a2.scores[0])).abs() < 1e-10);
    }

    #[test]
    fn rotation_group_on_integer_rasters(n in 1usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = rng(seed);
        let plane: Vec<i64> = (0..n * n).map(|_| r.gen_range(-100..100)).collect();
        for a in RotationOp::ALL {
            let back = a.inverse().apply_plane(&a.apply_plane(&plane, n), n);
            prop_assert_eq!(&back, &plane);
            prop_assert_eq!(a.degrees() + a.inverse().degrees(), if a.degrees() == 0 { 0 } else { 360 });
            for b in RotationOp::ALL {
                let composed = b.apply_plane(&a.apply_plane(&plane, n), n);
                prop_assert_eq!(composed, a.then(b).apply_plane(&plane, n));
            }
        }
    }

    #[test]
    fn split_is_stratified_and_order_free(n_pos in 2usize..30, n_neg in 2usize..30, seed in any::<u64>()) {
        let entries: Vec<ManifestEntry> = (0..n_pos + n_neg)
            .map(|i| ManifestEntry { id: format!("e{i:03}"), path: None, label: u8::from(i < n_pos), mask: None })
            .collect();
        let fr = (0.6, 0.2, 0.2);
        let n = (n_pos + n_neg) as f64;
        let m = DatasetManifest { entries: entries.clone(), ..Default::default() };
        let out = split(&m, fr, seed).unwrap();
        let positives: std::collections::HashSet<String> =
            entries.iter().filter(|e| e.label == 1).map(|e| e.id.clone()).collect();
        for (s, f) in Split::ALL.iter().zip([fr.0, fr.1, fr.2]) {
            let ids = out.ids_in(*s);
            prop_assert!((ids.len() as f64 - f * n).abs() <= 1.0);
            let pos = ids.iter().filter(|id| positives.contains(**id)).count() as f64;
            prop_assert!((pos - ids.len() as f64 * n_pos as f64 / n).abs() <= 1.0 + 1e-9);
        }
        prop_assert_eq!(out.split_assignment.len(), entries.len());
        let mut rev = m.clone();
        rev.entries.reverse();
        prop_assert_eq!(split(&rev, fr, seed).unwrap().split_assignment, out.split_assignment);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn regularizer_ignores_identity_and_order(seed in 0u64..1000, perm in Just(vec![90u32, 180, 270]).prop_shuffle()) {
        let model = tiny_model(seed);
        let batch = [random_sample(seed, 32, 1), random_sample(seed + 1, 32, 0)];
        let base: Vec<RotationOp> = [90, 180, 270].iter().map(|d| RotationOp::new(*d).unwrap()).collect();
        let shuffled: Vec<RotationOp> = perm.iter().map(|d| RotationOp::new(*d).unwrap()).collect();
        let mut with_zero = shuffled.clone();
        with_zero.insert(1, RotationOp::IDENTITY);
        let l = equivariance_loss(&model, &batch, &base).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!((equivariance_loss(&model, &batch, &shuffled).unwrap() - l).abs() <= 1e-12 * l.max(1.0));
        prop_assert!((equivariance_loss(&model, &batch, &with_zero).unwrap() - l).abs() <= 1e-12 * l.max(1.0));
        prop_assert_eq!(equivariance_loss(&model, &batch, &[RotationOp::IDENTITY]).unwrap(), 0.0);
    }
}
