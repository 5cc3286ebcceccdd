use codistill::checkpoint::Checkpoint;
use codistill::codistill::blend_velocities;
use codistill::importance::rank_and_select;
use codistill::metrics::{energy_distance, theoretical_speedup};
use codistill::model::{default_schedule, SkipMask};
use codistill::Tensor;
use proptest::prelude::*;

fn tensors(n: usize, len: usize) -> impl Strategy<Value = Vec<Tensor>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, len), 1..n)
        .prop_map(move |rows| rows.into_iter().map(|r| Tensor::new(vec![len], r).unwrap()).collect())
}

proptest! {
    #[test]
    fn keep_set_holds_the_top_scores(scores in prop::collection::vec(-5.0..5.0f64, 1..12), k in 1usize..12) {
        let k = k.min(scores.len());
        let r = rank_and_select(&scores, k).unwrap();
        let mut reference: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
        reference.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = reference.iter().map(|p| p.1).collect();
        prop_assert_eq!(&r.ranking, &expected);
        prop_assert_eq!(&r.keep_set[..], &expected[..k]);
        prop_assert_eq!(r.skip_mask().retained(), k);
    }

    #[test]
    fn energy_distance_is_symmetric_and_nonnegative(a in tensors(6, 4), b in tensors(6, 4)) {
        let ab = energy_distance(&a, &b).unwrap();
        let ba = energy_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
        prop_assert!(energy_distance(&a, &a).unwrap() <= 1e-12);
    }

    #[test]
    fn speedup_scales_inversely(k in 1u32..64, rho in 0.05..1.0f64) {
        let s = theoretical_speedup(50.0, 2.0, k as f64, rho).unwrap();
        let half = theoretical_speedup(50.0, 2.0, k as f64, rho / 2.0).unwrap();
        prop_assert!((half / s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn blend_is_affine_in_its_inputs(v in prop::collection::vec(-2.0..2.0f64, 3 * 5), b1 in 0.0..4.0f64, b2 in 0.0..1.0f64) {
        let t = |i: usize| Tensor::new(vec![5], v[i * 5..(i + 1) * 5].to_vec()).unwrap();
        let (c, n, u) = (t(0), t(1), t(2));
        let out = blend_velocities(&c, &n, &u, b1, b2).unwrap();
        for i in 0..5 {
            let expected = n.data()[i] + b1 * (c.data()[i] - n.data()[i]) + b2 * (u.data()[i] - c.data()[i]);
            prop_assert!((out.data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn schedules_decrease_from_one(k in 1usize..40) {
        let s = default_schedule(k);
        prop_assert_eq!(s.len(), k);
        prop_assert!(s[0] <= 0.999 && s[0] > 0.99 - 1e-12);
        prop_assert!(s.windows(2).all(|w| w[0] > w[1] && w[1] > 0.0));
    }

    #[test]
    fn keep_set_masks_round_trip(keep in prop::collection::btree_set(0usize..10, 1..10)) {
        let keep: Vec<usize> = keep.into_iter().collect();
        let m = SkipMask::from_keep_set(10, &keep);
        let back: Vec<usize> = (0..10).filter(|&i| !m.skip[i]).collect();
        prop_assert_eq!(back, keep);
    }

    #[test]
    fn checkpoints_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 0..8), seed in any::<u64>()) {
        let mut x = seed;
        let tensors: Vec<(String, Tensor)> = shapes.iter().enumerate().map(|(i, s)| {
            let n: usize = s.iter().product();
            let data = (0..n).map(|_| { x = x.wrapping_mul(6364136223846793005).wrapping_add(1); f64::from_bits(x >> 2) }).collect();
            (format!("w{i}"), Tensor::new(s.clone(), data).unwrap())
        }).collect();
        let ck = Checkpoint::new(tensors, serde_json::json!({"seed": seed}));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), ck.to_bytes());
        for bytes in 0..ck.to_bytes().len().min(40) {
            prop_assert!(Checkpoint::from_bytes(&ck.to_bytes()[..bytes]).is_err());
        }
    }
}
