mod common;

use common::*;
use coopdet::geometry::{nms, points_in_box, rotated_iou_bev, Box3D, FrameId, PointCloud, PoseSE3, ProposalSet, View};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = Box3D> {
    (
        -30.0..30.0f64,
        -30.0..30.0f64,
        -1.0..2.0f64,
        0.3..6.0f64,
        0.3..3.0f64,
        0.5..3.0f64,
        -10.0..10.0f64,
    )
        .prop_map(|(x, y, z, l, w, h, yaw)| Box3D::new(x, y, z, l, w, h, yaw).unwrap())
}

/// Two boxes close enough that they usually overlap.
fn arb_pair() -> impl Strategy<Value = (Box3D, Box3D)> {
    (arb_box(), -3.0..3.0f64, -3.0..3.0f64, 0.3..6.0f64, 0.3..3.0f64, -4.0..4.0f64).prop_map(
        |(a, dx, dy, l, w, yaw)| {
            let b = Box3D::new(a.cx + dx, a.cy + dy, a.cz, l, w, a.h, yaw).unwrap();
            (a, b)
        },
    )
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded((a, b) in arb_pair()) {
        let ab = rotated_iou_bev(&a, &b);
        let ba = rotated_iou_bev(&b, &a);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn iou_with_itself_is_one(a in arb_box()) {
        prop_assert!((rotated_iou_bev(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_ignores_height_and_a_half_turn(a in arb_box(), dz in -5.0..5.0f64) {
        let lifted = Box3D::new(a.cx, a.cy, a.cz + dz, a.l, a.w, a.h * 2.0, a.yaw + std::f64::consts::PI).unwrap();
        prop_assert!((rotated_iou_bev(&a, &lifted) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_is_invariant_under_rigid_motion((a, b) in arb_pair(), x in -50.0..50.0f64, y in -50.0..50.0f64, yaw in -4.0..4.0f64) {
        let pose = PoseSE3::new(x, y, 0.0, yaw);
        let moved = rotated_iou_bev(&pose.apply_box(&a), &pose.apply_box(&b));
        prop_assert!((moved - rotated_iou_bev(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn containment_matches_inverse_transform(a in arb_box(), u in -0.7..0.7f64, v in -0.7..0.7f64, s in -0.7..0.7f64) {
        // Sample around the box in its own axes, then map to world.
        let p = a.pose().apply([u * a.l, v * a.w, s * a.h]);
        prop_assert_eq!(a.contains(p), contains_oracle(&a, p));
    }

    #[test]
    fn pose_inverse_round_trips(x in -80.0..80.0f64, y in -80.0..80.0f64, yaw in -7.0..7.0f64, p in prop::array::uniform3(-50.0..50.0f64)) {
        let pose = PoseSE3::new(x, y, 0.5, yaw);
        let back = pose.inverse().apply(pose.apply(p));
        for k in 0..3 {
            prop_assert!((back[k] - p[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_matches_brute_force(seed in any::<u64>(), n in 0usize..25, eta in 0.05..0.95f64) {
        let mut r = rng(seed);
        let set = random_proposals(&mut r, n, 6.0, View::Multi);
        let got = nms(&set, eta);
        let want: Vec<_> = brute_nms(&set.items, eta).into_iter().map(|i| set.items[i]).collect();
        prop_assert_eq!(&got.items, &want);
        // Survivors are pairwise separated and sorted by confidence.
        for (i, a) in got.items.iter().enumerate() {
            for b in &got.items[i + 1..] {
                prop_assert!(rotated_iou_bev(&a.bbox, &b.bbox) < eta);
                prop_assert!(a.confidence >= b.confidence);
            }
        }
    }

    #[test]
    fn nms_is_idempotent(seed in any::<u64>(), n in 0usize..25, eta in 0.05..0.95f64) {
        let mut r = rng(seed);
        let once = nms(&random_proposals(&mut r, n, 6.0, View::Ego), eta);
        prop_assert_eq!(nms(&once, eta), once);
    }

    #[test]
    fn point_counts_match_oracle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_box(&mut r, 5.0);
        let cloud = cloud_around(&mut r, &[a], 60, 40, 8.0);
        let (n, idx) = points_in_box(&cloud, &a);
        let want: Vec<usize> = (0..cloud.len()).filter(|&i| contains_oracle(&a, cloud.points[i])).collect();
        prop_assert_eq!(n, want.len());
        prop_assert_eq!(idx, want);
    }
}

#[test]
fn iou_agrees_with_monte_carlo() {
    let mut r = rng(11);
    for _ in 0..60 {
        let a = random_box(&mut r, 3.0);
        let b = nearby_box(&mut r, &a);
        let exact = rotated_iou_bev(&a, &b);
        let mc = mc_iou(&a, &b, 200_000, &mut r);
        assert!((exact - mc).abs() < 0.01, "exact {exact} vs sampled {mc} for {a:?} {b:?}");
    }
}

#[test]
fn disjoint_and_touching_boxes_do_not_overlap() {
    let a = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0).unwrap();
    let far = Box3D::new(50.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.3).unwrap();
    let touching = Box3D::new(4.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0).unwrap();
    assert_eq!(rotated_iou_bev(&a, &far), 0.0);
    assert!(rotated_iou_bev(&a, &touching) < 1e-9);
}

#[test]
fn nested_boxes_give_area_ratio() {
    let outer = Box3D::new(1.0, -2.0, 0.0, 6.0, 4.0, 1.5, 0.7).unwrap();
    let inner = Box3D::new(1.0, -2.0, 0.0, 3.0, 2.0, 1.5, 0.7).unwrap();
    assert!((rotated_iou_bev(&outer, &inner) - 0.25).abs() < 1e-12);
}

#[test]
fn empty_cloud_has_no_support() {
    let a = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0).unwrap();
    assert_eq!(points_in_box(&PointCloud::default(), &a).0, 0);
    assert!(nms(&ProposalSet::empty(FrameId(3), View::Ego), 0.3).is_empty());
}
