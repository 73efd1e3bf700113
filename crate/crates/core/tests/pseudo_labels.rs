mod common;

use common::*;
use coopdet::ccl::{
    bev_alignment_loss, bev_rasterize, consensus_labels, footprint_discrepancy, unmatched_valid_set, visibility_mask,
    BevSpec, BEV_CHANNELS,
};
use coopdet::geometry::{nms, Box3D, FrameId, PointCloud, Proposal, ProposalSet, View};
use coopdet::pps::{dynamic_lambda, dynamic_tau, stabilize, stabilize_with_tau, MemoryBank, ScheduleParams};
use coopdet::weakdet::{focal_loss, focal_loss_logit, smooth_l1, smooth_l1_grad};
use proptest::prelude::*;
use rand::Rng;

fn arb_schedule() -> impl Strategy<Value = ScheduleParams> {
    (0.0..0.5f64, 0.01..0.5f64, 0.05..3.0f64, 0.05..3.0f64, -5.0..30.0f64, -5.0..30.0f64).prop_map(
        |(lo, span, k_tau, k_lambda, beta_tau, beta_lambda)| ScheduleParams {
            tau_min: lo,
            tau_max: (lo + span).min(1.0),
            k_tau,
            k_lambda,
            beta_tau,
            beta_lambda,
        },
    )
}

/// Reference stabilization: threshold, reweight, then the brute-force
/// suppression loop over current-then-history.
fn brute_stabilize(current: &[Proposal], history: &[Proposal], tau: f64, lambda: f64, eta: f64) -> Vec<Proposal> {
    let mut pool = Vec::new();
    for p in current {
        if p.confidence >= tau {
            pool.push(Proposal::new(p.bbox, (1.0 - lambda) * p.confidence));
        }
    }
    for h in history {
        pool.push(Proposal::new(h.bbox, lambda * h.confidence));
    }
    brute_nms(&pool, eta).into_iter().map(|i| pool[i]).collect()
}

proptest! {
    #[test]
    fn schedule_is_monotone_and_bounded(p in arb_schedule(), t in -20i64..60) {
        let (a, b) = (dynamic_tau(t, &p), dynamic_tau(t + 1, &p));
        prop_assert!(a <= b);
        prop_assert!(p.tau_min <= a && a <= p.tau_max);
        let (la, lb) = (dynamic_lambda(t, &p), dynamic_lambda(t + 1, &p));
        prop_assert!(la <= lb);
        prop_assert!((0.0..=1.0).contains(&la));
    }

    #[test]
    fn stabilize_matches_reference(seed in any::<u64>(), n in 0usize..15, m in 0usize..15, t in 1i64..20, eta in 0.1..0.9f64) {
        let mut r = rng(seed);
        let current = random_proposals(&mut r, n, 5.0, View::Multi);
        let history = random_proposals(&mut r, m, 5.0, View::Multi).items;
        let params = ScheduleParams::for_iterations(20);
        let tau = dynamic_tau(t, &params);
        let out = stabilize_with_tau(&current, &history, t, tau, &params, eta);
        let want = brute_stabilize(&current.items, &history, tau, dynamic_lambda(t, &params), eta);
        prop_assert_eq!(&out.labels.items, &want);
        // Every stored survivor is an input proposal with its original confidence.
        prop_assert_eq!(out.stored.len(), out.labels.len());
        for s in &out.stored {
            prop_assert!(current.items.contains(s) || history.contains(s));
        }
    }

    #[test]
    fn stabilize_drops_everything_above_the_top(seed in any::<u64>(), n in 1usize..15) {
        let mut r = rng(seed);
        let current = random_proposals(&mut r, n, 5.0, View::Ego);
        let params = ScheduleParams::for_iterations(10);
        let out = stabilize_with_tau(&current, &[], 3, 1.01, &params, 0.3);
        prop_assert!(out.labels.is_empty());
    }

    #[test]
    fn unmatched_set_matches_reference(seed in any::<u64>(), n in 0usize..10, m in 0usize..10, eta in 0.1..0.9f64, rho in 0usize..12) {
        let mut r = rng(seed);
        let p_e = random_proposals(&mut r, n, 6.0, View::Ego);
        let p_m = random_proposals(&mut r, m, 6.0, View::Multi);
        let boxes: Vec<Box3D> = p_m.items.iter().map(|p| p.bbox).collect();
        let cloud = cloud_around(&mut r, &boxes, 20, 30, 8.0);
        let u = unmatched_valid_set(&p_e, &p_m, &cloud, eta, rho);
        prop_assert_eq!(&u.items, &brute_unmatched(&p_e, &p_m, &cloud, eta, rho));
    }

    #[test]
    fn consensus_draws_from_both_sets(seed in any::<u64>(), n in 0usize..10, m in 0usize..10, eta in 0.1..0.9f64) {
        let mut r = rng(seed);
        let p_e = random_proposals(&mut r, n, 6.0, View::Ego);
        let p_m = random_proposals(&mut r, m, 6.0, View::Multi);
        let boxes: Vec<Box3D> = p_m.items.iter().map(|p| p.bbox).collect();
        let cloud = cloud_around(&mut r, &boxes, 20, 0, 8.0);
        let u = unmatched_valid_set(&p_e, &p_m, &cloud, eta, 1);
        let y = consensus_labels(&p_e, &u, eta);
        prop_assert_eq!(y.view, View::Ego);
        for p in &y.items {
            prop_assert!(p_e.items.contains(p) || u.items.contains(p));
        }
        // Unmatched proposals never reach eta against ego ones, so the union
        // suppresses within each side only.
        let mut want: Vec<Proposal> = nms(&p_e, eta).items;
        want.extend(nms(&u, eta).items);
        prop_assert_eq!(y.len(), want.len());
        for p in &want {
            prop_assert!(y.items.contains(p));
        }
    }

    #[test]
    fn focal_loss_is_nonnegative_and_ordered(p in 0.001..0.999f64, q in 0.001..0.999f64, alpha in 0.05..0.95f64, gamma in 0.0..4.0f64) {
        let (lo, hi) = if p < q { (p, q) } else { (q, p) };
        prop_assert!(focal_loss(p, true, alpha, gamma) >= 0.0);
        prop_assert!(focal_loss(p, false, alpha, gamma) >= 0.0);
        prop_assert!(focal_loss(hi, true, alpha, gamma) <= focal_loss(lo, true, alpha, gamma) + 1e-12);
        prop_assert!(focal_loss(lo, false, alpha, gamma) <= focal_loss(hi, false, alpha, gamma) + 1e-12);
    }

    #[test]
    fn focal_gradient_matches_differences(z in -6.0..6.0f64, y in any::<bool>(), alpha in 0.05..0.95f64, gamma in 0.0..4.0f64) {
        let (_, d) = focal_loss_logit(z, y, alpha, gamma);
        let fd = fd_gradient(&[z], 1e-5, |x| focal_loss_logit(x[0], y, alpha, gamma).0)[0];
        prop_assert!((d - fd).abs() <= 1e-6 * d.abs().max(1.0), "{} vs {}", d, fd);
    }

    #[test]
    fn smooth_l1_is_even_continuous_and_differentiable(x in -5.0..5.0f64, beta in 0.05..3.0f64) {
        prop_assert!((smooth_l1(x, beta) - smooth_l1(-x, beta)).abs() < 1e-12);
        prop_assert!(smooth_l1(x, beta) >= 0.0);
        prop_assert!(smooth_l1(x, beta) <= x.abs());
        let fd = fd_gradient(&[x], 1e-6, |v| smooth_l1(v[0], beta))[0];
        if (x.abs() - beta).abs() > 1e-4 {
            prop_assert!((smooth_l1_grad(x, beta) - fd).abs() < 1e-6);
        }
    }
}

#[test]
fn focal_loss_without_focusing_is_weighted_cross_entropy() {
    for &p in &[0.05, 0.3, 0.5, 0.8, 0.99] {
        assert!((focal_loss(p, true, 0.25, 0.0) - (-0.25 * f64::ln(p))).abs() < 1e-12);
        assert!((focal_loss(p, false, 0.25, 0.0) - (-0.75 * f64::ln(1.0 - p))).abs() < 1e-12);
    }
}

#[test]
fn smooth_l1_joins_at_beta() {
    for &beta in &[0.1, 1.0, 2.5] {
        let below = smooth_l1(beta - 1e-12, beta);
        let above = smooth_l1(beta + 1e-12, beta);
        assert!((below - above).abs() < 1e-9);
        assert!((below - 0.5 * beta).abs() < 1e-9);
    }
}

#[test]
fn bank_replaces_per_frame_entries() {
    let mut r = rng(5);
    let params = ScheduleParams::for_iterations(8);
    let mut bank = MemoryBank::new();
    let first = random_proposals(&mut r, 8, 5.0, View::Multi);
    stabilize(&first, &mut bank, 1, &params, 0.3);
    let stored_1 = bank.get(FrameId(0)).to_vec();
    let second = random_proposals(&mut r, 8, 5.0, View::Multi);
    let out = stabilize(&second, &mut bank, 2, &params, 0.3);
    assert_eq!(bank.len(), 1);
    assert_eq!(bank.get(FrameId(0)).len(), out.len());
    let want = brute_stabilize(&second.items, &stored_1, dynamic_tau(2, &params), dynamic_lambda(2, &params), 0.3);
    assert_eq!(out.items, want);
}

#[test]
fn early_iterations_admit_more_and_late_ones_less() {
    // Many weak proposals and history: a low early threshold keeps more
    // current proposals, while late iterations lean on history.
    let mut r = rng(8);
    let params = ScheduleParams::for_iterations(20);
    let current = random_proposals(&mut r, 40, 20.0, View::Multi);
    let early = stabilize_with_tau(&current, &[], 1, dynamic_tau(1, &params), &params, 0.3);
    let late = stabilize_with_tau(&current, &[], 20, dynamic_tau(20, &params), &params, 0.3);
    assert!(early.labels.len() > late.labels.len());
    assert!(late.labels.items.iter().all(|p| p.confidence > 0.0));
    assert!(dynamic_lambda(1, &params) < 0.1 && dynamic_lambda(20, &params) > 0.9);
}

/// Flood fill over occupied cells with 8-neighborhoods.
fn flood_clusters(points: &[[f64; 3]], cell: f64) -> Vec<Vec<usize>> {
    let key = |p: &[f64; 3]| ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
    let mut label = vec![usize::MAX; points.len()];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for s in 0..points.len() {
        if label[s] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut stack = vec![s];
        label[s] = id;
        while let Some(i) = stack.pop() {
            let (a, b) = key(&points[i]);
            for j in 0..points.len() {
                let (c, d) = key(&points[j]);
                if label[j] == usize::MAX && (a - c).abs() <= 1 && (b - d).abs() <= 1 {
                    label[j] = id;
                    stack.push(j);
                }
            }
        }
        out.push((0..points.len()).filter(|&i| label[i] == id).collect());
    }
    out
}

#[test]
fn clustering_matches_flood_fill() {
    let mut r = rng(21);
    for _ in 0..40 {
        let n = r.random_range(0..120);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| [r.random_range(-10.0..10.0), r.random_range(-10.0..10.0), 0.5])
            .collect();
        let cell = r.random_range(0.3..1.5);
        assert_eq!(coopdet::weakdet::cluster_points(&pts, cell), flood_clusters(&pts, cell));
    }
}

#[test]
fn rasterization_matches_per_cell_scan() {
    let spec = BevSpec {
        cell_size: 1.0,
        half_extent: 5.0,
    };
    let mut r = rng(4);
    let pts: Vec<[f64; 3]> = (0..300)
        .map(|_| [r.random_range(-6.0..6.0), r.random_range(-6.0..6.0), r.random_range(-1.0..3.0)])
        .collect();
    let g = bev_rasterize(&PointCloud::new(0, pts.clone()), &spec);
    for i in 0..g.h {
        for j in 0..g.w {
            let x0 = -5.0 + i as f64;
            let y0 = -5.0 + j as f64;
            let inside: Vec<f64> = pts
                .iter()
                .filter(|p| p[0] >= x0 && p[0] < x0 + 1.0 && p[1] >= y0 && p[1] < y0 + 1.0)
                .map(|p| p[2])
                .collect();
            let want = if inside.is_empty() {
                [0.0; BEV_CHANNELS]
            } else {
                let n = inside.len() as f64;
                [
                    n.ln_1p(),
                    inside.iter().cloned().fold(f64::MIN, f64::max),
                    inside.iter().sum::<f64>() / n,
                    1.0,
                ]
            };
            for (ch, w) in want.iter().enumerate() {
                assert!((g.at(i, j, ch) - w).abs() < 1e-12, "cell ({i},{j}) channel {ch}");
            }
        }
    }
}

#[test]
fn mask_and_alignment_on_a_small_grid() {
    let spec = BevSpec {
        cell_size: 1.0,
        half_extent: 3.0,
    };
    let mut r = rng(9);
    let cloud = |r: &mut rand_chacha::ChaCha8Rng, n| {
        PointCloud::new(
            0,
            (0..n)
                .map(|_| [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(0.0..2.0)])
                .collect(),
        )
    };
    let e = bev_rasterize(&cloud(&mut r, 15), &spec);
    let m = bev_rasterize(&cloud(&mut r, 40), &spec);
    let mask = visibility_mask(&e, 1e-3);
    let occupied = (0..e.h * e.w).filter(|k| e.values[k * BEV_CHANNELS + 3] == 1.0).count();
    assert_eq!(mask.visible(), occupied);

    let (loss, grad) = bev_alignment_loss(&e, &m, &mask).unwrap();
    let mut want = 0.0;
    for k in 0..e.h * e.w {
        if mask.values[k] {
            for ch in 0..BEV_CHANNELS {
                want += (e.values[k * BEV_CHANNELS + ch] - m.values[k * BEV_CHANNELS + ch]).powi(2);
            }
        }
    }
    want /= mask.visible() as f64;
    assert!((loss - want).abs() < 1e-12);
    // Invisible cells receive no gradient.
    for k in 0..e.h * e.w {
        if !mask.values[k] {
            assert!(grad.values[k * BEV_CHANNELS..(k + 1) * BEV_CHANNELS].iter().all(|v| *v == 0.0));
        }
    }

    let whole = Box3D::new(0.0, 0.0, 0.5, 6.0, 6.0, 1.0, 0.0).unwrap();
    let d = footprint_discrepancy(&e, &m, &mask, &whole);
    let mut total = 0.0;
    for k in 0..e.h * e.w {
        if mask.values[k] {
            total += (0..BEV_CHANNELS)
                .map(|ch| (e.values[k * BEV_CHANNELS + ch] - m.values[k * BEV_CHANNELS + ch]).abs())
                .sum::<f64>()
                / BEV_CHANNELS as f64;
        }
    }
    assert!((d - total / (e.h * e.w) as f64).abs() < 1e-12);
    let outside = Box3D::new(40.0, 40.0, 0.5, 2.0, 2.0, 1.0, 0.0).unwrap();
    assert_eq!(footprint_discrepancy(&e, &m, &mask, &outside), 0.0);
}

#[test]
fn empty_inputs_give_empty_sets() {
    let empty_e = ProposalSet::empty(FrameId(1), View::Ego);
    let empty_m = ProposalSet::empty(FrameId(1), View::Multi);
    let u = unmatched_valid_set(&empty_e, &empty_m, &PointCloud::default(), 0.3, 5);
    assert!(u.is_empty());
    assert!(consensus_labels(&empty_e, &u, 0.3).is_empty());
    let mut r = rng(2);
    let m = random_proposals(&mut r, 5, 5.0, View::Multi);
    // Without ego points nothing passes the support test.
    assert!(unmatched_valid_set(&empty_e, &m, &PointCloud::default(), 0.3, 1).is_empty());
    // rho = 0 admits everything unmatched.
    assert_eq!(unmatched_valid_set(&empty_e, &m, &PointCloud::default(), 0.3, 0).len(), m.len());
}
