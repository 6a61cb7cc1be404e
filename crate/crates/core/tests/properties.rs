use std::collections::{HashSet, VecDeque};

use dsseg_core::autodiff::Tensor;
use dsseg_core::harness::make_folds;
use dsseg_core::losses::{
    discrete_uniform_value, pearson_value, soft_dice_value, DomainTarget, EPSILON,
};
use dsseg_core::metrics::components::connected_components;
use dsseg_core::metrics::{confusion, dsc, evaluate_masks, lesion_rates, ppv};
use dsseg_core::patchflow::{crop_volume, extract_grid, fuse};
use dsseg_core::rng::seeded;
use dsseg_core::volume::{Dims, Mask};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_mask(seed: u64, dims: Dims, density: f64) -> Mask {
    let mut rng = seeded(seed, &[]);
    let n = dims.iter().product();
    Mask::new(dims, (0..n).map(|_| u8::from(rng.random_bool(density))).collect()).unwrap()
}

/// Breadth-first flood fill with neighbours enumerated from scratch.
fn flood_labels(mask: &Mask, conn: usize) -> (Vec<u32>, usize) {
    let [d, h, w] = mask.dims();
    let max_l1 = match conn {
        6 => 1,
        18 => 2,
        _ => 3,
    };
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    for start in 0..mask.len() {
        if mask.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (z, y, x) = ((i / (h * w)) as isize, ((i / w) % h) as isize, (i % w) as isize);
            for dz in -1..=1isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let l1 = dz.abs() + dy.abs() + dx.abs();
                        if l1 == 0 || l1 > max_l1 {
                            continue;
                        }
                        let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                        if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let j = (nz as usize * h + ny as usize) * w + nx as usize;
                        if mask.data()[j] == 1 && labels[j] == 0 {
                            labels[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Applies an axis permutation plus per-axis flips, which preserve adjacency.
fn lattice_map(mask: &Mask, perm: [usize; 3], flip: [bool; 3]) -> Mask {
    let src = mask.dims();
    let dims = [src[perm[0]], src[perm[1]], src[perm[2]]];
    let mut out = Mask::zeros(dims);
    for z in 0..src[0] {
        for y in 0..src[1] {
            for x in 0..src[2] {
                let p = [z, y, x];
                let mut q = [p[perm[0]], p[perm[1]], p[perm[2]]];
                for a in 0..3 {
                    if flip[a] {
                        q[a] = dims[a] - 1 - q[a];
                    }
                }
                out.set(q[0], q[1], q[2], mask.get(z, y, x));
            }
        }
    }
    out
}

fn same_metric(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() < 1e-12
}

fn conn() -> impl Strategy<Value = usize> {
    prop_oneof![Just(6usize), Just(18), Just(26)]
}

fn perm3() -> impl Strategy<Value = [usize; 3]> {
    Just([0usize, 1, 2]).prop_shuffle().prop_map(|v| v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn components_match_flood_fill(seed in any::<u64>(), c in conn(), density in 0.05f64..0.5) {
        let mask = random_mask(seed, [7, 9, 8], density);
        let (labels, n) = connected_components(&mask, c).unwrap();
        let (oracle, m) = flood_labels(&mask, c);
        prop_assert_eq!(n, m);
        prop_assert_eq!(labels, oracle);
    }

    #[test]
    fn dice_matches_one_minus_soft_dice(seed in any::<u64>(), dp in 0.0f64..0.6, dg in 0.0f64..0.6) {
        let pred = random_mask(seed, [6, 6, 6], dp);
        let gt = random_mask(seed ^ 0x9e37, [6, 6, 6], dg);
        let d = dsc(&confusion(&pred, &gt).unwrap());
        let s: Vec<f64> = pred.data().iter().map(|&v| f64::from(v)).collect();
        let g: Vec<f64> = gt.data().iter().map(|&v| f64::from(v)).collect();
        let sd = soft_dice_value(&s, &g, EPSILON).unwrap();
        prop_assert!((0.0..=1.0).contains(&sd));
        prop_assert!((sd - soft_dice_value(&g, &s, EPSILON).unwrap()).abs() < 1e-15);
        if d.is_nan() {
            prop_assert!(pred.count() == 0 && gt.count() == 0);
        } else {
            prop_assert!((1.0 - sd - d).abs() <= 2.0 * EPSILON, "dsc {} vs {}", d, 1.0 - sd);
        }
    }

    #[test]
    fn voxel_metrics_ignore_reindexing(seed in any::<u64>(), dp in 0.0f64..0.5, dg in 0.0f64..0.5) {
        let pred = random_mask(seed, [5, 6, 7], dp);
        let gt = random_mask(seed.wrapping_add(1), [5, 6, 7], dg);
        let mut order: Vec<usize> = (0..pred.len()).collect();
        order.shuffle(&mut seeded(seed, &[2]));
        let shuffle = |m: &Mask| Mask::new(m.dims(), order.iter().map(|&i| m.data()[i]).collect()).unwrap();
        let a = confusion(&pred, &gt).unwrap();
        let b = confusion(&shuffle(&pred), &shuffle(&gt)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(same_metric(dsc(&a), dsc(&b)) && same_metric(ppv(&a), ppv(&b)));
    }

    #[test]
    fn all_metrics_ignore_lattice_symmetries(
        seed in any::<u64>(),
        c in conn(),
        perm in perm3(),
        flip in any::<[bool; 3]>(),
    ) {
        let pred = random_mask(seed, [6, 7, 8], 0.15);
        let gt = random_mask(seed.wrapping_add(7), [6, 7, 8], 0.15);
        let before = evaluate_masks(&pred, &gt, c).unwrap();
        let after = evaluate_masks(&lattice_map(&pred, perm, flip), &lattice_map(&gt, perm, flip), c).unwrap();
        for (x, y) in before.iter().zip(&after) {
            prop_assert!(same_metric(*x, *y), "{:?} vs {:?}", before, after);
        }
    }

    #[test]
    fn lesion_rates_bounded_and_lfpr_monotone(seed in any::<u64>(), c in conn(), dp in 0.0f64..0.3) {
        let dims = [8, 8, 8];
        let mut pred = random_mask(seed, dims, dp);
        let gt = random_mask(seed.wrapping_add(3), dims, 0.1);
        // keep a free slab on the last x plane so a new component can be added
        for z in 0..8 {
            for y in 0..8 {
                pred.set(z, y, 6, false);
                pred.set(z, y, 7, false);
            }
        }
        let (ltpr, lfpr) = lesion_rates(&pred, &gt, c).unwrap();
        for v in [ltpr, lfpr] {
            prop_assert!(v.is_nan() || (0.0..=1.0).contains(&v));
        }
        let free = (0..64).map(|i| (i / 8, i % 8)).find(|&(z, y)| !gt.get(z, y, 7));
        if let Some((z, y)) = free {
            let mut more = pred.clone();
            more.set(z, y, 7, true);
            let (_, lfpr2) = lesion_rates(&more, &gt, c).unwrap();
            prop_assert!(lfpr.is_nan() || lfpr2 >= lfpr);
            prop_assert!(lfpr2 > 0.0);
        }
    }

    #[test]
    fn pearson_ignores_positive_affine_maps(
        c in prop::collection::vec(0.01f64..1.0, 5),
        j in 0usize..5,
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let spread = c.iter().cloned().fold(f64::MIN, f64::max) - c.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let h = DomainTarget::one_hot(5, j).unwrap();
        let t: Vec<f64> = c.iter().map(|v| a * v + b).collect();
        let base = pearson_value(&c, &h, 0.0).unwrap();
        prop_assert!((pearson_value(&t, &h, 0.0).unwrap() - base).abs() < 1e-6);
    }

    #[test]
    fn discrete_uniform_bounded_by_log_n(raw in prop::collection::vec(0.0f64..1.0, 2..12)) {
        prop_assume!(raw.iter().sum::<f64>() > 1e-6);
        let total: f64 = raw.iter().sum();
        let c: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let n = c.len() as f64;
        let gap = discrete_uniform_value(&c, EPSILON).unwrap() - n.ln();
        let dev = c.iter().map(|v| (v - 1.0 / n).abs()).fold(0.0, f64::max);
        prop_assert!(gap >= -1e-12);
        if dev >= 1e-3 {
            prop_assert!(gap > 0.0);
        }
    }

    #[test]
    fn grid_covers_every_voxel(
        d in 8usize..40, h in 8usize..40, w in 8usize..40,
        extent in prop_oneof![Just(4usize), Just(8)],
        overlap in prop_oneof![Just(0.0f64), Just(0.25), Just(0.5)],
    ) {
        let shape = [d, h, w];
        let grid = extract_grid(shape, extent, overlap).unwrap();
        let mut cov = vec![0u32; d * h * w];
        for o in &grid {
            for a in 0..3 {
                prop_assert!(o[a] + extent <= shape[a]);
            }
            for z in o[0]..o[0] + extent {
                for y in o[1]..o[1] + extent {
                    for x in o[2]..o[2] + extent {
                        cov[(z * h + y) * w + x] += 1;
                    }
                }
            }
        }
        prop_assert!(cov.iter().all(|&c| c >= 1));
        let unique: HashSet<_> = grid.iter().collect();
        prop_assert_eq!(unique.len(), grid.len());
    }

    #[test]
    fn fusing_own_crops_is_identity(
        d in 8usize..20, h in 8usize..20, w in 8usize..20,
        seed in any::<u64>(),
        overlap in prop_oneof![Just(0.0f64), Just(0.5)],
    ) {
        let mut rng = seeded(seed, &[]);
        let vol = Tensor::new(vec![1, d, h, w], (0..d * h * w).map(|_| rng.random::<f64>()).collect()).unwrap();
        let grid = extract_grid([d, h, w], 8, overlap).unwrap();
        let preds: Vec<_> = grid
            .iter()
            .map(|&o| (o, Tensor::new(vec![8; 3], crop_volume(&vol, o, 8).unwrap().data().to_vec()).unwrap()))
            .collect();
        let fused = fuse(&preds, [d, h, w]).unwrap();
        prop_assert_eq!(&fused.probs[..], vol.data());
        prop_assert!(fused.coverage.iter().all(|&c| c >= 1));
    }

    #[test]
    fn folds_keep_roles_disjoint(n in 2usize..40, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let ids: Vec<u32> = (0..n as u32).map(|i| i * 3 + 1).collect();
        let plans = make_folds(&ids, k, seed).unwrap();
        prop_assert_eq!(plans.len(), k);
        let mut tested = Vec::new();
        for p in &plans {
            let (tr, va, te): (HashSet<_>, HashSet<_>, HashSet<_>) = (
                p.train_ids.iter().collect(),
                p.val_ids.iter().collect(),
                p.test_ids.iter().collect(),
            );
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            tested.extend(p.test_ids.iter().copied());
        }
        tested.sort_unstable();
        prop_assert_eq!(tested, ids);
    }
}

#[test]
fn rand_targets_are_uniform() {
    let n = 12;
    let mut rng = seeded(11, &[0x7261_6e64]);
    let mut counts = vec![0f64; n];
    let draws = 10_000;
    for _ in 0..draws {
        let (t, j) = DomainTarget::random(n, &mut rng).unwrap();
        assert_eq!(t.values()[j], 1.0);
        counts[j] += 1.0;
    }
    let expected = draws as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}");

    let mut again = seeded(11, &[0x7261_6e64]);
    let mut replay = seeded(11, &[0x7261_6e64]);
    for _ in 0..100 {
        assert_eq!(
            DomainTarget::random(n, &mut again).unwrap().1,
            DomainTarget::random(n, &mut replay).unwrap().1
        );
    }
}
