use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use maskbit::eval::{compute_stats, frechet_distance, hamming_distance, inception_score};
use maskbit::generator::{apply_mask, group_merge, group_split, mask_fraction, masked_group_count, GroupedMask};
use maskbit::losses::hinge_d_loss;
use maskbit::quantizers::{bits_to_index, index_to_bits, BitGrid};
use maskbit::sampler::{cfg_combine, keep_count};
use maskbit::tokens::{pack_bits, unpack_bits, TokenDataset};
use maskbit::trainer::{lr_at, EmaState, StageOptim};
use proptest::prelude::*;

fn bits(len: usize) -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1i8 } else { -1 }), len)
}

fn grid_with(batch: usize, h: usize, w: usize, k: usize) -> impl Strategy<Value = BitGrid> {
    bits(batch * h * w * k).prop_map(move |d| BitGrid::new(batch, h, w, k, d).unwrap())
}

/// `(K, N)` with `N` dividing `K`.
fn width_and_groups() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=16).prop_flat_map(|k| {
        let divisors: Vec<usize> = (1..=k).filter(|n| k % n == 0).collect();
        (Just(k), prop::sample::select(divisors))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn index_round_trip(k in 1usize..=30, seed in any::<u32>()) {
        let v = seed & ((1u32 << k) - 1);
        let tok = index_to_bits(v, k).unwrap();
        prop_assert_eq!(bits_to_index(tok.bits()).unwrap(), v);
    }

    #[test]
    fn groups_split_and_merge((k, n) in width_and_groups(), seed in any::<u64>()) {
        let token: Vec<i8> = (0..k).map(|i| if (seed >> (i % 64)) & 1 == 1 { 1 } else { -1 }).collect();
        let parts = group_split(&token, n).unwrap();
        prop_assert_eq!(parts.len(), n);
        prop_assert!(parts.iter().all(|p| p.len() == k / n));
        prop_assert_eq!(group_merge(&parts), token);
    }

    #[test]
    fn masking_is_idempotent(
        g in grid_with(2, 2, 3, 6),
        n in prop::sample::select(vec![1usize, 2, 3, 6]),
        m in prop::collection::vec(any::<bool>(), 2 * 6 * 6),
    ) {
        let mask = GroupedMask::new(2, 6, n, m[..2 * 6 * n].to_vec()).unwrap();
        let once = apply_mask(&g, &mask).unwrap();
        prop_assert_eq!(&apply_mask(&once, &mask).unwrap(), &once);
        let gb = 6 / n;
        for b in 0..2 {
            for t in 0..6 {
                for j in 0..n {
                    let span = j * gb..(j + 1) * gb;
                    if mask.get(b, t, j) {
                        prop_assert!(once.token(b, t)[span].iter().all(|&x| x == 0));
                    } else {
                        prop_assert_eq!(&once.token(b, t)[span.clone()], &g.token(b, t)[span]);
                    }
                }
            }
        }
    }

    #[test]
    fn hamming_is_a_metric(a in grid_with(1, 2, 2, 5), b in grid_with(1, 2, 2, 5), c in grid_with(1, 2, 2, 5)) {
        let d = |x: &BitGrid, y: &BitGrid| hamming_distance(x, y).unwrap();
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        let direct = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
        prop_assert_eq!(d(&a, &b), direct);
    }

    #[test]
    fn packing_round_trips(k in 1usize..=30, h in 1usize..=3, w in 1usize..=3, seed in any::<u64>()) {
        let n = 2 * h * w * k;
        let data: Vec<i8> = (0..n).map(|i| if (seed.rotate_left(i as u32 % 64) ^ i as u64) & 1 == 1 { 1 } else { -1 }).collect();
        let packed = pack_bits(&data).unwrap();
        prop_assert_eq!(packed.len(), n.div_ceil(8));
        prop_assert_eq!(unpack_bits(&packed, n), data.clone());
        let ds = TokenDataset::new(BitGrid::new(2, h, w, k, data).unwrap(), vec![1, 0], "d".into()).unwrap();
        prop_assert_eq!(TokenDataset::from_bytes(&ds.to_bytes().unwrap()).unwrap(), ds);
    }

    #[test]
    fn keep_count_is_monotone(steps in 1usize..=300, groups in 1usize..=2048) {
        let mut prev = 0;
        for s in 1..=steps {
            let k = keep_count(s, steps, groups).unwrap();
            prop_assert!(k >= prev && k <= groups);
            prev = k;
        }
        prop_assert_eq!(prev, groups);
    }

    #[test]
    fn mask_schedule_is_decreasing(a in 0.0f64..=1.0, b in 0.0f64..=1.0, total in 1usize..=4096) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(mask_fraction(lo) >= mask_fraction(hi));
        prop_assert!(masked_group_count(lo, total) >= masked_group_count(hi, total));
        prop_assert!(masked_group_count(hi, total) <= total);
    }

    #[test]
    fn lr_warms_up_then_decays(warmup in 0u64..500, extra in 1u64..5000, base in 1e-5f64..1e-2, frac in 0.0f64..=1.0) {
        let cfg = StageOptim { base_lr: base, warmup, total_iters: warmup + extra, end_lr_fraction: frac, ..StageOptim::stage1() };
        let mut prev = lr_at(0, &cfg);
        for s in 1..=warmup {
            let v = lr_at(s, &cfg);
            prop_assert!(v >= prev);
            prev = v;
        }
        for s in warmup + 1..=cfg.total_iters + 10 {
            let v = lr_at(s, &cfg);
            prop_assert!(v <= prev + 1e-18 && v >= base * frac - 1e-18);
            prev = v;
        }
    }

    #[test]
    fn ema_stays_between_shadow_and_params(
        decay in 0.0f64..1.0,
        old in prop::collection::vec(-10.0f64..10.0, 6),
        new in prop::collection::vec(-10.0f64..10.0, 6),
    ) {
        let dev = Device::Cpu;
        let t = |v: &[f64]| BTreeMap::from([("w".to_string(), Tensor::from_slice(v, 6, &dev).unwrap())]);
        let mut ema = EmaState::new(t(&old), decay).unwrap();
        ema.update(&t(&new)).unwrap();
        let got: Vec<f64> = ema.shadow()["w"].to_vec1().unwrap();
        for ((g, o), n) in got.iter().zip(&old).zip(&new) {
            prop_assert!(*g >= o.min(*n) - 1e-12 && *g <= o.max(*n) + 1e-12);
        }
    }

    #[test]
    fn frechet_is_symmetric_and_rotation_invariant(
        a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 6..20),
        b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 6..20),
        theta in 0.0f64..std::f64::consts::TAU,
    ) {
        let sa = compute_stats(&a).unwrap();
        let sb = compute_stats(&b).unwrap();
        let ab = frechet_distance(&sa, &sb).unwrap();
        let ba = frechet_distance(&sb, &sa).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()));
        let (c, s) = (theta.cos(), theta.sin());
        let rot = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter().map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1], r[2]]).collect()
        };
        let rotated = frechet_distance(&compute_stats(&rot(&a)).unwrap(), &compute_stats(&rot(&b)).unwrap()).unwrap();
        prop_assert!((rotated - ab).abs() <= 1e-6 * (1.0 + ab.abs()));
        prop_assert!(ab >= -1e-9);
    }

    #[test]
    fn inception_score_ignores_order(
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 2..12),
        perm in Just(vec![2usize, 0, 3, 1]),
    ) {
        let probs: Vec<Vec<f64>> = raw.iter().map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|x| x / s).collect() }).collect();
        let base = inception_score(&probs).unwrap();
        let cols: Vec<Vec<f64>> = probs.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let mut rows = probs.clone();
        rows.reverse();
        prop_assert!((inception_score(&cols).unwrap() - base).abs() < 1e-9);
        prop_assert!((inception_score(&rows).unwrap() - base).abs() < 1e-9);
        prop_assert!(base >= 1.0 - 1e-9 && base <= 4.0 + 1e-9);
    }

    #[test]
    fn hinge_is_nonnegative_and_guidance_zero_is_identity(
        real in prop::collection::vec(-5.0f64..5.0, 8),
        fake in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let dev = Device::Cpu;
        let r = Tensor::from_slice(&real, 8, &dev).unwrap();
        let f = Tensor::from_slice(&fake, 8, &dev).unwrap();
        prop_assert!(hinge_d_loss(&r, &f).unwrap().to_scalar::<f64>().unwrap() >= 0.0);
        prop_assert_eq!(cfg_combine(&r, &f, 0.0).unwrap().to_vec1::<f64>().unwrap(), real);
    }
}
