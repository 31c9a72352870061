//! Property tests over randomized inputs.
//!
//! Each block states an algebraic fact the implementation is supposed to
//! keep, then hammers it with random shapes and values. Exact (bitwise)
//! assertions are used wherever the code promises order independence.

use proptest::prelude::*;
use rand::Rng;

use masklab_core::assembly::{assemble, AssemblyConfig, BoundingBox};
use masklab_core::attention::{ChannelAttention, DualAttention, ALL_ARRANGEMENTS};
use masklab_core::init::seeded_rng;
use masklab_core::losses::{total_loss, LossTerms, SEMANTIC_LOSS_WEIGHT};
use masklab_core::metrics::{best_dice, dice, BinaryMask, LabelImage};
use masklab_core::refine::{
    sample_points_train, select_points_inference, uncertainty, PointKind, RefineConfig,
};
use masklab_core::tensor::{
    add, conv2d, pool, resize_bilinear, sigmoid, PoolAxis, PoolKind, Tensor,
};

fn small_nchw() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..3, 1usize..5, 1usize..6, 1usize..6)
}

proptest! {
    #[test]
    fn conv_same_padding_preserves_spatial_shape(
        (n, c, h, w) in small_nchw(),
        out_c in 1usize..4,
        seed in 0u64..1000,
    ) {
        let mut rng = seeded_rng(seed);
        let x = Tensor::<f64>::from_fn(vec![n, c, h, w], |_| 0.1).unwrap();
        let p = masklab_core::init::kaiming_conv(out_c, c, 3, 1.0, &mut rng).unwrap();
        let y = conv2d(&x, &p).unwrap();
        prop_assert_eq!(y.shape(), &[n, out_c, h, w]);
    }

    #[test]
    fn conv_is_linear_with_zero_bias(
        seed in 0u64..1000,
    ) {
        let mut rng = seeded_rng(seed);
        let a = Tensor::<f64>::from_fn(vec![1, 2, 4, 4], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let b = Tensor::<f64>::from_fn(vec![1, 2, 4, 4], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let p = masklab_core::init::kaiming_conv::<f64>(3, 2, 3, 1.0, &mut rng).unwrap();
        let sum_first = conv2d(&add(&a, &b).unwrap(), &p).unwrap();
        let conv_first = add(&conv2d(&a, &p).unwrap(), &conv2d(&b, &p).unwrap()).unwrap();
        for (x, y) in sum_first.data().iter().zip(conv_first.data()) {
            prop_assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
        }
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval(v in -1e30f32..1e30f32) {
        let x = Tensor::new(vec![1], vec![v]).unwrap();
        let s = sigmoid(&x).data()[0];
        prop_assert!(s > 0.0 && s < 1.0, "sigmoid({}) = {}", v, s);
    }

    #[test]
    fn resize_preserves_constants(
        (n, c, h, w) in small_nchw(),
        (oh, ow) in (1usize..9, 1usize..9),
        value in -5.0f64..5.0,
    ) {
        let x = Tensor::filled(vec![n, c, h, w], value).unwrap();
        let y = resize_bilinear(&x, oh, ow).unwrap();
        prop_assert_eq!(y.shape(), &[n, c, oh, ow]);
        // Interpolation weights per output pixel sum to 1, and a constant
        // times a partition of unity reproduces the constant up to rounding.
        for &v in y.data() {
            prop_assert!((v - value).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_shapes_collapse_the_right_axes((n, c, h, w) in small_nchw()) {
        let x = Tensor::<f64>::filled(vec![n, c, h, w], 1.5).unwrap();
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let over_channels = pool(&x, PoolAxis::Channel, kind).unwrap();
            prop_assert_eq!(over_channels.shape(), &[n, 1, h, w]);
            let over_pixels = pool(&x, PoolAxis::Spatial, kind).unwrap();
            prop_assert_eq!(over_pixels.shape(), &[n, c, 1, 1]);
        }
    }

    #[test]
    fn spatial_avg_pool_ignores_pixel_order(
        seed in 0u64..1000,
        rot in 0usize..36,
    ) {
        let mut rng = seeded_rng(seed);
        let x = Tensor::<f32>::from_fn(vec![1, 3, 6, 6], |_| rng.gen_range(-1.0..1.0)).unwrap();
        // Rotate the 36 spatial positions of every channel by the same offset.
        let shuffled = Tensor::from_fn(vec![1, 3, 6, 6], |idx| {
            let flat = (idx[2] * 6 + idx[3] + rot) % 36;
            x.at4(0, idx[1], flat / 6, flat % 6)
        })
        .unwrap();
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let a = pool(&x, PoolAxis::Spatial, kind).unwrap();
            let b = pool(&shuffled, PoolAxis::Spatial, kind).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn attention_gates_never_grow_any_element(
        seed in 0u64..500,
        arrangement_idx in 0usize..4,
    ) {
        let mut rng = seeded_rng(seed);
        let module = DualAttention::<f64>::kaiming(
            4, 2, ALL_ARRANGEMENTS[arrangement_idx], &mut rng,
        ).unwrap();
        let x = Tensor::from_fn(vec![1, 4, 3, 3], |_| rng.gen_range(-2.0..2.0)).unwrap();
        let z = module.apply(&x).unwrap();
        for (zi, xi) in z.data().iter().zip(x.data()) {
            prop_assert!(zi.abs() <= xi.abs(), "|{}| > |{}|", zi, xi);
        }
    }

    #[test]
    fn zero_parameter_attention_quarters_the_input(
        (n, c, h, w) in small_nchw(),
        seed in 0u64..500,
        arrangement_idx in 0usize..4,
    ) {
        let mut rng = seeded_rng(seed);
        let x = Tensor::<f32>::from_fn(vec![n, c, h, w], |_| rng.gen_range(-2.0..2.0)).unwrap();
        let module = DualAttention::<f32>::zeros(c, 2, ALL_ARRANGEMENTS[arrangement_idx]).unwrap();
        let z = module.apply(&x).unwrap();
        for (zi, xi) in z.data().iter().zip(x.data()) {
            prop_assert_eq!(*zi, 0.25 * xi);
        }
    }

    #[test]
    fn channel_attention_commutes_with_spatial_shuffles(
        seed in 0u64..500,
        perm_seed in 0u64..1000,
    ) {
        let mut rng = seeded_rng(seed);
        let module = ChannelAttention::<f32>::kaiming(5, 2, &mut rng).unwrap();
        let x = Tensor::from_fn(vec![1, 5, 4, 5], |_| rng.gen_range(-2.0..2.0)).unwrap();

        let mut perm: Vec<usize> = (0..20).collect();
        let mut prng = seeded_rng(perm_seed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, prng.gen_range(0..=i));
        }
        let permute = |t: &Tensor<f32>| {
            Tensor::from_fn(t.shape().to_vec(), |idx| {
                let flat = perm[idx[2] * 5 + idx[3]];
                t.at4(idx[0], idx[1], flat / 5, flat % 5)
            })
            .unwrap()
        };

        let map_then_permute = permute(&module.attention_map(&x).unwrap());
        let permute_then_map = module.attention_map(&permute(&x)).unwrap();
        prop_assert_eq!(map_then_permute.data(), permute_then_map.data());
    }

    #[test]
    fn train_point_sets_hold_their_contract(
        n in 1usize..40,
        seed in 0u64..2000,
    ) {
        let mut rng = seeded_rng(seed ^ 0x5eed);
        let logits = Tensor::<f64>::from_fn(vec![7, 9], |_| rng.gen_range(-3.0..3.0)).unwrap();
        let cfg = RefineConfig { num_points: n, ..RefineConfig::default() };
        let points = sample_points_train(&logits, &cfg, seed).unwrap();
        prop_assert_eq!(points.len(), n);

        let again = sample_points_train(&logits, &cfg, seed).unwrap();
        prop_assert_eq!(&points, &again);

        // Every chosen-by-ranking point must be at least as uncertain as
        // every randomly filled one.
        let sample_u = |x: f64, y: f64| {
            let as4 = logits.clone().with_shape(vec![1, 1, 7, 9]).unwrap();
            let v = masklab_core::tensor::sample_points_bilinear(&as4, &[(x, y)]).unwrap();
            uncertainty(v.data()[0])
        };
        let min_ranked = points
            .iter()
            .filter(|p| p.kind == PointKind::Uncertain)
            .map(|p| sample_u(p.x, p.y))
            .fold(f64::INFINITY, f64::min);
        let max_random = points
            .iter()
            .filter(|p| p.kind == PointKind::Random)
            .map(|p| sample_u(p.x, p.y))
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_ranked >= max_random || max_random == f64::NEG_INFINITY);
    }

    #[test]
    fn inference_selection_returns_distinct_grid_points(
        n in 1usize..20,
        seed in 0u64..1000,
    ) {
        let mut rng = seeded_rng(seed);
        let logits = Tensor::<f64>::from_fn(vec![4, 5], |_| rng.gen_range(-3.0..3.0)).unwrap();
        let points = select_points_inference(&logits, n).unwrap();
        prop_assert_eq!(points.len(), n);
        let mut seen = std::collections::HashSet::new();
        for &(x, y) in &points {
            prop_assert!(x < 5 && y < 4, "point ({}, {}) off the grid", x, y);
            prop_assert!(seen.insert((x, y)), "duplicate point ({}, {})", x, y);
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(
        a in prop::collection::vec(any::<bool>(), 24),
        b in prop::collection::vec(any::<bool>(), 24),
    ) {
        let ma = BinaryMask::new(6, 4, a).unwrap();
        let mb = BinaryMask::new(6, 4, b).unwrap();
        let d_ab = dice(&ma, &mb).unwrap();
        let d_ba = dice(&mb, &ma).unwrap();
        prop_assert_eq!(d_ab, d_ba);
        prop_assert!((0.0..=1.0).contains(&d_ab));
        prop_assert_eq!(dice(&ma, &ma).unwrap(), 1.0);
    }

    #[test]
    fn best_dice_matches_exhaustive_matching(
        ids in prop::collection::vec(0u32..4, 64),
        gt_ids in prop::collection::vec(0u32..4, 64),
    ) {
        let pred = LabelImage::new(8, 8, ids).unwrap();
        let gt = LabelImage::new(8, 8, gt_ids).unwrap();
        match (best_dice(&pred, &gt), oracle_best_dice(&pred, &gt)) {
            (Ok(report), Some(expected)) => prop_assert_eq!(report.score, expected),
            (Err(_), None) => {}
            (got, want) => prop_assert!(false, "disagree: {:?} vs {:?}", got, want),
        }
    }

    #[test]
    fn best_dice_ignores_id_relabeling(
        ids in prop::collection::vec(0u32..4, 64),
        gt_ids in prop::collection::vec(0u32..4, 64),
    ) {
        prop_assume!(gt_ids.iter().any(|&v| v != 0));
        let relabel = |v: u32| if v == 0 { 0 } else { v * 37 + 5 };
        let pred = LabelImage::new(8, 8, ids.clone()).unwrap();
        let gt = LabelImage::new(8, 8, gt_ids.clone()).unwrap();
        let pred2 = LabelImage::new(8, 8, ids.iter().map(|&v| relabel(v)).collect()).unwrap();
        let gt2 = LabelImage::new(8, 8, gt_ids.iter().map(|&v| relabel(v)).collect()).unwrap();
        let a = best_dice(&pred, &gt).unwrap().score;
        let b = best_dice(&pred2, &gt2).unwrap().score;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn assembly_is_linear_in_both_operands(seed in 0u64..1000) {
        let mut rng = seeded_rng(seed);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::<f64>::from_fn(vec![3, 4, 4], |_| rng.gen_range(-2.0..2.0)).unwrap()
        };
        let c1 = draw(&mut rng);
        let c2 = draw(&mut rng);
        let k = draw(&mut rng);

        let crops_sum = Tensor::new(
            vec![3, 4, 4],
            c1.data().iter().zip(c2.data()).map(|(a, b)| a + b).collect(),
        ).unwrap();
        let lhs = assemble(&crops_sum, &k).unwrap();
        let rhs = add(&assemble(&c1, &k).unwrap(), &assemble(&c2, &k).unwrap()).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }

        let coeff_sum = crops_sum;
        let lhs = assemble(&k, &coeff_sum).unwrap();
        let rhs = add(&assemble(&k, &c1).unwrap(), &assemble(&k, &c2).unwrap()).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_of_constant_map_is_constant(
        seed in 0u64..1000,
        value in -3.0f64..3.0,
    ) {
        let mut rng = seeded_rng(seed);
        let bases = Tensor::filled(vec![2, 9, 9], value).unwrap();
        let x1 = rng.gen_range(0.0..4.0);
        let y1 = rng.gen_range(0.0..4.0);
        let bx = BoundingBox::new(
            x1, y1,
            x1 + rng.gen_range(1.0..4.5),
            y1 + rng.gen_range(1.0..4.5),
            1.0,
        ).unwrap();
        let crop = masklab_core::assembly::roi_align(&bases, &bx, 5).unwrap();
        for &v in crop.data() {
            prop_assert!((v - value).abs() < 1e-12);
        }
    }

    #[test]
    fn semantic_term_scales_by_its_fixed_weight(
        sem in 0.0f64..10.0,
        scale in 0.5f64..4.0,
    ) {
        let base = LossTerms {
            classification: 0.0,
            centerness: 0.0,
            localization: 0.0,
            mask: 0.0,
            semantic: sem,
            points: 0.0,
        };
        let scaled = LossTerms { semantic: sem * scale, ..base };
        let a = total_loss(&base).unwrap();
        let b = total_loss(&scaled).unwrap();
        prop_assert!((a.total - SEMANTIC_LOSS_WEIGHT * sem).abs() < 1e-12);
        prop_assert!((b.total - a.total * scale).abs() < 1e-9 * (1.0 + b.total.abs()));
    }

    #[test]
    fn config_defaults_compose(
        n in 1usize..6,
    ) {
        let asm = AssemblyConfig::default();
        prop_assert_eq!(asm.base_resolution, 56);
        prop_assert_eq!(asm.coeff_resolution, 14);
        prop_assert_eq!(asm.num_bases, 4);
        let refine = RefineConfig::default();
        prop_assert!((refine.beta - 3.0).abs() < 1e-12);
        prop_assert!((refine.alpha - 0.75).abs() < 1e-12);
        // Changing the budget leaves the validated invariants intact.
        let cfg = RefineConfig { num_points: n, ..refine };
        prop_assert!(cfg.validate().is_ok());
    }
}

/// All-pairs reference implementation: per ground-truth instance, scan every
/// predicted instance with a fresh pixel loop, then average the same way the
/// library documents (ascending sort before the sum).
fn oracle_best_dice(pred: &LabelImage, gt: &LabelImage) -> Option<f64> {
    let gt_ids = gt.instance_ids();
    if gt_ids.is_empty() {
        return None;
    }
    let pred_ids = pred.instance_ids();
    let mut best_values = Vec::new();
    for &g in &gt_ids {
        let gm = gt.mask_of(g);
        let mut best = 0.0f64;
        for &p in &pred_ids {
            let pm = pred.mask_of(p);
            let inter = gm
                .data()
                .iter()
                .zip(pm.data())
                .filter(|&(&a, &b)| a && b)
                .count();
            let denom = gm.count() + pm.count();
            let d = if denom == 0 { 1.0 } else { 2.0 * inter as f64 / denom as f64 };
            if d > best {
                best = d;
            }
        }
        best_values.push(best);
    }
    best_values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(100.0 * best_values.iter().sum::<f64>() / best_values.len() as f64)
}
