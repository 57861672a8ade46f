use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpt_core::diffeo::{
    compose, exponentiate, jacobian_determinant, max_interior_norm, min_interior_jacobian, random_smooth_velocity,
    VelocityField,
};
use mpt_core::io::{read_tensor, write_tensor};
use mpt_core::metrics::{binary_dice, binary_iou, cl_dice, count_components, skeletonize, BinaryMask};
use mpt_core::morphpatch::{
    cyclic_shift, cyclic_unshift, deform_features, morph_patch_extract, patch_pool, window_merge, window_partition,
    PatchGrid,
};
use mpt_core::sca::{sca_forward_cached, soft_assign, update_cores, ClusterState, CoreUpdate, ScaParams};
use mpt_core::tensor::{conv2d, grid_sample, softmax};
use mpt_core::{diffeo::DeformationField, SampleCoords, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rows_sum_to_one(t: &Tensor, n: usize) -> bool {
    t.data().chunks(n).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12 && r.iter().all(|&v| v >= 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_sample_at_lattice_points_is_exact(seed in any::<u64>(), h in 2usize..8, w in 2usize..8, n in 1usize..12) {
        let mut r = rng(seed);
        let x = uniform(&[2, h, w], &mut r);
        let pts: Vec<(usize, usize)> = (0..n).map(|_| (r.gen_range(0..h), r.gen_range(0..w))).collect();
        let coords = Tensor::from_fn(&[1, n, 2], |i| if i % 2 == 0 { pts[i / 2].0 as f64 } else { pts[i / 2].1 as f64 });
        let y = grid_sample(&x, &SampleCoords::new(coords).unwrap()).unwrap();
        for (k, &(pr, pc)) in pts.iter().enumerate() {
            for c in 0..2 {
                prop_assert_eq!(y.data()[c * n + k].to_bits(), x.data()[(c * h + pr) * w + pc].to_bits());
            }
        }
    }

    #[test]
    fn grid_sample_is_linear_inside_a_cell(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&[1, 6, 6], &mut r);
        let (cr, cc) = (r.gen_range(0..5) as f64, r.gen_range(0..5) as f64);
        let fixed = cc + r.gen_range(0.0..1.0);
        let (a, b) = ([cr + r.gen_range(0.0..1.0), fixed], [cr + r.gen_range(0.0..1.0), fixed]);
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let s = |p: [f64; 2]| grid_sample(&x, &SampleCoords::new(Tensor::new(vec![1, 1, 2], p.to_vec()).unwrap()).unwrap()).unwrap().data()[0];
        // bilinear is affine along axis-aligned segments inside one cell
        prop_assert!((s(mid) - (s(a) + s(b)) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, spread in 0.1f64..50.0) {
        let mut r = rng(seed);
        let x = uniform(&[rows, cols], &mut r).scale(spread);
        prop_assert!(rows_sum_to_one(&softmax(&x, 1).unwrap(), cols));
    }

    #[test]
    fn conv2d_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (x, y) = (uniform(&[2, 7, 5], &mut r), uniform(&[2, 7, 5], &mut r));
        let k = uniform(&[3, 2, 3, 3], &mut r);
        let zero = Tensor::zeros(&[3]);
        let mut comb = x.scale(a);
        comb.axpy(b, &y).unwrap();
        let lhs = conv2d(&comb, &k, &zero).unwrap();
        let mut rhs = conv2d(&x, &k, &zero).unwrap().scale(a);
        rhs.axpy(b, &conv2d(&y, &k, &zero).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn mtk_round_trip_is_bit_exact(seed in any::<u64>(), dims in proptest::collection::vec(1usize..5, 1..4)) {
        let mut r = rng(seed);
        let t = Tensor::from_fn(&dims, |_| r.gen::<f64>() * 1e6 - 5e5);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn exp_of_doubled_field_is_self_composition(seed in any::<u64>(), n in 3usize..8) {
        let v = random_smooth_velocity(24, 24, 1.5, 3.0, &mut rng(seed)).unwrap();
        let once = exponentiate(&v, n).unwrap();
        let twice = exponentiate(&v.scale(2.0), n + 1).unwrap();
        let comp = compose(&once, &once).unwrap();
        let mut diff = twice.offsets().clone();
        diff.axpy(-1.0, comp.offsets()).unwrap();
        prop_assert!(max_interior_norm(&diff, 1) < 1e-6);
    }

    #[test]
    fn smooth_fields_are_diffeomorphic_and_invertible(seed in any::<u64>(), v_max in 0.2f64..2.0) {
        let v = random_smooth_velocity(32, 32, v_max, 3.0, &mut rng(seed)).unwrap();
        let fwd = exponentiate(&v, 7).unwrap();
        let inv = exponentiate(&v.negate(), 7).unwrap();
        prop_assert!(min_interior_jacobian(&fwd, 1).unwrap() > 0.0);
        for (a, b) in [(&fwd, &inv), (&inv, &fwd)] {
            let id = compose(a, b).unwrap();
            prop_assert!(max_interior_norm(id.offsets(), 2) < 0.05);
        }
    }

    #[test]
    fn refinement_differences_shrink(seed in any::<u64>()) {
        let v = random_smooth_velocity(32, 32, 2.0, 3.0, &mut rng(seed)).unwrap();
        let fields: Vec<DeformationField> = (4..=10).map(|n| exponentiate(&v, n).unwrap()).collect();
        let gaps: Vec<f64> = fields.windows(2).map(|p| max_abs_diff(p[0].offsets(), p[1].offsets())).collect();
        prop_assert!(gaps.windows(2).all(|g| g[1] < g[0]), "{:?}", gaps);
    }

    #[test]
    fn deform_stays_within_input_range(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&[3, 16, 16], &mut r);
        let phi = exponentiate(&random_smooth_velocity(16, 16, 3.0, 2.0, &mut r).unwrap(), 7).unwrap();
        let y = deform_features(&x, &phi).unwrap();
        for c in 0..3 {
            let plane = |t: &Tensor| t.data()[c * 256..(c + 1) * 256].to_vec();
            let (xs, ys) = (plane(&x), plane(&y));
            let (lo, hi) = (xs.iter().cloned().fold(f64::MAX, f64::min), xs.iter().cloned().fold(f64::MIN, f64::max));
            prop_assert!(ys.iter().all(|&v| v >= lo - 1e-15 && v <= hi + 1e-15));
        }
    }

    #[test]
    fn identity_morph_patch_is_average_pooling(seed in any::<u64>(), ph in 1usize..4, pw in 1usize..4) {
        let mut r = rng(seed);
        let (h, w) = (ph * 3, pw * 2);
        let x = uniform(&[2, h, w], &mut r);
        let grid = PatchGrid::new(h, w, (ph, pw)).unwrap();
        let a = morph_patch_extract(&x, &DeformationField::identity(h, w), &grid).unwrap();
        prop_assert!(max_abs_diff(&a, &patch_pool(&x, &grid).unwrap()) < 1e-12);
    }

    #[test]
    fn morph_patch_is_linear_in_features(seed in any::<u64>(), a in -2.0f64..2.0) {
        let mut r = rng(seed);
        let (x, y) = (uniform(&[2, 8, 8], &mut r), uniform(&[2, 8, 8], &mut r));
        let phi = exponentiate(&random_smooth_velocity(8, 8, 1.0, 2.0, &mut r).unwrap(), 7).unwrap();
        let grid = PatchGrid::new(8, 8, (2, 2)).unwrap();
        let mut comb = x.scale(a);
        comb.axpy(1.0, &y).unwrap();
        let mut rhs = morph_patch_extract(&x, &phi, &grid).unwrap().scale(a);
        rhs.axpy(1.0, &morph_patch_extract(&y, &phi, &grid).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&morph_patch_extract(&comb, &phi, &grid).unwrap(), &rhs) < 1e-12);
    }

    #[test]
    fn window_and_shift_round_trips(seed in any::<u64>(), nh in 1usize..4, nw in 1usize..4, sr in -5isize..5, sc in -5isize..5) {
        let mut r = rng(seed);
        let (h, w) = (nh * 4, nw * 2);
        let x = uniform(&[3, h, w], &mut r);
        let back = window_merge(&window_partition(&x, (4, 2)).unwrap(), h, w, (4, 2)).unwrap();
        prop_assert_eq!(&back, &x);
        let back = cyclic_unshift(&cyclic_shift(&x, (sr, sc)).unwrap(), (sr, sc)).unwrap();
        prop_assert_eq!(&back, &x);
    }

    #[test]
    fn cluster_assignments_and_attention_are_stochastic(seed in any::<u64>(), m in 1usize..20, n in 1usize..6) {
        let mut r = rng(seed);
        let f = uniform(&[m, 8], &mut r).scale(3.0);
        let cs = ClusterState::random(n, 8, r.gen_range(0.1..5.0), &mut r).unwrap();
        prop_assert!(rows_sum_to_one(&soft_assign(&f, &cs).unwrap(), n));
        let p = ScaParams::random(8, 2, &mut r).unwrap();
        let (_, cache) = sca_forward_cached(&f, &cs.cores, &p).unwrap();
        for a in &cache.attn {
            prop_assert!(rows_sum_to_one(a, n));
        }
    }

    #[test]
    fn core_update_ignores_token_order(seed in any::<u64>(), m in 2usize..20) {
        let mut r = rng(seed);
        let f = uniform(&[m, 4], &mut r);
        let cs = ClusterState::random(3, 4, 1.0, &mut r).unwrap();
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let fp = Tensor::from_fn(&[m, 4], |i| f.data()[perm[i / 4] * 4 + i % 4]);
        for mode in [CoreUpdate::Residual, CoreUpdate::Verbatim] {
            let a = update_cores(&f, &cs, mode).unwrap();
            let b = update_cores(&fp, &cs, mode).unwrap();
            prop_assert!(max_abs_diff(&a, &b) < 1e-12);
        }
    }
}

/// Random union of discs and thick random walks.
fn random_mask(seed: u64) -> BinaryMask {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(8..24), r.gen_range(8..24));
    let mut m = BinaryMask::empty(h, w);
    for _ in 0..r.gen_range(1..4) {
        let (mut y, mut x) = (r.gen_range(0..h) as isize, r.gen_range(0..w) as isize);
        let rad: isize = r.gen_range(0..3);
        for _ in 0..r.gen_range(1..30) {
            for dy in -rad..=rad {
                for dx in -rad..=rad {
                    let (py, px) = (y + dy, x + dx);
                    if dy * dy + dx * dx <= rad * rad && py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                        m.set(py as usize, px as usize, true);
                    }
                }
            }
            y = (y + r.gen_range(-1..=1)).clamp(0, h as isize - 1);
            x = (x + r.gen_range(-1..=1)).clamp(0, w as isize - 1);
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn skeleton_is_idempotent_and_keeps_components(seed in any::<u64>()) {
        let m = random_mask(seed);
        let s = skeletonize(&m);
        let again = skeletonize(s.mask());
        prop_assert_eq!(again.mask(), s.mask());
        prop_assert_eq!(count_components(s.mask()), count_components(&m));
        prop_assert!(s.mask().is_subset_of(&m));
    }

    #[test]
    fn overlap_scores_are_bounded_and_symmetric(a in any::<u64>(), b in any::<u64>()) {
        let p = random_mask(a);
        let g0 = random_mask(b);
        // same extent for both masks
        let g = BinaryMask::new(p.height(), p.width(), (0..p.height() * p.width())
            .map(|i| g0.get((i / p.width()) % g0.height(), (i % p.width()) % g0.width())).collect()).unwrap();
        let (d, j, c) = (binary_dice(&p, &g).unwrap(), binary_iou(&p, &g).unwrap(), cl_dice(&p, &g).unwrap());
        for v in [d, j, c] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(d >= j - 1e-15);
        prop_assert_eq!(d, binary_dice(&g, &p).unwrap());
        prop_assert_eq!(c, cl_dice(&g, &p).unwrap());
    }
}

#[test]
fn jacobian_of_identity_is_one() {
    let j = jacobian_determinant(&exponentiate(&VelocityField::zeros(9, 7), 5).unwrap()).unwrap();
    assert!(j.data().iter().all(|&v| v == 1.0));
}

#[test]
fn zero_velocity_gives_identity_for_every_step_count() {
    for n in 1..=10 {
        assert!(exponentiate(&VelocityField::zeros(6, 5), n).unwrap().offsets().data().iter().all(|&v| v == 0.0));
    }
}
