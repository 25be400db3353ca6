//! Property tests over randomly generated inputs.

use proptest::collection::vec;
use proptest::prelude::*;
use shape_transfer::data::{epoch_permutation, preprocess};
use shape_transfer::image::LabelMask;
use shape_transfer::imageio::Raster;
use shape_transfer::losses::{self, AdversarialTerms, CycleTerms, LossWeights};
use shape_transfer::manifest::Domain;
use shape_transfer::metrics::{self, asd, dice, hd, jaccard, BoundarySet, Spacing};
use shape_transfer::phantom::{generate_sample, PhantomSpec};
use shape_transfer::train::argmax_labels;
use shape_transfer::Tensor;

fn mask_pair(n: usize) -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (vec(any::<bool>(), n), vec(any::<bool>(), n))
}

fn boundary(region: &[bool], side: usize) -> BoundarySet {
    let pts = metrics::boundary_of(region, side, side);
    BoundarySet::new(pts.into_iter().map(|(y, x)| [0, y as i64, x as i64]).collect(), Spacing::default())
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overlap_scores_are_symmetric_and_bounded((a, b) in mask_pair(64)) {
        let d = dice(&a, &b).unwrap();
        let j = jaccard(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert_eq!(j, jaccard(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(j <= d + 1e-15);
        prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
    }

    #[test]
    fn self_overlap_is_perfect(a in vec(any::<bool>(), 64)) {
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn hausdorff_bounds_average_distance((a, b) in mask_pair(100)) {
        let (ba, bb) = (boundary(&a, 10), boundary(&b, 10));
        match (asd(&ba, &bb), hd(&ba, &bb)) {
            (Some(s), Some(h)) => {
                prop_assert!(s >= 0.0);
                prop_assert!(h + 1e-12 >= s);
                prop_assert_eq!(Some(h), hd(&bb, &ba));
                prop_assert!((asd(&bb, &ba).unwrap() - s).abs() < 1e-12);
            }
            (None, None) => prop_assert!(ba.is_empty() || bb.is_empty()),
            other => prop_assert!(false, "inconsistent definedness {:?}", other),
        }
        if !ba.is_empty() {
            prop_assert_eq!(hd(&ba, &ba), Some(0.0));
        }
    }

    #[test]
    fn distances_scale_with_isotropic_spacing((a, b) in mask_pair(64), k in 0.25f64..4.0) {
        let (ba, bb) = (boundary(&a, 8), boundary(&b, 8));
        let s = Spacing { slice: k, row: k, col: k };
        let (sa, sb) = (BoundarySet::new(ba.points.clone(), s), BoundarySet::new(bb.points.clone(), s));
        if let (Some(h1), Some(h2)) = (hd(&ba, &bb), hd(&sa, &sb)) {
            prop_assert!((h2 - k * h1).abs() < 1e-9 * (1.0 + h2));
            prop_assert!((asd(&sa, &sb).unwrap() - k * asd(&ba, &bb).unwrap()).abs() < 1e-9 * (1.0 + h2));
        }
    }

    #[test]
    fn shape_loss_is_invariant_to_pixel_permutation(
        logits in vec(-5.0f64..5.0, 4 * 16),
        labels in vec(0u8..4, 16),
        perm in Just((0..16usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let base = losses::shape_loss(&labels, &tensor(&[1, 4, 4, 4], logits.clone())).unwrap();
        let mut pl = vec![0.0; 64];
        let mut pm = vec![0u8; 16];
        for (dst, &src) in perm.iter().enumerate() {
            pm[dst] = labels[src];
            for c in 0..4 {
                pl[c * 16 + dst] = logits[c * 16 + src];
            }
        }
        let permuted = losses::shape_loss(&pm, &tensor(&[1, 4, 4, 4], pl)).unwrap();
        prop_assert!((base - permuted).abs() < 1e-12);
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn shape_loss_ignores_logit_offsets(logits in vec(-5.0f64..5.0, 4 * 16), labels in vec(0u8..4, 16), c in -10.0f64..10.0) {
        let a = losses::shape_loss(&labels, &tensor(&[1, 4, 4, 4], logits.clone())).unwrap();
        let b = losses::shape_loss(&labels, &tensor(&[1, 4, 4, 4], logits.iter().map(|v| v + c).collect())).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn cycle_loss_is_symmetric_and_shift_exact(x in vec(-1.0f64..1.0, 16), y in vec(-1.0f64..1.0, 16), c in -1.0f64..1.0) {
        let (tx, ty) = (tensor(&[1, 1, 4, 4], x.clone()), tensor(&[1, 1, 4, 4], y.clone()));
        let (a1, a2, a) = losses::cycle_loss(&tx, &ty, &ty, &tx).unwrap();
        let (b1, b2, b) = losses::cycle_loss(&ty, &tx, &tx, &ty).unwrap();
        prop_assert!((a1 - b1).abs() < 1e-15 && (a2 - b2).abs() < 1e-15 && (a - b).abs() < 1e-15);
        let shifted = tx.map(|v| v + c);
        let (s1, s2, s) = losses::cycle_loss(&tx, &shifted, &ty, &ty).unwrap();
        prop_assert!((s1 - c.abs()).abs() < 1e-12);
        prop_assert_eq!(s2, 0.0);
        prop_assert!((s - c.abs() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn adversarial_value_is_bounded_and_mirrors(real in vec(-8.0f64..8.0, 16), fake in vec(-8.0f64..8.0, 16)) {
        let (r, f) = (tensor(&[1, 1, 4, 4], real), tensor(&[1, 1, 4, 4], fake));
        let v = losses::adversarial_loss_d(&r, &f).unwrap();
        prop_assert!(v <= 0.0);
        let mirrored = losses::adversarial_loss_d(&f.map(|s| -s), &r.map(|s| -s)).unwrap();
        prop_assert!((v - mirrored).abs() < 1e-12);
        prop_assert!(losses::adversarial_loss_g(&f).unwrap() >= 0.0);
    }

    #[test]
    fn objective_is_linear_in_weights(
        terms in vec(-3.0f64..3.0, 4), c1 in 0.0f64..2.0, c2 in 0.0f64..2.0, shape in 0.0f64..3.0,
        lc in 0.0f64..20.0, ls in 0.0f64..5.0,
    ) {
        let adv = AdversarialTerms { l_gan1: terms[0], l_gan2: terms[1], g_adv1: terms[2].abs(), g_adv2: terms[3].abs() };
        let cyc = CycleTerms { l_cyc1: c1, l_cyc2: c2, l_cyc: (c1 + c2) / 2.0 };
        let w = LossWeights { lambda_cyc: lc, lambda_shape: ls };
        let (r, t) = losses::total_objective(&adv, &cyc, shape, &w).unwrap();
        prop_assert!(r.is_consistent(&w));
        let (r0, _) = losses::total_objective(&adv, &cyc, shape, &LossWeights { lambda_cyc: 0.0, lambda_shape: 0.0 }).unwrap();
        prop_assert!((r.l_total - r0.l_total - lc * r.l_cyc - ls * shape).abs() < 1e-9);
        prop_assert!((t.discriminator + r.l_gan).abs() < 1e-15);
        prop_assert_eq!(t.segmentor, shape);
    }

    #[test]
    fn epoch_order_is_a_permutation(n in 1usize..300, seed in any::<u64>(), epoch in 0u64..1000) {
        let mut p = epoch_permutation(n, seed, epoch);
        prop_assert_eq!(&p, &epoch_permutation(n, seed, epoch));
        p.sort_unstable();
        prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn preprocessing_normalizes_and_resizes(
        (h, w) in (8usize..40, 8usize..40),
        seed in any::<u64>(),
        target in prop::sample::select(vec![16usize, 32]),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1000.0)).collect();
        let raw = Raster { width: w, height: h, pixels: px };
        let out = preprocess(&raw, target, Domain::Target).unwrap();
        prop_assert_eq!((out.height, out.width), (target, target));
        prop_assert!(out.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn argmax_picks_a_maximal_class(logits in vec(-3i32..3, 4 * 9)) {
        let t = tensor(&[1, 4, 3, 3], logits.iter().map(|&v| v as f64).collect());
        let m = &argmax_labels(&t).unwrap()[0];
        for p in 0..9 {
            let col: Vec<i32> = (0..4).map(|c| logits[c * 9 + p]).collect();
            let best = *col.iter().max().unwrap();
            let first = col.iter().position(|&v| v == best).unwrap();
            prop_assert_eq!(m.labels[p] as usize, first);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn phantom_geometry_nests(seed in any::<u64>(), target in any::<bool>()) {
        let spec = PhantomSpec { image_size: 48, ..PhantomSpec::default() };
        let domain = if target { Domain::Target } else { Domain::Source };
        let s = generate_sample(&spec, domain, seed).unwrap();
        let m: &LabelMask = &s.mask;
        prop_assert!(m.count(1) > 0 && m.count(2) > 0);
        prop_assert_eq!(s.image.pixels.len(), m.labels.len());
        // every LV pixel is enclosed by MYO: no LV pixel touches BG or RV
        for y in 0..m.height {
            for x in 0..m.width {
                if m.get(y, x) != 1 {
                    continue;
                }
                prop_assert!(y > 0 && x > 0 && y + 1 < m.height && x + 1 < m.width);
                for (ny, nx) in [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)] {
                    prop_assert!(matches!(m.get(ny, nx), 1 | 2), "LV pixel ({y},{x}) touches label {}", m.get(ny, nx));
                }
            }
        }
        prop_assert!(s.image.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
