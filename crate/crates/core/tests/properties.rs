use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

use mifl_core::data::{split_train_test, synth_generate, SynthConfig};
use mifl_core::eval::{cmc, fuse_scores, ScoreMatrix};
use mifl_core::features::{block_ranges, image_descriptors, stripe_bounds, ImageRgb, DESCRIPTOR_DIM};
use mifl_core::kernelmap::{chi2_distance, kernel_map, ExemplarSet};
use mifl_core::metric::{decision_f, MetricParams};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{i:02}")).collect()
}

fn score_matrix(n: usize) -> impl Strategy<Value = ScoreMatrix> {
    prop::collection::vec(-5i32..5, n * n).prop_map(move |v| {
        let m = DMatrix::from_iterator(n, n, v.into_iter().map(f64::from));
        ScoreMatrix::new(m, ids(n), ids(n)).unwrap()
    })
}

fn histogram(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_map(|mut v| {
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            v.iter_mut().for_each(|x| *x /= s);
        }
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn descriptors_satisfy_block_invariants(w in 5usize..12, h in 6usize..40, seed in any::<u64>()) {
        let img = ImageRgb::from_fn(w, h, |x, y| {
            let v = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add((x * 131 + y * 71) as u64);
            [(v >> 8) as u8, (v >> 24) as u8, (v >> 40) as u8]
        }).unwrap();
        for d in image_descriptors(&img).unwrap() {
            prop_assert_eq!(d.values().len(), DESCRIPTOR_DIM);
            prop_assert!(d.values().iter().all(|&v| v >= 0.0));
            for r in block_ranges() {
                let s: f64 = d.values()[r].iter().sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stripes_partition_rows(h in 6usize..500) {
        let b = stripe_bounds(h, 6).unwrap();
        prop_assert_eq!(b[0].0, 0);
        prop_assert_eq!(b[5].1, h);
        for w in b.windows(2) {
            prop_assert_eq!(w[0].1, w[1].0);
        }
        prop_assert!(b.iter().all(|(s, e)| e > s));
    }

    #[test]
    fn cmc_bounded_monotone_complete(s in score_matrix(7)) {
        let c = cmc(&s).unwrap();
        prop_assert!(c.rates.iter().all(|&r| (0.0..=1.0).contains(&r)));
        prop_assert!(c.rates.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(c.at_rank(7), 1.0);
    }

    #[test]
    fn cmc_ignores_monotone_row_transforms(s in score_matrix(6), scales in prop::collection::vec(0.1f64..10.0, 6)) {
        let mut t = s.scores().clone();
        for (i, mut row) in t.row_iter_mut().enumerate() {
            row.apply(|v| *v = scales[i] * *v + v.powi(3) - 3.0 * i as f64);
        }
        let t = ScoreMatrix::new(t, ids(6), ids(6)).unwrap();
        prop_assert_eq!(cmc(&s).unwrap(), cmc(&t).unwrap());
    }

    #[test]
    fn fused_scores_are_bounded(a in score_matrix(5), b in score_matrix(5)) {
        let f = fuse_scores(&[a, b]).unwrap();
        prop_assert!(f.scores().iter().all(|&v| (0.0..=2.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn chi2_is_a_symmetric_nonnegative_distance(x in histogram(20), y in histogram(20)) {
        let d = chi2_distance(&x, &y).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - chi2_distance(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert_eq!(chi2_distance(&x, &x).unwrap(), 0.0);
        prop_assert!(d <= 2.0 + 1e-12);
    }

    #[test]
    fn kernel_responses_in_unit_interval(ex in prop::collection::vec(histogram(12), 2..6), x in histogram(12), bw in 0.01f64..10.0) {
        let set = ExemplarSet::new(ex.clone(), bw).unwrap();
        let k = kernel_map(&x, &set).unwrap();
        prop_assert_eq!(k.len(), ex.len());
        prop_assert!(k.iter().all(|&v| v > 0.0 && v <= 1.0));
        let self_k = kernel_map(&ex[0], &set).unwrap();
        prop_assert!((self_k[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn metric_factors_are_psd_and_nsd(dim in 2usize..8, ra in 1usize..8, rb in 1usize..8, seed in any::<u64>()) {
        let p = MetricParams::random(dim, ra.min(dim), rb.min(dim), seed);
        let a = SymmetricEigen::new(p.a()).eigenvalues;
        let b = SymmetricEigen::new(p.b()).eigenvalues;
        prop_assert!(a.min() >= -1e-10);
        prop_assert!(b.max() <= 1e-10);
    }

    #[test]
    fn metric_decision_is_symmetric_in_its_arguments(dim in 2usize..6, seed in any::<u64>(), k in prop::collection::vec(-1.0f64..1.0, 12)) {
        let p = MetricParams::random(dim, dim, dim, seed);
        let x = DVector::from_column_slice(&k[..dim]);
        let y = DVector::from_column_slice(&k[6..6 + dim]);
        let f1 = decision_f(&p, &x, &y).unwrap();
        let f2 = decision_f(&p, &y, &x).unwrap();
        prop_assert!((f1 - f2).abs() <= 1e-12 * f1.abs().max(1.0));
    }

    #[test]
    fn splits_are_disjoint_and_cover(n in 3usize..20, seed in any::<u64>(), frac in 0.1f64..0.9) {
        let d = synth_generate(&SynthConfig { n_identities: n, latent_dim: 2, seed, ..SynthConfig::default() }).unwrap();
        let p = ((n as f64 * frac) as usize).clamp(1, n - 1);
        let (tr, te) = split_train_test(&d, p, seed).unwrap();
        let a: BTreeSet<_> = tr.identities().into_iter().collect();
        let b: BTreeSet<_> = te.identities().into_iter().collect();
        prop_assert_eq!(a.len(), p);
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), n);
        prop_assert_eq!(split_train_test(&d, p, seed).unwrap(), (tr, te));
    }
}
