mod common;

use adarank::adapt::{binarize, init_mask, sigmoid, InitPolicy};
use adarank::analysis::{average_ranks, export_mask_heatmap, parse_mask_heatmap, spearman};
use adarank::checkpoint::Checkpoint;
use adarank::linalg::{reconstruct_components, svd_thin, Matrix};
use adarank::merge::{merge_masked, merge_task_arithmetic, Lambda, MaskBits};
use adarank::nn::entropy_loss;
use adarank::spectral::{build_task_vectors, decompose, intrinsic_rank, BaseKind};
use adarank::nn::Backbone;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    })
}

fn toy_set(seed: u64, tasks: usize) -> (adarank::spectral::TaskVectorSet, adarank::spectral::SpectralSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Backbone(vec![common::random_matrix(&mut rng, 6, 5, 1.0), common::random_matrix(&mut rng, 6, 3, 1.0)]);
    let fts: Vec<Backbone> = (0..tasks)
        .map(|_| {
            Backbone(
                base.layers()
                    .iter()
                    .map(|b| b.add(&common::random_matrix(&mut rng, b.rows(), b.cols(), 0.5)).unwrap())
                    .collect(),
            )
        })
        .collect();
    let tv = build_task_vectors(&base, &fts, BaseKind::Pretrained).unwrap();
    let sp = decompose(&tv, false).unwrap();
    (tv, sp)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_factors_are_orthonormal_ordered_and_reconstruct(a in matrix(24, 18)) {
        let svd = svd_thin(&a).unwrap();
        let k = svd.rank();
        prop_assert_eq!(k, a.rows().min(a.cols()));
        for f in [&svd.u, &svd.v] {
            prop_assert!(f.t_matmul(f).unwrap().sub(&Matrix::identity(k)).unwrap().max_abs() < 1e-10);
        }
        prop_assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(svd.s.iter().all(|&s| s >= 0.0));
        let all: Vec<usize> = (0..k).collect();
        let back = reconstruct_components(&svd, &all).unwrap();
        prop_assert!(back.sub(&a).unwrap().frobenius_norm() <= 1e-10 * a.frobenius_norm().max(1.0));
    }

    #[test]
    fn svd_sign_convention_and_determinism(a in matrix(16, 16)) {
        let s1 = svd_thin(&a).unwrap();
        let s2 = svd_thin(&a.clone()).unwrap();
        prop_assert_eq!(&s1, &s2);
        for r in 0..s1.rank() {
            let col = s1.u.column(r);
            let big = col.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            prop_assert!(big > 0.0);
        }
    }

    #[test]
    fn eckart_young_against_random_subsets(a in matrix(12, 10), seed in any::<u64>()) {
        let svd = svd_thin(&a).unwrap();
        let n = svd.rank();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 1..n {
            let top: Vec<usize> = (0..k).collect();
            let best = reconstruct_components(&svd, &top).unwrap().sub(&a).unwrap().frobenius_norm();
            let mut idx: Vec<usize> = (0..n).collect();
            for _ in 0..100 / n.max(1) + 1 {
                idx.shuffle(&mut rng);
                let err = reconstruct_components(&svd, &idx[..k]).unwrap().sub(&a).unwrap().frobenius_norm();
                prop_assert!(best <= err + 1e-9 * a.frobenius_norm().max(1.0));
            }
        }
    }

    #[test]
    fn intrinsic_rank_monotone_and_scale_free(
        mut s in prop::collection::vec(0.0f64..5.0, 1..20),
        f1 in 0.01f64..1.0,
        f2 in 0.01f64..1.0,
        c in 0.01f64..100.0,
    ) {
        s.sort_by(|a, b| b.total_cmp(a));
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        prop_assert!(intrinsic_rank(&s, lo) <= intrinsic_rank(&s, hi));
        let scaled: Vec<f64> = s.iter().map(|x| x * c).collect();
        // the ratio can straddle a threshold by rounding only
        let (a, b) = (intrinsic_rank(&s, hi), intrinsic_rank(&scaled, hi));
        prop_assert!(a.abs_diff(b) <= 1);
    }

    #[test]
    fn entropy_shift_invariant(logits in matrix(6, 7), shift in -50.0f64..50.0) {
        let shifted = Matrix::from_fn(logits.rows(), logits.cols(), |i, j| logits.get(i, j) + shift);
        prop_assert!((entropy_loss(&logits) - entropy_loss(&shifted)).abs() < 1e-12);
    }

    #[test]
    fn binarize_is_sigmoid_threshold(logits in prop::collection::vec(-100.0f64..100.0, 1..50), t in 0.1f64..20.0) {
        let bits = binarize(&logits, t);
        for (b, l) in bits.iter().zip(&logits) {
            prop_assert_eq!(*b, sigmoid(l / t) >= 0.5);
        }
    }

    #[test]
    fn masked_merge_reductions(seed in 0u64..1000, lam in -2.0f64..2.0) {
        let (tv, sp) = toy_set(seed, 3);
        let lambda = Lambda::tied(lam, 3, 2);
        let ones = merge_masked(&tv.base, &sp, &MaskBits::all_ones(&sp), &lambda).unwrap();
        let ta = merge_task_arithmetic(&tv, &lambda).unwrap();
        let zeros = merge_masked(&tv.base, &sp, &MaskBits::all_zeros(&sp), &lambda).unwrap();
        for l in 0..2 {
            prop_assert!(ones[l].sub(&ta[l]).unwrap().frobenius_norm() <= 1e-10 * ta[l].frobenius_norm().max(1.0));
            prop_assert_eq!(&zeros[l], &tv.base[l]);
        }
    }

    #[test]
    fn masked_merge_homogeneous_in_lambda(seed in 0u64..1000, c in -3.0f64..3.0) {
        let (tv, sp) = toy_set(seed, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = MaskBits::from_fn(&sp, |_, _, _| rand::Rng::random_bool(&mut rng, 0.5));
        let lambda = Lambda { values: vec![vec![0.3, -0.7], vec![1.1, 0.2]] };
        let scaled = Lambda { values: lambda.values.iter().map(|r| r.iter().map(|v| c * v).collect()).collect() };
        let a = merge_masked(&tv.base, &sp, &bits, &lambda).unwrap();
        let b = merge_masked(&tv.base, &sp, &bits, &scaled).unwrap();
        for l in 0..2 {
            let da = a[l].sub(&tv.base[l]).unwrap().scale(c);
            let db = b[l].sub(&tv.base[l]).unwrap();
            prop_assert!(db.sub(&da).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn init_mask_reproduces_policy(seed in 0u64..1000, f in 0.05f64..1.0, t in 0.5f64..20.0) {
        let (_, sp) = toy_set(seed, 2);
        let state = init_mask(InitPolicy::TopFraction(f), &sp, Lambda::tied(1.0, 2, 2), t).unwrap();
        let expected = MaskBits::top_k(&sp, adarank::merge::TopkRule::Fraction(f)).unwrap();
        prop_assert_eq!(state.bits(), expected);
    }

    #[test]
    fn checkpoint_bytes_round_trip(ms in prop::collection::vec(matrix(5, 5), 0..5), note in "[a-z]{0,12}") {
        let mut c = Checkpoint::new();
        for (i, m) in ms.iter().enumerate() {
            c.push(format!("t{i}"), m.clone()).unwrap();
        }
        c.set_manifest("note", serde_json::json!(note));
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn heatmap_round_trip(seed in 0u64..1000, p in 0.0f64..1.0) {
        let (_, sp) = toy_set(seed, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = MaskBits::from_fn(&sp, |_, _, _| rand::Rng::random_bool(&mut rng, p));
        prop_assert_eq!(parse_mask_heatmap(&export_mask_heatmap(&bits).cells).unwrap(), bits);
    }

    #[test]
    fn rank_statistics(x in prop::collection::vec(-5i32..5, 2..30), y in prop::collection::vec(-5i32..5, 2..30)) {
        let n = x.len().min(y.len());
        let a: Vec<f64> = x[..n].iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = y[..n].iter().map(|&v| v as f64).collect();
        let ranks = average_ranks(&a);
        prop_assert!((ranks.iter().sum::<f64>() - (n * (n + 1)) as f64 / 2.0).abs() < 1e-9);
        if let Some(rho) = spearman(&a, &b) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
            prop_assert!((spearman(&b, &a).unwrap() - rho).abs() < 1e-12);
        }
        if let Some(rho) = spearman(&a, &a) {
            prop_assert!((rho - 1.0).abs() < 1e-12);
        }
    }
}
