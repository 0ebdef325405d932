use proptest::prelude::*;

use kvlab::cost::{self, measured_cache_bytes};
use kvlab::diversity::{center_gram, GramMatrix};
use kvlab::linalg::softmax;
use kvlab::{
    gram, init_weights, prefill, svd_truncate, AttentionConfig, BilinearFormSet, CostQuery, DecodeCache, Matrix,
    Mechanism, RngSpec, SpectrumReport,
};

fn mechanism() -> impl Strategy<Value = Mechanism> {
    prop::sample::select(Mechanism::ALL.to_vec())
}

/// Small valid config for any mechanism.
fn config() -> impl Strategy<Value = AttentionConfig> {
    (mechanism(), 1usize..5, 1usize..6, 0usize..6, 1usize..8).prop_map(|(m, h, dh, r, dc)| {
        let groups = (1..=h).rev().find(|g| h % g == 0 && *g <= 2).unwrap_or(1);
        AttentionConfig::new(m, h, dh)
            .with_rank(r.min(h * dh))
            .with_latent(dc.min(h * dh))
            .with_groups(groups)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_row_stochastic(logits in prop::collection::vec(-500.0f64..500.0, 1..40)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn appends_match_prefill(config in config(), t in 1usize..8, split in 0usize..8, seed in any::<u64>()) {
        let split = split.min(t);
        let w = init_weights::<f64>(&config, RngSpec::new(seed)).unwrap();
        let x: Matrix<f64> = RngSpec::new(seed).generator(1).matrix(t, config.d, 1.0);
        let whole = prefill(&w, &x, t).unwrap();
        let mut grown = prefill(&w, &x.top_rows(split), t).unwrap();
        for i in split..t {
            grown.append(&w, x.row(i)).unwrap();
        }
        prop_assert_eq!(whole, grown);
    }

    #[test]
    fn measured_bytes_match_closed_form(config in config(), t in 0usize..20, bytes in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let w = init_weights::<f32>(&config, RngSpec::new(0)).unwrap();
        let cache = DecodeCache::with_capacity(&w, t);
        let q = CostQuery::new(config, t).with_bytes(bytes).with_mla_streams(1);
        prop_assert_eq!(measured_cache_bytes(&cache, bytes), cost::cache_bytes(&q).unwrap());
    }

    #[test]
    fn cache_grows_with_tokens_batch_and_rank(h in 1usize..33, r in 0usize..128, t in 0usize..4096, b in 1usize..8) {
        let c = AttentionConfig::new(Mechanism::Lrkv, h, 128).with_rank(r);
        let at = |c: &AttentionConfig, t, b| cost::cache_bytes(&CostQuery::new(c.clone(), t).with_batch(b)).unwrap();
        prop_assert!(at(&c, t, b) <= at(&c, t + 1, b));
        prop_assert!(at(&c, t, b) <= at(&c, t, b + 1));
        prop_assert!(at(&c, t, b) <= at(&c.clone().with_rank(r + 1), t, b));
        prop_assert!(cost::cache_ratio(&c).unwrap() < cost::cache_ratio(&c.clone().with_rank(r + 1)).unwrap());
    }

    #[test]
    fn centering_is_idempotent_and_zero_sum(n in 1usize..9, seed in any::<u64>()) {
        let b: Matrix<f64> = RngSpec::new(seed).generator(0).matrix(n, n, 1.0);
        let g = GramMatrix::new(b.add(&b.transpose()), false, false).unwrap();
        let once = center_gram(&g);
        let twice = center_gram(&once);
        prop_assert!(once.values.max_abs_diff(&twice.values) <= 1e-12);
        for i in 0..n {
            prop_assert!(once.values.row(i).iter().sum::<f64>().abs() <= 1e-9);
            prop_assert!(once.values.column(i).iter().sum::<f64>().abs() <= 1e-9);
        }
    }

    #[test]
    fn effective_rank_bounds(values in prop::collection::vec(0.0f64..10.0, 1..12)) {
        prop_assume!(values.iter().sum::<f64>() > 1e-9);
        let s = SpectrumReport::from_eigenvalues(&values).unwrap();
        let n = values.len() as f64;
        prop_assert!(s.effective_rank_abs >= 1.0 && s.effective_rank_abs <= n);
        let uniform = values.iter().all(|&v| v == values[0]);
        prop_assert_eq!(uniform, (s.effective_rank_abs - n).abs() < 1e-9);
        prop_assert!((s.cumulative_variance.last().unwrap() - 1.0).abs() < 1e-9);
        prop_assert!(s.n_components_for_90pct >= 1);
    }

    #[test]
    fn normalized_gram_is_a_cosine_matrix(h in 1usize..7, d in 1usize..7, dh in 1usize..4, seed in any::<u64>()) {
        let mut g = RngSpec::new(seed).generator(0);
        let q = (0..h).map(|_| g.matrix(d, dh, 1.0)).collect();
        let k = (0..h).map(|_| g.matrix(d, dh, 1.0)).collect();
        let forms = BilinearFormSet::from_factors(q, k).unwrap();
        let s = gram(&forms, true).unwrap();
        for i in 0..h {
            prop_assert!((s.values[(i, i)] - 1.0).abs() <= 1e-9);
            for j in 0..h {
                prop_assert_eq!(s.values[(i, j)], s.values[(j, i)]);
                prop_assert!(s.values[(i, j)].abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn svd_error_shrinks_with_rank(rows in 1usize..9, cols in 1usize..6, seed in any::<u64>()) {
        let w: Matrix<f64> = RngSpec::new(seed).generator(0).matrix(rows, cols, 1.0);
        let errs: Vec<f64> = (0..=rows.min(cols)).map(|r| svd_truncate(&w, r).unwrap().residual_error).collect();
        for pair in errs.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12);
        }
        prop_assert!(*errs.last().unwrap() <= 1e-9 * w.frobenius_norm().max(1.0));
    }
}
