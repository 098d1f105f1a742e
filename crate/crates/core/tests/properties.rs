use attmotion::autodiff::{Graph, ParamStore};
use attmotion::harness::{is_held_out, FeatureNorm};
use attmotion::motion::{flatten_tokens, rearrange_frames, TokenLayout};
use attmotion::vq::{codebook_perplexity, Codebook};
use attmotion::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_rows_are_distributions(
        logits in matrix(5, 6),
        blocked in prop::collection::vec(prop::collection::vec(any::<bool>(), 6), 5),
    ) {
        let mut mask = Tensor::zeros(&[5, 6]);
        for (r, row) in blocked.iter().enumerate() {
            for (c, &b) in row.iter().enumerate() {
                // keep the diagonal so no row is fully masked
                if b && r != c {
                    mask.row_mut(r)[c] = f64::NEG_INFINITY;
                }
            }
        }
        let mut g = Graph::new();
        let x = g.constant(logits);
        let y = g.masked_softmax(x, &mask).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for c in 0..6 {
                if mask.at(r, c) == f64::NEG_INFINITY {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn quantization_is_nearest_and_idempotent(book in matrix(12, 3), feats in matrix(20, 3)) {
        let cb = Codebook::new(book, 0.99, 1.0).unwrap();
        let q = cb.quantize(&feats).unwrap();
        for r in 0..20 {
            for k in 0..12 {
                let d: f64 = feats.row(r).iter().zip(cb.code(k)).map(|(a, b)| (a - b).powi(2)).sum();
                prop_assert!(q.sq_distances[r] <= d);
            }
        }
        let again = cb.quantize(&q.quantized).unwrap();
        for (&a, &b) in again.codes.codes.iter().zip(&q.codes.codes) {
            // a duplicate code may win the tie, but it must be the same vector
            prop_assert_eq!(cb.code(a), cb.code(b));
        }
    }

    #[test]
    fn rearrange_then_flatten_is_identity(frames in matrix(3, TokenLayout::toy().width(9))) {
        let layout = TokenLayout::toy();
        let tokens = rearrange_frames(&frames, &layout, 9).unwrap();
        prop_assert_eq!(flatten_tokens(&tokens, &layout, 9).unwrap(), frames);
    }

    #[test]
    fn feature_norm_round_trips(a in matrix(6, 4), b in matrix(3, 4)) {
        let norm = FeatureNorm::fit([&a, &b]).unwrap();
        let back = norm.denormalize(&norm.normalize(&a).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&a) < 1e-12);
        for &s in norm.std.data() {
            prop_assert!(s >= attmotion::harness::NORM_STD_FLOOR);
        }
    }

    #[test]
    fn perplexity_lies_between_one_and_used_codes(hist in prop::collection::vec(0u64..50, 1..40)) {
        prop_assume!(hist.iter().any(|&c| c > 0));
        let used = hist.iter().filter(|&&c| c > 0).count() as f64;
        let p = codebook_perplexity(&hist).unwrap();
        prop_assert!(p >= 1.0 - 1e-12 && p <= used + 1e-9);
    }

    #[test]
    fn held_out_membership_ignores_corpus_size(i in 0usize..10_000, extra in 1usize..500) {
        let (_, small) = attmotion::harness::split_indices(i + 1);
        let (_, large) = attmotion::harness::split_indices(i + 1 + extra);
        prop_assert_eq!(small.contains(&i), large.contains(&i));
        prop_assert_eq!(small.contains(&i), is_held_out(i));
    }

    #[test]
    fn backward_is_deterministic(w in matrix(4, 3), x in matrix(5, 4)) {
        let mut p = ParamStore::new();
        p.insert("w", w);
        let grads = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.param(&p, "w").unwrap();
            let h = g.matmul(xv, wv).unwrap();
            let h = g.gelu(h);
            let l = g.mean(h);
            g.backward(l).unwrap().into_param_grads()
        };
        prop_assert_eq!(grads(), grads());
    }
}
