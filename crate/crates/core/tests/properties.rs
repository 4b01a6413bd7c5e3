mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use xpert_core::adaptation::{adapt, reconstruct_gamma, resample_indices, AdaptationSpec, SvdRank};
use xpert_core::checkpoint::{decode_checkpoint, encode_checkpoint, TensorMap};
use xpert_core::consolidation::{consolidate, ConsolidationOptions, TuckerMethod};
use xpert_core::init::xavier_uniform;
use xpert_core::selection::top_n_by_score;
use xpert_core::svd::truncated_svd;
use xpert_core::tensor::{fold, mode_product, unfold};
use xpert_core::{Matrix, Tensor, TuckerRanks};

use common::{gradient_check, random_matrix, random_tensor, rng, tiny_dense};

fn shape3() -> impl Strategy<Value = [usize; 3]> {
    [1usize..=6, 1usize..=6, 1usize..=6]
}

fn tensor3() -> impl Strategy<Value = Tensor<f64>> {
    (shape3(), any::<u64>()).prop_map(|(shape, seed)| random_tensor(&mut rng(seed, "prop.tensor"), &shape))
}

fn matrix(max: usize) -> impl Strategy<Value = Matrix<f64>> {
    (1..=max, 1..=max, any::<u64>()).prop_map(|(r, c, seed)| random_matrix(&mut rng(seed, "prop.matrix"), r, c))
}

fn full_ranks(z: &Tensor<f64>) -> ConsolidationOptions {
    let s = z.shape();
    ConsolidationOptions { ranks: TuckerRanks::new(s[0], s[1], s[2]), method: TuckerMethod::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unfold_then_fold_is_identity(t in tensor3(), mode in 0usize..3) {
        let m = unfold(&t, mode).unwrap();
        prop_assert_eq!(m.rows(), t.shape()[mode]);
        prop_assert_eq!(fold(&m, mode, t.shape()).unwrap(), t);
    }

    #[test]
    fn mode_product_is_linear(t in tensor3(), mode in 0usize..3, seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut r = rng(seed, "prop.linear");
        let u = random_tensor(&mut r, t.shape());
        let m = random_matrix(&mut r, 3, t.shape()[mode]);
        let sum = Tensor::new(t.shape().to_vec(), t.data().iter().zip(u.data()).map(|(a, b)| alpha * a + b).collect()).unwrap();
        let lhs = mode_product(&sum, &m, mode).unwrap();
        let (pt, pu) = (mode_product(&t, &m, mode).unwrap(), mode_product(&u, &m, mode).unwrap());
        let rhs = Tensor::new(pt.shape().to_vec(), pt.data().iter().zip(pu.data()).map(|(a, b)| alpha * a + b).collect()).unwrap();
        prop_assert!(lhs.distance(&rhs) <= 1e-12 * (1.0 + rhs.frobenius_norm()));
    }

    #[test]
    fn gamma_ignores_slice_order(t in tensor3(), seed in any::<u64>()) {
        let n = t.shape()[2];
        let slices: Vec<Matrix<f64>> = (0..n).map(|k| t.frontal_slice(k)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng(seed, "prop.shuffle"));
        let shuffled = Tensor::stack_slices(&order.iter().map(|&k| slices[k].clone()).collect::<Vec<_>>()).unwrap();
        let a = reconstruct_gamma(&consolidate(&t, &full_ranks(&t)).unwrap());
        let b = reconstruct_gamma(&consolidate(&shuffled, &full_ranks(&shuffled)).unwrap());
        prop_assert!(a.relative_error(&b) <= 1e-9, "{}", a.relative_error(&b));
    }

    #[test]
    fn adapt_is_positively_homogeneous(g in matrix(8), t_in in 1usize..12, t_out in 1usize..12, alpha in 0.1f64..10.0) {
        let spec = AdaptationSpec::new(t_in, t_out, SvdRank::Full);
        let base = adapt(&g, &spec).unwrap().m_hat;
        let scaled = adapt(&g.scale(alpha), &spec).unwrap().m_hat;
        prop_assert!(scaled.max_abs_diff(&base.scale(alpha)) <= 1e-9 * alpha * (1.0 + g.frobenius_norm()));
    }

    #[test]
    fn contraction_keeps_nested_sets(scores in prop::collection::vec(0.0f64..1.0, 1..20), a in 1usize..20, b in 1usize..20) {
        let d = scores.len();
        let (small, large) = (a.min(b).min(d), a.max(b).min(d));
        let s = resample_indices(&scores, small);
        let l = resample_indices(&scores, large);
        prop_assert!(s.iter().all(|i| l.contains(i)));
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn expansion_keeps_every_source_row_first(scores in prop::collection::vec(0.0f64..1.0, 1..10), extra in 1usize..25) {
        let d = scores.len();
        let idx = resample_indices(&scores, d + extra);
        prop_assert_eq!(&idx[..d], &(0..d).collect::<Vec<_>>()[..]);
        prop_assert!(idx[d..].iter().all(|&i| i < d));
    }

    #[test]
    fn adapted_rank_is_bounded(g in matrix(8), t_in in 1usize..12, t_out in 1usize..12, frac in 0.0f64..1.0) {
        let max_rank = g.rows().min(g.cols());
        let r = 1 + ((max_rank - 1) as f64 * frac) as usize;
        let h = adapt(&g, &AdaptationSpec::new(t_in, t_out, SvdRank::Fixed(r))).unwrap().m_hat;
        let k = h.rows().min(h.cols());
        let svd = truncated_svd(&h, k).unwrap();
        let top = svd.s.first().copied().unwrap_or(0.0);
        prop_assert!(svd.s.iter().skip(r).all(|&s| s <= 1e-9 * (1.0 + top)), "rank {r}: {:?}", svd.s);
    }

    #[test]
    fn selection_picks_the_best_scores(scores in prop::collection::vec(-1.0f64..1.0, 1..40), n in 1usize..40) {
        let n = n.min(scores.len());
        let picked = top_n_by_score(&scores, n);
        prop_assert_eq!(picked.len(), n);
        for &i in &picked {
            for j in (0..scores.len()).filter(|j| !picked.contains(j)) {
                prop_assert!(scores[i] > scores[j] || (scores[i] == scores[j] && i < j));
            }
        }
    }

    #[test]
    fn checkpoint_round_trips(tensors in prop::collection::btree_map("[a-z][a-z0-9_]{0,6}(\\.[0-9]{1,2})?", (prop::collection::vec(1usize..5, 1..4), any::<u64>()), 1..5)) {
        let mut map = TensorMap::new();
        for (name, (shape, seed)) in tensors {
            let len = shape.iter().product();
            let mut r = rng(seed, "prop.ckpt");
            let data = (0..len).map(|_| common::normal(&mut r) as f32).collect();
            map.insert(name, Tensor::new(shape, data).unwrap());
        }
        let bytes = encode_checkpoint(&map).unwrap();
        prop_assert_eq!(bytes.len() % 4, 0);
        prop_assert_eq!(decode_checkpoint(&bytes).unwrap(), map.clone());
        prop_assert_eq!(encode_checkpoint(&map).unwrap(), bytes);
    }

    #[test]
    fn keyed_init_is_deterministic_and_bounded(seed in any::<u64>(), rows in 1usize..20, cols in 1usize..20) {
        let a: Matrix<f32> = xavier_uniform(seed, "block.0.ffn.w_in", rows, cols);
        prop_assert_eq!(&a, &xavier_uniform(seed, "block.0.ffn.w_in", rows, cols));
        prop_assert_ne!(&a, &xavier_uniform(seed, "block.0.ffn.w_out", rows, cols));
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        prop_assert!(a.data().iter().all(|&x| (x as f64).abs() <= bound * (1.0 + 1e-6)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn analytic_gradients_match_finite_differences(seed in any::<u64>()) {
        let (model, data) = tiny_dense(seed);
        for (name, err) in gradient_check(&model, &data, 1e-4) {
            prop_assert!(err <= 1e-5, "{}: {}", name, err);
        }
    }
}
