//! Contrastive and hard-negative losses, the optimizer, and the training loop.

mod loss;
mod optim;
mod train;

pub use loss::{
    hard_info_nce, hard_info_nce_graph, hard_rank_loss, hard_rank_loss_graph, hard_sets, info_nce, info_nce_graph,
    total_loss, total_loss_graph, HardLoss, HardNegativeSets, LossConfig, LossValues, LossVars,
};
pub use optim::{lr_at, warmup_steps, Adam};
pub use train::{batch_loss, loss_and_grads, model_config_for, train, train_step, StepLog, TrainConfig, TrainFailure};

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{check_graph_fn, Graph, Tensor};

    fn random_square(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(b, b, (0..b * b).map(|_| rng.random_range(-1.0..1.5)).collect()).unwrap()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.row_iter().map(<[f64]>::to_vec).collect()
    }

    fn as_sets(v: &[Vec<usize>]) -> Vec<BTreeSet<usize>> {
        v.iter().map(|s| s.iter().copied().collect()).collect()
    }

    #[test]
    fn info_nce_cases() {
        assert_eq!(info_nce(&Tensor::matrix(1, 1, vec![0.37]).unwrap(), 0.1).unwrap(), 0.0);
        for b in [2, 5] {
            let uniform = Tensor::matrix(b, b, vec![0.2; b * b]).unwrap();
            assert!((info_nce(&uniform, 0.1).unwrap() - (b as f64).ln()).abs() < 1e-9);
        }
        let mut d = vec![0.0; 9];
        for i in 0..3 {
            d[i * 3 + i] = 3.0;
        }
        assert!(info_nce(&Tensor::matrix(3, 3, d).unwrap(), 0.1).unwrap() <= 1e-9);
        assert!(matches!(info_nce(&Tensor::zeros(vec![2, 3]), 0.1), Err(crate::NarvidError::Shape(_))));
    }

    #[test]
    fn hard_set_hand_case() {
        let s = Tensor::from_rows(&[
            [1.0, 0.9, 0.5, 0.2],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let sets = hard_sets(&s, &s, 1.0).unwrap();
        assert_eq!(sets.qv[0], vec![1]);
        assert!((sets.sigma_qv[0] - 0.320156211871642).abs() < 1e-12);

        let wide = hard_sets(&s, &s, 1e6).unwrap();
        for (i, h) in wide.unified.iter().enumerate() {
            assert_eq!(h, &(0..4).filter(|&j| j != i).collect::<Vec<_>>());
        }
        let none = hard_sets(&s, &s, 0.0).unwrap();
        assert!(none.unified.iter().chain(&none.unified_t).all(Vec::is_empty));

        let one = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        let sets = hard_sets(&one, &one, 1e6).unwrap();
        assert!(sets.unified[0].is_empty() && sets.unified_t[0].is_empty());
    }

    #[test]
    fn hard_sets_match_oracle_and_grow_with_lambda() {
        for seed in 0..50 {
            let b = 2 + (seed as usize % 7);
            let (a, c) = (random_square(b, seed), random_square(b, seed + 1000));
            let mut prev: Option<HardNegativeSets> = None;
            for lambda in [0.0, 0.7, 1.1, 1e6] {
                let sets = hard_sets(&a, &c, lambda).unwrap();
                let (orows, ocols) = narvid_oracle::hard_sets(&rows(&a), &rows(&c), lambda);
                assert_eq!(as_sets(&sets.unified), orows);
                assert_eq!(as_sets(&sets.unified_t), ocols);
                if let Some(p) = prev {
                    for (small, large) in p.unified.iter().zip(&sets.unified) {
                        assert!(small.iter().all(|j| large.contains(j)));
                    }
                }
                prev = Some(sets);
            }
        }
    }

    #[test]
    fn hinge_hand_cases() {
        // B = 2, row 0: S00 = 1.0, S01 = 0.9; row std is 0.05, so lambda = 1
        // and eta sets the margin directly.
        let s = Tensor::from_rows(&[[1.0, 0.9], [-5.0, 5.0]]).unwrap();
        let sets = HardNegativeSets {
            unified: vec![vec![1], vec![]],
            unified_t: vec![vec![], vec![]],
            ..hard_sets(&s, &s, 0.0).unwrap()
        };
        assert_eq!(hard_rank_loss(&s, &sets, 1.0, 1.0).unwrap(), 0.0);
        let l = hard_rank_loss(&s, &sets, 1.0, 4.0).unwrap();
        assert!((l - 0.1 / 4.0).abs() < 1e-12, "{l}");
        let empty = hard_sets(&s, &s, 0.0).unwrap();
        assert_eq!(hard_rank_loss(&s, &empty, 0.7, 1.8).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_identities() {
        let cfg = LossConfig::default();
        let (a, b) = (random_square(4, 1), random_square(4, 2));
        let full = total_loss(&a, &b, &cfg).unwrap();
        let want = narvid_oracle::total_loss(&rows(&a), &rows(&b), 0.7, 1.8, 1.0, 0.1);
        assert!((full.total - want).abs() < 1e-12, "{} vs {want}", full.total);

        let no_hard = total_loss(&a, &b, &LossConfig { alpha: 0.0, ..cfg }).unwrap();
        let nce = 0.5 * (info_nce(&a, 0.1).unwrap() + info_nce(&b, 0.1).unwrap());
        assert_eq!(no_hard.total.to_bits(), no_hard.l_nce.to_bits());
        assert_eq!(no_hard.l_nce.to_bits(), nce.to_bits());
        assert_eq!(no_hard.l_hard, 0.0);

        let one = Tensor::matrix(1, 1, vec![0.8]).unwrap();
        assert_eq!(total_loss(&one, &one, &cfg).unwrap().total, 0.0);
    }

    #[test]
    fn hard_info_nce_identities() {
        let s = random_square(5, 3);
        let none = hard_sets(&s, &s, 0.0).unwrap();
        let none = HardNegativeSets { unified: vec![vec![]; 5], unified_t: vec![vec![]; 5], ..none };
        assert_eq!(hard_info_nce(&s, &none, 0.1).unwrap(), 0.0);
        let full = hard_sets(&s, &s, 1e6).unwrap();
        assert!((hard_info_nce(&s, &full, 0.1).unwrap() - info_nce(&s, 0.1).unwrap()).abs() < 1e-12);
        for seed in 0..20 {
            let (a, c) = (random_square(6, seed), random_square(6, seed + 50));
            let sets = hard_sets(&a, &c, 0.7).unwrap();
            let (r, cl) = narvid_oracle::hard_sets(&rows(&a), &rows(&c), 0.7);
            let want = narvid_oracle::hard_info_nce(&rows(&a), &r, &cl, 0.1);
            assert!((hard_info_nce(&a, &sets, 0.1).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for variant in [HardLoss::Hinge, HardLoss::InfoNce] {
            let cfg = LossConfig { hard_loss: variant, ..LossConfig::default() };
            let report = check_graph_fn(
                |g: &mut Graph, v| Ok(total_loss_graph(g, v[0], v[1], &cfg)?.total),
                &[random_square(4, 7), random_square(4, 8)],
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "{variant:?}: {report:?}");
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(1e-3, 10, 100, 10), 1e-3);
        assert_eq!(lr_at(1e-3, 5, 100, 10), 5e-4);
        assert!(lr_at(1e-3, 100, 100, 10).abs() < 1e-18);
        assert_eq!(lr_at(1e-3, 1, 100, 0), 1e-3 * 0.5 * (1.0 + (std::f64::consts::PI / 100.0).cos()));
        assert_eq!(warmup_steps(0.1, 120), 12);
    }

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut p = vec![Tensor::vector(vec![0.5, -1.0]).unwrap()];
        let before = p.clone();
        let mut adam = Adam::new(&[2]);
        adam.step(&mut p, &[Tensor::zeros(vec![2])], 1e-2);
        assert_eq!(p, before);
        // a first step moves each weight by lr against the gradient sign
        let mut adam = Adam::new(&[2]);
        adam.step(&mut p, &[Tensor::vector(vec![3.0, -0.01]).unwrap()], 1e-2);
        assert!((p[0].data()[0] - (0.5 - 1e-2)).abs() < 1e-8);
        assert!((p[0].data()[1] - (-1.0 + 1e-2)).abs() < 1e-6);
    }

    #[test]
    fn config_parsing() {
        let cfg = TrainConfig::from_json(r#"{"alpha": 0, "batch_size": 4}"#).unwrap();
        assert_eq!((cfg.alpha, cfg.batch_size, cfg.p), (0.0, 4, 0.4));
        assert!(matches!(TrainConfig::from_json(r#"{"alpah": 0}"#), Err(crate::NarvidError::Config(_))));
        assert!(matches!(TrainConfig::from_json(r#"{"tau": 0}"#), Err(crate::NarvidError::Config(_))));
        assert!(matches!(TrainConfig::from_json(r#"{"p": 1.5}"#), Err(crate::NarvidError::Config(_))));
        let cfg = TrainConfig::from_json(r#"{"hard_loss": "info_nce", "top_k": 3}"#).unwrap();
        assert_eq!(cfg.hard_loss, HardLoss::InfoNce);
        assert_eq!(cfg.filter_mode(), crate::filtering::FilterMode::TopK(3));
    }

    fn dist_matrix() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (2usize..7).prop_flat_map(|b| (Just(b), prop::collection::vec(-1.0f64..1.0, b * b)))
    }

    proptest! {
        #[test]
        fn shift_invariance((b, data) in dist_matrix(), c in -3.0f64..3.0) {
            let s = Tensor::matrix(b, b, data.clone()).unwrap();
            let t = Tensor::matrix(b, b, data.iter().map(|v| v + c).collect()).unwrap();
            prop_assert!((info_nce(&s, 0.1).unwrap() - info_nce(&t, 0.1).unwrap()).abs() < 1e-9);
            let (hs, ht) = (hard_sets(&s, &s, 0.7).unwrap(), hard_sets(&t, &t, 0.7).unwrap());
            let same = hs.unified == ht.unified;
            // a gap within rounding of its threshold may legitimately flip
            let borderline = (0..b).any(|i| (0..b).any(|j| ((s.get(i, i) - s.get(i, j)) - 0.7 * hs.sigma_qv[i]).abs() < 1e-12));
            prop_assert!(same || borderline);
        }

        #[test]
        fn losses_are_non_negative((b, data) in dist_matrix()) {
            let s = Tensor::matrix(b, b, data).unwrap();
            prop_assert!(info_nce(&s, 0.1).unwrap() >= 0.0);
            let sets = hard_sets(&s, &s, 0.7).unwrap();
            prop_assert!(hard_rank_loss(&s, &sets, 0.7, 1.8).unwrap() >= 0.0);
        }
    }
}
