use pfedseq::fedserver::{aggregate, aggregation_weights, UpdateSequenceBuffer};
use pfedseq::numerics::Tensor;
use pfedseq::rng::stream_rng;
use pfedseq::seqlearner::{
    ssm_scan_parallel, ssm_scan_sequential, stack_window, Learner, ScanMode, ScanProblem, SsmConfig, SsmLearner,
};
use pfedseq::synthdata::{dirichlet_label_skew, split_train_test};
use proptest::prelude::*;

fn learner_config(width: usize) -> SsmConfig {
    SsmConfig {
        width,
        expand: 2,
        state_dim: 3,
        conv_kernel: 2,
        num_blocks: 2,
        zero_bias: false,
        norm_eps: 1e-5,
        out_gain_init: 1.0,
        out_proj_scale: 1.0,
        scan_mode: ScanMode::Sequential,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_are_a_distribution(sizes in prop::collection::vec(1usize..500, 1..10)) {
        let w = aggregation_weights(&sizes).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn aggregate_stays_in_the_hull(
        rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 5), 1..6),
        seed in any::<u64>(),
    ) {
        let sizes: Vec<usize> = (0..rows.len()).map(|i| 1 + ((seed >> (i * 5)) as usize % 30)).collect();
        let g = aggregate(&rows, &sizes).unwrap();
        for j in 0..5 {
            let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(g[j] >= lo - 1e-12 && g[j] <= hi + 1e-12);
        }
        let same = vec![rows[0].clone(); rows.len()];
        let g = aggregate(&same, &sizes).unwrap();
        for (a, b) in g.iter().zip(&rows[0]) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn buffer_keeps_the_latest_rounds(cap in 1usize..8, pushes in 0usize..20) {
        let mut buf = UpdateSequenceBuffer::new(cap).unwrap();
        for t in 1..=pushes {
            buf.push(t, vec![Tensor::full(&[2, 3], t as f64)]).unwrap();
            prop_assert_eq!(buf.len(), t.min(cap));
        }
        let expected: Vec<usize> = (pushes.saturating_sub(cap) + 1..=pushes).collect();
        prop_assert_eq!(buf.rounds(), expected);
        if pushes > 0 {
            prop_assert!(buf.push(pushes, vec![Tensor::zeros(&[2, 3])]).is_err());
        }
    }

    #[test]
    fn split_is_a_partition(n in 4usize..300, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let idx: Vec<usize> = (100..100 + n).collect();
        let (train, test) = split_train_test(&idx, ratio, seed).unwrap();
        prop_assert_eq!(train.len(), (ratio * n as f64).ceil() as usize);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, idx);
    }

    #[test]
    fn dirichlet_rows_keep_class_totals(
        counts in prop::collection::vec(8usize..80, 2..6),
        clients in 2usize..8,
        alpha in 0.05f64..5.0,
        seed in any::<u64>(),
    ) {
        let alloc = dirichlet_label_skew(counts.len(), clients, alpha, &counts, seed).unwrap();
        for (row, &c) in alloc.iter().zip(&counts) {
            prop_assert_eq!(row.len(), clients);
            prop_assert_eq!(row.iter().sum::<usize>(), c);
        }
        for i in 0..clients {
            prop_assert!(alloc.iter().map(|r| r[i]).sum::<usize>() >= 1);
        }
    }

    #[test]
    fn parallel_scan_matches_recurrence(
        d in 1usize..4, l in 1usize..16, e in 1usize..4, m in 1usize..8, seed in any::<u64>(),
    ) {
        let mut rng = stream_rng(seed, &[1]);
        let mut draw = |n: usize, std: f64| Tensor::randn(&[n], std, &mut rng).into_data();
        let p = ScanProblem {
            batch: d,
            steps: l,
            inner: e,
            state: m,
            abar: draw(d * l * e * m, 1.0).into_iter().map(|x| 1.0 / (1.0 + x.exp())).collect(),
            bbar: draw(d * l * e * m, 1.0),
            u: draw(d * l * e, 1.0),
            c: draw(d * l * m, 1.0),
            d_skip: draw(e, 1.0),
        };
        let seq = ssm_scan_sequential(&p).unwrap();
        let par = ssm_scan_parallel(&p).unwrap();
        for (a, b) in seq.iter().zip(&par) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn learner_treats_rows_as_a_batch(d in 2usize..5, l in 1usize..5, n in 1usize..4, seed in any::<u64>()) {
        let mut rng = stream_rng(seed, &[2]);
        let learner = Learner::Ssm(SsmLearner::randomized(learner_config(n), &mut rng, 0.5).unwrap());
        let window = Tensor::randn(&[d, l, n], 1.0, &mut rng);
        let xi = learner.forward(&window).unwrap();
        prop_assert_eq!(xi.shape(), &[d, n][..]);

        // reversing the D rows of the window reverses the rows of ξ
        let per_row = l * n;
        let flipped: Vec<f64> = window.data().chunks(per_row).rev().flatten().copied().collect();
        let xi_f = learner.forward(&Tensor::new(vec![d, l, n], flipped).unwrap()).unwrap();
        let back: Vec<f64> = xi_f.data().chunks(n).rev().flatten().copied().collect();
        for (a, b) in back.iter().zip(xi.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn window_stacking_preserves_order(d in 1usize..3, l in 2usize..6, n in 1usize..4, seed in any::<u64>()) {
        let mut rng = stream_rng(seed, &[3]);
        let steps: Vec<Tensor> = (0..l).map(|_| Tensor::randn(&[d, n], 1.0, &mut rng)).collect();
        let refs: Vec<&Tensor> = steps.iter().collect();
        let w = stack_window(&refs).unwrap();
        prop_assert_eq!(w.shape(), &[d, l, n][..]);
        for (j, s) in steps.iter().enumerate() {
            for di in 0..d {
                for ni in 0..n {
                    prop_assert_eq!(w.data()[(di * l + j) * n + ni], s.data()[di * n + ni]);
                }
            }
        }
        let learner = Learner::Ssm(SsmLearner::randomized(learner_config(n), &mut rng, 0.5).unwrap());
        prop_assert!(learner.forward(&w).unwrap().is_finite());
    }
}
