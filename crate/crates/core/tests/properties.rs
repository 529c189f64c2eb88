use diffstyle::checkpoint::Checkpoint;
use diffstyle::diffae::SplitPoint;
use diffstyle::diffusion::{forward_marginal, predict_x0, NoiseSchedule, TimestepSubsequence};
use diffstyle::evaluation::{auc, rank_scores, DensityBucket};
use diffstyle::losses::directional_loss;
use diffstyle::spn::blend;
use diffstyle::Tensor;
use proptest::prelude::*;

fn vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn t(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).unwrap()
}

proptest! {
    #[test]
    fn directional_loss_is_bounded_symmetric_and_scale_free(
        a in vector(6),
        b in vector(6),
        sa in 1e-3f64..1e3,
        sb in 1e-3f64..1e3,
    ) {
        let l = directional_loss(&t(&a), &t(&b)).unwrap();
        prop_assert!((0.0..=2.0).contains(&l));
        prop_assert!((l - directional_loss(&t(&b), &t(&a)).unwrap()).abs() <= 1e-12);
        let scaled_a: Vec<f64> = a.iter().map(|x| x * sa).collect();
        let scaled_b: Vec<f64> = b.iter().map(|x| x * sb).collect();
        prop_assert!((l - directional_loss(&t(&scaled_a), &t(&scaled_b)).unwrap()).abs() <= 1e-7);
    }

    #[test]
    fn predict_x0_inverts_forward_marginal(
        x0 in prop::collection::vec(-1.0f64..1.0, 12),
        z in prop::collection::vec(-3.0f64..3.0, 12),
        step in 1usize..=100,
    ) {
        let sched = NoiseSchedule::scaled_linear(100).unwrap();
        let (x0, z) = (Tensor::new(&[3, 2, 2], x0).unwrap(), Tensor::new(&[3, 2, 2], z).unwrap());
        let xt = forward_marginal(&x0, step, &z, &sched).unwrap();
        prop_assert!(predict_x0(&xt, step, &z, &sched).unwrap().max_abs_diff(&x0) < 1e-6);
    }

    #[test]
    fn alpha_bar_is_decreasing(total in 2usize..400) {
        let sched = NoiseSchedule::scaled_linear(total).unwrap();
        let ab = sched.alpha_bars();
        prop_assert_eq!(ab[0], 1.0);
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
    }

    #[test]
    fn strided_steps_span_zero_to_end(end in 1usize..200, n in 1usize..50) {
        let s = TimestepSubsequence::strided(end, n).unwrap();
        prop_assert_eq!(s.first(), 0);
        prop_assert_eq!(s.last(), end);
        prop_assert!(s.steps().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.len() <= n + 1);
    }

    #[test]
    fn blend_with_zero_lambda_is_the_identity(x in vector(8), r in vector(8)) {
        prop_assert!(blend(&t(&x), &t(&r), 0.0).unwrap().bit_eq(&t(&x)));
    }

    #[test]
    fn split_points_round_trip(r in 1usize..4096) {
        for p in [SplitPoint::AllInput, SplitPoint::At(r), SplitPoint::AllStyle] {
            prop_assert_eq!(SplitPoint::parse(&p.to_string()).unwrap(), p);
        }
    }

    #[test]
    fn auc_flips_with_labels(
        scored in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40)
            .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1)),
    ) {
        let scores: Vec<f64> = scored.iter().map(|p| p.0).collect();
        let labels: Vec<bool> = scored.iter().map(|p| p.1).collect();
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + auc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_is_a_sorted_permutation(scores in prop::collection::vec(-5.0f64..5.0, 2..40), k in 1usize..10) {
        let k = k.min(scores.len() / 2).max(1);
        let named: Vec<(String, f64)> = scores.iter().enumerate().map(|(i, &s)| (i.to_string(), s)).collect();
        let recs = rank_scores(named, k);
        prop_assert_eq!(recs.len(), scores.len());
        for (i, r) in recs.iter().enumerate() {
            prop_assert_eq!(r.rank, i);
            if i > 0 {
                prop_assert!(recs[i - 1].perceptual_score >= r.perceptual_score);
            }
        }
        let mut ids: Vec<usize> = recs.iter().map(|r| r.image_id.parse().unwrap()).collect();
        ids.sort();
        prop_assert_eq!(ids, (0..scores.len()).collect::<Vec<_>>());
        prop_assert_eq!(recs.iter().filter(|r| r.bucket == DensityBucket::LowDensity).count(), k);
        prop_assert_eq!(recs.iter().filter(|r| r.bucket == DensityBucket::HighDensity).count(), k);
    }

    #[test]
    fn checkpoints_round_trip(data in prop::collection::vec(-1e6f64..1e6, 1..64), note in "[a-z ]{0,20}") {
        let mut ck = Checkpoint::new();
        ck.set_meta("note", note.clone());
        ck.insert("w", &Tensor::new(&[data.len()], data).unwrap());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.meta("note").unwrap(), note.as_str());
        prop_assert!(back.tensor("w").unwrap().bit_eq(ck.tensor("w").unwrap()));
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
