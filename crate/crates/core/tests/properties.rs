use dxp_autodiff::{Tape, Tensor};
use dxp_core::config::RunConfig;
use dxp_core::data::{self, generate, Dataset, Provenance, SamplePair};
use dxp_core::expansion::{dice_loss_value, dice_score, filter_pairs};
use dxp_core::guidance::{lemma3_check, softmax};
use dxp_core::models::Segmenter;
use dxp_core::rng::SeedStream;
use dxp_core::schedule::{NoiseSchedule, T_MIN};
use dxp_core::training::dice_loss;
use proptest::prelude::*;

fn binary(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_score_is_symmetric_and_bounded(a in binary(24), b in binary(24)) {
        let (ta, tb) = (Tensor::from_vec(a), Tensor::from_vec(b));
        let ab = dice_score(&ta, &tb).unwrap();
        prop_assert_eq!(ab, dice_score(&tb, &ta).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice_score(&ta, &ta).unwrap(), 1.0);
    }

    #[test]
    fn dice_losses_are_in_unit_interval(p in prop::collection::vec(0.0f64..1.0, 16), t in binary(16)) {
        let v = dice_loss_value(&p, &t);
        prop_assert!((0.0..=1.0).contains(&v));
        let tape = Tape::new();
        let l = dice_loss(&tape, tape.constant(Tensor::from_vec(p)), tape.constant(Tensor::from_vec(t))).unwrap();
        let lv = tape.value(l).item().unwrap();
        prop_assert!((lv - v).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_variance_preserving(t in T_MIN..1.0f64) {
        for s in [NoiseSchedule::default(), NoiseSchedule::cosine(1000).unwrap()] {
            let (a, sig) = s.alpha_sigma(t).unwrap();
            prop_assert!((a * a + sig * sig - 1.0).abs() < 1e-12);
            prop_assert!((s.inverse_lambda(s.lambda(t).unwrap()) - t).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-30.0f64..30.0, 2..9)) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn crossing_point_lies_within_the_logits(v in prop::collection::vec(-5.0f64..5.0, 2..9), s in 2u8..4) {
        let out = lemma3_check(&v, 0, 1.0 / f64::from(s)).unwrap();
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
        prop_assert!(out.y_m >= lo - 1e-9 && out.y_m <= hi + 1e-9);
        prop_assert!(out.y_m_exact >= lo - 1e-9 && out.y_m_exact <= hi + 1e-9);
        prop_assert!(out.holds_exact);
    }

    #[test]
    fn seeds_give_distinct_substreams(a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(a != b);
        let s = SeedStream::new(7);
        prop_assert_ne!(s.child(a).seed(), s.child(b).seed());
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), eta in 0.001f64..1.0, steps in 1usize..500) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.filter_eta = eta;
        cfg.solver_steps = steps;
        prop_assert_eq!(RunConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn filter_partitions_by_the_threshold(eta in 0.01f64..1.0, flips in prop::collection::vec(any::<bool>(), 8)) {
        let ds = generate(4, 10, 32, 32).unwrap();
        let seg = Segmenter::new(2, SeedStream::new(3));
        let pairs: Vec<SamplePair> = ds.train.iter().take(8).zip(&flips).map(|(p, &f)| SamplePair {
            mask: if f { p.mask.map(|m| 1.0 - m) } else { p.mask.clone() },
            ..p.clone()
        }).collect();
        let (kept, dropped, rep) = filter_pairs(&pairs, Some(&seg), eta).unwrap();
        prop_assert_eq!(kept.len() + dropped.len(), pairs.len());
        let want: Vec<usize> = (0..pairs.len()).filter(|&i| rep.losses[i] < eta).collect();
        prop_assert_eq!(&rep.kept_indices, &want);
        for (p, &i) in kept.iter().zip(&want) {
            prop_assert_eq!(p, &pairs[i]);
        }
    }

    #[test]
    fn dataset_files_round_trip(seed in 0u64..1000, count in 10usize..20) {
        let mut ds = generate(seed, count, 32, 32).unwrap();
        ds.train[0].provenance = Provenance::Synthetic { seed, guidance: None };
        let back = data::decode(&data::encode(&ds)).unwrap();
        prop_assert_eq!(&back, &ds);
        let synth = Dataset::from_pairs(32, 32, ds.test.clone());
        prop_assert_eq!(data::decode(&data::encode(&synth)).unwrap(), synth);
    }
}
