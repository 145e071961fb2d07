use logoins_core::rng::seeded_rng;
use logoins_core::scheduler::{recalibrate, sample_index, CriticScoreTable, SchedulerState, SyntheticLearner};
use proptest::prelude::*;

fn table(scores: &[f64]) -> CriticScoreTable {
    CriticScoreTable::new(0, scores.iter().enumerate().map(|(i, s)| (format!("c{i}"), *s)).collect()).unwrap()
}

proptest! {
    #[test]
    fn probs_are_positive_and_normalized(scores in prop::collection::vec(-1.0f64..1.0, 1..30), lambda in 0.01f64..20.0) {
        let st = recalibrate(&table(&scores), lambda).unwrap();
        prop_assert!(st.probs.iter().all(|&p| p > 0.0));
        prop_assert!((st.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lower_score_gets_higher_probability(scores in prop::collection::vec(-1.0f64..1.0, 2..30), lambda in 1.01f64..10.0) {
        let st = recalibrate(&table(&scores), lambda).unwrap();
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] < scores[j] {
                    prop_assert!(st.probs[i] > st.probs[j], "{} vs {}", st.probs[i], st.probs[j]);
                }
            }
        }
    }

    #[test]
    fn shifting_all_scores_keeps_weights(scores in prop::collection::vec(-1.0f64..1.0, 1..30), c in -5.0f64..5.0, lambda in 0.1f64..10.0) {
        let a = recalibrate(&table(&scores), lambda).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        let b = recalibrate(&table(&shifted), lambda).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn draws_stay_in_range(scores in prop::collection::vec(-1.0f64..1.0, 1..10), seed in any::<u64>()) {
        let st = recalibrate(&table(&scores), 2.0).unwrap();
        let mut rng = seeded_rng(seed, "draws");
        for _ in 0..50 {
            prop_assert!(sample_index(&st, &mut rng) < scores.len());
        }
    }
}

#[test]
fn actor_critic_learner_ends_more_balanced_than_uniform() {
    let mut wins = 0;
    for seed in 0..20u64 {
        let mut init = seeded_rng(seed, "init");
        let scores: Vec<f64> = (0..10).map(|_| rand::Rng::random_range(&mut init, -0.5..0.5)).collect();
        let mut ac = SyntheticLearner { scores: scores.clone(), delta: 0.002 };
        let mut uni = SyntheticLearner { scores, delta: 0.002 };
        ac.run(2000, 2.0, 100, true, &mut seeded_rng(seed, "draws")).unwrap();
        uni.run(2000, 2.0, 100, false, &mut seeded_rng(seed, "draws")).unwrap();
        if ac.spread() < uni.spread() {
            wins += 1;
        }
    }
    assert!(wins >= 15, "{wins}/20");
}

#[test]
fn uniform_state_is_uniform() {
    let st = SchedulerState::uniform((0..7).map(|i| format!("c{i}")).collect(), 2.0, 10).unwrap();
    assert!(st.probs.iter().all(|&p| p == 1.0 / 7.0));
}
