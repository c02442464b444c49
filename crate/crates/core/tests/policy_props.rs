use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use tutor_core::content::InterventionKind::{self, *};
use tutor_core::policy::{
    select_intervention, update_policy, ContextVector, Exploration, KindEstimator, PolicyModel, RewardSignal,
    CONTEXT_DIM,
};

fn ctx() -> ContextVector {
    // background none, proficiency .2, first of four attempts, last score .3,
    // no interventions yet, difficulty .5
    ContextVector([0.0, 0.2, 0.25, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5])
}

fn greedy() -> PolicyModel {
    PolicyModel::new(Exploration::EpsilonGreedy { epsilon: 0.0 })
}

#[test]
fn greedy_picks_highest_estimate() {
    let mut m = greedy();
    m.estimator_mut(TextHint).bias = (0.6f64 / 0.4).ln();
    m.estimator_mut(MultipleChoice).bias = (0.3f64 / 0.7).ln();
    let zero = ContextVector([0.0; CONTEXT_DIM]);
    assert!((m.estimator(TextHint).logistic(&zero) - 0.6).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(select_intervention(&zero, &[MultipleChoice, TextHint], &m, &mut rng).unwrap(), TextHint);
}

#[test]
fn ties_go_to_declaration_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let got = select_intervention(&ctx(), &[ConceptTree, Elaboration, MathHint], &greedy(), &mut rng).unwrap();
    assert_eq!(got, MathHint);
}

#[test]
fn full_exploration_is_uniform() {
    let m = PolicyModel::new(Exploration::EpsilonGreedy { epsilon: 1.0 });
    let available = [TextHint, Elaboration, ConceptTree, MultipleChoice];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts = [0u32; 6];
    let draws = 100_000;
    for _ in 0..draws {
        counts[select_intervention(&ctx(), &available, &m, &mut rng).unwrap().index()] += 1;
    }
    for k in InterventionKind::ALL {
        let f = counts[k.index()] as f64 / draws as f64;
        let want = if available.contains(&k) { 0.25 } else { 0.0 };
        assert!((f - want).abs() <= 0.02, "{k}: {f}");
    }
}

#[test]
fn thompson_follows_the_beta_counts() {
    let mut m = PolicyModel::new(Exploration::Thompson);
    *m.estimator_mut(TextHint) = KindEstimator {
        alpha: 10.0,
        beta: 1.0,
        ..KindEstimator::default()
    };
    *m.estimator_mut(MathHint) = KindEstimator {
        alpha: 1.0,
        beta: 10.0,
        ..KindEstimator::default()
    };
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let chosen = (0..draws)
        .filter(|_| select_intervention(&ctx(), &[TextHint, MathHint], &m, &mut rng).unwrap() == TextHint)
        .count() as f64
        / draws as f64;

    // Both logistic terms are 0.5, so only the Beta draws decide.
    let (hi, lo) = (Beta::new(10.0, 1.0).unwrap(), Beta::new(1.0, 10.0).unwrap());
    let mut orng = ChaCha8Rng::seed_from_u64(8);
    let oracle = (0..draws).filter(|_| hi.sample(&mut orng) > lo.sample(&mut orng)).count() as f64 / draws as f64;

    assert!(chosen >= 0.98, "{chosen}");
    assert!((chosen - oracle).abs() < 0.002, "{chosen} vs {oracle}");
}

#[test]
fn reward_touches_only_the_chosen_kind() {
    let before = greedy();
    let after = update_policy(before.clone(), &ctx(), Elaboration, RewardSignal::new(true));
    assert_eq!(after.estimator(Elaboration).alpha, before.estimator(Elaboration).alpha + 1.0);
    assert_eq!(after.estimator(Elaboration).beta, before.estimator(Elaboration).beta);
    for k in InterventionKind::ALL.into_iter().filter(|k| *k != Elaboration) {
        assert_eq!(after.estimator(k), before.estimator(k));
    }
    assert_eq!(after.update_count, 1);
}

#[test]
fn logistic_converges_to_bernoulli_rate() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = greedy();
        for _ in 0..1000 {
            m.update(&ctx(), TextHint, RewardSignal::new(rng.random_bool(0.8)));
        }
        let p = m.estimator(TextHint).logistic(&ctx());
        assert!((p - 0.8).abs() <= 0.05, "seed {seed}: {p}");
    }
}

fn trained(seed: u64) -> PolicyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = PolicyModel::default();
    for _ in 0..300 {
        let mut x = [0.0; CONTEXT_DIM];
        for v in x.iter_mut() {
            *v = rng.random::<f64>();
        }
        let k = InterventionKind::ALL[rng.random_range(0..6)];
        m.update(&ContextVector(x), k, RewardSignal::new(rng.random_bool(0.4)));
    }
    m
}

#[test]
fn snapshot_roundtrip_selects_identically() {
    for exploration in [Exploration::EpsilonGreedy { epsilon: 0.3 }, Exploration::Thompson] {
        let mut m = trained(3);
        m.exploration = exploration;
        let text = m.to_snapshot();
        let back = PolicyModel::from_snapshot(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_snapshot(), text);
        let (mut r1, mut r2) = (ChaCha8Rng::seed_from_u64(11), ChaCha8Rng::seed_from_u64(11));
        for _ in 0..100 {
            let a = select_intervention(&ctx(), &InterventionKind::ALL, &m, &mut r1).unwrap();
            let b = select_intervention(&ctx(), &InterventionKind::ALL, &back, &mut r2).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn snapshot_rejects_bad_versions_and_counts() {
    let m = trained(1);
    let text = m.to_snapshot().replace("\"version\": 1", "\"version\": 2");
    assert!(PolicyModel::from_snapshot(&text).is_err());
    assert!(PolicyModel::from_snapshot("{").is_err());
}

/// Two arms with success rates 0.8 and 0.2, learned online.
fn two_armed_share(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = PolicyModel::default();
    let arms = [TextHint, MathHint];
    let rate = |k| if k == MathHint { 0.8 } else { 0.2 };
    let mut better = 0;
    for t in 0..1500 {
        let k = select_intervention(&ctx(), &arms, &m, &mut rng).unwrap();
        if t >= 500 && k == MathHint {
            better += 1;
        }
        let r = rng.random_bool(rate(k));
        m.update(&ctx(), k, RewardSignal::new(r));
    }
    better as f64 / 1000.0
}

#[test]
fn two_armed_convergence() {
    for seed in 1..=5 {
        let share = two_armed_share(seed);
        assert!(share >= 0.85, "seed {seed}: {share}");
    }
}

fn estimator() -> impl Strategy<Value = KindEstimator> {
    (prop::array::uniform11(-3.0..3.0f64), -2.0..2.0f64).prop_map(|(weights, bias)| KindEstimator {
        weights,
        bias,
        alpha: 2.0,
        beta: 3.0,
    })
}

fn model() -> impl Strategy<Value = PolicyModel> {
    (prop::collection::vec(estimator(), 6), 0.0..1.0f64).prop_map(|(ests, epsilon)| {
        let mut m = PolicyModel::new(Exploration::EpsilonGreedy { epsilon });
        for (k, e) in InterventionKind::ALL.into_iter().zip(ests) {
            *m.estimator_mut(k) = e;
        }
        m
    })
}

fn context() -> impl Strategy<Value = ContextVector> {
    prop::array::uniform11(0.0..1.0f64).prop_map(ContextVector)
}

fn subset() -> impl Strategy<Value = Vec<InterventionKind>> {
    prop::sample::subsequence(InterventionKind::ALL.to_vec(), 1..=6)
}

proptest! {
    #[test]
    fn selection_stays_within_available(m in model(), x in context(), available in subset(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = select_intervention(&x, &available, &m, &mut rng).unwrap();
        prop_assert!(available.contains(&k));
        let mut t = m.clone();
        t.exploration = Exploration::Thompson;
        prop_assert!(available.contains(&select_intervention(&x, &available, &t, &mut rng).unwrap()));
    }

    #[test]
    fn positive_scaling_keeps_greedy_choice(mut m in model(), x in context(), available in subset(), c in 0.1..10.0f64) {
        m.exploration = Exploration::EpsilonGreedy { epsilon: 0.0 };
        let mut scaled = m.clone();
        for k in InterventionKind::ALL {
            let e = scaled.estimator_mut(k);
            e.weights.iter_mut().for_each(|w| *w *= c);
            e.bias *= c;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = select_intervention(&x, &available, &m, &mut rng).unwrap();
        let b = select_intervention(&x, &available, &scaled, &mut rng).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn updates_to_different_kinds_commute(m in model(), x1 in context(), x2 in context(), i in 0usize..6, j in 0usize..6, r1 in any::<bool>(), r2 in any::<bool>()) {
        prop_assume!(i != j);
        let (k1, k2) = (InterventionKind::ALL[i], InterventionKind::ALL[j]);
        let a = m.clone().updated(&x1, k1, RewardSignal::new(r1)).updated(&x2, k2, RewardSignal::new(r2));
        let b = m.updated(&x2, k2, RewardSignal::new(r2)).updated(&x1, k1, RewardSignal::new(r1));
        prop_assert_eq!(a.to_snapshot(), b.to_snapshot());
    }
}
