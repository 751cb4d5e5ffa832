use super::*;

fn two_cot(p_answer: [f64; 2]) -> (EloTask, EloPolicy) {
    let task = EloTask { question: vec![1], answer: vec![0], cot_alphabet: 2, cot_length: 1, answer_alphabet: 2 };
    let mut policy = EloPolicy::uniform(&task).unwrap();
    for k in 0..2 {
        policy.answer_logits[k][0] = vec![libm::log(p_answer[k]), libm::log(1.0 - p_answer[k])];
    }
    (task, policy)
}

fn random_task(rng: &mut DeskRng) -> (EloTask, EloPolicy) {
    let task = EloTask {
        question: vec![0],
        answer: (0..rng.random_range(1..3)).map(|_| rng.random_range(0..3)).collect(),
        cot_alphabet: rng.random_range(1..5),
        cot_length: rng.random_range(1..4),
        answer_alphabet: 3,
    };
    let scale = rng.random_range(0.1..4.0);
    let policy = EloPolicy::random(&task, scale, rng).unwrap();
    (task, policy)
}

#[test]
fn hand_computed_two_cot_example() {
    let (task, policy) = two_cot([0.2, 0.6]);
    let l = elo_loss_exact(&policy, &task).unwrap();
    let u = upper_bound_exact(&policy, &task).unwrap();
    assert!((l - 0.916291).abs() < 1e-6, "{l}");
    assert!((u - 1.060132).abs() < 1e-6, "{u}");
    assert!((l + libm::log(0.4)).abs() < 1e-12);
}

#[test]
fn constant_answer_probability_closes_the_gap() {
    let mut rng = seeded(4);
    let task = EloTask { question: vec![], answer: vec![1], cot_alphabet: 3, cot_length: 2, answer_alphabet: 2 };
    let mut policy = EloPolicy::random(&task, 2.0, &mut rng).unwrap();
    for pos in policy.answer_logits.iter_mut() {
        pos[0] = vec![libm::log(0.7), libm::log(0.3)];
    }
    let l = elo_loss_exact(&policy, &task).unwrap();
    let u = upper_bound_exact(&policy, &task).unwrap();
    assert!((l + libm::log(0.3)).abs() < 1e-12);
    assert!((u + libm::log(0.3)).abs() < 1e-12);
}

#[test]
fn certain_answer_has_zero_loss() {
    let task = EloTask { question: vec![], answer: vec![0], cot_alphabet: 2, cot_length: 2, answer_alphabet: 2 };
    let mut policy = EloPolicy::uniform(&task).unwrap();
    for pos in policy.answer_logits.iter_mut() {
        pos[0] = vec![0.0, f64::NEG_INFINITY];
    }
    assert_eq!(elo_loss_exact(&policy, &task).unwrap(), 0.0);
    assert_eq!(upper_bound_exact(&policy, &task).unwrap(), 0.0);
}

#[test]
fn unreachable_answers_flag_infinity() {
    let (task, mut policy) = two_cot([0.5, 0.5]);
    policy.answer_logits[0][0] = vec![f64::NEG_INFINITY, 0.0];
    assert!(elo_loss_exact(&policy, &task).unwrap().is_finite());
    assert_eq!(upper_bound_exact(&policy, &task).unwrap(), f64::INFINITY);
    policy.answer_logits[1][0] = vec![f64::NEG_INFINITY, 0.0];
    assert_eq!(elo_loss_exact(&policy, &task).unwrap(), f64::INFINITY);
    // A CoT the policy never takes does not matter.
    let (task, mut policy) = two_cot([0.5, 0.5]);
    policy.answer_logits[0][0] = vec![f64::NEG_INFINITY, 0.0];
    policy.cot_logits[0] = f64::NEG_INFINITY;
    assert!((upper_bound_exact(&policy, &task).unwrap() + libm::log(0.5)).abs() < 1e-12);
}

#[test]
fn task_and_policy_validation() {
    let task = EloTask { question: vec![], answer: vec![0], cot_alphabet: 4, cot_length: 7, answer_alphabet: 2 };
    assert!(matches!(EloPolicy::uniform(&task), Err(Error::Parameter(_))));
    let task = EloTask { cot_length: 6, ..task };
    assert_eq!(task.num_cots().unwrap(), 4096);
    let bad = EloTask { answer: vec![5], ..task.clone() };
    assert!(matches!(bad.validate(), Err(Error::Index(_))));
    let (t2, p2) = two_cot([0.2, 0.6]);
    assert!(matches!(elo_loss_exact(&p2, &EloTask { cot_length: 2, ..t2 }), Err(Error::Dimension(_))));
    assert_eq!(task.cot_tokens(4 * 4 * 4 * 4 + 3), [0, 1, 0, 0, 0, 3]);
}

#[test]
fn jensen_holds_on_random_tasks() {
    let mut rng = seeded(11);
    for _ in 0..1000 {
        let (task, policy) = random_task(&mut rng);
        let l = elo_loss_exact(&policy, &task).unwrap();
        let u = upper_bound_exact(&policy, &task).unwrap();
        assert!(l <= u + 1e-12, "{l} > {u}");
    }
}

#[test]
fn baseline_examples() {
    assert_eq!(baseline_compute(&[1.0, 1.0, 1.0], BaselineSpec::BatchMean).unwrap(), [1.0, 1.0, 1.0]);
    assert_eq!(baseline_compute(&[0.0, 2.0], BaselineSpec::LeaveOneOut).unwrap(), [2.0, 0.0]);
    assert_eq!(baseline_compute(&[3.0, -1.0], BaselineSpec::Zero).unwrap(), [0.0, 0.0]);
    assert!(matches!(baseline_compute(&[1.0], BaselineSpec::LeaveOneOut), Err(Error::Parameter(_))));
    assert_eq!(BaselineSpec::default(), BaselineSpec::LeaveOneOut);
    assert_eq!(BaselineSpec::parse("BATCH_MEAN").unwrap(), BaselineSpec::BatchMean);
}

fn finite_difference(policy: &EloPolicy, task: &EloTask, mode: GradMode) -> EloGradient {
    let h = 1e-5;
    let f = |p: &EloPolicy| upper_bound_exact(p, task).unwrap();
    let mut g = EloGradient::zeros(policy);
    for k in 0..policy.cot_logits.len() {
        let (mut a, mut b) = (policy.clone(), policy.clone());
        a.cot_logits[k] += h;
        b.cot_logits[k] -= h;
        g.cot[k] = (f(&a) - f(&b)) / (2.0 * h);
    }
    if mode == GradMode::Full {
        for k in 0..policy.answer_logits.len() {
            for pos in 0..policy.answer_logits[k].len() {
                for j in 0..policy.answer_logits[k][pos].len() {
                    let (mut a, mut b) = (policy.clone(), policy.clone());
                    a.answer_logits[k][pos][j] += h;
                    b.answer_logits[k][pos][j] -= h;
                    g.answer[k][pos][j] = (f(&a) - f(&b)) / (2.0 * h);
                }
            }
        }
    }
    g
}

#[test]
fn enumerated_estimator_matches_analytic_and_finite_differences() {
    let mut rng = seeded(12);
    for _ in 0..50 {
        let (task, policy) = random_task(&mut rng);
        for mode in [GradMode::CotOnly, GradMode::Full] {
            let analytic = upper_bound_gradient(&policy, &task, mode).unwrap();
            let b = rng.random_range(-3.0..3.0);
            let enumerated = elo_gradient_enumerated(&policy, &task, b, mode).unwrap();
            assert!(enumerated.max_abs_diff(&analytic) < 1e-9);
            let fd = finite_difference(&policy, &task, mode);
            assert!(fd.max_abs_diff(&analytic) < 1e-6, "{}", fd.max_abs_diff(&analytic));
        }
    }
}

#[test]
fn zero_advantage_gives_zero_estimate() {
    let (task, policy) = two_cot([0.3, 0.3]);
    let b = libm::log(0.3);
    let g = elo_gradient_enumerated(&policy, &task, b, GradMode::CotOnly).unwrap();
    assert!(g.cot.iter().all(|&x| x.abs() < 1e-15));
    for seed in 0..20 {
        let g = elo_gradient_estimate(&policy, &task, 4, BaselineSpec::BatchMean, GradMode::CotOnly, seed).unwrap();
        assert!(g.cot.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn sampled_estimator_is_unbiased_at_ten_thousand_draws() {
    let mut rng = seeded(13);
    let task = EloTask { question: vec![], answer: vec![1], cot_alphabet: 2, cot_length: 2, answer_alphabet: 3 };
    let policy = EloPolicy::random(&task, 1.0, &mut rng).unwrap();
    let analytic = upper_bound_gradient(&policy, &task, GradMode::CotOnly).unwrap();
    let n = 10_000;
    let k = policy.cot_logits.len();
    let (mut sum, mut sq) = (vec![0.0; k], vec![0.0; k]);
    for seed in 0..n {
        let g = elo_gradient_estimate(&policy, &task, 1, BaselineSpec::Zero, GradMode::CotOnly, seed as u64).unwrap();
        for j in 0..k {
            sum[j] += g.cot[j];
            sq[j] += g.cot[j] * g.cot[j];
        }
    }
    for j in 0..k {
        let mean = sum[j] / n as f64;
        let var = sq[j] / n as f64 - mean * mean;
        let se = libm::sqrt(var / n as f64);
        assert!((mean - analytic.cot[j]).abs() <= 3.0 * se, "coordinate {j}: {mean} vs {}", analytic.cot[j]);
    }
}

/// Exact expectation of the batch estimator over all `K^n` sample tuples.
fn batch_expectation(policy: &EloPolicy, task: &EloTask, n: usize, baseline: BaselineSpec) -> EloGradient {
    let probs: Vec<f64> = policy.cot_log_probs().into_iter().map(libm::exp).collect();
    let k = probs.len();
    let mut acc = EloGradient::zeros(policy);
    for idx in 0..k.pow(n as u32) {
        let samples: Vec<usize> = (0..n).map(|i| idx / k.pow(i as u32) % k).collect();
        let w: f64 = samples.iter().map(|&s| probs[s]).product();
        let g = elo_gradient_from_samples(policy, task, &samples, baseline, GradMode::CotOnly).unwrap();
        for (a, x) in acc.cot.iter_mut().zip(&g.cot) {
            *a += w * x;
        }
    }
    acc
}

#[test]
fn leave_one_out_keeps_the_expectation() {
    let mut rng = seeded(14);
    for _ in 0..10 {
        let task = EloTask { question: vec![], answer: vec![0], cot_alphabet: 3, cot_length: 1, answer_alphabet: 2 };
        let policy = EloPolicy::random(&task, 1.5, &mut rng).unwrap();
        let analytic = upper_bound_gradient(&policy, &task, GradMode::CotOnly).unwrap();
        for n in [2, 3, 4] {
            let zero = batch_expectation(&policy, &task, n, BaselineSpec::Zero);
            let loo = batch_expectation(&policy, &task, n, BaselineSpec::LeaveOneOut);
            assert!(zero.max_abs_diff(&analytic) < 1e-12);
            assert!(loo.max_abs_diff(&zero) < 1e-12);
        }
    }
}

#[test]
fn batch_mean_shrinks_the_expectation_by_one_over_n() {
    // The batch mean contains the sample's own score, so the expectation is
    // (n-1)/n of the true gradient.
    let mut rng = seeded(15);
    let task = EloTask { question: vec![], answer: vec![0], cot_alphabet: 3, cot_length: 1, answer_alphabet: 2 };
    let policy = EloPolicy::random(&task, 1.5, &mut rng).unwrap();
    let analytic = upper_bound_gradient(&policy, &task, GradMode::CotOnly).unwrap();
    for n in [2, 3, 4] {
        let bm = batch_expectation(&policy, &task, n, BaselineSpec::BatchMean);
        let scale = (n - 1) as f64 / n as f64;
        for (x, a) in bm.cot.iter().zip(&analytic.cot) {
            assert!((x - scale * a).abs() < 1e-12);
        }
    }
}

#[test]
fn sampling_a_hopeless_cot_aborts() {
    let (task, mut policy) = two_cot([0.5, 0.5]);
    policy.answer_logits[1][0] = vec![f64::NEG_INFINITY, 0.0];
    let err = elo_gradient_from_samples(&policy, &task, &[0, 1], BaselineSpec::Zero, GradMode::CotOnly).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(elo_gradient_estimate(&policy, &task, 1, BaselineSpec::LeaveOneOut, GradMode::CotOnly, 0).is_err());
}

#[test]
fn training_reaches_the_answer_with_monotone_bound() {
    let (task, mut policy) = toy_task(4, 2, 9, 0.99, 0.05).unwrap();
    let log = train_elo(&mut policy, &task, 500, 1.0, GradMode::CotOnly, 0.9).unwrap();
    let last = log.last().unwrap();
    assert!(last.p_answer > 0.9, "{last:?}");
    assert!(last.step <= 500);
    for w in log.windows(2) {
        assert!(w[1].l_upper <= w[0].l_upper + 1e-12);
    }
    assert!(log.iter().all(|s| s.l_elo <= s.l_upper + 1e-12));
}

#[test]
fn full_mode_also_moves_answer_logits() {
    let (task, mut policy) = toy_task(2, 1, 0, 0.4, 0.3).unwrap();
    let before = policy.answer_logits.clone();
    let log = train_elo(&mut policy, &task, 200, 1.0, GradMode::Full, 0.9).unwrap();
    assert_ne!(policy.answer_logits, before);
    assert!(log.last().unwrap().p_answer > 0.9);
}
