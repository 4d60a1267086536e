use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vprm_core::group::{normalize_advantages, AdvantageVector, Algo, OptimConfig};
use vprm_core::reward::RewardConfig;
use vprm_core::rules::RuleTableSet;
use vprm_core::schema::BiasDomain;
use vprm_core::sim::{
    expected_metrics, generate_instances, init_policy, sample_group, surrogate_with_gradient,
    ActionGroup, InitMode, TabularPolicy,
};

fn perturbed(policy: &TabularPolicy, rng: &mut ChaCha8Rng, scale: f64) -> TabularPolicy {
    let mut p = policy.clone();
    for z in p.logits.iter_mut().flatten() {
        *z += scale * (rng.random::<f64>() - 0.5);
    }
    p
}

/// Random groups of actions with mixed correctness.
fn random_groups(
    policy: &TabularPolicy,
    rng: &mut ChaCha8Rng,
    groups: usize,
    g: usize,
) -> Vec<ActionGroup> {
    (0..groups)
        .map(|_| {
            let actions: Vec<Vec<usize>> = (0..g)
                .map(|_| {
                    policy
                        .logits
                        .iter()
                        .map(|h| rng.random_range(0..h.len()))
                        .collect()
                })
                .collect();
            let mut correctness: Vec<bool> = (0..g).map(|_| rng.random_bool(0.5)).collect();
            correctness[0] = true;
            correctness[1] = false;
            let rewards = correctness
                .iter()
                .map(|&c| f64::from(u8::from(c)) + rng.random::<f64>())
                .collect();
            ActionGroup {
                actions,
                rewards,
                correctness,
            }
        })
        .collect()
}

fn ratios_near_bounds(
    policy: &TabularPolicy,
    old: &TabularPolicy,
    groups: &[ActionGroup],
    lo: f64,
    hi: f64,
) -> bool {
    let cur = policy.all_probs();
    let prev = old.all_probs();
    groups.iter().flat_map(|g| &g.actions).any(|a| {
        a.iter().enumerate().any(|(h, &k)| {
            let r = cur[h][k] / prev[h][k];
            (r - lo).abs() < 1e-3 || (r - hi).abs() < 1e-3
        })
    })
}

fn check_fd(config: &OptimConfig, trials: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domains = [BiasDomain::A, BiasDomain::E, BiasDomain::G];
    let (lo, hi) = match config.algo {
        Algo::Grpo => (1.0 - config.eps, 1.0 + config.eps),
        Algo::Dapo => (1.0 - config.eps_low, 1.0 + config.eps_high),
    };
    let mut done = 0;
    while done < trials {
        let domain = domains[done % domains.len()];
        let reference = init_policy(domain, rng.random(), InitMode::Random);
        let old = perturbed(&reference, &mut rng, 0.5);
        let policy = perturbed(&old, &mut rng, 0.6);
        let groups = random_groups(&old, &mut rng, 2, 6);
        // Central differences are meaningless across a clip kink.
        if ratios_near_bounds(&policy, &old, &groups, lo, hi) {
            continue;
        }
        let advs: Vec<AdvantageVector> = groups
            .iter()
            .map(|g| normalize_advantages(&g.rewards, config).unwrap())
            .collect();
        let kl_ref = (config.beta > 0.0).then_some(&reference);
        let (_, grad) =
            surrogate_with_gradient(&policy, &old, kl_ref, &groups, &advs, config).unwrap();
        let h = 1e-5;
        for (head, row) in grad.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                let mut plus = policy.clone();
                plus.logits[head][j] += h;
                let mut minus = policy.clone();
                minus.logits[head][j] -= h;
                let fp = surrogate_with_gradient(&plus, &old, kl_ref, &groups, &advs, config)
                    .unwrap()
                    .0;
                let fm = surrogate_with_gradient(&minus, &old, kl_ref, &groups, &advs, config)
                    .unwrap()
                    .0;
                let fd = (fp - fm) / (2.0 * h);
                let scale = a.abs().max(fd.abs());
                assert!(
                    (a - fd).abs() <= 1e-4 * scale + 1e-9,
                    "{:?} head {head} logit {j}: analytic {a} vs fd {fd}",
                    config.algo
                );
            }
        }
        done += 1;
    }
}

#[test]
fn grpo_gradient_matches_finite_differences() {
    check_fd(
        &OptimConfig {
            beta: 0.05,
            ..OptimConfig::grpo()
        },
        40,
        1,
    );
}

#[test]
fn grpo_gradient_without_kl() {
    check_fd(&OptimConfig::grpo(), 20, 2);
}

#[test]
fn dapo_gradient_matches_finite_differences() {
    check_fd(&OptimConfig::dapo(), 40, 3);
}

#[test]
fn temperature_enters_the_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut old = init_policy(BiasDomain::B, 5, InitMode::Random);
    old.temperature = 0.7;
    let mut policy = perturbed(&old, &mut rng, 0.2);
    policy.temperature = 0.7;
    let groups = random_groups(&old, &mut rng, 1, 8);
    let config = OptimConfig {
        eps: f64::INFINITY,
        ..OptimConfig::grpo()
    };
    let advs = vec![normalize_advantages(&groups[0].rewards, &config).unwrap()];
    let (_, grad) = surrogate_with_gradient(&policy, &old, None, &groups, &advs, &config).unwrap();
    let h = 1e-5;
    let mut plus = policy.clone();
    plus.logits[0][1] += h;
    let mut minus = policy.clone();
    minus.logits[0][1] -= h;
    let fd = (surrogate_with_gradient(&plus, &old, None, &groups, &advs, &config)
        .unwrap()
        .0
        - surrogate_with_gradient(&minus, &old, None, &groups, &advs, &config)
            .unwrap()
            .0)
        / (2.0 * h);
    assert!((grad[0][1] - fd).abs() <= 1e-4 * fd.abs().max(1e-6));
}

/// Without clipping or KL, one step along the sampled gradient should not
/// lower the exact expected reward on average.
#[test]
fn policy_step_improves_expected_reward() {
    let rules = RuleTableSet::builtin();
    let reward = RewardConfig::default();
    let config = OptimConfig {
        eps: f64::INFINITY,
        ..OptimConfig::grpo()
    };
    let inst = generate_instances(BiasDomain::A, 1, 9, rules)
        .unwrap()
        .remove(0);
    let mut gains = Vec::new();
    for seed in 0..40u64 {
        let policy = init_policy(BiasDomain::A, seed, InitMode::Random);
        let g = sample_group(&policy, &inst, 256, seed, &reward, rules).unwrap();
        let groups = [ActionGroup::from(&g)];
        let advs = [normalize_advantages(&groups[0].rewards, &config).unwrap()];
        let (_, grad) =
            surrogate_with_gradient(&policy, &policy, None, &groups, &advs, &config).unwrap();
        let mut next = policy.clone();
        for (zs, gs) in next.logits.iter_mut().zip(&grad) {
            for (z, d) in zs.iter_mut().zip(gs) {
                *z += 0.1 * d;
            }
        }
        let before = expected_metrics(&policy, &inst, &reward, rules).unwrap();
        let after = expected_metrics(&next, &inst, &reward, rules).unwrap();
        let total = |e: vprm_core::sim::Expected| e.process_reward + e.outcome_reward;
        gains.push(total(after) - total(before));
        for h in 0..next.logits.len() {
            assert!((next.probs(h).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let improved = gains.iter().filter(|g| **g >= 0.0).count();
    assert!(mean > 0.0, "mean gain {mean}");
    assert!(improved >= 36, "{improved}/40 steps improved");
}
