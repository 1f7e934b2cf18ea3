use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sag_core::credit::{
    ctde_step, exact_policy_gradient, export_advantage_dataset, gradient_bound, grpo_step, train_toy,
    write_advantage_dataset, AdvantageRecord, CentralCritic, CreditError, CtdeHyper, EnvSpec, GrpoHyper,
    PolicyTable, RewardWeights, ToyAlgo, ToyEnv, TrainConfig,
};
use sag_core::model::{new_trajectory, validate_group_config, GroupConfig, RewardComponents, Trajectory};

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

#[test]
fn huge_kl_penalty_pins_policy_to_reference() {
    let hyper = GrpoHyper {
        kl_beta: 1e6,
        ..GrpoHyper::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let envs = vec![
        ToyEnv::needle(vec![4, 4], &[2, 1]).unwrap(),
        ToyEnv::coordination(3),
        ToyEnv::random(vec![3, 2, 4], &mut rng).unwrap(),
    ];
    for env in envs {
        for reference in [PolicyTable::uniform(&env), PolicyTable::random(&env, 1.0, &mut rng)] {
            let mut policies = reference.clone();
            for step in 0..100 {
                policies = grpo_step(&policies, &env, &hyper, &reference, step).unwrap().0;
            }
            let total: f64 = policies
                .params(&env)
                .unwrap()
                .iter()
                .zip(reference.params(&env).unwrap())
                .map(|(z, z0)| kl(&softmax(z), &softmax(&z0)))
                .sum();
            assert!(total < 1e-3, "KL {total}");
        }
    }
}

#[test]
fn gradient_respects_bound_near_deterministic_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let env = ToyEnv::random(vec![3, 3], &mut rng).unwrap();
        let params: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let best = rng.gen_range(0..3);
                (0..3).map(|k| if k == best { rng.gen_range(6.0..12.0) } else { 0.0 }).collect()
            })
            .collect();
        let policies = PolicyTable::from_params(&env, params.clone());
        let grad = exact_policy_gradient(&policies, &env).unwrap();
        let bound = gradient_bound(&policies, &env).unwrap();
        let range = env.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - env.rewards.iter().copied().fold(f64::INFINITY, f64::min);
        for (i, z) in params.iter().enumerate() {
            let p = softmax(z);
            for k in 0..3 {
                let hand = range * p[k] * (1.0 - p[k]);
                assert!((bound[i][k] - hand).abs() <= 1e-12 * hand.max(1e-300));
                assert!(grad[i][k].abs() <= hand + 1e-15, "{} > {hand}", grad[i][k]);
            }
        }
    }
}

#[test]
fn critic_entries_are_means_of_observed_returns() {
    let env = ToyEnv::coordination(3);
    let mut policies = PolicyTable::uniform(&env);
    let mut critic = CentralCritic::new(&env);
    let hyper = CtdeHyper::default();
    for step in 0..200 {
        let (p, c, _) = ctde_step(&policies, &critic, &env, &hyper, step).unwrap();
        policies = p;
        critic = c;
    }
    for idx in 0..env.joint_size() {
        let joint = env.decode(idx);
        if critic.visits(&joint) > 0 {
            assert_eq!(critic.q(&joint).unwrap(), env.reward(&joint));
        }
    }
}

#[test]
fn training_is_reproducible() {
    for algo in [ToyAlgo::Grpo, ToyAlgo::Ctde] {
        let cfg = TrainConfig {
            algo,
            env: EnvSpec::Coordination { actions: 3 },
            steps: 100,
            seed: 7,
            grpo: GrpoHyper::default(),
            ctde: CtdeHyper::default(),
        };
        let a = train_toy(&cfg).unwrap();
        let b = train_toy(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.policies, b.policies);
        let c = train_toy(&TrainConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.rows, c.rows);
    }
}

fn scored(item: &str, r_acc: f64) -> Trajectory {
    let cfg = validate_group_config(GroupConfig::default()).unwrap();
    let mut t = new_trajectory("vignette", &cfg).unwrap();
    t.item_ref = item.into();
    t.rounds_used = 2;
    t.reward_components = Some(RewardComponents {
        r_acc,
        ..RewardComponents::default()
    });
    t
}

fn accuracy_only() -> RewardWeights {
    RewardWeights {
        w_acc: 1.0,
        w_knw: 0.0,
        w_safe: 0.0,
        w_cons: 0.0,
        gamma: 0.0,
        cost_per_round: 0.0,
    }
}

#[test]
fn advantage_export_examples() {
    let hyper = GrpoHyper {
        group_size: 4,
        ..GrpoHyper::default()
    };
    let mut ts: Vec<_> = [1.0, 1.0, 2.0, 2.0].iter().map(|&r| scored("x", r)).collect();
    ts.extend((0..4).map(|_| scored("y", 0.5)));
    let recs = export_advantage_dataset(&ts, &accuracy_only(), &hyper).unwrap();
    let x: Vec<f64> = recs.iter().filter(|r| r.item_id == "x").map(|r| r.advantage).collect();
    let y: Vec<f64> = recs.iter().filter(|r| r.item_id == "y").map(|r| r.advantage).collect();
    assert_eq!(x, vec![-1.0, -1.0, 1.0, 1.0]);
    assert_eq!(y, vec![0.0; 4]);
    assert_eq!(recs.iter().map(|r| r.group_id).collect::<Vec<_>>(), vec![0, 0, 0, 0, 1, 1, 1, 1]);

    let mut buf = Vec::new();
    write_advantage_dataset(&recs, &mut buf).unwrap();
    let back: Vec<AdvantageRecord> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(back, recs);

    assert_eq!(
        export_advantage_dataset(&[scored("z", 1.0)], &accuracy_only(), &hyper),
        Err(CreditError::InsufficientGroup {
            item_id: "z".into(),
            size: 1,
            required: 4
        })
    );
}

#[test]
fn round_cost_lowers_every_reward_equally() {
    // A constant per-trajectory cost shifts a group without changing advantages.
    let hyper = GrpoHyper {
        group_size: 3,
        ..GrpoHyper::default()
    };
    let ts: Vec<_> = [0.0, 0.5, 1.0].iter().map(|&r| scored("x", r)).collect();
    let costly = RewardWeights {
        gamma: 0.05,
        cost_per_round: 1.0,
        ..accuracy_only()
    };
    let a = export_advantage_dataset(&ts, &accuracy_only(), &hyper).unwrap();
    let b = export_advantage_dataset(&ts, &costly, &hyper).unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        assert!((ra.reward_total - rb.reward_total - 0.1).abs() < 1e-12);
        assert!((ra.advantage - rb.advantage).abs() < 1e-12);
    }
}
