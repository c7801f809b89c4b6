mod common;

use proptest::prelude::*;
use reform::envs::{
    bandit_reward, behavior_mean_reward, generate_dataset, BehaviorSpec, EnvKind,
    TransitionBatch, BANDIT_CORNERS, DATASET_MAGIC,
};
use reform::nn::Tensor;
use reform::Error;

fn bandit_data(episodes: usize, seed: u64) -> TransitionBatch {
    let env = EnvKind::TwoCornerBandit;
    generate_dataset(env, &BehaviorSpec::default_for(env), episodes, seed).unwrap()
}

#[test]
fn bandit_step_examples() {
    let env = EnvKind::TwoCornerBandit;
    let (s2, r, done) = env.step(&[0.0, 0.0], &[0.8, 0.8]).unwrap();
    assert_eq!((s2, r, done), (vec![0.0, 0.0], 1.0, true));
    let (_, r, _) = env.step(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
    let direct = (-2.0f64 * 0.64 / 0.1225).exp();
    assert!((r - direct).abs() < 1e-18);
}

#[test]
fn line_world_examples() {
    let env = EnvKind::LineWorld;
    let (s2, r, done) = env.step(&[0.8], &[1.0, 0.0]).unwrap();
    assert_eq!((s2, r, done), (vec![1.0], 0.0, true));
    let (s2, r, done) = env.step(&[-1.0], &[-1.0, 0.5]).unwrap();
    assert_eq!((s2, r, done), (vec![-1.0], -1.0, false));
}

#[test]
fn always_right_reaches_the_goal_in_seven_steps() {
    let env = EnvKind::LineWorld;
    let always_right = BehaviorSpec::EpsilonGreedy { eps: 0.0, go: [1.0, 0.0] };
    let mut s = vec![-0.5];
    let mut ret = 0.0;
    let mut steps = 0;
    loop {
        let (s2, r, done) = env.step(&s, &always_right.act(&mut common::rng(0))).unwrap();
        ret += r;
        steps += 1;
        s = s2;
        if done {
            break;
        }
    }
    assert_eq!((steps, ret), (7, -6.0));
}

#[test]
fn out_of_box_actions_are_contract_errors() {
    for env in EnvKind::ALL {
        let s = vec![0.0; env.state_dim()];
        for a in [[1.01, 0.0], [0.0, -2.0], [f64::NAN, 0.0]] {
            assert!(matches!(env.step(&s, &a), Err(Error::Contract(_))), "{a:?}");
        }
        assert!(matches!(env.step(&s, &[0.0]), Err(Error::Shape(_))));
    }
}

#[test]
fn env_names_round_trip() {
    for env in EnvKind::ALL {
        assert_eq!(EnvKind::parse(env.name()).unwrap(), env);
    }
    assert!(matches!(EnvKind::parse("cartpole"), Err(Error::Config(_))));
}

#[test]
fn one_bandit_episode_is_one_terminal_transition() {
    let d = bandit_data(1, 3);
    assert_eq!(d.len(), 1);
    assert_eq!(d.done, vec![1.0]);
    assert_eq!(d.s.row(0), &[0.0, 0.0]);
}

#[test]
fn zero_episodes_is_an_error() {
    let env = EnvKind::LineWorld;
    assert!(generate_dataset(env, &BehaviorSpec::default_for(env), 0, 1).is_err());
}

#[test]
fn line_world_episodes_are_well_formed() {
    let env = EnvKind::LineWorld;
    let d = generate_dataset(env, &BehaviorSpec::default_for(env), 200, 4).unwrap();
    let mut len = 0;
    let mut episodes = 0;
    for i in 0..d.len() {
        len += 1;
        let (s, s2) = (d.s.row(i)[0], d.s2.row(i)[0]);
        assert!((-1.0..=1.0).contains(&s2));
        assert_eq!(env.step(&[s], d.a.row(i)).unwrap(), (vec![s2], d.r[i], d.done[i] == 1.0));
        if d.done[i] == 1.0 || len == env.horizon() {
            episodes += 1;
            len = 0;
        } else {
            assert_eq!(d.s.row(i + 1)[0], s2, "row {i}");
        }
    }
    assert_eq!(episodes, 200);
    let ret: f64 = d.r.iter().sum::<f64>() / 200.0;
    assert!((-40.0..=0.0).contains(&ret));
}

#[test]
fn datasets_are_deterministic() {
    for env in EnvKind::ALL {
        let b = BehaviorSpec::default_for(env);
        let x = generate_dataset(env, &b, 50, 9).unwrap().encode();
        let y = generate_dataset(env, &b, 50, 9).unwrap().encode();
        let z = generate_dataset(env, &b, 50, 10).unwrap().encode();
        assert_eq!(x, y);
        assert_ne!(x, z);
    }
}

#[test]
fn stored_bandit_rewards_match_the_formula() {
    let d = bandit_data(10_000, 5);
    for i in 0..d.len() {
        let a = d.a.row(i);
        let mut best: f64 = 0.0;
        for c in BANDIT_CORNERS {
            let q = (a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2);
            best = best.max((-q / 0.35f64.powi(2)).exp());
        }
        assert!((d.r[i] - best).abs() <= 1e-12);
    }
}

#[test]
fn bandit_behavior_is_symmetric_bimodal_and_in_the_box() {
    let d = bandit_data(10_000, 6);
    let n = d.len() as f64;
    let mean: Vec<f64> = (0..2).map(|j| (0..d.len()).map(|i| d.a.row(i)[j]).sum::<f64>() / n).collect();
    assert!(mean[0].abs() < 0.02 && mean[1].abs() < 0.02, "{mean:?}");
    assert!(d.a.data().iter().all(|x| x.abs() <= 1.0));

    let mut hist = [[0usize; 20]; 20];
    for i in 0..d.len() {
        let a = d.a.row(i);
        let cell = |x: f64| (((x + 1.0) * 10.0) as usize).min(19);
        hist[cell(a[0])][cell(a[1])] += 1;
    }
    // A mode is a cell at least as full as its 8 neighbours, holding over 1%.
    let mut modes = Vec::new();
    for i in 0..20 {
        for j in 0..20 {
            let h = hist[i][j];
            if h * 100 < d.len() {
                continue;
            }
            let peak = (i.saturating_sub(1)..=(i + 1).min(19))
                .flat_map(|a| (j.saturating_sub(1)..=(j + 1).min(19)).map(move |b| (a, b)))
                .all(|(a, b)| hist[a][b] <= h);
            if peak {
                modes.push((i, j));
            }
        }
    }
    assert_eq!(modes.len(), 2, "{modes:?}");
    // Mode cells sit at the behavior centers, away from the reward corners.
    for (i, j) in modes {
        let x = -1.0 + (i as f64 + 0.5) / 10.0;
        let y = -1.0 + (j as f64 + 0.5) / 10.0;
        assert!((x.abs() - 0.4).abs() <= 0.1 && (y.abs() - 0.4).abs() <= 0.1, "({x}, {y})");
        assert!(bandit_reward(&[x, y]) < 0.5);
    }
}

#[test]
fn behavior_mean_reward_is_far_below_the_optimum() {
    let m = behavior_mean_reward(&BehaviorSpec::default_for(EnvKind::TwoCornerBandit), 200_000, 7);
    assert!((0.12..0.15).contains(&m), "{m}");
}

#[test]
fn rfds_round_trip_is_bit_exact() {
    let d = bandit_data(100, 8);
    let bytes = d.encode();
    let back = TransitionBatch::decode(&bytes).unwrap();
    assert_eq!(back, d);
    assert_eq!(back.encode(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.rfds");
    d.write(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(TransitionBatch::read(&path).unwrap(), d);
}

#[test]
fn empty_batch_is_a_valid_file() {
    let e = TransitionBatch::empty(1, 2);
    let bytes = e.encode();
    assert_eq!(bytes.len(), 24);
    let back = TransitionBatch::decode(&bytes).unwrap();
    assert!(back.is_empty());
    assert_eq!((back.state_dim(), back.action_dim()), (1, 2));
}

fn fixture() -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"RFDS");
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&2u32.to_le_bytes());
    b.extend_from_slice(&2u64.to_le_bytes());
    for v in [-0.5, 1.0, 0.0, -1.0, -0.3, 0.0, -0.3, -1.0, 0.25, -1.0, -0.5, 0.0] {
        b.extend_from_slice(&f64::to_le_bytes(v));
    }
    b
}

#[test]
fn hand_built_file_parses_exactly() {
    let d = TransitionBatch::decode(&fixture()).unwrap();
    assert_eq!(d.s, Tensor::matrix(2, 1, vec![-0.5, -0.3]));
    assert_eq!(d.a, Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.25]));
    assert_eq!(d.r, vec![-1.0, -1.0]);
    assert_eq!(d.s2, Tensor::matrix(2, 1, vec![-0.3, -0.5]));
    assert_eq!(d.done, vec![0.0, 0.0]);
    assert_eq!(d.encode(), fixture());
}

fn format_offset(bytes: &[u8]) -> u64 {
    match TransitionBatch::decode(bytes) {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn corrupt_files_report_byte_offsets() {
    let good = fixture();
    let mut bad_magic = good.clone();
    bad_magic[..4].copy_from_slice(b"RFCK");
    assert_eq!(format_offset(&bad_magic), 0);

    let mut bad_version = good.clone();
    bad_version[4] = 2;
    assert_eq!(format_offset(&bad_version), 4);

    assert_eq!(format_offset(&good[..good.len() - 3]), 16);
    let mut long = good.clone();
    long.push(0);
    assert_eq!(format_offset(&long), 16);
    // Cut inside the header.
    assert!(format_offset(&good[..10]) <= 10);
    assert!(matches!(TransitionBatch::decode(&[]), Err(Error::Format { .. })));
    assert_eq!(&good[..4], DATASET_MAGIC);
}

fn arb_batch() -> impl Strategy<Value = TransitionBatch> {
    (1usize..4, 1usize..4, 0usize..20).prop_flat_map(|(sd, ad, n)| {
        (
            prop::collection::vec(any::<f64>(), n * sd),
            prop::collection::vec(-1.0f64..=1.0, n * ad),
            prop::collection::vec(any::<f64>(), n),
            prop::collection::vec(any::<f64>(), n * sd),
            prop::collection::vec(prop::bool::ANY, n),
        )
            .prop_map(move |(s, a, r, s2, done)| TransitionBatch {
                s: Tensor::matrix(n, sd, s),
                a: Tensor::matrix(n, ad, a),
                r,
                s2: Tensor::matrix(n, sd, s2),
                done: done.into_iter().map(|d| d as u8 as f64).collect(),
            })
    })
}

proptest! {
    #[test]
    fn rfds_fuzz_round_trip(b in arb_batch()) {
        let bytes = b.encode();
        let back = TransitionBatch::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn rfds_garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = TransitionBatch::decode(&bytes);
    }

    #[test]
    fn bandit_reward_is_bounded_and_peaks_at_corners(x in -1.0f64..=1.0, y in -1.0f64..=1.0) {
        let r = bandit_reward(&[x, y]);
        prop_assert!(r > 0.0 && r <= 1.0);
        for c in BANDIT_CORNERS {
            prop_assert!(r <= bandit_reward(&c));
        }
    }
}
