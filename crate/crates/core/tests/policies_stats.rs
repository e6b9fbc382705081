mod common;

use nalgebra::DMatrix;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use supplychain::engine::{run_episode, Action, Assignment, EnvParams};
use supplychain::layout::LayoutStyle;
use supplychain::learner::{sample_match, AssignmentMode};
use supplychain::metrics::{aggregate_window, reciprocity, MatrixNorm};
use supplychain::policies::{make_policy, PolicyContext};
use supplychain::rng;

fn circular() -> supplychain::engine::World {
    common::world(4, &[[1, 2], [2, 3], [3, 4]], LayoutStyle::Circular, 3, EnvParams::default())
}

#[test]
fn random_policy_is_uniform() {
    let world = circular();
    let state = world.init(&Assignment::identity(4), 0).unwrap();
    let mut policy = make_policy("random", 200).unwrap();
    let mut r = rng::episode_rng(9);
    let draws = 100_000;
    let mut counts = [0u64; 5];
    for _ in 0..draws {
        let a = policy.act(&PolicyContext::new(&state, 0), &mut r).unwrap();
        counts[Action::ALL.iter().position(|&x| x == a).unwrap()] += 1;
    }
    let expected = draws as f64 / 5.0;
    for c in counts {
        assert!((c as f64 / draws as f64 - 0.2).abs() < 0.01, "{counts:?}");
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi2);
    assert!(p > 1e-3, "chi2 {chi2}, p {p}");
}

#[test]
fn random_matches_are_uniform() {
    let mut r = rng::episode_rng(3);
    let draws = 100_000;
    let mut picked = [0u64; 8];
    let mut pairs = [[0u64; 4]; 8];
    for _ in 0..draws {
        let m = sample_match(8, 4, AssignmentMode::Random, &mut r);
        for (slot, &member) in m.members.iter().enumerate() {
            picked[member] += 1;
            pairs[member][m.assignment.center_of(slot) - 1] += 1;
        }
    }
    for k in 0..8 {
        assert!((picked[k] as f64 / draws as f64 - 0.5).abs() < 0.01, "{picked:?}");
        for c in 0..4 {
            assert!((pairs[k][c] as f64 / draws as f64 - 0.125).abs() < 0.01, "{pairs:?}");
        }
    }
}

#[test]
fn fixed_matches_never_change() {
    let mut r = rng::episode_rng(3);
    for _ in 0..100 {
        let m = sample_match(8, 4, AssignmentMode::Fixed, &mut r);
        assert_eq!(m.members, vec![0, 1, 2, 3]);
        assert_eq!(m.assignment.centers(), &[1, 2, 3, 4]);
    }
}

#[test]
fn reciprocal_agents_end_up_caring_for_each_other() {
    let world = circular();
    let mut pooled = DMatrix::zeros(4, 4);
    let mut mean_s = 0.0;
    let episodes = 100;
    for seed in 0..episodes {
        let mut pols = common::policies(&["reciprocal"; 4]);
        let log = run_episode(&world, &Assignment::identity(4), &mut pols, seed).unwrap();
        let m = aggregate_window(&log, 500, 1000, MatrixNorm::Frobenius).unwrap();
        pooled += &m.care_raw;
        mean_s += m.s / episodes as f64;
    }
    let s = reciprocity(&pooled, MatrixNorm::Frobenius).unwrap();
    println!("pooled S {s:.3}, mean per-episode S {mean_s:.3}\n{pooled}");
    assert!(s > 0.75, "pooled S {s}");
}

#[test]
fn selfish_member_neither_gives_nor_gets_much_care() {
    let world = circular();
    let mut pooled = DMatrix::zeros(4, 4);
    for seed in 0..40 {
        let mut pols = common::policies(&["reciprocal", "reciprocal", "reciprocal", "selfish"]);
        let log = run_episode(&world, &Assignment::identity(4), &mut pols, seed).unwrap();
        pooled += &supplychain::metrics::aggregate(&log).unwrap().care_raw;
    }
    assert_eq!(pooled.row(3).sum(), 0.0, "selfish agent cared:\n{pooled}");
    let to_selfish = pooled.column(3).sum();
    let to_others = pooled.sum() - to_selfish;
    assert!(to_selfish * 3.0 < to_others / 3.0 + 1e-9, "\n{pooled}");
}
