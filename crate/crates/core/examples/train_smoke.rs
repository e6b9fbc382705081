//! Trains two learners on a two-center chain and compares them with the
//! wait and random baselines.
//!
//! Usage: `cargo run --release --example train_smoke [steps] [seed]`

use std::time::Instant;

use supplychain::engine::{run_episode, Assignment, EnvParams, EnvSpec, LayoutSpec, World};
use supplychain::layout::LayoutStyle;
use supplychain::learner::{evaluate_population, train, AssignmentMode, TrainConfig};
use supplychain::metrics::{aggregate, Estimate};
use supplychain::policies::make_policy;
use supplychain::topology::Topology;

fn baseline(world: &World, name: &str, episodes: u64) -> anyhow::Result<f64> {
    let mut total = 0.0;
    for seed in 0..episodes {
        let mut policies = vec![make_policy(name, 200)?, make_policy(name, 200)?];
        let log = run_episode(world, &Assignment::identity(2), &mut policies, 10_000 + seed)?;
        total += aggregate(&log)?.group_reward as f64;
    }
    Ok(total / episodes as f64)
}

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(500_000);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let world = World::build(EnvSpec {
        topology: Topology::chain(2)?.into(),
        layout: LayoutSpec { style: LayoutStyle::Linear, spacing: 2 },
        params: EnvParams::default(),
    })?;
    let cfg = TrainConfig {
        total_steps: steps,
        population_size: 2,
        parallel_envs: 16,
        batch_size: 16,
        assignment: AssignmentMode::Random,
        log_interval: 50_000,
        ..TrainConfig::default()
    };
    println!("wait baseline    {:.2}", baseline(&world, "wait", 50)?);
    println!("random baseline  {:.2}", baseline(&world, "random", 50)?);
    println!("selfish scripted {:.2}", baseline(&world, "selfish", 50)?);
    println!("carer scripted   {:.2}", baseline(&world, "carer", 50)?);
    let start = Instant::now();
    let (pop, curves) = train(&world, &cfg, seed)?;
    println!("trained {steps} steps in {:.1}s", start.elapsed().as_secs_f64());
    for r in &curves.rows {
        println!("  step {:>8}  group reward {:>7.2}  care {:>5.2}  entropy {:.3}", r.step, r.group_reward, r.total_care, r.entropy);
    }
    let eval = evaluate_population(&pop, &world, AssignmentMode::Random, 50, 99, false)?;
    let e = Estimate::from_samples(&eval.iter().map(|m| m.group_reward as f64).collect::<Vec<_>>());
    println!("learned          {:.2} +- {:.2}", e.mean, e.half_width);
    Ok(())
}
