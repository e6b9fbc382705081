//! Trains a small population briefly, saves a checkpoint, loads it back and
//! evaluates the frozen members, sampled and greedy.
//!
//! Usage: `cargo run --release --example checkpoint_eval [steps]`

use supplychain::engine::World;
use supplychain::learner::{evaluate_population, train, AssignmentMode, Checkpoint, Population};
use supplychain::metrics::Estimate;
use supplychain::scenario::Scenario;

fn main() -> anyhow::Result<()> {
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100_000);
    let mut scn = Scenario::preset("learning_smoke")?;
    scn.train.total_steps = steps;
    scn.train.log_interval = steps / 4;
    let world = World::build(scn.env_spec()?)?;

    let (pop, curves) = train(&world, &scn.train, 1)?;
    for r in &curves.rows {
        println!("step {:>7}: group reward {:>6.2}, entropy {:.3}", r.step, r.group_reward, r.entropy);
    }

    let path = std::env::temp_dir().join("supplychain_example.ckpt");
    pop.to_checkpoint(&scn.train).save(&path)?;
    let loaded = Population::from_checkpoint(&Checkpoint::load(&path)?, Some(&scn.train))?;
    println!("checkpoint {} holds {} members", path.display(), loaded.size());

    for greedy in [false, true] {
        let runs = evaluate_population(&loaded, &world, AssignmentMode::Random, 20, 5, greedy)?;
        let e = Estimate::from_samples(&runs.iter().map(|m| m.group_reward as f64).collect::<Vec<_>>());
        println!("greedy = {greedy}: group reward {:.2} ± {:.2}", e.mean, e.half_width);
    }
    Ok(())
}
