//! Records an episode as a line-delimited log, reads it back, replays it
//! and checks that the metrics recomputed from the log agree.

use supplychain::engine::{run_episode, Assignment, EnvParams, EnvSpec, LayoutSpec, RepairTime, World};
use supplychain::layout::LayoutStyle;
use supplychain::log::{EpisodeLog, Replay};
use supplychain::metrics::aggregate;
use supplychain::policies::{make_policy, DEFAULT_WINDOW};
use supplychain::topology::Topology;

fn main() -> anyhow::Result<()> {
    let world = World::build(EnvSpec {
        topology: Topology::chain(4)?.into(),
        layout: LayoutSpec { style: LayoutStyle::Circular, spacing: 3 },
        params: EnvParams { repair_time: RepairTime::Finite(50), episode_length: 200, ..EnvParams::default() },
    })?;
    let mut policies = ["carer", "reciprocal", "selfish", "random"]
        .iter()
        .map(|n| make_policy(n, DEFAULT_WINDOW))
        .collect::<Result<Vec<_>, _>>()?;
    let log = run_episode(&world, &Assignment::new(vec![3, 1, 4, 2]), &mut policies, 42)?;

    let path = std::env::temp_dir().join("supplychain_example.jsonl");
    log.save(&path)?;
    let text = std::fs::read_to_string(&path)?;
    println!("{} ({} lines, {} bytes)", path.display(), text.lines().count(), text.len());
    println!("first step record: {}", text.lines().nth(1).unwrap_or_default());

    let back = EpisodeLog::load(&path)?;
    let frames = Replay::new(back.clone())?.frames()?;
    println!("replayed {} frames; last one:\n{}", frames.len(), frames.last().unwrap());

    let live = aggregate(&log)?;
    let replayed = aggregate(&back)?;
    println!("group reward {} / {}, S {:.3} / {:.3}", live.group_reward, replayed.group_reward, live.s, replayed.s);
    assert_eq!(live, replayed);
    Ok(())
}
