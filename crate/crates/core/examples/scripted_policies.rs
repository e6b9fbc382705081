//! Runs the scripted policy mixes on the circular map and prints their metrics.

use supplychain::engine::{run_episode, Assignment, EnvParams, EnvSpec, LayoutSpec, RepairTime, World};
use supplychain::layout::LayoutStyle;
use supplychain::metrics::{aggregate, average_metrics, heatmap};
use supplychain::policies::{make_policy, DEFAULT_WINDOW};
use supplychain::topology::Topology;

fn main() -> anyhow::Result<()> {
    let world = World::build(EnvSpec {
        topology: Topology::chain(4)?.into(),
        layout: LayoutSpec { style: LayoutStyle::Circular, spacing: 3 },
        params: EnvParams { repair_time: RepairTime::Infinite, ..EnvParams::default() },
    })?;
    let mixes: [[&str; 4]; 4] = [
        ["selfish"; 4],
        ["carer"; 4],
        ["reciprocal"; 4],
        ["reciprocal", "reciprocal", "reciprocal", "selfish"],
    ];
    for mix in mixes {
        let mut runs = Vec::new();
        for seed in 0..20 {
            let mut policies = mix
                .iter()
                .map(|name| make_policy(name, DEFAULT_WINDOW))
                .collect::<Result<Vec<_>, _>>()?;
            let log = run_episode(&world, &Assignment::identity(4), &mut policies, seed)?;
            runs.push(aggregate(&log)?);
        }
        let avg = average_metrics(&runs)?;
        println!("{}", mix.join(" "));
        println!(
            "  group reward {:.1} +- {:.1}   care {:.1}   S {:.2}   D {:.2}   efficiency {:.3}",
            avg.group_reward.mean,
            avg.group_reward.half_width,
            avg.total_care.mean,
            avg.s.mean,
            avg.d.mean,
            avg.efficiency.mean
        );
        print!("{}", heatmap(&avg.care_norm_mean));
    }
    Ok(())
}
