//! Drives one episode step by step with hand-picked actions and prints the
//! frames, events and an agent's egocentric view.
//!
//! The view is printed as one character per pixel: `@` for the viewer, `a`
//! for other agents, `o` for units, `#` for walls and `.` for anything else.

use supplychain::engine::{colors, Action, Assignment, EnvParams, EnvSpec, LayoutSpec, ObservationMode, World, OBS_SIZE};
use supplychain::layout::LayoutStyle;
use supplychain::topology::Topology;

fn main() -> anyhow::Result<()> {
    let world = World::build(EnvSpec {
        topology: Topology::chain(2)?.into(),
        layout: LayoutSpec { style: LayoutStyle::Linear, spacing: 3 },
        params: EnvParams { spawn_prob: 0.5, ..EnvParams::default() },
    })?;
    let mut state = world.init(&Assignment::identity(2), 7)?;
    println!("{}", state.render());

    // Both agents walk onto their center tiles, then hold.
    let mut script = vec![[Action::Right, Action::Right]; 1];
    script.extend(std::iter::repeat_n([Action::Wait, Action::Wait], 25));
    for actions in script {
        let out = state.step(&actions)?;
        let e = &out.events;
        if !e.processed.is_empty() || !e.broke.is_empty() || e.discarded > 0 || e.sank > 0 {
            println!("t={:>2} rewards {:?} events {:?}", state.step_count(), out.rewards, e);
        }
    }
    println!("{}", state.render());

    let view = state.observe(0);
    for y in 0..OBS_SIZE {
        let row: String = (0..OBS_SIZE)
            .map(|x| match view.pixel(x, y) {
                colors::SELF => '@',
                colors::OTHER_AGENT => 'a',
                colors::UNIT => 'o',
                colors::WALL => '#',
                _ => '.',
            })
            .collect();
        println!("{row}");
    }
    let full = state.observe_with(0, ObservationMode::FullMap);
    println!("full-map view has {} values; as network input {:?}...", full.0.len(), &full.to_f64()[..6]);
    Ok(())
}
