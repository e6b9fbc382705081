//! Equal-split cost shares on the three branched graphs, with the upstream
//! and downstream sets they are built from.

use std::collections::BTreeMap;

use supplychain::topology::Topology;

fn main() -> anyhow::Result<()> {
    let graphs = [
        ("env1", vec![(1, 2), (1, 3), (3, 4)]),
        ("env2", vec![(1, 2), (2, 3), (2, 4)]),
        ("chain4", vec![(1, 2), (2, 3), (3, 4)]),
    ];
    for (name, edges) in graphs {
        let t = Topology::new(4, &edges)?;
        println!("{name}: edges {edges:?}, sources {:?}, sinks {:?}", t.source_centers(), t.sink_centers());
        for c in 1..=4 {
            println!("  center {c}: upstream {:?} downstream {:?}", t.upstream_set(c)?, t.downstream_set(c)?);
        }
        let unit: BTreeMap<_, _> = t.cost_edges().into_iter().map(|e| (e, 1.0)).collect();
        let shares = t.shapley_cost_shares(&unit)?;
        let total: f64 = shares.values().sum();
        println!("  unit-cost shares {shares:?} (sum {total})");
    }

    // Merges have no unique source path, so shares are undefined there.
    let env3 = Topology::new(4, &[(1, 2), (1, 3), (2, 4), (3, 4)])?;
    println!("env3: {}", env3.shapley_cost_shares(&BTreeMap::new()).unwrap_err());
    Ok(())
}
