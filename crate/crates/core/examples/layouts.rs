use supplychain::layout::{generate_layout, LayoutStyle};
use supplychain::topology::Topology;

fn main() -> anyhow::Result<()> {
    let chain = Topology::chain(4)?;
    println!("{}", generate_layout(&chain, LayoutStyle::Circular, 0)?.to_ascii());
    println!("{}", generate_layout(&chain, LayoutStyle::Linear, 2)?.to_ascii());
    println!("{}", generate_layout(&chain, LayoutStyle::Linear, 5)?.to_ascii());
    for edges in [
        vec![(1, 2), (1, 3), (3, 4)],
        vec![(1, 2), (2, 3), (2, 4)],
        vec![(1, 2), (1, 3), (2, 4), (3, 4)],
    ] {
        let t = Topology::new(4, &edges)?;
        println!("{:?}\n{}", edges, generate_layout(&t, LayoutStyle::Branched, 3)?.to_ascii());
    }
    Ok(())
}
