//! Social metrics from hand-written care matrices and from a real episode:
//! reciprocity, care direction, heatmap and CSV export.

use nalgebra::DMatrix;
use supplychain::engine::{run_episode, Assignment, EnvParams, EnvSpec, LayoutSpec, World};
use supplychain::layout::LayoutStyle;
use supplychain::metrics::{aggregate, care_direction, decompose, heatmap, reciprocity, write_care_csv, MatrixNorm};
use supplychain::policies::{make_policy, DEFAULT_WINDOW};
use supplychain::topology::Topology;

fn main() -> anyhow::Result<()> {
    let chain = Topology::chain(3)?;
    let cases = [
        ("mutual 1<->2", DMatrix::from_row_slice(3, 3, &[0., 4., 0., 4., 0., 0., 0., 0., 0.])),
        ("all upstream", DMatrix::from_row_slice(3, 3, &[0., 0., 0., 2., 0., 0., 1., 3., 0.])),
        ("lopsided", DMatrix::from_row_slice(3, 3, &[0., 2., 0., 1., 0., 0., 0., 0., 0.])),
    ];
    for (name, c) in &cases {
        let parts = decompose(c);
        println!(
            "{name:<13} S = {:.3} (spectral {:.3}), D = {:+.3}, |sym| = {:.3}, |anti| = {:.3}",
            reciprocity(c, MatrixNorm::Frobenius)?,
            reciprocity(c, MatrixNorm::Spectral)?,
            care_direction(c, &chain)?,
            parts.sym.norm(),
            parts.anti.norm()
        );
    }

    let world = World::build(EnvSpec {
        topology: Topology::chain(4)?.into(),
        layout: LayoutSpec { style: LayoutStyle::Circular, spacing: 3 },
        params: EnvParams::default(),
    })?;
    let mut policies = (0..4).map(|_| make_policy("carer", DEFAULT_WINDOW)).collect::<Result<Vec<_>, _>>()?;
    let m = aggregate(&run_episode(&world, &Assignment::identity(4), &mut policies, 3)?)?;
    println!("\ncarers: reward {} R {:?} B {:?} efficiency {:.3}", m.group_reward, m.r, m.b, m.efficiency);
    println!("care per breakage:\n{}", heatmap(&m.care_norm));
    write_care_csv(std::io::stdout().lock(), &m.care_norm)?;
    Ok(())
}
