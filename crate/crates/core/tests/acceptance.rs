//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if
//! any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use supplychain::engine::{run_episode, Assignment, EnvParams, RepairTime, World};
use supplychain::layout::LayoutStyle;
use supplychain::learner::network::{a2c_loss, Architecture, LossWeights, Network, Trace};
use supplychain::learner::{evaluate_population, train, AssignmentMode};
use supplychain::metrics::{aggregate, care_direction, reciprocity, Estimate, MatrixNorm, SocialMetrics};
use supplychain::runner::{execute, ExecOptions};
use supplychain::scenario::{Grid, Scenario};
use supplychain::topology::{CostEdge, Topology};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn circular(params: EnvParams) -> World {
    common::world(4, &[[1, 2], [2, 3], [3, 4]], LayoutStyle::Circular, 3, params)
}

fn no_self_repair() -> EnvParams {
    EnvParams { repair_time: RepairTime::Infinite, ..EnvParams::default() }
}

/// Runs `episodes` seeded episodes of one policy mix in parallel.
fn play(world: &World, names: &[&str], episodes: u64, base_seed: u64) -> Vec<SocialMetrics> {
    (0..episodes)
        .into_par_iter()
        .map(|k| {
            let mut pols = common::policies(names);
            let log = run_episode(world, &Assignment::identity(names.len()), &mut pols, base_seed + k).unwrap();
            aggregate(&log).unwrap()
        })
        .collect()
}

fn estimate(runs: &[SocialMetrics], f: impl Fn(&SocialMetrics) -> f64) -> Estimate {
    Estimate::from_samples(&runs.iter().map(f).collect::<Vec<_>>())
}

fn fmt(e: &Estimate) -> String {
    format!("{:.2} [{:.2}, {:.2}]", e.mean, e.lo(), e.hi())
}

fn metric_exactness() -> Outcome {
    let m = |rows: &[f64], n| DMatrix::from_row_slice(n, n, rows);
    let s = |c: &DMatrix<f64>| reciprocity(c, MatrixNorm::Frobenius).unwrap();
    let chain = Topology::chain(2).unwrap();
    let d = |c: &DMatrix<f64>| care_direction(c, &chain).unwrap();
    let exact = [
        (s(&m(&[0.0, 1.0, 1.0, 0.0], 2)), 1.0),
        (s(&m(&[0.0, 1.0, 0.0, 0.0], 2)), 0.0),
        (s(&m(&[0.0, 2.0, 1.0, 0.0], 2)), 0.5),
        (d(&m(&[0.0, 0.0, 1.0, 0.0], 2)), 1.0),
        (d(&m(&[0.0, 1.0, 0.0, 0.0], 2)), -1.0),
        (d(&m(&[0.0, 1.0, 1.0, 0.0], 2)), 0.0),
    ];
    let worst = exact.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out_of_range = 0;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=6);
        let c = DMatrix::from_fn(n, n, |_, _| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..10.0) });
        let v = s(&c);
        if !(0.0..=1.0).contains(&v) {
            out_of_range += 1;
        }
    }
    check(
        worst <= 1e-12 && out_of_range == 0,
        format!("worst example error {worst:.1e}, {out_of_range} of 10000 random S outside [0, 1]"),
    )
}

fn geometric_breakage() -> Outcome {
    let world = circular(no_self_repair());
    let runs = play(&world, &["selfish"; 4], 10_000, 0);
    // Every processing is an independent break trial, so total processed
    // over total breakages estimates the mean run length, censored runs
    // included.
    let processed: u64 = runs.iter().flat_map(|m| m.r.iter()).sum();
    let breaks: u64 = runs.iter().flat_map(|m| m.b.iter()).sum();
    let first_only = runs.iter().all(|m| m.b.iter().all(|&b| b <= 1));
    let mean = processed as f64 / breaks as f64;
    check(
        (mean - 4.0).abs() <= 0.2 && first_only,
        format!("{processed} processed / {breaks} breakages = {mean:.3} (target 4.0 ± 0.2)"),
    )
}

fn unit_conservation() -> Outcome {
    common::conservation_fuzz(1000, 2024).map(|_| "1000 random-play episodes balance exactly".to_string())
}

fn oracle_equivalence() -> Outcome {
    let mut steps = 0;
    for (name, world) in common::oracle_worlds() {
        for seed in 0..100 {
            steps += common::compare_with_oracle(&world, 1000 + seed).map_err(|e| format!("{name} seed {seed}: {e}"))?.steps;
        }
    }
    Ok(format!("6 maps x 100 seeds, {steps} steps identical"))
}

fn cooperation_premium() -> Outcome {
    let world = circular(no_self_repair());
    let carers = play(&world, &["carer"; 4], 100, 500);
    let selfish = play(&world, &["selfish"; 4], 100, 500);
    let c = estimate(&carers, |m| m.group_reward as f64);
    let s = estimate(&selfish, |m| m.group_reward as f64);
    let selfish_care: f64 = selfish.iter().map(|m| m.total_care()).sum();
    check(
        c.lo() > s.hi() && selfish_care == 0.0,
        format!("carer {} vs selfish {}, selfish care {selfish_care}", fmt(&c), fmt(&s)),
    )
}

fn self_repair_intervention() -> Outcome {
    let settings = [RepairTime::Finite(10), RepairTime::Finite(100), RepairTime::Infinite];
    let reward: Vec<Estimate> = settings
        .iter()
        .map(|&rt| {
            let world = circular(EnvParams { repair_time: rt, ..EnvParams::default() });
            estimate(&play(&world, &["selfish"; 4], 100, 700), |m| m.group_reward as f64)
        })
        .collect();
    let care: Vec<(Estimate, Estimate)> = [settings[0], settings[2]]
        .iter()
        .map(|&rt| {
            let world = circular(EnvParams { repair_time: rt, ..EnvParams::default() });
            let runs = play(&world, &["reciprocal"; 4], 100, 700);
            // Care relative to breakages, as in the per-setting care figures.
            (estimate(&runs, |m| m.care_norm.sum()), estimate(&runs, |m| m.total_care()))
        })
        .collect();
    let monotone = reward[0].mean >= reward[1].mean && reward[1].mean >= reward[2].mean;
    let separated = reward[0].lo() > reward[2].hi();
    check(
        monotone && separated && care[0].0.mean < care[1].0.mean,
        format!(
            "selfish reward 10: {}, 100: {}, inf: {}; reciprocal care per breakage 10: {:.3}, inf: {:.3} (raw {:.1} vs {:.1})",
            fmt(&reward[0]),
            fmt(&reward[1]),
            fmt(&reward[2]),
            care[0].0.mean,
            care[1].0.mean,
            care[0].1.mean,
            care[1].1.mean
        ),
    )
}

fn geometry_intervention() -> Outcome {
    let scn = Scenario::preset("linear_distance_sweep").unwrap();
    let mut grid = Grid::default();
    grid.parse_arg("spacing=2,5,7").unwrap();
    let report = execute(&scn, &grid, &ExecOptions::default()).map_err(|e| e.to_string())?;
    let means: Vec<f64> = report.settings.iter().map(|s| s.summary.as_ref().unwrap().group_reward.mean).collect();
    let runs = report.settings[0].results.len();
    check(
        means.windows(2).all(|w| w[0] > w[1]),
        format!("reciprocal group reward at d = 2, 5, 7: {means:.2?} ({runs} episodes each)"),
    )
}

fn efficiency_check() -> Outcome {
    let mean_eff = |preset: &str, policies: &[&str]| -> Result<f64, String> {
        let mut scn = Scenario::preset(preset).unwrap();
        scn.agents.policies = policies.iter().map(|p| p.to_string()).collect();
        scn.run.seeds = (0..10).collect();
        scn.run.episodes = 5;
        let report = execute(&scn, &Grid::default(), &ExecOptions::default()).map_err(|e| e.to_string())?;
        Ok(report.settings[0].summary.as_ref().unwrap().efficiency.mean)
    };
    let partial = mean_eff("env2", &["carer", "carer", "wait", "wait"])?;
    let full = mean_eff("env1", &["carer"; 4])?;
    check(partial < full, format!("env2 with centers 3-4 idle: {partial:.3}, env1 all carers: {full:.3}"))
}

fn shapley_oracle() -> Outcome {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for n in 1..=5 {
        for parents in common::parent_forests(n) {
            let edges: Vec<(usize, usize)> =
                parents.iter().enumerate().filter_map(|(i, p)| p.map(|p| (p, i + 1))).collect();
            let Ok(t) = Topology::new(n, &edges) else { continue };
            let costs: BTreeMap<CostEdge, f64> = t.cost_edges().into_iter().map(|e| (e, 1.0)).collect();
            let shares = t.shapley_cost_shares(&costs).map_err(|e| e.to_string())?;
            // Unit-cost coalition cost: number of distinct edges its members use.
            let uses = |c: usize| {
                let mut path = vec![];
                let mut cur = c;
                while let Some(p) = parents[cur - 1] {
                    path.push(CostEdge::Link(p, cur));
                    cur = p;
                }
                path.push(CostEdge::Source(cur));
                path
            };
            let paths: Vec<Vec<CostEdge>> = (1..=n).map(uses).collect();
            let brute = common::shapley_brute_force(n, |mask| {
                let set: std::collections::BTreeSet<CostEdge> =
                    (0..n).filter(|i| mask & (1 << i) != 0).flat_map(|i| paths[i].clone()).collect();
                set.len() as f64
            });
            for c in 1..=n {
                worst = worst.max((shares[&c] - brute[c - 1]).abs());
            }
            checked += 1;
        }
    }
    check(worst <= 1e-9, format!("{checked} forests with up to 5 centers, worst error {worst:.1e}"))
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(dir).unwrap().display().to_string(), std::fs::read(e.path()).unwrap()))
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0;
    for preset in ["baseline_circular", "repair_time_sweep", "env3"] {
        let scn = Scenario::preset(preset).unwrap();
        let mut outputs = Vec::new();
        for run in 0..2 {
            let dir = tmp.path().join(format!("{preset}_{run}"));
            let opts = ExecOptions { out: Some(&dir), ..ExecOptions::default() };
            execute(&scn, &Grid::from_scenario(&scn), &opts).map_err(|e| e.to_string())?;
            outputs.push(dir_bytes(&dir));
        }
        if outputs[0] != outputs[1] {
            return Err(format!("{preset}: artifact directories differ"));
        }
        files += outputs[0].len();
    }
    Ok(format!("3 presets run twice, {files} files byte-identical"))
}

fn gradient_check_default_net() -> Result<f64, String> {
    let net = Network::new(Architecture::default());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p: Vec<f64> = net.init_params(8).iter().map(|v| v + rng.gen_range(-0.02..0.02)).collect();
    let world = circular(EnvParams::default());
    let state = world.init(&Assignment::identity(4), 1).unwrap();
    let batch: Vec<(Vec<f64>, usize, f64)> = (0..2).map(|slot| (state.observe(slot).to_f64(), slot + 1, 0.5 + slot as f64)).collect();
    let w = LossWeights { value: 0.5, entropy: 0.003 };
    let mut grad = vec![0.0; net.num_params()];
    let mut adv = Vec::new();
    for (o, a, g) in &batch {
        let mut tr = Trace::default();
        let out = net.forward_traced(&p, o, &mut tr).unwrap();
        let (_, dz, dv) = a2c_loss(&out, *a, *g, w);
        adv.push(g - out.value);
        net.backward(&p, o, &tr, &dz, dv, &mut grad);
    }
    let loss = |q: &[f64]| -> f64 {
        batch
            .iter()
            .zip(&adv)
            .map(|((o, a, g), adv)| {
                let out = net.forward(q, o).unwrap();
                -adv * out.probs[*a].ln() + 0.5 * w.value * (g - out.value).powi(2) - w.entropy * out.entropy()
            })
            .sum()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut q = p.clone();
    for i in 0..net.num_params() {
        q[i] = p[i] + h;
        let up = loss(&q);
        q[i] = p[i] - h;
        let down = loss(&q);
        q[i] = p[i];
        let numeric = (up - down) / (2.0 * h);
        // Central differences carry about 1e-10 of rounding error, so the
        // relative error is floored at a scale of 1e-5.
        let scale = numeric.abs().max(grad[i].abs()).max(1e-5);
        worst = worst.max((numeric - grad[i]).abs() / scale);
    }
    Ok(worst)
}

fn learning_smoke() -> Outcome {
    let scn = Scenario::preset("learning_smoke").unwrap();
    let world = World::build(scn.env_spec().unwrap()).unwrap();
    let wait = estimate(&play(&world, &["wait", "wait"], 50, 9000), |m| m.group_reward as f64).mean;
    let random = estimate(&play(&world, &["random", "random"], 50, 9000), |m| m.group_reward as f64).mean;
    let mut learned = Vec::new();
    for seed in 0..5u64 {
        let (pop, _) = train(&world, &scn.train, seed).map_err(|e| e.to_string())?;
        let eval = evaluate_population(&pop, &world, AssignmentMode::Random, 30, 9000 + seed, false).map_err(|e| e.to_string())?;
        learned.push(estimate(&eval, |m| m.group_reward as f64).mean);
    }
    let wins = learned.iter().filter(|&&r| r > 0.0 && r >= 3.0 * wait).count();
    let grad_err = gradient_check_default_net()?;
    check(
        wins >= 4 && grad_err <= 1e-4,
        format!(
            "learned {learned:.1?} vs wait {wait:.2} (random {random:.2}): {wins}/5 seeds at 3x; gradient rel. error {grad_err:.1e}"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("metric exactness", metric_exactness),
        ("geometric breakage", geometric_breakage),
        ("unit conservation", unit_conservation),
        ("oracle equivalence", oracle_equivalence),
        ("cooperation premium", cooperation_premium),
        ("self-repair intervention", self_repair_intervention),
        ("geometry intervention", geometry_intervention),
        ("efficiency definition", efficiency_check),
        ("shapley oracle", shapley_oracle),
        ("determinism", determinism),
        ("learning smoke", learning_smoke),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<26} {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<26} {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
