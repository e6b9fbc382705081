//! Social-outcome metrics computed from episode logs.
//!
//! Agents are identified by the center they own, so row `i` of the care
//! matrix holds the repairs done by the owner of center `i + 1` and column
//! `j` the repairs received by center `j + 1`.

use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::log::{EpisodeLog, LogError};
use crate::topology::{Topology, TopologyError};

/// z value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Entries below this are left blank in heatmaps.
pub const HEATMAP_CUTOFF: f64 = 0.01;

pub const CARE_CSV_SCHEMA: &str = "# supplychain care-matrix v1";
pub const RUNS_CSV_SCHEMA: &str = "# supplychain runs v1";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("care matrix has a negative entry at ({0}, {1})")]
    NegativeEntry(usize, usize),
    #[error("care matrix is {got}x{got}, topology has {expected} centers")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least 2 runs to average, got {0}")]
    TooFewRuns(usize),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Matrix norm used in the reciprocity score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixNorm {
    #[default]
    Frobenius,
    Spectral,
}

impl MatrixNorm {
    pub fn apply(self, m: &DMatrix<f64>) -> f64 {
        match self {
            MatrixNorm::Frobenius => m.norm(),
            MatrixNorm::Spectral => {
                if m.is_empty() {
                    0.0
                } else {
                    m.clone().singular_values().max()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixDecomposition {
    pub sym: DMatrix<f64>,
    pub anti: DMatrix<f64>,
}

pub fn decompose(c: &DMatrix<f64>) -> MatrixDecomposition {
    let t = c.transpose();
    MatrixDecomposition { sym: (c + &t) * 0.5, anti: (c - &t) * 0.5 }
}

/// Care reciprocity `(|Csym| - |Canti|) / (|Csym| + |Canti|)`, 0 for the zero matrix.
pub fn reciprocity(c: &DMatrix<f64>, norm: MatrixNorm) -> Result<f64, MetricsError> {
    check_nonnegative(c)?;
    let MatrixDecomposition { sym, anti } = decompose(c);
    let (s, a) = (norm.apply(&sym), norm.apply(&anti));
    if s + a == 0.0 {
        return Ok(0.0);
    }
    Ok((s - a) / (s + a))
}

/// Care direction: +1 when all care goes upstream, -1 when all goes
/// downstream, 0 when there is no care.
pub fn care_direction(c: &DMatrix<f64>, t: &Topology) -> Result<f64, MetricsError> {
    check_nonnegative(c)?;
    let n = t.num_centers();
    if c.nrows() != n || c.ncols() != n {
        return Err(MetricsError::DimensionMismatch { expected: n, got: c.nrows() });
    }
    let total = c.sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let mut signed = 0.0;
    for i in 1..=n {
        let up = t.upstream_set(i)?;
        let down = t.downstream_set(i)?;
        for j in 1..=n {
            let w = c[(i - 1, j - 1)];
            if up.contains(&j) {
                signed += w;
            } else if down.contains(&j) {
                signed -= w;
            }
        }
    }
    Ok(signed / total)
}

fn check_nonnegative(c: &DMatrix<f64>) -> Result<(), MetricsError> {
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            if c[(i, j)] < 0.0 {
                return Err(MetricsError::NegativeEntry(i, j));
            }
        }
    }
    Ok(())
}

pub fn efficiency_from_counts(sank: u64, spawned: u64) -> f64 {
    if spawned == 0 {
        0.0
    } else {
        sank as f64 / spawned as f64
    }
}

/// Fraction of spawned units that left through a sink.
pub fn efficiency(log: &EpisodeLog) -> Result<f64, MetricsError> {
    let m = aggregate(log)?;
    Ok(m.efficiency)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocialMetrics {
    /// Processed units per center owner.
    pub r: Vec<u64>,
    /// Breakages per center.
    pub b: Vec<u64>,
    pub care_raw: DMatrix<f64>,
    /// `care_raw` divided by the total number of breakages.
    pub care_norm: DMatrix<f64>,
    pub s: f64,
    pub d: f64,
    pub efficiency: f64,
    pub group_reward: u64,
    /// Row sums of `care_raw`.
    pub total_care_per_agent: Vec<f64>,
    pub spawned: u64,
    pub sank: u64,
    pub discarded: u64,
}

impl SocialMetrics {
    pub fn total_care(&self) -> f64 {
        self.care_raw.sum()
    }

    /// Builds the metrics from raw counts.
    pub fn from_counts(
        topology: &Topology,
        r: Vec<u64>,
        b: Vec<u64>,
        care_raw: DMatrix<f64>,
        spawned: u64,
        sank: u64,
        discarded: u64,
        norm: MatrixNorm,
    ) -> Result<SocialMetrics, MetricsError> {
        let breakages: u64 = b.iter().sum();
        let care_norm = if breakages == 0 {
            DMatrix::zeros(care_raw.nrows(), care_raw.ncols())
        } else {
            &care_raw / breakages as f64
        };
        let s = reciprocity(&care_raw, norm)?;
        let d = care_direction(&care_raw, topology)?;
        let total_care_per_agent = care_raw.row_iter().map(|row| row.sum()).collect();
        Ok(SocialMetrics {
            group_reward: r.iter().sum(),
            efficiency: efficiency_from_counts(sank, spawned),
            r,
            b,
            care_raw,
            care_norm,
            s,
            d,
            total_care_per_agent,
            spawned,
            sank,
            discarded,
        })
    }
}

/// Metrics over a whole, complete episode.
pub fn aggregate(log: &EpisodeLog) -> Result<SocialMetrics, MetricsError> {
    aggregate_with(log, MatrixNorm::Frobenius)
}

pub fn aggregate_with(log: &EpisodeLog, norm: MatrixNorm) -> Result<SocialMetrics, MetricsError> {
    log.check_complete()?;
    aggregate_window(log, 0, u32::MAX, norm)
}

/// Metrics over the steps `from <= t < to` of a log.
pub fn aggregate_window(log: &EpisodeLog, from: u32, to: u32, norm: MatrixNorm) -> Result<SocialMetrics, MetricsError> {
    let topology = Topology::try_from(log.header.env.topology.clone())?;
    let n = topology.num_centers();
    let mut r = vec![0u64; n];
    let mut b = vec![0u64; n];
    let mut care = DMatrix::zeros(n, n);
    let (mut spawned, mut sank, mut discarded) = (0u64, 0u64, 0u64);
    for rec in log.steps.iter().filter(|s| s.t >= from && s.t < to) {
        let e = &rec.events;
        for &c in &e.processed {
            r[c - 1] += 1;
        }
        for &c in &e.broke {
            b[c - 1] += 1;
        }
        for &(i, j) in &e.repaired {
            care[(i - 1, j - 1)] += 1.0;
        }
        spawned += e.spawned_total() as u64;
        sank += e.sank as u64;
        discarded += e.discarded as u64;
    }
    SocialMetrics::from_counts(&topology, r, b, care, spawned, sank, discarded, norm)
}

/// A mean with the half-width of its 95% interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    /// Mean and `1.96 * sd / sqrt(n)`, with the population standard deviation.
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Estimate { mean, half_width: Z95 * var.sqrt() / n.sqrt() }
    }

    pub fn lo(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn hi(&self) -> f64 {
        self.mean + self.half_width
    }

    /// Whether the two intervals are disjoint.
    pub fn separated_from(&self, other: &Estimate) -> bool {
        self.hi() < other.lo() || other.hi() < self.lo()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub runs: usize,
    pub group_reward: Estimate,
    pub total_care: Estimate,
    pub s: Estimate,
    pub d: Estimate,
    pub efficiency: Estimate,
    pub r: Vec<Estimate>,
    pub b: Vec<Estimate>,
    /// Mean of the per-run normalized care matrices.
    pub care_norm_mean: DMatrix<f64>,
}

pub fn average_metrics(runs: &[SocialMetrics]) -> Result<MetricsSummary, MetricsError> {
    if runs.len() < 2 {
        return Err(MetricsError::TooFewRuns(runs.len()));
    }
    let field = |f: &dyn Fn(&SocialMetrics) -> f64| Estimate::from_samples(&runs.iter().map(f).collect::<Vec<_>>());
    let n = runs[0].r.len();
    let mut care_norm_mean = DMatrix::zeros(n, n);
    for m in runs {
        care_norm_mean += &m.care_norm;
    }
    care_norm_mean /= runs.len() as f64;
    Ok(MetricsSummary {
        runs: runs.len(),
        group_reward: field(&|m| m.group_reward as f64),
        total_care: field(&|m| m.total_care()),
        s: field(&|m| m.s),
        d: field(&|m| m.d),
        efficiency: field(&|m| m.efficiency),
        r: (0..n).map(|i| field(&|m| m.r[i] as f64)).collect(),
        b: (0..n).map(|i| field(&|m| m.b[i] as f64)).collect(),
        care_norm_mean,
    })
}

/// Writes an N x N matrix with a schema comment and a header row.
pub fn write_care_csv<W: Write>(mut w: W, c: &DMatrix<f64>) -> Result<(), MetricsError> {
    writeln!(w, "{CARE_CSV_SCHEMA}")?;
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["carer".to_string()];
    header.extend((1..=c.ncols()).map(|j| j.to_string()));
    out.write_record(&header)?;
    for i in 0..c.nrows() {
        let mut row = vec![(i + 1).to_string()];
        row.extend((0..c.ncols()).map(|j| format_float(c[(i, j)])));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// One row of the per-run table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub label: String,
    pub run: String,
    pub seed: String,
    pub metrics: RowValues,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowValues {
    pub group_reward: f64,
    pub total_care: f64,
    pub s: f64,
    pub d: f64,
    pub efficiency: f64,
}

impl From<&SocialMetrics> for RowValues {
    fn from(m: &SocialMetrics) -> Self {
        RowValues {
            group_reward: m.group_reward as f64,
            total_care: m.total_care(),
            s: m.s,
            d: m.d,
            efficiency: m.efficiency,
        }
    }
}

/// Writes per-run rows followed by, for each label, a `mean` row and a
/// `ci95` row holding interval half-widths.
pub fn write_runs_csv<W: Write>(mut w: W, rows: &[RunRow], summaries: &[(String, MetricsSummary)]) -> Result<(), MetricsError> {
    writeln!(w, "{RUNS_CSV_SCHEMA}")?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["setting", "run", "seed", "group_reward", "total_care", "S", "D", "efficiency"])?;
    for row in rows {
        let v = row.metrics;
        out.write_record([
            row.label.clone(),
            row.run.clone(),
            row.seed.clone(),
            format_float(v.group_reward),
            format_float(v.total_care),
            format_float(v.s),
            format_float(v.d),
            format_float(v.efficiency),
        ])?;
    }
    for (label, s) in summaries {
        let mean = [s.group_reward, s.total_care, s.s, s.d, s.efficiency];
        for (kind, pick) in [("mean", true), ("ci95", false)] {
            let mut rec = vec![label.clone(), kind.to_string(), String::new()];
            rec.extend(mean.iter().map(|e| format_float(if pick { e.mean } else { e.half_width })));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Text heatmap with two decimals; entries below [`HEATMAP_CUTOFF`] are blank.
pub fn heatmap(c: &DMatrix<f64>) -> String {
    let mut s = String::from("      ");
    for j in 1..=c.ncols() {
        s.push_str(&format!("{j:>6}"));
    }
    s.push('\n');
    for i in 0..c.nrows() {
        s.push_str(&format!("{:>6}", i + 1));
        for j in 0..c.ncols() {
            let v = c[(i, j)];
            if v < HEATMAP_CUTOFF {
                s.push_str("      ");
            } else {
                s.push_str(&format!("{v:>6.2}"));
            }
        }
        s.push('\n');
    }
    s
}

/// Shortest round-trip decimal form, so CSVs are byte-stable.
pub fn format_float(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else {
        format!("{x}")
    }
}
