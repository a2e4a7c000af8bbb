//! Descriptive tables: tercile cross-tabs, heatmap cells, summaries.
//!
//! Everything is emitted as CSV; plotting happens elsewhere.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::{EfficiencyEstimate, Slice};
use crate::elasticity::{ElasticityPoint, PolyFit};
use crate::stats::{mean, min_max, sample_sd};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed table: {0}")]
    Malformed(String),
}

/// Writes rows as CSV with a header taken from the field names.
pub fn write_csv<S: Serialize, W: Write>(rows: &[S], out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<D: DeserializeOwned, R: Read>(input: R) -> Result<Vec<D>, ReportError> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(ReportError::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Count,
    Mean,
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Count => "count",
            CellKind::Mean => "mean",
        })
    }
}

impl FromStr for CellKind {
    type Err = ReportError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "count" => Ok(CellKind::Count),
            "mean" => Ok(CellKind::Mean),
            other => Err(ReportError::Malformed(format!("unknown cell kind {other:?}"))),
        }
    }
}

/// Skill dimension used to bin an athlete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillDim {
    Start,
    Riding,
}

impl SkillDim {
    fn title(self) -> &'static str {
        match self {
            SkillDim::Start => "Start",
            SkillDim::Riding => "Riding",
        }
    }
}

/// Tercile bins (1 = slowest, 3 = fastest) of one athlete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillBins {
    pub start: u8,
    pub riding: u8,
}

impl SkillBins {
    pub fn get(&self, dim: SkillDim) -> u8 {
        match dim {
            SkillDim::Start => self.start,
            SkillDim::Riding => self.riding,
        }
    }
}

/// A team run reduced to the bins of its two members and an optional outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinnedRun {
    pub p1: SkillBins,
    pub p2: SkillBins,
    pub value: f64,
}

/// A 3×3 table indexed by (P1 bin − 1, P2 bin − 1). Mean cells without
/// observations are `None`; count cells are always present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTab3x3 {
    pub row_label: String,
    pub col_label: String,
    pub cell_kind: CellKind,
    pub matrix: [[Option<f64>; 3]; 3],
}

impl CrossTab3x3 {
    pub fn row(&self, p1_bin: u8) -> [Option<f64>; 3] {
        self.matrix[usize::from(p1_bin) - 1]
    }

    /// Integer counts, or `None` for a table of means.
    pub fn counts(&self) -> Option<[[u64; 3]; 3]> {
        if self.cell_kind != CellKind::Count {
            return None;
        }
        let mut out = [[0u64; 3]; 3];
        for (o, m) in out.iter_mut().flatten().zip(self.matrix.iter().flatten()) {
            *o = m.unwrap_or(0.0) as u64;
        }
        Some(out)
    }

    pub fn total(&self) -> f64 {
        self.matrix.iter().flatten().flatten().sum()
    }

    /// Long format: one row per cell, empty `value` for a missing mean.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ReportError> {
        let rows: Vec<CrossTabCell> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| CrossTabCell {
                row_label: self.row_label.clone(),
                col_label: self.col_label.clone(),
                cell_kind: self.cell_kind,
                p1_bin: i as u8 + 1,
                p2_bin: j as u8 + 1,
                value: self.matrix[i][j],
            })
            .collect();
        write_csv(&rows, out)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, ReportError> {
        let cells: Vec<CrossTabCell> = read_csv(input)?;
        let first = cells.first().ok_or_else(|| ReportError::Malformed("empty cross-tab".into()))?;
        let mut tab = CrossTab3x3 {
            row_label: first.row_label.clone(),
            col_label: first.col_label.clone(),
            cell_kind: first.cell_kind,
            matrix: [[None; 3]; 3],
        };
        if cells.len() != 9 {
            return Err(ReportError::Malformed(format!("expected 9 cells, found {}", cells.len())));
        }
        for c in cells {
            if !(1..=3).contains(&c.p1_bin) || !(1..=3).contains(&c.p2_bin) {
                return Err(ReportError::Malformed(format!("bin out of range: ({}, {})", c.p1_bin, c.p2_bin)));
            }
            tab.matrix[usize::from(c.p1_bin) - 1][usize::from(c.p2_bin) - 1] = c.value;
        }
        Ok(tab)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CrossTabCell {
    row_label: String,
    col_label: String,
    cell_kind: CellKind,
    p1_bin: u8,
    p2_bin: u8,
    value: Option<f64>,
}

/// Cross-tabulates P1's bin in `p1_dim` against P2's bin in `p2_dim`.
///
/// Panics if a bin lies outside 1..=3.
pub fn crosstab(runs: &[BinnedRun], p1_dim: SkillDim, p2_dim: SkillDim, kind: CellKind) -> CrossTab3x3 {
    let mut count = [[0usize; 3]; 3];
    let mut sum = [[0.0f64; 3]; 3];
    for r in runs {
        let (i, j) = (r.p1.get(p1_dim), r.p2.get(p2_dim));
        assert!((1..=3).contains(&i) && (1..=3).contains(&j), "bins must be in 1..=3, got ({i}, {j})");
        let (i, j) = (usize::from(i) - 1, usize::from(j) - 1);
        count[i][j] += 1;
        sum[i][j] += r.value;
    }
    let mut matrix = [[None; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            matrix[i][j] = match kind {
                CellKind::Count => Some(count[i][j] as f64),
                CellKind::Mean if count[i][j] > 0 => Some(sum[i][j] / count[i][j] as f64),
                CellKind::Mean => None,
            };
        }
    }
    CrossTab3x3 {
        row_label: format!("P1 {}-skill Bin", p1_dim.title()),
        col_label: format!("P2 {}-skill Bin", p2_dim.title()),
        cell_kind: kind,
        matrix,
    }
}

/// Same-dimension pairing table.
pub fn pairing_crosstab(runs: &[BinnedRun], dim: SkillDim, kind: CellKind) -> CrossTab3x3 {
    crosstab(runs, dim, dim, kind)
}

/// P1 start vs P2 riding, and P1 riding vs P2 start.
pub fn cross_skill_crosstab(runs: &[BinnedRun], kind: CellKind) -> (CrossTab3x3, CrossTab3x3) {
    (
        crosstab(runs, SkillDim::Start, SkillDim::Riding, kind),
        crosstab(runs, SkillDim::Riding, SkillDim::Start, kind),
    )
}

/// Ranks athletes 1..=n by ascending skill; ties broken by identifier.
pub fn skill_ranks(skills: &BTreeMap<String, f64>) -> BTreeMap<String, usize> {
    let mut order: Vec<(&String, f64)> = skills.iter().map(|(k, &v)| (k, v)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    order.into_iter().enumerate().map(|(i, (k, _))| (k.clone(), i + 1)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub slice: String,
    pub p1_rank: usize,
    pub p2_rank: usize,
    pub n: usize,
    pub mean: f64,
}

/// Mean normalised efficiency per observed (P1 rank, P2 rank) pair and slice.
///
/// Team identifiers are `p1+p2`. Teams whose members are missing from the
/// rank maps are skipped; unobserved pairs produce no row.
pub fn efficiency_heatmap_cells(
    estimates: &[EfficiencyEstimate<f64>],
    p1_rank: &BTreeMap<String, usize>,
    p2_rank: &BTreeMap<String, usize>,
) -> Vec<HeatmapCell> {
    let mut cells: BTreeMap<(Slice, usize, usize), Vec<f64>> = BTreeMap::new();
    for e in estimates {
        let Some((p1, p2)) = e.team_id.split_once('+') else { continue };
        let (Some(&r1), Some(&r2)) = (p1_rank.get(p1), p2_rank.get(p2)) else { continue };
        cells.entry((e.slice(), r1, r2)).or_default().push(e.a_normalized);
    }
    cells
        .into_iter()
        .map(|((slice, p1_rank, p2_rank), v)| HeatmapCell {
            slice: slice.to_string(),
            p1_rank,
            p2_rank,
            n: v.len(),
            mean: mean(&v).expect("non-empty"),
        })
        .collect()
}

/// `N, Mean, SD, Min, Max` of a named series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveRow {
    pub series: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "Mean")]
    pub mean: f64,
    #[serde(rename = "SD")]
    pub sd: f64,
    #[serde(rename = "Min")]
    pub min: f64,
    #[serde(rename = "Max")]
    pub max: f64,
}

pub fn describe(series: &str, values: &[f64]) -> Option<DescriptiveRow> {
    let (min, max) = min_max(values)?;
    Some(DescriptiveRow {
        series: series.to_string(),
        n: values.len(),
        mean: mean(values)?,
        sd: sample_sd(values)?,
        min,
        max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyRow {
    pub slice: String,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub beta5: f64,
    pub intercept: Option<f64>,
    pub r2: f64,
    pub n: usize,
}

impl From<&PolyFit<f64>> for PolyRow {
    fn from(f: &PolyFit<f64>) -> Self {
        PolyRow {
            slice: f.slice.map(|s| s.to_string()).unwrap_or_else(|| "pooled".into()),
            beta1: f.beta[0],
            beta2: f.beta[1],
            beta3: f.beta[2],
            beta4: f.beta[3],
            beta5: f.beta[4],
            intercept: f.intercept,
            r2: f.r_squared,
            n: f.n_obs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticityRow {
    pub team_id: String,
    pub slice: String,
    pub elasticity_x: f64,
    pub elasticity_y: f64,
    pub ax: f64,
    pub y: f64,
}

impl From<&ElasticityPoint<f64>> for ElasticityRow {
    fn from(p: &ElasticityPoint<f64>) -> Self {
        ElasticityRow {
            team_id: p.team_id.clone(),
            slice: p.slice.map(|s| s.to_string()).unwrap_or_else(|| "pooled".into()),
            elasticity_x: p.elasticity_x,
            elasticity_y: p.elasticity_y,
            ax: p.evaluated_at.ax,
            y: p.evaluated_at.y,
        }
    }
}
