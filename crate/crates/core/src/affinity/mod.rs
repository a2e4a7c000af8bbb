//! Latent team-task efficiency recovered by kernel conditional-CDF estimation
//! and quantile inversion.
//!
//! Production is `H = m(A * X, Y)` with `m` increasing and constant returns to
//! scale, and the latent efficiency `A` independent of the leader input `X`
//! given the assistant input `Y`. For every observation the estimator
//!
//! 1. ranks its output among teams with similar `(X, Y)` using a product
//!    kernel (`tau`, the conditional rank);
//! 2. maps `tau` through the quantile function of the output ratio `H / X`
//!    observed around a common reference point `(x_ref, y_base)`, where
//!    `y_base` is the slice median of `Y` (`a_raw`);
//! 3. rescales `a_raw` affinely so that the slice minimum is 1 and the
//!    reference efficiency at `tau = anchor_tau` is 100 (`a_normalized`).
//!
//! Slices are (task, attempt) pairs and are estimated independently.

mod cdf;
mod kernel;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::stats::{mean, min_max, sample_sd};

pub use cdf::{
    conditional_rank, conditional_rank_in, reference_quantile, Indicator, ReferenceDistribution, ResolvedKernel,
    MIN_SLICE_SIZE,
};
pub use kernel::{silverman_bandwidth, KernelKind, WEIGHT_CUTOFF};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AffinityError {
    #[error("total kernel weight {total_weight:e} is below the support cutoff")]
    InsufficientSupport { total_weight: f64 },
    #[error("no observations for slice {0}")]
    EmptyTaskSlice(Slice),
    #[error("slice has {n} observations, at least {min} required")]
    InsufficientData { n: usize, min: usize },
    #[error("invalid kernel config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Start,
    Riding,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Start, Task::Riding];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Start => "start",
            Task::Riding => "riding",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "start" => Ok(Task::Start),
            "riding" => Ok(Task::Riding),
            _ => Err(format!("unknown task `{s}`")),
        }
    }
}

/// A (task, attempt) estimation slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slice {
    pub task: Task,
    pub attempt: u8,
}

impl Slice {
    pub fn new(task: Task, attempt: u8) -> Self {
        Slice { task, attempt }
    }

    /// Row label in the efficiency summary table, e.g. `Start-phase (1st attempt)`.
    pub fn label(&self) -> String {
        let phase = match self.task {
            Task::Start => "Start",
            Task::Riding => "Riding",
        };
        let ordinal = match self.attempt {
            1 => "1st".to_string(),
            2 => "2nd".to_string(),
            3 => "3rd".to_string(),
            n => format!("{n}th"),
        };
        format!("{phase}-phase ({ordinal} attempt)")
    }
}

impl fmt::Display for Slice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.task, self.attempt)
    }
}

/// One team's inputs and output for one task in one attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamTaskObservation<T> {
    pub team_id: String,
    pub event_id: String,
    pub task: Task,
    pub attempt: u8,
    /// Leader (driver) skill, positive.
    pub x_input: T,
    /// Assistant (brakeman) skill, positive.
    pub y_input: T,
    /// Team output, positive.
    pub h_output: T,
}

impl<T> TeamTaskObservation<T> {
    pub fn slice(&self) -> Slice {
        Slice::new(self.task, self.attempt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum BandwidthRule<T> {
    /// `1.06 * sd * n^(-1/5)` per input, computed within each slice.
    #[default]
    Silverman,
    Manual { x: T, y: T },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline<T> {
    /// Slice median of the assistant input.
    #[default]
    Median,
    Explicit(T),
}

/// Where the reference distribution used for inversion is centred in `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceX {
    /// One reference point per slice at the median leader input, so `a_raw`
    /// is a single increasing function of `tau` within the slice.
    #[default]
    SliceMedian,
    /// Centre at each observation's own leader input.
    Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig<T> {
    pub kernel: KernelKind,
    pub bandwidth: BandwidthRule<T>,
    pub quantile_grid_size: usize,
    pub baseline_y: Baseline<T>,
    pub indicator: Indicator,
    pub leave_one_out: bool,
    pub reference_x: ReferenceX,
    /// Efficiency quantile of the normalisation anchor.
    pub anchor_tau: T,
}

pub const DEFAULT_GRID_SIZE: usize = 256;
pub const MIN_GRID_SIZE: usize = 64;

impl<T: Scalar> Default for KernelConfig<T> {
    fn default() -> Self {
        KernelConfig {
            kernel: KernelKind::Gaussian,
            bandwidth: BandwidthRule::Silverman,
            quantile_grid_size: DEFAULT_GRID_SIZE,
            baseline_y: Baseline::Median,
            indicator: Indicator::LessOrEqual,
            leave_one_out: false,
            reference_x: ReferenceX::SliceMedian,
            anchor_tau: T::lit(0.5),
        }
    }
}

impl<T: Scalar> KernelConfig<T> {
    pub fn validate(&self) -> Result<(), AffinityError> {
        if self.quantile_grid_size < MIN_GRID_SIZE {
            return Err(AffinityError::InvalidConfig(format!(
                "quantile_grid_size {} below {MIN_GRID_SIZE}",
                self.quantile_grid_size
            )));
        }
        if let BandwidthRule::Manual { x, y } = self.bandwidth {
            if !(x > T::zero() && y > T::zero()) {
                return Err(AffinityError::InvalidConfig("manual bandwidths must be positive".into()));
            }
        }
        if !(self.anchor_tau >= T::zero() && self.anchor_tau <= T::one()) {
            return Err(AffinityError::InvalidConfig("anchor_tau outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyEstimate<T> {
    pub team_id: String,
    pub event_id: String,
    pub task: Task,
    pub attempt: u8,
    /// Conditional rank of the team's output.
    pub tau: T,
    pub a_raw: T,
    /// Slice minimum is 1, the reference anchor is 100.
    pub a_normalized: T,
}

impl<T> EfficiencyEstimate<T> {
    pub fn slice(&self) -> Slice {
        Slice::new(self.task, self.attempt)
    }
}

/// Affine map applied to one slice's raw efficiencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceScale<T> {
    pub slice: Slice,
    pub min_raw: T,
    pub anchor_raw: T,
    pub slope: T,
    /// Set when the anchor does not lie above the minimum; unit slope is used.
    pub degenerate: bool,
}

impl<T: Scalar> SliceScale<T> {
    pub fn apply(&self, a_raw: T) -> T {
        T::one() + (a_raw - self.min_raw) * self.slope
    }
}

/// Fills `a_normalized` per slice: minimum -> 1, anchor -> 100.
///
/// `anchors` holds the raw anchor efficiency of each slice. A slice without an
/// anchor, or whose anchor does not exceed its minimum, gets unit slope and is
/// flagged degenerate.
pub fn normalize_efficiency<T: Scalar>(
    estimates: &mut [EfficiencyEstimate<T>],
    anchors: &BTreeMap<Slice, T>,
) -> Vec<SliceScale<T>> {
    let mut by_slice: BTreeMap<Slice, Vec<usize>> = BTreeMap::new();
    for (i, e) in estimates.iter().enumerate() {
        by_slice.entry(e.slice()).or_default().push(i);
    }
    let mut scales = Vec::with_capacity(by_slice.len());
    for (slice, idx) in by_slice {
        let raw: Vec<T> = idx.iter().map(|&i| estimates[i].a_raw).collect();
        let (min_raw, _) = min_max(&raw).expect("non-empty slice");
        let anchor_raw = anchors.get(&slice).copied().unwrap_or(min_raw);
        let span = anchor_raw - min_raw;
        let degenerate = !(span > T::zero());
        let slope = if degenerate { T::one() } else { T::lit(99.0) / span };
        let scale = SliceScale { slice, min_raw, anchor_raw, slope, degenerate };
        for &i in &idx {
            estimates[i].a_normalized = scale.apply(estimates[i].a_raw);
        }
        scales.push(scale);
    }
    scales
}

/// Per-slice diagnostics from a recovery run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport<T> {
    pub slice: Slice,
    pub n: usize,
    pub kernel: ResolvedKernel<T>,
    pub reference_x: T,
    pub scale: SliceScale<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovery<T> {
    /// Aligned with the input; `None` where the observation's slice failed.
    pub estimates: Vec<Option<EfficiencyEstimate<T>>>,
    pub slices: Vec<SliceReport<T>>,
    pub failures: Vec<(Slice, AffinityError)>,
}

impl<T: Scalar> Recovery<T> {
    /// All estimates, or the first slice failure.
    pub fn complete(self) -> Result<Vec<EfficiencyEstimate<T>>, AffinityError> {
        if let Some((_, e)) = self.failures.into_iter().next() {
            return Err(e);
        }
        Ok(self.estimates.into_iter().map(|e| e.expect("no failures")).collect())
    }
}

struct SliceEstimate<T> {
    rows: Vec<usize>,
    estimates: Vec<EfficiencyEstimate<T>>,
    report: SliceReport<T>,
}

fn estimate_slice<T: Scalar>(
    slice: Slice,
    rows: Vec<usize>,
    dataset: &[TeamTaskObservation<T>],
    cfg: &KernelConfig<T>,
) -> Result<SliceEstimate<T>, AffinityError> {
    let obs: Vec<TeamTaskObservation<T>> = rows.iter().map(|&i| dataset[i].clone()).collect();
    let kernel = ResolvedKernel::resolve(&obs, cfg)?;
    let reference_x = kernel.median_x;
    let shared = ReferenceDistribution::build(&obs, &kernel, reference_x, kernel.baseline_y, cfg.quantile_grid_size)?;

    let per_obs: Result<Vec<(T, T)>, AffinityError> = (0..obs.len())
        .into_par_iter()
        .map(|i| {
            let o = &obs[i];
            let exclude = cfg.leave_one_out.then_some(i);
            let tau = conditional_rank_in(o.h_output, o.x_input, o.y_input, &obs, &kernel, exclude)?;
            let a_raw = match cfg.reference_x {
                ReferenceX::SliceMedian => shared.quantile(tau),
                ReferenceX::Observation => {
                    ReferenceDistribution::build(&obs, &kernel, o.x_input, kernel.baseline_y, cfg.quantile_grid_size)?
                        .quantile(tau)
                }
            };
            Ok((tau, a_raw))
        })
        .collect();

    let mut estimates: Vec<EfficiencyEstimate<T>> = obs
        .iter()
        .zip(per_obs?)
        .map(|(o, (tau, a_raw))| EfficiencyEstimate {
            team_id: o.team_id.clone(),
            event_id: o.event_id.clone(),
            task: o.task,
            attempt: o.attempt,
            tau,
            a_raw,
            a_normalized: T::nan(),
        })
        .collect();
    let anchor = shared.quantile(cfg.anchor_tau);
    let scale = normalize_efficiency(&mut estimates, &BTreeMap::from([(slice, anchor)]))
        .pop()
        .expect("one slice");
    let report = SliceReport { slice, n: obs.len(), kernel, reference_x, scale };
    Ok(SliceEstimate { rows, estimates, report })
}

/// Recovers efficiencies for every observation, slice by slice.
///
/// A failing slice is reported in `failures` and leaves its rows `None`;
/// other slices are unaffected.
pub fn recover_efficiency<T: Scalar>(dataset: &[TeamTaskObservation<T>], cfg: &KernelConfig<T>) -> Recovery<T> {
    let mut groups: BTreeMap<Slice, Vec<usize>> = BTreeMap::new();
    for (i, o) in dataset.iter().enumerate() {
        groups.entry(o.slice()).or_default().push(i);
    }
    let mut out = Recovery { estimates: vec![None; dataset.len()], slices: Vec::new(), failures: Vec::new() };
    if let Err(e) = cfg.validate() {
        out.failures.extend(groups.keys().map(|&s| (s, e.clone())));
        return out;
    }
    for (slice, rows) in groups {
        match estimate_slice(slice, rows, dataset, cfg) {
            Ok(est) => {
                for (row, e) in est.rows.into_iter().zip(est.estimates) {
                    out.estimates[row] = Some(e);
                }
                out.slices.push(est.report);
            }
            Err(e) => {
                log::warn!("efficiency recovery failed for slice {slice}: {e}");
                out.failures.push((slice, e));
            }
        }
    }
    out
}

/// One row of the efficiency summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow<T> {
    pub slice: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "Mean")]
    pub mean: T,
    #[serde(rename = "SD")]
    pub sd: T,
    #[serde(rename = "Min")]
    pub min: T,
    #[serde(rename = "Max")]
    pub max: T,
}

/// Moments of team-level mean normalised efficiency per slice.
///
/// Each team's estimates within a slice are averaged first; `N` counts
/// unique teams and `SD` uses the `n - 1` denominator.
pub fn summarize_efficiency<T: Scalar>(estimates: &[EfficiencyEstimate<T>]) -> Vec<SummaryRow<T>> {
    let mut by_slice: BTreeMap<Slice, BTreeMap<&str, Vec<T>>> = BTreeMap::new();
    for e in estimates {
        by_slice.entry(e.slice()).or_default().entry(e.team_id.as_str()).or_default().push(e.a_normalized);
    }
    by_slice
        .into_iter()
        .map(|(slice, teams)| {
            let team_means: Vec<T> = teams.values().map(|v| mean(v).expect("non-empty")).collect();
            let (min, max) = min_max(&team_means).expect("non-empty");
            SummaryRow {
                slice: slice.label(),
                n: team_means.len(),
                mean: mean(&team_means).expect("non-empty"),
                sd: sample_sd(&team_means).expect("non-empty"),
                min,
                max,
            }
        })
        .collect()
}
