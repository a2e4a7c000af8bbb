//! Additive multi-way fixed-effects regression solved by alternating projections.
//!
//! The model is `y = intercept + sum_f effect_f[level_f(row)] + e`. Each sweep
//! replaces one factor's effects by the level means of the partial residual,
//! which is block Gauss-Seidel on the normal equations. Effects are re-centred
//! to an observation-weighted mean of zero after every sweep, with the mean
//! moved into the intercept, so the iterates stay on the normalised solution
//! set.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::RunRecord;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PanelError {
    #[error("fixed-effects design has no rows")]
    EmptyInput,
    #[error("invalid fixed-effects spec: {0}")]
    InvalidSpec(String),
    #[error("row {row}: expected {expected} factor levels, found {found}")]
    LevelCountMismatch { row: usize, expected: usize, found: usize },
    #[error("row {0}: outcome is not finite")]
    NonFinite(usize),
    #[error("alternating projections did not converge after {iterations} sweeps (last change {last_change:e})")]
    NotConverged { iterations: usize, last_change: f64 },
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("fit has no `{0}` factor")]
    MissingFactor(Factor),
    #[error("i/o: {0}")]
    Io(String),
}

/// Timed phase of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Start,
    Riding,
    Finish,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Start, Outcome::Riding, Outcome::Finish];

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Start => "start",
            Outcome::Riding => "riding",
            Outcome::Finish => "finish",
        }
    }

    pub fn of(self, run: &RunRecord) -> f64 {
        match self {
            Outcome::Start => run.start_time,
            Outcome::Riding => run.riding_time,
            Outcome::Finish => run.finish_time,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Outcome {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "start" => Ok(Outcome::Start),
            "riding" => Ok(Outcome::Riding),
            "finish" => Ok(Outcome::Finish),
            _ => Err(format!("unknown outcome `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Athlete,
    Event,
    StartingOrder,
}

impl Factor {
    pub fn as_str(self) -> &'static str {
        match self {
            Factor::Athlete => "athlete",
            Factor::Event => "event",
            Factor::StartingOrder => "starting_order",
        }
    }

    /// Level of this factor for a run. Athlete is the driver / solo athlete.
    pub fn level_of(self, run: &RunRecord) -> String {
        match self {
            Factor::Athlete => run.athlete1_id.clone(),
            Factor::Event => run.event_id.clone(),
            Factor::StartingOrder => run.starting_number.to_string(),
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Factor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "athlete" => Ok(Factor::Athlete),
            "event" => Ok(Factor::Event),
            "starting_order" | "order" => Ok(Factor::StartingOrder),
            _ => Err(format!("unknown factor `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// The first-seen level of each factor is fixed at zero.
    FirstLevelZero,
    /// Observation-weighted mean of each factor's effects is zero.
    #[default]
    MeanZero,
}

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct FixedEffectSpec<T> {
    pub outcome: Outcome,
    pub factors: Vec<Factor>,
    pub reference_policy: ReferencePolicy,
    pub tolerance: T,
    pub max_iterations: usize,
}

impl<T: Scalar> FixedEffectSpec<T> {
    pub fn new(outcome: Outcome, factors: Vec<Factor>) -> Self {
        FixedEffectSpec {
            outcome,
            factors,
            reference_policy: ReferencePolicy::MeanZero,
            tolerance: T::lit(DEFAULT_TOLERANCE),
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn validate(&self) -> Result<(), PanelError> {
        if self.factors.is_empty() {
            return Err(PanelError::InvalidSpec("no factors".into()));
        }
        for (i, f) in self.factors.iter().enumerate() {
            if self.factors[..i].contains(f) {
                return Err(PanelError::InvalidSpec(format!("duplicate factor `{f}`")));
            }
        }
        if !(self.tolerance > T::zero()) {
            return Err(PanelError::InvalidSpec("tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(PanelError::InvalidSpec("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// One regression row: outcome and one level label per factor of the spec.
#[derive(Debug, Clone, PartialEq)]
pub struct FeObservation<T> {
    pub outcome: T,
    pub levels: Vec<String>,
}

/// Builds regression rows from runs for the given outcome and factors.
pub fn design_from_runs<T: Scalar>(runs: &[RunRecord], outcome: Outcome, factors: &[Factor]) -> Vec<FeObservation<T>> {
    runs.iter()
        .map(|r| FeObservation {
            outcome: T::lit(outcome.of(r)),
            levels: factors.iter().map(|f| f.level_of(r)).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorEffects<T> {
    pub factor: Factor,
    /// level -> effect, in order of first appearance.
    pub effects: IndexMap<String, T>,
    /// level -> number of rows carrying the level.
    pub counts: IndexMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedEffectFit<T> {
    pub outcome: Outcome,
    pub factors: Vec<FactorEffects<T>>,
    pub intercept: T,
    pub residuals: Vec<T>,
    pub n_obs: usize,
    pub iterations_used: usize,
    pub converged: bool,
    pub last_change: T,
}

impl<T: Scalar> FixedEffectFit<T> {
    pub fn factor(&self, factor: Factor) -> Option<&FactorEffects<T>> {
        self.factors.iter().find(|f| f.factor == factor)
    }

    pub fn effect(&self, factor: Factor, level: &str) -> Option<T> {
        self.factor(factor)?.effects.get(level).copied()
    }

    /// Returns the fit if converged, `NotConverged` otherwise.
    pub fn require_converged(self) -> Result<Self, PanelError> {
        if self.converged {
            Ok(self)
        } else {
            Err(PanelError::NotConverged {
                iterations: self.iterations_used,
                last_change: self.last_change.to_f64_lossy(),
            })
        }
    }

    /// Writes `factor,level,estimate` rows; the intercept is the first row.
    pub fn write_coefficients_csv<W: Write>(&self, out: W) -> Result<(), PanelError> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| PanelError::Io(e.to_string());
        w.write_record(["factor", "level", "estimate"]).map_err(io)?;
        w.write_record(["intercept", "", &self.intercept.to_string()]).map_err(io)?;
        for fe in &self.factors {
            for (level, v) in &fe.effects {
                w.write_record([fe.factor.as_str(), level, &v.to_string()]).map_err(io)?;
            }
        }
        w.flush().map_err(|e| PanelError::Io(e.to_string()))
    }
}

/// Integer-coded design: per factor, the level index of each row.
struct CodedDesign {
    codes: Vec<Vec<usize>>,
    counts: Vec<Vec<usize>>,
    labels: Vec<Vec<String>>,
}

fn encode<T: Scalar>(rows: &[FeObservation<T>], n_factors: usize) -> Result<CodedDesign, PanelError> {
    let mut maps: Vec<IndexMap<String, usize>> = vec![IndexMap::new(); n_factors];
    let mut codes = vec![Vec::with_capacity(rows.len()); n_factors];
    for (i, row) in rows.iter().enumerate() {
        if row.levels.len() != n_factors {
            return Err(PanelError::LevelCountMismatch { row: i, expected: n_factors, found: row.levels.len() });
        }
        if !row.outcome.is_finite() {
            return Err(PanelError::NonFinite(i));
        }
        for (f, level) in row.levels.iter().enumerate() {
            let next = maps[f].len();
            let code = *maps[f].entry(level.clone()).or_insert(next);
            codes[f].push(code);
        }
    }
    let counts = codes
        .iter()
        .zip(&maps)
        .map(|(c, m)| {
            let mut k = vec![0usize; m.len()];
            for &l in c {
                k[l] += 1;
            }
            k
        })
        .collect();
    let labels = maps.into_iter().map(|m| m.into_keys().collect()).collect();
    Ok(CodedDesign { codes, counts, labels })
}

struct SweepState<T> {
    intercept: T,
    effects: Vec<Vec<T>>,
    resid: Vec<T>,
}

struct SweepOutcome<T> {
    iterations: usize,
    converged: bool,
    last_change: T,
}

fn recompute_residuals<T: Scalar>(y: &[T], design: &CodedDesign, state: &mut SweepState<T>) {
    for (i, r) in state.resid.iter_mut().enumerate() {
        let fitted = design
            .codes
            .iter()
            .zip(&state.effects)
            .fold(state.intercept, |acc, (c, e)| acc + e[c[i]]);
        *r = y[i] - fitted;
    }
}

fn run_sweeps<T: Scalar>(
    y: &[T],
    design: &CodedDesign,
    state: &mut SweepState<T>,
    tolerance: T,
    max_iterations: usize,
) -> SweepOutcome<T> {
    let n = T::from_usize_lossy(y.len());
    let mut last_change = T::infinity();
    for iter in 1..=max_iterations {
        let prev_effects = state.effects.clone();
        let prev_intercept = state.intercept;
        for (f, codes) in design.codes.iter().enumerate() {
            let effects = &mut state.effects[f];
            let mut sums = vec![T::zero(); effects.len()];
            for (i, &l) in codes.iter().enumerate() {
                sums[l] = sums[l] + state.resid[i] + effects[l];
            }
            let mut delta = vec![T::zero(); effects.len()];
            for l in 0..effects.len() {
                let updated = sums[l] / T::from_usize_lossy(design.counts[f][l]);
                delta[l] = updated - effects[l];
                effects[l] = updated;
            }
            for (i, &l) in codes.iter().enumerate() {
                state.resid[i] = state.resid[i] - delta[l];
            }
        }
        for (f, effects) in state.effects.iter_mut().enumerate() {
            let weighted: T = effects
                .iter()
                .zip(&design.counts[f])
                .map(|(&e, &c)| e * T::from_usize_lossy(c))
                .sum();
            let m = weighted / n;
            for e in effects.iter_mut() {
                *e = *e - m;
            }
            state.intercept = state.intercept + m;
        }
        // Incremental residual updates drift; refresh them exactly.
        recompute_residuals(y, design, state);

        let mut change = (state.intercept - prev_intercept).abs();
        for (cur, prev) in state.effects.iter().zip(&prev_effects) {
            for (&a, &b) in cur.iter().zip(prev) {
                change = change.max((a - b).abs());
            }
        }
        last_change = change;
        if change < tolerance {
            return SweepOutcome { iterations: iter, converged: true, last_change };
        }
    }
    SweepOutcome { iterations: max_iterations, converged: false, last_change }
}

/// Checks that the only zero-residual solutions of the homogeneous system are
/// the normalisation directions: sweeping a zero outcome from a non-trivial
/// centred start must drive every effect to zero.
fn null_space_probe<T: Scalar>(design: &CodedDesign, n_obs: usize, tolerance: T, max_iterations: usize) -> Option<String> {
    let y = vec![T::zero(); n_obs];
    let mut k = 0usize;
    let effects: Vec<Vec<T>> = design
        .counts
        .iter()
        .map(|c| {
            c.iter()
                .map(|_| {
                    k += 1;
                    // Weyl sequence on [-0.5, 0.5).
                    let u = (k as f64 * 0.618_033_988_749_894_9).fract() - 0.5;
                    T::lit(u)
                })
                .collect()
        })
        .collect();
    let mut state = SweepState { intercept: T::zero(), effects, resid: vec![T::zero(); n_obs] };
    recompute_residuals(&y, design, &mut state);
    run_sweeps(&y, design, &mut state, tolerance, max_iterations);
    let max_effect = state
        .effects
        .iter()
        .flatten()
        .fold(T::zero(), |acc, &e| acc.max(e.abs()));
    if max_effect > T::lit(1e-6) {
        Some(format!(
            "factor levels are aliased: a non-zero effect combination ({:e}) fits a zero outcome exactly",
            max_effect.to_f64_lossy()
        ))
    } else {
        None
    }
}

/// Least-squares fit of the additive fixed-effects model.
///
/// A fit that exhausts `max_iterations` is returned with `converged = false`;
/// call [`FixedEffectFit::require_converged`] to turn that into an error.
pub fn estimate_fixed_effects<T: Scalar>(
    rows: &[FeObservation<T>],
    spec: &FixedEffectSpec<T>,
) -> Result<FixedEffectFit<T>, PanelError> {
    spec.validate()?;
    if rows.is_empty() {
        return Err(PanelError::EmptyInput);
    }
    let k = spec.factors.len();
    let design = encode(rows, k)?;
    let n_obs = rows.len();
    let n_params = 1 + design.counts.iter().map(|c| c.len() - 1).sum::<usize>();
    if n_obs <= n_params {
        return Err(PanelError::DegenerateDesign(format!(
            "{n_obs} rows for {n_params} free parameters leaves no residual degrees of freedom"
        )));
    }
    if k >= 2 {
        if let Some(msg) = null_space_probe(&design, n_obs, spec.tolerance, spec.max_iterations) {
            return Err(PanelError::DegenerateDesign(msg));
        }
    }

    let y: Vec<T> = rows.iter().map(|r| r.outcome).collect();
    let intercept = y.iter().copied().sum::<T>() / T::from_usize_lossy(n_obs);
    let mut state = SweepState {
        intercept,
        effects: design.counts.iter().map(|c| vec![T::zero(); c.len()]).collect(),
        resid: y.iter().map(|&v| v - intercept).collect(),
    };
    let outcome = run_sweeps(&y, &design, &mut state, spec.tolerance, spec.max_iterations);

    if spec.reference_policy == ReferencePolicy::FirstLevelZero {
        for effects in state.effects.iter_mut() {
            let base = effects[0];
            for e in effects.iter_mut() {
                *e = *e - base;
            }
            state.intercept = state.intercept + base;
        }
        recompute_residuals(&y, &design, &mut state);
    }

    let factors = spec
        .factors
        .iter()
        .enumerate()
        .map(|(f, &factor)| FactorEffects {
            factor,
            effects: design.labels[f].iter().cloned().zip(state.effects[f].iter().copied()).collect(),
            counts: design.labels[f].iter().cloned().zip(design.counts[f].iter().copied()).collect(),
        })
        .collect();

    Ok(FixedEffectFit {
        outcome: spec.outcome,
        factors,
        intercept: state.intercept,
        residuals: state.resid,
        n_obs,
        iterations_used: outcome.iterations,
        converged: outcome.converged,
        last_change: outcome.last_change,
    })
}

/// Per-athlete skill measure along one timed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillProfile<T> {
    pub athlete_id: String,
    pub dimension: Outcome,
    /// Athlete fixed effect in seconds; lower is faster.
    pub raw_fe: T,
    /// Positive, higher-is-better skill; filled by the transform stage.
    pub transformed_skill: Option<T>,
    pub n_runs: usize,
}

/// Extracts athlete effects as skill profiles, dropping athletes with too few runs.
///
/// Returns the profiles (in the fit's level order) and one log line per
/// dropped athlete.
pub fn athlete_skill<T: Scalar>(
    fit: &FixedEffectFit<T>,
    run_counts: &BTreeMap<String, usize>,
) -> Result<(Vec<SkillProfile<T>>, Vec<String>), PanelError> {
    if !fit.converged {
        return Err(PanelError::NotConverged {
            iterations: fit.iterations_used,
            last_change: fit.last_change.to_f64_lossy(),
        });
    }
    let Some(athletes) = fit.factor(Factor::Athlete) else {
        if fit.n_obs == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        return Err(PanelError::MissingFactor(Factor::Athlete));
    };
    let mut profiles = Vec::new();
    let mut log = Vec::new();
    for (athlete, &raw_fe) in &athletes.effects {
        let n_runs = run_counts.get(athlete).copied().unwrap_or(0);
        if n_runs < crate::ingest::MIN_SOLO_RUNS {
            log.push(format!("{athlete}\t{}\tdropped: {n_runs} solo runs", fit.outcome));
            continue;
        }
        profiles.push(SkillProfile {
            athlete_id: athlete.clone(),
            dimension: fit.outcome,
            raw_fe,
            transformed_skill: None,
            n_runs,
        });
    }
    Ok((profiles, log))
}

/// One team run for residualisation.
#[derive(Debug, Clone, PartialEq)]
pub struct TeamFeRow<T> {
    pub outcome: T,
    pub event: String,
    pub starting_order: String,
}

/// Residuals of the event + starting-order regression, in input order.
///
/// No athlete factor enters: team outcomes must keep their skill variation.
pub fn residualize_team<T: Scalar>(team_rows: &[TeamFeRow<T>]) -> Result<Vec<T>, PanelError> {
    residualize_team_with(team_rows, T::lit(DEFAULT_TOLERANCE), DEFAULT_MAX_ITERATIONS)
}

pub fn residualize_team_with<T: Scalar>(
    team_rows: &[TeamFeRow<T>],
    tolerance: T,
    max_iterations: usize,
) -> Result<Vec<T>, PanelError> {
    let rows: Vec<FeObservation<T>> = team_rows
        .iter()
        .map(|r| FeObservation { outcome: r.outcome, levels: vec![r.event.clone(), r.starting_order.clone()] })
        .collect();
    let mut spec = FixedEffectSpec::new(Outcome::Finish, vec![Factor::Event, Factor::StartingOrder]);
    spec.tolerance = tolerance;
    spec.max_iterations = max_iterations;
    Ok(estimate_fixed_effects(&rows, &spec)?.require_converged()?.residuals)
}

#[derive(Serialize, Deserialize)]
struct ResidualLine {
    row_id: usize,
    residual: f64,
}

/// Residuals as JSON lines aligned to the given row ids.
pub fn write_residuals_jsonl<T: Scalar, W: Write>(row_ids: &[usize], residuals: &[T], mut out: W) -> Result<(), PanelError> {
    for (&row_id, &r) in row_ids.iter().zip(residuals) {
        let line = serde_json::to_string(&ResidualLine { row_id, residual: r.to_f64_lossy() })
            .map_err(|e| PanelError::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| PanelError::Io(e.to_string()))?;
    }
    Ok(())
}
