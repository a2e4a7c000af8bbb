//! End-to-end orchestration with a hashed artifact manifest.
//!
//! Stages run in order: ingest, fe, transform, estimate, elasticity, report.
//! Every artifact lands in the output directory and is listed in
//! `manifest.json` with its SHA-256. A failing stage still leaves the
//! manifest behind, marking the stage as failed and later ones as skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::affinity::{
    recover_efficiency, summarize_efficiency, EfficiencyEstimate, KernelConfig, Slice, SliceReport, Task,
    TeamTaskObservation,
};
use crate::elasticity::{
    elasticity_at, fit_production_polynomial, mean_point, ElasticityPoint, EvaluationPoint, LeaderScaling, PolyFit,
    PolyOptions, PolyPoint,
};
use crate::ingest::{self, ColumnSchema, RunRecord};
use crate::panel::{self, Factor, FixedEffectSpec, Outcome, ReferencePolicy, TeamFeRow};
use crate::report::{self, BinnedRun, CellKind, ElasticityRow, PolyRow, SkillBins, SkillDim};
use crate::stats::mean;
use crate::synth::{self, DgpConfig, SyntheticTruth};
use crate::transform::{positive_shift, tercile_bins, DEFAULT_FLOOR};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Fe,
    Transform,
    Estimate,
    Elasticity,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Ingest, Stage::Fe, Stage::Transform, Stage::Estimate, Stage::Elasticity, Stage::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Fe => "fe",
            Stage::Transform => "transform",
            Stage::Estimate => "estimate",
            Stage::Elasticity => "elasticity",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Config(_) => None,
            PipelineError::Stage { stage, .. } => Some(*stage),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestSection {
    /// Results file; when absent the `synth` section generates the input.
    pub input: Option<PathBuf>,
    pub schema: ColumnSchema,
    pub max_attempts: u32,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection { input: None, schema: ColumnSchema::default(), max_attempts: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeSection {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub reference_policy: ReferencePolicy,
}

impl Default for FeSection {
    fn default() -> Self {
        FeSection {
            tolerance: panel::DEFAULT_TOLERANCE,
            max_iterations: panel::DEFAULT_MAX_ITERATIONS,
            reference_policy: ReferencePolicy::MeanZero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformSection {
    pub floor: f64,
}

impl Default for TransformSection {
    fn default() -> Self {
        TransformSection { floor: DEFAULT_FLOOR }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ElasticitySection {
    pub intercept: bool,
    pub scaling: LeaderScaling,
}

/// The whole run as one JSON document; every section is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub ingest: IngestSection,
    pub synth: DgpConfig,
    pub fe: FeSection,
    pub transform: TransformSection,
    pub kernel: KernelConfig<f64>,
    pub elasticity: ElasticitySection,
    /// Overrides `synth.seed` when set.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |m: String| Err(PipelineError::Config(m));
        if self.ingest.max_attempts == 0 {
            return cfg("ingest.max_attempts must be at least 1".into());
        }
        if !(self.transform.floor > 0.0 && self.transform.floor.is_finite()) {
            return cfg("transform.floor must be positive".into());
        }
        if !(self.fe.tolerance > 0.0) || self.fe.max_iterations == 0 {
            return cfg("fe.tolerance and fe.max_iterations must be positive".into());
        }
        self.kernel.validate().map_err(|e| PipelineError::Config(format!("kernel: {e}")))?;
        if self.ingest.input.is_none() {
            self.dgp().validate().map_err(|e| PipelineError::Config(format!("synth: {e}")))?;
        }
        Ok(())
    }

    pub fn dgp(&self) -> DgpConfig {
        let mut d = self.synth.clone();
        if let Some(seed) = self.seed {
            d.seed = seed;
        }
        d
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Hash of the configuration without the output location.
    fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serialises")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageState {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: Stage,
    pub status: StageState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub stage: Stage,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub complete: bool,
    pub config_sha256: String,
    pub stages: Vec<StageStatus>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    pub fn hashes(&self) -> BTreeMap<&str, &str> {
        self.artifacts.iter().map(|a| (a.name.as_str(), a.sha256.as_str())).collect()
    }
}

/// In-memory results alongside the files on disk.
#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub manifest: Option<Manifest>,
    pub out_dir: PathBuf,
    pub truth: Option<SyntheticTruth>,
    pub team_runs: Vec<RunRecord>,
    pub skills: BTreeMap<String, AthleteSkill>,
    pub observations: Vec<TeamTaskObservation<f64>>,
    /// Residualised (unshifted) outcome of each observation, in seconds.
    pub residuals: Vec<f64>,
    pub estimates: Vec<EfficiencyEstimate<f64>>,
    pub slices: Vec<SliceReport<f64>>,
    pub fits: Vec<PolyFit<f64>>,
    pub elasticities: Vec<ElasticityPoint<f64>>,
}

/// Skill of one linked athlete along both timed dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AthleteSkill {
    pub athlete_id: String,
    pub n_runs: usize,
    pub start_fe: f64,
    pub riding_fe: f64,
    pub start_skill: f64,
    pub riding_skill: f64,
    pub start_bin: u8,
    pub riding_bin: u8,
}

impl AthleteSkill {
    fn skill(&self, task: Task) -> f64 {
        match task {
            Task::Start => self.start_skill,
            Task::Riding => self.riding_skill,
        }
    }

    fn bins(&self) -> SkillBins {
        SkillBins { start: self.start_bin, riding: self.riding_bin }
    }
}

#[derive(Serialize)]
struct ObservationRow<'a> {
    team_id: &'a str,
    event_id: &'a str,
    task: Task,
    attempt: u8,
    x_input: f64,
    y_input: f64,
    h_output: f64,
    residual: f64,
}

#[derive(Serialize)]
struct ElasticityMeanRow {
    slice: String,
    n: usize,
    mean_elasticity_x: f64,
    mean_elasticity_y: f64,
    at_mean_elasticity_x: f64,
    at_mean_elasticity_y: f64,
}

struct Recorder {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
    stages: Vec<StageStatus>,
    config_sha256: String,
}

impl Recorder {
    fn emit(&mut self, stage: Stage, name: &str, bytes: &[u8]) -> Result<(), String> {
        fs::write(self.dir.join(name), bytes).map_err(|e| format!("writing {name}: {e}"))?;
        self.artifacts.push(Artifact {
            name: name.to_string(),
            stage,
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        });
        Ok(())
    }

    fn emit_csv<S: Serialize>(&mut self, stage: Stage, name: &str, rows: &[S]) -> Result<(), String> {
        let mut buf = Vec::new();
        report::write_csv(rows, &mut buf).map_err(|e| format!("{name}: {e}"))?;
        self.emit(stage, name, &buf)
    }

    fn finish(&mut self, last: Stage) -> Result<Manifest, String> {
        for stage in Stage::ALL {
            if !self.stages.iter().any(|s| s.stage == stage) {
                self.stages.push(StageStatus { stage, status: StageState::Skipped, error: None, warnings: Vec::new() });
            }
        }
        let complete = self.stages.iter().filter(|s| s.stage <= last).all(|s| s.status == StageState::Ok);
        let manifest = Manifest {
            complete,
            config_sha256: self.config_sha256.clone(),
            stages: self.stages.clone(),
            artifacts: self.artifacts.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(self.dir.join(MANIFEST_FILE), text + "\n").map_err(|e| format!("writing manifest: {e}"))?;
        Ok(manifest)
    }
}

/// Runs every stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    run_pipeline_until(cfg, Stage::Report)
}

/// Runs stages up to and including `last`.
pub fn run_pipeline_until(cfg: &PipelineConfig, last: Stage) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).map_err(|e| PipelineError::Config(format!("{}: {e}", dir.display())))?;
    let mut rec = Recorder { dir: dir.clone(), artifacts: Vec::new(), stages: Vec::new(), config_sha256: cfg.fingerprint() };
    let mut out = PipelineOutput { out_dir: dir, ..PipelineOutput::default() };

    let mut ctx = Context::default();
    for stage in Stage::ALL.into_iter().filter(|&s| s <= last) {
        log::info!("stage {stage}");
        let result = match stage {
            Stage::Ingest => ingest_stage(cfg, &mut rec, &mut ctx, &mut out),
            Stage::Fe => fe_stage(cfg, &mut rec, &mut ctx),
            Stage::Transform => transform_stage(cfg, &mut rec, &ctx, &mut out),
            Stage::Estimate => estimate_stage(cfg, &mut rec, &mut out),
            Stage::Elasticity => elasticity_stage(cfg, &mut rec, &mut out),
            Stage::Report => report_stage(&mut rec, &out),
        };
        match result {
            Ok(warnings) => {
                for w in &warnings {
                    log::warn!("{stage}: {w}");
                }
                rec.stages.push(StageStatus { stage, status: StageState::Ok, error: None, warnings });
            }
            Err(message) => {
                rec.stages.push(StageStatus { stage, status: StageState::Failed, error: Some(message.clone()), warnings: Vec::new() });
                if let Err(e) = rec.finish(last) {
                    log::error!("{e}");
                }
                return Err(PipelineError::Stage { stage, message });
            }
        }
    }
    out.manifest = Some(rec.finish(last).map_err(|message| PipelineError::Stage { stage: last, message })?);
    Ok(out)
}

#[derive(Default)]
struct Context {
    mono: Vec<RunRecord>,
    solo_counts: BTreeMap<String, usize>,
    fe_fits: Vec<(Outcome, panel::FixedEffectFit<f64>)>,
}

type StageResult = Result<Vec<String>, String>;

fn ingest_stage(cfg: &PipelineConfig, rec: &mut Recorder, ctx: &mut Context, out: &mut PipelineOutput) -> StageResult {
    let s = Stage::Ingest;
    let records = match &cfg.ingest.input {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let records = ingest::parse_results(file, &cfg.ingest.schema).map_err(|e| format!("{}: {e}", path.display()))?;
            records
        }
        None => {
            let data = synth::generate(&cfg.dgp()).map_err(|e| e.to_string())?;
            let mut buf = Vec::new();
            ingest::write_results_csv(&data.runs, &mut buf).map_err(|e| e.to_string())?;
            rec.emit(s, "input_results.csv", &buf)?;
            let mut truth = Vec::new();
            data.truth.write_jsonl(&mut truth).map_err(|e| e.to_string())?;
            rec.emit(s, "truth.jsonl", &truth)?;
            out.truth = Some(data.truth);
            ingest::parse_results(buf.as_slice(), &ColumnSchema::default()).map_err(|e| e.to_string())?
        }
    };
    let (records, mut exclusions) = ingest::drop_duplicates(records);
    let records = ingest::truncate_attempts(&records, cfg.ingest.max_attempts);
    let (mono, team) = ingest::split_by_discipline(&records);
    let linked = ingest::link_athletes(&mono, &team).map_err(|e| e.to_string())?;
    exclusions.extend(linked.exclusions.iter().cloned());

    let mut buf = Vec::new();
    ingest::write_jsonl(&records, &mut buf).map_err(|e| e.to_string())?;
    rec.emit(s, "runs.jsonl", &buf)?;
    let mut buf = Vec::new();
    ingest::write_results_csv(&linked.team_runs, &mut buf).map_err(|e| e.to_string())?;
    rec.emit(s, "team_runs.csv", &buf)?;
    let mut buf = Vec::new();
    ingest::write_exclusions(&exclusions, &mut buf).map_err(|e| e.to_string())?;
    rec.emit(s, "exclusions.tsv", &buf)?;

    let warnings = vec![format!(
        "{} monobob runs, {} linked team runs, {} exclusions",
        mono.len(),
        linked.team_runs.len(),
        exclusions.len()
    )];
    ctx.mono = mono;
    ctx.solo_counts = linked.solo_run_counts;
    out.team_runs = linked.team_runs;
    Ok(warnings)
}

fn fe_stage(cfg: &PipelineConfig, rec: &mut Recorder, ctx: &mut Context) -> StageResult {
    for (outcome, name) in [(Outcome::Start, "fe_start.csv"), (Outcome::Riding, "fe_riding.csv")] {
        let mut spec = FixedEffectSpec::new(outcome, vec![Factor::Athlete, Factor::Event, Factor::StartingOrder]);
        spec.tolerance = cfg.fe.tolerance;
        spec.max_iterations = cfg.fe.max_iterations;
        spec.reference_policy = cfg.fe.reference_policy;
        let rows = panel::design_from_runs(&ctx.mono, outcome, &spec.factors);
        let fit = panel::estimate_fixed_effects(&rows, &spec)
            .and_then(|f| f.require_converged())
            .map_err(|e| format!("{outcome}: {e}"))?;
        let mut buf = Vec::new();
        fit.write_coefficients_csv(&mut buf).map_err(|e| e.to_string())?;
        rec.emit(Stage::Fe, name, &buf)?;
        ctx.fe_fits.push((outcome, fit));
    }
    Ok(Vec::new())
}

fn transform_stage(cfg: &PipelineConfig, rec: &mut Recorder, ctx: &Context, out: &mut PipelineOutput) -> StageResult {
    let s = Stage::Transform;
    let mut warnings = Vec::new();
    let floor = cfg.transform.floor;

    // skills of athletes who appear in a linked team run
    let mut per_dim: Vec<Vec<panel::SkillProfile<f64>>> = Vec::new();
    for (_, fit) in &ctx.fe_fits {
        let (profiles, dropped) = panel::athlete_skill(fit, &ctx.solo_counts).map_err(|e| e.to_string())?;
        warnings.extend(dropped);
        per_dim.push(profiles);
    }
    let used: std::collections::BTreeSet<&str> = out
        .team_runs
        .iter()
        .flat_map(|r| std::iter::once(r.athlete1_id.as_str()).chain(r.athlete2_id.as_deref()))
        .collect();
    let shifted: Vec<BTreeMap<String, (f64, f64)>> = per_dim
        .iter()
        .map(|profiles| {
            let kept: Vec<&panel::SkillProfile<f64>> = profiles.iter().filter(|p| used.contains(p.athlete_id.as_str())).collect();
            let raw: Vec<f64> = kept.iter().map(|p| p.raw_fe).collect();
            let series = positive_shift(&raw, floor).map_err(|e| e.to_string())?;
            Ok(kept.iter().zip(series.values).map(|(p, v)| (p.athlete_id.clone(), (p.raw_fe, v))).collect())
        })
        .collect::<Result<_, String>>()?;
    let (start, riding) = (&shifted[0], &shifted[1]);
    let ids: Vec<&String> = start.keys().filter(|k| riding.contains_key(*k)).collect();
    let start_bins = tercile_bins(&ids.iter().map(|k| start[*k].1).collect::<Vec<_>>());
    let riding_bins = tercile_bins(&ids.iter().map(|k| riding[*k].1).collect::<Vec<_>>());
    out.skills = ids
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let skill = AthleteSkill {
                athlete_id: k.clone(),
                n_runs: ctx.solo_counts.get(k).copied().unwrap_or(0),
                start_fe: start[k].0,
                riding_fe: riding[k].0,
                start_skill: start[k].1,
                riding_skill: riding[k].1,
                start_bin: start_bins[i],
                riding_bin: riding_bins[i],
            };
            (k.clone(), skill)
        })
        .collect();
    rec.emit_csv(s, "skills.csv", &out.skills.values().collect::<Vec<_>>())?;

    // residualise and shift each (task, attempt) series of team outcomes
    let runs: Vec<&RunRecord> = out
        .team_runs
        .iter()
        .filter(|r| out.skills.contains_key(&r.athlete1_id) && r.athlete2_id.as_ref().is_some_and(|b| out.skills.contains_key(b)))
        .collect();
    let mut slices: BTreeMap<Slice, Vec<&RunRecord>> = BTreeMap::new();
    for task in [Task::Start, Task::Riding] {
        for r in &runs {
            slices.entry(Slice::new(task, r.attempt_index as u8)).or_default().push(r);
        }
    }
    let mut observations = Vec::new();
    let mut residuals = Vec::new();
    for (slice, members) in slices {
        let outcome = match slice.task {
            Task::Start => Outcome::Start,
            Task::Riding => Outcome::Riding,
        };
        let rows: Vec<TeamFeRow<f64>> = members
            .iter()
            .map(|r| TeamFeRow { outcome: outcome.of(r), event: r.event_id.clone(), starting_order: r.starting_number.to_string() })
            .collect();
        let resid = panel::residualize_team_with(&rows, cfg.fe.tolerance, cfg.fe.max_iterations)
            .map_err(|e| format!("residualising {slice}: {e}"))?;
        let h = positive_shift(&resid, floor).map_err(|e| format!("{slice}: {e}"))?;
        for ((r, &e), &hv) in members.iter().zip(&resid).zip(&h.values) {
            let brakeman = r.athlete2_id.as_ref().expect("two-person run");
            observations.push(TeamTaskObservation {
                team_id: r.team_key(),
                event_id: r.event_id.clone(),
                task: slice.task,
                attempt: slice.attempt,
                x_input: out.skills[&r.athlete1_id].skill(slice.task),
                y_input: out.skills[brakeman].skill(slice.task),
                h_output: hv,
            });
            residuals.push(e);
        }
    }
    let rows: Vec<ObservationRow> = observations
        .iter()
        .zip(&residuals)
        .map(|(o, &residual)| ObservationRow {
            team_id: &o.team_id,
            event_id: &o.event_id,
            task: o.task,
            attempt: o.attempt,
            x_input: o.x_input,
            y_input: o.y_input,
            h_output: o.h_output,
            residual,
        })
        .collect();
    rec.emit_csv(s, "team_observations.csv", &rows)?;

    let mut described = Vec::new();
    let skill_vals = |f: fn(&AthleteSkill) -> f64| out.skills.values().map(f).collect::<Vec<_>>();
    described.extend(report::describe("start_skill", &skill_vals(|a| a.start_skill)));
    described.extend(report::describe("riding_skill", &skill_vals(|a| a.riding_skill)));
    let mut by_slice: BTreeMap<Slice, Vec<f64>> = BTreeMap::new();
    for o in &observations {
        by_slice.entry(o.slice()).or_default().push(o.h_output);
    }
    for (slice, v) in &by_slice {
        described.extend(report::describe(&format!("output {slice}"), v));
    }
    rec.emit_csv(s, "transformed_summary.csv", &described)?;

    out.observations = observations;
    out.residuals = residuals;
    Ok(warnings)
}

fn estimate_stage(cfg: &PipelineConfig, rec: &mut Recorder, out: &mut PipelineOutput) -> StageResult {
    let s = Stage::Estimate;
    let recovery = recover_efficiency(&out.observations, &cfg.kernel);
    let warnings: Vec<String> = recovery.failures.iter().map(|(slice, e)| format!("{slice}: {e}")).collect();
    if recovery.slices.is_empty() {
        return Err(format!("no slice could be estimated: {}", warnings.join("; ")));
    }
    out.estimates = recovery.estimates.into_iter().flatten().collect();
    out.slices = recovery.slices;
    rec.emit_csv(s, "estimates.csv", &out.estimates)?;
    rec.emit_csv(s, "summary.csv", &summarize_efficiency(&out.estimates))?;
    let text = serde_json::to_string_pretty(&out.slices).map_err(|e| e.to_string())?;
    rec.emit(s, "slices.json", text.as_bytes())?;
    Ok(warnings)
}

/// Points `(a_raw * x, y, h)` per slice for the production surface.
pub fn elasticity_points(
    observations: &[TeamTaskObservation<f64>],
    estimates: &[EfficiencyEstimate<f64>],
) -> BTreeMap<Slice, Vec<(String, EvaluationPoint<f64>)>> {
    let key = |team: &str, event: &str, slice: Slice| (team.to_string(), event.to_string(), slice);
    let a: BTreeMap<_, f64> = estimates.iter().map(|e| (key(&e.team_id, &e.event_id, e.slice()), e.a_raw)).collect();
    let mut out: BTreeMap<Slice, Vec<(String, EvaluationPoint<f64>)>> = BTreeMap::new();
    for o in observations {
        if let Some(&a_raw) = a.get(&key(&o.team_id, &o.event_id, o.slice())) {
            let point = EvaluationPoint { ax: a_raw * o.x_input, y: o.y_input, x: o.x_input, h: o.h_output };
            out.entry(o.slice()).or_default().push((o.team_id.clone(), point));
        }
    }
    out
}

fn elasticity_stage(cfg: &PipelineConfig, rec: &mut Recorder, out: &mut PipelineOutput) -> StageResult {
    let s = Stage::Elasticity;
    let mut warnings = Vec::new();
    let mut fits = Vec::new();
    let mut points_out = Vec::new();
    let mut means = Vec::new();
    let options = PolyOptions { intercept: cfg.elasticity.intercept };
    for (slice, points) in elasticity_points(&out.observations, &out.estimates) {
        let poly: Vec<PolyPoint<f64>> = points.iter().map(|(_, p)| PolyPoint { ax: p.ax, y: p.y, h: p.h }).collect();
        let fit = match fit_production_polynomial(&poly, Some(slice), options) {
            Ok(f) => f,
            Err(e) => {
                warnings.push(format!("{slice}: {e}"));
                continue;
            }
        };
        let mut here = Vec::new();
        for (team, p) in &points {
            match elasticity_at(&fit, *p, cfg.elasticity.scaling) {
                Ok(mut ep) => {
                    ep.team_id = team.clone();
                    here.push(ep);
                }
                Err(e) => warnings.push(format!("{slice} {team}: {e}")),
            }
        }
        let evaluation: Vec<EvaluationPoint<f64>> = points.iter().map(|(_, p)| *p).collect();
        if let (Some(mx), Some(my), Some(at)) = (
            mean(&here.iter().map(|e| e.elasticity_x).collect::<Vec<_>>()),
            mean(&here.iter().map(|e| e.elasticity_y).collect::<Vec<_>>()),
            mean_point(&evaluation).and_then(|p| elasticity_at(&fit, p, cfg.elasticity.scaling).ok()),
        ) {
            means.push(ElasticityMeanRow {
                slice: slice.to_string(),
                n: here.len(),
                mean_elasticity_x: mx,
                mean_elasticity_y: my,
                at_mean_elasticity_x: at.elasticity_x,
                at_mean_elasticity_y: at.elasticity_y,
            });
        }
        fits.push(fit);
        points_out.extend(here);
    }
    rec.emit_csv(s, "poly_coefficients.csv", &fits.iter().map(PolyRow::from).collect::<Vec<_>>())?;
    rec.emit_csv(s, "elasticities.csv", &points_out.iter().map(ElasticityRow::from).collect::<Vec<_>>())?;
    rec.emit_csv(s, "elasticity_means.csv", &means)?;
    out.fits = fits;
    out.elasticities = points_out;
    Ok(warnings)
}

fn report_stage(rec: &mut Recorder, out: &PipelineOutput) -> StageResult {
    let s = Stage::Report;
    let bins_of = |r: &RunRecord| -> Option<(SkillBins, SkillBins)> {
        let p1 = out.skills.get(&r.athlete1_id)?;
        let p2 = out.skills.get(r.athlete2_id.as_ref()?)?;
        Some((p1.bins(), p2.bins()))
    };
    let runs: Vec<BinnedRun> = out
        .team_runs
        .iter()
        .filter_map(|r| bins_of(r).map(|(p1, p2)| BinnedRun { p1, p2, value: 0.0 }))
        .collect();

    let emit_tab = |rec: &mut Recorder, name: &str, tab: report::CrossTab3x3| -> Result<(), String> {
        let mut buf = Vec::new();
        tab.write_csv(&mut buf).map_err(|e| e.to_string())?;
        rec.emit(s, name, &buf)
    };
    emit_tab(rec, "crosstab_start.csv", report::pairing_crosstab(&runs, SkillDim::Start, CellKind::Count))?;
    emit_tab(rec, "crosstab_riding.csv", report::pairing_crosstab(&runs, SkillDim::Riding, CellKind::Count))?;
    let (sr, rs) = report::cross_skill_crosstab(&runs, CellKind::Count);
    emit_tab(rec, "crosstab_start_riding.csv", sr)?;
    emit_tab(rec, "crosstab_riding_start.csv", rs)?;

    // mean residualised outcome by same-dimension bins
    for (task, dim, name) in [(Task::Start, SkillDim::Start, "residual_means_start.csv"), (Task::Riding, SkillDim::Riding, "residual_means_riding.csv")] {
        let cells: Vec<BinnedRun> = out
            .observations
            .iter()
            .zip(&out.residuals)
            .filter(|(o, _)| o.task == task)
            .filter_map(|(o, &value)| {
                let (p1, p2) = o.team_id.split_once('+')?;
                Some(BinnedRun { p1: out.skills.get(p1)?.bins(), p2: out.skills.get(p2)?.bins(), value })
            })
            .collect();
        emit_tab(rec, name, report::pairing_crosstab(&cells, dim, CellKind::Mean))?;
    }

    let mut heat = Vec::new();
    for task in [Task::Start, Task::Riding] {
        let ranks = |role: fn(&RunRecord) -> Option<&str>| {
            let skills: BTreeMap<String, f64> = out
                .team_runs
                .iter()
                .filter_map(role)
                .filter_map(|id| out.skills.get(id).map(|s| (id.to_string(), s.skill(task))))
                .collect();
            report::skill_ranks(&skills)
        };
        let p1 = ranks(|r| Some(r.athlete1_id.as_str()));
        let p2 = ranks(|r| r.athlete2_id.as_deref());
        let here: Vec<EfficiencyEstimate<f64>> = out.estimates.iter().filter(|e| e.task == task).cloned().collect();
        heat.extend(report::efficiency_heatmap_cells(&here, &p1, &p2));
    }
    rec.emit_csv(s, "heatmap.csv", &heat)?;
    Ok(Vec::new())
}

/// Reads `manifest.json` from an output directory.
pub fn read_manifest(dir: &Path) -> Result<Manifest, String> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

/// Recomputes artifact hashes from disk and lists those that differ.
pub fn verify_manifest(dir: &Path, manifest: &Manifest) -> Vec<String> {
    manifest
        .artifacts
        .iter()
        .filter(|a| match fs::read(dir.join(&a.name)) {
            Ok(bytes) => hex::encode(Sha256::digest(&bytes)) != a.sha256,
            Err(_) => true,
        })
        .map(|a| a.name.clone())
        .collect()
}
