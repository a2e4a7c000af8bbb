//! Synthetic race panels drawn from a fully known data-generating process.
//!
//! Every athlete has a start skill and a riding skill. Solo (monobob) phase
//! times are additive: `base + event + order - skill + noise`. Two-person
//! phase times replace `-skill` by `-H`, where
//! `H = (A * x)^theta * y^(1 - theta)` with `x` the driver's and `y` the
//! brakeman's skill for that phase and `A` an efficiency drawn independently
//! for every (team, event, attempt, phase). Finish time is start plus riding.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64`, so a seed fixes the dataset on every platform.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use chrono::{Days, NaiveDate};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::{Task, TeamTaskObservation};
use crate::ingest::{Discipline, RunRecord};
use crate::panel::Outcome;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("oracle cell has {n} observations, at least {min} required")]
    SparseCell { n: usize, min: usize },
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "law")]
pub enum AffinityLaw {
    LogNormal { mu: f64, sigma: f64 },
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "law")]
pub enum SkillLaw {
    Uniform { lo: f64, hi: f64 },
    LogNormal { mu: f64, sigma: f64 },
    /// Uniform draw from a finite set of values.
    Grid { values: Vec<f64> },
}

fn check_uniform(lo: f64, hi: f64, what: &str) -> Result<(), SynthError> {
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(SynthError::InvalidConfig(format!("{what}: need 0 < lo < hi")));
    }
    Ok(())
}

fn check_lognormal(mu: f64, sigma: f64, what: &str) -> Result<(), SynthError> {
    if !(mu.is_finite() && sigma >= 0.0 && sigma.is_finite()) {
        return Err(SynthError::InvalidConfig(format!("{what}: need finite mu and sigma >= 0")));
    }
    Ok(())
}

impl AffinityLaw {
    fn validate(&self) -> Result<(), SynthError> {
        match *self {
            AffinityLaw::LogNormal { mu, sigma } => check_lognormal(mu, sigma, "affinity law"),
            AffinityLaw::Constant { value } if value > 0.0 && value.is_finite() => Ok(()),
            AffinityLaw::Constant { .. } => Err(SynthError::InvalidConfig("affinity constant must be positive".into())),
            AffinityLaw::Uniform { lo, hi } => check_uniform(lo, hi, "affinity law"),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            AffinityLaw::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).expect("validated").sample(rng),
            AffinityLaw::Constant { value } => value,
            AffinityLaw::Uniform { lo, hi } => rng.random_range(lo..hi),
        }
    }
}

impl SkillLaw {
    fn validate(&self, what: &str) -> Result<(), SynthError> {
        match self {
            SkillLaw::Uniform { lo, hi } => check_uniform(*lo, *hi, what),
            SkillLaw::LogNormal { mu, sigma } => check_lognormal(*mu, *sigma, what),
            SkillLaw::Grid { values } => {
                if values.is_empty() || values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(SynthError::InvalidConfig(format!("{what}: grid needs positive values")));
                }
                Ok(())
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            SkillLaw::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            SkillLaw::LogNormal { mu, sigma } => LogNormal::new(*mu, *sigma).expect("validated").sample(rng),
            SkillLaw::Grid { values } => values[rng.random_range(0..values.len())],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n_drivers: usize,
    pub n_brakemen: usize,
    /// Distinct (driver, brakeman) pairs.
    pub n_teams: usize,
    /// Two-person events.
    pub n_events: usize,
    pub events_per_team: usize,
    /// Total (team, event) entries. When set, every team races at least once
    /// and the remainder goes to randomly chosen teams; `events_per_team` is
    /// then ignored.
    pub team_entries: Option<usize>,
    pub n_solo_events: usize,
    pub solo_events_per_athlete: usize,
    pub attempts: u32,
    /// Cobb-Douglas weight on the effective leader input.
    pub theta: f64,
    pub affinity_law: AffinityLaw,
    pub skill_law_x: SkillLaw,
    pub skill_law_y: SkillLaw,
    pub event_effect_sd: f64,
    pub order_effect_sd: f64,
    pub noise_sd: f64,
    pub base_start: f64,
    pub base_riding: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    /// Roughly the scale of a real two-woman panel: 45 athletes, 47 teams,
    /// 80 team entries (160 runs over two attempts).
    fn default() -> Self {
        DgpConfig {
            n_drivers: 22,
            n_brakemen: 23,
            n_teams: 47,
            n_events: 12,
            events_per_team: 2,
            team_entries: Some(80),
            n_solo_events: 16,
            solo_events_per_athlete: 5,
            attempts: 2,
            theta: 0.4,
            affinity_law: AffinityLaw::LogNormal { mu: 0.0, sigma: 0.3 },
            skill_law_x: SkillLaw::Uniform { lo: 0.5, hi: 2.0 },
            skill_law_y: SkillLaw::Uniform { lo: 0.5, hi: 2.0 },
            event_effect_sd: 0.1,
            order_effect_sd: 0.02,
            noise_sd: 0.02,
            base_start: 8.0,
            base_riding: 50.0,
            seed: 0,
        }
    }
}

impl DgpConfig {
    /// A large panel with `n_teams` pairs, each racing once, so every
    /// (phase, attempt) slice has `n_teams` observations.
    pub fn large(n_teams: usize) -> Self {
        let side = ((n_teams as f64).sqrt() * 1.5).ceil() as usize;
        DgpConfig {
            n_drivers: side,
            n_brakemen: side,
            n_teams,
            n_events: ((n_teams as f64).sqrt().round() as usize).max(4),
            events_per_team: 1,
            team_entries: None,
            n_solo_events: 30,
            solo_events_per_athlete: 4,
            ..DgpConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_teams < 5 {
            return bad("n_teams must be at least 5");
        }
        if self.n_drivers == 0 || self.n_brakemen == 0 {
            return bad("need at least one driver and one brakeman");
        }
        if self.n_teams > self.n_drivers * self.n_brakemen {
            return bad("more teams than distinct driver-brakeman pairs");
        }
        match self.team_entries {
            Some(e) if e < self.n_teams || e > self.n_teams * self.n_events => {
                return bad("team_entries must be in n_teams..=n_teams * n_events");
            }
            None if self.n_events == 0 || self.events_per_team == 0 || self.events_per_team > self.n_events => {
                return bad("events_per_team must be in 1..=n_events");
            }
            _ if self.n_events == 0 => return bad("n_events must be at least 1"),
            _ => {}
        }
        if self.n_solo_events == 0
            || self.solo_events_per_athlete == 0
            || self.solo_events_per_athlete > self.n_solo_events
        {
            return bad("solo_events_per_athlete must be in 1..=n_solo_events");
        }
        if self.attempts == 0 || self.attempts > u8::MAX as u32 {
            return bad("attempts must be in 1..=255");
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad("theta must lie in (0, 1)");
        }
        for (sd, name) in [
            (self.event_effect_sd, "event_effect_sd"),
            (self.order_effect_sd, "order_effect_sd"),
            (self.noise_sd, "noise_sd"),
        ] {
            if !(sd >= 0.0 && sd.is_finite()) {
                return Err(SynthError::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        if !(self.base_start > 0.0 && self.base_riding > 0.0) {
            return bad("base times must be positive");
        }
        self.affinity_law.validate()?;
        self.skill_law_x.validate("skill_law_x")?;
        self.skill_law_y.validate("skill_law_y")
    }
}

/// Planted values behind one two-person (phase, attempt) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthObservation {
    pub event_id: String,
    pub team_id: String,
    pub driver_id: String,
    pub brakeman_id: String,
    pub task: Task,
    pub attempt: u8,
    pub true_a: f64,
    pub true_x: f64,
    pub true_y: f64,
    pub true_h_noiseless: f64,
    /// Output net of the run's timing noise, `true_h_noiseless - noise`.
    pub h_observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEffect {
    pub dimension: Outcome,
    pub level: String,
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub theta: f64,
    pub observations: Vec<TruthObservation>,
    /// Athlete effects in seconds (the negated skill).
    pub athlete_effects: Vec<LevelEffect>,
    pub event_effects: Vec<LevelEffect>,
    pub order_effects: Vec<LevelEffect>,
}

impl SyntheticTruth {
    /// Observations built from planted inputs and noisy output.
    pub fn task_observations(&self) -> Vec<TeamTaskObservation<f64>> {
        self.observations
            .iter()
            .map(|t| TeamTaskObservation {
                team_id: t.team_id.clone(),
                event_id: t.event_id.clone(),
                task: t.task,
                attempt: t.attempt,
                x_input: t.true_x,
                y_input: t.true_y,
                h_output: t.h_observed,
            })
            .collect()
    }

    pub fn athlete_effect(&self, dimension: Outcome, athlete: &str) -> Option<f64> {
        self.athlete_effects.iter().find(|e| e.dimension == dimension && e.level == athlete).map(|e| e.effect)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), SynthError> {
        let io = |e: std::io::Error| SynthError::Io(e.to_string());
        let mut line = |rec: TruthRecord| -> Result<(), SynthError> {
            serde_json::to_writer(&mut out, &rec).map_err(|e| SynthError::Io(e.to_string()))?;
            out.write_all(b"\n").map_err(io)
        };
        line(TruthRecord::Meta { theta: self.theta })?;
        for o in &self.observations {
            line(TruthRecord::Observation(o.clone()))?;
        }
        for e in &self.athlete_effects {
            line(TruthRecord::AthleteEffect(e.clone()))?;
        }
        for e in &self.event_effects {
            line(TruthRecord::EventEffect(e.clone()))?;
        }
        for e in &self.order_effects {
            line(TruthRecord::OrderEffect(e.clone()))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, SynthError> {
        let mut truth = SyntheticTruth::default();
        for line in input.lines() {
            let line = line.map_err(|e| SynthError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(|e| SynthError::Io(e.to_string()))? {
                TruthRecord::Meta { theta } => truth.theta = theta,
                TruthRecord::Observation(o) => truth.observations.push(o),
                TruthRecord::AthleteEffect(e) => truth.athlete_effects.push(e),
                TruthRecord::EventEffect(e) => truth.event_effects.push(e),
                TruthRecord::OrderEffect(e) => truth.order_effects.push(e),
            }
        }
        Ok(truth)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
enum TruthRecord {
    Meta { theta: f64 },
    Observation(TruthObservation),
    AthleteEffect(LevelEffect),
    EventEffect(LevelEffect),
    OrderEffect(LevelEffect),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub runs: Vec<RunRecord>,
    pub truth: SyntheticTruth,
}

const NATIONS: [&str; 12] = ["CAN", "USA", "GER", "SUI", "AUT", "GBR", "SVK", "ROU", "AUS", "NED", "BEL", "ITA"];

struct Athlete {
    id: String,
    nation: &'static str,
    start_skill: f64,
    riding_skill: f64,
}

struct PhaseEffects {
    start: Vec<f64>,
    riding: Vec<f64>,
}

impl PhaseEffects {
    fn draw<R: Rng>(rng: &mut R, n: usize, sd: f64) -> Self {
        let one = |rng: &mut R| -> Vec<f64> {
            if sd == 0.0 {
                vec![0.0; n]
            } else {
                let d = Normal::new(0.0, sd).expect("validated");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        };
        let start = one(rng);
        let riding = one(rng);
        PhaseEffects { start, riding }
    }
}

fn gaussian<R: Rng>(rng: &mut R, sd: f64) -> f64 {
    if sd == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sd).expect("validated").sample(rng)
    }
}

fn event_date(index: usize) -> NaiveDate {
    NaiveDate::from_ymd_opt(2021, 10, 1).expect("valid date") + Days::new(7 * index as u64)
}

/// Draws a dataset from the configured process.
pub fn generate(cfg: &DgpConfig) -> Result<SyntheticDataset, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut athletes = Vec::with_capacity(cfg.n_drivers + cfg.n_brakemen);
    for i in 0..cfg.n_drivers {
        let nation = NATIONS[rng.random_range(0..NATIONS.len())];
        let start_skill = cfg.skill_law_x.sample(&mut rng);
        let riding_skill = cfg.skill_law_x.sample(&mut rng);
        athletes.push(Athlete { id: format!("D{:04}", i + 1), nation, start_skill, riding_skill });
    }
    for i in 0..cfg.n_brakemen {
        let nation = NATIONS[rng.random_range(0..NATIONS.len())];
        let start_skill = cfg.skill_law_y.sample(&mut rng);
        let riding_skill = cfg.skill_law_y.sample(&mut rng);
        athletes.push(Athlete { id: format!("B{:04}", i + 1), nation, start_skill, riding_skill });
    }

    let max_field = cfg.n_drivers + cfg.n_brakemen + cfg.n_teams;
    let solo_events = PhaseEffects::draw(&mut rng, cfg.n_solo_events, cfg.event_effect_sd);
    let team_events = PhaseEffects::draw(&mut rng, cfg.n_events, cfg.event_effect_sd);
    let orders = PhaseEffects::draw(&mut rng, max_field, cfg.order_effect_sd);

    let mut runs = Vec::new();
    let mut truth = SyntheticTruth { theta: cfg.theta, ..SyntheticTruth::default() };
    let make_run = |event_id: String,
                    date: NaiveDate,
                    a1: &Athlete,
                    a2: Option<&Athlete>,
                    attempt: u32,
                    order: usize,
                    start_time: f64,
                    riding_time: f64|
     -> Result<RunRecord, SynthError> {
        if !(start_time > 0.0 && riding_time > 0.0) {
            return Err(SynthError::InvalidConfig(format!(
                "non-positive phase time in {event_id}; raise base_start / base_riding"
            )));
        }
        let finish_time = start_time + riding_time;
        Ok(RunRecord {
            event_id,
            date,
            discipline: if a2.is_some() { Discipline::TwoWoman } else { Discipline::Monobob },
            athlete1_id: a1.id.clone(),
            athlete2_id: a2.map(|a| a.id.clone()),
            nationality: a1.nation.to_string(),
            attempt_index: attempt,
            starting_number: order as u32,
            start_time,
            finish_time,
            riding_time: finish_time - start_time,
        })
    };

    // Solo events.
    let mut solo_fields: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_solo_events];
    for a in 0..athletes.len() {
        for e in index::sample(&mut rng, cfg.n_solo_events, cfg.solo_events_per_athlete) {
            solo_fields[e].push(a);
        }
    }
    for (e, field) in solo_fields.iter_mut().enumerate() {
        let event_id = format!("M{:03}", e + 1);
        for attempt in 1..=cfg.attempts {
            field.shuffle(&mut rng);
            for (pos, &a) in field.iter().enumerate() {
                let ath = &athletes[a];
                let start = cfg.base_start + solo_events.start[e] + orders.start[pos] - ath.start_skill
                    + gaussian(&mut rng, cfg.noise_sd);
                let riding = cfg.base_riding + solo_events.riding[e] + orders.riding[pos] - ath.riding_skill
                    + gaussian(&mut rng, cfg.noise_sd);
                runs.push(make_run(event_id.clone(), event_date(e), ath, None, attempt, pos + 1, start, riding)?);
            }
        }
    }

    // Teams and their events.
    let pairs = index::sample(&mut rng, cfg.n_drivers * cfg.n_brakemen, cfg.n_teams);
    let teams: Vec<(usize, usize)> =
        pairs.iter().map(|p| (p / cfg.n_brakemen, cfg.n_drivers + p % cfg.n_brakemen)).collect();
    let mut team_fields: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_events];
    let entries_per_team: Vec<usize> = match cfg.team_entries {
        None => vec![cfg.events_per_team; teams.len()],
        Some(total) => {
            let mut k = vec![1usize; teams.len()];
            let mut extra = total - teams.len();
            while extra > 0 {
                let t = rng.random_range(0..teams.len());
                if k[t] < cfg.n_events {
                    k[t] += 1;
                    extra -= 1;
                }
            }
            k
        }
    };
    for (t, &k) in entries_per_team.iter().enumerate() {
        for e in index::sample(&mut rng, cfg.n_events, k) {
            team_fields[e].push(t);
        }
    }
    for (e, field) in team_fields.iter_mut().enumerate() {
        let event_id = format!("T{:03}", e + 1);
        for attempt in 1..=cfg.attempts {
            field.shuffle(&mut rng);
            for (pos, &t) in field.iter().enumerate() {
                let (d, b) = teams[t];
                let (drv, brk) = (&athletes[d], &athletes[b]);
                let team_id = format!("{}+{}", drv.id, brk.id);
                let mut phase = |task: Task, x: f64, y: f64, rng: &mut ChaCha8Rng| -> f64 {
                    let a = cfg.affinity_law.sample(rng);
                    let h = (a * x).powf(cfg.theta) * y.powf(1.0 - cfg.theta);
                    let noise = gaussian(rng, cfg.noise_sd);
                    truth.observations.push(TruthObservation {
                        event_id: event_id.clone(),
                        team_id: team_id.clone(),
                        driver_id: drv.id.clone(),
                        brakeman_id: brk.id.clone(),
                        task,
                        attempt: attempt as u8,
                        true_a: a,
                        true_x: x,
                        true_y: y,
                        true_h_noiseless: h,
                        h_observed: h - noise,
                    });
                    noise - h
                };
                let start_part = phase(Task::Start, drv.start_skill, brk.start_skill, &mut rng);
                let riding_part = phase(Task::Riding, drv.riding_skill, brk.riding_skill, &mut rng);
                let start = cfg.base_start + team_events.start[e] + orders.start[pos] + start_part;
                let riding = cfg.base_riding + team_events.riding[e] + orders.riding[pos] + riding_part;
                runs.push(make_run(event_id.clone(), event_date(e), drv, Some(brk), attempt, pos + 1, start, riding)?);
            }
        }
    }

    for ath in &athletes {
        truth.athlete_effects.push(LevelEffect { dimension: Outcome::Start, level: ath.id.clone(), effect: -ath.start_skill });
        truth.athlete_effects.push(LevelEffect {
            dimension: Outcome::Riding,
            level: ath.id.clone(),
            effect: -ath.riding_skill,
        });
    }
    for (prefix, effects) in [("M", &solo_events), ("T", &team_events)] {
        for (i, (&s, &r)) in effects.start.iter().zip(&effects.riding).enumerate() {
            let level = format!("{prefix}{:03}", i + 1);
            truth.event_effects.push(LevelEffect { dimension: Outcome::Start, level: level.clone(), effect: s });
            truth.event_effects.push(LevelEffect { dimension: Outcome::Riding, level, effect: r });
        }
    }
    for (i, (&s, &r)) in orders.start.iter().zip(&orders.riding).enumerate() {
        let level = (i + 1).to_string();
        truth.order_effects.push(LevelEffect { dimension: Outcome::Start, level: level.clone(), effect: s });
        truth.order_effects.push(LevelEffect { dimension: Outcome::Riding, level, effect: r });
    }

    Ok(SyntheticDataset { runs, truth })
}

/// Minimum cell size for the brute-force conditional rank.
pub const MIN_ORACLE_CELL: usize = 10;

/// Exact empirical CDF of the output among observations of the same slice
/// sharing the target's exact `(x, y)`. No smoothing.
pub fn oracle_conditional_rank(
    target: &TeamTaskObservation<f64>,
    observations: &[TeamTaskObservation<f64>],
) -> Result<f64, SynthError> {
    oracle_conditional_rank_with(target, observations, MIN_ORACLE_CELL)
}

pub fn oracle_conditional_rank_with(
    target: &TeamTaskObservation<f64>,
    observations: &[TeamTaskObservation<f64>],
    min_cell: usize,
) -> Result<f64, SynthError> {
    let cell: Vec<f64> = observations
        .iter()
        .filter(|o| o.slice() == target.slice() && o.x_input == target.x_input && o.y_input == target.y_input)
        .map(|o| o.h_output)
        .collect();
    if cell.len() < min_cell.max(1) {
        return Err(SynthError::SparseCell { n: cell.len(), min: min_cell.max(1) });
    }
    let below = cell.iter().filter(|&&h| h <= target.h_output).count();
    Ok(below as f64 / cell.len() as f64)
}

/// Per-athlete run counts of a generated panel, by discipline.
pub fn solo_run_counts(runs: &[RunRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in runs.iter().filter(|r| r.discipline == Discipline::Monobob) {
        *counts.entry(r.athlete1_id.clone()).or_insert(0) += 1;
    }
    counts
}
