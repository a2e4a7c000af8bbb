//! Race-result ingestion: parsing, sample rules, and solo/team linkage.
//!
//! Input is delimiter-separated text with a header row. A [`ColumnSchema`]
//! maps the logical column names used here onto whatever headers the source
//! file carries. Times are seconds stored as `f64`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Logical columns that must be present in every input file.
pub const REQUIRED_COLUMNS: [&str; 10] = [
    "event_id",
    "date",
    "discipline",
    "athlete1_id",
    "athlete2_id",
    "nationality",
    "attempt",
    "starting_number",
    "start_time",
    "finish_time",
];

pub const OPTIONAL_COLUMNS: [&str; 1] = ["riding_time"];

/// A provided riding time may differ from `finish - start` by at most this much.
const RIDING_CONSISTENCY_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: malformed row ({reason})")]
    MalformedRow { line: u64, reason: String },
    #[error("line {0}: start and finish times must be positive")]
    NonPositiveTime(u64),
    #[error("line {0}: finish time does not exceed start time")]
    InvertedSplit(u64),
    #[error("no team run has both athletes with enough solo runs")]
    EmptyIntersection,
    #[error("i/o: {0}")]
    Io(String),
    #[error("json: {0}")]
    Json(String),
}

impl From<std::io::Error> for IngestError {
    fn from(e: std::io::Error) -> Self {
        IngestError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discipline {
    Monobob,
    TwoWoman,
}

impl Discipline {
    pub fn as_str(self) -> &'static str {
        match self {
            Discipline::Monobob => "monobob",
            Discipline::TwoWoman => "two_woman",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "monobob" | "mono" => Some(Discipline::Monobob),
            "two_woman" | "two-woman" | "2-woman" | "2w" => Some(Discipline::TwoWoman),
            _ => None,
        }
    }
}

impl fmt::Display for Discipline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One timed run, solo (monobob) or two-person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub event_id: String,
    pub date: NaiveDate,
    pub discipline: Discipline,
    /// Driver, or the solo athlete in monobob.
    pub athlete1_id: String,
    /// Brakeman; absent for monobob.
    pub athlete2_id: Option<String>,
    pub nationality: String,
    pub attempt_index: u32,
    pub starting_number: u32,
    pub start_time: f64,
    pub finish_time: f64,
    pub riding_time: f64,
}

impl RunRecord {
    /// Identifier of the competing unit: the solo athlete or the ordered pair.
    pub fn team_key(&self) -> String {
        match &self.athlete2_id {
            Some(b) => format!("{}+{}", self.athlete1_id, b),
            None => self.athlete1_id.clone(),
        }
    }

    fn duplicate_key(&self) -> (String, Discipline, String, u32) {
        (self.event_id.clone(), self.discipline, self.team_key(), self.attempt_index)
    }
}

/// Maps logical column names onto source headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// logical name -> header in the source file. Unlisted columns map to themselves.
    #[serde(default)]
    pub columns: BTreeMap<String, String>,
}

fn default_delimiter() -> char {
    ','
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema { delimiter: ',', columns: BTreeMap::new() }
    }
}

impl ColumnSchema {
    pub fn header_for<'a>(&'a self, logical: &'a str) -> &'a str {
        self.columns.get(logical).map(String::as_str).unwrap_or(logical)
    }

    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        serde_json::from_str(text).map_err(|e| IngestError::Json(e.to_string()))
    }
}

/// A run removed from the sample, with the rule that removed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub event_id: String,
    pub team_key: String,
    pub attempt_index: u32,
    pub reason: String,
}

impl Exclusion {
    fn new(run: &RunRecord, reason: impl Into<String>) -> Self {
        Exclusion {
            event_id: run.event_id.clone(),
            team_key: run.team_key(),
            attempt_index: run.attempt_index,
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Exclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\tattempt={}\t{}",
            self.event_id, self.team_key, self.attempt_index, self.reason
        )
    }
}

struct ColumnIndex {
    required: [usize; 10],
    riding: Option<usize>,
}

fn resolve_columns(headers: &csv::StringRecord, schema: &ColumnSchema) -> Result<ColumnIndex, IngestError> {
    let lookup: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let mut required = [0usize; 10];
    for (slot, logical) in required.iter_mut().zip(REQUIRED_COLUMNS) {
        let header = schema.header_for(logical);
        *slot = *lookup
            .get(header)
            .ok_or_else(|| IngestError::MissingColumn(logical.to_string()))?;
    }
    let riding = lookup.get(schema.header_for("riding_time")).copied();
    Ok(ColumnIndex { required, riding })
}

fn malformed(line: u64, reason: impl Into<String>) -> IngestError {
    IngestError::MalformedRow { line, reason: reason.into() }
}

fn parse_time(raw: &str, line: u64, name: &str) -> Result<f64, IngestError> {
    let v: f64 = raw.trim().parse().map_err(|_| malformed(line, format!("{name} = {raw:?}")))?;
    if !v.is_finite() {
        return Err(malformed(line, format!("{name} is not finite")));
    }
    Ok(v)
}

fn parse_positive_int(raw: &str, line: u64, name: &str) -> Result<u32, IngestError> {
    match raw.trim().parse::<u32>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(malformed(line, format!("{name} = {raw:?}"))),
    }
}

fn parse_row(rec: &csv::StringRecord, cols: &ColumnIndex, line: u64) -> Result<RunRecord, IngestError> {
    let field = |i: usize| rec.get(cols.required[i]).unwrap_or("").trim();

    let event_id = field(0).to_string();
    if event_id.is_empty() {
        return Err(malformed(line, "empty event_id"));
    }
    let date = NaiveDate::parse_from_str(field(1), "%Y-%m-%d")
        .map_err(|_| malformed(line, format!("date = {:?}", field(1))))?;
    let discipline =
        Discipline::parse(field(2)).ok_or_else(|| malformed(line, format!("discipline = {:?}", field(2))))?;
    let athlete1_id = field(3).to_string();
    if athlete1_id.is_empty() {
        return Err(malformed(line, "empty athlete1_id"));
    }
    let athlete2_id = Some(field(4).to_string()).filter(|s| !s.is_empty());
    match (discipline, &athlete2_id) {
        (Discipline::TwoWoman, None) => return Err(malformed(line, "two_woman run without athlete2_id")),
        (Discipline::Monobob, Some(_)) => return Err(malformed(line, "monobob run with athlete2_id")),
        _ => {}
    }
    let nationality = field(5).to_string();
    if nationality.len() != 3 || !nationality.chars().all(|c| c.is_ascii_alphabetic()) {
        return Err(malformed(line, format!("nationality = {nationality:?}")));
    }
    let attempt_index = parse_positive_int(field(6), line, "attempt")?;
    let starting_number = parse_positive_int(field(7), line, "starting_number")?;
    let start_time = parse_time(field(8), line, "start_time")?;
    let finish_time = parse_time(field(9), line, "finish_time")?;
    if start_time <= 0.0 || finish_time <= 0.0 {
        return Err(IngestError::NonPositiveTime(line));
    }
    if finish_time <= start_time {
        return Err(IngestError::InvertedSplit(line));
    }
    let riding_time = finish_time - start_time;
    if let Some(i) = cols.riding {
        let raw = rec.get(i).unwrap_or("").trim();
        if !raw.is_empty() {
            let given = parse_time(raw, line, "riding_time")?;
            if (given - riding_time).abs() > RIDING_CONSISTENCY_TOL {
                return Err(malformed(line, "riding_time inconsistent with finish - start"));
            }
        }
    }

    Ok(RunRecord {
        event_id,
        date,
        discipline,
        athlete1_id,
        athlete2_id,
        nationality,
        attempt_index,
        starting_number,
        start_time,
        finish_time,
        riding_time,
    })
}

/// Parses a results table into run records, preserving input order.
pub fn parse_results<R: Read>(source: R, schema: &ColumnSchema) -> Result<Vec<RunRecord>, IngestError> {
    let delimiter = u8::try_from(schema.delimiter)
        .map_err(|_| IngestError::Json(format!("delimiter {:?} is not a single byte", schema.delimiter)))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    let cols = resolve_columns(&headers, schema)?;

    let mut out = Vec::new();
    for result in reader.records() {
        let rec = result.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            malformed(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != headers.len() {
            return Err(malformed(line, format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        out.push(parse_row(&rec, &cols, line)?);
    }
    Ok(out)
}

/// Keeps the first occurrence of each (event, discipline, team, attempt).
pub fn drop_duplicates(records: Vec<RunRecord>) -> (Vec<RunRecord>, Vec<Exclusion>) {
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(records.len());
    let mut log = Vec::new();
    for run in records {
        if seen.insert(run.duplicate_key()) {
            kept.push(run);
        } else {
            log.push(Exclusion::new(&run, "duplicate run"));
        }
    }
    (kept, log)
}

/// Retains attempts `1..=max_attempts` of every (event, team) group.
pub fn truncate_attempts(records: &[RunRecord], max_attempts: u32) -> Vec<RunRecord> {
    records.iter().filter(|r| r.attempt_index <= max_attempts).cloned().collect()
}

/// Team runs whose members both have enough solo runs for skill estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedDataset {
    pub eligible_athletes: BTreeSet<String>,
    pub team_runs: Vec<RunRecord>,
    pub exclusions: Vec<Exclusion>,
    pub solo_run_counts: BTreeMap<String, usize>,
}

/// Minimum number of solo runs for an athlete's fixed effect to be used.
pub const MIN_SOLO_RUNS: usize = 2;

pub fn link_athletes(mono: &[RunRecord], team: &[RunRecord]) -> Result<LinkedDataset, IngestError> {
    let mut solo_run_counts: BTreeMap<String, usize> = BTreeMap::new();
    for run in mono.iter().filter(|r| r.discipline == Discipline::Monobob) {
        *solo_run_counts.entry(run.athlete1_id.clone()).or_default() += 1;
    }
    let enough = |id: &str| solo_run_counts.get(id).copied().unwrap_or(0) >= MIN_SOLO_RUNS;

    let mut eligible_athletes = BTreeSet::new();
    let mut team_runs = Vec::new();
    let mut exclusions = Vec::new();
    for run in team {
        let members = std::iter::once(run.athlete1_id.as_str()).chain(run.athlete2_id.as_deref());
        let short: Vec<String> = members
            .filter(|id| !enough(id))
            .map(|id| format!("{id} has {} solo runs", solo_run_counts.get(id).copied().unwrap_or(0)))
            .collect();
        if run.discipline != Discipline::TwoWoman {
            exclusions.push(Exclusion::new(run, "not a two-person run"));
        } else if short.is_empty() {
            eligible_athletes.insert(run.athlete1_id.clone());
            if let Some(b) = &run.athlete2_id {
                eligible_athletes.insert(b.clone());
            }
            team_runs.push(run.clone());
        } else {
            exclusions.push(Exclusion::new(run, format!("insufficient solo runs: {}", short.join("; "))));
        }
    }
    if team_runs.is_empty() {
        return Err(IngestError::EmptyIntersection);
    }
    Ok(LinkedDataset { eligible_athletes, team_runs, exclusions, solo_run_counts })
}

pub fn split_by_discipline(records: &[RunRecord]) -> (Vec<RunRecord>, Vec<RunRecord>) {
    records.iter().cloned().partition(|r| r.discipline == Discipline::Monobob)
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(records: &[RunRecord], mut out: W) -> Result<(), IngestError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| IngestError::Json(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<RunRecord>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord = serde_json::from_str(&line).map_err(|e| malformed(i as u64 + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes records as CSV with the logical column names as headers.
pub fn write_results_csv<W: Write>(records: &[RunRecord], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| IngestError::Io(e.to_string());
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    header.extend(OPTIONAL_COLUMNS);
    w.write_record(&header).map_err(io)?;
    for r in records {
        w.write_record([
            r.event_id.clone(),
            r.date.format("%Y-%m-%d").to_string(),
            r.discipline.to_string(),
            r.athlete1_id.clone(),
            r.athlete2_id.clone().unwrap_or_default(),
            r.nationality.clone(),
            r.attempt_index.to_string(),
            r.starting_number.to_string(),
            r.start_time.to_string(),
            r.finish_time.to_string(),
            r.riding_time.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_exclusions<W: Write>(log: &[Exclusion], mut out: W) -> Result<(), IngestError> {
    for e in log {
        writeln!(out, "{e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "event_id,date,discipline,athlete1_id,athlete2_id,nationality,attempt,starting_number,start_time,finish_time";

    fn parse(body: &str) -> Result<Vec<RunRecord>, IngestError> {
        parse_results(format!("{HEADER}\n{body}").as_bytes(), &ColumnSchema::default())
    }

    fn run(event: &str, a1: &str, a2: Option<&str>, attempt: u32) -> RunRecord {
        RunRecord {
            event_id: event.into(),
            date: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            discipline: if a2.is_some() { Discipline::TwoWoman } else { Discipline::Monobob },
            athlete1_id: a1.into(),
            athlete2_id: a2.map(Into::into),
            nationality: "CAN".into(),
            attempt_index: attempt,
            starting_number: 1,
            start_time: 5.4,
            finish_time: 58.1,
            riding_time: 58.1 - 5.4,
        }
    }

    #[test]
    fn riding_time_derived_from_split() {
        let recs = parse("E1,2024-01-05,monobob,A,,CAN,1,3,5.40,58.10").unwrap();
        assert_eq!(recs.len(), 1);
        assert!((recs[0].riding_time - 52.70).abs() < 1e-9);
        assert_eq!(recs[0].riding_time, recs[0].finish_time - recs[0].start_time);
    }

    #[test]
    fn inverted_split_rejected() {
        let err = parse("E1,2024-01-05,monobob,A,,CAN,1,3,58.10,5.40").unwrap_err();
        assert_eq!(err, IngestError::InvertedSplit(2));
    }

    #[test]
    fn non_positive_time_rejected() {
        let err = parse("E1,2024-01-05,monobob,A,,CAN,1,3,0,5.40").unwrap_err();
        assert_eq!(err, IngestError::NonPositiveTime(2));
    }

    #[test]
    fn malformed_field_reports_line() {
        let body = "E1,2024-01-05,monobob,A,,CAN,1,3,5.4,58.1\nE1,2024-01-05,monobob,B,,CAN,x,3,5.4,58.1";
        match parse(body).unwrap_err() {
            IngestError::MalformedRow { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn discipline_partner_consistency() {
        assert!(matches!(
            parse("E1,2024-01-05,two_woman,A,,CAN,1,3,5.4,58.1"),
            Err(IngestError::MalformedRow { .. })
        ));
        assert!(matches!(
            parse("E1,2024-01-05,monobob,A,B,CAN,1,3,5.4,58.1"),
            Err(IngestError::MalformedRow { .. })
        ));
    }

    #[test]
    fn missing_column_detected() {
        let err = parse_results("event_id,date\nE1,2024-01-01".as_bytes(), &ColumnSchema::default()).unwrap_err();
        assert_eq!(err, IngestError::MissingColumn("discipline".into()));
    }

    #[test]
    fn three_rows_preserve_order() {
        let body = "E1,2024-01-05,monobob,C,,CAN,1,1,5.4,58.1\n\
                    E1,2024-01-05,monobob,A,,USA,1,2,5.5,58.3\n\
                    E1,2024-01-05,two_woman,B,D,GER,1,1,5.1,55.0";
        let recs = parse(body).unwrap();
        let ids: Vec<_> = recs.iter().map(|r| r.athlete1_id.as_str()).collect();
        assert_eq!(ids, ["C", "A", "B"]);
        assert_eq!(recs[2].athlete2_id.as_deref(), Some("D"));
    }

    #[test]
    fn schema_maps_headers_and_delimiter() {
        let text = "Race;Day;Kind;Pilot;Brake;Nat;Heat;Bib;Start;Finish;Ride\n\
                    E9;2023-02-11;two_woman;P;Q;SUI;2;4;5.25;57.75;52.50";
        let schema = ColumnSchema::from_json(
            r#"{"delimiter": ";", "columns": {"event_id": "Race", "date": "Day", "discipline": "Kind",
                "athlete1_id": "Pilot", "athlete2_id": "Brake", "nationality": "Nat", "attempt": "Heat",
                "starting_number": "Bib", "start_time": "Start", "finish_time": "Finish", "riding_time": "Ride"}}"#,
        )
        .unwrap();
        let recs = parse_results(text.as_bytes(), &schema).unwrap();
        assert_eq!(recs[0].attempt_index, 2);
        assert_eq!(recs[0].riding_time, 52.5);
    }

    #[test]
    fn inconsistent_riding_column_rejected() {
        let text = format!("{HEADER},riding_time\nE1,2024-01-05,monobob,A,,CAN,1,3,5.40,58.10,50.0");
        assert!(matches!(
            parse_results(text.as_bytes(), &ColumnSchema::default()),
            Err(IngestError::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn truncation_keeps_first_two() {
        let recs: Vec<_> = (1..=4).map(|a| run("E1", "A", Some("B"), a)).collect();
        let kept = truncate_attempts(&recs, 2);
        assert_eq!(kept.iter().map(|r| r.attempt_index).collect::<Vec<_>>(), [1, 2]);
        let single = vec![run("E1", "A", None, 1)];
        assert_eq!(truncate_attempts(&single, 2), single);
        let kept = truncate_attempts(&recs[..2], 1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].attempt_index, 1);
        assert!(truncate_attempts(&[], 2).is_empty());
    }

    #[test]
    fn duplicates_keep_first() {
        let mut second = run("E1", "A", None, 1);
        second.start_time = 6.0;
        let (kept, log) = drop_duplicates(vec![run("E1", "A", None, 1), second, run("E1", "A", None, 2)]);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].start_time, 5.4);
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].reason, "duplicate run");
    }

    #[test]
    fn linkage_applies_solo_threshold() {
        let mono = vec![
            run("M1", "A", None, 1),
            run("M2", "A", None, 1),
            run("M1", "B", None, 1),
            run("M2", "B", None, 2),
            run("M1", "C", None, 1),
        ];
        let team = vec![run("T1", "A", Some("B"), 1), run("T1", "A", Some("C"), 1)];
        let linked = link_athletes(&mono, &team).unwrap();
        assert_eq!(linked.team_runs, vec![team[0].clone()]);
        assert_eq!(linked.eligible_athletes.iter().cloned().collect::<Vec<_>>(), ["A", "B"]);
        assert_eq!(linked.exclusions.len(), 1);
        assert!(linked.exclusions[0].reason.contains("C has 1 solo runs"));
    }

    #[test]
    fn empty_solo_list_is_an_error() {
        let team = vec![run("T1", "A", Some("B"), 1)];
        assert_eq!(link_athletes(&[], &team), Err(IngestError::EmptyIntersection));
    }

    #[test]
    fn exclusion_line_format() {
        let e = Exclusion::new(&run("T1", "A", Some("B"), 2), "duplicate run");
        assert_eq!(e.to_string(), "T1\tA+B\tattempt=2\tduplicate run");
    }
}
