use std::collections::BTreeSet;

use team_affinity::ingest::{link_athletes, parse_results, split_by_discipline, write_results_csv, ColumnSchema, Discipline};
use team_affinity::stats::pearson;
use team_affinity::synth::{generate, DgpConfig};
use team_affinity::transform::tercile_bins;

#[test]
fn default_panel_has_expected_scale() {
    let data = generate(&DgpConfig::default()).unwrap();
    let team: Vec<_> = data.runs.iter().filter(|r| r.discipline == Discipline::TwoWoman).collect();
    assert_eq!(team.len(), 160);
    let teams: BTreeSet<String> = team.iter().map(|r| r.team_key()).collect();
    assert_eq!(teams.len(), 47);
    let athletes: BTreeSet<&str> =
        team.iter().flat_map(|r| [r.athlete1_id.as_str(), r.athlete2_id.as_deref().unwrap()]).collect();
    assert!(athletes.len() <= 45);
}

#[test]
fn large_panel_passes_ingest() {
    let data = generate(&DgpConfig::large(2000)).unwrap();
    let mut buf = Vec::new();
    write_results_csv(&data.runs, &mut buf).unwrap();
    let parsed = parse_results(buf.as_slice(), &ColumnSchema::default()).unwrap();
    assert_eq!(parsed.len(), data.runs.len());
    let (mono, team) = split_by_discipline(&parsed);
    let linked = link_athletes(&mono, &team).unwrap();
    assert_eq!(linked.team_runs.len(), 4000);
    assert!(linked.exclusions.is_empty());
}

#[test]
fn affinity_independent_of_leader_given_assistant() {
    let truth = generate(&DgpConfig { seed: 9, ..DgpConfig::large(5000) }).unwrap().truth;
    let ys: Vec<f64> = truth.observations.iter().map(|o| o.true_y).collect();
    let bins = tercile_bins(&ys);
    for b in 1..=3u8 {
        let (a, x): (Vec<f64>, Vec<f64>) = truth
            .observations
            .iter()
            .zip(&bins)
            .filter(|(_, &k)| k == b)
            .map(|(o, _)| (o.true_a, o.true_x))
            .unzip();
        let r = pearson(&a, &x).unwrap();
        assert!(r.abs() < 0.05, "tercile {b}: corr {r}");
    }
}

#[test]
fn planted_monotonicity_without_noise() {
    let truth = generate(&DgpConfig { noise_sd: 0.0, seed: 2, ..DgpConfig::default() }).unwrap().truth;
    for a in &truth.observations {
        for b in &truth.observations {
            if a.task == b.task && a.true_x == b.true_x && a.true_y == b.true_y && a.true_a < b.true_a {
                assert!(a.h_observed < b.h_observed);
            }
        }
    }
}
