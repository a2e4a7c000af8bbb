//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::collections::BTreeMap;
use std::panic;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use team_affinity::affinity::{
    conditional_rank_in, recover_efficiency, summarize_efficiency, KernelConfig, ReferenceDistribution, Recovery,
    ResolvedKernel, Slice, TeamTaskObservation,
};
use team_affinity::elasticity::{elasticity_at, fit_production_polynomial, EvaluationPoint, LeaderScaling, PolyOptions, PolyPoint};
use team_affinity::panel::{estimate_fixed_effects, Factor, FixedEffectSpec, Outcome, PanelError};
use team_affinity::pipeline::{run_pipeline, run_pipeline_until, PipelineConfig, Stage};
use team_affinity::report::{self, BinnedRun, CellKind, SkillBins, SkillDim};
use team_affinity::stats::{mean, spearman};
use team_affinity::synth::{generate, oracle_conditional_rank, DgpConfig, SkillLaw, SyntheticTruth};
use team_affinity::transform::positive_shift;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn by_slice(obs: &[TeamTaskObservation<f64>]) -> BTreeMap<Slice, Vec<TeamTaskObservation<f64>>> {
    let mut out: BTreeMap<Slice, Vec<_>> = BTreeMap::new();
    for o in obs {
        out.entry(o.slice()).or_default().push(o.clone());
    }
    out
}

fn oracle_panel(n: usize, seed: u64) -> SyntheticTruth {
    let cfg = DgpConfig { seed, ..DgpConfig::large(n) };
    generate(&cfg).expect("valid dgp").truth
}

/// 1. Spearman(a_raw, A) >= 0.90 per slice at n = 2000, under 120 s.
fn affinity_recovery() -> Check {
    let t0 = Instant::now();
    let truth = oracle_panel(2000, 1);
    let obs = truth.task_observations();
    let rec = recover_efficiency(&obs, &KernelConfig::default());
    let elapsed = t0.elapsed().as_secs_f64();
    let mut pairs: BTreeMap<Slice, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (e, t) in rec.estimates.iter().zip(&truth.observations) {
        let e = e.as_ref().ok_or("missing estimate")?;
        let p = pairs.entry(e.slice()).or_default();
        p.0.push(e.a_raw);
        p.1.push(t.true_a);
    }
    let mut worst = f64::INFINITY;
    let mut parts = Vec::new();
    for (slice, (a, truth_a)) in &pairs {
        if a.len() != 2000 {
            return Err(format!("{slice} has {} observations", a.len()));
        }
        let rho = spearman(a, truth_a).ok_or("spearman undefined")?;
        worst = worst.min(rho);
        parts.push(format!("{slice}={rho:.3}"));
    }

    // the same panel through ingest and fixed effects, for reference only
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = PipelineConfig {
        synth: DgpConfig { seed: 1, ..DgpConfig::large(2000) },
        out_dir: Some(dir.path().to_path_buf()),
        ..PipelineConfig::default()
    };
    let full = run_pipeline_until(&cfg, Stage::Estimate).map_err(|e| e.to_string())?;
    let true_a: BTreeMap<_, f64> = truth
        .observations
        .iter()
        .map(|o| ((o.team_id.clone(), o.event_id.clone(), o.task, o.attempt), o.true_a))
        .collect();
    let (est, tru): (Vec<f64>, Vec<f64>) =
        full.estimates.iter().map(|e| (e.a_raw, true_a[&(e.team_id.clone(), e.event_id.clone(), e.task, e.attempt)])).unzip();
    let pipeline_rho = spearman(&est, &tru).unwrap_or(f64::NAN);

    ensure(
        worst >= 0.90 && elapsed < 120.0,
        format!("min Spearman {worst:.3} ({}), {elapsed:.1}s; via estimated skills and residuals {pipeline_rho:.3}", parts.join(", ")),
    )
}

/// 2. Kernel vs cell-exact conditional rank on a gridded panel, RMSE < 0.05.
fn kernel_vs_oracle() -> Check {
    let grid = SkillLaw::Grid { values: vec![0.5, 0.875, 1.25, 1.625, 2.0] };
    let cfg = DgpConfig { skill_law_x: grid.clone(), skill_law_y: grid, seed: 2, ..DgpConfig::large(5000) };
    let obs = generate(&cfg).map_err(|e| e.to_string())?.truth.task_observations();
    let kcfg = KernelConfig::default();
    let mut sq = 0.0;
    let mut n = 0usize;
    let mut skipped = 0usize;
    let mut parts = Vec::new();
    for (slice, members) in by_slice(&obs) {
        let kernel = ResolvedKernel::resolve(&members, &kcfg).map_err(|e| e.to_string())?;
        let mut slice_sq = 0.0;
        let mut slice_n = 0usize;
        for o in &members {
            let Ok(oracle) = oracle_conditional_rank(o, &members) else {
                skipped += 1;
                continue;
            };
            let tau = conditional_rank_in(o.h_output, o.x_input, o.y_input, &members, &kernel, None).map_err(|e| e.to_string())?;
            slice_sq += (tau - oracle).powi(2);
            slice_n += 1;
        }
        parts.push(format!("{slice}={:.4}", (slice_sq / slice_n as f64).sqrt()));
        sq += slice_sq;
        n += slice_n;
    }
    let rmse = (sq / n as f64).sqrt();
    ensure(rmse < 0.05 && n > 15_000, format!("RMSE {rmse:.4} over {n} observations ({}), {skipped} in sparse cells", parts.join(", ")))
}

/// 3. Mean elasticities near (0.4, 0.6) and summing to about 1.
fn elasticity_recovery() -> Check {
    let truth = oracle_panel(2000, 3);
    let mut by: BTreeMap<Slice, Vec<EvaluationPoint<f64>>> = BTreeMap::new();
    for o in &truth.observations {
        let s = Slice::new(o.task, o.attempt);
        by.entry(s).or_default().push(EvaluationPoint { ax: o.true_a * o.true_x, y: o.true_y, x: o.true_x, h: o.h_observed });
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for (slice, points) in &by {
        let poly: Vec<PolyPoint<f64>> = points.iter().map(|p| PolyPoint { ax: p.ax, y: p.y, h: p.h }).collect();
        let fit = fit_production_polynomial(&poly, Some(*slice), PolyOptions::default()).map_err(|e| e.to_string())?;
        let el: Vec<_> = points
            .iter()
            .map(|&p| elasticity_at(&fit, p, LeaderScaling::ChainRule))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let ex = mean(&el.iter().map(|e| e.elasticity_x).collect::<Vec<_>>()).unwrap();
        let ey = mean(&el.iter().map(|e| e.elasticity_y).collect::<Vec<_>>()).unwrap();
        ok &= (0.35..=0.45).contains(&ex) && (0.55..=0.65).contains(&ey) && (0.95..=1.05).contains(&(ex + ey));
        parts.push(format!("{slice}: x={ex:.3} y={ey:.3} sum={:.3} R2={:.4}", ex + ey, fit.r_squared));
    }
    ensure(ok, parts.join("; "))
}

/// 4. Planted three-way design recovered exactly; agreement with the dense solver.
fn fe_exactness() -> Check {
    let spec: FixedEffectSpec<f64> = FixedEffectSpec::new(Outcome::Finish, vec![Factor::Athlete, Factor::Event, Factor::StartingOrder]);
    let planted = common::planted_design(4, 500, [30, 15, 12], 0.0);
    let fit = estimate_fixed_effects(&planted.rows, &spec).and_then(|f| f.require_converged()).map_err(|e| e.to_string())?;
    let mut sq = 0.0;
    let mut k = 0;
    for (f, fe) in fit.factors.iter().enumerate() {
        let prefix = ["a", "b", "c"][f];
        let base = fe.effects[&format!("{prefix}0")];
        for (level, &e) in &fe.effects {
            let code: usize = level[1..].parse().unwrap();
            sq += (e - base - (planted.effects[f][code] - planted.effects[f][0])).powi(2);
            k += 1;
        }
    }
    let planted_rmse = (sq / k as f64).sqrt();

    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for seed in 0..40u64 {
        let n = 30 + (seed as usize * 17) % 171;
        let p = common::planted_design(100 + seed, n, [7, 5, 4], 0.25);
        let dense = common::dense_fe(&p.rows);
        match estimate_fixed_effects(&p.rows, &spec) {
            Ok(fit) => {
                if dense.rank < dense.n_params {
                    return Err(format!("seed {seed}: rank-deficient design accepted"));
                }
                for ((row, e), d) in p.rows.iter().zip(&fit.residuals).zip(&dense.fitted) {
                    worst = worst.max((row.outcome - e - d).abs());
                }
                for (fe, oracle) in fit.factors.iter().zip(&dense.contrasts) {
                    for (level, &c) in oracle {
                        worst = worst.max((fe.effects[level] - fe.effects[0] - c).abs());
                    }
                }
                compared += 1;
            }
            Err(PanelError::DegenerateDesign(_)) if dense.rank < dense.n_params || n <= dense.n_params => {}
            Err(e) => return Err(format!("seed {seed}: {e}")),
        }
    }
    ensure(
        planted_rmse < 1e-8 && worst < 1e-7 && compared >= 30,
        format!("planted contrast RMSE {planted_rmse:.2e}; max deviation from dense solve {worst:.2e} over {compared} designs"),
    )
}

/// 5. Floor hit bit-exactly and order fully reversed.
fn transform_contracts() -> Check {
    let mut worst_rho: f64 = -1.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 3.0).unwrap();
        let source: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng)).collect();
        let shifted = positive_shift(&source, 1e-6).map_err(|e| e.to_string())?;
        let min = shifted.values.iter().copied().fold(f64::INFINITY, f64::min);
        if min.to_bits() != 1e-6_f64.to_bits() {
            return Err(format!("seed {seed}: minimum {min:e}"));
        }
        worst_rho = worst_rho.max(spearman(&source, &shifted.values).unwrap());
    }
    ensure((worst_rho + 1.0).abs() < 1e-12, format!("floor exact on 10 seeds; max rank correlation {worst_rho}"))
}

/// 6. Monotonicity, inversion and scale invariance on 20 seeds.
fn cdf_properties() -> Check {
    let cfg = KernelConfig::default();
    let mut checks = 0usize;
    for seed in 0..20u64 {
        let obs = generate(&DgpConfig { seed, ..DgpConfig::default() }).map_err(|e| e.to_string())?.truth.task_observations();
        for (slice, members) in by_slice(&obs) {
            let tag = format!("seed {seed} {slice}");
            let kernel = ResolvedKernel::resolve(&members, &cfg).map_err(|e| e.to_string())?;
            let mut hs: Vec<f64> = members.iter().map(|o| o.h_output).collect();
            hs.sort_by(f64::total_cmp);
            for target in members.iter().step_by(9) {
                let mut prev = 0.0;
                for &h in &hs {
                    let tau = conditional_rank_in(h, target.x_input, target.y_input, &members, &kernel, None).map_err(|e| e.to_string())?;
                    if tau < prev {
                        return Err(format!("{tag}: tau decreased in h"));
                    }
                    prev = tau;
                    checks += 1;
                }
            }

            let dist = ReferenceDistribution::build(&members, &kernel, kernel.median_x, kernel.baseline_y, cfg.quantile_grid_size)
                .map_err(|e| e.to_string())?;
            let mut prev = f64::NEG_INFINITY;
            for j in 0..=500 {
                let q = dist.quantile(j as f64 / 500.0);
                if q < prev {
                    return Err(format!("{tag}: quantile decreased in tau"));
                }
                prev = q;
            }
            for &v in dist.support() {
                let tau = dist.cdf(v);
                if (dist.quantile(tau) - v).abs() > dist.grid_step_at(tau) * (1.0 + 1e-12) {
                    return Err(format!("{tag}: round trip of {v} off by more than a grid step"));
                }
                checks += 1;
            }

            let base = recover_efficiency(&members, &cfg).complete().map_err(|e| e.to_string())?;
            for c in [0.1, 10.0] {
                let scaled: Vec<_> = members.iter().map(|o| TeamTaskObservation { h_output: o.h_output * c, ..o.clone() }).collect();
                let other = recover_efficiency(&scaled, &cfg).complete().map_err(|e| e.to_string())?;
                for (a, b) in base.iter().zip(&other) {
                    if (a.tau - b.tau).abs() > 1e-12 {
                        return Err(format!("{tag}: tau changed under scaling by {c}"));
                    }
                    checks += 1;
                }
            }
        }
    }
    Ok(format!("{checks} property checks on 20 seeds"))
}

fn normalization_of(rec: &Recovery<f64>) -> Result<(f64, f64), String> {
    let mut worst_min: f64 = 0.0;
    let mut worst_anchor: f64 = 0.0;
    for report in &rec.slices {
        let vals: Vec<f64> = rec.estimates.iter().flatten().filter(|e| e.slice() == report.slice).map(|e| e.a_normalized).collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        worst_min = worst_min.max((min - 1.0).abs());
        worst_anchor = worst_anchor.max((report.scale.apply(report.scale.anchor_raw) - 100.0).abs());
        if report.scale.degenerate {
            return Err(format!("{} degenerate", report.slice));
        }
    }
    Ok((worst_min, worst_anchor))
}

/// 7. Min = 1 and anchor = 100 in every slice.
fn normalization_contract() -> Check {
    let mut worst = (0.0f64, 0.0f64);
    let mut slices = 0;
    for seed in 0..5u64 {
        let obs = generate(&DgpConfig { seed, ..DgpConfig::default() }).map_err(|e| e.to_string())?.truth.task_observations();
        let rec = recover_efficiency(&obs, &KernelConfig::default());
        let (m, a) = normalization_of(&rec)?;
        worst = (worst.0.max(m), worst.1.max(a));
        slices += rec.slices.len();
    }
    ensure(
        worst.0 < 1e-9 && worst.1 < 1e-9 && slices == 20,
        format!("{slices} slices; max |min - 1| {:.1e}, max |anchor - 100| {:.1e}", worst.0, worst.1),
    )
}

fn fixture(counts: [[usize; 3]; 3], p1_dim: SkillDim, p2_dim: SkillDim) -> Vec<BinnedRun> {
    let mut runs = Vec::new();
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            for _ in 0..c {
                let mut p1 = SkillBins { start: 1, riding: 1 };
                let mut p2 = SkillBins { start: 1, riding: 1 };
                match p1_dim {
                    SkillDim::Start => p1.start = i as u8 + 1,
                    SkillDim::Riding => p1.riding = i as u8 + 1,
                }
                match p2_dim {
                    SkillDim::Start => p2.start = j as u8 + 1,
                    SkillDim::Riding => p2.riding = j as u8 + 1,
                }
                runs.push(BinnedRun { p1, p2, value: 0.0 });
            }
        }
    }
    runs
}

/// 8. Crafted fixtures reproduce the published pairing rows; summary column set.
fn report_fidelity() -> Check {
    let within = pairing_row(fixture([[31, 7, 15], [7, 19, 27], [15, 27, 12]], SkillDim::Start, SkillDim::Start), false);
    let cross = pairing_row(fixture([[18, 19, 16], [11, 8, 34], [24, 26, 4]], SkillDim::Start, SkillDim::Riding), true);
    let obs = generate(&DgpConfig::default()).map_err(|e| e.to_string())?.truth.task_observations();
    let est = recover_efficiency(&obs, &KernelConfig::default()).complete().map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    report::write_csv(&summarize_efficiency(&est), &mut buf).map_err(|e| e.to_string())?;
    let text = String::from_utf8(buf).map_err(|e| e.to_string())?;
    let header = text.lines().next().unwrap_or_default().to_string();
    let rows: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap_or_default()).collect();
    let labels_ok = rows
        == [
            "Start-phase (1st attempt)",
            "Start-phase (2nd attempt)",
            "Riding-phase (1st attempt)",
            "Riding-phase (2nd attempt)",
        ];
    ensure(
        within == [31, 7, 15] && cross == [18, 19, 16] && header == "slice,N,Mean,SD,Min,Max" && labels_ok,
        format!("within-phase row 1 {within:?}; cross-phase row 1 {cross:?}; header `{header}`"),
    )
}

fn pairing_row(runs: Vec<BinnedRun>, cross: bool) -> [u64; 3] {
    let tab = if cross {
        report::cross_skill_crosstab(&runs, CellKind::Count).0
    } else {
        report::pairing_crosstab(&runs, SkillDim::Start, CellKind::Count)
    };
    tab.counts().expect("count table")[0]
}

/// 9. Two full runs with the same seed give identical artifact hashes.
fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let run = |dir: &std::path::Path| {
        let cfg = PipelineConfig { seed: Some(42), out_dir: Some(dir.to_path_buf()), ..PipelineConfig::default() };
        run_pipeline(&cfg).map_err(|e| e.to_string()).map(|o| o.manifest.expect("manifest"))
    };
    let (m1, m2) = (run(a.path())?, run(b.path())?);
    ensure(
        m1.complete && m1.artifacts.len() >= 8 && m1.hashes() == m2.hashes(),
        format!("{} artifacts, hashes identical: {}", m1.artifacts.len(), m1.hashes() == m2.hashes()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("oracle affinity recovery", affinity_recovery),
        ("kernel vs brute-force conditional rank", kernel_vs_oracle),
        ("elasticity recovery", elasticity_recovery),
        ("fixed-effects exactness", fe_exactness),
        ("transform contracts", transform_contracts),
        ("CDF/quantile properties", cdf_properties),
        ("normalization contract", normalization_contract),
        ("report fidelity", report_fidelity),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let result = panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
