#![allow(dead_code)]

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use team_affinity::panel::FeObservation;

/// Dense least-squares solution of the dummy-coded fixed-effects model.
pub struct DenseFe {
    pub fitted: Vec<f64>,
    /// Per factor: level -> effect relative to the first-seen level.
    pub contrasts: Vec<IndexMap<String, f64>>,
    pub rank: usize,
    pub n_params: usize,
}

/// Intercept plus `L_f - 1` indicator columns per factor, solved by SVD.
pub fn dense_fe(rows: &[FeObservation<f64>]) -> DenseFe {
    let k = rows[0].levels.len();
    let mut levels: Vec<IndexMap<String, usize>> = vec![IndexMap::new(); k];
    for r in rows {
        for (f, l) in r.levels.iter().enumerate() {
            let next = levels[f].len();
            levels[f].entry(l.clone()).or_insert(next);
        }
    }
    let mut offsets = vec![1usize];
    for m in &levels {
        offsets.push(offsets.last().unwrap() + m.len() - 1);
    }
    let p = *offsets.last().unwrap();
    let n = rows.len();
    let mut x = DMatrix::<f64>::zeros(n, p);
    for (i, r) in rows.iter().enumerate() {
        x[(i, 0)] = 1.0;
        for (f, l) in r.levels.iter().enumerate() {
            let code = levels[f][l];
            if code > 0 {
                x[(i, offsets[f] + code - 1)] = 1.0;
            }
        }
    }
    let y = DVector::from_iterator(n, rows.iter().map(|r| r.outcome));
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > smax * 1e-10).count();
    let beta = svd.solve(&y, smax * 1e-10).expect("svd solve");
    let fitted = (&x * &beta).iter().copied().collect();
    let contrasts = levels
        .iter()
        .enumerate()
        .map(|(f, m)| {
            m.iter()
                .map(|(l, &code)| (l.clone(), if code == 0 { 0.0 } else { beta[offsets[f] + code - 1] }))
                .collect()
        })
        .collect();
    DenseFe { fitted, contrasts, rank, n_params: p }
}

/// Random three-factor design with planted effects and optional noise.
pub struct Planted {
    pub rows: Vec<FeObservation<f64>>,
    pub effects: Vec<Vec<f64>>,
}

pub fn planted_design(seed: u64, n: usize, sizes: [usize; 3], noise_sd: f64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let effects: Vec<Vec<f64>> = sizes.iter().map(|&s| (0..s).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let rows = (0..n)
        .map(|i| {
            // cycle the first levels so every level of every factor appears
            let codes = [i % sizes[0], rng.random_range(0..sizes[1]), if i < sizes[2] { i } else { rng.random_range(0..sizes[2]) }];
            let noise = if noise_sd > 0.0 { noise_sd * (rng.random::<f64>() - 0.5) * 3.46 } else { 0.0 };
            FeObservation {
                outcome: 3.0 + (0..3).map(|f| effects[f][codes[f]]).sum::<f64>() + noise,
                levels: (0..3).map(|f| format!("{}{}", ["a", "b", "c"][f], codes[f])).collect(),
            }
        })
        .collect();
    Planted { rows, effects }
}
