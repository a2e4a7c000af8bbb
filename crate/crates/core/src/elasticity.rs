//! Quadratic production surface and output elasticities.
//!
//! Output is projected on `{ax, ax*y, y, ax^2, y^2}` where `ax` is the
//! effective leader input (efficiency times skill). No intercept by default.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::Slice;
use crate::linalg::lstsq;
use crate::scalar::Scalar;
use crate::stats::mean;

pub const N_COEFFICIENTS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ElasticityError {
    #[error("need at least {min} points, got {n}")]
    TooFewPoints { n: usize, min: usize },
    #[error("regressor `{0}` is collinear with the others")]
    RankDeficient(&'static str),
    #[error("output must be positive to take logs (got {0})")]
    NonPositiveOutput(f64),
    #[error("point {0} has a non-finite component")]
    NonFinite(usize),
}

const REGRESSOR_NAMES: [&str; 6] = ["ax", "ax*y", "y", "ax^2", "y^2", "intercept"];

/// Which multiplier turns the derivative in `ax` into a leader elasticity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderScaling {
    /// `dm/d(ax) * ax / h`, the log-derivative in the effective input.
    #[default]
    ChainRule,
    /// `dm/d(ax) * x / h`, omitting the efficiency factor.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PolyOptions {
    pub intercept: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyPoint<T> {
    pub ax: T,
    pub y: T,
    pub h: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit<T> {
    /// Coefficients on `ax`, `ax*y`, `y`, `ax^2`, `y^2`.
    pub beta: [T; N_COEFFICIENTS],
    /// Present only when fitted with an intercept.
    pub intercept: Option<T>,
    pub r_squared: T,
    pub n_obs: usize,
    pub slice: Option<Slice>,
}

impl<T: Scalar> PolyFit<T> {
    pub fn predict(&self, ax: T, y: T) -> T {
        let [b1, b2, b3, b4, b5] = self.beta;
        self.intercept.unwrap_or_else(T::zero) + b1 * ax + b2 * ax * y + b3 * y + b4 * ax * ax + b5 * y * y
    }

    /// `dm / d(ax)`.
    pub fn d_ax(&self, ax: T, y: T) -> T {
        let [b1, b2, _, b4, _] = self.beta;
        b1 + b2 * y + T::lit(2.0) * b4 * ax
    }

    /// `dm / dy`.
    pub fn d_y(&self, ax: T, y: T) -> T {
        let [_, b2, b3, _, b5] = self.beta;
        b2 * ax + b3 + T::lit(2.0) * b5 * y
    }
}

fn regressors<T: Scalar>(points: &[PolyPoint<T>], intercept: bool) -> Vec<Vec<T>> {
    let mut cols = vec![
        points.iter().map(|p| p.ax).collect(),
        points.iter().map(|p| p.ax * p.y).collect(),
        points.iter().map(|p| p.y).collect(),
        points.iter().map(|p| p.ax * p.ax).collect(),
        points.iter().map(|p| p.y * p.y).collect(),
    ];
    if intercept {
        cols.push(vec![T::one(); points.len()]);
    }
    cols
}

/// Ordinary least squares of `h` on the quadratic terms.
///
/// `r_squared` is `1 - SSR / SST` with `SST` taken about the mean of `h`,
/// clamped to `[0, 1]`.
pub fn fit_production_polynomial<T: Scalar>(
    points: &[PolyPoint<T>],
    slice: Option<Slice>,
    options: PolyOptions,
) -> Result<PolyFit<T>, ElasticityError> {
    let k = N_COEFFICIENTS + usize::from(options.intercept);
    if points.len() < k + 1 {
        return Err(ElasticityError::TooFewPoints { n: points.len(), min: k + 1 });
    }
    if let Some(i) = points.iter().position(|p| !(p.ax.is_finite() && p.y.is_finite() && p.h.is_finite())) {
        return Err(ElasticityError::NonFinite(i));
    }
    let cols = regressors(points, options.intercept);
    let h: Vec<T> = points.iter().map(|p| p.h).collect();
    let rank_tol = T::lit(1e-9).max(T::epsilon() * T::lit(1e3));
    let ls = lstsq(&cols, &h, rank_tol).map_err(|e| ElasticityError::RankDeficient(REGRESSOR_NAMES[e.column]))?;

    let h_mean = mean(&h).expect("non-empty");
    let sst: T = h.iter().map(|&v| (v - h_mean) * (v - h_mean)).sum();
    let ssr: T = ls.residuals.iter().map(|&r| r * r).sum();
    let r_squared = if sst > T::zero() { (T::one() - ssr / sst).max(T::zero()).min(T::one()) } else { T::one() };

    let c = &ls.coefficients;
    Ok(PolyFit {
        beta: [c[0], c[1], c[2], c[3], c[4]],
        intercept: options.intercept.then(|| c[5]),
        r_squared,
        n_obs: points.len(),
        slice,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationPoint<T> {
    pub ax: T,
    pub y: T,
    pub x: T,
    pub h: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticityPoint<T> {
    pub team_id: String,
    pub slice: Option<Slice>,
    pub elasticity_x: T,
    pub elasticity_y: T,
    pub evaluated_at: EvaluationPoint<T>,
}

pub fn elasticity_at<T: Scalar>(
    fit: &PolyFit<T>,
    point: EvaluationPoint<T>,
    scaling: LeaderScaling,
) -> Result<ElasticityPoint<T>, ElasticityError> {
    if !(point.h > T::zero()) {
        return Err(ElasticityError::NonPositiveOutput(point.h.to_f64_lossy()));
    }
    let leader = match scaling {
        LeaderScaling::ChainRule => point.ax,
        LeaderScaling::Literal => point.x,
    };
    Ok(ElasticityPoint {
        team_id: String::new(),
        slice: fit.slice,
        elasticity_x: fit.d_ax(point.ax, point.y) * leader / point.h,
        elasticity_y: fit.d_y(point.ax, point.y) * point.y / point.h,
        evaluated_at: point,
    })
}

/// Component-wise mean of the evaluation points.
pub fn mean_point<T: Scalar>(points: &[EvaluationPoint<T>]) -> Option<EvaluationPoint<T>> {
    let col = |f: fn(&EvaluationPoint<T>) -> T| mean(&points.iter().map(f).collect::<Vec<_>>());
    Some(EvaluationPoint { ax: col(|p| p.ax)?, y: col(|p| p.y)?, x: col(|p| p.x)?, h: col(|p| p.h)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BETA: [f64; 5] = [1.0, 0.5, 2.0, -0.1, -0.2];

    fn quadratic(ax: f64, y: f64) -> f64 {
        BETA[0] * ax + BETA[1] * ax * y + BETA[2] * y + BETA[3] * ax * ax + BETA[4] * y * y
    }

    fn grid_points() -> Vec<PolyPoint<f64>> {
        let mut pts = Vec::new();
        for i in 0..6 {
            for j in 0..5 {
                let ax = 0.5 + 0.3 * i as f64;
                let y = 0.4 + 0.35 * j as f64;
                pts.push(PolyPoint { ax, y, h: quadratic(ax, y) });
            }
        }
        pts
    }

    #[test]
    fn exact_quadratic_recovered() {
        let fit = fit_production_polynomial(&grid_points(), None, PolyOptions::default()).unwrap();
        for (b, t) in fit.beta.iter().zip(BETA) {
            assert!((b - t).abs() < 1e-8, "{b} vs {t}");
        }
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(fit.n_obs, 30);
    }

    #[test]
    fn constant_assistant_input_is_rank_deficient() {
        let pts: Vec<_> = (0..10).map(|i| PolyPoint { ax: 0.5 + i as f64 * 0.1, y: 1.3, h: 1.0 + i as f64 }).collect();
        assert!(matches!(
            fit_production_polynomial(&pts, None, PolyOptions::default()),
            Err(ElasticityError::RankDeficient(_))
        ));
    }

    #[test]
    fn too_few_points() {
        let pts = &grid_points()[..5];
        assert_eq!(
            fit_production_polynomial(pts, None, PolyOptions::default()),
            Err(ElasticityError::TooFewPoints { n: 5, min: 6 })
        );
    }

    #[test]
    fn linear_single_input_elasticities() {
        let fit = PolyFit { beta: [1.0, 0.0, 0.0, 0.0, 0.0], intercept: None, r_squared: 1.0, n_obs: 6, slice: None };
        let e = elasticity_at(&fit, EvaluationPoint { ax: 2.0, y: 1.0, x: 1.0, h: 2.0 }, LeaderScaling::ChainRule)
            .unwrap();
        assert_eq!(e.elasticity_x, 1.0);
        assert_eq!(e.elasticity_y, 0.0);
        let lit = elasticity_at(&fit, EvaluationPoint { ax: 2.0, y: 1.0, x: 1.0, h: 2.0 }, LeaderScaling::Literal)
            .unwrap();
        assert_eq!(lit.elasticity_x, 0.5);
    }

    #[test]
    fn non_positive_output_rejected() {
        let fit = PolyFit { beta: [1.0, 0.0, 0.0, 0.0, 0.0], intercept: None, r_squared: 1.0, n_obs: 6, slice: None };
        let p = EvaluationPoint { ax: 1.0, y: 1.0, x: 1.0, h: 0.0 };
        assert_eq!(elasticity_at(&fit, p, LeaderScaling::ChainRule), Err(ElasticityError::NonPositiveOutput(0.0)));
    }

    #[test]
    fn intercept_variant() {
        let pts: Vec<_> = grid_points().into_iter().map(|p| PolyPoint { h: p.h + 3.0, ..p }).collect();
        let fit = fit_production_polynomial(&pts, None, PolyOptions { intercept: true }).unwrap();
        assert!((fit.intercept.unwrap() - 3.0).abs() < 1e-8);
        assert!((fit.beta[2] - 2.0).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn residuals_orthogonal_to_regressors(seed in 0u64..1000) {
            // deterministic pseudo-noise from the seed
            let pts: Vec<_> = grid_points()
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    let u = (((i as u64 + 1) * (seed + 7) * 2_654_435_761) % 1000) as f64 / 1000.0 - 0.5;
                    PolyPoint { h: p.h + 0.1 * u, ..p }
                })
                .collect();
            let fit = fit_production_polynomial(&pts, None, PolyOptions::default()).unwrap();
            let cols = regressors(&pts, false);
            let resid: Vec<f64> = pts.iter().map(|p| p.h - fit.predict(p.ax, p.y)).collect();
            for c in &cols {
                let dot: f64 = c.iter().zip(&resid).map(|(a, b)| a * b).sum();
                prop_assert!(dot.abs() < 1e-8, "dot {}", dot);
            }
        }

        #[test]
        fn elasticities_exact_for_quadratic_data(ax in 0.5_f64..2.0, y in 0.5_f64..2.0) {
            let fit = fit_production_polynomial(&grid_points(), None, PolyOptions::default()).unwrap();
            let h = quadratic(ax, y);
            let e = elasticity_at(&fit, EvaluationPoint { ax, y, x: ax, h }, LeaderScaling::ChainRule).unwrap();
            let ex = (BETA[0] + BETA[1] * y + 2.0 * BETA[3] * ax) * ax / h;
            let ey = (BETA[1] * ax + BETA[2] + 2.0 * BETA[4] * y) * y / h;
            prop_assert!((e.elasticity_x - ex).abs() < 1e-8);
            prop_assert!((e.elasticity_y - ey).abs() < 1e-8);
        }
    }
}
