//! Kernel-weighted conditional CDF and its reference-quantile inverse.

use serde::{Deserialize, Serialize};

use super::kernel::{silverman_bandwidth, KernelKind, WEIGHT_CUTOFF};
use super::{AffinityError, Baseline, BandwidthRule, KernelConfig, TeamTaskObservation};
use crate::scalar::Scalar;
use crate::stats::{median, total_cmp};

/// Minimum number of observations in a (task, attempt) slice.
pub const MIN_SLICE_SIZE: usize = 5;

/// Which comparison the conditional-rank indicator uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    /// `1(h_i <= h_0)`: right-continuous, the slice maximum reaches 1.
    #[default]
    LessOrEqual,
    /// `1(h_i < h_0)`: the slice minimum reaches 0.
    Strict,
}

/// Kernel settings resolved against one slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedKernel<T> {
    pub kernel: KernelKind,
    pub bandwidth_x: T,
    pub bandwidth_y: T,
    pub baseline_y: T,
    /// Median leader-side input of the slice.
    pub median_x: T,
    pub indicator: Indicator,
}

impl<T: Scalar> ResolvedKernel<T> {
    pub fn resolve(slice: &[TeamTaskObservation<T>], cfg: &KernelConfig<T>) -> Result<Self, AffinityError> {
        cfg.validate()?;
        if slice.len() < MIN_SLICE_SIZE {
            return Err(AffinityError::InsufficientData { n: slice.len(), min: MIN_SLICE_SIZE });
        }
        let xs: Vec<T> = slice.iter().map(|o| o.x_input).collect();
        let ys: Vec<T> = slice.iter().map(|o| o.y_input).collect();
        let (bandwidth_x, bandwidth_y) = match cfg.bandwidth {
            BandwidthRule::Silverman => (silverman_bandwidth(&xs), silverman_bandwidth(&ys)),
            BandwidthRule::Manual { x, y } => (x, y),
        };
        let baseline_y = match cfg.baseline_y {
            Baseline::Median => median(&ys).expect("non-empty slice"),
            Baseline::Explicit(v) => v,
        };
        Ok(ResolvedKernel {
            kernel: cfg.kernel,
            bandwidth_x,
            bandwidth_y,
            baseline_y,
            median_x: median(&xs).expect("non-empty slice"),
            indicator: cfg.indicator,
        })
    }

    /// Product-kernel weight of `(x, y)` around the centre `(x0, y0)`.
    #[inline]
    pub fn weight(&self, x: T, y: T, x0: T, y0: T) -> T {
        let w = self.kernel.profile((x - x0) / self.bandwidth_x) * self.kernel.profile((y - y0) / self.bandwidth_y);
        if w < T::lit(WEIGHT_CUTOFF) {
            T::zero()
        } else {
            w
        }
    }

    #[inline]
    fn counts(&self, h: T, h0: T) -> bool {
        match self.indicator {
            Indicator::LessOrEqual => h <= h0,
            Indicator::Strict => h < h0,
        }
    }
}

/// Kernel-weighted empirical CDF of the output at `h0` given inputs `(x0, y0)`.
///
/// `exclude` drops one index from both sums (leave-one-out).
pub fn conditional_rank_in<T: Scalar>(
    h0: T,
    x0: T,
    y0: T,
    slice: &[TeamTaskObservation<T>],
    kernel: &ResolvedKernel<T>,
    exclude: Option<usize>,
) -> Result<T, AffinityError> {
    let mut num = T::zero();
    let mut den = T::zero();
    for (i, o) in slice.iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        let w = kernel.weight(o.x_input, o.y_input, x0, y0);
        den = den + w;
        if kernel.counts(o.h_output, h0) {
            num = num + w;
        }
    }
    if den < T::lit(WEIGHT_CUTOFF) {
        return Err(AffinityError::InsufficientSupport { total_weight: den.to_f64_lossy() });
    }
    Ok(num / den)
}

/// Conditional rank of `target` among the observations of its (task, attempt) slice.
pub fn conditional_rank<T: Scalar>(
    target: &TeamTaskObservation<T>,
    dataset: &[TeamTaskObservation<T>],
    cfg: &KernelConfig<T>,
) -> Result<T, AffinityError> {
    let slice: Vec<TeamTaskObservation<T>> =
        dataset.iter().filter(|o| o.slice() == target.slice()).cloned().collect();
    if slice.is_empty() {
        return Err(AffinityError::EmptyTaskSlice(target.slice()));
    }
    let kernel = ResolvedKernel::resolve(&slice, cfg)?;
    let exclude = if cfg.leave_one_out { slice.iter().position(|o| o == target) } else { None };
    conditional_rank_in(target.h_output, target.x_input, target.y_input, &slice, &kernel, exclude)
}

/// Weighted distribution of the output ratio `h / x` around a reference point,
/// with its quantile function tabulated on an equally spaced tau grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDistribution<T> {
    /// Ratios with positive weight, ascending.
    support: Vec<T>,
    /// Normalised cumulative weight at each support point; the last entry is 1.
    cumulative: Vec<T>,
    grid: Vec<T>,
}

impl<T: Scalar> ReferenceDistribution<T> {
    pub fn build(
        slice: &[TeamTaskObservation<T>],
        kernel: &ResolvedKernel<T>,
        x0: T,
        y0: T,
        grid_size: usize,
    ) -> Result<Self, AffinityError> {
        let mut weighted: Vec<(T, T)> = slice
            .iter()
            .filter_map(|o| {
                let w = kernel.weight(o.x_input, o.y_input, x0, y0);
                (w > T::zero()).then(|| (o.h_output / o.x_input, w))
            })
            .collect();
        let total: T = weighted.iter().map(|&(_, w)| w).sum();
        if weighted.is_empty() || total < T::lit(WEIGHT_CUTOFF) {
            return Err(AffinityError::InsufficientSupport { total_weight: total.to_f64_lossy() });
        }
        weighted.sort_by(|a, b| total_cmp(&a.0, &b.0));

        let mut support = Vec::with_capacity(weighted.len());
        let mut cumulative = Vec::with_capacity(weighted.len());
        let mut acc = T::zero();
        for (r, w) in weighted {
            acc = acc + w;
            support.push(r);
            cumulative.push(acc / total);
        }
        *cumulative.last_mut().expect("non-empty") = T::one();

        let mut dist = ReferenceDistribution { support, cumulative, grid: Vec::with_capacity(grid_size) };
        let last = T::from_usize_lossy(grid_size - 1);
        for j in 0..grid_size {
            let p = T::from_usize_lossy(j) / last;
            dist.grid.push(dist.exact_quantile(p));
        }
        Ok(dist)
    }

    /// Left-continuous inverse of the weighted CDF; `p = 0` gives the smallest
    /// supported ratio and `p = 1` the largest.
    pub fn exact_quantile(&self, p: T) -> T {
        if p <= T::zero() {
            return self.support[0];
        }
        let k = self.cumulative.partition_point(|&c| c < p);
        self.support[k.min(self.support.len() - 1)]
    }

    /// Weighted CDF at `v` (mass of ratios `<= v`).
    pub fn cdf(&self, v: T) -> T {
        let k = self.support.partition_point(|&r| r <= v);
        if k == 0 {
            T::zero()
        } else {
            self.cumulative[k - 1]
        }
    }

    /// Quantile at `tau` by linear interpolation between grid points.
    pub fn quantile(&self, tau: T) -> T {
        let tau = tau.max(T::zero()).min(T::one());
        let last = self.grid.len() - 1;
        let pos = tau * T::from_usize_lossy(last);
        let j = pos.floor().to_usize().unwrap_or(0).min(last);
        if j >= last {
            return self.grid[last];
        }
        let frac = pos - T::from_usize_lossy(j);
        self.grid[j] + frac * (self.grid[j + 1] - self.grid[j])
    }

    pub fn grid(&self) -> &[T] {
        &self.grid
    }

    pub fn support(&self) -> &[T] {
        &self.support
    }

    /// Width of the grid cell containing `tau`.
    pub fn grid_step_at(&self, tau: T) -> T {
        let last = self.grid.len() - 1;
        let pos = tau.max(T::zero()).min(T::one()) * T::from_usize_lossy(last);
        let j = pos.floor().to_usize().unwrap_or(0).min(last - 1);
        self.grid[j + 1] - self.grid[j]
    }
}

/// Quantile at `tau` of the reference distribution of `h / x` centred at
/// `(x_target, baseline_y)` within `slice`.
pub fn reference_quantile<T: Scalar>(
    tau: T,
    x_target: T,
    slice: &[TeamTaskObservation<T>],
    cfg: &KernelConfig<T>,
) -> Result<T, AffinityError> {
    if !(tau >= T::zero() && tau <= T::one()) {
        return Err(AffinityError::InvalidConfig(format!("tau {tau} outside [0, 1]")));
    }
    let kernel = ResolvedKernel::resolve(slice, cfg)?;
    let dist = ReferenceDistribution::build(slice, &kernel, x_target, kernel.baseline_y, cfg.quantile_grid_size)?;
    Ok(dist.quantile(tau))
}
