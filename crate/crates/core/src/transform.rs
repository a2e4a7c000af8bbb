//! Order-reversing positive shift and tercile binning.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::stats::total_cmp;

pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("cannot shift an empty series")]
    Empty,
    #[error("value at index {0} is not finite")]
    NonFinite(usize),
    #[error("floor must be positive")]
    NonPositiveFloor,
}

/// A "lower is better" series mapped onto positive "higher is better" values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftedSeries<T> {
    pub values: Vec<T>,
    /// `min(-source)`, subtracted after negation.
    pub shift_constant: T,
    pub floor: T,
    pub source_tag: String,
}

/// `shifted_i = -source_i - min(-source) + floor`.
///
/// The largest source value lands exactly on `floor`.
pub fn positive_shift<T: Scalar>(source: &[T], floor: T) -> Result<ShiftedSeries<T>, TransformError> {
    if source.is_empty() {
        return Err(TransformError::Empty);
    }
    if !(floor > T::zero()) {
        return Err(TransformError::NonPositiveFloor);
    }
    if let Some(i) = source.iter().position(|v| !v.is_finite()) {
        return Err(TransformError::NonFinite(i));
    }
    let shift_constant = source.iter().map(|&v| -v).fold(T::infinity(), T::min);
    let values = source.iter().map(|&v| (-v - shift_constant) + floor).collect();
    Ok(ShiftedSeries { values, shift_constant, floor, source_tag: String::new() })
}

pub fn positive_shift_tagged<T: Scalar>(
    source: &[T],
    floor: T,
    tag: impl Into<String>,
) -> Result<ShiftedSeries<T>, TransformError> {
    let mut s = positive_shift(source, floor)?;
    s.source_tag = tag.into();
    Ok(s)
}

/// Tercile bin (1 = lowest third, 3 = highest) of each value.
///
/// Cut points are the order statistics at ranks `ceil(n/3)` and `ceil(2n/3)`;
/// a value equal to a cut point goes to the lower bin.
pub fn tercile_bins<T: Scalar>(skills: &[T]) -> Vec<u8> {
    let n = skills.len();
    if n == 0 {
        return Vec::new();
    }
    let mut sorted = skills.to_vec();
    sorted.sort_by(total_cmp);
    let lower = sorted[n.div_ceil(3) - 1];
    let upper = sorted[(2 * n).div_ceil(3) - 1];
    skills
        .iter()
        .map(|&v| if v <= lower { 1 } else if v <= upper { 2 } else { 3 })
        .collect()
}
