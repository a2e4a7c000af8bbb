//! Small descriptive-statistics helpers used across the pipeline.

use std::cmp::Ordering;

use crate::scalar::Scalar;

pub fn mean<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let total: T = values.iter().copied().sum();
    Some(total / T::from_usize_lossy(values.len()))
}

/// Sample standard deviation (n - 1 denominator); zero for a single value.
pub fn sample_sd<T: Scalar>(values: &[T]) -> Option<T> {
    let m = mean(values)?;
    if values.len() < 2 {
        return Some(T::zero());
    }
    let ss: T = values.iter().map(|&v| (v - m) * (v - m)).sum();
    Some((ss / T::from_usize_lossy(values.len() - 1)).sqrt())
}

/// Median, averaging the two middle order statistics for even lengths.
pub fn median<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        Some(sorted[n / 2])
    } else {
        Some((sorted[n / 2 - 1] + sorted[n / 2]) / T::lit(2.0))
    }
}

pub fn min_max<T: Scalar>(values: &[T]) -> Option<(T, T)> {
    let first = *values.first()?;
    Some(values.iter().fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))))
}

/// Ordering for sorting floats; NaN sorts last.
pub fn total_cmp<T: Scalar>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).unwrap_or_else(|| match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        _ => Ordering::Less,
    })
}

/// Mid-ranks (1-based), ties receive the average of their positions.
pub fn ranks<T: Scalar>(values: &[T]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| total_cmp(&values[a], &values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            out[k] = avg;
        }
        i = j;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = mean(a)?;
    let mb = mean(b)?;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation with mid-rank tie handling.
pub fn spearman<T: Scalar>(a: &[T], b: &[T]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    pearson(&ranks(a), &ranks(b))
}
