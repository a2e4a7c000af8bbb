use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::stats::sample_sd;

/// Product-kernel weights below this are treated as zero. Both kernels peak
/// at 1, so the cut is relative to the weight of an exact match.
pub const WEIGHT_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Gaussian,
    Epanechnikov,
}

impl KernelKind {
    /// Unnormalised kernel profile; normalising constants cancel in every
    /// ratio the estimators form.
    #[inline]
    pub fn profile<T: Scalar>(self, u: T) -> T {
        match self {
            KernelKind::Gaussian => (-(u * u) / T::lit(2.0)).exp(),
            KernelKind::Epanechnikov => {
                let v = T::one() - u * u;
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(KernelKind::Gaussian),
            "epanechnikov" => Ok(KernelKind::Epanechnikov),
            _ => Err(format!("unknown kernel `{s}`")),
        }
    }
}

/// Silverman's rule of thumb, `1.06 * sd * n^(-1/5)`.
///
/// A constant sample has no spread to scale by; it gets bandwidth 1, which
/// gives every point equal weight.
pub fn silverman_bandwidth<T: Scalar>(values: &[T]) -> T {
    let n = values.len();
    let sd = sample_sd(values).unwrap_or_else(T::zero);
    if n < 2 || !(sd > T::zero()) {
        return T::one();
    }
    T::lit(1.06) * sd * T::from_usize_lossy(n).powf(T::lit(-0.2))
}
