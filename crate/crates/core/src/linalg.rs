//! Dense least squares by Householder QR, generic over the scalar type.

use crate::scalar::Scalar;

/// Solution of `min ||X b - y||` for a column-major design.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares<T> {
    pub coefficients: Vec<T>,
    pub residuals: Vec<T>,
}

/// Returned when a column lies (numerically) in the span of earlier columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankDeficient {
    pub column: usize,
}

/// Solves a least-squares problem with `columns[j][i]` the entry of row `i`,
/// column `j`. Columns are scaled to unit norm before factorisation and a
/// column whose remaining norm falls below `rank_tol` is rejected.
pub fn lstsq<T: Scalar>(columns: &[Vec<T>], y: &[T], rank_tol: T) -> Result<LeastSquares<T>, RankDeficient> {
    let n = y.len();
    let p = columns.len();
    let mut scale = vec![T::one(); p];
    let mut a: Vec<Vec<T>> = columns
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let norm = c.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                scale[j] = norm;
            }
            c.iter().map(|&v| v / scale[j]).collect()
        })
        .collect();
    let mut qty = y.to_vec();

    for k in 0..p {
        if k >= n {
            return Err(RankDeficient { column: k });
        }
        let norm = a[k][k..].iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm < rank_tol {
            return Err(RankDeficient { column: k });
        }
        let alpha = if a[k][k] > T::zero() { -norm } else { norm };
        // v = x - alpha e1, stored in place of column k below the diagonal
        let mut v: Vec<T> = a[k][k..].to_vec();
        v[0] = v[0] - alpha;
        let vnorm2: T = v.iter().map(|&t| t * t).sum();
        if vnorm2 > T::zero() {
            let two = T::lit(2.0);
            for col in a.iter_mut().skip(k + 1) {
                let dot: T = v.iter().zip(&col[k..]).map(|(&vi, &ci)| vi * ci).sum();
                let f = two * dot / vnorm2;
                for (ci, &vi) in col[k..].iter_mut().zip(&v) {
                    *ci = *ci - f * vi;
                }
            }
            let dot: T = v.iter().zip(&qty[k..]).map(|(&vi, &qi)| vi * qi).sum();
            let f = two * dot / vnorm2;
            for (qi, &vi) in qty[k..].iter_mut().zip(&v) {
                *qi = *qi - f * vi;
            }
        }
        a[k][k] = alpha;
    }

    let mut b = vec![T::zero(); p];
    for k in (0..p).rev() {
        let mut s = qty[k];
        for j in k + 1..p {
            s = s - a[j][k] * b[j];
        }
        b[k] = s / a[k][k];
    }
    for (bj, sj) in b.iter_mut().zip(&scale) {
        *bj = *bj / *sj;
    }
    let residuals = (0..n)
        .map(|i| y[i] - columns.iter().zip(&b).map(|(c, &bj)| c[i] * bj).sum::<T>())
        .collect();
    Ok(LeastSquares { coefficients: b, residuals })
}
