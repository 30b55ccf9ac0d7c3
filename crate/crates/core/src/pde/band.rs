//! Banded LU factorization with partial pivoting.
//!
//! The interior operator of a structured-grid elliptic problem is banded when
//! nodes are numbered lexicographically; a band factorization with row
//! pivoting handles the indefinite potentials admitted by the a-priori class.

use crate::scalar::{lit, tiny, Scalar};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("near-zero pivot {pivot:e} at elimination step {step}")]
pub struct SingularFactor {
    pub pivot: f64,
    pub step: usize,
}

/// Band matrix in LAPACK general-band layout with `kl` extra rows for fill:
/// entry `(i, j)` lives at row `kl + ku + i - j` of column `j`.
pub struct BandedMatrix<T> {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    data: Vec<T>,
}

impl<T: Scalar> BandedMatrix<T> {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self { n, kl, ku, ldab, data: vec![T::zero(); ldab * n] }
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(i + self.ku + self.kl >= j && j + self.kl >= i, "outside band");
        j * self.ldab + (self.kl + self.ku + i - j)
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        let o = self.offset(i, j);
        self.data[o] += v;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        if i + self.ku + self.kl >= j && j + self.kl >= i {
            self.data[self.offset(i, j)]
        } else {
            T::zero()
        }
    }

    /// Largest absolute entry; used to scale the pivot threshold.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    /// In-place LU factorization with partial pivoting.
    pub fn factor(mut self) -> Result<BandedLu<T>, SingularFactor> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let width = kl + ku; // upper bandwidth after fill
        let floor = self.max_abs() * lit::<T>(1e-14) + tiny::<T>();
        let mut ipiv = vec![0usize; n];
        for j in 0..n {
            let last_row = (j + kl).min(n - 1);
            let mut p = j;
            let mut pmax = self.data[self.offset(j, j)].abs();
            for i in (j + 1)..=last_row {
                let v = self.data[self.offset(i, j)].abs();
                if v > pmax {
                    pmax = v;
                    p = i;
                }
            }
            if !(pmax > floor) || !pmax.is_finite() {
                return Err(SingularFactor { pivot: pmax.to_f64().unwrap_or(0.0), step: j });
            }
            ipiv[j] = p;
            let last_col = (j + width).min(n - 1);
            if p != j {
                for c in j..=last_col {
                    let oj = self.offset(j, c);
                    let op = self.offset(p, c);
                    self.data.swap(oj, op);
                }
            }
            let pivot = self.data[self.offset(j, j)];
            for i in (j + 1)..=last_row {
                let oij = self.offset(i, j);
                let m = self.data[oij] / pivot;
                self.data[oij] = m;
                if m != T::zero() {
                    for c in (j + 1)..=last_col {
                        let ojc = self.data[self.offset(j, c)];
                        if ojc != T::zero() {
                            let oic = self.offset(i, c);
                            self.data[oic] -= m * ojc;
                        }
                    }
                }
            }
        }
        Ok(BandedLu { n, kl, width, ldab: self.ldab, data: self.data, ipiv })
    }
}

/// Factored operator; immutable, so concurrent solves may share it.
pub struct BandedLu<T> {
    n: usize,
    kl: usize,
    /// Upper bandwidth including fill.
    width: usize,
    ldab: usize,
    data: Vec<T>,
    ipiv: Vec<usize>,
}

impl<T: Scalar> BandedLu<T> {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> T {
        // Same layout as `BandedMatrix::offset`: width = kl + ku.
        self.data[j * self.ldab + (self.width + i - j)]
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        debug_assert_eq!(b.len(), self.n);
        let n = self.n;
        // L (unit diagonal, multipliers stored below the diagonal)
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let bj = b[j];
            if bj != T::zero() {
                let last = (j + self.kl).min(n - 1);
                for i in (j + 1)..=last {
                    b[i] -= self.at(i, j) * bj;
                }
            }
        }
        // U
        for j in (0..n).rev() {
            let x = b[j] / self.at(j, j);
            b[j] = x;
            if x != T::zero() {
                let first = j.saturating_sub(self.width);
                for i in first..j {
                    b[i] -= self.at(i, j) * x;
                }
            }
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
