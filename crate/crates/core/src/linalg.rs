//! Banded LU factorization with partial pivoting, LAPACK-style band storage.
//!
//! A matrix with `kl` subdiagonals and `ku` superdiagonals is stored with
//! `kl` extra superdiagonals to absorb pivoting fill-in. This covers every
//! linear solve in the crate: interleaved cell-major Jacobians of two-point
//! flux stencils are banded with half-bandwidth `2*n_vars - 1`, and the rare
//! fully-coupled case (a periodic run spanning the whole ring) degenerates to
//! `kl = ku = n - 1`, i.e. a dense solve in band clothing.

use crate::error::{Result, SolverError};

#[derive(Debug, Clone)]
pub struct BandedMatrix {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    /// Row-major band storage, `(2*kl + ku + 1) x n`; entry (i, j) lives at
    /// band row `kl + ku + i - j`, column `j`.
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        assert!(n > 0 && kl < n && ku < n);
        BandedMatrix {
            n,
            kl,
            ku,
            data: vec![0.0; (2 * kl + ku + 1) * n],
        }
    }

    pub fn reset(&mut self) {
        self.data.fill(0.0);
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        (self.kl + self.ku + i - j) * self.n + j
    }

    /// True if (i, j) is inside the logical band (pre-factorization).
    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        (j as isize - i as isize) <= self.ku as isize
            && (i as isize - j as isize) <= self.kl as isize
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(self.in_band(i, j), "({i},{j}) outside band");
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        // extended band: fill-in can reach ku + kl superdiagonals
        if (j as isize - i as isize) > (self.ku + self.kl) as isize
            || (i as isize - j as isize) > self.kl as isize
        {
            return 0.0;
        }
        self.data[self.slot(i, j)]
    }

    #[inline]
    fn set_ext(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    /// Factor in place and solve `A x = rhs`, overwriting `rhs` with `x`.
    /// The matrix contents are destroyed.
    pub fn solve_in_place(&mut self, rhs: &mut [f64]) -> Result<()> {
        let n = self.n;
        assert_eq!(rhs.len(), n);
        let kl = self.kl;
        let width = self.kl + self.ku; // extended superdiagonal reach
        let mut piv = vec![0usize; n];

        for k in 0..n {
            let i_max = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in (k + 1)..=i_max {
                let a = self.get(i, k).abs();
                if a > best {
                    best = a;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(SolverError::SingularMatrix);
            }
            piv[k] = p;
            let j_max = (k + width).min(n - 1);
            if p != k {
                for j in k..=j_max {
                    let a = self.get(k, j);
                    let b = self.get(p, j);
                    self.set_ext(k, j, b);
                    self.set_ext(p, j, a);
                }
            }
            let pivot = self.get(k, k);
            for i in (k + 1)..=i_max {
                let l = self.get(i, k) / pivot;
                self.set_ext(i, k, l);
                if l != 0.0 {
                    for j in (k + 1)..=j_max {
                        let v = self.get(i, j) - l * self.get(k, j);
                        self.set_ext(i, j, v);
                    }
                }
            }
        }

        // forward substitution with pivots
        for k in 0..n {
            let p = piv[k];
            if p != k {
                rhs.swap(k, p);
            }
            let i_max = (k + kl).min(n - 1);
            for i in (k + 1)..=i_max {
                rhs[i] -= self.get(i, k) * rhs[k];
            }
        }
        // back substitution
        for k in (0..n).rev() {
            let j_max = (k + width).min(n - 1);
            let mut v = rhs[k];
            for j in (k + 1)..=j_max {
                v -= self.get(k, j) * rhs[j];
            }
            rhs[k] = v / self.get(k, k);
        }
        Ok(())
    }
}
