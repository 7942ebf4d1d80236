//! Symmetric positive-definite solver on a variable-band (skyline) profile.
//!
//! Pose graphs built from an odometry chain plus a handful of loop edges have
//! a narrow profile in natural ordering: fill-in stays inside the envelope,
//! so a dense-row-per-envelope Cholesky is both exact and cheap.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SkylineMatrix {
    /// First stored column of each row.
    first: Vec<usize>,
    /// Row `i` holds columns `first[i]..=i`.
    rows: Vec<Vec<f64>>,
}

impl SkylineMatrix {
    pub fn zeros(first: Vec<usize>) -> Self {
        let rows = first
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                debug_assert!(f <= i);
                vec![0.0; i - f + 1]
            })
            .collect();
        Self { first, rows }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// Adds to the lower-triangle entry `(i, j)`, `j ≤ i`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j <= i && j >= self.first[i]);
        self.rows[i][j - self.first[i]] += v;
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.rows[i][i - self.first[i]]
    }

    pub fn add_diagonal(&mut self, i: usize, v: f64) {
        let f = self.first[i];
        self.rows[i][i - f] += v;
    }

    /// In-place Cholesky factorization `A = L·Lᵀ`.
    pub fn factorize(mut self) -> Result<SkylineCholesky> {
        let n = self.dim();
        for i in 0..n {
            let fi = self.first[i];
            for j in fi..=i {
                let fj = self.first[j];
                let start = fi.max(fj);
                let mut s = self.rows[i][j - fi];
                if start < j {
                    let (ri, rj) = if i == j {
                        let r = &self.rows[i];
                        (&r[start - fi..j - fi], &r[start - fi..j - fi])
                    } else {
                        (
                            &self.rows[i][start - fi..j - fi],
                            &self.rows[j][start - fj..j - fj],
                        )
                    };
                    s -= ri.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>();
                }
                if j < i {
                    let d = self.rows[j][j - fj];
                    self.rows[i][j - fi] = s / d;
                } else {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Numeric(format!(
                            "normal equations not positive definite at row {i}"
                        )));
                    }
                    self.rows[i][i - fi] = s.sqrt();
                }
            }
        }
        Ok(SkylineCholesky { factor: self })
    }
}

#[derive(Clone, Debug)]
pub struct SkylineCholesky {
    factor: SkylineMatrix,
}

impl SkylineCholesky {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let l = &self.factor;
        let n = l.dim();
        let mut y = rhs.to_vec();
        for i in 0..n {
            let f = l.first[i];
            let row = &l.rows[i];
            let s: f64 = row[..i - f]
                .iter()
                .zip(&y[f..i])
                .map(|(a, b)| a * b)
                .sum();
            y[i] = (y[i] - s) / row[i - f];
        }
        for i in (0..n).rev() {
            let f = l.first[i];
            let row = &l.rows[i];
            y[i] /= row[i - f];
            let xi = y[i];
            for (k, lik) in (f..i).zip(row) {
                y[k] -= lik * xi;
            }
        }
        y
    }
}
