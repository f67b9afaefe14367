//! Compressed sparse rows and a banded Cholesky factorization.

use crate::error::{Error, Result};

/// Square or rectangular matrix in compressed sparse row form.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds the matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().expect("nonempty") += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates `(col, value)` over the stored entries of `row`.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[row]..self.row_ptr[row + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let span = self.row_ptr[row]..self.row_ptr[row + 1];
        match self.col_idx[span.clone()].binary_search(&col) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// `max |A_ij - A_ji|` over stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|i - j|` over stored entries of the leading `n × n` block.
    pub fn semi_bandwidth(&self, n: usize) -> usize {
        let mut bw = 0;
        for i in 0..n {
            for (j, _) in self.row(i) {
                if j < n {
                    bw = bw.max(i.abs_diff(j));
                }
            }
        }
        bw
    }
}

/// Cholesky factor `L` of a symmetric positive definite band matrix.
#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    // row i holds L[i][i-bw..=i], left-padded with zeros
    band: Vec<f64>,
}

impl BandedCholesky {
    /// Factors the leading `n × n` block of `a`, whose semi-bandwidth is `bw`.
    pub fn factor(a: &CsrMatrix, n: usize, bw: usize) -> Result<Self> {
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i && i - j <= bw {
                    band[i * w + bw - (i - j)] = v;
                } else if j < i {
                    return Err(Error::InvalidArgument(format!(
                        "entry ({i}, {j}) lies outside the declared bandwidth {bw}"
                    )));
                }
            }
        }
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let start = lo.max(j.saturating_sub(bw));
                let mut s = band[i * w + bw - (i - j)];
                for k in start..j {
                    s -= band[i * w + bw - (i - k)] * band[j * w + bw - (j - k)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::Singular(format!("non-positive pivot {s:e} at row {i}")));
                    }
                    band[i * w + bw] = s.sqrt();
                } else {
                    band[i * w + bw - (i - j)] = s / band[j * w + bw];
                }
            }
        }
        Ok(Self { n, bw, band })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `L Lᵀ x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        assert_eq!(b.len(), n);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = b[i];
            for k in lo..i {
                s -= self.band[i * w + bw - (i - k)] * b[k];
            }
            b[i] = s / self.band[i * w + bw];
        }
        for i in (0..n).rev() {
            b[i] /= self.band[i * w + bw];
            let xi = b[i];
            let lo = i.saturating_sub(bw);
            for k in lo..i {
                b[k] -= self.band[i * w + bw - (i - k)] * xi;
            }
        }
    }
}
