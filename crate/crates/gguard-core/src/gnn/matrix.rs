//! Row-major f64 dense matrix with a pinned accumulation order.
//!
//! Hand-rolled instead of pulling a linear-algebra crate: the training loop
//! promises bitwise-reproducible trajectories, which requires every product
//! to accumulate in a fixed order on both the sequential and parallel paths.
//! The parallel path splits work by output row only; each row is computed by
//! exactly the same code as the sequential path.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Matrix {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    fn mul_row_into(&self, rhs: &Matrix, i: usize, out_row: &mut [f64]) {
        // k-outer/j-inner keeps the per-(i,j) accumulation order fixed at
        // ascending k regardless of how rows are scheduled.
        for k in 0..self.cols {
            let a = self.get(i, k);
            if a == 0.0 {
                continue;
            }
            let rhs_row = rhs.row(k);
            for (o, r) in out_row.iter_mut().zip(rhs_row) {
                *o += a * r;
            }
        }
    }

    pub fn matmul_seq(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            self.mul_row_into(rhs, i, row);
        }
        out
    }

    #[cfg(feature = "parallel")]
    pub fn matmul_par(&self, rhs: &Matrix) -> Matrix {
        use rayon::prelude::*;
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        out.data
            .par_chunks_mut(rhs.cols)
            .enumerate()
            .for_each(|(i, row)| self.mul_row_into(rhs, i, row));
        out
    }

    /// Product with feature-dependent dispatch. Both paths produce
    /// bitwise-identical results; the parallel one only pays off on
    /// reasonably sized inputs.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        #[cfg(feature = "parallel")]
        {
            if self.rows >= 64 && self.rows * self.cols * rhs.cols >= (1 << 18) {
                return self.matmul_par(rhs);
            }
        }
        self.matmul_seq(rhs)
    }

    /// Adds a bias row to every row.
    pub fn add_row_broadcast(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols, "bias length mismatch");
        for i in 0..self.rows {
            for (o, b) in self.row_mut(i).iter_mut().zip(bias) {
                *o += b;
            }
        }
    }

    pub fn relu(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.max(0.0)).collect(),
        }
    }

    /// Zeroes entries of `self` where `gate` is ≤ 0 (ReLU backward mask).
    pub fn mask_nonpositive(&mut self, gate: &Matrix) {
        assert_eq!(self.rows, gate.rows);
        assert_eq!(self.cols, gate.cols);
        for (v, g) in self.data.iter_mut().zip(&gate.data) {
            if *g <= 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (v, o) in self.data.iter_mut().zip(&other.data) {
            *v += o;
        }
    }

    /// self = self * s + other * t (used by the momentum update).
    pub fn scale_add(&mut self, s: f64, other: &Matrix, t: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (v, o) in self.data.iter_mut().zip(&other.data) {
            *v = *v * s + o * t;
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_example() {
        let a = Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(vec![vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = a.matmul_seq(&b);
        assert_eq!(c.row(0), &[19.0, 22.0]);
        assert_eq!(c.row(1), &[43.0, 50.0]);
    }

    #[test]
    fn transpose_round_trips() {
        let a = Matrix::from_fn(3, 5, |i, j| (i * 7 + j) as f64);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn column_sums_match_naive() {
        let a = Matrix::from_fn(4, 3, |i, j| (i + 1) as f64 * (j + 1) as f64);
        assert_eq!(a.column_sums(), vec![10.0, 20.0, 30.0]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matmul_is_bitwise_equal() {
        // Irrational-ish values so any reassociation would show up.
        let a = Matrix::from_fn(130, 70, |i, j| ((i * 31 + j * 17) as f64).sin());
        let b = Matrix::from_fn(70, 90, |i, j| ((i * 13 + j * 41) as f64).cos());
        let seq = a.matmul_seq(&b);
        let par = a.matmul_par(&b);
        assert_eq!(seq.rows(), par.rows());
        assert!(seq
            .data()
            .iter()
            .zip(par.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn relu_and_mask() {
        let a = Matrix::from_rows(vec![vec![-1.0, 2.0], vec![0.0, -3.0]]);
        let r = a.relu();
        assert_eq!(r.data(), &[0.0, 2.0, 0.0, 0.0]);
        let mut g = Matrix::from_rows(vec![vec![5.0, 5.0], vec![5.0, 5.0]]);
        g.mask_nonpositive(&a);
        assert_eq!(g.data(), &[0.0, 5.0, 0.0, 0.0]);
    }
}
