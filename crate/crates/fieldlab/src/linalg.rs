//! Small dense kernels on raw `f64` slices.
//!
//! The state dimension in this laboratory is tiny (a handful of retained
//! modes), so the hot paths work on plain slices without any matrix library.
//! Real linear algebra (regressions, backward matrix flows) lives in the
//! adjoint module on top of `nalgebra`; these helpers cover the inner-loop
//! vector arithmetic shared by every module.

/// Euclidean inner product. Panics on length mismatch (internal use only).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y ← y + alpha · x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y ← alpha · y`.
#[inline]
pub fn scale(alpha: f64, y: &mut [f64]) {
    for yi in y.iter_mut() {
        *yi *= alpha;
    }
}

/// Squared Euclidean norm.
#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Euclidean norm.
#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// Dense matrix–vector product for a row-major `rows×cols` matrix.
#[inline]
pub fn matvec(mat: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(mat.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (r, out_r) in out.iter_mut().enumerate() {
        *out_r = dot(&mat[r * cols..(r + 1) * cols], x);
    }
}

/// All entries finite?
#[inline]
pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Minimal owned row-major dense matrix for coefficient Jacobians and the
/// backward matrix flows' assembly steps.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DMat {
    /// Row count.
    pub rows: usize,
    /// Column count.
    pub cols: usize,
    /// Row-major entries, length `rows·cols`.
    pub data: Vec<f64>,
}

impl DMat {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DMat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = DMat::zeros(n, n);
        for k in 0..n {
            m.data[k * n + k] = 1.0;
        }
        m
    }

    /// Build from nested rows; panics if rows are ragged.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        DMat { rows: r, cols: c, data }
    }

    /// Rank-one matrix `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = DMat::zeros(u.len(), v.len());
        for (i, ui) in u.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                m.data[i * v.len() + j] = ui * vj;
            }
        }
        m
    }

    /// Entry accessor.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Entry mutation.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// `out = self · x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        matvec(&self.data, self.rows, self.cols, x, &mut out);
        out
    }

    /// `out = selfᵀ · x`.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            axpy(*xi, row, &mut out);
        }
        out
    }

    /// `self ← self + alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &DMat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        axpy(alpha, &other.data, &mut self.data);
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &DMat) -> DMat {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = DMat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik != 0.0 {
                    for j in 0..other.cols {
                        out.data[i * other.cols + j] += aik * other.get(k, j);
                    }
                }
            }
        }
        out
    }

    /// Transposed copy.
    pub fn transpose(&self) -> DMat {
        let mut out = DMat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Symmetrize in place: `self ← (self + selfᵀ)/2`. Square only.
    pub fn symmetrize(&mut self) {
        assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self.get(i, j) + self.get(j, i));
                self.set(i, j, avg);
                self.set(j, i, avg);
            }
        }
    }

    /// Maximum absolute entry-wise asymmetry `max |m_{ij} − m_{ji}|`.
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Frobenius norm.
    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// Quadratic form `⟨x, self · y⟩`.
    pub fn quadratic_form(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(x, &self.apply(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_axpy_roundtrip() {
        let x = [1.0, -2.0, 3.0];
        let mut y = [0.5, 0.5, 0.5];
        axpy(2.0, &x, &mut y);
        assert_eq!(y, [2.5, -3.5, 6.5]);
        assert_eq!(dot(&x, &y), 2.5 + 7.0 + 19.5);
    }

    #[test]
    fn matvec_matches_hand_computation() {
        // [1 2; 3 4] * [5, 6] = [17, 39]
        let m = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 2];
        matvec(&m, 2, 2, &[5.0, 6.0], &mut out);
        assert_eq!(out, [17.0, 39.0]);
    }

    #[test]
    fn dmat_products_and_transpose() {
        let a = DMat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(a.apply(&[5.0, 6.0]), vec![17.0, 39.0]);
        assert_eq!(a.apply_transpose(&[5.0, 6.0]), vec![23.0, 34.0]);
        let b = DMat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let ab = a.matmul(&b);
        assert_eq!(ab.data, vec![2.0, 1.0, 4.0, 3.0]);
        assert_eq!(a.transpose().data, vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(DMat::outer(&[1.0, 2.0], &[3.0, 4.0]).data, vec![3.0, 4.0, 6.0, 8.0]);
        assert_eq!(a.quadratic_form(&[1.0, 0.0], &[0.0, 1.0]), 2.0);
    }

    #[test]
    fn dmat_symmetry_helpers() {
        let mut m = DMat::from_rows(&[vec![1.0, 2.0], vec![4.0, 1.0]]);
        assert_eq!(m.asymmetry(), 2.0);
        m.symmetrize();
        assert_eq!(m.data, vec![1.0, 3.0, 3.0, 1.0]);
        assert_eq!(m.asymmetry(), 0.0);
    }
}
