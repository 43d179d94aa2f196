use super::{Result, Tensor, TensorError};

/// Compressed-sparse-row matrix. Used as a constant operand (graph
/// propagation operators), never differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != rows + 1 || indptr[0] != 0 {
            return Err(TensorError::InvalidSparse(format!(
                "row pointer length {} for {rows} rows",
                indptr.len()
            )));
        }
        if indices.len() != values.len() || *indptr.last().unwrap() != indices.len() {
            return Err(TensorError::InvalidSparse("index/value count mismatch".into()));
        }
        for r in 0..rows {
            if indptr[r] > indptr[r + 1] {
                return Err(TensorError::InvalidSparse(format!("row pointer decreases at row {r}")));
            }
            let row = &indices[indptr[r]..indptr[r + 1]];
            for (i, &c) in row.iter().enumerate() {
                if c >= cols {
                    return Err(TensorError::InvalidSparse(format!("column {c} >= {cols}")));
                }
                if i > 0 && row[i - 1] >= c {
                    return Err(TensorError::InvalidSparse(format!(
                        "columns not strictly increasing in row {r}"
                    )));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Builds a matrix from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(TensorError::InvalidSparse(format!("entry ({r},{c}) outside {rows}x{cols}")));
            }
        }
        sorted.sort_by_key(|e| (e.0, e.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self::new(rows, cols, indptr, indices, values)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterates `(col, value)` over one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).map(|(_, v)| v).sum()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                t.data_mut()[r * self.cols + c] = v;
            }
        }
        t
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                triplets.push((c, r, v));
            }
        }
        CsrMatrix::from_triplets(self.cols, self.rows, &triplets).expect("transpose of valid CSR")
    }

    /// Sparse-dense product `self × x`.
    pub fn spmm(&self, x: &Tensor) -> Result<Tensor> {
        let (n, f) = x.require_rank2("spmm")?;
        if n != self.cols {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                left: vec![self.rows, self.cols],
                right: x.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; self.rows * f];
        let xd = x.data();
        for r in 0..self.rows {
            let out_row = &mut out[r * f..(r + 1) * f];
            for (c, v) in self.row(r) {
                for (o, &xv) in out_row.iter_mut().zip(&xd[c * f..(c + 1) * f]) {
                    *o += v * xv;
                }
            }
        }
        Tensor::new(&[self.rows, f], out)
    }

    /// `selfᵀ × x`, used by the backward pass of [`CsrMatrix::spmm`].
    pub fn t_spmm(&self, x: &Tensor) -> Result<Tensor> {
        let (n, f) = x.require_rank2("t_spmm")?;
        if n != self.rows {
            return Err(TensorError::ShapeMismatch {
                op: "t_spmm",
                left: vec![self.rows, self.cols],
                right: x.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; self.cols * f];
        let xd = x.data();
        for r in 0..self.rows {
            let x_row = &xd[r * f..(r + 1) * f];
            for (c, v) in self.row(r) {
                for (o, &xv) in out[c * f..(c + 1) * f].iter_mut().zip(x_row) {
                    *o += v * xv;
                }
            }
        }
        Tensor::new(&[self.cols, f], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_spmm_is_identity() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(CsrMatrix::identity(3).spmm(&x).unwrap(), x);
    }

    #[test]
    fn empty_spmm_is_zero() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(CsrMatrix::empty(2, 2).spmm(&x).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn normalized_two_node_path_is_row_stochastic() {
        // A + I = [[1,1],[1,1]], degrees 2 → every entry 1/2.
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.5)]).unwrap();
        let ones = Tensor::full(&[2, 3], 1.0);
        assert_eq!(a.spmm(&ones).unwrap(), ones);
    }

    #[test]
    fn rejects_bad_structure() {
        assert!(CsrMatrix::new(2, 2, vec![0, 2, 1], vec![0, 1], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::new(1, 2, vec![0, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::new(1, 2, vec![0, 1], vec![2], vec![1.0]).is_err());
        assert!(CsrMatrix::new(1, 2, vec![0, 2], vec![1, 1], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, 2, &[(1, 0, 1.0), (1, 0, 2.0), (0, 1, 1.0)]).unwrap();
        assert_eq!(m.get(1, 0), 3.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn spmm_matches_dense_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..25 {
            let mut triplets = Vec::new();
            for r in 0..20 {
                for c in 0..20 {
                    if rng.gen_bool(0.15) {
                        triplets.push((r, c, rng.gen_range(-1.0..1.0)));
                    }
                }
            }
            let a = CsrMatrix::from_triplets(20, 20, &triplets).unwrap();
            let x = Tensor::glorot(&[20, 7], 20, 7, &mut rng);
            let sparse = a.spmm(&x).unwrap();
            let dense = a.to_dense().matmul(&x).unwrap();
            for (s, d) in sparse.data().iter().zip(dense.data()) {
                assert!((s - d).abs() <= 1e-12);
            }
            let st = a.t_spmm(&x).unwrap();
            let dt = a.transpose().spmm(&x).unwrap();
            for (s, d) in st.data().iter().zip(dt.data()) {
                assert!((s - d).abs() <= 1e-12);
            }
        }
    }
}
