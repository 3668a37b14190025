//! Row-major f32 matrices and the small set of kernels the toy pipeline needs.
//!
//! With the `parallel` feature (default) the matrix product distributes output
//! rows over a rayon pool; without it the same kernel runs on one thread. Both
//! paths compute every output element with an identical sequential inner loop,
//! so results are bit-identical regardless of the feature or thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    /// Fills a new matrix from `rng` with N(0, std) entries, row by row.
    pub fn randn(rows: usize, cols: usize, std: f32, rng: &mut impl Rng) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            // Box-Muller keeps us independent of distribution-crate versioning.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            data.push(z as f32 * std);
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    /// Copies the listed rows into a new matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Copies a contiguous column band (one attention head) into an n x width matrix.
    pub fn column_band(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Appends one row in place (KV-cache growth during decode).
    pub fn push_row(&mut self, row: &[f32]) {
        assert_eq!(row.len(), self.cols, "push_row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// out = self * other, dispatching to the parallel kernel when enabled.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        #[cfg(feature = "parallel")]
        {
            out.data
                .par_chunks_mut(other.cols)
                .with_min_len(8)
                .zip(self.data.par_chunks(self.cols).with_min_len(8))
                .for_each(|(out_row, a_row)| matmul_row(out_row, a_row, other));
        }
        #[cfg(not(feature = "parallel"))]
        {
            for i in 0..self.rows {
                let a_row = self.row(i);
                matmul_row(&mut out.data[i * other.cols..(i + 1) * other.cols], a_row, other);
            }
        }
        out
    }

    /// Single-threaded product, kept callable regardless of features so the
    /// bench suite can compare both paths.
    pub fn matmul_seq(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            matmul_row(&mut out.data[i * other.cols..(i + 1) * other.cols], a_row, other);
        }
        out
    }

    /// out = self * otherᵀ, i.e. `out[i][j] = self.row(i) · other.row(j)`.
    /// Used for attention scores, where `other` holds one key per row.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_nt width mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        #[cfg(feature = "parallel")]
        {
            out.data
                .par_chunks_mut(other.rows)
                .with_min_len(8)
                .zip(self.data.par_chunks(self.cols).with_min_len(8))
                .for_each(|(out_row, a_row)| matmul_nt_row(out_row, a_row, other));
        }
        #[cfg(not(feature = "parallel"))]
        {
            for i in 0..self.rows {
                let a_row = self.row(i);
                matmul_nt_row(&mut out.data[i * other.rows..(i + 1) * other.rows], a_row, other);
            }
        }
        out
    }
}

#[inline]
fn matmul_nt_row(out_row: &mut [f32], a_row: &[f32], b: &Matrix) {
    for (j, o) in out_row.iter_mut().enumerate() {
        *o = dot(a_row, b.row(j));
    }
}

// i-k-j kernel: streams rows of `b`, autovectorizes on the j loop. No
// sparsity shortcuts: executed multiply-accumulates must equal what the
// MAC counters report.
#[inline]
fn matmul_row(out_row: &mut [f32], a_row: &[f32], b: &Matrix) {
    for (k, &aik) in a_row.iter().enumerate() {
        let b_row = b.row(k);
        for (o, &bkj) in out_row.iter_mut().zip(b_row) {
            *o += aik * bkj;
        }
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place, max-subtracted softmax over `row[..len]`; entries past `len`
/// are set to zero (used for causal rows).
pub fn softmax_prefix(row: &mut [f32], len: usize) {
    let (active, rest) = row.split_at_mut(len);
    let max = active.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in active.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in active.iter_mut() {
        *v *= inv;
    }
    for v in rest.iter_mut() {
        *v = 0.0;
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps: 1e-5,
        }
    }

    pub fn apply_row(&self, row: &[f32], out: &mut [f32]) {
        let n = row.len() as f32;
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + self.eps).sqrt();
        for (((o, &x), &g), &b) in out.iter_mut().zip(row).zip(&self.gamma).zip(&self.beta) {
            *o = (x - mean) * inv * g + b;
        }
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            let mut tmp = vec![0.0; m.cols()];
            self.apply_row(m.row(i), &mut tmp);
            out.row_mut(i).copy_from_slice(&tmp);
        }
        out
    }
}

/// Configures the global worker pool used by the parallel kernels and the
/// ablation sweep. `None` leaves the pool at its default size. Calling this
/// after the pool already exists is a no-op.
pub fn init_workers(workers: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = workers {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_matches_naive() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let b = Matrix::from_rows(&[vec![7.0, 8.0, 9.0], vec![10.0, 11.0, 12.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.row(0), &[27.0, 30.0, 33.0]);
        assert_eq!(c.row(2), &[95.0, 106.0, 117.0]);
    }

    #[test]
    fn parallel_and_sequential_products_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Matrix::randn(33, 17, 1.0, &mut rng);
        let b = Matrix::randn(17, 29, 1.0, &mut rng);
        let fast = a.matmul(&b);
        let slow = a.matmul_seq(&b);
        assert_eq!(fast.data(), slow.data());
    }

    #[test]
    fn transposed_product_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Matrix::randn(5, 7, 1.0, &mut rng);
        let b = Matrix::randn(9, 7, 1.0, &mut rng);
        let nt = a.matmul_nt(&b);
        for i in 0..5 {
            for j in 0..9 {
                let expect = dot(a.row(i), b.row(j));
                assert_eq!(nt.get(i, j), expect);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![0.5, -1.0, 3.0, 0.0];
        softmax_prefix(&mut row, 4);
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);

        let mut causal = vec![0.5, -1.0, 3.0, 0.0];
        softmax_prefix(&mut causal, 2);
        assert_eq!(&causal[2..], &[0.0, 0.0]);
        let sum: f32 = causal.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_normalizes() {
        let ln = LayerNorm::new(4);
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let out = ln.apply(&m);
        let mean: f32 = out.row(0).iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
    }
}
