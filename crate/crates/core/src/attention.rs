//! Post-softmax attention maps and the head-mean reduction that the
//! similarity scores are computed from.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Post-softmax attention probabilities for a single block.
///
/// One `n x n` matrix per head, in row-major layout: `heads[h][q][k]` is the
/// weight query `q` puts on key `k`. Causal maps keep the upper triangle at
/// exactly zero so masked entries contribute nothing downstream.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    heads: Vec<Matrix>,
    n: usize,
    causal: bool,
}

impl AttentionMap {
    /// Wraps per-head probability matrices, checking the invariants the
    /// similarity functions rely on: square `n x n` heads, finite and
    /// non-negative entries, each valid row summing to 1 within `1e-5`, and
    /// (for causal maps) an exactly-zero upper triangle.
    pub fn new(heads: Vec<Matrix>, causal: bool) -> Result<Self> {
        let first = heads.first().ok_or_else(|| {
            Error::InvalidInput("attention map needs at least one head".into())
        })?;
        let n = first.rows();
        if n == 0 {
            return Err(Error::InvalidInput("attention map has zero tokens".into()));
        }
        for (h, head) in heads.iter().enumerate() {
            if head.rows() != n || head.cols() != n {
                return Err(Error::InvalidInput(format!(
                    "head {h} is {}x{}, expected {n}x{n}",
                    head.rows(),
                    head.cols()
                )));
            }
            for q in 0..n {
                let row = head.row(q);
                let mut sum = 0.0f64;
                for (k, &p) in row.iter().enumerate() {
                    if !p.is_finite() {
                        return Err(Error::DegenerateInput(format!(
                            "non-finite attention weight at head {h}, row {q}, col {k}"
                        )));
                    }
                    if p < 0.0 {
                        return Err(Error::InvalidInput(format!(
                            "negative attention weight at head {h}, row {q}, col {k}"
                        )));
                    }
                    if causal && k > q && p != 0.0 {
                        return Err(Error::InvalidInput(format!(
                            "causal map has nonzero weight above the diagonal \
                             at head {h}, row {q}, col {k}"
                        )));
                    }
                    sum += f64::from(p);
                }
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(Error::DegenerateInput(format!(
                        "head {h} row {q} sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(Self { heads, n, causal })
    }

    /// Number of tokens (rows/cols of every head).
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    pub fn heads(&self) -> &[Matrix] {
        &self.heads
    }

    /// Mean over heads: `A_bar[q][k] = (1/H) * sum_h heads[h][q][k]`.
    pub fn head_mean(&self) -> Matrix {
        let h = self.heads.len() as f32;
        let mut mean = Matrix::zeros(self.n, self.n);
        for head in &self.heads {
            for (dst, src) in mean.data_mut().iter_mut().zip(head.data()) {
                *dst += src;
            }
        }
        for v in mean.data_mut() {
            *v /= h;
        }
        mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_head(n: usize) -> Matrix {
        Matrix::from_vec(n, n, vec![1.0 / n as f32; n * n])
    }

    fn causal_uniform_head(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for q in 0..n {
            let w = 1.0 / (q + 1) as f32;
            for k in 0..=q {
                m.set(q, k, w);
            }
        }
        m
    }

    #[test]
    fn accepts_valid_maps_and_averages_heads() {
        let a = uniform_head(3);
        let mut b = Matrix::zeros(3, 3);
        for q in 0..3 {
            b.set(q, 0, 1.0);
        }
        let map = AttentionMap::new(vec![a, b], false).unwrap();
        let mean = map.head_mean();
        // (1/3 + 1) / 2 in column 0, (1/3 + 0) / 2 elsewhere.
        assert!((mean.get(1, 0) - 2.0 / 3.0).abs() < 1e-6);
        assert!((mean.get(1, 2) - 1.0 / 6.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_row_sums() {
        let mut m = uniform_head(2);
        m.set(0, 0, 0.9);
        let err = AttentionMap::new(vec![m], false).unwrap_err();
        assert_eq!(err.kind(), "degenerate_input");
    }

    #[test]
    fn rejects_leaky_causal_mask() {
        let m = uniform_head(3);
        let err = AttentionMap::new(vec![m], true).unwrap_err();
        assert_eq!(err.kind(), "invalid_input");
    }

    #[test]
    fn causal_uniform_is_accepted() {
        let map = AttentionMap::new(vec![causal_uniform_head(4)], true).unwrap();
        assert!(map.is_causal());
        assert_eq!(map.len(), 4);
    }

    #[test]
    fn rejects_negative_and_non_finite() {
        let mut m = uniform_head(2);
        m.set(0, 0, -0.5);
        m.set(0, 1, 1.5);
        assert!(AttentionMap::new(vec![m], false).is_err());

        let mut m = uniform_head(2);
        m.set(1, 1, f32::NAN);
        assert!(AttentionMap::new(vec![m], false).is_err());
    }
}
