//! Sparse Cholesky factorization of the assembled SPD operators.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Col, Side};

use crate::assembly::SparseOperator;
use crate::{Error, Result};

/// Cholesky factor of a symmetric positive definite [`SparseOperator`],
/// computed once and reused for every right-hand side.
pub struct CholeskySolver {
    dim: usize,
    factor: Option<Llt<usize, f64>>,
}

impl std::fmt::Debug for CholeskySolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CholeskySolver").field("dim", &self.dim).finish()
    }
}

impl CholeskySolver {
    pub fn factorize(op: &SparseOperator) -> Result<Self> {
        let dim = op.dim();
        if dim == 0 {
            return Ok(Self { dim, factor: None });
        }
        let triplets: Vec<_> = op
            .entries()
            .map(|(i, j, v)| Triplet::new(i, j, v))
            .collect();
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(dim, dim, &triplets)
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        let factor = mat
            .sp_cholesky(Side::Lower)
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        Ok(Self {
            dim,
            factor: Some(factor),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Overwrite `rhs` with the solution of `A x = rhs`.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        assert_eq!(rhs.len(), self.dim);
        let Some(factor) = &self.factor else {
            return;
        };
        let b = Col::<f64>::from_fn(self.dim, |i| rhs[i]);
        let x = factor.solve(&b);
        for (i, r) in rhs.iter_mut().enumerate() {
            *r = x[i];
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
