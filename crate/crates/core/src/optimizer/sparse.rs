//! Block-sparse symmetric systems with 6×6 blocks and a block Cholesky factorization
//! under a minimum-degree ordering.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("block {block} is not positive definite after elimination")]
    NotPositiveDefinite { block: usize },
    #[error("right-hand side has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix pattern differs from the analyzed one")]
    PatternMismatch,
}

/// Symmetric matrix stored as diagonal blocks plus the strictly upper blocks `(i < j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseSymmetric {
    diag: Vec<Matrix6<f64>>,
    upper: BTreeMap<(usize, usize), Matrix6<f64>>,
}

impl BlockSparseSymmetric {
    pub fn new(blocks: usize) -> Self {
        Self { diag: vec![Matrix6::zeros(); blocks], upper: BTreeMap::new() }
    }

    pub fn blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn dim(&self) -> usize {
        6 * self.diag.len()
    }

    pub fn add_diag(&mut self, i: usize, m: &Matrix6<f64>) {
        self.diag[i] += m;
    }

    /// Accumulates block `(i, j)`; `(j, i)` is implied by symmetry.
    pub fn add_block(&mut self, i: usize, j: usize, m: &Matrix6<f64>) {
        use std::cmp::Ordering::*;
        match i.cmp(&j) {
            Equal => self.diag[i] += m,
            Less => *self.upper.entry((i, j)).or_insert_with(Matrix6::zeros) += m,
            Greater => *self.upper.entry((j, i)).or_insert_with(Matrix6::zeros) += m.transpose(),
        }
    }

    pub fn diag_block(&self, i: usize) -> &Matrix6<f64> {
        &self.diag[i]
    }

    /// Block `(i, j)` of the full matrix, if structurally present.
    pub fn block(&self, i: usize, j: usize) -> Option<Matrix6<f64>> {
        use std::cmp::Ordering::*;
        match i.cmp(&j) {
            Equal => Some(self.diag[i]),
            Less => self.upper.get(&(i, j)).copied(),
            Greater => self.upper.get(&(j, i)).map(|m| m.transpose()),
        }
    }

    pub fn upper_blocks(&self) -> impl Iterator<Item = (usize, usize, &Matrix6<f64>)> {
        self.upper.iter().map(|(&(i, j), m)| (i, j, m))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.dim(), self.dim());
        for (i, m) in self.diag.iter().enumerate() {
            d.fixed_view_mut::<6, 6>(6 * i, 6 * i).copy_from(m);
        }
        for (&(i, j), m) in &self.upper {
            d.fixed_view_mut::<6, 6>(6 * i, 6 * j).copy_from(m);
            d.fixed_view_mut::<6, 6>(6 * j, 6 * i).copy_from(&m.transpose());
        }
        d
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim());
        let seg = |v: &DVector<f64>, k: usize| -> Vector6<f64> { v.fixed_rows::<6>(6 * k).into() };
        for (i, m) in self.diag.iter().enumerate() {
            let r = m * seg(x, i);
            let mut out = y.fixed_rows_mut::<6>(6 * i);
            out += r;
        }
        for (&(i, j), m) in &self.upper {
            let a = m * seg(x, j);
            let b = m.transpose() * seg(x, i);
            let mut out = y.fixed_rows_mut::<6>(6 * i);
            out += a;
            let mut out = y.fixed_rows_mut::<6>(6 * j);
            out += b;
        }
        y
    }
}

/// Greedy minimum-degree elimination on the block graph. Ties go to the lowest index so
/// the ordering is deterministic. Returns `(order, pattern)`: `order[p]` is the original block
/// eliminated at step `p` and `pattern[p]` its fill-in neighbours as step indices (all `> p`).
fn minimum_degree(blocks: usize, edges: impl Iterator<Item = (usize, usize)>) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); blocks];
    for (i, j) in edges {
        adjacency[i].insert(j);
        adjacency[j].insert(i);
    }
    let mut queue: BTreeSet<(usize, usize)> = (0..blocks).map(|v| (adjacency[v].len(), v)).collect();
    let mut order = Vec::with_capacity(blocks);
    let mut neighbours_at_elimination = Vec::with_capacity(blocks);
    while let Some((_, v)) = queue.pop_first() {
        let nbrs: Vec<usize> = adjacency[v].iter().copied().collect();
        for &a in &nbrs {
            queue.remove(&(adjacency[a].len(), a));
            adjacency[a].remove(&v);
        }
        for (k, &a) in nbrs.iter().enumerate() {
            for &b in &nbrs[k + 1..] {
                adjacency[a].insert(b);
                adjacency[b].insert(a);
            }
        }
        for &a in &nbrs {
            queue.insert((adjacency[a].len(), a));
        }
        adjacency[v].clear();
        order.push(v);
        neighbours_at_elimination.push(nbrs);
    }
    let mut step_of = vec![0; blocks];
    for (p, &v) in order.iter().enumerate() {
        step_of[v] = p;
    }
    let pattern = neighbours_at_elimination
        .into_iter()
        .map(|nbrs| {
            let mut rows: Vec<usize> = nbrs.into_iter().map(|v| step_of[v]).collect();
            rows.sort_unstable();
            rows
        })
        .collect();
    (order, pattern)
}

/// Symbolic analysis plus storage for a numeric factor `P A Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    order: Vec<usize>,
    step_of: Vec<usize>,
    /// Row (step) indices of the off-diagonal blocks of each column of `L`.
    pattern: Vec<Vec<usize>>,
    /// For each row `k`: `(column j, position of k in pattern[j])` for every `j < k` with `L_kj ≠ 0`.
    row_entries: Vec<Vec<(usize, usize)>>,
    upper_keys: BTreeSet<(usize, usize)>,
    diag: Vec<Matrix6<f64>>,
    values: Vec<Vec<Matrix6<f64>>>,
}

impl BlockCholesky {
    pub fn analyze(a: &BlockSparseSymmetric) -> Self {
        let blocks = a.blocks();
        let (order, pattern) = minimum_degree(blocks, a.upper.keys().copied());
        let mut step_of = vec![0; blocks];
        for (p, &v) in order.iter().enumerate() {
            step_of[v] = p;
        }
        let mut row_entries = vec![Vec::new(); blocks];
        for (j, rows) in pattern.iter().enumerate() {
            for (pos, &k) in rows.iter().enumerate() {
                row_entries[k].push((j, pos));
            }
        }
        let values = pattern.iter().map(|rows| vec![Matrix6::zeros(); rows.len()]).collect();
        Self {
            order,
            step_of,
            pattern,
            row_entries,
            upper_keys: a.upper.keys().copied().collect(),
            diag: vec![Matrix6::zeros(); blocks],
            values,
        }
    }

    /// Number of stored off-diagonal blocks in `L`.
    pub fn factor_blocks(&self) -> usize {
        self.pattern.iter().map(Vec::len).sum()
    }

    /// Factors `A + lambda · diag(A)`.
    pub fn factorize(&mut self, a: &BlockSparseSymmetric, lambda: f64) -> Result<(), SolveError> {
        if a.blocks() != self.order.len() || a.upper.keys().ne(self.upper_keys.iter()) {
            return Err(SolveError::PatternMismatch);
        }
        let blocks = self.order.len();
        let mut slot = vec![usize::MAX; blocks];
        for k in 0..blocks {
            let original = self.order[k];
            let mut d = a.diag[original];
            for s in 0..6 {
                d[(s, s)] *= 1.0 + lambda;
            }
            let rows = &self.pattern[k];
            for (pos, &r) in rows.iter().enumerate() {
                slot[r] = pos;
            }
            // gather column k of A below the diagonal, in step order
            let mut col: Vec<Matrix6<f64>> =
                rows.iter().map(|&r| a.block(self.order[r], original).unwrap_or_else(Matrix6::zeros)).collect();

            for &(j, pos) in &self.row_entries[k] {
                let l_kj = self.values[j][pos];
                d -= l_kj * l_kj.transpose();
                for q in pos + 1..self.pattern[j].len() {
                    let r = self.pattern[j][q];
                    col[slot[r]] -= self.values[j][q] * l_kj.transpose();
                }
            }

            let chol = d.cholesky().ok_or(SolveError::NotPositiveDefinite { block: original })?;
            let l_kk = chol.l();
            for block in col.iter_mut() {
                // L_rk = col_r · L_kk⁻ᵀ
                let solved = l_kk
                    .solve_lower_triangular(&block.transpose())
                    .ok_or(SolveError::NotPositiveDefinite { block: original })?;
                *block = solved.transpose();
            }
            self.diag[k] = l_kk;
            self.values[k] = col;
        }
        Ok(())
    }

    /// Solves `(A + λ diag A) x = rhs` with the last factorization.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, SolveError> {
        let blocks = self.order.len();
        if rhs.len() != 6 * blocks {
            return Err(SolveError::DimensionMismatch { expected: 6 * blocks, got: rhs.len() });
        }
        let mut y: Vec<Vector6<f64>> = self.order.iter().map(|&o| rhs.fixed_rows::<6>(6 * o).into()).collect();
        for k in 0..blocks {
            y[k] = self.diag[k]
                .solve_lower_triangular(&y[k])
                .ok_or(SolveError::NotPositiveDefinite { block: self.order[k] })?;
            for (pos, &r) in self.pattern[k].iter().enumerate() {
                let delta = self.values[k][pos] * y[k];
                y[r] -= delta;
            }
        }
        for k in (0..blocks).rev() {
            let mut acc = y[k];
            for (pos, &r) in self.pattern[k].iter().enumerate() {
                acc -= self.values[k][pos].transpose() * y[r];
            }
            y[k] = self.diag[k]
                .transpose()
                .solve_upper_triangular(&acc)
                .ok_or(SolveError::NotPositiveDefinite { block: self.order[k] })?;
        }
        let mut x = DVector::zeros(6 * blocks);
        for (original, step) in self.step_of.iter().enumerate() {
            x.fixed_rows_mut::<6>(6 * original).copy_from(&y[*step]);
        }
        Ok(x)
    }
}

/// Solves `(H + λ·diag(H)) δ = -b` by sparse block Cholesky.
pub fn solve_normal_equations(
    h: &BlockSparseSymmetric,
    b: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>, SolveError> {
    let mut factor = BlockCholesky::analyze(h);
    factor.factorize(h, lambda)?;
    factor.solve(&(-b))
}
