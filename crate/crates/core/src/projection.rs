//! Low-rank projection of word embeddings into a space whose inner products
//! mimic those of attribute vectors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

/// Default ridge added to the embedding Gram matrix.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Relative eigenvalue floor below which an unregularized Gram matrix is
/// treated as singular.
const SINGULAR_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// `target_dim × source_dim`, row-major.
    pub matrix: Vec<f64>,
    pub source_dim: usize,
    pub target_dim: usize,
    pub fit_error: f64,
    /// Inputs are scaled to unit length before projecting.
    pub normalize_inputs: bool,
}

impl Projection {
    pub fn identity(d: usize) -> Self {
        let mut matrix = vec![0.0; d * d];
        (0..d).for_each(|i| matrix[i * d + i] = 1.0);
        Self {
            matrix,
            source_dim: d,
            target_dim: d,
            fit_error: 0.0,
            normalize_inputs: false,
        }
    }

    pub fn project(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.source_dim {
            return Err(shape_err!(
                "embedding has dimension {}, projection expects {}",
                w.len(),
                self.source_dim
            ));
        }
        let w = if self.normalize_inputs { unit(w) } else { w.to_vec() };
        Ok(self
            .matrix
            .chunks(self.source_dim)
            .map(|row| row.iter().zip(&w).map(|(p, x)| p * x).sum())
            .collect())
    }
}

fn unit(w: &[f64]) -> Vec<f64> {
    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        w.to_vec()
    } else {
        w.iter().map(|v| v / n).collect()
    }
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if cols == 0 {
        return Err(invalid!("{what} is empty"));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(shape_err!("{what} row {i} has length {}, expected {cols}", rows[i].len()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Top `k` eigenpairs of a symmetric matrix, largest first. Eigenvalues at
/// rounding level or below count as zero, and each eigenvector's first
/// nonzero entry is made positive.
fn top_eigenpairs(k_mat: DMatrix<f64>, k: usize) -> Vec<(f64, DVector<f64>)> {
    let n = k_mat.nrows();
    let eig = SymmetricEigen::new(k_mat);
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let floor = n as f64 * f64::EPSILON * top;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| {
            let mut v = eig.eigenvectors.column(i).into_owned();
            if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    v.neg_mut();
                }
            }
            let lambda = eig.eigenvalues[i];
            (if lambda > floor { lambda } else { 0.0 }, v)
        })
        .collect()
}

fn solve_spd(g: DMatrix<f64>, rhs: DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let eig = g.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(0.0, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= SINGULAR_TOL * max.max(f64::MIN_POSITIVE) {
        let hint = if ridge == 0.0 {
            "; set ridge > 0"
        } else {
            "; increase the ridge"
        };
        return Err(invalid!(
            "embedding Gram matrix is singular (eigenvalues in [{min:.3e}, {max:.3e}]){hint}"
        ));
    }
    g.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| invalid!("embedding Gram matrix is not positive definite; set ridge > 0"))
}

/// Learns `P` so that `⟨P·w_i, P·w_j⟩ ≈ ⟨y_i, y_j⟩` for the paired rows of
/// `y` (attributes) and `w` (embeddings).
///
/// The attribute Gram matrix is factored as `XᵀX` with `X` built from its
/// top `target_dim` eigenpairs, then `P` is the ridge least-squares map from
/// embeddings to the columns of `X`.
pub fn learn_projection(
    y: &[Vec<f64>],
    w: &[Vec<f64>],
    target_dim: usize,
    ridge: f64,
    normalize_inputs: bool,
) -> Result<Projection> {
    let n = y.len();
    if n < 2 {
        return Err(invalid!("projection fitting needs at least two classes, got {n}"));
    }
    if w.len() != n {
        return Err(shape_err!("{n} attribute rows but {} embedding rows", w.len()));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(invalid!("ridge must be a finite nonnegative number, got {ridge}"));
    }
    let y = to_matrix(y, "attribute matrix")?;
    let w_rows: Vec<Vec<f64>> = if normalize_inputs {
        w.iter().map(|r| unit(r)).collect()
    } else {
        w.to_vec()
    };
    let w = to_matrix(&w_rows, "embedding matrix")?;
    let d = w.ncols();
    if target_dim == 0 || target_dim > d {
        return Err(invalid!("target dimension must be in 1..={d}, got {target_dim}"));
    }

    let k = &y * y.transpose();
    // Directions with zero eigenvalue contribute zero rows to P, so only the
    // informative rows are solved for and the rest are padding.
    let pairs: Vec<_> = top_eigenpairs(k.clone(), target_dim)
        .into_iter()
        .filter(|(lambda, _)| *lambda > 0.0)
        .collect();
    let rank = pairs.len();
    let mut x = DMatrix::zeros(rank, n);
    for (r, (lambda, v)) in pairs.into_iter().enumerate() {
        x.row_mut(r).copy_from(&(v.transpose() * lambda.sqrt()));
    }

    // P = X (WWᵀ + rI)⁻¹ W, or equivalently X W (WᵀW + rI)⁻¹; pick the
    // smaller system.
    let p = if n <= d {
        let g = &w * w.transpose() + DMatrix::identity(n, n) * ridge;
        let z = solve_spd(g, w.clone(), ridge)?;
        &x * z
    } else {
        let g = w.transpose() * &w + DMatrix::identity(d, d) * ridge;
        let z = solve_spd(g, (&x * &w).transpose(), ridge)?;
        z.transpose()
    };

    let reduced = &p * w.transpose();
    let fit_error = (reduced.transpose() * &reduced - &k).norm();
    let matrix = (0..target_dim)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| if i < rank { p[(i, j)] } else { 0.0 })
        .collect();
    Ok(Projection {
        matrix,
        source_dim: d,
        target_dim,
        fit_error,
        normalize_inputs,
    })
}
