//! Linear diagnostics: a ridge-regression probe over a single modality,
//! used to confirm that cross-modal benchmarks leak nothing through any one
//! channel.

use crate::data::{MultimodalDataset, Role};
use crate::error::{Error, Result};
use crate::metrics::roc_auc;
use crate::train::SplitIndices;

/// Solve `a x = b` for a small dense symmetric positive-definite system by
/// Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::numeric("solve_dense", "singular system"));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Fit a ridge least-squares probe (with intercept) on the train split of a
/// single modality and return its test-split AUC.
pub fn single_modality_probe_auc(
    ds: &MultimodalDataset,
    role: Role,
    split: &SplitIndices,
    ridge: f64,
) -> Result<f64> {
    let dim = ds.dim(role);
    let x_train = ds.modality_rows(role, &split.train);
    let n = split.train.len();
    let width = dim + 1; // intercept column

    // Normal equations: (X^T X + ridge I) w = X^T y.
    let mut xtx = vec![vec![0.0; width]; width];
    let mut xty = vec![0.0; width];
    for (row_idx, &i) in split.train.iter().enumerate() {
        let row = x_train.row(row_idx);
        let y = ds.labels()[i] as f64;
        for a in 0..width {
            let xa = if a < dim { row[a] } else { 1.0 };
            xty[a] += xa * y;
            for b in a..width {
                let xb = if b < dim { row[b] } else { 1.0 };
                xtx[a][b] += xa * xb;
            }
        }
    }
    for a in 0..width {
        for b in 0..a {
            xtx[a][b] = xtx[b][a];
        }
        xtx[a][a] += ridge;
    }
    let _ = n;
    let w = solve_dense(xtx, xty)?;

    let x_test = ds.modality_rows(role, &split.test);
    let scores: Vec<f64> = (0..split.test.len())
        .map(|r| {
            let row = x_test.row(r);
            row.iter().zip(&w[..dim]).map(|(a, b)| a * b).sum::<f64>() + w[dim]
        })
        .collect();
    let labels: Vec<u8> = split.test.iter().map(|&i| ds.labels()[i]).collect();
    roc_auc(&scores, &labels)
}
