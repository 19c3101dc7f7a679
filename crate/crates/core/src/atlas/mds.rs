//! Classical multidimensional scaling.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;

/// Embed a distance matrix in `dim` dimensions.
///
/// Double-centers the squared distances, `B = -1/2 J D^2 J`, and scales the
/// top eigenvectors of `B` by `sqrt(max(lambda, 0))`. Each axis is flipped
/// so its first nonzero coordinate is positive.
pub fn classical_mds(d: &Array2<f64>, dim: usize) -> Result<Array2<f64>> {
    let n = d.nrows();
    if n != d.ncols() {
        return Err(Error::Shape(format!("distance matrix is {}x{}", n, d.ncols())));
    }
    if n < 2 {
        return Err(Error::Config(format!("MDS needs at least 2 points, got {n}")));
    }
    let sq = d.mapv(|x| x * x);
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let col_means: Vec<f64> = (0..n).map(|j| sq.column(j).sum() / n as f64).collect();
    let total = row_means.iter().sum::<f64>() / n as f64;
    let b = Array2::from_shape_fn((n, n), |(i, j)| {
        -0.5 * (sq[[i, j]] - row_means[i] - col_means[j] + total)
    });
    let (vals, vecs) = symmetric_eigen(&b);
    let mut coords = Array2::zeros((n, dim));
    for k in 0..dim.min(n) {
        let s = vals[k].max(0.0).sqrt();
        let mut column: Vec<f64> = (0..n).map(|i| vecs[[i, k]] * s).collect();
        let tiny = 1e-12 * s.max(1.0);
        if let Some(first) = column.iter().find(|x| x.abs() > tiny) {
            if *first < 0.0 {
                column.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for (i, x) in column.into_iter().enumerate() {
            coords[[i, k]] = if x.abs() > tiny { x } else { 0.0 };
        }
    }
    Ok(coords)
}
