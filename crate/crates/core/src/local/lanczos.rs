//! Top Hessian eigenvalues by Lanczos iteration over Hessian-vector products.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{hvp, Objective};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, symmetric_eigen};
use crate::model::ParamVector;
use crate::rng::seeded;

/// Largest accepted `||H v - lambda v|| / |lambda|` for a reported pair.
pub const RESIDUAL_TOLERANCE: f64 = 1e-3;

/// Lanczos stops early once every wanted Ritz pair has an estimated
/// relative residual below this.
const CONVERGENCE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianSpectrum {
    pub k: usize,
    /// Top-k Ritz values, descending.
    pub eigenvalues: Vec<f64>,
    /// `||H v - lambda v|| / |lambda|` for each reported pair.
    pub residual_norms: Vec<f64>,
    /// Hessian-vector products spent in the iteration.
    pub iterations: usize,
    /// Every residual is within [`RESIDUAL_TOLERANCE`].
    pub converged: bool,
}

/// Krylov basis size per restart cycle.
pub fn max_iterations(k: usize) -> usize {
    4 * k + 20
}

/// Upper bound on restart cycles.
pub const MAX_RESTARTS: usize = 50;

/// Top-`k` eigenvalues of the Hessian of `objective` at `params`.
///
/// Lanczos with full reorthogonalization from a Gaussian start vector drawn
/// from `seed`, keeping at most `min(4k + 20, n)` basis vectors. When the
/// basis is full and the wanted pairs have not converged, the iteration
/// thick-restarts from the leading Ritz vectors and the current residual.
/// On breakdown (an invariant Krylov subspace) it continues with a fresh
/// vector orthogonal to the basis. Residuals are measured with one extra HVP
/// per reported pair; pairs above tolerance are reported and flagged rather
/// than treated as errors.
pub fn top_eigenvalues<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    k: usize,
    seed: u64,
) -> Result<HessianSpectrum> {
    let n = params.len();
    if k == 0 || k > n {
        return Err(Error::Precondition(format!(
            "need 1 <= k <= {n} parameters, got k = {k}"
        )));
    }
    let basis_size = max_iterations(k).min(n);
    let keep = (2 * k).max(k + 5).min(basis_size.saturating_sub(2)).max(k);
    let mut rng = seeded(seed);
    let mut random_unit = |basis: &[Vec<f64>]| -> Option<Vec<f64>> {
        if basis.len() >= n {
            return None;
        }
        for _ in 0..10 {
            let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            orthogonalize(&mut v, basis);
            orthogonalize(&mut v, basis);
            let nv = norm(&v);
            if nv > 1e-8 {
                v.iter_mut().for_each(|x| *x /= nv);
                return Some(v);
            }
        }
        None
    };

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(basis_size);
    // Projection `basis^T H basis`, stored densely since restarts break the
    // tridiagonal structure.
    let mut proj: Vec<Vec<f64>> = Vec::with_capacity(basis_size);
    let mut q = random_unit(&basis).expect("nonzero random vector");
    let mut hvps = 0usize;
    let mut scale = 0.0f64;
    let mut cycles = 0usize;

    loop {
        let mut residual = 0.0;
        let mut next: Option<Vec<f64>> = None;
        let mut done = false;
        while basis.len() < basis_size {
            let mut w = hvp(objective, params, &params.with_values(q.clone()))?.values;
            hvps += 1;
            basis.push(q.clone());
            let coeffs: Vec<f64> = basis.iter().map(|v| dot(v, &w)).collect();
            for row in proj.iter_mut() {
                row.push(0.0);
            }
            proj.push(vec![0.0; basis.len()]);
            let j = basis.len() - 1;
            for (i, c) in coeffs.iter().enumerate() {
                proj[i][j] = *c;
                proj[j][i] = *c;
            }
            scale = scale.max(coeffs[j].abs());
            orthogonalize(&mut w, &basis);
            orthogonalize(&mut w, &basis);
            let b = norm(&w);
            scale = scale.max(b);
            residual = b;

            if basis.len() >= k {
                let (vals, vecs) = symmetric_eigen(&dense(&proj));
                done = (0..k).all(|i| {
                    b * vecs[[j, i]].abs()
                        <= CONVERGENCE_TOLERANCE * vals[i].abs().max(f64::MIN_POSITIVE)
                });
            }
            if done || basis.len() == n {
                break;
            }
            if b <= 1e-10 * scale.max(1.0) {
                residual = 0.0;
                match random_unit(&basis) {
                    Some(v) => q = v,
                    None => break,
                }
            } else {
                q = w.iter().map(|x| x / b).collect();
            }
            next = Some(q.clone());
        }
        cycles += 1;
        if done || basis.len() == n || cycles > MAX_RESTARTS {
            break;
        }

        // Thick restart: keep the leading Ritz vectors, continue from the
        // residual direction.
        let (vals, vecs) = symmetric_eigen(&dense(&proj));
        let ritz: Vec<Vec<f64>> = (0..keep).map(|i| combine(&basis, &vecs, i, n)).collect();
        basis = ritz;
        proj = (0..keep)
            .map(|i| (0..keep).map(|j| if i == j { vals[i] } else { 0.0 }).collect())
            .collect();
        q = match next {
            Some(v) if residual > 0.0 => v,
            _ => match random_unit(&basis) {
                Some(v) => v,
                None => break,
            },
        };
    }

    let steps = basis.len();
    let (vals, vecs) = symmetric_eigen(&dense(&proj));
    let take = k.min(steps);
    let mut eigenvalues = Vec::with_capacity(take);
    let mut residual_norms = Vec::with_capacity(take);
    for (i, &theta) in vals.iter().enumerate().take(take) {
        let mut y = combine(&basis, &vecs, i, n);
        let ny = norm(&y);
        y.iter_mut().for_each(|x| *x /= ny);
        let hy = hvp(objective, params, &params.with_values(y.clone()))?;
        let r: f64 = hy
            .values
            .iter()
            .zip(&y)
            .map(|(h, yi)| (h - theta * yi).powi(2))
            .sum::<f64>()
            .sqrt();
        eigenvalues.push(theta);
        residual_norms.push(r / theta.abs().max(f64::MIN_POSITIVE));
    }
    let converged = take == k && residual_norms.iter().all(|r| *r <= RESIDUAL_TOLERANCE);
    if !converged {
        tracing::warn!(k, hvps, "Lanczos did not reach the residual tolerance");
    }
    Ok(HessianSpectrum {
        k,
        eigenvalues,
        residual_norms,
        iterations: hvps,
        converged,
    })
}

fn combine(basis: &[Vec<f64>], vecs: &Array2<f64>, col: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for (j, v) in basis.iter().enumerate() {
        let c = vecs[[j, col]];
        for (yi, vi) in y.iter_mut().zip(v) {
            *yi += c * vi;
        }
    }
    y
}

fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    for v in basis {
        let c = dot(w, v);
        for (wi, vi) in w.iter_mut().zip(v) {
            *wi -= c * vi;
        }
    }
}

fn dense(rows: &[Vec<f64>]) -> Array2<f64> {
    let m = rows.len();
    Array2::from_shape_fn((m, m), |(i, j)| rows[i][j])
}
