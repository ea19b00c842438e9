// SPDX-License-Identifier: MIT OR Apache-2.0

//! Thin singular value decomposition by one-sided (Hestenes) Jacobi
//! rotations, computed in `f64`.

use super::Tensor;
use crate::error::{Error, Result};

/// Relative off-diagonal threshold below which a column pair counts as
/// orthogonal.
pub const SVD_TOLERANCE: f64 = 1e-10;

/// Maximum number of Jacobi sweeps before giving up.
pub const SVD_MAX_SWEEPS: usize = 60;

/// `w = U diag(sigma) Vt` with `r = min(d, d')`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `d x r`, orthonormal columns.
    pub u: Tensor,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f32>,
    /// `r x d'`, orthonormal rows.
    pub vt: Tensor,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U diag(sigma) Vt` recomputed in `f64`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let (d, r) = (self.u.rows(), self.sigma.len());
        let d2 = self.vt.cols();
        let mut out = vec![0.0f64; d * d2];
        for i in 0..d {
            for s in 0..r {
                let us = f64::from(self.u.at(i, s)) * f64::from(self.sigma[s]);
                if us == 0.0 {
                    continue;
                }
                for j in 0..d2 {
                    out[i * d2 + j] += us * f64::from(self.vt.at(s, j));
                }
            }
        }
        out
    }
}

/// Column-major working matrix.
struct Columns {
    rows: usize,
    data: Vec<f64>,
}

impl Columns {
    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn pair_mut(&mut self, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(p < q);
        let (lo, hi) = self.data.split_at_mut(q * self.rows);
        (
            &mut lo[p * self.rows..(p + 1) * self.rows],
            &mut hi[..self.rows],
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (u, v) = (*a, *b);
        *a = c * u - s * v;
        *b = s * u + c * v;
    }
}

/// Thin SVD of a `d x d'` matrix.
pub fn thin_svd(w: &Tensor) -> Result<SvdResult> {
    let (m, n) = w.dims2()?;
    if m == 0 || n == 0 {
        return Err(Error::Dimension("thin_svd of an empty matrix".into()));
    }
    if !w.is_finite() {
        return Err(Error::Numeric {
            message: "thin_svd input contains non-finite values".into(),
            residual: f64::NAN,
        });
    }
    if m >= n {
        let (u, sigma, v) = jacobi_tall(w.data(), m, n, false)?;
        Ok(assemble(u, sigma, v, m, n, false))
    } else {
        // svd(w^T) = V S U^T
        let (u, sigma, v) = jacobi_tall(w.data(), n, m, true)?;
        Ok(assemble(u, sigma, v, n, m, true))
    }
}

/// One-sided Jacobi on a tall `m x n` matrix (`m >= n`). When `transposed`
/// is set, `src` holds the row-major `n x m` matrix whose transpose is
/// decomposed. Returns column-major `U` (m x n), sigma, column-major `V`
/// (n x n), sorted by descending sigma.
fn jacobi_tall(
    src: &[f32],
    m: usize,
    n: usize,
    transposed: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut a = Columns {
        rows: m,
        data: vec![0.0; m * n],
    };
    for j in 0..n {
        for i in 0..m {
            let v = if transposed {
                src[j * m + i]
            } else {
                src[i * n + j]
            };
            a.data[j * m + i] = f64::from(v);
        }
    }
    let mut v = Columns {
        rows: n,
        data: vec![0.0; n * n],
    };
    for j in 0..n {
        v.data[j * n + j] = 1.0;
    }

    let frob2: f64 = a.data.iter().map(|x| x * x).sum();
    let negligible = (64.0 * f64::EPSILON) * (64.0 * f64::EPSILON) * frob2;

    let mut converged = frob2 == 0.0;
    let mut worst = 0.0f64;
    let mut norms: Vec<f64> = (0..n).map(|j| dot(a.col(j), a.col(j))).collect();
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        worst = 0.0;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(a.col(p), a.col(q));
                let off = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(off);
                if off <= SVD_TOLERANCE {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (cp, cq) = a.pair_mut(p, q);
                rotate(cp, cq, c, s);
                let (vp, vq) = v.pair_mut(p, q);
                rotate(vp, vq, c, s);
                norms[p] = dot(a.col(p), a.col(p));
                norms[q] = dot(a.col(q), a.col(q));
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Numeric {
            message: format!("thin_svd did not converge in {SVD_MAX_SWEEPS} sweeps"),
            residual: worst,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sig: Vec<f64> = (0..n).map(|j| norms[j].sqrt()).collect();
    order.sort_by(|&x, &y| sig[y].total_cmp(&sig[x]).then(x.cmp(&y)));

    let mut u = vec![0.0f64; m * n];
    let mut sigma = Vec::with_capacity(n);
    let mut vs = vec![0.0f64; n * n];
    let mut missing = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = sig[src];
        let col = a.col(src);
        if norms[src] > negligible {
            for i in 0..m {
                u[dst * m + i] = col[i] / s;
            }
            sigma.push(s);
        } else {
            missing.push(dst);
            sigma.push(0.0);
        }
        vs[dst * n..(dst + 1) * n].copy_from_slice(v.col(src));
    }
    complete_orthonormal(&mut u, m, n, &missing);
    Ok((u, sigma, vs))
}

/// Fills the listed columns of a column-major `m x n` matrix with unit
/// vectors orthogonal to every other column (Gram-Schmidt over the
/// standard basis).
fn complete_orthonormal(u: &mut [f64], m: usize, n: usize, missing: &[usize]) {
    let mut filled: Vec<usize> = (0..n).filter(|j| !missing.contains(j)).collect();
    let mut basis = 0;
    for &target in missing {
        while basis < m {
            let mut cand = vec![0.0f64; m];
            cand[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for &j in &filled {
                    let col = &u[j * m..(j + 1) * m];
                    let proj = dot(col, &cand);
                    for i in 0..m {
                        cand[i] -= proj * col[i];
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 0.5 {
                for i in 0..m {
                    u[target * m + i] = cand[i] / norm;
                }
                filled.push(target);
                break;
            }
        }
    }
}

fn assemble(
    u: Vec<f64>,
    sigma: Vec<f64>,
    v: Vec<f64>,
    m: usize,
    n: usize,
    transposed: bool,
) -> SvdResult {
    // u: column-major m x n, v: column-major n x n (columns are right vectors)
    let r = n;
    let col_major_to_rows = |data: &[f64], rows: usize, cols: usize| -> Vec<f32> {
        // returns row-major rows x cols
        let mut out = vec![0.0f32; rows * cols];
        for j in 0..cols {
            for i in 0..rows {
                out[i * cols + j] = data[j * rows + i] as f32;
            }
        }
        out
    };
    let sigma: Vec<f32> = sigma.into_iter().map(|s| s as f32).collect();
    if !transposed {
        let u_t = Tensor::new(vec![m, r], col_major_to_rows(&u, m, r)).expect("shape");
        // Vt rows are the columns of v
        let vt_data: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        let vt = Tensor::new(vec![r, n], vt_data).expect("shape");
        SvdResult { u: u_t, sigma, vt }
    } else {
        // decomposed w^T (m x n) = U S V^T, so w = V S U^T
        let u_out = Tensor::new(vec![n, r], col_major_to_rows(&v, n, r)).expect("shape");
        let vt_data: Vec<f32> = u.iter().map(|&x| x as f32).collect();
        let vt = Tensor::new(vec![r, m], vt_data).expect("shape");
        SvdResult {
            u: u_out,
            sigma,
            vt,
        }
    }
}
