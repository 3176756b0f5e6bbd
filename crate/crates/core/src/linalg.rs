//! Thin SVD (one-sided Jacobi) and the row-wise distribution helpers.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Guard added inside logs and norm divisions.
pub const EPS: f64 = 1e-12;

/// Thin singular value decomposition `m = u · diag(s) · vt`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `a x k`, orthonormal columns.
    pub u: Tensor,
    /// `k` values, non-negative and descending.
    pub s: Vec<f64>,
    /// `k x b`, orthonormal rows.
    pub vt: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        let k = self.s.len();
        let mut us = self.u.clone();
        let a = us.rows();
        let d = us.data_mut();
        for i in 0..a {
            for j in 0..k {
                d[i * k + j] *= self.s[j];
            }
        }
        us.matmul(&self.vt).expect("svd factors are conformant")
    }

    /// Right singular vector `j` as a plain vector.
    pub fn right_vector(&self, j: usize) -> Vec<f64> {
        self.vt.row(j).to_vec()
    }

    pub fn left_vector(&self, j: usize) -> Vec<f64> {
        let k = self.s.len();
        (0..self.u.rows()).map(|i| self.u.data()[i * k + j]).collect()
    }
}

/// Thin SVD with `min(a, b)` components.
pub fn svd(m: &Tensor) -> Result<Svd> {
    if m.ndim() != 2 || m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Shape(format!("svd needs a non-empty matrix, got {:?}", m.shape())));
    }
    if !m.all_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if m.rows() >= 2 * m.cols() {
        // Jacobi on the small triangular factor: A = QR, R = U_R S Vᵀ
        let (q, r) = householder_qr(m);
        let (ur, s, v) = jacobi_tall(&r)?;
        Ok(Svd { u: q.matmul(&ur)?, s, vt: v.transpose() })
    } else if m.rows() >= m.cols() {
        let (u, s, v) = jacobi_tall(m)?;
        Ok(Svd { u, s, vt: v.transpose() })
    } else {
        // m = (mᵀ)ᵀ = (U S Vᵀ)ᵀ = V S Uᵀ
        let t = svd(&m.transpose())?;
        Ok(Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        })
    }
}

/// Thin Householder QR of an `m x n` matrix, `m >= n`: `Q (m x n)`, `R (n x n)`.
fn householder_qr(a: &Tensor) -> (Tensor, Tensor) {
    let (m, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for k in 0..n {
        let x = &cols[k][k..];
        let norm = dot(x, x).sqrt();
        if norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vn = dot(&v, &v).sqrt();
        if vn == 0.0 {
            reflectors.push(None);
            continue;
        }
        v.iter_mut().for_each(|t| *t /= vn);
        for col in cols.iter_mut().skip(k) {
            let tail = &mut col[k..];
            let proj = 2.0 * dot(&v, tail);
            tail.iter_mut().zip(&v).for_each(|(t, vi)| *t -= proj * vi);
        }
        reflectors.push(Some(v));
    }
    let mut r = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..=j {
            r[i * n + j] = col[i];
        }
    }
    // Q = H_0 ⋯ H_{n−1} applied to the first n unit vectors
    let mut q_cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for (k, v) in reflectors.iter().enumerate().rev() {
        let Some(v) = v else { continue };
        for col in q_cols.iter_mut() {
            let tail = &mut col[k..];
            let proj = 2.0 * dot(v, tail);
            tail.iter_mut().zip(v).for_each(|(t, vi)| *t -= proj * vi);
        }
    }
    let mut q = vec![0.0; m * n];
    for (j, col) in q_cols.iter().enumerate() {
        for i in 0..m {
            q[i * n + j] = col[i];
        }
    }
    (Tensor::from_parts(vec![m, n], q), Tensor::from_parts(vec![n, n], r))
}

/// One-sided Jacobi on an `m x n` matrix with `m >= n`. Returns `U (m x n)`,
/// `S (n)` and `V (n x n)`.
fn jacobi_tall(a: &Tensor) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let (m, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = f64::EPSILON * (m as f64).sqrt();
    // columns this small are rounding noise of a rank-deficient input;
    // rotating them against each other never settles
    let negligible = {
        let f = a.norm() * f64::EPSILON * (m.max(n) as f64);
        f * f
    };
    let cap = 100 * n.max(1);
    let mut converged = n < 2;
    let mut sweeps = 0;
    let mut residual = 0.0_f64;
    while !converged && sweeps < cap {
        sweeps += 1;
        let mut rotated = false;
        residual = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || alpha <= negligible || beta <= negligible {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(ratio);
                if ratio <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }

    let mut sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    if !converged {
        let max = sigma.iter().cloned().fold(0.0, f64::max);
        let min = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::NoConvergence {
            rows: a.rows(),
            cols: a.cols(),
            sweeps,
            frobenius: a.norm(),
            residual,
            condition: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let smax = sigma[order[0]];
    let zero_tol = smax * f64::EPSILON * (m.max(n) as f64);

    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut s_sorted = Vec::with_capacity(n);
    let mut v_sorted = Vec::with_capacity(n);
    for &j in &order {
        let sj = sigma[j];
        if sj > zero_tol && sj > 0.0 {
            u_cols.push(Some(cols[j].iter().map(|x| x / sj).collect()));
        } else {
            sigma[j] = sj.max(0.0);
            u_cols.push(None);
        }
        s_sorted.push(sigma[j]);
        v_sorted.push(v[j].clone());
    }
    let u_cols = complete_orthonormal(u_cols, m);

    let mut u = vec![0.0; m * n];
    for (j, col) in u_cols.iter().enumerate() {
        for i in 0..m {
            u[i * n + j] = col[i];
        }
    }
    let mut vm = vec![0.0; n * n];
    for (j, col) in v_sorted.iter().enumerate() {
        for i in 0..n {
            vm[i * n + j] = col[i];
        }
    }
    Ok((
        Tensor::from_parts(vec![m, n], u),
        s_sorted,
        Tensor::from_parts(vec![n, n], vm),
    ))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the `None` slots with unit vectors orthogonal to every other column,
/// taking the standard basis vector with the largest residual each time.
pub(crate) fn complete_orthonormal(cols: Vec<Option<Vec<f64>>>, dim: usize) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    assert!(cols.len() <= dim, "cannot complete more than {dim} orthonormal vectors");
    let mut out = Vec::with_capacity(cols.len());
    for col in cols {
        match col {
            Some(c) => out.push(c),
            None => {
                // ‖(I − DDᵀ)e_i‖² = 1 − Σ_d d_i², so the best basis vector
                // is found without orthogonalizing every candidate
                let best = (0..dim)
                    .map(|i| (i, 1.0 - done.iter().map(|d| d[i] * d[i]).sum::<f64>()))
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                    .expect("dim > 0")
                    .0;
                let mut cand = vec![0.0; dim];
                cand[best] = 1.0;
                // two Gram-Schmidt passes
                for _ in 0..2 {
                    for d in &done {
                        let proj = dot(&cand, d);
                        cand.iter_mut().zip(d).for_each(|(x, y)| *x -= proj * y);
                    }
                }
                let nrm = dot(&cand, &cand).sqrt();
                cand.iter_mut().for_each(|x| *x /= nrm);
                done.push(cand.clone());
                out.push(cand);
            }
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let c = m.last_dim();
    let mut out = m.data().to_vec();
    for row in out.chunks_mut(c) {
        softmax_in_place(row);
    }
    Tensor::from_parts(m.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Mean over rows of `Σ p · ln(p / q)`, logs guarded by [`EPS`].
pub fn kld_rows(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::Shape(format!("kld {:?} vs {:?}", p.shape(), q.shape())));
    }
    let c = p.last_dim();
    let rows = p.len() / c;
    let total: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b)| a * ((a + EPS).ln() - (b + EPS).ln()))
        .sum();
    Ok(total / rows as f64)
}
