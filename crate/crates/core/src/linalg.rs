//! Small dense symmetric linear algebra on row-major slices.
//!
//! Covariance matrices here are tiny (d ≤ a handful) and are decomposed once
//! per simulated node, so the routines work in caller-provided buffers
//! instead of allocating.

use crate::error::{Error, Result};

/// Relative asymmetry above which a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigen decomposition `c = V diag(w) V^T` of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    dim: usize,
    /// Eigenvalues, unsorted.
    pub values: Vec<f64>,
    /// Eigenvectors stored column-wise: vector `j` is `vectors[k * d + j]`.
    pub vectors: Vec<f64>,
    scratch: Vec<f64>,
}

impl SymEigen {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; dim],
            vectors: vec![0.0; dim * dim],
            scratch: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Decompose `c` with cyclic Jacobi rotations.
    pub fn decompose(&mut self, c: &[f64]) -> Result<()> {
        let d = self.dim;
        if c.len() != d * d {
            return Err(Error::ShapeMismatch(format!(
                "expected a {d}x{d} matrix, got {} entries",
                c.len()
            )));
        }
        check_symmetric(c, d)?;
        if d == 1 {
            self.values[0] = c[0];
            self.vectors[0] = 1.0;
            return Ok(());
        }
        let a = &mut self.scratch;
        a.copy_from_slice(c);
        let v = &mut self.vectors;
        v.fill(0.0);
        for k in 0..d {
            v[k * d + k] = 1.0;
        }
        for _sweep in 0..64 {
            let mut off = 0.0;
            let mut diag = 0.0;
            for p in 0..d {
                diag += a[p * d + p] * a[p * d + p];
                for q in (p + 1)..d {
                    off += a[p * d + q] * a[p * d + q];
                }
            }
            if off <= f64::EPSILON * f64::EPSILON * diag || off == 0.0 {
                break;
            }
            for p in 0..d {
                for q in (p + 1)..d {
                    let apq = a[p * d + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = a[p * d + p];
                    let aqq = a[q * d + q];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let cs = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * cs;
                    for k in 0..d {
                        let akp = a[k * d + p];
                        let akq = a[k * d + q];
                        a[k * d + p] = cs * akp - sn * akq;
                        a[k * d + q] = sn * akp + cs * akq;
                    }
                    for k in 0..d {
                        let apk = a[p * d + k];
                        let aqk = a[q * d + k];
                        a[p * d + k] = cs * apk - sn * aqk;
                        a[q * d + k] = sn * apk + cs * aqk;
                    }
                    for k in 0..d {
                        let vkp = v[k * d + p];
                        let vkq = v[k * d + q];
                        v[k * d + p] = cs * vkp - sn * vkq;
                        v[k * d + q] = sn * vkp + cs * vkq;
                    }
                }
            }
        }
        for k in 0..d {
            self.values[k] = a[k * d + k];
        }
        Ok(())
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Eigenvalues below `rel_tol * max(λ_max, 0)` are treated as zero.
    pub fn cutoff(&self, rel_tol: f64) -> f64 {
        rel_tol * self.max_value().max(0.0)
    }

    /// `Σ_j f(w_j) v_j v_j^T x`, the spectral function `f(c)` applied to `x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64], f: impl Fn(f64) -> f64) {
        let d = self.dim;
        out[..d].fill(0.0);
        for j in 0..d {
            let fw = f(self.values[j]);
            if fw == 0.0 {
                continue;
            }
            let mut proj = 0.0;
            for k in 0..d {
                proj += self.vectors[k * d + j] * x[k];
            }
            let s = fw * proj;
            for k in 0..d {
                out[k] += s * self.vectors[k * d + j];
            }
        }
    }

    /// Symmetric PSD square root, eigenvalues clamped at 0 below
    /// `clamp_tol * λ_max`. Writes a row-major matrix.
    pub fn sqrt_into(&self, clamp_tol: f64, out: &mut [f64]) {
        let d = self.dim;
        let cut = self.cutoff(clamp_tol);
        out[..d * d].fill(0.0);
        for j in 0..d {
            let w = self.values[j];
            if w <= cut {
                continue;
            }
            let r = w.sqrt();
            for a in 0..d {
                let va = self.vectors[a * d + j] * r;
                for b in 0..d {
                    out[a * d + b] += va * self.vectors[b * d + j];
                }
            }
        }
    }
}

pub fn check_symmetric(c: &[f64], d: usize) -> Result<()> {
    let scale = c.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in (i + 1)..d {
            worst = worst.max((c[i * d + j] - c[j * d + i]).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) && worst > 0.0 {
        return Err(Error::NotSymmetric { asymmetry: worst });
    }
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    Ok(())
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn norm_sq(x: &[f64]) -> f64 {
    dot(x, x)
}

/// `out = c x` for a row-major `d x d` matrix.
#[inline]
pub fn mat_vec(c: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        out[i] = dot(&c[i * d..(i + 1) * d], x);
    }
}

/// Frobenius norm.
pub fn frobenius(c: &[f64]) -> f64 {
    norm_sq(c).sqrt()
}
