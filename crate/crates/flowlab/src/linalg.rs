//! Small dense linear algebra on flat row-major buffers.
//!
//! State dimensions are tiny (d <= 4 at desk scale) but the integrators take
//! billions of steps, so the hot kernels work on plain `&[f64]` buffers with
//! explicit loops. Conventions follow the variational calculus used
//! throughout the crate:
//!
//! - gradients are stored "differentiation index first": for a map h,
//!   `grad[i][j] = d h^j / d x_i`, so the transpose of `grad` is the usual
//!   Jacobian;
//! - a (2,1)-tensor packs second derivatives as
//!   `t[(i,j),k] = d^2 h^k / (d x_i d x_j)`, symmetric in (i, j);
//! - the tensor product of two matrices acts on (2,1)-tensors as
//!   `(A (x) B) t [(i,j),m] = sum_{k,l} A[i,k] B[j,l] t[(k,l),m]`.

use nalgebra::DMatrix;

/// Row-major index into a d x c matrix.
#[inline]
pub fn midx(row: usize, col: usize, cols: usize) -> usize {
    row * cols + col
}

/// (2,1)-tensor over R^d: `data[(i*d + j)*d + k] = t[(i,j),k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    d: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d: usize) -> Self {
        Tensor3 { d, data: vec![0.0; d * d * d] }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.d + j) * self.d + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.d + j) * self.d + k] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn copy_from(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.d, other.d);
        self.data.copy_from_slice(&other.data);
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest deviation from symmetry in the first two indices.
    pub fn symmetry_defect(&self) -> f64 {
        let d = self.d;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..i {
                for k in 0..d {
                    worst = worst.max((self.get(i, j, k) - self.get(j, i, k)).abs());
                }
            }
        }
        worst
    }

    /// v_k = sum_{i,j} t[(i,j),k] m[i,j] for a d x d matrix m.
    ///
    /// This is the contraction `t' m` pairing a (2,1)-tensor with a matrix,
    /// e.g. the Hessian-weighted term `(grad^2 X)' Delta a`.
    pub fn contract_matrix(&self, m: &[f64], out: &mut [f64]) {
        let d = self.d;
        debug_assert_eq!(m.len(), d * d);
        debug_assert_eq!(out.len(), d);
        for k in 0..d {
            let mut acc = 0.0;
            for i in 0..d {
                for j in 0..d {
                    acc += self.get(i, j, k) * m[midx(i, j, d)];
                }
            }
            out[k] = acc;
        }
    }

    /// out[i,j] = sum_m t[(i,j),m] w[m]; contracts the component index with a
    /// vector (a noise increment, say), leaving a d x d matrix.
    pub fn contract_component(&self, w: &[f64], out: &mut [f64]) {
        let d = self.d;
        debug_assert_eq!(w.len(), d);
        debug_assert_eq!(out.len(), d * d);
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for m in 0..d {
                    acc += self.get(i, j, m) * w[m];
                }
                out[midx(i, j, d)] = acc;
            }
        }
    }
}

/// out = (j (x) j) t, i.e. out[(i,j),m] = sum_{k,l} J[i,k] J[j,l] t[(k,l),m].
///
/// `j` is d x d row-major. Two-pass contraction keeps the cost at O(d^4).
pub fn outer_apply(j: &[f64], t: &Tensor3, scratch: &mut Tensor3, out: &mut Tensor3) {
    let d = t.dim();
    debug_assert_eq!(j.len(), d * d);
    // scratch[(i,l),m] = sum_k J[i,k] t[(k,l),m]
    for i in 0..d {
        for l in 0..d {
            for m in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += j[midx(i, k, d)] * t.get(k, l, m);
                }
                scratch.set(i, l, m, acc);
            }
        }
    }
    // out[(i,j),m] = sum_l J[j,l] scratch[(i,l),m]
    for i in 0..d {
        for jj in 0..d {
            for m in 0..d {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += j[midx(jj, l, d)] * scratch.get(i, l, m);
                }
                out.set(i, jj, m, acc);
            }
        }
    }
}

/// out[(i,j),m] = sum_k t[(i,j),k] g[k,m]; right action of a matrix on the
/// component index (the `grad^2 X grad b` term of the Hessian equation).
pub fn tensor_mat_right(t: &Tensor3, g: &[f64], out: &mut Tensor3) {
    let d = t.dim();
    debug_assert_eq!(g.len(), d * d);
    for i in 0..d {
        for j in 0..d {
            for m in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += t.get(i, j, k) * g[midx(k, m, d)];
                }
                out.set(i, j, m, acc);
            }
        }
    }
}

/// y = M v for a row-major rows x cols matrix.
pub fn mat_vec(m: &[f64], v: &[f64], rows: usize, cols: usize, y: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(v.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for i in 0..rows {
        let mut acc = 0.0;
        for j in 0..cols {
            acc += m[midx(i, j, cols)] * v[j];
        }
        y[i] = acc;
    }
}

/// y_k = sum_i grad[i,k] v_i: pairing of a gradient matrix with a vector,
/// component-wise inner products `<grad h^k, v>`.
pub fn grad_t_vec(grad: &[f64], v: &[f64], d: usize, y: &mut [f64]) {
    debug_assert_eq!(grad.len(), d * d);
    debug_assert_eq!(v.len(), d);
    debug_assert_eq!(y.len(), d);
    for k in 0..d {
        let mut acc = 0.0;
        for i in 0..d {
            acc += grad[midx(i, k, d)] * v[i];
        }
        y[k] = acc;
    }
}

/// out = a b for square row-major d x d matrices.
pub fn mat_mul(a: &[f64], b: &[f64], d: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), d * d);
    debug_assert_eq!(b.len(), d * d);
    debug_assert_eq!(out.len(), d * d);
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += a[midx(i, k, d)] * b[midx(k, j, d)];
            }
            out[midx(i, j, d)] = acc;
        }
    }
}

pub fn identity(d: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), d * d);
    out.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..d {
        out[midx(i, i, d)] = 1.0;
    }
}

pub fn frobenius_norm(m: &[f64]) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn euclidean_norm(v: &[f64]) -> f64 {
    frobenius_norm(v)
}

/// Spectral norm (largest singular value) of a row-major rows x cols matrix.
/// Not for hot loops: goes through an SVD.
pub fn spectral_norm(m: &[f64], rows: usize, cols: usize) -> f64 {
    let mat = DMatrix::from_row_slice(rows, cols, m);
    mat.singular_values().max()
}

/// Largest eigenvalue of the symmetric part (A + A')/2 of a square matrix.
pub fn sym_part_lambda_max(m: &[f64], d: usize) -> f64 {
    let mut s = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            s[(i, j)] = 0.5 * (m[midx(i, j, d)] + m[midx(j, i, d)]);
        }
    }
    s.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Inverse square root of a symmetric positive definite matrix via its
/// eigendecomposition. Fails if any eigenvalue falls below `floor`.
pub fn sym_inv_sqrt(a: &[f64], d: usize, floor: f64) -> crate::Result<Vec<f64>> {
    let mat = DMatrix::from_row_slice(d, d, a);
    let eig = mat.symmetric_eigen();
    let mut out = vec![0.0; d * d];
    for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < floor {
            return Err(crate::Error::SingularDiffusion { eig: lam, floor });
        }
        let w = 1.0 / lam.sqrt();
        let q = eig.eigenvectors.column(idx);
        for i in 0..d {
            for j in 0..d {
                out[midx(i, j, d)] += w * q[i] * q[j];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tensor_contractions_match_direct_sums() {
        let d = 2;
        let mut t = Tensor3::zeros(d);
        // t[(i,j),k] = 1 + i + 2j + 4k, then symmetrized in (i,j).
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let v = 1.0 + i as f64 + 2.0 * j as f64 + 4.0 * k as f64;
                    let w = 1.0 + j as f64 + 2.0 * i as f64 + 4.0 * k as f64;
                    t.set(i, j, k, 0.5 * (v + w));
                }
            }
        }
        assert_eq!(t.symmetry_defect(), 0.0);

        let m = [1.0, 2.0, 3.0, 4.0];
        let mut v = [0.0; 2];
        t.contract_matrix(&m, &mut v);
        for k in 0..d {
            let mut acc = 0.0;
            for i in 0..d {
                for j in 0..d {
                    acc += t.get(i, j, k) * m[midx(i, j, d)];
                }
            }
            assert_relative_eq!(v[k], acc);
        }

        let w = [0.5, -1.5];
        let mut out = [0.0; 4];
        t.contract_component(&w, &mut out);
        assert_relative_eq!(out[midx(1, 0, d)], t.get(1, 0, 0) * w[0] + t.get(1, 0, 1) * w[1]);
    }

    #[test]
    fn outer_apply_is_identity_under_identity_matrix() {
        let d = 3;
        let mut t = Tensor3::zeros(d);
        for (idx, v) in t.data_mut().iter_mut().enumerate() {
            *v = idx as f64 * 0.1;
        }
        let mut eye = vec![0.0; d * d];
        identity(d, &mut eye);
        let mut scratch = Tensor3::zeros(d);
        let mut out = Tensor3::zeros(d);
        outer_apply(&eye, &t, &mut scratch, &mut out);
        assert_eq!(out, t);
    }

    #[test]
    fn outer_apply_scalar_case_is_j_squared() {
        let mut t = Tensor3::zeros(1);
        t.set(0, 0, 0, 3.0);
        let j = [2.0];
        let mut scratch = Tensor3::zeros(1);
        let mut out = Tensor3::zeros(1);
        outer_apply(&j, &t, &mut scratch, &mut out);
        assert_relative_eq!(out.get(0, 0, 0), 12.0);
    }

    #[test]
    fn grad_pairing_uses_columns_as_component_gradients() {
        // grad[i,k] = d h^k / d x_i; pairing must give <grad h^k, v>.
        let d = 2;
        let grad = [1.0, 2.0, 3.0, 4.0]; // grad h^0 = (1,3), grad h^1 = (2,4)
        let v = [10.0, 100.0];
        let mut y = [0.0; 2];
        grad_t_vec(&grad, &v, d, &mut y);
        assert_relative_eq!(y[0], 310.0);
        assert_relative_eq!(y[1], 420.0);
    }

    #[test]
    fn inv_sqrt_of_diagonal_matrix() {
        let a = [4.0, 0.0, 0.0, 9.0];
        let r = sym_inv_sqrt(&a, 2, 1e-12).unwrap();
        assert_relative_eq!(r[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(r[3], 1.0 / 3.0, epsilon = 1e-12);
        assert!(sym_inv_sqrt(&[-1.0], 1, 1e-12).is_err());
    }

    #[test]
    fn spectral_norm_of_known_matrix() {
        let m = [3.0, 0.0, 0.0, -5.0];
        assert_relative_eq!(spectral_norm(&m, 2, 2), 5.0, epsilon = 1e-12);
        assert_relative_eq!(sym_part_lambda_max(&m, 2), 3.0, epsilon = 1e-12);
    }
}
