//! Dense kernels shared by the analysis modules.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Matrix exponential by scaling and squaring with a degree-13 Padé approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    const THETA13: f64 = 5.371920351148152;
    let norm = one_norm(a);
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let a = a * 2f64.powi(-s);
    let b = &PADE13;
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let w = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &id * b[1];
    let u = &a * w;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &id * b[0];
    let numer = &v + &u;
    let denom = &v - &u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .expect("Padé denominator is nonsingular for scaled arguments");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// 2-norm condition number from singular values. Infinite when singular.
pub fn cond2(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn to_complex(a: &DMatrix<f64>) -> DMatrix<Complex64> {
    a.map(|v| Complex64::new(v, 0.0))
}

/// Evaluates c (sI - A)^{-1} b for a complex right-hand side.
pub fn resolvent_apply(
    a: &DMatrix<f64>,
    b: &DVector<Complex64>,
    c: &DVector<f64>,
    s: Complex64,
) -> Option<Complex64> {
    let n = a.nrows();
    if n == 0 {
        return Some(Complex64::new(0.0, 0.0));
    }
    let mut m = to_complex(a) * Complex64::new(-1.0, 0.0);
    for i in 0..n {
        m[(i, i)] += s;
    }
    let lu = m.lu();
    let x = lu.solve(b)?;
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let scale = a.iter().fold(s.norm(), |acc, v| acc.max(v.abs()));
    // reject numerically singular pivots
    let u = lu.u();
    let min_pivot = (0..n).map(|i| u[(i, i)].norm()).fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e3 * f64::EPSILON * scale.max(1.0) {
        return None;
    }
    Some(
        c.iter()
            .zip(x.iter())
            .map(|(ci, xi)| xi * *ci)
            .sum::<Complex64>(),
    )
}

/// Solves A^T P + P A + Q = 0 through the Kronecker form.
pub fn lyap(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let solver = LyapSolver::new(a)?;
    Ok(solver.solve(q))
}

/// Factored Lyapunov operator P -> A^T P + P A for repeated solves.
pub struct LyapSolver {
    n: usize,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl LyapSolver {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let nn = n * n;
        let mut k = DMatrix::<f64>::zeros(nn, nn);
        // column-major vec: vec(A^T P) = (I ⊗ A^T) vec P, vec(P A) = (A^T ⊗ I) vec P
        for j in 0..n {
            for i in 0..n {
                let row = i + j * n;
                for l in 0..n {
                    k[(row, l + j * n)] += a[(l, i)];
                    k[(row, i + l * n)] += a[(l, j)];
                }
            }
        }
        let lu = k.lu();
        if !lu.is_invertible() {
            return Err(Error::Numeric(
                "Lyapunov operator is singular (A has eigenvalues summing to zero)".into(),
            ));
        }
        Ok(Self { n, lu })
    }

    pub fn solve(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n;
        let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
        let x = self.lu.solve(&rhs).expect("checked invertible");
        let p = DMatrix::from_column_slice(n, n, x.as_slice());
        (&p + p.transpose()) * 0.5
    }
}

/// Diagonal balancing with powers of two. Returns d such that
/// diag(d)^{-1} A diag(d) has comparable row and column norms.
pub fn balance(a: &DMatrix<f64>) -> DVector<f64> {
    let n = a.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut m = a.clone();
    let radix = 2.0f64;
    let mut converged = false;
    let mut sweeps = 0;
    while !converged && sweeps < 200 {
        converged = true;
        sweeps += 1;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += m[(j, i)].abs();
                    r += m[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut cc = c;
            let g0 = r / radix;
            while cc < g0 {
                f *= radix;
                cc *= radix * radix;
            }
            let g1 = r * radix;
            while cc >= g1 {
                f /= radix;
                cc /= radix * radix;
            }
            if (cc + r) / f < 0.95 * s {
                converged = false;
                d[i] *= f;
                for j in 0..n {
                    m[(i, j)] /= f;
                    m[(j, i)] *= f;
                }
            }
        }
    }
    d
}

/// Applies x = diag(d) z: returns diag(d)^{-1} A diag(d).
pub fn similarity_scale(a: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * d[j] / d[i])
}

pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues()
}

pub fn sym_min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    sym_eigenvalues(m).min()
}

pub fn sym_max_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    sym_eigenvalues(m).max()
}

/// Orthonormal basis of the null space of `k` (columns): right singular
/// vectors whose singular value is at most `rel_tol` times the largest.
/// `rel_tol` is raised to `ε·max(rows, n)` if smaller.
pub fn null_space(k: &DMatrix<f64>, n: usize, rel_tol: f64) -> DMatrix<f64> {
    if k.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // pad to at least n rows so the SVD returns a full right basis
    let m = k.nrows().max(n);
    let mut padded = DMatrix::zeros(m, n);
    padded.rows_mut(0, k.nrows()).copy_from(k);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let sv = &svd.singular_values;
    let top = sv.max();
    let tol = rel_tol.max(f64::EPSILON * m as f64) * top;
    let cols: Vec<_> = (0..sv.len())
        .filter(|&i| sv[i] <= tol)
        .map(|i| vt.row(i).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(expm(&z), DMatrix::identity(3, 3));
    }

    #[test]
    fn expm_rotation_generator() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]) * std::f64::consts::FRAC_PI_2;
        let e = expm(&a);
        let want = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!((e - want).abs().max() < 1e-14);
    }

    #[test]
    fn expm_matches_nalgebra_on_stiff_matrix() {
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 0.0, 0.0, -100.0, -20.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 100.0, 0.0, -1e6,
                -2000.0,
            ],
        ) * 0.01;
        let mine = expm(&a);
        let theirs = a.clone().exp();
        let rel = (&mine - &theirs).norm() / theirs.norm();
        assert!(rel < 1e-10, "rel {rel}");
    }

    #[test]
    fn expm_jordan_block() {
        let a = DMatrix::from_row_slice(2, 2, &[-3.0, 1.0, 0.0, -3.0]);
        let e = expm(&a);
        let x = (-3.0f64).exp();
        let want = DMatrix::from_row_slice(2, 2, &[x, x, 0.0, x]);
        assert!((e - want).abs().max() < 1e-15);
    }

    #[test]
    fn lyap_residual_small() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 2.0, 0.0, 0.0, -3.0, 1.0, 0.5, 0.0, -2.0]);
        let q = DMatrix::identity(3, 3);
        let p = lyap(&a, &q).unwrap();
        let r = a.transpose() * &p + &p * &a + &q;
        assert!(r.norm() < 1e-12);
        assert!(sym_min_eig(&p) > 0.0);
    }

    #[test]
    fn lyap_scalar_closed_form() {
        let a = DMatrix::from_element(1, 1, -4.0);
        let p = lyap(&a, &DMatrix::from_element(1, 1, 2.0)).unwrap();
        assert!((p[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn lyap_rejects_singular_operator() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(lyap(&a, &DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn balance_reduces_spread() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 1e6, 0.0, 1e-6, 1.0, 1e4, 0.0, 1e-4, 1.0]);
        let d = balance(&a);
        let b = similarity_scale(&a, &d);
        assert!(b.abs().max() < 1e3);
        for v in d.iter() {
            assert_eq!(v.log2().fract(), 0.0);
        }
    }

    #[test]
    fn null_space_orthonormal() {
        let k = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        let z = null_space(&k, 3, 1e-12);
        assert_eq!(z.ncols(), 2);
        assert!((&k * &z).norm() < 1e-14);
        assert!((z.transpose() * &z - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn resolvent_integrator_at_one() {
        let a = DMatrix::zeros(1, 1);
        let b = DVector::from_element(1, Complex64::new(1.0, 0.0));
        let c = DVector::from_element(1, 1.0);
        let g = resolvent_apply(&a, &b, &c, Complex64::new(0.0, 1.0)).unwrap();
        assert!((g - Complex64::new(0.0, -1.0)).norm() < 1e-15);
        assert!(resolvent_apply(&a, &b, &c, Complex64::new(0.0, 0.0)).is_none());
    }
}
