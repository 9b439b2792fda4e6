use log::warn;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgResult {
    pub iterations: usize,
    /// Final `‖b − Ax‖ / ‖b‖`.
    pub relative_residual: f64,
    pub converged: bool,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradient for a symmetric positive
/// definite `A`, starting from the contents of `x`.
///
/// `apply_a(v, out)` must write `A v` into `out`. `inv_diag` holds the
/// reciprocal preconditioner; pass ones for plain CG.
pub fn pcg(
    apply_a: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    inv_diag: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> CgResult {
    let n = b.len();
    assert_eq!(x.len(), n);
    assert_eq!(inv_diag.len(), n);
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        x.fill(0.0);
        return CgResult { iterations: 0, relative_residual: 0.0, converged: true };
    }
    let mut ap = vec![0.0; n];
    apply_a(x, &mut ap);
    let mut r: Vec<f64> = b.iter().zip(&ap).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = dot(&r, &r).sqrt() / b_norm;
    let mut it = 0;
    while res > tol && it < max_iter {
        apply_a(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        res = dot(&r, &r).sqrt() / b_norm;
        it += 1;
    }
    let converged = res <= tol;
    if !converged {
        warn!("CG stopped after {it} iterations with relative residual {res:.3e}");
    }
    CgResult { iterations: it, relative_residual: res, converged }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn solves_random_spd_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 30;
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let a = &m * m.transpose() + DMatrix::identity(n, n) * 0.5;
        let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let exact = a.clone().cholesky().unwrap().solve(&b);
        let inv_diag: Vec<f64> = (0..n).map(|i| 1.0 / a[(i, i)]).collect();
        let mut x = vec![0.0; n];
        let res = pcg(
            |v, out| {
                let r = &a * DVector::from_column_slice(v);
                out.copy_from_slice(r.as_slice());
            },
            b.as_slice(),
            &inv_diag,
            &mut x,
            1e-12,
            500,
        );
        assert!(res.converged);
        for i in 0..n {
            assert!((x[i] - exact[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_rhs() {
        let mut x = vec![3.0; 4];
        let r = pcg(|v, o| o.copy_from_slice(v), &[0.0; 4], &[1.0; 4], &mut x, 1e-6, 10);
        assert!(r.converged);
        assert_eq!(x, vec![0.0; 4]);
    }

    #[test]
    fn reports_non_convergence() {
        let n = 50;
        let diag: Vec<f64> = (1..=n).map(|i| (i * i) as f64).collect();
        let b = vec![1.0; n];
        let mut x = vec![0.0; n];
        let r = pcg(
            |v, o| {
                for i in 0..n {
                    o[i] = diag[i] * v[i];
                }
            },
            &b,
            &[1.0; 50],
            &mut x,
            1e-14,
            2,
        );
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
        assert!(r.relative_residual > 1e-14);
    }
}
