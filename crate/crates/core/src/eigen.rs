//! Complex eigenpairs of a general real matrix.
//!
//! Eigenvalues come from the real Schur form; eigenvectors from inverse
//! iteration on the Hessenberg form, which costs `O(n²)` per eigenvalue.

use nalgebra::linalg::{Hessenberg, Schur};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 8;

/// LU factors of an upper Hessenberg matrix with adjacent-row pivoting.
struct HessLu {
    n: usize,
    u: Vec<Complex64>,
    mult: Vec<Complex64>,
    swap: Vec<bool>,
}

impl HessLu {
    fn factor(h: &DMatrix<f64>, shift: Complex64, floor: f64) -> Self {
        let n = h.nrows();
        let mut u: Vec<Complex64> = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                let v = Complex64::new(h[(i, j)], 0.0);
                if i == j {
                    v - shift
                } else {
                    v
                }
            })
            .collect();
        let mut mult = vec![Complex64::new(0.0, 0.0); n.saturating_sub(1)];
        let mut swap = vec![false; n.saturating_sub(1)];
        for k in 0..n.saturating_sub(1) {
            if u[(k + 1) * n + k].norm() > u[k * n + k].norm() {
                for j in k..n {
                    u.swap(k * n + j, (k + 1) * n + j);
                }
                swap[k] = true;
            }
            if u[k * n + k].norm() < floor {
                u[k * n + k] = Complex64::new(floor, 0.0);
            }
            let l = u[(k + 1) * n + k] / u[k * n + k];
            mult[k] = l;
            if l.norm() != 0.0 {
                for j in k..n {
                    let t = u[k * n + j];
                    u[(k + 1) * n + j] -= l * t;
                }
            }
        }
        if n > 0 && u[n * n - 1].norm() < floor {
            u[n * n - 1] = Complex64::new(floor, 0.0);
        }
        HessLu { n, u, mult, swap }
    }

    fn solve(&self, b: &mut [Complex64]) {
        let n = self.n;
        for k in 0..n.saturating_sub(1) {
            if self.swap[k] {
                b.swap(k, k + 1);
            }
            let t = b[k];
            b[k + 1] -= self.mult[k] * t;
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s -= self.u[i * n + j] * b[j];
            }
            b[i] = s / self.u[i * n + i];
        }
    }
}

fn normalize(v: &mut [Complex64]) -> f64 {
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|c| *c /= norm);
    }
    norm
}

fn dotc(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Rotates so the first largest-modulus component is real and positive.
fn fix_phase(v: &mut [Complex64]) {
    let mut best = 0;
    for (i, c) in v.iter().enumerate() {
        if c.norm() > v[best].norm() * (1.0 + 1e-12) {
            best = i;
        }
    }
    let p = v[best];
    if p.norm() > 0.0 {
        let rot = p.conj() / p.norm();
        v.iter_mut().for_each(|c| *c *= rot);
        v[best] = Complex64::new(v[best].re, 0.0);
    }
}

fn matvec(a: &DMatrix<f64>, v: &[Complex64]) -> Vec<Complex64> {
    let n = a.nrows();
    (0..n)
        .map(|i| (0..a.ncols()).map(|j| v[j] * a[(i, j)]).sum())
        .collect()
}

type Sweep = (f64, Complex64, Vec<Complex64>, Vec<Complex64>);

fn inverse_iteration(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    lu: &HessLu,
    mu: Complex64,
    start: &[Complex64],
    cluster: &[&Vec<Complex64>],
    tol: f64,
) -> Result<Sweep> {
    let n = a.nrows();
    let mut y = start.to_vec();
    let mut best: Option<Sweep> = None;
    for _ in 0..MAX_SWEEPS {
        for c in cluster {
            let p = dotc(c, &y);
            y.iter_mut().zip(c.iter()).for_each(|(yi, ci)| *yi -= p * ci);
        }
        normalize(&mut y);
        lu.solve(&mut y);
        if normalize(&mut y) == 0.0 || y.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Eigen("inverse iteration produced a non-finite vector".into()));
        }
        let mut v: Vec<Complex64> = (0..n).map(|i| (0..n).map(|j| y[j] * q[(i, j)]).sum()).collect();
        normalize(&mut v);
        let av = matvec(a, &v);
        let rq = dotc(&v, &av);
        let rq = if mu.im == 0.0 { Complex64::new(rq.re, 0.0) } else { rq };
        let res = av.iter().zip(&v).map(|(x, y)| (x - rq * y).norm_sqr()).sum::<f64>().sqrt();
        if best.as_ref().is_none_or(|b| res < b.0) {
            best = Some((res, rq, v, y.clone()));
        }
        if res <= 1e-3 * tol {
            break;
        }
    }
    Ok(best.expect("at least one sweep"))
}

/// Eigenpairs `(μ, v)` of `a` with `‖v‖₂ = 1`.
///
/// Conjugate eigenvalues receive exactly conjugated eigenvectors. Repeated
/// eigenvalues get mutually orthogonalized inverse-iteration vectors.
pub(crate) fn eig_general(a: &DMatrix<f64>) -> Result<Vec<(Complex64, Vec<Complex64>)>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Eigen("matrix is not square".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("matrix has non-finite entries".into()));
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 200 * n.max(10))
        .ok_or_else(|| Error::Eigen("Schur iteration did not converge".into()))?;
    let mut values: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    // positive imaginary member first within each conjugate pair
    let mut i = 0;
    while i + 1 < values.len() {
        if values[i].im != 0.0 && values[i] == values[i + 1].conj() {
            if values[i].im < 0.0 {
                values.swap(i, i + 1);
            }
            i += 2;
        } else {
            i += 1;
        }
    }

    let (q, h) = Hessenberg::new(a.clone()).unpack();
    let anorm = a.norm();
    let scale = anorm.max(f64::MIN_POSITIVE);
    let floor = f64::EPSILON * scale;
    let cluster_tol = 1e-8 * (1.0 + anorm);
    let tol = 1e-8 * (1.0 + anorm);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b6f_6f70);

    let mut out: Vec<(Complex64, Vec<Complex64>)> = Vec::with_capacity(n);
    // Hessenberg-basis vectors kept for cluster orthogonalization
    let mut hess_vecs: Vec<(Complex64, Vec<Complex64>)> = Vec::with_capacity(n);
    for &mu in &values {
        if mu.im < 0.0 {
            if let Some((pm, pv)) = out.iter().rev().find(|(m, _)| (m.conj() - mu).norm() <= cluster_tol && m.im > 0.0) {
                let v: Vec<Complex64> = pv.iter().map(|c| c.conj()).collect();
                out.push((pm.conj(), v));
                continue;
            }
        }
        let shift = mu + Complex64::new(1e-13 * (scale + mu.norm()), 0.0);
        let lu = HessLu::factor(&h, shift, floor);
        let cluster: Vec<&Vec<Complex64>> = hess_vecs
            .iter()
            .filter(|(m, _)| (m - mu).norm() <= cluster_tol)
            .map(|(_, v)| v)
            .collect();
        let start: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.random_range(0.5..1.5), 0.0)).collect();
        // defective eigenvalues have no independent vectors; retry without deflation
        let mut best = inverse_iteration(a, &q, &lu, mu, &start, &cluster, tol)?;
        if best.0 > tol && !cluster.is_empty() {
            best = inverse_iteration(a, &q, &lu, mu, &start, &[], tol)?;
        }
        let (res, rq, mut v, yv) = best;
        if res > tol {
            return Err(Error::Eigen(format!("eigen-residual {res:e} exceeds tolerance for μ = {mu}")));
        }
        if mu.im == 0.0 {
            v.iter_mut().for_each(|c| c.im = 0.0);
            normalize(&mut v);
        }
        fix_phase(&mut v);
        hess_vecs.push((mu, yv));
        out.push((rq, v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual(a: &DMatrix<f64>, mu: Complex64, v: &[Complex64]) -> f64 {
        let av = matvec(a, v);
        av.iter().zip(v).map(|(x, y)| (x - mu * y).norm_sqr()).sum::<f64>().sqrt()
    }

    #[test]
    fn random_matrices_have_small_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 5, 17, 40] {
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let pairs = eig_general(&a).unwrap();
            assert_eq!(pairs.len(), n);
            for (mu, v) in &pairs {
                let norm: f64 = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
                assert!(residual(&a, *mu, v) < 1e-8 * (1.0 + a.norm()));
            }
            let trace: Complex64 = pairs.iter().map(|p| p.0).sum();
            assert!((trace.re - a.trace()).abs() < 1e-8 && trace.im.abs() < 1e-8);
        }
    }

    #[test]
    fn identity_gives_independent_vectors() {
        let a = DMatrix::<f64>::identity(3, 3);
        let pairs = eig_general(&a).unwrap();
        for (mu, _) in &pairs {
            assert!((mu - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        let g = |i: usize, j: usize| dotc(&pairs[i].1, &pairs[j].1).norm();
        assert!(g(0, 1) < 1e-8 && g(0, 2) < 1e-8 && g(1, 2) < 1e-8);
    }

    #[test]
    fn conjugate_pairs_are_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -2.0, 2.0, 0.0]);
        let pairs = eig_general(&a).unwrap();
        assert!(pairs[0].0.im > 0.0);
        assert_eq!(pairs[1].0, pairs[0].0.conj());
        for (x, y) in pairs[0].1.iter().zip(&pairs[1].1) {
            assert_eq!(*y, x.conj());
        }
    }

    #[test]
    fn defective_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let pairs = eig_general(&a).unwrap();
        for (mu, v) in &pairs {
            assert!(residual(&a, *mu, v) < 1e-8 * 3.0);
        }
    }
}
