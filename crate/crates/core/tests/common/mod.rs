//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use koopman_lyap::dictionary::MonomialDictionary;
use koopman_lyap::koopman::{edmd_fit, eigen_decompose, Dictionary, KoopmanModel, Spectrum};
use koopman_lyap::lyapunov::{build_basis, BasisConfig, LyapunovBasis};
use koopman_lyap::systems::{sample_snapshots, Region, SnapshotSet, VectorField};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Every basic feasible point of `{Az ≤ b}`: solve each `n`-subset of rows as
/// equalities and keep the solutions satisfying all rows within `tol`.
pub fn vertices(a: &DMatrix<f64>, b: &[f64], tol: f64) -> Vec<Vec<f64>> {
    let (m, n) = (a.nrows(), a.ncols());
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    if m < n {
        return out;
    }
    loop {
        let sub = DMatrix::from_fn(n, n, |i, j| a[(idx[i], j)]);
        let rhs = DVector::from_fn(n, |i, _| b[idx[i]]);
        if sub.determinant().abs() > 1e-12 {
            if let Some(z) = sub.lu().solve(&rhs) {
                let feasible = (0..m).all(|k| (0..n).map(|j| a[(k, j)] * z[j]).sum::<f64>() <= b[k] + tol);
                if feasible {
                    out.push(z.iter().copied().collect());
                }
            }
        }
        // next combination
        let mut i = n;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] < m - n + i {
                idx[i] += 1;
                for j in i + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Chebyshev radius by vertex enumeration of the lifted polytope
/// `{(z, r) : a_kᵀz + ‖a_k‖r ≤ b_k, r ≥ 0}`. `None` when empty.
pub fn chebyshev_radius_oracle(a: &DMatrix<f64>, b: &[f64]) -> Option<f64> {
    let (m, n) = (a.nrows(), a.ncols());
    let mut lifted = DMatrix::zeros(m + 1, n + 1);
    let mut rhs = b.to_vec();
    for k in 0..m {
        for j in 0..n {
            lifted[(k, j)] = a[(k, j)];
        }
        lifted[(k, n)] = a.row(k).norm();
    }
    lifted[(m, n)] = -1.0;
    rhs.push(0.0);
    vertices(&lifted, &rhs, 1e-10)
        .iter()
        .map(|v| v[n])
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
}

/// Box `[−1, 1]ⁿ` cut by `extra` random halfspaces; some of them come out empty.
pub fn random_polytope<R: Rng>(rng: &mut R, n: usize, extra: usize) -> (DMatrix<f64>, Vec<f64>) {
    let m = 2 * n + extra;
    let mut a = DMatrix::zeros(m, n);
    let mut b = vec![1.0; m];
    for j in 0..n {
        a[(2 * j, j)] = 1.0;
        a[(2 * j + 1, j)] = -1.0;
    }
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    for k in 2 * n..m {
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        for j in 0..n {
            a[(k, j)] = row[j] / norm;
        }
        let ac: f64 = (0..n).map(|j| a[(k, j)] * c[j]).sum();
        b[k] = ac + rng.random_range(-0.6..0.8);
    }
    (a, b)
}

pub struct VdpFixture {
    pub field: VectorField,
    pub data: SnapshotSet,
    pub model: KoopmanModel,
    pub spectrum: Spectrum,
    pub basis: LyapunovBasis,
}

/// Degree-6 monomial EDMD on Van der Pol trajectories from the annulus
/// `0.2 ≤ ‖x‖ ≤ 3`, with the `m` best stable eigenfunctions.
pub fn vdp_fixture(m: usize, seed: u64) -> VdpFixture {
    let field = VectorField::van_der_pol();
    let region = Region::Shell {
        center: vec![0.0, 0.0],
        inner: 0.2,
        outer: 3.0,
    };
    let data = sample_snapshots(&field, &region, 200, 500, 0.01, seed).unwrap();
    let model = edmd_fit(&data, Dictionary::Monomial(MonomialDictionary::new(2, 6).unwrap())).unwrap();
    let spectrum = eigen_decompose(&model).unwrap();
    let cfg = BasisConfig { m, ..Default::default() };
    let basis = build_basis(&model, &spectrum, &cfg, &data, Some(&field)).unwrap();
    VdpFixture {
        field,
        data,
        model,
        spectrum,
        basis,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
