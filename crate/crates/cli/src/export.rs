//! Plot-ready grids of a candidate function.

use anyhow::{bail, Result};
use koopman_lyap::lyapunov::{CandidateFunction, LyapunovBasis};
use koopman_lyap::systems::VectorField;
use koopman_lyap::verify::{Certificate, DomainBox};

/// `resolution` evenly spaced points on `[lo, hi]`; a single point sits at
/// the midpoint.
fn axis(lo: f64, hi: f64, resolution: usize) -> Vec<f64> {
    if resolution == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let step = (hi - lo) / (resolution - 1) as f64;
    (0..resolution).map(|i| if i + 1 == resolution { hi } else { lo + step * i as f64 }).collect()
}

/// Rows `(x₁, x₂, V, residual)` over a `resolution²` grid, `x₂` varying fastest.
pub fn export_contour(
    basis: &LyapunovBasis,
    field: &VectorField,
    cand: &CandidateFunction,
    domain: &DomainBox,
    resolution: usize,
) -> Result<Vec<[f64; 4]>> {
    if domain.dim() != 2 {
        bail!("contours need a 2-D system; use export-projection for n = {}", domain.dim());
    }
    if resolution == 0 {
        bail!("resolution must be at least 1");
    }
    let cert = Certificate::new(basis, field, cand)?;
    let (xs, ys) = (axis(domain.lo[0], domain.hi[0], resolution), axis(domain.lo[1], domain.hi[1], resolution));
    let mut rows = Vec::with_capacity(resolution * resolution);
    for &x in &xs {
        for &y in &ys {
            let (v, r) = cert.value_residual(&[x, y])?;
            if !(v.is_finite() && r.is_finite()) {
                bail!("non-finite value at ({x}, {y})");
            }
            rows.push([x, y, v, r]);
        }
    }
    Ok(rows)
}

/// Rows `(u, v, V)` on the plane `P0 + u(P1 − P0) + v(P2 − P0)` for
/// `u, v ∈ [lo, hi]`.
pub fn export_projection(
    basis: &LyapunovBasis,
    cand: &CandidateFunction,
    anchors: [&[f64]; 3],
    span: (f64, f64),
    resolution: usize,
) -> Result<Vec<[f64; 3]>> {
    let n = basis.nvars();
    if anchors.iter().any(|p| p.len() != n) {
        bail!("anchors must have {n} coordinates");
    }
    if resolution == 0 || !(span.0 < span.1) {
        bail!("need resolution ≥ 1 and lo < hi");
    }
    let d1: Vec<f64> = (0..n).map(|j| anchors[1][j] - anchors[0][j]).collect();
    let d2: Vec<f64> = (0..n).map(|j| anchors[2][j] - anchors[0][j]).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (g11, g22, g12) = (dot(&d1, &d1), dot(&d2, &d2), dot(&d1, &d2));
    if g11 * g22 - g12 * g12 <= 1e-12 * g11 * g22 || g11 == 0.0 || g22 == 0.0 {
        bail!("anchors are collinear");
    }
    let grid = axis(span.0, span.1, resolution);
    let mut rows = Vec::with_capacity(resolution * resolution);
    for &u in &grid {
        for &v in &grid {
            let x: Vec<f64> = (0..n).map(|j| anchors[0][j] + u * d1[j] + v * d2[j]).collect();
            let val = cand.value(basis, &x)?;
            if !val.is_finite() {
                bail!("non-finite value at (u, v) = ({u}, {v})");
            }
            rows.push([u, v, val]);
        }
    }
    Ok(rows)
}

pub fn to_csv<const N: usize>(header: [&str; N], rows: &[[f64; N]]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    Ok(w.into_inner()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_norm() -> (LyapunovBasis, CandidateFunction) {
        let basis = LyapunovBasis::coordinates(2, -1.0).unwrap();
        let cand = CandidateFunction {
            alpha: vec![1.0; basis.len()],
            gamma: 1.0,
            beta: 1.0,
        };
        (basis, cand)
    }

    #[test]
    fn contour_of_half_norm() {
        let (basis, cand) = half_norm();
        let field = VectorField::van_der_pol();
        let dom = DomainBox::new(vec![-1.0; 2], vec![1.0; 2]).unwrap();
        let rows = export_contour(&basis, &field, &cand, &dom, 3).unwrap();
        assert_eq!(rows.len(), 9);
        for r in &rows {
            assert!([0.0, 0.5, 1.0].contains(&r[2]), "{r:?}");
        }
        let single = export_contour(&basis, &field, &cand, &dom, 1).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(&single[0][..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn contour_needs_two_dimensions() {
        let basis = LyapunovBasis::coordinates(3, -1.0).unwrap();
        let cand = CandidateFunction {
            alpha: vec![1.0; 3],
            gamma: 1.0,
            beta: 1.0,
        };
        let field = koopman_lyap::systems::VectorField::linear(&nalgebra::DMatrix::from_diagonal_element(3, 3, -1.0)).unwrap();
        let dom = DomainBox::new(vec![-1.0; 3], vec![1.0; 3]).unwrap();
        assert!(export_contour(&basis, &field, &cand, &dom, 3).is_err());
    }

    #[test]
    fn projection_anchors_map_to_corners() {
        let (basis, cand) = half_norm();
        let (p0, p1, p2) = ([0.0, 0.0], [1.0, 2.0], [-3.0, 1.0]);
        let rows = export_projection(&basis, &cand, [&p0, &p1, &p2], (-0.5, 1.5), 5).unwrap();
        let at = |u: f64, v: f64| rows.iter().find(|r| r[0] == u && r[1] == v).unwrap()[2];
        assert_eq!(at(0.0, 0.0), cand.value(&basis, &p0).unwrap());
        assert_eq!(at(1.0, 0.0), cand.value(&basis, &p1).unwrap());
        assert_eq!(at(0.0, 1.0), cand.value(&basis, &p2).unwrap());
    }

    #[test]
    fn collinear_anchors_rejected() {
        let (basis, cand) = half_norm();
        let r = export_projection(&basis, &cand, [&[0.0, 0.0], &[1.0, 1.0], &[2.0, 2.0]], (0.0, 1.0), 3);
        assert!(r.is_err());
    }

    #[test]
    fn csv_layout() {
        let text = String::from_utf8(to_csv(["u", "v", "V"], &[[0.0, 1.0, 0.5]]).unwrap()).unwrap();
        assert_eq!(text, "u,v,V\n0,1,0.5\n");
    }
}
