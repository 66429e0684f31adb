//! Small dense linear programs over `{Z : AZ ≤ b}`.
//!
//! `max cᵀZ s.t. AZ ≤ b` with free `Z` is solved through its dual
//! `min bᵀy s.t. Aᵀy = c, y ≥ 0`, which has one equality row per variable and
//! one column per constraint. The polytopes here have few variables and many
//! rows, so the dual tableau stays narrow. Both phases use Bland's rule, which
//! makes the pivot sequence, and therefore the result, deterministic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-11;
const MAX_PIVOTS: usize = 200_000;

/// Slack below which a feasibility margin counts as zero.
pub const FEAS_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    /// An optimal point was found.
    Feasible,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpOutcome {
    pub status: LpStatus,
    pub point: Option<Vec<f64>>,
    pub objective: Option<f64>,
}

enum DualResult {
    Optimal(Vec<f64>),
    /// `Aᵀy = c, y ≥ 0` has no solution: the primal is infeasible or unbounded.
    DualInfeasible,
    /// The dual objective is unbounded below: the primal is infeasible.
    DualUnbounded,
}

struct Tableau {
    rows: usize,
    width: usize,
    t: Vec<f64>,
    d: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.width + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.width - 1)
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let w = self.width;
        let p = self.t[r * w + j];
        for v in &mut self.t[r * w..(r + 1) * w] {
            *v /= p;
        }
        let (before, rest) = self.t.split_at_mut(r * w);
        let (prow, after) = rest.split_at_mut(w);
        for row in before.chunks_mut(w).chain(after.chunks_mut(w)) {
            let f = row[j];
            if f != 0.0 {
                for (x, y) in row.iter_mut().zip(prow.iter()) {
                    *x -= f * y;
                }
                row[j] = 0.0;
            }
        }
        let f = self.d[j];
        if f != 0.0 {
            for (x, y) in self.d.iter_mut().zip(prow.iter()) {
                *x -= f * y;
            }
            self.d[j] = 0.0;
        }
        self.basis[r] = j;
    }

    /// Bland iterations over candidate columns `0..limit`.
    fn run(&mut self, limit: usize, pivots: &mut usize) -> Result<bool> {
        loop {
            let Some(j) = (0..limit).find(|&j| self.d[j] < -COST_TOL) else {
                return Ok(true);
            };
            let mut best: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let a = self.at(i, j);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i).max(0.0) / a;
                    let better = match best {
                        None => true,
                        Some((bi, br)) => ratio < br || (ratio == br && self.basis[i] < self.basis[bi]),
                    };
                    if better {
                        best = Some((i, ratio));
                    }
                }
            }
            let Some((r, _)) = best else {
                return Ok(false);
            };
            self.pivot(r, j);
            *pivots += 1;
            if *pivots > MAX_PIVOTS {
                return Err(Error::LpBreakdown("pivot limit exceeded".into()));
            }
            if self.d.iter().chain(self.t.iter()).any(|v| !v.is_finite()) {
                return Err(Error::LpBreakdown("non-finite tableau entry".into()));
            }
        }
    }
}

/// `min bᵀy, Aᵀy = c, y ≥ 0` with `A` given row-wise; returns the multipliers
/// `Z` of the equality rows, which solve the primal.
fn solve_dual(rows: &[Vec<f64>], b: &[f64], c: &[f64]) -> Result<DualResult> {
    let n = c.len();
    let m = rows.len();
    let width = m + n + 1;
    let sign: Vec<f64> = c.iter().map(|v| if *v < 0.0 { -1.0 } else { 1.0 }).collect();
    let mut t = vec![0.0; n * width];
    for i in 0..n {
        for (j, row) in rows.iter().enumerate() {
            t[i * width + j] = sign[i] * row[i];
        }
        t[i * width + m + i] = 1.0;
        t[i * width + width - 1] = sign[i] * c[i];
    }
    // phase 1: minimize the sum of artificials
    let mut d = vec![0.0; width];
    for i in 0..n {
        for j in 0..m {
            d[j] -= t[i * width + j];
        }
        d[width - 1] -= t[i * width + width - 1];
    }
    let mut tab = Tableau {
        rows: n,
        width,
        t,
        d,
        basis: (m..m + n).collect(),
    };
    let mut pivots = 0;
    tab.run(m, &mut pivots)?;
    let scale = 1.0 + c.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if -tab.d[width - 1] > FEAS_TOL * scale {
        return Ok(DualResult::DualInfeasible);
    }
    // drive remaining artificials out where a structural column allows it
    for i in 0..n {
        if tab.basis[i] >= m {
            let pick = (0..m)
                .filter(|&j| tab.at(i, j).abs() > PIVOT_TOL)
                .max_by(|&a, &bb| tab.at(i, a).abs().total_cmp(&tab.at(i, bb).abs()).then(bb.cmp(&a)));
            if let Some(j) = pick {
                tab.pivot(i, j);
            }
        }
    }
    // phase 2
    let cost = |j: usize| if j < m { b[j] } else { 0.0 };
    for j in 0..width {
        let base = if j == width - 1 { 0.0 } else { cost(j) };
        tab.d[j] = base - (0..n).map(|i| cost(tab.basis[i]) * tab.at(i, j)).sum::<f64>();
    }
    if !tab.run(m, &mut pivots)? {
        return Ok(DualResult::DualUnbounded);
    }
    let mut z: Vec<f64> = (0..n).map(|i| -sign[i] * tab.d[m + i]).collect();

    // polish: with a structural basis, Z solves the active rows exactly
    if tab.basis.iter().all(|&j| j < m) {
        let bm = DMatrix::from_fn(n, n, |r, col| rows[tab.basis[r]][col]);
        let rhs = DVector::from_iterator(n, tab.basis.iter().map(|&j| b[j]));
        if let Some(sol) = bm.lu().solve(&rhs) {
            let cand: Vec<f64> = sol.iter().copied().collect();
            if cand.iter().all(|v| v.is_finite()) && max_violation(rows, b, &cand) <= max_violation(rows, b, &z) {
                z = cand;
            }
        }
    }
    Ok(DualResult::Optimal(z))
}

fn max_violation(rows: &[Vec<f64>], b: &[f64], z: &[f64]) -> f64 {
    rows.iter()
        .zip(b)
        .map(|(r, bi)| r.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() - bi)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Unit-norm rows; zero rows are checked (`0 ≤ b`) and dropped.
fn normalized(a: &DMatrix<f64>, b: &[f64]) -> Result<Option<(Vec<Vec<f64>>, Vec<f64>)>> {
    check_dim(a.nrows(), b.len())?;
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::LpBreakdown("non-finite constraint data".into()));
    }
    let mut rows = Vec::with_capacity(a.nrows());
    let mut rhs = Vec::with_capacity(a.nrows());
    for k in 0..a.nrows() {
        let norm = a.row(k).norm();
        if norm == 0.0 {
            if b[k] < -FEAS_TOL {
                return Ok(None);
            }
            continue;
        }
        rows.push(a.row(k).iter().map(|v| v / norm).collect());
        rhs.push(b[k] / norm);
    }
    Ok(Some((rows, rhs)))
}

/// `max cᵀZ` over `{AZ ≤ b}`.
pub fn lp_solve(a: &DMatrix<f64>, b: &[f64], c: &[f64]) -> Result<LpOutcome> {
    check_dim(a.ncols(), c.len())?;
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::LpBreakdown("non-finite objective".into()));
    }
    let infeasible = LpOutcome {
        status: LpStatus::Infeasible,
        point: None,
        objective: None,
    };
    let Some((rows, rhs)) = normalized(a, b)? else {
        return Ok(infeasible);
    };
    match solve_dual(&rows, &rhs, c)? {
        DualResult::Optimal(z) => {
            let objective = c.iter().zip(&z).map(|(a, b)| a * b).sum();
            Ok(LpOutcome {
                status: LpStatus::Feasible,
                point: Some(z),
                objective: Some(objective),
            })
        }
        DualResult::DualUnbounded => Ok(infeasible),
        DualResult::DualInfeasible => {
            let (t, _) = feasibility_rows(&rows, &rhs, a.ncols())?;
            if t > FEAS_TOL {
                Ok(infeasible)
            } else {
                Ok(LpOutcome {
                    status: LpStatus::Unbounded,
                    point: None,
                    objective: None,
                })
            }
        }
    }
}

/// Smallest uniform relaxation `t ≥ 0` making `{AZ ≤ b + t}` nonempty, and a
/// point attaining it. `t = 0` means the polytope is nonempty.
pub fn feasibility(a: &DMatrix<f64>, b: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = a.ncols();
    match normalized(a, b)? {
        None => Ok((f64::INFINITY, vec![0.0; n])),
        Some((rows, rhs)) => feasibility_rows(&rows, &rhs, n),
    }
}

// max −t  s.t.  a_kᵀZ − t ≤ b_k,  −t ≤ 0; always feasible and bounded
fn feasibility_rows(rows: &[Vec<f64>], rhs: &[f64], n: usize) -> Result<(f64, Vec<f64>)> {
    if rows.is_empty() {
        return Ok((0.0, vec![0.0; n]));
    }
    let mut ext: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut e = r.clone();
            e.push(-1.0);
            e
        })
        .collect();
    let mut unit = vec![0.0; n + 1];
    unit[n] = -1.0;
    ext.push(unit);
    let mut b = rhs.to_vec();
    b.push(0.0);
    let mut c = vec![0.0; n + 1];
    c[n] = -1.0;
    match solve_dual(&ext, &b, &c)? {
        DualResult::Optimal(z) => {
            let t = z[n].max(0.0);
            Ok((if t <= FEAS_TOL { 0.0 } else { t }, z[..n].to_vec()))
        }
        _ => Err(Error::LpBreakdown("feasibility problem reported unbounded".into())),
    }
}

/// Phase-one emptiness test.
pub fn is_empty(a: &DMatrix<f64>, b: &[f64]) -> Result<bool> {
    Ok(feasibility(a, b)?.0 > FEAS_TOL)
}

/// Center and radius of the largest inscribed ball, or `None` when empty.
pub fn chebyshev_center(a: &DMatrix<f64>, b: &[f64]) -> Result<Option<(Vec<f64>, f64)>> {
    let n = a.ncols();
    if is_empty(a, b)? {
        return Ok(None);
    }
    let (rows, rhs) = normalized(a, b)?.expect("checked nonempty");
    let mut ext: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut e = r.clone();
            e.push(1.0);
            e
        })
        .collect();
    let mut unit = vec![0.0; n + 1];
    unit[n] = -1.0;
    ext.push(unit);
    let mut b2 = rhs;
    b2.push(0.0);
    let mut c = vec![0.0; n + 1];
    c[n] = 1.0;
    let a2 = DMatrix::from_fn(ext.len(), n + 1, |i, j| ext[i][j]);
    let out = lp_solve(&a2, &b2, &c)?;
    match out.status {
        LpStatus::Feasible => {
            let z = out.point.expect("feasible outcome has a point");
            Ok(Some((z[..n].to_vec(), z[n].max(0.0))))
        }
        LpStatus::Unbounded => Err(Error::LpBreakdown("polytope contains arbitrarily large balls".into())),
        LpStatus::Infeasible => Err(Error::LpBreakdown("Chebyshev problem infeasible on a nonempty polytope".into())),
    }
}
