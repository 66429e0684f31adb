//! Polytopes of admissible candidate parameters `Z = [α₁ … α_M, γ]` and the
//! sampling refinement loop that shrinks them.
//!
//! Sampled states `x` inside the target region contribute two rows each:
//! `Σ α_i V_i(x) ≤ γ` (the state lies in the sublevel set) and
//! `Σ α_i (V̇_i(x) + βV_i(x)) ≤ βγ` (decay towards the level). States that must
//! stay outside add `Σ α_i V_i(x) ≥ γ + δ`.

use std::fmt;

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lp;
use crate::lyapunov::{basis_derivatives, CandidateFunction, DerivativeMode, LyapunovBasis};
use crate::systems::{sample_snapshots, Region, SnapshotSet, VectorField};

/// Margin that realizes strict inequalities.
pub const DELTA_STRICT: f64 = 1e-6;

/// Slack within which a row counts as active at the Chebyshev center.
const ACTIVE_TOL: f64 = 1e-9;

/// Allowed radius change when pruning rows.
const PRUNE_RADIUS_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Init,
    Lyap,
    Decay,
    Exclusion,
    Separatrix,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Provenance::Init => "init",
            Provenance::Lyap => "lyap",
            Provenance::Decay => "decay",
            Provenance::Exclusion => "exclusion",
            Provenance::Separatrix => "separatrix",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    pub a: Vec<f64>,
    pub b: f64,
    pub provenance: Provenance,
}

/// `{Z : a_kᵀZ ≤ b_k}` with unit-norm rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfspacePolytope {
    pub dim: usize,
    pub rows: Vec<Halfspace>,
}

impl HalfspacePolytope {
    /// `Z ∈ [0, 1]^{M+1}` and `Σ_{i≤M} Z_i ≥ 1`.
    pub fn init(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidInput("need at least one basis entry".into()));
        }
        let dim = m + 1;
        let mut p = HalfspacePolytope { dim, rows: Vec::new() };
        for j in 0..dim {
            let mut up = vec![0.0; dim];
            up[j] = 1.0;
            p.push(up, 1.0, Provenance::Init)?;
            let mut lo = vec![0.0; dim];
            lo[j] = -1.0;
            p.push(lo, 0.0, Provenance::Init)?;
        }
        let mut sum = vec![-1.0; dim];
        sum[m] = 0.0;
        p.push(sum, -1.0, Provenance::Init)?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty_rows(&self) -> bool {
        self.rows.is_empty()
    }

    /// Adds a normalized row. Vacuous zero rows (`0 ≤ b`, `b ≥ 0`) are skipped
    /// and reported as `false`.
    pub fn push(&mut self, a: Vec<f64>, b: f64, provenance: Provenance) -> Result<bool> {
        check_dim(self.dim, a.len())?;
        if a.iter().any(|v| !v.is_finite()) || !b.is_finite() {
            return Err(Error::InvalidInput("non-finite constraint row".into()));
        }
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            if b >= 0.0 {
                return Ok(false);
            }
            self.rows.push(Halfspace { a, b, provenance });
            return Ok(true);
        }
        self.rows.push(Halfspace {
            a: a.iter().map(|v| v / norm).collect(),
            b: b / norm,
            provenance,
        });
        Ok(true)
    }

    pub fn matrix(&self) -> (DMatrix<f64>, Vec<f64>) {
        let a = DMatrix::from_fn(self.rows.len(), self.dim, |i, j| self.rows[i].a[j]);
        (a, self.rows.iter().map(|r| r.b).collect())
    }

    pub fn is_empty(&self) -> Result<bool> {
        let (a, b) = self.matrix();
        lp::is_empty(&a, &b)
    }

    pub fn chebyshev_center(&self) -> Result<(Vec<f64>, f64)> {
        let (a, b) = self.matrix();
        lp::chebyshev_center(&a, &b)?.ok_or(Error::EmptyPolytope)
    }

    /// Slack `b_k − a_kᵀz` of every row.
    pub fn slacks(&self, z: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.b - r.a.iter().zip(z).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        self.slacks(z).iter().all(|s| *s >= -tol)
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.rows.iter().filter(|r| r.provenance == provenance).count()
    }

    /// Drops rows that are inactive at the Chebyshev center, keeping at most
    /// `cap` active rows per sampled class. Init and separatrix rows stay.
    /// Falls back to keeping everything if the radius would change.
    pub fn prune(&mut self, cap: usize) -> Result<()> {
        let (z, r) = self.chebyshev_center()?;
        let slack = self.slacks(&z);
        let mut keep = vec![false; self.rows.len()];
        let mut per_class: Vec<(Provenance, Vec<(f64, usize)>)> = Vec::new();
        for (k, row) in self.rows.iter().enumerate() {
            match row.provenance {
                Provenance::Init | Provenance::Separatrix => keep[k] = true,
                p => {
                    let s = slack[k] - r * row.a.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if s <= ACTIVE_TOL {
                        match per_class.iter_mut().find(|(q, _)| *q == p) {
                            Some((_, v)) => v.push((s, k)),
                            None => per_class.push((p, vec![(s, k)])),
                        }
                    }
                }
            }
        }
        for (_, mut v) in per_class {
            v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, k) in v.iter().take(cap) {
                keep[k] = true;
            }
        }
        let pruned = HalfspacePolytope {
            dim: self.dim,
            rows: self
                .rows
                .iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(r, _)| r.clone())
                .collect(),
        };
        let (_, r2) = pruned.chebyshev_center()?;
        if (r2 - r).abs() <= PRUNE_RADIUS_TOL {
            *self = pruned;
        }
        Ok(())
    }
}

/// Rows of the sublevel and decay conditions for each sample.
///
/// `v` and `vdot` are samples × M. Returns `(a, b, provenance)` triples with
/// `a = [V(x), −1]` and `a = [V̇(x) + βV(x), −β]`, both with `b = 0`.
pub fn lyapunov_constraints(v: &DMatrix<f64>, vdot: &DMatrix<f64>, beta: f64) -> Result<Vec<(Vec<f64>, f64, Provenance)>> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidInput(format!("β must be non-negative, got {beta}")));
    }
    check_dim(v.nrows(), vdot.nrows())?;
    check_dim(v.ncols(), vdot.ncols())?;
    let m = v.ncols();
    let mut out = Vec::with_capacity(2 * v.nrows());
    for k in 0..v.nrows() {
        let mut lyap: Vec<f64> = (0..m).map(|i| v[(k, i)]).collect();
        lyap.push(-1.0);
        let mut decay: Vec<f64> = (0..m).map(|i| vdot[(k, i)] + beta * v[(k, i)]).collect();
        decay.push(-beta);
        out.push((lyap, 0.0, Provenance::Lyap));
        out.push((decay, 0.0, Provenance::Decay));
    }
    Ok(out)
}

/// Row requiring `Σ α_i V_i(x) ≥ γ + δ`.
pub fn exclusion_row(values: &[f64], delta: f64) -> (Vec<f64>, f64) {
    let mut a: Vec<f64> = values.iter().map(|v| -v).collect();
    a.push(1.0);
    (a, -delta)
}

/// Where sample pairs come from.
pub enum DataSource<'a> {
    /// Roll out the field from initial conditions drawn in the region.
    Field(&'a VectorField),
    /// Draw stored pairs whose first state lies in the region.
    Snapshots(&'a SnapshotSet),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Algorithm1Config {
    pub beta: f64,
    pub max_iter: usize,
    /// Trajectories per iteration.
    pub n_traj: usize,
    /// Steps per trajectory.
    pub steps: usize,
    pub dt: f64,
    pub derivatives: DerivativeMode,
    /// Points drawn from each exclusion region.
    pub exclusion_count: usize,
    /// Regions sampled for points that must lie outside the set. Empty means
    /// the complement of the target region in its bounding box enlarged 1.5×.
    pub exclusion_regions: Vec<Region>,
    pub delta: f64,
    pub separatrix: Vec<Vec<f64>>,
    /// Optional wider region whose samples only add decay rows. The decay
    /// condition is needed on all of `{V ≤ γ}`, which may reach past the
    /// target region; points outside the set then must satisfy it too.
    pub decay_region: Option<Region>,
    /// Per-class cap on retained rows, as a multiple of `M + 1`.
    pub prune_factor: usize,
    pub seed: u64,
}

impl Default for Algorithm1Config {
    fn default() -> Self {
        Algorithm1Config {
            beta: 1.0,
            max_iter: 10,
            n_traj: 100,
            steps: 20,
            dt: crate::systems::DEFAULT_DT,
            derivatives: DerivativeMode::Data,
            exclusion_count: 32,
            exclusion_regions: Vec::new(),
            delta: DELTA_STRICT,
            separatrix: Vec::new(),
            decay_region: None,
            prune_factor: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub rows_added: usize,
    pub chebyshev_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Algorithm1Status {
    Feasible,
    /// The first sampled intersection was already empty.
    InfeasibleFirstIteration,
    /// A point that must lie outside the set cannot be excluded.
    ExclusionInfeasible { point: Vec<f64>, row: Halfspace },
    SeparatrixInfeasible { point: Vec<f64>, row: Halfspace },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Algorithm1Outcome {
    pub status: Algorithm1Status,
    /// Final (pruned) polytope.
    pub polytope: HalfspacePolytope,
    /// Every row generated, before pruning.
    pub archive: HalfspacePolytope,
    /// Chebyshev center `[α, γ]`, when feasible.
    pub z: Option<Vec<f64>>,
    pub radius: f64,
    pub log: Vec<IterationRecord>,
}

impl Algorithm1Outcome {
    pub fn is_feasible(&self) -> bool {
        self.status == Algorithm1Status::Feasible
    }

    pub fn candidate(&self, beta: f64) -> Option<CandidateFunction> {
        let z = self.z.as_ref()?;
        let m = z.len() - 1;
        Some(CandidateFunction {
            alpha: z[..m].to_vec(),
            gamma: z[m],
            beta,
        })
    }
}

fn default_exclusion(region: &Region) -> Region {
    let (lo, hi) = region.bounding_box();
    let (lo2, hi2): (Vec<f64>, Vec<f64>) = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| {
            let (c, w) = (0.5 * (l + h), 0.75 * (h - l));
            (c - w, c + w)
        })
        .unzip();
    Region::Complement {
        bounds: Box::new(Region::Box { lo: lo2, hi: hi2 }),
        excluded: Box::new(region.clone()),
    }
}

fn sample_pairs(source: &DataSource<'_>, region: &Region, cfg: &Algorithm1Config, seed: u64) -> Result<SnapshotSet> {
    match source {
        DataSource::Field(f) => sample_snapshots(f, region, cfg.n_traj, cfg.steps, cfg.dt, seed),
        DataSource::Snapshots(s) => {
            let inside: Vec<usize> = (0..s.len()).filter(|&k| region.contains(&s.x[k])).collect();
            if inside.is_empty() {
                return Err(Error::InvalidInput("no stored snapshot lies in the sampling region".into()));
            }
            let want = (cfg.n_traj * cfg.steps).min(inside.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = sample_indices(&mut rng, inside.len(), want).into_iter().map(|i| inside[i]).collect();
            idx.sort_unstable();
            Ok(s.select(&idx))
        }
    }
}

/// Sampling refinement of the candidate polytope.
///
/// Each iteration samples pairs in `region`, intersects the current polytope
/// with their rows and prunes inactive rows. It stops after `max_iter`
/// iterations or when an intersection would be empty, keeping the last
/// nonempty polytope; an empty first intersection is reported as infeasible.
/// Exclusion rows are then added one at a time. Emptiness and centers are
/// always decided against every row generated so far: pruned rows that cut
/// the current Chebyshev ball are put back before a result is accepted.
pub fn run_algorithm1(basis: &LyapunovBasis, source: DataSource<'_>, region: &Region, cfg: &Algorithm1Config) -> Result<Algorithm1Outcome> {
    if basis.is_empty() {
        return Err(Error::InvalidInput("basis is empty".into()));
    }
    region.validate()?;
    check_dim(basis.nvars(), region.dim())?;
    if let Some(dr) = &cfg.decay_region {
        dr.validate()?;
        check_dim(basis.nvars(), dr.dim())?;
    }
    if !(cfg.beta >= 0.0) || !(cfg.dt > 0.0) || !(cfg.delta > 0.0) {
        return Err(Error::InvalidInput("need β ≥ 0, dt > 0 and δ > 0".into()));
    }
    let field = match source {
        DataSource::Field(f) => Some(f),
        DataSource::Snapshots(_) => None,
    };
    let m = basis.len();
    let cap = cfg.prune_factor.max(1) * (m + 1);
    let mut poly = HalfspacePolytope::init(m)?;
    let mut archive = poly.clone();
    let mut log = Vec::new();

    let mut rng_seed = cfg.seed;
    let mut next_seed = || {
        rng_seed = rng_seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        rng_seed
    };

    // separatrix points must lie outside the set
    for s in &cfg.separatrix {
        check_dim(basis.nvars(), s.len())?;
        let (a, b) = exclusion_row(&basis.eval(s)?, cfg.delta);
        if !poly.push(a.clone(), b, Provenance::Separatrix)? {
            continue;
        }
        archive.push(a, b, Provenance::Separatrix)?;
        if settle(&mut poly, &archive)?.is_none() {
            let row = archive.rows.last().expect("just pushed").clone();
            return Ok(failure(
                Algorithm1Status::SeparatrixInfeasible { point: s.clone(), row },
                poly,
                archive,
                log,
            ));
        }
    }
    let (_, r0) = poly.chebyshev_center()?;
    log.push(IterationRecord {
        iteration: 0,
        rows_added: poly.len(),
        chebyshev_radius: r0,
    });

    for iter in 1..=cfg.max_iter {
        let pairs = sample_pairs(&source, region, cfg, next_seed())?;
        let (v, vdot) = basis_derivatives(basis, &pairs, field, cfg.derivatives)?;
        let mut rows = lyapunov_constraints(&v, &vdot, cfg.beta)?;
        if let Some(dr) = &cfg.decay_region {
            let pairs = sample_pairs(&source, dr, cfg, next_seed())?;
            let (v, vdot) = basis_derivatives(basis, &pairs, field, cfg.derivatives)?;
            rows.extend(lyapunov_constraints(&v, &vdot, cfg.beta)?.into_iter().filter(|r| r.2 == Provenance::Decay));
        }
        let mut next = poly.clone();
        let mut next_archive = archive.clone();
        let mut added = 0;
        for (a, b, p) in rows {
            if next.push(a.clone(), b, p)? {
                next_archive.push(a, b, p)?;
                added += 1;
            }
        }
        if settle(&mut next, &next_archive)?.is_none() {
            if iter == 1 {
                return Ok(failure(Algorithm1Status::InfeasibleFirstIteration, poly, archive, log));
            }
            break;
        }
        next.prune(cap)?;
        let (_, r) = settle(&mut next, &next_archive)?.ok_or(Error::EmptyPolytope)?;
        poly = next;
        archive = next_archive;
        log.push(IterationRecord {
            iteration: iter,
            rows_added: added,
            chebyshev_radius: r,
        });
    }

    // points outside the target region must be excluded from the set
    let excl_regions = if cfg.exclusion_regions.is_empty() {
        vec![default_exclusion(region)]
    } else {
        cfg.exclusion_regions.clone()
    };
    let mut excl_points = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(next_seed());
    for r in &excl_regions {
        r.validate()?;
        check_dim(basis.nvars(), r.dim())?;
        for _ in 0..cfg.exclusion_count {
            excl_points.push(r.sample(&mut rng)?);
        }
    }
    for x in excl_points {
        let (a, b) = exclusion_row(&basis.eval(&x)?, cfg.delta);
        if !poly.push(a.clone(), b, Provenance::Exclusion)? {
            continue;
        }
        archive.push(a, b, Provenance::Exclusion)?;
        if settle(&mut poly, &archive)?.is_none() {
            let row = archive.rows.last().expect("just pushed").clone();
            return Ok(failure(Algorithm1Status::ExclusionInfeasible { point: x, row }, poly, archive, log));
        }
    }

    let (z, radius) = settle(&mut poly, &archive)?.ok_or(Error::EmptyPolytope)?;
    if let Some(last) = log.last() {
        if radius < last.chebyshev_radius - PRUNE_RADIUS_TOL {
            log.push(IterationRecord {
                iteration: log.len(),
                rows_added: poly.count(Provenance::Exclusion) + poly.count(Provenance::Separatrix),
                chebyshev_radius: radius,
            });
        }
    }
    Ok(Algorithm1Outcome {
        status: Algorithm1Status::Feasible,
        polytope: poly,
        archive,
        z: Some(z),
        radius,
        log,
    })
}

/// Chebyshev center of `poly ∩ archive`, found by adding archived rows that
/// cut the current ball until none do. `None` when the intersection is empty.
fn settle(poly: &mut HalfspacePolytope, archive: &HalfspacePolytope) -> Result<Option<(Vec<f64>, f64)>> {
    loop {
        let (a, b) = poly.matrix();
        let Some((z, r)) = lp::chebyshev_center(&a, &b)? else {
            return Ok(None);
        };
        let slack = archive.slacks(&z);
        let cut: Vec<usize> = (0..archive.len()).filter(|&k| slack[k] < r - ACTIVE_TOL).collect();
        let fresh: Vec<usize> = cut.into_iter().filter(|&k| !poly.rows.contains(&archive.rows[k])).collect();
        if fresh.is_empty() {
            return Ok(Some((z, r)));
        }
        for k in fresh {
            poly.rows.push(archive.rows[k].clone());
        }
    }
}

fn failure(status: Algorithm1Status, polytope: HalfspacePolytope, archive: HalfspacePolytope, log: Vec<IterationRecord>) -> Algorithm1Outcome {
    Algorithm1Outcome {
        status,
        polytope,
        archive,
        z: None,
        radius: 0.0,
        log,
    }
}

/// Iteration log as CSV.
pub fn log_to_csv(log: &[IterationRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in log {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}
