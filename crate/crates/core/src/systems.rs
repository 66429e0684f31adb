//! Polynomial vector fields, fixed-step RK4 flow maps and snapshot sampling.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::par;
use crate::poly::{power_table, Polynomial};

/// Integration aborts once any state component exceeds this magnitude.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

/// Default sampling interval in seconds.
pub const DEFAULT_DT: f64 = 0.01;

/// `ẋ = f(x)` with one polynomial per coordinate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VectorField {
    pub name: Option<String>,
    components: Vec<Polynomial>,
    #[serde(skip)]
    jacobian: Vec<Vec<Polynomial>>,
}

impl PartialEq for VectorField {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.components == other.components
    }
}

impl VectorField {
    pub fn new(name: Option<String>, components: Vec<Polynomial>) -> Result<Self> {
        let n = components.len();
        if n == 0 {
            return Err(Error::InvalidInput("vector field needs at least one coordinate".into()));
        }
        for c in &components {
            check_dim(n, c.nvars())?;
        }
        let jacobian = components
            .iter()
            .map(|c| (0..n).map(|j| c.partial(j)).collect())
            .collect();
        Ok(VectorField {
            name,
            components,
            jacobian,
        })
    }

    /// Rebuilds derived data after deserialization.
    pub fn rebuild(self) -> Result<Self> {
        Self::new(self.name, self.components)
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Polynomial] {
        &self.components
    }

    /// Highest total degree over all coordinates.
    pub fn degree(&self) -> u32 {
        self.components.iter().map(Polynomial::degree).max().unwrap_or(0)
    }

    fn max_exponent(&self) -> u32 {
        self.components.iter().map(Polynomial::max_exponent).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        Ok(out)
    }

    /// Unchecked evaluation into a caller buffer.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let pw = power_table(x, self.max_exponent());
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval_powers(&pw);
        }
    }

    /// `J[i][j] = ∂f_i/∂x_j` from the symbolic partials.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), x.len())?;
        let n = self.dim();
        let pw = power_table(x, self.max_exponent());
        Ok(DMatrix::from_fn(n, n, |i, j| self.jacobian[i][j].eval_powers(&pw)))
    }

    /// `ẋ = A x`.
    pub fn linear(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        check_dim(n, a.ncols())?;
        let comps = (0..n)
            .map(|i| {
                let pairs: Vec<(f64, Vec<u32>)> = (0..n)
                    .map(|j| {
                        let mut e = vec![0; n];
                        e[j] = 1;
                        (a[(i, j)], e)
                    })
                    .collect();
                Polynomial::from_pairs(n, &pairs)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(Some("linear".into()), comps)
    }

    /// `ẋ₁ = x₂, ẋ₂ = −x₁ + x₂(1 − x₁²)`.
    pub fn van_der_pol() -> Self {
        let f1 = Polynomial::from_pairs(2, &[(1.0, vec![0, 1])]).expect("valid");
        let f2 = Polynomial::from_pairs(2, &[(-1.0, vec![1, 0]), (1.0, vec![0, 1]), (-1.0, vec![2, 1])])
            .expect("valid");
        Self::new(Some("van_der_pol".into()), vec![f1, f2]).expect("valid")
    }

    /// `ẋ_i = x_i (ρ_i + Σ_j K_ij x_j)`.
    pub fn glv(rho: &[f64], interaction: &[Vec<f64>]) -> Result<Self> {
        GlvParams {
            rho: rho.to_vec(),
            interaction: interaction.to_vec(),
        }
        .to_field()
    }
}

/// Generalized Lotka–Volterra parameters as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlvParams {
    pub rho: Vec<f64>,
    pub interaction: Vec<Vec<f64>>,
}

impl GlvParams {
    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rho.len();
        if n == 0 {
            return Err(Error::InvalidInput("gLV growth vector is empty".into()));
        }
        check_dim(n, self.interaction.len())?;
        for row in &self.interaction {
            check_dim(n, row.len())?;
        }
        let finite = self.rho.iter().chain(self.interaction.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite gLV parameter".into()));
        }
        Ok(())
    }

    pub fn to_field(&self) -> Result<VectorField> {
        self.validate()?;
        let n = self.dim();
        let comps = (0..n)
            .map(|i| {
                let mut pairs = Vec::with_capacity(n + 1);
                let mut e = vec![0; n];
                e[i] = 1;
                pairs.push((self.rho[i], e));
                for j in 0..n {
                    let mut e = vec![0; n];
                    e[i] += 1;
                    e[j] += 1;
                    pairs.push((self.interaction[i][j], e));
                }
                Polynomial::from_pairs(n, &pairs)
            })
            .collect::<Result<Vec<_>>>()?;
        VectorField::new(Some(format!("glv{n}")), comps)
    }

    /// Interior equilibrium `x* = −K⁻¹ρ`, if `K` is invertible.
    pub fn interior_equilibrium(&self) -> Option<Vec<f64>> {
        let n = self.dim();
        let k = DMatrix::from_fn(n, n, |i, j| self.interaction[i][j]);
        let rho = DVector::from_column_slice(&self.rho);
        k.lu().solve(&(-rho)).map(|v| v.iter().copied().collect())
    }

    /// Random stable system with a positive interior equilibrium.
    ///
    /// The interaction matrix has unit negative diagonal and off-diagonal
    /// mass below one half per row and column, so `K + Kᵀ` is negative
    /// definite and the equilibrium attracts the open positive orthant.
    /// Equilibrium components are drawn from `[8, 12]`.
    pub fn random_stable(n: usize, seed: u64) -> Result<(Self, Vec<f64>)> {
        if n == 0 {
            return Err(Error::InvalidInput("gLV dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let equilibrium: Vec<f64> = (0..n).map(|_| rng.random_range(8.0..12.0)).collect();
        let spread = if n > 1 { 0.45 / (n - 1) as f64 } else { 0.0 };
        let interaction: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { -1.0 } else { rng.random_range(-spread..=spread) })
                    .collect()
            })
            .collect();
        let rho = (0..n)
            .map(|i| -(0..n).map(|j| interaction[i][j] * equilibrium[j]).sum::<f64>())
            .collect();
        Ok((GlvParams { rho, interaction }, equilibrium))
    }
}

/// Loads gLV parameters from JSON, or TOML when the extension is `.toml`.
pub fn load_glv_params(path: &Path) -> Result<GlvParams> {
    let text = std::fs::read_to_string(path)?;
    let params: GlvParams = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?
    };
    params.validate()?;
    Ok(params)
}

pub fn load_glv(path: &Path) -> Result<VectorField> {
    load_glv_params(path)?.to_field()
}

/// Uniformly spaced states starting at `t0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub dt: f64,
    pub t0: f64,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory always holds x0")
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.states.len()).map(move |k| self.t0 + k as f64 * self.dt)
    }
}

/// One classical RK4 step.
pub fn rk4_step(field: &VectorField, x: &[f64], dt: f64, scratch: &mut Rk4Scratch) -> Vec<f64> {
    let n = x.len();
    let Rk4Scratch { k1, k2, k3, k4, tmp } = scratch;
    field.eval_into(x, k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    field.eval_into(tmp, k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    field.eval_into(tmp, k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    field.eval_into(tmp, k4);
    (0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

pub struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    pub fn new(n: usize) -> Self {
        Rk4Scratch {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

fn diverged(x: &[f64]) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
}

/// Fixed-step RK4 trajectory of `steps` steps (so `steps + 1` states).
pub fn integrate_rk4(field: &VectorField, x0: &[f64], dt: f64, steps: usize) -> Result<Trajectory> {
    check_dim(field.dim(), x0.len())?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
    }
    if diverged(x0) {
        return Err(Error::Divergence { step: 0 });
    }
    let mut scratch = Rk4Scratch::new(field.dim());
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.to_vec());
    for step in 1..=steps {
        let next = rk4_step(field, states.last().expect("nonempty"), dt, &mut scratch);
        if diverged(&next) {
            return Err(Error::Divergence { step });
        }
        states.push(next);
    }
    Ok(Trajectory { states, dt, t0: 0.0 })
}

/// Sampling regions for initial conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    /// Axis-aligned box `[lo, hi]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Closed Euclidean ball.
    Ball { center: Vec<f64>, radius: f64 },
    /// Spherical shell `inner ≤ ‖x − center‖ ≤ outer`.
    Shell {
        center: Vec<f64>,
        inner: f64,
        outer: f64,
    },
    /// Union of balls of one radius around the given centers, e.g. states
    /// along an orbit. Sampling picks a center uniformly, then a point in its
    /// ball.
    Tube { centers: Vec<Vec<f64>>, radius: f64 },
    /// Points of `bounds` that are not in `excluded` (rejection sampled).
    Complement {
        bounds: Box<Region>,
        excluded: Box<Region>,
    },
}

impl Region {
    pub fn dim(&self) -> usize {
        match self {
            Region::Box { lo, .. } => lo.len(),
            Region::Ball { center, .. } | Region::Shell { center, .. } => center.len(),
            Region::Tube { centers, .. } => centers.first().map_or(0, |c| c.len()),
            Region::Complement { bounds, .. } => bounds.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Region::Box { lo, hi } => {
                check_dim(lo.len(), hi.len())?;
                if lo.is_empty() || lo.iter().zip(hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
                    return Err(Error::InvalidInput("box bounds must satisfy lo ≤ hi".into()));
                }
            }
            Region::Ball { center, radius } => {
                if center.is_empty() || !(*radius >= 0.0) {
                    return Err(Error::InvalidInput("ball needs a center and radius ≥ 0".into()));
                }
            }
            Region::Shell { center, inner, outer } => {
                if center.is_empty() || !(*inner >= 0.0 && inner <= outer) {
                    return Err(Error::InvalidInput("shell needs 0 ≤ inner ≤ outer".into()));
                }
            }
            Region::Tube { centers, radius } => {
                let n = centers.first().map_or(0, |c| c.len());
                if n == 0 || !(*radius >= 0.0) || centers.iter().any(|c| c.len() != n || c.iter().any(|v| !v.is_finite())) {
                    return Err(Error::InvalidInput("tube needs finite centers of one dimension and radius ≥ 0".into()));
                }
            }
            Region::Complement { bounds, excluded } => {
                bounds.validate()?;
                excluded.validate()?;
                check_dim(bounds.dim(), excluded.dim())?;
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| *l <= *v && *v <= *h),
            Region::Ball { center, radius } => dist(x, center) <= *radius,
            Region::Shell { center, inner, outer } => {
                let r = dist(x, center);
                *inner <= r && r <= *outer
            }
            Region::Tube { centers, radius } => centers.iter().any(|c| dist(x, c) <= *radius),
            Region::Complement { bounds, excluded } => bounds.contains(x) && !excluded.contains(x),
        }
    }

    /// Axis-aligned bounding box `(lo, hi)`.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Region::Box { lo, hi } => (lo.clone(), hi.clone()),
            Region::Ball { center, radius } => ball_box(center, *radius),
            Region::Shell { center, outer, .. } => ball_box(center, *outer),
            Region::Tube { centers, radius } => {
                let n = centers.first().map_or(0, |c| c.len());
                let mut lo = vec![f64::INFINITY; n];
                let mut hi = vec![f64::NEG_INFINITY; n];
                for c in centers {
                    for j in 0..n {
                        lo[j] = lo[j].min(c[j] - radius);
                        hi[j] = hi[j].max(c[j] + radius);
                    }
                }
                (lo, hi)
            }
            Region::Complement { bounds, .. } => bounds.bounding_box(),
        }
    }

    /// Draws one point uniformly from the region.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            Region::Box { lo, hi } => Ok(lo
                .iter()
                .zip(hi)
                .map(|(l, h)| if l == h { *l } else { rng.random_range(*l..*h) })
                .collect()),
            Region::Ball { center, radius } => Ok(sample_shell(rng, center, 0.0, *radius)),
            Region::Shell { center, inner, outer } => Ok(sample_shell(rng, center, *inner, *outer)),
            Region::Tube { centers, radius } => {
                let c = &centers[rng.random_range(0..centers.len())];
                Ok(sample_shell(rng, c, 0.0, *radius))
            }
            Region::Complement { bounds, excluded } => {
                const DRAWS: usize = 10_000;
                for _ in 0..DRAWS {
                    let x = bounds.sample(rng)?;
                    if !excluded.contains(&x) {
                        return Ok(x);
                    }
                }
                Err(Error::SamplingFailed { draws: DRAWS })
            }
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn ball_box(center: &[f64], r: f64) -> (Vec<f64>, Vec<f64>) {
    (center.iter().map(|c| c - r).collect(), center.iter().map(|c| c + r).collect())
}

// Gaussian direction, radius with density ∝ r^{n-1} on [inner, outer].
fn sample_shell<R: Rng + ?Sized>(rng: &mut R, center: &[f64], inner: f64, outer: f64) -> Vec<f64> {
    let n = center.len();
    let dir: Vec<f64> = loop {
        let g: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            break g.into_iter().map(|v| v / norm).collect();
        }
    };
    let u: f64 = rng.random();
    let nf = n as f64;
    let r = (inner.powf(nf) + u * (outer.powf(nf) - inner.powf(nf))).powf(1.0 / nf);
    center.iter().zip(dir).map(|(c, d)| c + r * d).collect()
}

/// Snapshot pairs `(x_i, y_i = F^dt(x_i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSet {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub dt: f64,
    /// Trajectory membership of each pair, when known.
    pub traj_id: Option<Vec<usize>>,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.x.len(), self.y.len())?;
        let n = self.dim();
        for v in self.x.iter().chain(&self.y) {
            check_dim(n, v.len())?;
        }
        if let Some(ids) = &self.traj_id {
            check_dim(self.x.len(), ids.len())?;
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidInput("snapshot dt must be positive".into()));
        }
        Ok(())
    }

    /// Reassembles full state sequences from grouped, chained pairs.
    ///
    /// Without grouping every pair is a two-state trajectory.
    pub fn trajectories(&self) -> Vec<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut prev_id = None;
        for i in 0..self.len() {
            let id = self.traj_id.as_ref().map(|ids| ids[i]);
            let chained = id.is_some()
                && id == prev_id
                && out.last().is_some_and(|t| t.last() == Some(&self.x[i]));
            if chained {
                out.last_mut().expect("checked").push(self.y[i].clone());
            } else {
                out.push(vec![self.x[i].clone(), self.y[i].clone()]);
            }
            prev_id = id;
        }
        out
    }

    /// Subset of pairs by index.
    pub fn select(&self, idx: &[usize]) -> SnapshotSet {
        SnapshotSet {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i].clone()).collect(),
            dt: self.dt,
            traj_id: self.traj_id.as_ref().map(|ids| idx.iter().map(|&i| ids[i]).collect()),
        }
    }

    /// Writes the CSV layout: a `dt=<value>` line, a header, one pair per row.
    pub fn to_csv(&self) -> Result<String> {
        self.validate()?;
        let n = self.dim();
        let mut s = String::new();
        writeln!(s, "dt={}", self.dt).expect("string write");
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = Vec::with_capacity(2 * n + 1);
        if self.traj_id.is_some() {
            header.push("traj_id".to_string());
        }
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=n).map(|i| format!("y_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if let Some(ids) = &self.traj_id {
                rec.push(ids[i].to_string());
            }
            rec.extend(self.x[i].iter().chain(&self.y[i]).map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let body = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        s.push_str(std::str::from_utf8(&body).map_err(|e| Error::Parse(e.to_string()))?);
        Ok(s)
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut buf = BufReader::new(reader);
        let mut first = String::new();
        buf.read_line(&mut first)?;
        let dt: f64 = first
            .trim()
            .strip_prefix("dt=")
            .ok_or_else(|| Error::Parse("snapshot file must start with dt=<value>".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("bad dt: {e}")))?;
        let mut rdr = csv::Reader::from_reader(buf);
        let header = rdr.headers().map_err(csv_err)?.clone();
        let grouped = header.get(0) == Some("traj_id");
        let ncols = header.len() - usize::from(grouped);
        if ncols == 0 || ncols % 2 != 0 {
            return Err(Error::Parse(format!("expected 2n state columns, found {ncols}")));
        }
        let n = ncols / 2;
        let (mut x, mut y, mut ids) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let mut fields = rec.iter();
            if grouped {
                let id = fields.next().unwrap_or("");
                ids.push(id.trim().parse::<usize>().map_err(|e| Error::Parse(format!("bad traj_id: {e}")))?);
            }
            let vals = fields
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Parse(format!("bad value {f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            check_dim(2 * n, vals.len())?;
            x.push(vals[..n].to_vec());
            y.push(vals[n..].to_vec());
        }
        let set = SnapshotSet {
            x,
            y,
            dt,
            traj_id: grouped.then_some(ids),
        };
        set.validate()?;
        Ok(set)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Draws `n_traj` initial conditions from `region` and rolls each out for
/// `steps` RK4 steps, pairing consecutive states.
///
/// Initial conditions are drawn sequentially from a seeded stream before any
/// integration, so the output does not depend on the worker count.
pub fn sample_snapshots(
    field: &VectorField,
    region: &Region,
    n_traj: usize,
    steps: usize,
    dt: f64,
    seed: u64,
) -> Result<SnapshotSet> {
    region.validate()?;
    check_dim(field.dim(), region.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = (0..n_traj).map(|_| region.sample(&mut rng)).collect::<Result<Vec<_>>>()?;
    let trajs = par::try_map_range(starts.len(), |i| integrate_rk4(field, &starts[i], dt, steps))?;
    Ok(pairs_from_trajectories(&trajs, dt))
}

pub fn pairs_from_trajectories(trajs: &[Trajectory], dt: f64) -> SnapshotSet {
    let (mut x, mut y, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for (id, t) in trajs.iter().enumerate() {
        for w in t.states.windows(2) {
            x.push(w[0].clone());
            y.push(w[1].clone());
            ids.push(id);
        }
    }
    SnapshotSet {
        x,
        y,
        dt,
        traj_id: Some(ids),
    }
}
