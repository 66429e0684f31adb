//! Checks of a candidate certificate `{V ≤ γ}` against the condition
//! `V̇ ≤ β(γ − V)` on the set: multistart gradient ascent on the residual,
//! a dense grid for low dimensions, and forward simulation.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lyapunov::{BasisEvaluator, CandidateFunction, LyapunovBasis};
use crate::par;
use crate::systems::{rk4_step, Region, Rk4Scratch, VectorField};

/// Bisection steps used to pull an infeasible iterate back into `{V ≤ γ}`.
const PULLBACK_STEPS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let d = DomainBox { lo, hi };
        d.validate()?;
        Ok(d)
    }

    /// Bounding box of `xs` scaled by `factor` about its center.
    pub fn around(xs: &[Vec<f64>], factor: f64) -> Result<Self> {
        let first = xs.first().ok_or(Error::ZeroData)?;
        let n = first.len();
        let mut lo = first.clone();
        let mut hi = first.clone();
        for x in xs {
            check_dim(n, x.len())?;
            for j in 0..n {
                lo[j] = lo[j].min(x[j]);
                hi[j] = hi[j].max(x[j]);
            }
        }
        let (lo, hi) = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| {
                let (c, w) = (0.5 * (l + h), 0.5 * factor * (h - l));
                (c - w, c + w)
            })
            .unzip();
        DomainBox::new(lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.lo.len(), self.hi.len())?;
        if self.lo.is_empty() || self.lo.iter().zip(&self.hi).any(|(l, h)| !(l <= h && l.is_finite() && h.is_finite())) {
            return Err(Error::InvalidInput("domain box must be bounded with lo ≤ hi".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[j], self.hi[j]);
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| if l == h { *l } else { rng.random_range(*l..*h) })
            .collect()
    }

    fn diagonal(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| (h - l) * (h - l)).sum::<f64>().sqrt()
    }
}

/// Candidate bound to a basis and vector field.
pub struct Certificate<'a> {
    eval: BasisEvaluator<'a>,
    cand: &'a CandidateFunction,
}

impl<'a> Certificate<'a> {
    pub fn new(basis: &'a LyapunovBasis, field: &'a VectorField, cand: &'a CandidateFunction) -> Result<Self> {
        cand.validate(basis)?;
        Ok(Certificate {
            eval: BasisEvaluator::new(basis, field)?,
            cand,
        })
    }

    pub fn candidate(&self) -> &CandidateFunction {
        self.cand
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.cand.combine(&self.eval.basis().eval(x)?))
    }

    /// `(V(x), R(x))` with `R = L_fV − β(γ − V)`.
    pub fn value_residual(&self, x: &[f64]) -> Result<(f64, f64)> {
        let p = self.eval.eval(x, false)?;
        let v = self.cand.combine(&p.v);
        let vd = self.cand.combine(&p.vdot);
        Ok((v, vd - self.cand.beta * (self.cand.gamma - v)))
    }

    pub fn residual(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value_residual(x)?.1)
    }

    /// `(V, R, ∇R)`.
    pub fn residual_grad(&self, x: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
        let p = self.eval.eval(x, true)?;
        let (gv, gvd) = (p.grad_v.expect("requested"), p.grad_vdot.expect("requested"));
        let v = self.cand.combine(&p.v);
        let r = self.cand.combine(&p.vdot) - self.cand.beta * (self.cand.gamma - v);
        let beta = self.cand.beta;
        let grad = (0..x.len())
            .map(|j| {
                self.cand
                    .alpha
                    .iter()
                    .enumerate()
                    .map(|(i, a)| a * (gvd[(i, j)] + beta * gv[(i, j)]))
                    .sum()
            })
            .collect();
        Ok((v, r, grad))
    }
}

/// `L_fV(x) − β(γ − V(x))`. Needs a monomial dictionary.
pub fn residual(basis: &LyapunovBasis, field: &VectorField, cand: &CandidateFunction, x: &[f64]) -> Result<f64> {
    Certificate::new(basis, field, cand)?.residual(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Verified,
    Falsified,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NlpConfig {
    pub starts: usize,
    pub max_iters: usize,
    /// Initial step length as a fraction of the domain diagonal.
    pub initial_step: f64,
    /// Growth and shrink factors of the adaptive step.
    pub grow: f64,
    pub shrink: f64,
    pub xtol: f64,
    pub ftol: f64,
    /// Verified only if the best value is below `−tol_margin`.
    pub tol_margin: f64,
    pub seed: u64,
}

impl Default for NlpConfig {
    fn default() -> Self {
        NlpConfig {
            starts: 64,
            max_iters: 1000,
            initial_step: 0.05,
            grow: 1.5,
            shrink: 0.5,
            xtol: 1e-10,
            ftol: 1e-13,
            tol_margin: 1e-6,
            seed: 0,
        }
    }
}

impl NlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.starts == 0
            || self.max_iters == 0
            || !(self.initial_step > 0.0)
            || !(self.grow >= 1.0)
            || !(self.shrink > 0.0 && self.shrink < 1.0)
            || !(self.tol_margin >= 0.0)
        {
            return Err(Error::InvalidInput("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartTrace {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub verdict: Verdict,
    pub max_value: f64,
    pub argmax: Vec<f64>,
    pub starts: usize,
    pub converged: usize,
    pub iterations: usize,
    pub domain: DomainBox,
    pub gamma: f64,
    pub beta: f64,
    pub traces: Vec<StartTrace>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn ascend(cert: &Certificate<'_>, domain: &DomainBox, x0: Vec<f64>, cfg: &NlpConfig) -> Result<StartTrace> {
    let gamma = cert.cand.gamma;
    let mut x = x0.clone();
    let (_, mut r, mut g) = cert.residual_grad(&x)?;
    let gn = norm(&g);
    let mut eta = cfg.initial_step * domain.diagonal() / gn.max(1e-300);
    let mut converged = false;
    let mut it = 0;
    while it < cfg.max_iters {
        it += 1;
        let gn = norm(&g);
        let xn = norm(&x);
        if gn == 0.0 || eta * gn <= cfg.xtol * (1.0 + xn) {
            converged = true;
            break;
        }
        let mut cand: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + eta * b).collect();
        domain.clamp(&mut cand);
        if cert.value(&cand)? > gamma {
            // largest feasible fraction of the segment x → cand
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..PULLBACK_STEPS {
                let mid = 0.5 * (lo + hi);
                let p: Vec<f64> = x.iter().zip(&cand).map(|(a, b)| a + mid * (b - a)).collect();
                if cert.value(&p)? <= gamma {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            cand = x.iter().zip(&cand).map(|(a, b)| a + lo * (b - a)).collect();
        }
        let (_, rc, gc) = cert.residual_grad(&cand)?;
        if rc > r {
            let dx = norm(&cand.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
            let gain = rc - r;
            x = cand;
            r = rc;
            g = gc;
            eta *= cfg.grow;
            if dx <= cfg.xtol * (1.0 + norm(&x)) || gain <= cfg.ftol * (1.0 + r.abs()) {
                converged = true;
                break;
            }
        } else {
            eta *= cfg.shrink;
        }
    }
    Ok(StartTrace {
        start: x0,
        end: x,
        value: r,
        iterations: it,
        converged,
    })
}

fn better(a: &StartTrace, b: &StartTrace) -> bool {
    a.value > b.value
        || (a.value == b.value && a.end.iter().zip(&b.end).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()) == Some(std::cmp::Ordering::Less))
}

/// Multistart projected gradient ascent of the residual over `{V ≤ γ} ∩ box`.
pub fn nlp_verify(
    basis: &LyapunovBasis,
    field: &VectorField,
    cand: &CandidateFunction,
    domain: &DomainBox,
    cfg: &NlpConfig,
) -> Result<VerificationReport> {
    cfg.validate()?;
    domain.validate()?;
    check_dim(field.dim(), domain.dim())?;
    let cert = Certificate::new(basis, field, cand)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let attempts = 10 * cfg.starts;
    let mut starts = Vec::with_capacity(cfg.starts);
    for _ in 0..attempts {
        let x = domain.sample(&mut rng);
        if cert.value(&x)? <= cand.gamma {
            starts.push(x);
            if starts.len() == cfg.starts {
                break;
            }
        }
    }
    if starts.is_empty() {
        return Err(Error::NoFeasibleStart { attempts });
    }

    let traces = par::try_map_range(starts.len(), |i| ascend(&cert, domain, starts[i].clone(), cfg))?;
    let mut best = &traces[0];
    for t in &traces[1..] {
        if better(t, best) {
            best = t;
        }
    }
    let converged = traces.iter().filter(|t| t.converged).count();
    let verdict = if best.value > 0.0 {
        Verdict::Falsified
    } else if best.value < -cfg.tol_margin && converged == traces.len() {
        Verdict::Verified
    } else {
        Verdict::Inconclusive
    };
    Ok(VerificationReport {
        verdict,
        max_value: best.value,
        argmax: best.end.clone(),
        starts: traces.len(),
        converged,
        iterations: traces.iter().map(|t| t.iterations).sum(),
        domain: domain.clone(),
        gamma: cand.gamma,
        beta: cand.beta,
        traces,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub verdict: Verdict,
    pub max_value: f64,
    pub argmax: Vec<f64>,
    pub feasible_points: usize,
    pub total_points: usize,
    /// Largest residual gradient norm seen on feasible points.
    pub lipschitz: f64,
    /// `lipschitz` times half the cell diagonal.
    pub cell_bound: f64,
}

/// Residual on a regular `resolution^n` grid restricted to `{V ≤ γ}`; `n ≤ 3`.
pub fn grid_falsify(
    basis: &LyapunovBasis,
    field: &VectorField,
    cand: &CandidateFunction,
    domain: &DomainBox,
    resolution: usize,
) -> Result<GridReport> {
    domain.validate()?;
    check_dim(field.dim(), domain.dim())?;
    let n = domain.dim();
    if n > 3 {
        return Err(Error::Unsupported(format!("grid search needs n ≤ 3, got {n}")));
    }
    if resolution < 2 {
        return Err(Error::InvalidInput("grid resolution must be at least 2".into()));
    }
    let cert = Certificate::new(basis, field, cand)?;
    let h: Vec<f64> = (0..n).map(|j| (domain.hi[j] - domain.lo[j]) / (resolution - 1) as f64).collect();
    let total = resolution.pow(n as u32);
    let point = |mut k: usize| -> Vec<f64> {
        (0..n)
            .map(|j| {
                let i = k % resolution;
                k /= resolution;
                domain.lo[j] + i as f64 * h[j]
            })
            .collect()
    };
    let evals = par::try_map_range(total, |k| -> Result<Option<(f64, f64)>> {
        let x = point(k);
        let (v, r, g) = cert.residual_grad(&x)?;
        Ok((v <= cand.gamma).then(|| (r, norm(&g))))
    })?;
    let mut best: Option<(f64, usize)> = None;
    let mut lip: f64 = 0.0;
    let mut feasible = 0;
    for (k, e) in evals.iter().enumerate() {
        if let Some((r, gn)) = *e {
            feasible += 1;
            lip = lip.max(gn);
            if best.is_none_or(|(b, _)| r > b) {
                best = Some((r, k));
            }
        }
    }
    let (max_value, k) = best.ok_or(Error::EmptyDomain)?;
    let cell_bound = lip * 0.5 * norm(&h);
    let verdict = if max_value > 0.0 {
        Verdict::Falsified
    } else if max_value + cell_bound < 0.0 {
        Verdict::Verified
    } else {
        Verdict::Inconclusive
    };
    Ok(GridReport {
        verdict,
        max_value,
        argmax: point(k),
        feasible_points: feasible,
        total_points: total,
        lipschitz: lip,
        cell_bound,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub trajectories: usize,
    pub horizon: f64,
    pub dt: f64,
    /// Relative overshoot `V > γ(1 + tol)` counted as a violation.
    pub tol: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            trajectories: 1000,
            horizon: 20.0,
            dt: crate::systems::DEFAULT_DT,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub trajectories: usize,
    pub violations: usize,
    /// Largest `max_t V(x(t)) / γ − 1` over all trajectories.
    pub worst_overshoot: f64,
    pub worst_start: Vec<f64>,
}

/// Rolls out trajectories from random starts in `{V ≤ γ} ∩ box` and counts
/// those that leave the set.
pub fn simulate_invariance(
    basis: &LyapunovBasis,
    field: &VectorField,
    cand: &CandidateFunction,
    domain: &DomainBox,
    cfg: &SimulationConfig,
) -> Result<SimulationReport> {
    domain.validate()?;
    let region = Region::Box {
        lo: domain.lo.clone(),
        hi: domain.hi.clone(),
    };
    simulate_invariance_in(basis, field, cand, &region, cfg)
}

/// [`simulate_invariance`] with starts drawn from `{V ≤ γ} ∩ region`.
pub fn simulate_invariance_in(
    basis: &LyapunovBasis,
    field: &VectorField,
    cand: &CandidateFunction,
    region: &Region,
    cfg: &SimulationConfig,
) -> Result<SimulationReport> {
    region.validate()?;
    check_dim(field.dim(), region.dim())?;
    cand.validate(basis)?;
    if cfg.trajectories == 0 || !(cfg.dt > 0.0) || !(cfg.horizon >= 0.0) || !(cfg.tol >= 0.0) {
        return Err(Error::InvalidInput("need trajectories > 0, dt > 0, horizon ≥ 0 and tol ≥ 0".into()));
    }
    let value = |x: &[f64]| -> Result<f64> { Ok(cand.combine(&basis.eval(x)?)) };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws = 100 * cfg.trajectories;
    let mut starts = Vec::with_capacity(cfg.trajectories);
    for _ in 0..draws {
        let x = region.sample(&mut rng)?;
        if value(&x)? <= cand.gamma {
            starts.push(x);
            if starts.len() == cfg.trajectories {
                break;
            }
        }
    }
    if starts.len() < cfg.trajectories {
        return Err(Error::SamplingFailed { draws });
    }
    let steps = (cfg.horizon / cfg.dt).ceil() as usize;
    let limit = cand.gamma * (1.0 + cfg.tol);
    let peaks = par::try_map_range(starts.len(), |i| -> Result<f64> {
        let mut x = starts[i].clone();
        let mut scratch = Rk4Scratch::new(x.len());
        let mut peak = value(&x)?;
        for _ in 0..steps {
            x = rk4_step(field, &x, cfg.dt, &mut scratch);
            if x.iter().any(|v| !v.is_finite()) {
                return Ok(f64::INFINITY);
            }
            peak = peak.max(value(&x)?);
            if peak > limit {
                break;
            }
        }
        Ok(peak)
    })?;
    let mut worst = 0;
    for (i, p) in peaks.iter().enumerate() {
        if *p > peaks[worst] {
            worst = i;
        }
    }
    Ok(SimulationReport {
        trajectories: starts.len(),
        violations: peaks.iter().filter(|p| **p > limit).count(),
        worst_overshoot: peaks[worst] / cand.gamma - 1.0,
        worst_start: starts[worst].clone(),
    })
}

/// `V̇ ≤ β(γ − V)` fraction over given points inside `{V ≤ γ}`; points outside
/// the set are skipped. Returns `(satisfied, inside)`.
pub fn decay_fraction(cert: &Certificate<'_>, xs: &[Vec<f64>]) -> Result<(usize, usize)> {
    let res = par::try_map_range(xs.len(), |k| cert.value_residual(&xs[k]))?;
    let gamma = cert.cand.gamma;
    let inside: Vec<f64> = res.iter().filter(|(v, _)| *v <= gamma).map(|(_, r)| *r).collect();
    Ok((inside.iter().filter(|r| **r <= 0.0).count(), inside.len()))
}

/// Gradient of the residual by central differences, for checks.
pub fn residual_grad_fd(cert: &Certificate<'_>, x: &[f64], h: f64) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(x.len());
    let mut p = x.to_vec();
    for j in 0..x.len() {
        p[j] = x[j] + h;
        let up = cert.residual(&p)?;
        p[j] = x[j] - h;
        let dn = cert.residual(&p)?;
        p[j] = x[j];
        g[j] = (up - dn) / (2.0 * h);
    }
    Ok(g)
}
