//! Lyapunov basis functions built from stable Koopman eigenfunctions.
//!
//! Each entry is `V(x) = s · ½|ψ(x)|²` where `ψ` is a single eigenfunction or
//! a pairwise product of two, and `s > 0` is a normalization scale. For an
//! exact eigenfunction with eigenvalue `λ`, `V̇ = 2 Re(λ) V`; this `2 Re(λ)` is
//! the entry's decay rate. The residual `ε = V̇ − rate·V` measures how far an
//! approximate eigenfunction is from that ideal and is bounded by the model
//! `|ε| ≤ κV² + ω`.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{MonomialDictionary, MonomialSpec, Observables};
use crate::error::{check_dim, Error, Result};
use crate::koopman::{select_stable, stable_candidates, Dictionary, DictionaryFile, KoopmanModel, Spectrum};
use crate::par;
use crate::poly::power_table;
use crate::systems::{SnapshotSet, VectorField};

/// Log-spaced κ grid used by the bound fit.
pub const KAPPA_GRID_POINTS: usize = 81;
pub const KAPPA_MIN: f64 = 1e-4;
pub const KAPPA_MAX: f64 = 1e4;

/// Relative slack in the `theorem1_check` comparison; single-entry cases sit exactly
/// on equality.
pub const THEOREM1_REL_TOL: f64 = 1e-12;

/// A base eigenfunction `ψ(x) = vᵀΦ(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenFunction {
    pub spectrum_index: usize,
    pub lambda: Complex64,
    pub v: Vec<Complex64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisEntry {
    /// Indices into the base functions: one for a plain entry, two for a product.
    pub factors: Vec<usize>,
    pub lambda: Complex64,
    pub scale: f64,
    pub eps_hat: f64,
    pub kappa: f64,
    pub omega: f64,
}

impl BasisEntry {
    /// `2 Re(λ)`, the decay rate of `V` along an exact eigenfunction.
    pub fn rate(&self) -> f64 {
        2.0 * self.lambda.re
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LyapunovBasis {
    pub dictionary: Dictionary,
    pub functions: Vec<EigenFunction>,
    pub entries: Vec<BasisEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    /// Forward difference `(V(y) − V(x)) / dt` on snapshot pairs.
    Data,
    /// Chain rule through the known vector field.
    Analytic,
}

impl LyapunovBasis {
    /// One plain entry per selected spectrum index, unit scale, empty bounds.
    pub fn from_spectrum(model: &KoopmanModel, spectrum: &Spectrum, indices: &[usize]) -> Result<Self> {
        let mut functions = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = spectrum
                .pairs
                .get(i)
                .ok_or_else(|| Error::InvalidInput(format!("spectrum index {i} out of range")))?;
            if !(p.lambda.re < 0.0) {
                return Err(Error::InvalidInput(format!("spectrum index {i} is not stable")));
            }
            check_dim(model.dim(), p.v.len())?;
            functions.push(EigenFunction {
                spectrum_index: i,
                lambda: p.lambda,
                v: p.v.clone(),
            });
        }
        let entries = (0..functions.len())
            .map(|i| BasisEntry {
                factors: vec![i],
                lambda: functions[i].lambda,
                scale: 1.0,
                eps_hat: 0.0,
                kappa: KAPPA_MIN,
                omega: 0.0,
            })
            .collect();
        Ok(LyapunovBasis {
            dictionary: model.dictionary.clone(),
            functions,
            entries,
        })
    }

    /// Entries `½x_j²`, one per coordinate, over the degree-1 monomials, each
    /// tagged with eigenvalue `lambda`. With unit weights the candidate is `½‖x‖²`.
    pub fn coordinates(n: usize, lambda: f64) -> Result<Self> {
        let dict = MonomialDictionary::new(n, 1)?;
        let functions: Vec<EigenFunction> = (0..n)
            .map(|j| {
                let mut e = vec![0; n];
                e[j] = 1;
                let k = dict.index_of(&crate::poly::MultiIndex(e)).expect("degree-1 term present");
                let mut v = vec![Complex64::new(0.0, 0.0); dict.len()];
                v[k] = Complex64::new(1.0, 0.0);
                EigenFunction {
                    spectrum_index: j,
                    lambda: Complex64::new(lambda, 0.0),
                    v,
                }
            })
            .collect();
        let entries = (0..n)
            .map(|i| BasisEntry {
                factors: vec![i],
                lambda: Complex64::new(lambda, 0.0),
                scale: 1.0,
                eps_hat: 0.0,
                kappa: KAPPA_MIN,
                omega: 0.0,
            })
            .collect();
        Ok(LyapunovBasis {
            dictionary: Dictionary::Monomial(dict),
            functions,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn nvars(&self) -> usize {
        self.dictionary.input_dim()
    }

    pub fn rates(&self) -> Vec<f64> {
        self.entries.iter().map(BasisEntry::rate).collect()
    }

    /// Base eigenfunction values `ψ_f(x)`.
    fn psi(&self, phi: &[f64]) -> Vec<Complex64> {
        self.functions
            .iter()
            .map(|f| f.v.iter().zip(phi).map(|(v, p)| v * *p).sum())
            .collect()
    }

    fn entry_psi(&self, psi: &[Complex64]) -> Vec<Complex64> {
        self.entries
            .iter()
            .map(|e| e.factors.iter().map(|&f| psi[f]).product())
            .collect()
    }

    /// `V_i(x)` for every entry.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let phi = self.dictionary.lift(x)?;
        let psi = self.psi(&phi);
        Ok(self
            .entry_psi(&psi)
            .iter()
            .zip(&self.entries)
            .map(|(p, e)| 0.5 * e.scale * p.norm_sqr())
            .collect())
    }

    /// Rows `V(x_k)` for a batch of states.
    pub fn eval_batch(&self, xs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let rows = par::try_map_range(xs.len(), |k| self.eval(&xs[k]))?;
        Ok(rows_to_matrix(&rows, self.len()))
    }

    /// Appends every unordered pairwise product of the current plain entries.
    pub fn augment_products(&mut self) {
        let plain: Vec<usize> = self
            .entries
            .iter()
            .filter(|e| e.factors.len() == 1)
            .map(|e| e.factors[0])
            .collect();
        for a in 0..plain.len() {
            for b in a..plain.len() {
                let (fa, fb) = (plain[a], plain[b]);
                self.entries.push(BasisEntry {
                    factors: vec![fa, fb],
                    lambda: self.functions[fa].lambda + self.functions[fb].lambda,
                    scale: 1.0,
                    eps_hat: 0.0,
                    kappa: KAPPA_MIN,
                    omega: 0.0,
                });
            }
        }
    }

    /// Rescales each entry so its largest value over `xs` is 1.
    pub fn normalize(&mut self, xs: &[Vec<f64>]) -> Result<()> {
        let v = self.eval_batch(xs)?;
        for (i, e) in self.entries.iter_mut().enumerate() {
            let max = v.column(i).max();
            if max > 0.0 && max.is_finite() {
                e.scale /= max;
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> BasisFile {
        BasisFile {
            dictionary: self.dictionary.to_file(),
            functions: self
                .functions
                .iter()
                .map(|f| FunctionFile {
                    spectrum_index: f.spectrum_index,
                    lambda: [f.lambda.re, f.lambda.im],
                    v: f.v.iter().flat_map(|z| [z.re, z.im]).collect(),
                })
                .collect(),
            entries: self.entries.clone(),
        }
    }

    pub fn from_file(file: &BasisFile) -> Result<Self> {
        let dictionary = Dictionary::from_file(&file.dictionary)?;
        let m = dictionary.output_dim();
        let functions = file
            .functions
            .iter()
            .map(|f| {
                check_dim(2 * m, f.v.len())?;
                Ok(EigenFunction {
                    spectrum_index: f.spectrum_index,
                    lambda: Complex64::new(f.lambda[0], f.lambda[1]),
                    v: f.v.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for e in &file.entries {
            if e.factors.is_empty() || e.factors.len() > 2 || e.factors.iter().any(|&f| f >= functions.len()) {
                return Err(Error::Parse("basis entry references an unknown function".into()));
            }
            if !(e.scale > 0.0) {
                return Err(Error::Parse("basis entry scale must be positive".into()));
            }
        }
        Ok(LyapunovBasis {
            dictionary,
            functions,
            entries: file.entries.clone(),
        })
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], cols: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), cols);
    for (k, r) in rows.iter().enumerate() {
        for (i, v) in r.iter().enumerate() {
            out[(k, i)] = *v;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionFile {
    pub spectrum_index: usize,
    pub lambda: [f64; 2],
    /// `[re₀, im₀, re₁, im₁, …]`.
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisFile {
    pub dictionary: DictionaryFile,
    pub functions: Vec<FunctionFile>,
    pub entries: Vec<BasisEntry>,
}

/// Per-point values, time derivatives and gradients of the basis along a
/// polynomial vector field.
pub struct BasisEvaluator<'a> {
    basis: &'a LyapunovBasis,
    field: &'a VectorField,
    ext: MonomialDictionary,
    /// `v` padded to the extended dictionary.
    v_ext: Vec<Vec<Complex64>>,
    /// `L v`: coefficients of `ψ̇` in the extended dictionary.
    w_ext: Vec<Vec<Complex64>>,
}

/// Everything the verifier needs at one point.
#[derive(Clone, Debug)]
pub struct PointEval {
    pub v: Vec<f64>,
    pub vdot: Vec<f64>,
    /// `∂V_i/∂x_j`, entries × n.
    pub grad_v: Option<DMatrix<f64>>,
    pub grad_vdot: Option<DMatrix<f64>>,
}

impl<'a> BasisEvaluator<'a> {
    pub fn new(basis: &'a LyapunovBasis, field: &'a VectorField) -> Result<Self> {
        let dict = basis
            .dictionary
            .as_monomial()
            .ok_or_else(|| Error::Unsupported("analytic derivatives need a monomial dictionary".into()))?;
        check_dim(dict.nvars(), field.dim())?;
        let (ext, l) = dict.lie_operator(field)?;
        let pad = |v: &[Complex64]| {
            let mut out = vec![Complex64::new(0.0, 0.0); ext.len()];
            out[..v.len()].copy_from_slice(v);
            out
        };
        let v_ext = basis.functions.iter().map(|f| pad(&f.v)).collect();
        let w_ext = basis
            .functions
            .iter()
            .map(|f| {
                (0..ext.len())
                    .map(|r| (0..dict.len()).map(|k| f.v[k] * l[(r, k)]).sum())
                    .collect()
            })
            .collect();
        Ok(BasisEvaluator {
            basis,
            field,
            ext,
            v_ext,
            w_ext,
        })
    }

    pub fn field(&self) -> &VectorField {
        self.field
    }

    pub fn basis(&self) -> &LyapunovBasis {
        self.basis
    }

    /// Values and derivatives; gradients too when `with_grad`.
    pub fn eval(&self, x: &[f64], with_grad: bool) -> Result<PointEval> {
        let n = self.ext.nvars();
        check_dim(n, x.len())?;
        let pw = power_table(x, self.ext.degree());
        let phi: Vec<f64> = self.ext.terms().iter().map(|t| t.eval_powers(&pw)).collect();
        let dot = |c: &[Complex64], p: &[f64]| -> Complex64 { c.iter().zip(p).map(|(a, b)| a * *b).sum() };
        let nf = self.basis.functions.len();
        let psi: Vec<Complex64> = (0..nf).map(|f| dot(&self.v_ext[f], &phi)).collect();
        let psid: Vec<Complex64> = (0..nf).map(|f| dot(&self.w_ext[f], &phi)).collect();

        // gradients of ψ and ψ̇ per function: Jᵀc
        let (gpsi, gpsid) = if with_grad {
            let mut jac = DMatrix::zeros(self.ext.len(), n);
            self.ext.jacobian_into(&pw, &mut jac);
            let grad_of = |c: &[Complex64]| -> Vec<Complex64> {
                (0..n).map(|j| (0..c.len()).map(|k| c[k] * jac[(k, j)]).sum()).collect()
            };
            (
                (0..nf).map(|f| grad_of(&self.v_ext[f])).collect::<Vec<_>>(),
                (0..nf).map(|f| grad_of(&self.w_ext[f])).collect::<Vec<_>>(),
            )
        } else {
            (Vec::new(), Vec::new())
        };

        let m = self.basis.len();
        let mut v = Vec::with_capacity(m);
        let mut vdot = Vec::with_capacity(m);
        let mut grad_v = with_grad.then(|| DMatrix::zeros(m, n));
        let mut grad_vdot = with_grad.then(|| DMatrix::zeros(m, n));
        for (i, e) in self.basis.entries.iter().enumerate() {
            let (p, pd, gp, gpd): (Complex64, Complex64, Vec<Complex64>, Vec<Complex64>) = match e.factors[..] {
                [a] => (
                    psi[a],
                    psid[a],
                    if with_grad { gpsi[a].clone() } else { Vec::new() },
                    if with_grad { gpsid[a].clone() } else { Vec::new() },
                ),
                [a, b] => {
                    let p = psi[a] * psi[b];
                    let pd = psid[a] * psi[b] + psi[a] * psid[b];
                    if with_grad {
                        let gp = (0..n).map(|j| gpsi[a][j] * psi[b] + psi[a] * gpsi[b][j]).collect();
                        let gpd = (0..n)
                            .map(|j| gpsid[a][j] * psi[b] + psid[a] * gpsi[b][j] + gpsi[a][j] * psid[b] + psi[a] * gpsid[b][j])
                            .collect();
                        (p, pd, gp, gpd)
                    } else {
                        (p, pd, Vec::new(), Vec::new())
                    }
                }
                _ => return Err(Error::InvalidInput("basis entry needs one or two factors".into())),
            };
            let s = e.scale;
            v.push(0.5 * s * p.norm_sqr());
            vdot.push(s * (p.conj() * pd).re);
            if let (Some(gv), Some(gvd)) = (grad_v.as_mut(), grad_vdot.as_mut()) {
                for j in 0..n {
                    gv[(i, j)] = s * (p.conj() * gp[j]).re;
                    gvd[(i, j)] = s * (gp[j].conj() * pd + p.conj() * gpd[j]).re;
                }
            }
        }
        Ok(PointEval {
            v,
            vdot,
            grad_v,
            grad_vdot,
        })
    }
}

/// `V̇_i(x) = s · Re(conj(ψ) ψ̇)` through the vector field.
pub fn eval_basis_dot_analytic(basis: &LyapunovBasis, field: &VectorField, x: &[f64]) -> Result<Vec<f64>> {
    Ok(BasisEvaluator::new(basis, field)?.eval(x, false)?.vdot)
}

/// Values at `X` and forward-difference derivatives `(V(Y) − V(X)) / dt`.
pub fn eval_basis_dot_data(basis: &LyapunovBasis, xs: &[Vec<f64>], ys: &[Vec<f64>], dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("dt must be positive".into()));
    }
    check_dim(xs.len(), ys.len())?;
    let vx = basis.eval_batch(xs)?;
    let vy = basis.eval_batch(ys)?;
    let vdot = (&vy - &vx) / dt;
    Ok((vx, vdot))
}

/// Values and analytic derivatives for a batch of states.
pub fn eval_basis_dot_analytic_batch(basis: &LyapunovBasis, field: &VectorField, xs: &[Vec<f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let ev = BasisEvaluator::new(basis, field)?;
    let rows = par::try_map_range(xs.len(), |k| ev.eval(&xs[k], false))?;
    let v: Vec<Vec<f64>> = rows.iter().map(|r| r.v.clone()).collect();
    let d: Vec<Vec<f64>> = rows.iter().map(|r| r.vdot.clone()).collect();
    Ok((rows_to_matrix(&v, basis.len()), rows_to_matrix(&d, basis.len())))
}

/// Values and derivatives on snapshot pairs in the requested mode.
pub fn basis_derivatives(
    basis: &LyapunovBasis,
    snapshots: &SnapshotSet,
    field: Option<&VectorField>,
    mode: DerivativeMode,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match (mode, field) {
        (DerivativeMode::Analytic, Some(f)) => eval_basis_dot_analytic_batch(basis, f, &snapshots.x),
        (DerivativeMode::Analytic, None) => Err(Error::InvalidInput("analytic derivatives need a vector field".into())),
        (DerivativeMode::Data, _) => eval_basis_dot_data(basis, &snapshots.x, &snapshots.y, snapshots.dt),
    }
}

/// `ω(κ) = max(0, max_k |ε_k| − κ V_k²)`, the least offset admissible at `κ`.
pub fn omega_for_kappa(eps: &[f64], v: &[f64], kappa: f64) -> f64 {
    eps.iter()
        .zip(v)
        .map(|(e, v)| e.abs() - kappa * v * v)
        .fold(0.0, f64::max)
}

pub fn kappa_grid() -> Vec<f64> {
    let (lo, hi) = (KAPPA_MIN.log10(), KAPPA_MAX.log10());
    (0..KAPPA_GRID_POINTS)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (KAPPA_GRID_POINTS - 1) as f64))
        .collect()
}

/// `(κ, ω)` on the log grid minimizing `κ·ω`, the product that decides whether
/// an invariance interval exists; ties go to the smallest `κ`.
pub fn fit_kappa_omega(eps: &[f64], v: &[f64]) -> (f64, f64) {
    let mut best = (f64::INFINITY, KAPPA_MIN, omega_for_kappa(eps, v, KAPPA_MIN));
    for kappa in kappa_grid() {
        let omega = omega_for_kappa(eps, v, kappa);
        let prod = kappa * omega;
        if prod < best.0 {
            best = (prod, kappa, omega);
        }
    }
    (best.1, best.2)
}

/// Fills `ε̂`, `κ`, `ω` for each entry from sampled values and derivatives.
pub fn estimate_error_bounds(basis: &mut LyapunovBasis, v: &DMatrix<f64>, vdot: &DMatrix<f64>) -> Result<()> {
    check_dim(basis.len(), v.ncols())?;
    check_dim(v.shape().0, vdot.nrows())?;
    check_dim(v.ncols(), vdot.ncols())?;
    if v.nrows() < 10 {
        return Err(Error::InvalidInput(format!("need at least 10 samples, got {}", v.nrows())));
    }
    for (i, e) in basis.entries.iter_mut().enumerate() {
        let rate = e.rate();
        let vi: Vec<f64> = v.column(i).iter().copied().collect();
        let eps: Vec<f64> = vdot.column(i).iter().zip(&vi).map(|(d, v)| d - rate * v).collect();
        if eps.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite error sample for entry {i}")));
        }
        e.eps_hat = eps.iter().fold(0.0, |m, x| m.max(x.abs()));
        let (kappa, omega) = fit_kappa_omega(&eps, &vi);
        e.kappa = kappa;
        e.omega = omega;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisConfig {
    /// Number of eigenfunctions kept before product augmentation.
    pub m: usize,
    pub margin: f64,
    pub products: bool,
    pub derivatives: DerivativeMode,
    /// Cap on snapshot pairs used for normalization and bounds.
    pub max_samples: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            m: 4,
            margin: crate::koopman::DEFAULT_STABILITY_MARGIN,
            products: false,
            derivatives: DerivativeMode::Analytic,
            max_samples: 5000,
        }
    }
}

/// Picks the `m` stable eigenfunctions with the smallest `ε̂`, optionally adds
/// pairwise products, normalizes and fits the error bounds.
pub fn build_basis(
    model: &KoopmanModel,
    spectrum: &Spectrum,
    cfg: &BasisConfig,
    snapshots: &SnapshotSet,
    field: Option<&VectorField>,
) -> Result<LyapunovBasis> {
    if cfg.m == 0 {
        return Err(Error::InvalidInput("need at least one basis function".into()));
    }
    let samples = thin(snapshots, cfg.max_samples);
    let candidates = stable_candidates(spectrum, cfg.margin);
    if candidates.is_empty() {
        return Err(Error::NoStableEigenpairs);
    }
    let mut all = LyapunovBasis::from_spectrum(model, spectrum, &candidates)?;
    all.normalize(&samples.x)?;
    let (v, vd) = basis_derivatives(&all, &samples, field, cfg.derivatives)?;
    estimate_error_bounds(&mut all, &v, &vd)?;
    let mut scores = vec![f64::INFINITY; spectrum.len()];
    for (e, &idx) in all.entries.iter().zip(&candidates) {
        scores[idx] = e.eps_hat;
    }
    let chosen = select_stable(spectrum, cfg.m, cfg.margin, Some(&scores))?;

    let mut basis = LyapunovBasis::from_spectrum(model, spectrum, &chosen)?;
    if cfg.products {
        basis.augment_products();
    }
    basis.normalize(&samples.x)?;
    let (v, vd) = basis_derivatives(&basis, &samples, field, cfg.derivatives)?;
    estimate_error_bounds(&mut basis, &v, &vd)?;
    Ok(basis)
}

/// Evenly strided subset of at most `cap` pairs.
pub fn thin(snapshots: &SnapshotSet, cap: usize) -> SnapshotSet {
    if snapshots.len() <= cap || cap == 0 {
        return snapshots.clone();
    }
    let idx: Vec<usize> = (0..cap).map(|k| k * snapshots.len() / cap).collect();
    snapshots.select(&idx)
}

/// `α_i = exp(−ε̂_i) / Σ_j exp(−ε̂_j)`.
pub fn softmax_weights(eps_hat: &[f64]) -> Vec<f64> {
    if eps_hat.is_empty() {
        return Vec::new();
    }
    let min = eps_hat.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = eps_hat.iter().map(|e| (min - e).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

/// Interval of levels `(γ_lo, γ_hi)` on which `κv² + rate·v + ω < 0`.
///
/// `rate` must be negative. Returns `None` when the quadratic has no
/// positive gap.
pub fn invariance_interval(rate: f64, kappa: f64, omega: f64) -> Result<Option<(f64, f64)>> {
    if !(rate < 0.0) {
        return Err(Error::InvalidInput(format!("decay rate must be negative, got {rate}")));
    }
    if !(kappa >= 0.0 && omega >= 0.0) {
        return Err(Error::InvalidInput("κ and ω must be non-negative".into()));
    }
    if kappa == 0.0 {
        return Ok(Some((omega / -rate, f64::INFINITY)));
    }
    let disc = rate * rate - 4.0 * kappa * omega;
    if !(disc > 0.0) {
        return Ok(None);
    }
    let hi = (-rate + disc.sqrt()) / (2.0 * kappa);
    // product of the roots is ω/κ; avoids cancellation in the small root
    let lo = omega / (kappa * hi);
    Ok(Some((lo, hi)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub gamma: f64,
    pub beta: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    pub intervals: Vec<(f64, f64)>,
}

/// Sufficient condition `γβ ≥ Σ α_i (κ_i γ̄_i² + ω_i)` with `γ = min α_i γ̄_i`
/// and `β = min(−rate_i)`, where `γ̄_i` is the upper end of entry `i`'s
/// invariance interval. Each bound is `(rate, κ, ω)`.
pub fn theorem1_check(bounds: &[(f64, f64, f64)], alpha: &[f64]) -> Result<Theorem1Report> {
    check_dim(bounds.len(), alpha.len())?;
    if bounds.is_empty() {
        return Err(Error::InvalidInput("need at least one basis entry".into()));
    }
    let mut intervals = Vec::with_capacity(bounds.len());
    for (i, &(rate, kappa, omega)) in bounds.iter().enumerate() {
        intervals.push(invariance_interval(rate, kappa, omega)?.ok_or(Error::NoInvarianceInterval { index: i })?);
    }
    let gamma = intervals
        .iter()
        .zip(alpha)
        .map(|((_, hi), a)| a * hi)
        .fold(f64::INFINITY, f64::min);
    let beta = bounds.iter().map(|b| -b.0).fold(f64::INFINITY, f64::min);
    let lhs = gamma * beta;
    let rhs: f64 = bounds
        .iter()
        .zip(&intervals)
        .zip(alpha)
        .map(|((&(_, kappa, omega), &(_, hi)), a)| {
            let quad = if kappa == 0.0 { 0.0 } else { kappa * hi * hi };
            a * (quad + omega)
        })
        .sum();
    let satisfied = lhs >= rhs - THEOREM1_REL_TOL * lhs.abs().max(rhs.abs());
    Ok(Theorem1Report {
        gamma,
        beta,
        lhs,
        rhs,
        satisfied,
        intervals,
    })
}

/// Threshold on `ω` above which the error model is admissible for decay rate
/// `λ`, curvature `κ` and comparison constants `p, q`.
pub fn lemma1_min_omega(lambda: f64, kappa: f64, p: f64, q: f64) -> f64 {
    (p + lambda).powi(2) / (4.0 * kappa) - q * q / (4.0 * p * p)
}

/// Weights, level and rate of a candidate `V = Σ α_i V_i` with set `{V ≤ γ}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateFunction {
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub beta: f64,
}

impl CandidateFunction {
    pub fn validate(&self, basis: &LyapunovBasis) -> Result<()> {
        check_dim(basis.len(), self.alpha.len())?;
        if self.alpha.iter().any(|a| !(*a >= 0.0 && a.is_finite())) || !self.alpha.iter().any(|a| *a > 0.0) {
            return Err(Error::InvalidInput("weights must be non-negative, finite and not all zero".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidInput("need γ > 0 and β ≥ 0".into()));
        }
        Ok(())
    }

    pub fn combine(&self, values: &[f64]) -> f64 {
        self.alpha.iter().zip(values).map(|(a, v)| a * v).sum()
    }

    pub fn value(&self, basis: &LyapunovBasis, x: &[f64]) -> Result<f64> {
        Ok(self.combine(&basis.eval(x)?))
    }
}

/// `V(x) = m(x)ᵀ Q m(x)` over a monomial vector `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramForm {
    pub monomials: MonomialSpec,
    pub q: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramFile {
    pub monomials: MonomialSpec,
    pub q: crate::koopman::MatrixFile,
    pub min_eigenvalue: f64,
}

impl GramForm {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let m = MonomialDictionary::from_spec(&self.monomials)?.eval(x)?;
        let mv = DMatrix::from_column_slice(m.len(), 1, &m);
        Ok((mv.transpose() * &self.q * &mv)[(0, 0)])
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.q.clone()).eigenvalues.min()
    }

    pub fn to_file(&self) -> GramFile {
        GramFile {
            monomials: self.monomials.clone(),
            q: crate::koopman::MatrixFile::from_matrix(&self.q),
            min_eigenvalue: self.min_eigenvalue(),
        }
    }
}

/// Gram matrix of a candidate over monomials.
///
/// Each entry contributes `(α s / 2)(Re c Re cᵀ + Im c Im cᵀ)` where `c` are the
/// coefficients of its eigenfunction (product entries use the degree-`2d`
/// monomials). Consistency with direct evaluation is checked at 100 seeded
/// points in `[−1, 1]ⁿ` scaled by `radius`.
pub fn gram_matrix(basis: &LyapunovBasis, alpha: &[f64], radius: f64) -> Result<GramForm> {
    check_dim(basis.len(), alpha.len())?;
    let dict = basis
        .dictionary
        .as_monomial()
        .ok_or_else(|| Error::Unsupported("Gram form needs a monomial dictionary".into()))?;
    let has_products = basis.entries.iter().any(|e| e.factors.len() > 1);
    let big = if has_products {
        MonomialDictionary::new(dict.nvars(), 2 * dict.degree())?
    } else {
        dict.clone()
    };
    let m = big.len();
    let mut q = DMatrix::zeros(m, m);
    for (e, &a) in basis.entries.iter().zip(alpha) {
        let coeffs: Vec<Complex64> = match e.factors[..] {
            [f] => {
                let mut c = vec![Complex64::new(0.0, 0.0); m];
                c[..dict.len()].copy_from_slice(&basis.functions[f].v);
                c
            }
            [f, g] => {
                let (vf, vg) = (&basis.functions[f].v, &basis.functions[g].v);
                let mut c = vec![Complex64::new(0.0, 0.0); m];
                for (i, ti) in dict.terms().iter().enumerate() {
                    for (j, tj) in dict.terms().iter().enumerate() {
                        let k = big.index_of(&ti.add(tj)).expect("degree 2d covers products");
                        c[k] += vf[i] * vg[j];
                    }
                }
                c
            }
            _ => return Err(Error::InvalidInput("basis entry needs one or two factors".into())),
        };
        let w = 0.5 * a * e.scale;
        let re = nalgebra::DVector::from_iterator(m, coeffs.iter().map(|c| c.re));
        let im = nalgebra::DVector::from_iterator(m, coeffs.iter().map(|c| c.im));
        q.ger(w, &re, &re, 1.0);
        q.ger(w, &im, &im, 1.0);
    }
    q = (&q + q.transpose()) * 0.5;
    let form = GramForm {
        monomials: big.spec(),
        q,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_616d);
    let cand = CandidateFunction {
        alpha: alpha.to_vec(),
        gamma: 1.0,
        beta: 0.0,
    };
    for _ in 0..100 {
        let x: Vec<f64> = (0..dict.nvars()).map(|_| radius * rng.random_range(-1.0..=1.0)).collect();
        let direct = cand.value(basis, &x)?;
        let via = form.eval(&x)?;
        let err = (direct - via).abs() / direct.abs().max(via.abs()).max(f64::MIN_POSITIVE);
        if err > 1e-8 && (direct - via).abs() > 1e-300 {
            return Err(Error::InvalidInput(format!("Gram form disagrees with direct evaluation (rel. error {err:e})")));
        }
    }
    Ok(form)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::FeedforwardNet;
    use nalgebra::DVector;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Basis over the degree-1 monomials `{1, x}` (n = 1) with the given vectors.
    fn scalar_basis(vs: &[(Vec<Complex64>, Complex64)]) -> LyapunovBasis {
        let dict = MonomialDictionary::new(1, 1).unwrap();
        let functions: Vec<EigenFunction> = vs
            .iter()
            .enumerate()
            .map(|(i, (v, l))| EigenFunction {
                spectrum_index: i,
                lambda: *l,
                v: v.clone(),
            })
            .collect();
        let entries = (0..functions.len())
            .map(|i| BasisEntry {
                factors: vec![i],
                lambda: functions[i].lambda,
                scale: 1.0,
                eps_hat: 0.0,
                kappa: KAPPA_MIN,
                omega: 0.0,
            })
            .collect();
        LyapunovBasis {
            dictionary: Dictionary::Monomial(dict),
            functions,
            entries,
        }
    }

    #[test]
    fn basis_values() {
        let b = scalar_basis(&[(vec![c(0.0, 0.0), c(1.0, 0.0)], c(-1.0, 0.0))]);
        assert_eq!(b.eval(&[2.0]).unwrap(), vec![2.0]);
        assert_eq!(b.eval(&[0.0]).unwrap(), vec![0.0]);
        let k = scalar_basis(&[(vec![c(1.0, 1.0), c(0.0, 0.0)], c(-1.0, 0.0))]);
        assert!((k.eval(&[7.0]).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn analytic_derivative_scalar_decay() {
        let f = VectorField::linear(&DMatrix::from_element(1, 1, -1.0)).unwrap();
        let b = scalar_basis(&[(vec![c(0.0, 0.0), c(1.0, 0.0)], c(-1.0, 0.0))]);
        assert!((eval_basis_dot_analytic(&b, &f, &[1.0]).unwrap()[0] + 1.0).abs() < 1e-15);
        assert_eq!(eval_basis_dot_analytic(&b, &f, &[0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn analytic_derivative_rejects_network() {
        let f = VectorField::linear(&DMatrix::from_element(1, 1, -1.0)).unwrap();
        let mut b = scalar_basis(&[(vec![c(0.0, 0.0), c(1.0, 0.0)], c(-1.0, 0.0))]);
        b.dictionary = Dictionary::Network(FeedforwardNet::zeros(&[1, 2]).unwrap());
        assert!(matches!(eval_basis_dot_analytic(&b, &f, &[1.0]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn data_derivative_cases() {
        let b = scalar_basis(&[(vec![c(0.0, 0.0), c(1.0, 0.0)], c(-1.0, 0.0))]);
        let xs = vec![vec![1.0], vec![2.0]];
        let (_, d) = eval_basis_dot_data(&b, &xs, &xs, 0.1).unwrap();
        assert!(d.iter().all(|v| *v == 0.0));
        assert!(eval_basis_dot_data(&b, &xs, &xs, 0.0).is_err());
        // V = ½x² along x(t) = √(2t): V = t, exact derivative 1
        let xs = vec![vec![(2.0f64 * 0.5).sqrt()]];
        let ys = vec![vec![(2.0f64 * 0.6).sqrt()]];
        let (_, d) = eval_basis_dot_data(&b, &xs, &ys, 0.1).unwrap();
        assert!((d[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_eigenfunction_has_zero_error() {
        let f = VectorField::linear(&DMatrix::from_element(1, 1, -1.0)).unwrap();
        let mut b = scalar_basis(&[(vec![c(0.0, 0.0), c(1.0, 0.0)], c(-1.0, 0.0))]);
        let xs: Vec<Vec<f64>> = (0..20).map(|k| vec![-2.0 + 0.2 * k as f64]).collect();
        let (v, vd) = eval_basis_dot_analytic_batch(&b, &f, &xs).unwrap();
        estimate_error_bounds(&mut b, &v, &vd).unwrap();
        assert_eq!(b.entries[0].eps_hat, 0.0);
        assert_eq!(b.entries[0].omega, 0.0);
        assert_eq!(b.entries[0].kappa, KAPPA_MIN);
    }

    #[test]
    fn omega_envelope() {
        assert!((omega_for_kappa(&[0.5], &[1.0], 0.1) - 0.4).abs() < 1e-15);
        assert_eq!(omega_for_kappa(&[0.5], &[1.0], 1.0), 0.0);
    }

    #[test]
    fn synthetic_bound_is_recovered() {
        // ε = 0.01 V² + 0.001 on V ∈ [0, 1]
        let v: Vec<f64> = (0..200).map(|k| k as f64 / 199.0).collect();
        let eps: Vec<f64> = v.iter().map(|v| 0.01 * v * v + 0.001).collect();
        let (kappa, omega) = fit_kappa_omega(&eps, &v);
        // the fit is a valid bound
        for (e, v) in eps.iter().zip(&v) {
            assert!(e.abs() <= kappa * v * v + omega + 1e-15);
        }
        // at the first grid point above 0.01 the envelope is the true offset
        let next = kappa_grid().into_iter().find(|k| *k >= 0.01).unwrap();
        assert!((omega_for_kappa(&eps, &v, next) - 0.001).abs() < 1e-12);
        // and the chosen pair is no worse than the true one in the product
        assert!(kappa * omega <= next * 0.001 + 1e-15);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax_weights(&[0.3, 0.3, 0.3, 0.3]), vec![0.25; 4]);
        let a = softmax_weights(&[0.0, 3f64.ln()]);
        assert!((a[0] - 0.75).abs() < 1e-15 && (a[1] - 0.25).abs() < 1e-15);
        let a = softmax_weights(&[1000.0, 0.0, -5.0]);
        assert!(a.iter().all(|x| *x >= 0.0));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interval_cases() {
        assert_eq!(invariance_interval(-2.0, 1.0, 0.0).unwrap(), Some((0.0, 2.0)));
        let (lo, hi) = invariance_interval(-3.0, 1.0, 2.0).unwrap().unwrap();
        assert!((lo - 1.0).abs() < 1e-15 && (hi - 2.0).abs() < 1e-15);
        assert_eq!(invariance_interval(-2.0, 1.0, 1.01).unwrap(), None);
        assert_eq!(invariance_interval(-2.0, 0.0, 1.0).unwrap(), Some((0.5, f64::INFINITY)));
        assert!(invariance_interval(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn theorem1_cases() {
        let r = theorem1_check(&[(-2.0, 1.0, 0.0)], &[1.0]).unwrap();
        assert_eq!((r.gamma, r.beta, r.lhs, r.rhs), (2.0, 2.0, 4.0, 4.0));
        assert!(r.satisfied);
        let r = theorem1_check(&[(-10.0, 1.0, 0.01)], &[1.0]).unwrap();
        assert!((r.gamma - (10.0 + 99.96f64.sqrt()) / 2.0).abs() < 1e-12);
        assert!(r.satisfied);
        let r = theorem1_check(&[(-50.0, 1e-9, 1e-9)], &[1.0]).unwrap();
        assert!(r.satisfied);
        // with several entries κγ̄² grows like λ²/κ, so small κ does not help
        let r = theorem1_check(&[(-50.0, 1e-9, 1e-9), (-40.0, 1e-9, 1e-9)], &[0.5, 0.5]).unwrap();
        assert!(!r.satisfied && r.lhs < r.rhs);
        assert!(matches!(
            theorem1_check(&[(-2.0, 1.0, 1.01)], &[1.0]),
            Err(Error::NoInvarianceInterval { index: 0 })
        ));
    }

    #[test]
    fn min_omega_cases() {
        assert_eq!(lemma1_min_omega(-1.0, 1.0, 1.0, 2.0), -1.0);
        assert!(lemma1_min_omega(-2.0, 1.0, 2.0, 1.0) < 0.0);
        assert!((lemma1_min_omega(-1.0, 0.25, 3.0, 1.0) - (4.0 - 1.0 / 36.0)).abs() < 1e-12);
    }

    #[test]
    fn gram_cases() {
        let v = vec![c(0.3, 0.0), c(-1.2, 0.0)];
        let b = scalar_basis(&[(v.clone(), c(-1.0, 0.0))]);
        let g = gram_matrix(&b, &[2.0], 2.0).unwrap();
        let vv = DVector::from_vec(vec![0.3, -1.2]);
        assert!((&g.q - &vv * vv.transpose()).amax() < 1e-15);
        let ev = SymmetricEigen::new(g.q.clone()).eigenvalues;
        let mut ev: Vec<f64> = ev.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!(ev[0].abs() < 1e-12 && (ev[1] - vv.norm_squared()).abs() < 1e-12);

        // selecting x₁ in two variables
        let dict = MonomialDictionary::new(2, 1).unwrap();
        let mut b2 = scalar_basis(&[]);
        b2.dictionary = Dictionary::Monomial(dict);
        b2.functions.push(EigenFunction {
            spectrum_index: 0,
            lambda: c(-1.0, 0.0),
            v: vec![c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)],
        });
        b2.entries.push(BasisEntry {
            factors: vec![0],
            lambda: c(-1.0, 0.0),
            scale: 1.0,
            eps_hat: 0.0,
            kappa: KAPPA_MIN,
            omega: 0.0,
        });
        let g = gram_matrix(&b2, &[2.0], 1.0).unwrap();
        let mut expect = DMatrix::zeros(3, 3);
        expect[(1, 1)] = 1.0;
        assert_eq!(g.q, expect);
    }

    #[test]
    fn products_multiply_values() {
        let mut b = scalar_basis(&[
            (vec![c(0.1, 0.0), c(1.0, 0.5)], c(-1.0, 2.0)),
            (vec![c(-0.4, 0.0), c(0.7, 0.0)], c(-3.0, 0.0)),
        ]);
        b.augment_products();
        assert_eq!(b.len(), 2 + 3);
        let x = [0.8];
        let v = b.eval(&x).unwrap();
        assert!((v[2] - 2.0 * v[0] * v[0]).abs() < 1e-14);
        assert!((v[3] - 2.0 * v[0] * v[1]).abs() < 1e-14);
        assert!((v[4] - 2.0 * v[1] * v[1]).abs() < 1e-14);
        assert_eq!(b.entries[3].lambda, c(-4.0, 2.0));
        let g = gram_matrix(&b, &[0.2, 0.3, 0.1, 0.25, 0.15], 1.5).unwrap();
        assert!(g.min_eigenvalue() >= -1e-10 * g.q.norm());
    }

    #[test]
    fn single_product_adds_square() {
        let mut b = scalar_basis(&[(vec![c(0.0, 0.0), c(1.0, 0.0)], c(-1.0, 0.0))]);
        b.augment_products();
        assert_eq!(b.len(), 2);
        assert_eq!(b.entries[1].factors, vec![0, 0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let vdp = VectorField::van_der_pol();
        let dict = MonomialDictionary::new(2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let functions: Vec<EigenFunction> = (0..2)
            .map(|i| EigenFunction {
                spectrum_index: i,
                lambda: c(-1.0 - i as f64, 0.5),
                v: (0..dict.len()).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect(),
            })
            .collect();
        let mut b = LyapunovBasis {
            dictionary: Dictionary::Monomial(dict),
            functions,
            entries: vec![],
        };
        for i in 0..2 {
            b.entries.push(BasisEntry {
                factors: vec![i],
                lambda: b.functions[i].lambda,
                scale: 0.7,
                eps_hat: 0.0,
                kappa: KAPPA_MIN,
                omega: 0.0,
            });
        }
        b.augment_products();
        let ev = BasisEvaluator::new(&b, &vdp).unwrap();
        let x = [0.4, -0.9];
        let p = ev.eval(&x, true).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let (ep, em) = (ev.eval(&xp, false).unwrap(), ev.eval(&xm, false).unwrap());
            for i in 0..b.len() {
                let fd_v = (ep.v[i] - em.v[i]) / (2.0 * h);
                let fd_d = (ep.vdot[i] - em.vdot[i]) / (2.0 * h);
                let gv = p.grad_v.as_ref().unwrap()[(i, j)];
                let gd = p.grad_vdot.as_ref().unwrap()[(i, j)];
                assert!((fd_v - gv).abs() < 1e-6 * (1.0 + gv.abs()), "V entry {i} dir {j}");
                assert!((fd_d - gd).abs() < 1e-6 * (1.0 + gd.abs()), "Vdot entry {i} dir {j}");
            }
        }
        // V̇ against a short flow difference
        let t = crate::systems::integrate_rk4(&vdp, &x, 1e-6, 1).unwrap();
        let v1 = b.eval(t.last()).unwrap();
        for i in 0..b.len() {
            let fd = (v1[i] - p.v[i]) / 1e-6;
            assert!((fd - p.vdot[i]).abs() < 1e-3 * (1.0 + p.vdot[i].abs()));
        }
    }

    #[test]
    fn basis_file_round_trip() {
        let mut b = scalar_basis(&[(vec![c(0.1, -0.2), c(1.0 / 3.0, 0.5)], c(-1.0, 2.0))]);
        b.augment_products();
        let text = serde_json::to_string(&b.to_file()).unwrap();
        let back = LyapunovBasis::from_file(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn build_from_spectrum_ranks_by_error() {
        // ẋ = −x with {1, x}: exact eigenfunction x (λ = −1)
        let f = VectorField::linear(&DMatrix::from_element(1, 1, -1.0)).unwrap();
        let region = crate::systems::Region::Box { lo: vec![-2.0], hi: vec![2.0] };
        let snaps = crate::systems::sample_snapshots(&f, &region, 10, 20, 0.05, 3).unwrap();
        let model = crate::koopman::edmd_fit(&snaps, Dictionary::Monomial(MonomialDictionary::new(1, 1).unwrap())).unwrap();
        let spec = crate::koopman::eigen_decompose(&model).unwrap();
        let b = build_basis(&model, &spec, &BasisConfig::default(), &snaps, Some(&f)).unwrap();
        assert_eq!(b.len(), 1);
        assert!((b.entries[0].lambda.re + 1.0).abs() < 1e-6);
        assert!(b.entries[0].eps_hat < 1e-5);
    }
}
