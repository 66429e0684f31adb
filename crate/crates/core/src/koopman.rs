//! Koopman matrix estimation, spectra and eigenfunctions.
//!
//! Columns are lifted states: with `Z_X = [Φ(x_1) … Φ(x_T)]` and `Z_Y` the
//! lifted successors, the fitted matrix `K` maps `Z_X` onto `Z_Y` in the least
//! squares sense. Eigenpairs are those of `Kᵀ`, so `ψ(x) = vᵀΦ(x)`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dictionary::{MonomialDictionary, MonomialSpec, Observables};
use crate::eigen::eig_general;
use crate::error::{check_dim, Error, Result};
use crate::neural::{lift_columns, FeedforwardNet, NetworkFile};
use crate::systems::SnapshotSet;

/// Singular values below this fraction of the largest are treated as zero.
pub const SVD_CUTOFF: f64 = 1e-10;

/// Eigenvalues with `|μ|` below this fraction of the spectral radius are dropped.
pub const ZERO_MU_CUTOFF: f64 = 1e-14;

pub const DEFAULT_STABILITY_MARGIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum Dictionary {
    Monomial(MonomialDictionary),
    Network(FeedforwardNet),
}

impl Dictionary {
    pub fn as_monomial(&self) -> Option<&MonomialDictionary> {
        match self {
            Dictionary::Monomial(d) => Some(d),
            Dictionary::Network(_) => None,
        }
    }

    pub fn to_file(&self) -> DictionaryFile {
        match self {
            Dictionary::Monomial(d) => DictionaryFile::Monomial(d.spec()),
            Dictionary::Network(n) => DictionaryFile::Network(n.to_file()),
        }
    }

    pub fn from_file(file: &DictionaryFile) -> Result<Self> {
        Ok(match file {
            DictionaryFile::Monomial(s) => Dictionary::Monomial(MonomialDictionary::from_spec(s)?),
            DictionaryFile::Network(n) => Dictionary::Network(FeedforwardNet::from_file(n)?),
        })
    }
}

impl Observables for Dictionary {
    fn input_dim(&self) -> usize {
        match self {
            Dictionary::Monomial(d) => d.input_dim(),
            Dictionary::Network(n) => n.input_dim(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            Dictionary::Monomial(d) => d.output_dim(),
            Dictionary::Network(n) => n.output_dim(),
        }
    }

    fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Dictionary::Monomial(d) => d.lift(x),
            Dictionary::Network(n) => n.lift(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DictionaryFile {
    Monomial(MonomialSpec),
    Network(NetworkFile),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Frobenius norm of `K Z_X − Z_Y` on the fitting data.
    pub residual: f64,
    /// Ratio of largest to smallest retained singular value of `Z_X`.
    pub condition: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanModel {
    pub dictionary: Dictionary,
    pub k: DMatrix<f64>,
    pub dt: f64,
    pub diagnostics: FitDiagnostics,
}

impl KoopmanModel {
    pub fn new(dictionary: Dictionary, k: DMatrix<f64>, dt: f64) -> Result<Self> {
        let m = dictionary.output_dim();
        check_dim(m, k.nrows())?;
        check_dim(m, k.ncols())?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput("dt must be positive".into()));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("Koopman matrix has non-finite entries".into()));
        }
        Ok(KoopmanModel {
            dictionary,
            k,
            dt,
            diagnostics: FitDiagnostics::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.dictionary.lift(x)
    }
}

/// `K = Z_Y Z_X^†` with the pseudo-inverse taken through an SVD of `Z_X`.
///
/// Working with `Z_X` directly instead of the Gram matrix `Z_X Z_Xᵀ` keeps the
/// condition number at its square root, which matters for high-degree
/// monomials.
pub fn least_squares_operator(zx: &DMatrix<f64>, zy: &DMatrix<f64>, cutoff: f64) -> Result<(DMatrix<f64>, FitDiagnostics)> {
    check_dim(zx.nrows(), zy.nrows())?;
    check_dim(zx.ncols(), zy.ncols())?;
    if zx.ncols() == 0 {
        return Err(Error::InvalidInput("need at least one snapshot pair".into()));
    }
    if zx.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroData);
    }
    if zx.iter().chain(zy.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("lifted data has non-finite entries".into()));
    }
    // Z_Xᵀ = U S Wᵀ  ⇒  Z_X^† = U S⁺ Wᵀ
    let svd = zx.transpose().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let wt = svd.v_t.as_ref().expect("requested Vᵀ");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > cutoff * smax)
        .collect();
    let r = keep.len();
    let m = zx.nrows();
    let mut us = DMatrix::zeros(zx.ncols(), r);
    let mut wr = DMatrix::zeros(r, m);
    for (c, &i) in keep.iter().enumerate() {
        let inv = 1.0 / svd.singular_values[i];
        us.set_column(c, &(u.column(i) * inv));
        wr.set_row(c, &wt.row(i));
    }
    let k = (zy * us) * wr;
    let residual = (&k * zx - zy).norm();
    let smin = keep.iter().map(|&i| svd.singular_values[i]).fold(f64::INFINITY, f64::min);
    Ok((
        k,
        FitDiagnostics {
            residual,
            condition: smax / smin,
            rank: r,
        },
    ))
}

/// Closed-form one-step fit on snapshot pairs.
pub fn edmd_fit(snapshots: &SnapshotSet, dictionary: Dictionary) -> Result<KoopmanModel> {
    snapshots.validate()?;
    if snapshots.is_empty() {
        return Err(Error::InvalidInput("need at least one snapshot pair".into()));
    }
    check_dim(dictionary.input_dim(), snapshots.dim())?;
    let zx = lift_columns(&dictionary, &snapshots.x)?;
    let zy = lift_columns(&dictionary, &snapshots.y)?;
    let (k, diagnostics) = least_squares_operator(&zx, &zy, SVD_CUTOFF)?;
    let mut model = KoopmanModel::new(dictionary, k, snapshots.dt)?;
    model.diagnostics = diagnostics;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultistepConfig {
    pub max_iters: usize,
    /// Stop once the relative loss decrease of an iteration drops below this.
    pub rel_tol: f64,
    /// Precondition the gradient with the pseudo-inverse of `Z_0 Z_0ᵀ`.
    pub precondition: bool,
    /// Window start stride along each trajectory.
    pub stride: usize,
}

impl Default for MultistepConfig {
    fn default() -> Self {
        MultistepConfig {
            max_iters: 500,
            rel_tol: 1e-14,
            precondition: true,
            stride: 1,
        }
    }
}

/// Lifted windows: `z[i]` holds `Φ(x_{s+i})` in column `w` for window `w`.
#[derive(Clone, Debug)]
pub struct LiftedWindows {
    pub z: Vec<DMatrix<f64>>,
}

impl LiftedWindows {
    pub fn new(lift: &dyn Observables, trajectories: &[Vec<Vec<f64>>], horizon: usize, stride: usize) -> Result<Self> {
        if horizon == 0 || stride == 0 {
            return Err(Error::InvalidInput("horizon and stride must be ≥ 1".into()));
        }
        let mut lifted = Vec::new();
        let mut starts = Vec::new();
        for (t, traj) in trajectories.iter().enumerate() {
            if traj.len() < horizon + 1 {
                continue;
            }
            lifted.push(lift_columns(lift, traj)?);
            let slot = lifted.len() - 1;
            let _ = t;
            starts.extend((0..traj.len() - horizon).step_by(stride).map(|s| (slot, s)));
        }
        if starts.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no trajectory has the {} states required by the horizon",
                horizon + 1
            )));
        }
        let m = lift.output_dim();
        let z = (0..=horizon)
            .map(|i| {
                let mut zi = DMatrix::zeros(m, starts.len());
                for (w, &(slot, s)) in starts.iter().enumerate() {
                    zi.set_column(w, &lifted[slot].column(s + i));
                }
                zi
            })
            .collect();
        Ok(LiftedWindows { z })
    }

    pub fn horizon(&self) -> usize {
        self.z.len() - 1
    }

    pub fn count(&self) -> usize {
        self.z[0].ncols()
    }

    /// `Σ_w Σ_{i=1..T} ‖z_i − K^i z_0‖²`.
    pub fn loss(&self, k: &DMatrix<f64>) -> f64 {
        let mut p = self.z[0].clone();
        let mut total = 0.0;
        for zi in &self.z[1..] {
            p = k * p;
            total += (&p - zi).norm_squared();
        }
        total
    }

    /// Loss and its gradient with respect to `K`.
    pub fn loss_grad(&self, k: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let t = self.horizon();
        let mut preds = Vec::with_capacity(t + 1);
        preds.push(self.z[0].clone());
        for i in 1..=t {
            let next = k * &preds[i - 1];
            preds.push(next);
        }
        let errs: Vec<DMatrix<f64>> = (1..=t).map(|i| &preds[i] - &self.z[i]).collect();
        let loss = errs.iter().map(|e| e.norm_squared()).sum();
        let mut grad = DMatrix::zeros(k.nrows(), k.ncols());
        let mut adj: Option<DMatrix<f64>> = None;
        for i in (1..=t).rev() {
            let mut a = &errs[i - 1] * 2.0;
            if let Some(next) = &adj {
                a += k.tr_mul(next);
            }
            grad += &a * preds[i - 1].transpose();
            adj = Some(a);
        }
        (loss, grad)
    }
}

/// Multi-step refinement of `K` with the dictionary held fixed.
///
/// Preconditioned gradient descent with Armijo backtracking on the summed
/// `T`-step lifted prediction loss. The returned matrix never has a larger
/// loss than `k0`.
pub fn multistep_fit(
    trajectories: &[Vec<Vec<f64>>],
    dictionary: Dictionary,
    k0: &DMatrix<f64>,
    dt: f64,
    horizon: usize,
    cfg: &MultistepConfig,
) -> Result<KoopmanModel> {
    let m = dictionary.output_dim();
    check_dim(m, k0.nrows())?;
    check_dim(m, k0.ncols())?;
    let windows = LiftedWindows::new(&dictionary, trajectories, horizon, cfg.stride)?;
    let precond = if cfg.precondition {
        Some(gram_pinv(&windows.z[0])?)
    } else {
        None
    };

    let mut k = k0.clone();
    let (mut loss, mut grad) = windows.loss_grad(&k);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let mut step = 0.5;
    for iter in 1..=cfg.max_iters {
        let dir = match &precond {
            Some(p) => &grad * p,
            None => grad.clone(),
        };
        let slope = grad.dot(&dir);
        if !(slope > 0.0) {
            break;
        }
        let mut accepted = None;
        let mut s = step;
        for _ in 0..60 {
            let trial = &k - &dir * s;
            let l = windows.loss(&trial);
            if l.is_finite() && l <= loss - 1e-4 * s * slope {
                accepted = Some((trial, l));
                break;
            }
            s *= 0.5;
        }
        let Some((next, next_loss)) = accepted else { break };
        if !next_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: iter });
        }
        let decrease = loss - next_loss;
        k = next;
        // grow the step again after a first-try acceptance
        step = if s == step { (2.0 * s).min(1.0) } else { s };
        let (l, g) = windows.loss_grad(&k);
        loss = l;
        grad = g;
        if decrease <= cfg.rel_tol * loss.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let mut model = KoopmanModel::new(dictionary, k, dt)?;
    model.diagnostics.residual = loss.sqrt();
    Ok(model)
}

// (Z Zᵀ)^† from the SVD of Z, with the same relative cutoff as the fit
fn gram_pinv(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroData);
    }
    let svd = z.clone().svd(true, false);
    let u = svd.u.as_ref().expect("requested U");
    let smax = svd.singular_values.max();
    let m = z.nrows();
    let mut out = DMatrix::zeros(m, m);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > SVD_CUTOFF * smax {
            let col = u.column(i);
            out.ger(1.0 / (s * s), &col, &col, 1.0);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair {
    /// Discrete-time eigenvalue of `Kᵀ`.
    pub mu: Complex64,
    /// `log(μ) / dt` on the principal branch.
    pub lambda: Complex64,
    /// Unit-norm eigenvector of `Kᵀ`.
    pub v: Vec<Complex64>,
}

impl EigenPair {
    /// `ψ(x) = vᵀΦ(x)` given the lifted state.
    pub fn eval_lifted(&self, phi: &[f64]) -> Complex64 {
        self.v.iter().zip(phi).map(|(v, p)| v * *p).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub pairs: Vec<EigenPair>,
    /// Index of the complex-conjugate partner, if any.
    pub conjugate: Vec<Option<usize>>,
    /// Numerically zero discrete eigenvalues with no continuous counterpart.
    pub dropped: Vec<Complex64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Eigendecomposition of `Kᵀ`, ordered by `(Re λ, Im λ)`.
pub fn eigen_decompose(model: &KoopmanModel) -> Result<Spectrum> {
    if model.k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("Koopman matrix has non-finite entries".into()));
    }
    let raw = eig_general(&model.k.transpose())?;
    let radius = raw.iter().map(|(mu, _)| mu.norm()).fold(0.0, f64::max);
    let mut dropped = Vec::new();
    let mut pairs = Vec::with_capacity(raw.len());
    for (mu, v) in raw {
        if mu.norm() <= ZERO_MU_CUTOFF * radius || mu.norm() == 0.0 {
            dropped.push(mu);
            continue;
        }
        pairs.push(EigenPair {
            mu,
            lambda: mu.ln() / model.dt,
            v,
        });
    }
    pairs.sort_by(|a, b| {
        a.lambda
            .re
            .total_cmp(&b.lambda.re)
            .then(a.lambda.im.total_cmp(&b.lambda.im))
    });
    let conjugate = conjugate_partners(&pairs);
    Ok(Spectrum {
        pairs,
        conjugate,
        dropped,
    })
}

fn conjugate_partners(pairs: &[EigenPair]) -> Vec<Option<usize>> {
    let mut out = vec![None; pairs.len()];
    for i in 0..pairs.len() {
        if pairs[i].mu.im == 0.0 || out[i].is_some() {
            continue;
        }
        let target = pairs[i].mu.conj();
        let tol = 1e-12 * (1.0 + target.norm());
        if let Some(j) = (0..pairs.len()).find(|&j| j != i && out[j].is_none() && (pairs[j].mu - target).norm() <= tol) {
            out[i] = Some(j);
            out[j] = Some(i);
        }
    }
    out
}

/// `ψ(x) = vᵀΦ(x)` without conjugation.
pub fn eval_eigenfunction(pair: &EigenPair, dictionary: &dyn Observables, x: &[f64]) -> Result<Complex64> {
    let phi = dictionary.lift(x)?;
    check_dim(pair.v.len(), phi.len())?;
    Ok(pair.eval_lifted(&phi))
}

/// Indices of stable pairs with `Re λ < −margin`, one per conjugate pair.
///
/// With `scores`, indices are ranked by ascending score (ties by spectrum
/// order); otherwise spectrum order is kept. At most `m` are returned.
pub fn select_stable(spectrum: &Spectrum, m: usize, margin: f64, scores: Option<&[f64]>) -> Result<Vec<usize>> {
    if let Some(s) = scores {
        check_dim(spectrum.len(), s.len())?;
    }
    let mut idx: Vec<usize> = stable_candidates(spectrum, margin);
    if idx.is_empty() {
        return Err(Error::NoStableEigenpairs);
    }
    if let Some(s) = scores {
        idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
    }
    idx.truncate(m);
    Ok(idx)
}

/// Stable pairs before ranking; conjugates keep the `Im λ ≥ 0` member.
pub fn stable_candidates(spectrum: &Spectrum, margin: f64) -> Vec<usize> {
    (0..spectrum.len())
        .filter(|&i| {
            let p = &spectrum.pairs[i];
            p.lambda.re < -margin && (spectrum.conjugate[i].is_none() || p.lambda.im >= 0.0)
        })
        .collect()
}

/// Dense matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixFile {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixFile {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixFile {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        check_dim(self.rows * self.cols, self.data.len())?;
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenPairFile {
    pub mu: [f64; 2],
    pub lambda: [f64; 2],
    /// `[re₀, im₀, re₁, im₁, …]`.
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumFile {
    pub pairs: Vec<EigenPairFile>,
    pub conjugate: Vec<Option<usize>>,
    pub dropped: Vec<[f64; 2]>,
}

impl Spectrum {
    pub fn to_file(&self) -> SpectrumFile {
        let c = |z: Complex64| [z.re, z.im];
        SpectrumFile {
            pairs: self
                .pairs
                .iter()
                .map(|p| EigenPairFile {
                    mu: c(p.mu),
                    lambda: c(p.lambda),
                    v: p.v.iter().flat_map(|z| [z.re, z.im]).collect(),
                })
                .collect(),
            conjugate: self.conjugate.clone(),
            dropped: self.dropped.iter().map(|z| c(*z)).collect(),
        }
    }

    pub fn from_file(file: &SpectrumFile) -> Result<Self> {
        check_dim(file.pairs.len(), file.conjugate.len())?;
        let c = |a: [f64; 2]| Complex64::new(a[0], a[1]);
        let pairs = file
            .pairs
            .iter()
            .map(|p| {
                if p.v.len() % 2 != 0 {
                    return Err(Error::Parse("eigenvector needs an even number of entries".into()));
                }
                Ok(EigenPair {
                    mu: c(p.mu),
                    lambda: c(p.lambda),
                    v: p.v.chunks(2).map(|ch| Complex64::new(ch[0], ch[1])).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Spectrum {
            pairs,
            conjugate: file.conjugate.clone(),
            dropped: file.dropped.iter().map(|z| c(*z)).collect(),
        })
    }
}

/// Serialized model with optional spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub dictionary: DictionaryFile,
    pub dt: f64,
    pub k: MatrixFile,
    pub diagnostics: FitDiagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumFile>,
}

impl ModelFile {
    pub fn new(model: &KoopmanModel, spectrum: Option<&Spectrum>) -> Self {
        ModelFile {
            dictionary: model.dictionary.to_file(),
            dt: model.dt,
            k: MatrixFile::from_matrix(&model.k),
            diagnostics: model.diagnostics,
            spectrum: spectrum.map(Spectrum::to_file),
        }
    }

    pub fn model(&self) -> Result<KoopmanModel> {
        let mut model = KoopmanModel::new(Dictionary::from_file(&self.dictionary)?, self.k.to_matrix()?, self.dt)?;
        model.diagnostics = self.diagnostics;
        Ok(model)
    }

    pub fn spectrum(&self) -> Result<Option<Spectrum>> {
        self.spectrum.as_ref().map(Spectrum::from_file).transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{sample_snapshots, Region, VectorField};

    fn model_from(k: DMatrix<f64>, dt: f64) -> KoopmanModel {
        let dict = MonomialDictionary::new(k.nrows(), 1).unwrap();
        // reuse a monomial dictionary of the right width when possible
        let dict = if dict.len() == k.nrows() {
            Dictionary::Monomial(dict)
        } else {
            let net = FeedforwardNet::from_parts(vec![DMatrix::identity(k.nrows(), k.nrows())], vec![nalgebra::DVector::zeros(k.nrows())]).unwrap();
            Dictionary::Network(net)
        };
        KoopmanModel::new(dict, k, dt).unwrap()
    }

    #[test]
    fn exact_linear_recovery() {
        let a = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, -0.2, 0.8, 0.05, 0.0, 0.3, 0.7]);
        let zx = DMatrix::from_fn(3, 50, |i, j| (((i + 1) * (j + 3)) as f64 * 0.37).sin() + 0.1 * (i * j % 5) as f64);
        let zy = &a * &zx;
        let (k, d) = least_squares_operator(&zx, &zy, SVD_CUTOFF).unwrap();
        assert!((k - a).amax() < 1e-8);
        assert_eq!(d.rank, 3);
    }

    #[test]
    fn scalar_decay_fit() {
        let f = VectorField::linear(&DMatrix::from_element(1, 1, -1.0)).unwrap();
        let region = Region::Box { lo: vec![-2.0], hi: vec![2.0] };
        let snaps = sample_snapshots(&f, &region, 20, 10, 0.1, 1).unwrap();
        let model = edmd_fit(&snaps, Dictionary::Monomial(MonomialDictionary::new(1, 1).unwrap())).unwrap();
        // row of K for the x observable, column for x
        assert!((model.k[(1, 1)] - (-0.1f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn single_pair_interpolates() {
        let snaps = SnapshotSet {
            x: vec![vec![0.5, -1.0]],
            y: vec![vec![0.4, -0.7]],
            dt: 0.1,
            traj_id: None,
        };
        let model = edmd_fit(&snaps, Dictionary::Monomial(MonomialDictionary::new(2, 2).unwrap())).unwrap();
        assert!(model.diagnostics.residual < 1e-12);
    }

    #[test]
    fn zero_data_rejected() {
        let z = DMatrix::zeros(2, 4);
        assert!(matches!(least_squares_operator(&z, &z, SVD_CUTOFF), Err(Error::ZeroData)));
    }

    #[test]
    fn diagonal_spectrum() {
        let dt: f64 = 0.1;
        let k = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![(-dt).exp(), (-2.0 * dt).exp()]));
        let s = eigen_decompose(&model_from(k, dt)).unwrap();
        assert!((s.pairs[0].lambda - Complex64::new(-2.0, 0.0)).norm() < 1e-12);
        assert!((s.pairs[1].lambda - Complex64::new(-1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rotation_spectrum() {
        let (theta, dt): (f64, f64) = (3.0, 0.1);
        let (c, s) = ((theta * dt).cos(), (theta * dt).sin());
        let k = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let spec = eigen_decompose(&model_from(k, dt)).unwrap();
        assert!((spec.pairs[0].lambda - Complex64::new(0.0, -theta)).norm() < 1e-10);
        assert!((spec.pairs[1].lambda - Complex64::new(0.0, theta)).norm() < 1e-10);
        assert_eq!(spec.conjugate, vec![Some(1), Some(0)]);
    }

    #[test]
    fn identity_spectrum_and_zero_drop() {
        let s = eigen_decompose(&model_from(DMatrix::identity(3, 3), 0.1)).unwrap();
        assert!(s.pairs.iter().all(|p| p.lambda.norm() < 1e-12));
        let k = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 0.0, 0.9]));
        let s = eigen_decompose(&model_from(k, 0.1)).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.dropped.len(), 1);
    }

    #[test]
    fn eigenfunction_evaluation() {
        let dict = MonomialDictionary::new(2, 1).unwrap();
        let pair = EigenPair {
            mu: Complex64::new(0.5, 0.0),
            lambda: Complex64::new(-1.0, 0.0),
            v: vec![Complex64::new(0.25, 0.0), Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
        };
        // terms: 1, x0, x1
        let x0 = dict.index_of(&crate::poly::MultiIndex(vec![1, 0])).unwrap();
        assert_eq!(x0, 1);
        assert_eq!(eval_eigenfunction(&pair, &dict, &[3.0, 9.0]).unwrap(), Complex64::new(3.25, 0.0));
        assert_eq!(eval_eigenfunction(&pair, &dict, &[0.0, 0.0]).unwrap(), Complex64::new(0.25, 0.0));
    }

    fn pair(l: Complex64) -> EigenPair {
        EigenPair {
            mu: (l * 0.1).exp(),
            lambda: l,
            v: vec![Complex64::new(1.0, 0.0)],
        }
    }

    #[test]
    fn stable_selection_rules() {
        let pairs: Vec<EigenPair> = [-1.0, 0.0, 1.0].iter().map(|&r| pair(Complex64::new(r, 0.0))).collect();
        let s = Spectrum {
            conjugate: conjugate_partners(&pairs),
            pairs,
            dropped: vec![],
        };
        assert_eq!(select_stable(&s, 10, 1e-6, None).unwrap(), vec![0]);

        let pairs = vec![pair(Complex64::new(-1.0, -2.0)), pair(Complex64::new(-1.0, 2.0))];
        let s = Spectrum {
            conjugate: conjugate_partners(&pairs),
            pairs,
            dropped: vec![],
        };
        assert_eq!(select_stable(&s, 10, 1e-6, None).unwrap(), vec![1]);

        let pairs = vec![pair(Complex64::new(1.0, 0.0))];
        let s = Spectrum {
            conjugate: vec![None],
            pairs,
            dropped: vec![],
        };
        assert!(matches!(select_stable(&s, 3, 1e-6, None), Err(Error::NoStableEigenpairs)));
    }

    #[test]
    fn multistep_keeps_optimal_k() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.05, -0.05, 0.85]);
        let trajs: Vec<Vec<Vec<f64>>> = (0..5)
            .map(|t| {
                let mut x = nalgebra::DVector::from_vec(vec![1.0 + t as f64, -0.5 * t as f64 + 0.3]);
                let mut out = vec![];
                for _ in 0..12 {
                    out.push(x.iter().copied().collect());
                    x = &a * x;
                }
                out
            })
            .collect();
        // identity network lift keeps the states themselves
        let net = FeedforwardNet::from_parts(vec![DMatrix::identity(2, 2)], vec![nalgebra::DVector::zeros(2)]).unwrap();
        let model = multistep_fit(&trajs, Dictionary::Network(net), &a, 0.1, 4, &MultistepConfig::default()).unwrap();
        assert!((model.k - a).amax() < 1e-8);
    }

    #[test]
    fn model_file_round_trip() {
        let dt: f64 = 0.1;
        let k = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, -0.3, 0.8, 0.1, 0.0, 0.2, 0.5]);
        let model = model_from(k, dt);
        let spec = eigen_decompose(&model).unwrap();
        let file = ModelFile::new(&model, Some(&spec));
        let text = serde_json::to_string(&file).unwrap();
        let back: ModelFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.model().unwrap(), model);
        assert_eq!(back.spectrum().unwrap().unwrap(), spec);
    }
}
