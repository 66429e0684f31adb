//! Pipeline stages. Each reads upstream artifacts from the output directory
//! and writes its own.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use koopman_lyap::dictionary::MonomialDictionary;
use koopman_lyap::io::{load_json, save_json, write_atomic};
use koopman_lyap::koopman::{edmd_fit, eigen_decompose, multistep_fit, Dictionary, KoopmanModel, ModelFile, Spectrum, SpectrumFile};
use koopman_lyap::lyapunov::{build_basis, gram_matrix, BasisFile, CandidateFunction, LyapunovBasis};
use koopman_lyap::neural::train_joint;
use koopman_lyap::polytope::{log_to_csv, run_algorithm1, Algorithm1Status, DataSource, IterationRecord};
use koopman_lyap::systems::{sample_snapshots, Region, SnapshotSet, VectorField};
use koopman_lyap::verify::{
    grid_falsify, nlp_verify, simulate_invariance_in, DomainBox, GridReport, SimulationReport, Verdict, VerificationReport,
};
use serde::{Deserialize, Serialize};

use crate::config::{stage, FitMethod, PipelineConfig};
use crate::export;

pub const SNAPSHOTS: &str = "snapshots.csv";
pub const MODEL: &str = "model.json";
pub const SPECTRUM: &str = "spectrum.json";
pub const EIGENVALUES: &str = "eigenvalues.csv";
pub const BASIS: &str = "basis.json";
pub const REFINE: &str = "refine.json";
pub const REFINE_LOG: &str = "refine_log.csv";
pub const POLYTOPE: &str = "polytope.json";
pub const CERTIFICATE: &str = "certificate.json";
pub const REPORT: &str = "report.json";
pub const GRAM: &str = "gram.json";
pub const SIMULATION: &str = "simulation.json";
pub const CONTOUR: &str = "contour.csv";
pub const PROJECTION: &str = "projection.csv";

/// Non-error results that map to distinct exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Verification falsified or inconclusive.
    NotVerified,
    /// No feasible candidate.
    Infeasible,
}

/// Per-command overrides from the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub max_iter: Option<usize>,
    pub degree: Option<u32>,
    pub stable_m: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(b) = self.beta {
            cfg.refine.algorithm1.beta = b;
        }
        if let Some(m) = self.max_iter {
            cfg.refine.algorithm1.max_iter = m;
        }
        if let Some(d) = self.degree {
            cfg.dictionary.degree = d;
        }
        if let Some(m) = self.stable_m {
            cfg.basis.m = m;
        }
    }
}

/// Status of the refinement stage as written to `refine.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    #[serde(flatten)]
    pub status: Algorithm1Status,
    pub radius: f64,
    pub rows: usize,
    pub archived_rows: usize,
    pub log: Vec<IterationRecord>,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub verdict: Verdict,
    pub nlp: VerificationReport,
    pub grid: Option<GridReport>,
}

pub struct Context {
    pub cfg: PipelineConfig,
    pub field: VectorField,
    /// Initial-condition region for `simulate`.
    pub sampling: Region,
    /// Target region `U` for `refine`.
    pub target: Region,
    pub gamma: Option<f64>,
}

impl Context {
    pub fn new(mut cfg: PipelineConfig, ov: &Overrides) -> Result<Self> {
        ov.apply(&mut cfg);
        cfg.validate()?;
        let (field, eq) = cfg.system()?;
        let sampling = cfg.sampling_region(eq.as_deref())?;
        if sampling.dim() != field.dim() {
            bail!("sampling region has dimension {} but the system has {}", sampling.dim(), field.dim());
        }
        let target = match &cfg.refine.region {
            Some(r) => r.clone(),
            None => sampling.clone(),
        };
        if target.dim() != field.dim() {
            bail!("refine region has dimension {} but the system has {}", target.dim(), field.dim());
        }
        Ok(Context {
            cfg,
            field,
            sampling,
            target,
            gamma: ov.gamma,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn read_snapshots(&self) -> Result<SnapshotSet> {
        let p = self.path(SNAPSHOTS);
        let f = std::fs::File::open(&p).with_context(|| format!("opening {} (run `simulate` first)", p.display()))?;
        Ok(SnapshotSet::from_csv(f)?)
    }

    fn read_model(&self) -> Result<KoopmanModel> {
        let file: ModelFile = load_upstream(&self.path(MODEL), "fit")?;
        Ok(file.model()?)
    }

    fn read_spectrum(&self) -> Result<Spectrum> {
        let file: SpectrumFile = load_upstream(&self.path(SPECTRUM), "spectrum")?;
        Ok(Spectrum::from_file(&file)?)
    }

    fn read_basis(&self) -> Result<LyapunovBasis> {
        let file: BasisFile = load_upstream(&self.path(BASIS), "basis")?;
        Ok(LyapunovBasis::from_file(&file)?)
    }

    fn read_candidate(&self, basis: &LyapunovBasis) -> Result<CandidateFunction> {
        let mut cand: CandidateFunction = load_upstream(&self.path(CERTIFICATE), "refine")?;
        if let Some(g) = self.gamma {
            cand.gamma = g;
        }
        cand.validate(basis)?;
        Ok(cand)
    }

    fn domain(&self) -> Result<DomainBox> {
        match &self.cfg.verify.domain {
            Some(d) => {
                d.validate()?;
                if d.dim() != self.field.dim() {
                    bail!("verify.domain has dimension {} but the system has {}", d.dim(), self.field.dim());
                }
                Ok(d.clone())
            }
            None => Ok(DomainBox::around(&self.read_snapshots()?.x, self.cfg.verify.domain_factor)?),
        }
    }
}

fn load_upstream<T: serde::de::DeserializeOwned>(path: &Path, producer: &str) -> Result<T> {
    if !path.is_file() {
        bail!("{} is missing (run `{producer}` first)", path.display());
    }
    Ok(load_json(path)?)
}

pub fn simulate(ctx: &Context) -> Result<Status> {
    let s = &ctx.cfg.sampling;
    let data = sample_snapshots(&ctx.field, &ctx.sampling, s.trajectories, s.steps, s.dt, ctx.cfg.stage_seed(stage::SAMPLING))?;
    write_atomic(&ctx.path(SNAPSHOTS), data.to_csv()?.as_bytes())?;
    println!("simulate: {} pairs from {} trajectories → {}", data.len(), s.trajectories, ctx.path(SNAPSHOTS).display());
    Ok(Status::Success)
}

pub fn fit(ctx: &Context) -> Result<Status> {
    let data = ctx.read_snapshots()?;
    let cfg = &ctx.cfg;
    let monomials = || -> Result<Dictionary> { Ok(Dictionary::Monomial(MonomialDictionary::new(data.dim(), cfg.dictionary.degree)?)) };
    let model = match cfg.fit.method {
        FitMethod::Edmd => edmd_fit(&data, monomials()?)?,
        FitMethod::Multistep => {
            let k0 = edmd_fit(&data, monomials()?)?.k;
            multistep_fit(&data.trajectories(), monomials()?, &k0, data.dt, cfg.fit.horizon, &cfg.fit.multistep)?
        }
        FitMethod::Neural => {
            let mut train = cfg.fit.train.clone();
            train.seed = cfg.stage_seed(stage::NEURAL);
            train.horizon = cfg.fit.horizon;
            let out = train_joint(&data, &cfg.fit.widths, &train)?;
            println!("fit: neural loss {:.4e} → {:.4e}", out.losses[0], out.losses[out.best_epoch]);
            KoopmanModel::new(Dictionary::Network(out.model.encoder), out.model.k, data.dt)?
        }
    };
    save_json(&ctx.path(MODEL), &ModelFile::new(&model, None))?;
    println!(
        "fit: {:?}, {} observables, rank {}, residual {:.3e} → {}",
        cfg.fit.method,
        model.dim(),
        model.diagnostics.rank,
        model.diagnostics.residual,
        ctx.path(MODEL).display()
    );
    Ok(Status::Success)
}

pub fn spectrum(ctx: &Context) -> Result<Status> {
    let model = ctx.read_model()?;
    let spec = eigen_decompose(&model)?;
    let margin = ctx.cfg.basis.margin;
    let rows: Vec<[f64; 5]> = spec
        .pairs
        .iter()
        .map(|p| [p.lambda.re, p.lambda.im, p.mu.re, p.mu.im, f64::from(u8::from(p.lambda.re < -margin))])
        .collect();
    let csv = export::to_csv(["lambda_re", "lambda_im", "mu_re", "mu_im", "stable"], &rows)?;
    save_json(&ctx.path(SPECTRUM), &spec.to_file())?;
    write_atomic(&ctx.path(EIGENVALUES), &csv)?;
    let stable = rows.iter().filter(|r| r[4] > 0.0).count();
    println!("spectrum: {} eigenvalues, {stable} stable → {}", spec.len(), ctx.path(SPECTRUM).display());
    Ok(Status::Success)
}

pub fn basis(ctx: &Context) -> Result<Status> {
    let (data, model, spec) = (ctx.read_snapshots()?, ctx.read_model()?, ctx.read_spectrum()?);
    let basis = build_basis(&model, &spec, &ctx.cfg.basis, &data, Some(&ctx.field))?;
    save_json(&ctx.path(BASIS), &basis.to_file())?;
    for e in &basis.entries {
        println!(
            "basis: λ = {:.4}{:+.4}i, ε̂ = {:.3e}, κ = {:.3e}, ω = {:.3e}",
            e.lambda.re, e.lambda.im, e.eps_hat, e.kappa, e.omega
        );
    }
    println!("basis: {} entries → {}", basis.len(), ctx.path(BASIS).display());
    Ok(Status::Success)
}

pub fn refine(ctx: &Context) -> Result<Status> {
    let basis = ctx.read_basis()?;
    let mut cfg = ctx.cfg.refine.algorithm1.clone();
    cfg.seed = ctx.cfg.stage_seed(stage::REFINE);
    let out = run_algorithm1(&basis, DataSource::Field(&ctx.field), &ctx.target, &cfg)?;
    let report = RefineReport {
        status: out.status.clone(),
        radius: out.radius,
        rows: out.polytope.len(),
        archived_rows: out.archive.len(),
        log: out.log.clone(),
    };
    write_atomic(&ctx.path(REFINE_LOG), log_to_csv(&out.log)?.as_bytes())?;
    save_json(&ctx.path(REFINE), &report)?;
    let Some(cand) = out.candidate(cfg.beta) else {
        eprintln!("refine: no feasible candidate ({:?})", out.status);
        return Ok(Status::Infeasible);
    };
    save_json(&ctx.path(POLYTOPE), &out.polytope)?;
    save_json(&ctx.path(CERTIFICATE), &cand)?;
    println!(
        "refine: γ = {:.6}, Chebyshev radius {:.3e}, {} rows → {}",
        cand.gamma,
        out.radius,
        out.polytope.len(),
        ctx.path(CERTIFICATE).display()
    );
    Ok(Status::Success)
}

pub fn verify(ctx: &Context) -> Result<Status> {
    let basis = ctx.read_basis()?;
    let cand = ctx.read_candidate(&basis)?;
    let domain = ctx.domain()?;
    let mut nlp_cfg = ctx.cfg.verify.nlp.clone();
    nlp_cfg.seed = ctx.cfg.stage_seed(stage::NLP);
    let nlp = nlp_verify(&basis, &ctx.field, &cand, &domain, &nlp_cfg)?;
    let res = ctx.cfg.verify.grid_resolution;
    let grid = if res >= 2 && domain.dim() <= 3 {
        Some(grid_falsify(&basis, &ctx.field, &cand, &domain, res)?)
    } else {
        None
    };
    let verdict = match &grid {
        Some(g) if g.verdict == Verdict::Falsified => Verdict::Falsified,
        _ => nlp.verdict,
    };
    if basis.dictionary.as_monomial().is_some() {
        let radius = domain.lo.iter().chain(&domain.hi).fold(0.0f64, |m, v| m.max(v.abs()));
        let gram = gram_matrix(&basis, &cand.alpha, radius)?;
        save_json(&ctx.path(GRAM), &gram.to_file())?;
    }
    println!("verify: NLP max {:.4e} at {:?} ({:?})", nlp.max_value, nlp.argmax, nlp.verdict);
    if let Some(g) = &grid {
        println!("verify: grid max {:.4e} at {:?}, cell bound {:.3e}", g.max_value, g.argmax, g.cell_bound);
    }
    save_json(&ctx.path(REPORT), &VerifyReport { verdict, nlp, grid })?;
    println!("verify: {verdict:?} → {}", ctx.path(REPORT).display());
    Ok(if verdict == Verdict::Verified {
        Status::Success
    } else {
        Status::NotVerified
    })
}

pub fn falsify_sim(ctx: &Context) -> Result<Status> {
    let basis = ctx.read_basis()?;
    let cand = ctx.read_candidate(&basis)?;
    let region = ctx.cfg.verify.simulation_region.as_ref().unwrap_or(&ctx.target);
    let mut cfg = ctx.cfg.verify.simulation.clone();
    cfg.seed = ctx.cfg.stage_seed(stage::SIMULATION);
    let rep: SimulationReport = simulate_invariance_in(&basis, &ctx.field, &cand, region, &cfg)?;
    save_json(&ctx.path(SIMULATION), &rep)?;
    println!(
        "falsify-sim: {} of {} trajectories leave {{V ≤ γ}} (worst overshoot {:.3e}) → {}",
        rep.violations,
        rep.trajectories,
        rep.worst_overshoot,
        ctx.path(SIMULATION).display()
    );
    Ok(if rep.violations == 0 {
        Status::Success
    } else {
        Status::NotVerified
    })
}

/// All stages in order. Stops at the first error or infeasibility; a failed
/// verification still runs the simulation check.
pub fn run(ctx: &Context) -> Result<Status> {
    for stage in [simulate, fit, spectrum, basis, refine] {
        let s = stage(ctx)?;
        if s != Status::Success {
            return Ok(s);
        }
    }
    let v = verify(ctx)?;
    let s = falsify_sim(ctx)?;
    Ok(if v == Status::Success && s == Status::Success {
        Status::Success
    } else {
        Status::NotVerified
    })
}

pub fn export_contour(ctx: &Context, resolution: usize, domain: Option<DomainBox>) -> Result<Status> {
    let basis = ctx.read_basis()?;
    let cand = ctx.read_candidate(&basis)?;
    let domain = match domain {
        Some(d) => d,
        None => ctx.domain()?,
    };
    let rows = export::export_contour(&basis, &ctx.field, &cand, &domain, resolution)?;
    write_atomic(&ctx.path(CONTOUR), &export::to_csv(["x1", "x2", "V", "residual"], &rows)?)?;
    println!("export-contour: {} rows → {}", rows.len(), ctx.path(CONTOUR).display());
    Ok(Status::Success)
}

pub fn export_projection(ctx: &Context, anchors: &[Vec<f64>; 3], span: (f64, f64), resolution: usize) -> Result<Status> {
    let basis = ctx.read_basis()?;
    let cand = ctx.read_candidate(&basis)?;
    let rows = export::export_projection(&basis, &cand, [&anchors[0], &anchors[1], &anchors[2]], span, resolution)?;
    write_atomic(&ctx.path(PROJECTION), &export::to_csv(["u", "v", "V"], &rows)?)?;
    println!("export-projection: {} rows → {}", rows.len(), ctx.path(PROJECTION).display());
    Ok(Status::Success)
}
