//! Monte Carlo sweeps over (n, seed): sampling, eigensolves, per-run analytics,
//! CSV/JSON outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::environment::{
    pi_field, sample_environment, BoxSpec, ConductanceLaw, Environment, Site,
};
use crate::error::{Error, Result};
use crate::extremes::{
    ks_distance, ks_p_value, limit_cdf, pointwise_bound_check, quotient_statistic, EmpiricalCdf,
    PointwiseCheck, TailModel,
};
use crate::paths::{build_detour_paths, cluster_mu, pathvsrw_bound};
use crate::percolation::{
    build_dn_at, build_hole_map, cluster_density, clusters, l1, threshold_open,
    xi_for_open_probability,
};
use crate::spectral::{
    assemble_dirichlet_operator, principal_eigenpair, principal_eigenpair_with, rayleigh_quotient,
    subgraph_operator, SolverOptions,
};
use crate::traps::{
    bad_edge_census, bc_integral, find_traps, lambda_g, TailClass, ThresholdFamily, ThresholdKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Spectrum,
    Localization,
    Scaling,
    LimitLaw,
    Traps,
    Percolation,
    Paths,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Spectrum => "spectrum",
            Experiment::Localization => "localization",
            Experiment::Scaling => "scaling",
            Experiment::LimitLaw => "limit-law",
            Experiment::Traps => "traps",
            Experiment::Percolation => "percolation",
            Experiment::Paths => "paths",
        }
    }
}

fn default_d() -> usize {
    2
}
fn default_seeds() -> usize {
    1
}
fn default_tol() -> f64 {
    1e-10
}
fn default_nu_quantile() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default = "default_d")]
    pub d: usize,
    /// Tail index of polynomial(gamma); ignored when `law` is set.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub law: Option<ConductanceLaw>,
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub seed_base: u64,
    /// D_n exponent (default eps2 from epsilon1); the upper family's epsilon in `traps`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub epsilon1: Option<f64>,
    /// Lower family's delta in `traps`.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub xi: Option<f64>,
    #[serde(default)]
    pub p: Option<f64>,
    /// F(nu) for the D_n threshold used by `paths`.
    #[serde(default = "default_nu_quantile")]
    pub nu_quantile: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        ExperimentConfig {
            experiment,
            d: 2,
            gamma: None,
            law: None,
            n_grid: Vec::new(),
            seeds: 1,
            seed_base: 0,
            epsilon: None,
            epsilon1: None,
            delta: None,
            xi: None,
            p: None,
            nu_quantile: default_nu_quantile(),
            tol: default_tol(),
            threads: None,
            out: None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn resolved_law(&self) -> Result<ConductanceLaw> {
        let law = match (&self.law, self.gamma) {
            (Some(l), _) => l.clone(),
            (None, Some(g)) => ConductanceLaw::polynomial(g),
            (None, None) => return Err(Error::Config("either gamma or law must be given".into())),
        };
        law.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(law)
    }

    pub fn resolved_gamma(&self) -> Option<f64> {
        match &self.law {
            Some(l) => l.gamma(),
            None => self.gamma,
        }
    }

    /// epsilon1 = min(0.5, 1/(2 gamma) - 2 - 0.01) unless given.
    pub fn resolved_epsilon1(&self) -> Option<f64> {
        self.epsilon1.or_else(|| {
            let g = self.resolved_gamma()?;
            if g > 0.0 {
                Some((1.0 / (2.0 * g) - 2.0 - 0.01).min(0.5))
            } else {
                None
            }
        })
    }

    /// eps2 = 7 eps1 / (8 (2 + eps1)) unless `epsilon` is given.
    pub fn resolved_epsilon(&self) -> Option<f64> {
        if self.experiment != Experiment::Traps {
            if let Some(e) = self.epsilon {
                return Some(e);
            }
        }
        let e1 = self.resolved_epsilon1()?;
        (e1 > 0.0 && e1 < 1.0).then(|| 7.0 * e1 / (8.0 * (2.0 + e1)))
    }

    /// Threshold xi from `xi`, else from `p` via F(xi) = 1 - p, else the experiment default.
    pub fn resolved_xi(&self, law: &ConductanceLaw) -> Result<Option<f64>> {
        if let Some(x) = self.xi {
            return Ok(Some(x));
        }
        let p = match (self.p, self.experiment) {
            (Some(p), _) => p,
            (None, Experiment::Percolation) => 0.9,
            (None, Experiment::Paths) => 0.95,
            _ => return Ok(None),
        };
        xi_for_open_probability(law, p)
            .map(Some)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d < 2 {
            return bad(format!("d must be >= 2, got {}", self.d));
        }
        if self.n_grid.is_empty() {
            return bad("n grid is empty".into());
        }
        if let Some(n) = self.n_grid.iter().find(|&&n| n < 2) {
            return bad(format!("every n must be >= 2, got {n}"));
        }
        if self.seeds < 1 {
            return bad("seed count must be >= 1".into());
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return bad(format!("tol must lie in (0, 1), got {}", self.tol));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) && self.law.is_none() {
                return bad(format!("gamma must be > 0, got {g}"));
            }
        }
        let law = self.resolved_law()?;
        if self.experiment == Experiment::LimitLaw
            && !self.resolved_gamma().is_some_and(|g| g > 0.0)
        {
            return bad("limit-law needs gamma > 0".into());
        }
        if self.experiment == Experiment::Localization {
            match self.resolved_epsilon1() {
                Some(e) if e > 0.0 && e < 1.0 => {}
                _ => return bad("localization needs epsilon1 in (0, 1); gamma must be below 1/4 for the default".into()),
            }
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e < 1.0) {
                return bad(format!("epsilon must lie in (0, 1), got {e}"));
            }
        }
        if let Some(e) = self.delta {
            if !(e > 0.0) {
                return bad(format!("delta must be > 0, got {e}"));
            }
        }
        if let Some(p) = self.p {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("p must lie in (0, 1), got {p}"));
            }
        }
        if let Some(x) = self.xi {
            if !(x > 0.0) {
                return bad(format!("xi must be > 0, got {x}"));
            }
        }
        if !(self.nu_quantile > 0.0 && self.nu_quantile < 1.0) {
            return bad(format!(
                "nu quantile must lie in (0, 1), got {}",
                self.nu_quantile
            ));
        }
        if self.threads == Some(0) {
            return bad("thread count must be >= 1".into());
        }
        self.resolved_xi(&law)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON, without threads and output path.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.threads = None;
        c.out = None;
        let mut n = c.n_grid.clone();
        n.sort_unstable();
        n.dedup();
        c.n_grid = n;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes)[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// One row of runs.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub n: usize,
    pub status: String,
    pub lambda1: Option<f64>,
    pub min_pi: Option<f64>,
    pub psi1_zn_sq: Option<f64>,
    #[serde(rename = "mass_Dn")]
    pub mass_dn: Option<f64>,
    pub trap_count: Option<usize>,
    pub quotient_stat: Option<f64>,
    pub iters: Option<usize>,
    pub wall_ms: u64,
}

pub const CSV_HEADER: &str =
    "config_hash,seed,n,status,lambda1,min_pi,psi1_zn_sq,mass_Dn,trap_count,quotient_stat,iters,wall_ms";

/// Experiment-specific per-run results that do not fit the CSV columns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunExtras {
    pub argmax_at_zn: Option<bool>,
    pub pointwise: Option<PointwiseCheck>,
    pub scaled_lambda1: Option<f64>,
    pub percolation: Option<PercolationAudit>,
    pub paths: Option<PathsAudit>,
    pub traps_upper: Option<usize>,
    pub traps_lower: Option<usize>,
    pub census: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercolationAudit {
    pub xi: f64,
    pub density: f64,
    pub holes: usize,
    /// Status of the hole-map construction.
    pub hole_map: String,
    pub injective: Option<bool>,
    pub max_l1: Option<i64>,
    pub distance_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathsAudit {
    pub status: String,
    pub xi: f64,
    pub nu: f64,
    pub sources: usize,
    pub l: usize,
    pub within_log_bound: bool,
    pub mu: f64,
    pub bound: f64,
    /// Principal eigenvalue of the energy on D_n edges over B_n ∩ D_n.
    pub lambda_g: f64,
    /// min over tested f of (E(f)/|f|^2 - bound) / bound.
    pub min_rel_slack: f64,
    pub tested: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub record: RunRecord,
    pub extras: RunExtras,
}

fn median(v: &mut [f64]) -> Option<f64> {
    quantile(v, 0.5)
}

/// Linear-interpolated quantile (type 7).
fn quantile(v: &mut [f64], q: f64) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Shared, per-sweep state.
struct Context {
    cfg: ExperimentConfig,
    law: ConductanceLaw,
    hash: String,
    gamma: f64,
    xi: Option<f64>,
    tail: Option<TailModel>,
}

const PATH_TEST_FUNCTIONS: usize = 200;

fn pad_for(d: usize) -> usize {
    6 * d + 1
}

fn run_job(ctx: &Context, n: usize, seed: u64) -> Run {
    let start = Instant::now();
    let mut rec = RunRecord {
        config_hash: ctx.hash.clone(),
        seed,
        n,
        status: "ok".into(),
        lambda1: None,
        min_pi: None,
        psi1_zn_sq: None,
        mass_dn: None,
        trap_count: None,
        quotient_stat: None,
        iters: None,
        wall_ms: 0,
    };
    let mut extras = RunExtras::default();
    if let Err(e) = job_body(ctx, n, seed, &mut rec, &mut extras) {
        if rec.status == "ok" {
            rec.status = e.code().into();
        }
    }
    rec.wall_ms = start.elapsed().as_millis() as u64;
    Run {
        record: rec,
        extras,
    }
}

fn note(rec: &mut RunRecord, e: &Error) {
    if rec.status == "ok" {
        rec.status = e.code().into();
    }
}

fn job_body(
    ctx: &Context,
    n: usize,
    seed: u64,
    rec: &mut RunRecord,
    ex: &mut RunExtras,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let d = cfg.d;
    let env = sample_environment(BoxSpec::new(d, n, pad_for(d)), ctx.law.clone(), seed)?;
    let field = pi_field(&env)?;
    let z = field.argmin_site().clone();
    let min_pi = field.min_value();
    rec.min_pi = Some(min_pi);
    rec.quotient_stat = quotient_statistic(&field, n, 1).ok();

    let g = ThresholdFamily::critical(ctx.gamma, d);
    match find_traps(&env, n, g.eval(&ctx.law, n as f64)) {
        Ok(r) => {
            rec.trap_count = Some(r.traps.len());
            ex.census = r.bad_edge_max;
        }
        Err(e) => note(rec, &e),
    }

    let op = assemble_dirichlet_operator::<f64>(&env, n)?;
    let pair = principal_eigenpair_with(
        &op,
        SolverOptions {
            tol: cfg.tol,
            ..SolverOptions::default()
        },
    )?;
    rec.lambda1 = Some(pair.lambda1);
    rec.iters = Some(pair.iterations);
    let zi = op.site_index(&z).expect("argmin lies in B_n");
    rec.psi1_zn_sq = Some(pair.psi1[zi] * pair.psi1[zi]);

    if let Some(eps) = cfg.resolved_epsilon() {
        let t = g.eval(&ctx.law, (n as f64).powf(1.0 - eps));
        match build_dn_at(&env, t, n) {
            Ok(dn) => {
                let mass = (0..op.dim())
                    .filter(|&i| dn.contains(&op.site(i)))
                    .map(|i| pair.psi1[i] * pair.psi1[i])
                    .sum();
                rec.mass_dn = Some(mass);
            }
            Err(e) => note(rec, &e),
        }
    }

    match cfg.experiment {
        Experiment::Localization => {
            let arg = pair.psi1.iter().enumerate().fold(0, |b, (i, v)| {
                if v.abs() > pair.psi1[b].abs() {
                    i
                } else {
                    b
                }
            });
            ex.argmax_at_zn = Some(arg == zi);
            ex.pointwise = Some(pointwise_bound_check(&field, n, &pair.psi1, 1e-8)?);
        }
        Experiment::LimitLaw => {
            let tail = ctx.tail.as_ref().expect("limit-law builds a tail model");
            let size = ((2 * n + 1) as f64).powi(d as i32);
            ex.scaled_lambda1 = Some(tail.scale_h(size)? * pair.lambda1);
        }
        Experiment::Traps => {
            let (up, lo) = trap_families(ctx)?;
            ex.traps_upper = Some(
                find_traps(&env, n, up.eval(&ctx.law, n as f64))?
                    .traps
                    .len(),
            );
            ex.traps_lower = Some(
                find_traps(&env, n, lo.eval(&ctx.law, n as f64))?
                    .traps
                    .len(),
            );
        }
        Experiment::Percolation => {
            ex.percolation = Some(percolation_audit(&env, n, ctx.xi.expect("xi resolved"))?);
        }
        Experiment::Paths => {
            let audit = paths_audit(ctx, &env, n, seed);
            if audit.status != "ok" {
                rec.status = audit.status.clone();
            }
            ex.paths = Some(audit);
        }
        Experiment::Spectrum | Experiment::Scaling => {}
    }
    Ok(())
}

fn trap_families(ctx: &Context) -> Result<(ThresholdFamily, ThresholdFamily)> {
    let up = ThresholdFamily::new(
        ThresholdKind::Upper {
            epsilon: ctx.cfg.epsilon.unwrap_or(0.5),
        },
        ctx.gamma,
        ctx.cfg.d,
    )?;
    let lo = ThresholdFamily::new(
        ThresholdKind::Lower {
            delta: ctx.cfg.delta.unwrap_or(0.1),
        },
        ctx.gamma,
        ctx.cfg.d,
    )?;
    Ok((up, lo))
}

fn percolation_audit(env: &Environment, n: usize, xi: f64) -> Result<PercolationAudit> {
    let lab = clusters(env, &threshold_open(env, xi)?, n)?;
    let density = cluster_density(&lab, n);
    let holes = lab.hole_sites(n).len();
    let mut audit = PercolationAudit {
        xi,
        density,
        holes,
        hole_map: "ok".into(),
        injective: None,
        max_l1: None,
        distance_bound: None,
    };
    match build_hole_map(&lab, n) {
        Ok(hm) => {
            audit.injective = Some(hm.is_injective());
            audit.max_l1 = Some(hm.phi.iter().map(|(x, y)| l1(x, y)).max().unwrap_or(0));
            audit.distance_bound = Some(hm.distance_bound());
        }
        Err(e) => audit.hole_map = e.code().into(),
    }
    Ok(audit)
}

fn paths_audit(ctx: &Context, env: &Environment, n: usize, seed: u64) -> PathsAudit {
    let xi = ctx.xi.expect("xi resolved");
    let nu = ctx.law.inverse_cdf(ctx.cfg.nu_quantile).unwrap_or(f64::NAN);
    let mut audit = PathsAudit {
        status: "ok".into(),
        xi,
        nu,
        sources: 0,
        l: 0,
        within_log_bound: false,
        mu: f64::NAN,
        bound: f64::NAN,
        lambda_g: f64::NAN,
        min_rel_slack: f64::NAN,
        tested: 0,
    };
    if let Err(e) = paths_certificate(ctx, env, n, seed, xi, nu, &mut audit) {
        audit.status = e.code().into();
    }
    audit
}

fn paths_certificate(
    ctx: &Context,
    env: &Environment,
    n: usize,
    seed: u64,
    xi: f64,
    nu: f64,
    audit: &mut PathsAudit,
) -> Result<()> {
    let d = ctx.cfg.d;
    if !(nu < xi) {
        return Err(Error::Precondition(format!(
            "nu = {nu} must lie below xi = {xi}"
        )));
    }
    let dn = build_dn_at(env, nu, n)?;
    let census = bad_edge_census(env, n, 3 * d, nu)?;
    if census > 3 * d - 1 {
        return Err(Error::Precondition(format!(
            "bad-edge census {census} exceeds {}",
            3 * d - 1
        )));
    }
    let lab = clusters(env, &threshold_open(env, xi)?, n)?;
    let hm = build_hole_map(&lab, n)?;
    let sources: Vec<Site> = hm
        .phi
        .iter()
        .map(|(x, _)| x.clone())
        .filter(|x| dn.contains(x))
        .collect();
    if let Some((_, y)) = hm
        .phi
        .iter()
        .find(|(x, y)| dn.contains(x) && !dn.contains(y))
    {
        return Err(Error::Precondition(format!("image {y:?} lies outside D_n")));
    }
    let pm = build_detour_paths(env, &sources, &hm, nu)?;
    audit.sources = sources.len();
    audit.l = pm.l;
    audit.within_log_bound = pm.within_log_bound(n, d);
    let mu = cluster_mu(env, &lab, xi, n, ctx.cfg.tol)?;
    let bound = pathvsrw_bound(nu, pm.l.max(1) as f64, mu, d)?;
    audit.mu = mu;
    audit.bound = bound;

    let b: Vec<Site> = dn.labeling.giant_sites(n);
    let op = subgraph_operator::<f64, _>(env, &b, |w| w > nu)?;
    let pair = principal_eigenpair(&op, ctx.cfg.tol, 10_000)?;
    audit.lambda_g = pair.lambda1;
    let mut slack = (pair.lambda1 - bound) / bound;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    for _ in 0..PATH_TEST_FUNCTIONS {
        let f: Vec<f64> = (0..op.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        slack = slack.min((rayleigh_quotient(&op, &f) - bound) / bound);
    }
    audit.min_rel_slack = slack;
    audit.tested = PATH_TEST_FUNCTIONS + 1;
    Ok(())
}

/// Least-squares slope of log median lambda1 against log n, with a seeded
/// bootstrap over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// (n, median lambda1).
    pub points: Vec<(usize, f64)>,
}

fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

pub fn scaling_slope(records: &[RunRecord]) -> Result<SlopeFit> {
    let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        if let (Some(l), true) = (r.lambda1, r.status == "ok" || r.lambda1.is_some()) {
            if l > 0.0 {
                by_n.entry(r.n).or_default().push(l);
            }
        }
    }
    by_n.retain(|_, v| v.len() >= 10);
    if by_n.len() < 3 {
        return Err(Error::Domain(
            "slope needs >= 3 values of n with >= 10 runs each".into(),
        ));
    }
    let fit = |groups: &BTreeMap<usize, Vec<f64>>| {
        let pts: Vec<(f64, f64)> = groups
            .iter()
            .map(|(n, v)| ((*n as f64).ln(), median(&mut v.clone()).unwrap().ln()))
            .collect();
        fit_line(&pts)
    };
    let (slope, intercept) = fit(&by_n);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut boot = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let resampled: BTreeMap<usize, Vec<f64>> = by_n
            .iter()
            .map(|(n, v)| {
                (
                    *n,
                    (0..v.len())
                        .map(|_| v[rng.random_range(0..v.len())])
                        .collect(),
                )
            })
            .collect();
        boot.push(fit(&resampled).0);
    }
    Ok(SlopeFit {
        slope,
        intercept,
        ci_low: quantile(&mut boot, 0.025).unwrap(),
        ci_high: quantile(&mut boot, 0.975).unwrap(),
        points: by_n
            .iter()
            .map(|(n, v)| (*n, median(&mut v.clone()).unwrap()))
            .collect(),
    })
}

/// Records, extras and the JSON summary of a sweep.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config_hash: String,
    pub runs: Vec<Run>,
    pub summary: Value,
    pub plotdata: BTreeMap<String, String>,
}

impl RunOutput {
    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().map(|r| &r.record)
    }
}

fn build_context(cfg: &ExperimentConfig) -> Result<Context> {
    cfg.validate()?;
    let law = cfg.resolved_law()?;
    let xi = cfg.resolved_xi(&law)?;
    let tail = if cfg.experiment == Experiment::LimitLaw {
        Some(TailModel::new(law.clone(), cfg.d).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    Ok(Context {
        hash: cfg.hash(),
        gamma: cfg.resolved_gamma().unwrap_or(0.0),
        cfg: cfg.clone(),
        law,
        xi,
        tail,
    })
}

fn jobs(cfg: &ExperimentConfig) -> Vec<(usize, u64)> {
    let mut ns = cfg.n_grid.clone();
    ns.sort_unstable();
    ns.dedup();
    ns.iter()
        .flat_map(|&n| (0..cfg.seeds as u64).map(move |s| (n, cfg.seed_base + s)))
        .collect()
}

fn pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        b = b.num_threads(t);
    }
    b.build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs the sweep in memory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_streaming(cfg, |_| Ok(()))
}

/// Runs the sweep, handing each finished row to `sink` in (n, seed) order.
pub fn run_streaming<S: FnMut(&Run) -> Result<()>>(
    cfg: &ExperimentConfig,
    mut sink: S,
) -> Result<RunOutput> {
    let ctx = build_context(cfg)?;
    let all = jobs(cfg);
    let pool = pool(cfg)?;
    let chunk = 4 * pool.current_num_threads();
    let mut runs = Vec::with_capacity(all.len());
    for part in all.chunks(chunk) {
        let done: Vec<Run> =
            pool.install(|| part.par_iter().map(|&(n, s)| run_job(&ctx, n, s)).collect());
        for r in done {
            sink(&r)?;
            runs.push(r);
        }
    }
    let (summary, plotdata) = summarize(&ctx, &runs)?;
    Ok(RunOutput {
        config_hash: ctx.hash,
        runs,
        summary,
        plotdata,
    })
}

/// Runs the sweep and writes runs.csv (row by row), summary.json and plotdata/.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    fs::create_dir_all(dir.join("plotdata"))?;
    let mut wr = csv::Writer::from_path(dir.join("runs.csv"))?;
    let out = run_streaming(cfg, |r| {
        wr.serialize(&r.record)?;
        wr.flush()?;
        Ok(())
    })?;
    let mut f = fs::File::create(dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, &out.summary)?;
    f.write_all(b"\n")?;
    for (name, body) in &out.plotdata {
        fs::write(dir.join("plotdata").join(name), body)?;
    }
    Ok(out)
}

/// The rows of a runs.csv, as written.
pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn stats(v: &[f64]) -> Value {
    let mut v = v.to_vec();
    json!({
        "count": v.len(),
        "median": median(&mut v),
        "q1": quantile(&mut v, 0.25),
        "q3": quantile(&mut v, 0.75),
    })
}

fn ecdf_csv(values: &[f64], extra: Option<&dyn Fn(f64) -> f64>) -> Result<String> {
    let mut s = String::from(if extra.is_some() {
        "value,ecdf,reference\n"
    } else {
        "value,ecdf\n"
    });
    if values.is_empty() {
        return Ok(s);
    }
    for (v, p) in EmpiricalCdf::new(values.to_vec())?.pairs() {
        match extra {
            Some(f) => s.push_str(&format!("{v},{p},{}\n", f(v))),
            None => s.push_str(&format!("{v},{p}\n")),
        }
    }
    Ok(s)
}

fn summarize(ctx: &Context, runs: &[Run]) -> Result<(Value, BTreeMap<String, String>)> {
    let cfg = &ctx.cfg;
    let mut plots = BTreeMap::new();
    let mut per_n = serde_json::Map::new();
    let mut status_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut trivial_violations = 0usize;
    let mut trivial_checked = 0usize;
    for r in runs {
        *status_counts.entry(r.record.status.clone()).or_default() += 1;
        if let (Some(l), Some(p)) = (r.record.lambda1, r.record.min_pi) {
            trivial_checked += 1;
            if l > p + 1e-10 * p {
                trivial_violations += 1;
            }
        }
    }
    let ns: Vec<usize> = {
        let mut v: Vec<usize> = runs.iter().map(|r| r.record.n).collect();
        v.dedup();
        v
    };
    for &n in &ns {
        let rs: Vec<&Run> = runs.iter().filter(|r| r.record.n == n).collect();
        let col = |f: &dyn Fn(&RunRecord) -> Option<f64>| -> Vec<f64> {
            rs.iter().filter_map(|r| f(&r.record)).collect()
        };
        let lambda = col(&|r| r.lambda1);
        let ratio = col(&|r| Some(r.lambda1? / r.min_pi?));
        let mut entry = json!({
            "runs": rs.len(),
            "ok": rs.iter().filter(|r| r.record.status == "ok").count(),
            "lambda1": stats(&lambda),
            "min_pi": stats(&col(&|r| r.min_pi)),
            "ratio_lambda1_min_pi": stats(&ratio),
            "psi1_zn_sq": stats(&col(&|r| r.psi1_zn_sq)),
            "mass_Dn": stats(&col(&|r| r.mass_dn)),
            "trap_count": stats(&col(&|r| r.trap_count.map(|c| c as f64))),
            "quotient_stat": stats(&col(&|r| r.quotient_stat)),
        });
        plots.insert(format!("ecdf_lambda1_n{n}.csv"), ecdf_csv(&lambda, None)?);
        let e = entry.as_object_mut().unwrap();
        match cfg.experiment {
            Experiment::Localization => {
                let at: Vec<bool> = rs.iter().filter_map(|r| r.extras.argmax_at_zn).collect();
                let pw: Vec<&PointwiseCheck> = rs
                    .iter()
                    .filter_map(|r| r.extras.pointwise.as_ref())
                    .collect();
                e.insert(
                    "argmax_at_zn_fraction".into(),
                    json!(at.iter().filter(|b| **b).count() as f64 / at.len().max(1) as f64),
                );
                e.insert(
                    "pointwise_checked".into(),
                    json!(pw.iter().map(|p| p.checked).sum::<usize>()),
                );
                e.insert(
                    "pointwise_violations".into(),
                    json!(pw.iter().map(|p| p.violations).sum::<usize>()),
                );
                e.insert(
                    "pointwise_worst_excess".into(),
                    json!(pw
                        .iter()
                        .map(|p| p.worst_excess)
                        .fold(f64::NEG_INFINITY, f64::max)),
                );
            }
            Experiment::LimitLaw => {
                let scaled: Vec<f64> = rs.iter().filter_map(|r| r.extras.scaled_lambda1).collect();
                let (d, g) = (cfg.d, ctx.gamma);
                let cdf = move |z: f64| limit_cdf(z.max(0.0), d, g).unwrap();
                let h = ctx
                    .tail
                    .as_ref()
                    .unwrap()
                    .scale_h(((2 * n + 1) as f64).powi(d as i32))?;
                e.insert("h".into(), json!(h));
                if !scaled.is_empty() {
                    let ks = ks_distance(&scaled, cdf)?;
                    e.insert("ks_distance".into(), json!(ks));
                    e.insert("ks_p_value".into(), json!(ks_p_value(ks, scaled.len())));
                }
                e.insert("scaled_lambda1".into(), stats(&scaled));
                plots.insert(
                    format!("ecdf_scaled_n{n}.csv"),
                    ecdf_csv(&scaled, Some(&cdf))?,
                );
            }
            Experiment::Traps => {
                let (up, lo) = trap_families(ctx)?;
                let crit = ThresholdFamily::critical(ctx.gamma, cfg.d);
                e.insert(
                    "lambda_g_critical".into(),
                    json!(lambda_g(&ctx.law, &crit, n as u64)),
                );
                e.insert(
                    "lambda_g_upper".into(),
                    json!(lambda_g(&ctx.law, &up, n as u64)),
                );
                e.insert(
                    "lambda_g_lower".into(),
                    json!(lambda_g(&ctx.law, &lo, n as u64)),
                );
                let tu: Vec<f64> = rs
                    .iter()
                    .filter_map(|r| r.extras.traps_upper.map(|c| c as f64))
                    .collect();
                let tl: Vec<f64> = rs
                    .iter()
                    .filter_map(|r| r.extras.traps_lower.map(|c| c as f64))
                    .collect();
                e.insert("traps_upper".into(), stats(&tu));
                e.insert("traps_lower".into(), stats(&tl));
                let gu = up.eval(&ctx.law, n as f64);
                let gl = lo.eval(&ctx.law, n as f64);
                e.insert(
                    "lambda1_over_g_upper".into(),
                    stats(&lambda.iter().map(|l| l / gu).collect::<Vec<_>>()),
                );
                e.insert(
                    "lambda1_over_g_lower".into(),
                    stats(&lambda.iter().map(|l| l / gl).collect::<Vec<_>>()),
                );
            }
            Experiment::Percolation => {
                let au: Vec<&PercolationAudit> = rs
                    .iter()
                    .filter_map(|r| r.extras.percolation.as_ref())
                    .collect();
                let passing: Vec<&&PercolationAudit> =
                    au.iter().filter(|a| a.hole_map == "ok").collect();
                e.insert(
                    "density".into(),
                    stats(&au.iter().map(|a| a.density).collect::<Vec<_>>()),
                );
                e.insert(
                    "density_at_least_0_8".into(),
                    json!(au.iter().filter(|a| a.density >= 0.8).count()),
                );
                e.insert("hole_map_ok".into(), json!(passing.len()));
                e.insert(
                    "injective".into(),
                    json!(passing.iter().filter(|a| a.injective == Some(true)).count()),
                );
                e.insert(
                    "within_distance_bound".into(),
                    json!(passing
                        .iter()
                        .filter(|a| a.max_l1.unwrap() as f64 <= a.distance_bound.unwrap())
                        .count()),
                );
            }
            Experiment::Paths => {
                let au: Vec<&PathsAudit> =
                    rs.iter().filter_map(|r| r.extras.paths.as_ref()).collect();
                let ok: Vec<&&PathsAudit> = au.iter().filter(|a| a.status == "ok").collect();
                e.insert("certified".into(), json!(ok.len()));
                e.insert(
                    "min_rel_slack".into(),
                    json!(ok
                        .iter()
                        .map(|a| a.min_rel_slack)
                        .fold(f64::INFINITY, f64::min)),
                );
                e.insert(
                    "bound".into(),
                    stats(&ok.iter().map(|a| a.bound).collect::<Vec<_>>()),
                );
                e.insert(
                    "path_length".into(),
                    stats(&ok.iter().map(|a| a.l as f64).collect::<Vec<_>>()),
                );
            }
            Experiment::Spectrum | Experiment::Scaling => {}
        }
        per_n.insert(n.to_string(), entry);
    }
    let mut summary = json!({
        "experiment": cfg.experiment.name(),
        "config_hash": ctx.hash,
        "config": cfg,
        "law": ctx.law,
        "epsilon1": cfg.resolved_epsilon1(),
        "epsilon_dn": cfg.resolved_epsilon(),
        "xi": ctx.xi,
        "runs": runs.len(),
        "status_counts": status_counts,
        "trivial_bound": {"checked": trivial_checked, "violations": trivial_violations},
        "per_n": per_n,
    });
    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    match scaling_slope(&records) {
        Ok(fit) => {
            let mut s = String::from("n,log_n,median_lambda1,log_median_lambda1,fitted\n");
            for (n, m) in &fit.points {
                let x = (*n as f64).ln();
                s.push_str(&format!(
                    "{n},{x},{m},{},{}\n",
                    m.ln(),
                    fit.intercept + fit.slope * x
                ));
            }
            plots.insert("slope_fit.csv".into(), s);
            let target = (ctx.gamma > 0.0).then(|| -1.0 / (2.0 * ctx.gamma));
            summary["scaling"] = json!({"fit": fit, "target": target});
        }
        Err(e) if cfg.experiment == Experiment::Scaling => {
            summary["scaling"] = json!({"error": e.to_string()})
        }
        Err(_) => {}
    }
    if cfg.experiment == Experiment::Traps && ctx.gamma > 0.0 {
        let (up, lo) = trap_families(ctx)?;
        let m = 2 * cfg.d as u32;
        let umax = 1e6;
        let class = |c: TailClass| serde_json::to_value(c).unwrap();
        let bu = bc_integral(&ctx.law, &up, m, cfg.d, umax)?;
        let bl = bc_integral(&ctx.law, &lo, m, cfg.d, umax)?;
        summary["bc_integral"] = json!({
            "upper": {"value": bu.value, "exponent": bu.exponent, "tail": class(bu.tail)},
            "lower": {"value": bl.value, "exponent": bl.exponent, "tail": class(bl.tail)},
        });
    }
    Ok((summary, plots))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: usize, seed: u64, l: f64) -> RunRecord {
        RunRecord {
            config_hash: "x".into(),
            seed,
            n,
            status: "ok".into(),
            lambda1: Some(l),
            min_pi: Some(1.0),
            psi1_zn_sq: None,
            mass_dn: None,
            trap_count: None,
            quotient_stat: None,
            iters: None,
            wall_ms: 0,
        }
    }

    #[test]
    fn slope_exact_power() {
        let rs: Vec<RunRecord> = [8usize, 16, 32, 64]
            .iter()
            .flat_map(|&n| (0..10).map(move |s| rec(n, s, (n as f64).powi(-2))))
            .collect();
        let fit = scaling_slope(&rs).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-12);
        assert!((fit.ci_high - fit.ci_low).abs() < 1e-12);
    }

    #[test]
    fn slope_noisy_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rs: Vec<RunRecord> = [16usize, 24, 32, 48, 64]
            .iter()
            .flat_map(|&n| (0..20).map(move |s| (n, s)))
            .map(|(n, s)| rec(n, s, 3.0 * (n as f64).powi(-5) * rng.random_range(0.9..1.1)))
            .collect();
        let fit = scaling_slope(&rs).unwrap();
        assert!((-5.3..=-4.7).contains(&fit.slope), "{}", fit.slope);
        assert!(fit.ci_low <= fit.slope && fit.slope <= fit.ci_high);
        assert!(scaling_slope(&rs[..40]).is_err());
    }

    #[test]
    fn config_errors_and_hash() {
        let mut c = ExperimentConfig::new(Experiment::LimitLaw);
        c.n_grid = vec![8];
        c.law = Some(ConductanceLaw::constant(1.0));
        assert!(matches!(run(&c), Err(Error::Config(_))));
        c.law = None;
        c.gamma = Some(-0.2);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.gamma = Some(0.2);
        c.validate().unwrap();
        let h = c.hash();
        assert_eq!(h.len(), 16);
        c.threads = Some(3);
        c.out = Some("elsewhere".into());
        assert_eq!(c.hash(), h);
        c.seeds = 2;
        assert_ne!(c.hash(), h);
        assert!(ExperimentConfig::from_json(r#"{"experiment":"spectrum","bogus":1}"#).is_err());
    }

    #[test]
    fn spectrum_homogeneous_n3() {
        let mut c = ExperimentConfig::new(Experiment::Spectrum);
        c.law = Some(ConductanceLaw::constant(1.0));
        c.n_grid = vec![3];
        let out = run(&c).unwrap();
        let r = &out.runs[0].record;
        assert_eq!(r.status, "ok");
        let exact = 4.0 * (1.0 - (std::f64::consts::PI / 8.0).cos());
        assert!((r.lambda1.unwrap() - exact).abs() < 1e-9 * exact);
        assert!((r.lambda1.unwrap() - 0.30448).abs() < 1e-5);
    }

    #[test]
    fn csv_header_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::new(Experiment::Localization);
        c.gamma = Some(0.1);
        c.n_grid = vec![4, 6];
        c.seeds = 2;
        let out = run_to_dir(&c, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        let back = read_runs_csv(&dir.path().join("runs.csv")).unwrap();
        assert_eq!(back, out.records().cloned().collect::<Vec<_>>());
        assert_eq!(
            back.iter().map(|r| (r.n, r.seed)).collect::<Vec<_>>(),
            vec![(4, 0), (4, 1), (6, 0), (6, 1)]
        );
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("plotdata/ecdf_lambda1_n4.csv").exists());
    }
}
