//! Experiment driver: LHS sampling, the snapshot/train/query pipeline,
//! benchmark reports and hyper-parameter sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dd_fom::{generate_snapshots_with, DnConfig, DnProblem, FomState, InitialGuess, SnapshotPlan, SnapshotSet, TwinProblems};
use crate::error::{Error, Result, StageExt};
use crate::fem::{AssembledOperators, ParameterSample, SourceSpec, TimeScheme};
use crate::mesh::{BoundaryLayout, BoxGeometry};
use crate::rom_offline::{train, RankCaps, Ranks, ResidualSampling, RomModel, Tolerances};
use crate::rom_online::{reconstruct, rom_solve, rom_solve_unsteady, RomState};

/// Version tag of the CSV/JSON report layout.
pub const REPORT_SCHEMA: &str = "ddrom-bench/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// Parameters `(alpha, beta)`.
    DiffusionReaction,
    /// Parameters `(alpha, beta, gamma1, gamma2)`.
    DiffusionReactionSources,
    /// Parameters `(alpha)` or `(alpha, beta)`; needs a time scheme.
    Heat,
}

impl ProblemKind {
    fn default_source(self) -> SourceSpec {
        match self {
            ProblemKind::DiffusionReaction => SourceSpec::Spheroid,
            ProblemKind::DiffusionReactionSources => SourceSpec::TwoSources,
            ProblemKind::Heat => SourceSpec::HeatGate {
                x_max: 0.0,
                t_on: 0.2,
                t_off: 0.5,
            },
        }
    }

    fn param_counts(self) -> &'static [usize] {
        match self {
            ProblemKind::DiffusionReaction => &[2],
            ProblemKind::DiffusionReactionSources => &[4],
            ProblemKind::Heat => &[1, 2],
        }
    }

    fn sample(self, p: &[f64]) -> ParameterSample {
        match p.len() {
            1 => ParameterSample::new(p[0], 0.0),
            2 => ParameterSample::new(p[0], p[1]),
            _ => ParameterSample::new(p[0], p[1]).with_sources(p[2], p[3]),
        }
    }
}

/// Grid of truncation ranks; `m` sets both interface ranks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub n1: Vec<usize>,
    pub n2: Vec<usize>,
    pub m: Vec<usize>,
}

impl SweepGrid {
    /// Cartesian product in `(n1, n2, m)` lexicographic order.
    pub fn points(&self) -> Vec<Ranks> {
        let mut out = Vec::with_capacity(self.n1.len() * self.n2.len() * self.m.len());
        for &n1 in &self.n1 {
            for &n2 in &self.n2 {
                for &m in &self.m {
                    out.push(Ranks { n1, n2, m_d: m, m_n: m });
                }
            }
        }
        out
    }
}

fn default_omega() -> f64 {
    0.25
}
fn default_tol_interface() -> f64 {
    1e-10
}
fn default_max_iters() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub geometry: BoxGeometry,
    #[serde(default)]
    pub boundary: BoundaryLayout,
    /// Defaults to the problem's registered source.
    #[serde(default)]
    pub source: Option<SourceSpec>,
    /// Cells per axis of the slave subdomain.
    pub cells_slave: Vec<usize>,
    /// Cells per axis of the master subdomain.
    pub cells_master: Vec<usize>,
    /// `[lo, hi]` per parameter.
    pub param_box: Vec<[f64; 2]>,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
    pub tolerances: Tolerances,
    #[serde(default)]
    pub caps: RankCaps,
    #[serde(default = "default_tol_interface")]
    pub tol_interface: f64,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub sampling: ResidualSampling,
    #[serde(default)]
    pub time: Option<TimeScheme>,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text)?;
        if cfg.geometry.dim == 0 {
            cfg.geometry.dim = cfg.geometry.lo.len();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be at least 1".into()));
        }
        if !self.problem.param_counts().contains(&self.param_box.len()) {
            return Err(Error::Config(format!(
                "{:?} takes {:?} parameters, param_box has {}",
                self.problem,
                self.problem.param_counts(),
                self.param_box.len()
            )));
        }
        check_box(&self.param_box)?;
        if self.problem == ProblemKind::Heat && self.time.is_none() {
            return Err(Error::Config("heat problem needs a time scheme".into()));
        }
        if let Some(t) = &self.time {
            t.validate()?;
        }
        if let Some(g) = &self.sweep {
            if g.n1.is_empty() || g.n2.is_empty() || g.m.is_empty() {
                return Err(Error::Config("sweep axes must be non-empty".into()));
            }
            if g.n1.iter().chain(&g.n2).chain(&g.m).any(|&r| r == 0) {
                return Err(Error::Config("sweep ranks must be at least 1".into()));
            }
        }
        self.dn().validate()
    }

    pub fn source(&self) -> SourceSpec {
        self.source.clone().unwrap_or_else(|| self.problem.default_source())
    }

    pub fn dn(&self) -> DnConfig {
        DnConfig {
            omega: self.omega,
            tol_interface: self.tol_interface,
            max_iters: self.max_iters,
            initial_guess: InitialGuess::Zero,
        }
    }

    pub fn train_params(&self) -> Result<Vec<ParameterSample>> {
        self.params(self.n_train, self.seed)
    }

    /// Test points come from an independent stream of the same seed.
    pub fn test_params(&self) -> Result<Vec<ParameterSample>> {
        self.params(self.n_test, self.seed ^ 0x9e37_79b9_7f4a_7c15)
    }

    fn params(&self, n: usize, seed: u64) -> Result<Vec<ParameterSample>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        Ok(lhs_sample(&self.param_box, n, seed)?
            .iter()
            .map(|p| self.problem.sample(p))
            .collect())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("ddrom-out"))
    }
}

fn check_box(param_box: &[[f64; 2]]) -> Result<()> {
    for (d, [lo, hi]) in param_box.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("parameter {d}: need finite lo <= hi, got [{lo}, {hi}]")));
        }
    }
    Ok(())
}

/// Latin hypercube sample: along each axis the `n` points fall in distinct
/// equal-width strata, uniformly placed inside their stratum. A box side with
/// `lo == hi` yields that constant.
pub fn lhs_sample(param_box: &[[f64; 2]], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::Config("LHS needs n >= 1".into()));
    }
    check_box(param_box)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; param_box.len()]; n];
    for (d, &[lo, hi]) in param_box.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (p, &s) in points.iter_mut().zip(&strata) {
            let u: f64 = rng.gen();
            p[d] = if lo == hi {
                lo
            } else {
                (lo + (s as f64 + u) / n as f64 * (hi - lo)).min(hi)
            };
        }
    }
    Ok(points)
}

/// Assembled problems for one configuration: the conforming twins used for
/// snapshots and references, and the online pair the model is trained on.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub source: SourceSpec,
    pub twins: TwinProblems,
    pub online: DnProblem,
}

/// FOM references for one test parameter, one entry per time step.
#[derive(Clone, Debug)]
pub struct Reference {
    pub mu: ParameterSample,
    pub slave_res: Vec<FomState>,
    pub master_res: Vec<FomState>,
}

impl Experiment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let source = cfg.source();
        let plan = SnapshotPlan {
            geom: &cfg.geometry,
            layout: &cfg.boundary,
            source: &source,
            cells_slave: &cfg.cells_slave,
            cells_master: &cfg.cells_master,
            cfg: &cfg.dn(),
            scheme: cfg.time.as_ref(),
        };
        let (twins, online) = rayon::join(
            || TwinProblems::build(&plan),
            || DnProblem::build(&cfg.geometry, &cfg.boundary, &source, &cfg.cells_slave, &cfg.cells_master),
        );
        Ok(Experiment {
            cfg: cfg.clone(),
            twins: twins.stage("assemble")?,
            online: online.stage("assemble")?,
            source,
        })
    }

    pub fn snapshots(&self) -> Result<SnapshotSet> {
        let params = self.cfg.train_params()?;
        let dn = self.cfg.dn();
        let plan = SnapshotPlan {
            geom: &self.cfg.geometry,
            layout: &self.cfg.boundary,
            source: &self.source,
            cells_slave: &self.cfg.cells_slave,
            cells_master: &self.cfg.cells_master,
            cfg: &dn,
            scheme: self.cfg.time.as_ref(),
        };
        generate_snapshots_with(&self.twins, &plan, &params).stage("snapshots")
    }

    pub fn train(&self, snaps: &SnapshotSet) -> Result<RomModel> {
        train(
            snaps,
            &self.cfg.tolerances,
            &self.cfg.caps,
            self.cfg.sampling,
            &self.online.slave,
            &self.online.master,
        )
        .stage("train")
    }

    /// Which twin counts as the coarse FOM: the one with fewer unknowns.
    fn slave_res_is_coarse(&self) -> bool {
        let n = |p: &DnProblem| p.slave.sets.n_total + p.master.sets.n_total;
        n(&self.twins.slave_res) <= n(&self.twins.master_res)
    }

    /// Solves the two conforming FOMs for each test parameter.
    pub fn references(&self, test: &[ParameterSample]) -> Result<Vec<Reference>> {
        let dn = self.cfg.dn();
        let run = |p: &DnProblem, mu: &ParameterSample| -> Result<Vec<FomState>> {
            let states = match &self.cfg.time {
                Some(s) => p.solve_unsteady(mu, &dn, s)?,
                None => vec![p.solve(mu, &dn)?],
            };
            states.into_iter().map(|s| s.require_converged(mu)).collect()
        };
        test.par_iter()
            .map(|mu| {
                Ok(Reference {
                    mu: mu.clone(),
                    slave_res: run(&self.twins.slave_res, mu)?,
                    master_res: run(&self.twins.master_res, mu)?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .stage("reference FOM")
    }

    /// Online queries of `model` against precomputed references.
    pub fn evaluate(&self, model: &RomModel, refs: &[Reference]) -> Result<Vec<BenchRow>> {
        let dn = self.cfg.dn();
        let coarse_is_slave = self.slave_res_is_coarse();
        let per_mu: Vec<Vec<BenchRow>> = refs
            .par_iter()
            .map(|r| -> Result<Vec<BenchRow>> {
                let states: Vec<RomState> = match &self.cfg.time {
                    Some(s) => rom_solve_unsteady(model, &r.mu, &dn, s)?,
                    None => vec![rom_solve(model, &r.mu, &dn)?],
                };
                let unsteady = self.cfg.time.is_some();
                let mut rows = Vec::with_capacity(states.len());
                for (n, st) in states.iter().enumerate() {
                    let (a, b) = (&r.slave_res[n], &r.master_res[n]);
                    let (u1, u2) = reconstruct(model, st);
                    let (coarse, fine) = if coarse_is_slave { (a, b) } else { (b, a) };
                    rows.push(BenchRow {
                        mu: r.mu.clone(),
                        t_index: unsteady.then_some(n + 1),
                        h1_err_slave: h1_error(&self.twins.slave_res.slave, &a.u1_full, &u1)?,
                        h1_err_master: h1_error(&self.twins.master_res.master, &b.u2_full, &u2)?,
                        iters_rom: st.iters,
                        converged_rom: st.converged,
                        iters_fom_coarse: coarse.iters,
                        iters_fom_fine: fine.iters,
                        t_fom_coarse: positive(coarse.wall_time_s),
                        t_fom_fine: positive(fine.wall_time_s),
                        t_rom_online: positive(st.timings.total_s),
                    });
                }
                Ok(rows)
            })
            .collect::<Result<_>>()
            .stage("online")?;
        Ok(per_mu.into_iter().flatten().collect())
    }

    pub fn dofs(&self) -> Dofs {
        let n = |o: &AssembledOperators| o.sets.n_total;
        let (s, m) = (&self.twins.slave_res, &self.twins.master_res);
        let (coarse, fine) = if self.slave_res_is_coarse() { (s, m) } else { (m, s) };
        Dofs {
            rom_slave: n(&self.online.slave),
            rom_master: n(&self.online.master),
            fom_coarse: [n(&coarse.slave), n(&coarse.master)],
            fom_fine: [n(&fine.slave), n(&fine.master)],
        }
    }
}

/// Clock readings are strictly positive in reports.
fn positive(t: f64) -> f64 {
    t.max(1e-9)
}

/// Relative H1 error; when the reference vanishes (e.g. before a source
/// switches on) the absolute H1 norm of the approximation is reported.
fn h1_error(ops: &AssembledOperators, reference: &DVector<f64>, approx: &DVector<f64>) -> Result<f64> {
    match ops.h1_relative_error(reference, approx) {
        Err(Error::ZeroNorm) => {
            let k = crate::sparse::spmv(&ops.k, approx.as_slice());
            let m = crate::sparse::spmv(&ops.m, approx.as_slice());
            Ok((approx.dot(&k) + approx.dot(&m)).max(0.0).sqrt())
        }
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dofs {
    pub rom_slave: usize,
    pub rom_master: usize,
    pub fom_coarse: [usize; 2],
    pub fom_fine: [usize; 2],
}

/// One online query (one time step for unsteady problems).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mu: ParameterSample,
    pub t_index: Option<usize>,
    pub h1_err_slave: f64,
    pub h1_err_master: f64,
    pub iters_rom: usize,
    pub converged_rom: bool,
    pub iters_fom_coarse: usize,
    pub iters_fom_fine: usize,
    pub t_fom_coarse: f64,
    pub t_fom_fine: f64,
    pub t_rom_online: f64,
}

/// Flat CSV record; column order is part of the report schema.
#[derive(Serialize, Deserialize)]
struct CsvRow {
    alpha: f64,
    beta: f64,
    gamma1: f64,
    gamma2: f64,
    t_index: Option<usize>,
    h1_err_slave: f64,
    h1_err_master: f64,
    iters_rom: usize,
    converged_rom: bool,
    iters_fom_coarse: usize,
    iters_fom_fine: usize,
    t_fom_coarse: f64,
    t_fom_fine: f64,
    t_rom_online: f64,
}

/// Columns that do not depend on wall-clock time.
pub const DETERMINISTIC_COLUMNS: [&str; 11] = [
    "alpha",
    "beta",
    "gamma1",
    "gamma2",
    "t_index",
    "h1_err_slave",
    "h1_err_master",
    "iters_rom",
    "converged_rom",
    "iters_fom_coarse",
    "iters_fom_fine",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub schema: String,
    pub problem: ProblemKind,
    pub ranks: Ranks,
    pub dofs: Dofs,
    pub n_train: usize,
    pub n_test: usize,
    pub n_rows: usize,
    pub n_rom_converged: usize,
    pub mean_err_slave: Option<f64>,
    pub mean_err_master: Option<f64>,
    pub max_err_slave: Option<f64>,
    pub max_err_master: Option<f64>,
    pub mean_iters_rom: Option<f64>,
    pub mean_iters_fom_coarse: Option<f64>,
    pub mean_iters_fom_fine: Option<f64>,
    /// Mean over rows of `iters_rom / iters_fom`.
    pub iter_ratio_coarse: Option<f64>,
    pub iter_ratio_fine: Option<f64>,
    /// Total FOM time over total ROM online time.
    pub speedup_coarse: Option<f64>,
    pub speedup_fine: Option<f64>,
    pub t_snapshots_s: f64,
    pub t_train_s: f64,
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn max(it: impl Iterator<Item = f64>) -> Option<f64> {
    it.fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

/// Aggregates shared by bench summaries and sweep rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_err_slave: Option<f64>,
    pub mean_err_master: Option<f64>,
    pub mean_iters_rom: Option<f64>,
    pub iter_ratio_coarse: Option<f64>,
    pub iter_ratio_fine: Option<f64>,
    pub speedup_coarse: Option<f64>,
    pub speedup_fine: Option<f64>,
    pub n_rom_converged: usize,
}

impl Aggregates {
    pub fn of(rows: &[BenchRow]) -> Self {
        let total = |f: fn(&BenchRow) -> f64| rows.iter().map(f).sum::<f64>();
        let t_rom = total(|r| r.t_rom_online);
        let speedup = |t: f64| (!rows.is_empty()).then(|| t / t_rom);
        Aggregates {
            mean_err_slave: mean(rows.iter().map(|r| r.h1_err_slave)),
            mean_err_master: mean(rows.iter().map(|r| r.h1_err_master)),
            mean_iters_rom: mean(rows.iter().map(|r| r.iters_rom as f64)),
            iter_ratio_coarse: mean(rows.iter().map(|r| r.iters_rom as f64 / r.iters_fom_coarse as f64)),
            iter_ratio_fine: mean(rows.iter().map(|r| r.iters_rom as f64 / r.iters_fom_fine as f64)),
            speedup_coarse: speedup(total(|r| r.t_fom_coarse)),
            speedup_fine: speedup(total(|r| r.t_fom_fine)),
            n_rom_converged: rows.iter().filter(|r| r.converged_rom).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub summary: BenchSummary,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    fn new(exp: &Experiment, model: &RomModel, rows: Vec<BenchRow>, t_snapshots_s: f64, t_train_s: f64) -> Self {
        let a = Aggregates::of(&rows);
        let summary = BenchSummary {
            schema: REPORT_SCHEMA.into(),
            problem: exp.cfg.problem,
            ranks: model.ranks(),
            dofs: exp.dofs(),
            n_train: exp.cfg.n_train,
            n_test: exp.cfg.n_test,
            n_rows: rows.len(),
            n_rom_converged: a.n_rom_converged,
            mean_err_slave: a.mean_err_slave,
            mean_err_master: a.mean_err_master,
            max_err_slave: max(rows.iter().map(|r| r.h1_err_slave)),
            max_err_master: max(rows.iter().map(|r| r.h1_err_master)),
            mean_iters_rom: a.mean_iters_rom,
            mean_iters_fom_coarse: mean(rows.iter().map(|r| r.iters_fom_coarse as f64)),
            mean_iters_fom_fine: mean(rows.iter().map(|r| r.iters_fom_fine as f64)),
            iter_ratio_coarse: a.iter_ratio_coarse,
            iter_ratio_fine: a.iter_ratio_fine,
            speedup_coarse: a.speedup_coarse,
            speedup_fine: a.speedup_fine,
            t_snapshots_s,
            t_train_s,
        };
        BenchReport { summary, rows }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(CsvRow {
                alpha: r.mu.alpha,
                beta: r.mu.beta,
                gamma1: r.mu.gamma1,
                gamma2: r.mu.gamma2,
                t_index: r.t_index,
                h1_err_slave: r.h1_err_slave,
                h1_err_master: r.h1_err_master,
                iters_rom: r.iters_rom,
                converged_rom: r.converged_rom,
                iters_fom_coarse: r.iters_fom_coarse,
                iters_fom_fine: r.iters_fom_fine,
                t_fom_coarse: r.t_fom_coarse,
                t_fom_fine: r.t_fom_fine,
                t_rom_online: r.t_rom_online,
            })?;
        }
        if self.rows.is_empty() {
            w.write_record(csv_header())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `report.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_csv(&dir.join("report.csv"))?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)?)?;
        Ok(())
    }
}

fn csv_header() -> [&'static str; 14] {
    [
        "alpha",
        "beta",
        "gamma1",
        "gamma2",
        "t_index",
        "h1_err_slave",
        "h1_err_master",
        "iters_rom",
        "converged_rom",
        "iters_fom_coarse",
        "iters_fom_fine",
        "t_fom_coarse",
        "t_fom_fine",
        "t_rom_online",
    ]
}

/// Reads the deterministic columns of a report CSV, one string row per record.
pub fn read_deterministic_columns(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != csv_header() {
        return Err(Error::Format(format!("{} does not follow {REPORT_SCHEMA}", path.display())));
    }
    let keep: Vec<usize> = DETERMINISTIC_COLUMNS
        .iter()
        .map(|c| headers.iter().position(|h| h == *c).unwrap())
        .collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(keep.iter().map(|&i| rec[i].to_string()).collect());
    }
    Ok(out)
}

/// Paths of the artifacts written under an output directory.
pub struct ArtifactPaths {
    pub root: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: &Path) -> Self {
        ArtifactPaths { root: root.to_path_buf() }
    }
    pub fn snapshots(&self) -> PathBuf {
        self.root.join("snapshots")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
}

/// Loads snapshots from `out/snapshots` when present and consistent with the
/// configuration, otherwise generates and stores them. Returns the set and the
/// generation time (zero when loaded).
pub fn snapshots_stage(exp: &Experiment, out: Option<&Path>) -> Result<(SnapshotSet, f64)> {
    if let Some(dir) = out {
        let paths = ArtifactPaths::new(dir);
        let p = paths.snapshots();
        let same_setup = ExperimentConfig::load(&paths.config())
            .map_or(false, |stored| snapshot_key(&stored) == snapshot_key(&exp.cfg));
        if same_setup && p.join("manifest.json").exists() {
            let set = SnapshotSet::load(&p).stage("load snapshots")?;
            let expected = exp.cfg.train_params()?;
            let base: Vec<ParameterSample> = set
                .params
                .iter()
                .filter(|q| q.t_index.map_or(true, |t| t == 1))
                .map(|q| ParameterSample { t_index: None, ..q.clone() })
                .collect();
            if base == expected {
                write_config(exp, dir)?;
                return Ok((set, 0.0));
            }
        }
    }
    let start = Instant::now();
    let set = exp.snapshots()?;
    let t = start.elapsed().as_secs_f64();
    if let Some(dir) = out {
        write_config(exp, dir)?;
        set.save(&ArtifactPaths::new(dir).snapshots()).stage("save snapshots")?;
    }
    Ok((set, t))
}

/// The config with every field that cannot change the snapshots reset.
fn snapshot_key(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        n_test: 0,
        tolerances: Tolerances::uniform(0.0),
        caps: RankCaps::default(),
        sampling: ResidualSampling::default(),
        sweep: None,
        output_dir: None,
        ..cfg.clone()
    }
}

fn write_config(exp: &Experiment, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(ArtifactPaths::new(dir).config(), serde_json::to_string_pretty(&exp.cfg)?)?;
    Ok(())
}

/// Snapshots plus training; the model is stored under `out/model`.
pub fn train_stage(exp: &Experiment, out: Option<&Path>) -> Result<(RomModel, f64, f64)> {
    let (snaps, t_snap) = snapshots_stage(exp, out)?;
    let start = Instant::now();
    let model = exp.train(&snaps)?;
    let t_train = start.elapsed().as_secs_f64();
    if let Some(dir) = out {
        write_config(exp, dir)?;
        model.save(&ArtifactPaths::new(dir).model()).stage("save model")?;
    }
    Ok((model, t_snap, t_train))
}

/// Full pipeline: snapshots, training, test queries and coarse/fine FOM
/// references. Artifacts go to `out` when given.
pub fn run_pipeline(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<BenchReport> {
    let exp = Experiment::build(cfg)?;
    let (model, t_snap, t_train) = train_stage(&exp, out)?;
    let test = cfg.test_params()?;
    let refs = exp.references(&test)?;
    let rows = exp.evaluate(&model, &refs)?;
    let report = BenchReport::new(&exp, &model, rows, t_snap, t_train);
    if let Some(dir) = out {
        report.write(dir).stage("write report")?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ranks: Ranks,
    #[serde(flatten)]
    pub agg: Aggregates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    pub trained_ranks: Ranks,
    pub rows: Vec<SweepRow>,
}

#[derive(Serialize)]
struct SweepCsvRow {
    n1: usize,
    n2: usize,
    m_d: usize,
    m_n: usize,
    mean_err_slave: Option<f64>,
    mean_err_master: Option<f64>,
    mean_iters_rom: Option<f64>,
    iter_ratio_coarse: Option<f64>,
    iter_ratio_fine: Option<f64>,
    speedup_coarse: Option<f64>,
    speedup_fine: Option<f64>,
    n_rom_converged: usize,
}

impl SweepReport {
    pub fn get(&self, r: Ranks) -> Option<&SweepRow> {
        self.rows.iter().find(|row| row.ranks == r)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
        for r in &self.rows {
            w.serialize(SweepCsvRow {
                n1: r.ranks.n1,
                n2: r.ranks.n2,
                m_d: r.ranks.m_d,
                m_n: r.ranks.m_n,
                mean_err_slave: r.agg.mean_err_slave,
                mean_err_master: r.agg.mean_err_master,
                mean_iters_rom: r.agg.mean_iters_rom,
                iter_ratio_coarse: r.agg.iter_ratio_coarse,
                iter_ratio_fine: r.agg.iter_ratio_fine,
                speedup_coarse: r.agg.speedup_coarse,
                speedup_fine: r.agg.speedup_fine,
                n_rom_converged: r.agg.n_rom_converged,
            })?;
        }
        w.flush()?;
        fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Truncates a trained model to every grid point and reruns the test
/// queries. Grid points above the trained ranks are rejected before any
/// query runs.
pub fn sweep_with(exp: &Experiment, model: &RomModel, refs: &[Reference], grid: &SweepGrid) -> Result<SweepReport> {
    let trained = model.ranks();
    let points = grid.points();
    for r in &points {
        if r.n1 > trained.n1 || r.n2 > trained.n2 || r.m_d > trained.m_d || r.m_n > trained.m_n {
            return Err(Error::RankExceeded {
                what: "sweep grid",
                requested: r.n1.max(r.n2).max(r.m_d),
                available: trained.n1.min(trained.n2).min(trained.m_d).min(trained.m_n),
            }
            .in_stage("sweep"));
        }
    }
    let rows = points
        .par_iter()
        .map(|&r| {
            let m = model.with_ranks(r)?;
            let rows = exp.evaluate(&m, refs)?;
            Ok(SweepRow {
                ranks: r,
                agg: Aggregates::of(&rows),
            })
        })
        .collect::<Result<Vec<_>>>()
        .stage("sweep")?;
    Ok(SweepReport {
        schema: "ddrom-sweep/1".into(),
        trained_ranks: trained,
        rows,
    })
}

/// Trains the maximal model of `cfg` and evaluates its sweep grid.
pub fn sweep_hyperparams(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SweepReport> {
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("configuration has no sweep grid".into()))?;
    let exp = Experiment::build(cfg)?;
    let (model, _, _) = train_stage(&exp, out)?;
    let refs = exp.references(&cfg.test_params()?)?;
    let report = sweep_with(&exp, &model, &refs, grid)?;
    if let Some(dir) = out {
        report.write(dir).stage("write sweep")?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::DirichletFace;
    use proptest::prelude::*;

    pub(crate) fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            problem: ProblemKind::DiffusionReaction,
            geometry: BoxGeometry::new(vec![0.0, 0.0], vec![2.0, 1.0], 0, 1.0).unwrap(),
            boundary: BoundaryLayout {
                dirichlet: vec![
                    DirichletFace {
                        axis: 0,
                        upper: false,
                        value: 1.0,
                    },
                    DirichletFace {
                        axis: 0,
                        upper: true,
                        value: 0.0,
                    },
                ],
            },
            source: Some(SourceSpec::Constant { value: 1.0 }),
            cells_slave: vec![6, 6],
            cells_master: vec![6, 6],
            param_box: vec![[1.0, 10.0], [1.0, 10.0]],
            n_train: 6,
            n_test: 3,
            seed: 7,
            tolerances: Tolerances::uniform(0.0),
            caps: RankCaps::default(),
            tol_interface: 1e-10,
            omega: 0.25,
            max_iters: 200,
            sampling: ResidualSampling::PrimalRows,
            time: None,
            sweep: None,
            output_dir: None,
        }
    }

    #[test]
    fn lhs_single_point_in_box() {
        let p = lhs_sample(&[[0.0, 1.0], [0.0, 1.0]], 1, 3).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p[0].iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn lhs_quarters() {
        let p = lhs_sample(&[[0.0, 1.0]], 4, 11).unwrap();
        let mut q: Vec<usize> = p.iter().map(|x| (x[0] * 4.0) as usize).collect();
        q.sort();
        assert_eq!(q, vec![0, 1, 2, 3]);
    }

    #[test]
    fn lhs_degenerate_side_is_constant_and_bad_box_rejected() {
        let p = lhs_sample(&[[2.0, 2.0], [0.0, 1.0]], 5, 0).unwrap();
        assert!(p.iter().all(|x| x[0] == 2.0));
        assert!(lhs_sample(&[[1.0, 0.0]], 3, 0).is_err());
        assert!(lhs_sample(&[[0.0, 1.0]], 0, 0).is_err());
    }

    #[test]
    fn lhs_150_points_fill_150_strata() {
        let n = 150;
        let p = lhs_sample(&[[1.0, 10.0], [1.0, 10.0]], n, 5).unwrap();
        for d in 0..2 {
            let mut hit = vec![false; n];
            for x in &p {
                let s = ((x[d] - 1.0) / 9.0 * n as f64) as usize;
                hit[s.min(n - 1)] = true;
            }
            assert!(hit.iter().all(|&h| h));
        }
    }

    proptest! {
        #[test]
        fn lhs_stratified_and_deterministic(n in 1usize..40, seed in any::<u64>(), lo in -5.0f64..5.0, w in 0.1f64..10.0) {
            let b = [[lo, lo + w]];
            let p = lhs_sample(&b, n, seed).unwrap();
            prop_assert_eq!(&p, &lhs_sample(&b, n, seed).unwrap());
            let mut strata: Vec<usize> = p.iter().map(|x| (((x[0] - lo) / w * n as f64) as usize).min(n - 1)).collect();
            strata.sort();
            prop_assert_eq!(strata, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        assert!(c.validate().is_ok());
        c.n_train = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.param_box = vec![[1.0, 10.0]];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.problem = ProblemKind::Heat;
        c.param_box = vec![[0.5, 5.0]];
        assert!(c.validate().is_err());
        c.time = Some(TimeScheme::backward_euler(0.01, 3));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_json_roundtrip() {
        let c = small_config();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn pipeline_full_rank_conforming_is_exact() {
        let report = run_pipeline(&small_config(), None).unwrap();
        assert_eq!(report.rows.len(), 3);
        for r in &report.rows {
            assert!(r.h1_err_slave <= 1e-8, "{}", r.h1_err_slave);
            assert!(r.h1_err_master <= 1e-8, "{}", r.h1_err_master);
            assert!(r.converged_rom);
            assert!(r.t_rom_online > 0.0 && r.t_fom_fine > 0.0 && r.t_fom_coarse > 0.0);
        }
    }

    #[test]
    fn empty_test_set_still_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_config();
        c.n_test = 0;
        let report = run_pipeline(&c, Some(dir.path())).unwrap();
        assert!(report.rows.is_empty());
        assert!(report.summary.mean_err_slave.is_none());
        let paths = ArtifactPaths::new(dir.path());
        assert!(paths.model().join("manifest.json").exists());
        assert!(paths.snapshots().join("manifest.json").exists());
        assert!(dir.path().join("report.csv").exists());
        assert!(read_deterministic_columns(&dir.path().join("report.csv")).unwrap().is_empty());
    }

    #[test]
    fn stored_snapshots_reused_only_for_same_setup() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_config();
        let (first, _) = snapshots_stage(&Experiment::build(&c).unwrap(), Some(dir.path())).unwrap();
        c.n_test = 5;
        let (_, t) = snapshots_stage(&Experiment::build(&c).unwrap(), Some(dir.path())).unwrap();
        assert_eq!(t, 0.0);
        c.cells_master = vec![8, 6];
        let (second, t) = snapshots_stage(&Experiment::build(&c).unwrap(), Some(dir.path())).unwrap();
        assert!(t > 0.0);
        assert_ne!(first.s2.nrows(), second.s2.nrows());
    }

    #[test]
    fn sweep_point_matches_pipeline() {
        let mut c = small_config();
        c.caps = RankCaps {
            n1: Some(3),
            n2: Some(3),
            m_d: Some(3),
            m_n: Some(3),
        };
        let full = run_pipeline(&c, None).unwrap();
        let r = full.summary.ranks;
        c.sweep = Some(SweepGrid {
            n1: vec![r.n1],
            n2: vec![r.n2],
            m: vec![r.m_d],
        });
        let sweep = sweep_hyperparams(&c, None).unwrap();
        let row = sweep.get(r).unwrap();
        assert_eq!(row.agg.mean_err_slave, full.summary.mean_err_slave);
        assert_eq!(row.agg.mean_err_master, full.summary.mean_err_master);
        assert_eq!(row.agg.mean_iters_rom, full.summary.mean_iters_rom);
    }

    #[test]
    fn sweep_rejects_ranks_above_trained() {
        let mut c = small_config();
        c.sweep = Some(SweepGrid {
            n1: vec![1000],
            n2: vec![1],
            m: vec![1],
        });
        let err = sweep_hyperparams(&c, None).unwrap_err();
        assert!(err.to_string().contains("sweep"), "{err}");
    }

    #[test]
    fn unsteady_rows_per_step() {
        let mut c = small_config();
        c.problem = ProblemKind::Heat;
        c.param_box = vec![[0.5, 5.0]];
        c.source = None;
        c.boundary = BoundaryLayout::default();
        c.geometry = BoxGeometry::new(vec![-0.5, -0.5], vec![1.5, 0.5], 0, 0.5).unwrap();
        c.n_train = 2;
        c.n_test = 2;
        c.time = Some(TimeScheme::backward_euler(0.05, 8));
        let report = run_pipeline(&c, None).unwrap();
        assert_eq!(report.rows.len(), 16);
        assert_eq!(report.rows[7].t_index, Some(8));
        // source is off for t <= 0.2
        for r in report.rows.iter().filter(|r| r.t_index.unwrap() <= 4) {
            assert_eq!(r.h1_err_slave, 0.0);
        }
    }
}
