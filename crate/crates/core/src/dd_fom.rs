//! Full-order Dirichlet-Neumann iteration, the monolithic reference solver and
//! snapshot generation.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{AssembledOperators, OperatorCoeffs, ParameterSample, Region, SourceSpec, TimeScheme};
use crate::mesh::{
    build_global_mesh, build_subdomain_meshes, conformity_check, extend_resolution, split_cells, BoundaryLayout,
    BoxGeometry, Conformity, Mesh, Side,
};
use crate::sparse::{spmv, submatrix, Csr, SpdSolver};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    Zero,
    /// Master interface trace, one value per master interface node.
    Trace(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnConfig {
    pub omega: f64,
    pub tol_interface: f64,
    pub max_iters: usize,
    pub initial_guess: InitialGuess,
}

impl Default for DnConfig {
    fn default() -> Self {
        DnConfig {
            omega: 0.25,
            tol_interface: 1e-10,
            max_iters: 200,
            initial_guess: InitialGuess::Zero,
        }
    }
}

impl DnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::Config(format!("omega must lie in (0, 1], got {}", self.omega)));
        }
        if !(self.tol_interface > 0.0) || self.max_iters == 0 {
            return Err(Error::Config("need tol_interface > 0 and max_iters >= 1".into()));
        }
        Ok(())
    }

    pub(crate) fn initial_trace(&self, n: usize) -> Result<DVector<f64>> {
        match &self.initial_guess {
            InitialGuess::Zero => Ok(DVector::zeros(n)),
            InitialGuess::Trace(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
            InitialGuess::Trace(v) => Err(Error::Dimension(format!(
                "initial guess has {} entries, master interface has {n}",
                v.len()
            ))),
        }
    }
}

/// Maps between the two interface node sets.
#[derive(Clone, Debug)]
pub enum InterfaceTransfer {
    Identity,
    /// `r12` takes master traces to slave nodes, `r21` slave data to master nodes.
    Interpolation { r12: DMatrix<f64>, r21: DMatrix<f64> },
}

impl InterfaceTransfer {
    /// Identity for conforming interfaces, multilinear interpolation otherwise.
    pub fn between(slave: &Mesh, master: &Mesh) -> Result<Self> {
        match conformity_check(slave, master) {
            Conformity::Conforming => Ok(InterfaceTransfer::Identity),
            Conformity::NonConforming => Ok(InterfaceTransfer::Interpolation {
                r12: interpolation_matrix(master, slave)?,
                r21: interpolation_matrix(slave, master)?,
            }),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, InterfaceTransfer::Identity)
    }

    pub fn to_slave(&self, v2: &DVector<f64>) -> DVector<f64> {
        match self {
            InterfaceTransfer::Identity => v2.clone(),
            InterfaceTransfer::Interpolation { r12, .. } => r12 * v2,
        }
    }

    pub fn to_master(&self, v1: &DVector<f64>) -> DVector<f64> {
        match self {
            InterfaceTransfer::Identity => v1.clone(),
            InterfaceTransfer::Interpolation { r21, .. } => r21 * v1,
        }
    }
}

/// Multilinear interpolation from the interface nodes of `from` to those of `to`.
pub fn interpolation_matrix(from: &Mesh, to: &Mesh) -> Result<DMatrix<f64>> {
    let axes: Vec<usize> = (0..from.dim).filter(|&a| a != from.interface_axis).collect();
    let shape: Vec<usize> = axes.iter().map(|&a| from.shape[a]).collect();
    let n_from: usize = shape.iter().product();
    let targets = to.interface_coords();
    if n_from == 0 || targets.is_empty() {
        return Err(Error::Mesh("empty interface".into()));
    }
    let mut r = DMatrix::zeros(targets.len(), n_from);
    for (row, x) in targets.iter().enumerate() {
        let mut lower = Vec::with_capacity(axes.len());
        let mut frac = Vec::with_capacity(axes.len());
        for &a in &axes {
            let c = &from.axis_coords[a];
            let i = c.partition_point(|&v| v <= x[a]).clamp(1, c.len() - 1) - 1;
            let t = ((x[a] - c[i]) / (c[i + 1] - c[i])).clamp(0.0, 1.0);
            lower.push(i);
            frac.push(t);
        }
        for corner in 0..1usize << axes.len() {
            let mut w = 1.0;
            let mut col = 0;
            let mut stride = 1;
            for k in 0..axes.len() {
                let up = (corner >> k) & 1;
                w *= if up == 1 { frac[k] } else { 1.0 - frac[k] };
                col += (lower[k] + up) * stride;
                stride *= shape[k];
            }
            if w != 0.0 {
                r[(row, col)] += w;
            }
        }
    }
    Ok(r)
}

/// Converged (or last) iterate of a full-order DN solve. Full vectors are
/// indexed by mesh node; interface vectors follow the interface index sets.
#[derive(Clone, Debug)]
pub struct FomState {
    pub u1_full: DVector<f64>,
    pub u2_full: DVector<f64>,
    pub u_gamma1: DVector<f64>,
    pub u_gamma2: DVector<f64>,
    pub r_gamma1: DVector<f64>,
    pub r_gamma2: DVector<f64>,
    pub z_gamma1: DVector<f64>,
    pub z_gamma2: DVector<f64>,
    /// Relaxed master trace after the last iteration.
    pub lambda: DVector<f64>,
    pub iters: usize,
    pub converged: bool,
    pub gap_history: Vec<f64>,
    pub wall_time_s: f64,
}

impl FomState {
    pub fn final_gap(&self) -> f64 {
        self.gap_history.last().copied().unwrap_or(f64::NAN)
    }

    /// Turns a flagged non-converged state into an error.
    pub fn require_converged(self, mu: &ParameterSample) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                iters: self.iters,
                gap: self.final_gap(),
                mu: mu.to_string(),
            })
        }
    }
}

/// One subdomain system `A(mu)` with its factorized internal block.
pub(crate) struct SubdomainSystem<'a> {
    ops: &'a AssembledOperators,
    solver: SpdSolver,
    /// `A(internal, gamma)`; only used on the slave side.
    a_ig: Csr,
    /// `A(gamma, all)`.
    a_gamma: Csr,
    /// `A(internal, D) g_D`.
    lift: DVector<f64>,
    /// Positions of the interface nodes inside the internal block (master only).
    gamma_in_internal: Vec<usize>,
}

impl<'a> SubdomainSystem<'a> {
    pub(crate) fn new(ops: &'a AssembledOperators, c: OperatorCoeffs) -> Result<Self> {
        let a = ops.operator(c);
        let s = &ops.sets;
        let solver = SpdSolver::factor(&submatrix(&a, &s.internal, &s.internal))?;
        let lift = spmv(&submatrix(&a, &s.internal, &s.dirichlet), ops.g_dirichlet.as_slice());
        let gamma_in_internal = s.gamma.iter().filter_map(|&g| s.internal_position(g)).collect();
        Ok(SubdomainSystem {
            ops,
            solver,
            a_ig: submatrix(&a, &s.internal, &s.gamma),
            a_gamma: submatrix(&a, &s.gamma, &s.all),
            lift,
            gamma_in_internal,
        })
    }

    fn scatter(&self, internal: &DVector<f64>, gamma: Option<&DVector<f64>>) -> DVector<f64> {
        let s = &self.ops.sets;
        let mut u = DVector::zeros(s.n_total);
        for (p, &i) in s.internal.iter().enumerate() {
            u[i] = internal[p];
        }
        if let Some(g) = gamma {
            for (p, &i) in s.gamma.iter().enumerate() {
                u[i] = g[p];
            }
        }
        for (p, &i) in s.dirichlet.iter().enumerate() {
            u[i] = self.ops.g_dirichlet[p];
        }
        u
    }

    /// Dirichlet problem on the slave: returns the full field and `(A u - F)|Gamma`.
    fn solve_slave(&self, load: &DVector<f64>, trace: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let s = &self.ops.sets;
        let coupling = spmv(&self.a_ig, trace.as_slice());
        let rhs = DVector::from_iterator(s.n_internal, s.internal.iter().map(|&i| load[i])) - &self.lift - coupling;
        let ui = self.solver.solve(&rhs);
        let u = self.scatter(&ui, Some(trace));
        let r = spmv(&self.a_gamma, u.as_slice())
            - DVector::from_iterator(s.n_gamma, s.gamma.iter().map(|&i| load[i]));
        (u, r)
    }

    /// Neumann problem on the master with interface residual `r_gamma`.
    fn solve_master(&self, load: &DVector<f64>, r_gamma: &DVector<f64>) -> DVector<f64> {
        let s = &self.ops.sets;
        let mut rhs = DVector::from_iterator(s.n_internal, s.internal.iter().map(|&i| load[i])) - &self.lift;
        for (p, &q) in self.gamma_in_internal.iter().enumerate() {
            rhs[q] += r_gamma[p];
        }
        let ui = self.solver.solve(&rhs);
        self.scatter(&ui, None)
    }

    /// Undecomposed solve (no interface unknowns distinguished).
    fn solve_plain(&self, load: &DVector<f64>) -> DVector<f64> {
        let s = &self.ops.sets;
        let rhs = DVector::from_iterator(s.n_internal, s.internal.iter().map(|&i| load[i])) - &self.lift;
        self.scatter(&self.solver.solve(&rhs), None)
    }
}

fn gather(u: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| u[i]))
}

/// The DN loop for given effective loads (source plus any previous-step terms).
fn dn_loop(
    s1: &SubdomainSystem,
    s2: &SubdomainSystem,
    load1: &DVector<f64>,
    load2: &DVector<f64>,
    transfer: &InterfaceTransfer,
    cfg: &DnConfig,
    mut lambda: DVector<f64>,
) -> FomState {
    let start = Instant::now();
    let (ops1, ops2) = (s1.ops, s2.ops);
    let mut gap_history = Vec::new();
    let mut iters = 0;
    loop {
        iters += 1;
        let u_gamma1 = transfer.to_slave(&lambda);
        let (u1, r_gamma1) = s1.solve_slave(load1, &u_gamma1);
        let z_gamma1 = ops1.riesz(&r_gamma1);
        let r_gamma2 = -(&ops2.m_gamma * transfer.to_master(&z_gamma1));
        let u2 = s2.solve_master(load2, &r_gamma2);
        let u_gamma2 = gather(&u2, &ops2.sets.gamma);
        let gap = (&u_gamma1 - transfer.to_slave(&u_gamma2)).norm();
        gap_history.push(gap);
        lambda = &u_gamma2 * cfg.omega + &lambda * (1.0 - cfg.omega);
        let converged = gap < cfg.tol_interface;
        if converged || iters >= cfg.max_iters {
            let z_gamma2 = ops2.riesz(&r_gamma2);
            return FomState {
                u1_full: u1,
                u2_full: u2,
                u_gamma1,
                u_gamma2,
                r_gamma1,
                r_gamma2,
                z_gamma1,
                z_gamma2,
                lambda,
                iters,
                converged,
                gap_history,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
        }
    }
}

fn check_pair(ops1: &AssembledOperators, ops2: &AssembledOperators, transfer: &InterfaceTransfer) -> Result<()> {
    if ops1.sets.side != Side::Slave || ops2.sets.side != Side::Master {
        return Err(Error::Config("expected (slave, master) operators".into()));
    }
    let (n1, n2) = (ops1.sets.n_gamma, ops2.sets.n_gamma);
    let ok = match transfer {
        InterfaceTransfer::Identity => n1 == n2,
        InterfaceTransfer::Interpolation { r12, r21 } => r12.shape() == (n1, n2) && r21.shape() == (n2, n1),
    };
    if !ok || n1 == 0 {
        return Err(Error::Dimension(format!(
            "interface transfer does not match interfaces of size {n1} and {n2}"
        )));
    }
    Ok(())
}

/// Steady Dirichlet-Neumann solve. Non-convergence is flagged on the state.
pub fn dn_solve_fom(
    ops1: &AssembledOperators,
    ops2: &AssembledOperators,
    mu: &ParameterSample,
    cfg: &DnConfig,
    transfer: &InterfaceTransfer,
) -> Result<FomState> {
    cfg.validate()?;
    mu.validate()?;
    check_pair(ops1, ops2, transfer)?;
    let start = Instant::now();
    let c = OperatorCoeffs::steady(mu);
    let s1 = SubdomainSystem::new(ops1, c)?;
    let s2 = SubdomainSystem::new(ops2, c)?;
    let lambda = cfg.initial_trace(ops2.sets.n_gamma)?;
    let mut state = dn_loop(&s1, &s2, &ops1.load(mu, 0.0), &ops2.load(mu, 0.0), transfer, cfg, lambda);
    state.wall_time_s = start.elapsed().as_secs_f64();
    Ok(state)
}

/// Backward Euler in time from `u = 0`, one DN loop per step. Each step starts
/// from the previous step's relaxed trace.
pub fn dn_solve_fom_unsteady(
    ops1: &AssembledOperators,
    ops2: &AssembledOperators,
    mu: &ParameterSample,
    cfg: &DnConfig,
    scheme: &TimeScheme,
    transfer: &InterfaceTransfer,
) -> Result<Vec<FomState>> {
    cfg.validate()?;
    mu.validate()?;
    scheme.validate()?;
    check_pair(ops1, ops2, transfer)?;
    let start = Instant::now();
    let c = OperatorCoeffs::backward_euler(mu, scheme.dt);
    let s1 = SubdomainSystem::new(ops1, c)?;
    let s2 = SubdomainSystem::new(ops2, c)?;
    let mut lambda = cfg.initial_trace(ops2.sets.n_gamma)?;
    let mut u1_prev = DVector::zeros(ops1.sets.n_total);
    let mut u2_prev = DVector::zeros(ops2.sets.n_total);
    let mut states = Vec::with_capacity(scheme.n_steps);
    let inv_dt = 1.0 / scheme.dt;
    for n in 1..=scheme.n_steps {
        let t = scheme.time(n);
        let load1 = ops1.load(mu, t) + spmv(&ops1.m, u1_prev.as_slice()) * inv_dt;
        let load2 = ops2.load(mu, t) + spmv(&ops2.m, u2_prev.as_slice()) * inv_dt;
        let mut state = dn_loop(&s1, &s2, &load1, &load2, transfer, cfg, lambda.clone());
        if n == 1 {
            // include factorization cost in the first step
            state.wall_time_s = start.elapsed().as_secs_f64();
        }
        lambda = state.lambda.clone();
        u1_prev = state.u1_full.clone();
        u2_prev = state.u2_full.clone();
        states.push(state);
    }
    Ok(states)
}

/// Slave and master operators with the matching interface transfer.
#[derive(Clone, Debug)]
pub struct DnProblem {
    pub slave: AssembledOperators,
    pub master: AssembledOperators,
    pub transfer: InterfaceTransfer,
}

impl DnProblem {
    pub fn build(
        geom: &BoxGeometry,
        layout: &BoundaryLayout,
        source: &SourceSpec,
        cells_slave: &[usize],
        cells_master: &[usize],
    ) -> Result<Self> {
        let (m1, m2) = build_subdomain_meshes(geom, layout, cells_slave, cells_master)?;
        let transfer = InterfaceTransfer::between(&m1, &m2)?;
        let (slave, master) = rayon::join(
            || AssembledOperators::build(m1, Side::Slave, layout, source, Region::Side(Side::Slave)),
            || AssembledOperators::build(m2, Side::Master, layout, source, Region::Side(Side::Master)),
        );
        Ok(DnProblem {
            slave: slave?,
            master: master?,
            transfer,
        })
    }

    /// Conforming pair whose cell size matches `side` at resolution `cells`
    /// on both subdomains.
    pub fn conforming_twin(
        geom: &BoxGeometry,
        layout: &BoundaryLayout,
        source: &SourceSpec,
        side: Side,
        cells: &[usize],
    ) -> Result<Self> {
        let (c1, c2) = split_cells(geom, &extend_resolution(geom, side, cells)?)?;
        DnProblem::build(geom, layout, source, &c1, &c2)
    }

    pub fn solve(&self, mu: &ParameterSample, cfg: &DnConfig) -> Result<FomState> {
        dn_solve_fom(&self.slave, &self.master, mu, cfg, &self.transfer)
    }

    pub fn solve_unsteady(&self, mu: &ParameterSample, cfg: &DnConfig, scheme: &TimeScheme) -> Result<Vec<FomState>> {
        dn_solve_fom_unsteady(&self.slave, &self.master, mu, cfg, scheme, &self.transfer)
    }
}

/// Undecomposed problem on one global conforming mesh.
#[derive(Clone, Debug)]
pub struct MonolithicProblem {
    pub ops: AssembledOperators,
}

impl MonolithicProblem {
    pub fn build(geom: &BoxGeometry, layout: &BoundaryLayout, source: &SourceSpec, cells: &[usize]) -> Result<Self> {
        let mesh = build_global_mesh(geom, layout, cells)?;
        let region = Region::Split {
            axis: geom.interface_axis,
            coord: geom.interface_coord,
        };
        Ok(MonolithicProblem {
            ops: AssembledOperators::build(mesh, Side::Master, layout, source, region)?,
        })
    }

    pub fn solve(&self, mu: &ParameterSample) -> Result<DVector<f64>> {
        mu.validate()?;
        let sys = SubdomainSystem::new(&self.ops, OperatorCoeffs::steady(mu))?;
        Ok(sys.solve_plain(&self.ops.load(mu, 0.0)))
    }

    pub fn solve_unsteady(&self, mu: &ParameterSample, scheme: &TimeScheme) -> Result<Vec<DVector<f64>>> {
        mu.validate()?;
        scheme.validate()?;
        let sys = SubdomainSystem::new(&self.ops, OperatorCoeffs::backward_euler(mu, scheme.dt))?;
        let mut u = DVector::zeros(self.ops.sets.n_total);
        let mut out = Vec::with_capacity(scheme.n_steps);
        for n in 1..=scheme.n_steps {
            let load = self.ops.load(mu, scheme.time(n)) + spmv(&self.ops.m, u.as_slice()) / scheme.dt;
            u = sys.solve_plain(&load);
            out.push(u.clone());
        }
        Ok(out)
    }

    /// Restricts a global field to the nodes of a conforming subdomain mesh.
    pub fn restrict(&self, u: &DVector<f64>, sub: &Mesh) -> Result<DVector<f64>> {
        let global = &self.ops.mesh;
        let a = global.interface_axis;
        let side = sub.side.ok_or_else(|| Error::Mesh("expected a subdomain mesh".into()))?;
        let offset = match side {
            Side::Slave => 0,
            Side::Master => global.shape[a] - sub.shape[a],
        };
        let tol = 1e-12 * global.nodes.iter().flatten().fold(1.0, |m: f64, x| m.max(x.abs()));
        let mut out = DVector::zeros(sub.n_nodes());
        for node in 0..sub.n_nodes() {
            let mut idx = sub.multi_index(node);
            idx[a] += offset;
            let g = global.node_at(&idx);
            let d = (0..3).map(|k| (global.nodes[g][k] - sub.nodes[node][k]).abs()).fold(0.0, f64::max);
            if d > tol {
                return Err(Error::Mesh("subdomain mesh does not conform to the global mesh".into()));
            }
            out[node] = u[g];
        }
        Ok(out)
    }
}

/// Direct solve of the undecomposed problem on a global mesh with `cells`.
pub fn monolithic_solve(
    geom: &BoxGeometry,
    layout: &BoundaryLayout,
    source: &SourceSpec,
    cells: &[usize],
    mu: &ParameterSample,
) -> Result<(Mesh, DVector<f64>)> {
    let p = MonolithicProblem::build(geom, layout, source, cells)?;
    let u = p.solve(mu)?;
    Ok((p.ops.mesh, u))
}

/// Snapshot matrices, one column per (parameter, time step).
/// Rows: `s1` slave internal unknowns, `s2` master internal unknowns,
/// `s_d` slave interface traces, `s_n` master primal residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSet {
    pub s1: DMatrix<f64>,
    pub s2: DMatrix<f64>,
    pub s_d: DMatrix<f64>,
    pub s_n: DMatrix<f64>,
    pub params: Vec<ParameterSample>,
}

const SNAPSHOT_FORMAT: &str = "ddrom-snapshots/1";

#[derive(Serialize, Deserialize)]
struct SnapshotManifest {
    format: String,
    columns: usize,
    rows: [usize; 4],
    params: Vec<ParameterSample>,
}

const SNAPSHOT_BLOBS: [&str; 4] = ["s1.bin", "s2.bin", "s_d.bin", "s_n.bin"];

impl SnapshotSet {
    pub fn n_columns(&self) -> usize {
        self.params.len()
    }

    fn matrices(&self) -> [&DMatrix<f64>; 4] {
        [&self.s1, &self.s2, &self.s_d, &self.s_n]
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::EmptyTraining);
        }
        if self.matrices().iter().any(|m| m.ncols() != self.params.len()) {
            return Err(Error::Dimension("snapshot column counts differ".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let m = self.matrices();
        let manifest = SnapshotManifest {
            format: SNAPSHOT_FORMAT.into(),
            columns: self.n_columns(),
            rows: [m[0].nrows(), m[1].nrows(), m[2].nrows(), m[3].nrows()],
            params: self.params.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        for (name, mat) in SNAPSHOT_BLOBS.iter().zip(m) {
            write_blob(&dir.join(name), mat)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: SnapshotManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != SNAPSHOT_FORMAT {
            return Err(Error::Format(format!("unsupported snapshot format `{}`", manifest.format)));
        }
        let c = manifest.columns;
        let mut mats = Vec::with_capacity(4);
        for (name, rows) in SNAPSHOT_BLOBS.iter().zip(manifest.rows) {
            mats.push(read_blob(&dir.join(name), rows, c)?);
        }
        let mut it = mats.into_iter();
        let set = SnapshotSet {
            s1: it.next().unwrap(),
            s2: it.next().unwrap(),
            s_d: it.next().unwrap(),
            s_n: it.next().unwrap(),
            params: manifest.params,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Writes a matrix as column-major little-endian `f64`.
pub(crate) fn write_blob(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(m.len() * 8);
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_blob(path: &Path, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() != rows * cols * 8 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, expected {rows}x{cols} doubles",
            path.display(),
            buf.len()
        )));
    }
    let data: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(DMatrix::from_vec(rows, cols, data))
}

/// Problem description for snapshot generation.
#[derive(Clone, Debug)]
pub struct SnapshotPlan<'a> {
    pub geom: &'a BoxGeometry,
    pub layout: &'a BoundaryLayout,
    pub source: &'a SourceSpec,
    pub cells_slave: &'a [usize],
    pub cells_master: &'a [usize],
    pub cfg: &'a DnConfig,
    pub scheme: Option<&'a TimeScheme>,
}

/// The two conforming problems used for snapshots: one at the slave cell
/// size, one at the master cell size.
pub struct TwinProblems {
    pub slave_res: DnProblem,
    pub master_res: DnProblem,
}

impl TwinProblems {
    pub fn build(plan: &SnapshotPlan) -> Result<Self> {
        let slave_res = DnProblem::conforming_twin(plan.geom, plan.layout, plan.source, Side::Slave, plan.cells_slave)?;
        let master_res =
            DnProblem::conforming_twin(plan.geom, plan.layout, plan.source, Side::Master, plan.cells_master)?;
        Ok(TwinProblems { slave_res, master_res })
    }
}

struct Columns {
    s1: Vec<DVector<f64>>,
    s2: Vec<DVector<f64>>,
    s_d: Vec<DVector<f64>>,
    s_n: Vec<DVector<f64>>,
    params: Vec<ParameterSample>,
}

fn snapshot_columns(twins: &TwinProblems, plan: &SnapshotPlan, mu: &ParameterSample) -> Result<Columns> {
    let run = |p: &DnProblem| -> Result<Vec<FomState>> {
        let states = match plan.scheme {
            Some(s) => p.solve_unsteady(mu, plan.cfg, s)?,
            None => vec![p.solve(mu, plan.cfg)?],
        };
        states.into_iter().map(|s| s.require_converged(mu)).collect()
    };
    let (a, b) = rayon::join(|| run(&twins.slave_res), || run(&twins.master_res));
    let (a, b) = (a?, b?);
    let sets1 = &twins.slave_res.slave.sets;
    let sets2 = &twins.master_res.master.sets;
    let mut cols = Columns {
        s1: Vec::new(),
        s2: Vec::new(),
        s_d: Vec::new(),
        s_n: Vec::new(),
        params: Vec::new(),
    };
    for (n, (sa, sb)) in a.iter().zip(&b).enumerate() {
        cols.s1.push(gather(&sa.u1_full, &sets1.internal));
        cols.s_d.push(sa.u_gamma1.clone());
        cols.s2.push(gather(&sb.u2_full, &sets2.internal));
        cols.s_n.push(sb.z_gamma2.clone());
        let mut p = mu.clone();
        if plan.scheme.is_some() {
            p.t_index = Some(n + 1);
        }
        cols.params.push(p);
    }
    Ok(cols)
}

/// Solves the coupled problem twice per parameter on conforming meshes at the
/// slave and master resolutions and collects the snapshot columns in
/// parameter order.
pub fn generate_snapshots(plan: &SnapshotPlan, params: &[ParameterSample]) -> Result<SnapshotSet> {
    if params.is_empty() {
        return Err(Error::EmptyTraining);
    }
    let twins = TwinProblems::build(plan)?;
    generate_snapshots_with(&twins, plan, params)
}

pub fn generate_snapshots_with(twins: &TwinProblems, plan: &SnapshotPlan, params: &[ParameterSample]) -> Result<SnapshotSet> {
    if params.is_empty() {
        return Err(Error::EmptyTraining);
    }
    let per_mu: Vec<Columns> = params
        .par_iter()
        .map(|mu| snapshot_columns(twins, plan, mu))
        .collect::<Result<_>>()?;
    let stack = |f: &dyn Fn(&Columns) -> &Vec<DVector<f64>>| -> DMatrix<f64> {
        let cols: Vec<&DVector<f64>> = per_mu.iter().flat_map(|c| f(c).iter()).collect();
        let rows = cols.first().map_or(0, |c| c.len());
        DMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
    };
    Ok(SnapshotSet {
        s1: stack(&|c| &c.s1),
        s2: stack(&|c| &c.s2),
        s_d: stack(&|c| &c.s_d),
        s_n: stack(&|c| &c.s_n),
        params: per_mu.iter().flat_map(|c| c.params.iter().cloned()).collect(),
    })
}
