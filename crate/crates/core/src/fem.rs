//! Q1 finite-element assembly for `-div(alpha grad u) + beta u = f` and the
//! heat equation on structured meshes.
//!
//! Operators are kept term-wise: `A(mu) = alpha K + beta M`. Every integral
//! uses the 2-point Gauss rule per axis, which is exact for Q1 stiffness and
//! mass on axis-aligned cells.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{build_index_sets, BoundaryLayout, IndexSets, Mesh, Side};
use crate::sparse::{combine, spmv, Csr};

const GAUSS: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];

/// One parameter instance. `gamma1`/`gamma2` only matter for the two-source
/// problem; `t_index` tags time steps of unsteady snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSample {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub gamma1: f64,
    #[serde(default)]
    pub gamma2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_index: Option<usize>,
}

impl ParameterSample {
    pub fn new(alpha: f64, beta: f64) -> Self {
        ParameterSample {
            alpha,
            beta,
            gamma1: 0.0,
            gamma2: 0.0,
            t_index: None,
        }
    }

    pub fn with_sources(mut self, gamma1: f64, gamma2: f64) -> Self {
        self.gamma1 = gamma1;
        self.gamma2 = gamma2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!("need alpha > 0 and beta >= 0, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for ParameterSample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(alpha={}, beta={}, gamma1={}, gamma2={}",
            self.alpha, self.beta, self.gamma1, self.gamma2
        )?;
        if let Some(t) = self.t_index {
            write!(f, ", t_index={t}")?;
        }
        write!(f, ")")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeMethod {
    BackwardEuler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeScheme {
    pub dt: f64,
    pub n_steps: usize,
    #[serde(default = "default_method")]
    pub method: TimeMethod,
}

fn default_method() -> TimeMethod {
    TimeMethod::BackwardEuler
}

impl TimeScheme {
    pub fn backward_euler(dt: f64, n_steps: usize) -> Self {
        TimeScheme {
            dt,
            n_steps,
            method: TimeMethod::BackwardEuler,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.n_steps == 0 {
            return Err(Error::Config(format!("need dt > 0 and n_steps >= 1, got {self:?}")));
        }
        Ok(())
    }

    /// Time at the end of step `n` (1-based), `t_n = n dt`.
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }
}

/// Scalar weights of the stiffness and mass terms in a system matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatorCoeffs {
    pub stiffness: f64,
    pub mass: f64,
}

impl OperatorCoeffs {
    pub fn steady(mu: &ParameterSample) -> Self {
        OperatorCoeffs {
            stiffness: mu.alpha,
            mass: mu.beta,
        }
    }

    /// Backward Euler: `(M/dt + alpha K + beta M) u^{n+1} = M u^n / dt + f^{n+1}`.
    pub fn backward_euler(mu: &ParameterSample, dt: f64) -> Self {
        OperatorCoeffs {
            stiffness: mu.alpha,
            mass: mu.beta + 1.0 / dt,
        }
    }
}

/// Stiffness and mass matrices of a Q1 box element with edge lengths `h`.
/// Local node `l` has offset `(l >> a) & 1` along axis `a`.
pub fn q1_element(h: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let dim = h.len();
    let npe = 1 << dim;
    let det: f64 = h.iter().map(|x| x / 2.0).product();
    let mut k = DMatrix::zeros(npe, npe);
    let mut m = DMatrix::zeros(npe, npe);
    let nq = 1 << dim;
    for q in 0..nq {
        let xi: Vec<f64> = (0..dim).map(|a| GAUSS[(q >> a) & 1]).collect();
        let (vals, grads) = shape_functions(&xi, h);
        for i in 0..npe {
            for j in 0..npe {
                let g: f64 = (0..dim).map(|a| grads[i][a] * grads[j][a]).sum();
                k[(i, j)] += g * det;
                m[(i, j)] += vals[i] * vals[j] * det;
            }
        }
    }
    (k, m)
}

/// Values and physical gradients of the Q1 shape functions at reference point `xi`.
fn shape_functions(xi: &[f64], h: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dim = xi.len();
    let npe = 1 << dim;
    let mut vals = vec![1.0; npe];
    let mut grads = vec![vec![1.0; dim]; npe];
    for l in 0..npe {
        for a in 0..dim {
            let s = if (l >> a) & 1 == 1 { 1.0 } else { -1.0 };
            let factor = 0.5 * (1.0 + s * xi[a]);
            vals[l] *= factor;
            for (b, g) in grads[l].iter_mut().enumerate() {
                if b == a {
                    *g *= 0.5 * s * 2.0 / h[a];
                } else {
                    *g *= factor;
                }
            }
        }
    }
    (vals, grads)
}

/// Sparsity pattern of a structured Q1 operator: nodes sharing a cell.
fn q1_pattern(shape: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let dim = shape.len();
    let n: usize = shape.iter().product();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    offsets.push(0);
    let strides: Vec<usize> = (0..dim).map(|a| shape[..a].iter().product()).collect();
    let n_off = 3usize.pow(dim as u32);
    for node in 0..n {
        let idx: Vec<usize> = (0..dim).map(|a| (node / strides[a]) % shape[a]).collect();
        let start = indices.len();
        'offsets: for o in 0..n_off {
            let mut g = 0;
            let mut rem = o;
            for a in 0..dim {
                let d = (rem % 3) as isize - 1;
                rem /= 3;
                let i = idx[a] as isize + d;
                if i < 0 || i >= shape[a] as isize {
                    continue 'offsets;
                }
                g += i as usize * strides[a];
            }
            indices.push(g);
        }
        indices[start..].sort_unstable();
        offsets.push(indices.len());
    }
    (offsets, indices)
}

/// Assembles the stiffness `K = int grad phi . grad phi` and mass `M = int phi phi`.
pub fn assemble_stiffness_mass(mesh: &Mesh) -> (Csr, Csr) {
    let (offsets, indices) = q1_pattern(&mesh.shape);
    let mut kv = vec![0.0; indices.len()];
    let mut mv = vec![0.0; indices.len()];
    let (ke, me) = q1_element(&mesh.h);
    let npc = mesh.nodes_per_cell();
    for c in 0..mesh.n_cells() {
        let cell = mesh.cell(c);
        for i in 0..npc {
            let row = cell[i];
            let cols = &indices[offsets[row]..offsets[row + 1]];
            for j in 0..npc {
                let p = offsets[row] + cols.binary_search(&cell[j]).expect("cell neighbours are in the pattern");
                kv[p] += ke[(i, j)];
                mv[p] += me[(i, j)];
            }
        }
    }
    let n = mesh.n_nodes();
    let k = Csr::try_from_csr_data(n, n, offsets.clone(), indices.clone(), kv).expect("valid pattern");
    let m = Csr::try_from_csr_data(n, n, offsets, indices, mv).expect("valid pattern");
    (k, m)
}

/// Interface mass matrix `int_Gamma phi_a phi_b`, ordered like the interface
/// index set (ascending global node index).
pub fn assemble_interface_mass(mesh: &Mesh) -> Result<DMatrix<f64>> {
    let gamma = mesh.interface_nodes();
    if gamma.is_empty() {
        return Err(Error::Mesh("mesh has no interface nodes".into()));
    }
    let axes: Vec<usize> = (0..mesh.dim).filter(|&a| a != mesh.interface_axis).collect();
    let shape: Vec<usize> = axes.iter().map(|&a| mesh.shape[a]).collect();
    let h: Vec<f64> = axes.iter().map(|&a| mesh.h[a]).collect();
    let n: usize = shape.iter().product();
    if n != gamma.len() {
        return Err(Error::Mesh("interface nodes do not form a full grid plane".into()));
    }
    let (_, me) = q1_element(&h);
    let k = axes.len();
    let mut mg = DMatrix::zeros(n, n);
    let cell_shape: Vec<usize> = shape.iter().map(|s| s - 1).collect();
    let n_cells: usize = cell_shape.iter().product();
    for c in 0..n_cells {
        let mut rem = c;
        let cidx: Vec<usize> = cell_shape
            .iter()
            .map(|&s| {
                let i = rem % s;
                rem /= s;
                i
            })
            .collect();
        let local: Vec<usize> = (0..1 << k)
            .map(|l| {
                let mut g = 0;
                let mut stride = 1;
                for a in 0..k {
                    g += (cidx[a] + ((l >> a) & 1)) * stride;
                    stride *= shape[a];
                }
                g
            })
            .collect();
        for (i, &gi) in local.iter().enumerate() {
            for (j, &gj) in local.iter().enumerate() {
                mg[(gi, gj)] += me[(i, j)];
            }
        }
    }
    Ok(mg)
}

/// Which source branch applies on a cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Region {
    Side(Side),
    /// Undecomposed mesh; a cell is on the slave side if its centre lies
    /// below `coord` along `axis`.
    Split { axis: usize, coord: f64 },
}

impl Region {
    fn side_of(&self, centre: &[f64; 3]) -> Side {
        match *self {
            Region::Side(s) => s,
            Region::Split { axis, coord } => {
                if centre[axis] < coord {
                    Side::Slave
                } else {
                    Side::Master
                }
            }
        }
    }
}

/// Registered analytic volume sources, each with an affine parameter split
/// `f(mu, t) = sum_q theta_q(mu, t) f_q(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Zero,
    Constant { value: f64 },
    /// `(pi/4) y x^2 sin(pi y / 2) exp(z - 1)`, parameter independent.
    Spheroid,
    /// `gamma1 (sin(pi x^2 z / 2) + x y)` on the slave side and
    /// `gamma2 exp(-|x - (1,1,1)|^2 / 2)` on the master side.
    TwoSources,
    /// `1` where `x < x_max` and `t_on < t < t_off`, zero elsewhere.
    HeatGate { x_max: f64, t_on: f64, t_off: f64 },
}

impl SourceSpec {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "zero" => Ok(SourceSpec::Zero),
            "spheroid" => Ok(SourceSpec::Spheroid),
            "two_sources" => Ok(SourceSpec::TwoSources),
            "heat_gate" => Ok(SourceSpec::HeatGate {
                x_max: 0.0,
                t_on: 0.2,
                t_off: 0.5,
            }),
            other => Err(Error::UnknownSource(other.to_string())),
        }
    }

    pub fn n_terms(&self) -> usize {
        match self {
            SourceSpec::Zero => 0,
            SourceSpec::TwoSources => 2,
            _ => 1,
        }
    }

    /// Spatial part of term `q` at point `x` for a cell on `side`.
    fn term_value(&self, q: usize, x: &[f64; 3], side: Side) -> f64 {
        let (px, py, pz) = (x[0], x[1], x[2]);
        match self {
            SourceSpec::Zero => 0.0,
            SourceSpec::Constant { value } => *value,
            SourceSpec::Spheroid => PI / 4.0 * py * px * px * (PI / 2.0 * py).sin() * (pz - 1.0).exp(),
            SourceSpec::TwoSources => match (q, side) {
                (0, Side::Slave) => (PI / 2.0 * px * px * pz).sin() + px * py,
                (1, Side::Master) => {
                    let r2 = (px - 1.0).powi(2) + (py - 1.0).powi(2) + (pz - 1.0).powi(2);
                    (-r2 / 2.0).exp()
                }
                _ => 0.0,
            },
            SourceSpec::HeatGate { x_max, .. } => {
                if px < *x_max {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Coefficients `theta_q(mu, t)`.
    pub fn coefficients(&self, mu: &ParameterSample, t: f64) -> Vec<f64> {
        match self {
            SourceSpec::Zero => vec![],
            SourceSpec::Constant { .. } | SourceSpec::Spheroid => vec![1.0],
            SourceSpec::TwoSources => vec![mu.gamma1, mu.gamma2],
            SourceSpec::HeatGate { t_on, t_off, .. } => {
                vec![if *t_on < t && t < *t_off { 1.0 } else { 0.0 }]
            }
        }
    }

    /// Load vectors of each affine term over all mesh nodes.
    pub fn affine_loads(&self, mesh: &Mesh, region: Region) -> Vec<DVector<f64>> {
        (0..self.n_terms())
            .map(|q| assemble_load_fn(mesh, |x, side| self.term_value(q, x, side), region))
            .collect()
    }
}

/// `int f phi` with the 2-point Gauss rule; `f` also receives the side the
/// cell belongs to.
pub fn assemble_load_fn(mesh: &Mesh, f: impl Fn(&[f64; 3], Side) -> f64, region: Region) -> DVector<f64> {
    let dim = mesh.dim;
    let npc = mesh.nodes_per_cell();
    let det: f64 = mesh.h.iter().map(|x| x / 2.0).product();
    let quad: Vec<(Vec<f64>, Vec<f64>)> = (0..npc)
        .map(|q| {
            let xi: Vec<f64> = (0..dim).map(|a| GAUSS[(q >> a) & 1]).collect();
            let (vals, _) = shape_functions(&xi, &mesh.h);
            (xi, vals)
        })
        .collect();
    let mut out = DVector::zeros(mesh.n_nodes());
    for c in 0..mesh.n_cells() {
        let cell = mesh.cell(c);
        let origin = mesh.nodes[cell[0]];
        let mut centre = origin;
        for a in 0..dim {
            centre[a] += mesh.h[a] / 2.0;
        }
        let side = region.side_of(&centre);
        for (xi, vals) in &quad {
            let mut x = origin;
            for a in 0..dim {
                x[a] += mesh.h[a] * 0.5 * (1.0 + xi[a]);
            }
            let fx = f(&x, side) * det;
            if fx == 0.0 {
                continue;
            }
            for (l, &node) in cell.iter().enumerate() {
                out[node] += fx * vals[l];
            }
        }
    }
    out
}

/// Load vector `int f(mu, t) phi` over all mesh nodes.
pub fn assemble_load(mesh: &Mesh, source: &SourceSpec, mu: &ParameterSample, t: f64, region: Region) -> DVector<f64> {
    let mut out = DVector::zeros(mesh.n_nodes());
    for (theta, term) in source.coefficients(mu, t).into_iter().zip(source.affine_loads(mesh, region)) {
        if theta != 0.0 {
            out.axpy(theta, &term, 1.0);
        }
    }
    out
}

/// Dirichlet lift `A_{i,D} g_D` restricted to the internal rows.
pub fn apply_dirichlet_lift(a_internal_dirichlet: &Csr, g_d: &DVector<f64>) -> Result<DVector<f64>> {
    if a_internal_dirichlet.ncols() != g_d.len() {
        return Err(Error::Dimension(format!(
            "lift block has {} columns, g_D has {} entries",
            a_internal_dirichlet.ncols(),
            g_d.len()
        )));
    }
    Ok(spmv(a_internal_dirichlet, g_d.as_slice()))
}

fn h1_norm_sq(v: &DVector<f64>, k: &Csr, m: &Csr) -> f64 {
    v.dot(&spmv(k, v.as_slice())) + v.dot(&spmv(m, v.as_slice()))
}

/// `||u_a - u_b||_{H1} / ||u_a||_{H1}` with the discrete norm `(v, (K + M) v)`.
pub fn h1_relative_error(u_a: &DVector<f64>, u_b: &DVector<f64>, k: &Csr, m: &Csr) -> Result<f64> {
    if u_a.len() != u_b.len() || u_a.len() != k.nrows() {
        return Err(Error::Dimension(format!(
            "vectors of length {} and {} against {}x{} operators",
            u_a.len(),
            u_b.len(),
            k.nrows(),
            k.ncols()
        )));
    }
    let reference = h1_norm_sq(u_a, k, m);
    if reference <= 0.0 {
        return Err(Error::ZeroNorm);
    }
    let d = u_a - u_b;
    Ok((h1_norm_sq(&d, k, m).max(0.0) / reference).sqrt())
}

/// Full-order operators of one subdomain (or of the undecomposed box).
#[derive(Clone, Debug)]
pub struct AssembledOperators {
    pub mesh: Mesh,
    pub sets: IndexSets,
    pub k: Csr,
    pub m: Csr,
    /// Interface mass matrix; `0 x 0` when the mesh has no interface.
    pub m_gamma: DMatrix<f64>,
    m_gamma_chol: Option<Cholesky<f64, Dyn>>,
    /// One full-length load vector per affine source term.
    pub loads: Vec<DVector<f64>>,
    /// Dirichlet values over `sets.dirichlet`.
    pub g_dirichlet: DVector<f64>,
    pub source: SourceSpec,
}

impl AssembledOperators {
    pub fn build(mesh: Mesh, side: Side, layout: &BoundaryLayout, source: &SourceSpec, region: Region) -> Result<Self> {
        let sets = build_index_sets(&mesh, side)?;
        let (k, m) = assemble_stiffness_mass(&mesh);
        let m_gamma = if sets.n_gamma > 0 {
            assemble_interface_mass(&mesh)?
        } else {
            DMatrix::zeros(0, 0)
        };
        let m_gamma_chol = if sets.n_gamma > 0 {
            Some(
                m_gamma
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Singular("interface mass matrix".into()))?,
            )
        } else {
            None
        };
        let loads = source.affine_loads(&mesh, region);
        let g_dirichlet = DVector::from_vec(layout.values_at(&mesh, &sets.dirichlet));
        Ok(AssembledOperators {
            mesh,
            sets,
            k,
            m,
            m_gamma,
            m_gamma_chol,
            loads,
            g_dirichlet,
            source: source.clone(),
        })
    }

    /// Full load vector for `mu` at time `t`.
    pub fn load(&self, mu: &ParameterSample, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.mesh.n_nodes());
        for (theta, term) in self.source.coefficients(mu, t).into_iter().zip(&self.loads) {
            if theta != 0.0 {
                out.axpy(theta, term, 1.0);
            }
        }
        out
    }

    /// Primal residual: solves `M_Gamma z = r`.
    pub fn riesz(&self, r: &DVector<f64>) -> DVector<f64> {
        match &self.m_gamma_chol {
            Some(c) => c.solve(r),
            None => DVector::zeros(0),
        }
    }

    /// Dense `M_Gamma^{-1}`.
    pub fn m_gamma_inverse(&self) -> DMatrix<f64> {
        match &self.m_gamma_chol {
            Some(c) => c.inverse(),
            None => DMatrix::zeros(0, 0),
        }
    }

    /// `A = c_K K + c_M M`.
    pub fn operator(&self, c: OperatorCoeffs) -> Csr {
        combine(&[(c.stiffness, &self.k), (c.mass, &self.m)])
    }

    pub fn h1_relative_error(&self, reference: &DVector<f64>, approx: &DVector<f64>) -> Result<f64> {
        h1_relative_error(reference, approx, &self.k, &self.m)
    }
}
