//! Offline stage: POD bases, DEIM interface bases with magic points,
//! cross-interface pairing and the precomputed reduced coupling arrays.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dd_fom::{read_blob, write_blob, SnapshotSet};
use crate::error::{Error, Result, StageExt};
use crate::fem::{AssembledOperators, SourceSpec};
use crate::mesh::Mesh;
use crate::sparse::{spmm, spmv, submatrix, Csr};

/// Singular values at or below `sigma_max * max(rows, cols) * eps` are
/// treated as zero when choosing a rank.
pub fn rank_floor(sigma_max: f64, rows: usize, cols: usize) -> f64 {
    sigma_max * rows.max(cols) as f64 * f64::EPSILON
}

#[derive(Clone, Debug, PartialEq)]
pub struct PodBasis {
    pub v: DMatrix<f64>,
    /// All singular values of the snapshot matrix, descending.
    pub singular_values: Vec<f64>,
    pub energy_tol: f64,
}

impl PodBasis {
    pub fn rank(&self) -> usize {
        self.v.ncols()
    }

    /// Leading `n` modes.
    pub fn truncated(&self, n: usize, what: &'static str) -> Result<PodBasis> {
        check_rank(what, n, self.rank())?;
        Ok(PodBasis {
            v: self.v.columns(0, n).into_owned(),
            singular_values: self.singular_values.clone(),
            energy_tol: self.energy_tol,
        })
    }
}

fn check_rank(what: &'static str, requested: usize, available: usize) -> Result<()> {
    if requested > available {
        return Err(Error::RankExceeded {
            what,
            requested,
            available,
        });
    }
    Ok(())
}

/// Left singular vectors and singular values. nalgebra's bidiagonal SVD
/// returns wrong factors on some rank-deficient inputs, so this goes through
/// faer.
fn thin_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let m = faer::Mat::<f64>::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)]);
    let svd = m
        .thin_svd()
        .map_err(|e| Error::Singular(format!("SVD did not converge: {e:?}")))?;
    let u = svd.U();
    let s = svd.S().column_vector();
    let k = s.nrows();
    Ok((
        DMatrix::from_fn(a.nrows(), k, |i, j| u[(i, j)]),
        (0..k).map(|j| s[j]).collect(),
    ))
}

/// Thin-SVD POD. Keeps the smallest `n` with relative tail energy
/// `sqrt(sum_{j>n} s_j^2 / sum s_j^2) <= energy_tol`, capped by `n_max` and by
/// the numerical rank.
pub fn pod(snapshots: &DMatrix<f64>, energy_tol: f64, n_max: Option<usize>) -> Result<PodBasis> {
    if snapshots.ncols() == 0 || snapshots.nrows() == 0 || snapshots.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptySnapshots);
    }
    let (u, raw_sigma) = thin_svd(snapshots)?;
    let mut order: Vec<usize> = (0..raw_sigma.len()).collect();
    order.sort_by(|&a, &b| raw_sigma[b].total_cmp(&raw_sigma[a]));
    let sigma: Vec<f64> = order.iter().map(|&j| raw_sigma[j]).collect();

    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let mut tail = total;
    let mut n = sigma.len();
    for (k, s) in sigma.iter().enumerate() {
        if (tail.max(0.0) / total).sqrt() <= energy_tol {
            n = k;
            break;
        }
        tail -= s * s;
    }
    let floor = rank_floor(sigma[0], snapshots.nrows(), snapshots.ncols());
    let numerical_rank = sigma.iter().filter(|&&s| s > floor).count();
    n = n.max(1).min(numerical_rank);
    if let Some(cap) = n_max {
        n = n.min(cap.max(1));
    }

    let mut v = DMatrix::zeros(snapshots.nrows(), n);
    for (k, &j) in order.iter().take(n).enumerate() {
        let mut col = u.column(j).into_owned();
        // largest-magnitude entry positive
        let (imax, _) = col.iter().enumerate().fold((0, 0.0f64), |(bi, bv), (i, &x)| {
            if x.abs() > bv {
                (i, x.abs())
            } else {
                (bi, bv)
            }
        });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        v.set_column(k, &col);
    }
    Ok(PodBasis {
        v,
        singular_values: sigma,
        energy_tol,
    })
}

/// Standard DEIM greedy selection of interpolation indices.
pub fn deim_select(phi: &DMatrix<f64>) -> Result<Vec<usize>> {
    let m = phi.ncols();
    if m == 0 || m > phi.nrows() {
        return Err(Error::Dimension(format!("cannot select {m} points from {} rows", phi.nrows())));
    }
    let argmax = |v: &DVector<f64>| {
        v.iter()
            .enumerate()
            .fold((0, -1.0f64), |(bi, bv), (i, &x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) })
            .0
    };
    let mut idx = vec![argmax(&phi.column(0).into_owned())];
    for k in 1..m {
        let basis = phi.columns(0, k);
        let pk = DMatrix::from_fn(k, k, |i, j| basis[(idx[i], j)]);
        let rhs = DVector::from_fn(k, |i, _| phi[(idx[i], k)]);
        let c = pk
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("DEIM interpolation matrix".into()))?;
        let residual = phi.column(k) - basis * c;
        let next = argmax(&residual);
        if idx.contains(&next) || residual[next].abs() == 0.0 {
            return Err(Error::Singular("DEIM basis is linearly dependent".into()));
        }
        idx.push(next);
    }
    Ok(idx)
}

/// `(Phi|_I)^{-1}`.
pub fn deim_inverse(phi: &DMatrix<f64>, idx: &[usize]) -> Result<DMatrix<f64>> {
    let m = idx.len();
    let p = DMatrix::from_fn(m, m, |i, j| phi[(idx[i], j)]);
    p.try_inverse().ok_or_else(|| Error::Singular("DEIM interpolation matrix".into()))
}

/// DEIM reconstruction `Phi (Phi|_I)^{-1} v|_I` of a full vector.
pub fn deim_reconstruct(phi: &DMatrix<f64>, idx: &[usize], v: &DVector<f64>) -> Result<DVector<f64>> {
    let samples = DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]));
    Ok(phi * (deim_inverse(phi, idx)? * samples))
}

/// For each magic point, the nearest target point; ties go to the last
/// target in scan order. Returns target positions and distances.
pub fn pair_points(magic: &[usize], source: &[[f64; 3]], target: &[[f64; 3]]) -> Result<(Vec<usize>, Vec<f64>)> {
    if target.is_empty() {
        return Err(Error::Mesh("empty target interface".into()));
    }
    let mut pairs = Vec::with_capacity(magic.len());
    let mut dists = Vec::with_capacity(magic.len());
    for &m in magic {
        let p = source
            .get(m)
            .ok_or_else(|| Error::Dimension(format!("magic point {m} outside interface of {}", source.len())))?;
        let mut best = (0, f64::INFINITY);
        for (j, q) in target.iter().enumerate() {
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            if d <= best.1 {
                best = (j, d);
            }
        }
        pairs.push(best.0);
        dists.push(best.1);
    }
    Ok((pairs, dists))
}

/// Pairs magic points given as interface positions on `source_mesh` with
/// interface positions on `target_mesh`.
pub fn pair_magic_points(magic: &[usize], source_mesh: &Mesh, target_mesh: &Mesh) -> Result<(Vec<usize>, Vec<f64>)> {
    pair_points(magic, &source_mesh.interface_coords(), &target_mesh.interface_coords())
}

/// How slave residual samples at `I_{1,N}` are turned into primal residual
/// values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSampling {
    /// Rows `I_{1,N}` of `M_{Gamma1}^{-1}` applied to the whole slave residual.
    #[default]
    PrimalRows,
    /// The sampled block `M_{Gamma1}^{-1}(I_{1,N}, I_{1,N})` applied to the
    /// residual sampled at `I_{1,N}` only.
    SampledInverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub eps1: f64,
    pub eps2: f64,
    pub eps_d: f64,
    pub eps_n: f64,
}

impl Tolerances {
    pub fn uniform(eps: f64) -> Self {
        Tolerances {
            eps1: eps,
            eps2: eps,
            eps_d: eps,
            eps_n: eps,
        }
    }
}

/// Optional upper bounds on the four ranks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCaps {
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    pub m_d: Option<usize>,
    pub m_n: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranks {
    pub n1: usize,
    pub n2: usize,
    pub m_d: usize,
    pub m_n: usize,
}

/// Interface bases, magic points and their cross-interface partners.
/// Indices are positions within the respective interface index sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DeimInterfaceModel {
    pub phi_d: PodBasis,
    pub magic_d_slave: Vec<usize>,
    pub paired_d_master: Vec<usize>,
    pub pair_d_dist: Vec<f64>,
    pub phi_n: PodBasis,
    pub magic_n_master: Vec<usize>,
    pub paired_n_slave: Vec<usize>,
    pub pair_n_dist: Vec<f64>,
}

/// Node bookkeeping needed to rebuild full fields from reduced vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DofLayout {
    pub n_total: usize,
    pub internal: Vec<usize>,
    pub gamma: Vec<usize>,
    pub dirichlet: Vec<usize>,
    pub g_dirichlet: Vec<f64>,
}

impl DofLayout {
    fn of(ops: &AssembledOperators) -> Self {
        DofLayout {
            n_total: ops.sets.n_total,
            internal: ops.sets.internal.clone(),
            gamma: ops.sets.gamma.clone(),
            dirichlet: ops.sets.dirichlet.clone(),
            g_dirichlet: ops.g_dirichlet.iter().copied().collect(),
        }
    }
}

/// Affine pair of arrays: stiffness part and mass part.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub k: T,
    pub m: T,
}

impl<T> Affine<T> {
    fn map<U>(&self, f: impl Fn(&T) -> U) -> Affine<U> {
        Affine {
            k: f(&self.k),
            m: f(&self.m),
        }
    }
}

/// Slave-residual rows `S A(Gamma1, .)` for one sampling operator `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualRows {
    /// `S A(Gamma1, I1) V1`, `m_n x n1`.
    pub rv: Affine<DMatrix<f64>>,
    /// `S A(Gamma1, Gamma1) Phi_D`, `m_n x m_d`.
    pub rg: Affine<DMatrix<f64>>,
    /// `S A(Gamma1, D) g_D`.
    pub rd: Affine<DVector<f64>>,
    /// `S f_q(Gamma1)` per source term.
    pub rf: Vec<DVector<f64>>,
}

impl ResidualRows {
    fn truncated(&self, r: &Ranks) -> ResidualRows {
        ResidualRows {
            rv: self.rv.map(|a| a.view((0, 0), (r.m_n, r.n1)).into_owned()),
            rg: self.rg.map(|a| a.view((0, 0), (r.m_n, r.m_d)).into_owned()),
            rd: self.rd.map(|a| a.rows(0, r.m_n).into_owned()),
            rf: self.rf.iter().map(|a| a.rows(0, r.m_n).into_owned()).collect(),
        }
    }

    fn premultiplied(&self, s: &DMatrix<f64>) -> ResidualRows {
        ResidualRows {
            rv: self.rv.map(|a| s * a),
            rg: self.rg.map(|a| s * a),
            rd: self.rd.map(|a| s * a),
            rf: self.rf.iter().map(|a| s * a).collect(),
        }
    }
}

/// Reduced arrays computed offline from the bases and the full operators.
#[derive(Clone, Debug, PartialEq)]
pub struct Couplings {
    /// `V1^T A(I1, I1) V1`.
    pub a1n: Affine<DMatrix<f64>>,
    pub a2n: Affine<DMatrix<f64>>,
    /// `V_i^T f_q(I_i)` per source term.
    pub f1n: Vec<DVector<f64>>,
    pub f2n: Vec<DVector<f64>>,
    /// `V_i^T A(I_i, D) g_D`.
    pub lift1: Affine<DVector<f64>>,
    pub lift2: Affine<DVector<f64>>,
    /// `V1^T A(I1, Gamma1) Phi_D`, `n1 x m_d`.
    pub dirichlet_raw: Affine<DMatrix<f64>>,
    /// Rows of `V2` at the master partners of the Dirichlet magic points, `m_d x n2`.
    pub trace_rows: DMatrix<f64>,
    /// `V2^T E2 M_Gamma2 Phi_N`, `n2 x m_n`.
    pub neumann_raw: DMatrix<f64>,
    /// Residual rows through `M_Gamma1^{-1}(I_{1,N}, :)`.
    pub primal_rows: ResidualRows,
    /// Residual rows at `I_{1,N}` without the inverse mass.
    pub sampled_rows: ResidualRows,
    /// `M_Gamma1^{-1}(I_{1,N}, I_{1,N})`.
    pub minv_nn: DMatrix<f64>,
}

fn gather_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn gather_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Precomputes every reduced array used online. The Dirichlet coupling of
/// each affine term is `dirichlet_raw (Phi_D|_I)^{-1} trace_rows`; the Neumann
/// coupling is `neumann_raw (Phi_N|_I)^{-1}` applied to primal residual
/// samples.
pub fn precompute_couplings(
    v1: &DMatrix<f64>,
    v2: &DMatrix<f64>,
    deim: &DeimInterfaceModel,
    ops1: &AssembledOperators,
    ops2: &AssembledOperators,
) -> Result<Couplings> {
    let (s1, s2) = (&ops1.sets, &ops2.sets);
    let phi_d = &deim.phi_d.v;
    let phi_n = &deim.phi_n.v;
    if v1.nrows() != s1.n_internal
        || v2.nrows() != s2.n_internal
        || phi_d.nrows() != s1.n_gamma
        || phi_n.nrows() != s2.n_gamma
    {
        return Err(Error::Dimension(format!(
            "bases with {}/{}/{}/{} rows against subdomains with {}/{} unknowns and {}/{} interface nodes",
            v1.nrows(),
            v2.nrows(),
            phi_d.nrows(),
            phi_n.nrows(),
            s1.n_internal,
            s2.n_internal,
            s1.n_gamma,
            s2.n_gamma
        )));
    }
    let g1 = &ops1.g_dirichlet;
    let g2 = &ops2.g_dirichlet;

    let project = |v: &DMatrix<f64>, a: &Csr, rows: &[usize]| v.tr_mul(&spmm(&submatrix(a, rows, rows), v));
    let lift = |v: &DMatrix<f64>, a: &Csr, int: &[usize], d: &[usize], g: &DVector<f64>| {
        v.tr_mul(&spmv(&submatrix(a, int, d), g.as_slice()))
    };
    let a1n = Affine {
        k: project(v1, &ops1.k, &s1.internal),
        m: project(v1, &ops1.m, &s1.internal),
    };
    let a2n = Affine {
        k: project(v2, &ops2.k, &s2.internal),
        m: project(v2, &ops2.m, &s2.internal),
    };
    let f1n = ops1.loads.iter().map(|f| v1.tr_mul(&gather_vec(f, &s1.internal))).collect();
    let f2n = ops2.loads.iter().map(|f| v2.tr_mul(&gather_vec(f, &s2.internal))).collect();
    let lift1 = Affine {
        k: lift(v1, &ops1.k, &s1.internal, &s1.dirichlet, g1),
        m: lift(v1, &ops1.m, &s1.internal, &s1.dirichlet, g1),
    };
    let lift2 = Affine {
        k: lift(v2, &ops2.k, &s2.internal, &s2.dirichlet, g2),
        m: lift(v2, &ops2.m, &s2.internal, &s2.dirichlet, g2),
    };
    let dirichlet_raw = Affine {
        k: v1.tr_mul(&spmm(&submatrix(&ops1.k, &s1.internal, &s1.gamma), phi_d)),
        m: v1.tr_mul(&spmm(&submatrix(&ops1.m, &s1.internal, &s1.gamma), phi_d)),
    };

    // master interface rows inside the master unknowns
    let gamma_pos2: Vec<usize> = s2
        .gamma
        .iter()
        .map(|&g| s2.internal_position(g).expect("master interface nodes are unknowns"))
        .collect();
    let v2_gamma = gather_rows(v2, &gamma_pos2);
    let trace_rows = gather_rows(&v2_gamma, &deim.paired_d_master);
    let neumann_raw = v2_gamma.tr_mul(&(&ops2.m_gamma * phi_n));

    // slave residual rows A(Gamma1, .) [V1 | Phi_D | g_D] and the loads on Gamma1
    let gi = |a: &Csr| spmm(&submatrix(a, &s1.gamma, &s1.internal), v1);
    let gg = |a: &Csr| spmm(&submatrix(a, &s1.gamma, &s1.gamma), phi_d);
    let gd = |a: &Csr| spmv(&submatrix(a, &s1.gamma, &s1.dirichlet), g1.as_slice());
    let whole = ResidualRows {
        rv: Affine { k: gi(&ops1.k), m: gi(&ops1.m) },
        rg: Affine { k: gg(&ops1.k), m: gg(&ops1.m) },
        rd: Affine { k: gd(&ops1.k), m: gd(&ops1.m) },
        rf: ops1.loads.iter().map(|f| gather_vec(f, &s1.gamma)).collect(),
    };
    let minv = ops1.m_gamma_inverse();
    let idx = &deim.paired_n_slave;
    let primal = gather_rows(&minv, idx);
    let selection = DMatrix::from_fn(idx.len(), s1.n_gamma, |i, j| if idx[i] == j { 1.0 } else { 0.0 });
    let minv_nn = DMatrix::from_fn(idx.len(), idx.len(), |i, j| minv[(idx[i], idx[j])]);

    Ok(Couplings {
        a1n,
        a2n,
        f1n,
        f2n,
        lift1,
        lift2,
        dirichlet_raw,
        trace_rows,
        neumann_raw,
        primal_rows: whole.premultiplied(&primal),
        sampled_rows: whole.premultiplied(&selection),
        minv_nn,
    })
}

/// Training settings recorded with the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub tolerances: Tolerances,
    pub caps: RankCaps,
    pub sampling: ResidualSampling,
    pub source: SourceSpec,
    pub n_snapshots: usize,
}

/// Arrays the online loop uses directly, derived from the stored ones for the
/// active ranks.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineArrays {
    /// `P^T P` with `P = Phi_D (Phi_D|_I)^{-1}`; the interface gap is
    /// measured through it without forming `P`.
    pub gram_d: DMatrix<f64>,
    /// `(Phi_D|_I)^{-1}`.
    pub inv_d: DMatrix<f64>,
    /// `V1^T A(I1, Gamma1) Phi_D (Phi_D|_I)^{-1}`, `n1 x m_d`.
    pub dirichlet: Affine<DMatrix<f64>>,
    /// `V2^T E2 M_Gamma2 Phi_N (Phi_N|_I)^{-1}`, `n2 x m_n`.
    pub neumann: DMatrix<f64>,
    /// Residual rows mapping slave data to primal residual samples, with
    /// `rg` already multiplied by `(Phi_D|_I)^{-1}`.
    pub residual: ResidualRows,
}

/// Trained reduced model at a given set of ranks.
#[derive(Clone, Debug, PartialEq)]
pub struct RomModel {
    pub meta: TrainingMeta,
    pub v1: PodBasis,
    pub v2: PodBasis,
    pub deim: DeimInterfaceModel,
    pub couplings: Couplings,
    pub layout1: DofLayout,
    pub layout2: DofLayout,
    pub online: OnlineArrays,
}

impl RomModel {
    pub fn ranks(&self) -> Ranks {
        Ranks {
            n1: self.v1.rank(),
            n2: self.v2.rank(),
            m_d: self.deim.magic_d_slave.len(),
            m_n: self.deim.magic_n_master.len(),
        }
    }

    pub fn n_terms(&self) -> usize {
        self.couplings.f1n.len()
    }

    fn assemble(
        meta: TrainingMeta,
        v1: PodBasis,
        v2: PodBasis,
        deim: DeimInterfaceModel,
        couplings: Couplings,
        layout1: DofLayout,
        layout2: DofLayout,
    ) -> Result<Self> {
        let inv_d = deim_inverse(&deim.phi_d.v, &deim.magic_d_slave)?;
        let inv_n = deim_inverse(&deim.phi_n.v, &deim.magic_n_master)?;
        let p = &deim.phi_d.v * &inv_d;
        let gram_d = p.tr_mul(&p);
        let dirichlet = couplings.dirichlet_raw.map(|a| a * &inv_d);
        let neumann = &couplings.neumann_raw * inv_n;
        let base = match meta.sampling {
            ResidualSampling::PrimalRows => couplings.primal_rows.clone(),
            ResidualSampling::SampledInverse => couplings.sampled_rows.premultiplied(&couplings.minv_nn),
        };
        let residual = ResidualRows {
            rg: base.rg.map(|a| a * &inv_d),
            ..base
        };
        Ok(RomModel {
            meta,
            v1,
            v2,
            deim,
            couplings,
            layout1,
            layout2,
            online: OnlineArrays {
                gram_d,
                inv_d,
                dirichlet,
                neumann,
                residual,
            },
        })
    }

    /// Nested truncation to smaller ranks.
    pub fn with_ranks(&self, r: Ranks) -> Result<RomModel> {
        let have = self.ranks();
        check_rank("n1", r.n1, have.n1)?;
        check_rank("n2", r.n2, have.n2)?;
        check_rank("m_d", r.m_d, have.m_d)?;
        check_rank("m_n", r.m_n, have.m_n)?;
        if r.n1 == 0 || r.n2 == 0 || r.m_d == 0 || r.m_n == 0 {
            return Err(Error::Config("ranks must be at least 1".into()));
        }
        let d = &self.deim;
        let deim = DeimInterfaceModel {
            phi_d: d.phi_d.truncated(r.m_d, "m_d")?,
            magic_d_slave: d.magic_d_slave[..r.m_d].to_vec(),
            paired_d_master: d.paired_d_master[..r.m_d].to_vec(),
            pair_d_dist: d.pair_d_dist[..r.m_d].to_vec(),
            phi_n: d.phi_n.truncated(r.m_n, "m_n")?,
            magic_n_master: d.magic_n_master[..r.m_n].to_vec(),
            paired_n_slave: d.paired_n_slave[..r.m_n].to_vec(),
            pair_n_dist: d.pair_n_dist[..r.m_n].to_vec(),
        };
        let c = &self.couplings;
        let sq = |a: &DMatrix<f64>, n: usize| a.view((0, 0), (n, n)).into_owned();
        let head = |v: &DVector<f64>, n: usize| v.rows(0, n).into_owned();
        let couplings = Couplings {
            a1n: c.a1n.map(|a| sq(a, r.n1)),
            a2n: c.a2n.map(|a| sq(a, r.n2)),
            f1n: c.f1n.iter().map(|v| head(v, r.n1)).collect(),
            f2n: c.f2n.iter().map(|v| head(v, r.n2)).collect(),
            lift1: c.lift1.map(|v| head(v, r.n1)),
            lift2: c.lift2.map(|v| head(v, r.n2)),
            dirichlet_raw: c.dirichlet_raw.map(|a| a.view((0, 0), (r.n1, r.m_d)).into_owned()),
            trace_rows: c.trace_rows.view((0, 0), (r.m_d, r.n2)).into_owned(),
            neumann_raw: c.neumann_raw.view((0, 0), (r.n2, r.m_n)).into_owned(),
            primal_rows: c.primal_rows.truncated(&r),
            sampled_rows: c.sampled_rows.truncated(&r),
            minv_nn: sq(&c.minv_nn, r.m_n),
        };
        RomModel::assemble(
            self.meta.clone(),
            self.v1.truncated(r.n1, "n1")?,
            self.v2.truncated(r.n2, "n2")?,
            deim,
            couplings,
            self.layout1.clone(),
            self.layout2.clone(),
        )
    }

    /// Same model with a different residual sampling rule.
    pub fn with_sampling(&self, sampling: ResidualSampling) -> Result<RomModel> {
        let mut meta = self.meta.clone();
        meta.sampling = sampling;
        RomModel::assemble(
            meta,
            self.v1.clone(),
            self.v2.clone(),
            self.deim.clone(),
            self.couplings.clone(),
            self.layout1.clone(),
            self.layout2.clone(),
        )
    }
}

/// Offline training: four PODs, two DEIM selections, two pairings and the
/// coupling precomputation. `ops1`/`ops2` are the operators of the online
/// (possibly non-conforming) pair.
pub fn train(
    snapshots: &SnapshotSet,
    tols: &Tolerances,
    caps: &RankCaps,
    sampling: ResidualSampling,
    ops1: &AssembledOperators,
    ops2: &AssembledOperators,
) -> Result<RomModel> {
    if snapshots.n_columns() == 0 {
        return Err(Error::EmptyTraining);
    }
    snapshots.validate().stage("train")?;
    let ((v1, v2), (phi_d, phi_n)) = rayon::join(
        || {
            rayon::join(
                || pod(&snapshots.s1, tols.eps1, caps.n1).stage("pod V1"),
                || pod(&snapshots.s2, tols.eps2, caps.n2).stage("pod V2"),
            )
        },
        || {
            rayon::join(
                || pod(&snapshots.s_d, tols.eps_d, caps.m_d).stage("pod Phi_D"),
                || pod(&snapshots.s_n, tols.eps_n, caps.m_n).stage("pod Phi_N"),
            )
        },
    );
    let (v1, v2, phi_d, phi_n) = (v1?, v2?, phi_d?, phi_n?);
    let magic_d = deim_select(&phi_d.v).stage("deim D")?;
    let magic_n = deim_select(&phi_n.v).stage("deim N")?;
    let (pair_d, dist_d) = pair_magic_points(&magic_d, &ops1.mesh, &ops2.mesh).stage("pairing D")?;
    let (pair_n, dist_n) = pair_magic_points(&magic_n, &ops2.mesh, &ops1.mesh).stage("pairing N")?;
    let deim = DeimInterfaceModel {
        phi_d,
        magic_d_slave: magic_d,
        paired_d_master: pair_d,
        pair_d_dist: dist_d,
        phi_n,
        magic_n_master: magic_n,
        paired_n_slave: pair_n,
        pair_n_dist: dist_n,
    };
    let couplings = precompute_couplings(&v1.v, &v2.v, &deim, ops1, ops2).stage("couplings")?;
    let meta = TrainingMeta {
        tolerances: tols.clone(),
        caps: *caps,
        sampling,
        source: ops1.source.clone(),
        n_snapshots: snapshots.n_columns(),
    };
    RomModel::assemble(meta, v1, v2, deim, couplings, DofLayout::of(ops1), DofLayout::of(ops2)).stage("train")
}

const MODEL_FORMAT: &str = "ddrom-model/1";

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    meta: TrainingMeta,
    ranks: Ranks,
    singular_values: [Vec<f64>; 4],
    magic_d_slave: Vec<usize>,
    paired_d_master: Vec<usize>,
    pair_d_dist: Vec<f64>,
    magic_n_master: Vec<usize>,
    paired_n_slave: Vec<usize>,
    pair_n_dist: Vec<f64>,
    layout1: DofLayout,
    layout2: DofLayout,
    blobs: Vec<BlobEntry>,
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn residual_blobs(prefix: &str, r: &ResidualRows, out: &mut Vec<(String, DMatrix<f64>)>) {
    out.push((format!("{prefix}_rv_k"), r.rv.k.clone()));
    out.push((format!("{prefix}_rv_m"), r.rv.m.clone()));
    out.push((format!("{prefix}_rg_k"), r.rg.k.clone()));
    out.push((format!("{prefix}_rg_m"), r.rg.m.clone()));
    out.push((format!("{prefix}_rd_k"), col(&r.rd.k)));
    out.push((format!("{prefix}_rd_m"), col(&r.rd.m)));
    for (q, f) in r.rf.iter().enumerate() {
        out.push((format!("{prefix}_rf{q}"), col(f)));
    }
}

impl RomModel {
    fn blobs(&self) -> Vec<(String, DMatrix<f64>)> {
        let c = &self.couplings;
        let mut out = vec![
            ("v1".to_string(), self.v1.v.clone()),
            ("v2".to_string(), self.v2.v.clone()),
            ("phi_d".to_string(), self.deim.phi_d.v.clone()),
            ("phi_n".to_string(), self.deim.phi_n.v.clone()),
            ("a1n_k".to_string(), c.a1n.k.clone()),
            ("a1n_m".to_string(), c.a1n.m.clone()),
            ("a2n_k".to_string(), c.a2n.k.clone()),
            ("a2n_m".to_string(), c.a2n.m.clone()),
            ("lift1_k".to_string(), col(&c.lift1.k)),
            ("lift1_m".to_string(), col(&c.lift1.m)),
            ("lift2_k".to_string(), col(&c.lift2.k)),
            ("lift2_m".to_string(), col(&c.lift2.m)),
            ("dirichlet_k".to_string(), c.dirichlet_raw.k.clone()),
            ("dirichlet_m".to_string(), c.dirichlet_raw.m.clone()),
            ("trace_rows".to_string(), c.trace_rows.clone()),
            ("neumann".to_string(), c.neumann_raw.clone()),
            ("minv_nn".to_string(), c.minv_nn.clone()),
        ];
        for (q, f) in c.f1n.iter().enumerate() {
            out.push((format!("f1n{q}"), col(f)));
        }
        for (q, f) in c.f2n.iter().enumerate() {
            out.push((format!("f2n{q}"), col(f)));
        }
        residual_blobs("primal", &c.primal_rows, &mut out);
        residual_blobs("sampled", &c.sampled_rows, &mut out);
        out
    }

    /// Writes a manifest plus one binary blob per array into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let blobs = self.blobs();
        let mut entries = Vec::with_capacity(blobs.len());
        for (name, m) in &blobs {
            write_blob(&dir.join(format!("{name}.bin")), m)?;
            entries.push(BlobEntry {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        let d = &self.deim;
        let manifest = ModelManifest {
            format: MODEL_FORMAT.into(),
            meta: self.meta.clone(),
            ranks: self.ranks(),
            singular_values: [
                self.v1.singular_values.clone(),
                self.v2.singular_values.clone(),
                d.phi_d.singular_values.clone(),
                d.phi_n.singular_values.clone(),
            ],
            magic_d_slave: d.magic_d_slave.clone(),
            paired_d_master: d.paired_d_master.clone(),
            pair_d_dist: d.pair_d_dist.clone(),
            magic_n_master: d.magic_n_master.clone(),
            paired_n_slave: d.paired_n_slave.clone(),
            pair_n_dist: d.pair_n_dist.clone(),
            layout1: self.layout1.clone(),
            layout2: self.layout2.clone(),
            blobs: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<RomModel> {
        let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != MODEL_FORMAT {
            return Err(Error::Format(format!("unsupported model format `{}`", manifest.format)));
        }
        let mut blobs = std::collections::HashMap::new();
        for e in &manifest.blobs {
            blobs.insert(e.name.clone(), read_blob(&dir.join(format!("{}.bin", e.name)), e.rows, e.cols)?);
        }
        let mut take = |name: &str| -> Result<DMatrix<f64>> {
            blobs
                .remove(name)
                .ok_or_else(|| Error::Format(format!("model blob `{name}` missing")))
        };
        let vec = |m: DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        let n_terms = manifest.meta.source.n_terms();
        let residual = |prefix: &str, take: &mut dyn FnMut(&str) -> Result<DMatrix<f64>>| -> Result<ResidualRows> {
            Ok(ResidualRows {
                rv: Affine {
                    k: take(&format!("{prefix}_rv_k"))?,
                    m: take(&format!("{prefix}_rv_m"))?,
                },
                rg: Affine {
                    k: take(&format!("{prefix}_rg_k"))?,
                    m: take(&format!("{prefix}_rg_m"))?,
                },
                rd: Affine {
                    k: vec(take(&format!("{prefix}_rd_k"))?),
                    m: vec(take(&format!("{prefix}_rd_m"))?),
                },
                rf: (0..n_terms)
                    .map(|q| take(&format!("{prefix}_rf{q}")).map(vec))
                    .collect::<Result<_>>()?,
            })
        };
        let primal_rows = residual("primal", &mut take)?;
        let sampled_rows = residual("sampled", &mut take)?;
        let couplings = Couplings {
            a1n: Affine {
                k: take("a1n_k")?,
                m: take("a1n_m")?,
            },
            a2n: Affine {
                k: take("a2n_k")?,
                m: take("a2n_m")?,
            },
            f1n: (0..n_terms).map(|q| take(&format!("f1n{q}")).map(vec)).collect::<Result<_>>()?,
            f2n: (0..n_terms).map(|q| take(&format!("f2n{q}")).map(vec)).collect::<Result<_>>()?,
            lift1: Affine {
                k: vec(take("lift1_k")?),
                m: vec(take("lift1_m")?),
            },
            lift2: Affine {
                k: vec(take("lift2_k")?),
                m: vec(take("lift2_m")?),
            },
            dirichlet_raw: Affine {
                k: take("dirichlet_k")?,
                m: take("dirichlet_m")?,
            },
            trace_rows: take("trace_rows")?,
            neumann_raw: take("neumann")?,
            primal_rows,
            sampled_rows,
            minv_nn: take("minv_nn")?,
        };
        let tol = &manifest.meta.tolerances;
        let [sv1, sv2, svd, svn] = manifest.singular_values;
        let basis = |v, s, t| PodBasis {
            v,
            singular_values: s,
            energy_tol: t,
        };
        let v1 = basis(take("v1")?, sv1, tol.eps1);
        let v2 = basis(take("v2")?, sv2, tol.eps2);
        let deim = DeimInterfaceModel {
            phi_d: basis(take("phi_d")?, svd, tol.eps_d),
            magic_d_slave: manifest.magic_d_slave,
            paired_d_master: manifest.paired_d_master,
            pair_d_dist: manifest.pair_d_dist,
            phi_n: basis(take("phi_n")?, svn, tol.eps_n),
            magic_n_master: manifest.magic_n_master,
            paired_n_slave: manifest.paired_n_slave,
            pair_n_dist: manifest.pair_n_dist,
        };
        let model = RomModel::assemble(manifest.meta, v1, v2, deim, couplings, manifest.layout1, manifest.layout2)?;
        if model.ranks() != manifest.ranks {
            return Err(Error::Format("model ranks disagree with the manifest".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pod_single_snapshot() {
        let s = DMatrix::from_column_slice(3, 1, &[3.0, -4.0, 0.0]);
        let b = pod(&s, 1e-8, None).unwrap();
        assert_eq!(b.rank(), 1);
        // sign flipped so that the largest-magnitude entry (-4) becomes positive
        assert!((b.v.column(0) - DVector::from_vec(vec![-0.6, 0.8, 0.0])).amax() < 1e-15);
        let twice = DMatrix::from_columns(&[s.column(0), s.column(0)]);
        assert_eq!(pod(&twice, 0.5, None).unwrap().rank(), 1);
    }

    #[test]
    fn pod_recovers_rank_three() {
        let s = random_matrix(40, 3, 1) * random_matrix(3, 12, 2);
        let b = pod(&s, 1e-10, None).unwrap();
        assert_eq!(b.rank(), 3);
        let r = &s - &b.v * b.v.tr_mul(&s);
        assert!(r.norm() / s.norm() <= 1e-9);
        let gram = b.v.tr_mul(&b.v) - DMatrix::identity(3, 3);
        assert!(gram.norm() <= 1e-12);
        assert!(b.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pod_of_nearly_constant_columns() {
        // rank one up to roundoff; a faulty SVD returned a non-constant mode here
        let c = [0.3665886901682659, 0.4829185564754454, 0.3415586236724705, 0.18844744594821258, 0.445001686368343, 0.4496281508130068];
        let s = DMatrix::from_fn(7, 6, |i, j| c[j] * (1.0 + 1e-16 * i as f64));
        let b = pod(&s, 0.0, None).unwrap();
        assert_eq!(b.rank(), 1);
        let expected = 1.0 / 7f64.sqrt();
        assert!(b.v.iter().all(|&x| (x - expected).abs() < 1e-12), "{}", b.v);
    }

    #[test]
    fn pod_rejects_zero_snapshots() {
        assert!(matches!(pod(&DMatrix::zeros(4, 2), 1e-3, None), Err(Error::EmptySnapshots)));
        assert!(matches!(pod(&DMatrix::zeros(4, 0), 1e-3, None), Err(Error::EmptySnapshots)));
    }

    #[test]
    fn pod_tail_energy_matches_projection_error() {
        let s = random_matrix(30, 10, 5);
        for n in 1..10 {
            let b = pod(&s, 0.0, Some(n)).unwrap();
            let err = (&s - &b.v * b.v.tr_mul(&s)).norm_squared();
            let tail: f64 = b.singular_values[n..].iter().map(|x| x * x).sum();
            assert!((err - tail).abs() <= 1e-10 * tail.max(1e-300), "{n}: {err} {tail}");
        }
    }

    #[test]
    fn nested_truncation_equals_capped_training() {
        let s = random_matrix(25, 8, 11);
        let full = pod(&s, 0.0, None).unwrap();
        for r in 1..8 {
            let a = full.truncated(r, "n").unwrap().v;
            let b = pod(&s, 0.0, Some(r)).unwrap().v;
            let pa = &a * a.transpose();
            let pb = &b * b.transpose();
            assert!((pa - pb).norm() < 1e-10);
        }
        assert!(matches!(full.truncated(9, "n1"), Err(Error::RankExceeded { requested: 9, .. })));
    }

    #[test]
    fn deim_on_canonical_vectors() {
        let mut phi = DMatrix::zeros(10, 2);
        phi[(3, 0)] = 1.0;
        phi[(7, 1)] = 1.0;
        assert_eq!(deim_select(&phi).unwrap(), vec![3, 7]);
    }

    #[test]
    fn deim_exact_for_in_span_data() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let s = DMatrix::from_fn(20, 9, |i, j| {
            let a = 1.0 + j as f64;
            a * (std::f64::consts::PI * x[i]).sin() + (2.0 - 0.3 * a) * (3.0 * x[i]).cos()
        });
        let phi = pod(&s, 1e-12, None).unwrap();
        assert_eq!(phi.rank(), 2);
        let idx = deim_select(&phi.v).unwrap();
        for c in s.column_iter() {
            let v = c.into_owned();
            let r = deim_reconstruct(&phi.v, &idx, &v).unwrap();
            assert!((r - &v).amax() <= 1e-12 * v.amax());
        }
    }

    #[test]
    fn deim_full_basis_reconstructs_anything() {
        let q = random_matrix(6, 6, 3).qr().q();
        let idx = deim_select(&q).unwrap();
        let v = DVector::from_fn(6, |i, _| (i as f64).exp());
        assert!((deim_reconstruct(&q, &idx, &v).unwrap() - &v).amax() < 1e-12 * v.amax());
    }

    fn line(n: usize) -> Vec<[f64; 3]> {
        (0..=n).map(|i| [0.0, i as f64 / n as f64, 0.0]).collect()
    }

    #[test]
    fn pairing_coincident_and_ties() {
        let slave = line(2);
        let master = line(4);
        let (p, d) = pair_points(&[1], &slave, &master).unwrap();
        assert_eq!((p[0], d[0]), (2, 0.0));
        let (p, d) = pair_points(&[1], &master, &slave).unwrap();
        assert_eq!(p[0], 1, "0.25 is equidistant to 0 and 0.5; the last scanned wins");
        assert_eq!(d[0], 0.25);
        let (p, d) = pair_points(&[0, 1, 2], &slave, &slave).unwrap();
        assert_eq!(p, vec![0, 1, 2]);
        assert!(d.iter().all(|&x| x == 0.0));
        assert!(pair_points(&[0], &slave, &[]).is_err());
    }

    proptest! {
        #[test]
        fn deim_is_a_projection_and_stable(seed in 0u64..1000, m in 1usize..6) {
            let phi = random_matrix(15, m, seed).qr().q();
            let idx = deim_select(&phi).unwrap();
            prop_assert_eq!(&idx, &deim_select(&phi).unwrap());
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), m);
            let v = random_matrix(15, 1, seed + 7).column(0).into_owned();
            let once = deim_reconstruct(&phi, &idx, &v).unwrap();
            let twice = deim_reconstruct(&phi, &idx, &once).unwrap();
            prop_assert!((&twice - &once).amax() <= 1e-10 * once.amax().max(1.0));
            let inside = &phi * random_matrix(m, 1, seed + 9).column(0);
            let back = deim_reconstruct(&phi, &idx, &inside).unwrap();
            prop_assert!((back - &inside).amax() <= 1e-10 * inside.amax().max(1.0));
        }

        #[test]
        fn pod_basis_orthonormal(seed in 0u64..1000, rows in 5usize..30, cols in 1usize..8) {
            let s = random_matrix(rows, cols, seed);
            let b = pod(&s, 0.0, None).unwrap();
            let gram = b.v.tr_mul(&b.v) - DMatrix::identity(b.rank(), b.rank());
            prop_assert!(gram.norm() <= 1e-12);
            prop_assert!(b.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
