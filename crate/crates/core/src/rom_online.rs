//! Online reduced Dirichlet-Neumann iteration and full-field reconstruction.
//!
//! The slave receives its interface trace through DEIM samples `w` of the
//! master trace at the paired points; the master receives the primal slave
//! residual sampled at the Neumann partners. Every array touched inside the
//! loop is reduced, so one iteration costs `O((n1 + n2)(m_d + m_n) + n1^2 + n2^2)`.

use std::io::Write;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dd_fom::{DnConfig, InitialGuess};
use crate::error::{Error, Result};
use crate::fem::{OperatorCoeffs, ParameterSample, TimeScheme};
use crate::rom_offline::{Affine, RomModel};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RomTimings {
    /// Reduced operator assembly and factorization.
    pub setup_s: f64,
    /// DN iterations.
    pub loop_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RomState {
    pub un1: DVector<f64>,
    pub un2: DVector<f64>,
    /// Master trace samples imposed on the slave in the last iteration.
    pub w: DVector<f64>,
    /// Relaxed samples carried to the next iteration (or time step).
    pub w_relaxed: DVector<f64>,
    /// Master trace at the Dirichlet partners, `U12 V2 un2`.
    pub master_trace_at_pairs: DVector<f64>,
    /// Primal slave residual at the Neumann partners.
    pub r_slave_at_magic: DVector<f64>,
    pub iters: usize,
    pub converged: bool,
    pub gap_history: Vec<f64>,
    pub timings: RomTimings,
}

impl RomState {
    pub fn final_gap(&self) -> f64 {
        self.gap_history.last().copied().unwrap_or(f64::NAN)
    }

    pub fn diagnostics(&self, mu: &ParameterSample) -> RomDiagnostics {
        RomDiagnostics {
            mu: mu.clone(),
            iters: self.iters,
            converged: self.converged,
            final_gap: self.final_gap(),
            timings: self.timings.clone(),
        }
    }
}

/// One JSON record per online solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RomDiagnostics {
    pub mu: ParameterSample,
    pub iters: usize,
    pub converged: bool,
    pub final_gap: f64,
    pub timings: RomTimings,
}

impl RomDiagnostics {
    pub fn write_json_line<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }
}

enum Factor {
    Chol(Cholesky<f64, Dyn>),
    Lu(nalgebra::LU<f64, Dyn, Dyn>),
}

impl Factor {
    fn new(a: DMatrix<f64>, what: &str) -> Result<Self> {
        match a.clone().cholesky() {
            Some(c) => Ok(Factor::Chol(c)),
            None => {
                let lu = a.lu();
                if lu.is_invertible() {
                    Ok(Factor::Lu(lu))
                } else {
                    Err(Error::Singular(format!("reduced {what} system")))
                }
            }
        }
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            Factor::Chol(c) => c.solve(b),
            Factor::Lu(l) => l.solve(b).expect("invertibility checked"),
        }
    }
}

fn combine<T>(c: OperatorCoeffs, a: &Affine<T>) -> T
where
    for<'x> &'x T: std::ops::Mul<f64, Output = T>,
    T: std::ops::Add<Output = T>,
{
    &a.k * c.stiffness + &a.m * c.mass
}

/// Reduced systems for one parameter (and time step size).
struct OnlineSystem<'a> {
    model: &'a RomModel,
    a1: Factor,
    a2: Factor,
    dirichlet: DMatrix<f64>,
    rv: DMatrix<f64>,
    rg: DMatrix<f64>,
    /// `-(c . lift1)`.
    neg_lift1: DVector<f64>,
    neg_lift2: DVector<f64>,
    /// `c . rd`.
    rd: DVector<f64>,
}

impl<'a> OnlineSystem<'a> {
    fn new(model: &'a RomModel, c: OperatorCoeffs) -> Result<Self> {
        let cp = &model.couplings;
        let on = &model.online;
        Ok(OnlineSystem {
            model,
            a1: Factor::new(combine(c, &cp.a1n), "slave")?,
            a2: Factor::new(combine(c, &cp.a2n), "master")?,
            dirichlet: combine(c, &on.dirichlet),
            rv: combine(c, &on.residual.rv),
            rg: combine(c, &on.residual.rg),
            neg_lift1: -combine(c, &cp.lift1),
            neg_lift2: -combine(c, &cp.lift2),
            rd: combine(c, &on.residual.rd),
        })
    }

    /// Source contributions `(f1n, f2n, rf)` at the given coefficients.
    fn loads(&self, theta: &[f64]) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let cp = &self.model.couplings;
        let mut f1 = self.neg_lift1.clone();
        let mut f2 = self.neg_lift2.clone();
        let mut rf = self.rd.clone();
        for (q, &t) in theta.iter().enumerate() {
            if t != 0.0 {
                f1.axpy(t, &cp.f1n[q], 1.0);
                f2.axpy(t, &cp.f2n[q], 1.0);
                rf.axpy(-t, &self.model.online.residual.rf[q], 1.0);
            }
        }
        (f1, f2, rf)
    }

    /// DN loop on the reduced systems. `rf` holds the constant part of the
    /// residual samples.
    fn run(&self, f1: &DVector<f64>, f2: &DVector<f64>, rf: &DVector<f64>, mut w: DVector<f64>, cfg: &DnConfig) -> RomState {
        let on = &self.model.online;
        let trace_rows = &self.model.couplings.trace_rows;
        let mut gap_history = Vec::new();
        let mut iters = 0;
        loop {
            iters += 1;
            let un1 = self.a1.solve(&(f1 - &self.dirichlet * &w));
            let s = &self.rv * &un1 + &self.rg * &w + rf;
            // master primal residual is minus the transferred slave one
            let un2 = self.a2.solve(&(f2 - &on.neumann * &s));
            let t = trace_rows * &un2;
            let d = &w - &t;
            let gap = d.dot(&(&on.gram_d * &d)).max(0.0).sqrt();
            gap_history.push(gap);
            let w_relaxed = &t * cfg.omega + &w * (1.0 - cfg.omega);
            let converged = gap < cfg.tol_interface;
            if converged || iters >= cfg.max_iters {
                return RomState {
                    un1,
                    un2,
                    w,
                    w_relaxed,
                    master_trace_at_pairs: t,
                    r_slave_at_magic: s,
                    iters,
                    converged,
                    gap_history,
                    timings: RomTimings::default(),
                };
            }
            w = w_relaxed;
        }
    }
}

fn initial_samples(model: &RomModel, cfg: &DnConfig) -> Result<DVector<f64>> {
    let pairs = &model.deim.paired_d_master;
    match &cfg.initial_guess {
        InitialGuess::Zero => Ok(DVector::zeros(pairs.len())),
        InitialGuess::Trace(v) if v.len() == model.layout2.gamma.len() => {
            Ok(DVector::from_iterator(pairs.len(), pairs.iter().map(|&p| v[p])))
        }
        InitialGuess::Trace(v) => Err(Error::Dimension(format!(
            "initial guess has {} entries, master interface has {}",
            v.len(),
            model.layout2.gamma.len()
        ))),
    }
}

fn check(model: &RomModel, mu: &ParameterSample, cfg: &DnConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    mu.validate()?;
    let theta = model.meta.source.coefficients(mu, 0.0);
    if theta.len() != model.n_terms() {
        return Err(Error::Dimension(format!(
            "source has {} terms, model was trained with {}",
            theta.len(),
            model.n_terms()
        )));
    }
    Ok(theta)
}

/// Steady reduced DN solve. Non-convergence is flagged on the state.
pub fn rom_solve(model: &RomModel, mu: &ParameterSample, cfg: &DnConfig) -> Result<RomState> {
    let theta = check(model, mu, cfg)?;
    let start = Instant::now();
    let sys = OnlineSystem::new(model, OperatorCoeffs::steady(mu))?;
    let (f1, f2, rf) = sys.loads(&theta);
    let w0 = initial_samples(model, cfg)?;
    let setup = start.elapsed().as_secs_f64();
    let mut state = sys.run(&f1, &f2, &rf, w0, cfg);
    let total = start.elapsed().as_secs_f64();
    state.timings = RomTimings {
        setup_s: setup,
        loop_s: total - setup,
        total_s: total,
    };
    Ok(state)
}

/// Backward Euler from zero initial data; each step starts from the previous
/// step's relaxed samples.
pub fn rom_solve_unsteady(
    model: &RomModel,
    mu: &ParameterSample,
    cfg: &DnConfig,
    scheme: &TimeScheme,
) -> Result<Vec<RomState>> {
    check(model, mu, cfg)?;
    scheme.validate()?;
    let start = Instant::now();
    let c = OperatorCoeffs::backward_euler(mu, scheme.dt);
    let sys = OnlineSystem::new(model, c)?;
    let cp = &model.couplings;
    let on = &model.online;
    let inv_dt = 1.0 / scheme.dt;
    let mut w = initial_samples(model, cfg)?;
    let mut un1p = DVector::zeros(cp.a1n.k.nrows());
    let mut un2p = DVector::zeros(cp.a2n.k.nrows());
    let mut wp = DVector::zeros(w.len());
    let mut first = true;
    let mut states = Vec::with_capacity(scheme.n_steps);
    for n in 1..=scheme.n_steps {
        let step_start = Instant::now();
        let theta = model.meta.source.coefficients(mu, scheme.time(n));
        let (mut f1, mut f2, mut rf) = sys.loads(&theta);
        // previous-step mass terms; zero initial data contributes nothing at n = 1
        if !first {
            f1 += (&cp.a1n.m * &un1p + &on.dirichlet.m * &wp + &cp.lift1.m) * inv_dt;
            f2 += (&cp.a2n.m * &un2p + &cp.lift2.m) * inv_dt;
            rf -= (&on.residual.rv.m * &un1p + &on.residual.rg.m * &wp + &on.residual.rd.m) * inv_dt;
        }
        let mut state = sys.run(&f1, &f2, &rf, w.clone(), cfg);
        let elapsed = if first { start.elapsed() } else { step_start.elapsed() }.as_secs_f64();
        state.timings = RomTimings {
            setup_s: 0.0,
            loop_s: elapsed,
            total_s: elapsed,
        };
        w = state.w_relaxed.clone();
        un1p = state.un1.clone();
        un2p = state.un2.clone();
        wp = state.w.clone();
        first = false;
        states.push(state);
    }
    Ok(states)
}

/// Full slave and master fields from a reduced state, with Dirichlet values
/// and the imposed slave interface trace inserted.
pub fn reconstruct(model: &RomModel, state: &RomState) -> (DVector<f64>, DVector<f64>) {
    let (l1, l2) = (&model.layout1, &model.layout2);
    let mut u1 = DVector::zeros(l1.n_total);
    let mut u2 = DVector::zeros(l2.n_total);
    let int1 = &model.v1.v * &state.un1;
    let int2 = &model.v2.v * &state.un2;
    let trace1 = &model.deim.phi_d.v * (&model.online.inv_d * &state.w);
    for (p, &i) in l1.internal.iter().enumerate() {
        u1[i] = int1[p];
    }
    for (p, &i) in l1.gamma.iter().enumerate() {
        u1[i] = trace1[p];
    }
    for (p, &i) in l1.dirichlet.iter().enumerate() {
        u1[i] = l1.g_dirichlet[p];
    }
    for (p, &i) in l2.internal.iter().enumerate() {
        u2[i] = int2[p];
    }
    for (p, &i) in l2.dirichlet.iter().enumerate() {
        u2[i] = l2.g_dirichlet[p];
    }
    (u1, u2)
}
