//! The fully discretized energy-adaptive Sobolev gradient flow for the
//! lumped discretization: discrete Green's operator solves, step-size
//! policies (fixed, theoretical bound, adaptive line search), normalization,
//! termination on the relative residual, and the linearized eigenproblem
//! used to certify that the computed state is the ground state.

use std::sync::Arc;
use std::time::Instant;

use crate::assembly::{
    assemble_consistent_mass, assemble_lumped_mass, assemble_stiffness, is_irreducible,
    is_m_matrix, SparseSpdMatrix,
};
use crate::forms::ProblemData;
use crate::linalg::{pcg, smallest_generalized_eigs, sym_eig_dense, CholeskyFactor, MassOp};
use crate::mesh::{element_nodal_map, FeFunction, SimplicialMesh};
use crate::quadrature::bary_monomial_integral;
use crate::{Error, Result};

/// Unknown-count threshold between direct refactorization per flow step and
/// conjugate gradients preconditioned with a frozen Cholesky factor.
const DIRECT_SOLVE_MAX_UNKNOWNS: usize = 100_000;
/// PCG iteration count above which the frozen preconditioner is refreshed.
const FROZEN_REFRESH_PCG_ITERS: usize = 80;

/// Step-size selection policy for the gradient flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepPolicy {
    /// Fixed step size in (0, 1].
    Fixed(f64),
    /// The theoretical upper bound `2 min{(1 + kappa C1 C2^4)^-1, E0^-1/2}`,
    /// capped at 1. For large kappa this practically stagnates.
    PaperBound,
    /// One-dimensional energy minimization over step sizes in [0, 1].
    Adaptive,
}

/// Which mass matrix realizes the `(u, G u)_{L^2}` pairing of the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// Consistent P1 mass matrix (the L2 inner product as printed).
    Consistent,
    /// Lumped diagonal, for experimentation.
    Lumped,
}

/// Options of the gradient flow.
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub step_policy: StepPolicy,
    /// Step-size floor preventing stagnation.
    pub tau_min: f64,
    /// Termination threshold for the relative residual.
    pub tol_residual: f64,
    pub max_iters: usize,
    /// Relative residual target of inner linear solves.
    pub linear_solver_tol: f64,
    pub record_trace: bool,
    pub pairing: Pairing,
    /// Weight the Green's operator density term by kappa. With `false` the
    /// operator uses the unit coefficient; its fixed points then solve the
    /// kappa = 1 eigenproblem, so leave this on unless experimenting.
    pub greens_kappa_weight: bool,
    /// Fail instead of warn when the mesh violates the M-matrix or
    /// irreducibility hypotheses.
    pub strict_mesh: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            step_policy: StepPolicy::Adaptive,
            tau_min: 1e-3,
            tol_residual: 1e-12,
            max_iters: 10_000,
            linear_solver_tol: 1e-13,
            record_trace: true,
            pairing: Pairing::Consistent,
            greens_kappa_weight: true,
            strict_mesh: false,
        }
    }
}

impl FlowConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "tau_min must lie in (0, 1], got {}",
                self.tau_min
            )));
        }
        if !(self.tol_residual > 0.0) {
            return Err(Error::InvalidInput("tol_residual must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the iteration trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceRecord {
    pub iter: usize,
    pub energy: f64,
    pub residual: f64,
    /// Step size taken from this iterate (0 for the final row).
    pub tau: f64,
    /// Minimum interior coefficient of this iterate.
    pub min_coeff: f64,
}

/// Solver metadata recorded with every run.
#[derive(Debug, Clone)]
pub struct SolveMeta {
    pub method: &'static str,
    pub backend: String,
    /// Linear-algebra kernels run sequentially; recorded for reproducibility.
    pub threads: usize,
    pub mesh_warnings: Vec<String>,
    /// Cumulative time spent refreshing the density-weighted operator.
    pub nonlinear_assembly_seconds: f64,
    pub wall_seconds: f64,
}

/// A converged (or best-effort) ground state.
#[derive(Debug, Clone)]
pub struct GroundStateSolution {
    /// The state, lumped-normalized and positive-signed.
    pub u: FeFunction,
    pub lambda_h: f64,
    pub energy_h: f64,
    pub iterations: usize,
    /// False when `max_iters` was exhausted before the residual tolerance.
    pub converged: bool,
    pub trace: Vec<TraceRecord>,
    pub meta: SolveMeta,
}

impl GroundStateSolution {
    /// Trace in CSV form: `iter,energy,residual,tau,min_coeff`, full double
    /// precision (17 significant digits).
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,energy,residual,tau,min_coeff\n");
        for r in &self.trace {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.iter, r.energy, r.residual, r.tau, r.min_coeff
            ));
        }
        out
    }
}

/// The explicit step-size bound of the convergence theory.
#[derive(Debug, Clone, Copy)]
pub struct StepSizeBound {
    /// Smallest eigenvalue of the quadratic (P2) reference-element mass matrix.
    pub gamma: f64,
    /// Norm equivalence constant, `1 / (gamma (d+1) d!)`.
    pub c1: f64,
    /// Embedding constant from the dimension table.
    pub c2: f64,
    /// `2 min{(1 + kappa C1 C2^4)^-1, E0^-1/2}`.
    pub bound: f64,
}

/// Mass matrix of the quadratic Lagrange element on the unit reference
/// simplex, from exact barycentric integration.
pub fn p2_reference_mass(d: usize) -> Result<Vec<Vec<f64>>> {
    if d == 0 || d > 3 {
        return Err(Error::InvalidInput(format!("dimension {d} out of range")));
    }
    // Each basis function is a list of (coefficient, barycentric exponents).
    type Poly = Vec<(f64, [usize; 4])>;
    let mut basis: Vec<Poly> = Vec::new();
    for i in 0..=d {
        let mut e2 = [0usize; 4];
        e2[i] = 2;
        let mut e1 = [0usize; 4];
        e1[i] = 1;
        basis.push(vec![(2.0, e2), (-1.0, e1)]);
    }
    for i in 0..=d {
        for j in (i + 1)..=d {
            let mut e = [0usize; 4];
            e[i] = 1;
            e[j] = 1;
            basis.push(vec![(4.0, e)]);
        }
    }
    let nb = basis.len();
    let mut mass = vec![vec![0.0; nb]; nb];
    for a in 0..nb {
        for b in 0..nb {
            let mut acc = 0.0;
            for &(ca, ea) in &basis[a] {
                for &(cb, eb) in &basis[b] {
                    let mut e = [0usize; 4];
                    for t in 0..=d {
                        e[t] = ea[t] + eb[t];
                    }
                    acc += ca * cb * bary_monomial_integral(d, &e[..=d]);
                }
            }
            mass[a][b] = acc;
        }
    }
    Ok(mass)
}

/// Evaluate the step-size bound constants for the given problem and initial
/// energy. The domain size entering C2 is the per-axis extent of the mesh
/// bounding box.
pub fn step_bound(data: &ProblemData, e0: f64) -> Result<StepSizeBound> {
    if !(e0 > 0.0) {
        return Err(Error::InvalidInput(format!(
            "initial energy must be positive, got {e0}"
        )));
    }
    let d = data.mesh().dim();
    let mass = p2_reference_mass(d)?;
    let (eigs, _) = sym_eig_dense(&mass);
    let gamma = eigs[0];
    let dfact: f64 = (1..=d).map(|i| i as f64).product();
    let c1 = 1.0 / (gamma * (d + 1) as f64 * dfact);
    let omega = data.mesh().domain_extent();
    let c2 = match d {
        1 => omega.powf(0.75),
        2 => 2.0 * omega.powf(0.25),
        3 => 4.0 * omega.powf(1.0 / 12.0),
        _ => unreachable!(),
    };
    let bound = 2.0 * (1.0 / (1.0 + data.kappa() * c1 * c2.powi(4))).min(1.0 / e0.sqrt());
    Ok(StepSizeBound {
        gamma,
        c1,
        c2,
        bound,
    })
}

/// Cached interior-node matrices of the lumped discretization.
pub(crate) struct LumpedSystem {
    pub mesh: Arc<SimplicialMesh>,
    /// Interior stiffness.
    pub s: SparseSpdMatrix,
    /// M(V) diagonal over interior nodes.
    pub mv: Vec<f64>,
    /// Unweighted lumped mass diagonal over interior nodes.
    pub m: Vec<f64>,
    /// Interior consistent mass (for the L2 pairing).
    pub mc: SparseSpdMatrix,
}

impl LumpedSystem {
    pub fn new(data: &ProblemData) -> Result<LumpedSystem> {
        let mesh = data.mesh().clone();
        let s = assemble_stiffness(&mesh)?;
        let mv = assemble_lumped_mass(&mesh, Some(data.potential_values()), false)?
            .diag()
            .to_vec();
        let m = assemble_lumped_mass(&mesh, None, false)?.diag().to_vec();
        let mc = assemble_consistent_mass(&mesh)?;
        Ok(LumpedSystem { mesh, s, mv, m, mc })
    }

    /// lambda(u) for an interior vector of any scale; evaluated as if the
    /// vector were renormalized to unit lumped norm.
    pub fn eigenvalue(&self, u: &[f64], kappa: f64) -> f64 {
        let mut su = vec![0.0; u.len()];
        self.s.matvec(u, &mut su);
        let mut quad = crate::linalg::dot(u, &su);
        let mut quart = 0.0;
        let mut den = 0.0;
        for i in 0..u.len() {
            quad += self.mv[i] * u[i] * u[i];
            quart += self.m[i] * u[i].powi(4);
            den += self.m[i] * u[i] * u[i];
        }
        quad / den + kappa * quart / (den * den)
    }

    pub fn energy(&self, u: &[f64], kappa: f64) -> f64 {
        let mut su = vec![0.0; u.len()];
        self.s.matvec(u, &mut su);
        let mut quad = crate::linalg::dot(u, &su);
        let mut quart = 0.0;
        for i in 0..u.len() {
            quad += self.mv[i] * u[i] * u[i];
            quart += self.m[i] * u[i].powi(4);
        }
        0.5 * quad + 0.25 * kappa * quart
    }

    pub fn lumped_norm(&self, u: &[f64]) -> f64 {
        self.m
            .iter()
            .zip(u)
            .map(|(m, v)| m * v * v)
            .sum::<f64>()
            .sqrt()
    }
}

enum Backend {
    Direct(CholeskyFactor),
    Frozen {
        factor: CholeskyFactor,
        last_pcg_iters: usize,
    },
}

/// Linear-solve workspace for operators `S + diag(M(V) + c m u^2)` whose
/// diagonal changes every flow iteration.
pub(crate) struct GreensWorkspace {
    a_work: SparseSpdMatrix,
    diag_slots: Vec<usize>,
    s_diag: Vec<f64>,
    backend: Backend,
    linear_tol: f64,
    warm_start: Vec<f64>,
    pub backend_name: String,
}

impl GreensWorkspace {
    pub fn new(sys: &LumpedSystem, density_diag: &[f64], linear_tol: f64) -> Result<GreensWorkspace> {
        let m = sys.s.dim();
        let mut a_work = sys.s.clone();
        let diag_slots: Vec<usize> = (0..m)
            .map(|i| {
                sys.s
                    .slot(i, i)
                    .ok_or_else(|| Error::Linalg(format!("missing diagonal at row {i}")))
            })
            .collect::<Result<_>>()?;
        let s_diag: Vec<f64> = diag_slots.iter().map(|&p| sys.s.values()[p]).collect();
        for i in 0..m {
            a_work.values_mut()[diag_slots[i]] = s_diag[i] + density_diag[i];
        }
        let factor = CholeskyFactor::new(&a_work)?;
        let (backend, backend_name) = if m <= DIRECT_SOLVE_MAX_UNKNOWNS {
            (Backend::Direct(factor), "direct-cholesky".to_string())
        } else {
            (
                Backend::Frozen {
                    factor,
                    last_pcg_iters: 0,
                },
                "pcg+frozen-cholesky".to_string(),
            )
        };
        Ok(GreensWorkspace {
            a_work,
            diag_slots,
            s_diag,
            backend,
            linear_tol,
            warm_start: vec![0.0; m],
            backend_name,
        })
    }

    /// Install a new operator diagonal; the direct backend refactorizes, the
    /// frozen backend refreshes only when PCG slowed down.
    pub fn set_density(&mut self, density_diag: &[f64]) -> Result<()> {
        for (i, &p) in self.diag_slots.iter().enumerate() {
            self.a_work.values_mut()[p] = self.s_diag[i] + density_diag[i];
        }
        match &mut self.backend {
            Backend::Direct(factor) => factor.refactor(&self.a_work)?,
            Backend::Frozen {
                factor,
                last_pcg_iters,
            } => {
                if *last_pcg_iters > FROZEN_REFRESH_PCG_ITERS {
                    factor.refactor(&self.a_work)?;
                    *last_pcg_iters = 0;
                }
            }
        }
        Ok(())
    }

    /// Solve `A x = rhs` with the current operator.
    pub fn solve(&mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        match &mut self.backend {
            Backend::Direct(factor) => Ok(factor.solve(rhs)),
            Backend::Frozen {
                factor,
                last_pcg_iters,
            } => {
                let mut x = self.warm_start.clone();
                let a = &self.a_work;
                let info = pcg(
                    |v, out| a.matvec(v, out),
                    |r, out| {
                        out.copy_from_slice(r);
                        factor.solve_in_place(out);
                    },
                    rhs,
                    &mut x,
                    self.linear_tol,
                    2000,
                )?;
                *last_pcg_iters = info.iterations;
                self.warm_start.copy_from_slice(&x);
                Ok(x)
            }
        }
    }

    pub fn matrix(&self) -> &SparseSpdMatrix {
        &self.a_work
    }
}

/// Quartic-over-quadratic rational model of the energy along the normalized
/// segment `tau -> (u + tau d) / ||u + tau d||`; evaluation is O(1) per tau,
/// so the line search is essentially free.
pub(crate) struct SegmentEnergy {
    a: [f64; 3],
    q: [f64; 3],
    r: [f64; 5],
    kappa_quarter: f64,
}

impl SegmentEnergy {
    /// Assemble from the quadratic form coefficients of `a(u + t d)`, the
    /// constraint norm `q(u + t d)`, and the quartic moments
    /// `[r(u^4), r(u^3 d), r(u^2 d^2), r(u d^3), r(d^4)]`.
    pub(crate) fn from_parts(a: [f64; 3], q: [f64; 3], r: [f64; 5], kappa: f64) -> SegmentEnergy {
        SegmentEnergy {
            a,
            q,
            r,
            kappa_quarter: 0.25 * kappa,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let a = self.a[0] + t * (2.0 * self.a[1] + t * self.a[2]);
        let q = self.q[0] + t * (2.0 * self.q[1] + t * self.q[2]);
        let r = self.r[0]
            + t * (4.0 * self.r[1] + t * (6.0 * self.r[2] + t * (4.0 * self.r[3] + t * self.r[4])));
        0.5 * a / q + self.kappa_quarter * r / (q * q)
    }
}

fn lumped_segment_energy(sys: &LumpedSystem, kappa: f64, u: &[f64], d: &[f64]) -> SegmentEnergy {
    let m = u.len();
    let mut su = vec![0.0; m];
    let mut sd = vec![0.0; m];
    sys.s.matvec(u, &mut su);
    sys.s.matvec(d, &mut sd);
    let mut a = [
        crate::linalg::dot(u, &su),
        crate::linalg::dot(u, &sd),
        crate::linalg::dot(d, &sd),
    ];
    let mut q = [0.0f64; 3];
    let mut r = [0.0f64; 5];
    for i in 0..m {
        let (ui, di) = (u[i], d[i]);
        a[0] += sys.mv[i] * ui * ui;
        a[1] += sys.mv[i] * ui * di;
        a[2] += sys.mv[i] * di * di;
        q[0] += sys.m[i] * ui * ui;
        q[1] += sys.m[i] * ui * di;
        q[2] += sys.m[i] * di * di;
        r[0] += sys.m[i] * ui * ui * ui * ui;
        r[1] += sys.m[i] * ui * ui * ui * di;
        r[2] += sys.m[i] * ui * ui * di * di;
        r[3] += sys.m[i] * ui * di * di * di;
        r[4] += sys.m[i] * di * di * di * di;
    }
    SegmentEnergy {
        a,
        q,
        r,
        kappa_quarter: 0.25 * kappa,
    }
}

/// Grid size of the line-search scan over [0, 1].
const TAU_GRID: usize = 65;

/// Minimize an energy profile over step sizes in `[tau_min, 1]`: 65-point
/// uniform grid scan seeded bracketing, then golden-section refinement to
/// 1e-6 in tau. The result is never worse than the scanned minimum.
pub(crate) fn line_search_tau(f: &dyn Fn(f64) -> f64, tau_min: f64) -> f64 {
    let grid = |i: usize| i as f64 / (TAU_GRID - 1) as f64;
    let mut best_i = 0usize;
    let mut best_e = f64::INFINITY;
    for i in 0..TAU_GRID {
        let e = f(grid(i));
        if e < best_e {
            best_e = e;
            best_i = i;
        }
    }
    let lo = if best_i == 0 { 0.0 } else { grid(best_i - 1) };
    let hi = if best_i == TAU_GRID - 1 {
        1.0
    } else {
        grid(best_i + 1)
    };
    // golden-section refinement
    let phi = 0.618_033_988_749_894_9_f64;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > 1e-6 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = f(x2);
        }
    }
    let mut candidates = vec![(grid(best_i), best_e), (x1, f1), (x2, f2)];
    candidates.retain(|&(t, _)| t >= tau_min);
    candidates.push((tau_min, f(tau_min)));
    candidates.push((1.0, f(1.0)));
    candidates
        .into_iter()
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(t, _)| t.clamp(tau_min, 1.0))
        .unwrap_or(tau_min)
}

/// The shared gradient-flow skeleton; the lumped and the standard method
/// plug in their operators through this interface. Vectors are over the
/// method's unknowns (interior nodes).
pub(crate) trait FlowProblem {
    fn n_unknowns(&self) -> usize;
    /// Constraint norm (lumped or L2).
    fn constraint_norm(&self, u: &[f64]) -> f64;
    fn energy(&self, u: &[f64]) -> f64;
    fn eigenvalue(&self, u: &[f64]) -> f64;
    /// Relative residual of the eigenproblem at the (normalized) iterate.
    fn residual_rel(&mut self, u: &[f64]) -> Result<f64>;
    /// Update the operator density to `u` and solve for the Green's
    /// direction `G u`; also accumulates nonlinear assembly time.
    fn greens_direction(&mut self, u: &[f64]) -> Result<Vec<f64>>;
    /// The pairing `(u, g)` used for the flow scaling.
    fn pairing(&self, u: &[f64], g: &[f64]) -> f64;
    /// Energy profile along the normalized segment from `u` in direction `d`.
    fn segment_energy(&self, u: &[f64], d: &[f64]) -> SegmentEnergy;
    fn nonlinear_assembly_seconds(&self) -> f64;
    fn backend_name(&self) -> String;
}

pub(crate) struct FlowOutcome {
    pub u: Vec<f64>,
    pub lambda: f64,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRecord>,
}

pub(crate) fn run_flow<P: FlowProblem>(
    problem: &mut P,
    config: &FlowConfig,
    u0: &[f64],
    paper_bound_tau: Option<f64>,
) -> Result<FlowOutcome> {
    config.validate()?;
    let n = problem.n_unknowns();
    if u0.len() != n {
        return Err(Error::InvalidInput("initial guess length mismatch".into()));
    }
    let mut u = u0.to_vec();
    let nrm = problem.constraint_norm(&u);
    if !(nrm > 0.0) {
        return Err(Error::InvalidInput("initial guess must be nonzero".into()));
    }
    for c in &mut u {
        *c /= nrm;
    }
    let mut trace = Vec::new();
    let mut iterations = 0usize;
    let mut converged = false;
    for it in 0..=config.max_iters {
        let energy = problem.energy(&u);
        let rel = problem.residual_rel(&u)?;
        let min_coeff = u.iter().copied().fold(f64::INFINITY, f64::min);
        if config.record_trace {
            trace.push(TraceRecord {
                iter: it,
                energy,
                residual: rel,
                tau: 0.0,
                min_coeff,
            });
        }
        iterations = it;
        if rel <= config.tol_residual {
            converged = true;
            break;
        }
        if it == config.max_iters {
            break;
        }
        let g = problem.greens_direction(&u)?;
        let sigma = problem.pairing(&u, &g);
        if !(sigma > 0.0) {
            return Err(Error::Solver(format!(
                "nonpositive pairing (u, Gu) = {sigma}; the operator lost definiteness"
            )));
        }
        let d: Vec<f64> = g.iter().zip(&u).map(|(gi, ui)| gi / sigma - ui).collect();
        let tau = match config.step_policy {
            StepPolicy::Fixed(t) => t.clamp(0.0, 1.0),
            StepPolicy::PaperBound => paper_bound_tau
                .ok_or_else(|| Error::Solver("paper bound not available".into()))?
                .min(1.0),
            StepPolicy::Adaptive => {
                let seg = problem.segment_energy(&u, &d);
                line_search_tau(&|t| seg.eval(t), config.tau_min)
            }
        };
        if config.record_trace {
            trace.last_mut().unwrap().tau = tau;
        }
        for i in 0..n {
            u[i] += tau * d[i];
        }
        let nrm = problem.constraint_norm(&u);
        for c in &mut u {
            *c /= nrm;
        }
    }
    // fix the sign so the coefficient sum is positive
    if u.iter().sum::<f64>() < 0.0 {
        for c in &mut u {
            *c = -*c;
        }
        if let Some(last) = trace.last_mut() {
            last.min_coeff = u.iter().copied().fold(f64::INFINITY, f64::min);
        }
    }
    let lambda = problem.eigenvalue(&u);
    let energy = problem.energy(&u);
    Ok(FlowOutcome {
        u,
        lambda,
        energy,
        iterations,
        converged,
        trace,
    })
}

/// The lumped method as a flow problem.
pub(crate) struct LumpedProblem {
    pub sys: LumpedSystem,
    pub kappa: f64,
    nl_coeff: f64,
    pairing_kind: Pairing,
    greens: GreensWorkspace,
    density: Vec<f64>,
    nonlinear_seconds: f64,
}

impl LumpedProblem {
    pub fn new(data: &ProblemData, config: &FlowConfig) -> Result<LumpedProblem> {
        let sys = LumpedSystem::new(data)?;
        let nl_coeff = if config.greens_kappa_weight {
            data.kappa()
        } else {
            1.0
        };
        let density = sys.mv.clone();
        let greens = GreensWorkspace::new(&sys, &density, config.linear_solver_tol)?;
        Ok(LumpedProblem {
            sys,
            kappa: data.kappa(),
            nl_coeff,
            pairing_kind: config.pairing,
            greens,
            density,
            nonlinear_seconds: 0.0,
        })
    }
}

impl FlowProblem for LumpedProblem {
    fn n_unknowns(&self) -> usize {
        self.sys.s.dim()
    }

    fn constraint_norm(&self, u: &[f64]) -> f64 {
        self.sys.lumped_norm(u)
    }

    fn energy(&self, u: &[f64]) -> f64 {
        self.sys.energy(u, self.kappa)
    }

    fn eigenvalue(&self, u: &[f64]) -> f64 {
        self.sys.eigenvalue(u, self.kappa)
    }

    fn residual_rel(&mut self, u: &[f64]) -> Result<f64> {
        let m = u.len();
        let nrm = self.sys.lumped_norm(u);
        if !(nrm > 0.0) {
            return Err(Error::Solver("zero iterate in residual".into()));
        }
        let uh: Vec<f64> = u.iter().map(|c| c / nrm).collect();
        let lambda = self.sys.eigenvalue(&uh, self.kappa);
        let mut su = vec![0.0; m];
        self.sys.s.matvec(&uh, &mut su);
        let mut norm_sq = 0.0;
        for i in 0..m {
            let ri = su[i]
                + (self.sys.mv[i] + self.kappa * self.sys.m[i] * uh[i] * uh[i] - lambda * self.sys.m[i])
                    * uh[i];
            norm_sq += ri * ri / self.sys.m[i];
        }
        Ok(norm_sq.sqrt() / lambda)
    }

    fn greens_direction(&mut self, u: &[f64]) -> Result<Vec<f64>> {
        let t0 = Instant::now();
        for i in 0..u.len() {
            self.density[i] = self.sys.mv[i] + self.nl_coeff * self.sys.m[i] * u[i] * u[i];
        }
        self.greens.set_density(&self.density)?;
        self.nonlinear_seconds += t0.elapsed().as_secs_f64();
        let rhs: Vec<f64> = self.sys.m.iter().zip(u).map(|(mi, ui)| mi * ui).collect();
        self.greens.solve(&rhs)
    }

    fn pairing(&self, u: &[f64], g: &[f64]) -> f64 {
        match self.pairing_kind {
            Pairing::Consistent => self.sys.mc.bilinear(u, g),
            Pairing::Lumped => self
                .sys
                .m
                .iter()
                .zip(u.iter().zip(g))
                .map(|(mi, (ui, gi))| mi * ui * gi)
                .sum(),
        }
    }

    fn segment_energy(&self, u: &[f64], d: &[f64]) -> SegmentEnergy {
        lumped_segment_energy(&self.sys, self.kappa, u, d)
    }

    fn nonlinear_assembly_seconds(&self) -> f64 {
        self.nonlinear_seconds
    }

    fn backend_name(&self) -> String {
        self.greens.backend_name.clone()
    }
}

/// Interpolate the constant 1 at interior nodes (zero on the boundary) and
/// normalize in the lumped norm; the standard initial iterate of the flow.
pub fn default_initial_guess(data: &ProblemData) -> FeFunction {
    let mesh = data.mesh().clone();
    let mut v = FeFunction::zeros(mesh.clone());
    for &j in mesh.interior_nodes() {
        v.coeffs_mut()[j] = 1.0;
    }
    let nrm = crate::forms::lumped_norm(&v);
    for c in v.coeffs_mut() {
        *c /= nrm;
    }
    v
}

fn mesh_hypotheses(
    s: &SparseSpdMatrix,
    strict: bool,
) -> Result<Vec<String>> {
    let mut warnings = Vec::new();
    let rep = is_m_matrix(s);
    if !rep.holds {
        let msg = match rep.witness {
            Some((i, j)) => format!(
                "stiffness is not an M-matrix: positive off-diagonal at ({i}, {j})"
            ),
            None => "stiffness is not an M-matrix".to_string(),
        };
        if strict {
            return Err(Error::Solver(msg));
        }
        warnings.push(msg);
    }
    if !is_irreducible(s) {
        let msg = "stiffness is reducible; positivity of the state is not guaranteed".to_string();
        if strict {
            return Err(Error::Solver(msg));
        }
        warnings.push(msg);
    }
    Ok(warnings)
}

/// Compute the ground state of the lumped discretization with the
/// energy-adaptive gradient flow, starting from `u0`.
pub fn solve_ground_state_from(
    data: &ProblemData,
    config: &FlowConfig,
    u0: &FeFunction,
) -> Result<GroundStateSolution> {
    let wall = Instant::now();
    let mut problem = LumpedProblem::new(data, config)?;
    let warnings = mesh_hypotheses(&problem.sys.s, config.strict_mesh)?;
    let bound = if matches!(config.step_policy, StepPolicy::PaperBound) {
        let e0 = crate::forms::discrete_energy(u0, data)?;
        Some(step_bound(data, e0)?.bound)
    } else {
        None
    };
    let out = run_flow(&mut problem, config, &u0.interior_vec(), bound)?;
    let u = FeFunction::from_interior(data.mesh().clone(), &out.u)?;
    Ok(GroundStateSolution {
        u,
        lambda_h: out.lambda,
        energy_h: out.energy,
        iterations: out.iterations,
        converged: out.converged,
        trace: out.trace,
        meta: SolveMeta {
            method: "lumped",
            backend: problem.backend_name(),
            threads: 1,
            mesh_warnings: warnings,
            nonlinear_assembly_seconds: problem.nonlinear_assembly_seconds(),
            wall_seconds: wall.elapsed().as_secs_f64(),
        },
    })
}

/// Compute the ground state from the standard initial guess (interpolated
/// constant, lumped-normalized).
pub fn solve_ground_state(data: &ProblemData, config: &FlowConfig) -> Result<GroundStateSolution> {
    let u0 = default_initial_guess(data);
    solve_ground_state_from(data, config, &u0)
}

/// Discrete Green's operator of the problem as printed: solve
/// `(S + M(V) + M(P w^2)) x = M f` over interior nodes, the density term
/// carrying the unit coefficient.
pub fn greens_solve(w: &FeFunction, f: &FeFunction, data: &ProblemData) -> Result<FeFunction> {
    greens_solve_weighted(w, f, data, 1.0)
}

/// Green's solve with an explicit coefficient on the density term (the flow
/// uses `kappa`).
pub fn greens_solve_weighted(
    w: &FeFunction,
    f: &FeFunction,
    data: &ProblemData,
    nonlinear_coeff: f64,
) -> Result<FeFunction> {
    if !Arc::ptr_eq(w.mesh(), data.mesh()) || !Arc::ptr_eq(f.mesh(), data.mesh()) {
        return Err(Error::MeshMismatch(
            "green's solve operands must share the data mesh".into(),
        ));
    }
    let sys = LumpedSystem::new(data)?;
    let wi = w.interior_vec();
    let density: Vec<f64> = (0..wi.len())
        .map(|i| sys.mv[i] + nonlinear_coeff * sys.m[i] * wi[i] * wi[i])
        .collect();
    let mut ws = GreensWorkspace::new(&sys, &density, 1e-13)?;
    let fi = f.interior_vec();
    let rhs: Vec<f64> = sys.m.iter().zip(&fi).map(|(mi, fi)| mi * fi).collect();
    let x = ws.solve(&rhs)?;
    FeFunction::from_interior(data.mesh().clone(), &x)
}

/// One step of the fully discretized gradient flow at step size `tau`:
/// `(1 - tau) u + tau (u, G u)^-1 G u`, renormalized in the lumped norm.
/// The Green's operator density carries the kappa weight, matching the
/// solver default.
pub fn flow_step(u: &FeFunction, tau: f64, data: &ProblemData) -> Result<FeFunction> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "step size must lie in (0, 1], got {tau}"
        )));
    }
    let config = FlowConfig::default();
    let mut problem = LumpedProblem::new(data, &config)?;
    let mut ui = u.interior_vec();
    let nrm = problem.sys.lumped_norm(&ui);
    if !(nrm > 0.0) {
        return Err(Error::InvalidInput("flow step of the zero function".into()));
    }
    for c in &mut ui {
        *c /= nrm;
    }
    let g = problem.greens_direction(&ui)?;
    let sigma = FlowProblem::pairing(&problem, &ui, &g);
    if !(sigma > 0.0) {
        return Err(Error::Solver(format!(
            "nonpositive pairing (u, Gu) = {sigma}"
        )));
    }
    let mut next: Vec<f64> = ui
        .iter()
        .zip(&g)
        .map(|(ui, gi)| (1.0 - tau) * ui + tau * gi / sigma)
        .collect();
    let nrm = problem.sys.lumped_norm(&next);
    for c in &mut next {
        *c /= nrm;
    }
    FeFunction::from_interior(data.mesh().clone(), &next)
}

/// Energy-adaptive step size: the minimizer of the energy along the
/// normalized flow segment, restricted to `[tau_min, 1]`.
pub fn adaptive_tau(u: &FeFunction, data: &ProblemData) -> Result<f64> {
    let config = FlowConfig::default();
    let mut problem = LumpedProblem::new(data, &config)?;
    let mut ui = u.interior_vec();
    let nrm = problem.sys.lumped_norm(&ui);
    if !(nrm > 0.0) {
        return Err(Error::InvalidInput("adaptive step of the zero function".into()));
    }
    for c in &mut ui {
        *c /= nrm;
    }
    let g = problem.greens_direction(&ui)?;
    let sigma = FlowProblem::pairing(&problem, &ui, &g);
    let d: Vec<f64> = g.iter().zip(&ui).map(|(gi, ui)| gi / sigma - ui).collect();
    let seg = problem.segment_energy(&ui, &d);
    Ok(line_search_tau(&|t| seg.eval(t), config.tau_min))
}

/// Smallest `count` eigenpairs of the eigenproblem linearized at `u`:
/// `(S + M(V) + kappa M(P u^2)) x = mu M x`. Eigenfunctions come back
/// lumped-orthonormal, eigenvalues ascending.
pub fn linearized_eigs(
    u: &FeFunction,
    data: &ProblemData,
    count: usize,
) -> Result<Vec<(f64, FeFunction)>> {
    if count == 0 || count > 6 {
        return Err(Error::InvalidInput(format!(
            "eigenpair count must lie in 1..=6, got {count}"
        )));
    }
    if !Arc::ptr_eq(u.mesh(), data.mesh()) {
        return Err(Error::MeshMismatch("state and data mesh differ".into()));
    }
    let sys = LumpedSystem::new(data)?;
    let usq: Vec<f64> = element_nodal_map(u).iter().map(|c| c * c).collect();
    let mu = assemble_lumped_mass(data.mesh(), Some(&usq), true)?;
    let m = sys.s.dim();
    let mut a = sys.s.clone();
    for i in 0..m {
        let p = a
            .slot(i, i)
            .ok_or_else(|| Error::Linalg("missing diagonal".into()))?;
        a.values_mut()[p] += sys.mv[i] + data.kappa() * mu.diag()[i];
    }
    let pairs = smallest_generalized_eigs(&a, &MassOp::Diag(&sys.m), count, 1e-9, 600, 0x5eed)?;
    pairs
        .into_iter()
        .map(|(mu, v)| Ok((mu, FeFunction::from_interior(data.mesh().clone(), &v)?)))
        .collect()
}
