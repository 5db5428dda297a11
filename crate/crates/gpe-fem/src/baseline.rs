//! Standard (non-lumped) linear FEM ground-state solver: the comparison
//! method of the experiments, and the manufacturer of reference solutions on
//! twice-refined meshes. Also computes errors between solutions living on
//! nested meshes.
//!
//! The method runs the same energy-adaptive gradient flow as the lumped
//! solver, but with consistent mass pairings, the L2 normalization
//! constraint, and quadrature-evaluated potential and nonlinearity terms
//! (degree-4 simplex rules, exact for quadratic potentials times P1^2 and
//! for the quartic P1 term). The density-weighted consistent mass matrix is
//! refreshed in every iteration; its cumulative assembly time is recorded so
//! the cost asymmetry against the lumped diagonal shows up in run reports.

use std::sync::Arc;
use std::time::Instant;

use crate::assembly::{
    assemble_consistent_mass, assemble_stiffness, assemble_weighted_consistent_mass,
    SparseSpdMatrix, WeightedMassUpdater,
};
use crate::forms::ProblemData;
use crate::linalg::{pcg, CholeskyFactor};
use crate::mesh::{prolongate, FeFunction};
use crate::quadrature::simplex_rule;
use crate::solver::{
    run_flow, step_bound, FlowConfig, FlowProblem, GroundStateSolution, SegmentEnergy, SolveMeta,
    StepPolicy,
};
use crate::{Error, Result};

/// Quadrature degree of all potential and nonlinearity integrals.
pub const QUADRATURE_DEGREE: usize = 4;

const DIRECT_SOLVE_MAX_UNKNOWNS: usize = 100_000;
const FROZEN_REFRESH_PCG_ITERS: usize = 80;

/// Errors of a coarse solution against a reference solution.
#[derive(Debug, Clone, Copy)]
pub struct ErrorReport {
    pub l2_error: f64,
    pub h1_semi_error: f64,
    pub energy_error: f64,
    pub eigenvalue_error: f64,
    /// Whether the entries are divided by the reference norms.
    pub relative: bool,
}

struct StandardSystem {
    /// S + W(V) over interior nodes.
    s_plus_wv: SparseSpdMatrix,
    mc: SparseSpdMatrix,
    mc_diag: Vec<f64>,
    updater: WeightedMassUpdater,
}

enum Backend {
    Direct(CholeskyFactor),
    Frozen {
        factor: CholeskyFactor,
        last_pcg_iters: usize,
    },
}

pub(crate) struct StandardProblem {
    mesh: Arc<crate::mesh::SimplicialMesh>,
    sys: StandardSystem,
    kappa: f64,
    nl_coeff: f64,
    a_work: SparseSpdMatrix,
    backend: Backend,
    backend_name: String,
    linear_tol: f64,
    warm_start: Vec<f64>,
    last_density: Vec<f64>,
    density_valid: bool,
    nonlinear_seconds: f64,
}

fn add_same_pattern(a: &SparseSpdMatrix, b: &SparseSpdMatrix) -> Result<SparseSpdMatrix> {
    if a.row_ptr() != b.row_ptr() || a.col_idx() != b.col_idx() {
        return Err(Error::Linalg("sparsity patterns differ".into()));
    }
    let mut out = a.clone();
    for (v, w) in out.values_mut().iter_mut().zip(b.values()) {
        *v += w;
    }
    Ok(out)
}

impl StandardProblem {
    pub fn new(data: &ProblemData, config: &FlowConfig) -> Result<StandardProblem> {
        let mesh = data.mesh().clone();
        let s = assemble_stiffness(&mesh)?;
        // potential mass: pointwise evaluator when available, otherwise the
        // mesh-piecewise interpolant of the element-nodal values (exact for
        // piecewise constant data)
        let wv = if let Some(f) = data.potential_fn() {
            let f = f.clone();
            assemble_weighted_consistent_mass(&mesh, move |x| f(x), QUADRATURE_DEGREE)?
        } else {
            assemble_elementwise_potential_mass(data)?
        };
        let s_plus_wv = add_same_pattern(&s, &wv)?;
        let mc = assemble_consistent_mass(&mesh)?;
        let mc_diag = mc.diagonal();
        let mut updater = WeightedMassUpdater::new(&mesh, QUADRATURE_DEGREE)?;
        let zeros = vec![0.0; mesh.n_nodes()];
        updater.refresh_p1_squared(&mesh, &zeros);
        let a_work = s_plus_wv.clone();
        let factor = CholeskyFactor::new(&a_work)?;
        let m = s_plus_wv.dim();
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
        let nl_coeff = if config.greens_kappa_weight {
            data.kappa()
        } else {
            1.0
        };
        Ok(StandardProblem {
            mesh,
            sys: StandardSystem {
                s_plus_wv,
                mc,
                mc_diag,
                updater,
            },
            kappa: data.kappa(),
            nl_coeff,
            a_work,
            backend,
            backend_name,
            linear_tol: config.linear_solver_tol,
            warm_start: vec![0.0; m],
            last_density: Vec::new(),
            density_valid: false,
            nonlinear_seconds: 0.0,
        })
    }

    fn full_coeffs(&self, u: &[f64]) -> Vec<f64> {
        let mut coeffs = vec![0.0; self.mesh.n_nodes()];
        for (slot, &j) in self.mesh.interior_nodes().iter().enumerate() {
            coeffs[j] = u[slot];
        }
        coeffs
    }

    /// Refresh the density-weighted mass and the work operator at `u`
    /// (interior coefficients), skipping when unchanged.
    fn ensure_density(&mut self, u: &[f64]) -> Result<()> {
        if self.density_valid && self.last_density == u {
            return Ok(());
        }
        let t0 = Instant::now();
        let coeffs = self.full_coeffs(u);
        self.sys.updater.refresh_p1_squared(&self.mesh, &coeffs);
        let w_values: Vec<f64> = self.sys.updater.matrix().values().to_vec();
        for (i, v) in self.a_work.values_mut().iter_mut().enumerate() {
            *v = self.sys.s_plus_wv.values()[i] + self.nl_coeff * w_values[i];
        }
        self.nonlinear_seconds += t0.elapsed().as_secs_f64();
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
        self.last_density = u.to_vec();
        self.density_valid = true;
        Ok(())
    }

    fn solve_current(&mut self, rhs: &[f64]) -> Result<Vec<f64>> {
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

    /// Integral of u^4 by element quadrature (exact for P1 at degree 4).
    fn quartic_integral(&self, u: &[f64]) -> f64 {
        let coeffs = self.full_coeffs(u);
        quartic_moments(&self.mesh, &coeffs, None)[0]
    }

    fn eigenvalue_impl(&self, u: &[f64]) -> f64 {
        let m = u.len();
        let mut au = vec![0.0; m];
        self.sys.s_plus_wv.matvec(u, &mut au);
        let quad = crate::linalg::dot(u, &au);
        let quart = self.quartic_integral(u);
        let den = self.sys.mc.quadratic_form(u);
        quad / den + self.kappa * quart / (den * den)
    }
}

/// Quadrature moments of (u + t d)^4 over the mesh: returns
/// `[I(u^4), I(u^3 d), I(u^2 d^2), I(u d^3), I(d^4)]`; with `d = None` only
/// the first entry is filled.
fn quartic_moments(
    mesh: &crate::mesh::SimplicialMesh,
    u_coeffs: &[f64],
    d_coeffs: Option<&[f64]>,
) -> [f64; 5] {
    let rule = simplex_rule(mesh.dim(), QUADRATURE_DEGREE).expect("supported dimension");
    let mut mom = [0.0f64; 5];
    for e in 0..mesh.n_elements() {
        let el = mesh.element(e);
        let vol = mesh.volume(e);
        for qp in &rule {
            let mut uq = 0.0;
            let mut dq = 0.0;
            for (loc, &j) in el.iter().enumerate() {
                uq += qp.bary[loc] * u_coeffs[j];
                if let Some(d) = d_coeffs {
                    dq += qp.bary[loc] * d[j];
                }
            }
            let w = qp.weight * vol;
            mom[0] += w * uq * uq * uq * uq;
            if d_coeffs.is_some() {
                mom[1] += w * uq * uq * uq * dq;
                mom[2] += w * uq * uq * dq * dq;
                mom[3] += w * uq * dq * dq * dq;
                mom[4] += w * dq * dq * dq * dq;
            }
        }
    }
    mom
}

/// Consistent mass weighted by the mesh-piecewise linear interpolant of the
/// element-nodal potential values.
fn assemble_elementwise_potential_mass(data: &ProblemData) -> Result<SparseSpdMatrix> {
    let mesh = data.mesh();
    let dim = mesh.dim();
    let rule = simplex_rule(dim, QUADRATURE_DEGREE)?;
    let nl = dim + 1;
    let n = mesh.n_interior();
    let mut triplets = Vec::with_capacity(mesh.n_elements() * nl * nl);
    for e in 0..mesh.n_elements() {
        let el = mesh.element(e);
        let vol = mesh.volume(e);
        let mut local = [[0.0f64; 4]; 4];
        for qp in &rule {
            let mut vq = 0.0;
            for loc in 0..nl {
                vq += qp.bary[loc] * data.potential_values()[e * nl + loc];
            }
            let wq = vq * qp.weight * vol;
            for li in 0..nl {
                for lj in 0..nl {
                    local[li][lj] += wq * qp.bary[li] * qp.bary[lj];
                }
            }
        }
        for (li, &gi) in el.iter().enumerate() {
            let Some(ri) = mesh.interior_index(gi) else {
                continue;
            };
            for (lj, &gj) in el.iter().enumerate() {
                let Some(rj) = mesh.interior_index(gj) else {
                    continue;
                };
                triplets.push((ri as u32, rj as u32, local[li][lj]));
            }
        }
    }
    Ok(SparseSpdMatrix::from_triplets(n, triplets))
}

impl FlowProblem for StandardProblem {
    fn n_unknowns(&self) -> usize {
        self.sys.s_plus_wv.dim()
    }

    fn constraint_norm(&self, u: &[f64]) -> f64 {
        self.sys.mc.quadratic_form(u).max(0.0).sqrt()
    }

    fn energy(&self, u: &[f64]) -> f64 {
        let m = u.len();
        let mut au = vec![0.0; m];
        self.sys.s_plus_wv.matvec(u, &mut au);
        0.5 * crate::linalg::dot(u, &au) + 0.25 * self.kappa * self.quartic_integral(u)
    }

    fn eigenvalue(&self, u: &[f64]) -> f64 {
        self.eigenvalue_impl(u)
    }

    fn residual_rel(&mut self, u: &[f64]) -> Result<f64> {
        let m = u.len();
        let nrm = self.constraint_norm(u);
        if !(nrm > 0.0) {
            return Err(Error::Solver("zero iterate in residual".into()));
        }
        let uh: Vec<f64> = if (nrm - 1.0).abs() < 1e-12 {
            u.to_vec()
        } else {
            u.iter().map(|c| c / nrm).collect()
        };
        self.ensure_density(&uh)?;
        let lambda = self.eigenvalue_impl(&uh);
        let mut r = vec![0.0; m];
        self.sys.s_plus_wv.matvec(&uh, &mut r);
        let mut wu = vec![0.0; m];
        self.sys.updater.matrix().matvec(&uh, &mut wu);
        let mut mcu = vec![0.0; m];
        self.sys.mc.matvec(&uh, &mut mcu);
        for i in 0..m {
            r[i] += self.kappa * wu[i] - lambda * mcu[i];
        }
        // z = Mc^-1 r by Jacobi-preconditioned CG; the mass matrix is well
        // conditioned so this converges in a few dozen iterations
        let mut z = vec![0.0; m];
        let mc = &self.sys.mc;
        let diag = &self.sys.mc_diag;
        pcg(
            |v, out| mc.matvec(v, out),
            |rr, out| {
                for i in 0..rr.len() {
                    out[i] = rr[i] / diag[i];
                }
            },
            &r,
            &mut z,
            1e-13,
            1000,
        )?;
        let norm_sq = self.sys.mc.quadratic_form(&z).max(0.0);
        Ok(norm_sq.sqrt() / lambda)
    }

    fn greens_direction(&mut self, u: &[f64]) -> Result<Vec<f64>> {
        self.ensure_density(u)?;
        let mut rhs = vec![0.0; u.len()];
        self.sys.mc.matvec(u, &mut rhs);
        self.solve_current(&rhs)
    }

    fn pairing(&self, u: &[f64], g: &[f64]) -> f64 {
        self.sys.mc.bilinear(u, g)
    }

    fn segment_energy(&self, u: &[f64], d: &[f64]) -> SegmentEnergy {
        let m = u.len();
        let mut au = vec![0.0; m];
        let mut ad = vec![0.0; m];
        self.sys.s_plus_wv.matvec(u, &mut au);
        self.sys.s_plus_wv.matvec(d, &mut ad);
        let a = [
            crate::linalg::dot(u, &au),
            crate::linalg::dot(u, &ad),
            crate::linalg::dot(d, &ad),
        ];
        let q = [
            self.sys.mc.quadratic_form(u),
            self.sys.mc.bilinear(u, d),
            self.sys.mc.quadratic_form(d),
        ];
        let uc = self.full_coeffs(u);
        let dc = self.full_coeffs(d);
        let r = quartic_moments(&self.mesh, &uc, Some(&dc));
        SegmentEnergy::from_parts(a, q, r, self.kappa)
    }

    fn nonlinear_assembly_seconds(&self) -> f64 {
        self.nonlinear_seconds
    }

    fn backend_name(&self) -> String {
        self.backend_name.clone()
    }
}

/// L2-normalized initial iterate of the standard flow (interpolated
/// constant with zero boundary trace).
pub fn default_initial_guess_standard(data: &ProblemData) -> Result<FeFunction> {
    let mesh = data.mesh().clone();
    let mc = assemble_consistent_mass(&mesh)?;
    let mut v = FeFunction::zeros(mesh.clone());
    for &j in mesh.interior_nodes() {
        v.coeffs_mut()[j] = 1.0;
    }
    let nrm = mc.quadratic_form(&v.interior_vec()).sqrt();
    for c in v.coeffs_mut() {
        *c /= nrm;
    }
    Ok(v)
}

/// Ground state of the standard linear FEM from a given initial iterate.
pub fn solve_ground_state_standard_from(
    data: &ProblemData,
    config: &FlowConfig,
    u0: &FeFunction,
) -> Result<GroundStateSolution> {
    let wall = Instant::now();
    let mut problem = StandardProblem::new(data, config)?;
    let bound = if matches!(config.step_policy, StepPolicy::PaperBound) {
        let e0 = crate::forms::standard_energy(u0, data, QUADRATURE_DEGREE)?;
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
            method: "standard",
            backend: problem.backend_name(),
            threads: 1,
            mesh_warnings: Vec::new(),
            nonlinear_assembly_seconds: problem.nonlinear_assembly_seconds(),
            wall_seconds: wall.elapsed().as_secs_f64(),
        },
    })
}

/// Ground state of the standard linear FEM from the default initial iterate.
pub fn solve_ground_state_standard(
    data: &ProblemData,
    config: &FlowConfig,
) -> Result<GroundStateSolution> {
    let u0 = default_initial_guess_standard(data)?;
    solve_ground_state_standard_from(data, config, &u0)
}

/// Reference-mesh matrices and norms, built once and reused across levels.
pub struct ReferenceFrame<'a> {
    pub sol: &'a GroundStateSolution,
    s: SparseSpdMatrix,
    mc: SparseSpdMatrix,
    u_ref: Vec<f64>,
    l2_norm: f64,
    h1_norm: f64,
}

impl<'a> ReferenceFrame<'a> {
    pub fn new(sol: &'a GroundStateSolution) -> Result<ReferenceFrame<'a>> {
        let mesh = sol.u.mesh();
        let s = assemble_stiffness(mesh)?;
        let mc = assemble_consistent_mass(mesh)?;
        let u_ref = sol.u.interior_vec();
        let l2_norm = mc.quadratic_form(&u_ref).sqrt();
        let h1_norm = s.quadratic_form(&u_ref).sqrt();
        Ok(ReferenceFrame {
            sol,
            s,
            mc,
            u_ref,
            l2_norm,
            h1_norm,
        })
    }

    /// Errors of a coarse-mesh solution against this reference. The coarse
    /// state is prolongated to the reference mesh; normalizations are
    /// compared as produced (no rescaling).
    pub fn errors(&self, coarse: &GroundStateSolution, relative: bool) -> Result<ErrorReport> {
        let pu = prolongate(&coarse.u, self.sol.u.mesh())?;
        let pi = pu.interior_vec();
        let e: Vec<f64> = pi.iter().zip(&self.u_ref).map(|(a, b)| a - b).collect();
        let mut l2 = self.mc.quadratic_form(&e).max(0.0).sqrt();
        let mut h1 = self.s.quadratic_form(&e).max(0.0).sqrt();
        let mut de = (coarse.energy_h - self.sol.energy_h).abs();
        let mut dl = (coarse.lambda_h - self.sol.lambda_h).abs();
        if relative {
            l2 /= self.l2_norm;
            h1 /= self.h1_norm;
            de /= self.sol.energy_h.abs();
            dl /= self.sol.lambda_h.abs();
        }
        Ok(ErrorReport {
            l2_error: l2,
            h1_semi_error: h1,
            energy_error: de,
            eigenvalue_error: dl,
            relative,
        })
    }
}

/// Errors of `u_h` against a reference solution on a (repeatedly) red-refined
/// mesh; builds the reference matrices on the fly.
pub fn errors_vs_reference(
    u_h: &GroundStateSolution,
    reference: &GroundStateSolution,
    relative: bool,
) -> Result<ErrorReport> {
    ReferenceFrame::new(reference)?.errors(u_h, relative)
}
