//! Assembly of P1 finite element matrices over interior nodes: stiffness,
//! consistent mass, and weighted lumped mass, together with the structural
//! checks (M-matrix property, irreducibility) used by the positivity theory.
//!
//! Assembly accumulates element contributions in a fixed element-major,
//! local-index-minor order, so matrices are bitwise reproducible.

use crate::mesh::SimplicialMesh;
use crate::quadrature::{simplex_rule, QuadPoint};
use crate::{Error, Result};

/// Off-diagonal entries up to this factor times the max diagonal are treated
/// as zero by the M-matrix check; right-angle meshes produce exact zeros in
/// theory but tiny dirt in floating point.
pub const M_MATRIX_OFFDIAG_TOL: f64 = 1e-12;

/// A symmetric sparse matrix in compressed sparse row storage. Both triangles
/// are stored; column indices are sorted within each row.
#[derive(Debug, Clone)]
pub struct SparseSpdMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SparseSpdMatrix {
    /// Build from (row, col, value) triplets, summing duplicates. The
    /// accumulation order is the stable sort of the input order, which keeps
    /// assembly deterministic.
    pub fn from_triplets(dim: usize, mut triplets: Vec<(u32, u32, f64)>) -> SparseSpdMatrix {
        triplets.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut last: Option<(u32, u32)> = None;
        for (i, j, v) in triplets {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i as usize + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseSpdMatrix {
            dim,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Matrix dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Columns and values of row `i`.
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    /// Entry (i, j), zero if not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&(j as u32)) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    /// Storage slot of entry (i, j), if present.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (cols, _) = self.row(i);
        cols.binary_search(&(j as u32))
            .ok()
            .map(|p| self.row_ptr[i] + p)
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(y.len(), self.dim);
        for i in 0..self.dim {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[p] * x[self.col_idx[p] as usize];
            }
            y[i] = acc;
        }
    }

    /// x^T A y.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim {
            let mut row = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                row += self.values[p] * y[self.col_idx[p] as usize];
            }
            acc += x[i] * row;
        }
        acc
    }

    /// x^T A x.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }

    /// Diagonal entries (zero where the diagonal is unstored).
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    /// Whether the stored values are exactly symmetric.
    pub fn is_symmetric(&self) -> bool {
        for i in 0..self.dim {
            let (cols, vals) = self.row(i);
            for (p, &j) in cols.iter().enumerate() {
                if self.get(j as usize, i) != vals[p] {
                    return false;
                }
            }
        }
        true
    }

    /// Sum of all stored entries.
    pub fn total_sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Coordinate text export (`i j value` lines, 0-based, sorted); intended
    /// for debugging, not a stability guarantee.
    pub fn export_coordinate_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.dim {
            let (cols, vals) = self.row(i);
            for (p, &j) in cols.iter().enumerate() {
                out.push_str(&format!("{} {} {}\n", i, j, vals[p]));
            }
        }
        out
    }
}

/// Diagonal (possibly weighted) lumped mass matrix.
#[derive(Debug, Clone)]
pub struct LumpedDiagonal {
    diag: Vec<f64>,
}

impl LumpedDiagonal {
    pub fn new(diag: Vec<f64>) -> LumpedDiagonal {
        LumpedDiagonal { diag }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn trace(&self) -> f64 {
        self.diag.iter().sum()
    }

    /// x^T M x.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.diag.iter().zip(x).map(|(m, v)| m * v * v).sum()
    }

    /// x^T M y.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        self.diag
            .iter()
            .zip(x.iter().zip(y))
            .map(|(m, (a, b))| m * a * b)
            .sum()
    }
}

/// Which node set a matrix is assembled over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeSet {
    /// Interior nodes only (the system matrices of the solver).
    Interior,
    /// All nodes, no boundary condition applied.
    All,
}

fn node_slot(mesh: &SimplicialMesh, set: NodeSet, j: usize) -> Option<usize> {
    match set {
        NodeSet::Interior => mesh.interior_index(j),
        NodeSet::All => Some(j),
    }
}

fn set_dim(mesh: &SimplicialMesh, set: NodeSet) -> usize {
    match set {
        NodeSet::Interior => mesh.n_interior(),
        NodeSet::All => mesh.n_nodes(),
    }
}

/// Gradients of the barycentric coordinate functions of one element, as
/// `dim + 1` vectors of length `dim`.
pub(crate) fn p1_element_gradients(mesh: &SimplicialMesh, e: usize) -> [[f64; 3]; 4] {
    let dim = mesh.dim();
    let el = mesh.element(e);
    let mut grads = [[0.0; 3]; 4];
    match dim {
        1 => {
            let l = mesh.vertex(el[1])[0] - mesh.vertex(el[0])[0];
            grads[0][0] = -1.0 / l;
            grads[1][0] = 1.0 / l;
        }
        2 => {
            let a2 = 2.0 * mesh.volume(e);
            for i in 0..3 {
                let b = mesh.vertex(el[(i + 1) % 3]);
                let c = mesh.vertex(el[(i + 2) % 3]);
                grads[i][0] = (b[1] - c[1]) / a2;
                grads[i][1] = (c[0] - b[0]) / a2;
            }
        }
        3 => {
            // rows of the inverse of B = [p1-p0, p2-p0, p3-p0]
            let p0 = mesh.vertex(el[0]);
            let mut b = [[0.0; 3]; 3];
            for c in 0..3 {
                let pc = mesh.vertex(el[c + 1]);
                for r in 0..3 {
                    b[r][c] = pc[r] - p0[r];
                }
            }
            let det = 6.0 * mesh.volume(e);
            let inv = |r: usize, c: usize| -> f64 {
                let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
                let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
                (b[r1][c1] * b[r2][c2] - b[r1][c2] * b[r2][c1]) / det
            };
            for i in 0..3 {
                for a in 0..3 {
                    grads[i + 1][a] = inv(i, a);
                }
                for a in 0..3 {
                    grads[0][a] -= grads[i + 1][a];
                }
            }
        }
        _ => unreachable!(),
    }
    grads
}

fn assemble_stiffness_on(mesh: &SimplicialMesh, set: NodeSet) -> Result<SparseSpdMatrix> {
    let dim = mesh.dim();
    let n = set_dim(mesh, set);
    let mut triplets = Vec::with_capacity(mesh.n_elements() * (dim + 1) * (dim + 1));
    for e in 0..mesh.n_elements() {
        let vol = mesh.volume(e);
        if !(vol > 0.0) {
            return Err(Error::InvalidInput(format!("element {e} has zero volume")));
        }
        let grads = p1_element_gradients(mesh, e);
        let el = mesh.element(e);
        for (li, &gi) in el.iter().enumerate() {
            let Some(ri) = node_slot(mesh, set, gi) else {
                continue;
            };
            for (lj, &gj) in el.iter().enumerate() {
                let Some(rj) = node_slot(mesh, set, gj) else {
                    continue;
                };
                let dot: f64 = (0..dim).map(|a| grads[li][a] * grads[lj][a]).sum();
                triplets.push((ri as u32, rj as u32, vol * dot));
            }
        }
    }
    Ok(SparseSpdMatrix::from_triplets(n, triplets))
}

/// Stiffness matrix `S_ij = (grad phi_j, grad phi_i)` over interior nodes,
/// with exact element integration of the P1 gradients.
pub fn assemble_stiffness(mesh: &SimplicialMesh) -> Result<SparseSpdMatrix> {
    assemble_stiffness_on(mesh, NodeSet::Interior)
}

/// Stiffness over all nodes (no boundary condition); row sums vanish.
pub fn assemble_stiffness_full(mesh: &SimplicialMesh) -> Result<SparseSpdMatrix> {
    assemble_stiffness_on(mesh, NodeSet::All)
}

fn assemble_consistent_mass_on(mesh: &SimplicialMesh, set: NodeSet) -> Result<SparseSpdMatrix> {
    let dim = mesh.dim();
    let n = set_dim(mesh, set);
    let scale = 1.0 / ((dim + 1) as f64 * (dim + 2) as f64);
    let mut triplets = Vec::with_capacity(mesh.n_elements() * (dim + 1) * (dim + 1));
    for e in 0..mesh.n_elements() {
        let vol = mesh.volume(e);
        if !(vol > 0.0) {
            return Err(Error::InvalidInput(format!("element {e} has zero volume")));
        }
        let el = mesh.element(e);
        for (li, &gi) in el.iter().enumerate() {
            let Some(ri) = node_slot(mesh, set, gi) else {
                continue;
            };
            for (lj, &gj) in el.iter().enumerate() {
                let Some(rj) = node_slot(mesh, set, gj) else {
                    continue;
                };
                let v = vol * scale * if li == lj { 2.0 } else { 1.0 };
                triplets.push((ri as u32, rj as u32, v));
            }
        }
    }
    Ok(SparseSpdMatrix::from_triplets(n, triplets))
}

/// Consistent P1 mass matrix over interior nodes (exact integration).
pub fn assemble_consistent_mass(mesh: &SimplicialMesh) -> Result<SparseSpdMatrix> {
    assemble_consistent_mass_on(mesh, NodeSet::Interior)
}

/// Consistent mass over all nodes; the total sum of entries equals |Omega|.
pub fn assemble_consistent_mass_full(mesh: &SimplicialMesh) -> Result<SparseSpdMatrix> {
    assemble_consistent_mass_on(mesh, NodeSet::All)
}

fn assemble_lumped_on(
    mesh: &SimplicialMesh,
    weight: Option<&[f64]>,
    guard_nonneg: bool,
    set: NodeSet,
) -> Result<LumpedDiagonal> {
    let dim = mesh.dim();
    let k = mesh.n_element_nodal();
    if let Some(w) = weight {
        if w.len() != k {
            return Err(Error::InvalidInput(format!(
                "weight length {} does not match element-nodal count {k}",
                w.len()
            )));
        }
        if guard_nonneg {
            if let Some(pos) = w.iter().position(|&x| x < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "negative lumped weight {} at element-nodal slot {pos}",
                    w[pos]
                )));
            }
        }
    }
    let mut diag = vec![0.0; set_dim(mesh, set)];
    let scale = 1.0 / (dim + 1) as f64;
    let mut slot = 0usize;
    for e in 0..mesh.n_elements() {
        let vol = mesh.volume(e);
        for &gj in mesh.element(e) {
            if let Some(r) = node_slot(mesh, set, gj) {
                let w = weight.map_or(1.0, |w| w[slot]);
                diag[r] += vol * scale * w;
            }
            slot += 1;
        }
    }
    Ok(LumpedDiagonal::new(diag))
}

/// Weighted lumped mass matrix over interior nodes: the diagonal entry at
/// node j is `sum_{K owning j} |K|/(d+1) * weight(K, j)`, with unit weight
/// when no weight vector is supplied. `guard_nonneg` rejects negative weight
/// entries (used for squared-density weights).
pub fn assemble_lumped_mass(
    mesh: &SimplicialMesh,
    weight: Option<&[f64]>,
    guard_nonneg: bool,
) -> Result<LumpedDiagonal> {
    assemble_lumped_on(mesh, weight, guard_nonneg, NodeSet::Interior)
}

/// Lumped mass over all nodes; with no weight its trace equals |Omega|.
pub fn assemble_lumped_mass_full(
    mesh: &SimplicialMesh,
    weight: Option<&[f64]>,
    guard_nonneg: bool,
) -> Result<LumpedDiagonal> {
    assemble_lumped_on(mesh, weight, guard_nonneg, NodeSet::All)
}

/// Weighted consistent mass matrix over interior nodes with per-point weight
/// `w(x)`, integrated with the given quadrature degree.
pub fn assemble_weighted_consistent_mass(
    mesh: &SimplicialMesh,
    weight: impl Fn(&[f64]) -> f64,
    degree: usize,
) -> Result<SparseSpdMatrix> {
    let dim = mesh.dim();
    let rule = simplex_rule(dim, degree)?;
    let n = mesh.n_interior();
    let mut triplets = Vec::with_capacity(mesh.n_elements() * (dim + 1) * (dim + 1));
    let mut x = [0.0f64; 3];
    for e in 0..mesh.n_elements() {
        let el = mesh.element(e);
        let vol = mesh.volume(e);
        let mut local = [[0.0f64; 4]; 4];
        for qp in &rule {
            for a in 0..dim {
                x[a] = 0.0;
                for (loc, &j) in el.iter().enumerate() {
                    x[a] += qp.bary[loc] * mesh.vertex(j)[a];
                }
            }
            let wq = weight(&x[..dim]) * qp.weight * vol;
            for li in 0..=dim {
                for lj in 0..=dim {
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

/// Reassemblable weighted consistent mass with a frozen sparsity pattern.
/// Used by the standard-FEM flow, which refreshes the squared-density mass
/// matrix in every iteration without re-sorting triplets.
pub struct WeightedMassUpdater {
    pattern: SparseSpdMatrix,
    /// For each element and local pair (li, lj) with both nodes interior:
    /// flat position into `pattern.values`; `u32::MAX` marks skipped pairs.
    slots: Vec<u32>,
    rule: Vec<QuadPoint>,
}

impl WeightedMassUpdater {
    pub fn new(mesh: &SimplicialMesh, degree: usize) -> Result<WeightedMassUpdater> {
        let pattern = assemble_weighted_consistent_mass(mesh, |_| 1.0, degree)?;
        let dim = mesh.dim();
        let mut slots = Vec::with_capacity(mesh.n_elements() * (dim + 1) * (dim + 1));
        for e in 0..mesh.n_elements() {
            let el = mesh.element(e);
            for &gi in el {
                for &gj in el {
                    let slot = match (mesh.interior_index(gi), mesh.interior_index(gj)) {
                        (Some(ri), Some(rj)) => {
                            pattern.slot(ri, rj).map(|s| s as u32).unwrap_or(u32::MAX)
                        }
                        _ => u32::MAX,
                    };
                    slots.push(slot);
                }
            }
        }
        let rule = simplex_rule(dim, degree)?;
        Ok(WeightedMassUpdater {
            pattern,
            slots,
            rule,
        })
    }

    /// Refresh as the mass matrix weighted by `u^2` for a P1 function with
    /// the given nodal coefficients.
    pub fn refresh_p1_squared(&mut self, mesh: &SimplicialMesh, coeffs: &[f64]) {
        let dim = mesh.dim();
        let nl = dim + 1;
        self.pattern.values_mut().fill(0.0);
        let mut slot = 0usize;
        for e in 0..mesh.n_elements() {
            let el = mesh.element(e);
            let vol = mesh.volume(e);
            let mut local = [[0.0f64; 4]; 4];
            for qp in &self.rule {
                let mut uq = 0.0;
                for (loc, &j) in el.iter().enumerate() {
                    uq += qp.bary[loc] * coeffs[j];
                }
                let wq = uq * uq * qp.weight * vol;
                for li in 0..nl {
                    for lj in 0..nl {
                        local[li][lj] += wq * qp.bary[li] * qp.bary[lj];
                    }
                }
            }
            for li in 0..nl {
                for lj in 0..nl {
                    let s = self.slots[slot];
                    if s != u32::MAX {
                        self.pattern.values_mut()[s as usize] += local[li][lj];
                    }
                    slot += 1;
                }
            }
        }
    }

    pub fn matrix(&self) -> &SparseSpdMatrix {
        &self.pattern
    }
}

/// Result of the M-matrix check.
#[derive(Debug, Clone, Copy)]
pub struct MMatrixReport {
    pub holds: bool,
    /// First positive off-diagonal entry when the sign pattern fails.
    pub witness: Option<(usize, usize)>,
}

/// Check the M-matrix property: symmetric, positive diagonal, off-diagonal
/// entries nonpositive up to [`M_MATRIX_OFFDIAG_TOL`] times the max diagonal,
/// and positive definiteness certified by a sparse Cholesky factorization.
pub fn is_m_matrix(s: &SparseSpdMatrix) -> MMatrixReport {
    if s.dim() == 0 {
        return MMatrixReport {
            holds: true,
            witness: None,
        };
    }
    if !s.is_symmetric() {
        return MMatrixReport {
            holds: false,
            witness: None,
        };
    }
    let mut max_diag = 0.0f64;
    for i in 0..s.dim() {
        let d = s.get(i, i);
        if d <= 0.0 {
            return MMatrixReport {
                holds: false,
                witness: None,
            };
        }
        max_diag = max_diag.max(d);
    }
    let tol = M_MATRIX_OFFDIAG_TOL * max_diag;
    for i in 0..s.dim() {
        let (cols, vals) = s.row(i);
        for (p, &j) in cols.iter().enumerate() {
            if j as usize != i && vals[p] > tol {
                return MMatrixReport {
                    holds: false,
                    witness: Some((i, j as usize)),
                };
            }
        }
    }
    let pd = crate::linalg::CholeskyFactor::new(s).is_ok();
    MMatrixReport {
        holds: pd,
        witness: None,
    }
}

/// Irreducibility: the undirected graph on nonzero off-diagonal entries is
/// connected (single traversal).
pub fn is_irreducible(s: &SparseSpdMatrix) -> bool {
    let n = s.dim();
    if n <= 1 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut visited = 1usize;
    while let Some(i) = stack.pop() {
        let (cols, vals) = s.row(i);
        for (p, &j) in cols.iter().enumerate() {
            let j = j as usize;
            if j != i && vals[p] != 0.0 && !seen[j] {
                seen[j] = true;
                visited += 1;
                stack.push(j);
            }
        }
    }
    visited == n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{element_nodal_map, friedrichs_keller, red_refine, FeFunction};
    use std::sync::Arc;

    fn mesh_1d(n: usize) -> Arc<SimplicialMesh> {
        friedrichs_keller(&[0.0], &[1.0], n).unwrap()
    }

    fn fk(n: usize) -> Arc<SimplicialMesh> {
        friedrichs_keller(&[0.0, 0.0], &[1.0, 1.0], n).unwrap()
    }

    #[test]
    fn stiffness_1d_uniform_tridiagonal() {
        let mesh = mesh_1d(4);
        let s = assemble_stiffness(&mesh).unwrap();
        assert_eq!(s.dim(), 3);
        for i in 0..3 {
            assert!((s.get(i, i) - 8.0).abs() < 1e-13);
            if i + 1 < 3 {
                assert!((s.get(i, i + 1) + 4.0).abs() < 1e-13);
                assert!((s.get(i + 1, i) + 4.0).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn stiffness_fk2_interior_diagonal_is_four() {
        let s = assemble_stiffness(&fk(2)).unwrap();
        assert_eq!(s.dim(), 1);
        assert!((s.get(0, 0) - 4.0).abs() < 1e-13);
    }

    #[test]
    fn full_stiffness_row_sums_vanish() {
        let mesh = fk(3);
        let s = assemble_stiffness_full(&mesh).unwrap();
        for i in 0..s.dim() {
            let (_, vals) = s.row(i);
            let sum: f64 = vals.iter().sum();
            assert!(sum.abs() < 1e-13, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn consistent_mass_local_values() {
        // 1D element of length h: local matrix h/6 * [[2,1],[1,2]]
        let mesh = mesh_1d(2);
        let mc = assemble_consistent_mass_full(&mesh).unwrap();
        let h = 0.5;
        assert!((mc.get(0, 0) - 2.0 * h / 6.0).abs() < 1e-15);
        assert!((mc.get(0, 1) - h / 6.0).abs() < 1e-15);
        // interior node belongs to two elements
        assert!((mc.get(1, 1) - 4.0 * h / 6.0).abs() < 1e-15);
    }

    #[test]
    fn consistent_mass_triangle_local_values() {
        let mesh = fk(1);
        let mc = assemble_consistent_mass_full(&mesh).unwrap();
        let area = 0.5;
        // nodes 1 = (1,0) and 2 = (0,1) belong to a single triangle each
        assert!((mc.get(1, 1) - area / 6.0).abs() < 1e-15);
        // pair (1,3) shares exactly one triangle
        assert!((mc.get(1, 3) - area / 12.0).abs() < 1e-15);
    }

    #[test]
    fn consistent_mass_total_equals_domain_volume() {
        for level in 0..3 {
            let mut mesh = fk(1);
            for _ in 0..level {
                mesh = red_refine(&mesh).unwrap();
            }
            let mc = assemble_consistent_mass_full(&mesh).unwrap();
            assert!((mc.total_sum() - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn lumped_1d_interior_entries() {
        let mesh = mesh_1d(4);
        let m = assemble_lumped_mass(&mesh, None, false).unwrap();
        for &d in m.diag() {
            assert!((d - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn lumped_fk2_center_entry() {
        let mesh = fk(2);
        let m = assemble_lumped_mass(&mesh, None, false).unwrap();
        assert_eq!(m.dim(), 1);
        // center node touches 6 triangles of area 1/8: 6 * (1/8) / 3 = 1/4
        assert!((m.diag()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn lumped_trace_is_domain_volume() {
        let mesh = friedrichs_keller(&[-2.0, -2.0], &[2.0, 2.0], 4).unwrap();
        let m = assemble_lumped_mass_full(&mesh, None, false).unwrap();
        assert!((m.trace() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_lumped_matches_direct_summation() {
        let mesh = fk(3);
        let u = FeFunction::from_node_fn(mesh.clone(), |x| 1.0 + x[0] + 2.0 * x[1] * x[1]);
        let usq: Vec<f64> = element_nodal_map(&u).iter().map(|v| v * v).collect();
        let m = assemble_lumped_mass(&mesh, Some(&usq), true).unwrap();
        // independent direct-sum oracle for the quadratic form
        let v = FeFunction::from_node_fn(mesh.clone(), |x| x[0] - 0.3 * x[1]);
        let vi = v.interior_vec();
        let mut direct = 0.0;
        for e in 0..mesh.n_elements() {
            let el = mesh.element(e);
            for (loc, &j) in el.iter().enumerate() {
                if mesh.interior_index(j).is_some() {
                    let w = usq[e * 3 + loc];
                    direct += mesh.volume(e) / 3.0 * w * v.coeffs()[j] * v.coeffs()[j];
                }
            }
        }
        let form = m.quadratic_form(&vi);
        assert!(
            (form - direct).abs() <= 1e-14 * direct.abs().max(1.0),
            "{form} vs {direct}"
        );
    }

    #[test]
    fn negative_weights_rejected_with_guard() {
        let mesh = fk(2);
        let w = vec![-1.0; mesh.n_element_nodal()];
        assert!(assemble_lumped_mass(&mesh, Some(&w), true).is_err());
        assert!(assemble_lumped_mass(&mesh, Some(&w), false).is_ok());
    }

    #[test]
    fn m_matrix_holds_on_fk_meshes() {
        for level in 0..3 {
            let mut mesh = fk(2);
            for _ in 0..level {
                mesh = red_refine(&mesh).unwrap();
            }
            let s = assemble_stiffness(&mesh).unwrap();
            let rep = is_m_matrix(&s);
            assert!(rep.holds, "level {level}");
            assert!(rep.witness.is_none());
        }
    }

    #[test]
    fn m_matrix_fails_with_witness_on_obtuse_triangle() {
        // two triangles sharing the edge (0, 1); the angles opposite that
        // edge (98.1 deg at node 2, 126.9 deg at node 3) sum beyond pi, so
        // the assembled entry S_01 is positive
        let text = "2 4 2\n0 0\n1 0\n0.9 0.1\n0.5 -0.25\n0 1 2\n0 3 1\n0 1 2 3\n";
        let mesh = crate::mesh::SimplicialMesh::import_text(text).unwrap();
        let s = assemble_stiffness_full(&mesh).unwrap();
        assert!(s.get(0, 1) > 0.0);
        let rep = is_m_matrix(&s);
        assert!(!rep.holds);
        assert_eq!(rep.witness, Some((0, 1)));
    }

    #[test]
    fn m_matrix_small_example() {
        let s = SparseSpdMatrix::from_triplets(
            2,
            vec![(0, 0, 2.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 2.0)],
        );
        assert!(is_m_matrix(&s).holds);
    }

    #[test]
    fn irreducibility_checks() {
        for level in 1..4 {
            let s = assemble_stiffness(&fk(1 << level)).unwrap();
            assert!(is_irreducible(&s));
        }
        // block-diagonal two-block matrix is reducible
        let s = SparseSpdMatrix::from_triplets(
            4,
            vec![
                (0, 0, 2.0),
                (0, 1, -1.0),
                (1, 0, -1.0),
                (1, 1, 2.0),
                (2, 2, 2.0),
                (2, 3, -1.0),
                (3, 2, -1.0),
                (3, 3, 2.0),
            ],
        );
        assert!(!is_irreducible(&s));
        let one = SparseSpdMatrix::from_triplets(1, vec![(0, 0, 1.0)]);
        assert!(is_irreducible(&one));
    }

    #[test]
    fn stiffness_invariant_under_renumbering() {
        let mesh = fk(3);
        let s = assemble_stiffness(&mesh).unwrap();
        // reverse the node numbering and rebuild the mesh by hand
        let n = mesh.n_nodes();
        let perm = |j: usize| n - 1 - j;
        let mut text = format!("2 {} {}\n", n, mesh.n_elements());
        for j in (0..n).rev() {
            let v = mesh.vertex(j);
            text.push_str(&format!("{} {}\n", v[0], v[1]));
        }
        for e in 0..mesh.n_elements() {
            let el = mesh.element(e);
            text.push_str(&format!("{} {} {}\n", perm(el[0]), perm(el[1]), perm(el[2])));
        }
        let bdry: Vec<String> = (0..n)
            .filter(|&j| mesh.is_boundary(j))
            .map(|j| perm(j).to_string())
            .collect();
        text.push_str(&bdry.join(" "));
        text.push('\n');
        let permuted = crate::mesh::SimplicialMesh::import_text(&text).unwrap();
        let s2 = assemble_stiffness(&permuted).unwrap();
        // compare entries through the permutation of interior enumerations
        for i in 0..n {
            let (Some(ri), Some(pi)) = (mesh.interior_index(i), permuted.interior_index(perm(i)))
            else {
                continue;
            };
            for j in 0..n {
                let (Some(rj), Some(pj)) =
                    (mesh.interior_index(j), permuted.interior_index(perm(j)))
                else {
                    continue;
                };
                assert!((s.get(ri, rj) - s2.get(pi, pj)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn coordinate_export_is_sorted() {
        let s = assemble_stiffness(&fk(2)).unwrap();
        let text = s.export_coordinate_text();
        assert_eq!(text.trim(), "0 0 4");
    }
}
