//! Simplicial meshes and nodal finite element functions.
//!
//! Meshes are generated as Friedrichs-Keller triangulations of axis-aligned
//! boxes (uniform intervals in 1D) and refined by uniform red refinement,
//! which keeps the hierarchy nested: every child element lies in exactly one
//! parent element and every coarse vertex is retained with its index.
//! Node ordering is lexicographic by (y, x) grid coordinates at generation;
//! refinement appends edge midpoints in sorted parent-edge order, so meshes
//! and everything assembled on them are bitwise reproducible across runs.
//!
//! Meshes are immutable after construction and shared via [`std::sync::Arc`].

use std::collections::HashMap;
use std::sync::Arc;

use crate::{Error, Result};

/// Maximum supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// Provenance of a node in a refined mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeOrigin {
    /// The node is a retained coarse node (same index in the coarse mesh).
    Coarse(usize),
    /// The node is the midpoint of the coarse edge between the given nodes.
    EdgeMidpoint(usize, usize),
}

/// A conforming simplicial mesh of an axis-aligned box domain.
#[derive(Debug)]
pub struct SimplicialMesh {
    dim: usize,
    vertices: Vec<[f64; MAX_DIM]>,
    /// Element connectivity; the first `dim + 1` entries of each row are used.
    elements: Vec<[usize; 4]>,
    boundary_mask: Vec<bool>,
    /// Global node index -> interior enumeration (dense, 0-based).
    interior_index: Vec<Option<usize>>,
    /// Interior enumeration -> global node index.
    interior_nodes: Vec<usize>,
    volumes: Vec<f64>,
    h: f64,
    bbox_lo: [f64; MAX_DIM],
    bbox_hi: [f64; MAX_DIM],
    parent: Option<Arc<SimplicialMesh>>,
    /// Child element -> parent element (empty for base meshes).
    parent_element: Vec<usize>,
    /// Node provenance relative to the parent (empty for base meshes).
    lineage: Vec<NodeOrigin>,
}

impl SimplicialMesh {
    /// Spatial dimension d of the mesh.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of nodes n (interior and boundary).
    pub fn n_nodes(&self) -> usize {
        self.vertices.len()
    }

    /// Number of elements.
    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Number of interior nodes m.
    pub fn n_interior(&self) -> usize {
        self.interior_nodes.len()
    }

    /// Coordinates of node `j` (first `dim` entries are meaningful).
    pub fn vertex(&self, j: usize) -> &[f64] {
        &self.vertices[j][..self.dim]
    }

    /// Global node indices of element `e`.
    pub fn element(&self, e: usize) -> &[usize] {
        &self.elements[e][..self.dim + 1]
    }

    /// Volume of element `e`.
    pub fn volume(&self, e: usize) -> f64 {
        self.volumes[e]
    }

    /// Whether node `j` lies on the domain boundary.
    pub fn is_boundary(&self, j: usize) -> bool {
        self.boundary_mask[j]
    }

    /// Interior slot of node `j`, or `None` for boundary nodes.
    pub fn interior_index(&self, j: usize) -> Option<usize> {
        self.interior_index[j]
    }

    /// Global node indices of the interior nodes, in interior enumeration order.
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior_nodes
    }

    /// Maximum element diameter h.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// The coarser mesh this one refines, if any.
    pub fn parent(&self) -> Option<&Arc<SimplicialMesh>> {
        self.parent.as_ref()
    }

    /// Parent element of child element `e` (only for refined meshes).
    pub fn parent_element(&self, e: usize) -> Option<usize> {
        self.parent_element.get(e).copied()
    }

    /// Node provenance relative to the parent mesh (empty for base meshes).
    pub fn lineage(&self) -> &[NodeOrigin] {
        &self.lineage
    }

    /// Bounding box of the mesh vertices.
    pub fn bounding_box(&self) -> (&[f64], &[f64]) {
        (&self.bbox_lo[..self.dim], &self.bbox_hi[..self.dim])
    }

    /// Largest per-axis extent of the domain box.
    pub fn domain_extent(&self) -> f64 {
        (0..self.dim)
            .map(|a| self.bbox_hi[a] - self.bbox_lo[a])
            .fold(0.0, f64::max)
    }

    /// Domain volume |Omega| (sum of element volumes).
    pub fn domain_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    /// Number of element-nodal slots k = (d+1) * #elements.
    pub fn n_element_nodal(&self) -> usize {
        (self.dim + 1) * self.elements.len()
    }

    fn finalize(
        dim: usize,
        vertices: Vec<[f64; MAX_DIM]>,
        elements: Vec<[usize; 4]>,
        boundary_mask: Vec<bool>,
        parent: Option<Arc<SimplicialMesh>>,
        parent_element: Vec<usize>,
        lineage: Vec<NodeOrigin>,
        h_override: Option<f64>,
    ) -> Result<SimplicialMesh> {
        let n = vertices.len();
        if boundary_mask.len() != n {
            return Err(Error::InvalidInput("boundary mask length mismatch".into()));
        }
        let mut volumes = Vec::with_capacity(elements.len());
        let mut h = 0.0f64;
        for (e, el) in elements.iter().enumerate() {
            let nodes = &el[..dim + 1];
            for &j in nodes {
                if j >= n {
                    return Err(Error::InvalidInput(format!(
                        "element {e} references node {j} out of range"
                    )));
                }
            }
            let vol = simplex_volume(dim, nodes, &vertices);
            if !(vol > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "element {e} has non-positive volume {vol}"
                )));
            }
            volumes.push(vol);
            if h_override.is_none() {
                for a in 0..=dim {
                    for b in (a + 1)..=dim {
                        let d = dist(dim, &vertices[nodes[a]], &vertices[nodes[b]]);
                        if d > h {
                            h = d;
                        }
                    }
                }
            }
        }
        if let Some(hv) = h_override {
            h = hv;
        }
        let mut interior_index = vec![None; n];
        let mut interior_nodes = Vec::new();
        for j in 0..n {
            if !boundary_mask[j] {
                interior_index[j] = Some(interior_nodes.len());
                interior_nodes.push(j);
            }
        }
        let mut bbox_lo = [f64::INFINITY; MAX_DIM];
        let mut bbox_hi = [f64::NEG_INFINITY; MAX_DIM];
        for v in &vertices {
            for a in 0..dim {
                bbox_lo[a] = bbox_lo[a].min(v[a]);
                bbox_hi[a] = bbox_hi[a].max(v[a]);
            }
        }
        for a in dim..MAX_DIM {
            bbox_lo[a] = 0.0;
            bbox_hi[a] = 0.0;
        }
        Ok(SimplicialMesh {
            dim,
            vertices,
            elements,
            boundary_mask,
            interior_index,
            interior_nodes,
            volumes,
            h,
            bbox_lo,
            bbox_hi,
            parent,
            parent_element,
            lineage,
        })
    }

    /// Serialize the mesh in the plain-text exchange format:
    /// header `d n #T`, then `n` coordinate lines, then `#T` element lines of
    /// 0-based node indices, then one line of boundary-node indices.
    /// Floats use the shortest round-trip representation, so export followed
    /// by [`SimplicialMesh::import_text`] is bit-exact.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{} {} {}\n",
            self.dim,
            self.n_nodes(),
            self.n_elements()
        ));
        for v in &self.vertices {
            let coords: Vec<String> = (0..self.dim).map(|a| format!("{}", v[a])).collect();
            out.push_str(&coords.join(" "));
            out.push('\n');
        }
        for el in &self.elements {
            let idx: Vec<String> = el[..self.dim + 1].iter().map(|j| j.to_string()).collect();
            out.push_str(&idx.join(" "));
            out.push('\n');
        }
        let bdry: Vec<String> = (0..self.n_nodes())
            .filter(|&j| self.boundary_mask[j])
            .map(|j| j.to_string())
            .collect();
        out.push_str(&bdry.join(" "));
        out.push('\n');
        out
    }

    /// Parse a mesh from the plain-text exchange format. The imported mesh
    /// has no refinement lineage.
    pub fn import_text(text: &str) -> Result<Arc<SimplicialMesh>> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty mesh file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::InvalidInput("mesh header must be `d n #T`".into()));
        }
        let dim: usize = parse(parts[0], "dimension")?;
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidInput(format!("dimension {dim} out of range")));
        }
        let n: usize = parse(parts[1], "node count")?;
        let t: usize = parse(parts[2], "element count")?;
        let mut vertices = Vec::with_capacity(n);
        for i in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| Error::InvalidInput(format!("missing coordinate line {i}")))?;
            let mut v = [0.0f64; MAX_DIM];
            let coords: Vec<&str> = line.split_whitespace().collect();
            if coords.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "coordinate line {i} has {} entries, expected {dim}",
                    coords.len()
                )));
            }
            for (a, c) in coords.iter().enumerate() {
                v[a] = parse(c, "coordinate")?;
                if !v[a].is_finite() {
                    return Err(Error::InvalidInput("non-finite coordinate".into()));
                }
            }
            vertices.push(v);
        }
        let mut elements = Vec::with_capacity(t);
        for i in 0..t {
            let line = lines
                .next()
                .ok_or_else(|| Error::InvalidInput(format!("missing element line {i}")))?;
            let idx: Vec<&str> = line.split_whitespace().collect();
            if idx.len() != dim + 1 {
                return Err(Error::InvalidInput(format!(
                    "element line {i} has {} entries, expected {}",
                    idx.len(),
                    dim + 1
                )));
            }
            let mut el = [0usize; 4];
            for (a, s) in idx.iter().enumerate() {
                el[a] = parse(s, "node index")?;
            }
            elements.push(el);
        }
        let bline = lines.next().unwrap_or("");
        let mut boundary_mask = vec![false; n];
        for s in bline.split_whitespace() {
            let j: usize = parse(s, "boundary index")?;
            if j >= n {
                return Err(Error::InvalidInput(format!(
                    "boundary index {j} out of range"
                )));
            }
            boundary_mask[j] = true;
        }
        let mesh = SimplicialMesh::finalize(
            dim,
            vertices,
            elements,
            boundary_mask,
            None,
            Vec::new(),
            Vec::new(),
            None,
        )?;
        Ok(Arc::new(mesh))
    }
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::InvalidInput(format!("cannot parse {what}: `{s}`")))
}

fn dist(dim: usize, a: &[f64; MAX_DIM], b: &[f64; MAX_DIM]) -> f64 {
    (0..dim).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

fn simplex_volume(dim: usize, nodes: &[usize], vertices: &[[f64; MAX_DIM]]) -> f64 {
    let p0 = &vertices[nodes[0]];
    match dim {
        1 => vertices[nodes[1]][0] - p0[0],
        2 => {
            let (a, b) = (&vertices[nodes[1]], &vertices[nodes[2]]);
            0.5 * ((a[0] - p0[0]) * (b[1] - p0[1]) - (a[1] - p0[1]) * (b[0] - p0[0]))
        }
        3 => {
            let (a, b, c) = (
                &vertices[nodes[1]],
                &vertices[nodes[2]],
                &vertices[nodes[3]],
            );
            let u = [a[0] - p0[0], a[1] - p0[1], a[2] - p0[2]];
            let v = [b[0] - p0[0], b[1] - p0[1], b[2] - p0[2]];
            let w = [c[0] - p0[0], c[1] - p0[1], c[2] - p0[2]];
            (u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0])
                + u[2] * (v[0] * w[1] - v[1] * w[0]))
                / 6.0
        }
        _ => f64::NAN,
    }
}

/// Friedrichs-Keller triangulation of the axis-aligned box `[lo, hi]^d` with
/// `n_per_axis` grid cells per axis. In 2D every grid square is split into
/// two triangles along the lower-left to upper-right diagonal; in 1D uniform
/// intervals are produced. 3D generation is not supported.
pub fn friedrichs_keller(lo: &[f64], hi: &[f64], n_per_axis: usize) -> Result<Arc<SimplicialMesh>> {
    let dim = lo.len();
    if hi.len() != dim {
        return Err(Error::InvalidInput("box bound dimensions differ".into()));
    }
    if dim == 0 || dim > MAX_DIM {
        return Err(Error::InvalidInput(format!("dimension {dim} out of range")));
    }
    if dim == 3 {
        return Err(Error::Unsupported(
            "3D mesh generation is not provided; supply a 3D mesh via import".into(),
        ));
    }
    if n_per_axis < 1 {
        return Err(Error::InvalidInput("n_per_axis must be >= 1".into()));
    }
    for a in 0..dim {
        if !(hi[a] > lo[a]) || !lo[a].is_finite() || !hi[a].is_finite() {
            return Err(Error::InvalidInput(format!(
                "degenerate box on axis {a}: [{}, {}]",
                lo[a], hi[a]
            )));
        }
    }
    let n = n_per_axis;
    let step: Vec<f64> = (0..dim).map(|a| (hi[a] - lo[a]) / n as f64).collect();
    // Node coordinates on the grid line: the endpoints are exact so that
    // boundary detection and midpoint arithmetic stay exact.
    let coord = |a: usize, i: usize| -> f64 {
        if i == 0 {
            lo[a]
        } else if i == n {
            hi[a]
        } else {
            lo[a] + step[a] * i as f64
        }
    };
    let mut vertices = Vec::new();
    let mut elements = Vec::new();
    match dim {
        1 => {
            for i in 0..=n {
                vertices.push([coord(0, i), 0.0, 0.0]);
            }
            for i in 0..n {
                elements.push([i, i + 1, 0, 0]);
            }
        }
        2 => {
            // Lexicographic by (y, x): index = iy * (n + 1) + ix.
            for iy in 0..=n {
                for ix in 0..=n {
                    vertices.push([coord(0, ix), coord(1, iy), 0.0]);
                }
            }
            for iy in 0..n {
                for ix in 0..n {
                    let ll = iy * (n + 1) + ix;
                    let lr = ll + 1;
                    let ul = ll + (n + 1);
                    let ur = ul + 1;
                    elements.push([ll, lr, ur, 0]);
                    elements.push([ll, ur, ul, 0]);
                }
            }
        }
        _ => unreachable!(),
    }
    let boundary_mask = topological_boundary(dim, vertices.len(), &elements);
    let mesh = SimplicialMesh::finalize(
        dim,
        vertices,
        elements,
        boundary_mask,
        None,
        Vec::new(),
        Vec::new(),
        None,
    )?;
    Ok(Arc::new(mesh))
}

/// Boundary nodes from mesh topology: a facet (node in 1D, edge in 2D) is on
/// the boundary iff it belongs to exactly one element.
fn topological_boundary(dim: usize, n: usize, elements: &[[usize; 4]]) -> Vec<bool> {
    let mut mask = vec![false; n];
    match dim {
        1 => {
            let mut count = vec![0usize; n];
            for el in elements {
                count[el[0]] += 1;
                count[el[1]] += 1;
            }
            for j in 0..n {
                if count[j] == 1 {
                    mask[j] = true;
                }
            }
        }
        2 => {
            let mut count: HashMap<(usize, usize), usize> = HashMap::new();
            for el in elements {
                for (a, b) in [(el[0], el[1]), (el[1], el[2]), (el[2], el[0])] {
                    let key = (a.min(b), a.max(b));
                    *count.entry(key).or_insert(0) += 1;
                }
            }
            for (&(a, b), &c) in &count {
                if c == 1 {
                    mask[a] = true;
                    mask[b] = true;
                }
            }
        }
        _ => {}
    }
    mask
}

/// Uniform red refinement: every simplex is split into `2^d` congruent
/// children via edge midpoints (d <= 2). Coarse nodes keep their indices and
/// midpoints are appended in sorted parent-edge order; the child mesh records
/// its parent, per-child parent elements, and per-node provenance.
pub fn red_refine(mesh: &Arc<SimplicialMesh>) -> Result<Arc<SimplicialMesh>> {
    let dim = mesh.dim();
    if dim == 3 {
        return Err(Error::Unsupported(
            "red refinement is implemented for d <= 2".into(),
        ));
    }
    let n = mesh.n_nodes();
    let mut vertices = mesh.vertices.clone();
    let mut lineage: Vec<NodeOrigin> = (0..n).map(NodeOrigin::Coarse).collect();

    // Collect parent edges and count incidences for boundary classification.
    let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
    for e in 0..mesh.n_elements() {
        let el = mesh.element(e);
        match dim {
            1 => {
                let key = (el[0].min(el[1]), el[0].max(el[1]));
                *edge_count.entry(key).or_insert(0) += 1;
            }
            2 => {
                for (a, b) in [(el[0], el[1]), (el[1], el[2]), (el[2], el[0])] {
                    *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                }
            }
            _ => unreachable!(),
        }
    }
    let mut edges: Vec<(usize, usize)> = edge_count.keys().copied().collect();
    edges.sort_unstable();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::with_capacity(edges.len());
    let mut boundary_mask = mesh.boundary_mask.clone();
    for &(a, b) in &edges {
        let idx = vertices.len();
        let mut v = [0.0; MAX_DIM];
        for c in 0..dim {
            v[c] = 0.5 * (mesh.vertices[a][c] + mesh.vertices[b][c]);
        }
        vertices.push(v);
        lineage.push(NodeOrigin::EdgeMidpoint(a, b));
        // The midpoint of a boundary edge is a boundary node. In 1D a new
        // midpoint is always interior.
        boundary_mask.push(dim == 2 && edge_count[&(a, b)] == 1);
        midpoint.insert((a, b), idx);
    }

    let mid = |a: usize, b: usize| midpoint[&(a.min(b), a.max(b))];
    let mut elements = Vec::with_capacity(mesh.n_elements() << dim);
    let mut parent_element = Vec::with_capacity(mesh.n_elements() << dim);
    for e in 0..mesh.n_elements() {
        let el = mesh.element(e);
        match dim {
            1 => {
                let m = mid(el[0], el[1]);
                elements.push([el[0], m, 0, 0]);
                elements.push([m, el[1], 0, 0]);
                parent_element.extend([e, e]);
            }
            2 => {
                let (a, b, c) = (el[0], el[1], el[2]);
                let (mab, mbc, mca) = (mid(a, b), mid(b, c), mid(c, a));
                elements.push([a, mab, mca, 0]);
                elements.push([mab, b, mbc, 0]);
                elements.push([mca, mbc, c, 0]);
                elements.push([mab, mbc, mca, 0]);
                parent_element.extend([e, e, e, e]);
            }
            _ => unreachable!(),
        }
    }
    let h = mesh.h() / 2.0;
    let refined = SimplicialMesh::finalize(
        dim,
        vertices,
        elements,
        boundary_mask,
        Some(mesh.clone()),
        parent_element,
        lineage,
        Some(h),
    )?;
    Ok(Arc::new(refined))
}

/// A piecewise linear finite element function given by one coefficient per
/// mesh node. Membership in the zero-trace subspace means all coefficients on
/// boundary nodes vanish.
#[derive(Debug, Clone)]
pub struct FeFunction {
    mesh: Arc<SimplicialMesh>,
    coeffs: Vec<f64>,
}

impl FeFunction {
    /// Wrap a nodal coefficient vector (length must equal the node count).
    pub fn new(mesh: Arc<SimplicialMesh>, coeffs: Vec<f64>) -> Result<FeFunction> {
        if coeffs.len() != mesh.n_nodes() {
            return Err(Error::InvalidInput(format!(
                "coefficient length {} does not match node count {}",
                coeffs.len(),
                mesh.n_nodes()
            )));
        }
        Ok(FeFunction { mesh, coeffs })
    }

    /// The zero function.
    pub fn zeros(mesh: Arc<SimplicialMesh>) -> FeFunction {
        let n = mesh.n_nodes();
        FeFunction {
            mesh,
            coeffs: vec![0.0; n],
        }
    }

    /// Constant function c at every node.
    pub fn constant(mesh: Arc<SimplicialMesh>, c: f64) -> FeFunction {
        let n = mesh.n_nodes();
        FeFunction {
            mesh,
            coeffs: vec![c; n],
        }
    }

    /// Nodal interpolant of a callable.
    pub fn from_node_fn(mesh: Arc<SimplicialMesh>, f: impl Fn(&[f64]) -> f64) -> FeFunction {
        let coeffs = (0..mesh.n_nodes()).map(|j| f(mesh.vertex(j))).collect();
        FeFunction { mesh, coeffs }
    }

    /// Build a zero-trace function from a vector over interior nodes.
    pub fn from_interior(mesh: Arc<SimplicialMesh>, interior: &[f64]) -> Result<FeFunction> {
        if interior.len() != mesh.n_interior() {
            return Err(Error::InvalidInput(format!(
                "interior vector length {} does not match interior count {}",
                interior.len(),
                mesh.n_interior()
            )));
        }
        let mut coeffs = vec![0.0; mesh.n_nodes()];
        for (slot, &j) in mesh.interior_nodes().iter().enumerate() {
            coeffs[j] = interior[slot];
        }
        Ok(FeFunction { mesh, coeffs })
    }

    pub fn mesh(&self) -> &Arc<SimplicialMesh> {
        &self.mesh
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// Restriction to the interior nodes in interior enumeration order.
    pub fn interior_vec(&self) -> Vec<f64> {
        self.mesh
            .interior_nodes()
            .iter()
            .map(|&j| self.coeffs[j])
            .collect()
    }

    /// True if all boundary coefficients vanish (membership in V_h^0).
    pub fn is_zero_trace(&self) -> bool {
        (0..self.mesh.n_nodes()).all(|j| !self.mesh.is_boundary(j) || self.coeffs[j] == 0.0)
    }
}

/// Same-instance check used by binary operations on finite element functions.
pub fn same_mesh(a: &FeFunction, b: &FeFunction) -> bool {
    Arc::ptr_eq(a.mesh(), b.mesh())
}

/// Exact nodal prolongation of `v` onto `fine`, which must be obtained from
/// `v`'s mesh by (possibly repeated) red refinement. Piecewise linear
/// functions are reproduced exactly; the map is linear.
pub fn prolongate(v: &FeFunction, fine: &Arc<SimplicialMesh>) -> Result<FeFunction> {
    // Walk the parent chain from `fine` down to the function's mesh.
    let mut chain: Vec<&Arc<SimplicialMesh>> = Vec::new();
    let mut cur = fine;
    while !Arc::ptr_eq(cur, v.mesh()) {
        chain.push(cur);
        cur = cur.parent().ok_or_else(|| {
            Error::MeshMismatch("target mesh is not a refinement of the function's mesh".into())
        })?;
    }
    let mut coeffs = v.coeffs().to_vec();
    for mesh in chain.into_iter().rev() {
        let mut next = vec![0.0; mesh.n_nodes()];
        for (j, origin) in mesh.lineage().iter().enumerate() {
            next[j] = match *origin {
                NodeOrigin::Coarse(c) => coeffs[c],
                NodeOrigin::EdgeMidpoint(a, b) => 0.5 * (coeffs[a] + coeffs[b]),
            };
        }
        coeffs = next;
    }
    FeFunction::new(fine.clone(), coeffs)
}

/// Element-nodal evaluation vector of a finite element function: entry
/// `e * (d+1) + j` is the value at local node `j` of element `e`. Shared
/// nodes are duplicated consistently.
pub fn element_nodal_map(v: &FeFunction) -> Vec<f64> {
    let mesh = v.mesh();
    let mut out = Vec::with_capacity(mesh.n_element_nodal());
    for e in 0..mesh.n_elements() {
        for &j in mesh.element(e) {
            out.push(v.coeffs()[j]);
        }
    }
    out
}

/// Element-nodal evaluation of a per-element callable `f(element, coords)`.
/// Values may differ between elements sharing a node, which is how
/// mesh-piecewise continuous data (e.g. piecewise constant potentials) are
/// represented.
pub fn element_nodal_map_fn(
    mesh: &SimplicialMesh,
    mut f: impl FnMut(usize, &[f64]) -> f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(mesh.n_element_nodal());
    for e in 0..mesh.n_elements() {
        for &j in mesh.element(e) {
            out.push(f(e, mesh.vertex(j)));
        }
    }
    out
}

/// Recover nodal coefficients from an element-nodal vector of an FeFunction
/// by averaging the duplicated entries per node.
pub fn average_element_nodal(mesh: &SimplicialMesh, values: &[f64]) -> Result<Vec<f64>> {
    if values.len() != mesh.n_element_nodal() {
        return Err(Error::InvalidInput(
            "element-nodal vector length mismatch".into(),
        ));
    }
    let mut sum = vec![0.0; mesh.n_nodes()];
    let mut cnt = vec![0usize; mesh.n_nodes()];
    let mut slot = 0;
    for e in 0..mesh.n_elements() {
        for &j in mesh.element(e) {
            sum[j] += values[slot];
            cnt[j] += 1;
            slot += 1;
        }
    }
    for j in 0..mesh.n_nodes() {
        if cnt[j] > 0 {
            sum[j] /= cnt[j] as f64;
        }
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fk_unit_square(n: usize) -> Arc<SimplicialMesh> {
        friedrichs_keller(&[0.0, 0.0], &[1.0, 1.0], n).unwrap()
    }

    /// Order-independent signature: sorted vertex list plus element vertex
    /// coordinate tuples sorted within and across elements.
    fn canonical_signature(mesh: &SimplicialMesh) -> (Vec<Vec<u64>>, Vec<Vec<Vec<u64>>>) {
        let key = |j: usize| -> Vec<u64> {
            mesh.vertex(j).iter().map(|c| c.to_bits()).collect()
        };
        let mut verts: Vec<Vec<u64>> = (0..mesh.n_nodes()).map(key).collect();
        verts.sort();
        let mut els: Vec<Vec<Vec<u64>>> = (0..mesh.n_elements())
            .map(|e| {
                let mut vs: Vec<Vec<u64>> = mesh.element(e).iter().map(|&j| key(j)).collect();
                vs.sort();
                vs
            })
            .collect();
        els.sort();
        (verts, els)
    }

    #[test]
    fn fk_smallest_mesh_counts() {
        let mesh = fk_unit_square(1);
        assert_eq!(mesh.n_elements(), 2);
        assert_eq!(mesh.n_nodes(), 4);
        assert_eq!(mesh.n_interior(), 0);
    }

    #[test]
    fn fk_n2_counts() {
        let mesh = fk_unit_square(2);
        assert_eq!(mesh.n_elements(), 8);
        assert_eq!(mesh.n_nodes(), 9);
        assert_eq!(mesh.n_interior(), 1);
        // the single interior node is the center
        let j = mesh.interior_nodes()[0];
        assert_eq!(mesh.vertex(j), &[0.5, 0.5]);
    }

    #[test]
    fn fk_harmonic_domain_h_is_sqrt2() {
        let mesh = friedrichs_keller(&[-8.0, -8.0], &[8.0, 8.0], 16).unwrap();
        assert_eq!(mesh.n_nodes(), 17 * 17);
        assert!((mesh.h() - 2.0f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn fk_rejects_bad_input() {
        assert!(friedrichs_keller(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 2).is_err());
        assert!(friedrichs_keller(&[0.0, 0.0], &[0.0, 1.0], 2).is_err());
        assert!(friedrichs_keller(&[0.0], &[1.0], 0).is_err());
    }

    #[test]
    fn refined_fk1_matches_fk2_up_to_ordering() {
        let refined = red_refine(&fk_unit_square(1)).unwrap();
        let direct = fk_unit_square(2);
        assert_eq!(refined.n_elements(), 8);
        assert_eq!(canonical_signature(&refined), canonical_signature(&direct));
    }

    #[test]
    fn refine_1d_halves_h() {
        let mesh = friedrichs_keller(&[0.0], &[1.0], 4).unwrap();
        let fine = red_refine(&mesh).unwrap();
        assert_eq!(fine.n_elements(), 8);
        assert_eq!(fine.h(), mesh.h() / 2.0);
    }

    #[test]
    fn two_refinements_of_fk2() {
        let mut mesh = fk_unit_square(2);
        for _ in 0..2 {
            mesh = red_refine(&mesh).unwrap();
        }
        assert_eq!(mesh.n_elements(), 128);
    }

    #[test]
    fn refinement_keeps_coarse_vertices_and_parents() {
        let coarse = fk_unit_square(2);
        let fine = red_refine(&coarse).unwrap();
        for j in 0..coarse.n_nodes() {
            assert_eq!(fine.vertex(j), coarse.vertex(j));
        }
        for e in 0..fine.n_elements() {
            let p = fine.parent_element(e).unwrap();
            assert_eq!(p, e / 4);
        }
        assert_eq!(
            fine.n_interior(),
            fine.n_nodes() - (0..fine.n_nodes()).filter(|&j| fine.is_boundary(j)).count()
        );
    }

    #[test]
    fn fk_triangles_are_right_isoceles_after_refinement() {
        // Every triangle has squared side lengths (s, s, 2s) for some s.
        let mut mesh = fk_unit_square(2);
        for _ in 0..2 {
            mesh = red_refine(&mesh).unwrap();
        }
        for e in 0..mesh.n_elements() {
            let el = mesh.element(e);
            let mut d2: Vec<f64> = (0..3)
                .map(|i| {
                    let (a, b) = (mesh.vertex(el[i]), mesh.vertex(el[(i + 1) % 3]));
                    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
                })
                .collect();
            d2.sort_by(f64::total_cmp);
            assert!((d2[0] - d2[1]).abs() < 1e-15);
            assert!((d2[2] - 2.0 * d2[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn prolongate_reproduces_constants() {
        let coarse = fk_unit_square(2);
        let fine = red_refine(&coarse).unwrap();
        let v = FeFunction::constant(coarse, 1.0);
        let pv = prolongate(&v, &fine).unwrap();
        assert!(pv.coeffs().iter().all(|&c| c == 1.0));
    }

    #[test]
    fn prolongate_hat_function() {
        let coarse = fk_unit_square(2);
        let fine = red_refine(&coarse).unwrap();
        let center = coarse.interior_nodes()[0];
        let mut v = FeFunction::zeros(coarse.clone());
        v.coeffs_mut()[center] = 1.0;
        let pv = prolongate(&v, &fine).unwrap();
        for (j, origin) in fine.lineage().iter().enumerate() {
            let expected = match *origin {
                NodeOrigin::Coarse(c) => {
                    if c == center {
                        1.0
                    } else {
                        0.0
                    }
                }
                NodeOrigin::EdgeMidpoint(a, b) => {
                    if a == center || b == center {
                        0.5
                    } else {
                        0.0
                    }
                }
            };
            assert_eq!(pv.coeffs()[j], expected);
        }
    }

    #[test]
    fn prolongation_composes_over_two_levels() {
        let m0 = fk_unit_square(2);
        let m1 = red_refine(&m0).unwrap();
        let m2 = red_refine(&m1).unwrap();
        let v = FeFunction::from_node_fn(m0.clone(), |x| 1.0 + 2.0 * x[0] - 0.5 * x[1]);
        let direct = prolongate(&v, &m2).unwrap();
        let stepped = prolongate(&prolongate(&v, &m1).unwrap(), &m2).unwrap();
        for (a, b) in direct.coeffs().iter().zip(stepped.coeffs()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn prolongate_rejects_unrelated_mesh() {
        let a = fk_unit_square(2);
        let b = fk_unit_square(4);
        let v = FeFunction::constant(a, 1.0);
        assert!(prolongate(&v, &b).is_err());
    }

    #[test]
    fn element_nodal_map_constant_on_fk1() {
        let mesh = fk_unit_square(1);
        let v = FeFunction::constant(mesh, 1.0);
        let w = element_nodal_map(&v);
        assert_eq!(w, vec![1.0; 6]);
    }

    #[test]
    fn element_nodal_map_shared_diagonal_hat() {
        let mesh = fk_unit_square(1);
        // Node 0 = (0,0) lies on the shared diagonal of both triangles.
        let mut v = FeFunction::zeros(mesh.clone());
        v.coeffs_mut()[0] = 1.0;
        let w = element_nodal_map(&v);
        for e in 0..2 {
            let el = mesh.element(e);
            for (loc, &j) in el.iter().enumerate() {
                let expected = if j == 0 { 1.0 } else { 0.0 };
                assert_eq!(w[e * 3 + loc], expected);
            }
        }
        // both triangles carry the value 1 at that node's slot
        assert_eq!(w.iter().filter(|&&x| x == 1.0).count(), 2);
    }

    #[test]
    fn element_nodal_map_fn_can_differ_across_elements() {
        let mesh = fk_unit_square(2);
        // piecewise constant per element, discontinuous across edges
        let w = element_nodal_map_fn(&mesh, |e, _| e as f64);
        for e in 0..mesh.n_elements() {
            for loc in 0..3 {
                assert_eq!(w[e * 3 + loc], e as f64);
            }
        }
    }

    #[test]
    fn averaging_recovers_nodal_coefficients() {
        let mesh = fk_unit_square(3);
        let v = FeFunction::from_node_fn(mesh.clone(), |x| x[0] * 7.0 - x[1] * 3.0 + 0.25);
        let w = element_nodal_map(&v);
        let rec = average_element_nodal(&mesh, &w).unwrap();
        for (a, b) in rec.iter().zip(v.coeffs()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn export_import_round_trip_is_bit_exact() {
        let mut mesh = friedrichs_keller(&[-1.0, -1.0], &[1.0, 1.0], 3).unwrap();
        mesh = red_refine(&mesh).unwrap();
        let text = mesh.export_text();
        let back = SimplicialMesh::import_text(&text).unwrap();
        assert_eq!(back.n_nodes(), mesh.n_nodes());
        assert_eq!(back.n_elements(), mesh.n_elements());
        for j in 0..mesh.n_nodes() {
            assert_eq!(back.vertex(j), mesh.vertex(j));
            assert_eq!(back.is_boundary(j), mesh.is_boundary(j));
        }
        for e in 0..mesh.n_elements() {
            assert_eq!(back.element(e), mesh.element(e));
        }
        assert_eq!(back.export_text(), text);
    }

    #[test]
    fn import_rejects_malformed_input() {
        assert!(SimplicialMesh::import_text("").is_err());
        // degenerate element (repeated coordinates -> zero volume)
        assert!(SimplicialMesh::import_text("2 3 1\n0 0\n1 0\n1 0\n0 1 2\n\n").is_err());
        // node index out of range
        assert!(SimplicialMesh::import_text("1 2 1\n0\n1\n0 5\n\n").is_err());
    }

    #[test]
    fn one_dimensional_mesh_basics() {
        let mesh = friedrichs_keller(&[0.0], &[1.0], 4).unwrap();
        assert_eq!(mesh.n_nodes(), 5);
        assert_eq!(mesh.n_interior(), 3);
        assert!(mesh.is_boundary(0) && mesh.is_boundary(4));
        assert!((mesh.h() - 0.25).abs() < 1e-15);
        assert!((mesh.domain_volume() - 1.0).abs() < 1e-15);
    }
}
