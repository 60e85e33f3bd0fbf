//! Plane-strain FE machinery on the periodic cell: reduced DOF space
//! (periodic slaves eliminated, rigid inclusion condensed to 3 DOFs, two
//! zero-mean multipliers appended), stiffness assembly, affine macro-strain
//! fields, stress loads and averaging, and the shared dense factorization.

use nalgebra::{DMatrix, DVector, Matrix2, Vector3};

use crate::error::{Error, Result};
use crate::mesh::PeriodicCellMesh;
use crate::tensor::ElasticTensor;

/// Relative stiffness of the weak tether grounding a floating rigid
/// inclusion (quasi-static regularization; the inclusion is otherwise
/// connected to the skeleton only through contact forces).
const TETHER_REL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Master node carrying its own two displacement DOFs.
    Free(usize),
    /// Periodic slave; fluctuations equal the master's.
    Slave(usize),
    /// Belongs to the rigid inclusion; condensed to (t1, t2, theta).
    Rigid,
}

/// Reduced DOF space of a periodic cell.
#[derive(Debug, Clone)]
pub struct CellSpace {
    pub kind: Vec<NodeKind>,
    /// Number of displacement-block DOFs (2 per free node + 3 rigid if any).
    pub n_disp: usize,
    /// Offset of the (t1, t2, theta) triple, if a rigid inclusion exists.
    pub rigid_offset: Option<usize>,
    pub rigid_center: [f64; 2],
    /// Mean square distance of rigid nodes from their centroid.
    pub rigid_msr: f64,
    /// Total reduced dimension: n_disp + 2 mean-value multipliers.
    pub n_total: usize,
}

impl CellSpace {
    pub fn new(mesh: &PeriodicCellMesh) -> Self {
        let n = mesh.n_nodes();
        let mut kind = vec![NodeKind::Free(usize::MAX); n];
        for &r in &mesh.rigid_nodes {
            kind[r] = NodeKind::Rigid;
        }
        for p in &mesh.periodic_pairs {
            kind[p.slave] = NodeKind::Slave(p.master);
        }
        let mut next = 0;
        for k in kind.iter_mut() {
            if let NodeKind::Free(ref mut d) = k {
                *d = next;
                next += 1;
            }
        }
        let n_free = next;
        let has_rigid = !mesh.rigid_nodes.is_empty();
        let n_disp = 2 * n_free + if has_rigid { 3 } else { 0 };
        let rigid_offset = has_rigid.then_some(2 * n_free);
        let (rigid_center, rigid_msr) = if has_rigid {
            let mut c = [0.0; 2];
            for &r in &mesh.rigid_nodes {
                c[0] += mesh.nodes[r][0];
                c[1] += mesh.nodes[r][1];
            }
            let m = mesh.rigid_nodes.len() as f64;
            c[0] /= m;
            c[1] /= m;
            let msr = mesh
                .rigid_nodes
                .iter()
                .map(|&r| {
                    let dx = mesh.nodes[r][0] - c[0];
                    let dy = mesh.nodes[r][1] - c[1];
                    dx * dx + dy * dy
                })
                .sum::<f64>()
                / m;
            (c, msr)
        } else {
            ([0.0; 2], 0.0)
        };
        Self {
            kind,
            n_disp,
            rigid_offset,
            rigid_center,
            rigid_msr,
            n_total: n_disp + 2,
        }
    }

    /// Linear combination of reduced DOFs giving (u_x, u_y) at a node.
    pub fn node_rows(&self, mesh: &PeriodicCellMesh, node: usize) -> [Vec<(usize, f64)>; 2] {
        let resolved = match self.kind[node] {
            NodeKind::Slave(m) => m,
            _ => node,
        };
        match self.kind[resolved] {
            NodeKind::Free(d) => [vec![(2 * d, 1.0)], vec![(2 * d + 1, 1.0)]],
            NodeKind::Rigid => {
                let off = self.rigid_offset.expect("rigid node without rigid block");
                let dx = mesh.nodes[resolved][0] - self.rigid_center[0];
                let dy = mesh.nodes[resolved][1] - self.rigid_center[1];
                [
                    vec![(off, 1.0), (off + 2, -dy)],
                    vec![(off + 1, 1.0), (off + 2, dx)],
                ]
            }
            NodeKind::Slave(_) => unreachable!("slave chains are depth one"),
        }
    }

    /// Expands a reduced vector to the full nodal field.
    pub fn expand(&self, mesh: &PeriodicCellMesh, reduced: &DVector<f64>) -> Vec<[f64; 2]> {
        let mut out = vec![[0.0; 2]; mesh.n_nodes()];
        for (node, val) in out.iter_mut().enumerate() {
            let rows = self.node_rows(mesh, node);
            for (c, row) in rows.iter().enumerate() {
                val[c] = row.iter().map(|&(d, w)| w * reduced[d]).sum();
            }
        }
        out
    }

    /// Adds a full nodal force into the reduced space (transpose of expand).
    pub fn scatter_force(
        &self,
        mesh: &PeriodicCellMesh,
        node: usize,
        force: [f64; 2],
        out: &mut DVector<f64>,
    ) {
        let rows = self.node_rows(mesh, node);
        for c in 0..2 {
            for &(d, w) in &rows[c] {
                out[d] += w * force[c];
            }
        }
    }

    /// Projects a full nodal field onto the reduced displacement DOFs by
    /// direct sampling (exact for fields consistent with the reductions).
    pub fn restrict(&self, mesh: &PeriodicCellMesh, full: &[[f64; 2]]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_total);
        for (node, k) in self.kind.iter().enumerate() {
            if let NodeKind::Free(d) = k {
                out[2 * d] = full[node][0];
                out[2 * d + 1] = full[node][1];
            }
        }
        if let Some(off) = self.rigid_offset {
            // Rigid-body fit: translation from the centroid average, rotation
            // from the moment about the centroid.
            let rigid: Vec<usize> = self
                .kind
                .iter()
                .enumerate()
                .filter(|(_, k)| matches!(k, NodeKind::Rigid))
                .map(|(i, _)| i)
                .collect();
            let m = rigid.len() as f64;
            let mut t = [0.0; 2];
            for &r in &rigid {
                t[0] += full[r][0];
                t[1] += full[r][1];
            }
            t[0] /= m;
            t[1] /= m;
            let mut num = 0.0;
            let mut den = 0.0;
            for &r in &rigid {
                let dx = mesh.nodes[r][0] - self.rigid_center[0];
                let dy = mesh.nodes[r][1] - self.rigid_center[1];
                num += dx * (full[r][1] - t[1]) - dy * (full[r][0] - t[0]);
                den += dx * dx + dy * dy;
            }
            out[off] = t[0];
            out[off + 1] = t[1];
            out[off + 2] = if den > 0.0 { num / den } else { 0.0 };
        }
        out
    }
}

/// Strain-displacement matrix entries of a linear triangle: gradients of the
/// barycentric shape functions, and the element area.
fn triangle_gradients(mesh: &PeriodicCellMesh, el: [usize; 3]) -> ([[f64; 2]; 3], f64) {
    let [a, b, c] = el;
    let pa = mesh.nodes[a];
    let pb = mesh.nodes[b];
    let pc = mesh.nodes[c];
    let area = crate::mesh::triangle_area(pa, pb, pc);
    let inv2a = 1.0 / (2.0 * area);
    let g = [
        [(pb[1] - pc[1]) * inv2a, (pc[0] - pb[0]) * inv2a],
        [(pc[1] - pa[1]) * inv2a, (pa[0] - pc[0]) * inv2a],
        [(pa[1] - pb[1]) * inv2a, (pb[0] - pa[0]) * inv2a],
    ];
    (g, area)
}

/// Engineering strain of a full nodal field on one triangle.
pub fn element_strain(
    mesh: &PeriodicCellMesh,
    el: [usize; 3],
    u_full: &[[f64; 2]],
) -> Vector3<f64> {
    let (g, _) = triangle_gradients(mesh, el);
    let mut e = Vector3::zeros();
    for (k, &n) in el.iter().enumerate() {
        e[0] += g[k][0] * u_full[n][0];
        e[1] += g[k][1] * u_full[n][1];
        e[2] += g[k][1] * u_full[n][0] + g[k][0] * u_full[n][1];
    }
    e
}

fn element_is_rigid(mesh: &PeriodicCellMesh, el: [usize; 3]) -> bool {
    el.iter().all(|&n| mesh.is_rigid(n))
}

/// Assembles the reduced cell stiffness: elastic block scaled by 1/|Y|,
/// weak tether on the rigid triple, and two zero-mean constraint rows over
/// the skeleton appended as a symmetric border.
pub fn assemble_cell_stiffness(
    mesh: &PeriodicCellMesh,
    space: &CellSpace,
    d: &ElasticTensor,
) -> Result<DMatrix<f64>> {
    let n = space.n_total;
    let mut a = DMatrix::zeros(n, n);
    let inv_area = 1.0 / mesh.cell_area();
    for &el in &mesh.elements {
        if element_is_rigid(mesh, el) {
            continue;
        }
        let (g, area) = triangle_gradients(mesh, el);
        if area <= 0.0 {
            return Err(Error::Assembly(format!(
                "non-positive element area {area:.3e}"
            )));
        }
        // Rows of B for node k: (dN/dx, 0; 0, dN/dy; dN/dy, dN/dx).
        let mut b = nalgebra::SMatrix::<f64, 3, 6>::zeros();
        for k in 0..3 {
            b[(0, 2 * k)] = g[k][0];
            b[(1, 2 * k + 1)] = g[k][1];
            b[(2, 2 * k)] = g[k][1];
            b[(2, 2 * k + 1)] = g[k][0];
        }
        let ke = b.transpose() * d.voigt * b * (area * inv_area);
        let rows: Vec<[Vec<(usize, f64)>; 2]> =
            el.iter().map(|&nd| space.node_rows(mesh, nd)).collect();
        for i in 0..6 {
            let ri = &rows[i / 2][i % 2];
            for j in 0..6 {
                let rj = &rows[j / 2][j % 2];
                for &(di, wi) in ri {
                    for &(dj, wj) in rj {
                        a[(di, dj)] += wi * wj * ke[(i, j)];
                    }
                }
            }
        }
    }
    let scale = (0..space.n_disp).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
    if scale <= 0.0 {
        return Err(Error::Assembly("empty elastic block".into()));
    }
    if let Some((kt, kr)) = tether_coefficients_from_scale(space, scale) {
        let off = space.rigid_offset.unwrap();
        a[(off, off)] += kt;
        a[(off + 1, off + 1)] += kt;
        a[(off + 2, off + 2)] += kr;
    }
    // Zero-mean constraints over the skeleton: rows sum |T|/3 * u_c per
    // component, scaled to the stiffness magnitude.
    let m0 = space.n_disp;
    for &el in &mesh.elements {
        if element_is_rigid(mesh, el) {
            continue;
        }
        let (_, area) = triangle_gradients(mesh, el);
        let w = scale * area * inv_area / 3.0;
        for &nd in &el {
            let rows = space.node_rows(mesh, nd);
            for c in 0..2 {
                for &(dj, wj) in &rows[c] {
                    a[(m0 + c, dj)] += w * wj;
                    a[(dj, m0 + c)] += w * wj;
                }
            }
        }
    }
    Ok(a)
}

fn tether_coefficients_from_scale(space: &CellSpace, scale: f64) -> Option<(f64, f64)> {
    space.rigid_offset.map(|_| {
        let kt = TETHER_REL * scale;
        (kt, kt * space.rigid_msr.max(1e-12))
    })
}

/// Tether stiffness (translation, rotation) applied to the rigid triple,
/// recomputed to match [`assemble_cell_stiffness`] exactly.
pub fn tether_coefficients(
    mesh: &PeriodicCellMesh,
    space: &CellSpace,
    d: &ElasticTensor,
) -> Option<(f64, f64)> {
    space.rigid_offset?;
    let inv_area = 1.0 / mesh.cell_area();
    let mut diag = vec![0.0f64; space.n_disp];
    for &el in &mesh.elements {
        if element_is_rigid(mesh, el) {
            continue;
        }
        let (g, area) = triangle_gradients(mesh, el);
        let mut b = nalgebra::SMatrix::<f64, 3, 6>::zeros();
        for k in 0..3 {
            b[(0, 2 * k)] = g[k][0];
            b[(1, 2 * k + 1)] = g[k][1];
            b[(2, 2 * k)] = g[k][1];
            b[(2, 2 * k + 1)] = g[k][0];
        }
        let ke = b.transpose() * d.voigt * b * (area * inv_area);
        let rows: Vec<[Vec<(usize, f64)>; 2]> =
            el.iter().map(|&nd| space.node_rows(mesh, nd)).collect();
        for i in 0..6 {
            for &(di, wi) in &rows[i / 2][i % 2] {
                for &(dj, wj) in &rows[i / 2][i % 2] {
                    if di == dj {
                        diag[di] += wi * wj * ke[(i, i)];
                    }
                }
            }
        }
    }
    let scale = diag.iter().copied().fold(0.0f64, f64::max);
    tether_coefficients_from_scale(space, scale)
}

/// Full nodal field of the affine map `E * (y - barycenter)`.
pub fn affine_field(e_macro: &Matrix2<f64>, mesh: &PeriodicCellMesh) -> Vec<[f64; 2]> {
    let c = mesh.barycenter();
    mesh.nodes
        .iter()
        .map(|p| {
            let y = [p[0] - c[0], p[1] - c[1]];
            [
                e_macro[(0, 0)] * y[0] + e_macro[(0, 1)] * y[1],
                e_macro[(1, 0)] * y[0] + e_macro[(1, 1)] * y[1],
            ]
        })
        .collect()
}

/// Reduced load with entries `-|Y|^-1 \int D e(u_full) : e(phi_k)`.
pub fn stress_load(
    mesh: &PeriodicCellMesh,
    space: &CellSpace,
    d: &ElasticTensor,
    u_full: &[[f64; 2]],
) -> DVector<f64> {
    let mut f = DVector::zeros(space.n_total);
    let inv_area = 1.0 / mesh.cell_area();
    for &el in &mesh.elements {
        if element_is_rigid(mesh, el) {
            continue;
        }
        let (g, area) = triangle_gradients(mesh, el);
        let sigma = d.voigt * element_strain(mesh, el, u_full);
        let w = -area * inv_area;
        for (k, &nd) in el.iter().enumerate() {
            let fx = w * (sigma[0] * g[k][0] + sigma[2] * g[k][1]);
            let fy = w * (sigma[1] * g[k][1] + sigma[2] * g[k][0]);
            space.scatter_force(mesh, nd, [fx, fy], &mut f);
        }
    }
    f
}

/// Cell average of the stress `|Y|^-1 \int_{Y_s} D e(u)`.
pub fn average_stress(
    mesh: &PeriodicCellMesh,
    d: &ElasticTensor,
    u_full: &[[f64; 2]],
) -> Matrix2<f64> {
    let mut s = Vector3::zeros();
    for &el in &mesh.elements {
        if element_is_rigid(mesh, el) {
            continue;
        }
        let (_, area) = triangle_gradients(mesh, el);
        s += d.voigt * element_strain(mesh, el, u_full) * area;
    }
    s /= mesh.cell_area();
    Matrix2::new(s[0], s[2], s[2], s[1])
}

/// Sparse LU factorization reused for all solves against one stiffness.
/// Immutable after construction; safe to share read-only across threads.
#[derive(Debug)]
pub struct Factorization {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    dim: usize,
}

pub fn factorize(a: &DMatrix<f64>) -> Result<Factorization> {
    if !a.is_square() {
        return Err(Error::Contract(format!(
            "factorize expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let dim = a.nrows();
    let mut triplets = Vec::new();
    for j in 0..dim {
        for i in 0..dim {
            let v = a[(i, j)];
            if v != 0.0 {
                triplets.push(faer::sparse::Triplet::new(i, j, v));
            }
        }
    }
    let m = faer::sparse::SparseColMat::<usize, f64>::try_new_from_triplets(dim, dim, &triplets)
        .map_err(|e| Error::Factorization(format!("sparse assembly failed: {e:?}")))?;
    // The backend panics (rather than erroring) on some structurally
    // singular inputs; contain that and surface it as a factorization error.
    let lu = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        let symbolic = faer::sparse::linalg::solvers::SymbolicLu::try_new(m.symbolic())
            .map_err(|e| Error::Factorization(format!("symbolic factorization failed: {e:?}")))?;
        faer::sparse::linalg::solvers::Lu::try_new_with_symbolic(symbolic, m.as_ref())
            .map_err(|e| Error::Factorization(format!("numeric factorization failed: {e:?}")))
    }))
    .map_err(|_| Error::Factorization("factorization failed (structurally singular)".into()))??;
    let f = Factorization { lu, dim };
    // Contract check: a pivot may slip through on nearly singular systems;
    // verify one solve residual.
    let rhs = DVector::from_fn(dim, |i, _| ((i % 7) as f64 - 3.0) / 3.0);
    let x = f.solve(&rhs)?;
    let res = (a * &x - &rhs).amax();
    if res.is_nan() || res > 1e-8 * rhs.amax() {
        return Err(Error::Factorization(format!(
            "numerically singular system (verification residual {res:.3e})"
        )));
    }
    Ok(f)
}

impl Factorization {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if rhs.len() != self.dim {
            return Err(Error::Contract(format!(
                "rhs length {} does not match factorization dimension {}",
                rhs.len(),
                self.dim
            )));
        }
        use faer::linalg::solvers::Solve;
        let mut m = faer::Mat::<f64>::zeros(self.dim, 1);
        for i in 0..self.dim {
            m[(i, 0)] = rhs[i];
        }
        let x = self.lu.solve(&m);
        let out = DVector::from_fn(self.dim, |i, _| x[(i, 0)]);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Factorization(
                "non-finite solution from back-substitution".into(),
            ));
        }
        Ok(out)
    }
}
