//! Macroscopic stage of the two-scale loop: quad4 plane-strain FE machinery
//! with tied/fixed degrees of freedom, the gamma-restricted two-scale contact
//! set, and three increment methods — ML (frozen bilateral contact, linear),
//! MC-Uzawa (weak coupling) and MC-nonsmooth-Newton (tight coupling).

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::homog::{contact_sensitivity, homogenized_tangent, solve_correctors};
use crate::microsolver::{solve_local_contact, CellContext, MicroState};

/// Full-set sentinel for the gamma neighborhood: monitor every inactive
/// record instead of a boundary band.
pub const GAMMA_FULL: i32 = -1;

/// One constraint-DOF kind of the macro displacement vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DofKind {
    Free(usize),
    /// Prescribed value at unit load factor.
    Fixed(f64),
    /// Member of a tied constant-displacement group (one shared unknown).
    Tied(usize),
}

/// Reduced macro displacement space: `u_full = T q + factor * g` with one
/// column per free DOF or tied group.
#[derive(Debug, Clone)]
pub struct MacroSpace {
    pub kind: Vec<DofKind>,
    pub n_q: usize,
}

impl MacroSpace {
    pub fn new(n_dofs: usize, fixed: &[(usize, f64)], tied: &[Vec<usize>]) -> Result<Self> {
        let mut kind = vec![DofKind::Free(usize::MAX); n_dofs];
        let mut seen = vec![false; n_dofs];
        for &(d, v) in fixed {
            if d >= n_dofs {
                return Err(Error::Config(format!("fixed DOF {d} out of range")));
            }
            if std::mem::replace(&mut seen[d], true) {
                return Err(Error::Config(format!("DOF {d} constrained twice")));
            }
            kind[d] = DofKind::Fixed(v);
        }
        for (gi, group) in tied.iter().enumerate() {
            if group.len() < 2 {
                return Err(Error::Config("tied group needs at least two DOFs".into()));
            }
            for &d in group {
                if d >= n_dofs {
                    return Err(Error::Config(format!("tied DOF {d} out of range")));
                }
                if std::mem::replace(&mut seen[d], true) {
                    return Err(Error::Config(format!("DOF {d} constrained twice")));
                }
                kind[d] = DofKind::Tied(gi);
            }
        }
        let mut n_free = 0;
        for k in kind.iter_mut() {
            if matches!(k, DofKind::Free(_)) {
                *k = DofKind::Free(n_free);
                n_free += 1;
            }
        }
        let n_q = n_free + tied.len();
        let kind = kind
            .into_iter()
            .map(|k| match k {
                DofKind::Tied(g) => DofKind::Tied(n_free + g),
                other => other,
            })
            .collect();
        Ok(Self { kind, n_q })
    }

    /// Reduced column index of a full DOF, if it carries an unknown.
    fn q_index(&self, dof: usize) -> Option<usize> {
        match self.kind[dof] {
            DofKind::Free(i) | DofKind::Tied(i) => Some(i),
            DofKind::Fixed(_) => None,
        }
    }

    pub fn expand(&self, q: &DVector<f64>, factor: f64) -> DVector<f64> {
        DVector::from_fn(self.kind.len(), |d, _| match self.kind[d] {
            DofKind::Free(i) | DofKind::Tied(i) => q[i],
            DofKind::Fixed(v) => factor * v,
        })
    }

    /// Prescribed part alone: `expand(0, factor)`.
    pub fn dirichlet(&self, factor: f64) -> DVector<f64> {
        DVector::from_fn(self.kind.len(), |d, _| match self.kind[d] {
            DofKind::Fixed(v) => factor * v,
            _ => 0.0,
        })
    }

    /// `T^T v`: sums full-space generalized forces into the unknowns.
    pub fn reduce(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut r = DVector::zeros(self.n_q);
        for (d, k) in self.kind.iter().enumerate() {
            if let DofKind::Free(i) | DofKind::Tied(i) = k {
                r[*i] += v[d];
            }
        }
        r
    }

    /// `T^T K T` for a full dense matrix.
    pub fn reduce_matrix(&self, k_full: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.kind.len();
        let mut r = DMatrix::zeros(self.n_q, self.n_q);
        for a in 0..n {
            let Some(ia) = self.q_index(a) else { continue };
            for b in 0..n {
                if let Some(ib) = self.q_index(b) {
                    r[(ia, ib)] += k_full[(a, b)];
                }
            }
        }
        r
    }
}

/// One macro quadrature point: strain-displacement matrix over the element
/// DOFs and the integration weight (detJ already folded in).
#[derive(Debug, Clone)]
pub struct QuadPoint {
    pub element: usize,
    pub nodes: [usize; 4],
    /// 3x8 Voigt (engineering shear) strain-displacement matrix.
    pub b: DMatrix<f64>,
    pub weight: f64,
}

impl QuadPoint {
    /// Voigt strain (engineering shear) from the full displacement vector.
    pub fn strain(&self, u_full: &DVector<f64>) -> Vector3<f64> {
        let mut e = Vector3::zeros();
        for (a, &n) in self.nodes.iter().enumerate() {
            for c in 0..2 {
                let col = 2 * a + c;
                let u = u_full[2 * n + c];
                for r in 0..3 {
                    e[r] += self.b[(r, col)] * u;
                }
            }
        }
        e
    }
}

/// Reference-square corner signs matching the CCW quad node order.
const XI: [f64; 4] = [-1.0, 1.0, 1.0, -1.0];
const ETA: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];

fn quad_b_matrix(coords: &[[f64; 2]; 4], xi: f64, eta: f64) -> Result<(DMatrix<f64>, f64)> {
    let mut dn = [[0.0f64; 2]; 4];
    for i in 0..4 {
        dn[i][0] = 0.25 * XI[i] * (1.0 + ETA[i] * eta);
        dn[i][1] = 0.25 * ETA[i] * (1.0 + XI[i] * xi);
    }
    let mut j = Matrix2::zeros();
    for i in 0..4 {
        j[(0, 0)] += dn[i][0] * coords[i][0];
        j[(0, 1)] += dn[i][0] * coords[i][1];
        j[(1, 0)] += dn[i][1] * coords[i][0];
        j[(1, 1)] += dn[i][1] * coords[i][1];
    }
    let det = j.determinant();
    if det <= 0.0 {
        return Err(Error::Mesh(format!("non-positive quad Jacobian {det:.3e}")));
    }
    let jinv = j.try_inverse().unwrap();
    let mut b = DMatrix::zeros(3, 8);
    for i in 0..4 {
        let dx = jinv[(0, 0)] * dn[i][0] + jinv[(0, 1)] * dn[i][1];
        let dy = jinv[(1, 0)] * dn[i][0] + jinv[(1, 1)] * dn[i][1];
        b[(0, 2 * i)] = dx;
        b[(1, 2 * i + 1)] = dy;
        b[(2, 2 * i)] = dy;
        b[(2, 2 * i + 1)] = dx;
    }
    Ok((b, det))
}

/// A macroscopic boundary-value problem: mesh, constrained space, quadrature
/// data and the external load at unit load factor.
#[derive(Debug, Clone)]
pub struct MacroProblem {
    pub mesh: crate::mesh::MacroMesh,
    pub space: MacroSpace,
    pub qps: Vec<QuadPoint>,
    /// Consistent nodal load at load factor 1 (full-space).
    pub f_ext: DVector<f64>,
}

impl MacroProblem {
    pub fn new(
        mesh: crate::mesh::MacroMesh,
        space: MacroSpace,
        f_ext: DVector<f64>,
    ) -> Result<Self> {
        if space.kind.len() != 2 * mesh.n_nodes() || f_ext.len() != 2 * mesh.n_nodes() {
            return Err(Error::Config("macro space/load size mismatch".into()));
        }
        let mut qps = Vec::with_capacity(4 * mesh.quads.len());
        for (ei, quad) in mesh.quads.iter().enumerate() {
            let coords = [
                mesh.nodes[quad[0]],
                mesh.nodes[quad[1]],
                mesh.nodes[quad[2]],
                mesh.nodes[quad[3]],
            ];
            for (pt, w) in crate::mesh::gauss_2x2() {
                let (b, det) = quad_b_matrix(&coords, pt[0], pt[1])?;
                qps.push(QuadPoint {
                    element: ei,
                    nodes: *quad,
                    b,
                    weight: w * det,
                });
            }
        }
        Ok(Self {
            mesh,
            space,
            qps,
            f_ext,
        })
    }

    pub fn n_qps(&self) -> usize {
        self.qps.len()
    }

    /// Scatters a per-qp Voigt generalized stress into full nodal forces:
    /// `sum_gp w B^T s`.
    pub fn internal_force(&self, stress: impl Fn(usize) -> Vector3<f64>) -> DVector<f64> {
        let mut f = DVector::zeros(self.space.kind.len());
        for (qi, qp) in self.qps.iter().enumerate() {
            let s = stress(qi);
            for (a, &n) in qp.nodes.iter().enumerate() {
                for c in 0..2 {
                    let col = 2 * a + c;
                    let mut v = 0.0;
                    for r in 0..3 {
                        v += qp.b[(r, col)] * s[r];
                    }
                    f[2 * n + c] += qp.weight * v;
                }
            }
        }
        f
    }
}

/// Adds the consistent nodal load of a constant traction (GPa) on a set of
/// straight 2-node edges.
pub fn add_edge_traction(
    mesh: &crate::mesh::MacroMesh,
    edges: &[[usize; 2]],
    traction: [f64; 2],
    f: &mut DVector<f64>,
) {
    for e in edges {
        let a = mesh.nodes[e[0]];
        let b = mesh.nodes[e[1]];
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        for &n in e {
            f[2 * n] += 0.5 * len * traction[0];
            f[2 * n + 1] += 0.5 * len * traction[1];
        }
    }
}

/// Assembles the reduced tangent `T^T K T` and the Dirichlet coupling
/// `T^T K g` (at the given load factor) from per-qp Voigt tangents.
pub fn assemble_macro_tangent(
    problem: &MacroProblem,
    dh: &[Matrix3<f64>],
    factor: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if dh.len() != problem.n_qps() {
        return Err(Error::Contract(format!(
            "need one tangent per quadrature point ({} != {})",
            dh.len(),
            problem.n_qps()
        )));
    }
    let n = problem.space.kind.len();
    let mut k_full = DMatrix::zeros(n, n);
    for (qi, qp) in problem.qps.iter().enumerate() {
        let ke = qp.b.transpose() * dh[qi] * &qp.b * qp.weight;
        for a in 0..4 {
            for b in 0..4 {
                for ca in 0..2 {
                    for cb in 0..2 {
                        k_full[(2 * qp.nodes[a] + ca, 2 * qp.nodes[b] + cb)] +=
                            ke[(2 * a + ca, 2 * b + cb)];
                    }
                }
            }
        }
    }
    let g = problem.space.dirichlet(factor);
    let kg = problem.space.reduce(&(&k_full * &g));
    Ok((problem.space.reduce_matrix(&k_full), kg))
}

/// Reduced out-of-balance residual `T^T (f_ext - sum_gp w B^T sigma)`.
pub fn out_of_balance(
    problem: &MacroProblem,
    f_ext: &DVector<f64>,
    sigma: &[Vector3<f64>],
) -> DVector<f64> {
    let fi = problem.internal_force(|qi| sigma[qi]);
    problem.space.reduce(&(f_ext - fi))
}

/// The discrete two-scale contact set: the records each quadrature point
/// exposes to the macro problem, with their strain sensitivities.
#[derive(Debug, Clone, Default)]
pub struct SigmaGammaSet {
    /// (quadrature point, record) per entry, in deterministic order.
    pub entries: Vec<(usize, usize)>,
    pub gamma: i32,
}

/// Records each quadrature point keeps out of the bilateral branch: the
/// gamma-band around active-set transitions in collocation order (wrapping
/// when the contact chain is closed), or every inactive record in full mode.
pub fn gamma_band(active: &[usize], n_records: usize, closed: bool, gamma: i32) -> Vec<usize> {
    if n_records == 0 {
        return Vec::new();
    }
    let mut is_active = vec![false; n_records];
    for &a in active {
        is_active[a] = true;
    }
    if gamma < 0 {
        return (0..n_records).filter(|&r| !is_active[r]).collect();
    }
    let g = (gamma as usize).min(n_records);
    let mut band = vec![false; n_records];
    let last_pair = if closed { n_records } else { n_records - 1 };
    for i in 0..last_pair {
        let j = (i + 1) % n_records;
        if is_active[i] != is_active[j] {
            // Records within gamma hops on either side of the transition edge.
            for s in 0..g {
                if closed {
                    band[(i + n_records - s) % n_records] = true;
                    band[(j + s) % n_records] = true;
                } else {
                    if i >= s {
                        band[i - s] = true;
                    }
                    if j + s < n_records {
                        band[j + s] = true;
                    }
                }
            }
        }
    }
    (0..n_records).filter(|&r| band[r]).collect()
}

pub fn build_sigma_gamma(micro: &[MicroState], ctx: &CellContext, gamma: i32) -> SigmaGammaSet {
    let mut entries = Vec::new();
    for (qi, st) in micro.iter().enumerate() {
        for r in gamma_band(&st.active, ctx.n_records(), ctx.pairing.closed, gamma) {
            entries.push((qi, r));
        }
    }
    SigmaGammaSet { entries, gamma }
}

/// Per-quadrature-point linearization of the micro response around the
/// current state: bilateral branch tangent on the reduced active set,
/// strain-independent stress offset, and the monitored-record rows.
#[derive(Debug, Clone)]
pub struct QpModel {
    pub dh: Matrix3<f64>,
    /// Branch stress at zero strain and zero monitored multipliers.
    pub s0: Vector3<f64>,
    /// Monitored records with their Voigt sensitivity rows and offsets.
    pub monitored: Vec<usize>,
    pub p_hat: Vec<Vector3<f64>>,
    pub s_tilde: Vec<f64>,
}

/// Builds the branch model of one quadrature point. `band` is the monitored
/// record set; the correctors are constrained on `active \ band`. `sigma` is
/// the current effective (conjugate) Voigt stress of the state.
pub fn qp_model(
    ctx: &CellContext,
    state: &MicroState,
    band: &[usize],
    sigma: &Vector3<f64>,
) -> Result<QpModel> {
    let band_set: HashSet<usize> = band.iter().copied().collect();
    let reduced: Vec<usize> = state
        .active
        .iter()
        .copied()
        .filter(|r| !band_set.contains(r))
        .collect();
    let cs = solve_correctors(ctx, &reduced)?;
    let ht = homogenized_tangent(&cs, ctx)?;
    let sen = contact_sensitivity(&cs, ctx, state, band);
    let mut p_hat = Vec::with_capacity(band.len());
    let mut s_tilde = Vec::with_capacity(band.len());
    for row in 0..band.len() {
        p_hat.push(Vector3::new(
            sen.p_hat[(row, 0)],
            sen.p_hat[(row, 1)],
            sen.p_hat[(row, 2)],
        ));
        s_tilde.push(sen.s_tilde[row]);
    }
    // sigma(E, lam) = DH E + s0 + sum_e lam_e p_hat_e holds exactly on the
    // current piecewise-linear branch; recover the intercept from the
    // converged state and its micro multipliers on the monitored records.
    let mut s0 = sigma - ht.dh * state.e_macro;
    for (i, &r) in band.iter().enumerate() {
        s0 -= p_hat[i] * state.lambda[r];
    }
    Ok(QpModel {
        dh: ht.dh,
        s0,
        monitored: band.to_vec(),
        p_hat,
        s_tilde,
    })
}

/// One solved macro increment with the iteration history of the method.
#[derive(Debug, Clone)]
pub struct MacroIncrement {
    pub q: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Per-iteration residual measure of the method.
    pub history: Vec<f64>,
}

/// ML step: solves `K dq = r` with the tangent of the frozen (full) active
/// sets; no macro multipliers.
pub fn ml_increment(k_red: &DMatrix<f64>, r: &DVector<f64>) -> Result<DVector<f64>> {
    let f = crate::fem::factorize(k_red)?;
    f.solve(r)
}

/// Shared frozen-model data for the MC methods. Collocation records whose
/// sensitivity rows coincide (the two sides of one geometric constraint)
/// are merged into a single multiplier carrying their total force.
pub struct McSystem {
    k: DMatrix<f64>,
    /// Right side without multiplier terms: `T^T f - T^T K g - T^T B^T s0`.
    rhs0: DVector<f64>,
    /// Constraint rows in q-space: value_e = a_e . q + b_e.
    a: Vec<DVector<f64>>,
    b: Vec<f64>,
    /// Multiplier force columns: `w_e T^T B_e^T p_hat_e = w_e a_e`.
    weight: Vec<f64>,
    /// Merged entry groups: (quadrature point, records sharing the row).
    pub entries: Vec<(usize, Vec<usize>)>,
}

pub fn build_mc_system(
    problem: &MacroProblem,
    models: &[QpModel],
    set: &SigmaGammaSet,
    f_ext: &DVector<f64>,
    factor: f64,
) -> Result<McSystem> {
    let dh: Vec<Matrix3<f64>> = models.iter().map(|m| m.dh).collect();
    let (k, kg) = assemble_macro_tangent(problem, &dh, factor)?;
    let f0 = problem.internal_force(|qi| models[qi].s0);
    let rhs0 = problem.space.reduce(&(f_ext - &f0)) - kg;
    let g = problem.space.dirichlet(factor);
    let mut a: Vec<DVector<f64>> = Vec::new();
    let mut b = Vec::new();
    let mut weight = Vec::new();
    let mut entries: Vec<(usize, Vec<usize>)> = Vec::new();
    // Per-qp scratch of (p_hat, s_tilde) for the rows kept so far, to fold
    // duplicated two-sided records into one multiplier.
    let mut kept: Vec<(usize, Vector3<f64>, f64)> = Vec::new();
    for &(qi, rec) in &set.entries {
        let m = &models[qi];
        let row = m
            .monitored
            .iter()
            .position(|&r| r == rec)
            .ok_or_else(|| Error::Contract(format!("record {rec} missing from qp model")))?;
        let p = m.p_hat[row];
        let st = m.s_tilde[row];
        let scale = p.amax().max(st.abs()).max(1e-30);
        if let Some(pos) = kept.iter().position(|(kqi, kp, kst)| {
            *kqi == qi && (kp - p).amax() <= 1e-9 * scale && (kst - st).abs() <= 1e-9 * scale
        }) {
            entries[pos].1.push(rec);
            continue;
        }
        let qp = &problem.qps[qi];
        // a_e in full space: B^T p scattered to the element nodes, reduced.
        let mut full = DVector::zeros(problem.space.kind.len());
        for (na, &n) in qp.nodes.iter().enumerate() {
            for c in 0..2 {
                let col = 2 * na + c;
                let mut v = 0.0;
                for r in 0..3 {
                    v += qp.b[(r, col)] * p[r];
                }
                full[2 * n + c] += v;
            }
        }
        a.push(problem.space.reduce(&full));
        b.push(st + p.dot(&qp.strain(&g)));
        weight.push(qp.weight);
        entries.push((qi, vec![rec]));
        kept.push((qi, p, st));
    }
    Ok(McSystem {
        k,
        rhs0,
        a,
        b,
        weight,
        entries,
    })
}

impl McSystem {
    fn solve_u(&self, lambda: &DVector<f64>) -> Result<DVector<f64>> {
        let mut rhs = self.rhs0.clone();
        for e in 0..self.a.len() {
            rhs.axpy(-lambda[e] * self.weight[e], &self.a[e], 1.0);
        }
        let f = crate::fem::factorize(&self.k)?;
        f.solve(&rhs)
    }

    fn constraint_values(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.a.len(), |e, _| self.a[e].dot(q) + self.b[e])
    }
}

/// Uzawa iteration on the frozen branch model: macro solves alternate with
/// the multiplier projection `lam <- max(0, lam + beta v)`. The history holds
/// the complementarity residual `||max(-lam, v)||_inf` per iteration.
pub fn mc_uzawa_solve(
    sys: &McSystem,
    beta0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<MacroIncrement> {
    let ne = sys.a.len();
    let mut lambda = DVector::zeros(ne);
    if ne == 0 {
        let q = sys.solve_u(&lambda)?;
        return Ok(MacroIncrement {
            q,
            lambda,
            history: vec![0.0],
        });
    }
    // Step estimate from the diagonal of the dual operator
    // D_ee = w_e a_e . K^-1 a_e (a practical stand-in for the exact
    // ellipticity/Lipschitz bound).
    let f = crate::fem::factorize(&sys.k)?;
    let mut dmax = 0.0f64;
    for e in 0..ne {
        let col = f.solve(&sys.a[e])?;
        dmax = dmax.max(sys.weight[e] * sys.a[e].dot(&col));
    }
    let mut beta = if dmax > 0.0 {
        2.0 * beta0 / dmax
    } else {
        beta0
    };
    let mut history = Vec::new();
    let mut prev_res = f64::INFINITY;
    let mut q;
    for _ in 0..max_iter {
        q = sys.solve_u(&lambda)?;
        let v = sys.constraint_values(&q);
        let mut dl = 0.0f64;
        let mut res = 0.0f64;
        for e in 0..ne {
            let new = (lambda[e] + beta * v[e]).max(0.0);
            dl = dl.max((new - lambda[e]).abs());
            lambda[e] = new;
            res = res.max((-lambda[e]).max(v[e]).abs());
        }
        history.push(res);
        if res <= tol && dl <= tol {
            return Ok(MacroIncrement { q, lambda, history });
        }
        if res > prev_res {
            beta *= 0.5;
        }
        prev_res = res;
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: *history.last().unwrap(),
        context: "macro Uzawa".into(),
        history,
    })
}

/// Semismooth Newton on the coupled frozen-branch system
/// `K q + sum_e lam_e w_e a_e = rhs0`, `0 = max(-lam_e, a_e.q + b_e)`,
/// with ties resolved to the active branch.
pub fn mc_nonsmooth_solve(
    sys: &McSystem,
    lambda0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<MacroIncrement> {
    let ne = sys.a.len();
    let nq = sys.rhs0.len();
    let mut lambda = lambda0.clone();
    let mut q = DVector::zeros(nq);
    let mut history = Vec::new();
    let mut seen: HashSet<Vec<bool>> = HashSet::new();
    for it in 0..max_iter {
        let v = sys.constraint_values(&q);
        let mut r = DVector::zeros(nq + ne);
        let mut ru = &sys.k * &q - &sys.rhs0;
        for e in 0..ne {
            ru.axpy(lambda[e] * sys.weight[e], &sys.a[e], 1.0);
        }
        r.rows_mut(0, nq).copy_from(&ru);
        let active: Vec<bool> = (0..ne).map(|e| v[e] >= -lambda[e]).collect();
        for e in 0..ne {
            r[nq + e] = (-lambda[e]).max(v[e]);
        }
        let res = r.amax();
        history.push(res);
        if res <= tol {
            return Ok(MacroIncrement { q, lambda, history });
        }
        // The model is piecewise linear in the branch pattern, so revisiting
        // a pattern without converging means an exact cycle.
        if !seen.insert(active.clone()) {
            return Err(Error::Cycling {
                iteration: it,
                context: "macro nonsmooth Newton".into(),
            });
        }
        let mut jac = DMatrix::zeros(nq + ne, nq + ne);
        jac.view_mut((0, 0), (nq, nq)).copy_from(&sys.k);
        for e in 0..ne {
            for i in 0..nq {
                jac[(i, nq + e)] = sys.weight[e] * sys.a[e][i];
            }
            if active[e] {
                for i in 0..nq {
                    jac[(nq + e, i)] = sys.a[e][i];
                }
            } else {
                jac[(nq + e, nq + e)] = -1.0;
            }
        }
        // Active rows from different quadrature points can be linearly
        // dependent (uniform-strain states duplicate them); the system stays
        // consistent, so take the minimal-norm Newton step.
        let svd = jac.svd(true, true);
        let smax = svd.singular_values.max();
        let dx = svd
            .solve(&(-&r), 1e-12 * smax)
            .map_err(|e| Error::Factorization(format!("macro Newton step: {e}")))?;
        q += dx.rows(0, nq);
        for e in 0..ne {
            lambda[e] += dx[nq + e];
        }
        // The projection branch keeps multipliers nonnegative; clamp off
        // roundoff so the invariant holds exactly.
        for e in 0..ne {
            if !active[e] || lambda[e] < 0.0 {
                lambda[e] = lambda[e].max(0.0);
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: *history.last().unwrap(),
        context: "macro nonsmooth Newton".into(),
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacroMethod {
    Ml,
    McUzawa,
    McNewton,
}

impl MacroMethod {
    pub fn name(&self) -> &'static str {
        match self {
            MacroMethod::Ml => "ml",
            MacroMethod::McUzawa => "mc-uzawa",
            MacroMethod::McNewton => "mc-newton",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ml" => Ok(MacroMethod::Ml),
            "mc-uzawa" => Ok(MacroMethod::McUzawa),
            "mc-newton" => Ok(MacroMethod::McNewton),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub method: MacroMethod,
    /// Collocation-hop radius; negative = full mode.
    pub gamma: i32,
    /// Outer tolerance on `||r||_inf` relative to `||f||_inf`.
    pub tol_outer: f64,
    pub max_outer: usize,
    pub beta0: f64,
    pub uzawa_tol: f64,
    pub uzawa_max_iter: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub load_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: MacroMethod::McNewton,
            gamma: 1,
            tol_outer: 1e-12,
            max_outer: 40,
            beta0: 0.5,
            uzawa_tol: 1e-9,
            uzawa_max_iter: 2000,
            newton_tol: 1e-13,
            newton_max_iter: 60,
            load_steps: 1,
        }
    }
}

/// Global state of the two-scale solve.
#[derive(Debug, Clone)]
pub struct MacroState {
    pub q: DVector<f64>,
    pub load_factor: f64,
    pub micro: Vec<MicroState>,
    pub sigma_gamma: SigmaGammaSet,
    pub lambda_macro: DVector<f64>,
}

impl MacroState {
    pub fn new(problem: &MacroProblem, ctx: &CellContext) -> Self {
        Self {
            q: DVector::zeros(problem.space.n_q),
            load_factor: 0.0,
            micro: (0..problem.n_qps())
                .map(|_| MicroState::virgin(ctx))
                .collect(),
            sigma_gamma: SigmaGammaSet::default(),
            lambda_macro: DVector::zeros(0),
        }
    }

    pub fn u_full(&self, problem: &MacroProblem) -> DVector<f64> {
        problem.space.expand(&self.q, self.load_factor)
    }
}

/// One row of the convergence log (mirrors the CSV columns).
#[derive(Debug, Clone)]
pub struct ConvergenceRecord {
    pub step: usize,
    pub outer_iter: usize,
    pub method: &'static str,
    pub norm_du: f64,
    pub norm_r: f64,
    pub norm_lambda: f64,
    pub n_active_total: usize,
}

#[derive(Debug)]
pub struct TwoScaleResult {
    pub state: MacroState,
    pub records: Vec<ConvergenceRecord>,
    /// Final out-of-balance norm (infinity).
    pub final_residual: f64,
}

/// Runs the local stage at every quadrature point for the current macro
/// displacement and returns the effective Voigt stresses.
fn local_stage(
    problem: &MacroProblem,
    ctx: &CellContext,
    state: &mut MacroState,
) -> Result<Vec<Vector3<f64>>> {
    let u = state.u_full(problem);
    let strains: Vec<Matrix2<f64>> = problem
        .qps
        .iter()
        .map(|qp| {
            let e = qp.strain(&u);
            Matrix2::new(e[0], 0.5 * e[2], 0.5 * e[2], e[1])
        })
        .collect();
    state
        .micro
        .par_iter_mut()
        .zip(strains.par_iter())
        .map(|(st, e)| {
            solve_local_contact(st, e, ctx)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(state
        .micro
        .iter()
        .map(|st| {
            let s = crate::homog::effective_stress(ctx, &st.u_full, &st.lambda);
            Vector3::new(s[(0, 0)], s[(1, 1)], s[(0, 1)])
        })
        .collect())
}

fn annotate(e: Error, step: usize, outer: usize) -> Error {
    match e {
        Error::NonConvergence {
            iterations,
            residual,
            context,
            history,
        } => Error::NonConvergence {
            iterations,
            residual,
            context: format!("load step {step}, outer {outer}: {context}"),
            history,
        },
        other => other,
    }
}

/// Alternates local (micro) and global (macro) stages until the
/// out-of-balance residual meets the tolerance. Uzawa runs accept a residual
/// plateau (no factor-2 progress over four outer iterations below 1e-6
/// relative), reflecting the method's first-order multiplier updates.
pub fn two_scale_solve(
    problem: &MacroProblem,
    ctx: &CellContext,
    opts: &SolverOptions,
) -> Result<TwoScaleResult> {
    let mut state = MacroState::new(problem, ctx);
    let mut records = Vec::new();
    let mut final_residual = 0.0;
    let steps = opts.load_steps.max(1);
    for step in 1..=steps {
        let factor = step as f64 / steps as f64;
        state.load_factor = factor;
        let f_ext = &problem.f_ext * factor;
        let f_scale = f_ext.amax().max(1e-300);
        let mut best_r = f64::INFINITY;
        let mut stall = 0usize;
        let mut converged = false;
        for outer in 1..=opts.max_outer {
            let sigma =
                local_stage(problem, ctx, &mut state).map_err(|e| annotate(e, step, outer))?;
            let r = out_of_balance(problem, &f_ext, &sigma);
            let r_inf = r.amax();
            final_residual = r_inf;
            let n_active: usize = state.micro.iter().map(|m| m.active.len()).sum();
            if r_inf <= opts.tol_outer * f_scale {
                records.push(ConvergenceRecord {
                    step,
                    outer_iter: outer,
                    method: opts.method.name(),
                    norm_du: 0.0,
                    norm_r: r_inf,
                    norm_lambda: state.lambda_macro.amax_or_zero(),
                    n_active_total: n_active,
                });
                converged = true;
                break;
            }
            if r_inf < best_r / 2.0 {
                best_r = best_r.min(r_inf);
                stall = 0;
            } else {
                stall += 1;
            }
            if opts.method == MacroMethod::McUzawa && stall >= 4 && r_inf <= 1e-6 * f_scale {
                records.push(ConvergenceRecord {
                    step,
                    outer_iter: outer,
                    method: opts.method.name(),
                    norm_du: 0.0,
                    norm_r: r_inf,
                    norm_lambda: state.lambda_macro.amax_or_zero(),
                    n_active_total: n_active,
                });
                converged = true;
                break;
            }
            // Global stage: rebuild the branch models and solve.
            let norm_du;
            match opts.method {
                MacroMethod::Ml => {
                    let models: Vec<QpModel> = state
                        .micro
                        .par_iter()
                        .zip(sigma.par_iter())
                        .map(|(st, s)| qp_model(ctx, st, &[], s))
                        .collect::<Result<_>>()
                        .map_err(|e| annotate(e, step, outer))?;
                    let dh: Vec<Matrix3<f64>> = models.iter().map(|m| m.dh).collect();
                    let (k, _) = assemble_macro_tangent(problem, &dh, factor)?;
                    let dq = ml_increment(&k, &r).map_err(|e| annotate(e, step, outer))?;
                    norm_du = dq.amax();
                    state.q += dq;
                    state.lambda_macro = DVector::zeros(0);
                    state.sigma_gamma = SigmaGammaSet::default();
                }
                MacroMethod::McUzawa | MacroMethod::McNewton => {
                    let set = build_sigma_gamma(&state.micro, ctx, opts.gamma);
                    let bands: Vec<Vec<usize>> = (0..problem.n_qps())
                        .map(|qi| {
                            set.entries
                                .iter()
                                .filter(|&&(q, _)| q == qi)
                                .map(|&(_, r)| r)
                                .collect()
                        })
                        .collect();
                    let models: Vec<QpModel> = state
                        .micro
                        .par_iter()
                        .zip(bands.par_iter())
                        .zip(sigma.par_iter())
                        .map(|((st, band), s)| qp_model(ctx, st, band, s))
                        .collect::<Result<_>>()
                        .map_err(|e| annotate(e, step, outer))?;
                    let sys = build_mc_system(problem, &models, &set, &f_ext, factor)?;
                    let inc = match opts.method {
                        MacroMethod::McUzawa => {
                            mc_uzawa_solve(&sys, opts.beta0, opts.uzawa_tol, opts.uzawa_max_iter)
                        }
                        _ => {
                            // Warm start from the micro multipliers; merged
                            // rows carry the total of their records.
                            let l0 = DVector::from_fn(sys.entries.len(), |e, _| {
                                let (qi, recs) = &sys.entries[e];
                                recs.iter().map(|&r| state.micro[*qi].lambda[r]).sum()
                            });
                            mc_nonsmooth_solve(&sys, &l0, opts.newton_tol, opts.newton_max_iter)
                        }
                    }
                    .map_err(|e| annotate(e, step, outer))?;
                    debug_assert!(inc.lambda.iter().all(|&l| l >= 0.0));
                    norm_du = (&inc.q - &state.q).amax();
                    state.q = inc.q;
                    state.lambda_macro = inc.lambda;
                    state.sigma_gamma = set;
                }
            }
            records.push(ConvergenceRecord {
                step,
                outer_iter: outer,
                method: opts.method.name(),
                norm_du,
                norm_r: r_inf,
                norm_lambda: state.lambda_macro.amax_or_zero(),
                n_active_total: n_active,
            });
        }
        if !converged {
            let history: Vec<f64> = records
                .iter()
                .filter(|r| r.step == step)
                .map(|r| r.norm_r)
                .collect();
            return Err(Error::NonConvergence {
                iterations: opts.max_outer,
                residual: final_residual,
                context: format!("two-scale outer loop, load step {step}"),
                history,
            });
        }
    }
    Ok(TwoScaleResult {
        state,
        records,
        final_residual,
    })
}

trait AmaxOrZero {
    fn amax_or_zero(&self) -> f64;
}

impl AmaxOrZero for DVector<f64> {
    fn amax_or_zero(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.amax()
        }
    }
}

/// Uniaxial compression scenario: unit square, two quad4 elements, sliding
/// supports on left/bottom, constant-displacement ties on right/top, and a
/// 0.1 GPa pressure on the top edge.
pub fn scenario_uniaxial() -> Result<MacroProblem> {
    let mesh = crate::mesh::MacroMesh::unit_square(2, 1)?;
    let n = mesh.n_nodes();
    let mut fixed = Vec::new();
    for nd in mesh.edge_nodes(&mesh.left) {
        fixed.push((2 * nd, 0.0));
    }
    for nd in mesh.edge_nodes(&mesh.bottom) {
        fixed.push((2 * nd + 1, 0.0));
    }
    let mut tied = Vec::new();
    let right: Vec<usize> = mesh
        .edge_nodes(&mesh.right)
        .iter()
        .map(|&nd| 2 * nd)
        .collect();
    tied.push(right);
    let top: Vec<usize> = mesh
        .edge_nodes(&mesh.top)
        .iter()
        .map(|&nd| 2 * nd + 1)
        .collect();
    tied.push(top);
    let space = MacroSpace::new(2 * n, &fixed, &tied)?;
    let mut f = DVector::zeros(2 * n);
    add_edge_traction(&mesh, &mesh.top, [0.0, -0.1], &mut f);
    MacroProblem::new(mesh, space, f)
}

/// Bending scenario: 4x4 quad4 grid clamped along the bottom with a
/// horizontal 0.01 GPa traction on the top edge.
pub fn scenario_bending() -> Result<MacroProblem> {
    let mesh = crate::mesh::MacroMesh::unit_square(4, 4)?;
    let n = mesh.n_nodes();
    let mut fixed = Vec::new();
    for nd in mesh.edge_nodes(&mesh.bottom) {
        fixed.push((2 * nd, 0.0));
        fixed.push((2 * nd + 1, 0.0));
    }
    let space = MacroSpace::new(2 * n, &fixed, &[])?;
    let mut f = DVector::zeros(2 * n);
    add_edge_traction(&mesh, &mesh.top, [0.01, 0.0], &mut f);
    MacroProblem::new(mesh, space, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_cell_full, generate_cell_slit, MacroMesh};
    use crate::tensor::plane_strain_tensor;
    use approx::assert_relative_eq;
    use once_cell::sync::Lazy;

    static SLIT: Lazy<CellContext> = Lazy::new(|| {
        let mesh = generate_cell_slit(0.6, 0.02, 0.1).unwrap();
        CellContext::new(mesh, plane_strain_tensor(2.3, 0.3).unwrap()).unwrap()
    });

    static FULLCELL: Lazy<CellContext> = Lazy::new(|| {
        let mesh = generate_cell_full(3).unwrap();
        CellContext::new(mesh, plane_strain_tensor(2.3, 0.3).unwrap()).unwrap()
    });

    fn single_element_problem() -> MacroProblem {
        let mesh = MacroMesh::unit_square(1, 1).unwrap();
        let space = MacroSpace::new(8, &[], &[]).unwrap();
        MacroProblem::new(mesh, space, DVector::zeros(8)).unwrap()
    }

    /// Independently coded quad4 stiffness: separate shape-function
    /// derivation, 3x3 Gauss rule.
    fn oracle_quad_stiffness(coords: &[[f64; 2]; 4], d: &Matrix3<f64>) -> DMatrix<f64> {
        let gp = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
        let gw = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let mut k = DMatrix::zeros(8, 8);
        for (a, &xi) in gp.iter().enumerate() {
            for (b, &eta) in gp.iter().enumerate() {
                // N = [(1-xi)(1-eta), (1+xi)(1-eta), (1+xi)(1+eta), (1-xi)(1+eta)]/4
                let dndxi = [
                    [-(1.0 - eta) / 4.0, -(1.0 - xi) / 4.0],
                    [(1.0 - eta) / 4.0, -(1.0 + xi) / 4.0],
                    [(1.0 + eta) / 4.0, (1.0 + xi) / 4.0],
                    [-(1.0 + eta) / 4.0, (1.0 - xi) / 4.0],
                ];
                let mut jac = [[0.0f64; 2]; 2];
                for i in 0..4 {
                    for r in 0..2 {
                        jac[r][0] += dndxi[i][r] * coords[i][0];
                        jac[r][1] += dndxi[i][r] * coords[i][1];
                    }
                }
                let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
                let inv = [
                    [jac[1][1] / det, -jac[0][1] / det],
                    [-jac[1][0] / det, jac[0][0] / det],
                ];
                let mut bm = DMatrix::zeros(3, 8);
                for i in 0..4 {
                    let dx = inv[0][0] * dndxi[i][0] + inv[0][1] * dndxi[i][1];
                    let dy = inv[1][0] * dndxi[i][0] + inv[1][1] * dndxi[i][1];
                    bm[(0, 2 * i)] = dx;
                    bm[(1, 2 * i + 1)] = dy;
                    bm[(2, 2 * i)] = dy;
                    bm[(2, 2 * i + 1)] = dx;
                }
                k += bm.transpose() * d * bm * (det * gw[a] * gw[b]);
            }
        }
        k
    }

    #[test]
    fn tangent_matches_element_oracle() {
        let problem = single_element_problem();
        let d = plane_strain_tensor(2.3, 0.3).unwrap().voigt;
        let (k, _) = assemble_macro_tangent(&problem, &[d; 4], 1.0).unwrap();
        let quad = problem.mesh.quads[0];
        let coords = [
            problem.mesh.nodes[quad[0]],
            problem.mesh.nodes[quad[1]],
            problem.mesh.nodes[quad[2]],
            problem.mesh.nodes[quad[3]],
        ];
        let ke = oracle_quad_stiffness(&coords, &d);
        // Permute the element-local oracle into global DOF order.
        let mut ko = DMatrix::zeros(8, 8);
        for a in 0..4 {
            for b in 0..4 {
                for ca in 0..2 {
                    for cb in 0..2 {
                        ko[(2 * quad[a] + ca, 2 * quad[b] + cb)] = ke[(2 * a + ca, 2 * b + cb)];
                    }
                }
            }
        }
        assert!(
            (k.clone() - &ko).amax() < 1e-12 * ko.amax(),
            "{:.3e}",
            (k - ko).amax()
        );
    }

    #[test]
    fn tangent_symmetric_and_translation_nullspace() {
        let mesh = MacroMesh::unit_square(3, 2).unwrap();
        let n = mesh.n_nodes();
        let space = MacroSpace::new(2 * n, &[], &[]).unwrap();
        let problem = MacroProblem::new(mesh, space, DVector::zeros(2 * n)).unwrap();
        let d = plane_strain_tensor(2.3, 0.3).unwrap().voigt;
        let (k, _) = assemble_macro_tangent(&problem, &vec![d; problem.n_qps()], 1.0).unwrap();
        assert!((k.clone() - k.transpose()).amax() < 1e-12 * k.amax());
        let mut t = DVector::zeros(2 * n);
        for i in 0..n {
            t[2 * i] = 0.3;
            t[2 * i + 1] = -0.7;
        }
        assert!((&k * t).amax() < 1e-10);
    }

    #[test]
    fn out_of_balance_zero_and_linearity() {
        let problem = scenario_uniaxial().unwrap();
        let zero = vec![Vector3::zeros(); problem.n_qps()];
        let r0 = out_of_balance(&problem, &DVector::zeros(problem.f_ext.len()), &zero);
        assert_eq!(r0.amax(), 0.0);
        // With zero stress the residual is the reduced load; scaling the load
        // scales the residual exactly.
        let r1 = out_of_balance(&problem, &problem.f_ext, &zero);
        let r2 = out_of_balance(&problem, &(&problem.f_ext * 0.5), &zero);
        assert!((&r1 * 0.5 - r2).amax() < 1e-15);
    }

    #[test]
    fn gamma_band_cases() {
        // Empty active set: no transitions, nothing monitored.
        assert!(gamma_band(&[], 40, true, 1).is_empty());
        // Contiguous arc of 10 in a closed ring of 40: two records per
        // endpoint transition.
        let active: Vec<usize> = (15..25).collect();
        let band = gamma_band(&active, 40, true, 1);
        assert_eq!(band, vec![14, 15, 24, 25]);
        // gamma = 2 widens each side by one.
        let band2 = gamma_band(&active, 40, true, 2);
        assert_eq!(band2, vec![13, 14, 15, 16, 23, 24, 25, 26]);
        // Full-mode sentinel: all inactive records.
        let full = gamma_band(&active, 40, true, GAMMA_FULL);
        assert_eq!(full.len(), 30);
        assert!(full.iter().all(|r| !(15..25).contains(r)));
        // Open chain: arc touching the end produces one transition only.
        let tail: Vec<usize> = (35..40).collect();
        let open_band = gamma_band(&tail, 40, false, 1);
        assert_eq!(open_band, vec![34, 35]);
    }

    #[test]
    fn ml_zero_increment_at_equilibrium() {
        let problem = scenario_uniaxial().unwrap();
        let d = plane_strain_tensor(2.3, 0.3).unwrap().voigt;
        let (k, _) = assemble_macro_tangent(&problem, &vec![d; problem.n_qps()], 1.0).unwrap();
        let dq = ml_increment(&k, &DVector::zeros(problem.space.n_q)).unwrap();
        assert!(dq.amax() < 1e-14);
    }

    #[test]
    fn pore_free_matches_single_scale() {
        // With a pore-free cell the homogenized tangent is the material
        // tensor, so the two-scale solve must reproduce the plain linear
        // elastic solution.
        let problem = scenario_uniaxial().unwrap();
        let ctx = &*FULLCELL;
        let opts = SolverOptions {
            method: MacroMethod::Ml,
            ..Default::default()
        };
        let res = two_scale_solve(&problem, ctx, &opts).unwrap();
        let d = plane_strain_tensor(2.3, 0.3).unwrap().voigt;
        let (k, kg) = assemble_macro_tangent(&problem, &vec![d; problem.n_qps()], 1.0).unwrap();
        let rhs = problem.space.reduce(&problem.f_ext) - kg;
        let q_ref = crate::fem::factorize(&k).unwrap().solve(&rhs).unwrap();
        assert!(
            (&res.state.q - &q_ref).amax() < 1e-10 * q_ref.amax(),
            "{:.3e}",
            (&res.state.q - &q_ref).amax()
        );
        // Uniform vertical compression by sigma/E*: check the tied top value.
        assert!(res.state.q.amax() > 1e-3);
    }

    #[test]
    fn ml_frozen_contact_reduction() {
        let problem = scenario_uniaxial().unwrap();
        let ctx = &*SLIT;
        let opts = SolverOptions {
            method: MacroMethod::Ml,
            ..Default::default()
        };
        let res = two_scale_solve(&problem, ctx, &opts).unwrap();
        // Contact must actually engage in this scenario.
        let n_active: usize = res.state.micro.iter().map(|m| m.active.len()).sum();
        assert!(n_active > 0, "uniaxial scenario must close the slit");
        // Once the active set stops changing, one ML step cuts the residual
        // by at least 10x (it is exact on the frozen branch).
        let rs: Vec<f64> = res.records.iter().map(|r| r.norm_r).collect();
        let last = rs.len() - 1;
        assert!(rs[last] <= rs[last - 1] / 10.0, "history {rs:?}");
    }

    #[test]
    fn uzawa_no_entries_reduces_to_ml() {
        let problem = scenario_uniaxial().unwrap();
        let ctx = &*FULLCELL;
        let uz = two_scale_solve(
            &problem,
            ctx,
            &SolverOptions {
                method: MacroMethod::McUzawa,
                ..Default::default()
            },
        )
        .unwrap();
        let ml = two_scale_solve(
            &problem,
            ctx,
            &SolverOptions {
                method: MacroMethod::Ml,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((&uz.state.q - &ml.state.q).amax() < 1e-10 * ml.state.q.amax());
        assert_eq!(uz.state.lambda_macro.len(), 0);
    }

    #[test]
    fn newton_no_entries_single_step() {
        let problem = scenario_uniaxial().unwrap();
        let d = plane_strain_tensor(2.3, 0.3).unwrap().voigt;
        let models: Vec<QpModel> = (0..problem.n_qps())
            .map(|_| QpModel {
                dh: d,
                s0: Vector3::zeros(),
                monitored: vec![],
                p_hat: vec![],
                s_tilde: vec![],
            })
            .collect();
        let set = SigmaGammaSet::default();
        let sys = build_mc_system(&problem, &models, &set, &problem.f_ext, 1.0).unwrap();
        let inc = mc_nonsmooth_solve(&sys, &DVector::zeros(0), 1e-13, 5).unwrap();
        assert_eq!(inc.history.len(), 2, "one corrective step then converged");
        let inc2 = mc_uzawa_solve(&sys, 0.5, 1e-9, 10).unwrap();
        assert!((&inc.q - &inc2.q).amax() < 1e-12 * inc.q.amax());
    }

    #[test]
    fn methods_agree_on_uniaxial() {
        let problem = scenario_uniaxial().unwrap();
        let ctx = &*SLIT;
        let ml = two_scale_solve(
            &problem,
            ctx,
            &SolverOptions {
                method: MacroMethod::Ml,
                ..Default::default()
            },
        )
        .unwrap();
        let uz = two_scale_solve(
            &problem,
            ctx,
            &SolverOptions {
                method: MacroMethod::McUzawa,
                ..Default::default()
            },
        )
        .unwrap();
        let nw = two_scale_solve(
            &problem,
            ctx,
            &SolverOptions {
                method: MacroMethod::McNewton,
                ..Default::default()
            },
        )
        .unwrap();
        let scale = ml.state.q.amax();
        assert!((&ml.state.q - &uz.state.q).amax() < 1e-8 * scale.max(1.0));
        assert!((&ml.state.q - &nw.state.q).amax() < 1e-8 * scale.max(1.0));
        // Final residuals: exact methods at machine precision, Uzawa at a
        // plateau governed by its first-order updates.
        assert!(ml.final_residual <= 1e-13, "{}", ml.final_residual);
        assert!(nw.final_residual <= 1e-13, "{}", nw.final_residual);
        assert!(
            uz.final_residual >= 1e-16 && uz.final_residual <= 1e-8,
            "{}",
            uz.final_residual
        );
        // Macro multipliers stay nonnegative.
        assert!(nw.state.lambda_macro.iter().all(|&l| l >= 0.0));
        assert!(uz.state.lambda_macro.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn zero_load_zero_solution() {
        let mesh = MacroMesh::unit_square(2, 1).unwrap();
        let n = mesh.n_nodes();
        let mut fixed = Vec::new();
        for nd in mesh.edge_nodes(&mesh.left) {
            fixed.push((2 * nd, 0.0));
            fixed.push((2 * nd + 1, 0.0));
        }
        let space = MacroSpace::new(2 * n, &fixed, &[]).unwrap();
        let problem = MacroProblem::new(mesh, space, DVector::zeros(2 * n)).unwrap();
        let res = two_scale_solve(&problem, &SLIT, &SolverOptions::default()).unwrap();
        assert_eq!(res.records.len(), 1, "one outer iteration");
        assert!(res.state.q.amax() < 1e-15);
        assert_eq!(res.final_residual, 0.0);
    }

    #[test]
    fn translation_equivariance() {
        // Clamped left edge; shifting the prescribed values by a constant
        // translation shifts the solution field and nothing else.
        let ctx = &*SLIT;
        let build = |shift: [f64; 2]| {
            let mesh = MacroMesh::unit_square(2, 1).unwrap();
            let n = mesh.n_nodes();
            let mut fixed = Vec::new();
            for nd in mesh.edge_nodes(&mesh.left) {
                fixed.push((2 * nd, shift[0]));
                fixed.push((2 * nd + 1, shift[1]));
            }
            let space = MacroSpace::new(2 * n, &fixed, &[]).unwrap();
            let mut f = DVector::zeros(2 * n);
            add_edge_traction(&mesh, &mesh.top, [0.0, -0.1], &mut f);
            MacroProblem::new(mesh, space, f).unwrap()
        };
        let base = build([0.0, 0.0]);
        let shifted = build([0.2, -0.1]);
        let opts = SolverOptions {
            method: MacroMethod::Ml,
            ..Default::default()
        };
        let a = two_scale_solve(&base, ctx, &opts).unwrap();
        let b = two_scale_solve(&shifted, ctx, &opts).unwrap();
        let ua = a.state.u_full(&base);
        let ub = b.state.u_full(&shifted);
        for i in 0..ua.len() / 2 {
            assert_relative_eq!(ub[2 * i], ua[2 * i] + 0.2, epsilon = 1e-10);
            assert_relative_eq!(ub[2 * i + 1], ua[2 * i + 1] - 0.1, epsilon = 1e-10);
        }
        // Micro state is translation invariant.
        for (ma, mb) in a.state.micro.iter().zip(&b.state.micro) {
            assert_eq!(ma.active, mb.active);
            assert!((ma.e_macro - mb.e_macro).amax() < 1e-10);
            assert!((&ma.lambda - &mb.lambda).amax() < 1e-10);
        }
    }

    #[test]
    fn load_scaling_linear_regime() {
        // Small loads keep every gap open: response is linear in the load.
        let ctx = &*SLIT;
        let build = |p: f64| {
            let mesh = MacroMesh::unit_square(2, 1).unwrap();
            let n = mesh.n_nodes();
            let mut fixed = Vec::new();
            for nd in mesh.edge_nodes(&mesh.left) {
                fixed.push((2 * nd, 0.0));
            }
            for nd in mesh.edge_nodes(&mesh.bottom) {
                fixed.push((2 * nd + 1, 0.0));
            }
            let space = MacroSpace::new(2 * n, &fixed, &[]).unwrap();
            let mut f = DVector::zeros(2 * n);
            add_edge_traction(&mesh, &mesh.top, [0.0, -p], &mut f);
            MacroProblem::new(mesh, space, f).unwrap()
        };
        let opts = SolverOptions {
            method: MacroMethod::Ml,
            ..Default::default()
        };
        let a = two_scale_solve(&build(1e-4), ctx, &opts).unwrap();
        let b = two_scale_solve(&build(5e-5), ctx, &opts).unwrap();
        let n_active: usize = a.state.micro.iter().map(|m| m.active.len()).sum();
        assert_eq!(n_active, 0, "loads must stay below contact onset");
        assert!((&a.state.q * 0.5 - &b.state.q).amax() < 1e-8 * a.state.q.amax());
    }

    #[test]
    fn bending_scenario_shape() {
        let problem = scenario_bending().unwrap();
        assert_eq!(problem.mesh.quads.len(), 16);
        assert_eq!(problem.n_qps(), 64);
        // Bottom clamped: 2 DOFs per bottom node removed.
        assert_eq!(problem.space.n_q, 2 * problem.mesh.n_nodes() - 10);
        // Load is purely horizontal on the top edge.
        let fx: f64 = (0..problem.mesh.n_nodes())
            .map(|i| problem.f_ext[2 * i])
            .sum();
        let fy: f64 = (0..problem.mesh.n_nodes())
            .map(|i| problem.f_ext[2 * i + 1])
            .sum();
        assert_relative_eq!(fx, 0.01, epsilon = 1e-14);
        assert_relative_eq!(fy, 0.0, epsilon = 1e-14);
    }
}
