//! Dual solver for the local contact problem on one cell: gap operator,
//! Schur complement of the contact constraints, semi-smooth Newton on the
//! complementarity system, Uzawa cross-check, and fluctuation recovery.
//!
//! Sign conventions, fixed once: gap rows measure the *change of opening*
//! (normal oriented minus -> plus), `ref_offset` is the reference opening,
//! and `h = G A^-1 f + ref` is the opening at zero contact pressure, so the
//! complementarity system is `min(C lambda + h, lambda) = 0` with
//! `C lambda + h` the opening and `lambda >= 0` the contact pressure.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::fem::{
    affine_field, assemble_cell_stiffness, average_stress, factorize, stress_load, CellSpace,
    Factorization,
};
use crate::mesh::{build_contact_pairing, ContactPairing, PeriodicCellMesh, Side};
use crate::scalar::Scalar;
use crate::tensor::{unit_strain_modes, ElasticTensor};

pub const EPS_GAP: f64 = 1e-9;
pub const EPS_COMP: f64 = 1e-9;
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;

/// Linearized symmetric gap operator: row i gives the opening change of a
/// displacement field at collocation record i; columns in reduced DOFs.
#[derive(Debug, Clone)]
pub struct GapOperator {
    pub g: DMatrix<f64>,
    /// Reference opening n . delta-y per record.
    pub ref_offset: DVector<f64>,
}

/// Opening change at one record for a full nodal field, evaluated directly
/// from the pairing geometry (no reduction involved).
pub fn record_gap_full(
    pairing: &ContactPairing,
    mesh: &PeriodicCellMesh,
    rec: usize,
    u_full: &[[f64; 2]],
) -> f64 {
    let r = &pairing.records[rec];
    let (edge, w) = r.segment;
    let opp = match r.side {
        Side::Plus => mesh.minus_edges[edge],
        Side::Minus => mesh.plus_edges[edge],
    };
    let interp = [
        (1.0 - w) * u_full[opp[0]][0] + w * u_full[opp[1]][0],
        (1.0 - w) * u_full[opp[0]][1] + w * u_full[opp[1]][1],
    ];
    let um = u_full[r.node];
    let (plus, minus) = match r.side {
        Side::Plus => (um, interp),
        Side::Minus => (interp, um),
    };
    r.normal[0] * (plus[0] - minus[0]) + r.normal[1] * (plus[1] - minus[1])
}

/// Builds the gap operator in reduced DOFs.
pub fn assemble_gap_operator(
    pairing: &ContactPairing,
    mesh: &PeriodicCellMesh,
    space: &CellSpace,
) -> Result<GapOperator> {
    let n = pairing.len();
    let mut g = DMatrix::zeros(n, space.n_total);
    let mut ref_offset = DVector::zeros(n);
    for (i, r) in pairing.records.iter().enumerate() {
        let (edge, w) = r.segment;
        let opp_list = match r.side {
            Side::Plus => &mesh.minus_edges,
            Side::Minus => &mesh.plus_edges,
        };
        let opp = *opp_list.get(edge).ok_or_else(|| {
            Error::Pairing(format!("record {i} references missing segment {edge}"))
        })?;
        // Plus side enters with +n, minus side with -n.
        let sgn_master = match r.side {
            Side::Plus => 1.0,
            Side::Minus => -1.0,
        };
        let mut add = |node: usize, weight: f64, sgn: f64| {
            let rows = space.node_rows(mesh, node);
            for (c, row) in rows.iter().enumerate() {
                for &(d, wc) in row {
                    g[(i, d)] += sgn * weight * r.normal[c] * wc;
                }
            }
        };
        add(r.node, 1.0, sgn_master);
        add(opp[0], 1.0 - w, -sgn_master);
        add(opp[1], w, -sgn_master);
        ref_offset[i] = r.ref_gap;
    }
    Ok(GapOperator { g, ref_offset })
}

/// Schur complement `C = G A^-1 G^T`, dense and symmetrized.
pub fn assemble_schur(gap: &GapOperator, f: &Factorization) -> Result<DMatrix<f64>> {
    let n = gap.g.nrows();
    if gap.g.ncols() != f.dim() {
        return Err(Error::Contract(format!(
            "gap operator has {} columns, factorization dimension is {}",
            gap.g.ncols(),
            f.dim()
        )));
    }
    let mut c = DMatrix::zeros(n, n);
    for j in 0..n {
        let rhs = gap.g.row(j).transpose();
        let y = f.solve(&rhs)?;
        let col = &gap.g * y;
        c.set_column(j, &col);
    }
    let sym = (&c + c.transpose()) * 0.5;
    Ok(sym)
}

/// `h = G A^-1 stress_rhs + ref_offset`: the opening at zero pressure, where
/// `stress_rhs` is the stress load vector of the current affine/stress state
/// and `ref_offset` the (state-adjusted) reference opening.
pub fn compute_h(
    f: &Factorization,
    gap: &GapOperator,
    stress_rhs: &DVector<f64>,
    ref_offset: &DVector<f64>,
) -> Result<DVector<f64>> {
    let u = f.solve(stress_rhs)?;
    Ok(&gap.g * u + ref_offset)
}

/// Recovers the fluctuation: `A u1 = G^T lambda + stress_rhs` (contact
/// pressure pushes the faces apart, stress load drives the corrector).
pub fn recover_fluctuation(
    f: &Factorization,
    gap: &GapOperator,
    lambda: &DVector<f64>,
    stress_rhs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let rhs = gap.g.transpose() * lambda + stress_rhs;
    f.solve(&rhs)
}

fn residual_inf<S: Scalar>(c: &DMatrix<S>, h: &DVector<S>, lambda: &DVector<S>) -> S {
    let w = c * lambda + h;
    let mut r = S::zero();
    for i in 0..lambda.len() {
        let m = num_traits::Float::min(w[i], lambda[i]);
        r = num_traits::Float::max(r, num_traits::Float::abs(m));
    }
    r
}

/// Regularizes a (possibly) degenerate PSD matrix by `eps I`,
/// `eps = 1e-12 trace / n`. Returns the shift applied.
pub fn regularize_schur<S: Scalar>(c: &mut DMatrix<S>) -> S {
    let n = c.nrows();
    if n == 0 {
        return S::zero();
    }
    let eps = S::from_f64_lossy(1e-12) * c.trace() / S::from_f64_lossy(n as f64);
    for i in 0..n {
        c[(i, i)] += eps;
    }
    eps
}

/// Semi-smooth Newton on `min(C lambda + h, lambda) = 0`.
///
/// Row selection per iterate: constraint row (row of C) when
/// `(C lambda + h)_i <= lambda_i` (ties go to the constraint), identity row
/// otherwise; the assembled linear system is solved exactly, no line search.
pub fn semismooth_newton_cp<S: Scalar>(
    c: &DMatrix<S>,
    h: &DVector<S>,
    tol: S,
    max_iter: usize,
) -> Result<(DVector<S>, usize, Vec<f64>)> {
    let n = h.len();
    if c.nrows() != n || c.ncols() != n {
        return Err(Error::Contract(format!(
            "schur matrix {}x{} does not match h length {n}",
            c.nrows(),
            c.ncols()
        )));
    }
    let mut creg = c.clone();
    regularize_schur(&mut creg);
    semismooth_newton_core(&creg, h, DVector::zeros(n), tol, max_iter)
}

fn semismooth_newton_core<S: Scalar>(
    creg: &DMatrix<S>,
    h: &DVector<S>,
    lambda0: DVector<S>,
    tol: S,
    max_iter: usize,
) -> Result<(DVector<S>, usize, Vec<f64>)> {
    let n = h.len();
    let mut lambda = lambda0;
    let mut history = Vec::new();
    let mut seen: std::collections::HashSet<Vec<bool>> = std::collections::HashSet::new();
    for it in 0..max_iter {
        let res = residual_inf(creg, h, &lambda);
        history.push(num_traits::cast::<S, f64>(res).unwrap_or(f64::NAN));
        if res <= tol {
            return Ok((lambda, it, history));
        }
        let w = creg * &lambda + h;
        let active: Vec<bool> = (0..n).map(|i| w[i] <= lambda[i]).collect();
        if !seen.insert(active.clone()) {
            // Revisited active set without convergence.
            return Err(Error::Cycling {
                iteration: it,
                context: format!("semi-smooth Newton, residual {history:?}"),
            });
        }
        let mut m = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for i in 0..n {
            if active[i] {
                m.set_row(i, &creg.row(i));
                b[i] = -h[i];
            } else {
                m[(i, i)] = S::one();
            }
        }
        lambda = m
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Factorization("singular semi-smooth Newton system".into()))?;
    }
    let res = residual_inf(creg, h, &lambda);
    history.push(num_traits::cast::<S, f64>(res).unwrap_or(f64::NAN));
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: num_traits::cast::<S, f64>(res).unwrap_or(f64::NAN),
        context: "semi-smooth Newton complementarity solve".into(),
        history,
    })
}

/// Projected SOR sweeps on `min(C lambda + h, lambda) = 0`: cyclic
/// coordinate descent on the dual quadratic program, globally convergent for
/// symmetric PSD matrices with positive diagonal (degenerate sets included).
/// Returns the iterate, sweeps used, and the final residual.
pub fn psor_cp<S: Scalar>(
    c: &DMatrix<S>,
    h: &DVector<S>,
    lambda0: DVector<S>,
    tol: S,
    max_sweeps: usize,
) -> (DVector<S>, usize, S) {
    let n = h.len();
    let mut lambda = lambda0;
    let mut res = residual_inf(c, h, &lambda);
    for sweep in 0..max_sweeps {
        if res <= tol {
            return (lambda, sweep, res);
        }
        for i in 0..n {
            let d = c[(i, i)];
            if d <= S::zero() {
                continue;
            }
            let w = c.row(i).transpose().dot(&lambda) + h[i];
            let next = num_traits::Float::max(lambda[i] - w / d, S::zero());
            lambda[i] = next;
        }
        res = residual_inf(c, h, &lambda);
    }
    (lambda, max_sweeps, res)
}

/// Robust complementarity solve. The two-sided collocation scheme duplicates
/// some constraints exactly (identical row of C and h); those are merged
/// into one multiplier for the solve and split back evenly, which removes
/// the structural degeneracy. Remaining failures fall back to projected SOR
/// globalization with a warm-started Newton polish.
pub fn solve_cp(
    c: &DMatrix<f64>,
    h: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize, Vec<f64>)> {
    let n = h.len();
    // The active rows of the final Newton system are solved to machine
    // precision, which can leave multipliers a few ulps below zero; clamp to
    // keep the documented sign invariant.
    let clamp = |mut r: (DVector<f64>, usize, Vec<f64>)| {
        for v in r.0.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        r
    };
    let first = match solve_cp_unique(c, h, tol, max_iter) {
        Ok(r) => return Ok(clamp(r)),
        Err(e) => e,
    };
    // Last resort: merge near-duplicate constraints (the two-sided
    // collocation scheme records some contacts twice), solve the reduced
    // problem, split the merged multipliers evenly and polish on the full
    // system. The merge perturbs the problem by the dedup tolerance, so it
    // only counts as solved when the full-system residual confirms it.
    let scale = c.amax().max(h.amax_or_zero()).max(1e-300);
    let mut rep: Vec<usize> = Vec::new();
    let mut group_of = vec![usize::MAX; n];
    for i in 0..n {
        let found = rep.iter().position(|&r| {
            (h[i] - h[r]).abs() <= 1e-10 * scale && (c.row(i) - c.row(r)).amax() <= 1e-10 * scale
        });
        match found {
            Some(g) => group_of[i] = g,
            None => {
                group_of[i] = rep.len();
                rep.push(i);
            }
        }
    }
    let m = rep.len();
    if m < n {
        let cm = DMatrix::from_fn(m, m, |a, b| c[(rep[a], rep[b])]);
        let hm = DVector::from_fn(m, |a, _| h[rep[a]]);
        if let Ok((mu, iters, _)) = solve_cp_unique(&cm, &hm, tol, max_iter) {
            let mut counts = vec![0usize; m];
            for i in 0..n {
                counts[group_of[i]] += 1;
            }
            let mut lambda =
                DVector::from_fn(n, |i, _| mu[group_of[i]] / counts[group_of[i]] as f64);
            let mut res = residual_inf(c, h, &lambda);
            if res > tol {
                let (l, _, r) = psor_cp(c, h, lambda, tol, 50_000);
                lambda = l;
                res = r;
            }
            if res <= tol {
                return Ok(clamp((lambda, iters, vec![res])));
            }
        }
    }
    Err(first)
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

/// Re-solves the active block of the unregularized system by minimal-norm
/// least squares and verifies the true complementarity residual. Removes
/// both the `eps I` bias of the regularized Newton iterations and the
/// arbitrary split of degenerate (duplicated-record) multipliers.
fn polish_active(
    c: &DMatrix<f64>,
    h: &DVector<f64>,
    lambda: &DVector<f64>,
    tol: f64,
) -> Option<(DVector<f64>, f64)> {
    let n = h.len();
    let w = c * lambda + h;
    let active: Vec<usize> = (0..n).filter(|&i| w[i] <= lambda[i]).collect();
    let m = active.len();
    let mut out = DVector::zeros(n);
    if m > 0 {
        let ca = DMatrix::from_fn(m, m, |i, j| c[(active[i], active[j])]);
        let ha = DVector::from_fn(m, |i, _| h[active[i]]);
        let scale = ca.amax().max(1.0);
        let la = ca.svd(true, true).solve(&(-ha), 1e-12 * scale).ok()?;
        for (i, &r) in active.iter().enumerate() {
            out[r] = la[i].max(0.0);
        }
    }
    let res = residual_inf(c, h, &out);
    (res <= tol).then_some((out, res))
}

fn solve_cp_unique(
    c: &DMatrix<f64>,
    h: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize, Vec<f64>)> {
    let first = match semismooth_newton_cp(c, h, tol, max_iter) {
        Ok((lambda, iters, hist)) => {
            if let Some((lp, res)) = polish_active(c, h, &lambda, tol) {
                return Ok((lp, iters, vec![res]));
            }
            // The regularized iteration converged but the true system does
            // not confirm it; fall through to the proximal chain.
            if residual_inf(c, h, &lambda) <= tol {
                return Ok((lambda, iters, hist));
            }
            Error::NonConvergence {
                iterations: iters,
                residual: residual_inf(c, h, &lambda),
                context: "regularized solution rejected by the true system".into(),
                history: hist,
            }
        }
        Err(e) => e,
    };
    // Proximal-point fallback for (near-)singular C: each subproblem shifts
    // the diagonal by eps, which makes it strictly positive definite, and a
    // fixed point of `lambda -> LCP(C + eps I, h - eps lambda)` solves the
    // original problem. Smaller shifts converge in fewer proximal steps but
    // leave the subproblems closer to degenerate, so escalate on failure.
    let n = h.len();
    let diag_mean = c.trace() / n.max(1) as f64;
    if diag_mean > 0.0 {
        for eps_rel in [1e-8, 1e-6, 1e-4] {
            let eps = eps_rel * diag_mean;
            let mut creg = c.clone();
            for i in 0..n {
                creg[(i, i)] += eps;
            }
            let mut lambda: DVector<f64> = DVector::zeros(n);
            let mut total = 0usize;
            let mut failed = false;
            for _ in 0..200 {
                let hk = h - eps * &lambda;
                match semismooth_newton_core(&creg, &hk, lambda.clone(), 0.1 * tol, max_iter) {
                    Ok((l, iters, _)) => {
                        lambda = l;
                        total += iters.max(1);
                    }
                    Err(_) => {
                        failed = true;
                        break;
                    }
                }
                if let Some((lp, res)) = polish_active(c, h, &lambda, tol) {
                    return Ok((lp, total, vec![res]));
                }
                let res = residual_inf(c, h, &lambda);
                if res <= tol {
                    return Ok((lambda, total, vec![res]));
                }
            }
            if failed {
                continue;
            }
        }
    }
    Err(first)
}

/// Projected-gradient (Uzawa) iteration `lambda <- max(0, lambda - beta (C lambda + h))`;
/// cross-check solver for the same fixed point.
pub fn uzawa_local<S: Scalar>(
    c: &DMatrix<S>,
    h: &DVector<S>,
    beta: S,
    tol: S,
    max_iter: usize,
) -> Result<(DVector<S>, usize, Vec<f64>)> {
    let n = h.len();
    let mut lambda: DVector<S> = DVector::zeros(n);
    let mut history = Vec::new();
    let mut growth = 0usize;
    let mut stall = 0usize;
    let mut prev = S::infinity();
    let mut best = S::infinity();
    for it in 0..max_iter {
        let res = residual_inf(c, h, &lambda);
        history.push(num_traits::cast::<S, f64>(res).unwrap_or(f64::NAN));
        if res <= tol {
            return Ok((lambda, it, history));
        }
        // Divergence: monotone growth, or (projection-clipped oscillation)
        // no improvement of the running best residual for many steps.
        growth = if res > prev { growth + 1 } else { 0 };
        if res < best {
            best = res;
            stall = 0;
        } else {
            stall += 1;
        }
        if growth >= 10 || stall >= 50 {
            return Err(Error::StepSize(format!(
                "Uzawa iteration diverges (residual not decreasing; beta may exceed 2/||C||): residual {:.3e}",
                history.last().unwrap()
            )));
        }
        prev = res;
        let w = c * &lambda + h;
        for i in 0..n {
            lambda[i] = num_traits::Float::max(lambda[i] - beta * w[i], S::zero());
        }
    }
    let res = residual_inf(c, h, &lambda);
    history.push(num_traits::cast::<S, f64>(res).unwrap_or(f64::NAN));
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: num_traits::cast::<S, f64>(res).unwrap_or(f64::NAN),
        context: "Uzawa complementarity solve".into(),
        history,
    })
}

/// Spectral norm estimate by power iteration (for Uzawa step bounds).
pub fn spectral_norm(c: &DMatrix<f64>) -> f64 {
    let n = c.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut x = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut norm = 0.0;
    for _ in 0..100 {
        let y = c * &x;
        let ny = y.norm();
        if ny == 0.0 {
            return 0.0;
        }
        x = y / ny;
        norm = ny;
    }
    norm
}

/// True contact set: `lambda_i > eps_lambda` or `|gap_i| <= eps_gap`.
pub fn extract_active_set(
    lambda: &DVector<f64>,
    gap: &DVector<f64>,
    eps_lambda: f64,
    eps_gap: f64,
) -> Vec<usize> {
    (0..lambda.len())
        .filter(|&i| lambda[i] > eps_lambda || gap[i].abs() <= eps_gap)
        .collect()
}

// ---------------------------------------------------------------------------
// Cell context and the local solve
// ---------------------------------------------------------------------------

/// Immutable per-cell data shared read-only by all macro quadrature points.
#[derive(Debug)]
pub struct CellContext {
    pub mesh: PeriodicCellMesh,
    pub space: CellSpace,
    pub d: ElasticTensor,
    pub pairing: ContactPairing,
    pub f: Factorization,
    pub gap: GapOperator,
    pub c: DMatrix<f64>,
    /// Unconstrained unit-mode correctors w^kl (reduced), Voigt order.
    pub mode_corrector: [DVector<f64>; 3],
    /// Full nodal mode fields: affine (zero on rigid nodes) + corrector.
    pub mode_full: [Vec<[f64; 2]>; 3],
    /// Per-record opening change of each unconstrained mode field.
    pub mode_gap: [DVector<f64>; 3],
    /// Per-record opening change of the pure affine field of each mode
    /// (no corrector): the discrete n . E . delta-y rows.
    pub aff_gap: [DVector<f64>; 3],
    /// `A^-1 G^T`, cached for fluctuation updates.
    pub y: DMatrix<f64>,
}

/// Affine field zeroed on rigid-inclusion nodes: the inclusion carries only
/// its own rigid-body DOFs, never the macroscopic affine motion.
pub fn affine_field_solid(e_macro: &Matrix2<f64>, mesh: &PeriodicCellMesh) -> Vec<[f64; 2]> {
    let mut u = affine_field(e_macro, mesh);
    for &r in &mesh.rigid_nodes {
        u[r] = [0.0, 0.0];
    }
    u
}

impl CellContext {
    pub fn new(mesh: PeriodicCellMesh, d: ElasticTensor) -> Result<Self> {
        mesh.validate()?;
        let space = CellSpace::new(&mesh);
        // Contact-free cells (pore-free references) get an empty pairing.
        let pairing = if mesh.plus_edges.is_empty() && mesh.minus_edges.is_empty() {
            ContactPairing {
                records: Vec::new(),
                closed: false,
            }
        } else {
            build_contact_pairing(&mesh)?
        };
        let a = assemble_cell_stiffness(&mesh, &space, &d)?;
        let f = factorize(&a)?;
        let gap = assemble_gap_operator(&pairing, &mesh, &space)?;
        let c = assemble_schur(&gap, &f)?;
        let modes = unit_strain_modes();
        let mut mode_corrector = [DVector::zeros(0), DVector::zeros(0), DVector::zeros(0)];
        let mut mode_full: [Vec<[f64; 2]>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut mode_gap = [DVector::zeros(0), DVector::zeros(0), DVector::zeros(0)];
        let mut aff_gap = [DVector::zeros(0), DVector::zeros(0), DVector::zeros(0)];
        for k in 0..3 {
            let aff = affine_field_solid(&modes[k], &mesh);
            let rhs = stress_load(&mesh, &space, &d, &aff);
            let w = f.solve(&rhs)?;
            let mut full = space.expand(&mesh, &w);
            for (n, a) in full.iter_mut().zip(&aff) {
                n[0] += a[0];
                n[1] += a[1];
            }
            mode_gap[k] = DVector::from_fn(pairing.len(), |i, _| {
                record_gap_full(&pairing, &mesh, i, &full)
            });
            aff_gap[k] = DVector::from_fn(pairing.len(), |i, _| {
                record_gap_full(&pairing, &mesh, i, &aff)
            });
            mode_corrector[k] = w;
            mode_full[k] = full;
        }
        let n_rec = pairing.len();
        let mut y = DMatrix::zeros(f.dim(), n_rec);
        for j in 0..n_rec {
            let col = f.solve(&gap.g.row(j).transpose())?;
            y.set_column(j, &col);
        }
        Ok(Self {
            mesh,
            space,
            d,
            pairing,
            f,
            gap,
            c,
            mode_corrector,
            mode_full,
            mode_gap,
            aff_gap,
            y,
        })
    }

    pub fn n_records(&self) -> usize {
        self.pairing.len()
    }

    /// Opening at zero contact pressure under macro strain `e` (Voigt).
    pub fn open_gap(&self, e: &Vector3<f64>) -> DVector<f64> {
        let mut h = DVector::from_column_slice(self.gap.ref_offset.as_slice());
        for k in 0..3 {
            h.axpy(e[k], &self.mode_gap[k], 1.0);
        }
        h
    }
}

/// Deformation state owned by one macro quadrature point.
#[derive(Debug, Clone)]
pub struct MicroState {
    pub e_macro: Vector3<f64>,
    pub u_full: Vec<[f64; 2]>,
    pub sigma: Matrix2<f64>,
    pub lambda: DVector<f64>,
    pub active: Vec<usize>,
    /// Cached homogenized tangent (Voigt) for the current active set.
    pub tangent: Option<Matrix3<f64>>,
    /// Cached contact sensitivity rows (n_records x 3) and openings.
    pub p_hat: Option<DMatrix<f64>>,
    pub s_tilde: Option<DVector<f64>>,
}

impl MicroState {
    pub fn virgin(ctx: &CellContext) -> Self {
        Self {
            e_macro: Vector3::zeros(),
            u_full: vec![[0.0; 2]; ctx.mesh.n_nodes()],
            sigma: Matrix2::zeros(),
            lambda: DVector::zeros(ctx.n_records()),
            active: Vec::new(),
            tangent: None,
            p_hat: None,
            s_tilde: None,
        }
    }
}

/// Converged local solution at one quadrature point.
#[derive(Debug, Clone)]
pub struct MicroSolution {
    pub u1: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Negative opening per record (feasible: gap <= 0).
    pub gap: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves the local contact problem for a total macro strain and updates the
/// state. The problem is convex quadratic, so the converged total solve and
/// the accumulated incremental solves coincide; the state stores totals.
pub fn solve_local_contact(
    state: &mut MicroState,
    e_macro: &Matrix2<f64>,
    ctx: &CellContext,
) -> Result<MicroSolution> {
    let ev = crate::tensor::strain_to_voigt(e_macro);
    let h = ctx.open_gap(&ev);
    let (lambda, iterations, history) = solve_cp(&ctx.c, &h, NEWTON_TOL, NEWTON_MAX_ITER)?;
    // u1 = sum_k e_k w^k + A^-1 G^T lambda.
    let mut u1: DVector<f64> = &ctx.y * &lambda;
    for k in 0..3 {
        u1.axpy(ev[k], &ctx.mode_corrector[k], 1.0);
    }
    let opening = &ctx.c * &lambda + &h;
    let gap = -&opening;
    let active = extract_active_set(&lambda, &gap, EPS_COMP, EPS_GAP);

    let e2 = Matrix2::new(ev[0], ev[2] * 0.5, ev[2] * 0.5, ev[1]);
    let aff = affine_field_solid(&e2, &ctx.mesh);
    let mut u_full = ctx.space.expand(&ctx.mesh, &u1);
    for (n, a) in u_full.iter_mut().zip(&aff) {
        n[0] += a[0];
        n[1] += a[1];
    }
    state.e_macro = ev;
    state.sigma = average_stress(&ctx.mesh, &ctx.d, &u_full);
    state.u_full = u_full;
    state.lambda = lambda.clone();
    state.active = active.clone();
    state.tangent = None;
    state.p_hat = None;
    state.s_tilde = None;
    Ok(MicroSolution {
        u1,
        lambda,
        gap,
        active,
        iterations,
        residual: *history.last().unwrap_or(&0.0),
    })
}
