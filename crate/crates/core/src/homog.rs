//! Homogenization layer: corrector problems with bilateral sliding
//! constraints on the active contact set, the homogenized tangent D^H by the
//! cell energy form, the contact sensitivities feeding the macroscopic
//! contact problem, and a finite-difference tangent validator.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::fem::{average_stress, tether_coefficients};
use crate::mesh::PeriodicCellMesh;
use crate::microsolver::{record_gap_full, solve_local_contact, CellContext, MicroState};
use crate::tensor::unit_strain_modes;

/// Pivot tolerance for deflating rank-deficient constraint blocks
/// (duplicated two-sided collocation records).
const DEFLATE_TOL: f64 = 1e-10;

/// Correctors of the three unit macro-strain modes under bilateral sliding
/// constraints on a frozen active set.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    /// Reduced corrector fields w^11, w^22, w^12.
    pub w: [DVector<f64>; 3],
    /// Full nodal mode fields: affine + corrector.
    pub full: [Vec<[f64; 2]>; 3],
    /// Constraint multipliers on the active records.
    pub mu: [DVector<f64>; 3],
    /// Per-record opening change of each constrained mode field.
    pub gap: [DVector<f64>; 3],
    pub active: Vec<usize>,
    /// Number of deflated (linearly dependent) constraint rows.
    pub deflated: usize,
}

#[derive(Debug, Clone)]
pub struct HomogenizedTangent {
    /// Voigt 3x3 tangent (GPa).
    pub dh: Matrix3<f64>,
    pub correctors: [DVector<f64>; 3],
    pub active_used: Vec<usize>,
}

/// Macro-strain-to-gap linearization rows and reference offsets for the
/// monitored records: `P_hat . E + s_tilde <= 0` is the feasibility of the
/// opening under macro strain E (Voigt, engineering shear).
#[derive(Debug, Clone)]
pub struct ContactSensitivity {
    pub records: Vec<usize>,
    /// One row per monitored record.
    pub p_hat: DMatrix<f64>,
    pub s_tilde: DVector<f64>,
}

/// Solves the three corrector problems with bilateral equality constraints
/// (total mode-field jump vanishes) on `active`, via the Schur complement of
/// the shared factorization; dependent rows are deflated by SVD.
pub fn solve_correctors(ctx: &CellContext, active: &[usize]) -> Result<CorrectorSet> {
    let mut act: Vec<usize> = active.to_vec();
    act.sort_unstable();
    act.dedup();
    if let Some(&bad) = act.iter().find(|&&i| i >= ctx.n_records()) {
        return Err(Error::Contract(format!(
            "active record {bad} out of range ({} records)",
            ctx.n_records()
        )));
    }
    if act.is_empty() {
        return Ok(CorrectorSet {
            w: ctx.mode_corrector.clone(),
            full: ctx.mode_full.clone(),
            mu: [DVector::zeros(0), DVector::zeros(0), DVector::zeros(0)],
            gap: ctx.mode_gap.clone(),
            active: act,
            deflated: 0,
        });
    }
    let na = act.len();
    let c_aa = DMatrix::from_fn(na, na, |i, j| ctx.c[(act[i], act[j])]);
    let svd = c_aa.svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > DEFLATE_TOL * smax)
        .count();
    let deflated = na - rank;
    let pinv = svd
        .pseudo_inverse(DEFLATE_TOL * smax)
        .map_err(|e| Error::Factorization(format!("constraint block pseudo-inverse: {e}")))?;
    let mut w: [DVector<f64>; 3] = ctx.mode_corrector.clone();
    let mut mu = [DVector::zeros(0), DVector::zeros(0), DVector::zeros(0)];
    let mut full: [Vec<[f64; 2]>; 3] = Default::default();
    let mut gap = [DVector::zeros(0), DVector::zeros(0), DVector::zeros(0)];
    let modes = unit_strain_modes();
    for k in 0..3 {
        let rhs = DVector::from_fn(na, |i, _| ctx.mode_gap[k][act[i]]);
        let m = &pinv * rhs;
        for (i, &a) in act.iter().enumerate() {
            w[k].axpy(-m[i], &ctx.y.column(a).into_owned(), 1.0);
        }
        mu[k] = m;
        let aff = crate::microsolver::affine_field_solid(&modes[k], &ctx.mesh);
        let mut f = ctx.space.expand(&ctx.mesh, &w[k]);
        for (n, a) in f.iter_mut().zip(&aff) {
            n[0] += a[0];
            n[1] += a[1];
        }
        gap[k] = DVector::from_fn(ctx.n_records(), |i, _| {
            record_gap_full(&ctx.pairing, &ctx.mesh, i, &f)
        });
        full[k] = f;
    }
    Ok(CorrectorSet {
        w,
        full,
        mu,
        gap,
        active: act,
        deflated,
    })
}

/// Cell elastic bilinear form of two full nodal fields plus the tether
/// pairing of the reduced rigid DOFs (matches the assembled operator).
fn cell_bilinear(
    mesh: &PeriodicCellMesh,
    ctx: &CellContext,
    u: &[[f64; 2]],
    v: &[[f64; 2]],
    xu: &DVector<f64>,
    xv: &DVector<f64>,
) -> f64 {
    let mut s = 0.0;
    let inv_area = 1.0 / mesh.cell_area();
    for &el in &mesh.elements {
        if el.iter().all(|&n| mesh.is_rigid(n)) {
            continue;
        }
        let eu = crate::fem::element_strain(mesh, el, u);
        let ev = crate::fem::element_strain(mesh, el, v);
        let area =
            crate::mesh::triangle_area(mesh.nodes[el[0]], mesh.nodes[el[1]], mesh.nodes[el[2]]);
        s += area * inv_area * (ctx.d.voigt * eu).dot(&ev);
    }
    if let (Some(off), Some((kt, kr))) = (
        ctx.space.rigid_offset,
        tether_coefficients(mesh, &ctx.space, &ctx.d),
    ) {
        s += kt * (xu[off] * xv[off] + xu[off + 1] * xv[off + 1]) + kr * xu[off + 2] * xv[off + 2];
    }
    s
}

/// Assembles D^H by the energy formula from constrained correctors.
pub fn homogenized_tangent(cs: &CorrectorSet, ctx: &CellContext) -> Result<HomogenizedTangent> {
    let mut dh = Matrix3::zeros();
    for i in 0..3 {
        for j in i..3 {
            let v = cell_bilinear(&ctx.mesh, ctx, &cs.full[i], &cs.full[j], &cs.w[i], &cs.w[j]);
            dh[(i, j)] = v;
            dh[(j, i)] = v;
        }
    }
    // Cross-check the energy symmetry on independently computed off-diagonal
    // pairs (order of arguments swapped).
    let mut asym = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let v = cell_bilinear(&ctx.mesh, ctx, &cs.full[j], &cs.full[i], &cs.w[j], &cs.w[i]);
                asym = asym.max((v - dh[(i, j)]).abs());
            }
        }
    }
    let scale = dh.amax();
    if asym > 1e-9 * scale {
        return Err(Error::Contract(format!(
            "homogenized tangent asymmetry {asym:.3e} exceeds 1e-9 relative"
        )));
    }
    let dh = (dh + dh.transpose()) * 0.5;
    Ok(HomogenizedTangent {
        dh,
        correctors: cs.w.clone(),
        active_used: cs.active.clone(),
    })
}

/// Builds the macro-contact sensitivity rows for the monitored records.
///
/// Row m is the negated opening linearization, so `p_hat . E + s_tilde` is
/// the penetration surplus: nonpositive when feasible, zero at closed
/// records of the frozen branch.
pub fn contact_sensitivity(
    cs: &CorrectorSet,
    ctx: &CellContext,
    state: &MicroState,
    monitored: &[usize],
) -> ContactSensitivity {
    let m = monitored.len();
    let mut p_hat = DMatrix::zeros(m, 3);
    let mut s_tilde = DVector::zeros(m);
    for (row, &rec) in monitored.iter().enumerate() {
        let mut de = Vector3::zeros();
        for k in 0..3 {
            de[k] = cs.gap[k][rec];
            p_hat[(row, k)] = -cs.gap[k][rec];
        }
        let opening =
            ctx.gap.ref_offset[rec] + record_gap_full(&ctx.pairing, &ctx.mesh, rec, &state.u_full);
        // Branch intercept: -opening at the linearization point plus the
        // linear part evaluated there.
        s_tilde[row] = -opening + de.dot(&state.e_macro);
    }
    ContactSensitivity {
        records: monitored.to_vec(),
        p_hat,
        s_tilde,
    }
}

/// Homogenized (conjugate) stress of a converged micro solution: skeleton
/// average plus the contact-traction moment across the pore.
pub fn effective_stress(
    ctx: &CellContext,
    u_full: &[[f64; 2]],
    lambda: &DVector<f64>,
) -> Matrix2<f64> {
    let s = average_stress(&ctx.mesh, &ctx.d, u_full);
    let mut sv = Vector3::new(s[(0, 0)], s[(1, 1)], s[(0, 1)]);
    for r in 0..lambda.len() {
        for k in 0..3 {
            sv[k] -= lambda[r] * ctx.aff_gap[k][r];
        }
    }
    Matrix2::new(sv[0], sv[2], sv[2], sv[1])
}

/// Finite-difference validation of the tangent: returns
/// `(max relative error, inconclusive)`; inconclusive when a perturbation
/// flips the active set.
pub fn effective_stress_tangent_check(
    ctx: &CellContext,
    e_macro: &Matrix2<f64>,
    delta: f64,
) -> Result<(f64, bool)> {
    let mut base = MicroState::virgin(ctx);
    let sol0 = solve_local_contact(&mut base, e_macro, ctx)?;
    let cs = solve_correctors(ctx, &sol0.active)?;
    let ht = homogenized_tangent(&cs, ctx)?;
    let modes = unit_strain_modes();
    let mut max_err = 0.0f64;
    for k in 0..3 {
        let mut sigma_pm = [Vector3::zeros(), Vector3::zeros()];
        for (s, sgn) in sigma_pm.iter_mut().zip([1.0, -1.0]) {
            let e = e_macro + modes[k] * (sgn * delta);
            let mut st = MicroState::virgin(ctx);
            let sol = solve_local_contact(&mut st, &e, ctx)?;
            if sol.active != sol0.active {
                return Ok((f64::NAN, true));
            }
            let sig = effective_stress(ctx, &st.u_full, &sol.lambda);
            *s = Vector3::new(sig[(0, 0)], sig[(1, 1)], sig[(0, 1)]);
        }
        let fd = (sigma_pm[0] - sigma_pm[1]) / (2.0 * delta);
        let mut ek = Vector3::zeros();
        ek[k] = 1.0;
        let dh_col = ht.dh * ek;
        let err = (fd - dh_col).norm() / dh_col.norm();
        max_err = max_err.max(err);
    }
    Ok((max_err, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_cell_full, generate_cell_ring, generate_cell_slit};
    use crate::microsolver::{solve_local_contact, MicroState};
    use crate::tensor::plane_strain_tensor;
    use approx::assert_relative_eq;
    use nalgebra::Matrix2;
    use once_cell::sync::Lazy;

    static SLIT: Lazy<CellContext> = Lazy::new(|| {
        let mesh = generate_cell_slit(0.6, 0.02, 0.1).unwrap();
        CellContext::new(mesh, plane_strain_tensor(2.3, 0.3).unwrap()).unwrap()
    });

    #[test]
    fn pore_free_tangent_is_material() {
        let mesh = generate_cell_full(3).unwrap();
        let d = plane_strain_tensor(2.3, 0.3).unwrap();
        let ctx = CellContext::new(mesh, d.clone()).unwrap();
        let cs = solve_correctors(&ctx, &[]).unwrap();
        let ht = homogenized_tangent(&cs, &ctx).unwrap();
        assert!((ht.dh - d.voigt).amax() < 1e-10, "{:?}", ht.dh);
    }

    #[test]
    fn open_slit_softer_closed_stiffer() {
        let ctx = &*SLIT;
        let open = homogenized_tangent(&solve_correctors(ctx, &[]).unwrap(), ctx).unwrap();
        assert!(
            open.dh[(1, 1)] < ctx.d.voigt[(1, 1)],
            "open cell must be compliant across the slit"
        );
        let all: Vec<usize> = (0..ctx.n_records()).collect();
        let closed = homogenized_tangent(&solve_correctors(ctx, &all).unwrap(), ctx).unwrap();
        assert!(closed.dh[(1, 1)] > open.dh[(1, 1)]);
    }

    #[test]
    fn constrained_jumps_vanish() {
        let ctx = &*SLIT;
        let all: Vec<usize> = (0..ctx.n_records()).collect();
        let cs = solve_correctors(ctx, &all).unwrap();
        for &r in &all {
            assert!(
                cs.gap[1][r].abs() < 1e-10,
                "record {r}: residual jump {:.3e}",
                cs.gap[1][r]
            );
        }
        assert_eq!(cs.active.len(), ctx.n_records());
        assert!(cs.deflated > 0, "two-sided records must deflate");
    }

    #[test]
    fn corrector_orthogonality() {
        // a(w^ij + Pi^ij, v) = 0 for v in the constrained space (G_A v = 0,
        // zero multiplier block).
        let ctx = &*SLIT;
        let mut st = MicroState::virgin(ctx);
        let e = Matrix2::new(0.014, 0.0, 0.0, -0.04);
        let sol = solve_local_contact(&mut st, &e, ctx).unwrap();
        let cs = solve_correctors(ctx, &sol.active).unwrap();
        let a = crate::fem::assemble_cell_stiffness(&ctx.mesh, &ctx.space, &ctx.d).unwrap();
        use rand::{rngs::StdRng, Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(31);
        let act = &cs.active;
        let na = act.len();
        let g_a = DMatrix::from_fn(na, ctx.space.n_total, |i, j| ctx.gap.g[(act[i], j)]);
        for _ in 0..20 {
            // Random reduced vector projected onto ker(G_A).
            let mut v = DVector::from_fn(ctx.space.n_total, |i, _| {
                if i < ctx.space.n_disp {
                    rng.gen_range(-1.0..1.0)
                } else {
                    0.0
                }
            });
            // Project out the constraint rows (least squares correction).
            let gv = &g_a * &v;
            let ggt = &g_a * g_a.transpose();
            let corr = ggt.clone().svd(true, true).solve(&gv, 1e-10).unwrap();
            v -= g_a.transpose() * corr;
            for k in 0..3 {
                // Residual of the corrector equation against v: the affine
                // part enters through the stress load.
                let aff =
                    crate::microsolver::affine_field_solid(&unit_strain_modes()[k], &ctx.mesh);
                let load = crate::fem::stress_load(&ctx.mesh, &ctx.space, &ctx.d, &aff);
                let r = &a * &cs.w[k] - &load;
                let res = r
                    .rows(0, ctx.space.n_disp)
                    .dot(&v.rows(0, ctx.space.n_disp));
                assert!(res.abs() < 1e-10 * v.norm().max(1.0), "mode {k}: {res:.3e}");
            }
        }
    }

    #[test]
    fn tangent_monotone_in_active_set() {
        let ctx = &*SLIT;
        let all: Vec<usize> = (0..ctx.n_records()).collect();
        let half: Vec<usize> = all.iter().copied().take(all.len() / 2).collect();
        let dh0 = homogenized_tangent(&solve_correctors(ctx, &[]).unwrap(), ctx)
            .unwrap()
            .dh;
        let dh1 = homogenized_tangent(&solve_correctors(ctx, &half).unwrap(), ctx)
            .unwrap()
            .dh;
        let dh2 = homogenized_tangent(&solve_correctors(ctx, &all).unwrap(), ctx)
            .unwrap()
            .dh;
        use rand::{rngs::StdRng, Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..100 {
            let x = nalgebra::Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let q0 = x.dot(&(dh0 * x));
            let q1 = x.dot(&(dh1 * x));
            let q2 = x.dot(&(dh2 * x));
            assert!(q1 >= q0 - 1e-10);
            assert!(q2 >= q1 - 1e-10);
        }
    }

    #[test]
    fn sensitivity_reference_state() {
        let ctx = &*SLIT;
        let st = MicroState::virgin(ctx);
        let cs = solve_correctors(ctx, &[]).unwrap();
        let all: Vec<usize> = (0..ctx.n_records()).collect();
        let sen = contact_sensitivity(&cs, ctx, &st, &all);
        for (row, &rec) in all.iter().enumerate() {
            assert_relative_eq!(sen.s_tilde[row], -ctx.gap.ref_offset[rec], epsilon = 1e-12);
        }
    }

    #[test]
    fn sensitivity_active_consistency() {
        let ctx = &*SLIT;
        let mut st = MicroState::virgin(ctx);
        let e = Matrix2::new(0.014, 0.0, 0.0, -0.04);
        let sol = solve_local_contact(&mut st, &e, ctx).unwrap();
        assert!(!sol.active.is_empty());
        let cs = solve_correctors(ctx, &sol.active).unwrap();
        let sen = contact_sensitivity(&cs, ctx, &st, &sol.active);
        for row in 0..sen.records.len() {
            let v = sen.p_hat.row(row).transpose().dot(&st.e_macro) + sen.s_tilde[row];
            assert!(v.abs() < 1e-8, "record {}: {v:.3e}", sen.records[row]);
        }
    }

    #[test]
    fn tangent_check_pore_free() {
        let mesh = generate_cell_full(3).unwrap();
        let ctx = CellContext::new(mesh, plane_strain_tensor(2.3, 0.3).unwrap()).unwrap();
        let e = Matrix2::new(0.01, 0.0, 0.0, -0.02);
        let (err, inconclusive) = effective_stress_tangent_check(&ctx, &e, 1e-6).unwrap();
        assert!(!inconclusive);
        assert!(err < 1e-9, "relative error {err:.3e}");
    }

    #[test]
    fn tangent_check_slit_under_compression() {
        let ctx = &*SLIT;
        let e = Matrix2::new(0.014, 0.0, 0.0, -0.04);
        let (err, inconclusive) = effective_stress_tangent_check(ctx, &e, 1e-7).unwrap();
        assert!(!inconclusive, "active set must be stable at e0_A");
        assert!(err < 1e-5, "relative error {err:.3e}");
    }

    #[test]
    fn tangent_check_ring() {
        let mesh = generate_cell_ring(0.35, 0.34, 0.06).unwrap();
        let ctx = CellContext::new(mesh, plane_strain_tensor(2.3, 0.3).unwrap()).unwrap();
        let e = Matrix2::new(0.0, 0.05, 0.05, 0.0);
        let (err, inconclusive) = effective_stress_tangent_check(&ctx, &e, 1e-7).unwrap();
        assert!(!inconclusive, "active set must be stable at e0_B");
        assert!(err < 1e-5, "relative error {err:.3e}");
    }
}
