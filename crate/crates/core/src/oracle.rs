//! Independent reference computations used to cross-check the production
//! solvers: classical periodic homogenization without any contact machinery,
//! and an exhaustive active-set enumeration for the local contact problem.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::fem::{assemble_cell_stiffness, average_stress, factorize, stress_load, CellSpace};
use crate::mesh::PeriodicCellMesh;
use crate::microsolver::{affine_field_solid, CellContext};
use crate::tensor::{unit_strain_modes, ElasticTensor};

/// Classical periodic homogenization: unit-strain correctors and the
/// effective tensor via the average-stress formula. No contact structures
/// are touched; the column `k` of the result is the cell-averaged stress of
/// the `k`-th corrected unit-strain field.
pub fn classical_homogenization(
    mesh: &PeriodicCellMesh,
    d: &ElasticTensor,
) -> Result<([DVector<f64>; 3], Matrix3<f64>)> {
    let space = CellSpace::new(mesh);
    let a = assemble_cell_stiffness(mesh, &space, d)?;
    let f = factorize(&a)?;
    let modes = unit_strain_modes();
    let mut correctors = [DVector::zeros(0), DVector::zeros(0), DVector::zeros(0)];
    let mut dh = Matrix3::zeros();
    for k in 0..3 {
        let aff = affine_field_solid(&modes[k], mesh);
        let rhs = stress_load(mesh, &space, d, &aff);
        let w = f.solve(&rhs)?;
        let mut full = space.expand(mesh, &w);
        for (n, av) in full.iter_mut().zip(&aff) {
            n[0] += av[0];
            n[1] += av[1];
        }
        let s = average_stress(mesh, d, &full);
        dh[(0, k)] = s[(0, 0)];
        dh[(1, k)] = s[(1, 1)];
        dh[(2, k)] = s[(0, 1)];
        correctors[k] = w;
    }
    Ok((correctors, dh))
}

/// Solution of the exhaustive search: fluctuation, multipliers, and the
/// active subset that produced the feasible KKT point.
#[derive(Debug, Clone)]
pub struct BruteForceSolution {
    pub u1: DVector<f64>,
    pub lambda: DVector<f64>,
    pub active: Vec<usize>,
}

/// Exhaustive primal active-set search for the local contact problem at
/// macro strain `e_macro` (Voigt, engineering shear): every subset of the
/// contact records is tried as the active set, the equality-constrained
/// stationarity system is solved, and the first subset whose KKT point is
/// feasible (multipliers nonnegative, openings nonnegative) wins. Convexity
/// makes that point the unique minimizer. Intended for small cells only.
pub fn brute_force_contact(
    ctx: &CellContext,
    e_macro: &Vector3<f64>,
) -> Result<BruteForceSolution> {
    let n_rec = ctx.n_records();
    if n_rec > 20 {
        return Err(Error::Contract(format!(
            "exhaustive search over 2^{n_rec} active sets is not tractable"
        )));
    }
    // Dense, independently factorized stiffness; the production path uses a
    // sparse factorization and a semi-smooth Newton iteration instead.
    let a = assemble_cell_stiffness(&ctx.mesh, &ctx.space, &ctx.d)?;
    let lu = a.clone().lu();
    let e2 = Matrix2::new(e_macro[0], e_macro[2] * 0.5, e_macro[2] * 0.5, e_macro[1]);
    let aff = affine_field_solid(&e2, &ctx.mesh);
    let rhs = stress_load(&ctx.mesh, &ctx.space, &ctx.d, &aff);
    let u_free = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Factorization("singular cell stiffness".into()))?;
    // Opening at zero contact pressure, as a function of the fluctuation:
    // off + G u1, with off collecting the reference opening and the affine
    // contribution of the macro strain.
    let mut off = DVector::from_column_slice(ctx.gap.ref_offset.as_slice());
    for k in 0..3 {
        off.axpy(e_macro[k], &ctx.aff_gap[k], 1.0);
    }
    let ginvt: Vec<DVector<f64>> = (0..n_rec)
        .map(|r| {
            lu.solve(&ctx.gap.g.row(r).transpose())
                .ok_or_else(|| Error::Factorization("singular cell stiffness".into()))
        })
        .collect::<Result<_>>()?;
    let scale = ctx.c.amax().max(1.0);
    let tol = 1e-9 * scale;

    let mut best: Option<(f64, BruteForceSolution)> = None;
    for mask in 0u32..(1u32 << n_rec) {
        let active: Vec<usize> = (0..n_rec).filter(|r| mask >> r & 1 == 1).collect();
        let m = active.len();
        // Stationarity with the subset held as equalities reduces to a small
        // system in the subset multipliers; solved by pseudo-inverse so that
        // duplicated collocation records split their multiplier evenly.
        let cs = DMatrix::from_fn(m, m, |i, j| ctx.c[(active[i], active[j])]);
        let hs = DVector::from_fn(m, |i, _| {
            off[active[i]] + ctx.gap.g.row(active[i]).dot(&u_free.transpose())
        });
        let lam_s = if m == 0 {
            DVector::zeros(0)
        } else {
            cs.clone()
                .svd(true, true)
                .solve(&(-&hs), 1e-12 * scale)
                .map_err(|e| Error::Factorization(e.to_string()))?
        };
        // Discard subsets whose equality system is inconsistent.
        if m > 0 && (&cs * &lam_s + &hs).amax() > tol {
            continue;
        }
        if lam_s.iter().any(|&l| l < -tol) {
            continue;
        }
        let mut u1 = u_free.clone();
        let mut lambda = DVector::zeros(n_rec);
        for (i, &r) in active.iter().enumerate() {
            u1.axpy(lam_s[i], &ginvt[r], 1.0);
            lambda[r] = lam_s[i];
        }
        let opening = &off + &ctx.gap.g * &u1;
        if opening.iter().any(|&o| o < -tol) {
            continue;
        }
        // All feasible KKT points share the (unique) minimizer u1, but
        // duplicated records make lambda non-unique; keep the minimal-norm
        // representative, the canonical even split.
        let norm = lambda.norm();
        if best.as_ref().is_none_or(|(bn, _)| norm < *bn - 1e-14) {
            best = Some((norm, BruteForceSolution { u1, lambda, active }));
        }
    }
    if let Some((_, sol)) = best {
        return Ok(sol);
    }
    Err(Error::NonConvergence {
        iterations: 1 << n_rec,
        residual: f64::NAN,
        context: "no feasible KKT point among all active subsets".into(),
        history: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_cell_full, generate_cell_slit};
    use crate::microsolver::solve_local_contact;
    use crate::microsolver::MicroState;
    use crate::tensor::plane_strain_tensor;

    #[test]
    fn classical_matches_material_on_pore_free_cell() {
        let mesh = generate_cell_full(3).unwrap();
        let d = plane_strain_tensor(2.3, 0.3).unwrap();
        let (correctors, dh) = classical_homogenization(&mesh, &d).unwrap();
        // Uniform cell: correctors vanish, tangent equals the material law.
        for w in &correctors {
            assert!(w.amax() < 1e-9);
        }
        assert!((dh - d.voigt).amax() < 1e-9);
    }

    #[test]
    fn brute_force_agrees_with_dual_solver() {
        let mesh = generate_cell_slit(0.6, 0.02, 0.3).unwrap();
        let d = plane_strain_tensor(2.3, 0.3).unwrap();
        let ctx = CellContext::new(mesh, d).unwrap();
        assert!(ctx.n_records() <= 12, "records: {}", ctx.n_records());
        let ev = Vector3::new(0.014, -0.04, 0.0);
        let oracle = brute_force_contact(&ctx, &ev).unwrap();
        let e2 = Matrix2::new(ev[0], ev[2] * 0.5, ev[2] * 0.5, ev[1]);
        let mut state = MicroState::virgin(&ctx);
        let sol = solve_local_contact(&mut state, &e2, &ctx).unwrap();
        assert!(!oracle.active.is_empty());
        assert!((&sol.u1 - &oracle.u1).amax() < 1e-8);
        assert!((&sol.lambda - &oracle.lambda).amax() < 1e-8);
    }
}
