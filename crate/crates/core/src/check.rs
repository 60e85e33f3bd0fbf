//! Named property suites behind the `check` subcommand: micro-solver KKT
//! and oracle cross-checks, homogenization consistency, and macro-level
//! invariance properties. The environment variable `MICROCONTACT_FAULT`
//! (value `flip-h-sign`) injects a seeded sign fault into the micro KKT
//! checks to exercise the failure path of the harness.

use nalgebra::{DVector, Matrix2, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::homog::{effective_stress_tangent_check, homogenized_tangent, solve_correctors};
use crate::macrosolver::{
    add_edge_traction, two_scale_solve, MacroMethod, MacroProblem, MacroSpace, SolverOptions,
};
use crate::mesh::{generate_cell_ring, generate_cell_slit, MacroMesh};
use crate::microsolver::{record_gap_full, solve_cp, CellContext, NEWTON_MAX_ITER, NEWTON_TOL};
use crate::oracle::{brute_force_contact, classical_homogenization};
use crate::tensor::plane_strain_tensor;

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn run(
    suite: &'static str,
    name: &'static str,
    out: &mut Vec<PropertyResult>,
    f: impl FnOnce() -> std::result::Result<String, String>,
) {
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    out.push(PropertyResult {
        suite,
        name,
        passed,
        detail,
    });
}

fn fault_flip_h() -> bool {
    std::env::var("MICROCONTACT_FAULT")
        .map(|v| v == "flip-h-sign")
        .unwrap_or(false)
}

fn slit_context() -> Result<CellContext> {
    CellContext::new(
        generate_cell_slit(0.6, 0.02, 0.1)?,
        plane_strain_tensor(2.3, 0.3)?,
    )
}

fn ring_context() -> Result<CellContext> {
    CellContext::new(
        generate_cell_ring(0.35, 0.34, 0.08)?,
        plane_strain_tensor(2.3, 0.3)?,
    )
}

/// KKT verification of one local solve: complementarity residual, multiplier
/// positivity, feasibility of the openings, and the iteration budget.
fn kkt_case(ctx: &CellContext, ev: Vector3<f64>) -> std::result::Result<String, String> {
    let h = ctx.open_gap(&ev);
    // Seeded fault: solve against a sign-flipped offset while still
    // verifying the KKT conditions of the true problem.
    let mut h_solve = h.clone();
    if fault_flip_h() {
        h_solve.neg_mut();
    }
    let (lambda, iterations, _) = solve_cp(&ctx.c, &h_solve, NEWTON_TOL, NEWTON_MAX_ITER)
        .map_err(|e| format!("local solve failed: {e}"))?;
    let opening = &ctx.c * &lambda + &h;
    let residual = (0..lambda.len())
        .map(|i| opening[i].min(lambda[i]).abs())
        .fold(0.0f64, f64::max);
    let max_pen = opening.iter().fold(0.0f64, |m, &o| m.max(-o));
    let min_lambda = lambda.iter().fold(0.0f64, |m, &l| m.min(l));
    if residual > 1e-10 {
        return Err(format!("complementarity residual {residual:.3e} > 1e-10"));
    }
    if min_lambda < 0.0 {
        return Err(format!("negative multiplier {min_lambda:.3e}"));
    }
    if max_pen > 1e-9 {
        return Err(format!("penetration {max_pen:.3e} > 1e-9"));
    }
    if iterations > 30 {
        return Err(format!("{iterations} iterations > 30"));
    }
    Ok(format!(
        "res {residual:.2e}, {} active, {iterations} iterations",
        lambda.iter().filter(|&&l| l > 0.0).count()
    ))
}

pub fn micro_suite(out: &mut Vec<PropertyResult>) {
    let e0a = Vector3::new(0.014, -0.04, 0.0);
    let e0b = Vector3::new(0.0, 0.0, 0.05);
    run("micro", "kkt_square_pore_e0a", out, || {
        kkt_case(&slit_context().map_err(|e| e.to_string())?, e0a)
    });
    run("micro", "kkt_ring_pore_e0a", out, || {
        kkt_case(&ring_context().map_err(|e| e.to_string())?, e0a)
    });
    run("micro", "kkt_ring_pore_e0b", out, || {
        kkt_case(&ring_context().map_err(|e| e.to_string())?, e0b)
    });
    run("micro", "dual_primal_oracle", out, || {
        let ctx = CellContext::new(
            generate_cell_slit(0.6, 0.02, 0.3).map_err(|e| e.to_string())?,
            plane_strain_tensor(2.3, 0.3).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        if ctx.n_records() > 12 {
            return Err(format!("coarse cell has {} records > 12", ctx.n_records()));
        }
        let oracle = brute_force_contact(&ctx, &e0a).map_err(|e| e.to_string())?;
        let mut state = crate::microsolver::MicroState::virgin(&ctx);
        let e2 = Matrix2::new(e0a[0], e0a[2] * 0.5, e0a[2] * 0.5, e0a[1]);
        let sol = crate::microsolver::solve_local_contact(&mut state, &e2, &ctx)
            .map_err(|e| e.to_string())?;
        let du = (&sol.u1 - &oracle.u1).amax();
        let dl = (&sol.lambda - &oracle.lambda).amax();
        if du > 1e-8 || dl > 1e-8 {
            return Err(format!(
                "oracle mismatch: |du| {du:.3e}, |dlambda| {dl:.3e}"
            ));
        }
        Ok(format!("|du| {du:.2e}, |dlambda| {dl:.2e}"))
    });
}

pub fn homog_suite(out: &mut Vec<PropertyResult>) {
    run("homog", "classical_oracle_empty_active_set", out, || {
        let ctx = slit_context().map_err(|e| e.to_string())?;
        let (correctors, dh_ref) =
            classical_homogenization(&ctx.mesh, &ctx.d).map_err(|e| e.to_string())?;
        let cs = solve_correctors(&ctx, &[]).map_err(|e| e.to_string())?;
        let ht = homogenized_tangent(&cs, &ctx).map_err(|e| e.to_string())?;
        let ddh = (ht.dh - dh_ref).amax();
        let mut dw = 0.0f64;
        for (w_ref, w) in correctors.iter().zip(&ht.correctors) {
            dw = dw.max((w - w_ref).amax());
        }
        if ddh > 1e-10 || dw > 1e-10 {
            return Err(format!("oracle mismatch: |dDH| {ddh:.3e}, |dw| {dw:.3e}"));
        }
        Ok(format!("|dDH| {ddh:.2e}, |dw| {dw:.2e}"))
    });
    for (name, builder) in [
        (
            "fd_tangent_square_pore",
            slit_context as fn() -> Result<CellContext>,
        ),
        (
            "fd_tangent_ring_pore",
            ring_context as fn() -> Result<CellContext>,
        ),
    ] {
        run("homog", name, out, || {
            let ctx = builder().map_err(|e| e.to_string())?;
            let e = Matrix2::new(0.014, 0.0, 0.0, -0.04);
            let (err, inconclusive) =
                effective_stress_tangent_check(&ctx, &e, 1e-7).map_err(|e| e.to_string())?;
            if inconclusive {
                return Err("active set changed across the difference stencil".into());
            }
            if err > 1e-5 {
                return Err(format!("relative tangent error {err:.3e} > 1e-5"));
            }
            Ok(format!("relative error {err:.2e}"))
        });
    }
    run("homog", "stiffening_monotonicity", out, || {
        let ctx = slit_context().map_err(|e| e.to_string())?;
        let n = ctx.n_records();
        // Nested active-set chain: empty, first half, all records.
        let sets: Vec<Vec<usize>> = vec![Vec::new(), (0..n / 2).collect(), (0..n).collect()];
        let mut tangents = Vec::new();
        for s in &sets {
            let cs = solve_correctors(&ctx, s).map_err(|e| e.to_string())?;
            tangents.push(
                homogenized_tangent(&cs, &ctx)
                    .map_err(|e| e.to_string())?
                    .dh,
            );
        }
        let mut rng = StdRng::seed_from_u64(2718);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let x = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            for w in tangents.windows(2) {
                let lo = (x.transpose() * w[0] * x)[0];
                let hi = (x.transpose() * w[1] * x)[0];
                worst = worst.max(lo - hi);
            }
        }
        if worst > 1e-10 {
            return Err(format!("quadratic form decreased by {worst:.3e}"));
        }
        Ok(format!("largest violation {worst:.2e}"))
    });
}

pub fn macro_suite(out: &mut Vec<PropertyResult>) {
    run("macro", "zero_load_zero_solution", out, || {
        let ctx = slit_context().map_err(|e| e.to_string())?;
        let mesh = MacroMesh::unit_square(2, 1).map_err(|e| e.to_string())?;
        let n = mesh.n_nodes();
        let mut fixed = Vec::new();
        for nd in mesh.edge_nodes(&mesh.left) {
            fixed.push((2 * nd, 0.0));
            fixed.push((2 * nd + 1, 0.0));
        }
        let space = MacroSpace::new(2 * n, &fixed, &[]).map_err(|e| e.to_string())?;
        let f = DVector::zeros(2 * n);
        let problem = MacroProblem::new(mesh, space, f).map_err(|e| e.to_string())?;
        let res = two_scale_solve(&problem, &ctx, &SolverOptions::default())
            .map_err(|e| e.to_string())?;
        let umax = res.state.u_full(&problem).amax();
        if umax > 0.0 {
            return Err(format!("nonzero displacement {umax:.3e} under zero load"));
        }
        Ok("displacement identically zero".into())
    });
    run("macro", "translation_equivariance", out, || {
        let ctx = slit_context().map_err(|e| e.to_string())?;
        let build = |shift: [f64; 2]| -> Result<MacroProblem> {
            let mesh = MacroMesh::unit_square(2, 1)?;
            let n = mesh.n_nodes();
            let mut fixed = Vec::new();
            for nd in mesh.edge_nodes(&mesh.left) {
                fixed.push((2 * nd, shift[0]));
                fixed.push((2 * nd + 1, shift[1]));
            }
            let space = MacroSpace::new(2 * n, &fixed, &[])?;
            let mut f = DVector::zeros(2 * n);
            add_edge_traction(&mesh, &mesh.top, [0.0, -0.1], &mut f);
            MacroProblem::new(mesh, space, f)
        };
        let base = build([0.0, 0.0]).map_err(|e| e.to_string())?;
        let shifted = build([0.2, -0.1]).map_err(|e| e.to_string())?;
        let opts = SolverOptions {
            method: MacroMethod::Ml,
            ..Default::default()
        };
        let a = two_scale_solve(&base, &ctx, &opts).map_err(|e| e.to_string())?;
        let b = two_scale_solve(&shifted, &ctx, &opts).map_err(|e| e.to_string())?;
        let ua = a.state.u_full(&base);
        let ub = b.state.u_full(&shifted);
        let mut worst = 0.0f64;
        for i in 0..ua.len() / 2 {
            worst = worst.max((ub[2 * i] - ua[2 * i] - 0.2).abs());
            worst = worst.max((ub[2 * i + 1] - ua[2 * i + 1] + 0.1).abs());
        }
        for (ma, mb) in a.state.micro.iter().zip(&b.state.micro) {
            if ma.active != mb.active {
                return Err("active sets changed under translation".into());
            }
            worst = worst.max((&ma.lambda - &mb.lambda).amax());
        }
        if worst > 1e-10 {
            return Err(format!("equivariance violation {worst:.3e} > 1e-10"));
        }
        Ok(format!("largest violation {worst:.2e}"))
    });
    run("macro", "constant_field_annihilation", out, || {
        let ctx = slit_context().map_err(|e| e.to_string())?;
        let c = vec![[0.37, -0.81]; ctx.mesh.n_nodes()];
        let mut worst = 0.0f64;
        for r in 0..ctx.n_records() {
            worst = worst.max(record_gap_full(&ctx.pairing, &ctx.mesh, r, &c).abs());
        }
        let reduced = ctx.space.restrict(&ctx.mesh, &c);
        worst = worst.max((&ctx.gap.g * reduced).amax());
        if worst > 1e-12 {
            return Err(format!("gap of a constant field {worst:.3e} > 1e-12"));
        }
        Ok(format!("largest gap {worst:.2e}"))
    });
    run("macro", "periodic_shift_identity", out, || {
        let ctx = slit_context().map_err(|e| e.to_string())?;
        let mut worst = 0.0f64;
        for p in &ctx.mesh.periodic_pairs {
            let m = ctx.mesh.nodes[p.master];
            let s = ctx.mesh.nodes[p.slave];
            worst = worst.max((s[0] - m[0] - p.shift[0]).abs());
            worst = worst.max((s[1] - m[1] - p.shift[1]).abs());
        }
        if worst > 1e-12 {
            return Err(format!("pair shift mismatch {worst:.3e} > 1e-12"));
        }
        Ok(format!("largest mismatch {worst:.2e}"))
    });
}

/// Runs the requested suite(s); `which` is `micro`, `homog`, `macro` or `all`.
pub fn run_suites(which: &str) -> Result<Vec<PropertyResult>> {
    let mut out = Vec::new();
    match which {
        "micro" => micro_suite(&mut out),
        "homog" => homog_suite(&mut out),
        "macro" => macro_suite(&mut out),
        "all" => {
            micro_suite(&mut out);
            homog_suite(&mut out);
            macro_suite(&mut out);
        }
        other => return Err(Error::Config(format!("unknown suite '{other}'"))),
    }
    Ok(out)
}
