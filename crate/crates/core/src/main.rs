//! Command-line entry points: cell mesh generation, one-shot local solves,
//! the two-scale macro scenarios, and the property-check suites.
//!
//! Exit codes: 0 success, 1 configuration/mesh error, 2 solver
//! non-convergence, 3 failed property check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::{Matrix2, Vector3};

use microcontact::check::run_suites;
use microcontact::io::{
    append_convergence, export_fields, export_micro_vtk, read_cell_mesh, resolve_out_dir,
    write_cell_mesh, ProblemConfig,
};
use microcontact::macrosolver::{two_scale_solve, ConvergenceRecord, MacroMethod};
use microcontact::mesh::{generate_cell_full, generate_cell_ring, generate_cell_slit};
use microcontact::microsolver::{solve_local_contact, CellContext, MicroState};
use microcontact::tensor::plane_strain_tensor;
use microcontact::Error;

#[derive(Parser)]
#[command(
    name = "microcontact",
    version,
    about = "Two-scale solver for porous media with micropore self-contact"
)]
struct Cli {
    /// Cap the worker-thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generates a built-in cell mesh and writes it as a plain-text file.
    MakeMesh {
        /// Cell kind: `slit`, `ring` or `full`.
        #[arg(long)]
        cell: String,
        /// Target edge length of the triangulation.
        #[arg(long, default_value_t = 0.1)]
        h: f64,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solves one local contact problem at a prescribed macro strain.
    Micro {
        /// Cell kind (`slit`, `ring`) or a mesh file path.
        #[arg(long)]
        cell: String,
        /// Macro strain `e11,e22,e12` (engineering shear).
        #[arg(long)]
        strain: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs a two-scale scenario.
    Macro {
        /// Scenario preset: `uniaxial` or `bending`.
        #[arg(long)]
        preset: String,
        /// Global method: `ml`, `mc-uzawa` or `mc-newton`.
        #[arg(long)]
        method: Option<String>,
        /// Collocation-hop radius (integer) or `full`.
        #[arg(long)]
        gamma: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the property suites.
    Check {
        /// `micro`, `homog`, `macro` or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::NonConvergence { .. } | Error::Cycling { .. } | Error::StepSize(_) => 2,
        _ => 1,
    }
}

fn parse_strain(s: &str) -> Result<Vector3<f64>, Error> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "strain must be three comma-separated numbers, got '{s}'"
        )));
    }
    let mut v = Vector3::zeros();
    for (i, p) in parts.iter().enumerate() {
        v[i] = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad strain component '{p}'")))?;
    }
    Ok(v)
}

fn parse_gamma(s: &str) -> Result<i32, Error> {
    if s == "full" {
        return Ok(-1);
    }
    s.parse::<u32>().map(|g| g as i32).map_err(|_| {
        Error::Config(format!(
            "gamma must be a nonnegative integer or 'full', got '{s}'"
        ))
    })
}

fn build_cell(cell: &str) -> Result<CellContext, Error> {
    let mesh = match cell {
        "slit" => generate_cell_slit(0.6, 0.02, 0.1)?,
        "ring" => generate_cell_ring(0.35, 0.34, 0.08)?,
        "full" => generate_cell_full(3)?,
        path => read_cell_mesh(std::path::Path::new(path))?,
    };
    CellContext::new(mesh, plane_strain_tensor(2.3, 0.3)?)
}

fn cmd_make_mesh(cell: &str, h: f64, out: &std::path::Path) -> Result<(), Error> {
    let mesh = match cell {
        "slit" => generate_cell_slit(0.6, 0.02, h)?,
        "ring" => generate_cell_ring(0.35, 0.34, h)?,
        "full" => generate_cell_full((1.0 / h).ceil().max(1.0) as usize)?,
        other => return Err(Error::Config(format!("unknown cell kind '{other}'"))),
    };
    write_cell_mesh(&mesh, out)?;
    println!(
        "wrote {} ({} nodes, {} elements, {} contact records tagged)",
        out.display(),
        mesh.n_nodes(),
        mesh.elements.len(),
        mesh.plus_edges.len() + mesh.minus_edges.len()
    );
    Ok(())
}

fn cmd_micro(cell: &str, strain: &str, out: Option<&PathBuf>) -> Result<(), Error> {
    let ev = parse_strain(strain)?;
    let ctx = build_cell(cell)?;
    let dir = resolve_out_dir(out.map(|p| p.as_path()), &Default::default());
    std::fs::create_dir_all(&dir)?;
    let e2 = Matrix2::new(ev[0], ev[2] * 0.5, ev[2] * 0.5, ev[1]);
    let mut state = MicroState::virgin(&ctx);
    let sol = solve_local_contact(&mut state, &e2, &ctx)?;
    export_micro_vtk(&ctx, &state, 1.0, &dir.join("micro.vtk"))?;
    // Contact tractions per collocation record.
    let mut lam = String::from("record,t,lambda\n");
    for (r, rec) in ctx.pairing.records.iter().enumerate() {
        lam.push_str(&format!("{r},{:.6e},{:.9e}\n", rec.t, sol.lambda[r]));
    }
    std::fs::write(dir.join("lambda.csv"), lam)?;
    let csv = dir.join("convergence.csv");
    let _ = std::fs::remove_file(&csv);
    append_convergence(
        &csv,
        &ConvergenceRecord {
            step: 1,
            outer_iter: sol.iterations,
            method: "local",
            norm_du: sol.u1.amax(),
            norm_r: sol.residual,
            norm_lambda: sol.lambda.amax(),
            n_active_total: sol.active.len(),
        },
    )?;
    println!(
        "local solve converged: {} iterations, residual {:.3e}, {} active of {} records",
        sol.iterations,
        sol.residual,
        sol.active.len(),
        ctx.n_records()
    );
    Ok(())
}

fn cmd_macro(
    preset: &str,
    method: Option<&str>,
    gamma: Option<&str>,
    out: Option<&PathBuf>,
) -> Result<(), Error> {
    let mut cfg = ProblemConfig::preset(preset)?;
    if let Some(m) = method {
        MacroMethod::parse(m)?;
        cfg.solver.method = m.to_string();
    }
    if let Some(g) = gamma {
        cfg.solver.gamma = parse_gamma(g)?;
    }
    cfg.validate()?;
    let ctx = cfg.build_cell_context()?;
    let problem = cfg.build_macro_problem()?;
    let opts = cfg.solver_options()?;
    let dir = resolve_out_dir(out.map(|p| p.as_path()), &cfg.output);
    std::fs::create_dir_all(&dir)?;
    let result = two_scale_solve(&problem, &ctx, &opts)?;
    let csv = dir.join("convergence.csv");
    let _ = std::fs::remove_file(&csv);
    for rec in &result.records {
        append_convergence(&csv, rec)?;
    }
    export_fields(
        &problem,
        &ctx,
        &result.state,
        &dir,
        cfg.output.deform_scale,
        &cfg.output.micro_points,
    )?;
    let n_contact: usize = result.state.micro.iter().map(|m| m.active.len()).sum();
    println!(
        "{preset}/{}: converged, final residual {:.3e}, {} outer iterations, {} active contacts",
        opts.method.name(),
        result.final_residual,
        result.records.len(),
        n_contact
    );
    Ok(())
}

fn cmd_check(suite: &str) -> Result<bool, Error> {
    let results = run_suites(suite)?;
    let width = results
        .iter()
        .map(|r| r.suite.len() + r.name.len() + 1)
        .max()
        .unwrap_or(0);
    let mut all_ok = true;
    for r in &results {
        let name = format!("{}/{}", r.suite, r.name);
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}  {name:<width$}  {}", r.detail);
        all_ok &= r.passed;
    }
    Ok(all_ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match &cli.command {
        Command::MakeMesh { cell, h, out } => cmd_make_mesh(cell, *h, out).map(|_| true),
        Command::Micro { cell, strain, out } => cmd_micro(cell, strain, out.as_ref()).map(|_| true),
        Command::Macro {
            preset,
            method,
            gamma,
            out,
        } => cmd_macro(preset, method.as_deref(), gamma.as_deref(), out.as_ref()).map(|_| true),
        Command::Check { suite } => cmd_check(suite),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
