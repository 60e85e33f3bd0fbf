//! Configuration parsing, plain-text mesh round-trip, legacy-VTK field
//! export and convergence-history CSV logging.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::macrosolver::{
    add_edge_traction, ConvergenceRecord, MacroMethod, MacroProblem, MacroSpace, MacroState,
    SolverOptions,
};
use crate::mesh::{
    generate_cell_full, generate_cell_ring, generate_cell_slit, MacroMesh, PeriodicCellMesh,
    PeriodicPair,
};
use crate::microsolver::{CellContext, MicroState};
use crate::tensor::plane_strain_tensor;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialConfig {
    /// Young's modulus in GPa.
    pub young: f64,
    pub nu: f64,
}

/// Micro-cell selection: built-in generators or an external mesh file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CellConfig {
    Slit { length: f64, width: f64, h: f64 },
    Ring { r_out: f64, r_in: f64, h: f64 },
    Full { refine: usize },
    File { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroConfig {
    /// Boundary-condition layout: `uniaxial` or `bending`.
    pub scenario: String,
    pub nx: usize,
    pub ny: usize,
    /// Traction on the top edge, GPa.
    pub traction: [f64; 2],
    #[serde(default = "one")]
    pub load_steps: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: String,
    /// Collocation-hop radius; negative selects the full monitored set.
    pub gamma: i32,
    pub tol_outer: f64,
    pub max_outer: usize,
    pub beta0: f64,
    pub uzawa_tol: f64,
    pub uzawa_max_iter: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = SolverOptions::default();
        Self {
            method: o.method.name().to_string(),
            gamma: o.gamma,
            tol_outer: o.tol_outer,
            max_outer: o.max_outer,
            beta0: o.beta0,
            uzawa_tol: o.uzawa_tol,
            uzawa_max_iter: o.uzawa_max_iter,
            newton_tol: o.newton_tol,
            newton_max_iter: o.newton_max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub directory: String,
    /// Displacement magnification for deformed micro meshes.
    pub deform_scale: f64,
    /// Quadrature points whose micro fields are exported; empty selects the
    /// point with the largest active contact set.
    pub micro_points: Vec<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: "out".to_string(),
            deform_scale: 1.0,
            micro_points: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub material: MaterialConfig,
    pub cell: CellConfig,
    #[serde(rename = "macro")]
    pub macro_: MacroConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ProblemConfig {
    /// Named built-in scenario configurations.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "uniaxial" => Ok(Self {
                material: MaterialConfig {
                    young: 2.3,
                    nu: 0.3,
                },
                cell: CellConfig::Slit {
                    length: 0.6,
                    width: 0.02,
                    h: 0.1,
                },
                macro_: MacroConfig {
                    scenario: "uniaxial".to_string(),
                    nx: 2,
                    ny: 1,
                    traction: [0.0, -0.1],
                    load_steps: 1,
                },
                solver: SolverConfig::default(),
                output: OutputConfig::default(),
            }),
            "bending" => Ok(Self {
                material: MaterialConfig {
                    young: 2.3,
                    nu: 0.3,
                },
                cell: CellConfig::Ring {
                    r_out: 0.35,
                    r_in: 0.34,
                    h: 0.08,
                },
                macro_: MacroConfig {
                    scenario: "bending".to_string(),
                    nx: 4,
                    ny: 4,
                    traction: [0.01, 0.0],
                    load_steps: 1,
                },
                solver: SolverConfig {
                    method: "ml".to_string(),
                    ..SolverConfig::default()
                },
                output: OutputConfig::default(),
            }),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.material;
        if !(m.young > 0.0 && m.young.is_finite()) {
            return Err(Error::Config("Young's modulus must be positive".into()));
        }
        if !(m.nu > -1.0 && m.nu < 0.5) {
            return Err(Error::Config(format!(
                "Poisson ratio {} outside (-1, 0.5)",
                m.nu
            )));
        }
        if !(self.macro_.traction[0].is_finite() && self.macro_.traction[1].is_finite()) {
            return Err(Error::Config("traction components must be finite".into()));
        }
        if self.macro_.nx == 0 || self.macro_.ny == 0 || self.macro_.load_steps == 0 {
            return Err(Error::Config(
                "macro grid/load steps must be positive".into(),
            ));
        }
        match self.macro_.scenario.as_str() {
            "uniaxial" | "bending" => {}
            other => return Err(Error::Config(format!("unknown scenario '{other}'"))),
        }
        let s = &self.solver;
        MacroMethod::parse(&s.method)?;
        for (name, v) in [
            ("tol_outer", s.tol_outer),
            ("beta0", s.beta0),
            ("uzawa_tol", s.uzawa_tol),
            ("newton_tol", s.newton_tol),
            ("deform_scale", self.output.deform_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite")));
            }
        }
        if s.max_outer == 0 || s.uzawa_max_iter == 0 || s.newton_max_iter == 0 {
            return Err(Error::Config("iteration limits must be positive".into()));
        }
        Ok(())
    }

    pub fn solver_options(&self) -> Result<SolverOptions> {
        let s = &self.solver;
        Ok(SolverOptions {
            method: MacroMethod::parse(&s.method)?,
            gamma: s.gamma,
            tol_outer: s.tol_outer,
            max_outer: s.max_outer,
            beta0: s.beta0,
            uzawa_tol: s.uzawa_tol,
            uzawa_max_iter: s.uzawa_max_iter,
            newton_tol: s.newton_tol,
            newton_max_iter: s.newton_max_iter,
            load_steps: self.macro_.load_steps,
        })
    }

    pub fn build_cell_mesh(&self) -> Result<PeriodicCellMesh> {
        match &self.cell {
            CellConfig::Slit { length, width, h } => generate_cell_slit(*length, *width, *h),
            CellConfig::Ring { r_out, r_in, h } => generate_cell_ring(*r_out, *r_in, *h),
            CellConfig::Full { refine } => generate_cell_full(*refine),
            CellConfig::File { path } => read_cell_mesh(Path::new(path)),
        }
    }

    pub fn build_cell_context(&self) -> Result<CellContext> {
        let mesh = self.build_cell_mesh()?;
        let d = plane_strain_tensor(self.material.young, self.material.nu)?;
        CellContext::new(mesh, d)
    }

    /// Macro mesh, boundary conditions and consistent load for the configured
    /// scenario (load at factor 1).
    pub fn build_macro_problem(&self) -> Result<MacroProblem> {
        let mesh = MacroMesh::unit_square(self.macro_.nx, self.macro_.ny)?;
        let n = mesh.n_nodes();
        let mut fixed = Vec::new();
        let mut tied: Vec<Vec<usize>> = Vec::new();
        match self.macro_.scenario.as_str() {
            "uniaxial" => {
                for nd in mesh.edge_nodes(&mesh.left) {
                    fixed.push((2 * nd, 0.0));
                }
                for nd in mesh.edge_nodes(&mesh.bottom) {
                    fixed.push((2 * nd + 1, 0.0));
                }
                tied.push(
                    mesh.edge_nodes(&mesh.right)
                        .iter()
                        .map(|&nd| 2 * nd)
                        .collect(),
                );
                tied.push(
                    mesh.edge_nodes(&mesh.top)
                        .iter()
                        .map(|&nd| 2 * nd + 1)
                        .collect(),
                );
            }
            "bending" => {
                for nd in mesh.edge_nodes(&mesh.bottom) {
                    fixed.push((2 * nd, 0.0));
                    fixed.push((2 * nd + 1, 0.0));
                }
            }
            other => return Err(Error::Config(format!("unknown scenario '{other}'"))),
        }
        let space = MacroSpace::new(2 * n, &fixed, &tied)?;
        let mut f = nalgebra::DVector::zeros(2 * n);
        add_edge_traction(&mesh, &mesh.top, self.macro_.traction, &mut f);
        MacroProblem::new(mesh, space, f)
    }
}

/// Loads a JSON configuration; returns the config and non-fatal warnings
/// (one per key in the file that no known field consumed).
pub fn load_config_with_warnings(path: &Path) -> Result<(ProblemConfig, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    let cfg: ProblemConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    let input: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let known = serde_json::to_value(&cfg)
        .map_err(|e| Error::Parse(format!("serialization failed: {e}")))?;
    let mut warnings = Vec::new();
    unknown_keys(&input, &known, "", &mut warnings);
    Ok((cfg, warnings))
}

pub fn load_config(path: &Path) -> Result<ProblemConfig> {
    let (cfg, warnings) = load_config_with_warnings(path)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

pub fn save_config(cfg: &ProblemConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Parse(format!("serialization failed: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn unknown_keys(
    input: &serde_json::Value,
    known: &serde_json::Value,
    prefix: &str,
    out: &mut Vec<String>,
) {
    if let (serde_json::Value::Object(a), serde_json::Value::Object(b)) = (input, known) {
        for (k, v) in a {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match b.get(k) {
                Some(kv) => unknown_keys(v, kv, &path, out),
                None => out.push(format!("unknown configuration key '{path}'")),
            }
        }
    }
}

/// Output directory resolution: `MICROCONTACT_OUT` overrides the CLI flag,
/// which overrides the configured directory.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: &OutputConfig) -> PathBuf {
    if let Ok(env) = std::env::var("MICROCONTACT_OUT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    flag.map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.directory))
}

// ---------------------------------------------------------------------------
// Mesh files (plain-text, line-oriented)
// ---------------------------------------------------------------------------

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
        }
    }

    /// Next non-empty, non-comment line with its 1-based number.
    fn next(&mut self) -> Result<(usize, &'a str)> {
        for (i, line) in self.lines.by_ref() {
            let t = line.trim();
            if !t.is_empty() && !t.starts_with('#') {
                return Ok((i + 1, t));
            }
        }
        Err(Error::Parse("unexpected end of mesh file".into()))
    }

    fn section(&mut self, name: &str) -> Result<usize> {
        let (ln, line) = self.next()?;
        let mut it = line.split_whitespace();
        let tag = it.next().unwrap_or("");
        if tag != name {
            return Err(Error::Parse(format!(
                "line {ln}: expected section '{name}', found '{tag}'"
            )));
        }
        let count = it
            .next()
            .ok_or_else(|| Error::Parse(format!("line {ln}: missing count after '{name}'")))?;
        count
            .parse()
            .map_err(|_| Error::Parse(format!("line {ln}: bad count '{count}'")))
    }
}

fn parse_fields<const N: usize>(ln: usize, line: &str) -> Result<[f64; N]> {
    let mut out = [0.0; N];
    let mut it = line.split_whitespace();
    for slot in out.iter_mut() {
        let tok = it
            .next()
            .ok_or_else(|| Error::Parse(format!("line {ln}: expected {N} fields")))?;
        *slot = tok
            .parse()
            .map_err(|_| Error::Parse(format!("line {ln}: bad number '{tok}'")))?;
    }
    Ok(out)
}

pub fn cell_mesh_to_string(mesh: &PeriodicCellMesh) -> String {
    let mut s = String::from("cellmesh v1\n");
    let _ = writeln!(s, "nodes {}", mesh.nodes.len());
    for (i, p) in mesh.nodes.iter().enumerate() {
        let _ = writeln!(s, "{i} {:.17e} {:.17e}", p[0], p[1]);
    }
    let _ = writeln!(s, "tris {}", mesh.elements.len());
    for (i, el) in mesh.elements.iter().enumerate() {
        let _ = writeln!(s, "{i} {} {} {}", el[0], el[1], el[2]);
    }
    for (name, edges) in [("plus", &mesh.plus_edges), ("minus", &mesh.minus_edges)] {
        let _ = writeln!(s, "{name} {}", edges.len());
        for e in edges {
            let _ = writeln!(s, "{} {}", e[0], e[1]);
        }
    }
    let _ = writeln!(s, "rigid {}", mesh.rigid_nodes.len());
    for n in &mesh.rigid_nodes {
        let _ = writeln!(s, "{n}");
    }
    let _ = writeln!(s, "pairs {}", mesh.periodic_pairs.len());
    for p in &mesh.periodic_pairs {
        let _ = writeln!(
            s,
            "{} {} {:.17e} {:.17e}",
            p.master, p.slave, p.shift[0], p.shift[1]
        );
    }
    s
}

pub fn parse_cell_mesh(text: &str) -> Result<PeriodicCellMesh> {
    let mut r = LineReader::new(text);
    let (ln, header) = r.next()?;
    if header != "cellmesh v1" {
        return Err(Error::Parse(format!(
            "line {ln}: expected header 'cellmesh v1', found '{header}'"
        )));
    }
    let n_nodes = r.section("nodes")?;
    let mut nodes = vec![[0.0; 2]; n_nodes];
    for _ in 0..n_nodes {
        let (ln, line) = r.next()?;
        let [id, x, y] = parse_fields::<3>(ln, line)?;
        let id = id as usize;
        if id >= n_nodes {
            return Err(Error::Parse(format!(
                "line {ln}: node id {id} out of range"
            )));
        }
        nodes[id] = [x, y];
    }
    let n_tris = r.section("tris")?;
    let mut elements = vec![[0usize; 3]; n_tris];
    for _ in 0..n_tris {
        let (ln, line) = r.next()?;
        let [id, a, b, c] = parse_fields::<4>(ln, line)?;
        let id = id as usize;
        if id >= n_tris {
            return Err(Error::Parse(format!(
                "line {ln}: element id {id} out of range"
            )));
        }
        elements[id] = [a as usize, b as usize, c as usize];
    }
    let mut read_edges = |name: &str| -> Result<Vec<[usize; 2]>> {
        let count = r.section(name)?;
        let mut edges = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, line) = r.next()?;
            let [a, b] = parse_fields::<2>(ln, line)?;
            edges.push([a as usize, b as usize]);
        }
        Ok(edges)
    };
    let plus_edges = read_edges("plus")?;
    let minus_edges = read_edges("minus")?;
    let n_rigid = r.section("rigid")?;
    let mut rigid_nodes = Vec::with_capacity(n_rigid);
    for _ in 0..n_rigid {
        let (ln, line) = r.next()?;
        let [n] = parse_fields::<1>(ln, line)?;
        rigid_nodes.push(n as usize);
    }
    rigid_nodes.sort_unstable();
    let n_pairs = r.section("pairs")?;
    let mut periodic_pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let (ln, line) = r.next()?;
        let [m, s, sx, sy] = parse_fields::<4>(ln, line)?;
        periodic_pairs.push(PeriodicPair {
            master: m as usize,
            slave: s as usize,
            shift: [sx, sy],
        });
    }

    // Exterior boundary: element edges used exactly once that are not
    // tagged as a contact side. Cell extent from the node bounding box
    // (cells are anchored at the origin).
    let mut edge_count: std::collections::HashMap<(usize, usize), (usize, [usize; 2])> =
        std::collections::HashMap::new();
    for el in &elements {
        for k in 0..3 {
            let e = [el[k], el[(k + 1) % 3]];
            let key = (e[0].min(e[1]), e[0].max(e[1]));
            let entry = edge_count.entry(key).or_insert((0, e));
            entry.0 += 1;
        }
    }
    let tagged: std::collections::HashSet<(usize, usize)> = plus_edges
        .iter()
        .chain(minus_edges.iter())
        .map(|e| (e[0].min(e[1]), e[0].max(e[1])))
        .collect();
    let mut exterior_edges: Vec<[usize; 2]> = edge_count
        .values()
        .filter(|(c, e)| *c == 1 && !tagged.contains(&(e[0].min(e[1]), e[0].max(e[1]))))
        .map(|(_, e)| *e)
        .collect();
    exterior_edges.sort_unstable();
    let cell_size = nodes
        .iter()
        .fold([0.0f64; 2], |m, p| [m[0].max(p[0]), m[1].max(p[1])]);

    let mesh = PeriodicCellMesh {
        nodes,
        elements,
        plus_edges,
        minus_edges,
        exterior_edges,
        periodic_pairs,
        rigid_nodes,
        cell_size,
    };
    mesh.validate()?;
    Ok(mesh)
}

pub fn write_cell_mesh(mesh: &PeriodicCellMesh, path: &Path) -> Result<()> {
    fs::write(path, cell_mesh_to_string(mesh))?;
    Ok(())
}

pub fn read_cell_mesh(path: &Path) -> Result<PeriodicCellMesh> {
    parse_cell_mesh(&fs::read_to_string(path)?)
}

pub fn macro_mesh_to_string(mesh: &MacroMesh) -> String {
    let mut s = String::from("macromesh v1\n");
    let _ = writeln!(s, "nodes {}", mesh.nodes.len());
    for (i, p) in mesh.nodes.iter().enumerate() {
        let _ = writeln!(s, "{i} {:.17e} {:.17e}", p[0], p[1]);
    }
    let _ = writeln!(s, "quads {}", mesh.quads.len());
    for (i, q) in mesh.quads.iter().enumerate() {
        let _ = writeln!(s, "{i} {} {} {} {}", q[0], q[1], q[2], q[3]);
    }
    for (name, edges) in [
        ("left", &mesh.left),
        ("right", &mesh.right),
        ("bottom", &mesh.bottom),
        ("top", &mesh.top),
    ] {
        let _ = writeln!(s, "{name} {}", edges.len());
        for e in edges {
            let _ = writeln!(s, "{} {}", e[0], e[1]);
        }
    }
    s
}

pub fn parse_macro_mesh(text: &str) -> Result<MacroMesh> {
    let mut r = LineReader::new(text);
    let (ln, header) = r.next()?;
    if header != "macromesh v1" {
        return Err(Error::Parse(format!(
            "line {ln}: expected header 'macromesh v1', found '{header}'"
        )));
    }
    let n_nodes = r.section("nodes")?;
    let mut nodes = vec![[0.0; 2]; n_nodes];
    for _ in 0..n_nodes {
        let (ln, line) = r.next()?;
        let [id, x, y] = parse_fields::<3>(ln, line)?;
        nodes[id as usize] = [x, y];
    }
    let n_quads = r.section("quads")?;
    let mut quads = vec![[0usize; 4]; n_quads];
    for _ in 0..n_quads {
        let (ln, line) = r.next()?;
        let [id, a, b, c, d] = parse_fields::<5>(ln, line)?;
        quads[id as usize] = [a as usize, b as usize, c as usize, d as usize];
    }
    let mut read_edges = |name: &str| -> Result<Vec<[usize; 2]>> {
        let count = r.section(name)?;
        let mut edges = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, line) = r.next()?;
            let [a, b] = parse_fields::<2>(ln, line)?;
            edges.push([a as usize, b as usize]);
        }
        Ok(edges)
    };
    Ok(MacroMesh {
        nodes,
        quads,
        left: read_edges("left")?,
        right: read_edges("right")?,
        bottom: read_edges("bottom")?,
        top: read_edges("top")?,
    })
}

pub fn write_macro_mesh(mesh: &MacroMesh, path: &Path) -> Result<()> {
    fs::write(path, macro_mesh_to_string(mesh))?;
    Ok(())
}

pub fn read_macro_mesh(path: &Path) -> Result<MacroMesh> {
    parse_macro_mesh(&fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Legacy-VTK export
// ---------------------------------------------------------------------------

fn check_finite(label: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::Contract(format!("non-finite value in {label}")));
        }
    }
    Ok(())
}

fn vtk_header(title: &str, points: &[[f64; 2]]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", points.len());
    for p in points {
        let _ = writeln!(s, "{:.9e} {:.9e} 0.0", p[0], p[1]);
    }
    s
}

/// Macro solution: point displacements, cell-averaged effective stress
/// components and per-cell active-contact counts.
pub fn export_macro_vtk(
    problem: &MacroProblem,
    state: &MacroState,
    ctx: &CellContext,
    path: &Path,
) -> Result<()> {
    let mesh = &problem.mesh;
    let u = state.u_full(problem);
    check_finite("macro displacement", u.iter().copied())?;
    let mut s = vtk_header("macro two-scale solution", &mesh.nodes);
    let _ = writeln!(s, "CELLS {} {}", mesh.quads.len(), 5 * mesh.quads.len());
    for q in &mesh.quads {
        let _ = writeln!(s, "4 {} {} {} {}", q[0], q[1], q[2], q[3]);
    }
    let _ = writeln!(s, "CELL_TYPES {}", mesh.quads.len());
    for _ in &mesh.quads {
        let _ = writeln!(s, "9");
    }
    let _ = writeln!(s, "POINT_DATA {}", mesh.nodes.len());
    let _ = writeln!(s, "VECTORS displacement double");
    for n in 0..mesh.n_nodes() {
        let _ = writeln!(s, "{:.9e} {:.9e} 0.0", u[2 * n], u[2 * n + 1]);
    }
    // Cell stress: mean of the conjugate effective stresses at the
    // element's quadrature points (4 per element, stored in element order).
    let mut sig = vec![[0.0f64; 3]; mesh.quads.len()];
    let mut n_contact = vec![0usize; mesh.quads.len()];
    for (i, qp) in problem.qps.iter().enumerate() {
        let m = &state.micro[i];
        let se = crate::homog::effective_stress(ctx, &m.u_full, &m.lambda);
        sig[qp.element][0] += 0.25 * se[(0, 0)];
        sig[qp.element][1] += 0.25 * se[(1, 1)];
        sig[qp.element][2] += 0.25 * se[(0, 1)];
        n_contact[qp.element] += m.active.len();
    }
    check_finite("macro stress", sig.iter().flatten().copied())?;
    let _ = writeln!(s, "CELL_DATA {}", mesh.quads.len());
    for (name, k) in [("sigma_xx", 0), ("sigma_yy", 1), ("sigma_xy", 2)] {
        let _ = writeln!(s, "SCALARS {name} double 1");
        let _ = writeln!(s, "LOOKUP_TABLE default");
        for v in &sig {
            let _ = writeln!(s, "{:.9e}", v[k]);
        }
    }
    let _ = writeln!(s, "SCALARS n_contact int 1");
    let _ = writeln!(s, "LOOKUP_TABLE default");
    for c in &n_contact {
        let _ = writeln!(s, "{c}");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Micro solution at one quadrature point: deformed coordinates, per-element
/// stress components and contact tractions as point data on the contact
/// boundary (zero elsewhere).
pub fn export_micro_vtk(
    ctx: &CellContext,
    micro: &MicroState,
    deform_scale: f64,
    path: &Path,
) -> Result<()> {
    let mesh = &ctx.mesh;
    check_finite("micro displacement", micro.u_full.iter().flatten().copied())?;
    let points: Vec<[f64; 2]> = mesh
        .nodes
        .iter()
        .zip(&micro.u_full)
        .map(|(p, u)| [p[0] + deform_scale * u[0], p[1] + deform_scale * u[1]])
        .collect();
    let mut s = vtk_header("micro cell solution", &points);
    let _ = writeln!(
        s,
        "CELLS {} {}",
        mesh.elements.len(),
        4 * mesh.elements.len()
    );
    for el in &mesh.elements {
        let _ = writeln!(s, "3 {} {} {}", el[0], el[1], el[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {}", mesh.elements.len());
    for _ in &mesh.elements {
        let _ = writeln!(s, "5");
    }
    let _ = writeln!(s, "POINT_DATA {}", mesh.n_nodes());
    let _ = writeln!(s, "VECTORS displacement double");
    for u in &micro.u_full {
        let _ = writeln!(s, "{:.9e} {:.9e} 0.0", u[0], u[1]);
    }
    let mut lambda_pt = vec![0.0f64; mesh.n_nodes()];
    for (r, rec) in ctx.pairing.records.iter().enumerate() {
        if r < micro.lambda.len() {
            lambda_pt[rec.node] += micro.lambda[r];
        }
    }
    check_finite("contact tractions", lambda_pt.iter().copied())?;
    let _ = writeln!(s, "SCALARS lambda double 1");
    let _ = writeln!(s, "LOOKUP_TABLE default");
    for v in &lambda_pt {
        let _ = writeln!(s, "{:.9e}", v);
    }
    // Constant per-element stress of the linear triangles.
    let mut sig = vec![[0.0f64; 3]; mesh.elements.len()];
    for (e, el) in mesh.elements.iter().enumerate() {
        let [a, b, c] = *el;
        let (pa, pb, pc) = (mesh.nodes[a], mesh.nodes[b], mesh.nodes[c]);
        let det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]);
        if det.abs() < 1e-300 {
            continue;
        }
        let grads = [
            [(pb[1] - pc[1]) / det, (pc[0] - pb[0]) / det],
            [(pc[1] - pa[1]) / det, (pa[0] - pc[0]) / det],
            [(pa[1] - pb[1]) / det, (pb[0] - pa[0]) / det],
        ];
        let mut eps = [0.0f64; 3];
        for (k, &n) in el.iter().enumerate() {
            let u = micro.u_full[n];
            eps[0] += grads[k][0] * u[0];
            eps[1] += grads[k][1] * u[1];
            eps[2] += grads[k][1] * u[0] + grads[k][0] * u[1];
        }
        for (r, sv) in sig[e].iter_mut().enumerate() {
            for (c2, &ec) in eps.iter().enumerate() {
                *sv += ctx.d.voigt[(r, c2)] * ec;
            }
        }
    }
    check_finite("micro stress", sig.iter().flatten().copied())?;
    let _ = writeln!(s, "CELL_DATA {}", mesh.elements.len());
    for (name, k) in [("sigma_xx", 0), ("sigma_yy", 1), ("sigma_xy", 2)] {
        let _ = writeln!(s, "SCALARS {name} double 1");
        let _ = writeln!(s, "LOOKUP_TABLE default");
        for v in &sig {
            let _ = writeln!(s, "{:.9e}", v[k]);
        }
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes the macro VTK file, the cell mesh, and micro VTK files for the
/// selected quadrature points (the point with the largest active set when
/// none are given). Returns the written paths.
pub fn export_fields(
    problem: &MacroProblem,
    ctx: &CellContext,
    state: &MacroState,
    dir: &Path,
    deform_scale: f64,
    micro_points: &[usize],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let macro_path = dir.join("macro.vtk");
    export_macro_vtk(problem, state, ctx, &macro_path)?;
    written.push(macro_path);
    let cell_path = dir.join("cell.mesh");
    write_cell_mesh(&ctx.mesh, &cell_path)?;
    written.push(cell_path);
    let selected: Vec<usize> = if micro_points.is_empty() {
        state
            .micro
            .iter()
            .enumerate()
            .max_by_key(|(_, m)| m.active.len())
            .map(|(i, _)| vec![i])
            .unwrap_or_default()
    } else {
        micro_points.to_vec()
    };
    for i in selected {
        let m = state.micro.get(i).ok_or_else(|| {
            Error::Config(format!(
                "micro point {i} out of range (have {})",
                state.micro.len()
            ))
        })?;
        let p = dir.join(format!("micro_qp{i}.vtk"));
        export_micro_vtk(ctx, m, deform_scale, &p)?;
        written.push(p);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Convergence CSV
// ---------------------------------------------------------------------------

pub const CONVERGENCE_HEADER: &str =
    "step,outer_iter,method,norm_du,norm_r,norm_lambda,n_active_total";

/// Appends one row, creating the file with a header first. Single writer per
/// file; concurrent appends interleave lines and are not supported.
pub fn append_convergence(path: &Path, rec: &ConvergenceRecord) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(f, "{CONVERGENCE_HEADER}")?;
    }
    writeln!(
        f,
        "{},{},{},{:.16e},{:.16e},{:.16e},{}",
        rec.step,
        rec.outer_iter,
        rec.method,
        rec.norm_du,
        rec.norm_r,
        rec.norm_lambda,
        rec.n_active_total
    )?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate_cell_slit;

    #[test]
    fn preset_uniaxial_values() {
        let cfg = ProblemConfig::preset("uniaxial").unwrap();
        assert_eq!(cfg.material.young, 2.3);
        assert_eq!(cfg.material.nu, 0.3);
        assert_eq!(cfg.macro_.traction, [0.0, -0.1]);
        assert_eq!((cfg.macro_.nx, cfg.macro_.ny), (2, 1));
        let problem = cfg.build_macro_problem().unwrap();
        assert_eq!(problem.mesh.quads.len(), 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn preset_bending_values() {
        let cfg = ProblemConfig::preset("bending").unwrap();
        assert_eq!((cfg.macro_.nx, cfg.macro_.ny), (4, 4));
        assert_eq!(cfg.macro_.traction, [0.01, 0.0]);
        let problem = cfg.build_macro_problem().unwrap();
        assert_eq!(problem.mesh.quads.len(), 16);
        // Bottom edge fully fixed.
        for nd in problem.mesh.edge_nodes(&problem.mesh.bottom) {
            for c in 0..2 {
                assert!(matches!(
                    problem.space.kind[2 * nd + c],
                    crate::macrosolver::DofKind::Fixed(v) if v == 0.0
                ));
            }
        }
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(ProblemConfig::preset("torsion").is_err());
    }

    #[test]
    fn invalid_poisson_rejected() {
        let mut cfg = ProblemConfig::preset("uniaxial").unwrap();
        cfg.material.nu = 0.7;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let cfg = ProblemConfig::preset("bending").unwrap();
        save_config(&cfg, &path).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_warns_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let cfg = ProblemConfig::preset("uniaxial").unwrap();
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["solver"]["typo_key"] = serde_json::json!(1);
        fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        let (back, warnings) = load_config_with_warnings(&path).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("solver.typo_key"));
    }

    #[test]
    fn parse_error_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, "{ \"material\": ").unwrap();
        match load_config(&path) {
            Err(Error::Parse(msg)) => assert!(msg.contains("line"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn cell_mesh_roundtrip() {
        let mesh = generate_cell_slit(0.6, 0.02, 0.1).unwrap();
        let text = cell_mesh_to_string(&mesh);
        let back = parse_cell_mesh(&text).unwrap();
        assert_eq!(mesh.nodes, back.nodes);
        assert_eq!(mesh.elements, back.elements);
        assert_eq!(mesh.plus_edges, back.plus_edges);
        assert_eq!(mesh.minus_edges, back.minus_edges);
        assert_eq!(mesh.rigid_nodes, back.rigid_nodes);
        assert_eq!(mesh.periodic_pairs.len(), back.periodic_pairs.len());
        assert_eq!(mesh.exterior_edges.len(), back.exterior_edges.len());
        assert!((mesh.cell_size[0] - back.cell_size[0]).abs() < 1e-12);
        back.validate().unwrap();
    }

    #[test]
    fn macro_mesh_roundtrip() {
        let mesh = MacroMesh::unit_square(3, 2).unwrap();
        let back = parse_macro_mesh(&macro_mesh_to_string(&mesh)).unwrap();
        assert_eq!(mesh.nodes, back.nodes);
        assert_eq!(mesh.quads, back.quads);
        assert_eq!(mesh.top, back.top);
        assert_eq!(mesh.left, back.left);
    }

    #[test]
    fn zero_state_export_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ProblemConfig::preset("uniaxial").unwrap();
        let ctx = cfg.build_cell_context().unwrap();
        let problem = cfg.build_macro_problem().unwrap();
        let state = MacroState::new(&problem, &ctx);
        let written = export_fields(&problem, &ctx, &state, dir.path(), 1.0, &[0]).unwrap();
        assert_eq!(written.len(), 3);
        let macro_text = fs::read_to_string(&written[0]).unwrap();
        assert!(macro_text.contains("DATASET UNSTRUCTURED_GRID"));
        assert!(macro_text.contains("SCALARS n_contact int 1"));
        // Zero state: every displacement line is exactly zero.
        let disp: Vec<&str> = macro_text
            .lines()
            .skip_while(|l| !l.starts_with("VECTORS displacement"))
            .skip(1)
            .take(problem.mesh.n_nodes())
            .collect();
        assert_eq!(disp.len(), problem.mesh.n_nodes());
        for l in disp {
            for tok in l.split_whitespace() {
                assert_eq!(tok.parse::<f64>().unwrap(), 0.0);
            }
        }
        // Exported cell mesh is re-readable.
        read_cell_mesh(&written[1]).unwrap();

        let csv = dir.path().join("convergence.csv");
        let rec = ConvergenceRecord {
            step: 1,
            outer_iter: 0,
            method: "ml",
            norm_du: 0.0,
            norm_r: 1.0,
            norm_lambda: 0.0,
            n_active_total: 0,
        };
        for _ in 0..10 {
            append_convergence(&csv, &rec).unwrap();
        }
        let text = fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[0], CONVERGENCE_HEADER);
    }

    #[test]
    fn out_dir_resolution() {
        let cfg = OutputConfig::default();
        // Without the environment override, the flag wins over the config.
        if std::env::var("MICROCONTACT_OUT").is_err() {
            assert_eq!(resolve_out_dir(None, &cfg), PathBuf::from("out"));
            assert_eq!(
                resolve_out_dir(Some(Path::new("elsewhere")), &cfg),
                PathBuf::from("elsewhere")
            );
        }
    }
}
