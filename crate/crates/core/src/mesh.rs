//! Periodic micro-cell meshes, the macroscopic quad mesh, periodic node
//! identification and the contact collocation pairing.
//!
//! Cells are triangulated with 3-node linear triangles on `[0, y1] x [0, y2]`;
//! the macro mesh uses 4-node bilinear quadrilaterals on the unit square.

use crate::error::{Error, Result};

const MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodicPair {
    pub master: usize,
    pub slave: usize,
    pub shift: [f64; 2],
}

/// Triangulated periodic unit cell with a tagged contact boundary.
#[derive(Debug, Clone)]
pub struct PeriodicCellMesh {
    pub nodes: Vec<[f64; 2]>,
    pub elements: Vec<[usize; 3]>,
    /// Edges of the contact boundary on the plus side.
    pub plus_edges: Vec<[usize; 2]>,
    /// Edges of the contact boundary on the minus side.
    pub minus_edges: Vec<[usize; 2]>,
    /// Remaining boundary edges (outer cell boundary, excluded-contact walls).
    pub exterior_edges: Vec<[usize; 2]>,
    pub periodic_pairs: Vec<PeriodicPair>,
    /// Nodes of the rigid inclusion (boundary and interior), sorted.
    pub rigid_nodes: Vec<usize>,
    pub cell_size: [f64; 2],
}

impl PeriodicCellMesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_size[0] * self.cell_size[1]
    }

    pub fn barycenter(&self) -> [f64; 2] {
        [self.cell_size[0] * 0.5, self.cell_size[1] * 0.5]
    }

    pub fn is_rigid(&self, node: usize) -> bool {
        self.rigid_nodes.binary_search(&node).is_ok()
    }

    pub fn element_area(&self, e: usize) -> f64 {
        let [a, b, c] = self.elements[e];
        triangle_area(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    /// Checks the structural invariants; returns the first violation.
    pub fn validate(&self) -> Result<()> {
        for (i, el) in self.elements.iter().enumerate() {
            let area = triangle_area(self.nodes[el[0]], self.nodes[el[1]], self.nodes[el[2]]);
            if area <= 0.0 {
                return Err(Error::Mesh(format!(
                    "element {i} has non-positive signed area {area:.3e}"
                )));
            }
        }
        let plus: std::collections::HashSet<usize> =
            self.plus_edges.iter().flatten().copied().collect();
        let minus: std::collections::HashSet<usize> =
            self.minus_edges.iter().flatten().copied().collect();
        if plus.intersection(&minus).next().is_some() {
            return Err(Error::Mesh("plus and minus contact tags intersect".into()));
        }
        for p in &self.periodic_pairs {
            let m = self.nodes[p.master];
            let s = self.nodes[p.slave];
            let dx = s[0] - m[0] - p.shift[0];
            let dy = s[1] - m[1] - p.shift[1];
            if dx.abs() > MATCH_TOL || dy.abs() > MATCH_TOL {
                return Err(Error::Mesh(format!(
                    "periodic pair ({}, {}) violates shift identity by ({dx:.3e}, {dy:.3e})",
                    p.master, p.slave
                )));
            }
            let sx = p.shift[0].abs();
            let sy = p.shift[1].abs();
            let ok = (sx < MATCH_TOL || (sx - self.cell_size[0]).abs() < MATCH_TOL)
                && (sy < MATCH_TOL || (sy - self.cell_size[1]).abs() < MATCH_TOL)
                && (sx > MATCH_TOL || sy > MATCH_TOL);
            if !ok {
                return Err(Error::Mesh(format!(
                    "periodic shift ({sx}, {sy}) is not a lattice vector"
                )));
            }
        }
        for &n in &self.rigid_nodes {
            let [x, y] = self.nodes[n];
            if x < MATCH_TOL
                || y < MATCH_TOL
                || x > self.cell_size[0] - MATCH_TOL
                || y > self.cell_size[1] - MATCH_TOL
            {
                return Err(Error::Mesh(format!(
                    "rigid node {n} at ({x}, {y}) touches the cell boundary"
                )));
            }
        }
        Ok(())
    }
}

pub fn triangle_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

// ---------------------------------------------------------------------------
// Contact pairing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Plus,
    Minus,
}

/// One collocation record of the symmetric node-to-segment scheme.
///
/// `node` is the master node on `side`; `segment` indexes the opposite
/// side's edge list together with the barycentric weight of the foot point.
/// `normal` is the unit normal oriented from the minus side towards the
/// plus side, taken at the master vertex in the reference configuration.
#[derive(Debug, Clone, Copy)]
pub struct PairingRecord {
    pub t: f64,
    pub side: Side,
    pub node: usize,
    pub segment: (usize, f64),
    pub normal: [f64; 2],
    pub ref_gap: f64,
}

/// Collocation records pairing homologous points across the pore, ordered by
/// the boundary parameter `t`.
#[derive(Debug, Clone)]
pub struct ContactPairing {
    pub records: Vec<PairingRecord>,
    /// True when the contact boundary is a closed loop (ring cell).
    pub closed: bool,
}

impl ContactPairing {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = f64::NEG_INFINITY;
        for (i, r) in self.records.iter().enumerate() {
            let n2 = r.normal[0] * r.normal[0] + r.normal[1] * r.normal[1];
            if (n2.sqrt() - 1.0).abs() > 1e-12 {
                return Err(Error::Pairing(format!("record {i}: normal not unit")));
            }
            if r.ref_gap < 0.0 {
                return Err(Error::Pairing(format!(
                    "record {i}: negative reference gap {:.3e}",
                    r.ref_gap
                )));
            }
            if r.t <= prev {
                return Err(Error::Pairing(format!(
                    "record {i}: parameter t not strictly increasing"
                )));
            }
            prev = r.t;
        }
        Ok(())
    }
}

/// Walks the tagged edge list into an ordered node chain.
/// Returns the ordered nodes and whether the chain is closed.
fn order_chain(edges: &[[usize; 2]]) -> Result<(Vec<usize>, bool)> {
    use std::collections::HashMap;
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for e in edges {
        adj.entry(e[0]).or_default().push(e[1]);
        adj.entry(e[1]).or_default().push(e[0]);
    }
    let mut ends: Vec<usize> = adj
        .iter()
        .filter(|(_, v)| v.len() == 1)
        .map(|(&k, _)| k)
        .collect();
    ends.sort_unstable();
    let closed = ends.is_empty();
    let start = if closed {
        *adj.keys().min().unwrap()
    } else {
        if ends.len() != 2 {
            return Err(Error::Pairing(format!(
                "contact chain has {} endpoints",
                ends.len()
            )));
        }
        ends[0]
    };
    let mut chain = vec![start];
    let mut prev = usize::MAX;
    let mut cur = start;
    loop {
        let next = adj[&cur].iter().copied().find(|&n| n != prev);
        match next {
            Some(n) => {
                if closed && n == start {
                    break;
                }
                chain.push(n);
                prev = cur;
                cur = n;
                if chain.len() > edges.len() + 1 {
                    return Err(Error::Pairing("contact chain does not close".into()));
                }
            }
            None => break,
        }
    }
    Ok((chain, closed))
}

struct Chain {
    nodes: Vec<usize>,
    /// Cumulative arclength at each chain node.
    arc: Vec<f64>,
    total: f64,
    closed: bool,
    /// Edge list index (into the tagged edge list) for chain segment k.
    edge_ids: Vec<usize>,
}

fn build_chain(mesh: &PeriodicCellMesh, edges: &[[usize; 2]]) -> Result<Chain> {
    let (nodes, closed) = order_chain(edges)?;
    let mut arc = vec![0.0];
    let n_seg = if closed { nodes.len() } else { nodes.len() - 1 };
    let mut edge_ids = Vec::with_capacity(n_seg);
    let find_edge = |a: usize, b: usize| -> Option<usize> {
        edges
            .iter()
            .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
    };
    for k in 0..n_seg {
        let a = nodes[k];
        let b = nodes[(k + 1) % nodes.len()];
        let pa = mesh.nodes[a];
        let pb = mesh.nodes[b];
        let len = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
        arc.push(arc[k] + len);
        edge_ids.push(find_edge(a, b).ok_or_else(|| {
            Error::Pairing(format!("chain segment ({a}, {b}) missing from edge list"))
        })?);
    }
    let total = *arc.last().unwrap();
    Ok(Chain {
        nodes,
        arc,
        total,
        closed,
        edge_ids,
    })
}

impl Chain {
    /// Unit tangent-perpendicular at chain vertex i (unoriented).
    fn vertex_perp(&self, mesh: &PeriodicCellMesh, i: usize) -> [f64; 2] {
        let n = self.nodes.len();
        let (ia, ib) = if self.closed {
            (self.nodes[(i + n - 1) % n], self.nodes[(i + 1) % n])
        } else if i == 0 {
            (self.nodes[0], self.nodes[1])
        } else if i == n - 1 {
            (self.nodes[n - 2], self.nodes[n - 1])
        } else {
            (self.nodes[i - 1], self.nodes[i + 1])
        };
        let a = mesh.nodes[ia];
        let b = mesh.nodes[ib];
        let tx = b[0] - a[0];
        let ty = b[1] - a[1];
        let l = (tx * tx + ty * ty).sqrt();
        [-ty / l, tx / l]
    }

    /// Arclength parameter in [0, 1] of a point on segment k with weight w.
    fn param_at(&self, k: usize, w: f64) -> f64 {
        let s0 = self.arc[k];
        let s1 = self.arc[k + 1];
        ((1.0 - w) * s0 + w * s1) / self.total
    }

    fn param_at_vertex(&self, i: usize) -> f64 {
        self.arc[i] / self.total
    }
}

/// Intersects the ray `origin + s * dir`, s > 0, with the chain segments.
/// Returns (chain segment index, weight, s) of the nearest hit.
fn ray_hit(
    mesh: &PeriodicCellMesh,
    chain: &Chain,
    origin: [f64; 2],
    dir: [f64; 2],
) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    let n = chain.nodes.len();
    let n_seg = if chain.closed { n } else { n - 1 };
    for k in 0..n_seg {
        let a = mesh.nodes[chain.nodes[k]];
        let b = mesh.nodes[chain.nodes[(k + 1) % n]];
        let ex = b[0] - a[0];
        let ey = b[1] - a[1];
        // origin + s*dir = a + w*e
        let det = dir[0] * (-ey) - dir[1] * (-ex);
        if det.abs() < 1e-14 {
            continue;
        }
        let rx = a[0] - origin[0];
        let ry = a[1] - origin[1];
        let s = (rx * (-ey) - ry * (-ex)) / det;
        let w = (dir[0] * ry - dir[1] * rx) / det;
        if s > 1e-12 && (-1e-9..=1.0 + 1e-9).contains(&w) && best.is_none_or(|(_, _, bs)| s < bs) {
            best = Some((k, w.clamp(0.0, 1.0), s));
        }
    }
    best
}

/// Builds the symmetric collocation pairing: one record per plus-side node
/// and one per minus-side node, parameters measured along the plus chain.
pub fn build_contact_pairing(mesh: &PeriodicCellMesh) -> Result<ContactPairing> {
    if mesh.plus_edges.is_empty() || mesh.minus_edges.is_empty() {
        return Err(Error::Pairing("empty contact boundary tags".into()));
    }
    let plus = build_chain(mesh, &mesh.plus_edges)?;
    let minus = build_chain(mesh, &mesh.minus_edges)?;

    let mut records = Vec::new();
    // Plus family: master nodes on the plus chain, feet on minus segments.
    for (i, &p) in plus.nodes.iter().enumerate() {
        let perp = plus.vertex_perp(mesh, i);
        let origin = mesh.nodes[p];
        // The minus side lies along -normal from a plus master.
        let hit_a = ray_hit(mesh, &minus, origin, [-perp[0], -perp[1]]);
        let hit_b = ray_hit(mesh, &minus, origin, perp);
        let (normal, (k, w, s)) = match (hit_a, hit_b) {
            (Some(a), Some(b)) => {
                if a.2 <= b.2 {
                    (perp, a)
                } else {
                    ([-perp[0], -perp[1]], b)
                }
            }
            (Some(a), None) => (perp, a),
            (None, Some(b)) => ([-perp[0], -perp[1]], b),
            (None, None) => {
                return Err(Error::Pairing(format!(
                    "no opposing segment found for plus node {p}"
                )))
            }
        };
        records.push(PairingRecord {
            t: plus.param_at_vertex(i),
            side: Side::Plus,
            node: p,
            segment: (minus.edge_ids[k], w),
            normal,
            ref_gap: s,
        });
    }
    // Minus family: master nodes on the minus chain, feet on plus segments.
    for (i, &m) in minus.nodes.iter().enumerate() {
        let perp = minus.vertex_perp(mesh, i);
        let origin = mesh.nodes[m];
        let hit_a = ray_hit(mesh, &plus, origin, perp);
        let hit_b = ray_hit(mesh, &plus, origin, [-perp[0], -perp[1]]);
        let (normal, (k, w, s)) = match (hit_a, hit_b) {
            (Some(a), Some(b)) => {
                if a.2 <= b.2 {
                    (perp, a)
                } else {
                    ([-perp[0], -perp[1]], b)
                }
            }
            (Some(a), None) => (perp, a),
            (None, Some(b)) => ([-perp[0], -perp[1]], b),
            (None, None) => {
                return Err(Error::Pairing(format!(
                    "no opposing segment found for minus node {m}"
                )))
            }
        };
        records.push(PairingRecord {
            t: plus.param_at(k, w),
            side: Side::Minus,
            node: m,
            segment: (plus.edge_ids[k], w),
            normal,
            ref_gap: s,
        });
    }
    records.sort_by(|a, b| {
        a.t.partial_cmp(&b.t)
            .unwrap()
            .then_with(|| match (a.side, b.side) {
                (Side::Plus, Side::Minus) => std::cmp::Ordering::Less,
                (Side::Minus, Side::Plus) => std::cmp::Ordering::Greater,
                _ => std::cmp::Ordering::Equal,
            })
    });
    // Enforce a strictly increasing parametrization; coincident collocation
    // points from the two families are kept and nudged infinitesimally.
    for i in 1..records.len() {
        if records[i].t <= records[i - 1].t {
            records[i].t = records[i - 1].t + 1e-12;
        }
    }
    let pairing = ContactPairing {
        records,
        closed: plus.closed,
    };
    pairing.validate()?;
    Ok(pairing)
}

// ---------------------------------------------------------------------------
// Periodic node identification
// ---------------------------------------------------------------------------

/// Matches boundary nodes on opposite faces into master/slave pairs;
/// the three non-origin corners are resolved to the origin corner.
pub fn match_periodic_pairs(
    nodes: &[[f64; 2]],
    cell_size: [f64; 2],
    tol: f64,
) -> Result<Vec<PeriodicPair>> {
    let [lx, ly] = cell_size;
    let on = |v: f64, target: f64| (v - target).abs() <= tol;
    let mut corners: [Option<usize>; 4] = [None; 4]; // (0,0) (lx,0) (0,ly) (lx,ly)
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut bottom = Vec::new();
    let mut top = Vec::new();
    for (i, &[x, y]) in nodes.iter().enumerate() {
        let xl = on(x, 0.0);
        let xr = on(x, lx);
        let yb = on(y, 0.0);
        let yt = on(y, ly);
        match (xl, xr, yb, yt) {
            (true, _, true, _) => corners[0] = Some(i),
            (_, true, true, _) => corners[1] = Some(i),
            (true, _, _, true) => corners[2] = Some(i),
            (_, true, _, true) => corners[3] = Some(i),
            (true, _, _, _) => left.push(i),
            (_, true, _, _) => right.push(i),
            (_, _, true, _) => bottom.push(i),
            (_, _, _, true) => top.push(i),
            _ => {}
        }
    }
    let mut pairs = Vec::new();
    if let Some(origin) = corners[0] {
        let shifts = [[lx, 0.0], [0.0, ly], [lx, ly]];
        for (c, shift) in corners[1..].iter().zip(shifts) {
            if let Some(&slave) = c.as_ref() {
                pairs.push(PeriodicPair {
                    master: origin,
                    slave,
                    shift,
                });
            }
        }
    }
    let match_faces = |masters: &[usize],
                       slaves: &[usize],
                       coord: usize,
                       shift: [f64; 2],
                       pairs: &mut Vec<PeriodicPair>|
     -> Result<()> {
        let mut ms: Vec<usize> = masters.to_vec();
        let mut sl: Vec<usize> = slaves.to_vec();
        ms.sort_by(|&a, &b| nodes[a][coord].partial_cmp(&nodes[b][coord]).unwrap());
        sl.sort_by(|&a, &b| nodes[a][coord].partial_cmp(&nodes[b][coord]).unwrap());
        if ms.len() != sl.len() {
            return Err(Error::Mesh(format!(
                "periodic faces have {} vs {} nodes",
                ms.len(),
                sl.len()
            )));
        }
        for (&m, &s) in ms.iter().zip(&sl) {
            if (nodes[m][coord] - nodes[s][coord]).abs() > tol {
                return Err(Error::Mesh(format!(
                    "unmatched periodic boundary node at ({:.6}, {:.6}) vs ({:.6}, {:.6})",
                    nodes[m][0], nodes[m][1], nodes[s][0], nodes[s][1]
                )));
            }
            pairs.push(PeriodicPair {
                master: m,
                slave: s,
                shift,
            });
        }
        Ok(())
    };
    match_faces(&left, &right, 1, [lx, 0.0], &mut pairs)?;
    match_faces(&bottom, &top, 0, [0.0, ly], &mut pairs)?;
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Cell generators
// ---------------------------------------------------------------------------

/// Symmetric 1D grid over [0, half*2] containing the prescribed interior
/// break `b` (< half) in each half, with spacing close to `h`.
fn symmetric_axis(break_pt: f64, half: f64, h: f64) -> Vec<f64> {
    let mut coords = vec![0.0];
    let seg = |from: f64, to: f64, out: &mut Vec<f64>| {
        let n = (((to - from) / h).round() as usize).max(1);
        for i in 1..=n {
            out.push(from + (to - from) * i as f64 / n as f64);
        }
    };
    if break_pt > 1e-12 && break_pt < half - 1e-12 {
        seg(0.0, break_pt, &mut coords);
    }
    seg(*coords.last().unwrap(), half, &mut coords);
    // Mirror about `half`.
    let mut full = coords.clone();
    for &c in coords.iter().rev().skip(1) {
        full.push(2.0 * half - c);
    }
    full
}

struct GridMesher {
    nodes: Vec<[f64; 2]>,
    elements: Vec<[usize; 3]>,
    lookup: std::collections::HashMap<(i64, i64), usize>,
}

impl GridMesher {
    fn new() -> Self {
        Self {
            nodes: Vec::new(),
            elements: Vec::new(),
            lookup: std::collections::HashMap::new(),
        }
    }

    fn key(p: [f64; 2]) -> (i64, i64) {
        ((p[0] * 1e10).round() as i64, (p[1] * 1e10).round() as i64)
    }

    fn node(&mut self, p: [f64; 2]) -> usize {
        let k = Self::key(p);
        if let Some(&i) = self.lookup.get(&k) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(p);
        self.lookup.insert(k, i);
        i
    }

    /// Union-jack split of a convex quad: four triangles around the centroid.
    fn quad(&mut self, a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) {
        let ctr = [
            0.25 * (a[0] + b[0] + c[0] + d[0]),
            0.25 * (a[1] + b[1] + c[1] + d[1]),
        ];
        let (ia, ib, ic, id) = (self.node(a), self.node(b), self.node(c), self.node(d));
        let im = self.node(ctr);
        for (p, q) in [(ia, ib), (ib, ic), (ic, id), (id, ia)] {
            self.elements.push([p, q, im]);
        }
    }
}

/// Square cell with a centered horizontal slit pore. The upper slit face is
/// tagged plus, the lower minus; no rigid inclusion.
///
/// `slit_width` and `slit_gap` are fractions of the cell edge lengths.
pub fn generate_cell_slit(
    slit_width: f64,
    slit_gap: f64,
    target_edge_length: f64,
) -> Result<PeriodicCellMesh> {
    if !(slit_width > 0.0 && slit_width < 1.0) {
        return Err(Error::Geometry(format!(
            "slit_width {slit_width} outside (0, 1)"
        )));
    }
    if !(slit_gap > 0.0 && slit_gap < 0.5) {
        return Err(Error::Geometry(format!(
            "slit_gap {slit_gap} outside (0, 0.5)"
        )));
    }
    if target_edge_length.is_nan() || target_edge_length <= 0.0 {
        return Err(Error::Geometry(
            "target_edge_length must be positive".into(),
        ));
    }
    let x0 = 0.5 * (1.0 - slit_width);
    let x1 = 0.5 * (1.0 + slit_width);
    let y0 = 0.5 * (1.0 - slit_gap);
    let y1 = 0.5 * (1.0 + slit_gap);
    if x0 < 1e-3 {
        return Err(Error::Geometry(format!(
            "slit_width {slit_width} leaves only {x0:.2e} of solid: slit reaches the cell boundary"
        )));
    }
    let h = target_edge_length;
    let xs = symmetric_axis(x0, 0.5, h);
    // y axis: breaks at y0 and 0.5 is inside the pore; build [0, y0] then
    // jump to y1 and mirror.
    let mut ys = vec![0.0];
    let ny = ((y0 / h).round() as usize).max(1);
    for i in 1..=ny {
        ys.push(y0 * i as f64 / ny as f64);
    }
    let lower: Vec<f64> = ys.clone();
    for &c in lower.iter().rev() {
        ys.push(1.0 - c);
    }
    // ys now contains ... y0, y1 ... with no interior pore coordinates.
    let mut m = GridMesher::new();
    let inside_pore = |cx: f64, cy: f64| cx > x0 && cx < x1 && cy > y0 && cy < y1;
    for i in 0..xs.len() - 1 {
        for j in 0..ys.len() - 1 {
            let (xa, xb) = (xs[i], xs[i + 1]);
            let (ya, yb) = (ys[j], ys[j + 1]);
            if inside_pore(0.5 * (xa + xb), 0.5 * (ya + yb)) {
                continue;
            }
            m.quad([xa, ya], [xb, ya], [xb, yb], [xa, yb]);
        }
    }
    let nodes = m.nodes;
    let elements = m.elements;
    for el in &elements {
        let area = triangle_area(nodes[el[0]], nodes[el[1]], nodes[el[2]]);
        if area <= 1e-14 {
            return Err(Error::Geometry(format!(
                "degenerate triangle (area {area:.3e}); adjust slit_width / slit_gap / target_edge_length"
            )));
        }
    }
    // Tag the slit faces.
    let face_nodes = |y: f64| -> Vec<usize> {
        let mut v: Vec<usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, p)| (p[1] - y).abs() < 1e-12 && p[0] >= x0 - 1e-12 && p[0] <= x1 + 1e-12)
            .map(|(i, _)| i)
            .collect();
        v.sort_by(|&a, &b| nodes[a][0].partial_cmp(&nodes[b][0]).unwrap());
        v
    };
    let chain_edges =
        |v: &[usize]| -> Vec<[usize; 2]> { v.windows(2).map(|w| [w[0], w[1]]).collect() };
    let plus_edges = chain_edges(&face_nodes(y1));
    let minus_edges = chain_edges(&face_nodes(y0));
    if plus_edges.is_empty() || minus_edges.is_empty() {
        return Err(Error::Geometry(
            "slit faces carry no edges; target_edge_length too coarse for slit_width".into(),
        ));
    }
    let exterior_edges = collect_exterior_edges(&nodes, &elements, &plus_edges, &minus_edges);
    let mut mesh = PeriodicCellMesh {
        nodes,
        elements,
        plus_edges,
        minus_edges,
        exterior_edges,
        periodic_pairs: Vec::new(),
        rigid_nodes: Vec::new(),
        cell_size: [1.0, 1.0],
    };
    mesh.periodic_pairs = match_periodic_pairs(&mesh.nodes, mesh.cell_size, MATCH_TOL)?;
    snap_periodic(&mut mesh);
    mesh.validate()?;
    Ok(mesh)
}

/// Square cell with a circular hole of radius `hole_radius` (fraction of the
/// cell edge) containing a concentric rigid disc of radius `inclusion_radius`.
/// Hole surface tagged plus, inclusion surface minus.
pub fn generate_cell_ring(
    hole_radius: f64,
    inclusion_radius: f64,
    target_edge_length: f64,
) -> Result<PeriodicCellMesh> {
    if !(inclusion_radius > 0.0 && inclusion_radius < hole_radius && hole_radius < 0.5) {
        return Err(Error::Geometry(format!(
            "require 0 < inclusion_radius < hole_radius < 0.5, got ({hole_radius}, {inclusion_radius})"
        )));
    }
    if target_edge_length.is_nan() || target_edge_length <= 0.0 {
        return Err(Error::Geometry(
            "target_edge_length must be positive".into(),
        ));
    }
    let big_r = hole_radius;
    let small_r = inclusion_radius;
    let h = target_edge_length;
    let c = [0.5, 0.5];
    let mut n_theta = ((2.0 * std::f64::consts::PI * big_r / h).ceil() as usize).max(16);
    n_theta = n_theta.div_ceil(8) * 8;
    // Boundary point of the square in direction theta.
    let square_pt = |theta: f64| -> [f64; 2] {
        let (s, co) = theta.sin_cos();
        let scale = 0.5 / co.abs().max(s.abs());
        let mut p = [c[0] + scale * co, c[1] + scale * s];
        for v in &mut p {
            if v.abs() < 1e-12 {
                *v = 0.0;
            }
            if (*v - 1.0).abs() < 1e-12 {
                *v = 1.0;
            }
        }
        p
    };
    let n_r = (((0.55 - big_r) / h).round() as usize).max(2);
    let mut m = GridMesher::new();
    let ring_pt = |k: usize, j: usize| -> [f64; 2] {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / n_theta as f64;
        let (s, co) = theta.sin_cos();
        let inner = [c[0] + big_r * co, c[1] + big_r * s];
        let outer = square_pt(theta);
        let a = j as f64 / n_r as f64;
        [
            (1.0 - a) * inner[0] + a * outer[0],
            (1.0 - a) * inner[1] + a * outer[1],
        ]
    };
    for k in 0..n_theta {
        for j in 0..n_r {
            let k1 = (k + 1) % n_theta;
            m.quad(
                ring_pt(k, j),
                ring_pt(k, j + 1),
                ring_pt(k1, j + 1),
                ring_pt(k1, j),
            );
        }
    }
    // Hole surface nodes (plus side).
    let hole_ids: Vec<usize> = (0..n_theta).map(|k| m.node(ring_pt(k, 0))).collect();
    // Rigid inclusion disc: boundary polygon + center fan.
    let mut n_inc = ((2.0 * std::f64::consts::PI * small_r / h).ceil() as usize).max(12);
    n_inc = n_inc.div_ceil(4) * 4;
    let inc_ids: Vec<usize> = (0..n_inc)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / n_inc as f64;
            let (s, co) = theta.sin_cos();
            m.node([c[0] + small_r * co, c[1] + small_r * s])
        })
        .collect();
    let center_id = m.node(c);
    for k in 0..n_inc {
        m.elements
            .push([center_id, inc_ids[k], inc_ids[(k + 1) % n_inc]]);
    }
    let nodes = m.nodes;
    let elements = m.elements;
    for el in &elements {
        let area = triangle_area(nodes[el[0]], nodes[el[1]], nodes[el[2]]);
        if area <= 1e-14 {
            return Err(Error::Geometry(format!(
                "degenerate triangle (area {area:.3e}) in ring cell; adjust radii or target_edge_length"
            )));
        }
    }
    let plus_edges: Vec<[usize; 2]> = (0..n_theta)
        .map(|k| [hole_ids[k], hole_ids[(k + 1) % n_theta]])
        .collect();
    let minus_edges: Vec<[usize; 2]> = (0..n_inc)
        .map(|k| [inc_ids[k], inc_ids[(k + 1) % n_inc]])
        .collect();
    let exterior_edges = collect_exterior_edges(&nodes, &elements, &plus_edges, &minus_edges);
    let mut rigid_nodes: Vec<usize> = inc_ids.clone();
    rigid_nodes.push(center_id);
    rigid_nodes.sort_unstable();
    let mut mesh = PeriodicCellMesh {
        nodes,
        elements,
        plus_edges,
        minus_edges,
        exterior_edges,
        periodic_pairs: Vec::new(),
        rigid_nodes,
        cell_size: [1.0, 1.0],
    };
    mesh.periodic_pairs = match_periodic_pairs(&mesh.nodes, mesh.cell_size, MATCH_TOL)?;
    snap_periodic(&mut mesh);
    mesh.validate()?;
    Ok(mesh)
}

/// Pore-free unit cell (structured grid, union-jack triangulation); used by
/// patch tests and as a contact-free reference geometry.
pub fn generate_cell_full(n: usize) -> Result<PeriodicCellMesh> {
    if n == 0 {
        return Err(Error::Geometry("grid resolution must be positive".into()));
    }
    let mut m = GridMesher::new();
    let c = |i: usize| i as f64 / n as f64;
    for i in 0..n {
        for j in 0..n {
            m.quad(
                [c(i), c(j)],
                [c(i + 1), c(j)],
                [c(i + 1), c(j + 1)],
                [c(i), c(j + 1)],
            );
        }
    }
    let nodes = m.nodes;
    let elements = m.elements;
    let exterior_edges = collect_exterior_edges(&nodes, &elements, &[], &[]);
    let mut mesh = PeriodicCellMesh {
        nodes,
        elements,
        plus_edges: Vec::new(),
        minus_edges: Vec::new(),
        exterior_edges,
        periodic_pairs: Vec::new(),
        rigid_nodes: Vec::new(),
        cell_size: [1.0, 1.0],
    };
    mesh.periodic_pairs = match_periodic_pairs(&mesh.nodes, mesh.cell_size, MATCH_TOL)?;
    snap_periodic(&mut mesh);
    mesh.validate()?;
    Ok(mesh)
}

/// Snaps slave coordinates so the shift identity holds exactly.
fn snap_periodic(mesh: &mut PeriodicCellMesh) {
    let pairs = mesh.periodic_pairs.clone();
    for p in pairs {
        let m = mesh.nodes[p.master];
        mesh.nodes[p.slave] = [m[0] + p.shift[0], m[1] + p.shift[1]];
    }
}

/// Boundary edges of the triangulation not tagged as contact.
fn collect_exterior_edges(
    _nodes: &[[f64; 2]],
    elements: &[[usize; 3]],
    plus: &[[usize; 2]],
    minus: &[[usize; 2]],
) -> Vec<[usize; 2]> {
    use std::collections::HashMap;
    let mut count: HashMap<(usize, usize), [usize; 2]> = HashMap::new();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    for el in elements {
        for (a, b) in [(el[0], el[1]), (el[1], el[2]), (el[2], el[0])] {
            let k = (a.min(b), a.max(b));
            *seen.entry(k).or_insert(0) += 1;
            count.insert(k, [a, b]);
        }
    }
    let tagged: std::collections::HashSet<(usize, usize)> = plus
        .iter()
        .chain(minus.iter())
        .map(|e| (e[0].min(e[1]), e[0].max(e[1])))
        .collect();
    let mut out: Vec<[usize; 2]> = seen
        .iter()
        .filter(|(k, &c)| c == 1 && !tagged.contains(k))
        .map(|(k, _)| count[k])
        .collect();
    out.sort_unstable();
    out
}

// ---------------------------------------------------------------------------
// Macro mesh
// ---------------------------------------------------------------------------

/// Macroscopic quadrilateral mesh on the unit square with tagged boundary
/// edges.
#[derive(Debug, Clone)]
pub struct MacroMesh {
    pub nodes: Vec<[f64; 2]>,
    pub quads: Vec<[usize; 4]>,
    pub left: Vec<[usize; 2]>,
    pub right: Vec<[usize; 2]>,
    pub bottom: Vec<[usize; 2]>,
    pub top: Vec<[usize; 2]>,
}

impl MacroMesh {
    /// Structured nx x ny grid of quad4 elements on [0,1]^2.
    pub fn unit_square(nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Mesh("macro grid dimensions must be positive".into()));
        }
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([i as f64 / nx as f64, j as f64 / ny as f64]);
            }
        }
        let mut quads = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                quads.push([id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        let left = (0..ny).map(|j| [id(0, j), id(0, j + 1)]).collect();
        let right = (0..ny).map(|j| [id(nx, j), id(nx, j + 1)]).collect();
        let bottom = (0..nx).map(|i| [id(i, 0), id(i + 1, 0)]).collect();
        let top = (0..nx).map(|i| [id(i, ny), id(i + 1, ny)]).collect();
        Ok(Self {
            nodes,
            quads,
            left,
            right,
            bottom,
            top,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_nodes(&self, edges: &[[usize; 2]]) -> Vec<usize> {
        let mut v: Vec<usize> = edges.iter().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// 2x2 Gauss points on the reference square [-1,1]^2 with weights.
pub fn gauss_2x2() -> [([f64; 2], f64); 4] {
    let g = 1.0 / 3.0f64.sqrt();
    [
        ([-g, -g], 1.0),
        ([g, -g], 1.0),
        ([g, g], 1.0),
        ([-g, g], 1.0),
    ]
}
