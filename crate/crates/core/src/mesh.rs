//! Primal meshes (segments in 1D, triangles in 2D), their dual cells, and
//! the angle conditions that decide the sign of the stiffness off-diagonals.
//!
//! Vertex `j` is the center of dual cell `C_j`; copy numbers live on dual
//! cells, so the number of cells equals the number of vertices.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

/// Relative area threshold below which a triangle is rejected as degenerate.
pub const DEGENERATE_TOLERANCE: f64 = 1e-14;

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("mesh line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("element {element}: vertex index {index} out of range (K = {count})")]
    IndexOutOfRange {
        element: usize,
        index: usize,
        count: usize,
    },
    #[error("element {element} repeats vertex {index}")]
    RepeatedVertex { element: usize, index: usize },
    #[error("element {element} is degenerate (measure {measure:e} below {threshold:e})")]
    Degenerate {
        element: usize,
        measure: f64,
        threshold: f64,
    },
    #[error("mesh is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("node positions must be strictly increasing (index {index})")]
    NonMonotone { index: usize },
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("quality report is only defined for 2D meshes")]
    NotTwoDimensional,
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, MeshError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Elements {
    Segments(Vec<[usize; 2]>),
    Triangles(Vec<[usize; 3]>),
}

impl Elements {
    pub fn len(&self) -> usize {
        match self {
            Elements::Segments(s) => s.len(),
            Elements::Triangles(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A validated 1D or 2D simplicial mesh.
///
/// In 1D the second coordinate of every vertex is zero. Triangles are stored
/// counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    elements: Elements,
    boundary: BTreeSet<usize>,
}

impl Mesh {
    /// Builds a 1D mesh from node coordinates and segments.
    pub fn from_segments(
        coords: Vec<f64>,
        segments: Vec<[usize; 2]>,
        markers: &[usize],
    ) -> Result<Self> {
        let vertices = coords.into_iter().map(|x| [x, 0.0]).collect();
        Self::validated(vertices, Elements::Segments(segments), markers)
    }

    /// Builds a 2D mesh; clockwise triangles are reoriented.
    pub fn from_triangles(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        markers: &[usize],
    ) -> Result<Self> {
        Self::validated(vertices, Elements::Triangles(triangles), markers)
    }

    fn validated(vertices: Vec<[f64; 2]>, mut elements: Elements, markers: &[usize]) -> Result<Self> {
        let k = vertices.len();
        if k < 2 {
            return Err(MeshError::Invalid(format!("need at least 2 vertices, got {k}")));
        }
        if elements.is_empty() {
            return Err(MeshError::Invalid("mesh has no elements".into()));
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(MeshError::Invalid("non-finite vertex coordinate".into()));
        }
        let check_indices = |e: usize, idx: &[usize]| -> Result<()> {
            for (p, &i) in idx.iter().enumerate() {
                if i >= k {
                    return Err(MeshError::IndexOutOfRange { element: e, index: i, count: k });
                }
                if idx[..p].contains(&i) {
                    return Err(MeshError::RepeatedVertex { element: e, index: i });
                }
            }
            Ok(())
        };

        match &mut elements {
            Elements::Segments(segs) => {
                for (e, s) in segs.iter().enumerate() {
                    check_indices(e, s)?;
                }
                let h_max = segs
                    .iter()
                    .map(|s| (vertices[s[1]][0] - vertices[s[0]][0]).abs())
                    .fold(0.0, f64::max);
                let threshold = DEGENERATE_TOLERANCE * h_max;
                for (e, s) in segs.iter().enumerate() {
                    let len = (vertices[s[1]][0] - vertices[s[0]][0]).abs();
                    if len <= threshold {
                        return Err(MeshError::Degenerate { element: e, measure: len, threshold });
                    }
                }
            }
            Elements::Triangles(tris) => {
                for (e, t) in tris.iter().enumerate() {
                    check_indices(e, t)?;
                }
                let h_max = tris
                    .iter()
                    .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
                    .map(|(a, b)| dist(vertices[a], vertices[b]))
                    .fold(0.0, f64::max);
                let threshold = DEGENERATE_TOLERANCE * h_max * h_max;
                for (e, t) in tris.iter_mut().enumerate() {
                    let area = signed_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
                    if area.abs() < threshold || area == 0.0 {
                        return Err(MeshError::Degenerate { element: e, measure: area.abs(), threshold });
                    }
                    if area < 0.0 {
                        t.swap(1, 2);
                    }
                }
            }
        }

        let components = count_components(k, &elements);
        if components != 1 {
            return Err(MeshError::Disconnected { components });
        }

        let mut boundary = structural_boundary(&elements);
        for &m in markers {
            if m >= k {
                return Err(MeshError::Invalid(format!("boundary marker {m} out of range (K = {k})")));
            }
            boundary.insert(m);
        }
        Ok(Mesh { vertices, elements, boundary })
    }

    pub fn dim(&self) -> usize {
        match self.elements {
            Elements::Segments(_) => 1,
            Elements::Triangles(_) => 2,
        }
    }

    /// Number of vertices, which is also the number of dual cells.
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn vertex(&self, j: usize) -> [f64; 2] {
        self.vertices[j]
    }

    pub fn elements(&self) -> &Elements {
        &self.elements
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn boundary(&self) -> &BTreeSet<usize> {
        &self.boundary
    }

    pub fn is_boundary(&self, j: usize) -> bool {
        self.boundary.contains(&j)
    }

    /// Length (1D) or area (2D) of the domain.
    pub fn measure(&self) -> f64 {
        match &self.elements {
            Elements::Segments(segs) => segs
                .iter()
                .map(|s| (self.vertices[s[1]][0] - self.vertices[s[0]][0]).abs())
                .sum(),
            Elements::Triangles(tris) => tris.iter().map(|t| self.triangle_area(t)).sum(),
        }
    }

    pub(crate) fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        signed_area(self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]])
    }

    /// Unique undirected edges `(j, k)` with `j < k`.
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        match &self.elements {
            Elements::Segments(segs) => {
                for s in segs {
                    out.insert(ordered(s[0], s[1]));
                }
            }
            Elements::Triangles(tris) => {
                for t in tris {
                    for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                        out.insert(ordered(a, b));
                    }
                }
            }
        }
        out
    }

    /// Longest element edge.
    pub fn h_max(&self) -> f64 {
        self.edges()
            .into_iter()
            .map(|(a, b)| dist(self.vertices[a], self.vertices[b]))
            .fold(0.0, f64::max)
    }

    /// Smallest distance from a vertex to the opposing edge of its triangle
    /// (segment length in 1D).
    pub fn h_min(&self) -> f64 {
        match &self.elements {
            Elements::Segments(segs) => segs
                .iter()
                .map(|s| (self.vertices[s[1]][0] - self.vertices[s[0]][0]).abs())
                .fold(f64::INFINITY, f64::min),
            Elements::Triangles(tris) => tris
                .iter()
                .map(|t| {
                    let longest = [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]
                        .iter()
                        .map(|&(a, b)| dist(self.vertices[a], self.vertices[b]))
                        .fold(0.0, f64::max);
                    2.0 * self.triangle_area(t) / longest
                })
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Returns a copy with every vertex mapped through `f`, revalidated.
    pub fn displaced(&self, f: impl Fn(usize, [f64; 2]) -> [f64; 2]) -> Result<Mesh> {
        let vertices = self.vertices.iter().enumerate().map(|(j, &v)| f(j, v)).collect();
        let markers: Vec<usize> = self.boundary.iter().copied().collect();
        Self::validated(vertices, self.elements.clone(), &markers)
    }

    /// Serializes to the line-oriented mesh text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {}", self.dim(), self.num_vertices(), self.num_elements());
        for v in &self.vertices {
            match self.dim() {
                1 => {
                    let _ = writeln!(s, "{:?}", v[0]);
                }
                _ => {
                    let _ = writeln!(s, "{:?} {:?}", v[0], v[1]);
                }
            }
        }
        match &self.elements {
            Elements::Segments(segs) => {
                for e in segs {
                    let _ = writeln!(s, "{} {}", e[0], e[1]);
                }
            }
            Elements::Triangles(tris) => {
                for e in tris {
                    let _ = writeln!(s, "{} {} {}", e[0], e[1], e[2]);
                }
            }
        }
        for b in &self.boundary {
            let _ = writeln!(s, "boundary {b}");
        }
        s
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub(crate) fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Cotangent of the angle at `apex` in the triangle `(apex, p, q)`.
pub(crate) fn cot_at(apex: [f64; 2], p: [f64; 2], q: [f64; 2]) -> f64 {
    let u = [p[0] - apex[0], p[1] - apex[1]];
    let v = [q[0] - apex[0], q[1] - apex[1]];
    let dot = u[0] * v[0] + u[1] * v[1];
    let cross = (u[0] * v[1] - u[1] * v[0]).abs();
    dot / cross
}

fn angle_at(apex: [f64; 2], p: [f64; 2], q: [f64; 2]) -> f64 {
    let u = [p[0] - apex[0], p[1] - apex[1]];
    let v = [q[0] - apex[0], q[1] - apex[1]];
    let dot = u[0] * v[0] + u[1] * v[1];
    let cross = (u[0] * v[1] - u[1] * v[0]).abs();
    cross.atan2(dot)
}

fn count_components(k: usize, elements: &Elements) -> usize {
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut union = |a: usize, b: usize| {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
        }
    };
    match elements {
        Elements::Segments(segs) => segs.iter().for_each(|s| union(s[0], s[1])),
        Elements::Triangles(tris) => tris.iter().for_each(|t| {
            union(t[0], t[1]);
            union(t[1], t[2]);
        }),
    }
    (0..k).filter(|&i| find(&mut parent, i) == i).count()
}

/// Vertices on facets that belong to exactly one element.
fn structural_boundary(elements: &Elements) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    match elements {
        Elements::Segments(segs) => {
            let mut count: BTreeMap<usize, usize> = BTreeMap::new();
            for s in segs {
                *count.entry(s[0]).or_default() += 1;
                *count.entry(s[1]).or_default() += 1;
            }
            out.extend(count.into_iter().filter(|&(_, c)| c == 1).map(|(v, _)| v));
        }
        Elements::Triangles(tris) => {
            let mut count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for t in tris {
                for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                    *count.entry(ordered(a, b)).or_default() += 1;
                }
            }
            for ((a, b), c) in count {
                if c == 1 {
                    out.insert(a);
                    out.insert(b);
                }
            }
        }
    }
    out
}

/// Parses the mesh text format.
///
/// ```text
/// dim K E
/// x [y]          # K vertex lines
/// i j [k]        # E element lines, zero-based
/// boundary i     # optional explicit markers
/// ```
pub fn parse_mesh(text: &str) -> Result<Mesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let perr = |line: usize, msg: String| MeshError::Parse { line, msg };

    let (hl, header) = lines.next().ok_or_else(|| perr(0, "empty mesh file".into()))?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| perr(hl, format!("bad header token {t:?}: {e}"))))
        .collect::<Result<_>>()?;
    let [dim, k, e] = head[..] else {
        return Err(perr(hl, format!("header must be `dim K E`, got {header:?}")));
    };
    if dim != 1 && dim != 2 {
        return Err(perr(hl, format!("dimension must be 1 or 2, got {dim}")));
    }

    let mut coords = Vec::with_capacity(k);
    for _ in 0..k {
        let (ln, l) = lines.next().ok_or_else(|| perr(0, "unexpected end of file in vertices".into()))?;
        let vals: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|err| perr(ln, format!("bad coordinate {t:?}: {err}"))))
            .collect::<Result<_>>()?;
        if vals.len() != dim {
            return Err(perr(ln, format!("expected {dim} coordinates, got {}", vals.len())));
        }
        coords.push(if dim == 1 { [vals[0], 0.0] } else { [vals[0], vals[1]] });
    }

    let mut raw = Vec::with_capacity(e);
    for _ in 0..e {
        let (ln, l) = lines.next().ok_or_else(|| perr(0, "unexpected end of file in elements".into()))?;
        let idx: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|err| perr(ln, format!("bad vertex index {t:?}: {err}"))))
            .collect::<Result<_>>()?;
        if idx.len() != dim + 1 {
            return Err(perr(ln, format!("expected {} indices, got {}", dim + 1, idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(perr(ln, format!("vertex index {bad} out of range (K = {k})")));
        }
        raw.push(idx);
    }

    let mut markers = Vec::new();
    for (ln, l) in lines {
        let mut toks = l.split_whitespace();
        match (toks.next(), toks.next(), toks.next()) {
            (Some("boundary"), Some(i), None) => {
                let i: usize = i.parse().map_err(|err| perr(ln, format!("bad boundary index {i:?}: {err}")))?;
                if i >= k {
                    return Err(perr(ln, format!("boundary index {i} out of range (K = {k})")));
                }
                markers.push(i);
            }
            _ => return Err(perr(ln, format!("unexpected line {l:?}"))),
        }
    }

    if dim == 1 {
        let segs = raw.into_iter().map(|v| [v[0], v[1]]).collect();
        Mesh::from_segments(coords.into_iter().map(|c| c[0]).collect(), segs, &markers)
    } else {
        let tris = raw.into_iter().map(|v| [v[0], v[1], v[2]]).collect();
        Mesh::from_triangles(coords, tris, &markers)
    }
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_mesh(&text)
}

/// Uniform right-triangle mesh of the unit square translated by `offset`.
///
/// Vertices are numbered row by row, `j * (n + 1) + i` at
/// `offset + (i / n, j / n)`; every grid cell is split along the diagonal
/// from its lower-left to its upper-right corner.
pub fn build_structured_unit_square(n: usize, offset: [f64; 2]) -> Mesh {
    assert!(n >= 1, "structured mesh needs n >= 1");
    let h = 1.0 / n as f64;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([offset[0] + i as f64 * h, offset[1] + j as f64 * h]);
        }
    }
    let id = |i: usize, j: usize| j * (n + 1) + i;
    let mut tris = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            tris.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            tris.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    Mesh::from_triangles(vertices, tris, &[]).expect("structured mesh is valid")
}

/// 1D mesh with segments between consecutive nodes.
pub fn build_1d_mesh(positions: &[f64]) -> Result<Mesh> {
    if positions.len() < 2 {
        return Err(MeshError::Invalid("need at least 2 nodes".into()));
    }
    if let Some(i) = positions.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(MeshError::NonMonotone { index: i + 1 });
    }
    let segs = (0..positions.len() - 1).map(|i| [i, i + 1]).collect();
    Mesh::from_segments(positions.to_vec(), segs, &[])
}

/// Polygonal disc mesh made of concentric rings around a center vertex.
///
/// Ring `r` (1-based, radius `r * radius / rings`) holds roughly `c * r`
/// vertices with `c` chosen so that the mesh has exactly `vertices`
/// vertices; `None` gives the hexagonal-like count `6 r`. Adjacent rings are
/// stitched by advancing along both rings in angle order.
pub fn build_disc(radius: f64, rings: usize, vertices: Option<usize>) -> Result<Mesh> {
    if rings == 0 || !(radius > 0.0) {
        return Err(MeshError::Invalid("disc needs radius > 0 and at least one ring".into()));
    }
    let total_ring = |c: f64| -> Vec<usize> {
        (1..=rings).map(|r| ((c * r as f64).round() as usize).max(3)).collect()
    };
    let counts: Vec<usize> = match vertices {
        None => (1..=rings).map(|r| 6 * r).collect(),
        Some(target) => {
            let want = target
                .checked_sub(1)
                .filter(|&w| w >= 3 * rings)
                .ok_or_else(|| MeshError::Invalid(format!("{target} vertices too few for {rings} rings")))?;
            let weight = (rings * (rings + 1) / 2) as f64;
            let mut counts = total_ring(want as f64 / weight);
            let have: usize = counts.iter().sum();
            let last = counts.len() - 1;
            counts[last] = (counts[last] as isize + want as isize - have as isize) as usize;
            if counts[last] < counts[last.saturating_sub(1)].max(3) {
                return Err(MeshError::Invalid(format!("cannot distribute {target} vertices over {rings} rings")));
            }
            counts
        }
    };

    let mut verts = vec![[0.0, 0.0]];
    let mut ring_ids: Vec<Vec<usize>> = Vec::with_capacity(rings);
    let mut ring_angles: Vec<Vec<f64>> = Vec::with_capacity(rings);
    for (r, &m) in counts.iter().enumerate() {
        let rad = radius * (r + 1) as f64 / rings as f64;
        // Stagger alternate rings by half a spacing for better angles.
        let shift = if r % 2 == 1 { 0.5 } else { 0.0 };
        let mut ids = Vec::with_capacity(m);
        let mut angles = Vec::with_capacity(m);
        for i in 0..m {
            let th = 2.0 * PI * (i as f64 + shift) / m as f64;
            ids.push(verts.len());
            angles.push(th);
            verts.push([rad * th.cos(), rad * th.sin()]);
        }
        ring_ids.push(ids);
        ring_angles.push(angles);
    }

    let mut tris = Vec::new();
    let first = &ring_ids[0];
    for i in 0..first.len() {
        tris.push([0, first[i], first[(i + 1) % first.len()]]);
    }
    for r in 1..rings {
        let (inner, outer) = (&ring_ids[r - 1], &ring_ids[r]);
        let (ta, tb) = (&ring_angles[r - 1], &ring_angles[r]);
        let (na, nb) = (inner.len(), outer.len());
        // Walk both rings in increasing (unwrapped) angle, starting from
        // inner[0] and the outer vertex closest to it in angle.
        let start_b = (0..nb)
            .min_by(|&x, &y| angle_gap(tb[x], ta[0]).total_cmp(&angle_gap(tb[y], ta[0])))
            .unwrap_or(0);
        let mut tb_unwrapped: Vec<f64> = Vec::with_capacity(nb);
        for q in 0..nb {
            let mut a = tb[(start_b + q) % nb];
            if q == 0 {
                a = ta[0] + (a - ta[0] + PI).rem_euclid(2.0 * PI) - PI;
            } else {
                while a <= tb_unwrapped[q - 1] {
                    a += 2.0 * PI;
                }
            }
            tb_unwrapped.push(a);
        }
        let anga = |i: usize| ta[i % na] + 2.0 * PI * (i / na) as f64;
        let angb = |q: usize| tb_unwrapped[q % nb] + 2.0 * PI * (q / nb) as f64;
        let ob = |q: usize| outer[(start_b + q) % nb];
        let (mut i, mut j) = (0usize, 0usize);
        while i < na || j < nb {
            let advance_inner = if i == na {
                false
            } else if j == nb {
                true
            } else {
                anga(i + 1) < angb(j + 1)
            };
            if advance_inner {
                tris.push([inner[i % na], ob(j), inner[(i + 1) % na]]);
                i += 1;
            } else {
                tris.push([inner[i % na], ob(j), ob(j + 1)]);
                j += 1;
            }
        }
    }
    Mesh::from_triangles(verts, tris, &[])
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let mut d = (a - b).rem_euclid(2.0 * PI);
    if d > PI {
        d = 2.0 * PI - d;
    }
    d
}

/// Dual-cell measures `|C_j|`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualGeometry {
    pub areas: Vec<f64>,
    pub total: f64,
}

/// Dual-cell measures from the barycentric dual: in 2D each triangle hands
/// every corner the quadrilateral (corner, edge midpoint, barycenter, edge
/// midpoint); in 1D each segment hands half its length to both ends.
pub fn dual_areas(mesh: &Mesh) -> DualGeometry {
    let v = mesh.vertices();
    let mut areas = vec![0.0; mesh.num_vertices()];
    match mesh.elements() {
        Elements::Segments(segs) => {
            for s in segs {
                let half = 0.5 * (v[s[1]][0] - v[s[0]][0]).abs();
                areas[s[0]] += half;
                areas[s[1]] += half;
            }
        }
        Elements::Triangles(tris) => {
            for t in tris {
                let g = [
                    (v[t[0]][0] + v[t[1]][0] + v[t[2]][0]) / 3.0,
                    (v[t[0]][1] + v[t[1]][1] + v[t[2]][1]) / 3.0,
                ];
                for c in 0..3 {
                    let (a, b, d) = (t[c], t[(c + 1) % 3], t[(c + 2) % 3]);
                    let m_ab = midpoint(v[a], v[b]);
                    let m_ad = midpoint(v[a], v[d]);
                    let quad = signed_area(v[a], m_ab, g) + signed_area(v[a], g, m_ad);
                    areas[a] += quad;
                }
            }
        }
    }
    let total = areas.iter().sum();
    DualGeometry { areas, total }
}

fn midpoint(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

/// Opposing angles across an interior edge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeAngles {
    pub edge: (usize, usize),
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityReport {
    pub interior_edges: Vec<EdgeAngles>,
    /// Edges whose stiffness off-diagonal is negative: interior edges with
    /// `alpha + beta > π` and boundary edges whose single opposing angle is
    /// obtuse.
    pub violations: Vec<(usize, usize)>,
    pub min_angle: f64,
    pub max_angle: f64,
    pub h_min: f64,
    pub h_max: f64,
}

/// Angle-condition report for a 2D mesh.
///
/// Violations are decided by the sign of the summed opposing cotangents,
/// which is the exact stiffness off-diagonal up to a factor 1/2; this keeps
/// the report consistent with the assembled matrix bit for bit.
pub fn quality_report(mesh: &Mesh) -> Result<QualityReport> {
    let Elements::Triangles(tris) = mesh.elements() else {
        return Err(MeshError::NotTwoDimensional);
    };
    let v = mesh.vertices();
    let mut opposite: BTreeMap<(usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    let mut min_angle = f64::INFINITY;
    let mut max_angle: f64 = 0.0;
    for t in tris {
        for c in 0..3 {
            let (apex, p, q) = (t[c], t[(c + 1) % 3], t[(c + 2) % 3]);
            let angle = angle_at(v[apex], v[p], v[q]);
            min_angle = min_angle.min(angle);
            max_angle = max_angle.max(angle);
            opposite
                .entry(ordered(p, q))
                .or_default()
                .push((angle, 0.5 * cot_at(v[apex], v[p], v[q])));
        }
    }
    let mut interior_edges = Vec::new();
    let mut violations = Vec::new();
    for (edge, entries) in opposite {
        let weight = entries.iter().fold(0.0, |acc, &(_, w)| acc + w);
        if let [(alpha, _), (beta, _)] = entries[..] {
            interior_edges.push(EdgeAngles { edge, alpha, beta });
        }
        if weight < 0.0 {
            violations.push(edge);
        }
    }
    Ok(QualityReport {
        interior_edges,
        violations,
        min_angle,
        max_angle,
        h_min: mesh.h_min(),
        h_max: mesh.h_max(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square_two_triangles() -> Mesh {
        Mesh::from_triangles(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
            &[],
        )
        .unwrap()
    }

    /// Two triangles sharing edge (0,1) whose opposing angles are both
    /// obtuse-ish: apexes sit close to the shared edge.
    pub(crate) fn obtuse_pair() -> Mesh {
        Mesh::from_triangles(
            vec![[0.0, 0.0], [2.0, 0.0], [1.0, 0.3], [1.0, -0.3]],
            vec![[0, 1, 2], [1, 0, 3]],
            &[],
        )
        .unwrap()
    }

    #[test]
    fn single_triangle_is_all_boundary() {
        let m = parse_mesh("2 3 1\n0 0\n1 0\n0 1\n0 1 2\n").unwrap();
        assert_eq!(m.num_vertices(), 3);
        assert_eq!(m.boundary().len(), 3);
        assert_eq!(m.dim(), 2);
    }

    #[test]
    fn out_of_range_index_is_parse_error() {
        let err = parse_mesh("2 4 1\n0 0\n1 0\n1 1\n0 1\n0 1 7\n").unwrap_err();
        assert!(matches!(err, MeshError::Parse { line: 6, .. }), "{err}");
    }

    #[test]
    fn unit_square_connectivity() {
        let m = parse_mesh(
            "# unit square\n2 4 2\n0 0\n1 0\n1 1\n0 1\n0 1 2\n0 2 3\n",
        )
        .unwrap();
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.boundary().iter().copied().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(m, unit_square_two_triangles());
    }

    #[test]
    fn clockwise_triangles_are_reoriented() {
        let m = Mesh::from_triangles(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]], vec![[0, 1, 2]], &[]).unwrap();
        let Elements::Triangles(t) = m.elements() else { unreachable!() };
        assert!(m.triangle_area(&t[0]) > 0.0);
    }

    #[test]
    fn degenerate_and_disconnected_meshes_are_rejected() {
        let flat = Mesh::from_triangles(
            vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
            vec![[0, 1, 2]],
            &[],
        );
        assert!(matches!(flat, Err(MeshError::Degenerate { .. })));

        let split = Mesh::from_triangles(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0], [6.0, 5.0], [5.0, 6.0]],
            vec![[0, 1, 2], [3, 4, 5]],
            &[],
        );
        assert!(matches!(split, Err(MeshError::Disconnected { components: 2 })));

        let orphan = Mesh::from_segments(vec![0.0, 1.0, 2.0], vec![[0, 1]], &[]);
        assert!(matches!(orphan, Err(MeshError::Disconnected { .. })));
    }

    #[test]
    fn explicit_markers_extend_boundary() {
        let m = parse_mesh("1 3 2\n0\n0.5\n1\n0 1\n1 2\nboundary 1\n").unwrap();
        assert_eq!(m.boundary().len(), 3);
        assert!(parse_mesh("1 3 2\n0\n0.5\n1\n0 1\n1 2\nboundary 9\n").is_err());
        assert!(parse_mesh("1 3 2\n0\n0.5\n1\n0 1\n1 2\nedge 1\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let m = build_structured_unit_square(3, [-0.5, -0.5]);
        assert_eq!(parse_mesh(&m.to_text()).unwrap(), m);
        let l = build_1d_mesh(&[0.0, 0.1, 0.3]).unwrap();
        assert_eq!(parse_mesh(&l.to_text()).unwrap(), l);
    }

    #[test]
    fn structured_counts_and_measure() {
        let m = build_structured_unit_square(1, [0.0, 0.0]);
        assert_eq!((m.num_vertices(), m.num_elements()), (4, 2));
        let m = build_structured_unit_square(2, [0.0, 0.0]);
        assert_eq!((m.num_vertices(), m.num_elements()), (9, 8));
        assert!((dual_areas(&m).total - 1.0).abs() < 1e-12);

        let m = build_structured_unit_square(16, [-0.5, -0.5]);
        let (lo, hi) = m.vertices().iter().fold(([f64::MAX; 2], [f64::MIN; 2]), |(lo, hi), v| {
            ([lo[0].min(v[0]), lo[1].min(v[1])], [hi[0].max(v[0]), hi[1].max(v[1])])
        });
        assert_eq!((lo, hi), ([-0.5, -0.5], [0.5, 0.5]));
        assert_eq!(m.boundary().len(), 64);
    }

    #[test]
    fn one_d_meshes() {
        let m = build_1d_mesh(&[0.0, 0.5, 1.0]).unwrap();
        assert_eq!((m.num_vertices(), m.num_elements()), (3, 2));
        assert_eq!(m.boundary().iter().copied().collect::<Vec<_>>(), vec![0, 2]);

        let m = build_1d_mesh(&[0.0, 0.1, 0.3]).unwrap();
        let Elements::Segments(s) = m.elements() else { unreachable!() };
        let lens: Vec<f64> = s.iter().map(|e| m.vertex(e[1])[0] - m.vertex(e[0])[0]).collect();
        assert_eq!(lens, vec![0.1, 0.3 - 0.1]);

        assert!(matches!(build_1d_mesh(&[0.0, 1.0, 0.5]), Err(MeshError::NonMonotone { index: 2 })));
        assert!(build_1d_mesh(&[0.0]).is_err());
    }

    #[test]
    fn dual_areas_examples() {
        let m = build_1d_mesh(&[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(dual_areas(&m).areas, vec![0.25, 0.5, 0.25]);

        let m = Mesh::from_triangles(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]], &[]).unwrap();
        for a in dual_areas(&m).areas {
            assert!((a - 1.0 / 6.0).abs() < 1e-15);
        }

        for n in [1, 2, 5, 8] {
            assert!((dual_areas(&build_structured_unit_square(n, [0.3, -2.0])).total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quality_of_structured_mesh() {
        let m = build_structured_unit_square(4, [0.0, 0.0]);
        let q = quality_report(&m).unwrap();
        assert!(q.violations.is_empty());
        for e in &q.interior_edges {
            assert!((e.alpha + e.beta - PI).abs() < 1e-12 || e.alpha + e.beta < PI);
        }
        assert!((q.max_angle - PI / 2.0).abs() < 1e-12);
        assert!((q.min_angle - PI / 4.0).abs() < 1e-12);
        assert!((q.h_max - 0.25 * 2f64.sqrt()).abs() < 1e-12);
        assert!((q.h_min - 0.25 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn quality_flags_obtuse_pair() {
        let q = quality_report(&obtuse_pair()).unwrap();
        assert_eq!(q.violations, vec![(0, 1)]);
        let e = q.interior_edges.iter().find(|e| e.edge == (0, 1)).unwrap();
        assert!(e.alpha + e.beta > PI);
    }

    #[test]
    fn quality_single_triangle_and_1d() {
        let m = Mesh::from_triangles(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]], &[]).unwrap();
        let q = quality_report(&m).unwrap();
        assert!(q.interior_edges.is_empty() && q.violations.is_empty());
        let l = build_1d_mesh(&[0.0, 1.0]).unwrap();
        assert!(matches!(quality_report(&l), Err(MeshError::NotTwoDimensional)));
    }

    #[test]
    fn disc_meshes() {
        let d = build_disc(1.0, 5, Some(80)).unwrap();
        assert_eq!(d.num_vertices(), 80);
        let area = d.measure();
        assert!(area < PI && area > 0.9 * PI, "{area}");
        assert!((dual_areas(&d).total - area).abs() < 1e-12);

        let d = build_disc(3e-6, 18, None).unwrap();
        assert_eq!(d.num_vertices(), 1 + 3 * 18 * 19);
        // Outer ring is the structural boundary.
        assert_eq!(d.boundary().len(), 6 * 18);
    }
}
