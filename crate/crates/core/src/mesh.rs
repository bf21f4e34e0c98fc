//! Conforming triangular meshes with Dirichlet/Neumann boundary markers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub type Point = [f64; 2];

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mesh invariant violated: {0}")]
    InvariantViolation(String),
    #[error("Neumann vertex {vertex} has no interior neighbour sharing a cell")]
    MissingInteriorNeighbour { vertex: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Marker {
    Dirichlet,
    Neumann,
}

impl Marker {
    fn tag(self) -> char {
        match self {
            Marker::Dirichlet => 'D',
            Marker::Neumann => 'N',
        }
    }
}

/// An edge of the triangulation.
///
/// `cells.0` is the adjacent cell with the lower index; the global normal of
/// an interior facet points from `cells.0` into `cells.1`, boundary normals
/// point outward.
#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    pub vertices: [usize; 2],
    pub cells: (usize, Option<usize>),
    pub marker: Option<Marker>,
}

impl Facet {
    pub fn is_boundary(&self) -> bool {
        self.cells.1.is_none()
    }
}

/// Which diagonal splits each square of a structured mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Diagonal {
    /// Lower-left to upper-right, aligned with `x = y`.
    Forward,
    /// Upper-left to lower-right.
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rectangle {
    pub min: Point,
    pub max: Point,
}

impl Rectangle {
    pub const UNIT: Rectangle = Rectangle {
        min: [0.0, 0.0],
        max: [1.0, 1.0],
    };

    pub fn new(min: Point, max: Point) -> Self {
        Self { min, max }
    }

    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point>,
    cells: Vec<[usize; 3]>,
    facets: Vec<Facet>,
    /// Local facet `i` of a cell is the edge opposite its local vertex `i`.
    cell_facets: Vec<[usize; 3]>,
    vertex_cell_offsets: Vec<usize>,
    vertex_cell_list: Vec<usize>,
    h_max: f64,
}

impl PartialEq for Mesh {
    fn eq(&self, other: &Self) -> bool {
        self.vertices == other.vertices && self.cells == other.cells && self.facets == other.facets
    }
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

pub fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl Mesh {
    /// Builds a mesh and checks orientation, conformity and boundary marking.
    ///
    /// `boundary` must list every boundary edge exactly once (in either vertex
    /// order) and nothing else.
    pub fn new(
        vertices: Vec<Point>,
        cells: Vec<[usize; 3]>,
        boundary: &[([usize; 2], Marker)],
    ) -> Result<Self, MeshError> {
        let nv = vertices.len();
        for (c, cell) in cells.iter().enumerate() {
            if cell.iter().any(|&v| v >= nv) {
                return Err(MeshError::InvariantViolation(format!(
                    "cell {c} references a vertex out of range"
                )));
            }
            if cell[0] == cell[1] || cell[1] == cell[2] || cell[0] == cell[2] {
                return Err(MeshError::InvariantViolation(format!(
                    "cell {c} repeats a vertex"
                )));
            }
            let area = signed_area(vertices[cell[0]], vertices[cell[1]], vertices[cell[2]]);
            if !(area > 0.0) {
                return Err(MeshError::InvariantViolation(format!(
                    "cell {c} is not counter-clockwise (signed area {area:e})"
                )));
            }
        }

        let mut facet_of_edge: HashMap<(usize, usize), usize> = HashMap::new();
        let mut facets: Vec<Facet> = Vec::new();
        let mut cell_facets = vec![[0usize; 3]; cells.len()];
        for (c, cell) in cells.iter().enumerate() {
            for i in 0..3 {
                let a = cell[(i + 1) % 3];
                let b = cell[(i + 2) % 3];
                let key = edge_key(a, b);
                let f = match facet_of_edge.get(&key) {
                    Some(&f) => {
                        let facet = &mut facets[f];
                        if facet.cells.1.is_some() {
                            return Err(MeshError::InvariantViolation(format!(
                                "edge ({}, {}) is shared by more than two cells",
                                key.0, key.1
                            )));
                        }
                        facet.cells.1 = Some(c);
                        f
                    }
                    None => {
                        facets.push(Facet {
                            vertices: [key.0, key.1],
                            cells: (c, None),
                            marker: None,
                        });
                        facet_of_edge.insert(key, facets.len() - 1);
                        facets.len() - 1
                    }
                };
                cell_facets[c][i] = f;
            }
        }

        for &([a, b], marker) in boundary {
            let key = edge_key(a, b);
            let Some(&f) = facet_of_edge.get(&key) else {
                return Err(MeshError::InvariantViolation(format!(
                    "marked edge ({a}, {b}) is not an edge of the mesh"
                )));
            };
            let facet = &mut facets[f];
            if !facet.is_boundary() {
                return Err(MeshError::InvariantViolation(format!(
                    "marked edge ({a}, {b}) is an interior facet"
                )));
            }
            if facet.marker.is_some() {
                return Err(MeshError::InvariantViolation(format!(
                    "boundary edge ({a}, {b}) is marked twice"
                )));
            }
            facet.marker = Some(marker);
        }
        if let Some(f) = facets
            .iter()
            .find(|f| f.is_boundary() && f.marker.is_none())
        {
            return Err(MeshError::InvariantViolation(format!(
                "boundary edge ({}, {}) carries no marker",
                f.vertices[0], f.vertices[1]
            )));
        }

        let mut counts = vec![0usize; nv + 1];
        for cell in &cells {
            for &v in cell {
                counts[v + 1] += 1;
            }
        }
        for v in 0..nv {
            counts[v + 1] += counts[v];
        }
        let mut fill = counts.clone();
        let mut list = vec![0usize; counts[nv]];
        for (c, cell) in cells.iter().enumerate() {
            for &v in cell {
                list[fill[v]] = c;
                fill[v] += 1;
            }
        }

        let h_max = cells
            .iter()
            .map(|cell| {
                let [a, b, c] = cell.map(|v| vertices[v]);
                dist(a, b).max(dist(b, c)).max(dist(c, a))
            })
            .fold(0.0, f64::max);

        Ok(Self {
            vertices,
            cells,
            facets,
            cell_facets,
            vertex_cell_offsets: counts,
            vertex_cell_list: list,
            h_max,
        })
    }

    /// `nx * nx` squares on `domain`, each cut into two triangles; boundary
    /// facets are marked by `marker(midpoint)`.
    pub fn structured(
        nx: usize,
        domain: Rectangle,
        diagonal: Diagonal,
        marker: impl Fn(Point) -> Marker,
    ) -> Self {
        assert!(nx >= 1, "structured mesh needs at least one cell per side");
        let n = nx + 1;
        let [x0, y0] = domain.min;
        let [x1, y1] = domain.max;
        let mut vertices = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let x = x0 + (x1 - x0) * i as f64 / nx as f64;
                let y = y0 + (y1 - y0) * j as f64 / nx as f64;
                vertices.push([x, y]);
            }
        }
        let id = |i: usize, j: usize| j * n + i;
        let mut cells = Vec::with_capacity(2 * nx * nx);
        for j in 0..nx {
            for i in 0..nx {
                let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
                match diagonal {
                    Diagonal::Forward => {
                        cells.push([a, b, c]);
                        cells.push([a, c, d]);
                    }
                    Diagonal::Backward => {
                        cells.push([a, b, d]);
                        cells.push([b, c, d]);
                    }
                }
            }
        }
        let mut boundary = Vec::with_capacity(4 * nx);
        let mut mark = |a: usize, b: usize| {
            let (p, q) = (vertices[a], vertices[b]);
            let mid = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
            boundary.push(([a, b], marker(mid)));
        };
        for i in 0..nx {
            mark(id(i, 0), id(i + 1, 0));
            mark(id(i, nx), id(i + 1, nx));
            mark(id(0, i), id(0, i + 1));
            mark(id(nx, i), id(nx, i + 1));
        }
        Self::new(vertices, cells, &boundary).expect("structured mesh is valid by construction")
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn cells(&self) -> &[[usize; 3]] {
        &self.cells
    }

    pub fn facets(&self) -> &[Facet] {
        &self.facets
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_facets(&self) -> usize {
        self.facets.len()
    }

    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn cell_facets(&self, cell: usize) -> [usize; 3] {
        self.cell_facets[cell]
    }

    pub fn cell_points(&self, cell: usize) -> [Point; 3] {
        self.cells[cell].map(|v| self.vertices[v])
    }

    pub fn cell_area(&self, cell: usize) -> f64 {
        let [a, b, c] = self.cell_points(cell);
        signed_area(a, b, c)
    }

    pub fn cell_centroid(&self, cell: usize) -> Point {
        let [a, b, c] = self.cell_points(cell);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    pub fn cell_diameter(&self, cell: usize) -> f64 {
        let [a, b, c] = self.cell_points(cell);
        dist(a, b).max(dist(b, c)).max(dist(c, a))
    }

    pub fn facet_length(&self, facet: usize) -> f64 {
        let [a, b] = self.facets[facet].vertices;
        dist(self.vertices[a], self.vertices[b])
    }

    pub fn facet_midpoint(&self, facet: usize) -> Point {
        let [a, b] = self.facets[facet].vertices.map(|v| self.vertices[v]);
        [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
    }

    /// Unit normal of `facet` in its global orientation.
    pub fn facet_normal(&self, facet: usize) -> Point {
        let f = &self.facets[facet];
        let [a, b] = f.vertices.map(|v| self.vertices[v]);
        let len = dist(a, b);
        let mut n = [(b[1] - a[1]) / len, -(b[0] - a[0]) / len];
        // orient outward from cells.0: the opposite vertex must lie behind the facet
        let cell = self.cells[f.cells.0];
        let opp = cell
            .iter()
            .copied()
            .find(|v| !f.vertices.contains(v))
            .expect("triangle has a vertex off each edge");
        let p = self.vertices[opp];
        if (p[0] - a[0]) * n[0] + (p[1] - a[1]) * n[1] > 0.0 {
            n = [-n[0], -n[1]];
        }
        n
    }

    /// +1 when the global normal of local facet `i` points out of `cell`.
    pub fn facet_sign(&self, cell: usize, local: usize) -> f64 {
        let f = self.cell_facets[cell][local];
        if self.facets[f].cells.0 == cell {
            1.0
        } else {
            -1.0
        }
    }

    /// Cells containing vertex `v`, in increasing index order.
    pub fn vertex_cells(&self, v: usize) -> &[usize] {
        &self.vertex_cell_list[self.vertex_cell_offsets[v]..self.vertex_cell_offsets[v + 1]]
    }

    pub fn domain_area(&self) -> f64 {
        (0..self.num_cells()).map(|c| self.cell_area(c)).sum()
    }

    /// Boundary facets as `(vertices, marker)`, in facet order.
    pub fn boundary_facets(&self) -> Vec<([usize; 2], Marker)> {
        self.facets
            .iter()
            .filter_map(|f| f.marker.map(|m| (f.vertices, m)))
            .collect()
    }

    pub fn vertex_classes(&self) -> Vec<VertexClass> {
        let mut class = vec![VertexClass::Interior; self.num_vertices()];
        for f in self.facets.iter().filter(|f| f.is_boundary()) {
            for &v in &f.vertices {
                if f.marker == Some(Marker::Dirichlet) {
                    class[v] = VertexClass::Dirichlet;
                } else if class[v] == VertexClass::Interior {
                    class[v] = VertexClass::Neumann;
                }
            }
        }
        class
    }

    /// Returns the index of a cell containing `p` (within `tol` in
    /// barycentric coordinates), preferring the lowest index.
    pub fn locate(&self, p: Point, tol: f64) -> Option<usize> {
        (0..self.num_cells()).find(|&c| {
            let l = barycentric(&self.cell_points(c), p);
            l.iter().all(|&x| x >= -tol)
        })
    }

    /// Uniform red refinement; see [`Mesh::refine_with_parents`].
    pub fn uniform_refine(&self) -> Mesh {
        self.refine_with_parents().0
    }

    /// Splits every cell into four congruent children through the edge
    /// midpoints. Returns the refined mesh and, per child cell, its parent.
    ///
    /// New vertex `num_vertices() + f` is the midpoint of facet `f`.
    pub fn refine_with_parents(&self) -> (Mesh, Vec<usize>) {
        let nv = self.num_vertices();
        let mut vertices = self.vertices.clone();
        vertices.extend((0..self.num_facets()).map(|f| self.facet_midpoint(f)));
        let mut cells = Vec::with_capacity(4 * self.num_cells());
        let mut parents = Vec::with_capacity(4 * self.num_cells());
        for (c, &[a, b, cc]) in self.cells.iter().enumerate() {
            let [fa, fb, fc] = self.cell_facets[c];
            // midpoint opposite local vertex i
            let (m_bc, m_ca, m_ab) = (nv + fa, nv + fb, nv + fc);
            cells.push([a, m_ab, m_ca]);
            cells.push([m_ab, b, m_bc]);
            cells.push([m_ca, m_bc, cc]);
            cells.push([m_ab, m_bc, m_ca]);
            parents.extend([c; 4]);
        }
        let mut boundary = Vec::new();
        for (f, facet) in self.facets.iter().enumerate() {
            if let Some(m) = facet.marker {
                let [a, b] = facet.vertices;
                boundary.push(([a, nv + f], m));
                boundary.push(([nv + f, b], m));
            }
        }
        let mesh = Mesh::new(vertices, cells, &boundary).expect("refinement preserves validity");
        (mesh, parents)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Mesh, MeshError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("pbmix-mesh 1\n");
        let _ = writeln!(out, "vertices {}", self.vertices.len());
        for [x, y] in &self.vertices {
            let _ = writeln!(out, "{x:?} {y:?}");
        }
        let _ = writeln!(out, "cells {}", self.cells.len());
        for [a, b, c] in &self.cells {
            let _ = writeln!(out, "{a} {b} {c}");
        }
        let boundary = self.boundary_facets();
        let _ = writeln!(out, "boundary {}", boundary.len());
        for ([a, b], m) in boundary {
            let _ = writeln!(out, "{a} {b} {}", m.tag());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Mesh, MeshError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let last_line = text.lines().count().max(1);
        let err = |line: usize, message: String| MeshError::Parse { line, message };
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| {
                err(
                    last_line,
                    format!("unexpected end of file, expected {what}"),
                )
            })
        };

        let (ln, header) = next("header")?;
        if header.split_whitespace().collect::<Vec<_>>() != ["pbmix-mesh", "1"] {
            return Err(err(ln, format!("bad header {header:?}")));
        }

        fn section(ln: usize, line: &str, name: &str) -> Result<usize, MeshError> {
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(n), Some(count), None) if n == name => {
                    count.parse().map_err(|_| MeshError::Parse {
                        line: ln,
                        message: format!("bad {name} count {count:?}"),
                    })
                }
                _ => Err(MeshError::Parse {
                    line: ln,
                    message: format!("expected `{name} <count>`, found {line:?}"),
                }),
            }
        }

        fn fields<const N: usize>(ln: usize, line: &str) -> Result<[&str; N], MeshError> {
            let parts: Vec<&str> = line.split_whitespace().collect();
            parts.try_into().map_err(|_| MeshError::Parse {
                line: ln,
                message: format!("expected {N} fields, found {line:?}"),
            })
        }

        let (ln, l) = next("vertices section")?;
        let nv = section(ln, l, "vertices")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, l) = next("vertex")?;
            let [x, y] = fields::<2>(ln, l)?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(ln, format!("bad coordinate {s:?}")))
            };
            vertices.push([parse(x)?, parse(y)?]);
        }

        let (ln, l) = next("cells section")?;
        let nc = section(ln, l, "cells")?;
        let mut cells = Vec::with_capacity(nc);
        for _ in 0..nc {
            let (ln, l) = next("cell")?;
            let f = fields::<3>(ln, l)?;
            let mut cell = [0usize; 3];
            for (slot, s) in cell.iter_mut().zip(f) {
                *slot = s
                    .parse()
                    .ok()
                    .filter(|&v| v < nv)
                    .ok_or_else(|| err(ln, format!("bad vertex index {s:?}")))?;
            }
            cells.push(cell);
        }

        let (ln, l) = next("boundary section")?;
        let nb = section(ln, l, "boundary")?;
        let mut boundary = Vec::with_capacity(nb);
        let mut marked_lines = HashMap::new();
        for _ in 0..nb {
            let (ln, l) = next("boundary facet")?;
            let [a, b, m] = fields::<3>(ln, l)?;
            let idx = |s: &str| {
                s.parse::<usize>()
                    .ok()
                    .filter(|&v| v < nv)
                    .ok_or_else(|| err(ln, format!("bad vertex index {s:?}")))
            };
            let marker = match m {
                "D" => Marker::Dirichlet,
                "N" => Marker::Neumann,
                _ => return Err(err(ln, format!("unknown marker {m:?}"))),
            };
            let (a, b) = (idx(a)?, idx(b)?);
            marked_lines.insert(edge_key(a, b), ln);
            boundary.push(([a, b], marker));
        }
        if let Some((ln, l)) = lines.next() {
            return Err(err(ln, format!("trailing content {l:?}")));
        }

        // Unmarked boundary edges are a format error, not a geometric one.
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for cell in &cells {
            for i in 0..3 {
                *edge_count
                    .entry(edge_key(cell[i], cell[(i + 1) % 3]))
                    .or_default() += 1;
            }
        }
        let mut unmarked: Vec<_> = edge_count
            .iter()
            .filter(|(e, &n)| n == 1 && !marked_lines.contains_key(e))
            .map(|(e, _)| *e)
            .collect();
        unmarked.sort_unstable();
        if let Some((a, b)) = unmarked.first() {
            return Err(err(
                last_line,
                format!("boundary edge ({a}, {b}) has no marker line"),
            ));
        }

        Mesh::new(vertices, cells, &boundary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexClass {
    Interior,
    /// On the boundary, touching only Neumann facets.
    Neumann,
    /// On the closure of the Dirichlet boundary.
    Dirichlet,
}

/// Barycentric coordinates of `p` with respect to triangle `t`.
pub fn barycentric(t: &[Point; 3], p: Point) -> [f64; 3] {
    let area = signed_area(t[0], t[1], t[2]);
    let l0 = signed_area(p, t[1], t[2]) / area;
    let l1 = signed_area(t[0], p, t[2]) / area;
    [l0, l1, 1.0 - l0 - l1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchKind {
    Interior,
    /// Neumann vertex borrowing the patch of interior vertex `anchor`.
    Redirected {
        anchor: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertexPatch {
    pub vertex: usize,
    pub cells: Vec<usize>,
    pub kind: PatchKind,
}

/// One patch per interior and Neumann vertex, in vertex order. Dirichlet
/// vertices are skipped. A Neumann vertex takes the patch of the
/// lowest-indexed interior vertex it shares a cell with.
pub fn vertex_patches(mesh: &Mesh) -> Result<Vec<VertexPatch>, MeshError> {
    let class = mesh.vertex_classes();
    let mut patches = Vec::new();
    for (v, &cl) in class.iter().enumerate() {
        match cl {
            VertexClass::Dirichlet => {}
            VertexClass::Interior => patches.push(VertexPatch {
                vertex: v,
                cells: mesh.vertex_cells(v).to_vec(),
                kind: PatchKind::Interior,
            }),
            VertexClass::Neumann => {
                let anchor = mesh
                    .vertex_cells(v)
                    .iter()
                    .flat_map(|&c| mesh.cells()[c])
                    .filter(|&w| class[w] == VertexClass::Interior)
                    .min()
                    .ok_or(MeshError::MissingInteriorNeighbour { vertex: v })?;
                patches.push(VertexPatch {
                    vertex: v,
                    cells: mesh.vertex_cells(anchor).to_vec(),
                    kind: PatchKind::Redirected { anchor },
                });
            }
        }
    }
    Ok(patches)
}
