//! Conforming triangulations with newest-vertex bisection.
//!
//! Triangles are stored as `[newest, a, b]` in counter-clockwise order; the
//! refinement edge is always `(a, b)`, the edge opposite the newest vertex.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

static NEXT_MESH_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MESH_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    UnitSquare,
    LShape,
    CheckerboardSquare,
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit_square" => Ok(Domain::UnitSquare),
            "l_shape" => Ok(Domain::LShape),
            "checkerboard_square" => Ok(Domain::CheckerboardSquare),
            other => Err(Error::UnknownDomain(other.to_string())),
        }
    }
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::UnitSquare => "unit_square",
            Domain::LShape => "l_shape",
            Domain::CheckerboardSquare => "checkerboard_square",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    /// Endpoints, sorted ascending.
    pub vertices: [usize; 2],
    /// First incident triangle and, for interior edges, the second one.
    pub triangles: [usize; 2],
    pub interior: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub marker: i32,
}

/// Parent map of a mesh produced by [`TriangleMesh::refine_bisection`].
#[derive(Debug, Clone, PartialEq)]
pub struct Genealogy {
    pub parent_id: u64,
    pub parent_vertex_count: usize,
    /// For every triangle, the triangle of the parent mesh that contains it.
    pub parent: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    regions: Vec<i32>,
    boundary: Vec<BoundaryEdge>,
    edges: Vec<Edge>,
    tri_edges: Vec<[usize; 3]>,
    edge_lookup: HashMap<[usize; 2], usize>,
    vertex_tri_offsets: Vec<usize>,
    vertex_tri_list: Vec<usize>,
    id: u64,
    genealogy: Option<Genealogy>,
}

/// The support of the hat function of one vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexPatch {
    pub vertex: usize,
    pub triangles: Vec<usize>,
    /// Edges through the vertex that are interior to the domain; these are the
    /// edges strictly inside the patch.
    pub interior_edges: Vec<usize>,
    pub diameter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshStats {
    /// Smallest interior angle in degrees.
    pub min_angle: f64,
    /// Largest number of patches (self included) meeting a given patch.
    pub max_overlap: usize,
    pub h_max: f64,
    pub h_min: f64,
}

fn sorted(a: usize, b: usize) -> [usize; 2] {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

fn dist2(p: Point, q: Point) -> f64 {
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
}

fn signed_area(p: Point, q: Point, r: Point) -> f64 {
    0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
}

impl TriangleMesh {
    /// Builds a mesh from raw arrays, keeping the vertex order of each triangle
    /// (so the refinement edge is `(t[1], t[2])`), and checks every invariant.
    pub fn new(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        regions: Vec<i32>,
        boundary: Vec<BoundaryEdge>,
    ) -> Result<Self> {
        let mesh = Self::assemble(vertices, triangles, regions, boundary, None)?;
        mesh.validate()?;
        Ok(mesh)
    }

    fn assemble(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        regions: Vec<i32>,
        boundary: Vec<BoundaryEdge>,
        genealogy: Option<Genealogy>,
    ) -> Result<Self> {
        if regions.len() != triangles.len() {
            return Err(Error::DimensionMismatch {
                expected: triangles.len(),
                got: regions.len(),
            });
        }
        let nv = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= nv {
                    return Err(Error::MeshInvariant {
                        invariant: "vertex index",
                        detail: format!("triangle {t} references vertex {v} of {nv}"),
                    });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::MeshInvariant {
                    invariant: "positive orientation",
                    detail: format!("triangle {t} has repeated vertices"),
                });
            }
        }
        for b in &boundary {
            if b.vertices[0] >= nv || b.vertices[1] >= nv {
                return Err(Error::MeshInvariant {
                    invariant: "vertex index",
                    detail: format!("boundary edge {:?} out of range", b.vertices),
                });
            }
        }

        let mut edges: Vec<Edge> = Vec::with_capacity(triangles.len() * 3 / 2 + 4);
        let mut edge_lookup: HashMap<[usize; 2], usize> = HashMap::with_capacity(edges.capacity());
        let mut tri_edges = Vec::with_capacity(triangles.len());
        let mut overfull = None;
        for (t, tri) in triangles.iter().enumerate() {
            let mut te = [0usize; 3];
            for (i, slot) in te.iter_mut().enumerate() {
                let key = sorted(tri[(i + 1) % 3], tri[(i + 2) % 3]);
                let e = *edge_lookup.entry(key).or_insert_with(|| {
                    edges.push(Edge {
                        vertices: key,
                        triangles: [t, usize::MAX],
                        interior: false,
                    });
                    edges.len() - 1
                });
                if edges[e].triangles[0] != t {
                    if edges[e].interior {
                        overfull.get_or_insert(e);
                    } else {
                        edges[e].triangles[1] = t;
                        edges[e].interior = true;
                    }
                }
                *slot = e;
            }
            tri_edges.push(te);
        }
        if let Some(e) = overfull {
            return Err(Error::MeshInvariant {
                invariant: "conformity",
                detail: format!("edge {:?} is shared by more than two triangles", edges[e].vertices),
            });
        }

        let mut counts = vec![0usize; nv + 1];
        for tri in &triangles {
            for &v in tri {
                counts[v + 1] += 1;
            }
        }
        for i in 0..nv {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut list = vec![0usize; counts[nv]];
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                list[fill[v]] = t;
                fill[v] += 1;
            }
        }

        Ok(Self {
            vertices,
            triangles,
            regions,
            boundary,
            edges,
            tri_edges,
            edge_lookup,
            vertex_tri_offsets: counts,
            vertex_tri_list: list,
            id: fresh_id(),
            genealogy,
        })
    }

    /// Checks orientation, conformity and closure (no hanging nodes).
    pub fn validate(&self) -> Result<()> {
        for (t, _) in self.triangles.iter().enumerate() {
            let a = self.area(t);
            if !(a > 0.0) {
                return Err(Error::MeshInvariant {
                    invariant: "positive orientation",
                    detail: format!("triangle {t} has signed area {a:e}"),
                });
            }
        }
        let mut marked: HashMap<[usize; 2], i32> = HashMap::with_capacity(self.boundary.len());
        for b in &self.boundary {
            let key = sorted(b.vertices[0], b.vertices[1]);
            if marked.insert(key, b.marker).is_some() {
                return Err(Error::MeshInvariant {
                    invariant: "conformity",
                    detail: format!("boundary edge {key:?} listed twice"),
                });
            }
        }
        for e in &self.edges {
            let on_list = marked.contains_key(&e.vertices);
            if !e.interior && !on_list {
                return Err(Error::MeshInvariant {
                    invariant: "conformity",
                    detail: format!(
                        "edge {:?} has a single incident triangle but is not a boundary edge (hanging node)",
                        e.vertices
                    ),
                });
            }
            if e.interior && on_list {
                return Err(Error::MeshInvariant {
                    invariant: "conformity",
                    detail: format!("boundary edge {:?} is shared by two triangles", e.vertices),
                });
            }
        }
        if marked.len() != self.edges.iter().filter(|e| !e.interior).count() {
            return Err(Error::MeshInvariant {
                invariant: "conformity",
                detail: "boundary list contains edges that are not mesh edges".into(),
            });
        }
        Ok(())
    }

    /// One of the built-in domains subdivided `n0` times per unit length.
    ///
    /// * `unit_square`: `(0,1)^2`, `n0 x n0` squares.
    /// * `l_shape`: `(-1,1)^2` minus `[0,1] x [-1,0]`, each of its three unit
    ///   squares split `n0 x n0`.
    /// * `checkerboard_square`: `(0,1)^2` on a `2 n0 x 2 n0` grid with region
    ///   ids `0..4` on the four quadrants.
    ///
    /// Every square is split along its `(i,j)-(i+1,j+1)` diagonal and the
    /// refinement edge is the longest edge of each triangle.
    pub fn builtin(domain: Domain, n0: usize) -> Result<Self> {
        if n0 == 0 {
            return Err(Error::InvalidArgument("n0 must be at least 1".into()));
        }
        let (cells, origin, width, keep): (usize, Point, f64, Box<dyn Fn(Point) -> bool>) = match domain {
            Domain::UnitSquare => (n0, [0.0, 0.0], 1.0, Box::new(|_| true)),
            Domain::CheckerboardSquare => (2 * n0, [0.0, 0.0], 1.0, Box::new(|_| true)),
            Domain::LShape => (
                2 * n0,
                [-1.0, -1.0],
                2.0,
                Box::new(|c: Point| !(c[0] > 0.0 && c[1] < 0.0)),
            ),
        };
        let coord = |i: usize| origin[0] + width * i as f64 / cells as f64;
        let coord_y = |j: usize| origin[1] + width * j as f64 / cells as f64;
        let mut index = vec![usize::MAX; (cells + 1) * (cells + 1)];
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut regions = Vec::new();
        let mut vid = |i: usize, j: usize, vertices: &mut Vec<Point>| {
            let slot = &mut index[j * (cells + 1) + i];
            if *slot == usize::MAX {
                *slot = vertices.len();
                vertices.push([coord(i), coord_y(j)]);
            }
            *slot
        };
        for j in 0..cells {
            for i in 0..cells {
                let center = [
                    0.5 * (coord(i) + coord(i + 1)),
                    0.5 * (coord_y(j) + coord_y(j + 1)),
                ];
                if !keep(center) {
                    continue;
                }
                let v00 = vid(i, j, &mut vertices);
                let v10 = vid(i + 1, j, &mut vertices);
                let v11 = vid(i + 1, j + 1, &mut vertices);
                let v01 = vid(i, j + 1, &mut vertices);
                let region = match domain {
                    Domain::CheckerboardSquare => {
                        (if center[0] > 0.5 { 1 } else { 0 }) + (if center[1] > 0.5 { 2 } else { 0 })
                    }
                    _ => 0,
                };
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
                regions.push(region);
                regions.push(region);
            }
        }
        for tri in triangles.iter_mut() {
            *tri = longest_edge_order(&vertices, *tri);
        }
        let mut mesh = Self::assemble(vertices, triangles, regions, Vec::new(), None)?;
        mesh.boundary = mesh
            .edges
            .iter()
            .filter(|e| !e.interior)
            .map(|e| BoundaryEdge {
                vertices: e.vertices,
                marker: 1,
            })
            .collect();
        mesh.validate()?;
        Ok(mesh)
    }

    /// Re-orders every triangle so that its longest edge is the refinement
    /// edge (ties broken by the smallest opposite vertex index).
    pub fn with_longest_edge_refinement(&self) -> Result<Self> {
        let triangles = self
            .triangles
            .iter()
            .map(|&t| longest_edge_order(&self.vertices, t))
            .collect();
        Self::new(
            self.vertices.clone(),
            triangles,
            self.regions.clone(),
            self.boundary.clone(),
        )
    }

    pub fn id(&self) -> u64 {
        self.id
    }
    pub fn genealogy(&self) -> Option<&Genealogy> {
        self.genealogy.as_ref()
    }
    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }
    pub fn regions(&self) -> &[i32] {
        &self.regions
    }
    pub fn boundary(&self) -> &[BoundaryEdge] {
        &self.boundary
    }
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }
    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
    /// Edge opposite local vertex `i` of triangle `t`.
    pub fn triangle_edges(&self, t: usize) -> [usize; 3] {
        self.tri_edges[t]
    }
    pub fn find_edge(&self, a: usize, b: usize) -> Option<usize> {
        self.edge_lookup.get(&sorted(a, b)).copied()
    }
    pub fn vertex_triangles(&self, v: usize) -> &[usize] {
        &self.vertex_tri_list[self.vertex_tri_offsets[v]..self.vertex_tri_offsets[v + 1]]
    }

    pub fn corners(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [p, q, r] = self.corners(t);
        signed_area(p, q, r)
    }

    /// Longest edge of triangle `t`.
    pub fn diameter(&self, t: usize) -> f64 {
        let [p, q, r] = self.corners(t);
        dist2(p, q).max(dist2(q, r)).max(dist2(r, p)).sqrt()
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let [a, b] = self.edges[e].vertices;
        dist2(self.vertices[a], self.vertices[b]).sqrt()
    }

    /// Gradients of the three barycentric coordinates of triangle `t`.
    pub fn barycentric_gradients(&self, t: usize) -> [[f64; 2]; 3] {
        let [p, q, r] = self.corners(t);
        let two_area = 2.0 * signed_area(p, q, r);
        [
            [(q[1] - r[1]) / two_area, (r[0] - q[0]) / two_area],
            [(r[1] - p[1]) / two_area, (p[0] - r[0]) / two_area],
            [(p[1] - q[1]) / two_area, (q[0] - p[0]) / two_area],
        ]
    }

    /// Maps barycentric coordinates on triangle `t` to physical coordinates.
    pub fn map_point(&self, t: usize, bary: [f64; 3]) -> Point {
        let [p, q, r] = self.corners(t);
        [
            bary[0] * p[0] + bary[1] * q[0] + bary[2] * r[0],
            bary[0] * p[1] + bary[1] * q[1] + bary[2] * r[1],
        ]
    }

    /// Barycentric coordinates of a physical point with respect to triangle `t`.
    pub fn barycentric(&self, t: usize, x: Point) -> [f64; 3] {
        let [p, q, r] = self.corners(t);
        let a = signed_area(p, q, r);
        let l1 = signed_area(p, x, r) / a;
        let l2 = signed_area(p, q, x) / a;
        [1.0 - l1 - l2, l1, l2]
    }

    pub fn boundary_vertex_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.vertices.len()];
        for e in self.edges.iter().filter(|e| !e.interior) {
            mask[e.vertices[0]] = true;
            mask[e.vertices[1]] = true;
        }
        mask
    }

    /// Newest-vertex bisection of the marked triangles with conforming closure.
    ///
    /// Every marked triangle is bisected at least once; neighbours are bisected
    /// as needed so that no hanging node remains. Children inherit the region
    /// id and record their parent triangle in the returned mesh's genealogy.
    pub fn refine_bisection(&self, marked: &[usize]) -> Result<Self> {
        let nt = self.triangles.len();
        let mut edge_marked = vec![false; self.edges.len()];
        for &t in marked {
            if t >= nt {
                return Err(Error::IndexOutOfRange {
                    what: "triangle",
                    index: t,
                    len: nt,
                });
            }
            edge_marked[self.tri_edges[t][0]] = true;
        }
        self.refine_marked_edges(edge_marked)
    }

    /// Bisects every edge: each triangle is split into four children and the
    /// mesh size halves.
    pub fn refine_uniform(&self) -> Result<Self> {
        self.refine_marked_edges(vec![true; self.edges.len()])
    }

    fn refine_marked_edges(&self, mut edge_marked: Vec<bool>) -> Result<Self> {
        // closure: a triangle with any marked edge must bisect its refinement edge
        let mut queue: Vec<usize> = (0..self.triangles.len()).collect();
        while let Some(t) = queue.pop() {
            let te = self.tri_edges[t];
            if !edge_marked[te[0]] && (edge_marked[te[1]] || edge_marked[te[2]]) {
                edge_marked[te[0]] = true;
                let e = &self.edges[te[0]];
                queue.push(e.triangles[0]);
                if e.interior {
                    queue.push(e.triangles[1]);
                }
            }
        }

        let mut vertices = self.vertices.clone();
        let mut midpoint: HashMap<[usize; 2], usize> = HashMap::new();
        for (e, edge) in self.edges.iter().enumerate() {
            if edge_marked[e] {
                let [a, b] = edge.vertices;
                let (p, q) = (self.vertices[a], self.vertices[b]);
                midpoint.insert(edge.vertices, vertices.len());
                vertices.push([0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]);
            }
        }

        let mut triangles = Vec::with_capacity(self.triangles.len() * 2);
        let mut regions = Vec::with_capacity(triangles.capacity());
        let mut parent = Vec::with_capacity(triangles.capacity());
        let mut children = Vec::with_capacity(4);
        for (t, &tri) in self.triangles.iter().enumerate() {
            children.clear();
            bisect_recursive(tri, &midpoint, &mut children);
            for &c in &children {
                triangles.push(c);
                regions.push(self.regions[t]);
                parent.push(t);
            }
        }

        let mut boundary = Vec::with_capacity(self.boundary.len() * 2);
        for b in &self.boundary {
            match midpoint.get(&sorted(b.vertices[0], b.vertices[1])) {
                Some(&m) => {
                    boundary.push(BoundaryEdge {
                        vertices: [b.vertices[0], m],
                        marker: b.marker,
                    });
                    boundary.push(BoundaryEdge {
                        vertices: [m, b.vertices[1]],
                        marker: b.marker,
                    });
                }
                None => boundary.push(*b),
            }
        }

        let genealogy = Genealogy {
            parent_id: self.id,
            parent_vertex_count: self.vertices.len(),
            parent,
        };
        let mesh = Self::assemble(vertices, triangles, regions, boundary, Some(genealogy))?;
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn vertex_patch(&self, k: usize) -> Result<VertexPatch> {
        if k >= self.vertices.len() {
            return Err(Error::IndexOutOfRange {
                what: "vertex",
                index: k,
                len: self.vertices.len(),
            });
        }
        let mut triangles = self.vertex_triangles(k).to_vec();
        triangles.sort_unstable();
        let mut interior_edges = Vec::new();
        let mut pts: Vec<usize> = Vec::new();
        for &t in &triangles {
            for (i, &v) in self.triangles[t].iter().enumerate() {
                pts.push(v);
                if v != k {
                    continue;
                }
                // the two edges through k are the ones not opposite k
                for j in 1..3 {
                    let e = self.tri_edges[t][(i + j) % 3];
                    if self.edges[e].interior {
                        interior_edges.push(e);
                    }
                }
            }
        }
        interior_edges.sort_unstable();
        interior_edges.dedup();
        pts.sort_unstable();
        pts.dedup();
        let mut diam2: f64 = 0.0;
        for (i, &a) in pts.iter().enumerate() {
            for &b in &pts[i + 1..] {
                diam2 = diam2.max(dist2(self.vertices[a], self.vertices[b]));
            }
        }
        Ok(VertexPatch {
            vertex: k,
            triangles,
            interior_edges,
            diameter: diam2.sqrt(),
        })
    }

    pub fn vertex_patches(&self) -> Vec<VertexPatch> {
        (0..self.vertices.len())
            .map(|k| self.vertex_patch(k).expect("valid vertex"))
            .collect()
    }

    /// Number of vertices whose closed patch meets the closed patch of `k`
    /// (including `k` itself).
    pub fn patch_overlap(&self, k: usize, scratch: &mut Vec<usize>) -> usize {
        scratch.clear();
        for &t in self.vertex_triangles(k) {
            for &v in &self.triangles[t] {
                for &t2 in self.vertex_triangles(v) {
                    scratch.extend_from_slice(&self.triangles[t2]);
                }
            }
        }
        scratch.sort_unstable();
        scratch.dedup();
        scratch.len()
    }

    pub fn stats(&self) -> MeshStats {
        let mut min_angle = f64::INFINITY;
        let mut h_max: f64 = 0.0;
        let mut h_min = f64::INFINITY;
        for t in 0..self.triangles.len() {
            let [p, q, r] = self.corners(t);
            for (a, b, c) in [(p, q, r), (q, r, p), (r, p, q)] {
                let u = [b[0] - a[0], b[1] - a[1]];
                let v = [c[0] - a[0], c[1] - a[1]];
                let cross = u[0] * v[1] - u[1] * v[0];
                let dot = u[0] * v[0] + u[1] * v[1];
                min_angle = min_angle.min(cross.abs().atan2(dot).to_degrees());
            }
            let h = self.diameter(t);
            h_max = h_max.max(h);
            h_min = h_min.min(h);
        }
        let mut scratch = Vec::new();
        let max_overlap = (0..self.vertices.len())
            .map(|k| self.patch_overlap(k, &mut scratch))
            .max()
            .unwrap_or(0);
        MeshStats {
            min_angle,
            max_overlap,
            h_max,
            h_min,
        }
    }

    /// ASCII format: `nv nt nb`, then `x y` rows, `v0 v1 v2 region` rows and
    /// `v0 v1 marker` rows; indices are 0-based.
    pub fn to_ascii(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} {} {}",
            self.vertices.len(),
            self.triangles.len(),
            self.boundary.len()
        );
        for v in &self.vertices {
            let _ = writeln!(s, "{} {}", v[0], v[1]);
        }
        for (t, r) in self.triangles.iter().zip(&self.regions) {
            let _ = writeln!(s, "{} {} {} {}", t[0], t[1], t[2], r);
        }
        for b in &self.boundary {
            let _ = writeln!(s, "{} {} {}", b.vertices[0], b.vertices[1], b.marker);
        }
        s
    }

    pub fn from_ascii(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let parse_err = |line: usize, msg: String| Error::MeshParse { line, msg };
        let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
        let h = parse_fields::<usize>(header, 3, hline)?;
        let (nv, nt, nb) = (h[0], h[1], h[2]);
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| parse_err(0, "unexpected end of file in vertex block".into()))?;
            let f = parse_fields::<f64>(l, 2, ln)?;
            vertices.push([f[0], f[1]]);
        }
        let mut triangles = Vec::with_capacity(nt);
        let mut regions = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| parse_err(0, "unexpected end of file in triangle block".into()))?;
            let f = parse_fields::<i64>(l, 4, ln)?;
            if f[..3].iter().any(|&v| v < 0) {
                return Err(parse_err(ln, "negative vertex index".into()));
            }
            triangles.push([f[0] as usize, f[1] as usize, f[2] as usize]);
            regions.push(f[3] as i32);
        }
        let mut boundary = Vec::with_capacity(nb);
        for _ in 0..nb {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| parse_err(0, "unexpected end of file in boundary block".into()))?;
            let f = parse_fields::<i64>(l, 3, ln)?;
            if f[..2].iter().any(|&v| v < 0) {
                return Err(parse_err(ln, "negative vertex index".into()));
            }
            boundary.push(BoundaryEdge {
                vertices: [f[0] as usize, f[1] as usize],
                marker: f[2] as i32,
            });
        }
        if let Some((ln, _)) = lines.next() {
            return Err(parse_err(ln, "trailing data after boundary block".into()));
        }
        Self::new(vertices, triangles, regions, boundary)
    }
}

fn parse_fields<T: FromStr>(line: &str, n: usize, ln: usize) -> Result<Vec<T>> {
    let out: Vec<T> = line
        .split_whitespace()
        .map(|tok| tok.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::MeshParse {
            line: ln,
            msg: format!("cannot parse `{line}`"),
        })?;
    if out.len() != n {
        return Err(Error::MeshParse {
            line: ln,
            msg: format!("expected {n} fields, found {}", out.len()),
        });
    }
    Ok(out)
}

fn longest_edge_order(vertices: &[Point], tri: [usize; 3]) -> [usize; 3] {
    let mut best = 0;
    let mut best_len = -1.0;
    for i in 0..3 {
        let len = dist2(vertices[tri[(i + 1) % 3]], vertices[tri[(i + 2) % 3]]);
        if len > best_len || (len == best_len && tri[i] < tri[best]) {
            best = i;
            best_len = len;
        }
    }
    [tri[best], tri[(best + 1) % 3], tri[(best + 2) % 3]]
}

fn bisect_recursive(tri: [usize; 3], midpoint: &HashMap<[usize; 2], usize>, out: &mut Vec<[usize; 3]>) {
    let [n, a, b] = tri;
    match midpoint.get(&sorted(a, b)) {
        Some(&m) => {
            bisect_recursive([m, n, a], midpoint, out);
            bisect_recursive([m, b, n], midpoint, out);
        }
        None => out.push(tri),
    }
}

/// Unit square refined `levels` times uniformly, starting from two triangles.
pub fn uniform_mesh(domain: Domain, levels: usize) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::builtin(domain, 1)?;
    for _ in 0..levels {
        mesh = mesh.refine_uniform()?;
    }
    Ok(mesh)
}

/// The four-triangle "cross" mesh of the unit square (one bisection of the
/// two-triangle mesh), with its centre vertex at index 4.
pub fn cross_mesh() -> TriangleMesh {
    let square = TriangleMesh::builtin(Domain::UnitSquare, 1).expect("builtin");
    square.refine_bisection(&[0, 1]).expect("refine")
}
