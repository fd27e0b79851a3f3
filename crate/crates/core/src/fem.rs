//! Lagrange finite element spaces on triangles, assembly and Galerkin solves.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, CsrMatrix, SparseCholesky};
use crate::mesh::{Point, TriangleMesh};
use crate::par;
use crate::quadrature::{line_rule, triangle_rule};
use crate::schwarz::{pcg_solve, PcgOptions, SubspaceDecomposition};

/// Discrete operator on the interior dofs of a space.
pub type SparseOperator = CsrMatrix;

/// Scalar field callback.
pub type ScalarField = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

/// Equispaced Lagrange element of arbitrary degree written in barycentric
/// coordinates: the basis function of lattice node `(a, b, c)` is
/// `P_a(λ0) P_b(λ1) P_c(λ2)` with `P_m(t) = Π_{j<m} (k t - j) / (j + 1)`.
#[derive(Debug, Clone)]
pub struct LagrangeElement {
    degree: usize,
    nodes: Vec<[usize; 3]>,
}

/// `(P_m(t), P_m'(t), P_m''(t))` for the degree-`k` lattice.
fn lattice_poly(m: usize, k: usize, t: f64) -> (f64, f64, f64) {
    let (mut p, mut dp, mut ddp) = (1.0, 0.0, 0.0);
    let kf = k as f64;
    for j in 0..m {
        let d = (j + 1) as f64;
        let g = (kf * t - j as f64) / d;
        let dg = kf / d;
        ddp = ddp * g + 2.0 * dp * dg;
        dp = dp * g + p * dg;
        p *= g;
    }
    (p, dp, ddp)
}

impl LagrangeElement {
    pub fn new(degree: usize) -> Self {
        assert!(degree >= 1, "degree must be at least 1");
        let k = degree;
        let mut nodes = vec![[k, 0, 0], [0, k, 0], [0, 0, k]];
        for j in 0..3 {
            let (s, e) = ((j + 1) % 3, (j + 2) % 3);
            for i in 1..k {
                let mut n = [0; 3];
                n[s] = k - i;
                n[e] = i;
                nodes.push(n);
            }
        }
        for c in 1..k {
            for b in 1..k {
                if b + c < k {
                    nodes.push([k - b - c, b, c]);
                }
            }
        }
        Self { degree, nodes }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }
    pub fn num_local(&self) -> usize {
        self.nodes.len()
    }
    /// Lattice index of each local node.
    pub fn nodes(&self) -> &[[usize; 3]] {
        &self.nodes
    }
    /// Barycentric coordinates of local node `i`.
    pub fn node_bary(&self, i: usize) -> [f64; 3] {
        let k = self.degree as f64;
        let n = self.nodes[i];
        [n[0] as f64 / k, n[1] as f64 / k, n[2] as f64 / k]
    }

    pub fn values(&self, bary: [f64; 3]) -> Vec<f64> {
        let k = self.degree;
        self.nodes
            .iter()
            .map(|n| (0..3).map(|i| lattice_poly(n[i], k, bary[i]).0).product())
            .collect()
    }

    /// Physical gradients given the barycentric gradients of the triangle.
    pub fn gradients(&self, bary: [f64; 3], bgrad: &[[f64; 2]; 3]) -> Vec<[f64; 2]> {
        let k = self.degree;
        self.nodes
            .iter()
            .map(|n| {
                let p: Vec<(f64, f64, f64)> = (0..3).map(|i| lattice_poly(n[i], k, bary[i])).collect();
                let d = [p[0].1 * p[1].0 * p[2].0, p[0].0 * p[1].1 * p[2].0, p[0].0 * p[1].0 * p[2].1];
                let mut g = [0.0; 2];
                for i in 0..3 {
                    g[0] += d[i] * bgrad[i][0];
                    g[1] += d[i] * bgrad[i][1];
                }
                g
            })
            .collect()
    }

    /// Physical Hessians `[[∂xx, ∂xy], [∂yx, ∂yy]]`.
    pub fn hessians(&self, bary: [f64; 3], bgrad: &[[f64; 2]; 3]) -> Vec<[[f64; 2]; 2]> {
        let k = self.degree;
        self.nodes
            .iter()
            .map(|n| {
                let p: Vec<(f64, f64, f64)> = (0..3).map(|i| lattice_poly(n[i], k, bary[i])).collect();
                let mut h = [[0.0; 2]; 2];
                for i in 0..3 {
                    for j in 0..3 {
                        let hij: f64 = (0..3)
                            .map(|m| {
                                let order = usize::from(m == i) + usize::from(m == j);
                                match order {
                                    0 => p[m].0,
                                    1 => p[m].1,
                                    _ => p[m].2,
                                }
                            })
                            .product();
                        for a in 0..2 {
                            for b in 0..2 {
                                h[a][b] += hij * bgrad[i][a] * bgrad[j][b];
                            }
                        }
                    }
                }
                h
            })
            .collect()
    }
}

/// Piecewise constant symmetric coefficient `K`, one matrix per region id.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficient {
    regions: BTreeMap<i32, [[f64; 2]; 2]>,
    fallback: Option<[[f64; 2]; 2]>,
    alpha_lower: f64,
    alpha_upper: f64,
}

fn sym_eigs(k: &[[f64; 2]; 2]) -> (f64, f64) {
    let tr = k[0][0] + k[1][1];
    let det = k[0][0] * k[1][1] - k[0][1] * k[1][0];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    (0.5 * tr - disc, 0.5 * tr + disc)
}

impl Coefficient {
    /// Same matrix on every region.
    pub fn constant(k: [[f64; 2]; 2]) -> Result<Self> {
        Self::build(BTreeMap::new(), Some(k))
    }

    pub fn identity() -> Self {
        Self::constant([[1.0, 0.0], [0.0, 1.0]]).expect("identity is elliptic")
    }

    pub fn scalar_per_region(values: &[(i32, f64)]) -> Result<Self> {
        let map = values
            .iter()
            .map(|&(r, c)| (r, [[c, 0.0], [0.0, c]]))
            .collect();
        Self::build(map, None)
    }

    pub fn per_region(map: BTreeMap<i32, [[f64; 2]; 2]>) -> Result<Self> {
        Self::build(map, None)
    }

    fn build(regions: BTreeMap<i32, [[f64; 2]; 2]>, fallback: Option<[[f64; 2]; 2]>) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for (&r, k) in regions.iter().chain(fallback.iter().map(|k| (&-1, k))) {
            let scale = k[0][0].abs().max(k[1][1].abs()).max(k[0][1].abs());
            if (k[0][1] - k[1][0]).abs() > 1e-14 * scale {
                return Err(Error::NotElliptic {
                    region: r,
                    detail: "matrix is not symmetric".into(),
                });
            }
            let (l, u) = sym_eigs(k);
            if !(l > 0.0) || !u.is_finite() {
                return Err(Error::NotElliptic {
                    region: r,
                    detail: format!("eigenvalues {l:e}, {u:e}"),
                });
            }
            lo = lo.min(l);
            hi = hi.max(u);
        }
        Ok(Self {
            regions,
            fallback,
            alpha_lower: lo,
            alpha_upper: hi,
        })
    }

    pub fn get(&self, region: i32) -> Result<[[f64; 2]; 2]> {
        self.regions
            .get(&region)
            .copied()
            .or(self.fallback)
            .ok_or(Error::MissingRegion(region))
    }

    pub fn alpha_lower(&self) -> f64 {
        self.alpha_lower
    }
    pub fn alpha_upper(&self) -> f64 {
        self.alpha_upper
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        let scale = |k: &[[f64; 2]; 2]| [[c * k[0][0], c * k[0][1]], [c * k[1][0], c * k[1][1]]];
        Self::build(
            self.regions.iter().map(|(&r, k)| (r, scale(k))).collect(),
            self.fallback.as_ref().map(scale),
        )
    }

    fn check_mesh(&self, mesh: &TriangleMesh) -> Result<()> {
        for &r in mesh.regions() {
            self.get(r)?;
        }
        Ok(())
    }
}

pub fn apply_k(k: &[[f64; 2]; 2], g: [f64; 2]) -> [f64; 2] {
    [k[0][0] * g[0] + k[0][1] * g[1], k[1][0] * g[0] + k[1][1] * g[1]]
}

/// Continuous Lagrange space of a fixed degree with zero trace on the
/// boundary (the interior dofs); boundary dofs are kept in the global
/// numbering and set to zero for members of the space.
#[derive(Debug, Clone)]
pub struct FeSpace {
    mesh: Arc<TriangleMesh>,
    element: LagrangeElement,
    tri_dofs: Vec<usize>,
    ndofs: usize,
    dof_points: Vec<Point>,
    interior_index: Vec<Option<usize>>,
    interior_dofs: Vec<usize>,
}

impl FeSpace {
    pub fn new(mesh: Arc<TriangleMesh>, degree: usize) -> Self {
        let element = LagrangeElement::new(degree);
        let k = degree;
        let nv = mesh.num_vertices();
        let ne = mesh.num_edges();
        let nt = mesh.num_triangles();
        let per_edge = k - 1;
        let per_tri = if k >= 3 { (k - 1) * (k - 2) / 2 } else { 0 };
        let ndofs = nv + per_edge * ne + per_tri * nt;
        let nloc = element.num_local();
        let mut tri_dofs = vec![0usize; nt * nloc];
        let mut dof_points = vec![[0.0; 2]; ndofs];
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let dofs = &mut tri_dofs[t * nloc..(t + 1) * nloc];
            dofs[..3].copy_from_slice(tri);
            let te = mesh.triangle_edges(t);
            for j in 0..3 {
                let e = te[j];
                let start = tri[(j + 1) % 3];
                let forward = mesh.edges()[e].vertices[0] == start;
                for i in 1..k {
                    let local = 3 + j * per_edge + (i - 1);
                    let pos = if forward { i - 1 } else { k - 1 - i };
                    dofs[local] = nv + e * per_edge + pos;
                }
            }
            for i in 0..per_tri {
                dofs[3 + 3 * per_edge + i] = nv + ne * per_edge + t * per_tri + i;
            }
            for (i, &d) in dofs.iter().enumerate() {
                dof_points[d] = mesh.map_point(t, element.node_bary(i));
            }
        }
        let mut on_boundary = vec![false; ndofs];
        let bmask = mesh.boundary_vertex_mask();
        for (v, &b) in bmask.iter().enumerate() {
            on_boundary[v] = b;
        }
        for (e, edge) in mesh.edges().iter().enumerate() {
            if !edge.interior {
                for pos in 0..per_edge {
                    on_boundary[nv + e * per_edge + pos] = true;
                }
            }
        }
        let mut interior_index = vec![None; ndofs];
        let mut interior_dofs = Vec::new();
        for d in 0..ndofs {
            if !on_boundary[d] {
                interior_index[d] = Some(interior_dofs.len());
                interior_dofs.push(d);
            }
        }
        Self {
            mesh,
            element,
            tri_dofs,
            ndofs,
            dof_points,
            interior_index,
            interior_dofs,
        }
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }
    pub fn mesh_arc(&self) -> &Arc<TriangleMesh> {
        &self.mesh
    }
    pub fn degree(&self) -> usize {
        self.element.degree
    }
    pub fn element(&self) -> &LagrangeElement {
        &self.element
    }
    pub fn num_dofs(&self) -> usize {
        self.ndofs
    }
    pub fn num_interior(&self) -> usize {
        self.interior_dofs.len()
    }
    pub fn dof_point(&self, d: usize) -> Point {
        self.dof_points[d]
    }
    pub fn interior_dofs(&self) -> &[usize] {
        &self.interior_dofs
    }
    pub fn interior_index(&self, d: usize) -> Option<usize> {
        self.interior_index[d]
    }
    pub fn triangle_dofs(&self, t: usize) -> &[usize] {
        let n = self.element.num_local();
        &self.tri_dofs[t * n..(t + 1) * n]
    }

    /// Expands an interior coefficient vector to all dofs (zero on the boundary).
    pub fn extend(&self, interior: &[f64]) -> Result<Vec<f64>> {
        if interior.len() != self.num_interior() {
            return Err(Error::DimensionMismatch {
                expected: self.num_interior(),
                got: interior.len(),
            });
        }
        let mut full = vec![0.0; self.ndofs];
        for (&d, &v) in self.interior_dofs.iter().zip(interior) {
            full[d] = v;
        }
        Ok(full)
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.interior_dofs.iter().map(|&d| full[d]).collect()
    }

    /// Nodal interpolant of a callback (boundary values included).
    pub fn interpolate(self: &Arc<Self>, f: impl Fn(Point) -> f64) -> FeFunction {
        FeFunction {
            space: self.clone(),
            coeffs: self.dof_points.iter().map(|&p| f(p)).collect(),
        }
    }
}

/// A function of an [`FeSpace`], coefficients over all dofs.
#[derive(Debug, Clone)]
pub struct FeFunction {
    space: Arc<FeSpace>,
    coeffs: Vec<f64>,
}

impl FeFunction {
    pub fn new(space: Arc<FeSpace>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != space.num_dofs() {
            return Err(Error::DimensionMismatch {
                expected: space.num_dofs(),
                got: coeffs.len(),
            });
        }
        Ok(Self { space, coeffs })
    }

    pub fn zero(space: Arc<FeSpace>) -> Self {
        let n = space.num_dofs();
        Self {
            space,
            coeffs: vec![0.0; n],
        }
    }

    pub fn from_interior(space: Arc<FeSpace>, interior: &[f64]) -> Result<Self> {
        let coeffs = space.extend(interior)?;
        Ok(Self { space, coeffs })
    }

    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }
    pub fn interior(&self) -> Vec<f64> {
        self.space.restrict(&self.coeffs)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            space: self.space.clone(),
            coeffs: self.coeffs.iter().map(|v| c * v).collect(),
        }
    }

    pub fn value(&self, t: usize, bary: [f64; 3]) -> f64 {
        let vals = self.space.element.values(bary);
        self.space
            .triangle_dofs(t)
            .iter()
            .zip(vals)
            .map(|(&d, v)| self.coeffs[d] * v)
            .sum()
    }

    pub fn gradient(&self, t: usize, bary: [f64; 3]) -> [f64; 2] {
        let bgrad = self.space.mesh.barycentric_gradients(t);
        let grads = self.space.element.gradients(bary, &bgrad);
        let mut g = [0.0; 2];
        for (&d, gi) in self.space.triangle_dofs(t).iter().zip(grads) {
            g[0] += self.coeffs[d] * gi[0];
            g[1] += self.coeffs[d] * gi[1];
        }
        g
    }

    pub fn hessian(&self, t: usize, bary: [f64; 3]) -> [[f64; 2]; 2] {
        let bgrad = self.space.mesh.barycentric_gradients(t);
        let hs = self.space.element.hessians(bary, &bgrad);
        let mut h = [[0.0; 2]; 2];
        for (&d, hi) in self.space.triangle_dofs(t).iter().zip(hs) {
            for a in 0..2 {
                for b in 0..2 {
                    h[a][b] += self.coeffs[d] * hi[a][b];
                }
            }
        }
        h
    }

    /// CSV debug dump: one `dof,x,y,value` row per dof.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dof,x,y,value\n");
        for (d, v) in self.coeffs.iter().enumerate() {
            let p = self.space.dof_point(d);
            s.push_str(&format!("{d},{},{},{v}\n", p[0], p[1]));
        }
        s
    }
}

/// Element stiffness matrix `∫_T K∇φ_j·∇φ_i` in local numbering.
pub fn element_stiffness(space: &FeSpace, k: &Coefficient, t: usize) -> Result<DMatrix<f64>> {
    let mesh = space.mesh();
    let kt = k.get(mesh.regions()[t])?;
    let p = space.degree();
    let rule = triangle_rule((2 * p).saturating_sub(2).max(1));
    let bgrad = mesh.barycentric_gradients(t);
    let area = mesh.area(t);
    let n = space.element.num_local();
    let mut local = DMatrix::zeros(n, n);
    for (q, &w) in rule.points.iter().zip(&rule.weights) {
        let g = space.element.gradients(*q, &bgrad);
        let kg: Vec<[f64; 2]> = g.iter().map(|&gi| apply_k(&kt, gi)).collect();
        for i in 0..n {
            for j in 0..n {
                local[(i, j)] += w * area * (kg[j][0] * g[i][0] + kg[j][1] * g[i][1]);
            }
        }
    }
    Ok(local)
}

/// Stiffness matrix over all dofs (no boundary condition applied).
pub fn assemble_stiffness_full(space: &FeSpace, k: &Coefficient) -> Result<CsrMatrix> {
    assemble_stiffness_impl(space, k, false)
}

/// Stiffness matrix `a(φ_j, φ_i)` over the interior dofs.
pub fn assemble_stiffness(space: &FeSpace, k: &Coefficient) -> Result<SparseOperator> {
    assemble_stiffness_impl(space, k, true)
}

fn assemble_stiffness_impl(space: &FeSpace, k: &Coefficient, interior_only: bool) -> Result<CsrMatrix> {
    k.check_mesh(space.mesh())?;
    let nt = space.mesh().num_triangles();
    let locals: Vec<Result<DMatrix<f64>>> = par::map_range(nt, |t| element_stiffness(space, k, t));
    let n = if interior_only {
        space.num_interior()
    } else {
        space.num_dofs()
    };
    let nloc = space.element.num_local();
    let mut trip = Vec::with_capacity(nt * nloc * nloc);
    for (t, local) in locals.into_iter().enumerate() {
        let local = local?;
        let dofs = space.triangle_dofs(t);
        for i in 0..nloc {
            let Some(gi) = map_dof(space, dofs[i], interior_only) else { continue };
            for j in 0..nloc {
                let Some(gj) = map_dof(space, dofs[j], interior_only) else { continue };
                trip.push((gi, gj, local[(i, j)]));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(n, n, &trip))
}

fn map_dof(space: &FeSpace, d: usize, interior_only: bool) -> Option<usize> {
    if interior_only {
        space.interior_index(d)
    } else {
        Some(d)
    }
}

/// Default load quadrature order for degree `p`.
pub fn default_load_order(p: usize) -> usize {
    2 * p
}

/// Load vector `∫ f φ_i` over interior dofs.
pub fn assemble_load(space: &FeSpace, f: &(dyn Fn(Point) -> f64 + Sync), order: Option<usize>) -> Vec<f64> {
    let mesh = space.mesh();
    let rule = triangle_rule(order.unwrap_or_else(|| default_load_order(space.degree())));
    let nt = mesh.num_triangles();
    let locals: Vec<Vec<f64>> = par::map_range(nt, |t| {
        let area = mesh.area(t);
        let mut local = vec![0.0; space.element.num_local()];
        for (q, &w) in rule.points.iter().zip(&rule.weights) {
            let fx = f(mesh.map_point(t, *q));
            for (l, v) in local.iter_mut().zip(space.element.values(*q)) {
                *l += w * area * fx * v;
            }
        }
        local
    });
    let mut b = vec![0.0; space.num_interior()];
    for (t, local) in locals.iter().enumerate() {
        for (&d, &v) in space.triangle_dofs(t).iter().zip(local) {
            if let Some(i) = space.interior_index(d) {
                b[i] += v;
            }
        }
    }
    b
}

/// Linear solver choice for [`galerkin_solve`].
pub enum Solver<'a> {
    /// Dense Cholesky, for small systems and oracle paths.
    DirectDense,
    /// Sparse Cholesky.
    DirectSparse,
    /// Conjugate gradients preconditioned by an additive Schwarz decomposition.
    Pcg {
        decomposition: &'a SubspaceDecomposition,
        rel_tol: f64,
        max_iter: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveInfo {
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Solves `A u = b` on the interior dofs and returns the function in `space`.
pub fn galerkin_solve(
    space: &Arc<FeSpace>,
    a: &SparseOperator,
    b: &[f64],
    solver: Solver<'_>,
) -> Result<(FeFunction, SolveInfo)> {
    let n = space.num_interior();
    if a.nrows() != n || b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: if a.nrows() != n { a.nrows() } else { b.len() },
        });
    }
    let bnorm = linalg::norm2(b);
    let (x, iterations) = if bnorm == 0.0 {
        (vec![0.0; n], 0)
    } else {
        match solver {
            Solver::DirectDense => {
                let chol = linalg::dense_cholesky(a.to_dense(), "stiffness matrix")?;
                let x = chol.solve(&DVector::from_column_slice(b));
                (x.as_slice().to_vec(), 0)
            }
            Solver::DirectSparse => (SparseCholesky::new(a)?.solve(b), 0),
            Solver::Pcg {
                decomposition,
                rel_tol,
                max_iter,
            } => {
                let out = pcg_solve(a, b, decomposition, PcgOptions { rel_tol, max_iter })?;
                (out.solution, out.iterations)
            }
        }
    };
    let r = a.matvec(&x);
    let res: f64 = r.iter().zip(b).map(|(ri, bi)| (bi - ri).powi(2)).sum::<f64>().sqrt();
    let rel_residual = if bnorm == 0.0 { 0.0 } else { res / bnorm };
    Ok((
        FeFunction::from_interior(space.clone(), &x)?,
        SolveInfo {
            iterations,
            rel_residual,
        },
    ))
}

/// `‖v‖_A = (vᵀ A v)^{1/2}`.
pub fn energy_norm(a: &SparseOperator, v: &[f64]) -> Result<f64> {
    if v.len() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            got: v.len(),
        });
    }
    Ok(linalg::dot(&a.matvec(v), v).max(0.0).sqrt())
}

/// The residual `r = f - A u_h` as a functional on the mesh of `u_h` or on a
/// one-step refinement of it.
pub struct ResidualFunctional {
    u_h: FeFunction,
    k: Coefficient,
    f: ScalarField,
    order: usize,
}

impl ResidualFunctional {
    /// `order` is the quadrature order for the source term; it must match
    /// the order used to assemble the load of `u_h` for Galerkin orthogonality
    /// to hold to solver precision.
    pub fn new(k: &Coefficient, f: ScalarField, u_h: &FeFunction, order: usize) -> Self {
        Self {
            u_h: u_h.clone(),
            k: k.clone(),
            f,
            order,
        }
    }

    pub fn solution(&self) -> &FeFunction {
        &self.u_h
    }
    pub fn source(&self) -> &ScalarField {
        &self.f
    }
    pub fn coefficient(&self) -> &Coefficient {
        &self.k
    }
    pub fn order(&self) -> usize {
        self.order
    }

    /// `⟨r, w_i⟩` for every interior dof of `w_space`, which must live on the
    /// mesh of `u_h`.
    pub fn vector(&self, w_space: &FeSpace) -> Result<Vec<f64>> {
        let mesh = w_space.mesh();
        if mesh.id() != self.u_h.space().mesh().id() {
            return Err(Error::MeshMismatch);
        }
        self.k.check_mesh(mesh)?;
        let nw = w_space.degree();
        let stiff_rule = triangle_rule((self.u_h.space().degree() + nw).saturating_sub(2).max(1));
        let load_rule = triangle_rule(self.order);
        let el = w_space.element();
        let locals: Vec<Vec<f64>> = par::map_range(mesh.num_triangles(), |t| {
            let area = mesh.area(t);
            let bgrad = mesh.barycentric_gradients(t);
            let kt = self.k.get(mesh.regions()[t]).expect("checked");
            let mut local = vec![0.0; el.num_local()];
            for (q, &w) in load_rule.points.iter().zip(&load_rule.weights) {
                let fx = (self.f)(mesh.map_point(t, *q));
                for (l, v) in local.iter_mut().zip(el.values(*q)) {
                    *l += w * area * fx * v;
                }
            }
            for (q, &w) in stiff_rule.points.iter().zip(&stiff_rule.weights) {
                let kg = apply_k(&kt, self.u_h.gradient(t, *q));
                for (l, g) in local.iter_mut().zip(el.gradients(*q, &bgrad)) {
                    *l -= w * area * (kg[0] * g[0] + kg[1] * g[1]);
                }
            }
            local
        });
        let mut r = vec![0.0; w_space.num_interior()];
        for (t, local) in locals.iter().enumerate() {
            for (&d, &v) in w_space.triangle_dofs(t).iter().zip(local) {
                if let Some(i) = w_space.interior_index(d) {
                    r[i] += v;
                }
            }
        }
        Ok(r)
    }

    /// `⟨r, v⟩ = ∫ f v - a(u_h, v)` for a function on the same mesh or on a
    /// direct refinement of it.
    pub fn apply(&self, v: &FeFunction) -> Result<f64> {
        let vmesh = v.space().mesh();
        let umesh = self.u_h.space().mesh();
        let parent_of: Box<dyn Fn(usize) -> usize> = if vmesh.id() == umesh.id() {
            Box::new(|t| t)
        } else {
            match vmesh.genealogy() {
                Some(g) if g.parent_id == umesh.id() => {
                    let parents = g.parent.clone();
                    Box::new(move |t| parents[t])
                }
                _ => return Err(Error::MeshMismatch),
            }
        };
        self.k.check_mesh(vmesh)?;
        let deg = self.u_h.space().degree() + v.space().degree();
        let stiff_rule = triangle_rule(deg.saturating_sub(2).max(1));
        let load_rule = triangle_rule(self.order);
        let mut total = 0.0;
        for t in 0..vmesh.num_triangles() {
            let area = vmesh.area(t);
            let parent = parent_of(t);
            let kt = self.k.get(vmesh.regions()[t])?;
            for (q, &w) in load_rule.points.iter().zip(&load_rule.weights) {
                let x = vmesh.map_point(t, *q);
                total += w * area * (self.f)(x) * v.value(t, *q);
            }
            for (q, &w) in stiff_rule.points.iter().zip(&stiff_rule.weights) {
                let x = vmesh.map_point(t, *q);
                let ub = umesh.barycentric(parent, x);
                let kg = apply_k(&kt, self.u_h.gradient(parent, ub));
                let g = v.gradient(t, *q);
                total -= w * area * (kg[0] * g[0] + kg[1] * g[1]);
            }
        }
        Ok(total)
    }
}

fn clean(v: f64) -> f64 {
    if v.abs() < 1e-13 {
        0.0
    } else {
        v
    }
}

/// Interpolation matrix from `from` into `to` on the same mesh, interior
/// dofs only (`to.num_interior() x from.num_interior()`). Exact when
/// `to.degree() >= from.degree()`.
pub fn interpolation_matrix(from: &FeSpace, to: &FeSpace) -> Result<CsrMatrix> {
    if from.mesh().id() != to.mesh().id() {
        return Err(Error::MeshMismatch);
    }
    let mesh = to.mesh();
    let mut seen = vec![false; to.num_dofs()];
    let mut trip = Vec::new();
    for t in 0..mesh.num_triangles() {
        let from_dofs = from.triangle_dofs(t);
        for (i, &d) in to.triangle_dofs(t).iter().enumerate() {
            if seen[d] {
                continue;
            }
            seen[d] = true;
            let Some(row) = to.interior_index(d) else { continue };
            let vals = from.element().values(to.element().node_bary(i));
            for (&fd, v) in from_dofs.iter().zip(vals) {
                if let Some(col) = from.interior_index(fd) {
                    let v = clean(v);
                    if v != 0.0 {
                        trip.push((row, col, v));
                    }
                }
            }
        }
    }
    Ok(CsrMatrix::from_triplets(to.num_interior(), from.num_interior(), &trip))
}

/// Prolongation from a space on the parent mesh into a space on a direct
/// refinement of it (interior dofs only).
pub fn prolongation_matrix(coarse: &FeSpace, fine: &FeSpace) -> Result<CsrMatrix> {
    let cmesh = coarse.mesh();
    let fmesh = fine.mesh();
    let g = match fmesh.genealogy() {
        Some(g) if g.parent_id == cmesh.id() => g,
        _ => return Err(Error::NonNested),
    };
    let mut seen = vec![false; fine.num_dofs()];
    let mut trip = Vec::new();
    for t in 0..fmesh.num_triangles() {
        let parent = g.parent[t];
        let cdofs = coarse.triangle_dofs(parent);
        for (i, &d) in fine.triangle_dofs(t).iter().enumerate() {
            if seen[d] {
                continue;
            }
            seen[d] = true;
            let Some(row) = fine.interior_index(d) else { continue };
            let x = fmesh.map_point(t, fine.element().node_bary(i));
            let vals = coarse.element().values(cmesh.barycentric(parent, x));
            for (&cd, v) in cdofs.iter().zip(vals) {
                if let Some(col) = coarse.interior_index(cd) {
                    let v = clean(v);
                    if v != 0.0 {
                        trip.push((row, col, v));
                    }
                }
            }
        }
    }
    Ok(CsrMatrix::from_triplets(fine.num_interior(), coarse.num_interior(), &trip))
}

/// Integrates `g(t, bary, x)` over every edge of the mesh with a Gauss rule of
/// the given order; helper for edge terms.
pub fn edge_points(mesh: &TriangleMesh, e: usize, order: usize) -> Vec<(Point, f64)> {
    let [a, b] = mesh.edges()[e].vertices;
    let (p, q) = (mesh.vertices()[a], mesh.vertices()[b]);
    let len = mesh.edge_length(e);
    let rule = line_rule(order);
    rule.points
        .iter()
        .zip(&rule.weights)
        .map(|(&s, &w)| ([p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])], w * len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{cross_mesh, Domain};

    fn ref_triangle() -> Arc<TriangleMesh> {
        use crate::mesh::BoundaryEdge;
        let b = |a, c| BoundaryEdge {
            vertices: [a, c],
            marker: 1,
        };
        Arc::new(
            TriangleMesh::new(
                vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
                vec![[0, 1, 2]],
                vec![0],
                vec![b(0, 1), b(1, 2), b(2, 0)],
            )
            .unwrap(),
        )
    }

    #[test]
    fn lagrange_basis_is_nodal_and_partition_of_unity() {
        for k in 1..=6 {
            let el = LagrangeElement::new(k);
            assert_eq!(el.num_local(), (k + 1) * (k + 2) / 2);
            for i in 0..el.num_local() {
                let v = el.values(el.node_bary(i));
                for (j, vj) in v.iter().enumerate() {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((vj - expect).abs() < 1e-12, "k={k} i={i} j={j}");
                }
            }
            let b = [0.2, 0.3, 0.5];
            let s: f64 = el.values(b).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let bgrad = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];
            let g = el.gradients(b, &bgrad);
            let gs = g.iter().fold([0.0, 0.0], |a, x| [a[0] + x[0], a[1] + x[1]]);
            assert!(gs[0].abs() < 1e-10 && gs[1].abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_and_hessians_match_finite_differences() {
        let el = LagrangeElement::new(3);
        let mesh = ref_triangle();
        let bgrad = mesh.barycentric_gradients(0);
        let x = [0.21, 0.33];
        let bary = |x: [f64; 2]| [1.0 - x[0] - x[1], x[0], x[1]];
        let h = 1e-5;
        let g = el.gradients(bary(x), &bgrad);
        let hs = el.hessians(bary(x), &bgrad);
        for i in 0..el.num_local() {
            let dx = (el.values(bary([x[0] + h, x[1]]))[i] - el.values(bary([x[0] - h, x[1]]))[i]) / (2.0 * h);
            let dy = (el.values(bary([x[0], x[1] + h]))[i] - el.values(bary([x[0], x[1] - h]))[i]) / (2.0 * h);
            assert!((dx - g[i][0]).abs() < 1e-7 && (dy - g[i][1]).abs() < 1e-7);
            let gxx = (el.gradients(bary([x[0] + h, x[1]]), &bgrad)[i][0]
                - el.gradients(bary([x[0] - h, x[1]]), &bgrad)[i][0])
                / (2.0 * h);
            let gxy = (el.gradients(bary([x[0], x[1] + h]), &bgrad)[i][0]
                - el.gradients(bary([x[0], x[1] - h]), &bgrad)[i][0])
                / (2.0 * h);
            assert!((gxx - hs[i][0][0]).abs() < 1e-6 && (gxy - hs[i][0][1]).abs() < 1e-6);
        }
    }

    #[test]
    fn reference_triangle_p1_stiffness() {
        let space = FeSpace::new(ref_triangle(), 1);
        let a = assemble_stiffness_full(&space, &Coefficient::identity()).unwrap();
        let expect = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.get(i, j) - expect[i][j]).abs() <= 1e-13);
            }
        }
    }

    #[test]
    fn reference_triangle_p2_stiffness_closed_form() {
        // closed form P2 stiffness on the reference triangle, vertex-vertex and
        // vertex-edge blocks (see e.g. any FEM textbook); local order is
        // vertices then edge midpoints opposite vertices 0, 1, 2
        let space = FeSpace::new(ref_triangle(), 2);
        let a = element_stiffness(&space, &Coefficient::identity(), 0).unwrap();
        assert!((a[(0, 0)] - 1.0).abs() < 1e-13);
        assert!((a[(1, 1)] - 0.5).abs() < 1e-13);
        assert!((a[(0, 1)] - 1.0 / 6.0).abs() < 1e-13);
        assert!((a[(1, 2)] - 0.0).abs() < 1e-13);
        // midpoint of edge v1v2 (local 3) vs vertex 0: 0
        assert!(a[(0, 3)].abs() < 1e-13);
        // midpoint v0v1 (local 5) vs vertex 0: -2/3
        assert!((a[(0, 5)] + 2.0 / 3.0).abs() < 1e-13);
        // midpoint diagonal
        assert!((a[(3, 3)] - 8.0 / 3.0).abs() < 1e-13);
        assert!((a[(5, 5)] - 8.0 / 3.0).abs() < 1e-13);
        let rowsum: f64 = (0..6).map(|j| a[(2, j)]).sum();
        assert!(rowsum.abs() < 1e-13);
    }

    #[test]
    fn cross_mesh_center_entries() {
        let space = Arc::new(FeSpace::new(Arc::new(cross_mesh()), 1));
        assert_eq!(space.num_interior(), 1);
        let a = assemble_stiffness(&space, &Coefficient::identity()).unwrap();
        assert!((a.get(0, 0) - 4.0).abs() < 1e-13);
        let b = assemble_load(&space, &|_| 1.0, None);
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-14);
        let (u, _) = galerkin_solve(&space, &a, &b, Solver::DirectDense).unwrap();
        assert!((u.interior()[0] - 1.0 / 12.0).abs() < 1e-14);
        let (z, _) = galerkin_solve(&space, &a, &[0.0], Solver::DirectDense).unwrap();
        assert!(z.coeffs().iter().all(|&v| v == 0.0));
        let a2 = assemble_stiffness(&space, &Coefficient::identity().scaled(3.0).unwrap()).unwrap();
        assert!((a2.get(0, 0) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn dof_counts_and_missing_region() {
        let mesh = Arc::new(TriangleMesh::builtin(Domain::CheckerboardSquare, 1).unwrap());
        for p in 1..=4 {
            let s = FeSpace::new(mesh.clone(), p);
            let n = (2 * p + 1) * (2 * p + 1);
            assert_eq!(s.num_dofs(), n);
            assert_eq!(s.num_interior(), (2 * p - 1) * (2 * p - 1));
        }
        let k = Coefficient::scalar_per_region(&[(0, 1.0), (1, 2.0), (2, 3.0)]).unwrap();
        let s = FeSpace::new(mesh, 1);
        assert!(matches!(assemble_stiffness(&s, &k), Err(Error::MissingRegion(3))));
        assert!(Coefficient::constant([[1.0, 2.0], [2.0, 1.0]]).is_err());
    }

    #[test]
    fn polynomial_solution_is_reproduced() {
        // u = x(1-x)y(1-y) is in P4; with p = 4 the Galerkin solution is exact
        let mesh = Arc::new(TriangleMesh::builtin(Domain::UnitSquare, 2).unwrap());
        let space = Arc::new(FeSpace::new(mesh, 4));
        let a = assemble_stiffness(&space, &Coefficient::identity()).unwrap();
        let f = |p: Point| 2.0 * p[1] * (1.0 - p[1]) + 2.0 * p[0] * (1.0 - p[0]);
        let b = assemble_load(&space, &f, Some(8));
        let (u, info) = galerkin_solve(&space, &a, &b, Solver::DirectSparse).unwrap();
        assert!(info.rel_residual < 1e-12);
        let exact = |p: Point| p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]);
        for d in 0..space.num_dofs() {
            assert!((u.coeffs()[d] - exact(space.dof_point(d))).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_and_prolongation_are_exact_for_nested_spaces() {
        let mesh = Arc::new(TriangleMesh::builtin(Domain::LShape, 1).unwrap().refine_uniform().unwrap());
        let p1 = Arc::new(FeSpace::new(mesh.clone(), 1));
        let p3 = FeSpace::new(mesh.clone(), 3);
        let pm = interpolation_matrix(&p1, &p3).unwrap();
        let smooth = p1.interpolate(|x| (x[0] + 2.0 * x[1]).sin());
        let u = FeFunction::from_interior(p1.clone(), &smooth.interior()).unwrap();
        let w = FeFunction::from_interior(Arc::new(p3), &pm.matvec(&u.interior())).unwrap();
        let b = [0.2, 0.5, 0.3];
        for t in 0..mesh.num_triangles() {
            assert!((w.value(t, b) - u.value(t, b)).abs() < 1e-13);
        }
        let fine_mesh = Arc::new(mesh.refine_bisection(&[0, 5, 7]).unwrap());
        let f2 = FeSpace::new(fine_mesh.clone(), 2);
        let c2 = Arc::new(FeSpace::new(mesh.clone(), 2));
        let pr = prolongation_matrix(&c2, &f2).unwrap();
        let full = c2.interpolate(|x| x[0] * x[1]);
        let uc = FeFunction::from_interior(c2.clone(), &full.interior()).unwrap();
        let uf = FeFunction::from_interior(Arc::new(f2), &pr.matvec(&uc.interior())).unwrap();
        let parents = &fine_mesh.genealogy().unwrap().parent;
        for t in 0..fine_mesh.num_triangles() {
            let x = fine_mesh.map_point(t, b);
            let pt = parents[t];
            assert!((uf.value(t, b) - uc.value(pt, mesh.barycentric(pt, x))).abs() < 1e-13);
        }
        assert!(matches!(prolongation_matrix(&f2_clone(&fine_mesh), &c2), Err(Error::NonNested)));
    }

    fn f2_clone(m: &Arc<TriangleMesh>) -> FeSpace {
        FeSpace::new(m.clone(), 2)
    }

    #[test]
    fn energy_norm_properties() {
        let space = Arc::new(FeSpace::new(Arc::new(TriangleMesh::builtin(Domain::UnitSquare, 3).unwrap()), 1));
        let a = assemble_stiffness(&space, &Coefficient::identity()).unwrap();
        let n = space.num_interior();
        assert_eq!(energy_norm(&a, &vec![0.0; n]).unwrap(), 0.0);
        let mut e = vec![0.0; n];
        e[1] = 1.0;
        assert!((energy_norm(&a, &e).unwrap() - a.get(1, 1).sqrt()).abs() < 1e-14);
        let v: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let cv: Vec<f64> = v.iter().map(|x| -3.0 * x).collect();
        assert!((energy_norm(&a, &cv).unwrap() - 3.0 * energy_norm(&a, &v).unwrap()).abs() < 1e-12);
        assert!(energy_norm(&a, &[1.0]).is_err());
    }
}
