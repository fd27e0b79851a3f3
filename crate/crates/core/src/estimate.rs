//! A posteriori estimators: residual data, the explicit residual estimator,
//! bubble and enriched vertex-patch estimators, the smoother estimate
//! `⟨r, Sr⟩` and data oscillation.
//!
//! Patch problems live in an ambient Lagrange space `W` of degree `p + q`
//! with zero trace on the current mesh. The enriched space of patch `k` is
//! the part of `W` supported in `Ω_k`; the bubble space is spanned by
//! `φ_T P_{p-1}` and `φ_e P_{p-1}`, written as nodal vectors of `W` with
//! `q = 2`. The coarse block of the estimator decomposition is `V_h`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::fem::{apply_k, assemble_stiffness, edge_points, interpolation_matrix, Coefficient, FeFunction, FeSpace, ResidualFunctional, ScalarField};
use crate::linalg::CsrMatrix;
use crate::mesh::{Point, TriangleMesh, VertexPatch};
use crate::par;
use crate::quadrature::{triangle_rule, TriangleRule};
use crate::schwarz::{patch_dofs, BlockSpec, LocalSolver, SubspaceDecomposition};

/// Residual jump on one interior edge.
#[derive(Debug, Clone)]
pub struct EdgeResidual {
    pub edge: usize,
    pub h_e: f64,
    /// `(x, weight)` with the edge length folded into the weight.
    pub points: Vec<(Point, f64)>,
    /// `K∇u_h|_{T1}·n1 + K∇u_h|_{T2}·n2` at the points.
    pub jump: Vec<f64>,
}

impl EdgeResidual {
    pub fn norm_sq(&self) -> f64 {
        self.points.iter().zip(&self.jump).map(|((_, w), j)| w * j * j).sum()
    }
}

/// Element residuals `r_T = (f + div K∇u_h)|_T` at quadrature nodes and
/// interior edge jumps `r_e`.
#[derive(Debug, Clone)]
pub struct ResidualData {
    pub rule: TriangleRule,
    /// `r_T` at the nodes of `rule`, per triangle.
    pub element: Vec<Vec<f64>>,
    /// `f` at the same nodes.
    pub source: Vec<Vec<f64>>,
    pub area: Vec<f64>,
    pub h_t: Vec<f64>,
    pub edges: Vec<EdgeResidual>,
}

impl ResidualData {
    pub fn element_norm_sq(&self, t: usize) -> f64 {
        self.rule
            .weights
            .iter()
            .zip(&self.element[t])
            .map(|(w, r)| w * self.area[t] * r * r)
            .sum()
    }
}

pub fn residual_data(k: &Coefficient, f: &ScalarField, u_h: &FeFunction, order: usize) -> Result<ResidualData> {
    let space = u_h.space();
    let mesh = space.mesh();
    for &r in mesh.regions() {
        k.get(r)?;
    }
    let p = space.degree();
    let rule = triangle_rule(order.max(2 * p));
    let per_tri: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(mesh.num_triangles(), |t| {
        let kt = k.get(mesh.regions()[t]).expect("checked");
        let mut res = Vec::with_capacity(rule.points.len());
        let mut src = Vec::with_capacity(rule.points.len());
        for q in &rule.points {
            let fx = f(mesh.map_point(t, *q));
            let h = u_h.hessian(t, *q);
            let div = kt[0][0] * h[0][0] + kt[0][1] * h[1][0] + kt[1][0] * h[0][1] + kt[1][1] * h[1][1];
            src.push(fx);
            res.push(fx + div);
        }
        (res, src)
    });
    let (element, source): (Vec<_>, Vec<_>) = per_tri.into_iter().unzip();
    let interior: Vec<usize> = (0..mesh.num_edges()).filter(|&e| mesh.edges()[e].interior).collect();
    let edge_order = 2 * p + 2;
    let edges = par::map_slice(&interior, |&e| edge_residual(mesh, k, u_h, e, edge_order));
    Ok(ResidualData {
        rule,
        element,
        source,
        area: (0..mesh.num_triangles()).map(|t| mesh.area(t)).collect(),
        h_t: (0..mesh.num_triangles()).map(|t| mesh.diameter(t)).collect(),
        edges,
    })
}

/// Unit normal of edge `e` pointing out of triangle `t`.
fn outward_normal(mesh: &TriangleMesh, t: usize, e: usize) -> [f64; 2] {
    let [a, b] = mesh.edges()[e].vertices;
    let (pa, pb) = (mesh.vertices()[a], mesh.vertices()[b]);
    let len = mesh.edge_length(e);
    let mut n = [(pb[1] - pa[1]) / len, -(pb[0] - pa[0]) / len];
    let c = mesh.corners(t);
    let centroid = [(c[0][0] + c[1][0] + c[2][0]) / 3.0, (c[0][1] + c[1][1] + c[2][1]) / 3.0];
    if (centroid[0] - pa[0]) * n[0] + (centroid[1] - pa[1]) * n[1] > 0.0 {
        n = [-n[0], -n[1]];
    }
    n
}

fn edge_residual(mesh: &TriangleMesh, k: &Coefficient, u_h: &FeFunction, e: usize, order: usize) -> EdgeResidual {
    let [t1, t2] = mesh.edges()[e].triangles;
    let n1 = outward_normal(mesh, t1, e);
    let k1 = k.get(mesh.regions()[t1]).expect("checked");
    let k2 = k.get(mesh.regions()[t2]).expect("checked");
    let points = edge_points(mesh, e, order);
    let jump = points
        .iter()
        .map(|&(x, _)| {
            let g1 = apply_k(&k1, u_h.gradient(t1, mesh.barycentric(t1, x)));
            let g2 = apply_k(&k2, u_h.gradient(t2, mesh.barycentric(t2, x)));
            (g1[0] - g2[0]) * n1[0] + (g1[1] - g2[1]) * n1[1]
        })
        .collect();
    EdgeResidual {
        edge: e,
        h_e: mesh.edge_length(e),
        points,
        jump,
    }
}

/// Explicit residual estimator, per vertex and per element (not squared).
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitEstimate {
    pub zeta_vertex: Vec<f64>,
    pub zeta_element: Vec<f64>,
}

/// `ζ_k² = Σ_{T∈𝒯_k} h_T²‖r_T‖² + Σ_{e∈ℰ_k} h_e‖r_e‖²` and
/// `ζ_T² = h_T²‖r_T‖² + ½ Σ_{e⊂∂T} h_e‖r_e‖²`.
pub fn explicit_estimator(data: &ResidualData, mesh: &TriangleMesh) -> ExplicitEstimate {
    let mut zv = vec![0.0; mesh.num_vertices()];
    let mut zt = vec![0.0; mesh.num_triangles()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let term = data.h_t[t] * data.h_t[t] * data.element_norm_sq(t);
        zt[t] += term;
        for &v in tri {
            zv[v] += term;
        }
    }
    for er in &data.edges {
        let term = er.h_e * er.norm_sq();
        let edge = &mesh.edges()[er.edge];
        for &v in &edge.vertices {
            zv[v] += term;
        }
        for &t in &edge.triangles {
            zt[t] += 0.5 * term;
        }
    }
    ExplicitEstimate {
        zeta_vertex: zv.into_iter().map(f64::sqrt).collect(),
        zeta_element: zt.into_iter().map(f64::sqrt).collect(),
    }
}

/// The ambient space `W`, its stiffness matrix, the residual `⟨r, w_i⟩` and
/// the embedding of `V_h`.
#[derive(Debug)]
pub struct AmbientSpace {
    pub space: Arc<FeSpace>,
    pub a: CsrMatrix,
    pub residual: Vec<f64>,
    pub embed: CsrMatrix,
}

impl AmbientSpace {
    pub fn new(rf: &ResidualFunctional, degree: usize) -> Result<Self> {
        let vh = rf.solution().space();
        let space = Arc::new(FeSpace::new(vh.mesh_arc().clone(), degree));
        let a = assemble_stiffness(&space, rf.coefficient())?;
        let residual = rf.vector(&space)?;
        let embed = interpolation_matrix(vh, &space)?;
        Ok(Self {
            space,
            a,
            residual,
            embed,
        })
    }

    pub fn degree(&self) -> usize {
        self.space.degree()
    }
}

/// `φ_T P_{p-1} + Σ φ_e P_{p-1}` on one vertex patch, as nodal vectors in a
/// degree `p + 2` ambient space.
#[derive(Debug, Clone)]
pub struct BubbleSpace {
    pub vertex: usize,
    /// Interior dofs of the ambient space inside the patch.
    pub dofs: Vec<usize>,
    /// Raw bubble-times-polynomial vectors, one per column.
    pub raw: DMatrix<f64>,
    /// Energy-orthonormal basis of the span of `raw` after rank filtering.
    pub basis: DMatrix<f64>,
}

impl BubbleSpace {
    pub fn raw_dim(&self) -> usize {
        self.raw.ncols()
    }
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// Monomials of `P_m` in coordinates centred at `c` and scaled by `h`.
fn scaled_monomials(m: usize, c: Point, h: f64, x: Point) -> Vec<f64> {
    let (u, v) = ((x[0] - c[0]) / h, (x[1] - c[1]) / h);
    let mut out = Vec::new();
    for deg in 0..=m {
        for j in 0..=deg {
            out.push(u.powi((deg - j) as i32) * v.powi(j as i32));
        }
    }
    out
}

pub const RANK_TOL: f64 = 1e-10;

pub fn build_bubble_space(patch: &VertexPatch, amb: &AmbientSpace, p: usize) -> Result<BubbleSpace> {
    let w = &amb.space;
    if w.degree() != p + 2 {
        return Err(Error::InvalidArgument(format!(
            "bubble space for p = {p} needs an ambient degree {} space, got {}",
            p + 2,
            w.degree()
        )));
    }
    if patch.triangles.is_empty() {
        return Err(Error::InvalidArgument(format!("patch of vertex {} is empty", patch.vertex)));
    }
    let mesh = w.mesh();
    let dofs = patch_dofs(w, patch);
    let mut pos = std::collections::HashMap::with_capacity(dofs.len());
    for (i, &d) in dofs.iter().enumerate() {
        pos.insert(d, i);
    }
    // one (triangle, barycentric) location per local dof
    let mut loc: Vec<Option<(usize, [f64; 3])>> = vec![None; dofs.len()];
    for &t in &patch.triangles {
        for (i, &d) in w.triangle_dofs(t).iter().enumerate() {
            if let Some(idx) = w.interior_index(d) {
                if let Some(&j) = pos.get(&idx) {
                    loc[j].get_or_insert((t, w.element().node_bary(i)));
                }
            }
        }
    }
    let xk = mesh.vertices()[patch.vertex];
    let hk = patch.diameter;
    let npoly = p * (p + 1) / 2;
    let nraw = (patch.triangles.len() + patch.interior_edges.len()) * npoly;
    let mut raw = DMatrix::zeros(dofs.len(), nraw);
    for (j, l) in loc.iter().enumerate() {
        let (t, bary) = l.expect("every patch dof has a location");
        let x = mesh.map_point(t, bary);
        let q = scaled_monomials(p - 1, xk, hk, x);
        let mut col = 0;
        for &bt in &patch.triangles {
            let phi = if bt == t { 27.0 * bary[0] * bary[1] * bary[2] } else { 0.0 };
            for qi in &q {
                raw[(j, col)] = phi * qi;
                col += 1;
            }
        }
        for &e in &patch.interior_edges {
            let edge = &mesh.edges()[e];
            let phi = if edge.triangles.contains(&t) {
                let tri = mesh.triangles()[t];
                let ia = tri.iter().position(|&v| v == edge.vertices[0]).expect("edge of triangle");
                let ib = tri.iter().position(|&v| v == edge.vertices[1]).expect("edge of triangle");
                4.0 * bary[ia] * bary[ib]
            } else {
                0.0
            };
            for qi in &q {
                raw[(j, col)] = phi * qi;
                col += 1;
            }
        }
    }
    let a_loc = amb.a.submatrix_dense(&dofs);
    let gram = raw.transpose() * &a_loc * &raw;
    let gram = 0.5 * (&gram + gram.transpose());
    let eig = SymmetricEigen::new(gram);
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > RANK_TOL * lmax)
        .collect();
    if keep.is_empty() {
        return Err(Error::Singular(format!("bubble space of vertex {} is empty", patch.vertex)));
    }
    let mut basis = DMatrix::zeros(dofs.len(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let v = &raw * eig.eigenvectors.column(i) / eig.eigenvalues[i].sqrt();
        basis.column_mut(c).copy_from(&v);
    }
    Ok(BubbleSpace {
        vertex: patch.vertex,
        dofs,
        raw,
        basis,
    })
}

/// `η̃_k = ‖η̃_k‖_A` for the bubble space solution of the local problem.
pub fn patch_estimate(bubble: &BubbleSpace, amb: &AmbientSpace) -> Result<f64> {
    let a_loc = amb.a.submatrix_dense(&bubble.dofs);
    let r_loc = DVector::from_iterator(bubble.dofs.len(), bubble.dofs.iter().map(|&d| amb.residual[d]));
    local_energy(&bubble.basis, &a_loc, &r_loc, bubble.vertex)
}

fn local_energy(basis: &DMatrix<f64>, a_loc: &DMatrix<f64>, r_loc: &DVector<f64>, id: usize) -> Result<f64> {
    let op = basis.transpose() * a_loc * basis;
    let op = 0.5 * (&op + op.transpose());
    let rhs = basis.tr_mul(r_loc);
    let chol = nalgebra::Cholesky::new(op).ok_or_else(|| Error::Singular(format!("local operator of block {id}")))?;
    Ok(rhs.dot(&chol.solve(&rhs)).max(0.0).sqrt())
}

/// `η_k^{(q)}`: the local problem on all ambient dofs inside the patch.
pub fn enriched_patch_estimate(patch: &VertexPatch, amb: &AmbientSpace) -> Result<f64> {
    let dofs = patch_dofs(&amb.space, patch);
    if dofs.is_empty() {
        return Ok(0.0);
    }
    let a_loc = amb.a.submatrix_dense(&dofs);
    let r_loc = DVector::from_iterator(dofs.len(), dofs.iter().map(|&d| amb.residual[d]));
    let id = DMatrix::identity(dofs.len(), dofs.len());
    local_energy(&id, &a_loc, &r_loc, patch.vertex)
}

/// Coarse `V_h` plus the enriched patch blocks of every vertex.
pub fn enriched_decomposition(amb: &AmbientSpace, patches: &[VertexPatch]) -> Result<SubspaceDecomposition> {
    let specs = patches
        .iter()
        .map(|p| BlockSpec {
            id: p.vertex,
            dofs: patch_dofs(&amb.space, p),
            basis: None,
        })
        .collect();
    Ok(SubspaceDecomposition::new(amb.a.clone(), Some(amb.embed.clone()), specs, LocalSolver::Exact)?
        .with_overlap(amb.space.mesh().stats().max_overlap))
}

/// Coarse `V_h` plus the bubble blocks of every vertex.
pub fn bubble_decomposition(amb: &AmbientSpace, bubbles: &[BubbleSpace]) -> Result<SubspaceDecomposition> {
    let specs = bubbles
        .iter()
        .map(|b| BlockSpec {
            id: b.vertex,
            dofs: b.dofs.clone(),
            basis: Some(b.basis.clone()),
        })
        .collect();
    Ok(SubspaceDecomposition::new(amb.a.clone(), Some(amb.embed.clone()), specs, LocalSolver::Exact)?
        .with_overlap(amb.space.mesh().stats().max_overlap))
}

/// `⟨r, Sr⟩ = Σ_k ⟨Q_k r, S_k Q_k r⟩`.
pub fn smoother_estimate(d: &SubspaceDecomposition, r: &[f64]) -> Result<f64> {
    Ok(d.block_energies(r)?.iter().sum())
}

/// Data oscillation, per element squared and total.
#[derive(Debug, Clone, PartialEq)]
pub struct Oscillation {
    /// `h_T²‖f − Q_T f‖²_T`.
    pub element: Vec<f64>,
    pub total: f64,
}

/// `osc = (Σ_T h_T²‖f − Q_T f‖²_T)^{1/2}` with `Q_T` the L² projection onto
/// `P_{p-1}(T)`.
pub fn data_oscillation(mesh: &TriangleMesh, f: &(dyn Fn(Point) -> f64 + Sync), p: usize, order: usize) -> Oscillation {
    let rule = triangle_rule(order.max(2 * p + 6));
    let element: Vec<f64> = par::map_range(mesh.num_triangles(), |t| {
        let area = mesh.area(t);
        let fv: Vec<f64> = rule.points.iter().map(|q| f(mesh.map_point(t, *q))).collect();
        let proj: Vec<f64> = if p == 1 {
            let mean: f64 = rule.weights.iter().zip(&fv).map(|(w, v)| w * v).sum();
            vec![mean; fv.len()]
        } else {
            let el = crate::fem::LagrangeElement::new(p - 1);
            let n = el.num_local();
            let mut mass = DMatrix::<f64>::zeros(n, n);
            let mut rhs = DVector::<f64>::zeros(n);
            let vals: Vec<Vec<f64>> = rule.points.iter().map(|q| el.values(*q)).collect();
            for ((w, v), fx) in rule.weights.iter().zip(&vals).zip(&fv) {
                for i in 0..n {
                    rhs[i] += w * v[i] * fx;
                    for j in 0..n {
                        mass[(i, j)] += w * v[i] * v[j];
                    }
                }
            }
            let c = mass.cholesky().expect("mass matrix is SPD").solve(&rhs);
            vals.iter().map(|v| v.iter().zip(c.iter()).map(|(a, b)| a * b).sum()).collect()
        };
        let h = mesh.diameter(t);
        let err: f64 = rule
            .weights
            .iter()
            .zip(fv.iter().zip(&proj))
            .map(|(w, (a, b))| w * area * (a - b) * (a - b))
            .sum();
        h * h * err
    });
    let total = element.iter().sum::<f64>().sqrt();
    Oscillation { element, total }
}

/// All indicators of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorReport {
    pub q: usize,
    pub eta_tilde: Vec<f64>,
    pub eta_enriched: Vec<f64>,
    pub zeta_vertex: Vec<f64>,
    pub zeta_element: Vec<f64>,
    pub osc_element: Vec<f64>,
    pub osc: f64,
    /// `⟨r, Sr⟩` with the enriched patch blocks.
    pub smoother: f64,
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

impl EstimatorReport {
    pub fn eta_tilde_sq(&self) -> f64 {
        sum_sq(&self.eta_tilde)
    }
    pub fn eta_enriched_sq(&self) -> f64 {
        sum_sq(&self.eta_enriched)
    }
    /// `Σ_k ζ_k²`.
    pub fn zeta_sq(&self) -> f64 {
        sum_sq(&self.zeta_vertex)
    }
    /// `Σ_T ζ_T²`.
    pub fn zeta_element_sq(&self) -> f64 {
        sum_sq(&self.zeta_element)
    }
    /// `(ζ_total / error, η̃_total / error)`.
    pub fn effectivity(&self, error: f64) -> (f64, f64) {
        (self.zeta_sq().sqrt() / error, self.eta_tilde_sq().sqrt() / error)
    }

    /// `kind,id,value` rows followed by totals rows with an empty id.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,id,value\n");
        let mut push = |kind: &str, v: &[f64]| {
            for (i, x) in v.iter().enumerate() {
                s.push_str(&format!("{kind},{i},{x}\n"));
            }
        };
        push("eta_tilde", &self.eta_tilde);
        push("eta_enriched", &self.eta_enriched);
        push("zeta_vertex", &self.zeta_vertex);
        push("zeta_element", &self.zeta_element);
        push("osc_element", &self.osc_element);
        for (k, v) in [
            ("total_eta_tilde_sq", self.eta_tilde_sq()),
            ("total_eta_enriched_sq", self.eta_enriched_sq()),
            ("total_zeta_sq", self.zeta_sq()),
            ("total_smoother", self.smoother),
            ("total_osc", self.osc),
        ] {
            s.push_str(&format!("{k},,{v}\n"));
        }
        s
    }
}

/// Everything the estimator phase produces for one level.
#[derive(Debug)]
pub struct EstimatorOutput {
    pub report: EstimatorReport,
    pub residual_data: ResidualData,
    /// Ambient space of degree `p + q` used by the enriched blocks.
    pub ambient: AmbientSpace,
    /// Coarse `V_h` plus enriched patch blocks.
    pub decomposition: SubspaceDecomposition,
}

/// Runs every estimator on the Galerkin solution held by `rf`.
pub fn estimate_all(rf: &ResidualFunctional, q: usize) -> Result<EstimatorOutput> {
    if !(1..=4).contains(&q) {
        return Err(Error::InvalidArgument(format!("enrichment order q = {q} outside 1..=4")));
    }
    let u_h = rf.solution();
    let space = u_h.space();
    let mesh = space.mesh();
    let p = space.degree();
    let patches = mesh.vertex_patches();
    let data = residual_data(rf.coefficient(), rf.source(), u_h, rf.order())?;
    let explicit = explicit_estimator(&data, mesh);
    let f = rf.source().clone();
    let osc = data_oscillation(mesh, &*f, p, rf.order());

    let enriched = AmbientSpace::new(rf, p + q)?;
    let decomposition = enriched_decomposition(&enriched, &patches)?;
    let mut eta_enriched = vec![0.0; mesh.num_vertices()];
    for (b, e) in decomposition.blocks().iter().zip(decomposition.block_energies(&enriched.residual)?) {
        eta_enriched[b.id()] = e.max(0.0).sqrt();
    }
    let smoother = smoother_estimate(&decomposition, &enriched.residual)?;

    let bubble_amb_owned;
    let bubble_amb = if q == 2 {
        &enriched
    } else {
        bubble_amb_owned = AmbientSpace::new(rf, p + 2)?;
        &bubble_amb_owned
    };
    let bubbles: Vec<Result<BubbleSpace>> = par::map_slice(&patches, |pt| build_bubble_space(pt, bubble_amb, p));
    let bubbles: Vec<BubbleSpace> = bubbles.into_iter().collect::<Result<_>>()?;
    let eta: Vec<Result<f64>> = par::map_slice(&bubbles, |b| patch_estimate(b, bubble_amb));
    let eta_tilde: Vec<f64> = eta.into_iter().collect::<Result<_>>()?;

    Ok(EstimatorOutput {
        report: EstimatorReport {
            q,
            eta_tilde,
            eta_enriched,
            zeta_vertex: explicit.zeta_vertex,
            zeta_element: explicit.zeta_element,
            osc_element: osc.element,
            osc: osc.total,
            smoother,
        },
        residual_data: data,
        ambient: enriched,
        decomposition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_load, galerkin_solve, Solver};
    use crate::mesh::{cross_mesh, uniform_mesh, Domain};

    fn solve(mesh: TriangleMesh, p: usize, f: ScalarField, order: usize) -> ResidualFunctional {
        let space = Arc::new(FeSpace::new(Arc::new(mesh), p));
        let k = Coefficient::identity();
        let a = assemble_stiffness(&space, &k).unwrap();
        let b = assemble_load(&space, &*f, Some(order));
        let (u, _) = galerkin_solve(&space, &a, &b, Solver::DirectDense).unwrap();
        ResidualFunctional::new(&k, f, &u, order)
    }

    fn one() -> ScalarField {
        Arc::new(|_| 1.0)
    }

    #[test]
    fn cross_mesh_bubble_dimensions() {
        let rf = solve(cross_mesh(), 1, one(), 4);
        let amb = AmbientSpace::new(&rf, 3).unwrap();
        let patches = rf.solution().space().mesh().vertex_patches();
        let c = build_bubble_space(&patches[4], &amb, 1).unwrap();
        assert_eq!((c.raw_dim(), c.dim()), (8, 8));
        let corner = build_bubble_space(&patches[0], &amb, 1).unwrap();
        assert_eq!(corner.dim(), patches[0].triangles.len() + patches[0].interior_edges.len());

        let rf2 = solve(cross_mesh(), 2, one(), 6);
        let amb2 = AmbientSpace::new(&rf2, 4).unwrap();
        let c2 = build_bubble_space(&patches[4], &amb2, 2).unwrap();
        assert_eq!(c2.raw_dim(), 24);
        assert!(c2.dim() <= 24 && c2.dim() >= 20);
    }

    #[test]
    fn cross_mesh_jumps_are_symmetric() {
        let rf = solve(cross_mesh(), 1, one(), 4);
        let data = residual_data(rf.coefficient(), rf.source(), rf.solution(), 4).unwrap();
        assert_eq!(data.edges.len(), 4);
        // u_h = φ_c/12; |∇φ_c| = 2 on every triangle, the spokes carry a
        // normal derivative jump of 2·(1/12)·√2 in magnitude
        let expect = 2.0 * 2.0f64.sqrt() / 12.0;
        for er in &data.edges {
            for j in &er.jump {
                assert!((j.abs() - expect).abs() < 1e-13, "{j}");
            }
        }
    }

    #[test]
    fn osc_of_piecewise_low_degree_vanishes() {
        let mesh = uniform_mesh(Domain::UnitSquare, 2).unwrap();
        assert!(data_oscillation(&mesh, &|_| 1.0, 1, 4).total < 1e-14);
        assert!(data_oscillation(&mesh, &|x| 2.0 * x[0] - x[1], 2, 6).total < 1e-13);
        assert!(data_oscillation(&mesh, &|x| x[0] * x[0], 2, 6).total > 1e-4);
    }

    #[test]
    fn report_totals_and_csv() {
        let rf = solve(uniform_mesh(Domain::UnitSquare, 2).unwrap(), 1, Arc::new(|x| x[0] * x[1]), 6);
        let out = estimate_all(&rf, 2).unwrap();
        let r = &out.report;
        let parts: f64 = out.decomposition.block_energies(&out.ambient.residual).unwrap().iter().sum();
        assert!((r.smoother - parts).abs() <= 1e-12 * parts);
        assert!((r.smoother - r.eta_enriched_sq()).abs() <= 1e-12 * r.smoother);
        for (a, b) in r.eta_tilde.iter().zip(&r.eta_enriched) {
            assert!(*a <= b + 1e-10);
        }
        let csv = r.to_csv();
        assert!(csv.starts_with("kind,id,value\n"));
        assert!(csv.contains("total_zeta_sq,,"));
        assert!(estimate_all(&rf, 0).is_err());
    }
}
