//! Additive Schwarz machinery: subspace blocks, the smoother `S`, the
//! preconditioner `B = S + I_h A_h⁻¹ Q_h`, PCG, spectral bounds of `BA` and
//! the dense oracle for the dual characterization of `⟨B⁻¹v, v⟩`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::fem::{prolongation_matrix, FeSpace};
use crate::linalg::{self, CsrMatrix, SparseCholesky};
use crate::mesh::VertexPatch;
use crate::par;

/// How each local operator `A_k` is inverted.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LocalSolver {
    /// `S_k = A_k⁻¹` via dense Cholesky.
    #[default]
    Exact,
    /// `S_k = ω diag(A_k)⁻¹`.
    ScaledJacobi { omega: f64 },
}

/// A local subspace before factorization: a set of fine dofs and an optional
/// basis (columns expressed in those dofs). Without a basis the subspace is
/// spanned by the unit vectors of `dofs`.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub id: usize,
    pub dofs: Vec<usize>,
    pub basis: Option<DMatrix<f64>>,
}

#[derive(Debug)]
enum LocalFactor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Diagonal(Vec<f64>),
}

/// Local block `I_k S_k Q_k` of the smoother.
#[derive(Debug)]
pub struct PatchBlock {
    id: usize,
    dofs: Vec<usize>,
    basis: Option<DMatrix<f64>>,
    op: DMatrix<f64>,
    factor: LocalFactor,
}

impl PatchBlock {
    pub fn id(&self) -> usize {
        self.id
    }
    pub fn dofs(&self) -> &[usize] {
        &self.dofs
    }
    pub fn dim(&self) -> usize {
        self.op.nrows()
    }
    /// `A_k = Q_k A I_k` in the local basis.
    pub fn local_operator(&self) -> &DMatrix<f64> {
        &self.op
    }

    fn restrict(&self, r: &[f64]) -> DVector<f64> {
        let local = DVector::from_iterator(self.dofs.len(), self.dofs.iter().map(|&d| r[d]));
        match &self.basis {
            Some(b) => b.tr_mul(&local),
            None => local,
        }
    }

    fn prolong(&self, y: &DVector<f64>) -> DVector<f64> {
        match &self.basis {
            Some(b) => b * y,
            None => y.clone(),
        }
    }

    fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            LocalFactor::Cholesky(c) => c.solve(r),
            LocalFactor::Diagonal(d) => DVector::from_iterator(r.len(), r.iter().zip(d).map(|(x, s)| x * s)),
        }
    }

    /// `S_k⁻¹` as a dense matrix, for the oracle.
    fn inverse_smoother(&self) -> DMatrix<f64> {
        match &self.factor {
            LocalFactor::Cholesky(_) => self.op.clone(),
            LocalFactor::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_iterator(d.len(), d.iter().map(|s| 1.0 / s))),
        }
    }
}

/// Coarse block `I_h A_h⁻¹ Q_h`.
#[derive(Debug)]
pub struct CoarseBlock {
    embed: CsrMatrix,
    op: CsrMatrix,
    factor: SparseCholesky,
}

impl CoarseBlock {
    /// `embed` maps coarse coefficients to fine ones; `A_h = embedᵀ A embed`.
    pub fn new(a: &CsrMatrix, embed: CsrMatrix) -> Result<Self> {
        if embed.nrows() != a.nrows() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                got: embed.nrows(),
            });
        }
        let op = a.galerkin_product(&embed);
        let factor = SparseCholesky::new(&op)?;
        Ok(Self { embed, op, factor })
    }
    pub fn embedding(&self) -> &CsrMatrix {
        &self.embed
    }
    pub fn operator(&self) -> &CsrMatrix {
        &self.op
    }
    pub fn dim(&self) -> usize {
        self.op.nrows()
    }
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let rc = self.embed.transpose_matvec(r);
        self.embed.matvec(&self.factor.solve(&rc))
    }
}

/// Coarse space plus local blocks over a fine operator `A`.
#[derive(Debug)]
pub struct SubspaceDecomposition {
    a: CsrMatrix,
    coarse: Option<CoarseBlock>,
    blocks: Vec<PatchBlock>,
    overlap: usize,
    coupling: usize,
    gamma_lower: f64,
    gamma_upper: f64,
}

impl SubspaceDecomposition {
    /// Factors every block. Blocks without dofs are dropped with a warning;
    /// a singular `A_k` is an error.
    pub fn new(a: CsrMatrix, coarse: Option<CsrMatrix>, specs: Vec<BlockSpec>, local: LocalSolver) -> Result<Self> {
        let n = a.nrows();
        let mut kept = Vec::with_capacity(specs.len());
        let mut dropped = 0usize;
        for s in specs {
            let cols = s.basis.as_ref().map_or(s.dofs.len(), |b| b.ncols());
            if s.dofs.is_empty() || cols == 0 {
                dropped += 1;
                continue;
            }
            if let Some(&d) = s.dofs.iter().find(|&&d| d >= n) {
                return Err(Error::IndexOutOfRange {
                    what: "block dof",
                    index: d,
                    len: n,
                });
            }
            if let Some(b) = &s.basis {
                if b.nrows() != s.dofs.len() {
                    return Err(Error::DimensionMismatch {
                        expected: s.dofs.len(),
                        got: b.nrows(),
                    });
                }
            }
            kept.push(s);
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} subspace block(s) without interior dofs");
        }
        let built: Vec<Result<(PatchBlock, f64, f64)>> = par::map_slice(&kept, |s| build_block(&a, s, local));
        let mut blocks = Vec::with_capacity(built.len());
        let (mut glo, mut ghi) = (f64::INFINITY, 0.0f64);
        for b in built {
            let (b, lo, hi) = b?;
            glo = glo.min(lo);
            ghi = ghi.max(hi);
            blocks.push(b);
        }
        if blocks.is_empty() {
            glo = 1.0;
            ghi = 1.0;
        }
        let coarse = match coarse {
            Some(p) if p.ncols() > 0 => Some(CoarseBlock::new(&a, p)?),
            Some(p) if p.nrows() != n => {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: p.nrows(),
                })
            }
            _ => None,
        };
        let coupling = coupling_count(&a, &blocks);
        Ok(Self {
            a,
            coarse,
            blocks,
            overlap: coupling,
            coupling,
            gamma_lower: glo,
            gamma_upper: ghi,
        })
    }

    /// Decomposition of `space` into a coarse space and its vertex patches.
    /// The recorded overlap `M` is the patch-intersection count of the mesh.
    pub fn from_vertex_patches(
        space: &FeSpace,
        a: CsrMatrix,
        patches: &[VertexPatch],
        coarse: Option<CsrMatrix>,
        local: LocalSolver,
    ) -> Result<Self> {
        let bmask = space.mesh().boundary_vertex_mask();
        let specs = patches
            .iter()
            .filter(|p| space.degree() > 1 || !bmask[p.vertex])
            .map(|p| BlockSpec {
                id: p.vertex,
                dofs: patch_dofs(space, p),
                basis: None,
            })
            .collect();
        let mut d = Self::new(a, coarse, specs, local)?;
        d.overlap = space.mesh().stats().max_overlap;
        Ok(d)
    }

    pub fn with_overlap(mut self, m: usize) -> Self {
        self.overlap = m;
        self
    }

    pub fn operator(&self) -> &CsrMatrix {
        &self.a
    }
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn coarse(&self) -> Option<&CoarseBlock> {
        self.coarse.as_ref()
    }
    pub fn blocks(&self) -> &[PatchBlock] {
        &self.blocks
    }
    /// Overlap constant `M` used in the upper spectral envelope.
    pub fn overlap(&self) -> usize {
        self.overlap
    }
    /// Largest number of blocks algebraically coupled to one block through `A`.
    pub fn coupling(&self) -> usize {
        self.coupling
    }
    /// `(γ̲, γ̄)` with `γ̲ ⟨A_k⁻¹v,v⟩ ≤ ⟨S_k v,v⟩ ≤ γ̄ ⟨A_k⁻¹v,v⟩`.
    pub fn gamma(&self) -> (f64, f64) {
        (self.gamma_lower, self.gamma_upper)
    }
    /// Upper envelope `2 max(1, γ̄ M)` for `λ_max(BA)`.
    pub fn lambda_max_envelope(&self) -> f64 {
        2.0 * (self.gamma_upper * self.overlap as f64).max(1.0)
    }

    fn check_len(&self, r: &[f64]) -> Result<()> {
        if r.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: r.len(),
            });
        }
        Ok(())
    }

    /// Per-block contributions `⟨Q_k r, S_k Q_k r⟩`, in block order.
    pub fn block_energies(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.check_len(r)?;
        Ok(par::map_slice(&self.blocks, |b| {
            let rk = b.restrict(r);
            rk.dot(&b.solve(&rk))
        }))
    }

    /// `S r = Σ_k I_k S_k Q_k r`.
    pub fn apply_smoother(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.check_len(r)?;
        let parts: Vec<DVector<f64>> = par::map_slice(&self.blocks, |b| b.prolong(&b.solve(&b.restrict(r))));
        let mut out = vec![0.0; self.dim()];
        for (b, y) in self.blocks.iter().zip(&parts) {
            for (&d, v) in b.dofs.iter().zip(y.iter()) {
                out[d] += v;
            }
        }
        Ok(out)
    }

    /// `B r = S r + I_h A_h⁻¹ Q_h r`.
    pub fn apply_preconditioner(&self, r: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.apply_smoother(r)?;
        if let Some(c) = &self.coarse {
            linalg::axpy(1.0, &c.apply(r), &mut out);
        }
        Ok(out)
    }

    /// `B` as a dense matrix, column by column.
    pub fn dense_preconditioner(&self) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let mut b = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply_preconditioner(&e)?;
            e[j] = 0.0;
            b.column_mut(j).copy_from_slice(&col);
        }
        Ok(b)
    }
}

fn build_block(a: &CsrMatrix, s: &BlockSpec, local: LocalSolver) -> Result<(PatchBlock, f64, f64)> {
    let sub = a.submatrix_dense(&s.dofs);
    let op = match &s.basis {
        Some(b) => b.transpose() * &sub * b,
        None => sub,
    };
    let op = 0.5 * (&op + op.transpose());
    let singular = || Error::Singular(format!("local operator of block {}", s.id));
    let (factor, lo, hi) = match local {
        LocalSolver::Exact => {
            let c = nalgebra::Cholesky::new(op.clone()).ok_or_else(singular)?;
            (LocalFactor::Cholesky(c), 1.0, 1.0)
        }
        LocalSolver::ScaledJacobi { omega } => {
            if !(omega > 0.0) {
                return Err(Error::InvalidArgument(format!("Jacobi weight {omega} must be positive")));
            }
            let d = op.diagonal();
            if d.iter().any(|&x| !(x > 0.0)) {
                return Err(singular());
            }
            nalgebra::Cholesky::new(op.clone()).ok_or_else(singular)?;
            let inv_sqrt = DVector::from_iterator(d.len(), d.iter().map(|x| 1.0 / x.sqrt()));
            let scaled = DMatrix::from_fn(d.len(), d.len(), |i, j| omega * inv_sqrt[i] * op[(i, j)] * inv_sqrt[j]);
            let eig = SymmetricEigen::new(scaled).eigenvalues;
            let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = eig.iter().copied().fold(0.0, f64::max);
            (LocalFactor::Diagonal(d.iter().map(|x| omega / x).collect()), lo, hi)
        }
    };
    Ok((
        PatchBlock {
            id: s.id,
            dofs: s.dofs.clone(),
            basis: s.basis.clone(),
            op,
            factor,
        },
        lo,
        hi,
    ))
}

fn coupling_count(a: &CsrMatrix, blocks: &[PatchBlock]) -> usize {
    let n = a.nrows();
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, b) in blocks.iter().enumerate() {
        for &d in &b.dofs {
            owners[d].push(k);
        }
    }
    let mut mark = vec![usize::MAX; blocks.len()];
    let mut best = 0;
    for (k, b) in blocks.iter().enumerate() {
        let mut count = 0;
        for &d in &b.dofs {
            let (cols, _) = a.row(d);
            for &c in cols {
                for &j in &owners[c] {
                    if mark[j] != k {
                        mark[j] = k;
                        count += 1;
                    }
                }
            }
        }
        best = best.max(count);
    }
    best
}

/// Two-level decomposition of `fine`: the coarse block is `coarse` (the
/// parent mesh space) through the nested prolongation, the local blocks are
/// the vertex patches of the fine mesh with exact local solvers.
pub fn two_level(fine: &FeSpace, coarse: &FeSpace, a: CsrMatrix) -> Result<SubspaceDecomposition> {
    let p = prolongation_matrix(coarse, fine)?;
    SubspaceDecomposition::from_vertex_patches(fine, a, &fine.mesh().vertex_patches(), Some(p), LocalSolver::Exact)
}

/// Deterministic trial vectors in `[-1, 1]` for the identity oracle.
pub fn trial_vectors(n: usize, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|j| {
            (0..n)
                .map(|i| {
                    let x = ((i * 7919 + j * 104_729 + 13) as f64 * 0.618_033_988_749_895).fract();
                    2.0 * x - 1.0
                })
                .collect()
        })
        .collect()
}

/// Interior dofs (indices into the interior numbering) of `space` whose nodes
/// lie in the open patch, i.e. off the outer boundary of `Ω_k`.
pub fn patch_dofs(space: &FeSpace, patch: &VertexPatch) -> Vec<usize> {
    let mesh = space.mesh();
    let mut dofs = Vec::new();
    for &t in &patch.triangles {
        let tri = mesh.triangles()[t];
        let corner = tri.iter().position(|&v| v == patch.vertex).expect("patch triangle contains its vertex");
        for (i, &d) in space.triangle_dofs(t).iter().enumerate() {
            if space.element().nodes()[i][corner] == 0 {
                continue;
            }
            if let Some(idx) = space.interior_index(d) {
                dofs.push(idx);
            }
        }
    }
    dofs.sort_unstable();
    dofs.dedup();
    dofs
}

/// PCG options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcgOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for PcgOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            max_iter: 500,
        }
    }
}

/// PCG result with the relative residual and energy functional
/// `J(x) = ½xᵀAx − bᵀx` after every iteration.
#[derive(Debug, Clone)]
pub struct PcgResult {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub energy_history: Vec<f64>,
}

pub fn pcg_solve(a: &CsrMatrix, b: &[f64], d: &SubspaceDecomposition, opts: PcgOptions) -> Result<PcgResult> {
    let n = a.nrows();
    if b.len() != n || d.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: if b.len() != n { b.len() } else { d.dim() },
        });
    }
    let bnorm = linalg::norm2(b);
    let mut x = vec![0.0; n];
    let mut residual_history = vec![1.0];
    let mut energy_history = vec![0.0];
    if bnorm == 0.0 {
        return Ok(PcgResult {
            solution: x,
            iterations: 0,
            residual_history: vec![0.0],
            energy_history,
        });
    }
    let mut r = b.to_vec();
    let mut z = d.apply_preconditioner(&r)?;
    let mut rz = linalg::dot(&r, &z);
    if !(rz > 0.0) {
        return Err(Error::NonPositiveCurvature(rz));
    }
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    for it in 1..=opts.max_iter {
        a.matvec_into(&p, &mut ap);
        let pap = linalg::dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NonPositiveCurvature(pap));
        }
        let alpha = rz / pap;
        linalg::axpy(alpha, &p, &mut x);
        linalg::axpy(-alpha, &ap, &mut r);
        let rel = linalg::norm2(&r) / bnorm;
        residual_history.push(rel);
        let j: f64 = -0.5 * x.iter().zip(b.iter().zip(&r)).map(|(xi, (bi, ri))| xi * (bi + ri)).sum::<f64>();
        energy_history.push(j);
        if rel <= opts.rel_tol {
            return Ok(PcgResult {
                solution: x,
                iterations: it,
                residual_history,
                energy_history,
            });
        }
        z = d.apply_preconditioner(&r)?;
        let rz_new = linalg::dot(&r, &z);
        if !(rz_new > 0.0) {
            return Err(Error::NonPositiveCurvature(rz_new));
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Err(Error::NotConverged {
        max_iter: opts.max_iter,
        rel_residual: *residual_history.last().unwrap(),
    })
}

/// How extreme eigenvalues of `BA` are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpectralMethod {
    DenseEig,
    Lanczos,
    /// Dense up to [`AUTO_DENSE_LIMIT`], Lanczos above.
    #[default]
    Auto,
}

pub const DENSE_CAP: usize = 2000;
pub const AUTO_DENSE_LIMIT: usize = 600;
pub const LANCZOS_STEPS: usize = 200;

/// Extreme eigenvalues of `BA`: the empirical `β̲`, `β̄` with
/// `β̲⟨B⁻¹v,v⟩ ≤ ⟨Av,v⟩ ≤ β̄⟨B⁻¹v,v⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralBounds {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub method: SpectralMethod,
}

impl SpectralBounds {
    pub fn cond(&self) -> f64 {
        self.lambda_max / self.lambda_min
    }
}

pub fn spectral_bounds(d: &SubspaceDecomposition, method: SpectralMethod) -> Result<SpectralBounds> {
    let n = d.dim();
    let method = match method {
        SpectralMethod::Auto if n <= AUTO_DENSE_LIMIT => SpectralMethod::DenseEig,
        SpectralMethod::Auto => SpectralMethod::Lanczos,
        m => m,
    };
    if n == 0 {
        return Err(Error::InvalidArgument("empty operator".into()));
    }
    let eig: Vec<f64> = match method {
        SpectralMethod::DenseEig => {
            if n > DENSE_CAP {
                return Err(Error::DimensionCap { dim: n, cap: DENSE_CAP });
            }
            let chol = linalg::dense_cholesky(d.operator().to_dense(), "fine operator")?;
            let l = chol.l();
            let b = d.dense_preconditioner()?;
            let m = l.transpose() * b * &l;
            let m = 0.5 * (&m + m.transpose());
            SymmetricEigen::new(m).eigenvalues.iter().copied().collect()
        }
        _ => lanczos(d, LANCZOS_STEPS)?,
    };
    let lambda_min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda_max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SpectralBounds {
        lambda_min,
        lambda_max,
        method,
    })
}

/// Ritz values of `BA` from Lanczos in the `A` inner product with full
/// reorthogonalization, started from the normalized all-ones vector.
fn lanczos(d: &SubspaceDecomposition, steps: usize) -> Result<Vec<f64>> {
    let a = d.operator();
    let n = a.nrows();
    let steps = steps.min(n);
    let mut q = vec![1.0; n];
    let mut p = a.matvec(&q);
    let s = linalg::dot(&q, &p).sqrt();
    q.iter_mut().for_each(|x| *x /= s);
    p.iter_mut().for_each(|x| *x /= s);
    let mut qs: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut ps: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut beta: Vec<f64> = Vec::with_capacity(steps);
    for j in 0..steps {
        let mut w = d.apply_preconditioner(&p)?;
        let aj = linalg::dot(&w, &p);
        alpha.push(aj);
        qs.push(q);
        ps.push(p);
        for _ in 0..2 {
            for (qi, pi) in qs.iter().zip(&ps) {
                let c = linalg::dot(&w, pi);
                linalg::axpy(-c, qi, &mut w);
            }
        }
        if j + 1 == steps {
            break;
        }
        let aw = a.matvec(&w);
        let bj = linalg::dot(&w, &aw).max(0.0).sqrt();
        let scale = alpha.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if bj <= 1e-12 * scale {
            break;
        }
        beta.push(bj);
        q = w.iter().map(|x| x / bj).collect();
        p = aw.iter().map(|x| x / bj).collect();
    }
    let m = alpha.len();
    let t = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    Ok(SymmetricEigen::new(t).eigenvalues.iter().copied().collect())
}

pub const IDENTITY_CAP: usize = 200;

/// Checks `⟨B⁻¹v,v⟩ = inf { ⟨A_h v_h,v_h⟩ + Σ⟨S_k⁻¹v_k,v_k⟩ : v = I_h v_h + Σ I_k v_k }`
/// for every trial vector. The left side inverts the dense `B`; the right
/// side solves the equality-constrained minimization through its KKT
/// system. Returns the largest relative discrepancy.
pub fn verify_decomposition_identity(d: &SubspaceDecomposition, trials: &[Vec<f64>]) -> Result<f64> {
    let n = d.dim();
    if n > IDENTITY_CAP {
        return Err(Error::DimensionCap { dim: n, cap: IDENTITY_CAP });
    }
    for v in trials {
        d.check_len(v)?;
    }
    let b = d.dense_preconditioner()?;
    let b = 0.5 * (&b + b.transpose());
    let b_chol = linalg::dense_cholesky(b, "dense preconditioner")?;

    // columns of E and blocks of H, coarse first
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut h_blocks: Vec<DMatrix<f64>> = Vec::new();
    if let Some(c) = &d.coarse {
        let e = c.embed.to_dense();
        for j in 0..e.ncols() {
            cols.push(e.column(j).into_owned());
        }
        h_blocks.push(c.op.to_dense());
    }
    for blk in &d.blocks {
        let m = blk.dim();
        for j in 0..m {
            let mut col = DVector::zeros(n);
            match &blk.basis {
                Some(basis) => {
                    for (i, &dof) in blk.dofs.iter().enumerate() {
                        col[dof] = basis[(i, j)];
                    }
                }
                None => col[blk.dofs[j]] = 1.0,
            }
            cols.push(col);
        }
        h_blocks.push(blk.inverse_smoother());
    }
    let nv = cols.len();
    let mut kkt = DMatrix::zeros(nv + n, nv + n);
    let mut off = 0;
    for h in &h_blocks {
        let m = h.nrows();
        kkt.view_mut((off, off), (m, m)).copy_from(h);
        off += m;
    }
    for (j, col) in cols.iter().enumerate() {
        for i in 0..n {
            kkt[(nv + i, j)] = col[i];
            kkt[(j, nv + i)] = col[i];
        }
    }
    let scale = kkt.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let lu = kkt.full_piv_lu();
    let u = lu.u();
    let min_pivot = (0..u.nrows()).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-12 * scale) {
        return Err(Error::RankDeficient);
    }
    let mut h_full = DMatrix::zeros(nv, nv);
    let mut off = 0;
    for h in &h_blocks {
        let m = h.nrows();
        h_full.view_mut((off, off), (m, m)).copy_from(h);
        off += m;
    }
    let mut worst: f64 = 0.0;
    for v in trials {
        let vv = DVector::from_column_slice(v);
        let lhs = b_chol.solve(&vv).dot(&vv);
        let mut rhs_vec = DVector::zeros(nv + n);
        rhs_vec.rows_mut(nv, n).copy_from(&vv);
        let sol = lu.solve(&rhs_vec).ok_or(Error::RankDeficient)?;
        let z = sol.rows(0, nv).into_owned();
        let rhs = z.dot(&(&h_full * &z));
        let denom = lhs.abs().max(rhs.abs());
        if denom > 0.0 {
            worst = worst.max((lhs - rhs).abs() / denom);
        }
    }
    Ok(worst)
}

/// One row of a verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationRow {
    pub level: usize,
    pub ndof: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub identity_err: Option<f64>,
}

impl VerificationRow {
    pub fn cond(&self) -> f64 {
        self.lambda_max / self.lambda_min
    }
}

/// Per-level spectral history of a decomposition family.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerificationReport {
    pub rows: Vec<VerificationRow>,
}

impl VerificationReport {
    pub const HEADER: &'static str = "level,ndof,lambda_min,lambda_max,cond,identity_err";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let id = r.identity_err.map(|e| e.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.level,
                r.ndof,
                r.lambda_min,
                r.lambda_max,
                r.cond(),
                id
            ));
        }
        s
    }
}
