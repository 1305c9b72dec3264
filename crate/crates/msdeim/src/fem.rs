//! P1 finite element assembly on the fine mesh and sparse linear algebra.
//!
//! Stiffness uses exact one-point quadrature on the constant gradients;
//! the load vector and all nonlinear terms use nodal (vertex) quadrature,
//! consistent with the discrete product form `F(U) = A (b(U) .* U)`.

use std::fmt::Write as _;

use crate::grid::FineMesh;
use crate::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from unsorted triplets, summing duplicates.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
        for &(i, j, v) in triplets {
            rows[i].push((j, v));
        }
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in &mut rows {
            row.sort_unstable_by_key(|&(j, _)| j);
            let mut last: Option<usize> = None;
            for &(j, v) in row.iter() {
                if last == Some(j) {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(j);
                    values.push(v);
                    last = Some(j);
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n_rows: n,
            n_cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n_rows {
            let mut acc = 0.0;
            for (j, v) in self.row(i) {
                acc += v * x[j];
            }
            y[i] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, i)).collect()
    }

    /// `max_ij |A_ij - A_ji|`, zero for symmetric matrices.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Serialize in the plain-text triplet format:
    /// header `rows cols nnz`, then one `i j v` line per stored entry.
    pub fn to_triplet_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} {} {}", self.n_rows, self.n_cols, self.nnz()).unwrap();
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                writeln!(s, "{} {} {:.17e}", i, j, v).unwrap();
            }
        }
        s
    }

    /// Parse the triplet text format produced by [`CsrMatrix::to_triplet_text`].
    pub fn from_triplet_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::BundleMismatch("empty triplet file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::BundleMismatch(format!("bad header: {header}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::BundleMismatch(format!("bad header: {header}")));
        }
        let mut triplets = Vec::with_capacity(dims[2]);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse_err = || Error::BundleMismatch(format!("bad triplet line: {line}"));
            let i: usize = it.next().ok_or_else(parse_err)?.parse().map_err(|_| parse_err())?;
            let j: usize = it.next().ok_or_else(parse_err)?.parse().map_err(|_| parse_err())?;
            let v: f64 = it.next().ok_or_else(parse_err)?.parse().map_err(|_| parse_err())?;
            triplets.push((i, j, v));
        }
        if triplets.len() != dims[2] {
            return Err(Error::BundleMismatch(format!(
                "expected {} entries, found {}",
                dims[2],
                triplets.len()
            )));
        }
        Ok(CsrMatrix::from_triplets(dims[0], dims[1], &triplets))
    }
}

/// Reference P1 gradients on a triangle with vertices `p`, scaled so that
/// `grads[k]` is the gradient of the hat function of vertex `k`.
pub fn p1_gradients(p: &[[f64; 2]; 3]) -> ([[f64; 2]; 3], f64) {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let area = 0.5 * det.abs();
    let inv = 1.0 / det;
    let grads = [
        [(p[1][1] - p[2][1]) * inv, (p[2][0] - p[1][0]) * inv],
        [(p[2][1] - p[0][1]) * inv, (p[0][0] - p[2][0]) * inv],
        [(p[0][1] - p[1][1]) * inv, (p[1][0] - p[0][0]) * inv],
    ];
    (grads, area)
}

/// Assemble the fine stiffness matrix with per-element coefficient `kappa`.
pub fn assemble_stiffness(mesh: &FineMesh, kappa: &[f64]) -> Result<CsrMatrix> {
    if kappa.len() != mesh.triangles.len() {
        return Err(Error::DimensionMismatch {
            expected: mesh.triangles.len(),
            got: kappa.len(),
            context: "per-element coefficient",
        });
    }
    for (e, &k) in kappa.iter().enumerate() {
        if !(k > 0.0) {
            return Err(Error::NonPositiveCoefficient { element: e, value: k });
        }
    }
    let mut triplets = Vec::with_capacity(9 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let p = [mesh.nodes[tri[0]], mesh.nodes[tri[1]], mesh.nodes[tri[2]]];
        let (grads, area) = p1_gradients(&p);
        for a in 0..3 {
            for b in 0..3 {
                let v = kappa[t] * area * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
                triplets.push((tri[a], tri[b], v));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(mesh.n_nodes(), mesh.n_nodes(), &triplets))
}

/// Assemble the consistent P1 mass matrix, optionally weighted by a
/// per-element coefficient.
pub fn assemble_mass_weighted(mesh: &FineMesh, weight: Option<&[f64]>) -> CsrMatrix {
    let mut triplets = Vec::with_capacity(9 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let area = mesh.triangle_area(t);
        let w = weight.map_or(1.0, |w| w[t]);
        for a in 0..3 {
            for b in 0..3 {
                let v = w * area / 12.0 * if a == b { 2.0 } else { 1.0 };
                triplets.push((tri[a], tri[b], v));
            }
        }
    }
    CsrMatrix::from_triplets(mesh.n_nodes(), mesh.n_nodes(), &triplets)
}

/// Assemble the consistent P1 mass matrix.
pub fn assemble_mass(mesh: &FineMesh) -> CsrMatrix {
    assemble_mass_weighted(mesh, None)
}

/// Lumped mass diagonal: one third of the incident triangle areas per node.
pub fn lumped_mass(mesh: &FineMesh) -> Vec<f64> {
    let mut lump = vec![0.0; mesh.n_nodes()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let third = mesh.triangle_area(t) / 3.0;
        for &a in tri {
            lump[a] += third;
        }
    }
    lump
}

/// Load vector by nodal quadrature: `H_i = lump_i * h(x_i)`.
pub fn assemble_load<F: Fn(f64, f64) -> f64>(mesh: &FineMesh, h: F) -> Vec<f64> {
    lumped_mass(mesh)
        .iter()
        .zip(&mesh.nodes)
        .map(|(&m, p)| m * h(p[0], p[1]))
        .collect()
}

/// Symmetric Dirichlet elimination: boundary rows and columns are replaced by
/// the identity and the right-hand side is zeroed on boundary nodes.
pub fn apply_dirichlet(matrix: &CsrMatrix, rhs: &[f64], mask: &[bool]) -> (CsrMatrix, Vec<f64>) {
    let mut triplets = Vec::with_capacity(matrix.nnz());
    for i in 0..matrix.n_rows {
        if mask[i] {
            triplets.push((i, i, 1.0));
            continue;
        }
        for (j, v) in matrix.row(i) {
            if !mask[j] {
                triplets.push((i, j, v));
            }
        }
    }
    let out = CsrMatrix::from_triplets(matrix.n_rows, matrix.n_cols, &triplets);
    let rhs = rhs
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask[i] { 0.0 } else { v })
        .collect();
    (out, rhs)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Conjugate gradients with a Jacobi (diagonal) preconditioner.
///
/// Converges to relative residual `tol`; on failure returns the residual
/// history tail inside the error.
pub fn solve_cg(matrix: &CsrMatrix, rhs: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = matrix.n_rows;
    let diag = matrix.diagonal();
    let precond = |r: &[f64]| -> Vec<f64> {
        r.iter()
            .zip(&diag)
            .map(|(&ri, &di)| if di.abs() > 0.0 { ri / di } else { ri })
            .collect()
    };

    let rhs_norm = norm2(rhs);
    if rhs_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut history = Vec::new();
    let mut ax = vec![0.0; n];

    for it in 0..max_iter {
        matrix.matvec_into(&p, &mut ax);
        let alpha = rz / dot(&p, &ax);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ax[i];
        }
        let rel = norm2(&r) / rhs_norm;
        history.push(rel);
        if rel <= tol {
            return Ok(x);
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        if it + 1 == max_iter {
            break;
        }
    }
    let tail = history.iter().rev().take(5).rev().copied().collect();
    Err(Error::SolverDiverged {
        iterations: max_iter,
        residual: *history.last().unwrap_or(&f64::INFINITY),
        history: tail,
    })
}

/// Default linear solve used throughout: CG at relative residual `1e-10`.
pub fn solve_linear(matrix: &CsrMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    solve_cg(matrix, rhs, 1e-10, 20 * matrix.n_rows.max(100))
}

/// Evaluate `A (b(U) .* U)` where `b` is applied nodewise.
pub fn nonlinear_apply<F: Fn(f64) -> f64>(
    stiffness: &CsrMatrix,
    state: &[f64],
    b: F,
) -> Result<Vec<f64>> {
    let mut weighted = Vec::with_capacity(state.len());
    for (j, &u) in state.iter().enumerate() {
        let bv = b(u);
        if !bv.is_finite() {
            return Err(Error::NonFiniteValue { node: j, u });
        }
        weighted.push(bv * u);
    }
    Ok(stiffness.matvec(&weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grids;
    use nalgebra::DMatrix;

    fn dense(m: &CsrMatrix) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(m.n_rows, m.n_cols);
        for i in 0..m.n_rows {
            for (j, v) in m.row(i) {
                d[(i, j)] = v;
            }
        }
        d
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let (mesh, _) = build_grids(2, 2).unwrap();
        let kappa = vec![1.0; mesh.triangles.len()];
        let a = assemble_stiffness(&mesh, &kappa).unwrap();
        let ones = vec![1.0; mesh.n_nodes()];
        let y = a.matvec(&ones);
        assert!(y.iter().all(|v| v.abs() < 1e-13));
        assert_eq!(a.symmetry_defect(), 0.0);
    }

    #[test]
    fn local_stiffness_reference_triangle() {
        // Hand integration oracle for the unit right triangle, kappa = 1:
        // K = 1/2 * [[2,-1,-1],[-1,1,0],[-1,0,1]].
        let p = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let (grads, area) = p1_gradients(&p);
        let expect = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for a in 0..3 {
            for b in 0..3 {
                let v = area * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
                assert!((v - expect[a][b]).abs() < 1e-15, "K[{a}][{b}] = {v}");
            }
        }
    }

    #[test]
    fn stiffness_scales_linearly_in_kappa() {
        let (mesh, _) = build_grids(2, 2).unwrap();
        let k1 = vec![1.0; mesh.triangles.len()];
        let k2 = vec![1e4; mesh.triangles.len()];
        let a1 = assemble_stiffness(&mesh, &k1).unwrap();
        let a2 = assemble_stiffness(&mesh, &k2).unwrap();
        for (v1, v2) in a1.values.iter().zip(&a2.values) {
            assert_eq!(v2, &(v1 * 1e4));
        }
    }

    #[test]
    fn rejects_nonpositive_kappa() {
        let (mesh, _) = build_grids(2, 2).unwrap();
        let mut kappa = vec![1.0; mesh.triangles.len()];
        kappa[3] = 0.0;
        assert!(assemble_stiffness(&mesh, &kappa).is_err());
    }

    #[test]
    fn mass_entries_sum_to_domain_area() {
        let (mesh, _) = build_grids(3, 3).unwrap();
        let m = assemble_mass(&mesh);
        let total: f64 = m.values.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn load_of_unity_sums_to_one() {
        let (mesh, _) = build_grids(3, 3).unwrap();
        let h = assemble_load(&mesh, |_, _| 1.0);
        let total: f64 = h.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn load_quadrature_accuracy() {
        // Analytic integral of 1 + sin(2 pi x) sin(2 pi y) over the unit
        // square is 1; nodal quadrature on the (10,10) grid is accurate to
        // well under 1e-3.
        let (mesh, _) = build_grids(10, 10).unwrap();
        let h = assemble_load(&mesh, |x, y| {
            1.0 + (2.0 * std::f64::consts::PI * x).sin() * (2.0 * std::f64::consts::PI * y).sin()
        });
        let total: f64 = h.iter().sum();
        assert!((total - 1.0).abs() < 1e-3, "quadrature total {total}");
    }

    #[test]
    fn dirichlet_elimination_zeroes_boundary_and_is_idempotent() {
        let (mesh, _) = build_grids(2, 2).unwrap();
        let kappa = vec![1.0; mesh.triangles.len()];
        let a = assemble_stiffness(&mesh, &kappa).unwrap();
        let rhs = assemble_load(&mesh, |_, _| 1.0);
        let (a1, r1) = apply_dirichlet(&a, &rhs, &mesh.boundary_mask);
        let (a2, r2) = apply_dirichlet(&a1, &r1, &mesh.boundary_mask);
        assert_eq!(a1, a2);
        assert_eq!(r1, r2);

        let u = solve_linear(&a1, &r1).unwrap();
        for (i, &b) in mesh.boundary_mask.iter().enumerate() {
            if b {
                assert_eq!(u[i], 0.0);
            }
        }
    }

    #[test]
    fn eliminated_stiffness_is_positive_definite() {
        // Dense eigensolve oracle on the (2,2) grid.
        let (mesh, _) = build_grids(2, 2).unwrap();
        let kappa = vec![1.0; mesh.triangles.len()];
        let a = assemble_stiffness(&mesh, &kappa).unwrap();
        let rhs = vec![0.0; mesh.n_nodes()];
        let (a, _) = apply_dirichlet(&a, &rhs, &mesh.boundary_mask);
        let eig = dense(&a).symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0, "smallest eigenvalue {min}");
    }

    #[test]
    fn cg_identity_returns_rhs() {
        let eye = CsrMatrix::identity(5);
        let rhs = vec![1.0, -2.0, 3.0, 0.5, 4.0];
        let x = solve_linear(&eye, &rhs).unwrap();
        for (a, b) in x.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_center_value_matches_refined_oracle() {
        // -div(grad u) = 1, u = 0 on the boundary of the unit square.
        // Compare the center value on the (10,10) grid against a refined grid.
        let solve_on = |nc: usize, ns: usize| -> f64 {
            let (mesh, _) = build_grids(nc, ns).unwrap();
            let kappa = vec![1.0; mesh.triangles.len()];
            let a = assemble_stiffness(&mesh, &kappa).unwrap();
            let rhs = assemble_load(&mesh, |_, _| 1.0);
            let (a, rhs) = apply_dirichlet(&a, &rhs, &mesh.boundary_mask);
            let u = solve_linear(&a, &rhs).unwrap();
            let center = mesh.node_at(mesh.intervals / 2, mesh.intervals / 2);
            u[center]
        };
        let coarse = solve_on(10, 10);
        let refined = solve_on(10, 20);
        assert!(
            (coarse - refined).abs() / refined.abs() < 0.01,
            "center {coarse} vs refined {refined}"
        );
    }

    #[test]
    fn high_contrast_solve_matches_direct_factorization() {
        // Contrast 1e6 field on a small grid; CG result checked against a
        // dense LU oracle.
        let (mesh, _) = build_grids(2, 3).unwrap();
        let mut kappa = vec![1.0; mesh.triangles.len()];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let cy = (mesh.nodes[tri[0]][1] + mesh.nodes[tri[1]][1] + mesh.nodes[tri[2]][1]) / 3.0;
            if (0.4..0.6).contains(&cy) {
                kappa[t] = 1e6;
            }
        }
        let a = assemble_stiffness(&mesh, &kappa).unwrap();
        let rhs = assemble_load(&mesh, |_, _| 1.0);
        let (a, rhs) = apply_dirichlet(&a, &rhs, &mesh.boundary_mask);
        let u = solve_linear(&a, &rhs).unwrap();

        let lu = dense(&a).lu();
        let exact = lu.solve(&nalgebra::DVector::from_column_slice(&rhs)).unwrap();
        let diff: f64 = u
            .iter()
            .zip(exact.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff / norm2(&rhs).max(1e-30) < 1e-6, "diff {diff}");
    }

    #[test]
    fn nonlinear_apply_matches_dense_oracle() {
        let (mesh, _) = build_grids(2, 2).unwrap();
        let kappa = vec![1.0; mesh.triangles.len()];
        let a = assemble_stiffness(&mesh, &kappa).unwrap();

        // b == 1 reduces to A U.
        let u: Vec<f64> = (0..mesh.n_nodes()).map(|i| (i as f64 * 0.37).sin()).collect();
        let lin = nonlinear_apply(&a, &u, |_| 1.0).unwrap();
        let au = a.matvec(&u);
        for (x, y) in lin.iter().zip(&au) {
            assert!((x - y).abs() < 1e-14);
        }

        // Zero state with b(0) = 1 gives zero.
        let zero = nonlinear_apply(&a, &vec![0.0; mesh.n_nodes()], |_| 1.0).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));

        // Exponential b against the dense diag oracle.
        let mu = 0.7;
        let got = nonlinear_apply(&a, &u, |x| (mu * x).exp()).unwrap();
        let d = dense(&a);
        let scaled: Vec<f64> = u.iter().map(|&x| (mu * x).exp() * x).collect();
        let expect = &d * nalgebra::DVector::from_column_slice(&scaled);
        for (x, y) in got.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nonlinear_apply_reports_nonfinite() {
        let (mesh, _) = build_grids(2, 2).unwrap();
        let kappa = vec![1.0; mesh.triangles.len()];
        let a = assemble_stiffness(&mesh, &kappa).unwrap();
        let u = vec![1.0; mesh.n_nodes()];
        let err = nonlinear_apply(&a, &u, |_| f64::NAN).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { node: 0, .. }));
    }

    #[test]
    fn triplet_text_round_trip() {
        let (mesh, _) = build_grids(2, 2).unwrap();
        let kappa = vec![2.5; mesh.triangles.len()];
        let a = assemble_stiffness(&mesh, &kappa).unwrap();
        let text = a.to_triplet_text();
        let b = CsrMatrix::from_triplet_text(&text).unwrap();
        assert_eq!(a.n_rows, b.n_rows);
        assert_eq!(a.indices, b.indices);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn galerkin_consistency_on_small_grid() {
        // Phi^T A Phi equals the dense triple product oracle.
        let (mesh, _) = build_grids(2, 2).unwrap();
        let kappa = vec![1.0; mesh.triangles.len()];
        let a = assemble_stiffness(&mesh, &kappa).unwrap();
        let n = mesh.n_nodes();
        let phi = DMatrix::from_fn(n, 3, |i, j| ((i * 7 + j * 3) as f64 * 0.11).sin());
        let ad = dense(&a);
        let oracle = phi.transpose() * &ad * &phi;
        // Route through sparse matvec per column.
        for j in 0..3 {
            let col: Vec<f64> = (0..n).map(|i| phi[(i, j)]).collect();
            let acol = a.matvec(&col);
            for k in 0..3 {
                let dot: f64 = (0..n).map(|i| phi[(i, k)] * acol[i]).sum();
                assert!((dot - oracle[(k, j)]).abs() < 1e-12);
            }
        }
    }
}
