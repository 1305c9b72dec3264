//! Offline construction of the multiscale coarse space.
//!
//! Per coarse neighborhood the snapshot space consists of discrete
//! kappa-harmonic extensions of unit nodal boundary data on the patch
//! boundary. A generalized spectral problem in the snapshot space selects the
//! smallest-eigenvalue modes; multiplying the selected modes by the partition
//! of unity yields conforming, locally supported basis columns that are
//! assembled into the global downscaling operator `Phi`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::coeff::PermField;
use crate::fem::{p1_gradients, CsrMatrix};
use crate::grid::{CoarseGrid, FineMesh, Neighborhood, PartitionOfUnity};
use crate::{Error, Result};

/// Per-region snapshot vectors (columns), in fine-local coordinates.
#[derive(Debug, Clone)]
pub struct SnapshotSpace {
    pub matrix: DMatrix<f64>,
    pub region: usize,
}

impl SnapshotSpace {
    pub fn n_snapshots(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Selected spectral modes of one region: eigenvalues ascending, modes
/// expanded to fine-local coordinates and S-orthonormal.
#[derive(Debug, Clone)]
pub struct OfflineSpace {
    pub region: usize,
    pub eigenvalues: Vec<f64>,
    pub modes: DMatrix<f64>,
}

impl OfflineSpace {
    pub fn n_modes(&self) -> usize {
        self.modes.ncols()
    }
}

/// One column of the downscaling operator: locally supported fine-grid
/// entries and the owning coarse node.
#[derive(Debug, Clone)]
pub struct BasisColumn {
    pub owner: usize,
    /// Sorted `(fine node, value)` pairs.
    pub entries: Vec<(usize, f64)>,
}

/// The global `n_f x n_c` column-sparse downscaling operator.
#[derive(Debug, Clone)]
pub struct MultiscaleBasis {
    pub columns: Vec<BasisColumn>,
    pub n_fine: usize,
    /// `I^{omega_i}`: per coarse node, indices of columns with support
    /// intersecting that neighborhood.
    pub region_cols: Vec<Vec<usize>>,
    /// First (smallest-eigenvalue) column owned by each coarse node.
    pub first_col: Vec<usize>,
}

impl MultiscaleBasis {
    pub fn n_coarse(&self) -> usize {
        self.columns.len()
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(|c| c.entries.len()).sum()
    }

    /// `Phi z`: coarse-to-fine prolongation.
    pub fn prolong(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.n_coarse() {
            return Err(Error::DimensionMismatch {
                expected: self.n_coarse(),
                got: z.len(),
                context: "prolong input",
            });
        }
        let mut out = vec![0.0; self.n_fine];
        for (col, &zk) in self.columns.iter().zip(z) {
            if zk == 0.0 {
                continue;
            }
            for &(node, v) in &col.entries {
                out[node] += v * zk;
            }
        }
        Ok(out)
    }

    /// `Phi^T v`: fine-to-coarse restriction.
    pub fn restrict(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n_fine {
            return Err(Error::DimensionMismatch {
                expected: self.n_fine,
                got: v.len(),
                context: "restrict input",
            });
        }
        Ok(self
            .columns
            .iter()
            .map(|c| c.entries.iter().map(|&(n, x)| x * v[n]).sum())
            .collect())
    }

    /// Dense copy of one column.
    pub fn column_dense(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_fine];
        for &(n, v) in &self.columns[k].entries {
            out[n] = v;
        }
        out
    }

    /// `Phi^{omega_i}`: the local block of `Phi` with rows on the patch's
    /// fine nodes and columns `I^{omega_i}`.
    pub fn local_block(&self, nbhd: &Neighborhood, region: usize) -> DMatrix<f64> {
        let cols = &self.region_cols[region];
        let mut block = DMatrix::zeros(nbhd.n_local(), cols.len());
        for (jc, &c) in cols.iter().enumerate() {
            for &(node, v) in &self.columns[c].entries {
                if let Some(&l) = nbhd.global_to_local.get(&node) {
                    block[(l, jc)] = v;
                }
            }
        }
        block
    }

    /// Gather the coarse subvector `z^{omega_i}`.
    pub fn gather_local(&self, z: &[f64], region: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.region_cols[region].len(),
            self.region_cols[region].iter().map(|&c| z[c]),
        )
    }

    /// Project a sparse fine operator: `Phi^T A Phi` as a dense coarse matrix.
    pub fn project_matrix(&self, a: &CsrMatrix) -> DMatrix<f64> {
        let n_c = self.n_coarse();
        let mut out = DMatrix::zeros(n_c, n_c);
        let mut col = vec![0.0; self.n_fine];
        let mut acol = vec![0.0; self.n_fine];
        for j in 0..n_c {
            for v in col.iter_mut() {
                *v = 0.0;
            }
            for &(node, x) in &self.columns[j].entries {
                col[node] = x;
            }
            a.matvec_into(&col, &mut acol);
            for i in 0..n_c {
                out[(i, j)] = self.columns[i].entries.iter().map(|&(n, x)| x * acol[n]).sum();
            }
        }
        out
    }

    /// Triplet text of the full operator.
    pub fn to_triplet_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} {} {}", self.n_fine, self.n_coarse(), self.nnz()).unwrap();
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in &col.entries {
                writeln!(s, "{} {} {:.17e}", i, j, v).unwrap();
            }
        }
        s
    }
}

/// Local stiffness over a neighborhood's triangles with the given field,
/// in fine-local indices.
pub fn local_stiffness(nbhd: &Neighborhood, field: &PermField, mesh: &FineMesh) -> DMatrix<f64> {
    let n = nbhd.n_local();
    let mut a = DMatrix::zeros(n, n);
    for &t in &nbhd.triangles {
        let tri = mesh.triangles[t];
        let p = [mesh.nodes[tri[0]], mesh.nodes[tri[1]], mesh.nodes[tri[2]]];
        let (grads, area) = p1_gradients(&p);
        let locals = tri.map(|g| nbhd.global_to_local[&g]);
        for r in 0..3 {
            for c in 0..3 {
                a[(locals[r], locals[c])] +=
                    field.values[t] * area * (grads[r][0] * grads[c][0] + grads[r][1] * grads[c][1]);
            }
        }
    }
    a
}

/// Local kappa-weighted mass over a neighborhood's triangles.
pub fn local_weighted_mass(nbhd: &Neighborhood, field: &PermField, mesh: &FineMesh) -> DMatrix<f64> {
    let n = nbhd.n_local();
    let mut s = DMatrix::zeros(n, n);
    for &t in &nbhd.triangles {
        let tri = mesh.triangles[t];
        let area = mesh.triangle_area(t);
        let locals = tri.map(|g| nbhd.global_to_local[&g]);
        for r in 0..3 {
            for c in 0..3 {
                s[(locals[r], locals[c])] +=
                    field.values[t] * area / 12.0 * if r == c { 2.0 } else { 1.0 };
            }
        }
    }
    s
}

/// Build the snapshot space of one region: one discrete kappa-harmonic
/// extension per fine node on the patch boundary.
pub fn build_snapshots(
    nbhd: &Neighborhood,
    field: &PermField,
    mesh: &FineMesh,
) -> Result<SnapshotSpace> {
    let a = local_stiffness(nbhd, field, mesh);
    let n = nbhd.n_local();
    let boundary = nbhd.patch_boundary_locals(mesh);
    let is_boundary: Vec<bool> = {
        let bset: BTreeSet<usize> = boundary.iter().copied().collect();
        (0..n).map(|l| bset.contains(&l)).collect()
    };
    let interior: Vec<usize> = (0..n).filter(|&l| !is_boundary[l]).collect();

    // Factor the interior block once; every snapshot reuses it.
    let ni = interior.len();
    let mut a_ii = DMatrix::zeros(ni, ni);
    for (r, &li) in interior.iter().enumerate() {
        for (c, &lj) in interior.iter().enumerate() {
            a_ii[(r, c)] = a[(li, lj)];
        }
    }
    let chol = a_ii.cholesky().ok_or_else(|| Error::Eigenproblem {
        region: nbhd.coarse_node,
        detail: "singular interior stiffness in harmonic extension".into(),
    })?;

    let mut snapshots = DMatrix::zeros(n, boundary.len());
    for (s, &lb) in boundary.iter().enumerate() {
        // rhs = -A_IB e_lb on the interior.
        let mut rhs = DVector::zeros(ni);
        for (r, &li) in interior.iter().enumerate() {
            rhs[r] = -a[(li, lb)];
        }
        let ui = chol.solve(&rhs);
        snapshots[(lb, s)] = 1.0;
        for (r, &li) in interior.iter().enumerate() {
            snapshots[(li, s)] = ui[r];
        }
    }
    Ok(SnapshotSpace {
        matrix: snapshots,
        region: nbhd.coarse_node,
    })
}

/// Solve the generalized symmetric eigenproblem `A v = lambda S v` with SPD
/// `S` via a Cholesky congruence; eigenpairs ascending, `S`-orthonormal.
pub fn generalized_symmetric_eig(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let chol = s.clone().cholesky()?;
    let l = chol.l();
    // B = L^-1 A L^-T via two triangular solves.
    let mut b = a.clone();
    l.solve_lower_triangular_mut(&mut b);
    let mut bt = b.transpose();
    l.solve_lower_triangular_mut(&mut bt);
    let sym = (bt.transpose() + bt) * 0.5;
    let eig = sym.symmetric_eigen();

    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    // Back-substitute: v = L^-T y.
    let lt = l.transpose();
    lt.solve_upper_triangular_mut(&mut vectors);
    Some((eigenvalues, vectors))
}

/// Dimension reduction in the snapshot space: the generalized spectral
/// problem with local stiffness and kappa-weighted mass, keeping the
/// `m_off` smallest eigenpairs.
pub fn build_offline_space(
    snapshots: &SnapshotSpace,
    nbhd: &Neighborhood,
    field: &PermField,
    mesh: &FineMesh,
    m_off: usize,
) -> Result<OfflineSpace> {
    if snapshots.n_snapshots() == 0 {
        return Err(Error::EmptySnapshots {
            context: "offline space",
        });
    }
    // Rank filter: orthonormalize snapshot columns, dropping directions
    // below 1e-10 of the largest singular value.
    let svd = snapshots.matrix.clone().svd(true, false);
    let u = svd.u.as_ref().unwrap();
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&sv| sv > 1e-10 * smax)
        .count();
    if m_off > rank {
        return Err(Error::RankExceeded {
            requested: m_off,
            rank,
        });
    }
    let q = u.columns(0, rank).into_owned();

    let a_bar = local_stiffness(nbhd, field, mesh);
    let s_bar = local_weighted_mass(nbhd, field, mesh);
    let a_off = q.transpose() * &a_bar * &q;
    let s_off = q.transpose() * &s_bar * &q;

    let (mut eigenvalues, vectors) =
        generalized_symmetric_eig(&a_off, &s_off).ok_or_else(|| Error::Eigenproblem {
            region: nbhd.coarse_node,
            detail: "weighted mass not positive definite".into(),
        })?;
    eigenvalues.truncate(m_off);
    // Tiny negative values are roundoff of the zero-energy constant mode.
    for ev in eigenvalues.iter_mut() {
        if ev.abs() < 1e-9 {
            *ev = ev.max(0.0);
        }
    }
    let modes = &q * vectors.columns(0, m_off).into_owned();
    Ok(OfflineSpace {
        region: nbhd.coarse_node,
        eigenvalues,
        modes,
    })
}

/// Assemble the global basis: column `(i, k)` is the partition-of-unity
/// weighted `k`-th spectral mode of region `i`.
pub fn build_basis(
    offline: &[OfflineSpace],
    pu: &PartitionOfUnity,
    nbhds: &[Neighborhood],
    mesh: &FineMesh,
) -> Result<MultiscaleBasis> {
    let mut columns = Vec::new();
    let mut first_col = Vec::with_capacity(offline.len());
    for (i, space) in offline.iter().enumerate() {
        let nbhd = &nbhds[i];
        first_col.push(columns.len());
        for k in 0..space.n_modes() {
            let mut entries = Vec::new();
            for (l, &g) in nbhd.fine_nodes.iter().enumerate() {
                let v = pu.value(i, l) * space.modes[(l, k)];
                if v != 0.0 {
                    entries.push((g, v));
                }
            }
            if entries.is_empty() {
                return Err(Error::DegenerateColumn { node: i });
            }
            columns.push(BasisColumn { owner: i, entries });
        }
    }

    let region_cols = compute_region_cols(&columns, nbhds);
    Ok(MultiscaleBasis {
        columns,
        n_fine: mesh.n_nodes(),
        region_cols,
        first_col,
    })
}

fn compute_region_cols(columns: &[BasisColumn], nbhds: &[Neighborhood]) -> Vec<Vec<usize>> {
    nbhds
        .iter()
        .map(|nbhd| {
            columns
                .iter()
                .enumerate()
                .filter(|(_, col)| {
                    col.entries
                        .iter()
                        .any(|(n, _)| nbhd.global_to_local.contains_key(n))
                })
                .map(|(c, _)| c)
                .collect()
        })
        .collect()
}

/// Convenience wrapper: snapshots, spectral problems and basis assembly for
/// every region with a uniform `m_off`.
pub fn build_offline_basis(
    mesh: &FineMesh,
    _coarse: &CoarseGrid,
    nbhds: &[Neighborhood],
    pu: &PartitionOfUnity,
    field: &PermField,
    m_off: usize,
) -> Result<MultiscaleBasis> {
    let spaces = build_offline_spaces(mesh, nbhds, field, m_off)?;
    build_basis(&spaces, pu, nbhds, mesh)
}

/// Per-region offline spaces with a uniform `m_off`.
pub fn build_offline_spaces(
    mesh: &FineMesh,
    nbhds: &[Neighborhood],
    field: &PermField,
    m_off: usize,
) -> Result<Vec<OfflineSpace>> {
    nbhds
        .iter()
        .map(|nbhd| {
            let snaps = build_snapshots(nbhd, field, mesh)?;
            build_offline_space(&snaps, nbhd, field, mesh, m_off)
        })
        .collect()
}

/// Offline artifact bundle: basis triplets, column owners, per-region
/// eigenvalues and a manifest binding the bundle to its inputs.
pub struct OfflineBundle {
    pub basis: MultiscaleBasis,
    pub eigenvalues: Vec<Vec<f64>>,
    pub manifest: Vec<(String, String)>,
}

/// Persist an offline bundle to a directory.
pub fn save_bundle(
    dir: &Path,
    basis: &MultiscaleBasis,
    spaces: &[OfflineSpace],
    manifest: &[(String, String)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("basis.txt"), basis.to_triplet_text())?;

    let mut owners = String::from("col,owner\n");
    for (c, col) in basis.columns.iter().enumerate() {
        writeln!(owners, "{},{}", c, col.owner).unwrap();
    }
    std::fs::write(dir.join("owners.csv"), owners)?;

    let mut eigs = String::from("region,rank,eigenvalue\n");
    for space in spaces {
        for (k, ev) in space.eigenvalues.iter().enumerate() {
            writeln!(eigs, "{},{},{:.17e}", space.region, k, ev).unwrap();
        }
    }
    std::fs::write(dir.join("eigenvalues.csv"), eigs)?;

    let mut man = String::new();
    for (k, v) in manifest {
        writeln!(man, "{k} = {v}").unwrap();
    }
    std::fs::write(dir.join("manifest.txt"), man)?;
    Ok(())
}

/// Read a manifest file back as key-value pairs.
pub fn load_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
    Ok(text
        .lines()
        .filter_map(|line| {
            let (k, v) = line.split_once('=')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect())
}

/// Reload a bundle, verifying the manifest against expected keys. A hash or
/// key mismatch is a hard error.
pub fn load_bundle(
    dir: &Path,
    expected: &[(String, String)],
    nbhds: &[Neighborhood],
) -> Result<OfflineBundle> {
    let manifest = load_manifest(dir)?;
    for (k, v) in expected {
        match manifest.iter().find(|(mk, _)| mk == k) {
            Some((_, mv)) if mv == v => {}
            Some((_, mv)) => {
                return Err(Error::BundleMismatch(format!(
                    "manifest key '{k}': expected '{v}', found '{mv}'"
                )))
            }
            None => {
                return Err(Error::BundleMismatch(format!("manifest key '{k}' missing")));
            }
        }
    }

    let mat = CsrMatrix::from_triplet_text(&std::fs::read_to_string(dir.join("basis.txt"))?)?;
    let owners_text = std::fs::read_to_string(dir.join("owners.csv"))?;
    let mut owners = Vec::new();
    for line in owners_text.lines().skip(1) {
        let (_, o) = line
            .split_once(',')
            .ok_or_else(|| Error::BundleMismatch(format!("bad owners line: {line}")))?;
        owners.push(
            o.trim()
                .parse::<usize>()
                .map_err(|_| Error::BundleMismatch(format!("bad owner: {o}")))?,
        );
    }
    if owners.len() != mat.n_cols {
        return Err(Error::BundleMismatch(format!(
            "owners count {} != basis columns {}",
            owners.len(),
            mat.n_cols
        )));
    }

    // Rebuild column storage from the CSR rows.
    let mut columns: Vec<BasisColumn> = owners
        .iter()
        .map(|&owner| BasisColumn {
            owner,
            entries: Vec::new(),
        })
        .collect();
    for i in 0..mat.n_rows {
        for (j, v) in mat.row(i) {
            columns[j].entries.push((i, v));
        }
    }
    let mut first_col = vec![usize::MAX; nbhds.len()];
    for (c, col) in columns.iter().enumerate() {
        if first_col[col.owner] == usize::MAX {
            first_col[col.owner] = c;
        }
    }
    let region_cols = compute_region_cols(&columns, nbhds);
    let basis = MultiscaleBasis {
        columns,
        n_fine: mat.n_rows,
        region_cols,
        first_col,
    };

    let eig_text = std::fs::read_to_string(dir.join("eigenvalues.csv"))?;
    let mut eigenvalues = vec![Vec::new(); nbhds.len()];
    for line in eig_text.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::BundleMismatch(format!("bad eigenvalue line: {line}")));
        }
        let region: usize = parts[0]
            .parse()
            .map_err(|_| Error::BundleMismatch(format!("bad region: {}", parts[0])))?;
        let ev: f64 = parts[2]
            .parse()
            .map_err(|_| Error::BundleMismatch(format!("bad eigenvalue: {}", parts[2])))?;
        eigenvalues[region].push(ev);
    }

    Ok(OfflineBundle {
        basis,
        eigenvalues,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grids, build_neighborhoods, build_partition_of_unity};

    #[test]
    fn constant_boundary_data_extends_to_constant() {
        // kappa == 1, corner patch: summing all unit-boundary snapshots gives
        // the harmonic extension of boundary data == 1, the constant 1.
        let (mesh, coarse) = build_grids(2, 3).unwrap();
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let field = PermField::homogeneous(&mesh);
        let snaps = build_snapshots(&nbhds[0], &field, &mesh).unwrap();
        let summed = snaps.matrix.column_sum();
        for v in summed.iter() {
            assert!((v - 1.0).abs() < 1e-10, "sum {v}");
        }
    }

    #[test]
    fn snapshots_have_zero_interior_residual() {
        let (mesh, coarse) = build_grids(2, 3).unwrap();
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let field = PermField::homogeneous(&mesh);
        let interior = coarse.n_coarse / 2 * (coarse.n_coarse + 1) + coarse.n_coarse / 2;
        let nbhd = &nbhds[interior];
        let snaps = build_snapshots(nbhd, &field, &mesh).unwrap();
        let a = local_stiffness(nbhd, &field, &mesh);
        let boundary: BTreeSet<usize> = nbhd.patch_boundary_locals(&mesh).into_iter().collect();
        let res = &a * &snaps.matrix;
        for s in 0..snaps.n_snapshots() {
            for l in 0..nbhd.n_local() {
                if !boundary.contains(&l) {
                    assert!(res[(l, s)].abs() < 1e-10, "residual {}", res[(l, s)]);
                }
            }
        }
    }

    #[test]
    fn snapshot_count_matches_patch_boundary_nodes() {
        // Interior patch on the (10,10)/(10,10) grids: the 2x2-block patch
        // boundary carries 80 fine nodes (counting oracle: 4*(2*10) nodes).
        let (mesh, coarse) = build_grids(10, 10).unwrap();
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let field = PermField::homogeneous(&mesh);
        let interior = 5 * 11 + 5;
        let snaps = build_snapshots(&nbhds[interior], &field, &mesh).unwrap();
        assert_eq!(snaps.n_snapshots(), 80);
    }

    #[test]
    fn offline_space_smallest_mode_is_near_constant() {
        let (mesh, coarse) = build_grids(2, 3).unwrap();
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let field = PermField::homogeneous(&mesh);
        let snaps = build_snapshots(&nbhds[0], &field, &mesh).unwrap();
        let space = build_offline_space(&snaps, &nbhds[0], &field, &mesh, 3).unwrap();
        assert!(space.eigenvalues[0].abs() < 1e-8, "lambda_1 = {}", space.eigenvalues[0]);
        // Constant-like eigenvector: values all close to a common constant.
        let col = space.modes.column(0);
        let mean: f64 = col.iter().sum::<f64>() / col.len() as f64;
        for v in col.iter() {
            assert!((v - mean).abs() < 1e-6 * mean.abs().max(1.0));
        }
        // Eigenvalues ascending and nonnegative.
        for w in space.eigenvalues.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
            assert!(w[0] >= 0.0);
        }
    }

    #[test]
    fn eigen_residuals_are_small() {
        let (mesh, coarse) = build_grids(3, 3).unwrap();
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let field = crate::coeff::generate_permeability(&crate::coeff::ChannelSpec::case1(), 4.0, &mesh, 0);
        let interior = 1 * 4 + 1;
        let nbhd = &nbhds[interior];
        let snaps = build_snapshots(nbhd, &field, &mesh).unwrap();
        let space = build_offline_space(&snaps, nbhd, &field, &mesh, 4).unwrap();
        let a = local_stiffness(nbhd, &field, &mesh);
        let s = local_weighted_mass(nbhd, &field, &mesh);
        // The eigenproblem lives in the snapshot subspace, so test the
        // residual projected back onto it.
        let r = &snaps.matrix;
        for k in 0..space.n_modes() {
            let v = space.modes.column(k).into_owned();
            let res = r.transpose() * (&a * &v - &s * &v * space.eigenvalues[k]);
            let rel = res.norm() / ((r.transpose() * &a * r).norm() * v.norm());
            assert!(rel <= 1e-8, "mode {k}: residual {rel}");
        }
    }

    #[test]
    fn generalized_eig_matches_dense_oracle() {
        // Two-block toy patch against a direct dense generalized eigensolve
        // oracle built from the inverse.
        let (mesh, coarse) = build_grids(2, 2).unwrap();
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let field = PermField::homogeneous(&mesh);
        // Edge node 1 has a 2-block patch.
        let nbhd = &nbhds[1];
        assert_eq!(nbhd.triangles.len(), 16);
        let a = local_stiffness(nbhd, &field, &mesh);
        let s = local_weighted_mass(nbhd, &field, &mesh);
        let (evs, _) = generalized_symmetric_eig(&a, &s).unwrap();

        // Oracle: eigenvalues of S^-1 A.
        let si = s.clone().try_inverse().unwrap();
        let m = si * &a;
        let mut oracle: Vec<f64> = m.complex_eigenvalues().iter().map(|c| c.re).collect();
        oracle.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (got, want) in evs.iter().zip(&oracle) {
            assert!(
                (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn m_off_beyond_rank_is_rejected() {
        let (mesh, coarse) = build_grids(2, 2).unwrap();
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let field = PermField::homogeneous(&mesh);
        let snaps = build_snapshots(&nbhds[0], &field, &mesh).unwrap();
        let err = build_offline_space(&snaps, &nbhds[0], &field, &mesh, 100).unwrap_err();
        assert!(matches!(err, Error::RankExceeded { .. }));
    }

    #[test]
    fn basis_columns_supported_in_their_patch() {
        let (mesh, coarse) = build_grids(3, 2).unwrap();
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let pu = build_partition_of_unity(&coarse, &mesh);
        let field = PermField::homogeneous(&mesh);
        let basis = build_offline_basis(&mesh, &coarse, &nbhds, &pu, &field, 2).unwrap();
        assert_eq!(basis.n_coarse(), 2 * coarse.n_nodes());
        for col in &basis.columns {
            let nbhd = &nbhds[col.owner];
            for (n, _) in &col.entries {
                assert!(nbhd.global_to_local.contains_key(n));
            }
        }
    }

    #[test]
    fn coarse_mass_is_spd() {
        // Dense Cholesky oracle on the (2,2) grid with one basis per node.
        let (mesh, coarse) = build_grids(2, 2).unwrap();
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let pu = build_partition_of_unity(&coarse, &mesh);
        let field = PermField::homogeneous(&mesh);
        let basis = build_offline_basis(&mesh, &coarse, &nbhds, &pu, &field, 1).unwrap();
        let m = crate::fem::assemble_mass(&mesh);
        let coarse_mass = basis.project_matrix(&m);
        assert!(coarse_mass.cholesky().is_some());
    }

    #[test]
    fn expected_total_coarse_dimension() {
        let (mesh, coarse) = build_grids(10, 10).unwrap();
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let pu = build_partition_of_unity(&coarse, &mesh);
        let field = PermField::homogeneous(&mesh);
        let basis = build_offline_basis(&mesh, &coarse, &nbhds, &pu, &field, 3).unwrap();
        assert_eq!(basis.n_coarse(), 363);
    }

    #[test]
    fn prolong_restrict_roundtrip_matches_dense_oracle() {
        let (mesh, coarse) = build_grids(2, 2).unwrap();
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let pu = build_partition_of_unity(&coarse, &mesh);
        let field = PermField::homogeneous(&mesh);
        let basis = build_offline_basis(&mesh, &coarse, &nbhds, &pu, &field, 2).unwrap();

        let zero = basis.prolong(&vec![0.0; basis.n_coarse()]).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));

        let z: Vec<f64> = (0..basis.n_coarse()).map(|i| ((i * 13) as f64 * 0.21).sin()).collect();
        let got = basis.restrict(&basis.prolong(&z).unwrap()).unwrap();

        // Dense product oracle Phi^T Phi z.
        let n_c = basis.n_coarse();
        let mut phi = DMatrix::zeros(mesh.n_nodes(), n_c);
        for (j, col) in basis.columns.iter().enumerate() {
            for &(i, v) in &col.entries {
                phi[(i, j)] = v;
            }
        }
        let want = phi.transpose() * &phi * DVector::from_column_slice(&z);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }

        assert!(basis.prolong(&vec![0.0; 3]).is_err());
    }

    #[test]
    fn galerkin_energy_error_decreases_with_more_modes() {
        // Coarse linear solve with 1, 2, 3 modes per node; fine-grid energy
        // error must be monotone nonincreasing (within roundoff slack).
        let (mesh, coarse) = build_grids(3, 4).unwrap();
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let pu = build_partition_of_unity(&coarse, &mesh);
        let field = crate::coeff::generate_permeability(&crate::coeff::ChannelSpec::case1(), 4.0, &mesh, 0);
        let a = crate::fem::assemble_stiffness(&mesh, &field.values).unwrap();
        let rhs = crate::fem::assemble_load(&mesh, |_, _| 1.0);
        let (a_bc, rhs_bc) = crate::fem::apply_dirichlet(&a, &rhs, &mesh.boundary_mask);
        let u_fine = crate::fem::solve_cg(&a_bc, &rhs_bc, 1e-12, 200000).unwrap();
        let energy = |v: &[f64]| -> f64 {
            let av = a_bc.matvec(v);
            v.iter().zip(&av).map(|(x, y)| x * y).sum::<f64>().sqrt()
        };

        let mut errors = Vec::new();
        for m_off in 1..=3 {
            let basis = build_offline_basis(&mesh, &coarse, &nbhds, &pu, &field, m_off).unwrap();
            let a_c = basis.project_matrix(&a_bc);
            let h_c = DVector::from_column_slice(&basis.restrict(&rhs_bc).unwrap());
            let z = a_c.lu().solve(&h_c).unwrap();
            let u_ms = basis.prolong(z.as_slice()).unwrap();
            let diff: Vec<f64> = u_fine.iter().zip(&u_ms).map(|(a, b)| a - b).collect();
            errors.push(energy(&diff) / energy(&u_fine));
        }
        for w in errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "errors {errors:?}");
        }
    }

    #[test]
    fn bundle_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let (mesh, coarse) = build_grids(2, 2).unwrap();
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let pu = build_partition_of_unity(&coarse, &mesh);
        let field = PermField::homogeneous(&mesh);
        let spaces = build_offline_spaces(&mesh, &nbhds, &field, 2).unwrap();
        let basis = build_basis(&spaces, &pu, &nbhds, &mesh).unwrap();
        let manifest = vec![
            ("n_coarse".to_string(), "2".to_string()),
            ("field_hash".to_string(), field.hash()),
        ];
        save_bundle(dir.path(), &basis, &spaces, &manifest).unwrap();

        let loaded = load_bundle(dir.path(), &manifest, &nbhds).unwrap();
        assert_eq!(loaded.basis.n_coarse(), basis.n_coarse());
        assert_eq!(loaded.basis.region_cols, basis.region_cols);
        let z: Vec<f64> = (0..basis.n_coarse()).map(|i| i as f64 * 0.1).collect();
        let a = basis.prolong(&z).unwrap();
        let b = loaded.basis.prolong(&z).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }

        let bad = vec![("field_hash".to_string(), "deadbeef".to_string())];
        assert!(load_bundle(dir.path(), &bad, &nbhds).is_err());
    }
}
