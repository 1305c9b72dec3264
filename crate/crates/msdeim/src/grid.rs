//! Structured fine/coarse grids on the unit square, coarse-node
//! neighborhoods and partition-of-unity diagonals.
//!
//! The fine mesh triangulates `[0,1]^2` with `(N_c * n_s)^2` squares, each
//! split into two triangles along the lower-left to upper-right diagonal.
//! The coarse grid overlays `N_c x N_c` square blocks; the neighborhood
//! `omega_i` of a coarse node is the union of its adjacent blocks and is
//! always a rectangle of 1, 2 or 4 blocks.
//!
//! Node numbering is row-major lexicographic by `(y, x)` so that identical
//! inputs produce bit-identical meshes.

use std::collections::HashMap;

use crate::{Error, Result};

/// Structured P1 triangulation of the unit square.
#[derive(Debug, Clone)]
pub struct FineMesh {
    /// Node coordinates, row-major by (y, x).
    pub nodes: Vec<[f64; 2]>,
    /// Triangles as triples of node indices, counterclockwise.
    pub triangles: Vec<[usize; 3]>,
    /// True for nodes on the outer boundary of the domain.
    pub boundary_mask: Vec<bool>,
    /// Fine intervals per side (`N_c * n_s`).
    pub intervals: usize,
}

impl FineMesh {
    /// Total number of fine nodes.
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Global node index at integer grid position `(ix, iy)`.
    pub fn node_at(&self, ix: usize, iy: usize) -> usize {
        iy * (self.intervals + 1) + ix
    }

    /// Integer grid position `(ix, iy)` of a global node index.
    pub fn node_pos(&self, node: usize) -> (usize, usize) {
        (node % (self.intervals + 1), node / (self.intervals + 1))
    }

    /// Area of a triangle (all triangles are congruent right triangles,
    /// but this computes the signed formula for generality in oracles).
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let pa = self.nodes[a];
        let pb = self.nodes[b];
        let pc = self.nodes[c];
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1])).abs()
    }
}

/// Coarse block decomposition overlaying the fine mesh.
#[derive(Debug, Clone)]
pub struct CoarseGrid {
    /// Coarse blocks per side.
    pub n_coarse: usize,
    /// Fine squares per coarse block side.
    pub n_sub: usize,
    /// Coarse node coordinates, row-major by (y, x).
    pub coarse_nodes: Vec<[f64; 2]>,
    /// For each coarse node, the indices of adjacent coarse blocks.
    pub node_blocks: Vec<Vec<usize>>,
}

impl CoarseGrid {
    /// Number of coarse nodes, `(N_c + 1)^2`.
    pub fn n_nodes(&self) -> usize {
        self.coarse_nodes.len()
    }

    /// Number of coarse blocks, `N_c^2`.
    pub fn n_blocks(&self) -> usize {
        self.n_coarse * self.n_coarse
    }

    /// Integer position `(cx, cy)` of a coarse node.
    pub fn node_pos(&self, node: usize) -> (usize, usize) {
        (node % (self.n_coarse + 1), node / (self.n_coarse + 1))
    }
}

/// The neighborhood `omega_i` of one coarse node: the union of adjacent
/// coarse blocks, stored as sorted fine-node indices with local index maps.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    /// Owning coarse node.
    pub coarse_node: usize,
    /// Sorted global fine-node indices inside the patch (boundary included).
    pub fine_nodes: Vec<usize>,
    /// Global fine node -> local index within `fine_nodes`.
    pub global_to_local: HashMap<usize, usize>,
    /// Triangles fully inside the patch.
    pub triangles: Vec<usize>,
    /// Inclusive fine-grid index ranges of the patch rectangle.
    pub ix_range: (usize, usize),
    pub iy_range: (usize, usize),
}

impl Neighborhood {
    pub fn n_local(&self) -> usize {
        self.fine_nodes.len()
    }

    /// True if the fine node at grid position `(ix, iy)` lies on the patch
    /// rectangle's boundary.
    pub fn on_patch_boundary(&self, ix: usize, iy: usize) -> bool {
        ix == self.ix_range.0 || ix == self.ix_range.1 || iy == self.iy_range.0 || iy == self.iy_range.1
    }

    /// Local indices of fine nodes on the patch boundary, sorted.
    pub fn patch_boundary_locals(&self, mesh: &FineMesh) -> Vec<usize> {
        self.fine_nodes
            .iter()
            .enumerate()
            .filter(|(_, &g)| {
                let (ix, iy) = mesh.node_pos(g);
                self.on_patch_boundary(ix, iy)
            })
            .map(|(l, _)| l)
            .collect()
    }

    /// Restrict a fine vector to the patch.
    pub fn restrict_vec(&self, fine: &[f64]) -> Vec<f64> {
        self.fine_nodes.iter().map(|&g| fine[g]).collect()
    }
}

/// Partition-of-unity vectors `chi_i`, one per coarse node, stored on the
/// local node set of each neighborhood. `sum_i chi_i = 1` at every fine node.
#[derive(Debug, Clone)]
pub struct PartitionOfUnity {
    /// Per coarse node, `chi_i` values aligned with the neighborhood's
    /// `fine_nodes` ordering.
    pub chi: Vec<Vec<f64>>,
}

impl PartitionOfUnity {
    /// Value of `chi_i` at a local patch index.
    pub fn value(&self, coarse_node: usize, local: usize) -> f64 {
        self.chi[coarse_node][local]
    }

    /// Scatter `chi_i` into a dense fine vector (zero outside the patch).
    pub fn dense(&self, coarse_node: usize, nbhd: &Neighborhood, n_fine: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_fine];
        for (l, &g) in nbhd.fine_nodes.iter().enumerate() {
            out[g] = self.chi[coarse_node][l];
        }
        out
    }
}

/// Build the fine triangulation and coarse block grid.
///
/// `n_coarse` is the number of coarse blocks per side and `n_sub` the number
/// of fine squares per coarse block side; both must be at least 2.
pub fn build_grids(n_coarse: usize, n_sub: usize) -> Result<(FineMesh, CoarseGrid)> {
    if n_coarse < 2 || n_sub < 2 {
        return Err(Error::GridTooSmall { n_coarse, n_sub });
    }
    let n = n_coarse * n_sub;
    let h = 1.0 / n as f64;

    let mut nodes = Vec::with_capacity((n + 1) * (n + 1));
    let mut boundary_mask = Vec::with_capacity((n + 1) * (n + 1));
    for iy in 0..=n {
        for ix in 0..=n {
            nodes.push([ix as f64 * h, iy as f64 * h]);
            boundary_mask.push(ix == 0 || ix == n || iy == 0 || iy == n);
        }
    }

    // Each square split along the lower-left to upper-right diagonal.
    let mut triangles = Vec::with_capacity(2 * n * n);
    let stride = n + 1;
    for iy in 0..n {
        for ix in 0..n {
            let ll = iy * stride + ix;
            let lr = ll + 1;
            let ul = ll + stride;
            let ur = ul + 1;
            triangles.push([ll, lr, ur]);
            triangles.push([ll, ur, ul]);
        }
    }

    let mesh = FineMesh {
        nodes,
        triangles,
        boundary_mask,
        intervals: n,
    };

    let hc = 1.0 / n_coarse as f64;
    let mut coarse_nodes = Vec::with_capacity((n_coarse + 1) * (n_coarse + 1));
    let mut node_blocks = Vec::with_capacity((n_coarse + 1) * (n_coarse + 1));
    for cy in 0..=n_coarse {
        for cx in 0..=n_coarse {
            coarse_nodes.push([cx as f64 * hc, cy as f64 * hc]);
            let mut blocks = Vec::new();
            for by in cy.saturating_sub(1)..=cy {
                if by >= n_coarse {
                    continue;
                }
                for bx in cx.saturating_sub(1)..=cx {
                    if bx >= n_coarse {
                        continue;
                    }
                    blocks.push(by * n_coarse + bx);
                }
            }
            node_blocks.push(blocks);
        }
    }

    let coarse = CoarseGrid {
        n_coarse,
        n_sub,
        coarse_nodes,
        node_blocks,
    };
    Ok((mesh, coarse))
}

/// Build the neighborhood `omega_i` of every coarse node.
pub fn build_neighborhoods(coarse: &CoarseGrid, mesh: &FineMesh) -> Vec<Neighborhood> {
    let n_c = coarse.n_coarse;
    let n_s = coarse.n_sub;
    let n = mesh.intervals;
    let mut out = Vec::with_capacity(coarse.n_nodes());
    for i in 0..coarse.n_nodes() {
        let (cx, cy) = coarse.node_pos(i);
        // The patch rectangle in fine-grid indices.
        let ix0 = cx.saturating_sub(1) * n_s;
        let ix1 = ((cx + 1).min(n_c)) * n_s;
        let iy0 = cy.saturating_sub(1) * n_s;
        let iy1 = ((cy + 1).min(n_c)) * n_s;

        let mut fine_nodes = Vec::with_capacity((ix1 - ix0 + 1) * (iy1 - iy0 + 1));
        for iy in iy0..=iy1 {
            for ix in ix0..=ix1 {
                fine_nodes.push(iy * (n + 1) + ix);
            }
        }
        let global_to_local = fine_nodes
            .iter()
            .enumerate()
            .map(|(l, &g)| (g, l))
            .collect();

        let mut triangles = Vec::with_capacity(2 * (ix1 - ix0) * (iy1 - iy0));
        for iy in iy0..iy1 {
            for ix in ix0..ix1 {
                let sq = iy * n + ix;
                triangles.push(2 * sq);
                triangles.push(2 * sq + 1);
            }
        }

        out.push(Neighborhood {
            coarse_node: i,
            fine_nodes,
            global_to_local,
            triangles,
            ix_range: (ix0, ix1),
            iy_range: (iy0, iy1),
        });
    }
    out
}

/// Build the partition of unity from bilinear coarse hat functions evaluated
/// at fine nodes. Hats interpolate 1 at their own coarse node, vanish at and
/// beyond the neighboring coarse nodes, and sum to one everywhere.
pub fn build_partition_of_unity(coarse: &CoarseGrid, mesh: &FineMesh) -> PartitionOfUnity {
    let nbhds = build_neighborhoods(coarse, mesh);
    let hc = 1.0 / coarse.n_coarse as f64;
    let mut chi = Vec::with_capacity(coarse.n_nodes());
    for nbhd in &nbhds {
        let center = coarse.coarse_nodes[nbhd.coarse_node];
        let vals = nbhd
            .fine_nodes
            .iter()
            .map(|&g| {
                let p = mesh.nodes[g];
                let tx = (1.0 - (p[0] - center[0]).abs() / hc).max(0.0);
                let ty = (1.0 - (p[1] - center[1]).abs() / hc).max(0.0);
                tx * ty
            })
            .collect();
        chi.push(vals);
    }
    PartitionOfUnity { chi }
}
