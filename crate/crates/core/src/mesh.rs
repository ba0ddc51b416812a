//! Structured quadrilateral meshes with tagged boundary facets.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryTag {
    Interior,
    Wall,
    Inlet,
    Outlet,
    Step,
}

impl BoundaryTag {
    pub fn is_boundary(self) -> bool {
        self != BoundaryTag::Interior
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Facet {
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
}

/// Conforming quadrilateral mesh.
///
/// Cells list their corners counterclockwise. Local edge `k` of a cell joins
/// corners `k` and `(k + 1) % 4`; `cell_facets[c][k]` is the global facet index
/// of that edge.
#[derive(Clone, Debug)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    cells: Vec<[usize; 4]>,
    facets: Vec<Facet>,
    cell_facets: Vec<[usize; 4]>,
    h_max: f64,
}

const GEOM_TOL: f64 = 1e-12;

impl Mesh {
    /// Builds the facet list from cell connectivity. `tag_of` is called once per
    /// boundary facet with its two endpoint coordinates.
    pub fn from_cells<F>(vertices: Vec<[f64; 2]>, cells: Vec<[usize; 4]>, mut tag_of: F) -> Result<Self>
    where
        F: FnMut([f64; 2], [f64; 2]) -> BoundaryTag,
    {
        if cells.is_empty() {
            return Err(Error::InvalidArgument("mesh has no cells".into()));
        }
        for (c, cell) in cells.iter().enumerate() {
            if cell.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::InvalidArgument(format!("cell {c} references a missing vertex")));
            }
            let pts = cell.map(|v| vertices[v]);
            if corner_jacobians(&pts).iter().any(|&j| j <= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "cell {c} is degenerate or not counterclockwise"
                )));
            }
        }

        let mut edge_index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut owners: Vec<u8> = Vec::new();
        let mut facet_vertices: Vec<[usize; 2]> = Vec::new();
        let mut cell_facets = Vec::with_capacity(cells.len());
        for cell in &cells {
            let mut local = [0usize; 4];
            for (k, slot) in local.iter_mut().enumerate() {
                let (a, b) = (cell[k], cell[(k + 1) % 4]);
                let key = (a.min(b), a.max(b));
                let idx = *edge_index.entry(key).or_insert_with(|| {
                    facet_vertices.push([a, b]);
                    owners.push(0);
                    facet_vertices.len() - 1
                });
                owners[idx] += 1;
                *slot = idx;
            }
            cell_facets.push(local);
        }

        let mut facets = Vec::with_capacity(facet_vertices.len());
        for (verts, &count) in facet_vertices.iter().zip(&owners) {
            let tag = match count {
                1 => {
                    let tag = tag_of(vertices[verts[0]], vertices[verts[1]]);
                    if !tag.is_boundary() {
                        return Err(Error::InvalidArgument(
                            "boundary facet classified as interior".into(),
                        ));
                    }
                    tag
                }
                2 => BoundaryTag::Interior,
                n => {
                    return Err(Error::InvalidArgument(format!(
                        "non-manifold facet shared by {n} cells"
                    )))
                }
            };
            facets.push(Facet { vertices: *verts, tag });
        }

        let h_max = cells
            .iter()
            .map(|cell| cell_diameter(&cell.map(|v| vertices[v])))
            .fold(0.0, f64::max);

        Ok(Self { vertices, cells, facets, cell_facets, h_max })
    }

    /// `n` x `n` cells on the unit square, every boundary facet tagged `Wall`.
    pub fn unit_square(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("unit_square needs n >= 1".into()));
        }
        let (vertices, cells) = rectangle_grid(n, n, 1.0 / n as f64, |_, _| true);
        Self::from_cells(vertices, cells, |_, _| BoundaryTag::Wall)
    }

    /// The `[0,40] x [0,10]` channel with the unit step `[5,6] x [0,1]` removed
    /// from the bottom wall.
    pub fn step_channel(cells_per_unit: usize) -> Result<Self> {
        if cells_per_unit == 0 {
            return Err(Error::InvalidArgument("step_channel needs cells_per_unit >= 1".into()));
        }
        let k = cells_per_unit;
        let size = 1.0 / k as f64;
        let (vertices, cells) = rectangle_grid(40 * k, 10 * k, size, |i, j| {
            !((5 * k..6 * k).contains(&i) && j < k)
        });
        Self::from_cells(vertices, cells, classify_channel_facet)
    }

    /// Uniform red refinement: every cell is split into four.
    pub fn refine(&self) -> Result<Self> {
        let nv = self.vertices.len();
        let nf = self.facets.len();
        let mut vertices = self.vertices.clone();
        for facet in &self.facets {
            let [a, b] = facet.vertices.map(|v| self.vertices[v]);
            vertices.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
        }
        for cell in &self.cells {
            let pts = cell.map(|v| self.vertices[v]);
            let cx = pts.iter().map(|p| p[0]).sum::<f64>() / 4.0;
            let cy = pts.iter().map(|p| p[1]).sum::<f64>() / 4.0;
            vertices.push([cx, cy]);
        }

        let mut cells = Vec::with_capacity(4 * self.cells.len());
        for (c, (cell, edges)) in self.cells.iter().zip(&self.cell_facets).enumerate() {
            let m = edges.map(|e| nv + e);
            let z = nv + nf + c;
            let [c0, c1, c2, c3] = *cell;
            cells.push([c0, m[0], z, m[3]]);
            cells.push([m[0], c1, m[1], z]);
            cells.push([z, m[1], c2, m[2]]);
            cells.push([m[3], z, m[2], c3]);
        }

        // Child boundary facets inherit the parent's tag, keyed by endpoint coordinates.
        let mut by_coord: HashMap<(u64, u64, u64, u64), BoundaryTag> = HashMap::new();
        for (f, facet) in self.boundary_facets() {
            let mid = vertices[nv + f];
            for end in facet.vertices.map(|v| vertices[v]) {
                by_coord.insert(coord_key(end, mid), facet.tag);
                by_coord.insert(coord_key(mid, end), facet.tag);
            }
        }
        Self::from_cells(vertices, cells, |a, b| {
            by_coord.get(&coord_key(a, b)).copied().unwrap_or(BoundaryTag::Wall)
        })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn cells(&self) -> &[[usize; 4]] {
        &self.cells
    }

    pub fn facets(&self) -> &[Facet] {
        &self.facets
    }

    pub fn cell_facets(&self) -> &[[usize; 4]] {
        &self.cell_facets
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

    /// Largest cell diameter.
    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    /// Longest cell edge; equals the grid spacing on uniform grids.
    pub fn max_edge_length(&self) -> f64 {
        self.facets
            .iter()
            .map(|f| {
                let [a, b] = f.vertices.map(|v| self.vertices[v]);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn cell_corners(&self, c: usize) -> [[f64; 2]; 4] {
        self.cells[c].map(|v| self.vertices[v])
    }

    pub fn cell_area(&self, c: usize) -> f64 {
        let p = self.cell_corners(c);
        0.5 * (0..4)
            .map(|k| {
                let (a, b) = (p[k], p[(k + 1) % 4]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
    }

    pub fn area(&self) -> f64 {
        (0..self.num_cells()).map(|c| self.cell_area(c)).sum()
    }

    pub fn boundary_facets(&self) -> impl Iterator<Item = (usize, &Facet)> {
        self.facets.iter().enumerate().filter(|(_, f)| f.tag.is_boundary())
    }

    /// Tags present on the boundary, sorted.
    pub fn boundary_tags(&self) -> Vec<BoundaryTag> {
        let mut tags: Vec<BoundaryTag> = self.boundary_facets().map(|(_, f)| f.tag).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    /// Number of cells owning each facet.
    pub fn facet_owner_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.facets.len()];
        for edges in &self.cell_facets {
            for &e in edges {
                counts[e] += 1;
            }
        }
        counts
    }
}

fn coord_key(a: [f64; 2], b: [f64; 2]) -> (u64, u64, u64, u64) {
    (a[0].to_bits(), a[1].to_bits(), b[0].to_bits(), b[1].to_bits())
}

/// Grid of `nx` x `ny` square cells of side `size`, keeping cell `(i, j)` only
/// when `keep(i, j)`. Unused vertices are dropped.
fn rectangle_grid<K>(nx: usize, ny: usize, size: f64, keep: K) -> (Vec<[f64; 2]>, Vec<[usize; 4]>)
where
    K: Fn(usize, usize) -> bool,
{
    let grid_index = |i: usize, j: usize| j * (nx + 1) + i;
    let mut used = vec![false; (nx + 1) * (ny + 1)];
    let mut raw_cells = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if keep(i, j) {
                let cell = [grid_index(i, j), grid_index(i + 1, j), grid_index(i + 1, j + 1), grid_index(i, j + 1)];
                for &v in &cell {
                    used[v] = true;
                }
                raw_cells.push(cell);
            }
        }
    }
    let mut remap = vec![usize::MAX; used.len()];
    let mut vertices = Vec::new();
    for j in 0..=ny {
        for i in 0..=nx {
            let g = grid_index(i, j);
            if used[g] {
                remap[g] = vertices.len();
                vertices.push([i as f64 * size, j as f64 * size]);
            }
        }
    }
    let cells = raw_cells.into_iter().map(|c| c.map(|v| remap[v])).collect();
    (vertices, cells)
}

fn classify_channel_facet(a: [f64; 2], b: [f64; 2]) -> BoundaryTag {
    let near = |x: f64, y: f64| (x - y).abs() < GEOM_TOL;
    let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
    if near(a[0], 0.0) && near(b[0], 0.0) {
        BoundaryTag::Inlet
    } else if near(a[0], 40.0) && near(b[0], 40.0) {
        BoundaryTag::Outlet
    } else if (near(a[0], b[0]) && (near(mid[0], 5.0) || near(mid[0], 6.0)) && mid[1] < 1.0)
        || (near(a[1], 1.0) && near(b[1], 1.0) && mid[0] > 5.0 && mid[0] < 6.0)
    {
        BoundaryTag::Step
    } else {
        BoundaryTag::Wall
    }
}

/// Jacobian determinant of the bilinear map at each corner.
fn corner_jacobians(p: &[[f64; 2]; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for k in 0..4 {
        let (prev, cur, next) = (p[(k + 3) % 4], p[k], p[(k + 1) % 4]);
        let e1 = [next[0] - cur[0], next[1] - cur[1]];
        let e2 = [prev[0] - cur[0], prev[1] - cur[1]];
        out[k] = e1[0] * e2[1] - e1[1] * e2[0];
    }
    out
}

fn cell_diameter(p: &[[f64; 2]; 4]) -> f64 {
    let mut d: f64 = 0.0;
    for a in 0..4 {
        for b in a + 1..4 {
            d = d.max(((p[a][0] - p[b][0]).powi(2) + (p[a][1] - p[b][1]).powi(2)).sqrt());
        }
    }
    d
}
