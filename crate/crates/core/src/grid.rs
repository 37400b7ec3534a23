//! Structured tensor-product grids and Q1 finite-element assembly.
//!
//! Nodes are enumerated lexicographically with x fastest. Elements are the
//! grid cells, enumerated the same way. All integrals use the 2-point Gauss
//! rule per axis, which is exact for products of Q1 functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Strategy};
use crate::linalg::CsrMatrix;
use crate::physics::MobilityLaw;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredGrid {
    dim: usize,
    cells: [usize; 3],
    origin: [f64; 3],
    extent: [f64; 3],
}

impl StructuredGrid {
    /// Box `[0, extent_0] × …` with `cells[a]` cells along axis `a`.
    pub fn new(cells: &[usize], extent: &[f64]) -> Result<Self> {
        let dim = cells.len();
        if !(1..=3).contains(&dim) || extent.len() != dim {
            return Err(Error::Parameter(format!(
                "grid needs 1 to 3 axes with matching extents, got {} cells and {} extents",
                cells.len(),
                extent.len()
            )));
        }
        let mut g = Self {
            dim,
            cells: [0; 3],
            origin: [0.0; 3],
            extent: [1.0; 3],
        };
        for a in 0..dim {
            if cells[a] == 0 {
                return Err(Error::Parameter(format!("axis {a} needs at least one cell")));
            }
            if !(extent[a] > 0.0 && extent[a].is_finite()) {
                return Err(Error::Parameter(format!("axis {a} extent must be positive")));
            }
            g.cells[a] = cells[a];
            g.extent[a] = extent[a];
        }
        Ok(g)
    }

    /// Unit interval, square or cube with `n` cells per axis.
    pub fn unit(dim: usize, n: usize) -> Result<Self> {
        Self::new(&vec![n; dim], &vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cells along `axis`; zero for axes beyond `dim`.
    pub fn cells(&self, axis: usize) -> usize {
        self.cells[axis]
    }

    pub fn nodes_per_axis(&self, axis: usize) -> usize {
        if axis < self.dim {
            self.cells[axis] + 1
        } else {
            1
        }
    }

    /// Mesh width along `axis`; 1 for degenerate axes.
    pub fn spacing(&self, axis: usize) -> f64 {
        if axis < self.dim {
            self.extent[axis] / self.cells[axis] as f64
        } else {
            1.0
        }
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.extent[axis]
    }

    pub fn node_count(&self) -> usize {
        (0..3).map(|a| self.nodes_per_axis(a)).product()
    }

    pub fn element_count(&self) -> usize {
        (0..self.dim).map(|a| self.cells[a]).product()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|a| self.extent[a]).product()
    }

    pub fn node_index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.nodes_per_axis(0) * (ijk[1] + self.nodes_per_axis(1) * ijk[2])
    }

    pub fn node_ijk(&self, idx: usize) -> [usize; 3] {
        let nx = self.nodes_per_axis(0);
        let ny = self.nodes_per_axis(1);
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn node_coords(&self, idx: usize) -> [f64; 3] {
        let ijk = self.node_ijk(idx);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.origin[a] + ijk[a] as f64 * self.spacing(a);
        }
        x
    }

    fn stride(&self, axis: usize) -> usize {
        (0..axis).map(|a| self.nodes_per_axis(a)).product()
    }

    fn element_ijk(&self, e: usize) -> [usize; 3] {
        let cx = self.cells[0].max(1);
        let cy = self.cells[1].max(1);
        [e % cx, (e / cx) % cy, e / (cx * cy)]
    }

    fn element_index(&self, ijk: [usize; 3]) -> usize {
        let cx = self.cells[0].max(1);
        let cy = self.cells[1].max(1);
        ijk[0] + cx * (ijk[1] + cy * ijk[2])
    }
}

/// Nodal values on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: StructuredGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: StructuredGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::Shape(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite field value at node {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: StructuredGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.node_count()],
        }
    }

    pub fn from_fn(grid: StructuredGrid, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..grid.node_count()).map(|i| f(grid.node_coords(i))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ensure_same_grid(&self, other: &ScalarField) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Shape("fields live on different grids".into()));
        }
        Ok(())
    }
}

const GAUSS_LO: f64 = 0.5 - 0.288_675_134_594_812_9; // 1/(2√3)
const GAUSS_HI: f64 = 0.5 + 0.288_675_134_594_812_9;

/// Q1 discretization of a structured grid: reference tables, sparsity
/// pattern, element-to-row scatter map and the constant mass and stiffness
/// matrices.
#[derive(Clone, Debug)]
pub struct FeSpace {
    grid: StructuredGrid,
    n_loc: usize,
    // shape values / gradients / weights at quadrature points, [q * n_loc + a]
    shape: Vec<f64>,
    grad: Vec<[f64; 3]>,
    weights: Vec<f64>,
    elem_nodes: Vec<usize>,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    // elements adjacent to each row: (element, local index of the row node)
    adj_offsets: Vec<usize>,
    adj: Vec<(usize, usize)>,
    // CSR position of (row, node(e, b)) for each adjacency entry, [k * n_loc + b]
    adj_pos: Vec<usize>,
    row_blocks: Vec<usize>,
    value_blocks: Vec<usize>,
    mass: CsrMatrix,
    stiffness: CsrMatrix,
    lumped: Vec<f64>,
}

const ROW_BLOCK: usize = 512;

impl FeSpace {
    pub fn new(grid: StructuredGrid) -> Self {
        let dim = grid.dim();
        let n_loc = 1usize << dim;
        let h: Vec<f64> = (0..dim).map(|a| grid.spacing(a)).collect();

        let bit = |v: usize, k: usize| (v >> k) & 1;
        let n1 = |b: usize, s: f64| if b == 0 { 1.0 - s } else { s };
        let dn1 = |b: usize| if b == 0 { -1.0 } else { 1.0 };
        let gp = |b: usize| if b == 0 { GAUSS_LO } else { GAUSS_HI };

        let mut shape = vec![0.0; n_loc * n_loc];
        let mut grad = vec![[0.0; 3]; n_loc * n_loc];
        let mut weights = vec![0.0; n_loc];
        for q in 0..n_loc {
            weights[q] = h.iter().map(|hk| 0.5 * hk).product();
            for a in 0..n_loc {
                let vals: Vec<f64> = (0..dim).map(|k| n1(bit(a, k), gp(bit(q, k)))).collect();
                shape[q * n_loc + a] = vals.iter().product();
                for k in 0..dim {
                    let others: f64 = (0..dim).filter(|&l| l != k).map(|l| vals[l]).product();
                    grad[q * n_loc + a][k] = dn1(bit(a, k)) / h[k] * others;
                }
            }
        }

        let n_elem = grid.element_count();
        let mut elem_nodes = vec![0; n_elem * n_loc];
        for e in 0..n_elem {
            let base = grid.node_index(grid.element_ijk(e));
            for a in 0..n_loc {
                let off: usize = (0..dim).map(|k| bit(a, k) * grid.stride(k)).sum();
                elem_nodes[e * n_loc + a] = base + off;
            }
        }

        let n = grid.node_count();
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        let mut adj_offsets = Vec::with_capacity(n + 1);
        let mut adj = Vec::new();
        let mut adj_pos = Vec::new();
        row_offsets.push(0);
        adj_offsets.push(0);
        for i in 0..n {
            let ijk = grid.node_ijk(i);
            let row_start = col_indices.len();
            let range = |a: usize| -> std::ops::RangeInclusive<isize> {
                if a < dim {
                    let lo = if ijk[a] > 0 { -1 } else { 0 };
                    let hi = if ijk[a] < grid.cells(a) { 1 } else { 0 };
                    lo..=hi
                } else {
                    0..=0
                }
            };
            for dz in range(2) {
                for dy in range(1) {
                    for dx in range(0) {
                        let nb = [
                            (ijk[0] as isize + dx) as usize,
                            (ijk[1] as isize + dy) as usize,
                            (ijk[2] as isize + dz) as usize,
                        ];
                        col_indices.push(grid.node_index(nb));
                    }
                }
            }
            row_offsets.push(col_indices.len());
            let cols = &col_indices[row_start..];
            for a in 0..n_loc {
                let mut cell = [0usize; 3];
                let mut valid = true;
                for k in 0..dim {
                    let c = ijk[k] as isize - bit(a, k) as isize;
                    if c < 0 || c as usize >= grid.cells(k) {
                        valid = false;
                        break;
                    }
                    cell[k] = c as usize;
                }
                if !valid {
                    continue;
                }
                let e = grid.element_index(cell);
                adj.push((e, a));
                for b in 0..n_loc {
                    let j = elem_nodes[e * n_loc + b];
                    let p = cols.binary_search(&j).expect("element node within stencil");
                    adj_pos.push(row_start + p);
                }
            }
            adj_offsets.push(adj.len());
        }

        let row_blocks: Vec<usize> = (0..n)
            .step_by(ROW_BLOCK)
            .chain(std::iter::once(n))
            .collect();
        let value_blocks = row_blocks.iter().map(|&r| row_offsets[r]).collect();

        let mut space = Self {
            grid,
            n_loc,
            shape,
            grad,
            weights,
            elem_nodes,
            row_offsets,
            col_indices,
            adj_offsets,
            adj,
            adj_pos,
            row_blocks,
            value_blocks,
            mass: CsrMatrix::identity(0),
            stiffness: CsrMatrix::identity(0),
            lumped: Vec::new(),
        };
        let ones = vec![1.0; n_elem * n_loc];
        space.mass = space.weighted_mass(&ones);
        space.stiffness = space.weighted_stiffness_q(&ones);
        space.lumped = (0..n)
            .map(|i| space.mass.row(i).1.iter().sum())
            .collect();
        space
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn node_count(&self) -> usize {
        self.grid.node_count()
    }

    /// Quadrature points per element.
    pub fn quad_per_element(&self) -> usize {
        self.n_loc
    }

    pub fn quad_count(&self) -> usize {
        self.grid.element_count() * self.n_loc
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// Row sums of the mass matrix.
    pub fn lumped_mass(&self) -> &[f64] {
        &self.lumped
    }

    fn check_nodal(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.node_count() {
            return Err(Error::Shape(format!(
                "nodal vector has {} entries, grid has {} nodes",
                v.len(),
                self.node_count()
            )));
        }
        Ok(())
    }

    /// Values of the Q1 interpolant at every quadrature point, `[e * nq + q]`.
    pub fn interpolate(&self, nodal: &[f64]) -> Vec<f64> {
        assert_eq!(nodal.len(), self.node_count());
        let nl = self.n_loc;
        let mut out = vec![0.0; self.quad_count()];
        exec::for_each_chunk_mut(Strategy::current(), &mut out, nl * 256, |off, chunk| {
            for (k, v) in chunk.iter_mut().enumerate() {
                let idx = off + k;
                let (e, q) = (idx / nl, idx % nl);
                let nodes = &self.elem_nodes[e * nl..(e + 1) * nl];
                let shp = &self.shape[q * nl..(q + 1) * nl];
                *v = nodes.iter().zip(shp).map(|(&n, s)| nodal[n] * s).sum();
            }
        });
        out
    }

    /// Gradients of the Q1 interpolant at every quadrature point.
    pub fn gradient(&self, nodal: &[f64]) -> Vec<[f64; 3]> {
        assert_eq!(nodal.len(), self.node_count());
        let nl = self.n_loc;
        let mut out = vec![[0.0; 3]; self.quad_count()];
        exec::for_each_chunk_mut(Strategy::current(), &mut out, nl * 256, |off, chunk| {
            for (k, v) in chunk.iter_mut().enumerate() {
                let idx = off + k;
                let (e, q) = (idx / nl, idx % nl);
                let mut g = [0.0; 3];
                for a in 0..nl {
                    let u = nodal[self.elem_nodes[e * nl + a]];
                    let ga = self.grad[q * nl + a];
                    for d in 0..3 {
                        g[d] += u * ga[d];
                    }
                }
                *v = g;
            }
        });
        out
    }

    /// Assembles `A_ij = Σ_e local(e, a, b)` over the shared sparsity pattern,
    /// where `i = node(e, a)` and `j = node(e, b)`.
    pub fn assemble_with<F>(&self, strategy: Strategy, local: F) -> CsrMatrix
    where
        F: Fn(usize, usize, usize) -> f64 + Sync + Send,
    {
        let nl = self.n_loc;
        let mut values = vec![0.0; self.col_indices.len()];
        exec::for_each_segment_mut(strategy, &mut values, &self.value_blocks, |blk, seg| {
            let base = self.value_blocks[blk];
            for r in self.row_blocks[blk]..self.row_blocks[blk + 1] {
                for k in self.adj_offsets[r]..self.adj_offsets[r + 1] {
                    let (e, a) = self.adj[k];
                    for b in 0..nl {
                        seg[self.adj_pos[k * nl + b] - base] += local(e, a, b);
                    }
                }
            }
        });
        CsrMatrix::from_parts_unchecked(
            self.node_count(),
            self.node_count(),
            self.row_offsets.clone(),
            self.col_indices.clone(),
            values,
        )
    }

    pub fn assemble<F>(&self, local: F) -> CsrMatrix
    where
        F: Fn(usize, usize, usize) -> f64 + Sync + Send,
    {
        self.assemble_with(Strategy::current(), local)
    }

    /// `v_i = Σ_e local(e, a)` with `i = node(e, a)`.
    pub fn assemble_vector<F>(&self, local: F) -> Vec<f64>
    where
        F: Fn(usize, usize) -> f64 + Sync + Send,
    {
        let mut out = vec![0.0; self.node_count()];
        exec::for_each_chunk_mut(Strategy::current(), &mut out, ROW_BLOCK, |off, chunk| {
            for (k, v) in chunk.iter_mut().enumerate() {
                let r = off + k;
                let mut acc = 0.0;
                for idx in self.adj_offsets[r]..self.adj_offsets[r + 1] {
                    let (e, a) = self.adj[idx];
                    acc += local(e, a);
                }
                *v = acc;
            }
        });
        out
    }

    /// `∫ c h_i h_j` with `c` given at quadrature points.
    pub fn weighted_mass(&self, coef: &[f64]) -> CsrMatrix {
        assert_eq!(coef.len(), self.quad_count());
        let nl = self.n_loc;
        self.assemble(|e, a, b| {
            (0..nl)
                .map(|q| coef[e * nl + q] * self.weights[q] * self.shape[q * nl + a] * self.shape[q * nl + b])
                .sum()
        })
    }

    /// `∫ c ∇h_i·∇h_j` with `c` given at quadrature points.
    pub fn weighted_stiffness_q(&self, coef: &[f64]) -> CsrMatrix {
        assert_eq!(coef.len(), self.quad_count());
        let nl = self.n_loc;
        self.assemble(|e, a, b| {
            (0..nl)
                .map(|q| coef[e * nl + q] * self.weights[q] * dot3(&self.grad[q * nl + a], &self.grad[q * nl + b]))
                .sum()
        })
    }

    /// `∫ c h_j (v·∇h_i)`; not symmetric in general.
    pub fn weighted_advection(&self, coef: &[f64], v: &[[f64; 3]]) -> CsrMatrix {
        assert_eq!(coef.len(), self.quad_count());
        assert_eq!(v.len(), self.quad_count());
        let nl = self.n_loc;
        self.assemble(|e, a, b| {
            (0..nl)
                .map(|q| {
                    let i = e * nl + q;
                    coef[i] * self.weights[q] * self.shape[q * nl + b] * dot3(&v[i], &self.grad[q * nl + a])
                })
                .sum()
        })
    }

    /// `∫ g h_i` with `g` given at quadrature points.
    pub fn load(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.quad_count());
        let nl = self.n_loc;
        self.assemble_vector(|e, a| {
            (0..nl)
                .map(|q| g[e * nl + q] * self.weights[q] * self.shape[q * nl + a])
                .sum()
        })
    }

    /// `∫ v·∇h_i` with `v` given at quadrature points.
    pub fn gradient_load(&self, v: &[[f64; 3]]) -> Vec<f64> {
        assert_eq!(v.len(), self.quad_count());
        let nl = self.n_loc;
        self.assemble_vector(|e, a| {
            (0..nl)
                .map(|q| self.weights[q] * dot3(&v[e * nl + q], &self.grad[q * nl + a]))
                .sum()
        })
    }

    /// `∫ g` with `g` given at quadrature points.
    pub fn integrate(&self, g: &[f64]) -> f64 {
        assert_eq!(g.len(), self.quad_count());
        let nl = self.n_loc;
        let n_elem = self.grid.element_count();
        exec::sum_indexed(Strategy::current(), n_elem, |e| {
            (0..nl).map(|q| g[e * nl + q] * self.weights[q]).sum()
        })
    }

    /// `∫ m(φ_h) ∇h_i·∇h_j`; errors if the mobility is negative at a quadrature point.
    pub fn weighted_stiffness(&self, phi: &[f64], mobility: &MobilityLaw) -> Result<CsrMatrix> {
        self.check_nodal(phi)?;
        let coef: Vec<f64> = self.interpolate(phi).iter().map(|&x| mobility.value(x)).collect();
        if let Some(k) = coef.iter().position(|&m| !(m >= 0.0)) {
            return Err(Error::Model(format!(
                "mobility {} at quadrature point {k} is negative or not finite",
                coef[k]
            )));
        }
        Ok(self.weighted_stiffness_q(&coef))
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn assemble_mass(grid: &StructuredGrid) -> CsrMatrix {
    FeSpace::new(*grid).mass
}

pub fn assemble_stiffness(grid: &StructuredGrid) -> CsrMatrix {
    FeSpace::new(*grid).stiffness
}

pub fn assemble_weighted_stiffness(
    grid: &StructuredGrid,
    coeff: &ScalarField,
    m: &MobilityLaw,
) -> Result<CsrMatrix> {
    if coeff.grid() != grid {
        return Err(Error::Shape("coefficient field lives on a different grid".into()));
    }
    FeSpace::new(*grid).weighted_stiffness(coeff.values(), m)
}
