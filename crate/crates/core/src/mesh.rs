//! Reference-domain discretization: structured quad mesh with bilinear
//! velocity on O = (0,L) x (0,1), and a 1D C1-conforming Hermite mesh for the
//! elastic boundary on (0,L).
//!
//! Conventions:
//! - fluid node (iz, ir) has index `iz * (nr + 1) + ir`; component-major dofs,
//!   component 0 = z, component 1 = r;
//! - cell (cz, cr) has index `cz * nr + cr`, quadrature point `q` of cell `c`
//!   has global index `4 * c + q` (2x2 Gauss);
//! - structure node `i` carries a value dof `2i` and a slope dof `2i + 1`
//!   per component (cubic Hermite), 3-point Gauss per cell.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::linalg::{sparse_from_triplets, Sparse};
use crate::quadrature::gauss_unit;

/// Boundary classification of the reference rectangle. Corner nodes are
/// resolved with priority gamma_top > inlet/outlet > bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum BoundaryTag {
    GammaTop,
    Inlet,
    Outlet,
    Bottom,
}

/// How the discrete velocity space treats traces on the elastic boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaConstraint {
    /// No essential constraint on Gamma; both trace components are coupled to
    /// the structure velocity through the boundary penalty.
    PenaltyBoth,
    /// Essential u_z = 0 on Gamma; the penalty couples only the r component.
    ZeroZPenaltyR,
}

/// One straight boundary edge of the fluid mesh.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryEdge {
    pub nodes: (usize, usize),
    pub tag: BoundaryTag,
}

/// Structured quadrilateral mesh of the reference channel with bilinear
/// velocity shape functions and a 2x2 Gauss rule per cell.
#[derive(Debug, Clone)]
pub struct RefMesh {
    pub length: f64,
    pub nz: usize,
    pub nr: usize,
    pub hz: f64,
    pub hr: f64,
    nodes: Vec<[f64; 2]>,
    cells: Vec<[usize; 4]>,
    node_tags: Vec<Option<BoundaryTag>>,
    boundary_edges: Vec<BoundaryEdge>,
    /// Reference-cell quadrature: local coordinates and basis tables shared by
    /// every cell of the uniform grid.
    quad_local: [[f64; 2]; 4],
    quad_weight: f64,
    basis_val: [[f64; 4]; 4],
    basis_dz: [[f64; 4]; 4],
    basis_dr: [[f64; 4]; 4],
}

fn q1_value(a: usize, x: f64, y: f64) -> f64 {
    match a {
        0 => (1.0 - x) * (1.0 - y),
        1 => x * (1.0 - y),
        2 => x * y,
        3 => (1.0 - x) * y,
        _ => unreachable!(),
    }
}

fn q1_grad(a: usize, x: f64, y: f64) -> [f64; 2] {
    match a {
        0 => [-(1.0 - y), -(1.0 - x)],
        1 => [1.0 - y, -x],
        2 => [y, x],
        3 => [-y, 1.0 - x],
        _ => unreachable!(),
    }
}

impl RefMesh {
    pub fn build(length: f64, nz: usize, nr: usize) -> Result<Self> {
        if !(length > 0.0) || nz == 0 || nr == 0 {
            return Err(CoreError::Config(format!(
                "mesh dimensions must be positive: L={length}, nz={nz}, nr={nr}"
            )));
        }
        let hz = length / nz as f64;
        let hr = 1.0 / nr as f64;
        let mut nodes = Vec::with_capacity((nz + 1) * (nr + 1));
        let mut node_tags = Vec::with_capacity((nz + 1) * (nr + 1));
        for iz in 0..=nz {
            for ir in 0..=nr {
                nodes.push([iz as f64 * hz, ir as f64 * hr]);
                node_tags.push(if ir == nr {
                    Some(BoundaryTag::GammaTop)
                } else if iz == 0 {
                    Some(BoundaryTag::Inlet)
                } else if iz == nz {
                    Some(BoundaryTag::Outlet)
                } else if ir == 0 {
                    Some(BoundaryTag::Bottom)
                } else {
                    None
                });
            }
        }
        let node = |iz: usize, ir: usize| iz * (nr + 1) + ir;
        let mut cells = Vec::with_capacity(nz * nr);
        for cz in 0..nz {
            for cr in 0..nr {
                cells.push([
                    node(cz, cr),
                    node(cz + 1, cr),
                    node(cz + 1, cr + 1),
                    node(cz, cr + 1),
                ]);
            }
        }
        let mut boundary_edges = Vec::new();
        for cr in 0..nr {
            boundary_edges.push(BoundaryEdge {
                nodes: (node(0, cr), node(0, cr + 1)),
                tag: BoundaryTag::Inlet,
            });
            boundary_edges.push(BoundaryEdge {
                nodes: (node(nz, cr), node(nz, cr + 1)),
                tag: BoundaryTag::Outlet,
            });
        }
        for cz in 0..nz {
            boundary_edges.push(BoundaryEdge {
                nodes: (node(cz, 0), node(cz + 1, 0)),
                tag: BoundaryTag::Bottom,
            });
            boundary_edges.push(BoundaryEdge {
                nodes: (node(cz, nr), node(cz + 1, nr)),
                tag: BoundaryTag::GammaTop,
            });
        }

        let g2 = gauss_unit(2);
        let mut quad_local = [[0.0; 2]; 4];
        let mut basis_val = [[0.0; 4]; 4];
        let mut basis_dz = [[0.0; 4]; 4];
        let mut basis_dr = [[0.0; 4]; 4];
        let mut q = 0;
        for &(gx, _) in &g2 {
            for &(gy, _) in &g2 {
                quad_local[q] = [gx, gy];
                for a in 0..4 {
                    basis_val[q][a] = q1_value(a, gx, gy);
                    let g = q1_grad(a, gx, gy);
                    basis_dz[q][a] = g[0] / hz;
                    basis_dr[q][a] = g[1] / hr;
                }
                q += 1;
            }
        }
        // 2x2 tensor Gauss: all four weights are (hz/2)(hr/2).
        let quad_weight = 0.25 * hz * hr;

        Ok(RefMesh {
            length,
            nz,
            nr,
            hz,
            hr,
            nodes,
            cells,
            node_tags,
            boundary_edges,
            quad_local,
            quad_weight,
            basis_val,
            basis_dz,
            basis_dr,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn quad_count(&self) -> usize {
        4 * self.cells.len()
    }

    pub fn node_coords(&self, node: usize) -> [f64; 2] {
        self.nodes[node]
    }

    pub fn node_index(&self, iz: usize, ir: usize) -> usize {
        iz * (self.nr + 1) + ir
    }

    pub fn cell_nodes(&self, cell: usize) -> [usize; 4] {
        self.cells[cell]
    }

    pub fn node_tag(&self, node: usize) -> Option<BoundaryTag> {
        self.node_tags[node]
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    /// Coordinates of quadrature point `q` (0..4) of `cell`.
    pub fn quad_coords(&self, cell: usize, q: usize) -> [f64; 2] {
        let cz = cell / self.nr;
        let cr = cell % self.nr;
        let [gx, gy] = self.quad_local[q];
        [(cz as f64 + gx) * self.hz, (cr as f64 + gy) * self.hr]
    }

    /// Quadrature weight (identical for every point of the 2x2 rule).
    pub fn quad_weight(&self) -> f64 {
        self.quad_weight
    }

    pub fn total_quad_weight(&self) -> f64 {
        self.quad_weight * self.quad_count() as f64
    }

    /// Basis values `phi_a` at local quadrature point `q`.
    pub fn basis_values(&self, q: usize) -> &[f64; 4] {
        &self.basis_val[q]
    }

    /// Basis z-derivatives at local quadrature point `q` (already scaled by 1/hz).
    pub fn basis_dz(&self, q: usize) -> &[f64; 4] {
        &self.basis_dz[q]
    }

    pub fn basis_dr(&self, q: usize) -> &[f64; 4] {
        &self.basis_dr[q]
    }

    /// Bilinear basis evaluation at an arbitrary point, returning the owning
    /// cell and the 4 local values. Points on cell boundaries resolve to the
    /// lower-index cell, clamped into the mesh.
    pub fn locate(&self, z: f64, r: f64) -> (usize, [f64; 4]) {
        let cz = ((z / self.hz).floor() as isize).clamp(0, self.nz as isize - 1) as usize;
        let cr = ((r / self.hr).floor() as isize).clamp(0, self.nr as isize - 1) as usize;
        let x = (z - cz as f64 * self.hz) / self.hz;
        let y = (r - cr as f64 * self.hr) / self.hr;
        let cell = cz * self.nr + cr;
        let mut vals = [0.0; 4];
        for (a, v) in vals.iter_mut().enumerate() {
            *v = q1_value(a, x, y);
        }
        (cell, vals)
    }

    /// JSON-serializable summary (node/cell counts, tag census).
    pub fn summary(&self) -> MeshSummary {
        let mut tag_counts = BTreeMap::new();
        for t in self.node_tags.iter().flatten() {
            *tag_counts.entry(format!("{t:?}")).or_insert(0usize) += 1;
        }
        MeshSummary {
            length: self.length,
            nz: self.nz,
            nr: self.nr,
            node_count: self.node_count(),
            cell_count: self.cell_count(),
            quad_point_count: self.quad_count(),
            total_quad_weight: self.total_quad_weight(),
            boundary_edge_count: self.boundary_edges.len(),
            node_tag_counts: tag_counts,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MeshSummary {
    pub length: f64,
    pub nz: usize,
    pub nr: usize,
    pub node_count: usize,
    pub cell_count: usize,
    pub quad_point_count: usize,
    pub total_quad_weight: f64,
    pub boundary_edge_count: usize,
    pub node_tag_counts: BTreeMap<String, usize>,
}

/// Two-component velocity coefficients on the fluid mesh, component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidField {
    pub data: Vec<f64>,
}

impl FluidField {
    pub fn zeros(mesh: &RefMesh) -> Self {
        FluidField {
            data: vec![0.0; 2 * mesh.node_count()],
        }
    }

    /// Nodal interpolation of an analytic field `(z, r) -> [f_z, f_r]`.
    pub fn interpolate(mesh: &RefMesh, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let nn = mesh.node_count();
        let mut data = vec![0.0; 2 * nn];
        for n in 0..nn {
            let [z, r] = mesh.node_coords(n);
            let v = f(z, r);
            data[n] = v[0];
            data[nn + n] = v[1];
        }
        FluidField { data }
    }

    pub fn dof(nn: usize, comp: usize, node: usize) -> usize {
        comp * nn + node
    }

    pub fn value(&self, mesh: &RefMesh, comp: usize, node: usize) -> f64 {
        self.data[comp * mesh.node_count() + node]
    }

    /// Field values at every quadrature point.
    pub fn at_quad(&self, mesh: &RefMesh) -> Vec<[f64; 2]> {
        let nn = mesh.node_count();
        let mut out = vec![[0.0; 2]; mesh.quad_count()];
        for cell in 0..mesh.cell_count() {
            let nodes = mesh.cell_nodes(cell);
            for q in 0..4 {
                let phi = mesh.basis_values(q);
                let mut v = [0.0; 2];
                for a in 0..4 {
                    v[0] += phi[a] * self.data[nodes[a]];
                    v[1] += phi[a] * self.data[nn + nodes[a]];
                }
                out[4 * cell + q] = v;
            }
        }
        out
    }

    /// Reference gradients at every quadrature point; `g[i][j] = d u_i / d x_j`.
    pub fn grad_at_quad(&self, mesh: &RefMesh) -> Vec<[[f64; 2]; 2]> {
        let nn = mesh.node_count();
        let mut out = vec![[[0.0; 2]; 2]; mesh.quad_count()];
        for cell in 0..mesh.cell_count() {
            let nodes = mesh.cell_nodes(cell);
            for q in 0..4 {
                let dz = mesh.basis_dz(q);
                let dr = mesh.basis_dr(q);
                let mut g = [[0.0; 2]; 2];
                for a in 0..4 {
                    g[0][0] += dz[a] * self.data[nodes[a]];
                    g[0][1] += dr[a] * self.data[nodes[a]];
                    g[1][0] += dz[a] * self.data[nn + nodes[a]];
                    g[1][1] += dr[a] * self.data[nn + nodes[a]];
                }
                out[4 * cell + q] = g;
            }
        }
        out
    }

    /// Trace on the top boundary at longitudinal coordinate `z`.
    pub fn top_trace(&self, mesh: &RefMesh, z: f64) -> [f64; 2] {
        let nn = mesh.node_count();
        let cz = ((z / mesh.hz).floor() as isize).clamp(0, mesh.nz as isize - 1) as usize;
        let x = (z - cz as f64 * mesh.hz) / mesh.hz;
        let left = mesh.node_index(cz, mesh.nr);
        let right = mesh.node_index(cz + 1, mesh.nr);
        [
            (1.0 - x) * self.data[left] + x * self.data[right],
            (1.0 - x) * self.data[nn + left] + x * self.data[nn + right],
        ]
    }
}

/// Essential-constraint mask over the stacked fluid dofs: u_r = 0 on the
/// inlet, outlet and bottom; Gamma traces per the configured policy.
pub fn fluid_mask(mesh: &RefMesh, gamma: GammaConstraint) -> Vec<bool> {
    let nn = mesh.node_count();
    let mut mask = vec![false; 2 * nn];
    for n in 0..nn {
        match mesh.node_tag(n) {
            Some(BoundaryTag::Inlet) | Some(BoundaryTag::Outlet) | Some(BoundaryTag::Bottom) => {
                mask[nn + n] = true;
            }
            Some(BoundaryTag::GammaTop) => {
                if gamma == GammaConstraint::ZeroZPenaltyR {
                    mask[n] = true;
                }
            }
            None => {}
        }
    }
    mask
}

/// Scalar bilinear mass matrix on the fluid mesh.
pub fn fluid_scalar_mass(mesh: &RefMesh) -> Sparse {
    fluid_scalar_weighted_mass(mesh, &vec![1.0; mesh.quad_count()]).expect("unit weight")
}

/// Scalar mass matrix weighted by a strictly positive quad-point function.
pub fn fluid_scalar_weighted_mass(mesh: &RefMesh, weight: &[f64]) -> Result<Sparse> {
    if weight.len() != mesh.quad_count() {
        return Err(CoreError::Shape(format!(
            "weight has {} entries, expected {}",
            weight.len(),
            mesh.quad_count()
        )));
    }
    if let Some((q, &w)) = weight.iter().enumerate().find(|&(_, &w)| !(w > 0.0)) {
        return Err(CoreError::DegenerateFrame(format!(
            "non-positive mass weight {w} at quadrature point {q}"
        )));
    }
    let wq = mesh.quad_weight();
    let mut trip = Vec::with_capacity(mesh.cell_count() * 16 * 4);
    for cell in 0..mesh.cell_count() {
        let nodes = mesh.cell_nodes(cell);
        for q in 0..4 {
            let phi = mesh.basis_values(q);
            let w = wq * weight[4 * cell + q];
            for a in 0..4 {
                for b in 0..4 {
                    trip.push((nodes[a], nodes[b], w * phi[a] * phi[b]));
                }
            }
        }
    }
    Ok(sparse_from_triplets(
        mesh.node_count(),
        mesh.node_count(),
        &trip,
    ))
}

/// L2 pairing of two vector fields through a scalar mass matrix applied
/// component-wise.
pub fn fluid_l2_product(mass: &Sparse, f: &FluidField, g: &FluidField) -> f64 {
    let nn = mass.nrows();
    crate::linalg::quad_form(mass, &f.data[..nn], &g.data[..nn])
        + crate::linalg::quad_form(mass, &f.data[nn..], &g.data[nn..])
}

/// 1D mesh for the elastic boundary with cubic Hermite (C1) elements.
#[derive(Debug, Clone)]
pub struct StructureMesh {
    pub length: f64,
    pub ns: usize,
    pub h: f64,
    /// Per-component constrained scalar dofs: value and slope at both ends.
    constrained: Vec<bool>,
    /// 3-point Gauss rule on the unit interval.
    quad: Vec<(f64, f64)>,
}

/// Hermite shape values, first and second z-derivatives at local coordinate
/// `s` in [0,1] on a cell of width `h`. Dof order: value-left, slope-left,
/// value-right, slope-right.
pub fn hermite_basis(s: f64, h: f64) -> ([f64; 4], [f64; 4], [f64; 4]) {
    let s2 = s * s;
    let s3 = s2 * s;
    let val = [
        1.0 - 3.0 * s2 + 2.0 * s3,
        h * (s - 2.0 * s2 + s3),
        3.0 * s2 - 2.0 * s3,
        h * (s3 - s2),
    ];
    let d1 = [
        (-6.0 * s + 6.0 * s2) / h,
        1.0 - 4.0 * s + 3.0 * s2,
        (6.0 * s - 6.0 * s2) / h,
        3.0 * s2 - 2.0 * s,
    ];
    let d2 = [
        (-6.0 + 12.0 * s) / (h * h),
        (-4.0 + 6.0 * s) / h,
        (6.0 - 12.0 * s) / (h * h),
        (6.0 * s - 2.0) / h,
    ];
    (val, d1, d2)
}

impl StructureMesh {
    pub fn build(length: f64, ns: usize) -> Result<Self> {
        if !(length > 0.0) || ns < 2 {
            return Err(CoreError::Config(format!(
                "structure mesh needs L > 0 and ns >= 2, got L={length}, ns={ns}"
            )));
        }
        let m = 2 * (ns + 1);
        let mut constrained = vec![false; m];
        constrained[0] = true;
        constrained[1] = true;
        constrained[m - 2] = true;
        constrained[m - 1] = true;
        Ok(StructureMesh {
            length,
            ns,
            h: length / ns as f64,
            constrained,
            quad: gauss_unit(3),
        })
    }

    /// Scalar dofs per component: value + slope at each of the ns+1 nodes.
    pub fn dofs_per_component(&self) -> usize {
        2 * (self.ns + 1)
    }

    pub fn free_dofs_per_component(&self) -> usize {
        self.dofs_per_component() - 4
    }

    pub fn is_constrained(&self, dof: usize) -> bool {
        self.constrained[dof]
    }

    /// Indices of unconstrained scalar dofs of one component.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.dofs_per_component())
            .filter(|&k| !self.constrained[k])
            .collect()
    }

    /// 3-point Gauss rule of one cell, as (local coordinate, weight on [0,1]).
    pub fn cell_quad(&self) -> &[(f64, f64)] {
        &self.quad
    }

    pub fn node_coord(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    /// Global coordinate of quadrature point `q` of `cell`, and its weight.
    pub fn quad_point(&self, cell: usize, q: usize) -> (f64, f64) {
        let (s, w) = self.quad[q];
        ((cell as f64 + s) * self.h, w * self.h)
    }

    pub fn quad_count(&self) -> usize {
        3 * self.ns
    }
}

/// Two-component Hermite coefficients (displacement or velocity) on the
/// structure mesh, component-major; component 0 = z, 1 = r.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureField {
    pub data: Vec<f64>,
}

impl StructureField {
    pub fn zeros(smesh: &StructureMesh) -> Self {
        StructureField {
            data: vec![0.0; 2 * smesh.dofs_per_component()],
        }
    }

    /// Hermite interpolation of an analytic profile and its derivative.
    pub fn interpolate(
        smesh: &StructureMesh,
        f: impl Fn(f64) -> [f64; 2],
        df: impl Fn(f64) -> [f64; 2],
    ) -> Self {
        let m = smesh.dofs_per_component();
        let mut data = vec![0.0; 2 * m];
        for i in 0..=smesh.ns {
            let z = smesh.node_coord(i);
            let v = f(z);
            let d = df(z);
            for c in 0..2 {
                data[c * m + 2 * i] = v[c];
                data[c * m + 2 * i + 1] = d[c];
            }
        }
        StructureField { data }
    }

    pub fn component(&self, smesh: &StructureMesh, c: usize) -> &[f64] {
        let m = smesh.dofs_per_component();
        &self.data[c * m..(c + 1) * m]
    }

    /// Zeroes the clamped dofs of both components.
    pub fn apply_clamp(&mut self, smesh: &StructureMesh) {
        let m = smesh.dofs_per_component();
        for c in 0..2 {
            for k in 0..m {
                if smesh.is_constrained(k) {
                    self.data[c * m + k] = 0.0;
                }
            }
        }
    }

    fn eval_with(&self, smesh: &StructureMesh, z: f64, order: usize) -> [f64; 2] {
        let cell = ((z / smesh.h).floor() as isize).clamp(0, smesh.ns as isize - 1) as usize;
        let s = (z - cell as f64 * smesh.h) / smesh.h;
        let (val, d1, d2) = hermite_basis(s, smesh.h);
        let basis = match order {
            0 => val,
            1 => d1,
            2 => d2,
            _ => unreachable!(),
        };
        let m = smesh.dofs_per_component();
        let mut out = [0.0; 2];
        for c in 0..2 {
            let dofs = [
                self.data[c * m + 2 * cell],
                self.data[c * m + 2 * cell + 1],
                self.data[c * m + 2 * cell + 2],
                self.data[c * m + 2 * cell + 3],
            ];
            out[c] = (0..4).map(|k| basis[k] * dofs[k]).sum();
        }
        out
    }

    /// Field value `[eta_z, eta_r]` at coordinate `z`.
    pub fn eval(&self, smesh: &StructureMesh, z: f64) -> [f64; 2] {
        self.eval_with(smesh, z, 0)
    }

    pub fn eval_deriv(&self, smesh: &StructureMesh, z: f64) -> [f64; 2] {
        self.eval_with(smesh, z, 1)
    }

    pub fn eval_second(&self, smesh: &StructureMesh, z: f64) -> [f64; 2] {
        self.eval_with(smesh, z, 2)
    }

    /// Discrete sup norm: max Euclidean point norm over the fixed sample grid
    /// (cell endpoints and Gauss points). All pointwise bounds in the noise
    /// module use this same grid.
    pub fn sup_norm(&self, smesh: &StructureMesh) -> f64 {
        let mut m = 0.0f64;
        for z in sup_norm_samples(smesh) {
            let v = self.eval(smesh, z);
            m = m.max(v[0].hypot(v[1]));
        }
        m
    }
}

/// Sample grid shared by every discrete L-infinity evaluation.
pub fn sup_norm_samples(smesh: &StructureMesh) -> Vec<f64> {
    let mut zs = Vec::with_capacity(smesh.ns * 5 + 1);
    for cell in 0..smesh.ns {
        zs.push(cell as f64 * smesh.h);
        zs.push((cell as f64 + 0.5) * smesh.h);
        for q in 0..3 {
            zs.push(smesh.quad_point(cell, q).0);
        }
    }
    zs.push(smesh.length);
    zs
}

/// Discretization bundle shared by the solvers: both meshes, the assembled
/// L2 products and the essential-constraint mask. Immutable after
/// construction and shared read-only across concurrently simulated paths.
#[derive(Debug, Clone)]
pub struct Spaces {
    pub mesh: RefMesh,
    pub smesh: StructureMesh,
    pub gamma: GammaConstraint,
    pub fluid_mass: Sparse,
    pub fluid_mask: Vec<bool>,
    pub struct_mass: faer::Mat<f64>,
    pub struct_bending: faer::Mat<f64>,
}

impl Spaces {
    pub fn new(
        length: f64,
        nz: usize,
        nr: usize,
        ns: usize,
        gamma: GammaConstraint,
    ) -> Result<Self> {
        let mesh = RefMesh::build(length, nz, nr)?;
        let smesh = StructureMesh::build(length, ns)?;
        let fluid_mass = fluid_scalar_mass(&mesh);
        let fluid_mask = fluid_mask(&mesh, gamma);
        let struct_mass = structure_matrix(&smesh, 0);
        let struct_bending = structure_matrix(&smesh, 2);
        Ok(Spaces {
            mesh,
            smesh,
            gamma,
            fluid_mass,
            fluid_mask,
            struct_mass,
            struct_bending,
        })
    }

    pub fn fluid_l2_sq(&self, f: &FluidField) -> f64 {
        fluid_l2_product(&self.fluid_mass, f, f)
    }

    pub fn struct_l2_sq(&self, f: &StructureField) -> f64 {
        structure_l2_product(&self.struct_mass, f, f)
    }

    /// Squared clamped-space norm `|d_zz eta|^2`, the gauge used by the
    /// time-shift studies.
    pub fn bending_sq(&self, f: &StructureField) -> f64 {
        structure_l2_product(&self.struct_bending, f, f)
    }
}

/// Per-component structure matrices assembled with the 3-point Gauss rule.
/// `order` 0/1/2 selects the mass, first-derivative, and bending products.
pub fn structure_matrix(smesh: &StructureMesh, order: usize) -> faer::Mat<f64> {
    let m = smesh.dofs_per_component();
    let mut mat = faer::Mat::zeros(m, m);
    for cell in 0..smesh.ns {
        for q in 0..3 {
            let (s, w) = smesh.cell_quad()[q];
            let (val, d1, d2) = hermite_basis(s, smesh.h);
            let basis = match order {
                0 => val,
                1 => d1,
                2 => d2,
                _ => unreachable!(),
            };
            let w = w * smesh.h;
            for a in 0..4 {
                for b in 0..4 {
                    let i = 2 * cell + a;
                    let j = 2 * cell + b;
                    mat[(i, j)] += w * basis[a] * basis[b];
                }
            }
        }
    }
    mat
}

/// L2 pairing of two structure fields through the per-component mass matrix.
pub fn structure_l2_product(mass: &faer::Mat<f64>, f: &StructureField, g: &StructureField) -> f64 {
    let m = mass.nrows();
    crate::linalg::quad_form_dense(mass, &f.data[..m], &g.data[..m])
        + crate::linalg::quad_form_dense(mass, &f.data[m..], &g.data[m..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::quad_form;
    use proptest::prelude::*;

    #[test]
    fn smallest_mesh_counts() {
        let mesh = RefMesh::build(1.0, 1, 1).unwrap();
        assert_eq!(mesh.node_count(), 4);
        assert_eq!(mesh.cell_count(), 1);
        assert_eq!(mesh.boundary_edges().len(), 4);
    }

    #[test]
    fn counting_4x4() {
        let mesh = RefMesh::build(1.0, 4, 4).unwrap();
        assert_eq!(mesh.node_count(), 25);
        assert_eq!(mesh.cell_count(), 16);
    }

    #[test]
    fn quad_weights_cover_area() {
        let mesh = RefMesh::build(2.0, 4, 2).unwrap();
        assert!((mesh.total_quad_weight() - 2.0).abs() < 1e-12 * 2.0);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(RefMesh::build(0.0, 4, 4).is_err());
        assert!(RefMesh::build(1.0, 0, 4).is_err());
        assert!(StructureMesh::build(1.0, 1).is_err());
    }

    #[test]
    fn boundary_tags_exhaustive_with_corner_priority() {
        let mesh = RefMesh::build(1.0, 3, 2).unwrap();
        for n in 0..mesh.node_count() {
            let [z, r] = mesh.node_coords(n);
            let on_boundary =
                z == 0.0 || (z - 1.0).abs() < 1e-15 || r == 0.0 || (r - 1.0).abs() < 1e-15;
            assert_eq!(mesh.node_tag(n).is_some(), on_boundary);
        }
        // Corners: gamma_top beats inlet/outlet, inlet/outlet beat bottom.
        assert_eq!(
            mesh.node_tag(mesh.node_index(0, 2)),
            Some(BoundaryTag::GammaTop)
        );
        assert_eq!(
            mesh.node_tag(mesh.node_index(3, 2)),
            Some(BoundaryTag::GammaTop)
        );
        assert_eq!(
            mesh.node_tag(mesh.node_index(0, 0)),
            Some(BoundaryTag::Inlet)
        );
        assert_eq!(
            mesh.node_tag(mesh.node_index(3, 0)),
            Some(BoundaryTag::Outlet)
        );
    }

    #[test]
    fn mass_row_sums_give_area() {
        let mesh = RefMesh::build(1.0, 3, 3).unwrap();
        let mass = fluid_scalar_mass(&mesh);
        let ones = vec![1.0; mesh.node_count()];
        let total = quad_form(&mass, &ones, &ones);
        assert!((total - 1.0).abs() < 1e-13);
    }

    #[test]
    fn weighted_mass_is_linear_in_weight() {
        let mesh = RefMesh::build(1.0, 2, 2).unwrap();
        let m1 = fluid_scalar_mass(&mesh);
        let m12 = fluid_scalar_weighted_mass(&mesh, &vec![1.2; mesh.quad_count()]).unwrap();
        for j in 0..mesh.node_count() {
            let v1 = m1.val_of_col(j);
            let v2 = m12.val_of_col(j);
            for (a, b) in v1.iter().zip(v2.iter()) {
                assert!((b - 1.2 * a).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn weighted_mass_rejects_nonpositive_weight() {
        let mesh = RefMesh::build(1.0, 2, 2).unwrap();
        let mut w = vec![1.0; mesh.quad_count()];
        w[3] = 0.0;
        assert!(matches!(
            fluid_scalar_weighted_mass(&mesh, &w),
            Err(CoreError::DegenerateFrame(_))
        ));
    }

    #[test]
    fn mass_spd_against_direct_quadrature_oracle() {
        use rand::prelude::*;
        let mesh = RefMesh::build(1.3, 4, 3).unwrap();
        let mass = fluid_scalar_mass(&mesh);
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..100 {
            let x: Vec<f64> = (0..mesh.node_count())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let form = quad_form(&mass, &x, &x);
            assert!(form > 0.0);
            // Independent oracle: evaluate the interpolated function at the
            // quadrature points and sum w * value^2 directly.
            let mut oracle = 0.0;
            for cell in 0..mesh.cell_count() {
                let nodes = mesh.cell_nodes(cell);
                for q in 0..4 {
                    let phi = mesh.basis_values(q);
                    let v: f64 = (0..4).map(|a| phi[a] * x[nodes[a]]).sum();
                    oracle += mesh.quad_weight() * v * v;
                }
            }
            assert!((form - oracle).abs() <= 1e-12 * oracle.max(1.0));
        }
    }

    #[test]
    fn mass_symmetry_and_cholesky() {
        let mesh = RefMesh::build(1.0, 4, 4).unwrap();
        let mass = fluid_scalar_mass(&mesh);
        let n = mesh.node_count();
        let dense = faer::Mat::from_fn(n, n, |i, j| {
            let sym = mass.symbolic();
            let vals = mass.val_of_col(j);
            sym.row_idx_of_col_raw(j)
                .iter()
                .enumerate()
                .find(|(_, &r)| r == i)
                .map(|(k, _)| vals[k])
                .unwrap_or(0.0)
        });
        for i in 0..n {
            for j in 0..n {
                assert!((dense[(i, j)] - dense[(j, i)]).abs() < 1e-14);
            }
        }
        assert!(dense.llt(faer::Side::Lower).is_ok());
    }

    #[test]
    fn basis_integrals_match_high_order_quadrature() {
        let mesh = RefMesh::build(1.5, 3, 2).unwrap();
        // assembled integral of each basis function = row sum against ones
        let mass = fluid_scalar_mass(&mesh);
        let ones = vec![1.0; mesh.node_count()];
        let assembled = crate::linalg::spmv(&mass, &ones);
        // dense 5x5 Gauss oracle per cell
        let g5 = gauss_unit(5);
        let mut oracle = vec![0.0; mesh.node_count()];
        for cell in 0..mesh.cell_count() {
            let nodes = mesh.cell_nodes(cell);
            for &(gx, wx) in &g5 {
                for &(gy, wy) in &g5 {
                    let w = wx * wy * mesh.hz * mesh.hr;
                    for a in 0..4 {
                        oracle[nodes[a]] += w * q1_value(a, gx, gy);
                    }
                }
            }
        }
        for n in 0..mesh.node_count() {
            assert!((assembled[n] - oracle[n]).abs() < 1e-12);
        }
    }

    #[test]
    fn structure_dof_counts() {
        let s2 = StructureMesh::build(1.0, 2).unwrap();
        assert_eq!(s2.dofs_per_component(), 6);
        assert_eq!(s2.free_dofs_per_component(), 2);
        let s8 = StructureMesh::build(1.0, 8).unwrap();
        assert_eq!(s8.dofs_per_component(), 18);
        assert_eq!(s8.free_dofs_per_component(), 14);
    }

    #[test]
    fn hermite_interpolates_cubics_exactly() {
        let smesh = StructureMesh::build(1.0, 4).unwrap();
        let f = |z: f64| [z * z * (1.0 - z), 0.5 * z * z * z];
        let df = |z: f64| [2.0 * z - 3.0 * z * z, 1.5 * z * z];
        let field = StructureField::interpolate(&smesh, f, df);
        for k in 0..=40 {
            let z = k as f64 / 40.0;
            let v = field.eval(&smesh, z);
            let d = field.eval_deriv(&smesh, z);
            assert!((v[0] - f(z)[0]).abs() < 1e-13);
            assert!((v[1] - f(z)[1]).abs() < 1e-13);
            assert!((d[0] - df(z)[0]).abs() < 1e-12);
            assert!((d[1] - df(z)[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn structure_basis_integrals_match_high_order() {
        let smesh = StructureMesh::build(1.0, 3).unwrap();
        let m = smesh.dofs_per_component();
        // integral of each Hermite basis function under the production rule
        let mut assembled = vec![0.0; m];
        for cell in 0..smesh.ns {
            for q in 0..3 {
                let (s, w) = smesh.cell_quad()[q];
                let (val, _, _) = hermite_basis(s, smesh.h);
                for a in 0..4 {
                    assembled[2 * cell + a] += w * smesh.h * val[a];
                }
            }
        }
        let g5 = gauss_unit(5);
        let mut oracle = vec![0.0; m];
        for cell in 0..smesh.ns {
            for &(s, w) in &g5 {
                let (val, _, _) = hermite_basis(s, smesh.h);
                for a in 0..4 {
                    oracle[2 * cell + a] += w * smesh.h * val[a];
                }
            }
        }
        for k in 0..m {
            assert!((assembled[k] - oracle[k]).abs() < 1e-12, "dof {k}");
        }
    }

    proptest! {
        #[test]
        fn fluid_interpolation_reproduces_bilinear(a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64) {
            let mesh = RefMesh::build(1.0, 3, 3).unwrap();
            let field = FluidField::interpolate(&mesh, |z, r| [a + b * z + c * r, b - c * z * r]);
            let vals = field.at_quad(&mesh);
            for cell in 0..mesh.cell_count() {
                for q in 0..4 {
                    let [z, r] = mesh.quad_coords(cell, q);
                    let exact = a + b * z + c * r;
                    prop_assert!((vals[4 * cell + q][0] - exact).abs() < 1e-12);
                }
            }
        }
    }
}
