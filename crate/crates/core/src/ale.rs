//! Pathwise ALE geometry on the reference channel.
//!
//! The map is the explicit vertical scaling
//! `A(z, r) = (z, (1 + eta_r(phi^{-1}(z))) r)` with the longitudinal boundary
//! reparametrization `phi(z) = z + eta_z(z)`. Everything the fluid step needs
//! at a fixed displacement lives in one immutable [`AleFrame`]: Jacobians and
//! map gradients per quadrature point, boundary geometry per interface
//! quadrature point, and the admissibility gauges used by the cutoff.

use std::io::Write;

use faer::Mat;

use crate::error::{CoreError, Result};
use crate::mesh::{sup_norm_samples, FluidField, RefMesh, StructureField, StructureMesh};

/// Longitudinal boundary reparametrization `phi(z) = z + eta_z(z)` of one
/// displacement field, with its injectivity margin `inf (1 + d_z eta_z)`.
pub struct PhiMap<'a> {
    smesh: &'a StructureMesh,
    eta: &'a StructureField,
    pub margin: f64,
}

impl<'a> PhiMap<'a> {
    pub fn new(smesh: &'a StructureMesh, eta: &'a StructureField) -> Self {
        let mut margin = f64::INFINITY;
        for z in sup_norm_samples(smesh) {
            margin = margin.min(1.0 + eta.eval_deriv(smesh, z)[0]);
        }
        PhiMap { smesh, eta, margin }
    }

    pub fn forward(&self, y: f64) -> f64 {
        y + self.eta.eval(self.smesh, y)[0]
    }

    pub fn deriv(&self, y: f64) -> f64 {
        1.0 + self.eta.eval_deriv(self.smesh, y)[0]
    }

    /// Solves `phi(y) = z` by safeguarded Newton with a bisection fallback.
    ///
    /// Requires a positive injectivity margin; the error maps to a cutoff
    /// trigger in the driver, never a crash.
    pub fn invert(&self, z: f64, tol: f64) -> Result<f64> {
        if self.margin <= 0.0 {
            return Err(CoreError::DegenerateFrame(format!(
                "injectivity loss: margin {} <= 0",
                self.margin
            )));
        }
        let length = self.smesh.length;
        if !(0.0..=length).contains(&z) {
            return Err(CoreError::Range(format!(
                "invert_phi target {z} outside [0, {length}]"
            )));
        }
        let (mut lo, mut hi) = (0.0, length);
        let mut y = z.clamp(lo, hi);
        for _ in 0..200 {
            let f = self.forward(y) - z;
            if f.abs() <= tol {
                return Ok(y);
            }
            if f > 0.0 {
                hi = y;
            } else {
                lo = y;
            }
            let step = f / self.deriv(y);
            let newton = y - step;
            y = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        Err(CoreError::solver(format!(
            "phi inversion did not reach tol {tol} at z = {z}"
        )))
    }
}

/// Geometry of one interface quadrature point: arc-length factor and unit
/// normal/tangent of the deformed boundary, parametrized by the reference
/// coordinate.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryPoint {
    pub z: f64,
    pub weight: f64,
    pub arc: f64,
    pub normal: [f64; 2],
    pub tangent: [f64; 2],
}

/// Immutable per-displacement geometry tables. Safe to share across
/// concurrently simulated paths.
#[derive(Debug, Clone)]
pub struct AleFrame {
    /// Jacobian `det grad A` per fluid quadrature point.
    pub j: Vec<f64>,
    /// Map gradient per fluid quadrature point, `grad_a[i][j] = dA_i/dx_j`.
    pub grad_a: Vec<[[f64; 2]; 2]>,
    pub grad_a_inv: Vec<[[f64; 2]; 2]>,
    /// `phi^{-1}` evaluated at the structure nodes.
    pub phi_inv_nodes: Vec<f64>,
    /// Interface geometry at the structure-mesh quadrature points.
    pub boundary: Vec<BoundaryPoint>,
    /// `inf (1 + d_z eta_z)` over the sample grid.
    pub margin: f64,
    /// Infimum of the Jacobian over quadrature points and boundary samples.
    pub inf_j: f64,
    /// Max absolute entry of `grad A` over quadrature points.
    pub max_grad_norm: f64,
}

pub const PHI_INV_TOL: f64 = 1e-12;

/// Builds the frame of a displacement; fails on injectivity loss or a
/// non-positive Jacobian.
pub fn build_frame(
    eta: &StructureField,
    mesh: &RefMesh,
    smesh: &StructureMesh,
) -> Result<AleFrame> {
    let phi = PhiMap::new(smesh, eta);
    if phi.margin <= 0.0 {
        return Err(CoreError::DegenerateFrame(format!(
            "injectivity loss: margin {} <= 0",
            phi.margin
        )));
    }
    let nq = mesh.quad_count();
    let mut j = vec![0.0; nq];
    let mut grad_a = vec![[[0.0; 2]; 2]; nq];
    let mut grad_a_inv = vec![[[0.0; 2]; 2]; nq];
    let mut inf_j = f64::INFINITY;
    let mut max_grad: f64 = 0.0;
    for cell in 0..mesh.cell_count() {
        for q in 0..4 {
            let [z, r] = mesh.quad_coords(cell, q);
            let y = phi.invert(z, PHI_INV_TOL)?;
            let eta_r = eta.eval(smesh, y)[1];
            let deta_r = eta.eval_deriv(smesh, y)[1];
            let jac = 1.0 + eta_r;
            if jac <= 0.0 {
                return Err(CoreError::DegenerateFrame(format!(
                    "non-positive Jacobian {jac} at (z, r) = ({z}, {r})"
                )));
            }
            // d/dz of eta_r(phi^{-1}(z)) by the inverse-function rule.
            let dz_ar = deta_r / phi.deriv(y) * r;
            let id = 4 * cell + q;
            j[id] = jac;
            grad_a[id] = [[1.0, 0.0], [dz_ar, jac]];
            grad_a_inv[id] = [[1.0, 0.0], [-dz_ar / jac, 1.0 / jac]];
            inf_j = inf_j.min(jac);
            max_grad = max_grad.max(1.0).max(dz_ar.abs()).max(jac.abs());
        }
    }
    // Also sample the Jacobian range directly on the structure grid: the
    // range of J equals the range of 1 + eta_r over the interface.
    for y in sup_norm_samples(smesh) {
        inf_j = inf_j.min(1.0 + eta.eval(smesh, y)[1]);
    }

    let phi_inv_nodes = (0..=smesh.ns)
        .map(|i| phi.invert(smesh.node_coord(i), PHI_INV_TOL))
        .collect::<Result<Vec<_>>>()?;

    let mut boundary = Vec::with_capacity(smesh.quad_count());
    for cell in 0..smesh.ns {
        for q in 0..3 {
            let (z, weight) = smesh.quad_point(cell, q);
            let d = eta.eval_deriv(smesh, z);
            let tz = 1.0 + d[0];
            let tr = d[1];
            let arc = tz.hypot(tr);
            let tangent = [tz / arc, tr / arc];
            let normal = [-tangent[1], tangent[0]];
            boundary.push(BoundaryPoint {
                z,
                weight,
                arc,
                normal,
                tangent,
            });
        }
    }

    Ok(AleFrame {
        j,
        grad_a,
        grad_a_inv,
        phi_inv_nodes,
        boundary,
        margin: phi.margin,
        inf_j,
        max_grad_norm: max_grad,
    })
}

/// Transformed gradient `grad u (grad A)^{-1}` per quadrature point.
pub fn transformed_gradient(
    frame: &AleFrame,
    mesh: &RefMesh,
    u: &FluidField,
) -> Vec<[[f64; 2]; 2]> {
    let grads = u.grad_at_quad(mesh);
    grads
        .iter()
        .zip(frame.grad_a_inv.iter())
        .map(|(g, inv)| mat_mul(g, inv))
        .collect()
}

/// Transformed divergence `tr(grad^eta u)` per quadrature point.
pub fn transformed_divergence(frame: &AleFrame, mesh: &RefMesh, u: &FluidField) -> Vec<f64> {
    transformed_gradient(frame, mesh, u)
        .iter()
        .map(|t| t[0][0] + t[1][1])
        .collect()
}

/// Transformed symmetrized gradient per quadrature point.
pub fn sym_gradient(frame: &AleFrame, mesh: &RefMesh, u: &FluidField) -> Vec<[[f64; 2]; 2]> {
    transformed_gradient(frame, mesh, u)
        .iter()
        .map(|t| {
            let off = 0.5 * (t[0][1] + t[1][0]);
            [[t[0][0], off], [off, t[1][1]]]
        })
        .collect()
}

pub fn mat_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

/// ALE velocity `(A_{n+1} - A_n) / dt` at the fluid quadrature points.
///
/// Both maps fix the z coordinate, so the velocity is purely radial:
/// `w = (0, r (J_{n+1} - J_n) / dt)`.
pub fn ale_velocity(
    frame_n: &AleFrame,
    frame_np1: &AleFrame,
    mesh: &RefMesh,
    dt: f64,
) -> Vec<[f64; 2]> {
    assert!(dt > 0.0, "ale_velocity needs dt > 0");
    let mut w = vec![[0.0; 2]; mesh.quad_count()];
    for cell in 0..mesh.cell_count() {
        for q in 0..4 {
            let [_, r] = mesh.quad_coords(cell, q);
            let id = 4 * cell + q;
            w[id] = [0.0, r * (frame_np1.j[id] - frame_n.j[id]) / dt];
        }
    }
    w
}

/// Thresholds of the admissibility cutoff. `norm_ceiling` plays the role of
/// `1/delta_2`; `sobolev_s` must lie in (3/2, 2).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdmissibilityGauge {
    pub delta1: f64,
    pub norm_ceiling: f64,
    pub sobolev_s: f64,
    pub gamma_inj: f64,
}

impl AdmissibilityGauge {
    pub fn validate(&self) -> Result<()> {
        if !(self.sobolev_s > 1.5 && self.sobolev_s < 2.0) {
            return Err(CoreError::Config(format!(
                "sobolev exponent s must lie in (3/2, 2), got {}",
                self.sobolev_s
            )));
        }
        if !(self.delta1 > 0.0 && self.norm_ceiling > 0.0 && self.gamma_inj > 0.0) {
            return Err(CoreError::Config(
                "delta1, norm ceiling and injectivity margin must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pure function of the three gauges and the thresholds.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct AdmissibilityReport {
    pub inf_j: f64,
    pub sobolev_s_norm: f64,
    pub margin: f64,
    pub j_floor_ok: bool,
    pub norm_ok: bool,
    pub margin_ok: bool,
}

impl AdmissibilityReport {
    pub fn passes(&self) -> bool {
        self.j_floor_ok && self.norm_ok && self.margin_ok
    }
}

/// Interpolation surrogate of the fractional Sobolev norm,
/// `l2^(1 - s/2) * h2^(s/2)`.
pub fn sobolev_surrogate(l2: f64, h2: f64, s: f64) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    l2.powf(1.0 - 0.5 * s) * h2.powf(0.5 * s)
}

/// Evaluates the admissibility gauges of a displacement. Degenerate fields
/// yield failing flags, not errors.
///
/// `mass` and `bending` are the per-component structure products; `mesh` is
/// consulted so the Jacobian infimum also covers the quadrature abscissae the
/// fluid step will pull back through `phi^{-1}`.
pub fn admissibility(
    eta: &StructureField,
    mesh: &RefMesh,
    smesh: &StructureMesh,
    mass: &Mat<f64>,
    bending: &Mat<f64>,
    gauge: &AdmissibilityGauge,
) -> AdmissibilityReport {
    let phi = PhiMap::new(smesh, eta);
    let mut inf_j = f64::INFINITY;
    for y in sup_norm_samples(smesh) {
        inf_j = inf_j.min(1.0 + eta.eval(smesh, y)[1]);
    }
    if phi.margin > 0.0 {
        // Pull back the fluid quadrature abscissae so the frame the solver
        // builds can never see a smaller Jacobian than this report.
        for cell in 0..mesh.cell_count() {
            for q in 0..4 {
                let z = mesh.quad_coords(cell, q)[0];
                if let Ok(y) = phi.invert(z, PHI_INV_TOL) {
                    inf_j = inf_j.min(1.0 + eta.eval(smesh, y)[1]);
                }
            }
        }
    }
    let l2_sq = crate::mesh::structure_l2_product(mass, eta, eta);
    let bend_sq = crate::mesh::structure_l2_product(bending, eta, eta);
    let l2 = l2_sq.max(0.0).sqrt();
    let h2 = (l2_sq + bend_sq).max(0.0).sqrt();
    let norm = sobolev_surrogate(l2, h2, gauge.sobolev_s);
    AdmissibilityReport {
        inf_j,
        sobolev_s_norm: norm,
        margin: phi.margin,
        j_floor_ok: inf_j > gauge.delta1,
        norm_ok: norm < gauge.norm_ceiling,
        margin_ok: phi.margin > gauge.gamma_inj,
    }
}

/// Quad-point table dump for debugging.
pub fn write_frame_csv(frame: &AleFrame, mesh: &RefMesh, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "quad,z,r,j,a00,a01,a10,a11,inv00,inv01,inv10,inv11")?;
    for cell in 0..mesh.cell_count() {
        for q in 0..4 {
            let [z, r] = mesh.quad_coords(cell, q);
            let id = 4 * cell + q;
            let a = frame.grad_a[id];
            let v = frame.grad_a_inv[id];
            writeln!(
                out,
                "{id},{z},{r},{},{},{},{},{},{},{},{},{}",
                frame.j[id], a[0][0], a[0][1], a[1][0], a[1][1], v[0][0], v[0][1], v[1][0], v[1][1]
            )?;
        }
    }
    Ok(())
}

pub fn write_boundary_csv(frame: &AleFrame, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "z,weight,arc,nz,nr,tz,tr")?;
    for b in &frame.boundary {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            b.z, b.weight, b.arc, b.normal[0], b.normal[1], b.tangent[0], b.tangent[1]
        )?;
    }
    Ok(())
}
