//! The elastodynamics operator and the implicit structure half-step.
//!
//! The half-step solves, on the clamped dofs and per component,
//! `(M + dt^2 Le) v_half = M v_n - dt Le eta_n` and then sets
//! `eta_half = eta_n + dt v_half`, which enforces the kinematic relation
//! exactly at the coefficient level. Testing the update with `v_half` yields
//! an exact discrete energy identity whose defect is reported per step.

use faer::linalg::solvers::{Llt, Solve};
use faer::{Mat, Side};

use crate::error::{CoreError, Result};
use crate::mesh::{structure_matrix, StructureField, StructureMesh};

/// Self-adjoint operator `c0 - c1 d_zz + c2 d_zzzz` acting componentwise on
/// the clamped Hermite space, stored as the per-component Galerkin matrix.
#[derive(Debug, Clone)]
pub struct ElasticOperator {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// Per-component matrix on all scalar dofs (constraints applied at solve
    /// time by reduction to the free dofs).
    pub matrix: Mat<f64>,
    /// Set when all coefficients vanish: the operator loses coercivity and is
    /// only meaningful in test mode.
    pub coercivity_warning: bool,
}

impl ElasticOperator {
    pub fn assemble(smesh: &StructureMesh, c0: f64, c1: f64, c2: f64) -> Result<Self> {
        if c0 < 0.0 || c1 < 0.0 || c2 < 0.0 {
            return Err(CoreError::Config(format!(
                "elastic coefficients must be nonnegative, got ({c0}, {c1}, {c2})"
            )));
        }
        let m = smesh.dofs_per_component();
        let mut matrix = Mat::<f64>::zeros(m, m);
        for (c, order) in [(c0, 0usize), (c1, 1), (c2, 2)] {
            if c == 0.0 {
                continue;
            }
            let part = structure_matrix(smesh, order);
            for i in 0..m {
                for j in 0..m {
                    matrix[(i, j)] += c * part[(i, j)];
                }
            }
        }
        Ok(ElasticOperator {
            c0,
            c1,
            c2,
            matrix,
            coercivity_warning: c0 == 0.0 && c1 == 0.0 && c2 == 0.0,
        })
    }

    /// Elastic energy `<Le eta, eta>` summed over both components.
    pub fn energy(&self, eta: &StructureField) -> f64 {
        crate::mesh::structure_l2_product(&self.matrix, eta, eta)
    }

    /// Matrix restricted to the free dofs of one component.
    pub fn reduced(&self, smesh: &StructureMesh) -> Mat<f64> {
        reduce(&self.matrix, &smesh.free_indices())
    }
}

fn reduce(full: &Mat<f64>, free: &[usize]) -> Mat<f64> {
    Mat::from_fn(free.len(), free.len(), |i, j| full[(free[i], free[j])])
}

/// Result of one implicit structure half-step.
#[derive(Debug, Clone)]
pub struct StructureStepResult {
    pub eta_half: StructureField,
    pub v_half: StructureField,
    /// Absolute defect of the exact discrete energy identity
    /// `|v12|^2 + |v12 - vn|^2 + e(eta12) + e(eta12 - etan) = |vn|^2 + e(etan)`.
    pub audit_residual: f64,
}

/// Implicit stepper with the factorization of `M + dt^2 Le` cached per
/// `(dt, Le)`; the step itself is a pure function of its inputs.
pub struct StructureStepper {
    pub dt: f64,
    free: Vec<usize>,
    mass: Mat<f64>,
    le: Mat<f64>,
    mass_red: Mat<f64>,
    le_red: Mat<f64>,
    chol: Llt<f64>,
}

impl StructureStepper {
    pub fn new(smesh: &StructureMesh, le: &ElasticOperator, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(CoreError::Config(format!("dt must be positive, got {dt}")));
        }
        let mass = structure_matrix(smesh, 0);
        let free = smesh.free_indices();
        let mass_red = reduce(&mass, &free);
        let le_red = reduce(&le.matrix, &free);
        let n = free.len();
        let system = Mat::from_fn(n, n, |i, j| mass_red[(i, j)] + dt * dt * le_red[(i, j)]);
        let chol = system
            .llt(Side::Lower)
            .map_err(|_| CoreError::solver("structure system M + dt^2 Le is not SPD"))?;
        Ok(StructureStepper {
            dt,
            free,
            mass,
            le: le.matrix.clone(),
            mass_red,
            le_red,
            chol,
        })
    }

    pub fn mass(&self) -> &Mat<f64> {
        &self.mass
    }

    /// L2 norm squared of a structure field under the assembled mass.
    pub fn l2_sq(&self, f: &StructureField) -> f64 {
        let m = self.mass.nrows();
        crate::linalg::quad_form_dense(&self.mass, &f.data[..m], &f.data[..m])
            + crate::linalg::quad_form_dense(&self.mass, &f.data[m..], &f.data[m..])
    }

    /// Elastic energy under the operator this stepper was built with.
    pub fn elastic_sq(&self, f: &StructureField) -> f64 {
        let m = self.le.nrows();
        crate::linalg::quad_form_dense(&self.le, &f.data[..m], &f.data[..m])
            + crate::linalg::quad_form_dense(&self.le, &f.data[m..], &f.data[m..])
    }

    pub fn step(
        &self,
        smesh: &StructureMesh,
        eta_n: &StructureField,
        v_n: &StructureField,
    ) -> StructureStepResult {
        let m = smesh.dofs_per_component();
        let nf = self.free.len();
        let dt = self.dt;
        let mut v_half = StructureField::zeros(smesh);
        for c in 0..2 {
            let eta_c = &eta_n.data[c * m..(c + 1) * m];
            let v_c = &v_n.data[c * m..(c + 1) * m];
            let eta_f: Vec<f64> = self.free.iter().map(|&k| eta_c[k]).collect();
            let v_f: Vec<f64> = self.free.iter().map(|&k| v_c[k]).collect();
            let mv = crate::linalg::dense_mv(&self.mass_red, &v_f);
            let le_eta = crate::linalg::dense_mv(&self.le_red, &eta_f);
            let rhs = Mat::from_fn(nf, 1, |i, _| mv[i] - dt * le_eta[i]);
            let sol = self.chol.solve(&rhs);
            for (i, &k) in self.free.iter().enumerate() {
                v_half.data[c * m + k] = sol[(i, 0)];
            }
        }
        let mut eta_half = eta_n.clone();
        for (e, v) in eta_half.data.iter_mut().zip(v_half.data.iter()) {
            *e += dt * v;
        }
        let mut diff_v = v_half.clone();
        for (d, v) in diff_v.data.iter_mut().zip(v_n.data.iter()) {
            *d -= v;
        }
        let mut diff_eta = eta_half.clone();
        for (d, e) in diff_eta.data.iter_mut().zip(eta_n.data.iter()) {
            *d -= e;
        }
        let audit_residual = (self.l2_sq(&v_half)
            + self.l2_sq(&diff_v)
            + self.elastic_sq(&eta_half)
            + self.elastic_sq(&diff_eta)
            - self.l2_sq(v_n)
            - self.elastic_sq(eta_n))
        .abs();
        StructureStepResult {
            eta_half,
            v_half,
            audit_residual,
        }
    }
}

/// All generalized eigenpairs of `Le w = lambda M w` on the free dofs of one
/// component, via the Cholesky transform of the mass. Eigenvectors are
/// returned as full-length coefficient vectors with zeros on the clamped
/// dofs. Used by oracles and the coercivity check.
pub fn generalized_eigenpairs(
    smesh: &StructureMesh,
    le: &ElasticOperator,
    mass: &Mat<f64>,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let free = smesh.free_indices();
    let a = reduce(&le.matrix, &free);
    let m_red = reduce(mass, &free);
    let n = free.len();
    let chol = m_red
        .llt(Side::Lower)
        .map_err(|_| CoreError::solver("structure mass is not SPD"))?;
    let l = chol.L().to_owned();
    // C = L^{-1} A L^{-T}
    let mut c = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| a[(i, j)]).collect();
        let y = forward_sub(&l, &col);
        for i in 0..n {
            c[(i, j)] = y[i];
        }
    }
    let mut ct = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| c[(i, j)]).collect();
        let y = forward_sub(&l, &row);
        for j in 0..n {
            ct[(i, j)] = y[j];
        }
    }
    let evd = ct
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| CoreError::solver("eigendecomposition failed"))?;
    let mut pairs = Vec::with_capacity(n);
    let u = evd.U();
    for k in 0..n {
        let col: Vec<f64> = (0..n).map(|i| u[(i, k)]).collect();
        let w_red = backward_sub_transpose(&l, &col);
        let mut w = vec![0.0; smesh.dofs_per_component()];
        for (i, &kf) in free.iter().enumerate() {
            w[kf] = w_red[i];
        }
        pairs.push((evd.S()[k], w));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pairs)
}

fn forward_sub(l: &Mat<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[(i, j)] * x[j];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

fn backward_sub_transpose(l: &Mat<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= l[(j, i)] * x[j];
        }
        x[i] = s / l[(i, i)];
    }
    x
}
