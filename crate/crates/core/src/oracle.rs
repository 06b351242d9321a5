//! Brute-force reference assembly used by the verification suite.
//!
//! Everything here is deliberately independent of the production assembly
//! path: basis functions are evaluated from global tent products and from a
//! numerically solved Hermite interpolation system, and every matrix entry
//! is integrated directly. Dense and slow; meant for small meshes only.

use faer::linalg::solvers::Solve;
use faer::Mat;

use crate::fluid::FluidInputs;
use crate::mesh::{GammaConstraint, RefMesh, StructureMesh};

/// Global tent value of fluid node `a` at (z, r).
fn tent(mesh: &RefMesh, a: usize, z: f64, r: f64) -> f64 {
    let [za, ra] = mesh.node_coords(a);
    let tz = (1.0 - (z - za).abs() / mesh.hz).max(0.0);
    let tr = (1.0 - (r - ra).abs() / mesh.hr).max(0.0);
    tz * tr
}

/// Gradient of the tent of node `a` at (z, r); `z`/`r` must avoid the tent's
/// ridge lines (quadrature points always do).
fn tent_grad(mesh: &RefMesh, a: usize, z: f64, r: f64) -> [f64; 2] {
    let [za, ra] = mesh.node_coords(a);
    let tz = (1.0 - (z - za).abs() / mesh.hz).max(0.0);
    let tr = (1.0 - (r - ra).abs() / mesh.hr).max(0.0);
    let dz = if tz > 0.0 {
        -(z - za).signum() / mesh.hz
    } else {
        0.0
    };
    let dr = if tr > 0.0 {
        -(r - ra).signum() / mesh.hr
    } else {
        0.0
    };
    [dz * tr, tz * dr]
}

/// Hermite shape values and derivatives obtained by solving the defining
/// interpolation conditions numerically instead of using closed forms.
/// Returns (value, d/dz, d2/dz2) of the four local dofs at local coordinate
/// `t` in [0, h] on a cell of width `h`.
fn hermite_solved(t: f64, h: f64) -> ([f64; 4], [f64; 4], [f64; 4]) {
    // cubic p(x) = c0 + c1 x + c2 x^2 + c3 x^3 with conditions
    // [p(0), p'(0), p(h), p'(h)] = e_k
    let mut cond = Mat::<f64>::zeros(4, 4);
    cond[(0, 0)] = 1.0;
    cond[(1, 1)] = 1.0;
    for j in 0..4 {
        cond[(2, j)] = h.powi(j as i32);
    }
    cond[(3, 1)] = 1.0;
    cond[(3, 2)] = 2.0 * h;
    cond[(3, 3)] = 3.0 * h * h;
    let lu = cond.partial_piv_lu();
    let mut val = [0.0; 4];
    let mut d1 = [0.0; 4];
    let mut d2 = [0.0; 4];
    for k in 0..4 {
        // dof order: value-left, slope-left, value-right, slope-right
        let rhs = Mat::from_fn(4, 1, |i, _| {
            let order = [0usize, 1, 2, 3];
            if order[i] == k {
                1.0
            } else {
                0.0
            }
        });
        let c = lu.solve(&rhs);
        val[k] = c[(0, 0)] + c[(1, 0)] * t + c[(2, 0)] * t * t + c[(3, 0)] * t * t * t;
        d1[k] = c[(1, 0)] + 2.0 * c[(2, 0)] * t + 3.0 * c[(3, 0)] * t * t;
        d2[k] = 2.0 * c[(2, 0)] + 6.0 * c[(3, 0)] * t;
    }
    (val, d1, d2)
}

/// Value of structure scalar dof `k` (component layout handled by caller) at
/// coordinate `z`.
fn hermite_dof_value(smesh: &StructureMesh, k: usize, z: f64) -> f64 {
    let cell = ((z / smesh.h).floor() as isize).clamp(0, smesh.ns as isize - 1) as usize;
    let local = k as isize - 2 * cell as isize;
    if !(0..4).contains(&local) {
        return 0.0;
    }
    let (val, _, _) = hermite_solved(z - cell as f64 * smesh.h, smesh.h);
    val[local as usize]
}

/// Dense reference assembly of the reduced penalized system, entry by entry.
/// Returns the reduced matrix and right-hand side in the same free-dof
/// ordering as the production assembly: unmasked fluid dofs first, then
/// unclamped structure dofs of both components.
pub fn dense_fluid_system(inputs: &FluidInputs) -> (Mat<f64>, Vec<f64>) {
    let spaces = inputs.spaces;
    let mesh = &spaces.mesh;
    let smesh = &spaces.smesh;
    let nn = mesh.node_count();
    let m = smesh.dofs_per_component();
    let p = &inputs.params;
    let dt = p.dt;

    // full-index basis catalog: fluid dof (c, node) then structure (c, k)
    let is_fluid = |dof: usize| dof < 2 * nn;
    let fluid_comp = |dof: usize| dof / nn;
    let fluid_node = |dof: usize| dof % nn;
    let struct_comp = |dof: usize| (dof - 2 * nn) / m;
    let struct_dof = |dof: usize| (dof - 2 * nn) % m;

    let free: Vec<usize> = {
        let mut v = Vec::new();
        for i in 0..2 * nn {
            if !spaces.fluid_mask[i] {
                v.push(i);
            }
        }
        for c in 0..2 {
            for k in 0..m {
                if !smesh.is_constrained(k) {
                    v.push(2 * nn + c * m + k);
                }
            }
        }
        v
    };

    let un_at = |z: f64, r: f64| -> [f64; 2] {
        let mut out = [0.0; 2];
        for node in 0..nn {
            let t = tent(mesh, node, z, r);
            if t != 0.0 {
                out[0] += t * inputs.u_n.data[node];
                out[1] += t * inputs.u_n.data[nn + node];
            }
        }
        out
    };

    let nred = free.len();
    let mut a = Mat::<f64>::zeros(nred, nred);
    let mut rhs = vec![0.0; nred];

    // interior quadrature
    for cell in 0..mesh.cell_count() {
        for q in 0..4 {
            let [z, r] = mesh.quad_coords(cell, q);
            let id = 4 * cell + q;
            let w = mesh.quad_weight();
            let jn = inputs.frame_n.j[id];
            let jnp1 = inputs.frame_np1.j[id];
            let inv = &inputs.frame_n.grad_a_inv[id];
            let un = un_at(z, r);
            let a_rel = [un[0] - inputs.ale_w[id][0], un[1] - inputs.ale_w[id][1]];

            // evaluate every fluid dof's value, transformed gradient row
            let mut vals = vec![0.0; nn];
            let mut tg = vec![[0.0; 2]; nn];
            for node in 0..nn {
                vals[node] = tent(mesh, node, z, r);
                let g = tent_grad(mesh, node, z, r);
                tg[node] = [
                    g[0] * inv[0][0] + g[1] * inv[1][0],
                    g[0] * inv[0][1] + g[1] * inv[1][1],
                ];
            }

            for (ri, &i) in free.iter().enumerate() {
                if !is_fluid(i) {
                    continue;
                }
                let (d, ni) = (fluid_comp(i), fluid_node(i));
                if vals[ni] == 0.0 && tg[ni] == [0.0, 0.0] {
                    continue;
                }
                // rhs: int Jn u^n . q
                rhs[ri] += w * jn * un[d] * vals[ni];
                if let Some((gf, _)) = inputs.noise {
                    let mut gval = 0.0;
                    for node in 0..nn {
                        let t = tent(mesh, node, z, r);
                        if t != 0.0 {
                            gval += t * gf.data[d * nn + node];
                        }
                    }
                    rhs[ri] += w * gval * vals[ni];
                }
                for (rj, &j) in free.iter().enumerate() {
                    if !is_fluid(j) {
                        continue;
                    }
                    let (c, nj) = (fluid_comp(j), fluid_node(j));
                    if vals[nj] == 0.0 && tg[nj] == [0.0, 0.0] {
                        continue;
                    }
                    let mut val = 0.0;
                    // mass + geometric
                    if c == d {
                        val += w * (jn + 0.5 * (jnp1 - jn)) * vals[nj] * vals[ni];
                        // skew advection
                        let adv_j = a_rel[0] * tg[nj][0] + a_rel[1] * tg[nj][1];
                        let adv_i = a_rel[0] * tg[ni][0] + a_rel[1] * tg[ni][1];
                        val += 0.5 * dt * w * jn * (adv_j * vals[ni] - adv_i * vals[nj]);
                        // the trace part of the viscous contraction
                        val += p.nu * dt * w * jn * (tg[nj][0] * tg[ni][0] + tg[nj][1] * tg[ni][1]);
                    }
                    val += p.nu * dt * w * jn * tg[ni][c] * tg[nj][d];
                    val += p.kappa_div * dt * w * tg[nj][c] * tg[ni][d];
                    a[(ri, rj)] += val;
                }
            }
        }
    }

    // structure mass block and rhs, with independent Hermite evaluation
    for cell in 0..smesh.ns {
        for q in 0..3 {
            let (s, wq) = smesh.cell_quad()[q];
            let t = s * smesh.h;
            let w = wq * smesh.h;
            let (val, _, _) = hermite_solved(t, smesh.h);
            for (ri, &i) in free.iter().enumerate() {
                if is_fluid(i) {
                    continue;
                }
                let (d, ki) = (struct_comp(i), struct_dof(i));
                let li = ki as isize - 2 * cell as isize;
                if !(0..4).contains(&li) {
                    continue;
                }
                let bi = val[li as usize];
                // rhs: int v_half psi (+ noise structure load)
                let mut vh = 0.0;
                let mut gval = 0.0;
                for k in 0..m {
                    let lk = k as isize - 2 * cell as isize;
                    if (0..4).contains(&lk) {
                        vh += val[lk as usize] * inputs.v_half.data[d * m + k];
                        if let Some((_, gs)) = inputs.noise {
                            gval += val[lk as usize] * gs.data[d * m + k];
                        }
                    }
                }
                rhs[ri] += w * (vh + gval) * bi;
                for (rj, &j) in free.iter().enumerate() {
                    if is_fluid(j) {
                        continue;
                    }
                    let (c, kj) = (struct_comp(j), struct_dof(j));
                    if c != d {
                        continue;
                    }
                    let lj = kj as isize - 2 * cell as isize;
                    if !(0..4).contains(&lj) {
                        continue;
                    }
                    a[(ri, rj)] += w * bi * val[lj as usize];
                }
            }
        }
    }

    // boundary penalty on the interface quadrature points
    if p.kappa_bnd > 0.0 {
        let comps: &[usize] = match spaces.gamma {
            GammaConstraint::PenaltyBoth => &[0, 1],
            GammaConstraint::ZeroZPenaltyR => &[1],
        };
        for (bq, bp) in inputs.frame_n.boundary.iter().enumerate() {
            let cell = bq / 3;
            let qloc = bq % 3;
            let (z, wt) = smesh.quad_point(cell, qloc);
            let factor = p.kappa_bnd * dt * wt * bp.arc;
            // trial/test values of every dof's trace or boundary value
            let trace_val = |dof: usize, comp: usize| -> f64 {
                if is_fluid(dof) {
                    if fluid_comp(dof) != comp {
                        return 0.0;
                    }
                    tent(mesh, fluid_node(dof), z, 1.0)
                } else {
                    if struct_comp(dof) != comp {
                        return 0.0;
                    }
                    -hermite_dof_value(smesh, struct_dof(dof), z)
                }
            };
            for &c in comps {
                for (ri, &i) in free.iter().enumerate() {
                    let gi = trace_val(i, c);
                    if gi == 0.0 {
                        continue;
                    }
                    for (rj, &j) in free.iter().enumerate() {
                        let gj = trace_val(j, c);
                        if gj != 0.0 {
                            a[(ri, rj)] += factor * gi * gj;
                        }
                    }
                }
            }
        }
    }

    // pressure loads on the inlet/outlet edges
    if p.p_in != 0.0 || p.p_out != 0.0 {
        let g2 = crate::quadrature::gauss_unit(2);
        for cr in 0..mesh.nr {
            for &(gx, gw) in &g2 {
                let w = gw * mesh.hr;
                let r = (cr as f64 + gx) * mesh.hr;
                for (ri, &i) in free.iter().enumerate() {
                    if !is_fluid(i) || fluid_comp(i) != 0 {
                        continue;
                    }
                    let node = fluid_node(i);
                    rhs[ri] += dt * p.p_in * w * tent(mesh, node, 0.0, r);
                    rhs[ri] -= dt * p.p_out * w * tent(mesh, node, mesh.length, r);
                }
            }
        }
    }

    (a, rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::hermite_basis;

    #[test]
    fn solved_hermite_matches_closed_form() {
        let h = 0.375;
        for &s in &[0.1, 0.5, 0.9] {
            let (v1, d1, dd1) = hermite_solved(s * h, h);
            let (v2, d2, dd2) = hermite_basis(s, h);
            for k in 0..4 {
                assert!((v1[k] - v2[k]).abs() < 1e-12);
                assert!((d1[k] - d2[k]).abs() < 1e-11);
                assert!((dd1[k] - dd2[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn tents_match_production_basis_at_quad_points() {
        let mesh = RefMesh::build(1.0, 3, 3).unwrap();
        for cell in 0..mesh.cell_count() {
            let nodes = mesh.cell_nodes(cell);
            for q in 0..4 {
                let [z, r] = mesh.quad_coords(cell, q);
                let phi = mesh.basis_values(q);
                let dz = mesh.basis_dz(q);
                let dr = mesh.basis_dr(q);
                for a in 0..4 {
                    assert!((tent(&mesh, nodes[a], z, r) - phi[a]).abs() < 1e-13);
                    let g = tent_grad(&mesh, nodes[a], z, r);
                    assert!((g[0] - dz[a]).abs() < 1e-12);
                    assert!((g[1] - dr[a]).abs() < 1e-12);
                }
            }
        }
    }
}
