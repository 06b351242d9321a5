//! Truncated Q-Wiener increments and the Hilbert-Schmidt noise coefficient.
//!
//! The Wiener process lives in the span of `K` modes with covariance
//! eigenvalues `q_k > 0`. An increment over a step of length `dt` is stored
//! in U-coordinates (per-mode variance `q_k dt`); its Cameron-Martin
//! coordinates against the `Q^{1/2} e_k` basis are `xi_k / sqrt(q_k)`, so the
//! squared U_0 norm has expectation `K dt` (the trace convention `dt Tr Q` is
//! reported alongside by the harness).
//!
//! Increment `n` of a path is generated from a counter-derived stream, so it
//! is addressable without generating steps `0..n-1`.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::Sparse;
use crate::mesh::{
    fluid_l2_product, structure_l2_product, FluidField, RefMesh, StructureField, StructureMesh,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WienerSpec {
    pub q: Vec<f64>,
    pub seed: u64,
}

impl WienerSpec {
    pub fn new(q: Vec<f64>, seed: u64) -> Result<Self> {
        if q.is_empty() || q.iter().any(|&v| !(v > 0.0)) {
            return Err(CoreError::Config(
                "covariance eigenvalues must be nonempty and strictly positive".into(),
            ));
        }
        Ok(WienerSpec { q, seed })
    }

    pub fn modes(&self) -> usize {
        self.q.len()
    }

    pub fn trace(&self) -> f64 {
        self.q.iter().sum()
    }

    /// Geometric eigenvalue profile `q_k = q0 ratio^k`.
    pub fn geometric(modes: usize, q0: f64, ratio: f64, seed: u64) -> Result<Self> {
        if modes == 0 || !(q0 > 0.0) || !(ratio > 0.0) {
            return Err(CoreError::Config(format!(
                "geometric profile needs modes >= 1, q0 > 0, ratio > 0; got ({modes}, {q0}, {ratio})"
            )));
        }
        WienerSpec::new(
            (0..modes).map(|k| q0 * ratio.powi(k as i32)).collect(),
            seed,
        )
    }

    /// Polynomial profile `q_k = q0 / (k + 1)^p`.
    pub fn polynomial(modes: usize, q0: f64, p: f64, seed: u64) -> Result<Self> {
        if modes == 0 || !(q0 > 0.0) {
            return Err(CoreError::Config(format!(
                "polynomial profile needs modes >= 1 and q0 > 0; got ({modes}, {q0})"
            )));
        }
        WienerSpec::new(
            (0..modes).map(|k| q0 / ((k + 1) as f64).powf(p)).collect(),
            seed,
        )
    }

    pub fn sample_increment(&self, n: usize, dt: f64) -> Result<WienerIncrement> {
        if !(dt > 0.0) {
            return Err(CoreError::Config(format!("dt must be positive, got {dt}")));
        }
        let mut rng = ChaCha8Rng::from_seed(stream_seed(self.seed, n as u64));
        let xi: Vec<f64> = self
            .q
            .iter()
            .map(|&qk| {
                let g: f64 = rng.sample(StandardNormal);
                (qk * dt).sqrt() * g
            })
            .collect();
        let u0_norm_sq = xi
            .iter()
            .zip(self.q.iter())
            .map(|(&x, &qk)| x * x / qk)
            .sum();
        Ok(WienerIncrement {
            step: n,
            dt,
            xi,
            u0_norm_sq,
        })
    }
}

/// One step's Wiener increment in U-coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerIncrement {
    pub step: usize,
    pub dt: f64,
    /// Per-mode increments with variance `q_k dt`.
    pub xi: Vec<f64>,
    /// `sum xi_k^2 / q_k`, the squared Cameron-Martin norm.
    pub u0_norm_sq: f64,
}

impl WienerIncrement {
    /// Coordinate against the U_0 orthonormal basis `Q^{1/2} e_k`.
    pub fn u0_coord(&self, k: usize, spec: &WienerSpec) -> f64 {
        self.xi[k] / spec.q[k].sqrt()
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the 32-byte stream seed of counter `n` under a master seed.
fn stream_seed(seed: u64, n: u64) -> [u8; 32] {
    let mut state = seed ^ n.wrapping_mul(0xA076_1D64_78BD_642F);
    // decorrelate nearby (seed, n) pairs before filling the key
    let _ = splitmix64(&mut state);
    let mut out = [0u8; 32];
    for chunk in out.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    out
}

/// Columns of the noise coefficient against the U_0 basis: mode `k` carries a
/// fluid and a structure load field.
#[derive(Debug, Clone)]
pub struct NoiseColumns {
    pub fluid: Vec<FluidField>,
    pub structure: Vec<StructureField>,
}

/// Evaluated noise coefficient at one state, with its Hilbert-Schmidt norm.
#[derive(Debug, Clone)]
pub struct NoiseCoefficient {
    pub columns: NoiseColumns,
    pub hs_norm_sq: f64,
}

/// State-dependent noise coefficient `G(u, v, eta)`.
pub trait NoiseModel: Send + Sync {
    fn tag(&self) -> &'static str;

    fn columns(
        &self,
        mesh: &RefMesh,
        smesh: &StructureMesh,
        u: &FluidField,
        v: &StructureField,
        eta: &StructureField,
    ) -> NoiseColumns;
}

/// `G = 0`; the scheme degenerates to the deterministic splitting.
pub struct ZeroNoise {
    pub modes: usize,
}

impl NoiseModel for ZeroNoise {
    fn tag(&self) -> &'static str {
        "zero"
    }

    fn columns(
        &self,
        mesh: &RefMesh,
        smesh: &StructureMesh,
        _u: &FluidField,
        _v: &StructureField,
        _eta: &StructureField,
    ) -> NoiseColumns {
        NoiseColumns {
            fluid: (0..self.modes).map(|_| FluidField::zeros(mesh)).collect(),
            structure: (0..self.modes)
                .map(|_| StructureField::zeros(smesh))
                .collect(),
        }
    }
}

/// Default multiplicative model. Mode `k` maps to
/// `(lambda_k m(eta) R(alpha_k) u, mu_k R(beta_k) v)` with
/// `m(eta) = sup |eta|`: a per-mode gain times a constant rotation of the two
/// components. Constant rotations preserve the assembled L2 norms exactly, so
/// with `sum lambda_k^2 <= 1` and `sum mu_k^2 <= 1` the growth and Lipschitz
/// bounds hold with the stated right-hand sides to rounding, not just up to a
/// quadrature constant.
pub struct MultiplicativeNoise {
    pub fluid_gains: Vec<f64>,
    pub fluid_angles: Vec<f64>,
    pub struct_gains: Vec<f64>,
    pub struct_angles: Vec<f64>,
    pub amplitude: f64,
}

impl MultiplicativeNoise {
    /// `K` modes with geometrically decaying gains, total squared gain
    /// `amplitude^2 (1 - 2^-K)` per block.
    pub fn with_modes(modes: usize, amplitude: f64) -> Result<Self> {
        if modes == 0 {
            return Err(CoreError::Config("noise model needs >= 1 mode".into()));
        }
        if !(amplitude >= 0.0 && amplitude <= 1.0) {
            return Err(CoreError::Config(format!(
                "amplitude must lie in [0, 1] to preserve the growth bounds, got {amplitude}"
            )));
        }
        let golden = 2.399_963_229_728_653;
        Ok(MultiplicativeNoise {
            fluid_gains: (0..modes)
                .map(|k| amplitude * 0.5f64.powf(0.5 * (k as f64 + 1.0)))
                .collect(),
            fluid_angles: (0..modes).map(|k| golden * (k as f64 + 1.0)).collect(),
            struct_gains: (0..modes)
                .map(|k| amplitude * 0.5f64.powf(0.5 * (k as f64 + 1.0)))
                .collect(),
            struct_angles: (0..modes)
                .map(|k| golden * (k as f64 + 1.5) + 0.7)
                .collect(),
            amplitude,
        })
    }
}

fn rotate_fluid(mesh: &RefMesh, f: &FluidField, angle: f64, gain: f64) -> FluidField {
    let nn = mesh.node_count();
    let (s, c) = angle.sin_cos();
    let mut out = FluidField::zeros(mesh);
    for n in 0..nn {
        let fz = f.data[n];
        let fr = f.data[nn + n];
        out.data[n] = gain * (c * fz - s * fr);
        out.data[nn + n] = gain * (s * fz + c * fr);
    }
    out
}

fn rotate_structure(
    smesh: &StructureMesh,
    f: &StructureField,
    angle: f64,
    gain: f64,
) -> StructureField {
    let m = smesh.dofs_per_component();
    let (s, c) = angle.sin_cos();
    let mut out = StructureField::zeros(smesh);
    for k in 0..m {
        let fz = f.data[k];
        let fr = f.data[m + k];
        out.data[k] = gain * (c * fz - s * fr);
        out.data[m + k] = gain * (s * fz + c * fr);
    }
    out
}

impl NoiseModel for MultiplicativeNoise {
    fn tag(&self) -> &'static str {
        "default_multiplicative"
    }

    fn columns(
        &self,
        mesh: &RefMesh,
        smesh: &StructureMesh,
        u: &FluidField,
        v: &StructureField,
        eta: &StructureField,
    ) -> NoiseColumns {
        let m_eta = eta.sup_norm(smesh);
        NoiseColumns {
            fluid: (0..self.fluid_gains.len())
                .map(|k| rotate_fluid(mesh, u, self.fluid_angles[k], self.fluid_gains[k] * m_eta))
                .collect(),
            structure: (0..self.struct_gains.len())
                .map(|k| rotate_structure(smesh, v, self.struct_angles[k], self.struct_gains[k]))
                .collect(),
        }
    }
}

/// Evaluates `G` at a state and computes its Hilbert-Schmidt norm under the
/// assembled L2 products.
pub fn eval_g(
    model: &dyn NoiseModel,
    mesh: &RefMesh,
    smesh: &StructureMesh,
    fluid_mass: &Sparse,
    struct_mass: &faer::Mat<f64>,
    u: &FluidField,
    v: &StructureField,
    eta: &StructureField,
) -> Result<NoiseCoefficient> {
    if u.data.len() != 2 * mesh.node_count() {
        return Err(CoreError::Shape(format!(
            "fluid field has {} dofs, mesh expects {}",
            u.data.len(),
            2 * mesh.node_count()
        )));
    }
    if v.data.len() != 2 * smesh.dofs_per_component()
        || eta.data.len() != 2 * smesh.dofs_per_component()
    {
        return Err(CoreError::Shape(
            "structure fields do not match the structure mesh".into(),
        ));
    }
    let columns = model.columns(mesh, smesh, u, v, eta);
    if columns.fluid.len() != columns.structure.len() {
        return Err(CoreError::Shape(
            "noise model produced mismatched fluid/structure column counts".into(),
        ));
    }
    let mut hs = 0.0;
    for k in 0..columns.fluid.len() {
        hs += fluid_l2_product(fluid_mass, &columns.fluid[k], &columns.fluid[k]);
        hs += structure_l2_product(struct_mass, &columns.structure[k], &columns.structure[k]);
    }
    Ok(NoiseCoefficient {
        columns,
        hs_norm_sq: hs,
    })
}

/// Contracts the columns with an increment: `sum_k c_k col_k` with `c_k` the
/// Cameron-Martin coordinates of the increment.
pub fn noise_load(
    columns: &NoiseColumns,
    increment: &WienerIncrement,
    spec: &WienerSpec,
    mesh: &RefMesh,
    smesh: &StructureMesh,
) -> Result<(FluidField, StructureField)> {
    if columns.fluid.len() != increment.xi.len() || spec.modes() != increment.xi.len() {
        return Err(CoreError::Shape(format!(
            "mode count mismatch: {} columns vs {} increments vs {} spec modes",
            columns.fluid.len(),
            increment.xi.len(),
            spec.modes()
        )));
    }
    let mut gf = FluidField::zeros(mesh);
    let mut gs = StructureField::zeros(smesh);
    for k in 0..columns.fluid.len() {
        let c = increment.u0_coord(k, spec);
        for (o, &x) in gf.data.iter_mut().zip(columns.fluid[k].data.iter()) {
            *o += c * x;
        }
        for (o, &x) in gs.data.iter_mut().zip(columns.structure[k].data.iter()) {
            *o += c * x;
        }
    }
    Ok((gf, gs))
}

/// Max positive violations of the three growth/Lipschitz inequalities over
/// randomized field triples.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AssumptionReport {
    pub growth_violation: f64,
    pub lipschitz_uv_violation: f64,
    pub lipschitz_eta_violation: f64,
    pub samples: usize,
}

impl AssumptionReport {
    pub fn max_violation(&self) -> f64 {
        self.growth_violation
            .max(self.lipschitz_uv_violation)
            .max(self.lipschitz_eta_violation)
    }
}

/// Checks the three noise-coefficient inequalities on random field triples.
/// Violations are reported, never thrown.
#[allow(clippy::too_many_arguments)]
pub fn verify_assumptions(
    model: &dyn NoiseModel,
    mesh: &RefMesh,
    smesh: &StructureMesh,
    fluid_mass: &Sparse,
    struct_mass: &faer::Mat<f64>,
    sample_count: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    assert!(sample_count >= 1);
    let mut rng = ChaCha8Rng::from_seed(stream_seed(seed, 0xA55A));
    let mut rep = AssumptionReport {
        growth_violation: 0.0,
        lipschitz_uv_violation: 0.0,
        lipschitz_eta_violation: 0.0,
        samples: sample_count,
    };
    let fluid_norm = |f: &FluidField| fluid_l2_product(fluid_mass, f, f).max(0.0).sqrt();
    let struct_norm = |f: &StructureField| structure_l2_product(struct_mass, f, f).max(0.0).sqrt();
    let hs_norm = |cols: &NoiseColumns| -> f64 {
        let mut hs = 0.0;
        for k in 0..cols.fluid.len() {
            hs += fluid_l2_product(fluid_mass, &cols.fluid[k], &cols.fluid[k]);
            hs += structure_l2_product(struct_mass, &cols.structure[k], &cols.structure[k]);
        }
        hs.max(0.0).sqrt()
    };

    for sample in 0..sample_count {
        let mut rand_fluid = |scale: f64| {
            let mut f = FluidField::zeros(mesh);
            for v in f.data.iter_mut() {
                *v = rng.gen_range(-scale..scale);
            }
            f
        };
        let u1 = rand_fluid(1.0);
        let u2 = rand_fluid(1.0);
        let mut rand_struct = |scale: f64| {
            let mut f = StructureField::zeros(smesh);
            for v in f.data.iter_mut() {
                *v = rng.gen_range(-scale..scale);
            }
            f
        };
        let v1 = rand_struct(1.0);
        let v2 = rand_struct(1.0);
        let eta1 = rand_struct(0.5);
        // include collinear displacement pairs so state-dependent gains with
        // steep slopes cannot hide between independent samples
        let eta2 = if sample % 2 == 0 {
            rand_struct(0.5)
        } else {
            let mut e = eta1.clone();
            let factor = 1.0 + rng.gen_range(0.01..0.2);
            for v in e.data.iter_mut() {
                *v *= factor;
            }
            e
        };

        let m1 = eta1.sup_norm(smesh);
        let g11 = model.columns(mesh, smesh, &u1, &v1, &eta1);
        // line 1: |G(u,v,eta)| <= |eta|_inf |u| + |v|
        rep.growth_violation = rep
            .growth_violation
            .max(hs_norm(&g11) - (m1 * fluid_norm(&u1) + struct_norm(&v1)));

        // line 2: Lipschitz in (u, v) at fixed eta
        let g21 = model.columns(mesh, smesh, &u2, &v2, &eta1);
        let diff = sub_columns(&g11, &g21);
        let du = sub_fluid(&u1, &u2);
        let dv = sub_struct(&v1, &v2);
        rep.lipschitz_uv_violation = rep
            .lipschitz_uv_violation
            .max(hs_norm(&diff) - (m1 * fluid_norm(&du) + struct_norm(&dv)));

        // line 3: Lipschitz in eta at fixed (u, v)
        let g12 = model.columns(mesh, smesh, &u1, &v1, &eta2);
        let diff = sub_columns(&g11, &g12);
        let de = sub_struct(&eta1, &eta2);
        rep.lipschitz_eta_violation = rep
            .lipschitz_eta_violation
            .max(hs_norm(&diff) - de.sup_norm(smesh) * fluid_norm(&u1));
    }
    Ok(rep)
}

fn sub_fluid(a: &FluidField, b: &FluidField) -> FluidField {
    FluidField {
        data: a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| x - y)
            .collect(),
    }
}

fn sub_struct(a: &StructureField, b: &StructureField) -> StructureField {
    StructureField {
        data: a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| x - y)
            .collect(),
    }
}

fn sub_columns(a: &NoiseColumns, b: &NoiseColumns) -> NoiseColumns {
    NoiseColumns {
        fluid: a
            .fluid
            .iter()
            .zip(b.fluid.iter())
            .map(|(x, y)| sub_fluid(x, y))
            .collect(),
        structure: a
            .structure
            .iter()
            .zip(b.structure.iter())
            .map(|(x, y)| sub_struct(x, y))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{fluid_scalar_mass, structure_matrix};

    fn setting() -> (RefMesh, StructureMesh, Sparse, faer::Mat<f64>) {
        let mesh = RefMesh::build(1.0, 4, 4).unwrap();
        let smesh = StructureMesh::build(1.0, 6).unwrap();
        let fm = fluid_scalar_mass(&mesh);
        let sm = structure_matrix(&smesh, 0);
        (mesh, smesh, fm, sm)
    }

    #[test]
    fn spec_validation() {
        assert!(WienerSpec::new(vec![], 1).is_err());
        assert!(WienerSpec::new(vec![0.1, 0.0], 1).is_err());
        let spec = WienerSpec::geometric(4, 0.2, 0.5, 1).unwrap();
        assert!((spec.trace() - 0.2 * (1.0 + 0.5 + 0.25 + 0.125)).abs() < 1e-15);
        assert!(spec.sample_increment(0, 0.0).is_err());
    }

    #[test]
    fn increments_are_deterministic_and_addressable() {
        let spec = WienerSpec::geometric(6, 0.3, 0.6, 42).unwrap();
        let a = spec.sample_increment(17, 0.01).unwrap();
        let b = spec.sample_increment(17, 0.01).unwrap();
        assert_eq!(a.xi, b.xi);
        let c = spec.sample_increment(16, 0.01).unwrap();
        assert_ne!(a.xi, c.xi);
    }

    #[test]
    fn u0_norm_uses_inverse_covariance_weights() {
        let spec = WienerSpec::new(vec![0.5, 0.125], 9).unwrap();
        let inc = spec.sample_increment(3, 0.2).unwrap();
        let expect: f64 = inc.xi[0] * inc.xi[0] / 0.5 + inc.xi[1] * inc.xi[1] / 0.125;
        assert!((inc.u0_norm_sq - expect).abs() < 1e-15);
    }

    #[test]
    fn per_mode_variance_matches_covariance() {
        let spec = WienerSpec::geometric(3, 0.4, 0.5, 1234).unwrap();
        let dt = 0.02;
        let n = 100_000usize;
        let mut sums = vec![0.0; 3];
        let mut sq = vec![0.0; 3];
        for i in 0..n {
            let inc = spec.sample_increment(i, dt).unwrap();
            for k in 0..3 {
                sums[k] += inc.xi[k];
                sq[k] += inc.xi[k] * inc.xi[k];
            }
        }
        for k in 0..3 {
            let mean = sums[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let target = spec.q[k] * dt;
            let se = target * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!(
                (var - target).abs() <= 3.0 * se,
                "mode {k}: var {var} target {target} se {se}"
            );
        }
    }

    #[test]
    fn disjoint_steps_are_uncorrelated() {
        let dt = 0.1;
        let n = 10_000usize;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for seed in 0..n as u64 {
            let spec = WienerSpec::geometric(1, 1.0, 0.5, seed).unwrap();
            xs.push(spec.sample_increment(3, dt).unwrap().xi[0]);
            ys.push(spec.sample_increment(7, dt).unwrap().xi[0]);
        }
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for i in 0..n {
            cov += (xs[i] - mx) * (ys[i] - my);
            vx += (xs[i] - mx).powi(2);
            vy += (ys[i] - my).powi(2);
        }
        let rho = cov / (vx.sqrt() * vy.sqrt());
        assert!(rho.abs() < 0.03, "correlation {rho}");
    }

    #[test]
    fn zero_model_has_zero_columns() {
        let (mesh, smesh, fm, sm) = setting();
        let model = ZeroNoise { modes: 4 };
        let u = FluidField::interpolate(&mesh, |z, r| [z, r]);
        let v = StructureField::zeros(&smesh);
        let eta = StructureField::zeros(&smesh);
        let g = eval_g(&model, &mesh, &smesh, &fm, &sm, &u, &v, &eta).unwrap();
        assert_eq!(g.hs_norm_sq, 0.0);
    }

    #[test]
    fn default_model_fluid_columns_vanish_at_zero_displacement() {
        let (mesh, smesh, fm, sm) = setting();
        let model = MultiplicativeNoise::with_modes(4, 1.0).unwrap();
        let u = FluidField::interpolate(&mesh, |z, r| [z + r, z - r]);
        let mut v = StructureField::zeros(&smesh);
        for (k, x) in v.data.iter_mut().enumerate() {
            *x = (k as f64 * 0.1).sin();
        }
        let eta = StructureField::zeros(&smesh);
        let g = eval_g(&model, &mesh, &smesh, &fm, &sm, &u, &v, &eta).unwrap();
        for col in &g.columns.fluid {
            assert!(col.data.iter().all(|&x| x == 0.0));
        }
        // structure columns carry the rotated, scaled velocity
        let norm_v = structure_l2_product(&sm, &v, &v);
        let norm_col = structure_l2_product(&sm, &g.columns.structure[0], &g.columns.structure[0]);
        let gain = model.struct_gains[0];
        assert!((norm_col - gain * gain * norm_v).abs() < 1e-12 * norm_v);
    }

    #[test]
    fn shipped_models_respect_growth_bounds() {
        let (mesh, smesh, fm, sm) = setting();
        let zero = ZeroNoise { modes: 3 };
        let rep = verify_assumptions(&zero, &mesh, &smesh, &fm, &sm, 20, 1).unwrap();
        assert!(rep.max_violation() <= 0.0);
        let model = MultiplicativeNoise::with_modes(6, 1.0).unwrap();
        let rep = verify_assumptions(&model, &mesh, &smesh, &fm, &sm, 100, 2).unwrap();
        assert!(rep.max_violation() <= 1e-12, "{rep:?}");
    }

    /// Gain `m cos(10 m)` keeps `|G| <= m(eta) |u|` but has slope up to ~10
    /// in `m`, so only the eta-Lipschitz line can fail.
    struct WobblyGain {
        inner: MultiplicativeNoise,
    }

    impl NoiseModel for WobblyGain {
        fn tag(&self) -> &'static str {
            "custom"
        }
        fn columns(
            &self,
            mesh: &RefMesh,
            smesh: &StructureMesh,
            u: &FluidField,
            v: &StructureField,
            eta: &StructureField,
        ) -> NoiseColumns {
            let m = eta.sup_norm(smesh);
            let wobble = if m > 0.0 { (10.0 * m).cos() } else { 1.0 };
            let mut cols = self.inner.columns(mesh, smesh, u, v, eta);
            for f in cols.fluid.iter_mut() {
                for x in f.data.iter_mut() {
                    *x *= wobble;
                }
            }
            cols
        }
    }

    #[test]
    fn adversarial_model_flags_eta_lipschitz_line() {
        let (mesh, smesh, fm, sm) = setting();
        let model = WobblyGain {
            inner: MultiplicativeNoise::with_modes(4, 1.0).unwrap(),
        };
        let rep = verify_assumptions(&model, &mesh, &smesh, &fm, &sm, 200, 3).unwrap();
        assert!(rep.growth_violation <= 1e-12);
        assert!(rep.lipschitz_uv_violation <= 1e-12);
        assert!(rep.lipschitz_eta_violation > 1e-6, "{rep:?}");
    }

    #[test]
    fn load_is_linear_in_columns() {
        let (mesh, smesh, _, _) = setting();
        let spec = WienerSpec::new(vec![0.7], 5).unwrap();
        let inc = spec.sample_increment(2, 0.5).unwrap();
        let mut v = StructureField::zeros(&smesh);
        for (k, x) in v.data.iter_mut().enumerate() {
            *x = k as f64;
        }
        let cols = NoiseColumns {
            fluid: vec![FluidField::zeros(&mesh)],
            structure: vec![v.clone()],
        };
        let (gf, gs) = noise_load(&cols, &inc, &spec, &mesh, &smesh).unwrap();
        assert!(gf.data.iter().all(|&x| x == 0.0));
        let c = inc.u0_coord(0, &spec);
        for k in 0..v.data.len() {
            assert!((gs.data[k] - c * v.data[k]).abs() < 1e-15);
        }
        // zero increment gives zero load
        let zero_inc = WienerIncrement {
            step: 0,
            dt: 0.5,
            xi: vec![0.0],
            u0_norm_sq: 0.0,
        };
        let (gf, gs) = noise_load(&cols, &zero_inc, &spec, &mesh, &smesh).unwrap();
        assert!(gf.data.iter().all(|&x| x == 0.0));
        assert!(gs.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mesh_mismatch_is_a_shape_error() {
        let (mesh, smesh, fm, sm) = setting();
        let other = RefMesh::build(1.0, 7, 5).unwrap();
        let model = ZeroNoise { modes: 2 };
        let u = FluidField::zeros(&other);
        let v = StructureField::zeros(&smesh);
        let eta = StructureField::zeros(&smesh);
        assert!(matches!(
            eval_g(&model, &mesh, &smesh, &fm, &sm, &u, &v, &eta),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn mode_mismatch_is_a_shape_error() {
        let (mesh, smesh, _, _) = setting();
        let spec = WienerSpec::new(vec![0.7, 0.1], 5).unwrap();
        let inc = spec.sample_increment(2, 0.5).unwrap();
        let cols = NoiseColumns {
            fluid: vec![FluidField::zeros(&mesh)],
            structure: vec![StructureField::zeros(&smesh)],
        };
        assert!(matches!(
            noise_load(&cols, &inc, &spec, &mesh, &smesh),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn ito_isometry_of_the_load_pairing() {
        let (mesh, smesh, fm, sm) = setting();
        let spec = WienerSpec::geometric(3, 0.8, 0.4, 77).unwrap();
        let dt = 0.05;
        let model = MultiplicativeNoise::with_modes(3, 1.0).unwrap();
        let u = FluidField::interpolate(&mesh, |z, r| [r * (1.0 - r), 0.1 * z]);
        let v =
            StructureField::interpolate(&smesh, |z| [0.0, z * (1.0 - z)], |z| [0.0, 1.0 - 2.0 * z]);
        let eta = StructureField::interpolate(&smesh, |z| [0.0, 0.3 * z], |_| [0.0, 0.3]);
        let cols = model.columns(&mesh, &smesh, &u, &v, &eta);
        // fixed test pair
        let qf = FluidField::interpolate(&mesh, |z, r| [z * r, r]);
        let qs = v.clone();
        let pair = |gf: &FluidField, gs: &StructureField| {
            fluid_l2_product(&fm, gf, &qf) + structure_l2_product(&sm, gs, &qs)
        };
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let n = 10_000usize;
        for i in 0..n {
            let inc = spec.sample_increment(i, dt).unwrap();
            let (gf, gs) = noise_load(&cols, &inc, &spec, &mesh, &smesh).unwrap();
            let x = pair(&gf, &gs);
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let mut expected = 0.0;
        for k in 0..3 {
            expected += dt * pair(&cols.fluid[k], &cols.structure[k]).powi(2);
        }
        assert!(
            (var - expected).abs() <= 0.05 * expected,
            "var {var} expected {expected}"
        );
    }

    #[test]
    fn tower_property_with_frozen_state() {
        let (mesh, smesh, fm, sm) = setting();
        let spec = WienerSpec::geometric(4, 0.5, 0.5, 99).unwrap();
        let dt = 0.1;
        let model = MultiplicativeNoise::with_modes(4, 1.0).unwrap();
        let u = FluidField::interpolate(&mesh, |z, r| [r, z]);
        let v = StructureField::interpolate(&smesh, |z| [0.0, z], |_| [0.0, 1.0]);
        let eta = v.clone();
        let g = eval_g(&model, &mesh, &smesh, &fm, &sm, &u, &v, &eta).unwrap();
        let n = 10_000usize;
        let mut acc = 0.0;
        for i in 0..n {
            let inc = spec.sample_increment(i, dt).unwrap();
            acc += g.hs_norm_sq * inc.u0_norm_sq;
        }
        let mean = acc / n as f64;
        // under the Cameron-Martin convention E |dW|_{U0}^2 = K dt
        let expected = g.hs_norm_sq * dt * spec.modes() as f64;
        assert!(
            (mean - expected).abs() <= 0.05 * expected,
            "mean {mean} expected {expected}"
        );
    }
}
