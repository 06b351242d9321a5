//! The operator-splitting time march.
//!
//! Each step runs the implicit structure half-step, re-evaluates the
//! admissibility cutoff, freezes the artificial displacement when the cutoff
//! trips, rebuilds the ALE frames, samples the Wiener increment, evaluates
//! the noise coefficient at the pre-step state, and solves the penalized
//! fluid/structure-velocity system. The ledger records every energy,
//! dissipation and audit residual; nothing is silently discarded.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ale::{
    admissibility, ale_velocity, build_frame, AdmissibilityGauge, AdmissibilityReport, AleFrame,
};
use crate::error::{CoreError, Result};
use crate::fluid::{assemble_fluid_system, AdvectionScheme, FluidInputs, FluidParams};
use crate::mesh::{FluidField, GammaConstraint, Spaces, StructureField};
use crate::noise::{
    noise_load, MultiplicativeNoise, NoiseModel, WienerIncrement, WienerSpec, ZeroNoise,
};
use crate::quadrature::adaptive_simpson;
use crate::structure::{ElasticOperator, StructureStepper};

/// Time-dependent pressure data at the inlet or outlet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PressureSignal {
    Zero,
    Constant {
        value: f64,
    },
    Ramp {
        from: f64,
        to: f64,
    },
    Sine {
        amplitude: f64,
        angular_frequency: f64,
        phase: f64,
        offset: f64,
    },
}

impl PressureSignal {
    pub fn eval(&self, t: f64, t_final: f64) -> f64 {
        match *self {
            PressureSignal::Zero => 0.0,
            PressureSignal::Constant { value } => value,
            PressureSignal::Ramp { from, to } => from + (to - from) * (t / t_final).clamp(0.0, 1.0),
            PressureSignal::Sine {
                amplitude,
                angular_frequency,
                phase,
                offset,
            } => offset + amplitude * (angular_frequency * t + phase).sin(),
        }
    }

    /// Exact interval average `1/dt int_{t0}^{t1} P dt` by adaptive quadrature.
    pub fn interval_average(&self, t0: f64, t1: f64, t_final: f64) -> f64 {
        let f = |t: f64| self.eval(t, t_final);
        adaptive_simpson(&f, t0, t1, 1e-12) / (t1 - t0)
    }
}

/// Eigenvalue profile of the truncated covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceProfile {
    Geometric { q0: f64, ratio: f64 },
    Polynomial { q0: f64, power: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModelKind {
    Zero,
    DefaultMultiplicative { amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub modes: usize,
    pub profile: CovarianceProfile,
    pub model: NoiseModelKind,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            modes: 8,
            profile: CovarianceProfile::Geometric {
                q0: 0.25,
                ratio: 0.5,
            },
            model: NoiseModelKind::DefaultMultiplicative { amplitude: 1.0 },
        }
    }
}

impl NoiseConfig {
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        Ok(match self.profile {
            CovarianceProfile::Geometric { q0, ratio } => {
                WienerSpec::geometric(self.modes, q0, ratio, 0)?.q
            }
            CovarianceProfile::Polynomial { q0, power } => {
                WienerSpec::polynomial(self.modes, q0, power, 0)?.q
            }
        })
    }

    pub fn build_model(&self) -> Result<Box<dyn NoiseModel>> {
        Ok(match self.model {
            NoiseModelKind::Zero => Box::new(ZeroNoise { modes: self.modes }),
            NoiseModelKind::DefaultMultiplicative { amplitude } => {
                Box::new(MultiplicativeNoise::with_modes(self.modes, amplitude)?)
            }
        })
    }
}

/// Initial data: clamped bump profiles for the structure and a plug/parabolic
/// longitudinal flow. The bump is `16 (z/L)^2 (1 - z/L)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct InitialData {
    pub eta_z_amp: f64,
    pub eta_r_amp: f64,
    pub v_z_amp: f64,
    pub v_r_amp: f64,
    /// Amplitude of the parabolic profile `u_z = amp (1 - r^2)`.
    pub u_amp: f64,
}

fn bump(z: f64, l: f64) -> f64 {
    let s = z / l;
    16.0 * s * s * (1.0 - s) * (1.0 - s)
}

fn bump_deriv(z: f64, l: f64) -> f64 {
    let s = z / l;
    32.0 / l * s * (1.0 - s) * (1.0 - 2.0 * s)
}

impl InitialData {
    pub fn structure_fields(&self, spaces: &Spaces) -> (StructureField, StructureField) {
        let l = spaces.smesh.length;
        let eta = StructureField::interpolate(
            &spaces.smesh,
            |z| [self.eta_z_amp * bump(z, l), self.eta_r_amp * bump(z, l)],
            |z| {
                [
                    self.eta_z_amp * bump_deriv(z, l),
                    self.eta_r_amp * bump_deriv(z, l),
                ]
            },
        );
        let v = StructureField::interpolate(
            &spaces.smesh,
            |z| [self.v_z_amp * bump(z, l), self.v_r_amp * bump(z, l)],
            |z| {
                [
                    self.v_z_amp * bump_deriv(z, l),
                    self.v_r_amp * bump_deriv(z, l),
                ]
            },
        );
        (eta, v)
    }

    pub fn fluid_field(&self, spaces: &Spaces) -> FluidField {
        let amp = self.u_amp;
        let mut u = FluidField::interpolate(&spaces.mesh, |_, r| [amp * (1.0 - r * r), 0.0]);
        for (x, &masked) in u.data.iter_mut().zip(spaces.fluid_mask.iter()) {
            if masked {
                *x = 0.0;
            }
        }
        u
    }
}

/// Full runtime configuration of one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeConfig {
    pub t_final: f64,
    pub steps: usize,
    pub length: f64,
    pub nz: usize,
    pub nr: usize,
    pub ns: usize,
    pub nu: f64,
    /// Divergence-penalty weight; defaults to the step count.
    pub kappa_div: Option<f64>,
    /// Boundary-coupling weight; defaults to `kappa_div`, 0 disables.
    pub kappa_bnd: Option<f64>,
    pub delta1: f64,
    /// Ceiling on the displacement norm (the role of `1/delta_2`); defaults
    /// to twice the initial surrogate norm, with floor 1.
    pub norm_ceiling: Option<f64>,
    pub sobolev_s: f64,
    pub gamma_inj: f64,
    /// Elastic coefficients (c0, c1, c2) of the zeroth/second/fourth-order
    /// terms.
    pub elastic: [f64; 3],
    pub gamma_constraint: GammaConstraint,
    pub advection: AdvectionScheme,
    pub pressure_in: PressureSignal,
    pub pressure_out: PressureSignal,
    pub noise: NoiseConfig,
    pub initial: InitialData,
    /// Keep full per-step fields (needed by interpolant studies); ensembles
    /// that only aggregate the ledger may disable it.
    pub store_fields: bool,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            t_final: 0.5,
            steps: 32,
            length: 1.0,
            nz: 8,
            nr: 8,
            ns: 8,
            nu: 0.05,
            kappa_div: None,
            kappa_bnd: None,
            delta1: 0.25,
            norm_ceiling: None,
            sobolev_s: 1.75,
            gamma_inj: 0.1,
            elastic: [0.0, 0.0, 0.05],
            gamma_constraint: GammaConstraint::PenaltyBoth,
            advection: AdvectionScheme::Linearized,
            pressure_in: PressureSignal::Constant { value: 1.0 },
            pressure_out: PressureSignal::Zero,
            noise: NoiseConfig::default(),
            initial: InitialData {
                eta_r_amp: 0.1,
                ..InitialData::default()
            },
            store_fields: true,
        }
    }
}

/// Everything derivable from a config once: meshes, operators, pressure
/// averages, initial fields. Immutable; shared by all paths of an ensemble.
pub struct PathContext {
    pub config: SchemeConfig,
    pub spaces: Spaces,
    pub le: ElasticOperator,
    pub stepper: StructureStepper,
    pub gauge: AdmissibilityGauge,
    pub dt: f64,
    pub kappa_div: f64,
    pub kappa_bnd: f64,
    pub p_in_avg: Vec<f64>,
    pub p_out_avg: Vec<f64>,
    pub noise_model: Box<dyn NoiseModel>,
    pub wiener_q: Vec<f64>,
    pub u0: FluidField,
    pub eta0: StructureField,
    pub v0: StructureField,
}

impl SchemeConfig {
    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn build(&self) -> Result<PathContext> {
        if !(self.t_final > 0.0) || self.steps == 0 {
            return Err(CoreError::Config(format!(
                "need t_final > 0 and steps >= 1, got {} and {}",
                self.t_final, self.steps
            )));
        }
        if !(self.nu > 0.0) {
            return Err(CoreError::Config(format!(
                "viscosity must be positive, got {}",
                self.nu
            )));
        }
        let spaces = Spaces::new(
            self.length,
            self.nz,
            self.nr,
            self.ns,
            self.gamma_constraint,
        )?;
        let le = ElasticOperator::assemble(
            &spaces.smesh,
            self.elastic[0],
            self.elastic[1],
            self.elastic[2],
        )?;
        let dt = self.dt();
        let stepper = StructureStepper::new(&spaces.smesh, &le, dt)?;

        let (eta0, v0) = self.initial.structure_fields(&spaces);
        let u0 = self.initial.fluid_field(&spaces);

        // resolve the norm ceiling against the initial surrogate
        let l2 = spaces.struct_l2_sq(&eta0).max(0.0).sqrt();
        let h2 = (spaces.struct_l2_sq(&eta0) + spaces.bending_sq(&eta0))
            .max(0.0)
            .sqrt();
        let surrogate0 = crate::ale::sobolev_surrogate(l2, h2, self.sobolev_s);
        let norm_ceiling = self
            .norm_ceiling
            .unwrap_or_else(|| (2.0 * surrogate0).max(1.0));
        let gauge = AdmissibilityGauge {
            delta1: self.delta1,
            norm_ceiling,
            sobolev_s: self.sobolev_s,
            gamma_inj: self.gamma_inj,
        };
        gauge.validate()?;
        let rep0 = admissibility(
            &eta0,
            &spaces.mesh,
            &spaces.smesh,
            &spaces.struct_mass,
            &spaces.struct_bending,
            &gauge,
        );
        if !rep0.passes() {
            return Err(CoreError::Config(format!(
                "initial data is not admissible: inf J = {} (floor {}), norm = {} (ceiling {}), margin = {} (floor {})",
                rep0.inf_j, gauge.delta1, rep0.sobolev_s_norm, gauge.norm_ceiling, rep0.margin, gauge.gamma_inj
            )));
        }

        let kappa_div = self.kappa_div.unwrap_or(self.steps as f64);
        if !(kappa_div > 0.0) {
            return Err(CoreError::Config(format!(
                "kappa_div must be positive, got {kappa_div}"
            )));
        }
        let kappa_bnd = self.kappa_bnd.unwrap_or(kappa_div);
        if kappa_bnd < 0.0 {
            return Err(CoreError::Config(format!(
                "kappa_bnd must be nonnegative, got {kappa_bnd}"
            )));
        }

        let mut p_in_avg = Vec::with_capacity(self.steps);
        let mut p_out_avg = Vec::with_capacity(self.steps);
        for n in 0..self.steps {
            let t0 = n as f64 * dt;
            let t1 = (n + 1) as f64 * dt;
            p_in_avg.push(self.pressure_in.interval_average(t0, t1, self.t_final));
            p_out_avg.push(self.pressure_out.interval_average(t0, t1, self.t_final));
        }

        Ok(PathContext {
            config: self.clone(),
            spaces,
            le,
            stepper,
            gauge,
            dt,
            kappa_div,
            kappa_bnd,
            p_in_avg,
            p_out_avg,
            noise_model: self.noise.build_model()?,
            wiener_q: self.noise.eigenvalues()?,
            u0,
            eta0,
            v0,
        })
    }
}

/// State at one time level.
#[derive(Debug, Clone)]
pub struct StepState {
    pub u: FluidField,
    pub eta: StructureField,
    pub v: StructureField,
}

/// Per-step energies, dissipations and audit residuals.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EnergyLedger {
    /// `E^n` (states 0..=N), with the fluid part weighted by the frozen frame
    /// of the same index.
    pub energy: Vec<f64>,
    /// `E^{n+1/2}` per step, pre-step frame.
    pub energy_half: Vec<f64>,
    /// `D^n` per step.
    pub dissipation: Vec<f64>,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    pub struct_residual: Vec<f64>,
    pub fluid_residual: Vec<f64>,
    /// Defect of the combined per-step identity
    /// `E^{n+1} + D^n + C1^n + 2 C2^n + kappa_bnd dt gap^2 = E^n + P-work + noise-work`.
    pub combined_residual: Vec<f64>,
    pub div_norm: Vec<f64>,
    pub boundary_gap: Vec<f64>,
    pub pressure_work: Vec<f64>,
    pub noise_work: Vec<f64>,
    pub advection_work: Vec<f64>,
}

/// One simulated path with its full bookkeeping.
pub struct Trajectory {
    pub seed: u64,
    pub dt: f64,
    pub steps: usize,
    /// N+1 states; index n is the state at time `n dt`.
    pub states: Vec<StepState>,
    /// `v^{n+1/2}` per step.
    pub v_sharp: Vec<StructureField>,
    /// Index `k*` with `eta*^n = eta^{k*}`; stored by index so the freeze is
    /// exact by construction.
    pub eta_star_idx: Vec<usize>,
    /// Running cutoff flags `theta_delta(eta^n)`.
    pub theta: Vec<bool>,
    pub reports: Vec<AdmissibilityReport>,
    /// `inf J` of the frame actually used at each level (built from eta*).
    pub frame_inf_j: Vec<f64>,
    pub ledger: EnergyLedger,
    /// First step index whose cutoff flag failed; N when none did.
    pub n_stop: usize,
    /// Discrete stopping time: `dt` times the first index violating the
    /// Jacobian floor or the norm ceiling, capped at T.
    pub stopping_time: f64,
    pub wall_seconds: f64,
}

impl Trajectory {
    pub fn t_final(&self) -> f64 {
        self.dt * self.steps as f64
    }

    pub fn eta_star(&self, n: usize) -> &StructureField {
        &self.states[self.eta_star_idx[n]].eta
    }

    pub fn max_energy(&self) -> f64 {
        self.ledger.energy.iter().cloned().fold(f64::MIN, f64::max)
    }

    pub fn total_dissipation(&self) -> f64 {
        self.ledger.dissipation.iter().sum()
    }
}

/// Runs one path, drawing increment `n` from the counter-based stream of
/// `seed`.
pub fn run_path(ctx: &PathContext, seed: u64) -> Result<Trajectory> {
    let spec = WienerSpec::new(ctx.wiener_q.clone(), seed)?;
    let increments = (0..ctx.config.steps)
        .map(|n| spec.sample_increment(n, ctx.dt))
        .collect::<Result<Vec<_>>>()?;
    run_path_with_increments(ctx, seed, &increments)
}

/// Runs one path with externally supplied increments (causality tests, the
/// verification harness).
pub fn run_path_with_increments(
    ctx: &PathContext,
    seed: u64,
    increments: &[WienerIncrement],
) -> Result<Trajectory> {
    let start = Instant::now();
    let n_steps = ctx.config.steps;
    if increments.len() != n_steps {
        return Err(CoreError::Shape(format!(
            "need {} increments, got {}",
            n_steps,
            increments.len()
        )));
    }
    let spec = WienerSpec::new(ctx.wiener_q.clone(), seed)?;
    let spaces = &ctx.spaces;
    let dt = ctx.dt;

    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(StepState {
        u: ctx.u0.clone(),
        eta: ctx.eta0.clone(),
        v: ctx.v0.clone(),
    });
    let mut reports = Vec::with_capacity(n_steps + 1);
    reports.push(admissibility(
        &ctx.eta0,
        &spaces.mesh,
        &spaces.smesh,
        &spaces.struct_mass,
        &spaces.struct_bending,
        &ctx.gauge,
    ));
    if !reports[0].passes() {
        return Err(CoreError::Config("initial data lost admissibility".into()));
    }
    let mut theta = vec![true];
    let mut eta_star_idx = vec![0usize];
    let mut n_stop = n_steps;
    let mut stop_idx = n_steps;

    let mut frame_star = build_frame(&ctx.eta0, &spaces.mesh, &spaces.smesh)?;
    let mut frame_inf_j = vec![frame_star.inf_j];

    let mut ledger = EnergyLedger::default();
    let mut v_sharp_all = Vec::with_capacity(n_steps);

    for n in 0..n_steps {
        let state_n = &states[n];
        if frame_star.inf_j <= ctx.gauge.delta1 {
            return Err(CoreError::solver(format!(
                "frame Jacobian floor violated: inf J = {} <= {}",
                frame_star.inf_j, ctx.gauge.delta1
            ))
            .at_step(n));
        }

        // E^n with the pre-step frozen frame
        let e_n = energy(spaces, &ctx.stepper, &frame_star, state_n);
        ledger.energy.push(e_n);

        // (a) structure half-step; eta^{n+1} := eta^{n+1/2}
        let sres = ctx.stepper.step(&spaces.smesh, &state_n.eta, &state_n.v);
        let eta_np1 = sres.eta_half;
        let v_half = sres.v_half;
        ledger.struct_residual.push(sres.audit_residual);

        let mut dv = v_half.clone();
        for (d, v) in dv.data.iter_mut().zip(state_n.v.data.iter()) {
            *d -= v;
        }
        let mut de = eta_np1.clone();
        for (d, e) in de.data.iter_mut().zip(state_n.eta.data.iter()) {
            *d -= e;
        }
        let c1 = 0.5 * ctx.stepper.l2_sq(&dv) + 0.5 * ctx.stepper.elastic_sq(&de);
        ledger.c1.push(c1);

        let e_half = 0.5 * weighted_kinetic(spaces, &frame_star, &state_n.u)
            + 0.5 * ctx.stepper.l2_sq(&v_half)
            + 0.5 * ctx.stepper.elastic_sq(&eta_np1);
        ledger.energy_half.push(e_half);

        // (b) cutoff update and artificial displacement
        let rep = admissibility(
            &eta_np1,
            &spaces.mesh,
            &spaces.smesh,
            &spaces.struct_mass,
            &spaces.struct_bending,
            &ctx.gauge,
        );
        let pass = rep.passes();
        reports.push(rep);
        let flag = *theta.last().unwrap() && pass;
        theta.push(flag);
        if !flag && n_stop == n_steps {
            n_stop = n + 1;
        }
        if stop_idx == n_steps && !(rep.j_floor_ok && rep.norm_ok) {
            stop_idx = n + 1;
        }
        let star_idx = if flag {
            n + 1
        } else {
            *eta_star_idx.last().unwrap()
        };
        eta_star_idx.push(star_idx);

        let frame_star_next = if star_idx == n + 1 {
            build_frame(&eta_np1, &spaces.mesh, &spaces.smesh).map_err(|e| match e {
                CoreError::DegenerateFrame(m) => {
                    CoreError::solver(format!("frame degenerated despite passing cutoff: {m}"))
                        .at_step(n)
                }
                other => other,
            })?
        } else {
            frame_star.clone()
        };
        frame_inf_j.push(frame_star_next.inf_j);
        let w = ale_velocity(&frame_star, &frame_star_next, &spaces.mesh, dt);

        // (c) noise at the pre-step state and frozen displacement
        let eta_star_n = &states[eta_star_idx[n]].eta;
        let cols = ctx.noise_model.columns(
            &spaces.mesh,
            &spaces.smesh,
            &state_n.u,
            &state_n.v,
            eta_star_n,
        );
        let (gf, gs) = noise_load(&cols, &increments[n], &spec, &spaces.mesh, &spaces.smesh)?;
        let noise_fields = (gf, gs);

        // (d) penalized coupled solve
        let params = FluidParams {
            nu: ctx.config.nu,
            kappa_div: ctx.kappa_div,
            kappa_bnd: ctx.kappa_bnd,
            dt,
            p_in: ctx.p_in_avg[n],
            p_out: ctx.p_out_avg[n],
            advection: ctx.config.advection,
        };
        let sys = assemble_fluid_system(FluidInputs {
            spaces,
            frame_n: &frame_star,
            frame_np1: &frame_star_next,
            u_n: &state_n.u,
            ale_w: &w,
            v_half: &v_half,
            params,
            noise: Some(&noise_fields),
        })
        .map_err(|e| e.at_step(n))?;
        let fres = sys.solve().map_err(|e| e.at_step(n))?;

        // (e) ledger
        let wq = spaces.mesh.quad_weight();
        let u1q = fres.u.at_quad(&spaces.mesh);
        let u0q = state_n.u.at_quad(&spaces.mesh);
        let sym = crate::ale::sym_gradient(&frame_star, &spaces.mesh, &fres.u);
        let mut visc = 0.0;
        let mut du_kin = 0.0;
        for id in 0..spaces.mesh.quad_count() {
            let s = &sym[id];
            let frob =
                s[0][0] * s[0][0] + s[0][1] * s[0][1] + s[1][0] * s[1][0] + s[1][1] * s[1][1];
            visc += 2.0 * ctx.config.nu * dt * wq * frame_star.j[id] * frob;
            du_kin += wq
                * frame_star.j[id]
                * ((u1q[id][0] - u0q[id][0]).powi(2) + (u1q[id][1] - u0q[id][1]).powi(2));
        }
        let dissipation = visc + ctx.kappa_div * dt * fres.div_norm * fres.div_norm;
        ledger.dissipation.push(dissipation);
        let mut dvv = fres.v.clone();
        for (d, v) in dvv.data.iter_mut().zip(v_half.data.iter()) {
            *d -= v;
        }
        let c2 = 0.25 * du_kin + 0.25 * ctx.stepper.l2_sq(&dvv);
        ledger.c2.push(c2);
        ledger.fluid_residual.push(fres.audit_residual);
        ledger.div_norm.push(fres.div_norm);
        ledger.boundary_gap.push(fres.boundary_gap);
        ledger.pressure_work.push(fres.pressure_work);
        ledger.noise_work.push(fres.noise_work);
        ledger.advection_work.push(fres.advection_work);

        let next = StepState {
            u: fres.u,
            eta: eta_np1,
            v: fres.v,
        };
        let e_np1 = energy(spaces, &ctx.stepper, &frame_star_next, &next);
        let combined = (e_np1
            + dissipation
            + c1
            + 2.0 * c2
            + ctx.kappa_bnd * dt * fres.boundary_gap * fres.boundary_gap
            - e_n
            - fres.pressure_work
            - fres.noise_work)
            .abs();
        ledger.combined_residual.push(combined);

        v_sharp_all.push(v_half);
        states.push(next);
        frame_star = frame_star_next;
    }
    // terminal energy
    let e_last = energy(spaces, &ctx.stepper, &frame_star, states.last().unwrap());
    ledger.energy.push(e_last);

    let stopping_time = (stop_idx as f64 * dt).min(ctx.config.t_final);
    Ok(Trajectory {
        seed,
        dt,
        steps: n_steps,
        states,
        v_sharp: v_sharp_all,
        eta_star_idx,
        theta,
        reports,
        frame_inf_j,
        ledger,
        n_stop,
        stopping_time,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn weighted_kinetic(spaces: &Spaces, frame: &AleFrame, u: &FluidField) -> f64 {
    let wq = spaces.mesh.quad_weight();
    u.at_quad(&spaces.mesh)
        .iter()
        .zip(frame.j.iter())
        .map(|(v, &j)| wq * j * (v[0] * v[0] + v[1] * v[1]))
        .sum()
}

fn energy(spaces: &Spaces, stepper: &StructureStepper, frame: &AleFrame, s: &StepState) -> f64 {
    0.5 * (weighted_kinetic(spaces, frame, &s.u) + stepper.l2_sq(&s.v) + stepper.elastic_sq(&s.eta))
}

/// Running cutoff flag from a prefix of per-step admissibility reports:
/// 1 while every step so far stayed inside the bounds.
pub fn cutoff_flag(reports: &[AdmissibilityReport]) -> bool {
    reports.iter().all(|r| r.passes())
}

/// Index of the artificial displacement after `n` steps: the largest
/// admissible prefix index under the running cutoff.
pub fn artificial_index(flags: &[bool]) -> usize {
    let mut last = 0;
    for (k, &f) in flags.iter().enumerate() {
        if f {
            last = k;
        } else {
            break;
        }
    }
    last
}

/// Field selectors for the interpolant views and time-shift moduli.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftField {
    /// Right-shifted fluid velocity, fluid L2 gauge.
    UPlus,
    /// Structure velocity of the first sub-problem, structure L2 gauge.
    VSharp,
    /// Right-shifted displacement, clamped-bending gauge.
    EtaPlus,
    /// Piecewise-linear displacement, clamped-bending gauge.
    EtaTilde,
    /// Frozen displacement (piecewise constant), clamped-bending gauge.
    EtaStar,
    /// Piecewise-linear frozen displacement, clamped-bending gauge.
    EtaStarTilde,
}

/// Interpolant views over a finished trajectory.
pub struct Interpolants<'a> {
    traj: &'a Trajectory,
}

impl Trajectory {
    pub fn interpolants(&self) -> Interpolants<'_> {
        Interpolants { traj: self }
    }
}

impl<'a> Interpolants<'a> {
    fn grid(&self, t: f64) -> Result<f64> {
        let t_final = self.traj.t_final();
        if !(0.0..=t_final).contains(&t) {
            return Err(CoreError::Range(format!("time {t} outside [0, {t_final}]")));
        }
        let s = t / self.traj.dt;
        let r = s.round();
        Ok(if (s - r).abs() < 1e-9 { r } else { s })
    }

    fn floor_idx(&self, t: f64) -> Result<usize> {
        let s = self.grid(t)?;
        Ok((s.floor() as usize).min(self.traj.steps))
    }

    fn ceil_idx(&self, t: f64) -> Result<usize> {
        let s = self.grid(t)?;
        Ok((s.ceil() as usize).min(self.traj.steps))
    }

    fn lerp_idx(&self, t: f64) -> Result<(usize, f64)> {
        let s = self.grid(t)?;
        let n = (s.floor() as usize).min(self.traj.steps.saturating_sub(1));
        Ok((n, s - n as f64))
    }

    pub fn u_pc(&self, t: f64) -> Result<&'a FluidField> {
        Ok(&self.traj.states[self.floor_idx(t)?].u)
    }

    pub fn u_plus(&self, t: f64) -> Result<&'a FluidField> {
        Ok(&self.traj.states[self.ceil_idx(t)?].u)
    }

    pub fn u_lin(&self, t: f64) -> Result<FluidField> {
        let (n, lam) = self.lerp_idx(t)?;
        Ok(FluidField {
            data: lerp(
                &self.traj.states[n].u.data,
                &self.traj.states[n + 1].u.data,
                lam,
            ),
        })
    }

    pub fn v_pc(&self, t: f64) -> Result<&'a StructureField> {
        Ok(&self.traj.states[self.floor_idx(t)?].v)
    }

    pub fn v_lin(&self, t: f64) -> Result<StructureField> {
        let (n, lam) = self.lerp_idx(t)?;
        Ok(StructureField {
            data: lerp(
                &self.traj.states[n].v.data,
                &self.traj.states[n + 1].v.data,
                lam,
            ),
        })
    }

    /// `v^{n+1/2}` on `[t^n, t^{n+1})`.
    pub fn v_sharp(&self, t: f64) -> Result<&'a StructureField> {
        let n = self.floor_idx(t)?.min(self.traj.steps - 1);
        Ok(&self.traj.v_sharp[n])
    }

    /// `theta_delta(eta^{n+1}) v^{n+1/2}`, the a.e. derivative of the frozen
    /// linear interpolant.
    pub fn v_star(&self, t: f64) -> Result<StructureField> {
        let n = self.floor_idx(t)?.min(self.traj.steps - 1);
        let mut out = self.traj.v_sharp[n].clone();
        if !self.traj.theta[n + 1] {
            for x in out.data.iter_mut() {
                *x = 0.0;
            }
        }
        Ok(out)
    }

    pub fn eta_pc(&self, t: f64) -> Result<&'a StructureField> {
        Ok(&self.traj.states[self.floor_idx(t)?].eta)
    }

    pub fn eta_plus(&self, t: f64) -> Result<&'a StructureField> {
        Ok(&self.traj.states[self.ceil_idx(t)?].eta)
    }

    pub fn eta_lin(&self, t: f64) -> Result<StructureField> {
        let (n, lam) = self.lerp_idx(t)?;
        Ok(StructureField {
            data: lerp(
                &self.traj.states[n].eta.data,
                &self.traj.states[n + 1].eta.data,
                lam,
            ),
        })
    }

    pub fn eta_star_pc(&self, t: f64) -> Result<&'a StructureField> {
        let n = self.floor_idx(t)?;
        Ok(self.traj.eta_star(n))
    }

    pub fn eta_star_lin(&self, t: f64) -> Result<StructureField> {
        let (n, lam) = self.lerp_idx(t)?;
        Ok(StructureField {
            data: lerp(
                &self.traj.eta_star(n).data,
                &self.traj.eta_star(n + 1).data,
                lam,
            ),
        })
    }
}

fn lerp(a: &[f64], b: &[f64], lam: f64) -> Vec<f64> {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (1.0 - lam) * x + lam * y)
        .collect()
}

/// Squared gauge norm of the difference of two coefficient vectors of the
/// selector's field kind.
fn shift_norm_sq(spaces: &Spaces, field: ShiftField, a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
    match field {
        ShiftField::UPlus => {
            let f = FluidField { data: diff };
            spaces.fluid_l2_sq(&f)
        }
        ShiftField::VSharp => {
            let f = StructureField { data: diff };
            spaces.struct_l2_sq(&f)
        }
        _ => {
            let f = StructureField { data: diff };
            spaces.bending_sq(&f)
        }
    }
}

fn coefficients_at(traj: &Trajectory, field: ShiftField, t: f64) -> Result<Vec<f64>> {
    let it = traj.interpolants();
    Ok(match field {
        ShiftField::UPlus => it.u_plus(t)?.data.clone(),
        ShiftField::VSharp => it.v_sharp(t)?.data.clone(),
        ShiftField::EtaPlus => it.eta_plus(t)?.data.clone(),
        ShiftField::EtaTilde => it.eta_lin(t)?.data,
        ShiftField::EtaStar => it.eta_star_pc(t)?.data.clone(),
        ShiftField::EtaStarTilde => it.eta_star_lin(t)?.data,
    })
}

fn is_piecewise_linear(field: ShiftField) -> bool {
    matches!(field, ShiftField::EtaTilde | ShiftField::EtaStarTilde)
}

/// `int_h^T |f(t) - f(t - h)|^2 dt` by exact piecewise quadrature of the
/// interpolant views: midpoint values on the refined grid for piecewise
/// constants, Simpson for the piecewise linears (the integrand is quadratic).
pub fn time_shift_norm(
    traj: &Trajectory,
    spaces: &Spaces,
    field: ShiftField,
    h: f64,
) -> Result<f64> {
    let t_final = traj.t_final();
    if !(h > 0.0 && h < t_final) {
        return Err(CoreError::Range(format!(
            "shift h must lie in (0, {t_final}), got {h}"
        )));
    }
    // refined breakpoints: grid points and their h-shifts inside [h, T]
    let mut breaks = vec![h, t_final];
    let mut k = 0usize;
    loop {
        let t = k as f64 * traj.dt;
        if t > t_final + 1e-12 {
            break;
        }
        if t > h && t < t_final {
            breaks.push(t);
        }
        let ts = t + h - (h / traj.dt).floor() * traj.dt;
        // offsets of the shifted grid
        if ts > h && ts < t_final {
            breaks.push(ts);
        }
        k += 1;
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let linear = is_piecewise_linear(field);
    let mut acc = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a < 1e-13 {
            continue;
        }
        let g = |t: f64| -> Result<f64> {
            let ft = coefficients_at(traj, field, t)?;
            let fs = coefficients_at(traj, field, t - h)?;
            Ok(shift_norm_sq(spaces, field, &ft, &fs))
        };
        let mid = 0.5 * (a + b);
        if linear {
            // quadratic integrand: Milne's open rule on the quarter points is
            // exact and never samples a breakpoint
            let q1 = g(a + 0.25 * (b - a))?;
            let q2 = g(mid)?;
            let q3 = g(a + 0.75 * (b - a))?;
            acc += (b - a) / 3.0 * (2.0 * q1 - q2 + 2.0 * q3);
        } else {
            acc += (b - a) * g(mid)?;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> SchemeConfig {
        SchemeConfig {
            t_final: 0.2,
            steps: 8,
            nz: 4,
            nr: 4,
            ns: 4,
            ..SchemeConfig::default()
        }
    }

    #[test]
    fn pressure_interval_average_is_exact_for_ramp() {
        let p = PressureSignal::Ramp { from: 0.0, to: 2.0 };
        // average over [0.25, 0.5] of 2 t / 1.0
        let avg = p.interval_average(0.25, 0.5, 1.0);
        assert!((avg - 0.75).abs() < 1e-11);
    }

    #[test]
    fn zero_data_stays_zero() {
        let mut cfg = quick_config();
        cfg.pressure_in = PressureSignal::Zero;
        cfg.initial = InitialData::default();
        cfg.noise.model = NoiseModelKind::Zero;
        let ctx = cfg.build().unwrap();
        let traj = run_path(&ctx, 7).unwrap();
        for s in &traj.states {
            assert!(s.u.data.iter().all(|&x| x == 0.0));
            assert!(s.eta.data.iter().all(|&x| x == 0.0));
            assert!(s.v.data.iter().all(|&x| x == 0.0));
        }
        assert_eq!(traj.n_stop, cfg.steps);
        assert!((traj.stopping_time - cfg.t_final).abs() < 1e-15);
    }

    #[test]
    fn deterministic_run_is_bitwise_reproducible() {
        let cfg = quick_config();
        let ctx = cfg.build().unwrap();
        let a = run_path(&ctx, 42).unwrap();
        let b = run_path(&ctx, 42).unwrap();
        for (sa, sb) in a.states.iter().zip(b.states.iter()) {
            assert_eq!(sa.u.data, sb.u.data);
            assert_eq!(sa.eta.data, sb.eta.data);
            assert_eq!(sa.v.data, sb.v.data);
        }
        assert_eq!(a.ledger.energy, b.ledger.energy);
    }

    #[test]
    fn deterministic_energy_decays_without_forcing() {
        let mut cfg = quick_config();
        cfg.steps = 16;
        cfg.pressure_in = PressureSignal::Zero;
        cfg.noise.model = NoiseModelKind::Zero;
        cfg.initial = InitialData {
            eta_r_amp: 0.08,
            v_r_amp: 0.2,
            ..InitialData::default()
        };
        let ctx = cfg.build().unwrap();
        let traj = run_path(&ctx, 1).unwrap();
        let e0 = traj.ledger.energy[0];
        let mut budget = e0;
        for n in 0..cfg.steps {
            let lhs = traj.ledger.energy[n + 1]
                + traj.ledger.dissipation[n]
                + traj.ledger.c1[n]
                + traj.ledger.c2[n];
            assert!(
                lhs <= traj.ledger.energy[n] + 1e-9 * (e0 + 1.0),
                "step {n}: {lhs} vs {}",
                traj.ledger.energy[n]
            );
            assert!(traj.ledger.combined_residual[n] <= 1e-9 * (e0 + 1.0));
            budget = budget.min(traj.ledger.energy[n + 1]);
        }
        assert!(budget <= e0);
    }

    #[test]
    fn combined_identity_holds_with_noise_and_pressure() {
        let mut cfg = quick_config();
        cfg.initial.u_amp = 0.3;
        cfg.initial.v_r_amp = 0.1;
        let ctx = cfg.build().unwrap();
        let traj = run_path(&ctx, 99).unwrap();
        let scale = traj.max_energy().abs() + 1.0;
        for n in 0..cfg.steps {
            assert!(
                traj.ledger.combined_residual[n] <= 1e-9 * scale,
                "step {n}: residual {}",
                traj.ledger.combined_residual[n]
            );
        }
    }

    #[test]
    fn causality_paths_agree_through_shared_prefix() {
        let cfg = quick_config();
        let ctx = cfg.build().unwrap();
        let spec_a = WienerSpec::new(ctx.wiener_q.clone(), 5).unwrap();
        let spec_b = WienerSpec::new(ctx.wiener_q.clone(), 6).unwrap();
        let m = 4usize;
        let mut inc_a = Vec::new();
        let mut inc_b = Vec::new();
        for n in 0..cfg.steps {
            inc_a.push(spec_a.sample_increment(n, ctx.dt).unwrap());
            if n < m {
                inc_b.push(spec_a.sample_increment(n, ctx.dt).unwrap());
            } else {
                inc_b.push(spec_b.sample_increment(n, ctx.dt).unwrap());
            }
        }
        let ta = run_path_with_increments(&ctx, 5, &inc_a).unwrap();
        let tb = run_path_with_increments(&ctx, 5, &inc_b).unwrap();
        for n in 0..=m {
            assert_eq!(ta.states[n].u.data, tb.states[n].u.data);
            assert_eq!(ta.states[n].eta.data, tb.states[n].eta.data);
            assert_eq!(ta.states[n].v.data, tb.states[n].v.data);
            assert_eq!(ta.eta_star_idx[n], tb.eta_star_idx[n]);
            assert_eq!(ta.theta[n], tb.theta[n]);
        }
        assert_ne!(
            ta.states[cfg.steps].u.data, tb.states[cfg.steps].u.data,
            "diverging increments must eventually diverge the paths"
        );
    }

    #[test]
    fn cutoff_flag_is_a_running_minimum() {
        let mk = |inf_j: f64| AdmissibilityReport {
            inf_j,
            sobolev_s_norm: 0.0,
            margin: 1.0,
            j_floor_ok: inf_j > 0.25,
            norm_ok: true,
            margin_ok: true,
        };
        let reports = vec![mk(1.0), mk(1.0), mk(1.0), mk(0.125), mk(1.0)];
        assert!(cutoff_flag(&reports[..3]));
        assert!(!cutoff_flag(&reports[..4]));
        // recovery at step 4 does not restore the flag
        assert!(!cutoff_flag(&reports[..5]));
    }

    #[test]
    fn artificial_index_freezes_at_last_admissible() {
        assert_eq!(artificial_index(&[true, true, true]), 2);
        assert_eq!(artificial_index(&[true, true, false, false]), 1);
        assert_eq!(artificial_index(&[true, false, true, true]), 0);
    }

    #[test]
    fn interpolant_endpoint_and_midpoint_values() {
        let cfg = quick_config();
        let ctx = cfg.build().unwrap();
        let traj = run_path(&ctx, 3).unwrap();
        let it = traj.interpolants();
        let dt = traj.dt;
        for n in [0usize, 3, 8] {
            let t = n as f64 * dt;
            assert_eq!(it.u_lin(t).unwrap().data, traj.states[n].u.data);
            assert_eq!(it.u_plus(t).unwrap().data, traj.states[n].u.data);
        }
        let t = 2.0 * dt + 0.5 * dt;
        let lin = it.u_lin(t).unwrap();
        for k in 0..lin.data.len() {
            let mid = 0.5 * (traj.states[2].u.data[k] + traj.states[3].u.data[k]);
            assert!((lin.data[k] - mid).abs() < 1e-12);
        }
        assert!(it.u_pc(-0.1).is_err());
        assert!(it.u_pc(cfg.t_final + 0.1).is_err());
    }

    #[test]
    fn eta_tilde_derivative_equals_v_sharp_at_midpoints() {
        let cfg = quick_config();
        let ctx = cfg.build().unwrap();
        let traj = run_path(&ctx, 11).unwrap();
        let it = traj.interpolants();
        let dt = traj.dt;
        let eps = 1e-6 * dt;
        for n in 0..cfg.steps {
            let t = (n as f64 + 0.5) * dt;
            let plus = it.eta_lin(t + eps).unwrap();
            let minus = it.eta_lin(t - eps).unwrap();
            let vs = it.v_sharp(t).unwrap();
            for k in 0..vs.data.len() {
                let fd = (plus.data[k] - minus.data[k]) / (2.0 * eps);
                assert!(
                    (fd - vs.data[k]).abs() <= 1e-12 + 1e-6 * vs.data[k].abs(),
                    "step {n} dof {k}: {fd} vs {}",
                    vs.data[k]
                );
            }
            // frozen interpolant differentiates to theta * v_sharp
            let plus = it.eta_star_lin(t + eps).unwrap();
            let minus = it.eta_star_lin(t - eps).unwrap();
            let vstar = it.v_star(t).unwrap();
            for k in 0..vstar.data.len() {
                let fd = (plus.data[k] - minus.data[k]) / (2.0 * eps);
                assert!((fd - vstar.data[k]).abs() <= 1e-12 + 1e-6 * vstar.data[k].abs());
            }
        }
    }

    #[test]
    fn time_shift_of_constant_trajectory_vanishes() {
        let mut cfg = quick_config();
        cfg.pressure_in = PressureSignal::Zero;
        cfg.initial = InitialData::default();
        cfg.noise.model = NoiseModelKind::Zero;
        let ctx = cfg.build().unwrap();
        let traj = run_path(&ctx, 1).unwrap();
        for h in [traj.dt, 2.0 * traj.dt, 2.5 * traj.dt] {
            let m = time_shift_norm(&traj, &ctx.spaces, ShiftField::UPlus, h).unwrap();
            assert_eq!(m, 0.0);
        }
    }

    #[test]
    fn time_shift_at_dt_matches_increment_sum() {
        let cfg = quick_config();
        let ctx = cfg.build().unwrap();
        let traj = run_path(&ctx, 13).unwrap();
        let got = time_shift_norm(&traj, &ctx.spaces, ShiftField::UPlus, traj.dt).unwrap();
        // sum_{k=1}^{N-1} dt |u^{k+1} - u^k|^2
        let mut expect = 0.0;
        for k in 1..cfg.steps {
            let d = shift_norm_sq(
                &ctx.spaces,
                ShiftField::UPlus,
                &traj.states[k + 1].u.data,
                &traj.states[k].u.data,
            );
            expect += traj.dt * d;
        }
        assert!(
            (got - expect).abs() <= 1e-12 * expect.max(1e-30),
            "{got} vs {expect}"
        );
    }

    #[test]
    fn time_shift_of_single_jump_by_hand() {
        // synthetic trajectory: u jumps once at T/2
        let cfg = quick_config();
        let ctx = cfg.build().unwrap();
        let mut traj = run_path(&ctx, 1).unwrap();
        let nn = ctx.spaces.mesh.node_count();
        let jump = FluidField::interpolate(&ctx.spaces.mesh, |z, r| [z * r, 0.0]);
        for n in 0..=cfg.steps {
            let val = if n > cfg.steps / 2 { 1.0 } else { 0.0 };
            traj.states[n].u = FluidField {
                data: jump.data.iter().map(|x| val * x).collect(),
            };
        }
        let a2 = ctx.spaces.fluid_l2_sq(&jump);
        assert_eq!(nn * 2, jump.data.len());
        // u^+ (t) jumps at t in (t^{m-1}, t^m] with m = steps/2 + 1; for
        // h = 3 dt the integrand is a^2 on an interval of measure h
        let h = 3.0 * traj.dt;
        let got = time_shift_norm(&traj, &ctx.spaces, ShiftField::UPlus, h).unwrap();
        assert!(
            (got - h * a2).abs() < 1e-12 * a2.max(1.0),
            "{got} vs {}",
            h * a2
        );
    }

    #[test]
    fn rejects_inadmissible_initial_data() {
        let mut cfg = quick_config();
        cfg.delta1 = 1.0;
        cfg.initial = InitialData::default();
        assert!(matches!(cfg.build(), Err(CoreError::Config(_))));
    }

    #[test]
    fn alternative_variants_run_and_audit() {
        // zero-z trace policy, Picard-resolved advection, time-dependent
        // pressure data and a polynomial covariance profile, end to end
        let cfg = SchemeConfig {
            t_final: 0.2,
            steps: 8,
            nz: 4,
            nr: 4,
            ns: 4,
            gamma_constraint: GammaConstraint::ZeroZPenaltyR,
            advection: AdvectionScheme::PicardCurrent,
            pressure_in: PressureSignal::Sine {
                amplitude: 0.5,
                angular_frequency: 20.0,
                phase: 0.3,
                offset: 1.0,
            },
            pressure_out: PressureSignal::Ramp { from: 0.2, to: -0.2 },
            noise: NoiseConfig {
                modes: 4,
                profile: CovarianceProfile::Polynomial { q0: 0.3, power: 2.0 },
                model: NoiseModelKind::DefaultMultiplicative { amplitude: 0.8 },
            },
            initial: InitialData {
                eta_r_amp: 0.08,
                u_amp: 0.3,
                ..InitialData::default()
            },
            ..SchemeConfig::default()
        };
        let ctx = cfg.build().unwrap();
        let traj = run_path(&ctx, 23).unwrap();
        let scale = traj.max_energy().abs() + 1.0;
        for n in 0..cfg.steps {
            assert!(traj.ledger.combined_residual[n] <= 1e-9 * scale, "step {n}");
        }
        // the essential trace constraint holds on every state
        for s in &traj.states {
            for iz in 0..=cfg.nz {
                let node = ctx.spaces.mesh.node_index(iz, cfg.nr);
                assert_eq!(s.u.data[node], 0.0);
            }
        }
    }
}
