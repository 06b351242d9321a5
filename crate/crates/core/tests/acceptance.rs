//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantity next to its pinned tolerance. Desk scale: meshes at
//! most 32x32, at most 128 steps, at most 32 paths.

use rand::prelude::*;
use stofsi_core::ale::{ale_velocity, build_frame, PhiMap};
use stofsi_core::driver::{
    run_path, run_path_with_increments, InitialData, NoiseModelKind, PressureSignal, SchemeConfig,
    ShiftField,
};
use stofsi_core::fluid::{assemble_fluid_system, AdvectionScheme, FluidInputs, FluidParams};
use stofsi_core::harness::{
    difference_study, penalty_study, refinement_study, run_ensemble, timeshift_study, EnsembleSpec,
};
use stofsi_core::mesh::{FluidField, GammaConstraint, Spaces, StructureField, StructureMesh};
use stofsi_core::noise::{verify_assumptions, MultiplicativeNoise, WienerSpec, ZeroNoise};
use stofsi_core::oracle::dense_fluid_system;

fn pass(criterion: &str, detail: impl std::fmt::Display) {
    println!("{criterion}: PASS - {detail}");
}

fn clamped_bump(smesh: &StructureMesh, az: f64, ar: f64) -> StructureField {
    let l = smesh.length;
    StructureField::interpolate(
        smesh,
        |z| {
            let s = z / l;
            let b = 16.0 * s * s * (1.0 - s) * (1.0 - s);
            [az * b, ar * b]
        },
        |z| {
            let s = z / l;
            let db = 32.0 / l * s * (1.0 - s) * (1.0 - 2.0 * s);
            [az * db, ar * db]
        },
    )
}

fn random_clamped(smesh: &StructureMesh, rng: &mut StdRng, s: f64) -> StructureField {
    let mut f = StructureField::zeros(smesh);
    for v in f.data.iter_mut() {
        *v = rng.gen_range(-s..s);
    }
    f.apply_clamp(smesh);
    f
}

#[test]
fn criterion_01_structure_energy_identity() {
    let cfg = SchemeConfig::default();
    let ctx = cfg.build().unwrap();
    let mut rng = StdRng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let eta = random_clamped(&ctx.spaces.smesh, &mut rng, 1.5);
        let v = random_clamped(&ctx.spaces.smesh, &mut rng, 1.5);
        let e0 = 0.5 * (ctx.stepper.l2_sq(&v) + ctx.stepper.elastic_sq(&eta));
        let res = ctx.stepper.step(&ctx.spaces.smesh, &eta, &v);
        let tol = 1e-10 * (e0 + 1.0);
        assert!(
            res.audit_residual <= tol,
            "residual {} vs tol {tol}",
            res.audit_residual
        );
        worst = worst.max(res.audit_residual / (e0 + 1.0));
    }
    pass(
        "criterion 01 structure energy identity",
        format!("max residual {worst:.2e} * (E0+1) over 100 randomized steps, tol 1e-10"),
    );
}

#[test]
fn criterion_02_fluid_energy_identity() {
    let cfg = SchemeConfig::default();
    let ctx = cfg.build().unwrap();
    let sp = &ctx.spaces;
    let mut rng = StdRng::seed_from_u64(2002);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let eta_n = clamped_bump(
            &sp.smesh,
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-0.08..0.08),
        );
        let eta_np1 = clamped_bump(
            &sp.smesh,
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-0.08..0.08),
        );
        let f_n = build_frame(&eta_n, &sp.mesh, &sp.smesh).unwrap();
        let f_np1 = build_frame(&eta_np1, &sp.mesh, &sp.smesh).unwrap();
        let w = ale_velocity(&f_n, &f_np1, &sp.mesh, ctx.dt);
        let mut u_n = FluidField::zeros(&sp.mesh);
        for (i, x) in u_n.data.iter_mut().enumerate() {
            if !sp.fluid_mask[i] {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        let v_half = random_clamped(&sp.smesh, &mut rng, 1.0);
        let mut gf = FluidField::zeros(&sp.mesh);
        for x in gf.data.iter_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
        let mut gs = StructureField::zeros(&sp.smesh);
        for x in gs.data.iter_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
        let noise = (gf, gs);
        let params = FluidParams {
            nu: cfg.nu,
            kappa_div: ctx.kappa_div,
            kappa_bnd: ctx.kappa_bnd,
            dt: ctx.dt,
            p_in: rng.gen_range(-2.0..2.0),
            p_out: rng.gen_range(-2.0..2.0),
            advection: AdvectionScheme::Linearized,
        };
        let sys = assemble_fluid_system(FluidInputs {
            spaces: sp,
            frame_n: &f_n,
            frame_np1: &f_np1,
            u_n: &u_n,
            ale_w: &w,
            v_half: &v_half,
            params,
            noise: Some(&noise),
        })
        .unwrap();
        let res = sys.solve().unwrap();
        let scale = sp.fluid_l2_sq(&u_n)
            + ctx.stepper.l2_sq(&v_half)
            + ctx.dt * (params.p_in * params.p_in + params.p_out * params.p_out)
            + 1.0;
        assert!(
            res.audit_residual <= 1e-9 * scale,
            "trial {trial}: residual {} vs scale {scale}",
            res.audit_residual
        );
        worst = worst.max(res.audit_residual / scale);
    }
    pass(
        "criterion 02 fluid energy identity",
        format!("max residual {worst:.2e} * scale over 50 randomized steps, tol 1e-9"),
    );
}

#[test]
fn criterion_03_deterministic_dissipation() {
    let cfg = SchemeConfig {
        steps: 128,
        noise: stofsi_core::driver::NoiseConfig {
            model: NoiseModelKind::Zero,
            ..Default::default()
        },
        pressure_in: PressureSignal::Zero,
        pressure_out: PressureSignal::Zero,
        initial: InitialData {
            eta_r_amp: 0.1,
            v_r_amp: 0.3,
            u_amp: 0.2,
            ..Default::default()
        },
        ..SchemeConfig::default()
    };
    let ctx = cfg.build().unwrap();
    let traj = run_path(&ctx, 3).unwrap();
    let e0 = traj.ledger.energy[0];
    let mut worst = f64::MIN;
    for n in 0..cfg.steps {
        let excess = traj.ledger.energy[n + 1]
            + traj.ledger.dissipation[n]
            + traj.ledger.c1[n]
            + traj.ledger.c2[n]
            - traj.ledger.energy[n];
        assert!(
            excess <= 1e-9 * (e0 + 1.0),
            "step {n}: energy excess {excess}"
        );
        worst = worst.max(excess / (e0 + 1.0));
    }
    pass(
        "criterion 03 deterministic dissipation",
        format!("max normalized excess {worst:.2e} over 128 steps, tol 1e-9"),
    );
}

#[test]
fn criterion_04_advection_neutrality() {
    let cfg = SchemeConfig {
        initial: InitialData {
            eta_r_amp: 0.1,
            v_r_amp: 0.2,
            u_amp: 0.5,
            ..Default::default()
        },
        ..SchemeConfig::default()
    };
    let ctx = cfg.build().unwrap();
    let traj = run_path(&ctx, 5).unwrap();
    let mut worst = 0.0f64;
    for n in 0..cfg.steps {
        let scale = traj.ledger.energy[n] + 1.0;
        let work = traj.ledger.advection_work[n].abs();
        assert!(work <= 1e-12 * scale, "step {n}: advection work {work}");
        worst = worst.max(work / scale);
    }
    pass(
        "criterion 04 advection neutrality",
        format!("max |skew quadratic form| {worst:.2e} * scale per step, tol 1e-12"),
    );
}

#[test]
fn criterion_05_assembly_oracle() {
    let sp = Spaces::new(1.0, 3, 3, 3, GammaConstraint::PenaltyBoth).unwrap();
    let mut rng = StdRng::seed_from_u64(5005);
    let eta_n = clamped_bump(&sp.smesh, 0.02, 0.08);
    let eta_np1 = clamped_bump(&sp.smesh, 0.03, 0.05);
    let f_n = build_frame(&eta_n, &sp.mesh, &sp.smesh).unwrap();
    let f_np1 = build_frame(&eta_np1, &sp.mesh, &sp.smesh).unwrap();
    let dt = 0.05;
    let w = ale_velocity(&f_n, &f_np1, &sp.mesh, dt);
    let mut u_n = FluidField::zeros(&sp.mesh);
    for x in u_n.data.iter_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    let mut v_half = random_clamped(&sp.smesh, &mut rng, 1.0);
    v_half.apply_clamp(&sp.smesh);
    let mut gf = FluidField::zeros(&sp.mesh);
    for x in gf.data.iter_mut() {
        *x = rng.gen_range(-0.3..0.3);
    }
    let mut gs = StructureField::zeros(&sp.smesh);
    for x in gs.data.iter_mut() {
        *x = rng.gen_range(-0.3..0.3);
    }
    let noise = (gf, gs);
    let params = FluidParams {
        nu: 0.1,
        kappa_div: 100.0,
        kappa_bnd: 50.0,
        dt,
        p_in: 1.3,
        p_out: -0.4,
        advection: AdvectionScheme::Linearized,
    };
    let inputs = FluidInputs {
        spaces: &sp,
        frame_n: &f_n,
        frame_np1: &f_np1,
        u_n: &u_n,
        ale_w: &w,
        v_half: &v_half,
        params,
        noise: Some(&noise),
    };
    let (dense, rhs_oracle) = dense_fluid_system(&inputs);
    let sys = assemble_fluid_system(inputs).unwrap();
    let n = sys.reduced_dim();
    let mut max_err = 0.0f64;
    for j in 0..n {
        let vals = sys.matrix.val_of_col(j);
        let mut col = vec![0.0; n];
        for (k, &i) in sys
            .matrix
            .symbolic()
            .row_idx_of_col_raw(j)
            .iter()
            .enumerate()
        {
            col[i] = vals[k];
        }
        for i in 0..n {
            max_err = max_err.max((col[i] - dense[(i, j)]).abs());
        }
    }
    for i in 0..n {
        max_err = max_err.max((sys.rhs[i] - rhs_oracle[i]).abs());
    }
    assert!(max_err <= 1e-12, "max deviation {max_err}");
    pass(
        "criterion 05 assembly oracle",
        format!("max entrywise deviation {max_err:.2e} on the 3x3 mesh, tol 1e-12"),
    );
}

#[test]
fn criterion_06_penalty_decay() {
    let study = penalty_study(&SchemeConfig::default(), &[1e2, 1e3, 1e4], 8, 606, None).unwrap();
    assert!(!study.floored, "divergence norms at the solver floor");
    assert!(
        study.slope >= -0.65 && study.slope <= -0.35,
        "slope {} outside [-0.65, -0.35]; rows {:?}",
        study.slope,
        study.rows
    );
    pass(
        "criterion 06 penalty decay",
        format!(
            "log-log slope {:.3} in [-0.65, -0.35] over kappa = 1e2..1e4, M = 8",
            study.slope
        ),
    );
}

#[test]
fn criterion_07_time_shift_modulus() {
    let cfg = SchemeConfig {
        steps: 64,
        ..SchemeConfig::default()
    };
    let study = timeshift_study(
        &cfg,
        &[2, 4, 8, 16],
        &[ShiftField::UPlus, ShiftField::VSharp],
        16,
        707,
        None,
    )
    .unwrap();
    for fit in &study.fits {
        assert!(!fit.degenerate, "{:?} study degenerate", fit.field);
        assert!(
            fit.slope >= 0.8,
            "{:?}: slope {} < 0.8; rows {:?}",
            fit.field,
            fit.slope,
            fit.rows
        );
    }
    pass(
        "criterion 07 time-shift modulus",
        format!(
            "slopes {:.3} (u+) and {:.3} (v#) >= 0.8 over h = 2..16 dt, M = 16",
            study.fits[0].slope, study.fits[1].slope
        ),
    );
}

#[test]
fn criterion_08_uniform_in_n_estimates() {
    let study = refinement_study(&SchemeConfig::default(), &[16, 32, 64], 16, 808, None).unwrap();
    assert!(
        study.energy_spread < 2.0,
        "E[max E] spread {}",
        study.energy_spread
    );
    assert!(
        study.dissipation_spread < 2.0,
        "E[sum D] spread {}",
        study.dissipation_spread
    );
    pass(
        "criterion 08 uniform-in-N estimates",
        format!(
            "spreads: E[max E] {:.3}, E[sum D] {:.3} < 2 across N = 16, 32, 64, M = 16",
            study.energy_spread, study.dissipation_spread
        ),
    );
}

#[test]
fn criterion_09_interpolant_difference_decay() {
    let cfg = SchemeConfig {
        t_final: 0.25,
        ..SchemeConfig::default()
    };
    let study = difference_study(&cfg, &[16, 32, 64], 8, 909, None).unwrap();
    assert!(
        study.min_decay_factor >= 1.5,
        "decay factor {} < 1.5; rows: {:?}",
        study.min_decay_factor,
        study
            .rows
            .iter()
            .map(|r| (r.steps, r.means.u_pc_vs_lin))
            .collect::<Vec<_>>()
    );
    pass(
        "criterion 09 interpolant difference decay",
        format!(
            "min decay factor {:.2} >= 1.5 per doubling across N = 16, 32, 64",
            study.min_decay_factor
        ),
    );
}

#[test]
fn criterion_10_cutoff_freeze_semantics() {
    // Pin the norm ceiling barely above the initial surrogate and kick the
    // structure, forcing inadmissibility mid-run.
    let mut cfg = SchemeConfig {
        steps: 16,
        noise: stofsi_core::driver::NoiseConfig {
            model: NoiseModelKind::Zero,
            ..Default::default()
        },
        pressure_in: PressureSignal::Zero,
        pressure_out: PressureSignal::Zero,
        initial: InitialData {
            eta_r_amp: 0.05,
            v_r_amp: 1.5,
            ..Default::default()
        },
        ..SchemeConfig::default()
    };
    let probe = cfg.build().unwrap();
    cfg.norm_ceiling = Some(probe.gauge.norm_ceiling * 0.52);
    let ctx = cfg.build().unwrap();
    let traj = run_path(&ctx, 7).unwrap();
    let k = traj.n_stop;
    assert!(
        k >= 1 && k < cfg.steps,
        "cutoff never tripped (n_stop = {k})"
    );
    assert!(!traj.theta[k] && traj.theta[k - 1]);
    for n in 0..k {
        assert_eq!(traj.eta_star_idx[n], n, "eta* must equal eta before the stop");
    }
    for n in k..=cfg.steps {
        assert_eq!(
            traj.eta_star_idx[n],
            k - 1,
            "eta* must freeze at the last admissible index"
        );
        assert_eq!(traj.eta_star(n).data, traj.states[k - 1].eta.data);
    }
    for (n, &inf_j) in traj.frame_inf_j.iter().enumerate() {
        assert!(
            inf_j > ctx.gauge.delta1,
            "step {n}: frame inf J {inf_j} <= delta1"
        );
    }
    // the true displacement keeps evolving after the freeze
    assert_ne!(
        traj.states[cfg.steps].eta.data,
        traj.eta_star(cfg.steps).data
    );
    assert!(traj.n_stop as f64 * traj.dt <= traj.stopping_time + 1e-15);
    pass(
        "criterion 10 cutoff/freeze semantics",
        format!(
            "cutoff tripped at step {k}; eta* frozen at index {} exactly; all frame inf J > {}",
            k - 1,
            ctx.gauge.delta1
        ),
    );
}

#[test]
fn criterion_11_causality() {
    let cfg = SchemeConfig::default();
    let ctx = cfg.build().unwrap();
    let share = 11usize;
    let spec_a = WienerSpec::new(ctx.wiener_q.clone(), 1).unwrap();
    let spec_b = WienerSpec::new(ctx.wiener_q.clone(), 2).unwrap();
    let mut inc_a = Vec::new();
    let mut inc_b = Vec::new();
    for n in 0..cfg.steps {
        inc_a.push(spec_a.sample_increment(n, ctx.dt).unwrap());
        inc_b.push(if n < share {
            spec_a.sample_increment(n, ctx.dt).unwrap()
        } else {
            spec_b.sample_increment(n, ctx.dt).unwrap()
        });
    }
    let ta = run_path_with_increments(&ctx, 1, &inc_a).unwrap();
    let tb = run_path_with_increments(&ctx, 1, &inc_b).unwrap();
    for n in 0..=share {
        assert_eq!(ta.states[n].u.data, tb.states[n].u.data, "step {n}");
        assert_eq!(ta.states[n].eta.data, tb.states[n].eta.data, "step {n}");
        assert_eq!(ta.states[n].v.data, tb.states[n].v.data, "step {n}");
        assert_eq!(ta.eta_star_idx[n], tb.eta_star_idx[n]);
        assert_eq!(ta.theta[n], tb.theta[n]);
    }
    assert_ne!(ta.states[cfg.steps].u.data, tb.states[cfg.steps].u.data);
    pass(
        "criterion 11 causality",
        format!("paths sharing increments below step {share} agree bitwise through step {share}"),
    );
}

#[test]
fn criterion_12_noise_assumptions() {
    let cfg = SchemeConfig::default();
    let sp = Spaces::new(cfg.length, cfg.nz, cfg.nr, cfg.ns, cfg.gamma_constraint).unwrap();
    for (name, rep) in [
        (
            "zero",
            verify_assumptions(
                &ZeroNoise {
                    modes: cfg.noise.modes,
                },
                &sp.mesh,
                &sp.smesh,
                &sp.fluid_mass,
                &sp.struct_mass,
                100,
                12,
            )
            .unwrap(),
        ),
        (
            "default_multiplicative",
            verify_assumptions(
                &MultiplicativeNoise::with_modes(cfg.noise.modes, 1.0).unwrap(),
                &sp.mesh,
                &sp.smesh,
                &sp.fluid_mass,
                &sp.struct_mass,
                100,
                13,
            )
            .unwrap(),
        ),
    ] {
        assert!(rep.max_violation() <= 1e-12, "{name}: violation {:?}", rep);
    }

    // per-mode increment variance at 1e5 draws within 3 standard errors
    let spec = WienerSpec::new(cfg.noise.eigenvalues().unwrap(), 121212).unwrap();
    let dt = cfg.dt();
    let draws = 100_000usize;
    let mut sums = vec![0.0; spec.modes()];
    let mut sqs = vec![0.0; spec.modes()];
    for i in 0..draws {
        let inc = spec.sample_increment(i, dt).unwrap();
        for k in 0..spec.modes() {
            sums[k] += inc.xi[k];
            sqs[k] += inc.xi[k] * inc.xi[k];
        }
    }
    let mut worst = 0.0f64;
    for k in 0..spec.modes() {
        let mean = sums[k] / draws as f64;
        let var = sqs[k] / draws as f64 - mean * mean;
        let target = spec.q[k] * dt;
        let se = target * (2.0 / (draws as f64 - 1.0)).sqrt();
        let dev = (var - target).abs() / se;
        assert!(
            dev <= 3.0,
            "mode {k}: variance off by {dev} standard errors"
        );
        worst = worst.max(dev);
    }
    pass(
        "criterion 12 noise assumptions",
        format!(
            "all growth bounds hold to 1e-12 on 100 triples; worst variance deviation {worst:.2} se at 1e5 draws"
        ),
    );
}

#[test]
fn criterion_13_stopping_time_positivity() {
    let report = run_ensemble(&EnsembleSpec {
        config: SchemeConfig::default(),
        paths: 32,
        master_seed: 1313,
        workers: None,
    })
    .unwrap();
    assert!(
        report.excluded.is_empty(),
        "paths failed: {:?}",
        report.excluded
    );
    assert_eq!(
        report.fraction_nstop_at_least_one, 1.0,
        "some path stopped before one step"
    );
    pass(
        "criterion 13 stopping-time positivity",
        "32/32 paths have n_stop >= 1 with admissible data and default noise",
    );
}

#[test]
fn criterion_14_ale_round_trip() {
    let sp = Spaces::new(1.0, 8, 8, 8, GammaConstraint::PenaltyBoth).unwrap();
    let mut worst_phi = 0.0f64;
    let mut worst_det = 0.0f64;
    for (az, ar) in [(0.0, 0.1), (0.05, 0.08), (-0.04, -0.06)] {
        let eta = clamped_bump(&sp.smesh, az, ar);
        let frame = build_frame(&eta, &sp.mesh, &sp.smesh).unwrap();
        let phi = PhiMap::new(&sp.smesh, &eta);
        for k in 0..50 {
            let z = sp.smesh.length * k as f64 / 49.0;
            let y = phi.invert(z, 1e-13).unwrap();
            worst_phi = worst_phi.max((phi.forward(y) - z).abs());
        }
        for id in 0..sp.mesh.quad_count() {
            let a = frame.grad_a[id];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            worst_det = worst_det.max((det - frame.j[id]).abs());
        }
    }
    assert!(worst_phi <= 1e-12, "round trip defect {worst_phi}");
    assert!(worst_det <= 1e-12, "determinant defect {worst_det}");
    pass(
        "criterion 14 ALE round trip",
        format!(
            "max phi inversion defect {worst_phi:.2e}, max J - det defect {worst_det:.2e}, tol 1e-12"
        ),
    );
}
