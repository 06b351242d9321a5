//! Seeded Monte Carlo ensembles and parameter studies.
//!
//! Paths run concurrently on a local worker pool; the reduction is a
//! compensated sum in fixed seed order, so reports are independent of the
//! execution schedule. Excluded (failed) paths are listed, never silently
//! dropped from the averages' denominators.

use rayon::prelude::*;
use serde::Serialize;

use crate::driver::{run_path, SchemeConfig, ShiftField, Trajectory};
use crate::error::{CoreError, Result};
use crate::linalg::CompensatedSum;

#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    pub config: SchemeConfig,
    pub paths: usize,
    pub master_seed: u64,
    pub workers: Option<usize>,
}

/// Plain average with its standard error `std / sqrt(M)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

fn estimate(values: &[f64]) -> Estimate {
    let n = values.len();
    if n == 0 {
        return Estimate {
            mean: f64::NAN,
            std_error: f64::NAN,
            count: 0,
        };
    }
    let mut sum = CompensatedSum::default();
    for &v in values {
        sum.add(v);
    }
    let mean = sum.value() / n as f64;
    let mut var = CompensatedSum::default();
    for &v in values {
        var.add((v - mean) * (v - mean));
    }
    let std = if n > 1 {
        (var.value() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Estimate {
        mean,
        std_error: std / (n as f64).sqrt(),
        count: n,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExcludedPath {
    pub index: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleReport {
    pub paths: usize,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    /// E[max_n E^n]
    pub max_energy: Estimate,
    /// E[sum_n D^n]
    pub total_dissipation: Estimate,
    pub total_c1: Estimate,
    pub total_c2: Estimate,
    pub stopping_time_nstop: Vec<f64>,
    pub stopping_time_criterion: Vec<f64>,
    pub fraction_nstop_at_least_one: f64,
    pub max_struct_residual: f64,
    pub max_fluid_residual: f64,
    pub max_combined_residual: f64,
    pub excluded: Vec<ExcludedPath>,
    /// Wall-clock metric; skipped in the serialized report so artifacts are
    /// bitwise reproducible from the master seed.
    #[serde(skip)]
    pub wall_seconds: f64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pairwise-distinct per-path seeds derived from a master seed.
pub fn path_seeds(master_seed: u64, paths: usize) -> Vec<u64> {
    let mut state = master_seed;
    let mut seen = std::collections::HashSet::with_capacity(paths);
    let mut out = Vec::with_capacity(paths);
    while out.len() < paths {
        let s = splitmix64(&mut state);
        if seen.insert(s) {
            out.push(s);
        }
    }
    out
}

/// Runs `spec.paths` independent paths and aggregates the uniform-estimate
/// statistics.
pub fn run_ensemble(spec: &EnsembleSpec) -> Result<EnsembleReport> {
    if spec.paths == 0 {
        return Err(CoreError::Config("ensemble needs at least one path".into()));
    }
    let start = std::time::Instant::now();
    let ctx = spec.config.build()?;
    let seeds = path_seeds(spec.master_seed, spec.paths);
    let results = run_indexed(&seeds, spec.workers, |&seed| run_path(&ctx, seed))?;

    let mut max_energy = Vec::new();
    let mut total_d = Vec::new();
    let mut total_c1 = Vec::new();
    let mut total_c2 = Vec::new();
    let mut stop_nstop = Vec::new();
    let mut stop_criterion = Vec::new();
    let mut nstop_ok = 0usize;
    let mut max_sr: f64 = 0.0;
    let mut max_fr: f64 = 0.0;
    let mut max_cr: f64 = 0.0;
    let mut excluded = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok(traj) => {
                max_energy.push(traj.max_energy());
                total_d.push(traj.total_dissipation());
                total_c1.push(traj.ledger.c1.iter().sum());
                total_c2.push(traj.ledger.c2.iter().sum());
                stop_nstop.push(traj.n_stop as f64 * traj.dt);
                stop_criterion.push(traj.stopping_time);
                if traj.n_stop >= 1 {
                    nstop_ok += 1;
                }
                for &r in &traj.ledger.struct_residual {
                    max_sr = max_sr.max(r);
                }
                for &r in &traj.ledger.fluid_residual {
                    max_fr = max_fr.max(r);
                }
                for &r in &traj.ledger.combined_residual {
                    max_cr = max_cr.max(r);
                }
            }
            Err(e) => excluded.push(ExcludedPath {
                index: i,
                seed: seeds[i],
                error: e.to_string(),
            }),
        }
    }
    if max_energy.is_empty() {
        return Err(CoreError::solver(format!(
            "all {} paths failed; first: {}",
            spec.paths, excluded[0].error
        )));
    }
    let included = max_energy.len();
    Ok(EnsembleReport {
        paths: spec.paths,
        master_seed: spec.master_seed,
        seeds,
        max_energy: estimate(&max_energy),
        total_dissipation: estimate(&total_d),
        total_c1: estimate(&total_c1),
        total_c2: estimate(&total_c2),
        stopping_time_nstop: stop_nstop,
        stopping_time_criterion: stop_criterion,
        fraction_nstop_at_least_one: nstop_ok as f64 / included as f64,
        max_struct_residual: max_sr,
        max_fluid_residual: max_fr,
        max_combined_residual: max_cr,
        excluded,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Executes `f` over items on a bounded pool, returning results in input
/// order.
fn run_indexed<T: Sync, U: Send>(
    items: &[T],
    workers: Option<usize>,
    f: impl Fn(&T) -> Result<U> + Send + Sync,
) -> Result<Vec<Result<U>>> {
    let run = || items.par_iter().map(|t| f(t)).collect::<Vec<_>>();
    match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| CoreError::Config(format!("worker pool: {e}")))?;
            Ok(pool.install(run))
        }
        None => Ok(run()),
    }
}

/// Least-squares line through `(x_i, y_i)`; returns (slope, intercept).
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Debug, Clone, Serialize)]
pub struct RefinementRow {
    pub steps: usize,
    pub max_energy: Estimate,
    pub total_dissipation: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefinementStudy {
    pub rows: Vec<RefinementRow>,
    /// max/min ratio of the ensemble means across the step counts.
    pub energy_spread: f64,
    pub dissipation_spread: f64,
    pub growth_limit: f64,
    pub flagged: bool,
}

/// Uniformity-in-N study: the penalty keeps its default coupling
/// `kappa_div = N` unless the base config pins it. `growth_limit` is the
/// flagging threshold on the max/min spread of the ensemble means.
pub fn refinement_study_with_limit(
    base: &SchemeConfig,
    n_list: &[usize],
    paths: usize,
    master_seed: u64,
    workers: Option<usize>,
    growth_limit: f64,
) -> Result<RefinementStudy> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CoreError::Config(
            "refinement study needs a strictly increasing step list".into(),
        ));
    }
    let mut rows = Vec::new();
    for &steps in n_list {
        let mut cfg = base.clone();
        cfg.steps = steps;
        let report = run_ensemble(&EnsembleSpec {
            config: cfg,
            paths,
            master_seed,
            workers,
        })?;
        rows.push(RefinementRow {
            steps,
            max_energy: report.max_energy,
            total_dissipation: report.total_dissipation,
        });
    }
    let spread = |pick: &dyn Fn(&RefinementRow) -> f64| -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in &rows {
            lo = lo.min(pick(r));
            hi = hi.max(pick(r));
        }
        hi / lo
    };
    let energy_spread = spread(&|r| r.max_energy.mean);
    let dissipation_spread = spread(&|r| r.total_dissipation.mean);
    Ok(RefinementStudy {
        flagged: energy_spread > growth_limit || dissipation_spread > growth_limit,
        rows,
        energy_spread,
        dissipation_spread,
        growth_limit,
    })
}

pub fn refinement_study(
    base: &SchemeConfig,
    n_list: &[usize],
    paths: usize,
    master_seed: u64,
    workers: Option<usize>,
) -> Result<RefinementStudy> {
    refinement_study_with_limit(base, n_list, paths, master_seed, workers, 2.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct PenaltyStudy {
    pub rows: Vec<PenaltyRow>,
    /// Fitted slope of `log |div|_{L2 L2}` against `log kappa`.
    pub slope: f64,
    /// All divergence norms sat at the solver floor; the slope is
    /// meaningless there.
    pub floored: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PenaltyRow {
    pub kappa: f64,
    pub mean_div_l2l2: f64,
    pub std_error: f64,
}

/// Sweeps the divergence penalty at fixed physics and fits the decay rate of
/// the space-time divergence norm.
pub fn penalty_study(
    base: &SchemeConfig,
    kappa_list: &[f64],
    paths: usize,
    master_seed: u64,
    workers: Option<usize>,
) -> Result<PenaltyStudy> {
    if kappa_list.len() < 2 {
        return Err(CoreError::Config(
            "penalty study needs at least two kappa values".into(),
        ));
    }
    let (lo, hi) = kappa_list
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &k| (a.min(k), b.max(k)));
    if hi / lo < 100.0 {
        return Err(CoreError::Config(format!(
            "penalty sweep must span at least two decades, got {lo}..{hi}"
        )));
    }
    let seeds = path_seeds(master_seed, paths);
    // pin the boundary coupling at the base value so the sweep varies the
    // divergence penalty alone
    let kappa_bnd = base
        .kappa_bnd
        .unwrap_or_else(|| base.kappa_div.unwrap_or(base.steps as f64));
    let mut rows = Vec::new();
    for &kappa in kappa_list {
        let mut cfg = base.clone();
        cfg.kappa_div = Some(kappa);
        cfg.kappa_bnd = Some(kappa_bnd);
        let ctx = cfg.build()?;
        let results = run_indexed(&seeds, workers, |&seed| run_path(&ctx, seed))?;
        let mut values = Vec::new();
        for res in results {
            let traj = res?;
            let mut acc = CompensatedSum::default();
            for &d in &traj.ledger.div_norm {
                acc.add(traj.dt * d * d);
            }
            values.push(acc.value().sqrt());
        }
        let est = estimate(&values);
        rows.push(PenaltyRow {
            kappa,
            mean_div_l2l2: est.mean,
            std_error: est.std_error,
        });
    }
    let floored = rows.iter().all(|r| r.mean_div_l2l2 < 1e-9);
    let (slope, _) = least_squares(
        &rows.iter().map(|r| r.kappa.ln()).collect::<Vec<_>>(),
        &rows
            .iter()
            .map(|r| r.mean_div_l2l2.max(1e-300).ln())
            .collect::<Vec<_>>(),
    );
    Ok(PenaltyStudy {
        rows,
        slope,
        floored,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftFit {
    pub field: ShiftField,
    pub rows: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub pass: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimeshiftStudy {
    pub fits: Vec<ShiftFit>,
}

/// Ensemble time-shift moduli `E |T_h f - f|^2` over `h = multiples of dt`,
/// with a log-log fit per field; PASS means slope >= 0.8.
pub fn timeshift_study(
    base: &SchemeConfig,
    h_multiples: &[usize],
    fields: &[ShiftField],
    paths: usize,
    master_seed: u64,
    workers: Option<usize>,
) -> Result<TimeshiftStudy> {
    if h_multiples.len() < 2 || h_multiples.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CoreError::Config(
            "time-shift study needs an increasing list of dt multiples".into(),
        ));
    }
    let (lo, hi) = (h_multiples[0], *h_multiples.last().unwrap());
    if hi / lo < 8 {
        return Err(CoreError::Config(
            "time-shift sweep must span at least three octaves".into(),
        ));
    }
    let ctx = base.build()?;
    let seeds = path_seeds(master_seed, paths);
    let trajs: Vec<Trajectory> = run_indexed(&seeds, workers, |&seed| run_path(&ctx, seed))?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut fits = Vec::new();
    for &field in fields {
        let mut rows = Vec::new();
        for &mult in h_multiples {
            let h = mult as f64 * ctx.dt;
            let mut acc = CompensatedSum::default();
            for traj in &trajs {
                acc.add(crate::driver::time_shift_norm(traj, &ctx.spaces, field, h)?);
            }
            rows.push((h, acc.value() / trajs.len() as f64));
        }
        let degenerate = rows.iter().all(|&(_, m)| m < 1e-14);
        let (slope, intercept) = if degenerate {
            (f64::NAN, f64::NAN)
        } else {
            least_squares(
                &rows.iter().map(|r| r.0.ln()).collect::<Vec<_>>(),
                &rows
                    .iter()
                    .map(|r| r.1.max(1e-300).ln())
                    .collect::<Vec<_>>(),
            )
        };
        fits.push(ShiftFit {
            field,
            rows,
            slope,
            intercept,
            pass: !degenerate && slope >= 0.8,
            degenerate,
        });
    }
    Ok(TimeshiftStudy { fits })
}

/// Exactly integrated interpolant-difference functionals of one trajectory.
#[derive(Debug, Clone, Copy, Serialize, Default)]
pub struct DifferenceFunctionals {
    /// `int |u_N - u~_N|^2 dt = sum |du|^2 dt / 3`
    pub u_pc_vs_lin: f64,
    /// `int |u_N - u+_N|^2 dt = sum |du|^2 dt`
    pub u_pc_vs_plus: f64,
    /// bending gauge
    pub eta_pc_vs_lin: f64,
    pub eta_star_pc_vs_lin: f64,
    pub v_pc_vs_lin: f64,
    pub v_pc_vs_sharp: f64,
}

pub fn interpolant_differences(
    traj: &Trajectory,
    spaces: &crate::mesh::Spaces,
) -> DifferenceFunctionals {
    let dt = traj.dt;
    let mut out = DifferenceFunctionals::default();
    let diff_sq_fluid = |a: &[f64], b: &[f64]| {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        spaces.fluid_l2_sq(&crate::mesh::FluidField { data: d })
    };
    let diff_sq_bend = |a: &[f64], b: &[f64]| {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        spaces.bending_sq(&crate::mesh::StructureField { data: d })
    };
    let diff_sq_struct = |a: &[f64], b: &[f64]| {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        spaces.struct_l2_sq(&crate::mesh::StructureField { data: d })
    };
    for n in 0..traj.steps {
        let du = diff_sq_fluid(&traj.states[n + 1].u.data, &traj.states[n].u.data);
        out.u_pc_vs_lin += du * dt / 3.0;
        out.u_pc_vs_plus += du * dt;
        out.eta_pc_vs_lin +=
            diff_sq_bend(&traj.states[n + 1].eta.data, &traj.states[n].eta.data) * dt / 3.0;
        out.eta_star_pc_vs_lin +=
            diff_sq_bend(&traj.eta_star(n + 1).data, &traj.eta_star(n).data) * dt / 3.0;
        out.v_pc_vs_lin +=
            diff_sq_struct(&traj.states[n + 1].v.data, &traj.states[n].v.data) * dt / 3.0;
        out.v_pc_vs_sharp += diff_sq_struct(&traj.states[n].v.data, &traj.v_sharp[n].data) * dt;
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct DifferenceRow {
    pub steps: usize,
    pub means: DifferenceFunctionals,
}

#[derive(Debug, Clone, Serialize)]
pub struct DifferenceStudy {
    pub rows: Vec<DifferenceRow>,
    /// Smallest decrease factor of `E int |u_N - u~_N|^2` per doubling.
    pub min_decay_factor: f64,
    /// Smallest per-doubling decrease factor of each tabulated quantity.
    pub min_decay_by_quantity: Vec<(String, f64)>,
}

pub fn difference_study(
    base: &SchemeConfig,
    n_list: &[usize],
    paths: usize,
    master_seed: u64,
    workers: Option<usize>,
) -> Result<DifferenceStudy> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CoreError::Config(
            "difference study needs a strictly increasing step list".into(),
        ));
    }
    let seeds = path_seeds(master_seed, paths);
    let mut rows = Vec::new();
    for &steps in n_list {
        let mut cfg = base.clone();
        cfg.steps = steps;
        let ctx = cfg.build()?;
        let results = run_indexed(&seeds, workers, |&seed| run_path(&ctx, seed))?;
        let mut mean = DifferenceFunctionals::default();
        let mut count = 0usize;
        for res in results {
            let d = interpolant_differences(&res?, &ctx.spaces);
            mean.u_pc_vs_lin += d.u_pc_vs_lin;
            mean.u_pc_vs_plus += d.u_pc_vs_plus;
            mean.eta_pc_vs_lin += d.eta_pc_vs_lin;
            mean.eta_star_pc_vs_lin += d.eta_star_pc_vs_lin;
            mean.v_pc_vs_lin += d.v_pc_vs_lin;
            mean.v_pc_vs_sharp += d.v_pc_vs_sharp;
            count += 1;
        }
        let c = count as f64;
        mean.u_pc_vs_lin /= c;
        mean.u_pc_vs_plus /= c;
        mean.eta_pc_vs_lin /= c;
        mean.eta_star_pc_vs_lin /= c;
        mean.v_pc_vs_lin /= c;
        mean.v_pc_vs_sharp /= c;
        rows.push(DifferenceRow { steps, means: mean });
    }
    let quantities: [(&str, fn(&DifferenceFunctionals) -> f64); 6] = [
        ("u_pc_vs_lin", |d| d.u_pc_vs_lin),
        ("u_pc_vs_plus", |d| d.u_pc_vs_plus),
        ("eta_pc_vs_lin", |d| d.eta_pc_vs_lin),
        ("eta_star_pc_vs_lin", |d| d.eta_star_pc_vs_lin),
        ("v_pc_vs_lin", |d| d.v_pc_vs_lin),
        ("v_pc_vs_sharp", |d| d.v_pc_vs_sharp),
    ];
    let mut by_quantity = Vec::new();
    for (name, pick) in quantities {
        let mut min_decay = f64::INFINITY;
        for w in rows.windows(2) {
            let doublings = (w[1].steps as f64 / w[0].steps as f64).log2();
            let (a, b) = (pick(&w[0].means), pick(&w[1].means));
            if b <= 0.0 {
                // quantity identically zero (degenerate dynamics); skip
                continue;
            }
            min_decay = min_decay.min((a / b).powf(1.0 / doublings));
        }
        by_quantity.push((name.to_string(), min_decay));
    }
    let min_decay_factor = by_quantity[0].1;
    Ok(DifferenceStudy {
        rows,
        min_decay_factor,
        min_decay_by_quantity: by_quantity,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StoppingStats {
    pub paths: usize,
    /// Sorted `n_stop dt` per path (empirical CDF support).
    pub flag_times: Vec<f64>,
    /// Sorted limit-criterion times.
    pub criterion_times: Vec<f64>,
    pub fraction_at_least_dt: f64,
    pub fraction_full_horizon: f64,
}

pub fn stopping_stats(
    base: &SchemeConfig,
    paths: usize,
    master_seed: u64,
    workers: Option<usize>,
) -> Result<StoppingStats> {
    let report = run_ensemble(&EnsembleSpec {
        config: base.clone(),
        paths,
        master_seed,
        workers,
    })?;
    let dt = base.dt();
    let mut flag_times = report.stopping_time_nstop.clone();
    let mut criterion_times = report.stopping_time_criterion.clone();
    flag_times.sort_by(f64::total_cmp);
    criterion_times.sort_by(f64::total_cmp);
    let n = flag_times.len();
    let at_least = flag_times.iter().filter(|&&t| t >= dt - 1e-15).count();
    let full = flag_times
        .iter()
        .filter(|&&t| t >= base.t_final - 1e-15)
        .count();
    Ok(StoppingStats {
        paths: n,
        flag_times,
        criterion_times,
        fraction_at_least_dt: at_least as f64 / n as f64,
        fraction_full_horizon: full as f64 / n as f64,
    })
}
