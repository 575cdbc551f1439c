//! Experiment harness: a trajectory runner with per-step diagnostics, a
//! local-consistency measurement against manufactured solutions, and the
//! mesh-convergence study.
//!
//! The runner lands on requested report times exactly (bitwise, by
//! shortening the step that would overshoot), so snapshot files and traces
//! line up across runs with different dt.

use crate::error::Error;
use crate::fisher::{energy, potential};
use crate::grid::{d_divergence, d_gradient, edge_average, edge_multiply, mass, CellField, GridSpec};
use crate::stepper::{restore_mass, step, SchemeConfig};

/// The report times used for the reference experiments.
pub const DEFAULT_REPORT_TIMES: [f64; 5] = [0.0, 8e-6, 3.2e-5, 1e-4, 7.2e-4];

#[derive(Clone, Debug)]
pub enum InitialCondition {
    /// (sqrt(eps) + [(1 + cos 2 pi x / L) / 2]^m)^2: a positive cosine bump,
    /// pinched to a deep minimum at x = L/2 as eps shrinks and m grows.
    CosineBump1d { eps: f64, m: f64 },
    /// Product form (sqrt(eps) + [(1 + cos 2 pi x/L cos 2 pi y/L) / 2]^m)^2:
    /// one interior peak at the domain center plus four corner peaks.
    CosineBump2d { eps: f64, m: f64 },
    /// Explicit cell values; must match the grid it is built on.
    Custom(Vec<f64>),
}

impl InitialCondition {
    pub fn build(&self, grid: GridSpec) -> CellField {
        let tau = 2.0 * std::f64::consts::PI;
        match self {
            InitialCondition::CosineBump1d { eps, m } => {
                assert_eq!(grid.dim(), 1, "one-dimensional profile on a 2D grid");
                let (eps, m) = (*eps, *m);
                let l = grid.l();
                CellField::sample_1d(grid, move |x| {
                    let c = ((1.0 + (tau * x / l).cos()) / 2.0).powf(m);
                    let s = eps.sqrt() + c;
                    s * s
                })
            }
            InitialCondition::CosineBump2d { eps, m } => {
                assert_eq!(grid.dim(), 2, "two-dimensional profile on a 1D grid");
                let (eps, m) = (*eps, *m);
                let l = grid.l();
                CellField::sample_2d(grid, move |x, y| {
                    let c = ((1.0 + (tau * x / l).cos() * (tau * y / l).cos()) / 2.0).powf(m);
                    let s = eps.sqrt() + c;
                    s * s
                })
            }
            InitialCondition::Custom(values) => CellField::new(grid, values.clone()),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            InitialCondition::CosineBump1d { eps, m } => format!("cosine-1d eps={eps} m={m}"),
            InitialCondition::CosineBump2d { eps, m } => format!("cosine-2d eps={eps} m={m}"),
            InitialCondition::Custom(_) => "custom".to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TraceRecord {
    pub step: usize,
    pub t: f64,
    pub mass: f64,
    pub min_u: f64,
    /// Discrete Fisher information of the state; NaN once a state leaves
    /// the positive cone (possible under the explicit scheme).
    pub energy: f64,
    pub dissipation_slack: f64,
    pub newton_iters: usize,
}

#[derive(Clone, Debug)]
pub struct RunTrace {
    pub grid: GridSpec,
    pub config: SchemeConfig,
    pub initial: String,
    pub records: Vec<TraceRecord>,
}

/// Advance from the initial condition to `t_end`, snapshotting at each
/// report time. Steps are shortened to land on report times and on `t_end`
/// exactly; the recorded `t` of a snapshot equals the request bitwise.
///
/// Each state is rescaled to the exact initial mass after every step, so the
/// mass column cannot random-walk over long trajectories.
pub fn run(
    ic: &InitialCondition,
    grid: GridSpec,
    cfg: &SchemeConfig,
    t_end: f64,
    report_times: &[f64],
) -> Result<(RunTrace, Vec<(f64, CellField)>), Error> {
    assert!(t_end > 0.0, "t_end must be positive");
    let mut wanted: Vec<f64> = report_times.to_vec();
    wanted.sort_by(f64::total_cmp);
    wanted.dedup();
    assert!(
        wanted.iter().all(|&rt| (0.0..=t_end).contains(&rt)),
        "report times must lie in [0, t_end]"
    );

    let mut u = ic.build(grid);
    let m0 = mass(&u);
    let trace_energy = |u: &CellField| energy(u, cfg.energy).unwrap_or(f64::NAN);
    let mut records = vec![TraceRecord {
        step: 0,
        t: 0.0,
        mass: m0,
        min_u: u.min(),
        energy: trace_energy(&u),
        dissipation_slack: 0.0,
        newton_iters: 0,
    }];
    let mut snapshots = Vec::new();
    let mut next = 0usize;
    if wanted.first() == Some(&0.0) {
        snapshots.push((0.0, u.clone()));
        next = 1;
    }

    let mut t = 0.0_f64;
    let mut step_index = 0usize;
    while t < t_end {
        let mut target = t_end.min(t + cfg.dt);
        if let Some(&rt) = wanted.get(next) {
            if rt > t {
                target = target.min(rt);
            }
        }
        let dt_step = target - t;
        assert!(
            dt_step > 0.0,
            "dt {:e} is below time resolution at t = {t:e}",
            cfg.dt
        );
        let step_cfg = SchemeConfig { dt: dt_step, ..*cfg };
        step_index += 1;
        let (mut u_next, report) = step(&u, &step_cfg).map_err(|source| Error::StepFailed {
            step: step_index,
            source: Box::new(source),
        })?;
        restore_mass(&mut u_next, m0);
        u = u_next;
        t = target;
        records.push(TraceRecord {
            step: step_index,
            t,
            mass: mass(&u),
            min_u: u.min(),
            energy: trace_energy(&u),
            dissipation_slack: report.dissipation_slack,
            newton_iters: report.newton_iters,
        });
        if wanted.get(next) == Some(&t) {
            snapshots.push((t, u.clone()));
            next += 1;
        }
    }

    let trace = RunTrace {
        grid,
        config: *cfg,
        initial: ic.describe(),
        records,
    };
    Ok((trace, snapshots))
}

/// Infinity norm of the scheme's local consistency defect on a manufactured
/// solution: the one-step residual of the production scheme applied to
/// samples of `u_exact`, minus the residual `u_exact` leaves in the
/// continuous equation (computed spectrally). The correction makes the
/// result vanish at first order in (h, dt) for any smooth positive
/// manufactured function, whether or not it solves the equation.
pub fn truncation_error(
    u_exact: impl Fn(f64, f64) -> f64,
    grid: GridSpec,
    dt: f64,
    t: f64,
) -> Result<f64, Error> {
    assert_eq!(grid.dim(), 1, "consistency measurement is one-dimensional");
    assert!(dt > 0.0);
    let n = grid.num_cells();
    let l = grid.l();

    let u_now = CellField::sample_1d(grid, |x| u_exact(x, t));
    let u_new = CellField::sample_1d(grid, |x| u_exact(x, t + dt));
    crate::error::ensure_strictly_positive(u_now.values())?;
    crate::error::ensure_strictly_positive(u_new.values())?;

    // Discrete side: the production scheme's one-step defect.
    let h_pot = potential(&u_new, crate::fisher::EnergyVariant::Forward)?;
    let drift = d_divergence(&edge_multiply(&edge_average(&u_now), &d_gradient(&h_pot)));

    // Continuous side on a refinement of the same cells: the equation reads
    // paritial_t u = div(u grad H) with H = -2 (Laplacian sqrt u) / sqrt u,
    // evaluated with spectral derivatives; the manufactured function's
    // defect against it is subtracted cell by cell.
    let refine = usize::max(1, 512usize.div_ceil(n));
    let nf = n * refine;
    let hf = l / nf as f64;
    let uf: Vec<f64> = (0..nf).map(|i| u_exact(i as f64 * hf, t)).collect();
    let sqrt_u: Vec<f64> = uf.iter().map(|v| v.sqrt()).collect();
    let lap_sqrt = spectral_derivative(&sqrt_u, l, 2);
    let h_cont: Vec<f64> = lap_sqrt
        .iter()
        .zip(&sqrt_u)
        .map(|(lap, s)| -2.0 * lap / s)
        .collect();
    let dh = spectral_derivative(&h_cont, l, 1);
    let flux: Vec<f64> = uf.iter().zip(&dh).map(|(u, g)| u * g).collect();
    let transport = spectral_derivative(&flux, l, 1);

    let delta = 1e-6;
    let mut worst = 0.0_f64;
    for j in 0..n {
        let x = grid.coord(j);
        let quotient = (u_new[j] - u_now[j]) / dt;
        let u_dot = (u_exact(x, t + delta) - u_exact(x, t - delta)) / (2.0 * delta);
        let defect = u_dot - transport[j * refine];
        worst = worst.max((quotient - drift[j] - defect).abs());
    }
    Ok(worst)
}

/// Periodic spectral derivative by direct DFT (the fields here are a few
/// hundred samples, so O(n^2) is immaterial). Coefficients below 1e-13 of
/// the largest are roundoff of the transform and are dropped; a constant
/// field therefore differentiates to exactly zero.
fn spectral_derivative(f: &[f64], l: f64, order: u32) -> Vec<f64> {
    assert!(order == 1 || order == 2);
    let n = f.len();
    let nf = n as f64;
    let tau = 2.0 * std::f64::consts::PI;
    let table: Vec<(f64, f64)> = (0..n)
        .map(|r| {
            let ang = tau * r as f64 / nf;
            (ang.cos(), ang.sin())
        })
        .collect();

    let mut re = vec![0.0_f64; n];
    let mut im = vec![0.0_f64; n];
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for (j, &v) in f.iter().enumerate() {
            let (c, s) = table[(j * k) % n];
            sr += v * c;
            si -= v * s;
        }
        re[k] = sr;
        im[k] = si;
    }

    let floor = re
        .iter()
        .zip(&im)
        .map(|(a, b)| a.hypot(*b))
        .fold(0.0_f64, f64::max)
        * 1e-13;
    for k in 0..n {
        if re[k].hypot(im[k]) <= floor {
            re[k] = 0.0;
            im[k] = 0.0;
            continue;
        }
        // Signed wavenumber; the Nyquist mode has no odd derivative.
        let kt = if 2 * k <= n { k as f64 } else { k as f64 - nf };
        let w = tau * kt / l;
        match order {
            1 => {
                let (r, i) = (re[k], im[k]);
                if n.is_multiple_of(2) && 2 * k == n {
                    re[k] = 0.0;
                    im[k] = 0.0;
                } else {
                    re[k] = -w * i;
                    im[k] = w * r;
                }
            }
            _ => {
                re[k] *= -w * w;
                im[k] *= -w * w;
            }
        }
    }

    (0..n)
        .map(|j| {
            let mut acc = 0.0;
            for k in 0..n {
                let (c, s) = table[(j * k) % n];
                acc += re[k] * c - im[k] * s;
            }
            acc / nf
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct ConvergenceRow {
    pub n: usize,
    pub h: f64,
    pub l2_error: f64,
    /// log2 of the previous error over this one; first row has none.
    pub order: Option<f64>,
}

/// Refine the mesh through `ns` with dt = `dt_coefficient` * h per level,
/// run each level to `t_end`, and measure every coarser solution against
/// the finest by nearest-neighbor interpolation in the L2 norm. Levels run
/// concurrently, capped by the DLSS_THREADS environment variable.
pub fn convergence_study(
    ic: &InitialCondition,
    cfg: &SchemeConfig,
    ns: &[usize],
    dt_coefficient: f64,
    t_end: f64,
) -> Result<Vec<ConvergenceRow>, Error> {
    assert!(ns.len() >= 2, "a study needs at least two levels");
    assert!(
        ns.windows(2).all(|w| w[0] < w[1]),
        "levels must be strictly increasing"
    );
    assert!(
        !matches!(ic, InitialCondition::Custom(_)),
        "a fixed field cannot be resampled across levels"
    );
    assert!(dt_coefficient > 0.0);
    let two_d = matches!(ic, InitialCondition::CosineBump2d { .. });

    let level = |n: usize| -> Result<CellField, Error> {
        let grid = if two_d {
            GridSpec::two_d(n, 1.0)
        } else {
            GridSpec::one_d(n, 1.0)
        };
        let level_cfg = SchemeConfig {
            dt: dt_coefficient * grid.h(),
            ..*cfg
        };
        let (_, mut snapshots) = run(ic, grid, &level_cfg, t_end, &[t_end])?;
        Ok(snapshots.pop().expect("final snapshot requested").1)
    };

    let mut finals: Vec<Result<CellField, Error>> = Vec::with_capacity(ns.len());
    let cap = thread_cap();
    for batch in ns.chunks(cap.max(1)) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch.iter().map(|&n| scope.spawn(move || level(n))).collect();
            for handle in handles {
                finals.push(handle.join().expect("study level panicked"));
            }
        });
    }

    let mut solutions = Vec::with_capacity(ns.len());
    for outcome in finals {
        solutions.push(outcome?);
    }
    let fine = solutions.last().expect("at least two levels");
    let rows: Vec<(usize, f64)> = solutions[..solutions.len() - 1]
        .iter()
        .zip(ns)
        .map(|(coarse, &n)| (n, nn_l2_error(coarse, fine)))
        .collect();

    Ok(rows
        .iter()
        .enumerate()
        .map(|(k, &(n, err))| ConvergenceRow {
            n,
            h: 1.0 / n as f64,
            l2_error: err,
            order: (k > 0).then(|| (rows[k - 1].1 / err).log2()),
        })
        .collect())
}

fn thread_cap() -> usize {
    std::env::var("DLSS_THREADS")
        .ok()
        .and_then(|raw| raw.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|v| v.get())
                .unwrap_or(1)
        })
}

/// L2 distance between a coarse and a fine solution of the same problem,
/// carrying the coarse values onto the fine cells by nearest neighbor and
/// weighting by the fine cell volume.
fn nn_l2_error(coarse: &CellField, fine: &CellField) -> f64 {
    let gc = coarse.grid();
    let gf = fine.grid();
    assert_eq!(gc.dim(), gf.dim());
    let nc = gc.n();
    let nf = gf.n();
    // Nearest coarse cell to fine cell i: round(i * nc / nf) on the torus.
    let nearest = |i: usize| ((2 * i * nc + nf) / (2 * nf)) % nc;
    let mut sum = crate::grid::CompensatedSum::new();
    match gf.dim() {
        1 => {
            for i in 0..nf {
                let d = coarse[nearest(i)] - fine[i];
                sum.add(d * d);
            }
            (sum.value() * gf.h()).sqrt()
        }
        _ => {
            for j in 0..nf {
                for i in 0..nf {
                    let d = coarse[gc.idx(nearest(i), nearest(j))] - fine[gf.idx(i, j)];
                    sum.add(d * d);
                }
            }
            (sum.value() * gf.h() * gf.h()).sqrt()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stepper::Scheme;

    #[test]
    fn constant_data_stays_constant_through_a_run() {
        let grid = GridSpec::one_d(10, 1.0);
        let ic = InitialCondition::Custom(vec![2.5; 10]);
        let cfg = SchemeConfig::new(Scheme::ExplicitImplicit, 1e-5);
        let (trace, snapshots) = run(&ic, grid, &cfg, 1e-4, &[0.0, 5e-5, 1e-4]).unwrap();
        assert_eq!(snapshots.len(), 3);
        for (_, snap) in &snapshots {
            for i in 0..10 {
                assert_eq!(snap[i], 2.5);
            }
        }
        for r in &trace.records {
            assert_eq!(r.energy, 0.0);
            assert_eq!(r.min_u, 2.5);
        }
    }

    #[test]
    fn report_times_are_landed_bitwise() {
        let grid = GridSpec::one_d(16, 1.0);
        let ic = InitialCondition::CosineBump1d { eps: 0.1, m: 1.0 };
        let cfg = SchemeConfig::new(Scheme::ExplicitImplicit, 1e-6);
        // 1.23e-5 is deliberately not a multiple of dt.
        let wanted = [0.0, 1.23e-5, 8e-6, 1e-4];
        let (trace, snapshots) = run(&ic, grid, &cfg, 1e-4, &wanted).unwrap();
        let times: Vec<f64> = snapshots.iter().map(|(t, _)| *t).collect();
        assert_eq!(times, vec![0.0, 8e-6, 1.23e-5, 1e-4]);
        for (t, _) in &snapshots {
            assert!(
                trace.records.iter().any(|r| r.t == *t),
                "snapshot time {t:e} missing from the trace"
            );
        }
        for pair in trace.records.windows(2) {
            assert!(pair[1].t > pair[0].t, "trace times must strictly increase");
        }
        assert_eq!(trace.records.last().unwrap().t, 1e-4);
    }

    #[test]
    fn trace_invariants_hold_on_a_sharp_bump() {
        let grid = GridSpec::one_d(32, 1.0);
        let ic = InitialCondition::CosineBump1d { eps: 0.001, m: 8.0 };
        let cfg = SchemeConfig::new(Scheme::ExplicitImplicit, 1e-6);
        let (trace, _) = run(&ic, grid, &cfg, 5e-5, &[]).unwrap();
        let m0 = trace.records[0].mass;
        let f0 = trace.records[0].energy;
        let allowance = 1e-9 * f0.max(1.0);
        let mut prev_energy = f64::INFINITY;
        for r in &trace.records {
            assert!((r.mass - m0).abs() <= 1e-12 * m0, "mass drifted at step {}", r.step);
            assert!(r.min_u > 0.0, "positivity lost at step {}", r.step);
            assert!(r.energy <= prev_energy, "energy rose at step {}", r.step);
            assert!(r.dissipation_slack <= allowance, "slack {:e} at step {}", r.dissipation_slack, r.step);
            prev_energy = r.energy;
        }
        assert!(trace.records.len() > 50);
    }

    #[test]
    fn failures_carry_the_step_index() {
        let grid = GridSpec::one_d(16, 1.0);
        let ic = InitialCondition::CosineBump1d { eps: 0.001, m: 8.0 };
        // Large explicit steps push the state negative on the first step;
        // the second step then rejects its input.
        let cfg = SchemeConfig::new(Scheme::Explicit, 1e-5);
        match run(&ic, grid, &cfg, 1e-3, &[]) {
            Err(Error::StepFailed { step, source }) => {
                assert_eq!(step, 2);
                assert!(matches!(*source, Error::NonPositiveState { .. }));
            }
            other => panic!("expected a step failure, got {other:?}"),
        }
    }

    #[test]
    fn consistency_defect_vanishes_for_constants() {
        let grid = GridSpec::one_d(16, 1.0);
        let tau = truncation_error(|_, _| 3.7, grid, 1e-5, 0.5).unwrap();
        assert_eq!(tau, 0.0);
    }

    #[test]
    fn consistency_defect_halves_with_the_resolution() {
        let manufactured =
            |x: f64, t: f64| 2.0 + (2.0 * std::f64::consts::PI * x).cos() * (-t).exp();
        let mut prev = f64::NAN;
        for k in 0..3 {
            let n = 16 << k;
            let dt = 1e-5 / f64::powi(2.0, k);
            let tau = truncation_error(manufactured, GridSpec::one_d(n, 1.0), dt, 0.5).unwrap();
            if k > 0 {
                let ratio = prev / tau;
                assert!(
                    (1.6..=2.4).contains(&ratio),
                    "halving (h, dt) should halve tau, got {ratio}"
                );
            }
            prev = tau;
        }
    }

    #[test]
    fn consistency_defect_is_one_homogeneous() {
        let manufactured =
            |x: f64, t: f64| 2.0 + (2.0 * std::f64::consts::PI * x).cos() * (-t).exp();
        let grid = GridSpec::one_d(32, 1.0);
        let base = truncation_error(manufactured, grid, 1e-5, 0.5).unwrap();
        let scaled =
            truncation_error(|x, t| 2.0 * manufactured(x, t), grid, 1e-5, 0.5).unwrap();
        assert!(
            (scaled - 2.0 * base).abs() <= 1e-3 * base,
            "doubling the state should double tau: {scaled} vs 2 * {base}"
        );
    }

    #[test]
    fn spectral_derivative_matches_closed_forms() {
        let n = 64;
        let tau = 2.0 * std::f64::consts::PI;
        let f: Vec<f64> = (0..n).map(|i| (tau * i as f64 / n as f64).sin()).collect();
        let d1 = spectral_derivative(&f, 1.0, 1);
        let d2 = spectral_derivative(&f, 1.0, 2);
        for i in 0..n {
            let x = i as f64 / n as f64;
            assert!((d1[i] - tau * (tau * x).cos()).abs() <= 1e-10);
            assert!((d2[i] + tau * tau * (tau * x).sin()).abs() <= 1e-8);
        }
    }

    #[test]
    fn study_errors_shrink_with_refinement() {
        let ic = InitialCondition::CosineBump1d { eps: 0.1, m: 1.0 };
        let cfg = SchemeConfig::new(Scheme::ExplicitImplicit, 1.0);
        let rows = convergence_study(&ic, &cfg, &[8, 16, 32], 1.6e-4, 1e-5).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].n, 8);
        assert_eq!(rows[1].n, 16);
        assert!(rows[0].order.is_none());
        assert!(rows[1].order.is_some());
        assert!(
            rows[1].l2_error < rows[0].l2_error,
            "refinement must shrink the error: {rows:?}"
        );
    }

    #[test]
    fn nearest_neighbor_error_of_identical_profiles_is_zero_ish() {
        // A y-constant 2D profile sampled at two resolutions where every
        // fine cell has an exactly matching coarse cell.
        let coarse = CellField::sample_2d(GridSpec::two_d(8, 1.0), |x, _| {
            2.0 + (2.0 * std::f64::consts::PI * x).cos()
        });
        let fine = CellField::sample_2d(GridSpec::two_d(16, 1.0), |x, _| {
            2.0 + (2.0 * std::f64::consts::PI * x).cos()
        });
        let err = nn_l2_error(&coarse, &fine);
        // Half the fine cells sit between coarse cells, so the error is the
        // interpolation defect of the profile, not zero; it must be well
        // below the profile scale.
        assert!(err < 0.2, "unexpected interpolation error {err}");
        let self_err = nn_l2_error(&fine, &fine);
        assert_eq!(self_err, 0.0);
    }
}
