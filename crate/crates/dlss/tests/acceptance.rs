//! The eight release gates, each printing one pass/fail line. The three
//! reference trajectories are shared across gates through lazy statics, so
//! the expensive runs happen once regardless of test order.
//!
//! Run with `--nocapture` to see the lines for passing gates too.

use std::sync::OnceLock;

use dlss::elliptic::WeightedLaplacian;
use dlss::fisher::{energy, hessian_apply, potential, EnergyVariant};
use dlss::grid::{
    cell_inner, d_divergence, d_gradient, edge_inner, CellField, EdgeField, GridSpec,
};
use dlss::lab::{self, InitialCondition, RunTrace};
use dlss::newton::{minimize_j, BarrierConfig};
use dlss::stepper::{step, Scheme, SchemeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Reference {
    name: &'static str,
    trace: RunTrace,
}

fn reference_run(
    name: &'static str,
    ic: InitialCondition,
    grid: GridSpec,
    report: &[f64],
) -> Reference {
    let cfg = SchemeConfig::new(Scheme::ExplicitImplicit, 1e-7);
    let (trace, _) = lab::run(&ic, grid, &cfg, 7.2e-4, report).expect(name);
    Reference { name, trace }
}

fn fig2_m1() -> &'static Reference {
    static RUN: OnceLock<Reference> = OnceLock::new();
    RUN.get_or_init(|| {
        reference_run(
            "fig2-m1",
            InitialCondition::CosineBump1d { eps: 0.001, m: 1.0 },
            GridSpec::one_d(100, 1.0),
            &lab::DEFAULT_REPORT_TIMES,
        )
    })
}

fn fig2_m8() -> &'static Reference {
    static RUN: OnceLock<Reference> = OnceLock::new();
    RUN.get_or_init(|| {
        reference_run(
            "fig2-m8",
            InitialCondition::CosineBump1d { eps: 0.001, m: 8.0 },
            GridSpec::one_d(100, 1.0),
            &lab::DEFAULT_REPORT_TIMES,
        )
    })
}

fn fig4_2d() -> &'static Reference {
    static RUN: OnceLock<Reference> = OnceLock::new();
    RUN.get_or_init(|| {
        reference_run(
            "fig4-2d",
            InitialCondition::CosineBump2d { eps: 0.001, m: 8.0 },
            GridSpec::two_d(64, 1.0),
            &[0.0, 8e-6, 3.2e-5, 7.2e-4],
        )
    })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

#[test]
fn gate_1_mass_is_conserved_across_the_reference_run() {
    let trace = &fig2_m8().trace;
    let m0 = trace.records[0].mass;
    let drift = trace
        .records
        .iter()
        .map(|r| ((r.mass - m0) / m0).abs())
        .fold(0.0_f64, f64::max);
    let ok = drift <= 1e-12;
    println!(
        "acceptance 1 mass-conservation: {} (max relative drift {drift:.3e} over {} steps, allowance 1e-12)",
        verdict(ok),
        trace.records.len() - 1
    );
    assert!(ok, "mass drifted by {drift:e}");
}

#[test]
fn gate_2_iterates_stay_positive() {
    let mut worst = f64::INFINITY;
    for reference in [fig2_m1(), fig2_m8(), fig4_2d()] {
        for r in &reference.trace.records {
            assert!(
                r.min_u > 0.0,
                "{} lost positivity at step {}",
                reference.name,
                r.step
            );
            worst = worst.min(r.min_u);
        }
    }

    // The frozen-mobility scheme claims positivity for arbitrary dt; take
    // single steps of each reference configuration at hostile step sizes.
    let mut frozen_worst = f64::INFINITY;
    let configs: [(&str, InitialCondition, GridSpec); 3] = [
        (
            "fig2-m1",
            InitialCondition::CosineBump1d { eps: 0.001, m: 1.0 },
            GridSpec::one_d(100, 1.0),
        ),
        (
            "fig2-m8",
            InitialCondition::CosineBump1d { eps: 0.001, m: 8.0 },
            GridSpec::one_d(100, 1.0),
        ),
        (
            "fig4-2d",
            InitialCondition::CosineBump2d { eps: 0.001, m: 8.0 },
            GridSpec::two_d(64, 1.0),
        ),
    ];
    for (name, ic, grid) in configs {
        let u0 = ic.build(grid);
        for dt in [1e-4, 1e-2, 1.0] {
            let cfg = SchemeConfig::new(Scheme::LinearM, dt);
            let (next, _) = step(&u0, &cfg)
                .unwrap_or_else(|e| panic!("{name} frozen-mobility step at dt {dt:e}: {e}"));
            let m = next.min();
            assert!(m > 0.0, "{name} dt {dt:e}: min {m:e}");
            frozen_worst = frozen_worst.min(m);
        }
    }
    println!(
        "acceptance 2 positivity: PASS (trajectory min {worst:.3e}; frozen-mobility single-step min {frozen_worst:.3e}, representable and positive)"
    );
}

#[test]
fn gate_3_energy_dissipates_with_bounded_slack() {
    for reference in [fig2_m1(), fig2_m8(), fig4_2d()] {
        let records = &reference.trace.records;
        let allowance = 1e-9 * records[0].energy.max(1.0);
        let mut worst_slack = f64::NEG_INFINITY;
        for pair in records.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            assert!(
                next.energy <= prev.energy,
                "{} energy rose at step {}: {:e} -> {:e}",
                reference.name,
                next.step,
                prev.energy,
                next.energy
            );
            assert!(
                next.dissipation_slack <= allowance,
                "{} slack {:e} above {allowance:e} at step {}",
                reference.name,
                next.dissipation_slack,
                next.step
            );
            worst_slack = worst_slack.max(next.dissipation_slack);
        }
        println!(
            "acceptance 3 energy-dissipation [{}]: PASS (worst slack {worst_slack:.3e} vs allowance {allowance:.3e}, energy nonincreasing)",
            reference.name
        );
    }
}

#[test]
fn gate_4_implicit_step_matches_the_variational_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0_f64;
    let mut cases = 0;
    for instance in 0..5 {
        for dim in [1, 2] {
            let grid = if dim == 1 {
                GridSpec::one_d(8, 1.0)
            } else {
                GridSpec::two_d(6, 1.0)
            };
            let u_n = CellField::new(
                grid,
                (0..grid.num_cells())
                    .map(|_| rng.gen_range(0.5..2.0))
                    .collect(),
            );
            for dt in [1e-6, 1e-4] {
                let mut cfg = SchemeConfig::new(Scheme::ExplicitImplicit, dt);
                cfg.newton.tol = 1e-12;
                let (stepped, _) = step(&u_n, &cfg)
                    .unwrap_or_else(|e| panic!("instance {instance} dim {dim} dt {dt:e}: {e}"));
                let minimized =
                    minimize_j(&u_n, dt, cfg.energy, &BarrierConfig::default()).unwrap();
                let gap = stepped
                    .values()
                    .iter()
                    .zip(minimized.values())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0_f64, f64::max);
                worst = worst.max(gap);
                cases += 1;
            }
        }
    }
    let ok = worst <= 1e-8;
    println!(
        "acceptance 4 scheme-equals-minimizer: {} (max infinity-norm gap {worst:.3e} over {cases} instances, allowance 1e-8)",
        verdict(ok)
    );
    assert_eq!(cases, 20);
    assert!(ok, "worst gap {worst:e}");
}

#[test]
fn gate_5_errors_shrink_at_first_order_under_refinement() {
    let ic = InitialCondition::CosineBump1d { eps: 0.001, m: 1.0 };
    let cfg = SchemeConfig::new(Scheme::ExplicitImplicit, 1.0);
    let rows = lab::convergence_study(&ic, &cfg, &[10, 20, 40, 80], 1.6e-6, 7.2e-4).unwrap();
    let mut ok = true;
    for pair in rows.windows(2) {
        ok &= pair[1].l2_error < pair[0].l2_error;
    }
    let orders: Vec<f64> = rows.iter().filter_map(|r| r.order).collect();
    for &p in &orders {
        ok &= (0.7..=1.3).contains(&p);
    }
    let summary: Vec<String> = rows
        .iter()
        .map(|r| match r.order {
            Some(p) => format!("n={} e={:.3e} p={:.2}", r.n, r.l2_error, p),
            None => format!("n={} e={:.3e}", r.n, r.l2_error),
        })
        .collect();
    println!(
        "acceptance 5 convergence-order: {} ({}; orders within [0.7, 1.3], errors decreasing)",
        verdict(ok),
        summary.join(", ")
    );
    assert!(ok, "rows: {rows:?}");
}

/// The reference refinement protocol with dt = 1.6e-8 h and a 160-cell
/// finest level takes several hours; opt in with `--ignored`.
#[test]
#[ignore]
fn gate_5_reference_protocol_confirms_first_order() {
    let ic = InitialCondition::CosineBump1d { eps: 0.001, m: 1.0 };
    let cfg = SchemeConfig::new(Scheme::ExplicitImplicit, 1.0);
    let rows =
        lab::convergence_study(&ic, &cfg, &[10, 20, 40, 80, 160], 1.6e-8, 7.2e-4).unwrap();
    let mut ok = true;
    for pair in rows.windows(2) {
        ok &= pair[1].l2_error < pair[0].l2_error;
    }
    for p in rows.iter().filter_map(|r| r.order) {
        ok &= (0.8..=1.2).contains(&p);
    }
    println!(
        "acceptance 5b reference-protocol convergence: {} ({rows:?})",
        verdict(ok)
    );
    assert!(ok, "rows: {rows:?}");
}

#[test]
fn gate_6_defect_ratios_halve_with_resolution() {
    let manufactured = |x: f64, t: f64| 2.0 + (2.0 * std::f64::consts::PI * x).cos() * (-t).exp();
    let mut taus = Vec::new();
    for level in 0..5 {
        let n = 16 << level;
        let dt = 1e-5 / f64::powi(2.0, level);
        let tau = lab::truncation_error(manufactured, GridSpec::one_d(n, 1.0), dt, 0.5).unwrap();
        taus.push(tau);
    }
    let ratios: Vec<f64> = taus.windows(2).map(|w| w[0] / w[1]).collect();
    let ok = ratios.iter().all(|r| (1.7..=2.3).contains(r));
    println!(
        "acceptance 6 consistency: {} (defect ratios {:?} within [1.7, 2.3] over four halvings)",
        verdict(ok),
        ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    assert!(ok, "ratios {ratios:?}");
}

#[test]
fn gate_7_two_dimensional_minimum_dips_then_recovers() {
    let records = &fig4_2d().trace.records;
    let raw: Vec<f64> = records.iter().map(|r| r.min_u).collect();
    assert!(raw.iter().all(|&m| m > 0.0), "minimum left the positive cone");

    // Moving average, then count descent-to-ascent turns; the profile must
    // fall, turn exactly once in the interior, and rise to the end. The raw
    // series wobbles on a <= 70-row scale where the discrete minimum hops
    // between cells, while the macro dip spans hundreds of rows, so any
    // window between those scales isolates the single turn; 101 sits in the
    // middle of that plateau.
    let window = 101;
    let smoothed: Vec<f64> = raw
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    let mut turns = 0usize;
    let mut direction = -1i8;
    for pair in smoothed.windows(2) {
        let d = pair[1] - pair[0];
        if d == 0.0 {
            continue;
        }
        let sign = if d > 0.0 { 1 } else { -1 };
        if direction == -1 && sign == 1 {
            turns += 1;
        }
        direction = sign;
    }
    let start_falls = smoothed[1] < smoothed[0];
    let end_rises = smoothed[smoothed.len() - 1] > smoothed[smoothed.len() - 2];
    let ok = turns == 1 && start_falls && end_rises;
    let floor = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "acceptance 7 two-dimensional minimum profile: {} (single interior turn, floor {floor:.3e} > 0)",
        verdict(ok)
    );
    assert!(ok, "turns {turns}, start_falls {start_falls}, end_rises {end_rises}");
}

#[test]
fn gate_8_operator_identities_hold_over_random_ensembles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1729);
    let cases = 120;

    let random_grid = |rng: &mut ChaCha8Rng, max_n: usize| -> GridSpec {
        if rng.gen_bool(0.5) {
            GridSpec::one_d(rng.gen_range(3..=max_n), 1.0)
        } else {
            GridSpec::two_d(rng.gen_range(3..=max_n.min(10)), 1.0)
        }
    };
    let random_cells = |rng: &mut ChaCha8Rng, grid: GridSpec, lo: f64, hi: f64| -> CellField {
        CellField::new(
            grid,
            (0..grid.num_cells()).map(|_| rng.gen_range(lo..hi)).collect(),
        )
    };
    let random_edges = |rng: &mut ChaCha8Rng, grid: GridSpec, lo: f64, hi: f64| -> EdgeField {
        if grid.dim() == 1 {
            EdgeField::new(
                grid,
                (0..grid.n()).map(|_| rng.gen_range(lo..hi)).collect(),
                Vec::new(),
            )
        } else {
            EdgeField::new(
                grid,
                (0..grid.num_cells()).map(|_| rng.gen_range(lo..hi)).collect(),
                (0..grid.num_cells()).map(|_| rng.gen_range(lo..hi)).collect(),
            )
        }
    };
    let variants = |dim: usize| {
        EnergyVariant::ALL
            .into_iter()
            .filter(move |&v| dim == 1 || v != EnergyVariant::Central)
    };

    let mut worst_sbp = 0.0_f64;
    for _ in 0..cases {
        let grid = random_grid(&mut rng, 24);
        let f = random_cells(&mut rng, grid, -5.0, 5.0);
        let g = random_edges(&mut rng, grid, -5.0, 5.0);
        let lhs = cell_inner(&f, &d_divergence(&g));
        let rhs = -edge_inner(&d_gradient(&f), &g);
        let defect = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);
        worst_sbp = worst_sbp.max(defect);
    }

    let mut worst_grad = 0.0_f64;
    for _ in 0..cases {
        let grid = random_grid(&mut rng, 16);
        let u = random_cells(&mut rng, grid, 0.5, 5.0);
        let vol = grid.cell_volume();
        for v in variants(grid.dim()) {
            let h_field = potential(&u, v).unwrap();
            for _ in 0..3 {
                let i = rng.gen_range(0..grid.num_cells());
                let eps = 1e-6 * u[i];
                let mut up = u.clone();
                up[i] += eps;
                let mut dn = u.clone();
                dn[i] -= eps;
                let fd = (energy(&up, v).unwrap() - energy(&dn, v).unwrap()) / (2.0 * eps);
                let defect = (vol * h_field[i] - fd).abs() / fd.abs().max(1.0);
                worst_grad = worst_grad.max(defect);
            }
        }
    }

    let mut worst_solve = 0.0_f64;
    for _ in 0..cases {
        let grid = random_grid(&mut rng, 8);
        let weight = random_edges(&mut rng, grid, 0.1, 10.0);
        let lap = WeightedLaplacian::new(weight).unwrap();
        let mut g = random_cells(&mut rng, grid, -3.0, 3.0);
        let m = g.mean();
        for x in g.values_mut() {
            *x -= m;
        }
        let iterative = lap.solve(&g, 1e-13).unwrap();
        let dense = lap.solve_dense(&g).unwrap();
        let scale = dense.norm_inf().max(1.0);
        for i in 0..grid.num_cells() {
            worst_solve = worst_solve.max((iterative[i] - dense[i]).abs() / scale);
        }
    }

    let mut worst_sym = 0.0_f64;
    for _ in 0..cases {
        let grid = random_grid(&mut rng, 16);
        let u = random_cells(&mut rng, grid, 0.5, 5.0);
        let w1 = random_cells(&mut rng, grid, -1.0, 1.0);
        let w2 = random_cells(&mut rng, grid, -1.0, 1.0);
        for v in variants(grid.dim()) {
            let lhs = cell_inner(&hessian_apply(&u, &w1, v).unwrap(), &w2);
            let rhs = cell_inner(&w1, &hessian_apply(&u, &w2, v).unwrap());
            worst_sym = worst_sym.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
        }
    }

    let ok = worst_sbp <= 1e-12 && worst_grad <= 1e-6 && worst_solve <= 1e-10 && worst_sym <= 1e-10;
    println!(
        "acceptance 8 operator-suite: {} ({cases} cases each: sbp {worst_sbp:.3e} <= 1e-12, gradient {worst_grad:.3e} <= 1e-6, cg-vs-dense {worst_solve:.3e} <= 1e-10, hessian-symmetry {worst_sym:.3e} <= 1e-10)",
        verdict(ok)
    );
    assert!(ok);
}
