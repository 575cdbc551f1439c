//! The four time-stepping schemes, all sharing the conservative transport
//! form `(u_next - u_n)/dt = d_h(mobility .* D_h H)` with H the chemical
//! potential from [`crate::fisher`]:
//!
//! - `Explicit`: mobility and H both frozen at u_n; cheap, no positivity or
//!   energy guarantee.
//! - `FullyImplicit`: mobility and H both at u_next; energy decreasing when
//!   the Newton solve lands positive, but positivity is not guaranteed.
//! - `ExplicitImplicit`: mobility frozen at the edge average of u_n, H at
//!   u_next. Unconditionally positive and energy stable; the production
//!   scheme.
//! - `LinearM`: one linear solve against a frozen log-mobility; positive for
//!   every dt by an M-matrix argument.
//!
//! Every step conserves mass by its divergence form; on top of that each
//! returned state is rescaled multiplicatively to the exact input mass, so
//! roundoff can never accumulate across long trajectories. The rescale is
//! multiplicative deliberately: near-vacuum cells (down at 1e-100 and below
//! under `LinearM`) keep their sign and relative size, which an additive
//! shift would destroy.

use crate::elliptic::WeightedLaplacian;
use crate::error::{ensure_strictly_positive, Error};
use crate::fisher::{energy, hessian_apply, potential, EnergyVariant};
use crate::grid::{
    d_divergence, d_gradient, edge_average, edge_multiply, for_each_edge, mass, CellField,
    EdgeField,
};
use crate::newton::{solve_step_residual, NewtonConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Explicit,
    FullyImplicit,
    LinearM,
    ExplicitImplicit,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Explicit => "explicit",
            Scheme::FullyImplicit => "fully-implicit",
            Scheme::LinearM => "linear-m",
            Scheme::ExplicitImplicit => "explicit-implicit",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub energy: EnergyVariant,
    pub newton: NewtonConfig,
    /// Halve dt and recurse (up to 6 times) when the nonlinear solve fails.
    pub substep_on_failure: bool,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme, dt: f64) -> Self {
        assert!(dt.is_finite() && dt > 0.0, "time step must be positive, got {dt}");
        Self {
            scheme,
            dt,
            energy: EnergyVariant::default(),
            newton: NewtonConfig::default(),
            substep_on_failure: true,
        }
    }

    fn halved(&self) -> Self {
        Self { dt: 0.5 * self.dt, ..*self }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    /// Newton iterations spent (summed over substeps); 0 for linear schemes.
    pub newton_iters: usize,
    /// Final nonlinear (or linear) residual in the infinity norm.
    pub residual: f64,
    /// Elementary steps actually taken; 1 unless substepping kicked in.
    pub substeps_taken: usize,
    /// F(u_next) + inv_norm_sq(u_next - u_n)/dt - F(u_n), the discrete
    /// energy-law slack, weighted by the edge average of u_n. At most zero
    /// (up to solver tolerance) for ExplicitImplicit; NaN when the returned
    /// state has a nonpositive cell.
    pub dissipation_slack: f64,
    /// Whether every cell of the returned state is strictly positive.
    pub state_positive: bool,
}

const MAX_HALVINGS: usize = 6;

/// Advance one step with the configured scheme.
pub fn step(u_n: &CellField, cfg: &SchemeConfig) -> Result<(CellField, StepReport), Error> {
    match cfg.scheme {
        Scheme::Explicit => step_explicit(u_n, cfg),
        Scheme::FullyImplicit => step_fully_implicit(u_n, cfg),
        Scheme::LinearM => step_linear_m(u_n, cfg),
        Scheme::ExplicitImplicit => step_explicit_implicit(u_n, cfg),
    }
}

/// d_h(weight .* D_h f): the conservative transport term of every scheme.
fn flux_divergence(weight: &EdgeField, f: &CellField) -> CellField {
    d_divergence(&edge_multiply(weight, &d_gradient(f)))
}

pub(crate) fn restore_mass(u: &mut CellField, target: f64) {
    let m = mass(u);
    if m.is_finite() && m > 0.0 && target.is_finite() && target > 0.0 {
        let scale = target / m;
        for v in u.values_mut() {
            *v *= scale;
        }
    }
}

/// Energy-law slack diagnostic; NaN when the new state left the positive
/// cone (its energy is undefined there).
fn dissipation_slack(
    u_n: &CellField,
    u_next: &CellField,
    mobility: EdgeField,
    dt: f64,
    variant: EnergyVariant,
) -> Result<f64, Error> {
    if !(u_next.min() > 0.0) {
        return Ok(f64::NAN);
    }
    let f_old = energy(u_n, variant)?;
    let f_new = energy(u_next, variant)?;
    let lap = WeightedLaplacian::new(mobility)?;
    let mut diff = CellField::new(
        u_n.grid(),
        u_next.values().iter().zip(u_n.values()).map(|(a, b)| a - b).collect(),
    );
    // Mass conservation keeps the difference mean-zero up to roundoff, but
    // the metric solve rejects even that much; project it out exactly.
    let stray = diff.mean();
    for v in diff.values_mut() {
        *v -= stray;
    }
    let metric = lap.inv_norm_sq(&diff, 1e-12)?;
    Ok(f_new + metric / dt - f_old)
}

pub fn step_explicit(u_n: &CellField, cfg: &SchemeConfig) -> Result<(CellField, StepReport), Error> {
    assert_eq!(cfg.scheme, Scheme::Explicit);
    ensure_strictly_positive(u_n.values())?;
    let mobility = edge_average(u_n);
    let h = potential(u_n, cfg.energy)?;
    let drift = flux_divergence(&mobility, &h);
    let mut u_next = CellField::new(
        u_n.grid(),
        u_n.values()
            .iter()
            .zip(drift.values())
            .map(|(u, d)| u + cfg.dt * d)
            .collect(),
    );
    restore_mass(&mut u_next, mass(u_n));
    let state_positive = u_next.min() > 0.0;
    let slack = dissipation_slack(u_n, &u_next, mobility, cfg.dt, cfg.energy)?;
    let report = StepReport {
        newton_iters: 0,
        residual: 0.0,
        substeps_taken: 1,
        dissipation_slack: slack,
        state_positive,
    };
    Ok((u_next, report))
}

pub fn step_explicit_implicit(
    u_n: &CellField,
    cfg: &SchemeConfig,
) -> Result<(CellField, StepReport), Error> {
    assert_eq!(cfg.scheme, Scheme::ExplicitImplicit);
    implicit_step(u_n, cfg, 0, false)
}

pub fn step_fully_implicit(
    u_n: &CellField,
    cfg: &SchemeConfig,
) -> Result<(CellField, StepReport), Error> {
    assert_eq!(cfg.scheme, Scheme::FullyImplicit);
    implicit_step(u_n, cfg, 0, true)
}

/// Shared driver for the two Newton-based schemes. `live_mobility` selects
/// the fully implicit variant, whose mobility follows the unknown.
fn implicit_step(
    u_n: &CellField,
    cfg: &SchemeConfig,
    depth: usize,
    live_mobility: bool,
) -> Result<(CellField, StepReport), Error> {
    ensure_strictly_positive(u_n.values())?;
    let dt = cfg.dt;
    let frozen = edge_average(u_n);

    let residual = |u: &CellField| -> Result<CellField, Error> {
        let h = potential(u, cfg.energy)?;
        let drift = if live_mobility {
            flux_divergence(&edge_average(u), &h)
        } else {
            flux_divergence(&frozen, &h)
        };
        Ok(CellField::new(
            u.grid(),
            u.values()
                .iter()
                .zip(u_n.values())
                .zip(drift.values())
                .map(|((u_i, n_i), d_i)| u_i - n_i - dt * d_i)
                .collect(),
        ))
    };
    let jacobian = |u: &CellField, w: &CellField| -> Result<CellField, Error> {
        let hw = hessian_apply(u, w, cfg.energy)?;
        let mut jw = if live_mobility {
            let h = potential(u, cfg.energy)?;
            let through_mobility = flux_divergence(&edge_average(w), &h);
            let through_h = flux_divergence(&edge_average(u), &hw);
            CellField::new(
                u.grid(),
                through_mobility
                    .values()
                    .iter()
                    .zip(through_h.values())
                    .map(|(a, b)| a + b)
                    .collect(),
            )
        } else {
            flux_divergence(&frozen, &hw)
        };
        for (out, w_i) in jw.values_mut().iter_mut().zip(w.values()) {
            *out = w_i - dt * *out;
        }
        Ok(jw)
    };

    match solve_step_residual(u_n, residual, jacobian, &cfg.newton) {
        Ok(out) => {
            let mut u_next = out.state;
            restore_mass(&mut u_next, mass(u_n));
            let state_positive = u_next.min() > 0.0;
            let slack = dissipation_slack(u_n, &u_next, frozen, dt, cfg.energy)?;
            let report = StepReport {
                newton_iters: out.iterations,
                residual: out.residual_norm,
                substeps_taken: 1,
                dissipation_slack: slack,
                state_positive,
            };
            Ok((u_next, report))
        }
        Err(_) if cfg.substep_on_failure && depth < MAX_HALVINGS => {
            let half = cfg.halved();
            let (mid, r1) = implicit_step(u_n, &half, depth + 1, live_mobility)?;
            let (mut u_next, r2) = implicit_step(&mid, &half, depth + 1, live_mobility)?;
            restore_mass(&mut u_next, mass(u_n));
            let state_positive = u_next.min() > 0.0;
            let slack = dissipation_slack(u_n, &u_next, frozen, dt, cfg.energy)?;
            let report = StepReport {
                newton_iters: r1.newton_iters + r2.newton_iters,
                residual: r1.residual.max(r2.residual),
                substeps_taken: r1.substeps_taken + r2.substeps_taken,
                dissipation_slack: slack,
                state_positive,
            };
            Ok((u_next, report))
        }
        Err(err) => Err(err),
    }
}

pub fn step_linear_m(u_n: &CellField, cfg: &SchemeConfig) -> Result<(CellField, StepReport), Error> {
    assert_eq!(cfg.scheme, Scheme::LinearM);
    ensure_strictly_positive(u_n.values())?;
    let grid = u_n.grid();
    let nc = grid.num_cells();
    let dt = cfg.dt;

    // The scheme solves (I + dt L_{M-hat} diag(1/M)) u_next = u_n with
    // log-mobility lambda = ln M = ln u_n + H (any constant shift of H
    // cancels, since only differences of lambda enter). Working with the
    // per-edge exponentials exp(lambda_q - lambda_p) sidesteps forming M
    // itself, whose entries would overflow or underflow at sharp minima.
    let h = potential(u_n, cfg.energy)?;
    let lambda: Vec<f64> = u_n
        .values()
        .iter()
        .zip(h.values())
        .map(|(u, h_i)| u.ln() + h_i)
        .collect();
    let ratio = dt / (grid.h() * grid.h());

    // Entries of the system reach ratio/2 * exp(gap); refuse while both the
    // exponential and the entry are still clear of overflow, with headroom
    // for pivot growth. Deliberately no row scaling here: equalizing row
    // maxima would push the near-unit diagonal of a collapsing cell's
    // neighbors below epsilon of their row, losing it. Partial pivoting
    // handles the raw magnitudes benignly (the huge entries share a column
    // whose pivot dominates them, so multipliers stay bounded).
    let mut max_gap = 0.0_f64;
    for_each_edge(grid, |p, q| {
        max_gap = max_gap.max((lambda[q] - lambda[p]).abs());
    });
    if max_gap > 700.0 || max_gap + (0.5 * ratio).max(1.0).ln() > 690.0 {
        return Err(Error::LinearSolveFailure {
            reason: format!("log-mobility gap {max_gap:.1} overflows the edge exponentials"),
        });
    }

    let mut b = nalgebra::DMatrix::<f64>::identity(nc, nc);
    for_each_edge(grid, |p, q| {
        let gap = lambda[q] - lambda[p];
        // M-hat/M_p and M-hat/M_q for the arithmetic edge mean of M.
        let wp = ratio * 0.5 * (1.0 + gap.exp());
        let wq = ratio * 0.5 * (1.0 + (-gap).exp());
        b[(p, p)] += wp;
        b[(q, q)] += wq;
        b[(p, q)] -= wq;
        b[(q, p)] -= wp;
    });
    let rhs = nalgebra::DVector::<f64>::from_column_slice(u_n.values());
    let solved = b.lu().solve(&rhs).ok_or(Error::LinearSolveFailure {
        reason: "mobility system is singular".into(),
    })?;
    let mut u_next = CellField::new(grid, solved.iter().copied().collect());

    // Componentwise relative residual of the solved system, recomputed from
    // the edge structure rather than the consumed matrix. Row magnitudes
    // span hundreds of orders, so each row is measured against its own
    // |B| |u| + |u_n| scale.
    let mut num: Vec<f64> = u_next
        .values()
        .iter()
        .zip(u_n.values())
        .map(|(u, n)| u - n)
        .collect();
    let mut den: Vec<f64> = u_next
        .values()
        .iter()
        .zip(u_n.values())
        .map(|(u, n)| u.abs() + n.abs())
        .collect();
    {
        let v = u_next.values();
        for_each_edge(grid, |p, q| {
            let gap = lambda[q] - lambda[p];
            let wp = ratio * 0.5 * (1.0 + gap.exp());
            let wq = ratio * 0.5 * (1.0 + (-gap).exp());
            num[p] += wp * v[p] - wq * v[q];
            num[q] += wq * v[q] - wp * v[p];
            let spread = wp * v[p].abs() + wq * v[q].abs();
            den[p] += spread;
            den[q] += spread;
        });
    }
    let residual = num
        .iter()
        .zip(&den)
        .map(|(n, d)| n.abs() / d.max(f64::MIN_POSITIVE))
        .fold(0.0_f64, f64::max);

    restore_mass(&mut u_next, mass(u_n));
    let state_positive = u_next.min() > 0.0;
    let slack = dissipation_slack(u_n, &u_next, edge_average(u_n), dt, cfg.energy)?;
    let report = StepReport {
        newton_iters: 0,
        residual,
        substeps_taken: 1,
        dissipation_slack: slack,
        state_positive,
    };
    Ok((u_next, report))
}
