//! Nonlinear solvers.
//!
//! [`solve_step_residual`] is the production damped-Newton iteration behind
//! the implicit schemes: full steps with a halving line search that accepts
//! only strictly positive iterates with decreasing residual. The Newton
//! systems are solved by dense LU on small grids and by matrix-free BiCGStab
//! above the dense cutoff; the Jacobian is only ever needed as an operator.
//!
//! [`minimize_j`] is an independent cross-check. The implicit-explicit step
//! is equivalently the minimizer of the strictly convex objective
//! `J(u) = ||u - u_n||^2_{L^-1} / (2 dt) + F(u)` over positive fields of
//! fixed mass, and this module minimizes J directly with a logarithmic
//! barrier and path continuation, sharing no code with the Newton path
//! beyond the operator definitions themselves.

use crate::elliptic::WeightedLaplacian;
use crate::error::Error;
use crate::fisher::{energy, hessian_apply, potential, EnergyVariant};
use crate::grid::{edge_average, mass, neumaier_sum, CellField};

#[derive(Clone, Copy, Debug)]
pub struct NewtonConfig {
    /// Infinity-norm residual target.
    pub tol: f64,
    pub max_iters: usize,
    /// Smallest line-search damping factor before giving up.
    pub min_damping: f64,
    /// Trial iterates must keep min(u) at or above margin * min(current u).
    pub positivity_margin: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 50,
            min_damping: 2f64.powi(-20),
            positivity_margin: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NewtonOutcome {
    pub state: CellField,
    pub iterations: usize,
    pub residual_norm: f64,
    /// Residual norm of every accepted iterate, the initial guess first.
    pub residual_history: Vec<f64>,
}

/// Largest cell count solved by dense LU; larger systems go matrix-free.
/// 1D runs stay dense (banded-cyclic systems are small), 2D production
/// grids land on BiCGStab where the Jacobian is close to the identity.
const DENSE_NEWTON_MAX_CELLS: usize = 512;

/// Damped Newton for `residual(u) = 0` started at `u_n > 0`.
///
/// `jacobian(u, w)` must apply the exact linearization of `residual` at u to
/// the direction w. Succeeds when the infinity norm of the residual reaches
/// `cfg.tol`; every accepted iterate is strictly positive.
pub fn solve_step_residual<R, J>(
    u_n: &CellField,
    mut residual: R,
    mut jacobian: J,
    cfg: &NewtonConfig,
) -> Result<NewtonOutcome, Error>
where
    R: FnMut(&CellField) -> Result<CellField, Error>,
    J: FnMut(&CellField, &CellField) -> Result<CellField, Error>,
{
    assert!(cfg.tol > 0.0, "tolerance must be positive");
    assert!(cfg.max_iters >= 1, "need at least one iteration");
    crate::error::ensure_strictly_positive(u_n.values())?;

    let mut u = u_n.clone();
    let mut r = residual(&u)?;
    let mut rnorm = r.norm_inf();
    let mut history = vec![rnorm];
    if rnorm <= cfg.tol {
        return Ok(NewtonOutcome {
            state: u,
            iterations: 0,
            residual_norm: rnorm,
            residual_history: history,
        });
    }

    for it in 1..=cfg.max_iters {
        let delta = solve_newton_system(&u, &mut jacobian, &r, cfg.tol)?;
        let floor = cfg.positivity_margin * u.min();
        let mut alpha = 1.0;
        loop {
            let trial = CellField::new(
                u.grid(),
                u.values()
                    .iter()
                    .zip(delta.values())
                    .map(|(a, d)| a - alpha * d)
                    .collect(),
            );
            if trial.min() >= floor {
                let tr = residual(&trial)?;
                let tnorm = tr.norm_inf();
                if tnorm < rnorm || tnorm <= cfg.tol {
                    u = trial;
                    r = tr;
                    rnorm = tnorm;
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < cfg.min_damping {
                return Err(Error::LineSearchStalled { residual: rnorm });
            }
        }
        history.push(rnorm);
        if rnorm <= cfg.tol {
            return Ok(NewtonOutcome {
                state: u,
                iterations: it,
                residual_norm: rnorm,
                residual_history: history,
            });
        }
    }
    Err(Error::NoConvergence { iterations: cfg.max_iters, residual: rnorm })
}

fn solve_newton_system<J>(
    u: &CellField,
    jacobian: &mut J,
    rhs: &CellField,
    newton_tol: f64,
) -> Result<CellField, Error>
where
    J: FnMut(&CellField, &CellField) -> Result<CellField, Error>,
{
    let nc = u.grid().num_cells();
    if nc <= DENSE_NEWTON_MAX_CELLS {
        let mut a = nalgebra::DMatrix::<f64>::zeros(nc, nc);
        let mut unit = CellField::zeros(u.grid());
        for c in 0..nc {
            unit[c] = 1.0;
            let col = jacobian(u, &unit)?;
            unit[c] = 0.0;
            for rix in 0..nc {
                a[(rix, c)] = col[rix];
            }
        }
        let b = nalgebra::DVector::from_column_slice(rhs.values());
        let x = a.lu().solve(&b).ok_or(Error::LinearSolveFailure {
            reason: "singular Newton system".into(),
        })?;
        Ok(CellField::new(u.grid(), x.iter().copied().collect()))
    } else {
        bicgstab(u, jacobian, rhs, 1e-2 * newton_tol)
    }
}

/// Unpreconditioned BiCGStab; adequate because the Newton matrices here are
/// identity plus a contraction-sized update on the production time steps.
fn bicgstab<J>(
    u: &CellField,
    jacobian: &mut J,
    rhs: &CellField,
    rel_tol: f64,
) -> Result<CellField, Error>
where
    J: FnMut(&CellField, &CellField) -> Result<CellField, Error>,
{
    let grid = u.grid();
    let nc = grid.num_cells();
    let b = rhs.values();
    let norm_b = l2(b);
    if norm_b == 0.0 {
        return Ok(CellField::zeros(grid));
    }
    let mut apply = |w: &[f64]| -> Result<Vec<f64>, Error> {
        let field = CellField::new(grid, w.to_vec());
        Ok(jacobian(u, &field)?.into_values())
    };

    let mut x = vec![0.0; nc];
    let mut r: Vec<f64> = b.to_vec();
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; nc];
    let mut p = vec![0.0; nc];

    const MAX_ITERS: usize = 500;
    for it in 0..MAX_ITERS {
        let rho_next = dot(&r0, &r);
        if rho_next == 0.0 {
            return Err(Error::LinearSolveFailure {
                reason: format!("BiCGStab breakdown (rho = 0) at iteration {it}"),
            });
        }
        let beta = (rho_next / rho) * (alpha / omega);
        for i in 0..nc {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        v = apply(&p)?;
        let r0v = dot(&r0, &v);
        if r0v == 0.0 {
            return Err(Error::LinearSolveFailure {
                reason: format!("BiCGStab breakdown (r0.v = 0) at iteration {it}"),
            });
        }
        alpha = rho_next / r0v;
        let s: Vec<f64> = (0..nc).map(|i| r[i] - alpha * v[i]).collect();
        if l2(&s) <= rel_tol * norm_b {
            for i in 0..nc {
                x[i] += alpha * p[i];
            }
            return Ok(CellField::new(grid, x));
        }
        let t = apply(&s)?;
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return Err(Error::LinearSolveFailure {
                reason: format!("BiCGStab breakdown (t = 0) at iteration {it}"),
            });
        }
        omega = dot(&t, &s) / tt;
        for i in 0..nc {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
        if l2(&r) <= rel_tol * norm_b {
            return Ok(CellField::new(grid, x));
        }
        rho = rho_next;
    }
    Err(Error::LinearSolveFailure {
        reason: format!("BiCGStab exceeded {MAX_ITERS} iterations"),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct BarrierConfig {
    /// First barrier weight of the continuation.
    pub mu_init: f64,
    /// Final barrier weight; the path bias at the end is of this order.
    pub mu_min: f64,
    /// Projected-gradient target for the final stage.
    pub inner_tol: f64,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self { mu_init: 1e-2, mu_min: 1e-12, inner_tol: 1e-10 }
    }
}

/// Oracle grids stay small enough for dense linear algebra throughout.
const BARRIER_ORACLE_MAX_CELLS: usize = 256;

/// The variational objective of one implicit-explicit step:
/// `J(u) = inv_norm_sq(u - u_n) / (2 dt) + F(u)`, with the inverse norm
/// weighted by the edge average of u_n. Requires mass(u) = mass(u_n).
pub fn evaluate_j(
    u: &CellField,
    u_n: &CellField,
    dt: f64,
    energy_variant: EnergyVariant,
) -> Result<f64, Error> {
    assert_eq!(u.grid(), u_n.grid(), "fields live on different grids");
    assert!(dt > 0.0, "time step must be positive");
    let lap = WeightedLaplacian::new(edge_average(u_n))?;
    let diff = CellField::new(
        u.grid(),
        u.values().iter().zip(u_n.values()).map(|(a, b)| a - b).collect(),
    );
    let metric = lap.inv_norm_sq(&diff, 1e-12)?;
    Ok(metric / (2.0 * dt) + energy(u, energy_variant)?)
}

/// Minimize J over strictly positive fields with the mass of `u_n`, by
/// logarithmic-barrier Newton with the mass constraint pinned through a
/// bordered KKT system. Dense linear algebra throughout; guarded to small
/// grids since this is the cross-validation path, not the production one.
pub fn minimize_j(
    u_n: &CellField,
    dt: f64,
    energy_variant: EnergyVariant,
    cfg: &BarrierConfig,
) -> Result<CellField, Error> {
    let grid = u_n.grid();
    let nc = grid.num_cells();
    assert!(
        nc <= BARRIER_ORACLE_MAX_CELLS,
        "barrier oracle is restricted to {BARRIER_ORACLE_MAX_CELLS} cells"
    );
    assert!(dt > 0.0, "time step must be positive");
    assert!(
        cfg.mu_min > 0.0 && cfg.mu_min < cfg.mu_init,
        "barrier schedule must decrease"
    );
    crate::error::ensure_strictly_positive(u_n.values())?;

    let vol = grid.cell_volume();
    let lap = WeightedLaplacian::new(edge_average(u_n))?;
    let metric_inv = dense_pinned_inverse(&lap)?;
    let target_mass = mass(u_n);
    let metric_row_norm = (0..nc)
        .map(|r| (0..nc).map(|c| metric_inv[(r, c)].abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);

    // Everything below works on raw coordinate vectors; gradients are with
    // respect to the cell values, so the cell volume shows up explicitly.
    // Alongside the gradient we report the roundoff floor it was computed
    // at: for tiny dt the difference u - u_n cancels catastrophically and no
    // iteration can push the KKT residual below that floor. The floor is
    // proportional to the Hessian scale, so accepting at it costs nothing in
    // solution accuracy.
    let grad = |u: &CellField, mu: f64| -> Result<(Vec<f64>, f64), Error> {
        let w = nalgebra::DVector::from_iterator(
            nc,
            u.values().iter().zip(u_n.values()).map(|(a, b)| a - b),
        );
        let f = &metric_inv * w;
        let h = potential(u, energy_variant)?;
        let floor = 32.0
            * f64::EPSILON
            * vol
            * (metric_row_norm * u.norm_inf() / dt + h.norm_inf() + mu / u.min());
        let g = (0..nc)
            .map(|i| vol * (f[i] / dt + h[i] - mu / u[i]))
            .collect();
        Ok((g, floor))
    };
    let objective = |u: &CellField, mu: f64| -> Result<f64, Error> {
        let w = nalgebra::DVector::from_iterator(
            nc,
            u.values().iter().zip(u_n.values()).map(|(a, b)| a - b),
        );
        let metric = vol * (&metric_inv * &w).dot(&w);
        let log_sum = neumaier_sum(u.values().iter().map(|v| v.ln()));
        Ok(metric / (2.0 * dt) + energy(u, energy_variant)? - mu * vol * log_sum)
    };

    let mut u = u_n.clone();
    let mut mu = cfg.mu_init;
    loop {
        let stage_tol =
            if mu <= cfg.mu_min { cfg.inner_tol } else { cfg.inner_tol.max(0.01 * mu) };
        barrier_stage(
            &mut u, mu, stage_tol, vol, dt, energy_variant, &metric_inv, &grad, &objective,
        )?;
        if mu <= cfg.mu_min {
            break;
        }
        mu = (mu * 0.1).max(cfg.mu_min);
    }

    // The KKT steps conserve mass to roundoff; pin it exactly.
    let m = mass(&u);
    let scale = target_mass / m;
    for v in u.values_mut() {
        *v *= scale;
    }
    Ok(u)
}

#[allow(clippy::too_many_arguments)]
fn barrier_stage<G, O>(
    u: &mut CellField,
    mu: f64,
    stage_tol: f64,
    vol: f64,
    dt: f64,
    energy_variant: EnergyVariant,
    metric_inv: &nalgebra::DMatrix<f64>,
    grad: &G,
    objective: &O,
) -> Result<(), Error>
where
    G: Fn(&CellField, f64) -> Result<(Vec<f64>, f64), Error>,
    O: Fn(&CellField, f64) -> Result<f64, Error>,
{
    let nc = u.values().len();
    const STAGE_MAX_ITERS: usize = 60;
    for _ in 0..STAGE_MAX_ITERS {
        let (g, floor) = grad(u, mu)?;
        let g_mean = neumaier_sum(g.iter().copied()) / nc as f64;
        let kkt = g.iter().map(|x| (x - g_mean).abs()).fold(0.0_f64, f64::max);
        if kkt <= stage_tol.max(floor) {
            return Ok(());
        }

        // Bordered KKT system: barrier Hessian plus the mass constraint row.
        let mut k = nalgebra::DMatrix::<f64>::zeros(nc + 1, nc + 1);
        let mut unit = CellField::zeros(u.grid());
        for c in 0..nc {
            unit[c] = 1.0;
            let hf = hessian_apply(u, &unit, energy_variant)?;
            unit[c] = 0.0;
            for r in 0..nc {
                k[(r, c)] = vol * (metric_inv[(r, c)] / dt + hf[r]);
            }
            k[(c, c)] += vol * mu / (u[c] * u[c]);
        }
        for i in 0..nc {
            k[(i, nc)] = 1.0;
            k[(nc, i)] = 1.0;
        }
        let mut rhs = nalgebra::DVector::<f64>::zeros(nc + 1);
        for i in 0..nc {
            rhs[i] = -g[i];
        }
        let sol = k.lu().solve(&rhs).ok_or(Error::LinearSolveFailure {
            reason: "singular barrier KKT system".into(),
        })?;
        let mut delta: Vec<f64> = sol.iter().take(nc).copied().collect();
        // Kill constraint drift from LU roundoff.
        let d_mean = neumaier_sum(delta.iter().copied()) / nc as f64;
        delta.iter_mut().for_each(|d| *d -= d_mean);

        // Fraction-to-boundary cap, then Armijo backtracking.
        let mut alpha: f64 = 1.0;
        for i in 0..nc {
            if delta[i] < 0.0 {
                alpha = alpha.min(0.99 * u[i] / -delta[i]);
            }
        }
        let slope: f64 = g.iter().zip(&delta).map(|(a, b)| a * b).sum();
        let base = objective(u, mu)?;
        // Near the stage optimum the predicted decrease 1e-4 * alpha * slope
        // sinks below the objective's own rounding error and a strict Armijo
        // test goes blind, rejecting full Newton steps it cannot measure.
        // The allowance keeps those acceptable; it is negligible against any
        // real descent.
        let noise = 64.0 * f64::EPSILON * base.abs().max(1.0);
        let mut accepted = false;
        while alpha >= 2f64.powi(-40) {
            let trial = CellField::new(
                u.grid(),
                u.values().iter().zip(&delta).map(|(a, d)| a + alpha * d).collect(),
            );
            if trial.min() > 0.0 && objective(&trial, mu)? <= base + 1e-4 * alpha * slope + noise {
                *u = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::LineSearchStalled { residual: kkt });
        }
    }
    let (g, floor) = grad(u, mu)?;
    let g_mean = neumaier_sum(g.iter().copied()) / nc as f64;
    let kkt = g.iter().map(|x| (x - g_mean).abs()).fold(0.0_f64, f64::max);
    if kkt <= stage_tol.max(floor) {
        Ok(())
    } else {
        Err(Error::NoConvergence { iterations: STAGE_MAX_ITERS, residual: kkt })
    }
}

/// Dense action of the inverse weighted Laplacian composed with the
/// mean-zero projector, via one pinned LU factorization. Symmetrized to
/// keep the quadratic form exactly self-adjoint.
fn dense_pinned_inverse(lap: &WeightedLaplacian) -> Result<nalgebra::DMatrix<f64>, Error> {
    let grid = lap.grid();
    let nc = grid.num_cells();
    let mut a = nalgebra::DMatrix::<f64>::zeros(nc, nc);
    let mut unit = CellField::zeros(grid);
    for c in 0..nc {
        unit[c] = 1.0;
        let col = lap.apply(&unit);
        unit[c] = 0.0;
        for r in 0..nc {
            a[(r, c)] = col[r];
        }
    }
    for c in 0..nc {
        a[(0, c)] = 1.0;
    }
    let lu = a.lu();
    // Columns of L^+ P: solve the pinned system against each projected unit.
    let mut rhs = nalgebra::DMatrix::<f64>::zeros(nc, nc);
    let mean = 1.0 / nc as f64;
    for c in 0..nc {
        for r in 1..nc {
            rhs[(r, c)] = if r == c { 1.0 - mean } else { -mean };
        }
    }
    let minv = lu.solve(&rhs).ok_or(Error::LinearSolveFailure {
        reason: "pinned elliptic system is singular".into(),
    })?;
    let mut sym = nalgebra::DMatrix::<f64>::zeros(nc, nc);
    for r in 0..nc {
        for c in 0..nc {
            sym[(r, c)] = 0.5 * (minv[(r, c)] + minv[(c, r)]);
        }
    }
    Ok(sym)
}
