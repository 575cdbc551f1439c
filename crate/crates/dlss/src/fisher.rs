//! Discrete Fisher information energies, their exact gradients (the chemical
//! potential driving the flow) and Hessian actions.
//!
//! Every variant is a sum of one convex kernel psi(a, b) over edges, where a
//! and b are the two incident cell values:
//!
//! - forward:   psi = (b - a)^2 / (2a)
//! - backward:  psi = (a - b)^2 / (2b)
//! - symmetric: the average of the two
//! - central:   psi = (b - a)^2 / (a + b), 1D only
//!
//! The total is `F(u) = (1/h) sum_edges psi` in 1D and `F(u) = sum_edges psi`
//! in 2D. [`potential`] returns `H = (1/h^dim) dF/du`, which carries a 1/h^2
//! prefactor in both dimensions; its closed-form stencil is assembled edge by
//! edge from the exact partials of psi, so `h^dim * H` is the exact gradient
//! of [`energy`] (finite-difference checked in the tests). [`hessian_apply`]
//! is the exact linearization of [`potential`], used by the Newton solvers.

use crate::error::Error;
use crate::grid::{for_each_edge, CellField, CompensatedSum};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EnergyVariant {
    #[default]
    Forward,
    Backward,
    Symmetric,
    Central,
}

impl EnergyVariant {
    pub const ALL: [EnergyVariant; 4] = [
        EnergyVariant::Forward,
        EnergyVariant::Backward,
        EnergyVariant::Symmetric,
        EnergyVariant::Central,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EnergyVariant::Forward => "forward",
            EnergyVariant::Backward => "backward",
            EnergyVariant::Symmetric => "symmetric",
            EnergyVariant::Central => "central",
        }
    }
}

impl std::fmt::Display for EnergyVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// Per-edge kernels. grad returns (d/da, d/db), hess the symmetric triple
// (d2/daa, d2/dadb, d2/dbdb); all are exact closed forms.

fn psi_forward(a: f64, b: f64) -> f64 {
    let d = b - a;
    d * d / (2.0 * a)
}

fn grad_forward(a: f64, b: f64) -> (f64, f64) {
    let d = b - a;
    (-d / a - d * d / (2.0 * a * a), d / a)
}

fn hess_forward(a: f64, b: f64) -> (f64, f64, f64) {
    (b * b / (a * a * a), -b / (a * a), 1.0 / a)
}

// backward(a, b) = forward(b, a); partials swap accordingly.

fn psi_backward(a: f64, b: f64) -> f64 {
    psi_forward(b, a)
}

fn grad_backward(a: f64, b: f64) -> (f64, f64) {
    let (fa, fb) = grad_forward(b, a);
    (fb, fa)
}

fn hess_backward(a: f64, b: f64) -> (f64, f64, f64) {
    let (faa, fab, fbb) = hess_forward(b, a);
    (fbb, fab, faa)
}

fn psi_symmetric(a: f64, b: f64) -> f64 {
    0.5 * (psi_forward(a, b) + psi_backward(a, b))
}

fn grad_symmetric(a: f64, b: f64) -> (f64, f64) {
    let (fa, fb) = grad_forward(a, b);
    let (ba, bb) = grad_backward(a, b);
    (0.5 * (fa + ba), 0.5 * (fb + bb))
}

fn hess_symmetric(a: f64, b: f64) -> (f64, f64, f64) {
    let (faa, fab, fbb) = hess_forward(a, b);
    let (baa, bab, bbb) = hess_backward(a, b);
    (0.5 * (faa + baa), 0.5 * (fab + bab), 0.5 * (fbb + bbb))
}

fn psi_central(a: f64, b: f64) -> f64 {
    let d = b - a;
    d * d / (a + b)
}

fn grad_central(a: f64, b: f64) -> (f64, f64) {
    let d = b - a;
    let s = a + b;
    let s2 = s * s;
    ((-2.0 * d * s - d * d) / s2, (2.0 * d * s - d * d) / s2)
}

fn hess_central(a: f64, b: f64) -> (f64, f64, f64) {
    let s = a + b;
    let s3 = s * s * s;
    (8.0 * b * b / s3, -8.0 * a * b / s3, 8.0 * a * a / s3)
}

struct Kernel {
    psi: fn(f64, f64) -> f64,
    grad: fn(f64, f64) -> (f64, f64),
    hess: fn(f64, f64) -> (f64, f64, f64),
}

fn kernel(v: EnergyVariant) -> Kernel {
    match v {
        EnergyVariant::Forward => Kernel { psi: psi_forward, grad: grad_forward, hess: hess_forward },
        EnergyVariant::Backward => {
            Kernel { psi: psi_backward, grad: grad_backward, hess: hess_backward }
        }
        EnergyVariant::Symmetric => {
            Kernel { psi: psi_symmetric, grad: grad_symmetric, hess: hess_symmetric }
        }
        EnergyVariant::Central => Kernel { psi: psi_central, grad: grad_central, hess: hess_central },
    }
}

fn check_variant(v: EnergyVariant, dim: usize) -> Result<(), Error> {
    if v == EnergyVariant::Central && dim != 1 {
        return Err(Error::UnsupportedVariant { variant: v.name(), dim });
    }
    Ok(())
}

fn check_positive(u: &CellField) -> Result<(), Error> {
    crate::error::ensure_strictly_positive(u.values())
}

/// Edge-sum prefactor: 1/h in 1D, 1 in 2D.
fn prefactor(u: &CellField) -> f64 {
    match u.grid().dim() {
        1 => 1.0 / u.grid().h(),
        _ => 1.0,
    }
}

/// Discrete Fisher information F(u). Nonnegative; zero exactly on constants.
pub fn energy(u: &CellField, v: EnergyVariant) -> Result<f64, Error> {
    check_variant(v, u.grid().dim())?;
    check_positive(u)?;
    let k = kernel(v);
    let vals = u.values();
    let mut acc = CompensatedSum::new();
    for_each_edge(u.grid(), |p, q| acc.add((k.psi)(vals[p], vals[q])));
    Ok(prefactor(u) * acc.value())
}

/// Chemical potential H = (1/h^dim) dF/du, assembled edge by edge from the
/// exact kernel partials. Carries a 1/h^2 prefactor in both dimensions.
pub fn potential(u: &CellField, v: EnergyVariant) -> Result<CellField, Error> {
    check_variant(v, u.grid().dim())?;
    check_positive(u)?;
    let k = kernel(v);
    let scale = prefactor(u) / u.grid().cell_volume();
    let vals = u.values();
    let mut out = vec![0.0; vals.len()];
    for_each_edge(u.grid(), |p, q| {
        let (da, db) = (k.grad)(vals[p], vals[q]);
        out[p] += da;
        out[q] += db;
    });
    for o in &mut out {
        *o *= scale;
    }
    Ok(CellField::new(u.grid(), out))
}

/// Directional derivative of [`potential`] at u in direction w; the exact
/// Newton linearization. Symmetric: `<hessian_apply(u, w1), w2>` equals
/// `<w1, hessian_apply(u, w2)>`.
pub fn hessian_apply(u: &CellField, w: &CellField, v: EnergyVariant) -> Result<CellField, Error> {
    assert_eq!(u.grid(), w.grid(), "fields live on different grids");
    check_variant(v, u.grid().dim())?;
    check_positive(u)?;
    let k = kernel(v);
    let scale = prefactor(u) / u.grid().cell_volume();
    let vals = u.values();
    let dir = w.values();
    let mut out = vec![0.0; vals.len()];
    for_each_edge(u.grid(), |p, q| {
        let (aa, ab, bb) = (k.hess)(vals[p], vals[q]);
        out[p] += aa * dir[p] + ab * dir[q];
        out[q] += ab * dir[p] + bb * dir[q];
    });
    for o in &mut out {
        *o *= scale;
    }
    Ok(CellField::new(u.grid(), out))
}
