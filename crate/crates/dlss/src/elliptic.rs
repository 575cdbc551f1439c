//! The weighted discrete elliptic operator `L f = -d_h(w D_h f)`, its
//! inverse on the mean-zero subspace, and the induced norm `||g||^2 =
//! <g, L^-1 g>` that the implicit schemes dissipate.
//!
//! On a periodic grid L is symmetric positive semidefinite with kernel
//! exactly the constants, so the inverse is taken on mean-zero data and
//! pinned to a mean-zero result. The iterative path is conjugate gradient
//! restricted to that subspace (the iterate's mean is re-projected to zero
//! every iteration, since Jacobi preconditioning leaks out of it); a dense
//! pinned-row factorization is kept behind a small-size guard as an
//! independent oracle.

use crate::error::Error;
use crate::grid::{
    cell_inner, d_gradient, edge_inner, edge_multiply, for_each_edge, neumaier_sum, CellField,
    EdgeField, GridSpec,
};

/// Relative slack allowed on the mean of a right-hand side before it is
/// rejected as NotMeanZero.
const MEAN_ZERO_SLACK: f64 = 1e-11;

/// Grids this small keep a dense direct solve affordable; the oracle bound.
const DENSE_ORACLE_MAX_CELLS: usize = 64;

#[derive(Debug)]
pub struct WeightedLaplacian {
    weight: EdgeField,
    inv_diag: Vec<f64>,
}

impl WeightedLaplacian {
    /// Wrap a strictly positive edge weight. The weight is the mobility of
    /// the flow, typically an edge average of a positive cell field.
    pub fn new(weight: EdgeField) -> Result<Self, Error> {
        for (index, &value) in weight.x().iter().chain(weight.y().iter()).enumerate() {
            if !(value > 0.0) {
                return Err(Error::NonPositiveState { index, value });
            }
        }
        let grid = weight.grid();
        let inv_h2 = 1.0 / (grid.h() * grid.h());
        let mut diag = vec![0.0; grid.num_cells()];
        {
            let wts: Vec<f64> =
                weight.x().iter().chain(weight.y().iter()).copied().collect();
            let mut k = 0;
            for_each_edge(grid, |p, q| {
                diag[p] += wts[k];
                diag[q] += wts[k];
                k += 1;
            });
        }
        let inv_diag = diag.into_iter().map(|d| 1.0 / (d * inv_h2)).collect();
        Ok(Self { weight, inv_diag })
    }

    pub fn grid(&self) -> GridSpec {
        self.weight.grid()
    }

    pub fn weight(&self) -> &EdgeField {
        &self.weight
    }

    /// L f = -d_h(w D_h f). Output sums to zero up to roundoff.
    pub fn apply(&self, f: &CellField) -> CellField {
        assert_eq!(self.grid(), f.grid(), "field lives on a different grid");
        let mut out = vec![0.0; f.values().len()];
        self.apply_raw(f.values(), &mut out);
        CellField::new(self.grid(), out)
    }

    /// Stencil form of `apply`, allocation-free for the solver hot loop.
    fn apply_raw(&self, f: &[f64], out: &mut [f64]) {
        let grid = self.grid();
        let n = grid.n();
        let inv_h2 = 1.0 / (grid.h() * grid.h());
        let wx = self.weight.x();
        match grid.dim() {
            1 => {
                for i in 0..n {
                    let im = grid.prev(i);
                    out[i] =
                        (wx[im] * (f[i] - f[im]) + wx[i] * (f[i] - f[grid.next(i)])) * inv_h2;
                }
            }
            _ => {
                let wy = self.weight.y();
                for j in 0..n {
                    let row = j * n;
                    let up = grid.next(j) * n;
                    let down = grid.prev(j) * n;
                    for i in 0..n {
                        let c = row + i;
                        let left = row + grid.prev(i);
                        out[c] = (wx[left] * (f[c] - f[left])
                            + wx[c] * (f[c] - f[row + grid.next(i)])
                            + wy[down + i] * (f[c] - f[down + i])
                            + wy[c] * (f[c] - f[up + i]))
                            * inv_h2;
                    }
                }
            }
        }
    }

    /// Solve L f = g for the mean-zero f, to relative residual `tol`.
    ///
    /// g must be mean-free to within a small relative slack; subtract its
    /// mean first otherwise. Fails with NoConvergence (carrying the relative
    /// residual) if conjugate gradient stalls within 50 N^dim iterations.
    pub fn solve(&self, g: &CellField, tol: f64) -> Result<CellField, Error> {
        let grid = self.grid();
        assert_eq!(grid, g.grid(), "field lives on a different grid");
        assert!(tol > 0.0, "tolerance must be positive");
        let mean = g.mean();
        if mean.abs() > MEAN_ZERO_SLACK * g.norm_inf() {
            return Err(Error::NotMeanZero { mean });
        }

        let nc = grid.num_cells();
        // Project the data exactly onto the solvable subspace.
        let b: Vec<f64> = g.values().iter().map(|v| v - mean).collect();
        let norm_b = l2(&b);
        if norm_b == 0.0 {
            return Ok(CellField::zeros(grid));
        }

        let mut x = vec![0.0; nc];
        let mut r = b;
        let mut z: Vec<f64> = r.iter().zip(&self.inv_diag).map(|(ri, d)| ri * d).collect();
        project_zero_mean(&mut z);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut q = vec![0.0; nc];

        let max_iters = 50 * nc;
        let mut rel = 1.0;
        for it in 0..max_iters {
            self.apply_raw(&p, &mut q);
            let pq = dot(&p, &q);
            if !(pq > 0.0) {
                return Err(Error::NoConvergence { iterations: it, residual: rel });
            }
            let alpha = rz / pq;
            for i in 0..nc {
                x[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            project_zero_mean(&mut x);
            project_zero_mean(&mut r);
            rel = l2(&r) / norm_b;
            if rel <= tol {
                return Ok(CellField::new(grid, x));
            }
            for i in 0..nc {
                z[i] = r[i] * self.inv_diag[i];
            }
            project_zero_mean(&mut z);
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..nc {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(Error::NoConvergence { iterations: max_iters, residual: rel })
    }

    /// ||g||^2 in the inverse norm: [w D_h f, D_h f] with f = L^-1 g, equal
    /// to <g, f> by summation by parts.
    pub fn inv_norm_sq(&self, g: &CellField, tol: f64) -> Result<f64, Error> {
        let f = self.solve(g, tol)?;
        let grad = d_gradient(&f);
        Ok(edge_inner(&edge_multiply(&self.weight, &grad), &grad))
    }

    /// Dense direct solve with the constant mode pinned by a row of ones;
    /// the small-grid oracle for `solve`. Panics above the size guard.
    pub fn solve_dense(&self, g: &CellField) -> Result<CellField, Error> {
        let grid = self.grid();
        assert_eq!(grid, g.grid(), "field lives on a different grid");
        let nc = grid.num_cells();
        assert!(
            nc <= DENSE_ORACLE_MAX_CELLS,
            "dense oracle is restricted to {DENSE_ORACLE_MAX_CELLS} cells"
        );
        let mean = g.mean();
        if mean.abs() > MEAN_ZERO_SLACK * g.norm_inf() {
            return Err(Error::NotMeanZero { mean });
        }

        let mut a = nalgebra::DMatrix::<f64>::zeros(nc, nc);
        let mut unit = vec![0.0; nc];
        let mut col = vec![0.0; nc];
        for c in 0..nc {
            unit[c] = 1.0;
            self.apply_raw(&unit, &mut col);
            unit[c] = 0.0;
            for rix in 0..nc {
                a[(rix, c)] = col[rix];
            }
        }
        for c in 0..nc {
            a[(0, c)] = 1.0;
        }
        let mut rhs = nalgebra::DVector::<f64>::from_column_slice(g.values());
        rhs[0] = 0.0;
        let f = a.lu().solve(&rhs).ok_or(Error::LinearSolveFailure {
            reason: "pinned elliptic system is singular".into(),
        })?;
        let mut out: Vec<f64> = f.iter().copied().collect();
        project_zero_mean(&mut out);
        Ok(CellField::new(grid, out))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn project_zero_mean(v: &mut [f64]) {
    let mean = neumaier_sum(v.iter().copied()) / v.len() as f64;
    for x in v {
        *x -= mean;
    }
}

/// Convenience: <g1, L^-1 g2> bilinear form, used by diagnostics.
pub fn inv_inner(lap: &WeightedLaplacian, g1: &CellField, g2: &CellField, tol: f64) -> Result<f64, Error> {
    Ok(cell_inner(g1, &lap.solve(g2, tol)?))
}
