//! Periodic cell/edge fields and the mimetic difference calculus.
//!
//! Cells sit at x_i = i*h on a uniform N-cell grid over [0, L); edge e sits
//! at x_{e+1/2} between cells e and e+1, indices wrapping mod N. In 2D the
//! layout is row-major with i fastest: cell (i, j) is slot j*N + i, X-edges
//! join (i, j)-(i+1, j) and Y-edges join (i, j)-(i, j+1), each stored at the
//! slot of their lower cell.
//!
//! [`d_gradient`] and [`d_divergence`] are exact negative adjoints under the
//! inner products below, so summation by parts
//! `cell_inner(f, d_divergence(g)) = -edge_inner(d_gradient(f), g)` holds to
//! roundoff. All reductions use compensated (Neumaier) summation.

/// Uniform periodic grid on [0, L)^dim with N cells per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    dim: usize,
    n: usize,
    l: f64,
    h: f64,
}

impl GridSpec {
    pub fn one_d(n: usize, l: f64) -> Self {
        Self::build(1, n, l)
    }

    pub fn two_d(n: usize, l: f64) -> Self {
        Self::build(2, n, l)
    }

    fn build(dim: usize, n: usize, l: f64) -> Self {
        assert!(n >= 3, "need at least 3 cells per axis, got {n}");
        assert!(l.is_finite() && l > 0.0, "period must be positive, got {l}");
        Self { dim, n, l, h: l / n as f64 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cells per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    /// Mesh width L/N.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Total number of cells, N^dim.
    pub fn num_cells(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// h^dim, the quadrature weight of one cell.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    /// Reduce an arbitrary (possibly negative) axis index mod N.
    pub fn wrap(&self, i: isize) -> usize {
        i.rem_euclid(self.n as isize) as usize
    }

    /// Flat slot of cell (i, j); i fastest.
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        j * self.n + i
    }

    /// Coordinate of cell i along one axis.
    pub fn coord(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    #[inline]
    pub(crate) fn next(&self, i: usize) -> usize {
        if i + 1 == self.n {
            0
        } else {
            i + 1
        }
    }

    #[inline]
    pub(crate) fn prev(&self, i: usize) -> usize {
        if i == 0 {
            self.n - 1
        } else {
            i - 1
        }
    }
}

/// Scalar field sampled at cell points; storage length N^dim.
#[derive(Clone, Debug, PartialEq)]
pub struct CellField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl CellField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.num_cells(), "cell data has wrong length");
        Self { grid, values }
    }

    pub fn constant(grid: GridSpec, c: f64) -> Self {
        Self { grid, values: vec![c; grid.num_cells()] }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Sample f(x_i) on a 1D grid.
    pub fn sample_1d(grid: GridSpec, f: impl Fn(f64) -> f64) -> Self {
        assert_eq!(grid.dim(), 1);
        let values = (0..grid.n()).map(|i| f(grid.coord(i))).collect();
        Self { grid, values }
    }

    /// Sample f(x_i, y_j) on a 2D grid.
    pub fn sample_2d(grid: GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(grid.dim(), 2);
        let n = grid.n();
        let mut values = Vec::with_capacity(n * n);
        for j in 0..n {
            let y = grid.coord(j);
            for i in 0..n {
                values.push(f(grid.coord(i), y));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mean(&self) -> f64 {
        neumaier_sum(self.values.iter().copied()) / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }
}

impl std::ops::Index<usize> for CellField {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl std::ops::IndexMut<usize> for CellField {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}

/// Field sampled at edge midpoints. In 1D only `x` is populated (length N,
/// slot e is edge e+1/2); in 2D `x` holds the X-edges and `y` the Y-edges,
/// each of length N^2 indexed like the lower incident cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeField {
    grid: GridSpec,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl EdgeField {
    pub fn new(grid: GridSpec, x: Vec<f64>, y: Vec<f64>) -> Self {
        match grid.dim() {
            1 => {
                assert_eq!(x.len(), grid.n(), "edge data has wrong length");
                assert!(y.is_empty(), "1D edge fields have no Y component");
            }
            _ => {
                assert_eq!(x.len(), grid.num_cells(), "X-edge data has wrong length");
                assert_eq!(y.len(), grid.num_cells(), "Y-edge data has wrong length");
            }
        }
        Self { grid, x, y }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        let x = vec![0.0; grid.num_cells()];
        let y = if grid.dim() == 2 { vec![0.0; grid.num_cells()] } else { Vec::new() };
        Self { grid, x, y }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x_mut(&mut self) -> &mut [f64] {
        &mut self.x
    }

    pub fn y_mut(&mut self) -> &mut [f64] {
        &mut self.y
    }

    /// Number of edges in total (N in 1D, 2 N^2 in 2D).
    pub fn len(&self) -> usize {
        self.x.len() + self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min(&self) -> f64 {
        self.x
            .iter()
            .chain(self.y.iter())
            .fold(f64::INFINITY, |m, &v| m.min(v))
    }
}

/// Visit every edge as a pair of flat cell slots (lower, upper). 1D: edge e
/// joins cells (e, e+1). 2D: all X-edges first, then all Y-edges, in storage
/// order. The visit order matches the storage order of [`EdgeField`].
pub(crate) fn for_each_edge(grid: GridSpec, mut visit: impl FnMut(usize, usize)) {
    let n = grid.n();
    match grid.dim() {
        1 => {
            for e in 0..n {
                visit(e, grid.next(e));
            }
        }
        _ => {
            for j in 0..n {
                let row = j * n;
                for i in 0..n {
                    visit(row + i, row + grid.next(i));
                }
            }
            for j in 0..n {
                let row = j * n;
                let up = grid.next(j) * n;
                for i in 0..n {
                    visit(row + i, up + i);
                }
            }
        }
    }
}

/// Forward difference onto edges: (f_{i+1} - f_i)/h per axis.
pub fn d_gradient(f: &CellField) -> EdgeField {
    let g = f.grid();
    let n = g.n();
    let inv_h = 1.0 / g.h();
    let v = f.values();
    match g.dim() {
        1 => {
            let mut x = vec![0.0; n];
            for e in 0..n {
                x[e] = (v[g.next(e)] - v[e]) * inv_h;
            }
            EdgeField { grid: g, x, y: Vec::new() }
        }
        _ => {
            let mut x = vec![0.0; n * n];
            let mut y = vec![0.0; n * n];
            for j in 0..n {
                let row = j * n;
                let up = g.next(j) * n;
                for i in 0..n {
                    let c = row + i;
                    x[c] = (v[row + g.next(i)] - v[c]) * inv_h;
                    y[c] = (v[up + i] - v[c]) * inv_h;
                }
            }
            EdgeField { grid: g, x, y }
        }
    }
}

/// Backward difference of edge data onto cells: (g_{i+1/2} - g_{i-1/2})/h,
/// summed over axes in 2D. Exact negative adjoint of [`d_gradient`].
pub fn d_divergence(g: &EdgeField) -> CellField {
    let spec = g.grid();
    let n = spec.n();
    let inv_h = 1.0 / spec.h();
    match spec.dim() {
        1 => {
            let out = (0..n)
                .map(|i| (g.x[i] - g.x[spec.prev(i)]) * inv_h)
                .collect();
            CellField { grid: spec, values: out }
        }
        _ => {
            let mut out = vec![0.0; n * n];
            for j in 0..n {
                let row = j * n;
                let down = spec.prev(j) * n;
                for i in 0..n {
                    let c = row + i;
                    out[c] = ((g.x[c] - g.x[row + spec.prev(i)]) + (g.y[c] - g.y[down + i]))
                        * inv_h;
                }
            }
            CellField { grid: spec, values: out }
        }
    }
}

/// Arithmetic mean of the two cells incident to each edge.
pub fn edge_average(f: &CellField) -> EdgeField {
    let g = f.grid();
    let n = g.n();
    let v = f.values();
    match g.dim() {
        1 => {
            let mut x = vec![0.0; n];
            for e in 0..n {
                x[e] = 0.5 * (v[e] + v[g.next(e)]);
            }
            EdgeField { grid: g, x, y: Vec::new() }
        }
        _ => {
            let mut x = vec![0.0; n * n];
            let mut y = vec![0.0; n * n];
            for j in 0..n {
                let row = j * n;
                let up = g.next(j) * n;
                for i in 0..n {
                    let c = row + i;
                    x[c] = 0.5 * (v[c] + v[row + g.next(i)]);
                    y[c] = 0.5 * (v[c] + v[up + i]);
                }
            }
            EdgeField { grid: g, x, y }
        }
    }
}

/// Edgewise product a .* b.
pub fn edge_multiply(a: &EdgeField, b: &EdgeField) -> EdgeField {
    assert_eq!(a.grid, b.grid, "edge fields live on different grids");
    let x = a.x.iter().zip(&b.x).map(|(p, q)| p * q).collect();
    let y = a.y.iter().zip(&b.y).map(|(p, q)| p * q).collect();
    EdgeField { grid: a.grid, x, y }
}

/// Cell inner product <f, g> = h^dim sum_i f_i g_i.
pub fn cell_inner(f: &CellField, g: &CellField) -> f64 {
    assert_eq!(f.grid, g.grid, "cell fields live on different grids");
    f.grid.cell_volume() * neumaier_sum(f.values.iter().zip(&g.values).map(|(a, b)| a * b))
}

/// Edge inner product [a, b] = h^dim sum over every edge (both axes in 2D).
pub fn edge_inner(a: &EdgeField, b: &EdgeField) -> f64 {
    assert_eq!(a.grid, b.grid, "edge fields live on different grids");
    let pairs = a
        .x
        .iter()
        .zip(&b.x)
        .chain(a.y.iter().zip(&b.y))
        .map(|(p, q)| p * q);
    a.grid.cell_volume() * neumaier_sum(pairs)
}

/// Total mass h^dim sum_i u_i.
pub fn mass(u: &CellField) -> f64 {
    u.grid.cell_volume() * neumaier_sum(u.values.iter().copied())
}

/// Incremental Neumaier compensated summation; exact to one rounding of the
/// true sum for the magnitudes met here.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub(crate) fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}
