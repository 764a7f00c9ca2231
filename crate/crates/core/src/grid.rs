//! Staggered even/odd grids, initial-data discretization and the step /
//! piecewise-linear reconstructions of grid fields.
//!
//! Column `m` sits at `x_m = m dx`, level `k` at `t_k = k dt`. A field at
//! level `k` stores the `N` columns of one parity class: `u`-type fields live
//! where `m + k` is even, `v`-type fields where `m + k` is odd. Column indices
//! are periodic with period `2N`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaggeredGrid {
    /// Half the number of columns per period.
    pub n: usize,
    /// Half the number of levels per unit time.
    pub k: usize,
}

impl StaggeredGrid {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::InvalidGrid(format!("N and K must be positive (N={n}, K={k})")));
        }
        if n > k {
            return Err(Error::InvalidGrid(format!("need N <= K so that lambda <= 1 (N={n}, K={k})")));
        }
        Ok(StaggeredGrid { n, k })
    }

    pub fn dx(&self) -> f64 {
        1.0 / (2 * self.n) as f64
    }

    pub fn dt(&self) -> f64 {
        1.0 / (2 * self.k) as f64
    }

    pub fn lambda(&self) -> f64 {
        self.n as f64 / self.k as f64
    }

    pub fn x(&self, m: i64) -> f64 {
        m as f64 / (2 * self.n) as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 / (2 * self.k) as f64
    }

    /// Number of levels in one unit of time.
    pub fn steps_per_period(&self) -> usize {
        2 * self.k
    }

    pub fn columns(&self) -> i64 {
        2 * self.n as i64
    }

    /// Level index containing time `t`, with a small snap to exact nodes.
    pub fn level_of(&self, t: f64) -> i64 {
        let s = t / self.dt();
        let r = s.round();
        if (s - r).abs() < 1e-9 {
            r as i64
        } else {
            s.floor() as i64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parity {
    /// `m + k` even; conservation-law unknowns.
    Even,
    /// `m + k` odd; Hamilton-Jacobi unknowns.
    Odd,
}

impl Parity {
    fn label(self) -> &'static str {
        match self {
            Parity::Even => "even",
            Parity::Odd => "odd",
        }
    }

    pub fn other(self) -> Parity {
        match self {
            Parity::Even => Parity::Odd,
            Parity::Odd => Parity::Even,
        }
    }
}

/// Values of one parity class at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub grid: StaggeredGrid,
    pub parity: Parity,
    pub k: usize,
    /// `values[j]` lives at column `2j + offset()`.
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(grid: StaggeredGrid, parity: Parity, k: usize) -> Self {
        GridField { grid, parity, k, values: vec![0.0; grid.n] }
    }

    pub fn from_fn(grid: StaggeredGrid, parity: Parity, k: usize, f: impl Fn(i64) -> f64) -> Self {
        let mut out = Self::zeros(grid, parity, k);
        for j in 0..grid.n {
            let m = out.column(j);
            out.values[j] = f(m);
        }
        out
    }

    /// Parity of the smallest stored column (0 or 1).
    pub fn offset(&self) -> i64 {
        let kk = (self.k % 2) as i64;
        match self.parity {
            Parity::Even => kk,
            Parity::Odd => 1 - kk,
        }
    }

    pub fn column(&self, j: usize) -> i64 {
        2 * j as i64 + self.offset()
    }

    pub fn x(&self, j: usize) -> f64 {
        self.grid.x(self.column(j))
    }

    pub fn t(&self) -> f64 {
        self.grid.t(self.k)
    }

    /// Whether column `m` carries a value in this field.
    pub fn holds(&self, m: i64) -> bool {
        (m - self.offset()).rem_euclid(2) == 0
    }

    pub fn index_of(&self, m: i64) -> usize {
        debug_assert!(self.holds(m), "column {m} has the wrong parity for a {} field at k={}", self.parity.label(), self.k);
        ((m.rem_euclid(self.grid.columns()) - self.offset()) / 2) as usize
    }

    /// Value at column `m`, periodic in `m`.
    pub fn at(&self, m: i64) -> f64 {
        self.values[self.index_of(m)]
    }

    pub fn set(&mut self, m: i64, value: f64) {
        let j = self.index_of(m);
        self.values[j] = value;
    }

    /// `sum_j values[j] * 2 dx`
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * 2.0 * self.grid.dx()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }

    pub fn expect_parity(&self, parity: Parity) -> Result<()> {
        if self.parity == parity {
            Ok(())
        } else {
            Err(Error::ParityMismatch { expected: parity.label(), found: self.parity.label() })
        }
    }

    /// `L1` distance as step functions (both fields on the same grid and level).
    pub fn l1_distance(&self, other: &GridField) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum::<f64>() * 2.0 * self.grid.dx()
    }

    pub fn sup_distance(&self, other: &GridField) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |acc: f64, (a, b)| acc.max((a - b).abs()))
    }

    /// Adds a constant to every entry.
    pub fn shifted(&self, d: f64) -> GridField {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v += d);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_csv_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_to(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "m,x_m,value")?;
        for (j, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{},{}", self.column(j), self.x(j), v)?;
        }
        Ok(())
    }

    /// Little-endian dump: magic, N, K, parity, k, values.
    pub fn write_dump(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.grid.n as u64).to_le_bytes())?;
        w.write_all(&(self.grid.k as u64).to_le_bytes())?;
        w.write_all(&[matches!(self.parity, Parity::Odd) as u8])?;
        w.write_all(&(self.k as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(r: &mut dyn Read) -> Result<GridField> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::CorruptDump(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 8];
        let mut read_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let n = read_u64(r)? as usize;
        let kk = read_u64(r)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let parity = match tag[0] {
            0 => Parity::Even,
            1 => Parity::Odd,
            other => return Err(Error::CorruptDump(format!("bad parity tag {other}"))),
        };
        let k = read_u64(r)? as usize;
        let grid = StaggeredGrid::new(n, kk).map_err(|e| Error::CorruptDump(e.to_string()))?;
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        Ok(GridField { grid, parity, k, values })
    }
}

const DUMP_MAGIC: &[u8; 4] = b"LFGF";

/// Quadrature settings for cell averages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    /// Gauss-Legendre points per sub-interval.
    pub order: usize,
    /// Sub-intervals per cell.
    pub panels: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature { order: 8, panels: 4 }
    }
}

impl Quadrature {
    pub(crate) fn rule(&self) -> Result<GaussLegendre> {
        GaussLegendre::new(self.order.max(2)).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub(crate) fn integrate(&self, rule: &GaussLegendre, a: f64, b: f64, f: &dyn Fn(f64) -> f64) -> f64 {
        let h = (b - a) / self.panels as f64;
        (0..self.panels)
            .map(|i| {
                let lo = a + h * i as f64;
                rule.integrate(lo, lo + h, f)
            })
            .sum()
    }
}

pub const MEAN_TOLERANCE: f64 = 1e-8;

fn check_mean(u0: &dyn Fn(f64) -> f64, quad: &Quadrature, rule: &GaussLegendre) -> Result<()> {
    let panels = 256;
    let mean: f64 = (0..panels)
        .map(|i| {
            let a = i as f64 / panels as f64;
            quad.integrate(rule, a, a + 1.0 / panels as f64, u0)
        })
        .sum();
    if mean.abs() > MEAN_TOLERANCE {
        return Err(Error::NonZeroMean { mean, tolerance: MEAN_TOLERANCE });
    }
    Ok(())
}

/// Cell averages of `u0` over `[x_m - dx, x_m + dx)` at the even columns of
/// level 0, exactly re-centred to zero mean.
///
/// `bound` is the `r` of the admissible class `|u0| <= r`, checked at the
/// quadrature nodes when given.
pub fn discretize_u0(
    grid: StaggeredGrid,
    u0: &dyn Fn(f64) -> f64,
    quad: &Quadrature,
    bound: Option<f64>,
) -> Result<GridField> {
    let rule = quad.rule()?;
    check_mean(u0, quad, &rule)?;
    let dx = grid.dx();
    let mut peak: f64 = 0.0;
    let mut field = GridField::zeros(grid, Parity::Even, 0);
    for j in 0..grid.n {
        let xm = field.x(j);
        field.values[j] = quad.integrate(&rule, xm - dx, xm + dx, u0) / (2.0 * dx);
        if bound.is_some() {
            for i in 0..=16 {
                peak = peak.max(u0(xm - dx + 2.0 * dx * i as f64 / 16.0).abs());
            }
        }
    }
    if let Some(r) = bound {
        if peak > r * (1.0 + 1e-12) {
            return Err(Error::InitialDataTooLarge { bound: r, observed: peak });
        }
    }
    let mean = field.values.iter().sum::<f64>() / grid.n as f64;
    field.values.iter_mut().for_each(|v| *v -= mean);
    Ok(field)
}

/// Discrete antiderivative of an even field: the odd field at the same level
/// with `D_x v = u` and `v = anchor` at the column just left of the first
/// stored `u` column.
pub fn integrate_field(u: &GridField, anchor: f64) -> Result<GridField> {
    u.expect_parity(Parity::Even)?;
    let two_dx = 2.0 * u.grid.dx();
    let mut v = GridField::zeros(u.grid, Parity::Odd, u.k);
    let first = u.column(0);
    let mut acc = anchor;
    v.set(first - 1, anchor);
    for j in 0..u.grid.n - 1 {
        acc += u.values[j] * two_dx;
        v.set(u.column(j) + 1, acc);
    }
    Ok(v)
}

/// `v0_Delta` at the odd columns of level 0, built by telescoping sums of the
/// cell averages so that `D_x v0 = u0_Delta` holds to rounding.
/// `anchor` is the value at `x = -dx`.
pub fn discretize_v0(grid: StaggeredGrid, u0: &dyn Fn(f64) -> f64, quad: &Quadrature, anchor: f64) -> Result<GridField> {
    let u = discretize_u0(grid, u0, quad, None)?;
    integrate_field(&u, anchor)
}

/// Central difference `D_x` of an odd field onto the even columns.
pub fn u_from_v(v: &GridField) -> Result<GridField> {
    v.expect_parity(Parity::Odd)?;
    let two_dx = 2.0 * v.grid.dx();
    Ok(GridField::from_fn(v.grid, Parity::Even, v.k, |m| (v.at(m + 1) - v.at(m - 1)) / two_dx))
}

fn snapshot(history: &[GridField], t: f64) -> Result<&GridField> {
    let out_of_range = || {
        let start = history.first().map(|f| f.t()).unwrap_or(f64::NAN);
        let end = history.last().map(|f| f.t()).unwrap_or(f64::NAN);
        Error::OutsideHistory { t, start, end }
    };
    let grid = history.first().ok_or_else(out_of_range)?.grid;
    let level = grid.level_of(t);
    if level < 0 {
        return Err(out_of_range());
    }
    let level = level as usize;
    let pos = history.partition_point(|f| f.k < level);
    match history.get(pos) {
        Some(f) if f.k == level => Ok(f),
        _ => Err(out_of_range()),
    }
}

/// Step-function reconstruction `u_Delta(x, t) = u^k_m` on
/// `[x_{m-1}, x_{m+1}) x [t_k, t_{k+1})`. `history` must be sorted by level.
pub fn eval_u_delta(history: &[GridField], x: f64, t: f64) -> Result<f64> {
    let f = snapshot(history, t)?;
    f.expect_parity(Parity::Even)?;
    Ok(eval_step(f, x))
}

pub(crate) fn eval_step(f: &GridField, x: f64) -> f64 {
    let o = f.offset();
    let s = x / f.grid.dx();
    let m = 2 * ((s - o as f64 + 1.0) / 2.0).floor() as i64 + o;
    f.at(m)
}

/// Piecewise-linear reconstruction
/// `v_Delta(x, t) = v^k_{m-1} + D_x v^k_{m+1} (x - x_{m-1})` on `[x_{m-1}, x_{m+1})`.
pub fn eval_v_delta(history: &[GridField], x: f64, t: f64) -> Result<f64> {
    let f = snapshot(history, t)?;
    f.expect_parity(Parity::Odd)?;
    Ok(eval_linear(f, x))
}

pub(crate) fn eval_linear(f: &GridField, x: f64) -> f64 {
    let o = f.offset();
    let dx = f.grid.dx();
    let s = x / dx;
    let left = 2 * ((s - o as f64) / 2.0).floor() as i64 + o;
    let a = f.at(left);
    let b = f.at(left + 2);
    a + (b - a) / (2.0 * dx) * (x - left as f64 * dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(y: f64) -> f64 {
        (2.0 * PI * y).sin()
    }

    #[test]
    fn grid_validation() {
        assert!(StaggeredGrid::new(0, 4).is_err());
        assert!(StaggeredGrid::new(8, 4).is_err());
        let g = StaggeredGrid::new(4, 8).unwrap();
        assert_eq!(g.dx(), 0.125);
        assert_eq!(g.dt(), 1.0 / 16.0);
        assert_eq!(g.lambda(), 0.5);
    }

    #[test]
    fn parity_and_periodic_indexing() {
        let g = StaggeredGrid::new(4, 4).unwrap();
        let f = GridField::from_fn(g, Parity::Even, 1, |m| m as f64);
        assert_eq!(f.offset(), 1);
        for j in 0..4 {
            let m = f.column(j);
            assert_eq!((m + 1) % 2, 0);
            assert_eq!(f.at(m), f.at(m + 8));
            assert_eq!(f.at(m), f.at(m - 8));
        }
        let v = GridField::zeros(g, Parity::Odd, 1);
        assert_eq!(v.offset(), 0);
    }

    #[test]
    fn zero_data_discretizes_to_zero() {
        let g = StaggeredGrid::new(8, 8).unwrap();
        let u = discretize_u0(g, &|_| 0.0, &Quadrature::default(), None).unwrap();
        assert!(u.values.iter().all(|&v| v == 0.0));
        let v = discretize_v0(g, &|_| 0.0, &Quadrature::default(), 0.3).unwrap();
        assert!(v.values.iter().all(|&x| x == 0.3));
    }

    #[test]
    fn sine_half_period_averages_vanish() {
        let g = StaggeredGrid::new(2, 2).unwrap();
        let u = discretize_u0(g, &sine, &Quadrature::default(), None).unwrap();
        assert!(u.at(0).abs() < 1e-14);
        assert!(u.at(2).abs() < 1e-14);
    }

    #[test]
    fn sine_cell_average_matches_closed_form() {
        let g = StaggeredGrid::new(4, 4).unwrap();
        let u = discretize_u0(g, &sine, &Quadrature::default(), None).unwrap();
        // (1/(2dx)) int_{1/8}^{3/8} sin(2 pi y) dy = 4 sqrt(2) / (2 pi)
        let exact = 4.0 * 2f64.sqrt() / (2.0 * PI);
        assert!((u.at(2) - exact).abs() < 1e-13);
        assert!((u.at(2) - 0.9003).abs() < 1e-4);
    }

    #[test]
    fn nonzero_mean_rejected() {
        let g = StaggeredGrid::new(4, 4).unwrap();
        let err = discretize_u0(g, &|y| 0.1 + sine(y), &Quadrature::default(), None).unwrap_err();
        assert!(matches!(err, Error::NonZeroMean { .. }));
    }

    #[test]
    fn bound_enforced() {
        let g = StaggeredGrid::new(4, 4).unwrap();
        assert!(discretize_u0(g, &sine, &Quadrature::default(), Some(0.5)).is_err());
        assert!(discretize_u0(g, &sine, &Quadrature::default(), Some(1.0)).is_ok());
    }

    #[test]
    fn v0_differences_reproduce_u0() {
        let g = StaggeredGrid::new(16, 16).unwrap();
        let f = |y: f64| 0.3 * sine(y) + 0.2 * (6.0 * PI * y).cos();
        let u = discretize_u0(g, &f, &Quadrature::default(), None).unwrap();
        let v = discretize_v0(g, &f, &Quadrature::default(), 0.0).unwrap();
        assert_eq!(v.at(-1), 0.0);
        let back = u_from_v(&v).unwrap();
        assert!(back.sup_distance(&u) <= 1e-14, "{}", back.sup_distance(&u));
    }

    #[test]
    fn v0_approximates_antiderivative() {
        let mut errs = Vec::new();
        for n in [16, 32, 64] {
            let g = StaggeredGrid::new(n, n).unwrap();
            let anti = |y: f64| -(2.0 * PI * y).cos() / (2.0 * PI);
            let v = discretize_v0(g, &sine, &Quadrature::default(), anti(-g.dx())).unwrap();
            // exact at the nodes; the linear pieces deviate by O(dx^2)
            let nodes = (0..n).map(|j| (v.values[j] - anti(v.x(j))).abs()).fold(0.0, f64::max);
            assert!(nodes < 1e-14);
            let err = (0..8 * n)
                .map(|i| {
                    let x = (i as f64 + 0.5) / (8 * n) as f64;
                    (eval_linear(&v, x) - anti(x)).abs()
                })
                .fold(0.0, f64::max);
            errs.push(err);
        }
        // second order at the nodes
        assert!(errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5, "{errs:?}");
    }

    #[test]
    fn differencing_constant_and_linear_data() {
        let g = StaggeredGrid::new(8, 8).unwrap();
        let c = GridField::from_fn(g, Parity::Odd, 0, |_| 2.5);
        assert!(u_from_v(&c).unwrap().values.iter().all(|&v| v == 0.0));
        // v_{m+1} = a (m+1) away from the wrap seam
        let a = 0.01;
        let lin = GridField::from_fn(g, Parity::Odd, 0, |m| a * m as f64);
        let u = u_from_v(&lin).unwrap();
        for m in [2, 4, 6, 8, 10, 12] {
            assert!((u.at(m) - a / g.dx()).abs() < 1e-12);
        }
        assert!(u_from_v(&GridField::zeros(g, Parity::Even, 0)).is_err());
    }

    #[test]
    fn reconstructions() {
        let g = StaggeredGrid::new(8, 8).unwrap();
        let f = |y: f64| 0.4 * sine(y);
        let u = discretize_u0(g, &f, &Quadrature::default(), None).unwrap();
        let v = discretize_v0(g, &f, &Quadrature::default(), 0.0).unwrap();
        let hu = vec![u.clone()];
        let hv = vec![v.clone()];
        let dx = g.dx();
        // exact nodes
        for j in 0..g.n {
            assert_eq!(eval_u_delta(&hu, u.x(j), 0.0).unwrap(), u.values[j]);
            assert!((eval_v_delta(&hv, v.x(j), 0.0).unwrap() - v.values[j]).abs() < 1e-15);
        }
        // cell midpoint of v is the mean of its two odd nodes
        let mid = eval_v_delta(&hv, 0.0, 0.0).unwrap();
        assert!((mid - 0.5 * (v.at(-1) + v.at(1))).abs() < 1e-15);
        // slope of v inside a cell is u
        for &x in &[0.03, 0.27, 0.51, 0.77] {
            let m = 2 * ((x / dx + 1.0) / 2.0).floor() as i64;
            let (xl, xr) = ((m - 1) as f64 * dx, (m + 1) as f64 * dx);
            let h = 0.25 * dx;
            let (a, b) = ((x - h).max(xl + 1e-12), (x + h).min(xr - 1e-12));
            let slope = (eval_v_delta(&hv, b, 0.0).unwrap() - eval_v_delta(&hv, a, 0.0).unwrap()) / (b - a);
            assert!((slope - eval_u_delta(&hu, x, 0.0).unwrap()).abs() < 1e-10);
        }
        // continuity across cell edges
        for m in [-1i64, 1, 3, 5] {
            let xe = m as f64 * dx;
            let l = eval_v_delta(&hv, xe - 1e-12, 0.0).unwrap();
            let r = eval_v_delta(&hv, xe, 0.0).unwrap();
            assert!((l - r).abs() < 1e-10);
        }
        assert!(eval_u_delta(&hu, 0.1, 0.5).is_err());
    }

    #[test]
    fn dump_roundtrip_and_csv() {
        let g = StaggeredGrid::new(4, 8).unwrap();
        let f = GridField::from_fn(g, Parity::Odd, 3, |m| m as f64 * 0.1);
        let mut buf = Vec::new();
        f.write_dump(&mut buf).unwrap();
        let back = GridField::read_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(back, f);
        buf[0] = b'X';
        assert!(GridField::read_dump(&mut buf.as_slice()).is_err());
        let mut csv = Vec::new();
        f.write_csv_to(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("m,x_m,value\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
