//! Reference solutions, error norms, order fits and the long-run experiments
//! built on top of the scheme.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::{lagrangian_jet, lagrangian_shifted, AprioriConstants, Flux, FluxModel};
use crate::grid::{
    discretize_v0, eval_linear, eval_step, integrate_field, u_from_v, GridField, Parity, Quadrature, StaggeredGrid,
};
use crate::periodic::{find_periodic_u, PeriodicState};
use crate::scheme::{advance, cfl_margin, entropy_hypotheses, one_sided_lipschitz, solve, step, EntropyHypotheses, SchemeConfig};
use crate::stochastic::{minimizing_velocity_field, sample_paths, WalkCone};

/// Zero-mean periodic initial data with a closed-form antiderivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialProfile {
    Zero,
    /// `amplitude sin(2 pi mode x)`
    Sine { amplitude: f64, mode: u32 },
    /// `amplitude (1 - 2 frac(x))`, with an upward jump at integers.
    Sawtooth { amplitude: f64 },
}

impl InitialProfile {
    pub fn u0(&self, x: f64) -> f64 {
        match *self {
            InitialProfile::Zero => 0.0,
            InitialProfile::Sine { amplitude, mode } => amplitude * (2.0 * PI * mode as f64 * x).sin(),
            InitialProfile::Sawtooth { amplitude } => amplitude * (1.0 - 2.0 * x.rem_euclid(1.0)),
        }
    }

    /// Antiderivative of [`u0`](Self::u0) vanishing at `x = 0`.
    pub fn v0(&self, x: f64) -> f64 {
        match *self {
            InitialProfile::Zero => 0.0,
            InitialProfile::Sine { amplitude, mode } => {
                let w = 2.0 * PI * mode as f64;
                amplitude * (1.0 - (w * x).cos()) / w
            }
            InitialProfile::Sawtooth { amplitude } => {
                let y = x.rem_euclid(1.0);
                amplitude * (y - y * y)
            }
        }
    }

    /// `sup |u0|`
    pub fn bound(&self) -> f64 {
        match *self {
            InitialProfile::Zero => 0.0,
            InitialProfile::Sine { amplitude, .. } | InitialProfile::Sawtooth { amplitude } => amplitude.abs(),
        }
    }

    /// Odd field at level 0 with `v0_Delta(-dx) = v0(-dx)`.
    pub fn discretize_v(&self, grid: StaggeredGrid) -> Result<GridField> {
        discretize_v0(grid, &|x| self.u0(x), &Quadrature::default(), self.v0(-grid.dx()))
    }

    pub fn discretize_u(&self, grid: StaggeredGrid) -> Result<GridField> {
        u_from_v(&self.discretize_v(grid)?)
    }
}

fn require_space_time_independent(model: &FluxModel) -> Result<()> {
    if model.is_space_time_independent() {
        Ok(())
    } else {
        Err(Error::NotSpaceTimeIndependent(model.name()))
    }
}

/// Level holding time `t` exactly.
pub fn exact_level(grid: StaggeredGrid, t: f64) -> Result<usize> {
    let s = t / grid.dt();
    if t < 0.0 || (s - s.round()).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("t = {t} is not a time level of the {}x{} grid", grid.n, grid.k)));
    }
    Ok(s.round() as usize)
}

/// `min_y { t L^(c)((x - y)/t) + v0(y) } + h t` for an x,t-independent flux,
/// with the minimizing `y`. `lip` bounds `|v0'|`.
fn hopf_lax_min(model: &FluxModel, v0: &dyn Fn(f64) -> f64, lip: f64, c: f64, x: f64, t: f64, y_resolution: usize) -> Result<(f64, f64)> {
    if t <= 0.0 {
        return Ok((v0(x), x));
    }
    // the optimal velocity solves L^(c)_xi = v0'(y), so it lies in H_p([c - lip, c + lip])
    let a = model.h_p(0.0, 0.0, c - lip);
    let b = model.h_p(0.0, 0.0, c + lip);
    let pad = 1e-3 + 0.01 * (b - a).abs();
    let (xi_lo, xi_hi) = (a.min(b) - pad, a.max(b) + pad);
    let (y_lo, y_hi) = (x - t * xi_hi, x - t * xi_lo);
    let f = |y: f64| -> Result<f64> { Ok(t * lagrangian_shifted(model, 0.0, 0.0, (x - y) / t, c)? + v0(y)) };
    let n = y_resolution.max(16);
    let dy = (y_hi - y_lo) / (n - 1) as f64;
    let mut best = (f64::INFINITY, y_lo, 0usize);
    for i in 0..n {
        let y = y_lo + dy * i as f64;
        let val = f(y)?;
        if val < best.0 {
            best = (val, y, i);
        }
    }
    // golden section on the neighbouring cells
    let (mut lo, mut hi) = (best.1 - dy, best.1 + dy);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut p = hi - g * (hi - lo);
    let mut q = lo + g * (hi - lo);
    let (mut fp, mut fq) = (f(p)?, f(q)?);
    while hi - lo > 1e-13 * (1.0 + x.abs()) {
        if fp <= fq {
            hi = q;
            q = p;
            fq = fp;
            p = hi - g * (hi - lo);
            fp = f(p)?;
        } else {
            lo = p;
            p = q;
            fp = fq;
            q = lo + g * (hi - lo);
            fq = f(q)?;
        }
    }
    let y = 0.5 * (lo + hi);
    let fy = f(y)?;
    Ok(if fy < best.0 { (fy, y) } else { (best.0, best.1) })
}

/// Hopf-Lax value of the viscosity solution for an x,t-independent flux.
pub fn hopf_lax_reference(
    model: &FluxModel,
    v0: &dyn Fn(f64) -> f64,
    lip: f64,
    c: f64,
    h: f64,
    x: f64,
    t: f64,
    y_resolution: usize,
) -> Result<f64> {
    require_space_time_independent(model)?;
    Ok(hopf_lax_min(model, v0, lip, c, x, t, y_resolution)?.0 + h * t)
}

/// Foot `y` of the straight characteristic through `(x, t)`; valid before
/// the first shock, where `y + t H_p(c + u0(y))` is increasing.
fn characteristic_foot(model: &FluxModel, profile: &InitialProfile, c: f64, x: f64, t: f64) -> f64 {
    let speed = |y: f64| model.h_p(0.0, 0.0, c + profile.u0(y));
    let r = profile.bound();
    let s_max = model.h_p(0.0, 0.0, c - r).abs().max(model.h_p(0.0, 0.0, c + r).abs());
    let (mut lo, mut hi) = (x - t * s_max - 1e-9, x + t * s_max + 1e-9);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid + t * speed(mid) - x < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 * (1.0 + x.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    FineMesh,
    HopfLax,
    Characteristics,
}

#[derive(Clone, Debug)]
enum Source {
    Fine { snapshots: Vec<(GridField, GridField)> },
    HopfLax { model: FluxModel, profile: InitialProfile, c: f64, h: f64, y_resolution: usize },
    Characteristics { model: FluxModel, profile: InitialProfile, c: f64, h: f64 },
}

/// Something that can evaluate `u` and `v` at `(x, t)`.
#[derive(Clone, Debug)]
pub struct ReferenceSolution {
    pub kind: ReferenceKind,
    pub resolution: String,
    source: Source,
}

impl ReferenceSolution {
    /// Runs `cfg` from `profile` and keeps `(u, v)` at each of `times`.
    pub fn fine_mesh(cfg: &SchemeConfig, profile: &InitialProfile, times: &[f64]) -> Result<Self> {
        let mut levels: Vec<usize> = times.iter().map(|&t| exact_level(cfg.grid, t)).collect::<Result<_>>()?;
        levels.sort_unstable();
        levels.dedup();
        let mut v = profile.discretize_v(cfg.grid)?;
        let mut snapshots = Vec::with_capacity(levels.len());
        for lv in levels {
            v = advance(cfg, &v, lv - v.k)?;
            snapshots.push((u_from_v(&v)?, v.clone()));
        }
        Ok(ReferenceSolution {
            kind: ReferenceKind::FineMesh,
            resolution: format!("N={} K={}", cfg.grid.n, cfg.grid.k),
            source: Source::Fine { snapshots },
        })
    }

    pub fn hopf_lax(model: FluxModel, profile: InitialProfile, c: f64, h: f64, y_resolution: usize) -> Result<Self> {
        require_space_time_independent(&model)?;
        Ok(ReferenceSolution {
            kind: ReferenceKind::HopfLax,
            resolution: format!("{y_resolution} endpoint samples"),
            source: Source::HopfLax { model, profile, c, h, y_resolution },
        })
    }

    pub fn characteristics(model: FluxModel, profile: InitialProfile, c: f64, h: f64) -> Result<Self> {
        require_space_time_independent(&model)?;
        Ok(ReferenceSolution {
            kind: ReferenceKind::Characteristics,
            resolution: "exact feet".into(),
            source: Source::Characteristics { model, profile, c, h },
        })
    }

    /// The stored fine-mesh snapshot pair at time `t`, if any.
    pub fn fine_snapshot(&self, t: f64) -> Option<(&GridField, &GridField)> {
        match &self.source {
            Source::Fine { snapshots } => snapshots.iter().find(|(u, _)| (u.t() - t).abs() < 1e-12).map(|(u, v)| (u, v)),
            _ => None,
        }
    }

    fn missing(&self, t: f64) -> Error {
        Error::OutsideHistory { t, start: f64::NAN, end: f64::NAN }
    }

    pub fn u(&self, x: f64, t: f64) -> Result<f64> {
        match &self.source {
            Source::Fine { .. } => Ok(eval_step(self.fine_snapshot(t).ok_or_else(|| self.missing(t))?.0, x.rem_euclid(1.0))),
            Source::HopfLax { model, profile, c, y_resolution, .. } => {
                if t <= 0.0 {
                    return Ok(profile.u0(x));
                }
                let (_, y) = hopf_lax_min(model, &|y| profile.v0(y), profile.bound(), *c, x, t, *y_resolution)?;
                Ok(lagrangian_jet(model, 0.0, 0.0, (x - y) / t, *c)?.d_xi)
            }
            Source::Characteristics { model, profile, c, .. } => Ok(profile.u0(characteristic_foot(model, profile, *c, x, t))),
        }
    }

    pub fn v(&self, x: f64, t: f64) -> Result<f64> {
        match &self.source {
            Source::Fine { .. } => Ok(eval_linear(self.fine_snapshot(t).ok_or_else(|| self.missing(t))?.1, x.rem_euclid(1.0))),
            Source::HopfLax { model, profile, c, h, y_resolution } => {
                hopf_lax_reference(model, &|y| profile.v0(y), profile.bound(), *c, *h, x, t, *y_resolution)
            }
            Source::Characteristics { model, profile, c, h } => {
                if t <= 0.0 {
                    return Ok(profile.v0(x));
                }
                let y = characteristic_foot(model, profile, *c, x, t);
                Ok(t * lagrangian_shifted(model, 0.0, 0.0, (x - y) / t, *c)? + profile.v0(y) + h * t)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L1,
    Sup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub t: f64,
    /// `"u"` for even fields, `"v"` for odd ones.
    pub field: String,
    pub l1: Option<f64>,
    pub sup: Option<f64>,
}

fn breakpoints(f: &GridField, into: &mut Vec<f64>) {
    let shift = match f.parity {
        Parity::Even => -1,
        Parity::Odd => 0,
    };
    for j in 0..f.values.len() {
        into.push(f.grid.x(f.column(j) + shift).rem_euclid(1.0));
    }
}

/// Exact `L1` and sup distance between two fields of the same parity,
/// possibly on different grids (step functions for `u`, piecewise linear for `v`).
pub fn field_distance(a: &GridField, b: &GridField) -> Result<(f64, f64)> {
    b.expect_parity(a.parity)?;
    let mut pts = vec![0.0, 1.0];
    breakpoints(a, &mut pts);
    breakpoints(b, &mut pts);
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|p, q| (*p - *q).abs() < 1e-14);
    let (mut l1, mut sup) = (0.0, 0.0f64);
    for w in pts.windows(2) {
        let (p, q) = (w[0], w[1]);
        let len = q - p;
        match a.parity {
            Parity::Even => {
                let mid = 0.5 * (p + q);
                let d = (eval_step(a, mid) - eval_step(b, mid)).abs();
                l1 += d * len;
                sup = sup.max(d);
            }
            Parity::Odd => {
                let dp = eval_linear(a, p) - eval_linear(b, p);
                let dq = eval_linear(a, q) - eval_linear(b, q);
                l1 += if dp * dq >= 0.0 {
                    0.5 * (dp.abs() + dq.abs()) * len
                } else {
                    0.5 * (dp * dp + dq * dq) / (dp.abs() + dq.abs()) * len
                };
                sup = sup.max(dp.abs()).max(dq.abs());
            }
        }
    }
    Ok((l1, sup))
}

/// Sample points per cell used for sup norms against smooth references.
pub const SUP_SAMPLES_PER_CELL: usize = 8;

/// Distance between the reconstruction of `field` and `reference` at time
/// `field.t()`. Fine-mesh references are compared exactly; function
/// references by Gauss quadrature per cell and dense sampling.
pub fn field_error(field: &GridField, reference: &ReferenceSolution, norms: &[Norm]) -> Result<ErrorReport> {
    let t = field.t();
    let name = match field.parity {
        Parity::Even => "u",
        Parity::Odd => "v",
    };
    let want = |n: Norm| norms.contains(&n);
    if let Some((u, v)) = reference.fine_snapshot(t) {
        let other = if field.parity == Parity::Even { u } else { v };
        let (l1, sup) = field_distance(field, other)?;
        return Ok(ErrorReport { t, field: name.into(), l1: want(Norm::L1).then_some(l1), sup: want(Norm::Sup).then_some(sup) });
    }
    if matches!(reference.kind, ReferenceKind::FineMesh) {
        return Err(reference.missing(t));
    }
    let two_dx = 2.0 * field.grid.dx();
    let shift = if field.parity == Parity::Even { -1 } else { 0 };
    let local = |x: f64| match field.parity {
        Parity::Even => eval_step(field, x),
        Parity::Odd => eval_linear(field, x),
    };
    let exact = |x: f64| match field.parity {
        Parity::Even => reference.u(x, t),
        Parity::Odd => reference.v(x, t),
    };
    let cells: Vec<f64> = (0..field.values.len()).map(|j| field.grid.x(field.column(j) + shift)).collect();
    let per_cell: Vec<(f64, f64)> = cells
        .par_iter()
        .map(|&a| -> Result<(f64, f64)> {
            let mut sup = 0.0f64;
            if want(Norm::Sup) {
                for i in 0..SUP_SAMPLES_PER_CELL {
                    let frac = match field.parity {
                        Parity::Even => (i as f64 + 0.5) / SUP_SAMPLES_PER_CELL as f64,
                        Parity::Odd => i as f64 / SUP_SAMPLES_PER_CELL as f64,
                    };
                    let x = a + frac * two_dx;
                    sup = sup.max((local(x) - exact(x)?).abs());
                }
            }
            let mut l1 = 0.0;
            if want(Norm::L1) {
                let quad = Quadrature::default();
                let rule = quad.rule()?;
                // a failing reference poisons the integral with NaN
                l1 = quad.integrate(&rule, a, a + two_dx, &|x| exact(x).map_or(f64::NAN, |r| (local(x) - r).abs()));
                if l1.is_nan() {
                    return Err(Error::InvalidArgument(format!("reference failed on cell starting at {a}")));
                }
            }
            Ok((l1, sup))
        })
        .collect::<Result<_>>()?;
    let l1 = per_cell.iter().map(|p| p.0).sum::<f64>();
    let sup = per_cell.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(ErrorReport { t, field: name.into(), l1: want(Norm::L1).then_some(l1), sup: want(Norm::Sup).then_some(sup) })
}

/// [`field_error`] on the snapshot of `history` at time `t`.
pub fn error_report(history: &[GridField], reference: &ReferenceSolution, t: f64, norms: &[Norm]) -> Result<ErrorReport> {
    let grid = history.first().ok_or(Error::OutsideHistory { t, start: f64::NAN, end: f64::NAN })?.grid;
    let level = exact_level(grid, t)?;
    let f = history.iter().find(|f| f.k == level).ok_or_else(|| Error::OutsideHistory {
        t,
        start: history.first().map(|f| f.t()).unwrap_or(f64::NAN),
        end: history.last().map(|f| f.t()).unwrap_or(f64::NAN),
    })?;
    field_error(f, reference, norms)
}

/// Least-squares slope of `log error` against `log h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub h: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    /// All errors vanished; the slope is meaningless.
    pub exact: bool,
    /// Errors strictly decrease as `h` decreases.
    pub monotone: bool,
}

impl OrderFit {
    /// Local orders between consecutive meshes.
    pub fn local_orders(&self) -> Vec<f64> {
        self.h
            .windows(2)
            .zip(self.errors.windows(2))
            .map(|(h, e)| (e[1] / e[0]).ln() / (h[1] / h[0]).ln())
            .collect()
    }
}

pub fn fit_order(h: &[f64], errors: &[f64]) -> Result<OrderFit> {
    if h.len() != errors.len() || h.len() < 3 {
        return Err(Error::InvalidArgument("an order fit needs at least 3 (h, error) pairs".into()));
    }
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| h[b].total_cmp(&h[a]));
    let monotone = order.windows(2).all(|w| errors[w[1]] < errors[w[0]]);
    let pts: Vec<(f64, f64)> = order.iter().filter(|&&i| errors[i] > 0.0).map(|&i| (h[i].ln(), errors[i].ln())).collect();
    let base = OrderFit { h: h.to_vec(), errors: errors.to_vec(), slope: f64::NAN, intercept: f64::NAN, residual: 0.0, exact: false, monotone };
    if pts.len() < 2 {
        return Ok(OrderFit { exact: errors.iter().all(|&e| e == 0.0), slope: f64::INFINITY, ..base });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / n).sqrt();
    Ok(OrderFit { slope, intercept, residual, ..base })
}

/// What a convergence study measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    VSup,
    UL1,
    USup,
}

impl Quantity {
    fn parity(self) -> Parity {
        match self {
            Quantity::VSup => Parity::Odd,
            _ => Parity::Even,
        }
    }

    fn norm(self) -> Norm {
        match self {
            Quantity::UL1 => Norm::L1,
            _ => Norm::Sup,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// Hopf-Lax for x,t-independent fluxes, fine mesh otherwise.
    #[default]
    Auto,
    HopfLax,
    FineMesh,
    Characteristics,
}

#[derive(Clone, Debug)]
pub struct ConvergenceProblem {
    pub model: FluxModel,
    pub c: f64,
    pub h: f64,
    pub profile: InitialProfile,
    pub t: f64,
    pub quantity: Quantity,
    pub reference: ReferencePolicy,
    /// `K = k_factor N` on every mesh, so `lambda` is fixed.
    pub k_factor: usize,
    /// Fine-mesh reference uses `fine_factor` times the finest `N` (at least 4).
    pub fine_factor: usize,
    pub y_resolution: usize,
}

impl ConvergenceProblem {
    pub fn new(model: FluxModel, profile: InitialProfile, t: f64, quantity: Quantity) -> Self {
        ConvergenceProblem {
            model,
            c: 0.0,
            h: 0.0,
            profile,
            t,
            quantity,
            reference: ReferencePolicy::Auto,
            k_factor: 1,
            fine_factor: 4,
            y_resolution: 2001,
        }
    }

    fn config(&self, n: usize) -> Result<SchemeConfig> {
        let grid = StaggeredGrid::new(n, self.k_factor.max(1) * n)?;
        Ok(SchemeConfig::new(self.model.clone(), grid, self.c).with_h(self.h))
    }

    fn build_reference(&self, finest: usize) -> Result<ReferenceSolution> {
        let policy = match self.reference {
            ReferencePolicy::Auto if self.model.is_space_time_independent() => ReferencePolicy::HopfLax,
            ReferencePolicy::Auto => ReferencePolicy::FineMesh,
            p => p,
        };
        match policy {
            ReferencePolicy::HopfLax => ReferenceSolution::hopf_lax(self.model.clone(), self.profile, self.c, self.h, self.y_resolution),
            ReferencePolicy::Characteristics => ReferenceSolution::characteristics(self.model.clone(), self.profile, self.c, self.h),
            _ => ReferenceSolution::fine_mesh(&self.config(self.fine_factor.max(4) * finest)?, &self.profile, &[self.t]),
        }
    }

    /// Runs one mesh to `t` and returns the measured field.
    pub fn run(&self, n: usize) -> Result<GridField> {
        let cfg = self.config(n)?;
        let level = exact_level(cfg.grid, self.t)?;
        let v = advance(&cfg, &self.profile.discretize_v(cfg.grid)?, level)?;
        match self.quantity.parity() {
            Parity::Odd => Ok(v),
            Parity::Even => u_from_v(&v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub quantity: Quantity,
    pub reference: ReferenceKind,
    pub reference_resolution: String,
    pub t: f64,
    pub meshes: Vec<usize>,
    pub fit: OrderFit,
}

impl StudyResult {
    /// CSV with columns `mesh,dx,error,order` (local order, blank on the first row).
    pub fn write_csv_to(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "mesh,dx,error,order")?;
        let orders = self.fit.local_orders();
        for (i, n) in self.meshes.iter().enumerate() {
            let order = if i == 0 { String::new() } else { format!("{:.17e}", orders[i - 1]) };
            writeln!(w, "{},{:.17e},{:.17e},{}", n, self.fit.h[i], self.fit.errors[i], order)?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

/// Errors of `problem` on each mesh (in parallel) and the fitted order.
pub fn convergence_study(problem: &ConvergenceProblem, meshes: &[usize]) -> Result<StudyResult> {
    if meshes.len() < 3 {
        return Err(Error::InvalidArgument("a convergence study needs at least 3 meshes".into()));
    }
    let finest = *meshes.iter().max().unwrap();
    let reference = problem.build_reference(finest)?;
    let norm = problem.quantity.norm();
    let errors: Vec<f64> = meshes
        .par_iter()
        .map(|&n| {
            let field = problem.run(n)?;
            let rep = field_error(&field, &reference, &[norm])?;
            Ok(rep.l1.or(rep.sup).unwrap_or(f64::NAN))
        })
        .collect::<Result<_>>()?;
    let h: Vec<f64> = meshes.iter().map(|&n| 1.0 / (2 * n) as f64).collect();
    Ok(StudyResult {
        quantity: problem.quantity,
        reference: reference.kind,
        reference_resolution: reference.resolution.clone(),
        t: problem.t,
        meshes: meshes.to_vec(),
        fit: fit_order(&h, &errors)?,
    })
}

/// One row of the one-sided Lipschitz decay check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub k: usize,
    pub t: f64,
    pub e_k: f64,
    /// `2 e^{eta t_k} / (H*_pp t_k)`
    pub decay_bound: f64,
    /// `4 e eta / H*_pp` once `k > k(1/eta)`.
    pub late_bound: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnvelopeReport {
    pub hypotheses: EntropyHypotheses,
    pub late_level: usize,
    pub rows: Vec<EnvelopeRow>,
    pub decay_ok: bool,
    pub late_ok: bool,
}

/// Relative slack on the analytic envelopes.
const ENVELOPE_SLACK: f64 = 1e-12;

/// Steps `u0` for `steps` levels and compares `E^k` with both envelopes.
pub fn lipschitz_envelope(cfg: &SchemeConfig, u0: &GridField, steps: usize, consts: &AprioriConstants) -> Result<EnvelopeReport> {
    u0.expect_parity(Parity::Even)?;
    let hypotheses = entropy_hypotheses(&cfg.model, consts, cfg.grid, &[cfg.c], 32);
    let late_level = cfg.grid.level_of(1.0 / consts.eta).max(0) as usize;
    let mut rows = Vec::with_capacity(steps);
    let mut u = u0.clone();
    for _ in 0..steps {
        u = step(&u, cfg)?;
        let t = u.t();
        rows.push(EnvelopeRow {
            k: u.k,
            t,
            e_k: one_sided_lipschitz(&u),
            decay_bound: consts.decay_envelope(t),
            late_bound: (u.k > late_level).then(|| consts.late_ceiling()),
        });
    }
    let decay_ok = rows.iter().all(|r| r.e_k <= r.decay_bound * (1.0 + ENVELOPE_SLACK));
    let late_ok = rows.iter().all(|r| r.late_bound.is_none_or(|b| r.e_k <= b * (1.0 + ENVELOPE_SLACK)));
    Ok(EnvelopeReport { hypotheses, late_level, rows, decay_ok, late_ok })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub period: usize,
    /// `max |u|` at the end of the period.
    pub max_abs: f64,
    pub min_cfl_margin: f64,
    pub max_e_k: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    pub records: Vec<PeriodRecord>,
    pub initial_margin: f64,
    /// `beta1(1) + 1`
    pub barrier: f64,
    pub late_ceiling: f64,
    pub late_level: usize,
    pub hypotheses: EntropyHypotheses,
    /// Whether the `E^k` envelopes were asserted (only under the hypotheses).
    pub envelope_checked: bool,
    pub steps: usize,
}

/// Runs `n_periods` periods and asserts, step by step: the barrier
/// `max |u| <= beta1(1) + 1` at integer times, a CFL margin of at least
/// `margin_fraction` times the initial one, and, when the decay hypotheses
/// hold, both `E^k` envelopes. The first failure aborts with its step.
pub fn stability_longrun(
    cfg: &SchemeConfig,
    u0: &GridField,
    n_periods: usize,
    consts: &AprioriConstants,
    margin_fraction: f64,
) -> Result<StabilityReport> {
    u0.expect_parity(Parity::Even)?;
    if n_periods == 0 {
        return Err(Error::InvalidArgument("n_periods must be at least 1".into()));
    }
    let hypotheses = entropy_hypotheses(&cfg.model, consts, cfg.grid, &[cfg.c], 32);
    let envelope_checked = hypotheses.all();
    let barrier = consts.beta1(1.0) + 1.0;
    let late_level = cfg.grid.level_of(1.0 / consts.eta).max(0) as usize;
    let initial_margin = cfl_margin(u0, cfg);
    let floor = margin_fraction * initial_margin;
    let per = cfg.grid.steps_per_period();
    let mut u = u0.clone();
    let mut records = Vec::with_capacity(n_periods);
    let fail = |step: usize, message: String| Error::StabilityViolation { step, message };
    for period in 1..=n_periods {
        let mut min_margin = f64::INFINITY;
        let mut max_e: f64 = f64::NEG_INFINITY;
        for _ in 0..per {
            u = step(&u, cfg)?;
            let margin = cfl_margin(&u, cfg);
            if margin < floor {
                return Err(fail(u.k, format!("CFL margin {margin} fell below {floor}")));
            }
            min_margin = min_margin.min(margin);
            let e = one_sided_lipschitz(&u);
            max_e = max_e.max(e);
            if envelope_checked {
                let bound = consts.decay_envelope(u.t());
                if e > bound * (1.0 + ENVELOPE_SLACK) {
                    return Err(fail(u.k, format!("E^k = {e} exceeds the decay envelope {bound}")));
                }
                if u.k > late_level && e > consts.late_ceiling() * (1.0 + ENVELOPE_SLACK) {
                    return Err(fail(u.k, format!("E^k = {e} exceeds the late ceiling {}", consts.late_ceiling())));
                }
            }
        }
        let max_abs = u.max_abs();
        if max_abs > barrier {
            return Err(fail(u.k, format!("max |u| = {max_abs} exceeds beta1(1) + 1 = {barrier}")));
        }
        records.push(PeriodRecord { period, max_abs, min_cfl_margin: min_margin, max_e_k: max_e });
    }
    Ok(StabilityReport {
        records,
        initial_margin,
        barrier,
        late_ceiling: consts.late_ceiling(),
        late_level,
        hypotheses,
        envelope_checked,
        steps: n_periods * per,
    })
}

/// Samples of a characteristic `x(s)` on a uniform `s` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicCurve {
    pub s: Vec<f64>,
    pub x: Vec<f64>,
    pub step: f64,
    pub source: String,
    /// Largest `|x'|` seen by the integrator.
    pub max_speed: f64,
}

impl CharacteristicCurve {
    /// Linear interpolation at `s` (clamped to the window).
    pub fn at(&self, s: f64) -> f64 {
        let n = self.s.len();
        let (s0, s1) = (self.s[0], self.s[n - 1]);
        let pos = ((s - s0) / (s1 - s0) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
        let i = (pos.floor() as usize).min(n - 2);
        let f = pos - i as f64;
        self.x[i] * (1.0 - f) + self.x[i + 1] * f
    }
}

/// Integrates `x'(s) = H_p(x, s, c + u(x, s))` from `(x0, s0)` to `s1` with
/// `steps` classical RK4 steps on the unrolled line (`s1 < s0` runs backward).
pub fn characteristic_ode(
    model: &FluxModel,
    c: f64,
    u: &dyn Fn(f64, f64) -> f64,
    x0: f64,
    s0: f64,
    s1: f64,
    steps: usize,
    source: &str,
) -> Result<CharacteristicCurve> {
    let h = (s1 - s0) / steps.max(1) as f64;
    if !(h.abs() > 1e-14 * (1.0 + s0.abs().max(s1.abs()))) {
        return Err(Error::InvalidArgument(format!("characteristic step size {h} underflows")));
    }
    let f = |x: f64, s: f64| model.h_p(x.rem_euclid(1.0), s, c + u(x, s));
    let mut xs = Vec::with_capacity(steps + 1);
    let mut ss = Vec::with_capacity(steps + 1);
    let mut x = x0;
    let mut max_speed: f64 = 0.0;
    xs.push(x);
    ss.push(s0);
    for i in 0..steps {
        let s = s0 + h * i as f64;
        let k1 = f(x, s);
        let k2 = f(x + 0.5 * h * k1, s + 0.5 * h);
        let k3 = f(x + 0.5 * h * k2, s + 0.5 * h);
        let k4 = f(x + h * k3, s + h);
        max_speed = max_speed.max(k1.abs()).max(k2.abs()).max(k3.abs()).max(k4.abs());
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        xs.push(x);
        ss.push(s0 + h * (i + 1) as f64);
    }
    Ok(CharacteristicCurve { s: ss, x: xs, step: h, source: source.into(), max_speed })
}

/// `u-bar_Delta(x, s)` of a periodic state, extended periodically in `x` and `s`.
pub fn periodic_velocity(state: &PeriodicState) -> impl Fn(f64, f64) -> f64 + Sync + '_ {
    let per = state.period.len();
    move |x: f64, s: f64| {
        let level = ((s.rem_euclid(1.0) * per as f64) + 1e-9).floor() as usize % per;
        eval_step(&state.period[level], x.rem_euclid(1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationNumber {
    pub omega: f64,
    /// Half the spread of the slopes over four sub-windows.
    pub half_width: f64,
    pub window: f64,
}

/// Minimum window, in periods, accepted by [`rotation_number`].
pub const MIN_ROTATION_WINDOW: f64 = 20.0;

/// `omega = (x(S) - x(0)) / S` with a sub-window spread as error bar.
pub fn rotation_number(curve: &CharacteristicCurve) -> Result<RotationNumber> {
    let n = curve.s.len();
    let window = curve.s[n - 1] - curve.s[0];
    if window.abs() < MIN_ROTATION_WINDOW - 1e-9 || n < 5 {
        return Err(Error::InvalidArgument(format!("rotation number needs a window of at least {MIN_ROTATION_WINDOW} periods")));
    }
    let omega = (curve.x[n - 1] - curve.x[0]) / window;
    let slopes: Vec<f64> = (0..4)
        .map(|i| {
            let a = i * (n - 1) / 4;
            let b = (i + 1) * (n - 1) / 4;
            (curve.x[b] - curve.x[a]) / (curve.s[b] - curve.s[a])
        })
        .collect();
    let hi = slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = slopes.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(RotationNumber { omega, half_width: 0.5 * (hi - lo), window })
}

/// Rotation number of the periodic state through `x0`, integrated over
/// `periods` periods with four RK4 steps per time level.
pub fn periodic_rotation_number(state: &PeriodicState, cfg: &SchemeConfig, x0: f64, periods: usize) -> Result<RotationNumber> {
    let u = periodic_velocity(state);
    let steps = 4 * periods * cfg.grid.steps_per_period();
    let curve = characteristic_ode(&cfg.model, cfg.c, &u, x0, 0.0, periods as f64, steps, "periodic state")?;
    rotation_number(&curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamReport {
    pub c: f64,
    pub meshes: Vec<usize>,
    /// Sup distance to the finest mesh, for every mesh but the finest.
    pub u_errors: Vec<f64>,
    pub v_errors: Vec<f64>,
    pub u_fit: Option<OrderFit>,
    pub v_fit: Option<OrderFit>,
    pub failures: Vec<(usize, String)>,
}

impl KamReport {
    pub fn exact(&self) -> bool {
        self.u_errors.iter().chain(&self.v_errors).all(|&e| e == 0.0)
    }
}

fn normalized_v(u0: &GridField) -> Result<GridField> {
    let v = integrate_field(u0, 0.0)?;
    let mean = v.values.iter().sum::<f64>() / v.values.len() as f64;
    Ok(v.shifted(-mean))
}

/// Self-convergence of the periodic states over `meshes` (ascending `N`,
/// `K = k_factor N`) against the finest successful one.
pub fn kam_self_convergence(
    model: &FluxModel,
    c: f64,
    meshes: &[usize],
    k_factor: usize,
    tol: f64,
    max_periods: usize,
) -> Result<KamReport> {
    if meshes.len() < 2 {
        return Err(Error::InvalidArgument("self-convergence needs at least 2 meshes".into()));
    }
    let runs: Vec<(usize, Result<PeriodicState>)> = meshes
        .par_iter()
        .map(|&n| {
            let run = || -> Result<PeriodicState> {
                let cfg = SchemeConfig::new(model.clone(), StaggeredGrid::new(n, k_factor.max(1) * n)?, c);
                find_periodic_u(&cfg, tol, max_periods, None)
            };
            (n, run())
        })
        .collect();
    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (n, r) in runs {
        match r {
            Ok(st) => ok.push((n, st)),
            Err(e) => failures.push((n, e.to_string())),
        }
    }
    ok.sort_by_key(|(n, _)| *n);
    let (_, finest) = ok.last().ok_or_else(|| Error::InvalidArgument("no mesh converged".into()))?;
    let v_ref = normalized_v(finest.u0())?;
    let mut used = Vec::new();
    let mut u_errors = Vec::new();
    let mut v_errors = Vec::new();
    for (n, st) in &ok[..ok.len() - 1] {
        used.push(*n);
        u_errors.push(field_distance(st.u0(), finest.u0())?.1);
        v_errors.push(field_distance(&normalized_v(st.u0())?, &v_ref)?.1);
    }
    let h: Vec<f64> = used.iter().map(|&n| 1.0 / (2 * n) as f64).collect();
    let u_fit = if used.len() >= 3 { Some(fit_order(&h, &u_errors)?) } else { None };
    let v_fit = if used.len() >= 3 { Some(fit_order(&h, &v_errors)?) } else { None };
    Ok(KamReport { c, meshes: used, u_errors, v_errors, u_fit, v_fit, failures })
}

/// `h-bar(c)` of `p^2/2 + A cos(2 pi x)`: `max V` on the flat piece
/// `|c| <= 4 sqrt|A| / pi`, otherwise the root of `mean sqrt(2(h - V)) = |c|`.
pub fn mechanical_cell_oracle(amplitude: f64, c: f64) -> Result<f64> {
    let a = amplitude.abs();
    let edge = 4.0 * a.sqrt() / PI;
    if c.abs() <= edge {
        return Ok(a);
    }
    let quad = Quadrature { order: 16, panels: 64 };
    let rule = quad.rule()?;
    let mean_speed = |h: f64| quad.integrate(&rule, 0.0, 1.0, &|x| (2.0 * (h - a * (2.0 * PI * x).cos())).max(0.0).sqrt());
    let (mut lo, mut hi) = (a, a + 0.5 * c * c + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_speed(mid) < c.abs() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Mean walk path against the exact backward characteristic on one mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkGap {
    pub n: usize,
    /// `max_k |E[gamma^k] - gamma*(t_k)|` with the sample mean.
    pub mean_gap: f64,
    /// Monte Carlo standard error of the sample mean at level 0.
    pub mean_std_error: f64,
    /// Sample average of `max_k |gamma^k - gamma*(t_k)|`.
    pub path_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkStudy {
    pub gaps: Vec<WalkGap>,
    pub mean_fit: OrderFit,
    pub path_fit: OrderFit,
}

/// Samples minimizing walks from the odd node nearest `(x, t)` on each mesh
/// and compares them with the characteristic of the exact solution
/// (straight lines before the first shock of an x,t-independent flux).
pub fn walk_characteristic_study(
    model: &FluxModel,
    c: f64,
    profile: &InitialProfile,
    x: f64,
    t: f64,
    meshes: &[usize],
    k_factor: usize,
    n_samples: usize,
    seed: u64,
) -> Result<WalkStudy> {
    let reference = ReferenceSolution::characteristics(model.clone(), *profile, c, 0.0)?;
    let gaps: Vec<WalkGap> = meshes
        .par_iter()
        .map(|&n| -> Result<WalkGap> {
            let grid = StaggeredGrid::new(n, k_factor.max(1) * n)?;
            let cfg = SchemeConfig::new(model.clone(), grid, c);
            let level = exact_level(grid, t)?;
            let mut apex = (x / grid.dx()).round() as i64;
            if (apex + level as i64).rem_euclid(2) != 1 {
                apex += 1;
            }
            let hist = solve(&cfg, profile.discretize_v(grid)?, level, 1)?.snapshots;
            let cone = WalkCone::new(grid, apex, level)?;
            let xi = minimizing_velocity_field(&hist, &cfg, cone)?;
            let ens = sample_paths(&xi, n_samples, seed)?;
            let sub = 4;
            let u = |y: f64, s: f64| reference.u(y, s).unwrap_or(f64::NAN);
            let curve = characteristic_ode(model, c, &u, grid.x(apex), grid.t(level), 0.0, sub * level, "exact")?;
            // curve index sub * (level - k) is time t_k
            let star = |k: usize| curve.x[sub * (level - k)];
            let mean_gap = (0..=level).map(|k| (ens.mean_path[k] - star(k)).abs()).fold(0.0, f64::max);
            let path_gap = ens
                .samples
                .iter()
                .map(|s| (0..=level).map(|k| (grid.x(s.columns[k]) - star(k)).abs()).fold(0.0, f64::max))
                .sum::<f64>()
                / ens.samples.len() as f64;
            Ok(WalkGap { n, mean_gap, mean_std_error: ens.mean_std_error[0], path_gap })
        })
        .collect::<Result<_>>()?;
    let h: Vec<f64> = meshes.iter().map(|&n| 1.0 / (2 * n) as f64).collect();
    let mean_fit = fit_order(&h, &gaps.iter().map(|g| g.mean_gap).collect::<Vec<_>>())?;
    let path_fit = fit_order(&h, &gaps.iter().map(|g| g.path_gap).collect::<Vec<_>>())?;
    Ok(WalkStudy { gaps, mean_fit, path_fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::{apriori_constants, ConstantsWindow, CRange};

    fn burgers() -> FluxModel {
        FluxModel::Quadratic
    }

    #[test]
    fn profiles_have_matching_antiderivatives() {
        for p in [
            InitialProfile::Sine { amplitude: 0.2, mode: 1 },
            InitialProfile::Sine { amplitude: -0.3, mode: 2 },
            InitialProfile::Sawtooth { amplitude: 0.9 },
        ] {
            for i in 1..50 {
                let x = i as f64 / 50.0 + 0.003;
                let h = 1e-6;
                let d = (p.v0(x + h) - p.v0(x - h)) / (2.0 * h);
                assert!((d - p.u0(x)).abs() < 1e-6, "{p:?} at {x}");
            }
            assert!(p.v0(1.0).abs() < 1e-14 && p.v0(0.0).abs() < 1e-14);
        }
    }

    #[test]
    fn hopf_lax_trivial_values() {
        let zero = |_: f64| 0.0;
        assert!(hopf_lax_reference(&burgers(), &zero, 0.0, 0.0, 0.0, 0.3, 0.5, 101).unwrap().abs() < 1e-12);
        let v = hopf_lax_reference(&burgers(), &zero, 0.0, 1.0, 0.0, 0.3, 0.5, 101).unwrap();
        assert!((v + 0.25).abs() < 1e-12, "{v}");
        let sep = FluxModel::Separable { amplitude: 0.1 };
        assert!(matches!(hopf_lax_reference(&sep, &zero, 0.0, 0.0, 0.0, 0.3, 0.5, 101), Err(Error::NotSpaceTimeIndependent(_))));
    }

    #[test]
    fn hopf_lax_is_monotone_in_data() {
        let p = InitialProfile::Sine { amplitude: 0.2, mode: 1 };
        for i in 0..10 {
            let x = i as f64 / 10.0;
            let a = hopf_lax_reference(&burgers(), &|y| p.v0(y), 0.2, 0.0, 0.0, x, 0.5, 401).unwrap();
            let b = hopf_lax_reference(&burgers(), &|y| p.v0(y) + 0.01 * (3.0 * y).sin().abs(), 0.21, 0.0, 0.0, x, 0.5, 401).unwrap();
            assert!(b >= a - 1e-14);
        }
    }

    #[test]
    fn references_agree_before_the_shock() {
        let p = InitialProfile::Sine { amplitude: 0.2, mode: 1 };
        let hl = ReferenceSolution::hopf_lax(burgers(), p, 0.1, 0.0, 2001).unwrap();
        let ch = ReferenceSolution::characteristics(burgers(), p, 0.1, 0.0).unwrap();
        for i in 0..20 {
            let x = i as f64 / 20.0;
            assert!((hl.v(x, 0.4).unwrap() - ch.v(x, 0.4).unwrap()).abs() < 1e-11);
            assert!((hl.u(x, 0.4).unwrap() - ch.u(x, 0.4).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn hopf_lax_matches_fine_mesh() {
        let p = InitialProfile::Sine { amplitude: 0.2, mode: 1 };
        let cfg = SchemeConfig::new(burgers(), StaggeredGrid::new(512, 512).unwrap(), 0.0);
        let fine = ReferenceSolution::fine_mesh(&cfg, &p, &[0.5]).unwrap();
        let hl = ReferenceSolution::hopf_lax(burgers(), p, 0.0, 0.0, 2001).unwrap();
        for i in 0..16 {
            let x = i as f64 / 16.0 + 0.01;
            assert!((fine.v(x, 0.5).unwrap() - hl.v(x, 0.5).unwrap()).abs() < 2e-3);
        }
    }

    #[test]
    fn self_distance_is_zero() {
        let g = StaggeredGrid::new(16, 16).unwrap();
        let p = InitialProfile::Sine { amplitude: 0.2, mode: 1 };
        let v = p.discretize_v(g).unwrap();
        let u = u_from_v(&v).unwrap();
        assert_eq!(field_distance(&u, &u).unwrap(), (0.0, 0.0));
        assert_eq!(field_distance(&v, &v).unwrap(), (0.0, 0.0));
        let cfg = SchemeConfig::new(burgers(), g, 0.0);
        let r = ReferenceSolution::fine_mesh(&cfg, &p, &[0.0]).unwrap();
        let rep = field_error(&u, &r, &[Norm::L1, Norm::Sup]).unwrap();
        assert_eq!((rep.l1, rep.sup), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn merged_distance_of_steps() {
        // u = 1 on the coarse grid versus 0: L1 = 1, sup = 1, regardless of grids
        let a = GridField::from_fn(StaggeredGrid::new(4, 4).unwrap(), Parity::Even, 0, |_| 1.0);
        let b = GridField::zeros(StaggeredGrid::new(12, 12).unwrap(), Parity::Even, 1);
        let (l1, sup) = field_distance(&a, &b).unwrap();
        assert!((l1 - 1.0).abs() < 1e-14 && sup == 1.0);
    }

    #[test]
    fn fit_recovers_slope_and_is_scale_invariant() {
        let h = [0.1, 0.05, 0.025, 0.0125];
        let e: Vec<f64> = h.iter().map(|x: &f64| 3.0 * x.powf(0.75)).collect();
        let f = fit_order(&h, &e).unwrap();
        assert!((f.slope - 0.75).abs() < 1e-12 && f.residual < 1e-12 && f.monotone);
        let g = fit_order(&h, &e.iter().map(|x| 7.0 * x).collect::<Vec<_>>()).unwrap();
        assert!((g.slope - f.slope).abs() < 1e-12);
        assert!(fit_order(&h[..2], &e[..2]).is_err());
        let z = fit_order(&h, &[0.0; 4]).unwrap();
        assert!(z.exact);
    }

    #[test]
    fn v_converges_at_half_order_or_better() {
        let problem = ConvergenceProblem::new(burgers(), InitialProfile::Sine { amplitude: 0.2, mode: 1 }, 0.5, Quantity::VSup);
        let study = convergence_study(&problem, &[8, 16, 32]).unwrap();
        assert_eq!(study.reference, ReferenceKind::HopfLax);
        assert!(study.fit.slope >= 0.5, "{:?}", study.fit);
        let mut buf = Vec::new();
        study.write_csv_to(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("mesh,dx,error,order\n8,"));
    }

    #[test]
    fn stability_trivial_run() {
        let cfg = SchemeConfig::new(burgers(), StaggeredGrid::new(8, 8).unwrap(), 0.3);
        let consts = apriori_constants(&burgers(), 1.0, 1.25, &ConstantsWindow::new(CRange::point(0.3)), 0.0).unwrap();
        let rep = stability_longrun(&cfg, &GridField::zeros(cfg.grid, Parity::Even, 0), 3, &consts, 0.5).unwrap();
        assert!(rep.records.iter().all(|r| r.max_abs == 0.0 && (r.min_cfl_margin - 0.7).abs() < 1e-15));
    }

    #[test]
    fn stability_reports_the_failing_step() {
        let cfg = SchemeConfig::new(burgers(), StaggeredGrid::new(8, 8).unwrap(), 0.0);
        let consts = apriori_constants(&burgers(), 1.0, 1.25, &ConstantsWindow::new(CRange::point(0.0)), 0.5).unwrap();
        let u0 = InitialProfile::Sine { amplitude: 0.5, mode: 1 }.discretize_u(cfg.grid).unwrap();
        // an impossible margin floor fails at the first step
        match stability_longrun(&cfg, &u0, 1, &consts, 10.0) {
            Err(Error::StabilityViolation { step, .. }) => assert_eq!(step, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn straight_characteristic_and_rotation() {
        let zero = |_: f64, _: f64| 0.0;
        let curve = characteristic_ode(&burgers(), 0.7, &zero, 0.1, 0.0, 24.0, 2400, "zero").unwrap();
        assert!((curve.x[2400] - (0.1 + 0.7 * 24.0)).abs() < 1e-12);
        let rot = rotation_number(&curve).unwrap();
        assert!((rot.omega - 0.7).abs() < 1e-13 && rot.half_width < 1e-13);
        let short = characteristic_ode(&burgers(), 0.7, &zero, 0.1, 0.0, 2.0, 100, "zero").unwrap();
        assert!(rotation_number(&short).is_err());
        assert!(characteristic_ode(&burgers(), 0.7, &zero, 0.1, 0.0, 0.0, 10, "zero").is_err());
    }

    #[test]
    fn trapped_regime_has_zero_rotation() {
        let cfg = SchemeConfig::new(FluxModel::Separable { amplitude: 0.25 }, StaggeredGrid::new(16, 32).unwrap(), 0.2);
        let st = find_periodic_u(&cfg, 1e-10, 1000, None).unwrap();
        let rot = periodic_rotation_number(&st, &cfg, 0.3, 20).unwrap();
        assert!(rot.omega.abs() < 0.05, "{rot:?}");
    }

    #[test]
    fn integrable_self_convergence_is_exact() {
        let rep = kam_self_convergence(&burgers(), 0.5, &[8, 16, 32, 64], 1, 1e-12, 5).unwrap();
        assert!(rep.exact());
        assert!(rep.u_fit.unwrap().exact);
    }

    #[test]
    fn cell_oracle() {
        assert_eq!(mechanical_cell_oracle(0.25, 0.0).unwrap(), 0.25);
        assert_eq!(mechanical_cell_oracle(0.25, 0.6).unwrap(), 0.25);
        // far from the flat piece the potential averages out
        let h = mechanical_cell_oracle(0.25, 3.0).unwrap();
        assert!((h - 4.5).abs() < 0.01, "{h}");
        let h2 = mechanical_cell_oracle(0.0, 1.0).unwrap();
        assert!((h2 - 0.5).abs() < 1e-12);
    }
}
