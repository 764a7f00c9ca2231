//! Lax-Friedrichs steppers on the staggered grid.
//!
//! `u` (conservation law) lives on the even grid and `v` (Hamilton-Jacobi)
//! on the odd grid. Both updates read two neighbouring columns at level `k`
//! and write the column between them at level `k + 1`; differencing `v`
//! commutes with stepping.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::{AprioriConstants, Flux, FluxModel};
use crate::grid::{u_from_v, GridField, Parity, StaggeredGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CflPolicy {
    #[default]
    Abort,
    Warn,
}

#[derive(Clone, Debug)]
pub struct SchemeConfig {
    pub model: FluxModel,
    /// Momentum shift.
    pub c: f64,
    /// Right-hand constant of the `v` equation.
    pub h: f64,
    pub grid: StaggeredGrid,
    pub cfl: CflPolicy,
}

impl SchemeConfig {
    pub fn new(model: FluxModel, grid: StaggeredGrid, c: f64) -> Self {
        SchemeConfig { model, c, h: 0.0, grid, cfl: CflPolicy::Abort }
    }

    pub fn with_h(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    pub fn with_cfl(mut self, cfl: CflPolicy) -> Self {
        self.cfl = cfl;
        self
    }
}

/// Largest `|lambda H_p(x_m, t_k, c + u_m)|` and the column attaining it.
fn cfl_peak(u: &GridField, cfg: &SchemeConfig) -> (f64, i64) {
    let lam = cfg.grid.lambda();
    let tk = u.t();
    let mut peak = (0.0, u.column(0));
    for (j, &uj) in u.values.iter().enumerate() {
        let s = (lam * cfg.model.h_p(u.x(j), tk, cfg.c + uj)).abs();
        if s > peak.0 || s.is_nan() {
            peak = (s, u.column(j));
        }
    }
    peak
}

/// `min_m 1 - |lambda H_p(x_m, t_k, c + u^k_m)|`; positive iff CFL holds strictly.
/// Odd fields are differenced first.
pub fn cfl_margin(field: &GridField, cfg: &SchemeConfig) -> f64 {
    match field.parity {
        Parity::Even => 1.0 - cfl_peak(field, cfg).0,
        Parity::Odd => 1.0 - cfl_peak(&u_from_v(field).expect("odd field"), cfg).0,
    }
}

fn check_cfl(u: &GridField, cfg: &SchemeConfig) -> Result<bool> {
    let (peak, column) = cfl_peak(u, cfg);
    if peak < 1.0 {
        return Ok(true);
    }
    match cfg.cfl {
        CflPolicy::Abort => Err(Error::Cfl { step: u.k, column, value: peak }),
        CflPolicy::Warn => Ok(false),
    }
}

/// `u^{k+1}_{m+1} = (u_m + u_{m+2})/2 - lambda/2 [H(x_{m+2}, t_k, c + u_{m+2}) - H(x_m, t_k, c + u_m)]`
pub fn step_u(u: &GridField, cfg: &SchemeConfig) -> Result<GridField> {
    u.expect_parity(Parity::Even)?;
    check_cfl(u, cfg)?;
    Ok(step_u_unchecked(u, cfg))
}

fn step_u_unchecked(u: &GridField, cfg: &SchemeConfig) -> GridField {
    let n = u.grid.n;
    let lam = cfg.grid.lambda();
    let tk = u.t();
    let o = u.offset() as usize;
    let flux: Vec<f64> = (0..n).map(|j| cfg.model.h(u.x(j), tk, cfg.c + u.values[j])).collect();
    let mut out = GridField::zeros(u.grid, Parity::Even, u.k + 1);
    for j in 0..n {
        let jn = if j + 1 == n { 0 } else { j + 1 };
        out.values[(j + o) % n] = 0.5 * (u.values[j] + u.values[jn]) - 0.5 * lam * (flux[jn] - flux[j]);
    }
    out
}

/// `v^{k+1}_m = (v_{m-1} + v_{m+1})/2 - dt [H(x_m, t_k, c + D_x v_{m+1}) - h]`
pub fn step_v(v: &GridField, cfg: &SchemeConfig) -> Result<GridField> {
    v.expect_parity(Parity::Odd)?;
    check_cfl(&u_from_v(v)?, cfg)?;
    Ok(step_v_unchecked(v, cfg))
}

fn step_v_unchecked(v: &GridField, cfg: &SchemeConfig) -> GridField {
    let n = v.grid.n;
    let dt = cfg.grid.dt();
    let two_dx = 2.0 * cfg.grid.dx();
    let tk = v.t();
    let o = v.offset() as usize;
    let mut out = GridField::zeros(v.grid, Parity::Odd, v.k + 1);
    for j in 0..n {
        let jn = if j + 1 == n { 0 } else { j + 1 };
        let m = v.column(j) + 1;
        let slope = (v.values[jn] - v.values[j]) / two_dx;
        out.values[(j + o) % n] =
            0.5 * (v.values[j] + v.values[jn]) - dt * (cfg.model.h(cfg.grid.x(m), tk, cfg.c + slope) - cfg.h);
    }
    out
}

/// Steps either parity.
pub fn step(field: &GridField, cfg: &SchemeConfig) -> Result<GridField> {
    match field.parity {
        Parity::Even => step_u(field, cfg),
        Parity::Odd => step_v(field, cfg),
    }
}

/// One-sided Lipschitz constant `E^k = max_m (u_{m+2} - u_m) / (2 dx)`.
pub fn one_sided_lipschitz(u: &GridField) -> f64 {
    let n = u.values.len();
    let two_dx = 2.0 * u.grid.dx();
    (0..n)
        .map(|j| (u.values[(j + 1) % n] - u.values[j]) / two_dx)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub k: usize,
    pub t: f64,
    /// `sum_j field_j 2 dx` of the stepped field.
    pub mean: f64,
    pub max_abs: f64,
    pub cfl_margin: f64,
    #[serde(rename = "E_k")]
    pub e_k: f64,
}

fn diagnose(field: &GridField, cfg: &SchemeConfig) -> StepDiagnostics {
    let u = match field.parity {
        Parity::Even => field.clone(),
        Parity::Odd => u_from_v(field).expect("odd field"),
    };
    StepDiagnostics {
        k: field.k,
        t: field.t(),
        mean: field.integral(),
        max_abs: u.max_abs(),
        cfl_margin: 1.0 - cfl_peak(&u, cfg).0,
        e_k: one_sided_lipschitz(&u),
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Recorded snapshots in level order; always includes the first and last.
    pub snapshots: Vec<GridField>,
    /// One entry per level `0..=k_end`.
    pub diagnostics: Vec<StepDiagnostics>,
    /// Levels at which the CFL condition failed under [`CflPolicy::Warn`].
    pub cfl_warnings: Vec<usize>,
}

impl Trajectory {
    pub fn last(&self) -> &GridField {
        self.snapshots.last().expect("trajectory is never empty")
    }

    pub fn at_level(&self, k: usize) -> Option<&GridField> {
        self.snapshots.binary_search_by_key(&k, |f| f.k).ok().map(|i| &self.snapshots[i])
    }

    /// Writes `<prefix>_k<level>.csv` per snapshot and `<prefix>_diagnostics.json`.
    pub fn export(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for snap in &self.snapshots {
            let path = dir.join(format!("{prefix}_k{:06}.csv", snap.k));
            snap.write_csv(&path)?;
            written.push(path);
        }
        let side = dir.join(format!("{prefix}_diagnostics.json"));
        fs::write(&side, serde_json::to_string_pretty(&self.diagnostics)?)?;
        written.push(side);
        Ok(written)
    }
}

/// Steps `initial` to level `initial.k + k_end`, recording every
/// `record_every`-th snapshot (and the last one).
pub fn solve(cfg: &SchemeConfig, initial: GridField, k_end: usize, record_every: usize) -> Result<Trajectory> {
    let every = record_every.max(1);
    let mut diagnostics = vec![diagnose(&initial, cfg)];
    let mut cfl_warnings = Vec::new();
    let k0 = initial.k;
    let mut snapshots = vec![initial.clone()];
    let mut current = initial;
    for i in 1..=k_end {
        let u = match current.parity {
            Parity::Even => None,
            Parity::Odd => Some(u_from_v(&current)?),
        };
        if !check_cfl(u.as_ref().unwrap_or(&current), cfg)? {
            cfl_warnings.push(current.k);
        }
        current = match current.parity {
            Parity::Even => step_u_unchecked(&current, cfg),
            Parity::Odd => step_v_unchecked(&current, cfg),
        };
        diagnostics.push(diagnose(&current, cfg));
        if i % every == 0 || i == k_end {
            snapshots.push(current.clone());
        }
    }
    debug_assert_eq!(diagnostics.len(), k_end + 1);
    debug_assert_eq!(snapshots.last().map(|s| s.k), Some(k0 + k_end));
    Ok(Trajectory { snapshots, diagnostics, cfl_warnings })
}

/// Steps `steps` times, keeping only the final field.
pub fn advance(cfg: &SchemeConfig, initial: &GridField, steps: usize) -> Result<GridField> {
    let mut current = initial.clone();
    for _ in 0..steps {
        current = step(&current, cfg)?;
    }
    Ok(current)
}

/// Hypotheses under which the one-sided Lipschitz decay estimates hold.
#[derive(Clone, Debug, Serialize)]
pub struct EntropyHypotheses {
    /// `lambda < lambda1`
    pub below_lambda1: bool,
    /// `dt < min(1/(2 eta), 1/(E* H*_pp + 2 H*_xp))`
    pub small_dt: bool,
    /// `sup lambda (|H_p| + H*_xp 2 dx) < 1` over the window.
    pub strict_cfl: bool,
    /// `lambda <= (1 - 2 H*_xp dt) / (r H*_pp + (1 + H*_pp) dx)`
    pub lambda_cap: bool,
    pub strict_cfl_value: f64,
    pub lambda_cap_value: f64,
}

impl EntropyHypotheses {
    pub fn all(&self) -> bool {
        self.below_lambda1 && self.small_dt && self.strict_cfl && self.lambda_cap
    }
}

/// Evaluates the decay-estimate hypotheses for `grid`, sampling `H_p` over
/// `x, t` lattices, the c-samples and `|u| <= u*`.
pub fn entropy_hypotheses<F: Flux + ?Sized>(
    model: &F,
    consts: &AprioriConstants,
    grid: StaggeredGrid,
    c_samples: &[f64],
    density: usize,
) -> EntropyHypotheses {
    let lam = grid.lambda();
    let dt = grid.dt();
    let dx = grid.dx();
    let n = density.max(8);
    let mut sup_hp: f64 = 0.0;
    for ix in 0..n {
        let x = ix as f64 / n as f64;
        for it in 0..n {
            let t = it as f64 / n as f64;
            for &c in c_samples {
                for iu in 0..=n {
                    let u = -consts.u_star + 2.0 * consts.u_star * iu as f64 / n as f64;
                    sup_hp = sup_hp.max(model.h_p(x, t, c + u).abs());
                }
            }
        }
    }
    let strict = lam * (sup_hp + consts.h_xp_star * 2.0 * dx);
    let cap = (1.0 - 2.0 * consts.h_xp_star * dt) / (consts.r * consts.h_pp_star + (1.0 + consts.h_pp_star) * dx);
    let dt_cap = (1.0 / (2.0 * consts.eta)).min(1.0 / (consts.e_star * consts.h_pp_star + 2.0 * consts.h_xp_star));
    EntropyHypotheses {
        below_lambda1: lam < consts.lambda1,
        small_dt: dt < dt_cap,
        strict_cfl: strict < 1.0,
        lambda_cap: lam <= cap,
        strict_cfl_value: strict,
        lambda_cap_value: cap,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{discretize_u0, discretize_v0, Quadrature};
    use std::f64::consts::PI;

    fn burgers(n: usize, k: usize, c: f64) -> SchemeConfig {
        SchemeConfig::new(FluxModel::Quadratic, StaggeredGrid::new(n, k).unwrap(), c)
    }

    #[test]
    fn zero_state_is_fixed_for_homogeneous_flux() {
        let cfg = burgers(8, 8, 0.6);
        let u = GridField::zeros(cfg.grid, Parity::Even, 0);
        let next = step_u(&u, &cfg).unwrap();
        assert!(next.values.iter().all(|&v| v == 0.0));
        assert_eq!(next.k, 1);
    }

    #[test]
    fn single_step_hand_value() {
        // lambda = 1/2, u_m = 0, u_{m+2} = 0.4 -> 0.2 - (1/4)(0.08 - 0) = 0.18
        let cfg = burgers(4, 8, 0.0);
        let mut u = GridField::zeros(cfg.grid, Parity::Even, 0);
        u.set(2, 0.4);
        u.set(6, -0.4);
        let next = step_u(&u, &cfg).unwrap();
        assert!((next.at(1) - 0.18).abs() < 1e-15);
        assert!((next.integral() - u.integral()).abs() < 1e-14);
    }

    #[test]
    fn flat_v_examples() {
        let cfg = burgers(4, 4, 0.0);
        let v = GridField::from_fn(cfg.grid, Parity::Odd, 0, |_| 1.25);
        assert_eq!(step_v(&v, &cfg).unwrap().values, v.values);
        let cfg1 = burgers(4, 8, 1.0);
        let next = step_v(&v, &cfg1).unwrap();
        for &x in &next.values {
            assert!((x - (1.25 - 0.5 * cfg1.grid.dt())).abs() < 1e-15);
        }
    }

    #[test]
    fn margin_examples_and_abort() {
        let cfg = burgers(4, 4, 0.0);
        let u = GridField::zeros(cfg.grid, Parity::Even, 0);
        assert_eq!(cfl_margin(&u, &cfg), 1.0);
        let cfg = burgers(4, 8, 1.0);
        assert!((cfl_margin(&u, &cfg) - 0.5).abs() < 1e-15);
        let bad = burgers(4, 4, 1.0);
        assert!(cfl_margin(&u, &bad) <= 0.0);
        match step_u(&u, &bad) {
            Err(Error::Cfl { column, value, .. }) => {
                assert!(value >= 1.0);
                assert!(u.holds(column));
            }
            other => panic!("expected CFL abort, got {other:?}"),
        }
        let warn = burgers(4, 4, 1.0).with_cfl(CflPolicy::Warn);
        let traj = solve(&warn, u, 3, 1).unwrap();
        assert_eq!(traj.cfl_warnings.len(), 3);
    }

    #[test]
    fn solve_shapes() {
        let cfg = burgers(8, 8, 0.0);
        let u = GridField::zeros(cfg.grid, Parity::Even, 0);
        let t0 = solve(&cfg, u.clone(), 0, 1).unwrap();
        assert_eq!(t0.snapshots.len(), 1);
        assert_eq!(t0.diagnostics.len(), 1);
        let t = solve(&cfg, u, 10, 4).unwrap();
        assert_eq!(t.diagnostics.len(), 11);
        let ks: Vec<usize> = t.snapshots.iter().map(|s| s.k).collect();
        assert_eq!(ks, vec![0, 4, 8, 10]);
        assert!(t.at_level(8).is_some() && t.at_level(9).is_none());
    }

    #[test]
    fn commutes_with_differencing() {
        let cfg = SchemeConfig::new(FluxModel::TimeDependent { amplitude: 0.3 }, StaggeredGrid::new(16, 32).unwrap(), 0.2);
        let f = |y: f64| 0.4 * (2.0 * PI * y).sin();
        let mut v = discretize_v0(cfg.grid, &f, &Quadrature::default(), 0.0).unwrap();
        for _ in 0..64 {
            let lhs = u_from_v(&step_v(&v, &cfg).unwrap()).unwrap();
            let rhs = step_u(&u_from_v(&v).unwrap(), &cfg).unwrap();
            assert!(lhs.sup_distance(&rhs) <= 1e-13);
            v = step_v(&v, &cfg).unwrap();
        }
    }

    #[test]
    fn monotone_under_cfl() {
        let cfg = SchemeConfig::new(FluxModel::Separable { amplitude: 0.25 }, StaggeredGrid::new(16, 32).unwrap(), 0.1);
        let f = |y: f64| 0.3 * (2.0 * PI * y).sin();
        let u = discretize_u0(cfg.grid, &f, &Quadrature::default(), None).unwrap();
        let mut w = u.clone();
        for (j, v) in w.values.iter_mut().enumerate() {
            *v += 0.01 * (1.0 + (j % 3) as f64);
        }
        let (a, b) = (step_u(&u, &cfg).unwrap(), step_u(&w, &cfg).unwrap());
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x <= y));
    }

    #[test]
    fn diagnostics_sidecar_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = burgers(4, 4, 0.0);
        let traj = solve(&cfg, GridField::zeros(cfg.grid, Parity::Even, 0), 2, 1).unwrap();
        let files = traj.export(dir.path(), "u").unwrap();
        assert_eq!(files.len(), 4);
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(files.last().unwrap()).unwrap()).unwrap();
        let first = &json[0];
        for key in ["k", "t", "mean", "max_abs", "cfl_margin", "E_k"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn conservation_and_monotonicity(vals in proptest::collection::vec(-0.4f64..0.4, 16), bumps in proptest::collection::vec(0.0f64..0.1, 16), k in 0usize..5) {
                let cfg = SchemeConfig::new(FluxModel::TimeDependent { amplitude: 0.2 }, StaggeredGrid::new(16, 32).unwrap(), 0.1);
                let mean = vals.iter().sum::<f64>() / 16.0;
                let mut u = GridField::zeros(cfg.grid, Parity::Even, k);
                for (j, v) in vals.iter().enumerate() { u.values[j] = v - mean; }
                let next = step_u(&u, &cfg).unwrap();
                prop_assert!((next.integral() - u.integral()).abs() <= 1e-14);
                let mut w = u.clone();
                for (j, b) in bumps.iter().enumerate() { w.values[j] += b; }
                let nw = step_u(&w, &cfg).unwrap();
                prop_assert!(next.values.iter().zip(&nw.values).all(|(a, b)| *a <= *b + 1e-15));
            }
        }
    }
}
