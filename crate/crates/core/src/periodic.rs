//! Space-time periodic difference solutions and the discrete effective
//! Hamiltonian.
//!
//! The time-1 map (one period is `2K` steps) is a strict `L1` contraction on
//! zero-mean even data, so plain iteration finds its unique fixed point. The
//! effective Hamiltonian is the space-time average of `H` along that state
//! and, independently, minus the per-period drift of the `v` scheme.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::Flux;
use crate::grid::{integrate_field, GridField, Parity};
use crate::scheme::{advance, solve, SchemeConfig};

/// Periods of `v` stepping used by the drift method.
pub const DEFAULT_DRIFT_PERIODS: usize = 8;
/// The drift is averaged over this many trailing periods.
pub const DRIFT_WINDOW: usize = 4;

/// Steps `field` through one period and relabels the result to the level it
/// started from, so time-periodic fluxes see exactly the same phases again.
pub fn time_one_map(cfg: &SchemeConfig, field: &GridField) -> Result<GridField> {
    let mut out = advance(cfg, field, cfg.grid.steps_per_period())?;
    out.k = field.k;
    Ok(out)
}

/// A converged periodic state `u-bar` for one shift `c`.
#[derive(Clone, Debug)]
pub struct PeriodicState {
    pub c: f64,
    /// `u-bar^k` for `k = 0..2K` (one full period, level 0 first).
    pub period: Vec<GridField>,
    /// Period-to-period `L1` residuals, one per iteration.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// Median ratio of successive residuals.
    pub rho: f64,
    pub effective: Option<EffectiveHamiltonian>,
    pub periodic_v: Option<PeriodicV>,
}

impl PeriodicState {
    pub fn u0(&self) -> &GridField {
        &self.period[0]
    }

    pub fn residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }

    /// Writes `<prefix>_k<level>.csv` per snapshot plus `<prefix>_summary.json`.
    pub fn export(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for snap in &self.period {
            let path = dir.join(format!("{prefix}_k{:06}.csv", snap.k));
            snap.write_csv(&path)?;
            written.push(path);
        }
        let summary = serde_json::json!({
            "c": self.c,
            "iterations": self.iterations,
            "residual": self.residual(),
            "residuals": self.residuals,
            "rho": self.rho,
            "effective": self.effective,
            "b": self.periodic_v.as_ref().map(|p| p.b),
            "v_spread": self.periodic_v.as_ref().map(|p| p.spread),
        });
        let side = dir.join(format!("{prefix}_summary.json"));
        fs::write(&side, serde_json::to_string_pretty(&summary)?)?;
        written.push(side);
        if let Some(pv) = &self.periodic_v {
            let path = dir.join(format!("{prefix}_v0.csv"));
            pv.v0.write_csv(&path)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn median_ratio(residuals: &[f64]) -> f64 {
    let mut ratios: Vec<f64> = residuals
        .windows(2)
        .filter(|w| w[0] > 0.0 && w[1] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    if ratios.is_empty() {
        return 0.0;
    }
    ratios.sort_by(f64::total_cmp);
    let n = ratios.len();
    if n % 2 == 1 {
        ratios[n / 2]
    } else {
        0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
    }
}

/// Iterates the time-1 map from `start` (zero data by default) until the
/// `L1` distance between consecutive periods is at most `tol`.
pub fn find_periodic_u(cfg: &SchemeConfig, tol: f64, max_periods: usize, start: Option<GridField>) -> Result<PeriodicState> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let mut u = match start {
        Some(f) => {
            f.expect_parity(Parity::Even)?;
            let mut f = f;
            f.k = 0;
            f
        }
        None => GridField::zeros(cfg.grid, Parity::Even, 0),
    };
    let mut residuals = Vec::new();
    for p in 1..=max_periods {
        let next = time_one_map(cfg, &u)?;
        let r = next.l1_distance(&u);
        residuals.push(r);
        u = next;
        if r <= tol {
            let period = solve(cfg, u, cfg.grid.steps_per_period() - 1, 1)?.snapshots;
            return Ok(PeriodicState {
                c: cfg.c,
                period,
                rho: median_ratio(&residuals),
                residuals,
                iterations: p,
                effective: None,
                periodic_v: None,
            });
        }
    }
    Err(Error::PeriodicNonConvergence {
        periods: max_periods,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
        tolerance: tol,
    })
}

/// Both estimates of `h-bar_Delta(c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveHamiltonian {
    /// Space-time average of `H(x_m, t_k, c + u-bar^k_m)` over one period.
    pub averaged: f64,
    /// Minus the per-period drift of `v` with `h = 0`.
    pub drift: f64,
    pub gap: f64,
}

impl EffectiveHamiltonian {
    pub fn value(&self) -> f64 {
        self.averaged
    }
}

/// `sum_k sum_m H(x_m, t_k, c + u-bar^k_m) 2 dx dt` over one period.
pub fn averaged_hamiltonian(state: &PeriodicState, cfg: &SchemeConfig) -> f64 {
    let w = 2.0 * cfg.grid.dx() * cfg.grid.dt();
    state
        .period
        .iter()
        .map(|u| {
            let t = u.t();
            (0..u.values.len()).map(|j| cfg.model.h(u.x(j), t, cfg.c + u.values[j])).sum::<f64>()
        })
        .sum::<f64>()
        * w
}

/// Per-period drift of the `v` scheme (with `h = 0`) started from `v0`:
/// minus the average over nodes of `v^{k + 2K} - v^k`, over the last
/// [`DRIFT_WINDOW`] of `periods` periods.
pub fn drift_hamiltonian(cfg: &SchemeConfig, v0: &GridField, periods: usize) -> Result<f64> {
    v0.expect_parity(Parity::Odd)?;
    if periods == 0 {
        return Err(Error::InvalidArgument("drift needs at least one period".into()));
    }
    let cfg0 = SchemeConfig { h: 0.0, ..cfg.clone() };
    let mut v = v0.clone();
    let mut drifts = Vec::with_capacity(periods);
    for _ in 0..periods {
        let next = time_one_map(&cfg0, &v)?;
        let d = next.values.iter().zip(&v.values).map(|(a, b)| a - b).sum::<f64>() / v.values.len() as f64;
        drifts.push(d);
        v = next;
    }
    let tail = &drifts[drifts.len().saturating_sub(DRIFT_WINDOW)..];
    Ok(-tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Evaluates both methods on a converged state, stores the result in it and
/// fails when they disagree by more than `10 tol`.
pub fn effective_hamiltonian(state: &mut PeriodicState, cfg: &SchemeConfig, tol: f64, periods: usize) -> Result<EffectiveHamiltonian> {
    let averaged = averaged_hamiltonian(state, cfg);
    let v0 = integrate_field(state.u0(), 0.0)?;
    let drift = drift_hamiltonian(cfg, &v0, periods)?;
    let gap = (averaged - drift).abs();
    let eff = EffectiveHamiltonian { averaged, drift, gap };
    state.effective = Some(eff);
    if gap > 10.0 * tol {
        return Err(Error::MethodDisagreement { gap, limit: 10.0 * tol });
    }
    Ok(eff)
}

/// `v-bar^0` with its verified per-period constant.
#[derive(Clone, Debug)]
pub struct PeriodicV {
    /// Discrete antiderivative of `u-bar^0`, normalized to zero mean.
    pub v0: GridField,
    /// Constant `v-bar^{2K} - v-bar^0` after one period with `h = h-bar`.
    pub b: f64,
    /// `max - min` of the per-node discrepancy.
    pub spread: f64,
}

/// Builds `v-bar^0` from `u-bar^0`, steps one period with `h = h-bar` and
/// checks that it comes back shifted by a spatial constant.
pub fn periodic_v(state: &mut PeriodicState, cfg: &SchemeConfig, tol: f64) -> Result<PeriodicV> {
    let h_bar = state
        .effective
        .map(|e| e.value())
        .ok_or_else(|| Error::InvalidArgument("periodic_v needs the effective Hamiltonian first".into()))?;
    let raw = integrate_field(state.u0(), 0.0)?;
    let mean = raw.values.iter().sum::<f64>() / raw.values.len() as f64;
    let v0 = raw.shifted(-mean);
    let cfg_h = cfg.clone().with_h(h_bar);
    let back = time_one_map(&cfg_h, &v0)?;
    let diff: Vec<f64> = back.values.iter().zip(&v0.values).map(|(a, b)| a - b).collect();
    let hi = diff.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = diff.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = hi - lo;
    if spread > tol {
        return Err(Error::NonConstantDiscrepancy { spread, tolerance: tol });
    }
    let b = diff.iter().sum::<f64>() / diff.len() as f64;
    let pv = PeriodicV { v0, b, spread };
    state.periodic_v = Some(pv.clone());
    Ok(pv)
}

/// `L1` distance between two evolutions at integer times `0, 1, 2, ...`,
/// stopping once it falls below `floor` or after `max_periods`.
pub fn contraction_sequence(cfg: &SchemeConfig, a: &GridField, b: &GridField, max_periods: usize, floor: f64) -> Result<Vec<f64>> {
    a.expect_parity(Parity::Even)?;
    b.expect_parity(Parity::Even)?;
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut out = vec![a.l1_distance(&b)];
    for _ in 0..max_periods {
        if *out.last().unwrap() < floor {
            break;
        }
        a = time_one_map(cfg, &a)?;
        b = time_one_map(cfg, &b)?;
        out.push(a.l1_distance(&b));
    }
    Ok(out)
}

/// One point of an effective Hamiltonian sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub c: f64,
    pub h_bar: Option<f64>,
    pub gap: Option<f64>,
    pub iterations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveCurve {
    pub points: Vec<SweepPoint>,
    /// Second divided differences at interior points (missing when a neighbour failed).
    pub second_differences: Vec<Option<f64>>,
}

impl EffectiveCurve {
    pub fn min_second_difference(&self) -> Option<f64> {
        self.second_differences.iter().flatten().copied().reduce(f64::min)
    }

    pub fn failures(&self) -> usize {
        self.points.iter().filter(|p| p.error.is_some()).count()
    }

    /// `sup |h - h_ref|` over the shifts both curves resolved.
    pub fn sup_gap(&self, reference: &EffectiveCurve) -> f64 {
        let mut worst: f64 = 0.0;
        for p in &self.points {
            if let Some(q) = reference.points.iter().find(|q| (q.c - p.c).abs() < 1e-12) {
                if let (Some(a), Some(b)) = (p.h_bar, q.h_bar) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        worst
    }

    /// CSV with columns `c,h_bar,gap,second_difference` (blank when undefined).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_to(&self, w: &mut dyn Write) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        writeln!(w, "c,h_bar,gap,second_difference")?;
        for (i, p) in self.points.iter().enumerate() {
            let sd = if i == 0 || i + 1 == self.points.len() { None } else { self.second_differences[i - 1] };
            writeln!(w, "{:.17e},{},{},{}", p.c, opt(p.h_bar), opt(p.gap), opt(sd))?;
        }
        Ok(())
    }
}

/// `[(h_{i+1}-h_i)/(c_{i+1}-c_i) - (h_i-h_{i-1})/(c_i-c_{i-1})] / ((c_{i+1}-c_{i-1})/2)`
pub fn second_differences(c: &[f64], h: &[Option<f64>]) -> Vec<Option<f64>> {
    (1..c.len().saturating_sub(1))
        .map(|i| match (h[i - 1], h[i], h[i + 1]) {
            (Some(a), Some(b), Some(d)) => {
                let right = (d - b) / (c[i + 1] - c[i]);
                let left = (b - a) / (c[i] - c[i - 1]);
                Some((right - left) / (0.5 * (c[i + 1] - c[i - 1])))
            }
            _ => None,
        })
        .collect()
}

/// Runs the periodic search and both effective Hamiltonian methods for each
/// shift in `c_list`, in parallel. Failures are recorded per point.
pub fn sweep(base: &SchemeConfig, c_list: &[f64], tol: f64, max_periods: usize) -> Result<EffectiveCurve> {
    if c_list.len() < 3 {
        return Err(Error::InvalidArgument("a sweep needs at least 3 shifts".into()));
    }
    if c_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("sweep shifts must be strictly increasing".into()));
    }
    let points: Vec<SweepPoint> = c_list
        .par_iter()
        .map(|&c| {
            let cfg = SchemeConfig { c, h: 0.0, ..base.clone() };
            let run = || -> Result<(usize, EffectiveHamiltonian)> {
                let mut st = find_periodic_u(&cfg, tol, max_periods, None)?;
                let eff = effective_hamiltonian(&mut st, &cfg, tol, DEFAULT_DRIFT_PERIODS)?;
                Ok((st.iterations, eff))
            };
            match run() {
                Ok((it, eff)) => SweepPoint { c, h_bar: Some(eff.value()), gap: Some(eff.gap), iterations: Some(it), error: None },
                Err(e) => SweepPoint { c, h_bar: None, gap: None, iterations: None, error: Some(e.to_string()) },
            }
        })
        .collect();
    let h: Vec<Option<f64>> = points.iter().map(|p| p.h_bar).collect();
    Ok(EffectiveCurve { second_differences: second_differences(c_list, &h), points })
}
